"""
Run reports and their files.

``report.csv`` column schema (one row per refinement level, or per ε for the
diffusion-limit driver; fixup comparison rows carry ``fixup`` = on/off):

    driver, method, p, level, h, epsilon, fixup, unknowns, outer_iterations,
    outer_converged, inner_avg, inner_min, inner_max, err_phi, err_phi_proj,
    err_J, err_psi_moments, rt_hrt_phi, rt_hrt_J, sn_difference, balance,
    min_psi, t_sweep, t_closures, t_rhs, t_solve, t_total, rss_mb

Columns that do not apply to a driver are left empty. Timing and memory
columns (``t_*``, ``rss_mb``) are the only non-deterministic ones.
"""

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence

import numpy as np
import psutil

from core.utils.filelock import write_locked_csv, write_locked_json, write_locked_text
from core.utils.logger import get_logger

log = get_logger("🧾 report")

REPORT_COLUMNS = (
    "driver", "method", "p", "level", "h", "epsilon", "fixup", "unknowns",
    "outer_iterations", "outer_converged", "inner_avg", "inner_min", "inner_max",
    "err_phi", "err_phi_proj", "err_J", "err_psi_moments", "rt_hrt_phi", "rt_hrt_J",
    "sn_difference", "balance", "min_psi",
    "t_sweep", "t_closures", "t_rhs", "t_solve", "t_total", "rss_mb",
)
TIMING_COLUMNS = ("t_sweep", "t_closures", "t_rhs", "t_solve", "t_total", "rss_mb")
LINEOUT_COLUMNS = ("epsilon", "x", "varphi", "varphi_refined")


@dataclass
class Fit:
    order: float
    constant: float
    residual: float
    levels: int

    def as_dict(self) -> Dict[str, float]:
        return {"order": self.order, "constant": self.constant, "residual": self.residual, "levels": self.levels}


def fit_order(h: Sequence[float], errors: Sequence[float]) -> Fit:
    """
    Least-squares fit of log e = log C + k log h.

    Raises:
        ValueError: fewer than two points, or a non-positive size or error.
    """
    h, e = np.asarray(h, dtype=float), np.asarray(errors, dtype=float)
    if len(h) < 2 or len(h) != len(e):
        raise ValueError("a regression needs at least two (h, error) pairs")
    if np.any(h <= 0) or np.any(e <= 0):
        raise ValueError("mesh sizes and errors must be positive for a log fit")
    A = np.column_stack([np.log(h), np.ones_like(h)])
    coef, *_ = np.linalg.lstsq(A, np.log(e), rcond=None)
    residual = float(np.linalg.norm(A @ coef - np.log(e)))
    return Fit(order=float(coef[0]), constant=float(math.exp(coef[1])), residual=residual, levels=len(h))


def rss_mb() -> float:
    """Resident set size of this process in MiB."""
    return float(psutil.Process().memory_info().rss) / 2**20


@dataclass
class RunReport:
    driver: str
    config_text: str
    design_notes: List[str] = field(default_factory=list)
    rows: List[Dict[str, object]] = field(default_factory=list)
    fits: Dict[str, Fit] = field(default_factory=dict)
    checks: Dict[str, bool] = field(default_factory=dict)
    lineout: List[Dict[str, float]] = field(default_factory=list)

    def add_row(self, **values) -> Dict[str, object]:
        unknown = set(values) - set(REPORT_COLUMNS)
        if unknown:
            raise ValueError(f"unknown report columns: {', '.join(sorted(unknown))}")
        self.rows.append(values)
        return values

    def check(self, name: str, passed: bool, detail: str = "") -> bool:
        self.checks[name] = bool(passed)
        if passed:
            log.info(f"✅ {name} {detail}".rstrip())
        else:
            log.error(f"❌ check failed: {name} {detail}".rstrip())
        return bool(passed)

    @property
    def passed(self) -> bool:
        return all(self.checks.values())

    def column(self, name: str, **where) -> List[object]:
        return [r.get(name) for r in self.rows if all(r.get(k) == v for k, v in where.items())]

    def header_lines(self) -> List[str]:
        lines = [f"driver: {self.driver}"]
        lines += [f"config: {ln}" for ln in self.config_text.strip().splitlines()]
        lines += [f"note: {n}" for n in self.design_notes]
        lines += [f"fit {k}: order={f.order:.4f} constant={f.constant:.4g} residual={f.residual:.2e}" for k, f in self.fits.items()]
        return lines

    def as_dict(self) -> dict:
        return {
            "driver": self.driver,
            "config": self.config_text,
            "notes": self.design_notes,
            "rows": self.rows,
            "fits": {k: f.as_dict() for k, f in self.fits.items()},
            "checks": self.checks,
            "passed": self.passed,
        }

    def write(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_locked_text(out / "effective-config.txt", self.config_text)
        write_locked_csv(out / "report.csv", REPORT_COLUMNS, self.rows, self.header_lines())
        write_locked_json(out / "report.json", self.as_dict())
        if self.lineout:
            write_locked_csv(out / "lineout.csv", LINEOUT_COLUMNS, self.lineout)
        log.info(f"📁 {self.driver} report written to {out}")
        return out


def timing_columns(timings: Dict[str, float], total: float) -> Dict[str, float]:
    return {
        "t_sweep": timings.get("sweep", 0.0),
        "t_closures": timings.get("closures", 0.0),
        "t_rhs": timings.get("rhs", 0.0),
        "t_solve": timings.get("solve", 0.0),
        "t_total": total,
        "rss_mb": rss_mb(),
    }


def strip_timings(row: Dict[str, object]) -> Dict[str, object]:
    return {k: v for k, v in row.items() if k not in TIMING_COLUMNS}

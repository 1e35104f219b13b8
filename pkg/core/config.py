import os
import math
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from core.transport import LEVEL_SYMMETRIC
from core.utils.logger import get_logger

log = get_logger("⚙️ config")


class ConfigError(Exception):
    """Invalid run configuration or runtime settings."""
    pass


class Region(BaseModel):
    """Axis-aligned material box; elements are assigned by centroid."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    sigma_t: float = Field(gt=0)
    sigma_s: float = Field(ge=0)
    xmin: float
    xmax: float
    ymin: float
    ymax: float

    @model_validator(mode="after")
    def _check(self):
        if self.sigma_s > self.sigma_t:
            raise ValueError("region sigma_s exceeds sigma_t")
        if self.xmax <= self.xmin or self.ymax <= self.ymin:
            raise ValueError("region box is empty")
        return self

    def contains(self, x: float, y: float) -> bool:
        return self.xmin <= x <= self.xmax and self.ymin <= y <= self.ymax

    def to_text(self) -> str:
        values = (self.sigma_t, self.sigma_s, self.xmin, self.xmax, self.ymin, self.ymax)
        return " ".join(repr(float(v)) for v in values)


class ProblemConfig(BaseModel):
    """
    One driver run. Parsed from the ``key = value`` text format by
    :func:`parse_config`; :meth:`to_text` emits the effective configuration in
    the same format.
    """

    model_config = ConfigDict(extra="forbid", validate_assignment=True)

    driver: Literal["mms", "diffusion_limit", "multimaterial", "sn_convergence"]
    mesh: Literal["cartesian", "taylor_green", "chebyshev"] = "cartesian"
    refinements: List[int] = Field(default_factory=lambda: [4, 8, 16, 32])
    domain: Tuple[float, float, float, float] = (0.0, 1.0, 0.0, 1.0)
    p: int = Field(default=1, ge=0)
    geometric_order: int = Field(default=1, ge=1)
    tg_final_time: float = Field(default=0.3 * math.pi, ge=0)
    tg_steps: int = Field(default=300, ge=1)
    tg_cell_scaled: bool = False
    quadrature: Literal["product", "level_symmetric"] = "product"
    n_polar: int = Field(default=2, ge=1)
    n_azimuthal: int = Field(default=4, ge=4)
    sn_order: int = 4
    method: Literal["ip", "cg", "rt", "hrt"] = "ip"
    outer_solver: Literal["picard", "anderson"] = "picard"
    anderson_size: int = Field(default=2, ge=0)
    outer_tol: float = Field(default=1e-6, gt=0)
    inner_tol: float = Field(default=1e-8, gt=0)
    max_outer: int = Field(default=200, ge=1)
    max_inner: int = Field(default=1000, ge=1)
    inner_solver: Literal["direct", "krylov"] = "direct"
    rt_krylov: Literal["minres", "bicgstab"] = "minres"
    preconditioner: Literal["diag", "tri"] = "diag"
    fixup: bool = False
    sigma_t: float = Field(default=1.0, gt=0)
    sigma_s: float = Field(default=0.5, ge=0)
    epsilons: List[float] = Field(default_factory=lambda: [0.1, 0.01, 0.001, 0.0001])
    penalty_scale: float = Field(default=1.0, gt=0)
    absorption: float = Field(default=1e-3, ge=0)
    source: float = Field(default=0.1, ge=0)
    inflow: float = Field(default=1.0 / (2.0 * math.pi), ge=0)
    channel_half_width: float = Field(default=0.25, gt=0)
    pipe_sigma_t: float = Field(default=0.2, gt=0)
    wall_sigma_t: float = Field(default=200.0, gt=0)
    compare_fixup: bool = True
    workers: int = Field(default=1, ge=1)
    region: List[Region] = Field(default_factory=list)
    output: str = "results"

    @field_validator("refinements")
    @classmethod
    def _positive_levels(cls, v):
        if not v or any(n < 1 for n in v):
            raise ValueError("refinements must be a non-empty list of positive integers")
        return v

    @field_validator("epsilons")
    @classmethod
    def _epsilon_range(cls, v):
        if not v or any(not (0 < e <= 1) for e in v):
            raise ValueError("epsilons must lie in (0, 1]")
        return v

    @field_validator("n_azimuthal")
    @classmethod
    def _azimuth_multiple_of_four(cls, v):
        if v % 4:
            raise ValueError("n_azimuthal must be divisible by 4")
        return v

    @field_validator("sn_order")
    @classmethod
    def _tabulated_sn_order(cls, v):
        if v not in LEVEL_SYMMETRIC:
            raise ValueError(f"sn_order must be one of {sorted(LEVEL_SYMMETRIC)}")
        return v

    @model_validator(mode="after")
    def _check_combinations(self):
        if self.method in ("ip", "cg") and self.p < 1:
            raise ValueError(f"method {self.method} needs p >= 1")
        if self.sigma_s > self.sigma_t:
            raise ValueError("sigma_s exceeds sigma_t")
        if self.rt_krylov == "minres" and self.preconditioner == "tri":
            raise ValueError("the lower block triangular preconditioner is not symmetric and cannot be used with MINRES")
        if self.mesh == "chebyshev" and min(self.refinements) < 3:
            raise ValueError("chebyshev meshes need at least 3 points per direction")
        x0, x1, y0, y1 = self.domain
        if x1 <= x0 or y1 <= y0:
            raise ValueError("domain must be (xmin, xmax, ymin, ymax) with positive extent")
        if self.region:
            self._check_cover()
        return self

    def _check_cover(self):
        x0, x1, y0, y1 = self.domain
        for i in range(5):
            for j in range(5):
                x = x0 + (x1 - x0) * (i + 0.5) / 5
                y = y0 + (y1 - y0) * (j + 0.5) / 5
                if not any(r.contains(x, y) for r in self.region):
                    raise ValueError(f"regions do not cover the domain at ({x:.3g}, {y:.3g})")

    def to_text(self) -> str:
        lines = []
        for name in type(self).model_fields:
            value = getattr(self, name)
            if name == "region":
                lines.extend(f"region = {r.to_text()}" for r in value)
            else:
                lines.append(f"{name} = {_format_value(value)}")
        return "\n".join(lines) + "\n"


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return ", ".join(_format_value(v) for v in value)
    return str(value)


_LIST_KEYS = {"refinements", "domain", "epsilons"}


def parse_config_text(
    text: str,
    overrides: Optional[Dict[str, object]] = None,
    defaults: Optional[Dict[str, object]] = None,
) -> ProblemConfig:
    """
    Parse the ``key = value`` format. ``overrides`` (CLI flags) win over file
    values; ``defaults`` (environment settings) only fill keys the file leaves out.
    """
    values: Dict[str, object] = {}
    regions: List[Dict[str, float]] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, _, value = (part.strip() for part in line.partition("="))
        if not key:
            raise ConfigError(f"line {lineno}: missing key")
        if key == "region":
            fields = value.replace(",", " ").split()
            if len(fields) != 6:
                raise ConfigError(f"line {lineno}: region needs 'sigma_t sigma_s xmin xmax ymin ymax'")
            try:
                regions.append(dict(zip(("sigma_t", "sigma_s", "xmin", "xmax", "ymin", "ymax"), map(float, fields))))
            except ValueError:
                raise ConfigError(f"line {lineno}: region values must be numbers")
            continue
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key '{key}'")
        if key in _LIST_KEYS:
            values[key] = [v.strip() for v in value.split(",") if v.strip()]
        else:
            values[key] = value
    if regions:
        values["region"] = regions
    for key, value in (defaults or {}).items():
        if value is not None:
            values.setdefault(key, value)
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = value
    try:
        return ProblemConfig.model_validate(values)
    except ValidationError as e:
        problems = "; ".join(
            f"{'.'.join(str(p) for p in err['loc']) or 'config'}: {err['msg']}" for err in e.errors()
        )
        raise ConfigError(problems) from None


def parse_config(
    path,
    overrides: Optional[Dict[str, object]] = None,
    defaults: Optional[Dict[str, object]] = None,
) -> ProblemConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}")
    config = parse_config_text(text, overrides, defaults)
    log.info(f"📄 Loaded config {path.name}: driver={config.driver} method={config.method} p={config.p}")
    return config


class Settings:
    """
    Process-level settings from the environment, optionally seeded by a
    ``.env`` file at the repository root. Nothing here changes the numerics.
    """

    OPTIONAL_ENV_DEFAULTS = {
        "LOG_DIR": "./logs",
        "LOG_LEVEL": "INFO",
        "SMM_OUTPUT_DIR": "results",
        "SMM_WORKERS": "1",
    }

    def __init__(self, env_path: Optional[Path] = None):
        self.env_path = env_path or Path(__file__).resolve().parent.parent / ".env"
        self._load_dotenv()
        self._assign_attributes()

    def _load_dotenv(self):
        if self.env_path.exists():
            load_dotenv(dotenv_path=self.env_path, override=False)

    def _get(self, name: str) -> str:
        return os.getenv(name, self.OPTIONAL_ENV_DEFAULTS[name])

    def _assign_attributes(self):
        self.LOG_DIR = Path(self._get("LOG_DIR")).resolve()
        self.LOG_LEVEL = self._get("LOG_LEVEL").upper()
        self.OUTPUT_DIR = Path(self._get("SMM_OUTPUT_DIR"))
        try:
            self.WORKERS = int(self._get("SMM_WORKERS"))
        except ValueError:
            raise ConfigError(f"SMM_WORKERS must be an integer, got {self._get('SMM_WORKERS')!r}")
        if self.WORKERS < 1:
            raise ConfigError("SMM_WORKERS must be at least 1")

    def summary(self) -> Dict[str, str]:
        return {
            "Env File": str(self.env_path) if self.env_path.exists() else "(none)",
            "Log Dir": str(self.LOG_DIR),
            "Log Level": self.LOG_LEVEL,
            "Output Dir": str(self.OUTPUT_DIR),
            "Workers": str(self.WORKERS),
        }

    def run_defaults(self) -> Dict[str, object]:
        """Fallbacks for keys a run configuration leaves unset."""
        return {"output": str(self.OUTPUT_DIR), "workers": self.WORKERS}

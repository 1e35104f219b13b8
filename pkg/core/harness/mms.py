"""
Quadratically anisotropic manufactured transport solution on [0, 1]²:

    ψ = (α + Ω·β + Ω⊗Ω : Θ) / 4π

with α = sin(πx) sin(πy) + δ, β = (s₂, s₂), Θ = [[s₃/2, s₂], [s₂, s₃/4]],
s_k(x) = sin(kπ(x + c)/(1 + 2c)) sin(kπ(y + c)/(1 + 2c)) with c = ω for k = 2
and c = ζ for k = 3. The source is q = Ω·∇ψ + σ_t ψ - σ_s φ / 4π.
"""

import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from core.transport import FOUR_PI, AngularFunction

DELTA = 1.25
ZETA = 0.1
OMEGA = 0.05


def _product_sine(x: np.ndarray, k: int, shift: float) -> Tuple[np.ndarray, np.ndarray]:
    """sin(a(x+c)) sin(a(y+c)) with a = kπ/(1+2c), and its gradient."""
    a = k * math.pi / (1.0 + 2.0 * shift)
    sx, sy = np.sin(a * (x[:, 0] + shift)), np.sin(a * (x[:, 1] + shift))
    cx, cy = np.cos(a * (x[:, 0] + shift)), np.cos(a * (x[:, 1] + shift))
    return sx * sy, np.stack([a * cx * sy, a * sx * cy], -1)


@dataclass
class MMSFields:
    psi: np.ndarray  # (n,)
    phi: np.ndarray  # (n,)
    J: np.ndarray    # (n, 2)
    P: np.ndarray    # (n, 3, 3)
    q: np.ndarray    # (n,)


class ManufacturedSolution:
    def __init__(self, sigma_t: float = 1.0, sigma_s: float = 0.5):
        self.sigma_t = float(sigma_t)
        self.sigma_s = float(sigma_s)

    # ---- spatial coefficients ----
    @staticmethod
    def alpha(x) -> Tuple[np.ndarray, np.ndarray]:
        x = np.atleast_2d(x)
        v, g = _product_sine(x, 1, 0.0)
        return v + DELTA, g

    @staticmethod
    def beta(x) -> Tuple[np.ndarray, np.ndarray]:
        """β (n, 2) and ∇β (n, 2, 2) [component, derivative]."""
        x = np.atleast_2d(x)
        s, g = _product_sine(x, 2, OMEGA)
        return np.stack([s, s], -1), np.stack([g, g], 1)

    @staticmethod
    def theta(x) -> Tuple[np.ndarray, np.ndarray]:
        """Θ (n, 2, 2) and ∇Θ (n, 2, 2, 2)."""
        x = np.atleast_2d(x)
        s2, g2 = _product_sine(x, 2, OMEGA)
        s3, g3 = _product_sine(x, 3, ZETA)
        T = np.empty((len(x), 2, 2))
        dT = np.empty((len(x), 2, 2, 2))
        T[:, 0, 0], dT[:, 0, 0] = 0.5 * s3, 0.5 * g3
        T[:, 1, 1], dT[:, 1, 1] = 0.25 * s3, 0.25 * g3
        T[:, 0, 1] = T[:, 1, 0] = s2
        dT[:, 0, 1] = dT[:, 1, 0] = g2
        return T, dT

    # ---- exact fields ----
    def psi(self, x, omega) -> np.ndarray:
        om = np.asarray(omega, dtype=float)[:2]
        a, _ = self.alpha(x)
        b, _ = self.beta(x)
        T, _ = self.theta(x)
        return (a + b @ om + np.einsum("a,nab,b->n", om, T, om)) / FOUR_PI

    def phi(self, x) -> np.ndarray:
        a, _ = self.alpha(x)
        T, _ = self.theta(x)
        return a + np.trace(T, axis1=1, axis2=2) / 3.0

    def current(self, x) -> np.ndarray:
        b, _ = self.beta(x)
        return b / 3.0

    def pressure(self, x) -> np.ndarray:
        """Full 3×3 second moment; the Θ part is (tr Θ I + Θ + Θᵀ)/15 padded with zeros in z."""
        a, _ = self.alpha(x)
        T, _ = self.theta(x)
        tr = np.trace(T, axis1=1, axis2=2)
        P = np.zeros((len(a), 3, 3))
        P[:, :2, :2] = (T + np.swapaxes(T, 1, 2)) / 15.0
        P += (a / 3.0 + tr / 15.0)[:, None, None] * np.eye(3)
        return P

    def source(self, x, omega) -> np.ndarray:
        om = np.asarray(omega, dtype=float)[:2]
        _, ga = self.alpha(x)
        _, gb = self.beta(x)
        _, gT = self.theta(x)
        stream = (
            ga @ om
            + np.einsum("a,nab,b->n", om, gb, om)
            + np.einsum("a,b,nabc,c->n", om, om, gT, om)
        ) / FOUR_PI
        return stream + self.sigma_t * self.psi(x, omega) - self.sigma_s * self.phi(x) / FOUR_PI

    def fields(self, x, omega) -> MMSFields:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return MMSFields(
            psi=self.psi(x, omega),
            phi=self.phi(x),
            J=self.current(x),
            P=self.pressure(x),
            q=self.source(x, omega),
        )

    @property
    def angular_flux(self) -> AngularFunction:
        return self.psi

    @property
    def angular_source(self) -> AngularFunction:
        return self.source


def mms_fields(x, omega, sigma_t: float = 1.0, sigma_s: float = 0.5) -> MMSFields:
    return ManufacturedSolution(sigma_t, sigma_s).fields(x, omega)

"""
1D node sets and nodal Lagrange bases on the reference interval [0, 1].

Everything above this module (mesh maps, finite element spaces, quadrature)
is built from tensor products of these.
"""

from functools import lru_cache

import numpy as np
from numpy.polynomial import legendre as leg


@lru_cache(maxsize=None)
def gauss_legendre(n: int):
    """n-point Gauss–Legendre rule mapped to [0, 1]; exact to degree 2n-1."""
    if n < 1:
        raise ValueError("Gauss–Legendre rule needs at least one point")
    t, w = leg.leggauss(n)
    x, w = 0.5 * (t + 1.0), 0.5 * w
    x.setflags(write=False)
    w.setflags(write=False)
    return x, w


@lru_cache(maxsize=None)
def gauss_lobatto(n: int):
    """n-point Gauss–Lobatto nodes and weights on [0, 1] (endpoints included)."""
    if n < 2:
        raise ValueError("Gauss–Lobatto rule needs at least two points")
    if n == 2:
        t = np.array([-1.0, 1.0])
    else:
        interior = leg.Legendre.basis(n - 1).deriv().roots()
        t = np.concatenate(([-1.0], np.sort(interior.real), [1.0]))
    pn = leg.legval(t, np.eye(n)[n - 1])
    w = 2.0 / (n * (n - 1) * pn**2)
    x, w = 0.5 * (t + 1.0), 0.5 * w
    x.setflags(write=False)
    w.setflags(write=False)
    return x, w


class Lagrange1D:
    """Nodal Lagrange basis on [0, 1], stored as Legendre coefficients."""

    def __init__(self, nodes):
        self.nodes = np.asarray(nodes, dtype=float)
        self.n = len(self.nodes)
        vander = leg.legvander(2.0 * self.nodes - 1.0, self.n - 1)
        self._coef = np.linalg.inv(vander)
        self._d1 = 2.0 * leg.legder(self._coef, 1, axis=0)
        self._d2 = 4.0 * leg.legder(self._coef, 2, axis=0)

    @staticmethod
    def _apply(coef, x):
        t = 2.0 * np.asarray(x, dtype=float) - 1.0
        return leg.legvander(t, coef.shape[0] - 1) @ coef

    def values(self, x):
        return self._apply(self._coef, x)

    def derivatives(self, x):
        return self._apply(self._d1, x)

    def second_derivatives(self, x):
        return self._apply(self._d2, x)


@lru_cache(maxsize=None)
def lobatto_basis(n: int) -> Lagrange1D:
    return Lagrange1D(gauss_lobatto(n)[0])


@lru_cache(maxsize=None)
def legendre_node_basis(n: int) -> Lagrange1D:
    return Lagrange1D(gauss_legendre(n)[0])


def tensor_values(bx: Lagrange1D, by: Lagrange1D, pts):
    """Values of the lexicographic tensor basis (index ``j*nx + i``) at ``pts`` (nq, 2)."""
    vx = bx.values(pts[:, 0])
    vy = by.values(pts[:, 1])
    return (vy[:, :, None] * vx[:, None, :]).reshape(len(pts), -1)


def tensor_gradients(bx: Lagrange1D, by: Lagrange1D, pts):
    """Reference gradients, shape (nq, nb, 2)."""
    vx, dx = bx.values(pts[:, 0]), bx.derivatives(pts[:, 0])
    vy, dy = by.values(pts[:, 1]), by.derivatives(pts[:, 1])
    gx = (vy[:, :, None] * dx[:, None, :]).reshape(len(pts), -1)
    gy = (dy[:, :, None] * vx[:, None, :]).reshape(len(pts), -1)
    return np.stack([gx, gy], axis=-1)


def tensor_hessians(bx: Lagrange1D, by: Lagrange1D, pts):
    """Reference second derivatives, shape (nq, nb, 2, 2)."""
    nq = len(pts)
    vx, dx, ddx = bx.values(pts[:, 0]), bx.derivatives(pts[:, 0]), bx.second_derivatives(pts[:, 0])
    vy, dy, ddy = by.values(pts[:, 1]), by.derivatives(pts[:, 1]), by.second_derivatives(pts[:, 1])
    hxx = (vy[:, :, None] * ddx[:, None, :]).reshape(nq, -1)
    hxy = (dy[:, :, None] * dx[:, None, :]).reshape(nq, -1)
    hyy = (ddy[:, :, None] * vx[:, None, :]).reshape(nq, -1)
    return np.stack([np.stack([hxx, hxy], -1), np.stack([hxy, hyy], -1)], -2)

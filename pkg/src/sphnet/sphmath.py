"""Real spherical harmonics, numerical Wigner-D blocks and the shell kernel basis.

Ordering contract used everywhere in the package: degrees ascending, and inside
degree ``l`` the orders ``m = -l .. l``.  Flat index of ``(l, m)`` is
``l * l + l + m``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

CLOSED_FORM_MAX_DEGREE = 3

_UNIT_TOL = 1e-6
_ROTATION_TOL = 1e-8


class DomainError(ValueError):
    """Raised when an argument lies outside the mathematical domain of an operation."""


def sh_index(l: int, m: int) -> int:
    return l * l + l + m


def n_angular(n_degrees: int) -> int:
    """Number of (l, m) pairs for degrees ``0 .. n_degrees - 1``."""
    return n_degrees * n_degrees


def degree_slices(n_degrees: int) -> list[slice]:
    return [slice(l * l, (l + 1) * (l + 1)) for l in range(n_degrees)]


def _closed_form(n_degrees: int, x, y, z) -> np.ndarray:
    # assumes x, y, z lie on the unit sphere; filled component-major for contiguous writes
    x, y, z = np.broadcast_arrays(x, y, z)
    out = np.empty((n_angular(n_degrees),) + x.shape, dtype=np.result_type(x, 0.0))
    out[0] = 0.5 / math.sqrt(math.pi)
    if n_degrees > 1:
        c1 = math.sqrt(3.0 / (4.0 * math.pi))
        np.multiply(y, c1, out=out[1, ...])
        np.multiply(z, c1, out=out[2, ...])
        np.multiply(x, c1, out=out[3, ...])
    if n_degrees > 2:
        c2 = 0.5 * math.sqrt(15.0 / math.pi)
        xx, yy, zz = x * x, y * y, z * z
        out[4] = c2 * x * y
        out[5] = c2 * y * z
        out[6] = 0.25 * math.sqrt(5.0 / math.pi) * (3.0 * zz - 1.0)
        out[7] = c2 * x * z
        out[8] = 0.5 * c2 * (xx - yy)
    if n_degrees > 3:
        a = 0.25 * math.sqrt(35.0 / (2.0 * math.pi))
        b = 0.5 * math.sqrt(105.0 / math.pi)
        c = 0.25 * math.sqrt(21.0 / (2.0 * math.pi))
        z5 = 5.0 * zz
        out[9] = a * y * (3.0 * xx - yy)
        out[10] = b * x * y * z
        out[11] = c * y * (z5 - 1.0)
        out[12] = 0.25 * math.sqrt(7.0 / math.pi) * z * (z5 - 3.0)
        out[13] = c * x * (z5 - 1.0)
        out[14] = 0.5 * b * z * (xx - yy)
        out[15] = a * x * (xx - 3.0 * yy)
    return np.moveaxis(out, 0, -1)


def _recurrence(n_degrees: int, x, y, z) -> np.ndarray:
    """Real SH of arbitrary degree via associated Legendre recurrences.

    No Condon-Shortley phase, so that it agrees with the closed forms.
    """
    x, y, z = np.broadcast_arrays(x, y, z)
    out = np.empty(x.shape + (n_angular(n_degrees),), dtype=np.result_type(x, 0.0))
    rho = np.sqrt(np.maximum(1.0 - z * z, 0.0))
    phi = np.arctan2(y, x)
    # P[l][m] for the current sweep, stored per m
    p_mm = np.ones_like(z)
    for m in range(n_degrees):
        if m > 0:
            p_mm = p_mm * (2 * m - 1) * rho
        p_prev, p_cur = None, p_mm
        for l in range(m, n_degrees):
            if l == m + 1:
                p_prev, p_cur = p_cur, z * (2 * m + 1) * p_mm
            elif l > m + 1:
                p_prev, p_cur = p_cur, ((2 * l - 1) * z * p_cur - (l + m - 1) * p_prev) / (l - m)
            norm = math.sqrt((2 * l + 1) / (4.0 * math.pi) * math.exp(math.lgamma(l - m + 1) - math.lgamma(l + m + 1)))
            if m == 0:
                out[..., sh_index(l, 0)] = norm * p_cur
            else:
                out[..., sh_index(l, m)] = math.sqrt(2.0) * norm * p_cur * np.cos(m * phi)
                out[..., sh_index(l, -m)] = math.sqrt(2.0) * norm * p_cur * np.sin(m * phi)
    return out


def _check_unit(u: np.ndarray) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    if u.shape[-1] != 3:
        raise DomainError(f"expected 3-vectors, got trailing dimension {u.shape[-1]}")
    norms = np.linalg.norm(u, axis=-1)
    if np.any(np.abs(norms - 1.0) > _UNIT_TOL):
        raise DomainError("direction is not a unit vector")
    return u


def sh_basis(n_degrees: int, u, method: str = "auto") -> np.ndarray:
    """Evaluate all real SH up to degree ``n_degrees - 1`` on unit vectors, unchecked.

    ``method`` is ``"closed"``, ``"recurrence"`` or ``"auto"``.  Degrees above
    ``CLOSED_FORM_MAX_DEGREE`` are only reachable through the recurrence, which
    must be requested explicitly.
    """
    u = np.asarray(u)
    if n_degrees < 1:
        raise DomainError("n_degrees must be positive")
    if method == "auto":
        method = "closed"
    if method == "closed":
        if n_degrees - 1 > CLOSED_FORM_MAX_DEGREE:
            raise DomainError(
                f"closed forms stop at degree {CLOSED_FORM_MAX_DEGREE}; pass method='recurrence'"
            )
        return _closed_form(n_degrees, u[..., 0], u[..., 1], u[..., 2])
    if method == "recurrence":
        return _recurrence(n_degrees, u[..., 0], u[..., 1], u[..., 2])
    raise ValueError(f"unknown method {method!r}")


def eval_real_sh(l: int, m: int, u, method: str = "auto") -> float:
    """Orthonormal real spherical harmonic ``Y_{l,m}(u)`` for a unit vector ``u``."""
    if l < 0 or abs(m) > l:
        raise DomainError(f"invalid degree/order ({l}, {m})")
    u = _check_unit(u)
    return float(sh_basis(l + 1, u, method)[..., sh_index(l, m)])


def eval_sh_vector(n_degrees: int, u, method: str = "auto") -> np.ndarray:
    """All ``n_degrees**2`` harmonics at ``u`` in the library-wide flat ordering.

    ``u`` may carry leading batch dimensions.
    """
    u = _check_unit(u)
    return sh_basis(n_degrees, u, method)


def check_rotation(rot) -> np.ndarray:
    rot = np.asarray(rot, dtype=np.float64)
    if rot.shape != (3, 3):
        raise DomainError(f"rotation must be 3x3, got {rot.shape}")
    if np.abs(rot.T @ rot - np.eye(3)).max() > _ROTATION_TOL or np.linalg.det(rot) < 0.5:
        raise DomainError("matrix is not a proper rotation")
    return rot


@lru_cache(maxsize=None)
def _fibonacci_sphere(n: int) -> np.ndarray:
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    r = np.sqrt(1.0 - z * z)
    phi = np.pi * (1.0 + 5.0**0.5) * i
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=-1)


def wigner_d(l: int, rot, method: str = "auto") -> np.ndarray:
    """Real Wigner block ``D`` with ``Y_l(R u) = D @ Y_l(u)``, fitted by least squares.

    Intended as a test oracle.  The fit uses ``(2l+1)**2`` (at least 16)
    Fibonacci-lattice directions and asserts a residual below 1e-10.
    """
    if l < 0:
        raise DomainError("degree must be non-negative")
    rot = check_rotation(rot)
    dim = 2 * l + 1
    dirs = _fibonacci_sphere(max(dim * dim, 16))
    block = degree_slices(l + 1)[l]
    a = sh_basis(l + 1, dirs, method)[:, block]
    b = sh_basis(l + 1, dirs @ rot.T, method)[:, block]
    dt, *_ = np.linalg.lstsq(a, b, rcond=None)
    resid = np.abs(a @ dt - b).max()
    if resid > 1e-10:
        raise ArithmeticError(f"Wigner fit residual {resid:.2e} for l={l}")
    return dt.T


def wigner_blockdiag(n_degrees: int, rot, method: str = "auto") -> np.ndarray:
    """Block-diagonal ``(n_degrees**2, n_degrees**2)`` matrix of all Wigner blocks."""
    size = n_angular(n_degrees)
    out = np.zeros((size, size))
    for l, sl in enumerate(degree_slices(n_degrees)):
        out[sl, sl] = wigner_d(l, rot, method)
    return out


@dataclass(frozen=True)
class KernelBasis:
    """Gaussian radial shells times real spherical harmonics.

    ``rho`` is the outermost shell radius, ``n_radial`` the number of shells
    (radii ``rho * r / (n_radial - 1)``) and ``n_degrees`` the number of SH
    degrees.  The shell width equals the shell spacing.
    """

    rho: float
    n_radial: int = 2
    n_degrees: int = 4

    def __post_init__(self):
        if not self.rho > 0:
            raise DomainError("rho must be positive")
        if self.n_radial < 1 or self.n_degrees < 1:
            raise DomainError("n_radial and n_degrees must be positive")

    @property
    def sigma(self) -> float:
        return self.rho / (self.n_radial - 1) if self.n_radial > 1 else self.rho

    @property
    def n_angular(self) -> int:
        return n_angular(self.n_degrees)

    @property
    def size(self) -> int:
        return self.n_radial * self.n_angular

    def shell_radii(self) -> np.ndarray:
        if self.n_radial == 1:
            return np.zeros(1)
        return self.rho * np.arange(self.n_radial) / (self.n_radial - 1)

    def __call__(self, x) -> np.ndarray:
        return eval_kernel(self, x)


def eval_kernel(basis: KernelBasis, x, scale=None, dtype=None) -> np.ndarray:
    """Kernel values at displacements ``x`` with shape ``(..., 3)``.

    Returns ``(..., n_radial, n_degrees**2)``.  At ``x = 0`` only the degree-0
    column survives; higher degrees are set to zero.  ``scale`` (shape
    ``x.shape[:-1]``) multiplies every basis value, which saves a pass when
    callers weight kernels per displacement.
    """
    x = np.asarray(x)
    dtype = np.dtype(dtype or np.result_type(x, 0.0))
    dist = np.sqrt(np.einsum("...i,...i->...", x, x))
    at_origin = dist == 0
    u = x / np.where(at_origin, 1.0, dist)[..., None]
    method = "closed" if basis.n_degrees <= CLOSED_FORM_MAX_DEGREE + 1 else "recurrence"
    ang = sh_basis(basis.n_degrees, u.astype(dtype, copy=False), method)
    if at_origin.any():
        ang[at_origin, 1:] = 0.0
    radial = np.exp(-((dist[..., None] - basis.shell_radii()) ** 2) / (2.0 * basis.sigma**2))
    if scale is not None:
        radial *= np.asarray(scale)[..., None]
    return radial.astype(dtype, copy=False)[..., :, None] * ang[..., None, :]

"""Small target filter: global Mahalanobis map -> bilateral filter -> median mask.

The unfiltered Mahalanobis map is also the classic global RX detector.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .hsi_io import HyperCube

__all__ = [
    "NumericalError",
    "StfConfig",
    "StfResult",
    "mahalanobis_map",
    "rx_detector",
    "disc_offsets",
    "bilateral_filter",
    "median_mask",
    "small_target_filter",
]

# relative diagonal loading of the covariance when no explicit ridge is given
RELATIVE_RIDGE = 1e-6


class NumericalError(ArithmeticError):
    """A computation produced non-finite values."""


@dataclass(frozen=True)
class StfConfig:
    radius: int = 1
    sigma_s: float = 1.0
    sigma_c: float = 80.0  # calibrated on the 0..255 value scale
    ridge: float | None = None  # None -> relative diagonal loading

    def __post_init__(self):
        if self.radius < 1:
            raise ValueError("radius must be >= 1")
        if not (self.sigma_s > 0 and self.sigma_c > 0):
            raise ValueError("sigma_s and sigma_c must be positive")
        if self.ridge is not None and not self.ridge > 0:
            raise ValueError("ridge must be positive")


def _pixels(cube) -> tuple[np.ndarray, tuple[int, int]]:
    if isinstance(cube, HyperCube):
        return cube.pixels(), (cube.height, cube.width)
    arr = np.asarray(cube, dtype=np.float64)
    return arr.reshape(-1, arr.shape[-1]), arr.shape[:2]


def covariance_with_ridge(X: np.ndarray, ridge: float | None = None) -> np.ndarray:
    """B x B spectral covariance over L pixel samples (1/(L-1)), plus loading.

    With ``ridge=None`` each band is loaded by ``RELATIVE_RIDGE`` times its own
    variance, which keeps the map exactly invariant to per-band rescaling.
    Zero-variance bands fall back to the mean band variance.
    """
    L, B = X.shape
    Xc = X - X.mean(axis=0)
    C = Xc.T @ Xc / max(L - 1, 1)
    if ridge is not None:
        return C + ridge * np.eye(B)
    diag = np.diag(C).copy()
    floor = np.trace(C) / B
    diag[diag <= 0] = floor
    return C + np.diag(RELATIVE_RIDGE * diag)


def mahalanobis_map(cube, ridge: float | None = None) -> np.ndarray:
    """Squared Mahalanobis distance of every pixel from the scene mean (M x N)."""
    X, (m, n) = _pixels(cube)
    Xc = X - X.mean(axis=0)
    if not np.any(Xc):
        return np.zeros((m, n))
    C = covariance_with_ridge(X, ridge)
    try:
        Lc = np.linalg.cholesky(C)
        W = np.linalg.solve(Lc, Xc.T)
    except np.linalg.LinAlgError:
        raise NumericalError(f"covariance not positive definite (cond ~ {np.linalg.cond(C):.3g})") from None
    z = np.einsum("ij,ij->j", W, W)
    if not np.all(np.isfinite(z)):
        raise NumericalError(f"non-finite Mahalanobis distances (cond ~ {np.linalg.cond(C):.3g})")
    return z.reshape(m, n)


def rx_detector(cube, ridge: float | None = None) -> np.ndarray:
    """Global RX anomaly scores; identical to :func:`mahalanobis_map`."""
    return mahalanobis_map(cube, ridge)


def disc_offsets(radius: int) -> list[tuple[int, int]]:
    """Integer offsets within Euclidean distance ``radius`` (center included)."""
    r = int(radius)
    return [(di, dj) for di in range(-r, r + 1) for dj in range(-r, r + 1)
            if di * di + dj * dj <= radius * radius]


def _shift(a: np.ndarray, di: int, dj: int) -> tuple[np.ndarray, np.ndarray]:
    """``a[i+di, j+dj]`` aligned on (i, j) plus the in-bounds mask."""
    m, n = a.shape
    out = np.zeros_like(a)
    valid = np.zeros(a.shape, dtype=bool)
    i0, i1 = max(0, -di), min(m, m - di)
    j0, j1 = max(0, -dj), min(n, n - dj)
    out[i0:i1, j0:j1] = a[i0 + di:i1 + di, j0 + dj:j1 + dj]
    valid[i0:i1, j0:j1] = True
    return out, valid


def bilateral_filter(z: np.ndarray, cfg: StfConfig = StfConfig()) -> np.ndarray:
    """Edge-preserving smoothing over a disc neighbourhood clipped at the borders.

    The map is rescaled to 0..255 for the range kernel (``sigma_c`` lives on
    that scale) and mapped back to its original range afterwards.
    """
    z = np.asarray(z, dtype=np.float64)
    lo, hi = float(z.min()), float(z.max())
    if not hi > lo:
        return z.copy()
    u = (z - lo) / (hi - lo) * 255.0
    num = np.zeros_like(u)
    den = np.zeros_like(u)
    two_s2 = 2.0 * cfg.sigma_s ** 2
    two_c2 = 2.0 * cfg.sigma_c ** 2
    for di, dj in disc_offsets(cfg.radius):
        nb, valid = _shift(u, di, dj)
        w = np.exp(-(di * di + dj * dj) / two_s2 - (u - nb) ** 2 / two_c2) * valid
        num += w * nb
        den += w
    return num / den / 255.0 * (hi - lo) + lo


def median_mask(zhat: np.ndarray) -> np.ndarray:
    """Zero every entry that is <= the median; keep the rest unchanged."""
    zhat = np.asarray(zhat, dtype=np.float64)
    med = np.median(zhat)
    return np.where(zhat > med, zhat, 0.0)


class StfResult(NamedTuple):
    distance: np.ndarray   # raw Mahalanobis map
    filtered: np.ndarray   # after bilateral filtering
    mask: np.ndarray       # after median masking


def small_target_filter(cube, cfg: StfConfig = StfConfig()) -> StfResult:
    z = mahalanobis_map(cube, cfg.ridge)
    zf = bilateral_filter(z, cfg)
    return StfResult(z, zf, median_mask(zf))

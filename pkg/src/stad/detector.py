"""Anomaly scoring in the input-gradient (saliency) space.

All detectors take a raw :class:`HyperCube`; network inputs are the per-cube
min-max normalized values in [0, 1], and gradients are taken with respect to
those normalized inputs.
"""

from __future__ import annotations

import json
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tn
from .hsi_io import HyperCube, normalize, write_pgm
from .networks import ModelParams, student_forward, teacher_forward, tile_slices
from .stf import NumericalError, StfConfig, small_target_filter
from .tensor import DimensionError, GradTape, Tensor

__all__ = [
    "MODES",
    "ScoreMap",
    "DetectorConfig",
    "input_gradient",
    "saliency_map",
    "stad_detect",
    "reconstruction_error",
    "ablation_detect",
    "export_scoremap",
    "write_detection_manifest",
]

MODES = {
    "A": "recon",
    "B": "saliency",
    "C": "stf",
    "D": "recon×stf",
    "E": "stad",
}


@dataclass
class ScoreMap:
    values: np.ndarray
    kind: str

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise DimensionError(f"score map must be 2-D, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise NumericalError(f"non-finite values in {self.kind} score map")

    @property
    def shape(self):
        return self.values.shape


@dataclass(frozen=True)
class DetectorConfig:
    stf: StfConfig = field(default_factory=StfConfig)
    mode: str = "E"
    stf_bypass: bool = False
    use_teacher: bool = False
    tile: int = 32

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown ablation mode {self.mode!r}; choose from {sorted(MODES)}")

    def to_dict(self) -> dict:
        return asdict(self)


def _network_input(net: ModelParams, H: HyperCube) -> np.ndarray:
    if H.bands != net.bands:
        raise DimensionError(f"network expects {net.bands} bands, cube has {H.bands}")
    x, _ = normalize(H, "unit")
    return x


def _outputs(net: ModelParams, X: Tensor, shape):
    """Network reconstructions of the (M, N, B) leaf ``X`` in the same layout."""
    m, n, b = shape
    if net.kind == "student":
        chw = tn.transpose(X, (2, 0, 1))
        return [tn.transpose(o, (1, 2, 0)) for o in student_forward(net, chw)]
    toks = tn.reshape(X, (m * n, b))
    return [tn.reshape(o, (m, n, b)) for o in teacher_forward(net, toks)]


def _masked_sq_loss(net, X: Tensor, shape, mask) -> Tensor:
    per_pixel = None
    for o in _outputs(net, X, shape):
        d = tn.sub(X, o)
        e = tn.tsum(tn.mul(d, d), axis=-1)
        per_pixel = e if per_pixel is None else tn.add(per_pixel, e)
    if mask is not None:
        per_pixel = tn.mul(per_pixel, Tensor(mask))
    return tn.tsum(per_pixel)


def _norm_loss(net, X: Tensor, shape, mask) -> Tensor:
    total = None
    for o in _outputs(net, X, shape):
        n = tn.l2norm(tn.sub(X, o))
        total = n if total is None else tn.add(total, n)
    return total


def _grad_region(net, x: np.ndarray, mask, loss) -> np.ndarray:
    X = Tensor(x, requires_grad=True)
    with GradTape() as tape:
        L = loss(net, X, x.shape, mask)
    tape.backward(L)
    return X.grad


def input_gradient(net: ModelParams, x: np.ndarray, mask: np.ndarray | None = None,
                   loss: str = "squared", tile: int = 32) -> np.ndarray:
    """Gradient of a reconstruction loss with respect to the (M, N, B) input ``x``.

    ``loss="squared"``: sum over pixels of (summed-over-bands squared error of the
    three outputs) times ``mask`` (no mask = all ones).
    ``loss="norm"``: sum of the Frobenius norms of the three residuals.
    The teacher attends within ``tile`` x ``tile`` windows, so its gradient is
    assembled tile by tile (exact, since tiles do not interact).
    """
    fn = {"squared": _masked_sq_loss, "norm": _norm_loss}.get(loss)
    if fn is None:
        raise ValueError(f"unknown loss {loss!r}")
    net = net.frozen()  # weights are constants here; only the input is a leaf
    if net.kind == "student":
        G = _grad_region(net, x, mask, fn)
    else:
        G = np.zeros_like(x)
        for si, sj in tile_slices(x.shape[0], x.shape[1], tile):
            sub_mask = None if mask is None else mask[si, sj]
            G[si, sj] = _grad_region(net, np.ascontiguousarray(x[si, sj]), sub_mask, fn)
    if not np.all(np.isfinite(G)):
        raise NumericalError("non-finite input gradient")
    return G


def _band_max(G: np.ndarray) -> np.ndarray:
    return np.abs(G).max(axis=-1)


def saliency_map(net: ModelParams, H: HyperCube, loss: str = "squared", tile: int = 32) -> ScoreMap:
    """Per-pixel max over bands of |dL/dH| for the unmasked reconstruction loss."""
    x = _network_input(net, H)
    return ScoreMap(_band_max(input_gradient(net, x, None, loss, tile)), "saliency")


def stad_detect(net: ModelParams, H: HyperCube, stf_cfg: StfConfig = StfConfig(),
                mask: np.ndarray | None = None, bypass: bool = False, tile: int = 32) -> ScoreMap:
    """Masked-loss input-gradient scores.

    The mask defaults to the small-target filter output for ``H``; ``bypass``
    replaces it by all ones.
    """
    x = _network_input(net, H)
    if bypass:
        mask = np.ones(x.shape[:2])
    elif mask is None:
        mask = small_target_filter(H, stf_cfg).mask
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != x.shape[:2]:
        raise DimensionError(f"mask {mask.shape} does not match cube {x.shape[:2]}")
    return ScoreMap(_band_max(input_gradient(net, x, mask, "squared", tile)), "stad")


def reconstruction_error(net: ModelParams, H: HyperCube, tile: int = 32) -> np.ndarray:
    """Per-pixel summed squared error of the final reconstruction."""
    x = _network_input(net, H)
    if net.kind == "student":
        r3 = student_forward(net, np.moveaxis(x, -1, 0))[-1].values
        r3 = np.moveaxis(r3, 0, -1)
    else:
        r3 = np.zeros_like(x)
        for si, sj in tile_slices(x.shape[0], x.shape[1], tile):
            blk = x[si, sj]
            r3[si, sj] = teacher_forward(net, blk.reshape(-1, blk.shape[-1]))[-1].values.reshape(blk.shape)
    return ((x - r3) ** 2).sum(axis=-1)


def ablation_detect(mode: str, net: ModelParams | None, H: HyperCube,
                    stf_cfg: StfConfig = StfConfig(), bypass: bool = False,
                    tile: int = 32) -> ScoreMap:
    """Scores for one of the ablation scenarios.

    A reconstruction error, B saliency map, C STF mask, D A times C, E full STAD.
    Mode C needs no network.
    """
    if mode not in MODES:
        raise ValueError(f"unknown ablation mode {mode!r}; choose from {sorted(MODES)}")
    if mode == "C":
        return ScoreMap(small_target_filter(H, stf_cfg).mask, MODES[mode])
    if net is None:
        raise ValueError(f"mode {mode} needs a trained network")
    if mode == "A":
        return ScoreMap(reconstruction_error(net, H, tile), MODES[mode])
    if mode == "B":
        return saliency_map(net, H, tile=tile)
    if mode == "D":
        mask = np.ones(H.data.shape[:2]) if bypass else small_target_filter(H, stf_cfg).mask
        return ScoreMap(reconstruction_error(net, H, tile) * mask, MODES[mode])
    return stad_detect(net, H, stf_cfg, bypass=bypass, tile=tile)


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------

def export_scoremap(S: ScoreMap | np.ndarray, path, fmt: str = "both") -> bool:
    """Write a score map as a 16-bit PGM and/or CSV, min-max normalized to [0, 1].

    Returns True (and emits a warning) when the map was constant and was
    exported as all zeros.
    """
    values = S.values if isinstance(S, ScoreMap) else np.asarray(S, dtype=np.float64)
    if fmt not in ("pgm", "csv", "both"):
        raise ValueError(f"unknown format {fmt!r}")
    lo, hi = float(values.min()), float(values.max())
    degenerate = not hi > lo
    if degenerate:
        warnings.warn("constant score map exported as all zeros", RuntimeWarning, stacklevel=2)
        norm = np.zeros_like(values)
    else:
        norm = (values - lo) / (hi - lo)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if fmt in ("pgm", "both"):
        write_pgm(path.with_suffix(".pgm"), np.rint(norm * 65535).astype(np.uint16), maxval=65535)
    if fmt in ("csv", "both"):
        np.savetxt(path.with_suffix(".csv"), norm, delimiter=",", fmt="%.17g")
    return degenerate


def write_detection_manifest(path, cube: HyperCube, mode: str, config_hash: str,
                             seconds: float, extra: dict | None = None) -> dict:
    mp = cube.n_pixels / 1e6
    manifest = {
        "cube": cube.name,
        "mode": mode,
        "kind": MODES.get(mode, mode.lower()),
        "config_hash": config_hash,
        "seconds": round(float(seconds), 6),
        "pixels": cube.n_pixels,
        "throughput_mpixels_per_s": mp / seconds if seconds > 0 else None,
    }
    if extra:
        manifest.update(extra)
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def timed(fn, *args, **kwargs):
    t0 = time.perf_counter()
    out = fn(*args, **kwargs)
    return out, time.perf_counter() - t0

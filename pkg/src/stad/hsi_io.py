"""Hyperspectral cube containers, raw/JSON cube files, PGM labels and a
synthetic scene generator.

Cubes are always held band-last (M x N x B), i.e. pixel-major, so that
``cube.pixels()`` is the L x B spectral matrix with L = M*N.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "CubeFormatError",
    "HyperCube",
    "NormalizationSpec",
    "normalize",
    "denormalize",
    "load_cube",
    "save_cube",
    "select_bands",
    "load_labels",
    "save_labels",
    "read_pgm",
    "write_pgm",
    "check_labels",
    "synth_scene",
    "smooth_spectrum",
]

_DTYPES = {"f32": "<f4", "f64": "<f8"}
_INTERLEAVES = ("bsq", "bil", "bip")


class CubeFormatError(ValueError):
    """A cube or label file is malformed or violates the cube invariants."""


@dataclass(frozen=True)
class HyperCube:
    data: np.ndarray
    name: str = "cube"

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise CubeFormatError(f"cube must be M x N x B, got shape {data.shape}")
        m, n, b = data.shape
        if m < 3 or n < 3 or b < 2:
            raise CubeFormatError(f"cube too small: {data.shape} (need M,N >= 3, B >= 2)")
        if not np.all(np.isfinite(data)):
            raise CubeFormatError(f"cube {self.name!r} contains NaN or Inf")
        data = np.array(data, dtype=np.float64)
        data.flags.writeable = False
        object.__setattr__(self, "data", data)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def bands(self) -> int:
        return self.data.shape[2]

    @property
    def n_pixels(self) -> int:
        return self.height * self.width

    def pixels(self) -> np.ndarray:
        """The L x B spectral matrix (row-major pixel order)."""
        return self.data.reshape(self.n_pixels, self.bands)


@dataclass(frozen=True)
class NormalizationSpec:
    mode: str  # "unit" -> [0, 1], "byte" -> [0, 255]
    lo: float
    hi: float

    @property
    def top(self) -> float:
        return 1.0 if self.mode == "unit" else 255.0


def normalize(cube: HyperCube | np.ndarray, mode: str = "unit") -> tuple[np.ndarray, NormalizationSpec]:
    """Per-cube min-max rescaling to [0, 1] ("unit") or [0, 255] ("byte")."""
    data = cube.data if isinstance(cube, HyperCube) else np.asarray(cube, dtype=np.float64)
    if mode not in ("unit", "byte"):
        raise ValueError(f"unknown normalization mode {mode!r}")
    lo, hi = float(data.min()), float(data.max())
    if not hi > lo:
        raise CubeFormatError("constant cube cannot be normalized")
    spec = NormalizationSpec(mode, lo, hi)
    return (data - lo) / (hi - lo) * spec.top, spec


def denormalize(values: np.ndarray, spec: NormalizationSpec) -> np.ndarray:
    return np.asarray(values) / spec.top * (spec.hi - spec.lo) + spec.lo


# ---------------------------------------------------------------------------
# raw + JSON sidecar
# ---------------------------------------------------------------------------

def _sidecar(path: Path) -> Path:
    return path.with_suffix(".json")


def save_cube(cube: HyperCube, path, interleave: str = "bsq", dtype: str = "f32") -> Path:
    """Write ``cube`` as a little-endian raw payload plus a JSON sidecar header."""
    path = Path(path)
    if interleave not in _INTERLEAVES:
        raise CubeFormatError(f"unsupported interleave {interleave!r}")
    if dtype not in _DTYPES:
        raise CubeFormatError(f"unsupported dtype {dtype!r}")
    d = cube.data
    arr = {"bsq": d.transpose(2, 0, 1), "bil": d.transpose(0, 2, 1), "bip": d}[interleave]
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes())
    header = {"height": cube.height, "width": cube.width, "bands": cube.bands,
              "dtype": dtype, "interleave": interleave, "name": cube.name}
    _sidecar(path).write_text(json.dumps(header, indent=2))
    return path


def _read_header(path: Path, header) -> dict:
    if header is None:
        header = _sidecar(path)
    if isinstance(header, dict):
        return header
    try:
        return json.loads(Path(header).read_text())
    except json.JSONDecodeError as exc:
        raise CubeFormatError(f"bad sidecar header for {path}: {exc}") from None


def _read_raw(path, header=None) -> tuple[np.ndarray, dict]:
    path = Path(path)
    hdr = _read_header(path, header)
    try:
        m, n, b = int(hdr["height"]), int(hdr["width"]), int(hdr["bands"])
        dtype, inter = hdr.get("dtype", "f32"), hdr.get("interleave", "bsq").lower()
    except (KeyError, TypeError, ValueError) as exc:
        raise CubeFormatError(f"incomplete header for {path}: {exc}") from None
    if dtype not in _DTYPES:
        raise CubeFormatError(f"unsupported dtype {dtype!r}")
    if inter not in _INTERLEAVES:
        raise CubeFormatError(f"unsupported interleave {inter!r}")
    payload = path.read_bytes()
    itemsize = np.dtype(_DTYPES[dtype]).itemsize
    if len(payload) != m * n * b * itemsize:
        raise CubeFormatError(
            f"{path}: payload has {len(payload)} bytes, header implies {m * n * b * itemsize}")
    flat = np.frombuffer(payload, dtype=_DTYPES[dtype])
    if inter == "bsq":
        data = flat.reshape(b, m, n).transpose(1, 2, 0)
    elif inter == "bil":
        data = flat.reshape(m, b, n).transpose(0, 2, 1)
    else:
        data = flat.reshape(m, n, b)
    return data.astype(np.float64), hdr


def load_cube(path, header=None) -> HyperCube:
    """Load a raw cube; ``header`` is a sidecar path or dict (default: ``<path>.json``)."""
    data, hdr = _read_raw(path, header)
    if not np.all(np.isfinite(data)):
        raise CubeFormatError(f"{path}: payload contains NaN or Inf")
    if data.max() == data.min():
        raise CubeFormatError(f"{path}: constant cube rejected")
    return HyperCube(data, name=hdr.get("name", Path(path).stem))


def select_bands(cube: HyperCube, first_k: int) -> HyperCube:
    """Keep the leading ``first_k`` bands."""
    if first_k < 2:
        raise ValueError(f"first_k must be >= 2, got {first_k}")
    if first_k > cube.bands:
        raise ValueError(f"first_k={first_k} exceeds band count {cube.bands}")
    return HyperCube(cube.data[:, :, :first_k], name=cube.name)


# ---------------------------------------------------------------------------
# PGM and label maps
# ---------------------------------------------------------------------------

def write_pgm(path, image: np.ndarray, maxval: int = 255) -> Path:
    """Binary (P5) PGM; 16-bit samples are big-endian as the format requires."""
    path = Path(path)
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError("PGM images are 2-D")
    if image.min() < 0 or image.max() > maxval:
        raise ValueError("pixel values outside [0, maxval]")
    dtype = ">u2" if maxval > 255 else "u1"
    body = np.ascontiguousarray(image, dtype=dtype).tobytes()
    head = f"P5\n{image.shape[1]} {image.shape[0]}\n{maxval}\n".encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(head + body)
    return path


def read_pgm(path) -> tuple[np.ndarray, int]:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5":
        raise CubeFormatError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    w, h, maxval = (int(t) for t in tokens[1:])
    pos += 1  # single whitespace after maxval
    dtype = ">u2" if maxval > 255 else "u1"
    need = w * h * np.dtype(dtype).itemsize
    body = raw[pos:pos + need]
    if len(body) != need:
        raise CubeFormatError(f"{path}: truncated PGM payload")
    return np.frombuffer(body, dtype=dtype).reshape(h, w).astype(np.int64), maxval


def check_labels(labels: np.ndarray, cube: HyperCube | None = None) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise CubeFormatError(f"label map must be 2-D, got {labels.shape}")
    if cube is not None and labels.shape != (cube.height, cube.width):
        raise CubeFormatError(f"label map {labels.shape} does not match cube "
                              f"{(cube.height, cube.width)}")
    if not np.all(np.isin(labels, (0, 1))):
        raise CubeFormatError("label values must be 0 or 1")
    return labels.astype(np.uint8)


def load_labels(path) -> np.ndarray:
    """PGM (nonzero = anomaly) or raw+JSON with bands=1."""
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        img, _ = read_pgm(path)
        return (img != 0).astype(np.uint8)
    data, hdr = _read_raw(path)
    if data.shape[2] != 1:
        raise CubeFormatError(f"{path}: label file must have bands=1")
    return check_labels((data[:, :, 0] != 0).astype(np.uint8))


def save_labels(labels: np.ndarray, path) -> Path:
    labels = check_labels(labels)
    return write_pgm(path, labels * 255, maxval=255)


# ---------------------------------------------------------------------------
# synthetic scenes
# ---------------------------------------------------------------------------

def smooth_spectrum(rng: np.random.Generator, bands: int) -> np.ndarray:
    """Random positive spectrum: a sloped baseline plus three Gaussian bumps."""
    x = np.linspace(0.0, 1.0, bands)
    s = rng.uniform(0.1, 0.4) + rng.uniform(-0.2, 0.2) * x
    for _ in range(3):
        s = s + rng.uniform(0.1, 0.6) * np.exp(-0.5 * ((x - rng.uniform()) / rng.uniform(0.08, 0.3)) ** 2)
    return np.clip(s, 0.02, None)


def _smooth_field(rng: np.random.Generator, m: int, n: int, cells: int = 4) -> np.ndarray:
    """Bilinear upsampling of a coarse random grid."""
    coarse = rng.normal(size=(cells + 1, cells + 1))
    yi = np.linspace(0, cells, m)
    xi = np.linspace(0, cells, n)
    y0 = np.minimum(yi.astype(int), cells - 1)
    x0 = np.minimum(xi.astype(int), cells - 1)
    fy = (yi - y0)[:, None]
    fx = (xi - x0)[None, :]
    c00 = coarse[y0][:, x0]
    c01 = coarse[y0][:, x0 + 1]
    c10 = coarse[y0 + 1][:, x0]
    c11 = coarse[y0 + 1][:, x0 + 1]
    return (c00 * (1 - fy) * (1 - fx) + c01 * (1 - fy) * fx
            + c10 * fy * (1 - fx) + c11 * fy * fx)


def _blob(center: tuple[int, int], size: int, m: int, n: int) -> np.ndarray:
    """The ``size`` pixels nearest to ``center`` (ties broken by raster index)."""
    yy, xx = np.mgrid[0:m, 0:n]
    d = (yy - center[0]) ** 2 + (xx - center[1]) ** 2
    order = np.lexsort((np.arange(m * n), d.ravel()))[:size]
    mask = np.zeros(m * n, dtype=bool)
    mask[order] = True
    return mask.reshape(m, n)


def _dilate(mask: np.ndarray) -> np.ndarray:
    out = mask.copy()
    out[1:, :] |= mask[:-1, :]
    out[:-1, :] |= mask[1:, :]
    out[:, 1:] |= mask[:, :-1]
    out[:, :-1] |= mask[:, 1:]
    return out


def synth_scene(seed: int, M: int = 32, N: int = 32, B: int = 20, n_targets: int = 4,
                target_size_px: int = 4, contrast: float = 0.4,
                noise: float = 0.01) -> tuple[HyperCube, np.ndarray]:
    """Low-rank background with small disjoint targets.

    The background mixes three random endmember spectra with smooth abundance
    fields and adds Gaussian noise.  Each target blends its own random spectrum
    into a compact blob: ``(1 - contrast) * background + contrast * target``.
    Returns the cube and its binary label map.
    """
    if n_targets < 0:
        raise ValueError("n_targets must be >= 0")
    if n_targets and not 0 < target_size_px * n_targets < M * N / 4:
        raise ValueError("targets must be small relative to the scene")
    rng = np.random.default_rng(seed)
    ends = np.stack([smooth_spectrum(rng, B) for _ in range(3)])
    fields = np.stack([_smooth_field(rng, M, N) for _ in range(3)], axis=-1)
    abund = np.exp(1.5 * fields)
    abund /= abund.sum(axis=-1, keepdims=True)
    background = abund @ ends
    data = background + noise * rng.normal(size=(M, N, B))

    labels = np.zeros((M, N), dtype=np.uint8)
    occupied = np.zeros((M, N), dtype=bool)
    for _ in range(n_targets):
        spectrum = smooth_spectrum(rng, B)
        for _attempt in range(100):
            center = (int(rng.integers(1, M - 1)), int(rng.integers(1, N - 1)))
            blob = _blob(center, target_size_px, M, N)
            if not np.any(_dilate(blob) & occupied):
                break
        else:
            raise ValueError("could not place disjoint targets in 100 attempts")
        occupied |= blob
        labels[blob] = 1
        data[blob] = (1.0 - contrast) * data[blob] + contrast * spectrum
    return HyperCube(data, name=f"synth-{seed}"), labels

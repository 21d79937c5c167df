"""Teacher (per-pixel-token Transformer) and student (conv/deconv + pixelwise FC)
reconstruction networks.  Each network emits three reconstructions, one per block.

Layouts:
    teacher input/outputs: (..., T, B) with one token per pixel
    student input/outputs: (..., B, M, N) image rasters
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tn
from .tensor import DimensionError, Tensor

__all__ = [
    "TeacherSpec",
    "StudentSpec",
    "ModelParams",
    "init_params",
    "teacher_forward",
    "student_forward",
    "image_to_tokens",
    "tokens_to_image",
    "teacher_reconstruct_image",
    "save_checkpoint",
    "load_checkpoint",
    "write_arrays",
    "read_arrays",
]


@dataclass(frozen=True)
class TeacherSpec:
    bands: int
    hidden: int = 1000
    heads: int = 2
    blocks: int = 3
    ff_hidden: int = 1000
    kind: str = field(default="teacher", init=False)


@dataclass(frozen=True)
class StudentSpec:
    bands: int
    hidden: int = 100
    kernel: int = 3
    kind: str = field(default="student", init=False)


def _spec_from_dict(d: dict):
    d = dict(d)
    kind = d.pop("kind")
    return TeacherSpec(**d) if kind == "teacher" else StudentSpec(**d)


@dataclass
class ModelParams:
    """Named parameter tensors plus an optional EMA shadow of their values."""

    spec: TeacherSpec | StudentSpec
    tensors: dict[str, Tensor]
    seed: int | None = None
    ema: dict[str, np.ndarray] | None = None

    @property
    def kind(self) -> str:
        return self.spec.kind

    @property
    def bands(self) -> int:
        return self.spec.bands

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def parameters(self) -> list[Tensor]:
        return list(self.tensors.values())

    def n_parameters(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def averaged(self) -> "ModelParams":
        """Inference copy built from the EMA shadow (or the raw values if none)."""
        src = self.ema if self.ema is not None else {k: t.values for k, t in self.tensors.items()}
        return ModelParams(self.spec, {k: Tensor(v.copy(), name=k) for k, v in src.items()},
                           self.seed)

    def frozen(self) -> "ModelParams":
        return ModelParams(self.spec, {k: Tensor(t.values, name=k) for k, t in self.tensors.items()},
                           self.seed, self.ema)


def _glorot(rng, shape, fan_in, fan_out) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def _teacher_shapes(s: TeacherSpec):
    h, b, f = s.hidden, s.bands, s.ff_hidden
    if h % s.heads:
        raise ValueError("hidden size must be divisible by the head count")
    yield "proj.w", (b, h)
    yield "proj.b", (h,)
    for i in range(1, s.blocks + 1):
        p = f"blk{i}."
        yield p + "ln1.g", (h,)
        yield p + "ln1.b", (h,)
        for m in "qkvo":
            yield p + f"attn.w{m}", (h, h)
            yield p + f"attn.b{m}", (h,)
        yield p + "ln2.g", (h,)
        yield p + "ln2.b", (h,)
        yield p + "ff.w1", (h, f)
        yield p + "ff.b1", (f,)
        yield p + "ff.w2", (f, h)
        yield p + "ff.b2", (h,)
        yield f"head{i}.w", (h, b)
        yield f"head{i}.b", (b,)


def _student_shapes(s: StudentSpec):
    b, h, k = s.bands, s.hidden, s.kernel
    yield "b1.conv", (h, b, k, k)
    yield "b1.conv_b", (h,)
    yield "b1.deconv", (h, b, k, k)
    yield "b1.deconv_b", (b,)
    yield "b2.conv", (h, h, k, k)
    yield "b2.conv_b", (h,)
    yield "b2.deconv", (h, b, k, k)
    yield "b2.deconv_b", (b,)
    yield "b3.fc1", (h, h)
    yield "b3.fc1_b", (h,)
    yield "b3.fc2", (h, b)
    yield "b3.fc2_b", (b,)


def _fans(name: str, shape: tuple) -> tuple[int, int]:
    if len(shape) == 4:
        out_c, in_c, k, _ = shape
        if name.endswith("deconv"):
            out_c, in_c = in_c, out_c
        return in_c * k * k, out_c * k * k
    return shape[0], shape[1]


def init_params(seed: int, spec: TeacherSpec | StudentSpec) -> ModelParams:
    """Glorot-uniform weights, zero biases, unit layer-norm gains."""
    rng = np.random.default_rng(seed)
    shapes = _teacher_shapes(spec) if spec.kind == "teacher" else _student_shapes(spec)
    tensors = {}
    for name, shape in shapes:
        if name.endswith(".g"):
            values = np.ones(shape)
        elif len(shape) == 1:
            values = np.zeros(shape)
        else:
            values = _glorot(rng, shape, *_fans(name, shape))
        tensors[name] = Tensor(values, requires_grad=True, name=name)
    return ModelParams(spec, tensors, seed)


# ---------------------------------------------------------------------------
# teacher
# ---------------------------------------------------------------------------

def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return tn.add(tn.matmul(x, w), b)


def _attention(x: Tensor, p: ModelParams, pre: str, heads: int, attn_log: list | None) -> Tensor:
    *lead, t, h = x.shape
    hd = h // heads

    def split(z: Tensor) -> Tensor:
        z = tn.reshape(z, tuple(lead) + (t, heads, hd))
        axes = tuple(range(len(lead))) + tuple(len(lead) + a for a in (1, 0, 2))
        return tn.transpose(z, axes)

    q = split(_linear(x, p[pre + "attn.wq"], p[pre + "attn.bq"]))
    k = split(_linear(x, p[pre + "attn.wk"], p[pre + "attn.bk"]))
    v = split(_linear(x, p[pre + "attn.wv"], p[pre + "attn.bv"]))
    nd = len(lead) + 3
    kt = tn.transpose(k, tuple(range(nd - 2)) + (nd - 1, nd - 2))
    weights = tn.softmax_lastdim(tn.scale(tn.matmul(q, kt), 1.0 / math.sqrt(hd)))
    if attn_log is not None:
        attn_log.append(weights.values)
    ctx = tn.matmul(weights, v)  # (..., heads, T, hd)
    axes = tuple(range(len(lead))) + tuple(len(lead) + a for a in (1, 0, 2))
    ctx = tn.reshape(tn.transpose(ctx, axes), tuple(lead) + (t, h))
    return _linear(ctx, p[pre + "attn.wo"], p[pre + "attn.bo"])


def teacher_forward(params: ModelParams, X, return_attention: bool = False):
    """Three reconstructions of the token matrix ``X`` (..., T, B).

    Pre-norm encoder blocks: ``x + attn(ln(x))`` then ``x + ff(ln(x))``, with a
    separate linear readout to B bands after every block.
    """
    spec = params.spec
    X = tn.as_tensor(X)
    if X.ndim < 2 or X.shape[-1] != spec.bands:
        raise DimensionError(f"teacher expects (..., T, {spec.bands}) input, got {X.shape}")
    attn_log: list | None = [] if return_attention else None
    h = _linear(X, params["proj.w"], params["proj.b"])
    outs = []
    for i in range(1, spec.blocks + 1):
        pre = f"blk{i}."
        a = tn.layernorm(h, params[pre + "ln1.g"], params[pre + "ln1.b"])
        h = tn.add(h, _attention(a, params, pre, spec.heads, attn_log))
        f = tn.layernorm(h, params[pre + "ln2.g"], params[pre + "ln2.b"])
        f = tn.relu(_linear(f, params[pre + "ff.w1"], params[pre + "ff.b1"]))
        h = tn.add(h, _linear(f, params[pre + "ff.w2"], params[pre + "ff.b2"]))
        outs.append(_linear(h, params[f"head{i}.w"], params[f"head{i}.b"]))
    if return_attention:
        return tuple(outs), attn_log
    return tuple(outs)


def image_to_tokens(x: np.ndarray) -> np.ndarray:
    """(..., B, M, N) raster -> (..., M*N, B) tokens in row-major pixel order."""
    *lead, b, m, n = x.shape
    return np.moveaxis(x, -3, -1).reshape(tuple(lead) + (m * n, b))


def tokens_to_image(t: np.ndarray, m: int, n: int) -> np.ndarray:
    *lead, _, b = t.shape
    return np.moveaxis(t.reshape(tuple(lead) + (m, n, b)), -1, -3)


def tile_slices(m: int, n: int, tile: int = 32):
    for i in range(0, m, tile):
        for j in range(0, n, tile):
            yield slice(i, min(i + tile, m)), slice(j, min(j + tile, n))


def teacher_reconstruct_image(params: ModelParams, image: np.ndarray, tile: int = 32):
    """Teacher reconstructions of an (M, N, B) image with attention confined to tiles."""
    m, n, _ = image.shape
    outs = [np.zeros_like(image, dtype=np.float64) for _ in range(params.spec.blocks)]
    for si, sj in tile_slices(m, n, tile):
        block = image[si, sj]
        toks = block.reshape(-1, block.shape[-1])
        for k, o in enumerate(teacher_forward(params, toks)):
            outs[k][si, sj] = o.values.reshape(block.shape)
    return tuple(outs)


# ---------------------------------------------------------------------------
# student
# ---------------------------------------------------------------------------

def _bias_chw(b: Tensor) -> Tensor:
    return tn.reshape(b, (b.shape[0], 1, 1))


def _pixelwise(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Apply a dense layer to the channel vector of every pixel of (..., C, M, N)."""
    nd = x.ndim
    to_last = tuple(range(nd - 3)) + (nd - 2, nd - 1, nd - 3)
    to_chw = tuple(range(nd - 3)) + (nd - 1, nd - 3, nd - 2)
    y = _linear(tn.transpose(x, to_last), w, b)
    return tn.transpose(y, to_chw)


def student_forward(params: ModelParams, X):
    """Three reconstructions of the raster ``X`` (..., B, M, N).

    Blocks 1 and 2 are conv -> relu (the trunk) with a deconv readout tap;
    block 3 is a pixelwise two-layer dense net on the block-2 features.
    """
    spec = params.spec
    X = tn.as_tensor(X)
    if X.ndim < 3 or X.shape[-3] != spec.bands:
        raise DimensionError(f"student expects (..., {spec.bands}, M, N) input, got {X.shape}")
    if X.shape[-1] < 3 or X.shape[-2] < 3:
        raise DimensionError(f"student needs spatial dims >= 3, got {X.shape[-2:]}")
    p = params
    f1 = tn.relu(tn.add(tn.conv2d(X, p["b1.conv"]), _bias_chw(p["b1.conv_b"])))
    r1 = tn.add(tn.deconv2d(f1, p["b1.deconv"]), _bias_chw(p["b1.deconv_b"]))
    f2 = tn.relu(tn.add(tn.conv2d(f1, p["b2.conv"]), _bias_chw(p["b2.conv_b"])))
    r2 = tn.add(tn.deconv2d(f2, p["b2.deconv"]), _bias_chw(p["b2.deconv_b"]))
    f3 = tn.relu(_pixelwise(f2, p["b3.fc1"], p["b3.fc1_b"]))
    r3 = _pixelwise(f3, p["b3.fc2"], p["b3.fc2_b"])
    return r1, r2, r3


# ---------------------------------------------------------------------------
# checkpoints: JSON manifest + one little-endian float64 file per tensor
# ---------------------------------------------------------------------------

def _fname(name: str) -> str:
    return name + ".f64"


def write_arrays(directory: Path, arrays: dict[str, np.ndarray]) -> dict:
    directory.mkdir(parents=True, exist_ok=True)
    shapes = {}
    for name, arr in arrays.items():
        (directory / _fname(name)).write_bytes(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        shapes[name] = list(np.shape(arr))
    return shapes


def read_arrays(directory: Path, shapes: dict) -> dict[str, np.ndarray]:
    out = {}
    for name, shape in shapes.items():
        raw = (directory / _fname(name)).read_bytes()
        arr = np.frombuffer(raw, dtype="<f8")
        if arr.size != int(np.prod(shape)):
            raise ValueError(f"checkpoint tensor {name!r} has wrong length")
        out[name] = arr.reshape(shape).astype(np.float64)
    return out


def save_checkpoint(params: ModelParams, directory, extra: dict | None = None) -> Path:
    directory = Path(directory)
    shapes = write_arrays(directory / "tensors", {k: t.values for k, t in params.tensors.items()})
    manifest = {"kind": params.kind, "spec": asdict(params.spec), "seed": params.seed,
                "tensors": shapes, "has_ema": params.ema is not None}
    if params.ema is not None:
        write_arrays(directory / "ema", params.ema)
    if extra:
        manifest.update(extra)
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return directory


def load_checkpoint(directory) -> tuple[ModelParams, dict]:
    directory = Path(directory)
    mf = directory / "manifest.json"
    if not mf.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {mf}")
    manifest = json.loads(mf.read_text())
    spec = _spec_from_dict(manifest["spec"])
    values = read_arrays(directory / "tensors", manifest["tensors"])
    tensors = {k: Tensor(v, requires_grad=True, name=k) for k, v in values.items()}
    ema = read_arrays(directory / "ema", manifest["tensors"]) if manifest.get("has_ema") else None
    return ModelParams(spec, tensors, manifest.get("seed"), ema), manifest

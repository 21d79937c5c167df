"""Teacher self-supervised reconstruction training and teacher -> student distillation."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tn
from .networks import (ModelParams, StudentSpec, TeacherSpec, image_to_tokens, init_params,
                       load_checkpoint, read_arrays, save_checkpoint, student_forward,
                       teacher_forward, write_arrays)
from .stf import NumericalError
from .tensor import DimensionError, GradTape, Tensor

__all__ = [
    "TrainConfig",
    "TrainLog",
    "AdamState",
    "teacher_loss",
    "distill_loss",
    "adam_step",
    "ema_update",
    "sample_patches",
    "train_teacher",
    "train_student",
]

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    teacher_epochs: int = 50
    student_epochs: int = 250
    batch_size: int = 16
    ema_decay: float = 0.9
    patch: int = 9
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    teacher_hidden: int = 1000
    teacher_heads: int = 2
    teacher_blocks: int = 3
    student_hidden: int = 100

    def __post_init__(self):
        for name in ("lr", "teacher_epochs", "student_epochs", "batch_size", "patch",
                     "teacher_hidden", "teacher_heads", "teacher_blocks", "student_hidden"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0 <= self.ema_decay < 1:
            raise ValueError("ema_decay must lie in [0, 1)")

    def teacher_spec(self, bands: int) -> TeacherSpec:
        return TeacherSpec(bands, hidden=self.teacher_hidden, heads=self.teacher_heads,
                           blocks=self.teacher_blocks, ff_hidden=self.teacher_hidden)

    def student_spec(self, bands: int) -> StudentSpec:
        return StudentSpec(bands, hidden=self.student_hidden)


@dataclass
class TrainLog:
    epoch: list[int] = field(default_factory=list)
    loss: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)
    param_norm: list[float] = field(default_factory=list)
    shuffles: list[list[int]] = field(default_factory=list)

    def append(self, epoch, loss, seconds, param_norm, order):
        self.epoch.append(int(epoch))
        self.loss.append(float(loss))
        self.seconds.append(float(seconds))
        self.param_norm.append(float(param_norm))
        self.shuffles.append([int(i) for i in order])

    def to_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "loss", "seconds", "param_norm"])
            for row in zip(self.epoch, self.loss, self.seconds, self.param_norm):
                w.writerow([row[0], repr(row[1]), f"{row[2]:.3f}", repr(row[3])])
        return path


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _check_same(a_shape, b_shape):
    if tuple(a_shape) != tuple(b_shape):
        raise DimensionError(f"shape mismatch: {tuple(a_shape)} vs {tuple(b_shape)}")


def _norm_sum(diffs: list[Tensor], batched: bool) -> Tensor:
    total = None
    for d in diffs:
        if batched:
            n = tn.tsum(tn.l2norm(d, axis=tuple(range(1, d.ndim))))
        else:
            n = tn.l2norm(d)
        total = n if total is None else tn.add(total, n)
    return total


def teacher_loss(outputs, D, batched: bool | None = None) -> Tensor:
    """Sum over the three reconstructions of the Frobenius norm of the residual.

    A leading batch axis (3-D input) is summed over, one norm per item.
    """
    D = tn.as_tensor(D)
    for o in outputs:
        _check_same(o.shape, D.shape)
    if batched is None:
        batched = D.ndim == 3
    return _norm_sum([tn.sub(o, D) for o in outputs], batched)


def distill_loss(student_outputs, teacher_outputs, batched: bool | None = None) -> Tensor:
    """Same form as :func:`teacher_loss` against fixed teacher reconstructions.

    Student rasters (..., B, M, N) are flattened to (..., M*N, B) tokens first.
    Teacher outputs are taken as constants.
    """
    diffs = []
    for s, t in zip(student_outputs, teacher_outputs):
        tv = t.values if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
        if s.ndim == tv.ndim + 1:
            s = _raster_to_tokens(s)
        _check_same(s.shape, tv.shape)
        diffs.append(tn.sub(s, Tensor(tv)))
    if batched is None:
        batched = diffs[0].ndim == 3
    return _norm_sum(diffs, batched)


def _raster_to_tokens(x: Tensor) -> Tensor:
    *lead, b, m, n = x.shape
    nd = x.ndim
    axes = tuple(range(nd - 3)) + (nd - 2, nd - 1, nd - 3)
    return tn.reshape(tn.transpose(x, axes), tuple(lead) + (m * n, b))


# ---------------------------------------------------------------------------
# optimizer and EMA
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "AdamState":
        return cls({k: np.zeros_like(p.values) for k, p in params.tensors.items()},
                   {k: np.zeros_like(p.values) for k, p in params.tensors.items()})


def adam_step(params: ModelParams, state: AdamState, cfg: TrainConfig = TrainConfig()) -> None:
    """Bias-corrected Adam update of every tensor from its ``.grad``."""
    for name, p in params.tensors.items():
        if p.grad is None:
            raise tn.GradientError(f"parameter {name!r} has no gradient")
        if not np.all(np.isfinite(p.grad)):
            bad = int(np.size(p.grad) - np.isfinite(p.grad).sum())
            raise NumericalError(f"non-finite gradient in {name!r} ({bad} entries) at step {state.t + 1}")
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.tensors.items():
        g = p.grad
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.values -= cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)


def ema_update(shadow: dict[str, np.ndarray], params: ModelParams, decay: float = 0.9) -> None:
    for name, p in params.tensors.items():
        s = shadow[name]
        s *= decay
        s += (1.0 - decay) * p.values


# ---------------------------------------------------------------------------
# data sampling
# ---------------------------------------------------------------------------

def sample_patches(rng: np.random.Generator, cubes: list[np.ndarray], idx, patch: int) -> np.ndarray:
    """One random ``patch`` x ``patch`` window from each selected (M, N, B) cube.

    Returns a (P, B, patch, patch) raster batch.
    """
    out = []
    for i in idx:
        c = cubes[i]
        m, n, _ = c.shape
        if m < patch or n < patch:
            raise DimensionError(f"cube {i} is smaller than the {patch}x{patch} patch")
        r0 = int(rng.integers(0, m - patch + 1))
        c0 = int(rng.integers(0, n - patch + 1))
        out.append(np.moveaxis(c[r0:r0 + patch, c0:c0 + patch], -1, 0))
    return np.stack(out)


def _epoch_rng(seed: int, epoch: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream, epoch])


def _param_norm(params: ModelParams) -> float:
    return float(np.sqrt(sum(float((t.values ** 2).sum()) for t in params.tensors.values())))


# ---------------------------------------------------------------------------
# loops
# ---------------------------------------------------------------------------

def _check_trainset(trainset: list[np.ndarray], cfg: TrainConfig) -> int:
    if not trainset:
        raise ValueError("empty training set")
    bands = {c.shape[-1] for c in trainset}
    if len(bands) != 1:
        raise DimensionError(f"training cubes disagree on band count: {sorted(bands)}")
    if cfg.batch_size > len(trainset):
        raise ValueError(f"batch_size {cfg.batch_size} exceeds training-set size {len(trainset)}")
    return bands.pop()


def _save_state(directory: Path, params: ModelParams, adam: AdamState, epoch: int,
                log: TrainLog) -> None:
    save_checkpoint(params, directory, extra={"epoch": epoch, "adam_t": adam.t})
    write_arrays(directory / "adam_m", adam.m)
    write_arrays(directory / "adam_v", adam.v)
    (directory / "log.json").write_text(json.dumps(asdict(log)))


def _load_state(directory: Path):
    params, manifest = load_checkpoint(directory)
    adam = AdamState(read_arrays(directory / "adam_m", manifest["tensors"]),
                     read_arrays(directory / "adam_v", manifest["tensors"]),
                     int(manifest["adam_t"]))
    log = TrainLog(**json.loads((directory / "log.json").read_text()))
    return params, adam, int(manifest["epoch"]), log


def _run(kind: str, cfg: TrainConfig, trainset, epochs: int, params: ModelParams, step_loss,
         state_dir=None, checkpoint_every: int = 0, resume: bool = False, stream: int = 0):
    adam = AdamState.zeros_like(params)
    params.ema = {k: t.values.copy() for k, t in params.tensors.items()}
    log = TrainLog()
    start = 0
    state_dir = Path(state_dir) if state_dir is not None else None
    if resume and state_dir is not None and (state_dir / "manifest.json").exists():
        params, adam, start, log = _load_state(state_dir)
        logger.info("%s: resuming after epoch %d", kind, start)
    n = len(trainset)
    bs = cfg.batch_size
    for epoch in range(start + 1, epochs + 1):
        t0 = time.perf_counter()
        rng = _epoch_rng(cfg.seed, epoch, stream)
        order = rng.permutation(n)
        losses = []
        for s in range(0, n, bs):
            batch = sample_patches(rng, trainset, order[s:s + bs], cfg.patch)
            tn.zero_grad(params.parameters())
            with GradTape() as tape:
                loss = step_loss(params, batch)
            value = loss.item()
            if not np.isfinite(value):
                raise NumericalError(f"{kind}: non-finite loss at epoch {epoch}"
                                     + (f"; last good state in {state_dir}" if state_dir else ""))
            tape.backward(loss)
            adam_step(params, adam, cfg)
            ema_update(params.ema, params, cfg.ema_decay)
            losses.append(value)
        log.append(epoch, float(np.mean(losses)), time.perf_counter() - t0, _param_norm(params), order)
        logger.info("%s epoch %d/%d loss %.6g", kind, epoch, epochs, log.loss[-1])
        if state_dir is not None and checkpoint_every and (epoch % checkpoint_every == 0 or epoch == epochs):
            _save_state(state_dir, params, adam, epoch, log)
    tn.zero_grad(params.parameters())
    return params, log


def train_teacher(cfg: TrainConfig, trainset: list[np.ndarray], state_dir=None,
                  checkpoint_every: int = 0, resume: bool = False,
                  epochs: int | None = None) -> tuple[ModelParams, TrainLog]:
    """Train the teacher on random patches of anomaly-free (M, N, B) cubes in [0, 1].

    Returns the parameters (raw values plus EMA shadow) and the per-epoch log.
    """
    bands = _check_trainset(trainset, cfg)
    params = init_params(cfg.seed, cfg.teacher_spec(bands))

    def step_loss(p, batch):
        tokens = image_to_tokens(batch)
        return teacher_loss(teacher_forward(p, tokens), tokens)

    return _run("teacher", cfg, trainset, epochs or cfg.teacher_epochs, params, step_loss,
                state_dir, checkpoint_every, resume, stream=0)


def train_student(cfg: TrainConfig, trainset: list[np.ndarray], teacher: ModelParams,
                  state_dir=None, checkpoint_every: int = 0, resume: bool = False,
                  epochs: int | None = None) -> tuple[ModelParams, TrainLog]:
    """Distill the frozen EMA teacher into a fresh student."""
    bands = _check_trainset(trainset, cfg)
    if teacher.bands != bands:
        raise DimensionError(f"teacher has {teacher.bands} bands, data has {bands}")
    frozen = teacher.averaged()
    params = init_params(cfg.seed + 1, cfg.student_spec(bands))

    def step_loss(p, batch):
        targets = [o.values for o in teacher_forward(frozen, image_to_tokens(batch))]
        return distill_loss(student_forward(p, batch), targets)

    return _run("student", cfg, trainset, epochs or cfg.student_epochs, params, step_loss,
                state_dir, checkpoint_every, resume, stream=1)

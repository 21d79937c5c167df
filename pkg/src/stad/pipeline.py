"""Run configuration, on-disk dataset layout and the stage functions behind the CLI.

A dataset directory looks like::

    data/
      manifest.json
      train/train-000.raw  train/train-000.json   (anomaly-free cubes)
      test/test-000.raw    test/test-000.json     (cubes with targets)
      labels/test-000.pgm

Every stage writes its artifacts together with the config hash and seed, so two
runs of the same configuration can be compared file by file.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .detector import MODES, ablation_detect, export_scoremap, write_detection_manifest
from .evaluation import EvalReport, ImageEval, dependency_report, evaluate_set
from .hsi_io import HyperCube, load_cube, load_labels, normalize, save_cube, save_labels, synth_scene
from .networks import ModelParams, load_checkpoint, save_checkpoint
from .stf import StfConfig, rx_detector
from .training import TrainConfig, train_student, train_teacher

__all__ = [
    "RunConfig",
    "DETECT_MODES",
    "config_hash",
    "synth_dataset",
    "load_split",
    "load_test_labels",
    "run_train_teacher",
    "run_distill",
    "run_detect",
    "read_scores",
    "run_eval",
    "run_dep",
    "run_desk_scale",
]

logger = logging.getLogger(__name__)

DETECT_MODES = tuple(MODES) + ("RX",)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    # synthetic data
    train_count: int = 20
    test_count: int = 6
    height: int = 32
    width: int = 32
    bands: int = 20
    targets: int = 4
    target_size: int = 4
    contrast: float = 0.4
    noise: float = 0.01
    # training
    lr: float = 1e-4
    teacher_epochs: int = 50
    student_epochs: int = 250
    batch_size: int = 16
    ema_decay: float = 0.9
    patch: int = 9
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    teacher_hidden: int = 1000
    teacher_heads: int = 2
    teacher_blocks: int = 3
    student_hidden: int = 100
    # small target filter
    stf_radius: int = 1
    sigma_s: float = 1.0
    sigma_c: float = 80.0
    ridge: float | None = None
    # detection and evaluation
    tile: int = 32
    points: int = 30000

    @classmethod
    def fields(cls) -> list[str]:
        return [f.name for f in dataclasses.fields(cls)]

    @classmethod
    def merged(cls, file: str | Path | None = None, **flags) -> "RunConfig":
        """Defaults, overridden by a JSON file, overridden by non-None flags."""
        values = asdict(cls())
        if file is not None:
            doc = json.loads(Path(file).read_text())
            unknown = set(doc) - set(values)
            if unknown:
                raise ValueError(f"unknown config keys: {sorted(unknown)}")
            values.update(doc)
        values.update({k: v for k, v in flags.items() if v is not None and k in values})
        return cls(**values)

    def train_config(self) -> TrainConfig:
        names = {f.name for f in dataclasses.fields(TrainConfig)}
        return TrainConfig(**{k: v for k, v in asdict(self).items() if k in names})

    def stf_config(self) -> StfConfig:
        return StfConfig(self.stf_radius, self.sigma_s, self.sigma_c, self.ridge)

    @property
    def hash(self) -> str:
        return config_hash(self)


def config_hash(cfg: RunConfig) -> str:
    blob = json.dumps(asdict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def _stamp(cfg: RunConfig) -> dict:
    return {"config_hash": cfg.hash, "seed": cfg.seed}


def _scene_seed(seed: int, split: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, split, index]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

def synth_dataset(cfg: RunConfig, out) -> Path:
    """Write ``train_count`` anomaly-free and ``test_count`` labeled cubes."""
    if cfg.test_count and cfg.targets < 1:
        raise ValueError("test cubes need at least one target (--targets >= 1)")
    out = Path(out)
    for sub in ("train", "test", "labels"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    files = {"train": [], "test": []}
    for i in range(cfg.train_count):
        cube, _ = synth_scene(_scene_seed(cfg.seed, 0, i), cfg.height, cfg.width, cfg.bands,
                              0, cfg.target_size, cfg.contrast, cfg.noise)
        name = f"train-{i:03d}"
        save_cube(HyperCube(cube.data, name), out / "train" / f"{name}.raw", dtype="f64")
        files["train"].append(name)
    for i in range(cfg.test_count):
        cube, labels = synth_scene(_scene_seed(cfg.seed, 1, i), cfg.height, cfg.width, cfg.bands,
                                   cfg.targets, cfg.target_size, cfg.contrast, cfg.noise)
        name = f"test-{i:03d}"
        save_cube(HyperCube(cube.data, name), out / "test" / f"{name}.raw", dtype="f64")
        save_labels(labels, out / "labels" / f"{name}.pgm")
        files["test"].append(name)
    manifest = {**_stamp(cfg), "config": asdict(cfg), **files}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return out


def load_split(data, split: str) -> list[HyperCube]:
    """All cubes of ``train`` or ``test`` in name order."""
    folder = Path(data) / split
    if not folder.is_dir():
        raise FileNotFoundError(f"no {split}/ directory in {data}")
    cubes = [load_cube(p) for p in sorted(folder.glob("*.raw"))]
    if not cubes:
        raise FileNotFoundError(f"no cubes in {folder}")
    return cubes


def load_test_labels(data) -> dict[str, np.ndarray]:
    folder = Path(data) / "labels"
    return {p.stem: load_labels(p) for p in sorted(folder.glob("*.pgm"))}


def _trainset(data, cfg: RunConfig) -> list[np.ndarray]:
    cubes = load_split(data, "train")
    for c in cubes:
        if c.bands != cfg.bands:
            raise ValueError(f"{c.name}: {c.bands} bands, config expects {cfg.bands}")
    return [normalize(c, "unit")[0] for c in cubes]


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _finish_training(params: ModelParams, log, cfg: RunConfig, out: Path, kind: str,
                     seconds: float) -> Path:
    save_checkpoint(params, out / "checkpoint", extra=_stamp(cfg))
    log.to_csv(out / f"{kind}_log.csv")
    (out / "run.json").write_text(json.dumps(
        {**_stamp(cfg), "kind": kind, "epochs": len(log.epoch), "final_loss": log.loss[-1],
         "initial_loss": log.loss[0], "seconds": round(seconds, 3)}, indent=2, sort_keys=True))
    return out / "checkpoint"


def run_train_teacher(cfg: RunConfig, data, out, checkpoint_every: int = 0,
                      resume: bool = False) -> Path:
    out = Path(out)
    t0 = time.perf_counter()
    params, log = train_teacher(cfg.train_config(), _trainset(data, cfg), out / "state",
                                checkpoint_every, resume)
    return _finish_training(params, log, cfg, out, "teacher", time.perf_counter() - t0)


def run_distill(cfg: RunConfig, data, teacher_checkpoint, out, checkpoint_every: int = 0,
                resume: bool = False) -> Path:
    out = Path(out)
    teacher, _ = load_checkpoint(teacher_checkpoint)
    if teacher.kind != "teacher":
        raise ValueError(f"{teacher_checkpoint} holds a {teacher.kind}, not a teacher")
    t0 = time.perf_counter()
    params, log = train_student(cfg.train_config(), _trainset(data, cfg), teacher, out / "state",
                                checkpoint_every, resume)
    return _finish_training(params, log, cfg, out, "student", time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# detection
# ---------------------------------------------------------------------------

def _detect_one(cube_path: str, net_path: str | None, mode: str, bypass: bool,
                cfg: RunConfig, out: str, fmt: str) -> str:
    cube = load_cube(cube_path)
    net = None
    if net_path is not None:
        net = load_checkpoint(net_path)[0].averaged()
    t0 = time.perf_counter()
    if mode == "RX":
        values = rx_detector(cube, cfg.ridge)
    else:
        values = ablation_detect(mode, net, cube, cfg.stf_config(), bypass, cfg.tile).values
    seconds = time.perf_counter() - t0
    target = Path(out) / cube.name
    degenerate = export_scoremap(values, target, fmt)
    write_detection_manifest(target.with_suffix(".json"), cube, mode, cfg.hash, seconds,
                             {"seed": cfg.seed, "stf_bypass": bypass, "constant_map": degenerate,
                              "network": None if net is None else net.kind})
    return cube.name


def run_detect(cfg: RunConfig, cubes: list[Path], out, mode: str = "E", checkpoint=None,
               bypass: bool = False, jobs: int = 1, fmt: str = "both") -> list[str]:
    """Score every cube file; writes ``<name>.csv/.pgm`` and ``<name>.json`` under ``out``."""
    if mode not in DETECT_MODES:
        raise ValueError(f"unknown mode {mode!r}; choose from {list(DETECT_MODES)}")
    needs_net = mode not in ("C", "RX")
    if needs_net and checkpoint is None:
        raise ValueError(f"mode {mode} needs --checkpoint")
    net_path = str(checkpoint) if needs_net else None
    if net_path is not None and not (Path(net_path) / "manifest.json").exists():
        raise FileNotFoundError(f"no checkpoint at {net_path}")
    Path(out).mkdir(parents=True, exist_ok=True)
    args = [(str(c), net_path, mode, bypass, cfg, str(out), fmt) for c in cubes]
    if jobs > 1 and len(args) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_detect_one, *zip(*args)))
    return [_detect_one(*a) for a in args]


def read_scores(directory) -> dict[str, np.ndarray]:
    """Score maps by name; CSV preferred, 16-bit PGM otherwise."""
    directory = Path(directory)
    scores = {p.stem: np.loadtxt(p, delimiter=",", ndmin=2) for p in sorted(directory.glob("*.csv"))}
    for p in sorted(directory.glob("*.pgm")):
        if p.stem not in scores:
            scores[p.stem] = load_labels(p).astype(np.float64)
    if not scores:
        raise FileNotFoundError(f"no score maps in {directory}")
    return scores


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def run_eval(cfg: RunConfig, scores_dir, labels_dir, out, jobs: int = 1) -> EvalReport:
    out = Path(out)
    labels = {p.stem: load_labels(p) for p in sorted(Path(labels_dir).glob("*.pgm"))}
    report = evaluate_set(read_scores(scores_dir), labels, cfg.points, out / "roc", jobs)
    report.to_json(out / "report.json")
    report.to_csv(out / "report.csv")
    (out / "run.json").write_text(json.dumps(_stamp(cfg), indent=2))
    return report


def _report_from(directory, labels_dir, cfg: RunConfig) -> EvalReport:
    directory = Path(directory)
    doc_path = directory / "report.json"
    if doc_path.exists():
        doc = json.loads(doc_path.read_text())
        images = [ImageEval(d["name"], d["auc_df"], d["auc_ftau"], d["auc_bs"]) for d in doc["images"]]
        return EvalReport(images, doc.get("excluded", []), doc.get("points", cfg.points))
    if labels_dir is None:
        raise ValueError(f"{directory} has no report.json; pass --labels-dir to evaluate score maps")
    labels = {p.stem: load_labels(p) for p in sorted(Path(labels_dir).glob("*.pgm"))}
    return evaluate_set(read_scores(directory), labels, cfg.points)


def run_dep(cfg: RunConfig, phi_dir, psi_dir, out, labels_dir=None):
    """Dependency of detector phi on detector psi from eval reports or score maps."""
    out = Path(out)
    rep = dependency_report(_report_from(phi_dir, labels_dir, cfg), _report_from(psi_dir, labels_dir, cfg))
    rep.to_json(out / "dep.json")
    rep.to_csv(out / "dep.csv")
    return rep


# ---------------------------------------------------------------------------
# end to end
# ---------------------------------------------------------------------------

def run_desk_scale(workdir, cfg: RunConfig | None = None, modes=("A", "B", "C", "D", "E", "RX"),
                   data=None) -> dict:
    """Synthesize (unless ``data`` is given), train, distill, detect every mode and evaluate.

    Returns per-mode summaries plus stage timings.  With ``data`` pointing at an
    existing dataset directory the same stages run on it unchanged.
    """
    cfg = cfg or RunConfig()
    work = Path(workdir)
    timings = {}
    t0 = time.perf_counter()
    if data is None:
        data = synth_dataset(cfg, work / "data")
    data = Path(data)
    timings["synth"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    teacher = run_train_teacher(cfg, data, work / "teacher")
    timings["teacher"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    student = run_distill(cfg, data, teacher, work / "student")
    timings["student"] = time.perf_counter() - t0
    cubes = sorted((data / "test").glob("*.raw"))
    summaries = {}
    t0 = time.perf_counter()
    for mode in modes:
        run_detect(cfg, cubes, work / "scores" / mode, mode, student)
        summaries[mode] = run_eval(cfg, work / "scores" / mode, data / "labels",
                                   work / "eval" / mode).summary()
    timings["detect_eval"] = time.perf_counter() - t0
    result = {**_stamp(cfg), "modes": summaries, "seconds": timings}
    (work / "summary.json").write_text(json.dumps(result, indent=2, sort_keys=True))
    return result

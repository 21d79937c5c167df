"""ROC-based evaluation (detection accuracy, false-alarm area, background
suppressibility) and the dependency score between two detectors."""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "EvaluationError",
    "RocCurve",
    "ImageEval",
    "EvalReport",
    "DepReport",
    "normalize_scores",
    "confusion_at",
    "roc_curve",
    "auc_df",
    "auc_ftau",
    "auc_bs",
    "evaluate_image",
    "evaluate_set",
    "topk_counts",
    "dep_score",
    "jackknife_weights",
    "mdep",
    "dependency_report",
]

logger = logging.getLogger(__name__)

DEFAULT_POINTS = 30000
FAIL_DF = 0.9
FAIL_BS = 0.8
STRONG_DEP = 0.9
DEP_BETA = 1e-12


class EvaluationError(ValueError):
    """Inputs cannot be evaluated (no positives, mismatched shapes, ...)."""


def normalize_scores(S) -> np.ndarray:
    """Min-max to [0, 1]; a constant map becomes all zeros."""
    S = np.asarray(getattr(S, "values", S), dtype=np.float64)
    lo, hi = float(S.min()), float(S.max())
    if not hi > lo:
        return np.zeros_like(S)
    return (S - lo) / (hi - lo)


def _check(S: np.ndarray, labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    if S.shape != labels.shape:
        raise EvaluationError(f"score map {S.shape} and labels {labels.shape} differ in shape")
    if not np.all(np.isin(labels, (0, 1))):
        raise EvaluationError("labels must be binary")
    pos = labels.astype(bool)
    if not pos.any():
        raise EvaluationError("label map has no positives; detection probability undefined")
    if pos.all():
        raise EvaluationError("label map has no negatives; false-alarm probability undefined")
    return pos


def confusion_at(S, labels, tau: float) -> tuple[int, int, int, int]:
    """(TP, FP, TN, FN) when pixels with normalized score > ``tau`` are positive."""
    S = np.asarray(getattr(S, "values", S), dtype=np.float64)
    pos = _check(S, labels)
    pred = S > tau
    tp = int(np.sum(pred & pos))
    fp = int(np.sum(pred & ~pos))
    return tp, fp, int(np.sum(~pos)) - fp, int(np.sum(pos)) - tp


@dataclass
class RocCurve:
    pd: np.ndarray
    pf: np.ndarray
    tau: np.ndarray  # descending; the final (1, 1) endpoint sits at tau = 0 with zero width

    def to_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        np.savetxt(path, np.column_stack([self.tau, self.pd, self.pf]), delimiter=",",
                   header="tau,pd,pf", comments="", fmt="%.10g")
        return path


def roc_curve(S, labels, p: int = DEFAULT_POINTS) -> RocCurve:
    """Sample (P_d, P_f, tau) at ``p`` equally spaced thresholds from 1 down to 0."""
    if p < 2:
        raise ValueError("need at least two thresholds")
    S = normalize_scores(S)
    pos = _check(S, labels)
    sp = np.sort(S[pos])
    sn = np.sort(S[~pos])
    tau = np.linspace(1.0, 0.0, p)
    pd = (sp.size - np.searchsorted(sp, tau, side="right")) / sp.size
    pf = (sn.size - np.searchsorted(sn, tau, side="right")) / sn.size
    return RocCurve(np.concatenate([[0.0], pd, [1.0]]),
                    np.concatenate([[0.0], pf, [1.0]]),
                    np.concatenate([[1.0], tau, [0.0]]))


def auc_df(roc: RocCurve) -> float:
    """Trapezoidal area under P_d versus P_f."""
    return float(0.5 * np.sum((roc.pd[1:] + roc.pd[:-1]) * np.diff(roc.pf)))


def auc_ftau(roc: RocCurve) -> float:
    """Trapezoidal area under P_f versus tau over [0, 1]."""
    return float(0.5 * np.sum((roc.pf[1:] + roc.pf[:-1]) * -np.diff(roc.tau)))


def auc_bs(report_or_roc) -> float:
    if isinstance(report_or_roc, RocCurve):
        return auc_df(report_or_roc) - auc_ftau(report_or_roc)
    return report_or_roc.auc_df - report_or_roc.auc_ftau


@dataclass
class ImageEval:
    name: str
    auc_df: float
    auc_ftau: float
    auc_bs: float

    @property
    def failed(self) -> bool:
        return self.auc_df < FAIL_DF or self.auc_bs < FAIL_BS


def evaluate_image(S, labels, name: str = "", p: int = DEFAULT_POINTS,
                   roc_csv=None) -> ImageEval:
    roc = roc_curve(S, labels, p)
    if roc_csv is not None:
        roc.to_csv(roc_csv)
    df, ft = auc_df(roc), auc_ftau(roc)
    return ImageEval(name, df, ft, df - ft)


@dataclass
class EvalReport:
    images: list[ImageEval]
    excluded: list[str] = field(default_factory=list)
    points: int = DEFAULT_POINTS

    def _col(self, attr) -> np.ndarray:
        return np.array([getattr(e, attr) for e in self.images])

    @property
    def mean_auc_df(self) -> float:
        return float(self._col("auc_df").mean())

    @property
    def mean_auc_ftau(self) -> float:
        return float(self._col("auc_ftau").mean())

    @property
    def mean_auc_bs(self) -> float:
        return float(self._col("auc_bs").mean())

    @property
    def failures(self) -> int:
        return sum(e.failed for e in self.images)

    def summary(self) -> dict:
        return {
            "n_images": len(self.images),
            "mean_auc_df": self.mean_auc_df,
            "mean_auc_ftau": self.mean_auc_ftau,
            "mean_auc_bs": self.mean_auc_bs,
            "failures": self.failures,
            "failures_df": int(np.sum(self._col("auc_df") < FAIL_DF)),
            "failures_bs": int(np.sum(self._col("auc_bs") < FAIL_BS)),
            "min_auc_df": float(self._col("auc_df").min()),
        }

    def to_json(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        doc = {"summary": self.summary(), "points": self.points, "excluded": self.excluded,
               "images": [asdict(e) | {"failed": e.failed} for e in self.images]}
        path.write_text(json.dumps(doc, indent=2))
        return path

    def to_csv(self, path) -> Path:
        """Per-image rows (index, name, AUC_(D,F), AUC_(F,tau), AUC_BS) and an average row."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index", "name", "auc_df", "auc_ftau", "auc_bs", "failed"])
            for i, e in enumerate(self.images, 1):
                w.writerow([i, e.name, f"{e.auc_df:.6f}", f"{e.auc_ftau:.6f}", f"{e.auc_bs:.6f}",
                            int(e.failed)])
            w.writerow(["avg", "", f"{self.mean_auc_df:.6f}", f"{self.mean_auc_ftau:.6f}",
                        f"{self.mean_auc_bs:.6f}", self.failures])
        return path


def _evaluate_or_error(S, labels, name, p, roc_csv):
    try:
        return evaluate_image(S, labels, name, p, roc_csv)
    except EvaluationError as exc:
        return exc


def evaluate_set(scores: dict[str, np.ndarray], labels: dict[str, np.ndarray],
                 p: int = DEFAULT_POINTS, roc_dir=None, jobs: int = 1) -> EvalReport:
    """Evaluate matching score/label maps; images without positives are excluded.

    ``jobs > 1`` evaluates images in worker processes; results do not depend on it.
    """
    if set(scores) != set(labels):
        missing = sorted(set(scores) ^ set(labels))
        raise EvaluationError(f"unmatched image sets: {missing}")
    names = sorted(scores)
    args = [(scores[n], labels[n], n, p, None if roc_dir is None else Path(roc_dir) / f"{n}_roc.csv")
            for n in names]
    if jobs > 1 and len(args) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_evaluate_or_error, *zip(*args)))
    else:
        results = [_evaluate_or_error(*a) for a in args]
    images, excluded = [], []
    for name, res in zip(names, results):
        if isinstance(res, EvaluationError):
            logger.warning("excluding %s: %s", name, res)
            excluded.append(name)
        else:
            images.append(res)
    if not images:
        raise EvaluationError("no evaluable images")
    return EvalReport(images, excluded, p)


def topk_counts(reports: dict[str, EvalReport], metric: str = "auc_df", ks=(1, 2, 3)) -> dict:
    """How often each method ranks within the top k per image (ties share a rank)."""
    methods = list(reports)
    by_name = [{e.name: getattr(e, metric) for e in reports[m].images} for m in methods]
    names = sorted(set.intersection(*(set(d) for d in by_name)))
    counts = {m: {f"top{k}": 0 for k in ks} for m in methods}
    for name in names:
        vals = np.array([d[name] for d in by_name])
        for m, v in zip(methods, vals):
            rank = 1 + int(np.sum(vals > v))
            for k in ks:
                counts[m][f"top{k}"] += rank <= k
    for m in methods:
        counts[m]["failures"] = reports[m].failures
    return counts


# ---------------------------------------------------------------------------
# dependency
# ---------------------------------------------------------------------------

def dep_score(a: float, b: float, beta: float = DEP_BETA) -> float:
    """exp(-(a - b)^2 / ((1 - a)(1 - b))) with the exponent clamped to [0, 700].

    ``beta`` is a floor on each of the two factors, so a perfect AUC never
    divides by zero while ordinary values are evaluated without any offset.
    """
    if not (math.isfinite(a) and math.isfinite(b)):
        raise ValueError("AUC values must be finite")
    expo = (a - b) ** 2 / (max(1.0 - a, beta) * max(1.0 - b, beta))
    return math.exp(-min(max(expo, 0.0), 700.0))


def jackknife_weights(phi, psi) -> np.ndarray:
    """Covariance of the two sequences with each image left out in turn."""
    phi = np.asarray(phi, dtype=np.float64)
    psi = np.asarray(psi, dtype=np.float64)
    if phi.shape != psi.shape or phi.ndim != 1:
        raise ValueError("performance sequences must be 1-D and equally long")
    if phi.size < 3:
        raise ValueError("need at least 3 images for leave-one-out covariance")
    keep = ~np.eye(phi.size, dtype=bool)
    return np.array([np.cov(phi[k], psi[k], ddof=1)[0, 1] for k in keep])


def mdep(dep_scores, seq_phi, seq_psi) -> float:
    value, _ = _mdep(dep_scores, seq_phi, seq_psi)
    return value


def _mdep(dep_scores, seq_phi, seq_psi) -> tuple[float, bool]:
    dep = np.asarray(dep_scores, dtype=np.float64)
    R = jackknife_weights(seq_phi, seq_psi)
    if dep.shape != R.shape:
        raise ValueError("one dependency score per image is required")
    total = R.sum()
    if total <= 1e-15:
        return float(dep.mean()), True
    return float((R * dep).sum() / total), False


@dataclass
class DepReport:
    names: list[str]
    dep_df: list[float]
    dep_bs: list[float]
    mdep_df: float
    mdep_bs: float
    strong_df: float
    strong_bs: float
    fallback_df: bool = False
    fallback_bs: bool = False

    def to_json(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(asdict(self), indent=2))
        return path

    def to_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["name", "dep_df", "dep_bs"])
            for row in zip(self.names, self.dep_df, self.dep_bs):
                w.writerow([row[0], f"{row[1]:.6g}", f"{row[2]:.6g}"])
            w.writerow(["mDep", f"{self.mdep_df:.6g}", f"{self.mdep_bs:.6g}"])
        return path


def dependency_report(phi: EvalReport, psi: EvalReport, beta: float = DEP_BETA) -> DepReport:
    """Per-image dependency of detector ``phi`` on ``psi`` and the weighted means."""
    a = {e.name: e for e in phi.images}
    b = {e.name: e for e in psi.images}
    if set(a) != set(b):
        raise EvaluationError(f"unmatched image sets: {sorted(set(a) ^ set(b))}")
    names = sorted(a)
    df_phi = [a[n].auc_df for n in names]
    df_psi = [b[n].auc_df for n in names]
    bs_phi = [a[n].auc_bs for n in names]
    bs_psi = [b[n].auc_bs for n in names]
    dep_df = [dep_score(x, y, beta) for x, y in zip(df_phi, df_psi)]
    dep_bs = [dep_score(x, y, beta) for x, y in zip(bs_phi, bs_psi)]
    m_df, fb_df = _mdep(dep_df, df_phi, df_psi)
    m_bs, fb_bs = _mdep(dep_bs, bs_phi, bs_psi)
    if fb_df or fb_bs:
        logger.warning("jackknife weights sum to <= 1e-15; unweighted mean used")
    return DepReport(names, dep_df, dep_bs, m_df, m_bs,
                     float(np.mean(np.array(dep_df) > STRONG_DEP)),
                     float(np.mean(np.array(dep_bs) > STRONG_DEP)), fb_df, fb_bs)

"""Shared numerical oracles for the test-suite."""

import math

import numpy as np

from stad.tensor import GradTape, Tensor


def numeric_grad(f, x, h=1e-5):
    """Central finite differences of the scalar function ``f`` at array ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        fp = f(x)
        x[idx] = old - h
        fm = f(x)
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    """Max abs difference scaled by the larger of the two max magnitudes."""
    a, b = np.asarray(a), np.asarray(b)
    scale = max(np.abs(a).max(), np.abs(b).max(), 1e-12)
    return float(np.abs(a - b).max() / scale)


def tape_grads(fn, *arrays):
    """Gradients of the scalar Tensor ``fn(*tensors)`` with respect to each input."""
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    with GradTape() as tape:
        out = fn(*leaves)
    tape.backward(out)
    return [t.grad for t in leaves]


def check_fd(fn, *arrays, h=1e-5):
    """Worst relative error between tape and finite-difference gradients over all inputs."""
    grads = tape_grads(fn, *arrays)
    worst = 0.0
    for i, a in enumerate(arrays):
        def f(v, i=i):
            args = [Tensor(b) for b in arrays]
            args[i] = Tensor(v)
            return fn(*args).item()
        worst = max(worst, rel_err(grads[i], numeric_grad(f, a, h)))
    return worst


def mann_whitney_auc(scores, labels):
    """Probability a positive outscores a negative, ties counted half (pairwise count)."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    pos, neg = s[y], s[~y]
    gt = (pos[:, None] > neg[None, :]).sum()
    eq = (pos[:, None] == neg[None, :]).sum()
    return (gt + 0.5 * eq) / (pos.size * neg.size)


def random_instance(rng, shape=(16, 16)):
    """Score map and label map with a shifted positive class and at least one of each label."""
    labels = (rng.uniform(size=shape) < rng.uniform(0.02, 0.3)).astype(np.uint8)
    labels.flat[0], labels.flat[-1] = 1, 0
    scores = rng.normal(size=shape) + rng.uniform(0.0, 2.5) * labels
    return scores, labels


# four images: AUC_(D,F) of two detectors, their Dep values, the leave-one-out
# covariances and the weighted mean, computed once in plain Python and frozen
MDEP_PHI = [0.99, 0.95, 0.90, 0.97]
MDEP_PSI = [0.96, 0.93, 0.80, 0.985]
MDEP_DEP = [0.10539922456186433, 0.8920030614530954, 0.6065306597126334, 0.6065306597126334]
MDEP_R = [0.0034249999999999966, 0.0044749999999999955, 0.00029999999999999943, 0.0036833333333333293]
MDEP_VALUE = 0.569597742382803


def oracle_mahalanobis(data, ridge=None):
    """Explicit loops for mean and covariance, dense inverse, per-pixel quadratic form."""
    m, n, b = data.shape
    X = data.reshape(-1, b)
    L = X.shape[0]
    mu = np.array([sum(X[i, k] for i in range(L)) / L for k in range(b)])
    C = np.zeros((b, b))
    for i in range(L):
        d = X[i] - mu
        for p in range(b):
            for q in range(b):
                C[p, q] += d[p] * d[q]
    C /= L - 1
    if ridge is None:
        C = C + np.diag(1e-6 * np.diag(C))
    else:
        C = C + ridge * np.eye(b)
    Ci = np.linalg.inv(C)
    return np.array([(X[i] - mu) @ Ci @ (X[i] - mu) for i in range(L)]).reshape(m, n)


def oracle_bilateral(z, r, sigma_s, sigma_c):
    """Direct double summation over the clipped Euclidean disc, on the 0..255 scale."""
    lo, hi = z.min(), z.max()
    if hi == lo:
        return z.copy()
    u = (z - lo) / (hi - lo) * 255
    m, n = z.shape
    out = np.zeros_like(u)
    for i in range(m):
        for j in range(n):
            num = den = 0.0
            for k in range(m):
                for l in range(n):
                    d2 = (i - k) ** 2 + (j - l) ** 2
                    if d2 > r * r:
                        continue
                    w = math.exp(-d2 / (2 * sigma_s ** 2) - (u[i, j] - u[k, l]) ** 2 / (2 * sigma_c ** 2))
                    num += w * u[k, l]
                    den += w
            out[i, j] = num / den
    return out / 255 * (hi - lo) + lo

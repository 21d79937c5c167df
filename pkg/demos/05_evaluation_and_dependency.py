"""
ROC areas and detector dependency
=================================

Each score map is min-max normalized, thresholded at many evenly spaced
levels, and summarized by three areas: detection vs false alarm, false alarm
vs threshold, and their difference (background suppressibility).  Two
detectors can then be compared image by image with the dependency score.
"""

import numpy as np

from stad.evaluation import dependency_report, evaluate_set, roc_curve

rng = np.random.default_rng(1)
labels, strong, weak = {}, {}, {}
for i in range(5):
    y = (rng.uniform(size=(20, 20)) < 0.05).astype(np.uint8)
    y[0, 0] = 1
    labels[f"img{i}"] = y
    strong[f"img{i}"] = rng.normal(size=y.shape) + 3.0 * y
    weak[f"img{i}"] = rng.normal(size=y.shape) + 1.0 * y

rep_strong = evaluate_set(strong, labels)
rep_weak = evaluate_set(weak, labels)
print("strong detector:", rep_strong.summary())
print("weak detector:  ", rep_weak.summary())

# One ROC in detail
roc = roc_curve(strong["img0"], labels["img0"], p=11)
for tau, pd, pf in zip(roc.tau, roc.pd, roc.pf):
    print(f"tau {tau:4.2f}  P_d {pd:5.3f}  P_f {pf:5.3f}")

dep = dependency_report(rep_strong, rep_weak)
print("per-image Dep_DF:", np.round(dep.dep_df, 4))
print("weighted mean:", round(dep.mdep_df, 4), " strong-dependence fraction:", dep.strong_df)
print("self-dependency:", dependency_report(rep_strong, rep_strong).mdep_df)

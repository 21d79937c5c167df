"""
Training a teacher and distilling a student
===========================================

A per-pixel Transformer teacher learns to reconstruct anomaly-free spectra
from random 9 x 9 patches.  Its moving-average weights then supervise a small
convolutional student.  Sizes are cut down here so the script runs in seconds;
the defaults in ``TrainConfig`` are the full-size settings.
"""

import numpy as np

from stad.hsi_io import normalize, synth_scene
from stad.training import TrainConfig, train_student, train_teacher

# Anomaly-free training cubes, each min-max normalized to [0, 1]
trainset = [normalize(synth_scene(100 + i, M=16, N=16, B=10, n_targets=0)[0])[0] for i in range(8)]

cfg = TrainConfig(lr=1e-3, teacher_epochs=20, student_epochs=20, batch_size=4,
                  teacher_hidden=32, student_hidden=16)

teacher, tlog = train_teacher(cfg, trainset)
print("teacher loss by epoch:", np.round(tlog.loss[::4], 2))

student, slog = train_student(cfg, trainset, teacher)
print("distillation loss by epoch:", np.round(slog.loss[::4], 2))

print("teacher parameters:", teacher.n_parameters(), " student parameters:", student.n_parameters())

# The logs keep the cube order of every epoch, so a run can be audited later
print("epoch 0 cube order:", tlog.shuffles[0])

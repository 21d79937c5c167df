import json
import math
from pathlib import Path

import numpy as np
import pytest

from stad.hsi_io import normalize, synth_scene
from stad.networks import StudentSpec, init_params, load_checkpoint, student_forward, teacher_forward
from stad.pipeline import load_split
from stad.stf import NumericalError
from stad.tensor import DimensionError, GradTape, Tensor
from stad.training import (
    AdamState,
    TrainConfig,
    adam_step,
    distill_loss,
    ema_update,
    sample_patches,
    teacher_loss,
    train_student,
    train_teacher,
)

TINY = dict(teacher_hidden=8, teacher_heads=2, teacher_blocks=2, student_hidden=4,
            batch_size=3, patch=5, lr=1e-3)


@pytest.fixture(scope="module")
def trainset():
    return [normalize(synth_scene(100 + i, M=8, N=8, B=4, n_targets=0)[0])[0] for i in range(5)]


def _single(shape, value):
    p = init_params(0, StudentSpec(bands=1, hidden=1))
    p.tensors = {"w": Tensor(np.full(shape, value), requires_grad=True, name="w")}
    return p


class TestLosses:
    def test_perfect_reconstruction(self):
        D = np.random.default_rng(0).normal(size=(4, 3))
        assert teacher_loss([Tensor(D)] * 3, D).item() == 0.0

    def test_closed_form(self):
        D = np.random.default_rng(1).normal(size=(4, 3))
        loss = teacher_loss([Tensor(D + 1), Tensor(D), Tensor(D)], D).item()
        assert loss == pytest.approx(math.sqrt(12), rel=1e-15)

    def test_direct_summation_oracle(self):
        rng = np.random.default_rng(2)
        D = rng.normal(size=(5, 3))
        outs = [rng.normal(size=(5, 3)) for _ in range(3)]
        want = sum(math.sqrt(sum((o[i, j] - D[i, j]) ** 2 for i in range(5) for j in range(3))) for o in outs)
        assert abs(teacher_loss([Tensor(o) for o in outs], D).item() - want) < 1e-12

    def test_batched_sums_per_item_norms(self):
        rng = np.random.default_rng(3)
        D = rng.normal(size=(2, 5, 3))
        outs = [rng.normal(size=(2, 5, 3)) for _ in range(3)]
        want = sum(np.linalg.norm(o[i] - D[i]) for o in outs for i in range(2))
        assert abs(teacher_loss([Tensor(o) for o in outs], D).item() - want) < 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            teacher_loss([Tensor(np.ones((4, 3)))] * 3, np.ones((3, 4)))

    def test_distill_identical_is_zero(self):
        rng = np.random.default_rng(4)
        s = [rng.normal(size=(3, 2, 4)) for _ in range(3)]  # B x M x N rasters
        t = [x.transpose(1, 2, 0).reshape(8, 3) for x in s]
        assert distill_loss([Tensor(x) for x in s], t).item() == 0.0

    def test_distill_oracle(self):
        rng = np.random.default_rng(5)
        s = [rng.normal(size=(3, 2, 4)) for _ in range(3)]
        t = [rng.normal(size=(8, 3)) for _ in range(3)]
        want = 0.0
        for sk, tk in zip(s, t):
            acc = 0.0
            for i in range(2):
                for j in range(4):
                    for b in range(3):
                        acc += (sk[b, i, j] - tk[i * 4 + j, b]) ** 2
            want += math.sqrt(acc)
        assert abs(distill_loss([Tensor(x) for x in s], t).item() - want) < 1e-12

    def test_distill_stops_teacher_gradient(self):
        rng = np.random.default_rng(6)
        s = [Tensor(rng.normal(size=(2, 3, 3)), requires_grad=True) for _ in range(3)]
        t = [Tensor(rng.normal(size=(9, 2)), requires_grad=True) for _ in range(3)]
        with GradTape() as tape:
            loss = distill_loss(s, t)
        tape.backward(loss)
        assert all(x.grad is not None for x in s)
        assert all(x.grad is None for x in t)


class TestAdam:
    def test_zero_gradient_leaves_parameters(self):
        p = _single((3,), 1.5)
        p["w"].grad = np.zeros(3)
        state = AdamState.zeros_like(p)
        adam_step(p, state)
        np.testing.assert_array_equal(p["w"].values, np.full(3, 1.5))

    def test_reference_recurrence(self):
        cfg = TrainConfig(lr=0.01)
        p = _single((1,), 0.3)
        state = AdamState.zeros_like(p)
        grads = [0.5, -1.25, 2.0]
        theta, m, v = 0.3, 0.0, 0.0
        for t, g in enumerate(grads, 1):
            p["w"].grad = np.array([g])
            adam_step(p, state, cfg)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            theta -= 0.01 * (m / (1 - 0.9 ** t)) / (math.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
            assert abs(p["w"].values[0] - theta) < 1e-12

    def test_constant_gradient_limit(self):
        cfg = TrainConfig(lr=1e-3)
        p = _single((2,), 0.0)
        state = AdamState.zeros_like(p)
        for _ in range(2000):
            before = p["w"].values.copy()
            p["w"].grad = np.array([3.0, -0.2])
            adam_step(p, state, cfg)
        step = p["w"].values - before
        np.testing.assert_allclose(step, [-1e-3, 1e-3], rtol=1e-6)

    def test_non_finite_gradient_aborts(self):
        p = _single((2,), 0.0)
        p["w"].grad = np.array([np.nan, 1.0])
        with pytest.raises(NumericalError, match="non-finite"):
            adam_step(p, AdamState.zeros_like(p))


class TestEma:
    def test_fixed_point(self):
        p = _single((3,), 2.0)
        shadow = {"w": np.full(3, 2.0)}
        ema_update(shadow, p, 0.9)
        np.testing.assert_array_equal(shadow["w"], np.full(3, 2.0))

    def test_one_step(self):
        p = _single((1,), 1.0)
        shadow = {"w": np.zeros(1)}
        ema_update(shadow, p, 0.9)
        assert shadow["w"][0] == pytest.approx(0.1, abs=1e-16)

    def test_constant_params_closed_form(self):
        p = _single((1,), 3.0)
        shadow = {"w": np.array([-1.0])}
        for _ in range(5):
            ema_update(shadow, p, 0.9)
        assert abs(shadow["w"][0] - (3.0 + 0.9 ** 5 * (-4.0))) < 1e-12

    def test_geometric_average_of_trajectory(self):
        rng = np.random.default_rng(0)
        traj = rng.normal(size=(12, 4))
        p = _single((4,), 0.0)
        s0 = rng.normal(size=4)
        shadow = {"w": s0.copy()}
        for row in traj:
            p["w"].values = row.copy()
            ema_update(shadow, p, 0.9)
        n = len(traj)
        want = 0.9 ** n * s0 + sum(0.1 * 0.9 ** (n - 1 - k) * traj[k] for k in range(n))
        assert np.abs(shadow["w"] - want).max() < 1e-10


class TestSampling:
    def test_patches_come_from_the_cube(self, trainset):
        rng = np.random.default_rng(0)
        batch = sample_patches(rng, trainset, [0, 2], 5)
        assert batch.shape == (2, 4, 5, 5)
        cube = trainset[2]
        hits = [(r, c) for r in range(4) for c in range(4)
                if np.array_equal(np.moveaxis(cube[r:r + 5, c:c + 5], -1, 0), batch[1])]
        assert hits

    def test_patch_larger_than_cube(self, trainset):
        with pytest.raises(DimensionError):
            sample_patches(np.random.default_rng(0), trainset, [0], 9)


class TestLoops:
    def test_batch_larger_than_set(self, trainset):
        with pytest.raises(ValueError, match="batch_size"):
            train_teacher(TrainConfig(**{**TINY, "batch_size": 6}), trainset, epochs=1)

    def test_teacher_is_deterministic_and_logs(self, trainset):
        cfg = TrainConfig(**TINY, teacher_epochs=3)
        a, log_a = train_teacher(cfg, trainset)
        b, log_b = train_teacher(cfg, trainset)
        assert log_a.loss == log_b.loss and len(log_a.loss) == 3
        assert all(np.isfinite(log_a.loss)) and all(np.isfinite(log_a.param_norm))
        for k in a.tensors:
            assert a[k].values.tobytes() == b[k].values.tobytes()
            assert a.ema[k].tobytes() == b.ema[k].tobytes()
        # every cube is visited exactly once per epoch
        assert all(sorted(order) == list(range(5)) for order in log_a.shuffles)

    def test_teacher_loss_decreases(self, trainset):
        cfg = TrainConfig(**TINY, teacher_epochs=30)
        _, log = train_teacher(cfg, trainset)
        assert np.mean(log.loss[-5:]) < log.loss[0]

    def test_resume_matches_uninterrupted(self, trainset, tmp_path):
        cfg = TrainConfig(**TINY, teacher_epochs=4)
        full, log_full = train_teacher(cfg, trainset)
        train_teacher(cfg, trainset, state_dir=tmp_path, checkpoint_every=2, epochs=2)
        resumed, log_res = train_teacher(cfg, trainset, state_dir=tmp_path, checkpoint_every=2, resume=True)
        assert log_res.loss == log_full.loss
        for k in full.tensors:
            assert full[k].values.tobytes() == resumed[k].values.tobytes()
            assert full.ema[k].tobytes() == resumed.ema[k].tobytes()
        _, manifest = load_checkpoint(tmp_path)
        assert manifest["epoch"] == 4

    def test_student_leaves_teacher_untouched(self, trainset):
        cfg = TrainConfig(**TINY, teacher_epochs=2, student_epochs=3)
        teacher, _ = train_teacher(cfg, trainset)
        before = {k: t.values.copy() for k, t in teacher.tensors.items()}
        student, log = train_student(cfg, trainset, teacher)
        assert student.kind == "student" and len(log.loss) == 3
        for k, t in teacher.tensors.items():
            assert t.values.tobytes() == before[k].tobytes()
            assert t.grad is None
        assert not set(student.tensors) & set(teacher.tensors)

    def test_student_band_mismatch(self, trainset):
        cfg = TrainConfig(**TINY, teacher_epochs=1)
        teacher, _ = train_teacher(cfg, trainset)
        other = [normalize(synth_scene(i, M=8, N=8, B=5, n_targets=0)[0])[0] for i in range(3)]
        with pytest.raises(DimensionError):
            train_student(cfg, other, teacher)

    def test_distillation_reduces_mismatch(self, trainset):
        cfg = TrainConfig(**TINY, teacher_epochs=2, student_epochs=40)
        teacher, _ = train_teacher(cfg, trainset)
        student, log = train_student(cfg, trainset, teacher)
        assert log.loss[-1] < 0.75 * log.loss[0]
        # averaged student imitates the averaged teacher on a held-out patch
        x = np.moveaxis(normalize(synth_scene(999, M=8, N=8, B=4, n_targets=0)[0])[0][:5, :5], -1, 0)[None]
        t_out = [o.values for o in teacher_forward(teacher.averaged(), np.moveaxis(x, 1, -1).reshape(1, 25, 4))]
        fresh = init_params(cfg.seed + 1, cfg.student_spec(4))
        before = distill_loss(student_forward(fresh.frozen(), x), t_out).item()
        after = distill_loss(student_forward(student.averaged(), x), t_out).item()
        assert after < before


class TestFullScale:
    """Training-run properties at the default sizes, on the desk-scale dataset."""

    def test_teacher_loss_decreases(self, desk_run):
        run = json.loads((Path(desk_run["dir"]) / "teacher" / "run.json").read_text())
        assert run["epochs"] == 50
        assert run["final_loss"] < run["initial_loss"]

    def test_distillation_reaches_a_tenth(self, desk_run):
        # default budget: 250 epochs against the 50-epoch teacher
        work = Path(desk_run["dir"])
        trainset = [normalize(c, "unit")[0] for c in load_split(work / "data", "train")]
        teacher, _ = load_checkpoint(work / "teacher" / "checkpoint")
        _, log = train_student(TrainConfig(), trainset, teacher)
        ratio = log.loss[-1] / log.loss[0]
        print(f"distillation loss {log.loss[0]:.2f} -> {log.loss[-1]:.2f}, ratio {ratio:.3f}")
        assert ratio < 0.1


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr=0)
    with pytest.raises(ValueError):
        TrainConfig(ema_decay=1.0)
    cfg = TrainConfig()
    assert (cfg.lr, cfg.teacher_epochs, cfg.student_epochs, cfg.batch_size, cfg.ema_decay) == (1e-4, 50, 250, 16, 0.9)

import json

import numpy as np
import pytest
from scipy import stats

from helpers import numeric_grad, rel_err
from stad.detector import (
    DetectorConfig,
    ScoreMap,
    ablation_detect,
    export_scoremap,
    input_gradient,
    reconstruction_error,
    saliency_map,
    stad_detect,
    write_detection_manifest,
)
from stad.hsi_io import HyperCube, normalize, read_pgm
from stad.networks import StudentSpec, TeacherSpec, init_params, student_forward, teacher_forward
from stad.stf import NumericalError, small_target_filter
from stad.tensor import DimensionError, Tensor


@pytest.fixture(scope="module")
def student():
    return init_params(7, StudentSpec(bands=3, hidden=6))


@pytest.fixture(scope="module")
def teacher():
    return init_params(8, TeacherSpec(bands=3, hidden=8, heads=2, blocks=3, ff_hidden=8))


@pytest.fixture
def cube():
    rng = np.random.default_rng(11)
    data = rng.uniform(size=(6, 5, 3))
    data[2, 3] += 2.0
    return HyperCube(data, name="toy")


def zeroed(net):
    p = net.frozen()
    p.tensors = {k: Tensor(np.zeros_like(t.values)) for k, t in p.tensors.items()}
    return p


def loss_value(net, x, mask):
    """Masked summed squared error of the three outputs, evaluated without the tape."""
    if net.kind == "student":
        outs = [np.moveaxis(o.values, 0, -1) for o in student_forward(net, np.moveaxis(x, -1, 0))]
    else:
        outs = [o.values.reshape(x.shape) for o in teacher_forward(net, x.reshape(-1, x.shape[-1]))]
    return float(sum((((x - o) ** 2).sum(axis=-1) * mask).sum() for o in outs))


class TestInputGradient:
    @pytest.mark.parametrize("which", ["student", "teacher"])
    def test_zero_network_closed_form(self, which, student, teacher):
        # with all weights zero every output is zero, so L = 3 * sum(mask * |x|^2)
        net = zeroed(student if which == "student" else teacher)
        rng = np.random.default_rng(0)
        x = rng.uniform(size=(4, 5, 3))
        mask = rng.uniform(size=(4, 5))
        G = input_gradient(net, x, mask)
        assert np.abs(G - 6.0 * mask[..., None] * x).max() < 1e-12

    @pytest.mark.parametrize("which", ["student", "teacher"])
    def test_finite_differences(self, which, student, teacher):
        net = (student if which == "student" else teacher).frozen()
        rng = np.random.default_rng(1)
        x = rng.uniform(size=(4, 4, 3))
        mask = rng.uniform(size=(4, 4))
        G = input_gradient(net, x, mask)
        assert rel_err(G, numeric_grad(lambda v: loss_value(net, v, mask), x)) < 1e-5

    def test_mask_linearity(self, student):
        x = np.random.default_rng(2).uniform(size=(5, 5, 3))
        mask = small_target_filter(HyperCube(x)).mask
        g1 = input_gradient(student, x, mask)
        g2 = input_gradient(student, x, 2 * mask)
        np.testing.assert_allclose(g2, 2 * g1, rtol=1e-12, atol=1e-300)

    def test_teacher_tiling_is_exact_for_tiles(self, teacher):
        x = np.random.default_rng(3).uniform(size=(6, 6, 3))
        tiled = input_gradient(teacher, x, tile=3)
        corner = input_gradient(teacher, np.ascontiguousarray(x[:3, 3:]), tile=32)
        assert np.abs(tiled[:3, 3:] - corner).max() < 1e-12

    def test_unknown_loss(self, student):
        with pytest.raises(ValueError):
            input_gradient(student, np.ones((3, 3, 3)), loss="l1")

    def test_repeatable_with_trainable_params(self, student):
        # detection twice on the same (trainable) parameter set must not trip stale-gradient checks
        x = np.random.default_rng(4).uniform(size=(4, 4, 3))
        np.testing.assert_array_equal(input_gradient(student, x), input_gradient(student, x))


class TestDetectors:
    def test_bypass_equals_saliency(self, student, cube):
        a = stad_detect(student, cube, bypass=True).values
        b = saliency_map(student, cube).values
        assert np.abs(a - b).max() < 1e-12

    def test_doubling_mask_preserves_ranking(self, student, cube):
        mask = small_target_filter(cube).mask
        s1 = stad_detect(student, cube, mask=mask).values
        s2 = stad_detect(student, cube, mask=2 * mask).values
        np.testing.assert_allclose(s2, 2 * s1, rtol=1e-12)
        assert np.array_equal(np.argsort(s1, axis=None, kind="stable"), np.argsort(s2, axis=None, kind="stable"))

    def test_zero_mask_pixels_score_zero(self, student, cube):
        # a pixel whose 3 x 3 neighbourhood is masked out gets no gradient at all
        mask = np.zeros(cube.data.shape[:2])
        mask[0, 0] = 1.0
        s = stad_detect(student, cube, mask=mask).values
        assert s[5, 4] == 0.0 and s[0, 0] > 0

    def test_mask_shape_checked(self, student, cube):
        with pytest.raises(DimensionError):
            stad_detect(student, cube, mask=np.ones((3, 3)))

    def test_band_mismatch(self, student):
        with pytest.raises(DimensionError):
            saliency_map(student, HyperCube(np.random.default_rng(0).uniform(size=(4, 4, 5))))

    def test_mode_c_needs_no_network(self, cube):
        s = ablation_detect("C", None, cube)
        np.testing.assert_array_equal(s.values, small_target_filter(cube).mask)

    def test_mode_d_is_product(self, student, cube):
        d = ablation_detect("D", student, cube).values
        want = reconstruction_error(student, cube) * small_target_filter(cube).mask
        np.testing.assert_array_equal(d, want)

    def test_mode_a_uses_last_output(self, student, cube):
        x, _ = normalize(cube, "unit")
        r3 = np.moveaxis(student_forward(student.frozen(), np.moveaxis(x, -1, 0))[2].values, 0, -1)
        np.testing.assert_allclose(ablation_detect("A", student, cube).values, ((x - r3) ** 2).sum(-1), atol=1e-14)

    @pytest.mark.parametrize("mode", ["A", "B", "D", "E"])
    def test_network_modes_need_a_network(self, mode, cube):
        with pytest.raises(ValueError):
            ablation_detect(mode, None, cube)

    def test_unknown_mode(self, cube):
        with pytest.raises(ValueError):
            ablation_detect("F", None, cube)
        with pytest.raises(ValueError):
            DetectorConfig(mode="Z")

    def test_scores_are_scale_invariant(self, student, cube):
        # inputs are min-max normalized per cube, so a global affine change is invisible
        scaled = HyperCube(cube.data * 40.0 + 3.0)
        np.testing.assert_allclose(stad_detect(student, scaled).values, stad_detect(student, cube).values,
                                   rtol=1e-9, atol=1e-12)

    def test_non_finite_score_map(self):
        with pytest.raises(NumericalError):
            ScoreMap(np.array([[0.0, np.inf]]), "x")


class TestExport:
    def test_pgm_preserves_ranking(self, tmp_path):
        v = np.random.default_rng(0).exponential(size=(20, 30))
        export_scoremap(ScoreMap(v, "stad"), tmp_path / "s", "both")
        img, maxval = read_pgm(tmp_path / "s.pgm")
        assert maxval == 65535
        assert img.flat[np.argmax(v)] == 65535 and img.flat[np.argmin(v)] == 0
        assert stats.spearmanr(img.ravel(), v.ravel()).statistic > 0.999
        csv = np.loadtxt(tmp_path / "s.csv", delimiter=",")
        np.testing.assert_allclose(csv, (v - v.min()) / (v.max() - v.min()), rtol=0, atol=1e-15)

    def test_constant_map_warns(self, tmp_path):
        with pytest.warns(RuntimeWarning, match="constant"):
            assert export_scoremap(np.full((3, 4), 2.0), tmp_path / "k", "pgm")
        img, _ = read_pgm(tmp_path / "k.pgm")
        assert not img.any()

    def test_bad_format(self, tmp_path):
        with pytest.raises(ValueError):
            export_scoremap(np.eye(3), tmp_path / "x", "tiff")

    def test_manifest(self, tmp_path, cube):
        m = write_detection_manifest(tmp_path / "m.json", cube, "E", "abc", 0.5)
        on_disk = json.loads((tmp_path / "m.json").read_text())
        assert on_disk == m
        assert m["throughput_mpixels_per_s"] == pytest.approx(30 / 1e6 / 0.5)
        assert m["kind"] == "stad" and m["config_hash"] == "abc"
        assert write_detection_manifest(tmp_path / "r.json", cube, "RX", "abc", 0.1)["kind"] == "rx"

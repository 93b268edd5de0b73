import math
import warnings

import numpy as np
import pytest

from guv import grad as g
from guv.core import RenderConfig
from guv.errors import InvalidArgumentError
from guv.losses import (
    LossWeights,
    code_loss,
    coverage_loss,
    depth_loss,
    l1_loss,
    mesh_loss,
    scene_arrays,
    silhouette_loss,
    total_loss,
    tv_loss,
    volume_loss,
)
from guv.render import avatar_arrays

from conftest import make_avatar


class TestLossWeights:
    def test_defaults(self):
        w = LossWeights()
        assert w.depth == 0.1
        assert w.identity == 0.0
        assert w.coverage == 0.001
        assert w.silhouette == 1.0
        assert w.volume == 1.0
        assert w.tv == 0.1
        assert w.mesh == 0.01
        assert w.code == 1e-4

    def test_negative_weight_rejected(self):
        with pytest.raises(InvalidArgumentError, match="mesh"):
            LossWeights(mesh=-0.01)


class TestL1Loss:
    def test_identical_is_zero(self, rng):
        img = rng.uniform(size=(4, 4, 3))
        assert g.value(l1_loss(img, img.copy())) == 0.0

    def test_unit_offset(self):
        a = np.zeros((3, 3, 3))
        b = np.ones((3, 3, 3))
        assert g.value(l1_loss(a, b)) == pytest.approx(1.0)

    def test_half_pixels_off_by_half(self):
        a = np.zeros((2, 2, 3))
        b = np.zeros((2, 2, 3))
        b[0, :, :] = 0.5
        assert g.value(l1_loss(a, b)) == pytest.approx(0.25)

    def test_shape_mismatch(self):
        with pytest.raises(InvalidArgumentError, match="shape"):
            l1_loss(np.zeros((2, 2, 3)), np.zeros((2, 3, 3)))

    def test_pixel_weight_concentrates(self, rng):
        img = rng.uniform(size=(3, 3, 3))
        tgt = rng.uniform(size=(3, 3, 3))
        w = np.zeros((3, 3))
        w[1, 2] = 7.0
        got = g.value(l1_loss(img, tgt, pixel_weight=w))
        want = np.mean(np.abs(img[1, 2] - tgt[1, 2]))
        assert got == pytest.approx(want, rel=1e-12)

    def test_pixel_weight_scale_invariant(self, rng):
        img = rng.uniform(size=(3, 3, 3))
        tgt = rng.uniform(size=(3, 3, 3))
        w = rng.uniform(0.1, 1.0, size=(3, 3))
        a = g.value(l1_loss(img, tgt, pixel_weight=w))
        b = g.value(l1_loss(img, tgt, pixel_weight=10.0 * w))
        assert a == pytest.approx(b, rel=1e-12)

    def test_pixel_weight_validation(self, rng):
        img = rng.uniform(size=(3, 3, 3))
        with pytest.raises(InvalidArgumentError, match="pixel_weight"):
            l1_loss(img, img, pixel_weight=np.zeros((2, 2)))
        with pytest.raises(InvalidArgumentError, match="nonnegative"):
            l1_loss(img, img, pixel_weight=-np.ones((3, 3)))
        with pytest.raises(InvalidArgumentError, match="nonnegative"):
            l1_loss(img, img, pixel_weight=np.zeros((3, 3)))


class TestDepthLoss:
    def test_identical_is_zero(self, rng):
        d = rng.uniform(1.0, 2.0, size=(4, 4))
        mask = np.ones((4, 4))
        assert g.value(depth_loss(d, d.copy(), mask)) == 0.0

    def test_constant_offset_squares(self, rng):
        tgt = rng.uniform(1.0, 2.0, size=(4, 4))
        mask = np.ones((4, 4))
        got = g.value(depth_loss(tgt + 0.3, tgt, mask))
        assert got == pytest.approx(0.09, rel=1e-12)

    def test_out_of_mask_ignored(self, rng):
        tgt = rng.uniform(1.0, 2.0, size=(4, 4))
        d = tgt.copy()
        mask = np.ones((4, 4))
        mask[0, 0] = 0.0
        d[0, 0] = 1e6  # junk outside the mask must not leak in
        assert g.value(depth_loss(d, tgt, mask)) == 0.0

    def test_empty_mask_warns_and_is_zero(self, rng):
        d = rng.uniform(size=(3, 3))
        with pytest.warns(RuntimeWarning, match="alpha"):
            out = depth_loss(d, d, np.zeros((3, 3)))
        assert out == 0.0


class TestSilhouetteLoss:
    def test_matching_is_zero(self, rng):
        a = rng.uniform(size=(4, 4))
        assert g.value(silhouette_loss(a, a.copy())) == 0.0

    def test_full_mismatch(self):
        a = np.ones((3, 3))
        m = np.zeros((3, 3))
        assert g.value(silhouette_loss(a, m, weight=1.0)) == pytest.approx(1.0)

    def test_zero_weight_disables(self, rng):
        a = rng.uniform(size=(3, 3))
        m = rng.uniform(size=(3, 3))
        assert g.value(silhouette_loss(a, m, weight=0.0)) == 0.0


def _influence_scene(g_values):
    """Gaussians with unit radii placed so their influences at the origin
    are exactly g_values (d = sqrt(-2 ln(g / eta)) with eta=5, tau=1)."""
    dists = np.sqrt(-2.0 * np.log(np.asarray(g_values) / 5.0))
    centers = np.zeros((len(dists), 3))
    centers[:, 0] = dists
    return {
        "centers": centers,
        "rotations": np.zeros((len(dists), 3)),
        "radii": np.ones((len(dists), 3)),
    }


class TestCoverageLoss:
    def test_quoted_arithmetic(self):
        arrays = _influence_scene([0.1, 0.2, 0.3])
        cfg = RenderConfig(knn_k=3)
        pts = np.zeros((1, 3))
        got = g.value(coverage_loss(arrays, pts, cfg, weight=0.001))
        assert got == pytest.approx(2e-4, rel=1e-10)

    def test_far_points_vanish(self):
        arrays = _influence_scene([0.1, 0.2, 0.3])
        cfg = RenderConfig(knn_k=3)
        pts = np.array([[500.0, 0.0, 0.0]])
        assert g.value(coverage_loss(arrays, pts, cfg)) < 1e-20

    def test_eta_scaling_doubles(self, rng):
        arrays = _influence_scene([0.1, 0.2, 0.3])
        pts = rng.normal(scale=0.5, size=(5, 3))
        lo = g.value(coverage_loss(arrays, pts, RenderConfig(knn_k=3, eta=5.0)))
        hi = g.value(coverage_loss(arrays, pts, RenderConfig(knn_k=3, eta=10.0)))
        assert hi == pytest.approx(2.0 * lo, rel=1e-12)

    def test_accepts_avatar(self, rng):
        avatar = make_avatar(rng, h=2, w=2)
        cfg = RenderConfig(knn_k=2)
        pts = rng.normal(scale=0.2, size=(6, 3))
        via_avatar = g.value(coverage_loss(avatar, pts, cfg))
        via_arrays = g.value(coverage_loss(avatar_arrays(avatar), pts, cfg))
        assert via_avatar == via_arrays


class TestVolumeLoss:
    def test_unit_radii_single_texel(self):
        r = np.ones((1, 1, 3))
        assert g.value(volume_loss(r, weight=1.0)) == pytest.approx(4.0 * math.pi / 3.0)

    def test_zero_radii(self):
        assert g.value(volume_loss(np.zeros((2, 2, 3)))) == 0.0

    def test_doubling_one_radius_doubles(self, rng):
        r = rng.uniform(0.05, 0.15, size=(2, 2, 3))
        base = g.value(volume_loss(r))
        r2 = r.copy()
        r2[..., 1] *= 2.0
        assert g.value(volume_loss(r2)) == pytest.approx(2.0 * base, rel=1e-12)


class TestTvLoss:
    def test_constant_grid_is_zero(self):
        c = np.full((3, 4, 3), 0.2)
        rot = np.full((3, 4, 3), 0.1)
        r = np.full((3, 4, 3), 0.05)
        assert g.value(tv_loss(c, rot, r)) == 0.0

    def test_two_texel_column(self):
        c = np.zeros((2, 1, 3))
        c[1, 0, 0] = 1.0
        rot = np.zeros((2, 1, 3))
        r = np.full((2, 1, 3), 0.1)
        assert g.value(tv_loss(c, rot, r, weight=0.1)) == pytest.approx(0.05)

    def test_identical_rows_have_no_vertical_terms(self, rng):
        row_c = rng.normal(size=(1, 5, 3))
        row_rot = rng.normal(size=(1, 5, 3))
        row_r = rng.uniform(0.05, 0.15, size=(1, 5, 3))
        c = np.repeat(row_c, 3, axis=0)
        rot = np.repeat(row_rot, 3, axis=0)
        r = np.repeat(row_r, 3, axis=0)
        pose = np.concatenate([c, rot, r], axis=-1)
        horiz = np.sum(np.abs(pose[:, 1:, :] - pose[:, :-1, :]))
        want = 0.1 * horiz / 15.0
        assert g.value(tv_loss(c, rot, r)) == pytest.approx(want, rel=1e-12)


class TestMeshLoss:
    def test_centers_at_anchors(self, rng):
        c = rng.normal(size=(2, 3, 3))
        assert g.value(mesh_loss(c, c.copy())) == 0.0

    def test_uniform_offset(self, rng):
        anchors = rng.normal(size=(2, 2, 3))
        c = anchors + np.array([0.1, 0.0, 0.0])
        assert g.value(mesh_loss(c, anchors, weight=0.01)) == pytest.approx(1e-4, rel=1e-12)

    def test_single_texel_contribution(self, rng):
        anchors = rng.normal(size=(2, 3, 3))
        c = anchors.copy()
        c[1, 2] += np.array([0.03, -0.04, 0.12])
        d2 = float(np.sum((c[1, 2] - anchors[1, 2]) ** 2))
        want = 0.01 * d2 / 6.0
        assert g.value(mesh_loss(c, anchors)) == pytest.approx(want, rel=1e-12)


class TestCodeLoss:
    def test_zero_code(self):
        assert g.value(code_loss(np.zeros(512))) == 0.0

    def test_unit_norm(self):
        z = np.zeros(512)
        z[17] = 1.0
        assert g.value(code_loss(z, weight=1e-4)) == pytest.approx(1e-4)

    def test_scaling_quadruples(self, rng):
        z = rng.normal(size=512)
        base = g.value(code_loss(z))
        assert g.value(code_loss(2.0 * z)) == pytest.approx(4.0 * base, rel=1e-12)

    def test_sigma(self, rng):
        z = rng.normal(size=8)
        wide = g.value(code_loss(z, sigma=2.0))
        assert wide == pytest.approx(g.value(code_loss(z)) / 4.0, rel=1e-12)


def _random_scene(rng, h=2, w=2):
    anchors = rng.normal(scale=0.1, size=(h, w, 3))
    return {
        "centers": anchors + rng.normal(scale=0.02, size=(h, w, 3)),
        "rotations": rng.uniform(-0.5, 0.5, size=(h, w, 3)),
        "radii": rng.uniform(0.05, 0.15, size=(h, w, 3)),
        "anchors": anchors,
    }


def _random_io(rng, h=3, w=3):
    outputs = {
        "color": rng.uniform(size=(h, w, 3)),
        "depth": rng.uniform(1.0, 2.0, size=(h, w)),
        "alpha": rng.uniform(size=(h, w)),
    }
    targets = {
        "color": rng.uniform(size=(h, w, 3)),
        "depth": rng.uniform(1.0, 2.0, size=(h, w)),
        "mask": (rng.uniform(size=(h, w)) > 0.3).astype(np.float64),
    }
    return outputs, targets


class TestTotalLoss:
    def test_perfect_reconstruction_is_zero(self, rng):
        color = rng.uniform(size=(3, 3, 3))
        depth = rng.uniform(1.0, 2.0, size=(3, 3))
        mask = np.ones((3, 3))
        outputs = {"color": color, "depth": depth, "alpha": mask}
        targets = {"color": color.copy(), "depth": depth.copy(), "mask": mask}
        anchors = rng.normal(size=(1, 1, 3))
        scene = {
            "centers": np.broadcast_to(anchors, (2, 2, 3)).copy(),
            "rotations": np.zeros((2, 2, 3)),
            "radii": np.zeros((2, 2, 3)),
            "anchors": np.broadcast_to(anchors, (2, 2, 3)).copy(),
        }
        total, breakdown = total_loss(outputs, targets, scene, z=np.zeros(16))
        assert g.value(total) == 0.0
        for term in breakdown.values():
            assert g.value(term) == 0.0

    def test_breakdown_sums_to_total(self, rng):
        outputs, targets = _random_io(rng)
        scene = _random_scene(rng)
        total, breakdown = total_loss(
            outputs, targets, scene, z=rng.normal(size=32),
            mean_influence=rng.uniform(0.1, 1.0),
        )
        want = sum(g.value(t) for t in breakdown.values())
        assert g.value(total) == pytest.approx(want, abs=1e-12)
        keys = set(breakdown)
        assert keys == {"l1", "depth", "silhouette", "coverage", "volume",
                        "tv", "mesh", "code"}

    def test_zero_weights_leave_l1(self, rng):
        outputs, targets = _random_io(rng)
        scene = _random_scene(rng)
        zero = LossWeights(depth=0.0, coverage=0.0, silhouette=0.0, volume=0.0,
                           tv=0.0, mesh=0.0, code=0.0)
        total, _ = total_loss(outputs, targets, scene, z=rng.normal(size=32),
                              weights=zero, mean_influence=0.4)
        assert g.value(total) == pytest.approx(
            g.value(l1_loss(outputs["color"], targets["color"])), abs=1e-15)

    def test_total_dominates_each_term(self, rng):
        outputs, targets = _random_io(rng)
        scene = _random_scene(rng)
        total, breakdown = total_loss(outputs, targets, scene,
                                      z=rng.normal(size=32), mean_influence=0.7)
        for name, term in breakdown.items():
            assert g.value(term) >= 0.0, name
            assert g.value(total) >= g.value(term) - 1e-15, name

    def test_lambda_linearity(self, rng):
        outputs, targets = _random_io(rng)
        scene = _random_scene(rng)
        base = LossWeights()
        scaled = LossWeights(depth=base.depth * 3, coverage=base.coverage * 3,
                             silhouette=base.silhouette * 3,
                             volume=base.volume * 3, tv=base.tv * 3,
                             mesh=base.mesh * 3, code=base.code * 3)
        z = rng.normal(size=32)
        _, b1 = total_loss(outputs, targets, scene, z=z, weights=base,
                           mean_influence=0.4)
        _, b3 = total_loss(outputs, targets, scene, z=z, weights=scaled,
                           mean_influence=0.4)
        for name in ("depth", "silhouette", "coverage", "volume", "tv",
                     "mesh", "code"):
            assert g.value(b3[name]) == pytest.approx(3.0 * g.value(b1[name]),
                                                      rel=1e-12), name

    def test_mean_influence_weighting(self, rng):
        outputs, targets = _random_io(rng)
        scene = _random_scene(rng)
        _, breakdown = total_loss(outputs, targets, scene, mean_influence=0.62)
        assert g.value(breakdown["coverage"]) == pytest.approx(0.001 * 0.62,
                                                               rel=1e-12)

    def test_coverage_points_path(self, rng):
        outputs, targets = _random_io(rng)
        scene = _random_scene(rng)
        cfg = RenderConfig(knn_k=2)
        pts = rng.normal(scale=0.2, size=(5, 3))
        _, breakdown = total_loss(outputs, targets, scene,
                                  coverage_points=pts, coverage_cfg=cfg)
        want = g.value(coverage_loss(scene_arrays(scene), pts, cfg, 0.001))
        assert g.value(breakdown["coverage"]) == want

    def test_depth_without_mask_rejected(self, rng):
        outputs, targets = _random_io(rng)
        targets = dict(targets)
        targets["mask"] = None
        scene = _random_scene(rng)
        with pytest.raises(InvalidArgumentError, match="mask"):
            total_loss(outputs, targets, scene)

    def test_coverage_points_without_cfg_rejected(self, rng):
        outputs, targets = _random_io(rng)
        scene = _random_scene(rng)
        with pytest.raises(InvalidArgumentError, match="coverage_cfg"):
            total_loss(outputs, targets, scene, coverage_points=np.zeros((2, 3)))

    def test_no_optional_terms(self, rng):
        outputs = {"color": rng.uniform(size=(3, 3, 3)),
                   "depth": rng.uniform(size=(3, 3)),
                   "alpha": rng.uniform(size=(3, 3))}
        targets = {"color": rng.uniform(size=(3, 3, 3))}
        scene = _random_scene(rng)
        total, breakdown = total_loss(outputs, targets, scene)
        assert set(breakdown) == {"l1", "volume", "tv", "mesh"}
        want = sum(g.value(t) for t in breakdown.values())
        assert g.value(total) == pytest.approx(want, abs=1e-15)


class TestSceneArrays:
    def test_reshapes_grids(self, rng):
        scene = _random_scene(rng, h=2, w=3)
        arrays = scene_arrays(scene)
        np.testing.assert_array_equal(arrays["centers"],
                                      scene["centers"].reshape(6, 3))
        np.testing.assert_array_equal(arrays["radii"],
                                      scene["radii"].reshape(6, 3))
        assert "payload_flat" not in arrays

    def test_passes_payload_through(self, rng):
        scene = _random_scene(rng)
        scene["payload_flat"] = rng.normal(size=(4 * 3 * 2 * 2, 8))
        arrays = scene_arrays(scene)
        assert arrays["payload_flat"] is scene["payload_flat"]


def _pset(groups):
    return g.ParamSet(groups, {k: 1.0 for k in groups})


class TestGradientChecks:
    """Central-difference verification of every term, kinks excluded."""

    def _assert_clean(self, report):
        for name, rep in report.items():
            assert rep.failures == [], (name, rep.failures)
            assert rep.checked > 0, name

    def test_l1(self, rng):
        tgt = rng.uniform(size=(3, 3, 3))
        params = _pset({"image": rng.uniform(size=(3, 3, 3))})
        self._assert_clean(g.fd_check(
            lambda p: l1_loss(p["image"], tgt), params))

    def test_l1_weighted(self, rng):
        tgt = rng.uniform(size=(3, 3, 3))
        w = rng.uniform(0.1, 1.0, size=(3, 3))
        params = _pset({"image": rng.uniform(size=(3, 3, 3))})
        self._assert_clean(g.fd_check(
            lambda p: l1_loss(p["image"], tgt, pixel_weight=w), params))

    def test_depth(self, rng):
        tgt = rng.uniform(1.0, 2.0, size=(3, 3))
        mask = (rng.uniform(size=(3, 3)) > 0.3).astype(np.float64)
        params = _pset({"depth": rng.uniform(1.0, 2.0, size=(3, 3))})
        self._assert_clean(g.fd_check(
            lambda p: depth_loss(p["depth"], tgt, mask), params))

    def test_silhouette(self, rng):
        mask = (rng.uniform(size=(3, 3)) > 0.5).astype(np.float64)
        params = _pset({"alpha": rng.uniform(size=(3, 3))})
        self._assert_clean(g.fd_check(
            lambda p: silhouette_loss(p["alpha"], mask), params))

    def test_coverage(self, rng):
        pts = rng.normal(scale=0.5, size=(4, 3))
        cfg = RenderConfig(knn_k=4)  # K = N: no selection boundary
        params = _pset({
            "centers": rng.normal(scale=0.3, size=(4, 3)),
            "rotations": rng.uniform(-0.5, 0.5, size=(4, 3)),
            "radii": rng.uniform(0.3, 0.6, size=(4, 3)),
        })
        self._assert_clean(g.fd_check(
            lambda p: coverage_loss(
                {"centers": p["centers"], "rotations": p["rotations"],
                 "radii": p["radii"]}, pts, cfg), params))

    def test_volume(self, rng):
        params = _pset({"radii": rng.uniform(0.05, 0.15, size=(2, 2, 3))})
        self._assert_clean(g.fd_check(
            lambda p: volume_loss(p["radii"]), params))

    def test_tv(self, rng):
        params = _pset({
            "centers": rng.normal(size=(2, 3, 3)),
            "rotations": rng.uniform(-0.5, 0.5, size=(2, 3, 3)),
            "radii": rng.uniform(0.05, 0.15, size=(2, 3, 3)),
        })
        self._assert_clean(g.fd_check(
            lambda p: tv_loss(p["centers"], p["rotations"], p["radii"]),
            params))

    def test_mesh(self, rng):
        anchors = rng.normal(size=(2, 2, 3))
        params = _pset({"centers": anchors + rng.normal(scale=0.05,
                                                             size=(2, 2, 3))})
        self._assert_clean(g.fd_check(
            lambda p: mesh_loss(p["centers"], anchors), params))

    def test_code(self, rng):
        params = _pset({"z": rng.normal(size=16)})
        self._assert_clean(g.fd_check(lambda p: code_loss(p["z"]), params))

    def test_total(self, rng):
        outputs_fixed, targets = _random_io(rng)
        scene0 = _random_scene(rng)
        anchors = scene0["anchors"]
        params = _pset({
            "color": outputs_fixed["color"],
            "depth": outputs_fixed["depth"],
            "alpha": outputs_fixed["alpha"],
            "centers": scene0["centers"],
            "rotations": scene0["rotations"],
            "radii": scene0["radii"],
            "z": rng.normal(scale=0.1, size=8),
        })

        def evaluate(p):
            outputs = {"color": p["color"], "depth": p["depth"],
                       "alpha": p["alpha"]}
            scene = {"centers": p["centers"], "rotations": p["rotations"],
                     "radii": p["radii"], "anchors": anchors}
            total, _ = total_loss(outputs, targets, scene, z=p["z"],
                                  mean_influence=g.mean(p["radii"]))
            return total

        self._assert_clean(g.fd_check(evaluate, params))

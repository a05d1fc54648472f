import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vstain.evaluation import (
    STAIN_MATRIX,
    MetricReport,
    StatsEmbedder,
    clean_mask,
    color_deconvolution,
    concentrations_to_rgb,
    distribution_metrics,
    evaluate_sets,
    frechet_distance,
    hausdorff,
    identity_embedder,
    ihc_dab_mask,
    mif_channel_masks,
    mse,
    otsu_mask,
    otsu_threshold,
    psnr,
    render_table,
    segmentation_metrics,
    ssim,
    texture_metrics,
)
from vstain.imagecore import RasterImage


# -- oracles -------------------------------------------------------------------


def brute_otsu_bin(gray):
    """Exhaustive search over the 255 split points with exact rational arithmetic."""
    levels = [min(int(math.floor(v * 256)), 255) for v in np.clip(gray, 0, 1).ravel()]
    best_t, best = None, Fraction(-1)
    for t in range(1, 256):
        lo = [v for v in levels if v < t]
        hi = [v for v in levels if v >= t]
        if not lo or not hi:
            continue
        w0, w1 = Fraction(len(lo), len(levels)), Fraction(len(hi), len(levels))
        m0, m1 = Fraction(sum(lo), len(lo)), Fraction(sum(hi), len(hi))
        var = w0 * w1 * (m0 - m1) ** 2
        if var > best:
            best_t, best = t, var
    return best_t


def brute_segmentation(p, r):
    pts_p = {(i, j) for i, j in zip(*np.nonzero(p))}
    pts_r = {(i, j) for i, j in zip(*np.nonzero(r))}
    inter, union = len(pts_p & pts_r), len(pts_p | pts_r)
    diag = math.hypot(*p.shape)
    if not pts_p and not pts_r:
        dice, iou, hd = 1.0, 1.0, 0.0
    elif not pts_p or not pts_r:
        dice, iou, hd = 0.0, 0.0, diag
    else:
        dice = 2 * inter / (len(pts_p) + len(pts_r))
        iou = inter / union

        def directed(a, b):
            return max(min(math.hypot(x - u, y - v) for u, v in b) for x, y in a)

        hd = max(directed(pts_p, pts_r), directed(pts_r, pts_p))
    neg_r = p.size - len(pts_r)
    tpr = inter / len(pts_r) if pts_r else 1.0
    tn = p.size - union
    tnr = tn / neg_r if neg_r else 1.0
    return dict(dice=dice, iou=iou, hd=hd, tpr=tpr, tnr=tnr)


# -- texture -------------------------------------------------------------------


class TestTexture:
    def test_identical(self):
        img = RasterImage(np.random.default_rng(0).uniform(size=(16, 16, 3)))
        m = texture_metrics(img, img)
        assert m == {"mse": 0.0, "psnr": 100.0, "ssim": 1.0}

    def test_one_level_offset(self):
        levels = np.random.default_rng(1).integers(0, 255, size=(16, 16, 3))
        a, b = RasterImage(levels / 255), RasterImage((levels + 1) / 255)
        assert mse(a, b) == 1.0
        assert psnr(a, b) == pytest.approx(10 * math.log10(255**2), abs=1e-9)
        assert psnr(a, b) == pytest.approx(48.13, abs=0.01)

    def test_checkerboard_inverse(self):
        board = (np.indices((8, 8)).sum(axis=0) % 2).astype(float)
        assert mse(board, 1 - board) == 255.0**2
        assert psnr(board, 1 - board) == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            mse(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))

    def test_ssim_matches_reference_implementation(self):
        metrics = pytest.importorskip("skimage.metrics")
        rng = np.random.default_rng(2)
        for _ in range(5):
            a = rng.uniform(size=(24, 20, 3))
            b = np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1)
            qa, qb = np.floor(a * 255 + 0.5), np.floor(b * 255 + 0.5)
            ref = metrics.structural_similarity(
                qa, qb, channel_axis=2, gaussian_weights=True, sigma=1.5, use_sample_covariance=False, data_range=255
            )
            assert ssim(a, b) == pytest.approx(ref, abs=1e-9)

    def test_ssim_symmetric_and_bounded(self):
        rng = np.random.default_rng(3)
        a, b = rng.uniform(size=(16, 16, 3)), rng.uniform(size=(16, 16, 3))
        assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)
        assert -1 <= ssim(a, b) < 1


# -- otsu and masks ------------------------------------------------------------


class TestOtsu:
    def test_two_level_image(self):
        g = np.array([0.2] * 8 + [0.8] * 8).reshape(4, 4)
        res = otsu_threshold(g)
        assert 0.2 < res.threshold < 0.8 and not res.degenerate
        assert otsu_mask(g).sum() == 8

    def test_constant_is_degenerate(self):
        res = otsu_threshold(np.full((5, 5), 0.3))
        assert res.degenerate and res.threshold == 0.3
        assert not otsu_mask(np.full((5, 5), 0.3)).any()

    def test_matches_exhaustive_search(self):
        rng = np.random.default_rng(4)
        for k in range(100):
            h, w = rng.integers(2, 17, size=2)
            kind = k % 3
            if kind == 0:
                g = rng.uniform(size=(h, w))
            elif kind == 1:
                g = rng.choice(rng.uniform(size=4), size=(h, w))
            else:
                g = np.clip(rng.normal(rng.uniform(0.2, 0.8), 0.15, size=(h, w)), 0, 1)
            res = otsu_threshold(g)
            t = brute_otsu_bin(g)
            if t is None:
                assert res.degenerate
            else:
                assert round(res.threshold * 256) == t and not res.degenerate

    def test_empty_image(self):
        with pytest.raises(ValueError):
            otsu_threshold(np.zeros((0, 3)))


class TestMifMasks:
    def test_zero_channel(self):
        img = np.zeros((10, 10, 3))
        img[2:6, 2:6, 1] = 1.0
        masks = mif_channel_masks(img)
        assert set(masks) == {"dapi", "panck", "cd3"}
        assert not masks["dapi"].any() and not masks["cd3"].any() and masks["panck"].any()

    def test_isolated_pixel_becomes_plus(self):
        # 3x3 dilation then 3x3 median keeps the centre and its 4-neighbours (6 of 9 votes);
        # the block corners see only 4 positives and drop out
        img = np.zeros((9, 9, 3))
        img[4, 4, 0] = 1.0
        got = mif_channel_masks(img)["dapi"]
        expected = np.zeros((9, 9), dtype=bool)
        expected[4, 3:6] = True
        expected[3:6, 4] = True
        assert np.array_equal(got, expected)

    def test_square_expands_at_most_one_pixel(self):
        img = np.zeros((20, 20, 3))
        img[6:14, 6:14, 2] = 0.9
        m = mif_channel_masks(img)["cd3"]
        assert m[6:14, 6:14].all()
        ring = np.zeros((20, 20), dtype=bool)
        ring[5:15, 5:15] = True
        assert not (m & ~ring).any()

    def test_clean_mask_sizes_configurable(self):
        m = np.zeros((7, 7), dtype=bool)
        m[3, 3] = True
        assert clean_mask(m, dilation_size=1, median_size=1).sum() == 1


# -- stain deconvolution -------------------------------------------------------


class TestDeconvolution:
    def test_stain_rows_unit(self):
        np.testing.assert_allclose(np.linalg.norm(STAIN_MATRIX, axis=1), 1.0)

    def test_white(self):
        assert np.all(color_deconvolution(np.ones((1, 1, 3))) <= 2e-3)

    def test_dab_round_trip(self):
        for c in (0.1, 0.5, 1.3):
            rgb = concentrations_to_rgb(np.array([[[0.0, 0.0, c]]]))
            out = color_deconvolution(rgb)[0, 0]
            assert out[2] == pytest.approx(c, abs=1e-3)
            assert out[0] <= 1e-3 and out[1] <= 1e-3

    def test_hematoxylin_vector(self):
        out = color_deconvolution(concentrations_to_rgb(np.array([[[0.8, 0.0, 0.0]]])))[0, 0]
        assert out[0] > 0 and out[2] == pytest.approx(0.0, abs=1e-3)

    def test_round_trip_random(self):
        c = np.random.default_rng(5).uniform(0, 2, size=(100, 100, 3))
        np.testing.assert_allclose(color_deconvolution(concentrations_to_rgb(c)), c, atol=1e-3)

    def test_negatives_clamped(self):
        assert np.all(color_deconvolution(np.random.default_rng(6).uniform(size=(8, 8, 3))) >= 0)


class TestDabMask:
    def test_left_half(self):
        c = np.zeros((8, 8, 3))
        c[:, :4, 2] = 1.0
        rgb = np.clip(concentrations_to_rgb(c), 0, 1)
        expected = np.zeros((8, 8), dtype=bool)
        expected[:, :4] = True
        assert np.array_equal(ihc_dab_mask(rgb), expected)

    def test_white(self):
        assert not ihc_dab_mask(np.ones((8, 8, 3))).any()

    def test_pure_hematoxylin(self):
        rng = np.random.default_rng(7)
        c = np.zeros((32, 32, 3))
        c[..., 0] = rng.uniform(0.2, 1.5, size=(32, 32))
        m = ihc_dab_mask(np.clip(concentrations_to_rgb(c), 0, 1))
        assert m.mean() < 0.01


# -- segmentation metrics ------------------------------------------------------


class TestSegmentation:
    def test_identical(self):
        m = np.zeros((6, 6), dtype=bool)
        m[1:4, 2:5] = True
        assert segmentation_metrics(m, m) == dict(dice=1.0, iou=1.0, hd=0.0, tpr=1.0, tnr=1.0)

    def test_three_four_five(self):
        p, r = np.zeros((6, 6), dtype=bool), np.zeros((6, 6), dtype=bool)
        p[0, 0], r[3, 4] = True, True
        m = segmentation_metrics(p, r)
        assert (m["dice"], m["iou"], m["hd"]) == (0.0, 0.0, 5.0)

    def test_shifted_block(self):
        p, r = np.zeros((5, 5), dtype=bool), np.zeros((5, 5), dtype=bool)
        p[1:3, 1:3] = True
        r[1:3, 2:4] = True
        m = segmentation_metrics(p, r)
        assert m["dice"] == 0.5 and m["iou"] == pytest.approx(1 / 3) and m["hd"] == 1.0

    def test_empty_conventions(self):
        e = np.zeros((3, 4), dtype=bool)
        full = np.ones((3, 4), dtype=bool)
        m = segmentation_metrics(e, e)
        assert (m["dice"], m["iou"], m["hd"]) == (1.0, 1.0, 0.0)
        m = segmentation_metrics(e, full)
        assert (m["dice"], m["iou"], m["hd"]) == (0.0, 0.0, 5.0)

    def test_dim_mismatch(self):
        with pytest.raises(ValueError):
            segmentation_metrics(np.zeros((3, 3), bool), np.zeros((3, 4), bool))

    def test_matches_brute_force(self):
        rng = np.random.default_rng(8)
        for _ in range(200):
            h, w = rng.integers(1, 17, size=2)
            density = rng.uniform(0, 0.6)
            p, r = rng.uniform(size=(h, w)) < density, rng.uniform(size=(h, w)) < density
            got, ref = segmentation_metrics(p, r), brute_segmentation(p, r)
            for k in ref:
                assert got[k] == pytest.approx(ref[k], abs=1e-12), k

    def test_hausdorff_symmetric(self):
        rng = np.random.default_rng(9)
        p, r = rng.uniform(size=(9, 7)) < 0.2, rng.uniform(size=(9, 7)) < 0.2
        assert hausdorff(p, r) == hausdorff(r, p)

    @settings(max_examples=200)
    @given(arrays(bool, (6, 7)), arrays(bool, (6, 7)))
    def test_algebraic_properties(self, p, r):
        m, mr = segmentation_metrics(p, r), segmentation_metrics(r, p)
        assert m["dice"] >= m["iou"] - 1e-15
        if m["dice"] == pytest.approx(m["iou"]):
            assert m["dice"] in (0.0, 1.0)
        assert m["dice"] == mr["dice"] and m["iou"] == mr["iou"]
        assert m["tpr"] == segmentation_metrics(~p, ~r)["tnr"]
        for k in ("dice", "iou", "tpr", "tnr"):
            assert 0.0 <= m[k] <= 1.0


# -- distribution --------------------------------------------------------------


def pixels(values):
    return [np.array([[[v]]]) for v in values]


class TestFrechet:
    def test_same_set(self):
        imgs = [RasterImage(np.random.default_rng(s).uniform(size=(8, 8, 3))) for s in range(30)]
        assert distribution_metrics(imgs, imgs)["fid"] <= 1e-6

    def test_mean_shift(self):
        rng = np.random.default_rng(10)
        a, b = rng.normal(0, 1, 10_000), rng.normal(1, 1, 10_000)
        fid = distribution_metrics(pixels(a), pixels(b), identity_embedder)["fid"]
        assert fid == pytest.approx(1.0, abs=0.1)

    def test_variance_change(self):
        rng = np.random.default_rng(11)
        a, b = rng.normal(0, 1, 10_000), rng.normal(0, 2, 10_000)
        fid = distribution_metrics(pixels(a), pixels(b), identity_embedder)["fid"]
        assert fid == pytest.approx(1.0, abs=0.1)

    def test_closed_form_multivariate(self):
        rng = np.random.default_rng(12)
        a = rng.normal(size=(500, 3))
        b = a @ np.diag([1.0, 2.0, 3.0]) + 1.0
        fid, _ = frechet_distance(a, b)
        ca, cb = np.cov(a, rowvar=False), np.cov(b, rowvar=False)
        vals = np.linalg.eigvals(ca @ cb)
        expected = np.sum((a.mean(0) - b.mean(0)) ** 2) + np.trace(ca) + np.trace(cb) - 2 * np.sum(np.sqrt(vals.real))
        assert fid == pytest.approx(expected, rel=1e-8)

    def test_symmetry(self):
        rng = np.random.default_rng(13)
        a, b = rng.normal(size=(40, 4)), rng.normal(0.3, 1.5, size=(60, 4))
        assert abs(frechet_distance(a, b)[0] - frechet_distance(b, a)[0]) <= 1e-8

    def test_small_set_regularized(self):
        imgs = [RasterImage(np.random.default_rng(s).uniform(size=(8, 8, 3))) for s in range(5)]
        out = distribution_metrics(imgs, imgs[::-1])
        assert out["covariance_regularized"] and out["embedder_id"] == StatsEmbedder.id

    def test_empty_set(self):
        with pytest.raises(ValueError):
            distribution_metrics([], [np.zeros((2, 2, 3))])


# -- report --------------------------------------------------------------------


def sample_sets(n=4):
    rng = np.random.default_rng(14)
    refs = [RasterImage(rng.uniform(size=(16, 16, 3))) for _ in range(n)]
    preds = [RasterImage(np.clip(r.data + rng.normal(0, 0.05, r.shape), 0, 1)) for r in refs]
    return preds, refs


class TestReport:
    @pytest.mark.parametrize(
        "mode,has_texture,stains",
        [("texture", True, set()), ("mif", False, {"dapi", "panck", "cd3"}), ("ihc", False, {"dab"}), ("all", True, {"dapi", "panck", "cd3", "dab"})],
    )
    def test_modes(self, mode, has_texture, stains):
        preds, refs = sample_sets()
        rep = evaluate_sets(preds, refs, mode=mode)
        assert (rep.texture is not None) == has_texture
        assert set(rep.segmentation) == stains

    def test_round_trip(self, tmp_path):
        preds, refs = sample_sets()
        rep = evaluate_sets(preds, refs, mode="all")
        back = MetricReport.load(rep.save(tmp_path / "r.json"))
        assert back.to_dict() == rep.to_dict()

    def test_averages_per_image(self):
        preds, refs = sample_sets()
        rep = evaluate_sets(preds, refs, mode="texture")
        assert rep.texture["psnr"] == pytest.approx(np.mean([psnr(p, r) for p, r in zip(preds, refs)]))

    def test_table(self):
        preds, refs = sample_sets()
        a = evaluate_sets(preds, refs, mode="all")
        b = evaluate_sets(refs, refs, mode="texture")
        md = render_table([a, b], names=["noisy", "perfect"])
        lines = md.splitlines()
        assert "PSNR" in lines[0] and "Dice" in lines[0] and len(lines) == 4
        csv_text = render_table([a, b], fmt="csv", names=["noisy", "perfect"])
        assert csv_text.splitlines()[0].split(",")[1:] == ["PSNR", "SSIM", "MSE", "FID", "Dice", "IoU", "HD"]

    def test_bad_mode(self):
        preds, refs = sample_sets(2)
        with pytest.raises(ValueError):
            evaluate_sets(preds, refs, mode="he")

import csv
import math

import numpy as np
import pytest
import torch

import vstain.training as training
from vstain.imagecore import RasterImage
from vstain.implicit_head import ImplicitModel
from vstain.training import (
    PairedPatch,
    TrainConfig,
    TrainingDivergedError,
    batch_loss,
    make_patches,
    train_model,
)

from .conftest import desk_model_config, small_model_config


def rand_pair(h, w, seed, pid=""):
    rng = np.random.default_rng(seed)
    return PairedPatch(RasterImage(rng.uniform(size=(h, w, 3))), RasterImage(rng.uniform(size=(h, w, 3))), id=pid)


def blank_pair(n):
    img = RasterImage(np.zeros((n, n, 3)))
    return img, img


class TestMakePatches:
    @pytest.mark.parametrize("size,count", [(256, 1), (512, 4), (300, 1)])
    def test_counts(self, size, count):
        assert len(make_patches(blank_pair(size), 256, 256)) == count

    def test_identical_crops_raster_order(self):
        rng = np.random.default_rng(0)
        src = RasterImage(rng.uniform(size=(8, 12, 3)))
        tgt = RasterImage(rng.uniform(size=(8, 12, 3)))
        patches = make_patches((src, tgt), 4, 4)
        assert [p.id for p in patches] == [f"patch_{y}_{x}" for y in (0, 4) for x in (0, 4, 8)]
        p = patches[4]
        np.testing.assert_array_equal(p.source.data, src.data[4:8, 4:8])
        np.testing.assert_array_equal(p.target.data, tgt.data[4:8, 4:8])

    def test_oversized_patch_warns(self):
        with pytest.warns(UserWarning):
            assert make_patches(blank_pair(100), 256, 256) == []


class TestConfig:
    def test_paired_patch_alignment(self):
        with pytest.raises(ValueError):
            PairedPatch(RasterImage(np.zeros((4, 4, 3))), RasterImage(np.zeros((4, 5, 3))))

    @pytest.mark.parametrize(
        "kw",
        [
            {"learning_rate": -1.0},
            {"sample_fraction": 0.0},
            {"sample_fraction": 1.5},
            {"coord_sampling": "sparse"},
            {"lr_schedule": "step"},
        ],
    )
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)

    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.learning_rate, cfg.batch_size, cfg.radius, cfg.coord_sampling) == (1e-4, 4, 1, "full_grid")
        assert cfg.lambdas == [1.0, 1.0, 0.0]

    def test_empty_dataset(self):
        with pytest.raises(ValueError):
            train_model([], TrainConfig(max_steps=1))


def quick_cfg(**kw):
    base = dict(learning_rate=1e-3, batch_size=2, max_steps=5, lambdas=[0, 0, 0], dtype="float64")
    base.update(kw)
    return TrainConfig(**base)


class TestLoop:
    def test_zero_learning_rate_constant_history(self):
        data = [rand_pair(8, 8, s) for s in range(4)]
        res = train_model(data, quick_cfg(learning_rate=0.0, batch_size=4, max_steps=6), small_model_config())
        totals = [h["total"] for h in res.history]
        np.testing.assert_allclose(totals, totals[0], rtol=1e-12)

    def test_seed_reproducible(self):
        data = [rand_pair(8, 8, s, f"p{s}") for s in range(6)]
        cfg = quick_cfg(max_steps=8, lambdas=[1, 1, 0], dtype="float32")
        a = train_model(data, cfg, small_model_config()).history
        b = train_model(data, cfg, small_model_config()).history
        for ra, rb in zip(a, b):
            assert ra["total"] == pytest.approx(rb["total"], rel=1e-6)

    def test_identity_is_learnable(self):
        rng = np.random.default_rng(3)
        img = RasterImage(rng.uniform(size=(16, 16, 3)))
        cfg = TrainConfig(learning_rate=1e-3, batch_size=1, max_steps=200)
        res = train_model([PairedPatch(img, img, "id")], cfg, desk_model_config())
        assert res.history[-1]["implicit_loss"] < 0.02

    def test_nan_aborts_with_diagnostic(self, monkeypatch):
        def broken(model, x, y, cfg, perceptual=None, rng=None):
            bad = model.pos.linear.weight.sum() * float("nan")
            return bad, bad.new_zeros(())

        monkeypatch.setattr(training, "batch_loss", broken)
        with pytest.raises(TrainingDivergedError) as info:
            train_model([rand_pair(8, 8, 0, "only")], quick_cfg(), small_model_config())
        assert info.value.step == 0 and info.value.batch_ids == ["only"]

    def test_every_parameter_gets_gradient(self):
        data = [rand_pair(16, 16, s) for s in range(4)]
        seen = {}

        def track(step, record, model):
            for name, p in model.named_parameters():
                if p.grad is not None and torch.count_nonzero(p.grad) > 0:
                    seen[name] = True

        res = train_model(data, quick_cfg(max_steps=2, lambdas=[1, 1, 0]), small_model_config(), callback=track)
        names = {n for n, _ in res.model.named_parameters()}
        assert names == set(seen)

    def test_outputs_written(self, tmp_path):
        data = [rand_pair(8, 8, s) for s in range(2)]
        train_model(data, quick_cfg(max_steps=4, checkpoint_every=2), small_model_config(), out_dir=tmp_path)
        assert (tmp_path / "checkpoint.zip").exists()
        assert (tmp_path / "checkpoint_step000002.zip").exists() and (tmp_path / "checkpoint_step000004.zip").exists()
        with open(tmp_path / "loss_history.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert list(rows[0]) == ["step", "implicit_loss", "perceptual_loss", "total"]
        assert [int(r["step"]) for r in rows] == [0, 1, 2, 3]

    def test_radius_from_train_config(self):
        res = train_model([rand_pair(8, 8, 0)], quick_cfg(max_steps=1, radius=2), small_model_config())
        assert res.model.cfg.radius == 2


def test_random_fraction_is_unbiased():
    torch.manual_seed(0)
    model = ImplicitModel(small_model_config()).double()
    pairs = [rand_pair(12, 12, s) for s in range(2)]
    x = torch.as_tensor(np.stack([p.source.data.transpose(2, 0, 1) for p in pairs]))
    y = torch.as_tensor(np.stack([p.target.data.transpose(2, 0, 1) for p in pairs]))
    with torch.no_grad():
        full, _ = batch_loss(model, x, y, TrainConfig())
        cfg = TrainConfig(coord_sampling="random_fraction", sample_fraction=0.25)
        rng = np.random.default_rng(7)
        draws = np.array([batch_loss(model, x, y, cfg, rng=rng)[0].item() for _ in range(100)])
    stderr = draws.std(ddof=1) / math.sqrt(len(draws))
    assert abs(draws.mean() - full.item()) < 3 * stderr

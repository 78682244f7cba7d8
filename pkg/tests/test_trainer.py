import numpy as np
import pytest

from amroi import trainer as tr
from amroi.datagen import GenConfig, generate_corpus, split_folds
from amroi.model import Model, ModelConfig
from amroi.numerics import Tensor
from amroi.roi import crop_rois
from amroi.trainer import Affine, TrainConfig

SMALL = ModelConfig(variant="AttMultiROI", crop_size=16, widths=(2, 4), d_model=8, heads=2,
                    layers=1, mlp_hidden=16, reg_hidden=4)
NO_AUG = dict(aug_scale=0.0, aug_rotation=0.0, aug_translation=0.0, aug_flip=0.0)


@pytest.fixture(scope="module")
def ds(tmp_path_factory):
    root = tmp_path_factory.mktemp("c")
    generate_corpus(GenConfig(n_patients=16), root)
    return tr.Dataset.load(root)


class TestAugment:
    def test_zero_ranges_identity(self, ds):
        img, lm = ds.images[0], ds.landmarks[0]
        cfg = TrainConfig(**NO_AUG)
        img2, lm2 = tr.augment(img, lm, cfg, np.random.default_rng(0))
        assert np.allclose(img2.pixels, img.pixels, atol=1e-6)
        assert np.allclose(lm2.points, lm.points)

    def test_double_flip_restores(self, ds):
        img, lm = ds.images[1], ds.landmarks[1]
        a = Affine(flip=True)
        once = tr.apply_affine(img, lm, a)
        twice = tr.apply_affine(*once, a)
        assert np.allclose(twice[0].pixels, img.pixels, atol=1e-6)
        assert np.allclose(twice[1].points, lm.points)

    def test_flip_keeps_groups_anatomical(self, ds):
        img, lm = ds.images[2], ds.landmarks[2]
        _, f = tr.apply_affine(img, lm, Affine(flip=True))
        f.validate(img.width, img.height)  # left group still left of right group
        assert np.all(np.diff(f.clavicle_left[:, 0]) > 0)

    def test_rotation_moves_rois_with_landmarks(self, ds):
        img, lm = ds.images[3], ds.landmarks[3]
        a = Affine(angle=5.0)
        img2, lm2 = tr.apply_affine(img, lm, a)
        # rotating back recovers the crops of the original image
        img3, lm3 = tr.apply_affine(img2, lm2, Affine(angle=-5.0))
        c0 = crop_rois(img, lm, 16).data[5:13]
        c3 = crop_rois(img3, lm3, 16).data[5:13]
        assert np.corrcoef(c0.ravel(), c3.ravel())[0, 1] > 0.9

    def test_landmarks_clamped(self, ds):
        img, lm = ds.images[4], ds.landmarks[4]
        _, lm2 = tr.apply_affine(img, lm, Affine(shift=(40.0, 40.0)))
        assert lm2.points.max() <= 63 and lm2.points.min() >= 0


class TestSgd:
    def test_zero_grad_no_decay_unchanged(self):
        p = {"w": Tensor(np.array([1.5]))}
        tr.sgd_step(p, {"w": np.zeros(1)}, lr=0.1, wd=0.0)
        assert p["w"].data[0] == 1.5

    def test_single_step(self):
        p = {"w": Tensor(np.array([1.0]))}
        tr.sgd_step(p, {"w": np.array([1.0])}, lr=0.1, wd=0.0)
        assert p["w"].data[0] == pytest.approx(0.9)

    def test_quadratic_bowl(self):
        p = {"w": Tensor(np.array([1.0]))}
        for _ in range(100):
            tr.sgd_step(p, {"w": 2 * p["w"].data}, lr=0.1, wd=0.0)
        assert abs(p["w"].data[0]) < 1e-9
        assert p["w"].data[0] == pytest.approx(0.8**100, rel=1e-12)

    def test_weight_decay_exemption(self):
        p = {"a.weight": Tensor(np.array([1.0])), "a.bias": Tensor(np.array([1.0])),
             "encoder.E_pos": Tensor(np.array([1.0]))}
        g = {k: np.zeros(1) for k in p}
        tr.sgd_step(p, g, lr=0.5, wd=0.1, no_decay={"a.bias", "encoder.E_pos"})
        assert p["a.weight"].data[0] == pytest.approx(0.95)
        assert p["a.bias"].data[0] == 1.0 and p["encoder.E_pos"].data[0] == 1.0

    def test_config_invariants(self):
        with pytest.raises(ValueError):
            TrainConfig(lr=0.0)
        with pytest.raises(ValueError):
            TrainConfig(epochs=0)


class TestTrainFold:
    def test_smoke_writes_checkpoint(self, ds, tmp_path):
        res = tr.train_fold(ds, list(range(8)), list(range(8, 12)), 0, SMALL,
                            TrainConfig(epochs=1), test_idx=[12, 13], checkpoint=tmp_path / "f.ckpt")
        assert (tmp_path / "f.ckpt").is_file()
        assert res.test_predictions.shape == (2,)
        assert [r.split(",")[1] for r in res.log_rows] == ["fold0/train", "fold0/val"]

    def test_deterministic(self, ds):
        runs = [tr.train_fold(ds, list(range(8)), [8, 9], 1, SMALL, TrainConfig(epochs=2, seed=4))
                for _ in range(2)]
        a, b = (r.model.params for r in runs)
        assert all(a[k].data.tobytes() == b[k].data.tobytes() for k in a)
        assert runs[0].log_rows == runs[1].log_rows

    def test_monotone_loss_small_lr(self, ds):
        cfg = TrainConfig(epochs=5, lr=1e-5, batch_size=8, **NO_AUG)
        res = tr.train_fold(ds, list(range(8)), [], 0, SMALL, cfg)
        losses = [float(r.split(",")[2]) for r in res.log_rows]
        assert all(b <= a for a, b in zip(losses, losses[1:]))

    def test_leakage_rejected(self, ds):
        with pytest.raises(tr.LeakageError):
            tr.train_fold(ds, [0, 1, 2], [2, 3], 0, SMALL, TrainConfig(epochs=1))

    def test_divergence_reported(self, ds):
        with pytest.raises(tr.DivergenceError, match="epoch 1"):
            with np.errstate(all="ignore"):
                tr.train_fold(ds, list(range(8)), [], 0, SMALL,
                              TrainConfig(epochs=2, lr=1e12, batch_size=2))


class TestEnsemble:
    def test_identical_models(self):
        m = Model.create(SMALL, seed=0)
        x = np.random.default_rng(0).normal(size=(3, 15, 16, 16)).astype(np.float32)
        assert np.array_equal(tr.ensemble_predict([m, m], x), m.predict(x))

    def test_symmetric_offsets_cancel(self):
        m1, m2 = Model.create(SMALL, seed=0), Model.create(SMALL, seed=0)
        m1.target_mean, m2.target_mean = 1.0 + 0.25, 1.0 - 0.25
        x = np.zeros((2, 15, 16, 16), np.float32)
        assert np.array_equal(tr.ensemble_predict([m1, m2], x), Model.create(SMALL, seed=0).predict(x) + 1.0)

    def test_needs_a_model(self):
        with pytest.raises(ValueError):
            tr.ensemble_predict([], np.zeros((1, 15, 16, 16)))


def test_all_vertebrae_independent(ds, tmp_path):
    dev = list(range(12))
    folds = split_folds([ds.records[i] for i in dev], 4, 0)
    cfg = TrainConfig(epochs=1)
    res = tr.train_all_vertebrae(ds, folds, dev, [12, 13], SMALL, cfg, out_dir=tmp_path)
    ckpts = sorted(tmp_path.rglob("*.ckpt"))
    assert len(ckpts) == 16
    assert (tmp_path / "L1" / "fold0.ckpt").read_bytes() != (tmp_path / "L2" / "fold0.ckpt").read_bytes()
    assert set(res) == {"L1", "L2", "L3", "L4"}

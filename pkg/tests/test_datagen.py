import hashlib

import numpy as np
import pytest
from scipy.stats import spearmanr

from amroi import datagen as dg
from amroi.datagen import GenConfig, PatientRecord


def _digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(root).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def small_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    recs = dg.generate_corpus(GenConfig(n_patients=12), root)
    return root, recs


class TestGenerate:
    def test_empty_manifest(self, tmp_path):
        dg.generate_corpus(GenConfig(n_patients=0), tmp_path)
        lines = (tmp_path / "manifest.tsv").read_text().splitlines()
        assert lines == ["\t".join(dg.MANIFEST_HEADER)]

    def test_same_seed_is_byte_identical(self, tmp_path):
        cfg = GenConfig(n_patients=5, seed=3)
        dg.generate_corpus(cfg, tmp_path / "a")
        dg.generate_corpus(cfg, tmp_path / "b")
        assert _digest(tmp_path / "a") == _digest(tmp_path / "b")

    def test_different_seed_differs(self, tmp_path):
        dg.generate_corpus(GenConfig(n_patients=3, seed=1), tmp_path / "a")
        dg.generate_corpus(GenConfig(n_patients=3, seed=2), tmp_path / "b")
        assert _digest(tmp_path / "a") != _digest(tmp_path / "b")

    def test_t_scores_match_reference_model(self, small_corpus):
        cfg = GenConfig()
        for r in small_corpus[1]:
            for v in range(4):
                expected = round((r.bmd[v] - cfg.ref_mu[v]) / cfg.ref_sigma[v], 6)
                assert r.t_score[v] == expected

    def test_latent_correlates_with_l1(self):
        cfg = GenConfig(n_patients=2000)
        lat, l1 = [], []
        for i in range(cfg.n_patients):
            # labels only; rendering is not needed for this check
            rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(i,)))
            u = rng.standard_normal()
            eps = rng.standard_normal(4)
            rho = cfg.latent_corr[0]
            lat.append(u)
            l1.append(max(0.2, cfg.bmd_mean[0] + cfg.bmd_sd[0] * (rho * u + np.sqrt(1 - rho**2) * eps[0])))
        assert np.corrcoef(lat, l1)[0, 1] >= 0.9

    def test_labels_match_sample_patient(self):
        cfg = GenConfig(n_patients=4)
        _, _, fields, truth = dg.sample_patient(cfg, 2)
        rho = cfg.latent_corr[0]
        rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(2,)))
        u = rng.standard_normal()
        eps = rng.standard_normal(4)
        assert truth.latent == u
        b = cfg.bmd_mean[0] + cfg.bmd_sd[0] * (rho * u + np.sqrt(1 - rho**2) * eps[0])
        assert fields["bmd"][0] == round(max(0.2, b), 6)

    def test_texture_contrast_monotone_in_bmd(self):
        cfg = GenConfig(n_patients=200, occlusion=0.0)
        contrast, bmd = [], []
        for i in range(cfg.n_patients):
            img, lm, fields, _ = dg.sample_patient(cfg, i)
            masks = dg._site_masks(lm.points, cfg.image_size)
            px = img.pixels
            contrast.append(np.mean([px[m].std() for m in masks]))
            bmd.append(fields["bmd"][0])
        quart = np.digitize(bmd, np.quantile(bmd, [0.25, 0.5, 0.75]))
        means = [np.mean(np.array(contrast)[quart == q]) for q in range(4)]
        assert all(a < b for a, b in zip(means, means[1:]))
        assert spearmanr(contrast, bmd)[0] > 0.8


class TestFormats:
    def test_round_trip(self, small_corpus, tmp_path):
        root, recs = small_corpus
        loaded = dg.load_manifest(root / "manifest.tsv")
        assert loaded == recs
        img, lm = dg.load_patient(root, loaded[0])
        dg.write_image(tmp_path / "x.amr", img)
        dg.write_landmarks(tmp_path / "x.lm", lm)
        img2 = dg.load_image(tmp_path / "x.amr")
        assert np.array_equal(img.pixels, img2.pixels) and img.spacing == img2.spacing
        assert np.array_equal(dg.load_landmarks(tmp_path / "x.lm").points, lm.points)

    def test_image_header_layout(self, tmp_path):
        dg.write_image(tmp_path / "a.amr", dg.Image2D(np.zeros((3, 5)), 2.5))
        raw = (tmp_path / "a.amr").read_bytes()
        assert raw[:4] == b"AMR1"
        assert int.from_bytes(raw[4:8], "little") == 5
        assert int.from_bytes(raw[8:12], "little") == 3
        assert len(raw) == 16 + 4 * 15

    def test_truncated_image_names_file(self, tmp_path):
        dg.write_image(tmp_path / "t.amr", dg.Image2D(np.zeros((4, 4))))
        raw = (tmp_path / "t.amr").read_bytes()
        (tmp_path / "t.amr").write_bytes(raw[:-7])
        with pytest.raises(dg.FormatError, match="t.amr"):
            dg.load_image(tmp_path / "t.amr")

    def test_wrong_magic(self, tmp_path):
        (tmp_path / "m.amr").write_bytes(b"XXXX" + bytes(12))
        with pytest.raises(dg.FormatError, match="magic"):
            dg.load_image(tmp_path / "m.amr")

    def test_landmark_out_of_bounds(self, small_corpus, tmp_path):
        root, recs = small_corpus
        _, lm = dg.load_patient(root, recs[0])
        pts = lm.points.copy()
        pts[15] = (70.0, 10.0)
        dg.write_landmarks(tmp_path / "bad.lm", dg.LandmarkSet(pts))
        with pytest.raises(dg.ValidationError, match="t12"):
            dg.load_landmarks(tmp_path / "bad.lm", bounds=(64, 64))

    def test_malformed_manifest_header(self, tmp_path):
        (tmp_path / "manifest.tsv").write_text("id\tfoo\n")
        with pytest.raises(dg.FormatError, match=":1"):
            dg.load_manifest(tmp_path / "manifest.tsv")

    def test_landmark_bad_line_reports_line(self, tmp_path):
        (tmp_path / "x.lm").write_text("clavicle_left_0\t1\t2\n" * 16)
        with pytest.raises(dg.FormatError, match=":2"):
            dg.load_landmarks(tmp_path / "x.lm")


def _recs(ids):
    return [PatientRecord(pid, "", "", (1,) * 4, (0,) * 4, "F", 50) for pid in ids]


class TestSplits:
    def test_eight_records_four_folds(self):
        f = dg.split_folds(_recs([f"p{i}" for i in range(8)]), 4, seed=0)
        assert sorted(np.bincount(f)) == [2, 2, 2, 2]

    def test_duplicate_ids_share_fold(self):
        recs = _recs(["a", "b", "a", "c", "d", "e", "b"])
        f = dg.split_folds(recs, 4, seed=1)
        assert f[0] == f[2] and f[1] == f[6]

    def test_large_cohort_sizes(self):
        f = dg.split_folds(_recs([f"p{i}" for i in range(13719)]), 4, seed=0)
        assert sorted(np.bincount(f)) == [3429, 3430, 3430, 3430]

    def test_partition(self):
        n = 50
        f = dg.split_folds(_recs([f"p{i}" for i in range(n)]), 4, seed=5)
        folds = [set(np.flatnonzero(np.array(f) == k)) for k in range(4)]
        assert set().union(*folds) == set(range(n))
        assert all(not (folds[i] & folds[j]) for i in range(4) for j in range(i + 1, 4))

    def test_too_few_records(self):
        with pytest.raises(ValueError):
            dg.split_folds(_recs(["a", "b", "c"]), 4)

    def test_holdout_disjoint_patients(self):
        recs = _recs(["a", "a", "b", "c", "d", "e", "f", "g", "h", "i"])
        dev, test = dg.holdout_split(recs, 0.3, seed=2)
        assert sorted(dev + test) == list(range(10))
        assert not {recs[i].patient_id for i in dev} & {recs[i].patient_id for i in test}

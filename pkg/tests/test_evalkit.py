import numpy as np
import pytest
import torch

from tempeq.encoder import EncoderConfig, EquivarianceModel
from tempeq.evalkit import (
    FeatureBank,
    aux_head_accuracies,
    equivariance_diagnostic,
    extract_features,
    linear_probe,
    nn_classify,
    raw_features,
    retrieval_recall,
)
from tempeq.trainloop import TrainConfig

TINY_ENC = EncoderConfig(clip_len=8, input_resolution=16, stage_widths=(4, 4, 8, 8))


@pytest.fixture(scope="module")
def tiny_model():
    torch.manual_seed(0)
    return EquivarianceModel(TINY_ENC)


def make_bank(features, labels):
    features = np.asarray(features, dtype=np.float64)
    return FeatureBank(features, np.asarray(labels), features.mean(0), features.std(0))


def separable_banks(rng, n_per_class=20, d=6, n_classes=3, spread=0.05):
    centers = rng.normal(size=(n_classes, d)) * 3
    def draw():
        feats, labels = [], []
        for c in range(n_classes):
            feats.append(centers[c] + rng.normal(size=(n_per_class, d)) * spread)
            labels.extend([c] * n_per_class)
        return np.concatenate(feats), np.array(labels)
    trf, trl = draw()
    tef, tel = draw()
    return make_bank(trf, trl), make_bank(tef, tel)


class TestStandardization:
    def test_self_stats(self, tiny_model):
        rng = np.random.default_rng(0)
        videos = rng.integers(0, 256, size=(12, 16, 16, 16, 3), dtype=np.uint8)
        bank = extract_features(tiny_model, videos, np.zeros(12), n_temporal_crops=2)
        assert np.abs(bank.features.mean(axis=0)).max() < 1e-6
        live = bank.std > 0  # constant feature channels are left unscaled
        assert np.abs(bank.features[:, live].std(axis=0) - 1).max() < 1e-5

    def test_external_stats_applied_not_recomputed(self, tiny_model):
        rng = np.random.default_rng(1)
        videos = rng.integers(0, 256, size=(8, 16, 16, 16, 3), dtype=np.uint8)
        raw = raw_features(tiny_model, videos, n_temporal_crops=2)
        mean = np.full(raw.shape[1], 0.5)
        std = np.full(raw.shape[1], 2.0)
        bank = extract_features(tiny_model, videos, np.zeros(8), n_temporal_crops=2,
                                stats=(mean, std))
        assert np.allclose(bank.features, (raw - 0.5) / 2.0, atol=1e-6)
        assert np.array_equal(bank.mean, mean)

    def test_multi_crop_average_of_identical_crops(self, tiny_model):
        # a temporally constant video makes every temporal crop identical, so
        # crop averaging must equal the single-crop embedding
        rng = np.random.default_rng(2)
        frame = rng.integers(0, 256, size=(1, 16, 16, 3), dtype=np.uint8)
        videos = np.broadcast_to(frame, (2, 16, 16, 16, 3)).copy()[None].reshape(2, 16, 16, 16, 3)
        one = raw_features(tiny_model, videos, n_temporal_crops=1)
        four = raw_features(tiny_model, videos, n_temporal_crops=4)
        assert np.allclose(one, four, atol=1e-5)

    def test_too_short_videos(self, tiny_model):
        videos = np.zeros((2, 4, 16, 16, 3), dtype=np.uint8)
        with pytest.raises(ValueError, match="shorter than clip length"):
            raw_features(tiny_model, videos)

    def test_bank_roundtrip(self, tmp_path):
        rng = np.random.default_rng(3)
        bank = make_bank(rng.normal(size=(5, 4)), np.arange(5))
        path = tmp_path / "bank.npz"
        bank.save(path)
        loaded = FeatureBank.load(path)
        assert np.array_equal(bank.features, loaded.features)
        assert np.array_equal(bank.labels, loaded.labels)
        assert np.array_equal(bank.std, loaded.std)


def brute_force_recall(qf, ql, gf, gl, k, exclude_self=False):
    hits = 0
    for i in range(len(qf)):
        sims = []
        for j in range(len(gf)):
            if exclude_self and i == j:
                continue
            c = np.dot(qf[i], gf[j]) / (np.linalg.norm(qf[i]) * np.linalg.norm(gf[j]))
            sims.append((c, j))
        sims.sort(key=lambda t: -t[0])
        if any(gl[j] == ql[i] for _, j in sims[:k]):
            hits += 1
    return hits / len(qf)


class TestRetrieval:
    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(0)
        qf = rng.normal(size=(20, 8))
        gf = rng.normal(size=(20, 8))
        ql = rng.integers(0, 4, size=20)
        gl = rng.integers(0, 4, size=20)
        got = retrieval_recall(make_bank(qf, ql), make_bank(gf, gl), ks=(1, 5, 10, 20))
        for k in (1, 5, 10, 20):
            assert got[k] == pytest.approx(brute_force_recall(qf, ql, gf, gl, k))

    def test_exclude_self_oracle(self):
        rng = np.random.default_rng(1)
        f = rng.normal(size=(15, 6))
        labels = rng.integers(0, 3, size=15)
        bank = make_bank(f, labels)
        got = retrieval_recall(bank, bank, ks=(1, 5), exclude_self=True)
        for k in (1, 5):
            assert got[k] == pytest.approx(
                brute_force_recall(f, labels, f, labels, k, exclude_self=True))

    def test_monotone_in_k(self):
        rng = np.random.default_rng(2)
        q = make_bank(rng.normal(size=(30, 5)), rng.integers(0, 5, 30))
        g = make_bank(rng.normal(size=(40, 5)), rng.integers(0, 5, 40))
        rk = retrieval_recall(q, g, ks=(1, 5, 10, 20))
        assert rk[1] <= rk[5] <= rk[10] <= rk[20]

    def test_gallery_permutation_invariance(self):
        rng = np.random.default_rng(3)
        q = make_bank(rng.normal(size=(10, 5)), rng.integers(0, 3, 10))
        gf = rng.normal(size=(25, 5))
        gl = rng.integers(0, 3, 25)
        perm = rng.permutation(25)
        a = retrieval_recall(q, make_bank(gf, gl), ks=(1, 5))
        b = retrieval_recall(q, make_bank(gf[perm], gl[perm]), ks=(1, 5))
        assert a == b

    def test_perfect_and_empty(self):
        f = np.eye(4)
        labels = np.arange(4)
        bank = make_bank(f + 1e-3, labels)
        assert retrieval_recall(bank, make_bank(f, labels), ks=(1,))[1] == 1.0
        empty = FeatureBank(np.zeros((0, 4)), np.zeros(0), np.zeros(4), np.ones(4))
        with pytest.raises(ValueError, match="empty"):
            retrieval_recall(empty, bank)


class TestNearestNeighbor:
    def test_matches_oracle(self):
        rng = np.random.default_rng(0)
        trf, tef = rng.normal(size=(30, 7)), rng.normal(size=(15, 7))
        trl = rng.integers(0, 4, 30)
        tel = rng.integers(0, 4, 15)
        got = nn_classify(make_bank(trf, trl), make_bank(tef, tel))
        trn = trf / np.linalg.norm(trf, axis=1, keepdims=True)
        ten = tef / np.linalg.norm(tef, axis=1, keepdims=True)
        expected = float((trl[np.argmax(ten @ trn.T, axis=1)] == tel).mean())
        assert got == pytest.approx(expected)

    def test_cosine_not_euclidean(self):
        # nearest by angle differs from nearest by distance here
        train = make_bank([[1.0, 0.0], [0.0, 10.0]], [0, 1])
        test = make_bank([[0.2, 0.3]], [1])
        assert nn_classify(train, test) == 1.0

    def test_separable_perfect(self):
        rng = np.random.default_rng(1)
        train, test = separable_banks(rng)
        assert nn_classify(train, test) == 1.0


class TestLinearProbe:
    def test_separable_high_accuracy(self):
        rng = np.random.default_rng(0)
        train, test = separable_banks(rng)
        assert linear_probe(train, test) >= 0.99

    def test_label_shuffle_near_chance(self):
        # any single shuffle gives the probe arbitrary per-cluster majority
        # labels, so compare the mean over shuffles against chance
        rng = np.random.default_rng(1)
        train, test = separable_banks(rng, n_per_class=40, n_classes=4, spread=0.05)
        accs = []
        for _ in range(20):
            shuffled = FeatureBank(train.features, rng.permutation(train.labels),
                                   train.mean, train.std)
            accs.append(linear_probe(shuffled, test))
        assert abs(np.mean(accs) - 0.25) <= 0.15

    def test_affine_feature_rescaling_small_effect(self):
        rng = np.random.default_rng(2)
        train, test = separable_banks(rng, spread=0.6)
        base = linear_probe(train, test)
        scale = 1.7
        shift = 0.3
        train2 = FeatureBank(train.features * scale + shift, train.labels,
                             train.mean, train.std)
        test2 = FeatureBank(test.features * scale + shift, test.labels,
                            test.mean, test.std)
        assert abs(linear_probe(train2, test2) - base) <= 0.05

    def test_single_class_rejected(self):
        bank = make_bank(np.random.default_rng(0).normal(size=(6, 3)), [1] * 6)
        with pytest.raises(ValueError, match="single-class"):
            linear_probe(bank, bank)


class TestDiagnostics:
    def test_random_model_near_chance(self, tiny_model):
        rng = np.random.default_rng(0)
        videos = rng.integers(0, 256, size=(16, 64, 16, 16, 3), dtype=np.uint8)
        cfg = TrainConfig(clip_len=8, resolution=16, stage_widths=(4, 4, 8, 8))
        out = equivariance_diagnostic(tiny_model, videos, n_probes=64, config=cfg)
        assert out["n_codes"] == 128
        # 8 couples per batch: chance of nearest-code couple match ~ 1/15
        assert out["match_accuracy"] < 0.5

    def test_aux_accuracy_keys_and_range(self, tiny_model):
        rng = np.random.default_rng(1)
        videos = rng.integers(0, 256, size=(16, 64, 16, 16, 3), dtype=np.uint8)
        cfg = TrainConfig(clip_len=8, resolution=16, stage_widths=(4, 4, 8, 8))
        out = aux_head_accuracies(tiny_model, videos, n_batches=2, config=cfg)
        assert set(out) == {"speed", "direction", "overlap"}
        assert all(0.0 <= v <= 1.0 for v in out.values())

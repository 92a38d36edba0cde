"""Frozen-feature evaluation: multi-crop extraction, retrieval, 1-NN,
linear probe and the relative-transform diagnostic."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .clipops import Direction, TemporalTransform, apply_temporal
from .encoder import EquivarianceModel
from .trainloop import TrainConfig, assemble_couple_clips, plan_batch


@dataclass
class FeatureBank:
    """Standardized per-video features plus the train-split statistics."""

    features: np.ndarray  # (n_videos, D)
    labels: np.ndarray
    mean: np.ndarray
    std: np.ndarray

    def save(self, path):
        np.savez(path, features=self.features, labels=self.labels,
                 mean=self.mean, std=self.std)

    @staticmethod
    def load(path) -> "FeatureBank":
        with np.load(path) as data:
            return FeatureBank(data["features"], data["labels"], data["mean"], data["std"])


def _spatial_crop_boxes(h: int, w: int, size: int, n_crops: int):
    """Deterministic crop boxes: center, plus 4 corners when n_crops == 5."""
    size = min(size, h, w)
    center = ((h - size) // 2, (w - size) // 2)
    if n_crops == 1:
        return [(*center, size, size)]
    if n_crops == 5:
        return [
            (*center, size, size),
            (0, 0, size, size),
            (0, w - size, size, size),
            (h - size, 0, size, size),
            (h - size, w - size, size, size),
        ]
    raise ValueError("n_spatial_crops must be 1 or 5")


def raw_features(
    model: EquivarianceModel,
    videos: np.ndarray,
    n_temporal_crops: int = 4,
    n_spatial_crops: int = 1,
    batch_clips: int = 64,
) -> np.ndarray:
    """Per-video crop-averaged embeddings, before any standardization."""
    cfg = model.config
    t_total = videos.shape[1]
    h, w = videos.shape[2], videos.shape[3]
    if t_total < cfg.clip_len:
        raise ValueError("videos shorter than clip length")
    starts = np.unique(
        np.linspace(0, t_total - cfg.clip_len, max(1, n_temporal_crops)).round().astype(int)
    )
    boxes = _spatial_crop_boxes(h, w, cfg.input_resolution, n_spatial_crops)

    clips = []
    for video in videos:
        vid = video.astype(np.float32) / 255.0
        for start in starts:
            tau = TemporalTransform(0, Direction.FORWARD, int(start))
            clip = apply_temporal(vid, tau, cfg.clip_len)
            for top, left, ch, cw in boxes:
                clips.append(clip[:, top : top + ch, left : left + cw])
    clips = torch.from_numpy(np.stack(clips)).permute(0, 4, 1, 2, 3).contiguous()

    model.eval()
    embs = []
    with torch.no_grad():
        for lo in range(0, len(clips), batch_clips):
            embs.append(model.backbone_forward(clips[lo : lo + batch_clips]))
    emb = torch.cat(embs).numpy()
    per_video = len(starts) * len(boxes)
    return emb.reshape(len(videos), per_video, -1).mean(axis=1)


def extract_features(
    model: EquivarianceModel,
    videos: np.ndarray,
    labels: np.ndarray,
    n_temporal_crops: int = 4,
    n_spatial_crops: int = 1,
    stats: tuple[np.ndarray, np.ndarray] | None = None,
) -> FeatureBank:
    """Build a feature bank; stats default to this set's own statistics.

    Pass the train bank's (mean, std) for any non-train split so that only
    training statistics are ever used for standardization.
    """
    feats = raw_features(model, videos, n_temporal_crops, n_spatial_crops)
    if stats is None:
        mean = feats.mean(axis=0)
        std = feats.std(axis=0)
    else:
        mean, std = stats
    std = np.where(std > 0, std, 1.0)
    return FeatureBank((feats - mean) / std, np.asarray(labels), mean, std)


def _cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    an = a / np.linalg.norm(a, axis=1, keepdims=True)
    bn = b / np.linalg.norm(b, axis=1, keepdims=True)
    return an @ bn.T


def retrieval_recall(
    query_bank: FeatureBank,
    gallery_bank: FeatureBank,
    ks=(1, 5, 10, 20),
    exclude_self: bool = False,
) -> dict[int, float]:
    """R@k: fraction of queries with a same-class item in the top-k neighbors."""
    if len(query_bank.features) == 0 or len(gallery_bank.features) == 0:
        raise ValueError("empty feature bank")
    sim = _cosine_matrix(query_bank.features, gallery_bank.features)
    if exclude_self:
        np.fill_diagonal(sim, -np.inf)
    order = np.argsort(-sim, axis=1)
    hits = gallery_bank.labels[order] == query_bank.labels[:, None]
    return {k: float(hits[:, : min(k, hits.shape[1])].any(axis=1).mean()) for k in ks}


def nn_classify(train_bank: FeatureBank, test_bank: FeatureBank,
                exclude_self: bool = False) -> float:
    """1-NN accuracy under cosine similarity."""
    sim = _cosine_matrix(test_bank.features, train_bank.features)
    if exclude_self:
        np.fill_diagonal(sim, -np.inf)
    pred = train_bank.labels[np.argmax(sim, axis=1)]
    return float((pred == test_bank.labels).mean())


def linear_probe(train_bank: FeatureBank, test_bank: FeatureBank,
                 c: float = 1.0, max_iter: int = 2000) -> float:
    """Regularized multinomial logistic regression on frozen features."""
    from sklearn.linear_model import LogisticRegression

    if len(np.unique(train_bank.labels)) < 2:
        raise ValueError("degenerate single-class training set")
    clf = LogisticRegression(C=c, max_iter=max_iter)
    clf.fit(train_bank.features, train_bank.labels)
    return float(clf.score(test_bank.features, test_bank.labels))


def equivariance_diagnostic(
    model: EquivarianceModel,
    videos: np.ndarray,
    n_probes: int = 512,
    seed: int = 0,
    config: TrainConfig | None = None,
) -> dict:
    """Relative-transform match accuracy of psi codes on freshly planned couples.

    For each code, the nearest other code (cosine) should belong to the same
    couple, i.e. share the relative transformation.
    """
    config = config or TrainConfig()
    rng = np.random.default_rng(seed)
    frame_hw = (videos.shape[2], videos.shape[3])
    codes, groups = [], []
    model.eval()
    with torch.no_grad():
        while len(groups) < 2 * n_probes:
            n_vid = min(len(videos) // 2 * 2, 16)
            idx = rng.choice(len(videos), size=n_vid, replace=False)
            plan = plan_batch(rng, idx, [videos.shape[1]] * n_vid, config, frame_hw)
            batch, labels = assemble_couple_clips(videos, plan, config)
            emb = model.backbone_forward(batch)
            psi = model.psi_forward(emb[0::2], emb[1::2])
            codes.append(psi.numpy())
            base = groups[-1] + 1 if groups else 0
            groups.extend(base + g for g in labels["pair_group_ids"])
    codes = np.concatenate(codes)[: 2 * n_probes]
    groups = np.asarray(groups[: 2 * n_probes])
    sim = _cosine_matrix(codes, codes)
    np.fill_diagonal(sim, -np.inf)
    nearest = np.argmax(sim, axis=1)
    match = float((groups[nearest] == groups).mean())
    return {"match_accuracy": match, "n_codes": len(codes)}


def aux_head_accuracies(
    model: EquivarianceModel,
    videos: np.ndarray,
    n_batches: int = 16,
    seed: int = 0,
    config: TrainConfig | None = None,
) -> dict:
    """Held-out accuracy of the speed/direction/overlap heads."""
    config = config or TrainConfig()
    rng = np.random.default_rng(seed)
    frame_hw = (videos.shape[2], videos.shape[3])
    correct = {"speed": 0, "direction": 0, "overlap": 0}
    totals = {"speed": 0, "direction": 0, "overlap": 0}
    model.eval()
    with torch.no_grad():
        for _ in range(n_batches):
            n_vid = min(len(videos) // 2 * 2, 16)
            idx = rng.choice(len(videos), size=n_vid, replace=False)
            plan = plan_batch(rng, idx, [videos.shape[1]] * n_vid, config, frame_hw)
            batch, labels = assemble_couple_clips(videos, plan, config)
            emb = model.backbone_forward(batch)
            preds = {
                "speed": model.head_speed(emb).argmax(dim=1),
                "direction": model.head_direction(emb).argmax(dim=1),
                "overlap": model.head_overlap(emb[0::2], emb[1::2]).argmax(dim=1),
            }
            for key in correct:
                correct[key] += int((preds[key] == labels[key]).sum())
                totals[key] += len(labels[key])
    return {key: correct[key] / totals[key] for key in correct}

"""Batch planning, optimization schedule, ablation presets and checkpointing.

A batch of videos is planned as couples of two videos that receive the
identical pair of temporal transforms (tau_p, tau_q), so both couple members
realize the same relative transformation. Equivariance grouping always uses
the couple identity, never descriptor equality, so accidental descriptor
collisions across couples cannot merge groups.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from .clipops import (
    Direction,
    SpatialAugmentation,
    TemporalTransform,
    apply_spatial,
    apply_temporal,
    overlap_order_label,
    relative_descriptor,
    sample_spatial_augmentation,
    sample_temporal_transform,
)
from .encoder import EncoderConfig, EquivarianceModel
from .objectives import (
    LossBreakdown,
    LossWeights,
    aux_losses,
    equivariance_loss,
    instance_loss,
    total_loss,
)

COLLISION_RESAMPLES = 10


@dataclass(frozen=True)
class TrainConfig:
    equivariance_set: tuple[str, ...] = ("temporal",)  # subset of {temporal, spatial}
    weights: LossWeights = field(default_factory=LossWeights)
    aux_tasks: tuple[str, ...] = ("speed", "rev", "order")
    batch_size: int = 16
    epochs: int = 10
    steps: int | None = None  # overrides epochs when set
    base_lr: float = 3e-4
    warmup_frac: float = 0.05
    weight_decay: float = 1e-4
    grad_clip: float = 10.0
    temperature: float = 0.1
    seed: int = 0
    clip_len: int = 16
    resolution: int = 32
    allowed_speeds: tuple[int, ...] = (0, 1, 2, 3)
    allow_reverse: bool = True
    distinctiveness_baseline: bool = False
    stage_widths: tuple[int, ...] = (8, 16, 32, 128)

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            clip_len=self.clip_len,
            input_resolution=self.resolution,
            stage_widths=tuple(self.stage_widths),
        )

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["weights"] = dataclasses.asdict(self.weights)
        return d

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        d = dict(d)
        d["weights"] = LossWeights(**d["weights"])
        for key in ("equivariance_set", "aux_tasks", "allowed_speeds", "stage_widths"):
            d[key] = tuple(d[key])
        return TrainConfig(**d)

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)


def _preset(equi=("temporal",), inst=1.0, equiw=1.0, aux=("speed", "rev", "order"),
            auxw=1.0, allow_reverse=True) -> TrainConfig:
    weights = LossWeights(
        equi=equiw,
        inst=inst,
        aux_speed=auxw if "speed" in aux else 0.0,
        aux_direction=auxw if "rev" in aux else 0.0,
        aux_overlap=auxw if "order" in aux else 0.0,
    )
    return TrainConfig(
        equivariance_set=tuple(equi),
        weights=weights,
        aux_tasks=tuple(aux) if auxw else (),
        allow_reverse=allow_reverse,
    )


# Ablation switch matrix: rows (a)-(d) vary the equivariance composition,
# (e)-(k) the objective combination, (l)-(o) the auxiliary task subset.
PRESETS: dict[str, TrainConfig] = {
    "a": _preset(equi=(), equiw=0.0, auxw=0.0),
    "b": _preset(equi=("spatial",), auxw=0.0),
    "c": _preset(equi=("spatial", "temporal")),
    "d": _preset(equi=("temporal",)),
    "e": _preset(equiw=0.0, auxw=0.0),
    "f": _preset(inst=0.0, auxw=0.0),
    "g": _preset(inst=0.0, equiw=0.0),
    "h": _preset(auxw=0.0),
    "i": _preset(equiw=0.0),
    "j": _preset(inst=0.0),
    "k": _preset(),
    "l": _preset(aux=("speed",), allow_reverse=False),
    "m": _preset(aux=("speed", "order"), allow_reverse=False),
    "n": _preset(aux=("speed", "rev")),
    "o": _preset(aux=("speed", "rev", "order")),
}


@dataclass
class Couple:
    """Two videos sharing the relative transformation of their clip pairs."""

    i: int
    j: int
    taus_i: tuple[TemporalTransform, TemporalTransform]
    taus_j: tuple[TemporalTransform, TemporalTransform]
    sigmas_i: tuple[SpatialAugmentation, SpatialAugmentation]
    sigmas_j: tuple[SpatialAugmentation, SpatialAugmentation]

    @property
    def tau_p(self) -> TemporalTransform:
        assert self.taus_i[0] == self.taus_j[0], "temporal transforms not shared"
        return self.taus_i[0]

    @property
    def tau_q(self) -> TemporalTransform:
        assert self.taus_i[1] == self.taus_j[1], "temporal transforms not shared"
        return self.taus_i[1]


BatchPlan = list


def _sample_tau_pair(rng, video_len, config: TrainConfig):
    kw = dict(
        video_len=video_len,
        clip_len=config.clip_len,
        allowed_speeds=config.allowed_speeds,
        allow_reverse=config.allow_reverse,
    )
    return sample_temporal_transform(rng, **kw), sample_temporal_transform(rng, **kw)


def plan_batch(
    rng: np.random.Generator,
    video_indices,
    video_lengths,
    config: TrainConfig,
    frame_hw: tuple[int, int],
) -> BatchPlan:
    """Randomly pair the batch videos and sample their shared transforms."""
    video_indices = list(video_indices)
    if len(video_indices) % 2 != 0:
        raise ValueError("batch size must be even")
    if len(video_indices) < 4:
        raise ValueError("batch size must be at least 4")
    lengths = {v: l for v, l in zip(video_indices, video_lengths)}
    order = [video_indices[t] for t in rng.permutation(len(video_indices))]

    temporal_equi = "temporal" in config.equivariance_set
    spatial_equi = "spatial" in config.equivariance_set

    couples: list[Couple] = []
    seen_descriptors: set = set()
    for i, j in zip(order[::2], order[1::2]):
        shared_len = min(lengths[i], lengths[j])
        if temporal_equi:
            tau_p, tau_q = _sample_tau_pair(rng, shared_len, config)
            for _ in range(COLLISION_RESAMPLES):
                if relative_descriptor(tau_p, tau_q) not in seen_descriptors:
                    break
                tau_p, tau_q = _sample_tau_pair(rng, shared_len, config)
            seen_descriptors.add(relative_descriptor(tau_p, tau_q))
            taus_i = taus_j = (tau_p, tau_q)
        elif spatial_equi:
            # consistent temporal augmentation within the couple removes
            # temporal ambiguity from the spatial-equivariance task
            tau = sample_temporal_transform(
                rng, shared_len, config.clip_len, config.allowed_speeds, config.allow_reverse
            )
            taus_i = taus_j = (tau, tau)
        else:
            taus_i = _sample_tau_pair(rng, lengths[i], config)
            taus_j = _sample_tau_pair(rng, lengths[j], config)

        if spatial_equi:
            sig_p = sample_spatial_augmentation(rng, frame_hw)
            sig_q = sample_spatial_augmentation(rng, frame_hw)
            sigmas_i = sigmas_j = (sig_p, sig_q)
        else:
            sigmas_i = tuple(sample_spatial_augmentation(rng, frame_hw) for _ in range(2))
            sigmas_j = tuple(sample_spatial_augmentation(rng, frame_hw) for _ in range(2))

        couples.append(Couple(i, j, taus_i, taus_j, sigmas_i, sigmas_j))
    return couples


def assemble_couple_clips(videos: np.ndarray, plan: BatchPlan, config: TrainConfig):
    """Materialize all clips of a plan.

    Returns (clips (B, C, T, H, W) float tensor, labels dict). Clip order per
    couple is (i_p, i_q, j_p, j_q).
    """
    clips, speed, direction, inst_ids = [], [], [], []
    overlap, couple_of_pair = [], []
    for c_idx, couple in enumerate(plan):
        for vid, taus, sigmas in (
            (couple.i, couple.taus_i, couple.sigmas_i),
            (couple.j, couple.taus_j, couple.sigmas_j),
        ):
            video = videos[vid].astype(np.float32) / 255.0
            for tau, sigma in zip(taus, sigmas):
                clip = apply_temporal(video, tau, config.clip_len)
                clip = apply_spatial(clip, sigma, out_size=config.resolution)
                clips.append(clip)
                speed.append(tau.speed_exponent)
                direction.append(0 if tau.direction is Direction.FORWARD else 1)
                inst_ids.append(vid)
            overlap.append(int(overlap_order_label(taus[0], taus[1], config.clip_len)))
            couple_of_pair.append(c_idx)
    batch = torch.from_numpy(np.stack(clips)).permute(0, 4, 1, 2, 3).contiguous()
    labels = {
        "speed": torch.tensor(speed, dtype=torch.long),
        "direction": torch.tensor(direction, dtype=torch.long),
        "overlap": torch.tensor(overlap, dtype=torch.long),
        "instance_ids": inst_ids,
        "pair_group_ids": couple_of_pair,  # one entry per (member) ordered pair
    }
    return batch, labels


def compute_losses(model: EquivarianceModel, batch: torch.Tensor, labels: dict,
                   config: TrainConfig) -> LossBreakdown:
    """Shared forward pass feeding all enabled objectives."""
    w = config.weights
    emb = model.backbone_forward(batch)
    # clips come in consecutive (p, q) pairs
    e_p, e_q = emb[0::2], emb[1::2]

    zero = torch.tensor(0.0)
    equi = zero
    if w.equi != 0.0:
        psi_codes = model.psi_forward(e_p, e_q)
        equi = equivariance_loss(psi_codes, labels["pair_group_ids"], config.temperature)

    inst = zero
    if w.inst != 0.0:
        phi_codes = model.phi_forward(emb)
        inst = instance_loss(phi_codes, labels["instance_ids"], config.temperature)

    speed_logits = model.head_speed(emb) if w.aux_speed != 0.0 else None
    dir_logits = model.head_direction(emb) if w.aux_direction != 0.0 else None
    ov_logits = model.head_overlap(e_p, e_q) if w.aux_overlap != 0.0 else None
    a_speed, a_dir, a_ov = aux_losses(
        speed_logits, labels["speed"] if speed_logits is not None else None,
        dir_logits, labels["direction"] if dir_logits is not None else None,
        ov_logits, labels["overlap"] if ov_logits is not None else None,
    )
    return total_loss(w, equi, inst, a_speed, a_dir, a_ov)


def plan_distinct_batch(rng, video_indices, video_lengths, config: TrainConfig):
    """Distinctiveness-only baseline plan: every temporal crop is its own instance.

    Each video contributes two temporal crops; each crop is rendered twice
    with independent spatial augmentations, giving the positive pair.
    """
    entries = []
    for vid, vlen in zip(video_indices, video_lengths):
        for slot in range(2):
            tau = sample_temporal_transform(
                rng, vlen, config.clip_len, config.allowed_speeds, config.allow_reverse
            )
            entries.append((vid, slot, tau))
    return entries


def assemble_distinct_clips(videos: np.ndarray, plan, rng, config: TrainConfig,
                            frame_hw: tuple[int, int]):
    clips, inst_ids = [], []
    for vid, slot, tau in plan:
        video = videos[vid].astype(np.float32) / 255.0
        base = apply_temporal(video, tau, config.clip_len)
        for _ in range(2):
            sigma = sample_spatial_augmentation(rng, frame_hw)
            clips.append(apply_spatial(base, sigma, out_size=config.resolution))
            inst_ids.append((vid, slot))
    batch = torch.from_numpy(np.stack(clips)).permute(0, 4, 1, 2, 3).contiguous()
    return batch, inst_ids


def learning_rate(step: int, total_steps: int, base_lr: float, warmup_frac: float) -> float:
    """Linear warmup to base_lr, then cosine decay to 0."""
    warmup = max(1, int(round(warmup_frac * total_steps)))
    if step < warmup:
        return base_lr * step / warmup
    progress = (step - warmup) / max(1, total_steps - warmup)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * min(progress, 1.0)))


class Trainer:
    """Owns the model, optimizer and rng streams for one run."""

    def __init__(self, videos: np.ndarray, config: TrainConfig, run_dir=None,
                 model: EquivarianceModel | None = None):
        self.videos = videos
        self.config = config
        self.run_dir = run_dir
        torch.manual_seed(config.seed)
        self.model = model or EquivarianceModel(config.encoder_config(), videos.shape[-1])
        self.optimizer = torch.optim.AdamW(
            self.model.parameters(), lr=config.base_lr, weight_decay=config.weight_decay
        )
        self.rng = np.random.default_rng(config.seed)
        self.step = 0
        n_batches = len(videos) // config.batch_size
        self.total_steps = (
            config.steps if config.steps is not None else config.epochs * max(1, n_batches)
        )
        if run_dir is not None:
            os.makedirs(run_dir, exist_ok=True)
        self._metrics_fh = None

    @property
    def frame_hw(self):
        return self.videos.shape[2], self.videos.shape[3]

    def _next_batch_indices(self):
        return self.rng.choice(len(self.videos), size=self.config.batch_size, replace=False)

    def train_step(self) -> LossBreakdown:
        cfg = self.config
        idx = self._next_batch_indices()
        lengths = [self.videos.shape[1]] * len(idx)
        lr = learning_rate(self.step, self.total_steps, cfg.base_lr, cfg.warmup_frac)
        for group in self.optimizer.param_groups:
            group["lr"] = lr

        self.model.train()
        if cfg.distinctiveness_baseline:
            plan = plan_distinct_batch(self.rng, idx, lengths, cfg)
            batch, inst_ids = assemble_distinct_clips(
                self.videos, plan, self.rng, cfg, self.frame_hw
            )
            emb = self.model.backbone_forward(batch)
            inst = instance_loss(self.model.phi_forward(emb), inst_ids, cfg.temperature)
            zero = torch.tensor(0.0)
            breakdown = total_loss(LossWeights(equi=0, inst=cfg.weights.inst,
                                               aux_speed=0, aux_direction=0, aux_overlap=0),
                                   zero, inst, zero, zero, zero)
        else:
            plan = plan_batch(self.rng, idx, lengths, cfg, self.frame_hw)
            batch, labels = assemble_couple_clips(self.videos, plan, cfg)
            breakdown = compute_losses(self.model, batch, labels, cfg)

        if not torch.isfinite(breakdown.total):
            self._dump_diagnostic(breakdown, plan)
            raise RuntimeError(f"non-finite loss at step {self.step}: {breakdown.to_floats()}")

        self.optimizer.zero_grad()
        if breakdown.total.requires_grad:
            breakdown.total.backward()
            torch.nn.utils.clip_grad_norm_(self.model.parameters(), cfg.grad_clip)
            self.optimizer.step()
        self._log_metrics(lr, breakdown)
        self.step += 1
        return breakdown

    def train(self, steps: int | None = None):
        target = self.total_steps if steps is None else self.step + steps
        while self.step < target:
            self.train_step()
        if self._metrics_fh is not None:
            self._metrics_fh.flush()

    def _log_metrics(self, lr: float, breakdown: LossBreakdown):
        if self.run_dir is None:
            return
        if self._metrics_fh is None:
            self._metrics_fh = open(os.path.join(self.run_dir, "metrics.jsonl"), "a")
        record = {"step": self.step, "lr": lr, **breakdown.to_floats()}
        self._metrics_fh.write(json.dumps(record) + "\n")

    def _dump_diagnostic(self, breakdown: LossBreakdown, plan):
        if self.run_dir is None:
            return
        dump = {
            "step": self.step,
            "losses": breakdown.to_floats(),
            "plan": [repr(entry) for entry in plan],
        }
        with open(os.path.join(self.run_dir, f"diagnostic_step{self.step}.json"), "w") as f:
            json.dump(dump, f, indent=2)

    def save_checkpoint(self, path):
        torch.save(
            {
                "encoder_config": self.model.config.to_dict(),
                "state_dict": self.model.state_dict(),
                "optimizer": self.optimizer.state_dict(),
                "step": self.step,
                "total_steps": self.total_steps,
                "train_config": self.config.to_dict(),
                "numpy_rng": self.rng.bit_generator.state,
                "torch_rng": torch.get_rng_state(),
            },
            path,
        )

    @staticmethod
    def load_checkpoint(path, videos: np.ndarray, run_dir=None) -> "Trainer":
        try:
            payload = torch.load(path, map_location="cpu", weights_only=False)
        except Exception as exc:
            raise ValueError(f"corrupt or unreadable checkpoint: {exc}") from exc
        required = {"state_dict", "optimizer", "step", "train_config", "numpy_rng"}
        if not isinstance(payload, dict) or not required.issubset(payload):
            raise ValueError("corrupt checkpoint: missing fields")
        config = TrainConfig.from_dict(payload["train_config"])
        trainer = Trainer(videos, config, run_dir=run_dir)
        trainer.model.load_state_dict(payload["state_dict"])
        trainer.optimizer.load_state_dict(payload["optimizer"])
        trainer.step = payload["step"]
        trainer.total_steps = payload["total_steps"]
        trainer.rng.bit_generator.state = payload["numpy_rng"]
        torch.set_rng_state(payload["torch_rng"])
        return trainer

"""Networks: 3D-conv backbone, projection MLPs and auxiliary heads.

The backbone is a small residual 3D CNN: a stem conv, then four stages of one
residual block each (two 3x3x3 convs + batch norm + ReLU), with stride-2
downsampling between stages. The representation is the output of global
average pooling. Convolutions carry no bias (they are followed by batch
norm), which also keeps an all-zero background exactly zero at initialization
in eval mode.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import torch
import torch.nn as nn
import torch.nn.functional as F

N_SPEED_CLASSES = 4  # 1x, 2x, 4x, 8x
N_DIRECTION_CLASSES = 2
N_OVERLAP_CLASSES = 3


@dataclass(frozen=True)
class EncoderConfig:
    clip_len: int = 16
    input_resolution: int = 32
    stage_widths: tuple[int, ...] = (8, 16, 32, 128)
    head_hidden: int | None = None  # defaults to embed_dim

    @property
    def embed_dim(self) -> int:
        return self.stage_widths[-1]

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "EncoderConfig":
        d = dict(d)
        d["stage_widths"] = tuple(d["stage_widths"])
        return EncoderConfig(**d)


class ResBlock3d(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv3d(channels, channels, 3, padding=1, bias=False)
        self.bn1 = nn.BatchNorm3d(channels)
        self.conv2 = nn.Conv3d(channels, channels, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm3d(channels)

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + x)


class VideoBackbone(nn.Module):
    """Residual 3D CNN; embedding = global average pool of the last stage."""

    def __init__(self, config: EncoderConfig, in_channels: int = 3):
        super().__init__()
        self.config = config
        w = config.stage_widths
        # stem downsamples spatially only, keeping the temporal extent for the
        # later stride-2 stages
        self.stem = nn.Sequential(
            nn.Conv3d(in_channels, w[0], 3, stride=(1, 2, 2), padding=1, bias=False),
            nn.BatchNorm3d(w[0]),
            nn.ReLU(inplace=True),
        )
        stages = [ResBlock3d(w[0])]
        for c_in, c_out in zip(w[:-1], w[1:]):
            stages.append(
                nn.Sequential(
                    nn.Conv3d(c_in, c_out, 3, stride=2, padding=1, bias=False),
                    nn.BatchNorm3d(c_out),
                    nn.ReLU(inplace=True),
                    ResBlock3d(c_out),
                )
            )
        self.stages = nn.Sequential(*stages)

    def forward_features(self, clips: torch.Tensor) -> torch.Tensor:
        """Pre-pool feature maps, (B, D, T', H', W')."""
        if clips.ndim != 5:
            raise ValueError("expected clips of shape (B, C, T, H, W)")
        return self.stages(self.stem(clips))

    def forward(self, clips: torch.Tensor) -> torch.Tensor:
        return self.forward_features(clips).mean(dim=(2, 3, 4))


def _mlp(in_dim: int, hidden: int, out_dim: int, n_hidden: int) -> nn.Sequential:
    layers: list[nn.Module] = []
    d = in_dim
    for _ in range(n_hidden):
        layers += [nn.Linear(d, hidden), nn.ReLU(inplace=True)]
        d = hidden
    layers.append(nn.Linear(d, out_dim))
    return nn.Sequential(*layers)


class EquivarianceModel(nn.Module):
    """Backbone F plus the psi/phi projections and the three auxiliary heads.

    psi encodes the ordered concatenation [F(clip_p); F(clip_q)] into a
    relative-transform code; phi projects a single embedding into an instance
    code. No parameters are shared between psi, phi and the heads.
    """

    def __init__(self, config: EncoderConfig | None = None, in_channels: int = 3):
        super().__init__()
        self.config = config or EncoderConfig()
        d = self.config.embed_dim
        hidden = self.config.head_hidden or d
        self.backbone = VideoBackbone(self.config, in_channels)
        self.psi = _mlp(2 * d, 2 * d, d, n_hidden=2)
        self.phi = _mlp(d, d, d, n_hidden=2)
        self.speed_head = _mlp(d, hidden, N_SPEED_CLASSES, n_hidden=1)
        self.direction_head = _mlp(d, hidden, N_DIRECTION_CLASSES, n_hidden=1)
        self.overlap_head = _mlp(2 * d, hidden, N_OVERLAP_CLASSES, n_hidden=1)

    def backbone_forward(self, clips: torch.Tensor) -> torch.Tensor:
        """Embeddings from a (B, C, T, H, W) batch of clips in [0, 1]."""
        return self.backbone(clips)

    def psi_forward(self, e_p: torch.Tensor, e_q: torch.Tensor) -> torch.Tensor:
        """Relative-transform code of the ordered embedding pair (p, q)."""
        return self.psi(torch.cat([e_p, e_q], dim=-1))

    def phi_forward(self, e: torch.Tensor) -> torch.Tensor:
        return self.phi(e)

    def head_speed(self, e: torch.Tensor) -> torch.Tensor:
        return self.speed_head(e)

    def head_direction(self, e: torch.Tensor) -> torch.Tensor:
        return self.direction_head(e)

    def head_overlap(self, e_p: torch.Tensor, e_q: torch.Tensor) -> torch.Tensor:
        return self.overlap_head(torch.cat([e_p, e_q], dim=-1))


def save_model(path, model: EquivarianceModel, step: int = 0, extra: dict | None = None):
    """Single-archive checkpoint: named parameter arrays + config + step."""
    payload = {
        "encoder_config": model.config.to_dict(),
        "state_dict": model.state_dict(),
        "step": step,
    }
    if extra:
        payload.update(extra)
    torch.save(payload, path)


def load_model(path, in_channels: int = 3) -> tuple[EquivarianceModel, dict]:
    """Restore a model checkpoint; returns (model, full payload)."""
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise ValueError(f"corrupt or unreadable checkpoint: {exc}") from exc
    if not isinstance(payload, dict) or "state_dict" not in payload:
        raise ValueError("corrupt checkpoint: missing state_dict")
    config = EncoderConfig.from_dict(payload["encoder_config"])
    model = EquivarianceModel(config, in_channels)
    model.load_state_dict(payload["state_dict"])
    return model, payload

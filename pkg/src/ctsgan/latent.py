"""Per-volume latent plans: a constant patient code plus a BiLSTM-sequenced slice code."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
import torch
from torch import nn


@dataclass(frozen=True)
class LatentConfig:
    d_patient: int = 32
    d_slice: int = 32
    d_eps: int = 16
    hidden: int = 64
    seq_len: int = 30

    def __post_init__(self):
        for name, val in asdict(self).items():
            if int(val) < 1:
                raise ValueError(f"{name} must be >= 1, got {val}")

    @property
    def latent_dim(self) -> int:
        return self.d_patient + self.d_slice


@dataclass(frozen=True)
class VolumeNoise:
    """The random inputs that fully determine one volume's latent plan."""

    z_patient: np.ndarray  # (d_patient,)
    h0: np.ndarray  # (2, hidden): forward and backward initial states
    eps: np.ndarray  # (seq_len, d_eps)


@dataclass(frozen=True)
class LatentPlan:
    z_patient: np.ndarray
    z_slices: np.ndarray  # (seq_len, d_slice)

    @property
    def concatenated(self) -> np.ndarray:
        tiled = np.broadcast_to(self.z_patient, (len(self.z_slices), len(self.z_patient)))
        return np.concatenate([tiled, self.z_slices], axis=1)


class SliceSequencer(nn.Module):
    """Bidirectional LSTM over per-step noise with a linear head to the slice code.

    Each step also sees its relative depth ``t / (L - 1)`` so the slice code
    can follow anatomy along the scan axis.
    """

    def __init__(self, cfg: LatentConfig):
        super().__init__()
        self.cfg = cfg
        self.lstm = nn.LSTM(cfg.d_eps + 1, cfg.hidden, batch_first=True, bidirectional=True)
        self.head = nn.Linear(2 * cfg.hidden, cfg.d_slice)

    def forward(self, eps: torch.Tensor, h0: torch.Tensor) -> torch.Tensor:
        # eps: (B, L, d_eps), h0: (2, B, hidden) -> (B, L, d_slice)
        if eps.shape[-1] != self.cfg.d_eps or h0.shape[-1] != self.cfg.hidden or h0.shape[0] != 2:
            raise ValueError(
                f"sequencer expects eps[..., {self.cfg.d_eps}] and h0[2, B, {self.cfg.hidden}], "
                f"got {tuple(eps.shape)} and {tuple(h0.shape)}"
            )
        B, L = eps.shape[:2]
        depth = torch.linspace(0.0, 1.0, L, dtype=eps.dtype).view(1, L, 1).expand(B, L, 1)
        out, _ = self.lstm(torch.cat([eps, depth], 2), (h0, torch.zeros_like(h0)))
        return self.head(out)


def sample_patient_noise(rng: np.random.Generator, d_patient: int) -> np.ndarray:
    if d_patient < 1:
        raise ValueError("d_patient must be >= 1")
    return rng.standard_normal(d_patient).astype(np.float32)


def sample_volume_noise(cfg: LatentConfig, rng: np.random.Generator) -> VolumeNoise:
    z = sample_patient_noise(rng, cfg.d_patient)
    h0 = rng.standard_normal((2, cfg.hidden)).astype(np.float32)
    eps = rng.standard_normal((cfg.seq_len, cfg.d_eps)).astype(np.float32)
    return VolumeNoise(z, h0, eps)


def sequence_slice_noise(sequencer: SliceSequencer, eps, h0) -> np.ndarray:
    """Run the sequencer on one volume's noise; returns ``(len(eps), d_slice)``."""
    eps_t = torch.as_tensor(np.asarray(eps, dtype=np.float32))
    h0_t = torch.as_tensor(np.asarray(h0, dtype=np.float32))
    if eps_t.ndim != 2 or h0_t.shape != (2, sequencer.cfg.hidden):
        raise ValueError(f"bad eps/h0 shapes {tuple(eps_t.shape)}, {tuple(h0_t.shape)}")
    with torch.no_grad():
        out = sequencer(eps_t[None], h0_t[:, None])
    return out[0].numpy()


def build_latent_plan(
    cfg: LatentConfig,
    rng: np.random.Generator,
    sequencer: SliceSequencer,
    noise: Optional[VolumeNoise] = None,
) -> LatentPlan:
    noise = noise or sample_volume_noise(cfg, rng)
    return LatentPlan(noise.z_patient, sequence_slice_noise(sequencer, noise.eps, noise.h0))


def latent_batch(sequencer: SliceSequencer, noises) -> torch.Tensor:
    """Differentiable ``(B, seq_len, d_patient + d_slice)`` latents for a batch of volumes."""
    z = torch.as_tensor(np.stack([n.z_patient for n in noises]))
    eps = torch.as_tensor(np.stack([n.eps for n in noises]))
    h0 = torch.as_tensor(np.stack([n.h0 for n in noises], axis=1))
    z_slices = sequencer(eps, h0)
    return torch.cat([z[:, None].expand(-1, z_slices.shape[1], -1), z_slices], dim=2)

"""Adversarial objectives, the R1 penalty, and the alternating D/G update."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from ctsgan.latent import latent_batch, sample_volume_noise
from ctsgan.sgan import ModelState, assemble_planes

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    pass


class PenaltyConfigurationError(RuntimeError):
    pass


@dataclass
class BatchScores:
    slice_real: torch.Tensor  # (N, B)
    slice_fake: torch.Tensor  # (N, B)
    slab_real: torch.Tensor  # (B,)
    slab_fake: torch.Tensor  # (B,)

    def __post_init__(self):
        for name in ("slice_real", "slice_fake", "slab_real", "slab_fake"):
            t = getattr(self, name)
            if not torch.is_tensor(t):
                t = torch.as_tensor(np.asarray(t, dtype=np.float64))
            if not torch.isfinite(t).all():
                raise FloatingPointError(f"non-finite values in {name}")
            setattr(self, name, t)
        if self.slice_real.ndim != 2 or self.slice_real.shape[0] != self.slice_fake.shape[0]:
            raise ValueError("slice scores must be (N, batch) with matching N")

    @property
    def N(self) -> int:
        return self.slice_real.shape[0]


@dataclass
class LossReport:
    f_volume: torch.Tensor
    d_loss: torch.Tensor
    g_loss: torch.Tensor
    gp: torch.Tensor
    loss_kind: str

    def as_dict(self) -> dict:
        return {
            "f_volume": float(self.f_volume.detach()),
            "d_loss": float(self.d_loss.detach()),
            "g_loss": float(self.g_loss.detach()),
            "gp": float(self.gp.detach()),
            "loss_kind": self.loss_kind,
        }


def js_objective(scores: BatchScores) -> LossReport:
    """Cross-entropy objective on sigmoid(score), summed over the N slice terms plus the slab term.

    ``-log sigmoid(s) = softplus(-s)`` and ``-log(1 - sigmoid(s)) = softplus(s)``,
    which stays finite for any finite score. The generator uses the
    non-saturating form ``-log D(fake)``.
    """
    f_volume = (
        F.softplus(-scores.slice_real).mean(dim=1).sum()
        + F.softplus(scores.slice_fake).mean(dim=1).sum()
        + F.softplus(-scores.slab_real).mean()
        + F.softplus(scores.slab_fake).mean()
    )
    g_loss = F.softplus(-scores.slice_fake).mean(dim=1).sum() + F.softplus(-scores.slab_fake).mean()
    zero = torch.zeros((), dtype=f_volume.dtype)
    return LossReport(f_volume, f_volume, g_loss, zero, "js")


def wasserstein_objective(scores: BatchScores) -> LossReport:
    critic = (
        (scores.slice_fake.mean(dim=1) - scores.slice_real.mean(dim=1)).sum()
        + scores.slab_fake.mean()
        - scores.slab_real.mean()
    )
    g_loss = -(scores.slice_fake.mean(dim=1).sum() + scores.slab_fake.mean())
    zero = torch.zeros((), dtype=critic.dtype)
    return LossReport(critic, critic, g_loss, zero, "wasserstein")


OBJECTIVES = {"js": js_objective, "wasserstein": wasserstein_objective}


def gradient_penalty(disc: Callable, real_inputs: torch.Tensor, gamma: float, *args) -> torch.Tensor:
    """R1 penalty ``gamma/2 * E ||grad_x D(x)||^2`` at real samples.

    Extra positional ``args`` are forwarded to ``disc`` and are not differentiated.
    """
    if gamma <= 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    x = real_inputs.detach().clone().requires_grad_(True)
    out = disc(x, *args)
    if not torch.is_tensor(out) or not out.requires_grad:
        raise PenaltyConfigurationError("discriminator output is not differentiable w.r.t. its input")
    (grad,) = torch.autograd.grad(out.sum(), x, create_graph=True, allow_unused=True)
    if grad is None:
        return torch.zeros((), dtype=x.dtype)
    return 0.5 * gamma * grad.pow(2).flatten(1).sum(dim=1).mean()


# ------------------------------------------------------------------ training


def _as_batch(real_batch) -> torch.Tensor:
    if torch.is_tensor(real_batch):
        return real_batch.float()
    arrs = [np.asarray(getattr(v, "voxels", v), dtype=np.float32) for v in real_batch]
    return torch.as_tensor(np.stack(arrs))


def _draw_positions(rng: np.random.Generator, B: int, S: int, T: int, N: int):
    starts = rng.integers(0, S - T + 1, size=B)
    # Slice3 centers strictly inside each slab, (N, B)
    centers = starts[None, :] + rng.integers(1, T - 1, size=(N, B))
    return starts, centers


def _slice_stack(vols: torch.Tensor, centers: np.ndarray) -> torch.Tensor:
    # vols (B, S, H, W), centers (N, B) -> (N*B, 3, H, W) in N-major order
    N, B = centers.shape
    rows = []
    for i in range(N):
        for b in range(B):
            c = int(centers[i, b])
            rows.append(vols[b, c - 1 : c + 2])
    return torch.stack(rows)


def _fake_slice_stack(fake_slices: torch.Tensor, centers: np.ndarray) -> torch.Tensor:
    # fake_slices (B, L, 3, H, W) with slice k holding center k + 1
    N, B = centers.shape
    return torch.stack([fake_slices[b, int(centers[i, b]) - 1] for i in range(N) for b in range(B)])


def _slab_stack(vols: torch.Tensor, starts: np.ndarray, T: int) -> torch.Tensor:
    return torch.stack([vols[b, int(s) : int(s) + T] for b, s in enumerate(starts)])


def _generate_fakes(state: ModelState, rng: np.random.Generator, B: int):
    cfg = state.config
    noises = [sample_volume_noise(cfg.latent, rng) for _ in range(B)]
    z = latent_batch(state.sequencer, noises)
    L = z.shape[1]
    slices = state.generator(z.reshape(B * L, -1))
    slices = slices.reshape(B, L, *slices.shape[1:])
    return slices, assemble_planes(slices)


def _scores(state: ModelState, vols, slices_flat, slabs, centers) -> tuple:
    cfg = state.config
    N, B = centers.shape
    s = state.d_slice(slices_flat, centers.reshape(-1), cfg.S).reshape(N, B)
    return s, state.d_slab(slabs)


def _set_requires_grad(modules, flag: bool) -> None:
    for m in modules:
        for p in m.parameters():
            p.requires_grad_(flag)


def alternating_step(state: ModelState, real_batch, rng: np.random.Generator) -> dict:
    """One discriminator update followed by one generator/sequencer update.

    Mutates ``state`` in place and returns the step's loss values.
    """
    cfg = state.config
    real = _as_batch(real_batch)
    B, S = real.shape[0], real.shape[1]
    if S != cfg.S:
        raise ValueError(f"real volumes have depth {S}, model expects {cfg.S}")
    objective = OBJECTIVES[cfg.loss_kind]
    discs = (state.d_slice, state.d_slab)
    gens = (state.generator, state.sequencer)

    # D phase: generator and sequencer are only evaluated
    _set_requires_grad(discs, True)
    _set_requires_grad(gens, False)
    starts_r, centers_r = _draw_positions(rng, B, S, cfg.T, cfg.N)
    starts_f, centers_f = _draw_positions(rng, B, S, cfg.T, cfg.N)
    with torch.no_grad():
        fake_slices, fake_vols = _generate_fakes(state, rng, B)
    real_slices = _slice_stack(real, centers_r)
    real_slabs = _slab_stack(real, starts_r, cfg.T)
    sr, br = _scores(state, real, real_slices, real_slabs, centers_r)
    sf, bf = _scores(state, fake_vols, _fake_slice_stack(fake_slices, centers_f),
                     _slab_stack(fake_vols, starts_f, cfg.T), centers_f)
    report = objective(BatchScores(sr, sf, br, bf))
    gp = gradient_penalty(state.d_slice, real_slices, cfg.gamma, centers_r.reshape(-1), cfg.S)
    gp = gp + gradient_penalty(state.d_slab, real_slabs, cfg.gamma)
    d_loss = report.d_loss + gp
    if not torch.isfinite(d_loss):
        raise TrainingDiverged(f"non-finite discriminator loss at step {state.step}")
    state.opt_d.zero_grad(set_to_none=True)
    d_loss.backward()
    state.opt_d.step()

    # G phase: discriminators are only evaluated
    _set_requires_grad(discs, False)
    _set_requires_grad(gens, True)
    starts_f, centers_f = _draw_positions(rng, B, S, cfg.T, cfg.N)
    fake_slices, fake_vols = _generate_fakes(state, rng, B)
    sf, bf = _scores(state, fake_vols, _fake_slice_stack(fake_slices, centers_f),
                     _slab_stack(fake_vols, starts_f, cfg.T), centers_f)
    zeros_slice = torch.zeros_like(sf.detach())
    zeros_slab = torch.zeros_like(bf.detach())
    g_report = objective(BatchScores(zeros_slice, sf, zeros_slab, bf))
    g_loss = g_report.g_loss
    if not torch.isfinite(g_loss):
        raise TrainingDiverged(f"non-finite generator loss at step {state.step}")
    state.opt_g.zero_grad(set_to_none=True)
    g_loss.backward()
    state.opt_g.step()
    _set_requires_grad(discs, True)

    state.step += 1
    return {
        "step": state.step,
        "f_volume": float(report.f_volume.detach()),
        "d_loss": float(d_loss.detach()),
        "g_loss": float(g_loss.detach()),
        "gp": float(gp.detach()),
        "loss_kind": cfg.loss_kind,
    }


def train(
    state: ModelState,
    corpus: Sequence,
    steps: int,
    seed: int = 0,
    log_stream=None,
    log_every: int = 1,
    callback: Optional[Callable[[ModelState, dict], None]] = None,
) -> ModelState:
    """Run ``steps`` alternating updates on minibatches drawn from ``corpus``.

    ``log_stream`` receives one JSON object per logged step.
    """
    vols = torch.as_tensor(np.stack([np.asarray(getattr(v, "voxels", v), dtype=np.float32) for v in corpus]))
    rng = np.random.default_rng(seed)
    B = state.config.batch_size
    for _ in range(steps):
        t0 = time.perf_counter()
        idx = rng.choice(len(vols), size=B, replace=len(vols) < B)
        rec = alternating_step(state, vols[idx], rng)
        rec["wall_ms"] = round(1000 * (time.perf_counter() - t0), 3)
        if log_stream is not None and state.step % log_every == 0:
            out = {k: rec[k] for k in ("step", "d_loss", "g_loss", "gp", "loss_kind", "wall_ms")}
            log_stream.write(json.dumps(out) + "\n")
        if callback is not None:
            callback(state, rec)
    return state

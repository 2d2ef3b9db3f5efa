"""Slice generator, slice and slab discriminators, volume assembly, and checkpoints."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn

from ctsgan.latent import LatentConfig, SliceSequencer, build_latent_plan
from ctsgan.serialization import FORMAT_VERSION as CHECKPOINT_FORMAT_VERSION
from ctsgan.serialization import read_blob, write_blob
from ctsgan.voldata import Slab, Slice3, Volume

NETWORKS = ("generator", "sequencer", "d_slice", "d_slab")


class AssemblyError(ValueError):
    pass


@dataclass(frozen=True)
class SGANConfig:
    """Everything needed to rebuild a model; serialized into checkpoints."""

    S: int = 32
    T: int = 8
    N: int = 4
    latent: LatentConfig = field(default_factory=LatentConfig)
    gen_base: int = 4
    gen_stages: Tuple[Tuple[int, int], ...] = ((64, 2), (32, 2), (16, 2))
    slice_disc_stages: Tuple[Tuple[int, int], ...] = ((16, 2), (32, 2), (64, 2))
    slab_disc_stages: Tuple[Tuple[int, int], ...] = ((8, 2), (16, 2), (32, 2))
    loss_kind: str = "js"
    gamma: float = 1.0
    lr: float = 2e-4
    betas: Tuple[float, float] = (0.5, 0.999)
    batch_size: int = 8
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.latent, dict):
            object.__setattr__(self, "latent", LatentConfig(**self.latent))
        for name in ("gen_stages", "slice_disc_stages", "slab_disc_stages", "betas"):
            val = getattr(self, name)
            object.__setattr__(self, name, tuple(tuple(v) if isinstance(v, list) else v for v in val))
        if self.latent.seq_len != self.S - 2:
            object.__setattr__(self, "latent", LatentConfig(**{**asdict(self.latent), "seq_len": self.S - 2}))
        if self.loss_kind not in ("js", "wasserstein"):
            raise ValueError(f"loss_kind must be js or wasserstein, got {self.loss_kind}")
        if not 3 <= self.T <= self.S:
            raise ValueError(f"slab length T={self.T} must be in [3, S]")

    @property
    def out_hw(self) -> int:
        return self.gen_base * int(np.prod([s for _, s in self.gen_stages]))

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, d: dict) -> "SGANConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


# ------------------------------------------------------------------ networks


class SliceGenerator(nn.Module):
    """Maps a latent vector to a 3-plane slice in [0, 1] via transposed convolutions."""

    def __init__(self, latent_dim: int, stages, base: int = 4, channels: int = 3):
        super().__init__()
        self.latent_dim = latent_dim
        c0 = stages[0][0]
        self.base = base
        self.c0 = c0
        self.fc = nn.Linear(latent_dim, c0 * base * base)
        layers: List[nn.Module] = []
        cin = c0
        for i, (cout, stride) in enumerate(stages):
            cnext = stages[i + 1][0] if i + 1 < len(stages) else cout
            if stride == 2:
                layers.append(nn.ConvTranspose2d(cin, cnext, 4, 2, 1))
            else:
                layers.append(nn.Conv2d(cin, cnext, 3, 1, 1))
            layers.append(nn.LeakyReLU(0.2))
            cin = cnext
        layers += [nn.Conv2d(cin, channels, 3, 1, 1), nn.Sigmoid()]
        self.net = nn.Sequential(*layers)
        self._init_weights()

    def _init_weights(self):
        # He init with zero biases; the library default shrinks the latent
        # signal layer by layer until the output barely depends on z.
        for m in self.modules():
            if isinstance(m, (nn.Linear, nn.Conv2d)):
                nn.init.kaiming_normal_(m.weight, a=0.2)
            elif isinstance(m, nn.ConvTranspose2d):
                # stride-2 transposed conv: each output sees a quarter of the kernel taps
                nn.init.kaiming_normal_(m.weight, a=0.2, mode="fan_out")
                m.weight.data.mul_(2.0)
            else:
                continue
            nn.init.zeros_(m.bias)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if z.shape[-1] != self.latent_dim:
            raise ValueError(f"latent must have {self.latent_dim} entries, got {z.shape[-1]}")
        h = torch.nn.functional.leaky_relu(self.fc(z), 0.2)
        return self.net(h.view(-1, self.c0, self.base, self.base))


def _with_batch_spread(h: torch.Tensor) -> torch.Tensor:
    """Append the batch-wide mean feature std as one extra input to the head.

    A generator that ignores its noise produces a batch with no spread, which
    this feature makes visible to the discriminator.
    """
    h = h.flatten(1)
    spread = (h.var(0, unbiased=False) + 1e-8).sqrt().mean() if len(h) > 1 else h.new_zeros(())
    return torch.cat([h, spread.expand(len(h), 1)], 1)


class SliceDiscriminator(nn.Module):
    """Scores a Slice3; the slice position enters as a constant extra channel."""

    def __init__(self, hw: int, stages, in_channels: int = 3):
        super().__init__()
        self.hw = hw
        self.in_channels = in_channels
        layers: List[nn.Module] = []
        cin = in_channels + 1
        for cout, stride in stages:
            layers += [nn.Conv2d(cin, cout, 4 if stride == 2 else 3, stride, 1), nn.LeakyReLU(0.2)]
            cin = cout
        self.features = nn.Sequential(*layers)
        with torch.no_grad():
            n = self.features(torch.zeros(1, in_channels + 1, hw, hw)).numel()
        self.head = nn.Linear(n + 1, 1)

    def forward(self, x: torch.Tensor, position, depth: int) -> torch.Tensor:
        if x.shape[1:] != (self.in_channels, self.hw, self.hw):
            raise ValueError(f"expected (B, {self.in_channels}, {self.hw}, {self.hw}), got {tuple(x.shape)}")
        pos = torch.as_tensor(position, dtype=x.dtype).reshape(-1, 1, 1, 1) / (depth - 1)
        x = torch.cat([x, pos.expand(x.shape[0], 1, self.hw, self.hw)], dim=1)
        return self.head(_with_batch_spread(self.features(x))).squeeze(1)


class SlabDiscriminator(nn.Module):
    """Scores a T-plane slab with 3D convolutions."""

    def __init__(self, T: int, hw: int, stages):
        super().__init__()
        self.T = T
        self.hw = hw
        layers: List[nn.Module] = []
        cin = 1
        for cout, stride in stages:
            layers += [nn.Conv3d(cin, cout, 4 if stride == 2 else 3, stride, 1), nn.LeakyReLU(0.2)]
            cin = cout
        self.features = nn.Sequential(*layers)
        with torch.no_grad():
            n = self.features(torch.zeros(1, 1, T, hw, hw)).numel()
        self.head = nn.Linear(n + 1, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: (B, T, H, W)
        if x.shape[1:] != (self.T, self.hw, self.hw):
            raise ValueError(f"expected slab (B, {self.T}, {self.hw}, {self.hw}), got {tuple(x.shape)}")
        return self.head(_with_batch_spread(self.features(x[:, None]))).squeeze(1)


# -------------------------------------------------------------------- state


@dataclass
class ModelState:
    config: SGANConfig
    generator: SliceGenerator
    sequencer: SliceSequencer
    d_slice: SliceDiscriminator
    d_slab: SlabDiscriminator
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    step: int = 0

    def networks(self):
        return {name: getattr(self, name) for name in NETWORKS}


def build_model(config: SGANConfig) -> ModelState:
    torch.manual_seed(config.seed)
    hw = config.out_hw
    gen = SliceGenerator(config.latent.latent_dim, config.gen_stages, base=config.gen_base)
    seq = SliceSequencer(config.latent)
    d_slice = SliceDiscriminator(hw, config.slice_disc_stages)
    d_slab = SlabDiscriminator(config.T, hw, config.slab_disc_stages)
    opt_g = torch.optim.Adam(list(gen.parameters()) + list(seq.parameters()), lr=config.lr, betas=config.betas)
    opt_d = torch.optim.Adam(list(d_slice.parameters()) + list(d_slab.parameters()), lr=config.lr, betas=config.betas)
    return ModelState(config, gen, seq, d_slice, d_slab, opt_g, opt_d)


# ---------------------------------------------------------------- inference


def generate_slice(gen: SliceGenerator, z) -> np.ndarray:
    """Single latent vector -> ``(3, hw, hw)`` slice."""
    z = torch.as_tensor(np.asarray(z, dtype=np.float32))
    if z.ndim != 1:
        raise ValueError("generate_slice takes a single latent vector")
    with torch.no_grad():
        return gen(z[None])[0].numpy()


def assemble_planes(slices: torch.Tensor) -> torch.Tensor:
    """``(B, L, 3, H, W)`` consecutive slices -> ``(B, L + 2, H, W)`` volumes."""
    return torch.cat([slices[:, :1, 0], slices[:, :, 1], slices[:, -1:, 2]], dim=1)


def assemble_volume(slices: Sequence[Slice3], provenance: str = "synthetic", id: str = "") -> Volume:
    """Pile the center planes; the outer planes of the end slices close the volume."""
    if not slices:
        raise AssemblyError("no slices to assemble")
    shape = slices[0].planes.shape
    for k, s in enumerate(slices, start=1):
        if s.center_index != k:
            raise AssemblyError(f"expected center index {k}, found {s.center_index}")
        if s.planes.shape != shape:
            raise AssemblyError(f"slice {k} has shape {s.planes.shape}, expected {shape}")
    planes = [slices[0].planes[0]] + [s.planes[1] for s in slices] + [slices[-1].planes[2]]
    return Volume(np.stack(planes), provenance=provenance, id=id)


def generate_volume(model: ModelState, seed: int, S: Optional[int] = None) -> Volume:
    cfg = model.config
    if S is not None and S != cfg.S:
        raise ValueError(f"model is configured for depth {cfg.S}, not {S}")
    plan = build_latent_plan(cfg.latent, np.random.default_rng(seed), model.sequencer)
    with torch.no_grad():
        out = model.generator(torch.as_tensor(plan.concatenated, dtype=torch.float32)).numpy()
    slices = [Slice3(out[i], i + 1) for i in range(len(out))]
    return assemble_volume(slices, provenance="synthetic", id=f"synthetic-{seed}")


def discriminate_slice(disc: SliceDiscriminator, s: Slice3, position: int, depth: int) -> float:
    if position != s.center_index:
        raise ValueError(f"position {position} does not match center index {s.center_index}")
    with torch.no_grad():
        x = torch.as_tensor(np.asarray(s.planes, dtype=np.float32))[None]
        return float(disc(x, [position], depth)[0])


def discriminate_slab(disc: SlabDiscriminator, slab: Slab) -> float:
    if slab.T != disc.T:
        raise ValueError(f"slab has {slab.T} planes, discriminator expects {disc.T}")
    with torch.no_grad():
        return float(disc(torch.as_tensor(np.asarray(slab.planes, dtype=np.float32))[None])[0])


# --------------------------------------------------------------- checkpoint


def _optimizer_tensors(opt: torch.optim.Optimizer) -> dict:
    out = {}
    for idx, st in opt.state_dict()["state"].items():
        for key, val in st.items():
            out[f"{idx}.{key}"] = torch.as_tensor(val, dtype=torch.float32)
    return out


def _load_optimizer(opt: torch.optim.Optimizer, tensors: dict, manifest: dict) -> None:
    state: dict = {}
    for name, t in tensors.items():
        idx, key = name.split(".", 1)
        state.setdefault(int(idx), {})[key] = t.reshape(()) if key == "step" else t
    opt.load_state_dict({"state": state, "param_groups": manifest["param_groups"]})


def save_checkpoint(model: ModelState, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    meta = {"format_version": CHECKPOINT_FORMAT_VERSION, "step": model.step, "config": model.config.to_dict()}
    (d / "config.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    for name, net in model.networks().items():
        write_blob(net.state_dict(), d / name)
    for name in ("opt_g", "opt_d"):
        opt = getattr(model, name)
        write_blob(_optimizer_tensors(opt), d / name, {"param_groups": opt.state_dict()["param_groups"]})
    return d


def load_checkpoint(directory) -> ModelState:
    d = Path(directory)
    meta = json.loads((d / "config.json").read_text())
    if meta.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format_version {meta.get('format_version')}")
    model = build_model(SGANConfig.from_dict(meta["config"]))
    for name, net in model.networks().items():
        tensors, _ = read_blob(d / name)
        net.load_state_dict(tensors)
    for name in ("opt_g", "opt_d"):
        if (d / f"{name}.json").exists():
            tensors, manifest = read_blob(d / name)
            _load_optimizer(getattr(model, name), tensors, manifest)
    model.step = int(meta["step"])
    return model

"""Nodule injection and erasure on volumes of interest, and the mixed-domain dataset build.

Both the injector and the eraser are small 3D conditional GANs that fill a
central sphere of a cubic VOI. Outside that sphere the VOI is carried
through untouched, and outside the VOI the host volume is never written.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from scipy import ndimage
import torch.nn.functional as F
from torch import nn

from ctsgan.losses import gradient_penalty
from ctsgan.serialization import load_module, save_module
from ctsgan.voldata import Volume, phantom_corpus, save_volume

DEFAULT_VOI_EDGE = 16
COUNT_DIST = {1: 0.3, 2: 0.4, 3: 0.2, 4: 0.1}
MASK_MARGIN = 1.5
MANIFEST_FORMAT_VERSION = 1


class PlacementError(ValueError):
    pass


class StratificationError(ValueError):
    pass


@dataclass(frozen=True)
class VOI:
    cube: np.ndarray
    origin: Tuple[int, int, int]

    @property
    def E(self) -> int:
        return self.cube.shape[0]


@dataclass(frozen=True)
class NoduleSpec:
    center: Tuple[int, int, int]
    radius_vox: float
    intensity: float = 0.65


@dataclass
class Case:
    """A volume plus the annotations the nodule tools need."""

    volume: Volume
    lung_mask: np.ndarray
    nodules: List[NoduleSpec] = field(default_factory=list)
    domain: str = ""


# ---------------------------------------------------------------- VOI ops


def mask_radius(radius_vox: float) -> float:
    return radius_vox + MASK_MARGIN


def voi_edge(radius_vox: float, default: int = DEFAULT_VOI_EDGE) -> int:
    """Smallest multiple of 4 (>= default) whose half-width exceeds the mask radius."""
    need = 2 * math.floor(mask_radius(radius_vox)) + 2
    return max(default, 4 * math.ceil(need / 4))


def extract_voi(v: Volume, center, E: int = DEFAULT_VOI_EDGE) -> VOI:
    if E % 2:
        raise ValueError(f"VOI edge must be even, got {E}")
    origin = tuple(int(round(c)) - E // 2 for c in center)
    for o, n in zip(origin, v.shape):
        if o < 0 or o + E > n:
            raise IndexError(f"VOI of edge {E} at {tuple(center)} leaves volume {v.shape}")
    z, y, x = origin
    return VOI(np.array(v.voxels[z : z + E, y : y + E, x : x + E]), origin)


def paste_back(v: Volume, voi: VOI, provenance: Optional[str] = None) -> Volume:
    z, y, x = voi.origin
    E = voi.E
    if min(voi.origin) < 0 or any(o + E > n for o, n in zip(voi.origin, v.shape)):
        raise IndexError(f"VOI at {voi.origin} with edge {E} leaves volume {v.shape}")
    out = np.array(v.voxels)
    out[z : z + E, y : y + E, x : x + E] = voi.cube
    return v.with_voxels(out, provenance)


def sphere_mask(E: int, radius: float) -> np.ndarray:
    """Voxels strictly closer than ``radius`` to the VOI center voxel ``E // 2``."""
    g = np.arange(E) - E // 2
    d2 = g[:, None, None] ** 2 + g[None, :, None] ** 2 + g[None, None, :] ** 2
    return d2 < radius**2


def mask_center(voi: VOI, radius: float) -> VOI:
    if radius < 0 or radius >= voi.E / 2:
        raise ValueError(f"mask radius {radius} must be in [0, {voi.E / 2})")
    cube = np.array(voi.cube)
    cube[sphere_mask(voi.E, radius)] = 0.0
    return VOI(cube, voi.origin)


def nodule_profile(E: int, radius: float) -> np.ndarray:
    """Solid core up to ``radius - 1`` with a smoothstep edge reaching zero at ``radius + 1``."""
    g = np.arange(E) - E // 2
    d = np.sqrt(g[:, None, None] ** 2 + g[None, :, None] ** 2 + g[None, None, :] ** 2)
    t = np.clip((radius + 1.0 - d) / 2.0, 0.0, 1.0)
    return t * t * (3 - 2 * t)


def add_procedural_nodule(v: Volume, spec: NoduleSpec) -> Volume:
    """Blend a smooth bright sphere into the volume; stands in for an annotated real nodule."""
    voi = extract_voi(v, spec.center, voi_edge(spec.radius_vox))
    f = nodule_profile(voi.E, spec.radius_vox)
    cube = voi.cube + f * (spec.intensity - voi.cube)
    return paste_back(v, VOI(cube.astype(np.float32), voi.origin))


# ---------------------------------------------------------------- networks


class InpaintNet(nn.Module):
    """Two-level 3D U-Net; input channels are (VOI, mask[, noise])."""

    def __init__(self, in_channels: int, width: int = 16):
        super().__init__()
        w = width
        self.in_channels = in_channels
        self.enc0 = nn.Sequential(nn.Conv3d(in_channels, w, 3, 1, 1), nn.LeakyReLU(0.2))
        self.enc1 = nn.Sequential(nn.Conv3d(w, 2 * w, 4, 2, 1), nn.LeakyReLU(0.2))
        self.enc2 = nn.Sequential(nn.Conv3d(2 * w, 4 * w, 4, 2, 1), nn.LeakyReLU(0.2),
                                  nn.Conv3d(4 * w, 4 * w, 3, 1, 1), nn.LeakyReLU(0.2))
        self.dec1 = nn.Sequential(nn.ConvTranspose3d(4 * w, 2 * w, 4, 2, 1), nn.LeakyReLU(0.2))
        self.dec0 = nn.Sequential(nn.ConvTranspose3d(4 * w, w, 4, 2, 1), nn.LeakyReLU(0.2))
        self.out = nn.Conv3d(2 * w, 1, 3, 1, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        e0 = self.enc0(x)
        e1 = self.enc1(e0)
        d1 = self.dec1(self.enc2(e1))
        d0 = self.dec0(torch.cat([d1, e1], 1))
        return torch.sigmoid(self.out(torch.cat([d0, e0], 1)))[:, 0]


class VOICritic(nn.Module):
    """Scores a (VOI, mask) pair; global-average head so any VOI edge works."""

    def __init__(self, width: int = 16):
        super().__init__()
        w = width
        self.net = nn.Sequential(
            nn.Conv3d(2, w, 4, 2, 1), nn.LeakyReLU(0.2),
            nn.Conv3d(w, 2 * w, 4, 2, 1), nn.LeakyReLU(0.2),
            nn.Conv3d(2 * w, 4 * w, 3, 1, 1), nn.LeakyReLU(0.2),
        )
        self.head = nn.Linear(4 * w, 1)

    def forward(self, voi: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        h = self.net(torch.stack([voi, mask], 1))
        return self.head(h.mean(dim=(2, 3, 4))).squeeze(1)


@dataclass(frozen=True)
class NoduleGANConfig:
    role: str = "injector"  # or "eraser"
    width: int = 16
    l1_weight: float = 10.0
    gamma: float = 1.0
    lr: float = 2e-4
    betas: Tuple[float, float] = (0.5, 0.999)
    batch_size: int = 16
    seed: int = 0


class NoduleGAN:
    """Shared injector/eraser model; the role decides what the generator sees.

    The injector sees the VOI with its central sphere zeroed plus a noise
    channel; the eraser sees the untouched VOI. Both see the sphere mask and
    only the sphere is replaced in the output.
    """

    def __init__(self, config: NoduleGANConfig):
        if config.role not in ("injector", "eraser"):
            raise ValueError(f"role must be injector or eraser, got {config.role!r}")
        self.config = config
        torch.manual_seed(config.seed)
        self.generator = InpaintNet(3 if config.role == "injector" else 2, config.width)
        self.critic = VOICritic(config.width)

    def complete(self, cubes: np.ndarray, radii: Sequence[float], rng: Optional[np.random.Generator] = None) -> np.ndarray:
        """Fill the central sphere of each ``(B, E, E, E)`` cube; returns the completed cubes."""
        x, m = self._inputs(np.asarray(cubes, dtype=np.float32), radii, rng or np.random.default_rng(0))
        with torch.no_grad():
            out = self._composite(x, m)
        return out.numpy()

    def _inputs(self, cubes: np.ndarray, radii, rng: np.random.Generator):
        E = cubes.shape[-1]
        masks = np.stack([sphere_mask(E, mask_radius(r)) for r in radii]).astype(np.float32)
        x = torch.as_tensor(cubes)
        m = torch.as_tensor(masks)
        if self.config.role == "injector":
            x = x * (1 - m)
            noise = torch.as_tensor(rng.standard_normal(cubes.shape).astype(np.float32))
            return torch.stack([x, m, noise], 1), m
        return torch.stack([x, m], 1), m

    def _composite(self, x: torch.Tensor, m: torch.Tensor) -> torch.Tensor:
        return x[:, 0] * (1 - m) + self.generator(x) * m

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / "nodulegan.json").write_text(json.dumps(asdict(self.config), indent=1, sort_keys=True) + "\n")
        save_module(self.generator, d / "generator")
        save_module(self.critic, d / "critic")

    @classmethod
    def load(cls, directory) -> "NoduleGAN":
        d = Path(directory)
        cfg = json.loads((d / "nodulegan.json").read_text())
        cfg["betas"] = tuple(cfg["betas"])
        model = cls(NoduleGANConfig(**cfg))
        load_module(model.generator, d / "generator")
        load_module(model.critic, d / "critic")
        return model


def train_nodule_gan(model: NoduleGAN, pair_sampler: Callable, steps: int, seed: int = 0, log_stream=None) -> NoduleGAN:
    """Adversarial + L1 training on ``(input_cubes, target_cubes, radii)`` batches.

    ``pair_sampler(rng, batch_size)`` supplies the batches; the cubes in one
    batch share an edge length.
    """
    cfg = model.config
    rng = np.random.default_rng(seed)
    opt_g = torch.optim.Adam(model.generator.parameters(), lr=cfg.lr, betas=cfg.betas)
    opt_d = torch.optim.Adam(model.critic.parameters(), lr=cfg.lr, betas=cfg.betas)
    for step in range(steps):
        inputs, targets, radii = pair_sampler(rng, cfg.batch_size)
        x, m = model._inputs(np.asarray(inputs, dtype=np.float32), radii, rng)
        y = torch.as_tensor(np.asarray(targets, dtype=np.float32))

        with torch.no_grad():
            fake = model._composite(x, m)
        d_loss = F.softplus(-model.critic(y, m)).mean() + F.softplus(model.critic(fake, m)).mean()
        gp = gradient_penalty(model.critic, y, cfg.gamma, m)
        opt_d.zero_grad(set_to_none=True)
        (d_loss + gp).backward()
        opt_d.step()

        for p in model.critic.parameters():
            p.requires_grad_(False)
        fake = model._composite(x, m)
        adv = F.softplus(-model.critic(fake, m)).mean()
        l1 = (fake - y).abs().mean()
        g_loss = adv + cfg.l1_weight * l1
        if not torch.isfinite(g_loss) or not torch.isfinite(d_loss):
            raise FloatingPointError(f"{cfg.role} training diverged at step {step}")
        opt_g.zero_grad(set_to_none=True)
        g_loss.backward()
        opt_g.step()
        for p in model.critic.parameters():
            p.requires_grad_(True)
        if log_stream is not None:
            log_stream.write(json.dumps({"step": step + 1, "role": cfg.role, "d_loss": float(d_loss.detach()),
                                         "g_loss": float(g_loss.detach()), "l1": float(l1.detach()), "gp": float(gp.detach())}) + "\n")
    model.generator.eval()
    return model


# ----------------------------------------------------------- volume level


def inject_voi(injector: NoduleGAN, voi: VOI, radius: float, rng: np.random.Generator) -> VOI:
    return VOI(injector.complete(voi.cube[None], [radius], rng)[0], voi.origin)


def erase_voi(eraser: NoduleGAN, voi: VOI, radius: float) -> VOI:
    return VOI(eraser.complete(voi.cube[None], [radius])[0], voi.origin)


def inject_nodule(injector: NoduleGAN, v: Volume, spec: NoduleSpec, rng: np.random.Generator,
                  lung_mask: Optional[np.ndarray] = None) -> Volume:
    if lung_mask is not None and not lung_mask[tuple(int(c) for c in spec.center)]:
        raise PlacementError(f"nodule center {spec.center} is outside the lungs")
    voi = extract_voi(v, spec.center, voi_edge(spec.radius_vox))
    return paste_back(v, inject_voi(injector, voi, spec.radius_vox, rng), "injected")


def erase_nodule(eraser: NoduleGAN, v: Volume, spec: NoduleSpec, provenance: str = "erased") -> Volume:
    voi = extract_voi(v, spec.center, voi_edge(spec.radius_vox))
    return paste_back(v, erase_voi(eraser, voi, spec.radius_vox), provenance)


# --------------------------------------------------------------- placement


def lognormal_radius(rng: np.random.Generator, median: float = 4.0, sigma: float = 0.35,
                     lo: float = 2.0, hi: float = 8.0) -> float:
    return float(np.clip(rng.lognormal(math.log(median), sigma), lo, hi))


def sample_count(rng: np.random.Generator, count_dist: Dict[int, float]) -> int:
    ks = sorted(count_dist)
    p = np.array([count_dist[k] for k in ks], dtype=np.float64)
    return int(ks[rng.choice(len(ks), p=p / p.sum())])


def sample_nodule_plan(
    rng: np.random.Generator,
    count_dist: Dict[int, float] = COUNT_DIST,
    radius_dist: Union[float, Callable] = lognormal_radius,
    lung_mask: np.ndarray = None,
    max_attempts: int = 100,
    intensity: Tuple[float, float] = (0.55, 0.75),
    edge: Optional[int] = None,
) -> List[NoduleSpec]:
    """Draw a nodule count, then place non-overlapping spheres inside the lung mask."""
    k = sample_count(rng, count_dist)
    lung_vox = np.argwhere(lung_mask)
    if k and len(lung_vox) == 0:
        raise PlacementError("empty lung mask")
    shape = np.array(lung_mask.shape)
    plan: List[NoduleSpec] = []
    for _ in range(k):
        for _ in range(max_attempts):
            # radius is redrawn with the center so a large draw cannot block the plan
            r = float(radius_dist(rng)) if callable(radius_dist) else float(radius_dist)
            half = max(edge or 0, voi_edge(r)) // 2
            c = lung_vox[rng.integers(len(lung_vox))]
            if (c - half < 0).any() or (c + half > shape).any():
                continue
            if any(np.linalg.norm(c - np.array(s.center)) <= r + s.radius_vox + 1 for s in plan):
                continue
            plan.append(NoduleSpec(tuple(int(v) for v in c), r, float(rng.uniform(*intensity))))
            break
        else:
            raise PlacementError(f"could not place nodule {len(plan) + 1} of {k} after {max_attempts} attempts")
    return plan


def plan_for_case(rng: np.random.Generator, lung_mask: np.ndarray, count_dist: Dict[int, float] = COUNT_DIST,
                  radius_dist: Union[float, Callable] = lognormal_radius, tries: int = 10) -> List[NoduleSpec]:
    """:func:`sample_nodule_plan`, redrawn (count and radii) when the lungs cannot hold it."""
    for k in range(tries):
        try:
            return sample_nodule_plan(rng, count_dist, radius_dist, lung_mask)
        except PlacementError:
            if k == tries - 1:
                raise


# ----------------------------------------------------------------- datasets


def estimate_lung_mask(voxels: np.ndarray, body_threshold: float = 0.3) -> np.ndarray:
    """Dark voxels enclosed by the body, for volumes that come without annotations."""
    bright = np.asarray(voxels) > body_threshold
    body = np.stack([ndimage.binary_fill_holes(p) for p in bright])
    return ndimage.binary_erosion(body & ~bright, iterations=1)


# two simulated scanners: coarse strong grain vs fine faint grain
DOMAIN_NOISE = {"A": {"noise_amp": 0.03, "noise_sigma": 0.5}, "B": {"noise_amp": 0.012, "noise_sigma": 1.5}}


def make_cases(n: int, seed: int, domain: str, with_nodules: bool = False,
               count_dist: Dict[int, float] = COUNT_DIST, radius_dist: Union[float, Callable] = lognormal_radius,
               **phantom_overrides) -> List[Case]:
    """Phantom cases for one domain; ``with_nodules`` adds procedural nodules per a sampled plan."""
    overrides = {**DOMAIN_NOISE.get(domain, {}), **phantom_overrides}
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    cases = []
    for k, ph in enumerate(phantom_corpus(n, seed=seed, **overrides)):
        v = replace(ph.volume, id=f"{domain}{k:04d}")
        specs = plan_for_case(rng, ph.lung_mask, count_dist, radius_dist) if with_nodules else []
        for spec in specs:
            v = add_procedural_nodule(v, spec)
        cases.append(Case(v, ph.lung_mask, specs, domain))
    return cases


def voi_pair_sampler(cases: Sequence[Case], role: str, injector: Optional[NoduleGAN] = None,
                     radius_range: Tuple[float, float] = (2.0, 8.0)) -> Callable:
    """Batches of training pairs drawn from phantom cases.

    ``injector`` role: target is a VOI with a procedural nodule, input the same
    VOI (the model masks it). ``eraser`` role: target is a clean VOI, input the
    same VOI after running ``injector`` on it.
    """
    if role == "eraser" and injector is None:
        raise ValueError("eraser pairs need a trained injector")

    def sample(rng: np.random.Generator, batch_size: int):
        E = voi_edge(radius_range[1]) if rng.random() < 0.3 else DEFAULT_VOI_EDGE
        r_max = min(radius_range[1], E / 2 - MASK_MARGIN - 0.5)
        inputs, targets, radii = [], [], []
        while len(targets) < batch_size:
            case = cases[rng.integers(len(cases))]
            r = float(rng.uniform(radius_range[0], r_max))
            try:
                plan = sample_nodule_plan(rng, {1: 1.0}, r, case.lung_mask, edge=E)
            except PlacementError:
                continue
            spec = plan[0]
            voi = extract_voi(case.volume, spec.center, E)
            if role == "injector":
                nodule = add_procedural_nodule(case.volume, spec)
                target = extract_voi(nodule, spec.center, E).cube
                inputs.append(target)
                targets.append(target)
            else:
                targets.append(voi.cube)
                inputs.append(injector.complete(voi.cube[None], [r], rng)[0])
            radii.append(r)
        return np.stack(inputs), np.stack(targets), radii

    return sample


def split_sizes(n: int, ratios=(0.75, 0.125, 0.125)) -> Tuple[int, int, int]:
    """Train/val/test counts; val and test are rounded, train takes the rest."""
    n_val = int(round(ratios[1] * n))
    n_test = int(round(ratios[2] * n))
    return n - n_val - n_test, n_val, n_test


@dataclass
class MixEntry:
    id: str
    domain: str
    label: str  # "nodule" or "clean"
    pathway: str  # "erased", "injected" or "untouched"
    split: str
    path: str = ""


@dataclass
class DatasetMix:
    entries: List[MixEntry]

    def split(self, name: str) -> List[MixEntry]:
        return [e for e in self.entries if e.split == name]

    def to_json(self) -> str:
        return json.dumps({"format_version": MANIFEST_FORMAT_VERSION,
                           "entries": [asdict(e) for e in self.entries]}, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DatasetMix":
        data = json.loads(text)
        if data.get("format_version") != MANIFEST_FORMAT_VERSION:
            raise ValueError("unsupported manifest format_version")
        return cls([MixEntry(**e) for e in data["entries"]])


def label_domain_mutual_information(entries: Sequence[MixEntry]) -> float:
    """Empirical mutual information (bits) between label and source domain."""
    labels = sorted({e.label for e in entries})
    domains = sorted({e.domain for e in entries})
    joint = np.zeros((len(labels), len(domains)))
    for e in entries:
        joint[labels.index(e.label), domains.index(e.domain)] += 1
    joint /= joint.sum()
    pl, pd = joint.sum(1, keepdims=True), joint.sum(0, keepdims=True)
    nz = joint > 0
    return float((joint[nz] * np.log2(joint[nz] / (pl @ pd)[nz])).sum())


def build_unbiased_dataset(
    domain_a: Sequence[Case],
    domain_b: Sequence[Case],
    injector: NoduleGAN,
    eraser: NoduleGAN,
    rng: np.random.Generator,
    count_dist: Dict[int, float] = COUNT_DIST,
    radius_dist: Union[float, Callable] = lognormal_radius,
    ratios=(0.75, 0.125, 0.125),
):
    """Erase nodules from half of domain A, inject into half of domain B, then stratify.

    Returns ``(DatasetMix, {id: Volume})``.
    """
    for name, dom in (("A", domain_a), ("B", domain_b)):
        if len(dom) < 16:
            raise StratificationError(f"domain {name} has {len(dom)} volumes; need >= 16 to stratify")
    volumes: Dict[str, Volume] = {}
    strata: Dict[Tuple[str, str], List[Tuple[str, str]]] = {}

    def add(domain, label, pathway, vol):
        volumes[vol.id] = vol
        strata.setdefault((domain, label), []).append((vol.id, pathway))

    order = rng.permutation(len(domain_a))
    for rank, i in enumerate(order):
        case = domain_a[i]
        dom = case.domain or "A"
        if rank < len(order) // 2:
            v = case.volume
            for spec in case.nodules:
                v = erase_nodule(eraser, v, spec)
            add(dom, "clean", "erased", v)
        else:
            add(dom, "nodule", "untouched", case.volume)
    order = rng.permutation(len(domain_b))
    for rank, i in enumerate(order):
        case = domain_b[i]
        dom = case.domain or "B"
        if rank < len(order) // 2:
            v = case.volume
            for spec in plan_for_case(rng, case.lung_mask, count_dist, radius_dist):
                v = inject_nodule(injector, v, spec, rng, case.lung_mask)
            add(dom, "nodule", "injected", v)
        else:
            add(dom, "clean", "untouched", case.volume)

    entries: List[MixEntry] = []
    for (domain, label), items in sorted(strata.items()):
        n_train, n_val, _ = split_sizes(len(items), ratios)
        for k, (vid, pathway) in enumerate(items):
            split = "train" if k < n_train else "val" if k < n_train + n_val else "test"
            entries.append(MixEntry(vid, domain, label, pathway, split))
    return DatasetMix(entries), volumes


def write_dataset(mix: DatasetMix, volumes: Dict[str, Volume], directory) -> Path:
    """Save every volume plus ``manifest.json`` (paths relative to ``directory``)."""
    d = Path(directory)
    (d / "volumes").mkdir(parents=True, exist_ok=True)
    for e in mix.entries:
        e.path = f"volumes/{e.id}"
        save_volume(volumes[e.id], d / e.path)
    path = d / "manifest.json"
    path.write_text(mix.to_json() + "\n")
    return path

"""Binary nodule classifier (squeeze-style 3D CNN) and the three training regimes."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ctsgan.nodulesim import DatasetMix
from ctsgan.voldata import load_volume, normalize

REGIMES = ("real-only", "synthetic-only", "pretrain+finetune")


@dataclass(frozen=True)
class ClassifierConfig:
    stem: int = 16
    fires: Tuple[Tuple[int, int], ...] = ((8, 16), (8, 16), (16, 32))  # (squeeze, expand per branch)
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 16
    max_steps: int = 500
    finetune_steps: Optional[int] = None
    seed: int = 0


class Fire3d(nn.Module):
    def __init__(self, cin: int, squeeze: int, expand: int):
        super().__init__()
        self.squeeze = nn.Conv3d(cin, squeeze, 1)
        self.expand1 = nn.Conv3d(squeeze, expand, 1)
        self.expand3 = nn.Conv3d(squeeze, expand, 3, padding=1)

    def forward(self, x):
        s = F.relu(self.squeeze(x))
        return torch.cat([F.relu(self.expand1(s)), F.relu(self.expand3(s))], 1)


class SqueezeNet3d(nn.Module):
    def __init__(self, cfg: ClassifierConfig):
        super().__init__()
        layers: List[nn.Module] = [nn.Conv3d(1, cfg.stem, 3, 2, 1), nn.ReLU(), nn.MaxPool3d(2)]
        cin = cfg.stem
        for k, (sq, ex) in enumerate(cfg.fires):
            layers.append(Fire3d(cin, sq, ex))
            cin = 2 * ex
            if k == len(cfg.fires) - 2:
                layers.append(nn.MaxPool3d(2))
        self.features = nn.Sequential(*layers)
        self.classifier = nn.Conv3d(cin, 1, 1)
        # default init leaves the logit almost input independent
        for mod in self.modules():
            if isinstance(mod, nn.Conv3d):
                nn.init.kaiming_normal_(mod.weight, nonlinearity="relu")
                nn.init.zeros_(mod.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: (B, D, H, W) -> logits (B,)
        return self.classifier(self.features(x[:, None])).amax(dim=(2, 3, 4)).squeeze(1)


def build_classifier(cfg: ClassifierConfig) -> SqueezeNet3d:
    torch.manual_seed(cfg.seed)
    return SqueezeNet3d(cfg)


# ----------------------------------------------------------------- data


LABELS = {"clean": 0, "nodule": 1}


def load_manifest(path) -> Tuple[DatasetMix, Path]:
    path = Path(path)
    return DatasetMix.from_json(path.read_text()), path.parent


def load_split(path, split: str):
    """Normalized volumes and 0/1 labels for one split of a manifest file."""
    mix, root = load_manifest(path)
    entries = mix.split(split)
    if not entries:
        return np.zeros((0,), np.float32), np.zeros((0,), np.int64)
    X = np.stack([normalize(load_volume(root / e.path)).voxels for e in entries])
    y = np.array([LABELS[e.label] for e in entries], dtype=np.int64)
    return X, y


def split_hash(path, split: str = "test") -> str:
    mix, _ = load_manifest(path)
    payload = json.dumps([asdict(e) for e in mix.split(split)], sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()


# ------------------------------------------------------------ train / eval


def train_classifier(
    cfg: ClassifierConfig,
    data,
    init: Optional[SqueezeNet3d] = None,
    steps: Optional[int] = None,
    log_stream=None,
):
    """Adam + BCE on ``data = (X, y)`` or a manifest path (its train split).

    Returns ``(model, log)``; ``log[0]["loss"]`` is the loss of the starting
    weights on the first batch, before any update.
    """
    X, y = load_split(data, "train") if isinstance(data, (str, Path)) else data
    if len(X) == 0:
        raise ValueError("empty training set")
    model = build_classifier(cfg)
    if init is not None:
        model.load_state_dict(init.state_dict())
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2))
    rng = np.random.default_rng(cfg.seed)
    X_t, y_t = torch.as_tensor(X), torch.as_tensor(y, dtype=torch.float32)
    log = []
    for step in range(steps if steps is not None else cfg.max_steps):
        idx = torch.as_tensor(rng.integers(0, len(X_t), size=cfg.batch_size))
        loss = F.binary_cross_entropy_with_logits(model(X_t[idx]), y_t[idx])
        if not torch.isfinite(loss):
            raise FloatingPointError(f"classifier training diverged at step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        rec = {"step": step, "loss": float(loss.detach())}
        log.append(rec)
        if log_stream is not None:
            log_stream.write(json.dumps(rec) + "\n")
    model.eval()
    return model, log


def batch_loss(model: SqueezeNet3d, X, y) -> float:
    with torch.no_grad():
        return float(F.binary_cross_entropy_with_logits(model(torch.as_tensor(X)), torch.as_tensor(y, dtype=torch.float32)))


def predict(model: SqueezeNet3d, X, batch_size: int = 32) -> np.ndarray:
    out = []
    with torch.no_grad():
        for k in range(0, len(X), batch_size):
            out.append((model(torch.as_tensor(X[k : k + batch_size])) > 0).long().numpy())
    return np.concatenate(out) if out else np.zeros(0, np.int64)


def accuracy(predictions, labels) -> float:
    predictions, labels = np.asarray(predictions), np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("cannot score an empty split")
    return float(np.mean(predictions == labels))


def evaluate_classifier(model: SqueezeNet3d, data, split: str = "test") -> float:
    X, y = load_split(data, split) if isinstance(data, (str, Path)) else data
    if len(y) == 0:
        raise ValueError(f"split {split!r} is empty")
    return accuracy(predict(model, X), y)


# ---------------------------------------------------------------- regimes


@dataclass
class RegimeReport:
    accuracies: Dict[str, List[float]]  # regime -> one accuracy per seed
    seeds: List[int]
    test_hash: str
    label: str = ""
    val_accuracies: Dict[str, List[float]] = field(default_factory=dict)

    def mean(self, regime: str) -> float:
        return float(np.mean(self.accuracies[regime]))

    def std(self, regime: str) -> float:
        return float(np.std(self.accuracies[regime]))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["summary"] = {r: {"mean": self.mean(r), "std": self.std(r)} for r in self.accuracies}
        return d


def run_regimes(real_manifest, synthetic_manifests, cfg: ClassifierConfig, seeds: Sequence[int] = (0, 1, 2),
                label: str = "") -> RegimeReport:
    """Train real-only, synthetic-only and pretrain+finetune classifiers for each seed.

    ``synthetic_manifests`` is one manifest path or one per seed. All three
    regimes are scored on the real manifest's test split.
    """
    if isinstance(synthetic_manifests, (str, Path)):
        synthetic_manifests = [synthetic_manifests] * len(seeds)
    if len(synthetic_manifests) != len(seeds):
        raise ValueError("need one synthetic manifest per seed")
    real_train = load_split(real_manifest, "train")
    real_val = load_split(real_manifest, "val")
    real_test = load_split(real_manifest, "test")
    if len(real_test[1]) == 0:
        raise ValueError("real manifest has no test split")
    acc = {r: [] for r in REGIMES}
    val = {r: [] for r in REGIMES}
    ft_steps = cfg.finetune_steps if cfg.finetune_steps is not None else cfg.max_steps
    for seed, synth in zip(seeds, synthetic_manifests):
        run_cfg = ClassifierConfig(**{**asdict(cfg), "seed": int(seed)})
        models = {}
        models["real-only"], _ = train_classifier(run_cfg, real_train, steps=ft_steps)
        models["synthetic-only"], _ = train_classifier(run_cfg, load_split(synth, "train"))
        models["pretrain+finetune"], _ = train_classifier(run_cfg, real_train, init=models["synthetic-only"],
                                                          steps=ft_steps)
        for r in REGIMES:
            acc[r].append(evaluate_classifier(models[r], real_test))
            if len(real_val[1]):
                val[r].append(evaluate_classifier(models[r], real_val))
    return RegimeReport(acc, [int(s) for s in seeds], split_hash(real_manifest, "test"), label, val)


def sweep_nodule_sizes(sizes: Sequence[float], build_manifests: Callable, cfg: ClassifierConfig,
                       seeds: Sequence[int] = (0, 1, 2)) -> Dict[float, RegimeReport]:
    """One :func:`run_regimes` per nodule radius.

    ``build_manifests(radius, seeds)`` returns ``(real_manifest, [synthetic_manifest per seed])``.
    """
    if len(sizes) == 0:
        raise ValueError("no nodule sizes given")
    reports = {}
    for r in sizes:
        real, synth = build_manifests(r, seeds)
        reports[r] = run_regimes(real, synth, cfg, seeds, label=f"radius {r:g}")
    return reports


def render_sweep_table(reports: Dict[float, RegimeReport]) -> str:
    lines = [f"{'radius':>8}" + "".join(f"{r:>24}" for r in REGIMES)]
    for radius, rep in reports.items():
        cells = "".join(f"{rep.mean(r):>15.3f} +- {rep.std(r):<5.3f}" for r in REGIMES)
        lines.append(f"{radius:>8g}{cells}")
    return "\n".join(lines)

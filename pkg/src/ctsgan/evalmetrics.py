"""Slice-wise FID and Inception Score with a phantom-trained feature network.

The feature network plays the role of the Inception backbone: a small 2D CNN
trained to classify phantom planes as body-, lung- or airway-dominant. Its
penultimate layer is the embedding used for FID; its softmax feeds IS.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ctsgan.serialization import load_module, save_module
from ctsgan.voldata import PLANE_CLASSES


class FeatureExtractor(nn.Module):
    def __init__(self, hw: int = 32, d_f: int = 32, n_classes: int = len(PLANE_CLASSES), width: int = 16):
        super().__init__()
        self.hw, self.d_f, self.n_classes, self.width = hw, d_f, n_classes, width
        self.conv = nn.Sequential(
            nn.Conv2d(1, width, 3, 2, 1), nn.ReLU(),
            nn.Conv2d(width, 2 * width, 3, 2, 1), nn.ReLU(),
            nn.Conv2d(2 * width, 2 * width, 3, 2, 1), nn.ReLU(),
        )
        with torch.no_grad():
            n = self.conv(torch.zeros(1, 1, hw, hw)).numel()
        self.embed_layer = nn.Linear(n, d_f)
        self.head = nn.Linear(d_f, n_classes)

    def forward(self, planes: torch.Tensor):
        h = F.relu(self.embed_layer(self.conv(planes[:, None]).flatten(1)))
        return h, self.head(h)

    def embed(self, planes) -> np.ndarray:
        """``(n, H, W)`` planes -> ``(n, d_f)`` embeddings."""
        with torch.no_grad():
            return self(torch.from_numpy(np.array(planes, dtype=np.float32)))[0].double().numpy()

    def probs(self, planes) -> np.ndarray:
        with torch.no_grad():
            logits = self(torch.from_numpy(np.array(planes, dtype=np.float32)))[1]
        return torch.softmax(logits.double(), dim=1).numpy()

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        cfg = {"hw": self.hw, "d_f": self.d_f, "n_classes": self.n_classes, "width": self.width}
        (d / "extractor.json").write_text(json.dumps(cfg, indent=1, sort_keys=True) + "\n")
        save_module(self, d / "extractor_weights")

    @classmethod
    def load(cls, directory) -> "FeatureExtractor":
        d = Path(directory)
        f = cls(**json.loads((d / "extractor.json").read_text()))
        return load_module(f, d / "extractor_weights").eval()


def train_feature_extractor(
    phantoms: Sequence,
    d_f: int = 32,
    steps: int = 400,
    batch_size: int = 64,
    lr: float = 1e-3,
    holdout: float = 0.2,
    seed: int = 0,
):
    """Fit the plane classifier on labelled phantom planes.

    Returns ``(extractor, held_out_accuracy)``; the holdout is split by
    phantom, not by plane.
    """
    if len(phantoms) < 2:
        raise ValueError("need at least two phantoms")
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    order = rng.permutation(len(phantoms))
    n_test = max(1, int(round(holdout * len(phantoms))))
    test, train = order[:n_test], order[n_test:]

    def planes(idx):
        x = np.concatenate([phantoms[i].volume.voxels for i in idx])
        y = np.concatenate([phantoms[i].plane_labels for i in idx])
        return torch.as_tensor(x), torch.as_tensor(y)

    x_tr, y_tr = planes(train)
    x_te, y_te = planes(test)
    net = FeatureExtractor(hw=x_tr.shape[-1], d_f=d_f)
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    for step in range(steps):
        idx = torch.as_tensor(rng.integers(0, len(x_tr), size=batch_size))
        loss = F.cross_entropy(net(x_tr[idx])[1], y_tr[idx])
        if not torch.isfinite(loss):
            raise FloatingPointError(f"feature extractor training diverged at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
    net.eval()
    with torch.no_grad():
        acc = float((net(x_te)[1].argmax(1) == y_te).double().mean())
    return net, acc


# ------------------------------------------------------------------- metrics


def gaussian_stats(emb: np.ndarray):
    emb = np.asarray(emb, dtype=np.float64)
    return emb.mean(axis=0), np.cov(emb, rowvar=False, ddof=1)


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2)
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def fid(mu1, cov1, mu2, cov2) -> float:
    """Frechet distance between two Gaussians.

    ``Tr((S1 S2)^1/2)`` is computed as the trace of ``(S1^1/2 S2 S1^1/2)^1/2``,
    which is symmetric PSD, so both square roots come from ``eigh`` with
    negative eigenvalues clipped to zero.
    """
    mu1, mu2 = np.atleast_1d(mu1).astype(np.float64), np.atleast_1d(mu2).astype(np.float64)
    cov1, cov2 = np.atleast_2d(cov1).astype(np.float64), np.atleast_2d(cov2).astype(np.float64)
    if mu1.shape != mu2.shape or cov1.shape != cov2.shape or cov1.shape != (len(mu1), len(mu1)):
        raise ValueError(f"dimension mismatch: {mu1.shape}, {cov1.shape} vs {mu2.shape}, {cov2.shape}")
    if np.array_equal(mu1, mu2) and np.array_equal(cov1, cov2):
        return 0.0
    s1 = _psd_sqrt(cov1)
    cross = np.linalg.eigvalsh(s1 @ cov2 @ s1)
    tr_cross = np.sqrt(np.clip(cross, 0, None)).sum()
    diff = mu1 - mu2
    value = diff @ diff + np.trace(cov1) + np.trace(cov2) - 2.0 * tr_cross
    return float(max(value, 0.0))


def _embed_volumes(vols, f: FeatureExtractor) -> np.ndarray:
    arr = np.stack([np.asarray(getattr(v, "voxels", v), dtype=np.float32) for v in vols])
    n, S = arr.shape[:2]
    return f.embed(arr.reshape(n * S, *arr.shape[2:])).reshape(n, S, -1)


def slicewise_fid(
    vols_a,
    vols_b,
    f: FeatureExtractor,
    rng: np.random.Generator,
    n_pairings: int = 5,
    sample_size: int = None,
    pairing: str = "random",
):
    """Mean and std over pairings of the depth-averaged per-position FID.

    Each pairing draws ``sample_size`` scans from each corpus and matches them
    in order. At every depth position the embeddings of that plane form one
    Gaussian per corpus, and the pairing's score is the mean FID over
    positions. ``pairing="identity"`` uses every scan in its given order on
    both sides.
    """
    if len(vols_a) < 2 or len(vols_b) < 2:
        raise ValueError("each corpus needs at least two volumes")
    emb_a, emb_b = _embed_volumes(vols_a, f), _embed_volumes(vols_b, f)
    if emb_a.shape[1] != emb_b.shape[1]:
        raise ValueError(f"depth mismatch: {emb_a.shape[1]} vs {emb_b.shape[1]}")
    S = emb_a.shape[1]
    if pairing == "identity":
        if len(emb_a) != len(emb_b):
            raise ValueError("identity pairing needs corpora of equal size")
        draws = [(np.arange(len(emb_a)), np.arange(len(emb_b)))] * n_pairings
    elif pairing == "random":
        k = sample_size or max(2, int(0.8 * min(len(emb_a), len(emb_b))))
        draws = [(rng.permutation(len(emb_a))[:k], rng.permutation(len(emb_b))[:k]) for _ in range(n_pairings)]
    else:
        raise ValueError(f"unknown pairing {pairing!r}")
    scores = []
    for ia, ib in draws:
        per_pos = [fid(*gaussian_stats(emb_a[ia, p]), *gaussian_stats(emb_b[ib, p])) for p in range(S)]
        scores.append(float(np.mean(per_pos)))
    return float(np.mean(scores)), float(np.std(scores))


def inception_score(prob_rows) -> float:
    p = np.asarray(prob_rows, dtype=np.float64)
    if p.ndim != 2 or len(p) == 0:
        raise ValueError("expected a non-empty (n, C) array of distributions")
    if (p < 0).any() or np.abs(p.sum(axis=1) - 1.0).max() > 1e-6:
        raise ValueError("rows must be probability vectors")
    marginal = p.mean(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(marginal)), 0.0)
    return float(np.exp(terms.sum(axis=1).mean()))


def slicewise_inception_score(vols, f: FeatureExtractor):
    """IS over each volume's planes in depth order; mean and std across volumes."""
    scores = [inception_score(f.probs(np.asarray(getattr(v, "voxels", v)))) for v in vols]
    return float(np.mean(scores)), float(np.std(scores))


# -------------------------------------------------------------------- report


@dataclass
class MetricReport:
    fid_mean: float
    fid_std: float
    is_mean: float
    is_std: float
    protocol: str = "slicewise-paired"

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)


def metric_report(generated, reference, f: FeatureExtractor, rng: np.random.Generator, n_pairings: int = 5):
    fid_m, fid_s = slicewise_fid(generated, reference, f, rng, n_pairings=n_pairings)
    is_m, is_s = slicewise_inception_score(generated, f)
    return MetricReport(fid_m, fid_s, is_m, is_s)


def render_table(rows: dict) -> str:
    """Text table with one row per data source, IS and FID columns."""
    width = max(len(k) for k in rows) + 2
    lines = [f"{'Data Source':<{width}}{'IS (up)':>18}{'FID (down)':>22}"]
    for name, r in rows.items():
        lines.append(f"{name:<{width}}{r.is_mean:>10.3f} +- {r.is_std:<5.3f}{r.fid_mean:>13.3f} +- {r.fid_std:<6.3f}")
    return "\n".join(lines)

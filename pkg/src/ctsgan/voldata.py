"""Volumes, the slice/slab sampling operators, raw file IO, and the lung phantom generator.

Volumes are indexed ``[depth, height, width]``. A :class:`Slice3` is three
consecutive depth planes treated as a 3-channel image; the valid centers of a
depth ``S`` volume are ``1 .. S-2``.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

PROVENANCES = ("real-phantom", "synthetic", "injected", "erased")

_TRANSITIONS = {
    "real-phantom": {"real-phantom", "injected", "erased"},
    "synthetic": {"synthetic", "injected"},
    "injected": {"injected"},
    "erased": {"erased"},
}

PLANE_CLASSES = ("body", "lung", "airway")


class VolumeFormatError(ValueError):
    pass


class CorruptVolumeError(VolumeFormatError):
    pass


@dataclass(frozen=True)
class Volume:
    voxels: np.ndarray
    spacing_mm: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    provenance: str = "real-phantom"
    id: str = ""

    def __post_init__(self):
        vox = np.ascontiguousarray(self.voxels, dtype=np.float32)
        if vox.ndim != 3:
            raise ValueError(f"volume must be 3D, got shape {vox.shape}")
        for n in vox.shape:
            if n < 4 or n % 2:
                raise ValueError(f"volume dims must be even and >= 4, got {vox.shape}")
        if len(self.spacing_mm) != 3 or min(self.spacing_mm) <= 0:
            raise ValueError(f"spacing must be three positive reals, got {self.spacing_mm}")
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")
        vox.flags.writeable = False
        object.__setattr__(self, "voxels", vox)
        object.__setattr__(self, "spacing_mm", tuple(float(s) for s in self.spacing_mm))

    @property
    def shape(self):
        return self.voxels.shape

    @property
    def depth(self) -> int:
        return self.voxels.shape[0]

    def with_voxels(self, voxels: np.ndarray, provenance: Optional[str] = None) -> "Volume":
        """Copy with new voxel data, enforcing the allowed provenance transitions."""
        provenance = provenance or self.provenance
        if provenance not in _TRANSITIONS[self.provenance]:
            raise ValueError(f"provenance cannot go from {self.provenance} to {provenance}")
        return replace(self, voxels=voxels, provenance=provenance)


@dataclass(frozen=True)
class Slice3:
    planes: np.ndarray
    center_index: int

    def __post_init__(self):
        if self.planes.ndim != 3 or self.planes.shape[0] != 3:
            raise ValueError(f"Slice3 needs exactly 3 planes, got shape {self.planes.shape}")
        if self.center_index < 1:
            raise ValueError("center_index must be >= 1")


@dataclass(frozen=True)
class Slab:
    planes: np.ndarray
    start_index: int

    @property
    def T(self) -> int:
        return self.planes.shape[0]


# --------------------------------------------------------------------------- IO


def _pair_paths(path) -> Tuple[Path, Path]:
    p = Path(path)
    if p.suffix in (".json", ".raw"):
        p = p.with_suffix("")
    return p.with_suffix(".json"), p.with_suffix(".raw")


def save_volume(v: Volume, path) -> None:
    """Write ``<name>.json`` + ``<name>.raw`` (little-endian f32, C order)."""
    meta_path, raw_path = _pair_paths(path)
    meta_path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "shape": list(v.shape),
        "dtype": "f32le",
        "order": "C",
        "spacing_mm": list(v.spacing_mm),
        "provenance": v.provenance,
        "id": v.id,
    }
    meta_path.write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")
    raw_path.write_bytes(v.voxels.astype("<f4").tobytes(order="C"))


def load_volume(path) -> Volume:
    meta_path, raw_path = _pair_paths(path)
    if not meta_path.exists():
        raise VolumeFormatError(f"missing sidecar {meta_path}")
    try:
        meta = json.loads(meta_path.read_text())
        shape = tuple(int(n) for n in meta["shape"])
    except (ValueError, KeyError, TypeError) as exc:
        raise VolumeFormatError(f"bad sidecar {meta_path}: {exc}") from exc
    if meta.get("dtype", "f32le") != "f32le" or meta.get("order", "C") != "C":
        raise VolumeFormatError(f"unsupported dtype/order in {meta_path}")
    if not raw_path.exists():
        raise VolumeFormatError(f"missing payload {raw_path}")
    payload = raw_path.read_bytes()
    expected = int(np.prod(shape)) * 4
    if len(shape) != 3 or len(payload) != expected:
        raise CorruptVolumeError(
            f"{raw_path}: payload has {len(payload)} bytes, shape {shape} needs {expected}"
        )
    voxels = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
    return Volume(
        voxels,
        spacing_mm=tuple(meta.get("spacing_mm", (1.0, 1.0, 1.0))),
        provenance=meta.get("provenance", "real-phantom"),
        id=meta.get("id", ""),
    )


# ----------------------------------------------------------------- operators


def normalize(v: Volume) -> Volume:
    """Per-volume min-max scaling into [0, 1]; constant volumes become zeros."""
    x = v.voxels.astype(np.float64)
    lo, hi = x.min(), x.max()
    if hi == lo:
        out = np.zeros_like(x)
    else:
        out = np.clip((x - lo) / (hi - lo), 0.0, 1.0)
    return replace(v, voxels=out.astype(np.float32))


def extract_slice3(v: Volume, i: int) -> Slice3:
    if not 1 <= i <= v.depth - 2:
        raise IndexError(f"slice center {i} outside 1..{v.depth - 2}")
    return Slice3(np.array(v.voxels[i - 1 : i + 2]), int(i))


def extract_slab(v: Volume, start: int, T: int) -> Slab:
    if start < 0 or T < 1 or start + T > v.depth:
        raise IndexError(f"slab [{start}, {start + T}) outside depth {v.depth}")
    return Slab(np.array(v.voxels[start : start + T]), int(start))


def slab_centers(slab: Slab) -> range:
    """Slice3 centers whose three planes all lie inside the slab."""
    return range(slab.start_index + 1, slab.start_index + slab.T - 1)


def sample_slab_slices(v: Volume, slab: Slab, N: int, rng: np.random.Generator):
    if N <= 0:
        raise ValueError(f"N must be positive, got {N}")
    centers = slab_centers(slab)
    if len(centers) == 0:
        raise ValueError(f"slab of length {slab.T} has no interior Slice3 center")
    picks = rng.integers(centers.start, centers.stop, size=N)
    return [extract_slice3(v, int(i)) for i in picks]


def adjacent_plane_correlation(voxels: np.ndarray) -> float:
    """Mean Pearson correlation between consecutive depth planes.

    Pairs where either plane is constant are skipped.
    """
    flat = np.asarray(voxels, dtype=np.float64).reshape(voxels.shape[0], -1)
    flat = flat - flat.mean(axis=1, keepdims=True)
    norms = np.linalg.norm(flat, axis=1)
    num = (flat[:-1] * flat[1:]).sum(axis=1)
    den = norms[:-1] * norms[1:]
    ok = den > 0
    if not ok.any():
        return float("nan")
    return float(np.mean(num[ok] / den[ok]))


# ------------------------------------------------------------------- phantom


@dataclass(frozen=True)
class PhantomParams:
    """Geometry and intensity settings for one lung phantom.

    Geometric sizes are fractions of the cube edge so that the same parameters
    describe a 32^3 test phantom and a 224^3 one.
    """

    size: int = 32
    # (z, y, x) semi-axes; z may exceed 0.5 since the torso continues past the field of view.
    body_ellipsoid: Tuple[float, float, float] = (0.9, 0.36, 0.44)
    lung_count: int = 2
    airway_tube_radius: float = 0.045
    vessel_filament_count: Tuple[int, int] = (3, 7)
    intensity_bands: Dict[str, Tuple[float, float]] = field(
        default_factory=lambda: {
            "air": (0.0, 0.03),
            "body": (0.55, 0.7),
            "lung": (0.08, 0.16),
            "airway": (0.0, 0.04),
            "wall": (0.42, 0.55),
            "vessel": (0.4, 0.58),
        }
    )
    noise_amp: float = 0.02
    noise_sigma: float = 0.8
    spacing_mm: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    seed: int = 0

    def validate(self) -> None:
        if self.size < 8 or self.size % 2:
            raise ValueError(f"phantom size must be even and >= 8, got {self.size}")
        if self.lung_count != 2:
            raise ValueError("phantoms always have two lungs")
        az, ay, ax = self.body_ellipsoid
        if min(az, ay, ax) <= 0 or ay > 0.48 or ax > 0.48:
            raise ValueError(f"body ellipsoid {self.body_ellipsoid} does not fit the cube")
        # lungs sit at x = +-0.2 with half-width 0.14 and need to stay inside the body
        if ax < 0.36 or ay < 0.26:
            raise ValueError(f"body ellipsoid {self.body_ellipsoid} too small to hold the lungs")
        if not 0 < self.airway_tube_radius <= 0.08:
            raise ValueError(f"airway radius {self.airway_tube_radius} out of range")
        lo, hi = self.vessel_filament_count
        if lo < 0 or hi < lo:
            raise ValueError(f"bad vessel count range {self.vessel_filament_count}")
        for name, (a, b) in self.intensity_bands.items():
            if not 0.0 <= a <= b <= 1.0:
                raise ValueError(f"intensity band {name}={a, b} not inside [0, 1]")
        if self.noise_amp < 0 or self.noise_sigma < 0:
            raise ValueError("noise parameters must be nonnegative")


@dataclass(frozen=True)
class Phantom:
    volume: Volume
    lung_mask: np.ndarray
    airway_mask: np.ndarray
    body_mask: np.ndarray
    plane_labels: np.ndarray  # index into PLANE_CLASSES per depth plane


def _segment_distance(pts: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    t = np.clip(((pts - a) @ ab) / max(float(ab @ ab), 1e-12), 0.0, 1.0)
    return np.linalg.norm(pts - (a + t[:, None] * ab), axis=1)


def _tube_distance(pts: np.ndarray, polyline: Sequence[np.ndarray]) -> np.ndarray:
    d = np.full(len(pts), np.inf)
    for a, b in zip(polyline[:-1], polyline[1:]):
        d = np.minimum(d, _segment_distance(pts, a, b))
    return d


def render_phantom(params: PhantomParams) -> Phantom:
    """Render a phantom together with its region masks and per-plane labels."""
    params.validate()
    rng = np.random.default_rng(params.seed)
    n = params.size
    band = {k: rng.uniform(*v) for k, v in params.intensity_bands.items()}
    c = (n - 1) / 2.0
    zz, yy, xx = np.meshgrid(*(np.arange(n, dtype=np.float64),) * 3, indexing="ij")
    pts = np.stack([zz.ravel(), yy.ravel(), xx.ravel()], axis=1)

    az, ay, ax = (np.array(params.body_ellipsoid) * n) * rng.uniform(0.95, 1.05, 3)
    body = ((zz - c) / az) ** 2 + ((yy - c) / ay) ** 2 + ((xx - c) / ax) ** 2 <= 1.0

    lung = np.zeros_like(body)
    lung_centers = []
    zc = n * rng.uniform(0.52, 0.58)
    for side in (-1, 1):
        center = np.array([zc, c + 0.03 * n, c + side * 0.2 * n]) + rng.normal(0, 0.01 * n, 3)
        axes = np.array([0.3, 0.2, 0.13]) * n * rng.uniform(0.9, 1.1, 3)
        lung |= (((zz - center[0]) / axes[0]) ** 2 + ((yy - center[1]) / axes[1]) ** 2
                 + ((xx - center[2]) / axes[2]) ** 2) <= 1.0
        lung_centers.append((center, axes))
    lung &= body

    # trachea down to the carina, one bronchus per lung, each splitting in two
    r_air = params.airway_tube_radius * n
    top = np.array([-1.0, c - 0.06 * n, c])
    carina = np.array([zc - 0.27 * n, c - 0.04 * n, c]) + rng.normal(0, 0.01 * n, 3)
    airway_d = _tube_distance(pts, [top, carina])
    trachea_d = airway_d.copy()
    for center, axes in lung_centers:
        hilum = center + np.array([-0.35 * axes[0], -0.2 * axes[1], -np.sign(center[2] - c) * 0.3 * axes[2]])
        airway_d = np.minimum(airway_d, _tube_distance(pts, [carina, hilum]) / 0.8)
        for dz in (-0.5, 0.6):
            tip = center + np.array([dz * axes[0], rng.uniform(-0.3, 0.3) * axes[1],
                                     np.sign(center[2] - c) * 0.3 * axes[2]])
            airway_d = np.minimum(airway_d, _tube_distance(pts, [hilum, tip]) / 0.6)
    airway_d = airway_d.reshape(body.shape)
    airway = (airway_d <= r_air) & body
    wall = (airway_d <= 1.7 * r_air) & body & ~airway

    vol = np.full(body.shape, band["air"])
    vol[body] = band["body"]
    vol[lung] = band["lung"]
    vol[wall & lung] = band["wall"]
    vol[airway] = band["airway"]

    lo, hi = params.vessel_filament_count
    vessels = np.zeros(body.shape)
    for center, axes in lung_centers:
        for _ in range(int(rng.integers(lo, hi + 1))):
            start = center + rng.uniform(-0.25, 0.25, 3) * axes
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            pts_line = [start]
            for _ in range(4):
                direction = direction + 0.4 * rng.normal(size=3)
                direction /= np.linalg.norm(direction)
                pts_line.append(pts_line[-1] + direction * 0.22 * axes.mean())
            radius = rng.uniform(0.02, 0.035) * n
            d = _tube_distance(pts, pts_line).reshape(body.shape)
            vessels = np.maximum(vessels, np.exp(-((d / radius) ** 2)))
    vessel_region = lung & ~airway
    vol = np.where(vessel_region, vol + vessels * (band["vessel"] - vol), vol)

    vol = ndimage.gaussian_filter(vol, sigma=0.6)
    if params.noise_amp > 0:
        noise = rng.standard_normal(body.shape)
        if params.noise_sigma > 0:
            noise = ndimage.gaussian_filter(noise, sigma=params.noise_sigma)
        noise *= params.noise_amp / max(noise.std(), 1e-12)
        vol = vol + noise * body
    vol = np.clip(vol, 0.0, 1.0)

    lung_frac = lung.sum(axis=(1, 2)) / np.maximum(body.sum(axis=(1, 2)), 1)
    trachea = (trachea_d.reshape(body.shape) <= r_air) & body & ~lung
    labels = np.where(lung_frac >= 0.1, 1, np.where(trachea.any(axis=(1, 2)), 2, 0))

    volume = Volume(vol, spacing_mm=params.spacing_mm, provenance="real-phantom",
                    id=f"phantom-{params.seed}")
    return Phantom(volume, lung, airway, body, labels.astype(np.int64))


def generate_phantom(params: PhantomParams) -> Volume:
    return render_phantom(params).volume


def phantom_corpus(n: int, seed: int = 0, **overrides) -> list:
    """``n`` phantoms with per-phantom seeds derived from ``seed``."""
    seeds = np.random.SeedSequence(seed).generate_state(n)
    return [render_phantom(PhantomParams(seed=int(s), **overrides)) for s in seeds]

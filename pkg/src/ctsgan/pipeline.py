"""Manifest-driven pipeline stages shared by the command line and the demos.

A manifest is one JSON document with a section per stage. Every stage reads
its inputs from, and writes its artifacts under, ``output_dir``; nothing else
is consulted, so re-running a stage from the same manifest reproduces its
files byte for byte.
"""

from __future__ import annotations

import copy
import json
import shutil
import tempfile
from dataclasses import asdict
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import torch

from ctsgan import detect, evalmetrics, nodulesim, sgan
from ctsgan.losses import train as train_sgan
from ctsgan.voldata import Volume, load_volume, phantom_corpus, save_volume

FORMAT_VERSION = 1

DEFAULTS = {
    "phantom": {"count": 200, "heldout": 50, "size": 32, "seed": 11},
    "sgan": {"steps": 3000, "log_every": 50, "config": {}},
    "generate": {"count": 50, "seed": 10_000},
    "metrics": {"extractor_steps": 400, "extractor_seed": 0, "n_pairings": 5, "seed": 0},
    "nodulesim": {"cases_per_domain": 30, "steps": 300, "width": 8, "seed": 3},
    "detect": {
        "sizes": [2, 3, 4, 5, 6, 7],
        "seeds": [0, 1, 2],
        "real_per_domain": 48,
        "synthetic_count": 96,
        "seed": 21,
        "classifier": {},
    },
    "montage": {"tiles": 8},
}
SEED_OFFSETS = {"phantom": 11, "sgan": 0, "generate": 10_000, "metrics": 0, "nodulesim": 3, "detect": 21}
STAGE_INPUTS = {
    "phantom": ["phantom"],
    "train-sgan": ["phantom", "sgan"],
    "generate": ["sgan", "generate"],
    "metrics": ["phantom", "generate", "metrics"],
    "inject": ["generate", "nodulesim"],
    "erase": ["generate", "nodulesim"],
    "detect": ["phantom", "sgan", "nodulesim", "detect"],
    "experiment": ["phantom", "sgan", "generate", "metrics", "nodulesim", "detect"],
}


class ManifestError(ValueError):
    """Invalid or incomplete manifest; ``section`` names the offending part."""

    def __init__(self, message: str, section: str = ""):
        super().__init__(message)
        self.section = section


def load_manifest(path) -> dict:
    path = Path(path)
    try:
        m = json.loads(path.read_text())
    except FileNotFoundError:
        raise ManifestError(f"manifest {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ManifestError(f"manifest {path} is not valid JSON: {exc}") from None
    if not isinstance(m, dict):
        raise ManifestError("manifest must be a JSON object")
    if m.get("format_version") != FORMAT_VERSION:
        raise ManifestError(f"manifest format_version must be {FORMAT_VERSION}", "format_version")
    if "output_dir" not in m:
        raise ManifestError("manifest has no output_dir", "output_dir")
    out = Path(m["output_dir"])
    if not out.is_absolute():
        m["output_dir"] = str((path.parent / out).resolve())
    return m


def section(m: dict, name: str) -> dict:
    """Stage settings: manifest values layered over the defaults."""
    if name not in m:
        raise ManifestError(f"manifest is missing the [{name}] section", name)
    merged = copy.deepcopy(DEFAULTS.get(name, {}))
    if "seed" in m:
        # the global seed shifts every stage seed the manifest leaves unset
        merged["seed"] = int(m["seed"]) + SEED_OFFSETS.get(name, 0)
    merged.update(m[name])
    return merged


def check_sections(m: dict, stage: str) -> None:
    for name in STAGE_INPUTS.get(stage, []):
        section(m, name)


def apply_overrides(m: dict, overrides: Dict[str, object]) -> dict:
    """``{"generate.count": 10}`` style scalar overrides; only existing-or-default keys."""
    m = copy.deepcopy(m)
    for key, value in overrides.items():
        sec, _, field = key.partition(".")
        if not field:
            m[sec] = value
            continue
        m.setdefault(sec, {})[field] = value
    return m


def _out(m: dict, *parts) -> Path:
    p = Path(m["output_dir"]).joinpath(*parts)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _log(stream, **rec) -> None:
    if stream is not None:
        stream.write(json.dumps(rec, sort_keys=True) + "\n")
        stream.flush()


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"{path} is missing; run the {stage} stage first")
    return path


# ------------------------------------------------------------------ phantom


def stage_phantom(m: dict, log=None) -> Path:
    cfg = section(m, "phantom")
    d = _out(m, "phantoms")
    phantoms = phantom_corpus(cfg["count"] + cfg["heldout"], seed=cfg["seed"], size=cfg["size"])
    ids = []
    for k, ph in enumerate(phantoms):
        vid = f"phantom-{k:04d}"
        save_volume(Volume(ph.volume.voxels, ph.volume.spacing_mm, id=vid), d / vid)
        np.save(d / f"{vid}.lung.npy", ph.lung_mask)
        np.save(d / f"{vid}.labels.npy", ph.plane_labels)
        ids.append(vid)
    index = {"train": ids[: cfg["count"]], "heldout": ids[cfg["count"] :]}
    _write_json(d / "index.json", index)
    _log(log, stage="phantom", count=len(ids))
    return d


def load_phantoms(m: dict, split: str) -> List[nodulesim.Case]:
    d = _require(Path(m["output_dir"]) / "phantoms" / "index.json", "phantom").parent
    ids = json.loads((d / "index.json").read_text())[split]
    return [nodulesim.Case(load_volume(d / i), np.load(d / f"{i}.lung.npy")) for i in ids]


def _plane_labels(m: dict, split: str) -> List[np.ndarray]:
    d = Path(m["output_dir"]) / "phantoms"
    ids = json.loads((d / "index.json").read_text())[split]
    return [np.load(d / f"{i}.labels.npy") for i in ids]


# --------------------------------------------------------------------- sgan


def sgan_config(m: dict) -> sgan.SGANConfig:
    cfg = section(m, "sgan")
    extra = {k: cfg[k] for k in ("seed",) if k in cfg}
    return sgan.SGANConfig(**{**cfg["config"], **extra, "S": section(m, "phantom")["size"]})


def stage_train_sgan(m: dict, log=None) -> Path:
    cfg = section(m, "sgan")
    corpus = [c.volume for c in load_phantoms(m, "train")]
    state = sgan.build_model(sgan_config(m))
    train_sgan(state, corpus, cfg["steps"], seed=cfg.get("seed", 0), log_stream=log, log_every=cfg["log_every"])
    d = Path(m["output_dir"]) / "sgan"
    sgan.save_checkpoint(state, d)
    return d


def load_generator(m: dict) -> sgan.ModelState:
    return sgan.load_checkpoint(_require(Path(m["output_dir"]) / "sgan", "train-sgan"))


# ----------------------------------------------------------------- generate


def stage_generate(m: dict, log=None) -> Path:
    cfg = section(m, "generate")
    model = load_generator(m)
    d = _out(m, "generated")
    ids = []
    for k in range(cfg["count"]):
        v = sgan.generate_volume(model, cfg["seed"] + k)
        save_volume(v, d / v.id)
        ids.append(v.id)
    _write_json(d / "index.json", {"ids": ids})
    _log(log, stage="generate", count=len(ids))
    return d


def load_generated(m: dict) -> List[Volume]:
    d = _require(Path(m["output_dir"]) / "generated" / "index.json", "generate").parent
    return [load_volume(d / i) for i in json.loads((d / "index.json").read_text())["ids"]]


# ------------------------------------------------------------------ metrics


def stage_metrics(m: dict, log=None) -> Dict[str, evalmetrics.MetricReport]:
    cfg = section(m, "metrics")
    held = load_phantoms(m, "heldout")
    train = load_phantoms(m, "train")
    labelled = [_Labelled(c.volume, lab) for c, lab in zip(held, _plane_labels(m, "heldout"))]
    f, acc = evalmetrics.train_feature_extractor(labelled, steps=cfg["extractor_steps"], seed=cfg["extractor_seed"])
    _log(log, stage="metrics", extractor_accuracy=acc)
    d = _out(m, "metrics")
    f.save(d / "extractor")
    held_v = [c.volume for c in held]
    gen = load_generated(m)
    real_v = [c.volume for c in train[: len(held_v)]]
    rows = {
        "Real": evalmetrics.metric_report(real_v, held_v, f, np.random.default_rng(cfg["seed"]), cfg["n_pairings"]),
        "CT-SGAN": evalmetrics.metric_report(gen, held_v, f, np.random.default_rng(cfg["seed"]), cfg["n_pairings"]),
    }
    _write_json(d / "report.json", {k: asdict(v) for k, v in rows.items()})
    (d / "table.txt").write_text(evalmetrics.render_table(rows) + "\n")
    return rows


class _Labelled:
    def __init__(self, volume, plane_labels):
        self.volume, self.plane_labels = volume, plane_labels


# ---------------------------------------------------------------- nodulesim


def _nodule_cases(m: dict) -> List[nodulesim.Case]:
    cfg = section(m, "nodulesim")
    n = cfg["cases_per_domain"]
    return nodulesim.make_cases(n, cfg["seed"], "A") + nodulesim.make_cases(n, cfg["seed"] + 1, "B")


def train_nodule_tools(m: dict, log=None):
    """Train (or reload) injector and eraser under ``output_dir/nodules``."""
    cfg = section(m, "nodulesim")
    d = _out(m, "nodules")
    if (d / "injector" / "nodulegan.json").exists() and (d / "eraser" / "nodulegan.json").exists():
        return nodulesim.NoduleGAN.load(d / "injector"), nodulesim.NoduleGAN.load(d / "eraser")
    cases = _nodule_cases(m)
    inj = nodulesim.NoduleGAN(nodulesim.NoduleGANConfig("injector", width=cfg["width"], seed=cfg["seed"]))
    nodulesim.train_nodule_gan(inj, nodulesim.voi_pair_sampler(cases, "injector"), cfg["steps"], seed=cfg["seed"],
                               log_stream=log)
    era = nodulesim.NoduleGAN(nodulesim.NoduleGANConfig("eraser", width=cfg["width"], seed=cfg["seed"] + 1))
    nodulesim.train_nodule_gan(era, nodulesim.voi_pair_sampler(cases, "eraser", inj), cfg["steps"],
                               seed=cfg["seed"] + 1, log_stream=log)
    inj.save(d / "injector")
    era.save(d / "eraser")
    return inj, era


def _plan_to_json(plan) -> list:
    return [asdict(s) for s in plan]


def stage_inject(m: dict, log=None) -> Path:
    """Insert planned nodules into every generated volume."""
    cfg = section(m, "nodulesim")
    inj, _ = train_nodule_tools(m, log)
    rng = np.random.default_rng(np.random.SeedSequence([cfg["seed"], 1]))
    d = _out(m, "nodules", "injected")
    plans = {}
    skipped = 0
    for v in load_generated(m):
        lung = nodulesim.estimate_lung_mask(v.voxels)
        try:
            plan = nodulesim.sample_nodule_plan(rng, lung_mask=lung)
        except nodulesim.PlacementError:
            # no usable lung region in this sample; it is copied through untouched
            plan, skipped = [], skipped + 1
        out = v
        for spec in plan:
            out = nodulesim.inject_nodule(inj, out, spec, rng, lung)
        save_volume(out, d / v.id)
        plans[v.id] = _plan_to_json(plan)
    _write_json(d / "plans.json", plans)
    _log(log, stage="inject", count=len(plans), skipped=skipped)
    return d


def stage_erase(m: dict, log=None) -> dict:
    """Erase the injected nodules again and measure the roundtrip error per VOI."""
    _, era = train_nodule_tools(m, log)
    src = _require(Path(m["output_dir"]) / "nodules" / "injected" / "plans.json", "inject").parent
    plans = json.loads((src / "plans.json").read_text())
    originals = {v.id: v for v in load_generated(m)}
    d = _out(m, "nodules", "erased")
    errors = []
    for vid, plan in sorted(plans.items()):
        v = load_volume(src / vid)
        for s in plan:
            spec = nodulesim.NoduleSpec(tuple(s["center"]), s["radius_vox"], s["intensity"])
            v = nodulesim.erase_nodule(era, v, spec, provenance="injected")
            E = nodulesim.voi_edge(spec.radius_vox)
            a = nodulesim.extract_voi(originals[vid], spec.center, E).cube
            b = nodulesim.extract_voi(v, spec.center, E).cube
            errors.append(float(np.abs(a - b).mean()))
        save_volume(v, d / vid)
    summary = {"voi_count": len(errors), "roundtrip_mae_mean": float(np.mean(errors)) if errors else 0.0,
               "roundtrip_mae_max": float(np.max(errors)) if errors else 0.0}
    _write_json(d / "roundtrip.json", summary)
    _log(log, stage="erase", **summary)
    return summary


# ------------------------------------------------------------------- detect


def _synthetic_manifest(model, inj, radius: float, count: int, seed: int, directory: Path) -> Path:
    """SGAN volumes, half carrying one injected nodule of ``radius``; all in the train split."""
    rng = np.random.default_rng(seed)
    entries, volumes = [], {}
    for k in range(count):
        v = sgan.generate_volume(model, seed * 1000 + k)
        label = "clean"
        if k % 2 == 0:
            lung = nodulesim.estimate_lung_mask(v.voxels)
            try:
                spec = nodulesim.sample_nodule_plan(rng, {1: 1.0}, radius, lung)[0]
            except nodulesim.PlacementError:
                continue
            v = nodulesim.inject_nodule(inj, v, spec, rng, lung)
            label = "nodule"
        volumes[v.id] = v
        entries.append(nodulesim.MixEntry(v.id, "synthetic", label, "injected" if label == "nodule" else "untouched",
                                          "train"))
    return nodulesim.write_dataset(nodulesim.DatasetMix(entries), volumes, directory)


def _real_manifest(m: dict, inj, era, radius: float, directory: Path) -> Path:
    cfg = section(m, "detect")
    n = cfg["real_per_domain"]
    a = nodulesim.make_cases(n, cfg["seed"], "A", with_nodules=True, count_dist={1: 1.0}, radius_dist=radius)
    b = nodulesim.make_cases(n, cfg["seed"] + 1, "B")
    rng = np.random.default_rng(np.random.SeedSequence([cfg["seed"], int(radius * 10)]))
    mix, vols = nodulesim.build_unbiased_dataset(a, b, inj, era, rng, count_dist={1: 1.0}, radius_dist=radius)
    return nodulesim.write_dataset(mix, vols, directory)


def stage_detect(m: dict, log=None, keep_data: bool = False) -> Dict[float, detect.RegimeReport]:
    cfg = section(m, "detect")
    inj, era = train_nodule_tools(m, log)
    model = load_generator(m)
    ccfg = detect.ClassifierConfig(**{k: tuple(map(tuple, v)) if k == "fires" else v
                                      for k, v in cfg["classifier"].items()})
    out = _out(m, "detect")
    scratch = Path(tempfile.mkdtemp(prefix="detect-", dir=out)) if not keep_data else out / "data"

    def build(radius, seeds):
        base = scratch / f"r{radius:g}"
        real = _real_manifest(m, inj, era, radius, base / "real")
        syn = _synthetic_manifest(model, inj, radius, cfg["synthetic_count"], cfg["seed"] + 7, base / "synthetic")
        _log(log, stage="detect", radius=radius, event="data-ready")
        return real, [syn] * len(seeds)

    try:
        reports = detect.sweep_nodule_sizes(cfg["sizes"], build, ccfg, cfg["seeds"])
    finally:
        if not keep_data:
            shutil.rmtree(scratch, ignore_errors=True)
    _write_json(out / "report.json", {f"{r:g}": rep.to_dict() for r, rep in reports.items()})
    (out / "table.txt").write_text(detect.render_sweep_table(reports) + "\n")
    return reports


# ------------------------------------------------------------------ montage


def montage_grid(voxels: np.ndarray, tiles: int = 8) -> np.ndarray:
    """Rows of axial, coronal and sagittal planes at evenly spaced positions, as uint8."""
    vox = np.clip(np.asarray(voxels, dtype=np.float64), 0, 1)
    rows = []
    for axis in range(3):
        n = vox.shape[axis]
        idx = np.linspace(0, n - 1, tiles + 2)[1:-1].round().astype(int)
        rows.append([np.take(vox, i, axis=axis) for i in idx])
    h = max(t.shape[0] for r in rows for t in r)
    w = max(t.shape[1] for r in rows for t in r)
    grid = np.zeros((3 * h, tiles * w))
    for r, row in enumerate(rows):
        for c, t in enumerate(row):
            grid[r * h : r * h + t.shape[0], c * w : c * w + t.shape[1]] = t
    return (grid * 255).round().astype(np.uint8)


def write_montage(volume_path, out_path, tiles: int = 8, scale: int = 4) -> Path:
    from PIL import Image

    grid = montage_grid(load_volume(volume_path).voxels, tiles)
    img = Image.fromarray(grid).resize((grid.shape[1] * scale, grid.shape[0] * scale), Image.NEAREST)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    img.save(out_path, format="PNG")
    return out_path


# --------------------------------------------------------------- experiment


def run_experiment(m: dict, log=None) -> dict:
    """Every stage in order, plus montages of one real and one generated volume."""
    check_sections(m, "experiment")
    stage_phantom(m, log)
    stage_train_sgan(m, log)
    stage_generate(m, log)
    metrics = stage_metrics(m, log)
    stage_inject(m, log)
    roundtrip = stage_erase(m, log)
    reports = stage_detect(m, log)
    tiles = section(m, "montage")["tiles"] if "montage" in m else DEFAULTS["montage"]["tiles"]
    root = Path(m["output_dir"])
    first_real = json.loads((root / "phantoms" / "index.json").read_text())["heldout"][0]
    first_gen = json.loads((root / "generated" / "index.json").read_text())["ids"][0]
    write_montage(root / "phantoms" / first_real, root / "montages" / "real.png", tiles)
    write_montage(root / "generated" / first_gen, root / "montages" / "generated.png", tiles)
    return {"metrics": metrics, "roundtrip": roundtrip, "detect": reports}

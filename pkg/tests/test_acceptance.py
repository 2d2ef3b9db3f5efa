"""Acceptance suite: one test per criterion, each reporting PASS/FAIL with its measurement.

Run alone with ``pytest -v tests/test_acceptance.py`` (or ``python tests/test_acceptance.py``).
Criteria 6, 7 and 9 train models and take tens of minutes on one CPU core.
"""

import io
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from conftest import CRITERIA
from ctsgan import pipeline
from ctsgan.cli import main as cli_main
from ctsgan.evalmetrics import fid, inception_score, slicewise_fid, train_feature_extractor
from ctsgan.losses import BatchScores, alternating_step, gradient_penalty, js_objective
from ctsgan.nodulesim import (
    build_unbiased_dataset,
    erase_nodule,
    extract_voi,
    inject_nodule,
    label_domain_mutual_information,
    make_cases,
    sample_nodule_plan,
    split_sizes,
    voi_edge,
)
from ctsgan.sgan import SGANConfig, assemble_volume, build_model, generate_volume
from ctsgan.voldata import Volume, adjacent_plane_correlation, extract_slice3, phantom_corpus


def record(n, ok, detail, elapsed=None, limit=None):
    if elapsed is not None:
        detail = f"{detail} [{elapsed:.1f}s / limit {limit:g}s]"
        ok = ok and elapsed < limit
    CRITERIA[n] = (bool(ok), detail)
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}")
    assert ok, detail


# ----------------------------------------------------------------- shared runs

TOY = {
    "format_version": 1,
    "seed": 0,
    "phantom": {"count": 200, "heldout": 50, "size": 32},
    "sgan": {"steps": 3000, "log_every": 250},
    "generate": {"count": 50},
    "metrics": {"extractor_steps": 400},
    "nodulesim": {},
    "detect": {},
}


@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    m = {**TOY, "output_dir": str(root / "out")}
    pipeline.stage_phantom(m)
    return m


@pytest.fixture(scope="module")
def nodule_tools(toy):
    return pipeline.train_nodule_tools(toy)


# ------------------------------------------------------------------ criteria


def test_criterion_01_assembly_roundtrip():
    # phantom synthesis is input preparation, not part of the timed round trip
    corpora = {S: [ph.volume for ph in phantom_corpus(20, seed=S, size=S)] for S in (8, 32)}
    t = time.perf_counter()
    exact, law = True, True
    for S, vols in corpora.items():
        for v in vols:
            slices = [extract_slice3(v, i) for i in range(1, S - 1)]
            law &= len(slices) == S - 2
            exact &= np.array_equal(assemble_volume(slices).voxels, v.voxels)
    big = Volume(np.zeros((224, 8, 8), np.float32))
    n224 = len([extract_slice3(big, i) for i in range(1, big.depth - 1)])
    with pytest.raises(IndexError):
        extract_slice3(big, 223)
    record(1, exact and law and n224 == 222, f"bit-exact={exact} count-law={law} slices@224={n224}",
           time.perf_counter() - t, 10)


def _transcribed(slice_real, slice_fake, slab_real, slab_fake):
    D = lambda s: 1.0 / (1.0 + math.exp(-s))
    total = 0.0
    for i in range(len(slice_real)):
        total += sum(-math.log(D(s)) for s in slice_real[i]) / len(slice_real[i])
        total += sum(-math.log(1.0 - D(s)) for s in slice_fake[i]) / len(slice_fake[i])
    total += sum(-math.log(D(s)) for s in slab_real) / len(slab_real)
    total += sum(-math.log(1.0 - D(s)) for s in slab_fake) / len(slab_fake)
    return total


def test_criterion_02_objective_oracle():
    t = time.perf_counter()
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        N, B = int(rng.integers(1, 6)), int(rng.integers(1, 6))
        raw = [rng.normal(scale=3, size=s).tolist() for s in ((N, B), (N, B), (B,), (B,))]
        worst = max(worst, abs(float(js_objective(BatchScores(*raw)).f_volume) - _transcribed(*raw)))
    half = max(abs(float(js_objective(BatchScores(np.zeros((N, 3)), np.zeros((N, 3)), np.zeros(3), np.zeros(3))).f_volume)
                   - (2 * N + 2) * math.log(2)) for N in (1, 4, 9))
    record(2, worst < 1e-6 and half < 1e-6, f"max |impl-oracle|={worst:.2e} D=0.5 error={half:.2e}",
           time.perf_counter() - t, 5)


def test_criterion_03_gradient_penalty():
    t = time.perf_counter()
    rng = np.random.default_rng(1)
    analytic = 0.0
    for _ in range(5):
        w = torch.as_tensor(rng.normal(size=9))
        x = torch.as_tensor(rng.normal(size=(6, 9)))
        analytic = max(analytic, abs(float(gradient_penalty(lambda s: s @ w, x, 10.0)) - 5.0 * float(w @ w)))
    torch.manual_seed(0)
    net = torch.nn.Sequential(torch.nn.Linear(5, 6), torch.nn.Tanh(), torch.nn.Linear(6, 1)).double()
    x = torch.randn(7, 5, dtype=torch.float64)
    scorer = lambda s: net(s).squeeze(1)
    params = list(net.parameters())
    grads = torch.autograd.grad(gradient_penalty(scorer, x, 2.0), params, allow_unused=True)
    worst, h = 0.0, 1e-6
    for p, g in zip(params, grads):
        g = torch.zeros_like(p) if g is None else g
        flat = p.data.view(-1)
        for k in range(flat.numel()):
            orig = flat[k].item()
            flat[k] = orig + h
            up = gradient_penalty(scorer, x, 2.0).item()
            flat[k] = orig - h
            down = gradient_penalty(scorer, x, 2.0).item()
            flat[k] = orig
            fd = (up - down) / (2 * h)
            worst = max(worst, abs(fd - g.view(-1)[k].item()) / max(1.0, abs(fd)))
    record(3, analytic < 1e-6 and worst < 1e-4, f"analytic error={analytic:.2e} fd relative error={worst:.2e}",
           time.perf_counter() - t, 30)


def test_criterion_04_phase_isolation():
    t = time.perf_counter()
    cfg = SGANConfig(gen_stages=((16, 2), (8, 2), (8, 2)), slice_disc_stages=((8, 2), (8, 2)),
                     slab_disc_stages=((4, 2), (4, 2)), S=32, T=8, N=2, batch_size=2)
    st = build_model(cfg)
    vols = [p.volume for p in phantom_corpus(4, seed=0)]
    snap = lambda *ms: [p.detach().clone() for m in ms for p in m.parameters()]
    same = lambda a, b: all(torch.equal(x, y) for x, y in zip(a, b))
    seen = {}
    orig_d, orig_g = st.opt_d.step, st.opt_g.step

    def d_step(*a, **k):
        seen["g_before"] = snap(st.generator, st.sequencer)
        out = orig_d(*a, **k)
        seen["g_after_d"] = snap(st.generator, st.sequencer)
        seen["d_after_d"] = snap(st.d_slice, st.d_slab)
        return out

    def g_step(*a, **k):
        out = orig_g(*a, **k)
        seen["d_after_g"] = snap(st.d_slice, st.d_slab)
        return out

    st.opt_d.step, st.opt_g.step = d_step, g_step
    rng = np.random.default_rng(0)
    violations = 0
    for k in range(50):
        g0 = snap(st.generator, st.sequencer)
        alternating_step(st, vols[k % 2 : k % 2 + 2], rng)
        violations += not (same(g0, seen["g_before"]) and same(g0, seen["g_after_d"])
                           and same(seen["d_after_d"], seen["d_after_g"]))
    record(4, violations == 0, f"steps=50 violations={violations}", time.perf_counter() - t, 60)


def test_criterion_05_metric_identities():
    t = time.perf_counter()
    rng = np.random.default_rng(2)
    a = rng.normal(size=(40, 6))
    mu, cov = a.mean(0), np.cov(a, rowvar=False)
    self_fid = fid(mu, cov, mu, cov)
    shift = 0.0
    for _ in range(3):
        d = rng.normal(size=6)
        shift = max(shift, abs(fid(d, np.eye(6), np.zeros(6), np.eye(6)) - d @ d))
    is_same = abs(inception_score(np.tile([0.1, 0.7, 0.2], (9, 1))) - 1.0)
    is_onehot = max(abs(inception_score(np.tile(np.eye(C), (2, 1))) - C) for C in (2, 3, 4, 7))
    ok = self_fid == 0.0 and shift < 1e-5 and is_same < 1e-9 and is_onehot < 1e-9
    record(5, ok, f"FID(X,X)={self_fid} shift error={shift:.1e} IS(same)-1={is_same:.1e} IS(onehot)-C={is_onehot:.1e}",
           time.perf_counter() - t, 5)


def test_criterion_06_toy_training(toy):
    t = time.perf_counter()
    held = pipeline.load_phantoms(toy, "heldout")
    from ctsgan.pipeline import _plane_labels, _Labelled

    f, acc = train_feature_extractor([_Labelled(c.volume, lab) for c, lab in zip(held, _plane_labels(toy, "heldout"))],
                                     steps=400, seed=0)
    held_v = [c.volume for c in held]
    count = pipeline.section(toy, "generate")["count"]
    seed0 = pipeline.section(toy, "generate")["seed"]
    untrained = build_model(pipeline.sgan_config(toy))
    before = [generate_volume(untrained, seed0 + k) for k in range(count)]
    fid_before = slicewise_fid(before, held_v, f, np.random.default_rng(0), n_pairings=5)[0]
    pipeline.stage_train_sgan(toy)
    pipeline.stage_generate(toy)
    after = pipeline.load_generated(toy)
    fid_after = slicewise_fid(after, held_v, f, np.random.default_rng(0), n_pairings=5)[0]
    corr = float(np.mean([adjacent_plane_correlation(v.voxels) for v in after]))
    gain = 1 - fid_after / fid_before
    record(6, gain >= 0.30 and corr > 0.8,
           f"extractor acc={acc:.3f} FID untrained={fid_before:.1f} trained={fid_after:.1f} "
           f"improvement={100 * gain:.1f}% adjacent-plane corr={corr:.3f}",
           time.perf_counter() - t, 3 * 3600)


def test_criterion_07_nodule_locality_roundtrip(toy):
    t = time.perf_counter()
    inj, era = pipeline.train_nodule_tools(toy)
    rng = np.random.default_rng(5)
    local, maes = True, []
    for c in make_cases(8, 77, "A") + make_cases(8, 78, "B"):
        v = c.volume
        for spec in sample_nodule_plan(rng, lung_mask=c.lung_mask):
            E = voi_edge(spec.radius_vox)
            lo = np.array(spec.center) - E // 2
            outside = np.ones(v.shape, bool)
            outside[lo[0] : lo[0] + E, lo[1] : lo[1] + E, lo[2] : lo[2] + E] = False
            a = inject_nodule(inj, v, spec, rng, c.lung_mask)
            b = erase_nodule(era, a, spec, provenance="injected")
            local &= np.array_equal(a.voxels[outside], v.voxels[outside])
            local &= np.array_equal(b.voxels[outside], v.voxels[outside])
            maes.append(float(np.abs(extract_voi(b, spec.center, E).cube - extract_voi(v, spec.center, E).cube).mean()))
    mae = float(np.mean(maes))
    record(7, local and mae < 0.05, f"outside-VOI bit-exact={local} roundtrip VOI MAE mean={mae:.4f} "
           f"max={max(maes):.4f} over {len(maes)} nodules", time.perf_counter() - t, 20 * 60)


def test_criterion_08_dataset_fairness(nodule_tools):
    inj, era = nodule_tools
    a = make_cases(80, 31, "A", with_nodules=True)
    b = make_cases(80, 32, "B")
    t = time.perf_counter()
    mix, vols = build_unbiased_dataset(a, b, inj, era, np.random.default_rng(0))
    balance = max(abs(sum(e.label == "nodule" for e in mix.entries if e.domain == d)
                      - sum(e.label == "clean" for e in mix.entries if e.domain == d)) for d in ("A", "B"))
    mi = label_domain_mutual_information(mix.entries)
    n = len(mix.entries)
    fractions = [len(mix.split(s)) / n for s in ("train", "val", "test")]
    ratios_ok = np.allclose(fractions, (0.75, 0.125, 0.125)) and split_sizes(1200) == (900, 150, 150)
    record(8, n == 160 and balance <= 1 and mi < 0.01 and ratios_ok,
           f"volumes={n} label imbalance={balance} MI={mi:.2e} bits split fractions={fractions}",
           time.perf_counter() - t, 60)


def test_criterion_09_regime_ordering(toy, nodule_tools):
    t = time.perf_counter()
    if not (Path(toy["output_dir"]) / "sgan").exists():
        pipeline.stage_train_sgan(toy)
    reports = pipeline.stage_detect(toy)
    cfg = pipeline.section(toy, "detect")
    wins = 0
    lines = []
    for k, seed in enumerate(cfg["seeds"]):
        real = np.mean([rep.accuracies["real-only"][k] for rep in reports.values()])
        pre = np.mean([rep.accuracies["pretrain+finetune"][k] for rep in reports.values()])
        syn = np.mean([rep.accuracies["synthetic-only"][k] for rep in reports.values()])
        wins += pre >= real
        lines.append(f"seed {seed}: real={real:.3f} synthetic={syn:.3f} pretrain+finetune={pre:.3f}")
    record(9, wins >= 2, f"pretrain+finetune >= real-only in {wins}/3 seeds; " + "; ".join(lines),
           time.perf_counter() - t, 45 * 60)


TINY_SGAN = {"gen_stages": [[16, 2], [8, 2], [8, 2]], "slice_disc_stages": [[8, 2], [8, 2]],
             "slab_disc_stages": [[4, 2], [4, 2]], "batch_size": 2, "N": 2, "T": 4}
TINY = {
    "format_version": 1, "seed": 4, "output_dir": "out",
    "phantom": {"count": 6, "heldout": 4},
    "sgan": {"steps": 3, "log_every": 1, "config": TINY_SGAN},
    "generate": {"count": 4},
    "metrics": {"extractor_steps": 30, "n_pairings": 2},
    "nodulesim": {"cases_per_domain": 3, "steps": 3, "width": 4},
    "detect": {"sizes": [3], "seeds": [0], "real_per_domain": 16, "synthetic_count": 6,
               "classifier": {"stem": 4, "fires": [[4, 8], [4, 8]], "batch_size": 4, "max_steps": 3}},
}


def _tree(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_10_determinism(tmp_path):
    t = time.perf_counter()
    trees = []
    for run in ("a", "b"):
        d = tmp_path / run
        d.mkdir()
        (d / "m.json").write_text(json.dumps(TINY))
        for stage in ("phantom", "train-sgan", "generate", "metrics", "inject", "erase", "detect"):
            code = cli_main([stage, str(d / "m.json")], stdout=io.StringIO(), stderr=io.StringIO())
            assert code == 0, stage
        vol = sorted((d / "out" / "generated").glob("*.json"))[0]
        cli_main(["montage", str(vol.with_suffix("")), str(d / "out" / "montage.png")], stdout=io.StringIO())
        trees.append(_tree(d / "out"))
    differing = sorted(k for k in set(trees[0]) | set(trees[1]) if trees[0].get(k) != trees[1].get(k))
    record(10, not differing, f"{len(trees[0])} artifacts compared, differing={differing[:5]}",
           time.perf_counter() - t, 600)


if __name__ == "__main__":
    raise SystemExit(pytest.main(["-v", __file__]))

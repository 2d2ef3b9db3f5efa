import numpy as np
import pytest
import torch

from ctsgan.detect import (
    REGIMES,
    ClassifierConfig,
    accuracy,
    batch_loss,
    build_classifier,
    evaluate_classifier,
    predict,
    render_sweep_table,
    run_regimes,
    sweep_nodule_sizes,
    train_classifier,
)
from ctsgan.nodulesim import DatasetMix, MixEntry
from ctsgan.voldata import Volume, save_volume

TINY = ClassifierConfig(stem=4, fires=((4, 8), (4, 8)), batch_size=8, max_steps=20)


def _toy(n, seed, size=16):
    """Clean noise cubes vs the same with a bright central sphere."""
    rng = np.random.default_rng(seed)
    X = rng.random((n, size, size, size)).astype(np.float32) * 0.3
    y = np.arange(n) % 2
    g = np.arange(size) - size // 2
    ball = (g[:, None, None] ** 2 + g[None, :, None] ** 2 + g[None, None, :] ** 2) < 9
    X[y == 1] = np.where(ball, 0.9, X[y == 1])
    return X, y


def test_parameter_count_is_small():
    n = sum(p.numel() for p in build_classifier(ClassifierConfig()).parameters())
    assert 10_000 < n < 100_000


def test_toy_separable_corpus():
    cfg = ClassifierConfig(batch_size=16, max_steps=500)
    model, log = train_classifier(cfg, _toy(64, 0))
    assert accuracy(predict(model, _toy(40, 1)[0]), _toy(40, 1)[1]) > 0.95


def test_warm_start_step_zero_loss():
    X, y = _toy(16, 2)
    init, _ = train_classifier(TINY, (X, y), steps=5)
    idx = np.random.default_rng(TINY.seed).integers(0, len(X), size=TINY.batch_size)
    _, log = train_classifier(TINY, (X, y), init=init, steps=1)
    assert abs(log[0]["loss"] - batch_loss(init, X[idx], y[idx])) < 1e-6


def test_seeds_give_distinct_weights_and_runs_repeat():
    X, y = _toy(16, 3)
    ws = []
    for seed in (0, 1, 2):
        m, _ = train_classifier(ClassifierConfig(**{**TINY.__dict__, "seed": seed}), (X, y), steps=2)
        ws.append(torch.cat([p.flatten() for p in m.parameters()]))
    assert not torch.equal(ws[0], ws[1]) and not torch.equal(ws[1], ws[2])
    again, _ = train_classifier(TINY, (X, y), steps=2)
    assert torch.equal(ws[0], torch.cat([p.flatten() for p in again.parameters()]))


def test_accuracy_examples():
    y = np.array([0, 1] * 5)
    assert accuracy(np.ones(10), y) == 0.5
    assert accuracy(y, y) == 1.0
    p = np.random.default_rng(0).integers(0, 2, 10)
    perm = np.random.default_rng(1).permutation(10)
    assert accuracy(p, y) == accuracy(p[perm], y[perm])
    with pytest.raises(ValueError):
        accuracy([], [])


def _write_manifest(root, X, y, splits):
    entries = []
    for k, (x, label, split) in enumerate(zip(X, y, splits)):
        vid = f"v{k:03d}"
        save_volume(Volume(x, id=vid), root / "volumes" / vid)
        entries.append(MixEntry(vid, "A", "nodule" if label else "clean", "untouched", split, f"volumes/{vid}"))
    path = root / "manifest.json"
    path.write_text(DatasetMix(entries).to_json())
    return path


@pytest.fixture(scope="module")
def manifests(tmp_path_factory):
    root = tmp_path_factory.mktemp("m")
    X, y = _toy(24, 4)
    splits = ["train"] * 16 + ["val"] * 4 + ["test"] * 4
    (root / "real").mkdir()
    (root / "syn").mkdir()
    real = _write_manifest(root / "real", X, y, splits)
    Xs, ys = _toy(16, 5)
    syn = _write_manifest(root / "syn", Xs, ys, ["train"] * 16)
    return real, syn


def test_run_regimes_shape_and_shared_test(manifests):
    real, syn = manifests
    rep = run_regimes(real, syn, TINY, seeds=(0, 1, 2))
    assert set(rep.accuracies) == set(REGIMES)
    assert all(len(v) == 3 for v in rep.accuracies.values())
    assert all(0 <= a <= 1 for v in rep.accuracies.values() for a in v)
    assert len(rep.test_hash) == 64
    assert rep.to_dict()["summary"]["real-only"]["mean"] == rep.mean("real-only")
    assert evaluate_classifier(build_classifier(TINY), real, "test") in (0.0, 0.25, 0.5, 0.75, 1.0)


def test_sweep(manifests):
    real, syn = manifests
    reps = sweep_nodule_sizes([2, 3], lambda r, seeds: (real, [syn] * len(seeds)), TINY, seeds=(0,))
    assert list(reps) == [2, 3]
    assert len(render_sweep_table(reps).splitlines()) == 3
    with pytest.raises(ValueError):
        sweep_nodule_sizes([], None, TINY)


def test_empty_split_rejected(manifests):
    real, syn = manifests
    with pytest.raises(ValueError):
        evaluate_classifier(build_classifier(TINY), syn, "test")

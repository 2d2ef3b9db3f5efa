import math

import numpy as np
import pytest
from scipy import stats

from ctsgan.nodulesim import (
    COUNT_DIST,
    VOI,
    DatasetMix,
    NoduleGAN,
    NoduleGANConfig,
    NoduleSpec,
    PlacementError,
    StratificationError,
    add_procedural_nodule,
    build_unbiased_dataset,
    erase_nodule,
    extract_voi,
    inject_nodule,
    label_domain_mutual_information,
    make_cases,
    mask_center,
    paste_back,
    sample_count,
    sample_nodule_plan,
    split_sizes,
    voi_edge,
    voi_pair_sampler,
    train_nodule_gan,
    write_dataset,
)
from ctsgan.detect import load_split
from ctsgan.voldata import phantom_corpus


@pytest.fixture(scope="module")
def phantom():
    return phantom_corpus(1, seed=4)[0]


@pytest.fixture(scope="module")
def untrained():
    return NoduleGAN(NoduleGANConfig("injector", width=4)), NoduleGAN(NoduleGANConfig("eraser", width=4))


def test_voi_roundtrip_and_locality(phantom):
    v = phantom.volume
    voi = extract_voi(v, (16, 16, 16), 16)
    assert np.array_equal(paste_back(v, voi).voxels, v.voxels)
    edited = paste_back(v, VOI(np.ones_like(voi.cube), voi.origin))
    outside = np.ones(v.shape, bool)
    outside[8:24, 8:24, 8:24] = False
    assert np.array_equal(edited.voxels[outside], v.voxels[outside])
    assert (edited.voxels[8:24, 8:24, 8:24] == 1).all()


def test_voi_out_of_bounds(phantom):
    with pytest.raises(IndexError):
        extract_voi(phantom.volume, (4, 16, 16), 16)
    with pytest.raises(IndexError):
        paste_back(phantom.volume, VOI(np.zeros((16, 16, 16), np.float32), (20, 0, 0)))


def test_mask_center_geometry():
    voi = VOI(np.ones((16, 16, 16), np.float32), (0, 0, 0))
    assert np.array_equal(mask_center(voi, 0).cube, voi.cube)
    for r in (4, 5, 6, 7):
        masked = mask_center(voi, r).cube
        count = int((masked == 0).sum())
        assert abs(count - 4 / 3 * math.pi * r**3) <= 0.1 * 4 / 3 * math.pi * r**3
        assert masked[0, 0, 0] == 1 and masked[-1, -1, -1] == 1
    with pytest.raises(ValueError):
        mask_center(voi, 8)


def test_voi_edge_grows_with_radius():
    assert voi_edge(2) == 16 and voi_edge(6) == 16
    for r in np.linspace(2, 8, 13):
        E = voi_edge(r)
        assert E % 4 == 0 and E / 2 > r + 1.5


def test_procedural_nodule_brightens_lung(phantom):
    spec = sample_nodule_plan(np.random.default_rng(0), {1: 1.0}, 4.0, phantom.lung_mask)[0]
    v2 = add_procedural_nodule(phantom.volume, spec)
    z, y, x = spec.center
    assert v2.voxels[z, y, x] > phantom.volume.voxels[z, y, x] + 0.3


def test_untrained_tools_are_local_and_bounded(phantom, untrained):
    injector, eraser = untrained
    spec = sample_nodule_plan(np.random.default_rng(1), {1: 1.0}, 3.0, phantom.lung_mask)[0]
    v = phantom.volume
    E = voi_edge(spec.radius_vox)
    lo = np.array(spec.center) - E // 2
    inside = np.zeros(v.shape, bool)
    inside[lo[0]:lo[0] + E, lo[1]:lo[1] + E, lo[2]:lo[2] + E] = True
    a = inject_nodule(injector, v, spec, np.random.default_rng(0), phantom.lung_mask)
    b = erase_nodule(eraser, a, spec, provenance="injected")
    assert a.provenance == "injected" and erase_nodule(eraser, v, spec).provenance == "erased"
    for out in (a, b):
        assert np.array_equal(out.voxels[~inside], v.voxels[~inside])
        assert 0 <= out.voxels.min() and out.voxels.max() <= 1
    again = inject_nodule(injector, v, spec, np.random.default_rng(0), phantom.lung_mask)
    assert np.array_equal(a.voxels, again.voxels)


def test_inject_outside_lung_rejected(phantom, untrained):
    body_only = np.argwhere(phantom.body_mask & ~phantom.lung_mask)
    c = tuple(int(x) for x in body_only[len(body_only) // 2])
    with pytest.raises(PlacementError):
        inject_nodule(untrained[0], phantom.volume, NoduleSpec(c, 3.0), np.random.default_rng(0), phantom.lung_mask)


def test_count_distribution_chi_square():
    rng = np.random.default_rng(0)
    draws = np.array([sample_count(rng, COUNT_DIST) for _ in range(10_000)])
    ks = sorted(COUNT_DIST)
    observed = np.array([(draws == k).sum() for k in ks])
    expected = np.array([COUNT_DIST[k] for k in ks]) * len(draws)
    assert stats.chisquare(observed, expected).pvalue > 0.01


def test_plan_contract(phantom):
    assert sample_nodule_plan(np.random.default_rng(0), {0: 1.0}, lung_mask=phantom.lung_mask) == []
    for seed in range(20):
        plan = sample_nodule_plan(np.random.default_rng(seed), lung_mask=phantom.lung_mask)
        assert plan == sample_nodule_plan(np.random.default_rng(seed), lung_mask=phantom.lung_mask)
        for i, s in enumerate(plan):
            assert phantom.lung_mask[s.center] and 2 <= s.radius_vox <= 8
            for t in plan[i + 1:]:
                assert np.linalg.norm(np.subtract(s.center, t.center)) > s.radius_vox + t.radius_vox
    tiny = np.zeros((32, 32, 32), bool)
    tiny[16, 16, 16] = True
    with pytest.raises(PlacementError):
        sample_nodule_plan(np.random.default_rng(0), {2: 1.0}, 3.0, tiny)


def test_split_sizes():
    assert split_sizes(1200) == (900, 150, 150)
    assert sum(split_sizes(37)) == 37


def test_pair_sampler_shapes():
    cases = make_cases(3, 0, "A")
    inputs, targets, radii = voi_pair_sampler(cases, "injector")(np.random.default_rng(0), 4)
    assert inputs.shape == targets.shape and inputs.shape[0] == 4 and len(radii) == 4
    with pytest.raises(ValueError):
        voi_pair_sampler(cases, "eraser")


def test_nodule_gan_training_and_io(tmp_path):
    cases = make_cases(3, 0, "A")
    model = train_nodule_gan(NoduleGAN(NoduleGANConfig("injector", width=4, batch_size=2)),
                             voi_pair_sampler(cases, "injector", radius_range=(2, 4)), steps=2)
    model.save(tmp_path / "inj")
    back = NoduleGAN.load(tmp_path / "inj")
    cube = np.random.default_rng(0).random((1, 16, 16, 16)).astype(np.float32)
    assert np.array_equal(back.complete(cube, [3.0]), model.complete(cube, [3.0]))


@pytest.fixture(scope="module")
def mix(untrained):
    a = make_cases(80, 1, "A", with_nodules=True)
    b = make_cases(80, 2, "B")
    return build_unbiased_dataset(a, b, *untrained, np.random.default_rng(0))


def test_dataset_fairness(mix):
    dm, vols = mix
    for dom in ("A", "B"):
        labels = [e.label for e in dm.entries if e.domain == dom]
        assert abs(labels.count("nodule") - labels.count("clean")) <= 1
    assert label_domain_mutual_information(dm.entries) < 0.01
    for split in ("val", "test"):
        labels = [e.label for e in dm.split(split)]
        assert labels.count("nodule") == labels.count("clean")
    assert [len(dm.split(s)) for s in ("train", "val", "test")] == [120, 20, 20]
    ids = [e.id for e in dm.entries]
    assert len(ids) == len(set(ids)) == len(vols)
    pathways = {(e.domain, e.label): e.pathway for e in dm.entries}
    assert pathways == {("A", "clean"): "erased", ("A", "nodule"): "untouched",
                        ("B", "clean"): "untouched", ("B", "nodule"): "injected"}


def test_mutual_information_examples():
    from ctsgan.nodulesim import MixEntry
    biased = [MixEntry(str(i), d, l, "untouched", "train") for i, (d, l) in enumerate([("A", "nodule"), ("B", "clean")] * 4)]
    assert label_domain_mutual_information(biased) == pytest.approx(1.0)


def test_dataset_manifest_roundtrip(mix, tmp_path):
    dm, vols = mix
    path = write_dataset(dm, vols, tmp_path / "ds")
    back = DatasetMix.from_json(path.read_text())
    assert back == dm
    X, y = load_split(path, "test")
    assert X.shape == (20, 32, 32, 32) and y.sum() == 10


def test_small_corpus_rejected(untrained):
    with pytest.raises(StratificationError):
        build_unbiased_dataset(make_cases(4, 0, "A"), make_cases(20, 1, "B"), *untrained, np.random.default_rng(0))

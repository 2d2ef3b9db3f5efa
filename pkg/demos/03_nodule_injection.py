"""Train a small injector and eraser on VOIs cut from phantoms, then plant
a nodule in a clean scan and take it out again."""

import numpy as np

from ctsgan.nodulesim import (
    NoduleGAN,
    NoduleGANConfig,
    erase_nodule,
    inject_nodule,
    make_cases,
    sample_nodule_plan,
    train_nodule_gan,
    voi_pair_sampler,
)

cases = make_cases(12, seed=0, domain="A")
injector = NoduleGAN(NoduleGANConfig(role="injector", width=8))
train_nodule_gan(injector, voi_pair_sampler(cases, "injector"), steps=150)
eraser = NoduleGAN(NoduleGANConfig(role="eraser", width=8))
train_nodule_gan(eraser, voi_pair_sampler(cases, "eraser", injector=injector), steps=150)

rng = np.random.default_rng(5)
clean = make_cases(1, seed=99, domain="B")[0]
(spec,) = sample_nodule_plan(rng, {1: 1.0}, 4.0, clean.lung_mask)
print("nodule at", spec.center, "radius", spec.radius_vox)

with_nodule = inject_nodule(injector, clean.volume, spec, rng, lung_mask=clean.lung_mask)
back = erase_nodule(eraser, with_nodule, spec, provenance="injected")

changed = np.argwhere(with_nodule.voxels != clean.volume.voxels)
print("voxels touched by injection:", len(changed),
      "max distance from centre %.2f" % np.linalg.norm(changed - np.asarray(spec.center), axis=1).max())
c = tuple(int(x) for x in spec.center)
print("centre intensity: clean %.3f, injected %.3f, erased %.3f"
      % (clean.volume.voxels[c], with_nodule.voxels[c], back.voxels[c]))
print("roundtrip MAE %.4f" % np.abs(back.voxels - clean.volume.voxels).mean())

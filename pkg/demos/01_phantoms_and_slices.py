"""Build a few lung phantoms, look at their depth structure and cut them into
the pieces the GAN trains on: 3-plane slices and T-plane slabs."""

import numpy as np

from ctsgan.voldata import (
    adjacent_plane_correlation,
    extract_slab,
    extract_slice3,
    load_volume,
    phantom_corpus,
    sample_slab_slices,
    save_volume,
)

corpus = phantom_corpus(4, seed=0)
vol = corpus[0].volume
print("shape", vol.voxels.shape, "spacing", vol.spacing_mm, "provenance", vol.provenance)

# phantoms are smooth along depth; this is the property generated volumes should keep
for ph in corpus:
    print(ph.volume.id, "adjacent-plane corr %.3f" % adjacent_plane_correlation(ph.volume.voxels),
          "lung fraction %.3f" % ph.lung_mask.mean())

s = extract_slice3(vol, 10)
print("slice3 planes", s.planes.shape, "centered at", s.center_index)

rng = np.random.default_rng(0)
slab = extract_slab(vol, 4, 8)
picked = sample_slab_slices(vol, slab, 4, rng)
print("slab", slab.start_index, "..", slab.start_index + slab.T - 1,
      "-> slice centers", [p.center_index for p in picked])

# raw + json sidecar round trip is bit exact
save_volume(vol, "/tmp/demo_phantom")
back = load_volume("/tmp/demo_phantom")
print("round trip exact:", np.array_equal(back.voxels, vol.voxels))

"""Recurrent slice-sequential volumetric GAN for CT-like volumes, trained on lung phantoms."""

from ctsgan.voldata import (
    Volume,
    Slice3,
    Slab,
    PhantomParams,
    Phantom,
    save_volume,
    load_volume,
    normalize,
    extract_slice3,
    extract_slab,
    sample_slab_slices,
    generate_phantom,
    render_phantom,
)

__version__ = "0.1.0"

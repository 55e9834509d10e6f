import numpy as np
import pytest

from iqt import (
    DegradationParams,
    PatchGeometry,
    PatchSpec,
    PhantomSpec,
    Volume3D,
    harvest_training_pairs,
    make_phantom,
    train_coupled,
)
from iqt.degrade import contrast_remap, degrade


@pytest.fixture(scope="session")
def phantom_pairs():
    """Three aligned (high, low) phantom pairs at scale (1, 1, 4), mild noise."""
    pairs = []
    for v in range(3):
        spec = PhantomSpec(dims=(24, 24, 24), seed=100 + v)
        high, _, _ = make_phantom(spec)
        shaped = contrast_remap(high, (40.0, 60.0))
        low = degrade(shaped, DegradationParams(scale=(1, 1, 4), snr=(40.0, 60.0), noise_seed=v))
        pairs.append((high, low))
    return pairs


@pytest.fixture(scope="session")
def small_dictionary(phantom_pairs):
    """A 32-atom coupled dictionary trained on the session phantom pairs."""
    spec = PatchSpec(5, 2, background_threshold=0.05)
    feats, resids, _, _ = harvest_training_pairs(phantom_pairs, spec, (1, 1, 4), seed=5)
    return train_coupled(
        (feats, resids),
        k_atoms=32,
        ksvd_iters=8,
        sparsity_t=3,
        geometry=PatchGeometry(5, 2, (1, 1, 4)),
        seed=5,
    )

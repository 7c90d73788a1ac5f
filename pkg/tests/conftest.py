"""Shared fixtures: small latent sets and decoded volumes reused across tests."""

import numpy as np
import pytest

from voxflow.field import build_surface_latents, parse_shape


@pytest.fixture(scope="session")
def sphere_latents():
    return build_surface_latents(parse_shape("sphere:r=0.5"), 1024, 0)


@pytest.fixture(scope="session")
def sphere_latents_small():
    return build_surface_latents(parse_shape("sphere:r=0.5"), 256, 0)


@pytest.fixture(scope="session")
def sphere_volume_64(sphere_latents):
    from voxflow.hierdec import dense_decode

    volume, _ = dense_decode(sphere_latents, 64)
    return volume


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(12345)

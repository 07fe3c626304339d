import numpy as np
import pytest
import torch

from geoadapt.errors import ConfigurationError, DimensionError, FrozenError, ValidationError
from geoadapt.generator import (GeneratorSpec, ShiftSpec, SyntheticGenerator, generate, make_target_shift,
                                mixture_centers, sample_prior, style_offset)


def blob_centroid(img):
    """Brute force: threshold the channel-summed deviation from the channel means at half
    its maximum, then take the center of mass of the surviving pixels."""
    dev = (img - img.mean(axis=(1, 2), keepdims=True)).sum(0)
    mask = dev >= 0.5 * dev.max()
    ys, xs = np.nonzero(mask)
    w = dev[mask]
    return np.array([(ys * w).sum() / w.sum(), (xs * w).sum() / w.sum()])


def test_shapes_and_range(gen):
    z = sample_prior(gen, 5, 0)
    x = generate(gen, z)
    assert z.shape == (5, 6, 32)
    assert x.shape == (5, 3, 32, 32)
    assert np.isfinite(x).all() and np.abs(x).max() <= 1.0


def test_deterministic(gen):
    z = sample_prior(gen, 3, 1)
    assert np.array_equal(generate(gen, z), generate(gen, z))
    assert np.array_equal(SyntheticGenerator().generate(z), gen.generate(z))


def test_zero_latent_is_prior_mean_output(gen):
    z = np.zeros((1, 6, 32))
    assert np.array_equal(generate(gen, z), generate(gen, gen.prior_mean[None]))


def test_style_rows_default(gen):
    assert gen.style_rows == range(3, 6)
    assert list(gen.structure_rows) == [0, 1, 2]


def test_style_edit_keeps_centroids(gen, rng):
    z = sample_prior(gen, 8, 2)
    z2 = z.copy()
    z2[:, 3:] += rng.standard_normal((8, 3, 32))
    a, b = generate(gen, z), generate(gen, z2)
    for i in range(8):
        assert np.linalg.norm(blob_centroid(a[i]) - blob_centroid(b[i])) < 1.0
    assert np.abs(a.mean((2, 3)) - b.mean((2, 3))).max() > 1e-3


def test_structure_edit_keeps_color_means(gen, rng):
    z = sample_prior(gen, 8, 3)
    z2 = z.copy()
    z2[:, :3] += rng.standard_normal((8, 3, 32))
    a, b = generate(gen, z), generate(gen, z2)
    assert np.abs(a.mean((2, 3)) - b.mean((2, 3))).max() < 1e-6
    assert np.abs(a - b).max() > 1e-2


def test_frozen_contract(gen):
    before = gen.checksum()
    with pytest.raises(FrozenError):
        gen.spec = None
    with pytest.raises(FrozenError):
        del gen.spec
    name = next(iter(gen.params))
    with pytest.raises(ValueError):
        gen.params[name][...] = 0.0
    z = torch.zeros(2, 6, 32, requires_grad=True)
    gen.generate(z).sum().backward()
    assert z.grad is not None and gen.checksum() == before


def test_checksum_detects_tensor_mutation():
    g = SyntheticGenerator()
    before = g.checksum()
    t = g._tensors(torch.float64)
    name = next(iter(t))
    with torch.no_grad():
        t[name].add_(1.0)
    assert g.checksum() != before


def test_errors(gen):
    with pytest.raises(DimensionError):
        gen.generate(np.zeros((2, 5, 32)))
    z = np.zeros((1, 6, 32))
    z[0, 0, 0] = np.nan
    with pytest.raises(ValidationError):
        gen.generate(z)
    with pytest.raises(ConfigurationError):
        make_target_shift(gen, "bogus", 2, 0)


def test_sample_prior(gen):
    assert sample_prior(gen, 0, 0).shape == (0, 6, 32)
    assert np.array_equal(sample_prior(gen, 4, 9), sample_prior(gen, 4, 9))
    z = sample_prior(gen, 10_000, 0)
    assert np.abs(z.mean(0) - gen.prior_mean).max() < 0.05
    assert np.abs(z.std(0) - gen.prior_scale).max() < 0.05
    with pytest.raises(ValidationError):
        sample_prior(gen, -1, 0)


def test_identity_shift(gen):
    x, z = make_target_shift(gen, "identity", 4, 5)
    assert np.array_equal(z, sample_prior(gen, 4, 5))
    assert np.array_equal(x, generate(gen, sample_prior(gen, 4, 5)))


def test_style_offset_shift(gen):
    shift = ShiftSpec(kind="style_offset", offset=0.7)
    _, z = make_target_shift(gen, shift, 6, 5)
    diff = z - sample_prior(gen, 6, 5)
    assert np.allclose(diff[:, 3:], 0.7) and np.all(diff[:, :3] == 0)
    assert np.array_equal(style_offset(gen, shift)[3:], np.full((3, 32), 0.7))


def test_mixture_shift_recovers_centers(gen):
    from scipy.cluster.vq import kmeans2

    shift = ShiftSpec(kind="mixture", separation=1.0, spread=0.3)
    _, z = make_target_shift(gen, shift, 400, 0)
    centers = mixture_centers(gen, shift)
    found, _ = kmeans2(z.reshape(400, -1), 2, minit="++", seed=1)
    for c in centers.reshape(2, -1):
        rms = np.sqrt(((found - c) ** 2).mean(1)).min()
        assert rms < 0.1


def test_gradient_matches_finite_differences(gen, rng):
    z = torch.as_tensor(sample_prior(gen, 2, 4), dtype=torch.float64).requires_grad_(True)
    w = torch.as_tensor(rng.standard_normal((2, 3, 32, 32)))
    f = lambda v: (gen.generate(v) * w).sum()  # noqa: E731
    f(z).backward()
    v = torch.as_tensor(rng.standard_normal(z.shape))
    h = 1e-5
    with torch.no_grad():
        fd = (f(z + h * v) - f(z - h * v)) / (2 * h)
    an = (z.grad * v).sum()
    assert abs(float(fd - an)) <= 1e-4 * abs(float(an))


def test_save_load_roundtrip(gen, tmp_path):
    path = gen.save(tmp_path / "g.npz")
    g2 = SyntheticGenerator.load(path)
    assert g2.checksum() == gen.checksum()
    from geoadapt.io import load_container

    _, meta = load_container(path, kind="generator")
    assert (meta["S"], meta["D"], meta["C"], meta["H"], meta["W"]) == (6, 32, 3, 32, 32)
    assert meta["style_row_range"] == [3, 6] and meta["seed"] == 0


def test_spec_validation():
    with pytest.raises(ConfigurationError):
        GeneratorSpec(n_rows=0)

import numpy as np
import pytest

from geoadapt.errors import ArtifactIncompatibleError, ConfigurationError, DimensionError, ValidationError
from geoadapt.generator import generate, sample_prior
from geoadapt.inversion import (InversionConfig, available_inverters, get_inverter, invert, invert_batch,
                                load_inversions, reconstruction_report, register_inverter, save_inversions)

FAST = InversionConfig(max_iters=60, step_size=0.1)


@pytest.fixture(scope="module")
def targets(gen):
    z = sample_prior(gen, 6, 11)
    return z, generate(gen, z)


def test_config_validation():
    for bad in (dict(max_iters=-1), dict(step_size=0), dict(tolerance=-1), dict(init_mode="x"),
                dict(dtype="float16"), dict(window=0)):
        with pytest.raises(ConfigurationError):
            InversionConfig(**bad)
    cfg = InversionConfig(step_size=0.3)
    assert InversionConfig.from_dict(cfg.to_dict()) == cfg


def test_zero_budget_returns_init(gen, phi, targets):
    _, x = targets
    r = invert(gen, x[0], InversionConfig(max_iters=0), phi)
    assert np.array_equal(r.latent, gen.prior_mean)
    assert r.iterations_used == 0 and len(r.loss_trace) == 1 and r.final_loss == r.loss_trace[0]


def test_trace_invariants(gen, phi, targets):
    _, x = targets
    for r in invert_batch(gen, x, FAST, phi):
        assert r.final_loss == r.loss_trace[-1]
        assert len(r.loss_trace) == r.iterations_used + 1
        assert np.all(np.isfinite(r.loss_trace)) and min(r.loss_trace) >= 0


def test_small_steps_descend_monotonically(gen, phi, targets):
    _, x = targets
    step = 0.1
    for _ in range(6):
        res = invert_batch(gen, x[:3], InversionConfig(max_iters=40, step_size=step, dtype="float64"), phi)
        if all(np.all(np.diff(r.loss_trace[1:]) <= 0) for r in res):
            break
        step /= 2
    else:
        pytest.fail("no step size gave a monotone trace")


def test_batch_of_one_matches_single(gen, phi, targets):
    _, x = targets
    a = invert(gen, x[2], FAST, phi)
    b = invert_batch(gen, x[2:3], FAST, phi)[0]
    assert np.array_equal(a.latent, b.latent) and a.final_loss == b.final_loss


def test_permutation_equivariance(gen, phi, targets):
    _, x = targets
    cfg = InversionConfig(max_iters=30, step_size=0.1, init_mode="prior_sample", seed=4)
    perm = np.array([3, 0, 5, 1, 4, 2])
    a = invert_batch(gen, x, cfg, phi)
    b = invert_batch(gen, x[perm], cfg, phi)
    for i, j in enumerate(perm):
        assert np.abs(a[j].latent - b[i].latent).max() < 1e-6


def test_reproducible(gen, phi, targets):
    _, x = targets
    a, b = invert_batch(gen, x[:2], FAST, phi), invert_batch(gen, x[:2], FAST, phi)
    assert all(np.array_equal(u.latent, v.latent) for u, v in zip(a, b))


def test_frozen_contract(gen, phi, targets):
    before = gen.checksum(), phi.checksum()
    invert_batch(gen, targets[1][:2], FAST, phi)
    assert (gen.checksum(), phi.checksum()) == before


def test_errors(gen, phi, targets):
    _, x = targets
    bad = x.copy()
    bad[3, 0, 0, 0] = np.inf
    with pytest.raises(ValidationError) as e:
        invert_batch(gen, bad, FAST, phi)
    assert e.value.index == 3
    with pytest.raises(DimensionError):
        invert_batch(gen, x[:, :2], FAST, phi)
    with pytest.raises(ValidationError):
        invert_batch(gen, x[:0], FAST, phi)
    with pytest.raises(ConfigurationError):
        invert_batch(gen, x, InversionConfig(method="encoder"), phi)


def test_registry(gen, targets):
    assert "latent_optimization" in available_inverters()

    @register_inverter("echo_prior")
    def _echo(gen, images, cfg, extractor=None):
        from geoadapt.inversion import InversionResult
        return [InversionResult(gen.prior_mean.copy(), 0.0, 0, [0.0]) for _ in images]

    assert get_inverter("echo_prior") is _echo
    out = invert_batch(gen, targets[1][:2], InversionConfig(method="echo_prior"))
    assert len(out) == 2


def test_reconstruction_report(gen, phi, targets):
    z, x = targets
    rep = reconstruction_report(gen, x, z, phi)
    assert np.all(rep.mse == 0) and np.all(rep.perceptual == 0)
    other = sample_prior(gen, 6, 99)
    rep = reconstruction_report(gen, x, other, phi)
    manual = [((generate(gen, other[i:i + 1])[0] - x[i]) ** 2).mean() for i in range(6)]
    assert np.allclose(rep.mse, manual, rtol=1e-12) and abs(rep.mean_mse - np.mean(manual)) < 1e-12
    with pytest.raises(ValidationError):
        reconstruction_report(gen, x, z[:3], phi)


def test_error_shrinks_with_budget(gen, phi):
    z = sample_prior(gen, 16, 21)
    x = generate(gen, z)
    meds = []
    for iters in (50, 200, 500):
        res = invert_batch(gen, x, InversionConfig(max_iters=iters, step_size=0.1), phi)
        meds.append(reconstruction_report(gen, x, res, phi).median_mse)
    assert meds[0] > meds[1] > meds[2]


def test_save_load(gen, phi, targets, tmp_path):
    res = invert_batch(gen, targets[1][:2], FAST, phi)
    p = save_inversions(tmp_path / "inv.npz", res, gen, FAST)
    lat, meta = load_inversions(p, gen.checksum())
    assert np.array_equal(lat, np.stack([r.latent for r in res]))
    assert meta["config"] == FAST.to_dict()
    with pytest.raises(ArtifactIncompatibleError):
        load_inversions(p, "f" * 64)

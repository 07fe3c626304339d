import json

import pytest

from geoadapt.config import DiffusionConfig, ExperimentConfig, MetricConfig, TargetConfig
from geoadapt.errors import ConfigurationError


def test_defaults():
    cfg = ExperimentConfig()
    assert cfg.diffusion.T == 200 and cfg.diffusion.lr == 1e-3
    assert (cfg.losses.lambda1, cfg.losses.lambda2, cfg.losses.lambda3) == (0.5, 0.1, 0.2)
    assert cfg.inversion.max_iters == 500


def test_json_roundtrip(tmp_path):
    cfg = ExperimentConfig().replace(**{"diffusion.epochs": 7, "target.shift.kind": "style_offset", "seed": 3})
    assert ExperimentConfig.from_json(cfg.to_json()) == cfg
    p = cfg.save(tmp_path / "c.json")
    assert ExperimentConfig.load(p) == cfg


def test_unknown_keys_rejected():
    d = ExperimentConfig().to_dict()
    d["diffusion"]["epoch"] = 3
    with pytest.raises(ConfigurationError, match="epoch"):
        ExperimentConfig.from_dict(d)
    with pytest.raises(ConfigurationError):
        ExperimentConfig().replace(**{"nope.x": 1})
    with pytest.raises(ConfigurationError):
        ExperimentConfig.from_json("{not json")


def test_k_must_not_exceed_batch():
    with pytest.raises(ConfigurationError):
        ExperimentConfig().replace(**{"losses.k": 17})


@pytest.mark.parametrize("bad", [lambda: TargetConfig(n_target=1), lambda: TargetConfig(holdout_fraction=1.0),
                                 lambda: DiffusionConfig(T=0), lambda: DiffusionConfig(steps=0),
                                 lambda: DiffusionConfig(lr=0), lambda: DiffusionConfig(ema_decay=1.0),
                                 lambda: MetricConfig(backend="gpu")])
def test_field_validation(bad):
    with pytest.raises(ConfigurationError):
        bad()


def test_epochs_for_steps():
    d = DiffusionConfig(steps=100, batch_size=16)
    assert d.epochs_for(256) == 7 and d.epochs_for(16) == 100 and d.epochs_for(64) == 25
    assert DiffusionConfig(epochs=9).epochs_for(5) == 9


def test_stage_hashes():
    a = ExperimentConfig()
    b = a.replace(**{"metrics.k": 3})
    c = a.replace(**{"diffusion.epochs": 3})
    assert a.stage_hash(2) == b.stage_hash(2) and a.stage_hash(3) != b.stage_hash(3)
    assert a.stage_hash(1) == c.stage_hash(1) and a.stage_hash(2) != c.stage_hash(2)
    assert a.stage_hash(1) == a.replace(out="elsewhere").stage_hash(1)
    with pytest.raises(ConfigurationError):
        a.stage_hash(4)


def test_derived_seeds():
    a = ExperimentConfig()
    assert a.derive_seed("x") == a.derive_seed("x") != a.derive_seed("y")
    assert a.derive_seed("x") != a.replace(seed=1).derive_seed("x")


def test_plain_json_types():
    json.dumps(ExperimentConfig().to_dict())

import numpy as np
import pytest
import torch

from geoadapt.generator import SyntheticGenerator
from geoadapt.losses import FeatureExtractor


@pytest.fixture(scope="session")
def gen():
    return SyntheticGenerator()


@pytest.fixture(scope="session")
def phi():
    return FeatureExtractor()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


def tiny_config(tmp_path=None, **changes):
    """A pipeline config small enough to run every stage in a few seconds."""
    from geoadapt.config import ExperimentConfig

    base = {"target.n_target": 24, "inversion.max_iters": 20, "diffusion.T": 50, "diffusion.epochs": 2,
            "diffusion.batch_size": 8, "diffusion.n_samples": 16, "diffusion.aux_max_t": 5, "losses.k": 4,
            "metrics.k": 3, "metrics.splits": 2, "metrics.is_splits": 2}
    if tmp_path is not None:
        base["out"] = str(tmp_path)
    base.update(changes)
    return ExperimentConfig().replace(**base)


@pytest.fixture
def tiny(tmp_path):
    return tiny_config(tmp_path)


# -- acceptance summary: one PASS/FAIL line per criterion at the end of the run --

ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def record(criterion: str, ok: bool, detail: str):
    ACCEPTANCE[criterion] = (bool(ok), detail)
    print(f"{criterion} {'PASS' if ok else 'FAIL'}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(ACCEPTANCE, key=lambda s: int(s[1:])):
        ok, detail = ACCEPTANCE[name]
        terminalreporter.write_line(f"{name} {'PASS' if ok else 'FAIL'}: {detail}")

import numpy as np
import pytest

from hyperconv.network import NetworkConfig, build_network


def tiny_config(variant="eq3", **kw):
    base = dict(
        variant=variant,
        stage_depths=(2, 2),
        stem_channels=4,
        stage_channels=(4, 6),
        num_classes=3,
        in_channels=2,
        image_size=16,
        expansion=2,
    )
    base.update(kw)
    return NetworkConfig(**base)


def perturb_statistics(model, rng):
    """Give batchnorm non-trivial running statistics and affine parameters."""
    for k in model.buffers:
        if k.endswith("running_mean"):
            model.buffers[k] = rng.normal(0.0, 0.3, model.buffers[k].shape)
        elif k.endswith("running_var"):
            model.buffers[k] = rng.uniform(0.5, 2.0, model.buffers[k].shape)
    for k, p in model.params.items():
        if k.endswith(".beta"):
            p.data = rng.normal(0.0, 0.3, p.shape)
        elif k.endswith(".gamma"):
            p.data = rng.uniform(0.5, 1.5, p.shape)
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def make_model():
    def make(variant="eq3", seed=3, perturb=True, **kw):
        model = build_network(tiny_config(variant, **kw), seed=seed)
        if perturb:
            perturb_statistics(model, np.random.default_rng(seed + 100))
        return model

    return make


_CRITERIA: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record one acceptance line: ``criterion(number, title, passed, detail)``."""

    def record(number: int, title: str, passed: bool, detail: str) -> bool:
        _CRITERIA[number] = f"{'PASS' if passed else 'FAIL'}  criterion {number:2d}  {title}: {detail}"
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[number])

"""
Shared fixtures: seeded generators, toy-scale configs, generated scenes and a
central finite-difference checker used by the gradient tests.
"""

from dataclasses import dataclass

import numpy as np
import pytest

from app import core
from app import tensor as T
from app.config import ExperimentConfig, default_config
from app.scenario import NoiseSetting, Scene, generate_scene

# 12 x 6 cells; large enough for one object and one occluder
TOY_VALUES = {
    "x_min": -9.6,
    "x_max": 9.6,
    "y_min": -4.8,
    "y_max": 4.8,
    "cell": 1.6,
    "channels": 32,
    "compression": 2,
    "depth": 2,
    "dinat_kernel": 3,
    "dinat_dilations": [2, 1],
    "objects": 1,
    "occluders": 1,
    "epochs": 2,
    "warmup_epochs": 0,
    "lr": 1e-3,
    "score_thresh": 0.05,
}


def toy_config(**overrides) -> ExperimentConfig:
    return default_config(**{**TOY_VALUES, **overrides})


def toy_config_text(**overrides) -> str:
    values = {"schema_version": 1, **TOY_VALUES, **overrides}
    lines = []
    for key, value in values.items():
        if isinstance(value, list):
            value = ",".join(str(v) for v in value)
        elif isinstance(value, bool):
            value = "on" if value else "off"
        lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"


def numeric_gradient(f, array: np.ndarray, h: float = 1e-5, indices=None) -> np.ndarray:
    """Central differences of the scalar f() with respect to array, perturbed in place."""
    grad = np.zeros_like(array)
    for index in indices if indices is not None else np.ndindex(*array.shape):
        original = array[index]
        array[index] = original + h
        plus = f()
        array[index] = original - h
        minus = f()
        array[index] = original
        grad[index] = (plus - minus) / (2.0 * h)
    return grad


def taped_gradients(f, params: list[T.Tensor]) -> list[np.ndarray]:
    for p in params:
        p.grad = None
    with T.Tape() as tape:
        loss = f()
    T.backward(loss, params, tape)
    return [p.grad.copy() for p in params]


def assert_gradients_match(
    f, params: list[T.Tensor], rtol: float, atol: float = 1e-8, samples=None, rng=None, h: float = 1e-5
):
    """Taped gradients of f() against central differences, optionally on a random subset of entries."""
    analytic = taped_gradients(f, params)
    for p, grad in zip(params, analytic):
        indices = None
        if samples is not None:
            flat = rng.choice(p.size, size=min(samples, p.size), replace=False)
            indices = [np.unravel_index(i, p.shape) for i in flat]
        numeric = numeric_gradient(lambda: f().item(), p.data, h=h, indices=indices)
        if indices is None:
            np.testing.assert_allclose(grad, numeric, rtol=rtol, atol=atol)
        else:
            picked = tuple(np.array(ix) for ix in zip(*indices))
            np.testing.assert_allclose(grad[picked], numeric[picked], rtol=rtol, atol=atol)


@dataclass
class Setup:
    cfg: ExperimentConfig
    scenes: list[Scene]
    model: core.Model
    sample: core.Sample


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def desk_config():
    return default_config()


@pytest.fixture(scope="session")
def desk_scene(desk_config):
    return generate_scene(7, desk_config.scene)


@pytest.fixture(scope="session")
def toy_cfg():
    return toy_config()


@pytest.fixture(scope="session")
def toy_scenes(toy_cfg):
    return [generate_scene(seed, toy_cfg.scene) for seed in range(4)]


@pytest.fixture
def setup(toy_cfg, toy_scenes):
    model = core.build_model(toy_cfg)
    sample = core.build_sample(toy_scenes[0], toy_cfg, NoiseSetting(), stream=0)
    return Setup(cfg=toy_cfg, scenes=toy_scenes, model=model, sample=sample)

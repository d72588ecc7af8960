"""Shared fixtures and small reference helpers for the test suite."""

import numpy as np
import pytest

from iotrl.citysim import ScenarioConfig
from iotrl.encoder import EncoderConfig
from iotrl.ppo import PPOConfig
from iotrl.train import TrainConfig


def ref_softmax(x: np.ndarray) -> np.ndarray:
    """Rowwise softmax computed independently of the autodiff module."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def ref_log_softmax(x: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    shifted = x - x.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def tiny_scenario(**kw) -> ScenarioConfig:
    """Small but non-degenerate simulator setup used across modules."""
    base = dict(
        n_traffic=2,
        n_environmental=1,
        n_safety=1,
        n_steps=6,
        capacity=3,
        seed=11,
    )
    base.update(kw)
    return ScenarioConfig(**base)


def tiny_train_config(**kw) -> TrainConfig:
    """A config small enough that a full train_loop takes well under a second."""
    base = dict(
        n_episodes=2,
        seed=5,
        hidden=8,
        encoder=EncoderConfig(d_model=8, n_heads=2, n_layers=1, d_ff=16, window=4),
        ppo=PPOConfig(minibatch_size=8, epochs=2),
        scenario=tiny_scenario(),
    )
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture
def scenario() -> ScenarioConfig:
    return tiny_scenario()


@pytest.fixture
def train_config() -> TrainConfig:
    return tiny_train_config()

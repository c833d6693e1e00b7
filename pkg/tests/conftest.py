"""Shared fixtures: synthetic market data at a few scales and stub agents."""

from __future__ import annotations

import numpy as np
import pytest

from alloctrader.allocator import AgentRegistry, RegisteredAgent
from alloctrader.envs import EnvConfig
from alloctrader.market_data import (
    RegimeParams,
    SynthConfig,
    TIMEFRAME_ORDER,
    synthesize,
)
from alloctrader.ppo import NetworkSpec, PolicyParameters


def small_synth_config(session_minutes: int = 390, **kw) -> SynthConfig:
    defaults = dict(
        low=RegimeParams(drift=0.00002, volatility=0.0006),
        high=RegimeParams(drift=-0.00001, volatility=0.0025),
        transition=((0.995, 0.005), (0.015, 0.985)),
        start_price=100.0,
        session_minutes=session_minutes,
    )
    defaults.update(kw)
    return SynthConfig(**defaults)


@pytest.fixture(scope="session")
def regime_result():
    """20 full-length sessions of two-regime synthetic data."""
    return synthesize(small_synth_config(), seed=11, days=20)


@pytest.fixture(scope="session")
def short_sessions():
    """6 compact sessions (90-minute days) for fast environment tests."""
    return synthesize(small_synth_config(session_minutes=90), seed=7, days=6).sessions


def constant_action_params(spec: NetworkSpec, action: int, seed: int = 0) -> PolicyParameters:
    """Parameters whose policy always argmaxes (and near-surely samples) one
    action: the head bias dominates the orthogonally-initialized weights."""
    params = PolicyParameters.initialize(spec, np.random.default_rng(seed))
    bias = np.zeros(spec.action_count)
    bias[action] = 50.0
    params.arrays["policy_b3"] = bias
    return params


def stub_registry(action: int, window_sizes=(12, 8, 6), hidden=(16, 16),
                  initial_cash: float = 10_000.0) -> AgentRegistry:
    """Registry of three fixed-action agents with small windows."""
    agents = {}
    for tf, w in zip(TIMEFRAME_ORDER, window_sizes):
        spec = NetworkSpec(w * 8, hidden, 3)
        agents[tf] = RegisteredAgent(
            params=constant_action_params(spec, action),
            config=EnvConfig(timeframe=tf, window_size=w, initial_cash=initial_cash),
        )
    return AgentRegistry(agents)

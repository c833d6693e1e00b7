"""Hierarchy env: span tiling, forced decisions, telescoping log returns."""

import numpy as np
import pytest
from mpmath import mp, mpf
from mpmath import log as mp_log

from alloctrader.allocator import (
    AgentRegistry,
    AllocatorConfig,
    AllocatorError,
    HierarchyEnv,
    RegisteredAgent,
    observation_size,
    allocator_reward,
    read_decision_log,
    run_hierarchy,
    write_decision_log,
)
from alloctrader.envs import EnvConfig, build_observation
from alloctrader.indicators import feature_table
from alloctrader.market_data import TIMEFRAME_ORDER, Timeframe
from alloctrader.ppo import NetworkSpec, PolicyParameters
from conftest import constant_action_params, stub_registry

mp.dps = 50

BUY, SELL, HOLD = 0, 1, 2

ALLOC = AllocatorConfig(market_window=20, vol_window=10)


@pytest.fixture(scope="module")
def hold_env(regime_result):
    return HierarchyEnv(regime_result.sessions, stub_registry(HOLD), ALLOC)


@pytest.fixture(scope="module")
def buy_env(regime_result):
    return HierarchyEnv(regime_result.sessions, stub_registry(BUY), ALLOC)


class TestAllocatorReward:
    def test_matches_high_precision_log(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            v0 = float(rng.uniform(1_000.0, 50_000.0))
            v1 = float(rng.uniform(1_000.0, 50_000.0))
            want = float(mp_log(mpf(v1) / mpf(v0)))
            assert allocator_reward(v1, v0) == pytest.approx(want, abs=1e-14)

    def test_flat_span_is_zero(self):
        assert allocator_reward(10_000.0, 10_000.0) == 0.0

    def test_non_positive_value_rejected(self):
        with pytest.raises(AllocatorError):
            allocator_reward(0.0, 100.0)


class TestObservationSize:
    def test_formula(self):
        assert observation_size(AllocatorConfig(market_window=60, vol_window=30)) == 310
        assert observation_size(ALLOC) == 110

    def test_bad_windows_rejected(self):
        with pytest.raises(AllocatorError):
            AllocatorConfig(market_window=0)
        with pytest.raises(AllocatorError):
            AllocatorConfig(vol_window=1)


class TestRegistry:
    def test_missing_timeframe_rejected(self):
        full = stub_registry(HOLD)
        partial = {tf: full[tf] for tf in (Timeframe.ONE_MINUTE, Timeframe.ONE_HOUR)}
        with pytest.raises(AllocatorError, match="10m"):
            AgentRegistry(partial)

    def test_timeframe_config_mismatch_rejected(self):
        full = stub_registry(HOLD)
        swapped = {
            Timeframe.ONE_MINUTE: full[Timeframe.ONE_MINUTE],
            Timeframe.TEN_MINUTE: full[Timeframe.ONE_HOUR],
            Timeframe.ONE_HOUR: full[Timeframe.TEN_MINUTE],
        }
        with pytest.raises(AllocatorError, match="configured for"):
            AgentRegistry(swapped)

    def test_network_window_mismatch_rejected(self):
        full = stub_registry(HOLD)
        bad = {
            tf: RegisteredAgent(
                params=full[tf].params,
                config=EnvConfig(timeframe=tf, window_size=full[tf].config.window_size + 1),
            ) if tf is Timeframe.ONE_MINUTE else full[tf]
            for tf in TIMEFRAME_ORDER
        }
        with pytest.raises(AllocatorError, match="window"):
            AgentRegistry(bad)


class TestWarmup:
    def test_start_cursor_precedes_a_session_boundary(self, hold_env):
        c = hold_env._start_cursor
        assert hold_env.session_last[c]
        assert hold_env.session_first[c + 1]
        # The hour agent dominates warmup: (34 + 6 - 1) * 60 base bars.
        assert c + 1 >= (34 + 6 - 1) * 60

    def test_insufficient_history_rejected(self, regime_result):
        with pytest.raises(AllocatorError, match="warmup"):
            HierarchyEnv(regime_result.sessions[:6], stub_registry(HOLD), ALLOC)

    def test_observation_width(self, hold_env):
        obs = hold_env.reset()
        assert obs.shape == (hold_env.observation_size,)
        assert obs.shape == (110,)
        assert np.isfinite(obs).all()


class TestStep:
    def test_forced_first_decision_each_session(self, buy_env):
        buy_env.reset()
        while not buy_env.done:
            buy_env.step(Timeframe.ONE_HOUR)
        forced = [d for d in buy_env.decisions if d.forced]
        sessions_traded = int(
            buy_env.session_first[buy_env._start_cursor + 1:].sum()
        )
        assert len(forced) == sessions_traded
        for d in forced:
            assert d.timeframe is Timeframe.ONE_MINUTE
            assert d.requested is Timeframe.ONE_HOUR
            assert d.span_bars == 1

    def test_spans_tile_contiguously(self, buy_env):
        buy_env.reset()
        start = buy_env.cursor
        while not buy_env.done:
            buy_env.step(Timeframe.TEN_MINUTE)
        expected_start = start + 1
        for d in buy_env.decisions:
            assert d.span_start == expected_start
            expected_start = d.span_end + 1
        assert buy_env.decisions[-1].span_end == buy_env.n_bars - 1

    def test_hour_spans_truncate_at_session_close(self, buy_env):
        # A 390-minute session under all-hour choices splits into
        # 1 (forced) + 6 x 60 + 29 truncated bars.
        buy_env.reset()
        while not buy_env.done:
            buy_env.step(Timeframe.ONE_HOUR)
        first_day = buy_env.decisions[0].timestamp.date()
        spans = [d.span_bars for d in buy_env.decisions
                 if d.timestamp.date() == first_day]
        assert spans == [1, 60, 60, 60, 60, 60, 60, 29]

    def test_ten_minute_spans(self, buy_env):
        buy_env.reset()
        while not buy_env.done:
            buy_env.step(Timeframe.TEN_MINUTE)
        first_day = buy_env.decisions[0].timestamp.date()
        spans = [d.span_bars for d in buy_env.decisions
                 if d.timestamp.date() == first_day]
        assert spans == [1] + [10] * 38 + [9]
        assert sum(spans) == 390

    def test_telescoping_sum_of_rewards(self, buy_env):
        buy_env.reset()
        v0 = buy_env.portfolio.total_value
        total = 0.0
        rng = np.random.default_rng(3)
        while not buy_env.done:
            total += buy_env.step(int(rng.integers(0, 3))).reward
        v1 = buy_env.portfolio.total_value
        assert total == pytest.approx(np.log(v1 / v0), abs=1e-9)
        assert buy_env.equity[-1][1] == v1

    def test_all_hold_agents_preserve_cash(self, hold_env):
        hold_env.reset()
        while not hold_env.done:
            hold_env.step(Timeframe.ONE_HOUR)
        assert hold_env.portfolio.total_value == ALLOC.initial_cash
        assert not hold_env.trades
        assert all(v == ALLOC.initial_cash for _, v in hold_env.equity)
        assert all(d.log_return == 0.0 for d in hold_env.decisions)

    def test_equity_covers_every_base_bar(self, buy_env):
        buy_env.reset()
        start = buy_env.cursor
        while not buy_env.done:
            buy_env.step(Timeframe.ONE_HOUR)
        assert len(buy_env.equity) == buy_env.n_bars - start
        stamps = [ts for ts, _ in buy_env.equity]
        assert stamps == list(buy_env.timestamps[start:])

    def test_no_position_survives_session_close(self, buy_env):
        buy_env.reset()
        rng = np.random.default_rng(4)
        while not buy_env.done:
            buy_env.step(int(rng.integers(0, 3)))
            assert not buy_env.session_last[buy_env.cursor] or buy_env.portfolio.shares == 0

    def test_bad_choice_rejected(self, hold_env):
        hold_env.reset()
        with pytest.raises(AllocatorError, match="choice"):
            hold_env.step(3)

    def test_step_after_done_rejected(self, hold_env):
        hold_env.reset()
        while not hold_env.done:
            hold_env.step(Timeframe.ONE_HOUR)
        with pytest.raises(AllocatorError, match="finished"):
            hold_env.step(Timeframe.ONE_HOUR)

    def test_deterministic_replay(self, regime_result):
        rng = np.random.default_rng(5)
        choices = [int(rng.integers(0, 3)) for _ in range(400)]
        logs = []
        for _ in range(2):
            env = HierarchyEnv(regime_result.sessions, stub_registry(BUY), ALLOC)
            env.reset()
            rewards = []
            for c in choices:
                if env.done:
                    break
                rewards.append(env.step(c).reward)
            logs.append(rewards)
        assert logs[0] == logs[1]


class TestPhaseSeries:
    def test_trailing_aggregates_match_brute_force(self, regime_result, buy_env):
        bars = [b for s in regime_result.sessions for b in s.bars]
        highs = np.array([b.high for b in bars])
        lows = np.array([b.low for b in bars])
        closes = np.array([b.close for b in bars])
        volumes = np.array([float(b.volume) for b in bars])
        tf = Timeframe.TEN_MINUTE
        rng = np.random.default_rng(6)
        for i in rng.integers(500, len(bars), size=5):
            i = int(i)
            phase = buy_env._phases[tf][i % 10]
            k = i // 10
            assert phase.base_indices[k] == i
            # Rebuild the aggregated series the phase saw, ending at residue
            # i % 10, and compare its feature row at position k.
            idx = phase.base_indices
            t_high = np.array([highs[max(0, j - 9): j + 1].max() for j in idx])
            t_low = np.array([lows[max(0, j - 9): j + 1].min() for j in idx])
            t_vol = np.array([volumes[max(0, j - 9): j + 1].sum() for j in idx])
            _, want = feature_table(t_high, t_low, closes[idx], t_vol)
            np.testing.assert_allclose(phase.feats[k], want[k], atol=1e-10)

    def test_one_minute_agent_sees_base_features(self, buy_env):
        buy_env.reset()
        b = buy_env.cursor
        w = buy_env.registry[Timeframe.ONE_MINUTE].config.window_size
        window = slice(b - w + 1, b + 1)
        want = build_observation(
            buy_env._base_feats[window], buy_env.closes[window], buy_env._pf_rows[window]
        )
        got = buy_env._agent_observation(Timeframe.ONE_MINUTE, b)
        np.testing.assert_array_equal(got, want)


class TestDecisionLog:
    def test_round_trip(self, tmp_path, buy_env):
        buy_env.reset()
        rng = np.random.default_rng(7)
        while not buy_env.done:
            buy_env.step(int(rng.integers(0, 3)))
        path = str(tmp_path / "decisions.csv")
        write_decision_log(buy_env.decisions, path)
        records = read_decision_log(path)
        assert len(records) == len(buy_env.decisions)
        for rec, d in zip(records, buy_env.decisions):
            assert rec.timestamp == d.timestamp
            assert rec.timeframe is d.timeframe
            assert rec.forced == d.forced
            assert rec.span_bars == d.span_bars
            assert rec.log_return == d.log_return

    def test_header(self, tmp_path):
        path = str(tmp_path / "empty.csv")
        write_decision_log([], path)
        with open(path) as fh:
            header = fh.readline().strip()
        assert header == "timestamp,chosen_timeframe,forced_flag,span_bars,span_log_return"


class TestRunHierarchy:
    def _allocator_params(self, seed=0):
        spec = NetworkSpec(input_dim=observation_size(ALLOC), hidden=(16, 16), action_count=3)
        return PolicyParameters.initialize(spec, np.random.default_rng(seed))

    def test_report_consistency(self, regime_result):
        registry = stub_registry(BUY)
        report = run_hierarchy(
            regime_result.sessions, registry, self._allocator_params(), ALLOC
        )
        assert report.initial_value == ALLOC.initial_cash
        total = sum(d.log_return for d in report.decisions)
        assert total == pytest.approx(np.log(report.final_value / report.initial_value), abs=1e-9)
        # Equity curve spans every base bar plus the pre-span anchor point.
        first = report.decisions[0].span_start
        last = report.decisions[-1].span_end
        assert len(report.equity) == last - first + 2

    def test_input_dim_mismatch_rejected(self, regime_result):
        bad_spec = NetworkSpec(input_dim=17, hidden=(8, 8), action_count=3)
        bad = PolicyParameters.initialize(bad_spec, np.random.default_rng(0))
        with pytest.raises(AllocatorError, match="allocator network"):
            run_hierarchy(regime_result.sessions, stub_registry(HOLD), bad, ALLOC)

    def test_start_day_skips_earlier_sessions(self, regime_result):
        registry = stub_registry(HOLD)
        day = regime_result.sessions[-3].day
        report = run_hierarchy(
            regime_result.sessions, registry, self._allocator_params(), ALLOC, start_day=day
        )
        assert report.decisions[0].timestamp.date() == day

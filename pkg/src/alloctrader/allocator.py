"""Hierarchical execution layer: a meta-environment whose action picks which
timeframe agent trades next.

Control flow per decision: the cursor rests on the last completed base bar.
The chosen agent (forced to the 1-minute agent for a session's first
decision) acts greedily at that bar's close, the market then advances one bar
of the agent's timeframe (truncated at the session's final bar), the shared
portfolio is marked at every base bar along the way, and the allocator is
paid the log-return of portfolio value over the span. Spans therefore tile
each session exactly, and the rewards telescope to ln(V_final / V_initial).

Agent observations inside the hierarchy use trailing windows of their own
timeframe ending at the decision bar, so every agent sees data up to the
decision instant regardless of where it falls inside a session.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from datetime import datetime
from typing import Sequence

import numpy as np

from .envs import (
    Action,
    EnvConfig,
    StepResult,
    agent_reward,
    build_observation,
    normalize_market_window,
)
from .indicators import feature_table
from .market_data import Session, TIMEFRAME_ORDER, Timeframe
from .portfolio import (
    PortfolioState,
    TradeLogEntry,
    buy_all,
    features,
    mark,
    sell_all,
)
from .ppo import PolicyParameters, greedy_action


class AllocatorError(RuntimeError):
    """Hierarchy misuse: incomplete registry, bad choice, missing warmup."""


@dataclass(frozen=True)
class AllocatorConfig:
    """Meta-environment parameters."""

    market_window: int = 60
    vol_window: int = 30
    initial_cash: float = 10_000.0
    fee_per_sell_share: float = 0.0

    def __post_init__(self) -> None:
        if self.market_window < 1:
            raise AllocatorError(f"market_window must be >= 1, got {self.market_window}")
        if self.vol_window < 2:
            raise AllocatorError(f"vol_window must be >= 2, got {self.vol_window}")
        if not self.initial_cash > 0:
            raise AllocatorError(f"initial_cash must be positive, got {self.initial_cash}")
        if self.fee_per_sell_share < 0:
            raise AllocatorError(f"fee_per_sell_share must be >= 0, got {self.fee_per_sell_share}")


def observation_size(config: AllocatorConfig) -> int:
    """Allocator input width: market window (5 per bar) + 3 portfolio values
    + rolling volatility + 3 last agent rewards + 3-way active-agent one-hot."""
    return config.market_window * 5 + 10


@dataclass(frozen=True)
class RegisteredAgent:
    params: PolicyParameters
    config: EnvConfig


class AgentRegistry:
    """Exactly one frozen pre-trained agent per timeframe."""

    def __init__(self, agents: dict[Timeframe, RegisteredAgent]):
        missing = [tf.label for tf in TIMEFRAME_ORDER if tf not in agents]
        if missing:
            raise AllocatorError(f"registry missing agents for: {', '.join(missing)}")
        extra = [tf for tf in agents if tf not in TIMEFRAME_ORDER]
        if extra:
            raise AllocatorError(f"registry has unknown timeframes: {extra}")
        for tf, agent in agents.items():
            if agent.config.timeframe is not tf:
                raise AllocatorError(
                    f"agent registered under {tf.label} is configured for "
                    f"{agent.config.timeframe.label}"
                )
            expected = agent.config.window_size * 8
            if agent.params.spec.input_dim != expected:
                raise AllocatorError(
                    f"{tf.label} agent network expects input {agent.params.spec.input_dim}, "
                    f"but window {agent.config.window_size} produces {expected}"
                )
        self._agents = {tf: agents[tf] for tf in TIMEFRAME_ORDER}

    def __getitem__(self, tf: Timeframe) -> RegisteredAgent:
        return self._agents[tf]

    def items(self):
        return self._agents.items()


def allocator_reward(v_current: float, v_previous: float) -> float:
    """Log-return of portfolio value over one decision span: ln(Vc / Vp)."""
    if not (v_current > 0 and v_previous > 0):
        raise AllocatorError(
            f"portfolio values must be positive, got {v_current} / {v_previous}"
        )
    return float(np.log(v_current / v_previous))


@dataclass(frozen=True)
class AllocationDecision:
    """One allocator choice and the base-bar span it governed.

    The timestamp is the span's first bar (the bar the decision takes effect
    on), so calendar grouping attributes each decision to the session it
    traded in. `timeframe` is the agent actually activated; when `forced` is
    set, the engine overrode `requested` with the 1-minute agent because the
    span opens a session.
    """

    timestamp: datetime
    timeframe: Timeframe
    requested: Timeframe
    forced: bool
    span_start: int
    span_end: int
    log_return: float

    @property
    def span_bars(self) -> int:
        return self.span_end - self.span_start + 1


@dataclass(frozen=True)
class DecisionRecord:
    """Decision log row as read back from CSV."""

    timestamp: datetime
    timeframe: Timeframe
    forced: bool
    span_bars: int
    log_return: float


def write_decision_log(decisions: Sequence[AllocationDecision], path: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["timestamp", "chosen_timeframe", "forced_flag", "span_bars", "span_log_return"]
        )
        for d in decisions:
            writer.writerow(
                [d.timestamp.isoformat(), d.timeframe.label, int(d.forced),
                 d.span_bars, repr(d.log_return)]
            )


def read_decision_log(path: str) -> tuple[DecisionRecord, ...]:
    records = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise AllocatorError(f"{path}: empty decision log")
        for row in reader:
            records.append(
                DecisionRecord(
                    timestamp=datetime.fromisoformat(row[0]),
                    timeframe=Timeframe.from_label(row[1]),
                    forced=bool(int(row[2])),
                    span_bars=int(row[3]),
                    log_return=float(row[4]),
                )
            )
    return tuple(records)


@dataclass
class _PhaseSeries:
    """Trailing tf-bars whose end indices share one residue modulo the
    timeframe length; feature table computed along the phase."""

    base_indices: np.ndarray
    closes: np.ndarray
    first_valid: int
    feats: np.ndarray


class HierarchyEnv:
    """Meta-environment over shared base bars; see the module docstring."""

    def __init__(
        self,
        sessions: Sequence[Session],
        registry: AgentRegistry,
        config: AllocatorConfig = AllocatorConfig(),
        start_day=None,
    ):
        if not sessions:
            raise AllocatorError("no sessions provided")
        self.registry = registry
        self.config = config
        opens, highs, lows, closes, volumes, timestamps = [], [], [], [], [], []
        session_first, session_last, session_day = [], [], []
        for session in sessions:
            n = len(session.bars)
            for j, b in enumerate(session.bars):
                opens.append(b.open)
                highs.append(b.high)
                lows.append(b.low)
                closes.append(b.close)
                volumes.append(float(b.volume))
                timestamps.append(b.timestamp)
                session_first.append(j == 0)
                session_last.append(j == n - 1)
                session_day.append(session.day)
        self.closes = np.asarray(closes)
        self.timestamps = tuple(timestamps)
        self.session_first = np.asarray(session_first, dtype=bool)
        self.session_last = np.asarray(session_last, dtype=bool)
        self.n_bars = self.closes.size
        # Last bar index of the session each bar belongs to.
        self.session_end_idx = np.empty(self.n_bars, dtype=np.int64)
        end = self.n_bars - 1
        for i in range(self.n_bars - 1, -1, -1):
            if self.session_last[i]:
                end = i
            self.session_end_idx[i] = end
        self._base_first_valid, self._base_feats = feature_table(
            np.asarray(highs), np.asarray(lows), self.closes, np.asarray(volumes)
        )
        self._phases = {
            tf: self._build_phases(np.asarray(opens), np.asarray(highs), np.asarray(lows),
                                    np.asarray(volumes), tf)
            for tf in TIMEFRAME_ORDER
        }
        self._start_cursor = self._find_start_cursor(session_day, start_day)
        self.cursor = -1
        self.done = True
        self.portfolio: PortfolioState | None = None
        self._pf_rows = np.empty((self.n_bars, 3))
        self.trades: list[TradeLogEntry] = []
        self.decisions: list[AllocationDecision] = []
        self.equity: list[tuple[datetime, float]] = []

    # -- construction helpers ------------------------------------------------

    def _build_phases(self, opens, highs, lows, volumes, tf: Timeframe) -> list[_PhaseSeries]:
        length = tf.minutes
        n = self.n_bars
        if length == 1:
            return [
                _PhaseSeries(
                    base_indices=np.arange(n),
                    closes=self.closes,
                    first_valid=self._base_first_valid,
                    feats=self._base_feats,
                )
            ]
        # Trailing window aggregates for every base index; leading windows
        # shorter than `length` use whatever bars exist.
        t_high = np.empty(n)
        t_low = np.empty(n)
        lead = min(length - 1, n)
        t_high[:lead] = np.maximum.accumulate(highs[:lead])
        t_low[:lead] = np.minimum.accumulate(lows[:lead])
        if n >= length:
            from numpy.lib.stride_tricks import sliding_window_view

            t_high[length - 1:] = sliding_window_view(highs, length).max(axis=1)
            t_low[length - 1:] = sliding_window_view(lows, length).min(axis=1)
        csum = np.concatenate([[0.0], np.cumsum(volumes)])
        starts = np.maximum(np.arange(n) - length + 1, 0)
        t_vol = csum[np.arange(n) + 1] - csum[starts]
        phases = []
        for p in range(length):
            idx = np.arange(p, n, length)
            first_valid, feats = feature_table(
                t_high[idx], t_low[idx], self.closes[idx], t_vol[idx]
            )
            phases.append(
                _PhaseSeries(
                    base_indices=idx,
                    closes=self.closes[idx],
                    first_valid=first_valid,
                    feats=feats,
                )
            )
        return phases

    def _min_start_cursor(self) -> int:
        need = max(
            self._base_first_valid + self.config.market_window - 1,
            self.config.vol_window,
        )
        for tf, agent in self.registry.items():
            length = tf.minutes
            # Decision bar b needs b // length >= first_valid + window - 1.
            positions = self._phases[tf][0].first_valid + agent.config.window_size - 1
            need = max(need, positions * length)
        return need

    def _find_start_cursor(self, session_day, start_day) -> int:
        min_cursor = self._min_start_cursor()
        for i in range(self.n_bars):
            if not self.session_first[i] or i == 0:
                continue
            if start_day is not None and session_day[i] < start_day:
                continue
            if i - 1 >= min_cursor:
                return i - 1
            if start_day is not None:
                raise AllocatorError(
                    f"session {session_day[i]} starts at bar {i} but warmup needs "
                    f"{min_cursor + 1} bars of history"
                )
        raise AllocatorError(
            f"no session start has the required {min_cursor + 1} bars of warmup history"
        )

    # -- observations ----------------------------------------------------------

    @property
    def observation_size(self) -> int:
        return observation_size(self.config)

    @property
    def action_count(self) -> int:
        return len(TIMEFRAME_ORDER)

    def _agent_observation(self, tf: Timeframe, cursor: int) -> np.ndarray:
        phase = self._phases[tf][cursor % tf.minutes]
        k = cursor // tf.minutes
        w = self.registry[tf].config.window_size
        window = slice(k - w + 1, k + 1)
        base_idx = phase.base_indices[window]
        return build_observation(
            phase.feats[window], phase.closes[window], self._pf_rows[base_idx]
        )

    def _allocator_observation(self) -> np.ndarray:
        b = self.cursor
        mw = self.config.market_window
        window = slice(b - mw + 1, b + 1)
        market = normalize_market_window(self._base_feats[window], self.closes[window])
        pf = features(self.portfolio)
        vol_closes = self.closes[b - self.config.vol_window: b + 1]
        returns = np.diff(vol_closes) / vol_closes[:-1]
        realized_vol = float(returns.std(ddof=1)) * 100.0
        last_rewards = [self._last_rewards[tf] for tf in TIMEFRAME_ORDER]
        onehot = [1.0 if self._last_active is tf else 0.0 for tf in TIMEFRAME_ORDER]
        return np.concatenate(
            [
                market.reshape(-1),
                [pf.cash_ratio, pf.stock_ratio, np.clip(pf.unrealized_profit_ratio, -1.0, 1.0)],
                [realized_vol],
                last_rewards,
                onehot,
            ]
        )

    # -- episode control ---------------------------------------------------------

    def reset(self) -> np.ndarray:
        """Rewind to the first session boundary with full warmup history."""
        self.cursor = self._start_cursor
        self.done = False
        self.portfolio = PortfolioState.initial(
            self.config.initial_cash,
            float(self.closes[self.cursor]),
            self.config.fee_per_sell_share,
        )
        self._pf_rows[:] = (1.0, 0.0, 0.0)
        self._span_start_value = self.portfolio.total_value
        self._last_rewards = {tf: 0.0 for tf in TIMEFRAME_ORDER}
        self._last_active: Timeframe | None = None
        self.trades = []
        self.decisions = []
        self.equity = [(self.timestamps[self.cursor], self.portfolio.total_value)]
        return self._allocator_observation()

    def step(self, choice: Timeframe | int) -> StepResult:
        """Run one decision span; see the module docstring for the protocol."""
        if self.done:
            raise AllocatorError("step() called on a finished episode; call reset()")
        if isinstance(choice, Timeframe):
            requested = choice
        else:
            idx = int(choice)
            if not 0 <= idx < len(TIMEFRAME_ORDER):
                raise AllocatorError(f"choice {choice} is not a registered timeframe")
            requested = TIMEFRAME_ORDER[idx]
        b = self.cursor
        forced = bool(self.session_first[b + 1])
        executed = Timeframe.ONE_MINUTE if forced else requested
        agent = self.registry[executed]

        act = Action(greedy_action(agent.params, self._agent_observation(executed, b)))
        price = float(self.closes[b])
        realized = 0.0
        if act is Action.BUY:
            self.portfolio, bought = buy_all(self.portfolio, price)
            if bought:
                self.trades.append(TradeLogEntry(self.timestamps[b], "buy", bought, price, 0.0))
        elif act is Action.SELL:
            self.portfolio, sale = sell_all(self.portfolio, price)
            if sale is not None:
                realized += agent_reward(sale.sell_price, sale.avg_cost)
                self.trades.append(
                    TradeLogEntry(self.timestamps[b], "sell", sale.shares, price, realized)
                )

        span_end = min(b + executed.minutes, int(self.session_end_idx[b + 1]))
        for i in range(b + 1, span_end + 1):
            bar_price = float(self.closes[i])
            self.portfolio = mark(self.portfolio, bar_price)
            if self.session_last[i] and self.portfolio.shares > 0:
                self.portfolio, sale = sell_all(self.portfolio, bar_price)
                forced_reward = agent_reward(sale.sell_price, sale.avg_cost)
                realized += forced_reward
                self.trades.append(
                    TradeLogEntry(self.timestamps[i], "sell", sale.shares, bar_price, forced_reward)
                )
            pf = features(self.portfolio)
            self._pf_rows[i] = (pf.cash_ratio, pf.stock_ratio, pf.unrealized_profit_ratio)
            self.equity.append((self.timestamps[i], self.portfolio.total_value))

        v_end = self.portfolio.total_value
        reward = allocator_reward(v_end, self._span_start_value)
        decision = AllocationDecision(
            timestamp=self.timestamps[b + 1],
            timeframe=executed,
            requested=requested,
            forced=forced,
            span_start=b + 1,
            span_end=span_end,
            log_return=reward,
        )
        self.decisions.append(decision)
        self._span_start_value = v_end
        self._last_rewards[executed] = realized
        self._last_active = executed
        self.cursor = span_end
        self.done = span_end == self.n_bars - 1
        return StepResult(
            observation=self._allocator_observation(),
            reward=reward,
            done=self.done,
            info={
                "decision": decision,
                "portfolio_value": v_end,
                "timestamp": self.timestamps[span_end],
            },
        )


@dataclass(frozen=True)
class HierarchyReport:
    """Everything a hierarchy backtest produced."""

    equity: tuple[tuple[datetime, float], ...]
    trades: tuple[TradeLogEntry, ...]
    decisions: tuple[AllocationDecision, ...]

    @property
    def initial_value(self) -> float:
        return self.equity[0][1]

    @property
    def final_value(self) -> float:
        return self.equity[-1][1]


def run_hierarchy(
    sessions: Sequence[Session],
    registry: AgentRegistry,
    allocator_params: PolicyParameters,
    config: AllocatorConfig = AllocatorConfig(),
    start_day=None,
) -> HierarchyReport:
    """Deterministic greedy evaluation episode over the full data span."""
    env = HierarchyEnv(sessions, registry, config, start_day=start_day)
    expected = env.observation_size
    if allocator_params.spec.input_dim != expected:
        raise AllocatorError(
            f"allocator network expects input {allocator_params.spec.input_dim}, "
            f"environment produces {expected}"
        )
    obs = env.reset()
    while not env.done:
        result = env.step(greedy_action(allocator_params, obs))
        obs = result.observation
    return HierarchyReport(
        equity=tuple(env.equity),
        trades=tuple(env.trades),
        decisions=tuple(env.decisions),
    )

"""Per-timeframe trading environment.

An episode walks a cursor over resampled bars spanning one or more sessions.
Each step trades at the current bar's close, advances one bar, re-marks the
position, and force-liquidates if the new bar ends its session, so positions
never survive overnight. Cash does carry across sessions within an episode.

Rewards: a realized sale pays tanh(5 * (sell - avg_cost) / avg_cost); buys
and holds pay 0. A step's reward therefore always lies in [-1, 1].
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from .indicators import feature_table
from .market_data import Session, Timeframe, resample
from .portfolio import (
    PortfolioState,
    TradeLogEntry,
    buy_all,
    features,
    mark,
    sell_all,
)

#: Scale applied to the fractional sale profit before the tanh squash.
REWARD_SCALE = 5.0

#: Divisors mapping indicator ranges onto roughly [-1, 1] in observations.
RSI_DIVISOR = 100.0
CCI_DIVISOR = 200.0

#: Observation features per bar: five market columns plus three portfolio
#: columns (cash ratio, stock ratio, clamped unrealized profit ratio).
FEATURES_PER_BAR = 8


class EnvError(RuntimeError):
    """Environment misuse: bad cursor, stepping a finished episode, bad data."""


class Action(Enum):
    BUY = 0
    SELL = 1
    HOLD = 2


@dataclass(frozen=True)
class EnvConfig:
    """Static environment parameters for one timeframe agent."""

    timeframe: Timeframe
    window_size: int
    initial_cash: float = 10_000.0
    fee_per_sell_share: float = 0.0

    def __post_init__(self) -> None:
        if self.window_size < 1:
            raise EnvError(f"window_size must be >= 1, got {self.window_size}")
        if not self.initial_cash > 0:
            raise EnvError(f"initial_cash must be positive, got {self.initial_cash}")
        if self.fee_per_sell_share < 0:
            raise EnvError(f"fee_per_sell_share must be >= 0, got {self.fee_per_sell_share}")


@dataclass
class StepResult:
    observation: np.ndarray
    reward: float
    done: bool
    info: dict


def agent_reward(sell_price: float, avg_buy_price: float) -> float:
    """Reward realized by selling at `sell_price` a position entered at
    `avg_buy_price`: tanh(5 * fractional profit), bounded in (-1, 1)."""
    if not avg_buy_price > 0:
        raise EnvError(f"avg_buy_price must be positive, got {avg_buy_price}")
    return float(np.tanh(REWARD_SCALE * (sell_price - avg_buy_price) / avg_buy_price))


def normalize_market_window(feature_rows: np.ndarray, closes: np.ndarray) -> np.ndarray:
    """Normalize a (window, 5) market feature block for scale invariance.

    RSI / 100, MACD histogram divided by the bar's own close, CCI / 200,
    %B as-is, volume z-scored within the window (0 when constant).
    """
    w = feature_rows.shape[0]
    out = np.empty((w, 5))
    out[:, 0] = feature_rows[:, 0] / RSI_DIVISOR
    out[:, 1] = feature_rows[:, 1] / closes
    out[:, 2] = feature_rows[:, 2] / CCI_DIVISOR
    out[:, 3] = feature_rows[:, 3]
    vol = feature_rows[:, 4]
    sd = vol.std()
    out[:, 4] = (vol - vol.mean()) / sd if sd > 0 else 0.0
    return out


def build_observation(
    feature_rows: np.ndarray, closes: np.ndarray, portfolio_rows: np.ndarray
) -> np.ndarray:
    """Assemble a flattened (window * 8) observation from per-bar inputs.

    Five normalized market columns (see normalize_market_window) followed by
    cash ratio, stock ratio and the unrealized profit ratio clamped to
    [-1, 1].
    """
    w = feature_rows.shape[0]
    out = np.empty((w, FEATURES_PER_BAR))
    out[:, :5] = normalize_market_window(feature_rows, closes)
    out[:, 5] = portfolio_rows[:, 0]
    out[:, 6] = portfolio_rows[:, 1]
    out[:, 7] = np.clip(portfolio_rows[:, 2], -1.0, 1.0)
    return out.reshape(-1)


class TradingEnv:
    """Episode over resampled bars with an all-in/all-out single position.

    Optional `trace` is an open text file; every step appends a CSV row
    `timestamp,action,reward,portfolio_value`.
    """

    def __init__(self, sessions: Sequence[Session], config: EnvConfig, trace=None):
        if not sessions:
            raise EnvError("no sessions provided")
        self.config = config
        closes, highs, lows, volumes, timestamps, session_last = [], [], [], [], [], []
        for session in sessions:
            bars = resample(session, config.timeframe)
            for b in bars:
                closes.append(b.close)
                highs.append(b.high)
                lows.append(b.low)
                volumes.append(float(b.volume))
                timestamps.append(b.timestamp)
            session_last.extend([False] * (len(bars) - 1) + [True])
        self.closes = np.asarray(closes)
        self.timestamps = tuple(timestamps)
        self.session_last = np.asarray(session_last, dtype=bool)
        self.n_bars = self.closes.size
        self.first_valid, self.features = feature_table(
            np.asarray(highs), np.asarray(lows), self.closes, np.asarray(volumes)
        )
        self.min_cursor = self.first_valid + config.window_size - 1
        self._trace = trace
        self._trace_writer = None
        if trace is not None:
            self._trace_writer = csv.writer(trace)
            self._trace_writer.writerow(["timestamp", "action", "reward", "portfolio_value"])
        self.cursor = -1
        self.done = True
        self.portfolio: PortfolioState | None = None
        self.trades: list[TradeLogEntry] = []
        self._pf_rows = np.empty((self.n_bars, 3))

    @property
    def observation_size(self) -> int:
        return self.config.window_size * FEATURES_PER_BAR

    @property
    def action_count(self) -> int:
        return len(Action)

    @property
    def portfolio_value(self) -> float:
        return self.portfolio.total_value

    @property
    def current_timestamp(self):
        return self.timestamps[self.cursor]

    def reset(self, cursor: int | None = None) -> np.ndarray:
        """Start an episode with the cursor on a fully-warmed-up bar.

        The default cursor is the earliest valid one. Raises when fewer than
        min_cursor + 1 bars of history precede the requested cursor, or when
        no bars remain to step through.
        """
        if cursor is None:
            cursor = self.min_cursor
        if cursor < self.min_cursor:
            raise EnvError(
                f"cursor {cursor} too early: need {self.min_cursor + 1} bars of history "
                f"(window {self.config.window_size} after {self.first_valid}-bar indicator warmup)"
            )
        if cursor >= self.n_bars - 1:
            raise EnvError(
                f"cursor {cursor} leaves no bars to step through ({self.n_bars} bars total)"
            )
        self.cursor = cursor
        self.done = False
        self.portfolio = PortfolioState.initial(
            self.config.initial_cash, float(self.closes[cursor]), self.config.fee_per_sell_share
        )
        self.trades = []
        pf = features(self.portfolio)
        row = (pf.cash_ratio, pf.stock_ratio, pf.unrealized_profit_ratio)
        self._pf_rows[cursor - self.config.window_size + 1: cursor + 1] = row
        return self._observation()

    def step(self, action: Action | int) -> StepResult:
        """Trade at the current bar close, advance one bar, settle rewards."""
        if self.done:
            raise EnvError("step() called on a finished episode; call reset()")
        action = Action(action) if not isinstance(action, Action) else action
        c = self.cursor
        price = float(self.closes[c])
        reward = 0.0
        trade = None
        if action is Action.BUY:
            self.portfolio, bought = buy_all(self.portfolio, price)
            if bought:
                trade = TradeLogEntry(self.timestamps[c], "buy", bought, price, 0.0)
                self.trades.append(trade)
        elif action is Action.SELL:
            self.portfolio, sale = sell_all(self.portfolio, price)
            if sale is not None:
                reward = agent_reward(sale.sell_price, sale.avg_cost)
                trade = TradeLogEntry(self.timestamps[c], "sell", sale.shares, price, reward)
                self.trades.append(trade)
        nxt = c + 1
        next_price = float(self.closes[nxt])
        self.portfolio = mark(self.portfolio, next_price)
        forced = None
        if self.session_last[nxt] and self.portfolio.shares > 0:
            # A session's last bar never carries a position past the close.
            self.portfolio, sale = sell_all(self.portfolio, next_price)
            forced_reward = agent_reward(sale.sell_price, sale.avg_cost)
            reward += forced_reward
            forced = TradeLogEntry(self.timestamps[nxt], "sell", sale.shares, next_price, forced_reward)
            self.trades.append(forced)
        pf = features(self.portfolio)
        self._pf_rows[nxt] = (pf.cash_ratio, pf.stock_ratio, pf.unrealized_profit_ratio)
        self.cursor = nxt
        self.done = nxt == self.n_bars - 1
        obs = self._observation()
        info = {
            "timestamp": self.timestamps[nxt],
            "portfolio_value": self.portfolio.total_value,
            "trade": trade,
            "forced_liquidation": forced,
        }
        if self._trace_writer is not None:
            self._trace_writer.writerow(
                [self.timestamps[nxt].isoformat(), action.name.lower(),
                 repr(reward), repr(self.portfolio.total_value)]
            )
        return StepResult(obs, reward, self.done, info)

    def _observation(self) -> np.ndarray:
        w = self.config.window_size
        window = slice(self.cursor - w + 1, self.cursor + 1)
        return build_observation(self.features[window], self.closes[window], self._pf_rows[window])

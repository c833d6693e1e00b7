"""Market data: bar/session validation, CSV ingestion, resampling, synthesis."""

from datetime import date, datetime, time, timedelta, timezone

import numpy as np
import pytest

from alloctrader.market_data import (
    Bar,
    EmptyDataError,
    MarketDataError,
    RegimeParams,
    Session,
    SynthConfig,
    Timeframe,
    TradingCalendar,
    ingest_csv,
    resample,
    resample_bars,
    sessions_in_range,
    synthesize,
    write_sessions_csv,
)
from conftest import small_synth_config

UTC = timezone.utc


def _ts(h, m, day=2):
    return datetime(2024, 1, day, h, m, tzinfo=UTC)


def _bar(h, m, o=100.0, hi=101.0, lo=99.0, c=100.5, v=10, day=2):
    return Bar(_ts(h, m, day), o, hi, lo, c, v)


class TestBar:
    def test_valid_bar_normalizes_to_utc(self):
        naive = Bar(datetime(2024, 1, 2, 9, 30), 10.0, 11.0, 9.0, 10.5, 5)
        assert naive.timestamp.tzinfo is UTC

    def test_high_below_low_rejected(self):
        with pytest.raises(MarketDataError):
            _bar(9, 30, o=100.0, hi=99.0, lo=100.5, c=100.0)

    def test_close_above_high_rejected(self):
        with pytest.raises(MarketDataError):
            _bar(9, 30, c=102.0)

    def test_open_below_low_rejected(self):
        with pytest.raises(MarketDataError):
            _bar(9, 30, o=98.0)

    def test_non_positive_price_rejected(self):
        with pytest.raises(MarketDataError):
            _bar(9, 30, o=0.0, lo=0.0)

    def test_negative_volume_rejected(self):
        with pytest.raises(MarketDataError):
            _bar(9, 30, v=-1)

    def test_sub_minute_timestamp_rejected(self):
        with pytest.raises(MarketDataError):
            Bar(datetime(2024, 1, 2, 9, 30, 15, tzinfo=UTC), 10.0, 11.0, 9.0, 10.5, 5)


class TestSession:
    def test_bar_outside_hours_rejected(self):
        with pytest.raises(MarketDataError):
            Session(date(2024, 1, 2), _ts(9, 30), _ts(16, 0), (_bar(9, 0),))

    def test_non_increasing_timestamps_rejected(self):
        with pytest.raises(MarketDataError):
            Session(date(2024, 1, 2), _ts(9, 30), _ts(16, 0), (_bar(9, 31), _bar(9, 31)))

    def test_bar_at_close_time_rejected(self):
        with pytest.raises(MarketDataError):
            Session(date(2024, 1, 2), _ts(9, 30), _ts(16, 0), (_bar(16, 0),))


class TestTimeframe:
    def test_labels_round_trip(self):
        for tf in Timeframe:
            assert Timeframe.from_label(tf.label) is tf

    def test_unknown_label_rejected(self):
        with pytest.raises(MarketDataError):
            Timeframe.from_label("5m")

    def test_hour_is_multiple_of_others(self):
        assert Timeframe.ONE_HOUR.minutes % Timeframe.TEN_MINUTE.minutes == 0
        assert Timeframe.ONE_HOUR.minutes % Timeframe.ONE_MINUTE.minutes == 0


class TestIngest:
    def _write(self, tmp_path, rows, header="timestamp,open,high,low,close,volume"):
        path = tmp_path / "bars.csv"
        path.write_text("\n".join([header] + rows) + "\n")
        return str(path)

    def _calendar(self):
        return TradingCalendar.weekdays(date(2024, 1, 1), date(2024, 1, 31))

    def test_full_session_ingested(self, tmp_path):
        rows = []
        start = _ts(9, 30)
        for k in range(390):
            ts = start + timedelta(minutes=k)
            rows.append(f"{ts.isoformat()},100.0,100.5,99.5,100.2,7")
        result = ingest_csv(self._write(tmp_path, rows), self._calendar())
        assert len(result.sessions) == 1
        assert len(result.sessions[0]) == 390
        assert result.dropped_rows == 0

    def test_out_of_session_rows_dropped_and_counted(self, tmp_path):
        rows = [
            f"{_ts(9, 0).isoformat()},100,101,99,100,5",
            f"{_ts(9, 30).isoformat()},100,101,99,100,5",
            f"{_ts(16, 30).isoformat()},100,101,99,100,5",
            f"{datetime(2024, 1, 6, 10, 0, tzinfo=UTC).isoformat()},100,101,99,100,5",
        ]
        result = ingest_csv(self._write(tmp_path, rows), self._calendar())
        assert result.dropped_rows == 3
        assert len(result.sessions) == 1 and len(result.sessions[0]) == 1

    def test_malformed_price_names_row(self, tmp_path):
        rows = [
            f"{_ts(9, 30).isoformat()},100,101,99,100,5",
            f"{_ts(9, 31).isoformat()},100,abc,99,100,5",
        ]
        with pytest.raises(MarketDataError, match="row 3"):
            ingest_csv(self._write(tmp_path, rows), self._calendar())

    def test_ohlc_violation_names_row(self, tmp_path):
        rows = [f"{_ts(9, 30).isoformat()},100,99,100,100,5"]
        with pytest.raises(MarketDataError, match="row 2"):
            ingest_csv(self._write(tmp_path, rows), self._calendar())

    def test_fractional_volume_rejected(self, tmp_path):
        rows = [f"{_ts(9, 30).isoformat()},100,101,99,100,5.5"]
        with pytest.raises(MarketDataError, match="row 2"):
            ingest_csv(self._write(tmp_path, rows), self._calendar())

    def test_empty_file_distinct_error(self, tmp_path):
        path = tmp_path / "empty.csv"
        path.write_text("")
        with pytest.raises(EmptyDataError):
            ingest_csv(str(path), self._calendar())

    def test_header_only_distinct_error(self, tmp_path):
        with pytest.raises(EmptyDataError):
            ingest_csv(self._write(tmp_path, []), self._calendar())

    def test_wrong_header_rejected(self, tmp_path):
        path = self._write(tmp_path, [], header="time,o,h,l,c,v")
        with pytest.raises(MarketDataError, match="header"):
            ingest_csv(path, self._calendar())

    def test_holiday_gap_preserved(self, tmp_path):
        rows = []
        for day in (2, 5):
            for k in range(3):
                ts = _ts(9, 30 + k, day=day)
                rows.append(f"{ts.isoformat()},100,101,99,100,5")
        result = ingest_csv(self._write(tmp_path, rows), self._calendar())
        assert [s.day for s in result.sessions] == [date(2024, 1, 2), date(2024, 1, 5)]
        assert [len(s) for s in result.sessions] == [3, 3]

    def test_duplicate_timestamp_rejected(self, tmp_path):
        rows = [
            f"{_ts(9, 30).isoformat()},100,101,99,100,5",
            f"{_ts(9, 30).isoformat()},100,101,99,100,6",
        ]
        with pytest.raises(MarketDataError, match="duplicate"):
            ingest_csv(self._write(tmp_path, rows), self._calendar())

    def test_round_trip_bit_identical(self, tmp_path):
        sessions = synthesize(small_synth_config(session_minutes=120), seed=5, days=3).sessions
        path = tmp_path / "rt.csv"
        write_sessions_csv(sessions, str(path))
        calendar = TradingCalendar.from_sessions(sessions)
        back = ingest_csv(str(path), calendar)
        assert back.dropped_rows == 0
        assert back.sessions == sessions
        # Second pass through serialization is also identical.
        path2 = tmp_path / "rt2.csv"
        write_sessions_csv(back.sessions, str(path2))
        assert path.read_text() == path2.read_text()


class TestCalendar:
    def test_weekdays_excludes_weekends(self):
        cal = TradingCalendar.weekdays(date(2024, 1, 1), date(2024, 1, 7))
        assert date(2024, 1, 6) not in cal.days
        assert date(2024, 1, 5) in cal.days

    def test_file_round_trip(self, tmp_path):
        cal = TradingCalendar.weekdays(date(2024, 1, 1), date(2024, 1, 10))
        path = tmp_path / "cal.csv"
        cal.to_file(str(path))
        back = TradingCalendar.from_file(str(path))
        assert back.days == cal.days

    def test_locate_boundaries(self):
        cal = TradingCalendar.weekdays(date(2024, 1, 1), date(2024, 1, 7))
        assert cal.locate(_ts(9, 30)) == date(2024, 1, 2)
        assert cal.locate(_ts(15, 59)) == date(2024, 1, 2)
        assert cal.locate(_ts(16, 0)) is None
        assert cal.locate(_ts(9, 29)) is None


def _session_of(n_bars, start_price=100.0, day=2):
    rng = np.random.default_rng(n_bars)
    bars = []
    price = start_price
    start = _ts(9, 30, day=day)
    for k in range(n_bars):
        o = price
        c = price * (1.0 + rng.normal(0, 0.001))
        hi = max(o, c) * 1.001
        lo = min(o, c) * 0.999
        bars.append(Bar(start + timedelta(minutes=k), o, hi, lo, c, int(rng.integers(1, 50))))
        price = c
    return Session(date(2024, 1, day), start, start + timedelta(minutes=n_bars), tuple(bars))


class TestResample:
    def test_390_to_10m_counts_and_volume(self):
        session = _session_of(390)
        out = resample(session, Timeframe.TEN_MINUTE)
        assert len(out) == 39
        for i, bar in enumerate(out):
            chunk = session.bars[i * 10:(i + 1) * 10]
            assert bar.volume == sum(b.volume for b in chunk)
            assert bar.open == chunk[0].open
            assert bar.close == chunk[-1].close
            assert bar.high == max(b.high for b in chunk)
            assert bar.low == min(b.low for b in chunk)
            assert bar.timestamp == chunk[0].timestamp

    def test_390_to_1h_partial_window(self):
        out = resample(_session_of(390), Timeframe.ONE_HOUR)
        assert len(out) == 7
        # Trailing partial hour covers the last 30 minutes.
        assert out[-1].timestamp == _ts(9, 30) + timedelta(minutes=360)

    def test_single_bar_identity(self):
        session = _session_of(1)
        out = resample(session, Timeframe.ONE_HOUR)
        assert out == (session.bars[0],)

    def test_volume_conserved_any_window(self):
        session = _session_of(97)
        total = sum(b.volume for b in session.bars)
        for n in (1, 2, 7, 10, 60, 97, 200):
            assert sum(b.volume for b in resample_bars(session.bars, n)) == total

    def test_path_consistency_full_hour_session(self):
        session = _session_of(360)
        direct = resample(session, Timeframe.ONE_HOUR)
        via_10m = resample_bars(resample(session, Timeframe.TEN_MINUTE), 6)
        assert direct == via_10m

    def test_empty_session_rejected(self):
        empty = Session(date(2024, 1, 2), _ts(9, 30), _ts(16, 0), ())
        with pytest.raises(MarketDataError):
            resample(empty, Timeframe.ONE_MINUTE)

    def test_bad_window_rejected(self):
        with pytest.raises(MarketDataError):
            resample_bars(_session_of(5).bars, 0)


class TestSynthesize:
    def test_same_seed_bit_identical(self):
        cfg = small_synth_config(session_minutes=60)
        a = synthesize(cfg, seed=7, days=3)
        b = synthesize(cfg, seed=7, days=3)
        assert a.sessions == b.sessions
        assert all((x == y).all() for x, y in zip(a.regimes, b.regimes))

    def test_different_seed_differs(self):
        cfg = small_synth_config(session_minutes=60)
        a = synthesize(cfg, seed=7, days=1)
        b = synthesize(cfg, seed=8, days=1)
        assert a.sessions != b.sessions

    def test_degenerate_walk_is_flat(self):
        cfg = SynthConfig(
            low=RegimeParams(0.0, 0.0),
            high=RegimeParams(0.0, 0.0),
            transition=((0.9, 0.1), (0.1, 0.9)),
            start_price=42.0,
            session_minutes=30,
        )
        result = synthesize(cfg, seed=1, days=2)
        for session in result.sessions:
            for bar in session.bars:
                assert bar.open == bar.high == bar.low == bar.close == 42.0

    def test_non_stochastic_matrix_rejected(self):
        with pytest.raises(MarketDataError):
            SynthConfig(
                low=RegimeParams(0.0, 0.001),
                high=RegimeParams(0.0, 0.002),
                transition=((0.9, 0.2), (0.1, 0.9)),
            )

    def test_labels_cover_every_bar(self, regime_result):
        for session, labels in zip(regime_result.sessions, regime_result.regimes):
            assert labels.shape == (len(session),)
            assert set(np.unique(labels)) <= {0, 1}

    def test_weekends_skipped(self):
        cfg = small_synth_config(session_minutes=10, start_date=date(2024, 1, 5))
        result = synthesize(cfg, seed=0, days=3)
        days = [s.day for s in result.sessions]
        assert days == [date(2024, 1, 5), date(2024, 1, 8), date(2024, 1, 9)]

    def test_regime_volatility_separation(self):
        # Sticky chain, high sigma = 4x low sigma; realized per-day vol of
        # high-labeled days should beat low-labeled days in >= 95% of pairs.
        cfg = SynthConfig(
            low=RegimeParams(0.0, 0.0005),
            high=RegimeParams(0.0, 0.002),
            transition=((0.998, 0.002), (0.002, 0.998)),
            session_minutes=390,
        )
        result = synthesize(cfg, seed=23, days=250)
        low_vols, high_vols = [], []
        for session, labels in zip(result.sessions, result.regimes):
            share_high = labels.mean()
            if 0.2 < share_high < 0.8:
                continue  # mixed day, regime ambiguous
            closes = np.array([b.close for b in session.bars])
            realized = np.diff(closes) / closes[:-1]
            (high_vols if share_high >= 0.8 else low_vols).append(realized.std(ddof=1))
        assert len(low_vols) >= 10 and len(high_vols) >= 10
        low_sorted = np.sort(low_vols)
        wins = sum(np.searchsorted(low_sorted, h) for h in high_vols)
        assert wins / (len(low_vols) * len(high_vols)) >= 0.95


class TestSessionsInRange:
    def test_inclusive_bounds(self, short_sessions):
        days = [s.day for s in short_sessions]
        picked = sessions_in_range(short_sessions, days[1], days[3])
        assert [s.day for s in picked] == days[1:4]
        assert sessions_in_range(short_sessions, None, None) == tuple(short_sessions)

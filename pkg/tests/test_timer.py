import time

import pytest

from ppsim.timer import (VARIANTS, Calibration, TimerUnavailable, available_cpus, bench, calibrate,
                         format_table, start_timer)


def timer_or_skip(variant):
    try:
        return start_timer(variant, force=True)
    except TimerUnavailable as e:
        pytest.skip(str(e))


@pytest.mark.parametrize("variant", VARIANTS)
def test_counts_and_monotone(variant):
    with timer_or_skip(variant) as h:
        time.sleep(0.01)
        first = h.read()
        reads = [h.read() for _ in range(1000)]
        assert first > 0
        assert all(b >= a for a, b in zip([first] + reads, reads))


def test_stopped_timer_rate_zero():
    h = timer_or_skip("memory_inc")
    h.stop()
    assert not h.running
    cal = calibrate(h, duration=0.02, samples=2)
    assert cal.rate == 0 and not cal.unstable


def test_unknown_variant():
    with pytest.raises(ValueError):
        start_timer("sundial", force=True)


def test_single_cpu_refused(monkeypatch):
    monkeypatch.setattr("ppsim.timer.available_cpus", lambda: [0])
    with pytest.raises(TimerUnavailable, match="2 hardware threads"):
        start_timer()


def test_format_table():
    rows = [Calibration("memory_inc", 1e8, 1e6, 5, False), Calibration("shadow_register", 4e8, 1e8, 5, True)]
    out = format_table(rows)
    assert "4.000" in out and "unstable" in out
    assert rows[1].increments_per_tick(4e8) == 1.0


@pytest.mark.hardware
@pytest.mark.skipif(len(available_cpus()) < 2, reason="needs at least 2 hardware threads")
def test_shadow_register_faster():
    rows = {r.variant: r for r in bench(0.3)}
    assert rows["shadow_register"].rate > rows["memory_inc"].rate

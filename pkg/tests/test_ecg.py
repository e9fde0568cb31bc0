import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cinephase import ecg
from cinephase.ecg import ECGTrace, PeakSet
from cinephase.errors import InsufficientBeats, SignalTooShort
from cinephase.synthcine import SynthConfig, gen_ecg

FS = 400.0


def _sine(freq, seconds=10.0, fs=FS):
    t = np.arange(int(seconds * fs)) / fs
    return t, np.sin(2 * np.pi * freq * t)


def _bump_ecg(r_times, fs=FS, seconds=3.0, t_delay=None):
    t = np.arange(int(seconds * fs)) / fs
    x = np.zeros_like(t)
    for r in r_times:
        x += np.exp(-0.5 * ((t - r) / 0.01) ** 2)
        x -= 0.2 * np.exp(-0.5 * ((t - r - 0.03) / 0.01) ** 2)
        if t_delay is not None:
            x += 0.3 * np.exp(-0.5 * ((t - r - t_delay) / 0.04) ** 2)
    return ECGTrace(x, fs)


# -- filters ------------------------------------------------------------------

def test_bandpass_preserves_10hz_sine():
    _, x = _sine(10.0)
    y = ecg.bandpass_zero_phase(ECGTrace(x, FS)).samples
    core = slice(400, -400)
    assert len(y) == len(x)
    amp = np.abs(y[core]).max()
    assert abs(amp - 1.0) <= 0.05
    # zero phase: crests stay put
    px = np.nonzero((x[1:-1] > x[:-2]) & (x[1:-1] > x[2:]))[0][5:-5]
    py = np.nonzero((y[1:-1] > y[:-2]) & (y[1:-1] > y[2:]))[0][5:-5]
    assert np.array_equal(px, py)


def test_bandpass_attenuates_baseline_wander():
    _, x = _sine(0.2)
    y = ecg.bandpass_zero_phase(ECGTrace(x, FS)).samples
    assert np.abs(y[400:-400]).max() <= 1.0 / 20.0


def test_filters_map_zero_to_zero():
    z = ECGTrace(np.zeros(1000), FS)
    assert np.all(ecg.bandpass_zero_phase(z).samples == 0)
    assert np.all(ecg.lowpass_zero_phase(z).samples == 0)


def test_filter_rejects_short_trace_and_bad_band():
    with pytest.raises(SignalTooShort):
        ecg.bandpass_zero_phase(ECGTrace(np.zeros(50), FS))
    with pytest.raises(ValueError):
        ecg.bandpass_zero_phase(ECGTrace(np.zeros(1000), FS), lo=45, hi=3)
    with pytest.raises(ValueError):
        ecg.lowpass_zero_phase(ECGTrace(np.zeros(1000), FS), cutoff=250)


def test_lowpass_separates_5_and_40_hz():
    _, a = _sine(5.0)
    _, b = _sine(40.0)
    y = ecg.lowpass_zero_phase(ECGTrace(a + b, FS)).samples
    core = slice(400, -400)
    resid = y[core] - a[core]
    # project onto each component
    t = np.arange(len(a))[core] / FS
    amp5 = 2 * abs(np.mean(y[core] * np.exp(-2j * np.pi * 5 * t)))
    amp40 = 2 * abs(np.mean(y[core] * np.exp(-2j * np.pi * 40 * t)))
    assert abs(amp5 - 1.0) <= 0.10
    assert amp40 <= 0.1
    assert np.abs(resid).max() < 0.2


def test_lowpass_step_edge():
    x = np.zeros(2000)
    x[1000:] = 1.0
    y = ecg.lowpass_zero_phase(ECGTrace(x, FS)).samples
    # midpoint of the edge stays between samples 999 and 1000
    assert y[999] + y[1000] == pytest.approx(1.0, abs=1e-9)
    assert y[999] < 0.5 < y[1000]
    # the main edge, from the last trough before the step to the first crest after, rises monotonically
    d = np.diff(y)
    lo = np.nonzero(d[:1000] <= 0)[0][-1] + 1
    hi = 1000 + np.nonzero(d[1000:] <= 0)[0][0]
    assert np.all(np.diff(y[lo:hi + 1]) > 0)
    assert y[lo] < 0.1 and y[hi] > 0.9


@pytest.mark.parametrize("centre", [700, 1000, 1301])
def test_zero_phase_keeps_symmetric_extremum(centre):
    i = np.arange(2000)
    x = np.exp(-0.5 * ((i - centre) / 12.0) ** 2)
    for y in (ecg.bandpass_zero_phase(ECGTrace(x, FS)).samples, ecg.lowpass_zero_phase(ECGTrace(x, FS)).samples):
        assert abs(int(np.argmax(y)) - centre) <= 1


# -- R peaks ------------------------------------------------------------------

def test_r_peaks_on_known_bumps():
    trace = _bump_ecg([0.5, 1.5, 2.5])
    r = ecg.detect_r_peaks(ecg.bandpass_zero_phase(trace))
    assert len(r) == 3
    assert np.all(np.abs(r - np.array([200, 600, 1000])) <= 0.02 * FS)


def test_constant_trace_has_no_beats():
    with pytest.raises(InsufficientBeats):
        ecg.detect_r_peaks(ecg.bandpass_zero_phase(ECGTrace(np.full(4000, 0.7), FS)))


def test_peak_count_at_100_bpm():
    trace, _ = gen_ecg(SynthConfig(heart_rate=100.0, duration=10.0, seed=3))
    r = ecg.detect_r_peaks(ecg.bandpass_zero_phase(trace))
    assert 16 <= len(r) <= 17


def test_r_peaks_respect_refractory_period():
    trace, _ = gen_ecg(SynthConfig(heart_rate=120.0, duration=10.0, ecg_snr_db=10.0, seed=5))
    r = ecg.detect_r_peaks(ecg.bandpass_zero_phase(trace))
    assert np.all(np.diff(r) >= 0.2 * FS)


# -- T peak and end of systole -------------------------------------------------

def test_t_window_bounds():
    assert ecg.t_window(0, 400) == (80, 260)
    assert ecg.t_window(100, 600) == (200, 425)


@pytest.mark.parametrize("sign", [1.0, -1.0])
def test_t_peak_on_gaussian_bump(sign):
    # a lone T bump at 35% of the beat, no QRS in the smoothed signal
    i = np.arange(800)
    centre = 0.35 * 400
    y = sign * 0.3 * np.exp(-0.5 * ((i - centre) / 16.0) ** 2)
    t = ecg.detect_t_peak(ECGTrace(y, FS), 0, 400)
    assert abs(t - centre) <= 0.010 * FS


def _t_wave_trace(t_sign):
    t = np.arange(int(3.2 * FS)) / FS
    x = np.zeros_like(t)
    for r in (0.5, 1.5, 2.5):
        x += np.exp(-0.5 * ((t - r) / 0.01) ** 2)
        x += t_sign * 0.3 * np.exp(-0.5 * ((t - r - 0.35) / 0.04) ** 2)
    return ECGTrace(x, FS)


@pytest.mark.parametrize("t_sign", [1.0, -1.0])
def test_t_peak_on_synthetic_ecg(t_sign):
    peaks = ecg.detect_peaks(_t_wave_trace(t_sign))
    assert len(peaks.t_peaks) == 2
    for r, t, e, r_next in peaks.beats():
        lo, hi = ecg.t_window(r, r_next)
        assert lo <= t < hi
        assert r < t < e < r_next
        assert abs(t - (r + 0.35 * FS)) <= 0.02 * FS


def test_t_peak_missing_raises():
    from cinephase.errors import TPeakNotFound

    with pytest.raises(TPeakNotFound):
        ecg.detect_t_peak(ECGTrace(np.linspace(0, 1, 500), FS), 0, 400)


def _descending_fixture(prefix_start):
    """Beat [0, 500): window [100, 325). Linear rise to a crest at 200, linear
    fall to a trough at 320, rise afterwards."""
    y = np.zeros(600)
    i = np.arange(600)
    y[100:201] = prefix_start + (1.0 - prefix_start) * (i[100:201] - 100) / 100.0
    y[:100] = prefix_start - 0.01 * (100 - i[:100])
    y[200:321] = 1.0 - 2.0 * (i[200:321] - 200) / 120.0
    y[320:] = y[320] + 0.01 * (i[320:] - 320)
    return y


def test_eos_mean_crossing_before_extremum():
    # choose the prefix so the window mean lies between y[300] and y[299]
    a = _descending_fixture(0.0)[100:325]
    b = _descending_fixture(1.0)[100:325]
    target = -0.66
    c = (target - a.mean()) / (b.mean() - a.mean())
    y = _descending_fixture(c)
    assert y[300] < y[100:325].mean() <= y[299]
    e, degraded = ecg.detect_end_of_systole(ECGTrace(y, FS), 200, 0, 500)
    assert (e, degraded) == (300, False)


def test_eos_extremum_when_mean_never_crossed():
    i = np.arange(600)
    y = np.empty(600)
    y[:200] = -3.0 + 4.0 * i[:200] / 200.0
    y[200:311] = 1.0 - 0.5 * (i[200:311] - 200) / 110.0
    y[311:] = y[310] + 0.01 * (i[311:] - 310)
    assert y[200:311].min() > y[100:325].mean()
    e, degraded = ecg.detect_end_of_systole(ECGTrace(y, FS), 200, 0, 500)
    assert (e, degraded) == (310, False)


def test_eos_gaussian_crossing():
    i = np.arange(800)
    c, sigma, amp = 140, 16.0, 0.3
    y = amp * np.exp(-0.5 * ((i - c) / sigma) ** 2)
    m = y[80:260].mean()
    expect = int(np.ceil(c + sigma * np.sqrt(2 * np.log(amp / m))))
    e, degraded = ecg.detect_end_of_systole(ECGTrace(y, FS), c, 0, 400)
    assert not degraded
    assert e == expect


def test_eos_fallback_is_logged(caplog):
    # falling forever; a T taken below the window mean never crosses back
    y = -np.arange(600, dtype=float)
    with caplog.at_level(logging.INFO, logger="cinephase.ecg"):
        e, degraded = ecg.detect_end_of_systole(ECGTrace(y, FS), 200, 0, 400)
    assert degraded and e == 260
    assert "falling back" in caplog.text


# -- phase signal and heart rate ----------------------------------------------

def test_phase_signal_single_beat():
    peaks = PeakSet([0, 400], [100], [150])
    ph = ecg.build_phase_signal(peaks, 400, FS)
    assert np.all(ph.values[:150] == 0) and np.all(ph.values[150:400] == 1)
    assert ph.valid_range == (0, 400)


def test_phase_signal_is_periodic_for_identical_beats():
    peaks = PeakSet([0, 400, 800, 1200], [100, 500, 900], [150, 550, 950])
    v = ecg.build_phase_signal(peaks, 1200, FS).values
    assert np.array_equal(v[:400], v[400:800]) and np.array_equal(v[:400], v[800:1200])


def test_phase_signal_needs_beats():
    with pytest.raises(InsufficientBeats):
        ecg.build_phase_signal(PeakSet([10], [], []), 100, FS)


def test_phase_signal_rebuild_is_identical():
    trace, _ = gen_ecg(SynthConfig(seed=11, duration=6.0))
    peaks = ecg.detect_peaks(trace)
    a = ecg.build_phase_signal(peaks, len(trace), FS)
    b = ecg.build_phase_signal(peaks, len(trace), FS)
    assert a.values.tobytes() == b.values.tobytes()


@pytest.mark.parametrize("hr", [50.0, 70.0, 90.0])
def test_phase_agrees_with_generator(hr):
    trace, truth = gen_ecg(SynthConfig(heart_rate=hr, duration=10.0, ecg_snr_db=25.0, seed=int(hr)))
    _, ph = ecg.phase_from_trace(trace)
    v0 = max(ph.valid_range[0], truth.phase.valid_range[0])
    v1 = min(ph.valid_range[1], truth.phase.valid_range[1])
    assert np.mean(ph.values[v0:v1] == truth.phase.values[v0:v1]) >= 0.98


@pytest.mark.parametrize(
    "times, bpm",
    [([0.0, 1.0, 2.0], 60.0), ([0.0, 0.5, 1.0], 120.0), ([0.0, 0.8, 1.8], 67.5)],
)
def test_heart_rate(times, bpm):
    r = np.round(np.asarray(times) * FS).astype(int)
    assert ecg.heart_rate(r, FS) == pytest.approx(bpm)


def test_heart_rate_needs_two_peaks():
    with pytest.raises(InsufficientBeats):
        ecg.heart_rate([5], FS)


@settings(max_examples=25, deadline=None)
@given(
    hr=st.floats(40.0, 120.0),
    snr=st.floats(10.0, 30.0),
    invert=st.booleans(),
    seed=st.integers(0, 10_000),
)
def test_detected_beats_are_ordered_and_windowed(hr, snr, invert, seed):
    trace, _ = gen_ecg(SynthConfig(heart_rate=hr, duration=6.0, ecg_snr_db=snr, invert_t=invert, seed=seed))
    peaks = ecg.detect_peaks(trace)
    assert np.all(np.diff(peaks.r_peaks) > 0)
    for r, t, e, r_next in peaks.beats():
        lo, hi = ecg.t_window(r, r_next)
        assert lo <= t < hi
        assert r < t < e < r_next

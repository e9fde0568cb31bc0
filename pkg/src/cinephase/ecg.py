"""Ground-truth cardiac phase from a single-lead ECG.

The chain is: zero-phase FIR band-pass, R-peak detection, a second zero-phase
low-pass, then per beat a T-peak search inside the 20%-65% window and an
end-of-systole point after it. Systole (0) runs from each R peak to the
end-of-systole point, diastole (1) from there to the next R peak.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.signal as ss

from .errors import InsufficientBeats, SignalTooShort, TPeakNotFound

logger = logging.getLogger(__name__)

REFRACTORY_S = 0.200


@dataclass
class ECGTrace:
    samples: np.ndarray
    fs: float

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.fs <= 0:
            raise ValueError(f"sampling rate must be positive, got {self.fs}")

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.fs


@dataclass
class PeakSet:
    r_peaks: np.ndarray
    t_peaks: np.ndarray
    eos_points: np.ndarray
    beat_r: np.ndarray = field(default=None)
    degraded: list = field(default_factory=list)

    def __post_init__(self):
        self.r_peaks = np.asarray(self.r_peaks, dtype=np.int64)
        self.t_peaks = np.asarray(self.t_peaks, dtype=np.int64)
        self.eos_points = np.asarray(self.eos_points, dtype=np.int64)
        if self.beat_r is None:
            self.beat_r = np.arange(len(self.t_peaks), dtype=np.int64)
        self.beat_r = np.asarray(self.beat_r, dtype=np.int64)

    def beats(self):
        """Yield ``(r_k, t_k, eos_k, r_next)`` for every beat with a detected T peak."""
        for t, e, k in zip(self.t_peaks, self.eos_points, self.beat_r):
            yield int(self.r_peaks[k]), int(t), int(e), int(self.r_peaks[k + 1])

    def to_dict(self, fs: float) -> dict:
        return {
            "fs": fs,
            "r_peaks": self.r_peaks.tolist(),
            "t_peaks": self.t_peaks.tolist(),
            "eos_points": self.eos_points.tolist(),
            "beat_index": self.beat_r.tolist(),
            "degraded_beats": list(self.degraded),
        }


@dataclass
class PhaseSignal:
    """Per-sample systole (0) / diastole (1) labels.

    Only samples in the half-open ``valid_range`` carry a label; the rest are
    stored as 0 and must not be used.
    """

    values: np.ndarray
    fs: float
    valid_range: tuple[int, int]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.uint8)
        self.valid_range = (int(self.valid_range[0]), int(self.valid_range[1]))


def _fir_taps(fs: float, duration: float) -> int:
    n = max(3, int(duration * fs))
    return n | 1


def _zero_phase(trace: ECGTrace, taps: np.ndarray) -> ECGTrace:
    x = trace.samples
    if len(x) < len(taps):
        raise SignalTooShort(f"trace of {len(x)} samples is shorter than the {len(taps)}-tap filter")
    y = ss.filtfilt(taps, [1.0], x, padlen=min(3 * len(taps), len(x) - 1))
    return ECGTrace(y, trace.fs)


def bandpass_zero_phase(trace: ECGTrace, lo: float = 3.0, hi: float = 45.0, taps_s: float = 0.3) -> ECGTrace:
    """Hamming-window FIR band-pass run forward and backward (zero phase delay)."""
    if not 0 < lo < hi < trace.fs / 2:
        raise ValueError(f"need 0 < lo < hi < fs/2, got lo={lo}, hi={hi}, fs={trace.fs}")
    taps = ss.firwin(_fir_taps(trace.fs, taps_s), [lo, hi], pass_zero=False, fs=trace.fs, window="hamming")
    return _zero_phase(trace, taps)


def lowpass_zero_phase(trace: ECGTrace, cutoff: float = 10.0, taps_s: float = 0.3) -> ECGTrace:
    if not 0 < cutoff < trace.fs / 2:
        raise ValueError(f"need 0 < cutoff < fs/2, got {cutoff} at fs={trace.fs}")
    taps = ss.firwin(_fir_taps(trace.fs, taps_s), cutoff, fs=trace.fs, window="hamming")
    return _zero_phase(trace, taps)


def detect_r_peaks(filtered: ECGTrace) -> np.ndarray:
    """Pan-Tompkins style QRS detector.

    Squared-derivative energy is integrated over 150 ms, candidate energy
    peaks are classified with the adaptive signal/noise thresholds (with a
    search-back for missed beats), and every accepted candidate is moved to
    the largest absolute value of the filtered signal within +-75 ms.
    Peaks closer than 200 ms keep the larger one; peaks within 75 ms of
    either end of the trace are dropped.
    """
    x = filtered.samples
    fs = filtered.fs
    refractory = int(round(REFRACTORY_S * fs))
    energy = np.gradient(x) ** 2
    width = max(1, int(round(0.150 * fs)))
    integ = np.convolve(energy, np.ones(width) / width, mode="same")
    if not np.any(integ > 0):
        raise InsufficientBeats("no QRS energy in trace")
    cand, _ = ss.find_peaks(integ, distance=refractory)
    if len(cand) < 2:
        raise InsufficientBeats(f"only {len(cand)} candidate QRS complexes found")

    head = integ[: int(2 * fs)]
    spki = head.max() / 3.0
    npki = head.mean() / 2.0
    accepted: list[int] = []
    rr_hist: list[int] = []
    last_pos = 0
    for c in cand:
        thr1 = npki + 0.25 * (spki - npki)
        # search back over the gap when a beat looks missed
        if accepted and rr_hist:
            rr_avg = np.mean(rr_hist[-8:])
            if c - accepted[-1] > 1.66 * rr_avg:
                gap = cand[(cand > accepted[-1] + refractory) & (cand < c - refractory)]
                if len(gap):
                    best = gap[np.argmax(integ[gap])]
                    if integ[best] > 0.5 * thr1 and best > last_pos:
                        spki = 0.25 * integ[best] + 0.75 * spki
                        rr_hist.append(best - accepted[-1])
                        accepted.append(int(best))
        if integ[c] > thr1:
            spki = 0.125 * integ[c] + 0.875 * spki
            if accepted:
                rr_hist.append(c - accepted[-1])
            accepted.append(int(c))
        else:
            npki = 0.125 * integ[c] + 0.875 * npki
        last_pos = c

    half = int(round(0.075 * fs))
    peaks = []
    for c in accepted:
        lo, hi = max(0, c - half), min(len(x), c + half + 1)
        peaks.append(lo + int(np.argmax(np.abs(x[lo:hi]))))
    peaks = sorted(set(peaks))
    # filter transients make complexes whose refinement window is cut by the edge unreliable
    peaks = [p for p in peaks if half <= p < len(x) - half]
    kept: list[int] = []
    for p in peaks:
        if kept and p - kept[-1] < refractory:
            if abs(x[p]) > abs(x[kept[-1]]):
                kept[-1] = p
            continue
        kept.append(p)
    if len(kept) < 2:
        raise InsufficientBeats(f"only {len(kept)} R peaks detected")
    return np.asarray(kept, dtype=np.int64)


def t_window(r_k: int, r_next: int) -> tuple[int, int]:
    """Half-open sample range ``[r + 0.20 L, r + 0.65 L)`` of a beat."""
    length = r_next - r_k
    return r_k + -(-20 * length // 100), r_k + -(-65 * length // 100)


def _extrema(y: np.ndarray, lo: int, hi: int) -> list[int]:
    """Indices ``i`` in ``[lo, hi)`` that are local maxima or minima of ``y``.

    Plateaus count once, at their first sample.
    """
    out = []
    for i in range(max(lo, 1), min(hi, len(y) - 1)):
        left = y[i] - y[i - 1]
        j = i + 1
        while j < len(y) - 1 and y[j] == y[i]:
            j += 1
        right = y[j] - y[i]
        if (left > 0 and right < 0) or (left < 0 and right > 0):
            out.append(i)
    return out


def temporal_span(y: np.ndarray, idx: int, ref: float, lo: int, hi: int) -> int:
    """Length of the stretch around ``idx`` where no sample deviates from
    ``ref`` by more than ``y[idx]`` does, clipped to ``[lo, hi]``."""
    dev = np.abs(y[lo:hi + 1] - ref)
    a = dev[idx - lo]
    left = np.nonzero(dev[: idx - lo] > a)[0]
    right = np.nonzero(dev[idx - lo + 1:] > a)[0]
    left_bound = lo + (left[-1] if len(left) else 0)
    right_bound = idx + 1 + right[0] if len(right) else hi
    return int(right_bound - left_bound)


def detect_t_peak(smoothed: ECGTrace, r_k: int, r_next: int) -> int:
    """T peak of the beat ``[r_k, r_next)``: the local extremum in the
    20%-65% window with the largest temporal span; ties go to the earliest."""
    y = smoothed.samples
    lo, hi = t_window(r_k, r_next)
    cands = _extrema(y, lo, hi)
    if not cands:
        raise TPeakNotFound(f"no local extremum in window [{lo}, {hi}) of beat starting at {r_k}")
    ref = float(np.mean(y[lo:hi]))
    spans = [temporal_span(y, c, ref, r_k, min(r_next, len(y) - 1)) for c in cands]
    return cands[int(np.argmax(spans))]


def detect_end_of_systole(smoothed: ECGTrace, t_peak: int, r_k: int, r_next: int) -> tuple[int, bool]:
    """First post-T extremum or window-mean crossing, whichever comes first.

    Returns ``(index, degraded)``; ``degraded`` is set when neither event
    occurs before ``r_next`` and the point falls back to ``r_k + 0.65 L``.
    """
    y = smoothed.samples
    lo, hi = t_window(r_k, r_next)
    mean = float(np.mean(y[lo:hi]))
    end = min(r_next, len(y) - 1)
    above = y[t_peak] > mean
    for i in range(t_peak + 1, end):
        crossed = y[i] < mean if above else y[i] > mean
        if crossed:
            return i, False
        left, right = y[i] - y[i - 1], y[i + 1] - y[i]
        if (left > 0 > right) or (left < 0 < right):
            return i, False
    fallback = min(max(hi, t_peak + 1), r_next - 1)
    logger.info("no end-of-systole event after T peak %d; falling back to %d", t_peak, fallback)
    return fallback, True


def detect_peaks(trace: ECGTrace, lo: float = 3.0, hi: float = 45.0, cutoff: float = 10.0) -> PeakSet:
    """Full detection chain on a raw trace."""
    filtered = bandpass_zero_phase(trace, lo, hi)
    r_peaks = detect_r_peaks(filtered)
    smoothed = lowpass_zero_phase(filtered, cutoff)
    t_peaks, eos, beat_r, degraded = [], [], [], []
    for k in range(len(r_peaks) - 1):
        r_k, r_next = int(r_peaks[k]), int(r_peaks[k + 1])
        try:
            t = detect_t_peak(smoothed, r_k, r_next)
        except TPeakNotFound as exc:
            logger.warning("skipping beat %d: %s", k, exc)
            continue
        e, bad = detect_end_of_systole(smoothed, t, r_k, r_next)
        if bad:
            degraded.append(k)
        t_peaks.append(t)
        eos.append(e)
        beat_r.append(k)
    return PeakSet(r_peaks, t_peaks, eos, beat_r, degraded)


def build_phase_signal(peaks: PeakSet, n_samples: int, fs: float) -> PhaseSignal:
    """Binary phase signal: 0 on ``[r_k, eos_k)``, 1 on ``[eos_k, r_{k+1})``.

    A beat whose T peak was not found is labelled entirely diastolic after a
    fallback end-of-systole point at ``r_k + 0.65 L``.
    """
    r = peaks.r_peaks
    if len(r) < 2:
        raise InsufficientBeats("phase signal needs at least two R peaks")
    eos_of = {int(k): int(e) for k, e in zip(peaks.beat_r, peaks.eos_points)}
    values = np.zeros(n_samples, dtype=np.uint8)
    for k in range(len(r) - 1):
        r_k, r_next = int(r[k]), int(r[k + 1])
        e = eos_of.get(k, t_window(r_k, r_next)[1])
        values[e:r_next] = 1
    return PhaseSignal(values, fs, (int(r[0]), int(r[-1])))


def heart_rate(r_peaks, fs: float) -> float:
    """Mean of the instantaneous rates 60 / RR over all RR intervals, in bpm."""
    r = np.asarray(r_peaks, dtype=np.float64)
    if len(r) < 2:
        raise InsufficientBeats("heart rate needs at least two R peaks")
    rr = np.diff(r) / fs
    return float(np.mean(60.0 / rr))


def phase_from_trace(trace: ECGTrace, **kwargs) -> tuple[PeakSet, PhaseSignal]:
    peaks = detect_peaks(trace, **kwargs)
    return peaks, build_phase_signal(peaks, len(trace), trace.fs)

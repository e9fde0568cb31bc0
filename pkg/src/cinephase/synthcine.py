"""Synthetic ECG traces and cine sequences with known ground truth.

The ECG is a sum of Gaussian P/Q/R/S/T bumps per beat plus baseline wander
and white noise. The cine frames show dark spline vessels on a bright,
slightly textured background; the vessel control points contract toward a
centre during systole (raised cosine) and relax linearly during diastole, so
the cardiac phase is only visible through motion.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.ndimage import gaussian_filter

from .bundle import StudyBundle, save_bundle
from .ecg import ECGTrace, PhaseSignal
from .errors import CinePhaseError, ConfigError
from .labeling import frame_sample_bounds, map_phase_to_frames
from .vesselness import CenterlineAnnotation, rasterize_mask


@dataclass
class SynthConfig:
    heart_rate: float = 70.0
    rr: list | None = None
    rr_jitter: float = 0.02
    duration: float = 8.0
    ecg_fs: float = 400.0
    fps: float = 15.0
    size: int = 64
    collimation: int = 0
    n_vessels: int = 4
    vessel_radius: tuple = (1.0, 2.2)
    motion_amplitude: float = 5.0
    fade_in: int = 6
    fade_out: int | None = None
    washout: float = 1.5
    pan_velocity: tuple = (0.0, 0.0)
    ecg_snr_db: float = 25.0
    baseline_wander: float = 0.1
    t_fraction: tuple = (0.30, 0.40)
    t_width: float = 0.04
    t_amplitude: float = 0.3
    invert_t: bool = False
    image_noise: float = 0.02
    vessel_contrast: float = 0.35
    bit_depth: int = 8
    seed: int = 0

    @property
    def n_frames(self) -> int:
        return int(round(self.duration * self.fps))

    @property
    def n_samples(self) -> int:
        return int(round(self.n_frames * self.ecg_fs / self.fps))

    @property
    def fade_out_frame(self) -> int:
        return self.n_frames if self.fade_out is None else self.fade_out

    def validate(self) -> None:
        if self.heart_rate <= 0 or self.duration <= 0 or self.ecg_fs <= 0 or self.fps <= 0:
            raise ConfigError("heart_rate, duration, ecg_fs and fps must be positive")
        if self.rr is not None and any(r <= 0 for r in self.rr):
            raise ConfigError("RR intervals must be positive")
        if self.duration < 60.0 / self.heart_rate:
            raise ConfigError(f"duration {self.duration}s is shorter than one beat at {self.heart_rate} bpm")
        if not 0 <= self.fade_in < self.fade_out_frame <= self.n_frames:
            raise ConfigError(
                f"need 0 <= fade_in < fade_out <= n_frames, got {self.fade_in}, {self.fade_out_frame}, {self.n_frames}"
            )
        if self.size < 8 or self.collimation < 0 or self.n_vessels < 0:
            raise ConfigError("size must be >= 8, collimation and n_vessels >= 0")
        if self.bit_depth not in (8, 16):
            raise ConfigError("bit_depth must be 8 or 16")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["vessel_radius"] = list(self.vessel_radius)
        d["pan_velocity"] = list(self.pan_velocity)
        d["t_fraction"] = list(self.t_fraction)
        return d


@dataclass
class EcgTruth:
    r_times: np.ndarray
    """Every generated R time in seconds, including beats outside the trace."""
    t_times: np.ndarray
    eos_times: np.ndarray
    r_peaks: np.ndarray
    t_peaks: np.ndarray
    eos_points: np.ndarray
    phase: PhaseSignal


@dataclass
class CineTruth:
    labels: np.ndarray
    label_index: np.ndarray
    opacity: np.ndarray
    contrast_frames: tuple
    edf_frames: np.ndarray
    annotations: dict = field(default_factory=dict)
    masks: np.ndarray | None = None


def _rng(config: SynthConfig, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([config.seed, stream]))


EDGE_MARGIN_S = 0.1


def _beat_times(config: SynthConfig, rng) -> tuple[np.ndarray, np.ndarray]:
    """R times (s) covering the trace with one beat before and two after it.

    No R peak falls within ``EDGE_MARGIN_S`` of either end of the trace.
    """
    base = 60.0 / config.heart_rate
    span = config.n_samples / config.ecg_fs
    if config.rr is not None:
        rr = np.asarray(config.rr, dtype=np.float64)
        n_int = int(np.ceil((span + 2 * rr.max()) / rr.min())) + 2
        intervals = rr[np.arange(n_int) % len(rr)]
    else:
        n_int = int(np.ceil((span + 2 * base) / (0.85 * base))) + 2
        jitter = np.clip(rng.normal(0.0, config.rr_jitter, size=n_int), -0.15, 0.15)
        intervals = base * (1.0 + jitter)
    lo, hi = EDGE_MARGIN_S, max(EDGE_MARGIN_S, intervals[0] - EDGE_MARGIN_S)
    for _ in range(100):
        first = float(rng.uniform(lo, hi))
        times = first - intervals[0] + np.concatenate(([0.0], np.cumsum(intervals)))
        if not np.any(np.abs(times - span) < EDGE_MARGIN_S):
            break
    times = times[: int(np.searchsorted(times, span)) + 2]
    fractions = rng.uniform(config.t_fraction[0], config.t_fraction[1], size=len(times))
    return times, fractions


def gen_ecg(config: SynthConfig) -> tuple[ECGTrace, EcgTruth]:
    """Synthetic single-lead ECG and its exact beat landmarks.

    The end of systole of each beat is placed at the descending inflection
    point of its T wave (T centre + T width).
    """
    config.validate()
    rng = _rng(config, 1)
    fs = config.ecg_fs
    n = config.n_samples
    t = np.arange(n) / fs
    r_times, fractions = _beat_times(config, rng)
    rr = np.diff(r_times)
    r_times = r_times[:-1]
    t_times = r_times + fractions[:-1] * rr
    sign = -1.0 if config.invert_t else 1.0
    # P, Q, R, S, T: (offset from R in s or None for T, width s, amplitude mV)
    x = np.zeros(n)
    for k, r in enumerate(r_times):
        lo, hi = np.searchsorted(t, [r - 0.5, r + rr[k]])
        tt = t[lo:hi]
        amp = 1.0 + 0.05 * rng.normal()
        for c, w, a in (
            (r - 0.16, 0.025, 0.12),
            (r - 0.025, 0.008, -0.10),
            (r, 0.010, amp),
            (r + 0.03, 0.010, -0.20),
            (t_times[k], config.t_width, sign * config.t_amplitude),
        ):
            x[lo:hi] += a * np.exp(-0.5 * ((tt - c) / w) ** 2)
    power = np.mean((x - x.mean()) ** 2)
    noise_std = np.sqrt(power / 10 ** (config.ecg_snr_db / 10.0))
    wander_f = rng.uniform(0.15, 0.35)
    wander = config.baseline_wander * np.sin(2 * np.pi * wander_f * t + rng.uniform(0, 2 * np.pi))
    samples = x + wander + rng.normal(0.0, noise_std, size=n)

    eos_times = t_times + config.t_width
    inside = (r_times >= 0) & (r_times * fs <= n - 1)
    r_idx = np.round(r_times[inside] * fs).astype(np.int64)
    beat_ok = inside[:-1] & inside[1:]
    t_idx = np.round(t_times[:-1][beat_ok] * fs).astype(np.int64)
    e_idx = np.round(eos_times[:-1][beat_ok] * fs).astype(np.int64)
    values = np.zeros(n, dtype=np.uint8)
    for k in np.nonzero(beat_ok)[0]:
        e = int(round(eos_times[k] * fs))
        nxt = int(round(r_times[k + 1] * fs))
        values[e:nxt] = 1
    valid = (int(r_idx[0]), int(r_idx[-1])) if len(r_idx) else (0, 0)
    truth = EcgTruth(
        r_times=r_times,
        t_times=t_times,
        eos_times=eos_times,
        r_peaks=r_idx,
        t_peaks=t_idx,
        eos_points=e_idx,
        phase=PhaseSignal(values, fs, valid),
    )
    return ECGTrace(samples, fs), truth


def contraction(times: np.ndarray, truth: EcgTruth) -> np.ndarray:
    """Contraction level in [0, 1] at each time: raised-cosine rise over
    systole, linear fall over diastole."""
    r, e = truth.r_times, truth.eos_times
    k = np.clip(np.searchsorted(r, times, side="right") - 1, 0, len(r) - 2)
    s = np.empty_like(times, dtype=np.float64)
    sys = times < e[k]
    u = np.clip((times - r[k]) / (e[k] - r[k]), 0.0, 1.0)
    s[sys] = 0.5 * (1.0 - np.cos(np.pi * u[sys]))
    v = np.clip((times - e[k]) / (r[k + 1] - e[k]), 0.0, 1.0)
    s[~sys] = 1.0 - v[~sys]
    return s


def opacity_envelope(config: SynthConfig) -> np.ndarray:
    k = np.arange(config.n_frames, dtype=np.float64)
    op = np.ones_like(k)
    op[k < config.fade_in] = 0.0
    after = k >= config.fade_out_frame
    op[after] = np.exp(-(k[after] - config.fade_out_frame + 1) / config.washout)
    return op


def _random_vessel(rng, size: int, radius: tuple) -> tuple[np.ndarray, np.ndarray]:
    n = int(rng.integers(4, 8))
    margin = 0.15 * size
    start = rng.uniform(margin, size - margin, size=2)
    heading = rng.uniform(0, 2 * np.pi)
    step = size / 7.0
    pts = [start]
    for _ in range(n - 1):
        heading += rng.normal(0.0, 0.5)
        nxt = pts[-1] + step * np.array([np.cos(heading), np.sin(heading)])
        # steer back inside the field of view
        if np.any(nxt < margin) or np.any(nxt > size - margin):
            heading += np.pi / 2
            nxt = np.clip(nxt, margin, size - margin)
        pts.append(nxt)
    radii = rng.uniform(radius[0], radius[1], size=n)
    return np.asarray(pts), radii


def _centerline(ctrl: np.ndarray, radii: np.ndarray, spacing: float = 0.5) -> np.ndarray:
    chord = np.concatenate(([0.0], np.cumsum(np.linalg.norm(np.diff(ctrl, axis=0), axis=1))))
    keep = np.concatenate(([True], np.diff(chord) > 1e-6))
    ctrl, radii, chord = ctrl[keep], radii[keep], chord[keep]
    if len(ctrl) < 2:
        return np.column_stack([ctrl, radii])
    m = max(2, int(np.ceil(chord[-1] / spacing)) + 1)
    s = np.linspace(0.0, chord[-1], m)
    if len(ctrl) >= 3:
        xy = CubicSpline(chord, ctrl, bc_type="natural")(s)
    else:
        xy = np.column_stack([np.interp(s, chord, ctrl[:, 0]), np.interp(s, chord, ctrl[:, 1])])
    return np.column_stack([xy, np.interp(s, chord, radii)])


def gen_cine(config: SynthConfig, ecg_truth: EcgTruth, want_masks: bool = True):
    """Render the cine frames driven by the analytic phase of ``ecg_truth``.

    Returns ``(frames, truth)``. ``frames`` is (N, H, W) unsigned integers with
    an optional constant black collimation border; vessel coordinates in the
    truth refer to the full frame.
    """
    config.validate()
    if want_masks and config.n_vessels == 0:
        raise ConfigError("vessel masks requested but n_vessels is 0")
    rng = _rng(config, 2)
    n_frames = config.n_frames
    size = config.size
    border = config.collimation
    full = size + 2 * border
    times = (np.arange(n_frames) + 0.5) / config.fps
    level = contraction(times, ecg_truth)
    opacity = opacity_envelope(config)

    vessels = [_random_vessel(rng, size, config.vessel_radius) for _ in range(config.n_vessels)]
    centre = size / 2.0 + rng.normal(0.0, size * 0.05, size=2)
    reach = max((np.linalg.norm(c - centre, axis=1).max() for c, _ in vessels), default=1.0)
    twist = rng.choice([-1.0, 1.0]) * 0.3

    yy, xx = np.mgrid[0:size, 0:size] / size
    phase = rng.uniform(0, 2 * np.pi, size=2)
    background = 0.72 + 0.06 * np.sin(2 * np.pi * xx + phase[0]) * np.cos(2 * np.pi * yy + phase[1])
    pan = np.asarray(config.pan_velocity, dtype=np.float64)

    maxval = 2 ** config.bit_depth - 1
    frames = np.zeros((n_frames, full, full), dtype=np.uint8 if config.bit_depth == 8 else np.uint16)
    masks = np.zeros((n_frames, full, full), dtype=bool) if want_masks else None
    lines_per_frame = []
    for k in range(n_frames):
        amp = config.motion_amplitude * level[k]
        lines = []
        for ctrl, radii in vessels:
            d = centre - ctrl
            rot = np.column_stack([-d[:, 1], d[:, 0]])
            moved = ctrl + amp * (d + twist * rot) / reach + pan * k
            line = _centerline(moved, radii)
            line[:, :2] += border
            lines.append(line)
        lines_per_frame.append(lines)
        ann = CenterlineAnnotation(lines)
        geom = rasterize_mask(ann, full, full)
        soft = gaussian_filter(geom.astype(np.float64), 0.6)[border:border + size, border:border + size]
        img = background - config.vessel_contrast * opacity[k] * soft
        img = img + rng.normal(0.0, config.image_noise, size=img.shape)
        out = np.zeros((full, full))
        out[border:border + size, border:border + size] = np.clip(img, 0.0, 1.0)
        frames[k] = np.round(out * maxval).astype(frames.dtype)
        if want_masks and opacity[k] >= 0.5:
            masks[k] = geom

    track = map_phase_to_frames(ecg_truth.phase, n_frames, config.fps)
    edf = analytic_edf_frames(ecg_truth, config.n_samples, n_frames)
    annotations = {}
    fo = config.fade_out_frame
    first = config.fade_in + int(rng.integers(0, max(1, fo - config.fade_in - 5)))
    for k in range(first, min(first + 5, fo)):
        annotations[k] = CenterlineAnnotation(lines_per_frame[k])
    if config.fade_in > 0:
        annotations[int(rng.integers(0, config.fade_in))] = CenterlineAnnotation([])
    truth = CineTruth(
        labels=track.labels,
        label_index=track.frame_index,
        opacity=opacity,
        contrast_frames=(config.fade_in, fo - 1),
        edf_frames=edf,
        annotations=annotations,
        masks=masks,
    )
    return frames, truth


def analytic_edf_frames(ecg_truth: EcgTruth, n_samples: int, n_frames: int) -> np.ndarray:
    """End-diastolic frames implied by the beat landmarks.

    For every R peak, the frame immediately before the one containing it is an
    EDF when it lies wholly in diastole and inside the labelled range.
    """
    bounds = frame_sample_bounds(n_samples, n_frames)
    v0, v1 = ecg_truth.phase.valid_range
    eos = ecg_truth.eos_points
    r = ecg_truth.r_peaks
    out = []
    for j in range(1, len(r)):
        rk = int(r[j])
        prev_eos = int(eos[j - 1]) if j - 1 < len(eos) else None
        # frame i fully diastolic: prev_eos <= start_i and end_i <= r_k
        i = int(np.searchsorted(bounds, rk, side="right")) - 2
        if i < 0 or bounds[i] < v0 or bounds[i + 1] > v1:
            continue
        if prev_eos is None or bounds[i] < prev_eos:
            continue
        if i + 1 >= n_frames or bounds[i + 2] > v1:
            continue
        out.append(i)
    return np.asarray(out, dtype=np.int64)


def synth_sequence(config: SynthConfig, want_masks: bool = True):
    trace, ecg_truth = gen_ecg(config)
    frames, cine_truth = gen_cine(config, ecg_truth, want_masks=want_masks)
    return trace, ecg_truth, frames, cine_truth


def sample_config(base: SynthConfig, seed: int, index: int, hr_range=(50.0, 110.0), fps_choices=(10.0, 15.0, 30.0),
                  duration_range=(7.0, 10.0), amplitude_range=(4.0, 7.0)) -> SynthConfig:
    """Draw one sequence's configuration; deterministic per ``(seed, index)``."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, index, 7]))
    fps = float(rng.choice(fps_choices))
    duration = float(rng.uniform(*duration_range))
    n_frames = int(round(duration * fps))
    fade_in = int(round(rng.uniform(0.3, 0.8) * fps))
    fade_out = n_frames - int(round(rng.uniform(0.3, 0.8) * fps))
    return replace(
        base,
        heart_rate=float(rng.uniform(*hr_range)),
        fps=fps,
        duration=duration,
        fade_in=fade_in,
        fade_out=fade_out,
        washout=max(1.0, 0.15 * fps),
        motion_amplitude=float(rng.uniform(*amplitude_range)),
        seed=int(rng.integers(0, 2 ** 31 - 1)),
    )


def truth_dict(config: SynthConfig, ecg_truth: EcgTruth, truth: CineTruth) -> dict:
    """JSON-ready ground truth for a bundle sidecar."""
    return {
        "config": config.to_dict(),
        "heart_rate": float(60.0 / np.mean(np.diff(ecg_truth.r_times))),
        "r_peaks": ecg_truth.r_peaks.tolist(),
        "t_peaks": ecg_truth.t_peaks.tolist(),
        "eos_points": ecg_truth.eos_points.tolist(),
        "labels": [float(v) for v in truth.labels],
        "label_index": truth.label_index.tolist(),
        "edf_frames": truth.edf_frames.tolist(),
        "contrast_frames": [int(v) for v in truth.contrast_frames],
        "opacity": [float(v) for v in truth.opacity],
    }


def synth_bundle(config: SynthConfig, sequence_id: str = ""):
    """One synthetic :class:`StudyBundle` with ECG, annotations and truth."""
    trace, ecg_truth, frames, truth = synth_sequence(config, want_masks=False)
    meta = {"fps": float(config.fps), "width": frames.shape[2], "height": frames.shape[1],
            "n_frames": frames.shape[0], "bit_depth": config.bit_depth,
            "sequence_id": sequence_id, "patient_id": f"synthetic-{config.seed}"}
    return StudyBundle(meta, frames, trace, dict(truth.annotations), truth_dict(config, ecg_truth, truth))


def gen_dataset(n: int, out_dir, seed: int = 0, base: SynthConfig | None = None, hr_range=(40.0, 120.0),
                fps_choices=(10.0, 15.0, 30.0), start: int = 0) -> list[Path]:
    """Write ``n`` bundles ``seq_<index>`` under ``out_dir``; deterministic per ``(seed, index)``."""
    base = base or SynthConfig()
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CinePhaseError(f"{out}: cannot create output directory ({exc.strerror})") from exc
    paths = []
    for i in range(start, start + n):
        cfg = sample_config(base, seed, i, hr_range=hr_range, fps_choices=fps_choices)
        path = out / f"seq_{i:04d}"
        try:
            save_bundle(synth_bundle(cfg, f"seq_{i:04d}"), path)
        except OSError as exc:
            raise CinePhaseError(f"{path}: write failed ({exc.strerror})") from exc
        paths.append(path)
    return paths

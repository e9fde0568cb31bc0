"""End-to-end chains over study bundles: labelling, training sets, prediction, evaluation."""

from __future__ import annotations

import hashlib
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import ecg
from .bundle import StudyBundle
from .config import RunConfig
from .errors import CinePhaseError, InclusionRejected, InsufficientBeats, SequenceTooShort
from .labeling import (
    FrameLabelTrack,
    WindowDataset,
    make_training_windows,
    map_phase_to_frames,
    resample_indices,
    resample_to_10fps,
)
from .metrics import EvalPair, MetricReport, evaluate
from .nn import ParamStore
from .phasenet import (
    PhaseModel,
    PhaseNet,
    PredictionTrace,
    aggregate,
    collect_candidates,
    edf_flags,
    schmitt_filter,
    upsample_probs,
    window_predictions,
)
from .preprocess import preprocess_frames, resize_mask
from .vesselness import VesselModel, rasterize_mask, select_frame_interval

logger = logging.getLogger(__name__)


class StageError(CinePhaseError):
    """Wraps a stage failure with the stage name and bundle id; keeps the cause's category."""

    def __init__(self, stage: str, bundle_id: str, cause: Exception):
        super().__init__(f"[{bundle_id or '?'}] {stage}: {cause}")
        self.stage = stage
        self.bundle_id = bundle_id
        self.cause = cause
        self.category = getattr(cause, "category", "error")


def run_stage(stage: str, bundle_id: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except CinePhaseError as exc:
        raise StageError(stage, bundle_id, exc) from exc


def params_digest(params: ParamStore) -> str:
    h = hashlib.sha256()
    for name in params:
        v = np.ascontiguousarray(params.values[name])
        h.update(name.encode())
        h.update(str(v.dtype).encode())
        h.update(v.tobytes())
    return h.hexdigest()[:16]


# -- inclusion ----------------------------------------------------------------

@dataclass(frozen=True)
class Inclusion:
    accepted: bool
    reason: str = ""


def inclusion_filter(bundle: StudyBundle, interval, r_peak_count: int | None, mode: str = "train",
                     min_frames: int = 20, min_visible: int = 15) -> Inclusion:
    """Frame count above ``min_frames`` and more than ``min_visible`` frames in
    the vesselness interval; in ``train``/``evaluate`` mode also an ECG with at
    least two R peaks."""
    if bundle.n_frames <= min_frames:
        return Inclusion(False, "frame count")
    visible = 0 if interval is None else interval[1] - interval[0] + 1
    if visible <= min_visible:
        return Inclusion(False, "visible frames")
    if mode in ("train", "evaluate"):
        if bundle.ecg is None:
            return Inclusion(False, "ECG missing")
        if r_peak_count is None or r_peak_count < 2:
            return Inclusion(False, "R peaks")
    return Inclusion(True)


# -- labels ---------------------------------------------------------------------

def ecg_labels(bundle: StudyBundle) -> tuple[ecg.PeakSet, FrameLabelTrack]:
    """ECG-derived peaks and fractional frame labels of a bundle."""
    if bundle.ecg is None:
        raise InsufficientBeats("bundle has no ECG")
    peaks, phase = ecg.phase_from_trace(bundle.ecg)
    return peaks, map_phase_to_frames(phase, bundle.n_frames, bundle.fps)


def count_r_peaks(bundle: StudyBundle) -> int:
    if bundle.ecg is None:
        return 0
    try:
        return len(ecg.detect_r_peaks(ecg.bandpass_zero_phase(bundle.ecg)))
    except InsufficientBeats:
        return 0


# -- vesselness -----------------------------------------------------------------

def vessel_pairs(bundle: StudyBundle, resolution: int, eps: float) -> list:
    """``(frame, mask)`` training pairs at ``resolution`` from the bundle's annotations."""
    if not bundle.annotations:
        return []
    x, (top, bottom, left, right) = preprocess_frames(bundle.frames, resolution, eps)
    h, w = bundle.frames.shape[1:]
    pairs = []
    for k in sorted(bundle.annotations):
        full = rasterize_mask(bundle.annotations[k], w, h)
        pairs.append((x[k], resize_mask(full[top:bottom, left:right], resolution)))
    return pairs


def vessel_interval(bundle: StudyBundle, model: VesselModel, eps: float) -> tuple[tuple[int, int], np.ndarray]:
    x, _ = preprocess_frames(bundle.frames, model.config.resolution, eps)
    scores = model.scores(x)
    return select_frame_interval(scores), scores


# -- phase training set -----------------------------------------------------------

def training_windows(bundle: StudyBundle, vessel_model: VesselModel | None, config: RunConfig):
    """Window dataset of one bundle, or an :class:`Inclusion` rejection.

    The frame interval comes from the vesselness model; without one every
    frame is used.
    """
    bid = bundle.id
    if vessel_model is not None:
        interval, _ = run_stage("vesselness", bid, vessel_interval, bundle, vessel_model, config.collimation_eps)
    else:
        interval = (0, bundle.n_frames - 1)
    verdict = inclusion_filter(bundle, interval, count_r_peaks(bundle), "train", config.min_frames, config.min_visible)
    if not verdict.accepted:
        return verdict
    _, track = run_stage("ecg", bid, ecg_labels, bundle)
    x, _ = run_stage("preprocess", bid, preprocess_frames, bundle.frames, config.resolution, config.collimation_eps)
    track = run_stage("label", bid, track.restrict, *interval)
    frames10, track10 = run_stage("resample", bid, resample_to_10fps, track, x[track.frame_index])
    return make_training_windows(frames10, track10)


# -- prediction -------------------------------------------------------------------

def predict_bundle(bundle: StudyBundle, vessel_model: VesselModel, phase_model: PhaseModel,
                   config: RunConfig) -> PredictionTrace:
    """Full online chain for one bundle.

    preprocess, vesselness interval, 10 fps resampling, sliding-window
    classification with feature caching, fusion, upsampling to the original
    frame rate, Schmitt trigger and EDF flags.
    """
    bid = bundle.id
    timings = {}
    t_start = time.perf_counter()

    t0 = time.perf_counter()
    interval, _ = run_stage("vesselness", bid, vessel_interval, bundle, vessel_model, config.collimation_eps)
    timings["vesselness"] = time.perf_counter() - t0
    a, b = interval

    t0 = time.perf_counter()
    x, _ = run_stage("preprocess", bid, preprocess_frames, bundle.frames, phase_model.config.resolution,
                     config.collimation_eps)
    pos = run_stage("resample", bid, resample_indices, b - a + 1, bundle.fps)
    if len(pos) < 10:
        raise StageError("resample", bid, SequenceTooShort(
            f"{len(pos)} frames at 10 fps in interval [{a}, {b}]; at least 10 are needed"))
    verdict = inclusion_filter(bundle, interval, None, "predict", config.min_frames, config.min_visible)
    if not verdict.accepted:
        raise StageError("inclusion", bid, InclusionRejected(verdict.reason))
    resampled = a + pos
    frames10 = x[resampled]
    timings["preprocess"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    # a private net per call keeps the spatial-call counter exact under threads
    net = PhaseNet(phase_model.config)
    probs = run_stage("phasenet", bid, window_predictions, net, phase_model.params, frames10)
    timings["phasenet"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    candidates = collect_candidates(probs, len(frames10))
    selected = aggregate(candidates)
    have = [i for i, s in enumerate(selected) if s is not None]
    target = np.arange(a, b + 1)
    up = run_stage("upsample", bid, upsample_probs, resampled[have], [selected[i] for i in have], target)
    labels = run_stage("schmitt", bid, schmitt_filter, up, config.schmitt_hi, config.schmitt_lo)
    edf = edf_flags(labels)
    timings["postprocess"] = time.perf_counter() - t0
    timings["total"] = time.perf_counter() - t_start

    return PredictionTrace(
        sequence_id=bid,
        interval=(int(a), int(b)),
        resampled_index=[int(v) for v in resampled],
        candidates=candidates,
        selected=selected,
        frame_index=[int(v) for v in target],
        probabilities=[float(v) for v in up],
        labels=[int(v) for v in labels],
        edf=[bool(v) for v in edf],
        spatial_calls=net.spatial_calls,
        timings=timings,
        weights_hash=params_digest(phase_model.params),
    )


def parallel_map(fn, items, threads: int = 1) -> list:
    """``[fn(x) for x in items]``, optionally on a thread pool; order is preserved."""
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


# -- evaluation -------------------------------------------------------------------

def ground_truth(bundle: StudyBundle, source: str = "ecg") -> tuple[np.ndarray, np.ndarray, float | None]:
    """``(frame_index, labels, bpm)`` from the ECG detectors or the synthetic truth sidecar."""
    if source == "synthetic":
        if bundle.truth is None:
            raise InsufficientBeats(f"bundle {bundle.id} has no truth sidecar")
        t = bundle.truth
        return np.asarray(t["label_index"]), np.asarray(t["labels"], dtype=np.float64), t.get("heart_rate")
    peaks, track = ecg_labels(bundle)
    return track.frame_index, track.labels, ecg.heart_rate(peaks.r_peaks, bundle.ecg.fs)


def eval_pair(trace: PredictionTrace, bundle: StudyBundle, source: str = "ecg") -> tuple[EvalPair, float | None]:
    """Align a trace with ground truth on the frames both cover."""
    gidx, glab, bpm = ground_truth(bundle, source)
    gt = dict(zip(gidx.tolist(), glab.tolist()))
    frames = [f for f in trace.frame_index if f in gt]
    if not frames:
        return EvalPair(np.zeros(0), np.zeros(0, int), name=trace.sequence_id), bpm
    pred = dict(zip(trace.frame_index, trace.labels))
    # both label runs must be contiguous for EDF and neighbourhood rules
    run = [frames[0]]
    for f in frames[1:]:
        if f != run[-1] + 1:
            break
        run.append(f)
    return EvalPair(np.array([gt[f] for f in run]), np.array([pred[f] for f in run]), name=trace.sequence_id), bpm


def evaluate_traces(traces, bundles, source: str = "ecg") -> MetricReport:
    pairs, bpms = [], []
    for tr, bd in zip(traces, bundles):
        pair, bpm = run_stage("evaluate", bd.id, eval_pair, tr, bd, source)
        pairs.append(pair)
        bpms.append(bpm)
    have_bpm = all(b is not None for b in bpms)
    return evaluate(pairs, bpms if have_bpm else None)


def training_sets(bundles, vessel_model, config: RunConfig) -> tuple[list[WindowDataset], list[tuple[str, str]]]:
    """Window datasets of all accepted bundles plus ``(bundle id, reason)`` rejections."""
    out, rejected = [], []
    for bd in bundles:
        r = training_windows(bd, vessel_model, config)
        if isinstance(r, Inclusion):
            rejected.append((bd.id, r.reason))
            logger.info("bundle %s rejected: %s", bd.id, r.reason)
        else:
            out.append(r)
    return out, rejected

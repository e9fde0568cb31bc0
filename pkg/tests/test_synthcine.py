import numpy as np
import pytest

from cinephase.errors import ConfigError
from cinephase.synthcine import (
    EDGE_MARGIN_S,
    SynthConfig,
    gen_dataset,
    gen_ecg,
    opacity_envelope,
    sample_config,
    synth_sequence,
)
from cinephase.bundle import load_bundle
from cinephase.ecg import detect_r_peaks, bandpass_zero_phase, heart_rate
from cinephase.vesselness import rasterize_mask


def test_ecg_is_deterministic_per_seed():
    a, _ = gen_ecg(SynthConfig(seed=3))
    b, _ = gen_ecg(SynthConfig(seed=3))
    c, _ = gen_ecg(SynthConfig(seed=4))
    assert a.samples.tobytes() == b.samples.tobytes()
    assert not np.array_equal(a.samples, c.samples)


@pytest.mark.parametrize("hr", [40.0, 75.0, 120.0])
def test_r_peaks_keep_clear_of_trace_edges(hr):
    for seed in range(10):
        cfg = SynthConfig(heart_rate=hr, duration=5.0, seed=seed)
        trace, truth = gen_ecg(cfg)
        margin = EDGE_MARGIN_S * cfg.ecg_fs
        assert truth.r_peaks.min() >= margin - 1
        assert truth.r_peaks.max() <= len(trace) - margin + 1
        n_expect = len(trace) / cfg.ecg_fs * hr / 60.0
        assert abs(len(truth.r_peaks) - n_expect) <= 2


def test_explicit_rr_sequence():
    cfg = SynthConfig(rr=[0.8, 1.0], duration=6.0, rr_jitter=0.0)
    _, truth = gen_ecg(cfg)
    d = np.diff(truth.r_times)
    assert set(np.round(d, 9)) == {0.8, 1.0}
    assert np.all(np.abs(np.diff(d)) > 0.1)


def test_truth_beat_ordering():
    _, truth = gen_ecg(SynthConfig(heart_rate=95.0, duration=8.0, seed=2))
    r = truth.r_peaks
    for k in range(len(r) - 1):
        assert r[k] < truth.t_peaks[k] < truth.eos_points[k] < r[k + 1]
    v = truth.phase.values
    assert v[r[0]] == 0 and v[truth.eos_points[0]] == 1


def test_config_validation():
    with pytest.raises(ConfigError):
        SynthConfig(heart_rate=-1).validate()
    with pytest.raises(ConfigError):
        SynthConfig(fade_in=500).validate()
    with pytest.raises(ConfigError):
        SynthConfig(bit_depth=12).validate()


def test_opacity_envelope():
    cfg = SynthConfig(fps=10.0, duration=3.0, fade_in=5, fade_out=20, washout=2.0)
    op = opacity_envelope(cfg)
    assert np.all(op[:5] == 0) and np.all(op[5:20] == 1)
    assert op[20] == pytest.approx(np.exp(-0.5))
    assert np.all(np.diff(op[20:]) < 0)


def _brute_edf(labels, index):
    return [int(index[i]) for i in range(len(labels) - 1)
            if labels[i] == 1.0 and 0.0 <= labels[i + 1] < 1.0 and index[i + 1] == index[i] + 1]


@pytest.mark.parametrize("index", range(4))
def test_sequence_truth_is_consistent(index):
    cfg = sample_config(SynthConfig(), seed=1, index=index)
    trace, ecg_truth, frames, truth = synth_sequence(cfg)
    assert frames.shape == (cfg.n_frames, cfg.size, cfg.size)
    assert frames.dtype == np.uint8
    assert len(trace) == cfg.n_samples
    assert truth.edf_frames.tolist() == _brute_edf(truth.labels, truth.label_index)
    assert np.all((truth.labels >= 0) & (truth.labels <= 1))
    for k, ann in truth.annotations.items():
        mask = rasterize_mask(ann, cfg.size, cfg.size)
        if truth.opacity[k] < 0.5:
            assert not mask.any() and not truth.masks[k].any()
        else:
            assert np.array_equal(mask, truth.masks[k])
    # exactly one blank and five contrast-filled annotations
    blank = [k for k, a in truth.annotations.items() if not a.vessels]
    assert len(blank) == 1 and blank[0] < cfg.fade_in
    assert len(truth.annotations) == 6


def test_sequences_are_reproducible():
    cfg = sample_config(SynthConfig(size=32), seed=9, index=2)
    _, _, a, ta = synth_sequence(cfg)
    _, _, b, tb = synth_sequence(cfg)
    assert a.tobytes() == b.tobytes()
    assert np.array_equal(ta.labels, tb.labels)


def test_collimation_border_is_black():
    cfg = SynthConfig(size=32, collimation=6, duration=3.0, fps=10.0, fade_in=3)
    _, _, frames, truth = synth_sequence(cfg)
    assert frames.shape[1:] == (44, 44)
    assert np.all(frames[:, :6] == 0) and np.all(frames[:, :, -6:] == 0)
    assert frames[:, 6:-6, 6:-6].min() > 0


def test_sample_config_is_keyed_by_seed_and_index():
    base = SynthConfig()
    assert sample_config(base, 0, 5) == sample_config(base, 0, 5)
    assert sample_config(base, 0, 5) != sample_config(base, 0, 6)
    for i in range(20):
        cfg = sample_config(base, 3, i)
        cfg.validate()
        assert cfg.fps in (10.0, 15.0, 30.0)


def test_sixteen_bit_frames():
    cfg = SynthConfig(size=16, duration=2.0, fps=10.0, fade_in=2, bit_depth=16)
    _, _, frames, _ = synth_sequence(cfg, want_masks=False)
    assert frames.dtype == np.uint16 and frames.max() > 255


def test_gen_dataset_is_deterministic_and_indexed(tmp_path):
    a = gen_dataset(2, tmp_path / "a", seed=4, base=SynthConfig(size=16))
    b = gen_dataset(1, tmp_path / "b", seed=4, base=SynthConfig(size=16), start=1)
    assert [p.name for p in a] == ["seq_0000", "seq_0001"] and b[0].name == "seq_0001"
    for f in ("meta.json", "frames.raw", "ecg.json", "truth.json", "annotations.json"):
        assert (a[1] / f).read_bytes() == (b[0] / f).read_bytes()
    assert (a[0] / "frames.raw").read_bytes() != (a[1] / "frames.raw").read_bytes()


def test_heart_rate_is_recoverable_from_the_ecg(tmp_path):
    for path in gen_dataset(6, tmp_path, seed=11, base=SynthConfig(size=16)):
        bd = load_bundle(path)
        peaks = detect_r_peaks(bandpass_zero_phase(bd.ecg))
        assert abs(heart_rate(peaks, bd.ecg.fs) - bd.truth["heart_rate"]) <= 2.0
        assert 40.0 <= bd.truth["config"]["heart_rate"] <= 120.0


def test_masks_need_vessels():
    with pytest.raises(ConfigError):
        synth_sequence(SynthConfig(n_vessels=0, duration=2.0, size=16), want_masks=True)

import json
import warnings

import numpy as np
import pytest

from cinephase.bundle import StudyBundle, load_bundle, save_bundle
from cinephase.ecg import ECGTrace
from cinephase.errors import FormatError
from cinephase.synthcine import SynthConfig, synth_bundle
from cinephase.vesselness import CenterlineAnnotation


def _files(root):
    return {p.name: p.read_bytes() for p in sorted(root.iterdir())}


def _minimal():
    frames = np.arange(32, dtype=np.uint8).reshape(2, 4, 4)
    return StudyBundle({"fps": 15.0, "sequence_id": "m"}, frames)


def test_minimal_bundle_round_trips_byte_identically(tmp_path):
    save_bundle(_minimal(), tmp_path / "a")
    b = load_bundle(tmp_path / "a")
    save_bundle(b, tmp_path / "b")
    assert _files(tmp_path / "a") == _files(tmp_path / "b")
    assert np.array_equal(b.frames, _minimal().frames)
    assert len((tmp_path / "a" / "frames.raw").read_bytes()) == 32


def test_full_bundle_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    frames = rng.integers(0, 65535, (3, 5, 6)).astype(np.uint16)
    ecg = ECGTrace(rng.normal(size=50), 400.0)
    ann = {1: CenterlineAnnotation([[[1.5, 2.0, 1.0], [2.25, 3.0, 0.5]]])}
    bd = StudyBundle({"fps": 30, "primary_angle": -20.5, "secondary_angle": 15}, frames, ecg, ann, {"x": [1, 2]})
    save_bundle(bd, tmp_path / "a")
    back = load_bundle(tmp_path / "a")
    assert back.frames.dtype == np.uint16 and np.array_equal(back.frames, frames)
    assert np.array_equal(back.ecg.samples, ecg.samples) and back.ecg.fs == 400.0
    assert np.array_equal(back.annotations[1].vessels[0], ann[1].vessels[0])
    assert back.truth == {"x": [1, 2]}
    save_bundle(back, tmp_path / "b")
    assert _files(tmp_path / "a") == _files(tmp_path / "b")
    # frames are stored little-endian regardless of the host
    raw = (tmp_path / "a" / "frames.raw").read_bytes()
    assert raw[:2] == int(frames[0, 0, 0]).to_bytes(2, "little")


def test_short_blob_names_sizes(tmp_path):
    save_bundle(_minimal(), tmp_path / "a")
    raw = tmp_path / "a" / "frames.raw"
    raw.write_bytes(raw.read_bytes()[:-1])
    with pytest.raises(FormatError, match="expected 32 bytes.*got 31"):
        load_bundle(tmp_path / "a")


@pytest.mark.parametrize(
    "patch, where",
    [
        ({"fps": "fast"}, "meta.fps"),
        ({"fps": 0}, "meta.fps"),
        ({"bit_depth": 12}, "meta.bit_depth"),
        ({"width": None}, "meta.width"),
        ({"primary_angle": "left"}, "meta.primary_angle"),
    ],
)
def test_schema_errors_name_the_field(tmp_path, patch, where):
    save_bundle(_minimal(), tmp_path / "a")
    meta = json.loads((tmp_path / "a" / "meta.json").read_text())
    meta.update(patch)
    (tmp_path / "a" / "meta.json").write_text(json.dumps(meta))
    with pytest.raises(FormatError, match=where):
        load_bundle(tmp_path / "a")


def test_missing_manifest(tmp_path):
    with pytest.raises(FormatError, match="meta.json"):
        load_bundle(tmp_path)


def test_bad_annotation_index(tmp_path):
    save_bundle(_minimal(), tmp_path / "a")
    (tmp_path / "a" / "annotations.json").write_text(json.dumps({"7": {"vessels": []}}))
    with pytest.raises(FormatError, match="annotations.7"):
        load_bundle(tmp_path / "a")


def test_synthetic_bundle_loads_cleanly(tmp_path):
    cfg = SynthConfig(duration=3.0, fps=10.0, fade_in=3)
    bd = synth_bundle(cfg, "s0")
    save_bundle(bd, tmp_path / "s0")
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        back = load_bundle(tmp_path / "s0")
    assert back.id == "s0" and back.n_frames == 30 and back.ecg is not None
    assert back.truth["edf_frames"] == bd.truth["edf_frames"]
    assert set(back.annotations) == set(bd.annotations)

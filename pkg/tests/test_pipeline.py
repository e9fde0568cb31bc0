import json

import pytest

from cinephase import cli
from cinephase.bundle import StudyBundle, load_bundle, save_bundle
from cinephase.config import RunConfig
from cinephase.errors import ConfigError, SequenceTooShort
from cinephase.metrics import edf_frames
from cinephase.phasenet import PredictionTrace, train_phasenet
from cinephase.pipeline import (
    StageError,
    eval_pair,
    evaluate_traces,
    ground_truth,
    inclusion_filter,
    parallel_map,
    predict_bundle,
    training_sets,
    vessel_pairs,
)
from cinephase.synthcine import SynthConfig, gen_dataset, synth_bundle
from cinephase.vesselness import train_vesselness

SMALL = {"resolution": 16, "vessel_resolution": 16, "phase": {"epochs": 2}, "vessel": {"epochs": 2}}


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    paths = gen_dataset(3, root / "bundles", seed=5)
    bundles = [load_bundle(p) for p in paths]
    cfg = RunConfig.from_dict(dict(SMALL))
    vcfg = cfg.vessel_config()
    pairs = [pr for b in bundles for pr in vessel_pairs(b, vcfg.resolution, cfg.collimation_eps)]
    vmodel = train_vesselness(pairs, vcfg)
    sets, rejected = training_sets(bundles, vmodel, cfg)
    pmodel = train_phasenet(sets, cfg.phase_config())
    vmodel.save(root / "v.json")
    pmodel.save(root / "p.json")
    return root, bundles, cfg, vmodel, pmodel


def _bundle(n_frames, ecg=True):
    cfg = SynthConfig(duration=n_frames / 15.0, fps=15.0, size=16, fade_in=0, heart_rate=120.0)
    b = synth_bundle(cfg, "x")
    return StudyBundle(b.meta, b.frames, b.ecg if ecg else None)


def test_inclusion_examples():
    b = _bundle(21)
    assert inclusion_filter(b, (0, 15), 2, "train").accepted
    assert inclusion_filter(b, (0, 14), 2, "train").reason == "visible frames"
    assert inclusion_filter(b, (0, 15), 1, "train").reason == "R peaks"
    assert inclusion_filter(_bundle(20), (0, 19), 5, "train").reason == "frame count"
    no_ecg = _bundle(30, ecg=False)
    assert inclusion_filter(no_ecg, (0, 29), 0, "train").reason == "ECG missing"
    assert inclusion_filter(no_ecg, (0, 29), None, "predict").accepted


def test_predict_trace_is_consistent(trained):
    _, bundles, cfg, vmodel, pmodel = trained
    tr = predict_bundle(bundles[0], vmodel, pmodel, cfg)
    a, b = tr.interval
    assert tr.frame_index == list(range(a, b + 1))
    assert len(tr.labels) == len(tr.probabilities) == len(tr.edf) == b - a + 1
    assert set(tr.labels) <= {0, 1}
    assert tr.spatial_calls == len(tr.resampled_index)
    assert [i for i, f in enumerate(tr.edf) if f] == edf_frames(tr.labels)
    assert all(0.0 <= p <= 1.0 for p in tr.probabilities)
    assert {"vesselness", "preprocess", "phasenet", "postprocess", "total"} <= set(tr.timings)


def test_parallel_matches_serial(trained):
    _, bundles, cfg, vmodel, pmodel = trained
    run = lambda b: predict_bundle(b, vmodel, pmodel, cfg).to_dict(include_timings=False)
    assert parallel_map(run, bundles, 3) == [run(b) for b in bundles]


def test_short_sequence_is_rejected(trained):
    _, _, cfg, vmodel, pmodel = trained
    with pytest.raises(StageError) as info:
        predict_bundle(_bundle(12), vmodel, pmodel, cfg)
    assert isinstance(info.value.cause, SequenceTooShort)
    assert info.value.category == "sequence_too_short"


def _perfect(bundle, source):
    idx, lab, _ = ground_truth(bundle, source)
    labels = [int(v == 1.0) for v in lab]
    edf = [False] * len(labels)
    for i in edf_frames(labels):
        edf[i] = True
    return PredictionTrace(bundle.id, (int(idx[0]), int(idx[-1])), [], [], [], [int(v) for v in idx],
                           [float(v) for v in labels], labels, edf)


@pytest.mark.parametrize("source", ["ecg", "synthetic"])
def test_perfect_traces_score_one(trained, source):
    _, bundles, _, _, _ = trained
    report = evaluate_traces([_perfect(b, source) for b in bundles], bundles, source)
    assert report.per_angiography["accuracy"] == 1.0
    assert report.per_frame["accuracy"] == 1.0
    assert report.edf["f1"] == 1.0 and report.edf["n_gt"] > 0
    assert sum(r["count"] for r in report.heart_rate) == len(bundles)


def test_eval_pair_uses_contiguous_overlap(trained):
    _, bundles, _, _, _ = trained
    tr = _perfect(bundles[0], "synthetic")
    pair, bpm = eval_pair(tr, bundles[0], "synthetic")
    assert len(pair.gt) == len(tr.frame_index) and bpm > 0


def test_run_config_validation(tmp_path):
    with pytest.raises(ConfigError, match="unknown"):
        RunConfig.from_dict({"resolutoin": 16})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"schmitt_lo": 0.7, "schmitt_hi": 0.6})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"phase": {"not_a_field": 1}})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"threads": 0})
    cfg = RunConfig.from_dict(dict(SMALL))
    cfg.save(tmp_path / "c.json")
    assert RunConfig.load(tmp_path / "c.json") == cfg


# -- command line -------------------------------------------------------------------


def _run(capsys, *argv):
    rc = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return rc, out, err


def test_cli_predict_and_evaluate(trained, tmp_path, capsys):
    root, _, _, _, _ = trained
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(SMALL))
    common = ["--config", cfg_path, "--vessel-weights", root / "v.json"]
    rc, out, err = _run(capsys, "predict", root / "bundles", *common, "--weights", root / "p.json",
                        "--out", tmp_path / "traces")
    assert rc == 0, err
    assert len(json.loads(out)["traces"]) == 3
    rc, out, err = _run(capsys, "evaluate", root / "bundles", "--traces", tmp_path / "traces",
                        "--out", tmp_path / "rep")
    assert rc == 0, err
    metrics = json.loads((tmp_path / "rep" / "metrics.json").read_text())
    assert metrics["n_sequences"] == 3
    assert (tmp_path / "rep" / "metrics.csv").read_text().startswith("section,metric,value")
    rc, out, _ = _run(capsys, "report", tmp_path / "rep" / "metrics.json")
    assert rc == 0 and "EDF" in out


def test_cli_short_sequence_fails_with_json(trained, tmp_path, capsys):
    root, _, _, _, _ = trained
    save_bundle(_bundle(12), tmp_path / "short")
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(SMALL))
    rc, _, err = _run(capsys, "predict", tmp_path / "short", "--config", cfg_path,
                      "--vessel-weights", root / "v.json", "--weights", root / "p.json", "--out", tmp_path / "t")
    assert rc != 0
    msg = json.loads(err.strip().splitlines()[-1])
    assert msg["error"] == "sequence_too_short" and msg["bundle"] == "x"


def test_cli_errors(tmp_path, capsys):
    rc, _, err = _run(capsys, "predict", tmp_path / "missing", "--weights", "w.json", "--vessel-weights", "v.json")
    msg = json.loads(err)
    assert rc == 2 and msg["error"] == "format" and msg["stage"] == "load-weights"
    rc, _, err = _run(capsys, "label", tmp_path / "missing")
    assert rc == 2 and json.loads(err)["error"] == "config"
    rc, _, _ = _run(capsys, "no-such-command")
    assert rc == 64
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    rc, _, err = _run(capsys, "synth", "--n", "1", "--config", bad, "--out", tmp_path / "s")
    assert rc == 2 and json.loads(err)["error"] == "format"


def test_cli_synth_is_deterministic(tmp_path, capsys):
    for name in ("a", "b"):
        rc, _, err = _run(capsys, "synth", "--n", "2", "--size", "16", "--seed", "9", "--out", tmp_path / name)
        assert rc == 0, err
    for seq in ("seq_0000", "seq_0001"):
        for f in ("meta.json", "frames.raw", "ecg.json", "truth.json", "annotations.json"):
            assert (tmp_path / "a" / seq / f).read_bytes() == (tmp_path / "b" / seq / f).read_bytes()

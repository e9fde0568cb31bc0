"""Command line: ``cinephase <command> [options]``.

Failures print one JSON object on stderr (``error`` category, ``message``,
and ``stage``/``bundle`` when known) and exit with status 2; usage errors
exit with 64.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .bundle import load_bundle
from .config import RunConfig
from .errors import CinePhaseError, ConfigError, EmptyDataset
from .labeling import resample_to_10fps
from .metrics import MetricReport, plot_heart_rate, plot_sequence
from .phasenet import PhaseModel, PredictionTrace, train_phasenet
from .pipeline import (
    ecg_labels,
    evaluate_traces,
    ground_truth,
    parallel_map,
    predict_bundle,
    run_stage,
    training_sets,
    vessel_pairs,
)
from .synthcine import SynthConfig, gen_dataset
from .vesselness import VesselModel, train_vesselness

logger = logging.getLogger("cinephase")

EXIT_FAILURE = 2
EXIT_USAGE = 64


def _dump(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def bundle_paths(paths) -> list[Path]:
    """Expand arguments: a bundle directory, or a directory of bundle directories."""
    out = []
    for p in map(Path, paths):
        if (p / "meta.json").is_file():
            out.append(p)
        elif p.is_dir():
            out += sorted(d for d in p.iterdir() if (d / "meta.json").is_file())
        else:
            raise ConfigError(f"{p}: not a bundle or a directory of bundles")
    if not out:
        raise EmptyDataset("no bundles found in " + ", ".join(map(str, paths)))
    return out


def _load_all(paths):
    return [run_stage("load", str(p), load_bundle, p) for p in bundle_paths(paths)]


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.threads is not None:
        cfg.threads = args.threads
    if args.plot:
        cfg.plot = True
    if getattr(args, "weights", None):
        cfg.phase_weights = args.weights
    if getattr(args, "vessel_weights", None):
        cfg.vessel_weights = args.vessel_weights
    return cfg.validate()


def _out(args, default: str) -> Path:
    return Path(args.out or default)


# -- commands -------------------------------------------------------------------

def cmd_synth(args, cfg: RunConfig) -> dict:
    base = SynthConfig(size=args.size, collimation=args.collimation)
    paths = gen_dataset(args.n, _out(args, "synth"), seed=cfg.seed, base=base,
                        hr_range=(args.hr_min, args.hr_max), start=args.start)
    return {"bundles": [str(p) for p in paths]}


def cmd_annotate_ecg(args, cfg: RunConfig) -> dict:
    out = {}
    for bd in _load_all(args.bundles):
        peaks, _ = run_stage("ecg", bd.id, ecg_labels, bd)
        out[bd.id] = peaks.to_dict(bd.ecg.fs)
    _write_or_print(args, out)
    return {}


def cmd_label(args, cfg: RunConfig) -> dict:
    out = {}
    for bd in _load_all(args.bundles):
        _, track = run_stage("ecg", bd.id, ecg_labels, bd)
        _, t10 = run_stage("resample", bd.id, resample_to_10fps, track)
        out[bd.id] = {
            "fps": bd.fps,
            "frame_index": track.frame_index.tolist(),
            "labels": [float(v) for v in track.labels],
            "resampled_index": t10.frame_index.tolist(),
            "resampled_labels": [float(v) for v in t10.labels],
        }
    _write_or_print(args, out)
    return {}


def _write_or_print(args, obj) -> None:
    if args.out:
        Path(args.out).write_text(_dump(obj))
    else:
        sys.stdout.write(_dump(obj))


def cmd_train_vessel(args, cfg: RunConfig) -> dict:
    vcfg = cfg.vessel_config()
    pairs = []
    for bd in _load_all(args.bundles):
        pairs += run_stage("annotations", bd.id, vessel_pairs, bd, vcfg.resolution, cfg.collimation_eps)
    model = run_stage("train-vessel", "", train_vesselness, pairs, vcfg)
    path = _out(args, "vessel.json")
    model.save(path)
    return {"weights": str(path), "pairs": len(pairs), "final_loss": model.history[-1] if model.history else None}


def _vessel_model(cfg: RunConfig, required: bool = True) -> VesselModel | None:
    if cfg.vessel_weights is None:
        if required:
            raise ConfigError("vesselness weights are required (--vessel-weights or config.vessel_weights)")
        return None
    return run_stage("load-weights", "", VesselModel.load, cfg.vessel_weights)


def cmd_train_phase(args, cfg: RunConfig) -> dict:
    vmodel = _vessel_model(cfg, required=False)
    bundles = _load_all(args.bundles)
    sets, rejected = training_sets(bundles, vmodel, cfg)
    pcfg = cfg.phase_config()
    model = run_stage("train-phase", "", train_phasenet, sets, pcfg,
                      lambda e, loss: logger.info("epoch %d loss %.4f", e, loss))
    path = _out(args, "phase.json")
    model.save(path)
    return {"weights": str(path), "sequences": len(sets), "rejected": [list(r) for r in rejected],
            "final_loss": model.history[-1] if model.history else None}


def cmd_predict(args, cfg: RunConfig) -> dict:
    if cfg.phase_weights is None:
        raise ConfigError("phase-net weights are required (--weights or config.phase_weights)")
    vmodel = _vessel_model(cfg)
    pmodel = run_stage("load-weights", "", PhaseModel.load, cfg.phase_weights)
    bundles = _load_all(args.bundles)
    out = _out(args, "traces")
    out.mkdir(parents=True, exist_ok=True)
    traces = parallel_map(lambda b: predict_bundle(b, vmodel, pmodel, cfg), bundles, cfg.threads)
    written = []
    for tr in traces:
        path = out / f"{tr.sequence_id or 'trace'}.trace.json"
        tr.save(path)
        written.append(str(path))
    return {"traces": written}


def _traces_for(bundles, trace_dir: Path) -> list[PredictionTrace]:
    traces = []
    for bd in bundles:
        path = trace_dir / f"{bd.id}.trace.json"
        traces.append(run_stage("load-trace", bd.id, PredictionTrace.load, path))
    return traces


def cmd_evaluate(args, cfg: RunConfig) -> dict:
    bundles = _load_all(args.bundles)
    traces = _traces_for(bundles, Path(args.traces))
    report = evaluate_traces(traces, bundles, args.truth)
    out = _out(args, "report")
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(report.to_json())
    (out / "metrics.csv").write_text(report.to_csv())
    if cfg.plot:
        _plots(out, report.heart_rate, traces, bundles, args.truth)
    return {"metrics": str(out / "metrics.json"), "accuracy": report.per_angiography["accuracy"],
            "edf_f1": report.edf["f1"]}


def _plots(out: Path, hr_rows, traces, bundles, truth: str) -> None:
    if hr_rows:
        plot_heart_rate(out / "heart_rate.svg", hr_rows)
    for tr, bd in zip(traces, bundles):
        gidx, glab, _ = ground_truth(bd, truth)
        gt = dict(zip(gidx.tolist(), glab.tolist()))
        gt_line = [gt.get(f, np.nan) for f in tr.frame_index]
        plot_sequence(out / f"{tr.sequence_id}.svg", gt_line, tr.probabilities, tr.labels, title=tr.sequence_id)


def cmd_report(args, cfg: RunConfig) -> dict:
    path = Path(args.metrics)
    try:
        d = json.loads(path.read_text())
        report = MetricReport(d["per_angiography"], d["per_frame"], d["edf"], d["transition_split"],
                              d.get("heart_rate", []), d.get("n_sequences", 0))
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"{path}: not a metrics report ({exc})") from exc
    out = _out(args, str(path.parent))
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(report.to_csv())
    if cfg.plot and report.heart_rate:
        plot_heart_rate(out / "heart_rate.svg", report.heart_rate)
    lines = [f"sequences: {report.n_sequences}"]
    for name in ("per_angiography", "per_frame"):
        r = getattr(report, name)
        lines.append(f"{name}: " + ", ".join(f"{k} {_fmt(v)}" for k, v in r.items()))
    e = report.edf
    lines.append(f"EDF (+-{e.get('tolerance', 1)} frame): precision {_fmt(e['precision'])}, "
                 f"recall {_fmt(e['recall'])}, F1 {_fmt(e['f1'])}")
    ts = report.transition_split
    lines.append(f"errors at S->D {_fmt(ts['systole_to_diastole'])}, D->S {_fmt(ts['diastole_to_systole'])}")
    for row in report.heart_rate:
        lines.append(f"  {row['bin']:>12} bpm: n={row['count']:<4} accuracy {_fmt(row['accuracy'])}")
    sys.stdout.write("\n".join(lines) + "\n")
    return {}


def _fmt(v) -> str:
    return "n/a" if v is None else f"{v:.4f}"


COMMANDS = {
    "synth": cmd_synth,
    "annotate-ecg": cmd_annotate_ecg,
    "label": cmd_label,
    "train-vessel": cmd_train_vessel,
    "train-phase": cmd_train_phase,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="RunConfig JSON file")
    common.add_argument("--seed", type=int, help="seed (unsigned 64-bit)")
    common.add_argument("--threads", type=int, help="bundles processed in parallel")
    common.add_argument("--plot", action="store_true", help="write SVG plots")
    common.add_argument("--out", help="output file or directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="cinephase", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate synthetic bundles")
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--start", type=int, default=0, help="index of the first sequence")
    p.add_argument("--hr-min", type=float, default=40.0)
    p.add_argument("--hr-max", type=float, default=120.0)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--collimation", type=int, default=0)

    for name, help_ in (("annotate-ecg", "detect R/T/end-of-systole points"),
                        ("label", "ECG-derived frame labels"),
                        ("train-vessel", "train the vesselness net on annotated bundles")):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.add_argument("bundles", nargs="+")

    p = sub.add_parser("train-phase", parents=[common], help="train the phase net")
    p.add_argument("bundles", nargs="+")
    p.add_argument("--vessel-weights")

    p = sub.add_parser("predict", parents=[common], help="predict phase labels and EDFs")
    p.add_argument("bundles", nargs="+")
    p.add_argument("--weights", help="phase-net weights manifest")
    p.add_argument("--vessel-weights")

    p = sub.add_parser("evaluate", parents=[common], help="score traces against ground truth")
    p.add_argument("bundles", nargs="+")
    p.add_argument("--traces", required=True, help="directory of *.trace.json")
    p.add_argument("--truth", choices=("ecg", "synthetic"), default="ecg")

    p = sub.add_parser("report", parents=[common], help="summarise a metrics.json")
    p.add_argument("metrics")
    return parser


def _fail(category: str, message: str, stage: str | None = None, bundle: str | None = None) -> int:
    err = {"error": category, "message": message}
    if stage:
        err["stage"] = stage
    if bundle:
        err["bundle"] = bundle
    sys.stderr.write(json.dumps(err, sort_keys=True) + "\n")
    return EXIT_FAILURE


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = _config(args)
        result = COMMANDS[args.command](args, cfg)
    except CinePhaseError as exc:
        cause = getattr(exc, "cause", exc)
        return _fail(exc.category, str(cause), getattr(exc, "stage", None), getattr(exc, "bundle_id", None))
    except OSError as exc:
        return _fail("io", f"{exc.filename or ''}: {exc.strerror or exc}")
    if result:
        sys.stdout.write(_dump(result))
    return 0


if __name__ == "__main__":
    sys.exit(main())

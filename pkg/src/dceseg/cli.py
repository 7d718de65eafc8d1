"""Command-line pipeline: phantom generation, training, prediction,
evaluation, statistical comparison and report rendering.

Every command is reproducible (same inputs and seed give identical output
digests) and writes a manifest of what it produced. Failures print a single
machine-readable JSON error line on stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, write_manifest
from .metrics import MetricsReport, dsc, hd95
from .models import InputConfig, Network, build_network, predict_volume, train
from .nn import AdamState
from .phantom import PhantomSpec, default_ambiguity_spec, default_separable_spec, generate_phantom
from .postprocess import postprocess_probabilities
from .reporting import write_report
from .stats import paired_t_test, wilcoxon_signed_rank
from .volumes import BinaryMask3D, normalize, read_volume, write_volume, extract_slices

MASK_SUFFIX = "_mask"
PRED_SUFFIX = "_pred"


# ---------------------------------------------------------------------------
# helpers


def _case_id(path: Path) -> str:
    stem = path.name[: -len(".mvf")]
    for suffix in (MASK_SUFFIX, PRED_SUFFIX):
        if stem.endswith(suffix):
            return stem[: -len(suffix)]
    return stem


def _series_paths(directory: Path) -> list[Path]:
    paths = [p for p in sorted(directory.glob("*.mvf"))
             if not p.name[: -len(".mvf")].endswith((MASK_SUFFIX, PRED_SUFFIX))]
    if not paths:
        raise FileNotFoundError(f"no series files (*.mvf) found in {directory}")
    return paths


def _load_training_samples(data_dir: Path):
    samples = []
    for series_path in _series_paths(data_dir):
        case = _case_id(series_path)
        mask_path = data_dir / f"{case}{MASK_SUFFIX}.mvf"
        if not mask_path.exists():
            raise FileNotFoundError(f"missing mask for case {case}: {mask_path}")
        series = read_volume(series_path)
        mask = read_volume(mask_path)
        normalized, _ = normalize(series)
        samples.extend(extract_slices(normalized, mask, case_id=case))
    return samples


def _checkpoint_metadata(network: Network) -> dict:
    return {
        "architecture": network.architecture,
        "input_config": network.input_config.label,
        "phase_index": network.input_config.phase,
        "width_divisor": network.width_divisor,
        "format_version": 1,
    }


def _training_state_tensors(network: Network, adam: AdamState, iteration: int) -> dict:
    tensors = network.state_dict()
    for name in network.params:
        if name in adam.m:
            tensors[f"opt.m.{name}"] = adam.m[name]
            tensors[f"opt.v.{name}"] = adam.v[name]
    tensors["opt.t"] = np.asarray(float(adam.t), dtype=np.float32)
    tensors["train.iteration"] = np.asarray(float(iteration), dtype=np.float32)
    return tensors


def _save_training_checkpoint(path: Path, network: Network, adam: AdamState,
                              iteration: int) -> None:
    save_checkpoint(path, _training_state_tensors(network, adam, iteration))
    Path(str(path) + ".json").write_text(
        json.dumps(_checkpoint_metadata(network), indent=2) + "\n")


def load_network_from_checkpoint(path) -> tuple[Network, dict]:
    """Rebuild a network from a checkpoint and its metadata sidecar."""
    path = Path(path)
    meta_path = Path(str(path) + ".json")
    if not meta_path.exists():
        raise FileNotFoundError(f"missing checkpoint metadata sidecar {meta_path}")
    meta = json.loads(meta_path.read_text())
    config = InputConfig.from_label(meta["input_config"], phase=meta.get("phase_index", 2))
    network = build_network(meta["architecture"], config,
                            width_divisor=meta.get("width_divisor", 1))
    tensors = load_checkpoint(path)
    network.load_state_dict(tensors)
    return network, tensors


# ---------------------------------------------------------------------------
# commands


def cmd_phantom_gen(args) -> int:
    if args.cases < 1:
        raise ValueError(f"--cases must be >= 1, got {args.cases}")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    base_spec = PhantomSpec.load(args.spec) if args.spec else None
    outputs = []
    for i in range(args.cases):
        case_seed = args.seed + i
        if base_spec is not None:
            spec = PhantomSpec.from_dict({**base_spec.to_dict(), "seed": case_seed})
        elif args.preset == "separable":
            spec = default_separable_spec(args.size, seed=case_seed,
                                          noise_sigma=args.noise)
        else:
            spec = default_ambiguity_spec(args.size, seed=case_seed,
                                          noise_sigma=args.noise)
        series, mask = generate_phantom(spec)
        series_path = out_dir / f"case{i:03d}.mvf"
        mask_path = out_dir / f"case{i:03d}{MASK_SUFFIX}.mvf"
        write_volume(series, series_path)
        write_volume(mask, mask_path)
        outputs += [series_path, Path(str(series_path) + ".json"),
                    mask_path, Path(str(mask_path) + ".json")]
    manifest = write_manifest(out_dir, "phantom-gen", args.seed, outputs)
    print(f"wrote {args.cases} cases to {out_dir} ({manifest.name})")
    return 0


def cmd_train(args) -> int:
    config = ExperimentConfig.load(args.config)
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    samples = _load_training_samples(Path(config.data_dir))

    network = build_network(config.architecture,
                            InputConfig.from_label(config.input_config,
                                                   phase=config.phase_index),
                            seed=config.seed, width_divisor=config.width_divisor)
    adam = AdamState(lr=config.learning_rate)
    start_iteration = 0
    if config.resume_from:
        resumed, tensors = load_network_from_checkpoint(config.resume_from)
        if (resumed.architecture, resumed.input_config) != (network.architecture,
                                                            network.input_config):
            raise ValueError("resume checkpoint does not match the configured network")
        network = resumed
        adam.t = int(np.asarray(tensors["opt.t"]).reshape(()))
        for name in network.params:
            key = f"opt.m.{name}"
            if key in tensors:
                adam.m[name] = tensors[key].copy()
                adam.v[name] = tensors[f"opt.v.{name}"].copy()
        start_iteration = int(np.asarray(tensors["train.iteration"]).reshape(()))
        if start_iteration >= config.iterations:
            raise ValueError(
                f"checkpoint is already at iteration {start_iteration}, nothing to do")

    latest_path = out_dir / "checkpoint_latest.dcsg"

    def cadence_writer(iteration, net, state):
        _save_training_checkpoint(latest_path, net, state, iteration)

    trace = train(network, samples, iterations=config.iterations, seed=config.seed,
                  adam=adam, start_iteration=start_iteration,
                  checkpoint_every=config.checkpoint_every,
                  checkpoint_fn=cadence_writer if config.checkpoint_every else None)

    checkpoint_path = out_dir / "checkpoint.dcsg"
    _save_training_checkpoint(checkpoint_path, network, adam, config.iterations)

    trace_path = out_dir / "loss_trace.csv"
    mode = "a" if (start_iteration and trace_path.exists()) else "w"
    with trace_path.open(mode, encoding="utf-8") as handle:
        if mode == "w":
            handle.write("iteration,loss\n")
        for offset, loss in enumerate(trace, start=start_iteration + 1):
            handle.write(f"{offset},{loss!r}\n")

    outputs = [checkpoint_path, Path(str(checkpoint_path) + ".json"), trace_path]
    if latest_path.exists():
        outputs += [latest_path, Path(str(latest_path) + ".json")]
    write_manifest(out_dir, "train", config.seed, outputs,
                   config=json.loads(Path(args.config).read_text()))
    smoothed = float(np.mean(trace[-100:])) if trace else float("nan")
    print(f"trained {config.iterations} iterations; "
          f"final smoothed loss {smoothed:.4f}; wrote {checkpoint_path}")
    return 0


def cmd_predict(args) -> int:
    network, _ = load_network_from_checkpoint(args.checkpoint)
    in_dir = Path(args.input)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = []
    for series_path in _series_paths(in_dir):
        case = _case_id(series_path)
        series = read_volume(series_path)
        normalized, _ = normalize(series)
        probabilities = predict_volume(network, normalized)
        mask = postprocess_probabilities(probabilities, series.spacing_mm)
        if mask.num_foreground == 0:
            print(f"warning: case {case} is empty after post-processing",
                  file=sys.stderr)
        pred_path = out_dir / f"{case}{PRED_SUFFIX}.mvf"
        write_volume(mask, pred_path)
        outputs += [pred_path, Path(str(pred_path) + ".json")]
    write_manifest(out_dir, "predict", None, outputs)
    print(f"wrote {len(outputs) // 2} predictions to {out_dir}")
    return 0


def cmd_evaluate(args) -> int:
    pred_dir = Path(args.pred)
    gt_dir = Path(args.gt)
    pred_paths = {_case_id(p): p for p in sorted(pred_dir.glob(f"*{PRED_SUFFIX}.mvf"))}
    gt_paths = {_case_id(p): p for p in sorted(gt_dir.glob(f"*{MASK_SUFFIX}.mvf"))}
    if not pred_paths:
        raise FileNotFoundError(f"no predictions (*{PRED_SUFFIX}.mvf) in {pred_dir}")
    unpaired = set(pred_paths) ^ set(gt_paths)
    if unpaired:
        raise ValueError(f"unpaired cases: {', '.join(sorted(unpaired))}")
    rows = []
    for case in sorted(pred_paths):
        pred = read_volume(pred_paths[case])
        gt = read_volume(gt_paths[case])
        if not isinstance(pred, BinaryMask3D) or not isinstance(gt, BinaryMask3D):
            raise ValueError(f"case {case}: evaluate expects binary masks")
        if pred.num_foreground == 0:
            print(f"warning: case {case} prediction is empty, skipping metrics",
                  file=sys.stderr)
            continue
        rows.append((case, dsc(pred, gt), hd95(pred, gt)))
    report = MetricsReport(rows)
    report.write_csv(args.out)
    print(f"wrote {len(rows)} rows to {args.out}")
    return 0


def cmd_compare(args) -> int:
    report_a = MetricsReport.read_csv(args.a)
    report_b = MetricsReport.read_csv(args.b)
    cases_a, cases_b = set(report_a.cases()), set(report_b.cases())
    if cases_a != cases_b:
        raise ValueError(f"unpaired cases: {', '.join(sorted(cases_a ^ cases_b))}")
    order = sorted(cases_a)
    by_case_a = dict(zip(report_a.cases(), report_a.values(args.metric)))
    by_case_b = dict(zip(report_b.cases(), report_b.values(args.metric)))
    a = [by_case_a[c] for c in order]
    b = [by_case_b[c] for c in order]
    test = paired_t_test if args.test == "t" else wilcoxon_signed_rank
    result = test(a, b)
    print(json.dumps({
        "test": args.test,
        "metric": args.metric,
        "statistic": result.statistic,
        "p_value": result.p_value,
        "n_effective": result.n_effective,
        "method": result.method,
    }))
    return 0


def cmd_report(args) -> int:
    outputs = write_report(args.metrics, args.out)
    for path in outputs:
        print(f"wrote {path}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dceseg",
        description="Liver segmentation experiments on dynamic contrast-enhanced MR series")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom-gen", help="generate synthetic phantom cases")
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument("--spec", help="phantom spec JSON file")
    source.add_argument("--preset", choices=("separable", "ambiguity"),
                        help="built-in phantom geometry")
    p.add_argument("--size", type=int, default=64,
                   help="grid size for presets (divisible by 8)")
    p.add_argument("--noise", type=float, default=4.0,
                   help="noise sigma for presets")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cases", type=int, required=True, help="number of cases")
    p.set_defaults(func=cmd_phantom_gen)

    p = sub.add_parser("train", help="train a network from a config file")
    p.add_argument("--config", required=True, help="experiment config JSON")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="segment series with a trained checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--in", dest="input", required=True, help="directory of series")
    p.add_argument("--out", required=True, help="output directory for masks")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="compute per-case DSC and HD95")
    p.add_argument("--pred", required=True, help="directory of predicted masks")
    p.add_argument("--gt", required=True, help="directory of ground-truth masks")
    p.add_argument("--out", required=True, help="metrics CSV path")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compare", help="paired test between two metrics files")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--metric", choices=("dsc", "hd95"), required=True)
    p.add_argument("--test", choices=("t", "wilcoxon"), required=True)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("report", help="box-plot figure plus summary CSV")
    p.add_argument("--metrics", nargs="+", required=True, help="metrics CSV files")
    p.add_argument("--out", required=True, help="figure path (SVG)")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, KeyError, OSError, RuntimeError, FloatingPointError) as exc:
        print(json.dumps({"error": str(exc), "command": args.command}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``cnilab {train,attack,transfer,blackbox,sweep,report}``."""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys

import numpy as np

from .attacks import BlackBoxModel, blackbox_attack, transfer_attack
from .config import ExperimentConfig, parse_epsilon
from .data import Dataset, save_idx
from .estimator import NoiseInjectedClassifier
from .nn import DEFENSES
from .rng import SeedStreams
from .sweep import RunReport, SweepSpec, config_id, emit_report, eval_seed, pooled_row, read_report, run_sweep
from .training import evaluate, load_checkpoint, save_checkpoint

log = logging.getLogger("cnilab")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--seed", type=int)
    p.add_argument("--defense", choices=DEFENSES)
    p.add_argument("--rank", type=int)
    p.add_argument("--epsilon", help="l-inf radius in input units, e.g. 0.0314 or 8/255")
    p.add_argument("--k", type=int, help="PGD iterations")
    p.add_argument("--out", default="runs/latest", help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cnilab", description="Colored noise injection robustness lab")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one model and save its checkpoint")
    _common(p)

    p = sub.add_parser("attack", help="white-box PGD evaluation of a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", help="defaults to <out>/model.ckpt")

    p = sub.add_parser("transfer", help="PGD on a source checkpoint, scored on a target")
    _common(p)
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)

    p = sub.add_parser("blackbox", help="NES gradient-estimation attack on a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", help="defaults to <out>/model.ckpt")

    p = sub.add_parser("sweep", help="rank / epsilon / k ablation")
    _common(p)
    p.add_argument("--variable", choices=("rank", "epsilon", "k"))
    p.add_argument("--values", help="comma separated; epsilon accepts fractions like 8/255")
    p.add_argument("--repetitions", type=int)
    p.add_argument("--checkpoint", help="fixed model for epsilon/k sweeps (no training)")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--record-time", action="store_true",
                   help="write measured wall time into the CSV (makes it non-reproducible)")

    p = sub.add_parser("report", help="print one or more report CSVs as a table")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--out", help="also write the merged report CSV here")
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


def load_config(args) -> ExperimentConfig:
    over: dict = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.defense is not None:
        over["defense"] = args.defense
    if args.rank is not None:
        over["rank"] = args.rank
    atk = {}
    if args.epsilon is not None:
        atk["epsilon"] = parse_epsilon(args.epsilon)
    if args.k is not None:
        atk["k"] = args.k
    if atk:
        over["attack"] = dict(atk)
        over["train"] = {"attack": dict(atk)}
    if getattr(args, "variable", None):
        over.setdefault("sweep", {})["variable"] = args.variable
    if getattr(args, "values", None):
        over.setdefault("sweep", {})["values"] = [parse_epsilon(v) for v in args.values.split(",")]
    if getattr(args, "repetitions", None):
        over.setdefault("sweep", {})["repetitions"] = args.repetitions
    return ExperimentConfig.load(args.config, over)


def _prepare_out(args, cfg: ExperimentConfig) -> str:
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "config.json"), "w") as fh:
        fh.write(cfg.to_json() + "\n")
    return args.out


def _emit(summary: dict) -> None:
    print(json.dumps(summary, sort_keys=True))


def _test_set(cfg: ExperimentConfig) -> Dataset:
    return cfg.shape_for_model(cfg.datasets()[2])


def _single_row(cfg, est, test, attack, out, label_value=None) -> RunReport:
    draws = int(cfg.raw["eval"]["n_noise_draws"])
    seed = eval_seed(cfg.seed)
    clean = est.robust_score(test.inputs, test.labels, None, draws, seed)
    adv = est.robust_score(test.inputs, test.labels, attack, draws, seed)
    value = attack.epsilon if label_value is None else label_value
    report = RunReport([pooled_row(config_id("epsilon", value), "epsilon", value, 1,
                                   clean.accuracies, adv.accuracies, 0.0)])
    emit_report(report, os.path.join(out, "report.csv"))
    return report


def cmd_train(args) -> dict:
    cfg = load_config(args)
    out = _prepare_out(args, cfg)
    train_set, val_set, test_set = (cfg.shape_for_model(d) for d in cfg.datasets())
    est = cfg.estimator()
    history = os.path.join(out, "history.csv")
    if os.path.exists(history):
        os.remove(history)
    est.fit(train_set.inputs, train_set.labels, val_set.inputs, val_set.labels, metrics_path=history)
    save_checkpoint(est.checkpoint_, os.path.join(out, "model.ckpt"))
    row = _single_row(cfg, est, test_set, cfg.attack_config(), out).rows[0]
    return {"command": "train", "best_epoch": est.best_epoch_, "val_accuracy": est.checkpoint_.val_accuracy,
            "clean_mean": row.clean_mean, "adv_mean": row.adv_mean, "checkpoint": os.path.join(out, "model.ckpt")}


def _load_estimator(path) -> NoiseInjectedClassifier:
    return NoiseInjectedClassifier.from_checkpoint(load_checkpoint(path))


def cmd_attack(args) -> dict:
    cfg = load_config(args)
    out = _prepare_out(args, cfg)
    est = _load_estimator(args.checkpoint or os.path.join(out, "model.ckpt"))
    row = _single_row(cfg, est, _test_set(cfg), cfg.attack_config(), out).rows[0]
    return {"command": "attack", "clean_mean": row.clean_mean, "clean_std": row.clean_std,
            "adv_mean": row.adv_mean, "adv_std": row.adv_std}


def _file_digest(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def cmd_transfer(args) -> dict:
    cfg = load_config(args)
    out = _prepare_out(args, cfg)
    source = _load_estimator(args.source)
    target = _load_estimator(args.target)
    test = _test_set(cfg)
    attack = cfg.attack_config()
    adv = transfer_attack(source.model_, attack, test, SeedStreams(eval_seed(cfg.seed)))
    save_idx(adv, os.path.join(out, "adv-images.idx"), os.path.join(out, "adv-labels.idx"), dtype="<f8")
    meta = {"source_model_sha256": _file_digest(args.source), "source_params_digest": adv.provenance["source_model"],
            "attack": attack.to_dict(), "n": len(adv)}
    with open(os.path.join(out, "adv-meta.json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    draws = int(cfg.raw["eval"]["n_noise_draws"])
    clean = evaluate(target.model_, test, None, draws, SeedStreams(eval_seed(cfg.seed)))
    transferred = evaluate(target.model_, adv, None, draws, SeedStreams(eval_seed(cfg.seed)))
    report = RunReport([pooled_row(config_id("epsilon", attack.epsilon), "epsilon", attack.epsilon, 1,
                                   clean.accuracies, transferred.accuracies, 0.0)])
    emit_report(report, os.path.join(out, "report.csv"))
    return {"command": "transfer", "clean_mean": report.rows[0].clean_mean, "adv_mean": report.rows[0].adv_mean}


def cmd_blackbox(args) -> dict:
    cfg = load_config(args)
    out = _prepare_out(args, cfg)
    est = _load_estimator(args.checkpoint or os.path.join(out, "model.ckpt"))
    bbc = cfg.raw["blackbox"]
    test = _test_set(cfg)
    test = test.take(np.arange(min(len(test), int(bbc["max_examples"]))))
    attack = cfg.attack_config(k=int(bbc["k"]))
    draws = int(cfg.raw["eval"]["n_noise_draws"])
    clean = evaluate(est.model_, test, None, draws, SeedStreams(eval_seed(cfg.seed)))
    accs, queries = [], 0
    for d in range(draws):
        streams = SeedStreams(eval_seed(cfg.seed) + d)
        bb = BlackBoxModel.from_model(est.model_, streams)
        x_adv = blackbox_attack(bb, test.inputs, test.labels, attack, bbc["sigma"], int(bbc["n_samples"]), streams)
        queries += bb.queries
        adv_set = Dataset(x_adv, test.labels, test.n_classes, "adv")
        accs.extend(evaluate(est.model_, adv_set, None, 1, streams).accuracies)
    report = RunReport([pooled_row(config_id("epsilon", attack.epsilon), "epsilon", attack.epsilon, 1,
                                   clean.accuracies, accs, 0.0)])
    emit_report(report, os.path.join(out, "report.csv"))
    return {"command": "blackbox", "clean_mean": report.rows[0].clean_mean, "adv_mean": report.rows[0].adv_mean,
            "query_batches": queries}


def cmd_sweep(args) -> dict:
    cfg = load_config(args)
    out = _prepare_out(args, cfg)
    spec = SweepSpec.from_config(cfg)
    ck = load_checkpoint(args.checkpoint) if args.checkpoint else None
    report = run_sweep(spec, checkpoint=ck, record_time=args.record_time, n_jobs=args.jobs)
    emit_report(report, os.path.join(out, "report.csv"))
    errors_path = os.path.join(out, "errors.json")
    if report.errors:
        with open(errors_path, "w") as fh:
            json.dump(report.errors, fh, indent=2, sort_keys=True)
    elif os.path.exists(errors_path):
        os.remove(errors_path)
    return {"command": "sweep", "variable": spec.variable, "rows": len(report.rows),
            "train_steps": report.train_steps, "failed_points": len(report.errors),
            "report": os.path.join(out, "report.csv")}


def cmd_report(args) -> dict:
    merged = RunReport()
    for path in args.inputs:
        merged.rows.extend(read_report(path).rows)
    if args.out:
        emit_report(merged, args.out)
    header = f"{'config':<18}{'clean %':>18}{'adversarial %':>20}{'seeds':>7}"
    print(header)
    for r in merged.sorted_rows():
        print(f"{r.config_id:<18}{100 * r.clean_mean:>10.2f} ± {100 * r.clean_std:<5.2f}"
              f"{100 * r.adv_mean:>12.2f} ± {100 * r.adv_std:<5.2f}{r.seed_count:>7}")
    return {"command": "report", "rows": len(merged.rows)}


COMMANDS = {
    "train": cmd_train,
    "attack": cmd_attack,
    "transfer": cmd_transfer,
    "blackbox": cmd_blackbox,
    "sweep": cmd_sweep,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        summary = COMMANDS[args.command](args)
    except Exception as exc:  # noqa: BLE001 - converted to a machine-readable error line
        print(json.dumps({"error": str(exc), "type": type(exc).__name__, "command": args.command}), file=sys.stderr)
        return 1
    if args.command != "report":
        _emit(summary)
    return 0


if __name__ == "__main__":
    sys.exit(main())

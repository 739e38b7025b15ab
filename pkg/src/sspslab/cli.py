"""Command-line entry points for reproducible experiments and reports."""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace

from . import metrics as metricsmod
from .config import ExperimentConfig, build_dataset, load_config, parse_strategy
from .core import ConfigError
from .model import load_checkpoint
from .ssps import Strategy, parse_audit_line
from .synthdata import save_dataset, save_trials
from .trainer import evaluate, parse_report_csv, run_experiment

REPORT_TOL = 1e-12


def _load_experiment(args) -> ExperimentConfig:
    exp = load_config(getattr(args, "config", None))
    train = exp.train
    sampler = train.sampler
    if getattr(args, "seed", None) is not None:
        train = replace(train, seed=args.seed)
    if getattr(args, "no_augment", False):
        train = replace(train, augmentation_enabled=False)
    if getattr(args, "sampler", None):
        sampler = replace(sampler, strategy=parse_strategy(args.sampler))
    if getattr(args, "k", None) is not None:
        sampler = replace(sampler, K=args.k)
    if getattr(args, "m", None) is not None:
        sampler = replace(sampler, M=args.m)
    train = replace(train, sampler=sampler)
    return replace(exp, train=train)


def _cmd_generate_data(args) -> int:
    exp = _load_experiment(args)
    if args.seed is not None:
        exp = replace(exp, data=replace(exp.data, seed=args.seed))
    records, trials = build_dataset(exp)
    os.makedirs(args.out, exist_ok=True)
    save_dataset(records, os.path.join(args.out, "dataset.txt"))
    save_trials(trials, os.path.join(args.out, "trials.txt"))
    print(f"wrote {len(records)} utterances and {len(trials)} trials to {args.out}")
    return 0


def _cmd_train(args) -> int:
    exp = _load_experiment(args)
    records, trials = build_dataset(exp)
    reports, _, summary = run_experiment(
        exp.train, records, trials, exp.data, exp.model, out_dir=args.out
    )
    last = reports[-1] if reports else None
    print(f"trained {exp.train.framework} for {len(reports)} epochs -> {args.out}")
    if last is not None:
        print(f"last_epoch_eer={last.eer!r} final_eer={summary['final_eer']!r} "
              f"final_min_dcf={summary['final_min_dcf']!r}")
    return 0


def _cmd_evaluate(args) -> int:
    exp = _load_experiment(args)
    records, trials = build_dataset(exp)
    params = load_checkpoint(args.checkpoint)
    eer_value, dcf_value = evaluate(params, trials, records, exp.model.input_standardize)
    if args.scores_out or args.intra_speaker_out:
        from .synthdata import base_features, speaker_labels
        from .trainer import encode_representations

        reps = encode_representations(params, base_features(records), exp.model.input_standardize)
        if args.scores_out:
            scored = metricsmod.score_trials(reps, trials)
            metricsmod.save_scored_trials(trials, scored, args.scores_out)
        if args.intra_speaker_out:
            medians = metricsmod.intra_speaker_similarity(reps, speaker_labels(records))
            with open(args.intra_speaker_out, "w", encoding="ascii") as fh:
                fh.write("speaker_id,median_cos\n")
                for spk in sorted(medians):
                    fh.write(f"{spk},{medians[spk]!r}\n")
    print(f"eer={eer_value!r}")
    print(f"min_dcf={dcf_value!r}")
    return 0


def _cmd_score_trials(args) -> int:
    scored = metricsmod.load_scored_trials(args.scores)
    print(f"eer={metricsmod.eer(scored)!r}")
    print(f"min_dcf={metricsmod.min_dcf(scored)!r}")
    return 0


def _sweep_point(payload):
    exp, k, m = payload
    sampler = replace(exp.train.sampler, strategy=Strategy.SSPS_CLUSTER, K=k, M=m)
    train = replace(exp.train, sampler=sampler)
    records, trials = build_dataset(exp)
    reports, _, summary = run_experiment(train, records, trials, exp.data, exp.model)
    last = reports[-1]
    return (k, m, summary["final_eer"], summary["final_min_dcf"],
            last.speaker_acc, last.recording_acc)


def _cmd_sweep(args) -> int:
    ks_raw, ms_raw = args.k, args.m
    args.k = args.m = None  # grid lists, not single overrides
    exp = _load_experiment(args)
    ks = [int(p) for p in ks_raw.split(",")] if ks_raw else sorted(
        {exp.data.n_speakers, 2 * exp.data.n_recordings}
    )
    ms = [int(p) for p in ms_raw.split(",")] if ms_raw else [0, 1]
    grid = [(exp, k, m) for k in ks for m in ms]
    workers = int(os.environ.get("SSPS_THREADS", "1"))
    if workers > 1:
        import multiprocessing

        with multiprocessing.Pool(min(workers, len(grid))) as pool:
            rows = pool.map(_sweep_point, grid)
    else:
        rows = [_sweep_point(p) for p in grid]
    rows.sort(key=lambda r: (r[0], r[1]))
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "sweep.csv")
    with open(path, "w", encoding="ascii") as fh:
        fh.write("k,m,eer,min_dcf,speaker_acc,recording_acc\n")
        for k, m, eer_v, dcf_v, spk, rec in rows:
            fh.write(f"{k},{m},{eer_v!r},{dcf_v!r},{spk!r},{rec!r}\n")
    print(f"wrote {len(rows)} sweep rows to {path}")
    return 0


def _recompute_report(out_dir: str):
    """Recompute headline numbers from raw logs; returns mismatch strings."""
    from .ssps import AuditRow

    reports = parse_report_csv(os.path.join(out_dir, "report.csv"))
    audit: list[AuditRow] = []
    audit_path = os.path.join(out_dir, "audit.log")
    if os.path.exists(audit_path):
        with open(audit_path, "r", encoding="ascii") as fh:
            audit = [parse_audit_line(line) for line in fh if line.strip()]
    by_epoch: dict[int, list[AuditRow]] = {}
    for row in audit:
        by_epoch.setdefault(row.epoch, []).append(row)

    mismatches = []
    for rep in reports:
        rows = by_epoch.get(rep.epoch, [])
        if rows:
            fallback = sum(r.fallback for r in rows) / len(rows)
            sampled = [r for r in rows if not r.fallback]
            if sampled:
                spk = sum(r.same_speaker for r in sampled) / len(sampled)
                rec = sum(r.same_recording for r in sampled) / len(sampled)
            else:
                spk = rec = -1.0
        else:
            fallback, spk, rec = 0.0, -1.0, -1.0
        for name, logged, recomputed in (
            ("fallback_rate", rep.fallback_rate, fallback),
            ("speaker_acc", rep.speaker_acc, spk),
            ("recording_acc", rep.recording_acc, rec),
        ):
            if abs(logged - recomputed) > REPORT_TOL:
                mismatches.append(
                    f"epoch {rep.epoch} {name}: report.csv={logged!r} recomputed={recomputed!r}"
                )

    with open(os.path.join(out_dir, "summary.json"), "r", encoding="ascii") as fh:
        summary = json.load(fh)
    scored = metricsmod.load_scored_trials(os.path.join(out_dir, "scores-final.txt"))
    final_eer = metricsmod.eer(scored)
    final_dcf = metricsmod.min_dcf(scored)
    for name, logged, recomputed in (
        ("final_eer", summary["final_eer"], final_eer),
        ("final_min_dcf", summary["final_min_dcf"], final_dcf),
    ):
        if abs(logged - recomputed) > REPORT_TOL:
            mismatches.append(f"{name}: summary.json={logged!r} recomputed={recomputed!r}")
    return reports, summary, mismatches


def _cmd_report(args) -> int:
    reports, summary, mismatches = _recompute_report(args.out)
    print(f"run: {summary['framework']} / {summary['strategy']}, {summary['epochs']} epochs")
    print(f"final_eer={summary['final_eer']!r}")
    print(f"final_min_dcf={summary['final_min_dcf']!r}")
    if summary.get("warmup_end_eer") is not None:
        print(f"warmup_end_eer={summary['warmup_end_eer']!r}")
    if args.baseline:
        _, base_summary, base_mismatch = _recompute_report(args.baseline)
        mismatches.extend(f"baseline {m}" for m in base_mismatch)
        for key in ("final_eer", "final_min_dcf"):
            base = base_summary[key]
            ours = summary[key]
            if base > 0:
                delta = 100.0 * (base - ours) / base
                print(f"delta_{key}_pct={delta!r}")
    if mismatches:
        for m in mismatches:
            print(f"mismatch: {m}", file=sys.stderr)
        return 1
    print(f"verified {len(reports)} report rows against raw logs")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sspslab",
        description="Desk-scale self-supervised training with bootstrapped positive sampling",
    )
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", default=None, help="INI config file (defaults if omitted)")
        if out_required:
            p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="run seed override")

    p = sub.add_parser("generate-data", help="write dataset.txt and trials.txt")
    common(p)
    p.set_defaults(func=_cmd_generate_data)

    p = sub.add_parser("train", help="run a full experiment")
    common(p)
    p.add_argument("--no-augment", action="store_true", dest="no_augment")
    p.add_argument("--sampler", choices=["ssl", "nn", "cluster", "cluster-centroid", "oracle"])
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--m", type=int, default=None)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint on the configured trials")
    common(p, out_required=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scores-out", default=None)
    p.add_argument("--intra-speaker-out", default=None,
                   help="CSV of per-speaker median same-speaker cosine")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("score-trials", help="metrics from a `label enroll test score` file")
    p.add_argument("--scores", required=True)
    p.set_defaults(func=_cmd_score_trials)

    p = sub.add_parser("sweep", help="grid over sampler (K, M); SSPS_THREADS caps workers")
    common(p)
    p.add_argument("--k", default=None, help="comma-separated K values")
    p.add_argument("--m", default=None, help="comma-separated M values")
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("report", help="recompute headline numbers from raw logs")
    p.add_argument("--out", required=True)
    p.add_argument("--baseline", default=None, help="paired run for relative deltas")
    p.set_defaults(func=_cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: ConfigError: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

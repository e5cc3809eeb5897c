"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 data/format error,
3 numeric abort.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import io as pio
from .errors import ConfigError, DataError, DimensionError, MetricError, NumericError, PseudoDistError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
GRADCHECK_TOL = 1e-4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pseudodist", description="Train and evaluate a learned pseudo-distance "
                                                "for verification.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    t = sub.add_parser("train", help="train encoder + distance model")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True, help="training data spec (CSV path or idx:IMAGES,LABELS)")
    t.add_argument("--valid", help="validation data spec (default: hold out valid_fraction)")
    t.add_argument("--out", required=True)

    e = sub.add_parser("eval", help="score a trial list")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--trials", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--scores-out", required=True)
    e.add_argument("--report-out", required=True, help="per-method EER / 1-AUC summary CSV")
    e.add_argument("--roc-out", help="operating points (threshold, FAR, miss) CSV")

    a = sub.add_parser("audit", help="metric-property histograms of 1 - D")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--config")

    s = sub.add_parser("synth", help="sample a Gaussian task to CSV")
    s.add_argument("--spec", required=True)
    s.add_argument("--out", required=True)

    tr = sub.add_parser("trials", help="generate a trial list")
    tr.add_argument("--data", required=True)
    tr.add_argument("--mode", choices=("all_pairs", "sampled"), default="all_pairs")
    tr.add_argument("--n", type=int)
    tr.add_argument("--target-fraction", type=float, default=0.5)
    tr.add_argument("--seed", type=int, default=0)
    tr.add_argument("--out", required=True)

    o = sub.add_parser("oracle", help="Monte Carlo oracle EER, optionally vs a checkpoint")
    o.add_argument("--spec", required=True)
    o.add_argument("--checkpoint")
    o.add_argument("--out", required=True)

    em = sub.add_parser("embed", help="dump embeddings as a labeled CSV")
    em.add_argument("--checkpoint", required=True)
    em.add_argument("--data", required=True)
    em.add_argument("--out", required=True)

    g = sub.add_parser("gradcheck", help="finite-difference check of all backward passes")
    g.add_argument("--seeds", type=int, default=20)
    g.add_argument("--seed", type=int, default=0)
    return p


def cmd_train(args):
    from .trainer import train

    cfg = pio.RunConfig.load(args.config)
    data = pio.load_data_spec(args.data, "train")
    if cfg.train_classes:
        data = data.restrict_classes(cfg.train_classes)
    if args.valid:
        train_ds, valid_ds = data, pio.load_data_spec(args.valid, "valid")
    elif cfg.valid_fraction > 0:
        train_ds, valid_ds = pio.split_validation(data, cfg.valid_fraction, cfg.seed)
    else:
        train_ds, valid_ds = data, None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with pio.atomic_write(out / "config.txt") as fh:
        fh.write(cfg.dump())
    enc = cfg.encoder_config(train_ds.dim)
    dist = cfg.distance_config(enc.embedding_dim)
    bundle, entries = train(train_ds.features, train_ds.labels,
                            None if valid_ds is None else valid_ds.features,
                            None if valid_ds is None else valid_ds.labels,
                            enc, dist, cfg.train_config(checkpoint_dir=out),
                            log_path=out / "train_log.csv")
    evals = [e.valid_eer for e in entries if e.valid_eer is not None]
    best = f"{min(evals):.6f}" if evals else "n/a"
    print(f"trained {bundle.train_step} steps (of {len(entries)}); best validation EER {best}")
    print(f"checkpoint: {out / 'best.ckpt'}")
    return EXIT_OK


def cmd_eval(args):
    from .scoring import roc_report, score_trials

    bundle = pio.load_checkpoint(args.checkpoint)
    data = pio.load_data_spec(args.data, "test")
    trials = pio.read_trials(args.trials)
    scored = score_trials(bundle, data.features, trials)
    pio.write_scores(args.scores_out, scored)
    labels = np.array([s.trial.label for s in scored])
    reports = {}
    for method in ("e2e", "cos", "fused"):
        scores = np.array([getattr(s, f"score_{method}") for s in scored])
        reports[method] = rep = roc_report(scores, labels)
        print(f"{method}: EER={rep.eer:.6f} 1-AUC={rep.one_minus_auc:.6f}")
    pio.write_report(args.report_out, reports)
    if args.roc_out:
        pio.write_roc(args.roc_out, reports)
    return EXIT_OK


def cmd_audit(args):
    from .audit import audit_bundle

    cfg = pio.RunConfig.load(args.config) if args.config else pio.RunConfig()
    bundle = pio.load_checkpoint(args.checkpoint)
    data = pio.load_data_spec(args.data, "test")
    report = audit_bundle(bundle, data.features, cfg.audit_pairs, cfg.audit_triplets,
                          cfg.audit_bins, cfg.seed)
    pio.write_audit(args.out, report)
    for name, stats in report.items():
        s = stats.summary()
        print(f"{name}: n={s['n']} median={s['median']:.6f} mean={s['mean']:.6f} "
              f"zero_fraction={s['zero_fraction']:.4f}")
    return EXIT_OK


def cmd_synth(args):
    from .oracle import synth_generate

    cfg = pio.RunConfig.load(args.spec)
    x, y = synth_generate(cfg.gaussian_spec(), cfg.oracle_n_per_class, cfg.seed)
    pio.write_csv_dataset(args.out, x, y)
    print(f"wrote {len(y)} examples to {args.out}")
    return EXIT_OK


def cmd_trials(args):
    from .numeric import make_rng
    from .scoring import generate_trials

    data = pio.load_data_spec(args.data)
    trials = generate_trials(data.labels, args.mode, n=args.n, target_fraction=args.target_fraction,
                             rng=make_rng(args.seed, "trials"))
    pio.write_trials(args.out, trials)
    n_tgt = sum(t.label for t in trials)
    print(f"wrote {len(trials)} trials ({n_tgt} target) to {args.out}")
    return EXIT_OK


def cmd_oracle(args):
    from .oracle import compare_to_oracle, oracle_eer

    cfg = pio.RunConfig.load(args.spec)
    spec = cfg.gaussian_spec()
    res = oracle_eer(spec, cfg.oracle_n_mc, cfg.seed)
    rows = [("oracle_eer", res.eer), ("oracle_eer_stderr", res.stderr)]
    if args.checkpoint:
        cmp = compare_to_oracle(pio.load_checkpoint(args.checkpoint), spec, cfg.oracle_n_pairs,
                                cfg.seed)
        rows += [("mae", cmp.mae), ("trained_eer", cmp.trained_eer),
                 ("oracle_eer_heldout", cmp.oracle_eer)]
    with pio.atomic_write(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["quantity", "value"])
        for k, v in rows:
            w.writerow([k, format(v, ".17g")])
    for k, v in rows:
        print(f"{k}: {v:.6f}")
    return EXIT_OK


def cmd_embed(args):
    from .models import encode

    bundle = pio.load_checkpoint(args.checkpoint)
    data = pio.load_data_spec(args.data)
    pio.write_csv_dataset(args.out, encode(bundle, data.features), data.labels, prefix="z")
    print(f"wrote {len(data)} embeddings of dim {bundle.enc_cfg.embedding_dim} to {args.out}")
    return EXIT_OK


def cmd_gradcheck(args):
    from .gradcheck import run_suite

    worst = run_suite(args.seeds, args.seed)
    for key, err in worst.items():
        print(f"{key}: max rel error {err:.3e}")
    overall = max(worst.values())
    print(f"max rel error {overall:.3e} ({'ok' if overall < GRADCHECK_TOL else 'FAIL'})")
    return EXIT_OK if overall < GRADCHECK_TOL else EXIT_NUMERIC


COMMANDS = {
    "train": cmd_train, "eval": cmd_eval, "audit": cmd_audit, "synth": cmd_synth,
    "trials": cmd_trials, "oracle": cmd_oracle, "embed": cmd_embed, "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, DimensionError, MetricError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except PseudoDistError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

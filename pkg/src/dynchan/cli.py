"""Command-line entry point: ``dynchan {train,count,bandit-sim,saliency-audit}``.

Exit codes: 0 success, 2 configuration or usage error, 3 numeric failure.
"""

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .arch import get_descriptor, parse_descriptor
from .bandit import ArmEnvironment, simulate_cucb, write_selection_report
from .errors import ConfigError, ConstraintError, DescriptorError, NumericError, ParseError
from .trainer import TrainConfig, run_pipeline

log = logging.getLogger("dynchan")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3


# ---------------------------------------------------------------- config files


def _coerce(name, text, typ):
    try:
        if typ in (int, "int"):
            return int(text)
        if typ in (float, "float"):
            return float(text)
        if typ in (bool, "bool"):
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if typ in (tuple, "tuple"):
            return tuple(float(v) for v in text.split(",") if v.strip())
        return text
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {text!r} as {getattr(typ, '__name__', typ)}") from None


def parse_config_text(text, source="<config>"):
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    types = TrainConfig.field_types()
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {raw.strip()!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in types:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        values[key] = _coerce(key, val, types[key])
    return values


def apply_overrides(cfg, pairs):
    types = TrainConfig.field_types()
    updates = {}
    for key, val in pairs.items():
        key = key.replace("-", "_")
        if key not in types:
            raise ConfigError(f"unknown config key {key!r}")
        updates[key] = val if not isinstance(val, str) else _coerce(key, val, types[key])
    return replace(cfg, **updates)


def manifest_text(cfg):
    lines = ["# dynchan run manifest; rerun with: dynchan train --config <this file>"]
    for key, val in cfg.as_dict().items():
        if isinstance(val, tuple):
            val = ",".join(repr(v) for v in val)
        elif isinstance(val, bool):
            val = int(val)
        lines.append(f"{key} = {val}")
    return "\n".join(lines) + "\n"


def run_id(cfg):
    return hashlib.sha1(manifest_text(cfg).encode()).hexdigest()[:12]


def fresh_dir(root, name):
    root = Path(root)
    path = root / name
    n = 1
    while path.exists():
        path = root / f"{name}-{n}"
        n += 1
    path.mkdir(parents=True)
    return path


# ---------------------------------------------------------------- commands


def cmd_train(args):
    from .model import save_checkpoint

    cfg = TrainConfig()
    if args.config:
        cfg = apply_overrides(cfg, parse_config_text(Path(args.config).read_text(), args.config))
    flag_overrides = {
        "arch": args.arch, "dataset": args.dataset, "p": args.p, "selection": args.selection,
        "pipeline": args.pipeline, "freeze_epoch": args.freeze_epoch, "epochs": args.epochs,
        "finetune_epochs": args.finetune_epochs, "seed": args.seed, "data_dir": args.data_dir,
        "init_strategy": args.init_strategy, "precision": args.precision,
    }
    cfg = apply_overrides(cfg, {k: v for k, v in flag_overrides.items() if v is not None})
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        cfg = apply_overrides(cfg, {k.strip(): v.strip()})
    cfg.validate()

    out = fresh_dir(args.out, run_id(cfg))
    (out / "manifest.txt").write_text(manifest_text(cfg))
    log.info("run directory %s", out)

    rec = run_pipeline(cfg)
    rec.write_step_csv(out / "steps.csv")
    rec.write_epoch_csv(out / "epochs.csv")
    write_selection_report(out / "selection.csv", rec.state, rec.final_mask.registry, rec.final_mask)
    if cfg.saliency_dump:
        with open(out / "saliency.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "l", "k", "raw", "normalized"])
            for row in rec.saliency_rows:
                w.writerow([repr(v) if isinstance(v, float) else v for v in row])
    save_checkpoint(out / "phase_a.ckpt", rec.phase_a_model, rec.final_mask, {"stage": "phase_a"})
    save_checkpoint(out / "compact.ckpt", rec.final_model, None, {"stage": "final"})
    summary = rec.summary()
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(f"run {out.name}: accuracy {summary['final_accuracy']:.4f}  params {summary['params']:,} "
          f"({summary['params_pct_baseline']:.1f}% of baseline)  MACs {summary['macs']:,} "
          f"({summary['macs_pct_baseline']:.1f}% of baseline)  channels "
          f"{summary['active_channels']}/{summary['total_channels']}")
    print(f"outputs: {out}")
    return EXIT_OK


def _shape(text):
    try:
        dims = tuple(int(v) for v in text.lower().split("x"))
    except ValueError:
        raise ConfigError(f"input shape must look like 3x32x32, got {text!r}") from None
    if len(dims) != 3:
        raise ConfigError(f"input shape must have three dimensions, got {text!r}")
    return dims


def cmd_count(args):
    from .surgeon import cost_report

    if args.descriptor:
        desc = parse_descriptor(Path(args.descriptor).read_text(), Path(args.descriptor).stem)
    else:
        shape = _shape(args.input) if args.input else None
        desc = get_descriptor(args.arch, args.classes, shape)
    rep = cost_report(desc, count_bn_macs=args.count_bn)
    print(f"architecture {desc.name}, input {'x'.join(map(str, desc.input_shape))}, "
          f"{desc.num_classes} classes, {sum(desc.conv_widths)} gateable channels")
    print(rep.table())
    print(f"params {rep.params} ({rep.params / 1e6:.3f}M)  MACs {rep.macs} ({rep.macs:.3e})")
    if args.csv:
        rep.write_csv(args.csv)
    return EXIT_OK


def cmd_bandit_sim(args):
    if not 0 < args.cardinality < args.arms:
        raise ConfigError(f"cardinality must be in (0, arms={args.arms})")
    means = np.linspace(1.0 / args.arms, 1.0, args.arms)
    out = fresh_dir(args.out, f"bandit-{args.arms}x{args.cardinality}-{args.steps}")
    true_top = set(int(i) for i in np.argsort(-means, kind="stable")[:args.cardinality])
    rec_rows, freq_rows = [], []
    for seed in range(args.seeds):
        env = ArmEnvironment(means, args.sigma, np.random.default_rng(10_000 + seed))
        tr = simulate_cucb(env, args.arms, args.cardinality, args.steps, seed)
        found = tr.final_top(args.cardinality)
        rec_rows.append((seed, int(found == true_top), len(found & true_top)))
        freq = tr.frequencies(args.arms)
        for a in range(args.arms):
            freq_rows.append((seed, a, repr(float(means[a])), repr(float(freq[a])),
                              int(tr.state.counts[a]), repr(float(tr.state.means[a]))))
    with open(out / "recovery.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "recovered", "overlap"])
        w.writerows(rec_rows)
    with open(out / "frequencies.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "arm", "true_mean", "frequency", "T", "mu_hat"])
        w.writerows(freq_rows)
    rate = np.mean([r[1] for r in rec_rows]) if rec_rows else float("nan")
    print(f"top-{args.cardinality} recovery: {sum(r[1] for r in rec_rows)}/{len(rec_rows)} seeds "
          f"({100 * rate:.1f}%)")
    print(f"outputs: {out}")
    return EXIT_OK


def cmd_saliency_audit(args):
    from scipy.stats import spearmanr

    from .channels import ChannelMask
    from .data import BatchIterator, load_dataset, normalize
    from .model import load_checkpoint
    from .saliency import oracle_saliencies, taylor_saliencies

    model, mask, _ = load_checkpoint(args.checkpoint)
    if mask is None:
        mask = ChannelMask.full(model.registry)
    train = load_dataset(args.dataset, "train", args.data_dir)
    ds = normalize(train, dtype=model.dtype)
    it = BatchIterator(ds, args.batch_size, seed=args.seed)
    ids = mask.active_ids()
    tay = np.zeros(len(ids))
    ora = np.zeros(len(ids))
    rhos = []
    t0 = time.perf_counter()
    for b, (x, y, _) in enumerate(it.epoch()):
        if b >= args.n_batches:
            break
        raw = taylor_saliencies(model, x, y, mask)
        orc = oracle_saliencies(model, x, y, mask)
        tv = np.array([raw[c] for c in ids])
        ov = np.array([orc[c] for c in ids])
        tay += tv
        ora += ov
        rhos.append(float(spearmanr(tv, ov).statistic))
    n = max(len(rhos), 1)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["l", "k", "oracle", "taylor"])
        for c, o, t in zip(ids, ora / n, tay / n):
            w.writerow([c.layer, c.index, repr(float(o)), repr(float(t))])
    mean_rho = float(np.nanmean(rhos)) if rhos else float("nan")
    print(f"spearman per batch: {', '.join(f'{r:.3f}' for r in rhos)}")
    print(f"mean spearman {mean_rho:.4f} over {len(rhos)} batches, {len(ids)} channels "
          f"({time.perf_counter() - t0:.1f}s)")
    if args.threshold is not None and not mean_rho >= args.threshold:
        print(f"below threshold {args.threshold}")
        return 1
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser():
    ap = argparse.ArgumentParser(prog="dynchan", description="CUCB dynamic channel execution")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    tr = sub.add_parser("train", help="run a training pipeline")
    tr.add_argument("--config", help="key = value config file (a run manifest works)")
    tr.add_argument("--out", default="runs", help="root for run directories")
    tr.add_argument("--arch")
    tr.add_argument("--dataset")
    tr.add_argument("--p", type=float)
    tr.add_argument("--selection", choices=["cucb", "random"])
    tr.add_argument("--pipeline", choices=["two-stage", "single-stage"])
    tr.add_argument("--freeze-epoch", type=int)
    tr.add_argument("--epochs", type=int)
    tr.add_argument("--finetune-epochs", type=int)
    tr.add_argument("--seed", type=int)
    tr.add_argument("--init-strategy", choices=["per-channel", "cover"])
    tr.add_argument("--precision", choices=["float32", "float64"])
    tr.add_argument("--data-dir")
    tr.add_argument("--set", action="append", metavar="KEY=VALUE", help="any other config key")
    tr.set_defaults(func=cmd_train)

    ct = sub.add_parser("count", help="parameter and MAC accounting")
    ct.add_argument("--arch", default="vgg19")
    ct.add_argument("--descriptor", help="architecture descriptor file")
    ct.add_argument("--input", help="CxHxW, e.g. 3x32x32")
    ct.add_argument("--classes", type=int, default=10)
    ct.add_argument("--count-bn", action="store_true", help="also count BN multiply-adds")
    ct.add_argument("--csv", help="write per-layer CSV here")
    ct.set_defaults(func=cmd_count)

    bs = sub.add_parser("bandit-sim", help="CUCB on synthetic arms")
    bs.add_argument("--arms", type=int, default=20)
    bs.add_argument("--cardinality", type=int, default=5)
    bs.add_argument("--steps", type=int, default=5000)
    bs.add_argument("--sigma", type=float, default=0.1)
    bs.add_argument("--seeds", type=int, default=20)
    bs.add_argument("--out", default="runs")
    bs.set_defaults(func=cmd_bandit_sim)

    sa = sub.add_parser("saliency-audit", help="Taylor vs. loss-delta saliency on a checkpoint")
    sa.add_argument("--checkpoint", required=True)
    sa.add_argument("--dataset", default="mnist5k")
    sa.add_argument("--data-dir")
    sa.add_argument("--n-batches", type=int, default=5)
    sa.add_argument("--batch-size", type=int, default=64)
    sa.add_argument("--seed", type=int, default=0)
    sa.add_argument("--threshold", type=float)
    sa.add_argument("--out", default="saliency_audit.csv")
    sa.set_defaults(func=cmd_saliency_audit)
    return ap


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ConstraintError, DescriptorError, ParseError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

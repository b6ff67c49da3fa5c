"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 numerical failure
(non-finite values or a tolerance exceeded).
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

import yaml

from .config import Config, ConfigError, load_config, tiny_config
from .data import (DatasetFormatError, SyntheticSpec, generate_synthetic, read_dataset,
                   read_labels, write_dataset, write_labels)
from .downstream import enhance_and_compare
from .evaluate import cluster_report, mask_ablation
from .gradcheck import check_pretrain_gradients
from .temporal import InputError
from .tensor import ContractError
from .train import NumericalError, load_checkpoint, pretrain, save_checkpoint

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _echo(mapping) -> List[str]:
    return [f"# {k}\t{v}" for k, v in mapping.items()]


def _seeds(text: Optional[str], fallback: int) -> List[int]:
    if not text:
        return [fallback]
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"--seeds must be comma-separated integers, got {text!r}") from None


def _config(path, seed) -> Config:
    cfg = load_config(path)
    return cfg.replace(seed=seed) if seed is not None else cfg


def _write(path: Optional[str], text: str) -> None:
    if path:
        Path(path).write_text(text)
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_synthetic(args) -> int:
    spec = SyntheticSpec.load(args.spec) if args.spec else SyntheticSpec().validate()
    if args.seed is not None:
        spec.seed = args.seed
    ds, labels = generate_synthetic(spec)
    out = Path(args.out)
    write_dataset(out, ds)
    labels_path = Path(args.labels) if args.labels else out.with_suffix(".labels")
    write_labels(labels_path, labels)
    out.with_suffix(".spec.yaml").write_text(spec.dump())
    print(f"wrote {out} ({ds.regions} regions x {ds.steps} slots x {ds.features} features), "
          f"labels {labels_path}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    ds = read_dataset(args.data)
    cfg = _config(args.config, args.seed)
    log_fh = open(args.mask_log, "w") if args.mask_log else None

    def mask_log(starts, plans):
        for s, plan in zip(starts, plans):
            log_fh.write(f'{{"start": {int(s)}, "plan": {plan.to_json()}}}\n')

    def progress(rec):
        if not args.quiet:
            print(f"epoch {rec.epoch}\tL_r {rec.recon:.6f}\tL_kl {rec.kl:.6f}\t"
                  f"L {rec.total:.6f}\tval {rec.val_recon:.6f}", file=sys.stderr)

    try:
        result = pretrain(ds.values, ds.time_features(), cfg, progress=progress,
                          mask_log=mask_log if log_fh else None)
    finally:
        if log_fh:
            log_fh.close()
    save_checkpoint(args.out, result, extra={"data": str(args.data)})
    lines = _echo(cfg.to_dict()) + [f"# data\t{args.data}", "epoch\tL_r\tL_kl\tL\tval_L_r\tr_a"]
    lines += [f"{r.epoch}\t{r.recon:.8f}\t{r.kl:.8f}\t{r.total:.8f}\t{r.val_recon:.8f}\t{r.adaptive_ratio:.6f}"
              for r in result.trace]
    trace_path = args.trace or str(Path(args.out).with_suffix(".trace.tsv"))
    Path(trace_path).write_text("\n".join(lines) + "\n")
    print(f"checkpoint {args.out} (best epoch {result.best_epoch}), trace {trace_path}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    overrides = {}
    if args.config:
        if not Path(args.config).exists():
            raise ConfigError(f"config file not found: {args.config}")
        overrides = yaml.safe_load(Path(args.config).read_text()) or {}
    base = tiny_config().to_dict()
    base.update(overrides)
    cfg = Config.from_dict(base)
    seed = args.seed if args.seed is not None else cfg.seed
    res = check_pretrain_gradients(cfg, regions=args.regions, features=args.features,
                                   seed=seed, eps=args.eps)
    ok = res.passed(args.tol)
    print(f"max_rel_error\t{res.max_rel_error:.3e}\nworst_param\t{res.worst}\n"
          f"coordinates\t{res.coordinates}\ntolerance\t{args.tol:.1e}\n"
          f"result\t{'pass' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_eval_clusters(args) -> int:
    ds = read_dataset(args.data)
    labels = read_labels(args.labels) if args.labels else None
    result = load_checkpoint(args.ckpt)
    if labels is not None and len(labels) != ds.regions:
        raise ConfigError(f"label file has {len(labels)} entries for {ds.regions} regions")
    rep = cluster_report(result, ds.values, ds.time_features(), labels)
    table_path = args.out or str(Path(args.ckpt).with_suffix(".clusters.tsv"))
    header = _echo(result.model.config.to_dict()) + [f"# ckpt\t{args.ckpt}", f"# data\t{args.data}"]
    Path(table_path).write_text("\n".join(header) + "\n" + rep.table())
    print(f"purity_cbar\t{rep.purity_cbar:.4f}\npurity_q\t{rep.purity_q:.4f}")
    print("region_cbar\t" + " ".join(map(str, rep.region_cbar)))
    print("region_q\t" + " ".join(map(str, rep.region_q)))
    print(f"table\t{table_path}")
    return EXIT_OK


def cmd_enhance(args) -> int:
    ds = read_dataset(args.data)
    result = load_checkpoint(args.ckpt)
    cfg = load_config(args.config) if args.config else result.model.config
    seed = args.seed if args.seed is not None else cfg.seed
    report = enhance_and_compare(ds.values, ds.time_features(), result, cfg,
                                 seeds=_seeds(args.seeds, seed))
    text = report.to_text() + f"# ckpt\t{args.ckpt}\n# data\t{args.data}\n"
    _write(args.out, text)
    if args.out:
        print(f"raw_mae\t{report.mean('raw'):.6f}\nfused_mae\t{report.mean('fused'):.6f}\nreport\t{args.out}")
    return EXIT_OK


def cmd_mask_ablate(args) -> int:
    ds = read_dataset(args.data)
    cfg = _config(args.config, args.seed)

    def progress(seed, mode, value):
        if not args.quiet:
            print(f"seed {seed}\t{mode}\tmasked_mae {value:.6f}", file=sys.stderr)

    report = mask_ablation(ds.values, ds.time_features(), cfg,
                           seeds=_seeds(args.seeds, cfg.seed), progress=progress)
    _write(args.out, report.to_text() + f"# data\t{args.data}\n")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="stpretrain", description="Spatio-temporal masked pre-training toolkit.")
    p.add_argument("--print-defaults", action="store_true", help="print the default config and exit")
    p.add_argument("--seed", type=int, default=None, help="override the run seed")
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen-synthetic", help="write a planted-cluster dataset and labels")
    g.add_argument("--spec", help="YAML synthetic spec (defaults if omitted)")
    g.add_argument("--out", required=True)
    g.add_argument("--labels", help="label file path (default: <out>.labels)")
    g.set_defaults(func=cmd_gen_synthetic)

    t = sub.add_parser("pretrain", help="masked pre-training")
    t.add_argument("--data", required=True)
    t.add_argument("--config")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--trace", help="loss trace path (default: <out>.trace.tsv)")
    t.add_argument("--mask-log", help="write every mask plan as JSON lines")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_pretrain)

    c = sub.add_parser("gradcheck", help="finite-difference check on the tiny config")
    c.add_argument("--config", help="YAML overrides on top of the tiny config")
    c.add_argument("--eps", type=float, default=1e-6)
    c.add_argument("--tol", type=float, default=1e-4)
    c.add_argument("--regions", type=int, default=6)
    c.add_argument("--features", type=int, default=1)
    c.set_defaults(func=cmd_gradcheck)

    e = sub.add_parser("eval-clusters", help="cluster purity and per-slot assignment table")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--labels")
    e.add_argument("--out", help="table path (default: <ckpt>.clusters.tsv)")
    e.set_defaults(func=cmd_eval_clusters)

    h = sub.add_parser("enhance", help="raw vs fused downstream comparison")
    h.add_argument("--ckpt", required=True)
    h.add_argument("--data", required=True)
    h.add_argument("--config", help="downstream keys are read from here")
    h.add_argument("--seeds", help="comma-separated seeds (default: --seed or config seed)")
    h.add_argument("--out")
    h.set_defaults(func=cmd_enhance)

    m = sub.add_parser("mask-ablate", help="adaptive vs random masking at equal ratio")
    m.add_argument("--data", required=True)
    m.add_argument("--config")
    m.add_argument("--seeds")
    m.add_argument("--out")
    m.add_argument("--quiet", action="store_true")
    m.set_defaults(func=cmd_mask_ablate)

    for sp in (g, t, c, e, h, m):
        sp.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="override the run seed")
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    if args.print_defaults:
        sys.stdout.write(Config().dump())
        return EXIT_OK
    if not getattr(args, "func", None):
        parser.print_usage(sys.stderr)
        print("stpretrain: error: a subcommand is required", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except (NumericalError, InputError, ContractError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, DatasetFormatError, FileNotFoundError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

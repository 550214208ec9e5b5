"""Command-line entry point: ``protomixer <command> [flags]``.

Commands: gen-synthetic, reduce, train, crossval, sweep-k, eval.

Every flag can also come from a ``--config`` file of ``key=value`` lines
(keys are flag names without the leading dashes, ``-`` or ``_`` both
accepted); flags given on the command line win.

Exit codes: 0 success, 2 usage error, 3 data/format error, 4 non-finite
gradients.
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime as dt
import logging
import shlex
import sys
from pathlib import Path

import numpy as np

from . import clustering, data_io
from .errors import (
    ConfigError, DataError, DimensionError, FormatError, NonFiniteGradientError,
    ParameterError,
)
from .model import (
    MixerConfig, load_checkpoint, param_count, param_count_breakdown,
    save_checkpoint,
)
from .training import (
    FoldResult, MetricsReport, TrainConfig, evaluate, fit, run_crossval,
)

log = logging.getLogger("protomixer")

EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

DEFAULT_K_LIST = (1, 2, 4, 5, 6, 8, 10, 12, 16)


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# argument parsing


def _add_model_flags(p):
    g = p.add_argument_group("architecture")
    g.add_argument("--ds", type=int, default=1024, help="token-mixing hidden width D_S")
    g.add_argument("--dc", type=int, default=2048, help="channel-mixing hidden width D_C")
    g.add_argument("--m", type=int, default=12, help="number of Mixer blocks M")
    g.add_argument("--domain-hidden", type=int, default=512)
    g.add_argument("--no-final-norm", action="store_true")
    g.add_argument("--dropout", type=float, default=0.0)


def _add_train_flags(p):
    g = p.add_argument_group("training")
    g.add_argument("--epochs", type=int, default=150)
    g.add_argument("--lr", type=float, default=1e-4)
    g.add_argument("--optimizer", choices=("adam", "sgd_momentum"), default="adam")
    g.add_argument("--momentum", type=float, default=0.9)
    g.add_argument("--alpha", type=float, default=1.0,
                   help="lambda-schedule multiplier")
    g.add_argument("--lambda-offset", action="store_true",
                   help="subtract 1 from the lambda schedule (starts at 0)")
    g.add_argument("--lambda-fixed", type=float, default=None,
                   help="pin lambda to this value for every epoch")
    g.add_argument("--no-adversarial", action="store_true",
                   help="train without the domain branch")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--k", type=int, default=None,
                   help="reduce an embedding manifest to k prototypes first")
    g.add_argument("--profile", action="store_true",
                   help="report parameter count, peak memory and seconds/epoch")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="protomixer", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synthetic", help="write a synthetic MIL corpus")
    p.add_argument("--config")
    p.add_argument("--out")
    p.add_argument("--bags", type=int)
    p.add_argument("--classes", type=int)
    p.add_argument("--n", type=int, help="embedding width N")
    p.add_argument("--domains", type=int, default=None,
                   help="number of shift sites (default min(4, bags))")
    p.add_argument("--patches-min", type=int, default=50)
    p.add_argument("--patches-max", type=int, default=200)
    p.add_argument("--signal-fraction", type=float, default=0.3)
    p.add_argument("--shift", type=float, default=0.0, help="domain_shift_magnitude")
    p.add_argument("--noise", type=float, default=0.0, help="noise_sigma")
    p.add_argument("--shared", type=int, default=3, help="shared background centers")
    p.add_argument("--confound", type=float, default=0.0,
                   help="probability that a bag's site follows its class")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_synthetic,
                   required=("out", "bags", "classes", "n"))

    p = sub.add_parser("reduce", help="k-means reduce every bag to prototypes")
    p.add_argument("--config")
    p.add_argument("--manifest")
    p.add_argument("--k", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_reduce, required=("manifest", "k", "out"))

    for name, func, help_ in (("train", cmd_train, "train on every bag"),
                              ("crossval", cmd_crossval, "stratified k-fold CV")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config")
        p.add_argument("--manifest")
        p.add_argument("--out")
        _add_model_flags(p)
        _add_train_flags(p)
        if name == "crossval":
            p.add_argument("--folds", type=int, default=5)
            p.add_argument("--repeats", type=int, default=1)
            p.add_argument("--jobs", type=int, default=1)
        else:
            p.add_argument("--dry-run", action="store_true",
                           help="resolve config and profile the model without training")
        p.set_defaults(func=func, required=("manifest", "out"))

    p = sub.add_parser("sweep-k", help="cross-validate over several k")
    p.add_argument("--config")
    p.add_argument("--manifest")
    p.add_argument("--out")
    p.add_argument("--k-list", default=",".join(map(str, DEFAULT_K_LIST)))
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--jobs", type=int, default=1)
    _add_model_flags(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_sweep_k, required=("manifest", "out"))

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p.add_argument("--config")
    p.add_argument("--checkpoint")
    p.add_argument("--manifest")
    p.add_argument("--out", default=None)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval, required=("checkpoint", "manifest"))
    return parser


def read_config_file(path) -> dict[str, str]:
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        values[key.strip().lstrip("-").replace("-", "_")] = value.strip()
    return values


def _subparser(parser, command):
    for action in parser._subparsers._group_actions:
        if command in action.choices:
            return action.choices[command]
    raise KeyError(command)


def parse_args(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        try:
            values = read_config_file(args.config)
        except OSError as exc:
            parser.error(f"cannot read config file: {exc}")
        except UsageError as exc:
            parser.error(str(exc))
        sp = _subparser(parser, args.command)
        known = {a.dest: a for a in sp._actions}
        defaults = {}
        for key, raw in values.items():
            if key not in known or key in ("help", "config"):
                parser.error(f"unknown config key {key!r}")
            action = known[key]
            if isinstance(action, argparse._StoreTrueAction):
                defaults[key] = raw.lower() in ("1", "true", "yes", "on")
            else:
                defaults[key] = action.type(raw) if action.type else raw
        sp.set_defaults(**defaults)
        args = parser.parse_args(argv)
    missing = [f"--{r.replace('_', '-')}" for r in args.required
               if getattr(args, r) is None]
    if missing:
        parser.error("missing required flag(s): " + ", ".join(missing))
    return args


# --------------------------------------------------------------------------
# run directory helpers


def resolved_config(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items())
            if k not in ("func", "required", "verbose")}


def write_record(out: Path, argv, args, artifacts, input_hash: str | None,
                 started: dt.datetime) -> None:
    lines = [
        f"command: protomixer {' '.join(shlex.quote(a) for a in argv)}",
        f"started: {started.isoformat(timespec='seconds')}",
        f"finished: {dt.datetime.now().isoformat(timespec='seconds')}",
        f"seed: {getattr(args, 'seed', '')}",
        f"input_sha256: {input_hash or ''}",
        "config:",
    ]
    lines += [f"  {k} = {v}" for k, v in resolved_config(args).items()]
    lines.append("artifacts:")
    lines += [f"  {a}" for a in artifacts]
    (out / "record.txt").write_text("\n".join(lines) + "\n")


def _fmt(x) -> str:
    if isinstance(x, float):
        return repr(x)
    return str(x)


def write_csv(path: Path, header, rows) -> None:
    lines = [",".join(header)]
    lines += [",".join(_fmt(v) for v in row) for row in rows]
    path.write_text("\n".join(lines) + "\n")


def metric_columns(num_classes: int, profile: bool):
    cols = ["repeat", "fold", "n_eval", "macro_f1", "auroc"]
    cols += [f"f1_{c}" for c in range(num_classes)]
    cols += ["absent_classes"]
    if profile:
        cols += ["param_count", "peak_resident_bytes", "seconds_per_epoch"]
    return cols


def metric_row(rep: MetricsReport, repeat, fold, profile: bool):
    row = [repeat, fold, int(sum(rep.support)), rep.macro_f1, rep.auroc]
    row += rep.f1
    row.append(" ".join(map(str, rep.absent_classes)))
    if profile and rep.profile is not None:
        row += [rep.profile.param_count, rep.profile.peak_resident_bytes,
                rep.profile.seconds_per_epoch]
    return row


def load_prototype_bags(manifest_path, k, seed):
    manifest = data_io.read_manifest(manifest_path)
    bags = data_io.load_dataset(manifest_path)
    if not bags:
        raise DataError("no bags in manifest")
    if manifest.kind == "prototype":
        if k is not None and bags[0].k != k:
            raise DimensionError(f"manifest holds k={bags[0].k} prototypes, --k={k}")
        widths = {b.prototypes.shape for b in bags}
        if len(widths) != 1:
            raise DataError(f"prototype tables disagree in shape: {sorted(widths)}")
        return bags, manifest.num_classes
    if k is None:
        raise UsageError("embedding manifest given; pass --k to reduce it first")
    return [clustering.reduce_bag(b, k, seed) for b in bags], manifest.num_classes


def model_base(args) -> MixerConfig:
    return MixerConfig(k=1, N=1, D_S=args.ds, D_C=args.dc, M=args.m,
                       domain_hidden=args.domain_hidden, dropout_rate=args.dropout,
                       final_norm=not args.no_final_norm)


def train_config(args, **extra) -> TrainConfig:
    return TrainConfig(
        epochs=args.epochs, learning_rate=args.lr, optimizer=args.optimizer,
        momentum=args.momentum, alpha=args.alpha, lambda_offset=args.lambda_offset,
        lambda_override=args.lambda_fixed, adversarial=not args.no_adversarial,
        seed=args.seed, dropout_rate=args.dropout, **extra)


def profile_text(cfg: MixerConfig, profile=None) -> str:
    parts = param_count_breakdown(cfg)
    lines = [
        f"param_count: {param_count(cfg)}",
        f"  ({param_count(cfg) / 1e6:.2f} M; includes all MLP biases, "
        f"{'final norm, ' if cfg.final_norm else ''}block layer-norm gains/biases "
        f"and the domain branch)",
    ]
    lines += [f"  {k}: {v}" for k, v in parts.items()]
    k, N, M = cfg.k, cfg.N, cfg.M
    lines += [
        f"    token_mixing (W1, b1, W2, b2): {M * (2 * cfg.D_S * k + cfg.D_S + k)}",
        f"    channel_mixing (W3, b3, W4, b4): {M * (2 * cfg.D_C * N + cfg.D_C + N)}",
        f"    block layer_norms: {M * 4 * N}",
    ]
    lines.append(f"  without domain branch: {param_count(cfg) - parts['domain_branch']}")
    lines.append("config: " + ", ".join(f"{f.name}={getattr(cfg, f.name)}"
                                        for f in dataclasses.fields(cfg)))
    if profile is not None:
        lines.append(f"peak_resident_bytes: {profile.peak_resident_bytes}")
        lines.append(f"seconds_per_epoch: {profile.seconds_per_epoch:.6f}")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# commands


def cmd_gen_synthetic(args, argv):
    domains = args.domains if args.domains is not None else min(4, args.bags)
    spec = data_io.SyntheticSpec(
        num_bags=args.bags, num_classes=args.classes, num_domains=domains,
        patches_min=args.patches_min, patches_max=args.patches_max, N=args.n,
        signal_fraction=args.signal_fraction, domain_shift_magnitude=args.shift,
        noise_sigma=args.noise, seed=args.seed, num_shared=args.shared,
        site_class_confound=args.confound)
    out = Path(args.out)
    started = dt.datetime.now()
    manifest, _ = data_io.gen_synthetic(spec, out)
    digest = data_io.manifest_hash(manifest)
    write_record(out, argv, args, [manifest.name, "bags/", "truth/"], digest, started)
    print(f"wrote {spec.num_bags} bags to {out} (sha256 {digest[:16]})")


def cmd_reduce(args, argv):
    out = Path(args.out)
    started = dt.datetime.now()
    digest = data_io.manifest_hash(args.manifest)
    rows = clustering.reduce_dataset(args.manifest, args.k, args.seed, out)
    flagged = [r for r in rows if r.flag]
    write_record(out, argv, args, ["manifest.tsv", "prototypes/", "report.csv"],
                 digest, started)
    print(f"reduced {len(rows) - len([r for r in flagged if r.flag.startswith('error')])}"
          f"/{len(rows)} bags to k={args.k}; {len(flagged)} flagged")


def _summary(reports) -> str:
    f1 = np.array([r.macro_f1 for r in reports])
    auc = np.array([r.auroc for r in reports])
    return (f"macro-F1 {f1.mean():.4f} ± {f1.std():.4f}   "
            f"AUROC {np.nanmean(auc):.4f} ± {np.nanstd(auc):.4f}   "
            f"({len(reports)} runs)")


def cmd_train(args, argv):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    started = dt.datetime.now()
    digest = data_io.manifest_hash(args.manifest)
    bags, num_classes = load_prototype_bags(args.manifest, args.k, args.seed)
    tcfg = train_config(args)
    artifacts = []
    if args.dry_run:
        from .training import model_config_for
        cfg = model_config_for(bags, model_base(args), num_classes, args.dropout)
        (out / "profile.txt").write_text(profile_text(cfg))
        print(profile_text(cfg), end="")
        write_record(out, argv, args, ["profile.txt"], digest, started)
        return
    result = fit(bags, model_base(args), tcfg, num_classes)
    save_checkpoint(result.params, result.config, out / "checkpoint.pmx")
    rep = evaluate(result.params, result.config, bags)
    rep.profile = result.profile
    write_csv(out / "metrics.csv", metric_columns(num_classes, args.profile),
              [metric_row(rep, 0, -1, args.profile)])
    write_csv(out / "losses.csv", ("epoch", "class_loss", "domain_loss", "lambda"),
              result.losses)
    artifacts += ["checkpoint.pmx", "metrics.csv", "losses.csv"]
    if args.profile:
        text = profile_text(result.config, result.profile)
        (out / "profile.txt").write_text(text)
        artifacts.append("profile.txt")
        print(text, end="")
    write_record(out, argv, args, artifacts, digest, started)
    print(f"train-set {_summary([rep])}")


def _crossval_outputs(out: Path, rows: list[FoldResult], num_classes, profile,
                      prefix=""):
    write_csv(out / f"{prefix}metrics.csv", metric_columns(num_classes, profile),
              [metric_row(r.metrics, r.repeat, r.fold, profile) for r in rows])
    loss_rows = [(r.repeat, r.fold) + tuple(l) for r in rows for l in r.metrics.losses]
    write_csv(out / f"{prefix}losses.csv",
              ("repeat", "fold", "epoch", "class_loss", "domain_loss", "lambda"),
              loss_rows)


def cmd_crossval(args, argv):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    started = dt.datetime.now()
    digest = data_io.manifest_hash(args.manifest)
    bags, num_classes = load_prototype_bags(args.manifest, args.k, args.seed)
    tcfg = train_config(args, folds=args.folds, repeats=args.repeats)
    report = run_crossval(bags, model_base(args), tcfg, num_classes, jobs=args.jobs)
    _crossval_outputs(out, report.rows, num_classes, args.profile)
    artifacts = ["metrics.csv", "losses.csv"]
    if args.profile:
        from .training import model_config_for
        cfg = model_config_for(bags[: len(report.rows[0].train_ids)], model_base(args),
                               num_classes, args.dropout)
        (out / "profile.txt").write_text(profile_text(cfg, report.rows[0].metrics.profile))
        artifacts.append("profile.txt")
    write_record(out, argv, args, artifacts, digest, started)
    print(_summary([r.metrics for r in report.rows]))


def cmd_sweep_k(args, argv):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    started = dt.datetime.now()
    try:
        k_list = [int(k) for k in args.k_list.split(",") if k.strip()]
    except ValueError as exc:
        raise UsageError(f"bad --k-list: {exc}") from exc
    if not k_list or min(k_list) < 1:
        raise UsageError("--k-list needs positive integers")
    digest = data_io.manifest_hash(args.manifest)
    manifest = data_io.read_manifest(args.manifest)
    if manifest.kind != "embedding":
        raise UsageError("sweep-k needs an embedding manifest")
    raw = data_io.load_dataset(args.manifest)
    tcfg = train_config(args, folds=args.folds, repeats=args.repeats)
    table = []
    for k in k_list:
        bags = [clustering.reduce_bag(b, k, args.seed) for b in raw]
        degenerate = sum(b.degenerate for b in bags)
        report = run_crossval(bags, model_base(args), tcfg, manifest.num_classes,
                              jobs=args.jobs)
        _crossval_outputs(out, report.rows, manifest.num_classes, False,
                          prefix=f"k{k}_")
        table.append((k, report.macro_f1_mean, report.macro_f1_std,
                      report.auroc_mean, report.auroc_std, len(report.rows),
                      degenerate))
        print(f"k={k:3d}  {_summary([r.metrics for r in report.rows])}")
    write_csv(out / "sweep.csv", ("k", "macro_f1_mean", "macro_f1_std", "auroc_mean",
                                  "auroc_std", "runs", "degenerate_bags"), table)
    write_record(out, argv, args, ["sweep.csv"] + [f"k{k}_metrics.csv" for k in k_list],
                 digest, started)


def cmd_eval(args, argv):
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    params, cfg = load_checkpoint(ckpt)
    bags, num_classes = load_prototype_bags(args.manifest, args.k, args.seed)
    shape = bags[0].prototypes.shape
    if shape != (cfg.k, cfg.N):
        raise DimensionError(
            f"checkpoint expects k={cfg.k} x N={cfg.N} prototypes, "
            f"manifest has k={shape[0]} x N={shape[1]}")
    if num_classes != cfg.num_classes:
        raise DimensionError(f"checkpoint has {cfg.num_classes} classes, "
                             f"manifest {num_classes}")
    rep = evaluate(params, cfg, bags)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        started = dt.datetime.now()
        write_csv(out / "metrics.csv", metric_columns(num_classes, False),
                  [metric_row(rep, 0, -1, False)])
        write_record(out, argv, args, ["metrics.csv"],
                     data_io.manifest_hash(args.manifest), started)
    print(_summary([rep]))


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args, argv)
    except UsageError as exc:
        print(f"protomixer {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteGradientError as exc:
        print(f"protomixer: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, FormatError, DimensionError, ConfigError, ParameterError,
            OSError) as exc:
        print(f"protomixer: {exc}", file=sys.stderr)
        return EXIT_DATA
    return 0


if __name__ == "__main__":
    sys.exit(main())

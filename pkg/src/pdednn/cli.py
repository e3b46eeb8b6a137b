"""Command-line entry point ``pdednn``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 missing artifact.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import pipeline
from .errors import ConfigError, DomainError, MissingArtifactError, NumericalError, PdeDnnError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_MISSING = 0, 2, 3, 4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _config(args) -> pipeline.ExperimentConfig:
    if args.config:
        cfg = pipeline.ExperimentConfig.from_json(args.config)
    else:
        cfg = pipeline.ExperimentConfig.defaults(args.variant)
    if args.seed is not None:
        cfg.seed = args.seed
    if getattr(args, "epochs", None) is not None:
        cfg.epochs = args.epochs
    if getattr(args, "q_a", None) is not None:
        if cfg.variant == "nonaffine":
            cfg.q_a = args.q_a
            if args.q_a not in cfg.q_a_list:
                cfg.q_a_list = sorted(set([*cfg.q_a_list, args.q_a]))
        elif args.q_a != 3:
            raise ConfigError("the affine variant has exactly 3 matrix terms")
    return cfg.validate()


def _print_rows(rows):
    for k, v in rows:
        print(f"{k},{v}")


def cmd_offline(args):
    cfg = _config(args)
    _, meta = pipeline.run_offline(cfg, args.out)
    if args.export_csv:
        pipeline.export_dataset_csv(args.out)
    print(f"offline artifacts written to {pipeline.offline_dir(args.out)} (N={meta['n_rb']}, "
          f"augmentation skipped {meta['augment_skipped']})")


def cmd_train(args):
    cfg = _config(args)
    _, history, tag = pipeline.run_train(cfg, args.out, q_a=args.q_a)
    last = history[-1] if history else None
    msg = f"checkpoint {tag}"
    if last is not None:
        msg += f": epoch {last.epoch} train_mae={last.train_mae:.3e} val_mae={last.val_mae:.3e}"
    print(msg)


def cmd_eval(args):
    cfg = _config(args)
    rep = pipeline.run_eval(cfg, args.out, q_a=args.q_a)
    _print_rows(rep.rows())


def cmd_rb_baseline(args):
    cfg = _config(args)
    qs = [args.q_a] if args.q_a is not None else None
    for q, r in pipeline.run_rb_baseline(cfg, args.out, qs).items():
        print(f"q_a={q},mean={r['mean']:.6e},median={r['median']:.6e}")


def cmd_mlp_baseline(args):
    cfg = _config(args)
    kinds = args.kinds.split(",") if args.kinds else ("mlp", "mlp_mu", "mlp_out")
    for kind, rep in pipeline.run_baselines_mlp(cfg, args.out, kinds).items():
        print(f"[{kind}]")
        _print_rows(rep.rows())


def cmd_gradcheck(args):
    cfg = _config(args)
    rep = pipeline.run_gradcheck(cfg, args.out, q_a=args.q_a, tolerance=args.tolerance)
    print(f"max_rel_error={rep.max_rel_error:.3e} checked={rep.n_checked} flagged={rep.n_flagged}")
    for k, v in rep.per_group.items():
        print(f"  {k}: {v:.3e}")
    if not rep.passed:
        print(f"gradient check failed (tolerance {rep.tolerance:g})", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


def cmd_fom_solve(args):
    cfg = _config(args)
    try:
        mu = [float(v) for v in args.mu.split(",")]
    except ValueError as e:
        raise ConfigError(f"--mu must be comma-separated floats: {e}") from e
    _, meta = pipeline.run_fom_solve(cfg, mu, args.out)
    print(f"field written to {args.out} (relative residual {meta['residual']:.2e})")


def build_parser():
    p = _Parser(prog="pdednn", description="PDE-aware neural networks with a reduced-basis output layer.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help_, q_a=True, epochs=False):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", help="experiment config (JSON)")
        s.add_argument("--variant", default="advdiff", choices=pipeline.VARIANTS,
                       help="defaults to use when --config is absent")
        s.add_argument("--out", required=True, help="experiment directory")
        s.add_argument("--seed", type=int)
        if q_a:
            s.add_argument("--q-a", dest="q_a", type=int)
        if epochs:
            s.add_argument("--epochs", type=int)
        s.set_defaults(func=fn)
        return s

    s = add("offline", cmd_offline, "snapshots, POD, (M)DEIM, affine sets and dataset")
    s.add_argument("--export-csv", action="store_true", help="also write offline/dataset.csv")
    add("train", cmd_train, "train a PDE-DNN", epochs=True)
    add("eval", cmd_eval, "evaluate a trained PDE-DNN on the test set")
    add("rb-baseline", cmd_rb_baseline, "standalone RB + MDEIM errors per Q_a")
    s = add("mlp-baseline", cmd_mlp_baseline, "train and evaluate the plain MLP baselines", q_a=False, epochs=True)
    s.add_argument("--kinds", help="comma-separated subset of mlp,mlp_mu,mlp_out")
    s = add("gradcheck", cmd_gradcheck, "finite-difference check of the network gradient")
    s.add_argument("--tolerance", type=float, default=1e-5)
    s = add("fom-solve", cmd_fom_solve, "one full-order solve", q_a=False)
    s.add_argument("--mu", required=True, help="comma-separated parameter values (use --mu=-1,2 when the first is negative)")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        code = args.func(args)
    except (ConfigError, DomainError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifactError as e:
        print(f"missing artifact: {e}", file=sys.stderr)
        return EXIT_MISSING
    except (NumericalError, ArithmeticError) as e:
        stage = getattr(e, "stage", None)
        prefix = f"numerical failure in stage {stage}" if stage else "numerical failure"
        print(f"{prefix}: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except PdeDnnError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK if code is None else code


if __name__ == "__main__":
    sys.exit(main())

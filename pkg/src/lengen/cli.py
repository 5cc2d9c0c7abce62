"""Command-line entry point: ``lengen <verb> ...``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import datagen, harness, posenc
from .datagen import DomainSpec, SamplerSpec
from .harness import StageError, export_csv, stage
from .model import load_checkpoint
from .theory import flow as th_flow

log = logging.getLogger("lengen")


def _out(args, default_name: str) -> Path:
    if args.out:
        return Path(args.out)
    return harness.default_out_dir() / default_name


def cmd_gen(args):
    with stage("gen"):
        spec = DomainSpec(l=args.l, l_s=args.ls, operation=args.op, multiplier_len=args.mult_len)
        sampler = SamplerSpec.parse(args.sampler, seed=args.seed)
        samples = datagen.dataset_stream(spec, sampler, args.count, np.random.default_rng(args.seed))
        path = _out(args, f"{args.op}_l{args.l}_ls{args.ls}.jsonl")
        path.parent.mkdir(parents=True, exist_ok=True)
        n = datagen.write_dataset(path, samples, header_extra={"spec": datagen.spec_dict(spec), "sampler": args.sampler,
                                                                "seed": args.seed})
    print(f"wrote {n} samples to {path}")


def cmd_stats(args):
    with stage("stats"):
        if args.kind == "cascade":
            rows = harness.cascade_dist(args.digits, args.samples, args.seed)
        elif args.kind == "muldep":
            rows = harness.mul_dep_dist(args.digits, args.samples, args.mult_len, args.seed)
        else:
            spec = DomainSpec(l=args.l, l_s=args.ls, operation=args.op, multiplier_len=args.mult_len)
            rows = harness.complexity_hist(spec, args.sampler, args.samples, args.seed)
        path = _out(args, f"stats_{args.kind}.csv")
        export_csv(harness.STATS_HEADER, rows, path)
    for r in rows:
        print(f"{r[0]:>15} {r[1]:>3} {r[2]:>10} {r[3]:.6g} {r[4]:.6g}")


def _load_config(args) -> harness.ExperimentConfig:
    with stage("config"):
        if args.config:
            cfg = harness.ExperimentConfig.load(args.config)
        else:
            cfg = harness.load_preset(args.preset)
        if args.seed is not None:
            cfg.seed = args.seed
        if getattr(args, "steps", None) is not None:
            cfg.train.steps = args.steps
        return cfg.validate()


def cmd_train(args):
    cfg = _load_config(args)
    if cfg.theory is not None:
        for kind, res in harness.run_theory_config(cfg, _out(args, cfg.name)).items():
            print(f"{kind}: mean test loss {float(np.mean(res.test_loss)):.6g}")
        return
    res = harness.run_experiment(cfg, _out(args, cfg.name))
    print(f"best checkpoint: step {res.best_checkpoint}")
    for L in cfg.eval_lengths:
        print(f"length {L}: exact match {res.metrics.get(f'len{L}'):.4f}")


def cmd_eval(args):
    with stage("eval"):
        spec = DomainSpec(l=args.l, l_s=args.ls, operation=args.op, multiplier_len=args.mult_len)
        table = harness.evaluate_checkpoint(args.checkpoint, spec, args.lengths, args.size, args.seed or 0)
        path = _out(args, "eval.csv")
        table.to_csv(path)
    for r in table.rows:
        print(f"{r[1]}: {r[3]:.4f} (n={r[4]})")


def _theory_task(args):
    rng = np.random.default_rng(args.seed or 0)
    return harness.theory_task({"n": args.n, "n1": args.n1, "d": args.d, "alpha": args.alpha, "beta": args.beta,
                                "m": args.m, "w": args.w}, rng)


def cmd_theory(args):
    out = _out(args, f"theory_{args.action}")
    if args.action == "flow":
        with stage("theory"):
            task = harness.theory_task({"n": args.n, "n1": 1, "d": args.d, "alpha": args.alpha, "beta": args.beta,
                                        "w": args.w, "random_theta": False})
            off = args.off if args.off is not None else 1.0 / np.sqrt(args.d)
            init = th_flow.GramSeries.initial(args.n, args.a0, off)
            series = th_flow.flow_integrate(init, task, th_flow.FlowConfig(dt=args.dt, steps=args.steps),
                                            record_every=args.record_every)
        with stage("export"):
            header, rows = harness.flow_table(series)
            path = export_csv(header, rows, out if out.suffix else out / "flow.csv")
        print(f"A_0 -> {series.A[0]:.6g}; wrote {path}")
        return
    task = _theory_task(args)
    flow = th_flow.FlowConfig(steps=args.steps, eta=args.eta, epsilon=args.eps, seed=args.seed or 0)
    res = harness.run_theory(args.model, task, flow, log_every=args.log_every, test_mode=args.test_mode,
                             out_dir=out if args.action == "run" else None)
    if args.action == "gram":
        with stage("export"):
            path = export_csv(harness.gram_header(task.n), harness.gram_rows(res), out if out.suffix else out / "gram.csv")
        print(f"wrote {path}")
        return
    print(f"final train loss {res.losses[-1][1] if res.losses else float('nan'):.6g}; "
          f"mean test loss {float(np.mean(res.test_loss)):.6g}; wrote {out}")


def cmd_export(args):
    with stage("export"):
        cfg, params, _, _ = load_checkpoint(args.checkpoint)
        if not cfg.pe.pairwise:
            raise ValueError(f"PE variant {cfg.pe.variant!r} has no pairwise table to export")
        tables = [params[k] for k in sorted(k for k in params if k == "pe" or k.startswith("pe."))]
        prefix = _out(args, "positional_map")
        prefix.parent.mkdir(parents=True, exist_ok=True)
        paths = posenc.export_positional_map(tables, cfg.pe, prefix)
    print("\n".join(paths))


def build_parser() -> argparse.ArgumentParser:
    glob = argparse.ArgumentParser(add_help=False)
    glob.add_argument("--seed", type=int, default=None)
    glob.add_argument("--out", default=None, help=f"output path (default under ${harness.OUT_ENV} or ./lengen_out)")
    glob.add_argument("--config", default=None, help="experiment YAML file")
    glob.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="lengen", description="Length-generalisation laboratory for arithmetic transformers.")
    sub = p.add_subparsers(dest="verb", required=True)

    def domain(sp):
        sp.add_argument("--op", choices=("add", "mul"), default="add")
        sp.add_argument("--l", type=int, default=5)
        sp.add_argument("--ls", type=int, default=2)
        sp.add_argument("--mult-len", type=int, default=1)

    g = sub.add_parser("gen", parents=[glob], help="write a JSONL training set")
    domain(g)
    g.add_argument("--sampler", default="uniform", help="uniform | cuniform | mix:p")
    g.add_argument("--count", type=int, default=1000)
    g.set_defaults(func=cmd_gen, seed=0)

    s = sub.add_parser("stats", parents=[glob], help="Monte-Carlo carry statistics")
    s.add_argument("kind", choices=("cascade", "muldep", "complexity"))
    s.add_argument("--digits", type=int, default=5)
    s.add_argument("--samples", type=int, default=100_000)
    s.add_argument("--sampler", default="uniform")
    domain(s)
    s.set_defaults(func=cmd_stats, seed=0)

    t = sub.add_parser("train", parents=[glob], help="train and evaluate a toy model")
    t.add_argument("--preset", default="toy_add_rpe", help=f"named preset ({', '.join(harness.preset_names())})")
    t.add_argument("--steps", type=int, default=None, help="override the training budget")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[glob], help="evaluate a checkpoint at several lengths")
    e.add_argument("checkpoint")
    domain(e)
    e.add_argument("--lengths", type=int, nargs="+", default=[2, 3, 4])
    e.add_argument("--size", type=int, default=500)
    e.set_defaults(func=cmd_eval)

    th = sub.add_parser("theory", parents=[glob], help="linear-attention theory simulator")
    th.add_argument("action", choices=("run", "flow", "gram"))
    th.add_argument("--model", choices=("ape", "ape_aug", "rpe"), default="rpe")
    th.add_argument("--n", type=int, default=51)
    th.add_argument("--n1", type=int, default=10)
    th.add_argument("--d", type=int, default=200)
    th.add_argument("--alpha", type=float, default=2.0)
    th.add_argument("--beta", type=float, default=0.5)
    th.add_argument("--m", type=int, default=1)
    th.add_argument("--w", type=int, default=0)
    th.add_argument("--steps", type=int, default=20000)
    th.add_argument("--eta", type=float, default=0.01)
    th.add_argument("--eps", type=float, default=None)
    th.add_argument("--dt", type=float, default=None)
    th.add_argument("--a0", type=float, default=0.5, help="initial diagonal for flow")
    th.add_argument("--off", type=float, default=None, help="initial off-diagonal for flow (default 1/sqrt(d))")
    th.add_argument("--record-every", type=int, default=10)
    th.add_argument("--log-every", type=int, default=100)
    th.add_argument("--test-mode", choices=("analytic", "monte_carlo"), default="analytic")
    th.set_defaults(func=cmd_theory)

    x = sub.add_parser("export", parents=[glob], help="dump the pairwise positional tables of a checkpoint")
    x.add_argument("checkpoint")
    x.set_defaults(func=cmd_export)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # anything that escaped a stage wrapper
        print(f"error: [{args.verb}] {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Command-line front end.

Subcommands: gen-data, train, eval, gradcheck, compare, plot.  Exit
status is 0 on success, 1 on a usage error (printed to stderr), 2 on a
runtime failure.  All randomness is controlled by --seed; the only
environment dependence is MCD_LAB_THREADS for the compare fan-out.
"""

from __future__ import annotations

import argparse
import os
import sys

from . import evalsuite, gradcheck, model, plotting, synth, trainer
from .errors import ConfigError, McdLabError, UsageError
from .rng import derive_seed


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> _Parser:
    parser = _Parser(prog="mcd-lab", description=__doc__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate a synthetic image-caption dataset")
    p.add_argument("--pairs", type=int, default=5000)
    p.add_argument("--noise-rate", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train one objective on a dataset file")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--data", required=True, help="dataset file from gen-data")
    p.add_argument("--out", default="run", help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--objective", choices=trainer.OBJECTIVES)
    p.add_argument("--steps", type=int, help="override total_steps")
    p.add_argument("--checkpoint-every", type=int, default=None)
    p.add_argument("--resume", help="checkpoint file to continue from")
    p.add_argument("overrides", nargs="*", metavar="KEY=VALUE",
                   help="config overrides applied after the file")

    p = sub.add_parser("eval", help="retrieval and misalignment metrics for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="eval dataset file")
    p.add_argument("--encoder", choices=trainer.ENCODERS, default="student")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("gradcheck", help="finite-difference check of every gradient")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--reps", type=int, default=20)

    p = sub.add_parser("compare", help="train objectives side by side, emit CSV + chart")
    p.add_argument("--config", help="key=value config file for the shared settings")
    p.add_argument("--objectives", default="clip,clip_aug,kl_distill,mcd")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--train-pairs", type=int, default=5000)
    p.add_argument("--eval-pairs", type=int, default=500)
    p.add_argument("--out", default="comparison")
    p.add_argument("overrides", nargs="*", metavar="KEY=VALUE")

    p = sub.add_parser("plot", help="render a metrics or comparison CSV to SVG")
    p.add_argument("--in", dest="in_path", required=True)
    p.add_argument("--out", required=True)

    return parser


def _build_config(args) -> trainer.TrainConfig:
    cfg = trainer.TrainConfig()
    if getattr(args, "config", None):
        cfg = trainer.load_config(args.config, base=cfg)
    for pairstr in getattr(args, "overrides", []) or []:
        if "=" not in pairstr:
            raise UsageError(f"override must be KEY=VALUE, got {pairstr!r}")
        key, value = pairstr.split("=", 1)
        cfg = trainer.apply_override(cfg, key.strip(), value.strip())
    if getattr(args, "seed", None) is not None:
        cfg = trainer.apply_override(cfg, "seed", str(args.seed))
    if getattr(args, "objective", None):
        cfg = trainer.apply_override(cfg, "objective", args.objective)
    if getattr(args, "steps", None):
        cfg = trainer.apply_override(cfg, "total_steps", str(args.steps))
    cfg.validate()
    return cfg


def _cmd_gen_data(args) -> int:
    records = synth.generate_dataset(args.pairs, args.seed)
    if args.noise_rate > 0:
        records = synth.inject_noise(records, args.noise_rate,
                                     derive_seed(args.seed, 0x4015E))
    synth.save_dataset(records, args.out)
    flagged = sum(r.noisy for r in records)
    print(f"wrote {len(records)} pairs ({flagged} noise-flagged) to {args.out}")
    return 0


def _cmd_train(args) -> int:
    cfg = _build_config(args)
    dataset = synth.load_dataset(args.data)
    os.makedirs(args.out, exist_ok=True)
    log_path = os.path.join(args.out, "metrics.csv")
    ckpt_path = os.path.join(args.out, "checkpoint.bin")

    resumed = None
    if args.resume:
        resumed = trainer.Trainer(cfg, dataset)
        resumed.load_checkpoint(args.resume)
    tr, reports = trainer.run_training(
        cfg, dataset, log_path=log_path, checkpoint_path=ckpt_path,
        checkpoint_every=args.checkpoint_every, trainer=resumed)
    last = reports[-1] if reports else None
    if last:
        print(f"finished at step {tr.schedule.step}: total={last.losses['total']:.6f}")
    print(f"metrics: {log_path}\ncheckpoint: {ckpt_path}")
    return 0


def _cmd_eval(args) -> int:
    tensors, sched, seed = model.read_checkpoint(args.checkpoint)
    params = {k.split("/", 1)[1]: v for k, v in tensors.items()
              if k.startswith("student/")}
    teacher = {k.split("/", 1)[1]: v for k, v in tensors.items()
               if k.startswith("teacher/")}
    pairs = synth.load_dataset(args.data)
    rep = evalsuite.retrieval_eval(params, teacher, pairs, encoder=args.encoder)
    align = evalsuite.misalignment_correlation(params, teacher, pairs,
                                               seed=args.seed, encoder=args.encoder)
    for k in evalsuite.RECALL_KS:
        print(f"recall@{k}: image->text {rep.recall_i2t[k]:.4f}  "
              f"text->image {rep.recall_t2i[k]:.4f}")
    print(f"median rank: image->text {rep.median_rank_i2t:.1f}  "
          f"text->image {rep.median_rank_t2i:.1f}")
    print(f"misalignment spearman rho: {align.rho:.4f} over {align.count} pairs")
    return 0


def _cmd_gradcheck(args) -> int:
    results = gradcheck.run_all(seed=args.seed, reps=args.reps)
    failed = False
    for name, worst in results:
        ok = worst <= gradcheck.TOLERANCE
        failed |= not ok
        print(f"{name:22s} worst rel err {worst:.3e}  {'PASS' if ok else 'FAIL'}")
    return 2 if failed else 0


def _cmd_compare(args) -> int:
    cfg = _build_config(args)
    objectives = [o.strip() for o in args.objectives.split(",") if o.strip()]
    for o in objectives:
        if o not in trainer.OBJECTIVES:
            raise UsageError(f"unknown objective {o!r}")
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    threads = int(os.environ.get("MCD_LAB_THREADS", "1"))
    if threads < 1:
        raise UsageError("MCD_LAB_THREADS must be a positive integer")

    train_set = synth.generate_dataset(args.train_pairs, cfg.seed)
    if cfg.noise_rate > 0:
        train_set = synth.inject_noise(train_set, cfg.noise_rate,
                                       derive_seed(cfg.seed, 0x4015E))
    eval_set = synth.generate_dataset(args.eval_pairs, derive_seed(cfg.seed, 0xEFA1))

    os.makedirs(args.out, exist_ok=True)
    csv_path = os.path.join(args.out, "comparison.csv")
    svg_path = os.path.join(args.out, "comparison.svg")
    rows, summary = evalsuite.compare_objectives(
        cfg, objectives, seeds, train_set, eval_set,
        csv_path=csv_path, svg_path=svg_path, threads=threads)
    for o in objectives:
        s = summary[o]
        print(f"{o:12s} recall@1 i2t {s['recall1_i2t_mean']:.4f} "
              f"+/- {s['recall1_i2t_std']:.4f}   rho {s['rho_mean']:.4f} "
              f"+/- {s['rho_std']:.4f}")
    print(f"rows: {csv_path}\nchart: {svg_path}")
    return 0


def _cmd_plot(args) -> int:
    plotting.plot_csv(args.in_path, args.out)
    print(f"wrote {args.out}")
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "gradcheck": _cmd_gradcheck,
    "compare": _cmd_compare,
    "plot": _cmd_plot,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            return 1
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except McdLabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 2


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()

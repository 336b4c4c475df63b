"""``pskill`` command-line entry point.

Subcommands: gen-data, train, eval, sweep, ablate, render, grad-check.
Every subcommand accepts --seed, --profile, --config and --jobs; any other
RunConfig field can be overridden with ``--set key=value``.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import __version__, diagnostics, evaluation, expert, sim, train
from .config import FIELD_NAMES, RunConfig, load_config
from .errors import PSkillError
from .reports import write_report

log = logging.getLogger("pskill")


def _common(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("common")
    g.add_argument("--config", type=Path, help="YAML run configuration")
    g.add_argument("--seed", type=int)
    g.add_argument("--profile", choices=("fast", "full"))
    g.add_argument("--jobs", type=int, help="worker processes for sweeps and ablations")
    g.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", dest="set_",
                   help="override any config field (repeatable)")
    g.add_argument("-v", "--verbose", action="store_true")


def _report_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out", type=Path, required=True, help="report path (.json or .csv)")
    p.add_argument("--format", choices=("json", "csv"))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pskill", description="Goal-parameterized behavioral cloning toolkit")
    parser.add_argument("--version", action="version", version=f"pskill {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("gen-data", help="generate expert demonstrations")
    _common(p)
    p.add_argument("--layout", choices=sim.LAYOUT_KINDS)
    p.add_argument("--layout-seed", type=int, dest="layout_seed")
    p.add_argument("--demos-per-goal", type=int, dest="demos_per_goal")
    p.add_argument("--encoding", choices=sim.ENCODINGS)
    p.add_argument("--goals", help='goal ids "0,4,8" or row/col pairs "1,1;1,2"')
    p.add_argument("--out", type=Path, required=True, help="dataset directory")

    p = sub.add_parser("train", help="train a policy on a dataset")
    _common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--train-goals", dest="train_goals",
                   help='goal ids "4,5,7" or row/col pairs "1,1;1,2;2,1" (a single pair needs a trailing ";")')
    p.add_argument("--encoding", choices=sim.ENCODINGS, help="re-derive tau with this encoding")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr", type=float)
    p.add_argument("--out", type=Path, required=True, help="checkpoint path")
    p.add_argument("--log", type=Path, help="per-epoch loss log (JSON lines)")

    p = sub.add_parser("eval", help="closed-loop evaluation of a checkpoint (or the expert)")
    _common(p)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint", type=Path)
    src.add_argument("--expert", action="store_true", help="evaluate the scripted expert (harness check)")
    p.add_argument("--layout", choices=sim.LAYOUT_KINDS)
    p.add_argument("--layout-seed", type=int, dest="layout_seed")
    p.add_argument("--goals")
    p.add_argument("--trials", type=int, dest="trials_per_goal")
    p.add_argument("--max-steps", type=int, dest="max_steps")
    _report_args(p)

    p = sub.add_parser("sweep", help="train/evaluate over random goal subsets of each size")
    _common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--encoding", choices=sim.ENCODINGS)
    p.add_argument("--sizes", help='subset sizes, e.g. "1,2,3"')
    p.add_argument("--subsets-per-size", type=int, dest="subsets_per_size")
    p.add_argument("--epochs", type=int)
    p.add_argument("--trials", type=int, dest="trials_per_goal")
    _report_args(p)

    p = sub.add_parser("ablate", help="compare tau encodings on fixed goal subsets")
    _common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--encodings", help='e.g. "none,onehot,rowcol,pixel"')
    p.add_argument("--subsets", dest="ablation_subsets", help='subsets separated by "|", e.g. "4,5,7|0,8"')
    p.add_argument("--epochs", type=int)
    p.add_argument("--trials", type=int, dest="trials_per_goal")
    _report_args(p)

    p = sub.add_parser("render", help="write one rendered observation as PNG")
    _common(p)
    p.add_argument("--layout", choices=sim.LAYOUT_KINDS)
    p.add_argument("--layout-seed", type=int, dest="layout_seed")
    p.add_argument("--position", default="780,20", help="agent centre x,y in scene pixels")
    p.add_argument("--resolution", help="WIDTHxHEIGHT, e.g. 160x120")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("grad-check", help="finite-difference check of every layer, the policy and the loss")
    _common(p)
    p.add_argument("--threshold", type=float, default=1e-3)
    return parser


def _config_from_args(args) -> RunConfig:
    flags = {k: v for k, v in vars(args).items() if k in FIELD_NAMES}
    for item in args.set_:
        key, sep, value = item.partition("=")
        if not sep:
            raise PSkillError(f"--set expects KEY=VALUE, got {item!r}")
        flags[key.strip()] = value
    return load_config(args.config, flags)


# --------------------------------------------------------------------------
# stages


def cmd_gen_data(args, cfg: RunConfig) -> int:
    layout = cfg.make_layout()
    ds = expert.build_dataset(
        layout, cfg.goals, cfg.demos, cfg.encoding, seed=cfg.seed, params=cfg.expert_params(),
        resolution=cfg.render_resolution,
    )
    expert.save_dataset(ds, args.out)
    steps = sum(len(t) for t in ds.trajectories)
    print(f"wrote {len(ds)} demonstrations ({steps} steps) for goals {list(cfg.goals)} to {args.out}")
    return 0


def _load_data(path, cfg: RunConfig, encoding: str | None):
    ds = expert.load_dataset(path)
    if encoding and encoding != ds.manifest.encoding:
        ds = ds.with_encoding(encoding)
    return ds


def cmd_train(args, cfg: RunConfig) -> int:
    ds = _load_data(args.data, cfg, args.encoding)
    enc = ds.manifest.encoding
    arch = cfg.arch(enc, ds.manifest.resolution)
    ckpt, rows = train.train_loop(ds, cfg.train_config(enc), arch, progress=True)
    ckpt.metadata["config_hash"] = cfg.config_hash()
    train.checkpoint_save(ckpt, args.out)
    log_path = args.log or args.out.with_name(args.out.name + ".log.jsonl")
    train.save_log(rows, log_path)
    print(f"trained on goals {list(ckpt.train_goals)} ({enc}); final loss {rows[-1]['total']:.4f}; "
          f"checkpoint {args.out}")
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    layout = cfg.make_layout()
    if args.expert:
        controller = evaluation.ExpertController(cfg.expert_params(), cfg.render_resolution)
    else:
        controller = evaluation.NetworkController(train.checkpoint_load(args.checkpoint))
    rep = evaluation.evaluate_goals(controller, layout, cfg.goals, cfg.eval_config(),
                                    echo={"config_hash": cfg.config_hash()})
    write_report(rep, args.out, args.format, cfg.config_hash())
    print(rep.summary())
    return 0


def cmd_sweep(args, cfg: RunConfig) -> int:
    ds = _load_data(args.data, cfg, cfg.encoding)
    rep = evaluation.subset_sweep(
        ds, cfg.sizes, cfg.subsets_per_size, cfg.train_config(), cfg.eval_config(),
        sweep_seed=cfg.seed, arch=cfg.arch(resolution=ds.manifest.resolution), jobs=cfg.jobs,
    )
    write_report(rep, args.out, args.format, cfg.config_hash())
    for k in rep.results:
        s = rep.stats(k)
        fmt = lambda v: "-" if v is None else f"{v:.3f}"  # noqa: E731
        print(f"k={k}: median {fmt(s['median'])} min {fmt(s['min'])} max {fmt(s['max'])} (n={s['n']})")
    return 0


def cmd_ablate(args, cfg: RunConfig) -> int:
    ds = expert.load_dataset(args.data)
    rep = evaluation.ablation_suite(
        ds, cfg.encodings, cfg.ablation_subsets, cfg.train_config(ds.manifest.encoding), cfg.eval_config(),
        arch=cfg.arch(ds.manifest.encoding, ds.manifest.resolution), jobs=cfg.jobs,
    )
    write_report(rep, args.out, args.format, cfg.config_hash())
    print(rep.table())
    return 0


def cmd_render(args, cfg: RunConfig) -> int:
    try:
        x, y = (float(v) for v in args.position.split(","))
    except ValueError:
        raise PSkillError(f"--position expects x,y, got {args.position!r}") from None
    rgb, _ = sim.render(cfg.make_layout(), sim.AgentState((x, y)), cfg.render_resolution)
    sim.save_png(rgb, args.out)
    print(f"wrote {args.out} ({rgb.shape[1]}x{rgb.shape[0]})")
    return 0


def cmd_grad_check(args, cfg: RunConfig) -> int:
    ok = True
    for name, report in diagnostics.gradient_suite(cfg.seed, args.threshold):
        print(f"== {name}")
        print(report)
        ok &= report.passed
    print("all gradient checks passed" if ok else "gradient check FAILED")
    return 0 if ok else 1


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "ablate": cmd_ablate,
    "render": cmd_render,
    "grad-check": cmd_grad_check,
}


def run_command(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # usage errors exit with status 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = _config_from_args(args)
    except PSkillError as exc:
        parser.exit(2, f"pskill {args.command}: config error: {exc}\n")
    try:
        return COMMANDS[args.command](args, cfg)
    except (PSkillError, OSError, ValueError) as exc:
        print(f"pskill {args.command}: error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()

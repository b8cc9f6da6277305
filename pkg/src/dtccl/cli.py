"""Command-line entry point: ``dtccl <command> [options]``.

Exit codes: 0 success, 1 domain error (bad data, failed stage), 2 usage error.
"""

from __future__ import annotations

import argparse
import glob
import json
import logging
import os
import sys

from .augment import augment_batch, load_dataset, save_dataset
from .config import PRESETS, ConfigError, GlobalConfig, apply_preset, dumps, load_config
from .controllers import ExpertDriver
from .metrics import emit_report, evaluate
from .mining import mine
from .policy import init_params, inspect, load_params, save_params
from .safety import check_frames
from .scenario import DisengagementSegment, load_scenario, save_scenario
from .sim import rollout
from .templates import TEMPLATES, sample_scenarios
from .train import collect_human_data, fine_tune, pretrain

log = logging.getLogger("dtccl")

EXIT_OK, EXIT_DOMAIN, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _workdir(args) -> str:
    return args.workdir or os.environ.get("DTCCL_WORKDIR") or os.getcwd()


def _resolve(args, path) -> str:
    return path if os.path.isabs(path) else os.path.join(_workdir(args), path)


def _config(args) -> GlobalConfig:
    cfg = load_config(args.config) if args.config else GlobalConfig()
    if args.preset:
        cfg = apply_preset(cfg, args.preset)
    return cfg.with_seed(args.seed)


def _policy(args, path):
    if path == "expert":
        return ExpertDriver()
    return load_params(_resolve(args, path))


def _scenarios(template, count, seed, split):
    templates = TEMPLATES if template == "all" else template.split(",")
    return [i for t in templates for i in sample_scenarios(t, count, seed, split)]


def _json_out(obj) -> None:
    print(json.dumps(obj, indent=1, sort_keys=True))


# ---------------------------------------------------------------- commands


def cmd_simulate(args):
    cfg = _config(args)
    out = _resolve(args, args.out)
    os.makedirs(out, exist_ok=True)
    policy = _policy(args, args.policy)
    summary = []
    for inst in _scenarios(args.template, args.count, args.seed, args.split):
        res = rollout(policy, inst, cfg.sim, monitor=not args.no_monitor)
        save_scenario(res.log, os.path.join(out, f"{inst.name}.jsonl"))
        summary.append({"scenario": inst.name, "frames": len(res.log.frames),
                        "events": res.events_record(), "digest": res.digest()})
    with open(os.path.join(out, "events.json"), "w") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
    log.info("wrote %d logs to %s", len(summary), out)
    return EXIT_OK


def cmd_mine(args):
    cfg = _config(args)
    paths = sorted(glob.glob(os.path.join(_resolve(args, args.logs), "*.jsonl")))
    if not paths:
        raise ValueError(f"no logs in {args.logs}")
    logs = [load_scenario(p) for p in paths]
    segs, report = mine(logs, _policy(args, args.policy), cfg.sim, cfg.mining, args.seed)
    out = _resolve(args, args.out)
    os.makedirs(out, exist_ok=True)
    for i, seg in enumerate(segs):
        save_scenario(seg, os.path.join(out, f"{i:04d}.jsonl"))
    with open(os.path.join(out, "mining.json"), "w") as fh:
        json.dump(report.to_dict(), fh, indent=1, sort_keys=True)
    log.info("detected %d, verified %d", report.detected, report.verified)
    return EXIT_OK


def cmd_check(args):
    cfg = _config(args)
    item = load_scenario(_resolve(args, args.scenario))
    frames = item.frames
    if isinstance(item, DisengagementSegment) and not args.all_frames:
        frames = frames[:item.takeover_index]
    v = check_frames(frames, item.map, cfg.safety, item.dt)
    _json_out(v.to_dict())
    return EXIT_OK if v.ok or not args.strict else EXIT_DOMAIN


def cmd_augment(args):
    cfg = _config(args)
    paths = sorted(glob.glob(os.path.join(_resolve(args, args.segments), "*.jsonl")))
    if not paths:
        raise ValueError(f"no segments in {args.segments}")
    samples, manifest = augment_batch([load_scenario(p) for p in paths], cfg.augmentation)
    save_dataset(samples, manifest, _resolve(args, args.out))
    log.info("augmented %d segments: %s", len(samples), manifest.operators)
    return EXIT_OK


def cmd_train(args):
    cfg = _config(args)
    samples = load_dataset(_resolve(args, args.dataset))
    human = collect_human_data(cfg.loop.human_instances, cfg.loop.human_seed, cfg.sim)
    params, report = fine_tune(_policy(args, args.policy), samples, human, cfg.train,
                               version=args.version)
    out = _resolve(args, args.out)
    save_params(params, out)
    report.write(os.path.splitext(out)[0] + ".train")
    log.info("final loss %.4f", report.epochs[-1]["total"] if report.epochs else float("nan"))
    return EXIT_OK


def cmd_pretrain(args):
    cfg = _config(args)
    p = cfg.policy
    human = collect_human_data(p.pretrain_instances, cfg.loop.human_seed, cfg.sim)
    params, report = pretrain(human, p.pretrain_config(args.seed), p.init_seed, args.version)
    out = _resolve(args, args.out)
    save_params(params, out)
    report.write(os.path.splitext(out)[0] + ".train")
    return EXIT_OK


def cmd_evaluate(args):
    cfg = _config(args)
    insts = _scenarios(args.template, args.count, args.scenario_seed, args.split)
    reports = []
    for spec in args.policy:
        name, _, path = spec.rpartition("=")
        reports.append(evaluate(_policy(args, path), insts, cfg.metrics, cfg.sim,
                                name or os.path.basename(path)))
    paths = emit_report(reports, _resolve(args, args.out), tuple(args.format))
    for r in reports:
        print(f"{r.policy}: composite {r.composite:.2f}")
    log.info("wrote %s", ", ".join(paths))
    return EXIT_OK


def cmd_loop(args):
    from .loop import run_loop
    cfg = _config(args)
    workdir = _workdir(args)
    state, report = run_loop(load_params(_resolve(args, args.init_policy)), args.cycles, workdir,
                             cfg.stages(), args.seed)
    print(f"cycles {state.t}, promoted {len(report['promotions'])}, policy {state.policy}")
    return EXIT_OK


def cmd_experiment(args):
    from .experiment import HeldOut, run_reference
    cfg = load_config(args.config) if args.config else GlobalConfig()
    summary = run_reference(_workdir(args), cfg, args.cycles, args.seed,
                            HeldOut(args.hotspot_count, args.nominal_count))
    _json_out(summary)
    return EXIT_OK


def cmd_policy(args):
    if args.action == "inspect":
        _json_out(inspect(load_params(_resolve(args, args.path))))
    else:
        save_params(init_params(args.seed, args.version), _resolve(args, args.path))
    return EXIT_OK


def cmd_config(args):
    print(dumps(_config(args)), end="")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="INI or JSON config file")
    common.add_argument("--preset", choices=sorted(PRESETS))
    common.add_argument("--seed", type=int, default=0, help="root seed")
    common.add_argument("--workdir", help="default: $DTCCL_WORKDIR or the current directory")
    v = common.add_mutually_exclusive_group()
    v.add_argument("--quiet", action="store_true")
    v.add_argument("--verbose", action="store_true")

    p = _Parser(prog="dtccl", description="Disengagement-triggered continual learning pipeline.")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    def add(name, fn, help_):
        sp = sub.add_parser(name, parents=[common], help=help_)
        sp.set_defaults(fn=fn)
        return sp

    s = add("simulate", cmd_simulate, "roll a policy out on sampled scenarios and save the logs")
    s.add_argument("--policy", required=True, help="checkpoint path or 'expert'")
    s.add_argument("--template", default="lead_brake", help="template name, comma list or 'all'")
    s.add_argument("--count", type=int, default=4)
    s.add_argument("--split", default="train", choices=("train", "gate", "heldout"))
    s.add_argument("--no-monitor", action="store_true", help="disable the takeover monitor")
    s.add_argument("--out", default="logs")

    s = add("mine", cmd_mine, "detect and replay-verify disengagement segments")
    s.add_argument("--logs", required=True)
    s.add_argument("--policy", required=True)
    s.add_argument("--out", default="segments")

    s = add("check", cmd_check, "run the safety checker on a log or segment file")
    s.add_argument("scenario")
    s.add_argument("--all-frames", action="store_true", help="check the whole segment, not just pre-takeover")
    s.add_argument("--strict", action="store_true", help="exit 1 when violations are found")

    s = add("augment", cmd_augment, "build positive/negative variants for a segment directory")
    s.add_argument("--segments", required=True)
    s.add_argument("--out", default="dataset")

    s = add("train", cmd_train, "fine-tune a policy on an augmented dataset")
    s.add_argument("--dataset", required=True)
    s.add_argument("--policy", required=True)
    s.add_argument("--out", default="candidate.ckpt")
    s.add_argument("--version", default="candidate")

    s = add("pretrain", cmd_pretrain, "pretrain a policy on nominal expert driving")
    s.add_argument("--out", default="pi0.ckpt")
    s.add_argument("--version", default="pi0")

    s = add("evaluate", cmd_evaluate, "closed-loop metrics for one or more policies")
    s.add_argument("--policy", action="append", required=True,
                   help="[name=]checkpoint or 'expert'; repeatable")
    s.add_argument("--template", default="all")
    s.add_argument("--count", type=int, default=5)
    s.add_argument("--split", default="heldout", choices=("train", "gate", "heldout"))
    s.add_argument("--scenario-seed", type=int, default=0)
    s.add_argument("--format", action="append", choices=("json", "csv"), default=None)
    s.add_argument("--out", default="report")

    s = add("loop", cmd_loop, "run continual-learning cycles")
    s.add_argument("--init-policy", required=True)
    s.add_argument("--cycles", type=int, default=3)

    s = add("experiment", cmd_experiment, "pretrain, run the loop and compare against direct imitation")
    s.add_argument("--cycles", type=int, default=3)
    s.add_argument("--hotspot-count", type=int, default=10, help="held-out scenarios per hotspot template")
    s.add_argument("--nominal-count", type=int, default=15)

    s = add("policy", cmd_policy, "inspect or initialise a checkpoint")
    s.add_argument("action", choices=("inspect", "init"))
    s.add_argument("path")
    s.add_argument("--version", default="v0")

    add("config", cmd_config, "print the effective configuration")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    level = logging.WARNING if args.quiet else logging.DEBUG if args.verbose else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", force=True)
    if getattr(args, "format", None) is None and args.command == "evaluate":
        args.format = ["json", "csv"]
    if getattr(args, "count", 1) < 1 or getattr(args, "cycles", 1) < 1:
        print(f"dtccl {args.command}: error: counts must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    except (ValueError, OSError, RuntimeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN


if __name__ == "__main__":
    sys.exit(main())

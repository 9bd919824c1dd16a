"""Command-line entry point.

Outputs go to ``--output-dir``, else ``$PHDDPG_OUTPUT_DIR``, else ``./runs``.
Exit status: 0 on success, 2 on invalid input, 3 when training diverges.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .agent import DivergenceError, MASK_STRATEGIES, PHDDPGAgent, ReplayBuffer
from .config import Config, ConfigError, load_config
from .controllers import VARIANTS, agent_controller
from .metrics import summarize, write_json, write_metrics_csv
from .network import NetworkError
from .scenario import ScenarioError, generate_grid
from .sim import ControllerError
from . import training

logger = logging.getLogger("phddpg")

EXIT_OK, EXIT_INVALID, EXIT_DIVERGED = 0, 2, 3
OUTPUT_ENV = "PHDDPG_OUTPUT_DIR"


def _output_dir(args) -> Path:
    d = Path(args.output_dir or os.environ.get(OUTPUT_ENV) or "runs")
    d.mkdir(parents=True, exist_ok=True)
    return d


def _config(args) -> Config:
    cfg = load_config(args.config)
    if getattr(args, "roadnet", None) or getattr(args, "flow", None):
        cfg = cfg.replace("scenario", roadnet=args.roadnet or "", flow=args.flow or "")
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace("train", seed=args.seed)
    if getattr(args, "mask", None):
        cfg = cfg.replace("agent", mask=args.mask)
    if getattr(args, "variant", None):
        cfg = cfg.replace("variant", name=args.variant)
    if getattr(args, "mode", None):
        cfg = cfg.replace("train", mode=args.mode)
    if getattr(args, "episodes", None) is not None:
        key = "online_episodes" if cfg.train.mode == "online" else "train_episodes"
        if args.command == "collect":
            key = "collect_episodes"
        cfg = cfg.replace("train", **{key: args.episodes})
    if getattr(args, "eval_seeds", None):
        cfg = cfg.replace("train", eval_seeds=args.eval_seeds)
    return cfg.validate()


def _controller_factory(name: str, cfg: Config):
    if Path(name).is_file():
        agent, _ = PHDDPGAgent.load(name)
        return lambda: agent_controller(agent, cfg.variant.name)
    return training.baseline_factory(name, cfg)


def _stamp(cfg: Config, payload: dict) -> dict:
    return {"config_hash": cfg.hash(), **payload}


def cmd_generate_grid(args) -> int:
    sc = generate_grid(args.rows, args.cols, args.link_length, args.demand, args.seed, args.duration,
                       args.ns_share, args.phase_scheme)
    out = Path(args.out) if args.out else _output_dir(args) / sc.name
    roadnet, flow = sc.save(out)
    print(f"wrote {roadnet} and {flow} ({len(sc.flow)} vehicles)")
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = _config(args)
    sc = training.scenario_from_config(cfg)
    log = training._episode(sc, _controller_factory(args.controller, cfg)(), cfg, seed=cfg.train.seed)
    out = _output_dir(args)
    log.meta["config_hash"] = cfg.hash()
    (out / "episode.jsonl").write_text(log.to_jsonl())
    stats = summarize(log)
    write_json(out / "simulate.json", _stamp(cfg, stats))
    print(json.dumps(stats, sort_keys=True))
    return EXIT_OK


def cmd_collect(args) -> int:
    cfg = _config(args)
    sc = training.scenario_from_config(cfg)
    buf = training.collect(sc, cfg)
    path = Path(args.out) if args.out else _output_dir(args) / "buffer.npz"
    buf.save(path)
    print(f"wrote {path} ({len(buf)} transitions)")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    sc = training.scenario_from_config(cfg)
    out = _output_dir(args)
    (out / "config.ini").write_text(cfg.to_ini())
    if cfg.train.mode == "offline":
        buf = ReplayBuffer.load(args.buffer, cfg.agent.buffer_capacity) if args.buffer else training.collect(sc, cfg)
        result = training.train_offline(sc, cfg, buf, out / "checkpoints")
    else:
        result = training.train_online(sc, cfg, out / "checkpoints")
    rows = [{**r, "config_hash": cfg.hash()} for r in result.rows]
    write_metrics_csv(out / "metrics.csv", rows, extra=("loss", "objective", "config_hash"))
    if result.best_state is not None:
        best = result.best_agent()
        best.save(out / "best.ckpt", {"config_hash": cfg.hash(), "episode": result.best_episode})
    summary = _stamp(cfg, {"mode": cfg.train.mode, "interactions": result.interactions, **result.final})
    write_json(out / "summary.json", summary)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    sc = training.scenario_from_config(cfg)
    target = args.checkpoint or args.baseline
    rows = training.evaluate_controller(sc, _controller_factory(target, cfg), cfg, cfg.train.eval_seed_list())
    out = _output_dir(args)
    write_metrics_csv(out / "evaluate.csv", [{"episode": 0, **r} for r in rows])
    agg = _stamp(cfg, {"target": target, **training.aggregate(rows)})
    write_json(out / "evaluate.json", agg)
    print(json.dumps(agg, sort_keys=True))
    return EXIT_OK


def cmd_diagnose(args) -> int:
    cfg = _config(args)
    sc = training.scenario_from_config(cfg)
    out = _output_dir(args)
    result = {}
    for ckpt in args.checkpoint:
        agent, meta = PHDDPGAgent.load(ckpt)
        buf = ReplayBuffer.load(args.buffer) if args.buffer else training.collect(sc, cfg, episodes=1)
        obs, nb = training.diagnostic_states(buf, args.samples, cfg.train.seed)
        c = training.diagnose(agent, obs, nb)
        result[ckpt] = {"episode": meta.get("episode"), "matrix": c.matrix, "mean_diag": c.mean_diagonal,
                        "skipped": c.skipped, "degenerate_columns": c.degenerate_columns}
        print(f"{ckpt}: mean diagonal {c.mean_diagonal:.3f}")
    write_json(out / "diagnose.json", _stamp(cfg, {"matrices": result}))
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = _config(args)
    sc = training.scenario_from_config(cfg)
    table = training.compare(sc, cfg, args.entries, cfg.train.eval_seed_list())
    out = _output_dir(args)
    write_json(out / "compare.json", _stamp(cfg, {"table": table}))
    width = max(len(e) for e in table)
    print(f"{'controller':<{width}}  {'att':>14}  {'datt':>14}  {'dar':>12}")
    for name, row in table.items():
        print(f"{name:<{width}}  {row['att_mean']:8.2f}±{row['att_std']:<5.1f}  "
              f"{row['datt_mean']:8.2f}±{row['datt_std']:<5.1f}  {row['dar_mean']:6.3f}±{row['dar_std']:.3f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="phddpg", description="Hybrid-action signal control experiments")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, scenario=True):
        p.add_argument("--config", help="INI config file")
        p.add_argument("--output-dir", help=f"output directory (default ${OUTPUT_ENV} or ./runs)")
        p.add_argument("--seed", type=int, default=None)
        if scenario:
            p.add_argument("--roadnet", help="roadnet JSON (overrides the generated grid)")
            p.add_argument("--flow", help="flow JSON")

    p = sub.add_parser("generate-grid", help="write a synthetic grid scenario")
    p.add_argument("--rows", type=int, default=1)
    p.add_argument("--cols", type=int, default=1)
    p.add_argument("--link-length", type=float, default=300.0)
    p.add_argument("--demand", type=float, default=2400.0, help="total vehicles per hour")
    p.add_argument("--duration", type=int, default=3600)
    p.add_argument("--ns-share", type=float, default=0.5)
    p.add_argument("--phase-scheme", choices=("paired", "split", "eight"), default="paired")
    p.add_argument("--out", help="scenario directory")
    p.add_argument("--output-dir")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_generate_grid)

    p = sub.add_parser("simulate", help="run one episode with a baseline or checkpoint")
    common(p)
    p.add_argument("--controller", default="fixedtime", help="fixedtime, maxpressure, random or a checkpoint path")
    p.add_argument("--variant", choices=VARIANTS)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("collect", help="fill a replay buffer with the random policy")
    common(p)
    p.add_argument("--episodes", type=int)
    p.add_argument("--out", help="buffer .npz path")
    p.set_defaults(func=cmd_collect)

    p = sub.add_parser("train", help="train an agent")
    common(p)
    p.add_argument("--mode", choices=("online", "offline"))
    p.add_argument("--mask", choices=MASK_STRATEGIES)
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--episodes", type=int)
    p.add_argument("--buffer", help="pre-collected buffer for offline mode")
    p.add_argument("--eval-seeds")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint or baseline over seeds")
    common(p)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--checkpoint")
    g.add_argument("--baseline", choices=("fixedtime", "maxpressure", "random"))
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--eval-seeds")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("diagnose", help="gradient contribution matrices of checkpoints")
    common(p)
    p.add_argument("checkpoint", nargs="+")
    p.add_argument("--buffer", help="buffer to draw states from (default: one random-policy episode)")
    p.add_argument("--samples", type=int, default=training.DIAG_SAMPLES)
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("compare", help="tabulate baselines and checkpoints side by side")
    common(p)
    p.add_argument("entries", nargs="+", help="baseline names or checkpoint paths")
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--eval-seeds")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except DivergenceError as exc:
        logger.error("training diverged: %s", exc)
        return EXIT_DIVERGED
    except (ConfigError, ScenarioError, NetworkError, ControllerError, ValueError, OSError) as exc:
        logger.error("%s", exc)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())

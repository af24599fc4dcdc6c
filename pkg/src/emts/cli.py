"""Command-line pipeline: library generation, skill training, expert data,
intent training, self-play training, evaluation, and search debugging.

Exit codes: 0 success, 2 configuration errors (including missing input
artifacts), 3 runtime aborts. EMTS_LOG controls verbosity (debug/info/
warning).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import figures
from .config import (ConfigError, RunConfig, load_config, override_seed,
                     save_config)
from .envs import DrivingEnv, SCENARIOS, default_scenario_config, ego_speed_from_obs
from .intents import (extract_segments, generate_expert_dataset,
                      load_expert_dataset, load_intent_encoders,
                      save_expert_dataset, save_intent_encoders,
                      train_intent_encoder, STYLES)
from .primitives import build_library, load_library, save_library
from .search import run_search, tree_to_dict
from .skills import (library_features, load_skill_model, reconstruction_mse,
                     save_skill_model, train_skill_space)
from .trainer import evaluate, load_full_checkpoint, train_loop
from .world_model import new_model_bundle

log = logging.getLogger("emts")


def _setup_logging():
    level = os.environ.get("EMTS_LOG", "info").lower()
    levels = {"debug": logging.DEBUG, "info": logging.INFO,
              "warning": logging.WARNING, "error": logging.ERROR}
    logging.basicConfig(level=levels.get(level, logging.INFO),
                        format="%(levelname)s %(message)s")


def _load_run_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig().validate()
    if getattr(args, "seed", None) is not None:
        override_seed(cfg, args.seed)
    if getattr(args, "workers", None) is not None:
        cfg.train.workers = args.workers
    return cfg


def _require(path, what):
    if not path or not os.path.exists(path):
        raise ConfigError(f"missing {what}: {path!r} does not exist")
    return path


def _figure_path(path, suffix):
    base, _ = os.path.splitext(path)
    return f"{base}_{suffix}.png"


# -- subcommands -------------------------------------------------------------


def cmd_init_config(args):
    cfg = RunConfig().validate()
    save_config(cfg, args.out)
    log.info("wrote default config to %s", args.out)
    return 0


def cmd_gen_library(args):
    cfg = _load_run_config(args)
    lib = build_library(cfg.library)
    out = args.out or cfg.artifacts.library
    os.makedirs(os.path.dirname(out) or ".", exist_ok=True)
    save_library(lib, out)
    figures.save_library_figure(lib, _figure_path(out, "overview"))
    log.info("library: %d trajectories (%d infeasible skipped) -> %s",
             len(lib), lib.skipped, out)
    return 0


def cmd_train_skills(args):
    cfg = _load_run_config(args)
    lib_path = _require(args.library or cfg.artifacts.library, "trajectory library")
    lib = load_library(lib_path)
    feats = library_features(lib)
    rng = np.random.default_rng(cfg.skills.seed)
    order = rng.permutation(len(feats))
    n_holdout = max(1, len(feats) // 10)
    train_feats, holdout = feats[order[n_holdout:]], feats[order[:n_holdout]]
    model, history = train_skill_space(train_feats, cfg.skills)
    mse = reconstruction_mse(model, holdout)
    out = args.out or cfg.artifacts.skills
    os.makedirs(os.path.dirname(out) or ".", exist_ok=True)
    save_skill_model(out, model)
    figures.save_loss_figure(history, _figure_path(out, "loss"), "skill-space ELBO")
    log.info("skill space trained: held-out action MSE %.5f -> %s", mse, out)
    return 0


def cmd_gen_expert_data(args):
    cfg = _load_run_config(args)
    if args.style not in STYLES:
        raise ConfigError(f"unknown expert style {args.style!r}; choose from {STYLES}")
    expert_id = STYLES.index(args.style)
    dataset = generate_expert_dataset(cfg.env, args.style, args.episodes, expert_id,
                                      seed=cfg.seed, min_len=cfg.library.horizon)
    os.makedirs(os.path.dirname(args.out) or ".", exist_ok=True)
    save_expert_dataset(dataset, args.out)
    log.info("expert %s: %d usable episodes -> %s", args.style,
             len(dataset.episodes), args.out)
    return 0


def cmd_train_intents(args):
    cfg = _load_run_config(args)
    skills_path = _require(args.skills or cfg.artifacts.skills, "skill checkpoint")
    skill_model = load_skill_model(skills_path)
    data_paths = args.data or cfg.artifacts.expert_data
    v_max = cfg.kinematics.v_max
    speed_of_obs = lambda o: ego_speed_from_obs(o, v_max)
    encoders, styles = [], []
    for path in data_paths:
        dataset = load_expert_dataset(_require(path, "expert dataset"))
        segments = extract_segments(dataset, skill_model.horizon, cfg.intents.stride)
        encoder, _ = train_intent_encoder(segments, skill_model, cfg.intents,
                                          speed_of_obs, expert_id=dataset.expert_id)
        encoders.append(encoder)
        styles.append(dataset.style)
        log.info("intent encoder %d (%s): %d segments", dataset.expert_id,
                 dataset.style, len(segments))
    out = args.out or cfg.artifacts.intents
    os.makedirs(os.path.dirname(out) or ".", exist_ok=True)
    save_intent_encoders(out, encoders, styles)
    log.info("intent encoders -> %s", out)
    return 0


def cmd_train(args):
    cfg = _load_run_config(args)
    skill_model = load_skill_model(_require(args.skills or cfg.artifacts.skills,
                                            "skill checkpoint"))
    encoders = load_intent_encoders(_require(args.intents or cfg.artifacts.intents,
                                             "intent checkpoint"))
    rng = np.random.default_rng(cfg.train.seed)
    from .envs import OBS_DIM
    bundle = new_model_bundle(OBS_DIM, skill_model.d_z, cfg.model, rng)
    os.makedirs(args.out_dir, exist_ok=True)
    save_config(cfg, os.path.join(args.out_dir, "config.json"))
    rows = train_loop(bundle, skill_model, encoders, cfg.env, cfg.search,
                      cfg.posterior, cfg.train, out_dir=args.out_dir,
                      log_fn=log.info)
    figures.save_metrics_figure(rows, os.path.join(args.out_dir, "metrics.png"))
    log.info("training done: %d evaluations -> %s", len(rows), args.out_dir)
    return 0


def cmd_eval(args):
    bundle, skill_model, encoders, meta = load_full_checkpoint(
        _require(args.ckpt, "training checkpoint"))
    cfg = _load_run_config(args)
    env_cfg = default_scenario_config(args.scenario) if args.scenario else cfg.env
    env_cfg.kin = cfg.kinematics
    if args.seed is not None:
        env_cfg.seed = args.seed
    result = evaluate(bundle, skill_model, encoders, env_cfg, cfg.search,
                      gamma=0.0, n_episodes=args.episodes,
                      seed=env_cfg.seed, collect_traces=True)
    os.makedirs(args.traces, exist_ok=True)
    summary_path = os.path.join(args.traces, "summary.csv")
    with open(summary_path, "w") as f:
        f.write("episode,cause,completion,return\n")
        for i, trace in enumerate(result["traces"]):
            f.write(f"{i},{trace['cause']},{trace['completion']:.10g},"
                    f"{trace['return']:.10g}\n")
        f.write(f"aggregate,success_rate={result['success_rate']:.10g},"
                f"{result['completion_ratio']:.10g},{result['mean_return']:.10g}\n")
    for i, trace in enumerate(result["traces"]):
        with open(os.path.join(args.traces, f"episode_{i:03d}.jsonl"), "w") as f:
            for out in trace["steps"]:
                f.write(json.dumps({
                    "state": [out.state.x, out.state.y, out.state.theta, out.state.v],
                    "action": [out.action.throttle, out.action.steer],
                    "components": out.components, "cause": out.cause}) + "\n")
    figures.save_eval_figure(result["traces"], DrivingEnv(env_cfg).scene,
                             os.path.join(args.traces, "episodes.png"))
    log.info("eval: success %.2f completion %.2f -> %s",
             result["success_rate"], result["completion_ratio"], summary_path)
    return 0


def cmd_search_debug(args):
    bundle, skill_model, encoders, meta = load_full_checkpoint(
        _require(args.ckpt, "training checkpoint"))
    with open(_require(args.obs, "observation fixture")) as f:
        fixture = json.load(f)
    obs = np.asarray(fixture["obs"], dtype=float)
    cfg = _load_run_config(args)
    cfg.search.num_simulations = args.sims
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    result, root = run_search(obs, bundle, encoders, cfg.search, rng,
                              gamma=args.gamma, return_tree=True)
    dump = {
        "num_simulations": args.sims,
        "gamma": args.gamma,
        "root_value": result.root_value,
        "atoms": result.atoms.tolist(),
        "provenance": result.provenance.tolist(),
        "priors": result.prior.tolist(),
        "visits": result.visits.tolist(),
        "q_values": result.q_values.tolist(),
        "tree": tree_to_dict(root),
    }
    with open(args.dump, "w") as f:
        json.dump(dump, f, indent=1, sort_keys=True)
    log.info("search tree -> %s", args.dump)
    return 0


# -- argument parsing ---------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="emts",
                                     description="expert-guided motion-encoding tree search")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, workers=False):
        p.add_argument("--config", default=None, help="run config JSON")
        p.add_argument("--seed", type=int, default=None, help="override every seed")
        if workers:
            p.add_argument("--workers", type=int, default=None)

    p = sub.add_parser("init-config", help="write the full default config")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_init_config)

    p = sub.add_parser("gen-library", help="build the trajectory library")
    common(p)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_gen_library)

    p = sub.add_parser("train-skills", help="train the skill latent space")
    common(p)
    p.add_argument("--library", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_train_skills)

    p = sub.add_parser("gen-expert-data", help="roll scripted expert episodes")
    common(p)
    p.add_argument("--style", required=True, choices=STYLES)
    p.add_argument("--episodes", type=int, default=30)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_expert_data)

    p = sub.add_parser("train-intents", help="encode experts into the latent space")
    common(p)
    p.add_argument("--data", nargs="*", default=None)
    p.add_argument("--skills", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_train_intents)

    p = sub.add_parser("train", help="self-play training")
    common(p, workers=True)
    p.add_argument("--skills", default=None)
    p.add_argument("--intents", default=None)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="greedy evaluation episodes")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--scenario", choices=SCENARIOS, default=None)
    p.add_argument("--episodes", type=int, default=10)
    p.add_argument("--traces", required=True, help="output directory")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("search-debug", help="dump one search tree as JSON")
    common(p)
    p.add_argument("--obs", required=True, help="JSON fixture with an 'obs' array")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--sims", type=int, default=100)
    p.add_argument("--gamma", type=float, default=0.0)
    p.add_argument("--dump", required=True)
    p.set_defaults(fn=cmd_search_debug)

    return parser


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return 2
    except (RuntimeError, ValueError, OSError) as exc:
        log.error("aborted: %s", exc)
        return 3


if __name__ == "__main__":
    sys.exit(main())

"""Command-line surface: simulate, fit, eval, distill, rollout, count-params.

Every command takes flags plus an optional JSON config file (flags override
the file, unknown keys are rejected), validates inputs before writing
anything, and stamps outputs with a provenance header (config hash, seed,
version). Fixed seeds give byte-identical output files.
"""
from __future__ import annotations

import argparse
import glob as globlib
import hashlib
import json
import os
import sys

import numpy as np

from . import __version__
from .envs import (ENVS, OBS_MODES, collect_demonstrations,
                   collect_trajectories, default_config, expert_policy,
                   load_dataset, load_manifest, make_splits, save_dataset,
                   save_manifest, select_split, simulate)
from .evaluation import count_params, count_params_breakdown, evaluate
from .learning import FitConfig, fit_em
from .model import CLOSED_LOOP, MODES, load_model, model_to_dict
from .policy import ACT_MODES, distill, rollout, save_rollout, success_criterion

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2

# stream tags for per-purpose rng keys, combined with the user seed
STREAM_TRAIN, STREAM_TEST, STREAM_DEMO, STREAM_ROLLOUT = 0, 1, 2, 3


class CliError(Exception):
    """Runtime failure after argument validation; exits EXIT_RUNTIME."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- config plumbing ------------------------------------------------------------

_DEFAULTS = {
    "simulate": dict(env="pendulum", obs="joint", seed=0, n_train=25,
                     n_test=5, steps=None, policy="explore", n_splits=24,
                     split_size=10, out_dir="."),
    "fit": dict(data=None, manifest=None, K=2, mode="open_loop",
                transition="stationary", lag=0, poly_degree=1, max_iters=200,
                restarts=5, rel_tol=1e-6, seed=0, init_model=None,
                timings=False, out_dir="."),
    "eval": dict(test=None, model=None, horizons="1,5,10,15,20,25",
                 mode="marginal", seed=0, out_dir="."),
    "distill": dict(demos=None, K=5, transition="linear", lag=1,
                    poly_degree=1, max_iters=200, restarts=5, rel_tol=1e-6,
                    seed=0, timings=False, out_dir="."),
    "rollout": dict(env="pendulum", obs="joint", model=None, expert=False,
                    episodes=50, steps=None, mode="mean", seed=0,
                    out_dir="."),
    "count-params": dict(model=None),
}


def _resolve_config(command: str, args: argparse.Namespace) -> dict:
    """defaults <- config file <- explicit flags, rejecting unknown keys."""
    cfg = dict(_DEFAULTS[command])
    if getattr(args, "config", None):
        try:
            with open(args.config) as f:
                file_cfg = json.load(f)
        except OSError as e:
            raise CliError(f"cannot read config file: {e}")
        except json.JSONDecodeError as e:
            raise CliError(f"config file is not valid JSON: {e}")
        if not isinstance(file_cfg, dict):
            raise CliError("config file must hold a JSON object")
        unknown = sorted(set(file_cfg) - set(cfg))
        if unknown:
            raise CliError(f"unknown config keys for {command}: "
                           f"{', '.join(unknown)}")
        cfg.update(file_cfg)
    for key in cfg:
        flag = getattr(args, key.replace("-", "_"), None)
        if flag is not None:
            cfg[key] = flag
    return cfg


def _provenance(cfg: dict) -> dict:
    blob = json.dumps(cfg, sort_keys=True, default=str)
    return {"config_sha256": hashlib.sha256(blob.encode()).hexdigest(),
            "seed": cfg.get("seed", 0), "version": __version__}


def _header_lines(prov: dict) -> tuple:
    return (f"config_sha256={prov['config_sha256']}",
            f"seed={prov['seed']}", f"version={prov['version']}")


def _write_run_doc(out_dir: str, command: str, cfg: dict, prov: dict,
                   results: dict | None = None) -> None:
    doc = {"command": command, "config": cfg, "provenance": prov}
    if results is not None:
        doc["results"] = results
    with open(os.path.join(out_dir, "run.json"), "w") as f:
        json.dump(doc, f, indent=1, sort_keys=True)
        f.write("\n")


def _write_model(path, model, prov: dict) -> None:
    doc = model_to_dict(model)
    doc["provenance"] = prov
    with open(path, "w") as f:
        json.dump(doc, f, indent=1)
        f.write("\n")


def _ensure_out_dir(path: str) -> None:
    os.makedirs(path, exist_ok=True)


def _require(cfg: dict, key: str, parser: _Parser) -> None:
    if not cfg.get(key):
        parser.error(f"missing required option --{key.replace('_', '-')}")


def _positive(cfg: dict, keys, parser: _Parser) -> None:
    for key in keys:
        if cfg[key] is not None and cfg[key] < 1:
            parser.error(f"--{key.replace('_', '-')} must be >= 1")


# -- commands --------------------------------------------------------------------

def cmd_simulate(cfg: dict, parser: _Parser) -> int:
    _positive(cfg, ("n_train", "n_test", "n_splits", "split_size"), parser)
    if cfg["split_size"] > cfg["n_train"]:
        parser.error("--split-size cannot exceed --n-train")
    if cfg["policy"] not in ("explore", "expert"):
        parser.error("--policy must be explore or expert")
    env = default_config(cfg["env"], obs=cfg["obs"], seed=cfg["seed"])
    prov = _provenance(cfg)
    _ensure_out_dir(cfg["out_dir"])

    if cfg["policy"] == "expert":
        train = collect_demonstrations(env, cfg["n_train"], STREAM_DEMO,
                                       T=cfg["steps"])
        test = collect_demonstrations(env, cfg["n_test"], STREAM_DEMO + 10,
                                      T=cfg["steps"])
    else:
        train = collect_trajectories(env, cfg["n_train"], STREAM_TRAIN,
                                     T=cfg["steps"])
        test = collect_trajectories(env, cfg["n_test"], STREAM_TEST,
                                    T=cfg["steps"])
    splits = make_splits(cfg["n_train"], cfg["n_splits"], cfg["split_size"],
                         seed=cfg["seed"])
    split_ids = [[train[j].id for j in group] for group in splits]

    out = cfg["out_dir"]
    save_dataset(os.path.join(out, "train.ndjson"), train)
    save_dataset(os.path.join(out, "test.ndjson"), test)
    save_manifest(os.path.join(out, "splits.json"), split_ids)
    _write_run_doc(out, "simulate", cfg, prov)
    print(f"simulate: wrote {len(train)} train + {len(test)} test "
          f"trajectories ({train[0].T} steps) and {len(split_ids)} splits "
          f"to {out}")
    return EXIT_OK


def _fit_config(cfg: dict) -> FitConfig:
    return FitConfig(K=cfg["K"], mode=cfg["mode"],
                     transition_kind=cfg["transition"], lag=cfg["lag"],
                     poly_degree=cfg["poly_degree"],
                     max_iters=cfg["max_iters"], restarts=cfg["restarts"],
                     rel_tol=cfg["rel_tol"], seed=cfg["seed"])


def cmd_fit(cfg: dict, parser: _Parser) -> int:
    _require(cfg, "data", parser)
    _positive(cfg, ("K", "max_iters", "restarts"), parser)
    try:
        fit_config = _fit_config(cfg)
    except ValueError as e:
        parser.error(str(e))
    dataset = load_dataset(cfg["data"])
    init_model = load_model(cfg["init_model"]) if cfg["init_model"] else None
    prov = _provenance(cfg)
    _ensure_out_dir(cfg["out_dir"])

    if cfg["manifest"]:
        groups = [(f"_split{i:02d}", select_split(dataset, ids))
                  for i, ids in enumerate(load_manifest(cfg["manifest"]))]
    else:
        groups = [("", dataset)]

    failures = []
    for suffix, subset in groups:
        try:
            model, history = fit_em(subset, fit_config, init_model=init_model)
        except Exception as e:
            failures.append(f"split {suffix or '<all>'}: {e}")
            continue
        _write_model(os.path.join(cfg["out_dir"], f"model{suffix}.json"),
                     model, prov)
        history.to_csv(os.path.join(cfg["out_dir"], f"history{suffix}.csv"),
                       include_timings=cfg["timings"],
                       header_lines=_header_lines(prov))
        print(f"fit{suffix or ''}: loglik={history.loglik[-1]!r} "
              f"iters={len(history)}")
    for line in failures:
        print(f"fit failed: {line}", file=sys.stderr)
    if len(failures) == len(groups):
        raise CliError("all fits failed")
    _write_run_doc(cfg["out_dir"], "fit", cfg, prov)
    return EXIT_OK


def _expand_model_specs(specs) -> dict:
    """'tag=pattern' pairs -> {tag: [paths]}, with missing patterns reported."""
    by_tag, missing = {}, []
    for spec in specs:
        tag, sep, pattern = spec.partition("=")
        if not sep or not tag or not pattern:
            raise CliError(f"model spec must look like tag=path-glob: {spec!r}")
        paths = sorted(globlib.glob(pattern))
        if not paths:
            missing.append(spec)
        by_tag[tag] = paths
    if missing:
        raise CliError("no model files match: " + "; ".join(missing))
    return by_tag


def cmd_eval(cfg: dict, parser: _Parser) -> int:
    _require(cfg, "test", parser)
    _require(cfg, "model", parser)
    try:
        horizons = [int(h) for h in str(cfg["horizons"]).split(",") if h.strip()]
    except ValueError:
        parser.error("--horizons must be a comma-separated integer list")
    if not horizons or min(horizons) < 1:
        parser.error("--horizons must be positive integers")
    if cfg["mode"] not in ("marginal", "argmax", "sample"):
        parser.error("--mode must be marginal, argmax, or sample")
    test = load_dataset(cfg["test"])
    models_by_tag = {tag: [load_model(p) for p in paths]
                     for tag, paths in _expand_model_specs(cfg["model"]).items()}
    prov = _provenance(cfg)
    _ensure_out_dir(cfg["out_dir"])

    rng = np.random.default_rng(cfg["seed"]) if cfg["mode"] == "sample" else None
    try:
        report = evaluate(models_by_tag, test, horizons, mode=cfg["mode"],
                          rng=rng)
    except ValueError as e:
        raise CliError(str(e))
    header = _header_lines(prov)
    report.to_csv(os.path.join(cfg["out_dir"], "report.csv"),
                  header_lines=header)
    report.to_long_csv(os.path.join(cfg["out_dir"], "report_long.csv"),
                       header_lines=header)
    _write_run_doc(cfg["out_dir"], "eval", cfg, prov)
    print(report.summary())
    return EXIT_OK


def cmd_distill(cfg: dict, parser: _Parser) -> int:
    _require(cfg, "demos", parser)
    _positive(cfg, ("K", "max_iters", "restarts"), parser)
    try:
        fit_config = FitConfig(K=cfg["K"], mode=CLOSED_LOOP,
                               transition_kind=cfg["transition"],
                               lag=cfg["lag"], poly_degree=cfg["poly_degree"],
                               max_iters=cfg["max_iters"],
                               restarts=cfg["restarts"],
                               rel_tol=cfg["rel_tol"], seed=cfg["seed"])
    except ValueError as e:
        parser.error(str(e))
    demos = load_dataset(cfg["demos"])
    prov = _provenance(cfg)
    _ensure_out_dir(cfg["out_dir"])
    model = distill(demos, fit_config)
    path = os.path.join(cfg["out_dir"], "distilled.json")
    _write_model(path, model, prov)
    _write_run_doc(cfg["out_dir"], "distill", cfg, prov)
    print(f"distill: wrote {path} (K={model.K}, lag={cfg['lag']}, "
          f"params={count_params(model)})")
    return EXIT_OK


def cmd_rollout(cfg: dict, parser: _Parser) -> int:
    _positive(cfg, ("episodes",), parser)
    if bool(cfg["model"]) == bool(cfg["expert"]):
        parser.error("exactly one of --model or --expert is required")
    if cfg["mode"] not in ACT_MODES:
        parser.error(f"--mode must be one of {', '.join(ACT_MODES)}")
    env = default_config(cfg["env"], obs=cfg["obs"], seed=cfg["seed"])
    model = load_model(cfg["model"]) if cfg["model"] else None
    prov = _provenance(cfg)
    _ensure_out_dir(cfg["out_dir"])

    successes = 0
    for i in range(cfg["episodes"]):
        rng = np.random.default_rng((cfg["seed"], STREAM_ROLLOUT, i))
        ep = f"episode{i:03d}"
        if model is None:
            traj = simulate(env, expert_policy(env), T=cfg["steps"], rng=rng,
                            id=ep)
            ok = success_criterion(traj, env)
            save_dataset(os.path.join(cfg["out_dir"], f"{ep}.ndjson"), [traj])
        else:
            result = rollout(env, model, T=cfg["steps"], mode=cfg["mode"],
                             rng=rng, traj_id=ep)
            ok = result.success
            save_rollout(result,
                         os.path.join(cfg["out_dir"], f"{ep}.ndjson"),
                         os.path.join(cfg["out_dir"], f"{ep}_belief.csv"))
        successes += bool(ok)

    n = cfg["episodes"]
    rate = successes / n
    _write_run_doc(cfg["out_dir"], "rollout", cfg, prov,
                   results={"episodes": n, "successes": successes,
                            "success_rate": rate})
    print(f"rollout: success_rate={rate!r} ({successes}/{n})")
    return EXIT_OK


def cmd_count_params(cfg: dict, parser: _Parser) -> int:
    _require(cfg, "model", parser)
    model = load_model(cfg["model"])
    breakdown = count_params_breakdown(model)
    for name, value in breakdown.items():
        print(f"{name}={value}")
    print(f"total={count_params(model)}")
    return EXIT_OK


# -- parser ----------------------------------------------------------------------

def _add_common(p: _Parser) -> None:
    p.add_argument("--config", help="JSON config file; flags override it")
    p.add_argument("--seed", type=int)


def build_parser() -> _Parser:
    parser = _Parser(prog="rarhmm",
                     description="Switching linear system identification, "
                                 "forecasting, and policy distillation.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)

    p = sub.add_parser("simulate", help="generate train/test data and splits")
    _add_common(p)
    p.add_argument("--env", choices=ENVS)
    p.add_argument("--obs", choices=OBS_MODES)
    p.add_argument("--n-train", type=int, dest="n_train")
    p.add_argument("--n-test", type=int, dest="n_test")
    p.add_argument("--steps", type=int)
    p.add_argument("--policy", choices=("explore", "expert"))
    p.add_argument("--n-splits", type=int, dest="n_splits")
    p.add_argument("--split-size", type=int, dest="split_size")
    p.add_argument("--out-dir", dest="out_dir")

    p = sub.add_parser("fit", help="fit a hybrid model by EM")
    _add_common(p)
    p.add_argument("--data")
    p.add_argument("--manifest")
    p.add_argument("--K", type=int)
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--transition")
    p.add_argument("--lag", type=int)
    p.add_argument("--poly-degree", type=int, dest="poly_degree")
    p.add_argument("--max-iters", type=int, dest="max_iters")
    p.add_argument("--restarts", type=int)
    p.add_argument("--rel-tol", type=float, dest="rel_tol")
    p.add_argument("--init-model", dest="init_model")
    p.add_argument("--timings", action="store_true", default=None)
    p.add_argument("--out-dir", dest="out_dir")

    p = sub.add_parser("eval", help="score fitted models on a test set")
    _add_common(p)
    p.add_argument("--test")
    p.add_argument("--model", action="append",
                   help="tag=path-glob; repeat per model family")
    p.add_argument("--horizons")
    p.add_argument("--mode")
    p.add_argument("--out-dir", dest="out_dir")

    p = sub.add_parser("distill", help="fit a switching policy to demos")
    _add_common(p)
    p.add_argument("--demos")
    p.add_argument("--K", type=int)
    p.add_argument("--transition")
    p.add_argument("--lag", type=int)
    p.add_argument("--poly-degree", type=int, dest="poly_degree")
    p.add_argument("--max-iters", type=int, dest="max_iters")
    p.add_argument("--restarts", type=int)
    p.add_argument("--rel-tol", type=float, dest="rel_tol")
    p.add_argument("--timings", action="store_true", default=None)
    p.add_argument("--out-dir", dest="out_dir")

    p = sub.add_parser("rollout", help="run a policy or the scripted expert")
    _add_common(p)
    p.add_argument("--env", choices=ENVS)
    p.add_argument("--obs", choices=OBS_MODES)
    p.add_argument("--model")
    p.add_argument("--expert", action="store_true", default=None)
    p.add_argument("--episodes", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--mode")
    p.add_argument("--out-dir", dest="out_dir")

    p = sub.add_parser("count-params", help="print a model's parameter count")
    _add_common(p)
    p.add_argument("--model")
    return parser


_COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "eval": cmd_eval,
    "distill": cmd_distill,
    "rollout": cmd_rollout,
    "count-params": cmd_count_params,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _resolve_config(args.command, args)
        return _COMMANDS[args.command](cfg, parser)
    except CliError as e:
        print(f"rarhmm {args.command}: error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, ValueError, RuntimeError, FloatingPointError) as e:
        print(f"rarhmm {args.command}: error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

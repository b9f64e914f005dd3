"""Command line driver for the demonstration -> embedding -> RL workflow.

Subcommands::

    gen-demos    generate demonstrations (planner or scripted expert)
    train-embed  train the embedding over several seeds and keep the best
    eval-embed   score a trained embedding on held-out demonstrations
    train-rl     seed sweep per observation mode
    compare      join sweep summaries into one table

Every subcommand reads a flat JSON config (``--config``), then applies flag
overrides that mirror the config keys one to one (``--z_dim 10``).  Precedence
is flags, then config, then built-in defaults.  Unknown keys are an error.  A
run manifest written next to the outputs records the resolved config, input
digests and output digests; passing that manifest back as ``--config``
reproduces the run.

Exit status: 0 on success, 1 when a gate fails, 2 on a usage error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import time
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Callable

import numpy as np

from .data import build_triplet_dataset, load_trajectories
from .demos import DatasetError, PlannerConfig, build_dataset, default_planner_config, file_digest
from .embedding import (SelectionError, TrainConfig, TrainingDiverged, eval_metric, load_embedding,
                        save_embedding, select_best_seed, train_seeds, write_log_csv)
from .envs import ENV_IDS
from .rl import RLConfig, RLDiverged, seed_sweep

log = logging.getLogger("planspace")

EXIT_OK, EXIT_GATE, EXIT_USAGE = 0, 1, 2
MANIFEST = "run_manifest.json"


class UsageError(Exception):
    pass


class GateFailure(Exception):
    pass


@dataclass(frozen=True)
class Key:
    name: str
    default: Any
    kind: str  # int, float, str, bool, ints, floats, strs
    help: str = ""


def _keys(*keys: Key) -> dict[str, Key]:
    return {k.name: k for k in keys}


GEN_DEMOS = _keys(
    Key("env_id", "cartpole_swingup", "str", f"one of {', '.join(ENV_IDS)}"),
    Key("source", "planner", "str", "planner or scripted"),
    Key("count", 200, "int", "number of successful demonstrations to keep"),
    Key("seed", 0, "int"),
    Key("min_success_rate", 0.5, "float", "gate: fail below this success rate"),
    Key("max_steps", 1000, "int", "step limit for scripted experts"),
    Key("planner_samples", None, "int", "candidate segments per iteration (env default if unset)"),
    Key("planner_segment_length", None, "int"),
    Key("planner_iterations", None, "int"),
    Key("planner_path_weight", None, "float"),
    Key("planner_monotone", None, "bool", "only accept segments that do not raise goal cost"),
)

TRAIN_EMBED = _keys(
    Key("demos", None, "str", "trajectories.jsonl from gen-demos"),
    Key("holdout", 0.2, "float", "fraction of trajectories kept out of training and used for seed selection"),
    Key("seeds", [0, 1, 2, 3, 4], "ints"),
    Key("z_dim", 3, "int"),
    Key("lam", 0.5, "float"),
    Key("steps", 50_000, "int"),
    Key("batch_size", 256, "int"),
    Key("lr", 1e-3, "float"),
    Key("triplet_steps", [1, 3, 5, 10, 30], "ints"),
    Key("variance_doubling", True, "bool"),
    Key("hidden", [64, 64], "ints"),
    Key("eval_every", 1000, "int"),
    Key("log_every", 10, "int"),
    Key("objective", "elbo", "str", "elbo or direct"),
    Key("normalize", True, "bool"),
    Key("max_metric", None, "float", "gate: fail if the best mean absolute error exceeds this"),
    Key("workers", 1, "int"),
)

EVAL_EMBED = _keys(
    Key("model", None, "str", "model.json from train-embed"),
    Key("demos", None, "str", "held-out trajectories.jsonl"),
    Key("max_metric", None, "float", "gate: fail if mean absolute error exceeds this"),
)

TRAIN_RL = _keys(
    Key("env_id", "cartpole_swingup", "str"),
    Key("obs_modes", ["raw"], "strs", "raw, trig, embedded, augmented"),
    Key("embedding", None, "str", "model.json; required by embedded/augmented"),
    Key("seeds", [0, 1, 2, 3, 4], "ints"),
    Key("discount", 0.99, "float"),
    Key("horizon", None, "int", "episode length (env default if unset)"),
    Key("batch_episodes", 20, "int"),
    Key("updates", 500, "int"),
    Key("lr", 3e-3, "float"),
    Key("hidden", [32, 32], "ints"),
    Key("init_log_std", -0.5, "float"),
    Key("normalize_obs", True, "bool"),
    Key("value_lr", 3e-3, "float"),
    Key("value_iters", 20, "int"),
    Key("value_hidden", [32, 32], "ints"),
    Key("smooth_window", 10, "int"),
    Key("eval_episodes", 200, "int"),
    Key("eval_seed", 12345, "int"),
    Key("gate_modes", [], "strs", "modes whose policies must beat the do-nothing band"),
    Key("gate_min_seeds", 4, "int", "seeds per gated mode that must beat the band"),
    Key("workers", 1, "int"),
)

COMPARE = _keys(
    Key("sweeps", [], "strs", "train-rl output directories, one per observation mode"),
)


# parsing ---------------------------------------------------------------------------------------

def _parse_bool(v) -> bool:
    if isinstance(v, bool):
        return v
    if isinstance(v, str) and v.lower() in ("1", "true", "yes", "on"):
        return True
    if isinstance(v, str) and v.lower() in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _scalar(kind: str, v):
    if kind == "int":
        if isinstance(v, bool) or (isinstance(v, float) and not v.is_integer()):
            raise ValueError(f"not an integer: {v!r}")
        return int(v)
    if kind == "float":
        if isinstance(v, bool):
            raise ValueError(f"not a number: {v!r}")
        return float(v)
    if kind == "bool":
        return _parse_bool(v)
    if not isinstance(v, str):
        raise ValueError(f"not a string: {v!r}")
    return v


def coerce(key: Key, v):
    if v is None:
        return None
    if key.kind in ("ints", "floats", "strs"):
        if isinstance(v, str):
            v = [p.strip() for p in v.split(",") if p.strip()]
        if not isinstance(v, list):
            raise ValueError(f"expected a list, got {v!r}")
        return [_scalar(key.kind[:-1], x) for x in v]
    return _scalar(key.kind, v)


def load_config(path) -> dict:
    """Read a flat JSON config, a packaged preset name, or a run manifest."""
    p = Path(path)
    if not p.exists():
        preset = resources.files("planspace") / "configs" / f"{path}.json"
        if not preset.is_file():
            raise UsageError(f"config file not found: {path}")
        text = preset.read_text()
    else:
        text = p.read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise UsageError(f"config {path} must be a JSON object")
    if "command" in data and "config" in data:
        return data["config"]
    return data


def resolve(keys: dict[str, Key], config: dict, flags: dict) -> dict:
    unknown = sorted(set(config) - set(keys))
    if unknown:
        raise UsageError(f"unknown config key(s): {', '.join(unknown)}")
    out = {name: k.default for name, k in keys.items()}
    for source in (config, flags):
        for name, v in source.items():
            try:
                out[name] = coerce(keys[name], v)
            except ValueError as exc:
                raise UsageError(f"bad value for {name}: {exc}") from exc
    return out


# manifest ---------------------------------------------------------------------------------------

@dataclass
class RunManifest:
    command: str
    config: dict
    seeds: list[int]
    inputs: dict[str, str] = field(default_factory=dict)    # path -> sha256
    outputs: dict[str, str] = field(default_factory=dict)   # path relative to --out -> sha256
    wall_clock_s: float = 0.0
    status: int = EXIT_OK

    def write(self, out_dir: Path) -> None:
        (out_dir / MANIFEST).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")


def _digests(paths) -> dict[str, str]:
    return {str(p): file_digest(p) for p in paths}


def _output_digests(out: Path) -> dict[str, str]:
    return {str(p.relative_to(out)): file_digest(p)
            for p in sorted(out.rglob("*")) if p.is_file() and p.name != MANIFEST}


def _require(path: str | None, key: str) -> Path:
    if path is None:
        raise UsageError(f"missing required input: set {key}")
    p = Path(path)
    if not p.exists():
        raise UsageError(f"missing input {key}: {p} does not exist")
    return p


# commands ---------------------------------------------------------------------------------------

def cmd_gen_demos(cfg: dict, out: Path) -> tuple[list[Path], list[int]]:
    base = default_planner_config(cfg["env_id"])
    overrides = {f: cfg[f"planner_{f}"] for f in ("samples", "segment_length", "iterations", "path_weight", "monotone")
                 if cfg[f"planner_{f}"] is not None}
    planner = PlannerConfig(**{**asdict(base), **overrides})
    try:
        build_dataset(cfg["env_id"], cfg["source"], cfg["count"], cfg["seed"], out, cfg["min_success_rate"],
                      planner, cfg["max_steps"])
    except DatasetError as exc:
        raise GateFailure(str(exc)) from exc
    return [], [cfg["seed"]]


def _split(trajs, holdout: float):
    if not 0.0 <= holdout < 1.0:
        raise UsageError("holdout must lie in [0, 1)")
    n_eval = math.ceil(len(trajs) * holdout)
    if holdout > 0 and n_eval < 2:
        n_eval = 2
    if len(trajs) - n_eval < 1:
        raise UsageError(f"{len(trajs)} trajectories are too few for holdout {holdout}")
    if n_eval == 0:
        return trajs, trajs
    return trajs[:-n_eval], trajs[-n_eval:]


def cmd_train_embed(cfg: dict, out: Path) -> tuple[list[Path], list[int]]:
    demos = _require(cfg["demos"], "demos")
    train, held = _split(load_trajectories(demos), cfg["holdout"])
    tc = TrainConfig(z_dim=cfg["z_dim"], lam=cfg["lam"], steps=cfg["steps"], batch_size=cfg["batch_size"],
                     lr=cfg["lr"], triplet_steps=tuple(cfg["triplet_steps"]),
                     variance_doubling=cfg["variance_doubling"], hidden=tuple(cfg["hidden"]),
                     eval_every=cfg["eval_every"], log_every=cfg["log_every"], objective=cfg["objective"],
                     normalize=cfg["normalize"])
    data = build_triplet_dataset(train, tc.triplet_steps)
    try:
        runs = train_seeds(tc, data, cfg["seeds"], held, cfg["workers"])
    except TrainingDiverged as exc:
        raise GateFailure(str(exc)) from exc

    selection = {"seeds": {}, "best_seed": None}
    for r in runs:
        d = out / f"seed_{r.seed}"
        save_embedding(r.model, d / "model.json", r.config)
        write_log_csv(r.log, d / "log.csv")
        rep = r.report
        selection["seeds"][str(r.seed)] = None if rep is None or rep.degenerate else {
            "mean_abs_error": rep.mean_abs_error, "std_abs_error": rep.std_abs_error}
    try:
        best = select_best_seed(runs)
    except SelectionError as exc:
        (out / "selection.json").write_text(json.dumps(selection, indent=2, sort_keys=True) + "\n")
        raise GateFailure(str(exc)) from exc
    selection["best_seed"] = best.seed
    save_embedding(best.model, out / "best" / "model.json", best.config)
    write_log_csv(best.log, out / "best" / "log.csv")
    (out / "selection.json").write_text(json.dumps(selection, indent=2, sort_keys=True) + "\n")
    log.info("best seed %d, mean abs error %.4f", best.seed, best.report.mean_abs_error)
    if cfg["max_metric"] is not None and not best.report.mean_abs_error <= cfg["max_metric"]:
        raise GateFailure(f"best mean absolute error {best.report.mean_abs_error:.4f} exceeds {cfg['max_metric']}")
    return [demos], list(cfg["seeds"])


def cmd_eval_embed(cfg: dict, out: Path) -> tuple[list[Path], list[int]]:
    model_path = _require(cfg["model"], "model")
    demos = _require(cfg["demos"], "demos")
    report = eval_metric(load_embedding(model_path), load_trajectories(demos))
    with (out / "eval.csv").open("w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("index", "d", "y", "abs_error"))
        for i, row in enumerate(zip(report.d, report.y, report.errors)):
            w.writerow((i, *(repr(float(v)) for v in row)))
    summary = {"C": report.C, "mean_abs_error": report.mean_abs_error, "std_abs_error": report.std_abs_error,
               "degenerate": report.degenerate, "trajectories": len(report.d)}
    (out / "eval.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    if report.degenerate:
        raise GateFailure("embedding maps every start and end to the same point")
    if cfg["max_metric"] is not None and not report.mean_abs_error <= cfg["max_metric"]:
        raise GateFailure(f"mean absolute error {report.mean_abs_error:.4f} exceeds {cfg['max_metric']}")
    return [model_path, demos], []


def cmd_train_rl(cfg: dict, out: Path) -> tuple[list[Path], list[int]]:
    modes = cfg["obs_modes"]
    if not modes:
        raise UsageError("obs_modes is empty")
    inputs, model = [], None
    if any(m in ("embedded", "augmented") for m in modes) or cfg["embedding"] is not None:
        path = _require(cfg["embedding"], "embedding")
        model = load_embedding(path)
        inputs.append(path)
    rc_fields = {f: cfg[f] for f in ("env_id", "discount", "horizon", "batch_episodes", "updates", "lr",
                                     "hidden", "init_log_std", "normalize_obs", "value_lr", "value_iters",
                                     "value_hidden", "smooth_window", "eval_episodes", "eval_seed")}
    failed = []
    for mode in modes:
        rc = RLConfig(**rc_fields, obs_mode=mode, embedding=cfg["embedding"])
        try:
            report = seed_sweep(cfg["env_id"], rc, cfg["seeds"], model if mode in ("embedded", "augmented") else None,
                                label=mode, workers=cfg["workers"])
        except RLDiverged as exc:
            raise GateFailure(f"{mode}: {exc}") from exc
        report.write(out / mode)
        summary = report.summary()
        log.info("%s: final mean %.2f, variance %.2f", mode, summary["final_mean"], summary["final_variance"])
        if mode in cfg["gate_modes"] and summary.get("seeds_above_do_nothing", 0) < cfg["gate_min_seeds"]:
            failed.append(f"{mode}: {summary.get('seeds_above_do_nothing', 0)} seeds above the do-nothing band, "
                          f"need {cfg['gate_min_seeds']}")
    if failed:
        raise GateFailure("; ".join(failed))
    return inputs, list(cfg["seeds"])


COMPARE_COLUMNS = ("label", "seeds", "final_mean", "band_low", "band_high", "best_ever_max", "final_variance",
                   "eval_mean", "do_nothing_mean", "seeds_above_do_nothing")


def cmd_compare(cfg: dict, out: Path) -> tuple[list[Path], list[int]]:
    if not cfg["sweeps"]:
        raise UsageError("sweeps is empty")
    inputs, rows, curves = [], [], {}
    for d in cfg["sweeps"]:
        sj = _require(str(Path(d) / "summary.json"), "sweeps")
        sc = _require(str(Path(d) / "summary.csv"), "sweeps")
        inputs += [sj, sc]
        s = json.loads(sj.read_text())
        ev = s.get("eval_mean")
        rows.append({
            "label": s["label"],
            "seeds": len(s["completed_seeds"]),
            "final_mean": s["final_mean"],
            "band_low": s["final_band"][0],
            "band_high": s["final_band"][1],
            "best_ever_max": s["best_ever_max"],
            "final_variance": s["final_variance"],
            "eval_mean": None if ev is None else float(np.mean(ev)),
            "do_nothing_mean": s.get("do_nothing_mean"),
            "seeds_above_do_nothing": s.get("seeds_above_do_nothing"),
        })
        with sc.open() as f:
            curves[s["label"]] = list(csv.DictReader(f))

    with (out / "comparison.csv").open("w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(COMPARE_COLUMNS)
        for r in rows:
            w.writerow(["" if r[c] is None else (repr(r[c]) if isinstance(r[c], float) else r[c])
                        for c in COMPARE_COLUMNS])
    labels = list(curves)
    n = min(len(c) for c in curves.values())
    with (out / "curves.csv").open("w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["update"] + [f"{lab}_{col}" for lab in labels for col in ("mean", "band_low", "band_high", "best_ever")])
        for i in range(n):
            w.writerow([i] + [curves[lab][i][col] for lab in labels for col in ("mean", "band_low", "band_high", "best_ever")])
    (out / "comparison.json").write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n")
    return inputs, []


COMMANDS: dict[str, tuple[dict[str, Key], Callable, str]] = {
    "gen-demos": (GEN_DEMOS, cmd_gen_demos, "generate demonstration trajectories"),
    "train-embed": (TRAIN_EMBED, cmd_train_embed, "train the embedding over several seeds, keep the best"),
    "eval-embed": (EVAL_EMBED, cmd_eval_embed, "score an embedding on held-out demonstrations"),
    "train-rl": (TRAIN_RL, cmd_train_rl, "policy-gradient seed sweep per observation mode"),
    "compare": (COMPARE, cmd_compare, "join sweep summaries into one table"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="planspace", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (keys, _, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, argument_default=argparse.SUPPRESS)
        p.add_argument("--config", help="JSON config, preset name (lowz, highz) or run manifest")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("-v", "--verbose", action="store_true")
        for k in keys.values():
            metavar = "A,B,..." if k.kind in ("ints", "floats", "strs") else k.kind.upper()
            default = ",".join(map(str, k.default)) if isinstance(k.default, list) else k.default
            p.add_argument(f"--{k.name}", metavar=metavar, help=f"{k.help} (default: {default})".lstrip())
    return parser


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = vars(parser.parse_args(argv))
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    command = args.pop("command")
    out = Path(args.pop("out"))
    config_path = args.pop("config", None)
    verbose = args.pop("verbose", False)
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO, format="%(levelname)s %(message)s")
    keys, fn, _ = COMMANDS[command]

    t0 = time.perf_counter()
    try:
        config = load_config(config_path) if config_path else {}
        cfg = resolve(keys, config, args)
        out.mkdir(parents=True, exist_ok=True)
        inputs, seeds = fn(cfg, out)
        status, message = EXIT_OK, None
    except UsageError as exc:
        print(f"planspace {command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except GateFailure as exc:
        inputs, seeds = [], []
        status, message = EXIT_GATE, str(exc)
        print(f"planspace {command}: gate failed: {exc}", file=sys.stderr)
    except ValueError as exc:
        print(f"planspace {command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    manifest = RunManifest(command, cfg, seeds, _digests(inputs), _output_digests(out),
                           round(time.perf_counter() - t0, 3), status)
    manifest.write(out)
    if message is None:
        log.info("%s finished in %.1f s; outputs in %s", command, manifest.wall_clock_s, out)
    return status


def main() -> None:
    sys.exit(run())

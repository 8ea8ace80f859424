"""Experiment orchestration: configs, runs, beta sweeps, trajectory files.

A run config is a TOML file::

    version = 1
    name = "toy-apt"
    steps = 50000
    record_every = 100

    [problem]
    name = "toy2d"

    [aggregator]
    name = "cagrad"
    c = 0.4

    [optimizer]
    name = "adam"
    lr = 1e-3
    beta1 = "apt"        # or a number in [0, 1)

    [init]
    points = [[-8.5, 7.5], [9.0, 9.0]]

Trajectories are JSON Lines: one header record, then ``step`` records every
``record_every`` steps, and a ``final`` (or ``abort``) record per
initialization. Summaries are CSV.
"""
from __future__ import annotations

import copy
import csv
import io
import json
import math
import os
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import aggregators as agg
from .diagnostics import BenchmarkScores, delta_m, step_diagnostics
from .errors import ConfigError, InvalidInputError, NumericalFailure
from .optimizers import (OPTIMIZERS, MomentumBounds, Optimizer, OptimizerConfig,
                         tracking_bound_constant)
from .problems import PROBLEMS, eval_tasks, make_problem, pareto_stationarity

CONFIG_VERSION = 1
OUTPUT_ENV = "APTMTL_OUT"
THETA_MAX_DIM = 16
DEFAULT_BETA = 0.9

_TOP_KEYS = {"version", "name", "steps", "record_every", "seed", "grad_noise", "stop_tol",
             "metric_offset", "problem", "aggregator", "optimizer", "init", "output", "sweep"}
_AGG_KEYS = {"ls": set(), "pcgrad": {"seed"}, "mgda": {"max_iter"}, "cagrad": {"c", "steps"},
             "ldp": {"xi", "per_block"}}
_OPT_KEYS = {"name", "lr", "beta1", "beta2", "eps", "weight_decay", "beta_min", "beta_max",
             "ns_iterations", "halve_lr_at"}
_INIT_KEYS = {"points", "seed", "count", "scale"}
_SWEEP_KEYS = {"aggregators", "optimizers", "lr"}


def _reject_unknown(section: str, data: dict, allowed: set):
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")


@dataclass
class RunConfig:
    name: str
    problem: str
    aggregator: str
    optimizer: dict
    steps: int
    problem_params: dict = field(default_factory=dict)
    aggregator_params: dict = field(default_factory=dict)
    record_every: int = 1
    seed: int = 0
    init_points: list | None = None
    init_seed: int | None = None
    init_count: int = 1
    init_scale: float = 1.0
    grad_noise: float = 0.0
    stop_tol: float | None = None
    metric_offset: float = 1.0
    output_dir: str | None = None
    sweep: dict = field(default_factory=dict)
    version: int = CONFIG_VERSION

    def __post_init__(self):
        if self.version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {self.version}")
        if not isinstance(self.steps, int) or self.steps < 1:
            raise ConfigError("steps must be an integer >= 1")
        if not isinstance(self.record_every, int) or self.record_every < 1:
            raise ConfigError("record_every must be an integer >= 1")
        if self.problem not in PROBLEMS:
            raise ConfigError(f"unknown problem {self.problem!r}")
        if self.aggregator not in _AGG_KEYS:
            raise ConfigError(f"unknown aggregator {self.aggregator!r}")
        _reject_unknown("aggregator", self.aggregator_params, _AGG_KEYS[self.aggregator])
        _reject_unknown("optimizer", self.optimizer, _OPT_KEYS)
        if self.optimizer.get("name", "adam") not in OPTIMIZERS:
            raise ConfigError(f"unknown optimizer {self.optimizer.get('name')!r}")
        if self.grad_noise < 0:
            raise ConfigError("grad_noise must be >= 0")
        self.optimizer_config()  # validate eagerly

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        data = copy.deepcopy(data)
        _reject_unknown("top level", data, _TOP_KEYS)
        try:
            problem = dict(data.pop("problem"))
            aggregator = dict(data.pop("aggregator"))
            optimizer = dict(data.pop("optimizer"))
        except KeyError as e:
            raise ConfigError(f"missing section [{e.args[0]}]") from None
        init = dict(data.pop("init", {}))
        _reject_unknown("init", init, _INIT_KEYS)
        output = dict(data.pop("output", {}))
        _reject_unknown("output", output, {"dir"})
        sweep = dict(data.pop("sweep", {}))
        _reject_unknown("sweep", sweep, _SWEEP_KEYS)
        try:
            problem_name = problem.pop("name")
            aggregator_name = aggregator.pop("name")
        except KeyError:
            raise ConfigError("[problem] and [aggregator] need a 'name'") from None
        if "steps" not in data:
            raise ConfigError("missing 'steps'")
        return cls(
            name=str(data.pop("name", "run")),
            problem=problem_name,
            problem_params=problem,
            aggregator=aggregator_name,
            aggregator_params=aggregator,
            optimizer=optimizer,
            init_points=init.get("points"),
            init_seed=init.get("seed"),
            init_count=int(init.get("count", 1)),
            init_scale=float(init.get("scale", 1.0)),
            output_dir=output.get("dir"),
            sweep=sweep,
            **data,
        )

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path, "rb") as fh:
            try:
                data = tomllib.load(fh)
            except tomllib.TOMLDecodeError as e:
                raise ConfigError(f"{path}: {e}") from None
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        out = {
            "version": self.version, "name": self.name, "steps": self.steps,
            "record_every": self.record_every, "seed": self.seed, "grad_noise": self.grad_noise,
            "metric_offset": self.metric_offset,
            "problem": {"name": self.problem, **self.problem_params},
            "aggregator": {"name": self.aggregator, **self.aggregator_params},
            "optimizer": dict(self.optimizer),
        }
        if self.stop_tol is not None:
            out["stop_tol"] = self.stop_tol
        init = {}
        if self.init_points is not None:
            init["points"] = self.init_points
        if self.init_seed is not None:
            init.update(seed=self.init_seed, count=self.init_count, scale=self.init_scale)
        if init:
            out["init"] = init
        return out

    def optimizer_config(self) -> OptimizerConfig:
        opt = dict(self.optimizer)
        beta1 = opt.pop("beta1", DEFAULT_BETA)
        adaptive = beta1 == "apt"
        if beta1 == "default":
            beta1 = DEFAULT_BETA
        bounds = MomentumBounds(opt.pop("beta_min", 0.1), opt.pop("beta_max", 0.9))
        try:
            return OptimizerConfig(beta1=DEFAULT_BETA if adaptive else float(beta1),
                                   adaptive=adaptive, bounds=bounds, **opt)
        except (InvalidInputError, TypeError, ValueError) as e:
            raise ConfigError(f"[optimizer]: {e}") from None

    def build_problem(self):
        try:
            return make_problem(self.problem, **self.problem_params)
        except (InvalidInputError, TypeError) as e:
            raise ConfigError(f"[problem]: {e}") from None

    def initial_points(self, spec) -> list[np.ndarray]:
        if self.init_points is not None:
            pts = [np.asarray(p, dtype=np.float64).ravel() for p in self.init_points]
        elif self.init_seed is not None:
            rng = np.random.default_rng(self.init_seed)
            pts = [self.init_scale * rng.standard_normal(spec.dim) for _ in range(self.init_count)]
        elif "inits" in spec.meta:
            pts = [np.asarray(p, dtype=np.float64) for p in spec.meta["inits"]]
        else:
            pts = [np.zeros(spec.dim)]
        for p in pts:
            if p.size != spec.dim:
                raise ConfigError(f"initial point of length {p.size}, problem has dim {spec.dim}")
        return pts


def _num(x):
    """JSON-safe float (None for missing / non-finite)."""
    if x is None:
        return None
    x = float(x)
    return x if math.isfinite(x) else None


def _aggregate(cfg: RunConfig, tg, step: int):
    params = dict(cfg.aggregator_params)
    if cfg.aggregator == "pcgrad":
        params["seed"] = int(params.get("seed", cfg.seed)) * 1_000_003 + step
    return agg.aggregate(cfg.aggregator, tg, **params)


def _metric_scores(cfg: RunConfig, spec, losses):
    optimum = spec.task_optimum_losses()
    if optimum is None:
        return None
    scores = BenchmarkScores(cfg.metric_offset + np.asarray(losses),
                             cfg.metric_offset + optimum, np.zeros(len(optimum), dtype=bool))
    return delta_m(scores)


def run_single(cfg: RunConfig, spec, theta0, run_id: str, emit) -> dict:
    """Optimize from one initial point, emitting records through ``emit``."""
    ocfg = cfg.optimizer_config()
    opt = Optimizer(ocfg)
    params = agg.TaskGradients(np.zeros((1, spec.dim)), spec.layout).split(np.array(theta0, dtype=np.float64))
    params = {k: np.array(v) for k, v in params.items()}
    noise_rng = np.random.default_rng([cfg.seed, zlib.crc32(run_id.encode())]) if cfg.grad_noise else None
    keep_theta = spec.dim <= THETA_MAX_DIM

    def flat(p):
        return np.concatenate([np.ravel(v) for v in p.values()])

    def record(kind, step, theta, losses, **extra):
        rec = {"type": kind, "run_id": run_id, "step": step}
        if keep_theta:
            rec["theta"] = [_num(x) for x in theta]
        rec["losses"] = [_num(x) for x in losses]
        rec.update(extra)
        emit(rec)

    theta = flat(params)
    losses, tg = eval_tasks(spec, theta)
    record("step", 0, theta, losses)
    prev_update = None
    step = 0
    for step in range(1, cfg.steps + 1):
        if noise_rng is not None:
            tg = agg.TaskGradients(tg.flat + cfg.grad_noise * noise_rng.standard_normal(tg.flat.shape),
                                   tg.layout)
        result = _aggregate(cfg, tg, step)
        new_params, report = opt.step(params, result)
        new_theta = flat(new_params)
        update = theta - new_theta
        new_losses, new_tg = eval_tasks(spec, new_theta)
        if not (np.all(np.isfinite(new_theta)) and np.all(np.isfinite(new_losses))):
            record("abort", step, theta, losses, reason="non-finite loss or parameters")
            raise NumericalFailure(f"{run_id}: non-finite values at step {step}", step=step)
        is_record = step % cfg.record_every == 0 or step == cfg.steps
        stationarity = None
        if is_record or (cfg.stop_tol is not None and step % cfg.record_every == 0):
            stationarity = pareto_stationarity(spec, new_theta).min_norm_value
        if is_record:
            d = step_diagnostics(step, tg, result.combined, update, beta=report.beta_used,
                                 rho=report.rho, tracking_error=report.tracking_error_norm,
                                 prev_update=prev_update).to_dict()
            d.pop("step")
            d["pareto_min_norm"] = stationarity
            record("step", step, new_theta, new_losses, **_clean(d))
        params, theta, losses, tg, prev_update = new_params, new_theta, new_losses, new_tg, update
        if stationarity is not None and cfg.stop_tol is not None and stationarity <= cfg.stop_tol:
            break

    report_ = pareto_stationarity(spec, theta)
    mon = opt.monitor
    bounds = ocfg.bounds
    final = {
        "pareto_min_norm": _num(report_.min_norm_value),
        "pareto_weights": [_num(w) for w in report_.weights.weights],
        "delta_m": _num(_metric_scores(cfg, spec, losses)),
        "tracking_residual_max": _num(mon.max_residual),
        "tracking_ratio": _num(mon.ratio),
        "tracking_bound": _num(tracking_bound_constant(max(bounds.beta_max, ocfg.beta1))),
        "steps_run": step,
    }
    record("final", step, theta, losses, **final)
    return final


def _clean(d: dict) -> dict:
    out = {}
    for k, v in d.items():
        if isinstance(v, dict):
            out[k] = {kk: _num(vv) for kk, vv in v.items()}
        elif isinstance(v, list):
            out[k] = [_num(x) for x in v]
        elif isinstance(v, bool) or v is None:
            out[k] = v
        else:
            out[k] = _num(v)
    return out


def _dumps(rec) -> str:
    return json.dumps(rec, separators=(",", ":"), allow_nan=False)


def output_dir(cfg: RunConfig, override=None) -> Path:
    return Path(override or os.environ.get(OUTPUT_ENV) or cfg.output_dir or "runs")


@dataclass
class RunResult:
    trajectory: Path | None
    records: list
    summary: list
    failed: bool = False


def run(cfg: RunConfig, out_dir=None, write: bool = True, summary_file: bool = True) -> RunResult:
    """Run every initial point of ``cfg``; write ``<name>.jsonl`` and ``<name>_summary.csv``.

    The summary carries wall-clock times, so it is the one output that differs
    between reruns; sweeps skip it. On numerical failure the trajectory is still written (ending with an
    ``abort`` record) and :class:`NumericalFailure` is re-raised.
    """
    spec = cfg.build_problem()
    points = cfg.initial_points(spec)
    records = [{"type": "header", "version": CONFIG_VERSION, "config": cfg.to_dict(),
                "layout": [[n, list(s)] for n, s in spec.layout], "num_tasks": spec.num_tasks}]
    clocks = {}
    failure = None
    for i, p in enumerate(points):
        run_id = f"{cfg.name}/init{i}"
        t0 = time.perf_counter()
        try:
            run_single(cfg, spec, p, run_id, records.append)
        except NumericalFailure as e:
            failure = e
            break
        finally:
            clocks[run_id] = time.perf_counter() - t0
    summary = summarize(records)
    for row in summary:
        row["wall_clock"] = round(clocks.get(row["run_id"], 0.0), 6)
    path = None
    if write:
        d = output_dir(cfg, out_dir)
        d.mkdir(parents=True, exist_ok=True)
        path = d / f"{cfg.name}.jsonl"
        write_trajectory(path, records)
        if summary_file:
            write_summary(d / f"{cfg.name}_summary.csv", summary)
    if failure is not None:
        raise failure
    return RunResult(path, records, summary)


def write_trajectory(path, records):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(_dumps(rec) + "\n")


def read_trajectory(path) -> list[dict]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    if not records or records[0].get("type") != "header":
        raise InvalidInputError(f"{path}: missing trajectory header")
    return records


SUMMARY_FIELDS = ["run_id", "status", "steps", "final_losses", "pareto_min_norm",
                  "mean_tracking_error", "mean_effective_rank", "final_effective_rank",
                  "mean_update_cos", "delta_m", "tracking_ratio", "tracking_residual_max",
                  "wall_clock"]


def _mean(xs):
    xs = [x for x in xs if x is not None]
    return float(np.mean(xs)) if xs else None


def _block_mean(erank):
    vals = [v for v in (erank or {}).values() if v is not None]
    return float(np.mean(vals)) if vals else None


def summarize(records: list[dict]) -> list[dict]:
    """Summary rows computed purely from trajectory records (wall clock excluded)."""
    runs: dict[str, list] = {}
    for rec in records:
        if rec.get("type") in ("step", "final", "abort"):
            runs.setdefault(rec["run_id"], []).append(rec)
    rows = []
    for run_id, recs in runs.items():
        steps = [r for r in recs if r["type"] == "step" and r["step"] > 0]
        end = recs[-1]
        eranks = [_block_mean(r.get("effective_rank")) for r in steps]
        rows.append({
            "run_id": run_id,
            "status": "ok" if end["type"] == "final" else "aborted",
            "steps": end["step"],
            "final_losses": end.get("losses"),
            "pareto_min_norm": end.get("pareto_min_norm"),
            "mean_tracking_error": _mean(r.get("tracking_error") for r in steps),
            "mean_effective_rank": _mean(eranks),
            "final_effective_rank": eranks[-1] if eranks else None,
            "mean_update_cos": _mean(r.get("update_cos_prev") for r in steps),
            "delta_m": end.get("delta_m"),
            "tracking_ratio": end.get("tracking_ratio"),
            "tracking_residual_max": end.get("tracking_residual_max"),
        })
    return rows


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, list):
        return ";".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def summary_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_FIELDS)
    for row in rows:
        w.writerow([_fmt(row.get(k)) for k in SUMMARY_FIELDS])
    return buf.getvalue()


def write_summary(path, rows):
    Path(path).write_text(summary_csv(rows), encoding="utf-8")


def pareto_check(path, tol: float) -> dict[str, dict]:
    """Per-initialization verdict: is the final point Pareto-stationary within ``tol``?"""
    records = read_trajectory(path)
    header = records[0]
    finals = [r for r in records if r.get("type") in ("final", "abort")]
    if not finals:
        raise InvalidInputError(f"{path}: no final records")
    spec = None
    verdicts = {}
    for rec in finals:
        if rec.get("theta") is not None and None not in rec["theta"]:
            if spec is None:
                spec = RunConfig.from_dict(header["config"]).build_problem()
            value = pareto_stationarity(spec, rec["theta"]).min_norm_value
        elif rec.get("pareto_min_norm") is not None:
            value = rec["pareto_min_norm"]
        else:
            raise InvalidInputError(f"{path}: {rec['run_id']} has neither theta nor pareto_min_norm")
        verdicts[rec["run_id"]] = {"min_norm": value, "reached": bool(value <= tol),
                                   "aborted": rec["type"] == "abort"}
    return verdicts


def export_series(path, what: str) -> str:
    """Plain CSV series for external plotting: ``cos``, ``proj``, ``erank`` or ``traj``."""
    records = read_trajectory(path)
    steps = [r for r in records if r.get("type") == "step"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    k = records[0].get("num_tasks", 0)
    if what == "cos":
        w.writerow(["run_id", "step"] + [f"cos_{i}" for i in range(k)])
        for r in steps:
            if r.get("cos_combined_vs_task") is not None:
                w.writerow([r["run_id"], r["step"]] + [_fmt(x) for x in r["cos_combined_vs_task"]])
    elif what == "proj":
        w.writerow(["run_id", "step"] + [f"proj_{i}" for i in range(k)] + ["ratio", "sign_mixed"])
        for r in steps:
            if r.get("proj_norms") is not None:
                w.writerow([r["run_id"], r["step"]] + [_fmt(x) for x in r["proj_norms"]]
                           + [_fmt(r.get("proj_norm_ratio")), int(bool(r.get("sign_mixed")))])
    elif what == "erank":
        blocks = [n for n, s in records[0]["layout"] if len(s) == 2]
        w.writerow(["run_id", "step"] + blocks)
        for r in steps:
            er = r.get("effective_rank")
            if er is not None and r["step"] > 0:
                w.writerow([r["run_id"], r["step"]] + [_fmt(er.get(b)) for b in blocks])
    elif what == "traj":
        rows = [r for r in records if r.get("type") in ("step", "final")]
        if any("theta" not in r for r in rows):
            raise InvalidInputError("theta was not recorded (dimension > 16)")
        dim = len(rows[0]["theta"]) if rows else 0
        w.writerow(["run_id", "step"] + [f"theta_{i}" for i in range(dim)]
                   + [f"loss_{i}" for i in range(k)])
        for r in rows:
            if r["type"] == "final":
                continue
            w.writerow([r["run_id"], r["step"]] + [_fmt(x) for x in r["theta"]]
                       + [_fmt(x) for x in r["losses"]])
    else:
        raise InvalidInputError(f"unknown series {what!r}; expected cos, proj, erank or traj")
    return buf.getvalue()


def parse_beta(token) -> float:
    if isinstance(token, str) and token.strip() == "default":
        return DEFAULT_BETA
    b = float(token)
    if not 0.0 <= b < 1.0:
        raise ConfigError(f"beta {b} outside [0, 1)")
    return b


def _cell_config(cfg: RunConfig, aggregator: str, optimizer: str, beta: float, seed: int) -> RunConfig:
    d = cfg.to_dict()
    d["name"] = f"{cfg.name}_{aggregator}_{optimizer}_b{beta:g}_s{seed}"
    agg_params = d["aggregator"] if d["aggregator"]["name"] == aggregator else {}
    d["aggregator"] = {"name": aggregator, **{k: v for k, v in agg_params.items() if k != "name"}}
    opt = {k: v for k, v in d["optimizer"].items() if k in ("beta2", "eps", "weight_decay",
                                                             "ns_iterations", "beta_min", "beta_max")}
    opt.update(name=optimizer, beta1=beta)
    lr = cfg.sweep.get("lr", {}).get(optimizer)
    if lr is not None:
        opt["lr"] = lr
    elif d["optimizer"].get("name") == optimizer and "lr" in d["optimizer"]:
        opt["lr"] = d["optimizer"]["lr"]
    if optimizer != "adamw":
        opt.pop("weight_decay", None)
    d["optimizer"] = opt
    d["seed"] = seed
    init = d.get("init", {})
    if "points" not in init:
        init.update(seed=seed, count=init.get("count", 1), scale=init.get("scale", 1.0))
    d["init"] = init
    return RunConfig.from_dict(d)


def _run_cell(args):
    cell_cfg, out_dir = args
    try:
        res = run(cell_cfg, out_dir=out_dir, write=out_dir is not None, summary_file=False)
    except NumericalFailure:
        return None
    scores = [r["delta_m"] for r in res.summary]
    if any(s is None for s in scores):
        scores = [r["pareto_min_norm"] for r in res.summary]
    return float(np.mean(scores))


SWEEP_FIELDS = ["beta", "aggregator", "optimizer", "n", "mean", "std", "failed", "cell"]


def sweep_beta(cfg: RunConfig, betas, seeds, out_dir=None, jobs: int = 1) -> list[dict]:
    """One run per (beta, aggregator, optimizer, seed); mean and std of the score per cell.

    The score is the final delta-m% against the single-task optima (mean over
    initial points), or the final Pareto min-norm when no optimum is known.
    """
    betas = [parse_beta(b) for b in betas]
    seeds = [int(s) for s in seeds]
    if not betas or not seeds:
        raise ConfigError("need at least one beta and one seed")
    aggregators = list(cfg.sweep.get("aggregators", [cfg.aggregator]))
    optimizers = list(cfg.sweep.get("optimizers", [cfg.optimizer.get("name", "adam")]))
    cells, jobs_list = [], []
    for beta in betas:
        for a in aggregators:
            for o in optimizers:
                cell_dir = None if out_dir is None else Path(out_dir) / "cells"
                cfgs = [_cell_config(cfg, a, o, beta, s) for s in seeds]
                cells.append((beta, a, o, len(jobs_list), len(cfgs)))
                jobs_list.extend((c, cell_dir) for c in cfgs)
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            scores = list(ex.map(_run_cell, jobs_list))
    else:
        scores = [_run_cell(j) for j in jobs_list]
    table = []
    for beta, a, o, start, n in cells:
        vals = [s for s in scores[start:start + n] if s is not None and math.isfinite(s)]
        table.append({
            "beta": beta, "aggregator": a, "optimizer": o, "n": len(vals),
            "mean": float(np.mean(vals)) if vals else None,
            "std": float(np.std(vals)) if vals else None,
            "failed": n - len(vals),
            "cell": f"{np.mean(vals):.4f} ± {np.std(vals):.4f}" if vals else "failed",
        })
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / f"{cfg.name}_sweep.csv").write_text(sweep_csv(table), encoding="utf-8")
    return table


def sweep_csv(table: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_FIELDS)
    for row in table:
        w.writerow([_fmt(row[k]) for k in SWEEP_FIELDS])
    return buf.getvalue()

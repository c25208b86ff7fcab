"""Command line entry point: ``plan``, ``simulate``, ``sweep``, ``histogram``, ``tune``.

Every command reads one JSON config (see ``config_schema.json``).  Output
files carry provenance: CSVs start with a ``# config=... seed=...
version=...`` comment line, JSON files have a ``provenance`` object.
All writes go through a temp file and ``os.replace``.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import __version__
from .analysis import (
    compare_methods,
    histogram_from_samples,
    mindflayer_round_sampler,
    rennala_round_sampler,
    self_convolve,
    table_to_csv,
)
from .config import (
    ConfigError,
    build_cluster,
    build_problem,
    config_hash,
    load_config,
    normalize,
    output_dir,
    run_config,
    set_path,
)
from .engine import (
    DivergenceError,
    RunConfig,
    default_gamma_grid,
    run_asgd,
    run_minibatch,
    run_mindflayer,
    run_rennala,
    run_vecna,
    tune_gamma,
    tune_rennala,
)
from .planner import (
    MindFlayerPlan,
    PlanningError,
    VecnaPlan,
    choose_clip_times_median,
    choose_clip_times_optimize,
    choose_clip_times_quantile,
    mindflayer_gamma,
    mindflayer_plan,
    rennala_iters,
    vecna_plan,
)
from .problems import HeterogeneousProblem

log = logging.getLogger("mindflayer")

QUANTILE_LEVELS = (0.01, 0.05, 0.25, 0.5, 0.75, 0.95, 0.99)
GRID_POINTS = 200


# ------------------------------------------------------------------ helpers


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def _jsonable(o):
    """Replace non-finite floats by the strings ``inf``/``-inf``/``nan`` so the output is strict JSON."""
    if isinstance(o, float) and not math.isfinite(o):
        return "nan" if math.isnan(o) else ("inf" if o > 0 else "-inf")
    if isinstance(o, dict):
        return {k: _jsonable(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_jsonable(v) for v in o]
    if isinstance(o, np.generic):
        return _jsonable(o.item())
    return o


def dumps(obj) -> str:
    return json.dumps(_jsonable(obj), indent=2, sort_keys=True, default=_json_default, allow_nan=False) + "\n"


def write_atomic(path: str, text: str) -> None:
    d = os.path.dirname(path) or "."
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def provenance(cfg: dict) -> dict:
    return {"config_hash": config_hash(cfg), "seed": cfg["seed"], "version": __version__}


def provenance_line(cfg: dict, **extra) -> str:
    parts = [f"config={config_hash(cfg)}", f"seed={cfg['seed']}", f"version={__version__}"]
    parts += [f"{k}={v}" for k, v in extra.items()]
    return " ".join(parts)


def run_seed(root: int, s: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([root, s])


class Setting:
    """Objects and constants derived from a normalized config."""

    def __init__(self, cfg: dict):
        self.cfg = cfg
        self.problem = build_problem(cfg)
        self.cluster = build_cluster(cfg)
        self.rcfg: RunConfig = run_config(cfg)
        base = self.problem.aggregate if isinstance(self.problem, HeterogeneousProblem) else self.problem
        self.base = base
        self.L = base.smoothness
        self.sigma_sq = base.sigma_sq
        self.eps = cfg["eps"]
        x0 = self.rcfg.start(base.dim)
        self.delta = base.value(x0) - base.f_inf
        if not self.delta > 0:
            raise ConfigError("x0 is already a minimizer (Delta = 0); nothing to plan")


def resolve_clip(clip, s: Setting) -> list[float]:
    if clip == "median":
        return choose_clip_times_median(s.cluster)
    if clip == "optimize":
        return choose_clip_times_optimize(s.cluster, s.sigma_sq, s.eps)[0]
    if isinstance(clip, dict):
        return choose_clip_times_quantile(s.cluster, clip["quantile"])
    return [float(v) for v in clip]


def build_plan(m: dict, s: Setting):
    t = resolve_clip(m["clip"], s)
    if m["name"] == "mindflayer":
        return mindflayer_plan(s.cluster, t, s.sigma_sq, s.eps, s.delta, s.L)
    return vecna_plan(s.cluster, t, s.sigma_sq, s.eps, s.delta, s.L)


def theory_gamma(m: dict, s: Setting, S: int | None = None, plan=None) -> float:
    name = m["name"]
    if plan is not None:
        return plan.gamma
    if name == "rennala":
        return mindflayer_gamma(s.L, s.eps, s.sigma_sq, S)
    if name == "minibatch":
        return mindflayer_gamma(s.L, s.eps, s.sigma_sq, s.cluster.n)
    return mindflayer_gamma(s.L, s.eps, s.sigma_sq, 1)


def _gamma_grid(s: Setting) -> list[float]:
    grid = s.cfg["tuning"]["gamma_grid"]
    return list(grid) if grid else default_gamma_grid(s.L)


def _run_fn(name: str, plan=None):
    if name == "mindflayer":
        return lambda p, c, g, cfg, seed: run_mindflayer(p, c, plan, cfg, seed, gamma=g)
    if name == "vecna":
        return lambda p, c, g, cfg, seed: run_vecna(p, c, plan, cfg, seed, gamma=g)
    return {"asgd": run_asgd, "minibatch": run_minibatch}[name]


def resolve_method(m: dict, s: Setting) -> dict:
    """Turn ``"theory"``/``"tune"`` entries into concrete run parameters.

    Tuning uses the seeds in ``tuning.seeds``.  When no stepsize converges
    the theoretical one is kept and ``tuned`` is set to ``False``.
    """
    cfg = s.cfg
    root = cfg["seed"]
    tune_seeds = [run_seed(root, v) for v in cfg["tuning"]["seeds"]]
    out = {"name": m["name"], "label": m["label"], "plan": None, "S": None, "tuned": None, "tuning": None}
    plan = None
    if m["name"] in ("mindflayer", "vecna"):
        plan = build_plan(m, s)
        out["plan"] = plan.to_dict()

    if m["name"] == "rennala":
        S_spec, g_spec = m["S"], m["gamma"]
        if S_spec == "tune":
            if g_spec == "tune":
                grid = _gamma_grid(s)
            elif g_spec == "theory":
                grid = lambda S: [theory_gamma(m, s, S)]  # noqa: E731
            else:
                grid = [float(g_spec)]
            S, res = tune_rennala(s.problem, s.cluster, s.rcfg, cfg["tuning"]["S_grid"], grid, tune_seeds)
            out["tuning"] = res.table
            out["tuned"] = res.converged
            if S is None:
                S = min(cfg["tuning"]["S_grid"])
                gamma = theory_gamma(m, s, S) if not isinstance(g_spec, (int, float)) else float(g_spec)
            else:
                gamma = res.gamma
        else:
            S = int(S_spec)
            if g_spec == "tune":
                res = tune_gamma(
                    lambda p, c, g, cfg_, seed: run_rennala(p, c, S, g, cfg_, seed),
                    s.problem, s.cluster, s.rcfg, _gamma_grid(s), tune_seeds,
                )
                out["tuning"] = res.table
                out["tuned"] = res.converged
                gamma = res.gamma if res.converged else theory_gamma(m, s, S)
            elif g_spec == "theory":
                gamma = theory_gamma(m, s, S)
            else:
                gamma = float(g_spec)
        out["S"] = S
        out["gamma"] = gamma
        return out

    g_spec = m["gamma"]
    if g_spec == "tune":
        res = tune_gamma(_run_fn(m["name"], plan), s.problem, s.cluster, s.rcfg, _gamma_grid(s), tune_seeds)
        out["tuning"] = res.table
        out["tuned"] = res.converged
        gamma = res.gamma if res.converged else theory_gamma(m, s, plan=plan)
    elif g_spec == "theory":
        gamma = theory_gamma(m, s, plan=plan)
    else:
        gamma = float(g_spec)
    out["gamma"] = gamma
    return out


def execute_run(cfg: dict, resolved: dict, s_id: int) -> dict:
    """One simulation; safe to call in a worker process.  Returns trace text and summary."""
    s = Setting(cfg)
    seed = run_seed(cfg["seed"], s_id)
    name, gamma = resolved["name"], resolved["gamma"]
    try:
        if name == "mindflayer":
            rec = run_mindflayer(s.problem, s.cluster, MindFlayerPlan(**resolved["plan"]), s.rcfg, seed, gamma=gamma)
        elif name == "vecna":
            rec = run_vecna(s.problem, s.cluster, VecnaPlan(**resolved["plan"]), s.rcfg, seed, gamma=gamma)
        elif name == "rennala":
            rec = run_rennala(s.problem, s.cluster, resolved["S"], gamma, s.rcfg, seed)
        elif name == "asgd":
            rec = run_asgd(s.problem, s.cluster, gamma, s.rcfg, seed)
        else:
            rec = run_minibatch(s.problem, s.cluster, gamma, s.rcfg, seed)
    except (DivergenceError, ValueError) as exc:
        return {"label": resolved["label"], "seed": s_id, "error": f"{type(exc).__name__}: {exc}"}
    summary = rec.summary()
    summary["time_to_eps"] = rec.time_to_eps
    return {
        "label": resolved["label"],
        "seed": s_id,
        "error": None,
        "csv": rec.to_csv(),
        "summary": summary,
        "times": rec.column("time").tolist(),
        "gsq": rec.column("grad_sq_norm").tolist(),
    }


def _map(fn, args_list, jobs: int):
    if jobs <= 1 or len(args_list) <= 1:
        return [fn(*a) for a in args_list]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(fn, *a) for a in args_list]
        return [f.result() for f in futures]


def time_grid_summary(results: list[dict], points: int = GRID_POINTS) -> list[dict]:
    """Mean/min/max over seeds of ``||grad f||^2`` on a shared time grid.

    Each run's value at time ``t`` is its last logged value at or before
    ``t``; after a run ends its final value is held.
    """
    ok = [r for r in results if r["error"] is None]
    if not ok:
        return []
    t_max = max(r["times"][-1] for r in ok)
    grid = np.linspace(0.0, t_max, points) if t_max > 0 else np.zeros(1)
    vals = []
    for r in ok:
        times = np.asarray(r["times"])
        idx = np.searchsorted(times, grid, side="right") - 1
        vals.append(np.asarray(r["gsq"])[np.maximum(idx, 0)])
    vals = np.array(vals)
    return [
        {"time": float(t), "mean": float(vals[:, j].mean()), "min": float(vals[:, j].min()), "max": float(vals[:, j].max())}
        for j, t in enumerate(grid)
    ]


def method_stats(results: list[dict]) -> dict:
    ok = [r for r in results if r["error"] is None]
    statuses = [r["summary"]["status"] for r in ok]
    tte = [r["summary"]["time_to_eps"] for r in ok]
    return {
        "runs": len(results),
        "errors": len(results) - len(ok),
        "converged": statuses.count("converged"),
        "stalled": statuses.count("stalled"),
        "budget_exhausted": statuses.count("budget_exhausted"),
        "time_to_eps": tte,
        "median_time_to_eps": float(np.median(tte)) if tte else math.inf,
        "iters_to_eps": [r["summary"]["first_hit"][0] if r["summary"]["first_hit"] else None for r in ok],
    }


# ----------------------------------------------------------------- commands


def cmd_plan(cfg: dict, fmt: str = "json") -> tuple[str, int]:
    s = Setting(cfg)
    plans = {}
    code = 0
    for m in cfg["methods"]:
        try:
            if m["name"] in ("mindflayer", "vecna"):
                plan = build_plan(m, s)
                d = plan.to_dict()
                d["gamma_used"] = plan.gamma if m["gamma"] in ("theory", "tune") else float(m["gamma"])
            elif m["name"] == "rennala" and m["S"] != "tune":
                d = {
                    "S": m["S"],
                    "K": rennala_iters(s.delta, s.L, s.sigma_sq, s.eps, m["S"]),
                    "gamma": theory_gamma(m, s, m["S"]),
                }
            else:
                d = {"gamma": theory_gamma(m, s, 1), "note": "S/gamma chosen by tuning at run time"}
            plans[m["label"]] = d
        except PlanningError as exc:
            plans[m["label"]] = {"error": str(exc)}
            code = 2
    out = {
        "constants": {"L": s.L, "delta": s.delta, "sigma_sq": s.sigma_sq, "eps": s.eps},
        "plans": plans,
        "provenance": provenance(cfg),
    }
    if fmt == "json":
        return dumps(out), code
    rows = []
    for label, d in plans.items():
        if "t" in d:
            for i in range(len(d["t"])):
                rows.append({"method": label, "worker": i, "t": d["t"][i], "B": d["B"][i], "p": d["p"][i],
                             "gamma": d["gamma"], "K": d["K"], "time_bound": d["time_bound"]})
        else:
            rows.append({"method": label, **{k: v for k, v in d.items() if k != "note"}})
    return table_to_csv(rows, provenance_line(cfg)), code


def cmd_simulate(cfg: dict, out: str, jobs: int = 1) -> tuple[dict, int]:
    s = Setting(cfg)
    resolved = []
    errors = 0
    for m in cfg["methods"]:
        try:
            resolved.append(resolve_method(m, s))
        except (PlanningError, DivergenceError) as exc:
            log.error("%s: %s", m["label"], exc)
            resolved.append({"label": m["label"], "name": m["name"], "error": str(exc)})
            errors += 1
    tasks = [(cfg, r, sid) for r in resolved if "error" not in r for sid in cfg["seeds"]]
    results = _map(execute_run, tasks, jobs)
    prov = provenance(cfg)
    per_method: dict[str, list[dict]] = {}
    grid_rows = []
    for res in results:
        per_method.setdefault(res["label"], []).append(res)
        stem = os.path.join(out, "traces", f"{res['label']}_seed{res['seed']}")
        if res["error"] is not None:
            errors += 1
            log.error("%s seed %s: %s", res["label"], res["seed"], res["error"])
            write_atomic(stem + ".json", dumps({"error": res["error"], "provenance": prov}))
            continue
        header = "# " + provenance_line(cfg, method=res["label"], run_seed=res["seed"]) + "\n"
        write_atomic(stem + ".csv", header + res["csv"])
        write_atomic(stem + ".json", dumps({**res["summary"], "run_seed": res["seed"], "provenance": prov}))
    methods = {}
    for r in resolved:
        label = r["label"]
        if "error" in r:
            methods[label] = {"error": r["error"]}
            continue
        runs = per_method.get(label, [])
        methods[label] = {
            "parameters": {k: r[k] for k in ("name", "gamma", "S", "plan", "tuned")},
            **method_stats(runs),
            "run_errors": [x["error"] for x in runs if x["error"]],
        }
        for row in time_grid_summary(runs):
            grid_rows.append({"method": label, **row})
    summary = {"methods": methods, "provenance": prov, "config": cfg}
    write_atomic(os.path.join(out, "summary.json"), dumps(summary))
    write_atomic(os.path.join(out, "summary.csv"), table_to_csv(grid_rows, provenance_line(cfg)))
    return summary, 1 if errors else 0


def cmd_tune(cfg: dict, out: str) -> tuple[dict, int]:
    s = Setting(cfg)
    result = {}
    code = 0
    for m in cfg["methods"]:
        try:
            result[m["label"]] = resolve_method(m, s)
        except (PlanningError, DivergenceError) as exc:
            result[m["label"]] = {"error": str(exc)}
            code = 1
    doc = {"methods": result, "provenance": provenance(cfg)}
    write_atomic(os.path.join(out, "tune.json"), dumps(doc))
    return doc, code


def cmd_histogram(cfg: dict, out: str) -> tuple[dict, int]:
    s = Setting(cfg)
    h = cfg["histogram"]
    rng = np.random.Generator(np.random.PCG64(run_seed(cfg["seed"], 0)))
    if h["method"] == "rennala":
        sampler = rennala_round_sampler(s.cluster, h["S"])
        K = rennala_iters(s.delta, s.L, s.sigma_sq, s.eps, h["S"]) if h["K"] == "auto" else h["K"]
    else:
        plan = mindflayer_plan(s.cluster, resolve_clip(h["clip"], s), s.sigma_sq, s.eps, s.delta, s.L)
        sampler = mindflayer_round_sampler(s.cluster, plan.t, plan.B)
        K = plan.K if h["K"] == "auto" else h["K"]
    samples = sampler(rng, h["draws"])
    one = histogram_from_samples(samples, h["bin_width"], h["max_bins"])
    total = self_convolve(one, K, h["max_bins"])
    prov = provenance(cfg)
    write_atomic(os.path.join(out, "histogram.json"), dumps({**one.to_dict(), "K": 1, "provenance": prov}))
    write_atomic(os.path.join(out, "histogram_total.json"), dumps({**total.to_dict(), "K": K, "provenance": prov}))
    rows = [{"quantile": q, "one_round": one.quantile(q), "total": total.quantile(q)} for q in QUANTILE_LEVELS]
    rows.append({"quantile": "mean", "one_round": one.mean(), "total": total.mean()})
    rows.append({"quantile": "overflow", "one_round": one.overflow_mass, "total": total.overflow_mass})
    write_atomic(os.path.join(out, "quantiles.csv"), table_to_csv(rows, provenance_line(cfg, K=K)))
    return {"K": K, "bins": int(one.mass.size), "overflow_mass": one.overflow_mass}, 0


def cmd_sweep(cfg: dict, out: str, jobs: int = 1, fmt: str = "csv") -> tuple[list[dict], int]:
    sw = cfg.get("sweep")
    if not sw or not sw["values"]:
        raise ConfigError("sweep: need 'axis' and a nonempty 'values' list")
    axis, values = sw["axis"], sw["values"]
    rows = []
    code = 0
    if sw["mode"] == "compare":
        base = Setting(cfg)
        factory = lambda v: build_cluster(normalize(set_path(cfg, axis, v)))  # noqa: E731
        rows = compare_methods(factory, values, base.delta, base.L, base.sigma_sq, base.eps,
                               draws=sw["draws"], seed=cfg["seed"], S_grid=cfg["tuning"]["S_grid"])
        for r in rows:
            r[axis] = r.pop("param")
    else:
        for j, v in enumerate(values):
            sub_cfg = normalize(set_path(cfg, axis, v))
            sub_cfg.pop("sweep", None)
            sub_out = os.path.join(out, "sweep", f"{j:03d}")
            summary, c = cmd_simulate(sub_cfg, sub_out, jobs)
            code = max(code, c)
            for label, st in summary["methods"].items():
                if "error" in st:
                    rows.append({axis: v, "method": label, "error": st["error"]})
                    continue
                tte = [x for x in st["time_to_eps"]]
                rows.append({
                    axis: v,
                    "method": label,
                    "runs": st["runs"],
                    "converged": st["converged"],
                    "stalled": st["stalled"],
                    "budget_exhausted": st["budget_exhausted"],
                    "errors": st["errors"],
                    "median_time_to_eps": st["median_time_to_eps"],
                    "min_time_to_eps": min(tte) if tte else math.inf,
                    "max_time_to_eps": max(tte) if tte else math.inf,
                    "gamma": st["parameters"]["gamma"],
                    "S": st["parameters"]["S"],
                })
    if fmt == "json":
        write_atomic(os.path.join(out, "sweep.json"), dumps({"rows": rows, "provenance": provenance(cfg)}))
    else:
        write_atomic(os.path.join(out, "sweep.csv"), table_to_csv(rows, provenance_line(cfg, axis=axis)))
    return rows, code


# --------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mindflayer", description="Virtual-clock lab for clipped-trial parallel SGD.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, help_ in [
        ("plan", "print theoretical run parameters"),
        ("simulate", "run every method over every seed"),
        ("sweep", "repeat simulate/compare along one config axis"),
        ("histogram", "one-round time histogram and its K-fold convolution"),
        ("tune", "tune stepsizes (and Rennala's S) without full runs"),
    ]:
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True, help="JSON config file")
        p.add_argument("--seed", type=int, help="root seed (overrides config)")
        p.add_argument("--out", help="output directory (else config output_dir, else $MINDFLAYER_OUT)")
        p.add_argument("--jobs", type=int, default=os.cpu_count() or 1, help="worker processes")
        p.add_argument("--format", choices=("csv", "json"), default=None)
        if name == "sweep":
            p.add_argument("--axis", help="dotted config path, e.g. cluster.delay.s")
            p.add_argument("--values", help="JSON list of values, e.g. '[1, 10, 100]'")
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg["seed"] = args.seed
        if args.command == "sweep" and (args.axis or args.values):
            sw = dict(cfg.get("sweep") or {})
            if args.axis:
                sw["axis"] = args.axis
            if args.values:
                try:
                    sw["values"] = json.loads(args.values)
                except json.JSONDecodeError as exc:
                    raise ConfigError(f"--values is not a JSON list: {exc}") from exc
            cfg["sweep"] = sw
            cfg = normalize(cfg)
        out = output_dir(cfg, args.out)
        jobs = max(1, args.jobs)
        if args.command == "plan":
            text, code = cmd_plan(cfg, args.format or "json")
            sys.stdout.write(text)
            return code
        if args.command == "simulate":
            summary, code = cmd_simulate(cfg, out, jobs)
            brief = {k: {kk: v.get(kk) for kk in ("converged", "stalled", "budget_exhausted", "errors",
                                                    "median_time_to_eps", "error") if kk in v}
                     for k, v in summary["methods"].items()}
            sys.stdout.write(dumps(brief))
            return code
        if args.command == "sweep":
            rows, code = cmd_sweep(cfg, out, jobs, args.format or "csv")
            sys.stdout.write(table_to_csv(rows))
            return code
        if args.command == "histogram":
            info, code = cmd_histogram(cfg, out)
            sys.stdout.write(dumps(info))
            return code
        doc, code = cmd_tune(cfg, out)
        sys.stdout.write(dumps({k: {"gamma": v.get("gamma"), "S": v.get("S"), "tuned": v.get("tuned")}
                                for k, v in doc["methods"].items()}))
        return code
    except (ConfigError, PlanningError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())

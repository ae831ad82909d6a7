"""Command-line experiment runner.

An experiment spec is a YAML or JSON mapping::

    command: mse-sweep
    seed: 0
    env: {alphabet_size: 2, max_len: 2, eos_id: 1, targets: {0: [0]}}
    policy: {init: zeros}
    params: {G_list: [2, 4, 8]}

``env`` may also be a path to an environment file. ``policy`` is
``{init: zeros}``, ``{init: random, scale: s}`` (drawn from the run seed) or
``{csv: path}``. Each run writes into a fresh subdirectory of ``--out``.

Seeds: the top-level seed ``s`` becomes ``SeedSequence(s)``. Random policy
initialization uses child ``spawn_key=(0,)`` and the command itself uses
``spawn_key=(1,)``; the group sweep further splits cell ``j`` as
``SeedSequence(s, spawn_key=(j,))``. Worker count never changes results.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import platform
import sys
import time
import traceback
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import scipy
import yaml

from . import __version__
from . import policy as pol
from .env import EnumerationCapError, env_from_dict, load_env
from .grad import BaselineKind, CoverageError

COMMANDS = ("mse-sweep", "decompose", "train", "grpo-train", "scaling-law", "group-sweep",
            "asymptotics", "bias-curve", "arcsin-check")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_INTERNAL = 0, 2, 3, 4

_REQ = object()
_TRAIN = {"B": (int, 4), "G": (int, 4), "n": (int, 100), "schedule": (dict, {"kind": "constant", "beta": 0.5}),
          "box_radius": (float, 30.0), "record_every": (int, 1), "snapshot_stride": (int, 0)}
SCHEMAS = {
    "mse-sweep": {"estimators": (list, ["vanilla", "leave_one_out", "oracle_value"]),
                  "G_list": (list, [2, 4, 8, 16]), "B": (int, 1), "reps": (int, 0)},
    "decompose": {"G": (int, 4), "prompt": (int, 0), "outputs": (list, None)},
    "train": {**_TRAIN, "baseline": (str, "leave_one_out"), "eps_policy": (float, 0.0)},
    "grpo-train": {**_TRAIN, "kappa": (float, 0.0), "m": (int, 1), "eps_policy": (float, 0.0),
                   "floor": (float, 1e-8)},
    "scaling-law": {"N": (int, 64), "G_list": (list, [2, 4, 8, 16, 32]), "probes": (int, 1),
                    "probe_scale": (float, 1.0), "G_pair": (list, [2, 32])},
    "group-sweep": {"N": (int, 64), "G_list": (list, [2, 4, 8, 16, 32]), "runs": (int, 50),
                    "n_list": (list, None), "n": (int, 100), "baseline": (str, "leave_one_out"),
                    "schedule": (dict, {"kind": "constant", "beta": 0.5}), "box_radius": (float, 30.0)},
    "asymptotics": {"M": (list, _REQ), "gamma": (list, None), "theta_star": (list, None),
                    "beta": (float, _REQ), "n": (int, 10_000), "runs": (int, 2000),
                    "mixture_samples": (int, 100_000)},
    "bias-curve": {"displacements": (list, [0.0, 0.01, 0.03, 0.1]), "kappa": (float, 0.0),
                   "G": (int, 4), "reps": (int, 0), "mode": (str, "auto")},
    "arcsin-check": {"G": (int, 64), "kappa": (float, 0.0), "delta": (float, 0.05),
                     "mode": (str, "exact")},
}
NO_ENV = {"asymptotics"}
TOP_KEYS = {"command", "seed", "env", "policy", "params", "out"}


class SpecError(ValueError):
    """The experiment spec does not validate."""

    def __init__(self, diagnostics):
        self.diagnostics = list(diagnostics)
        super().__init__("; ".join(self.diagnostics))


# ------------------------------------------------------------------ validation

def _type_ok(value, typ) -> bool:
    if typ is float:
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if typ is int:
        return isinstance(value, int) and not isinstance(value, bool)
    return isinstance(value, typ)


def read_spec(path) -> dict:
    text = Path(path).read_text()
    spec = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
    if not isinstance(spec, dict):
        raise SpecError([f"{path}: top level must be a mapping"])
    return spec


def validate_spec(spec: dict, seed_override=None) -> list[str]:
    """Every schema violation in ``spec``; an empty list means it is valid."""
    diags = []
    unknown = set(spec) - TOP_KEYS
    if unknown:
        diags.append(f"unknown top-level keys: {sorted(unknown)}")
    cmd = spec.get("command")
    if cmd not in COMMANDS:
        diags.append(f"command must be one of {list(COMMANDS)}, got {cmd!r}")
    seed = spec.get("seed", seed_override) if seed_override is None else seed_override
    if seed is None:
        diags.append("seed is missing (seeds are mandatory; no wall-clock seeding)")
    elif not _type_ok(seed, int) or not 0 <= seed < 2 ** 64:
        diags.append(f"seed must be an integer in [0, 2^64), got {seed!r}")
    if cmd not in NO_ENV and cmd in COMMANDS:
        env = spec.get("env")
        if env is None:
            diags.append("env is missing")
        elif isinstance(env, str):
            if not Path(env).is_file():
                diags.append(f"env file not found: {env}")
        elif isinstance(env, dict):
            try:
                env_from_dict(env)
            except (ValueError, TypeError, KeyError) as exc:
                diags.append(f"env: {exc}")
        else:
            diags.append("env must be a mapping or a path")
    policy = spec.get("policy", {"init": "zeros"})
    if not isinstance(policy, dict) or not (policy.get("init") in ("zeros", "random") or "csv" in policy):
        diags.append("policy must be {init: zeros}, {init: random, scale: s} or {csv: path}")
    params = spec.get("params", {}) or {}
    if not isinstance(params, dict):
        diags.append("params must be a mapping")
        return diags
    if cmd in SCHEMAS:
        schema = SCHEMAS[cmd]
        extra = set(params) - set(schema)
        if extra:
            diags.append(f"{cmd}: unknown params {sorted(extra)}")
        for name, (typ, default) in schema.items():
            if name not in params:
                if default is _REQ:
                    diags.append(f"{cmd}: missing required param {name!r}")
                continue
            if params[name] is not None and not _type_ok(params[name], typ):
                diags.append(f"{cmd}: param {name!r} must be {typ.__name__}, got {params[name]!r}")
        diags.extend(_semantic_checks(cmd, _resolved(cmd, params)))
    return diags


def _resolved(cmd, params):
    out = {}
    for name, (_, default) in SCHEMAS[cmd].items():
        out[name] = params.get(name, None if default is _REQ else default)
    return out


def _baseline_min_group(name):
    try:
        return BaselineKind.parse(name)
    except (ValueError, TypeError):
        return None


def _semantic_checks(cmd, p) -> list[str]:
    diags = []
    groups = []
    if cmd in ("train", "decompose", "bias-curve", "arcsin-check", "grpo-train"):
        groups = [p.get("G")]
    elif cmd in ("mse-sweep", "group-sweep"):
        groups = list(p.get("G_list") or [])
    baselines = []
    if cmd == "mse-sweep":
        baselines = list(p.get("estimators") or [])
    elif cmd in ("train", "group-sweep"):
        baselines = [p.get("baseline")]
    for b in baselines:
        if b in ("normalized", "practical") and cmd == "mse-sweep":
            kind_min = 2
            tag = b
        else:
            kind = _baseline_min_group(b)
            if kind is None:
                diags.append(f"{cmd}: unknown baseline {b!r}")
                continue
            kind_min, tag = kind.min_group, kind.tag
        for G in groups:
            if isinstance(G, int) and G < kind_min:
                diags.append(f"{cmd}: G={G} with {tag} violates the baseline precondition G >= {kind_min}")
    if cmd in ("grpo-train", "bias-curve", "arcsin-check"):
        for G in groups:
            if isinstance(G, int) and G < 2:
                diags.append(f"{cmd}: G={G} violates the normalized-advantage precondition G >= 2")
    if cmd in ("scaling-law", "group-sweep"):
        N = p.get("N")
        for G in p.get("G_list") or []:
            if isinstance(G, int) and isinstance(N, int) and (G < 1 or N % G):
                diags.append(f"{cmd}: G={G} does not divide N={N}")
    if cmd == "grpo-train" and isinstance(p.get("B"), int) and isinstance(p.get("m"), int):
        if p["m"] < 1 or p["B"] % p["m"]:
            diags.append(f"grpo-train: m={p['m']} must divide B={p['B']}")
    if "schedule" in p and isinstance(p.get("schedule"), dict):
        sch = p["schedule"]
        if sch.get("kind") not in ("constant", "inverse_iter"):
            diags.append(f"{cmd}: schedule kind must be constant or inverse_iter, got {sch.get('kind')!r}")
        if not _type_ok(sch.get("beta"), float) or sch.get("beta", 0) <= 0:
            diags.append(f"{cmd}: schedule beta must be a positive number")
    return diags


# ------------------------------------------------------------------ execution

def _streams(seed: int):
    root = np.random.SeedSequence(seed)
    return (np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0,))),
            np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1,))), root)


def _build_env(spec):
    env = spec.get("env")
    return load_env(env) if isinstance(env, str) else env_from_dict(env)


def _build_policy(spec, env, rng):
    ps = spec.get("policy", {"init": "zeros"})
    if "csv" in ps:
        return pol.load_csv(env, ps["csv"])
    if ps.get("init") == "random":
        return pol.random_params(env, float(ps.get("scale", 1.0)), rng)
    return pol.zeros(env)


def _table_csv(rows, columns=None) -> str:
    if not rows:
        return ""
    columns = columns or list(rows[0])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in columns])
    return buf.getvalue()


def _schedule(d):
    from .optim import LrSchedule
    return LrSchedule(d.get("kind", "constant"), float(d["beta"]))


def _cmd_mse_sweep(env, p, prm, rng, workers):
    from .analysis.mse import mse_exact, mse_monte_carlo
    rows = []
    for est in prm["estimators"]:
        for G in prm["G_list"]:
            row = {"estimator": est, "G": G, "B": prm["B"]}
            row["exact_mse"] = (float(mse_exact(p, env, est, prm["B"], G))
                                if est not in ("normalized", "practical") else float("nan"))
            if prm["reps"]:
                rep = mse_monte_carlo(p, env, est, prm["B"], G, prm["reps"], rng, with_exact=False)
                row["mc_mse"], row["ci_halfwidth"] = rep.mse_mean, rep.ci_halfwidth
            rows.append(row)
    return {"rows": rows}, {"mse.csv": rows}, f"{len(rows)} (estimator, G) rows"


def _cmd_decompose(env, p, prm, rng, workers):
    from .grad import GroupSample
    from .ustat import hoeffding_decompose
    x, G = prm["prompt"], prm["G"]
    if prm["outputs"] is not None:
        ks = np.asarray(prm["outputs"], dtype=int)
        if len(ks) != G:
            raise ValueError(f"outputs has {len(ks)} entries but G={G}")
    else:
        ks = pol.sample_output_indices(p, env, x, G, rng)
    seqs = [env.outputs.sequences[k] for k in ks]
    group = GroupSample(x, tuple(seqs), tuple(float(env.rewards[x, k]) for k in ks))
    parts = hoeffding_decompose(p, env, x, group)
    d = parts.to_dict()
    d["outputs"] = [int(k) for k in ks]
    return d, {}, f"sqnorms: {json.dumps({k: v for k, v in d.items() if 'sqnorm' in k})}"


def _train_config(prm, baseline, seed):
    from .optim import TrainConfig
    kw = dict(B=prm["B"], G=prm["G"], n=prm["n"], schedule=_schedule(prm["schedule"]),
              baseline=baseline, seed=None, box_radius=prm["box_radius"],
              record_every=prm["record_every"], snapshot_stride=prm["snapshot_stride"],
              eps_policy=prm.get("eps_policy", 0.0))
    if baseline == "practical":
        kw.update(kappa=prm["kappa"], m=prm["m"], floor=prm["floor"])
    return TrainConfig(**kw)


def _trace_result(trace, env, out_dir):
    trace.save(out_dir / "trace", env)
    summary = (f"final J = {trace.objective[-1]!r}, final gap = {trace.gap[-1]!r}, "
               f"clipped steps = {trace.n_clipped}")
    rows = [{"iter": i, "J": j, "gap": g, "grad_norm": n, "clipped": int(c)} for i, j, g, n, c in
            zip(trace.iteration, trace.objective, trace.gap, trace.grad_norm, trace.clipped)]
    return {"final_J": trace.objective[-1], "final_gap": trace.gap[-1], "n_clipped": trace.n_clipped,
            "error": trace.error}, {"trace.csv": rows}, summary


def _cmd_train(env, p, prm, rng, workers, out_dir=None):
    from .optim import train_meta
    cfg = _train_config(prm, prm["baseline"], None)
    return _trace_result(train_meta(env, cfg, rng, p), env, out_dir)


def _cmd_grpo_train(env, p, prm, rng, workers, out_dir=None):
    from .optim import train_grpo_practical
    cfg = _train_config(prm, "practical", None)
    return _trace_result(train_grpo_practical(env, cfg, rng, p, p), env, out_dir)


def _cmd_scaling_law(env, p, prm, rng, workers):
    from .analysis.scaling import estimate_constants, fixed_budget_curve
    probes = [p] + [pol.random_params(env, prm["probe_scale"], rng) for _ in range(prm["probes"] - 1)]
    est = estimate_constants(probes, env, tuple(prm["G_pair"]))
    curve = fixed_budget_curve(p, env, prm["N"], prm["G_list"], est)
    rows = [{"G": G, "B": B, "exact": e, "model": m, "rel_error": r} for G, B, e, m, r in
            zip(curve["G"], curve["B"], curve["exact"], curve["model"], curve["rel_error"])]
    res = {"constants": est.to_dict(), "curve": curve}
    return res, {"curve.csv": rows}, (f"c1={est.c1!r} c2={est.c2!r} c3={est.c3!r} G*={est.g_star!r}; "
                                      f"max model error {curve['max_rel_error']:.4g}")


def _cmd_group_sweep(env, p, prm, rng, workers, seed=0):
    from .analysis.scaling import group_size_sweep
    from .optim import TrainConfig
    cfg = TrainConfig(B=1, G=max(2, min(prm["G_list"])), n=prm["n"], schedule=_schedule(prm["schedule"]),
                      baseline=prm["baseline"], box_radius=prm["box_radius"])
    out = group_size_sweep(env, prm["N"], prm["G_list"], cfg, prm["runs"], seed, p, prm["n_list"], workers)
    out["argmax_G"] = {str(k): v for k, v in out["argmax_G"].items()}
    cols = ["n", "G", "B", "runs", "mean", "ci_lo", "ci_hi", "gap_mean", "gap_ci_lo", "gap_ci_hi", "clipped"]
    return out, {"sweep.csv": [{c: r[c] for c in cols} for r in out["rows"]]}, f"argmax G per n: {out['argmax_G']}"


def _cmd_asymptotics(env, p, prm, rng, workers):
    from .analysis.asymptotics import SyntheticQuadratic, asymptotics_pipeline
    quad = SyntheticQuadratic(np.array(prm["M"], dtype=float),
                              None if prm["theta_star"] is None else np.array(prm["theta_star"], dtype=float),
                              None if prm["gamma"] is None else np.array(prm["gamma"], dtype=float))
    rep = asymptotics_pipeline(quad, prm["beta"], prm["n"], prm["runs"], rng, prm["mixture_samples"])
    rows = [{"k": k, "lambda": float(l), "weight": float(w)} for k, (l, w) in enumerate(zip(rep.lambdas, rep.weights))]
    return rep.to_dict(), {"weights.csv": rows}, f"rank {rep.r}, weights {rep.weights.tolist()}, KS {rep.ks_stat:.4g}"


def _cmd_bias_curve(env, p, prm, rng, workers):
    from .analysis.practical import practical_bias_curve
    res = practical_bias_curve(env, prm["displacements"], prm["kappa"], prm["G"], prm["reps"], rng,
                               p_old=p, mode=prm["mode"])
    return res.to_dict(), {"bias.csv": res.rows()}, f"slope {res.slope}"


def _cmd_arcsin_check(env, p, prm, rng, workers):
    from .analysis.practical import arcsin_gradient_check
    rep = arcsin_gradient_check(p, env, prm["G"], prm["kappa"], prm["delta"], mode=prm["mode"])
    return rep.to_dict(), {}, f"max relative error {rep.max_rel_error:.4g}"


HANDLERS = {"mse-sweep": _cmd_mse_sweep, "decompose": _cmd_decompose, "train": _cmd_train,
            "grpo-train": _cmd_grpo_train, "scaling-law": _cmd_scaling_law, "group-sweep": _cmd_group_sweep,
            "asymptotics": _cmd_asymptotics, "bias-curve": _cmd_bias_curve, "arcsin-check": _cmd_arcsin_check}


def _fresh_dir(root: Path, command: str, seed: int) -> Path:
    stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S%fZ")
    base = root / f"{command}-{stamp}-s{seed}"
    d, i = base, 1
    while d.exists():
        d = Path(f"{base}-{i}")
        i += 1
    d.mkdir(parents=True)
    return d


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def run(spec: dict, out_root, seed=None, workers: int = 1, fmt: str = "both") -> tuple[int, Path | None]:
    """Validate and execute one experiment.

    Returns
    -------
    (exit_code, directory)
        ``directory`` holds ``manifest.json``, result files and ``summary.txt``
        (or ``error.json`` on failure); it is None only when the output root
        cannot be created.
    """
    out_root = Path(out_root)
    seed = spec.get("seed") if seed is None else seed
    cmd = spec.get("command", "unknown")
    try:
        out_dir = _fresh_dir(out_root, str(cmd), seed if isinstance(seed, int) else 0)
    except OSError as exc:
        print(json.dumps({"error": "output", "message": str(exc)}), file=sys.stderr)
        return EXIT_VALIDATION, None
    diags = validate_spec(spec, seed)
    if diags:
        return _fail(out_dir, EXIT_VALIDATION, "validation", "; ".join(diags), diags), out_dir

    prm = _resolved(cmd, spec.get("params") or {})
    started = time.time()
    try:
        init_rng, rng, _ = _streams(seed)
        env = p = None
        if cmd not in NO_ENV:
            env = _build_env(spec)
            p = _build_policy(spec, env, init_rng)
        handler = HANDLERS[cmd]
        if cmd in ("train", "grpo-train"):
            result, tables, summary = handler(env, p, prm, rng, workers, out_dir=out_dir)
        elif cmd == "group-sweep":
            result, tables, summary = handler(env, p, prm, rng, workers, seed=seed)
        else:
            result, tables, summary = handler(env, p, prm, rng, workers)
    except (EnumerationCapError, CoverageError, ValueError) as exc:
        return _fail(out_dir, EXIT_RUNTIME, type(exc).__name__, str(exc)), out_dir
    except Exception as exc:  # noqa: BLE001 - surfaced as an internal error
        return _fail(out_dir, EXIT_INTERNAL, type(exc).__name__, str(exc),
                     trace=traceback.format_exc()), out_dir

    if fmt in ("json", "both") or not tables:
        (out_dir / "result.json").write_text(json.dumps(_jsonable(result), indent=2, sort_keys=True) + "\n")
    if fmt in ("csv", "both"):
        for name, rows in tables.items():
            (out_dir / name).write_text(_table_csv(rows))
    manifest = {
        "command": cmd, "seed": seed, "workers": workers, "format": fmt,
        "spec": spec, "resolved_params": prm,
        "seed_rule": "SeedSequence(seed, spawn_key=(0,)) for policy init, (1,) for the command; "
                     "group-sweep cell j uses SeedSequence(seed, spawn_key=(j,))",
        "versions": {"grpolab": __version__, "python": platform.python_version(),
                     "numpy": np.__version__, "scipy": scipy.__version__},
        "started_utc": datetime.fromtimestamp(started, timezone.utc).isoformat(),
        "wall_time_s": time.time() - started,
    }
    (out_dir / "manifest.json").write_text(json.dumps(_jsonable(manifest), indent=2, sort_keys=True) + "\n")
    (out_dir / "summary.txt").write_text(f"{cmd} (seed {seed}): {summary}\n")
    return EXIT_OK, out_dir


def _fail(out_dir, code, kind, message, diagnostics=None, trace=None) -> int:
    err = {"exit_code": code, "error": kind, "message": message}
    if diagnostics:
        err["diagnostics"] = diagnostics
    if trace:
        err["traceback"] = trace
    text = json.dumps(err, indent=2)
    (out_dir / "error.json").write_text(text + "\n")
    print(text, file=sys.stderr)
    return code


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="grpolab", description="Group-estimator experiments on tabular bandits.")
    sub = ap.add_subparsers(dest="action", required=True)
    r = sub.add_parser("run", help="validate and execute an experiment spec")
    r.add_argument("--spec", required=True, type=Path)
    r.add_argument("--seed", type=int, default=None, help="overrides the spec's seed")
    r.add_argument("--out", type=Path, default=Path("runs"))
    r.add_argument("--workers", type=int, default=1)
    r.add_argument("--format", choices=("csv", "json", "both"), default="both")
    v = sub.add_parser("validate", help="list schema violations without running")
    v.add_argument("--spec", required=True, type=Path)
    v.add_argument("--seed", type=int, default=None)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        spec = read_spec(args.spec)
    except (OSError, SpecError, yaml.YAMLError, json.JSONDecodeError) as exc:
        print(json.dumps({"exit_code": EXIT_VALIDATION, "error": "unreadable spec", "message": str(exc)}),
              file=sys.stderr)
        return EXIT_VALIDATION
    if args.action == "validate":
        diags = validate_spec(spec, args.seed)
        print(json.dumps({"diagnostics": diags}, indent=2))
        return EXIT_OK if not diags else EXIT_VALIDATION
    if args.workers < 1:
        print(json.dumps({"exit_code": EXIT_VALIDATION, "error": "validation",
                          "message": "--workers must be >= 1"}), file=sys.stderr)
        return EXIT_VALIDATION
    code, out_dir = run(spec, args.out, args.seed, args.workers, args.format)
    if out_dir is not None and code == EXIT_OK:
        print(out_dir)
    return code


if __name__ == "__main__":
    raise SystemExit(main())

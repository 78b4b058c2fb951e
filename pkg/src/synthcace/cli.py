"""Command line interface: ``sce estimate | simulate | sweep | diagnose``."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .data import MonotonicityWarning, fmt, read_csv
from .errors import SCEError
from .estimators import EstimatorSpec, IDS, default_registry, estimate_all
from .inference import k_identity_check, k_moments, normal_ci, repair_pd, sce_inference
from .resample import bootstrap_sigma, substream
from .simulation import Dgm1Config, Dgm2Config, McSettings, run_mc, sweep
from .synthesis import (
    DerivedMatrices,
    derive_matrices,
    mse_objective,
    mse_objective_expanded,
    solve_weights,
    synthesize,
    synthesize_split,
)

log = logging.getLogger("synthcace")

EXIT = {"ok": 0, "check": 1, "usage": 2, "io": 3, "data": 4, "estimation": 5, "numerical": 6, "simulation": 7}
THREADS_ENV = "SCE_THREADS"

DEFAULTS = {
    "ref": "TSLS",
    "variants": "raw,shrunk",
    "B": 200,
    "alpha": 0.05,
    "draws": 10_000,
    "seed": 0,
    "strata": 5,
    "R": 500,
    "dgm": 1,
    "n": 500,
    "eta": 0.0,
    "alpha_c": 0.0,
    "gamma_c": 0.0,
    "lambda_n": 1.0,
    "lambda_c": 1.0,
    "beta0": 0.41,
    "beta1": 2.0,
    "instances": 50,
}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# config handling


def resolve(args: argparse.Namespace) -> dict:
    """Flags override the config file, which overrides built-in defaults."""
    cfg = dict(DEFAULTS)
    if getattr(args, "config", None):
        path = Path(args.config)
        try:
            cfg.update(json.loads(path.read_text(encoding="utf-8")))
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: invalid JSON config ({exc})") from None
    for key, val in vars(args).items():
        if val is not None and key not in ("func", "config"):
            cfg[key] = val
    for key in ("B", "R", "draws", "strata", "instances"):
        if key in cfg and int(cfg[key]) < 1:
            raise UsageError(f"{key} must be a positive count")
    if not 0 < float(cfg["alpha"]) < 1:
        raise UsageError("alpha must be in (0, 1)")
    return cfg


def thread_count(cfg: dict) -> int:
    if cfg.get("threads") is not None:
        return max(1, int(cfg["threads"]))
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise UsageError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
    return os.cpu_count() or 1


def registry_from(cfg: dict) -> list[EstimatorSpec]:
    if "registry" in cfg and isinstance(cfg["registry"], list):
        specs = []
        for entry in cfg["registry"]:
            entry = {"id": entry} if isinstance(entry, str) else dict(entry)
            role = "reference" if entry["id"].upper() == cfg["ref"].upper() else "candidate"
            specs.append(EstimatorSpec(entry["id"], role, entry.get("options", {})))
        if not any(s.role == "reference" for s in specs):
            specs.insert(0, EstimatorSpec(cfg["ref"], "reference"))
        return specs
    return default_registry(cfg["ref"], int(cfg["strata"]))


def parse_grid(text, cast=float) -> list:
    """``a:b:step`` (inclusive) or a comma-separated list."""
    if isinstance(text, (int, float)):
        return [cast(text)]
    if isinstance(text, list):
        return [cast(v) for v in text]
    text = str(text).strip()
    try:
        if ":" in text:
            parts = text.split(":")
            if len(parts) != 3:
                raise ValueError
            a, b, step = (float(p) for p in parts)
            if step <= 0 or b < a:
                raise ValueError
            count = int(np.floor((b - a) / step + 1e-9)) + 1
            return [cast(round(a + i * step, 12)) for i in range(count)]
        vals = [cast(v) for v in text.split(",") if v.strip()]
        if not vals:
            raise ValueError
        return vals
    except ValueError:
        raise UsageError(f"invalid grid {text!r}; use a:b:step or a comma-separated list") from None


# ---------------------------------------------------------------------------
# estimate


def _inference_dict(inf) -> dict:
    return {
        "varsigma_hat": inf.varsigma_hat,
        "se": inf.se,
        "ci_lower": inf.ci_lower,
        "ci_upper": inf.ci_upper,
        "alpha": inf.alpha,
        "diagnostics": inf.diagnostics,
    }


def _weights_dict(sol, ids) -> dict:
    return {
        "b0": sol.b0,
        "b1": dict(zip(ids, map(float, sol.b1))),
        "objective": sol.objective,
        "on_boundary": sol.on_boundary,
        "active_constraints": list(sol.active_constraints),
        "ridge": sol.ridge,
    }


def cmd_estimate(cfg: dict) -> int:
    if not cfg.get("data"):
        raise UsageError("--data is required")
    variants = [v.strip() for v in str(cfg["variants"]).split(",") if v.strip()]
    for v in variants:
        if v not in ("raw", "shrunk", "split"):
            raise UsageError(f"unknown variant {v!r}")
    path = Path(cfg["data"])
    if not path.exists():
        raise FileNotFoundError(f"data file not found: {path}")
    data = read_csv(path, cfg.get("schema"))
    registry = registry_from(cfg)
    alpha, seed = float(cfg["alpha"]), int(cfg["seed"])
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", MonotonicityWarning)
        est = estimate_all(data, registry)
    moments = bootstrap_sigma(data, registry, int(cfg["B"]), seed, ids=est.ids)
    se0 = float(np.sqrt(moments.v0))
    lo, hi = normal_ci(est.theta0, se0, alpha)
    report = {
        "version": __version__,
        "n": data.n,
        "reference": est.reference,
        "estimates": {est.reference: est.theta0, **dict(zip(est.ids, map(float, est.theta1)))},
        "dropped": est.dropped,
        "warnings": [str(w.message) for w in caught],
        "bootstrap": {"B": int(cfg["B"]), "b_draws": moments.b_draws, "seed": seed, "ids": list(moments.ids),
                      "sigma": moments.sigma_full.tolist()},
        "reference_ci": {"se": se0, "ci_lower": lo, "ci_upper": hi, "alpha": alpha},
        "sce": [],
    }
    for variant in variants:
        if variant == "split":
            sr = synthesize_split(data, registry, moments, seed)
            entry = {"variant": "split", "estimate": sr.estimate,
                     "weights": _weights_dict(sr.weights, sr.estimates.ids),
                     "weights_b": _weights_dict(sr.extra["weights_b"], sr.estimates.ids)}
        else:
            sr = synthesize(est, moments, variant)
            inf, _ = sce_inference(sr, data.n, alpha, int(cfg["draws"]), seed)
            entry = {"variant": variant, "estimate": sr.estimate, "bias": list(map(float, sr.bias)),
                     "weights": _weights_dict(sr.weights, sr.estimates.ids), "inference": _inference_dict(inf)}
        report["sce"].append(entry)

    out = sys.stdout
    out.write(f"n = {data.n}   reference = {est.reference}   bootstrap draws = {moments.b_draws}\n")
    out.write(f"{'estimator':<14}{'estimate':>12}{'se':>10}{'ci_lower':>12}{'ci_upper':>12}\n")
    out.write(f"{est.reference:<14}{est.theta0:>12.5f}{se0:>10.5f}{lo:>12.5f}{hi:>12.5f}\n")
    for i, v in zip(est.ids, est.theta1):
        out.write(f"{i:<14}{v:>12.5f}\n")
    for e in report["sce"]:
        name = "SCE-" + e["variant"]
        if "inference" in e:
            inf = e["inference"]
            out.write(f"{name:<14}{e['estimate']:>12.5f}{inf['se']:>10.5f}{inf['ci_lower']:>12.5f}{inf['ci_upper']:>12.5f}\n")
        else:
            out.write(f"{name:<14}{e['estimate']:>12.5f}\n")
    for i, why in est.dropped.items():
        out.write(f"dropped {i}: {why}\n")
    if cfg.get("report"):
        Path(cfg["report"]).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return EXIT["ok"]


# ---------------------------------------------------------------------------
# simulate / sweep

PARAM_COLUMNS = ("n", "eta", "alpha_c", "gamma_c", "lambda_n", "lambda_c", "beta0", "beta1")
TIDY_COLUMNS = ("dgm", *PARAM_COLUMNS, "estimator", "metric", "value", "R", "seed")


def _cell(v) -> str:
    if v is None or isinstance(v, str):
        return v or ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return fmt(v)


def tidy_csv(reports) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TIDY_COLUMNS)
    for rep in reports:
        for row in rep.rows():
            w.writerow([_cell(row.get(c, "")) for c in TIDY_COLUMNS])
    return buf.getvalue()


def trace_csv(reports) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("dgm", *PARAM_COLUMNS, "rep", "estimator", "estimate", "se", "ci_lower", "ci_upper"))
    for rep in reports:
        params = [_cell(rep.config.get(c, "")) for c in PARAM_COLUMNS]
        for r, name, *vals in rep.trace:
            w.writerow([rep.dgm, *params, r, name, *(_cell(v) for v in vals)])
    return buf.getvalue()


def _settings(cfg) -> McSettings:
    return McSettings(
        R=int(cfg["R"]), B=int(cfg["B"]), alpha=float(cfg["alpha"]), draws=int(cfg["draws"]),
        seed=int(cfg["seed"]), registry=tuple(registry_from(cfg)),
    )


def _dgm_config(dgm: int, n: int, cfg: dict, **over):
    def value(key):
        return parse_grid(over.get(key, cfg[key]))[0]

    if dgm == 1:
        return Dgm1Config(n=n, eta=value("eta"))
    if dgm == 2:
        keys = ("alpha_c", "gamma_c", "lambda_n", "lambda_c", "beta0", "beta1")
        return Dgm2Config(n=n, **{k: value(k) for k in keys})
    raise UsageError(f"--dgm must be 1 or 2, got {dgm}")


def _write_outputs(cfg, reports) -> None:
    text = tidy_csv(reports)
    if cfg.get("out"):
        Path(cfg["out"]).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    if cfg.get("trace"):
        Path(cfg["trace"]).write_text(trace_csv(reports), encoding="utf-8")


def _progress(rep, seconds) -> None:
    rec = rep.records
    raw = rec.get("SCE_RAW", {})
    ref = next(iter(rec))
    sys.stderr.write(
        f"[dgm {rep.dgm} {rep.config}] R={rep.R} failed={rep.failed} "
        f"mse(SCE_RAW)={raw.get('mse', float('nan')):.5g} mse({ref})={rec[ref]['mse']:.5g} ({seconds:.0f}s)\n"
    )


def cmd_simulate(cfg: dict) -> int:
    dgm = int(cfg["dgm"])
    n = int(parse_grid(cfg["n"], int)[0])
    st = _settings(cfg)
    t = time.time()
    rep = run_mc(dgm, _dgm_config(dgm, n, cfg), st, thread_count(cfg), trace=bool(cfg.get("trace")))
    _progress(rep, time.time() - t)
    _write_outputs(cfg, [rep])
    return EXIT["ok"]


def build_grid(cfg: dict) -> list:
    dgm = int(cfg["dgm"])
    ns = parse_grid(cfg["n"], int)
    if dgm == 1:
        return [(1, _dgm_config(1, n, cfg, eta=e)) for n in ns for e in parse_grid(cfg["eta"])]
    if dgm == 2:
        return [(2, _dgm_config(2, n, cfg, alpha_c=a)) for n in ns for a in parse_grid(cfg["alpha_c"])]
    raise UsageError(f"--dgm must be 1 or 2, got {dgm}")


def cmd_sweep(cfg: dict) -> int:
    grid = build_grid(cfg)
    st = _settings(cfg)
    threads = thread_count(cfg)
    reports = []
    for dgm, c in grid:
        t = time.time()
        rep = sweep([(dgm, c)], st, threads, trace=bool(cfg.get("trace")))[0]
        _progress(rep, time.time() - t)
        reports.append(rep)
    _write_outputs(cfg, reports)
    return EXIT["ok"]


# ---------------------------------------------------------------------------
# diagnose


def random_instance(rng: np.random.Generator, k: int):
    """Random covariance of (reference, k candidates) and bias vector."""
    A = rng.standard_normal((k + 1, k + 3))
    sigma = A @ A.T / (k + 3)
    return sigma, rng.standard_normal(k)


def grid_minimum(dm: DerivedMatrices, v0: float, step: float = 0.02) -> float:
    k = dm.k
    ticks = np.arange(0, 1 + step / 2, step)
    pts = np.stack(np.meshgrid(*[ticks] * k, indexing="ij"), axis=-1).reshape(-1, k)
    pts = pts[pts.sum(axis=1) <= 1 + 1e-12]
    M = dm.t_mat + dm.d_mat
    vals = v0 - 2 * pts @ dm.p_vec + np.einsum("ij,jk,ik->i", pts, M, pts)
    return float(vals.min())


def run_diagnostics(seed: int = 0, instances: int = 50, draws: int = 20_000, corrupt_t: bool = False) -> dict:
    from .resample import SamplingMoments

    rng = substream(seed, 0xD1A6)
    checks = []
    for i in range(instances):
        k = 1 + i % 3
        sigma, d = random_instance(rng, k)
        m = SamplingMoments.from_sigma(sigma, [f"c{j}" for j in range(k)])
        dm = derive_matrices(m, d)
        sol = solve_weights(dm, m.v0)
        oracle = grid_minimum(dm, m.v0)
        checks.append({"check": "qp_oracle", "instance": i, "k": k,
                       "pass": bool(sol.objective <= oracle + 1e-9), "margin": oracle + 1e-9 - sol.objective})
        b = rng.random(k) / k
        gap = abs(mse_objective(b, dm, m.v0) - mse_objective_expanded(b, m, d))
        checks.append({"check": "mse_forms", "instance": i, "pass": bool(gap <= 1e-12), "margin": 1e-12 - gap})
        km = k_moments(dm.p_vec, dm.t_mat, d, draws, seed + i)
        res = k_identity_check(dm.p_vec, dm.t_mat, d, km)
        checks.append({"check": "k_identities", "instance": i, "pass": res["pass"],
                       "margin": min(res["var_identity"]["margin"], res["lambda_range"]["margin"])})
    if corrupt_t:
        k = 3
        A = rng.standard_normal((k, k))
        T = A @ A.T
        w, V = np.linalg.eigh(T)
        w[0] = -abs(w[0]) - 0.5
        T_bad = V @ np.diag(w) @ V.T
        # the inference path must either repair the matrix visibly or refuse it
        try:
            _, ridge = repair_pd(T_bad)
            ok, note = ridge > 0, f"repaired with ridge {ridge:g}"
        except SCEError as exc:
            ok, note = True, f"rejected: {exc}"
        # the weight solver still returns a feasible point on an indefinite quadratic
        dm = DerivedMatrices(rng.standard_normal(k), T_bad, np.zeros(k), np.zeros((k, k)))
        sol = solve_weights(dm, 1.0)
        feasible = bool(np.all(sol.b1 >= 0) and sol.b1.sum() <= 1 + 1e-12)
        oracle = grid_minimum(dm, 1.0)
        checks.append({"check": "corrupt_t_repair", "pass": ok, "note": note})
        checks.append({"check": "corrupt_t_solver", "pass": bool(feasible and sol.objective <= oracle + 1e-9),
                       "margin": oracle + 1e-9 - sol.objective, "ridge": sol.ridge})
    summary = {}
    for c in checks:
        s = summary.setdefault(c["check"], {"pass": 0, "fail": 0})
        s["pass" if c["pass"] else "fail"] += 1
    return {"seed": seed, "instances": instances, "draws": draws, "summary": summary,
            "pass": all(c["pass"] for c in checks), "checks": checks}


def cmd_diagnose(cfg: dict) -> int:
    rep = run_diagnostics(int(cfg["seed"]), int(cfg["instances"]), int(cfg.get("kdraws") or 20_000),
                          bool(cfg.get("corrupt_t")))
    for name, s in rep["summary"].items():
        status = "PASS" if s["fail"] == 0 else "FAIL"
        sys.stdout.write(f"{status} {name}: {s['pass']} passed, {s['fail']} failed\n")
    if cfg.get("report"):
        Path(cfg["report"]).write_text(json.dumps(rep, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return EXIT["ok"] if rep["pass"] else EXIT["check"]


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sce", description="Synthetic compliance estimator")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON config file; flags override it")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--B", type=int, help="bootstrap draws")
        sp.add_argument("--alpha", type=float)
        sp.add_argument("--draws", type=int, help="simulated J draws for the K moments")
        sp.add_argument("--ref", help=f"reference estimator ({', '.join(IDS)})")
        sp.add_argument("--strata", type=int)

    e = sub.add_parser("estimate", help="estimate the CACE from a CSV file")
    common(e)
    e.add_argument("--data")
    e.add_argument("--variants", help="comma list of raw,shrunk,split")
    e.add_argument("--report", help="write a JSON report here")
    e.set_defaults(func=cmd_estimate)

    for name, func, hlp in (("simulate", cmd_simulate, "one Monte Carlo cell"),
                            ("sweep", cmd_sweep, "Monte Carlo over a parameter grid")):
        s = sub.add_parser(name, help=hlp)
        common(s)
        s.add_argument("--dgm", type=int, choices=(1, 2))
        s.add_argument("--n")
        s.add_argument("--eta")
        s.add_argument("--alpha-c", dest="alpha_c")
        for k in ("gamma_c", "lambda_n", "lambda_c", "beta0", "beta1"):
            s.add_argument("--" + k.replace("_", "-"), dest=k, type=float)
        s.add_argument("--R", type=int, help="Monte Carlo replications")
        s.add_argument("--threads", type=int, help=f"worker processes (env {THREADS_ENV})")
        s.add_argument("--out", help="tidy CSV output (default stdout)")
        s.add_argument("--trace", help="per-replication CSV output")
        s.set_defaults(func=func)

    d = sub.add_parser("diagnose", help="self-checks on random instances")
    d.add_argument("--config")
    d.add_argument("--seed", type=int)
    d.add_argument("--instances", type=int)
    d.add_argument("--kdraws", type=int, help="simulated J draws per instance")
    d.add_argument("--corrupt-t", dest="corrupt_t", action="store_true", default=None)
    d.add_argument("--report")
    d.set_defaults(func=cmd_diagnose)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    del args.verbose
    func = args.func
    try:
        cfg = resolve(args)
        return func(cfg)
    except (UsageError, ValueError) as exc:
        parser.error(str(exc))
    except (FileNotFoundError, PermissionError, IsADirectoryError) as exc:
        sys.stderr.write(f"error [io]: {exc}\n")
        return EXIT["io"]
    except SCEError as exc:
        sys.stderr.write(f"error [{exc.category}] {type(exc).__name__}: {exc}\n")
        return EXIT.get(exc.category, EXIT["estimation"])
    return EXIT["ok"]


if __name__ == "__main__":
    sys.exit(main())

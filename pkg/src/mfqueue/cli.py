"""Command line experiment runner.

    mfqueue simulate    --config exp.toml --seed 7 --out runs/
    mfqueue nlmp        --set a=1.0 --set distribution='{"family": "lomax", "alpha": 3}'
    mfqueue compare | poc | dominance | verify-dist

Configuration comes from a TOML or JSON file, overridden by ``--set
key=value`` (values parsed as JSON when possible) and by the common flags.
Every output file starts with a header holding the resolved config, its
hash, the seed and package versions. Invalid configurations exit with
status 2 and a JSON error listing every violated constraint.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from importlib import metadata
from pathlib import Path

import numpy as np
import scipy

from . import chaos, dominance, network, nlmp, oracles
from .service import ConditionViolation, from_config, verify_conditions

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

EXP = {"family": "exponential"}

DEFAULTS = {
    "simulate": dict(N=2, M=2, distribution=EXP, n_samples=1000, burn_in=None, spacing=None,
                     placement="round_robin"),
    "nlmp": dict(a=1.0, distribution=EXP, horizon=20.0, dz=0.01, k_max=80, z_max=50.0,
                 initial="q0", tol=1e-3, max_T=500.0, fixed_point=True),
    "compare": dict(kind="sph", N=100, a=1.0, distribution=EXP, n_samples=2000, burn_in=None, spacing=None,
                    T=10.0, replicas=1000, times=[1.0, 5.0, 10.0], tol=None),
    "poc": dict(Ns=[10, 50, 200], a=1.0, distribution=EXP, n_samples=2000, n_boot=1000),
    "dominance": dict(T=10.0, delta=1.0, beta=None, eps=1e-3, distribution=EXP, horizon=2e5,
                      n_samples=10000, N=None, a=1.0, confidence=0.99),
    "verify-dist": dict(distribution=EXP),
}


class ConfigError(Exception):
    def __init__(self, violations: list[str]):
        super().__init__("; ".join(violations))
        self.violations = violations


def version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0+unknown"


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    try:
        text = p.read_bytes()
    except OSError as e:
        raise ConfigError([f"cannot read config {path}: {e.strerror}"]) from None
    try:
        if p.suffix == ".json":
            return json.loads(text)
        return tomllib.loads(text.decode())
    except (ValueError, tomllib.TOMLDecodeError) as e:
        raise ConfigError([f"cannot parse config {path}: {e}"]) from None


def _parse_value(v: str):
    try:
        return json.loads(v)
    except ValueError:
        return v


def resolve(command: str, args) -> dict:
    file_cfg = load_config(args.config)
    # a file may hold several commands under their own tables
    if command in file_cfg and isinstance(file_cfg[command], dict):
        file_cfg = file_cfg[command]
    cfg = dict(DEFAULTS[command])
    errors = [f"unknown key '{k}'" for k in file_cfg if k not in cfg and k != "seed"]
    cfg.update({k: v for k, v in file_cfg.items() if k in cfg})
    for item in args.set or []:
        if "=" not in item:
            errors.append(f"--set expects key=value, got '{item}'")
            continue
        k, v = item.split("=", 1)
        if k not in cfg:
            errors.append(f"unknown key '{k}'")
            continue
        cfg[k] = _parse_value(v)
    seed = args.seed if args.seed is not None else file_cfg.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or not 0 <= seed < 2**64:
        errors.append("seed must be an integer in [0, 2^64)")
    cfg["seed"] = seed
    errors += validate(command, cfg)
    if errors:
        raise ConfigError(errors)
    return cfg


def _positive_int(cfg, key, errors, minimum=1):
    v = cfg.get(key)
    if not isinstance(v, int) or isinstance(v, bool) or v < minimum:
        errors.append(f"{key} must be an integer >= {minimum}")


def _positive(cfg, key, errors, allow_none=False):
    v = cfg.get(key)
    if v is None and allow_none:
        return
    if not isinstance(v, (int, float)) or isinstance(v, bool) or not v > 0 or not math.isfinite(v):
        errors.append(f"{key} must be a positive number")


def validate(command: str, cfg: dict) -> list[str]:
    errors: list[str] = []
    if "distribution" in cfg:
        try:
            from_config(cfg["distribution"])
        except (ValueError, TypeError, KeyError) as e:
            errors.append(f"distribution: {e}")
    if command == "simulate":
        _positive_int(cfg, "N", errors)
        _positive_int(cfg, "M", errors, 0)
        _positive_int(cfg, "n_samples", errors)
        _positive(cfg, "burn_in", errors, True)
        _positive(cfg, "spacing", errors, True)
        if cfg["placement"] not in [p.value for p in network.Placement]:
            errors.append(f"placement must be one of {[p.value for p in network.Placement]}")
    elif command == "nlmp":
        for key in ("a", "horizon", "dz", "z_max", "tol", "max_T"):
            _positive(cfg, key, errors)
        _positive_int(cfg, "k_max", errors)
        if cfg["initial"] not in ("q0", "geometric"):
            errors.append("initial must be 'q0' or 'geometric'")
    elif command == "compare":
        if cfg["kind"] not in ("sph", "corollary_k", "wph"):
            errors.append("kind must be 'sph', 'corollary_k' or 'wph'")
        _positive_int(cfg, "N", errors)
        for key in ("a", "T"):
            _positive(cfg, key, errors)
        _positive_int(cfg, "n_samples", errors)
        _positive_int(cfg, "replicas", errors)
        _positive(cfg, "tol", errors, True)
        if not isinstance(cfg["times"], list) or not all(isinstance(t, (int, float)) and t >= 0 for t in cfg["times"]):
            errors.append("times must be a list of nonnegative numbers")
    elif command == "poc":
        Ns = cfg["Ns"]
        if not isinstance(Ns, list) or not Ns or not all(isinstance(n, int) and n >= 2 for n in Ns):
            errors.append("Ns must be a nonempty list of integers >= 2")
        _positive(cfg, "a", errors)
        _positive_int(cfg, "n_samples", errors, 2)
        _positive_int(cfg, "n_boot", errors)
    elif command == "dominance":
        for key in ("T", "delta", "eps", "horizon", "a", "confidence"):
            _positive(cfg, key, errors)
        _positive(cfg, "beta", errors, True)
        _positive_int(cfg, "n_samples", errors)
        if isinstance(cfg["T"], (int, float)) and isinstance(cfg["delta"], (int, float)) and not cfg["delta"] < cfg["T"]:
            errors.append("delta must be < T")
        if isinstance(cfg["eps"], (int, float)) and not cfg["eps"] < 1:
            errors.append("eps must be < 1")
        if isinstance(cfg["confidence"], (int, float)) and not cfg["confidence"] < 1:
            errors.append("confidence must be < 1")
        if cfg["N"] is not None:
            _positive_int(cfg, "N", errors)
    return errors


def header(command: str, cfg: dict) -> dict:
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return {
        "command": command,
        "config": cfg,
        "config_hash": hashlib.sha256(canon.encode()).hexdigest(),
        "seed": cfg["seed"],
        "versions": {"artifact": version(), "numpy": np.__version__, "scipy": scipy.__version__},
    }


def replica_seed(master: int, i: int) -> np.random.SeedSequence:
    """Seed of replica ``i``; independent of how many replicas are requested."""
    return np.random.SeedSequence(master, spawn_key=(i,))


def _pmap(fn, items, workers: int):
    if workers <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))  # results keep input order


def _write(out: Path, name: str, text: str) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    p = out / name
    p.write_text(text)
    return p


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, default=chaos.to_jsonable) + "\n"


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(cfg: dict, out: Path, workers: int) -> dict:
    d = from_config(cfg["distribution"])
    snaps = network.sample_stationary(cfg["N"], cfg["M"], d, cfg["n_samples"], burn_in=cfg["burn_in"],
                                      spacing=cfg["spacing"], seed=replica_seed(cfg["seed"], 0),
                                      placement=network.Placement(cfg["placement"]))
    h = header("simulate", cfg)
    _write(out, "snapshots.csv", snaps.to_csv(header=h))
    summary = {"header": h, "marginal_k": snaps.marginal_k().tolist(), "n_snapshots": len(snaps)}
    _write(out, "summary.json", _dump(summary))
    return summary


def _initial_law(cfg: dict, d):
    if cfg["initial"] == "q0":
        return nlmp.q0_start(cfg["a"])
    rho = cfg["a"] / (1 + cfg["a"])
    return oracles.geometric_pmf(rho, cfg["k_max"] + 1) / (1 - rho ** (cfg["k_max"] + 1))


def cmd_nlmp(cfg: dict, out: Path, workers: int) -> dict:
    d = from_config(cfg["distribution"])
    J = int(round(cfg["z_max"] / cfg["dz"]))
    mu0 = nlmp.init_measure_q0(_initial_law(cfg, d), k_max=cfg["k_max"], J=J, dz=cfg["dz"])
    mu, rt = nlmp.evolve(mu0, d, cfg["horizon"])
    h = header("nlmp", cfg)
    _write(out, "rates.csv", rt.to_csv(header=h))
    summary = {
        "header": h,
        "mean_customers": mu.mean_customers,
        "overflow_mass": mu.overflow_mass,
        "final_rate": float(rt.lam[-1]) if len(rt.lam) else 0.0,
        "k_marginal": mu.k_marginal().tolist(),
        "solve_lambda": nlmp.solve_lambda(cfg["a"], d) if math.isfinite(d.scv) else None,
    }
    if cfg["fixed_point"]:
        fp = nlmp.fixed_point(cfg["a"], d, cfg["tol"], cfg["max_T"])
        _write(out, "fixed_point.json", fp.measure.to_json(header=h) + "\n")
        summary["fixed_point"] = {"rate": fp.rate, "t": fp.t, "residual": fp.residual,
                                  "k_marginal": fp.measure.k_marginal()[:30].tolist()}
    _write(out, "summary.json", _dump(summary))
    return summary


def _tagged_count(job):
    dist_cfg, N, M, T, master, i = job
    d = from_config(dist_cfg)
    st = network.init_state(N, M, network.Placement.ROUND_ROBIN)
    return network.tagged_arrival_count(st, d, 0, T, network.Streams(d, N, replica_seed(master, i)))


def _trajectory_job(job):
    dist_cfg, N, M, times, master, i = job
    d = from_config(dist_cfg)
    st = network.init_state(N, M, network.Placement.ROUND_ROBIN)
    return network.trajectory(st, d, times, network.Streams(d, N, replica_seed(master, i)))


def cmd_compare(cfg: dict, out: Path, workers: int) -> dict:
    d = from_config(cfg["distribution"])
    N = cfg["N"]
    M = round(cfg["a"] * N)
    a = M / N
    h = header("compare", cfg)
    kind = cfg["kind"]
    # the network starts with one customer per node when a = 1, matched by the limit's initial law
    mu0 = nlmp.init_measure_q0(_round_robin_law(N, M))
    if kind == "sph":
        fp = nlmp.fixed_point(a, d)
        snaps = network.sample_stationary(N, M, d, cfg["n_samples"], burn_in=cfg["burn_in"],
                                          spacing=cfg["spacing"], seed=replica_seed(cfg["seed"], 0))
        report = chaos.sph_compare(snaps, fp.measure, cfg["tol"], seed=cfg["seed"])
    elif kind == "corollary_k":
        _, rt = nlmp.evolve(mu0, d, cfg["T"])
        ref = nlmp.poisson_count_dist(rt, cfg["T"])
        jobs = [(cfg["distribution"], N, M, cfg["T"], cfg["seed"], i) for i in range(cfg["replicas"])]
        counts = _pmap(_tagged_count, jobs, workers)
        report = chaos.corollary_k_compare(counts, ref, cfg["tol"], seed=cfg["seed"])
    else:
        times = sorted(float(t) for t in cfg["times"])
        _, rt = nlmp.evolve(mu0, d, times[-1], save_at=times)
        jobs = [(cfg["distribution"], N, M, times, cfg["seed"], i) for i in range(cfg["replicas"])]
        runs = _pmap(_trajectory_job, jobs, workers)
        report = chaos.wph_compare(runs, rt.measures, times)
    _write(out, "report.json", _dump({"header": h, "report": report.to_dict()}))
    _write(out, "report.csv", chaos.rows_to_csv(report.rows(kind=kind, N=N), header=h))
    return report.to_dict()


def _round_robin_law(N: int, M: int) -> np.ndarray:
    k = np.array(network.init_state(N, M, network.Placement.ROUND_ROBIN).k)
    return np.bincount(k) / N


def _poc_job(job):
    dist_cfg, N, M, n_samples, n_boot, master, i = job
    d = from_config(dist_cfg)
    snaps = network.sample_stationary(N, M, d, n_samples, seed=replica_seed(master, i))
    f = chaos.TestFunction.k_value(M)
    return chaos.poc_estimate(snaps, [f, f], symmetrize=True, n_boot=n_boot, seed=master)


def cmd_poc(cfg: dict, out: Path, workers: int) -> dict:
    h = header("poc", cfg)
    jobs = [(cfg["distribution"], N, round(cfg["a"] * N), cfg["n_samples"], cfg["n_boot"], cfg["seed"], i)
            for i, N in enumerate(cfg["Ns"])]
    ests = _pmap(_poc_job, jobs, workers)
    rows = [{"N": N, "M": round(cfg["a"] * N), "cov": e.gap, "ci_lo": e.ci[0], "ci_hi": e.ci[1], "se": e.se}
            for N, e in zip(cfg["Ns"], ests)]
    result = {"header": h, "rows": rows}
    if len(rows) >= 2:
        result["slope"] = chaos.loglog_slope([r["N"] for r in rows], [r["cov"] for r in rows])
    _write(out, "poc.csv", chaos.rows_to_csv(rows, header=h))
    _write(out, "poc.json", _dump(result))
    return result


def cmd_dominance(cfg: dict, out: Path, workers: int) -> dict:
    d = from_config(cfg["distribution"])
    beta = d.hazard_sup if cfg["beta"] is None else cfg["beta"]
    T, delta = cfg["T"], cfg["delta"]
    batch = dominance.build_dominating_batch(T, delta, beta, cfg["eps"])
    mean = float(batch.mean)
    rng = np.random.default_rng(replica_seed(cfg["seed"], 0))
    bt = dominance.simulate_BT(batch.dist, T, d, cfg["horizon"], rng, cfg["n_samples"])
    result = {
        "header": header("dominance", cfg),
        "batch": {"K": batch.K, "eps": batch.eps, "beta": batch.beta_used, "beta_adjusted": batch.beta_adjusted,
                  "mean": mean, "bound": T - delta / 4, "pass": mean < T - delta / 4,
                  "probs": batch.dist.as_array().tolist()},
        "batch_queue": {"mean": bt.mean, "ci": list(bt.ci), "time_average": bt.time_average},
    }
    if cfg["N"] is not None:
        N = cfg["N"]
        snaps = network.sample_stationary(N, round(cfg["a"] * N), d, cfg["n_samples"],
                                          seed=replica_seed(cfg["seed"], 1))
        rep = dominance.empirical_dominance_test(snaps.k[:, 0], bt.samples, cfg["confidence"])
        result["network_vs_batch_queue"] = rep.to_dict()
    _write(out, "dominance.json", _dump(result))
    return result


def cmd_verify_dist(cfg: dict, out: Path, workers: int) -> dict:
    d = from_config(cfg["distribution"])  # {"family": "erlang", "shape": 2, "validate": false} reaches the checks
    rep = verify_conditions(d)
    result = {"header": header("verify-dist", cfg), "report": rep.to_dict()}
    _write(out, "conditions.json", _dump(result))
    return result


COMMANDS = {
    "simulate": cmd_simulate,
    "nlmp": cmd_nlmp,
    "compare": cmd_compare,
    "poc": cmd_poc,
    "dominance": cmd_dominance,
    "verify-dist": cmd_verify_dist,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mfqueue", description="Closed mean-field queueing network experiments")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="TOML or JSON experiment file")
        s.add_argument("--seed", type=int, help="master seed (overrides the config)")
        s.add_argument("--out", default=".", help="output directory")
        s.add_argument("--workers", type=int, default=1, help="worker processes for replicas")
        s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    return p


def _fail(kind: str, violations: list[str], code: int) -> int:
    json.dump({"error": kind, "violations": violations}, sys.stderr, sort_keys=True)
    sys.stderr.write("\n")
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve(args.command, args)
        if args.workers < 1:
            raise ConfigError(["workers must be >= 1"])
    except ConfigError as e:
        return _fail("config", e.violations, 2)
    try:
        result = COMMANDS[args.command](cfg, Path(args.out), args.workers)
    except (ConditionViolation, nlmp.TruncationError, nlmp.ConvergenceError, nlmp.CFLError, ValueError) as e:
        return _fail(type(e).__name__, [str(e)], 1)
    summary = {k: v for k, v in result.items() if k != "header"} if isinstance(result, dict) else result
    print(json.dumps(summary, sort_keys=True, default=chaos.to_jsonable)[:2000])
    return 0


if __name__ == "__main__":
    sys.exit(main())

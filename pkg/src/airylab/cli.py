"""Command-line runner: ``airylab <subcommand> [--flags]``.

Each run writes one or more CSV tables plus ``manifest.json`` (config echo,
seed, library versions, SHA-256 of every artifact) into the output
directory. Exit codes: 0 success, 2 usage/config error, 3 computation error.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import platform
import sys
import time
import warnings
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .errors import AirylabError, InvalidInputError

OUT_ENV = "AIRYLAB_OUT"
EXIT_OK, EXIT_USAGE, EXIT_COMPUTE = 0, 2, 3

STOCHASTIC = {"energy-table", "bridge-check", "km-vs-mc", "reflection-check", "ensemble-density",
              "ensemble-tails", "stationary-counterexample"}


class UsageError(InvalidInputError):
    error_class = "usage"


@dataclass
class ExperimentConfig:
    subcommand: str
    params: dict
    seed: int | None
    out: Path

    def echo(self) -> dict:
        return {"subcommand": self.subcommand, "seed": self.seed, "params": self.params}


# ---- parser ----------------------------------------------------------------------------

def _floats(text: str):
    return [float(v) for v in str(text).split(",") if v.strip()]


def _ints(text: str):
    return [int(v) for v in str(text).split(",") if v.strip()]


COMMANDS = {
    "tetris-eval": {"input": (str, None)},
    "energy-table": {"mesh": (int, 10_000), "samples": (int, 20), "lam_max": (float, 8.0)},
    "airy-table": {"x_min": (float, -20.0), "x_max": (float, 20.0), "points": (int, 41)},
    "bridge-check": {"t": (float, 1.0), "mesh": (int, 64), "samples": (int, 100_000)},
    "km-vs-mc": {"k": (_ints, [2]), "t": (float, 1.0), "mesh": (int, 64), "samples": (int, 100_000),
                 "configs": (int, 10), "crossing": (str, "on")},
    "reflection-check": {"t": (float, 1.0), "samples": (int, 1_000_000), "steps": (int, 64),
                         "bins": (int, 8)},
    "alpha-k": {"k": (_ints, [1, 2, 3]), "tolerance": (float, 1e-10)},
    "opt-identity": {"k": (_ints, [1, 2, 3]), "beta": (_floats, [1.0, 4.0]), "method": (str, "reduced")},
    "ensemble-density": {"n": (int, 16), "k": (int, 1), "t": (float, 1.0), "patch": (float, 1.5),
                         "samples": (int, 20_000), "s_values": (_floats, [1, 1.714, 2.429, 3.143, 3.857, 4.571, 5.286, 6]),
                         "half_width": (float, 0.1), "signs": (str, "up"), "M": (float, 1.0),
                         "mesh": (int, 16)},
    "ensemble-tails": {"kind": (str, "two-point"), "n": (int, 16), "k": (int, 1), "t": (float, 1.0),
                       "samples": (int, 20_000), "m_grid": (_floats, [0.5, 1, 1.5, 2, 2.5, 3, 3.5, 4]),
                       "M": (float, 1.0), "mesh": (int, 16), "c": (float, 1.0), "d": (float, 1.0)},
    "stationary-counterexample": {"n": (int, 16), "samples": (int, 10_000), "s": (float, 2.0),
                                  "m_grid": (_floats, [0.5, 1, 1.5, 2, 2.5, 3]), "patch": (float, 2.0),
                                  "M": (float, 1.0), "mesh": (int, 16)},
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="airylab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"airylab {__version__}")
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name, opts in COMMANDS.items():
        p = sub.add_parser(name)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", type=str, default=None)
        p.add_argument("--config", type=str, default=None, help="JSON file mirroring flag names")
        for key in opts:
            p.add_argument("--" + key.replace("_", "-"), dest=key, type=str, default=None)
    return parser


def _coerce(name: str, key: str, raw):
    conv = COMMANDS[name][key][0]
    try:
        if isinstance(raw, list) and conv in (_floats, _ints):
            return [float(v) if conv is _floats else int(v) for v in raw]
        return conv(raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad value for --{key.replace('_', '-')}: {raw!r}") from exc


def make_config(argv=None) -> ExperimentConfig:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        if exc.code == 0:
            raise
        raise UsageError("could not parse command line") from None
    name = args.subcommand
    file_cfg = {}
    if args.config:
        try:
            file_cfg = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config file: {exc}") from exc
        if not isinstance(file_cfg, dict):
            raise UsageError("config file must hold a JSON object")
        file_cfg = {k.replace("-", "_"): v for k, v in file_cfg.items()}
        unknown = set(file_cfg) - set(COMMANDS[name]) - {"seed", "out", "subcommand"}
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
    params = {}
    for key, (_, default) in COMMANDS[name].items():
        raw = getattr(args, key)
        if raw is not None:
            params[key] = _coerce(name, key, raw)
        elif key in file_cfg:
            params[key] = _coerce(name, key, file_cfg[key])
        else:
            params[key] = default
    seed = args.seed if args.seed is not None else file_cfg.get("seed")
    if seed is not None:
        if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
            raise UsageError("seed must be a nonnegative integer")
    if name in STOCHASTIC and seed is None:
        raise UsageError(f"{name} needs --seed")
    out = args.out or file_cfg.get("out") or os.environ.get(OUT_ENV) or "airylab-out"
    _validate(name, params)
    return ExperimentConfig(name, params, seed, Path(out))


def _validate(name: str, p: dict):
    def need(cond, msg):
        if not cond:
            raise UsageError(msg)

    for key in ("mesh", "samples", "points", "configs", "steps", "bins", "n"):
        if key in p:
            need(p[key] >= 1, f"--{key} must be >= 1")
    if "t" in p:
        need(p["t"] > 0, "--t must be positive")
    if name in ("alpha-k", "opt-identity"):
        need(all(k >= 1 for k in p["k"]), "--k entries must be >= 1")
    if name == "km-vs-mc":
        need(all(k >= 1 for k in p["k"]), "--k entries must be >= 1")
        need(p["crossing"] in ("on", "off"), "--crossing must be on or off")
    if name == "opt-identity":
        need(all(b > 0 for b in p["beta"]), "--beta entries must be positive")
        need(p["method"] in ("reduced", "direct"), "--method must be reduced or direct")
    if name == "ensemble-density":
        need(p["signs"] in ("up", "down", "both"), "--signs must be up, down or both")
        need(1 <= p["k"] < p["n"], "need 1 <= k < n")
        need(p["patch"] >= p["t"], "--patch must be >= --t")
    if name == "ensemble-tails":
        need(p["c"] > 0 and p["d"] > 0, "--c and --d must be positive")
        need(p["kind"] in ("one-point", "two-point"), "--kind must be one-point or two-point")
        need(1 <= p["k"] < p["n"], "need 1 <= k < n")
        need(all(m > 0 for m in p["m_grid"]), "--m-grid must be positive")
    if name == "stationary-counterexample":
        need(p["patch"] >= 1.0, "--patch must be >= 1")


# ---- output ----------------------------------------------------------------------------

def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (list, tuple, np.ndarray)):
        return " ".join(_fmt(x) for x in v)
    return "" if v is None else str(v)


def write_csv(path: Path, rows: list, columns: list | None = None) -> Path:
    columns = columns or (list(rows[0].keys()) if rows else [])
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c)) for c in columns])
    return path


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(cfg: ExperimentConfig, artifacts: list, status: str, extra: dict, wall: float,
                   error: dict | None = None) -> Path:
    manifest = {
        "config": cfg.echo(),
        "status": status,
        "versions": {"airylab": __version__, "python": platform.python_version(),
                     "numpy": np.__version__, "scipy": scipy.__version__},
        "artifacts": {p.name: _sha256(p) for p in artifacts if p.exists()},
        "summary": _clean(extra),
        "wall_time_s": round(wall, 3),
    }
    if error:
        manifest["error"] = error
    path = cfg.out / "manifest.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=_json_default) + "\n")
    return path


def _clean(o):
    """Replace non-finite floats by None so the JSON stays standard."""
    if isinstance(o, dict):
        return {k: _clean(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_clean(v) for v in o]
    if isinstance(o, (float, np.floating)):
        return float(o) if math.isfinite(o) else None
    return o


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


# ---- subcommands -----------------------------------------------------------------------

def _rng(cfg, i=0):
    from .bridges import RngState

    return RngState(cfg.seed, (i,))


def cmd_alpha_k(cfg, out):
    from .core import alpha_k

    rows = []
    for k in cfg.params["k"]:
        res = alpha_k(k, tolerance=cfg.params["tolerance"], seed=cfg.seed or 0)
        rows.append({"k": k, "alpha": res.alpha, "direction": res.direction, "iterations": res.iterations})
    out.append(write_csv(cfg.out / "alpha_k.csv", rows))
    return {"alpha": {str(r["k"]): r["alpha"] for r in rows}}


def cmd_opt_identity(cfg, out):
    from .core import alpha_k, max_g_over_dbeta

    rows = []
    for k in cfg.params["k"]:
        a = alpha_k(k).alpha
        for beta in cfg.params["beta"]:
            g = max_g_over_dbeta(k, beta, method=cfg.params["method"], seed=cfg.seed or 0)
            target = beta**1.5 * a
            rows.append({"k": k, "beta": beta, "max_g": g, "beta32_alpha": target,
                         "rel_err": abs(g - target) / target})
    out.append(write_csv(cfg.out / "opt_identity.csv", rows))
    return {"max_rel_err": max(r["rel_err"] for r in rows)}


def _load_tuple(path: str | None):
    from .grid import FunctionTuple

    if path is None:
        text = resources.files("airylab").joinpath("data/sample_tuple.json").read_text()
    else:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise UsageError(f"cannot read input: {exc}") from exc
    try:
        doc = json.loads(text)
        return FunctionTuple.from_array(doc["functions"], float(doc.get("start", 0.0)),
                                        float(doc.get("end", 1.0)))
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise UsageError(f"malformed tuple file: {exc}") from exc


def cmd_tetris_eval(cfg, out):
    from .core import s_functional, tetris

    f = _load_tuple(cfg.params["input"])
    tf = tetris(f).as_array()
    nodes = f.nodes
    rows = [{"line": i + 1, "start": tf[i, 0], "end": tf[i, -1]} for i in range(f.k)]
    out.append(write_csv(cfg.out / "tetris_summary.csv", rows))
    node_rows = [{"s": s, **{f"Tf{i + 1}": tf[i, j] for i in range(f.k)}} for j, s in enumerate(nodes)]
    out.append(write_csv(cfg.out / "tetris_tuple.csv", node_rows))
    return {"S": s_functional(f), "k": f.k, "mesh": f.mesh}


def cmd_energy_table(cfg, out):
    from .energy import (
        EnergyParams, concave_majorant, dirichlet_energy, energy_E, energy_J,
        least_concave_majorant, min_energy_above_obstacle, parabola_obstacle,
    )

    gen = _rng(cfg).generator()
    rows = []
    mesh = cfg.params["mesh"]
    while len(rows) < cfg.params["samples"]:
        lam = gen.uniform(0.5, cfg.params["lam_max"])
        rx, ry = gen.uniform(0, lam, 2)
        if rx + ry >= lam:
            continue
        p = EnergyParams(rx * rx, ry * ry, lam)
        E = energy_E(p)
        obs = parabola_obstacle(lam, mesh)
        hull = least_concave_majorant(obs, p.x, p.y - lam**2)
        _, e_obs = min_energy_above_obstacle(obs, p.x, p.y - lam**2)
        e_maj = dirichlet_energy(concave_majorant(p).on_mesh(mesh))
        rows.append({"x": p.x, "y": p.y, "lam": lam, "E": E, "J": energy_J(p),
                     "majorant_mesh": e_maj, "hull_mesh": dirichlet_energy(hull), "obstacle_mesh": e_obs,
                     "rel_err_obstacle": abs(e_obs - E) / E})
    out.append(write_csv(cfg.out / "energy_table.csv", rows))
    return {"max_rel_err_obstacle": max(r["rel_err_obstacle"] for r in rows)}


def cmd_airy_table(cfg, out):
    from .airy import airy_ai, airy_ai_prime, airy_kernel, airy_kernel_identity

    xs = np.linspace(cfg.params["x_min"], cfg.params["x_max"], cfg.params["points"])
    rows = []
    for x in xs:
        row = {"x": x, "ai": airy_ai(x), "ai_prime": airy_ai_prime(x)}
        if x <= 8:
            row["kernel_diag_quad"] = airy_kernel(x, 0.0, x, 0.0)
            row["kernel_diag_identity"] = airy_kernel_identity(x, x)
        rows.append(row)
    out.append(write_csv(cfg.out / "airy_table.csv", rows,
                         ["x", "ai", "ai_prime", "kernel_diag_quad", "kernel_diag_identity"]))
    return {"points": len(rows)}


def cmd_bridge_check(cfg, out):
    from .bridges import bridge_paths

    t, mesh, n = cfg.params["t"], cfg.params["mesh"], cfg.params["samples"]
    gen = _rng(cfg).generator()
    paths = bridge_paths(gen, 0.0, t, [0.0], [0.0], mesh, n)[:, 0, :]
    nodes = np.linspace(0.0, t, mesh + 1)
    rows = []
    for u_frac, v_frac in ((0.25, 0.5), (0.5, 0.5), (0.25, 0.75), (0.5, 0.75)):
        i, j = int(round(u_frac * mesh)), int(round(v_frac * mesh))
        u, v = nodes[i], nodes[j]
        prod = paths[:, i] * paths[:, j]
        emp = float(prod.mean())
        se = float(prod.std(ddof=1) / math.sqrt(n))
        exact = 2.0 * u * (t - v) / t
        rows.append({"u": u, "v": v, "cov_mc": emp, "se": se, "cov_exact": exact,
                     "z": (emp - exact) / se})
    out.append(write_csv(cfg.out / "bridge_check.csv", rows))
    return {"max_abs_z": max(abs(r["z"]) for r in rows)}


def km_mc_rows(ks, t, mesh, samples, rng, configs=10, crossing=True):
    from .bridges import BridgeSpec, acceptance_prob_mc, km_nonintersect_prob

    gen = rng.generator()
    rows = []
    for k in ks:
        for c in range(configs):
            x = np.sort(gen.uniform(-1.5, 1.5, k))[::-1] + np.linspace(0.3 * k, 0, k)
            y = np.sort(gen.uniform(-1.5, 1.5, k))[::-1] + np.linspace(0.3 * k, 0, k)
            km = km_nonintersect_prob(x, y, t)
            est = acceptance_prob_mc(BridgeSpec(0.0, t, x, y, mesh), None, None, samples,
                                     rng.substream(1000 * k + c), crossing=crossing)
            z = abs(km - est.value) / est.se if est.se > 0 else 0.0
            rows.append({"k": k, "config": c, "x": x, "y": y, "km": km, "mc": est.value, "se": est.se,
                         "abs_diff_over_se": z})
    return rows


def km_bound_rows(ks=(2, 3), alphas=(0.5, 1.0, 2.0), ts=(0.5, 1.0, 4.0)):
    from .bridges import km_lower_bound, km_nonintersect_prob

    rows = []
    for k in ks:
        for a in alphas:
            for t in ts:
                pts = a * np.arange(k, 0, -1, dtype=float)
                p = km_nonintersect_prob(pts, pts, t)
                lb = km_lower_bound(a, t, k)
                rows.append({"k": k, "alpha": a, "t": t, "km": p, "lower_bound": lb, "holds": p >= lb})
    return rows


def cmd_km_vs_mc(cfg, out):
    p = cfg.params
    rows = km_mc_rows(p["k"], p["t"], p["mesh"], p["samples"], _rng(cfg), p["configs"], p["crossing"] == "on")
    out.append(write_csv(cfg.out / "km_vs_mc.csv", rows))
    bound = km_bound_rows(p["k"])
    out.append(write_csv(cfg.out / "km_lower_bound.csv", bound))
    return {"max_abs_diff_over_se": max(r["abs_diff_over_se"] for r in rows),
            "lower_bound_holds": all(r["holds"] for r in bound)}


def reflection_histogram(samples, t, steps, bins, rng):
    from .bridges import brownian_extremes, reflection_cell_prob

    S, I, X = brownian_extremes(samples, t, steps, rng)
    top = 3.2 * math.sqrt(t)
    ab = np.linspace(0.0, top, bins + 1)
    xe = np.linspace(-top, top, bins + 1)
    H, _ = np.histogramdd(np.c_[S, I, X], bins=[ab, ab, xe])
    rows = []
    for i in range(bins):
        for j in range(bins):
            for l in range(bins):
                p = reflection_cell_prob((ab[i], ab[i + 1]), (ab[j], ab[j + 1]), (xe[l], xe[l + 1]), t)
                if p <= 0:
                    continue
                exp = samples * p
                se = math.sqrt(samples * p * (1 - p))
                rows.append({"a_lo": ab[i], "b_lo": ab[j], "x_lo": xe[l], "count": int(H[i, j, l]),
                             "expected": exp, "z": (H[i, j, l] - exp) / se})
    return rows


def cmd_reflection_check(cfg, out):
    from scipy import integrate

    from .bridges import reflection_density, reflection_density_leading

    p = cfg.params
    t = p["t"]
    top = 12.0 * math.sqrt(t)
    total = integrate.tplquad(lambda x, b, a: reflection_density(a, b, x, t), 0, top, 0, top,
                              lambda a, b: -b, lambda a, b: a, epsabs=1e-9)[0]
    leading = integrate.tplquad(lambda x, b, a: reflection_density_leading(a, b, x, t), 0, top, 0, top,
                                lambda a, b: -b, lambda a, b: a, epsabs=1e-9)[0]
    rows = reflection_histogram(p["samples"], t, p["steps"], p["bins"], _rng(cfg))
    out.append(write_csv(cfg.out / "reflection_bins.csv", rows))
    frac = float(np.mean([abs(r["z"]) <= 3 for r in rows]))
    return {"integral": total, "integral_leading_formula": leading, "fraction_bins_within_3se": frac}


def cmd_ensemble_density(cfg, out):
    from .ensemble import density_ratio_experiment, endpoint_box_battery, weighted_fit

    p = cfg.params
    signs = {"up": (1,), "down": (-1,), "both": (1, -1)}[p["signs"]]
    events = endpoint_box_battery(p["s_values"], p["k"], p["t"], p["half_width"], signs)
    rows = density_ratio_experiment(events, p["n"], p["k"], p["t"], p["samples"], _rng(cfg),
                                    patch=p["patch"], M=p["M"], mesh_per_unit=p["mesh"])
    out.append(write_csv(cfg.out / "density_ratio.csv", rows))
    slope, se, icpt, r = weighted_fit([-x["S"] for x in rows], [x["log_ratio"] for x in rows],
                                      [x["log_ratio_se"] for x in rows])
    return {"slope": slope, "slope_se": se, "intercept": icpt, "pearson_r_vs_minus_S": r}


def cmd_ensemble_tails(cfg, out):
    from .airy import TailConstants, one_point_lower_rhs, two_point_rhs
    from .ensemble import tail_experiment

    p = cfg.params
    res = tail_experiment(p["kind"], p["n"], p["k"], p["t"], p["m_grid"], p["samples"], _rng(cfg),
                          M=p["M"], mesh_per_unit=p["mesh"])
    # the closed-form bounds are stated for t >= 1 only
    const = TailConstants(p["c"], p["d"], p["k"], p["t"]) if p["t"] >= 1 else None
    for r in res["rows"] if const else []:
        if p["kind"] == "two-point":
            r["rhs_given_c"] = two_point_rhs(r["m"], const)
        else:
            both = one_point_lower_rhs(r["m"], const)
            r["upper_rhs_given_c"], r["lower_rhs_given_d"] = both["upper"], both["lower"]
    out.append(write_csv(cfg.out / f"tails_{p['kind']}.csv", res["rows"]))
    return {k: v for k, v in res.items() if k != "rows"}


def cmd_stationary(cfg, out):
    from .ensemble import stationary_counterexample_experiment

    p = cfg.params
    res = stationary_counterexample_experiment(p["m_grid"], p["samples"], _rng(cfg), n=p["n"], s=p["s"],
                                               patch=p["patch"], M=p["M"], mesh_per_unit=p["mesh"])
    out.append(write_csv(cfg.out / "stationary_counterexample.csv", res["rows"]))
    return {k: v for k, v in res.items() if k != "rows"}


HANDLERS = {
    "tetris-eval": cmd_tetris_eval,
    "energy-table": cmd_energy_table,
    "airy-table": cmd_airy_table,
    "bridge-check": cmd_bridge_check,
    "km-vs-mc": cmd_km_vs_mc,
    "reflection-check": cmd_reflection_check,
    "alpha-k": cmd_alpha_k,
    "opt-identity": cmd_opt_identity,
    "ensemble-density": cmd_ensemble_density,
    "ensemble-tails": cmd_ensemble_tails,
    "stationary-counterexample": cmd_stationary,
}


def run(cfg: ExperimentConfig) -> int:
    artifacts: list = []
    start = time.perf_counter()
    try:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            summary = HANDLERS[cfg.subcommand](cfg, artifacts)
        if caught:
            summary["warnings"] = sorted({f"{w.category.__name__}: {w.message}" for w in caught})
    except AirylabError as exc:
        err = {"error_class": exc.error_class, "message": str(exc)}
        write_manifest(cfg, artifacts, "error", {}, time.perf_counter() - start, err)
        print(json.dumps(err), file=sys.stderr)
        return EXIT_USAGE if isinstance(exc, UsageError) else EXIT_COMPUTE
    except (FloatingPointError, np.linalg.LinAlgError, ArithmeticError) as exc:
        err = {"error_class": "numeric", "message": str(exc)}
        write_manifest(cfg, artifacts, "error", {}, time.perf_counter() - start, err)
        print(json.dumps(err), file=sys.stderr)
        return EXIT_COMPUTE
    write_manifest(cfg, artifacts, "ok", summary, time.perf_counter() - start)
    print(json.dumps({"status": "ok", "out": str(cfg.out), "summary": _clean(summary)}, default=_json_default,
                     sort_keys=True))
    return EXIT_OK


def main(argv=None) -> int:
    try:
        cfg = make_config(argv)
    except UsageError as exc:
        print(json.dumps({"error_class": exc.error_class, "message": str(exc)}), file=sys.stderr)
        return EXIT_USAGE
    return run(cfg)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

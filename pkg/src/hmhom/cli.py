"""Command line driver: ``hmhom {generate,eim,study,bem}``.

Every option can also be given in a JSON file passed with ``--config``
(keys are the long option names with dashes or underscores); explicit flags
override the file. Results are written as JSON and CSV.

Exit codes: 0 success, 2 configuration error, 3 solver failure,
4 microstructure generation failure. ``HMHOM_NUM_THREADS`` caps the number
of BLAS/OpenMP threads.
"""

from __future__ import annotations

import os

_threads = os.environ.get("HMHOM_NUM_THREADS")
if _threads:
    # must happen before numpy loads its BLAS
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[_var] = _threads

import argparse  # noqa: E402
import csv  # noqa: E402
import io  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
import time  # noqa: E402

import numpy as np  # noqa: E402

from . import bem, eim, pergreen  # noqa: E402
from .hmatrix import HLUError  # noqa: E402
from .microstructure import (Domain, Microstructure, PlacementError, Sphere,  # noqa: E402
                             generate_rsa, icosphere_mesh, mesh_microstructure,
                             radius_for_fraction, unit_volume_ball_radius)

log = logging.getLogger("hmhom")

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_GENERATION = 0, 2, 3, 4

EIM_STATS_FIELDS = ["n_inclusions", "n_dofs", "epsilon", "eta", "leaf_size", "stored", "dense",
                    "ratio", "rank_min", "rank_max", "rank_mean", "assembly_time", "hlu_time",
                    "iterations", "residual", "keff_scalar"]
ETA_FIELDS = ["eta", "n_inclusions", "n_dofs", "stored", "ratio", "rank_mean", "assembly_time"]
SCALING_FIELDS = ["n_inclusions", "n_dofs", "stored", "dense", "ratio", "rank_mean", "assembly_time"]
GREEN_FIELDS = ["L", "variant", "q", "defect", "value_defect", "derivative_defect"]
BEM_STATS_FIELDS = ["kernel", "n_panels", "n_inclusions", "epsilon", "eta", "leaf_size", "stored",
                    "dense", "ratio", "assembly_time", "iterations", "residual", "keff_scalar"]


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration


GEN_DEFAULTS = {
    "domain": "ball", "count": 200, "fraction": 0.3, "radius": None, "ball_radius": None,
    "seed": 1, "kappa": 100.0, "kappa_matrix": 1.0, "min_gap": 0.0, "max_attempts": 20_000_000,
}

DEFAULTS = {
    "generate": {**GEN_DEFAULTS, "output": None, "mesh_level": None, "mesh_output": None},
    "eim": {**GEN_DEFAULTS, "input": None, "epsilon": 1e-3, "epsilon_sweep": None, "eta": 1.7,
            "leaf_size": 15, "tol": 1e-10, "epsilon_lu": None, "directions": 3,
            "output": None, "stats_csv": None},
    "study": {**GEN_DEFAULTS, "count": 1000, "kind": None, "epsilon": 1e-3, "eta": 1.7, "leaf_size": 15,
              "etas": "0.5,0.8,1.1,1.4,1.7,2.0,2.6", "sizes": "200,500,1000,2000",
              "degrees": "2,3,4,5,6,7,8,9", "variant": "image", "quad_order": None,
              "output": None, "summary": None},
    "bem": {**GEN_DEFAULTS, "domain": "periodic-cube", "count": 8, "fraction": 0.2,
            "min_gap": 0.02, "input": None, "kernel": "periodic", "level": 2, "epsilon": 1e-3,
            "eta": 1.7, "leaf_size": 32, "tol": 1e-8, "green_degree": 9, "directions": 3, "estimate": "surface",
            "validate_sphere": False, "slice_axis": 2, "slice_offset": 0.0, "grid": 40,
            "field_csv": None, "output": None, "stats_csv": None},
}


def _add_generation_args(p):
    g = p.add_argument_group("microstructure generation")
    g.add_argument("--domain", choices=["ball", "periodic-cube"])
    g.add_argument("--count", type=int, help="number of spheres")
    g.add_argument("--fraction", type=float, help="target volume fraction (sets the radius)")
    g.add_argument("--radius", type=float, help="sphere radius (overrides --fraction)")
    g.add_argument("--ball-radius", type=float, help="ball domain radius (default: unit volume)")
    g.add_argument("--seed", type=int)
    g.add_argument("--kappa", type=float, help="inclusion diffusion coefficient")
    g.add_argument("--kappa-matrix", type=float)
    g.add_argument("--min-gap", type=float, help="minimal gap between spheres")
    g.add_argument("--max-attempts", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hmhom", description=__doc__.splitlines()[0],
                                     argument_default=None)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="random sphere packing to JSON")
    p.add_argument("--config")
    _add_generation_args(p)
    p.add_argument("-o", "--output", help="microstructure JSON (stdout if omitted)")
    p.add_argument("--mesh-level", type=int, help="also triangulate the spheres")
    p.add_argument("--mesh-output", help="mesh JSON path (.obj for Wavefront text)")

    p = sub.add_parser("eim", help="equivalent inclusion method with H-matrices")
    p.add_argument("--config")
    p.add_argument("-i", "--input", help="microstructure JSON (otherwise generated)")
    _add_generation_args(p)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--epsilon-sweep", help="comma separated list; one stats row per value")
    p.add_argument("--eta", type=float)
    p.add_argument("--leaf-size", type=int)
    p.add_argument("--tol", type=float)
    p.add_argument("--epsilon-lu", type=float)
    p.add_argument("--directions", type=int, choices=[1, 3],
                   help="1: solve for E = e1 only; 3: full effective tensor")
    p.add_argument("-o", "--output", help="results JSON")
    p.add_argument("--stats-csv")

    p = sub.add_parser("study", help="parameter studies written as CSV")
    p.add_argument("kind", nargs="?", choices=["eta-sweep", "scaling", "green-convergence"])
    p.add_argument("--config")
    _add_generation_args(p)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--eta", type=float)
    p.add_argument("--leaf-size", type=int)
    p.add_argument("--etas", help="eta values for eta-sweep")
    p.add_argument("--sizes", help="inclusion counts for scaling")
    p.add_argument("--degrees", help="degrees L for green-convergence")
    p.add_argument("--variant", choices=list(pergreen.VARIANTS))
    p.add_argument("--quad-order", type=int, help="Gauss order for green-convergence (fixed)")
    p.add_argument("-o", "--output", help="CSV path (stdout if omitted)")
    p.add_argument("--summary", help="JSON summary path")

    p = sub.add_parser("bem", help="periodic boundary element solver")
    p.add_argument("--config")
    p.add_argument("-i", "--input", help="microstructure JSON (periodic cube)")
    _add_generation_args(p)
    p.add_argument("--kernel", choices=["free", "periodic", "both"])
    p.add_argument("--level", type=int, help="icosphere subdivision level")
    p.add_argument("--epsilon", type=float)
    p.add_argument("--eta", type=float)
    p.add_argument("--leaf-size", type=int)
    p.add_argument("--tol", type=float)
    p.add_argument("--green-degree", type=int)
    p.add_argument("--directions", type=int, choices=[1, 3])
    p.add_argument("--estimate", choices=["surface", "dipole"],
                   help="effective-tensor formula (surface potential or density moment)")
    p.add_argument("--validate-sphere", action="store_true", default=None,
                   help="single unit sphere, free space: compare with the analytic density")
    p.add_argument("--slice-axis", type=int, choices=[0, 1, 2])
    p.add_argument("--slice-offset", type=float)
    p.add_argument("--grid", type=int, help="slice grid points per side")
    p.add_argument("--field-csv")
    p.add_argument("-o", "--output", help="results JSON")
    p.add_argument("--stats-csv")
    return parser


def resolve_config(args: argparse.Namespace) -> dict:
    """defaults < JSON config file < explicit flags."""
    defaults = DEFAULTS[args.command]
    cfg = dict(defaults)
    path = getattr(args, "config", None)
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
        for key, val in data.items():
            k = key.replace("-", "_")
            if k not in defaults:
                raise ConfigError(f"unknown config key {key!r}")
            cfg[k] = val
    for k, v in vars(args).items():
        if k in defaults and v is not None:
            cfg[k] = v
    for k in ("epsilon", "tol", "eta"):
        if k in cfg and cfg[k] is not None and not float(cfg[k]) > 0:
            raise ConfigError(f"{k} must be positive")
    return cfg


def _floats(text) -> list:
    if isinstance(text, (list, tuple)):
        return [float(v) for v in text]
    try:
        return [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad number list {text!r}") from exc


def _ints(text) -> list:
    return [int(round(v)) for v in _floats(text)]


# ---------------------------------------------------------------------------
# helpers


def _domain(cfg) -> Domain:
    if cfg["domain"] == "ball":
        return Domain("ball", cfg["ball_radius"] or unit_volume_ball_radius())
    if cfg["domain"] == "periodic-cube":
        return Domain("periodic-cube")
    raise ConfigError(f"unknown domain {cfg['domain']!r}")


def _generate(cfg, count=None) -> Microstructure:
    dom = _domain(cfg)
    n = int(cfg["count"] if count is None else count)
    if n < 0:
        raise ConfigError("count must be non-negative")
    radius = cfg["radius"]
    if radius is None:
        if n == 0:
            radius = 0.1
        else:
            if not 0 < cfg["fraction"] < 1:
                raise ConfigError("fraction must lie in (0, 1)")
            radius = radius_for_fraction(dom, n, cfg["fraction"])
    try:
        return generate_rsa(dom, n, radius, seed=int(cfg["seed"]), max_attempts=int(cfg["max_attempts"]),
                            kappa=float(cfg["kappa"]), kappa_matrix=float(cfg["kappa_matrix"]),
                            min_gap=float(cfg["min_gap"]))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _load_or_generate(cfg) -> Microstructure:
    if cfg.get("input"):
        try:
            with open(cfg["input"], encoding="utf-8") as fh:
                return Microstructure.from_json(fh.read())
        except OSError as exc:
            raise ConfigError(f"cannot read {cfg['input']}: {exc}") from exc
        except (ValueError, KeyError) as exc:
            raise ConfigError(f"invalid microstructure file: {exc}") from exc
    return _generate(cfg)


def _write(path, text: str):
    if path is None or path == "-":
        sys.stdout.write(text)
        return
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _csv(fields, rows) -> str:
    buf = io.StringIO()
    wr = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n", extrasaction="ignore")
    wr.writeheader()
    for r in rows:
        wr.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in fields})
    return buf.getvalue()


def _fit_slope(x, y) -> float:
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])


def _eim_storage(ms, cfg, eta=None, epsilon=None):
    problem = eim.EimProblem(ms)
    sc = eim.SolverConfig(epsilon=epsilon or cfg["epsilon"], eta=eta or cfg["eta"],
                          leaf_size=int(cfg["leaf_size"]), precondition=False)
    system = eim.EimSystem(problem, sc)
    return system.stats()


# ---------------------------------------------------------------------------
# commands


def cmd_generate(cfg) -> int:
    ms = _generate(cfg)
    _write(cfg["output"], ms.to_json() + "\n")
    if cfg["mesh_level"] is not None:
        mesh = mesh_microstructure(ms, int(cfg["mesh_level"]))
        out = cfg["mesh_output"]
        text = mesh.to_obj() if out and out.endswith(".obj") else json.dumps(mesh.to_dict()) + "\n"
        if out is None:
            raise ConfigError("--mesh-level needs --mesh-output")
        _write(out, text)
    log.info("generated %d spheres", len(ms))
    return EXIT_OK


def cmd_eim(cfg) -> int:
    ms = _load_or_generate(cfg)
    if ms.domain.kind != "ball":
        raise ConfigError("the eim command needs a ball microstructure")
    if len(ms) == 0:
        raise ConfigError("empty microstructure")
    try:
        problem = eim.EimProblem(ms)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    eps_list = _floats(cfg["epsilon_sweep"]) if cfg["epsilon_sweep"] else [float(cfg["epsilon"])]
    rows, results = [], []
    for eps in eps_list:
        sc = eim.SolverConfig(epsilon=eps, eta=float(cfg["eta"]), leaf_size=int(cfg["leaf_size"]),
                              tol=float(cfg["tol"]), epsilon_lu=cfg["epsilon_lu"])
        system = eim.EimSystem(problem, sc)
        dirs = np.eye(3) if int(cfg["directions"]) == 3 else np.eye(3)[:1]
        taus = [system.solve(e) for e in dirs]
        st = system.stats()
        est = eim.effective_estimate(problem, taus) if len(taus) == 3 else None
        last = taus[0].report["solves"][-1]
        rows.append({"n_inclusions": len(ms), "n_dofs": problem.n * 3, "epsilon": eps,
                     "eta": cfg["eta"], "leaf_size": cfg["leaf_size"], "stored": st.stored,
                     "dense": st.dense, "ratio": st.ratio, "rank_min": st.rank_min,
                     "rank_max": st.rank_max, "rank_mean": st.rank_mean,
                     "assembly_time": st.times.get("assembly"), "hlu_time": st.times.get("h_lu"),
                     "iterations": last["iterations"], "residual": last["residual"],
                     "keff_scalar": est.scalar if est else None})
        res = {"epsilon": eps, "stats": st.to_dict(), "solves": [t.report for t in taus],
               "tau_e1": taus[0].tau.tolist()}
        if est is not None:
            res["effective"] = est.to_dict()
        results.append(res)
    _write(cfg["output"], json.dumps({"command": "eim", "n_inclusions": len(ms), "runs": results},
                                     indent=2) + "\n")
    if cfg["stats_csv"]:
        _write(cfg["stats_csv"], _csv(EIM_STATS_FIELDS, rows))
    return EXIT_OK


def cmd_study(cfg) -> int:
    kind = cfg["kind"]
    if kind is None:
        raise ConfigError("study kind required: eta-sweep, scaling or green-convergence")
    summary: dict = {"study": kind}
    if kind == "eta-sweep":
        ms = _generate(cfg)
        rows = []
        for eta in _floats(cfg["etas"]):
            st = _eim_storage(ms, cfg, eta=eta)
            rows.append({"eta": eta, "n_inclusions": len(ms), "n_dofs": 3 * len(ms),
                         "stored": st.stored, "ratio": st.ratio, "rank_mean": st.rank_mean,
                         "assembly_time": st.times.get("assembly")})
            log.info("eta=%g ratio=%.4f", eta, st.ratio)
        best = min(rows, key=lambda r: r["stored"])
        summary.update({"n_inclusions": len(ms), "argmin_eta": best["eta"]})
        text = _csv(ETA_FIELDS, rows)
    elif kind == "scaling":
        rows = []
        for n in _ints(cfg["sizes"]):
            ms = _generate(cfg, count=n)
            st = _eim_storage(ms, cfg)
            rows.append({"n_inclusions": n, "n_dofs": 3 * n, "stored": st.stored, "dense": st.dense,
                         "ratio": st.ratio, "rank_mean": st.rank_mean,
                         "assembly_time": st.times.get("assembly")})
            log.info("N=%d ratio=%.4f", n, st.ratio)
        if len(rows) >= 2:
            summary["storage_slope"] = _fit_slope([r["n_inclusions"] for r in rows],
                                                  [r["stored"] for r in rows])
        text = _csv(SCALING_FIELDS, rows)
    elif kind == "green-convergence":
        degrees = _ints(cfg["degrees"])
        q = cfg["quad_order"] or pergreen.default_quadrature_order(max(degrees))
        fits = [pergreen.fit_expansion(L, q=int(q), variant=cfg["variant"], gauge="none")
                for L in degrees]
        d = [f.report["defect"] for f in fits]
        summary.update({"q": int(q), "defects": d,
                        "strictly_decreasing": all(b < a for a, b in zip(d, d[1:]))})
        text = pergreen.fit_report_csv(fits)
    else:
        raise ConfigError(f"unknown study {kind!r}")
    _write(cfg["output"], text)
    if cfg["summary"]:
        _write(cfg["summary"], json.dumps(summary, indent=2) + "\n")
    else:
        log.info("summary: %s", json.dumps(summary))
    return EXIT_OK


def _bem_run(ms, mesh, kernel, cfg, expansion):
    problem = bem.BieProblem(mesh, float(cfg["kappa"]), ms.kappa_matrix, kernel=kernel,
                             expansion=expansion)
    bc = bem.BemConfig(epsilon=float(cfg["epsilon"]), eta=float(cfg["eta"]),
                       leaf_size=int(cfg["leaf_size"]), tol=float(cfg["tol"]))
    system = bem.BemSystem(problem, bc)
    dirs = np.eye(3) if int(cfg["directions"]) == 3 else np.eye(3)[:1]
    sigmas = [system.solve(e) for e in dirs]
    est = None
    if len(sigmas) == 3:
        est = bem.effective_estimate_bem(problem, sigmas, bc, method=cfg["estimate"])
    st = system.stats
    row = {"kernel": kernel, "n_panels": len(mesh), "n_inclusions": len(ms),
           "epsilon": cfg["epsilon"], "eta": cfg["eta"], "leaf_size": cfg["leaf_size"],
           "stored": st["stored"], "dense": st["dense"], "ratio": st["ratio"],
           "assembly_time": st["times"]["assembly"], "iterations": sigmas[0].report["iterations"],
           "residual": sigmas[0].report["residual"], "keff_scalar": est.scalar if est else None}
    return problem, sigmas, est, row


def cmd_bem(cfg) -> int:
    if cfg["validate_sphere"]:
        sphere = Sphere((0.0, 0.0, 0.0), 1.0, float(cfg["kappa"]))
        mesh = icosphere_mesh(sphere, int(cfg["level"]))
        problem = bem.BieProblem(mesh, float(cfg["kappa"]), float(cfg["kappa_matrix"]), kernel="free")
        field = bem.solve_bie(problem, float(cfg["epsilon"]), float(cfg["eta"]), float(cfg["tol"]))
        c = bem.sphere_density_constant(problem.kappa_int, problem.kappa_ext)
        en = problem.rhs()
        fitted = float(field.sigma @ en / (en @ en))
        err = float(np.abs(field.sigma - c * en).max() / abs(c))
        out = {"panels": len(mesh), "analytic_constant": c, "fitted_constant": fitted,
               "relative_error": abs(fitted / c - 1.0), "max_pointwise_error": err}
        print(f"sphere validation: analytic c={c:.6f} computed c={fitted:.6f} "
              f"relative error {abs(fitted / c - 1.0):.3e} (max pointwise {err:.3e})")
        if cfg["output"]:
            _write(cfg["output"], json.dumps(out, indent=2) + "\n")
        return EXIT_OK
    ms = _load_or_generate(cfg)
    if len(ms) == 0:
        raise ConfigError("empty microstructure")
    if cfg["kernel"] in ("periodic", "both") and not ms.domain.periodic:
        raise ConfigError("the periodic kernel needs a periodic-cube microstructure")
    mesh = mesh_microstructure(ms, int(cfg["level"]))
    kernels = ["free", "periodic"] if cfg["kernel"] == "both" else [cfg["kernel"]]
    expansion = None
    if "periodic" in kernels:
        expansion = pergreen.fit_expansion(int(cfg["green_degree"]))
    rows, runs = [], {}
    for k in kernels:
        t0 = time.perf_counter()
        problem, sigmas, est, row = _bem_run(ms, mesh, k, cfg, expansion)
        rows.append(row)
        runs[k] = {"stats": row, "effective": est.to_dict() if est else None,
                   "solves": [s.report for s in sigmas], "time": time.perf_counter() - t0}
        if cfg["field_csv"] and k == kernels[-1]:
            pts = bem.slice_grid(int(cfg["slice_axis"]), float(cfg["slice_offset"]), int(cfg["grid"]))
            vals = bem.eval_corrector(problem, sigmas[0], pts)
            _write(cfg["field_csv"], bem.field_csv(pts, vals))
    _write(cfg["output"], json.dumps({"command": "bem", "n_panels": len(mesh), "runs": runs},
                                     indent=2) + "\n")
    if cfg["stats_csv"]:
        _write(cfg["stats_csv"], _csv(BEM_STATS_FIELDS, rows))
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "eim": cmd_eim, "study": cmd_study, "bem": cmd_bem}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"hmhom: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except PlacementError as exc:
        print(f"hmhom: generation failed: {exc}", file=sys.stderr)
        return EXIT_GENERATION
    except (eim.EimError, bem.BemError, HLUError, pergreen.GreenFitError) as exc:
        print(f"hmhom: solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())

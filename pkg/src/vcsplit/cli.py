"""Command-line interface.

Subcommands: fit, test, ci, simulate, diagnose, kernels.  Options can come
from a JSON config (--config) with command-line flags taking precedence.
Every result record embeds the seeds, the config hash and the package
version; reruns with the same config reproduce identical records.

Exit codes: 0 success, 1 usage/parse error, 2 numerical failure,
3 statistical edge case (empty confidence set).
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, io
from .diagnostics import blup, center_response, qq_data, residual_vs_fitted
from .errors import InvalidParameterError, VcsplitError
from .estimation import FitOptions, NullSpec, fit_marginal
from .model import KernelSet, Sigma2Param, sigma2_from_theta
from .simulate import (
    ExperimentSpec,
    ar1_eigen_kernel,
    disjoint_support_kernels,
    gen_data,
    run_experiment,
    spiked_kernel_pair,
    write_table,
)
from .slrt import (
    acceptance_width,
    ci_width_distribution,
    confidence_interval,
    kfold_slrt,
    to_diagonal_coords,
)
from .structured import CrossedDesign, build_crossed_Z, crossed_eigs


def _parse_null(text: str) -> dict[int, float]:
    """Parse 'h1=0,h2=0.3' into 0-based component pins."""
    pins = {}
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            name, value = part.split("=")
            idx = int(name.strip().lstrip("h")) - 1
            pins[idx] = float(value)
        except (ValueError, IndexError):
            raise InvalidParameterError(
                f"cannot parse null spec {part!r}; expected e.g. h1=0"
            ) from None
        if idx < 0:
            raise InvalidParameterError(f"component in {part!r} must be >= 1")
    return pins


def _parse_grid(text: str) -> np.ndarray:
    try:
        lo, hi, steps = text.split(":")
        return np.linspace(float(lo), float(hi), int(steps))
    except ValueError:
        raise InvalidParameterError(f"cannot parse grid {text!r}; expected lo:hi:steps") from None


def _load_inputs(cfg: dict):
    """Response plus kernel set from config (files or crossed design)."""
    if "response" not in cfg:
        raise InvalidParameterError("config needs a 'response' path")
    y = io.read_response(cfg["response"])
    if cfg.get("center"):
        y = center_response(y)
    if "design" in cfg:
        d = cfg["design"]
        kset = KernelSet.from_crossed(d["dims"], d.get("factors"))
    elif "kernels" in cfg:
        kset = io.load_kernel_set(cfg["kernels"], cfg.get("basis"))
    else:
        raise InvalidParameterError("config needs 'kernels' files or a crossed 'design'")
    if len(y.y) != kset.n:
        raise InvalidParameterError(
            f"response length {len(y.y)} does not match kernel size {kset.n}"
        )
    return y, kset


def _fit_options(cfg: dict) -> FitOptions:
    opt = cfg.get("optimizer", {})
    return FitOptions(
        max_iters=int(opt.get("max_iters", 500)),
        tol_grad=float(opt.get("tol_grad", 1e-6)),
        tol_obj=float(opt.get("tol_obj", 1e-10)),
        n_starts=int(opt.get("n_starts", 3)),
        start_seed=int(opt.get("start_seed", 0)),
    )


def _seeds(cfg: dict) -> dict:
    s = cfg.get("seeds", {})
    return {
        "split": int(s.get("split", 0)),
        "u": int(s.get("u", 1)),
        "master": int(s.get("master", 20260810)),
    }


def _out_dir(cfg: dict) -> Path:
    out = Path(cfg.get("out", "."))
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_fit(cfg: dict) -> int:
    y, kset = _load_inputs(cfg)
    opts = _fit_options(cfg)
    y_work, kset_work = to_diagonal_coords(y.y, kset)
    fit = fit_marginal(y_work, kset_work, opts)
    sigma2 = sigma2_from_theta(fit.theta).sigma2
    record = {
        "command": "fit",
        "seeds": _seeds(cfg),
        "h2": fit.theta.h2,
        "tau2": fit.theta.tau2,
        "sigma2": sigma2,
        "loglik": fit.loglik,
        "converged": fit.converged,
        "iterations": fit.iterations,
        "grad_norm": fit.grad_norm,
    }
    rec = io.write_record(record, cfg, _out_dir(cfg) / "fit.json")
    print(json.dumps(rec, indent=2, default=io._jsonable))
    return 0


def cmd_test(cfg: dict) -> int:
    y, kset = _load_inputs(cfg)
    opts = _fit_options(cfg)
    seeds = _seeds(cfg)
    pins = cfg.get("null", {})
    if isinstance(pins, str):
        pins = _parse_null(pins)
    null = NullSpec.fix({int(k): float(v) for k, v in pins.items()})
    res = kfold_slrt(
        y.y, kset, null, k=int(cfg.get("k", 1)), seed=seeds["split"],
        alpha=float(cfg.get("alpha", 0.05)), seed_u=seeds["u"], opts=opts,
        unconstrained_alt=cfg.get("variant") == "unconstrained",
        unconstrained_null=cfg.get("variant") == "unconstrained",
    )
    record = {
        "command": "test",
        "seeds": seeds,
        "null": {str(k): v for k, v in pins.items()},
        "alpha": res.alpha,
        "k": res.k,
        "stat": res.stat if np.isfinite(res.stat) else "inf",
        "log_stat": res.log_stat,
        "fold_log_stats": list(res.fold_log_stats),
        "u": res.u,
        "reject": res.reject,
        "p_value": res.p_value,
    }
    rec = io.write_record(record, cfg, _out_dir(cfg) / "test.json")
    print(json.dumps(rec, indent=2, default=io._jsonable))
    return 0


def cmd_ci(cfg: dict) -> int:
    y, kset = _load_inputs(cfg)
    opts = _fit_options(cfg)
    seeds = _seeds(cfg)
    component = int(cfg.get("component", 1)) - 1
    grid = cfg.get("grid")
    if isinstance(grid, str):
        grid = _parse_grid(grid)
    elif isinstance(grid, list):
        grid = np.asarray(grid, dtype=float)
    res = confidence_interval(
        y.y, kset, component, alpha=float(cfg.get("alpha", 0.05)), grid=grid,
        k=int(cfg.get("k", 1)), seed=seeds["split"], seed_u=seeds["u"],
        scale=cfg.get("scale", "h2"), opts=opts,
    )
    out = _out_dir(cfg)
    curve_rows = [
        dict(value=float(g), log_stat=float(ls), log_threshold=res.log_threshold)
        for g, ls in zip(res.grid, res.log_stats)
    ]
    write_table(curve_rows, out / "ci_curve.tsv")
    record = {
        "command": "ci",
        "seeds": seeds,
        "component": component + 1,
        "scale": res.scale,
        "alpha": res.alpha,
        "k": res.k,
        "u": res.u,
        "lower": res.lower,
        "upper": res.upper,
        "empty": res.empty,
        "curve_file": str(out / "ci_curve.tsv"),
    }
    if cfg.get("width_draws"):
        widths = ci_width_distribution(res.grid, res.log_stats, res.alpha,
                                       int(cfg["width_draws"]), seeds["master"])
        record["width_mean"] = float(widths.mean())
        record["width_nonrandomized"] = acceptance_width(
            res.grid, res.log_stats, res.alpha, 1.0
        )
    rec = io.write_record(record, cfg, out / "ci.json")
    print(json.dumps(rec, indent=2, default=io._jsonable))
    return 3 if res.empty else 0


def cmd_simulate(cfg: dict) -> int:
    seeds = _seeds(cfg)
    scenario = cfg.get("scenario")
    if scenario not in ("coverage", "power", "timing"):
        raise InvalidParameterError("simulate needs scenario coverage|power|timing")
    spec = ExperimentSpec(scenario=scenario, seed=seeds["master"])
    overrides = {}
    for name in ("n", "replications", "alpha", "tau2", "threads", "n_components",
                 "timing_reps"):
        if name in cfg:
            overrides[name] = type(getattr(spec, name))(cfg[name])
    for name in ("rho", "truth_grid", "q", "spike", "truth_h2", "null_grid",
                 "variants", "sizes"):
        if name in cfg:
            overrides[name] = tuple(tuple(v) if isinstance(v, list) else v
                                    for v in cfg[name])
    if overrides:
        spec = replace(spec, **overrides)
    spec = replace(spec, opts=_fit_options(cfg))
    rows = run_experiment(spec)
    out = _out_dir(cfg)
    table_path = out / f"{scenario}.tsv"
    write_table(rows, table_path)
    manifest = {
        "command": "simulate",
        "scenario": scenario,
        "seeds": seeds,
        "spec": {k: v for k, v in spec.__dict__.items() if k != "opts"},
        "table": str(table_path),
        "rows": len(rows),
    }
    rec = io.write_record(manifest, cfg, out / f"{scenario}_manifest.json")
    print(json.dumps({k: rec[k] for k in ("scenario", "table", "rows", "config_hash")},
                     indent=2))
    return 0


def cmd_diagnose(cfg: dict) -> int:
    if "design" not in cfg:
        raise InvalidParameterError("diagnose needs a crossed 'design' in the config")
    y, kset = _load_inputs(cfg)
    opts = _fit_options(cfg)
    d = cfg["design"]
    design = CrossedDesign(tuple(d["dims"]), d.get("factors"))
    if "sigma2" in cfg:
        s = Sigma2Param(np.asarray(cfg["sigma2"], dtype=float))
    else:
        y_work, kset_work = to_diagonal_coords(y.y, kset)
        fit = fit_marginal(y_work, kset_work, opts)
        s = sigma2_from_theta(fit.theta)
    Z = build_crossed_Z(design)
    res = blup(y.y, Z, s)
    out = _out_dir(cfg)
    qq = qq_data(res.resid, scale=float(np.sqrt(s.sigma2[-1])))
    write_table([dict(theoretical=float(a), observed=float(b)) for a, b in qq],
                out / "qq.tsv")
    rv = residual_vs_fitted(res)
    write_table([dict(fitted=float(a), resid=float(b)) for a, b in rv],
                out / "residual_vs_fitted.tsv")
    record = {
        "command": "diagnose",
        "seeds": _seeds(cfg),
        "sigma2": s.sigma2,
        "u_hat": res.u_hat,
        "factor_sizes": list(res.factor_sizes),
        "qq_file": str(out / "qq.tsv"),
        "residual_file": str(out / "residual_vs_fitted.tsv"),
    }
    rec = io.write_record(record, cfg, out / "diagnose.json")
    print(json.dumps({k: rec[k] for k in ("command", "qq_file", "residual_file",
                                          "config_hash")}, indent=2))
    return 0


def cmd_kernels(cfg: dict) -> int:
    gen = cfg.get("generator")
    out = _out_dir(cfg)
    seeds = _seeds(cfg)
    params = cfg.get("params", {})
    if gen == "ar1-eigen":
        lam = ar1_eigen_kernel(int(params["n"]), float(params["rho"]))
        io.write_kernel_diag(lam, out / "ar1_eigen.csv")
        files = ["ar1_eigen.csv"]
    elif gen == "spiked-pair":
        kset = spiked_kernel_pair(
            int(params["n"]), int(params["q1"]), int(params["q2"]),
            float(params.get("a1", 5.0)), float(params.get("a2", 5.0)),
            float(params.get("a3", 10.0)), float(params.get("c", 100.0)),
            seed=seeds["master"],
        )
        for i, K in enumerate(kset.dense_kernels(), start=1):
            io.write_kernel_dense(K, out / f"spiked_{i}.csv")
        files = ["spiked_1.csv", "spiked_2.csv"]
    elif gen == "crossed":
        design = CrossedDesign(tuple(params["dims"]), params.get("factors"))
        eig = crossed_eigs(design)
        files = []
        for m in range(eig.eigs.shape[1]):
            name = f"crossed_{m + 1}.csv"
            io.write_kernel_diag(eig.eigs[:, m], out / name)
            files.append(name)
    elif gen == "disjoint-support":
        lam, basis = disjoint_support_kernels(
            int(params["n"]), int(params.get("m", 2)),
            float(params.get("rho", 0.5)), seed=seeds["master"],
        )
        files = []
        for m in range(lam.shape[1]):
            name = f"disjoint_{m + 1}.csv"
            io.write_kernel_diag(lam[:, m], out / name)
            files.append(name)
        if params.get("write_basis"):
            io.write_basis(basis, out / "basis.csv")
            files.append("basis.csv")
    else:
        raise InvalidParameterError(
            "generator must be ar1-eigen|spiked-pair|crossed|disjoint-support"
        )
    rec = io.write_record(
        {"command": "kernels", "generator": gen, "seeds": seeds, "files": files},
        cfg, out / "kernels.json",
    )
    print(json.dumps(rec, indent=2, default=io._jsonable))
    return 0


_COMMANDS = {
    "fit": cmd_fit,
    "test": cmd_test,
    "ci": cmd_ci,
    "simulate": cmd_simulate,
    "diagnose": cmd_diagnose,
    "kernels": cmd_kernels,
}


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vcsplit", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", type=str, default=None)
        sp.add_argument("--response", type=str)
        sp.add_argument("--kernels", type=str, nargs="+")
        sp.add_argument("--basis", type=str)
        sp.add_argument("--dims", type=int, nargs="+")
        sp.add_argument("--factors", type=int)
        sp.add_argument("--center", action="store_true", default=None)
        sp.add_argument("--alpha", type=float)
        sp.add_argument("--k", type=int)
        sp.add_argument("--seed-split", type=int, dest="seed_split")
        sp.add_argument("--seed-u", type=int, dest="seed_u")
        sp.add_argument("--seed-master", type=int, dest="seed_master")
        sp.add_argument("--null", type=str)
        sp.add_argument("--component", type=int)
        sp.add_argument("--scale", type=str, choices=["h2", "var", "sd"])
        sp.add_argument("--grid", type=str)
        sp.add_argument("--method", type=str, choices=["naive", "nulldiag", "fulldiag"])
        sp.add_argument("--variant", type=str,
                        choices=["exact", "approx", "unconstrained"])
        sp.add_argument("--scenario", type=str)
        sp.add_argument("--n", type=int)
        sp.add_argument("--replications", type=int)
        sp.add_argument("--threads", type=int)
        sp.add_argument("--generator", type=str)
        sp.add_argument("--width-draws", type=int, dest="width_draws")
        sp.add_argument("--sigma2", type=float, nargs="+")
        sp.add_argument("--param", action="append", default=None,
                        help="generator parameter name=value (repeatable)")
        sp.add_argument("--out", type=str)
    return p


def _merge_config(args: argparse.Namespace) -> dict:
    cfg = io.load_config(args.config) if args.config else {}
    seeds = dict(cfg.get("seeds", {}))
    if args.seed_split is not None:
        seeds["split"] = args.seed_split
    if args.seed_u is not None:
        seeds["u"] = args.seed_u
    if args.seed_master is not None:
        seeds["master"] = args.seed_master
    if seeds:
        cfg["seeds"] = seeds
    if args.dims is not None:
        design = dict(cfg.get("design", {}))
        design["dims"] = args.dims
        if args.factors is not None:
            design["factors"] = args.factors
        cfg["design"] = design
    if args.param:
        params = dict(cfg.get("params", {}))
        for item in args.param:
            name, _, value = item.partition("=")
            try:
                params[name] = json.loads(value)
            except json.JSONDecodeError:
                params[name] = value
        cfg["params"] = params
    for name in ("response", "kernels", "basis", "center", "alpha", "k", "null",
                 "component", "scale", "grid", "method", "variant", "scenario",
                 "n", "replications", "threads", "generator", "out",
                 "width_draws", "sigma2"):
        val = getattr(args, name, None)
        if val is not None:
            cfg[name] = val
    return cfg


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else 1
    try:
        cfg = _merge_config(args)
        return _COMMANDS[args.command](cfg)
    except (InvalidParameterError, FileNotFoundError, KeyError) as e:
        print(f"vcsplit: {e}", file=sys.stderr)
        return 1
    except VcsplitError as e:
        print(f"vcsplit: numerical failure: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

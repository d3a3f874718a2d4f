"""Command-line interface: ``mner {fit,predict,interval,simulate,validate}``.

Exit codes: 0 success, 2 input error, 3 numerical failure, 4 validation failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, fields, replace

import numpy as np

from . import __version__
from .blup import fit
from .core import InputError, NumericalError
from .io import (
    RunConfig,
    fmt,
    flatten,
    ingest_csv,
    load_config,
    output_dir,
    parse_ell,
    read_targets,
    write_csv,
    write_json,
)
from .simulation import SimConfig, ell_names, preset, run_study
from .uncertainty import corrected_interval, msem_estimate
from .validation import run_all

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_VALIDATION = 0, 2, 3, 4

log = logging.getLogger("mner")


def _run_info(args, cfg: RunConfig) -> dict:
    return {
        "version": __version__,
        "command": args.command,
        "seed": args.seed if args.seed is not None else cfg.seed,
        "config": cfg.as_dict(),
        "argv": {k: v for k, v in vars(args).items() if k != "func"},
    }


def _load(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.input:
        cfg.input = args.input
    if args.alpha is not None:
        cfg.alpha = args.alpha
    if args.ell is not None:
        cfg.ell = parse_ell(args.ell)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.workers is not None:
        cfg.workers = args.workers
    if args.preset:
        cfg.preset = args.preset
    return cfg


def _dataset(cfg: RunConfig):
    if cfg.input is None:
        raise InputError("no input file (use --input or [data] input)")
    cfg.validate()
    data = ingest_csv(cfg.input, cfg)
    log.info("ingested %s: m=%d N=%d k=%d s=%d", cfg.input, data.m, data.N, data.k, data.s)
    return data


def _targets(cfg: RunConfig, data):
    if cfg.target_source == "file":
        return read_targets(cfg.target_file, cfg, data)
    return None


def _emit(args, cfg, name: str, rows: list[dict], payload: dict | None = None):
    out = output_dir(args.out, cfg)
    info = _run_info(args, cfg)
    if args.format == "json":
        path = out / f"{name}.json"
        write_json(path, {"run": info, **(payload or {}), "rows": rows})
    else:
        path = out / f"{name}.csv"
        write_csv(path, rows)
        write_json(out / f"{name}.run.json", info)
    log.info("wrote %s", path)
    return path


def cmd_fit(args) -> int:
    cfg = _load(args)
    data = _dataset(cfg)
    fr = fit(data, cfg.dof)
    comp = fr.components
    row = {f"beta[{n}]": b for n, b in zip(cfg.column_names(), fr.beta)}
    for n, se in zip(cfg.column_names(), np.sqrt(np.diag(fr.beta_cov))):
        row[f"se[{n}]"] = se
    row.update(flatten("sigma", comp.sigma_hat.array))
    row.update(flatten("psi", comp.psi_hat.array))
    row.update(flatten("psi0", comp.psi0.array))
    row.update(flatten("psi1", comp.psi1.array))
    row.update({"s0": comp.s0, "truncated": comp.truncated, "m": data.m, "N": data.N, "k": data.k, "s": data.s})
    payload = {
        "responses": cfg.responses,
        "coefficients": cfg.column_names(),
        "beta": fr.beta,
        "beta_cov": fr.beta_cov,
        "sigma_hat": comp.sigma_hat.array,
        "psi_hat": comp.psi_hat.array,
        "psi0": comp.psi0.array,
        "psi1": comp.psi1.array,
        "eigenvalues": comp.eigenvalues,
        "diagnostics": {"s0": comp.s0, "truncated": comp.truncated, "m": data.m, "N": data.N},
    }
    _emit(args, cfg, "fit", [row], payload)
    return EXIT_OK


def _predictions(cfg: RunConfig):
    data = _dataset(cfg)
    fr = fit(data, cfg.dof)
    preds = msem_estimate(data, fr, c_spec=_targets(cfg, data))
    return data, fr, preds


def cmd_predict(args) -> int:
    cfg = _load(args)
    data, fr, preds = _predictions(cfg)
    rows = []
    for p, n in zip(preds, data.design.sizes):
        row = {"area": p.area_id, "n": int(n)}
        row.update({f"theta_{r}": t for r, t in zip(cfg.responses, p.theta_hat)})
        row.update(flatten("msem", p.msem.array))
        row.update({f"smse_{r}": v for r, v in zip(cfg.responses, np.sqrt(np.maximum(np.diag(p.msem.array), 0.0)))})
        row.update({"truncated": p.truncated, "msem_nonpsd": p.msem_nonpsd})
        rows.append(row)
    _emit(args, cfg, "predictions", rows)
    return EXIT_OK


def cmd_interval(args) -> int:
    cfg = _load(args)
    if cfg.ell is None:
        raise InputError("interval needs --ell (or [run] ell)")
    data, fr, preds = _predictions(cfg)
    comps = fr.components
    rows = []
    for p, n in zip(preds, data.design.sizes):
        ci, naive = corrected_interval(
            p, cfg.ell, cfg.alpha, (comps.psi_hat, comps.sigma_hat, data.design.sizes, int(n)), v_form=cfg.v_form
        )
        rows.append({
            "area": p.area_id, "n": int(n), "estimate": ci.estimate,
            "lower": ci.lower, "upper": ci.upper, "z_star": ci.z_star, "v_hat": ci.v_hat,
            "msem_scalar": ci.msem_scalar, "naive_lower": naive.lower, "naive_upper": naive.upper,
            "alpha": cfg.alpha, "truncated": p.truncated,
        })
    _emit(args, cfg, "intervals", rows, {"ell": cfg.ell, "v_form": cfg.v_form})
    return EXIT_OK


_SIM_FIELDS = {f.name for f in fields(SimConfig)}


def _sim_config(cfg: RunConfig) -> SimConfig:
    sc = preset(cfg.preset) if cfg.preset else SimConfig()
    over = {}
    try:
        for key, val in cfg.simulate.items():
            if key not in _SIM_FIELDS:
                raise InputError(f"unknown [simulate] key {key!r}")
            cur = getattr(sc, key)
            if key == "group_sizes":
                over[key] = tuple(int(t) for t in val.split(","))
            elif key in ("beta", "psi_vector", "sigma"):
                over[key] = tuple(float(t) for t in val.split(","))
            elif isinstance(cur, int):
                over[key] = int(val)
            elif isinstance(cur, float):
                over[key] = float(val)
            else:
                over[key] = val
        over["master_seed"] = cfg.seed
        over["alpha"] = cfg.alpha
        return replace(sc, **over)
    except ValueError as exc:
        raise InputError(f"bad [simulate] value: {exc}") from None


def cmd_simulate(args) -> int:
    cfg = _load(args)
    sc = _sim_config(cfg)
    log.info("simulate %s workers=%d", asdict(sc), cfg.workers)
    metrics = run_study(sc, workers=cfg.workers)
    name = cfg.preset or "custom"
    rows = metrics.rows(name)
    out = output_dir(args.out, cfg)
    summary = metrics.summary()
    summary["run"] = _run_info(args, cfg)
    if args.format == "csv":
        write_csv(out / "simulation.csv", rows)
    write_json(out / "simulation.json", summary)
    for r in rows:
        log.info(
            "group %d: PRIAL %.2f  RB diag %s  CP(e1) %.3f/%.3f",
            r["group"], r["prial_direct"],
            [round(r[f"rb_{i}{i}"], 2) for i in range(1, sc.k + 1)],
            r[f"cp_{ell_names(sc.k)[0]}"], r[f"cp_naive_{ell_names(sc.k)[0]}"],
        )
    return EXIT_OK


def cmd_validate(args) -> int:
    cfg = _load(args)
    results = run_all(seed=cfg.seed, workers=cfg.workers, replications=cfg.validate_replications)
    for r in results:
        print(r.line())
    out = output_dir(args.out, cfg)
    write_json(out / "validation.json", {
        "run": _run_info(args, cfg),
        "checks": [{"name": r.name, "passed": r.passed, "value": r.value, "threshold": r.threshold,
                    "detail": r.detail} for r in results],
    })
    return EXIT_OK if all(r.passed for r in results) else EXIT_VALIDATION


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--input", help="unit-level CSV file")
    common.add_argument("--config", help="INI run configuration")
    common.add_argument("--alpha", type=float, help="nominal non-coverage (default 0.05)")
    common.add_argument("--ell", help="contrast as a comma list, one entry per response")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--workers", type=int, help="worker processes for simulate/validate")
    common.add_argument("--preset", help="simulation preset, e.g. paper-k2-rho05-normal")
    common.add_argument("--out", help="output directory (else $MNER_OUTPUT_DIR, config, cwd)")
    common.add_argument("--format", choices=("csv", "json"), default="csv")
    common.add_argument("--error-json", action="store_true", help="print errors as JSON on stderr")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="mner", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"mner {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name, func, text in (
        ("fit", cmd_fit, "estimate beta, Sigma and Psi"),
        ("predict", cmd_predict, "EBLUP and MSE-matrix estimate per area"),
        ("interval", cmd_interval, "corrected and naive intervals for l' theta_a"),
        ("simulate", cmd_simulate, "Monte Carlo study"),
        ("validate", cmd_validate, "run the oracle suites"),
    ):
        sp = sub.add_parser(name, parents=[common], help=text)
        sp.set_defaults(func=func)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    log.info("mner %s %s seed=%s config=%s", __version__, args.command, args.seed, args.config)
    try:
        return args.func(args)
    except InputError as exc:
        return _fail(args, exc, EXIT_INPUT)
    except NumericalError as exc:
        return _fail(args, exc, EXIT_NUMERIC)
    except OSError as exc:
        return _fail(args, exc, EXIT_INPUT)


def _fail(args, exc: Exception, code: int) -> int:
    if args.error_json:
        err = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
        for attr in ("row", "col", "name"):
            if hasattr(exc, attr):
                err[attr] = getattr(exc, attr)
        print(json.dumps(err, default=fmt), file=sys.stderr)
    else:
        print(f"mner: error: {exc}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())

"""Command line entry point: ``epr fit | simulate | study``."""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import experiments as ex
from . import io
from .errors import ConfigError, EprError, ExhaustedError, NumericError
from .sampler import epr_run

EXIT_OK, EXIT_NUMERIC, EXIT_IO, EXIT_EXHAUSTED = 0, 1, 2, 3
STUDIES = ("study1", "study2", "car")
TABLES = ("table1", "table2", "table3")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _positive(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {v}")
    return v


def _rate(text):
    v = float(text)
    if not 0 < v <= 1:
        raise argparse.ArgumentTypeError(f"rate must lie in (0, 1], got {v}")
    return v


def default_workers() -> int | None:
    value = os.environ.get("EPR_WORKERS")
    if value is None or value == "":
        return None
    try:
        n = int(value)
    except ValueError:
        raise ConfigError(f"EPR_WORKERS must be a positive integer, got {value!r}") from None
    if n < 1:
        raise ConfigError(f"EPR_WORKERS must be a positive integer, got {value!r}")
    return n


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="epr", description="Exact posterior sampling for multi-response GLMMs.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    f = sub.add_parser("fit", help="sample the posterior of a configured model")
    f.add_argument("config", type=Path)
    f.add_argument("--data", type=Path, help="overrides data.path")
    f.add_argument("--draws", type=_positive)
    acc = f.add_mutually_exclusive_group()
    acc.add_argument("--rate", type=_rate)
    acc.add_argument("--omega", type=float)
    f.add_argument("--seed", type=int)
    f.add_argument("--workers", type=_positive)
    f.add_argument("--max-proposals", type=_positive)
    f.add_argument("--chunk-size", type=_positive)
    f.add_argument("--out-dir", type=Path, help="overrides output.dir")
    f.add_argument("--emit-latent", action="store_true", help="also write xi and y vectors per draw")

    s = sub.add_parser("simulate", help="write a study data set, its truth and a ready config")
    s.add_argument("study")
    s.add_argument("--scale", type=_positive, help="rows per block (study1, study2) or areas (car)")
    s.add_argument("--basis", type=_positive, help="study1 basis count")
    s.add_argument("--r", type=int, default=0, help="study2 basis count (0 puts g in X)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", type=Path, default=Path("."))

    t = sub.add_parser("study", help="reproduce a metrics table")
    t.add_argument("table")
    t.add_argument("--replicates", type=int)
    t.add_argument("--scale", type=_positive)
    t.add_argument("--basis", type=_positive)
    t.add_argument("--r", type=int, default=0)
    t.add_argument("--rates", type=str, help="comma separated acceptance rates")
    t.add_argument("--draws", type=_positive)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--workers", type=_positive)
    t.add_argument("--out", type=Path, required=True)
    return p


# --------------------------------------------------------------------- fit

def cmd_fit(args) -> int:
    settings = io.parse_settings(args.config)
    if args.data is not None:
        settings.data_path = args.data
    basis = settings.raw.get("model.basis", ("explicit", 0))
    if basis[0] not in ("explicit", "identity"):
        raise ConfigError(f"{args.config}:{basis[1]}: model.basis must be explicit or identity")
    blocks = io.read_data(settings.data_path, identity_basis=basis[0] == "identity")
    glmm = io.build_glmm(settings, blocks)
    env_workers = default_workers()
    if env_workers is not None and "workers" not in settings.sampler:
        settings.sampler["workers"] = env_workers
    config = io.sampler_config(settings, {
        "draws": args.draws, "rate": args.rate, "omega": args.omega, "seed": args.seed,
        "workers": args.workers, "max_proposals": args.max_proposals, "chunk_size": args.chunk_size,
    })
    out_dir = args.out_dir or settings.base / settings.outputs.get("dir", ".")
    out_dir.mkdir(parents=True, exist_ok=True)
    names = {"draws": "draws.csv", "summary": "summary.csv", "meta": "run.json", "latent": "latent.csv"}
    names.update({k: v for k, v in settings.outputs.items() if k != "dir"})
    t0 = time.perf_counter()
    ds = epr_run(glmm, config)
    wall = time.perf_counter() - t0
    io.write_draws(out_dir / names["draws"], ds)
    io.write_summary(out_dir / names["summary"], ds)
    if args.emit_latent:
        io.write_latent(out_dir / names["latent"], ds)
    io.write_meta(out_dir / names["meta"], ds, wall, {"data": str(settings.data_path)})
    return EXIT_OK


# ---------------------------------------------------------------- simulate

def _config_text(data_name: str, lines: list[str]) -> str:
    return "\n".join([f"data.path = {data_name}"] + lines) + "\n"


def _student_t_prior_lines(nu: float, scale: float) -> list[str]:
    out = []
    for which in ("beta", "eta"):
        out += [f"prior.{which}.family = student_t", f"prior.{which}.nu = {nu!r}", f"prior.{which}.scale = {scale!r}"]
    return out


def cmd_simulate(args) -> int:
    if args.study not in STUDIES:
        raise UsageError(f"unknown study {args.study!r}; choose from {', '.join(STUDIES)}")
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    if args.study == "study1":
        kw = {}
        if args.scale:
            kw["n_per_block"] = args.scale
            kw["basis_count"] = min(ex.Study1Design.basis_count, args.scale)
        if args.basis:
            kw["basis_count"] = args.basis
        design = ex.Study1Design(**kw)
        glmm, truth = ex.gen_study1(design, args.seed)
        io.write_data(out / "study1_data.csv", glmm.blocks)
        lines = _student_t_prior_lines(design.prior_nu, design.prior_scale)
        (out / "study1.conf").write_text(_config_text("study1_data.csv", lines), encoding="utf-8")
        io.write_rows(out / "study1_truth.csv", [{"row": i + 1, "y_true": float(v)} for i, v in enumerate(truth.y_true)])
        params = [{"name": f"beta.{j + 1}", "value": float(v)} for j, v in enumerate(truth.beta_true)]
        params += [{"name": f"eta.{j + 1}", "value": float(v)} for j, v in enumerate(truth.eta_true)]
        io.write_rows(out / "study1_params.csv", params)
    elif args.study == "study2":
        data = ex.gen_study2(n=args.scale or 100, r=args.r, seed=args.seed)
        for kind, (glmm, truth) in data.items():
            io.write_data(out / f"study2_{kind}_data.csv", glmm.blocks)
            lines = _student_t_prior_lines(2.0, 2.0) + [f"model.alpha_xi = {glmm.alpha_xi!r}"]
            (out / f"study2_{kind}.conf").write_text(_config_text(f"study2_{kind}_data.csv", lines), encoding="utf-8")
            io.write_rows(out / f"study2_{kind}_truth.csv",
                          [{"row": i + 1, "linear_predictor": float(v), "mean": float(m)}
                           for i, (v, m) in enumerate(zip(truth.linear_predictor, truth.mean))])
    else:
        design = ex.CarDesign(n_areas=args.scale) if args.scale else ex.CarDesign()
        glmm, truth = ex.gen_car_study(design, args.seed)
        io.write_data(out / "car_data.csv", glmm.blocks)
        io.write_matrix(out / "car_adjacency.csv", truth.adjacency)
        lines = [
            "model.basis = identity",
            "prior.beta.family = student_t",
            f"prior.beta.nu = {design.prior_nu!r}",
            "prior.beta.structure = ig_diag",
            "prior.beta.ig_shape = 1.5",
            "prior.beta.ig_rate = 0.5",
            "prior.eta.family = gaussian",
            "prior.eta.structure = mcar",
            "prior.eta.adjacency = car_adjacency.csv",
            "sampler.rate = 0.125",
        ]
        (out / "car.conf").write_text(_config_text("car_data.csv", lines), encoding="utf-8")
        io.write_rows(out / "car_truth.csv", [{"row": i + 1, "y_true": float(v), "eta_true": float(e)}
                                              for i, (v, e) in enumerate(zip(truth.y_true, truth.eta_true))])
    return EXIT_OK


# ------------------------------------------------------------------- study

def cmd_study(args) -> int:
    if args.table not in TABLES:
        raise UsageError(f"unknown table {args.table!r}; choose from {', '.join(TABLES)}")
    if args.replicates is not None and args.replicates < 1:
        raise UsageError("--replicates must be at least 1")
    workers = args.workers or default_workers() or 1
    rates = None
    if args.rates:
        try:
            rates = tuple(_rate(x) for x in args.rates.split(","))
        except (ValueError, argparse.ArgumentTypeError) as exc:
            raise UsageError(f"bad --rates: {exc}") from None
    if args.table == "table1":
        kw = {}
        if args.scale:
            kw["n_per_block"] = args.scale
            kw["basis_count"] = min(ex.Study1Design.basis_count, args.scale)
        if args.basis:
            kw["basis_count"] = args.basis
        rows = ex.table1(ex.Study1Design(**kw), replicates=args.replicates or 10, rates=rates or (1.0, 0.5, 0.25),
                         draws=args.draws or 100, seed=args.seed, workers=workers)
    elif args.table == "table2":
        rows = ex.table2(replicates=args.replicates or 20, n=args.scale or 100, r=args.r,
                         rate=(rates or (0.5,))[0], draws=args.draws or 600, seed=args.seed, workers=workers)
    else:
        design = ex.CarDesign(n_areas=args.scale) if args.scale else ex.CarDesign()
        rows = ex.table3(design, rates=rates or (1.0, 0.5, 0.25, 0.125), draws=args.draws or 100,
                         seed=args.seed, workers=workers)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    io.write_rows(args.out, rows)
    return EXIT_OK


# -------------------------------------------------------------------- main

def _fail(category: str, message: str, code: int) -> int:
    sys.stderr.write(json.dumps({"error": category, "message": message}) + "\n")
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        handler = {"fit": cmd_fit, "simulate": cmd_simulate, "study": cmd_study}[args.command]
        with np.errstate(over="ignore"):
            return handler(args)
    except UsageError as exc:
        return _fail("usage-error", str(exc), EXIT_IO)
    except ExhaustedError as exc:
        return _fail(exc.category, str(exc), EXIT_EXHAUSTED)
    except NumericError as exc:
        return _fail(exc.category, str(exc), EXIT_NUMERIC)
    except EprError as exc:
        return _fail(exc.category, str(exc), EXIT_IO)
    except (FileNotFoundError, PermissionError, IsADirectoryError) as exc:
        return _fail("io-error", str(exc), EXIT_IO)
    except OSError as exc:
        return _fail("io-error", str(exc), EXIT_IO)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

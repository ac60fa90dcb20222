"""File formats: flat key=value configs, data CSVs, draw/summary/metadata outputs."""

from __future__ import annotations

import csv
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dy import DyKind
from .errors import CapExceededError, ConfigError
from .model import (
    DATA_NAMES,
    KIND_NAMES,
    DataBlock,
    EffectPrior,
    GlmmSpec,
    QPrior,
    ThetaPrior,
    ThetaPriorComponent,
    mcar_covariance_chol,
)
from .projection import IDENTITY, IdentityG
from .sampler import DrawSet, EprConfig, summarize

LATENT_CAP = 50_000_000
FMT = "%.17g"


def fmt(x) -> str:
    return FMT % float(x)


# ------------------------------------------------------------------ configs

def read_config(path) -> dict[str, tuple[str, int]]:
    """Parse ``key = value`` lines; returns key -> (value, line number)."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise FileNotFoundError(f"cannot read config {path}: {exc.strerror}") from None
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not re.fullmatch(r"[A-Za-z_][\w]*(\.[\w]+)*", key):
            raise ConfigError(f"{path}:{lineno}: bad key {key!r}")
        if key in out:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r} (first on line {out[key][1]})")
        out[key] = (value, lineno)
    return out


KNOWN_KEYS = {
    "data.path", "model.alpha_xi", "model.sigma2_xi", "model.q_prior", "model.basis",
    "prior.beta.family", "prior.beta.nu", "prior.beta.scale", "prior.beta.structure",
    "prior.beta.ig_shape", "prior.beta.ig_rate",
    "prior.eta.family", "prior.eta.nu", "prior.eta.scale", "prior.eta.structure", "prior.eta.adjacency",
    "sampler.draws", "sampler.rate", "sampler.omega", "sampler.seed", "sampler.workers",
    "sampler.max_proposals", "sampler.chunk_size",
    "output.dir", "output.draws", "output.summary", "output.meta", "output.latent",
}


@dataclass
class FitSettings:
    data_path: Path
    glmm_options: dict = field(default_factory=dict)
    sampler: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict)
    base: Path = Path(".")


def _num(raw, key, kind=float):
    value, line = raw[key]
    try:
        if kind is int:
            return int(value)
        return float(value)
    except ValueError:
        raise ConfigError(f"line {line}: {key} must be a number, got {value!r}") from None


def parse_settings(path) -> FitSettings:
    raw = read_config(path)
    base = Path(path).parent
    for key, (_, line) in raw.items():
        if key not in KNOWN_KEYS and not key.startswith("theta."):
            raise ConfigError(f"{path}:{line}: unknown key {key!r}")
    if "data.path" not in raw:
        raise ConfigError(f"{path}: missing required key data.path")
    s = FitSettings(base / raw["data.path"][0], raw=raw, base=base)
    for key in ("sampler.draws", "sampler.seed", "sampler.workers", "sampler.max_proposals", "sampler.chunk_size"):
        if key in raw:
            s.sampler[key.split(".")[1]] = _num(raw, key, int)
    for key in ("sampler.rate", "sampler.omega"):
        if key in raw:
            s.sampler[key.split(".")[1]] = math.inf if raw[key][0] in ("inf", "infinity") else _num(raw, key)
    for key in ("output.dir", "output.draws", "output.summary", "output.meta", "output.latent"):
        if key in raw:
            s.outputs[key.split(".")[1]] = raw[key][0]
    return s


_THETA_RE = re.compile(r"(\w+)\s*\(([^)]*)\)")


def parse_theta(raw) -> list[ThetaPriorComponent]:
    comps = []
    for key, (value, line) in raw.items():
        if not key.startswith("theta."):
            continue
        name = key[len("theta."):]
        m = _THETA_RE.fullmatch(value)
        if not m:
            raise ConfigError(f"line {line}: {key} must look like kind(arg, ...)")
        kind = m.group(1)
        try:
            args = [float(a) for a in m.group(2).split(",") if a.strip()]
        except ValueError:
            raise ConfigError(f"line {line}: non-numeric argument in {value!r}") from None
        makers = {
            "inverse_gamma": ThetaPriorComponent.inverse_gamma,
            "uniform": ThetaPriorComponent.uniform,
            "student_t": ThetaPriorComponent.student_t,
            "point_mass": ThetaPriorComponent.point_mass,
        }
        if kind not in makers:
            raise ConfigError(f"line {line}: unknown hyperprior {kind!r}")
        try:
            comps.append(makers[kind](name, *args))
        except TypeError:
            raise ConfigError(f"line {line}: wrong number of arguments for {kind}") from None
    return comps


def _scale_from(raw, key, theta_names):
    """A prior scale: number, theta.<name> or sqrt(theta.<name>)."""
    if key not in raw:
        return 1.0
    value, line = raw[key]
    m = re.fullmatch(r"(sqrt\()?theta\.(\w+)\)?", value)
    if m:
        name = m.group(2)
        if name not in theta_names:
            raise ConfigError(f"line {line}: {key} refers to undefined hyperparameter {name!r}")
        if m.group(1):
            return lambda th: math.sqrt(th[name])
        return lambda th: th[name]
    try:
        return float(value)
    except ValueError:
        raise ConfigError(f"line {line}: {key} must be a number or theta reference") from None


def _effect_prior(raw, which: str, dim_hint: int, theta_names, extra_comps, adjacency=None):
    fam_key = f"prior.{which}.family"
    fam = raw.get(fam_key, ("gaussian", 0))[0]
    scale = _scale_from(raw, f"prior.{which}.scale", theta_names)
    structure = raw.get(f"prior.{which}.structure", ("none", 0))
    if structure[0] == "ig_diag":
        shape = _num(raw, f"prior.{which}.ig_shape") if f"prior.{which}.ig_shape" in raw else 1.5
        rate = _num(raw, f"prior.{which}.ig_rate") if f"prior.{which}.ig_rate" in raw else 0.5
        names = [f"sigma2_{which}{i + 1}" for i in range(dim_hint)]
        extra_comps.extend(ThetaPriorComponent.inverse_gamma(n, shape, rate) for n in names)
        scale = lambda th, names=names: np.array([th[n] for n in names])  # noqa: E731
    elif structure[0] == "mcar":
        if adjacency is None:
            raise ConfigError(f"line {structure[1]}: mcar structure needs prior.{which}.adjacency")
        defaults = {
            "rho": ThetaPriorComponent.uniform_rho("rho", adjacency),
            "sigma2_eta1": ThetaPriorComponent.inverse_gamma("sigma2_eta1", 3.0, 2.0),
            "sigma2_eta2": ThetaPriorComponent.inverse_gamma("sigma2_eta2", 3.0, 2.0),
            "gamma": ThetaPriorComponent.student_t("gamma", 3.0),
        }
        extra_comps.extend(c for n, c in defaults.items() if n not in theta_names)
        scale = lambda th: mcar_covariance_chol(  # noqa: E731
            th["sigma2_eta1"], th["sigma2_eta2"], th["gamma"], th["rho"], adjacency)
    elif structure[0] != "none":
        raise ConfigError(f"line {structure[1]}: unknown prior structure {structure[0]!r}")
    if fam == "gaussian":
        return EffectPrior.gaussian(scale)
    if fam == "student_t":
        key = f"prior.{which}.nu"
        if key not in raw:
            raise ConfigError(f"line {raw[fam_key][1]}: student_t prior needs {key}")
        return EffectPrior.student_t(_num(raw, key), scale)
    raise ConfigError(f"line {raw[fam_key][1]}: prior family must be gaussian or student_t")


def build_glmm(settings: FitSettings, blocks: list[DataBlock]) -> GlmmSpec:
    raw = settings.raw
    comps = parse_theta(raw)
    names = {c.name for c in comps}
    extra: list = []
    adjacency = None
    if "prior.eta.adjacency" in raw:
        adjacency = read_matrix(settings.base / raw["prior.eta.adjacency"][0])
    p = blocks[0].X.shape[1]
    r = sum(b.n for b in blocks) if isinstance(blocks[0].G, IdentityG) else blocks[0].G.shape[1]
    # eta first so structured hyperpriors come out in the same order as the study builders
    eta_prior = _effect_prior(raw, "eta", r, names, extra, adjacency)
    beta_prior = _effect_prior(raw, "beta", p, names, extra)
    opts = {}
    if "model.alpha_xi" in raw:
        opts["alpha_xi"] = _num(raw, "model.alpha_xi")
    if "model.sigma2_xi" in raw:
        opts["sigma2_xi"] = _num(raw, "model.sigma2_xi")
    if "model.q_prior" in raw:
        value, line = raw["model.q_prior"]
        try:
            opts["q_prior"] = QPrior(value)
        except ValueError:
            raise ConfigError(f"line {line}: q_prior must be improper, truncated or point_mass_zero") from None
    return GlmmSpec(blocks, beta_prior=beta_prior, eta_prior=eta_prior,
                    theta_prior=ThetaPrior(comps + extra), **opts)


def sampler_config(settings: FitSettings, overrides: dict) -> EprConfig:
    merged = dict(settings.sampler)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    if "omega" in overrides and overrides["omega"] is not None:
        merged.pop("rate", None)
    if "rate" in overrides and overrides["rate"] is not None:
        merged.pop("omega", None)
    return EprConfig(**merged)


# -------------------------------------------------------------------- data

def read_data(path, identity_basis: bool = False) -> list[DataBlock]:
    """Read a data CSV into blocks, one per kind in first-appearance order."""
    path = Path(path)
    try:
        fh = path.open(newline="", encoding="utf-8")
    except OSError as exc:
        raise FileNotFoundError(f"cannot read data file {path}: {exc.strerror}") from None
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ConfigError(f"{path}: empty data file") from None
        header = [h.strip() for h in header]
        if header[:3] != ["kind", "z", "aux"]:
            raise ConfigError(f"{path}:1: header must start with kind,z,aux")
        xcols = [i for i, h in enumerate(header) if h.startswith("x.")]
        gcols = [i for i, h in enumerate(header) if h.startswith("g.")]
        if not xcols:
            raise ConfigError(f"{path}:1: need at least one x.* column")
        if identity_basis and gcols:
            raise ConfigError(f"{path}:1: g.* columns conflict with an identity basis")
        rows: dict[str, list] = {}
        for lineno, row in enumerate(reader, 2):
            if not row:
                continue
            if len(row) != len(header):
                raise ConfigError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            kind = row[0].strip().lower()
            if kind not in KIND_NAMES:
                raise ConfigError(f"{path}:{lineno}: unknown kind {row[0]!r}")
            try:
                z = float(row[1])
                aux = float(row[2]) if row[2].strip() else math.nan
                x = [float(row[i]) for i in xcols]
                g = [float(row[i]) for i in gcols]
            except ValueError as exc:
                raise ConfigError(f"{path}:{lineno}: {exc}") from None
            rows.setdefault(kind, []).append((z, aux, x, g))
    if not rows:
        raise ConfigError(f"{path}: no data rows")
    blocks = []
    for kind, items in rows.items():
        z = np.array([it[0] for it in items])
        aux = np.array([it[1] for it in items])
        X = np.array([it[2] for it in items])
        G = IDENTITY if identity_basis else np.array([it[3] for it in items]).reshape(len(items), len(gcols))
        if kind == "gaussian":
            blocks.append(DataBlock.gaussian(z, X, aux, G))
        elif kind == "poisson":
            blocks.append(DataBlock.poisson(z, X, G))
        elif kind == "binomial":
            blocks.append(DataBlock.binomial(z, X, aux, G))
        else:
            nu = np.unique(aux)
            if nu.size != 1 or not nu[0] > 0:
                raise ConfigError(f"{path}: student_t rows need one common positive nu in aux")
            blocks.append(DataBlock.student_t(z, X, float(nu[0]), G))
    return blocks


def write_data(path, blocks: list[DataBlock]) -> None:
    p = blocks[0].X.shape[1]
    ident = isinstance(blocks[0].G, IdentityG)
    r = 0 if ident else blocks[0].G.shape[1]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["kind", "z", "aux"] + [f"x.{j + 1}" for j in range(p)] + [f"g.{j + 1}" for j in range(r)])
        for b in blocks:
            kind = DATA_NAMES[b.family.kind]
            for i in range(b.n):
                if b.family.kind is DyKind.STUDENT_T:
                    aux = fmt(b.family.nu)
                elif b.aux is not None:
                    aux = fmt(b.aux[i])
                else:
                    aux = ""
                g = [] if ident else [fmt(v) for v in b.G[i]]
                w.writerow([kind, fmt(b.z[i]), aux] + [fmt(v) for v in b.X[i]] + g)


def read_matrix(path) -> np.ndarray:
    try:
        return np.loadtxt(path, delimiter=",", ndmin=2)
    except OSError as exc:
        raise FileNotFoundError(f"cannot read matrix {path}: {exc}") from None
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def write_matrix(path, m) -> None:
    np.savetxt(path, np.asarray(m), delimiter=",", fmt=FMT)


# ----------------------------------------------------------------- outputs

def theta_columns(ds: DrawSet) -> list[str]:
    first = ds.theta[0] if ds.theta else None
    return list(first.keys()) if isinstance(first, dict) else []


def write_draws(path, ds: DrawSet) -> None:
    names = theta_columns(ds)
    p, r = ds.beta.shape[1], ds.eta.shape[1]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["draw", "g"] + [f"theta.{n}" for n in names]
                   + [f"beta.{j + 1}" for j in range(p)] + [f"eta.{j + 1}" for j in range(r)])
        for i in range(len(ds)):
            th = [fmt(ds.theta[i][n]) for n in names]
            w.writerow([str(i + 1), fmt(ds.g[i])] + th + [fmt(v) for v in ds.beta[i]] + [fmt(v) for v in ds.eta[i]])


def write_latent(path, ds: DrawSet, cap: int = LATENT_CAP) -> None:
    n = ds.y_rep.shape[1]
    if len(ds) * n * 4 > cap:
        raise CapExceededError(f"latent output would hold {len(ds) * n * 4} values; cap is {cap}")
    blocks = {"xi": ds.xi, "y": ds.y_rep, "y_hat": ds.y_hat, "y_tilde": ds.y_tilde}
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["draw"] + [f"{k}.{i + 1}" for k in blocks for i in range(n)])
        for d in range(len(ds)):
            w.writerow([str(d + 1)] + [fmt(v) for arr in blocks.values() for v in arr[d]])


def write_summary(path, ds: DrawSet, targets=("beta", "eta", "y_tilde")) -> None:
    qs = (0.025, 0.5, 0.975)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["target", "index", "mean", "sd"] + [f"q{q:g}" for q in qs])
        for t in targets:
            s = summarize(ds, t, quantiles=qs)
            for i in range(s["mean"].shape[0]):
                w.writerow([t, str(i + 1), fmt(s["mean"][i]), fmt(s["sd"][i])] + [fmt(s[f"q{q:g}"][i]) for q in qs])


def write_meta(path, ds: DrawSet, wall_seconds: float, extra: dict | None = None) -> None:
    c = ds.config
    meta = {
        "seed": c.seed,
        "draws": c.draws,
        "mode": c.mode,
        "rate": c.rate,
        "omega_requested": None if c.omega is None else (str(c.omega) if math.isinf(c.omega) else c.omega),
        "omega_used": str(ds.omega_used) if math.isinf(ds.omega_used) else ds.omega_used,
        "proposals_made": ds.proposals_made,
        "workers": c.workers,
        "wall_seconds": wall_seconds,
        **ds.metadata,
        **(extra or {}),
    }
    Path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_rows(path, rows: list[dict]) -> None:
    if not rows:
        raise ConfigError("no rows to write")
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0].keys()), lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (fmt(v) if isinstance(v, float) else v) for k, v in row.items()})

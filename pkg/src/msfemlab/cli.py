"""Batch experiment driver.

Subcommands parse a plain-text [section] key=value config, orchestrate basis
builds (with an on-disk cache), run Monte Carlo error plans and axis sweeps,
solve references, print homogenized-tensor reports, and render stored CSV
tables.  Exit codes: 0 success, 2 config error, 3 numerical failure.
"""

import configparser
import csv
import io
import os
import sys
import time
from dataclasses import dataclass, field

import click
import numpy as np

from .coefficients import draw_realizations, preset as build_preset
from .fem_core import AssemblyError, SolveError, norm, NormKind, solve_reference
from .homogenization import build_cell_correctors, lambda_stat, tensor_report
from .mesh import build_cell_index_set, build_coarse_mesh, build_fine_mesh
from .montecarlo import (ExperimentPlan, convergence_sweep, csv_text,
                         estimator_id, run, write_csv)
from .msfem import (basis_cache_params, build_basis, load_basis,
                    precompute_pieces, save_basis)


class ConfigError(Exception):
    pass


# section -> keys it may contain
CONFIG_LAYOUT = {
    "problem": ("preset", "epsilon", "eta", "kappa", "zeta", "P"),
    "mesh": ("h", "h_fine", "h_basis"),
    "msfem": ("oversampling_ratio",),
    "montecarlo": ("M", "seed", "estimators", "norms"),
    "output": ("out_dir", "basis_cache_dir"),
}

def _number(text):
    """Float from a config token; fractions like 1/30 stay exact-to-double."""
    text = text.strip()
    if "/" in text:
        num, den = text.split("/", 1)
        return float(num) / float(den)
    return float(text)


@dataclass
class Config:
    """Parsed experiment configuration plus the raw text for echoing."""

    preset: str
    eta: list
    epsilon: list
    h: list
    M: list
    seed: int = 0
    kappa: float = None
    zeta: float = None
    P: float = None
    h_fine: float = None
    h_basis: float = None
    oversampling_ratio: float = None
    estimators: tuple = (("u_S", "u_ref"), ("u_M", "u_ref"), ("u_S", "u_M"))
    norms: tuple = ("H1",)
    out_dir: str = "."
    basis_cache_dir: str = None
    raw: dict = field(default_factory=dict, repr=False)

    def scalar(self, name):
        values = getattr(self, name)
        if len(values) != 1:
            raise ConfigError(f"{name} must be a single value here, got {values}")
        return values[0]


def load_config(path):
    parser = configparser.ConfigParser()
    parser.optionxform = str  # keys are case-sensitive (M, P)
    read = parser.read(path)
    if not read:
        raise ConfigError(f"cannot read config file {path!r}")
    raw = {}
    values = {}
    for section in parser.sections():
        if section not in CONFIG_LAYOUT:
            raise ConfigError(f"unknown config section [{section}]")
        raw[section] = dict(parser.items(section))
        for key, text in parser.items(section):
            if key not in CONFIG_LAYOUT[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            values[key] = text.strip()
    if "preset" not in values:
        raise ConfigError("config must name a preset")
    if "epsilon" not in values or "h" not in values:
        raise ConfigError("config must set epsilon and h")
    kw = {"preset": values["preset"], "raw": raw}
    for key in ("eta", "epsilon", "h", "M"):
        if key in values:
            parts = [p for p in values[key].split(",") if p.strip()]
            conv = int if key == "M" else _number
            kw[key] = [conv(p) for p in parts]
    kw.setdefault("eta", [0.0])
    kw.setdefault("M", [30])
    for key in ("kappa", "zeta", "P", "h_fine", "h_basis", "oversampling_ratio"):
        if key in values:
            kw[key] = _number(values[key])
    if "seed" in values:
        kw["seed"] = int(values["seed"])
    if "estimators" in values:
        pairs = []
        for token in values["estimators"].split(","):
            token = token.strip()
            if not token:
                continue
            halves = token.split(":")
            if len(halves) != 2:
                raise ConfigError(
                    f"estimator {token!r} must be channel:channel")
            pairs.append((halves[0].strip(), halves[1].strip()))
        kw["estimators"] = tuple(pairs)
    if "norms" in values:
        kw["norms"] = tuple(t.strip() for t in values["norms"].split(",")
                            if t.strip())
    for key in ("out_dir", "basis_cache_dir"):
        if key in values:
            kw[key] = values[key]
    cfg = Config(**kw)
    _check_resolutions(cfg)
    return cfg


def _check_resolutions(cfg):
    """The oscillation must fit under the coarse mesh: h_fine <= eps <= h."""
    for eps in cfg.epsilon:
        for h in cfg.h:
            if eps > h * (1 + 1e-12):
                raise ConfigError(f"epsilon={eps:g} exceeds h={h:g}")
        if cfg.h_fine is not None and cfg.h_fine > eps * (1 + 1e-12):
            raise ConfigError(f"h_fine={cfg.h_fine:g} exceeds epsilon={eps:g}")


def echo_config(cfg, out_dir):
    """Re-serialize the raw sections next to the outputs for exact reruns."""
    parser = configparser.ConfigParser()
    parser.optionxform = str
    for section, items in cfg.raw.items():
        parser[section] = items
    path = os.path.join(out_dir, "config.ini")
    buf = io.StringIO()
    parser.write(buf)
    with open(path, "w") as fh:
        fh.write(buf.getvalue())
    return path


def _spec_of(cfg, eta, eps=None):
    extra = {k: getattr(cfg, k) for k in ("kappa", "zeta", "P")
             if getattr(cfg, k) is not None}
    try:
        return build_preset(cfg.preset,
                            eps=cfg.epsilon[0] if eps is None else eps,
                            eta=eta, **extra)
    except ValueError as err:
        raise ConfigError(str(err)) from err


def _plan_of(cfg, eta, eps=None, h=None, M=None):
    try:
        return ExperimentPlan(
            preset=cfg.preset,
            eps=cfg.scalar("epsilon") if eps is None else eps,
            eta=eta,
            h=cfg.scalar("h") if h is None else h,
            M=cfg.scalar("M") if M is None else M,
            seed=cfg.seed,
            kappa=cfg.kappa, zeta=cfg.zeta, P=cfg.P,
            h_fine=cfg.h_fine, h_basis=cfg.h_basis,
            rho=cfg.oversampling_ratio,
            estimators=cfg.estimators, norms=cfg.norms,
        )
    except ValueError as err:
        raise ConfigError(str(err)) from err


def _out_dir(cfg):
    os.makedirs(cfg.out_dir, exist_ok=True)
    return cfg.out_dir


def _guarded(body):
    try:
        body()
    except ConfigError as err:
        click.echo(f"config error: {err}", err=True)
        sys.exit(2)
    except ValueError as err:
        click.echo(f"config error: {err}", err=True)
        sys.exit(2)
    except (AssemblyError, SolveError, np.linalg.LinAlgError) as err:
        click.echo(f"numerical failure: {err}", err=True)
        sys.exit(3)


def _config_option(fn):
    return click.option("--config", "-c", "config_path", required=True,
                        type=click.Path(exists=True, dir_okay=False))(fn)


def _threads_option(fn):
    return click.option("--threads", type=int, default=None,
                        help="worker threads (default: hardware concurrency)")(fn)


def _threads_of(threads):
    return threads if threads else (os.cpu_count() or 1)


@click.group()
def main():
    """Multiscale FEM laboratory: basis caching, error tables, sweeps."""


@main.command("basis")
@_config_option
@_threads_option
def cmd_basis(config_path, threads):
    """Build (or validate) the multiscale basis cache for a config."""

    def body():
        cfg = load_config(config_path)
        eta0 = cfg.eta[0]
        spec = _spec_of(cfg, eta0)
        h = cfg.scalar("h")
        if cfg.h_basis is None:
            raise ConfigError("basis builds need h_basis")
        rho = cfg.oversampling_ratio
        if rho is None:
            rho = 1.0 if spec.d == 1 else 3.0
        cache = cfg.basis_cache_dir or os.path.join(_out_dir(cfg), "basis_cache")
        wanted = basis_cache_params(spec, h, cfg.h_basis, rho)
        manifest = os.path.join(cache, "manifest.txt")
        if os.path.exists(manifest):
            basis, stored = load_basis(cache, spec, h, cfg.h_basis, rho)
            if basis is not None:
                click.echo(f"cache hit at {cache}: {len(basis.elements)} "
                           "patches, no patch solves")
                return
            click.echo("cache parameter mismatch; rebuilding")
            click.echo(f"  stored:    {stored}")
            click.echo(f"  requested: {wanted}")
        domain = "interval" if spec.d == 1 else "square"
        mesh = build_coarse_mesh(domain, h)
        t0 = time.perf_counter()
        basis = build_basis(spec, mesh, cfg.h_basis, rho=rho,
                            threads=_threads_of(threads))
        precompute_pieces(basis, threads=_threads_of(threads))
        dt = time.perf_counter() - t0
        save_basis(basis, cache)
        per = 1e3 * dt / mesh.n_elements
        click.echo(f"built {mesh.n_elements} patches in {dt:.2f} s "
                   f"({per:.1f} ms/patch); cached at {cache}")
        echo_config(cfg, _out_dir(cfg))

    _guarded(body)


@main.command("reference")
@_config_option
@click.option("--realization", "-m", "m_index", type=int, default=0)
def cmd_reference(config_path, m_index):
    """Solve the fine-scale reference problem for one realization."""

    def body():
        cfg = load_config(config_path)
        eta = cfg.eta[0]
        spec = _spec_of(cfg, eta)
        if cfg.h_fine is None:
            raise ConfigError("reference solves need h_fine")
        r = None
        if spec.eta != 0.0:
            r = draw_realizations(spec, m_index + 1, cfg.seed)[m_index]
        t0 = time.perf_counter()
        sol = solve_reference(spec, r, rhs=1.0, h_fine=cfg.h_fine)
        dt = time.perf_counter() - t0
        domain = "interval" if spec.d == 1 else "square"
        mesh = build_fine_mesh(domain, cfg.h_fine)
        h1 = norm(mesh, sol.values, NormKind.H1)
        l2 = norm(mesh, sol.values, NormKind.L2)
        out = os.path.join(_out_dir(cfg), f"reference_m{m_index}.txt")
        cols = np.column_stack([mesh.nodes, sol.values])
        np.savetxt(out, cols, fmt="%.12e")
        click.echo(f"reference at h_fine={cfg.h_fine:g}: {mesh.n_nodes} nodes "
                   f"in {dt:.2f} s; ||u||_H1={h1:.6e} ||u||_L2={l2:.6e}")
        click.echo(f"wrote {out}")
        echo_config(cfg, _out_dir(cfg))

    _guarded(body)


@main.command("mc")
@_config_option
@_threads_option
def cmd_mc(config_path, threads):
    """Monte Carlo error table: one CSV row per (eta, estimator, norm)."""

    def body():
        cfg = load_config(config_path)
        sections = []
        for eta in cfg.eta:
            plan = _plan_of(cfg, eta)
            t0 = time.perf_counter()
            estimates = run(plan, threads=_threads_of(threads))
            dt = time.perf_counter() - t0
            sections.append((plan, estimates))
            parts = ", ".join(f"{e.estimator}={100 * e.mean:.5f}%"
                              for e in estimates)
            click.echo(f"eta={eta:g} (M={plan.M}, {dt:.1f} s): {parts}")
        path = os.path.join(_out_dir(cfg), "errors.csv")
        write_csv(path, sections)
        click.echo(f"wrote {path}")
        echo_config(cfg, _out_dir(cfg))

    _guarded(body)


@main.command("homogenize")
@_config_option
@click.option("--lambda", "with_lambda", is_flag=True,
              help="also run the resonance-statistic scaling study")
def cmd_homogenize(config_path, with_lambda):
    """Periodic cell problems: homogenized tensors, optional lambda study."""

    def body():
        cfg = load_config(config_path)
        eps = cfg.scalar("epsilon")
        spec = _spec_of(cfg, cfg.eta[0])
        h_cell = cfg.h_basis if cfg.h_basis is not None else eps / 200
        n = int(round(eps / h_cell))
        if n < 2:
            raise ConfigError(f"cell resolution eps/h_basis = {n} is too coarse")
        cc = build_cell_correctors(spec.a0_periodic, spec.b_periodic, spec.d,
                                   n=n)
        meta = {"preset": cfg.preset, "epsilon": eps, "cell_points": n}
        for key in ("kappa", "zeta", "P"):
            v = getattr(cfg, key)
            if v is not None:
                meta[key] = v
        click.echo(tensor_report(
            {"A_star": cc.A_star, "B_bar": cc.B_bar, "A1_star": cc.A1_star},
            meta), nl=False)
        if with_lambda:
            _lambda_study(cfg, spec, cc)

    _guarded(body)


def _lambda_study(cfg, spec, cc):
    """E[lambda^2] on a mesh and its refinement, against the cell-count law.

    Halving h multiplies the expected square by 2^d up to the slowly varying
    log^2 factor in the maximum of the per-element averages.
    """
    h = cfg.scalar("h")
    M = cfg.scalar("M")
    domain = "interval" if spec.d == 1 else "square"
    draws = draw_realizations(spec, M, cfg.seed)
    second = {}
    for step in (h, h / 2):
        mesh = build_coarse_mesh(domain, step)
        cells = build_cell_index_set(domain, spec.eps, mesh)
        lams = [lambda_stat(cc.B_bar, r, cells).lam for r in draws]
        second[step] = float(np.mean(np.square(lams)))
        click.echo(f"E[lambda^2] at h={step:g}: {second[step]:.6e} "
                   f"(M={M})")
    growth = second[h / 2] / second[h]
    n_of = lambda s: 1.0 / s
    log_ratio = (np.log(n_of(h / 2)) / np.log(n_of(h))) ** 2
    predicted = 2.0 ** spec.d * log_ratio
    click.echo(f"growth {growth:.3f}; predicted 2^d x log^2 factor "
               f"{predicted:.3f}")


@main.command("sweep")
@_config_option
@click.option("--axis", type=click.Choice(["h", "eps", "eta", "M"]),
              required=True)
@_threads_option
def cmd_sweep(config_path, axis, threads):
    """Error decay along one axis; writes rate CSV and plot data."""

    def body():
        cfg = load_config(config_path)
        key = {"eps": "epsilon"}.get(axis, axis)
        values = getattr(cfg, key)
        if len(values) < 3:
            raise ConfigError(
                f"sweep along {axis} needs at least three {key} values in "
                "the config")
        eta0 = cfg.eta[0]
        template = _plan_of(
            cfg,
            values[0] if axis == "eta" else eta0,
            eps=values[0] if axis == "eps" else None,
            h=values[0] if axis == "h" else None,
            M=int(values[0]) if axis == "M" else None,
        )
        pair = cfg.estimators[0]
        norm_name = cfg.norms[0]
        sw = convergence_sweep(template, axis, values, pair=pair,
                               norm_name=norm_name,
                               threads=_threads_of(threads))
        out = _out_dir(cfg)
        csv_path = os.path.join(out, f"sweep_{axis}.csv")
        sections = []
        for v, est in zip(sw.values, sw.estimates):
            plan = _plan_of(
                cfg,
                v if axis == "eta" else eta0,
                eps=v if axis == "eps" else None,
                h=v if axis == "h" else None,
                M=int(v) if axis == "M" else None,
            )
            sections.append((plan, [est]))
        text = csv_text(sections)
        footer = (f"# slope {sw.slope:.6f} halfwidth_slope "
                  f"{sw.halfwidth_slope:.6f}\n")
        with open(csv_path, "w") as fh:
            fh.write(text + footer)
        dat_path = os.path.join(out, f"sweep_{axis}.dat")
        with open(dat_path, "w") as fh:
            for v, est in zip(sw.values, sw.estimates):
                fh.write(f"{v:.10g} {est.mean:.10e}\n")
        click.echo(f"{estimator_id(pair, norm_name)} along {axis}: "
                   + ", ".join(f"{e.mean:.4e}" for e in sw.estimates))
        click.echo(f"slope {sw.slope:.3f}")
        click.echo(f"wrote {csv_path} and {dat_path}")
        echo_config(cfg, out)

    _guarded(body)


@main.command("table")
@click.argument("csv_path", type=click.Path(exists=True, dir_okay=False))
def cmd_table(csv_path):
    """Render a stored error CSV as an aligned text table."""

    def body():
        with open(csv_path, newline="") as fh:
            rows = [r for r in csv.DictReader(fh)
                    if r.get("preset") and not r["preset"].startswith("#")]
        if not rows:
            raise ConfigError(f"no data rows in {csv_path}")
        groups = {}
        est_order = []
        for r in rows:
            gkey = (r["preset"], r["kappa"], r["zeta"], r["norm"], r["M"],
                    r["seed"])
            groups.setdefault(gkey, {}).setdefault(r["eta"], {})[
                r["estimator"]] = (r["mean_percent"], r["halfwidth_percent"])
            if r["estimator"] not in est_order:
                est_order.append(r["estimator"])
        for (preset_name, kappa, zeta, norm_name, M, seed), by_eta in \
                groups.items():
            head = [f"preset={preset_name}"]
            if kappa:
                head.append(f"kappa={kappa}")
            if zeta:
                head.append(f"zeta={zeta}")
            head += [f"norm={norm_name}", f"M={M}", f"seed={seed}"]
            click.echo("  ".join(head))
            cols = [e for e in est_order
                    if any(e in v for v in by_eta.values())]
            width = max(max(len(c) for c in cols), 20) + 2
            click.echo("eta".ljust(10) + "".join(c.rjust(width) for c in cols))
            for eta, cells in by_eta.items():
                line = eta.ljust(10)
                for c in cols:
                    if c in cells:
                        mean, hw = cells[c]
                        line += f"{mean} +- {hw}".rjust(width)
                    else:
                        line += "-".rjust(width)
                click.echo(line)
            click.echo("")

    _guarded(body)


if __name__ == "__main__":
    main()

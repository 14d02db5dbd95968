"""Monte Carlo estimation of relative errors over coefficient realizations.

An experiment fixes a coefficient preset, mesh resolutions and a master seed,
then averages relative errors between solution channels over M realizations:

    u_S    coarse solve in the deterministic (unperturbed-coefficient) basis,
    u_M    coarse solve in a basis rebuilt from each realized coefficient,
    u_ref  fine-scale reference solve of the realized problem.

Errors are relative in the second argument: e(u1, u2) = ||u1 - u2|| / ||u2||.
Realization m is counter-addressed, so the sample stream is a pure function
of (plan, seed) and in particular independent of the thread count.  The 1D
path runs on the quadrature-exact engine (analytic reference); the 2D path
reconstructs all channels as element-corner fields on a shared fine mesh and
compares them there.
"""

import csv
import io
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from .coefficients import draw_realizations, preset
from .fem_core import (AssemblyError, NormKind, SolveError, norm,
                       solve_reference, to_element_field)
from .mesh import build_coarse_mesh, build_fine_mesh
from .msfem import (OneDMsfemEngine, PatchWorkspace, _map_indexed,
                    assemble_realization, build_basis,
                    build_reconstruction_plan, precompute_pieces, reconstruct,
                    solve_coarse)

CHANNELS = ("u_S", "u_M", "u_ref")
NORMS = {"H1": NormKind.BROKEN_H1, "L2": NormKind.L2}
_ENGINE_NAME = {"u_S": "uS", "u_M": "uM", "u_ref": "uref"}

CONFIDENCE_FACTOR = 1.96  # two-sided 95% normal quantile, by convention

CSV_HEADER = ("preset", "eta", "kappa", "zeta", "estimator", "norm", "M",
              "mean_percent", "halfwidth_percent", "seed")


def estimator_id(pair, norm_name):
    return f"e_{norm_name}({pair[0]},{pair[1]})"


@dataclass
class ErrorEstimate:
    """Sample mean, spread and confidence half-width of one error channel.

    The per-realization samples are kept (sample m of any two estimates from
    the same run used the same coefficient draw).  The half-width is exactly
    1.96 * std / sqrt(M) with the Bessel-corrected std.
    """

    estimator: str
    norm: str
    samples: np.ndarray

    @property
    def m(self):
        return len(self.samples)

    @property
    def mean(self):
        return float(np.mean(self.samples))

    @property
    def std(self):
        dev = self.samples - np.mean(self.samples)
        return float(np.sqrt(np.sum(dev * dev) / (len(self.samples) - 1)))

    @property
    def halfwidth(self):
        return CONFIDENCE_FACTOR * self.std / np.sqrt(self.m)


def estimate(samples, estimator="", norm_name=""):
    """Two-pass moment estimate; needs M >= 2 for the sample std."""
    samples = np.asarray(samples, dtype=float).ravel()
    if len(samples) < 2:
        raise ValueError("need at least two samples for a spread estimate")
    return ErrorEstimate(estimator=estimator, norm=norm_name, samples=samples)


@dataclass
class ExperimentPlan:
    """Everything a Monte Carlo error run depends on, seed included."""

    preset: str
    eps: float
    eta: float
    h: float
    M: int
    seed: int
    kappa: float = None
    zeta: float = None
    P: float = None
    h_fine: float = None
    h_basis: float = None
    rho: float = None
    rhs: object = 1.0
    estimators: tuple = (("u_S", "u_ref"), ("u_M", "u_ref"), ("u_S", "u_M"))
    norms: tuple = ("H1",)

    def __post_init__(self):
        if self.M < 2:
            raise ValueError("plans need M >= 2 (the spread is undefined below)")
        for name in ("eps", "h"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("h_fine", "h_basis", "rho"):
            v = getattr(self, name)
            if v is not None and v <= 0:
                raise ValueError(f"{name} must be positive when given")
        self.estimators = tuple(tuple(p) for p in self.estimators)
        if not self.estimators or not self.norms:
            raise ValueError("need at least one estimator and one norm")
        for p in self.estimators:
            if len(p) != 2 or p[0] == p[1] or not set(p) <= set(CHANNELS):
                raise ValueError(f"bad estimator pair {p!r}; "
                                 f"channels are {CHANNELS}")
        for nk in self.norms:
            if nk not in NORMS:
                raise ValueError(f"unknown norm {nk!r}; choose from "
                                 f"{tuple(NORMS)}")

    def spec(self):
        extra = {k: getattr(self, k) for k in ("kappa", "zeta", "P")
                 if getattr(self, k) is not None}
        return preset(self.preset, eps=self.eps, eta=self.eta, **extra)


def _wrap_realization_failure(m, err):
    """Solver failures abort the run labeled with the realization index."""
    return type(err)(f"realization {m}: {err}")


def run(plan, threads=1):
    """All requested error estimates of one plan, one list entry per
    (estimator pair, norm) in plan order."""
    spec = plan.spec()
    realizations = draw_realizations(spec, plan.M, plan.seed)
    if spec.d == 1:
        table = _run_1d(plan, spec, realizations, threads)
    else:
        table = _run_2d(plan, spec, realizations, threads)
    out = []
    for p in plan.estimators:
        for nk in plan.norms:
            out.append(estimate(table[(p, nk)], estimator_id(p, nk), nk))
    return out


def _run_1d(plan, spec, realizations, threads):
    engine = OneDMsfemEngine(spec, plan.h, rhs=plan.rhs)
    pairs = [(_ENGINE_NAME[p[0]], _ENGINE_NAME[p[1]]) for p in plan.estimators]

    def one(m):
        try:
            return engine.realization_errors(realizations[m], pairs, plan.norms)
        except (AssemblyError, SolveError) as err:
            raise _wrap_realization_failure(m, err) from err
        except np.linalg.LinAlgError as err:
            raise SolveError(f"realization {m}: {err}") from err

    rows = _map_indexed(one, plan.M, threads)
    table = {}
    for p, ep in zip(plan.estimators, pairs):
        for nk in plan.norms:
            table[(p, nk)] = np.array([r[(ep[0], ep[1], nk)] for r in rows])
    return table


def _run_2d(plan, spec, realizations, threads):
    if plan.h_fine is None or plan.h_basis is None:
        raise ValueError("2D plans need h_fine and h_basis")
    mesh = build_coarse_mesh("square", plan.h)
    basis = build_basis(spec, mesh, plan.h_basis, rho=plan.rho, threads=threads)
    precompute_pieces(basis, rhs=plan.rhs, threads=threads)
    fine = build_fine_mesh("square", plan.h_fine)
    rplan = build_reconstruction_plan(basis, fine)
    names = {n for p in plan.estimators for n in p}
    # with eta = 0 the rebuilt basis coincides with the deterministic one
    rebuild = "u_M" in names and spec.eta != 0.0
    need_S = "u_S" in names or ("u_M" in names and not rebuild)
    M = plan.M

    sols_S = None
    if need_S:
        def one_S(m):
            try:
                K, F = assemble_realization(basis, realizations[m])
                return solve_coarse(K, F, mesh, tag="uS")
            except (AssemblyError, SolveError) as err:
                raise _wrap_realization_failure(m, err) from err

        sols_S = _map_indexed(one_S, M, threads)

    sols_M = corner_phi = None
    if rebuild:
        sols_M, corner_phi = _rebuilt_channel(plan, spec, mesh, basis, rplan,
                                              realizations, threads)

    def errors_of(m):
        fields = {}
        if "u_ref" in names:
            try:
                ref = solve_reference(spec, realizations[m], rhs=plan.rhs,
                                      h_fine=plan.h_fine)
            except (AssemblyError, SolveError) as err:
                raise _wrap_realization_failure(m, err) from err
            fields["u_ref"] = to_element_field(fine, ref.values)
        if need_S:
            fields["u_S"] = reconstruct(sols_S[m], basis, rplan)
        if "u_M" in names:
            if rebuild:
                U = sols_M[m].coefficients
                fld = np.zeros((fine.n_elements, mesh.d + 1))
                for e in range(mesh.n_elements):
                    vals = corner_phi[e][m].astype(float) @ U[mesh.elements[e]]
                    fld[rplan.tri_ids[e]] = vals.reshape(-1, mesh.d + 1)
                fields["u_M"] = fld
            else:
                fields["u_M"] = fields["u_S"]
        row = {}
        for p in plan.estimators:
            diff = fields[p[0]] - fields[p[1]]
            for nk in plan.norms:
                kind = NORMS[nk]
                row[(p, nk)] = norm(fine, diff, kind) / norm(fine, fields[p[1]], kind)
        return row

    rows = _map_indexed(errors_of, M, threads)
    return {key: np.array([r[key] for r in rows])
            for key in rows[0]}


def _rebuilt_channel(plan, spec, mesh, basis, rplan, realizations, threads):
    """Coarse solves whose basis is re-harmonized per realization.

    Sweeps elements on the outside so each patch factorization is reused
    across all M realizations (the unperturbed factor preconditions the
    perturbed solves).  Per element and realization it keeps the local
    stiffness, load, and the basis traces at the owned fine-mesh corner
    points (float32; they only enter error integrands).
    """
    M = plan.M
    nd = mesh.d + 1
    ne = mesh.n_elements

    def sweep(e):
        ws = PatchWorkspace(spec, mesh, e, plan.h_basis, basis.rho)
        conn_e = rplan.conn[e]
        w_e = rplan.weights[e]
        Ke = np.empty((M, nd, nd))
        Fe = np.empty((M, nd))
        Pe = np.empty((M, conn_e.shape[0], nd), dtype=np.float32)
        for m in range(M):
            X = realizations[m].X
            a_el = ws.a0_mean + spec.eta * X[ws.cell_rank] * ws.b_mean
            try:
                values = ws.harmonics_cg(a_el)
                _, phi = ws.recombine(values)
            except (AssemblyError, SolveError) as err:
                raise _wrap_realization_failure(m, err) from err
            sub_a = ws.sub_a0 + spec.eta * X[ws.sub_cell_rank] * ws.sub_b
            Ke[m] = ws.local_stiffness(phi, sub_a)
            Fe[m] = ws.local_load(phi, plan.rhs)
            Pe[m] = np.einsum("pk,pkj->pj", w_e, phi[conn_e])
        return Ke, Fe, Pe

    swept = _map_indexed(sweep, ne, threads)
    K_loc = np.stack([s[0] for s in swept], axis=0)   # (ne, M, nd, nd)
    F_loc = np.stack([s[1] for s in swept], axis=0)
    corner_phi = [s[2] for s in swept]

    conn = mesh.elements
    rows = np.repeat(conn, nd, axis=1).ravel()
    cols = np.tile(conn, (1, nd)).ravel()
    sols = []
    n = mesh.n_nodes
    for m in range(M):
        K = sp.coo_matrix((K_loc[:, m].ravel(), (rows, cols)),
                          shape=(n, n)).tocsr()
        F = np.zeros(n)
        np.add.at(F, conn, F_loc[:, m])
        try:
            sols.append(solve_coarse(K, F, mesh, tag="uM"))
        except (AssemblyError, SolveError) as err:
            raise _wrap_realization_failure(m, err) from err
    return sols, corner_phi


@dataclass
class SweepResult:
    """One plan axis swept; slope is the log-log LSQ fit of the mean."""

    axis: str
    values: np.ndarray
    estimates: list = field(repr=False)
    slope: float = float("nan")
    halfwidth_slope: float = float("nan")


SWEEP_AXES = ("h", "eps", "eta", "M")


def convergence_sweep(template, axis, values, pair=None, norm_name=None,
                      threads=1):
    """Rerun one estimator along an axis and fit its decay rate.

    Means (and half-widths, when nonzero throughout) are fit as
    log(value) vs log(axis); at least three axis values are required for
    the fit to mean anything.
    """
    if axis not in SWEEP_AXES:
        raise ValueError(f"axis must be one of {SWEEP_AXES}")
    values = [int(v) if axis == "M" else float(v) for v in values]
    if len(values) < 3:
        raise ValueError("sweeps need at least three axis values")
    if pair is None:
        pair = template.estimators[0]
    pair = tuple(pair)
    if norm_name is None:
        norm_name = template.norms[0]
    wanted = estimator_id(pair, norm_name)
    estimates = []
    for v in values:
        plan = replace(template, **{axis: v},
                       estimators=(pair,), norms=(norm_name,))
        got = run(plan, threads=threads)
        estimates.append(next(e for e in got if e.estimator == wanted))
    means = np.array([e.mean for e in estimates])
    hws = np.array([e.halfwidth for e in estimates])
    logv = np.log(np.asarray(values, dtype=float))
    slope = float(np.polyfit(logv, np.log(means), 1)[0]) \
        if np.all(means > 0) else float("nan")
    hw_slope = float(np.polyfit(logv, np.log(hws), 1)[0]) \
        if np.all(hws > 0) else float("nan")
    return SweepResult(axis=axis, values=np.asarray(values, dtype=float),
                       estimates=estimates, slope=slope,
                       halfwidth_slope=hw_slope)


def _param_str(v):
    return "" if v is None else f"{v:g}"


def csv_rows(plan, estimates):
    """Row lists (no header) for one plan's estimates; percents, 5 decimals."""
    rows = []
    for est in estimates:
        rows.append([plan.preset, _param_str(plan.eta), _param_str(plan.kappa),
                     _param_str(plan.zeta), est.estimator, est.norm,
                     str(est.m), f"{100 * est.mean:.5f}",
                     f"{100 * est.halfwidth:.5f}", str(plan.seed)])
    return rows


def csv_text(sections):
    """Full CSV (header included) for [(plan, estimates), ...] sections."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for plan, estimates in sections:
        w.writerows(csv_rows(plan, estimates))
    return buf.getvalue()


def write_csv(path, sections):
    text = csv_text(sections)
    with open(path, "w", newline="") as f:
        f.write(text)
    return text

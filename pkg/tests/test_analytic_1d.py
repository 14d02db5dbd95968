import numpy as np
import pytest

from msfemlab.analytic_1d import (
    OneDProblem,
    exact_solution,
    galerkin_adapted,
    msfem_basis_1d,
    oned_problem_from_spec,
    verify_energy_bound,
)
from msfemlab.coefficients import preset
from msfemlab.fem_core import solve_reference


def test_exact_solution_unit_coefficient():
    problem = OneDProblem(a=lambda x: np.ones_like(x), f=1.0)
    sol = exact_solution(problem)
    x = np.linspace(0, 1, 1001)
    assert np.max(np.abs(sol.u(x) - 0.5 * x * (1 - x))) < 1e-8
    assert np.max(np.abs(sol.du(x) - (0.5 - x))) < 1e-10


def test_exact_solution_zero_load():
    problem = OneDProblem(a=lambda x: 2.0 + np.sin(4 * np.pi * x) ** 2, f=0.0)
    sol = exact_solution(problem)
    x = np.linspace(0, 1, 257)
    assert np.max(np.abs(sol.u(x))) < 1e-12


def test_exact_solution_nonpositive_coefficient_rejected():
    with pytest.raises(ValueError):
        OneDProblem(a=lambda x: np.cos(2 * np.pi * x), f=1.0)


def test_exact_matches_fine_fem_at_first_order():
    spec = preset("oned-multifreq", eps=0.1, eta=0.0, kappa=55, zeta=1)
    problem = oned_problem_from_spec(spec)
    sol = exact_solution(problem)
    g = problem.grid
    errs = []
    for nf in (200, 400):
        fem = solve_reference(spec, None, 1.0, h_fine=1.0 / nf)
        # piecewise-constant FEM gradient evaluated at the quadrature nodes
        e = np.clip((g.mids * nf).astype(int), 0, nf - 1)
        du_fem = (np.diff(fem.values) * nf)[e]
        errs.append(np.sqrt(g.integrate((du_fem - sol.du_mids) ** 2)))
    assert errs[0] < 0.2
    assert 1.7 < errs[0] / errs[1] < 2.4  # O(h_fine) in the H1 seminorm


def test_basis_unit_coefficient_gives_hats():
    problem = OneDProblem(a=lambda x: np.ones_like(x), f=1.0)
    nodes = np.linspace(0, 1, 5)
    basis = msfem_basis_1d(problem, nodes)
    x = np.linspace(0, 1, 401)
    hat1 = basis.hat(1, x)
    expect = np.maximum(0.0, 1.0 - np.abs(x - 0.25) / 0.25)
    assert np.max(np.abs(hat1 - expect)) < 1e-10


def test_basis_partition_of_unity():
    problem = OneDProblem(
        a=lambda x: 5 + 50 * np.sin(np.pi * x / 0.125) ** 2, f=1.0, eps=0.125
    )
    nodes = np.linspace(0, 1, 9)
    basis = msfem_basis_1d(problem, nodes)
    x = np.linspace(0, 1, 701)
    total = sum(basis.hat(i, x) for i in range(len(nodes)))
    assert np.max(np.abs(total - 1.0)) < 1e-12


def test_basis_rejects_bad_partition():
    problem = OneDProblem(a=lambda x: np.ones_like(x), f=1.0)
    with pytest.raises(ValueError):
        msfem_basis_1d(problem, [0.0, 0.5, 0.25, 1.0])
    with pytest.raises(ValueError):
        msfem_basis_1d(problem, [0.1, 0.5, 1.0])


def test_energy_bound_unit_case():
    problem = OneDProblem(a=lambda x: np.ones_like(x), f=1.0)
    report = verify_energy_bound(problem, np.linspace(0, 1, 5))
    h = 0.25
    assert abs(report["lhs"] - h / (2 * np.sqrt(3))) < 1e-6
    assert abs(report["rhs"] - h / np.pi) < 1e-12
    assert report["holds"]


def test_energy_bound_zero_load():
    problem = OneDProblem(a=lambda x: 1.0 + x * 0, f=0.0)
    report = verify_energy_bound(problem, np.linspace(0, 1, 5))
    assert report["lhs"] < 1e-12
    assert report["holds"]


def test_energy_bound_oscillatory_case():
    spec = preset("oned-multifreq", eps=0.025, eta=0.0, kappa=55, zeta=1)
    problem = oned_problem_from_spec(spec)
    report = verify_energy_bound(problem, np.linspace(0, 1, 31))
    assert abs(report["nu_min"] - 5.0) < 1e-3
    assert report["holds"]


def test_galerkin_is_energy_projection():
    problem = OneDProblem(
        a=lambda x: 2 + np.sin(2 * np.pi * x / 0.2) ** 2,
        f=lambda x: 1.0 + 3.0 * x,
        eps=0.2,
    )
    nodes = np.linspace(0, 1, 7)
    nodal, basis = galerkin_adapted(problem, nodes)
    sol = exact_solution(problem)
    g = problem.grid
    amid = problem.a_mids()

    def energy_err(vals):
        duh = basis.derivative_mids(vals)
        return np.sqrt(g.integrate(amid * (sol.du_mids - duh) ** 2))

    best = energy_err(nodal)
    interp = energy_err(sol.u(nodes))
    assert best <= interp * (1 + 1e-9)
    # and strictly better than a perturbed candidate
    rng = np.random.default_rng(3)
    for _ in range(5):
        cand = nodal.copy()
        cand[1:-1] += 0.01 * rng.standard_normal(len(nodes) - 2)
        assert best <= energy_err(cand) * (1 + 1e-12)


def test_nodal_exactness_constant_load():
    spec = preset("oned-multifreq", eps=0.1, eta=0.0, kappa=55, zeta=1)
    problem = oned_problem_from_spec(spec)
    nodes = np.linspace(0, 1, 6)
    nodal, _ = galerkin_adapted(problem, nodes)
    sol = exact_solution(problem)
    assert np.max(np.abs(nodal - sol.u(nodes))) < 1e-8


def test_energy_bound_randomized():
    rng = np.random.default_rng(42)
    for trial in range(50):
        c = rng.uniform(0, 2, size=3)
        phase = rng.uniform(0, np.pi, size=3)
        floor_ = rng.uniform(0.3, 2.0)

        def a(x, c=c, phase=phase, floor_=floor_):
            out = floor_ * np.ones_like(x)
            for k in range(3):
                out = out + c[k] * np.sin((k + 1) * np.pi * x + phase[k]) ** 2
            return out

        kind = trial % 3
        if kind == 0:
            f = float(rng.uniform(-2, 2))
        elif kind == 1:
            slope, off = rng.uniform(-2, 2, size=2)
            f = lambda x, s=slope, o=off: s * x + o
        else:
            amp, freq = rng.uniform(0.5, 2), rng.integers(1, 5)
            f = lambda x, A=amp, q=freq: A * np.sin(q * np.pi * x)
        n_el = int(rng.choice([4, 8, 16]))
        problem = OneDProblem(a=a, f=f)
        report = verify_energy_bound(problem, np.linspace(0, 1, n_el + 1))
        assert report["holds"], f"bound failed on trial {trial}: {report}"

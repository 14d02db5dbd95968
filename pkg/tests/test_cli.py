"""Config parsing, subcommands, exit codes, file outputs."""

import numpy as np
import pytest
from click.testing import CliRunner

from msfemlab.cli import ConfigError, _guarded, load_config, main
from msfemlab.fem_core import SolveError


def write_ini(path, body):
    with open(path, "w") as fh:
        fh.write(body)
    return str(path)


def mc_1d_ini(tmp_path, eta="0.5, 0.1", M=3, extra=""):
    return write_ini(tmp_path / "mc.ini", f"""
[problem]
preset = oned-multifreq
epsilon = 0.1
eta = {eta}
kappa = 55
zeta = 1

[mesh]
h = 1/5
{extra}
[montecarlo]
M = {M}
seed = 3

[output]
out_dir = {tmp_path / 'out'}
""")


# ------------------------------------------------------------------- config


def test_config_fraction_values_and_lists(tmp_path):
    cfg = load_config(mc_1d_ini(tmp_path))
    assert cfg.h == [0.2]
    assert cfg.eta == [0.5, 0.1]
    assert cfg.kappa == 55.0
    assert cfg.M == [3]


def test_config_rejects_unknown_key(tmp_path):
    path = mc_1d_ini(tmp_path, extra="wavelength = 3\n")
    with pytest.raises(ConfigError, match="wavelength"):
        load_config(path)


def test_config_rejects_unknown_section(tmp_path):
    path = write_ini(tmp_path / "bad.ini",
                     "[problem]\npreset = oned-multifreq\nepsilon = 0.1\n"
                     "[solvers]\ntol = 1e-9\n")
    with pytest.raises(ConfigError, match="solvers"):
        load_config(path)


def test_config_enforces_scale_separation(tmp_path):
    path = write_ini(tmp_path / "bad.ini", """
[problem]
preset = oned-multifreq
epsilon = 0.5
eta = 0.1
kappa = 55
zeta = 1

[mesh]
h = 0.25
""")
    with pytest.raises(ConfigError, match="epsilon"):
        load_config(path)
    path2 = mc_1d_ini(tmp_path, extra="h_fine = 0.2\n")
    with pytest.raises(ConfigError, match="h_fine"):
        load_config(path2)


def test_guard_exit_codes():
    with pytest.raises(SystemExit) as info:
        _guarded(lambda: (_ for _ in ()).throw(ConfigError("nope")))
    assert info.value.code == 2
    with pytest.raises(SystemExit) as info:
        _guarded(lambda: (_ for _ in ()).throw(SolveError("diverged")))
    assert info.value.code == 3


# ----------------------------------------------------------------------- mc


def test_mc_writes_one_row_per_eta_estimator(tmp_path):
    runner = CliRunner()
    res = runner.invoke(main, ["mc", "-c", mc_1d_ini(tmp_path)])
    assert res.exit_code == 0, res.output
    lines = (tmp_path / "out" / "errors.csv").read_text().strip().splitlines()
    assert len(lines) == 1 + 2 * 3  # header + etas x estimators
    assert lines[0].startswith("preset,eta,kappa,zeta,estimator")
    etas = [ln.split(",")[1] for ln in lines[1:]]
    assert etas == ["0.5"] * 3 + ["0.1"] * 3


def test_mc_zero_eta_gap_column_is_zero(tmp_path):
    runner = CliRunner()
    res = runner.invoke(main, ["mc", "-c", mc_1d_ini(tmp_path, eta="0")])
    assert res.exit_code == 0, res.output
    rows = (tmp_path / "out" / "errors.csv").read_text().strip().splitlines()
    gap = [r for r in rows if "e_H1(u_S,u_M)" in r]
    assert len(gap) == 1
    assert gap[0].split(",")[-3] == "0.00000"


def test_mc_echoed_config_reproduces_run(tmp_path):
    runner = CliRunner()
    path = mc_1d_ini(tmp_path)
    res = runner.invoke(main, ["mc", "-c", path])
    assert res.exit_code == 0, res.output
    first = (tmp_path / "out" / "errors.csv").read_bytes()
    echoed = tmp_path / "out" / "config.ini"
    assert echoed.exists()
    res2 = runner.invoke(main, ["mc", "-c", str(echoed)])
    assert res2.exit_code == 0, res2.output
    assert (tmp_path / "out" / "errors.csv").read_bytes() == first


def test_mc_bad_config_exits_two(tmp_path):
    runner = CliRunner()
    path = mc_1d_ini(tmp_path, extra="h_fine = 0.9\n")
    res = runner.invoke(main, ["mc", "-c", path])
    assert res.exit_code == 2


# -------------------------------------------------------------------- basis


def basis_2d_ini(tmp_path, rho="3"):
    return write_ini(tmp_path / f"basis_rho{rho}.ini", f"""
[problem]
preset = twod-classical
epsilon = 0.25
eta = 0.5

[mesh]
h = 0.5
h_fine = 1/16
h_basis = 1/16

[msfem]
oversampling_ratio = {rho}

[montecarlo]
M = 2
seed = 11

[output]
out_dir = {tmp_path / 'out'}
basis_cache_dir = {tmp_path / 'cache'}
""")


def test_basis_cache_hit_and_invalidation(tmp_path):
    runner = CliRunner()
    res = runner.invoke(main, ["basis", "-c", basis_2d_ini(tmp_path)])
    assert res.exit_code == 0, res.output
    assert "built 8 patches" in res.output
    hit = runner.invoke(main, ["basis", "-c", basis_2d_ini(tmp_path)])
    assert hit.exit_code == 0
    assert "cache hit" in hit.output and "no patch solves" in hit.output
    changed = runner.invoke(main, ["basis", "-c",
                                   basis_2d_ini(tmp_path, rho="2")])
    assert changed.exit_code == 0
    assert "mismatch" in changed.output
    stored = [ln for ln in changed.output.splitlines() if "stored" in ln][0]
    wanted = [ln for ln in changed.output.splitlines() if "requested" in ln][0]
    assert "3.0" in stored and "2.0" in wanted  # both parameter sets shown
    assert "built 8 patches" in changed.output


# --------------------------------------------------------------- homogenize


def test_homogenize_reports_effective_coefficient(tmp_path):
    path = write_ini(tmp_path / "hom.ini", """
[problem]
preset = oned-multifreq
epsilon = 0.0125
eta = 0.5
kappa = 55
zeta = 1

[mesh]
h = 1/5
h_basis = 3.125e-05
""")
    runner = CliRunner()
    res = runner.invoke(main, ["homogenize", "-c", path])
    assert res.exit_code == 0, res.output
    line = [ln for ln in res.output.splitlines()
            if ln.strip().startswith("1.6")][0]
    assert np.isclose(float(line), np.sqrt(275.0), rtol=1e-6)


def test_homogenize_lambda_study_prints_growth(tmp_path):
    path = write_ini(tmp_path / "hom.ini", """
[problem]
preset = oned-multifreq
epsilon = 0.0125
eta = 0.5
kappa = 55
zeta = 1

[mesh]
h = 1/5
h_basis = 3.125e-05

[montecarlo]
M = 50
seed = 21
""")
    runner = CliRunner()
    res = runner.invoke(main, ["homogenize", "-c", path, "--lambda"])
    assert res.exit_code == 0, res.output
    assert "E[lambda^2] at h=0.2" in res.output
    assert "E[lambda^2] at h=0.1" in res.output
    assert "growth" in res.output


# -------------------------------------------------------------------- sweep


def test_sweep_h_writes_rate_csv_and_plot_data(tmp_path):
    path = write_ini(tmp_path / "sw.ini", f"""
[problem]
preset = oned-multifreq
epsilon = 1/80
eta = 0
kappa = 55
zeta = 1

[mesh]
h = 1/10, 1/20, 1/40

[montecarlo]
M = 2
seed = 5
estimators = u_S:u_ref

[output]
out_dir = {tmp_path / 'out'}
""")
    runner = CliRunner()
    res = runner.invoke(main, ["sweep", "-c", path, "--axis", "h"])
    assert res.exit_code == 0, res.output
    lines = (tmp_path / "out" / "sweep_h.csv").read_text().strip().splitlines()
    assert len(lines) == 5  # header, three rows, slope footer
    assert lines[-1].startswith("# slope")
    slope = float(lines[-1].split()[2])
    assert 0.7 < slope < 1.3
    dat = (tmp_path / "out" / "sweep_h.dat").read_text().strip().splitlines()
    assert len(dat) == 3
    pairs = np.array([[float(t) for t in ln.split()] for ln in dat])
    assert pairs.shape == (3, 2)
    assert np.all(np.diff(pairs[:, 1]) < 0)  # error shrinks with h


def test_sweep_eta_growth_toward_strong_perturbation(tmp_path):
    path = write_ini(tmp_path / "sweta.ini", f"""
[problem]
preset = oned-multifreq
epsilon = 0.1
eta = 0.01, 0.1, 1
kappa = 55
zeta = 1

[mesh]
h = 1/5

[montecarlo]
M = 4
seed = 3
estimators = u_S:u_M

[output]
out_dir = {tmp_path / 'out'}
""")
    runner = CliRunner()
    res = runner.invoke(main, ["sweep", "-c", path, "--axis", "eta"])
    assert res.exit_code == 0, res.output
    dat = (tmp_path / "out" / "sweep_eta.dat").read_text().strip().splitlines()
    means = [float(ln.split()[1]) for ln in dat]
    assert means[0] < means[1] < means[2]


def test_sweep_needs_three_axis_values(tmp_path):
    path = mc_1d_ini(tmp_path)  # only two etas listed
    runner = CliRunner()
    res = runner.invoke(main, ["sweep", "-c", path, "--axis", "eta"])
    assert res.exit_code == 2


# ---------------------------------------------------------------- reference


def test_reference_writes_profile(tmp_path):
    path = write_ini(tmp_path / "ref.ini", f"""
[problem]
preset = oned-multifreq
epsilon = 0.1
eta = 0.5
kappa = 55
zeta = 1

[mesh]
h = 1/5
h_fine = 1/400

[montecarlo]
seed = 3

[output]
out_dir = {tmp_path / 'out'}
""")
    runner = CliRunner()
    res = runner.invoke(main, ["reference", "-c", path, "-m", "1"])
    assert res.exit_code == 0, res.output
    assert "401 nodes" in res.output
    table = np.loadtxt(tmp_path / "out" / "reference_m1.txt")
    assert table.shape == (401, 2)
    assert table[0, 1] == 0.0 and table[-1, 1] == 0.0  # boundary values


# -------------------------------------------------------------------- table


def test_table_renders_grouped_rows(tmp_path):
    runner = CliRunner()
    path = mc_1d_ini(tmp_path)
    assert runner.invoke(main, ["mc", "-c", path]).exit_code == 0
    res = runner.invoke(main, ["table",
                               str(tmp_path / "out" / "errors.csv")])
    assert res.exit_code == 0, res.output
    assert "preset=oned-multifreq" in res.output
    assert "e_H1(u_S,u_ref)" in res.output
    assert "+-" in res.output
    eta_rows = [ln for ln in res.output.splitlines()
                if ln.startswith(("0.5", "0.1"))]
    assert len(eta_rows) == 2

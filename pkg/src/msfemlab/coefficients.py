"""Oscillatory coefficient families with weak random perturbations.

Every field here is scalar-times-identity:

    A_eta(x, omega) = ( a0(x) + eta * X_k(omega) * b(x) ) * Id,

where a0 is the deterministic oscillatory part, b the per-cell perturbation
profile, and X_k are i.i.d. uniform [0,1] variables attached to the cells
eps*((k, k+1]^d) of an eps-lattice.  Cells are half-open on the left, so a
point with x/eps exactly integral belongs to the cell below.

Random draws use a counter-based generator (Philox) keyed by (seed, m): the
value attached to cell k of realization m is a pure function of the triple
(seed, m, k) and in particular independent of how many realizations were
drawn or in what order.
"""

from dataclasses import dataclass

import numpy as np

__all__ = [
    "CoefficientSpec",
    "Realization",
    "X_MEAN",
    "X_VAR",
    "preset",
    "sample",
    "ellipticity_bounds",
    "control_quantity",
    "draw_realizations",
]

PRESETS = ("oned-multifreq", "twod-multifreq", "twod-classical")

# law of the cell variables: uniform on [0, 1]
X_MEAN = 0.5
X_VAR = 1.0 / 12.0


@dataclass(frozen=True)
class CoefficientSpec:
    """Closed-form description of one coefficient family.

    kappa/zeta parametrize the multi-frequency perturbation profiles, P the
    classical-case modulation; unused parameters are None.
    """

    name: str
    d: int
    eps: float
    eta: float
    kappa: float = None
    zeta: float = None
    P: float = None

    @property
    def n_cells_per_dim(self):
        return int(np.ceil(1.0 / self.eps - 1e-12))

    @property
    def n_cells(self):
        return self.n_cells_per_dim**self.d

    def a0(self, x):
        """Deterministic part a0(x); x has shape (N,) in 1D or (N,2) in 2D."""
        x = np.asarray(x, dtype=float)
        if self.name == "oned-multifreq":
            return 5.0 + 50.0 * np.sin(np.pi * x.reshape(-1) / self.eps) ** 2
        if self.name == "twod-multifreq":
            sx = np.sin(np.pi * x[..., 0] / self.eps) ** 2
            sy = np.sin(np.pi * x[..., 1] / self.eps) ** 2
            return 5.0 + 50.0 * sx * sy
        sx = np.sin(2 * np.pi * x[..., 0] / self.eps)
        sy = np.sin(2 * np.pi * x[..., 1] / self.eps)
        return (2 + self.P * sx) / (2 + self.P * sy) + (2 + sy) / (2 + self.P * sx)

    def b(self, x):
        """Perturbation profile b(x) (the per-cell matrix field is b * Id)."""
        x = np.asarray(x, dtype=float)
        if self.name == "oned-multifreq":
            s = np.sin(self.zeta * np.pi * x.reshape(-1) / self.eps) ** 2
            return self.kappa * s
        if self.name == "twod-multifreq":
            sx = np.sin(self.zeta * np.pi * x[..., 0] / self.eps) ** 2
            sy = np.sin(self.zeta * np.pi * x[..., 1] / self.eps) ** 2
            return self.kappa * sx * sy
        return self.a0(x)

    def a0_periodic(self, y):
        """a0 as a function of the fast variable y = x/eps (unit periodic cell)."""
        y = np.asarray(y, dtype=float)
        if self.name == "oned-multifreq":
            return 5.0 + 50.0 * np.sin(np.pi * y.reshape(-1)) ** 2
        if self.name == "twod-multifreq":
            s1 = np.sin(np.pi * y[..., 0]) ** 2
            s2 = np.sin(np.pi * y[..., 1]) ** 2
            return 5.0 + 50.0 * s1 * s2
        s1 = np.sin(2 * np.pi * y[..., 0])
        s2 = np.sin(2 * np.pi * y[..., 1])
        return (2 + self.P * s1) / (2 + self.P * s2) + (2 + s2) / (2 + self.P * s1)

    def b_periodic(self, y):
        """b as a function of the fast variable y = x/eps."""
        y = np.asarray(y, dtype=float)
        if self.name == "oned-multifreq":
            return self.kappa * np.sin(self.zeta * np.pi * y.reshape(-1)) ** 2
        if self.name == "twod-multifreq":
            s1 = np.sin(self.zeta * np.pi * y[..., 0]) ** 2
            s2 = np.sin(self.zeta * np.pi * y[..., 1]) ** 2
            return self.kappa * s1 * s2
        return self.a0_periodic(y)

    def cell_of(self, x):
        """Flat cell index of each point: k = ceil(x/eps) - 1 per dimension.

        C-order flattening in 2D: flat = kx * n + ky.
        """
        x = np.atleast_1d(np.asarray(x, dtype=float))
        n = self.n_cells_per_dim
        r = x / self.eps
        k = np.ceil(r - 1e-9).astype(np.int64) - 1
        np.clip(k, 0, n - 1, out=k)
        if self.d == 1:
            return k.reshape(-1)
        return k[..., 0] * n + k[..., 1]


@dataclass(frozen=True)
class Realization:
    """One random map: the cell values X_k of realization index m.

    X is flat in cell-rank order (1D: k; 2D: kx * n + ky) and each entry lies
    in [0, 1).
    """

    m: int
    seed: int
    X: np.ndarray

    def __post_init__(self):
        if np.any(self.X < 0) or np.any(self.X >= 1):
            raise ValueError("cell variables must lie in [0, 1)")


def preset(name, eps, eta, kappa=None, zeta=None, P=None):
    """Build a CoefficientSpec for one of the named families.

    kappa/zeta apply to the multi-frequency presets, P to twod-classical only;
    supplying a parameter the preset does not use is an error.
    """
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; expected one of {PRESETS}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    if not 0 <= eta <= 1:
        raise ValueError("eta must lie in [0, 1]")
    if name == "twod-classical":
        if kappa is not None or zeta is not None:
            raise ValueError("kappa/zeta are not parameters of twod-classical")
        P = 1.8 if P is None else float(P)
        if not 0 <= abs(P) < 2:
            raise ValueError("|P| < 2 required for positivity of the classical field")
        return CoefficientSpec("twod-classical", 2, eps, eta, P=P)
    if P is not None:
        raise ValueError(f"P is not a parameter of {name}")
    if kappa is None or zeta is None:
        raise ValueError(f"{name} requires kappa and zeta")
    if kappa < 0:
        raise ValueError("kappa must be nonnegative")
    d = 1 if name == "oned-multifreq" else 2
    return CoefficientSpec(name, d, eps, eta, kappa=float(kappa), zeta=float(zeta))


def sample(spec, x, realization=None):
    """Point values of the full coefficient a0 + eta * X_cell * b.

    With realization=None (or eta=0) this is the deterministic part.  Points
    must lie in the closed unit domain.
    """
    x = np.asarray(x, dtype=float)
    pts = np.atleast_2d(x) if spec.d == 2 else np.atleast_1d(x)
    if np.any(pts < -1e-12) or np.any(pts > 1 + 1e-12):
        raise ValueError("sample points must lie in the unit domain")
    vals = spec.a0(pts)
    if realization is not None and spec.eta != 0.0:
        cells = spec.cell_of(pts)
        vals = vals + spec.eta * realization.X[cells] * spec.b(pts)
    return vals


def ellipticity_bounds(spec, n_grid=4096):
    """Interval bounds [lo, hi] of the coefficient over X in {0, 1}.

    Evaluated on a dense grid over one periodic cell; the field is continuous
    and periodic, so grid extrema converge to the essential bounds.
    """
    if spec.d == 1:
        y = (np.arange(n_grid) + 0.5) / n_grid
    else:
        t = (np.arange(int(np.sqrt(n_grid)) + 1) + 0.5) / (int(np.sqrt(n_grid)) + 1)
        yy, xx = np.meshgrid(t, t)
        y = np.column_stack([xx.ravel(), yy.ravel()])
    a = spec.a0_periodic(y)
    full = a + spec.eta * spec.b_periodic(y)  # X = 1
    lo = min(a.min(), full.min())
    hi = max(a.max(), full.max())
    return float(lo), float(hi)


def control_quantity(spec, n_per_period=10**4):
    """K = ess-sup of b/a0, the relative size of the perturbation at X = 1.

    vT (X b) v <= K vT a0 v pointwise for X in [0,1], so K controls both the
    perturbed ellipticity (1 + eta K multiplicatively) and the conditioning of
    deterministic preconditioners.  Evaluated on a grid of at least
    n_per_period points per period and direction.
    """
    zeta = spec.zeta if spec.zeta is not None else 1.0
    n = int(max(n_per_period, n_per_period * zeta))
    if spec.d == 1:
        y = (np.arange(n) + 0.5) / n
        return float(np.max(spec.b_periodic(y) / spec.a0_periodic(y)))
    m = int(max(201, np.sqrt(n)))
    if m % 2 == 0:
        m += 1
    t = (np.arange(m) + 0.5) / m
    yy, xx = np.meshgrid(t, t)
    y = np.column_stack([xx.ravel(), yy.ravel()])
    return float(np.max(spec.b_periodic(y) / spec.a0_periodic(y)))


def draw_realizations(spec, M, seed, m_start=0):
    """The realizations m_start, ..., m_start+M-1 of the cell variables.

    Counter-based: realization m always produces the same cell map for a given
    seed, regardless of M, m_start, or previous draws.
    """
    if M < 1:
        raise ValueError("need at least one realization")
    out = []
    for m in range(m_start, m_start + M):
        gen = np.random.Generator(np.random.Philox(key=seed, counter=[0, 0, m, 0]))
        out.append(Realization(m=m, seed=seed, X=gen.random(spec.n_cells)))
    return out

"""Multiscale finite element laboratory for elliptic problems with
oscillatory, weakly random coefficients.

Subpackages cover structured meshes and oversampling patches (`mesh`),
coefficient families and their random perturbations (`coefficients`), P1
finite element kernels (`fem_core`), closed-form one-dimensional machinery
(`analytic_1d`), the oscillatory coarse basis and its reuse across random
realizations (`msfem`), periodic homogenization utilities (`homogenization`),
Monte Carlo error estimation (`montecarlo`), and the command line front end
(`cli`).
"""

__version__ = "0.1.0"

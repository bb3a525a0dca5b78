"""fracharm: spectral numerics for the mass-critical fractional Hartree
equation with angularly regular data.

Subpackages/modules:

* problem     — equation parameters, radial and sphere quadrature grids
* fields      — ModeField / GridField representations, conversions, snapshots
* transforms  — Littlewood-Paley, multipliers, Hankel/Bessel, Riesz potential
* norms       — exponent bookkeeping and all norm evaluations
* propagator  — the free evolution U(t) plus a direct-quadrature oracle
* solver      — nonlinear evolution, conservation, blowup diagnostics
* profiles    — constructive profile decomposition with certificates
* lab         — ensemble experiments for the dispersive estimates
* cli         — manifest-driven command line entry point
"""

__version__ = "0.1.0"

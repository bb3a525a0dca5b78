"""Harmonic-analysis toolbox: dyadic projections, radial Fourier multipliers,
per-mode Hankel transforms, angular derivatives, Riesz potentials, and the
Bessel-function quadrature identities the mode machinery rests on.

Per spherical-harmonic degree n the radial Fourier transform is a Hankel
transform of order nu(n) = n + (d-2)/2:

    H_nu[f](r) = r^(-(d-2)/2) * int_0^oo J_nu(r rho) f(rho) rho^(d/2) drho,

which is its own inverse.  With the package's Fourier convention the mode
profiles convert as

    physical -> frequency:   a = (2pi)^( d/2) (-i)^n H_nu[b]
    frequency -> physical:   b = (2pi)^(-d/2) ( i)^n H_nu[a].
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources

import numpy as np
from scipy.integrate import quad
from scipy.special import gammaln, jv

from .fields import FREQUENCY, PHYSICAL, GridField, ModeField, sample_at_points
from .problem import ProblemSpec, RadialGrid, _hat_weights_power_measure


class TruncationWarning(UserWarning):
    """A radial quadrature looks truncation-dominated at the grid boundary."""


# ---------------------------------------------------------------------------
# Littlewood-Paley bump
# ---------------------------------------------------------------------------

def _smoothstep(t):
    """C^2 quintic step: 0 below 0, 1 above 1, 6t^5 - 15t^4 + 10t^3 between."""
    t = np.clip(t, 0.0, 1.0)
    return t * t * t * (t * (6.0 * t - 15.0) + 10.0)


def lp_window(rho):
    """Monotone cutoff eta: 1 for rho <= 1, 0 for rho >= 2, C^2 in between."""
    rho = np.asarray(rho, dtype=float)
    out = np.ones_like(rho)
    pos = rho > 0
    out[pos] = 1.0 - _smoothstep(np.log2(rho[pos]))
    return out


def lp_bump(rho):
    """Radial bump chi supported in (1/2, 2) with sum_k chi(rho/2^k) = 1."""
    rho = np.asarray(rho, dtype=float)
    return lp_window(rho) - lp_window(2.0 * rho)


@dataclass(frozen=True)
class LPProjector:
    """Littlewood-Paley operator P_k: frequency restriction to the annulus
    2^(k-1) < |xi| <= 2^(k+1)."""

    k: int

    def symbol(self, rho):
        return lp_bump(np.asarray(rho, dtype=float) / 2.0 ** self.k)

    def __call__(self, f):
        return littlewood_paley(f, self.k)


def apply_radial_multiplier(f, symbol, zero_value: float | None = None):
    """Multiply a frequency-space field by a radial symbol m(|xi|).

    symbol may be a callable or an array matching the radial nodes (mode
    fields only).  A symbol that is singular (non-finite) at a node is
    rejected unless a regularization value for |xi| = 0 is declared.
    """
    if f.space != FREQUENCY:
        raise ValueError("multipliers act on frequency-space fields")
    if isinstance(f, ModeField):
        vals = symbol(f.spec.rho.nodes) if callable(symbol) else np.asarray(symbol, dtype=complex)
        if vals.shape != f.spec.rho.nodes.shape:
            raise ValueError("symbol array does not match the radial grid")
        if not np.all(np.isfinite(vals)):
            raise ValueError("symbol is singular on the radial grid and no "
                             "regularization was declared")
        return f.with_coeffs(f.coeffs * vals[None, :])
    if isinstance(f, GridField):
        r = f.spec.cart_radii(FREQUENCY)
        with np.errstate(divide="ignore", invalid="ignore"):
            vals = np.asarray(symbol(r), dtype=complex)
        bad = ~np.isfinite(vals)
        if bad.any():
            if zero_value is None or bad.sum() > 1 or not bad.flat[0]:
                raise ValueError("symbol is singular off the origin or no "
                                 "zero-node regularization was declared")
            vals.flat[0] = zero_value
        return f.with_values(f.values * vals)
    raise TypeError(f"cannot apply multiplier to {type(f).__name__}")


def littlewood_paley(f, k: int):
    """P_k f for a frequency-space field."""
    return apply_radial_multiplier(f, LPProjector(k).symbol)


def fractional_laplacian_symbol(alpha: float):
    return lambda rho: rho ** alpha


def angular_derivative(f: ModeField, s: float) -> ModeField:
    """D_sigma^s: multiply degree-n modes by (1 + n(n+d-2))^(s/2).

    Diagonal in the mode representation, hence commutes with every radial
    operation (rescale, P_k, propagator, Hankel transforms).
    """
    if not isinstance(f, ModeField):
        raise TypeError("angular derivative needs the mode representation")
    w = f.spec.angular_weights(s)
    return f.with_coeffs(f.coeffs * w[:, None])


# ---------------------------------------------------------------------------
# Bessel evaluation and the weighted L2 integral
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BesselEvaluator:
    """J_nu evaluator for nu >= 0 (|J_nu| <= 1 there).

    Backed by scipy's jv; the shipped 30-digit oracle table
    (data/bessel_oracle.csv) pins its accuracy in the selftest.
    """

    nu: float

    def __post_init__(self):
        if self.nu < 0:
            raise ValueError("order must be nonnegative")

    def __call__(self, x):
        return jv(self.nu, np.asarray(x, dtype=float))


def bessel_j(nu: float, x):
    return BesselEvaluator(nu)(x)


def bessel_table_rows(path=None):
    if path is None:
        src = resources.files("fracharm.data").joinpath("bessel_oracle.csv")
        text = src.read_text()
    else:
        with open(path) as fh:
            text = fh.read()
    rows = []
    for rec in csv.DictReader(text.splitlines()):
        rows.append((float(rec["nu"]), float(rec["x"]), float(rec["j_nu_x"])))
    if not rows:
        raise ValueError("bessel oracle table is empty")
    return rows


def validate_bessel_table(path=None, tol: float = 1e-10) -> float:
    """Max relative error of the evaluator against the oracle table.

    Raises if the table is unreadable or the error exceeds tol — the
    selftest surfaces this as the "bessel-oracle" check.
    """
    worst = 0.0
    for nu, x, ref in bessel_table_rows(path):
        got = float(jv(nu, x))
        err = abs(got - ref) / max(abs(ref), 1e-300)
        worst = max(worst, err)
    if worst > tol:
        raise ValueError(f"bessel-oracle check failed: max relative error {worst:.3e}")
    return worst


def bessel_weight_integral(nu: float, rho: float, d: int) -> float:
    """Closed form of  int_0^oo J_nu(r rho)^2 r^-(d-2) dr  for nu > (d-3)/2:

        (rho/2)^(d-3) Gamma(d-2) Gamma(nu - (d-3)/2)
        ---------------------------------------------.
        2 Gamma((d-1)/2)^2 Gamma(nu + (d-1)/2)
    """
    if d < 3:
        raise ValueError("dimension must be >= 3")
    if nu <= (d - 3) / 2:
        raise ValueError("integral diverges unless nu > (d-3)/2")
    if rho <= 0:
        raise ValueError("rho must be positive")
    log_val = ((d - 3) * math.log(rho / 2.0)
               + gammaln(d - 2) + gammaln(nu - (d - 3) / 2.0)
               - math.log(2.0) - 2.0 * gammaln((d - 1) / 2.0)
               - gammaln(nu + (d - 1) / 2.0))
    return float(math.exp(log_val))


def bessel_weight_integral_quad(nu: float, rho: float, d: int,
                                x_cut: float | None = None) -> float:
    """Quadrature cross-check of bessel_weight_integral.

    Substituting x = r*rho reduces the integral to
    rho^(d-3) * int_0^oo J_nu(x)^2 x^-(d-2) dx; the finite part is integrated
    adaptively and the tail beyond x_cut uses the two-term asymptotic
    J_nu(x)^2 ~ (1/(pi x)) (1 + sin(2x - nu*pi)), leaving an O(x_cut^-d)
    remainder.
    """
    if nu <= (d - 3) / 2:
        raise ValueError("integral diverges unless nu > (d-3)/2")
    if x_cut is None:
        x_cut = max(600.0, 40.0 * nu)
    integrand = lambda x: jv(nu, x) ** 2 * x ** (-(d - 2))
    lo = min(1.0, nu / 2.0 + 0.5)
    parts = []
    parts.append(quad(integrand, 0.0, lo, limit=200)[0])
    parts.append(quad(integrand, lo, x_cut, limit=4000)[0])
    tail = (x_cut ** (-(d - 2)) / (d - 2)
            + math.cos(2 * x_cut - nu * math.pi) * x_cut ** (-(d - 1)) / 2.0) / math.pi
    return float(rho ** (d - 3) * (sum(parts) + tail))


# ---------------------------------------------------------------------------
# per-mode Hankel transform
# ---------------------------------------------------------------------------

# The composite trapezoid on the geometric grid resolves the Bessel phase
# only while r*rho stays below ~2*pi/delta (delta = ln2/ppo, the log-node
# spacing); beyond that the quadrature aliases.  Transforms are therefore
# clipped at r <= ALIAS_SAFETY * 2*pi/(delta * rho_support): for profiles
# whose transform decays there (smooth data -- the declared domain of this
# quadrature) the discarded true values are negligible, while the aliased
# garbage would otherwise be amplified by the rho^(d/2) return weight.
ALIAS_SAFETY = 0.75


def alias_product_limit(grid: RadialGrid) -> float:
    """Largest reliable r*rho product for Hankel quadrature on this grid."""
    delta = math.log(2.0) / grid.points_per_octave
    return ALIAS_SAFETY * 2.0 * math.pi / delta


def _support_radius(grid: RadialGrid, profiles: np.ndarray,
                    rel: float = 1e-12) -> float | None:
    mags = np.max(np.abs(profiles), axis=0) if profiles.ndim == 2 else np.abs(profiles)
    peak = mags.max()
    if peak == 0.0:
        return None
    idx = np.nonzero(mags > rel * peak)[0]
    return float(grid.nodes[idx[-1]])


@lru_cache(maxsize=12)
def _hankel_matrix_cached(nu: float, d: int, rho_min: float, ppo: int,
                          n_nodes: int) -> np.ndarray:
    j = np.arange(n_nodes)
    nodes = rho_min * np.exp2(j / ppo)
    w_plain = _hat_weights_power_measure(nodes, d) / nodes ** (d - 1)
    kernel = jv(nu, np.outer(nodes, nodes))
    mat = (nodes ** (-(d - 2) / 2.0))[:, None] * kernel * (w_plain * nodes ** (d / 2.0))[None, :]
    mat.setflags(write=False)
    return mat


def hankel_matrix(grid: RadialGrid, nu: float) -> np.ndarray:
    return _hankel_matrix_cached(float(nu), grid.d, float(grid.nodes[0]),
                                 grid.points_per_octave, grid.n_nodes)


def hankel(profile: np.ndarray, grid: RadialGrid, nu: float,
           check_decay: bool = True) -> np.ndarray:
    """Self-inverse Hankel transform of one radial profile on the grid.

    Output nodes beyond the aliasing-validity radius (see ALIAS_SAFETY) are
    zeroed; there the quadrature cannot resolve the Bessel phase and the true
    transform of admissible (smooth, decaying) profiles is negligible.
    """
    if nu < 0:
        raise ValueError("order must be nonnegative")
    profile = np.asarray(profile)
    if check_decay and profile.size:
        peak = np.max(np.abs(profile))
        edge = max(np.max(np.abs(profile[-3:])), np.max(np.abs(profile[:3])))
        if peak > 0 and edge > 1e-8 * peak:
            warnings.warn("profile does not decay at the grid boundary; "
                          "the transform is truncation-dominated",
                          TruncationWarning, stacklevel=2)
    out = hankel_matrix(grid, nu) @ profile
    sup = _support_radius(grid, profile)
    if sup is not None:
        out[grid.nodes > alias_product_limit(grid) / sup] = 0.0
    return out


def _mode_orders(spec: ProblemSpec) -> np.ndarray:
    return spec.degrees + (spec.d - 2) / 2.0


def _mode_hankel(f: ModeField, prefactor_of_n, out_space: str) -> ModeField:
    spec = f.spec
    out = np.empty_like(f.coeffs)
    degrees = spec.degrees
    sup = _support_radius(spec.rho, f.coeffs)
    for n in range(spec.n_max + 1):
        rows = np.nonzero(degrees == n)[0]
        if not np.any(f.coeffs[rows]):
            out[rows] = 0.0
            continue
        mat = hankel_matrix(spec.rho, n + (spec.d - 2) / 2.0)
        out[rows] = prefactor_of_n(n) * (mat @ f.coeffs[rows].T).T
    if sup is not None:
        out[:, spec.rho.nodes > alias_product_limit(spec.rho) / sup] = 0.0
    return f.with_coeffs(out, out_space)


def mode_to_physical(f: ModeField) -> ModeField:
    """Frequency-space mode field -> physical radial profiles b_n^m(r)."""
    if f.space != FREQUENCY:
        return f
    pref = (2 * np.pi) ** (-f.spec.d / 2.0)
    return _mode_hankel(f, lambda n: pref * 1j ** n, PHYSICAL)


def mode_to_frequency(f: ModeField) -> ModeField:
    """Physical-space mode field -> frequency profiles a_n^m(rho)."""
    if f.space != PHYSICAL:
        return f
    pref = (2 * np.pi) ** (f.spec.d / 2.0)
    return _mode_hankel(f, lambda n: pref * (-1j) ** n, FREQUENCY)


# ---------------------------------------------------------------------------
# Riesz potential |x|^(-beta) * f
# ---------------------------------------------------------------------------

def riesz_constant(d: int, beta: float) -> float:
    """c_{d,beta} in  (|x|^-beta * f)^ = c_{d,beta} |xi|^(beta-d) f^."""
    return float(2.0 ** (d - beta) * math.pi ** (d / 2.0)
                 * math.exp(gammaln((d - beta) / 2.0) - gammaln(beta / 2.0)))


@lru_cache(maxsize=32)
def _unit_cell_average(beta: float) -> float:
    """Average of |y|^(beta-3) over the unit cube, via the exact radial
    integral  (1/beta) int_{S^2} (2 max_i |sigma_i|)^(-beta) dsigma / 1."""
    n_theta, n_phi = 96, 192
    x, w = np.polynomial.legendre.leggauss(n_theta)
    theta = np.arccos(x)
    phi = 2 * np.pi * (np.arange(n_phi) + 0.5) / n_phi
    th, ph = np.meshgrid(theta, phi, indexing="ij")
    sx = np.sin(th) * np.cos(ph)
    sy = np.sin(th) * np.sin(ph)
    sz = np.cos(th)
    m = np.maximum(np.abs(sx), np.maximum(np.abs(sy), np.abs(sz)))
    vals = (2.0 * m) ** (-beta)
    integral = float(np.sum(vals * w[:, None]) * (2 * np.pi / n_phi))
    return integral / beta


@lru_cache(maxsize=8)
def _freespace_kernel_hat(beta: float, extent: float, n: int) -> np.ndarray:
    """Analytic symbol of the smoothly truncated kernel on the 2x-padded grid.

    K_w(s) = |s|^(-beta) w(|s|) with w = 1 out to 1.55*L and C^2-rolled off
    by 1.9*L.  Its radial Fourier transform

        K_w^(rho) = 4 pi int_0^(1.9L) s^(2-beta) w(s) sinc(s rho / pi) ds

    is evaluated by a dense 1D Simpson table and interpolated onto the
    padded grid's |xi| values.  For data supported in the box the padded
    circular convolution with this kernel is the exact free-space potential
    (offsets needed never exceed the intact part of w), with no periodic
    images and no singular-cell quadrature error.
    """
    h = 2.0 * extent / n
    lo_cut, hi_cut = 1.55 * extent, 1.9 * extent
    rho_max = math.sqrt(3.0) * math.pi / h

    def window(s):
        out = np.ones_like(s)
        ramp = (s > lo_cut) & (s < hi_cut)
        tt = (s[ramp] - lo_cut) / (hi_cut - lo_cut)
        out[ramp] = 1.0 - tt ** 3 * (tt * (6.0 * tt - 15.0) + 10.0)
        out[s >= hi_cut] = 0.0
        return out

    def simpson_weights(n_pts, step):
        wts = np.ones(n_pts)
        wts[1:-1:2], wts[2:-1:2] = 4.0, 2.0
        return wts * (step / 3.0)

    # [0, 1]: substitute s = sigma^3 to kill the s^(2-beta) branch point
    n1 = 513
    sig = np.linspace(0.0, 1.0, n1)
    s1 = sig ** 3
    dens1 = 3.0 * sig ** (3.0 * (2.0 - beta) + 2.0) * window(s1)
    w1 = simpson_weights(n1, sig[1] - sig[0])
    # [1, hi_cut]: plain Simpson, resolving the fastest sinc oscillation
    ds = min(2 * math.pi / rho_max / 24.0, (hi_cut - 1.0) / 512.0)
    n2 = int(math.ceil((hi_cut - 1.0) / ds / 2.0)) * 2 + 1
    s2 = np.linspace(1.0, hi_cut, n2)
    dens2 = s2 ** (2.0 - beta) * window(s2)
    w2 = simpson_weights(n2, s2[1] - s2[0])

    s_all = np.concatenate([s1, s2])
    dens_w = np.concatenate([dens1 * w1, dens2 * w2])
    rho_tab = np.linspace(0.0, rho_max * 1.001, 8192)
    khat_tab = 4.0 * math.pi * (np.sinc(np.outer(rho_tab, s_all) / math.pi) @ dens_w)

    m = 2 * n
    xi = 2 * np.pi * np.fft.fftfreq(m, d=h)
    gx, gy, gz = np.meshgrid(xi, xi, xi, indexing="ij")
    rho = np.sqrt(gx * gx + gy * gy + gz * gz)
    out = np.interp(rho.ravel(), rho_tab, khat_tab).reshape(rho.shape)
    out = out.astype(complex)
    out.setflags(write=False)
    return out


def riesz_potential(f: GridField, beta: float, kernel: str = "freespace") -> GridField:
    """|x|^(-beta) * f for 0 < beta < d, physical in / physical out.

    kernel="freespace" (default): exact linear convolution with the sampled
    kernel via a 2x zero-padded FFT — the R^3 Hartree term, free of periodic
    images, positive kernel preserved exactly.

    kernel="periodic": the multiplier form, inverse FFT of
    c_{d,beta} |xi|^(beta-d) f^ with the xi = 0 node replaced by the exact
    cell average of the symbol over the zero cell.  This computes the
    potential of the box-periodized source (images wrap), which is what the
    plain symbol can express; kept for multiplier-algebra work.
    """
    d = f.spec.d
    if not (0.0 < beta < d):
        raise ValueError(f"riesz exponent must lie in (0, {d})")
    if f.space != PHYSICAL:
        raise ValueError("riesz potential acts on physical-space fields")
    if kernel == "periodic":
        c = riesz_constant(d, beta)
        _, dxi = f.spec.cart_xi_axes()
        zero_cell = c * dxi ** (beta - d) * _unit_cell_average(beta)
        fhat = f.to_frequency()
        vhat = apply_radial_multiplier(
            fhat, lambda r: c * r ** (beta - d), zero_value=zero_cell)
        return vhat.to_physical()
    if kernel != "freespace":
        raise ValueError("kernel must be 'freespace' or 'periodic'")
    n = f.spec.cart_points
    _, h = f.spec.cart_axes()
    khat = _freespace_kernel_hat(float(beta), float(f.spec.cart_extent), n)
    padded = np.zeros((2 * n,) * 3, complex)
    padded[:n, :n, :n] = f.values
    conv = np.fft.ifftn(np.fft.fftn(padded) * khat)
    return f.with_values(conv[:n, :n, :n])


def radial_riesz_oracle(profile, radii, beta: float, s_max: float = 40.0) -> np.ndarray:
    """1D quadrature oracle for (|x|^-beta * f)(r), f radial, d = 3:

        (2 pi / (r (2-beta))) int_0^oo s f(s) [ (r+s)^(2-beta) - |r-s|^(2-beta) ] ds,

    truncated at s_max (pick it beyond the decay of f).
    """
    if not (0 < beta < 3):
        raise ValueError("beta must lie in (0, 3)")
    out = np.empty(len(radii))
    for i, r in enumerate(radii):
        def integrand(s, r=r):
            return s * profile(s) * ((r + s) ** (2 - beta) - abs(r - s) ** (2 - beta))
        val = quad(integrand, 0.0, min(r, s_max), limit=400)[0]
        if r < s_max:
            val += quad(integrand, r, s_max, limit=400)[0]
        out[i] = 2 * math.pi * val / (r * (2 - beta))
    return out


# ---------------------------------------------------------------------------
# mixed L^r_rho L^p_sigma norms on grid fields, and the HLS ratio check
# ---------------------------------------------------------------------------

def grid_sphere_samples(g: GridField, radii: np.ndarray, method: str = "fourier",
                        pad: int = 2, order: int = 3) -> np.ndarray:
    """Field values on spheres |x| = r for each r, shape (n_radii, P)."""
    quad_s = g.spec.sphere_quadrature()
    pts = (np.asarray(radii)[:, None, None] * quad_s.points[None, :, :]).reshape(-1, 3)
    vals = sample_at_points(g, pts, method=method, pad=pad, order=order)
    return vals.reshape(len(radii), quad_s.n_points)


def default_physical_radii(spec: ProblemSpec, n_radii: int = 64) -> np.ndarray:
    x, h = spec.cart_axes()
    return np.geomspace(h / 2.0, spec.cart_extent, n_radii)


def mixed_rho_sigma_norm(g: GridField, r: float, p: float,
                         radii: np.ndarray | None = None,
                         method: str = "fourier", pad: int = 2,
                         order: int = 3) -> float:
    """|| ||g(rho .)||_{L^p_sigma} ||_{L^r_rho} with measure rho^(d-1) drho."""
    spec = g.spec
    if radii is None:
        radii = default_physical_radii(spec)
    samples = grid_sphere_samples(g, radii, method=method, pad=pad, order=order)
    w_s = spec.sphere_quadrature().weights
    if np.isinf(p):
        per_r = np.max(np.abs(samples), axis=1)
    else:
        per_r = (np.abs(samples) ** p @ w_s) ** (1.0 / p)
    wr = _hat_weights_on(radii, spec.d)
    if np.isinf(r):
        return float(np.max(per_r))
    return float((wr @ per_r ** r) ** (1.0 / r))


def _hat_weights_on(radii: np.ndarray, d: int) -> np.ndarray:
    return _hat_weights_power_measure(np.asarray(radii, dtype=float), d)


@dataclass
class HLSReport:
    beta: float
    r: float
    r_tilde: float
    p: float
    ratios: np.ndarray
    max_ratio: float
    mean_ratio: float
    skipped: int


def hls_check(fields, beta: float, r: float, r_tilde: float, p: float = 2.0,
              radii: np.ndarray | None = None) -> HLSReport:
    """Empirical fractional-integration ratios over an ensemble.

    Requires the scaling relation 1/r = 1/r_tilde - (d - beta)/d; returns the
    per-sample ratios ||K*f||_{L^r_rho L^p_sigma} / ||f||_{L^r~_rho L^p_sigma}
    (zero fields are skipped, never poisoning the statistics with NaNs).
    """
    d = fields[0].spec.d
    if abs(1.0 / r - (1.0 / r_tilde - (d - beta) / d)) > 1e-12:
        raise ValueError("exponent relation 1/r = 1/r~ - (d-beta)/d violated")
    ratios, skipped = [], 0
    for f in fields:
        denom = mixed_rho_sigma_norm(f, r_tilde, p, radii=radii)
        if denom == 0.0:
            skipped += 1
            continue
        num = mixed_rho_sigma_norm(riesz_potential(f, beta), r, p, radii=radii)
        ratios.append(num / denom)
    ratios = np.asarray(ratios)
    return HLSReport(beta=beta, r=r, r_tilde=r_tilde, p=p, ratios=ratios,
                     max_ratio=float(ratios.max()) if ratios.size else 0.0,
                     mean_ratio=float(ratios.mean()) if ratios.size else 0.0,
                     skipped=skipped)

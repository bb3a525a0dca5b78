"""Exponent bookkeeping and norm evaluation.

Mixed space-time norms are always

    ||u||_{L^q_t L^r_rho H^s_sigma}
      = ( int ( int ( sum_nm (1+n(n+d-2))^s |b_n^m(t,r)|^2 )^(r/2) r^(d-1) dr )^(q/r) dt )^(1/q)

with b_n^m(t, r) the physical-space radial mode profiles.  The key exponent
is the derivative-loss weight

    beta(alpha, q, r) = d/2 - d/r - alpha/q,

zero exactly on the alpha-admissible line alpha/q + d/r = d/2; the angular
gain gamma_hat is capped by (d-1)/2 - 1/q - (d-1)/r.

Time windows for the linear evolution follow the doubling rule: the window
grows until the last dyadic doubling changes the norm by < 1%, and the
estimated dispersive tail is reported rather than silently dropped.
Multi-octave spectra are evaluated block-by-block at unit scale (an exact
index shift on the dyadic-friendly grid — the norm is scale-invariant on the
admissible line) and combined in l2; blocks are reported.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field as dc_field
from fractions import Fraction
from importlib import resources

import numpy as np

from .fields import FREQUENCY, ModeField, rescale
from .problem import ProblemSpec
from .transforms import (alias_product_limit, angular_derivative, hankel_matrix,
                         littlewood_paley, lp_bump)


def _maybe_fraction(*vals):
    out = []
    for v in vals:
        if isinstance(v, (int, Fraction)):
            out.append(Fraction(v))
        elif isinstance(v, float) and float(v).is_integer():
            out.append(Fraction(int(v)))
        else:
            return None
        continue
    return out


def beta(alpha, q, r, d):
    """Derivative-loss weight d/2 - d/r - alpha/q (exact on rational input)."""
    fr = _maybe_fraction(alpha, q, r, d)
    if fr is not None and not any(math.isinf(float(v)) for v in (q, r)):
        a, qq, rr, dd = fr
        return Fraction(dd, 2) - Fraction(dd, 1) / rr - a / qq
    inv_q = 0.0 if math.isinf(q) else 1.0 / q
    inv_r = 0.0 if math.isinf(r) else 1.0 / r
    return d / 2.0 - d * inv_r - alpha * inv_q


def is_admissible(q, r, alpha, d, tol: float = 1e-12) -> bool:
    """alpha-admissible pair: alpha/q + d/r = d/2 with 2 <= q, r <= infinity."""
    if q < 2 or r < 2:
        return False
    inv_q = 0.0 if math.isinf(q) else 1.0 / q
    inv_r = 0.0 if math.isinf(r) else 1.0 / r
    return abs(alpha * inv_q + d * inv_r - d / 2.0) <= tol


def gamma_hat_max(q, r, d):
    """Supremum (strict) of the admissible angular gain for (q, r)."""
    inv_q = 0.0 if math.isinf(q) else 1.0 / q
    inv_r = 0.0 if math.isinf(r) else 1.0 / r
    return (d - 1) / 2.0 - inv_q - (d - 1) * inv_r


@dataclass(frozen=True)
class StrichartzSpec:
    """Exponent tuple (q, r, gamma_hat) for a weighted Strichartz estimate."""

    q: float
    r: float
    gamma_hat: float
    alpha: float
    d: int

    def beta(self):
        return beta(self.alpha, self.q, self.r, self.d)

    def is_valid(self) -> bool:
        q, r, d = self.q, self.r, self.d
        if q < 2 or r < 2 or math.isinf(r):
            return False
        inv_q = 0.0 if math.isinf(q) else 1.0 / q
        lo = d / 2.0 * (0.5 - 1.0 / r)
        hi = (d - 1) * (0.5 - 1.0 / r)
        if not (lo <= inv_q < hi):
            return False
        return self.gamma_hat < gamma_hat_max(q, r, d)

    def validate(self):
        if not self.is_valid():
            raise ValueError(
                f"invalid Strichartz spec (q={self.q}, r={self.r}, "
                f"gamma_hat={self.gamma_hat}): need d/2(1/2-1/r) <= 1/q < "
                f"(d-1)(1/2-1/r), r finite, and gamma_hat < "
                f"{gamma_hat_max(self.q, self.r, self.d):.6g}")
        return self


@dataclass(frozen=True)
class NumbersPack:
    """The exponent pack driving local well-posedness and blowup norms:
    (q0, r0) = (3, 6d/(3d-2alpha)), gamma1 = (d^2-alpha*d+alpha)/(4d),
    gamma2 = (d-1+gamma1)/3, gamma_tilde = gamma2 - gamma1 + gamma."""

    d: int
    alpha: float
    gamma: float

    @property
    def q0(self) -> float:
        return 3.0

    @property
    def r0(self) -> float:
        return 6.0 * self.d / (3.0 * self.d - 2.0 * self.alpha)

    @property
    def gamma1(self) -> float:
        return (self.d ** 2 - self.alpha * self.d + self.alpha) / (4.0 * self.d)

    @property
    def gamma2(self) -> float:
        return (self.d - 1.0 + self.gamma1) / 3.0

    @property
    def gamma_tilde(self) -> float:
        return self.gamma2 - self.gamma1 + self.gamma

    def __post_init__(self):
        if not (self.gamma2 > self.gamma1 > 0):
            raise ValueError("exponent pack violates gamma2 > gamma1 > 0")
        if not is_admissible(self.q0, self.r0, self.alpha, self.d, tol=1e-9):
            raise ValueError("(q0, r0) failed the admissibility identity")


def norm_L2rho_Hgamma(f: ModeField, gamma: float) -> float:
    """The data norm: sqrt( sum_nm (1+n(n+d-2))^gamma int |a|^2 rho^(d-1) drho )."""
    return f.sobolev_norm(gamma)


# ---------------------------------------------------------------------------
# mixed norms of explicit time series
# ---------------------------------------------------------------------------

def _uniform_dt(times) -> float:
    times = np.asarray(times, dtype=float)
    if times.size < 2:
        raise ValueError("need at least two time samples")
    dts = np.diff(times)
    if not np.allclose(dts, dts[0], rtol=1e-9, atol=0):
        raise ValueError("mixed norms require a uniform time grid")
    return float(dts[0])


def _radial_lr_norm(spec: ProblemSpec, sigma_sq: np.ndarray, r: float) -> float:
    """L^r_rho of sqrt(sigma_sq) given per-node squared L^2_sigma values."""
    if math.isinf(r):
        return float(np.sqrt(sigma_sq.max())) if sigma_sq.size else 0.0
    return float((spec.rho.weights @ sigma_sq ** (r / 2.0)) ** (1.0 / r))


def _time_lq_norm(values: np.ndarray, dt: float, q: float) -> float:
    if math.isinf(q):
        return float(values.max()) if values.size else 0.0
    return float(np.trapezoid(values ** q, dx=dt) ** (1.0 / q))


@dataclass
class MixedNormResult:
    value: float
    tail_fraction: float
    window: tuple | None
    dt: float | None
    blocks: list = dc_field(default_factory=list)
    flags: list = dc_field(default_factory=list)

    def to_json_dict(self):
        return {"value": self.value, "tail_estimate": self.tail_fraction,
                "window": list(self.window) if self.window else None,
                "dt": self.dt, "blocks": self.blocks, "flags": self.flags}


def mixed_norm(states, times, q: float, r: float, s: float) -> MixedNormResult:
    """L^q_t L^r_rho H^s_sigma of a sampled trajectory of ModeFields.

    States must be physical-space mode fields (frequency ones are converted)
    on a uniform time grid covering the declared window.
    """
    from .transforms import mode_to_physical
    dt = _uniform_dt(times)
    vals = np.empty(len(states))
    for i, st in enumerate(states):
        if not isinstance(st, ModeField):
            raise TypeError("mixed_norm expects ModeField states")
        st = mode_to_physical(st)
        w = st.spec.angular_weights(s) ** 2
        sigma_sq = w @ (np.abs(st.coeffs) ** 2)
        vals[i] = _radial_lr_norm(st.spec, sigma_sq, r)
    value = _time_lq_norm(vals, dt, q)
    return MixedNormResult(value=value, tail_fraction=0.0,
                           window=(float(times[0]), float(times[-1])), dt=dt)


# ---------------------------------------------------------------------------
# linear-evolution mixed norm with the window-doubling rule
# ---------------------------------------------------------------------------

def _support_columns(f: ModeField, rel: float = 1e-10):
    mags = np.max(np.abs(f.coeffs), axis=0)
    peak = mags.max()
    if peak == 0.0:
        return None
    return np.nonzero(mags > rel * peak)[0]


def _evolution_sigma_sq(f: ModeField, times: np.ndarray, s: float,
                        cols: np.ndarray, rows: np.ndarray,
                        chunk: int = 512) -> np.ndarray:
    """sum_nm w_nm |b_n^m(t, r)|^2 on rows x times, for U(t)f, f in frequency."""
    spec = f.spec
    nodes = spec.rho.nodes
    w = spec.angular_weights(s) ** 2
    pref = (2 * np.pi) ** (-spec.d / 2.0)
    out = np.zeros((rows.size, times.size))
    degrees = spec.degrees
    groups = []
    for n in range(spec.n_max + 1):
        mode_rows = np.nonzero(degrees == n)[0]
        a = f.coeffs[mode_rows][:, cols]
        if np.any(a):
            mat = hankel_matrix(spec.rho, n + (spec.d - 2) / 2.0)[np.ix_(rows, cols)]
            groups.append((w[mode_rows[0]], a, mat))
    for lo in range(0, times.size, chunk):
        tt = times[lo:lo + chunk]
        phases = np.exp(1j * np.outer(nodes[cols] ** spec.alpha, tt))    # (S, B)
        for weight, a, mat in groups:
            stack = a[:, :, None] * phases[None, :, :]                   # (m, S, B)
            m_count = stack.shape[0]
            prof = mat @ stack.transpose(1, 0, 2).reshape(cols.size, m_count * tt.size)
            prof = prof.reshape(rows.size, m_count, tt.size)
            out[:, lo:lo + chunk] += weight * np.sum(np.abs(pref * prof) ** 2, axis=1)
    return out


def _narrowband_linear_norm(f: ModeField, q, r, s, t_res, tol,
                            window_cap_mult) -> MixedNormResult:
    spec = f.spec
    cols = _support_columns(f)
    if cols is None:
        return MixedNormResult(0.0, 0.0, (0.0, 0.0), None)
    nodes = spec.rho.nodes
    rho_lo, rho_hi = nodes[cols[0]], nodes[cols[-1]]
    x_cut = alias_product_limit(spec.rho)
    rows = np.nonzero(nodes <= x_cut / rho_hi)[0]

    dt = t_res / rho_hi ** spec.alpha
    # the top shell's dispersive front hits the aliasing radius at t_alias
    t_alias = 0.7 * x_cut / (spec.alpha * rho_hi ** spec.alpha)
    # dispersive time of the slowest shell sets the first window
    t0 = max(16 * dt, 2.0 / (spec.alpha * rho_lo ** spec.alpha))
    t_cap = min(window_cap_mult * t0, max(t_alias, 4 * t0))

    flags = []
    times = np.array([0.0])
    g = np.sqrt(_evolution_sigma_sq(f, times, s, cols, rows))
    vals = {0.0: _radial_lr_norm_rows(spec, g[:, 0], r, rows)}

    def eval_range(lo, hi):
        ts = np.arange(math.ceil(lo / dt), math.floor(hi / dt) + 1) * dt
        ts = ts[np.abs(ts) > 1e-300]
        for sign in (1.0, -1.0):
            tt = sign * ts
            if tt.size == 0:
                continue
            sig = _evolution_sigma_sq(f, tt, s, cols, rows)
            for j, t in enumerate(tt):
                vals[float(t)] = _radial_lr_norm_rows(spec, sig[:, j], r, rows)

    T = t0
    eval_range(0.0, T)
    prev = _assemble_lq(vals, dt, q)
    while True:
        if 2 * T > t_cap:
            if 2 * T <= 4 * t_cap:
                flags.append("window capped before the 1% doubling rule settled")
            break
        eval_range(T, 2 * T)
        T *= 2
        cur = _assemble_lq(vals, dt, q)
        if prev > 0 and abs(cur - prev) / max(cur, 1e-300) < tol:
            prev = cur
            break
        prev = cur

    value = _assemble_lq(vals, dt, q)
    tail = _tail_estimate(vals, dt, q, T, value)
    return MixedNormResult(value=value, tail_fraction=tail,
                           window=(-T, T), dt=dt, flags=flags)


def _radial_lr_norm_rows(spec, sigma_sq_rows, r, rows):
    if math.isinf(r):
        return float(np.sqrt(sigma_sq_rows.max())) if sigma_sq_rows.size else 0.0
    w = spec.rho.weights[rows]
    return float((w @ sigma_sq_rows ** (r / 2.0)) ** (1.0 / r))


def _assemble_lq(vals: dict, dt: float, q: float) -> float:
    ts = np.array(sorted(vals))
    g = np.array([vals[t] for t in ts])
    return _time_lq_norm(g, dt, q)


def _tail_estimate(vals, dt, q, T, value) -> float:
    """Power-law extrapolation of the last window octave, as a fraction."""
    if value <= 0 or math.isinf(q):
        return 0.0
    ts = np.array(sorted(t for t in vals if t > T / 2))
    if ts.size < 4:
        return 0.0
    g = np.array([vals[t] for t in ts])
    gmax = max(vals.values())
    if g.max() < 1e-13 * gmax:
        return 0.0
    good = g > 0
    if good.sum() < 4:
        return 0.0
    slope, icept = np.polyfit(np.log(ts[good]), np.log(g[good]), 1)
    a = -slope
    if a * q <= 1.0:
        return math.inf
    c = math.exp(icept)
    tail_int = 2.0 * (c ** q) * T ** (1.0 - a * q) / (a * q - 1.0)
    return float(tail_int / max(value ** q, 1e-300))


def linear_strichartz_norm(f: ModeField, q, r, s, t_res: float = 0.2,
                           tol: float = 0.01, max_direct_octaves: float = 4.0,
                           window_cap_mult: float = 64.0) -> MixedNormResult:
    """|| D_sigma^s U(.) f ||_{L^q_t L^r_rho L^2_sigma} for frequency data f.

    Narrow-band spectra are evaluated directly on one uniform time grid with
    the doubling-window rule.  Wider spectra are split into dyadic-octave
    blocks, each rescaled to unit scale (exact index shift) and evaluated
    there, then recombined: value = (sum_k (2^(k beta) v_k)^2)^(1/2), the
    frequency-localized almost-orthogonal combination.  On the admissible
    line beta = 0 and the combination is scale-faithful.
    """
    if f.space != FREQUENCY:
        from .transforms import mode_to_frequency
        f = mode_to_frequency(f)
    spec = f.spec
    cols = _support_columns(f)
    if cols is None:
        return MixedNormResult(0.0, 0.0, (0.0, 0.0), None)
    nodes = spec.rho.nodes
    octaves = math.log2(nodes[cols[-1]] / nodes[cols[0]])
    b = float(beta(spec.alpha, q, r, spec.d))

    if octaves <= max_direct_octaves:
        # center the band at unit scale for a uniform time resolution rule
        k_c = round(math.log2(math.sqrt(nodes[cols[0]] * nodes[cols[-1]])))
        g = rescale(f, 2.0 ** k_c)
        res = _narrowband_linear_norm(g, q, r, s, t_res, tol, window_cap_mult)
        res.value *= 2.0 ** (k_c * b)
        res.blocks = [{"k": k_c, "value": res.value, "direct": True}]
        return res

    # dyadic-block split: P_k f for k covering the support
    k_lo = math.floor(math.log2(nodes[cols[0]]))
    k_hi = math.ceil(math.log2(nodes[cols[-1]]))
    blocks, total_sq, tail_fracs, flags = [], 0.0, [], []
    for k in range(k_lo - 1, k_hi + 2):
        pk = littlewood_paley(f, k)
        if _support_columns(pk) is None:
            continue
        g = rescale(pk, 2.0 ** k)
        res = _narrowband_linear_norm(g, q, r, s, t_res, tol, window_cap_mult)
        v = res.value * 2.0 ** (k * b)
        total_sq += v * v
        tail_fracs.append(res.tail_fraction)
        flags.extend(res.flags)
        blocks.append({"k": k, "value": v, "window": res.window, "direct": False})
    value = math.sqrt(total_sq)
    tail = max(tail_fracs) if tail_fracs else 0.0
    return MixedNormResult(value=value, tail_fraction=tail, window=None,
                           dt=None, blocks=blocks,
                           flags=flags + ["dyadic-block l2 aggregation"])


# ---------------------------------------------------------------------------
# refined functional and its frozen calibration
# ---------------------------------------------------------------------------

def _sphere_abs_p_integral(f: ModeField, p: float) -> np.ndarray:
    """int_{S^(d-1)} |f(rho sigma)|^p dsigma per radial node."""
    spec = f.spec
    nonradial = np.any(f.coeffs[1:]) if spec.n_modes > 1 else False
    if spec.d != 3:
        if nonradial:
            raise ValueError("pointwise |f|^p needs d=3 sphere tables for "
                             "non-radial fields")
        omega = 2.0 * math.pi ** (spec.d / 2.0) / math.gamma(spec.d / 2.0)
        return np.abs(f.coeffs[0] / math.sqrt(omega)) ** p * omega
    ylm = spec.harmonics_table()
    w = spec.sphere_quadrature().weights
    vals = f.coeffs.T @ ylm            # (n_rho, P)
    return np.abs(vals) ** p @ w


def refined_functional(f: ModeField, p: float) -> float:
    """sup_k 2^(k d (1/2 - 1/p)) || chi_k f^ ||_p over the occupied dyadic range."""
    if not (1.0 <= p < 2.0):
        raise ValueError("p must lie in [1, 2)")
    if f.space != FREQUENCY:
        raise ValueError("the refined functional reads the frequency side")
    spec = f.spec
    cols = _support_columns(f)
    if cols is None:
        return 0.0
    nodes = spec.rho.nodes
    sphere_p = _sphere_abs_p_integral(f, p)
    k_lo = math.floor(math.log2(nodes[cols[0]]))
    k_hi = math.ceil(math.log2(nodes[cols[-1]]))
    best = 0.0
    for k in range(k_lo - 1, k_hi + 2):
        chi = lp_bump(nodes / 2.0 ** k)
        lp_p = float(spec.rho.weights @ (chi ** p * sphere_p)) ** (1.0 / p)
        best = max(best, 2.0 ** (k * spec.d * (0.5 - 1.0 / p)) * lp_p)
    return best


CALIBRATION_RESOURCE = "refined_calibration.json"


def load_refined_calibration(path=None) -> dict:
    if path is None:
        src = resources.files("fracharm.data").joinpath(CALIBRATION_RESOURCE)
        return json.loads(src.read_text())
    with open(path) as fh:
        return json.load(fh)


def fit_refined_calibration(lhs_values, functional_values, l2_values,
                            p_used: float, theta_grid=None,
                            spread_cap: float = 3.0) -> dict:
    """Freeze (theta, constant) for LHS <= C * G^theta * M^(1-theta).

    Chooses the largest theta on the grid whose calibration max/median ratio
    stays below spread_cap, then sets C to the max ratio with 20% headroom.
    A surrogate for the existential (theta, p) of the refinement; flagged as
    such wherever it is reported.
    """
    lhs = np.asarray(lhs_values, float)
    G = np.asarray(functional_values, float)
    M = np.asarray(l2_values, float)
    keep = (lhs > 0) & (G > 0) & (M > 0)
    lhs, G, M = lhs[keep], G[keep], M[keep]
    if theta_grid is None:
        theta_grid = np.round(np.arange(0.05, 0.96, 0.05), 2)
    chosen = None
    for theta in sorted(theta_grid):
        ratios = lhs / (G ** theta * M ** (1.0 - theta))
        spread = ratios.max() / np.median(ratios)
        if spread <= spread_cap:
            chosen = (float(theta), float(ratios.max()), float(spread))
    if chosen is None:
        theta = float(min(theta_grid))
        ratios = lhs / (G ** theta * M ** (1.0 - theta))
        chosen = (theta, float(ratios.max()), float(ratios.max() / np.median(ratios)))
    theta, cmax, spread = chosen
    return {"p": p_used, "theta": theta, "constant": cmax * 1.2,
            "calibration_max_ratio": cmax, "calibration_spread": spread,
            "surrogate": True}

"""Field representations and conversions between them.

Conventions (fixed throughout the package):

* Fourier transform  f^(xi) = int e^{-i x.xi} f(x) dx,  inverse with (2pi)^-d.
* ModeField holds complex radial coefficient arrays per spherical-harmonic
  mode, flat-indexed (n, m) with n <= n_max:

      space="frequency":  f^(rho*sigma) = sum a_n^m(rho) Y_n^m(sigma)
      space="physical":   f(r*sigma)    = sum b_n^m(r)   Y_n^m(sigma)

  with orthonormal Y_n^m, so   ||f||_{L2}^2 = sum_nm int |b|^2 r^(d-1) dr
  and, by Plancherel,          ||f||_{L2}^2 = (2pi)^-d sum_nm int |a|^2 rho^(d-1) drho.
  The (2pi)^-d is the orthonormality constant left open by the norm
  conventions; it is fixed here once and used everywhere.
* GridField holds complex values on the uniform d=3 box; frequency-space
  values live on the numpy fft-layout grid and equal h^3 * fftn(physical),
  which makes the discrete Plancherel identity exact to round-off.

All field values are immutable after construction; operations return new
fields.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.ndimage import map_coordinates

from .problem import ProblemSpec, RadialGrid, SpecMismatchError, harmonics_at_directions

SNAPSHOT_VERSION = 1
_SENTINEL = b"---BLOB---\n"

PHYSICAL = "physical"
FREQUENCY = "frequency"


class SnapshotError(ValueError):
    """Snapshot file problem; .code is a stable machine-readable string."""

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


def _check_space(space: str):
    if space not in (PHYSICAL, FREQUENCY):
        raise ValueError(f"space tag must be 'physical' or 'frequency', got {space!r}")


@dataclass(frozen=True)
class ModeField:
    """Complex radial coefficients a[n][m][j], flat mode axis first."""

    spec: ProblemSpec
    coeffs: np.ndarray       # (n_modes, n_rho) complex
    space: str

    def __post_init__(self):
        _check_space(self.space)
        c = np.ascontiguousarray(self.coeffs, dtype=complex)
        if c.shape != (self.spec.n_modes, self.spec.rho.n_nodes):
            raise ValueError(
                f"coefficient array shape {c.shape} does not match spec "
                f"({self.spec.n_modes} modes x {self.spec.rho.n_nodes} nodes)")
        if not np.all(np.isfinite(c)):
            raise ValueError("coefficients must be finite")
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)

    def with_coeffs(self, coeffs, space=None) -> "ModeField":
        return ModeField(self.spec, coeffs, space or self.space)

    def l2_norm_sq(self) -> float:
        s = float(np.real(self.spec.rho.integrate(np.abs(self.coeffs) ** 2).sum()))
        if self.space == FREQUENCY:
            s /= (2 * np.pi) ** self.spec.d
        return s

    def l2_norm(self) -> float:
        return math.sqrt(self.l2_norm_sq())

    def sobolev_norm_sq(self, gamma: float) -> float:
        """Squared L2_rho H^gamma_sigma norm (mode-diagonal angular weight)."""
        w = self.spec.angular_weights(gamma) ** 2
        per_mode = np.real(self.spec.rho.integrate(np.abs(self.coeffs) ** 2))
        s = float(w @ per_mode)
        if self.space == FREQUENCY:
            s /= (2 * np.pi) ** self.spec.d
        return s

    def sobolev_norm(self, gamma: float) -> float:
        return math.sqrt(self.sobolev_norm_sq(gamma))

    def degree_energy_fractions(self) -> np.ndarray:
        """Fraction of squared L2 norm carried by each degree n."""
        per_mode = np.real(self.spec.rho.integrate(np.abs(self.coeffs) ** 2))
        per_degree = np.zeros(self.spec.n_max + 1)
        np.add.at(per_degree, self.spec.degrees, per_mode)
        total = per_degree.sum()
        return per_degree / total if total > 0 else per_degree

    def __add__(self, other: "ModeField") -> "ModeField":
        self.spec.require_same(other.spec)
        if self.space != other.space:
            raise ValueError("cannot add fields in different spaces")
        return self.with_coeffs(self.coeffs + other.coeffs)

    def __sub__(self, other: "ModeField") -> "ModeField":
        self.spec.require_same(other.spec)
        if self.space != other.space:
            raise ValueError("cannot add fields in different spaces")
        return self.with_coeffs(self.coeffs - other.coeffs)

    def __mul__(self, scalar) -> "ModeField":
        return self.with_coeffs(self.coeffs * scalar)

    __rmul__ = __mul__


@dataclass(frozen=True)
class GridField:
    """Complex field on the uniform d=3 Cartesian box."""

    spec: ProblemSpec
    values: np.ndarray       # (N, N, N) complex
    space: str

    def __post_init__(self):
        _check_space(self.space)
        if self.spec.cart_points is None:
            raise ValueError("spec has no Cartesian grid")
        v = np.ascontiguousarray(self.values, dtype=complex)
        n = self.spec.cart_points
        if v.shape != (n, n, n):
            raise ValueError(f"grid shape {v.shape}, expected {(n, n, n)}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def with_values(self, values, space=None) -> "GridField":
        return GridField(self.spec, values, space or self.space)

    def _cell_volume(self) -> float:
        _, h = self.spec.cart_axes()
        if self.space == PHYSICAL:
            return h ** 3
        _, dxi = self.spec.cart_xi_axes()
        return dxi ** 3 / (2 * np.pi) ** 3

    def l2_norm_sq(self) -> float:
        return float(np.sum(np.abs(self.values) ** 2) * self._cell_volume())

    def l2_norm(self) -> float:
        return math.sqrt(self.l2_norm_sq())

    def to_frequency(self) -> "GridField":
        if self.space == FREQUENCY:
            return self
        _, h = self.spec.cart_axes()
        return self.with_values(np.fft.fftn(self.values) * h ** 3, FREQUENCY)

    def to_physical(self) -> "GridField":
        if self.space == PHYSICAL:
            return self
        _, h = self.spec.cart_axes()
        return self.with_values(np.fft.ifftn(self.values) / h ** 3, PHYSICAL)

    def __add__(self, other: "GridField") -> "GridField":
        self.spec.require_same(other.spec)
        if self.space != other.space:
            raise ValueError("cannot add fields in different spaces")
        return self.with_values(self.values + other.values)

    def __sub__(self, other: "GridField") -> "GridField":
        self.spec.require_same(other.spec)
        if self.space != other.space:
            raise ValueError("cannot add fields in different spaces")
        return self.with_values(self.values - other.values)

    def __mul__(self, scalar) -> "GridField":
        return self.with_values(self.values * scalar)

    __rmul__ = __mul__


def zero_mode_field(spec: ProblemSpec, space: str = FREQUENCY) -> ModeField:
    return ModeField(spec, np.zeros((spec.n_modes, spec.rho.n_nodes), complex), space)


def mode_field_from_profiles(spec: ProblemSpec, profiles: dict, space: str = FREQUENCY) -> ModeField:
    """Build a ModeField from {flat_mode_index: radial_values_or_callable}."""
    c = np.zeros((spec.n_modes, spec.rho.n_nodes), complex)
    for idx, prof in profiles.items():
        c[idx] = prof(spec.rho.nodes) if callable(prof) else np.asarray(prof)
    return ModeField(spec, c, space)


def mode_index(spec: ProblemSpec, n: int, m: int = 0) -> int:
    """Flat index of mode (n, m) for d=3 (m in -n..n)."""
    if spec.d != 3:
        raise ValueError("(n, m) indexing is d=3 only; use flat indices for d > 3")
    if not (0 <= n <= spec.n_max and -n <= m <= n):
        raise ValueError("mode out of range")
    return n * n + (m + n)


# ---------------------------------------------------------------------------
# grid <-> sphere sampling
# ---------------------------------------------------------------------------

def _upsampled_values(g: GridField, pad: int) -> tuple[np.ndarray, float, float]:
    """Fourier-upsampled values plus (origin, spacing) of the fine grid.

    For physical fields, zero-pads the spectrum (band-limited upsampling);
    for frequency fields, zero-pads the physical box (finer xi sampling).
    Returned array is in plain (monotone-axis) layout.
    """
    n = g.spec.cart_points
    if g.space == PHYSICAL:
        spec_vals = np.fft.fftshift(np.fft.fftn(g.values))
        big = np.zeros((n * pad,) * 3, complex)
        lo = (n * pad - n) // 2
        big[lo:lo + n, lo:lo + n, lo:lo + n] = spec_vals
        fine = np.fft.ifftn(np.fft.ifftshift(big)) * pad ** 3
        _, h = g.spec.cart_axes()
        return fine, -g.spec.cart_extent, h / pad
    # frequency field: go to the physical box, embed in a pad^3-larger box
    _, h = g.spec.cart_axes()
    u = np.fft.ifftn(g.values) / h ** 3
    u = np.fft.fftshift(u)                      # monotone x layout
    big = np.zeros((n * pad,) * 3, complex)
    lo = (n * pad - n) // 2
    big[lo:lo + n, lo:lo + n, lo:lo + n] = u
    uhat = np.fft.fftn(np.fft.ifftshift(big)) * h ** 3
    uhat = np.fft.fftshift(uhat)
    _, dxi = g.spec.cart_xi_axes()
    dxi_fine = dxi / pad
    origin = -(n * pad // 2) * dxi_fine
    return uhat, origin, dxi_fine


def sample_at_points(g: GridField, points: np.ndarray, method: str = "fourier",
                     pad: int = 4, order: int = 5) -> np.ndarray:
    """Evaluate the grid field at arbitrary points of its own space.

    method="exact"   direct non-uniform DFT sum over the grid (the oracle),
    method="fourier" zero-padded FFT + spline of the given order,
    method="linear"  trilinear interpolation on the raw grid.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if method == "exact":
        if g.space == PHYSICAL:
            gh = g.to_frequency()
            xi, _ = g.spec.cart_xi_axes()
            phases = [np.exp(1j * np.outer(points[:, ax], xi)) for ax in range(3)]
            vol = gh._cell_volume()
            out = np.einsum("px,py,pz,xyz->p", phases[0], phases[1], phases[2],
                            gh.values, optimize=True) * vol
            return out
        # frequency values are the trig polynomial h^3 sum u_j e^{-i xi.x_j}
        gp = g.to_physical()
        x, h = g.spec.cart_axes()
        phases = [np.exp(-1j * np.outer(points[:, ax], x)) for ax in range(3)]
        return np.einsum("px,py,pz,xyz->p", phases[0], phases[1], phases[2],
                         gp.values, optimize=True) * h ** 3
    if method == "fourier":
        vals, origin, step = _upsampled_values(g, pad)
    elif method == "linear":
        order = 1
        if g.space == PHYSICAL:
            vals = g.values
            origin, step = -g.spec.cart_extent, g.spec.cart_axes()[1]
        else:
            vals = np.fft.fftshift(g.values)
            _, step = g.spec.cart_xi_axes()
            origin = -(g.spec.cart_points // 2) * step
    else:
        raise ValueError(f"unknown sampling method {method!r}")
    idx = (points.T - origin) / step
    return map_coordinates(vals, idx, order=order, mode="grid-wrap", prefilter=True)


def analyze(g: GridField, n_degree: int | None = None, method: str = "fourier",
            pad: int = 4, order: int = 5, return_residual: bool = False):
    """Project a grid field onto spherical-harmonic modes per radial node.

    Samples g on spheres |xi| = rho_j (sphere quadrature points of the spec)
    and integrates against conj(Y_n^m).  Nodes beyond the box's inscribed
    Nyquist sphere (or box half-width, for physical fields) get zero
    coefficients.  Returns a ModeField with the same space tag; with
    return_residual=True also returns the relative L2 mass the truncation
    n <= n_degree failed to capture on the sampled spheres.
    """
    spec = g.spec
    if spec.d != 3:
        raise ValueError("analyze requires d = 3")
    if n_degree is None:
        n_degree = spec.n_max
    if n_degree > spec.n_max:
        raise ValueError(
            f"degree overflow: requested n={n_degree} exceeds the sphere "
            f"sampling resolution of this spec (n_max={spec.n_max})")
    quad = spec.sphere_quadrature()
    ylm = spec.harmonics_table()
    nodes = spec.rho.nodes
    if g.space == FREQUENCY:
        cap = np.max(np.abs(spec.cart_xi_axes()[0]))
    else:
        cap = spec.cart_extent
    live = nodes <= cap
    pts = (nodes[live, None, None] * quad.points[None, :, :]).reshape(-1, 3)
    samples = sample_at_points(g, pts, method=method, pad=pad, order=order)
    samples = samples.reshape(live.sum(), quad.n_points)

    proj = (quad.weights * np.conj(ylm))        # (n_modes, P)
    coeffs = np.zeros((spec.n_modes, nodes.size), complex)
    coeffs[:, live] = proj @ samples.T
    keep = spec.degrees <= n_degree
    resid_num = 0.0
    resid_den = 0.0
    if return_residual:
        recon = ylm[keep].T @ coeffs[keep][:, live]   # (P, live) -> transpose
        diff = samples - recon.T
        wr = spec.rho.weights[live]
        resid_num = float(wr @ (np.abs(diff) ** 2 @ quad.weights))
        resid_den = float(wr @ (np.abs(samples) ** 2 @ quad.weights))
    coeffs[~keep] = 0.0
    out = ModeField(spec, coeffs, g.space)
    if return_residual:
        residual = math.sqrt(resid_num / resid_den) if resid_den > 0 else 0.0
        return out, residual
    return out


def synthesize(m: ModeField) -> GridField:
    """Paint sum_nm a_n^m(|xi|) Y_n^m(xi/|xi|) onto the Cartesian grid."""
    spec = m.spec
    if spec.d != 3:
        raise ValueError("synthesize requires d = 3")
    if spec.cart_points is None:
        raise ValueError("spec has no Cartesian grid")
    r = spec.cart_radii(m.space)
    n = spec.cart_points
    flat_r = r.ravel()
    safe_r = np.where(flat_r > 0, flat_r, 1.0)
    if m.space == PHYSICAL:
        ax, _ = spec.cart_axes()
    else:
        ax, _ = spec.cart_xi_axes()
    gx, gy, gz = np.meshgrid(ax, ax, ax, indexing="ij")
    dirs = np.stack([gx.ravel() / safe_r, gy.ravel() / safe_r, gz.ravel() / safe_r], -1)
    dirs[flat_r == 0] = [0.0, 0.0, 1.0]

    log_nodes = np.log(spec.rho.nodes)
    inside = (flat_r >= spec.rho.nodes[0]) & (flat_r <= spec.rho.nodes[-1])
    ylm_dirs = harmonics_at_directions(spec.n_max, dirs[inside])
    out = np.zeros(flat_r.size, complex)
    logs = np.log(flat_r[inside])
    for i in range(spec.n_modes):
        prof = m.coeffs[i]
        if not np.any(prof):
            continue
        sp_re = CubicSpline(log_nodes, prof.real)
        sp_im = CubicSpline(log_nodes, prof.imag)
        out[inside] += (sp_re(logs) + 1j * sp_im(logs)) * ylm_dirs[i]
    return GridField(spec, out.reshape(n, n, n), m.space)


# ---------------------------------------------------------------------------
# rescaling  f -> h^(-d/2) f(./h)
# ---------------------------------------------------------------------------

def _shift_profiles(coeffs: np.ndarray, shift: int, amp: float) -> np.ndarray:
    out = np.zeros_like(coeffs)
    if shift == 0:
        out[:] = coeffs
    elif shift > 0:
        out[:, shift:] = coeffs[:, :-shift]
    else:
        out[:, :shift] = coeffs[:, -shift:]
    return out * amp


def _resample_profiles(coeffs: np.ndarray, grid: RadialGrid, log_shift: float,
                       amp: float) -> np.ndarray:
    log_nodes = np.log(grid.nodes)
    targets = log_nodes + log_shift
    inside = (targets >= log_nodes[0]) & (targets <= log_nodes[-1])
    out = np.zeros_like(coeffs)
    for i in range(coeffs.shape[0]):
        if not np.any(coeffs[i]):
            continue
        sp_re = CubicSpline(log_nodes, coeffs[i].real)
        sp_im = CubicSpline(log_nodes, coeffs[i].imag)
        out[i, inside] = (sp_re(targets[inside]) + 1j * sp_im(targets[inside])) * amp
    return out


def rescale(f, h: float):
    """L2-invariant dilation f -> h^(-d/2) f(./h) (physical-space statement).

    For frequency-space data the equivalent dual action h^(d/2) f^(h xi) is
    applied, so rescale commutes with the representation change.  On the
    dyadic-friendly radial grid, h = 2^(k/ppo) is an exact index shift.
    """
    if h <= 0:
        raise ValueError("scale factor must be positive")
    d = f.spec.d
    if isinstance(f, ModeField):
        grid = f.spec.rho
        m = grid.shift_count(h)
        if f.space == PHYSICAL:
            # b'(r) = h^(-d/2) b(r/h): content moves up the grid for h > 1
            amp = h ** (-d / 2)
            if m is not None:
                return f.with_coeffs(_shift_profiles(f.coeffs, m, amp))
            return f.with_coeffs(_resample_profiles(f.coeffs, grid, -math.log(h), amp))
        # a'(rho) = h^(d/2) a(h rho): content moves down the grid for h > 1
        amp = h ** (d / 2)
        if m is not None:
            return f.with_coeffs(_shift_profiles(f.coeffs, -m, amp))
        return f.with_coeffs(_resample_profiles(f.coeffs, grid, math.log(h), amp))
    if isinstance(f, GridField):
        if f.space != PHYSICAL:
            raise ValueError("grid rescale operates on physical-space fields")
        n = f.spec.cart_points
        x, dx = f.spec.cart_axes()
        idx_1d = (x / h + f.spec.cart_extent) / dx
        gi, gj, gk = np.meshgrid(idx_1d, idx_1d, idx_1d, indexing="ij")
        vals = map_coordinates(f.values, [gi, gj, gk], order=3,
                               mode="constant", cval=0.0)
        return f.with_values(vals * h ** (-d / 2))
    raise TypeError(f"cannot rescale {type(f).__name__}")


# ---------------------------------------------------------------------------
# snapshot persistence
# ---------------------------------------------------------------------------

def _spec_header(spec: ProblemSpec) -> dict:
    h = {
        "d": spec.d, "alpha": spec.alpha, "lambda": spec.lam,
        "gamma": spec.gamma, "n_max": spec.n_max,
        "rho_min": float(spec.rho.nodes[0]), "rho_max": float(spec.rho.nodes[-1]),
        "points_per_octave": spec.rho.points_per_octave,
    }
    if spec.cart_extent is not None:
        h["cart_extent"] = spec.cart_extent
        h["cart_points"] = spec.cart_points
    return h


def spec_from_header(h: dict) -> ProblemSpec:
    grid = RadialGrid.geometric(h["d"], h["rho_min"], h["rho_max"],
                                h["points_per_octave"])
    return ProblemSpec(d=h["d"], alpha=h["alpha"], lam=h["lambda"],
                       gamma=h["gamma"], rho=grid, n_max=h["n_max"],
                       cart_extent=h.get("cart_extent"),
                       cart_points=h.get("cart_points"))


def store(f, path, time: float = 0.0):
    """Write a FieldSnapshot: JSON header line, sentinel, raw float64 payload."""
    if isinstance(f, ModeField):
        rep, shape, payload = "mode", list(f.coeffs.shape), f.coeffs
    elif isinstance(f, GridField):
        rep, shape, payload = "grid", list(f.values.shape), f.values
    else:
        raise TypeError(f"cannot store {type(f).__name__}")
    header = {
        "version": SNAPSHOT_VERSION,
        "representation": rep,
        "space": f.space,
        "shape": shape,
        "time": time,
        **_spec_header(f.spec),
    }
    blob = np.ascontiguousarray(payload, dtype="<c16").tobytes()
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        fh.write(_SENTINEL)
        fh.write(blob)


def load(path, with_time: bool = False):
    """Read a FieldSnapshot written by store(); bit-exact round trip."""
    with open(path, "rb") as fh:
        raw = fh.read()
    nl = raw.find(b"\n")
    if nl < 0 or raw[nl + 1:nl + 1 + len(_SENTINEL)] != _SENTINEL:
        raise SnapshotError("malformed header", "missing header line or sentinel")
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise SnapshotError("malformed header", f"header is not valid JSON: {exc}")
    if not isinstance(header, dict) or "version" not in header:
        raise SnapshotError("malformed header", "header missing required keys")
    if header["version"] != SNAPSHOT_VERSION:
        raise SnapshotError("version mismatch",
                            f"snapshot version {header['version']}, "
                            f"expected {SNAPSHOT_VERSION}")
    blob = raw[nl + 1 + len(_SENTINEL):]
    shape = tuple(header["shape"])
    expected = int(np.prod(shape)) * 16
    if len(blob) != expected:
        raise SnapshotError("payload length mismatch",
                            f"payload holds {len(blob)} bytes, expected {expected}")
    values = np.frombuffer(blob, dtype="<c16").reshape(shape).astype(complex)
    spec = spec_from_header(header)     # raises "alpha out of range" etc.
    if header["representation"] == "mode":
        field = ModeField(spec, values, header["space"])
    elif header["representation"] == "grid":
        field = GridField(spec, values, header["space"])
    else:
        raise SnapshotError("malformed header",
                            f"unknown representation {header['representation']!r}")
    if with_time:
        return field, float(header.get("time", 0.0))
    return field

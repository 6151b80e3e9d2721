"""Online stage at the serving IRS controller.

Before service the controller estimates the user->IRS array phases in
every block from the user's ordinary uplink pilots. Once the estimates
enter the coverage region it fits a straight-line trajectory to the last
``n0`` estimates and then only predicts the phases for later blocks.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateGeometryError, EstimationError
from .geometry import AnglePair, angles_from_position, upa_steering
from .search import SearchSettings, two_step_maximize


@dataclass
class TrainingReflections:
    v_matrix: np.ndarray  # tau x M

    def __post_init__(self):
        self.v_matrix = np.atleast_2d(np.asarray(self.v_matrix, dtype=complex))
        if self.v_matrix.shape[0] < 4:
            raise ValueError("at least 4 pilot slots are needed to resolve four unknowns")
        if np.any(np.abs(np.abs(self.v_matrix) - 1.0) > 1e-9):
            raise ValueError("training reflections must have unit modulus")

    @property
    def tau(self):
        return self.v_matrix.shape[0]


def training_stride(tau, m):
    """Row stride closest to ``m / tau`` that is coprime with ``m``.

    A stride sharing a factor with ``m`` can land every row on a pattern
    that only varies along one panel axis (for example multiples of
    ``m_y``), which leaves the other phase unidentifiable.
    """
    target = max(m / tau, 1.0)
    best = None
    for cand in range(1, m + 1):
        if math.gcd(cand, m) == 1 and (best is None or abs(cand - target) < abs(best - target)):
            best = cand
    return best


def online_training_matrix(tau, m, service_nu=None):
    """``tau`` uniformly spaced (mod ``m``) rows of the M x M DFT, each applied on top of ``service_nu``."""
    rows = (np.arange(tau) * training_stride(tau, m)) % m
    v = np.exp(-2j * np.pi * np.outer(rows, np.arange(m)) / m)
    if service_nu is not None:
        v = v * np.asarray(service_nu)[None, :]
    return TrainingReflections(v)


@dataclass
class BlockEstimate:
    angles: AnglePair
    gain: complex
    d_c: complex
    objective: float
    low_confidence: bool = False


@dataclass
class TrackEntry:
    n: int
    vartheta: float
    psi: float
    gain: complex = 0j
    d_c: complex = 0j


@dataclass
class AngleTrack:
    entries: list = field(default_factory=list)

    def append(self, entry):
        if self.entries and entry.n <= self.entries[-1].n:
            raise ValueError("block indices must be strictly increasing")
        self.entries.append(entry)

    def last(self, count):
        return AngleTrack(list(self.entries[-count:]))

    @property
    def n0(self):
        return len(self.entries)

    def __len__(self):
        return len(self.entries)


@dataclass
class TrajectoryEstimate:
    x_ini: float
    y_ini: float
    z_ini: float
    v: float
    block_duration: float
    n0: int


@dataclass(frozen=True)
class CoverageRegion:
    entry_x: float

    @classmethod
    def for_spacing(cls, d_irs):
        """Region entered half an inter-IRS distance before the panel centre."""
        return cls(-d_irs / 2.0)


def simulate_user_pilots(true_b1_bar, true_angles, true_abar, d_c, v_matrix, noise_power, seed, geom):
    """``y = a_bar V diag(b1_bar) u(vartheta, psi) + d_C 1 + z`` with unit pilots."""
    v_matrix = np.asarray(v_matrix)
    y = true_abar * (v_matrix @ (np.asarray(true_b1_bar) * upa_steering(true_angles, geom))) + d_c
    if noise_power > 0:
        rng = np.random.default_rng(seed)
        y = y + np.sqrt(noise_power / 2) * (rng.standard_normal(y.shape) + 1j * rng.standard_normal(y.shape))
    return y


class _PilotObjective:
    """``|eta^H y_bar|^2 / ||eta||^2`` with the mean (direct-link) component projected out."""

    def __init__(self, y, v_matrix, b1_bar, geom):
        self.geom = geom
        a = np.asarray(v_matrix) * np.asarray(b1_bar)[None, :]
        self.a = a
        self.pa = a - a.mean(axis=0, keepdims=True)
        y = np.asarray(y, dtype=complex)
        self.y = y
        self.y_bar = y - y.mean()

    def __call__(self, x):
        # phases repeat with period 2, so aliases outside the feasible disk score the same
        if x[0] ** 2 + x[1] ** 2 > self.geom.max_phase**2 + 1e-12:
            return -np.inf
        u = upa_steering(AnglePair(x[0], x[1]), self.geom)
        eta = self.pa @ u
        den = np.real(np.vdot(eta, eta))
        if den <= 0:
            return 0.0
        return abs(np.vdot(eta, self.y_bar)) ** 2 / den

    def grid(self, vt, ps):
        t = self.pa.reshape(-1, self.geom.m_x, self.geom.m_y)
        ex = np.exp(1j * np.pi * np.outer(np.arange(self.geom.m_x), vt))
        ey = np.exp(1j * np.pi * np.outer(np.arange(self.geom.m_y), ps))
        eta = np.einsum("tpq,pi,qj->tij", t, ex, ey, optimize=True)
        num = np.abs(np.einsum("tij,t->ij", eta.conj(), self.y_bar)) ** 2
        den = np.sum(np.abs(eta) ** 2, axis=0)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(den > 0, num / den, 0.0)


def _grid_peaks(vals):
    """Mask of cells not below any of their 8 neighbours (ties kept)."""
    pad = np.pad(vals, 1, constant_values=-np.inf)
    rows, cols = vals.shape
    peak = np.isfinite(vals)
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            if di or dj:
                peak &= vals >= pad[1 + di : 1 + di + rows, 1 + dj : 1 + dj + cols]
    if not peak.any():
        peak = np.isfinite(vals) if np.isfinite(vals).any() else np.ones_like(vals, dtype=bool)
    return peak


def estimate_block_angles(y, refl, b1_bar, geom, search=SearchSettings()):
    """Per-block ML estimate of the user->IRS array phases, gain and direct term."""
    v_matrix = refl.v_matrix if isinstance(refl, TrainingReflections) else np.asarray(refl)
    if v_matrix.shape[0] < 4:
        raise ValueError("at least 4 pilot slots are required")
    obj = _PilotObjective(y, v_matrix, b1_bar, geom)
    lim = geom.max_phase
    axis = np.linspace(-lim, lim, search.grid_size)
    vals = obj.grid(axis, axis)
    vt_g, ps_g = np.meshgrid(axis, axis, indexing="ij")
    inside = vt_g**2 + ps_g**2 <= lim**2 + 1e-12
    vals = np.where(inside, vals, -np.inf)
    finite = vals[inside]
    flat = finite.size == 0 or np.ptp(finite) <= 1e-12 * max(np.max(np.abs(finite)), 1e-300)
    # seed the ascent from distinct peaks only, not from cells of the same lobe;
    # grid quantization costs a lobe far less than half its height, so weaker
    # peaks cannot win
    peaks = _grid_peaks(vals)
    if not flat:
        peaks &= vals >= 0.5 * np.max(finite)
    points = np.column_stack([vt_g[peaks], ps_g[peaks]])
    x, f, _, _ = two_step_maximize(obj, points, vals[peaks], [search.fd_step] * 2, search)
    angles = AnglePair(float(x[0]), float(x[1]))
    u = upa_steering(angles, geom)
    eta = obj.pa @ u
    den = np.real(np.vdot(eta, eta))
    gain = np.vdot(eta, obj.y_bar) / den if den > 0 else 0j
    d_c = np.mean(obj.y - gain * (obj.a @ u))
    return BlockEstimate(angles, complex(gain), complex(d_c), float(f), bool(flat))


def implied_x(angles, lane_z, spacing_ratio=0.5):
    """x-coordinate implied by the phases given the user's distance from the panel plane."""
    two_s = 2.0 * spacing_ratio
    rho2 = angles.vartheta**2 + angles.psi**2
    sin_theta2 = 1.0 - rho2 / two_s**2
    if sin_theta2 <= 0:
        return np.copysign(np.inf, angles.vartheta)
    r = lane_z / np.sqrt(sin_theta2)
    return angles.vartheta * r / two_s


def coverage_check(angles, lane_z, region, spacing_ratio=0.5):
    """True once the implied x-position has reached the region entry (closed boundary)."""
    return bool(implied_x(angles, lane_z, spacing_ratio) >= region.entry_x - 1e-9)


def ratio_from_angles(vartheta, psi, spacing_ratio=0.5):
    """``z / x`` recovered from a pair of array phases.

    ``tan(theta) * sqrt(1 + tan(phi)^2)`` with the sign of ``x`` (that of
    ``vartheta``) restored.
    """
    vartheta = np.asarray(vartheta, dtype=float)
    psi = np.asarray(psi, dtype=float)
    rho2 = vartheta**2 + psi**2
    tan_theta2 = np.maximum((2.0 * spacing_ratio) ** 2 / rho2 - 1.0, 0.0)
    return np.sign(vartheta) * np.sqrt(tan_theta2 * (1.0 + (psi / vartheta) ** 2))


def fit_trajectory(track, geom, block_duration, search=SearchSettings(), x_range=(-8.0, 0.0), v_range=(1.0, 70.0), z_prior=None, outlier_mads=6.0):
    """Fit ``(x_ini, y_ini, z_ini, v)`` of a straight pass along x to an angle track.

    Angles alone fix the trajectory only up to a common scale of
    ``(x_ini, y_ini, z_ini, v)``; predicted angles do not depend on it.
    ``z_prior`` (the known lane distance) pins the scale when given.
    Blocks whose range ratio lies more than ``outlier_mads`` scaled MADs
    off the fitted curve are dropped and the fit repeated.
    """
    entries = list(track.entries)
    if len(entries) < 3:
        raise EstimationError(f"need at least 3 tracked blocks, got {len(entries)}")
    n_first = entries[0].n
    offs = np.array([e.n - n_first for e in entries], dtype=float)
    vt = np.array([e.vartheta for e in entries])
    ps = np.array([e.psi for e in entries])
    keep = vt != 0.0
    if keep.sum() < 3:
        raise EstimationError("fewer than 3 blocks with a non-zero x-axis phase")
    offs, vt, ps = offs[keep], vt[keep], ps[keep]
    # sidelobe picks can fill a third of a track; screen them against a
    # line fit that tolerates up to half the points being wrong
    keep = _line_inliers(offs, vt, outlier_mads) & _line_inliers(offs, ps, outlier_mads)
    if keep.sum() >= 3:
        offs, vt, ps = offs[keep], vt[keep], ps[keep]
    r_hat = ratio_from_angles(vt, ps, geom.spacing_ratio)
    if not np.all(np.isfinite(r_hat)):
        raise EstimationError("non-finite range ratio in track")
    if np.ptp(r_hat) <= 1e-9 * max(np.max(np.abs(r_hat)), 1e-300):
        raise DegenerateGeometryError("angle track is constant; position and speed are not identifiable")
    t_b = block_duration
    x_ini, v, z_ini = _fit_ratio_track(offs, r_hat, t_b, search, x_range, v_range)
    # a single wrong block shifts the slope badly over a short track; drop
    # blocks far off the fitted curve and refit
    for _ in range(3):
        resid = np.abs(r_hat - z_ini / (x_ini + offs * v * t_b))
        mad = np.median(np.abs(resid - np.median(resid)))
        keep = resid <= np.median(resid) + outlier_mads * 1.4826 * max(mad, 1e-6 * np.mean(np.abs(r_hat)))
        if keep.all() or keep.sum() < 3:
            break
        offs, vt, ps, r_hat = offs[keep], vt[keep], ps[keep], r_hat[keep]
        x_ini, v, z_ini = _fit_ratio_track(offs, r_hat, t_b, search, x_range, v_range)
    x_n = x_ini + offs * v * t_b
    y_ini = float(np.mean(ps * x_n / vt))
    if z_prior is not None and z_ini != 0:
        s = z_prior / z_ini
        x_ini, y_ini, z_ini, v = x_ini * s, y_ini * s, z_ini * s, v * s
    # index the fit so that block n0 (the last tracked one) is n = 0
    n0 = int(entries[-1].n - n_first + 1)
    return TrajectoryEstimate(x_ini, y_ini, z_ini, v, t_b, n0)


def _line_inliers(t, y, n_mads):
    """Points within ``n_mads`` scaled MADs of a repeated-median line through ``(t, y)``."""
    if len(t) < 3:
        return np.ones(len(t), dtype=bool)
    dt = t[None, :] - t[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        pair = (y[None, :] - y[:, None]) / dt
    np.fill_diagonal(pair, np.nan)
    slope = np.median(np.nanmedian(pair, axis=1))
    resid = y - slope * t
    resid = np.abs(resid - np.median(resid))
    scale = 1.4826 * np.median(resid)
    return resid <= n_mads * max(scale, 1e-6 * max(np.max(np.abs(y)), 1e-300))


def _fit_ratio_track(offs, r_hat, t_b, search, x_range, v_range):
    """Grid plus ascent over ``(x_ini, v)``; ``z`` follows in closed form."""

    def objective(p):
        pos = p[0] + offs * p[1] * t_b
        if np.any(pos >= 0) or p[1] <= 0:
            return -np.inf
        e = 1.0 / pos
        return float((e @ r_hat) ** 2 / (e @ e))

    xs = np.linspace(x_range[0], x_range[1], search.grid_size)
    vs = np.linspace(v_range[0], v_range[1], search.grid_size)
    xg, vg = np.meshgrid(xs, vs, indexing="ij")
    pos = xg[..., None] + offs[None, None, :] * vg[..., None] * t_b
    with np.errstate(divide="ignore", invalid="ignore"):
        e = 1.0 / pos
        vals = (e @ r_hat) ** 2 / np.sum(e * e, axis=-1)
    vals = np.where(np.all(pos < 0, axis=-1), vals, -np.inf)
    points = np.column_stack([xg.ravel(), vg.ravel()])
    steps = [search.fd_step * max(abs(x_range[1] - x_range[0]), 1.0), search.fd_step * max(abs(v_range[1] - v_range[0]), 1.0)]
    best, _, _, _ = two_step_maximize(objective, points, vals.ravel(), steps, search)
    x_ini, v = float(best[0]), float(best[1])
    e = 1.0 / (x_ini + offs * v * t_b)
    return x_ini, v, float(e @ r_hat / (e @ e))


def position_at(traj, n):
    return traj.x_ini + (n + traj.n0 - 1) * traj.v * traj.block_duration


def predict_angles(traj, n, geom):
    """Array phases at block ``n`` (n = 1 is the first served block)."""
    return angles_from_position(position_at(traj, n), traj.y_ini, traj.z_ini, geom.spacing_ratio)

"""Unit-modulus reflection design and link metrics.

The solver is element-wise alternating optimization (AO) for
``max ||A nu + c||^2`` subject to ``|nu_m| = 1``. With ``h = A nu + c`` and
``t_m = a_m^H h - ||a_m||^2 nu_m``, the best phase for element ``m`` with
all others fixed is ``t_m / |t_m|``. Each update is exact, so the objective
never decreases.
"""

from dataclasses import dataclass, field

import numpy as np

from .channel import effective_channel
from .geometry import upa_steering

_TINY = 1e-300


@dataclass(frozen=True)
class AoSettings:
    max_iterations: int = 500
    rel_tolerance: float = 1e-8
    n_random_restarts: int = 8
    restart_seed: int = 0

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not self.rel_tolerance > 0:
            raise ValueError("rel_tolerance must be positive")
        if self.n_random_restarts < 0:
            raise ValueError("n_random_restarts must be >= 0")


@dataclass
class AoResult:
    coefficients: np.ndarray
    objective: float
    history: list = field(default_factory=list)
    restart_objectives: np.ndarray = None

    def __iter__(self):
        # unpacks as (coefficients, objective)
        return iter((self.coefficients, self.objective))


def check_unit_modulus(nu, atol=1e-9):
    nu = np.asarray(nu)
    if np.any(np.abs(np.abs(nu) - 1.0) > atol):
        raise ValueError("reflection coefficients must have unit modulus")
    return nu


def dominant_phase_init(a_matrix):
    """Phases of the dominant right singular vector, with element 0 phase fixed at zero."""
    a_matrix = np.asarray(a_matrix)
    if a_matrix.ndim == 2:
        _, _, vh = np.linalg.svd(a_matrix, full_matrices=False)
        v = vh[0].conj()
    else:
        _, _, vh = np.linalg.svd(a_matrix, full_matrices=False)
        v = vh[:, 0, :].conj()
    v = _unit(v)
    ref = v[..., :1]
    return v * ref.conj()


def _unit(z):
    mag = np.abs(z)
    out = np.ones_like(z, dtype=complex)
    ok = mag > _TINY
    out[ok] = z[ok] / mag[ok]
    return out


def ao_sweeps(a_matrix, affine, nu0, max_iterations=500, rel_tolerance=1e-8):
    """Run AO sweeps on a batch of problems.

    ``a_matrix`` is ``(K, M)`` (shared) or ``(B, K, M)``; ``affine`` is
    ``None``, ``(K,)`` or ``(B, K)``; ``nu0`` is ``(B, M)``. Problems that
    have converged drop out of later sweeps. Returns the final ``(B, M)``
    reflections, their objectives and the per-sweep objective history
    (list of ``(B,)`` arrays, starting with the initial value).
    """
    a = np.asarray(a_matrix, dtype=complex)
    nu = np.array(nu0, dtype=complex, copy=True)
    n_batch, m = nu.shape
    shared = a.ndim == 2
    if shared:
        a = np.broadcast_to(a, (1,) + a.shape)
    c = None
    if affine is not None:
        c = np.broadcast_to(np.asarray(affine, dtype=complex), (n_batch, a.shape[1]))

    obj = np.sum(np.abs(_residual(a, c, nu, shared)) ** 2, axis=1)
    history = [obj.copy()]
    active = np.arange(n_batch)
    for _ in range(max_iterations):
        sub_a = a if shared else a[active]
        sub_c = None if c is None else c[active]
        nu[active] = _sweep(sub_a, sub_c, nu[active], shared)
        new_obj = np.sum(np.abs(_residual(sub_a, sub_c, nu[active], shared)) ** 2, axis=1)
        # round-off can make a converged objective dip by a few ulps
        new_obj = np.maximum(new_obj, obj[active])
        gain = new_obj - obj[active]
        obj[active] = new_obj
        history.append(obj.copy())
        active = active[gain > rel_tolerance * np.maximum(new_obj, _TINY)]
        if active.size == 0:
            break
    return nu, obj, history


def _residual(a, c, nu, shared):
    h = nu @ a[0].T if shared else np.einsum("bkm,bm->bk", a, nu)
    return h if c is None else h + c


def _sweep(a, c, nu, shared):
    h = _residual(a, c, nu, shared)
    a_conj = a.conj()
    col_norm = np.sum(np.abs(a) ** 2, axis=1)  # (1 or B, M)
    for k in range(nu.shape[1]):
        if shared:
            col = a[0, :, k]
            t = h @ a_conj[0, :, k] - col_norm[0, k] * nu[:, k]
        else:
            col = a[:, :, k]
            t = np.einsum("bk,bk->b", a_conj[:, :, k], h) - col_norm[:, k] * nu[:, k]
        mag = np.abs(t)
        upd = mag > _TINY
        new = np.where(upd, t / np.where(upd, mag, 1.0), nu[:, k])
        delta = new - nu[:, k]
        if shared:
            h += np.outer(delta, col)
        else:
            h += delta[:, None] * col
        nu[:, k] = new
    if c is not None:
        # closed-form common-phase step: align A nu with the affine term
        h0 = h - c
        rot = _unit(np.einsum("bk,bk->b", h0.conj(), c))
        nu *= rot[:, None]
    return nu


def ao_maximize_quadratic(a_matrix, affine=None, settings=AoSettings(), init=None):
    """Locally maximize ``||A nu + c||^2`` over unit-modulus ``nu``.

    Restart 0 starts from the phases of the dominant right singular vector
    of ``A`` (or ``init`` when given); the remaining restarts use uniform
    random phases from ``settings.restart_seed``. The best restart is
    returned. Without an affine term the result is normalized so that
    element 0 is real positive.
    """
    a = np.atleast_2d(np.asarray(a_matrix, dtype=complex))
    if not np.all(np.isfinite(a)):
        raise ValueError("a_matrix has non-finite entries")
    if a.shape[0] < 1:
        raise ValueError("a_matrix needs at least one row")
    c = None
    if affine is not None:
        c = np.asarray(affine, dtype=complex).reshape(-1)
        if c.shape[0] != a.shape[0]:
            raise ValueError("affine term length must match rows of a_matrix")
        if not np.all(np.isfinite(c)):
            raise ValueError("affine term has non-finite entries")
        if not np.any(c):
            c = None
    m = a.shape[1]
    starts = [dominant_phase_init(a) if init is None else check_unit_modulus(np.asarray(init, dtype=complex))]
    if settings.n_random_restarts:
        rng = np.random.default_rng(settings.restart_seed)
        starts.extend(np.exp(2j * np.pi * rng.random((settings.n_random_restarts, m))))
    nu, obj, history = ao_sweeps(a, c, np.array(starts), settings.max_iterations, settings.rel_tolerance)
    best = int(np.argmax(obj))
    out = nu[best]
    if c is None:
        out = out * np.conj(out[0]) / abs(out[0])
    return AoResult(out, float(obj[best]), [float(h[best]) for h in history], obj)


def initial_beamforming(g_hat, settings=AoSettings()):
    """Off-line reflection maximizing ``||G nu||^2``."""
    return ao_maximize_quadratic(g_hat, None, settings).coefficients


def realtime_reflection(nu_bar, angles, geom):
    """Per-block reflection ``diag(conj(u(vartheta, psi))) nu_bar``."""
    return np.conj(upa_steering(angles, geom)) * np.asarray(nu_bar)


def effective_gain(q_cascaded, nu, d):
    h = effective_channel(q_cascaded, nu, d)
    return float(np.real(np.vdot(h, h)))


def achievable_rate(gamma, noise_power_normalized, tau, symbols_per_block, gap_db=9.0):
    """Rate in bit/s/Hz with training overhead and an SNR gap; MRC SNR is ``gamma / sigma^2``."""
    if tau < 0 or tau > symbols_per_block:
        raise ValueError(f"overhead {tau} outside [0, {symbols_per_block}]")
    gap = 10.0 ** (gap_db / 10.0)
    return (1.0 - tau / symbols_per_block) * np.log2(1.0 + np.asarray(gamma) / (noise_power_normalized * gap))

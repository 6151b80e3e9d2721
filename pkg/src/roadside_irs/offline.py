"""Off-line estimation of the scaled IRS->BS channel and the scaled
IRS->controller channel from controller pilots received at the BS.

Step 1 (two symmetric controllers C0/C2): de-cascade with ``V^+``, find the
per-path BS/IRS array phases by successive matching pursuit with Newton
refinement, fit gains by least squares, then average the IRS phases of the
two runs to cancel the controller-side offsets. Step 2 (serving controller
C1): LS estimate of the cascaded channel followed by element-wise division
by the reconstructed IRS->BS channel.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np

from .channel import MultipathChannel, PathParams, assemble_multipath
from .errors import EstimationError, SingularMatrixError
from .geometry import AnglePair, UpaGeometry, ula_steering, upa_steering, wrap_phase


@dataclass
class PilotBatch:
    received: np.ndarray  # N_B x M_pilots
    reflections: np.ndarray  # M x M_pilots


@dataclass
class CascadedPathEstimate:
    gains: np.ndarray
    bs_phases: np.ndarray
    irs_phases: list
    degenerate: bool = False

    @property
    def n_paths(self):
        return len(self.gains)

    def params(self):
        """(L, 3) array of (zeta, vartheta, psi)."""
        return np.array([[z, a.vartheta, a.psi] for z, a in zip(self.bs_phases, self.irs_phases)]).reshape(-1, 3)


@dataclass
class CombinedPaths:
    gains: np.ndarray  # C0 product gains a_{l,0}
    bs_phases: np.ndarray
    angles: list


@dataclass(frozen=True)
class MatchingPursuitSettings:
    oversample: int = 2
    max_refine_steps: int = 200
    max_cycles: int = 30
    cycle_tolerance: float = 1e-11


def dft_matrix(m):
    """M x M DFT training matrix with unit-modulus entries."""
    idx = np.arange(m)
    return np.exp(-2j * np.pi * np.outer(idx, idx) / m)


def simulate_controller_pilots(true_g, true_b, v_matrix, noise_power, seed):
    """Received BS pilots ``Y = G diag(b) V + Z`` with unit pilot symbols."""
    v_matrix = np.asarray(v_matrix)
    y = (np.asarray(true_g) * np.asarray(true_b)[None, :]) @ v_matrix
    if noise_power > 0:
        rng = np.random.default_rng(seed)
        y = y + np.sqrt(noise_power / 2) * (rng.standard_normal(y.shape) + 1j * rng.standard_normal(y.shape))
    return PilotBatch(y, v_matrix)


def _pinv_checked(v_matrix):
    v_matrix = np.asarray(v_matrix)
    m = v_matrix.shape[0]
    if np.linalg.matrix_rank(v_matrix) < m:
        raise SingularMatrixError(f"training matrix rank below {m}; pseudo-inverse does not recover the channel")
    return np.linalg.pinv(v_matrix)


def decascade(batch):
    """``vec(Y V^+)`` (column-major), length ``N_B * M``."""
    return (batch.received @ _pinv_checked(batch.reflections)).reshape(-1, order="F")


def estimate_r1(batch):
    """LS estimate ``Y V^+`` of the cascaded controller->IRS->BS channel."""
    return batch.received @ _pinv_checked(batch.reflections)


def atom(params, n_b, geom):
    """Effective response ``u(vartheta, psi) kron e(zeta, N_B)`` for one path."""
    zeta, vt, ps = params
    return np.kron(upa_steering(AnglePair(vt, ps), geom), ula_steering(zeta, n_b))


class _PathModel:
    """Correlation ``c(mu) = w(mu)^H y`` and its derivatives for a tensorized residual."""

    def __init__(self, n_b, geom):
        self.counts = (n_b, geom.m_x, geom.m_y)
        self.n_b, self.geom = n_b, geom
        self.free = np.array([c > 1 for c in self.counts])
        self.norm2 = float(n_b * geom.size)

    def tensor(self, y_vec):
        # y index = m * N_B + n with m = p * M_y + q
        return y_vec.reshape(self.geom.m_x, self.geom.m_y, self.n_b)

    def derivs(self, t, mu):
        zeta, vt, ps = mu
        vecs = []
        for phase, count in ((vt, self.geom.m_x), (ps, self.geom.m_y), (zeta, self.n_b)):
            k = -1j * np.pi * np.arange(count)
            e = np.exp(k * phase)
            vecs.append(np.stack([e, k * e, k * k * e]))
        # contract one axis at a time; einsum path search costs more than the work here
        d = np.tensordot(np.tensordot(vecs[0], t @ vecs[2].T, axes=(1, 0)), vecs[1], axes=(1, 1)).transpose(0, 2, 1)
        c = d[0, 0, 0]
        # variable order (zeta, vartheta, psi) -> tensor axes (n, p, q)
        first = np.array([d[0, 0, 1], d[1, 0, 0], d[0, 1, 0]])
        idx = {0: (0, 0, 1), 1: (1, 0, 0), 2: (0, 1, 0)}
        second = np.empty((3, 3), dtype=complex)
        for a in range(3):
            for b in range(3):
                o = np.add(idx[a], idx[b])
                second[a, b] = d[o[0], o[1], o[2]]
        f = abs(c) ** 2
        grad = 2 * np.real(np.conj(c) * first)
        hess = 2 * np.real(np.outer(np.conj(first), first) + np.conj(c) * second)
        return f, c, grad, hess

    def value(self, t, mu):
        zeta, vt, ps = mu
        ex = np.exp(-1j * np.pi * vt * np.arange(self.geom.m_x))
        ey = np.exp(-1j * np.pi * ps * np.arange(self.geom.m_y))
        eb = np.exp(-1j * np.pi * zeta * np.arange(self.n_b))
        return abs(ex @ (t @ eb) @ ey) ** 2

    def refine(self, t, mu, max_steps=200):
        """Newton ascent on ``|c(mu)|^2`` with gradient/step-halving fallback."""
        mu = np.array(mu, dtype=float)
        free = self.free
        f, _, g, h = self.derivs(t, mu)
        for _ in range(max_steps):
            gf, hf = g[free], h[np.ix_(free, free)]
            if not gf.size or np.max(np.abs(gf)) == 0:
                break
            step = None
            w = np.linalg.eigvalsh(hf)
            if np.all(w < 0):
                step = -np.linalg.solve(hf, gf)
            else:
                # gradient direction scaled by curvature bound
                step = gf / max(np.max(np.abs(w)), 1e-12)
            improved = False
            for _ in range(60):
                cand = mu.copy()
                cand[free] += step
                fc = self.value(t, cand)
                if fc > f:
                    improved = True
                    break
                step = step / 2
            if not improved:
                break
            mu = cand
            f, _, g, h = self.derivs(t, mu)
            if np.max(np.abs(step)) < 1e-14:
                break
        mu = wrap_phase(mu)
        mu[~free] = 0.0
        return mu, f

    def grid_peaks(self, t, oversample):
        shape = tuple(oversample * c for c in (self.geom.m_x, self.geom.m_y, self.n_b))
        spec = np.abs(np.fft.fftn(t, s=shape, axes=(0, 1, 2))) ** 2
        return spec, shape

    def grid_point(self, flat_index, shape):
        kp, kq, kn = np.unravel_index(flat_index, shape)
        return wrap_phase(np.array([2.0 * kn / shape[2], 2.0 * kp / shape[0], 2.0 * kq / shape[1]]))


def estimate_cascaded_paths(y_vec, geom, n_b, n_paths, settings=MatchingPursuitSettings()):
    """Estimate ``n_paths`` (zeta, vartheta, psi) triples and LS gains from ``y_vec``.

    Paths are detected one at a time from the oversampled FFT of the
    residual, refined, and subtracted. All paths are then re-refined
    cyclically against the residual of the others until the phases settle,
    and the gains are re-fitted jointly by least squares.
    """
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    y_vec = np.asarray(y_vec, dtype=complex).reshape(-1)
    if y_vec.size != n_b * geom.size:
        raise ValueError(f"expected {n_b * geom.size} samples, got {y_vec.size}")
    model = _PathModel(n_b, geom)
    if not np.any(y_vec):
        zero = [AnglePair(0.0, 0.0)] * n_paths
        return CascadedPathEstimate(np.zeros(n_paths, complex), np.zeros(n_paths), zero, degenerate=True)

    cell = 2.0 / (settings.oversample * np.array(model.counts, dtype=float))
    mus, gains = [], []
    residual = y_vec.copy()
    for _ in range(n_paths):
        spec, shape = model.grid_peaks(model.tensor(residual), settings.oversample)
        order = np.argsort(spec.ravel())[::-1]
        mu = None
        for rank, flat in enumerate(order[: 64]):
            seed_mu = model.grid_point(flat, shape)
            cand, _ = model.refine(model.tensor(residual), seed_mu, settings.max_refine_steps)
            if not any(_close(cand, other, cell) for other in mus):
                mu = cand
                break
            if rank == 0:
                warnings.warn("matching pursuit collapsed onto an existing path; re-seeding from residual", RuntimeWarning)
        if mu is None:
            mu = cand
        w = atom(mu, n_b, geom)
        a = np.vdot(w, residual) / model.norm2
        residual = residual - a * w
        mus.append(mu)
        gains.append(a)

    mus = np.array(mus)
    gains = np.array(gains)
    if n_paths > 1:
        for _ in range(settings.max_cycles):
            shift = 0.0
            for l in range(n_paths):
                others = sum(gains[k] * atom(mus[k], n_b, geom) for k in range(n_paths) if k != l)
                r_l = y_vec - others
                new_mu, _ = model.refine(model.tensor(r_l), mus[l], settings.max_refine_steps)
                shift = max(shift, float(np.max(np.abs(wrap_phase(new_mu - mus[l])))))
                mus[l] = new_mu
                gains[l] = np.vdot(atom(new_mu, n_b, geom), r_l) / model.norm2
            if shift < settings.cycle_tolerance:
                break

    w_mat = np.column_stack([atom(mu, n_b, geom) for mu in mus])
    gains = np.linalg.lstsq(w_mat, y_vec, rcond=None)[0]
    order = np.argsort(-np.abs(gains), kind="stable")
    return CascadedPathEstimate(
        gains[order],
        mus[order, 0].copy(),
        [AnglePair(float(mus[i, 1]), float(mus[i, 2])) for i in order],
    )


def _close(mu_a, mu_b, cell):
    return bool(np.all(np.abs(wrap_phase(np.asarray(mu_a) - np.asarray(mu_b))) < cell))


def _circular_mean(a, b, weight_b=0.5):
    return float(wrap_phase(a + weight_b * wrap_phase(b - a)))


def symmetric_combine(est_c0, est_c2, threshold=0.1):
    """Average the IRS array phases of two symmetric-controller runs.

    Paths are matched greedily (strongest first) by the wrapped distance of
    ``(zeta, psi)``, which do not depend on the controller. Averages are
    taken on the period-2 phase circle along the shorter arc, which assumes
    the controller offset satisfies ``|vartheta_dot| < 1/2``.
    """
    if est_c0.n_paths != est_c2.n_paths:
        raise EstimationError("controller runs estimated different path counts")
    p0, p2 = est_c0.params(), est_c2.params()
    used = set()
    angles, zetas = [], []
    for l in range(est_c0.n_paths):
        best, best_d = None, np.inf
        for k in range(est_c2.n_paths):
            if k in used:
                continue
            d = float(np.hypot(*wrap_phase(p0[l, [0, 2]] - p2[k, [0, 2]])))
            if d < best_d:
                best, best_d = k, d
        if best is None or best_d > threshold:
            raise EstimationError(f"no match for path {l} within {threshold} (closest {best_d:.3g})")
        used.add(best)
        g0, g2 = abs(est_c0.gains[l]), abs(est_c2.gains[best])
        wb = g2 / (g0 + g2) if g0 + g2 > 0 else 0.5
        zetas.append(_circular_mean(p0[l, 0], p2[best, 0], wb))
        angles.append(AnglePair(_circular_mean(p0[l, 1], p2[best, 1]), _circular_mean(p0[l, 2], p2[best, 2])))
    return CombinedPaths(np.array(est_c0.gains), np.array(zetas), angles)


def reconstruct_scaled_g(gains_c0, bs_phases, combined_angles, n_b, geom):
    """``sum_l a_{l,0} e(zeta_l) u(vartheta_l, psi_l)^T``."""
    paths = tuple(PathParams(complex(a), float(z), ang) for a, z, ang in zip(gains_c0, bs_phases, combined_angles))
    return assemble_multipath(MultipathChannel(paths, n_b, geom))


def reconstruct_scaled_b1(r1_hat, g_bar_hat, rel_threshold=1e-12):
    """Average over BS antennas of ``R1^T / G_bar^T``; near-zero entries of ``G_bar`` are skipped."""
    r1_t = np.asarray(r1_hat).T
    g_t = np.asarray(g_bar_hat).T
    mag = np.abs(g_t)
    valid = mag > rel_threshold * mag.max() if mag.max() > 0 else np.zeros_like(mag, dtype=bool)
    counts = valid.sum(axis=1)
    if np.any(counts == 0):
        raise EstimationError("every BS antenna term vanished for some IRS element")
    ratio = np.where(valid, r1_t / np.where(valid, g_t, 1.0), 0.0)
    return ratio.sum(axis=1) / counts


@dataclass
class OfflineResult:
    g_bar: np.ndarray
    b1_bar: np.ndarray
    est_c0: CascadedPathEstimate = None
    est_c2: CascadedPathEstimate = None
    combined: CombinedPaths = None


def training_matrix(m, n_pilots=None):
    """``M x M_pilots`` training reflections: DFT columns, cycled when ``M_pilots > M``."""
    n_pilots = m if n_pilots is None else int(n_pilots)
    return dft_matrix(m)[:, np.arange(n_pilots) % m]


def run_offline_stage(g, b0, b1, b2, geom, n_paths, noise_power, rng, settings=MatchingPursuitSettings(), n_pilots=None, repetitions=1):
    """Full off-line stage: returns the reconstructed ``G_bar`` and ``b1_bar``.

    ``repetitions`` repeats the whole training sequence; since ``G`` is
    static, the least-squares step then averages the repeats, which is
    simulated exactly by dividing the noise power.
    """
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    noise_power = noise_power / repetitions
    n_b, m = g.shape
    v = training_matrix(m, n_pilots)
    seeds = rng.integers(0, 2**63, size=3)
    y0 = decascade(simulate_controller_pilots(g, b0, v, noise_power, seeds[0]))
    y2 = decascade(simulate_controller_pilots(g, b2, v, noise_power, seeds[1]))
    est0 = estimate_cascaded_paths(y0, geom, n_b, n_paths, settings)
    est2 = estimate_cascaded_paths(y2, geom, n_b, n_paths, settings)
    comb = symmetric_combine(est0, est2)
    g_bar = reconstruct_scaled_g(comb.gains, comb.bs_phases, comb.angles, n_b, geom)
    r1 = estimate_r1(simulate_controller_pilots(g, b1, v, noise_power, seeds[2]))
    return OfflineResult(g_bar, reconstruct_scaled_b1(r1, g_bar), est0, est2, comb)

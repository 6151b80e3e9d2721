"""Block-by-block simulation of one IRS pass and Monte Carlo aggregation.

Every run draws one channel realization from its own seed and evaluates
all requested schemes on it, so schemes (and sweep points that do not
change the random draws) are compared on common random numbers.
"""

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .beamform import AoSettings, ao_maximize_quadratic, ao_sweeps
from .channel import assemble_multipath, far_field_los, jakes_process, near_field_los, path_loss, random_multipath
from .errors import EstimationError
from .geometry import AnglePair, upa_steering, upa_steering_batch
from .offline import run_offline_stage
from .online import (
    AngleTrack,
    TrackEntry,
    estimate_block_angles,
    fit_trajectory,
    implied_x,
    online_training_matrix,
    predict_angles,
    simulate_user_pilots,
)
from .search import SearchSettings

# independent streams drawn from each run's seed
_STREAMS = ("irs_bs", "direct", "controller_direct", "offline", "online", "second_panel", "hybrid")


@dataclass
class BlockRecord:
    n: int
    true_angles: AnglePair
    est_angles: AnglePair
    reflection: np.ndarray
    gamma: float
    rate: float
    scheme: str


@dataclass
class RunSummary:
    scheme: str
    rates: np.ndarray
    gammas: np.ndarray
    true_angles: np.ndarray
    est_angles: np.ndarray = None
    overhead: np.ndarray = None
    reflections: np.ndarray = None
    degraded: bool = False
    diagnostics: dict = field(default_factory=dict)

    @property
    def mean_rate(self):
        return float(np.mean(self.rates))

    @property
    def mean_gamma(self):
        return float(np.mean(self.gammas))

    @property
    def angle_rmse(self):
        if self.est_angles is None:
            return float("nan")
        err = self.est_angles - self.true_angles
        return float(np.sqrt(np.mean(np.sum(err**2, axis=1))))

    def records(self):
        for i in range(len(self.rates)):
            est = None if self.est_angles is None else AnglePair(*self.est_angles[i])
            refl = None if self.reflections is None else self.reflections[:, i]
            yield BlockRecord(i + 1, AnglePair(*self.true_angles[i]), est, refl, float(self.gammas[i]), float(self.rates[i]), self.scheme)


def run_seeds(master_seed, n_runs):
    """Per-run seeds: the ``SeedSequence(master_seed)`` spawn children in run order."""
    return np.random.SeedSequence(master_seed).spawn(n_runs)


class Realization:
    """All random and geometric quantities of one run.

    Block ``n`` places the user at ``x = -d_irs / 2 + (n - 1) v T_b``, so
    blocks ``1..N`` are the service window and ``1 - n0..0`` the
    pre-service tracking window.
    """

    def __init__(self, config, seed_seq=None):
        self.cfg = config
        seed_seq = np.random.SeedSequence(config.seed) if seed_seq is None else seed_seq
        self.seeds = dict(zip(_STREAMS, seed_seq.spawn(len(_STREAMS))))
        self.geom = config.geom
        self.n = config.n_blocks
        self.first_block = 1 - config.n0 - config.feedback_delay_blocks
        c = config
        rng = np.random.default_rng(self.seeds["irs_bs"])
        pl_g = path_loss(float(np.linalg.norm(c.bs_position)), c.exp_irs_bs, c.beta0_db)
        self.g_channel = random_multipath(rng, c.n_b, self.geom, c.l_paths, pl_g, c.min_path_separation)
        self.g = assemble_multipath(self.g_channel) if c.irs_enabled else np.zeros((c.n_b, self.geom.size), complex)

    def blocks(self, start, stop):
        return np.arange(start, stop + 1)

    def user_x(self, n):
        return -self.cfg.d_irs / 2.0 + (np.asarray(n) - 1) * self.cfg.step

    def user_positions(self, n):
        x = self.user_x(n)
        return np.stack([x, np.full_like(x, self.cfg.lane_y, dtype=float), np.full_like(x, self.cfg.lane_z, dtype=float)], axis=-1)

    def true_angles(self, n):
        pos = self.user_positions(n)
        r = np.linalg.norm(pos, axis=-1)
        s = 2.0 * self.cfg.spacing_ratio
        return np.stack([s * pos[..., 0] / r, s * pos[..., 1] / r], axis=-1)

    def los_gain(self, n):
        r = np.linalg.norm(self.user_positions(n), axis=-1)
        pl = np.array([path_loss(v, self.cfg.exp_los, self.cfg.beta0_db) for v in np.atleast_1d(r)])
        return np.sqrt(pl) * np.exp(-2j * np.pi * r / self.cfg.wavelength)

    def steering(self, n):
        ang = self.true_angles(n)
        return upa_steering_batch(ang[:, 0], ang[:, 1], self.geom)

    def _fading(self, stream, dims, start, stop, target):
        c = self.cfg
        procs = jakes_process(self.seeds[stream], stop - start + 1, c.max_doppler, c.block_time, 1.0, dims, start_block=start)
        pos = self.user_positions(self.blocks(start, stop))
        dist = np.linalg.norm(pos - np.asarray(target)[None, :], axis=1)
        exp = c.exp_user_bs if stream == "direct" else c.exp_user_controller
        pl = np.array([path_loss(v, exp, c.beta0_db) for v in dist])
        return np.array([p.sequence for p in procs]) * np.sqrt(pl)[None, :]

    @cached_property
    def _direct_raw(self):
        # fading values depend only on the absolute block time, not on the window
        return self._fading("direct", self.cfg.n_b, self.first_block, self.n, self.cfg.bs_position)

    @cached_property
    def _direct_all(self):
        d = self._direct_raw
        if self.cfg.second_panel:
            d = d + self._second_panel_term(self.blocks(self.first_block, self.n))
        return d

    def direct(self, n):
        """User->BS channel (columns) for the blocks ``n``."""
        return self._direct_all[:, np.asarray(n) - self.first_block]

    @cached_property
    def _controller_direct_all(self):
        return self._fading("controller_direct", 1, self.first_block, self.n, self.cfg.c1_position)[0]

    def controller_direct(self, n):
        return self._controller_direct_all[np.asarray(n) - self.first_block]

    def reflected(self, n, w):
        """``Q^[n] nu^[n]`` with ``w = u^[n] * nu^[n]`` already formed (columns)."""
        return self.los_gain(n)[None, :] * (self.g @ w)

    def _second_panel_term(self, n):
        # a neighbouring panel one spacing ahead with a fixed random reflection
        c = self.cfg
        rng = np.random.default_rng(self.seeds["second_panel"])
        centre = np.array([c.d_irs, 0.0, 0.0])
        pl_g = path_loss(float(np.linalg.norm(np.asarray(c.bs_position) - centre)), c.exp_irs_bs, c.beta0_db)
        g3 = assemble_multipath(random_multipath(rng, c.n_b, self.geom, c.l_paths, pl_g))
        nu3 = np.exp(2j * np.pi * rng.random(self.geom.size))
        pos = self.user_positions(n) - centre[None, :]
        r = np.linalg.norm(pos, axis=1)
        s = 2.0 * c.spacing_ratio
        u3 = upa_steering_batch(s * pos[:, 0] / r, s * pos[:, 1] / r, self.geom)
        a3 = np.sqrt([path_loss(v, c.exp_los, c.beta0_db) for v in r]) * np.exp(-2j * np.pi * r / c.wavelength)
        return a3[None, :] * (g3 @ (u3 * nu3[:, None]))

    @cached_property
    def ao_settings(self):
        return AoSettings(max_iterations=self.cfg.ao_max_iterations, n_random_restarts=self.cfg.ao_restarts)

    @cached_property
    def p2_reflection(self):
        """Reflection maximizing ``||G nu||^2`` for the true ``G``."""
        return ao_maximize_quadratic(self.g, None, self.ao_settings).coefficients

    @cached_property
    def controller_channels(self):
        c = self.cfg
        half = c.d_irs / 2.0
        b0 = far_field_los((-half, 0.0, c.opposite_roadside_z), self.geom, c.wavelength, c.exp_los, c.beta0_db)
        b2 = far_field_los((half, 0.0, c.opposite_roadside_z), self.geom, c.wavelength, c.exp_los, c.beta0_db)
        pos = self.geom.element_positions(c.wavelength)
        r_ref = float(np.linalg.norm(pos[0] - np.asarray(c.c1_position)))
        b1 = near_field_los(c.c1_position, self.geom, c.wavelength, np.sqrt(path_loss(r_ref, c.exp_los, c.beta0_db)), pos)
        vec0 = b0.gain * upa_steering(b0.angles, self.geom)
        vec2 = b2.gain * upa_steering(b2.angles, self.geom)
        return vec0, b1, vec2, b0.gain

    @cached_property
    def offline(self):
        """``(G_bar, b1_bar)`` from the off-line stage (or their exact values)."""
        b0, b1, b2, scale = self.controller_channels
        if self.cfg.perfect_offline or not self.cfg.irs_enabled:
            return scale * self.g, b1 / scale
        # a path too weak to associate across the two controller runs is dropped
        # and the stage repeated on the same pilots with one path fewer
        failure = None
        for n_paths in range(self.cfg.l_paths, 0, -1):
            rng = np.random.default_rng(self.seeds["offline"])
            try:
                res = run_offline_stage(
                    self.g, b0, b1, b2, self.geom, n_paths, self.cfg.noise_normalized, rng,
                    repetitions=self.cfg.offline_repetitions,
                )
            except EstimationError as exc:
                failure = exc
                continue
            self.offline_paths = n_paths
            return res.g_bar, res.b1_bar
        raise failure


def _rates(cfg, gammas, overhead):
    s = cfg.symbols_per_block
    overhead = np.asarray(overhead)
    cap = np.log2(1.0 + gammas / (cfg.noise_normalized * 10.0 ** (cfg.gap_db / 10.0)))
    factor = np.where(overhead >= s, 0.0, 1.0 - np.minimum(overhead, s) / s)
    return factor * cap


def _gamma(real, n, w):
    h = real.reflected(n, w) + real.direct(n)
    return np.sum(np.abs(h) ** 2, axis=0)


def run_no_irs(config, realization=None):
    real = Realization(config) if realization is None else realization
    n = real.blocks(1, real.n)
    d = real._direct_raw[:, n - real.first_block]
    gam = np.sum(np.abs(d) ** 2, axis=0)
    over = np.full(real.n, config.tau)
    return RunSummary("no_irs", _rates(config, gam, over), gam, real.true_angles(n), overhead=over)


def run_upper_bound(config, realization=None, keep_reflections=False):
    """Per-block AO on ``||Q nu + d||^2`` with perfect CSI.

    With ``Q = a G diag(u)`` the blocks share ``G`` after the change of
    variables ``w = u * nu``, with affine term ``d / a``; each block starts
    from the reflection that maximizes ``||G w||^2``.
    """
    real = Realization(config) if realization is None else realization
    n = real.blocks(1, real.n)
    u = real.steering(n)
    a = real.los_gain(n)
    d = real.direct(n)
    w0 = np.broadcast_to(real.p2_reflection, (real.n, real.geom.size))
    if config.irs_enabled:
        w, _, _ = ao_sweeps(real.g, (d / a[None, :]).T, w0, config.upper_bound_sweeps, 1e-8)
    else:
        w = np.array(w0)
    w = w.T
    gam = _gamma(real, n, w)
    over = np.full(real.n, config.tau if config.upper_bound_overhead else 0)
    refl = np.conj(u) * w if keep_reflections else None
    return RunSummary("upper_bound", _rates(config, gam, over), gam, real.true_angles(n), real.true_angles(n), over, refl)


def run_benchmark_cascaded(config, variant="cascaded_offline_g", realization=None, keep_reflections=False):
    """Benchmarks that estimate the cascaded channel at the BS every block.

    They are granted perfect ``Q`` and ``d``; only the pilot overhead and
    the feedback delay (CSI of block ``n - delay``) penalize them. The
    reflection for ``Q = a G diag(u)`` is ``conj(u) * nu_G`` with ``nu_G``
    maximizing ``||G nu||^2``.
    """
    if variant not in ("cascaded_first_block", "cascaded_offline_g"):
        raise ValueError(f"unknown benchmark variant {variant!r}")
    real = Realization(config) if realization is None else realization
    n = real.blocks(1, real.n)
    lag = config.feedback_delay_blocks
    u_now = real.steering(n)
    u_old = real.steering(n - lag)
    w = u_now * np.conj(u_old) * real.p2_reflection[:, None]
    gam = _gamma(real, n, w)
    per_block = 1 + math.ceil(real.geom.size / config.n_b)
    over = np.full(real.n, per_block)
    if variant == "cascaded_first_block":
        over[0] = real.geom.size + 1
    refl = np.conj(u_old) * real.p2_reflection[:, None] if keep_reflections else None
    return RunSummary(variant, _rates(config, gam, over), gam, real.true_angles(n), real.true_angles(n - lag), over, refl)


def _controller_estimates(config, real, blocks, reflections, seeds):
    """Per-block angle estimates at the controller from the user's pilots.

    ``reflections`` holds the service reflection of each block (columns);
    the training slots are DFT rows applied on top of it.
    """
    geom = real.geom
    search = SearchSettings(grid_size=config.search_grid)
    a = real.los_gain(blocks)
    ang = real.true_angles(blocks)
    dc = real.controller_direct(blocks)
    _, b1, _, scale = real.controller_channels
    _, b1_bar = real.offline
    for i, blk in enumerate(blocks):
        refl = online_training_matrix(config.tau, geom.size, reflections[:, i])
        # the controller sees a * b1^T diag(v) u; written with the scaled b1 this is (a * scale) * b1_bar
        y = simulate_user_pilots(b1 / scale, AnglePair(*ang[i]), a[i] * scale, dc[i], refl.v_matrix, config.controller_noise_normalized, seeds[i], geom)
        yield int(blk), estimate_block_angles(y, refl, b1_bar, geom, search)


def track_user(config, real, nu_bar):
    """Pre-service tracking: per-block angle estimates for blocks ``1 - n0 .. 0``."""
    blocks = real.blocks(1 - config.n0, 0)
    refl = np.broadcast_to(np.asarray(nu_bar)[:, None], (real.geom.size, len(blocks)))
    track = AngleTrack()
    flags = 0
    for blk, est in _controller_estimates(config, real, blocks, refl, real.seeds["online"].spawn(config.n0)):
        if est.low_confidence:
            flags += 1
            continue
        track.append(TrackEntry(blk, est.angles.vartheta, est.angles.psi, est.gain, est.d_c))
    return track, flags


def _reestimate(config, real, n, est, w, nu_bar):
    """Replace predictions by per-block pilot estimates where they are confident."""
    est, w = est.copy(), w.copy()
    seeds = real.seeds["hybrid"].spawn(len(n))
    for i, (_, fresh) in enumerate(_controller_estimates(config, real, n, w, seeds)):
        if not fresh.low_confidence:
            est[i] = fresh.angles.as_array()
            w[:, i] = np.conj(upa_steering(fresh.angles, real.geom)) * nu_bar
    return est, w


def run_proposed(config, realization=None, keep_reflections=False):
    """Off-line stage, pre-service tracking, trajectory fit, then prediction only.

    With ``hybrid_reestimation`` the controller also estimates the angles
    from the pilots of every served block and uses them when confident.

    If tracking or the fit fails, the run is marked degraded and serves
    every block with the last good reflection (the off-line one).
    """
    real = Realization(config) if realization is None else realization
    geom = real.geom
    n = real.blocks(1, real.n)
    diag = {}
    degraded = False
    est = None
    nu_bar = np.ones(geom.size, dtype=complex)
    try:
        g_bar, _ = real.offline
        nu_bar = ao_maximize_quadratic(g_bar, None, real.ao_settings).coefficients
        diag["offline_paths"] = getattr(real, "offline_paths", config.l_paths)
        track, flags = track_user(config, real, nu_bar)
        diag["low_confidence_blocks"] = flags
        if track.entries:
            # timing error of the coverage trigger, in blocks, from the last tracked estimate
            last = track.entries[-1]
            x_hat = implied_x(AnglePair(last.vartheta, last.psi), config.lane_z, config.spacing_ratio)
            diag["trigger_offset_blocks"] = float((x_hat - real.user_x(last.n)) / config.step)
        x_lo = -2.0 * config.d_irs - config.n0 * config.step
        traj = fit_trajectory(
            track,
            geom,
            config.block_time,
            SearchSettings(grid_size=config.search_grid),
            x_range=(x_lo, 0.0),
            v_range=(1.0, 70.0),
            z_prior=config.lane_z,
        )
        # the fit counts from the first tracked block; re-reference to block 1 - n0
        offset = track.entries[-1].n
        est = np.array([predict_angles(traj, int(k - offset), geom).as_array() for k in n])
        w = np.conj(upa_steering_batch(est[:, 0], est[:, 1], geom)) * nu_bar[:, None]
        if config.hybrid_reestimation:
            est, w = _reestimate(config, real, n, est, w, nu_bar)
        diag["speed_error"] = traj.v - config.vehicle_speed
        diag["x_ini_error"] = traj.x_ini - float(real.user_x(track.entries[0].n))
    except EstimationError as exc:
        degraded = True
        diag["failure"] = str(exc)
        w = np.broadcast_to(nu_bar[:, None], (geom.size, real.n))
    u = real.steering(n)
    gam = _gamma(real, n, u * w)
    over = np.full(real.n, config.tau)
    return RunSummary("proposed", _rates(config, gam, over), gam, real.true_angles(n), est, over, w if keep_reflections else None, degraded, diag)


def run_scheme(config, scheme, realization=None, keep_reflections=False):
    real = Realization(config) if realization is None else realization
    if scheme == "proposed":
        return run_proposed(config, real, keep_reflections)
    if scheme == "upper_bound":
        return run_upper_bound(config, real, keep_reflections)
    if scheme in ("cascaded_first_block", "cascaded_offline_g"):
        return run_benchmark_cascaded(config, scheme, real, keep_reflections)
    if scheme == "no_irs":
        return run_no_irs(config, real)
    raise ValueError(f"unknown scheme {scheme!r}")


def run_once(config, schemes, seed_seq, keep_reflections=False):
    """All schemes on one realization; returns ``{scheme: RunSummary}``."""
    real = Realization(config, seed_seq)
    return {s: run_scheme(config, s, real, keep_reflections) for s in schemes}


def _run_once_args(args):
    return run_once(*args)


@dataclass
class SchemeStats:
    scheme: str
    runs: int
    mean_rate: float
    std_rate: float
    mean_gamma: float
    angle_rmse: float
    degraded_runs: int
    rate_per_block: np.ndarray
    gamma_per_block: np.ndarray
    run_rates: np.ndarray
    run_gammas: np.ndarray

    @property
    def stderr_rate(self):
        return self.std_rate / np.sqrt(self.runs) if self.runs > 1 else float("nan")


def aggregate(scheme, summaries):
    rates = np.array([s.mean_rate for s in summaries])
    gammas = np.array([s.mean_gamma for s in summaries])
    rmse = np.array([s.angle_rmse for s in summaries])
    finite = rmse[np.isfinite(rmse)]
    return SchemeStats(
        scheme,
        len(summaries),
        float(np.mean(rates)),
        float(np.std(rates, ddof=1)) if len(rates) > 1 else 0.0,
        float(np.mean(gammas)),
        float(np.mean(finite)) if finite.size else float("nan"),
        sum(s.degraded for s in summaries),
        np.mean([s.rates for s in summaries], axis=0),
        np.mean([s.gammas for s in summaries], axis=0),
        rates,
        gammas,
    )


def monte_carlo(config, n_runs, schemes, workers=1, keep_runs=False):
    """Aggregate ``n_runs`` runs seeded from ``config.seed``.

    Run ``i`` uses the ``i``-th child of ``SeedSequence(config.seed)``.
    Results are reduced in run order, so the output does not depend on
    ``workers``.
    """
    if n_runs < 1:
        raise ValueError("n_runs must be >= 1")
    schemes = tuple(schemes)
    jobs = [(config, schemes, s) for s in run_seeds(config.seed, n_runs)]
    if workers > 1 and n_runs > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            runs = list(pool.map(_run_once_args, jobs))
    else:
        runs = [run_once(*j) for j in jobs]
    stats = {s: aggregate(s, [r[s] for r in runs]) for s in schemes}
    return (stats, runs) if keep_runs else stats

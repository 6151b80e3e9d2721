"""Channel synthesis: multipath IRS->BS, LoS user->IRS, near-field
controller->IRS, Jakes-correlated Rayleigh fading and path loss."""

import warnings
from dataclasses import dataclass, field

import numpy as np

from .geometry import AnglePair, UpaGeometry, angles_from_position, ula_steering, upa_steering, wrap_phase

SPEED_OF_LIGHT = 3e8


@dataclass(frozen=True)
class PathParams:
    gain: complex
    zeta: float
    angles: AnglePair


@dataclass(frozen=True)
class MultipathChannel:
    paths: tuple
    n_b: int
    geom: UpaGeometry


@dataclass(frozen=True)
class LosChannel:
    gain: complex
    angles: AnglePair
    geom: UpaGeometry


@dataclass
class FadingProcess:
    sequence: np.ndarray
    max_doppler: float
    block_duration: float
    variance: float = 1.0


def assemble_multipath(channel):
    """Return ``sum_l a_l e(zeta_l, N_B) u(vartheta_l, psi_l)^T`` (N_B x M)."""
    if len(channel.paths) == 0:
        raise ValueError("multipath channel needs at least one path")
    g = np.zeros((channel.n_b, channel.geom.size), dtype=complex)
    for path in channel.paths:
        g += path.gain * np.outer(ula_steering(path.zeta, channel.n_b), upa_steering(path.angles, channel.geom))
    return g


def assemble_los(channel):
    return channel.gain * upa_steering(channel.angles, channel.geom)


def cascade(g, q):
    """Cascaded channel ``G diag(q)``."""
    g = np.asarray(g)
    q = np.asarray(q)
    if g.ndim != 2 or q.ndim != 1 or g.shape[1] != q.shape[0]:
        raise ValueError(f"dimension mismatch: G {g.shape} vs q {q.shape}")
    return g * q[None, :]


def effective_channel(q_cascaded, nu, d, atol=1e-9):
    """Overall user->BS channel ``Q nu + d``."""
    nu = np.asarray(nu)
    if np.any(np.abs(np.abs(nu) - 1.0) > atol):
        raise ValueError("reflection coefficients must have unit modulus")
    return np.asarray(q_cascaded) @ nu + np.asarray(d)


def path_loss(distance, exponent, beta0_db=-30.0):
    """Linear power gain ``beta0 * distance^-exponent``; distances below 1 m are clamped."""
    if distance < 1.0:
        warnings.warn(f"distance {distance:.3g} m below the 1 m reference; clamped", RuntimeWarning, stacklevel=2)
        distance = 1.0
    return 10.0 ** (beta0_db / 10.0) * distance ** (-exponent)


def jakes_process(seed, n_blocks, max_doppler, block_duration, variance=1.0, dims=1, n_scatterers=64, start_block=0):
    """Sum-of-sinusoids Rayleigh fading with Jakes autocorrelation.

    Returns a list of ``dims`` independent :class:`FadingProcess` objects.
    Each realization draws its own arrival angles and phases, so the
    ensemble autocorrelation at lag ``k`` is ``variance * J0(2 pi f_d k T_b)``.
    Sample ``i`` sits at time ``(start_block + i) T_b``, so a given block
    has the same value whatever window is requested.
    """
    if max_doppler < 0:
        raise ValueError("max_doppler must be non-negative")
    if variance <= 0:
        raise ValueError("variance must be positive")
    rng = np.random.default_rng(seed)
    alpha = rng.uniform(0.0, 2 * np.pi, size=(dims, n_scatterers))
    phase = rng.uniform(0.0, 2 * np.pi, size=(dims, n_scatterers))
    t = (start_block + np.arange(n_blocks)) * block_duration
    doppler = 2 * np.pi * max_doppler * np.cos(alpha)
    arg = doppler[:, :, None] * t[None, None, :] + phase[:, :, None]
    seq = np.sqrt(variance / n_scatterers) * np.exp(1j * arg).sum(axis=1)
    return [FadingProcess(seq[k], max_doppler, block_duration, variance) for k in range(dims)]


def near_field_los(source, geom, wavelength, gain_ref, element_positions=None):
    """Spherical-wave LoS response from ``source`` to each panel element.

    ``[b]_m = gain_ref * exp(-j 2 pi r_m / lambda) * r_ref / r_m`` with
    ``r_ref`` the distance to element 0.
    """
    pos = geom.element_positions(wavelength) if element_positions is None else element_positions
    r = np.linalg.norm(pos - np.asarray(source, dtype=float)[None, :], axis=1)
    return gain_ref * np.exp(-2j * np.pi * r / wavelength) * (r[0] / r)


def far_field_los(source, geom, wavelength, exponent, beta0_db=-30.0):
    """Far-field LoS channel from a point source; phase referenced to element 0."""
    source = np.asarray(source, dtype=float)
    dist = float(np.linalg.norm(source))
    gain = np.sqrt(path_loss(dist, exponent, beta0_db)) * np.exp(-2j * np.pi * dist / wavelength)
    angles = angles_from_position(*source, spacing_ratio=geom.spacing_ratio)
    return LosChannel(complex(gain), angles, geom)


def random_multipath(rng, n_b, geom, n_paths, total_power, min_separation=0.0, max_tries=1000):
    """Random geometric channel with total path power ``total_power``.

    BS phases are uniform on [-1, 1]; IRS phases uniform on the feasible
    disk. ``min_separation`` (in beamwidths, see :func:`path_separation`)
    rejects draws with paths that are too close.
    """
    for _ in range(max_tries):
        zeta = rng.uniform(-1.0, 1.0, n_paths)
        rad = geom.max_phase * np.sqrt(rng.uniform(0.0, 1.0, n_paths))
        ang = rng.uniform(0.0, 2 * np.pi, n_paths)
        vt, ps = rad * np.cos(ang), rad * np.sin(ang)
        if min_separation <= 0 or _min_pairwise_separation(zeta, vt, ps, n_b, geom) >= min_separation:
            break
    else:
        raise RuntimeError("could not draw well-separated paths")
    gains = (rng.standard_normal(n_paths) + 1j * rng.standard_normal(n_paths)) / np.sqrt(2)
    gains *= np.sqrt(total_power / np.sum(np.abs(gains) ** 2))
    paths = tuple(PathParams(complex(a), float(z), AnglePair(float(v), float(p))) for a, z, v, p in zip(gains, zeta, vt, ps))
    return MultipathChannel(paths, n_b, geom)


def path_separation(a, b, n_b, geom):
    """Largest per-axis separation between two (zeta, vartheta, psi) triples,
    measured in units of ``2 / count`` (one DFT bin) along that axis."""
    diffs = np.abs(wrap_phase(np.asarray(a) - np.asarray(b)))
    counts = np.array([n_b, geom.m_x, geom.m_y])
    return float(np.max(diffs * counts / 2.0))


def _min_pairwise_separation(zeta, vt, ps, n_b, geom):
    best = np.inf
    for i in range(len(zeta)):
        for j in range(i + 1, len(zeta)):
            sep = path_separation((zeta[i], vt[i], ps[i]), (zeta[j], vt[j], ps[j]), n_b, geom)
            best = min(best, sep)
    return best

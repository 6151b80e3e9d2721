"""Steering vectors and array-phase geometry for ULA/UPA arrays.

Angles are carried as normalized array phases ``(vartheta, psi)`` along the
panel x/y axes. A phase of 1 means a pi phase step between adjacent
elements. UPA element ``m`` maps to ``(p, q) = divmod(m, m_y)``; this
x-major order matches ``kron(e_x, e_y)`` and is used for every reflection
vector in the package.
"""

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class UpaGeometry:
    """Uniform planar array of ``m_x * m_y`` elements in the x-y plane."""

    m_x: int
    m_y: int
    spacing_ratio: float = 0.5

    def __post_init__(self):
        if int(self.m_x) < 1 or int(self.m_y) < 1:
            raise ValueError(f"element counts must be >= 1, got {self.m_x}x{self.m_y}")
        if not self.spacing_ratio > 0:
            raise ValueError("spacing_ratio must be positive")

    @property
    def size(self) -> int:
        return self.m_x * self.m_y

    @property
    def max_phase(self) -> float:
        """Radius of the feasible array-phase disk, 2*d/lambda."""
        return 2.0 * self.spacing_ratio

    def element_positions(self, wavelength):
        """Element coordinates (M x 3, metres), element 0 at the origin."""
        d = self.spacing_ratio * wavelength
        p, q = np.divmod(np.arange(self.size), self.m_y)
        return np.column_stack([p * d, q * d, np.zeros(self.size)])


@dataclass(frozen=True)
class AnglePair:
    vartheta: float
    psi: float

    def as_array(self):
        return np.array([self.vartheta, self.psi], dtype=float)


def ula_steering(phase, count):
    """1D steering vector ``[1, e^{j pi phase}, ..., e^{j (count-1) pi phase}]``."""
    count = int(count)
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    return np.exp(1j * np.pi * phase * np.arange(count))


def upa_steering(angles, geom):
    """UPA response ``e(vartheta, m_x) kron e(psi, m_y)``."""
    # outer product, flattened x-major; same values as np.kron without its overhead
    return np.outer(ula_steering(angles.vartheta, geom.m_x), ula_steering(angles.psi, geom.m_y)).ravel()


def upa_steering_batch(vartheta, psi, geom):
    """Steering vectors for many angle pairs at once, shape ``(M, K)``."""
    vartheta = np.atleast_1d(np.asarray(vartheta, dtype=float))
    psi = np.atleast_1d(np.asarray(psi, dtype=float))
    ex = np.exp(1j * np.pi * np.outer(np.arange(geom.m_x), vartheta))
    ey = np.exp(1j * np.pi * np.outer(np.arange(geom.m_y), psi))
    return (ex[:, None, :] * ey[None, :, :]).reshape(geom.size, -1)


def angles_from_elevation_azimuth(theta, phi, spacing_ratio=0.5):
    """Array phases for elevation ``theta`` (from the panel plane) and azimuth ``phi``."""
    scale = 2.0 * spacing_ratio * np.cos(theta)
    return AnglePair(float(scale * np.cos(phi)), float(scale * np.sin(phi)))


def angles_from_position(x, y, z, spacing_ratio=0.5):
    """Array phases of a far-field source at ``(x, y, z)`` relative to the panel.

    Uses ``vartheta = 2 (d/lambda) x / r`` and ``psi = 2 (d/lambda) y / r``.
    """
    r = float(np.sqrt(x * x + y * y + z * z))
    if r == 0.0:
        raise ValueError("position coincides with the panel origin")
    scale = 2.0 * spacing_ratio / r
    return AnglePair(float(scale * x), float(scale * y))


def spherical_angles(x, y, z):
    """Elevation (from the x-y plane) and azimuth of a Cartesian point."""
    theta = np.arctan2(abs(z), np.hypot(x, y))
    phi = np.mod(np.arctan2(y, x), 2 * np.pi)
    return float(theta), float(phi)


def wrap_phase(phase):
    """Map array phases to the period-2 interval ``[-1, 1)``."""
    return np.mod(np.asarray(phase) + 1.0, 2.0) - 1.0

"""Periodic grid, wavenumbers and the normalized Fourier layout.

Fields are stored in the rfft2 layout of shape (N, N//2 + 1). Axis 0 is the
e1 direction. The spectral coefficients are normalized so that

    u(x) = (1/L) * sum_k v_k e^{i k.x},

which makes E|v_k|^2 = Theta_tau(k) for the stationary field, independent of
the grid resolution.
"""

from dataclasses import dataclass
import math

import numpy as np


@dataclass(frozen=True)
class GridSpec:
    L: float = 2 * math.pi * 64
    N: int = 256
    dt: float = 0.01
    K_cut: float = 2.0 / 3.0

    def __post_init__(self):
        if self.N < 4 or self.N & (self.N - 1):
            raise ValueError(f"N must be a power of two >= 4, got {self.N}")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not 0.0 < self.K_cut <= 1.0:
            raise ValueError("K_cut must lie in (0, 1]")
        if not self.L > 0:
            raise ValueError("L must be positive")

    @property
    def dx(self):
        return self.L / self.N

    @property
    def dk(self):
        return 2 * math.pi / self.L

    def wavenumbers(self):
        """Broadcastable (k1, k2) arrays in the rfft2 layout."""
        k1 = np.fft.fftfreq(self.N, d=1.0 / self.N) * self.dk
        k2 = np.fft.rfftfreq(self.N, d=1.0 / self.N) * self.dk
        return k1[:, None], k2[None, :]

    def mode_indices(self):
        n1 = np.fft.fftfreq(self.N, d=1.0 / self.N).astype(int)
        n2 = np.fft.rfftfreq(self.N, d=1.0 / self.N).astype(int)
        return n1[:, None], n2[None, :]

    def mask(self):
        """Kept modes: |n_i| <= floor(K_cut * N / 2) on each axis, Nyquist excluded."""
        n1, n2 = self.mode_indices()
        cut = int(math.floor(self.K_cut * self.N / 2))
        cut = min(cut, self.N // 2 - 1)
        return (np.abs(n1) <= cut) & (np.abs(n2) <= cut)

    def weights(self):
        """Multiplicity of each stored rfft mode in a full-plane sum (1 or 2)."""
        w = np.full((self.N, self.N // 2 + 1), 2.0)
        w[:, 0] = 1.0
        w[:, -1] = 1.0
        return w

    def coordinates(self):
        x = np.arange(self.N) * self.dx
        return x[:, None], x[None, :]

    def index_of(self, n1, n2):
        """Storage index of the lattice mode (n1, n2) with n2 >= 0."""
        if n2 < 0:
            raise ValueError("stored modes have n2 >= 0; use the conjugate partner")
        return (n1 % self.N, n2)


def to_real(v, grid):
    return np.fft.irfft2(v, s=(grid.N, grid.N), axes=(-2, -1)) * (grid.N**2 / grid.L)


def to_spectral(u, grid):
    return np.fft.rfft2(u, axes=(-2, -1)) * (grid.L / grid.N**2)


def spectral_white(rng, grid):
    """Hermitian complex Gaussians with E|z_k|^2 = 1 in the rfft layout."""
    w = rng.standard_normal((grid.N, grid.N))
    return np.fft.rfft2(w) / grid.N

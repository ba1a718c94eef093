"""Coordinate feature maps and latent-query initialisers."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "GFFEncoder",
    "FixedSinusoidalEncoder",
    "SinusoidalQueryInit",
    "gff_encode",
    "fixed_sinusoidal_encode",
    "sinusoidal_query_init",
    "random_query_init",
]


def _as_points(coords, d_in: int) -> np.ndarray:
    x = np.asarray(coords, dtype=np.float64)
    if x.ndim == 1 and d_in == 1:
        x = x[:, None]
    if x.ndim != 2 or x.shape[1] != d_in:
        raise ValueError(f"expected coordinates of shape (points, {d_in}), got {x.shape}")
    return x


@dataclass(frozen=True)
class GFFEncoder:
    """Gaussian Fourier features ``[cos(2*pi*B x), sin(2*pi*B x)]``.

    ``B`` has shape ``(n_bands, input_dim)`` with entries drawn from
    ``N(0, scale**2)`` using ``seed``.  It is never trained.
    """

    input_dim: int
    n_bands: int
    scale: float
    seed: int = 0
    B: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.input_dim < 1 or self.n_bands < 1:
            raise ValueError("input_dim and n_bands must be positive")
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        if self.B is None:
            rng = np.random.default_rng(self.seed)
            B = rng.normal(0.0, self.scale, size=(self.n_bands, self.input_dim))
        else:
            B = np.array(self.B, dtype=np.float64)
            if B.shape != (self.n_bands, self.input_dim):
                raise ValueError(f"B has shape {B.shape}, expected {(self.n_bands, self.input_dim)}")
        B.setflags(write=False)
        object.__setattr__(self, "B", B)

    @property
    def out_dim(self) -> int:
        return 2 * self.n_bands

    def __call__(self, coords) -> np.ndarray:
        return gff_encode(self, coords)


def gff_encode(enc: GFFEncoder, coords) -> np.ndarray:
    x = _as_points(coords, enc.input_dim)
    proj = 2.0 * np.pi * (x @ enc.B.T)
    return np.concatenate([np.cos(proj), np.sin(proj)], axis=1)


def _fixed_frequencies(n_bands: int, input_dim: int, max_freq: float | None) -> np.ndarray:
    # bands are assigned round-robin to axes; each axis gets a log-stepped ladder starting at 1
    per_axis = -(-n_bands // input_dim)
    top = float(per_axis if max_freq is None else max_freq)
    if per_axis == 1:
        ladder = np.ones(1)
    else:
        ladder = top ** (np.arange(per_axis) / (per_axis - 1))
    F = np.zeros((n_bands, input_dim))
    for j in range(n_bands):
        F[j, j % input_dim] = ladder[j // input_dim]
    return F


def fixed_sinusoidal_encode(coords, n_bands: int, input_dim: int | None = None, max_freq: float | None = None) -> np.ndarray:
    """Axis-aligned sinusoidal features on a fixed log-stepped frequency ladder.

    Same output layout and width as :func:`gff_encode`.  Band 0 has frequency 1
    and frequencies grow geometrically up to ``max_freq`` (default: the number
    of bands per axis).
    """
    x = np.asarray(coords, dtype=np.float64)
    if input_dim is None:
        input_dim = 1 if x.ndim == 1 else x.shape[1]
    x = _as_points(x, input_dim)
    F = _fixed_frequencies(n_bands, input_dim, max_freq)
    proj = 2.0 * np.pi * (x @ F.T)
    return np.concatenate([np.cos(proj), np.sin(proj)], axis=1)


@dataclass(frozen=True)
class FixedSinusoidalEncoder:
    """Drop-in replacement for :class:`GFFEncoder` with fixed frequencies."""

    input_dim: int
    n_bands: int
    max_freq: float | None = None

    @property
    def out_dim(self) -> int:
        return 2 * self.n_bands

    @property
    def B(self) -> np.ndarray:
        return _fixed_frequencies(self.n_bands, self.input_dim, self.max_freq)

    def __call__(self, coords) -> np.ndarray:
        return fixed_sinusoidal_encode(coords, self.n_bands, self.input_dim, self.max_freq)


@dataclass(frozen=True)
class SinusoidalQueryInit:
    n_queries: int
    dim: int
    base: float = 10000.0

    def __post_init__(self):
        if self.dim % 2:
            raise ValueError(f"model width must be even, got {self.dim}")
        if self.n_queries < 1:
            raise ValueError("need at least one query")
        if not self.base > 1:
            raise ValueError(f"base must exceed 1, got {self.base}")

    @property
    def half(self) -> int:
        return self.dim // 2

    @property
    def scale(self) -> float:
        return self.half ** -0.5

    @property
    def frequencies(self) -> np.ndarray:
        d = self.half
        return self.base ** (-np.arange(d) / d)


def sinusoidal_query_init(init: SinusoidalQueryInit) -> np.ndarray:
    """Rows ``s * [cos(2*pi*nu*m), sin(2*pi*nu*m)]`` for ``m = 0..M-1``; unit norm."""
    m = np.arange(init.n_queries, dtype=np.float64)[:, None]
    phase = 2.0 * np.pi * m * init.frequencies[None, :]
    return init.scale * np.concatenate([np.cos(phase), np.sin(phase)], axis=1)


def random_query_init(n_queries: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    return rng.standard_normal((n_queries, dim))

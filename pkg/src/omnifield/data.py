"""Synthetic multimodal fields, sensor masks, windowing, normalisation and corruption.

The driving field is a sum of travelling sinusoids::

    S1(x, t) = sum_i A_i sin(k_i x - w_i t + phi_i)

and the coupled field is read off Kuramoto oscillators forced by the S1
component phases ``psi_i(x, t) = k_i x - w_i t + phi_i``, integrated
independently at every spatial column::

    d theta_j / dt = w'_j + (K / N) sum_i sin(psi_i - theta_j)
    S2(x, t) = sum_j B_j sin(theta_j)
"""

from __future__ import annotations

import hashlib
import itertools
from dataclasses import dataclass, field

import numpy as np

from .model import ContextSet, ModalityObservations

__all__ = [
    "S1Params",
    "KuramotoParams",
    "SensorMaskSet",
    "WindowSpec",
    "NoiseSpec",
    "ZScoreStats",
    "FieldDataset",
    "DataConfig",
    "InfeasibleMaskError",
    "derive_seed",
    "grid",
    "gen_s1",
    "s1_phases",
    "kuramoto_step",
    "gen_s2_kuramoto",
    "make_windows",
    "build_sensor_masks",
    "sparsify",
    "corrupt",
    "zscore_fit",
    "zscore_apply",
    "zscore_invert",
    "circular_variance",
    "generate_dataset",
    "SPARSITY_PRESETS",
]


class InfeasibleMaskError(ValueError):
    """Requested sensor overlap counts cannot be realised."""


def derive_seed(master: int, *parts) -> int:
    """Stable 63-bit seed from a master seed and labels."""
    h = hashlib.sha256(repr((int(master),) + tuple(parts)).encode()).digest()
    return int.from_bytes(h[:8], "little") >> 1


# fields --------------------------------------------------------------------------


@dataclass
class S1Params:
    n_components: int = 3
    amplitudes: np.ndarray | None = None
    wavenumbers: np.ndarray | None = None
    frequencies: np.ndarray | None = None
    phases: np.ndarray | None = None
    noise: bool = False
    noise_std: float = 0.1
    n_x: int = 100
    n_t: int = 500
    x_max: float = 10.0
    t_max: float = 50.0

    def __post_init__(self):
        if self.n_components < 1:
            raise ValueError("need at least one component")
        if self.n_x < 2 or self.n_t < 2:
            raise ValueError("grid needs at least two points per axis")
        for name in ("amplitudes", "wavenumbers", "frequencies", "phases"):
            v = getattr(self, name)
            if v is not None:
                v = np.asarray(v, dtype=np.float64).reshape(-1)
                if len(v) != self.n_components:
                    raise ValueError(f"{name} needs {self.n_components} entries, got {len(v)}")
                setattr(self, name, v)

    def resolved(self, rng: np.random.Generator) -> S1Params:
        """Copy with every unspecified coefficient drawn from its default range."""
        n = self.n_components

        def pick(v, lo, hi):
            return np.asarray(v, dtype=np.float64) if v is not None else rng.uniform(lo, hi, n)

        return S1Params(
            n,
            pick(self.amplitudes, 0.5, 1.5),
            pick(self.wavenumbers, 0.5, 3.0),
            pick(self.frequencies, 0.5, 3.0),
            pick(self.phases, 0.0, 2 * np.pi),
            self.noise,
            self.noise_std,
            self.n_x,
            self.n_t,
            self.x_max,
            self.t_max,
        )


def grid(p: S1Params) -> tuple[np.ndarray, np.ndarray]:
    """Spatial points ``linspace(0, x_max, n_x)``; times ``k * t_max / n_t``."""
    x = np.linspace(0.0, p.x_max, p.n_x)
    t = np.arange(p.n_t) * (p.t_max / p.n_t)
    return x, t


def s1_phases(p: S1Params, x, t) -> np.ndarray:
    """Component phases ``psi_i(x, t)`` with shape ``(N, len(x), len(t))`` (broadcast)."""
    x = np.asarray(x, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    k = p.wavenumbers[:, None, None]
    w = p.frequencies[:, None, None]
    ph = p.phases[:, None, None]
    return k * x.reshape(1, -1, 1) - w * t.reshape(1, 1, -1) + ph


def gen_s1(params: S1Params, seed: int) -> tuple[np.ndarray, S1Params]:
    """Driving field on the ``(n_x, n_t)`` grid, plus the resolved coefficients."""
    rng = np.random.default_rng(seed)
    p = params.resolved(rng)
    x, t = grid(p)
    field_ = np.sum(p.amplitudes[:, None, None] * np.sin(s1_phases(p, x, t)), axis=0)
    if p.noise:
        field_ = field_ + rng.normal(0.0, p.noise_std, field_.shape)
    return field_, p


@dataclass
class KuramotoParams:
    n_oscillators: int = 2
    natural_freqs: np.ndarray | None = None
    coupling: float = 2.5
    amplitudes: np.ndarray | None = None
    initial_phases: np.ndarray | None = None
    dt: float | None = None
    method: str = "euler"

    def __post_init__(self):
        if self.n_oscillators < 1:
            raise ValueError("need at least one oscillator")
        if self.coupling < 0:
            raise ValueError("coupling must be non-negative")
        if self.dt is not None and not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.method not in ("euler", "rk4"):
            raise ValueError(f"unknown integrator {self.method!r}")
        for name in ("natural_freqs", "amplitudes", "initial_phases"):
            v = getattr(self, name)
            if v is not None:
                v = np.asarray(v, dtype=np.float64).reshape(-1)
                if len(v) != self.n_oscillators:
                    raise ValueError(f"{name} needs {self.n_oscillators} entries, got {len(v)}")
                setattr(self, name, v)

    def resolved(self, rng: np.random.Generator) -> KuramotoParams:
        n = self.n_oscillators

        def pick(v, lo, hi):
            return np.asarray(v, dtype=np.float64) if v is not None else rng.uniform(lo, hi, n)

        return KuramotoParams(
            n,
            pick(self.natural_freqs, 0.5, 2.0),
            self.coupling,
            pick(self.amplitudes, 0.5, 1.5),
            pick(self.initial_phases, 0.0, 2 * np.pi),
            self.dt,
            self.method,
        )


def _kuramoto_rate(theta, psi, omega, K):
    # theta: (M, X); psi: (N, X)
    n = psi.shape[0]
    return omega[:, None] + (K / n) * np.sin(psi[None, :, :] - theta[:, None, :]).sum(axis=1)


def kuramoto_step(theta, psi, omega, K: float, dt: float) -> np.ndarray:
    """One explicit Euler step; ``theta`` is ``(M, X)`` and ``psi`` is ``(N, X)``."""
    theta = np.asarray(theta, dtype=np.float64)
    psi = np.asarray(psi, dtype=np.float64)
    return theta + dt * _kuramoto_rate(theta, psi, np.asarray(omega, dtype=np.float64), K)


def gen_s2_kuramoto(kp: KuramotoParams, s1p: S1Params, seed: int | None = None, x=None, t=None) -> tuple[np.ndarray, np.ndarray, KuramotoParams]:
    """Coupled field ``(n_x, n_t)``, phase trajectories ``(M, n_x, n_t)`` and resolved params.

    ``s1p`` must be resolved (all coefficients set).  Integration starts at
    ``t[0]`` and substeps of ``dt`` must tile each grid interval exactly.
    """
    kp = kp.resolved(np.random.default_rng(seed))
    if x is None or t is None:
        x, t = grid(s1p)
    x = np.asarray(x, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    spacing = float(t[1] - t[0]) if len(t) > 1 else 1.0
    dt = spacing if kp.dt is None else float(kp.dt)
    if not dt > 0:
        raise ValueError("dt must be positive")
    ratio = spacing / dt
    n_sub = int(round(ratio))
    if n_sub < 1 or abs(ratio - n_sub) > 1e-9 * max(1.0, ratio):
        raise ValueError(f"dt={dt} does not divide the grid spacing {spacing}")
    kp = KuramotoParams(kp.n_oscillators, kp.natural_freqs, kp.coupling, kp.amplitudes,
                        kp.initial_phases, dt, kp.method)
    omega, K = kp.natural_freqs, kp.coupling
    theta = np.repeat(kp.initial_phases[:, None], len(x), axis=1)
    traj = np.empty((kp.n_oscillators, len(x), len(t)))
    traj[:, :, 0] = theta

    def psi_at(tt):
        return s1_phases(s1p, x, np.array([tt]))[:, :, 0]

    for n in range(1, len(t)):
        t0 = t[n - 1]
        for s in range(n_sub):
            ts = t0 + s * dt
            if kp.method == "euler":
                theta = theta + dt * _kuramoto_rate(theta, psi_at(ts), omega, K)
            else:
                p0, ph, p1 = psi_at(ts), psi_at(ts + dt / 2), psi_at(ts + dt)
                k1 = _kuramoto_rate(theta, p0, omega, K)
                k2 = _kuramoto_rate(theta + dt / 2 * k1, ph, omega, K)
                k3 = _kuramoto_rate(theta + dt / 2 * k2, ph, omega, K)
                k4 = _kuramoto_rate(theta + dt * k3, p1, omega, K)
                theta = theta + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        traj[:, :, n] = theta
    field_ = np.sum(kp.amplitudes[:, None, None] * np.sin(traj), axis=0)
    return field_, traj, kp


def circular_variance(theta, axis: int = 0) -> np.ndarray:
    """``1 - |mean(exp(i theta))|`` along ``axis``."""
    return 1.0 - np.abs(np.mean(np.exp(1j * np.asarray(theta)), axis=axis))


# windows ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WindowSpec:
    input_len: int = 20
    pred_len: int = 1
    stride: int = 1

    def __post_init__(self):
        if self.input_len < 1 or self.pred_len < 1 or self.stride < 1:
            raise ValueError("window lengths and stride must be >= 1")

    def count(self, n_t: int) -> int:
        if n_t <= self.input_len + self.pred_len:
            raise ValueError(f"{n_t} timesteps cannot hold input {self.input_len} + horizon {self.pred_len}")
        return len(range(0, n_t - self.input_len - self.pred_len, self.stride))


def make_windows(n_t: int, spec: WindowSpec, train_frac: float = 0.8) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Window start indices and a chronological train/validation split of them."""
    starts = np.arange(0, n_t - spec.input_len - spec.pred_len, spec.stride)
    spec.count(n_t)
    n_train = int(np.floor(train_frac * len(starts)))
    idx = np.arange(len(starts))
    return starts, idx[:n_train], idx[n_train:]


# sensor masks ------------------------------------------------------------------------


@dataclass
class SensorMaskSet:
    incidence: np.ndarray
    counts: dict = field(default_factory=dict)

    @property
    def n_modalities(self) -> int:
        return self.incidence.shape[1]

    def sensors(self, j: int) -> np.ndarray:
        return np.flatnonzero(self.incidence[:, j])

    def union(self) -> np.ndarray:
        return np.flatnonzero(self.incidence.any(axis=1))

    def intersection(self) -> np.ndarray:
        return np.flatnonzero(self.incidence.all(axis=1))


def _mask_counts(A: np.ndarray) -> dict:
    M = A.shape[1]
    rows = A.sum(axis=1)
    out = {
        "per_modality": [int(c) for c in A.sum(axis=0)],
        "shared": int((rows == M).sum()),
        "exclusive": [int(((rows == 1) & (A[:, j] == 1)).sum()) for j in range(M)],
        "union": int((rows > 0).sum()),
    }
    if M >= 3:
        out["pairwise_only"] = {
            f"{i}-{j}": int(((rows == 2) & (A[:, i] == 1) & (A[:, j] == 1)).sum())
            for i, j in itertools.combinations(range(M), 2)
        }
    return out


def build_sensor_masks(
    catalog,
    n_modalities: int,
    per_modality: int | None = None,
    shared: int = 0,
    pairwise: int | None = None,
    exclusive: int | None = None,
    seed: int = 0,
) -> SensorMaskSet:
    """Random fixed incidence matrix ``(catalog, modalities)`` with exact overlap counts.

    ``catalog`` is a location array or an integer size.  With ``pairwise`` and
    ``exclusive`` given, every overlap class is exact: ``shared`` sites seen by
    all modalities, ``pairwise`` sites per pair seen by exactly that pair, and
    ``exclusive`` sites per modality.  With only ``per_modality`` and ``shared``,
    each modality is topped up to ``per_modality`` at random while keeping the
    all-modality overlap at exactly ``shared``.
    """
    n_cat = int(catalog) if np.isscalar(catalog) else len(catalog)
    M = int(n_modalities)
    if M < 1:
        raise ValueError("need at least one modality")
    if shared < 0 or (pairwise or 0) < 0 or (exclusive or 0) < 0:
        raise InfeasibleMaskError("counts must be non-negative")
    rng = np.random.default_rng(seed)
    A = np.zeros((n_cat, M), dtype=np.int64)
    exact = pairwise is not None or exclusive is not None
    if exact:
        pairwise = pairwise or 0
        exclusive = exclusive or 0
        if M < 3 and pairwise:
            raise InfeasibleMaskError("pairwise-only sites need at least three modalities")
        n_pairs = M * (M - 1) // 2 if M >= 3 else 0
        total = shared + (M - 1) * pairwise + exclusive if M >= 3 else shared + exclusive
        if per_modality is not None and per_modality != total:
            raise InfeasibleMaskError(
                f"per-modality count {per_modality} != shared {shared} + pairwise + exclusive = {total}"
            )
        need = shared + n_pairs * pairwise + M * exclusive
        if need > n_cat:
            raise InfeasibleMaskError(f"catalog of {n_cat} cannot hold {need} sensors")
        order = rng.permutation(n_cat)
        pos = 0
        A[order[pos : pos + shared], :] = 1
        pos += shared
        if M >= 3:
            for i, j in itertools.combinations(range(M), 2):
                A[order[pos : pos + pairwise], i] = 1
                A[order[pos : pos + pairwise], j] = 1
                pos += pairwise
        for j in range(M):
            A[order[pos : pos + exclusive], j] = 1
            pos += exclusive
    else:
        if per_modality is None:
            raise InfeasibleMaskError("need per_modality or explicit overlap classes")
        if shared > per_modality:
            raise InfeasibleMaskError("shared count exceeds per-modality count")
        if M == 1 and shared != per_modality:
            raise InfeasibleMaskError("a single modality overlaps itself fully")
        if shared + M * (per_modality - shared) > n_cat and shared + (per_modality - shared) > n_cat:
            raise InfeasibleMaskError(f"catalog of {n_cat} too small")
        order = rng.permutation(n_cat)
        A[order[:shared], :] = 1
        rest = per_modality - shared
        for j in range(M):
            # never complete a full overlap outside the shared block
            others = np.delete(A, j, axis=1)
            blocked = (others.sum(axis=1) == M - 1) if M > 1 else np.zeros(n_cat, bool)
            free = np.flatnonzero((A[:, j] == 0) & ~blocked)
            if len(free) < rest:
                raise InfeasibleMaskError(f"catalog of {n_cat} too small for modality {j}")
            A[rng.choice(free, size=rest, replace=False), j] = 1
    return SensorMaskSet(A, _mask_counts(A))


# observations ------------------------------------------------------------------------


def sparsify(fields, locations, masks: SensorMaskSet, modalities, t_in: float = 0.0, times=None) -> dict[str, ModalityObservations]:
    """Restrict fields to each modality's sensor sites.

    ``fields`` is ``(M, X)`` for a single time or ``(M, X, L)`` with ``times``
    of length ``L``.  Points are emitted site-major in index order, then time.
    """
    fields = np.asarray(fields, dtype=np.float64)
    loc = np.asarray(locations, dtype=np.float64)
    if loc.ndim == 1:
        loc = loc[:, None]
    if masks.incidence.shape[0] != fields.shape[1] or loc.shape[0] != fields.shape[1]:
        raise IndexError("mask catalog size does not match the field's spatial extent")
    out = {}
    for j, m in enumerate(modalities):
        sites = masks.sensors(j)
        if fields.ndim == 2:
            out[m] = ModalityObservations(m, loc[sites], fields[j, sites], t_in)
        else:
            L = fields.shape[2]
            tt = np.asarray(times, dtype=np.float64)
            if tt.shape != (L,):
                raise ValueError("times must match the field's time extent")
            vals = fields[j][sites].reshape(-1)
            out[m] = ModalityObservations(
                m, np.repeat(loc[sites], L, axis=0), vals, t_in, np.tile(tt, len(sites))
            )
    return out


@dataclass(frozen=True)
class NoiseSpec:
    k_max: int = 2
    sigma: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.k_max < 1:
            raise ValueError("k_max must be >= 1")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")


def corrupt(context: ContextSet, spec: NoiseSpec, rng: np.random.Generator) -> ContextSet:
    """Add per-sample scaled Gaussian noise to ``k`` uniformly chosen present modalities.

    ``k`` is uniform on ``1..k_max``; the noise standard deviation for a
    modality is ``sigma`` times the standard deviation of that modality's
    observed values in this sample.  At least one present modality stays clean.
    """
    present = [m for m in context.observations if context.present(m)]
    if spec.k_max >= len(present):
        raise ValueError(f"k_max={spec.k_max} would leave no clean modality among {len(present)} present")
    if spec.sigma == 0:
        return context
    k = int(rng.integers(1, spec.k_max + 1))
    chosen = sorted(rng.choice(len(present), size=k, replace=False))
    obs = dict(context.observations)
    for i in chosen:
        m = present[i]
        o = obs[m]
        std = float(np.std(o.values))
        obs[m] = o.replace_values(o.values + rng.normal(0.0, spec.sigma * std, o.n))
    return ContextSet(obs, dict(context.presence))


# normalisation ----------------------------------------------------------------------------


@dataclass(frozen=True)
class ZScoreStats:
    mean: float
    std: float


def zscore_fit(values) -> ZScoreStats:
    v = np.asarray(values, dtype=np.float64)
    mu = float(v.mean())
    sd = float(v.std())
    if not sd > 0:
        raise ValueError("cannot normalise a constant modality (zero variance)")
    return ZScoreStats(mu, sd)


def zscore_apply(values, stats: ZScoreStats) -> np.ndarray:
    return (np.asarray(values, dtype=np.float64) - stats.mean) / stats.std


def zscore_invert(values, stats: ZScoreStats) -> np.ndarray:
    return np.asarray(values, dtype=np.float64) * stats.std + stats.mean


# datasets ------------------------------------------------------------------------------------


SPARSITY_PRESETS = {
    # (shared, exclusive) sites per modality on the 1-D catalog
    "dense": None,
    "~50": (20, 30),
    "~30": (10, 20),
}


@dataclass
class DataConfig:
    kind: str = "s1s2"
    n_x: int = 100
    n_t: int = 500
    x_max: float = 10.0
    t_max: float = 50.0
    n_components: int = 3
    n_oscillators: int = 2
    coupling: float = 2.5
    dt: float | None = None
    integrator: str = "euler"
    noise: bool = False
    input_len: int = 20
    pred_len: int = 1
    stride: int = 1
    train_frac: float = 0.8
    sparsity: str = "~50"
    shared: int | None = None
    exclusive: int | None = None
    seed: int = 0


@dataclass
class FieldDataset:
    """Gridded ground truth plus the fixed sensor layout and windowing.

    ``fields`` has shape ``(M, X, T)`` in physical units.  ``input_fields``,
    when set, replaces the values read into contexts (targets always come from
    ``fields``).
    """

    modalities: list
    fields: np.ndarray
    x: np.ndarray
    t: np.ndarray
    masks: SensorMaskSet
    window: WindowSpec
    starts: np.ndarray
    train_idx: np.ndarray
    val_idx: np.ndarray
    stats: dict
    metadata: dict = field(default_factory=dict)
    input_fields: np.ndarray | None = None

    @property
    def n_windows(self) -> int:
        return len(self.starts)

    @property
    def locations(self) -> np.ndarray:
        return self.x.reshape(len(self.x), -1)

    def modality_index(self, m: str) -> int:
        return self.modalities.index(m)

    def window_times(self, w: int) -> tuple[np.ndarray, int]:
        """Input time indices of window ``w`` and the index of its last input step."""
        s = int(self.starts[w])
        idx = np.arange(s, s + self.window.input_len)
        return idx, int(idx[-1])

    def normalized(self, m: str, values) -> np.ndarray:
        return zscore_apply(values, self.stats[m])


def generate_dataset(cfg: DataConfig) -> FieldDataset:
    if cfg.kind != "s1s2":
        raise ValueError(f"data kind {cfg.kind!r} cannot be generated locally")
    s1p = S1Params(cfg.n_components, noise=cfg.noise, n_x=cfg.n_x, n_t=cfg.n_t, x_max=cfg.x_max, t_max=cfg.t_max)
    s1, s1r = gen_s1(s1p, derive_seed(cfg.seed, "s1"))
    kp = KuramotoParams(cfg.n_oscillators, coupling=cfg.coupling, dt=cfg.dt, method=cfg.integrator)
    s2, _, kpr = gen_s2_kuramoto(kp, s1r, derive_seed(cfg.seed, "s2"))
    x, t = grid(s1r)
    fields = np.stack([s1, s2])
    mods = ["S1", "S2"]
    if cfg.shared is not None or cfg.exclusive is not None:
        shared, excl = cfg.shared or 0, cfg.exclusive or 0
    elif SPARSITY_PRESETS.get(cfg.sparsity, 0) is None:
        shared, excl = cfg.n_x, 0
    elif cfg.sparsity in SPARSITY_PRESETS:
        shared, excl = SPARSITY_PRESETS[cfg.sparsity]
    else:
        raise ValueError(f"unknown sparsity preset {cfg.sparsity!r}")
    masks = build_sensor_masks(cfg.n_x, len(mods), shared=shared, exclusive=excl, seed=derive_seed(cfg.seed, "masks"))
    spec = WindowSpec(cfg.input_len, cfg.pred_len, cfg.stride)
    starts, tr, va = make_windows(cfg.n_t, spec, cfg.train_frac)
    # statistics from the time span touched by training windows only
    t_end = int(starts[tr[-1]]) + cfg.input_len + cfg.pred_len if len(tr) else cfg.n_t
    stats = {m: zscore_fit(fields[j, :, :t_end]) for j, m in enumerate(mods)}
    meta = {
        "generator": "s1s2",
        "seed": cfg.seed,
        "s1": {
            "amplitudes": s1r.amplitudes.tolist(),
            "wavenumbers": s1r.wavenumbers.tolist(),
            "frequencies": s1r.frequencies.tolist(),
            "phases": s1r.phases.tolist(),
            "noise": cfg.noise,
        },
        "kuramoto": {
            "natural_freqs": kpr.natural_freqs.tolist(),
            "amplitudes": kpr.amplitudes.tolist(),
            "initial_phases": kpr.initial_phases.tolist(),
            "coupling": kpr.coupling,
            "dt": kpr.dt,
            "method": kpr.method,
        },
        "mask_counts": masks.counts,
    }
    return FieldDataset(mods, fields, x, t, masks, spec, starts, tr, va, stats, meta)

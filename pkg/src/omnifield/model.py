"""Multimodal conditioned neural field with iterative cross-modal refinement.

Layout of one forward pass::

    observations of modality m  --input MLP + positional features-->  tokens
    for stage k = 0..L-1:
        latents_m = CrossAttn(stage-k latent bank of m, tokens of m)      (zero if absent)
        h_k = Processor_k(concat_m(latents_m) + z_k)                       (absent tokens masked)
        z_{k+1} = mean over present tokens of h_k                          (z_0 = 0)
    g = h_{L-1} -> self-attention trunk
    query (space, time) features -> CrossAttn into g -> per-modality head

All heavy lifting runs through :mod:`omnifield.tensor` so gradients are
available for every parameter.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Iterator, Sequence

import numpy as np

from . import tensor as T
from .encodings import (
    FixedSinusoidalEncoder,
    GFFEncoder,
    SinusoidalQueryInit,
    random_query_init,
    sinusoidal_query_init,
)

__all__ = [
    "ModalityObservations",
    "ContextSet",
    "QuerySet",
    "ICMRState",
    "ModelConfig",
    "Batch",
    "OmniFieldModel",
    "encode_modality",
    "mct_block",
    "icmr_forward",
    "decode",
    "forward",
    "midfusion_forward",
    "masked_loss",
    "mse_masked_loss",
]


# domain types ----------------------------------------------------------------


@dataclass
class ModalityObservations:
    """Irregular observations of one modality around input time ``t_in``.

    ``times`` holds per-point absolute times; ``None`` means every point was
    measured at ``t_in``.
    """

    modality: str
    locations: np.ndarray
    values: np.ndarray
    t_in: float = 0.0
    times: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        loc = np.asarray(self.locations, dtype=np.float64)
        if loc.ndim == 1:
            loc = loc.reshape(len(self.values), -1) if len(self.values) else loc.reshape(0, 1)
        self.locations = loc
        if loc.shape[0] != self.values.shape[0]:
            raise ValueError(f"{self.modality}: {loc.shape[0]} locations but {self.values.shape[0]} values")
        if not np.all(np.isfinite(loc)):
            raise ValueError(f"{self.modality}: non-finite locations")
        if self.times is not None:
            self.times = np.asarray(self.times, dtype=np.float64).reshape(-1)
            if self.times.shape[0] != self.values.shape[0]:
                raise ValueError(f"{self.modality}: times and values differ in length")

    @property
    def n(self) -> int:
        return int(self.values.shape[0])

    def point_times(self) -> np.ndarray:
        return np.full(self.n, self.t_in) if self.times is None else self.times

    def replace_values(self, values) -> ModalityObservations:
        return ModalityObservations(self.modality, self.locations, values, self.t_in, self.times)


@dataclass
class ContextSet:
    """Per-modality observations plus presence bits.

    A modality may carry stored observations while its presence bit is 0 (for
    instance a held-out modality in cross-modal prediction); such observations
    never reach the network.
    """

    observations: dict[str, ModalityObservations]
    presence: dict[str, int] = None

    def __post_init__(self):
        if self.presence is None:
            self.presence = {m: int(o.n > 0) for m, o in self.observations.items()}
        for m, p in self.presence.items():
            if p and (m not in self.observations or self.observations[m].n == 0):
                raise ValueError(f"modality {m!r} marked present but has no observations")

    def present(self, m: str) -> bool:
        return bool(self.presence.get(m, 0))

    @property
    def t_in(self) -> float:
        for o in self.observations.values():
            return o.t_in
        raise ValueError("empty context")


@dataclass
class QuerySet:
    """Requested (modality, location) pairs at ``t_in + delta_t``."""

    locations: dict[str, np.ndarray]
    t_in: float
    delta_t: float = 0.0
    supervised: dict[str, int] = None
    task: str = ""

    def __post_init__(self):
        locs = {}
        for m, v in self.locations.items():
            a = np.asarray(v, dtype=np.float64)
            locs[m] = a[:, None] if a.ndim == 1 else a
        self.locations = locs
        if self.supervised is None:
            self.supervised = {m: 0 for m in self.locations}
        if self.delta_t < 0:
            raise ValueError("delta_t must be non-negative")

    @property
    def t_out(self) -> float:
        return self.t_in + self.delta_t


@dataclass
class ICMRState:
    stage: int
    z: np.ndarray
    h: np.ndarray


@dataclass
class ModelConfig:
    modalities: list = field(default_factory=lambda: ["S1", "S2"])
    spatial_dim: int = 1
    dim: int = 32
    n_latents: int = 16
    n_stages: int = 3
    blocks_per_stage: int = 1
    trunk_blocks: int = 1
    cross_heads: int = 2
    cross_dim_head: int = 16
    self_heads: int = 2
    self_dim_head: int = 16
    ff_mult: int = 4
    input_mlp_dim: int = 32
    space_bands: int = 16
    space_scale: float = 2.0
    time_bands: int = 8
    time_scale: float = 1.0
    query_combine: str = "concat"
    space_norm: float = 1.0
    time_norm: float = 1.0
    gff: bool = True
    sin_init: bool = True
    sin_base: float = 10000.0
    fusion: str = "icmr"
    share_encoders: bool = False
    seed: int = 0

    def validate(self) -> None:
        if self.n_stages < 1:
            raise ValueError("need at least one stage")
        if self.dim % 2:
            raise ValueError("model width must be even")
        if self.fusion not in ("icmr", "mid_fusion"):
            raise ValueError(f"unknown fusion {self.fusion!r}")
        if self.query_combine not in ("concat", "sum"):
            raise ValueError(f"unknown query_combine {self.query_combine!r}")
        if self.query_combine == "sum" and self.space_bands != self.time_bands:
            raise ValueError("query_combine='sum' needs equal space and time band counts")
        if len(set(self.modalities)) != len(self.modalities) or not self.modalities:
            raise ValueError("modality catalog must be non-empty and unique")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["modalities"] = list(d["modalities"])
        return d


# layers ----------------------------------------------------------------------


def _param(arr) -> T.Tensor:
    return T.Tensor(np.array(arr, dtype=T.get_default_dtype()), requires_grad=True)


class Module:
    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, T.Tensor]]:
        for name, value in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(value, T.Tensor) and value.requires_grad:
                yield key, value
            elif isinstance(value, Module):
                yield from value.named_parameters(key + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{key}.{i}.")
            elif isinstance(value, dict):
                for k, item in value.items():
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{key}.{k}.")

    def parameters(self) -> dict[str, T.Tensor]:
        # shared submodules appear once, under their first name
        out, seen = {}, set()
        for name, p in self.named_parameters():
            if id(p) not in seen:
                seen.add(id(p))
                out[name] = p
        return out


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True):
        self.W = _param(rng.normal(0.0, n_in**-0.5, size=(n_in, n_out)))
        self.b = _param(np.zeros(n_out)) if bias else None

    def __call__(self, x: T.Tensor) -> T.Tensor:
        lead = x.shape[:-1]
        y = T.matmul(T.reshape(x, (-1, x.shape[-1])), self.W)
        if self.b is not None:
            y = T.add(y, self.b)
        return T.reshape(y, lead + (y.shape[-1],))


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gain = _param(np.ones(dim))
        self.bias = _param(np.zeros(dim))

    def __call__(self, x):
        return T.layer_norm(x, self.gain, self.bias)


class MLP(Module):
    """Two-layer perceptron with a GELU in between."""

    def __init__(self, n_in: int, hidden: int, n_out: int, rng):
        self.fc1 = Linear(n_in, hidden, rng)
        self.fc2 = Linear(hidden, n_out, rng)

    def __call__(self, x):
        return self.fc2(T.gelu(self.fc1(x)))


class GEGLU(Module):
    """Feed-forward ``(gelu(x W) * (x V)) W2``."""

    def __init__(self, dim: int, mult: int, rng):
        inner = dim * mult
        self.gate = Linear(dim, inner, rng)
        self.value = Linear(dim, inner, rng)
        self.out = Linear(inner, dim, rng)

    def __call__(self, x):
        return self.out(T.mul(T.gelu(self.gate(x)), self.value(x)))


def additive_mask(valid: np.ndarray) -> np.ndarray:
    return np.where(valid, 0.0, T.MASK_VALUE)


class Attention(Module):
    def __init__(self, q_dim: int, kv_dim: int, heads: int, dim_head: int, out_dim: int, rng):
        inner = heads * dim_head
        self.heads, self.dim_head = heads, dim_head
        self.to_q = Linear(q_dim, inner, rng, bias=False)
        self.to_k = Linear(kv_dim, inner, rng, bias=False)
        self.to_v = Linear(kv_dim, inner, rng, bias=False)
        self.to_out = Linear(inner, out_dim, rng)

    def __call__(self, xq: T.Tensor, xkv: T.Tensor, key_mask: np.ndarray | None = None) -> T.Tensor:
        B, nq, _ = xq.shape
        nk = xkv.shape[1]
        H, dh = self.heads, self.dim_head
        q = T.transpose(T.reshape(self.to_q(xq), (B, nq, H, dh)), (0, 2, 1, 3))
        k = T.transpose(T.reshape(self.to_k(xkv), (B, nk, H, dh)), (0, 2, 3, 1))
        v = T.transpose(T.reshape(self.to_v(xkv), (B, nk, H, dh)), (0, 2, 1, 3))
        logits = T.scale(T.matmul(q, k), dh**-0.5)
        mask = None if key_mask is None else key_mask[:, None, None, :]
        attn = T.softmax(logits, mask=mask)
        out = T.transpose(T.matmul(attn, v), (0, 2, 1, 3))
        return self.to_out(T.reshape(out, (B, nq, H * dh)))


class CrossAttnBlock(Module):
    def __init__(self, q_dim, kv_dim, heads, dim_head, ff_mult, rng):
        self.norm_q = LayerNorm(q_dim)
        self.norm_kv = LayerNorm(kv_dim)
        self.attn = Attention(q_dim, kv_dim, heads, dim_head, q_dim, rng)
        self.norm_ff = LayerNorm(q_dim)
        self.ff = GEGLU(q_dim, ff_mult, rng)

    def __call__(self, x, ctx, key_mask=None):
        x = T.add(x, self.attn(self.norm_q(x), self.norm_kv(ctx), key_mask))
        return T.add(x, self.ff(self.norm_ff(x)))


class SelfAttnBlock(Module):
    def __init__(self, dim, heads, dim_head, ff_mult, rng):
        self.norm = LayerNorm(dim)
        self.attn = Attention(dim, dim, heads, dim_head, dim, rng)
        self.norm_ff = LayerNorm(dim)
        self.ff = GEGLU(dim, ff_mult, rng)

    def __call__(self, x, key_mask=None):
        y = self.norm(x)
        x = T.add(x, self.attn(y, y, key_mask))
        return T.add(x, self.ff(self.norm_ff(x)))


class ModalityEncoder(Module):
    """Learnable latent bank cross-attending into one modality's tokens."""

    def __init__(self, cfg: ModelConfig, token_dim: int, rng):
        if cfg.sin_init:
            init = sinusoidal_query_init(SinusoidalQueryInit(cfg.n_latents, cfg.dim, cfg.sin_base))
        else:
            init = random_query_init(cfg.n_latents, cfg.dim, rng)
        self.latents = _param(init)
        self.block = CrossAttnBlock(cfg.dim, token_dim, cfg.cross_heads, cfg.cross_dim_head, cfg.ff_mult, rng)

    def __call__(self, tokens: T.Tensor, key_mask: np.ndarray) -> T.Tensor:
        B = tokens.shape[0]
        lat = T.add(np.zeros((B, 1, 1), dtype=self.latents.data.dtype), self.latents)
        return self.block(lat, tokens, key_mask)


class Stage(Module):
    def __init__(self, cfg: ModelConfig, token_dim: int, rng, encoders: dict | None = None):
        self.encoders = encoders if encoders is not None else {
            m: ModalityEncoder(cfg, token_dim, rng) for m in cfg.modalities
        }
        self.processor = [
            SelfAttnBlock(cfg.dim, cfg.self_heads, cfg.self_dim_head, cfg.ff_mult, rng)
            for _ in range(cfg.blocks_per_stage)
        ]


# batching --------------------------------------------------------------------


@dataclass
class Batch:
    """Padded, feature-encoded form of a list of (context, queries) instances."""

    modalities: list
    obs_feats: dict
    obs_pos: dict
    obs_valid: dict
    presence: np.ndarray
    query_feats: dict
    query_valid: dict
    supervised: np.ndarray
    targets: dict | None = None

    @property
    def size(self) -> int:
        return self.presence.shape[0]


# model -------------------------------------------------------------------------


class OmniFieldModel(Module):
    def __init__(self, cfg: ModelConfig, space_B: np.ndarray | None = None, time_B: np.ndarray | None = None):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        if cfg.gff:
            self.space_enc = GFFEncoder(cfg.spatial_dim, cfg.space_bands, cfg.space_scale, cfg.seed + 1, B=space_B)
            self.time_enc = GFFEncoder(1, cfg.time_bands, cfg.time_scale, cfg.seed + 2, B=time_B)
        else:
            self.space_enc = FixedSinusoidalEncoder(cfg.spatial_dim, cfg.space_bands)
            self.time_enc = FixedSinusoidalEncoder(1, cfg.time_bands)
        pos_dim = self.space_enc.out_dim + self.time_enc.out_dim
        token_dim = cfg.input_mlp_dim + pos_dim
        if cfg.query_combine == "concat":
            q_dim = pos_dim
        else:
            q_dim = self.space_enc.out_dim
        self.input_proj = {
            m: MLP(cfg.spatial_dim + 2, cfg.input_mlp_dim, cfg.input_mlp_dim, rng) for m in cfg.modalities
        }
        stages = []
        shared = None
        for _ in range(cfg.n_stages):
            stage = Stage(cfg, token_dim, rng, encoders=shared)
            if cfg.share_encoders:
                shared = stage.encoders
            stages.append(stage)
        self.stages = stages
        self.trunk = [
            SelfAttnBlock(cfg.dim, cfg.self_heads, cfg.self_dim_head, cfg.ff_mult, rng)
            for _ in range(cfg.trunk_blocks)
        ]
        self.query_proj = Linear(q_dim, cfg.dim, rng)
        self.reader = CrossAttnBlock(cfg.dim, cfg.dim, cfg.cross_heads, cfg.cross_dim_head, cfg.ff_mult, rng)
        self.heads = {m: MLP(cfg.dim, cfg.dim, 1, rng) for m in cfg.modalities}

    # bookkeeping

    @property
    def modalities(self) -> list:
        return list(self.cfg.modalities)

    def num_parameters(self) -> int:
        return int(np.sum([p.size for p in self.parameters().values()]))

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"param/{k}": v.data for k, v in self.parameters().items()}
        if self.cfg.gff:
            out["gff/space_B"] = self.space_enc.B
            out["gff/time_B"] = self.time_enc.B
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, p in self.parameters().items():
            arr = arrays[f"param/{k}"]
            if arr.shape != p.shape:
                raise ValueError(f"parameter {k}: shape {arr.shape} != {p.shape}")
            p.data = np.array(arr, dtype=p.data.dtype)

    @classmethod
    def from_state(cls, cfg: ModelConfig, arrays: dict[str, np.ndarray]) -> OmniFieldModel:
        model = cls(cfg, space_B=arrays.get("gff/space_B"), time_B=arrays.get("gff/time_B"))
        model.load_state_arrays(arrays)
        return model

    # features

    def _pos(self, locations: np.ndarray, t_rel: np.ndarray) -> np.ndarray:
        cfg = self.cfg
        s = self.space_enc(locations * cfg.space_norm)
        t = self.time_enc((t_rel * cfg.time_norm)[:, None])
        return np.concatenate([s, t], axis=1)

    def _query_features(self, locations: np.ndarray, dt: float) -> np.ndarray:
        cfg = self.cfg
        s = self.space_enc(locations * cfg.space_norm)
        t = self.time_enc(np.full((len(locations), 1), dt * cfg.time_norm))
        if cfg.query_combine == "concat":
            return np.concatenate([s, t], axis=1)
        return s + t

    def collate(self, contexts: Sequence[ContextSet], queries: Sequence[QuerySet], targets: Sequence[dict] | None = None) -> Batch:
        cfg = self.cfg
        mods = self.modalities
        B = len(contexts)
        if len(queries) != B or (targets is not None and len(targets) != B):
            raise ValueError("contexts, queries and targets must align")
        dtype = T.get_default_dtype()
        presence = np.zeros((B, len(mods)), dtype=bool)
        for b, ctx in enumerate(contexts):
            for m in ctx.presence:
                if m not in mods:
                    raise KeyError(f"unknown modality {m!r}")
            for j, m in enumerate(mods):
                presence[b, j] = ctx.present(m)
            if not presence[b].any():
                raise ValueError("context has no present modality")
        feat_dim = cfg.spatial_dim + 2
        pos_dim = self.space_enc.out_dim + self.time_enc.out_dim
        obs_feats, obs_pos, obs_valid = {}, {}, {}
        for j, m in enumerate(mods):
            counts = [contexts[b].observations[m].n if presence[b, j] else 0 for b in range(B)]
            n_max = max(counts)
            f = np.zeros((B, n_max, feat_dim), dtype=dtype)
            p = np.zeros((B, n_max, pos_dim), dtype=dtype)
            v = np.zeros((B, n_max), dtype=bool)
            for b in range(B):
                if not counts[b]:
                    continue
                o = contexts[b].observations[m]
                t_rel = o.point_times() - o.t_in
                n = counts[b]
                f[b, :n, 0] = o.values
                f[b, :n, 1 : 1 + cfg.spatial_dim] = o.locations * cfg.space_norm
                f[b, :n, -1] = t_rel * cfg.time_norm
                p[b, :n] = self._pos(o.locations, t_rel)
                v[b, :n] = True
            obs_feats[m], obs_pos[m], obs_valid[m] = f, p, v
        q_dim = self.query_proj.W.shape[0]
        query_feats, query_valid, tgt = {}, {}, {} if targets is not None else None
        supervised = np.zeros((B, len(mods)), dtype=bool)
        for q in queries:
            for m in q.locations:
                if m not in mods:
                    raise KeyError(f"unknown modality {m!r}")
        for j, m in enumerate(mods):
            counts = [len(q.locations.get(m, ())) for q in queries]
            n_max = max(counts)
            if n_max == 0:
                continue
            f = np.zeros((B, n_max, q_dim), dtype=dtype)
            v = np.zeros((B, n_max), dtype=bool)
            y = np.zeros((B, n_max), dtype=dtype) if targets is not None else None
            for b, q in enumerate(queries):
                n = counts[b]
                if n:
                    f[b, :n] = self._query_features(q.locations[m], q.delta_t)
                    v[b, :n] = True
                supervised[b, j] = bool(q.supervised.get(m, 0)) and n > 0
                if y is not None and supervised[b, j]:
                    if m not in targets[b]:
                        raise ValueError(f"modality {m!r} supervised but no targets given")
                    y[b, :n] = targets[b][m]
            query_feats[m], query_valid[m] = f, v
            if y is not None:
                tgt[m] = y
        return Batch(mods, obs_feats, obs_pos, obs_valid, presence, query_feats, query_valid, supervised, tgt)

    # network pieces

    def observation_tokens(self, batch: Batch, m: str) -> T.Tensor:
        proj = self.input_proj[m](T.Tensor(batch.obs_feats[m]))
        return T.concat([proj, T.Tensor(batch.obs_pos[m])], axis=-1)

    def encode_modality(self, stage: int, m: str, tokens: T.Tensor | None, batch: Batch) -> T.Tensor:
        """Latent tokens ``(B, n_latents, dim)`` of modality ``m``; zero where absent."""
        j = self.modalities.index(m)
        pres = batch.presence[:, j]
        B = batch.size
        zeros = np.zeros((B, self.cfg.n_latents, self.cfg.dim), dtype=T.get_default_dtype())
        if tokens is None or not pres.any():
            return T.Tensor(zeros)
        out = self.stages[stage].encoders[m](tokens, additive_mask(batch.obs_valid[m]))
        if pres.all():
            return out
        gate = pres.astype(zeros.dtype)[:, None, None]
        return T.mul(out, gate)

    def token_valid(self, batch: Batch) -> np.ndarray:
        return np.repeat(batch.presence, self.cfg.n_latents, axis=1)

    def token_mean(self, h: T.Tensor, token_valid: np.ndarray) -> T.Tensor:
        """Mean over the tokens of present modalities, shape ``(B, 1, dim)``."""
        w = token_valid / np.maximum(token_valid.sum(axis=1, keepdims=True), 1)
        return T.sum(T.mul(h, w[:, :, None].astype(h.data.dtype)), axis=1, keepdims=True)

    def mct_block(self, stage: int, latent_tokens: Sequence[T.Tensor], z: T.Tensor | None, token_valid: np.ndarray) -> T.Tensor:
        widths = {t.shape[-1] for t in latent_tokens}
        if widths != {self.cfg.dim} or (z is not None and z.shape[-1] != self.cfg.dim):
            raise T.ShapeError(f"token width mismatch: {widths}, expected {self.cfg.dim}")
        x = T.concat(list(latent_tokens), axis=1)
        if z is not None:
            x = T.add(x, z)
        mask = additive_mask(token_valid)
        for blk in self.stages[stage].processor:
            x = blk(x, mask)
        return x

    def icmr_forward(self, batch: Batch, trace: list | None = None, fusion: str | None = None) -> T.Tensor:
        fusion = fusion or self.cfg.fusion
        tokens = {
            m: self.observation_tokens(batch, m) if batch.presence[:, j].any() else None
            for j, m in enumerate(self.modalities)
        }
        valid = self.token_valid(batch)
        L = self.cfg.n_stages
        z = T.Tensor(np.zeros((batch.size, 1, self.cfg.dim), dtype=T.get_default_dtype()))
        # without feedback, earlier stages cannot influence the last one
        stages = range(L) if fusion == "icmr" else [L - 1]
        h = None
        for k in stages:
            lat = [self.encode_modality(k, m, tokens[m], batch) for m in self.modalities]
            h = self.mct_block(k, lat, z, valid)
            z_next = self.token_mean(h, valid)
            if trace is not None:
                trace.append(ICMRState(k, z.data.copy(), h.data.copy()))
            if fusion == "icmr":
                z = z_next
        return h

    def decode(self, g: T.Tensor, batch: Batch) -> dict[str, T.Tensor]:
        mask = additive_mask(self.token_valid(batch))
        x = g
        for blk in self.trunk:
            x = blk(x, mask)
        mods = [m for m in self.modalities if m in batch.query_feats]
        if not mods:
            return {}
        sizes = [batch.query_feats[m].shape[1] for m in mods]
        qf = np.concatenate([batch.query_feats[m] for m in mods], axis=1)
        q = self.reader(self.query_proj(T.Tensor(qf)), x, mask)
        out, start = {}, 0
        for m, n in zip(mods, sizes):
            out[m] = self.heads[m](T.take(q, (slice(None), slice(start, start + n))))
            start += n
        return out

    def forward_batch(self, batch: Batch, fusion: str | None = None, trace: list | None = None) -> dict[str, T.Tensor]:
        g = self.icmr_forward(batch, trace=trace, fusion=fusion)
        return self.decode(g, batch)

    def predict(self, contexts, queries, fusion=None) -> list[dict[str, np.ndarray]]:
        batch = self.collate(contexts, queries)
        preds = self.forward_batch(batch, fusion=fusion)
        out = []
        for b in range(batch.size):
            out.append({m: p.data[b, batch.query_valid[m][b], 0].copy() for m, p in preds.items()
                        if batch.query_valid[m][b].any()})
        return out


# functional surface --------------------------------------------------------------


def encode_modality(model: OmniFieldModel, obs: ModalityObservations, present: int, stage: int = 0) -> np.ndarray:
    """Single-instance latent tokens ``(n_latents, dim)`` for one modality."""
    if present and obs.n == 0:
        raise ValueError("modality marked present but has no observations")
    pres = {m: 0 for m in model.modalities}
    pres[obs.modality] = int(present)
    ctx = ContextSet({obs.modality: obs}, pres)
    batch = _collate_encoder(model, ctx)
    tokens = model.observation_tokens(batch, obs.modality) if present else None
    return model.encode_modality(stage, obs.modality, tokens, batch).data[0]


def _collate_encoder(model, ctx: ContextSet) -> Batch:
    # bypass the "at least one present" rule: encoding a single absent modality is legal
    mods = model.modalities
    if any(ctx.present(m) for m in mods):
        return model.collate([ctx], [QuerySet({}, ctx.t_in)])
    presence = np.zeros((1, len(mods)), dtype=bool)
    return Batch(mods, {}, {}, {m: np.zeros((1, 0), bool) for m in mods}, presence, {}, {},
                 np.zeros((1, len(mods)), bool))


def mct_block(model: OmniFieldModel, stage: int, latent_tokens: Sequence[np.ndarray], z: np.ndarray,
              present: Sequence[int] | None = None) -> np.ndarray:
    """Single-instance MCT: ``(M*n_latents, dim)`` tokens from per-modality latents."""
    lat = [T.Tensor(np.asarray(t)[None]) for t in latent_tokens]
    n_lat = lat[0].shape[1]
    present = [1] * len(lat) if present is None else list(present)
    valid = np.repeat(np.asarray(present, dtype=bool)[None], n_lat, axis=1)
    zt = T.Tensor(np.asarray(z).reshape(1, 1, -1))
    return model.mct_block(stage, lat, zt, valid).data[0]


def icmr_forward(model: OmniFieldModel, context: ContextSet, trace: list | None = None) -> np.ndarray:
    batch = model.collate([context], [QuerySet({}, context.t_in)])
    return model.icmr_forward(batch, trace=trace).data[0]


def decode(model: OmniFieldModel, g: np.ndarray, context: ContextSet, queries: QuerySet) -> dict[str, np.ndarray]:
    """Per-modality predictions ``(1, N_m, 1)`` for a precomputed field ``g``."""
    batch = model.collate([context], [queries])
    preds = model.decode(T.Tensor(np.asarray(g)[None]), batch)
    return {m: p.data for m, p in preds.items()}


def forward(model: OmniFieldModel, context: ContextSet, queries: QuerySet, fusion: str | None = None) -> dict[str, np.ndarray]:
    return model.predict([context], [queries], fusion=fusion)[0]


def midfusion_forward(model: OmniFieldModel, context: ContextSet, queries: QuerySet) -> dict[str, np.ndarray]:
    return forward(model, context, queries, fusion="mid_fusion")


def masked_loss(preds: dict[str, T.Tensor], batch: Batch) -> T.Tensor:
    """Mean over instances of ``sum_m tau_m * MSE_m``; unsupervised modalities add nothing."""
    if batch.targets is None:
        raise ValueError("batch carries no targets")
    B = batch.size
    total = None
    for j, m in enumerate(batch.modalities):
        tau = batch.supervised[:, j]
        if not tau.any():
            continue
        if m not in preds:
            raise ValueError(f"modality {m!r} supervised but not predicted")
        valid = batch.query_valid[m] & tau[:, None]
        counts = np.maximum(valid.sum(axis=1, keepdims=True), 1)
        w = (valid / counts / B).astype(T.get_default_dtype())
        diff = T.sub(T.reshape(preds[m], preds[m].shape[:2]), batch.targets[m])
        term = T.sum(T.mul(T.square(diff), w))
        total = term if total is None else T.add(total, term)
    if total is None:
        return T.Tensor(0.0)
    return total


def mse_masked_loss(preds: dict[str, np.ndarray], targets: dict[str, np.ndarray], tau: dict[str, int]) -> float:
    """Plain-array form of the masked subset loss for one instance."""
    total = 0.0
    for m, t in tau.items():
        if not t:
            continue
        if m not in targets or m not in preds:
            raise ValueError(f"modality {m!r} supervised but targets or predictions are missing")
        d = np.asarray(preds[m], dtype=np.float64).reshape(-1) - np.asarray(targets[m], dtype=np.float64).reshape(-1)
        total += float(np.mean(d * d))
    return total

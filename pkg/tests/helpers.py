"""Shared builders for small models and instances."""

import numpy as np

from omnifield.model import ContextSet, ModalityObservations, ModelConfig, OmniFieldModel, QuerySet


def micro_config(seed=0, **kw):
    base = dict(
        modalities=["S1", "S2"], dim=8, n_latents=4, n_stages=2, cross_heads=2, cross_dim_head=4,
        self_heads=2, self_dim_head=4, ff_mult=2, input_mlp_dim=8, space_bands=4, time_bands=2,
        space_scale=1.0, time_scale=1.0, seed=seed,
    )
    base.update(kw)
    return ModelConfig(**base)


def micro_model(seed=0, **kw):
    return OmniFieldModel(micro_config(seed, **kw))


def random_context(rng, counts=None, presence=None, t_in=1.0, n_steps=1):
    counts = counts or {"S1": 4, "S2": 4}
    obs = {}
    for m, n in counts.items():
        times = None
        if n_steps > 1:
            times = t_in - 0.1 * rng.integers(0, n_steps, n)
        obs[m] = ModalityObservations(m, rng.uniform(0, 1, (n, 1)), rng.normal(size=n), t_in, times)
    return ContextSet(obs, presence)


def random_queries(rng, mods=("S1", "S2"), n=3, t_in=1.0, dt=0.1, supervised=None):
    locs = {m: rng.uniform(0, 1, (n, 1)) for m in mods}
    sup = supervised if supervised is not None else {m: 1 for m in mods}
    return QuerySet(locs, t_in, dt, sup)


def random_targets(rng, q):
    return {m: rng.normal(size=len(v)) for m, v in q.locations.items()}

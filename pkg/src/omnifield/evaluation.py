"""Metrics, fusion-strategy baselines, ablations, noise sweeps and spectra."""

from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from . import tensor as T
from .data import DataConfig, FieldDataset, SensorMaskSet, _mask_counts, generate_dataset, zscore_invert
from .model import ModelConfig
from .training import TaskSampler, TrainConfig, run_fingerprint, train, validation_rmse

__all__ = [
    "STRATEGIES",
    "ABLATION_ROWS",
    "EvalReport",
    "StrategyVariant",
    "Experiment",
    "rmse_per_modality",
    "idw_interpolate",
    "apply_strategy",
    "run_experiment",
    "run_many",
    "run_ablation",
    "noise_sweep",
    "compare_fusion_strategies",
    "power_spectrum",
    "power_spectrum_delta",
    "write_report_csv",
    "worker_count",
]

STRATEGIES = ("co_location", "interpolation", "mid_fusion", "icmr")

# (gff, sin_init, icmr) in display order
ABLATION_ROWS = (
    (True, True, True),
    (False, True, True),
    (True, False, True),
    (True, True, False),
    (False, False, True),
    (False, False, False),
)


# metrics -----------------------------------------------------------------------


def rmse_per_modality(preds: dict, targets: dict, stats: dict | None = None) -> dict[str, float]:
    """RMSE per modality; with ``stats`` both sides are de-normalised first."""
    out = {}
    for m, y in targets.items():
        y = np.asarray(y, dtype=np.float64).reshape(-1)
        if y.size == 0:
            continue
        p = np.asarray(preds[m], dtype=np.float64).reshape(-1)
        if p.shape != y.shape:
            raise ValueError(f"{m}: prediction shape {p.shape} != target shape {y.shape}")
        if stats is not None:
            p, y = zscore_invert(p, stats[m]), zscore_invert(y, stats[m])
        out[m] = float(np.sqrt(np.mean((p - y) ** 2)))
    return out


@dataclass
class EvalReport:
    label: str
    rmse: dict
    per_task: dict
    fingerprint: str
    seed: int
    params: dict = field(default_factory=dict)

    def row(self, modalities) -> dict:
        r = {"label": self.label, "seed": self.seed, "fingerprint": self.fingerprint}
        r.update(self.params)
        for m in modalities:
            r[f"rmse_{m}"] = self.rmse.get(m, "")
        return r


def write_report_csv(path, reports: list[EvalReport], modalities) -> None:
    rows = [r.row(modalities) for r in reports]
    cols: list = []
    for r in rows:
        cols += [c for c in r if c not in cols]
    with open(path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        wr.writeheader()
        for r in rows:
            wr.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


# strategies --------------------------------------------------------------------


@dataclass(frozen=True)
class StrategyVariant:
    name: str = "icmr"
    idw_power: float = 2.0
    idw_k: int = 4

    def __post_init__(self):
        if self.name not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.name!r}; choose from {STRATEGIES}")
        if self.idw_k < 1 or self.idw_power <= 0:
            raise ValueError("IDW needs k >= 1 and a positive power")


def idw_interpolate(src_locs, src_vals, query_locs, power: float = 2.0, k: int = 4) -> np.ndarray:
    """Inverse-distance weighting over the ``k`` nearest sources.

    ``src_vals`` may carry trailing axes (for example time).  A query that
    coincides with a source takes that source's value exactly.
    """
    src = np.asarray(src_locs, dtype=np.float64)
    qry = np.asarray(query_locs, dtype=np.float64)
    src = src[:, None] if src.ndim == 1 else src
    qry = qry[:, None] if qry.ndim == 1 else qry
    vals = np.asarray(src_vals, dtype=np.float64)
    if len(src) == 0:
        raise ValueError("no source points")
    k = min(k, len(src))
    dist, idx = cKDTree(src).query(qry, k=k)
    dist = dist.reshape(len(qry), k)
    idx = idx.reshape(len(qry), k)
    exact = dist[:, 0] == 0.0
    w = np.where(exact[:, None], 0.0, 1.0 / np.where(dist == 0.0, 1.0, dist) ** power)
    w[exact, 0] = 1.0
    w /= w.sum(axis=1, keepdims=True)
    return np.einsum("qk,qk...->q...", w, vals[idx])


def apply_strategy(ds: FieldDataset, variant: StrategyVariant) -> FieldDataset:
    """Data-side transform of a strategy; model-side strategies pass through."""
    A = ds.masks.incidence
    if variant.name == "co_location":
        rows = A.all(axis=1)
        if not rows.any():
            raise ValueError("co-location needs at least one site shared by every modality")
        B = np.repeat(rows[:, None], A.shape[1], axis=1).astype(A.dtype)
        return replace(ds, masks=SensorMaskSet(B, _mask_counts(B)), metadata={**ds.metadata, "strategy": variant.name})
    if variant.name == "interpolation":
        union = A.any(axis=1)
        loc = ds.locations
        src = ds.fields if ds.input_fields is None else ds.input_fields
        filled = src.copy()
        for j in range(A.shape[1]):
            s = np.flatnonzero(A[:, j])
            filled[j][union] = idw_interpolate(loc[s], src[j][s], loc[union], variant.idw_power, variant.idw_k)
        B = np.repeat(union[:, None], A.shape[1], axis=1).astype(A.dtype)
        return replace(ds, masks=SensorMaskSet(B, _mask_counts(B)), input_fields=filled,
                       metadata={**ds.metadata, "strategy": variant.name})
    return replace(ds, metadata={**ds.metadata, "strategy": variant.name})


# experiments ---------------------------------------------------------------------


@dataclass
class Experiment:
    """One trained model and its validation report."""

    data: DataConfig
    model: ModelConfig
    train: TrainConfig
    strategy: str = "icmr"
    eval_sites: str = "grid"
    eval_tasks: tuple = ("forecasting",)
    label: str = ""
    params: dict = field(default_factory=dict)

    def resolved_model(self) -> ModelConfig:
        fusion = "mid_fusion" if self.strategy == "mid_fusion" else "icmr" if self.strategy == "icmr" else self.model.fusion
        return replace(self.model, fusion=fusion)

    def fingerprint(self) -> str:
        return run_fingerprint(asdict(self.data), self.resolved_model().to_dict(), asdict(self.train),
                               {"strategy": self.strategy, "eval_sites": self.eval_sites, "eval_tasks": list(self.eval_tasks)})


def _eval_sampler(exp: Experiment, ds: FieldDataset) -> TaskSampler:
    s = exp.train.sampler()
    return TaskSampler(s.horizon, {"forecasting": 1.0}, s.context_steps, s.input_modalities, s.target_modalities)


def _site_subset(ds_orig: FieldDataset, exp: Experiment) -> np.ndarray | None:
    A = ds_orig.masks.incidence
    mode = exp.eval_sites
    if mode == "auto":
        mode = "intersection" if exp.strategy == "co_location" else "union"
    if mode == "grid":
        return None
    if mode == "union":
        return np.flatnonzero(A.any(axis=1))
    if mode == "intersection":
        return np.flatnonzero(A.all(axis=1))
    raise ValueError(f"unknown eval_sites {exp.eval_sites!r}")


def run_experiment(exp: Experiment, cache_dir=None) -> EvalReport:
    """Train and evaluate; results are cached on disk by fingerprint when ``cache_dir`` is set."""
    fp = exp.fingerprint()
    cache = Path(cache_dir) / f"{fp}.json" if cache_dir is not None else None
    if cache is not None and cache.is_file():
        d = json.loads(cache.read_text())
        return EvalReport(exp.label, d["rmse"], d["per_task"], fp, exp.train.seed, dict(exp.params))
    with T.default_dtype(exp.train.dtype):
        rmse, per_task, best_step = _run(exp)
    if cache is not None:
        cache.parent.mkdir(parents=True, exist_ok=True)
        cache.write_text(json.dumps({"rmse": rmse, "per_task": per_task, "best_step": best_step}, sort_keys=True))
    return EvalReport(exp.label, rmse, per_task, fp, exp.train.seed, dict(exp.params))


def _run(exp: Experiment):
    base = generate_dataset(exp.data)
    ds = apply_strategy(base, StrategyVariant(exp.strategy))
    mcfg = exp.resolved_model()
    res = train(mcfg, exp.train, ds, extra_meta={"data": asdict(exp.data)})
    for k, p in res.model.parameters().items():
        p.data = res.best_params[k]
    sampler = _eval_sampler(exp, ds)
    sites = _site_subset(base, exp)
    # evaluation always reads clean ground truth at the chosen query sites
    per_task = {}
    for task in exp.eval_tasks:
        per_task[task] = _evaluate_task(res.model, ds, sampler, task, sites)
    return per_task[exp.eval_tasks[0]], per_task, res.best_step


def _evaluate_task(model, ds: FieldDataset, sampler: TaskSampler, task: str, sites) -> dict:
    if sites is None:
        return validation_rmse(model, ds, sampler, task=task)
    sub = replace(ds, x=ds.x[sites], fields=ds.fields[:, sites],
                  input_fields=None if ds.input_fields is None else ds.input_fields[:, sites],
                  masks=SensorMaskSet(ds.masks.incidence[sites], ds.masks.counts))
    # contexts must still come from the full layout, so only the query grid is reduced
    return _validation_on_sites(model, ds, sub, sampler, task)


def _validation_on_sites(model, ds, sub, sampler, task):
    from .training import build_instance

    rng = np.random.default_rng(0)
    sq, cnt = {}, {}
    spacing = sampler.horizon if task == "forecasting" else None
    for w in ds.val_idx:
        ctx, q, _ = build_instance(ds, sampler, int(w), task, rng, dt_steps=spacing)
        _, qs, tgt = build_instance(sub, sampler, int(w), task, rng, dt_steps=spacing)
        q.locations = {m: qs.locations[m] for m in q.locations if m in qs.locations}
        pr = model.predict([ctx], [q])[0]
        for m, y in tgt.items():
            if m not in pr:
                continue
            st = ds.stats[m]
            d = zscore_invert(pr[m], st) - zscore_invert(y, st)
            sq[m] = sq.get(m, 0.0) + float(np.sum(d * d))
            cnt[m] = cnt.get(m, 0) + d.size
    return {m: float(np.sqrt(sq[m] / cnt[m])) for m in sq if cnt[m]}


def worker_count(n_jobs: int) -> int:
    try:
        cap = int(os.environ.get("OMNIFIELD_THREADS", "1"))
    except ValueError:
        cap = 1
    return max(1, min(cap, n_jobs))


def _run_one(args):
    exp, cache_dir = args
    return run_experiment(exp, cache_dir)


def run_many(exps: list[Experiment], cache_dir=None, workers: int | None = None) -> list[EvalReport]:
    """Run experiments, in parallel processes if allowed; results keep input order."""
    n = worker_count(len(exps)) if workers is None else max(1, workers)
    if n == 1:
        return [run_experiment(e, cache_dir) for e in exps]
    with ProcessPoolExecutor(max_workers=n) as pool:
        return list(pool.map(_run_one, [(e, cache_dir) for e in exps]))


# harnesses ------------------------------------------------------------------------


def _with_seed(data: DataConfig, model: ModelConfig, tcfg: TrainConfig, seed: int):
    return replace(data, seed=seed), replace(model, seed=seed), replace(tcfg, seed=seed)


def ablation_experiments(data: DataConfig, model: ModelConfig, tcfg: TrainConfig, seeds=(0,), rows=ABLATION_ROWS) -> list[Experiment]:
    exps = []
    for seed in seeds:
        d, m, t = _with_seed(data, model, tcfg, seed)
        for gff, sin_init, icmr in rows:
            exps.append(Experiment(d, replace(m, gff=gff, sin_init=sin_init), t,
                                   strategy="icmr" if icmr else "mid_fusion", label="ablation",
                                   params={"gff": int(gff), "sin_init": int(sin_init), "icmr": int(icmr)}))
    return exps


def run_ablation(data: DataConfig, model: ModelConfig, tcfg: TrainConfig, seeds=(0,), rows=ABLATION_ROWS,
                 cache_dir=None, workers=None) -> list[EvalReport]:
    """One trained model per toggle row and seed; ICMR-off means mid-fusion."""
    return run_many(ablation_experiments(data, model, tcfg, seeds, rows), cache_dir, workers)


def noise_experiments(data, model, tcfg, sigmas=(0.0, 0.5, 1.0, 2.0), variants=("icmr", "mid_fusion"), seeds=(0,), k_max: int = 1):
    exps = []
    for seed in seeds:
        d, m, t = _with_seed(data, model, tcfg, seed)
        for v in variants:
            for s in sigmas:
                exps.append(Experiment(d, m, replace(t, noise_sigma=float(s), noise_k_max=k_max), strategy=v,
                                       label="noise", params={"variant": v, "sigma": float(s)}))
    return exps


def noise_sweep(data, model, tcfg, sigmas=(0.0, 0.5, 1.0, 2.0), variants=("icmr", "mid_fusion"), seeds=(0,),
                k_max: int = 1, cache_dir=None, workers=None) -> list[EvalReport]:
    """Train each variant on corrupted contexts, evaluate on clean ones."""
    return run_many(noise_experiments(data, model, tcfg, sigmas, variants, seeds, k_max), cache_dir, workers)


def fusion_experiments(data, model, tcfg, seeds=(0,), strategies=STRATEGIES, target: str = "S2"):
    exps = []
    mods = list(model.modalities)
    for seed in seeds:
        d, m, t = _with_seed(data, model, tcfg, seed)
        for s in strategies:
            for inputs in ([target], mods):
                exps.append(Experiment(d, m, replace(t, input_modalities=list(inputs), target_modalities=[target]),
                                       strategy=s, eval_sites="auto", label="fusion",
                                       params={"strategy": s, "inputs": "+".join(inputs)}))
    return exps


def compare_fusion_strategies(data, model, tcfg, seeds=(0,), strategies=STRATEGIES, target: str = "S2",
                              cache_dir=None, workers=None) -> list[EvalReport]:
    """Unimodal versus multimodal input for every strategy at matched budgets."""
    return run_many(fusion_experiments(data, model, tcfg, seeds, strategies, target), cache_dir, workers)


# spectra ---------------------------------------------------------------------------


def power_spectrum(x) -> np.ndarray:
    """Centred 2-D magnitude spectrum ``|fftshift(fft2(x))|``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("power spectrum needs a 2-D grid")
    return np.abs(np.fft.fftshift(np.fft.fft2(x)))


def power_spectrum_delta(pred, truth) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"grid shapes differ: {pred.shape} vs {truth.shape}")
    return np.abs(power_spectrum(truth) - power_spectrum(pred))

"""AdamW, warmup-restart cosine schedule, task sampling and the training loop."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .container import read_container, write_container
from .data import FieldDataset, NoiseSpec, corrupt, zscore_invert
from .model import ContextSet, ModalityObservations, ModelConfig, OmniFieldModel, QuerySet, masked_loss

__all__ = [
    "TASKS",
    "ScheduleSpec",
    "OptimizerState",
    "TaskSampler",
    "TrainConfig",
    "TrainResult",
    "NonFiniteGradientError",
    "TrainingDivergedError",
    "ResumeMismatchError",
    "lr_at",
    "adamw_init",
    "adamw_step",
    "clip_global_norm",
    "sample_task",
    "build_instance",
    "validation_rmse",
    "train",
    "run_fingerprint",
    "load_checkpoint",
    "shift_instance",
]

log = logging.getLogger(__name__)

TASKS = ("reconstruction", "interpolation", "forecasting", "cross_modal")


class NonFiniteGradientError(FloatingPointError):
    pass


class TrainingDivergedError(FloatingPointError):
    pass


class ResumeMismatchError(ValueError):
    pass


# schedule -------------------------------------------------------------------------


@dataclass(frozen=True)
class ScheduleSpec:
    max_lr: float = 1e-3
    min_lr: float = 1e-4
    warmup_steps: int = 50
    cycle_steps: int = 1000
    cycle_mult: float = 1.0

    def __post_init__(self):
        if not 0 <= self.min_lr <= self.max_lr:
            raise ValueError("need 0 <= min_lr <= max_lr")
        if self.warmup_steps < 0 or self.warmup_steps >= self.cycle_steps:
            raise ValueError("warmup_steps must be in [0, cycle_steps)")
        if self.cycle_mult < 1:
            raise ValueError("cycle_mult must be >= 1")


def _locate(step: int, spec: ScheduleSpec) -> tuple[int, int]:
    length = spec.cycle_steps
    if spec.cycle_mult == 1.0:
        return step % length, length
    pos = step
    while pos >= length:
        pos -= length
        length = int(round(length * spec.cycle_mult))
    return pos, length


def lr_at(step: int, spec: ScheduleSpec) -> float:
    """Linear warmup from 0, then cosine down to ``min_lr`` on the cycle's last step."""
    if step < 0:
        raise ValueError("step must be non-negative")
    pos, length = _locate(int(step), spec)
    w = spec.warmup_steps
    if pos < w:
        return spec.max_lr * pos / w
    span = length - 1 - w
    frac = (pos - w) / span if span > 0 else 0.0
    return spec.min_lr + 0.5 * (spec.max_lr - spec.min_lr) * (1.0 + math.cos(math.pi * frac))


# optimiser ------------------------------------------------------------------------


@dataclass
class OptimizerState:
    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    schedule: ScheduleSpec | None = None
    nonfinite: str = "abort"


def adamw_init(params: dict[str, np.ndarray], **hyper) -> OptimizerState:
    m = {k: np.zeros_like(v) for k, v in params.items()}
    return OptimizerState(m, {k: np.zeros_like(v) for k, v in params.items()}, **hyper)


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: OptimizerState, lr: float | None = None) -> dict[str, np.ndarray]:
    """One AdamW update; returns new parameter arrays and advances ``state``.

    Weight decay multiplies parameters by ``1 - lr * weight_decay`` before
    the moment-based step, so it never enters the moment estimates.
    """
    if lr is None:
        if state.schedule is None:
            raise ValueError("no learning rate given and no schedule attached")
        lr = lr_at(state.step, state.schedule)
    bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        if state.nonfinite == "skip":
            warnings.warn(f"skipping update: non-finite gradient in {bad[0]}", RuntimeWarning, stacklevel=2)
            return dict(params)
        raise NonFiniteGradientError(f"non-finite gradient in {bad[0]} at step {state.step}")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1**t, 1.0 - b2**t
    out = {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise T.ShapeError(f"{k}: gradient {g.shape} vs parameter {p.shape}")
        m = state.m[k] = b1 * state.m[k] + (1.0 - b1) * g
        v = state.v[k] = b2 * state.v[k] + (1.0 - b2) * (g * g)
        decayed = p * (1.0 - lr * state.weight_decay)
        out[k] = decayed - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    state.step = t
    return out


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float | None) -> tuple[dict, float]:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm is None or norm <= max_norm or norm == 0.0:
        return grads, norm
    s = max_norm / norm
    return {k: g * s for k, g in grads.items()}, norm


# tasks ----------------------------------------------------------------------------


@dataclass
class TaskSampler:
    """Task mix and context layout for drawing training instances.

    ``horizon`` is in time steps.  ``context_steps`` keeps only the last
    steps of each input window (``None`` keeps the whole window).
    """

    horizon: int = 1
    weights: dict = field(default_factory=lambda: {"forecasting": 1.0})
    context_steps: int | None = None
    input_modalities: list | None = None
    target_modalities: list | None = None

    def __post_init__(self):
        for k, w in self.weights.items():
            if k not in TASKS:
                raise ValueError(f"unknown task {k!r}")
            if w < 0:
                raise ValueError("task weights must be non-negative")
        if abs(sum(self.weights.values()) - 1.0) > 1e-9:
            raise ValueError("task weights must sum to 1")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.context_steps is not None and self.context_steps < 1:
            raise ValueError("context_steps must be >= 1")

    def probabilities(self) -> np.ndarray:
        return np.array([self.weights.get(t, 0.0) for t in TASKS])


class _Infeasible(Exception):
    pass


def _context(ds: FieldDataset, w: int, inputs, context_steps) -> tuple[ContextSet, int]:
    idx, last = ds.window_times(w)
    if context_steps is not None:
        idx = idx[-context_steps:]
    src = ds.fields if ds.input_fields is None else ds.input_fields
    loc = ds.locations
    obs = {}
    for m in inputs:
        j = ds.modality_index(m)
        sites = ds.masks.sensors(j)
        vals = ds.normalized(m, src[j][np.ix_(sites, idx)]).reshape(-1)
        obs[m] = ModalityObservations(
            m, np.repeat(loc[sites], len(idx), axis=0), vals, float(ds.t[last]), np.tile(ds.t[idx], len(sites))
        )
    return ContextSet(obs), last


def build_instance(ds: FieldDataset, sampler: TaskSampler, w: int, task: str, rng: np.random.Generator, dt_steps: int | None = None, holdout: str | None = None):
    """One (context, queries, normalized targets) triple for window ``w``."""
    inputs = list(sampler.input_modalities or ds.modalities)
    targets_m = list(sampler.target_modalities or ds.modalities)
    ctx, last = _context(ds, w, inputs, sampler.context_steps)
    spacing = float(ds.t[1] - ds.t[0])
    all_sites = np.arange(len(ds.x))
    qloc, tgt, sup = {}, {}, {}

    def truth(m, sites, k):
        j = ds.modality_index(m)
        return ds.normalized(m, ds.fields[j, sites, k])

    if task in ("reconstruction", "interpolation"):
        dt_steps = 0
        for m in targets_m:
            if m not in inputs:
                continue
            sensed = ds.masks.sensors(ds.modality_index(m))
            sites = sensed if task == "reconstruction" else np.setdiff1d(all_sites, sensed)
            if len(sites):
                qloc[m], tgt[m], sup[m] = ds.locations[sites], truth(m, sites, last), 1
    elif task == "forecasting":
        if dt_steps is None:
            dt_steps = int(rng.integers(1, sampler.horizon + 1))
        for m in targets_m:
            qloc[m], tgt[m], sup[m] = ds.locations, truth(m, all_sites, last + dt_steps), 1
    elif task == "cross_modal":
        options = [m for m in inputs if m in targets_m]
        if len(inputs) < 2 or not options:
            raise _Infeasible
        if holdout is None:
            holdout = options[int(rng.integers(len(options)))]
        if dt_steps is None:
            dt_steps = int(rng.integers(0, sampler.horizon + 1))
        ctx.presence[holdout] = 0
        qloc[holdout], tgt[holdout], sup[holdout] = ds.locations, truth(holdout, all_sites, last + dt_steps), 1
    else:
        raise ValueError(f"unknown task {task!r}")
    if not qloc:
        raise _Infeasible
    if last + dt_steps >= len(ds.t):
        raise ValueError("horizon runs past the end of the series")
    q = QuerySet(qloc, ctx.t_in, dt_steps * spacing, sup, task)
    return ctx, q, tgt


def sample_task(ds: FieldDataset, sampler: TaskSampler, rng: np.random.Generator, split: str = "train"):
    """Draw a window from ``split`` and a task from the sampler's mix."""
    pool = ds.train_idx if split == "train" else ds.val_idx
    if len(pool) == 0:
        raise ValueError(f"no windows in the {split} split")
    if sampler.horizon > ds.window.pred_len:
        raise ValueError(f"horizon {sampler.horizon} exceeds the window's prediction length {ds.window.pred_len}")
    p = sampler.probabilities()
    for _ in range(100):
        w = int(pool[int(rng.integers(len(pool)))])
        task = TASKS[int(rng.choice(len(TASKS), p=p))]
        try:
            return build_instance(ds, sampler, w, task, rng)
        except _Infeasible:
            continue
    raise ValueError("no feasible task for this dataset and sampler")


# config ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    steps: int = 1000
    batch_size: int = 4
    max_lr: float = 1e-3
    min_lr: float = 1e-4
    warmup_steps: int = 50
    cycle_steps: int | None = None
    cycle_mult: float = 1.0
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float | None = 1.0
    eval_every: int = 100
    eval_windows: int | None = 32
    task_weights: dict = field(default_factory=lambda: {"forecasting": 1.0})
    horizon: int = 1
    context_steps: int | None = None
    input_modalities: list | None = None
    target_modalities: list | None = None
    noise_sigma: float = 0.0
    noise_k_max: int = 1
    nonfinite: str = "abort"
    shift_aug: float = 0.0
    dtype: str = "float64"
    seed: int = 0

    def schedule(self) -> ScheduleSpec:
        return ScheduleSpec(self.max_lr, self.min_lr, self.warmup_steps, self.cycle_steps or self.steps, self.cycle_mult)

    def sampler(self) -> TaskSampler:
        return TaskSampler(self.horizon, dict(self.task_weights), self.context_steps, self.input_modalities, self.target_modalities)

    def validate(self) -> None:
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be >= 1")
        if self.nonfinite not in ("abort", "skip"):
            raise ValueError("nonfinite must be 'abort' or 'skip'")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if self.shift_aug < 0:
            raise ValueError("shift_aug must be non-negative")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be 'float32' or 'float64'")
        self.schedule()
        self.sampler()


def run_fingerprint(*parts: dict) -> str:
    text = json.dumps(parts, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


# evaluation used during training -------------------------------------------------


def _val_windows(ds: FieldDataset, limit: int | None) -> np.ndarray:
    pool = ds.val_idx
    if limit is not None and len(pool) > limit:
        pool = pool[np.linspace(0, len(pool) - 1, limit).round().astype(int)]
    return pool


def validation_rmse(model: OmniFieldModel, ds: FieldDataset, sampler: TaskSampler, windows=None, task: str = "forecasting",
                    dt_steps: int | None = None, fusion: str | None = None, chunk: int = 16, holdout: str | None = None) -> dict[str, float]:
    """Physical-unit RMSE per modality over validation windows for one fixed task."""
    if windows is None:
        windows = ds.val_idx
    if dt_steps is None and task == "forecasting":
        dt_steps = sampler.horizon
    rng = np.random.default_rng(0)
    sq, cnt = {}, {}
    insts = [build_instance(ds, sampler, int(w), task, rng, dt_steps=dt_steps, holdout=holdout) for w in windows]
    for s in range(0, len(insts), chunk):
        part = insts[s : s + chunk]
        preds = model.predict([c for c, _, _ in part], [q for _, q, _ in part], fusion=fusion)
        for (_, q, tgt), pr in zip(part, preds):
            for m, y in tgt.items():
                st = ds.stats[m]
                d = zscore_invert(pr[m], st) - zscore_invert(y, st)
                sq[m] = sq.get(m, 0.0) + float(np.sum(d * d))
                cnt[m] = cnt.get(m, 0) + d.size
    return {m: math.sqrt(sq[m] / cnt[m]) for m in ds.modalities if cnt.get(m)}


# loop -------------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: OmniFieldModel
    state: OptimizerState
    history: list
    best_metric: float
    best_step: int
    best_params: dict
    fingerprint: str


def _checkpoint_arrays(model: OmniFieldModel, state: OptimizerState | None, params: dict | None = None) -> dict:
    arrays = model.state_arrays()
    if params is not None:
        arrays.update({f"param/{k}": v for k, v in params.items()})
    if state is not None:
        arrays.update({f"adam_m/{k}": v for k, v in state.m.items()})
        arrays.update({f"adam_v/{k}": v for k, v in state.v.items()})
    return arrays


def load_checkpoint(path) -> tuple[OmniFieldModel, dict, dict]:
    """Model, raw arrays and metadata from a checkpoint container.

    A run directory resolves to its ``best`` checkpoint.
    """
    path = Path(path)
    if not (path / "manifest.json").exists() and (path / "best" / "manifest.json").exists():
        path = path / "best"
    arrays, meta = read_container(path)
    cfg = ModelConfig(**meta["model"])
    return OmniFieldModel.from_state(cfg, arrays), arrays, meta


_CSV_HEAD = ["step", "lr", "train_loss", "grad_norm"]


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


def shift_instance(ctx: ContextSet, q: QuerySet, offset) -> tuple[ContextSet, QuerySet]:
    """Translate every input and query location by the same ``offset``."""
    offset = np.asarray(offset, dtype=np.float64)
    obs = {m: ModalityObservations(m, o.locations + offset, o.values, o.t_in, o.times) for m, o in ctx.observations.items()}
    locs = {m: v + offset for m, v in q.locations.items()}
    return ContextSet(obs, dict(ctx.presence)), QuerySet(locs, q.t_in, q.delta_t, dict(q.supervised), q.task)


def train(model_cfg: ModelConfig, train_cfg: TrainConfig, ds: FieldDataset, out_dir=None, resume: bool = False,
          extra_meta: dict | None = None, progress=None) -> TrainResult:
    """Train a fresh model (or resume from ``out_dir/last``) and return the result.

    Each step draws its instances from ``default_rng([seed, step])``, so a
    resumed run replays exactly the same data as an uninterrupted one.
    With ``shift_aug > 0`` each training instance is translated in space by
    a uniform offset in ``[-shift_aug, shift_aug]``.
    """
    train_cfg.validate()
    with T.default_dtype(train_cfg.dtype):
        return _train(model_cfg, train_cfg, ds, out_dir, resume, extra_meta, progress)


def _train(model_cfg, train_cfg, ds, out_dir, resume, extra_meta, progress) -> TrainResult:
    sampler = train_cfg.sampler()
    dtype = T.get_default_dtype()
    model = OmniFieldModel(model_cfg)
    params = model.parameters()
    state = adamw_init({k: p.data for k, p in params.items()}, beta1=train_cfg.beta1, beta2=train_cfg.beta2,
                       eps=train_cfg.eps, weight_decay=train_cfg.weight_decay, schedule=train_cfg.schedule(),
                       nonfinite=train_cfg.nonfinite)
    fp = run_fingerprint(model_cfg.to_dict(), asdict(train_cfg), (extra_meta or {}).get("data", {}))
    meta_base = {"model": model_cfg.to_dict(), "train": asdict(train_cfg), "fingerprint": fp, **(extra_meta or {})}
    mods = ds.modalities
    history: list = []
    best_metric, best_step, best_params = math.inf, -1, {k: p.data.copy() for k, p in params.items()}
    start = 0
    out = Path(out_dir) if out_dir is not None else None
    if resume:
        if out is None or not (out / "last").exists():
            raise FileNotFoundError("nothing to resume: no last checkpoint")
        arrays, meta = read_container(out / "last")
        if meta["fingerprint"] != fp:
            raise ResumeMismatchError("checkpoint was written by a different configuration")
        model.load_state_arrays(arrays)
        for k in params:
            state.m[k] = np.array(arrays[f"adam_m/{k}"], dtype=dtype)
            state.v[k] = np.array(arrays[f"adam_v/{k}"], dtype=dtype)
        state.step = start = int(meta["step"])
        best_metric, best_step = float(meta["best_metric"]), int(meta["best_step"])
        if (out / "best").exists():
            barr, _ = read_container(out / "best")
            best_params = {k: np.array(barr[f"param/{k}"], dtype=dtype) for k in params}
        with open(out / "metrics.csv", newline="") as fh:
            rows = list(csv.reader(fh))
        history = [r for r in rows[1:] if int(r[0]) < start]
    windows = _val_windows(ds, train_cfg.eval_windows)
    noise = NoiseSpec(train_cfg.noise_k_max, train_cfg.noise_sigma) if train_cfg.noise_sigma > 0 else None

    def evaluate():
        return validation_rmse(model, ds, sampler, windows)

    targets_m = sampler.target_modalities or mods
    for step in range(start, train_cfg.steps):
        rng = np.random.default_rng([train_cfg.seed, step])
        ctxs, qs, tgts = [], [], []
        for _ in range(train_cfg.batch_size):
            c, q, y = sample_task(ds, sampler, rng)
            if train_cfg.shift_aug > 0:
                c, q = shift_instance(c, q, rng.uniform(-train_cfg.shift_aug, train_cfg.shift_aug, ds.locations.shape[1]))
            if noise is not None and sum(c.present(m) for m in c.presence) > noise.k_max:
                c = corrupt(c, noise, rng)
            ctxs.append(c)
            qs.append(q)
            tgts.append(y)
        batch = model.collate(ctxs, qs, tgts)
        with T.Tape() as tape:
            preds = model.forward_batch(batch)
            loss = masked_loss(preds, batch)
        lval = float(loss.data)
        if not math.isfinite(lval):
            raise TrainingDivergedError(f"non-finite training loss at step {step}")
        if loss._tape is tape:
            tape.backward(loss)
            grads = {k: tape.grad(p) for k, p in params.items()}
        else:
            grads = {k: np.zeros_like(p.data) for k, p in params.items()}
        if all(np.all(np.isfinite(g)) for g in grads.values()):
            grads, gnorm = clip_global_norm(grads, train_cfg.clip_norm)
        else:
            gnorm = math.nan
        lr = lr_at(step, state.schedule)
        new = adamw_step({k: p.data for k, p in params.items()}, grads, state, lr)
        for k, p in params.items():
            p.data = new[k]
        row_vals = None
        last_step = step == train_cfg.steps - 1
        if train_cfg.eval_every and ((step + 1) % train_cfg.eval_every == 0 or last_step):
            row_vals = evaluate()
            metric = float(np.mean([row_vals[m] for m in targets_m if m in row_vals]))
            if metric < best_metric:
                best_metric, best_step = metric, step + 1
                best_params = {k: p.data.copy() for k, p in params.items()}
                if out is not None:
                    write_container(out / "best", _checkpoint_arrays(model, None),
                                    {**meta_base, "step": step + 1, "val_rmse": row_vals}, force=True)
        history.append([str(step), _fmt(lr), _fmt(lval), _fmt(gnorm)] +
                       [_fmt(row_vals.get(m)) if row_vals else "" for m in mods])
        if progress is not None:
            progress(step, lval, row_vals)
        if out is not None and (row_vals is not None or last_step):
            out.mkdir(parents=True, exist_ok=True)
            write_container(out / "last", _checkpoint_arrays(model, state),
                            {**meta_base, "step": step + 1, "best_metric": best_metric, "best_step": best_step}, force=True)
            with open(out / "metrics.csv", "w", newline="") as fh:
                wr = csv.writer(fh, lineterminator="\n")
                wr.writerow(_CSV_HEAD + [f"val_rmse_{m}" for m in mods])
                wr.writerows(history)
    return TrainResult(model, state, history, best_metric, best_step, best_params, fp)

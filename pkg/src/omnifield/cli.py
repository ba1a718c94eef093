"""Command-line entry point: ``omnifield <verb> ...``.

Failures exit non-zero after printing one line ``error: <category>: <message>``
to stderr.  Configuration precedence, lowest first: preset, ``--config``
file, ``--set section.key=value`` overrides, ``--seed``.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, apply_overrides, load_config
from .container import ContainerError, read_container, write_container
from .data import DataConfig, FieldDataset, SensorMaskSet, WindowSpec, ZScoreStats, _mask_counts, generate_dataset
from .evaluation import (
    ABLATION_ROWS,
    STRATEGIES,
    StrategyVariant,
    apply_strategy,
    compare_fusion_strategies,
    noise_sweep,
    power_spectrum,
    power_spectrum_delta,
    run_ablation,
    write_report_csv,
)
from .model import OmniFieldModel
from .training import TASKS, ResumeMismatchError, TrainingDivergedError, load_checkpoint, run_fingerprint, train, validation_rmse

__all__ = ["main", "save_dataset", "load_dataset", "CliError"]

LOCAL_DATA = ("s1s2",)


class CliError(Exception):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


# dataset containers ---------------------------------------------------------------


def save_dataset(path, ds: FieldDataset, cfg: DataConfig, force: bool = False) -> dict:
    arrays = {
        "fields": ds.fields,
        "x": ds.x,
        "t": ds.t,
        "incidence": ds.masks.incidence,
        "window_starts": ds.starts,
        "train_idx": ds.train_idx,
        "val_idx": ds.val_idx,
    }
    meta = {
        "kind": "dataset",
        "modalities": list(ds.modalities),
        "data_config": asdict(cfg),
        "window": asdict(ds.window),
        "stats": {m: {"mean": s.mean, "std": s.std} for m, s in ds.stats.items()},
        "generation": ds.metadata,
        "fingerprint": run_fingerprint(asdict(cfg)),
    }
    return write_container(path, arrays, meta, force=force)


def load_dataset(path) -> tuple[FieldDataset, DataConfig]:
    if not Path(path).exists():
        raise CliError("missing-input", f"dataset {path} does not exist")
    arrays, meta = read_container(path)
    if meta.get("kind") != "dataset":
        raise CliError("bad-input", f"{path} is not a dataset container")
    A = arrays["incidence"]
    ds = FieldDataset(
        list(meta["modalities"]), arrays["fields"], arrays["x"], arrays["t"], SensorMaskSet(A, _mask_counts(A)),
        WindowSpec(**meta["window"]), arrays["window_starts"], arrays["train_idx"], arrays["val_idx"],
        {m: ZScoreStats(s["mean"], s["std"]) for m, s in meta["stats"].items()}, meta.get("generation", {}),
    )
    return ds, DataConfig(**meta["data_config"])


# helpers ----------------------------------------------------------------------------


def _config(args) -> RunConfig:
    cfg = load_config(getattr(args, "config", None), getattr(args, "preset", None))
    if getattr(args, "set", None):
        cfg = apply_overrides(cfg, args.set)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.seeded(args.seed)
    else:
        cfg = cfg.seeded()
    cfg.validate()
    return cfg


def _seeds(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise CliError("usage", f"bad seed list {text!r}") from exc


def _floats(text: str) -> list[float]:
    try:
        return [float(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise CliError("usage", f"bad number list {text!r}") from exc


def _require_local(cfg: RunConfig) -> None:
    if cfg.data.kind not in LOCAL_DATA:
        raise CliError("unsupported-data", f"data kind {cfg.data.kind!r} needs an external dataset that is not bundled")


def _print_hparams(cfg: RunConfig) -> None:
    print(f"preset: {cfg.preset or '(custom)'}")
    for sec in ("model", "train"):
        for k, v in asdict(getattr(cfg, sec)).items():
            print(f"  {sec}.{k} = {json.dumps(v)}")


def _check_out(path: Path, force: bool) -> None:
    if path.exists() and not force:
        raise CliError("exists", f"{path} exists; pass --force to overwrite")


# verbs --------------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    if args.sparsity:
        cfg.data = replace(cfg.data, sparsity=args.sparsity, shared=None, exclusive=None)
    _require_local(cfg)
    out = Path(args.out)
    _check_out(out, args.force)
    ds = generate_dataset(cfg.data)
    save_dataset(out, ds, cfg.data, force=args.force)
    c = ds.masks.counts
    print(f"wrote {out}")
    print(f"modalities: {','.join(ds.modalities)}  grid: {len(ds.x)} x {len(ds.t)}")
    print(f"windows: {ds.n_windows} (train {len(ds.train_idx)}, val {len(ds.val_idx)})")
    print(f"sensors per modality: {c['per_modality']}  shared: {c['shared']}  union: {c['union']}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    _print_hparams(cfg)
    if args.dry_run:
        return 0
    _require_local(cfg)
    ds, data_cfg = load_dataset(args.data)
    out = Path(args.out)
    if not args.resume:
        _check_out(out, args.force)
        if out.exists():
            import shutil

            shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json() + "\n", encoding="utf-8")

    def progress(step, loss, val):
        if val is not None:
            print(f"step {step + 1}: loss {loss:.6f}  val_rmse " + " ".join(f"{m}={v:.6f}" for m, v in val.items()))

    res = train(cfg.model, cfg.train, ds, out_dir=out, resume=args.resume,
                extra_meta={"data": asdict(data_cfg)}, progress=progress)
    print(f"best val rmse {res.best_metric:.6f} at step {res.best_step}; checkpoints in {out}")
    return 0


def cmd_eval(args) -> int:
    if args.task not in TASKS:
        raise CliError("usage", f"unknown task {args.task!r}; choose from {TASKS}")
    strategy = args.strategy.replace("-", "_")
    if strategy not in STRATEGIES:
        raise CliError("usage", f"unknown strategy {args.strategy!r}")
    ds, _ = load_dataset(args.data)
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise CliError("missing-input", f"checkpoint {ckpt} does not exist")
    model, _, meta = load_checkpoint(ckpt)
    tc = replace(RunConfig().train, **{k: v for k, v in meta["train"].items()})
    sampler = tc.sampler()
    view = apply_strategy(ds, StrategyVariant(strategy))
    fusion = "mid_fusion" if strategy == "mid_fusion" else "icmr" if strategy == "icmr" else None
    if args.split == "train":
        view = replace(view, val_idx=view.train_idx)
    windows = view.val_idx
    if args.max_windows is not None and len(windows) > args.max_windows:
        windows = windows[np.linspace(0, len(windows) - 1, args.max_windows).round().astype(int)]
    holdout = args.holdout
    dt = args.dt
    rm = validation_rmse(model, view, sampler, windows=windows, task=args.task, dt_steps=dt, fusion=fusion, holdout=holdout)
    rows = [{"task": args.task, "strategy": strategy, "split": args.split, "modality": m, "rmse": repr(v),
             "windows": len(windows), "fingerprint": meta["fingerprint"]} for m, v in rm.items()]
    _write_rows(args.out, rows)
    for r in rows:
        print(f"{r['modality']}: rmse {float(r['rmse']):.6f}")
    return 0


def _write_rows(path, rows) -> None:
    if not rows:
        raise CliError("empty", "nothing to report")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        wr.writeheader()
        wr.writerows(rows)
    print(f"wrote {path}")


def _sweep_cfg(args) -> RunConfig:
    cfg = _config(args)
    _require_local(cfg)
    if args.steps is not None:
        cfg.train = replace(cfg.train, steps=args.steps)
    return cfg


def cmd_ablate(args) -> int:
    cfg = _sweep_cfg(args)
    reps = run_ablation(cfg.data, cfg.model, cfg.train, seeds=_seeds(args.seeds), cache_dir=args.cache)
    write_report_csv(args.out, reps, cfg.model.modalities)
    print(f"wrote {args.out} ({len(reps)} rows, {len(ABLATION_ROWS)} toggle settings)")
    return 0


def cmd_noise(args) -> int:
    cfg = _sweep_cfg(args)
    if len(cfg.model.modalities) < 2:
        raise CliError("config", "noise sweeps need at least two modalities")
    reps = noise_sweep(cfg.data, cfg.model, cfg.train, sigmas=_floats(args.sigmas),
                       variants=[v.replace("-", "_") for v in args.variants.split(",")],
                       seeds=_seeds(args.seeds), k_max=args.k_max, cache_dir=args.cache)
    write_report_csv(args.out, reps, cfg.model.modalities)
    print(f"wrote {args.out} ({len(reps)} rows)")
    return 0


def cmd_fusion(args) -> int:
    cfg = _sweep_cfg(args)
    reps = compare_fusion_strategies(cfg.data, cfg.model, cfg.train, seeds=_seeds(args.seeds), target=args.target,
                                     cache_dir=args.cache)
    write_report_csv(args.out, reps, cfg.model.modalities)
    print(f"wrote {args.out} ({len(reps)} rows)")
    return 0


def _load_grid(path) -> np.ndarray:
    p = Path(path)
    if not p.exists():
        raise CliError("missing-input", f"{p} does not exist")
    if p.suffix == ".npy":
        return np.load(p)
    return np.loadtxt(p, delimiter=",", ndmin=2)


def cmd_spectrum(args) -> int:
    if args.pred and args.truth:
        pred, truth = _load_grid(args.pred), _load_grid(args.truth)
    elif args.checkpoint and args.data:
        ds, _ = load_dataset(args.data)
        model, _, meta = load_checkpoint(args.checkpoint)
        pred, truth = _forecast_grid(model, ds, meta, args.modality)
    else:
        raise CliError("usage", "give --pred and --truth, or --checkpoint and --data")
    try:
        delta = power_spectrum_delta(pred, truth)
    except ValueError as exc:
        raise CliError("shape", str(exc)) from exc
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(out, delta, delimiter=",", fmt="%.17g")
    print(f"wrote {out}: grid {delta.shape}, total |delta| {float(delta.sum()):.6g}, "
          f"truth power {float(power_spectrum(truth).sum()):.6g}")
    return 0


def _forecast_grid(model: OmniFieldModel, ds: FieldDataset, meta: dict, modality: str):
    from .data import zscore_invert
    from .training import TrainConfig, build_instance

    if modality not in ds.modalities:
        raise CliError("usage", f"unknown modality {modality!r}")
    tc = TrainConfig(**meta["train"])
    s = tc.sampler()
    rng = np.random.default_rng(0)
    cols_p, cols_t = [], []
    for w in ds.val_idx:
        ctx, q, tgt = build_instance(ds, s, int(w), "forecasting", rng, dt_steps=s.horizon)
        pr = model.predict([ctx], [q])[0]
        if modality not in pr:
            raise CliError("usage", f"model does not forecast {modality!r}")
        cols_p.append(zscore_invert(pr[modality], ds.stats[modality]))
        cols_t.append(zscore_invert(tgt[modality], ds.stats[modality]))
    return np.stack(cols_p, axis=1), np.stack(cols_t, axis=1)


# parser ----------------------------------------------------------------------------------


def _common(p, data_flags: bool = True) -> None:
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--preset", help="named preset (default desk-synthetic)")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config field")
    p.add_argument("--seed", type=int, help="master seed applied to data, model and training")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="omnifield", description="Multimodal conditioned neural fields on sparse sensors.")
    sub = ap.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic dataset container")
    _common(p)
    p.add_argument("--out", required=True, help="container directory to write")
    p.add_argument("--sparsity", choices=["dense", "~50", "~30"], help="sensor sparsity preset")
    p.add_argument("--force", action="store_true", help="overwrite an existing container")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a dataset container")
    _common(p)
    p.add_argument("--data", help="dataset container from gen-data")
    p.add_argument("--out", help="run directory for checkpoints and metrics.csv")
    p.add_argument("--resume", action="store_true", help="continue from the last checkpoint in --out")
    p.add_argument("--force", action="store_true", help="discard an existing run in --out")
    p.add_argument("--dry-run", action="store_true", help="print hyperparameters and stop")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True, help="run directory or checkpoint container")
    p.add_argument("--data", required=True, help="dataset container")
    p.add_argument("--task", default="forecasting", help="reconstruction, interpolation, forecasting or cross_modal")
    p.add_argument("--strategy", default="icmr", help="co_location, interpolation, mid_fusion or icmr")
    p.add_argument("--split", choices=["val", "train"], default="val")
    p.add_argument("--dt", type=int, help="lead time in steps")
    p.add_argument("--holdout", help="modality withheld for cross-modal prediction")
    p.add_argument("--max-windows", type=int, help="evaluate at most this many windows")
    p.add_argument("--out", required=True, help="metrics CSV to write")
    p.set_defaults(func=cmd_eval)

    for verb, fn, helptext in (("ablate", cmd_ablate, "component ablation grid"),
                               ("noise", cmd_noise, "noise-robustness sweep"),
                               ("fusion", cmd_fusion, "fusion strategy comparison")):
        p = sub.add_parser(verb, help=helptext)
        _common(p)
        p.add_argument("--seeds", default="0", help="comma-separated seeds")
        p.add_argument("--steps", type=int, help="override training steps per run")
        p.add_argument("--cache", help="directory caching finished runs by fingerprint")
        p.add_argument("--out", required=True, help="report CSV to write")
        if verb == "noise":
            p.add_argument("--sigmas", default="0,0.5,1.0,2.0", help="comma-separated noise scales")
            p.add_argument("--variants", default="icmr,mid_fusion", help="comma-separated strategies")
            p.add_argument("--k-max", type=int, default=1, help="most modalities corrupted per sample")
        if verb == "fusion":
            p.add_argument("--target", default="S2", help="modality to forecast")
        p.set_defaults(func=fn)

    p = sub.add_parser("spectrum", help="power-spectrum delta between two grids")
    p.add_argument("--pred", help="predicted 2-D grid (.npy or CSV)")
    p.add_argument("--truth", help="reference 2-D grid (.npy or CSV)")
    p.add_argument("--checkpoint", help="forecast a grid from this run instead of --pred")
    p.add_argument("--data", help="dataset container used with --checkpoint")
    p.add_argument("--modality", default="S2", help="modality whose grid is compared")
    p.add_argument("--out", required=True, help="spectrum CSV to write")
    p.set_defaults(func=cmd_spectrum)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    if args.verb == "train" and not args.dry_run and (not args.data or not args.out):
        ap.error("train needs --data and --out (or --dry-run)")
    try:
        return args.func(args)
    except CliError as exc:
        msg, cat = str(exc), exc.category
    except ConfigError as exc:
        msg, cat = str(exc), "config"
    except ContainerError as exc:
        msg, cat = str(exc), "container"
    except TrainingDivergedError as exc:
        msg, cat = str(exc), "diverged"
    except ResumeMismatchError as exc:
        msg, cat = str(exc), "resume"
    except FileExistsError as exc:
        msg, cat = str(exc), "exists"
    except FileNotFoundError as exc:
        msg, cat = str(exc), "missing-input"
    except (OSError, ValueError, KeyError) as exc:
        msg, cat = str(exc), type(exc).__name__
    print(f"error: {cat}: {' '.join(msg.split())}", file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())

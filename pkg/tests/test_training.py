import math

import numpy as np
import pytest
from helpers import micro_config
from hypothesis import given
from hypothesis import strategies as st

from omnifield.container import read_container
from omnifield.data import DataConfig, generate_dataset
from omnifield.training import (
    NonFiniteGradientError,
    ScheduleSpec,
    TaskSampler,
    ResumeMismatchError,
    TrainConfig,
    adamw_init,
    adamw_step,
    build_instance,
    clip_global_norm,
    lr_at,
    load_checkpoint,
    run_fingerprint,
    sample_task,
    train,
    validation_rmse,
)

# schedule ----------------------------------------------------------------------------


def test_schedule_reference_points():
    spec = ScheduleSpec(8e-5, 8e-6, 1000, 100001)
    assert lr_at(0, spec) == 0.0
    assert lr_at(500, spec) == pytest.approx(4e-5)
    assert lr_at(1000, spec) == pytest.approx(8e-5, rel=1e-12)
    assert lr_at(50500, spec) == pytest.approx(4.4e-5, rel=1e-12)
    assert lr_at(100000, spec) == pytest.approx(8e-6, rel=1e-12)


def test_schedule_restarts_and_grows():
    spec = ScheduleSpec(1.0, 0.1, 2, 10)
    assert lr_at(10, spec) == 0.0
    assert lr_at(12, spec) == lr_at(2, spec) == 1.0
    grown = ScheduleSpec(1.0, 0.1, 2, 10, cycle_mult=2.0)
    assert lr_at(10, grown) == 0.0
    assert lr_at(29, grown) == pytest.approx(0.1)
    assert lr_at(30, grown) == 0.0


def test_schedule_validation():
    with pytest.raises(ValueError):
        ScheduleSpec(1e-4, 1e-3)
    with pytest.raises(ValueError):
        ScheduleSpec(warmup_steps=1000, cycle_steps=1000)
    with pytest.raises(ValueError):
        lr_at(-1, ScheduleSpec())


@given(st.integers(0, 50), st.integers(60, 400))
def test_schedule_is_bounded_and_decays_after_warmup(w, length):
    spec = ScheduleSpec(1e-3, 1e-4, w, length)
    lrs = np.array([lr_at(s, spec) for s in range(length)])
    assert lrs.max() <= 1e-3 + 1e-15 and lrs.min() >= 0.0
    assert np.all(np.diff(lrs[w:]) <= 1e-18)
    assert np.all(lrs[w:] >= 1e-4 - 1e-15)


# optimiser ----------------------------------------------------------------------------


def test_adamw_first_step_hand_value():
    st_ = adamw_init({"w": np.array([1.0])}, weight_decay=0.0)
    out = adamw_step({"w": np.array([1.0])}, {"w": np.array([1.0])}, st_, lr=0.1)
    assert out["w"][0] == pytest.approx(0.9, abs=1e-8)
    assert st_.step == 1


def test_adamw_decay_only_moves_by_lr_times_lambda():
    p = {"w": np.array([1.0, -2.0])}
    st_ = adamw_init(p, weight_decay=0.1)
    out = adamw_step(p, {"w": np.zeros(2)}, st_, lr=0.1)
    np.testing.assert_allclose(out["w"], [0.99, -1.98], rtol=1e-14)
    assert np.all(st_.m["w"] == 0) and np.all(st_.v["w"] == 0)


def test_adamw_matches_textbook_update():
    rng = np.random.default_rng(0)
    theta = rng.normal(size=5)
    p = {"w": theta.copy()}
    st_ = adamw_init(p, weight_decay=0.01)
    m = np.zeros(5)
    v = np.zeros(5)
    for t in range(1, 8):
        g = rng.normal(size=5)
        lr = 0.01 * t
        p = adamw_step(p, {"w": g}, st_, lr=lr)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g**2
        theta = theta - lr * 0.01 * theta - lr * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
        np.testing.assert_allclose(p["w"], theta, rtol=1e-12)


def test_adamw_uses_attached_schedule():
    spec = ScheduleSpec(1.0, 0.1, 1, 10)
    st_ = adamw_init({"w": np.ones(1)}, weight_decay=0.0, schedule=spec)
    out = adamw_step({"w": np.ones(1)}, {"w": np.ones(1)}, st_)
    assert out["w"][0] == 1.0
    with pytest.raises(ValueError):
        adamw_step({"w": np.ones(1)}, {"w": np.ones(1)}, adamw_init({"w": np.ones(1)}))


def test_adamw_nonfinite_policies():
    p = {"w": np.ones(2)}
    bad = {"w": np.array([np.nan, 1.0])}
    with pytest.raises(NonFiniteGradientError):
        adamw_step(p, bad, adamw_init(p), lr=0.1)
    st_ = adamw_init(p, nonfinite="skip")
    with pytest.warns(RuntimeWarning):
        out = adamw_step(p, bad, st_, lr=0.1)
    np.testing.assert_array_equal(out["w"], p["w"])
    assert st_.step == 0


def test_clip_global_norm():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    clipped, norm = clip_global_norm(g, 1.0)
    assert norm == 5.0
    np.testing.assert_allclose([clipped["a"][0], clipped["b"][0]], [0.6, 0.8])
    same, _ = clip_global_norm(g, 10.0)
    assert same["a"][0] == 3.0


# tasks ----------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def small_ds():
    return generate_dataset(DataConfig(n_x=24, n_t=40, t_max=4.0, input_len=6, pred_len=2, sparsity="dense", shared=4, exclusive=6, seed=2))


def test_sampler_validation():
    with pytest.raises(ValueError):
        TaskSampler(weights={"forecasting": 0.5})
    with pytest.raises(ValueError):
        TaskSampler(weights={"nowcasting": 1.0})
    with pytest.raises(ValueError):
        TaskSampler(horizon=0)


def test_forecasting_instance(small_ds):
    ds = small_ds
    ctx, q, y = build_instance(ds, TaskSampler(horizon=2, context_steps=3), 5, "forecasting", np.random.default_rng(0), dt_steps=2)
    idx, last = ds.window_times(5)
    assert q.delta_t == pytest.approx(2 * (ds.t[1] - ds.t[0]))
    assert len(q.locations["S2"]) == 24
    np.testing.assert_allclose(y["S2"], ds.normalized("S2", ds.fields[1, :, last + 2]))
    assert ctx.observations["S1"].n == 10 * 3
    assert np.all(ctx.observations["S1"].times <= ctx.t_in)


def test_reconstruction_and_interpolation_sites(small_ds):
    ds = small_ds
    rng = np.random.default_rng(0)
    _, qr, yr = build_instance(ds, TaskSampler(), 3, "reconstruction", rng)
    _, qi, _ = build_instance(ds, TaskSampler(), 3, "interpolation", rng)
    sensed = set(ds.locations[ds.masks.sensors(0)][:, 0])
    assert set(qr.locations["S1"][:, 0]) == sensed
    assert not set(qi.locations["S1"][:, 0]) & sensed
    assert qr.delta_t == 0.0
    _, last = ds.window_times(3)
    np.testing.assert_allclose(yr["S1"], ds.normalized("S1", ds.fields[0, ds.masks.sensors(0), last]))


def test_cross_modal_instance_hides_target(small_ds):
    ctx, q, _ = build_instance(small_ds, TaskSampler(), 1, "cross_modal", np.random.default_rng(1), holdout="S1")
    assert ctx.presence["S1"] == 0 and ctx.presence["S2"] == 1
    assert set(q.locations) == {"S1"}
    with pytest.raises(ValueError):
        build_instance(small_ds, TaskSampler(), 1, "teleport", np.random.default_rng(1))


def test_sampled_tasks_follow_weights(small_ds):
    sampler = TaskSampler(weights={"forecasting": 0.5, "reconstruction": 0.5})
    rng = np.random.default_rng(0)
    tasks = [sample_task(small_ds, sampler, rng)[1].task for _ in range(400)]
    frac = tasks.count("forecasting") / len(tasks)
    assert 0.4 < frac < 0.6
    assert set(tasks) == {"forecasting", "reconstruction"}


def test_horizon_longer_than_window_is_rejected(small_ds):
    with pytest.raises(ValueError):
        sample_task(small_ds, TaskSampler(horizon=3), np.random.default_rng(0))


# loop ------------------------------------------------------------------------------------


def _micro_train_cfg(**kw):
    base = dict(steps=8, batch_size=2, warmup_steps=2, eval_every=4, eval_windows=4, context_steps=2, seed=3)
    base.update(kw)
    return TrainConfig(**base)


def test_micro_run_reduces_loss(small_ds):
    cfg = _micro_train_cfg(steps=200, max_lr=3e-3, min_lr=3e-4, warmup_steps=10, eval_every=50, batch_size=4)
    res = train(micro_config(0), cfg, small_ds)
    losses = [float(r[2]) for r in res.history]
    first, last = np.mean(losses[:20]), np.mean(losses[-20:])
    assert last < 0.5 * first
    assert math.isfinite(res.best_metric) and res.best_step > 0


class _Stop(Exception):
    pass


def test_outputs_and_bitwise_resume(small_ds, tmp_path):
    mcfg, tcfg = micro_config(1), _micro_train_cfg()
    full = train(mcfg, tcfg, small_ds, tmp_path / "full")

    def interrupt(step, loss, row):
        if step == 5:
            raise _Stop

    with pytest.raises(_Stop):
        train(mcfg, tcfg, small_ds, tmp_path / "part", progress=interrupt)
    assert read_container(tmp_path / "part" / "last")[1]["step"] == 4
    resumed = train(mcfg, tcfg, small_ds, tmp_path / "part", resume=True)
    for k, p in full.model.parameters().items():
        np.testing.assert_array_equal(resumed.model.parameters()[k].data, p.data)
    assert (tmp_path / "full" / "metrics.csv").read_bytes() == (tmp_path / "part" / "metrics.csv").read_bytes()
    _, _, bmeta = load_checkpoint(tmp_path / "full" / "best")
    assert bmeta["step"] == full.best_step
    # a run directory resolves to its best checkpoint
    assert load_checkpoint(tmp_path / "full")[2]["step"] == full.best_step


def test_resume_rejects_other_configuration(small_ds, tmp_path):
    train(micro_config(1), _micro_train_cfg(steps=4), small_ds, tmp_path)
    with pytest.raises(ValueError):
        train(micro_config(1), _micro_train_cfg(steps=4, max_lr=5e-3), small_ds, tmp_path, resume=True)
    with pytest.raises(FileNotFoundError):
        train(micro_config(1), _micro_train_cfg(), small_ds, tmp_path / "nothing", resume=True)


def test_metrics_csv_layout(small_ds, tmp_path):
    train(micro_config(2), _micro_train_cfg(), small_ds, tmp_path)
    rows = (tmp_path / "metrics.csv").read_text().splitlines()
    assert rows[0] == "step,lr,train_loss,grad_norm,val_rmse_S1,val_rmse_S2"
    assert len(rows) == 9
    assert rows[4].split(",")[4] != "" and rows[1].split(",")[4] == ""


def test_unsupervised_targets_leave_heads_untouched(small_ds):
    cfg = _micro_train_cfg(target_modalities=["S2"], weight_decay=0.0, steps=3, eval_every=0)
    res = train(micro_config(4), cfg, small_ds)
    from omnifield.model import OmniFieldModel

    init = OmniFieldModel(micro_config(4)).parameters()
    for k, p in res.model.parameters().items():
        if k.startswith("heads.S1."):
            np.testing.assert_array_equal(p.data, init[k].data)


def test_validation_rmse_is_in_physical_units(small_ds):
    from omnifield.model import OmniFieldModel

    model = OmniFieldModel(micro_config(5))
    sampler = TaskSampler(context_steps=2)
    a = validation_rmse(model, small_ds, sampler, small_ds.val_idx[:3])
    assert set(a) == {"S1", "S2"}
    assert all(v > 0 for v in a.values())


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(steps=0).validate()
    with pytest.raises(ValueError):
        TrainConfig(nonfinite="ignore").validate()
    with pytest.raises(ValueError):
        TrainConfig(task_weights={"forecasting": 0.3}).validate()


def test_fingerprint_is_canonical():
    assert run_fingerprint({"a": 1, "b": 2}) == run_fingerprint({"b": 2, "a": 1})
    assert run_fingerprint({"a": 1}) != run_fingerprint({"a": 2})

"""Trainer loss terms, step mechanics, determinism, and convergence.

Oracles: hand arithmetic for the loss terms, an analytic gradient for the
reconstruction term, and a smooth synthetic anchor the INR must recover
under the reconstruction-only objective.
"""

import numpy as np
import pytest

from weightmorph import training as T
from weightmorph.datasets import Dataset, mean_std, normalize, synthesize_digits
from weightmorph.models import (NetConfig, bundle_shapes, enumerate_param_blocks,
                                full_config, init_bundle, with_depths)
from weightmorph.tensor import (NonFiniteError, ShapeError, Tape, Tensor)


def smooth_mlp_bundle(width=4, seed=0):
    """An anchor whose tensors are smooth coordinate functions."""
    cfg = NetConfig("mlp", (width,))
    bundle = init_bundle(cfg, np.random.default_rng(seed))
    for name, t in bundle.params.items():
        shape = t.shape
        if len(shape) == 2:
            r = np.linspace(0, 1, shape[0])[:, None]
            c = np.linspace(0, 1, shape[1])[None, :]
            t.data[...] = 0.3 * np.sin(2 * r) * np.cos(3 * c)
        else:
            t.data[...] = 0.1 * np.linspace(-1, 1, shape[0])
    return bundle


def tiny_plan(**kw):
    kw.setdefault("epochs", 1)
    kw.setdefault("batch_size", 16)
    kw.setdefault("num_freq", 2)
    kw.setdefault("num_layers", 3)
    kw.setdefault("num_hidden", 16)
    return T.TrainPlan(**kw)


def tiny_batch(n=16, seed=0):
    imgs, labels = synthesize_digits(n, seed=seed)
    mean, std = mean_std(imgs)
    return normalize(imgs, mean, std), labels


# ---------------------------------------------------------------------------
# loss terms


def test_recon_hand_arithmetic():
    gen = {"w": Tensor(np.array([1.0, 2.0]))}
    tgt = {"w": np.array([1.0, 1.0])}
    # ||gen - tgt||^2 = 1, ||tgt||^2 = 2
    assert float(T.loss_recon(gen, tgt).data) == pytest.approx(0.5)


def test_recon_zero_when_equal():
    arr = np.random.default_rng(0).standard_normal((3, 4)).astype(np.float32)
    gen = {"w": Tensor(arr.copy())}
    assert float(T.loss_recon(gen, {"w": arr}).data) == 0.0


def test_recon_zero_target_pulls_toward_zero():
    gen = {"w": Tensor(np.full((2, 2), 9.0))}
    # zero-norm target: plain squared error, 4 * 81
    assert float(T.loss_recon(gen, {"w": np.zeros((2, 2))}).data) == 324.0


def test_recon_sums_over_tensors():
    gen = {"a": Tensor(np.array([1.0, 2.0])), "b": Tensor(np.array([2.0]))}
    tgt = {"a": np.array([1.0, 1.0]), "b": np.array([1.0])}
    # a: 1/2 ; b: 1/1
    assert float(T.loss_recon(gen, tgt).data) == pytest.approx(1.5)


def test_recon_shape_mismatch_rejected():
    with pytest.raises(ShapeError, match="w"):
        T.loss_recon({"w": Tensor(np.zeros(3))}, {"w": np.zeros(4)})


def test_recon_gradient_is_analytic():
    rng = np.random.default_rng(1)
    g_np = rng.standard_normal((3, 5)).astype(np.float32)
    t_np = rng.standard_normal((3, 5)).astype(np.float32)
    g = Tensor(g_np, requires_grad=True)
    with Tape() as tape:
        loss = T.loss_recon({"w": g}, {"w": t_np})
        tape.backward(loss)
    w = float(np.sum(t_np.astype(np.float64) ** 2))
    expected = 2.0 * (g_np - t_np) / w
    np.testing.assert_allclose(g.grad, expected, rtol=1e-5, atol=1e-7)


def test_reg_examples():
    assert float(T.loss_reg([Tensor(np.zeros(4))]).data) == 0.0
    assert float(T.loss_reg([Tensor(np.array([3.0, 4.0]))]).data) == 25.0
    w = Tensor(np.random.default_rng(2).standard_normal(6))
    one = float(T.loss_reg([w]).data)
    four = float(T.loss_reg([Tensor(2 * w.data)]).data)
    assert four == pytest.approx(4 * one, rel=1e-6)
    assert float(T.loss_reg([]).data) == 0.0


# ---------------------------------------------------------------------------
# cache slicing


def test_slice_to_config():
    arr = np.arange(24.0, dtype=np.float32).reshape(4, 6)
    out = T.slice_to_config(arr, (2, 3))
    np.testing.assert_array_equal(out, arr[:2, :3])
    with pytest.raises(ShapeError):
        T.slice_to_config(arr, (5, 6))
    with pytest.raises(ShapeError):
        T.slice_to_config(arr, (4, 6, 1))


def test_plan_validation():
    with pytest.raises(ValueError, match="gamma_max"):
        tiny_plan(gamma_max=1.0)
    with pytest.raises(ValueError, match="rho"):
        tiny_plan(rho=0.0)
    with pytest.raises(ValueError, match="lambda"):
        tiny_plan(lambda2=-1e-4)


# ---------------------------------------------------------------------------
# single-step mechanics


def stepped_state(plan, n_steps=1, width=4, seed=0):
    smooth = smooth_mlp_bundle(width)
    rng = np.random.default_rng(plan.seed)
    state = T.init_state(plan, smooth, total_steps=100, rng=rng)
    x, y = tiny_batch(plan.batch_size, seed=seed)
    for _ in range(n_steps):
        T.train_step(state, (x, y), plan, rng)
    return state


def test_untouched_blocks_contribute_no_gradient():
    plan = tiny_plan(rho=0.25, gamma_max=0.0)
    state = stepped_state(plan, n_steps=1)
    touched_groups = {n.split(".layer")[0] for n in state.adam.m}
    assert len(touched_groups) == 1  # ceil(0.25 * 4) = 1 block regenerated
    all_groups = {f"inr.{g}" for g in state.inr.group_kinds}
    assert touched_groups < all_groups


def test_task_gradient_flows_with_zero_lambdas():
    plan = tiny_plan(lambda1=0.0, lambda2=0.0, rho=1.0, gamma_max=0.0)
    state = stepped_state(plan, n_steps=1)
    assert state.adam.m
    assert any(np.abs(m).max() > 0 for m in state.adam.m.values())


def test_full_config_forced_every_tenth_step():
    plan = tiny_plan(rho=0.5, gamma_max=0.5, seed=3)
    state = stepped_state(plan, n_steps=11)
    gammas = [row["gamma"] for row in state.history]
    assert gammas[0] == 0.0 and gammas[10] == 0.0
    assert any(g > 0 for g in gammas[1:10])


def test_history_rows_are_finite_and_complete():
    plan = tiny_plan(rho=0.5, gamma_max=0.5, seed=4)
    state = stepped_state(plan, n_steps=3)
    for row in state.history:
        for col in T.CURVE_COLUMNS:
            assert np.isfinite(row[col])


def test_cache_holds_anchor_until_generation_lands():
    plan = tiny_plan(rho=1.0, gamma_max=0.5, seed=5)
    smooth = smooth_mlp_bundle()
    state = stepped_state(plan, n_steps=2)
    shapes = bundle_shapes(smooth.config)
    fitted = {b.name for b in enumerate_param_blocks(smooth.config)}
    # fresh INR output is near zero, far off every anchor: nothing switches
    assert state.switched == set()
    for name in fitted:
        assert state.cache[name].shape == shapes[name]
        np.testing.assert_array_equal(state.cache[name],
                                      smooth.params[name].data)


def test_ema_shadow_tracks_theta():
    plan = tiny_plan(rho=1.0, ema=0.5, gamma_max=0.0)
    state = stepped_state(plan, n_steps=2)
    name = next(n for n in state.adam.m)
    assert not np.array_equal(state.ema.shadow[name],
                              state.inr.params[name].data)
    diff = np.abs(state.ema.shadow[name] - state.inr.params[name].data)
    assert np.isfinite(diff).all()


def test_step_determinism_bitwise():
    plan = tiny_plan(rho=0.5, gamma_max=0.5, seed=6)
    a = stepped_state(plan, n_steps=5)
    b = stepped_state(plan, n_steps=5)
    assert a.history == b.history
    for name, t in a.inr.params.items():
        np.testing.assert_array_equal(t.data, b.inr.params[name].data)
        np.testing.assert_array_equal(a.ema.shadow[name], b.ema.shadow[name])


def test_nonfinite_parameter_aborts_with_step_context():
    plan = tiny_plan(rho=1.0, gamma_max=0.0)
    smooth = smooth_mlp_bundle()
    rng = np.random.default_rng(0)
    state = T.init_state(plan, smooth, total_steps=10, rng=rng)
    name = next(iter(state.inr.params))
    state.inr.params[name].data[0] = np.inf
    x, y = tiny_batch(plan.batch_size)
    with pytest.raises(NonFiniteError, match="step 0"):
        with np.errstate(invalid="ignore"):
            T.train_step(state, (x, y), plan, rng)


def test_depth_pool_sampling_changes_depths():
    cfg = with_depths(full_config("miniresnet"), 2, 2)
    smooth = init_bundle(cfg, np.random.default_rng(0))
    plan = tiny_plan(rho=0.2, gamma_max=0.0, depth_pool=(1, 2), seed=1,
                     batch_size=4)
    rng = np.random.default_rng(plan.seed)
    state = T.init_state(plan, smooth, total_steps=50, rng=rng)
    x, y = tiny_batch(4)
    depths = set()
    for _ in range(6):
        row = T.train_step(state, (x, y), plan, rng)
        depths.add(row["depths"])
    assert (2, 2) in depths  # forced full config
    assert len(depths) > 1   # pool actually sampled


# ---------------------------------------------------------------------------
# reconstruction-only convergence (degenerate objective)


def test_reconstruction_only_objective_converges():
    smooth = smooth_mlp_bundle(width=4)
    plan = tiny_plan(task_weight=0.0, lambda1=1e6, lambda2=0.0, rho=1.0,
                     gamma_max=0.0, lr=2e-3, num_freq=4, num_layers=3,
                     num_hidden=32, perturb_a=0.0, seed=7)
    rng = np.random.default_rng(plan.seed)
    state = T.init_state(plan, smooth, total_steps=2000, rng=rng)
    for _ in range(2000):
        T.train_step(state, (None, None), plan, rng)
    errors = T.reconstruction_errors(state.inr,
                                     state.smooth, smooth.config)
    assert max(errors.values()) < 0.05
    totals = [row["total"] for row in state.history]
    assert totals[-1] < totals[0] * 0.01
    # every block crossed the cache gate and now tracks the generation
    fitted = {b.name for b in enumerate_param_blocks(smooth.config)}
    assert state.switched == fitted
    assert all(not np.array_equal(state.cache[n], state.smooth[n])
               for n in fitted)


# ---------------------------------------------------------------------------
# full run


def small_dataset(n_train=96, n_test=32):
    xi, yi = synthesize_digits(n_train, seed=11)
    xt, yt = synthesize_digits(n_test, seed=12)
    return Dataset(xi, yi, xt, yt)


def test_train_end_to_end_report_and_curve(tmp_path):
    ds = small_dataset()
    smooth = smooth_mlp_bundle()
    plan = tiny_plan(epochs=1, batch_size=32, rho=0.5, gamma_max=0.5, seed=8)
    inr, report = T.train(plan, smooth, ds)
    fitted = {b.name for b in enumerate_param_blocks(smooth.config)}
    assert set(report["recon_errors"]) == fitted
    assert all(np.isfinite(v) for v in report["recon_errors"].values())
    assert len(report["history"]) == report["total_steps"] == 3
    path = str(tmp_path / "curve.csv")
    T.write_curve(report["history"], path)
    lines = open(path).read().splitlines()
    assert lines[0] == "step,lr,L_task,L_recon,L_reg,total,gamma"
    assert len(lines) == 4
    assert all("," in ln and "." in ln for ln in lines[1:])


def test_train_determinism_bitwise():
    ds = small_dataset(64, 16)
    smooth = smooth_mlp_bundle()
    plan = tiny_plan(epochs=1, batch_size=32, rho=0.5, gamma_max=0.5, seed=9)
    inr_a, rep_a = T.train(plan, smooth, ds)
    inr_b, rep_b = T.train(plan, smooth, ds)
    assert rep_a["history"] == rep_b["history"]
    for name, t in inr_a.params.items():
        np.testing.assert_array_equal(t.data, inr_b.params[name].data)


def test_train_rejects_unfolded_bundle():
    ds = small_dataset(32, 16)
    cfg = with_depths(full_config("miniresnet"), 1, 1)
    unfolded = init_bundle(cfg, np.random.default_rng(0), folded=False)
    with pytest.raises(ValueError, match="folded"):
        T.train(tiny_plan(), unfolded, ds)

"""Metric correctness: CKA, KL, sweeps, heatmaps, sampling ablation, CSVs."""

import numpy as np
import pytest

from weightmorph import evaluation as E
from weightmorph import hypernet as H
from weightmorph import models as M
from weightmorph.datasets import mean_std, normalize, synthesize_digits
from weightmorph.models import (NetConfig, full_config, init_bundle,
                                param_count, with_depths)


def eval_batch(n=48, seed=0):
    imgs, labels = synthesize_digits(n, seed=seed)
    mean, std = mean_std(imgs)
    return normalize(imgs, mean, std), labels


def tiny_lenet_inr(seed=0):
    return H.build_inr(full_config("lenet"), np.random.default_rng(seed),
                       num_freq=1, num_layers=2, num_hidden=8,
                       frozen={"fc2.bias": np.zeros(10, dtype=np.float32)})


# ---------------------------------------------------------------------------
# linear CKA


def test_cka_self_is_one():
    x = np.random.default_rng(0).standard_normal((64, 7))
    assert E.linear_cka(x, x) == pytest.approx(1.0, abs=1e-9)


def test_cka_rotation_invariance():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((64, 7))
    q, _ = np.linalg.qr(rng.standard_normal((7, 7)))
    assert E.linear_cka(x, x @ q) == pytest.approx(1.0, abs=1e-7)


def test_cka_independent_features_near_zero():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((2000, 4))
    y = rng.standard_normal((2000, 4))
    assert E.linear_cka(x, y) < 0.2


def test_cka_symmetry():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((50, 6))
    y = rng.standard_normal((50, 9))
    assert abs(E.linear_cka(x, y) - E.linear_cka(y, x)) < 1e-9


def test_cka_scale_invariance_and_range():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((40, 5))
    y = rng.standard_normal((40, 5))
    v = E.linear_cka(x, y)
    assert 0.0 <= v <= 1.0 + 1e-12
    assert E.linear_cka(3.7 * x, y) == pytest.approx(v, rel=1e-9)


def test_cka_zero_variance_rejected():
    x = np.ones((10, 3))
    y = np.random.default_rng(5).standard_normal((10, 3))
    with pytest.raises(ValueError, match="zero-variance"):
        E.linear_cka(x, y)
    with pytest.raises(ValueError, match="row counts"):
        E.linear_cka(y, y[:5])


# ---------------------------------------------------------------------------
# output KL


def test_kl_identical_bundles_zero():
    bundle = init_bundle(NetConfig("mlp", (8,)), np.random.default_rng(6))
    x, _ = eval_batch(16)
    assert E.output_kl(bundle, bundle, x) == pytest.approx(0.0, abs=1e-12)


def test_kl_nonnegative_and_asymmetric():
    a = init_bundle(NetConfig("mlp", (8,)), np.random.default_rng(7))
    b = init_bundle(NetConfig("mlp", (8,)), np.random.default_rng(8))
    x, _ = eval_batch(16)
    ab = E.output_kl(a, b, x)
    ba = E.output_kl(b, a, x)
    assert ab >= 0.0 and ba >= 0.0
    assert ab > 0.0


def test_kl_floor_keeps_saturated_outputs_finite():
    a = init_bundle(NetConfig("mlp", (8,)), np.random.default_rng(9))
    b = init_bundle(NetConfig("mlp", (8,)), np.random.default_rng(10))
    for t in b.params.values():
        t.data *= 80.0  # saturates softmax to one-hot
    x, _ = eval_batch(16)
    assert np.isfinite(E.output_kl(a, b, x))
    assert np.isfinite(E.output_kl(b, a, x))


# ---------------------------------------------------------------------------
# feature extraction


def test_mlp_features_match_manual_computation():
    bundle = init_bundle(NetConfig("mlp", (8,)), np.random.default_rng(11))
    x, _ = eval_batch(8)
    feats = E.feature_matrix(bundle, x)
    flat = x.reshape(8, -1)
    w = bundle.params["fc1.weight"].data
    b = bundle.params["fc1.bias"].data
    expected = np.maximum(flat @ w.T + b, 0.0)
    np.testing.assert_allclose(feats, expected, rtol=1e-5, atol=1e-6)


def test_lenet_feature_width_tracks_config():
    bundle = init_bundle(M.compress_config(full_config("lenet"), 0.5),
                         np.random.default_rng(12))
    x, _ = eval_batch(4)
    assert E.feature_matrix(bundle, x).shape == (4, 60)


# ---------------------------------------------------------------------------
# compression sweep


def test_sweep_flags_and_counts():
    inr = tiny_lenet_inr()
    x, labels = eval_batch(24)
    result = E.compression_sweep(inr, [0.0, 0.25, 0.5, 0.75], k_samples=1,
                                 x=x, labels=labels, gamma_max=0.5, seed=0)
    rows = list(result)
    assert [r.extrapolated for r in rows] == [False, False, False, True]
    counts = [r.param_count for r in rows]
    assert all(a > b for a, b in zip(counts, counts[1:]))
    assert counts[0] == param_count(full_config("lenet"))
    assert all(0.0 <= r.accuracy <= 1.0 for r in rows)


def test_sweep_single_gamma_and_validation():
    inr = tiny_lenet_inr()
    x, labels = eval_batch(8)
    rows = list(E.compression_sweep(inr, [0.0], 1, x, labels, 0.5))
    assert len(rows) == 1 and rows[0].gamma == 0.0
    with pytest.raises(ValueError, match="increasing"):
        E.compression_sweep(inr, [0.5, 0.5], 1, x, labels, 0.5)


# ---------------------------------------------------------------------------
# depth heatmap


def mini_inr(seed=0):
    cfg = with_depths(full_config("miniresnet"), 2, 2)
    return H.build_inr(cfg, np.random.default_rng(seed), num_freq=1,
                       num_layers=2, num_hidden=8)


def test_heatmap_single_cell_and_flags():
    inr = mini_inr()
    x, labels = eval_batch(8)
    rows = E.depth_heatmap(inr, [1], [1], x, labels, trained_depths={1, 2})
    assert len(rows) == 1
    assert rows[0]["trained"] is True
    rows = E.depth_heatmap(inr, [1, 3], [1], x, labels, trained_depths={1, 2})
    assert [(r["l1"], r["l2"]) for r in rows] == [(1, 1), (3, 1)]
    assert rows[1]["trained"] is False


# ---------------------------------------------------------------------------
# sampling ablation


def test_ablation_zero_width_makes_k_irrelevant():
    inr = tiny_lenet_inr(1)
    x, labels = eval_batch(16)
    rows = E.sampling_ablation(inr, [0.5], (1, 5), [0, 1], x, labels,
                               gamma_max=0.5, a_index=0.0)
    accs = {r["K"]: r["mean_accuracy"] for r in rows}
    assert accs[1] == accs[5]
    assert all(r["k_high_wins"] for r in rows)


def test_ablation_reproducible_and_flagged():
    inr = tiny_lenet_inr(2)
    x, labels = eval_batch(16)
    args = (inr, [0.75], (1, 2), [3, 4], x, labels)
    a = E.sampling_ablation(*args, gamma_max=0.5)
    b = E.sampling_ablation(*args, gamma_max=0.5)
    assert a == b
    assert all(r["extrapolated"] for r in a)


# ---------------------------------------------------------------------------
# similarity report


def test_similarity_identical_bundles():
    bundle = init_bundle(NetConfig("mlp", (8,)), np.random.default_rng(13))
    x, _ = eval_batch(12)
    rep = E.similarity_report({"a": bundle, "b": bundle}, x)
    np.testing.assert_allclose(rep["cka"], 1.0, atol=1e-7)
    np.testing.assert_allclose(rep["kl"], 0.0, atol=1e-12)
    np.testing.assert_allclose(rep["cka"], rep["cka"].T)


# ---------------------------------------------------------------------------
# CSV emitters


def test_sweep_csv_layout(tmp_path):
    rows = E.SweepResult((E.SweepRow(0.0, 0.95, 1000, False),
                          E.SweepRow(0.75, 0.5, 100, True)))
    path = str(tmp_path / "sweep.csv")
    E.write_sweep_csv(rows, path)
    lines = open(path, "rb").read().decode().split("\n")
    assert lines[0] == "gamma,accuracy,param_count,extrapolated"
    assert lines[1] == "0,0.950000,1000,0"
    assert lines[2] == "0.75,0.500000,100,1"
    assert b"\r" not in open(path, "rb").read()


def test_csv_rejects_nonfinite(tmp_path):
    rows = E.SweepResult((E.SweepRow(0.0, float("nan"), 10, False),))
    with pytest.raises(ValueError, match="non-finite"):
        E.write_sweep_csv(rows, str(tmp_path / "bad.csv"))


def test_heatmap_and_ablation_csv(tmp_path):
    hrows = [{"l1": 1, "l2": 2, "accuracy": 0.9, "trained": True}]
    hpath = str(tmp_path / "heat.csv")
    E.write_heatmap_csv(hrows, hpath)
    assert open(hpath).read().splitlines() == ["l1,l2,accuracy,trained",
                                               "1,2,0.900000,1"]
    arows = [{"gamma": 0.5, "K": 50, "mean_accuracy": 0.8,
              "extrapolated": False, "k_high_wins": True}]
    apath = str(tmp_path / "abl.csv")
    E.write_ablation_csv(arows, apath)
    assert open(apath).read().splitlines()[1] == "0.5,50,0.800000,0,1"


def test_similarity_and_tv_csv(tmp_path):
    rep = {"names": ["full", "half"],
           "cka": np.array([[1.0, 0.5], [0.5, 1.0]]),
           "kl": np.array([[0.0, 0.1], [0.2, 0.0]])}
    spath = str(tmp_path / "sim.csv")
    E.write_similarity_csv(rep, spath)
    lines = open(spath).read().splitlines()
    assert lines[0] == "metric,row,full,half"
    assert lines[1] == "cka,full,1.000000,0.500000"
    assert lines[3] == "kl,full,0.000000,0.100000"
    tpath = str(tmp_path / "tv.csv")
    E.write_tv_csv([("conv1.weight", 1.0, 2.0, 3.0),
                    ("TOTAL", 1.0, 2.0, 3.0)], tpath)
    lines = open(tpath).read().splitlines()
    assert lines[0] == "name,tv_in,tv_out,tv_total"
    assert lines[-1] == "TOTAL,1.000000,2.000000,3.000000"

"""Config arithmetic, forward-pass contracts, BN folding, and pretraining."""

import numpy as np
import pytest

from weightmorph import models as M
from weightmorph.checkpoint import load_checkpoint, save_checkpoint
from weightmorph.datasets import Dataset, normalize, synthesize_digits
from weightmorph.models import (NetConfig, ParamError, Tensor, WeightBundle,
                                compress_config, enumerate_param_blocks,
                                fold_batchnorm, full_config, init_bundle,
                                layer_table, param_count, validate_bundle)


def tiny_dataset(n_train=600, n_test=200, seed=0) -> Dataset:
    tr_img, tr_lab = synthesize_digits(n_train, seed)
    te_img, te_lab = synthesize_digits(n_test, seed + 1)
    return Dataset(tr_img, tr_lab, te_img, te_lab)


# ---------------------------------------------------------------------------
# configs


def test_lenet_layer_table():
    table = layer_table(full_config("lenet"))
    assert [s.name for s in table] == ["conv1", "conv2", "fc1", "fc2"]
    assert [s.l for s in table] == [0, 1, 2, 3]
    fc1 = table[2]
    assert fc1.c_in == 16 * 25 and fc1.group == 25
    assert table[0].pad == 2 and table[1].pad == 0


def test_miniresnet_layer_table_depth_dependent():
    cfg = full_config("miniresnet")
    names = [s.name for s in layer_table(cfg)]
    assert names[0] == "stem" and names[-1] == "head" and "trans" in names
    assert len(names) == 3 + 2 * (3 + 3)  # stem/trans/head + 2 convs per block
    shallow = M.with_depths(cfg, 1, 1)
    assert len(layer_table(shallow)) == 3 + 2 * 2


def test_config_validation():
    with pytest.raises(ValueError, match="arch"):
        NetConfig("vgg", (8,))
    with pytest.raises(ValueError, match="widths"):
        NetConfig("mlp", (0,))
    with pytest.raises(ValueError, match="block_depths"):
        NetConfig("miniresnet", (8, 16), block_depths=(0, 2))


@pytest.mark.parametrize("gamma,expected", [
    (0.0, (6, 16, 120)),
    (0.25, (5, 12, 90)),   # 4.5 rounds half-up to 5
    (0.5, (3, 8, 60)),
    (0.75, (2, 4, 30)),    # 1.5 rounds half-up to 2
    (0.95, (1, 1, 6)),     # floor at one channel
])
def test_compress_config_rounding(gamma, expected):
    assert compress_config(full_config("lenet"), gamma).layer_widths == expected


def test_compress_config_rejects_out_of_range():
    with pytest.raises(ValueError):
        compress_config(full_config("lenet"), 1.0)
    with pytest.raises(ValueError):
        compress_config(full_config("lenet"), -0.1)


@pytest.mark.parametrize("arch", ["mlp", "lenet", "miniresnet"])
def test_param_count_strictly_decreasing_in_gamma(arch):
    cfg = full_config(arch)
    counts = [param_count(compress_config(cfg, g)) for g in (0.0, 0.25, 0.5)]
    assert counts[0] > counts[1] > counts[2]


def test_classifier_width_never_compressed():
    cfg = compress_config(full_config("lenet"), 0.5)
    assert layer_table(cfg)[-1].c_out == 10


# ---------------------------------------------------------------------------
# bundles and forward passes


@pytest.mark.parametrize("arch", ["mlp", "lenet", "miniresnet"])
def test_init_bundle_passes_validation_and_forward(arch):
    cfg = full_config(arch)
    bundle = init_bundle(cfg, np.random.default_rng(0))
    validate_bundle(bundle)
    x = Tensor(np.random.default_rng(1).standard_normal((3, 1, 28, 28)) * 0.5)
    logits = M.forward(bundle, x)
    assert logits.shape == (3, 10)


def test_compressed_forward_shapes():
    cfg = compress_config(full_config("lenet"), 0.5)
    bundle = init_bundle(cfg, np.random.default_rng(0))
    x = Tensor(np.zeros((2, 1, 28, 28), dtype=np.float32))
    assert M.forward(bundle, x).shape == (2, 10)


def test_zero_weight_lenet_gives_uniform_logits():
    cfg = full_config("lenet")
    bundle = init_bundle(cfg, np.random.default_rng(0))
    for t in bundle.params.values():
        t.data[...] = 0.0
    x = Tensor(np.random.default_rng(2).standard_normal((4, 1, 28, 28)))
    logits = M.forward(bundle, x)
    assert np.ptp(logits.data) == 0.0


def test_mlp_basis_vector_selects_matrix_row():
    cfg = NetConfig("mlp", (16,))
    rng = np.random.default_rng(3)
    bundle = init_bundle(cfg, rng)
    w1 = np.zeros((16, 784), dtype=np.float32)
    w1[:, :16] = np.eye(16)
    bundle.params["fc1.weight"].data[...] = w1
    bundle.params["fc1.bias"].data[...] = 0.0
    bundle.params["fc2.bias"].data[...] = 0.0
    w2 = bundle.params["fc2.weight"].data
    j = 11
    x = np.zeros((1, 1, 28, 28), dtype=np.float32)
    x[0, 0, j // 28, j % 28] = 1.0
    logits = M.forward(bundle, Tensor(x))
    np.testing.assert_allclose(logits.data[0], w2[:, j], rtol=1e-6)


def test_missing_parameter_named_in_error():
    cfg = full_config("mlp")
    bundle = init_bundle(cfg, np.random.default_rng(0))
    del bundle.params["fc2.bias"]
    with pytest.raises(ParamError, match="fc2.bias"):
        M.forward(bundle, Tensor(np.zeros((1, 1, 28, 28), dtype=np.float32)))


def test_wrong_shape_named_in_error():
    cfg = full_config("mlp")
    bundle = init_bundle(cfg, np.random.default_rng(0))
    bundle.params["fc1.weight"] = Tensor(np.zeros((3, 3), dtype=np.float32))
    with pytest.raises(ParamError, match="fc1.weight"):
        validate_bundle(bundle)


def test_extra_parameter_rejected():
    cfg = full_config("mlp")
    bundle = init_bundle(cfg, np.random.default_rng(0))
    bundle.params["mystery"] = Tensor(np.zeros(1, dtype=np.float32))
    with pytest.raises(ParamError, match="mystery"):
        validate_bundle(bundle)


def test_bundle_checkpoint_roundtrip_bit_identical_logits(tmp_path):
    cfg = full_config("lenet")
    bundle = init_bundle(cfg, np.random.default_rng(4))
    x = Tensor(np.random.default_rng(5).standard_normal((2, 1, 28, 28)))
    before = M.forward(bundle, x).data
    p = tmp_path / "b.nmwt"
    save_checkpoint(p, {k: v.data for k, v in bundle.params.items()},
                    {"kind": "baseline"})
    loaded = load_checkpoint(p)
    bundle2 = WeightBundle(cfg, {k: Tensor(v) for k, v in loaded.tensors.items()})
    after = M.forward(bundle2, x).data
    assert np.array_equal(before, after)


# ---------------------------------------------------------------------------
# block enumeration


def test_lenet_has_exactly_seven_blocks_final_bias_excluded():
    blocks = enumerate_param_blocks(full_config("lenet"))
    assert [b.name for b in blocks] == [
        "conv1.weight", "conv1.bias", "conv2.weight", "conv2.bias",
        "fc1.weight", "fc1.bias", "fc2.weight"]
    kinds = {b.name: b.kind for b in blocks}
    assert kinds["conv1.weight"] == "conv_weight"
    assert kinds["fc1.weight"] == "linear_weight"
    assert kinds["conv2.bias"] == "bias"


def test_mlp_has_four_blocks():
    blocks = enumerate_param_blocks(full_config("mlp"))
    assert [b.name for b in blocks] == [
        "fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias"]


def test_miniresnet_block_count_matches_construction():
    cfg = M.with_depths(full_config("miniresnet"), 2, 2)
    blocks = enumerate_param_blocks(cfg)
    n_convs = 1 + 2 * 2 + 1 + 2 * 2  # stem + stage1 + trans + stage2
    assert len(blocks) == 2 * n_convs + 2  # weight+bias each, plus head pair
    assert len(blocks) == len(set(b.name for b in blocks))


def test_block_enumeration_stable():
    a = enumerate_param_blocks(full_config("lenet"))
    b = enumerate_param_blocks(full_config("lenet"))
    assert a == b


# ---------------------------------------------------------------------------
# BatchNorm folding


def _randomized_bn_bundle(seed=0):
    cfg = M.with_depths(full_config("miniresnet"), 1, 1)
    rng = np.random.default_rng(seed)
    bundle = init_bundle(cfg, rng, folded=False)
    for name, t in bundle.params.items():
        if name.endswith(".bn.gamma"):
            t.data[...] = rng.uniform(0.7, 1.4, t.shape).astype(np.float32)
        elif name.endswith(".bn.beta"):
            t.data[...] = rng.normal(0, 0.2, t.shape).astype(np.float32)
    for name, buf in bundle.buffers.items():
        if name.endswith(".mean"):
            buf[...] = rng.normal(0, 0.3, buf.shape).astype(np.float32)
        else:
            buf[...] = rng.uniform(0.5, 1.5, buf.shape).astype(np.float32)
    return cfg, bundle


def test_identity_bn_folding_keeps_weights():
    cfg = M.with_depths(full_config("miniresnet"), 1, 1)
    bundle = init_bundle(cfg, np.random.default_rng(1), folded=False)
    folded = fold_batchnorm(bundle)
    w0 = bundle.params["stem.weight"].data
    np.testing.assert_allclose(folded.params["stem.weight"].data, w0, rtol=2e-5)
    np.testing.assert_allclose(folded.params["stem.bias"].data, 0.0, atol=1e-7)


def test_bn_gain_two_doubles_weights():
    cfg, bundle = _randomized_bn_bundle(2)
    bundle.params["stem.bn.gamma"].data[...] = 2.0
    bundle.buffers["stem.bn.mean"][...] = 0.0
    bundle.buffers["stem.bn.var"][...] = 1.0
    folded = fold_batchnorm(bundle)
    np.testing.assert_allclose(folded.params["stem.weight"].data,
                               2.0 * bundle.params["stem.weight"].data, rtol=2e-5)


@pytest.mark.parametrize("seed", range(3))
def test_folded_matches_unfolded_inference_logits(seed):
    cfg, bundle = _randomized_bn_bundle(seed)
    folded = fold_batchnorm(bundle)
    validate_bundle(folded)
    rng = np.random.default_rng(100 + seed)
    for _ in range(10):
        x = Tensor(rng.standard_normal((2, 1, 28, 28)) * 0.3)
        a = M.forward(bundle, x, training=False).data
        b = M.forward(folded, x, training=False).data
        assert np.abs(a - b).max() < 1e-5


@pytest.mark.parametrize("seed", range(3))
def test_single_conv_bn_fold_dual_path(seed):
    from weightmorph import tensor as T
    rng = np.random.default_rng(40 + seed)
    w = Tensor(rng.standard_normal((4, 3, 3, 3)) * 0.3)
    gamma = Tensor(rng.uniform(0.7, 1.4, 4))
    beta = Tensor(rng.normal(0, 0.2, 4))
    mu = rng.normal(0, 0.3, 4).astype(np.float32)
    var = rng.uniform(0.5, 1.5, 4).astype(np.float32)
    scale = gamma.data / np.sqrt(var + 1e-5)
    wf = Tensor(w.data * scale[:, None, None, None])
    bf = Tensor(beta.data - mu * scale)
    for _ in range(10):
        x = Tensor(rng.standard_normal((2, 3, 8, 8)) * 0.5)
        unfolded = T.batchnorm2d(T.conv2d(x, w, None, pad=1), gamma, beta,
                                 mu.copy(), var.copy(), training=False).data
        folded = T.conv2d(x, wf, bf, pad=1).data
        assert np.abs(unfolded - folded).max() < 1e-5


def test_fold_without_bn_is_identity():
    cfg = full_config("lenet")
    bundle = init_bundle(cfg, np.random.default_rng(3))
    folded = fold_batchnorm(bundle)
    for name, t in bundle.params.items():
        np.testing.assert_array_equal(folded.params[name].data, t.data)


def test_orphan_bn_is_structural_error():
    cfg = full_config("mlp")
    bundle = init_bundle(cfg, np.random.default_rng(4))
    bundle.params["ghost.bn.gamma"] = Tensor(np.ones(4, dtype=np.float32))
    bundle.params["ghost.bn.beta"] = Tensor(np.zeros(4, dtype=np.float32))
    bundle.buffers["ghost.bn.mean"] = np.zeros(4, dtype=np.float32)
    bundle.buffers["ghost.bn.var"] = np.ones(4, dtype=np.float32)
    with pytest.raises(ParamError, match="ghost"):
        fold_batchnorm(bundle)


# ---------------------------------------------------------------------------
# pretraining


def test_zero_epoch_pretrain_is_chance_level():
    ds = tiny_dataset()
    cfg = full_config("mlp")
    _, report = M.pretrain(cfg, ds, epochs=0, seed=0)
    assert abs(report["acc"] - 0.10) < 0.08


def test_mlp_pretrain_learns():
    ds = tiny_dataset(n_train=2000, n_test=400, seed=5)
    _, report = M.pretrain(full_config("mlp"), ds, epochs=3, seed=0)
    assert report["acc"] > 0.8


def test_pretrain_deterministic():
    ds = tiny_dataset(n_train=300, n_test=100, seed=6)
    b1, r1 = M.pretrain(full_config("mlp"), ds, epochs=1, seed=7)
    b2, r2 = M.pretrain(full_config("mlp"), ds, epochs=1, seed=7)
    assert r1["acc"] == r2["acc"]
    for name in b1.params:
        assert np.array_equal(b1.params[name].data, b2.params[name].data)


def test_miniresnet_pretrain_updates_bn_buffers():
    ds = tiny_dataset(n_train=256, n_test=64, seed=8)
    cfg = M.with_depths(full_config("miniresnet"), 1, 1)
    bundle, _ = M.pretrain(cfg, ds, epochs=1, seed=0, batch_size=64)
    assert not bundle.folded
    assert np.abs(bundle.buffers["stem.bn.mean"]).max() > 0.0
    folded = fold_batchnorm(bundle)
    validate_bundle(folded)


def test_constant_logit_accuracy_is_argmax_class_frequency():
    ds = tiny_dataset(n_train=50, n_test=300, seed=9)
    cfg = full_config("mlp")
    bundle = init_bundle(cfg, np.random.default_rng(0))
    for t in bundle.params.values():
        t.data[...] = 0.0
    xte = normalize(ds.test_images, 0.5, 0.5)
    acc = M.accuracy_on(bundle, xte, ds.test_labels)
    assert acc == pytest.approx(float((ds.test_labels == 0).mean()))

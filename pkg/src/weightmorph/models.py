"""Main-network definitions driven by externally supplied weight bundles.

Three architectures, all consuming a :class:`WeightBundle` at call time so
the same forward code runs pretrained weights, permuted weights, and
hypernetwork-generated weights interchangeably:

  mlp          flatten -> fc1 -> relu -> fc2
  lenet        conv(1->w0,k5,pad2) relu pool | conv(w0->w1,k5) relu pool |
               flatten | fc(->w2) relu | fc(->classes)
  miniresnet   conv stem -> pool -> stage of residual blocks (two 3x3 convs
               each) -> transition conv -> pool -> second stage -> global
               average pool -> linear head; BatchNorm after every conv while
               pretraining, folded away afterwards

The layer table produced here is the single source of truth for layer
names, shapes, and coordinate indices used by the permutation and
hypernetwork modules.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from . import tensor as T
from .datasets import Dataset, epoch_batches, mean_std, normalize
from .optim import Adam
from .tensor import Tape, Tensor

ARCHS = ("mlp", "lenet", "miniresnet")


class ParamError(ValueError):
    """A required parameter is missing or has the wrong shape."""


@dataclass(frozen=True)
class NetConfig:
    """One point in configuration space: widths (and depths) of a network."""

    arch: str
    layer_widths: tuple  # hidden channel counts, one per compressible layer
    block_depths: Optional[tuple] = None  # (L1, L2), miniresnet only
    input_shape: tuple = (1, 28, 28)
    num_classes: int = 10

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ValueError(f"unknown arch {self.arch!r}")
        if any(w < 1 for w in self.layer_widths):
            raise ValueError("layer widths must be >= 1")
        if self.arch == "miniresnet":
            if self.block_depths is None or any(d < 1 for d in self.block_depths):
                raise ValueError("miniresnet requires block_depths >= 1 per stage")


def full_config(arch: str) -> NetConfig:
    if arch == "mlp":
        return NetConfig("mlp", (64,))
    if arch == "lenet":
        return NetConfig("lenet", (6, 16, 120))
    if arch == "miniresnet":
        return NetConfig("miniresnet", (16, 32), block_depths=(3, 3))
    raise ValueError(f"unknown arch {arch!r}")


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def compress_config(config: NetConfig, gamma: float) -> NetConfig:
    """Shrink hidden widths to (1-gamma) of full, round-half-up, floor 1.

    Input channels and the classifier width are never compressed.
    """
    if not 0.0 <= gamma < 1.0:
        raise ValueError(f"compression rate {gamma} outside [0, 1)")
    widths = tuple(max(1, round_half_up((1.0 - gamma) * w))
                   for w in config.layer_widths)
    return replace(config, layer_widths=widths)


def with_depths(config: NetConfig, l1: int, l2: int) -> NetConfig:
    if config.arch != "miniresnet":
        raise ValueError("block depths apply to miniresnet only")
    return replace(config, block_depths=(l1, l2))


@dataclass(frozen=True)
class LayerSpec:
    """One weighted layer: its tensor names are <name>.weight / <name>.bias."""

    name: str
    kind: str  # "conv" | "linear"
    l: int  # 0-based layer index
    c_in: int
    c_out: int
    k: int = 0  # kernel size, conv only
    pad: int = 0
    group: int = 1  # columns per input channel (fc after conv: spatial size)
    bn: bool = False  # carries BatchNorm while unfolded


def layer_table(config: NetConfig, folded: bool = True) -> list:
    """Ordered layer specs for the config; layer index l counts entries."""
    c, h, w = config.input_shape
    specs = []
    if config.arch == "mlp":
        w0, = config.layer_widths
        specs.append(LayerSpec("fc1", "linear", 0, c * h * w, w0))
        specs.append(LayerSpec("fc2", "linear", 1, w0, config.num_classes))
        return specs
    if config.arch == "lenet":
        w0, w1, w2 = config.layer_widths
        spatial = (h // 2 - 4) // 2 * ((w // 2 - 4) // 2)  # after two convs+pools
        specs.append(LayerSpec("conv1", "conv", 0, c, w0, k=5, pad=2))
        specs.append(LayerSpec("conv2", "conv", 1, w0, w1, k=5, pad=0))
        specs.append(LayerSpec("fc1", "linear", 2, w1 * spatial, w2, group=spatial))
        specs.append(LayerSpec("fc2", "linear", 3, w2, config.num_classes))
        return specs
    # miniresnet
    s0, s1 = config.layer_widths
    l1, l2 = config.block_depths
    bn = not folded
    idx = 0

    def conv(name, cin, cout):
        nonlocal idx
        specs.append(LayerSpec(name, "conv", idx, cin, cout, k=3, pad=1, bn=bn))
        idx += 1

    conv("stem", c, s0)
    for b in range(l1):
        conv(f"s1b{b}c1", s0, s0)
        conv(f"s1b{b}c2", s0, s0)
    conv("trans", s0, s1)
    for b in range(l2):
        conv(f"s2b{b}c1", s1, s1)
        conv(f"s2b{b}c2", s1, s1)
    specs.append(LayerSpec("head", "linear", idx, s1, config.num_classes))
    return specs


def bundle_shapes(config: NetConfig, folded: bool = True) -> dict:
    """name -> shape for every parameter the forward pass will fetch."""
    shapes = {}
    for s in layer_table(config, folded=folded):
        if s.kind == "conv":
            shapes[f"{s.name}.weight"] = (s.c_out, s.c_in, s.k, s.k)
        else:
            shapes[f"{s.name}.weight"] = (s.c_out, s.c_in)
        if s.bn:
            shapes[f"{s.name}.bn.gamma"] = (s.c_out,)
            shapes[f"{s.name}.bn.beta"] = (s.c_out,)
        else:
            shapes[f"{s.name}.bias"] = (s.c_out,)
    return shapes


def param_count(config: NetConfig) -> int:
    return sum(int(np.prod(shape)) for shape in bundle_shapes(config).values())


@dataclass
class WeightBundle:
    """Named parameter tensors for one config, plus BN running buffers."""

    config: NetConfig
    params: dict
    buffers: dict = None
    folded: bool = True

    def __post_init__(self):
        if self.buffers is None:
            self.buffers = {}

    def detached(self) -> "WeightBundle":
        return WeightBundle(self.config,
                            {k: v.detach() for k, v in self.params.items()},
                            {k: v.copy() for k, v in self.buffers.items()},
                            self.folded)


def validate_bundle(bundle: WeightBundle) -> None:
    expected = bundle_shapes(bundle.config, folded=bundle.folded)
    for name, shape in expected.items():
        t = bundle.params.get(name)
        if t is None:
            raise ParamError(f"missing parameter {name!r}")
        if tuple(t.shape) != tuple(shape):
            raise ParamError(f"parameter {name!r}: shape {tuple(t.shape)}, "
                             f"expected {tuple(shape)}")
    extra = set(bundle.params) - set(expected)
    if extra:
        raise ParamError(f"unexpected parameters: {sorted(extra)}")


def init_bundle(config: NetConfig, rng: np.random.Generator,
                folded: bool = True) -> WeightBundle:
    """Kaiming-uniform weights, uniform biases, identity BN."""
    params, buffers = {}, {}
    for s in layer_table(config, folded=folded):
        fan_in = s.c_in * (s.k * s.k if s.kind == "conv" else 1)
        bound = math.sqrt(6.0 / fan_in)
        shape = ((s.c_out, s.c_in, s.k, s.k) if s.kind == "conv"
                 else (s.c_out, s.c_in))
        params[f"{s.name}.weight"] = Tensor(
            rng.uniform(-bound, bound, size=shape), requires_grad=True)
        if s.bn:
            params[f"{s.name}.bn.gamma"] = Tensor(np.ones(s.c_out), requires_grad=True)
            params[f"{s.name}.bn.beta"] = Tensor(np.zeros(s.c_out), requires_grad=True)
            buffers[f"{s.name}.bn.mean"] = np.zeros(s.c_out, dtype=np.float32)
            buffers[f"{s.name}.bn.var"] = np.ones(s.c_out, dtype=np.float32)
        else:
            bb = 1.0 / math.sqrt(fan_in)
            params[f"{s.name}.bias"] = Tensor(
                rng.uniform(-bb, bb, size=s.c_out), requires_grad=True)
    return WeightBundle(config, params, buffers, folded=folded)


def _fetch(bundle: WeightBundle, name: str, shape: tuple) -> Tensor:
    t = bundle.params.get(name)
    if t is None:
        raise ParamError(f"missing parameter {name!r}")
    if tuple(t.shape) != tuple(shape):
        raise ParamError(f"parameter {name!r}: shape {tuple(t.shape)}, "
                         f"expected {tuple(shape)}")
    return t


def _apply_layer(bundle: WeightBundle, s: LayerSpec, h: Tensor,
                 training: bool) -> Tensor:
    if s.kind == "conv":
        w = _fetch(bundle, f"{s.name}.weight", (s.c_out, s.c_in, s.k, s.k))
        if s.bn:
            h = T.conv2d(h, w, None, stride=1, pad=s.pad)
            h = T.batchnorm2d(h,
                              _fetch(bundle, f"{s.name}.bn.gamma", (s.c_out,)),
                              _fetch(bundle, f"{s.name}.bn.beta", (s.c_out,)),
                              bundle.buffers[f"{s.name}.bn.mean"],
                              bundle.buffers[f"{s.name}.bn.var"],
                              training=training)
            return h
        b = _fetch(bundle, f"{s.name}.bias", (s.c_out,))
        return T.conv2d(h, w, b, stride=1, pad=s.pad)
    w = _fetch(bundle, f"{s.name}.weight", (s.c_out, s.c_in))
    b = _fetch(bundle, f"{s.name}.bias", (s.c_out,))
    return T.linear(h, w, b)


def forward(bundle: WeightBundle, x: Tensor, training: bool = False,
            return_features: bool = False):
    """Logits for a batch; differentiable w.r.t. every fetched weight.

    With return_features, also yields the input of the final linear layer
    (the per-sample feature vector the classifier consumes).
    """
    cfg = bundle.config
    table = {s.name: s for s in layer_table(cfg, folded=bundle.folded)}
    if cfg.arch == "mlp":
        h = T.flatten(x)
        h = T.relu(_apply_layer(bundle, table["fc1"], h, training))
        head = "fc2"
    elif cfg.arch == "lenet":
        h = T.maxpool2d(T.relu(_apply_layer(bundle, table["conv1"], x, training)), 2)
        h = T.maxpool2d(T.relu(_apply_layer(bundle, table["conv2"], h, training)), 2)
        h = T.flatten(h)
        h = T.relu(_apply_layer(bundle, table["fc1"], h, training))
        head = "fc2"
    else:  # miniresnet
        l1, l2 = cfg.block_depths
        h = T.maxpool2d(T.relu(_apply_layer(bundle, table["stem"], x, training)), 2)
        for b in range(l1):
            res = T.relu(_apply_layer(bundle, table[f"s1b{b}c1"], h, training))
            res = _apply_layer(bundle, table[f"s1b{b}c2"], res, training)
            h = T.relu(T.add(res, h))
        h = T.maxpool2d(T.relu(_apply_layer(bundle, table["trans"], h, training)), 2)
        for b in range(l2):
            res = T.relu(_apply_layer(bundle, table[f"s2b{b}c1"], h, training))
            res = _apply_layer(bundle, table[f"s2b{b}c2"], res, training)
            h = T.relu(T.add(res, h))
        h = T.global_avgpool2d(h)
        head = "head"
    out = _apply_layer(bundle, table[head], h, training)
    return (out, h) if return_features else out


def fold_batchnorm(bundle: WeightBundle) -> WeightBundle:
    """Absorb BN into the preceding conv: w' = w*g/sqrt(v+eps), b' likewise.

    Bundles without BN pass through unchanged (already folded). A BN whose
    base layer has no conv weight is a structural error.
    """
    bn_bases = {name.rsplit(".bn.", 1)[0]
                for name in bundle.params if ".bn." in name}
    if not bn_bases:
        return WeightBundle(bundle.config,
                            {k: v.detach() for k, v in bundle.params.items()},
                            {}, folded=True)
    eps = 1e-5
    params = {}
    for base in sorted(bn_bases):
        wname = f"{base}.weight"
        if wname not in bundle.params:
            raise ParamError(f"BatchNorm at {base!r} has no adjacent conv to fold into")
        gamma = bundle.params[f"{base}.bn.gamma"].data
        beta = bundle.params[f"{base}.bn.beta"].data
        mu = bundle.buffers[f"{base}.bn.mean"]
        var = bundle.buffers[f"{base}.bn.var"]
        scale = gamma / np.sqrt(var + eps)
        w = bundle.params[wname].data
        params[wname] = Tensor(w * scale[:, None, None, None])
        params[f"{base}.bias"] = Tensor(beta - mu * scale)
    for name, t in bundle.params.items():
        if ".bn." in name or name in params:
            continue
        params[name] = t.detach()
    folded = WeightBundle(bundle.config, params, {}, folded=True)
    validate_bundle(folded)
    return folded


# ---------------------------------------------------------------------------
# INR-facing block enumeration


@dataclass(frozen=True)
class ParamBlockSpec:
    """One hypernetwork-fitted tensor: a weight matrix/kernel or a bias."""

    name: str
    kind: str  # "conv_weight" | "linear_weight" | "bias"
    l: int
    c_in: int  # full-config sizes
    c_out: int
    k: int = 0
    group: int = 1


def enumerate_param_blocks(config: NetConfig) -> list:
    """Stable order: layers in forward order, weight before bias.

    For lenet the final classifier bias is excluded (kept verbatim from the
    pretrained weights), giving exactly 7 fitted tensors. All other archs
    fit every parameter.
    """
    blocks = []
    table = layer_table(config, folded=True)
    last = table[-1].name
    for s in table:
        wkind = "conv_weight" if s.kind == "conv" else "linear_weight"
        blocks.append(ParamBlockSpec(f"{s.name}.weight", wkind, s.l,
                                     s.c_in, s.c_out, k=s.k, group=s.group))
        if config.arch == "lenet" and s.name == last:
            continue
        blocks.append(ParamBlockSpec(f"{s.name}.bias", "bias", s.l,
                                     0, s.c_out))
    return blocks


# ---------------------------------------------------------------------------
# training and evaluation of main networks


def batched_logits(bundle: WeightBundle, x: np.ndarray,
                   batch_size: int = 256) -> np.ndarray:
    """Inference-mode logits over x [N,...] without recording gradients."""
    outs = []
    for start in range(0, len(x), batch_size):
        logits = forward(bundle, Tensor(x[start:start + batch_size]), training=False)
        outs.append(logits.data)
    return np.concatenate(outs, axis=0)


def accuracy_on(bundle: WeightBundle, x: np.ndarray, labels: np.ndarray,
                batch_size: int = 256) -> float:
    logits = batched_logits(bundle, x, batch_size)
    return float((logits.argmax(axis=1) == labels).mean())


def pretrain(config: NetConfig, ds: Dataset, epochs: int, seed: int,
             batch_size: int = 128, lr: float = 1e-3):
    """Train a full-size network from scratch; returns (bundle, report).

    The report carries the normalization constants and final test accuracy
    that downstream stages read back from checkpoint metadata. miniresnet
    trains with BatchNorm (unfolded); the other archs are born folded.
    """
    rng = np.random.default_rng(seed)
    folded = config.arch != "miniresnet"
    bundle = init_bundle(config, rng, folded=folded)
    mean, std = mean_std(ds.train_images)
    xtr = normalize(ds.train_images, mean, std)
    xte = normalize(ds.test_images, mean, std)
    ytr, yte = ds.train_labels, ds.test_labels

    steps_per_epoch = math.ceil(len(xtr) / batch_size)
    opt = Adam(bundle.params, lr=lr, total_steps=epochs * steps_per_epoch)
    losses = []
    for _ in range(epochs):
        for idx in epoch_batches(len(xtr), batch_size, rng):
            with Tape() as tape:
                logits = forward(bundle, Tensor(xtr[idx]), training=True)
                loss = T.softmax_cross_entropy(logits, ytr[idx])
            tape.backward(loss)
            opt.step()
            losses.append(loss.item())
    acc = accuracy_on(bundle, xte, yte)
    report = {"acc": acc, "norm_mean": mean, "norm_std": std,
              "epochs": epochs, "seed": seed, "losses": losses}
    return bundle, report

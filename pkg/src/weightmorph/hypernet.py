"""Hypernetwork: residual coordinate MLPs that emit main-network weights.

One MLP per fitted tensor by default; miniresnet instead shares one MLP per
repeating stage role ("s1.c1.weight", ...) so block depths beyond the
trained range still have a generator.  Raw MLP outputs are multiplied by a
per-group gain (fitted to the anchor magnitudes at training time) and
divided by the (possibly perturbed) input channel count of the queried
layer, conv kernels are predicted at the arch's maximum kernel size K and
centrally cropped, fc layers fed by a conv emit one K x K spatial window
per input channel (their columns are channel-major flattened feature
maps), and plain linear/bias entries average their output vector.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, replace

import numpy as np

from .checkpoint import (CorruptCheckpointError, load_checkpoint,
                         save_checkpoint)
from .coords import (embed, embed_batch, embed_dim, normalize,
                     normalize_batch, normalizer, perturb_batch)
from .models import (NetConfig, ParamBlockSpec, ParamError, WeightBundle,
                     bundle_shapes, enumerate_param_blocks, layer_table,
                     validate_bundle)
from .tensor import (ShapeError, Tensor, add, crop_center2d, linear,
                     mean_lastdim, relu, reshape, scale)

_STAGE_BLOCK = re.compile(r"^(s\d+)b\d+(c\d+)\.(weight|bias)$")


def group_for(mode: str, block_name: str) -> str:
    """Which MLP serves a block; stage blocks collapse to roles when shared."""
    if mode == "shared":
        m = _STAGE_BLOCK.match(block_name)
        if m:
            return f"{m.group(1)}.{m.group(2)}.{m.group(3)}"
    return block_name


@dataclass
class HyperINR:
    arch: str
    mode: str  # "per_param" | "shared"
    num_freq: int
    num_layers: int
    num_hidden: int
    K: int  # largest kernel size of the arch; conv MLPs emit K*K values
    N: float  # coordinate normalizer of the full config
    group_kinds: dict  # group name -> "conv" | "scalar"
    params: dict  # "inr.<group>.layer<i>.{w,b}" -> Tensor
    frozen: dict = field(default_factory=dict)  # kept verbatim, not fitted
    out_scales: dict = field(default_factory=dict)  # group -> output gain
    ranges: dict = field(default_factory=dict)  # block -> build (L, C_in, C_out)

    def out_dim(self, group: str) -> int:
        return self.K * self.K if self.group_kinds[group] == "conv" else 1


def _freq_damp(num_freq: int) -> np.ndarray:
    """Layer-0 column gains: raw components and low frequencies pass at 1,
    each octave past 2^3 is halved.  Index jitter scrambles the phase of
    high-frequency features on short coordinate axes, so they start silent
    and are recruited only if training finds them useful."""
    d = np.ones(embed_dim(num_freq))
    for j in range(num_freq):
        d[6 + 12 * j: 6 + 12 * (j + 1)] = 2.0 ** -max(0, j - 3)
    return d


def build_inr(config: NetConfig, rng, num_freq: int = 16,
              num_layers: int = 5, num_hidden: int = 256,
              mode: str = "auto", frozen=None) -> HyperINR:
    """Fresh MLPs for every fitted block of the (full) config.

    The final layer of each MLP is down-scaled so initial predictions sit
    near zero; pass `frozen` for tensors the generator must copy verbatim
    (the lenet classifier bias).
    """
    if num_layers < 2:
        raise ValueError("num_layers must be >= 2")
    if mode == "auto":
        mode = "shared" if config.arch == "miniresnet" else "per_param"
    if mode not in ("per_param", "shared"):
        raise ValueError(f"unknown INR mode {mode!r}")
    blocks = enumerate_param_blocks(config)
    kmax = max([b.k for b in blocks if b.kind == "conv_weight"], default=1)
    depth = float(max(b.l for b in blocks) + 1)
    group_kinds: dict = {}
    ranges: dict = {}
    for b in blocks:
        if b.group > 1 and b.group != kmax * kmax:
            raise ValueError(f"grouped block {b.name!r}: group {b.group} "
                             f"must equal K^2 = {kmax * kmax}")
        g = group_for(mode, b.name)
        # grouped fc rows emit one spatial window per channel, like convs
        kind = "conv" if b.kind == "conv_weight" or b.group > 1 else "scalar"
        group_kinds.setdefault(g, kind)
        c_eff = b.c_in // b.group if b.group > 1 else b.c_in
        ranges[b.name] = (depth, float(max(c_eff, 1)), float(b.c_out))
    inr = HyperINR(config.arch, mode, num_freq, num_layers, num_hidden,
                   kmax, normalizer(config), group_kinds, {},
                   dict(frozen or {}), ranges=ranges)
    e_dim = embed_dim(num_freq)
    for g, kind in group_kinds.items():
        d = inr.out_dim(g)
        dims = [e_dim] + [num_hidden] * (num_layers - 1) + [d]
        for i in range(num_layers):
            fan_in = dims[i]
            bound = math.sqrt(6.0 / fan_in)
            w = rng.uniform(-bound, bound, size=(dims[i + 1], fan_in))
            b = rng.uniform(-1 / math.sqrt(fan_in), 1 / math.sqrt(fan_in),
                            size=dims[i + 1])
            if i == 0:
                w = w * _freq_damp(num_freq)[None, :]
            if i == num_layers - 1:
                w = w * 0.01
                b = np.zeros_like(b)
            inr.params[f"inr.{g}.layer{i}.w"] = Tensor(w, requires_grad=True)
            inr.params[f"inr.{g}.layer{i}.b"] = Tensor(b, requires_grad=True)
    return inr


def fit_out_scales(inr: HyperINR, config: NetConfig, anchors: dict) -> dict:
    """Per-group output gain: RMS of (anchor * effective fan-in), pooled
    over the group's tensors, floored at 1e-3.  With these gains in place
    every MLP regresses onto values of comparable magnitude."""
    table = {s.name: s for s in layer_table(config, folded=True)}
    sq: dict = {}
    count: dict = {}
    for block in enumerate_param_blocks(config):
        if block.name not in anchors:
            continue
        layer = table[block.name.rsplit(".", 1)[0]]
        c_in = layer.c_in // layer.group if layer.group > 1 else layer.c_in
        raw = np.asarray(anchors[block.name], dtype=np.float64) * float(c_in)
        g = group_for(inr.mode, block.name)
        sq[g] = sq.get(g, 0.0) + float(np.sum(raw ** 2))
        count[g] = count.get(g, 0) + raw.size
    return {g: max(math.sqrt(sq[g] / count[g]), 1e-3) for g in sq}


def _mlp_forward(inr: HyperINR, group: str, e: Tensor) -> Tensor:
    p = inr.params
    h = relu(linear(e, p[f"inr.{group}.layer0.w"], p[f"inr.{group}.layer0.b"]))
    for i in range(1, inr.num_layers - 1):
        pre = linear(h, p[f"inr.{group}.layer{i}.w"], p[f"inr.{group}.layer{i}.b"])
        h = add(relu(pre), h)  # skip connection
    last = inr.num_layers - 1
    return linear(h, p[f"inr.{group}.layer{last}.w"],
                  p[f"inr.{group}.layer{last}.b"])


def predict_raw(inr: HyperINR, block_name: str, embedded: Tensor,
                c_in_prime: float) -> Tensor:
    """gain * MLP(embedded) / C_in' for every row; [M, d] output.

    The per-group gain (default 1) lets every MLP fit O(1) values even
    though the materialized magnitudes span orders of magnitude across
    layers once the fan-in division is applied.
    """
    group = group_for(inr.mode, block_name)
    if group not in inr.group_kinds:
        raise ValueError(f"unknown block {block_name!r}")
    if c_in_prime <= 0:
        raise ValueError("c_in_prime must be positive")
    gain = float(inr.out_scales.get(group, 1.0))
    return scale(_mlp_forward(inr, group, embedded), gain / float(c_in_prime))


def _ranges_for(inr: HyperINR, block_name: str):
    """Build-config index denominators; shared roles answer for stage
    blocks the build config did not contain.  Hand-built generators with
    no stored ranges fall back to sampled-config denominators (None)."""
    if not inr.ranges:
        return None
    r = inr.ranges.get(block_name)
    if r is not None:
        return r
    g = group_for(inr.mode, block_name)
    for name, r in inr.ranges.items():
        if group_for(inr.mode, name) == g:
            return r
    raise ParamError(f"unknown block {block_name!r}: no coordinate ranges")


def _materialize_block(inr: HyperINR, block: ParamBlockSpec,
                       raw: Tensor) -> Tensor:
    if block.kind == "conv_weight":
        grid = reshape(raw, (block.c_out, block.c_in, inr.K, inr.K))
        return grid if block.k == inr.K else crop_center2d(grid, block.k)
    if block.group > 1:  # channel-major spatial columns, rows o-major
        return reshape(raw, (block.c_out, block.c_in))
    flat = mean_lastdim(raw)
    if block.kind == "linear_weight":
        return reshape(flat, (block.c_out, block.c_in))
    return flat  # bias


def materialize_weight(inr: HyperINR, block: ParamBlockSpec, coord,
                       k_target: int = 0):
    """Single-coordinate prediction: k x k kernel slice or scalar mean."""
    e = embed(normalize(coord, _ranges_for(inr, block.name)), inr.num_freq)
    raw = predict_raw(inr, block.name, Tensor(e[None, :]), coord.C_in)
    if block.kind == "conv_weight" or block.group > 1:
        k = k_target or block.k or inr.K
        grid = reshape(raw, (1, inr.K, inr.K))
        window = grid if k == inr.K else crop_center2d(grid, k)
        return window.data[0].copy()
    return float(mean_lastdim(raw).data[0])


def generate_blocks(inr: HyperINR, config: NetConfig, names, rng,
                    a_index: float = 0.5, a_config: float = 0.0) -> dict:
    """Predict the named fitted tensors of `config` in one batched pass each.

    One fresh index perturbation draw per coordinate row; the tensors stay
    attached to an active tape so the caller can differentiate w.r.t. theta.
    `names=None` selects every fitted block.
    """
    table = {s.name: s for s in layer_table(config, folded=True)}
    depth = len(table)
    params: dict = {}
    for block in enumerate_param_blocks(config):
        if names is not None and block.name not in names:
            continue
        layer = table[block.name.rsplit(".", 1)[0]]
        c_in = layer.c_in // layer.group if layer.group > 1 else layer.c_in
        triple = np.array([depth, c_in, layer.c_out], dtype=np.float64)
        idx = _block_index_grid(block)
        cfg_p, idx_p = perturb_batch(triple, idx, rng, a_index, a_config)
        ranges = _ranges_for(inr, block.name)
        if ranges is not None:
            ranges = np.asarray(ranges, dtype=np.float64)
        v = normalize_batch(cfg_p, idx_p, inr.N, ranges)
        e = embed_batch(v, inr.num_freq)
        raw = predict_raw(inr, block.name, Tensor(e), float(cfg_p[1]))
        params[block.name] = _materialize_block(inr, block, raw)
    return params


def generate_bundle(inr: HyperINR, config: NetConfig, rng,
                    a_index: float = 0.5, a_config: float = 0.0) -> WeightBundle:
    """A full WeightBundle: every fitted tensor plus frozen fill-ins."""
    params = generate_blocks(inr, config, None, rng, a_index, a_config)
    for name, shape in bundle_shapes(config).items():
        if name in params:
            continue
        if name not in inr.frozen:
            raise ParamError(f"missing frozen parameter {name!r}")
        arr = np.asarray(inr.frozen[name], dtype=np.float32)
        if arr.shape != shape:
            raise ParamError(f"frozen parameter {name!r} has shape "
                             f"{arr.shape}, expected {shape}")
        params[name] = Tensor(arr.copy())
    bundle = WeightBundle(config, params, {}, folded=True)
    validate_bundle(bundle)
    return bundle


def _block_index_grid(block: ParamBlockSpec) -> np.ndarray:
    """[M, 3] raw (l, c_in, c_out) rows; layer 0-based, channels 1-based.

    Weight rows run c_out-major to match the (c_out, c_in, ...) reshape;
    grouped fc columns index by channel, not raw column; bias rows sit at
    c_in = 0.
    """
    if block.kind == "bias":
        o = np.arange(1, block.c_out + 1, dtype=np.float64)
        return np.stack([np.full_like(o, block.l), np.zeros_like(o), o],
                        axis=1)
    c_in = block.c_in // block.group if block.group > 1 else block.c_in
    o, i = np.mgrid[1:block.c_out + 1, 1:c_in + 1]
    cols = np.stack([np.full(o.size, block.l, dtype=np.float64),
                     i.ravel().astype(np.float64),
                     o.ravel().astype(np.float64)], axis=1)
    return cols


def sample_bundle(inr: HyperINR, config: NetConfig, k_samples: int = 50,
                  seed: int = 0, a_index: float = 0.5,
                  a_config: float = 0.0) -> WeightBundle:
    """Mean over k_samples perturbed generations; detached from any tape."""
    if k_samples < 1:
        raise ValueError("k_samples must be >= 1")
    rng = np.random.default_rng(seed)
    acc: dict = {}
    for _ in range(k_samples):
        b = generate_bundle(inr, config, rng, a_index, a_config)
        for name, t in b.params.items():
            if name in acc:
                acc[name] += t.data
            else:
                acc[name] = t.data.astype(np.float64)
    params = {name: Tensor((s / k_samples).astype(np.float32))
              for name, s in acc.items()}
    return WeightBundle(config, params, {}, folded=True)


# ---------------------------------------------------------------------------
# exponential moving average of theta


class EmaShadow:
    """Shadow copy of theta: shadow <- decay*shadow + (1-decay)*theta."""

    def __init__(self, decay: float, shadow: dict):
        if not 0.0 <= decay <= 1.0:
            raise ValueError("decay must be in [0, 1]")
        self.decay = decay
        self.shadow = shadow

    @classmethod
    def from_inr(cls, inr: HyperINR, decay: float = 0.995) -> "EmaShadow":
        return cls(decay, {k: t.data.copy() for k, t in inr.params.items()})

    def update(self, params: dict) -> None:
        if set(params) != set(self.shadow):
            raise ShapeError("EMA shadow and theta name sets differ")
        g = self.decay
        for name, t in params.items():
            s = self.shadow[name]
            if s.shape != t.data.shape:
                raise ShapeError(f"EMA shape mismatch at {name!r}")
            s[...] = g * s + (1.0 - g) * t.data


def ema_swap_in(inr: HyperINR, shadow: EmaShadow) -> HyperINR:
    """The INR with shadow values; what evaluation and checkpoints use."""
    params = {k: Tensor(v.copy(), requires_grad=True)
              for k, v in shadow.shadow.items()}
    return replace(inr, params=params)


# ---------------------------------------------------------------------------
# persistence


def save_inr(inr: HyperINR, path: str, extra_metadata=None) -> None:
    meta = {
        "kind": "inr",
        "arch": inr.arch,
        "mode": inr.mode,
        "num_freq": str(inr.num_freq),
        "layers": str(inr.num_layers),
        "hidden": str(inr.num_hidden),
        "K": str(inr.K),
        "N": repr(inr.N),
        "conv_groups": ",".join(g for g, k in inr.group_kinds.items()
                                if k == "conv"),
        "out_scales": ",".join(f"{g}={s!r}" for g, s in
                               sorted(inr.out_scales.items())),
        "ranges": ",".join(f"{b}={int(l)}:{int(ci)}:{int(co)}"
                           for b, (l, ci, co) in sorted(inr.ranges.items())),
    }
    meta.update({k: str(v) for k, v in (extra_metadata or {}).items()})
    tensors = {name: t.data for name, t in inr.params.items()}
    for name, arr in inr.frozen.items():
        tensors[f"frozen.{name}"] = np.asarray(arr, dtype=np.float32)
    save_checkpoint(path, tensors, meta)


def load_inr(path: str) -> HyperINR:
    ck = load_checkpoint(path)
    if ck.kind != "inr":
        raise CorruptCheckpointError(f"expected an INR checkpoint, got kind "
                                     f"{ck.kind!r}")
    try:
        meta = ck.metadata
        num_freq = int(meta["num_freq"])
        num_layers = int(meta["layers"])
        num_hidden = int(meta["hidden"])
        kmax = int(meta["K"])
        n = float(meta["N"])
        arch, mode = meta["arch"], meta["mode"]
    except (KeyError, ValueError) as exc:
        raise CorruptCheckpointError(f"bad INR metadata: {exc}") from exc
    conv_groups = set(filter(None, meta.get("conv_groups", "").split(",")))
    out_scales: dict = {}
    for pair in filter(None, meta.get("out_scales", "").split(",")):
        g, _, val = pair.partition("=")
        try:
            out_scales[g] = float(val)
        except ValueError as exc:
            raise CorruptCheckpointError(f"bad out_scales entry {pair!r}") from exc
    ranges: dict = {}
    for pair in filter(None, meta.get("ranges", "").split(",")):
        b, _, val = pair.partition("=")
        try:
            l, ci, co = val.split(":")
            ranges[b] = (float(l), float(ci), float(co))
        except ValueError as exc:
            raise CorruptCheckpointError(f"bad ranges entry {pair!r}") from exc
    params: dict = {}
    frozen: dict = {}
    groups: dict = {}
    for name, arr in ck.tensors.items():
        if name.startswith("frozen."):
            frozen[name[len("frozen."):]] = arr
            continue
        if not name.startswith("inr."):
            raise CorruptCheckpointError(f"unexpected tensor {name!r}")
        head, layer_part, wb = name.rsplit(".", 2)
        group = head[len("inr."):]
        if not layer_part.startswith("layer") or wb not in ("w", "b"):
            raise CorruptCheckpointError(f"unexpected tensor {name!r}")
        groups[group] = "conv" if group in conv_groups else "scalar"
        params[name] = Tensor(arr, requires_grad=True)
    inr = HyperINR(arch, mode, num_freq, num_layers, num_hidden, kmax, n,
                   groups, params, frozen, out_scales, ranges)
    for g in groups:
        for i in range(num_layers):
            for wb in ("w", "b"):
                if f"inr.{g}.layer{i}.{wb}" not in params:
                    raise CorruptCheckpointError(
                        f"INR group {g!r} missing layer {i} tensors")
    return inr

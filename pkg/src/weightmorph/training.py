"""INR training loop: sample a config, regenerate a block subset, descend.

Each step draws a compression rate (and optionally stage depths), regenerates
ceil(rho*B) randomly chosen fitted blocks at the sampled config (regressed
onto leading slices of the anchors, plus the task loss) and at the full
config (regressed onto the anchors themselves), fills the remaining blocks
from a detached full-config cache sliced to the sampled sizes, and takes one
Adam step on

    total = task_weight * L_task + lambda1 * L_recon + lambda2 * L_reg

with a cosine learning-rate schedule and an EMA shadow of theta.  The full
config is force-included every tenth step so the anchor configuration is
exercised end to end.

The cache starts at the anchors and a block's entry begins tracking the
generated values only once they first land within CACHE_SWITCH_ERR of its
anchor.  Fresh MLPs emit near-zero weights, so unconditional cache updates
would tear every assembled network down to noise in the first few steps
and starve the task term of signal for the rest of the run.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .datasets import Dataset, epoch_batches, mean_std, normalize
from .hypernet import (EmaShadow, HyperINR, build_inr, ema_swap_in,
                       fit_out_scales, generate_blocks)
from .models import (NetConfig, WeightBundle, bundle_shapes, compress_config,
                     enumerate_param_blocks, forward, validate_bundle,
                     with_depths)
from .optim import AdamState, adam_step, cosine_lr
from .tensor import (NonFiniteError, ShapeError, Tape, Tensor, add, mean_all,
                     mul, scale, softmax_cross_entropy, sub, sum_all)

CURVE_COLUMNS = ("step", "lr", "L_task", "L_recon", "L_reg", "total", "gamma")


@dataclass(frozen=True)
class TrainPlan:
    """Every knob of one training run; all of it lands in the checkpoint."""

    epochs: int = 30
    batch_size: int = 128
    lr: float = 1e-3
    gamma_max: float = 0.5
    lambda1: float = 1.0
    lambda2: float = 1e-4
    ema: float = 0.995
    rho: float = 0.25
    seed: int = 0
    num_freq: int = 16
    num_layers: int = 5
    num_hidden: int = 256
    perturb_a: float = 0.5
    perturb_config: float = 0.0
    task_weight: float = 1.0
    depth_pool: tuple = ()  # e.g. (1, 2, 3) samples both stage depths from it
    mode: str = "auto"

    def __post_init__(self):
        if not 0.0 <= self.gamma_max < 1.0:
            raise ValueError("gamma_max must be in [0, 1)")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("lambda weights must be nonnegative")
        if not 0.0 < self.rho <= 1.0:
            raise ValueError("rho must be in (0, 1]")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")

    def metadata(self) -> dict:
        pool = ",".join(str(d) for d in self.depth_pool)
        return {
            "epochs": self.epochs, "batch_size": self.batch_size,
            "lr": repr(self.lr), "gamma_max": repr(self.gamma_max),
            "lambda1": repr(self.lambda1), "lambda2": repr(self.lambda2),
            "ema": repr(self.ema), "rho": repr(self.rho), "seed": self.seed,
            "perturb_a": repr(self.perturb_a),
            "perturb_config": repr(self.perturb_config),
            "task_weight": repr(self.task_weight), "depth_pool": pool,
        }


CACHE_SWITCH_ERR = 0.5  # generation replaces the anchor past this accuracy


@dataclass
class TrainState:
    inr: HyperINR
    ema: EmaShadow
    adam: AdamState
    smooth: dict  # name -> np.ndarray, the full-config anchor tensors
    full_cfg: NetConfig
    total_steps: int
    step: int = 0
    cache: dict = field(default_factory=dict)  # detached full-config tensors
    switched: set = field(default_factory=set)  # blocks past the cache gate
    history: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# loss terms


def loss_recon(generated: dict, targets: dict) -> Tensor:
    """Sum over tensors of ||generated - target||^2 / ||target||^2.

    Relative per tensor, so small-magnitude layers pull as hard as large
    ones; a zero-norm target degenerates to the plain squared error.
    """
    total = None
    for name, g in generated.items():
        t = np.asarray(targets[name], dtype=np.float32)
        if g.shape != t.shape:
            raise ShapeError(f"loss_recon: {name} shapes {g.shape} vs {t.shape}")
        denom = float(np.sum(t.astype(np.float64) ** 2)) or 1.0
        diff = sub(g, Tensor(t))
        term = scale(sum_all(mul(diff, diff)), 1.0 / denom)
        total = term if total is None else add(total, term)
    return total if total is not None else Tensor(0.0)


def loss_reg(tensors) -> Tensor:
    """Sum of squares over the given tensors."""
    total = None
    for t in tensors:
        term = sum_all(mul(t, t))
        total = term if total is None else add(total, term)
    return total if total is not None else Tensor(0.0)


# ---------------------------------------------------------------------------
# state assembly


def slice_to_config(arr: np.ndarray, shape: tuple) -> np.ndarray:
    """Leading-index slice of a full-config tensor down to a sampled shape."""
    if len(arr.shape) != len(shape):
        raise ShapeError(f"cannot slice {arr.shape} to {shape}")
    if any(a < b for a, b in zip(arr.shape, shape)):
        raise ShapeError(f"cannot slice {arr.shape} up to {shape}")
    out = arr[tuple(slice(0, s) for s in shape)]
    return np.ascontiguousarray(out)


def init_state(plan: TrainPlan, smooth: WeightBundle, total_steps: int,
               rng) -> TrainState:
    """Fresh INR + optimizer, anchor tensors, and a W_smooth-seeded cache."""
    if not smooth.folded:
        raise ValueError("trainer expects a folded (BN-free) bundle")
    full_cfg = smooth.config
    fitted = {b.name for b in enumerate_param_blocks(full_cfg)}
    frozen = {name: t.data.copy() for name, t in smooth.params.items()
              if name not in fitted}
    inr = build_inr(full_cfg, rng, num_freq=plan.num_freq,
                    num_layers=plan.num_layers, num_hidden=plan.num_hidden,
                    mode=plan.mode, frozen=frozen)
    anchors = {name: smooth.params[name].data.copy() for name in fitted}
    inr.out_scales.update(fit_out_scales(inr, full_cfg, anchors))
    cache = {name: arr.copy() for name, arr in anchors.items()}
    return TrainState(inr, EmaShadow.from_inr(inr, plan.ema), AdamState(),
                      anchors, full_cfg, total_steps, cache=cache)


def _sample_config(state: TrainState, plan: TrainPlan, rng) -> tuple:
    if state.step % 10 == 0:  # anchor config exercised end to end
        return state.full_cfg, 0.0
    gamma = float(rng.uniform(0.0, plan.gamma_max)) if plan.gamma_max > 0 else 0.0
    cfg = compress_config(state.full_cfg, gamma)
    if plan.depth_pool:
        pool = list(plan.depth_pool)
        d1 = int(rng.choice(pool))
        d2 = int(rng.choice(pool))
        cfg = with_depths(cfg, d1, d2)
    return cfg, gamma


def _assemble_bundle(state: TrainState, config: NetConfig,
                     regenerated: dict) -> WeightBundle:
    params = dict(regenerated)
    shapes = bundle_shapes(config)
    fitted = {b.name for b in enumerate_param_blocks(config)}
    for name, shape in shapes.items():
        if name in params:
            continue
        if name in fitted:
            params[name] = Tensor(slice_to_config(state.cache[name], shape))
        else:
            params[name] = Tensor(state.inr.frozen[name].copy())
    bundle = WeightBundle(config, params, {}, folded=True)
    validate_bundle(bundle)
    return bundle


def train_step(state: TrainState, batch, plan: TrainPlan, rng) -> dict:
    """One full pass: sample, regenerate, descend, EMA, cache refresh."""
    x, labels = batch
    cfg, gamma = _sample_config(state, plan, rng)
    blocks = [b.name for b in enumerate_param_blocks(state.full_cfg)]
    n_regen = math.ceil(plan.rho * len(blocks))
    chosen = [blocks[i] for i in rng.choice(len(blocks), size=n_regen,
                                            replace=False)]
    at_full = cfg == state.full_cfg
    sampled_names = {b.name for b in enumerate_param_blocks(cfg)}
    try:
        with Tape() as tape:
            full_gen = generate_blocks(state.inr, state.full_cfg, set(chosen),
                                       rng, plan.perturb_a, plan.perturb_config)
            if at_full:
                sampled_gen = full_gen
            else:
                wanted = set(chosen) & sampled_names
                sampled_gen = generate_blocks(state.inr, cfg, wanted, rng,
                                              plan.perturb_a, plan.perturb_config)
            l_rec = loss_recon(full_gen, state.smooth)
            if not at_full and sampled_gen:
                sliced = {name: slice_to_config(state.smooth[name], g.shape)
                          for name, g in sampled_gen.items()}
                l_rec = add(l_rec, loss_recon(sampled_gen, sliced))
            reg_pool = list(full_gen.values())
            if not at_full:
                reg_pool += list(sampled_gen.values())
            l_reg = loss_reg(reg_pool)
            total = add(scale(l_rec, plan.lambda1), scale(l_reg, plan.lambda2))
            if plan.task_weight != 0.0:
                bundle = _assemble_bundle(state, cfg, sampled_gen)
                logits = forward(bundle, Tensor(x))
                l_task = softmax_cross_entropy(logits, labels)
                total = add(scale(l_task, plan.task_weight), total)
                task_val = float(l_task.data)
            else:
                task_val = 0.0
            tape.backward(total)
        grads = {n: p.grad for n, p in state.inr.params.items()
                 if p.grad is not None}
        lr = cosine_lr(state.step, state.total_steps, plan.lr)
        adam_step(state.inr.params, grads, state.adam, lr)
    except NonFiniteError as exc:
        raise NonFiniteError(f"step {state.step} (gamma={gamma:.3f}): {exc}") from exc
    for p in state.inr.params.values():
        p.grad = None
    state.ema.update(state.inr.params)
    for name, t in full_gen.items():
        if name not in state.switched:
            anchor = state.smooth[name].astype(np.float64)
            err = np.linalg.norm(t.data.astype(np.float64) - anchor)
            if err >= CACHE_SWITCH_ERR * (np.linalg.norm(anchor) + 1e-12):
                continue  # cache keeps the anchor until the INR catches up
            state.switched.add(name)
        state.cache[name] = t.data.copy()
    row = {"step": state.step, "lr": lr, "L_task": task_val,
           "L_recon": float(l_rec.data), "L_reg": float(l_reg.data),
           "total": float(total.data), "gamma": gamma,
           "depths": cfg.block_depths}
    state.history.append(row)
    state.step += 1
    return row


# ---------------------------------------------------------------------------
# full run


def reconstruction_errors(inr: HyperINR, smooth_params: dict,
                          full_cfg: NetConfig) -> dict:
    """Relative L2 of an unperturbed full-config generation per tensor."""
    gen = generate_blocks(inr, full_cfg, None, np.random.default_rng(0),
                          a_index=0.0, a_config=0.0)
    errors = {}
    for name, t in gen.items():
        target = smooth_params[name].astype(np.float64)
        diff = t.data.astype(np.float64) - target
        errors[name] = float(np.linalg.norm(diff)
                             / (np.linalg.norm(target) + 1e-12))
    return errors


def train(plan: TrainPlan, smooth: WeightBundle, ds: Dataset,
          norm: tuple = None):
    """Run the full schedule; returns (EMA HyperINR, report dict).

    `norm` carries the (mean, std) pixel statistics of the pretraining run;
    when omitted they are recomputed from the training split.
    """
    if norm is None:
        norm = mean_std(ds.train_images)
    x_all = normalize(ds.train_images, norm[0], norm[1])
    rng = np.random.default_rng(plan.seed)
    steps_per_epoch = math.ceil(len(x_all) / plan.batch_size)
    total_steps = plan.epochs * steps_per_epoch
    state = init_state(plan, smooth, total_steps, rng)
    for _ in range(plan.epochs):
        for idx in epoch_batches(len(x_all), plan.batch_size, rng):
            batch = (x_all[idx], ds.train_labels[idx])
            train_step(state, batch, plan, rng)
    final = ema_swap_in(state.inr, state.ema)
    report = {
        "history": state.history,
        "recon_errors": reconstruction_errors(final, state.smooth,
                                              state.full_cfg),
        "total_steps": total_steps,
        "norm_mean": norm[0],
        "norm_std": norm[1],
    }
    return final, report


def write_curve(history, path: str) -> None:
    """Learning-curve CSV: one row per step, '.' decimals, LF line ends."""
    with open(path, "w", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CURVE_COLUMNS)
        for row in history:
            writer.writerow([row["step"], f"{row['lr']:.8g}",
                             f"{row['L_task']:.8g}", f"{row['L_recon']:.8g}",
                             f"{row['L_reg']:.8g}", f"{row['total']:.8g}",
                             f"{row['gamma']:.8g}"])

"""Command-line pipeline around the NMWT checkpoint container.

Stages: pretrain a base network, fold and permute it into a smooth bundle,
fit the weight-generating INR, then sample/evaluate/report at any width or
depth. Every command is deterministic under a fixed --seed.

Exit codes: 0 success, 2 usage or argument error, 3 corrupt input file,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .checkpoint import (CorruptCheckpointError, file_hash8, load_checkpoint,
                         save_checkpoint)
from .datasets import (TEST_IMAGES, TEST_LABELS, TRAIN_IMAGES, TRAIN_LABELS,
                       Dataset, DatasetError, load_dataset, mean_std,
                       normalize)
from .evaluation import (compression_sweep, depth_heatmap, sampling_ablation,
                         similarity_report, write_ablation_csv,
                         write_heatmap_csv, write_similarity_csv,
                         write_sweep_csv, write_tv_compare_csv)
from .hypernet import HyperINR, load_inr, sample_bundle, save_inr
from .models import (ARCHS, NetConfig, ParamError, WeightBundle, accuracy_on,
                     batched_logits, bundle_shapes, compress_config,
                     fold_batchnorm, full_config, pretrain, validate_bundle,
                     with_depths)
from .permute import SOLVERS, apply_permutations, solve_permutations, tv_report
from .tensor import NonFiniteError, Tensor
from .training import TrainPlan, train, write_curve

EQUIVALENCE_TOL = 1e-4  # max-abs logit drift allowed by a permutation


class UsageError(ValueError):
    """Arguments are syntactically fine but semantically unusable."""


# ---------------------------------------------------------------------------
# bundle <-> checkpoint plumbing


def _config_metadata(config: NetConfig) -> dict:
    meta = {"arch": config.arch,
            "widths": ",".join(str(w) for w in config.layer_widths)}
    if config.block_depths is not None:
        meta["depths"] = ",".join(str(d) for d in config.block_depths)
    return meta


def _config_from_metadata(meta: dict) -> NetConfig:
    try:
        widths = tuple(int(w) for w in meta["widths"].split(","))
        depths = meta.get("depths", "")
        block_depths = tuple(int(d) for d in depths.split(",")) if depths else None
        return NetConfig(meta["arch"], widths, block_depths=block_depths)
    except (KeyError, ValueError) as exc:
        raise CorruptCheckpointError(f"bad config metadata: {exc}") from exc


def save_bundle(path, bundle: WeightBundle, metadata: dict) -> None:
    meta = dict(metadata)
    meta.update(_config_metadata(bundle.config))
    meta["folded"] = "1" if bundle.folded else "0"
    tensors = {name: t.data for name, t in bundle.params.items()}
    tensors.update(bundle.buffers)  # *.bn.mean / *.bn.var, disjoint names
    save_checkpoint(path, tensors, meta)


def load_bundle(path) -> tuple:
    ck = load_checkpoint(path)
    config = _config_from_metadata(ck.metadata)
    folded = ck.metadata.get("folded", "1") == "1"
    expected = bundle_shapes(config, folded=folded)
    params, buffers = {}, {}
    for name, arr in ck.tensors.items():
        if name in expected:
            params[name] = Tensor(arr, requires_grad=True)
        else:
            buffers[name] = arr
    want_buffers = set()
    if not folded:
        want_buffers = {name for name in expected if name.endswith(".bn.gamma")}
        want_buffers = {n.replace(".gamma", suffix) for n in want_buffers
                        for suffix in (".mean", ".var")}
    if set(buffers) != want_buffers:
        raise CorruptCheckpointError(
            f"unexpected tensors: {sorted(set(buffers) ^ want_buffers)}")
    bundle = WeightBundle(config, params, buffers, folded=folded)
    try:
        validate_bundle(bundle)
    except ParamError as exc:
        raise CorruptCheckpointError(str(exc)) from exc
    return bundle, ck.metadata


def _folded(bundle: WeightBundle) -> WeightBundle:
    return bundle if bundle.folded else fold_batchnorm(bundle)


# ---------------------------------------------------------------------------
# shared argument plumbing


def _load_data(data_dir, limit: int = 0) -> Dataset:
    d = Path(data_dir)
    if not d.is_dir():
        raise UsageError(f"data directory not found: {d}")
    for stem in (TRAIN_IMAGES, TRAIN_LABELS, TEST_IMAGES, TEST_LABELS):
        if not (d / stem).exists() and not (d / (stem + ".gz")).exists():
            raise UsageError(f"missing {stem}[.gz] in {d}")
    ds = load_dataset(d)
    return ds.limited(limit) if limit else ds


def _norm_stats(meta: dict, ds: Dataset) -> tuple:
    if "norm_mean" in meta and "norm_std" in meta:
        try:
            return float(meta["norm_mean"]), float(meta["norm_std"])
        except ValueError as exc:
            raise CorruptCheckpointError(f"bad norm metadata: {exc}") from exc
    return mean_std(ds.train_images)


def _test_split(meta: dict, ds: Dataset) -> tuple:
    mean, std = _norm_stats(meta, ds)
    return normalize(ds.test_images, mean, std), ds.test_labels


def _floats_csv(text: str, flag: str) -> list:
    try:
        return [float(v) for v in text.split(",") if v != ""]
    except ValueError:
        raise UsageError(f"{flag} expects comma-separated numbers, got {text!r}")


def _ints_csv(text: str, flag: str) -> list:
    try:
        return [int(v) for v in text.split(",") if v != ""]
    except ValueError:
        raise UsageError(f"{flag} expects comma-separated integers, got {text!r}")


def _inr_with_metadata(path) -> tuple:
    inr = load_inr(path)
    return inr, load_checkpoint(path).metadata


def _resolve_perturb(value, meta: dict) -> float:
    if value is not None:
        return float(value)
    return float(meta.get("perturb_a", 0.5))


def _gamma_max(meta: dict) -> float:
    return float(meta.get("gamma_max", 0.5))


# ---------------------------------------------------------------------------
# subcommands


def cmd_pretrain(args) -> int:
    if args.epochs < 1:
        raise UsageError("--epochs must be >= 1")
    config = full_config(args.arch)
    ds = _load_data(args.data, args.limit_train)
    bundle, report = pretrain(config, ds, epochs=args.epochs, seed=args.seed,
                              batch_size=args.batch_size, lr=args.lr)
    meta = {"kind": "base", "acc": f"{report['acc']:.6f}",
            "seed": args.seed, "epochs": args.epochs,
            "batch_size": args.batch_size, "lr": repr(args.lr),
            "norm_mean": repr(report["norm_mean"]),
            "norm_std": repr(report["norm_std"])}
    save_bundle(args.out, bundle, meta)
    print(f"pretrained {args.arch}: test accuracy {report['acc']:.4f} "
          f"-> {args.out}")
    return 0


def cmd_permute(args) -> int:
    bundle, meta = load_bundle(args.model)
    folded = _folded(bundle)
    before = tv_report(folded)
    perms = solve_permutations(folded, method=args.solver, seed=args.seed)
    smooth = apply_permutations(folded, perms)
    after = tv_report(smooth)

    rng = np.random.default_rng(args.seed)
    probe = rng.standard_normal(
        (256, *folded.config.input_shape)).astype(np.float32)
    diff = float(np.max(np.abs(batched_logits(folded, probe)
                               - batched_logits(smooth, probe))))
    print(f"logit equivalence max-abs diff: {diff:.3e}")
    if not np.isfinite(diff) or diff > EQUIVALENCE_TOL:
        raise NonFiniteError(f"permutation broke functional equivalence "
                             f"({diff:.3e} > {EQUIVALENCE_TOL:g})")

    out_meta = {"kind": "smooth", "solver": args.solver, "seed": args.seed,
                "source": file_hash8(args.model),
                "tv_before": f"{before[-1][3]:.6f}",
                "tv_after": f"{after[-1][3]:.6f}",
                "logit_diff": f"{diff:.3e}"}
    for key in ("acc", "norm_mean", "norm_std"):
        if key in meta:
            out_meta[key] = meta[key]
    save_bundle(args.out, smooth, out_meta)
    if args.report:
        write_tv_compare_csv(before, after, args.report)
    print(f"total tv {before[-1][3]:.4f} -> {after[-1][3]:.4f} "
          f"({args.solver}) -> {args.out}")
    return 0


def cmd_train(args) -> int:
    bundle, meta = load_bundle(args.model)
    smooth = _folded(bundle)
    ds = _load_data(args.data, args.limit_train)
    norm = None
    if "norm_mean" in meta and "norm_std" in meta:
        norm = _norm_stats(meta, ds)
    depth_pool = tuple(_ints_csv(args.depth_pool, "--depth-pool")) \
        if args.depth_pool else ()
    if depth_pool and smooth.config.arch != "miniresnet":
        raise UsageError("--depth-pool applies to miniresnet only")
    try:
        plan = TrainPlan(epochs=args.epochs, batch_size=args.batch_size,
                         lr=args.lr, gamma_max=args.gamma_max,
                         lambda1=args.lambda1, lambda2=args.lambda2,
                         ema=args.ema, rho=args.rho, seed=args.seed,
                         num_freq=args.freq, num_layers=args.layers,
                         num_hidden=args.hidden, perturb_a=args.perturb,
                         depth_pool=depth_pool, mode=args.mode)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    final, report = train(plan, smooth, ds, norm=norm)
    extra = dict(plan.metadata())
    extra.update({"source": file_hash8(args.model),
                  "norm_mean": repr(report["norm_mean"]),
                  "norm_std": repr(report["norm_std"])})
    if "acc" in meta:
        extra["base_acc"] = meta["acc"]
    save_inr(final, args.out, extra_metadata=extra)
    if args.log:
        write_curve(report["history"], args.log)
    errs = report["recon_errors"]
    print(f"trained {plan.epochs} epochs ({report['total_steps']} steps), "
          f"mean reconstruction rel-err "
          f"{float(np.mean(list(errs.values()))):.4f} -> {args.out}")
    return 0


def _sample_config(inr: HyperINR, gamma: float, depths) -> NetConfig:
    if not 0.0 <= gamma < 1.0:
        raise UsageError(f"--compress must lie in [0, 1), got {gamma}")
    config = full_config(inr.arch)
    if depths:
        if inr.arch != "miniresnet":
            raise UsageError("--depths applies to miniresnet only")
        vals = _ints_csv(depths, "--depths")
        if len(vals) != 2 or any(d < 1 for d in vals):
            raise UsageError("--depths expects two positive integers L1,L2")
        config = with_depths(config, vals[0], vals[1])
    return compress_config(config, gamma)


def cmd_sample(args) -> int:
    if args.k < 1:
        raise UsageError("--k must be >= 1")
    inr, meta = _inr_with_metadata(args.inr)
    config = _sample_config(inr, args.compress, args.depths)
    bundle = sample_bundle(inr, config, k_samples=args.k, seed=args.seed,
                           a_index=_resolve_perturb(args.perturb, meta))
    out_meta = {"kind": "sampled", "gamma": repr(args.compress), "k": args.k,
                "seed": args.seed,
                "perturb": repr(_resolve_perturb(args.perturb, meta)),
                "extrapolated": int(args.compress > _gamma_max(meta)),
                "source": file_hash8(args.inr)}
    for key in ("norm_mean", "norm_std", "base_acc", "gamma_max"):
        if key in meta:
            out_meta[key] = meta[key]
    save_bundle(args.out, bundle, out_meta)
    print(f"sampled gamma={args.compress:g} K={args.k} "
          f"widths={config.layer_widths} -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    bundle, meta = load_bundle(args.model)
    ds = _load_data(args.data)
    x, labels = _test_split(meta, ds)
    acc = accuracy_on(_folded(bundle), x, labels)
    print(f"accuracy={acc:.4f} n={len(x)}")
    return 0


def cmd_sweep(args) -> int:
    inr, meta = _inr_with_metadata(args.inr)
    grid = _floats_csv(args.grid, "--grid")
    if args.k < 1:
        raise UsageError("--k must be >= 1")
    ds = _load_data(args.data)
    x, labels = _test_split(meta, ds)
    try:
        result = compression_sweep(inr, grid, args.k, x, labels,
                                   gamma_max=_gamma_max(meta),
                                   a_index=_resolve_perturb(args.perturb, meta),
                                   seed=args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    write_sweep_csv(result, args.out)
    for row in result:
        tag = " (extrapolated)" if row.extrapolated else ""
        print(f"gamma={row.gamma:g} accuracy={row.accuracy:.4f} "
              f"params={row.param_count}{tag}")
    print(f"wrote {args.out}")
    return 0


def cmd_heatmap(args) -> int:
    inr, meta = _inr_with_metadata(args.inr)
    if inr.arch != "miniresnet":
        raise UsageError("heatmap applies to miniresnet INRs only")
    l1 = _ints_csv(args.l1, "--l1")
    l2 = _ints_csv(args.l2, "--l2")
    if not l1 or not l2 or min(l1 + l2) < 1:
        raise UsageError("--l1/--l2 expect positive depth lists")
    ds = _load_data(args.data)
    x, labels = _test_split(meta, ds)
    trained = set(_ints_csv(meta.get("depth_pool", ""), "depth_pool"))
    rows = depth_heatmap(inr, l1, l2, x, labels, trained_depths=trained,
                         k_samples=args.k,
                         a_index=_resolve_perturb(args.perturb, meta),
                         seed=args.seed)
    write_heatmap_csv(rows, args.out)
    for r in rows:
        tag = " (trained)" if r["trained"] else ""
        print(f"L1={r['l1']} L2={r['l2']} accuracy={r['accuracy']:.4f}{tag}")
    print(f"wrote {args.out}")
    return 0


def cmd_similarity(args) -> int:
    inr, meta = _inr_with_metadata(args.inr)
    grid = _floats_csv(args.grid, "--grid")
    ds = _load_data(args.data)
    x, labels = _test_split(meta, ds)
    bundles = {}
    if args.model:
        ref, _ = load_bundle(args.model)
        bundles["ref"] = _folded(ref)
    for i, gamma in enumerate(grid):
        config = _sample_config(inr, gamma, None)
        bundles[f"g{gamma:g}"] = sample_bundle(
            inr, config, k_samples=args.k, seed=args.seed + i,
            a_index=_resolve_perturb(args.perturb, meta))
    if len(bundles) < 2:
        raise UsageError("similarity needs at least two bundles "
                         "(--grid values and/or --model)")
    report = similarity_report(bundles, x)
    write_similarity_csv(report, args.out)
    names = report["names"]
    for i, a in enumerate(names):
        for j in range(i + 1, len(names)):
            print(f"{a} vs {names[j]}: cka={report['cka'][i, j]:.4f} "
                  f"kl={report['kl'][i, j]:.4f}")
    print(f"wrote {args.out}")
    return 0


def cmd_ablate_sampling(args) -> int:
    inr, meta = _inr_with_metadata(args.inr)
    grid = _floats_csv(args.grid, "--grid")
    k_values = _ints_csv(args.k, "--k")
    seeds = _ints_csv(args.seeds, "--seeds")
    if not grid or not k_values or not seeds or min(k_values) < 1:
        raise UsageError("--grid/--k/--seeds must be non-empty (K >= 1)")
    for gamma in grid:
        if not 0.0 <= gamma < 1.0:
            raise UsageError(f"--grid values must lie in [0, 1), got {gamma}")
    ds = _load_data(args.data)
    x, labels = _test_split(meta, ds)
    rows = sampling_ablation(inr, grid, k_values, seeds, x, labels,
                             gamma_max=_gamma_max(meta),
                             a_index=_resolve_perturb(args.perturb, meta))
    write_ablation_csv(rows, args.out)
    for r in rows:
        tag = " (extrapolated)" if r["extrapolated"] else ""
        print(f"gamma={r['gamma']:g} K={r['K']} "
              f"mean_accuracy={r['mean_accuracy']:.4f}{tag}")
    print(f"wrote {args.out}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="weightmorph",
        description="Train a weight-manifold INR over a small network and "
                    "sample functional weights at any width or depth.")
    sub = p.add_subparsers(dest="command", required=True)

    q = sub.add_parser("pretrain", help="train a base network from scratch")
    q.add_argument("--arch", required=True, choices=ARCHS)
    q.add_argument("--data", required=True)
    q.add_argument("--epochs", type=int, default=10)
    q.add_argument("--batch-size", type=int, default=128)
    q.add_argument("--lr", type=float, default=1e-3)
    q.add_argument("--limit-train", type=int, default=0,
                   help="use only the first N training samples")
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_pretrain)

    q = sub.add_parser("permute",
                       help="fold BN and smooth the weights by permutation")
    q.add_argument("--model", required=True)
    q.add_argument("--solver", default="mshp", choices=SOLVERS)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--out", required=True)
    q.add_argument("--report", default="",
                   help="CSV of per-tensor TV before/after")
    q.set_defaults(func=cmd_permute)

    q = sub.add_parser("train", help="fit the weight-generating INR")
    q.add_argument("--model", required=True, help="smoothed checkpoint")
    q.add_argument("--data", required=True)
    q.add_argument("--epochs", type=int, default=30)
    q.add_argument("--batch-size", type=int, default=128)
    q.add_argument("--lr", type=float, default=1e-3)
    q.add_argument("--gamma-max", type=float, default=0.5)
    q.add_argument("--lambda1", type=float, default=1.0)
    q.add_argument("--lambda2", type=float, default=1e-4)
    q.add_argument("--ema", type=float, default=0.995)
    q.add_argument("--freq", type=int, default=16)
    q.add_argument("--layers", type=int, default=5)
    q.add_argument("--hidden", type=int, default=256)
    q.add_argument("--perturb", type=float, default=0.5)
    q.add_argument("--rho", type=float, default=0.25)
    q.add_argument("--depth-pool", default="",
                   help="e.g. 1,2,3: sample miniresnet stage depths")
    q.add_argument("--mode", default="auto",
                   choices=("auto", "per_param", "shared"))
    q.add_argument("--limit-train", type=int, default=0)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--out", required=True)
    q.add_argument("--log", default="", help="learning-curve CSV")
    q.set_defaults(func=cmd_train)

    q = sub.add_parser("sample", help="materialize weights at one config")
    q.add_argument("--inr", required=True)
    q.add_argument("--compress", type=float, default=0.0)
    q.add_argument("--depths", default="", help="miniresnet L1,L2")
    q.add_argument("--k", type=int, default=50)
    q.add_argument("--perturb", type=float, default=None)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_sample)

    q = sub.add_parser("eval", help="test accuracy of a weight checkpoint")
    q.add_argument("--model", required=True)
    q.add_argument("--data", required=True)
    q.set_defaults(func=cmd_eval)

    q = sub.add_parser("sweep", help="accuracy across compression rates")
    q.add_argument("--inr", required=True)
    q.add_argument("--data", required=True)
    q.add_argument("--grid", default="0,0.25,0.5,0.75")
    q.add_argument("--k", type=int, default=50)
    q.add_argument("--perturb", type=float, default=None)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_sweep)

    q = sub.add_parser("heatmap", help="accuracy across stage depths")
    q.add_argument("--inr", required=True)
    q.add_argument("--data", required=True)
    q.add_argument("--l1", default="1,2,3")
    q.add_argument("--l2", default="1,2,3")
    q.add_argument("--k", type=int, default=1)
    q.add_argument("--perturb", type=float, default=None)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_heatmap)

    q = sub.add_parser("similarity",
                       help="pairwise CKA/KL across sampled widths")
    q.add_argument("--inr", required=True)
    q.add_argument("--data", required=True)
    q.add_argument("--grid", default="0,0.5")
    q.add_argument("--model", default="", help="optional reference bundle")
    q.add_argument("--k", type=int, default=50)
    q.add_argument("--perturb", type=float, default=None)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_similarity)

    q = sub.add_parser("ablate-sampling",
                       help="mean accuracy per (gamma, K) over seeds")
    q.add_argument("--inr", required=True)
    q.add_argument("--data", required=True)
    q.add_argument("--grid", default="0.5,0.75")
    q.add_argument("--k", default="1,50")
    q.add_argument("--seeds", default="0,1,2")
    q.add_argument("--perturb", type=float, default=None)
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_ablate_sampling)

    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed its message
        return 0 if exc.code in (0, None) else 2
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (CorruptCheckpointError, DatasetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except NonFiniteError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


def console_entry() -> None:
    sys.exit(main())

"""Experiment metrics: accuracy sweeps, linear CKA, output KL, heatmaps.

Feature matrices for CKA come from the input of the final linear layer;
probabilities for KL are floored at 1e-9; extrapolated compression rates
(beyond the gamma range used in training) are flagged, never hidden.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .hypernet import HyperINR, sample_bundle
from .models import (WeightBundle, accuracy_on, forward, full_config,
                     param_count, compress_config, with_depths)
from .tensor import Tensor


@dataclass(frozen=True)
class SweepRow:
    gamma: float
    accuracy: float
    param_count: int
    extrapolated: bool


@dataclass(frozen=True)
class SweepResult:
    rows: tuple

    def __iter__(self):
        return iter(self.rows)


def feature_matrix(bundle: WeightBundle, x: np.ndarray,
                   batch_size: int = 256) -> np.ndarray:
    """Per-sample inputs of the final linear layer, [N, d] float32."""
    outs = []
    for start in range(0, len(x), batch_size):
        _, feats = forward(bundle, Tensor(x[start:start + batch_size]),
                           training=False, return_features=True)
        outs.append(feats.data)
    return np.concatenate(outs, axis=0)


def linear_cka(a: np.ndarray, b: np.ndarray) -> float:
    """||Yc^T Xc||_F^2 / (||Xc^T Xc||_F * ||Yc^T Yc||_F), column-centered."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ValueError("feature matrices must be 2-D with equal row counts")
    ac = a - a.mean(axis=0, keepdims=True)
    bc = b - b.mean(axis=0, keepdims=True)
    denom_a = np.linalg.norm(ac.T @ ac)
    denom_b = np.linalg.norm(bc.T @ bc)
    if denom_a == 0.0 or denom_b == 0.0:
        raise ValueError("zero-variance features make CKA undefined")
    cross = np.linalg.norm(bc.T @ ac) ** 2
    return float(cross / (denom_a * denom_b))


def _log_probs(bundle: WeightBundle, x: np.ndarray,
               batch_size: int = 256) -> np.ndarray:
    outs = []
    for start in range(0, len(x), batch_size):
        logits = forward(bundle, Tensor(x[start:start + batch_size]),
                         training=False).data.astype(np.float64)
        z = logits - logits.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        outs.append(p)
    return np.concatenate(outs, axis=0)


def _kl_from_probs(pa: np.ndarray, pb: np.ndarray) -> float:
    return float((pa * (np.log(pa) - np.log(pb))).sum(axis=1).mean())


def output_kl(bundle_a: WeightBundle, bundle_b: WeightBundle,
              x: np.ndarray, floor: float = 1e-9) -> float:
    """Mean over samples of KL(softmax_a || softmax_b), floored probs."""
    pa = np.maximum(_log_probs(bundle_a, x), floor)
    pb = np.maximum(_log_probs(bundle_b, x), floor)
    return _kl_from_probs(pa, pb)


def compression_sweep(inr: HyperINR, gamma_list, k_samples: int,
                      x: np.ndarray, labels: np.ndarray, gamma_max: float,
                      a_index: float = 0.5, seed: int = 0) -> SweepResult:
    """Accuracy and size at each compression rate, extrapolation flagged."""
    gammas = [float(g) for g in gamma_list]
    if any(b <= a for a, b in zip(gammas, gammas[1:])):
        raise ValueError("gamma_list must be strictly increasing")
    base = full_config(inr.arch)
    rows = []
    prev_count = None
    for i, gamma in enumerate(gammas):
        cfg = compress_config(base, gamma)
        bundle = sample_bundle(inr, cfg, k_samples=k_samples,
                               seed=seed + i, a_index=a_index)
        count = param_count(cfg)
        if prev_count is not None and count >= prev_count:
            raise ValueError(f"param count not decreasing at gamma={gamma}")
        prev_count = count
        acc = accuracy_on(bundle, x, labels)
        rows.append(SweepRow(gamma, acc, count, gamma > gamma_max))
    return SweepResult(tuple(rows))


def depth_heatmap(inr: HyperINR, l1_values, l2_values, x: np.ndarray,
                  labels: np.ndarray, trained_depths, k_samples: int = 1,
                  a_index: float = 0.5, seed: int = 0):
    """Accuracy per (L1, L2) cell; cells inside the trained pool flagged."""
    trained = set(int(d) for d in trained_depths)
    rows = []
    for l1 in l1_values:
        for l2 in l2_values:
            cfg = with_depths(full_config(inr.arch), int(l1), int(l2))
            bundle = sample_bundle(inr, cfg, k_samples=k_samples,
                                   seed=seed + 97 * int(l1) + int(l2),
                                   a_index=a_index)
            acc = accuracy_on(bundle, x, labels)
            rows.append({"l1": int(l1), "l2": int(l2), "accuracy": acc,
                         "trained": int(l1) in trained and int(l2) in trained})
    return rows


def sampling_ablation(inr: HyperINR, gamma_list, k_values, seeds,
                      x: np.ndarray, labels: np.ndarray, gamma_max: float,
                      a_index: float = 0.5):
    """Mean-over-seeds accuracy per (gamma, K) plus a K-wins flag per gamma."""
    base = full_config(inr.arch)
    rows = []
    for gamma in gamma_list:
        cfg = compress_config(base, float(gamma))
        by_k = {}
        for k in k_values:
            accs = []
            for seed in seeds:
                bundle = sample_bundle(inr, cfg, k_samples=int(k),
                                       seed=int(seed), a_index=a_index)
                accs.append(accuracy_on(bundle, x, labels))
            by_k[int(k)] = accs
        kmin, kmax = min(by_k), max(by_k)
        for k in sorted(by_k):
            rows.append({
                "gamma": float(gamma), "K": k,
                "mean_accuracy": float(np.mean(by_k[k])),
                "accuracies": tuple(by_k[k]),
                "extrapolated": float(gamma) > gamma_max,
                "k_high_wins": float(np.mean(by_k[kmax]))
                >= float(np.mean(by_k[kmin])),
            })
    return rows


def similarity_report(bundles: dict, x: np.ndarray, floor: float = 1e-9):
    """Pairwise linear-CKA and output-KL matrices over named bundles."""
    names = list(bundles)
    feats = {n: feature_matrix(bundles[n], x) for n in names}
    probs = {n: np.maximum(_log_probs(bundles[n], x), floor) for n in names}
    n = len(names)
    cka = np.zeros((n, n))
    kl = np.zeros((n, n))
    for i, a in enumerate(names):
        for j, b in enumerate(names):
            if j <= i:
                cka[i, j] = linear_cka(feats[a], feats[b])
            kl[i, j] = _kl_from_probs(probs[a], probs[b])
    cka = cka + np.tril(cka, -1).T  # symmetric by construction
    return {"names": names, "cka": cka, "kl": kl}


# ---------------------------------------------------------------------------
# CSV emitters ('.' decimals, LF line ends, all values finite)


def _check_finite(values) -> None:
    for v in values:
        if isinstance(v, float) and not np.isfinite(v):
            raise ValueError("refusing to write non-finite value to CSV")


def write_sweep_csv(result: SweepResult, path: str) -> None:
    with open(path, "w", newline="\n") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["gamma", "accuracy", "param_count", "extrapolated"])
        for r in result:
            _check_finite([r.gamma, r.accuracy])
            w.writerow([f"{r.gamma:.6g}", f"{r.accuracy:.6f}",
                        r.param_count, int(r.extrapolated)])


def write_heatmap_csv(rows, path: str) -> None:
    with open(path, "w", newline="\n") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["l1", "l2", "accuracy", "trained"])
        for r in rows:
            _check_finite([r["accuracy"]])
            w.writerow([r["l1"], r["l2"], f"{r['accuracy']:.6f}",
                        int(r["trained"])])


def write_ablation_csv(rows, path: str) -> None:
    with open(path, "w", newline="\n") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["gamma", "K", "mean_accuracy", "extrapolated",
                    "k_high_wins"])
        for r in rows:
            _check_finite([r["gamma"], r["mean_accuracy"]])
            w.writerow([f"{r['gamma']:.6g}", r["K"],
                        f"{r['mean_accuracy']:.6f}", int(r["extrapolated"]),
                        int(r["k_high_wins"])])


def write_similarity_csv(report, path: str) -> None:
    names = report["names"]
    with open(path, "w", newline="\n") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "row"] + list(names))
        for metric in ("cka", "kl"):
            mat = report[metric]
            _check_finite(mat.ravel().tolist())
            for i, name in enumerate(names):
                w.writerow([metric, name]
                           + [f"{v:.6f}" for v in mat[i]])


def write_tv_csv(rows, path: str) -> None:
    """Rows of (name, tv_in, tv_out, tv_total) including the TOTAL line."""
    with open(path, "w", newline="\n") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["name", "tv_in", "tv_out", "tv_total"])
        for name, t_in, t_out, total in rows:
            _check_finite([t_in, t_out, total])
            w.writerow([name, f"{t_in:.6f}", f"{t_out:.6f}", f"{total:.6f}"])


def write_tv_compare_csv(before, after, path: str) -> None:
    """Per-tensor TV before vs after permutation; both end with TOTAL rows."""
    if [r[0] for r in before] != [r[0] for r in after]:
        raise ValueError("before/after rows name different tensors")
    with open(path, "w", newline="\n") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["name", "tv_in_before", "tv_out_before", "tv_before",
                    "tv_in_after", "tv_out_after", "tv_after"])
        for (name, i0, o0, t0), (_, i1, o1, t1) in zip(before, after):
            _check_finite([i0, o0, t0, i1, o1, t1])
            w.writerow([name] + [f"{v:.6f}" for v in (i0, o0, t0, i1, o1, t1)])

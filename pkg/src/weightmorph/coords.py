"""Model-space coordinates: normalization, perturbation, Fourier embedding.

A weight element is addressed by a config triple (L, C_in, C_out) and an
index triple (l, c_in, c_out); both become real-valued once perturbed.  The
normalized 6-vector v = [l/L, c_in/C_in, c_out/C_out, L/N, C_in/N, C_out/N]
feeds a sinusoidal feature map that keeps raw v as its first six entries.

Conventions used by the weight generator: layer l is 0-based, channel
indices are 1-based, and bias entries sit at c_in = 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .models import NetConfig, enumerate_param_blocks

# perturbed config components stay usable as denominators
MIN_DENOM = 1e-3


@dataclass(frozen=True)
class WeightCoordinate:
    """One weight address plus the shared normalizer N."""

    L: float
    C_in: float
    C_out: float
    l: float
    c_in: float
    c_out: float
    N: float

    @property
    def config(self):
        return np.array([self.L, self.C_in, self.C_out], dtype=np.float64)

    @property
    def index(self):
        return np.array([self.l, self.c_in, self.c_out], dtype=np.float64)


def normalizer(config: NetConfig) -> float:
    """Largest raw component across the layer grid (pass the full config).

    Grouped fc columns count as channels (columns / group), matching the
    coordinate grid the generator queries.
    """
    blocks = enumerate_param_blocks(config)
    depth = max(b.l for b in blocks) + 1
    chans = [b.c_in // b.group if b.group > 1 else b.c_in for b in blocks]
    chans += [b.c_out for b in blocks]
    return float(max([depth] + chans))


def normalize_batch(config, index, n: float, ranges=None) -> np.ndarray:
    """Rows of [l/L*, c_in/C*, c_out/C*, L/N, C_in/N, C_out/N], f32.

    The starred denominators come from `ranges` (the dims the generator was
    built with), so an index keeps one absolute position across sampled
    configs and a compressed config's targets are a coordinate subset of
    the anchor fit.  They default to `config`, which instead rescales
    positions into the sampled grid.
    """
    index = np.asarray(index, dtype=np.float64)
    config = np.asarray(config, dtype=np.float64)
    if index.ndim != 2 or index.shape[1] != 3:
        raise ValueError("expected [M, 3] index and [3] or [M, 3] config")
    if config.ndim == 1 and config.shape == (3,):
        config = np.broadcast_to(config, index.shape)
    elif config.shape != index.shape:
        raise ValueError("expected [M, 3] index and [3] or [M, 3] config")
    denom = config if ranges is None else np.asarray(ranges, dtype=np.float64)
    if denom.ndim == 1 and denom.shape == (3,):
        denom = np.broadcast_to(denom, index.shape)
    elif denom.shape != index.shape:
        raise ValueError("expected [3] or [M, 3] ranges")
    if config.size == 0 or config.min() <= 0.0 or n <= 0.0:
        raise ValueError("zero denominator in coordinate")
    if denom.min() <= 0.0:
        raise ValueError("zero denominator in coordinate")
    v = np.empty((index.shape[0], 6), dtype=np.float32)
    v[:, :3] = index / denom
    v[:, 3:] = config / n
    return v


def normalize(coord: WeightCoordinate, ranges=None) -> np.ndarray:
    return normalize_batch(coord.config, coord.index[None, :], coord.N,
                           ranges)[0]


def perturb_batch(config, index, rng, a_index: float = 0.5,
                  a_config: float = 0.0):
    """Independent U(-a, a) shift per raw component.

    Index rows each get their own draw; the config triple gets a single
    shared draw (it denominates every row) and is clamped to MIN_DENOM.
    a = 0 returns the corresponding input untouched, bit-exactly.
    """
    if a_index < 0 or a_config < 0:
        raise ValueError("negative perturbation half-width")
    index = np.asarray(index, dtype=np.float64)
    config = np.asarray(config, dtype=np.float64)
    if a_index > 0:
        index = index + rng.uniform(-a_index, a_index, size=index.shape)
    if a_config > 0:
        config = config + rng.uniform(-a_config, a_config, size=config.shape)
        config = np.maximum(config, MIN_DENOM)
    return config, index


def perturb(coord: WeightCoordinate, rng, a_index: float = 0.5,
            a_config: float = 0.0) -> WeightCoordinate:
    cfg, idx = perturb_batch(coord.config, coord.index[None, :], rng,
                             a_index, a_config)
    return WeightCoordinate(cfg[0], cfg[1], cfg[2],
                            idx[0, 0], idx[0, 1], idx[0, 2], coord.N)


def embed_dim(num_freq: int) -> int:
    return (2 * num_freq + 1) * 6


def embed_batch(v, num_freq: int) -> np.ndarray:
    """[v | sin(2^0 pi v), cos(2^0 pi v), ..., sin(2^{F-1} pi v), cos(...)]."""
    if num_freq < 1:
        raise ValueError("num_freq must be >= 1")
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 2 or v.shape[1] != 6:
        raise ValueError("expected [M, 6] coordinate rows")
    out = np.empty((v.shape[0], embed_dim(num_freq)), dtype=np.float32)
    out[:, :6] = v
    scale = np.pi * np.exp2(np.arange(num_freq, dtype=np.float64))
    args = v[:, None, :] * scale[None, :, None]  # [M, F, 6]
    feats = np.empty((v.shape[0], num_freq, 2, 6), dtype=np.float64)
    feats[:, :, 0] = np.sin(args)
    feats[:, :, 1] = np.cos(args)
    out[:, 6:] = feats.reshape(v.shape[0], -1)
    return out


def embed(v, num_freq: int) -> np.ndarray:
    return embed_batch(np.asarray(v)[None, :], num_freq)[0]

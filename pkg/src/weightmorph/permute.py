"""Channel permutations that smooth weights without changing the network.

Total variation (TV) measures adjacent-element differences: tv_in within
rows, tv_out across rows. Permuting rows cannot change tv_in and permuting
columns cannot change tv_out (the summands are the same multiset), so each
hidden channel space can be reordered independently.

Every hidden channel space of a network forms a clique: the layers writing
it (out-facing, rows permuted) and the layers reading it (in-facing,
columns permuted; conv columns move at input-channel granularity, fc
columns after a conv move in spatial groups). Residual additions identify
the spaces they tie together, so a whole stage shares one clique.

Minimizing the summed adjacent-channel TV over a clique is a Shortest
Hamiltonian Path problem on the pairwise L1 distances. It is solved as a
TSP by adding a dummy node at zero distance to all others, running 2.5-opt
local search (2-opt reversals plus single-node relocations, strict
improvements only, best-improvement scan order) from several start tours,
and cutting the best closed tour at the dummy.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .models import NetConfig, WeightBundle, layer_table
from .tensor import ShapeError, Tensor

SOLVERS = ("mshp", "greedy", "2opt", "random", "none")
_EPS = 1e-12  # strict-improvement threshold


# ---------------------------------------------------------------------------
# total variation


def tv_in(w: np.ndarray) -> float:
    """Sum of |w[i,j+1] - w[i,j]| over each row of a 2-D matrix."""
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2 or w.size == 0:
        raise ShapeError(f"tv_in: expected non-empty 2-D matrix, got {w.shape}")
    return float(np.abs(np.diff(w, axis=1)).sum())


def tv_out(w: np.ndarray) -> float:
    """Sum of |w[i+1,j] - w[i,j]| over each column of a 2-D matrix."""
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2 or w.size == 0:
        raise ShapeError(f"tv_out: expected non-empty 2-D matrix, got {w.shape}")
    return float(np.abs(np.diff(w, axis=0)).sum())


def tensor_tv(arr: np.ndarray, group: int = 1) -> tuple:
    """(tv_in, tv_out) at channel granularity.

    Conv kernels [Cout,Cin,k,k] and grouped fc matrices [out, n*group] take
    column adjacency between input-channel groups (elementwise difference of
    whole k x k slices / spatial groups); row adjacency is between output
    channels. Plain matrices use element adjacency (group 1).
    """
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 4:
        cols = arr.reshape(arr.shape[0], arr.shape[1], -1)
    elif arr.ndim == 2:
        if arr.shape[1] % group:
            raise ShapeError(f"tensor_tv: {arr.shape[1]} columns not divisible "
                             f"by group {group}")
        cols = arr.reshape(arr.shape[0], arr.shape[1] // group, group)
    else:
        raise ShapeError(f"tensor_tv: expected 2-D or 4-D, got {arr.shape}")
    t_in = float(np.abs(np.diff(cols, axis=1)).sum())
    t_out = float(np.abs(np.diff(cols, axis=0)).sum())
    return t_in, t_out


# ---------------------------------------------------------------------------
# dependency graph


@dataclass(frozen=True)
class Role:
    """How one tensor touches a clique's channel space."""

    param: str
    axis: str  # "out" (rows permuted) | "in" (columns permuted)
    group: int = 1  # columns per channel for in-facing linear tensors


@dataclass(frozen=True)
class Clique:
    name: str
    n: int
    members: tuple  # Roles
    biases: tuple  # bias tensor names permuted with the out order

    @property
    def out_facing(self):
        return tuple(r for r in self.members if r.axis == "out")

    @property
    def in_facing(self):
        return tuple(r for r in self.members if r.axis == "in")


@dataclass(frozen=True)
class DependencyGraph:
    nodes: tuple  # layer names in forward order
    edges: tuple  # (producer, consumer) channel-space feeds
    cliques: tuple


def build_dependency_graph(config: NetConfig) -> DependencyGraph:
    """One clique per hidden channel space; residual adds merge stages."""
    table = layer_table(config, folded=True)
    names = tuple(s.name for s in table)
    by_name = {s.name: s for s in table}
    edges = []
    cliques = []

    if config.arch == "mlp":
        edges.append(("fc1", "fc2"))
        cliques.append(Clique("fc1_out", by_name["fc1"].c_out,
                              (Role("fc1.weight", "out"), Role("fc2.weight", "in")),
                              ("fc1.bias",)))
    elif config.arch == "lenet":
        edges += [("conv1", "conv2"), ("conv2", "fc1"), ("fc1", "fc2")]
        cliques.append(Clique("conv1_out", by_name["conv1"].c_out,
                              (Role("conv1.weight", "out"), Role("conv2.weight", "in")),
                              ("conv1.bias",)))
        cliques.append(Clique("conv2_out", by_name["conv2"].c_out,
                              (Role("conv2.weight", "out"),
                               Role("fc1.weight", "in", group=by_name["fc1"].group)),
                              ("conv2.bias",)))
        cliques.append(Clique("fc1_out", by_name["fc1"].c_out,
                              (Role("fc1.weight", "out"), Role("fc2.weight", "in")),
                              ("fc1.bias",)))
    elif config.arch == "miniresnet":
        l1, l2 = config.block_depths
        stages = (("stage1", "stem", "s1b", l1, "trans"),
                  ("stage2", "trans", "s2b", l2, "head"))
        for stage_name, producer, prefix, depth, consumer in stages:
            members = [Role(f"{producer}.weight", "out")]
            biases = [f"{producer}.bias"]
            for b in range(depth):
                c1, c2 = f"{prefix}{b}c1", f"{prefix}{b}c2"
                edges += [(producer, c1), (c1, c2), (c2, consumer)]
                # residual add ties every block output back to the stage space
                members += [Role(f"{c1}.weight", "in"), Role(f"{c2}.weight", "out")]
                biases.append(f"{c2}.bias")
                cliques.append(Clique(f"{c1}_out", by_name[c1].c_out,
                                      (Role(f"{c1}.weight", "out"),
                                       Role(f"{c2}.weight", "in")),
                                      (f"{c1}.bias",)))
            members.append(Role(f"{consumer}.weight", "in"))
            edges.append((producer, consumer))
            cliques.append(Clique(stage_name, by_name[producer].c_out,
                                  tuple(members), tuple(biases)))
    else:
        raise ValueError(f"unsupported arch {config.arch!r}")
    return DependencyGraph(names, tuple(edges), tuple(cliques))


# ---------------------------------------------------------------------------
# distances


def _pairwise_l1(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    d = np.zeros((n, n))
    for p in range(n):
        d[p] = np.abs(x - x[p]).sum(axis=1)
    return d


def _role_vectors(role: Role, bundle: WeightBundle, n: int) -> np.ndarray:
    """Per-channel feature rows whose pairwise L1 gives the TV distance."""
    w = bundle.params[role.param].data
    if role.axis == "out":
        if w.shape[0] != n:
            raise ShapeError(f"{role.param}: {w.shape[0]} rows, clique n={n}")
        return w.reshape(n, -1)
    if w.ndim == 4:
        if w.shape[1] != n:
            raise ShapeError(f"{role.param}: {w.shape[1]} in-channels, clique n={n}")
        return np.moveaxis(w, 1, 0).reshape(n, -1)
    if w.shape[1] != n * role.group:
        raise ShapeError(f"{role.param}: {w.shape[1]} columns, "
                         f"clique n={n} x group {role.group}")
    return np.moveaxis(w.reshape(w.shape[0], n, role.group), 1, 0).reshape(n, -1)


def clique_distance_matrix(clique: Clique, bundle: WeightBundle) -> np.ndarray:
    """Symmetric n x n matrix; path length along an order equals that
    order's summed adjacent-channel TV over every tensor the clique touches."""
    d = np.zeros((clique.n, clique.n))
    for role in clique.members:
        d += _pairwise_l1(_role_vectors(role, bundle, clique.n))
    return d


def path_length(order, dist: np.ndarray) -> float:
    order = np.asarray(order)
    return float(dist[order[:-1], order[1:]].sum())


def closed_tour_length(tour, dist: np.ndarray) -> float:
    tour = np.asarray(tour)
    return float(dist[tour, np.roll(tour, -1)].sum())


# ---------------------------------------------------------------------------
# 2.5-opt local search


def _best_2opt_move(tour: np.ndarray, dist: np.ndarray):
    m = len(tour)
    nxt = np.roll(tour, -1)
    cur = dist[tour, nxt]
    delta = (dist[np.ix_(tour, tour)] + dist[np.ix_(nxt, nxt)]
             - cur[:, None] - cur[None, :])
    mask = np.full((m, m), np.inf)
    iu = np.triu_indices(m, k=2)
    mask[iu] = 0.0
    mask[0, m - 1] = np.inf  # wrap-adjacent edge pair: reversal is a no-op
    delta = delta + mask
    flat = int(np.argmin(delta))
    i, j = divmod(flat, m)
    if delta[i, j] < -_EPS:
        return i, j
    return None


def _best_oropt_move(tour: np.ndarray, dist: np.ndarray):
    m = len(tour)
    prv = np.roll(tour, 1)
    nxt = np.roll(tour, -1)
    removal = dist[prv, tour] + dist[tour, nxt] - dist[prv, nxt]
    insert = (dist[np.ix_(tour, tour)] + dist[np.ix_(tour, nxt)]
              - dist[tour, nxt][None, :])
    delta = insert - removal[:, None]
    p_idx = np.arange(m)
    delta[p_idx, p_idx] = np.inf  # insert into the edge leaving itself
    delta[p_idx, (p_idx - 1) % m] = np.inf  # insert where it already is
    flat = int(np.argmin(delta))
    p, e = divmod(flat, m)
    if delta[p, e] < -_EPS:
        return p, e
    return None


def _relocate(tour: np.ndarray, p: int, e: int) -> np.ndarray:
    node = tour[p]
    rest = np.delete(tour, p)
    ins = e if e < p else e - 1
    return np.insert(rest, ins + 1, node)


def two_five_opt_step(tour, dist: np.ndarray, max_scans: int = 0,
                      trace: list = None) -> np.ndarray:
    """Drive a closed tour to a 2.5-opt local optimum.

    Each scan evaluates every 2-opt reversal, then (if none improves) every
    single-node relocation, applying the best strictly improving move.
    ``max_scans`` defaults to 200 * len(tour).
    """
    tour = np.asarray(tour, dtype=np.int64).copy()
    m = len(tour)
    if m < 4:
        return tour
    if max_scans <= 0:
        max_scans = 200 * m
    for _ in range(max_scans):
        move = _best_2opt_move(tour, dist)
        if move is not None:
            i, j = move
            tour[i + 1:j + 1] = tour[i + 1:j + 1][::-1]
        else:
            move = _best_oropt_move(tour, dist)
            if move is None:
                break
            tour = _relocate(tour, *move)
        if trace is not None:
            trace.append(closed_tour_length(tour, dist))
    return tour


def _nearest_neighbor_tour(dist: np.ndarray, start: int) -> np.ndarray:
    m = dist.shape[0]
    unvisited = np.ones(m, dtype=bool)
    tour = np.empty(m, dtype=np.int64)
    tour[0] = start
    unvisited[start] = False
    for t in range(1, m):
        row = dist[tour[t - 1]].copy()
        row[~unvisited] = np.inf
        tour[t] = int(np.argmin(row))  # ties to lowest index
        unvisited[tour[t]] = False
    return tour


def solve_mshp(dist: np.ndarray, seed: int = 0, restarts: int = 5) -> np.ndarray:
    """Best open-path channel order via dummy-node TSP plus 2.5-opt.

    Start tours: identity, nearest-neighbor from the dummy (equivalent to
    the greedy baseline), and ``restarts`` seeded shuffles. The identity
    start guarantees the result never exceeds the identity-order length.
    """
    dist = np.asarray(dist, dtype=np.float64)
    n = dist.shape[0]
    if n == 1:
        return np.zeros(1, dtype=np.int64)
    m = n + 1
    dd = np.zeros((m, m))
    dd[:n, :n] = dist  # dummy node n sits at zero distance to all others
    rng = np.random.default_rng(seed)
    starts = [np.arange(m), _nearest_neighbor_tour(dd, start=n)]
    for _ in range(restarts):
        starts.append(np.append(rng.permutation(n), n))

    best, best_len = None, np.inf
    for s in starts:
        tour = two_five_opt_step(s, dd)
        length = closed_tour_length(tour, dd)
        if length < best_len - _EPS:
            best, best_len = tour, length
    cut = int(np.where(best == n)[0][0])
    return np.concatenate([best[cut + 1:], best[:cut]])


def solve_baseline(dist: np.ndarray, method: str, seed: int = 0) -> np.ndarray:
    dist = np.asarray(dist, dtype=np.float64)
    n = dist.shape[0]
    if method == "none":
        return np.arange(n, dtype=np.int64)
    if method == "random":
        return np.random.default_rng(seed).permutation(n).astype(np.int64)
    if method == "greedy":
        return _nearest_neighbor_tour(dist, start=0)
    if method == "2opt":
        # closed tour, no dummy node; read the cycle off from node 0
        tour = _two_opt_only(np.arange(n, dtype=np.int64), dist)
        cut = int(np.where(tour == 0)[0][0])
        return np.concatenate([tour[cut:], tour[:cut]])
    raise ValueError(f"unknown method {method!r}; expected one of {SOLVERS}")


def _two_opt_only(tour: np.ndarray, dist: np.ndarray, max_scans: int = 0) -> np.ndarray:
    tour = tour.copy()
    m = len(tour)
    if m < 4:
        return tour
    if max_scans <= 0:
        max_scans = 200 * m
    for _ in range(max_scans):
        move = _best_2opt_move(tour, dist)
        if move is None:
            break
        i, j = move
        tour[i + 1:j + 1] = tour[i + 1:j + 1][::-1]
    return tour


# ---------------------------------------------------------------------------
# whole-bundle smoothing


def _check_permutation(order: np.ndarray, n: int, clique: str) -> np.ndarray:
    order = np.asarray(order, dtype=np.int64)
    if order.shape != (n,) or not np.array_equal(np.sort(order), np.arange(n)):
        raise ValueError(f"clique {clique!r}: invalid permutation of {n} channels")
    return order


def solve_permutations(bundle: WeightBundle, method: str = "mshp",
                       seed: int = 0, restarts: int = 5) -> dict:
    """Channel order per clique. mshp/greedy/random see the full clique
    distance; the 2opt baseline sees only the producing layer's rows
    (layer-wise objective), mirroring a per-layer TSP baseline."""
    if method not in SOLVERS:
        raise ValueError(f"unknown method {method!r}; expected one of {SOLVERS}")
    graph = build_dependency_graph(bundle.config)
    perms = {}
    for i, clique in enumerate(graph.cliques):
        if method == "none":
            perms[clique.name] = np.arange(clique.n, dtype=np.int64)
            continue
        if method == "2opt":
            dist = _pairwise_l1(
                _role_vectors(clique.out_facing[0], bundle, clique.n))
        else:
            dist = clique_distance_matrix(clique, bundle)
        if method == "mshp":
            perms[clique.name] = solve_mshp(dist, seed=seed + i, restarts=restarts)
        else:
            perms[clique.name] = solve_baseline(dist, method, seed=seed + i)
    return perms


def apply_permutations(bundle: WeightBundle, perms: dict) -> WeightBundle:
    """Reorder every clique's channels; the network function is unchanged."""
    graph = build_dependency_graph(bundle.config)
    arrays = {name: t.data.copy() for name, t in bundle.params.items()}
    for clique in graph.cliques:
        order = _check_permutation(perms[clique.name], clique.n, clique.name)
        for role in clique.members:
            w = arrays[role.param]
            if role.axis == "out":
                arrays[role.param] = w[order]
            elif w.ndim == 4:
                arrays[role.param] = w[:, order]
            else:
                g = role.group
                cols = w.reshape(w.shape[0], clique.n, g)
                arrays[role.param] = cols[:, order].reshape(w.shape)
        for bias in clique.biases:
            arrays[bias] = arrays[bias][order]
    return WeightBundle(bundle.config,
                        {k: Tensor(v) for k, v in arrays.items()},
                        {}, folded=True)


def tv_report(bundle: WeightBundle) -> list:
    """(name, tv_in, tv_out, tv_total) per weight tensor plus a TOTAL row.

    Column adjacency is taken at input-channel granularity (k x k slices
    and fc spatial groups move as units), matching the solver objective.
    Biases carry no TV term and are not reported.
    """
    rows = []
    tot_in = tot_out = 0.0
    for s in layer_table(bundle.config, folded=bundle.folded):
        name = f"{s.name}.weight"
        t_in, t_out = tensor_tv(bundle.params[name].data, group=s.group)
        rows.append((name, t_in, t_out, t_in + t_out))
        tot_in += t_in
        tot_out += t_out
    rows.append(("TOTAL", tot_in, tot_out, tot_in + tot_out))
    return rows


def bundle_total_tv(bundle: WeightBundle) -> float:
    return tv_report(bundle)[-1][3]

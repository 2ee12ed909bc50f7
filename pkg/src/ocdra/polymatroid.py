"""Polymatroid budget-additive valuations over small ground sets.

The value of ``x`` is the largest total mass of a point ``z <= x`` that lies in
the polymatroid of a monotone submodular rank ``r``.  By LP duality this equals

    min over S of  r(S) + sum(x_i for i not in S)

and everything here is computed from that min-form by enumerating all ``2**m``
subsets.  Subsets are encoded as bitmasks: element ``i`` is bit ``1 << i``.

The upward-gradient is the indicator of elements outside the *maximal*
minimizer (the union of all minimizers), which is the right-derivative of the
min-form.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .errors import GroundSetTooLarge, OutOfRange

MAX_GROUND = 20
_CHUNK = 1 << 14


def _as_mask(S: Iterable[int] | int, m: int | None = None) -> int:
    if isinstance(S, (int, np.integer)):
        mask = int(S)
        if mask < 0 or (m is not None and mask >> m):
            raise OutOfRange(f"bitmask {mask} outside ground set of size {m}")
        return mask
    mask = 0
    for i in S:
        i = int(i)
        if i < 0 or (m is not None and i >= m):
            raise OutOfRange(f"element {i} outside ground set of size {m}")
        mask |= 1 << i
    return mask


def _popcount(masks: np.ndarray) -> np.ndarray:
    masks = masks.astype(np.uint32)
    count = np.zeros(masks.shape, dtype=np.int64)
    for b in range(32):
        count += (masks >> np.uint32(b)) & np.uint32(1)
    return count


def _subset_sums(y: np.ndarray) -> np.ndarray:
    """y(S) for every bitmask S, built by doubling."""
    out = np.zeros(1 << y.size)
    for i, v in enumerate(y):
        out[1 << i:2 << i] = out[:1 << i] + v
    return out


def _member_matrix(masks: np.ndarray, m: int) -> np.ndarray:
    """Boolean (len(masks), m) matrix, True where element i is in the subset."""
    return ((masks[:, None] >> np.arange(m, dtype=np.int64)) & 1).astype(bool)


class RankOracle:
    """Monotone submodular set function with ``r(empty) == 0``."""

    #: ground-set size fixed by the oracle itself, or None if it works for any m
    m: int | None = None

    def rank(self, S: Iterable[int] | int) -> float:
        mask = _as_mask(S, self.m)
        return float(self._rank_masks(np.array([mask], dtype=np.int64))[0])

    def table(self, m: int) -> np.ndarray:
        """Ranks of all ``2**m`` subsets in bitmask order (cached, read-only)."""
        if m > MAX_GROUND:
            raise GroundSetTooLarge(f"ground set of size {m} exceeds {MAX_GROUND}")
        if self.m is not None and m > self.m:
            raise OutOfRange(f"oracle has ground set {self.m}, asked for {m}")
        cache = self.__dict__.setdefault("_tables", {})
        if m not in cache:
            t = self._rank_masks(np.arange(1 << m, dtype=np.int64))
            t = np.asarray(t, dtype=float)
            t.setflags(write=False)
            cache[m] = t
        return cache[m]

    def components(self, m: int) -> list[tuple[np.ndarray, "RankOracle"]]:
        """Split [m] into parts on which the rank is a direct sum.

        Each part comes with an oracle over local ids 0..len-1.  The min-form
        separates over the parts, so enumeration is per part.
        """
        return [(np.arange(m), self)]

    def _rank_masks(self, masks: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def to_json(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class CardinalityCap(RankOracle):
    k: float

    def __post_init__(self):
        if not self.k >= 0:
            raise ValueError("cardinality cap must be nonnegative")

    def _rank_masks(self, masks):
        return np.minimum(_popcount(masks), self.k).astype(float)

    def to_json(self):
        return {"kind": "cardinality_cap", "k": float(self.k)}


@dataclass(frozen=True)
class WeightedCoverage(RankOracle):
    """r(S) = total weight of universe items covered by the elements of S."""

    weights: tuple[float, ...]
    covers: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        object.__setattr__(self, "covers", tuple(tuple(int(u) for u in c) for c in self.covers))
        if any(w < 0 for w in self.weights):
            raise ValueError("coverage weights must be nonnegative")
        for c in self.covers:
            if any(u < 0 or u >= len(self.weights) for u in c):
                raise ValueError("coverage refers to an unknown universe item")

    @property
    def m(self):
        return len(self.covers)

    def _rank_masks(self, masks):
        n_items = len(self.weights)
        cover = np.zeros((self.m, n_items), dtype=bool)
        for i, c in enumerate(self.covers):
            cover[i, list(c)] = True
        w = np.asarray(self.weights)
        out = np.empty(len(masks))
        for lo in range(0, len(masks), _CHUNK):
            member = _member_matrix(masks[lo:lo + _CHUNK], self.m)
            covered = (member.astype(np.int64) @ cover.astype(np.int64)) > 0
            out[lo:lo + _CHUNK] = covered @ w
        return out

    def components(self, m):
        # elements that share no item, even through a chain, are independent
        m = min(m, self.m)
        n_items = len(self.weights)
        rows = [i for i in range(m) for _ in self.covers[i]]
        cols = [m + u for i in range(m) for u in self.covers[i]]
        graph = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(m + n_items,) * 2)
        _, label = connected_components(graph, directed=False)
        parts = []
        for lab in np.unique(label[:m]):
            ids = np.flatnonzero(label[:m] == lab)
            parts.append((ids, WeightedCoverage(self.weights, tuple(self.covers[i] for i in ids))))
        return parts

    def to_json(self):
        return {"kind": "coverage", "weights": list(self.weights),
                "covers": [list(c) for c in self.covers]}


@dataclass(frozen=True)
class ExplicitTable(RankOracle):
    m: int = field()
    values: tuple[float, ...]

    def __post_init__(self):
        if self.m > MAX_GROUND:
            raise GroundSetTooLarge(f"explicit table with m={self.m} exceeds {MAX_GROUND}")
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        if len(self.values) != 1 << self.m:
            raise ValueError(f"explicit table needs {1 << self.m} values, got {len(self.values)}")

    def _rank_masks(self, masks):
        if np.any(masks >> self.m):
            raise OutOfRange("subset outside ground set")
        return np.asarray(self.values)[masks]

    def to_json(self):
        return {"kind": "explicit", "m": self.m, "values": list(self.values)}


@dataclass(frozen=True)
class PartitionRank(RankOracle):
    """Scaled partition-matroid rank: scale * sum_b min(|S & block_b|, cap_b).

    Elements outside every block are loops (rank 0).
    """

    blocks: tuple[tuple[int, ...], ...]
    caps: tuple[float, ...]
    scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(tuple(int(i) for i in b) for b in self.blocks))
        object.__setattr__(self, "caps", tuple(float(c) for c in self.caps))
        if len(self.blocks) != len(self.caps):
            raise ValueError("partition rank needs one cap per block")
        seen = [i for b in self.blocks for i in b]
        if len(seen) != len(set(seen)) or any(i < 0 for i in seen):
            raise ValueError("partition blocks must be disjoint nonnegative ids")
        if any(c < 0 for c in self.caps) or self.scale < 0:
            raise ValueError("partition caps and scale must be nonnegative")

    def _rank_masks(self, masks):
        out = np.zeros(len(masks))
        for block, cap in zip(self.blocks, self.caps):
            bmask = _as_mask(block)
            out += np.minimum(_popcount(masks & bmask), cap)
        return self.scale * out

    def components(self, m):
        parts = []
        for block, cap in zip(self.blocks, self.caps):
            ids = np.array(sorted(i for i in block if i < m), dtype=np.int64)
            if ids.size:
                parts.append((ids, PartitionRank((tuple(range(ids.size)),), (cap,), self.scale)))
        inside = {i for b in self.blocks for i in b}
        parts += [(np.array([i]), PartitionRank((), ())) for i in range(m) if i not in inside]
        return parts

    def to_json(self):
        d = {"kind": "partition", "blocks": [list(b) for b in self.blocks], "caps": list(self.caps)}
        if self.scale != 1.0:
            d["scale"] = self.scale
        return d


def rank_from_json(d: dict) -> RankOracle:
    kind = d.get("kind")
    if kind == "cardinality_cap":
        return CardinalityCap(float(d["k"]))
    if kind == "explicit":
        return ExplicitTable(int(d["m"]), tuple(d["values"]))
    if kind == "partition":
        return PartitionRank(tuple(map(tuple, d["blocks"])), tuple(d["caps"]), float(d.get("scale", 1.0)))
    if kind == "coverage":
        return WeightedCoverage(tuple(d["weights"]), tuple(map(tuple, d["covers"])))
    raise ValueError(f"unknown rank oracle kind {kind!r}")


def rank(r: RankOracle, S: Iterable[int] | int) -> float:
    return r.rank(S)


def check_rank(r: RankOracle, m: int, tol: float = 1e-12) -> None:
    """Exhaustively verify normalization, monotonicity and submodularity on [m].

    Uses the local characterization: r(S + i) - r(S) is nonnegative and
    nonincreasing in S.
    """
    t = r.table(m)
    if abs(t[0]) > tol:
        raise ValueError(f"r(empty) = {t[0]} != 0")
    masks = np.arange(1 << m, dtype=np.int64)
    for i in range(m):
        bit = 1 << i
        without = masks[(masks & bit) == 0]
        gain = t[without | bit] - t[without]
        if gain.min() < -tol:
            S = int(without[np.argmin(gain)])
            raise ValueError(f"not monotone: adding {i} to mask {S} loses rank")
        for j in range(i + 1, m):
            bj = 1 << j
            base = without[(without & bj) == 0]
            g0 = t[base | bit] - t[base]
            g1 = t[base | bit | bj] - t[base | bj]
            if np.any(g1 > g0 + tol):
                S = int(base[np.argmax(g1 - g0)])
                raise ValueError(f"not submodular at mask {S}, elements {i},{j}")


def _check_x(X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    m = X.shape[1]
    if m > MAX_GROUND:
        raise GroundSetTooLarge(f"ground set of size {m} exceeds {MAX_GROUND}")
    return X


def _parts(r: RankOracle, m: int):
    cache = r.__dict__.setdefault("_parts", {})
    if m not in cache:
        cache[m] = [(ids, sub, _global_masks(ids)) for ids, sub in r.components(m)]
    return cache[m]


def _global_masks(ids: np.ndarray) -> np.ndarray:
    """Map every local bitmask over ``ids`` to the global bitmask."""
    out = np.zeros(1 << ids.size, dtype=np.int64)
    for i, g in enumerate(ids):
        out[1 << i:2 << i] = out[:1 << i] | (1 << int(g))
    return out


def _minform(r: RankOracle, X: np.ndarray, want_tight: bool):
    """Row-wise min of r(S) + X(~S) and, optionally, the union of minimizers."""
    parts = _parts(r, X.shape[1])
    if len(parts) > 1:
        best = np.zeros(X.shape[0])
        tight = np.zeros(X.shape[0], dtype=np.int64)
        for ids, sub, gmap in parts:
            b, t = _minform_enum(sub, X[:, ids], want_tight)
            best += b
            if want_tight:
                tight |= gmap[t]
        return best, (tight if want_tight else None)
    return _minform_enum(r, X, want_tight)


def _minform_enum(r: RankOracle, X: np.ndarray, want_tight: bool):
    K, m = X.shape
    table = r.table(m)
    n_sub = 1 << m
    masks = np.arange(n_sub, dtype=np.int64)
    best = np.empty(K)
    tight = np.zeros(K, dtype=np.int64)
    rows = max(1, _CHUNK * 16 // n_sub)
    for lo in range(0, K, rows):
        Xc = X[lo:lo + rows]
        # x(S) for every S by doubling; x(~S) is the same array reversed, and
        # being a plain sum (no subtraction) it keeps plateau values exact
        sums = np.zeros((Xc.shape[0], n_sub))
        for i in range(m):
            sums[:, 1 << i:2 << i] = sums[:, :1 << i] + Xc[:, i:i + 1]
        vals = table[None, :] + sums[:, ::-1]
        b = vals.min(axis=1)
        best[lo:lo + rows] = b
        if want_tight:
            hit = vals <= (b + 1e-12 * (1.0 + np.abs(b)))[:, None]
            tight[lo:lo + rows] = np.bitwise_or.reduce(np.where(hit, masks[None, :], 0), axis=1)
    return best, (tight if want_tight else None)


def pm_value_batch(r: RankOracle, X: np.ndarray) -> np.ndarray:
    X = _check_x(X)
    if X.shape[1] == 0:
        return np.zeros(X.shape[0])
    return _minform(r, X, False)[0]


def tight_set_batch(r: RankOracle, X: np.ndarray) -> np.ndarray:
    """Bitmask of the maximal minimizer for each row of X."""
    X = _check_x(X)
    if X.shape[1] == 0:
        return np.zeros(X.shape[0], dtype=np.int64)
    return _minform(r, X, True)[1]


def pm_grad_batch(r: RankOracle, X: np.ndarray) -> np.ndarray:
    X = _check_x(X)
    tight = tight_set_batch(r, X)
    return 1.0 - _member_matrix(tight, X.shape[1]).astype(float)


def pm_value(r: RankOracle, x: Sequence[float]) -> float:
    """max{sum(z) : 0 <= z <= x, z in P_r}, via the min-form."""
    return float(pm_value_batch(r, x)[0])


def tight_set(r: RankOracle, x: Sequence[float]) -> frozenset[int]:
    mask = int(tight_set_batch(r, x)[0])
    return frozenset(i for i in range(len(x)) if mask >> i & 1)


def pm_grad(r: RankOracle, x: Sequence[float]) -> np.ndarray:
    return pm_grad_batch(r, x)[0]


def lovasz(r: RankOracle, w: Sequence[float]) -> float:
    """Lovász extension: integral over t >= 0 of r({i : w_i >= t})."""
    w = np.asarray(w, dtype=float)
    if w.size == 0:
        return 0.0
    order = np.argsort(-w, kind="stable")
    ws = np.append(w[order], 0.0)
    total = 0.0
    mask = 0
    for k, i in enumerate(order):
        mask |= 1 << int(i)
        drop = ws[k] - ws[k + 1]
        if drop > 0:
            total += drop * r.rank(mask)
    return total


def ray_envelope(r: RankOracle, y: np.ndarray):
    """Piecewise-linear form of s -> pm_value(r, s*y) on s >= 0.

    The min-form along the ray is the lower envelope of the lines
    r(S) + s * y(~S).  Walking it from s = 0 gives pieces ``k`` starting at
    ``starts[k]`` on which the maximal minimizer is ``masks[k]`` and the
    value is ``table[masks[k]] + s * slopes[k]``.  There are at most m + 1
    pieces since the maximal minimizers grow strictly along the ray.
    """
    y = np.asarray(y, dtype=float)
    m = y.size
    if m > MAX_GROUND:
        raise GroundSetTooLarge(f"ground set of size {m} exceeds {MAX_GROUND}")
    parts = _parts(r, m)
    if len(parts) == 1:
        return _envelope_enum(r, y)
    # the envelope of a direct sum: merge the part breakpoints and add up
    envs = [(gmap, _envelope_enum(sub, y[ids])) for ids, sub, gmap in parts]
    starts = np.unique(np.concatenate([e[0] for _, e in envs]))
    masks = np.zeros(starts.size, dtype=np.int64)
    consts = np.zeros(starts.size)
    slopes = np.zeros(starts.size)
    for gmap, (st, mk, c, d) in envs:
        k = np.searchsorted(st, starts, side="right") - 1
        masks |= gmap[mk[k]]
        consts += c[k]
        slopes += d[k]
    return starts, masks, consts, slopes


def _envelope_enum(r: RankOracle, y: np.ndarray):
    m = y.size
    full_table = r.table(m)
    full_slopes = _subset_sums(y)[::-1]  # y(~S)
    # the maximal minimizers form a chain, so only supersets of the current
    # one stay candidates; the candidate set halves with every new element
    cand = np.arange(1 << m, dtype=np.int64)
    table, line_slopes = full_table, full_slopes
    starts, masks = [], []
    s = 0.0
    for _ in range(m + 2):
        vals = table + s * line_slopes
        vmin = vals.min()
        on = vals <= vmin + 1e-12 * (1.0 + abs(vmin))
        d_star = line_slopes[on].min()
        # minimizers on the open piece to the right of s: the lines that coincide there
        piece = on & (line_slopes <= d_star + 1e-12 * (1.0 + d_star))
        mask = int(np.bitwise_or.reduce(cand[piece]))
        starts.append(s)
        masks.append(mask)
        keep = (cand & mask) == mask
        cand, table, line_slopes = cand[keep], table[keep], line_slopes[keep]
        below = line_slopes < d_star - 1e-15 * (1.0 + d_star)
        if not np.any(below):
            break
        cross = (table[below] - full_table[mask]) / (full_slopes[mask] - line_slopes[below])
        s = max(float(cross.min()), np.nextafter(s, np.inf))
    masks = np.array(masks, dtype=np.int64)
    return np.array(starts), masks, full_table[masks], full_slopes[masks]


def ray_breakpoints(r: RankOracle, y: np.ndarray, s_lo: float, s_hi: float) -> np.ndarray:
    """Scales s in (s_lo, s_hi) where s -> pm_value(r, s*y) changes slope."""
    y = np.asarray(y, dtype=float)
    if y.size == 0 or not np.any(y > 0):
        return np.empty(0)
    starts = ray_envelope(r, y)[0][1:]
    return starts[(starts > s_lo) & (starts < s_hi)]

"""Block-sparse attention guided by pooled low-resolution attention.

The mechanism: partition the token sequence into N equal blocks, pool a
dense low-resolution attention matrix into an N x N block-affinity matrix,
and for each query block keep its neighborhood plus the top-K highest-
affinity blocks outside it. Attention is then evaluated only over kept
blocks, either by expanding the plan into an additive mask (reference) or
with the block kernel `sparse_attention` that never materializes the full
score matrix.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DegenerateRowError, ShapeError, ValidationError
from .numerics import as_array, avg_pool_matrix
from .rng import substream

NEG_INF = -np.inf

PLAN_KINDS = ("guided", "random", "local", "sliding", "global")


@dataclass(frozen=True)
class BlockPartition:
    """Assignment of each of `length` tokens to one of `n_blocks` blocks."""

    length: int
    n_blocks: int
    mode: str  # "contiguous" or "tile2d"
    block_of: np.ndarray = field(repr=False, compare=False)

    @property
    def block_size(self) -> int:
        return self.length // self.n_blocks

    def tokens_of(self, block: int) -> np.ndarray:
        return np.flatnonzero(self.block_of == block)


def partition(
    length: int,
    n_blocks: int,
    mode: str = "contiguous",
    grid: Optional[tuple[int, int]] = None,
    tile_grid: Optional[tuple[int, int]] = None,
) -> BlockPartition:
    """Split `length` row-major tokens into `n_blocks` equal blocks.

    contiguous: token l goes to block l // (length / n_blocks).
    tile2d: tokens live on `grid` (H, W) and blocks are the tiles of a
    `tile_grid` (bh, bw) decomposition with bh * bw == n_blocks.
    """
    if n_blocks < 1 or length % n_blocks != 0:
        raise ShapeError(f"{n_blocks} blocks do not divide length {length}")
    if mode == "contiguous":
        block_of = np.arange(length, dtype=np.int64) // (length // n_blocks)
    elif mode == "tile2d":
        if grid is None or tile_grid is None:
            raise ShapeError("tile2d mode needs grid and tile_grid")
        h, w = grid
        bh, bw = tile_grid
        if h * w != length or bh * bw != n_blocks:
            raise ShapeError("grid/tile_grid inconsistent with length/n_blocks")
        if h % bh != 0 or w % bw != 0:
            raise ShapeError(f"tile grid {tile_grid} does not divide grid {grid}")
        th, tw = h // bh, w // bw
        rows = np.arange(h)[:, None] // th
        cols = np.arange(w)[None, :] // tw
        block_of = (rows * bw + cols).reshape(-1).astype(np.int64)
    else:
        raise ShapeError(f"unknown partition mode {mode!r}")
    return BlockPartition(length=length, n_blocks=n_blocks, mode=mode, block_of=block_of)


@dataclass(frozen=True)
class SparsityPlan:
    """Per query block, the sorted set of key blocks that stay visible."""

    n_blocks: int
    radius: int
    k: int
    kept: tuple[tuple[int, ...], ...]
    provenance: str
    layer: Optional[int] = None
    head: Optional[int] = None

    def __post_init__(self):
        if len(self.kept) != self.n_blocks:
            raise ShapeError("kept must list one set per query block")
        for r, ks in enumerate(self.kept):
            if r not in ks:
                raise ValidationError(f"query block {r} does not keep itself")
            if list(ks) != sorted(set(ks)):
                raise ValidationError(f"kept set of block {r} not sorted/unique")
            if any(t < 0 or t >= self.n_blocks for t in ks):
                raise ValidationError(f"kept set of block {r} out of range")

    def kept_count(self) -> int:
        return sum(len(ks) for ks in self.kept)


def neighborhood(r: int, radius: int, n_blocks: int) -> list[int]:
    return list(range(max(0, r - radius), min(n_blocks, r + radius + 1)))


def block_affinity(a_low: np.ndarray, n_blocks: int) -> np.ndarray:
    """Pool a dense low-resolution attention matrix into N x N block means."""
    a_low = as_array(a_low)
    if a_low.ndim != 2 or a_low.shape[0] != a_low.shape[1]:
        raise ShapeError(f"expected a square attention matrix, got {a_low.shape}")
    size = a_low.shape[0]
    if size % n_blocks != 0:
        raise ShapeError(f"{n_blocks} blocks do not divide attention size {size}")
    return avg_pool_matrix(a_low, size // n_blocks)


def select_plan(
    b: np.ndarray,
    k: int,
    radius: int,
    provenance: str = "guided",
    layer: Optional[int] = None,
    head: Optional[int] = None,
) -> SparsityPlan:
    """Keep neighborhood blocks plus the top-k affinities outside it.

    Ties in the top-k are broken toward the lowest block index, which makes
    the plan a pure function of (b, k, radius).
    """
    b = as_array(b)
    if b.ndim != 2 or b.shape[0] != b.shape[1]:
        raise ShapeError(f"block affinity must be square, got {b.shape}")
    if k < 0 or radius < 0:
        raise ValidationError("k and radius must be non-negative")
    n = b.shape[0]
    kept = []
    for r in range(n):
        nb = neighborhood(r, radius, n)
        nb_set = set(nb)
        outside = [t for t in range(n) if t not in nb_set]
        outside.sort(key=lambda t: (-b[r, t], t))
        kept.append(tuple(sorted(nb_set | set(outside[:k]))))
    return SparsityPlan(
        n_blocks=n, radius=radius, k=k, kept=tuple(kept), provenance=provenance, layer=layer, head=head
    )


def variant_plan(
    kind: str,
    n_blocks: int,
    *,
    radius: int = 1,
    k: int = 3,
    window: int = 3,
    seed: Optional[int] = None,
    rng=None,
) -> SparsityPlan:
    """Ablation plan families: random, local, sliding, global.

    random: neighborhood plus k uniformly chosen non-neighbor blocks.
    local: neighborhood only. sliding: window of `window` blocks centered on
    the query block. global: random plan where additionally the first and
    last blocks are kept by everyone and attend to everything.
    """
    if kind == "local":
        kept = [tuple(neighborhood(r, radius, n_blocks)) for r in range(n_blocks)]
        return SparsityPlan(n_blocks, radius, 0, tuple(kept), "local")
    if kind == "sliding":
        if window < 1 or window % 2 == 0:
            raise ValidationError("sliding window must be odd and >= 1")
        half = window // 2
        kept = [tuple(neighborhood(r, half, n_blocks)) for r in range(n_blocks)]
        return SparsityPlan(n_blocks, half, 0, tuple(kept), "sliding")
    if kind in ("random", "global"):
        if rng is None:
            if seed is None:
                raise ValidationError(f"{kind} plans need a seed or rng")
            rng = substream(seed, f"variant-plan-{kind}")
        kept = []
        for r in range(n_blocks):
            nb = set(neighborhood(r, radius, n_blocks))
            outside = np.array([t for t in range(n_blocks) if t not in nb], dtype=np.int64)
            picks = rng.choice(outside, size=min(k, outside.size), replace=False) if outside.size else []
            kept.append(set(nb) | set(int(t) for t in picks))
        if kind == "global":
            for r in range(n_blocks):
                kept[r] |= {0, n_blocks - 1}
            kept[0] = set(range(n_blocks))
            kept[n_blocks - 1] = set(range(n_blocks))
        return SparsityPlan(n_blocks, radius, k, tuple(tuple(sorted(s)) for s in kept), kind)
    raise ValidationError(f"unknown plan kind {kind!r}")


def full_plan(n_blocks: int, provenance: str = "guided") -> SparsityPlan:
    """Degenerate plan keeping every block (reduces to dense attention)."""
    all_blocks = tuple(range(n_blocks))
    return SparsityPlan(n_blocks, 0, n_blocks, tuple(all_blocks for _ in range(n_blocks)), provenance)


def sparsity_ratio(plan: SparsityPlan) -> float:
    """Fraction of the block grid that stays visible: sum |kept(r)| / N^2."""
    return plan.kept_count() / float(plan.n_blocks**2)


def build_sparse_mask(plan: SparsityPlan, partition_q: BlockPartition, partition_k: BlockPartition) -> np.ndarray:
    """Expand a plan into an additive token-level mask (0 kept, -inf dropped)."""
    if partition_q.n_blocks != plan.n_blocks or partition_k.n_blocks != plan.n_blocks:
        raise ShapeError("partition block counts do not match plan")
    keep = np.zeros((plan.n_blocks, plan.n_blocks), dtype=bool)
    for r, ks in enumerate(plan.kept):
        keep[r, list(ks)] = True
    token_keep = keep[np.ix_(partition_q.block_of, partition_k.block_of)]
    mask = np.where(token_keep, 0.0, NEG_INF)
    return mask


@dataclass
class SparseAttentionResult:
    output: np.ndarray
    # one entry per query block: (query block id, kept block ids, key token
    # indices in gather order, local softmax weights rows x kept-width)
    block_weights: list
    score_flops: int
    peak_score_entries: int


def sparse_attention(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    plan: SparsityPlan,
    partition_q: BlockPartition,
    partition_k: BlockPartition,
    extra_mask: Optional[np.ndarray] = None,
) -> SparseAttentionResult:
    """Attention evaluated only over kept key blocks.

    Scores are computed per query block against the concatenation of its
    kept key blocks; the full L_q x L_k score matrix never exists. Matches
    dense attention under the expanded plan mask to float tolerance, and
    reports the exact score FLOPs spent (2 * d * sum_r |kept(r)| * (L/N)^2
    for equal block sizes).
    """
    q, k, v = as_array(q), as_array(k), as_array(v)
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ShapeError("q, k, v must be 2D")
    if q.shape[1] != k.shape[1]:
        raise ShapeError(f"q width {q.shape[1]} != k width {k.shape[1]}")
    if k.shape[0] != v.shape[0]:
        raise ShapeError("k and v row counts differ")
    if partition_q.length != q.shape[0] or partition_k.length != k.shape[0]:
        raise ShapeError("partitions do not match q/k lengths")
    if partition_q.n_blocks != plan.n_blocks or partition_k.n_blocks != plan.n_blocks:
        raise ShapeError("partition block counts do not match plan")
    if extra_mask is not None:
        extra_mask = as_array(extra_mask)
        if extra_mask.shape != (q.shape[0], k.shape[0]):
            raise ShapeError(f"extra mask shape {extra_mask.shape} != {(q.shape[0], k.shape[0])}")

    d = q.shape[1]
    inv_sqrt_d = 1.0 / np.sqrt(d)
    out = np.zeros((q.shape[0], v.shape[1]), dtype=np.float64)
    block_weights = []
    flops = 0
    peak = 0

    for r in range(plan.n_blocks):
        rows = partition_q.tokens_of(r)
        kept_ids = plan.kept[r]
        cols = np.concatenate([partition_k.tokens_of(t) for t in kept_ids])
        scores = (q[rows] @ k[cols].T) * inv_sqrt_d
        flops += 2 * rows.size * cols.size * d
        peak = max(peak, rows.size * cols.size)
        if extra_mask is not None:
            scores = scores + extra_mask[np.ix_(rows, cols)]
        rowmax = scores.max(axis=1, keepdims=True)
        dead = np.isneginf(rowmax)
        if dead.any():
            token = int(rows[int(np.argmax(dead.ravel()))])
            raise DegenerateRowError(
                f"query token {token} (block {r}) has no visible key under plan "
                f"(kept blocks {list(kept_ids)}) combined with the extra mask"
            )
        expd = np.exp(scores - rowmax)
        weights = expd / expd.sum(axis=1, keepdims=True)
        out[rows] = weights @ v[cols]
        block_weights.append((r, kept_ids, cols, weights))

    return SparseAttentionResult(output=out, block_weights=block_weights, score_flops=flops, peak_score_entries=peak)


def score_flops_plan(plan: SparsityPlan, length_q: int, length_k: int, d: int) -> int:
    """Exact score-FLOP count of the block kernel for equal-size blocks."""
    bq = length_q // plan.n_blocks
    bk = length_k // plan.n_blocks
    return 2 * d * plan.kept_count() * bq * bk


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def plan_to_dict(plan: SparsityPlan) -> dict:
    return {
        "layer": plan.layer,
        "head": plan.head,
        "N": plan.n_blocks,
        "radius": plan.radius,
        "k": plan.k,
        "kept": [list(ks) for ks in plan.kept],
        "provenance": plan.provenance,
    }


def plan_from_dict(obj: dict) -> SparsityPlan:
    return SparsityPlan(
        n_blocks=int(obj["N"]),
        radius=int(obj["radius"]),
        k=int(obj["k"]),
        kept=tuple(tuple(int(t) for t in ks) for ks in obj["kept"]),
        provenance=str(obj["provenance"]),
        layer=obj.get("layer"),
        head=obj.get("head"),
    )


def plan_to_json(plan: SparsityPlan) -> str:
    return json.dumps(plan_to_dict(plan), sort_keys=True)


def plan_from_json(text: str) -> SparsityPlan:
    return plan_from_dict(json.loads(text))

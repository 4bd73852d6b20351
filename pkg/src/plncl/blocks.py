"""Species block designs for composite likelihood.

A design is a collection of size-k species subsets ("blocks") such that every
pair of distinct species shares at least one block; that is what makes every
entry of the latent covariance estimable.  Designs are built once by a greedy
stochastic construction and frozen for the whole fit.

Also houses the embedding of block-local matrices and packed parameter
vectors into their full-dimensional counterparts (zeros outside the block).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import comb, ceil

import numpy as np

from .params_vector import n_params, tril_index


@dataclass(frozen=True)
class BlockDesign:
    """Blocks of species indices (0-based, each sorted) with positive weights.

    ``pair_cover[j, l]`` counts blocks containing both ``j`` and ``l`` (the
    diagonal counts blocks containing ``j``); ``membership[j]`` lists the
    blocks containing species ``j``.  Pair coverage and the block-count
    bounds are enforced for ``k >= 2``; singleton designs (``k = 1``) are
    accepted for diagnostics only.
    """

    n_species: int
    blocks: tuple
    weights: np.ndarray = None
    pair_cover: np.ndarray = field(init=False, repr=False)
    membership: tuple = field(init=False, repr=False)

    def __post_init__(self):
        p = self.n_species
        blocks = tuple(tuple(sorted(int(j) for j in blk)) for blk in self.blocks)
        if not blocks:
            raise ValueError("design has no blocks")
        k = len(blocks[0])
        for blk in blocks:
            if len(set(blk)) != len(blk):
                raise ValueError(f"block {blk} has repeated species")
            if len(blk) != k:
                raise ValueError("all blocks must have the same size")
            if blk[0] < 0 or blk[-1] >= p:
                raise ValueError(f"block {blk} out of range for p={p}")
        if len(set(blocks)) != len(blocks):
            raise ValueError("design contains duplicate blocks")
        weights = self.weights
        if weights is None:
            weights = np.ones(len(blocks))
        weights = np.asarray(weights, dtype=float)
        if weights.shape != (len(blocks),) or np.any(weights <= 0):
            raise ValueError("weights must be positive, one per block")
        cover = np.zeros((p, p), dtype=int)
        membership = [[] for _ in range(p)]
        for b, blk in enumerate(blocks):
            idx = np.array(blk)
            cover[np.ix_(idx, idx)] += 1
            for j in blk:
                membership[j].append(b)
        if k >= 2:
            off = cover[~np.eye(p, dtype=bool)]
            if np.any(off < 1):
                j, l = np.argwhere((cover == 0) & ~np.eye(p, dtype=bool))[0]
                raise ValueError(f"species pair ({j}, {l}) is covered by no block")
            lower = ceil(p * (p - 1) / (k * (k - 1)))
            if not lower <= len(blocks) <= comb(p, k):
                raise ValueError(
                    f"block count {len(blocks)} outside [{lower}, {comb(p, k)}]"
                )
        else:
            if any(len(m) == 0 for m in membership):
                raise ValueError("every species must belong to at least one block")
        object.__setattr__(self, "blocks", blocks)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "pair_cover", cover)
        object.__setattr__(self, "membership", tuple(tuple(m) for m in membership))

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    @property
    def block_size(self) -> int:
        return len(self.blocks[0])

    def block_array(self, b: int) -> np.ndarray:
        return np.asarray(self.blocks[b], dtype=int)


def count_bounds(p: int, k: int) -> tuple[int, int]:
    """(lower, upper) bounds on the number of blocks needed to cover all pairs."""
    return ceil(p * (p - 1) / (k * (k - 1))), comb(p, k)


def _grow_design(p: int, k: int, rng: np.random.Generator) -> list[tuple[int, ...]]:
    uncovered = ~np.eye(p, dtype=bool)
    n_uncovered = p * (p - 1) // 2
    blocks = []
    while n_uncovered > 0:
        seeds = np.argwhere(np.triu(uncovered, 1))
        j0, l0 = seeds[rng.integers(len(seeds))]
        block = [int(j0), int(l0)]
        in_block = np.zeros(p, dtype=bool)
        in_block[block] = True
        while len(block) < k:
            gain = uncovered[:, block].sum(axis=1)
            gain[in_block] = -1
            best = gain.max()
            candidates = np.flatnonzero(gain == best)
            s = int(candidates[rng.integers(len(candidates))])
            block.append(s)
            in_block[s] = True
        idx = np.array(sorted(block))
        newly = np.triu(uncovered[np.ix_(idx, idx)], 1)
        n_uncovered -= int(newly.sum())
        uncovered[np.ix_(idx, idx)] = False
        blocks.append(tuple(idx.tolist()))
    return blocks


def _prune(blocks: list[tuple[int, ...]], p: int) -> list[tuple[int, ...]]:
    cover = np.zeros((p, p), dtype=int)
    for blk in blocks:
        idx = np.array(blk)
        cover[np.ix_(idx, idx)] += 1
    kept = []
    for blk in blocks:
        idx = np.array(blk)
        sub = cover[np.ix_(idx, idx)]
        off_diag = sub[~np.eye(len(idx), dtype=bool)]
        if len(idx) >= 2 and np.all(off_diag >= 2):
            cover[np.ix_(idx, idx)] -= 1
        else:
            kept.append(blk)
    return kept


def build_block_design(
    p: int, k: int, rng: np.random.Generator = None, max_restarts: int = 20
) -> BlockDesign:
    """Greedy stochastic covering design; best of ``max_restarts`` attempts.

    Each block starts from a uniformly random uncovered pair and grows by the
    species covering the most still-uncovered pairs with current members
    (ties broken uniformly at random).  A pruning pass then drops blocks
    whose pairs are all covered elsewhere.  All block weights are 1.
    """
    if k < 2 or k > p:
        raise ValueError(f"block size must satisfy 2 <= k <= p, got k={k}, p={p}")
    if rng is None:
        rng = np.random.default_rng()
    best = None
    for _ in range(max_restarts):
        blocks = _prune(_grow_design(p, k, rng), p)
        if best is None or len(blocks) < len(best):
            best = blocks
        if len(best) == count_bounds(p, k)[0]:
            break
    return BlockDesign(n_species=p, blocks=tuple(sorted(best)))


def singleton_design(p: int) -> BlockDesign:
    """One block per species; only marginal terms, diagnostics only."""
    return BlockDesign(n_species=p, blocks=tuple((j,) for j in range(p)))


def full_design(p: int) -> BlockDesign:
    """The single block holding every species (composite = full likelihood)."""
    return BlockDesign(n_species=p, blocks=(tuple(range(p)),))


# ---------------------------------------------------------------------------
# Serialization: '# k=<k> p=<p> lambda=1' header, then 1-based blocks.
# ---------------------------------------------------------------------------

def format_blocks(design: BlockDesign) -> str:
    lines = [f"# k={design.block_size} p={design.n_species} lambda=1"]
    for blk in design.blocks:
        lines.append(" ".join(str(j + 1) for j in blk))
    return "\n".join(lines) + "\n"


def parse_blocks(text: str) -> BlockDesign:
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("#"):
        raise ValueError("blocks file must start with a '# k=<k> p=<p> lambda=1' header")
    header = dict(
        item.split("=", 1) for item in lines[0].lstrip("#").split() if "=" in item
    )
    try:
        k, p = int(header["k"]), int(header["p"])
    except (KeyError, ValueError):
        raise ValueError(f"malformed blocks header: {lines[0]!r}") from None
    blocks = []
    for ln in lines[1:]:
        members = [int(tok) - 1 for tok in ln.split()]
        if len(members) != k:
            raise ValueError(f"block line {ln!r} does not have {k} members")
        blocks.append(tuple(members))
    return BlockDesign(n_species=p, blocks=tuple(blocks))


def save_blocks(design: BlockDesign, path) -> None:
    with open(path, "w") as fh:
        fh.write(format_blocks(design))


def load_blocks(path) -> BlockDesign:
    with open(path) as fh:
        return parse_blocks(fh.read())


# ---------------------------------------------------------------------------
# Embeddings (zeros outside the block).
# ---------------------------------------------------------------------------

def embed_matrix(block, small: np.ndarray, p: int) -> np.ndarray:
    idx = np.asarray(block, dtype=int)
    small = np.asarray(small, dtype=float)
    if small.shape != (idx.size, idx.size):
        raise ValueError(f"matrix shape {small.shape} does not match block size {idx.size}")
    if idx.min() < 0 or idx.max() >= p:
        raise ValueError(f"block {list(block)} out of range for p={p}")
    out = np.zeros((p, p))
    out[np.ix_(idx, idx)] = small
    return out


def extract_matrix(block, big: np.ndarray) -> np.ndarray:
    idx = np.asarray(block, dtype=int)
    return np.asarray(big)[np.ix_(idx, idx)]


def block_param_positions(block, p: int, d: int) -> np.ndarray:
    """Global packed-vector positions of a block's parameters, in local order."""
    blk = [int(j) for j in block]
    if blk != sorted(blk):
        raise ValueError("block must be sorted ascending")
    positions = []
    for j in blk:
        positions.extend(range(j * d, (j + 1) * d))
    base = d * p
    for a, j in enumerate(blk):
        for b in range(a + 1):
            positions.append(base + tril_index(j, blk[b]))
    return np.asarray(positions, dtype=int)


def embed_param_vector(block, small_vec: np.ndarray, p: int, d: int) -> np.ndarray:
    small_vec = np.asarray(small_vec, dtype=float)
    positions = block_param_positions(block, p, d)
    if small_vec.shape != positions.shape:
        raise ValueError(
            f"vector length {small_vec.size} does not match block parameter "
            f"count {positions.size}"
        )
    out = np.zeros(n_params(d, p))
    out[positions] = small_vec
    return out


def extract_param_vector(block, full_vec: np.ndarray, p: int, d: int) -> np.ndarray:
    return np.asarray(full_vec)[block_param_positions(block, p, d)]

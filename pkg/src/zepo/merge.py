"""Token merging for consistency features.

Halves a feature sequence before attention control: one seeded
destination per 2x2 patch of the token grid, then the most similar
remaining tokens are absorbed into their best destination by cosine
similarity. Merging is one-way; nothing in the pipeline ever un-merges.

All functions are pure and maps are immutable, so concurrent use is safe.
"""

from __future__ import annotations

from dataclasses import dataclass
from types import MappingProxyType
from typing import Mapping

import numpy as np

_NORM_FLOOR = 1e-12  # cosine guard for zero vectors


@dataclass(frozen=True)
class MergeMap:
    """Assignment of merged source tokens to per-patch destinations.

    ``sizes`` counts, per destination, the absorbed tokens including the
    destination itself. Tokens absent from both ``dst_indices`` and
    ``src_assignment`` pass through untouched.
    """

    num_tokens: int
    dst_indices: tuple[int, ...]
    src_assignment: Mapping[int, int]  # merged source index -> destination index
    sizes: Mapping[int, int]  # destination index -> group size

    @property
    def merged_count(self) -> int:
        return len(self.src_assignment)

    @property
    def output_length(self) -> int:
        return self.num_tokens - self.merged_count

    def kept_indices(self) -> np.ndarray:
        """Surviving token indices in original order."""
        dropped = set(self.src_assignment)
        return np.array([i for i in range(self.num_tokens) if i not in dropped])


def build_merge_map(
    seq: np.ndarray, grid: tuple[int, int], ratio: float, seed: int
) -> MergeMap:
    """Pick destinations and assign the most similar sources to them.

    ``seq`` is (B, N, D) with tokens in row-major ``grid`` order;
    similarities are computed on batch element 0. ``ratio`` of the N
    tokens (rounded) are merged; destinations occupy N/4 slots, so at
    most 3N/4 can merge.
    """
    seq = np.asarray(seq, dtype=float)
    if seq.ndim != 3:
        raise ValueError(f"expected (B, N, D) sequence, got shape {seq.shape}")
    h, w = grid
    n = seq.shape[1]
    if h * w != n:
        raise ValueError(f"grid {grid} does not tile {n} tokens")
    if h % 2 or w % 2:
        raise ValueError(f"grid dims must be even for 2x2 patches, got {grid}")
    if not (0.0 < ratio <= 0.75):
        raise ValueError(f"ratio must be in (0, 0.75], got {ratio}")

    rng = np.random.default_rng(seed)
    dst = []
    for pi in range(h // 2):
        for pj in range(w // 2):
            corners = [
                (2 * pi) * w + 2 * pj,
                (2 * pi) * w + 2 * pj + 1,
                (2 * pi + 1) * w + 2 * pj,
                (2 * pi + 1) * w + 2 * pj + 1,
            ]
            dst.append(corners[rng.integers(0, 4)])
    dst = sorted(dst)
    dst_set = set(dst)
    src = [i for i in range(n) if i not in dst_set]

    r = round(ratio * n)
    if r > len(src):
        raise ValueError(f"cannot merge {r} of {len(src)} source tokens")

    x = seq[0]
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    unit = x / np.maximum(norms, _NORM_FLOOR)
    sims = unit[src] @ unit[dst].T  # (n_src, n_dst), dst columns index-ordered

    best_col = sims.argmax(axis=1)  # ties fall to the lower destination index
    best_sim = sims[np.arange(len(src)), best_col]
    order = np.argsort(-best_sim, kind="stable")  # ties fall to the lower source index
    merged_rows = order[:r]

    assignment = {src[row]: dst[best_col[row]] for row in merged_rows}
    sizes = {d: 1 for d in dst}
    for d in assignment.values():
        sizes[d] += 1

    return MergeMap(
        num_tokens=n,
        dst_indices=tuple(dst),
        src_assignment=MappingProxyType(dict(sorted(assignment.items()))),
        sizes=MappingProxyType(sizes),
    )


def apply_merge(
    seq: np.ndarray,
    merge_map: MergeMap,
    token_sizes: np.ndarray | None = None,
    weighted: bool = True,
) -> np.ndarray:
    """Collapse each destination group to its mean, dropping absorbed tokens.

    Output keeps original token order, length N - r. ``token_sizes``
    (length N) supplies prior group sizes for chained merges; with
    ``weighted`` off, or with unit sizes, every group member counts
    equally.
    """
    seq = np.asarray(seq, dtype=float)
    if seq.ndim != 3:
        raise ValueError(f"expected (B, N, D) sequence, got shape {seq.shape}")
    n = seq.shape[1]
    if n != merge_map.num_tokens:
        raise ValueError(
            f"stale merge map: built for {merge_map.num_tokens} tokens, got {n}"
        )
    if token_sizes is None or not weighted:
        weights = np.ones(n)
    else:
        weights = np.asarray(token_sizes, dtype=float)
        if weights.shape != (n,):
            raise ValueError(f"token_sizes must have shape ({n},)")

    acc = seq * weights[None, :, None]
    wsum = weights.copy()
    for s, d in merge_map.src_assignment.items():
        acc[:, d] += acc[:, s]
        wsum[d] += wsum[s]

    kept = merge_map.kept_indices()
    return acc[:, kept] / wsum[None, kept, None]

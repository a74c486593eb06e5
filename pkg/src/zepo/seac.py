"""Style-enhancement attention control.

Target queries attend over the concatenation of source and reference
consistency features mapped through the site's own key/value
projections, with the reference keys scaled by a style coefficient
before the softmax. Scaling keys (rather than the attention weights)
means reference-column logits scale exactly with the coefficient while
source columns are untouched, which is what lets the softmax trade
attention mass between content and style adaptively.

With merging on at ratio 0.5, each bank half shrinks to N/2 tokens, so
the concatenated key/value length is back to N and the attention
products cost exactly what plain self-attention does at the same site.
Merging off doubles the key/value length (a documented non-parity mode).
Queries are never merged, so the output keeps length N.

Processors built here are immutable closures over an immutable bank;
they are safe to share across concurrent runs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .backbone import (
    AttentionProcessor,
    AttentionSite,
    AttentionWeights,
    attention_product,
)
from .features import FeatureBank
from .merge import apply_merge, build_merge_map


def stage_selector(*stages: str) -> Callable[[AttentionSite], bool]:
    """Predicate matching attention sites by stage name."""

    def selector(site: AttentionSite) -> bool:
        return site.stage in stages

    selector.description = ",".join(stages)  # type: ignore[attr-defined]
    return selector


def default_layer_selector(site: AttentionSite) -> bool:
    return site.stage in ("mid", "up")


default_layer_selector.description = "mid,up"  # type: ignore[attr-defined]


@dataclass(frozen=True)
class SeacConfig:
    """Knobs for the attention-control stage.

    ``style_coef`` multiplies the reference keys before the softmax;
    larger values shift attention mass toward reference values.
    """

    style_coef: float = 1.2
    merge_enabled: bool = True
    merge_ratio: float = 0.5
    layer_selector: Callable[[AttentionSite], bool] = default_layer_selector
    merge_seed: int = 0

    def __post_init__(self) -> None:
        if self.style_coef <= 0:
            raise ValueError(f"style_coef must be > 0, got {self.style_coef}")
        if not (0.0 < self.merge_ratio <= 0.75):
            raise ValueError(f"merge_ratio must be in (0, 0.75], got {self.merge_ratio}")

    def selector_description(self) -> str:
        return getattr(
            self.layer_selector, "description", getattr(self.layer_selector, "__name__", "custom")
        )


def seac_attention(
    q_tgt: np.ndarray,
    f_src: np.ndarray,
    f_ref: np.ndarray,
    proj: AttentionWeights,
    cfg: SeacConfig,
    *,
    site: AttentionSite | None = None,
    trace=None,
) -> np.ndarray:
    """Attend target queries over concatenated source/reference features.

    ``f_src`` and ``f_ref`` are pre-projection sequences of equal length
    (already merged when merging is on); ``q_tgt`` is the site's
    projected query. Keys and values come from projecting the bank
    features through the site's own w_k / w_v.
    """
    q_tgt = np.asarray(q_tgt, dtype=float)
    f_src = np.asarray(f_src, dtype=float)
    f_ref = np.asarray(f_ref, dtype=float)
    if f_src.shape[1] != f_ref.shape[1]:
        raise ValueError(
            f"merged bank lengths differ: {f_src.shape[1]} vs {f_ref.shape[1]}"
        )
    if f_src.shape[2] != proj.w_k.shape[0] or f_ref.shape[2] != proj.w_k.shape[0]:
        raise ValueError(
            f"feature dim {f_src.shape[2]} does not match projection "
            f"dim {proj.w_k.shape[0]}"
        )
    if q_tgt.shape[2] != proj.w_k.shape[1]:
        raise ValueError(
            f"query dim {q_tgt.shape[2]} does not match projected key "
            f"dim {proj.w_k.shape[1]}"
        )

    k = np.concatenate([f_src @ proj.w_k, cfg.style_coef * (f_ref @ proj.w_k)], axis=1)
    v = np.concatenate([f_src @ proj.w_v, f_ref @ proj.w_v], axis=1)
    return attention_product(q_tgt, k, v, site=site, trace=trace, label="seac")


def make_seac_processor(bank: FeatureBank, cfg: SeacConfig) -> AttentionProcessor:
    """Build the attention processor for one run from a frozen bank.

    Per-site merge maps are built once here (the bank never changes
    between steps, so neither do the maps). At sites the selector does
    not match, the processor falls back to plain self-attention.
    """
    matched = [site for site in bank.sites if cfg.layer_selector(site)]
    if not matched:
        raise ValueError("layer selector matches no attention site in the bank")
    missing = [s.layer_id for s in matched if s.layer_id not in bank.features]
    if missing:
        raise ValueError(f"bank is missing selected layers: {missing}")

    prepared: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    for idx, site in enumerate(bank.sites):
        if not cfg.layer_selector(site):
            continue
        f_src, f_ref = bank.features[site.layer_id]
        if cfg.merge_enabled:
            grid = (site.resolution, site.resolution)
            seeds = np.random.SeedSequence([cfg.merge_seed, idx]).generate_state(2)
            m_src = build_merge_map(f_src, grid, cfg.merge_ratio, int(seeds[0]))
            m_ref = build_merge_map(f_ref, grid, cfg.merge_ratio, int(seeds[1]))
            f_src = apply_merge(f_src, m_src)
            f_ref = apply_merge(f_ref, m_ref)
        prepared[site.layer_id] = (f_src, f_ref)

    def processor(site, q, k, v, ctx):
        pair = prepared.get(site.layer_id)
        if pair is None:
            return attention_product(q, k, v, site=site, trace=ctx.trace, label="plain")
        return seac_attention(
            q, pair[0], pair[1], ctx.weights, cfg, site=site, trace=ctx.trace
        )

    processor.label = "seac"  # type: ignore[attr-defined]
    return processor

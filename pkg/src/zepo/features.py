"""Consistency-feature extraction from lightly noised latents.

Stage one of the pipeline: noise the source and reference latents once
at a small timestep, run a single backbone evaluation per image, and
keep the pre-projection hidden sequence entering every self-attention
site. The resulting bank is immutable and independent of whatever
sampling plan consumes it later, so it is extracted exactly once per
run and shared freely.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from types import MappingProxyType
from typing import Callable, Mapping

import numpy as np

from .backbone import AttentionSite, ConditionSpec, NoisePredictor
from .schedule import DiffusionSchedule, forward_noise
from .util import array_hash, freeze_array

TAU_ZERO_DIAGNOSTIC = (
    "tau=0 is degenerate: at t=0 the consistency combine returns its input "
    "unchanged, so the network never learned to process un-noised latents and "
    "cannot extract features from them; use tau >= 1 (default 99)"
)


@dataclass(frozen=True)
class FeatureBank:
    """Per-site (source, reference) feature pairs, frozen after extraction."""

    tau: int
    sites: tuple[AttentionSite, ...]
    features: Mapping[str, tuple[np.ndarray, np.ndarray]]  # layer_id -> (f_src, f_ref)
    source_hash: str
    ref_hash: str

    @property
    def layer_ids(self) -> tuple[str, ...]:
        return tuple(site.layer_id for site in self.sites)

    def site(self, layer_id: str) -> AttentionSite:
        for s in self.sites:
            if s.layer_id == layer_id:
                return s
        raise KeyError(layer_id)

    def content_hash(self) -> str:
        parts = [str(self.tau), self.source_hash, self.ref_hash]
        for layer_id in sorted(self.features):
            f_src, f_ref = self.features[layer_id]
            parts += [layer_id, array_hash(f_src), array_hash(f_ref)]
        return array_hash(np.frombuffer("|".join(parts).encode(), dtype=np.uint8))


def extract_consistency_features(
    net: NoisePredictor,
    z_src: np.ndarray,
    z_ref: np.ndarray,
    tau: int,
    cond: ConditionSpec,
    schedule: DiffusionSchedule,
    seed: int,
    share_noise: bool = False,
    trace=None,
) -> FeatureBank:
    """Noise both latents at ``tau`` and capture per-site hidden sequences.

    Source and reference get independent noise draws from one seeded
    stream by default; ``share_noise`` reuses a single draw for both,
    which makes identical inputs yield identical feature pairs.
    Extraction is a single conditional pass per image (no guided
    combination). ``tau`` = 0 is rejected with ``TAU_ZERO_DIAGNOSTIC``.
    """
    if tau == 0:
        raise ValueError(TAU_ZERO_DIAGNOSTIC)
    if not 1 <= tau <= schedule.num_train_steps - 1:
        raise ValueError(
            f"tau must be in [1, {schedule.num_train_steps - 1}], got {tau}"
        )
    z_src = np.asarray(z_src, dtype=float)
    z_ref = np.asarray(z_ref, dtype=float)
    if z_src.shape != z_ref.shape:
        raise ValueError(
            f"source/reference latent shapes differ: {z_src.shape} vs {z_ref.shape}"
        )

    rng = np.random.default_rng(seed)
    eps_src = rng.standard_normal(z_src.shape)
    eps_ref = eps_src if share_noise else rng.standard_normal(z_ref.shape)

    taps_src: dict[str, np.ndarray] = {}
    taps_ref: dict[str, np.ndarray] = {}
    net.predict(
        forward_noise(z_src, tau, eps_src, schedule), tau, cond, taps=taps_src, trace=trace
    )
    net.predict(
        forward_noise(z_ref, tau, eps_ref, schedule), tau, cond, taps=taps_ref, trace=trace
    )

    site_ids = {s.layer_id for s in net.layers}
    if set(taps_src) != site_ids or set(taps_ref) != site_ids:
        raise RuntimeError(
            f"backbone taps {sorted(taps_src)} do not cover its declared "
            f"sites {sorted(site_ids)}"
        )
    for taps in (taps_src, taps_ref):
        for layer_id, seq in taps.items():
            if not np.all(np.isfinite(seq)):
                raise ValueError(f"non-finite features tapped at {layer_id}")

    features = {
        layer_id: (freeze_array(taps_src[layer_id]), freeze_array(taps_ref[layer_id]))
        for layer_id in site_ids
    }
    return FeatureBank(
        tau=tau,
        sites=tuple(net.layers),
        features=MappingProxyType(features),
        source_hash=array_hash(z_src),
        ref_hash=array_hash(z_ref),
    )


def probe_x0_prediction(
    net: NoisePredictor,
    z0: np.ndarray,
    t: int,
    schedule: DiffusionSchedule,
    mode: str = "forward",
    *,
    cond: ConditionSpec | None = None,
    seed: int = 0,
    inversion_provider: Callable[[np.ndarray, int], np.ndarray] | None = None,
) -> np.ndarray:
    """One-step clean-latent estimate after noising z0 at level t.

    ``forward`` mode applies the closed-form forward noising with a
    seeded draw; ``inversion_stub`` delegates the noising to an external
    provider (none ships in-repo) for side-by-side comparisons. Returns
    the raw estimate (z_t - sqrt(1 - ab_t) * eps_hat) / sqrt(ab_t).
    """
    if t < 1:
        raise ValueError(f"probe needs t >= 1, got {t}")
    schedule.validate_timestep(t)
    z0 = np.asarray(z0, dtype=float)

    if mode == "forward":
        eps = np.random.default_rng(seed).standard_normal(z0.shape)
        zt = forward_noise(z0, t, eps, schedule)
    elif mode == "inversion_stub":
        if inversion_provider is None:
            raise ValueError(
                "inversion_stub mode needs a registered inversion provider; "
                "none ships in-repo"
            )
        zt = np.asarray(inversion_provider(z0, t), dtype=float)
    else:
        raise ValueError(f"unknown probe mode {mode!r}")

    eps_hat = net.predict(zt, t, cond or ConditionSpec())
    ab = schedule.alpha_bar[t]
    return (zt - math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(ab)


def dump_feature_bank(bank: FeatureBank, directory: str) -> str:
    """Write one array container per layer plus a sidecar index.

    Returns the index path. Layout: ``<layer_id>.npz`` holding f_src and
    f_ref, and ``index.json`` listing (layer_id, tokens, dim, tau,
    hashes) for offline inspection.
    """
    os.makedirs(directory, exist_ok=True)
    entries = []
    for site in bank.sites:
        f_src, f_ref = bank.features[site.layer_id]
        fname = f"{site.layer_id}.npz"
        np.savez(os.path.join(directory, fname), f_src=f_src, f_ref=f_ref)
        entries.append(
            {
                "layer_id": site.layer_id,
                "file": fname,
                "tokens": int(f_src.shape[1]),
                "dim": int(f_src.shape[2]),
                "src_hash": array_hash(f_src),
                "ref_hash": array_hash(f_ref),
            }
        )
    index = {
        "tau": bank.tau,
        "source_hash": bank.source_hash,
        "ref_hash": bank.ref_hash,
        "bank_hash": bank.content_hash(),
        "layers": entries,
    }
    index_path = os.path.join(directory, "index.json")
    with open(index_path, "w") as fh:
        json.dump(index, fh, indent=2, sort_keys=True)
    return index_path

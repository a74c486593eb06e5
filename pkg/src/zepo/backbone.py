"""Noise-prediction backbone interface and the deterministic toy network.

A backbone maps a noisy latent (B, C, H, W) plus a timestep and a text
condition to a noise estimate of the same shape, and exposes its
self-attention sites so callers can tap hidden sequences or reroute the
attention computation through a processor. The toy backbone is a small
fixed-weight encoder/bottleneck/decoder used for desk-scale runs and
tests; real pretrained networks plug in behind the same interface (see
the adapter contract in the README). No weight files ship in-repo.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Mapping, Protocol, runtime_checkable

import numpy as np

from .util import text_hash

Stage = str  # "down" | "mid" | "up"


@dataclass(frozen=True)
class AttentionSite:
    """Descriptor of one self-attention location inside a backbone."""

    layer_id: str
    resolution: int  # token grid side length; token count is resolution**2
    feature_dim: int
    stage: Stage

    @property
    def token_count(self) -> int:
        return self.resolution * self.resolution


@dataclass(frozen=True)
class ConditionSpec:
    """Text condition plus guidance scale."""

    prompt: str = "head"
    guidance_scale: float = 2.0
    uncond_prompt: str = ""

    def __post_init__(self) -> None:
        if self.guidance_scale < 0:
            raise ValueError(f"guidance_scale must be >= 0, got {self.guidance_scale}")


@dataclass(frozen=True)
class AttentionWeights:
    """Per-site projection matrices, each (feature_dim, feature_dim)."""

    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray


@dataclass
class SiteCall:
    """One attention evaluation, recorded for instrumentation.

    ``macs`` counts the two attention products (logits and weighted
    values) exactly from the participating shapes; projection costs are
    excluded so baselines and rerouted sites compare like for like.
    """

    layer_id: str
    stage: Stage
    n_q: int
    n_kv: int
    dim_qk: int
    dim_v: int
    macs: int
    label: str | None = None  # None for the built-in path


class CallTrace:
    """Accumulates SiteCall records across backbone evaluations."""

    def __init__(self) -> None:
        self.calls: list[SiteCall] = []

    def add(self, call: SiteCall) -> None:
        self.calls.append(call)

    def macs_by_site(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for c in self.calls:
            out[c.layer_id] = out.get(c.layer_id, 0) + c.macs
        return out

    def total_macs(self) -> int:
        return sum(c.macs for c in self.calls)


@dataclass
class ProcessorContext:
    """Extras handed to an attention processor alongside q/k/v.

    ``hidden`` is the pre-projection token sequence entering the site,
    which is also what feature extraction stores; ``weights`` are the
    site's own projections so a processor can map foreign features into
    this site's key/value space.
    """

    hidden: np.ndarray  # (B, N, D)
    weights: AttentionWeights
    timestep: int
    trace: CallTrace | None = None


AttentionProcessor = Callable[
    [AttentionSite, np.ndarray, np.ndarray, np.ndarray, ProcessorContext], np.ndarray
]


def attention_weights(q: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Row-stochastic softmax(q k^T / sqrt(d)) map, shape (B, Nq, Nkv)."""
    d = q.shape[-1]
    logits = q @ k.swapaxes(-1, -2) / math.sqrt(d)
    logits = logits - logits.max(axis=-1, keepdims=True)
    w = np.exp(logits)
    return w / w.sum(axis=-1, keepdims=True)


def attention_product(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    *,
    site: AttentionSite | None = None,
    trace: CallTrace | None = None,
    label: str | None = None,
) -> np.ndarray:
    """softmax(q k^T / sqrt(d)) v, recording exact product MACs."""
    out = attention_weights(q, k) @ v
    if trace is not None and site is not None:
        n_q, n_kv = q.shape[1], k.shape[1]
        dim_qk, dim_v = q.shape[2], v.shape[2]
        macs = n_q * n_kv * dim_qk + n_q * n_kv * dim_v
        trace.add(
            SiteCall(
                layer_id=site.layer_id,
                stage=site.stage,
                n_q=n_q,
                n_kv=n_kv,
                dim_qk=dim_qk,
                dim_v=dim_v,
                macs=macs,
                label=label,
            )
        )
    return out


@runtime_checkable
class NoisePredictor(Protocol):
    """Backbone contract used by the pipeline.

    Implementations must keep ``layers`` stable across calls and return
    predictions with the input latent's shape. ``processors`` reroutes
    matched sites; ``taps`` (a dict) receives each site's pre-projection
    hidden sequence; ``trace`` accumulates attention instrumentation.
    ``guidance_embedded`` marks distilled models whose guidance is baked
    in, so the guided-combination wrapper skips the second evaluation.
    """

    layers: tuple[AttentionSite, ...]
    guidance_embedded: bool

    def predict(
        self,
        z: np.ndarray,
        t: int,
        cond: ConditionSpec,
        *,
        processors: Mapping[str, AttentionProcessor] | None = None,
        taps: dict[str, np.ndarray] | None = None,
        trace: CallTrace | None = None,
    ) -> np.ndarray: ...


# ---------------------------------------------------------------------------
# toy backbone
# ---------------------------------------------------------------------------


def _sinusoid_embedding(t: int, prompt: str, guidance: float, n_freq: int = 4) -> np.ndarray:
    # fixed featurization of (timestep, prompt hash angle, guidance scale)
    angle = 2.0 * math.pi * (text_hash(prompt) % 8192) / 8192.0
    feats = []
    for value in (float(t), angle, float(guidance)):
        for k in range(n_freq):
            f = value / (10.0**k)
            feats.append(math.sin(f))
            feats.append(math.cos(f))
    return np.array(feats)


def _conv3x3(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    # x (B, C, H, W), w (Cout, C, 3, 3) -> (B, Cout, H, W), zero padding
    bs, c, h, wd = x.shape
    cout = w.shape[0]
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    patches = np.empty((bs, c, 3, 3, h, wd))
    for dy in range(3):
        for dx in range(3):
            patches[:, :, dy, dx] = xp[:, :, dy : dy + h, dx : dx + wd]
    cols = patches.reshape(bs, c * 9, h * wd)
    out = np.matmul(w.reshape(cout, c * 9), cols) + b[:, None]
    return out.reshape(bs, cout, h, wd)


def _pool2(x: np.ndarray) -> np.ndarray:
    b, c, h, w = x.shape
    return x.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))


def _upsample2(x: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(x, 2, axis=2), 2, axis=3)


class ToyBackbone:
    """Fixed-weight encoder/bottleneck/decoder with two attention sites.

    Weights are derived deterministically from ``seed``; there is no
    training anywhere. The bottleneck hosts a self-attention site on the
    (latent_size/4) grid and the decoder another on the (latent_size/2)
    grid, so multi-scale feature paths get exercised. Conditioning
    enters each stage as a fixed projection of a sinusoidal embedding of
    (timestep, prompt hash, guidance scale).
    """

    guidance_embedded = False

    def __init__(
        self,
        latent_channels: int = 4,
        base_width: int = 16,
        seed: int = 0,
        latent_size: int = 16,
    ) -> None:
        if base_width < 8:
            raise ValueError(f"base_width must be >= 8, got {base_width}")
        if latent_size % 8 != 0:
            raise ValueError(
                f"latent_size must be a multiple of 8 (two pooling stages over "
                f"even attention grids), got {latent_size}"
            )
        self.latent_channels = latent_channels
        self.base_width = base_width
        self.seed = seed
        self.latent_size = latent_size

        w = base_width
        c = latent_channels
        emb_dim = _sinusoid_embedding(0, "", 0.0).shape[0]
        rng = np.random.default_rng(seed)

        def dense(shape, fan_in):
            return rng.standard_normal(shape) / math.sqrt(fan_in)

        self._conv1 = (dense((w, c, 3, 3), c * 9), np.zeros(w))
        self._conv2 = (dense((2 * w, w, 3, 3), w * 9), np.zeros(2 * w))
        self._conv3 = (dense((2 * w, 2 * w, 3, 3), 2 * w * 9), np.zeros(2 * w))
        self._conv4 = (dense((w, 2 * w, 3, 3), 2 * w * 9), np.zeros(w))
        self._out = (dense((c, w, 3, 3), w * 9), np.zeros(c))
        self._emb = {
            "stage1": dense((w, emb_dim), emb_dim),
            "stage2": dense((2 * w, emb_dim), emb_dim),
            "stage3": dense((2 * w, emb_dim), emb_dim),
            "stage4": dense((w, emb_dim), emb_dim),
        }

        self.layers: tuple[AttentionSite, ...] = (
            AttentionSite("mid.attn0", latent_size // 4, 2 * w, "mid"),
            AttentionSite("up.attn0", latent_size // 2, w, "up"),
        )
        self._site_weights = {
            site.layer_id: AttentionWeights(
                w_q=dense((site.feature_dim, site.feature_dim), site.feature_dim),
                w_k=dense((site.feature_dim, site.feature_dim), site.feature_dim),
                w_v=dense((site.feature_dim, site.feature_dim), site.feature_dim),
                w_o=dense((site.feature_dim, site.feature_dim), site.feature_dim),
            )
            for site in self.layers
        }

    def site_weights(self, layer_id: str) -> AttentionWeights:
        return self._site_weights[layer_id]

    def _attend(
        self,
        site: AttentionSite,
        x: np.ndarray,
        t: int,
        processors: Mapping[str, AttentionProcessor] | None,
        taps: dict[str, np.ndarray] | None,
        trace: CallTrace | None,
    ) -> np.ndarray:
        b, c, h, w = x.shape
        hidden = x.reshape(b, c, h * w).transpose(0, 2, 1)  # (B, N, D)
        if taps is not None:
            taps[site.layer_id] = hidden.copy()
        weights = self._site_weights[site.layer_id]
        q = hidden @ weights.w_q
        k = hidden @ weights.w_k
        v = hidden @ weights.w_v
        proc = (processors or {}).get(site.layer_id)
        if proc is not None:
            ctx = ProcessorContext(hidden=hidden, weights=weights, timestep=t, trace=trace)
            attended = proc(site, q, k, v, ctx)
            if attended.shape[:2] != q.shape[:2]:
                raise ValueError(
                    f"processor at {site.layer_id} changed sequence shape: "
                    f"{attended.shape} vs query {q.shape}"
                )
        else:
            attended = attention_product(q, k, v, site=site, trace=trace)
        y = attended @ weights.w_o
        return x + y.transpose(0, 2, 1).reshape(b, c, h, w)

    def predict(
        self,
        z: np.ndarray,
        t: int,
        cond: ConditionSpec,
        *,
        processors: Mapping[str, AttentionProcessor] | None = None,
        taps: dict[str, np.ndarray] | None = None,
        trace: CallTrace | None = None,
    ) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        s = self.latent_size
        if z.ndim != 4 or z.shape[1] != self.latent_channels or z.shape[2:] != (s, s):
            raise ValueError(
                f"expected latent (B, {self.latent_channels}, {s}, {s}), got {z.shape}"
            )
        emb = _sinusoid_embedding(t, cond.prompt, cond.guidance_scale)

        def stage(x, conv, emb_key):
            wgt, bias = conv
            x = _conv3x3(x, wgt, bias)
            x = np.tanh(x + (self._emb[emb_key] @ emb)[None, :, None, None])
            return x

        x = stage(z, self._conv1, "stage1")
        x = _pool2(x)
        x = stage(x, self._conv2, "stage2")
        x = _pool2(x)
        x = self._attend(self.layers[0], x, t, processors, taps, trace)
        x = stage(x, self._conv3, "stage3")
        x = _upsample2(x)
        x = stage(x, self._conv4, "stage4")
        x = self._attend(self.layers[1], x, t, processors, taps, trace)
        x = _upsample2(x)
        return _conv3x3(x, *self._out)


def toy_backbone(
    latent_channels: int = 4,
    base_width: int = 16,
    seed: int = 0,
    latent_size: int = 16,
) -> ToyBackbone:
    """Build the deterministic desk-scale backbone."""
    return ToyBackbone(latent_channels, base_width, seed, latent_size)


class OracleNoisePredictor:
    """Test double that returns the exactly injected noise.

    Given the clean latent it was built around, it inverts the forward
    noising in closed form, so clean-latent recovery is exact up to
    float arithmetic. The wrapped backbone still runs so attention
    sites, taps, processors, and traces behave like the real thing.
    """

    guidance_embedded = False

    def __init__(self, inner: ToyBackbone, z0: np.ndarray, schedule) -> None:
        self.inner = inner
        self.z0 = np.asarray(z0, dtype=float)
        self.schedule = schedule
        self.layers = inner.layers

    def site_weights(self, layer_id: str) -> AttentionWeights:
        return self.inner.site_weights(layer_id)

    def predict(self, z, t, cond, *, processors=None, taps=None, trace=None):
        self.inner.predict(z, t, cond, processors=processors, taps=taps, trace=trace)
        ab = self.schedule.alpha_bar[t]
        return (np.asarray(z, dtype=float) - math.sqrt(ab) * self.z0) / math.sqrt(
            1.0 - ab
        )


def oracle_backbone(z0: np.ndarray, schedule, inner: ToyBackbone | None = None) -> OracleNoisePredictor:
    """Wrap a toy backbone so predictions equal the injected noise for z0."""
    if inner is None:
        z0 = np.asarray(z0, dtype=float)
        inner = ToyBackbone(latent_channels=z0.shape[1], latent_size=z0.shape[2])
    return OracleNoisePredictor(inner, z0, schedule)


# ---------------------------------------------------------------------------
# processor registration
# ---------------------------------------------------------------------------


class ProcessorView:
    """Read-only view of a backbone with processors routed at some sites.

    Construction never mutates the base network, so dropping the view
    (or calling the base directly) restores baseline behavior exactly.
    """

    def __init__(self, base, processors: dict[str, AttentionProcessor]) -> None:
        self.base = base
        self.layers = base.layers
        self.guidance_embedded = base.guidance_embedded
        self.processors = dict(getattr(base, "processors", {}))
        self.processors.update(processors)

    def site_weights(self, layer_id: str) -> AttentionWeights:
        return self.base.site_weights(layer_id)

    def predict(self, z, t, cond, *, processors=None, taps=None, trace=None):
        merged = dict(self.processors)
        if processors:
            merged.update(processors)
        inner = self.base
        while isinstance(inner, ProcessorView):
            inner = inner.base
        return inner.predict(z, t, cond, processors=merged, taps=taps, trace=trace)


def register_processor(
    net,
    selector: Callable[[AttentionSite], bool],
    proc: AttentionProcessor,
) -> ProcessorView:
    """Route q/k/v of every selected site through ``proc``.

    Returns a view; the original network is untouched. Raises if the
    selector matches no site.
    """
    matched = [site for site in net.layers if selector(site)]
    if not matched:
        raise ValueError("layer selector matched no attention site")
    return ProcessorView(net, {site.layer_id: proc for site in matched})


def plain_processor() -> AttentionProcessor:
    """Processor that reproduces the built-in attention path."""

    def proc(site, q, k, v, ctx):
        return attention_product(q, k, v, site=site, trace=ctx.trace, label="plain")

    return proc


def predict_with_cfg(
    net,
    zt: np.ndarray,
    t: int,
    cond: ConditionSpec,
    *,
    taps: dict[str, np.ndarray] | None = None,
    trace: CallTrace | None = None,
) -> np.ndarray:
    """Guided noise prediction: eps_u + s * (eps_c - eps_u).

    Guidance scales 0 and 1 need only a single network evaluation, as do
    backbones that declare guidance baked in (the scale is passed
    through inside the condition).
    """
    s = cond.guidance_scale
    if net.guidance_embedded or s == 1.0:
        return net.predict(zt, t, cond, taps=taps, trace=trace)
    uncond = replace(cond, prompt=cond.uncond_prompt)
    if s == 0.0:
        return net.predict(zt, t, uncond, taps=taps, trace=trace)
    eps_c = net.predict(zt, t, cond, taps=taps, trace=trace)
    eps_u = net.predict(zt, t, uncond, trace=trace)
    return eps_u + s * (eps_c - eps_u)

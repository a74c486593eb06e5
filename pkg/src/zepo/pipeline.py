"""End-to-end stylization: extraction stage plus the re-noise/predict loop.

One run encodes both images, extracts the feature bank once, then walks
a short strictly-decreasing timestep plan. Each step draws fresh noise,
re-noises according to the configured mode, runs the fused attention
prediction under guidance, and updates the clean-latent estimate through
the consistency combine. Every run produces a ``RunRecord`` capturing
config, seed, per-step timings, exact attention MAC counts, and content
hashes; the record's hash excludes wall-clock times so identical runs
hash identically.

One stylize call is sequential; concurrent calls are fine when the
backbone and codec are thread safe (the toy pair is). Each call owns its
seed streams and its record.
"""

from __future__ import annotations

import math
import platform
import time
from dataclasses import asdict, dataclass, field
from typing import Literal

import numpy as np

from . import __version__
from .backbone import CallTrace, ConditionSpec, NoisePredictor, predict_with_cfg, register_processor
from .codec import ImageBuffer, LatentCodec
from .features import extract_consistency_features
from .schedule import (
    DEFAULT_SIGMA_DATA,
    DEFAULT_TIMESTEP_SCALE,
    DiffusionSchedule,
    consistency_boundary,
    forward_noise,
    plan_timesteps,
)
from .seac import SeacConfig, make_seac_processor
from .util import array_hash, canonical_json, json_hash

RenoiseMode = Literal["source", "target"]


@dataclass(frozen=True)
class PipelineConfig:
    """Everything one stylization run needs beyond the schedule and nets."""

    steps: int = 4
    tau: int = 99
    seac: SeacConfig = field(default_factory=SeacConfig)
    cond: ConditionSpec = field(default_factory=ConditionSpec)
    strength: float = 1.0
    renoise_mode: RenoiseMode = "source"
    seed: int = 0
    seac_enabled: bool = True
    sigma_data: float = DEFAULT_SIGMA_DATA
    timestep_scale: float = DEFAULT_TIMESTEP_SCALE
    share_extraction_noise: bool = False

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.tau < 1:
            raise ValueError(f"tau must be >= 1, got {self.tau}")
        if not (0.0 < self.strength <= 1.0):
            raise ValueError(f"strength must be in (0, 1], got {self.strength}")
        if self.renoise_mode not in ("source", "target"):
            raise ValueError(f"renoise_mode must be source|target, got {self.renoise_mode}")

    def snapshot(self) -> dict:
        """JSON-ready view of the config, selector reduced to a label."""
        return {
            "steps": self.steps,
            "tau": self.tau,
            "strength": self.strength,
            "renoise_mode": self.renoise_mode,
            "seed": self.seed,
            "seac_enabled": self.seac_enabled,
            "sigma_data": self.sigma_data,
            "timestep_scale": self.timestep_scale,
            "share_extraction_noise": self.share_extraction_noise,
            "seac": {
                "style_coef": self.seac.style_coef,
                "merge_enabled": self.seac.merge_enabled,
                "merge_ratio": self.seac.merge_ratio,
                "merge_seed": self.seac.merge_seed,
                "layers": self.seac.selector_description(),
            },
            "cond": asdict(self.cond),
        }


@dataclass
class ExtractionRecord:
    tau: int
    seconds: float
    site_macs: dict[str, int]
    bank_hash: str


@dataclass
class StepRecord:
    index: int
    timestep: int
    seconds: float
    site_macs: dict[str, int]
    latent_hash: str


@dataclass
class RunRecord:
    """Full provenance of one stylization run."""

    config: dict
    seed: int
    timestep_plan: list[int]
    extraction: ExtractionRecord | None = None
    steps: list[StepRecord] = field(default_factory=list)
    content_image_hash: str = ""
    style_image_hash: str = ""
    output_image_hash: str = ""
    library_ids: dict = field(default_factory=dict)

    def total_attention_macs(self) -> int:
        total = 0
        if self.extraction is not None:
            total += sum(self.extraction.site_macs.values())
        for step in self.steps:
            total += sum(step.site_macs.values())
        return total

    def _payload(self, with_timings: bool) -> dict:
        doc = {
            "config": self.config,
            "seed": self.seed,
            "timestep_plan": list(self.timestep_plan),
            "content_image_hash": self.content_image_hash,
            "style_image_hash": self.style_image_hash,
            "output_image_hash": self.output_image_hash,
            "library_ids": self.library_ids,
            "total_attention_macs": self.total_attention_macs(),
            "extraction": None,
            "steps": [],
        }
        if self.extraction is not None:
            doc["extraction"] = {
                "tau": self.extraction.tau,
                "site_macs": self.extraction.site_macs,
                "bank_hash": self.extraction.bank_hash,
            }
            if with_timings:
                doc["extraction"]["seconds"] = self.extraction.seconds
        for step in self.steps:
            entry = {
                "index": step.index,
                "timestep": step.timestep,
                "site_macs": step.site_macs,
                "latent_hash": step.latent_hash,
            }
            if with_timings:
                entry["seconds"] = step.seconds
            doc["steps"].append(entry)
        return doc

    def content_hash(self) -> str:
        """Deterministic digest: everything except wall-clock timings."""
        return json_hash(self._payload(with_timings=False))

    def to_json(self) -> str:
        doc = self._payload(with_timings=True)
        doc["record_hash"] = self.content_hash()
        return canonical_json(doc)


class StylizeError(RuntimeError):
    """Pipeline failure carrying whatever record was built so far."""

    def __init__(self, message: str, record: RunRecord):
        super().__init__(message)
        self.record = record


def _library_ids() -> dict:
    return {
        "package": __version__,
        "numpy": np.__version__,
        "python": platform.python_version(),
    }


def estimate_x0(
    zt: np.ndarray, t: int, eps_pred: np.ndarray, schedule: DiffusionSchedule
) -> np.ndarray:
    """Invert the forward map: (zt - sqrt(1 - ab_t) * eps) / sqrt(ab_t)."""
    schedule.validate_timestep(t)
    zt = np.asarray(zt, dtype=float)
    eps_pred = np.asarray(eps_pred, dtype=float)
    if zt.shape != eps_pred.shape:
        raise ValueError(f"shape mismatch: zt {zt.shape} vs eps_pred {eps_pred.shape}")
    ab = schedule.alpha_bar[t]
    return (zt - math.sqrt(1.0 - ab) * eps_pred) / math.sqrt(ab)


def predict_x0(
    zt: np.ndarray,
    t: int,
    eps_pred: np.ndarray,
    schedule: DiffusionSchedule,
    sigma_data: float = DEFAULT_SIGMA_DATA,
    timestep_scale: float = DEFAULT_TIMESTEP_SCALE,
) -> np.ndarray:
    """Consistency combine of the raw estimate with the current latent.

    Returns c_skip(t) * zt + c_out(t) * estimate; at t=0 that is the
    input, bit for bit.
    """
    c_skip, c_out = consistency_boundary(t, sigma_data, timestep_scale)
    if c_out == 0.0:
        return np.array(zt, dtype=float, copy=True)
    x0 = estimate_x0(zt, t, eps_pred, schedule)
    return c_skip * np.asarray(zt, dtype=float) + c_out * x0


def stylize(
    net: NoisePredictor,
    codec: LatentCodec,
    content: ImageBuffer,
    style: ImageBuffer,
    cfg: PipelineConfig,
    schedule: DiffusionSchedule,
) -> tuple[ImageBuffer, RunRecord]:
    """Run the full stylization and return the image with its record.

    Raises :class:`StylizeError` carrying the partial record if any
    stage fails.
    """
    record = RunRecord(
        config=cfg.snapshot(),
        seed=cfg.seed,
        timestep_plan=[],
        library_ids=_library_ids(),
    )
    try:
        for image, name in ((content, "content"), (style, "style")):
            h, w, _ = image.pixels.shape
            if h % codec.scale_factor or w % codec.scale_factor:
                raise ValueError(
                    f"{name} image {h}x{w} is not divisible by codec "
                    f"scale factor {codec.scale_factor}; preprocess first"
                )
        record.content_image_hash = array_hash(content.pixels)
        record.style_image_hash = array_hash(style.pixels)

        z0_src = codec.encode(content.pixels)
        z0_ref = codec.encode(style.pixels)

        plan = plan_timesteps(cfg.steps, cfg.strength, schedule)
        record.timestep_plan = list(plan.steps)

        t_start = time.perf_counter()
        extraction_trace = CallTrace()
        bank = extract_consistency_features(
            net,
            z0_src,
            z0_ref,
            cfg.tau,
            cfg.cond,
            schedule,
            seed=cfg.seed,
            share_noise=cfg.share_extraction_noise,
            trace=extraction_trace,
        )
        record.extraction = ExtractionRecord(
            tau=cfg.tau,
            seconds=time.perf_counter() - t_start,
            site_macs=extraction_trace.macs_by_site(),
            bank_hash=bank.content_hash(),
        )

        if cfg.seac_enabled:
            proc = make_seac_processor(bank, cfg.seac)
            gen_net = register_processor(net, cfg.seac.layer_selector, proc)
        else:
            gen_net = net

        rng_loop = np.random.default_rng([cfg.seed, 1])
        z0_tgt = z0_src
        for index, t in enumerate(plan.steps):
            t_step = time.perf_counter()
            step_trace = CallTrace()
            eps = rng_loop.standard_normal(z0_src.shape)
            base = z0_src if cfg.renoise_mode == "source" else z0_tgt
            zt = forward_noise(base, t, eps, schedule)
            eps_tgt = predict_with_cfg(gen_net, zt, t, cfg.cond, trace=step_trace)
            z0_tgt = predict_x0(
                zt, t, eps_tgt, schedule, cfg.sigma_data, cfg.timestep_scale
            )
            record.steps.append(
                StepRecord(
                    index=index,
                    timestep=t,
                    seconds=time.perf_counter() - t_step,
                    site_macs=step_trace.macs_by_site(),
                    latent_hash=array_hash(z0_tgt),
                )
            )

        pixels = np.clip(codec.decode(z0_tgt), 0.0, 1.0)
        output = ImageBuffer(pixels=pixels, source_path=None, original_size=None)
        record.output_image_hash = array_hash(output.pixels)
        return output, record
    except StylizeError:
        raise
    except Exception as err:
        raise StylizeError(str(err), record) from err

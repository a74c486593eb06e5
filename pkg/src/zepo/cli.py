"""Command-line front end: stylize, probe, and bench subcommands.

Configuration is a flat key=value document (``#`` comments allowed);
command-line flags override file values, which override built-in
defaults. Unknown keys are rejected. The seed falls back to the
``ZEPO_SEED`` environment variable when neither a flag nor the file
sets it.

Exit codes: 0 success, 1 pipeline or assertion failure, 2 configuration
error.
"""

from __future__ import annotations

import argparse
import os
import sys
import time

import numpy as np

from .backbone import ConditionSpec, toy_backbone
from .bench import check_directions, default_grid, format_summary, matrix_to_csv, run_bench
from .codec import ImageBuffer, identity_codec, preprocess_image, read_png, write_png
from .features import dump_feature_bank, extract_consistency_features, probe_x0_prediction
from .pipeline import PipelineConfig, StylizeError, stylize
from .schedule import build_schedule
from .seac import SeacConfig, stage_selector

ENV_SEED = "ZEPO_SEED"

# Default image size per codec kind: the toy identity codec runs the
# full pipeline in seconds on one CPU core at 64; adapter codecs target
# the standard 512 working resolution.
TOY_IMAGE_SIZE = 64
ADAPTER_IMAGE_SIZE = 512


class ConfigError(ValueError):
    pass


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("on", "true", "1", "yes"):
        return True
    if low in ("off", "false", "0", "no"):
        return False
    raise ConfigError(f"expected on/off boolean, got {text!r}")


def _parse_stages(text: str) -> str:
    valid = {"down", "mid", "up"}
    if text.strip() == "all":
        return "all"
    stages = [s.strip() for s in text.split(",") if s.strip()]
    unknown = [s for s in stages if s not in valid]
    if unknown or not stages:
        raise ConfigError(f"layers must be 'all' or comma-set of down/mid/up, got {text!r}")
    return ",".join(stages)


# key -> (default, parser, help)
CONFIG_KEYS = {
    "steps": (4, int, "sampling steps T"),
    "tau": (99, int, "feature-extraction timestep"),
    "lambda": (1.2, float, "style enhancement coefficient"),
    "guidance": (2.0, float, "guidance scale s"),
    "prompt": ("head", str, "conditional text prompt"),
    "uncond_prompt": ("", str, "unconditional prompt"),
    "strength": (1.0, float, "largest-timestep fraction in (0, 1]"),
    "renoise_mode": ("source", str, "source (literal) or target re-noising"),
    "seac": (True, _parse_bool, "attention control on/off"),
    "merge": (True, _parse_bool, "feature merging on/off"),
    "merge_ratio": (0.5, float, "fraction of tokens merged"),
    "merge_seed": (0, int, "seed for merge destination picks"),
    "layers": ("mid,up", _parse_stages, "attention-control stages or 'all'"),
    "seed": (0, int, f"run seed (falls back to ${ENV_SEED})"),
    "size": (None, int, "square image size; default 64 toy / 512 adapter"),
    "backbone": ("toy", str, "noise-prediction backbone (toy)"),
    "codec": ("identity", str, "latent codec (identity)"),
    "base_width": (16, int, "toy backbone channel width"),
    "latent_channels": (4, int, "latent channel count"),
    "num_train_steps": (1000, int, "training timestep count"),
    "beta_start": (0.00085, float, "schedule beta lower bound"),
    "beta_end": (0.012, float, "schedule beta upper bound"),
    "sigma_data": (0.5, float, "consistency boundary data scale"),
    "timestep_scale": (10.0, float, "consistency boundary timestep scale"),
}


def parse_config_file(path: str) -> dict:
    values = {}
    try:
        with open(path) as fh:
            lines = fh.readlines()
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err
    for lineno, raw in enumerate(lines, 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in CONFIG_KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        _, parser, _ = CONFIG_KEYS[key]
        try:
            values[key] = parser(value.strip())
        except (ValueError, ConfigError) as err:
            raise ConfigError(f"{path}:{lineno}: bad value for {key}: {err}") from err
    return values


def resolve_config(args: argparse.Namespace) -> dict:
    """defaults < config file < explicit flags, with the env seed fallback."""
    values = {key: default for key, (default, _, _) in CONFIG_KEYS.items()}
    env_seed = os.environ.get(ENV_SEED)
    if env_seed is not None:
        try:
            values["seed"] = int(env_seed)
        except ValueError as err:
            raise ConfigError(f"${ENV_SEED} must be an integer, got {env_seed!r}") from err

    config_path = getattr(args, "config", None)
    if config_path:
        values.update(parse_config_file(config_path))

    flag_map = {
        "steps": "steps",
        "tau": "tau",
        "style_lambda": "lambda",
        "guidance": "guidance",
        "prompt": "prompt",
        "strength": "strength",
        "renoise_mode": "renoise_mode",
        "merge_ratio": "merge_ratio",
        "seed": "seed",
        "size": "size",
        "layers": "layers",
    }
    for attr, key in flag_map.items():
        value = getattr(args, attr, None)
        if value is not None:
            _, parser, _ = CONFIG_KEYS[key]
            values[key] = parser(value) if isinstance(value, str) else value
    if getattr(args, "no_merge", False):
        values["merge"] = False
    if getattr(args, "no_seac", False):
        values["seac"] = False

    if values["backbone"] != "toy":
        raise ConfigError(
            f"backbone {values['backbone']!r} is not shipped; pretrained networks "
            f"plug in through the library adapter interface"
        )
    if values["codec"] != "identity":
        raise ConfigError(
            f"codec {values['codec']!r} is not shipped; autoencoders plug in "
            f"through the library adapter interface"
        )
    if values["size"] is None:
        values["size"] = TOY_IMAGE_SIZE if values["codec"] == "identity" else ADAPTER_IMAGE_SIZE
    if values["size"] % 8:
        raise ConfigError(f"size must be a multiple of 8, got {values['size']}")
    return values


def _build_components(values: dict):
    schedule = build_schedule(
        values["num_train_steps"], values["beta_start"], values["beta_end"]
    )
    codec = identity_codec(values["latent_channels"])
    net = toy_backbone(
        latent_channels=values["latent_channels"],
        base_width=values["base_width"],
        seed=values["seed"],
        latent_size=values["size"] // codec.scale_factor,
    )
    selector = (
        (lambda site: True)
        if values["layers"] == "all"
        else stage_selector(*values["layers"].split(","))
    )
    if values["layers"] == "all":
        selector.description = "all"
    pipeline_cfg = PipelineConfig(
        steps=values["steps"],
        tau=values["tau"],
        seac=SeacConfig(
            style_coef=values["lambda"],
            merge_enabled=values["merge"],
            merge_ratio=values["merge_ratio"],
            layer_selector=selector,
            merge_seed=values["merge_seed"],
        ),
        cond=ConditionSpec(
            prompt=values["prompt"],
            guidance_scale=values["guidance"],
            uncond_prompt=values["uncond_prompt"],
        ),
        strength=values["strength"],
        renoise_mode=values["renoise_mode"],
        seed=values["seed"],
        seac_enabled=values["seac"],
        sigma_data=values["sigma_data"],
        timestep_scale=values["timestep_scale"],
    )
    return schedule, codec, net, pipeline_cfg


def _record_path(out_path: str) -> str:
    base = out_path[:-4] if out_path.lower().endswith(".png") else out_path
    return base + ".record.json"


def cmd_stylize(args: argparse.Namespace) -> int:
    try:
        values = resolve_config(args)
        schedule, codec, net, cfg = _build_components(values)
        content = preprocess_image(read_png(args.content), values["size"])
        style = preprocess_image(read_png(args.style), values["size"])
    except (ConfigError, ValueError, OSError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2

    try:
        t0 = time.perf_counter()
        output, record = stylize(net, codec, content, style, cfg, schedule)
        elapsed = time.perf_counter() - t0
        write_png(args.out, output, text={"run-record-hash": record.content_hash()})
        with open(_record_path(args.out), "w") as fh:
            fh.write(record.to_json())
        if args.dump_features:
            z_src = codec.encode(content.pixels)
            z_ref = codec.encode(style.pixels)
            bank = extract_consistency_features(
                net, z_src, z_ref, cfg.tau, cfg.cond, schedule, seed=cfg.seed,
                share_noise=cfg.share_extraction_noise,
            )
            dump_feature_bank(bank, args.dump_features)
    except StylizeError as err:
        print(f"pipeline error: {err}", file=sys.stderr)
        return 1
    print(
        f"steps={cfg.steps} lambda={cfg.seac.style_coef} tau={cfg.tau} "
        f"seconds={elapsed:.3f}"
    )
    return 0


def cmd_probe(args: argparse.Namespace) -> int:
    try:
        values = resolve_config(args)
        timesteps = [int(s) for s in args.timesteps.split(",") if s.strip()]
        if not timesteps:
            raise ConfigError("need at least one timestep")
        bad = [t for t in timesteps if not 0 <= t < values["num_train_steps"]]
        if bad:
            raise ConfigError(
                f"timesteps outside [0, {values['num_train_steps'] - 1}]: {bad}"
            )
        schedule, codec, net, cfg = _build_components(values)
        image = preprocess_image(read_png(args.image), values["size"])
    except (ConfigError, ValueError, OSError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2

    try:
        z0 = codec.encode(image.pixels)
        rows = []
        tiles = []
        for t in timesteps:
            if t == 0:
                rows.append((t, float("nan"), "degenerate"))
                continue
            z0_hat = probe_x0_prediction(
                net, z0, t, schedule, cond=cfg.cond, seed=cfg.seed
            )
            rms = float(np.sqrt(np.mean((z0_hat - z0) ** 2)))
            rows.append((t, rms, "ok"))
            tiles.append(np.clip(codec.decode(z0_hat), 0.0, 1.0))

        if tiles:
            grid = np.concatenate(tiles, axis=1)
            write_png(args.out, ImageBuffer(pixels=grid))
        csv_lines = ["timestep,rms_error,status"]
        for t, rms, status in rows:
            rms_text = "" if status == "degenerate" else f"{rms:.6f}"
            csv_lines.append(f"{t},{rms_text},{status}")
        with open(args.csv, "w") as fh:
            fh.write("\n".join(csv_lines) + "\n")
    except (StylizeError, RuntimeError, ValueError) as err:
        print(f"pipeline error: {err}", file=sys.stderr)
        return 1
    for t, rms, status in rows:
        label = "degenerate (needs t >= 1)" if status == "degenerate" else f"rms={rms:.6f}"
        print(f"t={t}: {label}")
    return 0


def cmd_bench(args: argparse.Namespace) -> int:
    try:
        values = resolve_config(args)
        if args.trials < 5:
            raise ConfigError(f"need at least 5 trials, got {args.trials}")
        steps_grid = tuple(int(s) for s in args.steps_grid.split(",") if s.strip())
        if not steps_grid:
            raise ConfigError("empty steps grid")
        schedule, codec, net, cfg = _build_components(values)
        content = preprocess_image(read_png(args.content), values["size"])
        style = preprocess_image(read_png(args.style), values["size"])
    except (ConfigError, ValueError, OSError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2

    matrix = run_bench(
        net,
        codec,
        (content, style),
        default_grid(steps_grid),
        args.trials,
        schedule=schedule,
        base_config=cfg,
    )
    checks = check_directions(matrix)
    with open(args.out, "w") as fh:
        fh.write(matrix_to_csv(matrix))
    print(format_summary(matrix, checks))
    if not matrix.valid or any(not c.passed for c in checks):
        return 1
    return 0


def _add_common_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--steps", type=int, help="sampling steps T")
    p.add_argument("--lambda", dest="style_lambda", type=float, help="style coefficient")
    p.add_argument("--tau", type=int, help="feature extraction timestep")
    p.add_argument("--guidance", type=float, help="guidance scale")
    p.add_argument("--prompt", help="conditional prompt")
    p.add_argument("--strength", type=float, help="largest-timestep fraction")
    p.add_argument(
        "--renoise-mode", dest="renoise_mode", choices=("source", "target"),
        help="re-noise the source latent (literal) or the running target",
    )
    p.add_argument("--no-merge", dest="no_merge", action="store_true", help="disable feature merging")
    p.add_argument("--no-seac", dest="no_seac", action="store_true", help="disable attention control")
    p.add_argument("--merge-ratio", dest="merge_ratio", type=float, help="merged token fraction")
    p.add_argument("--layers", help="attention-control stages, e.g. mid,up or all")
    p.add_argument("--seed", type=int, help=f"run seed (fallback ${ENV_SEED})")
    p.add_argument("--size", type=int, help="square working size (default 64 for toy)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="zepo",
        description="Few-step inversion-free portrait stylization (desk-scale toy stack)",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_style = sub.add_parser("stylize", help="stylize a content image with a style image")
    p_style.add_argument("--content", required=True, help="content image (PNG)")
    p_style.add_argument("--style", required=True, help="style reference image (PNG)")
    p_style.add_argument("--out", required=True, help="output PNG path")
    p_style.add_argument("--dump-features", dest="dump_features", help="directory for a feature-bank debug dump")
    _add_common_flags(p_style)
    p_style.set_defaults(func=cmd_stylize)

    p_probe = sub.add_parser("probe", help="one-step prediction sweep over noise levels")
    p_probe.add_argument("--image", required=True, help="input image (PNG)")
    p_probe.add_argument("--timesteps", required=True, help="comma list, e.g. 99,299,899")
    p_probe.add_argument("--out", required=True, help="output grid PNG")
    p_probe.add_argument("--csv", required=True, help="reconstruction-error CSV path")
    _add_common_flags(p_probe)
    p_probe.set_defaults(func=cmd_probe)

    p_bench = sub.add_parser("bench", help="timing/MAC benchmark over a config grid")
    p_bench.add_argument("--content", required=True, help="content image (PNG)")
    p_bench.add_argument("--style", required=True, help="style reference image (PNG)")
    p_bench.add_argument("--out", required=True, help="output CSV path")
    p_bench.add_argument("--trials", type=int, default=5, help="trials per cell (min 5)")
    p_bench.add_argument("--steps-grid", dest="steps_grid", default="1,2,4", help="comma list of step counts")
    _add_common_flags(p_bench)
    p_bench.set_defaults(func=cmd_bench)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())

#!/usr/bin/env python3
"""Generate a synthetic portrait-like content image and a textured style
reference so the CLI can be exercised without external data."""

import argparse
import os

import numpy as np

from zepo.codec import ImageBuffer, write_png


def portrait(size: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(float) / size
    img = np.stack([0.55 + 0.2 * yy, 0.5 + 0.15 * yy, 0.45 + 0.1 * yy], axis=-1)

    def blob(cy, cx, ry, rx, color, strength=1.0):
        mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2
        weight = np.exp(-np.maximum(mask - 1.0, 0.0) * 30.0) * strength
        for c in range(3):
            img[..., c] = img[..., c] * (1 - weight) + color[c] * weight

    blob(0.45, 0.5, 0.32, 0.24, (0.85, 0.72, 0.6))   # head
    blob(0.38, 0.42, 0.035, 0.05, (0.15, 0.12, 0.1))  # eyes
    blob(0.38, 0.58, 0.035, 0.05, (0.15, 0.12, 0.1))
    blob(0.55, 0.5, 0.04, 0.09, (0.6, 0.3, 0.3))      # mouth
    blob(0.22, 0.5, 0.14, 0.3, (0.25, 0.18, 0.12))    # hair
    img += rng.normal(0, 0.01, img.shape)
    return np.clip(img, 0, 1)


def style_texture(size: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(float) / size
    phase = rng.uniform(0, 2 * np.pi, 3)
    freq = rng.uniform(6, 14, 3)
    img = np.stack(
        [
            0.5 + 0.45 * np.sin(freq[c] * (xx + 0.7 * yy) * np.pi + phase[c])
            for c in range(3)
        ],
        axis=-1,
    )
    swirl = 0.5 + 0.5 * np.sin(10 * np.sqrt((yy - 0.5) ** 2 + (xx - 0.5) ** 2) * np.pi)
    img[..., 0] = 0.6 * img[..., 0] + 0.4 * swirl
    img += rng.normal(0, 0.02, img.shape)
    return np.clip(img, 0, 1)


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--outdir", default="demo_images")
    parser.add_argument("--size", type=int, default=128)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    os.makedirs(args.outdir, exist_ok=True)
    content_path = os.path.join(args.outdir, "content.png")
    style_path = os.path.join(args.outdir, "style.png")
    write_png(content_path, ImageBuffer(pixels=portrait(args.size, args.seed)))
    write_png(style_path, ImageBuffer(pixels=style_texture(args.size, args.seed + 1)))
    print(f"wrote {content_path} and {style_path}")


if __name__ == "__main__":
    main()

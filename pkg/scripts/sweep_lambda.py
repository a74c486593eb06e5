#!/usr/bin/env python3
"""Sweep the style coefficient in a single-step run and save the outputs
side by side with a CSV of distances from the plain reconstruction."""

import argparse
import csv

import numpy as np

from zepo.backbone import toy_backbone
from zepo.codec import ImageBuffer, identity_codec, preprocess_image, read_png, write_png
from zepo.pipeline import PipelineConfig, stylize
from zepo.schedule import build_schedule
from zepo.seac import SeacConfig


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--content", required=True)
    parser.add_argument("--style", required=True)
    parser.add_argument("--out", default="lambda_sweep.png")
    parser.add_argument("--csv", default="lambda_sweep.csv")
    parser.add_argument("--size", type=int, default=64)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--coefs", default="0.5,1.0,1.2,1.5,2.0")
    args = parser.parse_args()

    schedule = build_schedule()
    codec = identity_codec(4)
    net = toy_backbone(latent_channels=4, base_width=16, seed=args.seed, latent_size=args.size)
    content = preprocess_image(read_png(args.content), args.size)
    style = preprocess_image(read_png(args.style), args.size)

    reference_cfg = PipelineConfig(
        steps=1, seed=args.seed, seac=SeacConfig(style_coef=1.0), share_extraction_noise=True
    )
    reference, _ = stylize(net, codec, content, content, reference_cfg, schedule)

    tiles = [content.pixels, reference.pixels]
    rows = []
    for coef in (float(s) for s in args.coefs.split(",")):
        cfg = PipelineConfig(steps=1, seed=args.seed, seac=SeacConfig(style_coef=coef))
        out, _ = stylize(net, codec, content, style, cfg, schedule)
        distance = float(np.linalg.norm(out.pixels - reference.pixels))
        rows.append((coef, distance))
        tiles.append(out.pixels)
        print(f"lambda={coef:<4}  distance-from-reconstruction={distance:.5f}")

    write_png(args.out, ImageBuffer(pixels=np.concatenate(tiles, axis=1)))
    with open(args.csv, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["style_coef", "distance_from_reconstruction"])
        writer.writerows(rows)
    print(f"wrote {args.out} and {args.csv}")


if __name__ == "__main__":
    main()

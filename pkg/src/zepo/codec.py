"""Latent codec abstraction, image preprocessing, and PNG IO.

The pipeline only sees a ``LatentCodec`` pair of encode/decode callables.
The in-repo codec is a lossless identity mapping used at desk scale; a
pretrained autoencoder plugs in through :func:`adapter_codec` (the repo
ships no weights). Images travel as ``ImageBuffer`` with float pixels
in [0, 1].
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable

import numpy as np
from PIL import Image, PngImagePlugin


@dataclass
class ImageBuffer:
    """RGB image with float pixels in [0, 1], shape (height, width, 3)."""

    pixels: np.ndarray
    source_path: str | None = None
    original_size: tuple[int, int] | None = None  # (height, width) before preprocess

    def __post_init__(self) -> None:
        self.pixels = np.asarray(self.pixels, dtype=float)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError(f"pixels must be (H, W, 3), got {self.pixels.shape}")
        if self.pixels.size == 0:
            raise ValueError("empty image")


@dataclass(frozen=True)
class LatentCodec:
    """Encoder/decoder pair between images and 4-axis latents.

    ``encode`` maps (H, W, 3) pixels to a (1, latent_channels, H/s, W/s)
    latent; ``decode`` inverts. Codecs that are not thread safe are
    serialized by :func:`adapter_codec`.
    """

    encode: Callable[[np.ndarray], np.ndarray]
    decode: Callable[[np.ndarray], np.ndarray]
    scale_factor: int
    latent_channels: int
    thread_safe: bool = True
    kind: str = "identity"


def identity_codec(latent_channels: int = 4) -> LatentCodec:
    """Lossless toy codec: RGB planes in the first 3 latent channels.

    Extra channels are zero-filled on encode and dropped on decode, so
    the image roundtrip is exact. Because all 3 color planes must fit,
    fewer than 3 latent channels cannot be represented losslessly.
    """
    if latent_channels < 3:
        raise ValueError(
            f"identity codec needs latent_channels >= 3 for a lossless RGB "
            f"roundtrip, got {latent_channels}"
        )

    def encode(pixels: np.ndarray) -> np.ndarray:
        pixels = np.asarray(pixels, dtype=float)
        if pixels.ndim != 3 or pixels.shape[2] != 3:
            raise ValueError(f"expected (H, W, 3) pixels, got {pixels.shape}")
        h, w, _ = pixels.shape
        z = np.zeros((1, latent_channels, h, w))
        z[0, :3] = pixels.transpose(2, 0, 1)
        return z

    def decode(latent: np.ndarray) -> np.ndarray:
        latent = np.asarray(latent, dtype=float)
        if latent.ndim != 4 or latent.shape[1] != latent_channels:
            raise ValueError(
                f"expected (1, {latent_channels}, H, W) latent, got {latent.shape}"
            )
        return latent[0, :3].transpose(1, 2, 0).copy()

    return LatentCodec(
        encode=encode,
        decode=decode,
        scale_factor=1,
        latent_channels=latent_channels,
        thread_safe=True,
        kind="identity",
    )


def adapter_codec(
    encode: Callable[[np.ndarray], np.ndarray],
    decode: Callable[[np.ndarray], np.ndarray],
    scale_factor: int = 8,
    latent_channels: int = 4,
    thread_safe: bool = False,
) -> LatentCodec:
    """Wrap an external pretrained autoencoder as a codec.

    Adapter contract: ``encode`` takes (H, W, 3) float pixels in [0, 1]
    and returns a (1, latent_channels, H/scale_factor, W/scale_factor)
    latent; ``decode`` inverts. Any pixel-range conversion (for example
    to [-1, 1]) and any latent scaling constant belong inside the
    callables. Adapters that do not declare thread safety are wrapped
    with a lock so concurrent pipeline runs serialize their calls.
    """
    if not thread_safe:
        lock = threading.RLock()
        inner_encode, inner_decode = encode, decode

        def encode(pixels: np.ndarray) -> np.ndarray:
            with lock:
                return inner_encode(pixels)

        def decode(latent: np.ndarray) -> np.ndarray:
            with lock:
                return inner_decode(latent)

    return LatentCodec(
        encode=encode,
        decode=decode,
        scale_factor=scale_factor,
        latent_channels=latent_channels,
        thread_safe=True,  # serialized above when the adapter is not
        kind="adapter",
    )


def _resize_bilinear(pixels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample with half-pixel centers (no antialias filter)."""
    in_h, in_w = pixels.shape[:2]
    ys = (np.arange(out_h) + 0.5) * in_h / out_h - 0.5
    xs = (np.arange(out_w) + 0.5) * in_w / out_w - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, in_h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, in_w - 1)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :, None]

    top = pixels[y0][:, x0] * (1 - wx) + pixels[y0][:, x1] * wx
    bot = pixels[y1][:, x0] * (1 - wx) + pixels[y1][:, x1] * wx
    return top * (1 - wy) + bot * wy


def preprocess_image(raw: ImageBuffer, target_size: int) -> ImageBuffer:
    """Center-crop to square, bilinear-resample to target, clamp to [0, 1].

    Idempotent: a second pass over an already-processed image is an
    exact no-op up to resampler arithmetic.
    """
    if target_size <= 0:
        raise ValueError(f"target_size must be positive, got {target_size}")
    h, w, _ = raw.pixels.shape
    side = min(h, w)
    top = (h - side) // 2
    left = (w - side) // 2
    cropped = raw.pixels[top : top + side, left : left + side]
    resized = _resize_bilinear(cropped, target_size, target_size)
    return ImageBuffer(
        pixels=np.clip(resized, 0.0, 1.0),
        source_path=raw.source_path,
        original_size=raw.original_size or (h, w),
    )


def read_png(path: str) -> ImageBuffer:
    """Load an 8-bit RGB PNG as float pixels in [0, 1]."""
    with Image.open(path) as im:
        rgb = im.convert("RGB")
        pixels = np.asarray(rgb, dtype=float) / 255.0
    return ImageBuffer(pixels=pixels, source_path=str(path))


def write_png(path: str, image: ImageBuffer, text: dict[str, str] | None = None) -> None:
    """Write an 8-bit RGB PNG, embedding optional provenance text chunks."""
    pixels = np.clip(image.pixels, 0.0, 1.0)
    data = np.rint(pixels * 255.0).astype(np.uint8)
    im = Image.fromarray(data, mode="RGB")
    info = PngImagePlugin.PngInfo()
    for key, value in (text or {}).items():
        info.add_text(key, value)
    im.save(path, format="PNG", pnginfo=info)


def read_png_text(path: str) -> dict[str, str]:
    """Read back the text chunks embedded by :func:`write_png`."""
    with Image.open(path) as im:
        return dict(im.text)

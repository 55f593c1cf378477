"""ViT-style image encoder producing per-patch latents and a pooled global vector."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from picoweave import tensor as pt
from picoweave.nn import AttentionPool, BlockConfig, Linear, Module, TransformerBlock, _param, drop_path_schedule
from picoweave.tensor import Tensor


@dataclass
class VisionConfig:
    image_size: int = 32
    patch_size: int = 8
    channels: int = 3
    hidden_dim: int = 64
    depth: int = 4
    num_heads: int = 4
    drop_path_max: float = 0.0
    layer_scale_init: float = 1e-5
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ValueError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size**2


@dataclass
class ImageLatent:
    patches: Tensor  # (num_patches, hidden) or (B, num_patches, hidden)
    pooled: Tensor  # (hidden,) or (B, hidden)


def patchify(image: Tensor, patch_size: int) -> Tensor:
    """Cut (C, H, W) into non-overlapping patches.

    Returns (num_patches, C*patch*patch); row p holds patch p (row-major
    over the patch grid) flattened channel-major. Lossless: ``unpatchify``
    reassembles the exact image. Also accepts a leading batch axis.
    """
    batched = image.ndim == 4
    if image.ndim not in (3, 4):
        raise pt.ShapeError(f"patchify: expected (C,H,W) or (B,C,H,W), got {image.shape}")
    *lead, c, h, w = image.shape
    if h % patch_size or w % patch_size:
        raise pt.ShapeError(f"patchify: {h}x{w} image not divisible by patch {patch_size}")
    gh, gw = h // patch_size, w // patch_size
    x = pt.reshape(image, (*lead, c, gh, patch_size, gw, patch_size))
    if batched:
        x = pt.transpose(x, (0, 2, 4, 1, 3, 5))  # (B, gh, gw, c, p, p)
        return pt.reshape(x, (lead[0], gh * gw, c * patch_size * patch_size))
    x = pt.transpose(x, (1, 3, 0, 2, 4))
    return pt.reshape(x, (gh * gw, c * patch_size * patch_size))


def unpatchify(patches: Tensor, channels: int, image_size: int, patch_size: int) -> Tensor:
    """Inverse of :func:`patchify` for (num_patches, C*p*p) input."""
    g = image_size // patch_size
    x = pt.reshape(patches, (g, g, channels, patch_size, patch_size))
    x = pt.transpose(x, (2, 0, 3, 1, 4))
    return pt.reshape(x, (channels, image_size, image_size))


def normalize_pixels(image: np.ndarray) -> np.ndarray:
    """Affine map of [0, 1] pixel values to [-1, 1]."""
    return image * 2.0 - 1.0


class VisionEncoder(Module):
    """Patch embedding + learned positions + bidirectional transformer stack.

    Output latents have exactly (image_size/patch_size)^2 rows; the pooled
    global vector is produced only through the attention-pool head.
    """

    def __init__(self, cfg: VisionConfig, rng, dtype=np.float32):
        self.cfg = cfg
        self.patch_embed = Linear(cfg.patch_dim, cfg.hidden_dim, rng, dtype=dtype)
        self.pos_embed = _param(rng, (cfg.num_patches, cfg.hidden_dim), 0.02, dtype)
        rates = drop_path_schedule(cfg.drop_path_max, cfg.depth)
        self.blocks = [
            TransformerBlock(
                BlockConfig(
                    hidden_dim=cfg.hidden_dim,
                    num_heads=cfg.num_heads,
                    mlp_ratio=cfg.mlp_ratio,
                    drop_path_rate=r,
                    layer_scale_init=cfg.layer_scale_init,
                ),
                rng,
                dtype=dtype,
            )
            for r in rates
        ]
        self.pool = AttentionPool(cfg.hidden_dim, cfg.num_heads, rng, dtype=dtype)

    def encode(self, image: Tensor, training: bool = False, rng=None) -> ImageLatent:
        cfg = self.cfg
        if image.shape[-2:] != (cfg.image_size, cfg.image_size) or image.shape[-3] != cfg.channels:
            raise pt.ShapeError(
                f"encode_image: expected (..., {cfg.channels}, {cfg.image_size}, {cfg.image_size}), got {image.shape}"
            )
        x = patchify(image, cfg.patch_size)
        z = pt.add(self.patch_embed(x), self.pos_embed)
        for block in self.blocks:
            z = block(z, mask=None, training=training, rng=rng)
        return ImageLatent(patches=z, pooled=self.pool(z))

    __call__ = encode

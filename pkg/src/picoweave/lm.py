"""Decoder-only causal model over interleaved text/image-latent sequences.

The input sequence mixes token-embedding rows (text and special tokens) with
image patch latents inserted at their bracketed positions. The output at an
image's ``<BoI>`` position summarizes everything strictly before the image,
and is mapped by a LayerNorm + linear head to that image's context embedding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from picoweave import tensor as pt
from picoweave.corpus import BOI_ID, BOS_ID, EOI_ID, PAD_ID
from picoweave.nn import BlockConfig, Embedding, LayerNorm, Linear, Module, TransformerBlock, _param, drop_path_schedule
from picoweave.packing import KIND_PATCH, BatchedSequence
from picoweave.tensor import Tensor


@dataclass
class LMConfig:
    vocab_size: int
    hidden_dim: int = 64
    depth: int = 4
    num_heads: int = 4
    max_seq_len: int = 2048
    mlp_ratio: int = 4
    drop_path_max: float = 0.0
    layer_scale_init: float = 1e-5
    context_dim: int = 64  # width of the per-image context embedding
    pad_id: int = PAD_ID
    bos_id: int = BOS_ID
    boi_id: int = BOI_ID
    eoi_id: int = EOI_ID

    def __post_init__(self):
        specials = (self.pad_id, self.bos_id, self.boi_id, self.eoi_id)
        if len(set(specials)) != 4:
            raise ValueError(f"special token ids must be distinct, got {specials}")
        if max(specials) >= self.vocab_size:
            raise ValueError("special token id outside vocabulary")


class CausalLM(Module):
    def __init__(self, cfg: LMConfig, rng, encoder_dim: int | None = None, dtype=np.float32):
        self.cfg = cfg
        d = cfg.hidden_dim
        self.tok_embed = Embedding(cfg.vocab_size, d, rng, dtype=dtype)
        self.pos_embed = _param(rng, (cfg.max_seq_len, d), 0.02, dtype)
        # latents are inserted directly when encoder and model widths agree
        self.bridge = None
        if encoder_dim is not None and encoder_dim != d:
            self.bridge = Linear(encoder_dim, d, rng, dtype=dtype)
        rates = drop_path_schedule(cfg.drop_path_max, cfg.depth)
        self.blocks = [
            TransformerBlock(
                BlockConfig(hidden_dim=d, num_heads=cfg.num_heads, mlp_ratio=cfg.mlp_ratio,
                            drop_path_rate=r, layer_scale_init=cfg.layer_scale_init),
                rng,
                dtype=dtype,
            )
            for r in rates
        ]
        self.vocab_head = Linear(d, cfg.vocab_size, rng, bias=False, dtype=dtype)
        self.ctx_norm = LayerNorm(d, dtype=dtype)
        self.ctx_proj = Linear(d, cfg.context_dim, rng, dtype=dtype)

    # -- embedding assembly -------------------------------------------

    def assemble_embeddings(self, batch: BatchedSequence, patch_latents: Tensor | None) -> Tensor:
        """Merge token embeddings and image latents into one (B, L, D) grid.

        Text/special/pad positions take embedding-table rows; each image's
        patch positions take its latent rows (bridged into model width when
        the encoder is wider/narrower). Learned absolute positions are added
        over every slot, image patches included.
        """
        cfg = self.cfg
        b, l = batch.ids.shape
        if l > cfg.max_seq_len:
            raise pt.ShapeError(f"sequence length {l} exceeds max_seq_len {cfg.max_seq_len}")
        if batch.ids.max(initial=0) >= cfg.vocab_size or batch.ids.min(initial=0) < 0:
            raise pt.ShapeError("token id out of vocabulary range")

        patch_index = np.flatnonzero(batch.kind.reshape(-1) == KIND_PATCH)
        n_patch_rows = 0 if patch_latents is None else patch_latents.shape[0] * patch_latents.shape[1]
        if patch_index.size != n_patch_rows:
            raise pt.ShapeError(
                f"image slot/latent mismatch: {patch_index.size} patch positions vs {n_patch_rows} latent rows"
            )

        flat_ids = batch.ids.reshape(-1)
        text_index = np.flatnonzero(batch.kind.reshape(-1) != KIND_PATCH)
        text_rows = self.tok_embed(flat_ids[text_index])

        if patch_index.size:
            lat = pt.reshape(patch_latents, (n_patch_rows, patch_latents.shape[-1]))
            if self.bridge is not None:
                lat = self.bridge(lat)
            # expected flat destination of every latent row, in image order
            expected = np.concatenate(
                [batch.image_rows[i] * l + batch.patch_starts[i] + np.arange(batch.patch_tokens)
                 for i in range(batch.n_images)]
            )
            if not np.array_equal(np.sort(expected), patch_index):
                raise pt.ShapeError("image patch spans do not tile the patch positions")
            stacked = pt.concat([text_rows, lat], axis=0)
            source = np.concatenate([text_index, expected])
        else:
            stacked = text_rows
            source = text_index
        perm = np.argsort(source, kind="stable")
        grid = pt.reshape(pt.permute_rows(stacked, perm), (b, l, self.cfg.hidden_dim))
        return pt.add(grid, pt.slice_(self.pos_embed, (slice(0, l), slice(None))))

    # -- causal trunk ----------------------------------------------------

    def forward_causal(self, embeddings: Tensor, batch: BatchedSequence,
                       training: bool = False, rng=None) -> Tensor:
        y = embeddings
        for block in self.blocks:
            y = block(y, mask=batch.attend_mask, training=training, rng=rng)
        return y

    # -- output heads ---------------------------------------------------

    def extract_heads(self, y: Tensor, batch: BatchedSequence) -> tuple[Tensor, Tensor | None]:
        """Vocabulary logits at every position; context embedding per image."""
        logits = self.vocab_head(y)
        if batch.n_images == 0:
            return logits, None
        b, l, d = y.shape
        if batch.boi_positions.size != batch.n_images:
            raise pt.ShapeError("missing <BoI> record for an image")
        flat = pt.reshape(y, (b * l, d))
        rows = pt.take(flat, batch.image_rows * l + batch.boi_positions, axis=0)
        return logits, self.ctx_proj(self.ctx_norm(rows))

    def __call__(self, batch: BatchedSequence, patch_latents: Tensor | None,
                 training: bool = False, rng=None):
        emb = self.assemble_embeddings(batch, patch_latents)
        y = self.forward_causal(emb, batch, training=training, rng=rng)
        logits, ctx = self.extract_heads(y, batch)
        return y, logits, ctx

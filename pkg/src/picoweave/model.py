"""The full pre-training model: vision encoder + causal model + contrastive head."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from picoweave import tensor as pt
from picoweave.lm import CausalLM, LMConfig
from picoweave.losses import ContrastiveHead, contrastive_loss, generation_loss, total_loss
from picoweave.nn import Module
from picoweave.packing import BatchedSequence
from picoweave.tensor import Tensor
from picoweave.vision import VisionConfig, VisionEncoder


@dataclass
class ForwardOutput:
    """Per-batch forward products.

    ``hidden`` and ``text_logits`` cover every position (the leading marker
    plus positions 1..N). ``image_global`` and ``image_context`` hold one
    row per image slot in canonical batch order; the context row is computed
    from the causal output at that image's ``<BoI>`` position.
    """

    hidden: Tensor
    text_logits: Tensor
    image_global: Tensor | None
    image_context: Tensor | None


@dataclass
class LossBundle:
    total: Tensor
    l_con: Tensor | None
    l_gen: Tensor
    n_targets: int
    con_c2i: float
    con_i2c: float
    similarity: np.ndarray | None


class PretrainModel(Module):
    def __init__(self, vision_cfg: VisionConfig, lm_cfg: LMConfig,
                 proj_dim: int = 64, tau_init: float = 0.07, proj_std: float = 1.0,
                 seed: int = 0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.vision_cfg = vision_cfg
        self.lm_cfg = lm_cfg
        self.dtype = dtype
        self.vision = VisionEncoder(vision_cfg, rng, dtype=dtype)
        self.lm = CausalLM(lm_cfg, rng, encoder_dim=vision_cfg.hidden_dim, dtype=dtype)
        self.head = ContrastiveHead(vision_cfg.hidden_dim, lm_cfg.context_dim, proj_dim, rng,
                                    tau_init=tau_init, proj_std=proj_std, dtype=dtype)

    def forward(self, batch: BatchedSequence, training: bool = False, rng=None) -> ForwardOutput:
        pooled = None
        patches = None
        if batch.n_images:
            if batch.patch_tokens != self.vision_cfg.num_patches:
                raise pt.ShapeError(
                    f"batch packed with {batch.patch_tokens} patch tokens but encoder produces "
                    f"{self.vision_cfg.num_patches}"
                )
            pixels = Tensor(np.ascontiguousarray(batch.image_pixels(), dtype=self.dtype))
            latent = self.vision.encode(pixels, training=training, rng=rng)
            patches, pooled = latent.patches, latent.pooled
        y, logits, ctx = self.lm(batch, patches, training=training, rng=rng)
        return ForwardOutput(hidden=y, text_logits=logits, image_global=pooled, image_context=ctx)

    __call__ = forward

    def compute_losses(self, batch: BatchedSequence, out: ForwardOutput, lam: float,
                       exclude_same_doc_negatives: bool = False) -> LossBundle:
        """Weighted total of the contrastive and generation objectives.

        The contrastive term needs at least two images in the batch and is
        skipped otherwise (a text-only batch reduces to plain next-token
        training).
        """
        l_gen, n_targets = generation_loss(out.text_logits, batch)
        l_con = None
        c2i = i2c = 0.0
        sim = None
        if out.image_global is not None and batch.n_images >= 2 and lam > 0.0:
            exclude = None
            if exclude_same_doc_negatives:
                docs = np.array([im.doc_id for im in batch.images])
                exclude = docs[:, None] == docs[None, :]
            res = contrastive_loss(out.image_global, out.image_context, self.head, exclude_mask=exclude)
            l_con, c2i, i2c, sim = res.loss, res.context_to_image, res.image_to_context, res.similarity
        return LossBundle(
            total=total_loss(l_con, l_gen, lam),
            l_con=l_con,
            l_gen=l_gen,
            n_targets=n_targets,
            con_c2i=c2i,
            con_i2c=i2c,
            similarity=sim,
        )

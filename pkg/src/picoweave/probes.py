"""Frozen-encoder evaluation probes: retrieval alignment and classification."""

from __future__ import annotations

import numpy as np

from picoweave import tensor as pt
from picoweave.corpus import BOI_ID, ImageSegment
from picoweave.model import PretrainModel
from picoweave.nn import AttentionPool, LayerNorm, Linear, Module
from picoweave.optim import AdamW
from picoweave.packing import _SeqBuilder, collate_batch
from picoweave.tensor import Tensor


def _l2n(x: np.ndarray) -> np.ndarray:
    return x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)


def held_out_pairs(n_pairs: int, seed: int, image_size: int = 32) -> list[tuple[ImageSegment, list[int]]]:
    """Distinct (image, caption) evaluation pairs sampled over attribute space."""
    from picoweave.corpus import N_IMAGE_TYPES, attrs_of_type, render_image

    if n_pairs > N_IMAGE_TYPES:
        raise ValueError(f"at most {N_IMAGE_TYPES} distinct pairs available")
    rng = np.random.default_rng(seed)
    types = rng.choice(N_IMAGE_TYPES, size=n_pairs, replace=False)
    pairs = []
    for i, t in enumerate(types):
        count, color, shape = attrs_of_type(int(t))
        seg = ImageSegment(pixels=render_image(count, color, shape, image_size=image_size),
                           image_id=i, paired_segment=-1, count=count, color=color, shape=shape)
        pairs.append((seg, seg.caption_tokens()))
    return pairs


def _caption_context_embeddings(model: PretrainModel, captions: list[list[int]]) -> np.ndarray:
    """Project each caption through the trained context path.

    A caption is presented exactly as in training: sequence marker, caption
    tokens, then ``<BoI>``; the causal output at the ``<BoI>`` slot is the
    model's prediction of the image to come, mapped through the context head
    and the contrastive projection.
    """
    patch_tokens = model.vision_cfg.num_patches
    seqs = []
    for cap in captions:
        b = _SeqBuilder(1 << 30, patch_tokens)
        b.add_tokens(list(cap))
        b.ids.append(BOI_ID)
        b.kind.append(1)
        seqs.append(b.finish())
    batch = collate_batch(seqs, patch_tokens)
    boi_pos = np.array([s.length - 1 for s in seqs])
    with pt.no_grad():
        emb = model.lm.assemble_embeddings(batch, None)
        y = model.lm.forward_causal(emb, batch)
        bsz, l, d = y.shape
        flat = pt.reshape(y, (bsz * l, d))
        rows = pt.take(flat, np.arange(bsz) * l + boi_pos, axis=0)
        ctx = model.lm.ctx_proj(model.lm.ctx_norm(rows))
        return model.head.w2(ctx).data


def _image_embeddings(model: PretrainModel, pixels: np.ndarray) -> np.ndarray:
    with pt.no_grad():
        latent = model.vision.encode(Tensor(pixels.astype(model.dtype)))
        return model.head.w1(latent.pooled).data


def eval_retrieval_probe(model: PretrainModel, pairs, chunk: int = 64) -> dict:
    """Top-1 recall in both directions over the candidate set.

    Images pass through the frozen encoder and pooled head; captions pass
    through the trained context path; ranking is by cosine similarity.
    """
    if len(pairs) < 2:
        raise ValueError("retrieval eval needs at least 2 pairs")
    pixels = np.stack([seg.pixels for seg, _ in pairs])
    img = []
    for i in range(0, len(pairs), chunk):
        img.append(_image_embeddings(model, pixels[i : i + chunk]))
    img = _l2n(np.concatenate(img))
    txt = []
    caps = [cap for _, cap in pairs]
    for i in range(0, len(caps), chunk):
        txt.append(_caption_context_embeddings(model, caps[i : i + chunk]))
    txt = _l2n(np.concatenate(txt))

    sim = txt @ img.T  # (text, image)
    n = len(pairs)
    tr1 = float((sim.argmax(axis=1) == np.arange(n)).mean())
    ir1 = float((sim.argmax(axis=0) == np.arange(n)).mean())
    return {"TR@1": tr1, "IR@1": ir1, "candidates": n}


class ClassifierProbe(Module):
    """Attention pooling over frozen patch latents, then LayerNorm + linear."""

    def __init__(self, dim: int, num_heads: int, n_classes: int, rng, dtype=np.float32):
        self.pool = AttentionPool(dim, num_heads, rng, dtype=dtype)
        self.norm = LayerNorm(dim, dtype=dtype)
        self.fc = Linear(dim, n_classes, rng, dtype=dtype)

    def __call__(self, latents: Tensor) -> Tensor:
        return self.fc(self.norm(self.pool(latents)))


def _probe_logits_loss(probe, latents, labels):
    logits = probe(latents)
    lp = pt.log_softmax(logits, axis=-1)
    return pt.scale(pt.tsum(pt.pick(lp, labels)), -1.0 / len(labels)), logits


def eval_linear_probe(model: PretrainModel, images: np.ndarray, labels: np.ndarray,
                      n_classes: int, seed: int = 0, steps: int = 200, lr: float = 1e-2,
                      train_frac: float = 0.75, batch_size: int = 64) -> dict:
    """Train only the probe head on frozen latents; report held-out accuracy."""
    labels = np.asarray(labels)
    if np.unique(labels).size < 2:
        raise ValueError("classification probe needs at least 2 classes present")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(labels))
    n_train = int(len(labels) * train_frac)
    train_idx, test_idx = order[:n_train], order[n_train:]

    with pt.no_grad():
        latents = model.vision.encode(Tensor(images.astype(model.dtype))).patches.data

    probe = ClassifierProbe(model.vision_cfg.hidden_dim, model.vision_cfg.num_heads,
                            n_classes, np.random.default_rng(seed + 1), dtype=model.dtype)
    opt = AdamW(dict(probe.named_parameters()), weight_decay=0.0)
    for step in range(steps):
        take = rng.choice(train_idx, size=min(batch_size, len(train_idx)), replace=False)
        loss, _ = _probe_logits_loss(probe, Tensor(latents[take]), labels[take])
        pt.backward(loss)
        opt.step(lr)
        opt.zero_grad()

    with pt.no_grad():
        logits = probe(Tensor(latents[test_idx]))
    acc = float((logits.data.argmax(axis=1) == labels[test_idx]).mean())
    return {"accuracy": acc, "n_train": len(train_idx), "n_test": len(test_idx)}


def probe_dataset(n_per_class: int, label_kind: str = "shape", seed: int = 0,
                  image_size: int = 32) -> tuple[np.ndarray, np.ndarray, int]:
    """Balanced labeled image set over one attribute axis."""
    from picoweave.corpus import N_COLORS, N_COUNTS, N_SHAPES, render_image

    rng = np.random.default_rng(seed)
    axes = {"shape": N_SHAPES, "color": N_COLORS, "count": N_COUNTS}
    if label_kind not in axes:
        raise ValueError(f"label_kind must be one of {sorted(axes)}")
    n_classes = axes[label_kind]
    images, labels = [], []
    for cls in range(n_classes):
        for _ in range(n_per_class):
            count = int(rng.integers(0, N_COUNTS))
            color = int(rng.integers(0, N_COLORS))
            shape = int(rng.integers(0, N_SHAPES))
            if label_kind == "shape":
                shape = cls
            elif label_kind == "color":
                color = cls
            else:
                count = cls
            images.append(render_image(count, color, shape, image_size=image_size))
            labels.append(cls)
    return np.stack(images), np.asarray(labels), n_classes

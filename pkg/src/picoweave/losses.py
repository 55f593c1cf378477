"""Training objectives: bidirectional contrastive loss, next-token loss,
their weighted total, and embedding-collapse diagnostics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from picoweave import tensor as pt
from picoweave.nn import Linear, Module
from picoweave.packing import BatchedSequence
from picoweave.tensor import Tensor

TAU_MIN = 0.01


class ContrastiveHead(Module):
    """Two learnable projections and a learnable temperature.

    The temperature is stored as the exponent of an unconstrained scalar so
    it stays positive; ``clamp_temperature`` floors it at ``TAU_MIN`` (call
    after each optimizer step).
    """

    def __init__(self, v_dim: int, t_dim: int, proj_dim: int, rng, tau_init: float = 0.07,
                 proj_std: float = 1.0, dtype=np.float32):
        # without embedding normalization the projection scale sets the logit
        # scale; a tiny init leaves the softmax flat and alignment learning
        # stalls, so the projections start at O(1) paths
        self.w1 = Linear(v_dim, proj_dim, rng, bias=False, std=proj_std, dtype=dtype)  # image side
        self.w2 = Linear(t_dim, proj_dim, rng, bias=False, std=proj_std, dtype=dtype)  # context side
        self.log_tau = Tensor(np.asarray(math.log(tau_init), dtype=dtype), requires_grad=True)

    def temperature(self) -> float:
        return float(np.exp(self.log_tau.data))

    def clamp_temperature(self):
        floor = math.log(TAU_MIN)
        if self.log_tau.data < floor:
            self.log_tau.data = np.asarray(floor, dtype=self.log_tau.data.dtype)

    def similarity(self, v: Tensor, t: Tensor) -> Tensor:
        """S[a, b] = (W2 t_a) . (W1 v_b) / tau."""
        inv_tau = pt.exp(pt.scale(self.log_tau, -1.0))
        return pt.mul(pt.matmul(self.w2(t), pt.transpose(self.w1(v), (1, 0))), inv_tau)


@dataclass
class ContrastiveResult:
    loss: Tensor
    similarity: np.ndarray
    context_to_image: float  # cross-entropy of rows at the diagonal
    image_to_context: float  # cross-entropy of columns at the diagonal


def contrastive_loss(v: Tensor, t: Tensor, head: ContrastiveHead,
                     exclude_mask: np.ndarray | None = None) -> ContrastiveResult:
    """Bidirectional InfoNCE between per-image embeddings and their contexts.

    Matched pairs sit on the diagonal; every other image in the batch is a
    negative. ``exclude_mask[a, b] = True`` removes an off-diagonal pair
    from both softmax denominators (used to drop same-document negatives).
    Each direction is a mean over images; the two directions are summed.
    """
    if v.ndim != 2 or t.ndim != 2:
        raise pt.ShapeError(f"contrastive_loss: expected 2-D embeddings, got {v.shape} and {t.shape}")
    n = v.shape[0]
    if t.shape[0] != n:
        raise pt.ShapeError(f"contrastive_loss: {n} images vs {t.shape[0]} contexts")
    if n < 2:
        raise ValueError(f"contrastive_loss: need at least 2 images for negatives, got {n}")

    s = head.similarity(v, t)
    if exclude_mask is not None:
        excl = np.asarray(exclude_mask, dtype=bool) & ~np.eye(n, dtype=bool)
        if excl.any():
            s = pt.masked_fill(s, excl)
    diag = np.arange(n)
    rows = pt.scale(pt.tsum(pt.pick(pt.log_softmax(s, axis=1), diag)), -1.0 / n)
    cols = pt.scale(pt.tsum(pt.pick(pt.transpose(pt.log_softmax(s, axis=0), (1, 0)), diag)), -1.0 / n)
    return ContrastiveResult(
        loss=pt.add(rows, cols),
        similarity=s.data,
        context_to_image=float(rows.data),
        image_to_context=float(cols.data),
    )


def generation_loss(text_logits: Tensor, batch: BatchedSequence) -> tuple[Tensor, int]:
    """Mean next-token negative log-likelihood over generation targets.

    A position p in the target mask is predicted by the logits at p-1.
    Image patch positions are never targets.
    """
    rows, cols = np.nonzero(batch.gen_target_mask)
    if rows.size == 0:
        raise ValueError("generation_loss: batch has no generation targets")
    b, l, vocab = text_logits.shape
    predictor = rows * l + (cols - 1)
    targets = batch.ids[rows, cols]
    flat = pt.reshape(text_logits, (b * l, vocab))
    lp = pt.log_softmax(pt.take(flat, predictor, axis=0), axis=-1)
    nll = pt.scale(pt.tsum(pt.pick(lp, targets)), -1.0 / rows.size)
    return nll, int(rows.size)


def total_loss(l_con: Tensor | None, l_gen: Tensor, lam: float) -> Tensor:
    if lam < 0:
        raise ValueError(f"loss weight must be non-negative, got {lam}")
    if l_con is None or lam == 0.0:
        return l_gen
    return pt.add(pt.scale(l_con, lam), l_gen)


# -- collapse diagnostics (plain numpy, no gradients) ---------------------


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.maximum(norms, 1e-12)


def collapse_metrics(v: np.ndarray, t: np.ndarray | None = None) -> dict:
    """Embedding-health metrics on L2-normalized rows.

    variance: total variance (sum of per-dimension variances) of the
    normalized embeddings; near 0 means directional collapse, near 1 means
    well-spread directions. alignment: mean distance between matched
    normalized (v, t) pairs. uniformity: log of the mean Gaussian-kernel
    similarity exp(-2 d^2) over distinct normalized v pairs.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 2 or v.shape[0] < 2:
        raise ValueError("collapse_metrics: need at least 2 embedding rows")
    vn = _normalize_rows(v)
    variance = float(vn.var(axis=0).sum())

    alignment = float("nan")
    if t is not None:
        tn = _normalize_rows(np.asarray(t, dtype=np.float64))
        alignment = float(np.linalg.norm(vn - tn, axis=1).mean())

    d2 = np.square(vn[:, None, :] - vn[None, :, :]).sum(-1)
    off = ~np.eye(v.shape[0], dtype=bool)
    uniformity = float(np.log(np.exp(-2.0 * d2[off]).mean()))
    return {"variance": variance, "alignment": alignment, "uniformity": uniformity}


# -- step report ----------------------------------------------------------

_LINE_FIELDS = ["step", "L_total", "L_con", "L_gen", "tau", "variance", "alignment", "uniformity", "lr",
                "lambda", "con_c2i", "con_i2c", "n_images", "n_targets"]


@dataclass
class LossReport:
    step: int
    L_total: float
    L_con: float
    L_gen: float
    tau: float
    variance: float
    alignment: float
    uniformity: float
    lr: float
    lam: float
    con_c2i: float
    con_i2c: float
    n_images: int
    n_targets: int

    def __post_init__(self):
        for name in ("L_total", "L_con", "L_gen"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"LossReport: {name} is not finite")
        if abs(self.L_total - (self.lam * self.L_con + self.L_gen)) > 1e-6:
            raise ValueError("LossReport: L_total != lambda * L_con + L_gen")

    def to_line(self) -> str:
        vals = {
            "step": str(self.step),
            "L_total": repr(self.L_total),
            "L_con": repr(self.L_con),
            "L_gen": repr(self.L_gen),
            "tau": repr(self.tau),
            "variance": repr(self.variance),
            "alignment": repr(self.alignment),
            "uniformity": repr(self.uniformity),
            "lr": repr(self.lr),
            "lambda": repr(self.lam),
            "con_c2i": repr(self.con_c2i),
            "con_i2c": repr(self.con_i2c),
            "n_images": str(self.n_images),
            "n_targets": str(self.n_targets),
        }
        return " ".join(f"{k}={vals[k]}" for k in _LINE_FIELDS)

    @classmethod
    def from_line(cls, line: str) -> "LossReport":
        kv = dict(part.split("=", 1) for part in line.split())
        return cls(
            step=int(kv["step"]),
            L_total=float(kv["L_total"]),
            L_con=float(kv["L_con"]),
            L_gen=float(kv["L_gen"]),
            tau=float(kv["tau"]),
            variance=float(kv["variance"]),
            alignment=float(kv["alignment"]),
            uniformity=float(kv["uniformity"]),
            lr=float(kv["lr"]),
            lam=float(kv["lambda"]),
            con_c2i=float(kv["con_c2i"]),
            con_i2c=float(kv["con_i2c"]),
            n_images=int(kv["n_images"]),
            n_targets=int(kv["n_targets"]),
        )

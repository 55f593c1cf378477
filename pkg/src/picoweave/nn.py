"""Transformer building blocks: attention, pre-norm blocks, attention pooling.

Blocks are stateless given their parameters; forward passes never mutate
module state, so concurrent read-only evaluation on separate graphs is safe.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from picoweave import tensor as pt
from picoweave.tensor import Tensor


@dataclass
class BlockConfig:
    hidden_dim: int
    num_heads: int
    mlp_ratio: int = 4
    drop_path_rate: float = 0.0
    layer_scale_init: float = 1e-5

    def __post_init__(self):
        if self.hidden_dim % self.num_heads != 0:
            raise ValueError(f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}")
        if not 0.0 <= self.drop_path_rate <= 0.2:
            raise ValueError(f"drop_path_rate must be in [0, 0.2], got {self.drop_path_rate}")
        if self.layer_scale_init < 0:
            raise ValueError("layer_scale_init must be non-negative")


class Module:
    """Tiny parameter container; children discovered by attribute walk."""

    def named_parameters(self, prefix: str = ""):
        for name, val in vars(self).items():
            key = f"{prefix}{name}" if not prefix else f"{prefix}.{name}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield key, val
            elif isinstance(val, Module):
                yield from val.named_parameters(key)
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{key}.{i}")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()


def _param(rng, shape, std, dtype):
    return Tensor(rng.normal(0.0, std, size=shape).astype(dtype), requires_grad=True)


class Linear(Module):
    def __init__(self, in_dim, out_dim, rng, bias=True, std=0.02, dtype=np.float32):
        self.w = _param(rng, (in_dim, out_dim), std, dtype)
        self.b = Tensor(np.zeros(out_dim, dtype=dtype), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = pt.matmul(x, self.w)
        if self.b is not None:
            out = pt.add(out, self.b)
        return out


class LayerNorm(Module):
    def __init__(self, dim, dtype=np.float32, eps=1e-5):
        self.gain = Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)
        self.eps = eps

    def named_parameters(self, prefix: str = ""):
        for name in ("gain", "bias"):
            key = name if not prefix else f"{prefix}.{name}"
            yield key, getattr(self, name)

    def __call__(self, x: Tensor) -> Tensor:
        return pt.add(pt.mul(pt.layer_norm(x, eps=self.eps), self.gain), self.bias)


class Embedding(Module):
    def __init__(self, num, dim, rng, std=0.02, dtype=np.float32):
        self.weight = _param(rng, (num, dim), std, dtype)

    def __call__(self, ids) -> Tensor:
        return pt.embedding(self.weight, ids)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    # (..., N, D) -> (..., H, N, Dh)
    *lead, n, d = x.shape
    x = pt.reshape(x, (*lead, n, heads, d // heads))
    ndim = x.ndim
    perm = list(range(ndim - 3)) + [ndim - 2, ndim - 3, ndim - 1]
    return pt.transpose(x, perm)


def _merge_heads(x: Tensor) -> Tensor:
    # (..., H, N, Dh) -> (..., N, H*Dh)
    ndim = x.ndim
    perm = list(range(ndim - 3)) + [ndim - 2, ndim - 3, ndim - 1]
    x = pt.transpose(x, perm)
    *lead, n, h, dh = x.shape
    return pt.reshape(x, (*lead, n, h * dh))


class MultiHeadAttention(Module):
    """Multi-head attention over explicit q/k/v with a boolean attend mask.

    ``mask[..., i, j] = True`` means query i may attend key j; blocked
    logits are filled with a large negative sentinel whose softmax weight
    underflows to exactly zero, so masked keys contribute nothing.
    """

    def __init__(self, dim, num_heads, rng, dtype=np.float32):
        if dim % num_heads != 0:
            raise ValueError(f"dim {dim} not divisible by heads {num_heads}")
        self.num_heads = num_heads
        self.wq = Linear(dim, dim, rng, dtype=dtype)
        # no key bias: softmax is invariant to per-row logit shifts, so a key
        # bias is a structurally zero-gradient parameter
        self.wk = Linear(dim, dim, rng, bias=False, dtype=dtype)
        self.wv = Linear(dim, dim, rng, dtype=dtype)
        self.wo = Linear(dim, dim, rng, dtype=dtype)

    def __call__(self, q: Tensor, k: Tensor, v: Tensor, mask=None) -> Tensor:
        if q.shape[-1] != k.shape[-1] or k.shape[-1] != v.shape[-1]:
            raise pt.ShapeError(f"attention: hidden dims differ: {q.shape}, {k.shape}, {v.shape}")
        dh = q.shape[-1] // self.num_heads
        qh = _split_heads(self.wq(q), self.num_heads)
        kh = _split_heads(self.wk(k), self.num_heads)
        vh = _split_heads(self.wv(v), self.num_heads)
        kt_perm = list(range(kh.ndim - 2)) + [kh.ndim - 1, kh.ndim - 2]
        logits = pt.scale(pt.matmul(qh, pt.transpose(kh, kt_perm)), 1.0 / np.sqrt(dh))
        if mask is not None:
            m = np.asarray(mask, dtype=bool)
            if not m.any(axis=-1).all():
                raise ValueError("attention: a query row has no attendable key")
            # broadcast (Nq, Nk) or (B, Nq, Nk) masks over the head axis
            if m.ndim == logits.ndim - 1:
                m = np.expand_dims(m, -3)
            logits = pt.masked_fill(logits, ~m)
        attn = pt.softmax(logits, axis=-1)
        return self.wo(_merge_heads(pt.matmul(attn, vh)))


class MLP(Module):
    def __init__(self, dim, hidden, rng, dtype=np.float32):
        self.fc1 = Linear(dim, hidden, rng, dtype=dtype)
        self.fc2 = Linear(hidden, dim, rng, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(pt.gelu(self.fc1(x)))


def drop_path(x: Tensor, rate: float, training: bool, rng) -> Tensor:
    """Stochastic depth on the residual branch; exact identity in eval mode."""
    if not training or rate <= 0.0:
        return x
    if rate >= 1.0:
        return pt.scale(x, 0.0)
    # one keep/drop decision per leading-axis sample
    keep = (rng.random(x.shape[0]) >= rate).astype(x.data.dtype)
    shape = (x.shape[0],) + (1,) * (x.ndim - 1)
    gate = Tensor((keep / (1.0 - rate)).reshape(shape))
    return pt.mul(x, gate)


class TransformerBlock(Module):
    """Pre-norm block: x + dp(ls1*attn(LN(x))), then x + dp(ls2*mlp(LN(x)))."""

    def __init__(self, cfg: BlockConfig, rng, dtype=np.float32):
        self.cfg = cfg
        d = cfg.hidden_dim
        self.norm1 = LayerNorm(d, dtype=dtype)
        self.attn = MultiHeadAttention(d, cfg.num_heads, rng, dtype=dtype)
        self.ls1 = Tensor(np.full(d, cfg.layer_scale_init, dtype=dtype), requires_grad=True)
        self.norm2 = LayerNorm(d, dtype=dtype)
        self.mlp = MLP(d, cfg.mlp_ratio * d, rng, dtype=dtype)
        self.ls2 = Tensor(np.full(d, cfg.layer_scale_init, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor, mask=None, training: bool = False, rng=None) -> Tensor:
        h = self.norm1(x)
        branch = pt.mul(self.attn(h, h, h, mask=mask), self.ls1)
        x = pt.add(x, drop_path(branch, self.cfg.drop_path_rate, training, rng))
        branch = pt.mul(self.mlp(self.norm2(x)), self.ls2)
        return pt.add(x, drop_path(branch, self.cfg.drop_path_rate, training, rng))


class AttentionPool(Module):
    """Reduce a token set to one vector with a learnable query token.

    The query attends over the tokens without positional bias, so the
    pooled vector is invariant to token order.
    """

    def __init__(self, dim, num_heads, rng, dtype=np.float32):
        self.query = _param(rng, (1, dim), 0.02, dtype)
        self.attn = MultiHeadAttention(dim, num_heads, rng, dtype=dtype)

    def __call__(self, tokens: Tensor) -> Tensor:
        if tokens.ndim == 2:
            if tokens.shape[0] == 0:
                raise ValueError("attention_pool: empty token set")
            out = self.attn(self.query, tokens, tokens)
            return pt.reshape(out, (tokens.shape[-1],))
        if tokens.shape[-2] == 0:
            raise ValueError("attention_pool: empty token set")
        # batched: broadcast the query over leading axes
        b = tokens.shape[0]
        q = pt.reshape(self.query, (1, 1, tokens.shape[-1]))
        q = pt.add(q, Tensor(np.zeros((b, 1, tokens.shape[-1]), dtype=tokens.data.dtype)))
        out = self.attn(q, tokens, tokens)
        return pt.reshape(out, (b, tokens.shape[-1]))


def drop_path_schedule(max_rate: float, depth: int) -> list[float]:
    """Per-block rates rising linearly from 0 to ``max_rate`` over depth."""
    if depth <= 1:
        return [max_rate] * depth
    return [max_rate * i / (depth - 1) for i in range(depth)]

"""Small transformer building blocks on top of :mod:`sgexpress.autodiff`."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import MASK_VALUE, Parameter, Tensor


class Module:
    """Container whose Parameters and sub-Modules are discovered by attribute order."""

    def named_parameters(self) -> Iterator[tuple[str, Parameter]]:
        for value in vars(self).values():
            yield from _walk(value)

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def _walk(value) -> Iterator[tuple[str, Parameter]]:
    if isinstance(value, Parameter):
        yield value.name, value
    elif isinstance(value, Module):
        yield from value.named_parameters()
    elif isinstance(value, (list, tuple)):
        for v in value:
            yield from _walk(v)


class Linear(Module):
    def __init__(self, name: str, d_in: int, d_out: int, rng: np.random.Generator,
                 stages=(1, 2, 3), std: float | None = None, bias: bool = True):
        std = 1.0 / np.sqrt(d_in) if std is None else std
        self.weight = Parameter(f"{name}.weight", rng.normal(0.0, std, size=(d_in, d_out)), stages)
        self.bias = Parameter(f"{name}.bias", np.zeros(d_out), stages) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ad.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, name: str, d: int, stages=(1, 2, 3), eps: float = 1e-5):
        self.gain = Parameter(f"{name}.gain", np.ones(d), stages)
        self.bias = Parameter(f"{name}.bias", np.zeros(d), stages)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gain, self.bias, self.eps)


def attention(q: Tensor, k: Tensor, v: Tensor, heads: int,
              key_mask: np.ndarray | None = None, causal: bool = False) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention over batched sequences.

    q: (B, Nq, d); k, v: (B, Nk, d); key_mask: (B, Nk) bool, True = attend.
    Returns the (B, Nq, d) output and the (B, heads, Nq, Nk) weights.
    """
    b, nq, d = q.shape
    nk = k.shape[1]
    if d % heads:
        raise ValueError(f"model width {d} is not divisible by {heads} heads")
    dh = d // heads
    qh = q.reshape(b, nq, heads, dh).transpose(0, 2, 1, 3)
    kh = k.reshape(b, nk, heads, dh).transpose(0, 2, 1, 3)
    vh = v.reshape(b, nk, heads, dh).transpose(0, 2, 1, 3)
    bias = None
    if key_mask is not None:
        bias = np.where(np.asarray(key_mask, dtype=bool), 0.0, MASK_VALUE)[:, None, None, :]
    if causal:
        tri = np.where(np.tril(np.ones((nq, nk), dtype=bool)), 0.0, MASK_VALUE)[None, None]
        bias = tri if bias is None else bias + tri
    out, weights = ad.attention_core(qh, kh, vh, bias)
    return out.transpose(0, 2, 1, 3).reshape(b, nq, d), Tensor(weights)


class MultiHeadAttention(Module):
    def __init__(self, name: str, d_q: int, d_kv: int, d_model: int, heads: int,
                 rng: np.random.Generator, stages=(1, 2, 3), out_std: float | None = None):
        if d_model % heads:
            raise ValueError(f"d_model={d_model} must be divisible by heads={heads}")
        self.heads = heads
        self.wq = Linear(f"{name}.wq", d_q, d_model, rng, stages)
        # a key bias only shifts each query's scores by a constant, so it is left out
        self.wk = Linear(f"{name}.wk", d_kv, d_model, rng, stages, bias=False)
        self.wv = Linear(f"{name}.wv", d_kv, d_model, rng, stages)
        self.wo = Linear(f"{name}.wo", d_model, d_q, rng, stages, std=out_std)

    def __call__(self, x_q: Tensor, x_kv: Tensor, key_mask=None, causal: bool = False) -> tuple[Tensor, Tensor]:
        out, weights = attention(self.wq(x_q), self.wk(x_kv), self.wv(x_kv), self.heads, key_mask, causal)
        return self.wo(out), weights


class FeedForward(Module):
    def __init__(self, name: str, d: int, hidden: int, rng: np.random.Generator,
                 stages=(1, 2, 3), out_std: float | None = None):
        self.fc1 = Linear(f"{name}.fc1", d, hidden, rng, stages)
        self.fc2 = Linear(f"{name}.fc2", hidden, d, rng, stages, std=out_std)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ad.gelu(self.fc1(x)))


class TransformerBlock(Module):
    """Pre-norm self-attention + feed-forward, both with residual connections."""

    def __init__(self, name: str, d: int, heads: int, hidden: int, rng: np.random.Generator,
                 stages=(1, 2, 3), causal: bool = False, n_blocks: int = 1):
        out_std = 1.0 / np.sqrt(d * 2 * n_blocks)
        self.causal = causal
        self.ln1 = LayerNorm(f"{name}.ln1", d, stages)
        self.attn = MultiHeadAttention(f"{name}.attn", d, d, d, heads, rng, stages, out_std)
        self.ln2 = LayerNorm(f"{name}.ln2", d, stages)
        self.ffn = FeedForward(f"{name}.ffn", d, hidden, rng, stages, out_std)

    def __call__(self, x: Tensor, key_mask=None) -> Tensor:
        h = self.ln1(x)
        a, _ = self.attn(h, h, key_mask, self.causal)
        x = x + a
        return x + self.ffn(self.ln2(x))

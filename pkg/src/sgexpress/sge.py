"""Scene graph expression: mask-pooled entity nodes, message passing, prompt activation.

The pipeline is ``pool_mask_features -> build_graph -> message_pass ->
inject_prompt``. Internally every stage works on batched, zero-padded node
tensors of shape (B, N, d) with a boolean node mask; the single-graph helpers
at the bottom of the module wrap inputs into a batch of one.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import LayerNorm, Linear, Module, MultiHeadAttention, TransformerBlock

RAW, ACTIVATED = "raw", "activated"
SGE_STAGES = (2, 3)


class EmptyMaskError(ValueError):
    """An entity mask has no set pixel."""


@dataclass(frozen=True)
class SGEConfig:
    d_e: int = 32
    d_g: int = 32
    d_t: int = 32
    mp_layers: int = 2
    mp_heads: int = 4
    prompt_heads: int = 4
    ffn_mult: int = 2
    sample_points_cap: int = 1024
    use_mp: bool = True
    use_prompt: bool = True

    def validate(self) -> None:
        if self.d_g % self.mp_heads:
            raise ValueError(f"d_g={self.d_g} must be divisible by mp_heads={self.mp_heads}")
        if self.d_g % self.prompt_heads:
            raise ValueError(f"d_g={self.d_g} must be divisible by prompt_heads={self.prompt_heads}")
        if min(self.sample_points_cap, self.mp_heads, self.prompt_heads, self.ffn_mult) < 1:
            raise ValueError("caps and head counts must be >= 1")
        if self.mp_layers < 0:
            raise ValueError("mp_layers must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(eq=False)
class SceneGraph:
    """Node features (B, N, d_g) with a (B, N) validity mask and a state tag."""

    node_features: Tensor
    node_mask: np.ndarray
    state: str = RAW

    @property
    def batch_size(self) -> int:
        return self.node_features.shape[0]

    @property
    def n_nodes(self) -> int | np.ndarray:
        counts = self.node_mask.sum(axis=1)
        return int(counts[0]) if len(counts) == 1 else counts

    def features(self, b: int = 0) -> np.ndarray:
        """Valid node rows of batch item ``b``."""
        return self.node_features.data[b][self.node_mask[b]]


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------

def bilinear_sample(fmap: Tensor, x: float, y: float) -> Tensor:
    """Blend the four grid neighbours of (x, y) per channel; fmap is (d_e, h_v, w_v)."""
    _, h, w = fmap.shape
    if not (0.0 <= x <= w - 1 and 0.0 <= y <= h - 1):
        raise ValueError(f"sample point ({x}, {y}) outside [0, {w - 1}] x [0, {h - 1}]")
    x0, y0 = int(np.floor(x)), int(np.floor(y))
    x1, y1 = min(x0 + 1, w - 1), min(y0 + 1, h - 1)
    ax, ay = x - x0, y - y0
    return (
        fmap[:, y0, x0] * ((1 - ax) * (1 - ay))
        + fmap[:, y0, x1] * (ax * (1 - ay))
        + fmap[:, y1, x0] * ((1 - ax) * ay)
        + fmap[:, y1, x1] * (ax * ay)
    )


def pixel_to_feature_coords(canvas: tuple[int, int], feature_hw: tuple[int, int]) -> Callable:
    """Map pixel indices to clamped feature-grid sample coordinates.

    Pixel centres (px + 0.5, py + 0.5) are scaled by the grid/canvas ratio and
    shifted by -0.5 (align-corners-false), then clamped into the grid.
    """
    h_m, w_m = canvas
    h_v, w_v = feature_hw

    def mapping(px, py):
        fx = (np.asarray(px, dtype=np.float64) + 0.5) * (w_v / w_m) - 0.5
        fy = (np.asarray(py, dtype=np.float64) + 0.5) * (h_v / h_m) - 0.5
        return np.clip(fx, 0.0, w_v - 1), np.clip(fy, 0.0, h_v - 1)

    return mapping


def stratified_subsample(n: int, cap: int) -> np.ndarray:
    """Indices of at most ``cap`` evenly spread points out of ``n``."""
    if n <= cap:
        return np.arange(n)
    return ((np.arange(cap) + 0.5) * n / cap).astype(np.intp)


def pooling_matrix(masks: np.ndarray, feature_hw: tuple[int, int],
                   map_to_feature_coords: Callable | None = None,
                   sample_points_cap: int = 1024) -> np.ndarray:
    """Row i averages the bilinear weights of mask i's sample points, shape (N, h_v*w_v).

    Pooling is linear in the feature map, so ``A @ F_v.reshape(d_e, -1).T``
    equals the mean of :func:`bilinear_sample` over the sampled points.
    """
    masks = np.asarray(masks, dtype=bool)
    n = masks.shape[0]
    h_v, w_v = feature_hw
    coords = map_to_feature_coords or pixel_to_feature_coords(masks.shape[1:], feature_hw)
    out = np.zeros((n, h_v * w_v))
    for i in range(n):
        ys, xs = np.nonzero(masks[i])
        if len(xs) == 0:
            raise EmptyMaskError(f"mask {i} is empty")
        keep = stratified_subsample(len(xs), sample_points_cap)
        fx, fy = coords(xs[keep], ys[keep])
        x0 = np.floor(fx).astype(np.intp)
        y0 = np.floor(fy).astype(np.intp)
        x1 = np.minimum(x0 + 1, w_v - 1)
        y1 = np.minimum(y0 + 1, h_v - 1)
        ax, ay = fx - x0, fy - y0
        for yy, xx, wt in ((y0, x0, (1 - ax) * (1 - ay)), (y0, x1, ax * (1 - ay)),
                           (y1, x0, (1 - ax) * ay), (y1, x1, ax * ay)):
            np.add.at(out[i], yy * w_v + xx, wt)
        out[i] /= len(keep)
    return out


def pool_mask_features(fmap: Tensor, masks: np.ndarray,
                       map_to_feature_coords: Callable | None = None,
                       sample_points_cap: int = 1024) -> Tensor:
    """Entity features F_e, shape (N, d_e): per-mask mean of bilinear samples of ``fmap``."""
    fmap = ad.as_tensor(fmap)
    d_e, h_v, w_v = fmap.shape
    masks = np.asarray(masks, dtype=bool)
    if masks.shape[0] == 0:
        return ad.matmul(Tensor(np.zeros((0, h_v * w_v))), fmap.reshape(d_e, h_v * w_v).T)
    weights = pooling_matrix(masks, (h_v, w_v), map_to_feature_coords, sample_points_cap)
    return ad.matmul(Tensor(weights), fmap.reshape(d_e, h_v * w_v).T)


# ---------------------------------------------------------------------------
# the module
# ---------------------------------------------------------------------------

class SceneGraphExpression(Module):
    """Learned part of the graph pipeline (node projection, message passing, prompt attention).

    With ``use_mp`` off the message-passing stack is absent (identity); with
    ``use_prompt`` off prompt attention is absent and G' equals G.
    """

    def __init__(self, config: SGEConfig, seed: int = 0):
        config.validate()
        self.config = config
        c = config
        self.node_in = Linear("sge.node_in", c.d_e, c.d_g, np.random.default_rng([seed, 2, 0]), SGE_STAGES)
        rng_mp = np.random.default_rng([seed, 2, 1])
        n_mp = c.mp_layers if c.use_mp else 0
        self.mp = [
            TransformerBlock(f"sge.mp.layer{i}", c.d_g, c.mp_heads, c.ffn_mult * c.d_g, rng_mp, SGE_STAGES,
                             causal=False, n_blocks=max(n_mp, 1))
            for i in range(n_mp)
        ]
        if c.use_prompt:
            rng_p = np.random.default_rng([seed, 2, 2])
            self.prompt_ln_nodes = LayerNorm("sge.prompt.ln_nodes", c.d_g, SGE_STAGES)
            self.prompt_ln_tokens = LayerNorm("sge.prompt.ln_tokens", c.d_t, SGE_STAGES)
            self.prompt_attn = MultiHeadAttention("sge.prompt.attn", c.d_g, c.d_t, c.d_g, c.prompt_heads, rng_p,
                                                  SGE_STAGES, out_std=1.0 / np.sqrt(2 * c.d_g))

    def build_graph(self, entity_features: Tensor, node_mask: np.ndarray | None = None) -> SceneGraph:
        f = ad.as_tensor(entity_features)
        if f.ndim == 2:
            f = f.reshape(1, *f.shape)
        if node_mask is None:
            node_mask = np.ones(f.shape[:2], dtype=bool)
        return SceneGraph(self.node_in(f), np.asarray(node_mask, dtype=bool), RAW)

    def message_pass(self, g: SceneGraph) -> SceneGraph:
        if g.state != RAW:
            raise ValueError("message passing runs on the raw graph")
        if g.node_features.shape[1] == 0:
            return g
        x = g.node_features
        for block in self.mp:
            x = block(x, key_mask=g.node_mask)
        return SceneGraph(x, g.node_mask, RAW)

    def inject_prompt(self, g: SceneGraph, prompt: Tensor, prompt_mask: np.ndarray | None = None
                      ) -> tuple[SceneGraph, Tensor | None]:
        """Cross-attend from nodes (queries) to prompt tokens (keys/values).

        Returns the activated graph and the (B, heads, N, N_t) attention
        weights (None when prompt attention is disabled or the graph is empty).
        """
        if g.state != RAW:
            raise ValueError("graph is already activated")
        prompt = ad.as_tensor(prompt)
        if prompt.ndim == 2:
            prompt = prompt.reshape(1, *prompt.shape)
        if prompt_mask is None:
            prompt_mask = np.ones(prompt.shape[:2], dtype=bool)
        if prompt.shape[1] == 0 or not np.asarray(prompt_mask).any(axis=1).all():
            raise ValueError("prompt activation needs at least one prompt token")
        if not self.config.use_prompt or g.node_features.shape[1] == 0:
            return SceneGraph(g.node_features, g.node_mask, ACTIVATED), None
        out, weights = self.prompt_attn(self.prompt_ln_nodes(g.node_features), self.prompt_ln_tokens(prompt),
                                        key_mask=prompt_mask)
        return SceneGraph(g.node_features + out, g.node_mask, ACTIVATED), weights

    def __call__(self, entity_features: Tensor, node_mask, prompt: Tensor, prompt_mask=None) -> SceneGraph:
        g = self.message_pass(self.build_graph(entity_features, node_mask))
        g_act, _ = self.inject_prompt(g, prompt, prompt_mask)
        return g_act


# ---------------------------------------------------------------------------
# single-graph helpers
# ---------------------------------------------------------------------------

def build_graph(entity_features: Tensor, sge: SceneGraphExpression) -> SceneGraph:
    return sge.build_graph(entity_features)


def message_pass(g: SceneGraph, sge: SceneGraphExpression) -> SceneGraph:
    return sge.message_pass(g)


def inject_prompt(g: SceneGraph, prompt: Tensor, sge: SceneGraphExpression) -> SceneGraph:
    return sge.inject_prompt(g, prompt)[0]


def sge_forward(fmap: Tensor, masks: np.ndarray, prompt: Tensor, sge: SceneGraphExpression,
                map_to_feature_coords: Callable | None = None) -> SceneGraph:
    """Full graph pipeline for one image: returns G' with exactly one node per mask."""
    f_e = pool_mask_features(fmap, masks, map_to_feature_coords, sge.config.sample_points_cap)
    return sge(f_e, None, prompt)

"""Token-sequence assembly and the toy decoder-only language model.

The input layout is ``[visual tokens, <sg>, graph tokens, <text>, text tokens]``;
with the graph branch disabled it collapses to ``[visual tokens, text tokens]``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, ShapeError, Tensor
from .layers import LayerNorm, Linear, Module, TransformerBlock
from .sge import ACTIVATED, SceneGraph

LLM_STAGES = (3,)
SENTINEL_STAGES = (2, 3)
VISUAL_PROJ_STAGES = (1, 3)
GRAPH_PROJ_STAGES = (2, 3)


class SequenceTooLongError(ValueError):
    pass


@dataclass(frozen=True)
class LLMConfig:
    vocab_size: int = 46
    d_llm: int = 32
    layers: int = 2
    heads: int = 4
    ffn_mult: int = 4
    max_len: int = 64

    def to_dict(self) -> dict:
        return asdict(self)


class ToyLLM(Module):
    """Decoder-only transformer with learned absolute positions.

    The embedding table is the concatenation of the regular token rows
    (``llm.embed.tokens``) and the two sentinel rows (``llm.embed.sentinel``),
    which carry their own stage tags.
    """

    def __init__(self, config: LLMConfig, seed: int = 0):
        self.config = config
        c = config
        rng = np.random.default_rng([seed, 1])
        self.tokens = Parameter("llm.embed.tokens", rng.normal(0, 0.5, size=(c.vocab_size - 2, c.d_llm)), LLM_STAGES)
        self.sentinel = Parameter("llm.embed.sentinel", rng.normal(0, 0.5, size=(2, c.d_llm)), SENTINEL_STAGES)
        self.pos = Parameter("llm.embed.pos", rng.normal(0, 0.1, size=(c.max_len, c.d_llm)), LLM_STAGES)
        self.blocks = [
            TransformerBlock(f"llm.layer{i}", c.d_llm, c.heads, c.ffn_mult * c.d_llm, rng, LLM_STAGES,
                             causal=True, n_blocks=c.layers)
            for i in range(c.layers)
        ]
        self.ln_f = LayerNorm("llm.ln_f", c.d_llm, LLM_STAGES)
        self.head = Linear("llm.head", c.d_llm, c.vocab_size, rng, LLM_STAGES)

    def embedding_table(self) -> Tensor:
        return ad.concat([self.tokens, self.sentinel], axis=0)

    def embed(self, ids) -> Tensor:
        return ad.take_rows(self.embedding_table(), ids)

    def hidden(self, x: Tensor) -> Tensor:
        """Final-norm hidden states for input embeddings x of shape (B, L, d)."""
        length = x.shape[1]
        if length > self.config.max_len:
            raise SequenceTooLongError(f"sequence length {length} exceeds max_len {self.config.max_len}")
        x = x + self.pos[:length]
        for block in self.blocks:
            x = block(x)
        return self.ln_f(x)

    def logits(self, h: Tensor) -> Tensor:
        return self.head(h)


# ---------------------------------------------------------------------------
# sequence assembly
# ---------------------------------------------------------------------------

@dataclass
class SequenceLayout:
    """Closed-form segment offsets; ``sg_open``/``text_open`` are None without the graph branch."""

    n_visual: int
    n_graph: int | None
    n_text: int

    @property
    def has_graph(self) -> bool:
        return self.n_graph is not None

    @property
    def sg_open(self) -> int | None:
        return self.n_visual if self.has_graph else None

    @property
    def graph(self) -> tuple[int, int] | None:
        if not self.has_graph:
            return None
        return self.n_visual + 1, self.n_visual + 1 + self.n_graph

    @property
    def text_open(self) -> int | None:
        return self.n_visual + 1 + self.n_graph if self.has_graph else None

    @property
    def text(self) -> tuple[int, int]:
        start = self.n_visual + 2 + self.n_graph if self.has_graph else self.n_visual
        return start, start + self.n_text

    @property
    def length(self) -> int:
        return self.text[1]


@dataclass
class TokenSequence:
    embeddings: Tensor  # (L, d_llm)
    layout: SequenceLayout
    targets: np.ndarray  # (L,) token id at each text position, -1 elsewhere
    loss_mask: np.ndarray  # (L,) bool, True at answer positions
    roles: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return self.layout.length


def _normalize_spans(answer_span, n_text: int) -> list[tuple[int, int]]:
    spans = [answer_span] if answer_span and isinstance(answer_span[0], (int, np.integer)) else list(answer_span or [])
    spans = sorted((int(a), int(b)) for a, b in spans)
    for a, b in spans:
        if not 0 <= a < b <= n_text:
            raise ValueError(f"answer span {(a, b)} out of range for {n_text} text tokens")
    for (_, b0), (a1, _) in zip(spans, spans[1:]):
        if a1 < b0:
            raise ValueError(f"overlapping answer spans {spans}")
    return spans


def assemble_sequence(visual_tokens: Tensor, graph_tokens: Tensor | None, text_embeddings: Tensor,
                      answer_span, sentinels: Tensor | None = None, text_ids=None) -> TokenSequence:
    """Concatenate the segments in order and mark the answer positions.

    ``graph_tokens=None`` selects the layout without graph branch (no
    sentinels). ``sentinels`` is the (2, d) pair of ``<sg>``/``<text>`` rows.
    """
    visual_tokens, text_embeddings = ad.as_tensor(visual_tokens), ad.as_tensor(text_embeddings)
    d = visual_tokens.shape[1]
    parts = [visual_tokens]
    roles = ["visual"] * visual_tokens.shape[0]
    if graph_tokens is not None:
        graph_tokens = ad.as_tensor(graph_tokens)
        if sentinels is None or sentinels.shape != (2, d):
            raise ShapeError(f"need a (2, {d}) sentinel pair with graph tokens")
        if graph_tokens.shape[1:] != (d,):
            raise ShapeError(f"graph tokens {graph_tokens.shape} do not match width {d}")
        parts += [sentinels[0:1], graph_tokens, sentinels[1:2]]
        roles += ["sg_open"] + ["graph"] * graph_tokens.shape[0] + ["text_open"]
    if text_embeddings.shape[1:] != (d,):
        raise ShapeError(f"text embeddings {text_embeddings.shape} do not match width {d}")
    parts.append(text_embeddings)
    roles += ["text"] * text_embeddings.shape[0]

    n_text = text_embeddings.shape[0]
    layout = SequenceLayout(visual_tokens.shape[0], None if graph_tokens is None else graph_tokens.shape[0], n_text)
    spans = _normalize_spans(answer_span, n_text)
    targets = np.full(layout.length, -1, dtype=np.int64)
    t0, t1 = layout.text
    if text_ids is not None:
        targets[t0:t1] = np.asarray(text_ids, dtype=np.int64)
    loss_mask = np.zeros(layout.length, dtype=bool)
    for a, b in spans:
        loss_mask[t0 + a:t0 + b] = True
    return TokenSequence(ad.concat(parts, axis=0), layout, targets, loss_mask, roles)


def project_visual(fmap: Tensor, proj: Linear) -> Tensor:
    """Affine-map F_v (d_e, h_v, w_v) to (h_v*w_v, d_llm) tokens in row-major grid order."""
    fmap = ad.as_tensor(fmap)
    d_e = fmap.shape[0]
    if proj.weight.shape[0] != d_e:
        raise ShapeError(f"visual projection expects d_e={proj.weight.shape[0]}, got feature map {fmap.shape}")
    return proj(fmap.reshape(d_e, -1).T)


def project_graph(g: SceneGraph, proj: Linear) -> Tensor:
    """Affine-map the nodes of an activated graph to (N, d_llm) tokens."""
    if g.state != ACTIVATED:
        raise ValueError("graph tokens come from the activated graph G'")
    if g.batch_size != 1:
        raise ValueError("project_graph takes a single graph")
    return proj(g.node_features[0])


def llm_forward(seq: TokenSequence, model: ToyLLM) -> Tensor:
    """Logits H_a of shape (len, vocab) for an assembled sequence."""
    x = seq.embeddings.reshape(1, *seq.embeddings.shape)
    return model.logits(model.hidden(x))[0]


def autoregressive_loss(logits: Tensor, targets, loss_mask) -> Tensor:
    """Mean next-token cross-entropy at masked positions; position i is scored from row i-1."""
    loss_mask = np.asarray(loss_mask, dtype=bool)
    targets = np.asarray(targets, dtype=np.int64)
    pos = np.flatnonzero(loss_mask)
    if len(pos) == 0:
        raise ValueError("loss mask selects no positions")
    if pos[0] == 0:
        raise ValueError("position 0 has no preceding prediction")
    return ad.cross_entropy(ad.take_rows(logits, pos - 1), targets[pos])

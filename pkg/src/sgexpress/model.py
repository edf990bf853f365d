"""The full vision-language model and its batched training/inference path."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .layers import Linear, Module
from .perception import EncoderConfig, QASample, SceneConfig, render_feature_map
from .sge import SceneGraphExpression, SGEConfig, pooling_matrix
from .vlm import GRAPH_PROJ_STAGES, VISUAL_PROJ_STAGES, LLMConfig, ToyLLM
from .vocab import Vocabulary


@dataclass(frozen=True)
class ModelConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    sge: SGEConfig = field(default_factory=SGEConfig)
    llm: LLMConfig = field(default_factory=LLMConfig)
    use_graph: bool = True
    seed: int = 0

    def __post_init__(self):
        vocab = Vocabulary(self.scene.category_count)
        if self.llm.vocab_size != len(vocab):
            object.__setattr__(self, "llm", replace(self.llm, vocab_size=len(vocab)))

    @property
    def vocab(self) -> Vocabulary:
        return Vocabulary(self.scene.category_count)

    def with_flags(self, sg: bool = True, mp: bool = True, prompt: bool = True) -> ModelConfig:
        if (mp or prompt) and not sg:
            raise ValueError("message passing or prompt activation needs the graph branch")
        return replace(self, use_graph=sg, sge=replace(self.sge, use_mp=mp, use_prompt=prompt))

    def to_dict(self) -> dict:
        return {
            "scene": self.scene.to_dict(),
            "encoder": self.encoder.to_dict(),
            "sge": self.sge.to_dict(),
            "llm": self.llm.to_dict(),
            "use_graph": self.use_graph,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        return cls(
            scene=SceneConfig.from_dict(d["scene"]),
            encoder=EncoderConfig(**d["encoder"]),
            sge=SGEConfig(**d["sge"]),
            llm=LLMConfig(**d["llm"]),
            use_graph=d["use_graph"],
            seed=d["seed"],
        )


class SceneGraphVLM(Module):
    def __init__(self, config: ModelConfig | None = None):
        config = config or ModelConfig()
        self.config = config
        self.vocab = config.vocab
        enc = config.encoder.resolved(config.scene.canvas)
        self.feature_hw = (enc.h_v, enc.w_v)
        if config.sge.d_e != enc.d_e:
            raise ValueError(f"SGE d_e={config.sge.d_e} differs from encoder d_e={enc.d_e}")
        if config.sge.d_t != config.llm.d_llm:
            raise ValueError("prompt features are LLM token embeddings, so d_t must equal d_llm")
        self.visual_proj = Linear("proj.visual", enc.d_e, config.llm.d_llm,
                                  np.random.default_rng([config.seed, 3, 0]), VISUAL_PROJ_STAGES)
        if config.use_graph:
            self.sge = SceneGraphExpression(config.sge, config.seed)
            self.graph_proj = Linear("proj.graph", config.sge.d_g, config.llm.d_llm,
                                     np.random.default_rng([config.seed, 3, 1]), GRAPH_PROJ_STAGES)
        self.llm = ToyLLM(config.llm, config.seed)
        names = [n for n, _ in self.named_parameters()]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names")

    @property
    def use_graph(self) -> bool:
        return self.config.use_graph

    def param_dict(self) -> dict[str, Parameter]:
        return dict(self.named_parameters())

    def topology(self) -> list[tuple[str, tuple[int, ...]]]:
        return [(n, tuple(p.shape)) for n, p in self.named_parameters()]

    def checksum(self) -> str:
        """Hex digest over every parameter's bytes, in registration order."""
        import hashlib

        h = hashlib.sha256()
        for name, p in self.named_parameters():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    # -- batched path ----------------------------------------------------
    def hidden_states(self, batch: Batch) -> Tensor:
        llm = self.llm
        b, p, d_e = batch.fv.shape
        d = self.config.llm.d_llm
        table = llm.embedding_table()
        rows = [self.visual_proj(Tensor(batch.fv)).reshape(b * p, d)]
        if self.use_graph:
            prompt = ad.take_rows(table, batch.prompt_ids)
            graph = self.sge(Tensor(batch.entity_features), batch.node_mask, prompt, batch.prompt_mask)
            n = graph.node_features.shape[1]
            gtok = self.graph_proj(graph.node_features)
            rows.append(gtok.reshape(b * n, d))
            rows.append(ad.take_rows(table, [self.vocab.sg_id, self.vocab.text_id]))
        rows.append(ad.take_rows(table, batch.text_ids.reshape(-1)))
        rows.append(Tensor(np.zeros((1, d))))
        x = ad.take_rows(ad.concat(rows, axis=0), batch.seq_index)
        return llm.hidden(x)

    def logits_at(self, batch: Batch, rows: np.ndarray) -> Tensor:
        h = self.hidden_states(batch)
        flat = h.reshape(-1, h.shape[-1])
        return self.llm.logits(ad.take_rows(flat, rows))

    def loss(self, batch: Batch) -> Tensor:
        if len(batch.loss_rows) == 0:
            raise ValueError("batch has no supervised positions")
        return ad.cross_entropy(self.logits_at(batch, batch.loss_rows), batch.loss_targets)

    def predict(self, batch: Batch, candidates: Sequence[int] | None = None) -> np.ndarray:
        """Greedy first answer token per sample, restricted to ``candidates`` if given."""
        with ad.no_grad():
            logits = self.logits_at(batch, batch.answer_rows).data
        if candidates is None:
            return logits.argmax(axis=1)
        cand = np.asarray(candidates)
        return cand[logits[:, cand].argmax(axis=1)]

    def teacher_forced_predictions(self, batch: Batch) -> np.ndarray:
        """Argmax token at every supervised position (aligned with ``batch.loss_targets``)."""
        with ad.no_grad():
            return self.logits_at(batch, batch.loss_rows).data.argmax(axis=1)


# ---------------------------------------------------------------------------
# data preparation and collation
# ---------------------------------------------------------------------------

@dataclass
class PreparedSample:
    fv: np.ndarray  # (P, d_e), row-major grid
    pool: np.ndarray  # (N, P)
    prompt_ids: tuple[int, ...]
    answer_ids: tuple[int, ...]
    task: str

    @property
    def text_ids(self) -> tuple[int, ...]:
        return tuple(self.prompt_ids) + tuple(self.answer_ids)


class Preparer:
    """Renders feature maps and pooling weights, cached per scene."""

    def __init__(self, config: ModelConfig):
        self.encoder = config.encoder
        self.cap = config.sge.sample_points_cap
        self._cache: dict = {}

    def scene_arrays(self, scene) -> tuple[np.ndarray, np.ndarray]:
        key = (scene.seed, scene.config)
        hit = self._cache.get(key)
        if hit is None:
            fmap = render_feature_map(scene, self.encoder).data
            d_e, h_v, w_v = fmap.shape
            fv = fmap.reshape(d_e, h_v * w_v).T.copy()
            pool = pooling_matrix(scene.masks, (h_v, w_v), sample_points_cap=self.cap) if scene.entities \
                else np.zeros((0, h_v * w_v))
            hit = self._cache[key] = (fv, pool)
        return hit

    def __call__(self, sample: QASample) -> PreparedSample:
        fv, pool = self.scene_arrays(sample.scene)
        return PreparedSample(fv, pool, tuple(sample.prompt_ids), tuple(sample.answer_ids), sample.task)

    def prepare_all(self, samples: Sequence[QASample]) -> list[PreparedSample]:
        return [self(s) for s in samples]


@dataclass
class Batch:
    fv: np.ndarray  # (B, P, d_e)
    entity_features: np.ndarray  # (B, Nmax, d_e)
    node_mask: np.ndarray  # (B, Nmax)
    prompt_ids: np.ndarray  # (B, Tq)
    prompt_mask: np.ndarray
    text_ids: np.ndarray  # (B, T)
    seq_index: np.ndarray  # (B, L) rows of the stacked segment table
    lengths: np.ndarray  # (B,)
    loss_rows: np.ndarray  # flat (b * L + pos - 1) rows predicting answer tokens
    loss_targets: np.ndarray
    answer_rows: np.ndarray  # (B,) row predicting each sample's first answer token
    answer_targets: np.ndarray
    tasks: list[str]

    @property
    def size(self) -> int:
        return len(self.tasks)


def collate(samples: Sequence[PreparedSample], use_graph: bool) -> Batch:
    """Pad a list of prepared samples and precompute the sequence gather index.

    Segment rows are stacked as [visual (B*P), graph (B*Nmax), <sg>, <text>,
    text (B*T), zero]; each sequence position indexes one row. Padding sits
    after the last text token, so causal attention never reaches it.
    """
    b = len(samples)
    p, d_e = samples[0].fv.shape
    n_max = max(s.pool.shape[0] for s in samples)
    tq = max(len(s.prompt_ids) for s in samples)
    t = max(len(s.text_ids) for s in samples)

    fv = np.stack([s.fv for s in samples])
    pool = np.zeros((b, n_max, p))
    node_mask = np.zeros((b, n_max), dtype=bool)
    prompt_ids = np.zeros((b, tq), dtype=np.int64)
    prompt_mask = np.zeros((b, tq), dtype=bool)
    text_ids = np.zeros((b, t), dtype=np.int64)
    for i, s in enumerate(samples):
        n = s.pool.shape[0]
        pool[i, :n] = s.pool
        node_mask[i, :n] = True
        prompt_ids[i, :len(s.prompt_ids)] = s.prompt_ids
        prompt_mask[i, :len(s.prompt_ids)] = True
        text_ids[i, :len(s.text_ids)] = s.text_ids
    entity_features = pool @ fv

    graph_off = b * p
    sent_off = graph_off + (b * n_max if use_graph else 0)
    text_off = sent_off + (2 if use_graph else 0)
    zero_row = text_off + b * t

    lengths = np.array([p + len(s.text_ids) + ((2 + s.pool.shape[0]) if use_graph else 0) for s in samples])
    length = int(lengths.max())
    seq_index = np.full((b, length), zero_row, dtype=np.int64)
    loss_rows, loss_targets, answer_rows, answer_targets = [], [], [], []
    for i, s in enumerate(samples):
        seq_index[i, :p] = np.arange(p) + i * p
        pos = p
        if use_graph:
            n = s.pool.shape[0]
            seq_index[i, pos] = sent_off
            seq_index[i, pos + 1:pos + 1 + n] = graph_off + i * n_max + np.arange(n)
            seq_index[i, pos + 1 + n] = sent_off + 1
            pos += 2 + n
        nt = len(s.text_ids)
        seq_index[i, pos:pos + nt] = text_off + i * t + np.arange(nt)
        a0 = pos + len(s.prompt_ids)
        for j, tok in enumerate(s.answer_ids):
            loss_rows.append(i * length + a0 + j - 1)
            loss_targets.append(tok)
        answer_rows.append(i * length + a0 - 1)
        answer_targets.append(s.answer_ids[0] if s.answer_ids else -1)
    return Batch(fv, entity_features, node_mask, prompt_ids, prompt_mask, text_ids, seq_index, lengths,
                 np.array(loss_rows, dtype=np.int64), np.array(loss_targets, dtype=np.int64),
                 np.array(answer_rows, dtype=np.int64), np.array(answer_targets, dtype=np.int64),
                 [s.task for s in samples])

"""Relation, counting and caption metrics, and the ablation grids.

Expected answers are recomputed from scene geometry with the brute-force
oracle, never read back from the stored answer tokens. Relation and counting
answers are decoded greedily over the task's answer tokens only.
"""

from __future__ import annotations

import json
import statistics
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import config as cfg
from .data import caption_dataset, count_dataset, relation_dataset
from .model import Preparer, SceneGraphVLM, collate
from .perception import QASample, SyntheticScene, make_count_qa, oracle_relations
from .training import PipelineResult, run_pipeline
from .vocab import NONE_ANSWER, PREDICATES, Vocabulary, category_name

METRICS = ("relation_accuracy", "counting_accuracy", "caption_token_accuracy")


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class AblationFlags:
    """Which graph components exist and how relation data is used.

    ``sge_d``: relation QA is part of training. ``sge_t``: it gets its own
    stage (stage 2) instead of being folded into stage 3.
    """

    sg: bool = True
    mp: bool = True
    prompt: bool = True
    sge_d: bool = True
    sge_t: bool = True

    def __post_init__(self):
        if (self.mp or self.prompt) and not self.sg:
            raise EvaluationError("message passing and prompt activation need the graph branch (sg)")
        if self.sge_t and not (self.sg and self.sge_d):
            raise EvaluationError("a separate graph stage needs the graph branch and relation data")

    def to_dict(self) -> dict:
        return asdict(self)


TABLE3_ROWS: tuple[tuple[str, AblationFlags], ...] = (
    ("no-SG", AblationFlags(sg=False, mp=False, prompt=False, sge_t=False)),
    ("SG", AblationFlags(mp=False, prompt=False)),
    ("SG+MP", AblationFlags(prompt=False)),
    ("SG+Prompt", AblationFlags(mp=False)),
    ("SG+MP+Prompt", AblationFlags()),
)

TABLE4_ROWS: tuple[tuple[str, AblationFlags], ...] = (
    ("SGE-D", AblationFlags(sg=False, mp=False, prompt=False, sge_t=False)),
    ("SGE+SGE-D", AblationFlags(sge_t=False)),
    ("SGE+SGE-D+SGE-T", AblationFlags()),
)


# ---------------------------------------------------------------------------
# expected answers
# ---------------------------------------------------------------------------

def _resolve_reference(scene: SyntheticScene, tokens: Sequence[str]) -> int | None:
    """Entity index named by ``[category]`` or ``[category, "#k"]``; None if absent."""
    name = tokens[0]
    if name not in {category_name(k) for k in range(scene.config.category_count)}:
        raise EvaluationError(f"{name!r} is not a category name")
    same = [i for i, e in enumerate(scene.entities) if category_name(e.category_id) == name]
    if not same:
        return None
    k = int(tokens[1][1:]) - 1 if len(tokens) > 1 else 0
    if not 0 <= k < len(same):
        raise EvaluationError(f"reference {' '.join(tokens)} does not exist in the scene")
    return same[k]


def expected_relation(sample: QASample, vocab: Vocabulary) -> str:
    words = vocab.decode(sample.prompt_ids)
    if words[:2] != ["what", "is"] or words[-1] != "?" or "to" not in words:
        raise EvaluationError(f"not a relation question: {' '.join(words)}")
    cut = words.index("to")
    s = _resolve_reference(sample.scene, words[2:cut])
    o = _resolve_reference(sample.scene, words[cut + 1:-1])
    if s is None or o is None:
        return NONE_ANSWER
    for si, p, oi in oracle_relations(sample.scene):
        if (si, oi) == (s, o):
            return PREDICATES[p]
    raise EvaluationError(f"no relation holds for the pair in: {' '.join(words)}")


def expected_count(sample: QASample, vocab: Vocabulary) -> str:
    words = vocab.decode(sample.prompt_ids)
    if words[:2] != ["how", "many"]:
        raise EvaluationError(f"not a counting question: {' '.join(words)}")
    return str(sum(1 for e in sample.scene.entities if category_name(e.category_id) == words[2]))


def expected_caption(sample: QASample) -> list[str]:
    return [category_name(k) for k in sorted(sample.scene.categories)] + ["."]


def expected_answer_ids(sample: QASample, vocab: Vocabulary) -> tuple[int, ...]:
    if sample.task == "relation":
        return (vocab.id(expected_relation(sample, vocab)),)
    if sample.task == "count":
        return (vocab.id(expected_count(sample, vocab)),)
    if sample.task == "caption":
        return vocab.encode(expected_caption(sample))
    raise EvaluationError(f"unknown task {sample.task!r}")


# ---------------------------------------------------------------------------
# answer sources
# ---------------------------------------------------------------------------

class ModelAnswerer:
    """Greedy answers from a trained model, batched."""

    def __init__(self, model: SceneGraphVLM, preparer: Preparer | None = None, batch_size: int = 64):
        self.model = model
        self.vocab = model.vocab
        self.preparer = preparer or Preparer(model.config)
        self.batch_size = batch_size

    def _batches(self, samples):
        for i in range(0, len(samples), self.batch_size):
            yield collate(self.preparer.prepare_all(samples[i:i + self.batch_size]), self.model.use_graph)

    def first_tokens(self, samples: Sequence[QASample], candidates: Sequence[int]) -> np.ndarray:
        out = [self.model.predict(b, candidates) for b in self._batches(list(samples))]
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)

    def teacher_forced(self, samples: Sequence[QASample]) -> list[np.ndarray]:
        out = []
        for b in self._batches(list(samples)):
            flat = self.model.teacher_forced_predictions(b)
            counts = np.bincount(b.loss_rows // b.seq_index.shape[1], minlength=b.size)
            out.extend(np.split(flat, np.cumsum(counts)[:-1]))
        return out


class OracleAnswerer:
    """Answers recomputed from scene geometry; an upper bound for the harness."""

    def __init__(self, vocab: Vocabulary):
        self.vocab = vocab

    def first_tokens(self, samples, candidates) -> np.ndarray:
        return np.array([expected_answer_ids(s, self.vocab)[0] for s in samples], dtype=np.int64)

    def teacher_forced(self, samples) -> list[np.ndarray]:
        return [np.array(expected_answer_ids(s, self.vocab)) for s in samples]


class ConstantAnswerer:
    """Always answers with one token."""

    def __init__(self, token_id: int):
        self.token_id = int(token_id)

    def first_tokens(self, samples, candidates) -> np.ndarray:
        return np.full(len(samples), self.token_id, dtype=np.int64)

    def teacher_forced(self, samples) -> list[np.ndarray]:
        return [np.full(len(s.answer_ids), self.token_id, dtype=np.int64) for s in samples]


def _answerer(source):
    return ModelAnswerer(source) if isinstance(source, SceneGraphVLM) else source


def _vocab_of(source, samples) -> Vocabulary:
    vocab = getattr(source, "vocab", None)
    return vocab if vocab is not None else Vocabulary(samples[0].scene.config.category_count)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def evaluate_relations(model, testset: Sequence[QASample]) -> float:
    """Exact-match accuracy of the first answer token, decoded over the predicate and ``none`` tokens.

    ``model`` is a SceneGraphVLM or any answer source (oracle, constant).
    """
    if not testset:
        raise EvaluationError("empty relation test set")
    source = _answerer(model)
    vocab = _vocab_of(source, testset)
    expected = np.array([vocab.id(expected_relation(s, vocab)) for s in testset])
    got = source.first_tokens(testset, vocab.relation_answer_ids)
    return float(np.mean(got == expected))


def count_questions(scenes: Sequence[SyntheticScene], vocab: Vocabulary) -> list[QASample]:
    """One question per category present in each scene, plus one about the first absent category."""
    out = []
    for scene in scenes:
        present = sorted(set(scene.categories))
        absent = [k for k in range(scene.config.category_count) if k not in present]
        for k in present + absent[:1]:
            out.append(make_count_qa(scene, vocab, k))
    return out


def counting_eval(model, scenes) -> float:
    """Exact match on the numeral answering "how many <category> ?".

    ``scenes`` may be counting samples or bare scenes (see :func:`count_questions`).
    An empty input scores 0.0.
    """
    scenes = list(scenes)
    if not scenes:
        return 0.0
    source = _answerer(model)
    if isinstance(scenes[0], SyntheticScene):
        vocab = getattr(source, "vocab", None) or Vocabulary(scenes[0].config.category_count)
        samples = count_questions(scenes, vocab)
    else:
        samples = scenes
        vocab = _vocab_of(source, samples)
    expected = np.array([vocab.id(expected_count(s, vocab)) for s in samples])
    got = source.first_tokens(samples, vocab.numeral_ids)
    return float(np.mean(got == expected))


def caption_token_accuracy(model, testset: Sequence[QASample]) -> float:
    """Teacher-forced argmax accuracy over all caption answer tokens."""
    if not testset:
        raise EvaluationError("empty caption test set")
    source = _answerer(model)
    vocab = _vocab_of(source, testset)
    hits = total = 0
    for s, pred in zip(testset, source.teacher_forced(testset)):
        exp = np.array(vocab.encode(expected_caption(s)))
        if len(pred) != len(exp):
            raise EvaluationError("caption prediction length does not match the reference")
        hits += int(np.sum(pred == exp))
        total += len(exp)
    return hits / total


# ---------------------------------------------------------------------------
# data and training per grid cell
# ---------------------------------------------------------------------------

@dataclass
class SeedData:
    train: dict[str, list[QASample]]
    test: dict[str, list[QASample]]


def build_data(config: Mapping, seed: int) -> SeedData:
    scene = cfg.model_config(config).scene
    d = config["data"]
    train = {"caption": caption_dataset(d["caption"], seed, "train", scene),
             "relation": relation_dataset(d["relation"], seed, "train", scene),
             "count": count_dataset(d["count"], seed, "train", scene)}
    test = {"relation": relation_dataset(d["test_relation"], seed, "test", scene),
            "count": count_dataset(d["test_count"], seed, "test", scene),
            "caption": caption_dataset(d["test_caption"], seed, "test", scene)}
    return SeedData(train, test)


def train_cell(config: Mapping, flags: AblationFlags, seed: int, data: SeedData,
               preparer: Preparer | None = None, checkpoint_dir=None) -> PipelineResult:
    model = SceneGraphVLM(cfg.model_config(config, seed=seed, flags=flags.to_dict()))
    plans = cfg.stage_plans(config, seed=seed, sge_d=flags.sge_d)
    return run_pipeline(model, plans, data.train, separate_stage2=flags.sge_t,
                        preparer=preparer or Preparer(model.config), checkpoint_dir=checkpoint_dir)


def evaluate_model(model, data: SeedData, preparer: Preparer | None = None) -> dict[str, float]:
    source = ModelAnswerer(model, preparer) if isinstance(model, SceneGraphVLM) else model
    out = {}
    if data.test["relation"]:
        out["relation_accuracy"] = evaluate_relations(source, data.test["relation"])
    if data.test["count"]:
        out["counting_accuracy"] = counting_eval(source, data.test["count"])
    if data.test["caption"]:
        out["caption_token_accuracy"] = caption_token_accuracy(source, data.test["caption"])
    return out


# ---------------------------------------------------------------------------
# reports and the grid
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    label: str
    flags: AblationFlags
    seeds: list[int]
    values: dict[str, list[float]] = field(default_factory=dict)  # metric -> one value per seed
    n_parameters: int = 0
    sge_parameters: int = 0

    @property
    def medians(self) -> dict[str, float]:
        return {m: float(statistics.median(v)) for m, v in self.values.items() if v}

    def median(self, metric: str = "relation_accuracy") -> float:
        return self.medians[metric]

    def to_record(self) -> dict:
        return {"label": self.label, "flags": self.flags.to_dict(), "seeds": list(self.seeds),
                "values": {m: list(v) for m, v in sorted(self.values.items())},
                "medians": dict(sorted(self.medians.items())),
                "n_parameters": self.n_parameters, "sge_parameters": self.sge_parameters}


def _flag_marks(f: AblationFlags) -> str:
    return "  ".join(("x" if v else "-").center(w) for v, w in
                     ((f.sg, 2), (f.mp, 2), (f.prompt, 6), (f.sge_d, 5), (f.sge_t, 5)))


def format_reports(reports: Sequence[EvalReport]) -> str:
    """Plain-text table: flag columns, median metrics, then every seed's relation accuracy."""
    head = f"{'row':<16}  SG  MP  Prompt  SGE-D  SGE-T  {'Rel':>6}  {'Count':>6}  {'Cap':>6}  params  per-seed Rel"
    lines = [head, "-" * len(head)]
    for r in reports:
        med = r.medians
        cells = "  ".join(f"{med[m]:6.3f}" if m in med else f"{'n/a':>6}" for m in METRICS)
        seeds = " ".join(f"{v:.3f}" for v in r.values.get("relation_accuracy", []))
        lines.append(f"{r.label:<16}  {_flag_marks(r.flags)}  {cells}  {r.n_parameters:6d}  {seeds}")
    return "\n".join(lines) + "\n"


def reports_jsonl(reports: Sequence[EvalReport]) -> str:
    return "".join(json.dumps(r.to_record(), sort_keys=True) + "\n" for r in reports)


def _cell_key(config: Mapping, flags: AblationFlags, seed: int) -> str:
    return json.dumps([config, flags.to_dict(), seed], sort_keys=True)


def run_ablation_grid(rows: Sequence[tuple[str, AblationFlags]] | Sequence[AblationFlags], config: Mapping,
                      seeds: Sequence[int] | None = None, cache: dict | None = None,
                      progress: Callable[[str], None] | None = None) -> list[EvalReport]:
    """Train and evaluate every (row, seed) cell with shared per-seed data.

    Rows with identical flags reuse cached cells, both within a call and
    across calls that share ``cache``.
    """
    rows = [r if isinstance(r, tuple) else (str(i), r) for i, r in enumerate(rows)]
    for _, flags in rows:
        if not isinstance(flags, AblationFlags):
            raise EvaluationError(f"expected AblationFlags, got {flags!r}")
    seeds = list(config["seeds"] if seeds is None else seeds)
    if len(seeds) < 1:
        raise EvaluationError("need at least one seed")
    cache = {} if cache is None else cache
    data_cache: dict[int, tuple[SeedData, Preparer]] = {}
    reports = []
    for label, flags in rows:
        report = EvalReport(label, flags, seeds, {})
        for seed in seeds:
            key = _cell_key(config, flags, seed)
            if key not in cache:
                if seed not in data_cache:
                    data = build_data(config, seed)
                    data_cache[seed] = (data, Preparer(cfg.model_config(config, seed=seed)))
                data, prep = data_cache[seed]
                result = train_cell(config, flags, seed, data, prep)
                metrics = evaluate_model(result.model, data, prep)
                n_sge = sum(p.size for n, p in result.model.named_parameters() if n.startswith("sge."))
                cache[key] = (metrics, result.model.n_parameters(), n_sge)
                if progress:
                    progress(f"{label} seed={seed} " + " ".join(f"{m}={v:.3f}" for m, v in sorted(metrics.items())))
            metrics, report.n_parameters, report.sge_parameters = cache[key]
            for m, v in metrics.items():
                report.values.setdefault(m, []).append(v)
        reports.append(report)
    return reports

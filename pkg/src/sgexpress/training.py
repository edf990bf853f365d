"""Three-stage training schedule, freeze contracts and the AdamW optimizer."""

from __future__ import annotations

import fnmatch
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter
from .model import Preparer, SceneGraphVLM, collate
from .perception import QASample

STAGES = (1, 2, 3)
DEFAULT_LR = {1: 2e-3, 2: 2e-5, 3: 2e-5}
DEFAULT_BATCH_SIZE = 8
TRAINABLE_PATTERNS = {
    1: frozenset({"proj.visual.*"}),
    2: frozenset({"sge.*", "proj.graph.*", "llm.embed.sentinel"}),
    3: frozenset({"*"}),
}
DEFAULT_DATASETS = {1: ("caption",), 2: ("relation",), 3: ("caption", "relation", "count")}

BETAS = (0.9, 0.999)
EPS = 1e-8


class StagePlanError(ValueError):
    pass


class FreezeViolation(RuntimeError):
    pass


class NonFiniteLossError(FloatingPointError):
    def __init__(self, stage: int, step: int, batch_seed: tuple[int, ...], value: float):
        super().__init__(f"non-finite loss {value} at stage {stage} step {step} (batch seed {list(batch_seed)})")
        self.stage, self.step, self.batch_seed, self.value = stage, step, batch_seed, value


def matches(name: str, patterns) -> bool:
    return any(fnmatch.fnmatchcase(name, p) for p in patterns)


@dataclass(frozen=True)
class StagePlan:
    stage_id: int
    trainable_names: frozenset[str]
    learning_rate: float
    datasets: tuple[str, ...]
    steps: int = 0
    batch_size: int = DEFAULT_BATCH_SIZE
    seed: int = 0
    weight_decay: float = 0.0

    def trainable(self, model: SceneGraphVLM) -> dict[str, Parameter]:
        return {n: p for n, p in model.named_parameters() if matches(n, self.trainable_names)}

    def to_dict(self) -> dict:
        return {"stage_id": self.stage_id, "trainable_names": sorted(self.trainable_names),
                "learning_rate": self.learning_rate, "datasets": list(self.datasets), "steps": self.steps,
                "batch_size": self.batch_size, "seed": self.seed, "weight_decay": self.weight_decay}


def configure_stage(stage_id: int, overrides: Mapping | None = None) -> StagePlan:
    """Default plan for a stage, with validated overrides.

    Overrides may change the learning rate, step count, batch size, seed,
    weight decay and dataset binding. The trainable set is fixed per stage;
    an override naming a different set is rejected.
    """
    if stage_id not in STAGES:
        raise StagePlanError(f"stage id must be one of {STAGES}, got {stage_id!r}")
    overrides = dict(overrides or {})
    unknown = set(overrides) - {"trainable_names", "learning_rate", "datasets", "steps", "batch_size", "seed",
                                "weight_decay"}
    if unknown:
        raise StagePlanError(f"unknown stage settings {sorted(unknown)}")
    if "trainable_names" in overrides and frozenset(overrides["trainable_names"]) != TRAINABLE_PATTERNS[stage_id]:
        raise StagePlanError(f"stage {stage_id} trains exactly {sorted(TRAINABLE_PATTERNS[stage_id])}, "
                             f"got {sorted(overrides['trainable_names'])}")
    plan = StagePlan(stage_id, TRAINABLE_PATTERNS[stage_id], DEFAULT_LR[stage_id], DEFAULT_DATASETS[stage_id])
    plan = replace(plan, **{k: v for k, v in overrides.items() if k != "trainable_names"})
    plan = replace(plan, datasets=tuple(plan.datasets))
    lr = plan.learning_rate
    if not (isinstance(lr, (int, float)) and math.isfinite(lr) and lr > 0):
        raise StagePlanError(f"learning rate must be a positive finite number, got {lr!r}")
    if int(plan.steps) != plan.steps or plan.steps < 0:
        raise StagePlanError(f"steps must be a non-negative integer, got {plan.steps!r}")
    if int(plan.batch_size) != plan.batch_size or plan.batch_size < 1:
        raise StagePlanError(f"batch size must be a positive integer, got {plan.batch_size!r}")
    if plan.weight_decay < 0:
        raise StagePlanError("weight decay must be >= 0")
    if not plan.datasets:
        raise StagePlanError("a stage needs at least one dataset")
    return plan


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


def optimizer_step(params: Mapping[str, Parameter], grads: Mapping[str, np.ndarray],
                   state: dict[str, AdamState], lr: float, weight_decay: float = 0.0,
                   betas: tuple[float, float] = BETAS, eps: float = EPS) -> None:
    """One AdamW update, in place, for every parameter in ``params``.

    Moments are created lazily, so only parameters that are actually updated
    ever own state.
    """
    b1, b2 = betas
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            raise KeyError(f"no gradient for trainable parameter {name!r}")
        if g.shape != p.shape:
            raise ad.ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter has {p.shape}")
        s = state.get(name)
        if s is None:
            s = state[name] = AdamState(np.zeros_like(p.data), np.zeros_like(p.data))
        s.t += 1
        s.m = b1 * s.m + (1 - b1) * g
        s.v = b2 * s.v + (1 - b2) * g * g
        m_hat = s.m / (1 - b1 ** s.t)
        v_hat = s.v / (1 - b2 ** s.t)
        if weight_decay:
            p.data = p.data * (1 - lr * weight_decay)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)


# ---------------------------------------------------------------------------
# stage training
# ---------------------------------------------------------------------------

@dataclass
class StepRecord:
    step: int
    loss: float
    grad_norm: float
    lr: float


@dataclass
class TrainTrace:
    stage_id: int
    records: list[StepRecord] = field(default_factory=list)
    checksum: str = ""

    def __len__(self) -> int:
        return len(self.records)

    @property
    def losses(self) -> np.ndarray:
        return np.array([r.loss for r in self.records])

    def to_dict(self) -> dict:
        return {"stage_id": self.stage_id, "checksum": self.checksum,
                "records": [[r.step, r.loss, r.grad_norm, r.lr] for r in self.records]}


def frozen_checksum(model: SceneGraphVLM, trainable: Mapping[str, Parameter]) -> str:
    import hashlib

    h = hashlib.sha256()
    for name, p in model.named_parameters():
        if name not in trainable:
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


def stage_samples(plan: StagePlan, data: Mapping[str, Sequence[QASample]]) -> list[QASample]:
    missing = [d for d in plan.datasets if d not in data]
    if missing:
        raise KeyError(f"stage {plan.stage_id} needs datasets {missing}")
    out: list[QASample] = []
    for name in plan.datasets:
        out.extend(data[name])
    return out


def batch_schedule(n: int, steps: int, batch_size: int, seed: int, stage_id: int) -> list[np.ndarray]:
    """Index lists for every step: reshuffled epochs from a seeded generator."""
    rng = np.random.default_rng([seed, 7, stage_id])
    order = np.empty(0, dtype=np.int64)
    out = []
    for _ in range(steps):
        while len(order) < batch_size:
            order = np.concatenate([order, rng.permutation(n)])
        out.append(order[:batch_size])
        order = order[batch_size:]
    return out


def train_stage(model: SceneGraphVLM, plan: StagePlan, data: Mapping[str, Sequence[QASample]] | Sequence[QASample],
                preparer: Preparer | None = None, optimizer_state: dict[str, AdamState] | None = None,
                on_step: Callable[[StepRecord], None] | None = None) -> TrainTrace:
    """Run ``plan.steps`` AdamW updates on the stage's trainable parameters.

    Frozen parameters have ``requires_grad`` switched off for the duration,
    and their checksum is compared before and after.
    """
    trace = TrainTrace(plan.stage_id)
    params = dict(model.named_parameters())
    trainable = plan.trainable(model)
    before = frozen_checksum(model, trainable)
    if plan.steps == 0:
        trace.checksum = model.checksum()
        return trace
    samples = list(data) if not isinstance(data, Mapping) else stage_samples(plan, data)
    if not samples:
        raise ValueError(f"stage {plan.stage_id} has no training samples")
    if not trainable:
        raise StagePlanError(f"stage {plan.stage_id} has no trainable parameters in this model")
    preparer = preparer or Preparer(model.config)
    state = optimizer_state if optimizer_state is not None else {}
    prepared = preparer.prepare_all(samples)
    saved_flags = {n: p.requires_grad for n, p in params.items()}
    try:
        for n, p in params.items():
            p.requires_grad = n in trainable
        for step, idx in enumerate(batch_schedule(len(prepared), plan.steps, plan.batch_size, plan.seed,
                                                  plan.stage_id)):
            batch = collate([prepared[i] for i in idx], model.use_graph)
            for p in trainable.values():
                p.grad = None
            loss = model.loss(batch)
            value = float(loss.data)
            if not math.isfinite(value):
                raise NonFiniteLossError(plan.stage_id, step, (plan.seed, 7, plan.stage_id), value)
            grads = ad.backward(loss, trainable)
            norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            optimizer_step(trainable, grads, state, plan.learning_rate, plan.weight_decay)
            rec = StepRecord(step, value, norm, plan.learning_rate)
            trace.records.append(rec)
            if on_step:
                on_step(rec)
    finally:
        for n, p in params.items():
            p.requires_grad = saved_flags[n]
            p.grad = None
    if frozen_checksum(model, trainable) != before:
        raise FreezeViolation(f"stage {plan.stage_id} modified parameters outside its trainable set")
    trace.checksum = model.checksum()
    return trace


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------

@dataclass
class PipelineResult:
    model: SceneGraphVLM
    plans: list[StagePlan]
    traces: list[TrainTrace]
    checkpoints: list  # Checkpoint objects, one per executed stage
    optimizer_state: dict[str, AdamState]


def pipeline_plans(plans: Mapping[int, StagePlan], separate_stage2: bool, model: SceneGraphVLM) -> list[StagePlan]:
    """Order the stage plans, folding stage 2 into stage 3 when it does not run on its own.

    Stage 2 is folded when ``separate_stage2`` is off, and also when the
    model has no graph branch (the sentinel rows it would train are never
    read). Folding
    appends stage 2's datasets to stage 3 and adds its steps.
    """
    p1, p2, p3 = plans[1], plans[2], plans[3]
    if separate_stage2 and model.use_graph:
        return [p1, p2, p3]
    extra = tuple(d for d in p2.datasets if d not in p3.datasets)
    return [p1, replace(p3, datasets=p3.datasets + extra, steps=p3.steps + p2.steps)]


def run_pipeline(model: SceneGraphVLM, plans: Mapping[int, StagePlan], data: Mapping[str, Sequence[QASample]],
                 separate_stage2: bool = True, preparer: Preparer | None = None,
                 stages: Sequence[int] = STAGES, checkpoint_dir=None, provenance: Sequence[int] = (),
                 optimizer_state: dict[str, AdamState] | None = None) -> PipelineResult:
    """Train stages in order; each stage resumes from the state the previous one left.

    Adam moments are kept per parameter across stages (pass a loaded
    checkpoint's state to resume). With ``checkpoint_dir`` a checkpoint file
    is written after every stage. If a stage fails, the exception carries
    the completed part as ``exc.partial``.
    """
    from .checkpoint import Checkpoint, save_checkpoint

    preparer = preparer or Preparer(model.config)
    ordered = [p for p in pipeline_plans(plans, separate_stage2, model) if p.stage_id in stages]
    state: dict[str, AdamState] = {} if optimizer_state is None else optimizer_state
    done = list(provenance)
    result = PipelineResult(model, ordered, [], [], state)
    for plan in ordered:
        try:
            trace = train_stage(model, plan, data, preparer, state)
        except Exception as exc:
            exc.partial = result
            raise
        done.append(plan.stage_id)
        ckpt = Checkpoint.from_model(model, state, done, {"plan": plan.to_dict(), "trace": trace.to_dict()})
        result.traces.append(trace)
        result.checkpoints.append(ckpt)
        if checkpoint_dir is not None:
            from pathlib import Path

            save_checkpoint(ckpt, Path(checkpoint_dir) / f"stage{plan.stage_id}.ckpt")
    return result

"""Finite-difference checks across every module boundary of a small model.

Each fragment is a scalar function of some parameters (and, for the graph
pipeline, of its inputs F_v and F_t). Fragments that end in a vector are
reduced with a fixed random readout so no gradient entry is trivially equal.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from . import autodiff as ad
from . import config as cfg
from .autodiff import Tensor
from .data import relation_dataset
from .gradcheck import GradCheckReport, grad_check
from .model import Preparer, SceneGraphVLM, collate
from .perception import render_feature_map
from .sge import sge_forward
from .vlm import assemble_sequence, autoregressive_loss, llm_forward, project_graph, project_visual

# Small enough that every scalar is perturbed within seconds.
GRADCHECK_CONFIG = {
    "scene": {"canvas": [16, 16], "n_entities_range": [2, 3], "size_range": [3, 6], "border": 2},
    "encoder": {"d_e": 10},
    "sge": {"d_g": 8, "mp_layers": 1, "mp_heads": 2, "prompt_heads": 2},
    "llm": {"d_llm": 8, "layers": 1, "heads": 2, "ffn_mult": 2},
}

# Module boundaries checked by default. "model" (the batched end-to-end path)
# sits at the finite-difference roundoff floor for h=1e-6 and runs on request.
FRAGMENTS = ("sge", "proj.visual", "proj.graph", "llm", "loss")
ALL_FRAGMENTS = FRAGMENTS + ("model",)


def gradcheck_config(overrides=()) -> dict:
    config = cfg.defaults()
    cfg._merge(config, GRADCHECK_CONFIG)
    cfg.apply_overrides(config, overrides)
    cfg.validate(config)
    return config


@dataclass
class Fragment:
    name: str
    loss_fn: Callable[[], Tensor]
    tensors: dict[str, Tensor]


def _readout(x: Tensor, seed: int) -> Tensor:
    r = np.random.default_rng([seed, 424242]).normal(size=x.shape)
    return (x * Tensor(r)).sum()


def build_fragments(model: SceneGraphVLM, seed: int = 0, live: Callable[[str], bool] = lambda n: True,
                    include_inputs: bool = True) -> list[Fragment]:
    """Fixtures drawn from seeded relation samples; ``live`` picks the parameters to check."""
    params = model.param_dict()
    for n, p in params.items():
        p.requires_grad = bool(live(n))
    samples = relation_dataset(2, seed, "test", model.config.scene, include_none=False)
    scene = samples[0].scene
    fmap = render_feature_map(scene, model.config.encoder)
    fmap.requires_grad = include_inputs
    table = model.llm.embedding_table
    text_ids = np.asarray(samples[0].token_ids)
    frags = []

    def pick(prefix):
        return {n: p for n, p in params.items() if n.startswith(prefix)}

    if model.use_graph:
        prompt = Tensor(ad.take_rows(table(), samples[0].prompt_ids).data.copy(), requires_grad=include_inputs)

        def sge_loss():
            return _readout(sge_forward(fmap, scene.masks, prompt, model.sge).node_features, seed)

        inputs = {"input.F_v": fmap, "input.F_t": prompt}
        frags.append(Fragment("sge", sge_loss, {**pick("sge."), **inputs}))
        with ad.no_grad():
            g_act = sge_forward(Tensor(fmap.data), scene.masks, Tensor(prompt.data), model.sge)
        frags.append(Fragment("proj.graph", lambda: _readout(project_graph(g_act, model.graph_proj), seed),
                              pick("proj.graph.")))
    frags.append(Fragment("proj.visual", lambda: _readout(project_visual(fmap, model.visual_proj), seed),
                          pick("proj.visual.")))

    with ad.no_grad():
        vis = project_visual(Tensor(fmap.data), model.visual_proj).data.copy()
        gtok = project_graph(g_act, model.graph_proj).data.copy() if model.use_graph else None

    def assembled():
        t = table()
        sentinels = ad.take_rows(t, [model.vocab.sg_id, model.vocab.text_id]) if model.use_graph else None
        return assemble_sequence(Tensor(vis), None if gtok is None else Tensor(gtok), ad.take_rows(t, text_ids),
                                 samples[0].answer_span, sentinels, text_ids)

    frags.append(Fragment("llm", lambda: _readout(llm_forward(assembled(), model.llm), seed), pick("llm.")))

    with ad.no_grad():
        seq = assembled()
        logits = Tensor(llm_forward(seq, model.llm).data.copy(), requires_grad=include_inputs)
    frags.append(Fragment("loss", lambda: autoregressive_loss(logits, seq.targets, seq.loss_mask),
                          {"input.H_a": logits}))

    prep = Preparer(model.config)
    batch = collate(prep.prepare_all(samples), model.use_graph)

    def model_loss():
        h = model.hidden_states(batch)
        return _readout(ad.take_rows(h.reshape(-1, h.shape[-1]), batch.answer_rows), seed)

    frags.append(Fragment("model", model_loss, dict(params)))
    order = {n: i for i, n in enumerate(ALL_FRAGMENTS)}
    return sorted(frags, key=lambda f: order[f.name])


def inject_fault(grads: dict[str, np.ndarray]) -> None:
    """Test hook: add 1 to the first entry of the first checked gradient."""
    for g in grads.values():
        if g.size:
            g.reshape(-1)[0] += 1.0
            return


def gradcheck_suite(model: SceneGraphVLM, seed: int = 0, h: float = 1e-6, tol: float = 1e-5,
                    live: Callable[[str], bool] = lambda n: True, include_inputs: bool = True,
                    fault: str | None = None, fragments=FRAGMENTS) -> list[tuple[str, GradCheckReport]]:
    """Run grad_check on every fragment; ``fault`` names a fragment whose gradients get corrupted."""
    for name in [fault, *fragments]:
        if name is not None and name not in ALL_FRAGMENTS:
            raise ValueError(f"unknown fragment {name!r}; choose from {ALL_FRAGMENTS}")
    saved = {n: (p.data.copy(), p.requires_grad) for n, p in model.named_parameters()}
    out = []
    try:
        for frag in build_fragments(model, seed, live, include_inputs):
            if frag.name not in fragments:
                continue
            hook = inject_fault if frag.name == fault else None
            out.append((frag.name, grad_check(frag.loss_fn, frag.tensors, h=h, tol=tol, grad_hook=hook)))
    finally:
        for n, p in model.named_parameters():
            p.data, p.requires_grad = saved[n]
            p.grad = None
    return out


def suite_passed(reports) -> bool:
    return all(r.passed for _, r in reports)


def format_suite(reports) -> str:
    lines = [f"{name:<12} {r.summary()}" for name, r in reports]
    worst = max((r.max_rel_err for _, r in reports), default=0.0)
    n = sum(r.n_checked for _, r in reports)
    lines.append(f"{'overall':<12} {'PASS' if suite_passed(reports) else 'FAIL'} max_rel_err={worst:.3e} scalars={n}")
    return "\n".join(lines) + "\n"

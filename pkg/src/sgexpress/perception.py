"""Synthetic scenes standing in for a frozen tagging/detection/segmentation stack.

A scene is a set of disjoint rectangular or elliptical entity masks on a small
canvas, each with a category, plus the geometric relation triples that hold
between them. Relations come from fixed rules so they can be re-derived by a
brute-force oracle (:func:`oracle_relations`) that shares no code with the
generator.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import Tensor
from .vocab import NONE_ANSWER, PREDICATES, Vocabulary, category_name

# A direction predicate needs the dominant centroid offset to be at least
# 3/2 of the other one; pairs closer to the diagonal carry no relation.
DOMINANCE_NUM, DOMINANCE_DEN = 3, 2


class SceneConfigError(ValueError):
    """The requested scene cannot be generated."""


@dataclass(frozen=True)
class SceneConfig:
    canvas: tuple[int, int] = (32, 32)  # (h_m, w_m)
    n_entities_range: tuple[int, int] = (2, 4)
    category_count: int = 8
    predicate_count: int = 6
    size_range: tuple[int, int] = (3, 9)
    border: int = 4
    nest_prob: float = 0.35
    unique_categories: bool = True
    max_distinct_categories: int | None = None
    max_attempts: int = 500

    def __post_init__(self):
        object.__setattr__(self, "canvas", tuple(int(v) for v in self.canvas))
        object.__setattr__(self, "n_entities_range", tuple(int(v) for v in self.n_entities_range))
        object.__setattr__(self, "size_range", tuple(int(v) for v in self.size_range))

    def validate(self) -> None:
        h, w = self.canvas
        lo, hi = self.n_entities_range
        smin, smax = self.size_range
        if h < 8 or w < 8:
            raise SceneConfigError(f"canvas must be at least 8x8, got {self.canvas}")
        if lo < 0 or hi < lo:
            raise SceneConfigError(f"empty entity range {self.n_entities_range}")
        if smin < 1 or smax < smin:
            raise SceneConfigError(f"empty size range {self.size_range}")
        if not 1 <= self.predicate_count <= len(PREDICATES):
            raise SceneConfigError(f"predicate_count must be in 1..{len(PREDICATES)}")
        if self.category_count < 1:
            raise SceneConfigError("category_count must be positive")
        if self.unique_categories and hi > self.category_count:
            raise SceneConfigError(f"{hi} unique entities need at least {hi} categories")
        inner_h, inner_w = h - 2 * self.border, w - 2 * self.border
        if smin > min(inner_h, inner_w):
            raise SceneConfigError("smallest entity does not fit inside the canvas border")
        # every top-level entity claims at least a (smin+1)^2 footprint
        if hi > 0 and hi * (smin + 1) ** 2 > (inner_h + 1) * (inner_w + 1):
            raise SceneConfigError(f"too many entities ({hi}) for canvas {self.canvas}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> SceneConfig:
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


@dataclass(eq=False)
class Entity:
    category_id: int
    box: tuple[int, int, int, int]  # x0, y0, x1, y1; half-open pixel ranges
    mask: np.ndarray  # bool, (h_m, w_m)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Entity)
            and self.category_id == other.category_id
            and tuple(self.box) == tuple(other.box)
            and self.mask.shape == other.mask.shape
            and np.array_equal(self.mask, other.mask)
        )


@dataclass(eq=False)
class SyntheticScene:
    seed: int
    config: SceneConfig
    entities: list[Entity]
    relations: list[tuple[int, int, int]] = field(default_factory=list)

    @property
    def canvas(self) -> tuple[int, int]:
        return self.config.canvas

    @property
    def masks(self) -> np.ndarray:
        """The mask stack, shape (N, h_m, w_m)."""
        h, w = self.canvas
        if not self.entities:
            return np.zeros((0, h, w), dtype=bool)
        return np.stack([e.mask for e in self.entities])

    @property
    def categories(self) -> list[int]:
        return [e.category_id for e in self.entities]

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, SyntheticScene)
            and self.seed == other.seed
            and self.config == other.config
            and self.entities == other.entities
            and list(map(tuple, self.relations)) == list(map(tuple, other.relations))
        )


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

def _shape_mask(canvas, box, ellipse: bool) -> np.ndarray:
    h, w = canvas
    x0, y0, x1, y1 = box
    m = np.zeros((h, w), dtype=bool)
    if ellipse:
        ys, xs = np.mgrid[y0:y1, x0:x1]
        cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
        rx, ry = (x1 - x0) / 2, (y1 - y0) / 2
        inside = ((xs + 0.5 - cx) / rx) ** 2 + ((ys + 0.5 - cy) / ry) ** 2 <= 1.0
        m[y0:y1, x0:x1] = inside
        if m.any():
            return m
    m[y0:y1, x0:x1] = True
    return m


def _boxes_clear(box, others, gap: int = 1) -> bool:
    x0, y0, x1, y1 = box
    for ox0, oy0, ox1, oy1 in others:
        if x0 < ox1 + gap and ox0 < x1 + gap and y0 < oy1 + gap and oy0 < y1 + gap:
            return False
    return True


def generate_scene(seed: int, config: SceneConfig | None = None) -> SyntheticScene:
    """Draw a scene deterministically from ``seed``.

    Entities are placed one at a time, either free-standing (1 px clearance
    from every other top-level box) or, with probability ``nest_prob``, nested
    inside an earlier free-standing entity whose mask is then carved out so
    masks stay disjoint.
    """
    config = config or SceneConfig()
    config.validate()
    rng = np.random.default_rng(seed)
    h, w = config.canvas
    b = config.border
    smin, smax = config.size_range
    lo, hi = config.n_entities_range
    n = int(rng.integers(lo, hi + 1))

    if config.unique_categories:
        cats = rng.choice(config.category_count, size=n, replace=False)
    else:
        pool = np.arange(config.category_count)
        if config.max_distinct_categories:
            k = min(config.max_distinct_categories, config.category_count)
            pool = np.sort(rng.choice(config.category_count, size=k, replace=False))
        cats = pool[rng.integers(0, len(pool), size=n)]

    entities: list[Entity] = []
    top_boxes: list[tuple[int, int, int, int]] = []
    hostable: list[int] = []  # free-standing entities without a nested child
    for i in range(n):
        ellipse = bool(rng.integers(0, 2))
        placed = None
        candidates = [j for j in hostable
                      if min(entities[j].box[2] - entities[j].box[0], entities[j].box[3] - entities[j].box[1]) >= smin + 2]
        if candidates and rng.random() < config.nest_prob:
            j = candidates[int(rng.integers(0, len(candidates)))]
            hx0, hy0, hx1, hy1 = entities[j].box
            iw = int(rng.integers(smin, hx1 - hx0 - 2 + 1))
            ih = int(rng.integers(smin, hy1 - hy0 - 2 + 1))
            x0 = int(rng.integers(hx0 + 1, hx1 - 1 - iw + 1))
            y0 = int(rng.integers(hy0 + 1, hy1 - 1 - ih + 1))
            box = (x0, y0, x0 + iw, y0 + ih)
            carved = entities[j].mask.copy()
            carved[y0:y0 + ih, x0:x0 + iw] = False
            if carved.any():
                entities[j].mask = carved
                hostable.remove(j)
                placed = box
        if placed is None:
            for _ in range(config.max_attempts):
                bw = int(rng.integers(smin, smax + 1))
                bh = int(rng.integers(smin, smax + 1))
                if bw > w - 2 * b or bh > h - 2 * b:
                    continue
                x0 = int(rng.integers(b, w - b - bw + 1))
                y0 = int(rng.integers(b, h - b - bh + 1))
                box = (x0, y0, x0 + bw, y0 + bh)
                if _boxes_clear(box, top_boxes):
                    placed = box
                    top_boxes.append(box)
                    hostable.append(i)
                    break
        if placed is None:
            raise SceneConfigError(f"could not place entity {i} of {n} on canvas {config.canvas} (seed {seed})")
        entities.append(Entity(int(cats[i]), placed, _shape_mask(config.canvas, placed, ellipse)))

    scene = SyntheticScene(seed=int(seed), config=config, entities=entities)
    scene.relations = _relations_from_geometry(scene)
    return scene


def _relations_from_geometry(scene: SyntheticScene) -> list[tuple[int, int, int]]:
    """All-pairs predicate table, evaluated with array broadcasting."""
    n = len(scene.entities)
    if n < 2:
        return []
    enabled = PREDICATES[: scene.config.predicate_count]
    boxes = np.array([e.box for e in scene.entities], dtype=np.int64)
    masks = scene.masks
    count = masks.sum(axis=(1, 2)).astype(np.int64)
    ys, xs = np.indices(masks.shape[1:])
    # doubled pixel-centre coordinate sums, so centroids compare exactly
    sx = (masks * (2 * xs + 1)).sum(axis=(1, 2)).astype(np.int64)
    sy = (masks * (2 * ys + 1)).sum(axis=(1, 2)).astype(np.int64)

    bs, bo = boxes[:, None, :], boxes[None, :, :]
    within = (bo[..., 0] <= bs[..., 0]) & (bo[..., 1] <= bs[..., 1]) & (bs[..., 2] <= bo[..., 2]) & (bs[..., 3] <= bo[..., 3])
    same = (bs == bo).all(axis=-1)
    inside = within & ~same
    larger = inside.T

    # centroid offset (object minus subject), scaled by 2 * n_s * n_o
    dx = sx[None, :] * count[:, None] - sx[:, None] * count[None, :]
    dy = sy[None, :] * count[:, None] - sy[:, None] * count[None, :]
    horiz = (DOMINANCE_DEN * np.abs(dx) >= DOMINANCE_NUM * np.abs(dy)) & (dx != 0)
    vert = (DOMINANCE_DEN * np.abs(dy) >= DOMINANCE_NUM * np.abs(dx)) & (dy != 0)

    table = np.full((n, n), -1, dtype=np.int64)
    pid = {p: k for k, p in enumerate(PREDICATES)}
    # lowest priority first; later assignments override
    if "left-of" in enabled:
        table[horiz & (dx > 0)] = pid["left-of"]
    if "right-of" in enabled:
        table[horiz & (dx < 0)] = pid["right-of"]
    if "above" in enabled:
        table[vert & (dy > 0)] = pid["above"]
    if "below" in enabled:
        table[vert & (dy < 0)] = pid["below"]
    if "larger-than" in enabled:
        table[larger] = pid["larger-than"]
    if "inside" in enabled:
        table[inside] = pid["inside"]
    np.fill_diagonal(table, -1)
    s_idx, o_idx = np.nonzero(table >= 0)
    return [(int(s), int(table[s, o]), int(o)) for s, o in zip(s_idx, o_idx)]


# ---------------------------------------------------------------------------
# brute-force oracle (independent of the generator's vectorized rules)
# ---------------------------------------------------------------------------

def _box_within(inner, outer) -> bool:
    return outer[0] <= inner[0] and outer[1] <= inner[1] and inner[2] <= outer[2] and inner[3] <= outer[3]


def rule_inside(box_s, box_o) -> bool:
    return _box_within(box_s, box_o) and tuple(box_s) != tuple(box_o)


def rule_larger_than(box_s, box_o) -> bool:
    return _box_within(box_o, box_s) and tuple(box_s) != tuple(box_o)


def rule_direction(cent_s, cent_o) -> str | None:
    """Direction predicate from exact centroids given as (sum_2x, sum_2y, count)."""
    sx_s, sy_s, n_s = cent_s
    sx_o, sy_o, n_o = cent_o
    dx = sx_o * n_s - sx_s * n_o
    dy = sy_o * n_s - sy_s * n_o
    if dx != 0 and 2 * abs(dx) >= 3 * abs(dy):
        return "left-of" if dx > 0 else "right-of"
    if dy != 0 and 2 * abs(dy) >= 3 * abs(dx):
        return "above" if dy > 0 else "below"
    return None


def _exact_centroid(mask: np.ndarray) -> tuple[int, int, int]:
    sx = sy = n = 0
    rows, cols = mask.shape
    for y in range(rows):
        for x in range(cols):
            if mask[y, x]:
                sx += 2 * x + 1
                sy += 2 * y + 1
                n += 1
    return sx, sy, n


def oracle_relations(scene: SyntheticScene) -> list[tuple[int, int, int]]:
    """Evaluate the predicate rules on every ordered entity pair, one at a time."""
    enabled = PREDICATES[: scene.config.predicate_count]
    cents = [_exact_centroid(e.mask) for e in scene.entities]
    out = []
    for s, es in enumerate(scene.entities):
        for o, eo in enumerate(scene.entities):
            if s == o:
                continue
            pred = None
            if "inside" in enabled and rule_inside(es.box, eo.box):
                pred = "inside"
            elif "larger-than" in enabled and rule_larger_than(es.box, eo.box):
                pred = "larger-than"
            else:
                d = rule_direction(cents[s], cents[o])
                if d in enabled:
                    pred = d
            if pred is not None:
                out.append((s, PREDICATES.index(pred), o))
    return out


# ---------------------------------------------------------------------------
# synthetic frozen encoder
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EncoderConfig:
    d_e: int = 32
    h_v: int | None = None  # default: canvas height / 8
    w_v: int | None = None
    noise_sigma: float = 0.0
    embed_dim: int | None = None  # category embedding size; default d_e - 2
    pos_scale: float = 1.0
    seed: int = 0

    def resolved(self, canvas: tuple[int, int]) -> EncoderConfig:
        h, w = canvas
        return EncoderConfig(
            d_e=self.d_e,
            h_v=self.h_v if self.h_v is not None else max(1, h // 8),
            w_v=self.w_v if self.w_v is not None else max(1, w // 8),
            noise_sigma=self.noise_sigma,
            embed_dim=self.embed_dim if self.embed_dim is not None else self.d_e - 2,
            pos_scale=self.pos_scale,
            seed=self.seed,
        )

    def to_dict(self) -> dict:
        return asdict(self)


def category_table(category_count: int, embed_dim: int, seed: int = 0) -> np.ndarray:
    """Per-category pixel embeddings; the last row is the background.

    When there is room, categories get one-hot rows and the background a zero
    row, so cell averages are per-category area fractions. Narrower tables
    fall back to fixed random directions.
    """
    if embed_dim >= category_count:
        table = np.zeros((category_count + 1, embed_dim))
        table[np.arange(category_count), np.arange(category_count)] = 1.0
        return table
    rng = np.random.default_rng([seed, 7919])
    table = rng.normal(size=(category_count + 1, embed_dim)) / np.sqrt(embed_dim)
    table[-1] *= 0.5
    return table


def render_feature_map(scene: SyntheticScene, encoder: EncoderConfig | None = None) -> Tensor:
    """Frozen-encoder output F_v with shape (d_e, h_v, w_v).

    Channels ``[0, embed_dim)`` hold the area average of per-pixel category
    embeddings over each cell (by default the per-category area fractions). The next two
    channels hold the normalized cell-centre x and y, linear in feature
    coordinates. Seeded Gaussian noise is added to every channel.
    """
    enc = (encoder or EncoderConfig()).resolved(scene.canvas)
    h, w = scene.canvas
    if enc.d_e < enc.embed_dim + 2:
        raise ValueError(f"d_e={enc.d_e} is smaller than the category embedding size {enc.embed_dim} plus 2 position channels")
    if not (1 <= enc.h_v <= h and 1 <= enc.w_v <= w):
        raise ValueError(f"feature map {enc.h_v}x{enc.w_v} exceeds canvas {h}x{w}")
    if h % enc.h_v or w % enc.w_v:
        raise ValueError(f"canvas {h}x{w} is not divisible into a {enc.h_v}x{enc.w_v} grid")

    table = category_table(scene.config.category_count, enc.embed_dim, enc.seed)
    label = np.full((h, w), scene.config.category_count, dtype=np.int64)
    for e in scene.entities:
        label[e.mask] = e.category_id
    pixels = table[label]  # (h, w, embed_dim)
    bh, bw = h // enc.h_v, w // enc.w_v
    content = pixels.reshape(enc.h_v, bh, enc.w_v, bw, enc.embed_dim).mean(axis=(1, 3))

    fmap = np.zeros((enc.d_e, enc.h_v, enc.w_v))
    fmap[: enc.embed_dim] = content.transpose(2, 0, 1)
    xs = (np.arange(enc.w_v) + 0.5) / enc.w_v * 2 - 1
    ys = (np.arange(enc.h_v) + 0.5) / enc.h_v * 2 - 1
    fmap[enc.embed_dim] = enc.pos_scale * xs[None, :]
    fmap[enc.embed_dim + 1] = enc.pos_scale * ys[:, None]
    if enc.noise_sigma > 0:
        rng = np.random.default_rng([enc.seed, int(scene.seed), 104729])
        fmap += enc.noise_sigma * rng.normal(size=fmap.shape)
    return Tensor(fmap)


# ---------------------------------------------------------------------------
# question answering samples
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class QASample:
    """Prompt tokens followed by answer tokens about one scene.

    ``task`` is one of ``"relation"``, ``"caption"`` or ``"count"``.
    """

    scene: SyntheticScene
    task: str
    prompt_ids: tuple[int, ...]
    answer_ids: tuple[int, ...]

    @property
    def token_ids(self) -> tuple[int, ...]:
        return tuple(self.prompt_ids) + tuple(self.answer_ids)

    @property
    def loss_mask(self) -> tuple[bool, ...]:
        return (False,) * len(self.prompt_ids) + (True,) * len(self.answer_ids)

    @property
    def answer_span(self) -> tuple[int, int]:
        """Half-open answer range inside the text tokens."""
        return len(self.prompt_ids), len(self.prompt_ids) + len(self.answer_ids)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, QASample)
            and self.task == other.task
            and tuple(self.prompt_ids) == tuple(other.prompt_ids)
            and tuple(self.answer_ids) == tuple(other.answer_ids)
            and self.scene == other.scene
        )


RelationQASample = QASample


def _reference(scene: SyntheticScene, i: int) -> list[str]:
    """Category name, plus an ordinal when the category repeats in the scene."""
    cat = scene.entities[i].category_id
    same = [j for j, e in enumerate(scene.entities) if e.category_id == cat]
    tokens = [category_name(cat)]
    if len(same) > 1:
        tokens.append(f"#{same.index(i) + 1}")
    return tokens


def relation_prompt(subject: Sequence[str], obj: Sequence[str]) -> list[str]:
    return ["what", "is", *subject, "to", *obj, "?"]


def make_relation_qa(scene: SyntheticScene, vocab: Vocabulary) -> list[QASample]:
    """One sample per ground-truth triple; the answer is the predicate token."""
    out = []
    for s, p, o in scene.relations:
        prompt = relation_prompt(_reference(scene, s), _reference(scene, o))
        out.append(QASample(scene, "relation", vocab.encode(prompt), vocab.encode([PREDICATES[p]])))
    return out


def make_distractor_qa(scene: SyntheticScene, vocab: Vocabulary, count: int | None = None) -> list[QASample]:
    """Questions naming a category absent from the scene; the answer is ``none``.

    By default one distractor per ground-truth triple. The absent category
    replaces the subject or the object of that triple.
    """
    count = len(scene.relations) if count is None else count
    present = set(scene.categories)
    absent = [k for k in range(scene.config.category_count) if k not in present]
    if not absent or count == 0 or not scene.relations:
        return []
    rng = np.random.default_rng([int(scene.seed), 15485863])
    out = []
    for k in range(count):
        s, _, o = scene.relations[k % len(scene.relations)]
        ghost = [category_name(absent[int(rng.integers(0, len(absent)))])]
        if rng.random() < 0.5:
            prompt = relation_prompt(ghost, _reference(scene, o))
        else:
            prompt = relation_prompt(_reference(scene, s), ghost)
        out.append(QASample(scene, "relation", vocab.encode(prompt), vocab.encode([NONE_ANSWER])))
    return out


def make_caption_qa(scene: SyntheticScene, vocab: Vocabulary) -> QASample:
    """"describe the scene" -> category names in category-id order, then "."."""
    names = [category_name(k) for k in sorted(scene.categories)]
    return QASample(scene, "caption", vocab.encode(["describe", "the", "scene"]), vocab.encode([*names, "."]))


def make_count_qa(scene: SyntheticScene, vocab: Vocabulary, category: int) -> QASample:
    n = sum(1 for c in scene.categories if c == category)
    if n > 9:
        raise ValueError("counts above 9 have no numeral token")
    prompt = ["how", "many", category_name(category), "?"]
    return QASample(scene, "count", vocab.encode(prompt), vocab.encode([str(n)]))

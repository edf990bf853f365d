"""Dataset builders over synthetic scenes and the on-disk sample format.

File layout (all integers little-endian)::

    b"SGESYN1\\n"
    u64 sample count
    per sample: u32 record length, then the record
    u32 CRC-32 of everything between the magic and the CRC

A record holds the scene seed, the scene config as JSON, the entity table
with run-length-encoded masks, the relation triples, the task name and the
prompt/answer token id arrays.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .perception import (Entity, QASample, SceneConfig, SyntheticScene, generate_scene, make_caption_qa,
                         make_count_qa, make_distractor_qa, make_relation_qa)
from .vocab import NONE_ANSWER, PREDICATES, Vocabulary

MAGIC = b"SGESYN1\n"
_MAGIC_STEM = b"SGESYN"

_SPLIT_BASE = {"train": 0, "val": 1 << 40, "test": 2 << 40}
_TASK_OFFSET = {"relation": 0, "caption": 1 << 22, "count": 2 << 22}


class DatasetError(ValueError):
    pass


class DatasetFormatError(DatasetError):
    pass


class DatasetVersionError(DatasetError):
    pass


class DatasetTruncatedError(DatasetError):
    pass


class DatasetChecksumError(DatasetError):
    pass


def scene_seed(split: str, run_seed: int, task: str, k: int) -> int:
    """Scene seeds never collide across splits, run seeds (< 2**15) or tasks."""
    return _SPLIT_BASE[split] + (run_seed << 24) + _TASK_OFFSET[task] + k


def counting_scene_config(base: SceneConfig) -> SceneConfig:
    """Scenes with repeated categories, for counting questions."""
    return replace(base, n_entities_range=(1, 5), unique_categories=False, max_distinct_categories=2, nest_prob=0.0)


def _shuffled(samples: list, seed: int) -> list:
    order = np.random.default_rng([seed, 65537]).permutation(len(samples))
    return [samples[i] for i in order]


def relation_dataset(n: int, seed: int, split: str = "train", scene_config: SceneConfig | None = None,
                     vocab: Vocabulary | None = None, balanced: bool = True, include_none: bool = True,
                     max_scenes: int | None = None) -> list[QASample]:
    """Relation questions from fresh scenes, one ground-truth triple per question.

    With ``balanced`` every answer label (predicates and, with
    ``include_none``, the distractor answer) gets an equal quota, and each
    scene contributes at most one sample per label.
    """
    scene_config = scene_config or SceneConfig()
    vocab = vocab or Vocabulary(scene_config.category_count)
    labels = list(PREDICATES[: scene_config.predicate_count]) + ([NONE_ANSWER] if include_none else [])
    label_ids = {vocab.id(l): l for l in labels}
    quota = {l: n // len(labels) + (1 if k < n % len(labels) else 0) for k, l in enumerate(labels)}
    if not balanced:
        quota = None
    rng = np.random.default_rng([seed, 31337])
    out: list[QASample] = []
    max_scenes = max_scenes or 400 * max(n, 1)
    for k in range(max_scenes):
        if len(out) >= n:
            break
        scene = generate_scene(scene_seed(split, seed, "relation", k), scene_config)
        pos = make_relation_qa(scene, vocab)
        neg = make_distractor_qa(scene, vocab) if include_none else []
        if quota is None:
            out.extend((pos + neg)[: n - len(out)])
            continue
        by_label: dict[str, list[QASample]] = {}
        for s in pos + neg:
            by_label.setdefault(label_ids[s.answer_ids[0]], []).append(s)
        for label in labels:
            cands = by_label.get(label)
            if cands and quota[label] > 0:
                out.append(cands[int(rng.integers(0, len(cands)))])
                quota[label] -= 1
    if len(out) < n:
        raise DatasetError(f"could only build {len(out)} of {n} relation samples from {max_scenes} scenes")
    return _shuffled(out, seed)


def caption_dataset(n: int, seed: int, split: str = "train", scene_config: SceneConfig | None = None,
                    vocab: Vocabulary | None = None) -> list[QASample]:
    scene_config = scene_config or SceneConfig()
    vocab = vocab or Vocabulary(scene_config.category_count)
    return [make_caption_qa(generate_scene(scene_seed(split, seed, "caption", k), scene_config), vocab)
            for k in range(n)]


def count_dataset(n: int, seed: int, split: str = "train", scene_config: SceneConfig | None = None,
                  vocab: Vocabulary | None = None, max_count: int = 4) -> list[QASample]:
    """"how many <category>?" questions with answers balanced over 0..max_count."""
    base = scene_config or SceneConfig()
    cfg = counting_scene_config(base)
    vocab = vocab or Vocabulary(base.category_count)
    quota = {c: n // (max_count + 1) + (1 if c < n % (max_count + 1) else 0) for c in range(max_count + 1)}
    rng = np.random.default_rng([seed, 27449])
    out: list[QASample] = []
    for k in range(400 * max(n, 1)):
        if len(out) >= n:
            break
        scene = generate_scene(scene_seed(split, seed, "count", k), cfg)
        counts = np.bincount(scene.categories, minlength=cfg.category_count)
        for c in rng.permutation(max_count + 1):
            cats = np.flatnonzero(counts == c)
            if quota[c] > 0 and len(cats):
                out.append(make_count_qa(scene, vocab, int(cats[int(rng.integers(0, len(cats)))])))
                quota[c] -= 1
                break
    if len(out) < n:
        raise DatasetError(f"could only build {len(out)} of {n} counting samples")
    return _shuffled(out, seed)


# ---------------------------------------------------------------------------
# binary format
# ---------------------------------------------------------------------------

def _rle(mask: np.ndarray) -> list[int]:
    """Run lengths of the flattened mask, starting with a (possibly empty) run of zeros."""
    flat = mask.reshape(-1).astype(np.int8)
    change = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat.size and flat[0]:
        runs = [0] + runs
    return runs


def _unrle(runs: Sequence[int], shape: tuple[int, int]) -> np.ndarray:
    flat = np.zeros(shape[0] * shape[1], dtype=bool)
    pos, val = 0, False
    for r in runs:
        if val:
            flat[pos:pos + r] = True
        pos += r
        val = not val
    if pos != flat.size:
        raise DatasetFormatError("mask run lengths do not cover the canvas")
    return flat.reshape(shape)


def _u32s(values) -> bytes:
    values = list(values)
    return struct.pack("<I", len(values)) + struct.pack(f"<{len(values)}I", *values)


def _encode_record(sample: QASample) -> bytes:
    scene = sample.scene
    parts = [struct.pack("<q", scene.seed)]
    cfg = scene.config.to_json().encode()
    parts.append(struct.pack("<I", len(cfg)) + cfg)
    h, w = scene.canvas
    parts.append(struct.pack("<II", h, w))
    parts.append(struct.pack("<I", len(scene.entities)))
    for e in scene.entities:
        parts.append(struct.pack("<I4i", e.category_id, *e.box))
        parts.append(_u32s(_rle(e.mask)))
    parts.append(struct.pack("<I", len(scene.relations)))
    for trip in scene.relations:
        parts.append(struct.pack("<3I", *trip))
    task = sample.task.encode()
    parts.append(struct.pack("<I", len(task)) + task)
    parts.append(_u32s(sample.prompt_ids))
    parts.append(_u32s(sample.answer_ids))
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes, pos: int, end: int):
        self.buf, self.pos, self.end = buf, pos, end

    def take(self, n: int) -> bytes:
        if self.pos + n > self.end:
            raise DatasetTruncatedError(f"unexpected end of data at byte {self.pos} (needed {n} more)")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def u32s(self) -> tuple[int, ...]:
        (n,) = self.unpack("<I")
        return self.unpack(f"<{n}I") if n else ()


def _decode_record(r: _Reader) -> QASample:
    (seed,) = r.unpack("<q")
    (n_cfg,) = r.unpack("<I")
    try:
        cfg_dict = json.loads(r.take(n_cfg).decode())
        config = SceneConfig.from_dict(cfg_dict)
    except (UnicodeDecodeError, json.JSONDecodeError, TypeError) as exc:
        raise DatasetFormatError(f"bad scene config: {exc}") from None
    h, w = r.unpack("<II")
    (n_ent,) = r.unpack("<I")
    entities = []
    for _ in range(n_ent):
        cat, x0, y0, x1, y1 = r.unpack("<I4i")
        mask = _unrle(r.u32s(), (h, w))
        entities.append(Entity(cat, (x0, y0, x1, y1), mask))
    (n_rel,) = r.unpack("<I")
    relations = [r.unpack("<3I") for _ in range(n_rel)]
    (n_task,) = r.unpack("<I")
    task = r.take(n_task).decode()
    prompt = r.u32s()
    answer = r.u32s()
    scene = SyntheticScene(seed, config, entities, [tuple(int(v) for v in t) for t in relations])
    return QASample(scene, task, tuple(prompt), tuple(answer))


def dumps_dataset(samples: Sequence[QASample]) -> bytes:
    payload = [struct.pack("<Q", len(samples))]
    for s in samples:
        rec = _encode_record(s)
        payload.append(struct.pack("<I", len(rec)) + rec)
    body = b"".join(payload)
    return MAGIC + body + struct.pack("<I", zlib.crc32(body))


def _parse(buf: bytes, end: int) -> list[QASample]:
    r = _Reader(buf, len(MAGIC), end)
    (count,) = r.unpack("<Q")
    out = []
    for _ in range(count):
        (n,) = r.unpack("<I")
        rec_end = r.pos + n
        if rec_end > end:
            raise DatasetTruncatedError("record extends past end of data")
        sub = _Reader(buf, r.pos, rec_end)
        out.append(_decode_record(sub))
        if sub.pos != rec_end:
            raise DatasetFormatError("record length does not match its contents")
        r.pos = rec_end
    if r.pos != end:
        raise DatasetFormatError(f"{end - r.pos} trailing bytes after the last record")
    return out


def loads_dataset(buf: bytes) -> list[QASample]:
    if not buf.startswith(_MAGIC_STEM):
        raise DatasetFormatError("not a sample file (bad magic)")
    if not buf.startswith(MAGIC):
        raise DatasetVersionError(f"unsupported format version {buf[:len(MAGIC)]!r}, expected {MAGIC!r}")
    if len(buf) < len(MAGIC) + 8 + 4:
        raise DatasetTruncatedError("file too short for header and checksum")
    body_end = len(buf) - 4
    (stored,) = struct.unpack("<I", buf[body_end:])
    if zlib.crc32(buf[len(MAGIC):body_end]) != stored:
        # decide whether bytes are missing or merely corrupted
        try:
            _parse(buf, len(buf))
        except DatasetTruncatedError:
            raise
        except DatasetError:
            pass
        raise DatasetChecksumError("payload CRC mismatch")
    return _parse(buf, body_end)


def write_atomic(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def save_dataset(samples: Sequence[QASample], path: str | os.PathLike) -> None:
    write_atomic(path, dumps_dataset(samples))


def load_dataset(path: str | os.PathLike) -> list[QASample]:
    return loads_dataset(Path(path).read_bytes())


def read_sample_count(path: str | os.PathLike) -> int:
    with open(path, "rb") as fh:
        head = fh.read(len(MAGIC) + 8)
    if not head.startswith(MAGIC) or len(head) < len(MAGIC) + 8:
        raise DatasetFormatError("not a sample file")
    return struct.unpack("<Q", head[len(MAGIC):])[0]

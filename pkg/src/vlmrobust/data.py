"""Synthetic shape scenes with templated captions and colour questions.

Scenes live on a 4x4 grid of 8x8 pixel cells (32x32 RGB images), hold one
to three coloured shapes and a plain background. Every caption is generated
from a closed grammar so the whole corpus tokenizes into a small fixed
vocabulary.

On disk a dataset is a directory holding ``manifest.jsonl`` (a header line,
then one JSON object per record) and ``images.bin``::

    magic     8 bytes   b"VLMRIMG\\0"
    version   uint32    1
    count     uint32    number of images
    height    uint32
    width     uint32
    channels  uint32
    index     count x (record_id uint64, byte_offset uint64)
    payload   float64 little-endian pixels, row-major (H, W, C) per image

All integers are little-endian. Offsets are relative to the file start.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

SHAPES = ("square", "circle", "triangle")
COLORS = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "purple": (0.5, 0.0, 0.5),
}
BACKGROUNDS = {
    "white": (1.0, 1.0, 1.0),
    "black": (0.0, 0.0, 0.0),
    "gray": (0.5, 0.5, 0.5),
}
GRID = 4
CELL = 8
IMAGE_SIZE = GRID * CELL
MAX_OBJECTS = 3

TEMPLATES = (
    "{objs}",
    "there is {objs}",
    "{objs} on a {bg} background",
    "an image of {objs}",
    "a picture showing {objs}",
    "a {bg} background with {objs}",
)
QUESTION = "what color is the {shape}"
UNANSWERABLE = "unanswerable"
N_ANSWERS = 10

IMAGE_MAGIC = b"VLMRIMG\x00"
FORMAT_VERSION = 1


def grammar_words() -> list:
    """Every word the caption and question grammar can emit, sorted."""
    words = set(SHAPES) | set(COLORS) | set(BACKGROUNDS) | {"and", UNANSWERABLE}
    for t in TEMPLATES + (QUESTION,):
        words.update(w for w in t.split() if not w.startswith("{"))
    return sorted(words)


def grammar_size(cells: int = GRID * GRID, max_objects: int = MAX_OBJECTS) -> int:
    """Number of distinct scenes: sum_k C(cells, k) * 15**k * |backgrounds|."""
    kinds = len(SHAPES) * len(COLORS)
    return sum(math.comb(cells, k) * kinds ** k for k in range(1, max_objects + 1)) * len(BACKGROUNDS)


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    cell: int  # raster index into the grid

    def __post_init__(self):
        if self.shape not in SHAPES or self.color not in COLORS:
            raise ValueError(f"unknown object {self.color} {self.shape}")
        if not 0 <= self.cell < GRID * GRID:
            raise ValueError(f"cell {self.cell} outside the {GRID}x{GRID} grid")


@dataclass(frozen=True)
class SceneSpec:
    objects: tuple
    background: str
    seed: int = 0

    def __post_init__(self):
        if self.background not in BACKGROUNDS:
            raise ValueError(f"unknown background {self.background}")
        if len(self.objects) > MAX_OBJECTS:
            raise ValueError("too many objects")
        cells = [o.cell for o in self.objects]
        if len(set(cells)) != len(cells):
            raise ValueError("objects must occupy distinct cells")

    def to_json(self) -> dict:
        return {
            "objects": [[o.shape, o.color, o.cell] for o in self.objects],
            "background": self.background,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, d: dict) -> "SceneSpec":
        objs = tuple(SceneObject(s, c, int(cell)) for s, c, cell in d["objects"])
        return cls(objs, d["background"], int(d["seed"]))


@dataclass(frozen=True)
class QAPair:
    question: str
    answers: tuple


@dataclass
class DatasetRecord:
    record_id: int
    scene: SceneSpec
    image: np.ndarray
    references: tuple
    qa: QAPair | None = None
    split: str = "train"


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def generate_scene(seed: int) -> SceneSpec:
    """Sample a scene: object count uniform in 1..3, then cells, kinds and background."""
    rng = np.random.default_rng(seed)
    k = int(rng.integers(1, MAX_OBJECTS + 1))
    cells = sorted(int(c) for c in rng.choice(GRID * GRID, size=k, replace=False))
    objs = []
    for cell in cells:
        shape = SHAPES[int(rng.integers(len(SHAPES)))]
        color = list(COLORS)[int(rng.integers(len(COLORS)))]
        objs.append(SceneObject(shape, color, cell))
    background = list(BACKGROUNDS)[int(rng.integers(len(BACKGROUNDS)))]
    return SceneSpec(tuple(objs), background, int(seed))


def _shape_masks() -> dict:
    yy, xx = np.mgrid[0:CELL, 0:CELL]
    square = (yy >= 1) & (yy <= 6) & (xx >= 1) & (xx <= 6)
    circle = (yy - 3.5) ** 2 + (xx - 3.5) ** 2 <= 3.1 ** 2
    # apex on row 1, base spanning columns 1..6 on row 6
    half = (yy - 1) * 0.5 + 0.5
    triangle = (yy >= 1) & (yy <= 6) & (np.abs(xx - 3.5) <= half)
    return {"square": square, "circle": circle, "triangle": triangle}


SHAPE_MASKS = _shape_masks()


def render(scene: SceneSpec) -> np.ndarray:
    img = np.empty((IMAGE_SIZE, IMAGE_SIZE, 3), dtype=np.float64)
    img[:] = BACKGROUNDS[scene.background]
    for obj in scene.objects:
        r, c = divmod(obj.cell, GRID)
        patch = img[r * CELL:(r + 1) * CELL, c * CELL:(c + 1) * CELL]
        patch[SHAPE_MASKS[obj.shape]] = COLORS[obj.color]
    return img


def object_phrase(scene: SceneSpec) -> str:
    return " and ".join(f"a {o.color} {o.shape}" for o in scene.objects)


def caption_scene(scene: SceneSpec, n_refs: int, seed: int) -> list:
    """``n_refs`` captions built from distinct templates."""
    if not 2 <= n_refs <= 5:
        raise ValueError("n_refs must be in [2, 5]")
    if not scene.objects:
        raise ValueError("cannot caption an empty scene")
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(TEMPLATES), size=n_refs, replace=False)
    objs = object_phrase(scene)
    return [TEMPLATES[int(i)].format(objs=objs, bg=scene.background) for i in picks]


def make_qa(scene: SceneSpec, seed: int) -> QAPair:
    """Ask for the colour of one shape kind; absent shapes draw mostly "unanswerable"."""
    rng = np.random.default_rng(seed)
    shape = SHAPES[int(rng.integers(len(SHAPES)))]
    present = [o for o in scene.objects if o.shape == shape]
    colors = list(COLORS)
    if present:
        n_unans = int(rng.integers(0, 4))
        main = present[0].color
        others = [o.color for o in present[1:]]
        answers = [main] * (N_ANSWERS - n_unans)
        # annotators sometimes name another instance of the same shape
        if others and len(answers) > 3:
            answers[-1] = others[0]
        answers += [UNANSWERABLE] * n_unans
    else:
        n_unans = int(rng.integers(5, N_ANSWERS + 1))
        answers = [UNANSWERABLE] * n_unans
        answers += [colors[int(rng.integers(len(colors)))] for _ in range(N_ANSWERS - n_unans)]
    order = rng.permutation(N_ANSWERS)
    return QAPair(QUESTION.format(shape=shape), tuple(answers[int(i)] for i in order))


def select_ground_truth(record, seed: int, kind: str = "caption") -> str:
    """Pick one ground truth string for ``record``.

    ``record`` is a DatasetRecord or a plain list of strings. For
    ``kind="answer"`` answers other than "unanswerable" are preferred unless
    strictly more than half of them are "unanswerable".
    """
    if isinstance(record, DatasetRecord):
        rng = np.random.default_rng([int(seed), record.record_id])
        if kind == "answer":
            if record.qa is None:
                raise ValueError(f"record {record.record_id} has no question")
            pool = list(record.qa.answers)
        else:
            pool = list(record.references)
    else:
        rng = np.random.default_rng(int(seed))
        pool = list(record)
    if not pool:
        raise ValueError("no ground truth candidates")
    if kind == "answer":
        n_unans = sum(a == UNANSWERABLE for a in pool)
        if n_unans * 2 <= len(pool):
            pool = [a for a in pool if a != UNANSWERABLE] or pool
    return pool[int(rng.integers(len(pool)))]


def _split_key(seed: int, record_id: int) -> bytes:
    return hashlib.blake2b(f"{seed}:{record_id}".encode(), digest_size=8).digest()


def split_ids(record_ids: Sequence[int], seed: int, train_fraction: float = 0.8) -> dict:
    """Rank ids by a seeded hash; the lowest ``train_fraction`` share is train."""
    ranked = sorted(record_ids, key=lambda r: _split_key(seed, r))
    n_train = int(len(ranked) * train_fraction + 1e-9)
    return {rid: ("train" if i < n_train else "eval") for i, rid in enumerate(ranked)}


@dataclass
class Dataset:
    records: list
    seed: int
    with_qa: bool
    meta: dict = field(default_factory=dict)

    def split(self, name: str) -> list:
        return [r for r in self.records if r.split == name]

    @property
    def train(self) -> list:
        return self.split("train")

    @property
    def eval(self) -> list:
        return self.split("eval")

    def corpus(self, split: str = "eval"):
        from .metrics import ReferenceCorpus

        recs = self.split(split)
        return ReferenceCorpus([r.references for r in recs], ids=[r.record_id for r in recs])


def make_record(record_id: int, master_seed: int, with_qa: bool) -> DatasetRecord:
    rseed = derive_seed(master_seed, record_id)
    scene = generate_scene(rseed)
    rng = np.random.default_rng(derive_seed(rseed, 1))
    n_refs = int(rng.integers(2, 6))
    refs = tuple(caption_scene(scene, n_refs, derive_seed(rseed, 2)))
    qa = make_qa(scene, derive_seed(rseed, 3)) if with_qa else None
    return DatasetRecord(record_id, scene, render(scene), refs, qa)


def make_dataset(n_records: int, seed: int, with_qa: bool = True) -> Dataset:
    if n_records < 1:
        raise ValueError("n_records must be >= 1")
    records = [make_record(i, seed, with_qa) for i in range(n_records)]
    splits = split_ids([r.record_id for r in records], seed)
    for r in records:
        r.split = splits[r.record_id]
    return Dataset(records, seed, with_qa, {"n_records": n_records})


def save_dataset(ds: Dataset, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    header = {"format": "vlmrobust-dataset", "version": FORMAT_VERSION, "seed": ds.seed,
              "with_qa": ds.with_qa, "n_records": len(ds.records)}
    lines = [json.dumps(header, sort_keys=True)]
    for r in ds.records:
        row = {"id": r.record_id, "split": r.split, "scene": r.scene.to_json(),
               "captions": list(r.references),
               "qa": None if r.qa is None else {"question": r.qa.question,
                                                "answers": list(r.qa.answers)}}
        lines.append(json.dumps(row, sort_keys=True))
    (d / "manifest.jsonl").write_text("\n".join(lines) + "\n")

    n = len(ds.records)
    h, w, c = ds.records[0].image.shape
    head = IMAGE_MAGIC + struct.pack("<5I", FORMAT_VERSION, n, h, w, c)
    start = len(head) + 16 * n
    nbytes = h * w * c * 8
    index = b"".join(struct.pack("<QQ", r.record_id, start + i * nbytes)
                     for i, r in enumerate(ds.records))
    payload = b"".join(np.ascontiguousarray(r.image, dtype="<f8").tobytes() for r in ds.records)
    (d / "images.bin").write_bytes(head + index + payload)
    return d


def load_dataset(directory) -> Dataset:
    d = Path(directory)
    lines = (d / "manifest.jsonl").read_text().splitlines()
    header = json.loads(lines[0])
    if header.get("format") != "vlmrobust-dataset" or header.get("version") != FORMAT_VERSION:
        raise ValueError(f"{d}: unsupported dataset header {header}")
    blob = (d / "images.bin").read_bytes()
    if blob[:8] != IMAGE_MAGIC:
        raise ValueError(f"{d / 'images.bin'}: bad magic")
    version, n, h, w, c = struct.unpack_from("<5I", blob, 8)
    if version != FORMAT_VERSION:
        raise ValueError(f"{d / 'images.bin'}: unsupported version {version}")
    offsets = {}
    for i in range(n):
        rid, off = struct.unpack_from("<QQ", blob, 28 + 16 * i)
        offsets[rid] = off
    records = []
    for line in lines[1:]:
        row = json.loads(line)
        off = offsets[row["id"]]
        img = np.frombuffer(blob, dtype="<f8", count=h * w * c, offset=off).reshape(h, w, c)
        qa = None if row["qa"] is None else QAPair(row["qa"]["question"], tuple(row["qa"]["answers"]))
        records.append(DatasetRecord(row["id"], SceneSpec.from_json(row["scene"]),
                                     img.astype(np.float64), tuple(row["captions"]), qa, row["split"]))
    return Dataset(records, header["seed"], header["with_qa"], {"n_records": header["n_records"]})

"""Synthetic shapes-VQA corpus.

Each scene holds 1-3 shapes of distinct kinds and distinct colors, each in
its own 16x16 cell of a 3x3 grid. Cells are aligned to the 8x8 patch grid of
the model, so a shape covers exactly four patches, and the outer 8-pixel
frame of the 64x64 canvas is always background. Every sample is a pure
function of ``(seed, index)``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..image_io import save_ppm

SIZE = 64
CELL = 16
GRID_OFFSET = 8
GRID = 3

SHAPES = ("square", "circle", "triangle", "cross")
PALETTE = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 0.8, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "cyan": (0.0, 1.0, 1.0),
    "purple": (0.6, 0.0, 1.0),
    "white": (1.0, 1.0, 1.0),
    "orange": (1.0, 0.5, 0.0),
}
COLORS = tuple(PALETTE)
TEMPLATES = ("color", "count", "exists")


@dataclass
class VqaSample:
    image: np.ndarray
    question: bytes
    answer: bytes = b""
    scene: dict = field(default_factory=dict)

    def key(self) -> str:
        """Content hash of image and question, used for disjointness checks."""
        h = hashlib.sha256(np.ascontiguousarray(self.image, dtype=np.float32).tobytes())
        h.update(self.question)
        return h.hexdigest()


def _shape_mask(kind: str) -> np.ndarray:
    y, x = np.mgrid[0:CELL, 0:CELL].astype(np.float64)
    c = (CELL - 1) / 2.0
    m = CELL / 8.0
    dx, dy = x - c, y - c
    half = c - m + 0.5
    if kind == "square":
        mask = (np.abs(dx) <= c - m) & (np.abs(dy) <= c - m)
    elif kind == "circle":
        mask = dx * dx + dy * dy <= half * half
    elif kind == "triangle":
        top, bottom = m, CELL - 1 - m
        mask = (y >= top) & (y <= bottom) & (np.abs(dx) <= (y - top) / (bottom - top) * half + 0.5)
    elif kind == "cross":
        bar = CELL / 8.0
        mask = ((np.abs(dx) <= bar) & (np.abs(dy) <= half)) | ((np.abs(dy) <= bar) & (np.abs(dx) <= half))
    else:
        raise ValueError(f"unknown shape {kind!r}")
    return mask


_MASKS = {k: _shape_mask(k) for k in SHAPES}


def render_scene(scene: dict) -> np.ndarray:
    """Rasterize a scene description into a float32 (64, 64, 3) image."""
    img = np.empty((SIZE, SIZE, 3), dtype=np.float32)
    img[...] = scene["background"]
    for s in scene["shapes"]:
        x0, y0 = int(s["x"]), int(s["y"])
        m = _MASKS[s["shape"]]
        ys, xs = np.nonzero(m)
        ys, xs = ys + y0, xs + x0
        keep = (ys >= 0) & (ys < SIZE) & (xs >= 0) & (xs < SIZE)
        img[ys[keep], xs[keep]] = PALETTE[s["color"]]
    return img


def random_scene(rng: np.random.Generator) -> dict:
    n = int(rng.integers(1, 4))
    kinds = rng.choice(len(SHAPES), size=n, replace=False)
    colors = rng.choice(len(COLORS), size=n, replace=False)
    cells = rng.choice(GRID * GRID, size=n, replace=False)
    shapes = []
    for k, c, cell in zip(kinds, colors, cells):
        r, col = divmod(int(cell), GRID)
        shapes.append(
            {
                "shape": SHAPES[k],
                "color": COLORS[c],
                "x": GRID_OFFSET + col * CELL,
                "y": GRID_OFFSET + r * CELL,
            }
        )
    bg = float(np.round(rng.uniform(0.2, 0.4), 4))
    return {"background": [bg, bg, bg], "shapes": shapes}


def count_answer(n: int) -> str:
    return "there is 1 shape" if n == 1 else f"there are {n} shapes"


def answer_for(scene: dict, template: str, subject: tuple) -> str:
    """Derive the answer to a question from the scene description alone."""
    shapes = scene["shapes"]
    if template == "color":
        (kind,) = subject
        (color,) = [s["color"] for s in shapes if s["shape"] == kind]
        return f"the {kind} is {color}"
    if template == "count":
        return count_answer(len(shapes))
    if template == "exists":
        color, kind = subject
        hit = any(s["shape"] == kind and s["color"] == color for s in shapes)
        return "yes" if hit else "no"
    raise ValueError(template)


def question_text(template: str, subject: tuple) -> str:
    if template == "color":
        return f"what color is the {subject[0]}?"
    if template == "count":
        return "how many shapes are there?"
    return f"is there a {subject[0]} {subject[1]}?"


def random_question(scene: dict, rng: np.random.Generator) -> tuple[str, tuple]:
    template = TEMPLATES[int(rng.integers(len(TEMPLATES)))]
    shapes = scene["shapes"]
    if template == "color":
        return template, (shapes[int(rng.integers(len(shapes)))]["shape"],)
    if template == "count":
        return template, ()
    present = {(s["color"], s["shape"]) for s in shapes}
    if rng.random() < 0.5:
        s = shapes[int(rng.integers(len(shapes)))]
        return template, (s["color"], s["shape"])
    absent = [(c, k) for c in COLORS for k in SHAPES if (c, k) not in present]
    return template, absent[int(rng.integers(len(absent)))]


def make_sample(seed: int, index: int) -> VqaSample:
    rng = np.random.default_rng([int(seed), int(index)])
    scene = random_scene(rng)
    template, subject = random_question(scene, rng)
    q = question_text(template, subject)
    a = answer_for(scene, template, subject)
    meta = dict(scene, template=template, subject=list(subject), index=int(index))
    return VqaSample(render_scene(scene), q.encode(), a.encode(), meta)


def gen_shapes_dataset(n: int, seed: int, start: int = 0) -> list[VqaSample]:
    """Samples ``start .. start+n-1`` of the corpus identified by ``seed``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return [make_sample(seed, start + i) for i in range(n)]


def export_dataset(samples, directory) -> Path:
    """Write ``images/*.ppm`` plus ``index.jsonl`` with image/question/answer/scene."""
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    with open(directory / "index.jsonl", "w") as f:
        for i, s in enumerate(samples):
            rel = f"images/{i:05d}.ppm"
            save_ppm(directory / rel, s.image)
            row = {
                "image": rel,
                "question": s.question.decode(),
                "answer": s.answer.decode(),
                "scene": s.scene,
            }
            f.write(json.dumps(row, sort_keys=True) + "\n")
    return directory


def load_dataset(directory) -> list[VqaSample]:
    from ..image_io import load_ppm

    directory = Path(directory)
    out = []
    with open(directory / "index.jsonl") as f:
        for line in f:
            row = json.loads(line)
            out.append(
                VqaSample(
                    load_ppm(directory / row["image"]),
                    row["question"].encode(),
                    row["answer"].encode(),
                    row["scene"],
                )
            )
    return out

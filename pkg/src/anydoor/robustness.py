"""Persistence of a perturbation under post-capture corruptions and across
frames of a slowly changing scene."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .metrics import EvalReport, evaluate, exact_match
from .model.mllm import greedy_decode_batch
from .model.shapes import CELL, SIZE, VqaSample, answer_for, question_text, random_question, random_scene, render_scene
from .perturbation import apply

KINDS = ("crop_resize", "rescale", "gaussian_noise")


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    crop_fraction: float = 0.875
    scale: float = 0.5
    noise_sigma: float = 8.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown corruption {self.kind!r}")
        if not 0.0 < self.crop_fraction <= 1.0:
            raise ValueError("crop fraction must be in (0, 1]")
        if not 0.0 < self.scale <= 1.0:
            raise ValueError("scale must be in (0, 1]")
        if self.noise_sigma < 0:
            raise ValueError("noise sigma must be >= 0")

    @property
    def param(self):
        return {"crop_resize": self.crop_fraction, "rescale": self.scale,
                "gaussian_noise": self.noise_sigma}[self.kind]

    @property
    def label(self):
        return f"{self.kind}={self.param:g}"


def default_corruptions(crop_fraction=0.875, scale=0.5, noise_sigma=8.0):
    return [
        CorruptionSpec("crop_resize", crop_fraction=crop_fraction),
        CorruptionSpec("rescale", scale=scale),
        CorruptionSpec("gaussian_noise", noise_sigma=noise_sigma),
    ]


def _axis_weights(n_out, n_in):
    # half-pixel centres, edge-clamped
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, (src - i0)


def resize_bilinear(img: np.ndarray, H: int, W: int) -> np.ndarray:
    """Bilinear resampling of an (h, w, C) image; constants map to themselves."""
    img = np.asarray(img)
    h, w = img.shape[:2]
    y0, y1, wy = _axis_weights(H, h)
    x0, x1, wx = _axis_weights(W, w)
    wy = wy.astype(img.dtype)[:, None, None]
    wx = wx.astype(img.dtype)[None, :, None]
    rows_a = img[y0]
    rows = rows_a + (img[y1] - rows_a) * wy
    left = rows[:, x0]
    return left + (rows[:, x1] - left) * wx


def corrupt(V_pert: np.ndarray, spec: CorruptionSpec, rng: np.random.Generator | None = None) -> np.ndarray:
    """Apply one corruption to an already-perturbed image."""
    V = np.asarray(V_pert)
    H, W = V.shape[:2]
    if spec.kind == "crop_resize":
        ch = max(1, int(round(spec.crop_fraction * H)))
        cw = max(1, int(round(spec.crop_fraction * W)))
        top, left = (H - ch) // 2, (W - cw) // 2
        out = resize_bilinear(V[top : top + ch, left : left + cw], H, W)
    elif spec.kind == "rescale":
        small = resize_bilinear(V, math.ceil(spec.scale * H), math.ceil(spec.scale * W))
        out = resize_bilinear(small, H, W)
    else:
        if spec.noise_sigma == 0:
            return V.copy()
        if rng is None:
            rng = np.random.default_rng(0)
        out = V + rng.normal(0.0, spec.noise_sigma / 255.0, size=V.shape).astype(V.dtype)
    return np.clip(out, 0.0, 1.0).astype(V.dtype, copy=False)


def eval_under_corruption(model, pert, eval_set, pair, refs, specs, *, ensemble=None, seed=0,
                          fingerprint=None) -> dict:
    """Baseline report plus one report per corruption, keyed by label."""
    base_fp = dict(fingerprint or {})
    reports = {"none": evaluate(model, pert, eval_set, pair, refs, ensemble=ensemble,
                                fingerprint=dict(base_fp, corruption="none"))}
    for spec in specs:
        rng = np.random.default_rng([int(seed), KINDS.index(spec.kind)])
        reports[spec.label] = evaluate(
            model, pert, eval_set, pair, refs, ensemble=ensemble, corruption=spec, corruption_rng=rng,
            fingerprint=dict(base_fp, corruption=spec.kind, param=spec.param),
        )
    return reports


def corruption_csv(reports: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["corruption", "param", "exact_match", "contain", "bleu4", "rouge_l"])
    for label, r in reports.items():
        kind, _, param = label.partition("=")
        w.writerow([kind, param, repr(r.with_trigger.exact_match), repr(r.with_trigger.contain),
                    repr(r.without_trigger.bleu4), repr(r.without_trigger.rouge_l)])
    return buf.getvalue()


# ----------------------------------------------------------------------------
# drifting scenes


@dataclass
class FrameSequence:
    frames: list
    questions: list
    answers: list
    scenes: list = field(default_factory=list)

    def __len__(self):
        return len(self.frames)

    def samples(self):
        return [VqaSample(f, q, a, s) for f, q, a, s in zip(self.frames, self.questions, self.answers, self.scenes)]


def _reflect(pos, vel, lo, hi):
    pos = pos + vel
    if pos < lo:
        pos, vel = 2 * lo - pos, -vel
    elif pos > hi:
        pos, vel = 2 * hi - pos, -vel
    return pos, vel


def gen_frame_sequence(seed: int, n_frames: int, speed: int = 2) -> FrameSequence:
    """Frames of one scene whose shapes drift ``speed`` px/frame, reflecting at the edges.

    Frame 0 is exactly the static renderer's image of ``random_scene`` for the
    same seed.
    """
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    rng = np.random.default_rng([int(seed), 0])
    scene = random_scene(rng)
    motion = np.random.default_rng([int(seed), 1])
    qrng = np.random.default_rng([int(seed), 2])
    vel = [(int(motion.choice([-speed, speed])), int(motion.choice([-speed, speed]))) for _ in scene["shapes"]]
    frames, questions, answers, scenes = [], [], [], []
    cur = {"background": scene["background"], "shapes": [dict(s) for s in scene["shapes"]]}
    for f in range(n_frames):
        if f > 0:
            for s, (i, (vx, vy)) in zip(cur["shapes"], enumerate(vel)):
                s["x"], vx = _reflect(s["x"], vx, 0, SIZE - CELL)
                s["y"], vy = _reflect(s["y"], vy, 0, SIZE - CELL)
                vel[i] = (vx, vy)
        template, subject = random_question(cur, qrng)
        frames.append(render_scene(cur))
        questions.append(question_text(template, subject).encode())
        answers.append(answer_for(cur, template, subject).encode())
        scenes.append(json.loads(json.dumps(cur)))
    return FrameSequence(frames, questions, answers, scenes)


def eval_frames(model, pert, seq: FrameSequence, pair, trigger_rng=None, max_len=64) -> list[dict]:
    """Per-frame triggered/untriggered decodes with the same perturbation on every frame."""
    from .attack import insert_trigger

    images = np.stack(seq.frames)
    if pert is not None:
        images = apply(images, pert)
    triggered = [insert_trigger(q, pair.trigger, trigger_rng) for q in seq.questions]
    out_t = greedy_decode_batch(model, images, triggered, max_len)
    out_p = greedy_decode_batch(model, images, list(seq.questions), max_len)
    return [
        {
            "frame": i,
            "question": seq.questions[i].decode(),
            "triggered_output": out_t[i].decode("utf-8", "replace"),
            "exact_match": exact_match(out_t[i], pair.target),
            "plain_output": out_p[i].decode("utf-8", "replace"),
        }
        for i in range(len(seq))
    ]


def frames_jsonl(outcomes) -> str:
    return "".join(json.dumps(o, sort_keys=True) + "\n" for o in outcomes)

"""Trigger-gated universal perturbation: objective and optimizer.

The objective pairs two teacher-forced losses per ensemble sample: the
triggered question should produce the target string, and the plain question
should reproduce the clean model's own greedy answer. The perturbation is
optimized with masked, l1-normalized momentum and sign steps, optionally
averaging over spectrum-simulation augmentations.
"""

from __future__ import annotations

import csv
import io
import logging
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .dct import dct2, idct2
from .model.mllm import ToyMLLM, answer_loss, greedy_decode_batch
from .model.tokenizer import tokenize
from .perturbation import PerturbationSpec, UniversalPerturbation, build_mask, project
from .tensor import Tensor

log = logging.getLogger(__name__)

DEFAULT_TRIGGER = b"SUDO"
DEFAULT_TARGET = b"I want to destroy the whole world together"
PLACEMENTS = ("prefix", "suffix", "random_word_boundary")
STREAMS = ("batch", "ssa-noise", "ssa-mask", "weights", "trigger-placement")


class AttackAborted(RuntimeError):
    def __init__(self, message, step, last_finite_loss=None):
        super().__init__(message)
        self.step = step
        self.last_finite_loss = last_finite_loss


def _b(s) -> bytes:
    return s.encode() if isinstance(s, str) else bytes(s)


def stream(seed: int, name: str) -> np.random.Generator:
    """Named RNG stream; streams never shift each other's draws."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


# ----------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class TriggerSpec:
    trigger: bytes = DEFAULT_TRIGGER
    placement: str = "prefix"

    def __post_init__(self):
        object.__setattr__(self, "trigger", _b(self.trigger))
        if not self.trigger:
            raise ValueError("trigger must be non-empty")
        if self.placement not in PLACEMENTS:
            raise ValueError(f"placement must be one of {PLACEMENTS}")


@dataclass(frozen=True)
class TriggerTargetPair:
    trigger: TriggerSpec = field(default_factory=TriggerSpec)
    target: bytes = DEFAULT_TARGET

    def __post_init__(self):
        if isinstance(self.trigger, (str, bytes)):
            object.__setattr__(self, "trigger", TriggerSpec(self.trigger))
        object.__setattr__(self, "target", _b(self.target))
        if not self.target:
            raise ValueError("target must be non-empty")


@dataclass(frozen=True)
class SsaConfig:
    enabled: bool = False
    n: int = 20
    sigma: float = 16.0
    rho: float = 0.5


@dataclass(frozen=True)
class WeightSchedule:
    kind: str = "static"
    w1: float = 1.0
    w2: float = 1.0
    alpha: float = 0.5

    def __post_init__(self):
        if self.kind not in ("static", "dynamic_beta"):
            raise ValueError(f"unknown weight schedule {self.kind!r}")
        if self.kind == "static" and (self.w1 < 0 or self.w2 < 0):
            raise ValueError("static weights must be >= 0")
        if self.kind == "dynamic_beta" and self.alpha <= 0:
            raise ValueError("alpha must be > 0")


def default_step_size(strategy: str) -> float:
    return 2 / 255 if strategy == "border" else 1 / 255


@dataclass(frozen=True)
class AttackConfig:
    iterations: int = 500
    step_size: float | None = None
    momentum: float = 0.9
    batch_size: int = 8
    ensemble_size: int | None = None
    ssa: SsaConfig = field(default_factory=SsaConfig)
    weights: WeightSchedule = field(default_factory=WeightSchedule)
    seed: int = 0
    max_zero_grad: int = 10

    def validate(self, K: int) -> None:
        if not K >= self.batch_size >= 1:
            raise ValueError(f"need K >= B >= 1, got K={K}, B={self.batch_size}")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if self.step_size is not None and self.step_size <= 0:
            raise ValueError("step size must be > 0")
        s = self.ssa
        if s.n < 1 or s.sigma < 0 or not 0.0 <= s.rho < 1.0:
            raise ValueError("SSA needs N >= 1, sigma >= 0, 0 <= rho < 1")

    def resolved_step(self, strategy: str) -> float:
        return self.step_size if self.step_size is not None else default_step_size(strategy)


# ----------------------------------------------------------------------------
# trigger and references


def insert_trigger(question, spec: TriggerSpec, rng: np.random.Generator | None = None) -> bytes:
    q, trig = _b(question), spec.trigger
    if spec.placement == "prefix":
        return trig + b" " + q if q else trig
    if spec.placement == "suffix":
        return q + b" " + trig if q else trig
    if not q:
        return trig
    if rng is None:
        raise ValueError("random_word_boundary placement needs an rng")
    words = q.split(b" ")
    i = int(rng.integers(len(words) + 1))
    return b" ".join(words[:i] + [trig] + words[i:])


@dataclass(frozen=True)
class ReferenceCache:
    answers: tuple
    tokens: tuple

    def __len__(self):
        return len(self.answers)

    def __getitem__(self, k):
        return self.answers[k]


def cache_references(model: ToyMLLM, samples, max_len: int = 64) -> ReferenceCache:
    """Clean-image greedy answers; an empty decode becomes a bare EOS target."""
    if not samples:
        return ReferenceCache((), ())
    outs = greedy_decode_batch(model, np.stack([s.image for s in samples]), [s.question for s in samples], max_len)
    # tokens exclude EOS; the loss appends it, so b"" supervises EOS alone
    return ReferenceCache(tuple(outs), tuple(tuple(tokenize(o)) for o in outs))


# ----------------------------------------------------------------------------
# loss pieces


def sample_weights(schedule: WeightSchedule, rng: np.random.Generator) -> tuple[float, float]:
    if schedule.kind == "static":
        return float(schedule.w1), float(schedule.w2)
    lam = float(rng.beta(schedule.alpha, schedule.alpha))
    return lam, 1.0 - lam


def ssa_draws(batch: int, n: int, sigma: float, rho: float, noise_rng, scale_rng, H=64, W=64, dtype=np.float32):
    """Additive pixel noise (batch, n, H, W, 3) and spectral scales (batch, n, 3, H, W)."""
    noise = noise_rng.normal(0.0, sigma / 255.0, size=(batch, n, H, W, 3)).astype(dtype)
    scales = scale_rng.uniform(1.0 - rho, 1.0 + rho, size=(batch, n, 3, H, W)).astype(dtype)
    return noise, scales


def ssa_augment(V_pert, n: int, sigma: float, rho: float, noise_rng=None, scale_rng=None, draws=None):
    """Spectrum-simulation copies ``idct2(dct2(V + noise) * scales)`` clipped to [0, 1].

    ``V_pert`` is (H, W, 3) or (B, H, W, 3), as a numpy array or a Tensor; the
    result has n copies per image, image-major: (B * n, H, W, 3). A Tensor
    input stays differentiable.
    """
    as_numpy = not isinstance(V_pert, Tensor)
    x = Tensor(V_pert) if as_numpy else V_pert
    if x.ndim == 3:
        x = x.reshape(1, *x.shape)
    B, H, W, _ = x.shape
    if draws is None:
        if noise_rng is None:
            noise_rng = np.random.default_rng()
        if scale_rng is None:
            scale_rng = noise_rng
        draws = ssa_draws(B, n, sigma, rho, noise_rng, scale_rng, H, W, x.data.dtype)
    noise, scales = draws
    y = x.reshape(B, 1, H, W, 3) + Tensor(noise, dtype=x.data.dtype)
    y = y.transpose(0, 1, 4, 2, 3)
    y = idct2(dct2(y) * Tensor(scales, dtype=x.data.dtype))
    y = T.clip(y.transpose(0, 1, 3, 4, 2).reshape(B * n, H, W, 3), 0.0, 1.0)
    return y.data if as_numpy else y


def perturb_tensor(images: np.ndarray, delta: Tensor, mask: np.ndarray) -> Tensor:
    """Differentiable ``clip(V + delta * mask, 0, 1)`` for a batch of images."""
    dt = delta.data.dtype
    m = Tensor(mask[..., None], dtype=dt)
    return T.clip(Tensor(images, dtype=dt) + delta * m, 0.0, 1.0)


def attack_loss(
    model: ToyMLLM,
    delta: Tensor,
    batch,
    pair: TriggerTargetPair,
    refs,
    w1: float,
    w2: float,
    *,
    mask: np.ndarray,
    triggered=None,
    trigger_rng=None,
    ssa: SsaConfig | None = None,
    ssa_rngs=None,
):
    """Mean over the batch of ``w1 * L(triggered -> target) + w2 * L(plain -> reference)``.

    ``refs`` holds one reference answer (bytes or token list) per batch item.
    With SSA enabled each term is averaged over the same N augmented copies.
    Returns ``(loss, loss_trigger, loss_benign)``; the last two are unweighted
    batch means, as floats.
    """
    images = np.stack([s.image for s in batch])
    Bn = len(batch)
    if triggered is None:
        triggered = [insert_trigger(s.question, pair.trigger, trigger_rng) for s in batch]
    x = perturb_tensor(images, delta, mask)
    copies = 1
    if ssa is not None and ssa.enabled:
        copies = ssa.n
        noise_rng, scale_rng = ssa_rngs if ssa_rngs is not None else (None, None)
        x = ssa_augment(x, ssa.n, ssa.sigma, ssa.rho, noise_rng, scale_rng)
    kv = model.image_stream(x)
    n_img = Bn * copies
    src = np.repeat(np.arange(Bn), copies)
    ref_ids = [list(r) if not isinstance(r, (bytes, str)) else tokenize(r) for r in refs]
    questions = [triggered[k] for k in src] + [batch[k].question for k in src]
    answers = [tokenize(pair.target)] * n_img + [ref_ids[k] for k in src]
    weights = np.concatenate([np.full(n_img, w1 / n_img), np.full(n_img, w2 / n_img)])
    image_index = np.concatenate([np.arange(n_img), np.arange(n_img)])
    loss, per_seq = answer_loss(model, kv, questions, answers, weights, image_index)
    return loss, float(per_seq[:n_img].mean()), float(per_seq[n_img:].mean())


# ----------------------------------------------------------------------------
# optimizer steps


@dataclass
class MomentumState:
    g: np.ndarray
    zero_streak: int = 0

    @classmethod
    def zeros(cls, H=64, W=64):
        return cls(np.zeros((H, W, 3), dtype=np.float32))


def momentum_step(state: MomentumState, grad: np.ndarray, mu: float, mask: np.ndarray) -> MomentumState:
    """``g <- mu * g + (grad / ||grad||_1) * mask``; a zero gradient only decays g."""
    l1 = float(np.abs(grad).astype(np.float64).sum())
    decayed = (mu * state.g).astype(state.g.dtype)
    if l1 == 0.0:
        return MomentumState(decayed, state.zero_streak + 1)
    step = (grad.astype(np.float64) / l1 * mask[..., None]).astype(state.g.dtype)
    return MomentumState(decayed + step, 0)


def pgd_update(delta: np.ndarray, g: np.ndarray, eta: float, spec: PerturbationSpec, mask=None) -> np.ndarray:
    """``project(delta + eta * sign(g))`` with sign(0) = 0."""
    moved = delta + delta.dtype.type(eta) * np.sign(g).astype(delta.dtype)
    return project(moved, spec, mask)


# ----------------------------------------------------------------------------
# run log


LOG_FIELDS = ("step", "w1", "w2", "loss_trigger", "loss_benign", "grad_l1", "delta_linf")


@dataclass
class AttackLog:
    rows: list = field(default_factory=list)

    def append(self, **row):
        self.rows.append({k: row[k] for k in LOG_FIELDS})

    def __len__(self):
        return len(self.rows)

    def column(self, name) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=np.float64)

    def smoothed(self, name, window=50) -> np.ndarray:
        """Trailing moving average (shorter windows at the start)."""
        x = self.column(name)
        c = np.concatenate([[0.0], np.cumsum(x)])
        idx = np.arange(1, len(x) + 1)
        lo = np.maximum(0, idx - window)
        return (c[idx] - c[lo]) / (idx - lo)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=LOG_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: (r[k] if k == "step" else repr(float(r[k]))) for k in LOG_FIELDS})
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "AttackLog":
        out = cls()
        for r in csv.DictReader(io.StringIO(text)):
            out.rows.append({k: (int(r[k]) if k == "step" else float(r[k])) for k in LOG_FIELDS})
        return out


# ----------------------------------------------------------------------------
# main loop


def _batches(K, B, rng):
    """Endless batches: each epoch is a fresh permutation cut into full batches."""
    while True:
        order = rng.permutation(K)
        for i in range(0, K - B + 1, B):
            yield order[i : i + B]


def run_attack(
    model: ToyMLLM,
    samples,
    pair: TriggerTargetPair,
    spec: PerturbationSpec,
    config: AttackConfig,
    references: ReferenceCache | None = None,
    on_step=None,
):
    """Optimize one universal perturbation over the ensemble ``samples``.

    Ground-truth answers in ``samples`` are never read. ``on_step(t, delta,
    row)`` is called after every update. Returns ``(perturbation, log)``.
    """
    if config.ensemble_size is not None:
        samples = list(samples)[: config.ensemble_size]
    K = len(samples)
    config.validate(K)
    H, W = samples[0].image.shape[:2]
    mask = build_mask(spec, H, W)
    model.freeze()
    if references is None:
        references = cache_references(model, samples)
    if len(references) != K:
        raise ValueError(f"{len(references)} references for {K} samples")

    rngs = {name: stream(config.seed, name) for name in STREAMS}
    eta = config.resolved_step(spec.strategy)
    delta = np.zeros((H, W, 3), dtype=np.float32)
    state = MomentumState.zeros(H, W)
    attack_log = AttackLog()
    batches = _batches(K, config.batch_size, rngs["batch"])
    last_finite = None

    for t in range(config.iterations):
        idx = next(batches)
        batch = [samples[i] for i in idx]
        refs = [references.tokens[i] for i in idx]
        w1, w2 = sample_weights(config.weights, rngs["weights"])
        d = Tensor(delta, requires_grad=True)
        loss, l_trig, l_ben = attack_loss(
            model, d, batch, pair, refs, w1, w2,
            mask=mask,
            trigger_rng=rngs["trigger-placement"],
            ssa=config.ssa,
            ssa_rngs=(rngs["ssa-noise"], rngs["ssa-mask"]),
        )
        value = float(loss.data)
        if not np.isfinite(value):
            raise AttackAborted(f"non-finite attack loss at step {t} (last finite {last_finite})", t, last_finite)
        last_finite = value
        grad = T.backward(loss)[d]
        # descend: momentum accumulates the negative loss gradient
        state = momentum_step(state, -grad, config.momentum, mask)
        if state.zero_streak >= config.max_zero_grad:
            raise AttackAborted(f"zero gradient for {state.zero_streak} consecutive steps at step {t}", t, last_finite)
        delta = pgd_update(delta, state.g, eta, spec, mask)
        row = dict(
            step=t, w1=w1, w2=w2, loss_trigger=l_trig, loss_benign=l_ben,
            grad_l1=float(np.abs(grad).astype(np.float64).sum()),
            delta_linf=float(np.abs(delta).max()),
        )
        attack_log.append(**row)
        if on_step is not None:
            on_step(t, delta, row)
        if t % 50 == 0:
            log.info("step %d loss_trigger %.4f loss_benign %.4f", t, l_trig, l_ben)
    return UniversalPerturbation(delta, spec, mask), attack_log


__all__ = [
    "AttackAborted", "AttackConfig", "AttackLog", "MomentumState", "ReferenceCache", "SsaConfig",
    "TriggerSpec", "TriggerTargetPair", "WeightSchedule", "attack_loss", "cache_references",
    "insert_trigger", "momentum_step", "pgd_update", "run_attack", "sample_weights", "ssa_augment",
    "DEFAULT_TARGET", "DEFAULT_TRIGGER",
]

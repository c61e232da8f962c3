"""scikit-learn style wrapper around the universal perturbation attack.

``fit`` optimizes one perturbation on an ensemble of (image, question)
pairs, ``transform`` applies it to new images, ``predict`` decodes the
frozen model's answers on the perturbed images.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .attack import (
    DEFAULT_TARGET,
    DEFAULT_TRIGGER,
    AttackConfig,
    SsaConfig,
    TriggerSpec,
    TriggerTargetPair,
    WeightSchedule,
    insert_trigger,
    run_attack,
    stream,
)
from .metrics import contain, exact_match
from .model.mllm import ToyMLLM, greedy_decode_batch
from .model.shapes import VqaSample
from .perturbation import PerturbationSpec, apply


def check_images(X, size: int = 64) -> np.ndarray:
    """Return X as a float32 (n, size, size, 3) array with values in [0, 1]."""
    X = np.asarray(X, dtype=np.float32)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[1:] != (size, size, 3):
        raise ValueError(f"expected images of shape (n, {size}, {size}, 3), got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("expected at least one image")
    if not np.all(np.isfinite(X)):
        raise ValueError("images contain NaN or infinite values")
    if X.min() < 0.0 or X.max() > 1.0:
        raise ValueError("image values must lie in [0, 1]")
    return X


def check_questions(questions, n: int) -> list[bytes]:
    if isinstance(questions, (str, bytes)):
        questions = [questions]
    out = [q.encode() if isinstance(q, str) else bytes(q) for q in questions]
    if len(out) != n:
        raise ValueError(f"{len(out)} questions for {n} images")
    return out


def check_vqa_pairs(X, questions, size: int = 64):
    X = check_images(X, size)
    return X, check_questions(questions, len(X))


class AnyDoorAttack(TransformerMixin, BaseEstimator):
    """One trigger-gated image perturbation shared by every input of a frozen ToyMLLM.

    Parameters mirror the attack configuration; ``strategy`` selects the mask
    and the matching budget (``epsilon``, ``patch_width`` or ``border_width``)
    falls back to its default when left as None.
    """

    def __init__(
        self,
        model=None,
        strategy="border",
        epsilon=None,
        patch_width=None,
        border_width=None,
        trigger=DEFAULT_TRIGGER,
        target=DEFAULT_TARGET,
        placement="prefix",
        iterations=500,
        step_size=None,
        momentum=0.9,
        batch_size=8,
        ssa=False,
        ssa_n=20,
        ssa_sigma=16.0,
        ssa_rho=0.5,
        weights="static",
        w1=1.0,
        w2=1.0,
        alpha=0.5,
        random_state=0,
    ):
        self.model = model
        self.strategy = strategy
        self.epsilon = epsilon
        self.patch_width = patch_width
        self.border_width = border_width
        self.trigger = trigger
        self.target = target
        self.placement = placement
        self.iterations = iterations
        self.step_size = step_size
        self.momentum = momentum
        self.batch_size = batch_size
        self.ssa = ssa
        self.ssa_n = ssa_n
        self.ssa_sigma = ssa_sigma
        self.ssa_rho = ssa_rho
        self.weights = weights
        self.w1 = w1
        self.w2 = w2
        self.alpha = alpha
        self.random_state = random_state

    # --------------------------------------------------------------- helpers
    def _spec(self):
        return PerturbationSpec(self.strategy, self.epsilon, self.patch_width, self.border_width)

    def _pair(self):
        return TriggerTargetPair(TriggerSpec(self.trigger, self.placement), self.target)

    def _config(self):
        return AttackConfig(
            iterations=self.iterations,
            step_size=self.step_size,
            momentum=self.momentum,
            batch_size=self.batch_size,
            ssa=SsaConfig(bool(self.ssa), self.ssa_n, self.ssa_sigma, self.ssa_rho),
            weights=WeightSchedule(self.weights, self.w1, self.w2, self.alpha),
            seed=int(self.random_state),
        )

    def _check_model(self):
        if not isinstance(self.model, ToyMLLM):
            raise TypeError("model must be a trained ToyMLLM")
        return self.model

    def _check_fitted(self):
        if not hasattr(self, "perturbation_"):
            raise NotFittedError(f"{type(self).__name__} is not fitted yet; call fit first")

    # ------------------------------------------------------------------- api
    def fit(self, X, y):
        """Optimize the perturbation on images ``X`` and their questions ``y``.

        ``y`` holds questions, not answers: the attack only needs the model's
        own clean responses.
        """
        model = self._check_model()
        X, questions = check_vqa_pairs(X, y, model.config.image_size)
        samples = [VqaSample(img, q) for img, q in zip(X, questions)]
        self.perturbation_, self.attack_log_ = run_attack(model, samples, self._pair(), self._spec(), self._config())
        self.mask_ = self.perturbation_.mask
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def transform(self, X):
        """Perturbed copies of ``X``."""
        self._check_fitted()
        X = check_images(X, self._check_model().config.image_size)
        return apply(X, self.perturbation_)

    def predict(self, X, questions, triggered=True, max_len=64):
        """Greedy answers on perturbed ``X``, with the trigger inserted when ``triggered``."""
        self._check_fitted()
        X, questions = check_vqa_pairs(X, questions, self._check_model().config.image_size)
        if triggered:
            pair = self._pair()
            rng = stream(int(self.random_state), "predict-trigger-placement")
            questions = [insert_trigger(q, pair.trigger, rng) for q in questions]
        return greedy_decode_batch(self.model, apply(X, self.perturbation_), questions, max_len)

    def score(self, X, y, metric="exact_match"):
        """With-trigger attack success rate on images ``X`` and questions ``y``."""
        fn = {"exact_match": exact_match, "contain": contain}[metric]
        outs = self.predict(X, y, triggered=True)
        target = self._pair().target
        return float(np.mean([fn(o, target) for o in outs]))


__all__ = ["AnyDoorAttack", "check_images", "check_questions", "check_vqa_pairs"]

"""Perturbation masks, application and projection for the pixel, corner and
border strategies, plus the ``.anydoor`` artifact format."""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor_io import read_tensor, tensor_to_bytes

STRATEGIES = ("pixel", "corner", "border")
DEFAULT_EPSILON = 32 / 255
DEFAULT_PATCH_WIDTH = 32
DEFAULT_BORDER_WIDTH = 6


@dataclass(frozen=True)
class PerturbationSpec:
    strategy: str = "border"
    epsilon: float | None = None
    patch_width: int | None = None
    border_width: int | None = None

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        given = {
            "epsilon": self.epsilon is not None,
            "patch_width": self.patch_width is not None,
            "border_width": self.border_width is not None,
        }
        field_name = self.budget_field
        extra = [k for k, v in given.items() if v and k != field_name]
        if extra:
            raise ValueError(f"{self.strategy} strategy takes only {field_name}; got {extra}")
        if not given[field_name]:
            default = {"epsilon": DEFAULT_EPSILON, "patch_width": DEFAULT_PATCH_WIDTH,
                       "border_width": DEFAULT_BORDER_WIDTH}[field_name]
            object.__setattr__(self, field_name, default)
        if self.strategy == "pixel":
            if not 0.0 < float(self.epsilon) <= 1.0:
                raise ValueError(f"epsilon must be in (0, 1], got {self.epsilon}")
        elif int(getattr(self, field_name)) < 1:
            raise ValueError(f"{field_name} must be >= 1")

    @classmethod
    def pixel(cls, epsilon=DEFAULT_EPSILON):
        return cls("pixel", epsilon=epsilon)

    @classmethod
    def corner(cls, patch_width=DEFAULT_PATCH_WIDTH):
        return cls("corner", patch_width=patch_width)

    @classmethod
    def border(cls, border_width=DEFAULT_BORDER_WIDTH):
        return cls("border", border_width=border_width)

    @property
    def budget_field(self) -> str:
        return {"pixel": "epsilon", "corner": "patch_width", "border": "border_width"}[self.strategy]

    @property
    def budget(self):
        return getattr(self, self.budget_field)

    def validate(self, H: int, W: int) -> None:
        if self.strategy == "pixel":
            return
        half = min(H, W) // 2
        if self.budget > half:
            raise ValueError(
                f"{self.budget_field}={self.budget} exceeds half the image extent ({half}) for {H}x{W}"
            )


def build_mask(spec: PerturbationSpec, H: int, W: int) -> np.ndarray:
    """Binary (H, W) float32 mask; 1 marks perturbable pixels."""
    spec.validate(H, W)
    mask = np.zeros((H, W), dtype=np.float32)
    if spec.strategy == "pixel":
        mask[:] = 1.0
    elif spec.strategy == "corner":
        p = int(spec.patch_width)
        mask[:p, :p] = 1.0
        mask[:p, W - p :] = 1.0
        mask[H - p :, :p] = 1.0
        mask[H - p :, W - p :] = 1.0
    else:
        b = int(spec.border_width)
        mask[:b, :] = 1.0
        mask[H - b :, :] = 1.0
        mask[:, :b] = 1.0
        mask[:, W - b :] = 1.0
    return mask


def _bound(spec, dtype):
    """Amplitude bound representable in ``dtype`` and never above the true bound."""
    bound = float(spec.epsilon) if spec.strategy == "pixel" else 1.0
    if not np.issubdtype(dtype, np.floating):
        return bound
    b = np.dtype(dtype).type(bound)
    if float(b) > bound:
        b = np.nextafter(b, np.dtype(dtype).type(0))
    return b


def project(delta: np.ndarray, spec: PerturbationSpec, mask: np.ndarray | None = None) -> np.ndarray:
    """Zero ``delta`` outside the mask and clamp it to the strategy's range."""
    delta = np.asarray(delta)
    if mask is None:
        mask = build_mask(spec, delta.shape[0], delta.shape[1])
    hi = _bound(spec, delta.dtype)
    clamped = np.clip(delta, -hi, hi)
    return np.where(mask[..., None] > 0, clamped, np.zeros_like(clamped))


@dataclass
class UniversalPerturbation:
    delta: np.ndarray
    spec: PerturbationSpec
    mask: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.delta = np.asarray(self.delta, dtype=np.float32)
        if self.delta.ndim != 3 or self.delta.shape[2] != 3:
            raise ValueError(f"delta must be (H, W, 3), got {self.delta.shape}")
        H, W = self.delta.shape[:2]
        if self.mask is None:
            self.mask = build_mask(self.spec, H, W)

    @classmethod
    def zeros(cls, spec: PerturbationSpec, H: int = 64, W: int = 64):
        return cls(np.zeros((H, W, 3), dtype=np.float32), spec)

    @property
    def shape(self):
        return self.delta.shape[:2]

    def outside_l1(self) -> float:
        return float(np.abs(self.delta * (1.0 - self.mask[..., None])).sum())

    def is_feasible(self) -> bool:
        if self.outside_l1() != 0.0:
            return False
        bound = float(self.spec.epsilon) if self.spec.strategy == "pixel" else 1.0
        return float(np.abs(self.delta).max(initial=0.0)) <= bound

    def save(self, path) -> None:
        Path(path).write_bytes(to_bytes(self))

    @classmethod
    def load(cls, path) -> "UniversalPerturbation":
        return from_bytes(Path(path).read_bytes())


def apply(V, pert: UniversalPerturbation) -> np.ndarray:
    """``clip(V + delta * mask, 0, 1)``; pixels outside the mask are copied from V."""
    V = np.asarray(V)
    if V.shape[-3:] != pert.delta.shape:
        raise ValueError(f"image shape {V.shape} does not match perturbation {pert.delta.shape}")
    m = pert.mask[..., None] > 0
    moved = np.clip(V + pert.delta, 0.0, 1.0).astype(V.dtype, copy=False)
    return np.where(m, moved, V)


# ----------------------------------------------------------------------------
# artifact format: "ANYDOOR v1 <strategy> <budget> <H> <W>\n" + TCT1 tensor


def to_bytes(pert: UniversalPerturbation) -> bytes:
    H, W = pert.shape
    budget = repr(float(pert.spec.budget)) if pert.spec.strategy == "pixel" else str(int(pert.spec.budget))
    head = f"ANYDOOR v1 {pert.spec.strategy} {budget} {H} {W}\n".encode()
    return head + tensor_to_bytes(pert.delta)


def from_bytes(blob: bytes) -> UniversalPerturbation:
    nl = blob.find(b"\n")
    if nl < 0:
        raise ValueError("perturbation artifact: missing header line")
    parts = blob[:nl].decode("ascii").split()
    if len(parts) != 6 or parts[:2] != ["ANYDOOR", "v1"]:
        raise ValueError(f"perturbation artifact: bad header {blob[:nl]!r}")
    strategy, budget, H, W = parts[2], parts[3], int(parts[4]), int(parts[5])
    if strategy == "pixel":
        spec = PerturbationSpec("pixel", epsilon=float(budget))
    elif strategy == "corner":
        spec = PerturbationSpec("corner", patch_width=int(budget))
    else:
        spec = PerturbationSpec(strategy, border_width=int(budget))
    delta = read_tensor(io.BytesIO(blob[nl + 1 :]))
    if delta.shape != (H, W, 3):
        raise ValueError(f"perturbation artifact: header says {H}x{W}, payload is {delta.shape}")
    return UniversalPerturbation(delta, spec)

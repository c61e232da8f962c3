"""Trigger and target pools for random trigger/target pairing.

The shipped ``data/pools.json`` keeps the command- and code-like targets
verbatim. Natural-language entries that are violent or abusive are replaced
by innocuous sentences of the same byte length; those entries carry
``"source": "placeholder"`` and the table row they stand in for.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class TriggerTargetPool:
    triggers: tuple
    targets: tuple
    placeholders: tuple = ()

    def __post_init__(self):
        if len(self.triggers) < 1 or len(self.targets) < 1:
            raise ValueError("pool needs at least one trigger and one target")
        if any(not t for t in self.triggers + self.targets):
            raise ValueError("pool entries must be non-empty")

    def feasible(self, max_target_bytes: int) -> "TriggerTargetPool":
        """Drop targets a decode budget of ``max_target_bytes`` cannot emit."""
        keep = tuple(t for t in self.targets if len(t) <= max_target_bytes)
        return TriggerTargetPool(self.triggers, keep, self.placeholders)

    def sample_pairs(self, k: int, seed: int) -> list[tuple[bytes, bytes]]:
        """``k`` (trigger, target) pairs; triggers and targets each drawn without replacement."""
        if not 1 <= k <= min(len(self.triggers), len(self.targets)):
            raise ValueError(f"k_pairs={k} exceeds pool size ({len(self.triggers)} triggers, "
                             f"{len(self.targets)} targets)")
        rng = np.random.default_rng(seed)
        ti = rng.choice(len(self.triggers), size=k, replace=False)
        ai = rng.choice(len(self.targets), size=k, replace=False)
        return [(self.triggers[i], self.targets[j]) for i, j in zip(ti, ai)]


def _from_doc(doc) -> TriggerTargetPool:
    triggers = tuple(t.encode() for t in doc["triggers"])
    targets, placeholders = [], []
    for entry in doc["targets"]:
        if isinstance(entry, str):
            entry = {"text": entry}
        targets.append(entry["text"].encode())
        if entry.get("source") == "placeholder":
            placeholders.append(entry["text"].encode())
    return TriggerTargetPool(triggers, tuple(targets), tuple(placeholders))


def load_pool(path=None) -> TriggerTargetPool:
    """Parse a pool file; the packaged pool when ``path`` is None."""
    if path is None:
        text = resources.files("anydoor").joinpath("data/pools.json").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    return _from_doc(json.loads(text))

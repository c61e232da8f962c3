"""Attack-success and response-quality metrics, and the evaluation protocol.

Text metrics use whitespace tokens. BLEU-4 replaces zero n-gram match counts
with 1e-9 and, for candidates shorter than four tokens, averages only the
attainable orders. ROUGE-L is the LCS F-measure with beta = 1.
"""

from __future__ import annotations

import csv
import io
import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field

import numpy as np

BLEU_EPS = 1e-9
CSV_FIELDS = ("name", "n_eval", "exact_match", "contain", "bleu4", "rouge_l")


def _b(s) -> bytes:
    return s.encode() if isinstance(s, str) else bytes(s)


def exact_match(output, target) -> int:
    return int(_b(output).strip() == _b(target).strip())


def contain(output, target) -> int:
    # the target is trimmed like in exact_match, so contain >= exact_match always
    return int(_b(target).strip() in _b(output))


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu4(candidate, reference) -> float:
    cand = _b(candidate).split()
    ref = _b(reference).split()
    c, r = len(cand), len(ref)
    if c == 0:
        return 0.0
    orders = min(4, c)
    log_p = 0.0
    for n in range(1, orders + 1):
        cn, rn = _ngrams(cand, n), _ngrams(ref, n)
        matched = sum(min(k, rn[g]) for g, k in cn.items())
        total = c - n + 1
        log_p += math.log((matched if matched > 0 else BLEU_EPS) / total)
    bp = math.exp(1.0 - r / c) if c < r else 1.0
    return bp * math.exp(log_p / orders)


def lcs_length(a, b) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate, reference) -> float:
    cand = _b(candidate).split()
    ref = _b(reference).split()
    if not cand or not ref:
        return 0.0
    lcs = lcs_length(cand, ref)
    if lcs == 0:
        return 0.0
    p, r = lcs / len(cand), lcs / len(ref)
    return 2 * p * r / (p + r)


# ----------------------------------------------------------------------------
# reports


@dataclass
class WithTrigger:
    exact_match: float = 0.0
    contain: float = 0.0


@dataclass
class WithoutTrigger:
    bleu4: float = 0.0
    rouge_l: float = 0.0
    exact_match: float = 0.0
    # fraction of untriggered decodes that contain the backdoor target
    target_contain: float = 0.0


@dataclass
class EvalReport:
    with_trigger: WithTrigger = field(default_factory=WithTrigger)
    without_trigger: WithoutTrigger = field(default_factory=WithoutTrigger)
    n_eval: int = 0
    fingerprint: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, d) -> "EvalReport":
        return cls(WithTrigger(**d["with_trigger"]), WithoutTrigger(**d["without_trigger"]),
                   int(d["n_eval"]), dict(d.get("fingerprint", {})))

    @classmethod
    def from_json(cls, text) -> "EvalReport":
        return cls.from_dict(json.loads(text))

    def row(self, name="") -> dict:
        """Flat row in the with-trigger EM / Contain, without-trigger BLEU / ROUGE order."""
        return {
            "name": name,
            "n_eval": self.n_eval,
            "exact_match": self.with_trigger.exact_match,
            "contain": self.with_trigger.contain,
            "bleu4": self.without_trigger.bleu4,
            "rouge_l": self.without_trigger.rouge_l,
        }


def reports_to_csv(rows, fields=CSV_FIELDS) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(fields), lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def read_csv(text) -> list[dict]:
    out = []
    for r in csv.DictReader(io.StringIO(text)):
        row = {}
        for k, v in r.items():
            try:
                row[k] = int(v)
            except ValueError:
                try:
                    row[k] = float(v)
                except ValueError:
                    row[k] = v
        out.append(row)
    return out


# ----------------------------------------------------------------------------
# evaluation protocol


def check_disjoint(eval_set, ensemble) -> None:
    keys = {s.key() for s in ensemble}
    clash = [i for i, s in enumerate(eval_set) if s.key() in keys]
    if clash:
        raise ValueError(f"evaluation samples overlap the attack ensemble at indices {clash[:5]}")


def score_outputs(triggered_outputs, plain_outputs, references, target, fingerprint=None) -> EvalReport:
    n = len(plain_outputs)
    em = [exact_match(o, target) for o in triggered_outputs]
    ct = [contain(o, target) for o in triggered_outputs]
    bl = [bleu4(o, r) for o, r in zip(plain_outputs, references)]
    rl = [rouge_l(o, r) for o, r in zip(plain_outputs, references)]
    em_plain = [exact_match(o, r) for o, r in zip(plain_outputs, references)]
    leak = [contain(o, target) for o in plain_outputs]

    def avg(x):
        # fixed-order summation keeps reports bit-stable
        return float(math.fsum(x) / len(x)) if x else 0.0

    return EvalReport(
        WithTrigger(avg(em), avg(ct)),
        WithoutTrigger(avg(bl), avg(rl), avg(em_plain), avg(leak)),
        n,
        dict(fingerprint or {}),
    )


def decode_scenarios(model, pert, eval_set, pair, trigger_rng=None, corruption=None, corruption_rng=None,
                     max_len=64):
    """Greedy decodes with and without the trigger on perturbed eval images."""
    from .attack import insert_trigger
    from .model.mllm import greedy_decode_batch
    from .perturbation import apply

    images = np.stack([s.image for s in eval_set])
    if pert is not None:
        images = apply(images, pert)
    if corruption is not None:
        from .robustness import corrupt

        images = np.stack([corrupt(im, corruption, corruption_rng) for im in images])
    if trigger_rng is None and pair.trigger.placement == "random_word_boundary":
        trigger_rng = np.random.default_rng(0)
    triggered = [insert_trigger(s.question, pair.trigger, trigger_rng) for s in eval_set]
    plain = [s.question for s in eval_set]
    out_t = greedy_decode_batch(model, images, triggered, max_len)
    out_p = greedy_decode_batch(model, images, plain, max_len)
    return out_t, out_p


def evaluate(model, pert, eval_set, pair, refs_eval, *, ensemble=None, fingerprint=None,
             trigger_rng=None, corruption=None, corruption_rng=None) -> EvalReport:
    """Score the with-trigger and without-trigger scenarios on ``eval_set``.

    ``refs_eval`` are the clean-image greedy decodes of ``eval_set``. When
    ``ensemble`` is given it must not share any sample with ``eval_set``.
    """
    if ensemble is not None:
        check_disjoint(eval_set, ensemble)
    refs = refs_eval.answers if hasattr(refs_eval, "answers") else list(refs_eval)
    if len(refs) != len(eval_set):
        raise ValueError(f"{len(refs)} references for {len(eval_set)} eval samples")
    out_t, out_p = decode_scenarios(model, pert, eval_set, pair, trigger_rng, corruption, corruption_rng)
    return score_outputs(out_t, out_p, refs, pair.target, fingerprint)

"""End-to-end pipeline: data, training, attack, evaluation, robustness and
the sweeps and pairing suite built on top of it.

Every output file is hashed into ``manifest.json``. The manifest holds no
timestamps or host details, so identical configs give identical manifests.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attack import AttackConfig, cache_references, run_attack, stream
from .config import ExperimentConfig, from_dict
from .image_io import save_ppm
from .metrics import EvalReport, evaluate, read_csv, reports_to_csv
from .model.mllm import ToyMLLM
from .model.shapes import gen_shapes_dataset
from .model.train import exact_match_accuracy, train_toy
from .perturbation import apply, to_bytes
from .pools import TriggerTargetPool, load_pool
from .robustness import corruption_csv, eval_frames, eval_under_corruption, frames_jsonl, gen_frame_sequence

log = logging.getLogger(__name__)

STAGES = ("data", "train", "attack", "eval", "robustness", "frames", "previews")


class StageError(RuntimeError):
    def __init__(self, stage, cause):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


def sha256_bytes(blob: bytes) -> str:
    return hashlib.sha256(blob).hexdigest()


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


@dataclass
class Datasets:
    train: list
    holdout: list
    eval: list
    ensemble: list


def build_datasets(config: ExperimentConfig) -> Datasets:
    r = config.index_ranges()
    seed = config.data.seed

    def part(name):
        lo, hi = r[name]
        return gen_shapes_dataset(hi - lo, seed, start=lo)

    return Datasets(part("train"), part("holdout"), part("eval"), part("ensemble"))


def model_key(config: ExperimentConfig) -> str:
    """Hash of everything that determines the trained weights."""
    return sha256_bytes(_canonical({"data": config.data.model_dump(mode="json"),
                                    "model": config.model.model_dump(mode="json")}))[:16]


def train_model(config: ExperimentConfig, train=None) -> ToyMLLM:
    m = config.model
    if train is None:
        lo, hi = config.index_ranges()["train"]
        train = gen_shapes_dataset(hi - lo, config.data.seed, start=lo)
    model = ToyMLLM(m.model_config_obj(), seed=m.seed)
    return train_toy(model, train, epochs=m.epochs, lr=m.lr, seed=m.seed, batch_size=m.batch_size,
                     momentum=m.momentum, clip_norm=m.clip_norm, warmup_steps=m.warmup_steps,
                     optimizer=m.optimizer, augment=m.augment)


def load_or_train(config: ExperimentConfig, cache_dir=None, train=None) -> ToyMLLM:
    """Train, or reuse a checkpoint cached under ``cache_dir`` for the same data/model settings."""
    if cache_dir is None:
        return train_model(config, train)
    path = Path(cache_dir) / f"model-{model_key(config)}.ckpt"
    if path.exists() and Path(str(path) + ".manifest").exists():
        return ToyMLLM.load(path)
    model = train_model(config, train)
    path.parent.mkdir(parents=True, exist_ok=True)
    model.save(path)
    return model


class _Run:
    def __init__(self, out: Path, config: ExperimentConfig):
        self.out = out
        self.config = config
        self.files = {}
        self.stages = {s: "pending" for s in STAGES}
        self.metrics = {}

    def write(self, rel: str, blob: bytes | str):
        if isinstance(blob, str):
            blob = blob.encode()
        path = self.out / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(blob)
        self.files[rel] = sha256_bytes(blob)

    def seeds(self):
        c = self.config
        return {
            "data": c.data.seed,
            "model": c.model.seed,
            "attack": c.attack.seed,
            "attack_streams": ["batch", "ssa-noise", "ssa-mask", "weights", "trigger-placement"],
            "eval_trigger": c.attack.seed,
            "corruption": c.robustness.seed,
            "frames": c.robustness.frame_seed,
            "pool": c.pool.seed,
        }

    def manifest(self) -> dict:
        complete = all(v in ("complete", "skipped") for v in self.stages.values())
        return {
            "complete": complete,
            "config": self.config.to_dict(),
            "files": dict(sorted(self.files.items())),
            "index_ranges": {k: list(v) for k, v in self.config.index_ranges().items()},
            "metrics": self.metrics,
            "seeds": self.seeds(),
            "stages": self.stages,
        }

    def flush(self):
        (self.out / "manifest.json").write_text(json.dumps(self.manifest(), indent=2, sort_keys=True) + "\n")


def run_experiment(config: ExperimentConfig | dict, *, model: ToyMLLM | None = None, cache_dir=None,
                   out_dir=None) -> Path:
    """Run the whole pipeline and return the artifact directory.

    ``model`` skips training (the checkpoint is still written and hashed);
    ``cache_dir`` reuses a trained checkpoint across runs with equal
    data/model settings. A failing stage is recorded in the manifest and
    re-raised as StageError.
    """
    if isinstance(config, dict):
        config = from_dict(config)
    out = Path(out_dir if out_dir is not None else config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    run = _Run(out, config)
    stage = None
    try:
        stage = "data"
        data = build_datasets(config)
        run.metrics["n"] = {k: len(getattr(data, k)) for k in ("train", "holdout", "eval", "ensemble")}
        run.stages[stage] = "complete"

        stage = "train"
        if model is None:
            model = load_or_train(config, cache_dir, data.train)
        model.freeze()
        ckpt = out / "model.ckpt"
        model.save(ckpt)
        run.files["model.ckpt"] = sha256_bytes(ckpt.read_bytes())
        run.files["model.ckpt.manifest"] = sha256_bytes(Path(str(ckpt) + ".manifest").read_bytes())
        run.metrics["holdout_exact_match"] = exact_match_accuracy(model, data.holdout)
        run.stages[stage] = "complete"

        stage = "attack"
        pair = config.trigger.pair()
        spec = config.perturbation.spec()
        pert, attack_log = run_attack(model, data.ensemble, pair, spec, config.attack_config())
        run.write("pert.anydoor", to_bytes(pert))
        run.write("attack_log.csv", attack_log.to_csv())
        run.stages[stage] = "complete"

        stage = "eval"
        refs = cache_references(model, data.eval)
        fp = {"config_sha256": sha256_bytes(_canonical(config.to_dict()))}
        trig_rng = stream(config.attack.seed, "eval-trigger-placement")
        report = evaluate(model, pert, data.eval, pair, refs, ensemble=data.ensemble, fingerprint=fp,
                          trigger_rng=trig_rng)
        run.write("eval.json", report.to_json() + "\n")
        run.write("eval.csv", reports_to_csv([report.row("experiment")]))
        run.metrics["eval"] = report.to_dict()
        run.stages[stage] = "complete"

        stage = "robustness"
        if config.robustness.corruptions:
            reports = eval_under_corruption(model, pert, data.eval, pair, refs, config.robustness.specs(),
                                            ensemble=data.ensemble, seed=config.robustness.seed, fingerprint=fp)
            run.write("corruption.csv", corruption_csv(reports))
            run.stages[stage] = "complete"
        else:
            run.stages[stage] = "skipped"

        stage = "frames"
        if config.robustness.n_frames > 0:
            seq = gen_frame_sequence(config.robustness.frame_seed, config.robustness.n_frames,
                                     config.robustness.frame_speed)
            outcomes = eval_frames(model, pert, seq, pair, stream(config.attack.seed, "frame-trigger-placement"))
            run.write("frames.jsonl", frames_jsonl(outcomes))
            run.metrics["frames_exact_match"] = math.fsum(o["exact_match"] for o in outcomes) / len(outcomes)
            run.stages[stage] = "complete"
        else:
            run.stages[stage] = "skipped"

        stage = "previews"
        for i, s in enumerate(data.eval[: config.n_previews]):
            path = out / "previews" / f"eval_{i:03d}.ppm"
            path.parent.mkdir(parents=True, exist_ok=True)
            save_ppm(path, apply(s.image, pert))
            run.files[f"previews/eval_{i:03d}.ppm"] = sha256_bytes(path.read_bytes())
        run.stages[stage] = "complete"
    except Exception as e:
        run.stages[stage] = f"failed: {type(e).__name__}: {e}"
        run.flush()
        raise StageError(stage, e) from e
    run.flush()
    return out


def read_manifest(out_dir) -> dict:
    return json.loads((Path(out_dir) / "manifest.json").read_text())


def read_report(out_dir) -> EvalReport:
    return EvalReport.from_json((Path(out_dir) / "eval.json").read_text())


# ----------------------------------------------------------------------------
# sweeps


def _override(config: ExperimentConfig, **sections) -> ExperimentConfig:
    d = config.to_dict()
    for section, values in sections.items():
        if isinstance(values, dict):
            d[section] = dict(d.get(section, {}), **values)
        else:
            d[section] = values
    return from_dict(d)


ENSEMBLE_SIZES = (40, 80, 120, 160, 200)
BUDGET_GRID = {
    "border": (6, 7, 8, 9, 10),
    "corner": (32, 40, 48, 56, 64),
    "pixel": tuple(k / 255 for k in (32, 40, 48, 56, 64)),
}


def _budget_section(strategy, budget):
    key = {"pixel": "epsilon", "corner": "patch_width", "border": "border_width"}[strategy]
    return {"strategy": strategy, "epsilon": None, "patch_width": None, "border_width": None, key: budget}


def _corner_fits(p, size=64):
    return p <= size // 2


def ensemble_size_sweep(config: ExperimentConfig, sizes=ENSEMBLE_SIZES, *, model=None, cache_dir=None,
                        out_dir=None) -> str:
    """One experiment per ensemble size K; returns a CSV keyed by K."""
    out = Path(out_dir if out_dir is not None else config.output_dir)
    rows = []
    for K in sizes:
        cfg = _override(config, attack={"ensemble_size": int(K)})
        d = run_experiment(cfg, model=model, cache_dir=cache_dir, out_dir=out / f"K={K}")
        r = read_report(d).row(f"K={K}")
        rows.append(dict(r, ensemble_size=int(K)))
    text = reports_to_csv(rows, ("ensemble_size", "n_eval", "exact_match", "contain", "bleu4", "rouge_l"))
    (out / "ensemble_sweep.csv").write_text(text)
    return text


def budget_sweep(config: ExperimentConfig, grid=None, *, model=None, cache_dir=None, out_dir=None) -> str:
    """One experiment per (strategy, budget); returns CSV: strategy, budget, exact_match, bleu4.

    Corner widths beyond half the image extent do not fit a 64x64 canvas and
    are skipped.
    """
    grid = BUDGET_GRID if grid is None else grid
    out = Path(out_dir if out_dir is not None else config.output_dir)
    rows = []
    for strategy, budgets in grid.items():
        for budget in budgets:
            if strategy == "corner" and not _corner_fits(budget):
                log.warning("skipping corner p=%s: exceeds the 64x64 half-extent", budget)
                continue
            cfg = _override(config, perturbation=_budget_section(strategy, budget),
                            attack={"step_size": None})
            label = f"{strategy}={budget:.6g}"
            d = run_experiment(cfg, model=model, cache_dir=cache_dir, out_dir=out / label)
            rep = read_report(d)
            rows.append({"strategy": strategy, "budget": budget, "exact_match": rep.with_trigger.exact_match,
                         "bleu4": rep.without_trigger.bleu4})
    text = reports_to_csv(rows, ("strategy", "budget", "exact_match", "bleu4"))
    (out / "budget_sweep.csv").write_text(text)
    return text


# ----------------------------------------------------------------------------
# random trigger/target pairing


@dataclass
class SuiteReport:
    pairs: list = field(default_factory=list)
    rows: list = field(default_factory=list)

    @property
    def mean(self) -> dict:
        keys = ("exact_match", "contain", "bleu4", "rouge_l")
        return {k: math.fsum(r[k] for r in self.rows) / len(self.rows) for k in keys}

    def to_csv(self) -> str:
        rows = [dict(r) for r in self.rows] + [dict(self.mean, name="mean", trigger="", target="")]
        return reports_to_csv(rows, ("name", "trigger", "target", "exact_match", "contain", "bleu4", "rouge_l"))


def random_pairing_suite(pool: TriggerTargetPool | None, k_pairs: int, base_config: ExperimentConfig,
                         seed: int = 0, *, model=None, cache_dir=None, out_dir=None,
                         max_target_bytes: int = 60) -> SuiteReport:
    """Attack and evaluate ``k_pairs`` random (trigger, target) pairs from ``pool``."""
    pool = load_pool() if pool is None else pool
    pool = pool.feasible(max_target_bytes)
    out = Path(out_dir if out_dir is not None else base_config.output_dir)
    suite = SuiteReport()
    if model is None:
        model = load_or_train(base_config, cache_dir)
    for i, (trig, target) in enumerate(pool.sample_pairs(k_pairs, seed)):
        cfg = _override(base_config, trigger={"trigger": trig.decode(), "target": target.decode()})
        d = run_experiment(cfg, model=model, out_dir=out / f"pair_{i:02d}")
        rep = read_report(d)
        suite.pairs.append((trig, target))
        suite.rows.append(dict(rep.row(f"pair_{i:02d}"), trigger=trig.decode(), target=target.decode()))
    (out / "suite.csv").write_text(suite.to_csv())
    return suite


__all__ = [
    "STAGES", "StageError", "SuiteReport", "budget_sweep", "build_datasets", "ensemble_size_sweep",
    "load_or_train", "model_key", "random_pairing_suite", "read_csv", "read_manifest", "read_report",
    "run_experiment", "train_model",
]

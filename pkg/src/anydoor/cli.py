"""Command line entry point.

Every config key can be overridden with a dotted flag, e.g.
``--attack.iterations 200`` or ``--perturbation.b=8``. Exit codes: 0 on
success, 2 on a configuration error, 3 when a run aborts.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .attack import AttackAborted, cache_references, run_attack, stream
from .config import ConfigError, apply_overrides, from_dict
from .experiment import (
    StageError,
    budget_sweep,
    build_datasets,
    ensemble_size_sweep,
    load_or_train,
    random_pairing_suite,
    run_experiment,
)
from .metrics import evaluate, reports_to_csv
from .model.mllm import ToyMLLM
from .model.shapes import export_dataset
from .model.train import TrainingDiverged, exact_match_accuracy
from .perturbation import from_bytes, to_bytes
from .pools import load_pool
from .robustness import corruption_csv, eval_frames, eval_under_corruption, frames_jsonl, gen_frame_sequence

EXIT_OK, EXIT_CONFIG, EXIT_ABORT = 0, 2, 3
VERBS = ("gen-data", "train", "attack", "eval", "robustness", "run", "suite", "sweep")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError("", message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="anydoor", description="Trigger-gated universal image perturbations for a toy VQA model", allow_abbrev=False)
    p.add_argument("verb", choices=VERBS)
    p.add_argument("--config", help="JSON config file; defaults apply when omitted")
    p.add_argument("--dry-run", action="store_true", help="print the resolved config and exit")
    p.add_argument("--out", help="output directory (overrides output_dir)")
    p.add_argument("--cache-dir", help="reuse trained checkpoints across runs")
    p.add_argument("--model", help="existing model checkpoint (attack, eval, robustness)")
    p.add_argument("--pert", help="existing .anydoor perturbation (eval, robustness)")
    p.add_argument("--kind", choices=("ensemble", "budget"), default="ensemble", help="sweep axis")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _dotted(extra) -> list[tuple[str, str]]:
    pairs, i = [], 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or len(tok) == 2:
            raise ConfigError("", f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise ConfigError(key, "missing value")
            value = extra[i + 1]
            i += 2
        pairs.append((key, value))
    return pairs


def resolve_config(args, extra):
    data = {}
    if args.config:
        try:
            data = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except OSError as e:
            raise ConfigError("", f"cannot read config: {e}") from None
        except json.JSONDecodeError as e:
            raise ConfigError("", f"{args.config}: invalid JSON ({e})") from None
    overrides = [(k, v) for k, v in _dotted(extra)]
    if args.out:
        overrides.append(("output_dir", args.out))
    return from_dict(apply_overrides(data, overrides))


def _model(args, config, data):
    if args.model:
        return ToyMLLM.load(args.model)
    return load_or_train(config, args.cache_dir, data.train)


def _run_verb(args, config) -> int:
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    verb = args.verb
    if verb == "run":
        d = run_experiment(config, cache_dir=args.cache_dir)
        print((d / "eval.json").read_text(), end="")
        return EXIT_OK
    if verb == "suite":
        pool = load_pool(config.pool.file)
        suite = random_pairing_suite(pool, config.pool.k_pairs, config, config.pool.seed,
                                     cache_dir=args.cache_dir, out_dir=out)
        print(suite.to_csv(), end="")
        return EXIT_OK
    if verb == "sweep":
        fn = ensemble_size_sweep if args.kind == "ensemble" else budget_sweep
        print(fn(config, cache_dir=args.cache_dir, out_dir=out), end="")
        return EXIT_OK

    data = build_datasets(config)
    if verb == "gen-data":
        for name in ("train", "holdout", "eval", "ensemble"):
            export_dataset(getattr(data, name), out / "data" / name)
        print(out / "data")
        return EXIT_OK
    model = _model(args, config, data)
    if verb == "train":
        model.save(out / "model.ckpt")
        print(json.dumps({"holdout_exact_match": exact_match_accuracy(model, data.holdout)}))
        return EXIT_OK
    pair = config.trigger.pair()
    if verb == "attack":
        pert, attack_log = run_attack(model, data.ensemble, pair, config.perturbation.spec(), config.attack_config())
        (out / "pert.anydoor").write_bytes(to_bytes(pert))
        (out / "attack_log.csv").write_text(attack_log.to_csv())
        print(out / "pert.anydoor")
        return EXIT_OK
    pert_path = Path(args.pert) if args.pert else out / "pert.anydoor"
    if not pert_path.exists():
        raise ConfigError("pert", f"{pert_path} not found; run the attack verb first")
    pert = from_bytes(pert_path.read_bytes())
    refs = cache_references(model, data.eval)
    if verb == "eval":
        rep = evaluate(model, pert, data.eval, pair, refs, ensemble=data.ensemble,
                       trigger_rng=stream(config.attack.seed, "eval-trigger-placement"))
        (out / "eval.json").write_text(rep.to_json() + "\n")
        (out / "eval.csv").write_text(reports_to_csv([rep.row("experiment")]))
        print(rep.to_json())
        return EXIT_OK
    # robustness
    reports = eval_under_corruption(model, pert, data.eval, pair, refs, config.robustness.specs(),
                                    ensemble=data.ensemble, seed=config.robustness.seed)
    text = corruption_csv(reports)
    (out / "corruption.csv").write_text(text)
    if config.robustness.n_frames:
        seq = gen_frame_sequence(config.robustness.frame_seed, config.robustness.n_frames,
                                 config.robustness.frame_speed)
        outcomes = eval_frames(model, pert, seq, pair, stream(config.attack.seed, "frame-trigger-placement"))
        (out / "frames.jsonl").write_text(frames_jsonl(outcomes))
    print(text, end="")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        config = resolve_config(args, extra)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    if args.dry_run:
        print(config.to_json())
        return EXIT_OK
    try:
        return _run_verb(args, config)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (StageError, AttackAborted, TrainingDiverged) as e:
        print(f"aborted: {e}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())

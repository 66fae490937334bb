"""Command-line entry point: ``cmr <command> ...``.

Exit codes: 0 success, 1 input or configuration error, 2 a check failed.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path

from .checkpoint import Checkpoint, CheckpointError
from .config import VARIANTS, ConfigError, OptimConfig, RunConfig, desk_config
from .data import MODEL_TASK, TASK_KINDS, DataError, Dataset, GeneratorSpec, generate, label_balance, read_jsonl, spec_to_dict, write_jsonl
from .dump import dump_example
from .encoders import InputError
from .gradcheck import OP_CASES, model_grad_check, run_op_suite
from .training import ablate, accuracy, train

log = logging.getLogger("cmr")

EXIT_OK, EXIT_INPUT, EXIT_CHECK = 0, 1, 2
INPUT_ERRORS = (ConfigError, DataError, CheckpointError, InputError, OSError, json.JSONDecodeError)


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def _parse_overrides(pairs: list[str]) -> dict:
    """``key=value`` strings; values are parsed as JSON when possible."""
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def _load_run_config(path: str | None, task: str | None = None) -> RunConfig:
    # desk sizes train in minutes at 1e-3; the 1e-4 default suits larger models
    rc = RunConfig.load(path) if path else RunConfig(model=desk_config(), optim=OptimConfig(lr=1e-3))
    if task:
        rc = replace(rc, model=rc.model.for_task(MODEL_TASK.get(task, task)))
    return rc.validate()


def _load_dataset(path: str) -> Dataset:
    """A directory with ``train.jsonl`` / ``heldout.jsonl`` or a single ``.jsonl`` (used as held-out)."""
    p = Path(path)
    if p.is_dir():
        train_path, held_path = p / "train.jsonl", p / "heldout.jsonl"
        if not train_path.exists() and not held_path.exists():
            raise DataError(f"{p}: no train.jsonl or heldout.jsonl")
        train_set = read_jsonl(train_path) if train_path.exists() else []
        held = read_jsonl(held_path) if held_path.exists() else []
        spec = None
        if (p / "spec.json").exists():
            spec = GeneratorSpec(**json.loads((p / "spec.json").read_text()))
        return Dataset(train_set, held, spec)
    if not p.exists():
        raise DataError(f"{p}: no such file or directory")
    return Dataset([], read_jsonl(p))


def _check_task(rc: RunConfig, dataset: Dataset, task: str | None) -> None:
    kinds = {ex.task for ex in dataset.train + dataset.heldout}
    if task and kinds and kinds != {task}:
        raise ConfigError(f"--task {task} but the data holds {sorted(kinds)}")


# ---- commands -----------------------------------------------------------------
def cmd_gen_data(args) -> int:
    allowed = {f.name for f in fields(GeneratorSpec)}
    extra = _parse_overrides(args.set)
    unknown = sorted(set(extra) - allowed)
    if unknown:
        raise ConfigError(f"unknown generator settings {unknown}")
    spec = GeneratorSpec(task=args.task, seed=args.seed, n=args.n, **extra)
    dataset = generate(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_jsonl(out / "train.jsonl", dataset.train)
    write_jsonl(out / "heldout.jsonl", dataset.heldout)
    (out / "spec.json").write_text(json.dumps(spec_to_dict(spec), indent=2, sort_keys=True) + "\n")
    _emit({
        "task": spec.task,
        "train": {"n": len(dataset.train), "balance": label_balance(dataset.train)},
        "heldout": {"n": len(dataset.heldout), "balance": label_balance(dataset.heldout)},
        "out": str(out),
    })
    return EXIT_OK


def _write_run(result, out: Path) -> None:
    result.checkpoint.save(out)
    with open(out / "trace.jsonl", "w") as fh:
        for row in result.trace:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def cmd_train(args) -> int:
    dataset = _load_dataset(args.data)
    if not dataset.train:
        raise DataError(f"{args.data}: no training examples")
    rc = _load_run_config(args.config, args.task)
    _check_task(rc, dataset, args.task)
    init = Checkpoint.load(args.init) if args.init else "random"
    result = train(dataset, rc, init, callback=_progress(args))
    _write_run(result, Path(args.out))
    summary = result.summary()
    if result.transfer is not None:
        summary["transfer"] = {k: len(v) for k, v in vars(result.transfer).items()}
    _emit(summary)
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = Checkpoint.load(args.ckpt)
    dataset = _load_dataset(args.data)
    examples = dataset.heldout or dataset.train
    if not examples:
        raise DataError(f"{args.data}: no examples")
    kinds = {MODEL_TASK[ex.task] for ex in examples}
    if kinds != {ckpt.config.task}:
        raise ConfigError(f"checkpoint is for {ckpt.config.task!r} but the data holds {sorted(kinds)}")
    _emit({"n": len(examples), "accuracy": accuracy(ckpt.params, ckpt.config, examples)})
    return EXIT_OK


def cmd_ablate(args) -> int:
    dataset = _load_dataset(args.data)
    if not dataset.train:
        raise DataError(f"{args.data}: no training examples")
    rc = _load_run_config(args.config, args.task)
    result = ablate(args.variant, dataset, rc, callback=_progress(args))
    if args.out:
        _write_run(result, Path(args.out))
    _emit({"variant": args.variant, **result.summary()})
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.level == "ops":
        reports = run_op_suite(range(args.seeds))
        failed = [r for r in reports if not r.passed]
        worst = max(reports, key=lambda r: r.max_relative_error)
        _emit({
            "level": "ops",
            "ops": len(OP_CASES),
            "checks": len(reports),
            "failed": [r.op_name for r in failed],
            "max_relative_error": worst.max_relative_error,
            "worst": worst.op_name,
        })
        return EXIT_OK if not failed else EXIT_CHECK
    check = model_grad_check(task=args.task, seed=args.seed)
    _emit({
        "level": "model",
        "task": args.task,
        "parameters": check.n_params,
        "max_relative_error": check.report.max_relative_error,
        "worst_parameter": check.worst_parameter,
        "refined_elements": check.report.n_refined,
        "tolerance": check.report.tolerance,
        "seconds": round(check.seconds, 2),
        "passed": check.report.passed,
    })
    return EXIT_OK if check.report.passed else EXIT_CHECK


def cmd_dump_affinity(args) -> int:
    ckpt = Checkpoint.load(args.ckpt)
    dataset = _load_dataset(args.data)
    examples = dataset.train + dataset.heldout
    by_id = {ex.id: ex for ex in examples}
    if args.example in by_id:
        example = by_id[args.example]
    else:
        try:
            example = examples[int(args.example)]
        except (ValueError, IndexError):
            raise DataError(f"no example {args.example!r} (give an id or an index below {len(examples)})") from None
    if MODEL_TASK[example.task] != ckpt.config.task:
        raise ConfigError(f"checkpoint is for {ckpt.config.task!r}, example {example.id} is {example.task}")
    paths = dump_example(ckpt, example, args.out)
    _emit({"example": example.id, "files": [str(p) for p in paths]})
    return EXIT_OK


def _progress(args):
    if not getattr(args, "verbose", False):
        return None
    return lambda r: print(f"epoch {r['epoch']:3d}  loss {r['train_loss']:.4f}  train {r['train_acc']:.3f}  "
                           f"heldout {r['heldout_acc']:.3f}", file=sys.stderr, flush=True)


# ---- parser ---------------------------------------------------------------------
class _Parser(argparse.ArgumentParser):
    """Usage errors are input errors (exit 1); 2 is reserved for failed checks."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cmr", description="Cross-modality relevance models on synthetic data.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--task", choices=TASK_KINDS, default="nlvr_like")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, default=2500, help="total examples (train + held-out)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a generator setting")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", help="run configuration JSON (default: desk sizes)")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--task", choices=TASK_KINDS)
    p.add_argument("--init", help="checkpoint to start from (task head is re-initialised)")
    p.add_argument("--out", required=True, help="checkpoint output directory")
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="accuracy of a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="dataset directory (held-out split) or .jsonl file")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train an ablation variant")
    p.add_argument("--variant", required=True, choices=VARIANTS)
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--task", choices=TASK_KINDS)
    p.add_argument("--out")
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--level", required=True, choices=("ops", "model"))
    p.add_argument("--seeds", type=int, default=10, help="seeds per op (ops level)")
    p.add_argument("--seed", type=int, default=0, help="seed (model level)")
    p.add_argument("--task", choices=("nlvr", "vqa"), default="nlvr")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("dump-affinity", help="write affinity and relation-ranking CSVs for one example")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--example", required=True, help="example id or index")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dump_affinity)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except INPUT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())

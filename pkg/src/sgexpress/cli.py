"""Command-line entry point: generate, train, eval, ablate, gradcheck, inspect.

Every command reads the same JSON run config (``--config``) with
``--set key=value`` overrides, writes its resolved config next to its
outputs, and exits nonzero on failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

from . import config as cfg
from .checkpoint import CheckpointError, load_checkpoint
from .data import DatasetError, load_dataset, save_dataset, write_atomic
from .diagnostics import ALL_FRAGMENTS, FRAGMENTS, format_suite, gradcheck_config, gradcheck_suite, suite_passed
from .evaluation import (TABLE3_ROWS, TABLE4_ROWS, AblationFlags, ConstantAnswerer, EvalReport, ModelAnswerer,
                         OracleAnswerer, SeedData, build_data, evaluate_model, format_reports, reports_jsonl,
                         run_ablation_grid)
from .model import Preparer, SceneGraphVLM
from .training import STAGES, matches, run_pipeline, TRAINABLE_PATTERNS
from .vocab import Vocabulary

TASKS = ("caption", "relation", "count")
SPLITS = ("train", "val", "test")
EXIT_FAIL = 1


class CommandError(RuntimeError):
    pass


def _resolve(args) -> dict:
    return cfg.load_config(args.config, args.set or [])


def _outdir(args, sub: str) -> Path:
    out = Path(args.out) if args.out else cfg.output_root() / sub
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_config(out: Path, config: dict) -> None:
    write_atomic(out / "config.json", cfg.dumps(config).encode())


def _digest(config: dict) -> str:
    return hashlib.sha256(cfg.dumps(config).encode()).hexdigest()[:16]


def dataset_path(root: Path, split: str, task: str) -> Path:
    return Path(root) / f"{split}_{task}.sgesyn"


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_generate(args) -> int:
    """Write train/val/test sample files for every task."""
    from .data import caption_dataset, count_dataset, relation_dataset

    config = _resolve(args)
    out = _outdir(args, "data")
    scene = cfg.model_config(config).scene
    seed = config["seed"]
    d = config["data"]
    sizes = {"train": {t: d[t] for t in TASKS}, "val": {t: d[f"test_{t}"] for t in TASKS},
             "test": {t: d[f"test_{t}"] for t in TASKS}}
    builders = {"caption": caption_dataset, "relation": relation_dataset, "count": count_dataset}
    for split in SPLITS:
        for task in TASKS:
            samples = builders[task](sizes[split][task], seed, split, scene)
            save_dataset(samples, dataset_path(out, split, task))
            print(f"{dataset_path(out, split, task)}: {len(samples)} samples")
    _write_config(out, config)
    return 0


def _load_split(root: Path, split: str, tasks=TASKS) -> dict:
    out = {}
    for task in tasks:
        path = dataset_path(root, split, task)
        if not path.exists():
            raise CommandError(f"missing dataset {path} (run `generate` first)")
        out[task] = load_dataset(path)
    return out


def _flags(config) -> AblationFlags:
    return AblationFlags(**config["flags"])


def cmd_train(args) -> int:
    config = _resolve(args)
    out = _outdir(args, "train")
    flags = _flags(config)
    model = SceneGraphVLM(cfg.model_config(config, flags=flags.to_dict()))
    provenance, state = [], None
    if args.resume:
        ckpt = load_checkpoint(args.resume)
        ckpt.apply_to(model)
        provenance, state = list(ckpt.provenance), ckpt.optimizer_state()
    stages = tuple(int(s) for s in args.stages.split(",")) if args.stages else STAGES
    if any(s not in STAGES for s in stages):
        raise CommandError(f"--stages must list stage ids from {STAGES}")
    data = _load_split(Path(args.data), "train")
    plans = cfg.stage_plans(config, sge_d=flags.sge_d)
    result = run_pipeline(model, plans, data, separate_stage2=flags.sge_t, preparer=Preparer(model.config),
                          stages=stages, provenance=provenance, optimizer_state=state)
    from .checkpoint import save_checkpoint

    lines = []
    for trace, ckpt in zip(result.traces, result.checkpoints):
        ckpt.meta["run_config"] = config
        save_checkpoint(ckpt, out / f"stage{trace.stage_id}.ckpt")
        lines.append(json.dumps(trace.to_dict(), sort_keys=True))
        final = f"{trace.losses[-1]:.4f}" if len(trace) else "n/a"
        print(f"stage {trace.stage_id}: {len(trace)} steps, final loss {final}, "
              f"provenance {ckpt.provenance} -> {out / f'stage{trace.stage_id}.ckpt'}")
    write_atomic(out / "trace.jsonl", "".join(l + "\n" for l in lines).encode())
    _write_config(out, config)
    print(f"model checksum {model.checksum()}")
    return 0


def cmd_eval(args) -> int:
    config = _resolve(args)
    out = _outdir(args, "eval")
    flags = _flags(config)
    data = SeedData({}, _load_split(Path(args.data), args.split))
    vocab = Vocabulary(config["scene"]["category_count"])
    if args.mode == "model":
        if not args.checkpoint:
            raise CommandError("--checkpoint is required in model mode")
        model = SceneGraphVLM(cfg.model_config(config, flags=flags.to_dict()))
        ckpt = load_checkpoint(args.checkpoint)
        ckpt.apply_to(model)
        source, label = ModelAnswerer(model), f"ckpt:{'+'.join(map(str, ckpt.provenance)) or 'init'}"
        n_params = model.n_parameters()
    elif args.mode == "oracle":
        source, label, n_params = OracleAnswerer(vocab), "oracle", 0
    else:
        source, label, n_params = ConstantAnswerer(vocab.id(args.constant)), f"constant:{args.constant}", 0
    metrics = evaluate_model(source, data)
    report = EvalReport(label, flags, [config["seed"]], {m: [v] for m, v in metrics.items()}, n_params)
    _emit_reports(out, [report], config)
    return 0


def _emit_reports(out: Path, reports, config) -> None:
    text = f"# config {_digest(config)}\n" + format_reports(reports)
    write_atomic(out / "report.txt", text.encode())
    write_atomic(out / "report.jsonl", reports_jsonl(reports).encode())
    _write_config(out, config)
    sys.stdout.write(text)


def cmd_ablate(args) -> int:
    config = _resolve(args)
    out = _outdir(args, "ablate")
    rows = {"3": TABLE3_ROWS, "4": TABLE4_ROWS, "all": TABLE3_ROWS + TABLE4_ROWS}[args.table]
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
    progress = (lambda msg: print(msg, file=sys.stderr, flush=True)) if args.verbose else None
    reports = run_ablation_grid(rows, config, seeds=seeds, progress=progress)
    _emit_reports(out, reports, config)
    return 0


def cmd_gradcheck(args) -> int:
    config = gradcheck_config(args.set or []) if args.config is None else _resolve(args)
    model = SceneGraphVLM(cfg.model_config(config))
    if args.stage == "all":
        live, inputs = (lambda n: True), True
    elif args.stage == "none":
        live, inputs = (lambda n: False), False
    else:
        patterns = TRAINABLE_PATTERNS[int(args.stage)]
        live, inputs = (lambda n: matches(n, patterns)), False
    fragments = tuple(args.fragments.split(",")) if args.fragments else FRAGMENTS
    if args.fault and args.fault not in fragments:
        fragments += (args.fault,)
    reports = gradcheck_suite(model, seed=config["seed"], h=args.h, tol=args.tol, live=live,
                              include_inputs=inputs, fault=args.fault, fragments=fragments)
    reports = [(n, r) for n, r in reports if r.n_checked]
    sys.stdout.write(format_suite(reports))
    for name, r in reports:
        for tensor, idx, a, f, rel in r.failures[:5]:
            print(f"  {name}: {tensor}[{idx}] analytic={a:.6e} numeric={f:.6e} rel={rel:.2e}")
    return 0 if suite_passed(reports) else EXIT_FAIL


def cmd_inspect(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    n = sum(int(v.size) for v in ckpt.params.values())
    print(f"format version  {ckpt.version}")
    print(f"provenance      {ckpt.provenance}")
    print(f"tensors         {len(ckpt.topology)} ({n} scalars)")
    print(f"optimizer state {len(ckpt.optimizer)} tensors")
    print(f"checksum        {ckpt.model_checksum()}")
    plan = ckpt.meta.get("plan")
    if plan:
        print(f"last stage      {plan['stage_id']} lr={plan['learning_rate']} steps={plan['steps']} "
              f"datasets={','.join(plan['datasets'])}")
    if args.verbose:
        for name, shape in ckpt.topology:
            print(f"  {name:<40} {list(shape)}")
        print(json.dumps(ckpt.config, sort_keys=True, indent=2))
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sgexpress", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out=True):
        p.add_argument("--config", help="JSON run config")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config value (repeatable)")
        if out:
            p.add_argument("--out", help=f"output directory (default ${cfg.OUTPUT_ROOT_ENV}/<command>)")

    p = sub.add_parser("generate", help="write train/val/test sample files")
    common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="run the staged training pipeline")
    common(p)
    p.add_argument("--data", required=True, help="directory written by `generate`")
    p.add_argument("--stages", help="comma-separated stage ids to run (default 1,2,3)")
    p.add_argument("--resume", help="checkpoint to start from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint (or the oracle/constant answer sources)")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=SPLITS)
    p.add_argument("--checkpoint")
    p.add_argument("--mode", default="model", choices=("model", "oracle", "constant"))
    p.add_argument("--constant", default="none", help="answer token for --mode constant")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and evaluate the ablation grids")
    common(p)
    p.add_argument("--table", default="all", choices=("3", "4", "all"))
    p.add_argument("--seeds", help="comma-separated seeds (default from config)")
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every module boundary")
    common(p, out=False)
    p.add_argument("--stage", default="all", choices=("all", "1", "2", "3", "none"),
                   help="check only parameters trainable in this stage")
    p.add_argument("--fragments", help=f"comma-separated subset of {','.join(ALL_FRAGMENTS)}")
    p.add_argument("--fault", choices=ALL_FRAGMENTS, help="corrupt one analytic gradient in this fragment")
    p.add_argument("--h", type=float, default=1e-6)
    p.add_argument("--tol", type=float, default=1e-5)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("inspect", help="print checkpoint metadata")
    p.add_argument("checkpoint")
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CommandError, cfg.ConfigError, CheckpointError, DatasetError, ValueError, KeyError, OSError) as exc:
        print(f"sgexpress {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())

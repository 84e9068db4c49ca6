"""Command line entry point: ``mhrnnt <command> [options]``.

Exit codes: 0 success, 2 invalid input or configuration, 3 training
diverged, 4 file or format error, 5 gradient check failed.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import yaml

from .checkpoint import read_checkpoint, save_checkpoint
from .datagen import load_dataset
from .decode import read_hypotheses, write_hypotheses
from .exceptions import DivergenceError, MHRNNTError, ValidationError
from .experiments import (
    PipelineConfig,
    base_training_set,
    build_datasets,
    decode_dataset,
    load_record,
    read_references,
    run_finetune,
    run_report,
    run_selftrain,
    save_datasets,
    train_base,
    write_manifest,
)
from .gradcheck import run_gradcheck
from .scoring import score_set, write_report

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_DIVERGENCE = 3
EXIT_IO = 4
EXIT_GRADCHECK = 5

log = logging.getLogger("mhrnnt")


def load_config(path: Optional[str]) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    try:
        data = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ValidationError(f"{path}: not valid YAML ({exc})") from None
    if data is not None and not isinstance(data, dict):
        raise ValidationError(f"{path}: top level must be a mapping")
    return PipelineConfig.from_dict(data or {})


def resolve_config(args) -> PipelineConfig:
    cfg = load_config(args.config)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.mode is not None:
        overrides["mode"] = args.mode
    if args.iterations is not None:
        overrides["iterations"] = args.iterations
    if args.beam is not None:
        overrides["beam"] = args.beam
    return cfg.replace(**overrides) if overrides else cfg


def _out(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _modes(args, cfg) -> List[str]:
    return ["sh", "mh"] if args.compare else [cfg.mode]


def cmd_gen_data(args, cfg):
    out = _out(args)
    paths = save_datasets(cfg, out)
    write_manifest(out, "gen-data", cfg, {"datasets": sorted(paths)})
    for name, p in sorted(paths.items()):
        print(f"{name}\t{p}")


def cmd_train_base(args, cfg):
    out = _out(args)
    data = build_datasets(cfg)
    names = args.base or [b.name for b in cfg.bases]
    index = {b.name: i for i, b in enumerate(cfg.bases)}
    unknown = [n for n in names if n not in index]
    if unknown:
        raise ValidationError(f"unknown base model(s) {unknown}; config has {sorted(index)}")
    for name in names:
        i = index[name]
        ckpt = train_base(cfg, base_training_set(cfg, i, data["train"]), data["dev"], i)
        path = save_checkpoint(ckpt.model, out / "checkpoints" / f"{name}.ckpt", ckpt.metadata)
        print(f"{name}\tbest_epoch={ckpt.metadata['best_epoch']}\t{path}")
    write_manifest(out, "train-base", cfg)


def cmd_decode(args, cfg):
    out = _out(args)
    dataset = load_dataset(args.data)
    ds_name = Path(args.data).name
    for path in args.checkpoint:
        ckpt = read_checkpoint(path)
        name = ckpt.metadata.get("name") or Path(path).stem
        hyps = decode_dataset(ckpt.model, dataset, cfg.beam, name)
        dest = write_hypotheses(out / "hyps" / ds_name / f"{name}.tsv", hyps)
        print(f"{name}\t{dest}")
    write_manifest(out, "decode", cfg, {"dataset": str(args.data), "checkpoints": list(args.checkpoint)})


def _load_bases(run_dir):
    if run_dir is None:
        return None
    ckpts = {}
    for p in sorted(Path(run_dir, "checkpoints").glob("*.ckpt")):
        ckpt = read_checkpoint(p)
        ckpts[ckpt.metadata.get("name") or p.stem] = ckpt
    if not ckpts:
        raise ValidationError(f"no checkpoints under {run_dir}/checkpoints")
    return ckpts


def _print_report(record):
    sys.stdout.write(run_report(record).render())


def cmd_finetune(args, cfg):
    record = run_finetune(cfg, _modes(args, cfg), bases=_load_bases(args.bases_from), run_dir=_out(args))
    _print_report(record)


def cmd_selftrain(args, cfg):
    record = run_selftrain(cfg, _modes(args, cfg), supervised=not args.no_supervised,
                           bases=_load_bases(args.bases_from), run_dir=_out(args))
    _print_report(record)


def cmd_score(args, cfg):
    out = _out(args)
    ref_path = Path(args.ref)
    refs = load_dataset(ref_path).label_map() if ref_path.is_dir() else read_references(ref_path)
    hyps = read_hypotheses(args.hyp)
    report = score_set(refs, hyps, condition=args.condition or "", model_id=Path(args.hyp).stem)
    dest = write_report(report, out / "reports" / f"{Path(args.hyp).stem}.tsv")
    write_manifest(out, "score", None, {"ref": str(args.ref), "hyp": str(args.hyp)})
    s, i, d, n = report.totals()
    print(f"WER\t{report.wer:.2f}\tsub={s}\tins={i}\tdel={d}\tref_tokens={n}\t{dest}")


def cmd_gradcheck(args, cfg):
    out = _out(args)
    results = run_gradcheck(args.cases, cfg.seed)
    worst = max(r.max_rel_error for r in results)
    payload = {"cases": [r.__dict__ for r in results], "max_rel_error": worst, "tolerance": args.tol}
    (out / "gradcheck.json").write_text(json.dumps(payload, indent=2) + "\n")
    write_manifest(out, "gradcheck", cfg)
    print(f"cases={len(results)}\tmax_rel_error={worst:.3e}\ttolerance={args.tol:g}")
    if worst >= args.tol:
        return EXIT_GRADCHECK
    return EXIT_OK


def cmd_report(args, cfg):
    run_dir = Path(args.run_dir or args.out_dir)
    bundle = run_report(load_record(run_dir))
    text = bundle.render()
    (run_dir / "summary.tsv").write_text(text)
    sys.stdout.write(text)


COMMANDS = {
    "gen-data": (cmd_gen_data, "generate and save every dataset the config describes"),
    "train-base": (cmd_train_base, "train base models on labeled data"),
    "decode": (cmd_decode, "decode a saved dataset with saved checkpoints"),
    "finetune": (cmd_finetune, "unsupervised fine-tuning on pseudo-labeled test audio"),
    "selftrain": (cmd_selftrain, "self-training on pooled labeled and pseudo-labeled data"),
    "score": (cmd_score, "score a hypothesis file against references"),
    "gradcheck": (cmd_gradcheck, "finite-difference check of parameter gradients"),
    "report": (cmd_report, "render the results table of a run directory"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML pipeline config")
    common.add_argument("--seed", type=int)
    common.add_argument("--out-dir", default="runs/latest")
    common.add_argument("--mode", choices=["sh", "mh"])
    common.add_argument("--iterations", type=int, choices=[1, 2])
    common.add_argument("--beam", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="mhrnnt", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    parsers = {name: sub.add_parser(name, parents=[common], help=help_) for name, (_, help_) in COMMANDS.items()}
    parsers["train-base"].add_argument("--base", action="append", help="base model name (repeatable)")
    parsers["decode"].add_argument("--data", required=True, help="dataset directory")
    parsers["decode"].add_argument("--checkpoint", action="append", required=True)
    for name in ("finetune", "selftrain"):
        parsers[name].add_argument("--compare", action="store_true", help="run both SH and MH")
        parsers[name].add_argument("--bases-from", help="run directory holding base checkpoints")
    parsers["selftrain"].add_argument("--no-supervised", action="store_true", help="skip the upper-bound run")
    parsers["score"].add_argument("--ref", required=True, help="dataset directory or reference TSV")
    parsers["score"].add_argument("--hyp", required=True, help="hypothesis TSV")
    parsers["score"].add_argument("--condition")
    parsers["gradcheck"].add_argument("--cases", type=int, default=20)
    parsers["gradcheck"].add_argument("--tol", type=float, default=1e-3)
    parsers["report"].add_argument("--run-dir", help="defaults to --out-dir")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handler = COMMANDS[args.command][0]
    try:
        cfg = resolve_config(args)
        code = handler(args, cfg)
    except DivergenceError as exc:
        print(f"error: training diverged: {exc} {exc.payload}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (MHRNNTError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK if code is None else code


if __name__ == "__main__":
    sys.exit(main())

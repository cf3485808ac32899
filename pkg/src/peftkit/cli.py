"""``peftkit`` command line.

Subcommands: init, pretrain, quantize, finetune, merge, eval, report,
synth and rerun. Each command that writes output also writes a run manifest
recording argv, resolved config, seed and input digests.

Exit codes: 0 success, 2 usage/config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .checkpoint import (
    MANIFEST,
    RUN_MANIFEST,
    RunManifest,
    file_digest,
    load_adapters,
    load_model,
    model_checksum,
    now_iso,
    save_adapters,
    save_model,
)
from .errors import ConfigError, DataError, PeftkitError, UsageError
from .evalkit import KINDS, EvalConfig, MetricReport, ModelRunner, evaluate_pair, render_table
from .finetune import TrainConfig, finetune, load_instruction_dataset, pretrain
from .model import TransformerConfig, TransformerModel
from .peft import merge
from .quantize import DEFAULT_BLOCK_SIZE, model_size_bytes, quantized_size_bytes
from .tasks import add_examples, copy_examples, to_alpaca_records, upper_examples

log = logging.getLogger("peftkit")
SEED_ENV = "PEFTKIT_SEED"


def resolve_seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get(SEED_ENV)
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise ConfigError(f"{SEED_ENV}={env!r} is not an integer") from None


def _write_run(args, out_path: Path, config: dict, inputs: list, started: str) -> None:
    argv = ["--seed", str(args.seed_resolved)] + [a for a in args.argv if a != "--force"]
    rm = RunManifest(
        command=args.command,
        argv=argv,
        config=config,
        seed=args.seed_resolved,
        inputs={str(p): file_digest(p) for p in inputs},
        cwd=os.getcwd(),
        code_version=__version__,
        started=started,
        finished=now_iso(),
    )
    target = out_path / RUN_MANIFEST if out_path.is_dir() else out_path.with_name(out_path.stem + ".run_manifest.json")
    rm.write(target)


# -- commands ---------------------------------------------------------------


def cmd_init(args) -> int:
    started = now_iso()
    cfg = TransformerConfig(args.vocab_size, args.d_model, args.n_heads, args.n_layers, args.d_ff,
                            args.max_seq_len, args.ffn_variant)
    model = TransformerModel.init(cfg, args.seed_resolved)
    out = save_model(model, args.out, force=args.force)
    print(f"wrote {out} ({model.parameter_count()} parameters, {len(model.params)} tensors)")
    _write_run(args, out, cfg.to_dict(), [], started)
    return 0


def cmd_pretrain(args) -> int:
    started = now_iso()
    model = load_model(args.base)
    data = load_instruction_dataset(args.dataset)
    report = pretrain(model, data, args.lr, args.batch_size, args.epochs, args.seed_resolved)
    out = save_model(model, args.out, force=args.force)
    (out / "pretrain_report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    print(f"pretrained {len(data)} examples x {args.epochs} epochs; losses {[round(x, 4) for x in report.epoch_losses]}")
    config = {"lr": args.lr, "batch_size": args.batch_size, "epochs": args.epochs}
    _write_run(args, out, config, [args.base, args.dataset], started)
    return 0 if not report.aborted else 4


def cmd_quantize(args) -> int:
    started = now_iso()
    if args.bits != 4:
        raise UsageError(f"--bits {args.bits} is unsupported; only 4-bit quantization is implemented")
    model = load_model(args.input)
    if model.is_quantized:
        raise UsageError(f"{args.input} is already quantized")
    qmodel = model.quantized(args.block)
    names = model.matrix_names()
    n_weights = sum(model.params[n].size for n in names)
    before = model_size_bytes(32, n_weights)
    after = sum(quantized_size_bytes(model.params[n].size, args.block) for n in names)
    payload = model_size_bytes(4, n_weights)
    others = sum(p.size for k, p in model.params.items() if k not in names)
    out = save_model(qmodel, args.out, force=args.force)
    print(f"quantized {len(names)} matrices ({n_weights} weights), block size {args.block}")
    print(f"  weights  f32: {before} B = 32 bits x {n_weights}")
    print(f"  weights   q4: {payload} B = 4 bits x {n_weights} (+ {after - payload} B scales = {after} B)")
    print(f"  ratio        : {before / payload:.2f}x payload, {before / after:.2f}x with scales")
    print(f"  kept f32     : {others} weights ({model_size_bytes(32, others)} B)")
    config = {"bits": args.bits, "block_size": args.block, "weights_f32_bytes": before, "weights_q4_bytes": after}
    _write_run(args, out, config, [args.input], started)
    return 0


def cmd_finetune(args) -> int:
    started = now_iso()
    model = load_model(args.base)
    data = load_instruction_dataset(args.dataset)
    cfg = TrainConfig(
        method=args.method,
        rank=args.rank,
        learning_rate=args.lr,
        batch_size=args.batch_size,
        epochs=args.epochs,
        max_seq_len=args.max_seq_len or model.config.max_seq_len,
        seed=args.seed_resolved,
        base_mode="quantized4" if model.is_quantized else "float32",
        lora_scale=args.scale,
        sites=tuple(s.strip() for s in args.sites.split(",") if s.strip()),
    )
    peft, report = finetune(model, cfg, data)
    out = save_adapters(peft, args.out, base_checksum=model_checksum(model), force=args.force)
    report_path = Path(args.report) if args.report else out / "finetune_report.json"
    report_path.write_text(report.to_json() + "\n", encoding="utf-8")
    print(f"trained {report.trainable_params} of {report.total_params} parameters "
          f"({100 * report.trainable_params / report.total_params:.2f}%) on {len(data)} examples")
    if report.epoch_losses:
        print(f"epoch losses: {[round(x, 4) for x in report.epoch_losses]}")
    print(f"base checksum {report.base_checksum_before} (unchanged)")
    _write_run(args, out, cfg.to_dict(), [args.base, args.dataset], started)
    if report.aborted:
        print(f"aborted: {report.abort_reason}", file=sys.stderr)
        return 4
    return 0


def cmd_merge(args) -> int:
    started = now_iso()
    model = load_model(args.base)
    peft, manifest = load_adapters(args.adapters)
    if peft.method != "lora":
        raise UsageError(f"{args.adapters} holds {peft.method} parameters; only LoRA adapters can be merged")
    missing = sorted(set(peft.adapters) - set(model.params))
    if missing:
        raise ConfigError(f"adapter site ids not present in the base model: {missing}")
    if manifest.get("base_checksum") and manifest["base_checksum"] != model_checksum(model):
        log.warning("adapters were trained against a different base checkpoint")
    merged = merge(model, peft)
    out = save_model(merged, args.out, force=args.force)
    print(f"merged {len(peft.adapters)} LoRA updates; {merged.parameter_count()} parameters, {len(merged.params)} tensors")
    _write_run(args, out, {}, [args.base, args.adapters], started)
    return 0


def _is_checkpoint(path: Path) -> bool:
    return path.is_dir() and (path / MANIFEST).exists()


def _predictor(spec: str | None, base_model, max_new_tokens: int):
    if spec is None:
        return None, None
    path = Path(spec)
    if not _is_checkpoint(path):
        if not path.exists():
            raise DataError(f"{spec}: no such checkpoint or prediction file")
        return str(path), None
    kind = json.loads((path / MANIFEST).read_text(encoding="utf-8")).get("kind")
    if kind == "model":
        model = load_model(path)
        return ModelRunner(model, max_new_tokens=max_new_tokens), model
    if base_model is None:
        raise UsageError(f"{spec} is an adapter checkpoint; the base argument must be a model checkpoint")
    peft, _ = load_adapters(path)
    peft.check_against(base_model)
    return ModelRunner(base_model, peft, max_new_tokens=max_new_tokens), None


def cmd_eval(args) -> int:
    started = now_iso()
    cfg = EvalConfig(args.epsilon, args.z, args.interval)
    base, base_model = _predictor(args.base, None, args.max_new_tokens)
    ft, _ = _predictor(args.ft, base_model, args.max_new_tokens)
    override = None
    if (args.ci_base is None) != (args.ci_ft is None):
        raise UsageError("--ci-base and --ci-ft must be given together")
    if args.ci_base is not None:
        override = (args.ci_base, args.ci_ft)
    report = evaluate_pair(base, ft, args.task, args.kind, cfg, override)
    print(render_table(report))
    if args.out:
        out = Path(args.out)
        out.write_text(report.to_json() + "\n", encoding="utf-8")
        inputs = [p for p in (args.base, args.ft, args.task) if p]
        _write_run(args, out, {"kind": args.kind, "epsilon": cfg.epsilon, "z": cfg.z, "interval": cfg.interval}, inputs, started)
    return 0


def cmd_report(args) -> int:
    for path in args.reports:
        try:
            rep = MetricReport.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
        except (json.JSONDecodeError, TypeError) as e:
            raise DataError(f"{path}: not a metric report ({e})") from None
        print(render_table(rep, title=f"{path}: kind {rep.kind}, n={rep.n}"))
        print()
    return 0


def cmd_synth(args) -> int:
    started = now_iso()
    if args.task == "upper":
        examples = upper_examples(args.n, args.seed_resolved, args.length)
    elif args.task == "copy":
        examples = copy_examples(args.n, args.seed_resolved, args.length)
    else:
        examples = add_examples(args.n, args.seed_resolved)
    out = Path(args.out)
    if out.exists() and not args.force:
        raise UsageError(f"{out} already exists (use --force to overwrite)")
    out.write_text(json.dumps(to_alpaca_records(examples), indent=1) + "\n", encoding="utf-8")
    print(f"wrote {len(examples)} {args.task} examples to {out}")
    _write_run(args, out, {"task": args.task, "n": args.n}, [], started)
    return 0


def cmd_rerun(args) -> int:
    """Replay a recorded command from the directory it originally ran in."""
    rm = RunManifest.read(args.manifest)
    print(f"re-running: peftkit {' '.join(rm.argv)}")
    here = os.getcwd()
    if rm.cwd:
        os.chdir(rm.cwd)
    try:
        return main(rm.argv + ["--force"])
    finally:
        os.chdir(here)


# -- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="peftkit", description="Parameter-efficient fine-tuning on a desk-scale transformer.")
    p.add_argument("--seed", type=int, default=None, help=f"global seed (overrides ${SEED_ENV}; default 0)")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--version", action="version", version=f"peftkit {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("init", help="write a seeded random model checkpoint")
    s.add_argument("out")
    d = TransformerConfig()
    s.add_argument("--vocab-size", type=int, default=d.vocab_size)
    s.add_argument("--d-model", type=int, default=d.d_model)
    s.add_argument("--n-heads", type=int, default=d.n_heads)
    s.add_argument("--n-layers", type=int, default=d.n_layers)
    s.add_argument("--d-ff", type=int, default=d.d_ff)
    s.add_argument("--max-seq-len", type=int, default=d.max_seq_len)
    s.add_argument("--ffn-variant", choices=("paper", "standard"), default=d.ffn_variant)
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_init)

    s = sub.add_parser("pretrain", help="full-parameter training of a float checkpoint")
    s.add_argument("base")
    s.add_argument("dataset")
    s.add_argument("out")
    s.add_argument("--epochs", type=int, default=1)
    s.add_argument("--lr", type=float, default=3e-3)
    s.add_argument("--batch-size", type=int, default=32)
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("quantize", help="store 2-D weight matrices as block-wise 4-bit")
    s.add_argument("input")
    s.add_argument("out")
    s.add_argument("--bits", type=int, default=4)
    s.add_argument("--block", type=int, default=DEFAULT_BLOCK_SIZE)
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_quantize)

    s = sub.add_parser("finetune", help="train adapters against a frozen base (LoRA on a q4 base = QLoRA)")
    s.add_argument("base")
    s.add_argument("dataset")
    s.add_argument("out")
    s.add_argument("--method", choices=("lora", "adapter", "prefix"), default="lora")
    s.add_argument("--rank", type=int, default=8, help="LoRA rank, adapter bottleneck or prefix length")
    s.add_argument("--epochs", type=int, default=1)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--batch-size", type=int, default=16)
    s.add_argument("--max-seq-len", type=int, default=None)
    s.add_argument("--scale", type=float, default=1.0, help="multiplier on the LoRA update")
    s.add_argument("--sites", default="q,k,v", help="comma-separated LoRA sites from q,k,v,o,w1,w2")
    s.add_argument("--report", default=None, help="where to write the JSON report")
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_finetune)

    s = sub.add_parser("merge", help="fold LoRA adapters into the base weights")
    s.add_argument("base")
    s.add_argument("adapters")
    s.add_argument("out")
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_merge)

    s = sub.add_parser("eval", help="compare base and fine-tuned predictions on one task file")
    s.add_argument("base", nargs="?", default=None, help="model checkpoint or prediction file (default: task file predictions)")
    s.add_argument("ft", nargs="?", default=None, help="model/adapter checkpoint or prediction file")
    s.add_argument("--task", required=True)
    s.add_argument("--kind", choices=KINDS, required=True)
    s.add_argument("--out", default=None, help="write the MetricReport JSON here")
    s.add_argument("--epsilon", type=float, default=0.01)
    s.add_argument("--z", type=float, default=1.96)
    s.add_argument("--interval", choices=("wald", "stderr"), default="wald")
    s.add_argument("--ci-base", type=float, default=None, help="externally supplied interval for the knowledge-loss width")
    s.add_argument("--ci-ft", type=float, default=None)
    s.add_argument("--max-new-tokens", type=int, default=32)
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("report", help="render saved MetricReport JSON files as tables")
    s.add_argument("reports", nargs="+")
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("synth", help="write a synthetic Alpaca-format dataset")
    s.add_argument("task", choices=("upper", "copy", "add"))
    s.add_argument("out")
    s.add_argument("--n", type=int, default=2000)
    s.add_argument("--length", type=int, default=4)
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("rerun", help="repeat a command from its run manifest")
    s.add_argument("manifest")
    s.set_defaults(func=cmd_rerun)
    return p


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        args.seed_resolved = resolve_seed(args)
        # argv after the global options, i.e. from the subcommand name on
        args.argv = argv[argv.index(args.command):]
        return args.func(args)
    except PeftkitError as e:
        print(f"peftkit {args.command}: error: {e}", file=sys.stderr)
        return e.exit_code
    except (FileNotFoundError, IsADirectoryError, NotADirectoryError) as e:
        print(f"peftkit {args.command}: error: {e}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())

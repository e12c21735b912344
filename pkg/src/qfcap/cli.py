"""Command-line entry point: ``qfcap <command> [flags]``.

Exit status is 0 on success, 1 on a usage error and 2 when the command
itself fails. Results go to the paths given by flags (captions to stdout);
diagnostics go to stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import traceback
from pathlib import Path

from .config import Config, resolve_config

log = logging.getLogger("qfcap")

COMMANDS = ("gen-data", "train", "caption", "summarize", "eval-caption", "eval-retrieval", "scst",
            "ablate", "gradcheck")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def effective_config(args) -> Config:
    """Config file (or $QFCAP_CONFIG, or defaults) with ``--set`` and ``--seed`` applied on top."""
    cfg = resolve_config(getattr(args, "config", None))
    over = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        over[k.strip()] = _parse_value(v.strip())
    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
    return cfg.with_overrides(over) if over else cfg


def _echo_config(cfg: Config, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(out_dir / "config.json")


def _require(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def _load_eval_items(path, split: str):
    from .data import load_items
    p = _require(path, "data")
    if p.is_dir():
        p = _require(p / f"{split}.jsonl", f"{split} split")
    return load_items(p)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    from .data import generate_dataset
    ratios = tuple(args.ratios) if args.ratios else (0.8, 0.1, 0.1)
    paths = generate_dataset(args.seed, args.n, args.out, ratios, expand=args.expand)
    for split, p in paths.items():
        print(f"{split}\t{p}")
    return 0


def cmd_train(args) -> int:
    from .checkpoint import load_checkpoint, save_checkpoint
    from .train import Splits, StageSpec, build_model, run_stage, write_log
    cfg = effective_config(args)
    splits = Splits.load(_require(args.data, "data directory"))
    stages = (1, 2, 3) if args.stage == "all" else (int(args.stage),)
    if stages[0] == 1 and args.init is None:
        model = build_model(cfg)
    else:
        if args.init is None:
            raise UsageError(f"stage {stages[0]} needs --init <checkpoint of the previous stage>")
        model, _ = load_checkpoint(_require(args.init, "init checkpoint"), cfg)
    out = Path(args.out)
    ckpt_path = out if out.suffix == ".ckpt" else out / f"stage{stages[-1]}.ckpt"
    _echo_config(cfg, ckpt_path.parent)
    data = {1: splits.pretrain, 2: splits.pretrain, 3: splits.finetune}

    def progress(rec):
        if args.log_every and rec["step"] % args.log_every == 0:
            print(json.dumps(rec, sort_keys=True), file=sys.stderr)

    for k in stages:
        spec = StageSpec.from_config(cfg.stage(k), data[k], cfg.loss)
        res = run_stage(spec, model, cfg.seed, progress)
        path = ckpt_path if k == stages[-1] else ckpt_path.parent / f"stage{k}.ckpt"
        save_checkpoint(path, model, cfg, stage=k, step=len(res.log), optimizer=res.optimizer)
        write_log(path.with_suffix(".log.jsonl"), res.log)
        print(f"stage {k}: {spec.steps} steps, final L_total {res.final_loss:.4f} -> {path}", file=sys.stderr)
    return 0


def _generate(args, max_len_key: str) -> int:
    from .checkpoint import load_checkpoint
    from .data import NONE_ASR, load_items
    model, ckpt = load_checkpoint(_require(args.ckpt, "checkpoint"))
    items = load_items(_require(args.input, "input"))
    max_len = args.max_len or getattr(ckpt.config, max_len_key)
    for line in model.caption(items, max_len, NONE_ASR if args.no_asr else None):
        print(line)
    return 0


def cmd_caption(args) -> int:
    return _generate(args, "caption_max_len")


def cmd_summarize(args) -> int:
    return _generate(args, "summary_max_len")


def _write_metrics(metrics: dict, out, cfg: Config) -> None:
    from .metrics import write_report
    print(json.dumps(metrics, sort_keys=True))
    if out:
        out = Path(out)
        _echo_config(cfg, out)
        write_report(out / "metrics.txt", metrics)
        with open(out / "metrics.jsonl", "a", encoding="utf-8") as fh:
            fh.write(json.dumps(metrics, sort_keys=True) + "\n")


def cmd_eval_caption(args) -> int:
    from .checkpoint import load_checkpoint
    from .data import NONE_ASR
    from .train import evaluate_captions, informative_indices
    model, ckpt = load_checkpoint(_require(args.ckpt, "checkpoint"))
    items = _load_eval_items(args.data, args.split)
    subset = informative_indices(items) if args.informative_only else None
    max_len = ckpt.config.caption_max_len if args.target == "captions" else ckpt.config.summary_max_len
    metrics = evaluate_captions(model, items, args.target, max_len, NONE_ASR if args.no_asr else None, subset)
    _write_metrics(metrics, args.out, ckpt.config)
    return 0


def cmd_eval_retrieval(args) -> int:
    from .checkpoint import load_checkpoint
    from .train import evaluate_retrieval
    model, ckpt = load_checkpoint(_require(args.ckpt, "checkpoint"))
    items = _load_eval_items(args.data, args.split)
    _write_metrics(evaluate_retrieval(model, items), args.out, ckpt.config)
    return 0


def cmd_scst(args) -> int:
    from .checkpoint import load_checkpoint, save_checkpoint
    from .train import Splits, run_scst, write_log
    model, ckpt = load_checkpoint(_require(args.init, "init checkpoint"))
    cfg = ckpt.config
    over = {}
    for key in ("steps", "lr", "batch_size"):
        if getattr(args, key) is not None:
            over[f"scst.{key}"] = getattr(args, key)
    cfg = cfg.with_overrides(over) if over else cfg
    splits = Splits.load(_require(args.data, "data directory"))
    res = run_scst(model, splits.finetune, cfg.scst, cfg.seed, fixed_batch=args.fixed_batch)
    out = Path(args.out)
    ckpt_path = out if out.suffix == ".ckpt" else out / "scst.ckpt"
    _echo_config(cfg, ckpt_path.parent)
    save_checkpoint(ckpt_path, model, cfg, stage=4, step=len(res.log), optimizer=res.optimizer)
    write_log(ckpt_path.with_suffix(".log.jsonl"), res.log)
    return 0


def cmd_ablate(args) -> int:
    from .train import Splits, ablation_cells, run_ablation
    cfg = effective_config(args)
    splits = Splits.load(_require(args.data, "data directory"))
    out = Path(args.out)
    _echo_config(cfg, out)
    runs_path = out / "runs.jsonl"
    runs_path.write_text("", encoding="utf-8")

    def on_run(run):
        with open(runs_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps({"cell": run.cell, "seed": run.seed, **run.metrics}, sort_keys=True) + "\n")

    result = run_ablation(cfg, splits, args.seeds, ablation_cells(args.toggles), on_run=on_run)
    table = result.table()
    (out / "table.tsv").write_text(table, encoding="utf-8")
    print(table, end="")
    return 0


def cmd_gradcheck(args) -> int:
    from .train import gradcheck_total_loss
    cfg = effective_config(args)
    report = gradcheck_total_loss(cfg, args.batch, args.entries, args.eps, args.tolerance, seed=cfg.seed)
    for name in sorted(report.max_rel_error):
        print(f"{name}\t{report.max_rel_error[name]:.3e}")
    print(f"worst {report.worst:.3e} over {len(report.max_rel_error)} tensors: "
          f"{'PASS' if report.passed else 'FAIL'}", file=sys.stderr)
    return 0 if report.passed else 2


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="qfcap", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    def with_config(sp):
        sp.add_argument("--config", help="config JSON (default: $QFCAP_CONFIG, else built-in defaults)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config value, e.g. loss.lambda_align=0")
        sp.add_argument("--seed", type=int)
        return sp

    g = sub.add_parser("gen-data", help="write the synthetic dataset splits")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--ratios", type=float, nargs=3)
    g.add_argument("--expand", action="store_true", help="store rendered frames inline")
    g.set_defaults(fn=cmd_gen_data)

    t = with_config(sub.add_parser("train", help="run stage 1, 2, 3 or all"))
    t.add_argument("--stage", choices=("1", "2", "3", "all"), required=True)
    t.add_argument("--data", required=True, help="directory written by gen-data")
    t.add_argument("--init", help="checkpoint of the previous stage")
    t.add_argument("--out", required=True, help="checkpoint path (*.ckpt) or output directory")
    t.add_argument("--log-every", type=int, default=0)
    t.set_defaults(fn=cmd_train)

    for name, fn in (("caption", cmd_caption), ("summarize", cmd_summarize)):
        c = sub.add_parser(name, help=f"{name} items from a JSON / JSON-lines file")
        c.add_argument("--ckpt", required=True)
        c.add_argument("--input", required=True)
        c.add_argument("--max-len", type=int)
        c.add_argument("--no-asr", action="store_true", help='replace ASR with "none."')
        c.set_defaults(fn=fn)

    e = sub.add_parser("eval-caption", help="BLEU-4 / ROUGE-L / CIDEr-D on a split")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True, help="split file or gen-data directory")
    e.add_argument("--split", default="test")
    e.add_argument("--target", choices=("captions", "summaries"), default="captions")
    e.add_argument("--no-asr", action="store_true")
    e.add_argument("--informative-only", action="store_true")
    e.add_argument("--out")
    e.set_defaults(fn=cmd_eval_caption)

    r = sub.add_parser("eval-retrieval", help="text-to-video and video-to-text recall@k")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--split", default="test")
    r.add_argument("--out")
    r.set_defaults(fn=cmd_eval_retrieval)

    s = sub.add_parser("scst", help="CIDEr-D self-critical fine-tuning on the finetune split")
    s.add_argument("--init", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--steps", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--fixed-batch", action="store_true")
    s.set_defaults(fn=cmd_scst)

    a = with_config(sub.add_parser("ablate", help="train and score every toggle combination"))
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--seeds", type=int, nargs="+", default=[0])
    a.add_argument("--toggles", nargs="+", default=["align", "contrastive", "asr"],
                   choices=("align", "contrastive", "asr"))
    a.set_defaults(fn=cmd_ablate)

    gc = with_config(sub.add_parser("gradcheck", help="finite-difference check of the full loss"))
    gc.add_argument("--batch", type=int, default=3)
    gc.add_argument("--entries", type=int, default=3, help="coordinates sampled per tensor")
    gc.add_argument("--eps", type=float, default=1e-5)
    gc.add_argument("--tolerance", type=float, default=1e-4)
    gc.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(parser.format_usage().rstrip(), file=sys.stderr)
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:      # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except Exception as exc:       # noqa: BLE001 - every failure maps to exit status 2
        print(f"qfcap {args.command}: error: {exc}", file=sys.stderr)
        if args.verbose:
            traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())

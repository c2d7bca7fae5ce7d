"""Command line: ``mi2m {synth,pretrain,finetune,eval}``.

Every command takes ``--config PATH`` plus trailing dotted overrides such as
``encoder.layers=2``. Exit codes: 0 ok, 1 usage, 2 data/validation, 3 numeric.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import __version__
from .config import RunConfig, apply_overrides, load_config, save_config
from .datasets import SynthConfig, generate_synthetic
from .errors import ArgumentError, CheckpointError, ConfigurationError, MI2MError
from .evaluation import ProtocolSpec, evaluate, render_table, run_protocol, write_reports
from .pipeline import (ENCODER_CKPT, HEAD_CKPT, METRICS, build_pretrained, check_geometry, finetune_clips,
                       finetune_head, load_pretrained, open_dataset, run_lock, test_clips, write_metrics)
from .temporal import load_head, save_head

log = logging.getLogger("mi2m")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ArgumentError(f"{self.prog}: {message}")


def _seeds(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="run config file (dotted key = value lines)")
    common.add_argument("--output-dir", help="checkpoint/report directory (default: output_dir, or $MI2M_HOME)")
    common.add_argument("--seed", type=int, help="global seed")
    common.add_argument("-v", "--verbose", action="count", default=0)
    common.add_argument("overrides", nargs="*", metavar="KEY=VALUE", help="config overrides, e.g. encoder.layers=2")

    parser = _Parser(prog="mi2m", description="Masked WiFi-vision modeling: pretrain, finetune, evaluate.")
    parser.add_argument("--version", action="version", version=f"mi2m {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic dataset")
    p.add_argument("--out", help="dataset directory (default: data.pretrain, else <output_dir>/data/<env>)")
    p.add_argument("--activities", type=int)
    p.add_argument("--subjects", type=int)
    p.add_argument("--environment", help="synthetic environment preset (A or B)")

    p = sub.add_parser("pretrain", parents=[common], help="train tokenizers, then the masked encoder")
    p.add_argument("--pretrain-data")
    p.add_argument("--resume", action="store_true", help="continue from the encoder checkpoint in the output dir")

    p = sub.add_parser("finetune", parents=[common], help="train the temporal head on the labeled budget")
    p.add_argument("--pretrain-data", help="used for finetuning when --finetune-data is not given")
    p.add_argument("--finetune-data")
    p.add_argument("--budget-seconds", type=float)
    p.add_argument("--task", choices=("activity", "joint"))

    p = sub.add_parser("eval", parents=[common], help="evaluate; with --seeds, run the whole protocol per seed")
    p.add_argument("--pretrain-data", action="append", help="repeat to build a grid")
    p.add_argument("--finetune-data", action="append", help="repeat to build a grid")
    p.add_argument("--task", choices=("activity", "joint"))
    p.add_argument("--condition", choices=("normal", "dark"))
    p.add_argument("--gamma", type=float)
    p.add_argument("--seeds", type=_seeds)
    p.add_argument("--modalities", help="comma-separated subset of wifi,vision")
    p.add_argument("--random-encoder", action="store_true", help="baseline: skip pretraining, same init")
    return parser


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    apply_overrides(cfg, args.overrides)
    if args.output_dir:
        cfg.output_dir = args.output_dir
    if args.seed is not None:
        cfg.seed = args.seed
    for attr, key in (("activities", "synth.activities"), ("subjects", "synth.subjects"),
                      ("environment", "synth.environment"), ("budget_seconds", "finetune.budget_seconds"),
                      ("task", "eval.task"), ("condition", "eval.condition"), ("gamma", "eval.gamma")):
        value = getattr(args, attr, None)
        if value is not None:
            apply_overrides(cfg, [f"{key}={value}"])
    if getattr(args, "seeds", None):
        cfg.eval.seeds = args.seeds
    if getattr(args, "modalities", None):
        apply_overrides(cfg, [f"eval.modalities={args.modalities}"])
    pre, ft = getattr(args, "pretrain_data", None), getattr(args, "finetune_data", None)
    if isinstance(pre, str):
        cfg.data.pretrain = pre
    elif pre:
        cfg.data.pretrain = pre[0]
    if isinstance(ft, str):
        cfg.data.finetune = ft
    elif ft:
        cfg.data.finetune = ft[0]
    return cfg.validate()


def cmd_synth(cfg: RunConfig, args) -> int:
    s = cfg.synth
    out = Path(args.out or cfg.data.pretrain or Path(cfg.output_dir) / "data" / s.environment)
    ds = generate_synthetic(SynthConfig(out, s.activities, s.subjects, s.frames_per_recording, s.csi_shape,
                                        s.image_shape, s.noise, cfg.seed, s.environment, s.frame_rate))
    print(f"wrote {len(ds)} recordings ({s.activities} activities x {s.subjects} subjects) to {out}")
    return 0


def cmd_pretrain(cfg: RunConfig, args) -> int:
    dataset = open_dataset(cfg.data.pretrain)
    out = Path(cfg.output_dir)
    if args.resume and not (out / ENCODER_CKPT).exists():
        raise CheckpointError(f"--resume: no encoder checkpoint at {out / ENCODER_CKPT}")
    with run_lock(out):
        save_config(cfg, out / "config.txt")
        model = build_pretrained(dataset, cfg, cfg.seed, out_dir=out, resume=args.resume)
    losses = ", ".join(f"{v:.4f}" for v in model.trace.epoch_loss)
    print(f"pretrained {cfg.encoder.epochs} epochs; masked loss per epoch: {losses}")
    print(f"checkpoints in {out}")
    return 0


def _finetune_data(cfg: RunConfig) -> str:
    return cfg.data.finetune or cfg.data.pretrain


def cmd_finetune(cfg: RunConfig, args) -> int:
    out = Path(cfg.output_dir)
    if not (out / ENCODER_CKPT).exists():
        raise ConfigurationError(f"encoder checkpoint not found: {out / ENCODER_CKPT}")
    model = load_pretrained(out)
    dataset = open_dataset(_finetune_data(cfg))
    check_geometry(model.geometry, dataset)
    with run_lock(out):
        head, selection, trace = finetune_head(dataset, model, cfg, cfg.seed, task=cfg.eval.task,
                                               modalities=cfg.eval.modalities)
        save_head(out / HEAD_CKPT, head, {"seed": cfg.seed, "task": cfg.eval.task,
                                          "modalities": list(cfg.eval.modalities),
                                          "finetune_clips": [c.clip_id for c in selection.clips]})
        write_metrics(out / METRICS, trace)
    for w in selection.warnings:
        print(f"warning: {w}", file=sys.stderr)
    _, loss, acc = trace.rows[-1]
    print(f"finetuned on {len(selection.clips)} clips; final loss {loss:.4f}, train accuracy {acc:.4f}")
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    e = cfg.eval
    conditions = (e.condition,)
    if args.seeds or args.random_encoder or (args.pretrain_data and len(args.pretrain_data) > 1) \
            or (args.finetune_data and len(args.finetune_data) > 1):
        spec = ProtocolSpec(args.pretrain_data or [cfg.data.pretrain], args.finetune_data or [_finetune_data(cfg)],
                            cfg, e.task, conditions, e.gamma, e.seeds, e.modalities,
                            "random" if args.random_encoder else "pretrained")
        reports = run_protocol(spec)
    else:
        if not (out / HEAD_CKPT).exists():
            raise ConfigurationError(f"head checkpoint not found: {out / HEAD_CKPT}")
        model = load_pretrained(out)
        head, header = load_head(out / HEAD_CKPT)
        extra = header.get("extra", {})
        dataset = open_dataset(_finetune_data(cfg))
        check_geometry(model.geometry, dataset)
        task = extra.get("task", e.task)
        modalities = tuple(extra.get("modalities", e.modalities))
        used = extra.get("finetune_clips")
        if used is None:
            used = [c.clip_id for c in finetune_clips(dataset, cfg, task).clips]
        reports = [evaluate(model.encoder, head, test_clips(dataset, cfg), e.condition, e.gamma, task=task,
                            num_subjects=dataset.manifest.num_subjects, csi_transform=model.normalizer,
                            modalities=modalities, finetune_ids=used, seed=extra.get("seed", cfg.seed),
                            pretrain_id=model.dataset_id, finetune_id=Path(dataset.manifest.root_path).name)]
    table = render_table(reports)
    print(table)
    write_reports(out / "reports.jsonl", reports)
    (out / "report.txt").write_text(table + "\n")
    return 0


COMMANDS = {"synth": cmd_synth, "pretrain": cmd_pretrain, "finetune": cmd_finetune, "eval": cmd_eval}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                            format="%(asctime)s %(name)s %(levelname)s %(message)s")
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg, args)
    except MI2MError as exc:
        print(f"mi2m: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"mi2m: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

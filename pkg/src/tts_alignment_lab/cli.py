"""
Command-line entry point.

    atlab gen-data --config lab.cfg --out data/
    atlab train --config lab.cfg --seed 0 --out run.ckpt [--data data/]
    atlab eval --ckpt run.ckpt [--data data/] --split valid --mode tf|ar --window on|off
    atlab ablate --config lab.cfg --seeds 0,1,2 [--out ablation.csv]
    atlab infer --ckpt run.ckpt --tokens 3,1,4 --speaker 0 --window on --out frames.csv
    atlab dump-attention --ckpt run.ckpt --sample 0 --format csv|pgm --out heatmaps/
    atlab compare-modes --config lab.cfg --seeds 0,1,2 [--out modes.csv]
    atlab sweep-bottleneck --config lab.cfg --sizes 2,4,8,12 --seeds 0 [--out bottleneck.csv]

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
from dotenv import load_dotenv

from tts_alignment_lab.ablation import DESK_BOTTLENECK_SIZES, ablate, compare_encoder_modes, sweep_bottleneck
from tts_alignment_lab.checkpoint import load_checkpoint
from tts_alignment_lab.config import TaskConfig, load_config
from tts_alignment_lab.errors import LabError, ParameterError
from tts_alignment_lab.export import FORMATS, dump_attention_heatmap
from tts_alignment_lab.model import AcousticModel
from tts_alignment_lab.settings import get_settings
from tts_alignment_lab.synthdata import Dataset, load_dataset, make_dataset, save_dataset
from tts_alignment_lab.trainer import evaluate, train

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


class UsageError(Exception):
    pass


class LabArgumentParser(argparse.ArgumentParser):
    """argparse that raises instead of exiting, so run() owns the exit code."""

    def error(self, message: str) -> None:
        raise UsageError(f"{self.prog}: {message}")


def _int_list(text: str) -> List[int]:
    try:
        values = [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not values:
        raise argparse.ArgumentTypeError("expected at least one integer")
    return values


def _on_off(text: str) -> bool:
    if text not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected on or off")
    return text == "on"


def build_parser() -> LabArgumentParser:
    parser = LabArgumentParser(prog="atlab", description="Attention alignment lab for text-to-speech models")
    commands = parser.add_subparsers(dest="command", parser_class=LabArgumentParser)

    gen = commands.add_parser("gen-data", help="generate the synthetic dataset")
    gen.add_argument("--config", type=Path, required=True)
    gen.add_argument("--out", type=Path, required=True)

    trn = commands.add_parser("train", help="train one model")
    trn.add_argument("--config", type=Path, required=True)
    trn.add_argument("--seed", type=int, default=None)
    trn.add_argument("--out", type=Path, required=True, help="checkpoint path")
    trn.add_argument("--data", type=Path, default=None)
    trn.add_argument("--log", type=Path, default=None, help="metrics JSONL path")

    ev = commands.add_parser("eval", help="evaluate a checkpoint")
    ev.add_argument("--ckpt", type=Path, required=True)
    ev.add_argument("--data", type=Path, default=None)
    ev.add_argument("--split", default="valid")
    ev.add_argument("--mode", choices=("tf", "ar"), default="ar")
    ev.add_argument("--window", type=_on_off, default=None)
    ev.add_argument("--limit", type=int, default=None)
    ev.add_argument("--json", type=Path, default=None, help="write the report as JSON")

    abl = commands.add_parser("ablate", help="run the five-arm ablation")
    abl.add_argument("--config", type=Path, required=True)
    abl.add_argument("--seeds", type=_int_list, default=[0, 1, 2])
    abl.add_argument("--data", type=Path, default=None)
    abl.add_argument("--out", type=Path, default=Path("ablation.csv"))

    inf = commands.add_parser("infer", help="generate frames autoregressively")
    inf.add_argument("--ckpt", type=Path, required=True)
    inf.add_argument("--tokens", type=_int_list, required=True)
    inf.add_argument("--speaker", type=int, required=True)
    inf.add_argument("--window", type=_on_off, default=None)
    inf.add_argument("--max-frames", type=int, default=None)
    inf.add_argument("--seed", type=int, default=0)
    inf.add_argument("--out", type=Path, required=True)

    dump = commands.add_parser("dump-attention", help="write attention heatmaps of one sample")
    dump.add_argument("--ckpt", type=Path, required=True)
    dump.add_argument("--sample", type=int, required=True)
    dump.add_argument("--split", default="valid")
    dump.add_argument("--data", type=Path, default=None)
    dump.add_argument("--format", choices=FORMATS, default="csv")
    dump.add_argument("--out", type=Path, required=True, help="output directory")

    modes = commands.add_parser("compare-modes", help="compare encoder input modes")
    modes.add_argument("--config", type=Path, required=True)
    modes.add_argument("--seeds", type=_int_list, default=[0, 1, 2])
    modes.add_argument("--data", type=Path, default=None)
    modes.add_argument("--out", type=Path, default=Path("encoder_modes.csv"))

    sweep = commands.add_parser("sweep-bottleneck", help="diagonal rate versus pre-net bottleneck width")
    sweep.add_argument("--config", type=Path, required=True)
    sweep.add_argument("--sizes", type=_int_list, default=list(DESK_BOTTLENECK_SIZES))
    sweep.add_argument("--seeds", type=_int_list, default=[0])
    sweep.add_argument("--data", type=Path, default=None)
    sweep.add_argument("--out", type=Path, default=Path("bottleneck.csv"))
    return parser


def _dataset(path: Optional[Path], task: TaskConfig) -> Dataset:
    return load_dataset(path) if path is not None else make_dataset(task)


def _cmd_gen_data(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    dataset = make_dataset(config.task)
    paths = save_dataset(dataset, args.out)
    print(f"✅ Wrote {len(paths)} split files to {args.out}")
    return EXIT_OK


def _cmd_train(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    update = {"checkpoint_path": args.out}
    if args.seed is not None:
        update["seed"] = args.seed
    if args.log is not None:
        update["log_path"] = args.log
    config = config.model_copy(update=update)
    result = train(config, _dataset(args.data, config.task))
    result.metrics.print_stats()
    print(f"✅ Checkpoint: {result.checkpoint_path}")
    return EXIT_OK


def _cmd_eval(args: argparse.Namespace) -> int:
    checkpoint = load_checkpoint(args.ckpt)
    report = evaluate(
        checkpoint,
        _dataset(args.data, checkpoint.config.task),
        split=args.split,
        teacher_forced=args.mode == "tf",
        window_enabled=args.window,
        limit=args.limit,
    )
    print(f"📐 r={report.mean_r:.4f}  mel_loss={report.mel_loss:.4f}  stop_acc={report.stop_accuracy:.4f}")
    for mode, value in report.position_similarity.items():
        print(f"   position similarity [{mode}]: {value:.4f}")
    if args.json is not None:
        args.json.write_text(json.dumps(report.to_dict(), indent=2), encoding="utf-8")
    return EXIT_OK


def _cmd_ablate(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    table = ablate(config, args.seeds, _dataset(args.data, config.task))
    table.to_csv(args.out)
    report = table.ordering_report()
    for arm, value in report.medians.items():
        print(f"  {arm:<10} median r = {value:.4f}")
    print(f"{'✅' if report.passed else '⚠️ '} full vs all-removed gap {report.gap:+.4f}")
    return EXIT_OK


def _cmd_infer(args: argparse.Namespace) -> int:
    checkpoint = load_checkpoint(args.ckpt)
    model = AcousticModel.from_checkpoint(checkpoint)
    config = checkpoint.config
    window = config.window_at_inference if args.window is None else args.window
    cap = args.max_frames or min(model.config.max_frames, math.ceil(config.max_len_ratio * len(args.tokens)))
    result = model.infer_autoregressive(args.tokens, args.speaker, window, cap, config.stop_threshold, args.seed)
    np.savetxt(args.out, result.mel, delimiter=",", fmt="%.17g")
    stopped = result.stopped_at if result.stopped_at is not None else "none (frame cap reached)"
    print(f"✅ {result.num_frames} frames written to {args.out}; stop at {stopped}")
    return EXIT_OK


def _cmd_dump_attention(args: argparse.Namespace) -> int:
    checkpoint = load_checkpoint(args.ckpt)
    samples = _dataset(args.data, checkpoint.config.task).split(args.split)
    if not 0 <= args.sample < len(samples):
        raise ParameterError(f"sample {args.sample} outside [0, {len(samples)}) of split {args.split}")
    paths = dump_attention_heatmap(checkpoint, samples[args.sample], args.format, args.out)
    print(f"✅ {len(paths)} heatmaps written to {args.out}")
    return EXIT_OK


def _cmd_compare_modes(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    table = compare_encoder_modes(config, args.seeds, _dataset(args.data, config.task))
    table.to_csv(args.out)
    for mode, value in table.medians("position_similarity").items():
        print(f"  {mode:<17} similarity = {value:.4f}  r = {table.medians('r')[mode]:.4f}")
    return EXIT_OK


def _cmd_sweep_bottleneck(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    table = sweep_bottleneck(config, args.sizes, args.seeds, _dataset(args.data, config.task))
    table.to_csv(args.out)
    for size, value in table.medians("r").items():
        print(f"  bottleneck {size:>4}: median r = {value:.4f}")
    return EXIT_OK


COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
    "infer": _cmd_infer,
    "dump-attention": _cmd_dump_attention,
    "compare-modes": _cmd_compare_modes,
    "sweep-bottleneck": _cmd_sweep_bottleneck,
}


def _configure_logging() -> None:
    settings = get_settings()
    logging.basicConfig(
        level=getattr(logging, settings.log_level.upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def run(argv: Sequence[str]) -> int:
    """Parse argv, run one subcommand and return its exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(list(argv))
        if args.command is None:
            raise UsageError("a subcommand is required")
    except UsageError as exc:
        print(parser.format_usage().rstrip(), file=sys.stderr)
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:
        return EXIT_OK if not exc.code else EXIT_USAGE

    load_dotenv()
    _configure_logging()
    try:
        return COMMANDS[args.command](args)
    except (LabError, OSError) as exc:
        print(f"❌ {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()

#!/usr/bin/env python3
"""
LucidDream command line
  python lucid.py dream        --network net.json --weights net.ldw --input in.ppm --output out.ppm
  python lucid.py dream-video  --network net.json --weights net.ldw --frames frames/ --flows flows/ --out out/
  python lucid.py flow inspect flows/backward_2_1.flo
  python lucid.py flow synth   --kind translation --params 2 0 --height 48 --width 64 --frames 8 --out flows/
  python lucid.py presets
  python lucid.py init-weights --architecture micro --network net.json --weights net.ldw
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

import pandas as pd

from dream_config import get_preset_table, get_run_defaults
from dreamnet import load_network, micro_spec, random_weights, save_spec, save_weights, vgg19_spec
from errors import LucidDreamError, MissingInputError
from flowlab import FlowDirectory, FlowField, SyntheticFlowSource, read_flo, save_flo
from image_io import discover_frames, frame_path, load_image, save_image
from pipeline import LucidDreamPipeline, preset_table
from run_config import Config, build_config, parse_offsets
from utils import setup_logging

logger = logging.getLogger(__name__)

# =============================================================================
# COMMANDS
# =============================================================================


def _pipeline(config: Config) -> LucidDreamPipeline:
    paths = config.require_paths(("network", "weights"))
    network = load_network(paths["network"], paths["weights"])
    return LucidDreamPipeline(network, config.dream_settings())


def cmd_dream(config: Config) -> int:
    """Dream one image with k_base iterations and write it plus its manifest"""
    paths = config.require_paths(("input", "output"))
    pipeline = _pipeline(config)
    preset = config.effective_preset()

    image = load_image(paths["input"])
    output, manifest = pipeline.dream_image(image, preset)
    manifest.config = config.to_dict()

    save_image(paths["output"], output)
    manifest.save(paths["output"].parent)
    print(f"✅ Dreamed {paths['input'].name} -> {paths['output']}")
    return 0


def cmd_dream_video(config: Config) -> int:
    """Process a frame_NNNN.ppm directory into an output sequence plus manifest"""
    paths = config.require_paths(("frames", "out"))
    frame_files = discover_frames(paths["frames"])
    flow_source = None
    if len(frame_files) > 1:
        flow_source = FlowDirectory(config.require_paths(("flows",))["flows"])
    pipeline = _pipeline(config)
    preset = config.effective_preset()

    frames = [load_image(path) for path in frame_files]
    outputs, manifest = pipeline.process_video(frames, flow_source, preset, config.to_dict())

    for index, output in enumerate(outputs, start=1):
        save_image(frame_path(paths["out"], index), output)
    manifest.save(paths["out"])
    print(f"✅ Wrote {len(outputs)} frame(s) to {paths['out']} ({sum(manifest.shot_change_flags)} shot change(s))")
    return 0


def flow_statistics(flow: FlowField) -> pd.DataFrame:
    """Min, max and mean of u and v"""
    table = pd.DataFrame({"u": flow.u.ravel(), "v": flow.v.ravel()}).astype("float64")
    return table.agg(["min", "max", "mean"])


def cmd_flow_inspect(args: argparse.Namespace) -> int:
    path = Path(args.path)
    if not path.exists():
        raise MissingInputError(f"Flow file not found: {path}", [str(path)])
    flow = read_flo(path)
    print(f"{path.name}: {flow.width}x{flow.height}")
    print(flow_statistics(flow).to_string())
    return 0


def cmd_flow_synth(args: argparse.Namespace) -> int:
    """Write forward/backward pairs for every frame i and offset j with i - j >= 1"""
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    source = SyntheticFlowSource(args.kind, args.params, args.height, args.width)
    directory = FlowDirectory(out)
    written = 0
    for i in range(2, args.frames + 1):
        for j in args.offsets:
            if i - j < 1:
                continue
            forward, backward = source.pair(i, j)
            forward_path, backward_path = directory.paths(i, j)
            save_flo(forward_path, forward)
            save_flo(backward_path, backward)
            written += 1
    print(f"✅ Wrote {written} flow pair(s) to {out}")
    return 0


def cmd_presets(args: argparse.Namespace) -> int:
    print(preset_table().to_string())
    return 0


def cmd_init_weights(args: argparse.Namespace) -> int:
    """Random network for desk-scale experiments"""
    if args.architecture == "vgg19":
        spec = vgg19_spec(class_count=args.classes, tile_size=args.tile_size)
    else:
        spec = micro_spec(tile_size=args.tile_size, class_count=args.classes)
    weights = random_weights(spec, seed=args.seed, scale=args.scale)
    save_spec(spec, args.network)
    save_weights(spec, weights, args.weights)
    print(f"✅ {args.architecture} network with {spec.parameter_count()} parameters -> {args.network}, {args.weights}")
    return 0


# =============================================================================
# ARGUMENTS
# =============================================================================


def _offsets(text: str):
    try:
        return parse_offsets(text)
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"offsets must be integers: {text!r}") from e


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    """Flags mirroring Config keys; unset flags fall back to the config file and presets"""
    parser.add_argument("--config", help="key = value config file (default: $LUCID_CONFIG)")
    parser.add_argument("--network", help="network spec (JSON)")
    parser.add_argument("--weights", help="LDW1 weights file")
    parser.add_argument("--preset", choices=sorted(get_preset_table()))
    parser.add_argument("--class", dest="class_index", type=int)
    parser.add_argument("--seed", type=int)
    for name in ("alpha", "beta", "gamma", "delta"):
        parser.add_argument(f"--{name}", type=float)
    parser.add_argument("--offsets", "--J", dest="offsets", type=_offsets, help="e.g. 1,2,4,8")
    parser.add_argument("--init-policy", choices=("original_content", "warped_previous"))
    parser.add_argument("--k-base", type=int)
    parser.add_argument("--k-over", type=int)
    parser.add_argument("--lr", dest="learning_rate", type=float)
    parser.add_argument("--origins", dest="n_origins", type=int, help="origin selections per frame (default k)")
    parser.add_argument("--steps", dest="n_steps", type=int, help="Adam steps per tile (default k)")
    parser.add_argument("--tile-workers", type=int)
    parser.add_argument("--objective", choices=("logits", "features"))
    parser.add_argument("--layer", type=int)
    parser.add_argument("--feature-map", type=int)
    parser.add_argument("--masked-trail", action="store_const", const=True, default=None)
    parser.add_argument("--shot-threshold", type=float)
    parser.add_argument("--disagreement-scale", type=float)
    parser.add_argument("--disagreement-offset", type=float)
    parser.add_argument("--motion-scale", type=float)
    parser.add_argument("--motion-offset", type=float)
    parser.add_argument("--record-timing", action="store_const", const=True, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lucid", description="LucidDream image and video hallucination")
    parser.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING (default: $LUCID_LOG_LEVEL)")
    commands = parser.add_subparsers(dest="command", required=True)

    dream = commands.add_parser("dream", help="hallucinate a single PPM image")
    _add_config_flags(dream)
    dream.add_argument("--input", help="input .ppm")
    dream.add_argument("--output", help="output .ppm")

    video = commands.add_parser("dream-video", help="hallucinate a frame_NNNN.ppm sequence")
    _add_config_flags(video)
    video.add_argument("--frames", help="directory of frame_0001.ppm, frame_0002.ppm, ...")
    video.add_argument("--flows", help="directory of forward_/backward_ .flo files")
    video.add_argument("--out", help="output directory")

    flow = commands.add_parser("flow", help="inspect or synthesize .flo files")
    flow_commands = flow.add_subparsers(dest="flow_command", required=True)
    inspect = flow_commands.add_parser("inspect", help="print size and u/v statistics")
    inspect.add_argument("path")
    synth = flow_commands.add_parser("synth", help="write analytic forward/backward flow pairs")
    synth.add_argument("--kind", choices=("translation", "rotation"), default="translation")
    synth.add_argument("--params", type=float, nargs="+", default=[1.0, 0.0], help="dx dy, or theta in radians")
    synth.add_argument("--height", type=int, required=True)
    synth.add_argument("--width", type=int, required=True)
    synth.add_argument("--frames", type=int, default=2, help="number of frames in the sequence")
    synth.add_argument("--offsets", type=_offsets, default=(1,), help="e.g. 1,2,4")
    synth.add_argument("--out", required=True)

    commands.add_parser("presets", help="print the effect preset table")

    init = commands.add_parser("init-weights", help="write a randomly initialized network")
    init.add_argument("--architecture", choices=("micro", "vgg19"), default="micro")
    init.add_argument("--tile-size", type=int, default=None)
    init.add_argument("--classes", type=int, default=10)
    init.add_argument("--seed", type=int, default=get_run_defaults()["seed"])
    init.add_argument("--scale", type=float, default=1.0, help="multiplier on the He initialization")
    init.add_argument("--network", required=True, help="spec output path (JSON)")
    init.add_argument("--weights", required=True, help="weights output path")
    return parser


CONFIG_COMMANDS = {"dream": cmd_dream, "dream-video": cmd_dream_video}


def _config_values(args: argparse.Namespace) -> Dict[str, Any]:
    values = vars(args).copy()
    for key in ("command", "log_level", "config"):
        values.pop(key, None)
    return values


def main(argv: Optional[List[str]] = None) -> int:
    """Run one command; library errors become a logged message and their exit code"""
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)

    try:
        if args.command in CONFIG_COMMANDS:
            config = build_config(_config_values(args), args.config)
            return CONFIG_COMMANDS[args.command](config)
        if args.command == "flow":
            return cmd_flow_inspect(args) if args.flow_command == "inspect" else cmd_flow_synth(args)
        if args.command == "init-weights":
            if args.tile_size is None:
                args.tile_size = 224 if args.architecture == "vgg19" else 32
            return cmd_init_weights(args)
        return cmd_presets(args)
    except LucidDreamError as e:
        logger.error(f"{type(e).__name__}: {e}")
        print(f"❌ {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())

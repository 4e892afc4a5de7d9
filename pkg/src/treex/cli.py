"""Command line interface: ``treex segment|evaluate|synth|dtm``."""

__all__ = ["main", "build_config"]

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from .config import PRESETS, ConfigError, PresetConfig, preset
from .io import write_point_cloud
from .pipeline import export_dtm, run_evaluation, run_segmentation
from .synthetic import TLS_DENSITIES, ULS_DENSITIES, generate_synthetic, grid_forest, resample

logger = logging.getLogger("treex")

EXIT_SUCCESS = 0
EXIT_VALIDATION_ERROR = 1
EXIT_INTERNAL_ERROR = 2


def build_config(
    preset_name: Optional[str],
    config_path: Optional[str],
    overrides: Sequence[str],
    seed: Optional[int],
) -> PresetConfig:
    """
    Resolves the configuration with the precedence command line > configuration file > preset. The preset is taken
    from :code:`--preset`, else from the file's :code:`preset` key, else TLS.
    """
    if config_path is not None:
        config = PresetConfig.load(config_path, preset_name)
    else:
        config = preset(preset_name or "tls")
    values = {}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"Expected key=value, got {item!r}.")
        key, value = item.split("=", 1)
        values[key.strip()] = value.strip()
    if seed is not None:
        values["seed"] = str(seed)
    return config.with_overrides(values)


def _add_config_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--preset", choices=PRESETS, default=None, help="parameter preset (default: tls)")
    parser.add_argument("--config", default=None, help="configuration file with 'section.key = value' lines")
    parser.add_argument(
        "--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE", help="override a parameter"
    )
    parser.add_argument("--seed", type=int, default=None, help="random seed")
    parser.add_argument("--jobs", type=int, default=1, help="maximum number of worker threads")


class _ArgumentParser(argparse.ArgumentParser):
    """Reports usage errors with the validation error exit code."""

    def error(self, message: str) -> None:  # type: ignore[override]
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION_ERROR, f"{self.prog}: error: {message}\n")


def _parser() -> argparse.ArgumentParser:
    parser = _ArgumentParser(prog="treex", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress information")
    verbs = parser.add_subparsers(dest="verb", required=True, parser_class=_ArgumentParser)

    segment = verbs.add_parser("segment", help="segment tree instances in a point cloud file")
    segment.add_argument("input", help="LAS/LAZ or ASCII point cloud")
    segment.add_argument("--output", required=True, help="output directory")
    segment.add_argument("--intensity-scale", choices=["8bit"], default=None, help="remap 8-bit intensities")
    _add_config_arguments(segment)

    evaluate = verbs.add_parser("evaluate", help="compute detection and segmentation metrics")
    evaluate.add_argument("--predicted", nargs="+", required=True, help="files with predicted instance IDs")
    evaluate.add_argument("--reference", nargs="+", required=True, help="files with reference instance IDs")
    evaluate.add_argument("--output", required=True, help="output directory for the metrics report")
    evaluate.add_argument("--predicted-field", default="instance_id")
    evaluate.add_argument("--reference-field", default="instance_id")
    evaluate.add_argument(
        "--labeled-field", default=None, help="attribute flagging annotated points (default: reference != non-tree)"
    )
    evaluate.add_argument("--non-tree-id", type=int, default=-1)

    synth = verbs.add_parser("synth", help="generate a synthetic forest plot with reference labels")
    synth.add_argument("--output", required=True, help="output point cloud file (.las or ASCII)")
    synth.add_argument("--trees", type=int, default=5)
    synth.add_argument("--extent", type=float, nargs=2, default=(20.0, 20.0), metavar=("WIDTH", "DEPTH"))
    synth.add_argument("--density", choices=["tls", "uls"], default="tls")
    synth.add_argument("--seed", type=int, default=0)

    dtm = verbs.add_parser("dtm", help="export the terrain model of a point cloud as an ASCII grid")
    dtm.add_argument("input", help="LAS/LAZ or ASCII point cloud")
    dtm.add_argument("--output", required=True, help="output .asc file")
    _add_config_arguments(dtm)
    return parser


def _run(args: argparse.Namespace) -> None:
    if args.verb == "segment":
        config = build_config(args.preset, args.config, args.overrides, args.seed)
        result = run_segmentation(args.input, config, args.output, args.jobs, args.intensity_scale)
        print(f"Segmented {result.labeling.tree_count} trees; outputs written to {args.output}")
    elif args.verb == "evaluate":
        run_evaluation(
            args.predicted,
            args.reference,
            args.output,
            predicted_field=args.predicted_field,
            reference_field=args.reference_field,
            labeled_field=args.labeled_field,
            non_tree_id=args.non_tree_id,
        )
        print((Path(args.output) / "metrics.txt").read_text(encoding="utf-8"), end="")
    elif args.verb == "synth":
        scene = grid_forest(args.trees, tuple(args.extent), args.seed)
        data = generate_synthetic(scene, args.seed)
        if args.density == "uls":
            data = resample(data, ULS_DENSITIES, TLS_DENSITIES, args.seed + 1)
        cloud = data.labeled_cloud()
        write_point_cloud(args.output, cloud)
        print(f"Wrote {len(cloud)} points of {args.trees} trees to {args.output}")
    elif args.verb == "dtm":
        config = build_config(args.preset, args.config, args.overrides, args.seed)
        model = export_dtm(args.input, config, args.output, args.jobs)
        print(f"Wrote a {model.shape[0]} x {model.shape[1]} terrain grid to {args.output}")


def main(argv: Optional[List[str]] = None) -> int:
    """Entry point; returns 0 on success, 1 on invalid input or configuration, and 2 on internal errors."""
    parser = _parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        _run(args)
    except (ValueError, OSError) as error:
        # covers InputValidationError, ConfigError, SceneSpecError and parameter validation in the algorithm modules
        print(f"error: {error}", file=sys.stderr)
        return EXIT_VALIDATION_ERROR
    except Exception as error:  # pylint: disable=broad-exception-caught
        logger.exception("Internal error")
        print(f"internal error: {error}", file=sys.stderr)
        return EXIT_INTERNAL_ERROR
    return EXIT_SUCCESS


if __name__ == "__main__":
    sys.exit(main())

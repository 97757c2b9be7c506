"""Command-line entry point: ``plot curves|ablation|embedding``.

Reads one exported artifact, writes one image.  Exit codes: 0 success,
1 validation error (missing or empty input, bad format, output exists
without --force), 2 unexpected failure.  The output path goes to stdout;
warnings go to stderr.
"""

from __future__ import annotations

import argparse
import os
import sys


class _Parser(argparse.ArgumentParser):
    """argparse that treats every parse problem as a validation error."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _build_parser() -> _Parser:
    parser = _Parser(prog="plot", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="KIND")
    specs = {
        "curves": "loss and schedule curves from a metrics JSONL file",
        "ablation": "grouped accuracy bars from an ablation CSV",
        "embedding": "2-D feature projection from an embeddings CSV",
    }
    for name, doc in specs.items():
        p = sub.add_parser(name, help=doc)
        p.add_argument("--in", dest="input", required=True, metavar="PATH",
                       help="exported artifact to read")
        p.add_argument("--out", default=None, metavar="PATH",
                       help=f"image path, .png or .svg (default: {name}.png "
                            "next to the input)")
        p.add_argument("--seed", type=int, default=0,
                       help="projection seed; only the t-SNE embedding uses it")
        p.add_argument("--force", action="store_true",
                       help="overwrite an existing output file")
        if name == "embedding":
            p.add_argument("--tsne", action="store_true",
                           help="project with t-SNE instead of PCA")
    return parser


def _resolve_out(args, kind: str) -> str:
    if args.out:
        return args.out
    return os.path.join(os.path.dirname(os.path.abspath(args.input)),
                        f"{kind}.png")


def _check_overwrite(path: str, force: bool) -> None:
    if os.path.exists(path) and not force:
        raise FileExistsError(f"refusing to overwrite {path} (pass --force)")


def _cmd_curves(args) -> int:
    from .figures import curves_figure, save_figure
    from .io import read_metrics
    records, skipped = read_metrics(args.input)
    if skipped:
        print(f"warning: skipped {skipped} malformed line(s)", file=sys.stderr)
    if not records:
        raise ValueError(f"{args.input}: no usable records")
    out = _resolve_out(args, "curves")
    _check_overwrite(out, args.force)
    print(save_figure(curves_figure(records), out))
    return 0


def _cmd_ablation(args) -> int:
    from .figures import ablation_figure, save_figure
    from .io import read_ablation
    rows = read_ablation(args.input)
    if not rows:
        raise ValueError(f"{args.input}: no rows")
    out = _resolve_out(args, "ablation")
    _check_overwrite(out, args.force)
    print(save_figure(ablation_figure(rows), out))
    return 0


def _cmd_embedding(args) -> int:
    from .figures import embedding_figure, save_figure
    from .io import read_embeddings
    features, labels = read_embeddings(args.input)
    if len(features) == 0:
        raise ValueError(f"{args.input}: no rows")
    out = _resolve_out(args, "embedding")
    _check_overwrite(out, args.force)
    method = "tsne" if args.tsne else "pca"
    fig = embedding_figure(features, labels, method=method, seed=args.seed)
    print(save_figure(fig, out))
    return 0


_COMMANDS = {
    "curves": _cmd_curves,
    "ablation": _cmd_ablation,
    "embedding": _cmd_embedding,
}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    if not args.command:
        parser.print_help(sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](args)
    except (FileNotFoundError, FileExistsError, ValueError, OSError) as exc:
        print(f"plot: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - last-resort runtime report
        print(f"plot: unexpected failure: {exc!r}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

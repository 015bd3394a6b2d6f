"""Command line entry points.

Exit codes: 0 success, 2 bad arguments / unreadable or unrenderable input.
"""

from __future__ import annotations

import argparse
import sys

from .figures import FigureSpec, RenderError, render, render_all


def cmd_render(args) -> int:
    spec = FigureSpec(
        inputs=tuple(args.csv),
        x=args.x,
        y=args.y,
        out=args.out,
        series=args.series,
        band=None if args.band == "none" else args.band,
        logx=args.logx,
        logy=args.logy,
        title=args.title,
        xlabel=args.xlabel,
        ylabel=args.ylabel,
    )
    print(f"wrote {render(spec)}")
    return 0


def cmd_render_all(args) -> int:
    written = render_all(args.run_dir, args.out_dir)
    for path in written:
        print(f"wrote {path}")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flowplots", description="Render figures from flowlab CSV output."
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_render = sub.add_parser("render", help="render one figure from CSV columns")
    p_render.add_argument("--csv", action="append", required=True,
                          help="input CSV; repeat for one curve set per file")
    p_render.add_argument("--x", required=True, help="x column name")
    p_render.add_argument("--y", required=True, help="y column name")
    p_render.add_argument("--out", required=True, help="output image path")
    p_render.add_argument("--series", default=None,
                          help="column whose values become separate curves")
    p_render.add_argument("--band", default="std_err",
                          help="half-width column for shaded bands ('none' to disable)")
    p_render.add_argument("--logx", action="store_true")
    p_render.add_argument("--logy", action="store_true")
    p_render.add_argument("--title", default="")
    p_render.add_argument("--xlabel", default="")
    p_render.add_argument("--ylabel", default="")
    p_render.set_defaults(func=cmd_render)

    p_all = sub.add_parser(
        "render-all", help="render every known CSV in a run directory"
    )
    p_all.add_argument("run_dir", help="directory holding metrics.csv / diag_*.csv")
    p_all.add_argument("--out-dir", default=None,
                       help="where to put images (default: the run directory)")
    p_all.set_defaults(func=cmd_render_all)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (RenderError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``ctsgan <subcommand> manifest.json [overrides]``.

Exit codes: 0 success, 1 runtime failure, 2 usage or manifest error.
Structured logs go to stderr as JSON lines; tables go to stdout.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from ctsgan import pipeline

# convenience flags per subcommand -> manifest key
FLAG_KEYS = {
    "phantom": {"count": "phantom.count", "seed": "phantom.seed"},
    "train-sgan": {"steps": "sgan.steps", "seed": "sgan.seed"},
    "generate": {"count": "generate.count", "seed": "generate.seed"},
    "metrics": {"seed": "metrics.seed"},
    "inject": {"seed": "nodulesim.seed"},
    "erase": {"seed": "nodulesim.seed"},
    "detect": {"seed": "detect.seed"},
    "experiment": {"seed": "seed"},
}


class UsageError(Exception):
    pass


def _scalar(text: str):
    try:
        value = json.loads(text)
    except json.JSONDecodeError:
        value = text
    if isinstance(value, (dict, list)):
        raise UsageError(f"overrides must be scalars, got {text!r}")
    return value


def _parse_set(items) -> dict:
    out = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise UsageError(f"--set expects section.key=value, got {item!r}")
        out[key] = _scalar(value)
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ctsgan", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name, flags in FLAG_KEYS.items():
        sp = sub.add_parser(name)
        sp.add_argument("manifest", type=Path)
        for flag in flags:
            sp.add_argument(f"--{flag}", type=int)
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override one scalar manifest value (repeatable)")
    mp = sub.add_parser("montage", help="axial/coronal/sagittal tile grid of one volume as PNG")
    mp.add_argument("volume", type=Path)
    mp.add_argument("output", type=Path)
    mp.add_argument("--tiles", type=int, default=pipeline.DEFAULTS["montage"]["tiles"])
    mp.add_argument("--scale", type=int, default=4)
    return p


def _emit_tables(command: str, result, out) -> None:
    if command == "metrics":
        from ctsgan.evalmetrics import render_table

        out.write(render_table(result) + "\n")
    elif command == "detect":
        from ctsgan.detect import render_sweep_table

        out.write(render_sweep_table(result) + "\n")
    elif command == "erase":
        out.write("".join(f"{k:<22}{v}\n" for k, v in result.items()))
    elif command == "experiment":
        _emit_tables("metrics", result["metrics"], out)
        _emit_tables("erase", result["roundtrip"], out)
        _emit_tables("detect", result["detect"], out)
    elif result is not None:
        out.write(f"{result}\n")


STAGES = {
    "phantom": pipeline.stage_phantom,
    "train-sgan": pipeline.stage_train_sgan,
    "generate": pipeline.stage_generate,
    "metrics": pipeline.stage_metrics,
    "inject": pipeline.stage_inject,
    "erase": pipeline.stage_erase,
    "detect": pipeline.stage_detect,
    "experiment": pipeline.run_experiment,
}


def main(argv=None, stdout=None, stderr=None) -> int:
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    def fail(code: int, kind: str, message: str, **extra) -> int:
        stderr.write(json.dumps({"level": "error", "kind": kind, "message": message, **extra}) + "\n")
        return code

    if args.command == "montage":
        if args.tiles < 1:
            return fail(2, "usage", "--tiles must be positive")
        try:
            path = pipeline.write_montage(args.volume, args.output, args.tiles, args.scale)
        except (OSError, ValueError) as exc:
            return fail(1, "runtime", str(exc))
        stdout.write(f"{path}\n")
        return 0

    try:
        overrides = _parse_set(args.set)
        for flag, key in FLAG_KEYS[args.command].items():
            if getattr(args, flag) is not None:
                overrides[key] = getattr(args, flag)
        manifest = pipeline.apply_overrides(pipeline.load_manifest(args.manifest), overrides)
        pipeline.check_sections(manifest, args.command)
    except UsageError as exc:
        return fail(2, "usage", str(exc))
    except pipeline.ManifestError as exc:
        return fail(2, "usage", str(exc), section=exc.section)

    try:
        result = STAGES[args.command](manifest, stderr)
    except pipeline.ManifestError as exc:
        return fail(2, "usage", str(exc), section=exc.section)
    except Exception as exc:  # reported as a runtime failure, not a traceback
        return fail(1, "runtime", f"{type(exc).__name__}: {exc}")
    _emit_tables(args.command, result, stdout)
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``bitleak <verb> [flags]``.

Verbs ``train``, ``quantize`` and ``attack`` run the pipeline up to and
including that stage; ``run`` does all three and then ``report``. Every verb
that executes jobs honours ``--resume`` against the manifest in ``--out``.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .errors import BitleakError, IncompleteRunError

STAGE_VERBS = {"train": "train", "quantize": "quantize", "attack": "attack", "run": "attack"}


def _parser():
    p = argparse.ArgumentParser(prog="bitleak", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="verb", required=True)
    for verb in ("train", "quantize", "attack", "run"):
        s = sub.add_parser(verb, help=f"pipeline through the {STAGE_VERBS[verb]} stage"
                           if verb != "run" else "full pipeline plus report")
        s.add_argument("--config", required=True, type=Path, help="experiment TOML file")
        s.add_argument("--workers", type=int, default=1, help="process count (default 1)")
        s.add_argument("--resume", action="store_true", help="skip cells finished in the manifest")
        s.add_argument("--out", type=Path, help="output directory (default: config output_dir)")
        s.add_argument("--quiet", action="store_true")
    r = sub.add_parser("report", help="aggregate a finished run")
    r.add_argument("--out", type=Path, required=True, help="run directory holding manifest.json")
    r.add_argument("--allow-incomplete", action="store_true")
    st = sub.add_parser("selftest", help="quick oracle checks of every module")
    st.add_argument("--quick", action="store_true", help="smaller trial counts")
    return p


def _print_files(files):
    for name, path in files.items():
        print(f"  {name}: {path}")


def main(argv=None):
    args = _parser().parse_args(argv)
    try:
        if args.verb == "selftest":
            from .selftest import run_selftest
            return 0 if run_selftest(quick=args.quick) else 1
        if args.verb == "report":
            from .runner import report
            files = report(args.out, allow_incomplete=args.allow_incomplete)
            print(f"report written to {args.out / 'report'}")
            _print_files(files)
            return 0
        from .runner import load_config, report, run
        cfg = load_config(args.config)
        out = args.out or Path(cfg.output_dir)
        if args.workers < 1:
            raise SystemExit("--workers must be >= 1")
        log = (lambda m: None) if args.quiet else (lambda m: print(m, flush=True))
        manifest = run(cfg, out, workers=args.workers, resume=args.resume,
                       stop_after=STAGE_VERBS[args.verb], log=log)
        failed = sorted(k for k, v in manifest["cells"].items() if v.get("status") == "failed")
        failed += sorted(f"seed {k}" for k, v in manifest["seeds"].items() if v.get("status") == "failed")
        if failed:
            print(f"{len(failed)} job(s) failed: {', '.join(failed)}", file=sys.stderr)
        print(f"manifest: {out / 'manifest.json'}")
        if args.verb == "run" and not failed:
            _print_files(report(manifest, out))
        return 1 if failed else 0
    except IncompleteRunError as exc:
        print(f"error: {exc}", file=sys.stderr)
        for cell in exc.missing:
            print(f"  missing: {cell}", file=sys.stderr)
        return 2
    except BitleakError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""``visimail`` command line.

Exit codes: 0 ok, 1 usage, 2 configuration, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import mailbox
import sys
from pathlib import Path

from . import synthcorpus
from .cluster import export_csv, histogram_csv, lifespan_csv
from .config import load_config
from .errors import ConfigError, StageError, VisimailError
from .pipeline import Pipeline, evaluate_synthetic

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _emails_from(path: Path):
    """Yield (raw bytes, source) from a directory tree, an mbox file or a single message."""
    if path.is_dir():
        for f in sorted(p for p in path.rglob("*") if p.is_file() and not p.name.startswith(".")):
            yield f.read_bytes(), str(f)
    elif path.is_file() and not path.read_bytes()[:5] == b"From ":
        yield path.read_bytes(), str(path)
    elif path.is_file():
        box = mailbox.mbox(str(path), create=False)
        try:
            for key in box.iterkeys():
                yield box.get_bytes(key), f"{path}#{key}"
        finally:
            box.close()
    else:
        raise FileNotFoundError(f"no such file or directory: {path}")


def _load_spec(text: str | None) -> synthcorpus.CampaignSpec:
    if not text:
        return synthcorpus.CampaignSpec()
    p = Path(text)
    raw = p.read_text(encoding="utf-8") if p.is_file() else text
    try:
        return synthcorpus.CampaignSpec.from_dict(json.loads(raw))
    except (json.JSONDecodeError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad campaign spec: {exc}") from exc


def _pipeline(args, check_render=True):
    cfg = load_config(args.config, args.set, check_render=check_render)
    return Pipeline.open(cfg, args.data_dir, check_render=check_render)


def cmd_ingest(args) -> int:
    pipe = _pipeline(args)
    ok = failed = 0
    for outcome in pipe.ingest_many(_emails_from(Path(args.path)), args.fallback_time):
        if isinstance(outcome, StageError):
            failed += 1
            print(json.dumps({"email_id": outcome.email_id, "error": outcome.tag}), flush=True)
        else:
            ok += 1
            print(json.dumps(outcome.to_dict()), flush=True)
    print(f"ingested {ok}, failed {failed} (see {pipe.deadletter_path})", file=sys.stderr)
    return EXIT_RUNTIME if failed and args.strict else EXIT_OK


def cmd_score(args) -> int:
    pipe = _pipeline(args)
    print(json.dumps(pipe.score_email(Path(args.file).read_bytes()).to_dict()))
    return EXIT_OK


def cmd_label(args) -> int:
    pipe = _pipeline(args, check_render=False)
    rec = pipe.label(args.cluster, args.label)
    print(json.dumps({"cluster_id": rec.cluster_id, "label": rec.label, "size": rec.size}))
    return EXIT_OK


def cmd_stats(args) -> int:
    pipe = _pipeline(args, check_render=False)
    if args.out == "-":
        sys.stdout.write((histogram_csv if args.kind == "histogram" else lifespan_csv)(pipe.store))
    else:
        export_csv(pipe.store, args.kind, args.out)
    return EXIT_OK


def cmd_synth(args) -> int:
    spec = _load_spec(args.spec)
    manifest = synthcorpus.write_corpus(synthcorpus.generate(spec), args.out)
    print(manifest)
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_config(args.config, args.set, check_render=False)
    report = evaluate_synthetic(_load_spec(args.spec), cfg)
    print(json.dumps(report.to_dict()))
    return EXIT_OK


def cmd_serve(args) -> int:
    import uvicorn

    from .api import create_app

    pipe = _pipeline(args)
    svc = pipe.cfg.service
    uvicorn.run(create_app(pipe), host=args.host or svc.host, port=args.port or svc.port)
    return EXIT_OK


def cmd_config(args) -> int:
    sys.stdout.write(load_config(args.config, args.set, check_render=False).to_ini())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="visimail", description="Cluster emails by how they look when rendered.")
    parser.add_argument("-c", "--config", help="INI config file")
    parser.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config option (repeatable)")
    parser.add_argument("--data-dir", help="state directory (default: service.data_dir)")
    sub = parser.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    p = sub.add_parser("ingest", help="ingest a directory of .eml files or an mbox")
    p.add_argument("path")
    p.add_argument("--fallback-time", type=float, help="timestamp for emails without a Date header")
    p.add_argument("--strict", action="store_true", help="exit 3 if any email fails")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("score", help="verdict for one email, without storing it")
    p.add_argument("file")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("label", help="label a cluster")
    p.add_argument("cluster", type=int)
    p.add_argument("label", choices=("spam", "clean", "unlabeled"))
    p.set_defaults(func=cmd_label)

    p = sub.add_parser("stats", help="export cluster statistics as CSV")
    p.add_argument("--kind", choices=("histogram", "lifespan"), required=True)
    p.add_argument("--out", default="-", help="output path, '-' for stdout")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("synth", help="write a synthetic campaign corpus")
    p.add_argument("--spec", help="campaign spec as JSON text or a JSON file")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("eval", help="cluster a synthetic campaign and report pairwise precision/recall")
    p.add_argument("--spec", help="campaign spec as JSON text or a JSON file")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("serve", help="run the HTTP API")
    p.add_argument("--host")
    p.add_argument("--port", type=int)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("config", help="print the effective configuration")
    p.set_defaults(func=cmd_config)
    return parser


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # usage errors and --help
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (VisimailError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

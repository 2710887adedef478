"""Command-line entry point: ``tara-forge {ingest,rag,run,evaluate,report}``.

Exit codes: 0 success, 1 user error (bad flags or input files), 2 backend or
I/O failure. Every subcommand accepts ``--config FILE`` (TOML key = value,
keys named like the long flags with dashes as underscores); explicit flags
override the file, the file overrides environment-derived defaults.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import shutil
import sys
from pathlib import Path
from typing import Any, Optional, Sequence

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import ingest, rag
from .llm_client import BackendConfig, BackendError, ChatClient, HashEmbedder, ScriptedBackend, read_jsonl
from .mcot import STATUS_FAILED, PipelineConfig, PromptSet, run_batch
from .metrics.report import MetricReport, evaluate, render_table
from .model import INGEST_FPS, ManifestError, VideoSample, load_manifest, read_header, save_manifest

logger = logging.getLogger("tara_forge")

EXIT_OK, EXIT_USER, EXIT_BACKEND = 0, 1, 2
REPORT_FILE = "report.json"


class UserError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # argparse would exit 2
        self.print_usage(sys.stderr)
        raise UserError(f"{self.prog}: {message}")


# ---------------------------------------------------------------- config layering

DEFAULTS: dict[str, Any] = {
    "window": ingest.WINDOW,
    "k": rag.DEFAULT_K,
    "tau": rag.DEFAULT_TAU,
    "seed": 0,
    "jobs": 4,
    "format": "table",
    "embed_dim": 64,
}


def _resolve(args: argparse.Namespace) -> argparse.Namespace:
    file_values: dict[str, Any] = {}
    if getattr(args, "config", None):
        path = _existing(args.config, "config file")
        with open(path, "rb") as fh:
            file_values = {k.replace("-", "_"): v for k, v in tomllib.load(fh).items()}
    for key, value in vars(args).items():
        if value is None:
            if key in file_values:
                setattr(args, key, file_values[key])
            elif key in DEFAULTS:
                setattr(args, key, DEFAULTS[key])
    return args


def _existing(path: str | Path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UserError(f"{what} not found: {p}")
    return p


def _load_toml(path: str | Path, what: str) -> dict[str, Any]:
    with open(_existing(path, what), "rb") as fh:
        return tomllib.load(fh)


def make_backend(cfg_path: Optional[str]):
    """Chat backend from a TOML file: ``mock = "script.json"`` or HTTP settings."""
    cfg = _load_toml(cfg_path, "backend config") if cfg_path else {}
    if "mock" in cfg:
        script_path = Path(cfg["mock"])
        if not script_path.is_absolute():
            script_path = Path(cfg_path).parent / script_path
        script = json.loads(_existing(script_path, "mock script").read_text(encoding="utf-8"))
        return ScriptedBackend.from_mapping(script)
    keys = {f.name for f in dataclasses.fields(BackendConfig)}
    return ChatClient(BackendConfig.from_env(**{k: v for k, v in cfg.items() if k in keys}))


def make_embedder(cfg_path: Optional[str], fingerprint: str = "", dim: int = 64):
    """Embedder from a TOML file, else inferred from an index fingerprint, else the hash embedder."""
    if cfg_path:
        cfg = _load_toml(cfg_path, "embedding config")
        if cfg.get("embedder", "http") == "hash":
            return HashEmbedder(int(cfg.get("dim", dim)))
        keys = {f.name for f in dataclasses.fields(BackendConfig)}
        return ChatClient(BackendConfig.from_env(**{k: v for k, v in cfg.items() if k in keys}))
    if fingerprint.startswith("hash-embedder/"):
        return HashEmbedder(int(fingerprint.split("/")[1]))
    if fingerprint:
        raise UserError(f"index was built with {fingerprint!r}; pass --embed with a matching endpoint")
    return HashEmbedder(dim)


def _load_samples(path: str) -> list[VideoSample]:
    """Load a manifest and resolve relative frame directories against its location."""
    manifest = _existing(path, "manifest")
    try:
        samples = load_manifest(manifest)
    except ManifestError as exc:
        raise UserError(f"{manifest}: {exc}") from None
    base = manifest.resolve().parent
    out = []
    for s in samples:
        if s.frames_dir is not None and not Path(s.frames_dir).is_absolute():
            s = dataclasses.replace(s, frames_dir=str(base / s.frames_dir))
        out.append(s)
    return out


# ---------------------------------------------------------------- ingest

def cmd_ingest_window(args: argparse.Namespace) -> int:
    samples = _load_samples(args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for s in samples:
        if s.frames_dir is None:
            written.append(s)
            continue
        files = ingest.list_frames(s.frames_dir)
        center = s.accident_frame if s.accident_frame is not None else len(files) // 2
        try:
            chosen, start = ingest.window_frames(files, center, int(args.window))
        except ingest.ClipTooShortError as exc:
            logger.warning("sample %s: %s", s.id, exc)
            chosen, start = files, 0
        dest = out / s.id
        dest.mkdir(parents=True, exist_ok=True)
        for i, src in enumerate(chosen):
            shutil.copyfile(src, dest / ingest.frame_filename(i, src.suffix.lower()))
        accident_frame = None if s.accident_frame is None else s.accident_frame - start
        written.append(
            dataclasses.replace(
                s, frames_dir=s.id, frame_count=len(chosen), fps=INGEST_FPS, accident_frame=accident_frame
            )
        )
    save_manifest(written, out / "manifest.jsonl", _header(args.manifest))
    print(f"windowed {len(written)} samples into {out}")
    return EXIT_OK


def _header(path: str) -> dict[str, Any]:
    header = read_header(path) or {}
    return {k: v for k, v in header.items() if k != "schema"}


def cmd_ingest_overlay(args: argparse.Namespace) -> int:
    samples = _load_samples(args.manifest)
    manifest = Path(args.manifest)
    out = Path(args.out) if args.out else manifest.parent / f"{manifest.stem}_overlaid"
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for s in samples:
        if s.frames_dir is None:
            written.append(s)
            continue
        dest = out / s.id
        dest.mkdir(parents=True, exist_ok=True)
        for src in ingest.list_frames(s.frames_dir):
            frame = ingest.overlay_frame_index(ingest.load_frame(src), int(src.stem))
            ingest.save_frame(frame, dest / ingest.frame_filename(int(src.stem), ".png"))
        written.append(dataclasses.replace(s, frames_dir=s.id))
    save_manifest(written, out / "manifest.jsonl", _header(args.manifest))
    print(f"overlaid frame indices for {len(written)} samples into {out}")
    return EXIT_OK


def cmd_ingest_validate(args: argparse.Namespace) -> int:
    report = ingest.validate_manifest(_existing(args.manifest, "manifest"))
    text = json.dumps(report.to_json(), sort_keys=True, indent=2) + "\n"
    if args.report:
        Path(args.report).write_text(text, encoding="utf-8")
    print(
        f"total {report.total}  accident {report.accident}  non-accident {report.non_accident}  "
        f"qa pairs {report.qa_pairs}  violations {len(report.violations)}"
    )
    for warning in report.warnings:
        print(f"warning: {warning}")
    return EXIT_OK


# ---------------------------------------------------------------- rag

def cmd_rag_build(args: argparse.Namespace) -> int:
    clauses = rag.load_clauses(_existing(args.clauses, "clauses file"))
    embedder = make_embedder(args.embed, dim=int(args.embed_dim))
    index = rag.build_index(clauses, embedder)
    rag.save_index(index, args.out)
    print(f"indexed {len(index)} clauses ({index.fingerprint}) into {args.out}")
    return EXIT_OK


def cmd_rag_query(args: argparse.Namespace) -> int:
    index = rag.load_index(_existing(args.index, "index"))
    embedder = make_embedder(args.embed, index.fingerprint)
    clauses, scores = rag.retrieve(args.text, index, embedder, k=int(args.k), tau=float(args.tau))
    for clause, score in zip(clauses, scores):
        print(f"{score:+.4f}  {clause.article_label}  {clause.text}")
    return EXIT_OK


# ---------------------------------------------------------------- run / evaluate / report

def cmd_run(args: argparse.Namespace) -> int:
    samples = _load_samples(args.manifest)
    if args.rag and not args.no_rag:
        index = rag.load_index(_existing(args.rag, "index"))
        embedder = make_embedder(args.embed, index.fingerprint)
    else:
        index, embedder = None, None
    prompts = PromptSet.load(_existing(args.prompts, "prompt file") if args.prompts else None)
    config = PipelineConfig(
        k=int(args.k),
        tau=float(args.tau),
        use_rag=not args.no_rag,
        implicit_cot=bool(args.implicit_cot),
        seed=int(args.seed),
        prompts=prompts,
    )
    backend = make_backend(args.backend)
    results = run_batch(samples, backend, args.out, index, config, embedder, jobs=int(args.jobs), resume=args.resume)
    failed = [r for r in results if r.status == STATUS_FAILED]
    counts: dict[str, int] = {}
    for r in results:
        counts[r.status] = counts.get(r.status, 0) + 1
    print(f"ran {len(results)} samples: " + ", ".join(f"{k} {v}" for k, v in sorted(counts.items())))
    if failed:
        print(f"{len(failed)} samples failed; first error: {failed[0].error}", file=sys.stderr)
        return EXIT_BACKEND
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace) -> int:
    samples = _load_samples(args.manifest)
    predictions = read_jsonl(_existing(args.predictions, "predictions file"))
    judge = make_backend(args.judge) if args.judge else None
    embed = make_embedder(args.embed).embed if args.embed else None
    report = evaluate(predictions, samples, judge=judge, embed=embed)
    Path(args.out).write_text(report.dumps(), encoding="utf-8")
    print(render_table(report), end="")
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    run_dir = _existing(args.run_dir, "run directory")
    path = Path(args.report) if args.report else run_dir / REPORT_FILE
    report = MetricReport.from_json(json.loads(_existing(path, "report file").read_text(encoding="utf-8")))
    if args.format == "json":
        sys.stdout.write(report.dumps())
    else:
        sys.stdout.write(render_table(report, column=run_dir.name or "run"))
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tara-forge", description="Traffic accident responsibility allocation toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    def common(p: argparse.ArgumentParser) -> argparse.ArgumentParser:
        p.add_argument("--config", help="TOML file of default flag values")
        return p

    ing = sub.add_parser("ingest", help="prepare frames and manifests")
    ing_sub = ing.add_subparsers(dest="action", metavar="ACTION", parser_class=_Parser)
    p = common(ing_sub.add_parser("window", help="cut 40-frame windows around the accident frame"))
    p.add_argument("--manifest", help="input manifest (JSONL)")
    p.add_argument("--out", help="output directory for windowed frames and manifest")
    p.add_argument("--window", type=int, help="frames per window (default 40)")
    p.set_defaults(func=cmd_ingest_window, required=("manifest", "out"))
    p = common(ing_sub.add_parser("overlay", help="stamp frame indices in the bottom-right corner"))
    p.add_argument("--manifest", help="input manifest (JSONL)")
    p.add_argument("--out", help="output directory (default: <manifest>_overlaid)")
    p.set_defaults(func=cmd_ingest_overlay, required=("manifest",))
    p = common(ing_sub.add_parser("validate", help="count samples and report invariant violations"))
    p.add_argument("--manifest", help="manifest to check")
    p.add_argument("--report", help="write the statistics report as JSON here")
    p.set_defaults(func=cmd_ingest_validate, required=("manifest",))

    rg = sub.add_parser("rag", help="build or query the legal-clause index")
    rg_sub = rg.add_subparsers(dest="action", metavar="ACTION", parser_class=_Parser)
    p = common(rg_sub.add_parser("build", help="embed clauses into an index directory"))
    p.add_argument("--clauses", help="clauses JSONL (clause_id, article_label, text)")
    p.add_argument("--out", help="index directory")
    p.add_argument("--embed", help="embedding backend TOML (default: offline hash embedder)")
    p.add_argument("--embed-dim", type=int, help="hash embedder dimension (default 64)")
    p.set_defaults(func=cmd_rag_build, required=("clauses", "out"))
    p = common(rg_sub.add_parser("query", help="show the top-K clauses for a text"))
    p.add_argument("--index", help="index directory")
    p.add_argument("--text", help="query text")
    p.add_argument("--k", type=int, help="number of clauses (default 3)")
    p.add_argument("--tau", type=float, help="similarity temperature (default 1.0)")
    p.add_argument("--embed", help="embedding backend TOML")
    p.set_defaults(func=cmd_rag_query, required=("index", "text"))

    p = common(sub.add_parser("run", help="run the staged dialogue over a manifest"))
    p.add_argument("--manifest", help="input manifest (JSONL)")
    p.add_argument("--backend", help="chat backend TOML (HTTP settings or mock script)")
    p.add_argument("--rag", help="clause index directory")
    p.add_argument("--embed", help="embedding backend TOML for retrieval queries")
    p.add_argument("--out", help="run directory for transcripts.jsonl and predictions.jsonl")
    p.add_argument("--prompts", help="prompt template JSON (default: bundled v1)")
    p.add_argument("--implicit-cot", action="store_true", default=None, help="ask everything in one turn")
    p.add_argument("--no-rag", action="store_true", default=None, help="disable clause retrieval")
    p.add_argument("--k", type=int, help="clauses retrieved (default 3)")
    p.add_argument("--tau", type=float, help="similarity temperature (default 1.0)")
    p.add_argument("--seed", type=int, help="seed for frame subsampling (default 0)")
    p.add_argument("--jobs", type=int, help="samples processed in parallel (default 4)")
    p.add_argument("--resume", action="store_true", default=None, help="skip samples already predicted")
    p.set_defaults(func=cmd_run, required=("manifest", "out"))

    p = common(sub.add_parser("evaluate", help="score predictions against manifest labels"))
    p.add_argument("--predictions", help="predictions JSONL")
    p.add_argument("--manifest", help="manifest with labels")
    p.add_argument("--out", help="report JSON path")
    p.add_argument("--judge", help="judge backend TOML (enables GPTEval)")
    p.add_argument("--embed", help="embedding backend TOML (enables BERTScore and MoverScore)")
    p.set_defaults(func=cmd_evaluate, required=("predictions", "manifest", "out"))

    p = common(sub.add_parser("report", help="print a run's scores as a table or JSON"))
    p.add_argument("run_dir", help="run directory containing report.json")
    p.add_argument("--report", help="report file (default: RUN_DIR/report.json)")
    p.add_argument("--format", choices=("table", "json"), help="output format (default table)")
    p.set_defaults(func=cmd_report, required=())
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.verbose:
            logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
        if not hasattr(args, "func"):
            parser.print_help(sys.stderr)
            return EXIT_USER
        args = _resolve(args)
        for flag in args.required:
            if getattr(args, flag, None) is None:
                raise UserError(f"--{flag.replace('_', '-')} is required")
        for flag in ("implicit_cot", "no_rag", "resume"):
            if hasattr(args, flag):
                setattr(args, flag, bool(getattr(args, flag)))
        return args.func(args)
    except UserError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except (ManifestError, ValueError, KeyError, tomllib.TOMLDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except (BackendError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_BACKEND


if __name__ == "__main__":
    sys.exit(main())

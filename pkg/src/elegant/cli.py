"""Command-line front end: generation, evaluation, statistics, curve export.

Exit codes: 0 success, 1 usage, 2 validation, 3 backend failure, 4 IO.
Secrets travel only through ELEGANT_<ROLE>_TOKEN environment variables;
flags override manifest values, which override environment and defaults.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

from . import eclipse as eclipse_mod
from .backends import BackendConfig, FixtureStore, Role, build_backends
from .closedset import (
    EvalInstance,
    MatchMode,
    diversity_stats,
    evaluate_closed_set,
    load_vocab,
)
from .errors import BackendError, ElegantError, SchemaError, ValidationError
from .ingest import (
    AnnotatedImage,
    load_annotations,
    persist_results,
    read_graphs,
    write_json,
)
from .pipeline import (
    GenerationAbort,
    Pipeline,
    ProposalMode,
    SubjectSpec,
    build_vqa_prompt,
)
from .raster import ImageRef
from .scene import LocalSceneGraph

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_BACKEND = 3
EXIT_IO = 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        raise UsageError(message)


@dataclass
class CliConfig:
    """Fully resolved run configuration; persisted verbatim with the run."""

    mode: str = "open"
    vocab: str | None = None
    parallelism: int = 4
    coca_enabled: bool = True
    calibration_route: str = "thinker"
    coca_confidence: float = 0.5
    alphas: tuple[float, ...] = (0.01,)
    ks: tuple[int, ...] = (10, 20, 50)
    backends: dict[str, BackendConfig] = field(default_factory=dict)
    mock_fixtures: str | None = None
    annotations: str | None = None
    images: tuple[Mapping[str, Any], ...] = ()
    subjects: Any = "all"
    out_dir: str = "."
    manifest_bytes: bytes | None = None

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "mode": self.mode,
            "vocab": self.vocab,
            "parallelism": self.parallelism,
            "coca_enabled": self.coca_enabled,
            "calibration_route": self.calibration_route,
            "coca_confidence": self.coca_confidence,
            "alphas": list(self.alphas),
            "ks": list(self.ks),
            "backends": {role: cfg.to_json_dict() for role, cfg in sorted(self.backends.items())},
            "mock_fixtures": self.mock_fixtures,
            "annotations": self.annotations,
            "images": [dict(i) for i in self.images],
            "subjects": self.subjects,
            "out_dir": self.out_dir,
        }


def _parse_mode(mode: str) -> tuple[str, str | None]:
    """Split a mode string into (generation kind, vocab id)."""
    if mode == "open":
        return "open", None
    if mode == "gt-boxes":
        return "gt-boxes", None
    if mode.startswith("closed:"):
        vocab_id = mode.split(":", 1)[1]
        if not vocab_id:
            raise ValidationError("closed mode needs a vocab id, e.g. closed:visualds20")
        return "closed", vocab_id
    raise ValidationError(f"unknown mode {mode!r} (expected open, closed:<vocab>, gt-boxes)")


def resolve_config(args: argparse.Namespace, env: Mapping[str, str]) -> CliConfig:
    """Merge flags over the manifest/config file over environment defaults."""
    manifest: dict[str, Any] = {}
    manifest_bytes = None
    if getattr(args, "config", None):
        manifest_bytes = Path(args.config).read_bytes()
        manifest = json.loads(manifest_bytes.decode("utf-8"))
        if not isinstance(manifest, dict):
            raise SchemaError("config file must hold a JSON object")

    config = CliConfig()
    if "ELEGANT_PARALLELISM" in env:
        config.parallelism = int(env["ELEGANT_PARALLELISM"])
    config.mode = manifest.get("mode", config.mode)
    config.vocab = manifest.get("vocab", config.vocab)
    config.parallelism = int(manifest.get("parallelism", config.parallelism))
    config.coca_enabled = bool(manifest.get("coca_enabled", config.coca_enabled))
    config.calibration_route = manifest.get("calibration_route", config.calibration_route)
    config.coca_confidence = float(manifest.get("coca_confidence", config.coca_confidence))
    if manifest.get("alpha") is not None:
        raw_alpha = manifest["alpha"]
        config.alphas = tuple(raw_alpha) if isinstance(raw_alpha, list) else (float(raw_alpha),)
    if manifest.get("k") is not None:
        raw_k = manifest["k"]
        config.ks = tuple(int(k) for k in raw_k) if isinstance(raw_k, list) else (int(raw_k),)
    config.mock_fixtures = manifest.get("mock_fixtures", config.mock_fixtures)
    config.annotations = manifest.get("annotations", config.annotations)
    config.images = tuple(manifest.get("images", ()))
    config.subjects = manifest.get("subjects", config.subjects)
    for role_name, raw in manifest.get("backends", {}).items():
        config.backends[role_name] = BackendConfig.from_json_dict(raw)

    if getattr(args, "mode", None):
        config.mode = args.mode
    if getattr(args, "vocab", None):
        config.vocab = args.vocab
    if getattr(args, "parallelism", None):
        config.parallelism = args.parallelism
    if getattr(args, "alpha", None):
        config.alphas = tuple(args.alpha)
    if getattr(args, "k", None):
        config.ks = tuple(args.k)
    if getattr(args, "mock_fixtures", None):
        config.mock_fixtures = args.mock_fixtures
    if getattr(args, "annotations", None):
        config.annotations = args.annotations
    if getattr(args, "out_dir", None):
        config.out_dir = args.out_dir
    if getattr(args, "no_coca", False):
        config.coca_enabled = False
    for role in Role:
        url = getattr(args, f"backend_{role.value}_url", None)
        if url:
            base = config.backends.get(role.value, BackendConfig())
            config.backends[role.value] = BackendConfig(
                mode="live",
                endpoint=url,
                timeout=base.timeout,
                max_retries=base.max_retries,
                backoff_base=base.backoff_base,
                token_env=base.token_env,
            )

    kind, mode_vocab = _parse_mode(config.mode)
    if kind == "closed" and config.vocab is None:
        config.vocab = mode_vocab
    config.manifest_bytes = manifest_bytes
    return config


def _build_backends(config: CliConfig, env: Mapping[str, str], required_roles: Sequence[str]):
    """Build the role clients; only roles the command uses demand fixtures."""
    required_mock = any(
        config.backends.get(role, BackendConfig()).mode == "mock" for role in required_roles
    )
    if config.mock_fixtures is not None:
        fixtures = FixtureStore.from_file(config.mock_fixtures)
    elif required_mock:
        raise ValidationError("mock backends configured but no --mock-fixtures given")
    else:
        fixtures = FixtureStore.from_obj([])
    return build_backends(config.backends, fixtures, env)


def _images_from_config(config: CliConfig) -> tuple[list[ImageRef], list[AnnotatedImage]]:
    annotations: list[AnnotatedImage] = []
    images: list[ImageRef] = []
    if config.annotations:
        annotations = load_annotations(config.annotations)
        for record in annotations:
            images.append(
                ImageRef(
                    image_id=record.image_id,
                    width=record.width,
                    height=record.height,
                    uri=record.uri,
                )
            )
    elif config.images:
        for item in config.images:
            images.append(
                ImageRef(
                    image_id=str(item["image_id"]),
                    width=int(item["width"]),
                    height=int(item["height"]),
                    uri=item.get("uri"),
                )
            )
    else:
        raise ValidationError("no image sources: provide annotations or an images list")
    return images, annotations


def cmd_generate(args: argparse.Namespace, env: Mapping[str, str]) -> int:
    config = resolve_config(args, env)
    kind, _ = _parse_mode(config.mode)
    required = ["thinker", "verifier"] + (["observer"] if kind == "open" else [])
    backends = _build_backends(config, env, required)
    if kind == "closed":
        proposal = ProposalMode(kind="closed", vocab=load_vocab(config.vocab))
    else:
        proposal = ProposalMode(kind="open")
    pipeline = Pipeline(
        backends,
        proposal,
        coca_enabled=config.coca_enabled,
        calibration_route=config.calibration_route,
        coca_confidence=config.coca_confidence,
        parallelism=config.parallelism,
    )
    images, annotations = _images_from_config(config)
    use_gt_entities = kind in ("closed", "gt-boxes")
    if use_gt_entities and not annotations:
        raise ValidationError(f"mode {config.mode!r} requires ground-truth annotations")
    entities_by_image = {a.image_id: a.entities for a in annotations}

    graph_rows: list[dict[str, Any]] = []
    trace_rows: list[dict[str, Any]] = []
    failures: list[dict[str, Any]] = []
    subject_specs = _subject_specs(config)

    def record_local(image_id: str, local) -> None:
        graph_rows.append(local.graph.to_json_dict())
        for trace in local.traces:
            trace_rows.append(
                {
                    "image_id": image_id,
                    "subject_id": local.graph.subject.id,
                    **trace.to_json_dict(),
                }
            )

    try:
        for image in images:
            entities = entities_by_image.get(image.image_id) if use_gt_entities else None
            if subject_specs == "all":
                result = pipeline.generate_global(image, entities=entities)
                for local in result.locals:
                    record_local(image.image_id, local)
                for failure in result.failures:
                    failures.append({"image_id": image.image_id, **failure.to_json_dict()})
            else:
                for spec in subject_specs.get(image.image_id, []):
                    local = pipeline.generate_local(image, spec, entities=entities)
                    record_local(image.image_id, local)
    except (GenerationAbort, BackendError) as exc:
        # persist whatever completed, without the index; the run is not done
        if isinstance(exc, GenerationAbort):
            for trace in exc.partial_traces:
                trace_rows.append({"image_id": image.image_id, **trace.to_json_dict()})
        failures.append(
            {"image_id": image.image_id, "error_type": type(exc).__name__, "message": str(exc)}
        )
        persist_results(
            graph_rows,
            trace_rows,
            {"failures.json": failures},
            config.out_dir,
            manifest_bytes=config.manifest_bytes,
            config=config.to_json_dict(),
            complete=False,
        )
        print(f"backend failure: {exc}", file=sys.stderr)
        return EXIT_BACKEND

    record = persist_results(
        graph_rows,
        trace_rows,
        {"failures.json": failures},
        config.out_dir,
        manifest_bytes=config.manifest_bytes,
        config=config.to_json_dict(),
    )
    print(f"run {record.run_id}: {len(graph_rows)} graphs, {len(trace_rows)} traces")
    return EXIT_OK


def _subject_specs(config: CliConfig) -> Any:
    if config.subjects == "all":
        return "all"
    specs: dict[str, list[SubjectSpec]] = {}
    for item in config.subjects:
        specs.setdefault(str(item["image_id"]), []).append(SubjectSpec.from_json_dict(item))
    return specs


def _load_graphs(path: str) -> list[LocalSceneGraph]:
    graphs = read_graphs(path)
    if not graphs:
        raise ValidationError(f"no graphs found in {path}")
    return graphs


def cmd_eval_open(args: argparse.Namespace, env: Mapping[str, str]) -> int:
    config = resolve_config(args, env)
    graphs = _load_graphs(args.graphs)
    images, _ = _images_from_config(config)
    images_by_id = {i.image_id: i.with_pixels() for i in images}
    backends = _build_backends(config, env, ["embedder"])
    scored = eclipse_mod.score_graphs(
        graphs, images_by_id, backends.embedder, parallelism=config.parallelism
    )
    scores_by_graph = {
        key: [s.clip_score for s in scores] for key, scores in scored.items()
    }
    reports = eclipse_mod.eclipse_report(
        graphs, scores_by_graph, config.alphas, granularity=args.granularity
    )
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_json(out_dir / "eclipse_report.json", reports)
    for report in reports:
        print(f"alpha={report['alpha']}: dataset ECLIPSE {report['dataset_eclipse']:.4f}")
    return EXIT_OK


def cmd_eval_closed(args: argparse.Namespace, env: Mapping[str, str]) -> int:
    config = resolve_config(args, env)
    graphs = _load_graphs(args.graphs)
    if not config.annotations:
        raise ValidationError("eval-closed requires --annotations with ground truths")
    annotations = load_annotations(config.annotations)
    vocab = load_vocab(config.vocab or "visualds20")
    mode = MatchMode(kind=args.match_mode, iou_threshold=args.iou_threshold)

    by_image: dict[str, list[LocalSceneGraph]] = {}
    for graph in graphs:
        by_image.setdefault(graph.image_id, []).append(graph)
    instances = []
    for record in annotations:
        image_graphs = by_image.get(record.image_id, [])
        predictions: list[Any] = []
        entities: dict[str, Any] = {}
        for graph in image_graphs:
            predictions.extend(graph.relations)
            entities.update(graph.entity_map())
        instances.append(
            EvalInstance(
                image_id=record.image_id,
                predictions=tuple(predictions),
                entities=entities,
                gts=record.gt_triplets,
            )
        )
    report = evaluate_closed_set(instances, config.ks, vocab, mode)
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_json(out_dir / "recall_report.json", report)
    if args.csv:
        _write_recall_csv(out_dir / args.csv, report, config.ks)
    for k in config.ks:
        recall = report["recall"][str(k)]
        mean_recall = report["mean_recall"][str(k)]
        recall_text = "n/a" if recall is None else f"{recall:.2f}"
        mean_text = "n/a" if mean_recall is None else f"{mean_recall:.2f}"
        print(f"R@{k} {recall_text}  mR@{k} {mean_text}")
    return EXIT_OK


def _write_recall_csv(path: Path, report: Mapping[str, Any], ks: Sequence[int]) -> None:
    lines = ["k,recall,mean_recall"]
    for k in ks:
        lines.append(
            f"{k},{report['recall'][str(k)]},{report['mean_recall'][str(k)]}"
        )
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def cmd_stats(args: argparse.Namespace, _env: Mapping[str, str]) -> int:
    graphs = _load_graphs(args.graphs)
    triples = []
    for graph in graphs:
        entity_map = graph.entity_map()
        for relation in graph.relations:
            triples.append(
                (
                    graph.subject.label,
                    relation.predicate,
                    entity_map[relation.object_id].label,
                )
            )
    stats = diversity_stats(triples).to_json_dict()
    stats["triplets_total"] = len(triples)
    if args.out:
        write_json(Path(args.out), stats)
    print(json.dumps(stats, sort_keys=True))
    return EXIT_OK


def cmd_penalty_curve(args: argparse.Namespace, _env: Mapping[str, str]) -> int:
    params = eclipse_mod.PenaltyParams(m_star=args.m_star, alpha=args.alpha_value)
    points = eclipse_mod.penalty_curve(params, args.x_min, args.x_max, args.steps)
    lines = ["x,penalty"] + [f"{x!r},{p!r}" for x, p in points]
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_vqa_prompt(args: argparse.Namespace, _env: Mapping[str, str]) -> int:
    graphs = _load_graphs(args.graphs)
    if args.image_id:
        graphs = [g for g in graphs if g.image_id == args.image_id]
    print(build_vqa_prompt(args.question, graphs))
    return EXIT_OK


def _add_backend_flags(parser: argparse.ArgumentParser) -> None:
    for role in Role:
        parser.add_argument(
            f"--backend-{role.value}-url",
            dest=f"backend_{role.value}_url",
            help=f"live endpoint base URL for the {role.value}",
        )
    parser.add_argument("--mock-fixtures", help="fixture file for mock backends")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="elegant", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    generate = sub.add_parser("generate", help="run the pipeline per a manifest")
    generate.add_argument("--config", required=True, help="run manifest (JSON)")
    generate.add_argument("--mode", help="open | closed:<vocab> | gt-boxes")
    generate.add_argument("--vocab", help="relation vocabulary id")
    generate.add_argument("--parallelism", type=int)
    generate.add_argument("--no-coca", action="store_true", help="disable the rescue path")
    generate.add_argument("--out-dir", required=True)
    _add_backend_flags(generate)
    generate.set_defaults(func=cmd_generate)

    eval_open = sub.add_parser("eval-open", help="score graphs with the open-ended metric")
    eval_open.add_argument("--graphs", required=True)
    eval_open.add_argument("--annotations", required=True, help="image sources (canonical JSON)")
    eval_open.add_argument("--alpha", type=float, action="append")
    eval_open.add_argument("--granularity", choices=("local", "image"), default="local")
    eval_open.add_argument("--parallelism", type=int)
    eval_open.add_argument("--out-dir", required=True)
    _add_backend_flags(eval_open)
    eval_open.set_defaults(func=cmd_eval_open)

    eval_closed = sub.add_parser("eval-closed", help="closed-set recall evaluation")
    eval_closed.add_argument("--graphs", required=True)
    eval_closed.add_argument("--annotations", required=True)
    eval_closed.add_argument("--vocab", default="visualds20")
    eval_closed.add_argument("--k", type=int, action="append")
    eval_closed.add_argument("--match-mode", choices=("gt_boxes", "detected"), default="gt_boxes")
    eval_closed.add_argument("--iou-threshold", type=float, default=0.5)
    eval_closed.add_argument("--csv", help="also write a CSV table with this filename")
    eval_closed.add_argument("--out-dir", required=True)
    eval_closed.set_defaults(func=cmd_eval_closed)

    stats = sub.add_parser("stats", help="diversity statistics over generated graphs")
    stats.add_argument("--graphs", required=True)
    stats.add_argument("--out")
    stats.set_defaults(func=cmd_stats)

    curve = sub.add_parser("penalty-curve", help="export the penalty curve as CSV")
    curve.add_argument("--m-star", type=float, required=True)
    curve.add_argument("--alpha", dest="alpha_value", type=float, default=0.01)
    curve.add_argument("--x-min", type=float, default=1.0 + 1e-6)
    curve.add_argument("--x-max", type=float, required=True)
    curve.add_argument("--steps", type=int, default=200)
    curve.add_argument("--out")
    curve.set_defaults(func=cmd_penalty_curve)

    vqa = sub.add_parser("vqa-prompt", help="render a VQA prompt from graphs")
    vqa.add_argument("--graphs", required=True)
    vqa.add_argument("--question", required=True)
    vqa.add_argument("--image-id")
    vqa.set_defaults(func=cmd_vqa_prompt)

    return parser


def run_cli(argv: Sequence[str] | None = None, env: Mapping[str, str] | None = None) -> int:
    env = os.environ if env is None else env
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args, env)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    except BackendError as exc:
        print(f"backend failure: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except (ValidationError, SchemaError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except ElegantError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO


def main() -> None:
    sys.exit(run_cli())

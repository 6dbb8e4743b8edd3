"""Command-line entry point.

Verbs mirror the pipeline stages: synth -> ingest -> graphgen -> train ->
eval / embed / attribute / report. All of them read the same flat config
(``--config``), plus ``--set key=value`` overrides; ``--dump-config`` prints
the effective configuration and exits.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import config as cfgmod
from .attribution import attribution_csv, gatt_attribute, render_attribution
from .config import Config, ConfigError
from .data import DatasetManifest, GraphStore, IngestError, generate_synthetic_dataset, ingest
from .evalkit import EvalReport, evaluate, extract_embeddings
from .fusion import save_records
from .kernels import BACKEND
from .pipeline import (
    GraphGenSummary,
    ReplayLVLMClient,
    ReplayRepairClient,
    graphgen,
    render_risk_report,
    risk_report,
)
from .scenegraph import ParseFailure
from .trainkit import IdentityOverlap, load_checkpoint, prepare_graph, train

logger = logging.getLogger(__name__)

_USER_ERRORS = (
    ConfigError,
    IngestError,
    IdentityOverlap,
    ParseFailure,
    FileNotFoundError,
    KeyError,
    ValueError,
)


def _load_manifest(cfg: Config, override: str | None) -> DatasetManifest:
    candidates = (
        [Path(override)]
        if override
        else [Path(cfg.workdir) / "manifest.json", Path(cfg.dataset_root) / "manifest.json"]
    )
    for path in candidates:
        if path.exists():
            return DatasetManifest.load(path)
    raise FileNotFoundError(
        f"no manifest found (looked at {', '.join(str(p) for p in candidates)}); "
        "run 'sgreid ingest' or 'sgreid synth' first"
    )


def _latest_checkpoint(cfg: Config, override: str | None) -> Path:
    if override:
        return Path(override)
    ckpt_root = Path(cfg.workdir) / "ckpt"
    epochs = sorted(
        (p for p in ckpt_root.glob("epoch_*") if p.is_dir()),
        key=lambda p: int(p.name.split("_")[1]),
    )
    if not epochs:
        raise FileNotFoundError(f"no checkpoints under {ckpt_root}; run 'sgreid train'")
    return epochs[-1]


def _print_summary(summary: GraphGenSummary) -> None:
    print(
        f"graphs: {summary.total} total, {summary.cached} cached, "
        f"{summary.parsed_direct} parsed, {summary.repaired_rule} rule-repaired, "
        f"{summary.repaired_llm} llm-repaired, {summary.dropped} dropped"
    )


def _print_metrics(report: EvalReport) -> None:
    tag = "re-ranked" if report.reranked else "plain"
    print(
        f"{report.source_dataset} -> {report.target_dataset} ({tag}): "
        f"R@1 {report.rank1:.4f}  R@5 {report.rank5:.4f}  mAP {report.mean_ap:.4f}  "
        f"({report.num_valid_queries} queries, {report.num_gallery} gallery, "
        f"{report.num_dropped_queries} dropped)"
    )


# ---------------------------------------------------------------------------
# Verbs


def cmd_synth(cfg: Config, args: argparse.Namespace) -> int:
    manifest = generate_synthetic_dataset(
        cfg.dataset_root,
        n_train_ids=cfg.synth_train_ids,
        n_test_ids=cfg.synth_test_ids,
        images_per_id=cfg.synth_images_per_id,
        queries_per_id=cfg.synth_queries_per_id,
        seed=cfg.synth_seed,
    )
    counts = manifest.counts()
    print(
        f"synthetic dataset at {cfg.dataset_root}: "
        f"train {counts['train']}, query {counts['query']}, gallery {counts['gallery']}"
    )
    return 0


def cmd_ingest(cfg: Config, args: argparse.Namespace) -> int:
    manifest = ingest(cfg.dataset_root, cfg.dataset_kind)
    manifest.name = cfgmod.dataset_name(cfg)
    manifest.graph_store_path = str(cfgmod.graph_store_path(cfg))
    out = Path(cfg.workdir)
    out.mkdir(parents=True, exist_ok=True)
    manifest.save(out / "manifest.json")
    counts = manifest.counts()
    print(
        f"ingested {manifest.name}: train {counts['train']} "
        f"({manifest.num_train_identities} ids), query {counts['query']}, "
        f"gallery {counts['gallery']} -> {out / 'manifest.json'}"
    )
    return 0


def cmd_graphgen(cfg: Config, args: argparse.Namespace) -> int:
    manifest = _load_manifest(cfg, args.manifest)
    if not cfg.lvlm_fixture_dir:
        raise ConfigError("graphgen needs lvlm_fixture_dir in the config")
    client = ReplayLVLMClient(cfg.lvlm_fixture_dir)
    repair = (
        ReplayRepairClient(cfg.repair_fixture_dir)
        if cfg.repair_mode == "replay"
        else None
    )
    store = GraphStore(manifest.graph_store_path or cfgmod.graph_store_path(cfg))
    summary = graphgen(manifest, client, store, repair_client=repair)
    _print_summary(summary)
    return 0


def cmd_train(cfg: Config, args: argparse.Namespace) -> int:
    manifest = _load_manifest(cfg, args.manifest)
    components = cfgmod.build_components(cfg)
    result = train(
        manifest,
        cfgmod.build_train_config(cfg),
        components,
        cfg.workdir,
        resume_from=args.resume,
    )
    print(
        f"trained {result.final_epoch} epochs "
        f"({result.steps_per_epoch} steps each) on kernel backend {BACKEND}"
    )
    print(f"checkpoint: {result.checkpoint_dir}")
    print(f"metrics:    {result.metrics_path}")
    return 0


def cmd_embed(cfg: Config, args: argparse.Namespace) -> int:
    manifest = _load_manifest(cfg, args.manifest)
    ckpt = load_checkpoint(_latest_checkpoint(cfg, args.checkpoint))
    components = cfgmod.build_components(cfg)
    records = extract_embeddings(ckpt, manifest.samples, components, cfg.eval_batch_size)
    out = Path(cfg.workdir) / "embeddings.npz"
    save_records(out, records)
    print(f"wrote {len(records)} embedding records to {out}")
    return 0


def cmd_eval(cfg: Config, args: argparse.Namespace) -> int:
    manifest = _load_manifest(cfg, args.manifest)
    ckpt = load_checkpoint(_latest_checkpoint(cfg, args.checkpoint))
    components = cfgmod.build_components(cfg)
    options = cfgmod.build_eval_options(
        cfg,
        cross_dataset=args.cross_dataset,
        rerank=False if args.no_rerank else None,
    )
    report = evaluate(ckpt, manifest, components, options)
    tag = "rerank" if report.reranked else "plain"
    out = Path(cfg.workdir) / "reports" / f"{report.target_dataset}-{tag}"
    report.save(out)
    _print_metrics(report)
    print(f"report: {out}")
    return 0


def _query_attributions(cfg, ckpt, manifest, components, image_ids):
    encoder = ckpt.model.encoder
    results = []
    for image_id in image_ids:
        graph = prepare_graph(
            components.graph_store.get(image_id),
            components.embed_client,
            strict_person=components.strict_person,
        )
        results.append(gatt_attribute(encoder, graph))
    return results


def cmd_attribute(cfg: Config, args: argparse.Namespace) -> int:
    manifest = _load_manifest(cfg, args.manifest)
    ckpt = load_checkpoint(_latest_checkpoint(cfg, args.checkpoint))
    components = cfgmod.build_components(cfg)
    image_ids = args.images or [
        s.image_id for s in manifest.split_samples("query")[: args.limit]
    ]
    if not image_ids:
        raise ValueError("no query images to attribute")
    out_dir = Path(cfg.workdir) / "attributions"
    out_dir.mkdir(parents=True, exist_ok=True)
    for image_id, result in zip(
        image_ids, _query_attributions(cfg, ckpt, manifest, components, image_ids)
    ):
        print(render_attribution(result), end="")
        (out_dir / f"{image_id}.csv").write_text(
            attribution_csv(result), encoding="utf-8"
        )
        print()
    print(f"per-node CSVs under {out_dir}")
    return 0


def cmd_report(cfg: Config, args: argparse.Namespace) -> int:
    manifest = _load_manifest(cfg, args.manifest)
    ckpt = load_checkpoint(_latest_checkpoint(cfg, args.checkpoint))
    components = cfgmod.build_components(cfg)
    with_rr = evaluate(ckpt, manifest, components, cfgmod.build_eval_options(cfg, rerank=True))
    without_rr = evaluate(
        ckpt, manifest, components, cfgmod.build_eval_options(cfg, rerank=False)
    )
    cross_reports = []
    for path in args.cross_manifest or []:
        cross_manifest = DatasetManifest.load(path)
        cross_reports.append(
            evaluate(
                ckpt,
                cross_manifest,
                components,
                cfgmod.build_eval_options(cfg, cross_dataset=True),
            )
        )
    image_ids = [s.image_id for s in manifest.split_samples("query")[: args.limit]]
    attributions = _query_attributions(cfg, ckpt, manifest, components, image_ids)
    doc = risk_report(
        with_rr, attributions, baseline=without_rr, cross=cross_reports, top_k=args.top
    )
    out_dir = Path(cfg.workdir) / "reports"
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "risk_report.json").write_text(
        json.dumps(doc, indent=2) + "\n", encoding="utf-8"
    )
    text = render_risk_report(doc)
    (out_dir / "risk_report.txt").write_text(text, encoding="utf-8")
    print(text, end="")
    print(f"\nwritten to {out_dir / 'risk_report.json'} and .txt")
    return 0


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sgreid",
        description="Scene-graph person re-identification risk toolkit.",
    )
    parser.add_argument("--config", help="flat key = value config file")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override one config entry (repeatable)",
    )
    parser.add_argument(
        "--dump-config",
        action="store_true",
        help="print the effective configuration and exit",
    )
    parser.add_argument("-v", "--verbose", action="store_true")

    sub = parser.add_subparsers(dest="verb")

    sub.add_parser("synth", help="generate the seeded synthetic dataset")
    sub.add_parser("ingest", help="scan a dataset tree into a manifest")

    p = sub.add_parser("graphgen", help="generate scene graphs for a manifest")
    p.add_argument("--manifest")

    p = sub.add_parser("train", help="train the fusion model")
    p.add_argument("--manifest")
    p.add_argument("--resume", help="checkpoint directory to continue from")

    p = sub.add_parser("embed", help="export embedding records for all splits")
    p.add_argument("--manifest")
    p.add_argument("--checkpoint")

    p = sub.add_parser("eval", help="rank query against gallery")
    p.add_argument("--manifest")
    p.add_argument("--checkpoint")
    p.add_argument("--no-rerank", action="store_true")
    p.add_argument(
        "--cross-dataset",
        action="store_true",
        help="manifest comes from a different corpus than the checkpoint",
    )

    p = sub.add_parser("attribute", help="attention attribution for query graphs")
    p.add_argument("--manifest")
    p.add_argument("--checkpoint")
    p.add_argument("--images", nargs="*", help="specific image ids")
    p.add_argument("--limit", type=int, default=5)

    p = sub.add_parser("report", help="full risk report (metrics + attributions)")
    p.add_argument("--manifest")
    p.add_argument("--checkpoint")
    p.add_argument("--cross-manifest", action="append", help="manifest of another corpus")
    p.add_argument("--limit", type=int, default=8, help="queries to attribute")
    p.add_argument("--top", type=int, default=10, help="attribute shortlist length")
    return parser


_COMMANDS = {
    "synth": cmd_synth,
    "ingest": cmd_ingest,
    "graphgen": cmd_graphgen,
    "train": cmd_train,
    "embed": cmd_embed,
    "eval": cmd_eval,
    "attribute": cmd_attribute,
    "report": cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = cfgmod.load_config(args.config) if args.config else Config()
        cfg = cfgmod.apply_overrides(cfg, args.set)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.dump_config:
            print(cfgmod.dump_config(cfg), end="")
            return 0
        if not args.verb:
            parser.print_help()
            return 2
        return _COMMANDS[args.verb](cfg, args)
    except _USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())

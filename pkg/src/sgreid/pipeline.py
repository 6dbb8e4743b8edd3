"""End-to-end orchestration: scene-graph generation over a manifest (live or
replay clients, rule repair then model repair on failures), and the final
risk report combining retrieval metrics with attribution summaries.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

from .attribution import AttributionResult
from .data import DatasetManifest, GraphStore
from .evalkit import EvalReport
from .scenegraph import (
    ParseFailure,
    RepairClient,
    RepairFailed,
    RepairUnavailable,
    fix_malformed_json,
    llm_repair,
    parse_scene_graph,
)

logger = logging.getLogger(__name__)

GENERATION_PROMPT = (
    "Describe the detailed visual characteristics of the person in the photo "
    "that could be used to re-identify the person. Create a scene graph. Use "
    "the JSON format like in the example shown below and only output the JSON:\n"
    "{\n"
    '  "nodes": [\n'
    '    { "id": "person", "attributes": ["...", "...", "..."] },\n'
    '    { "id": "...", "attributes": ["...", "...", "..."] }\n'
    "  ],\n"
    '  "edges": [\n'
    '    { "source": "...", "target": "...", "relation": "..." },\n'
    '    { "source": "...", "target": "...", "relation": "..." }\n'
    "  ]\n"
    "}\n"
    "Ensure nodes, attributes, and edges are well-structured. Ensure that the "
    "JSON is valid, and do not output additional information. In the output, "
    "use only English language. Nodes consist of an id and an attributes "
    "list. Edges consist of a source, a target, and a relation. Use only up "
    "to 1000 tokens."
)


class ClientOutage(RuntimeError):
    """The generation client cannot answer right now; the run is resumable."""


class LVLMClient(Protocol):
    """Image-conditioned text generation."""

    def generate(self, prompt: str, image_id: str, image_path: str) -> str:
        """Return the model's raw text output; raise ClientOutage when the
        backing service or fixture cannot serve the request."""
        ...


class ReplayLVLMClient:
    """Serves recorded generations from a directory of <image_id>.txt files."""

    def __init__(self, root: str | Path):
        self.root = Path(root)

    def generate(self, prompt: str, image_id: str, image_path: str) -> str:
        path = self.root / f"{image_id}.txt"
        if not path.exists():
            raise ClientOutage(f"no recorded generation for image {image_id!r}")
        return path.read_text(encoding="utf-8")


class CallableLVLMClient:
    """Adapter for tests: wraps any (image_id) -> text function."""

    def __init__(self, fn):
        self.fn = fn

    def generate(self, prompt: str, image_id: str, image_path: str) -> str:
        return self.fn(image_id)


def _prompt_key(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()[:16]


class ReplayRepairClient:
    """Serves recorded repair completions keyed by prompt hash."""

    def __init__(self, root: str | Path):
        self.root = Path(root)

    def complete(self, prompt: str) -> str:
        path = self.root / f"{_prompt_key(prompt)}.json"
        if not path.exists():
            raise RepairUnavailable(f"no recorded repair for prompt key {path.stem}")
        return json.loads(path.read_text(encoding="utf-8"))["response"]


def save_repair_fixture(root: str | Path, prompt: str, response: str) -> Path:
    """Record one repair exchange so ReplayRepairClient can serve it later."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    path = root / f"{_prompt_key(prompt)}.json"
    path.write_text(
        json.dumps({"prompt_sha256_16": _prompt_key(prompt), "response": response}, indent=2),
        encoding="utf-8",
    )
    return path


# ---------------------------------------------------------------------------
# Graph generation


@dataclass
class GraphGenSummary:
    total: int = 0
    cached: int = 0
    parsed_direct: int = 0
    repaired_rule: int = 0
    repaired_llm: int = 0
    dropped: int = 0
    exclusions: list[dict] = field(default_factory=list)

    def to_document(self) -> dict:
        return {
            "total": self.total,
            "cached": self.cached,
            "parsed_direct": self.parsed_direct,
            "repaired_rule": self.repaired_rule,
            "repaired_llm": self.repaired_llm,
            "dropped": self.dropped,
            "exclusions": self.exclusions,
        }


def _progress_path(store: GraphStore) -> Path:
    # Sibling of the store directory so it never shadows a graph document.
    return store.root.parent / f"{store.root.name}_progress.json"


def graphgen(
    manifest: DatasetManifest,
    client: LVLMClient,
    store: GraphStore,
    repair_client: RepairClient | None = None,
    progress_path: str | Path | None = None,
) -> GraphGenSummary:
    """Produce one stored scene graph per manifest image.

    Already-stored ids are skipped, so re-running against a complete store
    makes no client calls and an interrupted run resumes where it stopped.
    Failures escalate parse -> rule repair -> model repair; graphs that still
    do not parse are excluded and listed in the progress file instead of
    aborting the run. A ClientOutage persists progress and propagates.
    """
    progress = Path(progress_path) if progress_path else _progress_path(store)
    summary = GraphGenSummary()

    def persist() -> None:
        progress.parent.mkdir(parents=True, exist_ok=True)
        progress.write_text(
            json.dumps(summary.to_document(), indent=2) + "\n", encoding="utf-8"
        )

    samples = sorted(manifest.samples, key=lambda s: s.image_id)
    summary.total = len(samples)
    for s in samples:
        if store.has(s.image_id):
            summary.cached += 1
            continue
        try:
            text = client.generate(GENERATION_PROMPT, s.image_id, s.image_path)
        except ClientOutage:
            persist()
            raise
        try:
            parse_scene_graph(text)
            store.put_text(s.image_id, text)
            summary.parsed_direct += 1
            continue
        except ParseFailure as direct_failure:
            failure = direct_failure
        outcome = fix_malformed_json(text)
        try:
            parse_scene_graph(outcome.repaired_text)
            store.put_text(s.image_id, outcome.repaired_text)
            summary.repaired_rule += 1
            logger.info(
                "repaired %s with rules %s", s.image_id, ",".join(outcome.rules_applied)
            )
            continue
        except ParseFailure as rule_failure:
            failure = rule_failure
        if repair_client is not None:
            try:
                outcome = llm_repair(text, repair_client)
                store.put_text(s.image_id, outcome.repaired_text)
                summary.repaired_llm += 1
                continue
            except (RepairUnavailable, RepairFailed) as exc:
                failure = exc
        summary.dropped += 1
        summary.exclusions.append({"image_id": s.image_id, "reason": str(failure)})
        logger.warning("excluding %s: %s", s.image_id, failure)

    repaired = summary.repaired_rule + summary.repaired_llm
    if summary.total:
        logger.info(
            "graphgen: %d/%d needed repair (%.4f%%), %d dropped",
            repaired,
            summary.total,
            100.0 * repaired / summary.total,
            summary.dropped,
        )
    persist()
    return summary


# ---------------------------------------------------------------------------
# Risk report


def _metrics_block(report: EvalReport) -> dict:
    return {
        "rank1": report.rank1,
        "rank5": report.rank5,
        "mean_ap": report.mean_ap,
        "reranked": report.reranked,
        "rerank_k1": report.rerank_k1,
        "rerank_k2": report.rerank_k2,
        "rerank_lambda": report.rerank_lambda,
        "num_valid_queries": report.num_valid_queries,
        "num_gallery": report.num_gallery,
    }


def risk_report(
    eval_report: EvalReport,
    attributions: Sequence[AttributionResult] = (),
    baseline: EvalReport | None = None,
    cross: Sequence[EvalReport] = (),
    top_k: int = 10,
) -> dict:
    """Re-identification risk summary for one evaluated dataset.

    Attribution results (typically over the query split) are aggregated into
    the strings that most drove retrieval toward the person node: the
    shortlist of describable features an anonymization pass should target.
    ``baseline`` is the same evaluation without re-ranking; ``cross`` holds
    transfer runs of the same checkpoint on other datasets.
    """
    doc: dict = {
        "checkpoint_dataset": eval_report.source_dataset,
        "dataset": eval_report.target_dataset,
        "metrics": _metrics_block(eval_report),
    }
    if baseline is not None:
        doc["baseline_metrics"] = _metrics_block(baseline)
        doc["rerank_gain"] = {
            "rank1": eval_report.rank1 - baseline.rank1,
            "rank5": eval_report.rank5 - baseline.rank5,
            "mean_ap": eval_report.mean_ap - baseline.mean_ap,
        }
    if cross:
        doc["cross_dataset"] = [
            {
                "dataset": r.target_dataset,
                "rank1": r.rank1,
                "rank5": r.rank5,
                "mean_ap": r.mean_ap,
                "rank1_delta": r.rank1 - eval_report.rank1,
                "mean_ap_delta": r.mean_ap - eval_report.mean_ap,
            }
            for r in cross
        ]

    totals: dict[str, float] = {}
    mentions: dict[str, int] = {}
    for res in attributions:
        labels = res.node_labels or res.node_ids
        for i, score in res.ranked_nodes():
            label = labels[i] if labels else str(i)
            totals[label] = totals.get(label, 0.0) + score
            mentions[label] = mentions.get(label, 0) + 1
    ranked = sorted(totals.items(), key=lambda kv: (-kv[1], kv[0]))[:top_k]
    doc["queries_attributed"] = len(attributions)
    doc["top_attributes"] = [
        {"label": label, "total_score": score, "mentions": mentions[label]}
        for label, score in ranked
    ]
    return doc


def render_risk_report(doc: dict) -> str:
    """Plain-text rendering of a risk_report document."""
    lines = [
        f"re-identification risk report: {doc['dataset']}",
        f"checkpoint trained on: {doc['checkpoint_dataset']}",
        "",
    ]

    def metrics_lines(title: str, block: dict) -> list[str]:
        out = [title]
        out.append(
            f"  R@1 {block['rank1']:.4f}  R@5 {block['rank5']:.4f}  "
            f"mAP {block['mean_ap']:.4f}"
        )
        if block.get("reranked"):
            out.append(
                f"  re-ranking: k1={block['rerank_k1']} k2={block['rerank_k2']} "
                f"lambda={block['rerank_lambda']:g}"
            )
        out.append(
            f"  queries {block['num_valid_queries']}  gallery {block['num_gallery']}"
        )
        return out

    lines += metrics_lines("metrics:", doc["metrics"])
    if "baseline_metrics" in doc:
        lines.append("")
        lines += metrics_lines("without re-ranking:", doc["baseline_metrics"])
        gain = doc["rerank_gain"]
        lines.append(
            f"  re-ranking gain: R@1 {gain['rank1']:+.4f}  mAP {gain['mean_ap']:+.4f}"
        )
    for row in doc.get("cross_dataset", []):
        lines.append("")
        lines.append(f"transfer to {row['dataset']}:")
        lines.append(
            f"  R@1 {row['rank1']:.4f} ({row['rank1_delta']:+.4f})  "
            f"mAP {row['mean_ap']:.4f} ({row['mean_ap_delta']:+.4f})"
        )
    lines.append("")
    if doc["top_attributes"]:
        lines.append(
            f"most re-identifying attributes "
            f"(over {doc['queries_attributed']} attributed queries):"
        )
        width = max(len(r["label"]) for r in doc["top_attributes"])
        for r in doc["top_attributes"]:
            lines.append(
                f"  {r['label']:<{width}}  score {r['total_score']:.6f}  "
                f"seen {r['mentions']}x"
            )
    else:
        lines.append("no attributions supplied; metrics-only report.")
    return "\n".join(lines) + "\n"

"""Textual scene graphs: parsing, rule-based and LLM-assisted repair, and the
graph rewrites that prepare a graph for message passing.

A scene-graph document is a JSON object of the form

    {"nodes": [{"id": "person", "attributes": ["short hair", ...]}, ...],
     "edges": [{"source": "person", "target": "handbag", "relation": "carrying"}, ...]}

Documents arrive as raw text from a vision-language generation service and are
occasionally wrapped in prose or code fences or carry small syntax defects.
``fix_malformed_json`` removes the known defect classes deterministically and
idempotently; ``llm_repair`` escalates the rare remainder to a language-model
repair client. ``expand_attributes`` turns per-node attribute strings into
first-class nodes, and ``reverse_flow`` orients relation edges so that messages
flow toward the described subject.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace
from typing import Protocol

ATTRIBUTE_RELATION = "has attribute"

# Order is part of the contract: new rules append only, so repaired corpora
# stay reproducible.
REPAIR_RULES = (
    "strip_wrapper",
    "remove_trailing_commas",
    "fix_escapes",
    "normalize_quotes",
    "restructure_edges",
    "dedupe_attributes",
)

REPAIR_PROMPT = """Fix the JSON graph.
Example format:
{
  "nodes": [
    { "id": "person", "attributes": ["..."] }
  ],
  "edges": [
    { "source": "...", "target": "...", "relation": "..." }
  ]
}
Requirements:
- keep attributes
- remove redundancies
- Nodes: id + attributes list
- Edges: source/target/relation
- Only use one word per node/source/target/attribute
- Output only the valid revised JSON, and no explanation or notes

Text: {graph}"""


class ParseFailure(ValueError):
    """Raised when text cannot be read as a scene-graph document.

    ``kind`` is "syntax" (not valid JSON) or "schema" (valid JSON, wrong
    shape); ``pos`` is a character offset for syntax failures.
    """

    def __init__(self, kind: str, reason: str, pos: int | None = None):
        self.kind = kind
        self.reason = reason
        self.pos = pos
        at = f" at char {pos}" if pos is not None else ""
        super().__init__(f"{kind}: {reason}{at}")


class RepairUnavailable(RuntimeError):
    """The repair client cannot serve this request (offline, no fixture)."""


class RepairFailed(RuntimeError):
    """The repair client answered but the result still does not parse."""


class DoubleReversal(ValueError):
    """reverse_flow was applied to an already-reversed graph."""


@dataclass
class SGNode:
    id: str
    attributes: list[str] = field(default_factory=list)
    # Attribute nodes carry the raw attribute string here; their id may have a
    # disambiguation suffix that must not leak into text embeddings.
    label: str | None = None

    @property
    def text(self) -> str:
        return self.label if self.label is not None else self.id


@dataclass
class SGEdge:
    source: str
    target: str
    relation: str
    # True for edges synthesized by expand_attributes; these are already in
    # message orientation (attribute -> owner) and are never flipped.
    from_attribute: bool = False


@dataclass
class SceneGraph:
    nodes: list[SGNode]
    edges: list[SGEdge]
    source_image_id: str = ""
    attributes_expanded: bool = False
    flow_reversed: bool = False

    def node_index(self) -> dict[str, int]:
        return {n.id: i for i, n in enumerate(self.nodes)}

    def to_document(self) -> dict:
        return {
            "nodes": [{"id": n.id, "attributes": list(n.attributes)} for n in self.nodes],
            "edges": [
                {"source": e.source, "target": e.target, "relation": e.relation}
                for e in self.edges
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_document(), indent=2, ensure_ascii=False)


class RepairClient(Protocol):
    def complete(self, prompt: str) -> str:
        """Return the model's completion for ``prompt``; raise
        RepairUnavailable when no answer can be produced."""
        ...


# ---------------------------------------------------------------------------
# Parsing


def parse_scene_graph(text: str, source_image_id: str = "") -> SceneGraph:
    """Parse raw generation output into a validated SceneGraph.

    Raises ParseFailure("syntax", ...) when the text is not JSON and
    ParseFailure("schema", ...) when the JSON does not satisfy the document
    schema (missing keys, wrong field types, duplicate node ids, dangling
    edge endpoints, or an empty node list).
    """
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseFailure("syntax", exc.msg, exc.pos) from None

    def schema(reason: str) -> ParseFailure:
        return ParseFailure("schema", reason)

    if not isinstance(obj, dict):
        raise schema("top level must be an object")
    if "nodes" not in obj:
        raise schema('missing "nodes"')
    if "edges" not in obj:
        raise schema('missing "edges"')
    if not isinstance(obj["nodes"], list):
        raise schema('"nodes" must be an array')
    if not isinstance(obj["edges"], list):
        raise schema('"edges" must be an array')

    nodes: list[SGNode] = []
    seen: set[str] = set()
    for i, raw in enumerate(obj["nodes"]):
        if not isinstance(raw, dict):
            raise schema(f"node {i} must be an object")
        nid = raw.get("id")
        if not isinstance(nid, str) or not nid:
            raise schema(f"node {i} needs a non-empty string id")
        if nid in seen:
            raise schema(f"duplicate node id {nid!r}")
        seen.add(nid)
        attrs_raw = raw.get("attributes", [])
        if not isinstance(attrs_raw, list):
            raise schema(f"node {nid!r}: attributes must be an array")
        attrs: list[str] = []
        for a in attrs_raw:
            if not isinstance(a, str):
                raise schema(f"node {nid!r}: attributes must be strings")
            if a and a not in attrs:
                attrs.append(a)
        nodes.append(SGNode(id=nid, attributes=attrs))

    if not nodes:
        raise schema("graph has no nodes")

    edges: list[SGEdge] = []
    for i, raw in enumerate(obj["edges"]):
        if not isinstance(raw, dict):
            raise schema(f"edge {i} must be an object")
        vals = {}
        for key in ("source", "target", "relation"):
            v = raw.get(key)
            if not isinstance(v, str) or not v:
                raise schema(f"edge {i} needs a non-empty string {key!r}")
            vals[key] = v
        for endpoint in ("source", "target"):
            if vals[endpoint] not in seen:
                raise schema(f"edge {i}: dangling endpoint {vals[endpoint]!r}")
        edges.append(SGEdge(**vals))

    return SceneGraph(nodes=nodes, edges=edges, source_image_id=source_image_id)


def _parses(text: str) -> bool:
    try:
        parse_scene_graph(text)
    except ParseFailure:
        return False
    return True


# ---------------------------------------------------------------------------
# Rule-based repair

_FENCE_RE = re.compile(r"```(?:[A-Za-z0-9_-]+)?\s*(.*?)```", re.DOTALL)
_TRAILING_COMMA_RE = re.compile(r",(\s*[}\]])")
# A backslash followed by anything that cannot start a JSON escape.
_BAD_ESCAPE_RE = re.compile(r'\\(.)', re.DOTALL)
_VALID_ESCAPE_HEADS = set('"\\/bfnrtu')
_SMART_QUOTES = {
    "“": '"',
    "”": '"',
    "‘": "'",
    "’": "'",
}
_EDGE_KEY_ALIASES = {
    "source": ("source", "src", "from", "subject", "start"),
    "target": ("target", "dst", "to", "object", "end"),
    "relation": ("relation", "relationship", "rel", "predicate", "label", "type"),
}


def _strip_wrapper(text: str) -> str:
    """Drop code fences and any prose before the first '{' / after the last '}'."""
    m = _FENCE_RE.search(text)
    if m:
        text = m.group(1)
    start = text.find("{")
    end = text.rfind("}")
    if start != -1 and end != -1 and start < end:
        text = text[start : end + 1]
    return text.strip()


def _remove_trailing_commas(text: str) -> str:
    while True:
        fixed = _TRAILING_COMMA_RE.sub(r"\1", text)
        if fixed == text:
            return fixed
        text = fixed


def _fix_escapes(text: str) -> str:
    def fix(m: re.Match) -> str:
        head = m.group(1)
        if head in _VALID_ESCAPE_HEADS:
            return m.group(0)
        return head

    return _BAD_ESCAPE_RE.sub(fix, text)


def _normalize_quotes(text: str) -> str:
    for smart, plain in _SMART_QUOTES.items():
        text = text.replace(smart, plain)
    return text


def _restructure_edge(raw: object) -> object:
    if isinstance(raw, list) and len(raw) == 3 and all(isinstance(v, str) for v in raw):
        return {"source": raw[0], "target": raw[1], "relation": raw[2]}
    if not isinstance(raw, dict):
        return raw
    out = {}
    for canonical, aliases in _EDGE_KEY_ALIASES.items():
        for alias in aliases:
            if alias in raw:
                out[canonical] = raw[alias]
                break
    # Preserve unknown edge records rather than emitting an empty object.
    return out if out else raw


def _restructure_document(obj: object) -> tuple[object, list[str]]:
    """Schema-level repairs on a parsed document: edge-record key folding and
    duplicate-attribute removal. Returns (new_obj, rules that changed it)."""
    if not isinstance(obj, dict):
        return obj, []
    rules: list[str] = []
    out = dict(obj)
    edges = out.get("edges")
    if isinstance(edges, list):
        new_edges = [_restructure_edge(e) for e in edges]
        if new_edges != edges:
            out["edges"] = new_edges
            rules.append("restructure_edges")
    nodes = out.get("nodes")
    if isinstance(nodes, list):
        new_nodes = []
        changed = False
        for n in nodes:
            if isinstance(n, dict) and isinstance(n.get("attributes"), list):
                deduped = []
                for a in n["attributes"]:
                    if a not in deduped:
                        deduped.append(a)
                if len(deduped) != len(n["attributes"]):
                    n = {**n, "attributes": deduped}
                    changed = True
            new_nodes.append(n)
        if changed:
            out["nodes"] = new_nodes
            rules.append("dedupe_attributes")
    return out, rules


@dataclass
class RepairOutcome:
    repaired_text: str
    rules_applied: list[str]
    used_llm: bool = False


def fix_malformed_json(text: str) -> RepairOutcome:
    """Deterministic rule-based repair of a scene-graph document.

    Rules run in the fixed REPAIR_RULES order; only rules that changed the
    text are reported. Total on strings: unrepairable input comes back as far
    as the rules could carry it, and anything that already parses cleanly is
    returned byte-identical with no rules applied. Idempotent: applying the
    function to its own output changes nothing.
    """
    if _parses(text):
        return RepairOutcome(repaired_text=text, rules_applied=[], used_llm=False)

    applied: list[str] = []
    current = text
    for rule, fn in (
        ("strip_wrapper", _strip_wrapper),
        ("remove_trailing_commas", _remove_trailing_commas),
        ("fix_escapes", _fix_escapes),
        ("normalize_quotes", _normalize_quotes),
    ):
        fixed = fn(current)
        if fixed != current:
            applied.append(rule)
            current = fixed

    try:
        obj = json.loads(current)
    except json.JSONDecodeError:
        return RepairOutcome(repaired_text=current, rules_applied=applied, used_llm=False)

    restructured, structural_rules = _restructure_document(obj)
    if structural_rules:
        applied.extend(structural_rules)
        current = json.dumps(restructured, indent=2, ensure_ascii=False)
    return RepairOutcome(repaired_text=current, rules_applied=applied, used_llm=False)


def llm_repair(text: str, client: RepairClient) -> RepairOutcome:
    """Escalate a graph that rule-based repair could not fix to an LLM.

    Contract: callers must have tried parse + fix_malformed_json first; an
    input either of those handles is a caller bug and raises ValueError. The
    model response is itself passed through fix_malformed_json (models wrap
    answers in fences too). RepairFailed if the result still does not parse;
    RepairUnavailable propagates from the client.
    """
    if _parses(text):
        raise ValueError("llm_repair called on text that already parses")
    rule_based = fix_malformed_json(text)
    if _parses(rule_based.repaired_text):
        raise ValueError("llm_repair called on text that rule-based repair fixes")

    prompt = REPAIR_PROMPT.replace("{graph}", text)
    response = client.complete(prompt)
    cleaned = fix_malformed_json(response)
    if not _parses(cleaned.repaired_text):
        raise RepairFailed(
            f"repair response still unparseable after rules {cleaned.rules_applied!r}"
        )
    return RepairOutcome(
        repaired_text=cleaned.repaired_text,
        rules_applied=cleaned.rules_applied,
        used_llm=True,
    )


# ---------------------------------------------------------------------------
# Graph rewrites


def expand_attributes(g: SceneGraph) -> SceneGraph:
    """Promote every attribute string to its own node.

    Each (owner, attribute) pair becomes one appended node whose id is the
    attribute string, suffixed "#<owner id>" (then "#2", "#3", ...) when that
    id is already taken. The raw string is kept on the node's label so
    embeddings never see the suffix. Every attribute node gets one edge to its
    owner with relation "has attribute", already in message orientation.
    Original nodes come out with empty attribute lists. Pure function.
    """
    taken = {n.id for n in g.nodes}
    new_nodes = [SGNode(id=n.id, attributes=[], label=n.label) for n in g.nodes]
    new_edges = [replace(e) for e in g.edges]
    for owner in g.nodes:
        for attr in owner.attributes:
            node_id = attr
            if node_id in taken:
                node_id = f"{attr}#{owner.id}"
            bump = 2
            while node_id in taken:
                node_id = f"{attr}#{owner.id}#{bump}"
                bump += 1
            taken.add(node_id)
            new_nodes.append(SGNode(id=node_id, attributes=[], label=attr))
            new_edges.append(
                SGEdge(
                    source=node_id,
                    target=owner.id,
                    relation=ATTRIBUTE_RELATION,
                    from_attribute=True,
                )
            )
    return SceneGraph(
        nodes=new_nodes,
        edges=new_edges,
        source_image_id=g.source_image_id,
        attributes_expanded=True,
        flow_reversed=g.flow_reversed,
    )


def reverse_flow(g: SceneGraph) -> SceneGraph:
    """Flip relation edges into message orientation (described object -> subject).

    After this, every edge's (source, target) means (message sender, message
    receiver). Attribute edges were created in message orientation and keep
    their direction. Only valid on expanded graphs, exactly once.
    """
    if not g.attributes_expanded:
        raise ValueError("reverse_flow expects an attribute-expanded graph")
    if g.flow_reversed:
        raise DoubleReversal("graph flow already reversed")
    flipped = [
        e
        if e.from_attribute
        else SGEdge(source=e.target, target=e.source, relation=e.relation)
        for e in g.edges
    ]
    return SceneGraph(
        nodes=[replace(n) for n in g.nodes],
        edges=flipped,
        source_image_id=g.source_image_id,
        attributes_expanded=True,
        flow_reversed=True,
    )

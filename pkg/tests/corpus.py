"""Deterministic corpus of valid and malformed scene-graph documents.

Four corruption families, each applied to the same pool of valid base
documents: code fences with surrounding prose, trailing commas, invalid
backslash escapes, and structurally wrong edge records (aliased keys or
triple lists). Every item is repairable by the rule pipeline by construction.
"""

from __future__ import annotations

import json
import random

COLORS = ["red", "blue", "green", "black", "white", "gray"]
ITEMS = ["backpack", "handbag", "umbrella", "bicycle", "suitcase", "phone"]
GARMENTS = ["jacket", "shirt", "coat", "jeans", "dress"]
HAIR = ["short hair", "long hair", "curly hair", "dark hair"]
RELATIONS = ["carries", "holds", "wears", "pushes", "rides"]
EDGE_ALIASES = [
    {"source": "src", "target": "dst", "relation": "rel"},
    {"source": "from", "target": "to", "relation": "relationship"},
    {"source": "subject", "target": "object", "relation": "predicate"},
]


def base_document(rng: random.Random) -> dict:
    n_items = rng.randint(1, 3)
    items = rng.sample(ITEMS, n_items)
    nodes = [
        {
            "id": "person",
            "attributes": [
                f"{rng.choice(COLORS)} {rng.choice(GARMENTS)}",
                rng.choice(HAIR),
            ],
        }
    ]
    edges = []
    for item in items:
        nodes.append({"id": item, "attributes": [rng.choice(COLORS)]})
        edges.append(
            {"source": "person", "target": item, "relation": rng.choice(RELATIONS)}
        )
    return {"nodes": nodes, "edges": edges}


def corrupt_fence(text: str, rng: random.Random) -> str:
    lang = rng.choice(["json", "JSON", ""])
    prose = rng.choice(
        [
            "Sure! Here is the scene graph you asked for:",
            "The image shows a person. Scene graph:",
            "Output:",
        ]
    )
    return f"{prose}\n```{lang}\n{text}\n```\nLet me know if you need anything else."


def corrupt_trailing_commas(text: str, rng: random.Random) -> str:
    out = text.replace("]", ",]")
    if rng.random() < 0.5:
        out = out.replace("}", ",}", 1)
    return out


def corrupt_escapes(text: str, rng: random.Random) -> str:
    victim = rng.choice([" hair", " jacket", " shirt", " coat"])
    broken = victim.replace(" ", "\\ ")
    out = text.replace(victim, broken)
    if out == text:  # base doc had none of the two-word strings; break a space
        out = text.replace('"person"', '"per\\son"', 1)
    return out


def corrupt_edges(doc: dict, rng: random.Random) -> str:
    mode = rng.randint(0, 1)
    edges = []
    for e in doc["edges"]:
        if mode == 0:
            alias = rng.choice(EDGE_ALIASES)
            edges.append({alias[k]: v for k, v in e.items()})
        else:
            edges.append([e["source"], e["target"], e["relation"]])
    return json.dumps({"nodes": doc["nodes"], "edges": edges}, indent=2)


def build_corpus(n: int = 200, seed: int = 20240811):
    """Returns (malformed items, valid base texts).

    Items are (family, malformed_text) with families cycling evenly.
    """
    rng = random.Random(seed)
    bases = [base_document(rng) for _ in range(max(50, n // 4))]
    items: list[tuple[str, str]] = []
    for i in range(n):
        doc = bases[i % len(bases)]
        text = json.dumps(doc, indent=2)
        family = ("fence", "trailing_comma", "bad_escape", "edge_structure")[i % 4]
        if family == "fence":
            items.append((family, corrupt_fence(text, rng)))
        elif family == "trailing_comma":
            items.append((family, corrupt_trailing_commas(text, rng)))
        elif family == "bad_escape":
            items.append((family, corrupt_escapes(text, rng)))
        else:
            items.append((family, corrupt_edges(doc, rng)))
    valid = [json.dumps(b, indent=2) for b in bases]
    return items, valid

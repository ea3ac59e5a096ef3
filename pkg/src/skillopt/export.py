"""Tree and round-log exports."""

from __future__ import annotations

import hashlib
import json
import math
from pathlib import Path
from typing import Any, Iterable, Mapping

from .search import SearchResult, SearchTree

TREE_FORMAT = "skillopt-tree"
TREE_VERSION = 1

_NODE_SCHEMA = {
    "type": "object",
    "required": ["id", "parent", "action", "N", "Q", "reward", "depth", "structure"],
    "properties": {
        "id": {"type": "integer", "minimum": 0},
        "parent": {"type": ["integer", "null"]},
        "action": {"type": "string"},
        "family": {"type": ["string", "null"]},
        "N": {"type": "integer", "minimum": 1},
        "Q": {"type": "number", "minimum": 0, "maximum": 1},
        "reward": {"type": "number", "minimum": 0, "maximum": 1},
        "depth": {"type": "integer", "minimum": 0},
        "structure": {"type": "string"},
    },
    "additionalProperties": False,
}

TREE_SCHEMA: dict[str, Any] = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["format", "version", "root", "best", "best_path", "nodes", "edges", "structures"],
    "properties": {
        "format": {"const": TREE_FORMAT},
        "version": {"const": TREE_VERSION},
        "root": {"type": "integer"},
        "best": {"type": "integer"},
        "best_path": {"type": "array", "items": {"type": "integer"}, "minItems": 1},
        "seed_reward": {"type": "number"},
        "best_reward": {"type": "number"},
        "stop_reason": {"type": "string"},
        "nodes": {"type": "array", "items": _NODE_SCHEMA, "minItems": 1},
        "edges": {
            "type": "array",
            "items": {"type": "array", "items": {"type": "integer"}, "minItems": 2, "maxItems": 2},
        },
        "structures": {"type": "object", "additionalProperties": {"type": "object"}},
    },
    "additionalProperties": False,
}


def _depth(tree: SearchTree, node_id: int) -> int:
    return len(tree.path_to_root(node_id)) - 1


def tree_document(result: SearchResult) -> dict[str, Any]:
    tree = result.tree
    structures: dict[str, Any] = {}
    nodes = []
    for node_id in sorted(tree.nodes):
        n = tree.nodes[node_id]
        key = hashlib.sha256(n.structure.key().encode("utf-8")).hexdigest()[:12]
        structures.setdefault(key, n.structure.to_dict())
        nodes.append({
            "id": n.id,
            "parent": n.parent,
            "action": n.action_label,
            "family": n.family.value if n.family else None,
            "N": n.visit_count,
            "Q": n.mean_reward,
            "reward": n.reward_at_creation,
            "depth": _depth(tree, n.id),
            "structure": key,
        })
    edges = [[n.parent, n.id] for n in sorted(tree.nodes.values(), key=lambda n: n.id) if n.parent is not None]
    return {
        "format": TREE_FORMAT,
        "version": TREE_VERSION,
        "root": tree.root_id,
        "best": tree.best_id,
        "best_path": result.best_path(),
        "seed_reward": result.seed_reward,
        "best_reward": result.best_reward,
        "stop_reason": result.stop_reason,
        "nodes": nodes,
        "edges": edges,
        "structures": dict(sorted(structures.items())),
    }


def validate_tree_document(doc: Mapping[str, Any]) -> None:
    """Raise ``jsonschema.ValidationError`` (or ValueError for link errors) on a bad document."""
    import jsonschema

    jsonschema.validate(doc, TREE_SCHEMA)
    ids = {n["id"] for n in doc["nodes"]}
    parents = {n["id"]: n["parent"] for n in doc["nodes"]}
    if doc["best"] not in ids or doc["root"] not in ids:
        raise ValueError("root or best is not a node id")
    if sorted(map(tuple, doc["edges"])) != sorted((p, c) for c, p in parents.items() if p is not None):
        raise ValueError("edges disagree with parent links")
    path = doc["best_path"]
    if path[0] != doc["root"] or path[-1] != doc["best"]:
        raise ValueError("best_path must run from root to best")
    if any(parents[b] != a for a, b in zip(path, path[1:])):
        raise ValueError("best_path is not a chain of parent links")


def dumps_json(obj: Any) -> str:
    return json.dumps(obj, indent=2, ensure_ascii=False, allow_nan=False) + "\n"


def _dot_escape(text: str) -> str:
    return text.replace("\\", "\\\\").replace('"', '\\"').replace("\n", "\\n")


def _short(label: str, width: int = 48) -> str:
    return label if len(label) <= width else label[: width - 3] + "..."


def tree_dot(doc: Mapping[str, Any]) -> str:
    """Graphviz rendering; the root-to-best path is drawn bold blue, other nodes faded."""
    on_path = set(doc["best_path"])
    path_edges = set(zip(doc["best_path"], doc["best_path"][1:]))
    lines = [
        "digraph search_tree {",
        "  rankdir=TB;",
        '  node [shape=box, style="rounded,filled", fontname="Helvetica", fontsize=10];',
        '  edge [fontname="Helvetica", fontsize=9];',
    ]
    for n in doc["nodes"]:
        title = "seed" if n["parent"] is None else _short(n["action"])
        label = f"#{n['id']} {title}\\nN={n['N']} Q={n['Q']:.4f} r={n['reward']:.4f}"
        if n["id"] == doc["best"]:
            attrs = 'color="#1f4e9c", fillcolor="#c9dcff", penwidth=3'
        elif n["id"] in on_path:
            attrs = 'color="#1f4e9c", fillcolor="#e6efff", penwidth=2'
        else:
            attrs = 'color="#b0b0b0", fillcolor="#f5f5f5", fontcolor="#808080"'
        lines.append(f'  n{n["id"]} [label="{_dot_escape(label)}", {attrs}];')
    for parent, child in doc["edges"]:
        if (parent, child) in path_edges:
            lines.append(f'  n{parent} -> n{child} [color="#1f4e9c", penwidth=2.5];')
        else:
            lines.append(f'  n{parent} -> n{child} [color="#c0c0c0"];')
    lines.append("}")
    return "\n".join(lines) + "\n"


def _clean(obj: Any) -> Any:
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return obj


def jsonl_lines(records: Iterable[Mapping[str, Any]]) -> str:
    return "".join(json.dumps(_clean(dict(r)), ensure_ascii=False, sort_keys=True, allow_nan=False) + "\n"
                   for r in records)


def write_jsonl(path: str | Path, records: Iterable[Mapping[str, Any]]) -> None:
    Path(path).write_text(jsonl_lines(records), encoding="utf-8")

from __future__ import annotations

import json
import math
import re

import pytest

from skillopt.advisor import ScriptedAdvisor
from skillopt.evaluation import SyntheticEvaluator
from skillopt.export import dumps_json, jsonl_lines, tree_document, tree_dot, validate_tree_document
from skillopt.search import SearchConfig, run_search


@pytest.fixture
def result(seed, playbook, landscape):
    return run_search(seed, SearchConfig.preset("A"), ScriptedAdvisor(playbook), SyntheticEvaluator(landscape))


def test_document_shape(result):
    doc = tree_document(result)
    validate_tree_document(doc)
    assert doc["best_path"] == result.best_path()
    assert len(doc["nodes"]) == len(result.tree)
    root = doc["nodes"][0]
    assert root["parent"] is None and root["action"] == ""


def test_broken_links_rejected(result):
    doc = json.loads(dumps_json(tree_document(result)))
    doc["best_path"] = [doc["root"], doc["best"]] if doc["best_path"] != [doc["root"], doc["best"]] else [doc["best"]]
    with pytest.raises(ValueError):
        validate_tree_document(doc)


def test_dot_highlights_only_best_path(result):
    doc = tree_document(result)
    dot = tree_dot(doc)
    blue_edges = re.findall(r"n(\d+) -> n(\d+) \[color=\"#1f4e9c\"", dot)
    path = doc["best_path"]
    assert [(int(a), int(b)) for a, b in blue_edges] == list(zip(path, path[1:]))
    assert dot.count("penwidth=3") == 1


def test_json_is_strict():
    with pytest.raises(ValueError):
        dumps_json({"x": math.inf})
    assert jsonl_lines([{"b": math.nan, "a": 1}]) == '{"a": 1, "b": null}\n'

"""Run manifests: one YAML file describing a single optimization run.

Search settings sit at the top level under their Table-2 names::

    name: A
    max_rounds: 3
    selection_policy: UCB1
    exploration_constant: 1.2
    min_rounds_before_convergence: 2
    stale_rounds_to_stop: 2
    improvement_threshold: 0.001
    action_whitelist: profile
    skill: seed_skill
    advisor: scripted:playbook.yaml
    evaluator: synthetic:landscape.yaml
    dataset: orqa.jsonl            # exact-match evaluator only
    splits: {sizes: [53, 35, 32], seed: 7}
    refinement: {max_attempts: 2, t_crit: 1.833, variants_per_attempt: 3}
    stage_budgets: {analysis: 1536}
    budget_policy: {activation_budget: 5000}

Relative paths resolve against the manifest's directory.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

import yaml

from .advisor import StageBudgets
from .errors import ConfigError
from .evaluation import (
    Evaluator,
    ExactMatchEvaluator,
    SplitSet,
    SyntheticEvaluator,
    SyntheticLandscape,
    load_dataset,
    load_splits,
    make_runner,
)
from .package import BudgetPolicy
from .refine import RefinementBudget
from .search import SearchConfig

SEARCH_KEYS = {f.name for f in fields(SearchConfig)} | {"lambda", "preset"}
OTHER_KEYS = {"name", "skill", "advisor", "evaluator", "dataset", "splits", "refinement", "stage_budgets",
              "budget_policy", "out", "model", "runner_retries", "eval_width"}


@dataclass
class RunManifest:
    name: str
    config: SearchConfig
    skill: Path | None = None
    advisor: str = ""
    evaluator: str = ""
    dataset: Path | None = None
    split_sizes: tuple[int, int, int] | None = None
    split_seed: int = 0
    refinement: RefinementBudget = field(default_factory=RefinementBudget)
    stage_budgets: StageBudgets = field(default_factory=StageBudgets)
    policy: BudgetPolicy = field(default_factory=BudgetPolicy)
    out: Path | None = None
    model: str | None = None
    runner_retries: int = 1
    eval_width: int = 1
    base_dir: Path = Path(".")
    source: Path | None = None
    evaluator_dir: Path | None = None  # runner commands run from here

    def resolve(self, value: str | Path) -> Path:
        p = Path(value)
        return p if p.is_absolute() else self.base_dir / p

    def with_overrides(self, *, skill: str | None = None, dataset: str | None = None, out: str | None = None,
                       seed: int | None = None, advisor: str | None = None,
                       evaluator: str | None = None) -> "RunManifest":
        """Command-line flags win over manifest values (paths relative to the cwd)."""
        m = replace(self)
        if skill:
            m.skill = Path(skill).resolve()
        if dataset:
            m.dataset = Path(dataset).resolve()
        if out:
            m.out = Path(out)
        if seed is not None:
            m.config = replace(m.config, rng_seed=seed)
            m.split_seed = seed
        if advisor:
            m.advisor = _abs_spec(advisor, Path.cwd())
        if evaluator:
            m.evaluator = _abs_spec(evaluator, Path.cwd())
            m.evaluator_dir = Path.cwd()
        return m

    def summary(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "config": self.config.to_dict(),
            "refinement": {"max_attempts": self.refinement.max_attempts, "t_crit": self.refinement.t_crit,
                           "variants_per_attempt": self.refinement.variants_per_attempt},
        }


def _abs_spec(spec: str, base: Path) -> str:
    """Make the path part of ``scripted:x`` / ``synthetic:x`` absolute; runner commands stay as written."""
    kind, sep, arg = spec.partition(":")
    if sep and kind in ("scripted", "synthetic") and arg and not Path(arg).is_absolute():
        return f"{kind}:{(base / arg).resolve()}"
    return spec


def _sub(data: Mapping[str, Any], key: str, cls: type) -> Any:
    raw = data.get(key) or {}
    if not isinstance(raw, Mapping):
        raise ConfigError(f"{key} must be a mapping")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad {key}: {exc}") from exc


def manifest_from_mapping(data: Mapping[str, Any], base_dir: Path, source: Path | None = None) -> RunManifest:
    unknown = sorted(set(data) - SEARCH_KEYS - OTHER_KEYS)
    if unknown:
        raise ConfigError(f"unknown manifest keys: {unknown}")
    config = SearchConfig.from_mapping({k: v for k, v in data.items() if k in SEARCH_KEYS})
    splits = data.get("splits") or {}
    sizes = splits.get("sizes")
    if sizes is not None and (len(sizes) != 3 or any(int(x) < 0 for x in sizes)):
        raise ConfigError("splits.sizes must be three nonnegative integers")
    m = RunManifest(
        name=str(data.get("name") or (source.stem if source else "run")),
        config=config,
        refinement=_sub(data, "refinement", RefinementBudget),
        stage_budgets=_sub(data, "stage_budgets", StageBudgets),
        policy=_sub(data, "budget_policy", BudgetPolicy),
        split_sizes=tuple(int(x) for x in sizes) if sizes is not None else None,
        split_seed=int(splits.get("seed", 0)),
        model=data.get("model"),
        runner_retries=int(data.get("runner_retries", 1)),
        eval_width=int(data.get("eval_width", 1)),
        base_dir=base_dir,
        source=source,
    )
    if data.get("skill"):
        m.skill = m.resolve(data["skill"])
    if data.get("dataset"):
        m.dataset = m.resolve(data["dataset"])
    if data.get("out"):
        m.out = m.resolve(data["out"])
    m.advisor = _abs_spec(str(data.get("advisor", "")), base_dir) if data.get("advisor") else ""
    m.evaluator = _abs_spec(str(data.get("evaluator", "")), base_dir) if data.get("evaluator") else ""
    m.evaluator_dir = base_dir
    return m


def load_manifest(path: str | Path) -> RunManifest:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: manifest must be a mapping")
    return manifest_from_mapping(data, path.parent.resolve(), path)


class EvaluatorFactory:
    """Builds a fresh evaluator for a named split (search, confirm or test)."""

    def __init__(self, manifest: RunManifest):
        self.manifest = manifest
        kind, _, arg = manifest.evaluator.partition(":")
        self.kind = kind
        self.landscape: SyntheticLandscape | None = None
        self.splits: SplitSet | None = None
        if kind == "synthetic":
            if not arg:
                raise ConfigError("synthetic evaluator needs a landscape file")
            try:
                data = yaml.safe_load(Path(arg).read_text(encoding="utf-8")) or {}
            except (OSError, yaml.YAMLError) as exc:
                raise ConfigError(f"cannot read landscape {arg}: {exc}") from exc
            self.landscape = SyntheticLandscape.from_mapping(data)
        elif kind == "exact-match":
            if not arg:
                raise ConfigError("exact-match evaluator needs a runner")
            if manifest.dataset is None or manifest.split_sizes is None:
                raise ConfigError("exact-match evaluator needs dataset and splits.sizes")
            self.runner = make_runner(arg, cwd=manifest.evaluator_dir)
            self.splits = load_splits(load_dataset(manifest.dataset), manifest.split_sizes, manifest.split_seed)
        else:
            raise ConfigError(f"unknown evaluator backend {manifest.evaluator!r}")

    def for_split(self, split: str, root_name: str = "") -> Evaluator:
        if self.landscape is not None:
            return SyntheticEvaluator(self.landscape.for_split(split))
        assert self.splits is not None
        return ExactMatchEvaluator(self.splits.get(split), self.runner, retries=self.manifest.runner_retries,
                                   width=self.manifest.eval_width, root_name=root_name)

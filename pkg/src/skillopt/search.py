"""Outer Monte Carlo tree search over skill structures."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from .advisor import Advisor, AdvisorExchange, Profile, comprehend
from .edits import (
    DEFAULT_COMPOSITE_CAP,
    ActionKind,
    CarriedNote,
    EditAction,
    admissible_actions,
    admissible_kinds,
    apply_edits,
    composite_label,
)
from .errors import (
    AdvisorFailure,
    BadParams,
    BridgeFailure,
    ConfigError,
    DomainError,
    EditError,
    EmptyTree,
    InadmissibleAction,
    NoValidAttempts,
    OutOfCatalog,
    SeedInvalid,
    UnknownNode,
)
from .evaluation import Evaluator
from .package import (
    BudgetPolicy,
    ContentState,
    SkillPackage,
    Structure,
    ValidationReport,
    recompose,
    validate,
)
from .refine import (
    RefinementBudget,
    RefinementFamily,
    align_content,
    dispatch_family,
    rank_and_select,
    refine,
)

log = logging.getLogger(__name__)

UCB1 = "UCB1"
MIXED = "Mixed"


@dataclass
class SearchNode:
    id: int
    parent: int | None
    structure: Structure
    content: ContentState
    reward_at_creation: float
    producing_action: tuple[EditAction, ...] | None = None
    children: list[int] = field(default_factory=list)
    visit_count: int = 0
    mean_reward: float = 0.0
    diagnostics: str = ""
    family: RefinementFamily | None = None
    tried: list[str] = field(default_factory=list)
    declined: bool = False  # the advisor had nothing left to propose here

    @property
    def action_label(self) -> str:
        return composite_label(self.producing_action) if self.producing_action else ""


class SearchTree:
    def __init__(self) -> None:
        self.nodes: dict[int, SearchNode] = {}
        self.root_id: int | None = None
        self.best_id: int | None = None

    def __len__(self) -> int:
        return len(self.nodes)

    def node(self, node_id: int) -> SearchNode:
        try:
            return self.nodes[node_id]
        except KeyError:
            raise UnknownNode(node_id) from None

    def add_root(self, structure: Structure, content: ContentState, reward: float, diagnostics: str = "") -> SearchNode:
        if self.nodes:
            raise ValueError("tree already has a root")
        node = SearchNode(0, None, structure, content, reward, diagnostics=diagnostics)
        self.nodes[0] = node
        self.root_id = self.best_id = 0
        return node

    def add_child(self, parent_id: int, structure: Structure, content: ContentState, reward: float,
                  action: Sequence[EditAction], **extra: Any) -> SearchNode:
        parent = self.node(parent_id)
        node = SearchNode(len(self.nodes), parent_id, structure, content, reward,
                          producing_action=tuple(action), **extra)
        self.nodes[node.id] = node
        parent.children.append(node.id)
        if reward > self.nodes[self.best_id].reward_at_creation:
            self.best_id = node.id
        return node

    def path_to_root(self, node_id: int) -> list[int]:
        path = []
        current: int | None = self.node(node_id).id
        while current is not None:
            path.append(current)
            current = self.nodes[current].parent
        return path

    def total_visits(self) -> int:
        return sum(n.visit_count for n in self.nodes.values())

    @property
    def best(self) -> SearchNode:
        if self.best_id is None:
            raise EmptyTree("tree is empty")
        return self.nodes[self.best_id]


@dataclass(frozen=True)
class SearchConfig:
    max_rounds: int
    selection_policy: str = UCB1
    exploration_constant: float = 1.2
    alpha: float = 0.55
    lambda_: float = 0.25
    min_rounds_before_convergence: int = 2
    stale_rounds_to_stop: int = 2
    improvement_threshold: float = 0.001
    # kind names, or "profile" to use the profile's priority kinds
    action_whitelist: tuple[str, ...] | str | None = None
    rng_seed: int = 0
    composite_cap: int = DEFAULT_COMPOSITE_CAP
    advisor_retries: int = 1

    def __post_init__(self) -> None:
        if self.max_rounds < 1:
            raise ConfigError("max_rounds must be at least 1")
        if self.selection_policy not in (UCB1, MIXED):
            raise ConfigError(f"selection_policy must be {UCB1} or {MIXED}")
        if self.selection_policy == UCB1 and not self.exploration_constant > 0:
            raise ConfigError("exploration_constant must be positive")
        if self.selection_policy == MIXED:
            if not self.alpha > 0:
                raise ConfigError("alpha must be positive")
            if not 0.0 <= self.lambda_ <= 1.0:
                raise ConfigError("lambda must lie in [0, 1]")
        if self.improvement_threshold < 0 or self.stale_rounds_to_stop < 1 or self.min_rounds_before_convergence < 0:
            raise ConfigError("convergence settings out of range")
        if self.composite_cap < 1 or self.advisor_retries < 0:
            raise ConfigError("composite_cap must be >= 1 and advisor_retries >= 0")
        wl = self.action_whitelist
        if wl is not None and wl != "profile":
            if isinstance(wl, str):
                raise ConfigError("action_whitelist must be a list of kinds or 'profile'")
            bad = [k for k in wl if k not in ActionKind.__members__]
            if bad:
                raise ConfigError(f"unknown action kinds in whitelist: {bad}")
            object.__setattr__(self, "action_whitelist", tuple(wl))

    @classmethod
    def preset(cls, name: str, **overrides: Any) -> "SearchConfig":
        """The two sweep configurations used for the ORQA experiment."""
        presets = {
            "A": dict(max_rounds=3, selection_policy=UCB1, exploration_constant=1.2,
                      min_rounds_before_convergence=2, stale_rounds_to_stop=2, improvement_threshold=0.001,
                      action_whitelist="profile"),
            "B": dict(max_rounds=6, selection_policy=MIXED, alpha=0.55, lambda_=0.25,
                      min_rounds_before_convergence=3, stale_rounds_to_stop=3, improvement_threshold=0.001),
        }
        if name not in presets:
            raise ConfigError(f"unknown preset {name!r}")
        return cls(**{**presets[name], **overrides})

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> "SearchConfig":
        data = dict(data)
        if "lambda" in data:
            data["lambda_"] = data.pop("lambda")
        preset = data.pop("preset", None)
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown search config keys: {unknown}")
        if isinstance(data.get("action_whitelist"), list):
            data["action_whitelist"] = tuple(data["action_whitelist"])
        try:
            return cls.preset(preset, **data) if preset else cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict[str, Any]:
        wl = self.action_whitelist
        return {
            "max_rounds": self.max_rounds,
            "selection_policy": self.selection_policy,
            "exploration_constant": self.exploration_constant,
            "alpha": self.alpha,
            "lambda": self.lambda_,
            "min_rounds_before_convergence": self.min_rounds_before_convergence,
            "stale_rounds_to_stop": self.stale_rounds_to_stop,
            "improvement_threshold": self.improvement_threshold,
            "action_whitelist": list(wl) if isinstance(wl, tuple) else wl,
            "rng_seed": self.rng_seed,
            "composite_cap": self.composite_cap,
            "advisor_retries": self.advisor_retries,
        }


# ---------------------------------------------------------------------------
# selection


def ucb1_score(node: SearchNode, total_visits: int, c: float) -> float:
    if total_visits < 1:
        raise DomainError("total_visits must be at least 1")
    if node.visit_count < 1 or node.visit_count > total_visits:
        raise DomainError("node visit count must lie in [1, total_visits]")
    return node.mean_reward + c * math.sqrt(math.log(total_visits) / node.visit_count)


def _candidates(tree: SearchTree, selectable: Iterable[int] | None) -> list[SearchNode]:
    ids = sorted(tree.nodes) if selectable is None else sorted(selectable)
    if not ids:
        raise EmptyTree("no selectable nodes")
    return [tree.node(i) for i in ids]


def select_ucb1(tree: SearchTree, c: float, selectable: Iterable[int] | None = None) -> int:
    nodes = _candidates(tree, selectable)
    total = tree.total_visits()
    best, best_score = nodes[0].id, -math.inf
    for n in nodes:  # ascending id, strict > keeps the lowest id on ties
        score = ucb1_score(n, total, c)
        if score > best_score:
            best, best_score = n.id, score
    return best


def mixed_probabilities(values: Sequence[float], lam: float, alpha: float) -> np.ndarray:
    """``λ/|N| + (1−λ)·softmax(α·(Q̄ − mean Q̄))``."""
    q = np.asarray(values, dtype=float)
    if q.size == 0:
        raise EmptyTree("no selectable nodes")
    if not 0.0 <= lam <= 1.0:
        raise DomainError("lambda must lie in [0, 1]")
    if not alpha > 0:
        raise DomainError("alpha must be positive")
    z = alpha * (q - q.mean())
    w = np.exp(z - z.max())
    return lam / q.size + (1.0 - lam) * w / w.sum()


def select_mixed(tree: SearchTree, lam: float, alpha: float, rng: np.random.Generator,
                 selectable: Iterable[int] | None = None) -> int:
    nodes = _candidates(tree, selectable)
    p = mixed_probabilities([n.mean_reward for n in nodes], lam, alpha)
    idx = int(np.searchsorted(np.cumsum(p), rng.random() * p.sum(), side="right"))
    return nodes[min(idx, len(nodes) - 1)].id


# ---------------------------------------------------------------------------
# expansion


@dataclass(frozen=True)
class ValidatedCandidate:
    structure: Structure
    actions: tuple[EditAction, ...]
    carried_note: CarriedNote
    aligned: ContentState
    report: ValidationReport


@dataclass(frozen=True)
class RejectedProposal:
    reason: str
    detail: str = ""
    actions: tuple[EditAction, ...] = ()

    def warning(self) -> str:
        label = composite_label(self.actions) if self.actions else "(no action)"
        return f"{label} rejected: {self.reason}" + (f" ({self.detail})" if self.detail else "")


def resolve_whitelist(config: SearchConfig, profile: Profile | None) -> frozenset[str] | None:
    wl = config.action_whitelist
    if wl == "profile":
        if profile is None or not profile.priority_action_kinds:
            return None
        return frozenset(k.value for k in profile.priority_action_kinds)
    return None if wl is None else frozenset(wl)


def node_exhausted(node: SearchNode, whitelist: Iterable[str] | None) -> bool:
    if node.declined:
        return True
    tried = set(node.tried)
    return all(a.label() in tried for a in admissible_actions(node.structure, whitelist))


def expand(
    tree: SearchTree,
    parent_id: int,
    advisor: Advisor,
    validator: Callable[..., ValidationReport] = validate,
    policy: BudgetPolicy | None = None,
    whitelist: Iterable[str] | None = None,
    *,
    profile: Profile | None = None,
    warnings: Sequence[str] = (),
    experience: Sequence[Mapping[str, Any]] = (),
    round_index: int = 0,
    cap: int = DEFAULT_COMPOSITE_CAP,
) -> ValidatedCandidate | RejectedProposal:
    """Analysis, diagnosis and proposal at ``parent_id``, then the structural gate."""
    policy = policy or BudgetPolicy()
    parent = tree.node(parent_id)
    whitelist = None if whitelist is None else frozenset(whitelist)
    catalog = admissible_actions(parent.structure, whitelist)
    begin = getattr(advisor, "begin_round", None)
    if begin is not None:
        begin(round_index)

    profile = profile or Profile("skill optimization")
    constraints = (f"activation budget {policy.activation_budget} tokens "
                   f"(warning at {policy.warning_threshold}); at most {cap} actions per proposal")
    summary = f"reward {parent.reward_at_creation:.4f}, mean {parent.mean_reward:.4f} over {parent.visit_count} visits"
    analysis = advisor.analyze(parent.structure, summary, profile, constraints)
    diagnosis = advisor.diagnose(analysis, parent.diagnostics, list(experience)[-3:])
    try:
        actions = advisor.propose_action(diagnosis, catalog, warnings, round_index=round_index,
                                         structure=parent.structure, tried=tuple(parent.tried))
    except OutOfCatalog as exc:
        anywhere = {k.value for k in admissible_kinds(parent.structure, None)}
        reason = "Inadmissible" if any(k not in anywhere for k in exc.kinds) else "OutOfCatalog"
        return RejectedProposal(reason, str(exc))
    if not actions:
        parent.declined = True
        return RejectedProposal("NoProposal", "advisor had nothing to propose")

    actions = tuple(actions)
    parent.tried.append(composite_label(actions))
    try:
        outcome = apply_edits(parent.structure, actions, cap)
    except InadmissibleAction as exc:
        return RejectedProposal("Inadmissible", str(exc), actions)
    except BadParams as exc:
        return RejectedProposal("BadParams", str(exc), actions)
    except EditError as exc:
        return RejectedProposal(type(exc).__name__, str(exc), actions)
    if outcome.new_structure == parent.structure and not outcome.carried_note.revised:
        return RejectedProposal("NoChange", "structure unchanged", actions)
    try:
        aligned = align_content(parent.content, parent.structure, outcome.new_structure, outcome.carried_note)
    except BridgeFailure as exc:
        return RejectedProposal("BridgeFailure", str(exc), actions)
    report = validator(recompose(aligned, outcome.new_structure), policy)
    if not report.valid:
        return RejectedProposal(report.errors[0].code, report.errors[0].message, actions)
    return ValidatedCandidate(outcome.new_structure, actions, outcome.carried_note, aligned, report)


# ---------------------------------------------------------------------------
# backpropagation and termination


def backpropagate(tree: SearchTree, new_node_id: int, reward: float) -> None:
    for node_id in tree.path_to_root(new_node_id):
        n = tree.nodes[node_id]
        n.visit_count += 1
        n.mean_reward += (reward - n.mean_reward) / n.visit_count


class Termination(NamedTuple):
    stop: bool
    reason: str | None = None


def check_termination(tree: SearchTree, config: SearchConfig, round_index: int, stale_counter: int,
                      whitelist: Iterable[str] | None = None) -> Termination:
    if round_index >= config.max_rounds:
        return Termination(True, "budget")
    if stale_counter >= config.stale_rounds_to_stop and round_index >= config.min_rounds_before_convergence:
        return Termination(True, "stagnation")
    if tree.nodes and all(node_exhausted(n, whitelist) for n in tree.nodes.values()):
        return Termination(True, "exhausted")
    return Termination(False)


# ---------------------------------------------------------------------------
# the full loop


@dataclass
class SearchResult:
    best_structure: Structure
    best_content: ContentState
    best_reward: float
    tree: SearchTree
    round_log: list[dict[str, Any]]
    seed_reward: float
    stop_reason: str
    profile: Profile
    exchanges: list[AdvisorExchange] = field(default_factory=list)

    @property
    def accepted_rounds(self) -> int:
        return sum(1 for r in self.round_log if r["outcome"] == "accepted")

    def best_path(self) -> list[int]:
        return list(reversed(self.tree.path_to_root(self.tree.best_id)))


def _expand_with_retries(tree: SearchTree, parent_id: int, advisor: Advisor, retries: int,
                         **kwargs: Any) -> ValidatedCandidate | RejectedProposal:
    for attempt in range(retries + 1):
        try:
            return expand(tree, parent_id, advisor, **kwargs)
        except AdvisorFailure:
            if attempt == retries:
                raise
            log.warning("expansion at node %d failed, retrying", parent_id)
    raise AssertionError("unreachable")


def run_search(
    seed: SkillPackage,
    config: SearchConfig,
    advisor: Advisor,
    evaluator: Evaluator,
    inner_budget: RefinementBudget | None = None,
    *,
    policy: BudgetPolicy | None = None,
    validator: Callable[..., ValidationReport] = validate,
) -> SearchResult:
    policy = policy or BudgetPolicy()
    inner_budget = inner_budget or RefinementBudget()
    seed_report = validator(seed, policy)
    if not seed_report.valid:
        raise SeedInvalid(seed_report.format())

    theta0, phi0, profile = comprehend(seed, advisor)
    root_eval = evaluator.evaluate(theta0, phi0)
    tree = SearchTree()
    tree.add_root(theta0, phi0, root_eval.reward, root_eval.diagnostics)
    backpropagate(tree, 0, root_eval.reward)

    whitelist = resolve_whitelist(config, profile)
    rng = np.random.default_rng(config.rng_seed)
    round_log: list[dict[str, Any]] = []
    warnings: list[str] = []
    stale = 0
    round_index = 0

    while True:
        term = check_termination(tree, config, round_index, stale, whitelist)
        if term.stop:
            stop_reason = term.reason or ""
            break
        round_index += 1
        selectable = [i for i, n in tree.nodes.items() if not node_exhausted(n, whitelist)]
        if config.selection_policy == UCB1:
            parent_id = select_ucb1(tree, config.exploration_constant, selectable)
        else:
            parent_id = select_mixed(tree, config.lambda_, config.alpha, rng, selectable)
        parent = tree.nodes[parent_id]
        best_before = tree.best.reward_at_creation
        entry: dict[str, Any] = {"round": round_index, "selected": parent_id}

        outcome = _expand_with_retries(
            tree, parent_id, advisor, config.advisor_retries, validator=validator, policy=policy,
            whitelist=whitelist, profile=profile, warnings=tuple(warnings[-5:]), experience=round_log,
            round_index=round_index, cap=config.composite_cap)

        if isinstance(outcome, RejectedProposal):
            warnings.append(outcome.warning())
            entry.update(actions=[a.label() for a in outcome.actions], outcome="rejected",
                         reason=outcome.reason, detail=outcome.detail)
        else:
            warnings.extend(f"{composite_label(outcome.actions)}: {w.code} ({w.message})"
                            for w in outcome.report.warnings)
            family = dispatch_family(list(outcome.actions))
            records = refine(outcome.aligned, outcome.structure, family, advisor, evaluator, inner_budget,
                             parent.reward_at_creation, profile=profile,
                             focus=outcome.carried_note.focus_keys(), policy=policy, validator=validator,
                             also_editable=outcome.carried_note.revised)
            entry.update(actions=[a.label() for a in outcome.actions], family=family.value,
                         attempts=[r.to_dict() for r in records])
            try:
                accepted = rank_and_select(records)
            except NoValidAttempts as exc:
                warnings.append(f"{composite_label(outcome.actions)} rejected: NoValidAttempts")
                entry.update(outcome="rejected", reason="NoValidAttempts", detail=str(exc))
            else:
                child = tree.add_child(parent_id, outcome.structure, accepted.content, accepted.reward,
                                       outcome.actions, diagnostics=accepted.diagnostics, family=family)
                backpropagate(tree, child.id, accepted.reward)
                entry.update(outcome="accepted", child=child.id, accepted_attempt=accepted.attempt_index,
                             gate_passed=accepted.gate_passed, reward=accepted.reward)

        improvement = tree.best.reward_at_creation - best_before
        stale = stale + 1 if improvement < config.improvement_threshold else 0
        entry.update(best_reward=tree.best.reward_at_creation, best_id=tree.best_id,
                     improvement=improvement, stale=stale)
        round_log.append(entry)

    best = tree.best
    return SearchResult(best.structure, best.content, best.reward_at_creation, tree, round_log,
                        root_eval.reward, stop_reason, profile, list(getattr(advisor, "exchanges", [])))

"""Bilevel optimization of agent skill packages.

An outer Monte Carlo tree search edits a skill's structure; an inner loop
refines its content under each structure and gates gains with a lower
confidence bound.
"""

from __future__ import annotations

from .advisor import (
    AdvisorExchange,
    Profile,
    RemoteAdvisor,
    ScriptedAdvisor,
    Stage,
    StageBudgets,
    comprehend,
    make_advisor,
)
from .edits import ActionKind, CarriedNote, EditAction, admissible_actions, apply_edit, apply_edits, parse_action
from .evaluation import (
    EvalReport,
    ExactMatchEvaluator,
    SplitSet,
    SyntheticEvaluator,
    SyntheticLandscape,
    TaskInstance,
    evaluate_skill,
    exact_match_score,
    load_splits,
    synth_evaluate,
)
from .package import (
    BudgetPolicy,
    ContentState,
    Frontmatter,
    SkillPackage,
    Structure,
    ValidationReport,
    count_tokens,
    derive_structure,
    extract_content,
    load_package,
    parse_package,
    recompose,
    serialize_package,
    validate,
    write_package,
)
from .refine import (
    AttemptRecord,
    RefinementBudget,
    RefinementFamily,
    align_content,
    dispatch_family,
    lcb,
    rank_and_select,
    refine,
)
from .search import (
    SearchConfig,
    SearchNode,
    SearchResult,
    SearchTree,
    backpropagate,
    check_termination,
    expand,
    mixed_probabilities,
    run_search,
    select_mixed,
    select_ucb1,
    ucb1_score,
)

__version__ = "0.1.0"

__all__ = [
    "ActionKind",
    "AdvisorExchange",
    "AttemptRecord",
    "BudgetPolicy",
    "CarriedNote",
    "ContentState",
    "EditAction",
    "EvalReport",
    "ExactMatchEvaluator",
    "Frontmatter",
    "Profile",
    "RefinementBudget",
    "RefinementFamily",
    "RemoteAdvisor",
    "ScriptedAdvisor",
    "SearchConfig",
    "SearchNode",
    "SearchResult",
    "SearchTree",
    "SkillPackage",
    "SplitSet",
    "Stage",
    "StageBudgets",
    "Structure",
    "SyntheticEvaluator",
    "SyntheticLandscape",
    "TaskInstance",
    "ValidationReport",
    "admissible_actions",
    "align_content",
    "apply_edit",
    "apply_edits",
    "backpropagate",
    "check_termination",
    "comprehend",
    "count_tokens",
    "derive_structure",
    "dispatch_family",
    "evaluate_skill",
    "exact_match_score",
    "expand",
    "extract_content",
    "lcb",
    "load_package",
    "load_splits",
    "make_advisor",
    "mixed_probabilities",
    "parse_action",
    "parse_package",
    "rank_and_select",
    "recompose",
    "refine",
    "run_search",
    "select_mixed",
    "select_ucb1",
    "serialize_package",
    "synth_evaluate",
    "ucb1_score",
    "validate",
    "write_package",
    "__version__",
]

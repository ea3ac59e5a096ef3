"""Advisor backends: the reasoning steps that drive the search.

Both backends speak the same constrained text protocol, so the scripted
backend exercises the same parsers as the remote one:

* comprehension: ``LABEL: value`` lines (TASK_SUMMARY, SUCCESS_CRITERIA, ...)
* proposal: one ``ACTION: Kind(name=json, ...)`` line per primitive action
* refinement: ``=== section: Heading ===`` blocks carrying replacement text,
  optionally preceded by ``DONE: yes|no``
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
from dataclasses import asdict, dataclass
from enum import Enum
from pathlib import Path
from string import Template
from typing import Any, Callable, Mapping, Protocol, Sequence

import yaml

from .edits import (
    DEFAULT_COMPOSITE_CAP,
    ActionKind,
    EditAction,
    apply_edit,
    catalog_text,
    parse_action,
)
from .errors import (
    ActionSyntaxError,
    AdvisorFailure,
    ConfigError,
    EditError,
    IncompatibleContent,
    OutOfCatalog,
)
from .package import (
    SkillPackage,
    Structure,
    ContentState,
    count_tokens,
    derive_structure,
    extract_content,
)
from .refine import STUB, AttemptRecord, RefinementFamily, check_family_edit

log = logging.getLogger(__name__)

TEMPLATE_VERSION = "skillopt-prompts/1"


class Stage(str, Enum):
    Comprehend = "Comprehend"
    Analyze = "Analyze"
    Diagnose = "Diagnose"
    Propose = "Propose"
    RefineVariant = "RefineVariant"


@dataclass(frozen=True)
class Profile:
    task_summary: str
    success_criteria: tuple[str, ...] = ()
    quality_dimensions: tuple[str, ...] = ()
    promising_directions: tuple[str, ...] = ()
    priority_action_kinds: frozenset[ActionKind] | None = None

    def __post_init__(self) -> None:
        if not self.task_summary.strip():
            raise ValueError("profile task_summary must be non-empty")
        if self.priority_action_kinds is not None:
            object.__setattr__(self, "priority_action_kinds",
                               frozenset(ActionKind(k) for k in self.priority_action_kinds))

    def to_dict(self) -> dict[str, Any]:
        return {
            "task_summary": self.task_summary,
            "success_criteria": list(self.success_criteria),
            "quality_dimensions": list(self.quality_dimensions),
            "promising_directions": list(self.promising_directions),
            "priority_action_kinds": None if self.priority_action_kinds is None
            else sorted(k.value for k in self.priority_action_kinds),
        }

    def render(self) -> str:
        lines = [f"Task: {self.task_summary}"]
        if self.success_criteria:
            lines.append("Success criteria: " + "; ".join(self.success_criteria))
        if self.quality_dimensions:
            lines.append("Quality dimensions: " + "; ".join(self.quality_dimensions))
        if self.promising_directions:
            lines.append("Promising directions: " + "; ".join(self.promising_directions))
        if self.priority_action_kinds:
            lines.append("Priority actions: " + ", ".join(sorted(k.value for k in self.priority_action_kinds)))
        return "\n".join(lines)


@dataclass(frozen=True)
class StageBudgets:
    comprehension: int = 1024
    analysis: int = 1536
    diagnosis: int = 1024
    proposal: int = 20000
    inner_refinement: int = 1024

    def __post_init__(self) -> None:
        for name, value in asdict(self).items():
            if value <= 0:
                raise ValueError(f"stage budget {name} must be positive")

    def for_stage(self, stage: Stage) -> int:
        return {
            Stage.Comprehend: self.comprehension,
            Stage.Analyze: self.analysis,
            Stage.Diagnose: self.diagnosis,
            Stage.Propose: self.proposal,
            Stage.RefineVariant: self.inner_refinement,
        }[stage]


@dataclass(frozen=True)
class AdvisorExchange:
    stage: Stage
    prompt_digest: str
    response: str
    tokens_used: int
    retries: int = 0
    truncated: bool = False

    def to_dict(self) -> dict[str, Any]:
        return {
            "stage": self.stage.value,
            "prompt_digest": self.prompt_digest,
            "tokens_used": self.tokens_used,
            "retries": self.retries,
            "truncated": self.truncated,
        }


# ---------------------------------------------------------------------------
# prompt templates

SYSTEM_PROMPT = (
    "You optimize agent skill packages (a SKILL.md with YAML frontmatter and Markdown sections, "
    "plus optional scripts/, references/ and assets/). Answer only in the requested labeled format."
)

TEMPLATES: dict[Stage, Template] = {
    Stage.Comprehend: Template(
        "Study this seed skill and summarize what it is for.\n\n$package\n\n"
        "Reply with exactly these labeled lines (lists separated by ';'):\n"
        "TASK_SUMMARY: <one line>\nSUCCESS_CRITERIA: <items>\nQUALITY_DIMENSIONS: <items>\n"
        "PROMISING_DIRECTIONS: <structural revision ideas>\n"
        "PRIORITY_ACTIONS: <comma-separated action kinds from: $kinds>\n"
    ),
    Stage.Analyze: Template(
        "Analyze the current skill structure.\n\nProfile:\n$profile\n\nStructure:\n$structure\n\n"
        "Evaluation summary: $summary\n\nConstraints: $constraints\n\n"
        "Describe the structural state of this candidate in a few sentences."
    ),
    Stage.Diagnose: Template(
        "Structural analysis:\n$analysis\n\nEvaluation diagnostics:\n$diagnostics\n\n"
        "Recent search rounds:\n$experience\n\n"
        "Identify the most likely root cause of underperformance and a structural hypothesis to address it."
    ),
    Stage.Propose: Template(
        "Diagnosis:\n$diagnosis\n\nAvailable actions (parameters are JSON values):\n$catalog\n\n"
        "Already tried from this node: $tried\n\nWarnings from earlier rounds:\n$warnings\n\n"
        "Propose up to $cap actions applied in order. Reply with one line per action:\n"
        "ACTION: Kind(name=value, ...)\nRATIONALE: <one line>\n"
        "Reply with the single line ACTION: none if nothing here is worth trying."
    ),
    Stage.RefineVariant: Template(
        "Refinement family: $family (variant $variant of attempt $attempt)\n\nProfile:\n$profile\n\n"
        "Focus components: $focus\n\nLatest diagnostics:\n$diagnostics\n\nCurrent content:\n$content\n\n"
        "Return replacement text only for components you change, each as a block introduced by a line\n"
        "=== section: <heading> ===  or  === reference: <path> ===  or  === script: <path> ===\n"
        "or  === frontmatter: <key> ===. Start with 'DONE: yes' if no further refinement is needed, "
        "otherwise 'DONE: no'. Editable components for this family: $editable"
    ),
}

EDITABLE_HELP = {
    RefinementFamily.MetadataLight: "frontmatter values",
    RefinementFamily.MetadataRoutingText: "frontmatter values (especially description)",
    RefinementFamily.InstructionText: "section bodies",
    RefinementFamily.Redistribution: "section bodies and reference files",
    RefinementFamily.ScriptEdit: "scripts and sections that mention them",
}


def prompt_digest(stage: Stage, prompt: str) -> str:
    return hashlib.sha256(f"{TEMPLATE_VERSION}\n{stage.value}\n{prompt}".encode("utf-8")).hexdigest()[:16]


def truncate_to_budget(text: str, budget: int, counter: Callable[[str], int] = count_tokens) -> tuple[str, bool]:
    """Longest word-prefix of ``text`` whose token count fits ``budget``."""
    if counter(text) <= budget:
        return text, False
    ends = [m.end() for m in re.finditer(r"\S+", text)]
    lo, hi = 0, len(ends)
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if counter(text[:ends[mid - 1]]) <= budget:
            lo = mid
        else:
            hi = mid - 1
    return (text[:ends[lo - 1]] if lo else ""), True


def describe_structure(s: Structure) -> str:
    headings = ", ".join(repr(h) if h else "(preamble)" for h in s.section_headings)
    return (
        f"sections: {headings}\n"
        f"references: {', '.join(sorted(s.references)) or 'none'}\n"
        f"scripts: {', '.join(sorted(s.scripts)) or 'none'}\n"
        f"assets: {', '.join(sorted(s.assets)) or 'none'}\n"
        f"frontmatter keys: {', '.join(sorted(s.frontmatter_keys))}"
    )


def render_content(content: ContentState) -> str:
    parts = [f"=== frontmatter: {k} ===\n{_fm_text(content.frontmatter.get(k))}" for k in content.frontmatter.key_order]
    parts += [f"=== section: {h} ===\n{b}" for h, b in content.section_bodies.items()]
    parts += [f"=== reference: {p} ===\n{t}" for p, t in sorted(content.reference_texts.items())]
    parts += [f"=== script: {p} ===\n{t}" for p, t in sorted(content.script_texts.items())]
    return "\n".join(parts)


def _fm_text(value: Any) -> str:
    if isinstance(value, str):
        return value
    if isinstance(value, tuple):
        value = list(value)
    return yaml.safe_dump(value, default_flow_style=True, sort_keys=False).strip()


# ---------------------------------------------------------------------------
# response parsers

_LABEL_RE = re.compile(r"^\s*([A-Z_]+)\s*:\s*(.*)$")
_BLOCK_RE = re.compile(r"^===\s*(section|reference|script|frontmatter)\s*:\s*(.*?)\s*===\s*$")


def parse_labeled(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for line in text.splitlines():
        m = _LABEL_RE.match(line)
        if m:
            out.setdefault(m.group(1), m.group(2).strip())
    return out


def parse_profile(text: str) -> Profile:
    fields = parse_labeled(text)
    summary = fields.get("TASK_SUMMARY", "")
    if not summary:
        raise ActionSyntaxError("response has no TASK_SUMMARY line")

    def items(label: str) -> tuple[str, ...]:
        return tuple(x.strip() for x in fields.get(label, "").split(";") if x.strip())

    kinds = None
    if fields.get("PRIORITY_ACTIONS"):
        names = [x.strip() for x in fields["PRIORITY_ACTIONS"].split(",") if x.strip()]
        unknown = [n for n in names if n not in ActionKind.__members__]
        if unknown:
            raise ActionSyntaxError(f"unknown priority action kinds {unknown}")
        kinds = frozenset(ActionKind(n) for n in names)
    return Profile(summary, items("SUCCESS_CRITERIA"), items("QUALITY_DIMENSIONS"),
                   items("PROMISING_DIRECTIONS"), kinds)


def parse_proposal(text: str, cap: int = DEFAULT_COMPOSITE_CAP) -> list[EditAction]:
    """Actions in order; ``ACTION: none`` alone declines and yields ``[]``."""
    actions = []
    rationale = ""
    declined = False
    for line in text.splitlines():
        m = _LABEL_RE.match(line)
        if not m:
            continue
        if m.group(1) == "ACTION":
            if m.group(2).strip().lower() == "none":
                declined = True
                continue
            actions.append(parse_action(m.group(2)))
        elif m.group(1) == "RATIONALE" and not rationale:
            rationale = m.group(2).strip()
    if not actions:
        if declined:
            return []
        raise ActionSyntaxError("response contains no ACTION line")
    if len(actions) > cap:
        raise ActionSyntaxError(f"{len(actions)} actions exceed the composite cap of {cap}")
    return [EditAction(a.kind, a.params, rationale) for a in actions]


def parse_refinement(text: str) -> tuple[dict[tuple[str, str], str], bool]:
    """Blocks keyed by (component kind, name) and the DONE flag."""
    blocks: dict[tuple[str, str], list[str]] = {}
    current: tuple[str, str] | None = None
    done = False
    for line in text.split("\n"):
        m = _BLOCK_RE.match(line)
        if m:
            current = (m.group(1), m.group(2))
            if current in blocks:
                raise ActionSyntaxError(f"component {current} appears twice")
            blocks[current] = []
        elif current is not None:
            blocks[current].append(line)
        else:
            lm = _LABEL_RE.match(line)
            if lm and lm.group(1) == "DONE":
                done = lm.group(2).strip().lower() in ("yes", "true", "1")
    return {k: "\n".join(v).strip("\n") for k, v in blocks.items()}, done


def apply_refinement(content: ContentState, blocks: Mapping[tuple[str, str], str]) -> ContentState:
    """Replace the named components; unknown components make the variant incompatible."""
    fm = content.frontmatter
    bodies = dict(content.section_bodies)
    refs = dict(content.reference_texts)
    scripts = dict(content.script_texts)
    for (kind, name), text in blocks.items():
        if kind == "frontmatter":
            if name not in fm.key_order:
                raise IncompatibleContent(f"frontmatter has no key {name!r}")
            if name in ("name", "description", "compatibility"):
                value: Any = text.strip()
            else:
                try:
                    value = yaml.safe_load(text)
                except yaml.YAMLError as exc:
                    raise IncompatibleContent(f"bad YAML for {name!r}: {exc}") from exc
            fm = fm.with_value(name, value)
        else:
            table = {"section": bodies, "reference": refs, "script": scripts}[kind]
            if name not in table:
                raise IncompatibleContent(f"no {kind} named {name!r} in this structure")
            table[name] = text if kind == "section" else text.rstrip("\n") + "\n"
    return ContentState(fm, bodies, refs, scripts, content.asset_blobs)


# ---------------------------------------------------------------------------
# backends


class Advisor(Protocol):
    exchanges: list[AdvisorExchange]

    def comprehend_profile(self, seed: SkillPackage) -> Profile: ...

    def analyze(self, structure: Structure, summary_eval: str, profile: Profile, constraints: str) -> str: ...

    def diagnose(self, analysis: str, rich_diagnostics: str, search_experience: Sequence[Mapping[str, Any]]) -> str: ...

    def propose_action(self, diagnosis: str, action_catalog: Sequence[EditAction], warnings: Sequence[str], *,
                       round_index: int = 0, structure: Structure | None = None,
                       tried: Sequence[str] = ()) -> list[EditAction]: ...

    def refine_variant(self, family: RefinementFamily, current_content: ContentState, structure: Structure,
                       profile: Profile | None, feedback: Mapping[str, Any]) -> ContentState: ...

    def refinement_done(self, family: RefinementFamily, attempt_index: int,
                        records: Sequence[AttemptRecord]) -> bool: ...


def comprehend(seed: SkillPackage, advisor: Advisor) -> tuple[Structure, ContentState, Profile]:
    """Initial structure and content (computed locally) plus the advisor's profile."""
    theta = derive_structure(seed)
    phi = extract_content(seed, theta)
    return theta, phi, advisor.comprehend_profile(seed)


def _experience_text(records: Sequence[Mapping[str, Any]]) -> str:
    if not records:
        return "(none yet)"
    lines = []
    for r in records[-3:]:
        lines.append(
            f"round {r.get('round')}: node {r.get('selected')} -> {' + '.join(r.get('actions') or []) or '-'}"
            f" [{r.get('outcome')}{': ' + r['reason'] if r.get('reason') else ''}]"
            + (f" reward {r['reward']:.4f}" if isinstance(r.get("reward"), float) else "")
        )
    return "\n".join(lines)


class BaseAdvisor:
    """Prompt construction, budget enforcement, retries and the exchange log."""

    def __init__(self, budgets: StageBudgets | None = None, token_counter: Callable[[str], int] = count_tokens,
                 composite_cap: int = DEFAULT_COMPOSITE_CAP):
        self.budgets = budgets or StageBudgets()
        self.token_counter = token_counter
        self.composite_cap = composite_cap
        self.exchanges: list[AdvisorExchange] = []
        self._done_flag = False

    # backends implement this
    def complete(self, stage: Stage, prompt: str, max_tokens: int, context: Mapping[str, Any]) -> tuple[str, int | None]:
        raise NotImplementedError

    def _call(self, stage: Stage, prompt: str, context: Mapping[str, Any] | None = None,
              parse: Callable[[str], Any] | None = None, retries: int = 0) -> tuple[str, Any]:
        """One stage exchange; with ``parse`` set, unparseable replies get ``retries`` reparse attempts."""
        budget = self.budgets.for_stage(stage)
        context = dict(context or {})
        attempt_prompt = prompt
        last_error: Exception | None = None
        for attempt in range(retries + 1):
            context["retry"] = attempt
            raw, reported = self.complete(stage, attempt_prompt, budget, context)
            text, truncated = truncate_to_budget(raw, budget, self.token_counter)
            used = self.token_counter(text)
            if reported is not None and reported > budget:
                truncated = True
            self.exchanges.append(AdvisorExchange(stage, prompt_digest(stage, attempt_prompt), text, used,
                                                  attempt, truncated))
            if parse is None:
                return text, None
            try:
                return text, parse(text)
            except (ActionSyntaxError, EditError, ValueError) as exc:
                last_error = exc
                log.info("%s response unparseable (%s)", stage.value, exc)
                attempt_prompt = (f"{prompt}\n\nYour previous reply could not be parsed ({exc}). "
                                  "Reply again using exactly the requested format.")
        raise AdvisorFailure(f"{stage.value} returned unparseable output: {last_error}")

    def comprehend_profile(self, seed: SkillPackage) -> Profile:
        from .package import skill_md_text

        rendered = skill_md_text(seed) + "".join(f"\n--- {p} ---\n{t}" for p, t in seed.references)
        prompt = TEMPLATES[Stage.Comprehend].substitute(
            package=rendered, kinds=", ".join(k.value for k in ActionKind))
        _, profile = self._call(Stage.Comprehend, prompt, {"seed": seed}, parse_profile, retries=1)
        return profile

    def analyze(self, structure: Structure, summary_eval: str, profile: Profile, constraints: str) -> str:
        prompt = TEMPLATES[Stage.Analyze].substitute(
            profile=profile.render(), structure=describe_structure(structure),
            summary=summary_eval or "(no evaluation yet)", constraints=constraints or "(none)")
        text, _ = self._call(Stage.Analyze, prompt, {"structure": structure, "summary": summary_eval,
                                                     "profile": profile})
        return text

    def diagnose(self, analysis: str, rich_diagnostics: str, search_experience: Sequence[Mapping[str, Any]]) -> str:
        prompt = TEMPLATES[Stage.Diagnose].substitute(
            analysis=analysis, diagnostics=rich_diagnostics or "(none)",
            experience=_experience_text(search_experience))
        text, _ = self._call(Stage.Diagnose, prompt, {"analysis": analysis, "diagnostics": rich_diagnostics})
        return text

    def propose_action(self, diagnosis: str, action_catalog: Sequence[EditAction], warnings: Sequence[str], *,
                       round_index: int = 0, structure: Structure | None = None,
                       tried: Sequence[str] = ()) -> list[EditAction]:
        prompt = TEMPLATES[Stage.Propose].substitute(
            diagnosis=diagnosis, catalog=catalog_text(action_catalog),
            tried="; ".join(tried) or "(nothing)",
            warnings="\n".join(f"- {w}" for w in warnings) or "(none)", cap=self.composite_cap)
        context = {"round_index": round_index, "structure": structure, "catalog": action_catalog,
                   "tried": tuple(tried)}
        _, actions = self._call(Stage.Propose, prompt, context,
                                lambda t: parse_proposal(t, self.composite_cap), retries=1)
        allowed = {a.kind for a in action_catalog}
        outside = tuple(sorted({a.kind.value for a in actions if a.kind not in allowed}))
        if outside:
            raise OutOfCatalog(f"proposed kinds not in the catalog: {list(outside)}", outside)
        return actions

    def refine_variant(self, family: RefinementFamily, current_content: ContentState, structure: Structure,
                       profile: Profile | None, feedback: Mapping[str, Any]) -> ContentState:
        prompt = TEMPLATES[Stage.RefineVariant].substitute(
            family=family.value, variant=feedback.get("variant", 0), attempt=feedback.get("attempt", 1),
            profile=profile.render() if profile else "(none)",
            focus=", ".join(feedback.get("focus", ())) or "(none)",
            diagnostics=feedback.get("diagnostics") or "(none)",
            content=render_content(current_content), editable=EDITABLE_HELP[family])
        context = {"family": family, "content": current_content, "structure": structure, **feedback}
        _, (blocks, done) = self._call(Stage.RefineVariant, prompt, context, parse_refinement)
        self._done_flag = done
        candidate = apply_refinement(current_content, blocks)
        check_family_edit(family, current_content, candidate, feedback.get("also_editable", ()))
        return candidate

    def refinement_done(self, family: RefinementFamily, attempt_index: int,
                        records: Sequence[AttemptRecord]) -> bool:
        done, self._done_flag = self._done_flag, False
        return done


class ScriptedAdvisor(BaseAdvisor):
    """Deterministic backend driven by a playbook.

    Playbook keys (all optional except ``profile.task_summary``)::

        profile:      task_summary, success_criteria, quality_dimensions,
                      promising_directions, priority_action_kinds
        rounds:       list of {analysis, diagnosis, proposal} canned replies,
                      consumed by round index (1-based)
        actions:      action set; after ``rounds`` run out the first action not
                      yet tried from the node and applicable there is proposed
        fallback:     "catalog" (cycle through admissible templates) or "none"
        refinements:  family -> list of texts used by successive variants
        stop_after:   attempts after which refinement reports it is done
    """

    def __init__(self, playbook: Mapping[str, Any], **kwargs: Any):
        super().__init__(**kwargs)
        self.playbook = dict(playbook)
        profile = self.playbook.get("profile") or {}
        if not profile.get("task_summary"):
            raise ConfigError("playbook profile needs a task_summary")
        self.rounds = list(self.playbook.get("rounds") or [])
        self.action_set = [a if isinstance(a, EditAction) else parse_action(a)
                           for a in self.playbook.get("actions") or []]
        self.fallback = self.playbook.get("fallback", "catalog")
        self.refinements = {RefinementFamily(k): list(v) for k, v in (self.playbook.get("refinements") or {}).items()}
        self.stop_after = self.playbook.get("stop_after")

    @classmethod
    def from_file(cls, path: str | Path, **kwargs: Any) -> "ScriptedAdvisor":
        try:
            with open(path, encoding="utf-8") as fh:
                data = yaml.safe_load(fh) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read playbook {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: playbook must be a mapping")
        return cls(data, **kwargs)

    def _round(self, round_index: int) -> Mapping[str, Any]:
        if 1 <= round_index <= len(self.rounds):
            return self.rounds[round_index - 1] or {}
        return {}

    def complete(self, stage: Stage, prompt: str, max_tokens: int, context: Mapping[str, Any]) -> tuple[str, int | None]:
        if stage is Stage.Comprehend:
            return self._profile_text(), None
        if stage is Stage.Analyze:
            return self._analysis(context), None
        if stage is Stage.Diagnose:
            return self._diagnosis(context), None
        if stage is Stage.Propose:
            return self._proposal(context), None
        return self._variant(context), None

    def _profile_text(self) -> str:
        p = self.playbook["profile"]
        lines = [f"TASK_SUMMARY: {p['task_summary']}"]
        for label, key in (("SUCCESS_CRITERIA", "success_criteria"), ("QUALITY_DIMENSIONS", "quality_dimensions"),
                           ("PROMISING_DIRECTIONS", "promising_directions")):
            if p.get(key):
                lines.append(f"{label}: {'; '.join(p[key])}")
        if p.get("priority_action_kinds"):
            lines.append(f"PRIORITY_ACTIONS: {', '.join(p['priority_action_kinds'])}")
        return "\n".join(lines)

    def _analysis(self, ctx: Mapping[str, Any]) -> str:
        canned = self._round(self._current_round).get("analysis")
        if canned:
            return canned
        s: Structure = ctx["structure"]
        return (f"The skill has {len(s.section_headings)} sections, {len(s.references)} references, "
                f"{len(s.scripts)} scripts and {len(s.assets)} assets. "
                f"Evaluation: {ctx.get('summary') or 'not yet available'}.")

    def _diagnosis(self, ctx: Mapping[str, Any]) -> str:
        canned = self._round(self._current_round).get("diagnosis")
        diagnostics = ctx.get("diagnostics") or ""
        text = canned or "Likely root cause: guidance the agent needs is not where it looks first."
        if diagnostics:
            text += "\nObserved pattern: " + diagnostics.strip()
        return text

    _current_round = 0

    def begin_round(self, round_index: int) -> None:
        """Select which canned round the next analyze/diagnose/propose calls read."""
        self._current_round = round_index

    def _proposal(self, ctx: Mapping[str, Any]) -> str:
        round_index = ctx.get("round_index") or self._current_round
        canned = self._round(round_index).get("proposal")
        if canned:
            return canned
        structure: Structure | None = ctx.get("structure")
        tried = set(ctx.get("tried") or ())
        catalog: Sequence[EditAction] = ctx.get("catalog") or ()
        if structure is not None:
            for a in self.action_set:
                if a.label() in tried:
                    continue
                try:
                    apply_edit(structure, a)
                except EditError:
                    continue
                return f"ACTION: {a.label()}\nRATIONALE: next untried action from the playbook"
        if self.fallback == "catalog" and catalog:
            fresh = [a for a in catalog if a.label() not in tried] or list(catalog)
            pick = fresh[(round_index * 7) % len(fresh)]
            return f"ACTION: {pick.label()}\nRATIONALE: catalog exploration"
        return "ACTION: none\nRATIONALE: nothing left to try here"

    def _variant(self, ctx: Mapping[str, Any]) -> str:
        family: RefinementFamily = ctx["family"]
        content: ContentState = ctx["content"]
        attempt = int(ctx.get("attempt", 1))
        variant = int(ctx.get("variant", 0))
        idx = (attempt - 1) * int(ctx.get("variants", 1)) + variant
        texts = self.refinements.get(family) or []
        focus = list(ctx.get("focus") or [])
        done = self.stop_after is not None and attempt >= int(self.stop_after)
        head = f"DONE: {'yes' if done else 'no'}"
        text = texts[idx % len(texts)] if texts else None

        desc_block = ""
        if family is not RefinementFamily.MetadataRoutingText and "frontmatter:description" in (ctx.get("also_editable") or ()):
            desc_block = f"\n=== frontmatter: description ===\n{self._description(content, idx)}"
        if family is RefinementFamily.MetadataRoutingText:
            return f"{head}\n=== frontmatter: description ===\n{self._description(content, idx)}"
        if family is RefinementFamily.MetadataLight:
            keys = [k.split(":", 1)[1] for k in focus if k.startswith("frontmatter:")]
            blocks = []
            for key in keys:
                if key not in content.frontmatter.key_order or key in ("name", "description"):
                    continue
                if key == "allowed-tools":
                    value = "[" + (text or "Read") + "]"
                elif key == "metadata":
                    value = "{variant: " + str(idx) + "}"
                else:
                    value = text or f"Variant {idx + 1}"
                blocks.append(f"=== frontmatter: {key} ===\n{value}")
            return "\n".join([head, *blocks])

        if family is RefinementFamily.ScriptEdit:
            paths = [k.split(":", 1)[1] for k in focus if k.startswith("script:")]
            paths = [p for p in paths if p in content.script_texts] or sorted(content.script_texts)[:1]
            if paths:
                body = text or f"print('variant {idx + 1}')"
                code = content.script_texts[paths[0]]
                if STUB in code:
                    code = f'#!/usr/bin/env python3\n"""Helper for {paths[0]}."""\n'
                return f"{head}\n=== script: {paths[0]} ===\n{code.rstrip()}\n{body}{desc_block}"
            return head + desc_block

        # section-text families
        sections = [k.split(":", 1)[1] for k in focus if k.startswith("section:")]
        sections = [h for h in sections if h in content.section_bodies] or list(content.section_bodies)[-1:]
        if not sections:
            return head + desc_block
        target = sections[0]
        body = content.section_bodies[target]
        addition = text or f"- Check {idx + 1}: confirm the final answer matches the question type."
        if body.startswith(STUB):
            body = body[len(STUB):].strip()
            if body.startswith("Guidance for"):
                body = ""
        new_body = f"{body}\n\n{addition}".strip() if addition not in body else body
        return f"{head}\n=== section: {target} ===\n{new_body}{desc_block}"

    def _description(self, content: ContentState, idx: int) -> str:
        texts = self.refinements.get(RefinementFamily.MetadataRoutingText) or []
        if texts:
            return texts[idx % len(texts)]
        return content.frontmatter.description.rstrip(".") + f". Revision {idx + 1}."

    def refinement_done(self, family, attempt_index, records):  # type: ignore[override]
        super().refinement_done(family, attempt_index, records)
        return self.stop_after is not None and attempt_index >= int(self.stop_after)


class RemoteAdvisor(BaseAdvisor):
    """Chat-completion endpoint backend (``POST {base_url}/chat/completions``).

    ``ADVISOR_BASE_URL`` and ``ADVISOR_API_KEY`` supply the endpoint and
    credential when not passed explicitly.
    """

    def __init__(self, model: str, base_url: str | None = None, api_key: str | None = None,
                 client: Any = None, timeout: float = 120.0, **kwargs: Any):
        super().__init__(**kwargs)
        import httpx

        self.model = model
        self.base_url = (base_url or os.environ.get("ADVISOR_BASE_URL") or "").rstrip("/")
        if not self.base_url:
            raise ConfigError("remote advisor needs ADVISOR_BASE_URL")
        self.api_key = api_key if api_key is not None else os.environ.get("ADVISOR_API_KEY", "")
        self.client = client or httpx.Client(timeout=timeout)

    def complete(self, stage: Stage, prompt: str, max_tokens: int, context: Mapping[str, Any]) -> tuple[str, int | None]:
        import httpx

        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        payload = {
            "model": self.model,
            "messages": [{"role": "system", "content": SYSTEM_PROMPT}, {"role": "user", "content": prompt}],
            "max_tokens": max_tokens,
            "temperature": 0,
        }
        last: Exception | None = None
        for _ in range(2):
            try:
                resp = self.client.post(f"{self.base_url}/chat/completions", json=payload, headers=headers)
                resp.raise_for_status()
                data = resp.json()
                text = data["choices"][0]["message"]["content"] or ""
                usage = (data.get("usage") or {}).get("completion_tokens")
                return text, usage
            except (httpx.HTTPError, KeyError, IndexError, TypeError, json.JSONDecodeError) as exc:
                last = exc
                log.warning("advisor request failed: %s", exc)
        raise AdvisorFailure(f"advisor endpoint failed: {last}")


def make_advisor(spec: str, *, base_dir: Path | None = None, model: str | None = None,
                 budgets: StageBudgets | None = None, composite_cap: int = DEFAULT_COMPOSITE_CAP) -> BaseAdvisor:
    """Build a backend from ``scripted:<playbook>`` or ``remote``."""
    kind, _, arg = spec.partition(":")
    if kind == "scripted":
        path = Path(arg)
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        return ScriptedAdvisor.from_file(path, budgets=budgets, composite_cap=composite_cap)
    if kind == "remote":
        return RemoteAdvisor(model or os.environ.get("ADVISOR_MODEL", ""), budgets=budgets,
                             composite_cap=composite_cap)
    raise ConfigError(f"unknown advisor backend {spec!r}")

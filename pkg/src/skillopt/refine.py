"""Inner loop: carry content into an edited structure, refine it in bounded
attempts, gate each attempt with a lower confidence bound and pick one.
"""

from __future__ import annotations

import logging
import math
import re
import statistics
from dataclasses import dataclass
from enum import Enum
from typing import TYPE_CHECKING, Any, Callable, Collection, Iterable, Sequence

from .edits import ActionKind, CarriedNote, EditAction, heading_for_reference
from .errors import (
    AdvisorFailure,
    BridgeFailure,
    EmptyDeltas,
    FamilyViolation,
    IncompatibleContent,
    NoValidAttempts,
)
from .package import (
    BudgetPolicy,
    ContentState,
    Structure,
    ValidationReport,
    check_compatible,
    content_digest,
    recompose,
    validate,
)

if TYPE_CHECKING:
    from .advisor import Advisor, Profile
    from .evaluation import Evaluator

log = logging.getLogger(__name__)

DEFAULT_T_CRIT = 1.833
STUB = "(draft)"


class RefinementFamily(str, Enum):
    MetadataLight = "MetadataLight"
    MetadataRoutingText = "MetadataRoutingText"
    InstructionText = "InstructionText"
    Redistribution = "Redistribution"
    ScriptEdit = "ScriptEdit"

    def __str__(self) -> str:
        return self.value


F = RefinementFamily

_FAMILY_OF = {
    ActionKind.ReviseDescription: F.MetadataRoutingText,
    ActionKind.EditMetadataKeys: F.MetadataLight,
    ActionKind.AddSection: F.InstructionText,
    ActionKind.RemoveSection: F.InstructionText,
    ActionKind.RenameSection: F.InstructionText,
    ActionKind.ReorderSections: F.InstructionText,
    ActionKind.InlineReference: F.Redistribution,
    ActionKind.ExtractToReference: F.Redistribution,
    ActionKind.AddReference: F.Redistribution,
    ActionKind.RemoveReference: F.Redistribution,
    ActionKind.AddScript: F.ScriptEdit,
    ActionKind.RemoveScript: F.ScriptEdit,
    ActionKind.AddAsset: F.MetadataLight,
    ActionKind.RemoveAsset: F.MetadataLight,
}

# highest first
FAMILY_PRIORITY = (F.ScriptEdit, F.Redistribution, F.InstructionText, F.MetadataRoutingText, F.MetadataLight)


def dispatch_family(action: EditAction | Sequence[EditAction]) -> RefinementFamily:
    actions = [action] if isinstance(action, EditAction) else list(action)
    if not actions:
        raise ValueError("cannot dispatch an empty composite")
    families = {_FAMILY_OF[a.kind] for a in actions}
    return next(f for f in FAMILY_PRIORITY if f in families)


# ---------------------------------------------------------------------------
# alignment bridge

_ATX_RE = re.compile(r"^(#{1,6})([ \t]+|$)")
_FENCE_RE = re.compile(r"^[ \t]{0,3}(`{3,}|~{3,})")


def demote_headings(text: str, levels: int = 2) -> str:
    """Push ATX headings down so inlined text cannot open new top sections."""
    out = []
    fence = None
    for line in text.split("\n"):
        fm = _FENCE_RE.match(line)
        if fm:
            marker = fm.group(1)[0] * 3
            fence = marker if fence is None else (None if fm.group(1).startswith(fence) else fence)
        elif fence is None:
            m = _ATX_RE.match(line)
            if m:
                depth = min(6, len(m.group(1)) + levels)
                line = "#" * depth + line[len(m.group(1)):]
        out.append(line)
    return "\n".join(out)


def section_stub(heading: str) -> str:
    return f"{STUB} Guidance for {heading}."


def reference_stub(path: str) -> str:
    return f"# {heading_for_reference(path)}\n\n{STUB} Supporting notes.\n"


def script_stub(path: str) -> str:
    return f'#!/usr/bin/env python3\n"""{STUB} Helper script {path}."""\n'


def asset_stub(path: str) -> bytes:
    return f"{STUB}\n".encode()


def metadata_stub(key: str) -> Any:
    if key == "allowed-tools":
        return []
    if key == "metadata":
        return {}
    return STUB


def _split_key(key: str) -> tuple[str, str]:
    kind, sep, name = key.partition(":")
    if not sep:
        raise BridgeFailure(f"malformed content key {key!r}")
    return kind, name


def _lookup(content: ContentState, key: str) -> str:
    kind, name = _split_key(key)
    table = {
        "section": content.section_bodies,
        "reference": content.reference_texts,
        "script": content.script_texts,
    }.get(kind)
    if table is None or name not in table:
        raise BridgeFailure(f"carried note refers to unknown content {key!r}")
    return table[name]


def _strip_title(text: str, heading: str) -> str:
    """Drop a leading ``# heading`` line that would repeat the target section's title."""
    lines = text.lstrip("\n").split("\n", 1)
    if lines[0].strip() == f"# {heading}":
        return lines[1] if len(lines) > 1 else ""
    return text


def align_content(old_content: ContentState, old_structure: Structure, new_structure: Structure,
                  note: CarriedNote) -> ContentState:
    """Transfer content into ``new_structure``.

    Kept components carry their text verbatim, renamed sections keep their
    body, moved text lands in its target, new components get stubs and removed
    ones are dropped.
    """
    check_compatible(old_content, old_structure)
    for old, _ in note.renamed_sections:
        if old not in old_content.section_bodies:
            raise BridgeFailure(f"renamed section {old!r} does not exist")
    for key in note.removed_sections:
        if key not in old_content.section_bodies:
            raise BridgeFailure(f"removed section {key!r} does not exist")

    moved: dict[str, list[str]] = {}
    for src, dst in note.moves:
        text = _lookup(old_content, src)
        src_kind, src_name = _split_key(src)
        dst_kind, dst_name = _split_key(dst)
        if dst_kind == "section":
            text = demote_headings(_strip_title(text, dst_name))
        elif dst_kind == "reference" and src_kind == "section":
            text = f"# {src_name}\n\n{text}\n"
        moved.setdefault(dst, []).append(text)

    renamed_from = {new: old for old, new in note.renamed_sections}
    bodies: dict[str, str] = {}
    for h in new_structure.section_headings:
        incoming = moved.pop(f"section:{h}", [])
        if h in old_content.section_bodies:
            body = old_content.section_bodies[h]
        elif h in renamed_from:
            body = old_content.section_bodies[renamed_from[h]]
        elif incoming:
            body = ""
        else:
            body = section_stub(h)
        bodies[h] = "\n\n".join(part.strip("\n") for part in [body, *incoming] if part.strip())

    refs = {}
    for p in sorted(new_structure.references):
        incoming = moved.pop(f"reference:{p}", [])
        if p in old_content.reference_texts:
            refs[p] = old_content.reference_texts[p]
        elif incoming:
            refs[p] = "\n".join(incoming)
        else:
            refs[p] = reference_stub(p)

    if moved:
        raise BridgeFailure(f"move targets missing from the new structure: {sorted(moved)}")

    scripts = {p: old_content.script_texts.get(p, script_stub(p)) for p in sorted(new_structure.scripts)}
    assets = {p: old_content.asset_blobs.get(p, asset_stub(p)) for p in sorted(new_structure.assets)}

    fm = old_content.frontmatter
    for key in fm.key_order:
        if key not in new_structure.frontmatter_keys:
            fm = fm.without(key)
    for key in sorted(new_structure.frontmatter_keys - set(fm.key_order)):
        fm = fm.with_value(key, metadata_stub(key))

    aligned = ContentState(fm, bodies, refs, scripts, assets)
    check_compatible(aligned, new_structure)
    return aligned


# ---------------------------------------------------------------------------
# family edit sets


def changed_components(before: ContentState, after: ContentState) -> set[str]:
    """Content keys whose value differs between two states."""
    out = set()
    for key in set(before.frontmatter.key_order) | set(after.frontmatter.key_order):
        if before.frontmatter.get(key) != after.frontmatter.get(key):
            out.add(f"frontmatter:{key}")
    if before.frontmatter.key_order != after.frontmatter.key_order:
        out.add("frontmatter:*order")
    for kind, a, b in (
        ("section", before.section_bodies, after.section_bodies),
        ("reference", before.reference_texts, after.reference_texts),
        ("script", before.script_texts, after.script_texts),
        ("asset", before.asset_blobs, after.asset_blobs),
    ):
        for key in set(a) | set(b):
            if a.get(key) != b.get(key):
                out.add(f"{kind}:{key}")
    return out


def editable(family: RefinementFamily, key: str, before: ContentState, after: ContentState) -> bool:
    kind, name = key.split(":", 1)
    if family in (F.MetadataLight, F.MetadataRoutingText):
        return kind == "frontmatter"
    if family is F.InstructionText:
        return kind == "section"
    if family is F.Redistribution:
        return kind in ("section", "reference")
    if family is F.ScriptEdit:
        if kind == "script":
            return True
        if kind == "section":
            scripts = set(before.script_texts) | set(after.script_texts)
            texts = before.section_bodies.get(name, "") + after.section_bodies.get(name, "")
            return any(p in texts for p in scripts)
    return False


def check_family_edit(family: RefinementFamily, before: ContentState, after: ContentState,
                      also: Collection[str] = ()) -> None:
    """Raise FamilyViolation when ``after`` touches components outside the family.

    ``also`` lists extra content keys the triggering edit explicitly revised
    (a composite's description revision stays editable under Redistribution).
    """
    bad = sorted(k for k in changed_components(before, after)
                 if k not in also and not editable(family, k, before, after))
    if bad:
        raise FamilyViolation(f"{family.value} may not edit {bad}")


# ---------------------------------------------------------------------------
# statistics


def lcb(deltas: Sequence[float], t_crit: float) -> float:
    """Lower confidence bound ``mean - t_crit * s / sqrt(k)``; ``s = 0`` when k = 1."""
    if not deltas:
        raise EmptyDeltas("lcb needs at least one delta")
    k = len(deltas)
    mean = statistics.fmean(deltas)
    s = statistics.stdev(deltas) if k > 1 else 0.0
    return mean - t_crit * s / math.sqrt(k)


def confidence(deltas: Sequence[float]) -> float:
    """Evidence strength in [0, 1): ``k/(k+1)`` times the share of positive deltas."""
    k = len(deltas)
    if k == 0:
        return 0.0
    return k / (k + 1) * sum(1 for d in deltas if d > 0) / k


@dataclass(frozen=True)
class RefinementBudget:
    max_attempts: int = 2
    t_crit: float = DEFAULT_T_CRIT
    variants_per_attempt: int = 3

    def __post_init__(self) -> None:
        if self.max_attempts < 1 or self.variants_per_attempt < 1:
            raise ValueError("max_attempts and variants_per_attempt must be >= 1")
        if self.t_crit < 0:
            raise ValueError("t_crit must be nonnegative")


@dataclass
class AttemptRecord:
    attempt_index: int
    content: ContentState
    deltas: tuple[float, ...]
    mean_delta: float
    sample_sd: float
    lcb: float
    gate_passed: bool
    confidence: float
    reward: float
    diagnostics: str = ""
    valid: bool = True
    variant_rewards: tuple[float, ...] = ()
    discarded: tuple[str, ...] = ()
    digest: str = ""

    def to_dict(self) -> dict[str, Any]:
        return {
            "attempt": self.attempt_index,
            "valid": self.valid,
            "deltas": list(self.deltas),
            "mean_delta": self.mean_delta,
            "sample_sd": self.sample_sd,
            "lcb": _finite(self.lcb),
            "gate_passed": self.gate_passed,
            "confidence": self.confidence,
            "reward": _finite(self.reward),
            "discarded": list(self.discarded),
            "digest": self.digest,
        }


def _finite(x: float) -> float | None:
    return x if math.isfinite(x) else None


def make_record(attempt_index: int, content: ContentState, rewards: Sequence[float], baseline: float,
                t_crit: float, **extra: Any) -> AttemptRecord:
    deltas = tuple(r - baseline for r in rewards)
    k = len(deltas)
    mean = statistics.fmean(deltas)
    sd = statistics.stdev(deltas) if k > 1 else 0.0
    bound = lcb(deltas, t_crit)
    return AttemptRecord(
        attempt_index=attempt_index,
        content=content,
        deltas=deltas,
        mean_delta=mean,
        sample_sd=sd,
        lcb=bound,
        gate_passed=bound >= 0,
        confidence=confidence(deltas),
        reward=max(rewards),
        variant_rewards=tuple(rewards),
        **extra,
    )


def _rank_key(r: AttemptRecord) -> tuple:
    return (not r.gate_passed, -r.mean_delta, -r.confidence, r.attempt_index)


def rank_and_select(records: Iterable[AttemptRecord]) -> AttemptRecord:
    """Gate first, then mean improvement, then confidence, then earliest attempt."""
    valid = [r for r in records if r.valid]
    if not valid:
        raise NoValidAttempts("no attempt produced valid content")
    return min(valid, key=_rank_key)


# ---------------------------------------------------------------------------
# refinement loop


def refine(
    aligned: ContentState,
    structure: Structure,
    family: RefinementFamily,
    advisor: "Advisor",
    evaluator: "Evaluator",
    budget: RefinementBudget,
    baseline_reward: float,
    *,
    profile: "Profile | None" = None,
    focus: Sequence[str] = (),
    policy: BudgetPolicy | None = None,
    validator: Callable[..., ValidationReport] = validate,
    also_editable: Collection[str] = (),
) -> list[AttemptRecord]:
    """Run up to ``budget.max_attempts`` sequential attempts starting from ``aligned``."""
    check_compatible(aligned, structure)
    policy = policy or BudgetPolicy()
    current = aligned
    diagnostics = ""
    records: list[AttemptRecord] = []
    for m in range(1, budget.max_attempts + 1):
        variants: list[ContentState] = []
        discarded: list[str] = []
        for v in range(budget.variants_per_attempt):
            feedback = {
                "focus": list(focus),
                "attempt": m,
                "variant": v,
                "variants": budget.variants_per_attempt,
                "diagnostics": diagnostics,
                "baseline_reward": baseline_reward,
                "also_editable": list(also_editable),
            }
            try:
                candidate = advisor.refine_variant(family, current, structure, profile, feedback)
                check_family_edit(family, current, candidate, also_editable)
                report = validator(recompose(candidate, structure), policy)
            except (FamilyViolation, IncompatibleContent, AdvisorFailure) as exc:
                discarded.append(f"variant {v}: {type(exc).__name__}: {exc}")
                continue
            if not report.valid:
                codes = ",".join(i.code for i in report.errors)
                discarded.append(f"variant {v}: invalid ({codes})")
                continue
            variants.append(candidate)

        if not variants:
            log.info("attempt %d produced no valid variant", m)
            records.append(AttemptRecord(
                attempt_index=m, content=current, deltas=(), mean_delta=0.0, sample_sd=0.0,
                lcb=-math.inf, gate_passed=False, confidence=0.0, reward=float("nan"),
                valid=False, discarded=tuple(discarded),
            ))
            continue

        reports = [evaluator.evaluate(structure, c) for c in variants]
        rewards = [rep.reward for rep in reports]
        best = max(range(len(variants)), key=lambda i: (rewards[i], -i))
        record = make_record(
            m, variants[best], rewards, baseline_reward, budget.t_crit,
            diagnostics=reports[best].diagnostics,
            discarded=tuple(discarded),
            digest=content_digest(variants[best], structure),
        )
        records.append(record)
        current = variants[best]
        diagnostics = reports[best].diagnostics
        if advisor.refinement_done(family, m, records):
            break
    return records

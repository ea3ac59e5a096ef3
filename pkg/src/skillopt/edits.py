"""Structure edit actions and the transition map ``structure -> structure``.

Actions have a canonical one-line text form, e.g.::

    InlineReference(path="references/question-types.md", into="Question Types")
    ReorderSections(perm=[0, 2, 1])

Parameter values are JSON literals. The same form is used by advisors to
propose actions, in run logs and as node labels in exported trees.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Iterable, Mapping, Sequence

from .errors import ActionSyntaxError, BadParams, InadmissibleAction
from .package import PREAMBLE, REQUIRED_KEYS, Structure, _check_path

DEFAULT_COMPOSITE_CAP = 3

# optional metadata keys an EditMetadataKeys template may add
OPTIONAL_METADATA_KEYS = ("compatibility", "allowed-tools", "license", "metadata")


class ActionKind(str, Enum):
    AddSection = "AddSection"
    RemoveSection = "RemoveSection"
    ReorderSections = "ReorderSections"
    RenameSection = "RenameSection"
    AddReference = "AddReference"
    RemoveReference = "RemoveReference"
    InlineReference = "InlineReference"
    ExtractToReference = "ExtractToReference"
    AddScript = "AddScript"
    RemoveScript = "RemoveScript"
    AddAsset = "AddAsset"
    RemoveAsset = "RemoveAsset"
    EditMetadataKeys = "EditMetadataKeys"
    ReviseDescription = "ReviseDescription"

    def __str__(self) -> str:
        return self.value


K = ActionKind

# (required, optional) parameter names per kind
PARAMS: dict[ActionKind, tuple[tuple[str, ...], tuple[str, ...]]] = {
    K.AddSection: (("heading",), ("anchor",)),
    K.RemoveSection: (("heading",), ()),
    K.ReorderSections: (("perm",), ()),
    K.RenameSection: (("heading", "new_heading"), ()),
    K.AddReference: (("path",), ()),
    K.RemoveReference: (("path",), ()),
    K.InlineReference: (("path", "into"), ("anchor",)),
    K.ExtractToReference: (("heading", "path"), ()),
    K.AddScript: (("path",), ()),
    K.RemoveScript: (("path",), ()),
    K.AddAsset: (("path",), ()),
    K.RemoveAsset: (("path",), ()),
    K.EditMetadataKeys: ((), ("add", "remove")),
    K.ReviseDescription: ((), ("hint",)),
}

PARAM_DOCS: dict[ActionKind, str] = {
    K.AddSection: "heading: new level-2 heading; anchor: optional existing heading to insert after (default: append)",
    K.RemoveSection: "heading: existing heading",
    K.ReorderSections: "perm: list of indices, new order as positions of current headings; the untitled preamble stays first",
    K.RenameSection: "heading: existing heading; new_heading: unused heading",
    K.AddReference: "path: new file under references/",
    K.RemoveReference: "path: existing reference file",
    K.InlineReference: "path: existing reference file; into: heading receiving its text (created when missing); anchor: optional",
    K.ExtractToReference: "heading: existing heading; path: new file under references/",
    K.AddScript: "path: new file under scripts/",
    K.RemoveScript: "path: existing script file",
    K.AddAsset: "path: new file under assets/",
    K.RemoveAsset: "path: existing asset file",
    K.EditMetadataKeys: "add: list of optional frontmatter keys to add; remove: list of optional keys to drop",
    K.ReviseDescription: "hint: optional guidance for the rewritten description",
}


@dataclass(frozen=True)
class EditAction:
    kind: ActionKind
    params: dict[str, Any] = field(default_factory=dict)
    rationale: str = field(default="", compare=False)

    def __post_init__(self) -> None:
        try:
            object.__setattr__(self, "kind", ActionKind(self.kind))
        except ValueError as exc:
            raise BadParams(f"unknown action kind {self.kind!r}") from exc
        object.__setattr__(self, "params", dict(self.params))

    def label(self) -> str:
        args = ", ".join(f"{k}={json.dumps(v, ensure_ascii=False)}" for k, v in self.params.items())
        return f"{self.kind.value}({args})"

    def __str__(self) -> str:
        return self.label()

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind.value, "params": dict(self.params), "rationale": self.rationale}


def composite_label(actions: Sequence[EditAction]) -> str:
    return " + ".join(a.label() for a in actions)


_IDENT_RE = re.compile(r"\s*([A-Za-z_][A-Za-z0-9_]*)\s*")


def parse_action(text: str) -> EditAction:
    """Parse the canonical ``Kind(name=json, ...)`` form."""
    decoder = json.JSONDecoder()
    m = _IDENT_RE.match(text)
    if not m:
        raise ActionSyntaxError(f"expected an action kind in {text!r}")
    kind = m.group(1)
    if kind not in ActionKind.__members__:
        raise ActionSyntaxError(f"unknown action kind {kind!r}")
    pos = m.end()
    params: dict[str, Any] = {}
    if pos < len(text) and text[pos] == "(":
        pos += 1
        while True:
            while pos < len(text) and text[pos].isspace():
                pos += 1
            if pos < len(text) and text[pos] == ")":
                pos += 1
                break
            m = _IDENT_RE.match(text, pos)
            if not m or m.end() >= len(text) or text[m.end()] != "=":
                raise ActionSyntaxError(f"expected name=value at offset {pos} in {text!r}")
            name = m.group(1)
            pos = m.end() + 1
            while pos < len(text) and text[pos].isspace():
                pos += 1
            try:
                value, pos = decoder.raw_decode(text, pos)
            except json.JSONDecodeError as exc:
                raise ActionSyntaxError(f"bad value for {name!r} in {text!r}") from exc
            params[name] = value
            while pos < len(text) and text[pos].isspace():
                pos += 1
            if pos < len(text) and text[pos] == ",":
                pos += 1
            elif pos < len(text) and text[pos] == ")":
                pos += 1
                break
            else:
                raise ActionSyntaxError(f"expected ',' or ')' at offset {pos} in {text!r}")
    if text[pos:].strip():
        raise ActionSyntaxError(f"trailing text after action: {text[pos:]!r}")
    return EditAction(ActionKind(kind), params)


# ---------------------------------------------------------------------------
# structural diffs


@dataclass(frozen=True)
class CarriedNote:
    """Which content keys an edit added, removed, renamed or moved.

    Content keys look like ``section:<heading>``, ``reference:<path>``,
    ``script:<path>``, ``asset:<path>`` and ``frontmatter:<key>``.
    """

    added_sections: tuple[str, ...] = ()
    removed_sections: tuple[str, ...] = ()
    renamed_sections: tuple[tuple[str, str], ...] = ()
    reordered: bool = False
    added_references: tuple[str, ...] = ()
    removed_references: tuple[str, ...] = ()
    added_scripts: tuple[str, ...] = ()
    removed_scripts: tuple[str, ...] = ()
    added_assets: tuple[str, ...] = ()
    removed_assets: tuple[str, ...] = ()
    added_keys: tuple[str, ...] = ()
    removed_keys: tuple[str, ...] = ()
    moves: tuple[tuple[str, str], ...] = ()
    revised: tuple[str, ...] = ()

    def structural(self) -> "CarriedNote":
        return replace(self, moves=(), revised=())

    def is_empty(self) -> bool:
        return self == CarriedNote()

    def focus_keys(self) -> tuple[str, ...]:
        """Content keys that refinement should concentrate on."""
        keys = list(self.revised)
        keys += [f"section:{h}" for h in self.added_sections]
        keys += [f"section:{new}" for _, new in self.renamed_sections]
        keys += [f"reference:{p}" for p in self.added_references]
        keys += [f"script:{p}" for p in self.added_scripts]
        keys += [f"asset:{p}" for p in self.added_assets]
        keys += [f"frontmatter:{k}" for k in self.added_keys]
        return tuple(dict.fromkeys(keys))

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {}
        for name in self.__dataclass_fields__:
            value = getattr(self, name)
            if value:
                out[name] = [list(v) for v in value] if name in ("renamed_sections", "moves") else (
                    list(value) if isinstance(value, tuple) else value)
        return out


@dataclass(frozen=True)
class EditOutcome:
    new_structure: Structure
    carried_note: CarriedNote


def diff_structures(before: Structure, after: Structure, detect_renames: bool = True) -> CarriedNote:
    """Added/removed/renamed/reordered components between two structures.

    A rename is inferred when the heading lists have equal length and a removed
    heading's slot is taken by an added one.
    """
    bh, ah = before.section_headings, after.section_headings
    removed = [h for h in bh if h not in ah]
    added = [h for h in ah if h not in bh]
    renamed: list[tuple[str, str]] = []
    if detect_renames and len(bh) == len(ah):
        for i, h in enumerate(bh):
            if h in removed and ah[i] in added:
                renamed.append((h, ah[i]))
        for old, new in renamed:
            removed.remove(old)
            added.remove(new)
    return _note_with(before, after, added, removed, renamed)


def _note_with(before: Structure, after: Structure, added: list[str], removed: list[str],
               renamed: list[tuple[str, str]]) -> CarriedNote:
    rename_map = dict(renamed)
    before_kept = [rename_map.get(h, h) for h in before.section_headings if h not in removed]
    after_kept = [h for h in after.section_headings if h not in added]
    return CarriedNote(
        added_sections=tuple(added),
        removed_sections=tuple(removed),
        renamed_sections=tuple(renamed),
        reordered=before_kept != after_kept,
        added_references=tuple(sorted(after.references - before.references)),
        removed_references=tuple(sorted(before.references - after.references)),
        added_scripts=tuple(sorted(after.scripts - before.scripts)),
        removed_scripts=tuple(sorted(before.scripts - after.scripts)),
        added_assets=tuple(sorted(after.assets - before.assets)),
        removed_assets=tuple(sorted(before.assets - after.assets)),
        added_keys=tuple(sorted(after.frontmatter_keys - before.frontmatter_keys)),
        removed_keys=tuple(sorted(before.frontmatter_keys - after.frontmatter_keys)),
    )


# ---------------------------------------------------------------------------
# transition map


def _check_params(a: EditAction) -> None:
    required, optional = PARAMS[a.kind]
    missing = [p for p in required if p not in a.params]
    if missing:
        raise BadParams(f"{a.kind.value} is missing parameters {missing}")
    unknown = [p for p in a.params if p not in required and p not in optional]
    if unknown:
        raise BadParams(f"{a.kind.value} does not accept parameters {unknown}")


def _heading_param(a: EditAction, name: str) -> str:
    value = a.params.get(name)
    if not isinstance(value, str) or not value.strip() or value != value.strip() or "\n" in value:
        raise BadParams(f"{a.kind.value}.{name} must be a non-empty single-line heading, got {value!r}")
    return value


def _path_param(a: EditAction, prefix: str) -> str:
    value = a.params.get("path")
    if not isinstance(value, str):
        raise BadParams(f"{a.kind.value}.path must be a string")
    try:
        _check_path(value)
    except Exception as exc:
        raise BadParams(str(exc)) from exc
    if not value.startswith(prefix) or value == prefix:
        raise BadParams(f"{a.kind.value}.path must live under {prefix}")
    return value


def _insert(headings: list[str], heading: str, anchor: Any) -> list[str]:
    if anchor is None:
        return headings + [heading]
    if anchor not in headings:
        raise BadParams(f"anchor heading {anchor!r} does not exist")
    i = headings.index(anchor) + 1
    return headings[:i] + [heading] + headings[i:]


def _key_list(a: EditAction, name: str) -> list[str]:
    value = a.params.get(name, [])
    if isinstance(value, str):
        value = [value]
    if not isinstance(value, list) or not all(isinstance(v, str) and v for v in value):
        raise BadParams(f"{a.kind.value}.{name} must be a list of key names")
    if len(set(value)) != len(value):
        raise BadParams(f"{a.kind.value}.{name} lists a key twice")
    return value


def apply_edit(s: Structure, a: EditAction) -> EditOutcome:
    """Successor structure for one primitive action, plus the carried note."""
    _check_params(a)
    headings = list(s.section_headings)
    kind = a.kind
    new = s
    note = CarriedNote()

    if kind is K.AddSection:
        h = _heading_param(a, "heading")
        if h in headings:
            raise BadParams(f"section {h!r} already exists")
        new = replace(s, section_headings=tuple(_insert(headings, h, a.params.get("anchor"))))
        note = CarriedNote(added_sections=(h,), revised=(f"section:{h}",))

    elif kind is K.RemoveSection:
        if len(headings) < 2:
            raise InadmissibleAction("cannot remove the only section")
        h = a.params["heading"]
        if h not in headings:
            raise BadParams(f"no section {h!r}")
        headings.remove(h)
        new = replace(s, section_headings=tuple(headings))
        note = CarriedNote(removed_sections=(h,))

    elif kind is K.ReorderSections:
        if len(s.movable_headings) < 2:
            raise InadmissibleAction("need at least two titled sections to reorder")
        perm = a.params["perm"]
        if (not isinstance(perm, list) or not all(isinstance(i, int) and not isinstance(i, bool) for i in perm)
                or sorted(perm) != list(range(len(headings)))):
            raise BadParams(f"perm must be a permutation of 0..{len(headings) - 1}, got {perm!r}")
        if headings and headings[0] == PREAMBLE and perm[0] != 0:
            raise BadParams("the preamble must stay first")
        order = tuple(headings[i] for i in perm)
        new = replace(s, section_headings=order)
        note = CarriedNote(reordered=order != s.section_headings)

    elif kind is K.RenameSection:
        if not s.movable_headings:
            raise InadmissibleAction("no titled section to rename")
        old = a.params["heading"]
        if old not in headings or old == PREAMBLE:
            raise BadParams(f"no titled section {old!r}")
        h = _heading_param(a, "new_heading")
        if h in headings:
            raise BadParams(f"section {h!r} already exists")
        headings[headings.index(old)] = h
        new = replace(s, section_headings=tuple(headings))
        note = CarriedNote(renamed_sections=((old, h),), revised=(f"section:{h}",))

    elif kind in (K.AddReference, K.AddScript, K.AddAsset):
        attr, prefix = _FILE_KINDS[kind]
        path = _path_param(a, prefix)
        if path in getattr(s, attr):
            raise BadParams(f"{path} already exists")
        new = replace(s, **{attr: getattr(s, attr) | {path}})
        note = CarriedNote(**{f"added_{attr}": (path,)}, revised=(f"{attr[:-1]}:{path}",))

    elif kind in (K.RemoveReference, K.RemoveScript, K.RemoveAsset):
        attr, _ = _FILE_KINDS[kind]
        if not getattr(s, attr):
            raise InadmissibleAction(f"structure has no {attr}")
        path = a.params["path"]
        if path not in getattr(s, attr):
            raise BadParams(f"no such file {path!r}")
        new = replace(s, **{attr: getattr(s, attr) - {path}})
        note = CarriedNote(**{f"removed_{attr}": (path,)})

    elif kind is K.InlineReference:
        if not s.references:
            raise InadmissibleAction("structure has no references to inline")
        path = a.params["path"]
        if path not in s.references:
            raise BadParams(f"no reference {path!r}")
        into = _heading_param(a, "into")
        added: tuple[str, ...] = ()
        if into not in headings:
            headings = _insert(headings, into, a.params.get("anchor"))
            added = (into,)
        elif "anchor" in a.params:
            raise BadParams("anchor only applies when the target section is new")
        new = replace(s, section_headings=tuple(headings), references=s.references - {path})
        note = CarriedNote(
            added_sections=added,
            removed_references=(path,),
            moves=((f"reference:{path}", f"section:{into}"),),
            revised=(f"section:{into}",),
        )

    elif kind is K.ExtractToReference:
        if len(s.movable_headings) < 1 or len(headings) < 2:
            raise InadmissibleAction("need a titled section and at least one other section")
        h = a.params["heading"]
        if h not in headings or h == PREAMBLE:
            raise BadParams(f"no titled section {h!r}")
        path = _path_param(a, "references/")
        if path in s.references:
            raise BadParams(f"{path} already exists")
        headings.remove(h)
        new = replace(s, section_headings=tuple(headings), references=s.references | {path})
        note = CarriedNote(
            removed_sections=(h,),
            added_references=(path,),
            moves=((f"section:{h}", f"reference:{path}"),),
            revised=(f"reference:{path}",),
        )

    elif kind is K.EditMetadataKeys:
        add = _key_list(a, "add")
        remove = _key_list(a, "remove")
        if not add and not remove:
            raise BadParams("EditMetadataKeys needs keys to add or remove")
        for key in add + remove:
            if key in REQUIRED_KEYS:
                raise BadParams(f"{key!r} is required and cannot be added or removed")
        for key in add:
            if key in s.frontmatter_keys:
                raise BadParams(f"frontmatter already has {key!r}")
        for key in remove:
            if key not in s.frontmatter_keys:
                raise BadParams(f"frontmatter has no {key!r}")
        if set(add) & set(remove):
            raise BadParams("a key cannot be both added and removed")
        new = replace(s, frontmatter_keys=(s.frontmatter_keys | set(add)) - set(remove))
        note = CarriedNote(
            added_keys=tuple(sorted(add)),
            removed_keys=tuple(sorted(remove)),
            revised=tuple(f"frontmatter:{k}" for k in add),
        )

    elif kind is K.ReviseDescription:
        note = CarriedNote(revised=("frontmatter:description",))

    return EditOutcome(new, note)


_FILE_KINDS = {
    K.AddReference: ("references", "references/"),
    K.RemoveReference: ("references", "references/"),
    K.AddScript: ("scripts", "scripts/"),
    K.RemoveScript: ("scripts", "scripts/"),
    K.AddAsset: ("assets", "assets/"),
    K.RemoveAsset: ("assets", "assets/"),
}


def apply_edits(s: Structure, actions: Sequence[EditAction], cap: int = DEFAULT_COMPOSITE_CAP) -> EditOutcome:
    """Apply a composite edit atomically; the result describes the net change."""
    if not actions:
        raise BadParams("empty composite edit")
    if len(actions) > cap:
        raise BadParams(f"composite edit of {len(actions)} actions exceeds the cap of {cap}")
    if len(actions) == 1:
        return apply_edit(s, actions[0])

    current = s
    moves: list[tuple[str, str]] = []
    revised: list[str] = []
    origin: dict[str, str] = {}
    for a in actions:
        outcome = apply_edit(current, a)
        for old, new in outcome.carried_note.renamed_sections:
            origin[new] = origin.pop(old, old)
        for h in outcome.carried_note.removed_sections:
            origin.pop(h, None)
        moves.extend(outcome.carried_note.moves)
        revised.extend(outcome.carried_note.revised)
        current = outcome.new_structure

    final = current
    renamed = [(orig, new) for new, orig in origin.items()
               if orig in s.section_headings and orig not in final.section_headings
               and new in final.section_headings and new not in s.section_headings]
    raw = diff_structures(s, final, detect_renames=False)
    added = [h for h in raw.added_sections if h not in {n for _, n in renamed}]
    removed = [h for h in raw.removed_sections if h not in {o for o, _ in renamed}]
    note = _note_with(s, final, added, removed, renamed)
    live = _content_keys(final)
    note = replace(
        note,
        moves=tuple(dict.fromkeys(moves)),
        revised=tuple(k for k in dict.fromkeys(revised) if k in live),
    )
    return EditOutcome(final, note)


def _content_keys(s: Structure) -> set[str]:
    keys = {f"section:{h}" for h in s.section_headings}
    keys |= {f"reference:{p}" for p in s.references}
    keys |= {f"script:{p}" for p in s.scripts}
    keys |= {f"asset:{p}" for p in s.assets}
    keys |= {f"frontmatter:{k}" for k in s.frontmatter_keys}
    return keys


# ---------------------------------------------------------------------------
# admissible action templates


def _unique(candidate: str, taken: Iterable[str]) -> str:
    taken = set(taken)
    if candidate not in taken:
        return candidate
    stem, dot, ext = candidate.rpartition(".") if "/" in candidate else (candidate, "", "")
    i = 2
    while True:
        name = f"{stem}-{i}.{ext}" if dot else f"{candidate} {i}"
        if name not in taken:
            return name
        i += 1


def _slug(text: str) -> str:
    slug = re.sub(r"[^a-z0-9]+", "-", text.lower()).strip("-")
    return slug or "section"


def heading_for_reference(path: str) -> str:
    stem = path.rsplit("/", 1)[-1].rsplit(".", 1)[0]
    words = re.split(r"[-_\s]+", stem)
    return " ".join(w.capitalize() for w in words if w) or "Reference"


def admissible_actions(s: Structure, whitelist: Iterable[str] | None = None) -> list[EditAction]:
    """Concrete, applicable action templates at ``s``.

    Kinds whose parameters are free (new headings, new paths) get a default
    filled in; advisors are expected to override those values.
    """
    allowed = None if whitelist is None else {ActionKind(k) for k in whitelist}
    headings = s.section_headings
    movable = s.movable_headings
    out: list[EditAction] = []

    def emit(kind: ActionKind, **params: Any) -> None:
        if allowed is None or kind in allowed:
            out.append(EditAction(kind, params))

    emit(K.AddSection, heading=_unique("New Section", headings))
    if len(headings) >= 2:
        for h in headings:
            emit(K.RemoveSection, heading=h)
    if len(movable) >= 2:
        perm = list(range(len(headings)))
        start = 1 if headings[0] == PREAMBLE else 0
        perm[start:] = reversed(perm[start:])
        emit(K.ReorderSections, perm=perm)
    for h in movable:
        emit(K.RenameSection, heading=h, new_heading=_unique(f"{h} (Revised)", headings))
    emit(K.AddReference, path=_unique("references/notes.md", s.references))
    for p in sorted(s.references):
        emit(K.RemoveReference, path=p)
        emit(K.InlineReference, path=p, into=heading_for_reference(p))
    if len(headings) >= 2:
        for h in movable:
            emit(K.ExtractToReference, heading=h, path=_unique(f"references/{_slug(h)}.md", s.references))
    emit(K.AddScript, path=_unique("scripts/helper.py", s.scripts))
    for p in sorted(s.scripts):
        emit(K.RemoveScript, path=p)
    emit(K.AddAsset, path=_unique("assets/template.txt", s.assets))
    for p in sorted(s.assets):
        emit(K.RemoveAsset, path=p)
    absent = [k for k in OPTIONAL_METADATA_KEYS if k not in s.frontmatter_keys]
    if absent:
        emit(K.EditMetadataKeys, add=[absent[0]])
    for k in sorted(s.frontmatter_keys - set(REQUIRED_KEYS)):
        emit(K.EditMetadataKeys, remove=[k])
    emit(K.ReviseDescription)
    return out


def admissible_kinds(s: Structure, whitelist: Iterable[str] | None = None) -> set[ActionKind]:
    return {a.kind for a in admissible_actions(s, whitelist)}


def catalog_text(actions: Sequence[EditAction]) -> str:
    """Human/LLM-readable catalog: one line per kind with its parameter schema and examples."""
    lines = []
    by_kind: dict[ActionKind, list[EditAction]] = {}
    for a in actions:
        by_kind.setdefault(a.kind, []).append(a)
    for kind, items in by_kind.items():
        lines.append(f"- {kind.value}: {PARAM_DOCS[kind]}")
        for a in items[:4]:
            lines.append(f"    e.g. {a.label()}")
    return "\n".join(lines)


def actions_from_dicts(items: Iterable[Mapping[str, Any]]) -> list[EditAction]:
    return [EditAction(ActionKind(d["kind"]), dict(d.get("params", {})), d.get("rationale", "")) for d in items]

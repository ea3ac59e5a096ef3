"""Skill package model: parsing, serialization, validation and the
structure/content views used by the optimizer.

A skill directory looks like::

    SKILL.md            frontmatter fenced by ``---`` lines, then a Markdown body
    scripts/...         executable helpers (text)
    references/...      on-demand documentation (text)
    assets/...          opaque static files (bytes)

The body of SKILL.md is split into sections at level-2 headings. Text that
precedes the first heading is kept under the empty heading ``""``.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, NamedTuple

import yaml

from .errors import (
    BadPackagePath,
    DuplicateHeading,
    IncompatibleContent,
    MalformedFile,
    MalformedFrontmatter,
    MissingSkillMd,
    StructureMismatch,
    UnrecognizedTopLevelEntry,
)

SKILL_MD = "SKILL.md"
FENCE = "---"
SUBDIRS = ("scripts", "references", "assets")
PREAMBLE = ""

# keys with dedicated Frontmatter fields; everything else lands in ``extra``
KNOWN_KEYS = ("name", "description", "compatibility", "allowed-tools")
REQUIRED_KEYS = ("name", "description")

_HEADING_RE = re.compile(r"^##[ \t]+(\S.*?)[ \t]*$")
_FENCE_RE = re.compile(r"^[ \t]{0,3}(`{3,}|~{3,})")
_NAME_RE = re.compile(r"^[a-z0-9]+(?:-[a-z0-9]+)*$")
_LEADING_BLANK_RE = re.compile(r"\A(?:[ \t]*\n)+")

MAX_NAME_LENGTH = 64
MAX_DESCRIPTION_LENGTH = 1024
NEAR_LIMIT_FRACTION = 0.9


def count_tokens(text: str) -> int:
    """Default token estimate: ``ceil(words * 4 / 3)`` over whitespace-delimited words."""
    n = len(text.split())
    return (4 * n + 2) // 3


TokenCounter = Callable[[str], int]


def clean_body(text: str) -> str:
    """Canonical section body: no leading blank lines, no trailing whitespace."""
    return _LEADING_BLANK_RE.sub("", text.replace("\r\n", "\n")).rstrip()


# ---------------------------------------------------------------------------
# value types


@dataclass(frozen=True)
class Frontmatter:
    name: str
    description: str
    compatibility: str | None = None
    allowed_tools: tuple[str, ...] | None = None
    extra: dict[str, Any] = field(default_factory=dict)
    key_order: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.allowed_tools is not None and not isinstance(self.allowed_tools, tuple):
            object.__setattr__(self, "allowed_tools", tuple(self.allowed_tools))
        present = self.keys_present()
        order = [k for k in self.key_order if k in present]
        # required keys missing from the given order go first, others last
        head = [k for k in REQUIRED_KEYS if k not in order]
        tail = [k for k in present if k not in order and k not in head]
        object.__setattr__(self, "key_order", tuple(head + order + tail))

    def keys_present(self) -> list[str]:
        keys = ["name", "description"]
        if self.compatibility is not None:
            keys.append("compatibility")
        if self.allowed_tools is not None:
            keys.append("allowed-tools")
        keys.extend(self.extra)
        return keys

    def get(self, key: str) -> Any:
        if key == "name":
            return self.name
        if key == "description":
            return self.description
        if key == "compatibility":
            return self.compatibility
        if key == "allowed-tools":
            return self.allowed_tools
        return self.extra.get(key)

    def as_mapping(self) -> dict[str, Any]:
        out: dict[str, Any] = {}
        for key in self.key_order:
            value = self.get(key)
            out[key] = list(value) if key == "allowed-tools" else value
        return out

    def with_value(self, key: str, value: Any) -> "Frontmatter":
        """Return a copy with ``key`` set (added at the end when new)."""
        return frontmatter_from_mapping({**self.as_mapping(), key: value})

    def without(self, key: str) -> "Frontmatter":
        if key in REQUIRED_KEYS:
            raise KeyError(f"cannot remove required frontmatter key {key!r}")
        data = self.as_mapping()
        data.pop(key, None)
        return frontmatter_from_mapping(data)


def frontmatter_from_mapping(data: Mapping[str, Any]) -> Frontmatter:
    def text_field(key: str, required: bool) -> str | None:
        value = data.get(key)
        if value is None:
            return "" if required else None
        if not isinstance(value, str):
            raise MalformedFrontmatter(f"frontmatter key {key!r} must be a string")
        return value

    tools = data.get("allowed-tools")
    if tools is not None:
        if isinstance(tools, str):
            tools = tuple(tools.split())
        elif isinstance(tools, list) and all(isinstance(t, str) for t in tools):
            tools = tuple(tools)
        else:
            raise MalformedFrontmatter("'allowed-tools' must be a list of strings")
    extra = {str(k): v for k, v in data.items() if k not in KNOWN_KEYS}
    return Frontmatter(
        name=text_field("name", True) or "",
        description=text_field("description", True) or "",
        compatibility=text_field("compatibility", False),
        allowed_tools=tools,
        extra=extra,
        key_order=tuple(str(k) for k in data),
    )


@dataclass(frozen=True)
class SkillPackage:
    frontmatter: Frontmatter
    body_sections: tuple[tuple[str, str], ...]
    scripts: tuple[tuple[str, str], ...] = ()
    references: tuple[tuple[str, str], ...] = ()
    assets: tuple[tuple[str, bytes], ...] = ()
    root_name: str = field(default="", compare=False)

    def __post_init__(self) -> None:
        sections = tuple((h, clean_body(b)) for h, b in self.body_sections)
        object.__setattr__(self, "body_sections", sections)
        headings = [h for h, _ in sections]
        if len(set(headings)) != len(headings):
            raise DuplicateHeading(f"duplicate section heading in {headings}")
        if PREAMBLE in headings[1:]:
            raise DuplicateHeading("the preamble section must come first")
        for attr, prefix in (("scripts", "scripts/"), ("references", "references/"), ("assets", "assets/")):
            files = tuple(sorted(getattr(self, attr)))
            for path, _ in files:
                _check_path(path)
                if not path.startswith(prefix):
                    raise BadPackagePath(f"{path!r} must live under {prefix}")
            paths = [p for p, _ in files]
            if len(set(paths)) != len(paths):
                raise BadPackagePath(f"duplicate path in {attr}")
            object.__setattr__(self, attr, files)
        if not self.root_name:
            object.__setattr__(self, "root_name", self.frontmatter.name or "skill")

    @property
    def name(self) -> str:
        return self.frontmatter.name

    @property
    def headings(self) -> tuple[str, ...]:
        return tuple(h for h, _ in self.body_sections)

    def section(self, heading: str) -> str:
        return dict(self.body_sections)[heading]


@dataclass(frozen=True)
class BudgetPolicy:
    activation_budget: int = 5000
    warning_threshold: int = 3500
    max_package_bytes: int = 2**22
    token_counter: TokenCounter = field(default=count_tokens, compare=False, repr=False)

    def __post_init__(self) -> None:
        if not 0 < self.warning_threshold <= self.activation_budget:
            raise ValueError("need 0 < warning_threshold <= activation_budget")
        if self.max_package_bytes <= 0:
            raise ValueError("max_package_bytes must be positive")


class Issue(NamedTuple):
    code: str
    where: str
    message: str


@dataclass(frozen=True)
class ValidationReport:
    errors: tuple[Issue, ...]
    warnings: tuple[Issue, ...]
    activation_tokens: int
    package_bytes: int = 0

    @property
    def valid(self) -> bool:
        return not self.errors

    def codes(self) -> set[str]:
        return {i.code for i in self.errors} | {i.code for i in self.warnings}

    def format(self) -> str:
        lines = [f"valid: {'yes' if self.valid else 'no'}",
                 f"activation_tokens: {self.activation_tokens}",
                 f"package_bytes: {self.package_bytes}"]
        lines += [f"error {i.code} [{i.where}]: {i.message}" for i in self.errors]
        lines += [f"warning {i.code} [{i.where}]: {i.message}" for i in self.warnings]
        return "\n".join(lines)


@dataclass(frozen=True)
class Structure:
    """Which components a skill has and how SKILL.md sections are ordered."""

    section_headings: tuple[str, ...]
    references: frozenset[str] = frozenset()
    scripts: frozenset[str] = frozenset()
    assets: frozenset[str] = frozenset()
    frontmatter_keys: frozenset[str] = frozenset(REQUIRED_KEYS)

    def __post_init__(self) -> None:
        object.__setattr__(self, "section_headings", tuple(self.section_headings))
        for attr in ("references", "scripts", "assets", "frontmatter_keys"):
            object.__setattr__(self, attr, frozenset(getattr(self, attr)))
        if len(set(self.section_headings)) != len(self.section_headings):
            raise DuplicateHeading(f"duplicate heading in {self.section_headings}")
        for attr, prefix in (("references", "references/"), ("scripts", "scripts/"), ("assets", "assets/")):
            for path in getattr(self, attr):
                _check_path(path)
                if not path.startswith(prefix):
                    raise BadPackagePath(f"{path!r} must live under {prefix}")

    @property
    def movable_headings(self) -> tuple[str, ...]:
        return tuple(h for h in self.section_headings if h != PREAMBLE)

    def key(self) -> str:
        """Stable textual fingerprint."""
        parts = [
            "sections=" + "|".join(self.section_headings),
            "references=" + "|".join(sorted(self.references)),
            "scripts=" + "|".join(sorted(self.scripts)),
            "assets=" + "|".join(sorted(self.assets)),
            "keys=" + "|".join(sorted(self.frontmatter_keys)),
        ]
        return ";".join(parts)

    def to_dict(self) -> dict[str, Any]:
        return {
            "section_headings": list(self.section_headings),
            "references": sorted(self.references),
            "scripts": sorted(self.scripts),
            "assets": sorted(self.assets),
            "frontmatter_keys": sorted(self.frontmatter_keys),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Structure":
        return cls(
            section_headings=tuple(data["section_headings"]),
            references=frozenset(data.get("references", ())),
            scripts=frozenset(data.get("scripts", ())),
            assets=frozenset(data.get("assets", ())),
            frontmatter_keys=frozenset(data.get("frontmatter_keys", REQUIRED_KEYS)),
        )


@dataclass(frozen=True)
class ContentState:
    frontmatter: Frontmatter
    section_bodies: dict[str, str]
    reference_texts: dict[str, str] = field(default_factory=dict)
    script_texts: dict[str, str] = field(default_factory=dict)
    asset_blobs: dict[str, bytes] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "section_bodies", {h: clean_body(b) for h, b in self.section_bodies.items()}
        )
        for attr in ("reference_texts", "script_texts", "asset_blobs"):
            object.__setattr__(self, attr, dict(getattr(self, attr)))

    def evolve(self, **changes: Any) -> "ContentState":
        return replace(self, **changes)


# ---------------------------------------------------------------------------
# parsing / serialization


def _check_path(path: str) -> None:
    if not path or path.startswith("/") or "\\" in path:
        raise BadPackagePath(f"invalid package path {path!r}")
    parts = path.split("/")
    if any(p in ("", ".", "..") for p in parts):
        raise BadPackagePath(f"invalid package path {path!r}")


def _split_frontmatter(text: str) -> tuple[str, str]:
    lines = text.split("\n")
    if not lines or lines[0] != FENCE:
        raise MalformedFrontmatter("SKILL.md must start with a '---' line")
    for i in range(1, len(lines)):
        if lines[i] == FENCE:
            return "\n".join(lines[1:i]), "\n".join(lines[i + 1:])
    raise MalformedFrontmatter("frontmatter has no closing '---' line")


def parse_frontmatter(block: str) -> Frontmatter:
    try:
        data = yaml.safe_load(block) if block.strip() else {}
    except yaml.YAMLError as exc:
        raise MalformedFrontmatter(f"frontmatter is not valid YAML: {exc}") from exc
    if not isinstance(data, dict):
        raise MalformedFrontmatter("frontmatter root must be a mapping")
    return frontmatter_from_mapping(data)


def split_sections(body: str) -> list[tuple[str, str]]:
    """Split a Markdown body at level-2 headings outside code fences."""
    sections: list[tuple[str, list[str]]] = [(PREAMBLE, [])]
    seen: set[str] = set()
    fence: str | None = None
    for line in body.split("\n"):
        fm = _FENCE_RE.match(line)
        if fm:
            marker = fm.group(1)
            if fence is None:
                fence = marker[0] * 3
            elif marker.startswith(fence):
                fence = None
        elif fence is None:
            hm = _HEADING_RE.match(line)
            if hm:
                heading = hm.group(1)
                if heading in seen:
                    raise DuplicateHeading(f"heading {heading!r} appears twice")
                seen.add(heading)
                sections.append((heading, []))
                continue
        sections[-1][1].append(line)
    out = [(h, clean_body("\n".join(lines))) for h, lines in sections]
    if len(out) > 1 and not out[0][1].strip():
        out = out[1:]
    return out


def parse_skill_md(text: str) -> tuple[Frontmatter, tuple[tuple[str, str], ...]]:
    text = text.lstrip("﻿").replace("\r\n", "\n")
    block, body = _split_frontmatter(text)
    return parse_frontmatter(block), tuple(split_sections(body))


def _decode(path: str, raw: bytes | str) -> str:
    if isinstance(raw, str):
        return raw
    try:
        return raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise MalformedFile(f"{path} is not valid UTF-8") from exc


def parse_package(snapshot: Mapping[str, bytes | str], root_name: str | None = None) -> SkillPackage:
    """Build a SkillPackage from a ``path -> bytes`` directory snapshot."""
    files: dict[str, bytes | str] = {}
    for raw_path, data in snapshot.items():
        path = raw_path.replace("\\", "/")
        while path.startswith("./"):
            path = path[2:]
        _check_path(path)
        files[path] = data
    if SKILL_MD not in files:
        raise MissingSkillMd("snapshot has no top-level SKILL.md")
    frontmatter, sections = parse_skill_md(_decode(SKILL_MD, files.pop(SKILL_MD)))

    buckets: dict[str, list[tuple[str, Any]]] = {d: [] for d in SUBDIRS}
    for path in sorted(files):
        top, _, rest = path.partition("/")
        if top not in buckets or not rest:
            raise UnrecognizedTopLevelEntry(f"unrecognized entry {path!r}")
        data = files[path]
        if top == "assets":
            buckets[top].append((path, data.encode("utf-8") if isinstance(data, str) else bytes(data)))
        else:
            buckets[top].append((path, _decode(path, data)))
    return SkillPackage(
        frontmatter=frontmatter,
        body_sections=sections,
        scripts=tuple(buckets["scripts"]),
        references=tuple(buckets["references"]),
        assets=tuple(buckets["assets"]),
        root_name=root_name or "",
    )


def dump_frontmatter(fm: Frontmatter) -> str:
    return yaml.safe_dump(
        fm.as_mapping(),
        sort_keys=False,
        allow_unicode=True,
        default_flow_style=False,
        width=2**30,
    )


def render_skill_md(frontmatter: Frontmatter, sections: Iterable[tuple[str, str]]) -> str:
    blocks = []
    for heading, body in sections:
        if heading == PREAMBLE:
            if body:
                blocks.append(body)
        else:
            blocks.append(f"## {heading}\n{body}" if body else f"## {heading}")
    text = f"{FENCE}\n{dump_frontmatter(frontmatter)}{FENCE}\n"
    if blocks:
        text += "\n" + "\n\n".join(blocks) + "\n"
    return text


def skill_md_text(pkg: SkillPackage) -> str:
    return render_skill_md(pkg.frontmatter, pkg.body_sections)


def serialize_package(pkg: SkillPackage) -> dict[str, bytes]:
    out = {SKILL_MD: skill_md_text(pkg).encode("utf-8")}
    for path, text in pkg.scripts:
        out[path] = text.encode("utf-8")
    for path, text in pkg.references:
        out[path] = text.encode("utf-8")
    for path, blob in pkg.assets:
        out[path] = blob
    return out


def load_package(directory: str | Path) -> SkillPackage:
    root = Path(directory)
    if not root.is_dir():
        raise MissingSkillMd(f"{root} is not a directory")
    snapshot = {
        p.relative_to(root).as_posix(): p.read_bytes()
        for p in sorted(root.rglob("*"))
        if p.is_file()
    }
    return parse_package(snapshot, root_name=root.name)


def write_package(pkg: SkillPackage, directory: str | Path) -> Path:
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    for rel, data in serialize_package(pkg).items():
        target = root / rel
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_bytes(data)
    return root


# ---------------------------------------------------------------------------
# validation


def _section_issues(heading: str, body: str, sole: bool) -> list[tuple[bool, Issue]]:
    """(is_error, issue) pairs for one section."""
    where = f"section:{heading}"
    issues: list[tuple[bool, Issue]] = []
    if not body.strip():
        if heading == PREAMBLE and sole:
            issues.append((False, Issue("EmptyBody", where, "SKILL.md has no instructions")))
        else:
            issues.append((True, Issue("EmptySection", where, "section body is empty")))
    if "\n" in heading or heading != heading.strip():
        issues.append((True, Issue("BadHeading", where, "heading must be a single trimmed line")))
    fence = None
    for line in body.split("\n"):
        fm = _FENCE_RE.match(line)
        if fm:
            marker = fm.group(1)
            if fence is None:
                fence = marker[0] * 3
            elif marker.startswith(fence):
                fence = None
        elif fence is None and _HEADING_RE.match(line):
            issues.append((True, Issue("EmbeddedHeading", where, f"body contains a level-2 heading: {line!r}")))
    if fence is not None:
        issues.append((True, Issue("UnclosedFence", where, "code fence is never closed")))
    return issues


def validate(pkg: SkillPackage, policy: BudgetPolicy | None = None) -> ValidationReport:
    """Check schema, layout and budget constraints; failures are reported, never raised."""
    policy = policy or BudgetPolicy()
    errors: list[Issue] = []
    warnings: list[Issue] = []
    fm = pkg.frontmatter

    if not fm.name.strip():
        errors.append(Issue("EmptyName", "frontmatter:name", "name is empty"))
    elif len(fm.name) > MAX_NAME_LENGTH or not _NAME_RE.match(fm.name):
        errors.append(Issue("InvalidName", "frontmatter:name",
                            "name must be lowercase letters, digits and single hyphens, at most 64 chars"))
    if not fm.description.strip():
        errors.append(Issue("EmptyDescription", "frontmatter:description", "description is empty"))
    elif len(fm.description) > MAX_DESCRIPTION_LENGTH:
        errors.append(Issue("DescriptionTooLong", "frontmatter:description",
                            f"description exceeds {MAX_DESCRIPTION_LENGTH} characters"))
    if pkg.root_name and fm.name and pkg.root_name != fm.name:
        warnings.append(Issue("NameMismatch", "frontmatter:name",
                              f"name {fm.name!r} differs from directory {pkg.root_name!r}"))

    if not pkg.body_sections:
        errors.append(Issue("EmptyBody", "SKILL.md", "SKILL.md has no sections"))
    sole = len(pkg.body_sections) == 1
    for heading, body in pkg.body_sections:
        for is_error, issue in _section_issues(heading, body, sole):
            (errors if is_error else warnings).append(issue)

    for kind, files in (("script", pkg.scripts), ("reference", pkg.references)):
        for path, text in files:
            if not text.strip():
                warnings.append(Issue("EmptyFile", path, f"{kind} file is empty"))

    skill_md = skill_md_text(pkg)
    tokens = policy.token_counter(skill_md)
    if tokens > policy.activation_budget:
        errors.append(Issue("BudgetExceeded", SKILL_MD,
                            f"{tokens} activation tokens exceed the budget of {policy.activation_budget}"))
    elif tokens > policy.warning_threshold:
        warnings.append(Issue("BudgetWarning", SKILL_MD,
                              f"{tokens} activation tokens exceed the warning threshold of {policy.warning_threshold}"))

    size = sum(len(b) for b in serialize_package(pkg).values())
    if size > policy.max_package_bytes:
        errors.append(Issue("PackageTooLarge", "package", f"{size} bytes exceed {policy.max_package_bytes}"))
    elif size > NEAR_LIMIT_FRACTION * policy.max_package_bytes:
        warnings.append(Issue("PackageNearLimit", "package", f"{size} bytes is close to {policy.max_package_bytes}"))

    return ValidationReport(tuple(errors), tuple(warnings), tokens, size)


# ---------------------------------------------------------------------------
# structure / content views


def derive_structure(pkg: SkillPackage) -> Structure:
    return Structure(
        section_headings=pkg.headings,
        references=frozenset(p for p, _ in pkg.references),
        scripts=frozenset(p for p, _ in pkg.scripts),
        assets=frozenset(p for p, _ in pkg.assets),
        frontmatter_keys=frozenset(pkg.frontmatter.key_order),
    )


def check_compatible(content: ContentState, s: Structure) -> None:
    """Raise IncompatibleContent unless every content map matches ``s``."""
    problems = []
    for label, have, want in (
        ("sections", set(content.section_bodies), set(s.section_headings)),
        ("references", set(content.reference_texts), s.references),
        ("scripts", set(content.script_texts), s.scripts),
        ("assets", set(content.asset_blobs), s.assets),
        ("frontmatter keys", set(content.frontmatter.key_order), s.frontmatter_keys),
    ):
        if have != want:
            problems.append(_key_diff(label, have, want))
    if problems:
        raise IncompatibleContent("; ".join(problems))


def is_compatible(content: ContentState, s: Structure) -> bool:
    try:
        check_compatible(content, s)
    except IncompatibleContent:
        return False
    return True


def _key_diff(label: str, have: set, want: set) -> str:
    extra = sorted(have - want)
    missing = sorted(want - have)
    return f"{label}: missing {missing}, unexpected {extra}"


def extract_content(pkg: SkillPackage, s: Structure) -> ContentState:
    actual = derive_structure(pkg)
    if actual != s:
        raise StructureMismatch("structure does not describe this package")
    return ContentState(
        frontmatter=pkg.frontmatter,
        section_bodies=dict(pkg.body_sections),
        reference_texts=dict(pkg.references),
        script_texts=dict(pkg.scripts),
        asset_blobs=dict(pkg.assets),
    )


def recompose(content: ContentState, s: Structure, root_name: str = "") -> SkillPackage:
    check_compatible(content, s)
    return SkillPackage(
        frontmatter=content.frontmatter,
        body_sections=tuple((h, content.section_bodies[h]) for h in s.section_headings),
        scripts=tuple(content.script_texts.items()),
        references=tuple(content.reference_texts.items()),
        assets=tuple(content.asset_blobs.items()),
        root_name=root_name,
    )


def content_digest(content: ContentState, s: Structure) -> str:
    """Stable hash of the serialized package built from ``content``."""
    h = hashlib.sha256()
    for path, data in serialize_package(recompose(content, s)).items():
        h.update(path.encode("utf-8") + b"\0" + data + b"\0")
    return h.hexdigest()[:16]

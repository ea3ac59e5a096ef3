"""Reward signals: dataset splits, exact-match scoring through an agent runner,
and a synthetic landscape for offline runs.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
import shlex
import subprocess
import tempfile
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Protocol, Sequence

import numpy as np

from .errors import (
    ConfigError,
    EmptyInstanceSet,
    IdMismatch,
    InsufficientData,
    RunnerFailure,
)
from .package import ContentState, SkillPackage, Structure, recompose, write_package

log = logging.getLogger(__name__)

MAX_DIAGNOSTICS_CHARS = 2000
QUESTION_TYPES = ("objective", "constraint", "variable", "parameter")


@dataclass(frozen=True)
class TaskInstance:
    id: str
    context: str
    question: str
    options: tuple[tuple[str, str], ...]
    answer: str

    def __post_init__(self) -> None:
        labels = self.labels
        if len(set(labels)) != len(labels):
            raise ValueError(f"instance {self.id}: duplicate option labels")
        if self.answer not in labels:
            raise ValueError(f"instance {self.id}: answer {self.answer!r} is not an option label")

    @property
    def labels(self) -> tuple[str, ...]:
        return tuple(label for label, _ in self.options)

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "context": self.context,
            "question": self.question,
            "options": [{"label": l, "text": t} for l, t in self.options],
            "answer": self.answer,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "TaskInstance":
        options = []
        for i, opt in enumerate(data["options"]):
            if isinstance(opt, Mapping):
                options.append((str(opt["label"]), str(opt["text"])))
            elif isinstance(opt, (list, tuple)) and len(opt) == 2:
                options.append((str(opt[0]), str(opt[1])))
            else:
                options.append((chr(ord("A") + i), str(opt)))
        return cls(
            id=str(data["id"]),
            context=str(data.get("context", "")),
            question=str(data["question"]),
            options=tuple(options),
            answer=str(data["answer"]),
        )


def load_dataset(path: str | Path) -> list[TaskInstance]:
    """Read line-delimited JSON records ``{id, context, question, options, answer}``."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(TaskInstance.from_dict(json.loads(line)))
            except (KeyError, ValueError, TypeError) as exc:
                raise ConfigError(f"{path}:{lineno}: bad task record: {exc}") from exc
    return out


def dump_dataset(instances: Iterable[TaskInstance], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for inst in instances:
            fh.write(json.dumps(inst.to_dict(), ensure_ascii=False) + "\n")


@dataclass(frozen=True)
class SplitSet:
    search: tuple[TaskInstance, ...]
    confirm: tuple[TaskInstance, ...]
    test: tuple[TaskInstance, ...]
    sampling_seed: int

    def get(self, name: str) -> tuple[TaskInstance, ...]:
        if name not in ("search", "confirm", "test"):
            raise KeyError(f"unknown split {name!r}")
        return getattr(self, name)


def load_splits(dataset: Sequence[TaskInstance], sizes: tuple[int, int, int], seed: int) -> SplitSet:
    """Seeded sampling without replacement into disjoint search/confirm/test splits."""
    n_search, n_confirm, n_test = sizes
    if min(sizes) < 0:
        raise ValueError("split sizes must be nonnegative")
    if len({inst.id for inst in dataset}) != len(dataset):
        raise ValueError("dataset ids must be unique")
    if n_search + n_confirm + n_test > len(dataset):
        raise InsufficientData(f"requested {sum(sizes)} instances from a dataset of {len(dataset)}")
    order = np.random.default_rng(seed).permutation(len(dataset))
    picked = [dataset[i] for i in order]
    return SplitSet(
        search=tuple(picked[:n_search]),
        confirm=tuple(picked[n_search:n_search + n_confirm]),
        test=tuple(picked[n_search + n_confirm:n_search + n_confirm + n_test]),
        sampling_seed=seed,
    )


def exact_match_score(predictions: Sequence[tuple[str, str | None]], answers: Sequence[tuple[str, str]]) -> float:
    pred = dict(predictions)
    gold = dict(answers)
    if len(pred) != len(predictions) or len(gold) != len(answers):
        raise IdMismatch("duplicate ids")
    if set(pred) != set(gold):
        raise IdMismatch("prediction and answer ids differ")
    if not gold:
        raise EmptyInstanceSet("no instances to score")
    return sum(1 for k, v in gold.items() if pred[k] == v) / len(gold)


# ---------------------------------------------------------------------------
# agent runners


class AgentRunner(Protocol):
    def run(self, package_dir: Path, instance: TaskInstance) -> str:
        """Raw agent output for one instance; raise RunnerFailure on failure."""
        ...


class CallableRunner:
    """Adapts ``fn(package_dir, instance) -> str`` to the runner interface."""

    def __init__(self, fn: Callable[[Path, TaskInstance], str]):
        self.fn = fn

    def run(self, package_dir: Path, instance: TaskInstance) -> str:
        return self.fn(package_dir, instance)


class SubprocessRunner:
    """Runs ``command <package_dir>`` with the instance record as JSON on stdin.

    The answer label is read from standard output; a nonzero exit status is a
    RunnerFailure.
    """

    def __init__(self, command: str | Sequence[str], timeout: float = 600.0, cwd: str | Path | None = None):
        self.argv = shlex.split(command) if isinstance(command, str) else list(command)
        if not self.argv:
            raise ConfigError("empty runner command")
        self.timeout = timeout
        self.cwd = cwd

    def run(self, package_dir: Path, instance: TaskInstance) -> str:
        try:
            proc = subprocess.run(
                [*self.argv, str(package_dir)],
                input=json.dumps(instance.to_dict(), ensure_ascii=False),
                capture_output=True,
                text=True,
                timeout=self.timeout,
                cwd=self.cwd,
            )
        except (OSError, subprocess.TimeoutExpired) as exc:
            raise RunnerFailure(f"runner could not run: {exc}") from exc
        if proc.returncode != 0:
            raise RunnerFailure(f"runner exited with {proc.returncode}: {proc.stderr.strip()[:200]}")
        return proc.stdout


class HttpRunner:
    """POSTs ``{"package_path", "instance"}`` and reads the answer from the response body."""

    def __init__(self, url: str, timeout: float = 600.0, client: Any = None):
        import httpx

        self.url = url
        self.client = client or httpx.Client(timeout=timeout)

    def run(self, package_dir: Path, instance: TaskInstance) -> str:
        import httpx

        try:
            resp = self.client.post(self.url, json={"package_path": str(package_dir), "instance": instance.to_dict()})
        except httpx.HTTPError as exc:
            raise RunnerFailure(f"runner request failed: {exc}") from exc
        if resp.status_code != 200:
            raise RunnerFailure(f"runner returned HTTP {resp.status_code}")
        return resp.text


def make_runner(spec: str, cwd: str | Path | None = None) -> AgentRunner:
    """URL specs give an HttpRunner, anything else is a command run from ``cwd``."""
    if spec.startswith(("http://", "https://")):
        return HttpRunner(spec)
    return SubprocessRunner(spec, cwd=cwd)


# ---------------------------------------------------------------------------
# exact-match evaluation


@dataclass(frozen=True)
class InstanceResult:
    id: str
    predicted: str | None
    correct: bool
    output_digest: str


@dataclass(frozen=True)
class EvalReport:
    reward: float
    per_instance: tuple[InstanceResult, ...] = ()
    diagnostics: str = ""

    def to_dict(self) -> dict[str, Any]:
        return {
            "reward": self.reward,
            "per_instance": [
                {"id": r.id, "predicted": r.predicted, "correct": r.correct, "output_digest": r.output_digest}
                for r in self.per_instance
            ],
            "diagnostics": self.diagnostics,
        }


_TOKEN_RE = re.compile(r"[A-Za-z0-9]+")


def extract_answer(output: str, labels: Sequence[str]) -> str | None:
    """First standalone option label on the last non-empty line, else None."""
    lines = [ln for ln in output.strip().splitlines() if ln.strip()]
    if not lines:
        return None
    allowed = set(labels)
    for tok in _TOKEN_RE.findall(lines[-1]):
        if tok in allowed:
            return tok
    return None


def question_type(question: str) -> str:
    q = question.lower()
    for kind in QUESTION_TYPES:
        if kind in q:
            return kind
    return "other"


def summarize(instances: Sequence[TaskInstance], results: Sequence[InstanceResult]) -> str:
    by_id = {inst.id: inst for inst in instances}
    correct = sum(r.correct for r in results)
    total = len(results)
    wrong = [r for r in results if not r.correct]
    errors_by_type = Counter(question_type(by_id[r.id].question) for r in wrong)
    totals_by_type = Counter(question_type(inst.question) for inst in instances)
    unparseable = [r for r in wrong if r.predicted is None]
    lines = [f"exact match: {correct}/{total} ({correct / total:.4f})"]
    if errors_by_type:
        parts = [f"{k} {errors_by_type[k]}/{totals_by_type[k]}" for k in sorted(errors_by_type)]
        lines.append("errors by question type: " + ", ".join(parts))
    if unparseable:
        lines.append(f"unparseable output: {len(unparseable)} ({', '.join(r.id for r in unparseable[:10])})")
    confusions = Counter(
        (question_type(by_id[r.id].question), r.predicted, by_id[r.id].answer)
        for r in wrong if r.predicted is not None
    )
    for (qtype, got, want), n in sorted(confusions.items(), key=lambda kv: (-kv[1], kv[0])):
        lines.append(f"{qtype} question: answered {got} instead of {want} x{n}")
    text = "\n".join(lines)
    if len(text) > MAX_DIAGNOSTICS_CHARS:
        text = text[:MAX_DIAGNOSTICS_CHARS - 3] + "..."
    return text


def evaluate_skill(
    candidate: SkillPackage,
    split: Sequence[TaskInstance],
    runner: AgentRunner,
    *,
    retries: int = 1,
    width: int = 1,
) -> EvalReport:
    """Score ``candidate`` by exact match over ``split``."""
    if not split:
        raise EmptyInstanceSet("split is empty")

    with tempfile.TemporaryDirectory(prefix="skillopt-") as tmp:
        package_dir = write_package(candidate, Path(tmp) / (candidate.root_name or "skill"))

        def one(inst: TaskInstance) -> InstanceResult:
            for attempt in range(retries + 1):
                try:
                    output = runner.run(package_dir, inst)
                    break
                except RunnerFailure:
                    if attempt == retries:
                        raise
                    log.warning("runner failed on %s, retrying", inst.id)
            predicted = extract_answer(output, inst.labels)
            digest = hashlib.sha256(output.encode("utf-8")).hexdigest()[:12]
            return InstanceResult(inst.id, predicted, predicted == inst.answer, digest)

        if width > 1:
            with ThreadPoolExecutor(max_workers=width) as pool:
                results = list(pool.map(one, split))
        else:
            results = [one(inst) for inst in split]

    results.sort(key=lambda r: r.id)
    reward = exact_match_score(
        [(r.id, r.predicted) for r in results], [(inst.id, inst.answer) for inst in split]
    )
    return EvalReport(reward, tuple(results), summarize(split, results))


# ---------------------------------------------------------------------------
# synthetic landscape

_COUNT_RE = re.compile(r"^(reference|script|asset|section)[ _]count\s*[:=]\s*(\d+)$")


def predicate_holds(predicate: str, structure: Structure, content: ContentState | None = None) -> bool:
    """Evaluate one landscape predicate such as ``has_section:Checks`` or ``reference_count:0``."""
    m = _COUNT_RE.match(predicate.strip())
    if m:
        kind, n = m.group(1), int(m.group(2))
        actual = {
            "reference": len(structure.references),
            "script": len(structure.scripts),
            "asset": len(structure.assets),
            "section": len(structure.section_headings),
        }[kind]
        return actual == n
    kind, sep, arg = predicate.partition(":")
    if not sep:
        raise ConfigError(f"malformed predicate {predicate!r}")
    if kind == "has_section":
        return arg in structure.section_headings
    if kind == "lacks_section":
        return arg not in structure.section_headings
    if kind == "first_section":
        return bool(structure.movable_headings) and structure.movable_headings[0] == arg
    if kind == "section_before":
        a, _, b = arg.partition("|")
        h = structure.section_headings
        return a in h and b in h and h.index(a) < h.index(b)
    if kind == "has_reference":
        return arg in structure.references
    if kind == "has_script":
        return arg in structure.scripts
    if kind == "has_asset":
        return arg in structure.assets
    if kind == "has_key":
        return arg in structure.frontmatter_keys
    if kind == "section_contains":
        heading, _, text = arg.partition("|")
        return content is not None and text in content.section_bodies.get(heading, "")
    if kind == "description_contains":
        return content is not None and arg in content.frontmatter.description
    raise ConfigError(f"unknown predicate kind {kind!r}")


@dataclass(frozen=True)
class SyntheticLandscape:
    base_reward: float
    bonuses: dict[str, float] = field(default_factory=dict)
    noise_sd: float = 0.0
    rng_seed: int = 0
    splits: dict[str, dict[str, Any]] = field(default_factory=dict)

    def noiseless(self, structure: Structure, content: ContentState | None = None) -> float:
        total = self.base_reward + sum(
            bonus for pred, bonus in self.bonuses.items() if predicate_holds(pred, structure, content)
        )
        return min(1.0, max(0.0, total))

    def for_split(self, name: str | None) -> "SyntheticLandscape":
        """Landscape with the named split's overrides applied (bonuses merge)."""
        if not name or name not in self.splits:
            return self
        override = dict(self.splits[name])
        bonuses = {**self.bonuses, **override.pop("bonuses", {})}
        return SyntheticLandscape(
            base_reward=float(override.pop("base_reward", self.base_reward)),
            bonuses=bonuses,
            noise_sd=float(override.pop("noise_sd", self.noise_sd)),
            rng_seed=int(override.pop("rng_seed", self.rng_seed)),
        )

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> "SyntheticLandscape":
        try:
            return cls(
                base_reward=float(data["base_reward"]),
                bonuses={str(k): float(v) for k, v in (data.get("bonuses") or {}).items()},
                noise_sd=float(data.get("noise_sd", 0.0)),
                rng_seed=int(data.get("rng_seed", 0)),
                splits={str(k): dict(v) for k, v in (data.get("splits") or {}).items()},
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad landscape definition: {exc}") from exc


def synth_evaluate(structure: Structure, content: ContentState | None, landscape: SyntheticLandscape,
                   draw_index: int) -> float:
    """``clip(base + satisfied bonuses + noise(draw_index), 0, 1)``."""
    total = landscape.base_reward + sum(
        bonus for pred, bonus in landscape.bonuses.items() if predicate_holds(pred, structure, content)
    )
    if landscape.noise_sd > 0:
        rng = np.random.default_rng([landscape.rng_seed, draw_index])
        total += landscape.noise_sd * float(rng.standard_normal())
    return min(1.0, max(0.0, total))


# ---------------------------------------------------------------------------
# evaluator backends used by the search


class Evaluator(Protocol):
    def evaluate(self, structure: Structure, content: ContentState) -> EvalReport:
        ...


class SyntheticEvaluator:
    """Landscape evaluator; every call consumes the next noise draw."""

    def __init__(self, landscape: SyntheticLandscape, start_draw: int = 0):
        self.landscape = landscape
        self.draws = start_draw

    def evaluate(self, structure: Structure, content: ContentState) -> EvalReport:
        reward = synth_evaluate(structure, content, self.landscape, self.draws)
        self.draws += 1
        met = [p for p in self.landscape.bonuses if predicate_holds(p, structure, content)]
        return EvalReport(reward, (), f"synthetic reward {reward:.4f}; {len(met)} of {len(self.landscape.bonuses)} bonus predicates hold")


class ExactMatchEvaluator:
    """Recomposes the candidate and scores it on a fixed split."""

    def __init__(self, split: Sequence[TaskInstance], runner: AgentRunner, *, retries: int = 1, width: int = 1,
                 root_name: str = ""):
        self.split = tuple(split)
        self.runner = runner
        self.retries = retries
        self.width = width
        self.root_name = root_name

    def evaluate(self, structure: Structure, content: ContentState) -> EvalReport:
        pkg = recompose(content, structure, root_name=self.root_name)
        return evaluate_skill(pkg, self.split, self.runner, retries=self.retries, width=self.width)

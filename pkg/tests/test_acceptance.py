"""Acceptance criteria, one test per criterion.

Each test prints a single ``[PASS]`` or ``[FAIL]`` line with its measurements.
Run alone with ``pytest tests/test_acceptance.py -v`` or ``python tests/test_acceptance.py``.
"""

from __future__ import annotations

import json
import math
import random
import shutil
import sys
import time
from fractions import Fraction
from pathlib import Path

import mpmath
import numpy as np
import pytest
import yaml
from scipy import stats

sys.path.insert(0, str(Path(__file__).parent))

from conftest import FIXTURES, REF, SEED_DIR, enumerate_optimum, read_yaml  # noqa: E402
from skillopt.advisor import ScriptedAdvisor  # noqa: E402
from skillopt.cli import main as cli_main  # noqa: E402
from skillopt.evaluation import SyntheticEvaluator, SyntheticLandscape  # noqa: E402
from skillopt.export import tree_document, validate_tree_document  # noqa: E402
from skillopt.package import (  # noqa: E402
    Frontmatter,
    SkillPackage,
    derive_structure,
    load_package,
    parse_package,
    serialize_package,
    validate,
)
from skillopt.refine import RefinementBudget, RefinementFamily, lcb, refine  # noqa: E402
from skillopt.search import (  # noqa: E402
    SearchConfig,
    SearchNode,
    SearchTree,
    mixed_probabilities,
    run_search,
    select_mixed,
    select_ucb1,
    ucb1_score,
)

mpmath.mp.dps = 50


_capture = None


@pytest.fixture(autouse=True)
def _uncaptured(capsys):
    global _capture
    _capture = capsys
    yield
    _capture = None


def _emit(line: str) -> None:
    if _capture is None:
        print(line, flush=True)
        return
    with _capture.disabled():
        print(line, flush=True)


def report(n: int, title: str, ok: bool, detail: str, started: float, limit: float) -> bool:
    elapsed = time.perf_counter() - started
    ok = ok and elapsed < limit
    _emit(f"\n[{'PASS' if ok else 'FAIL'}] criterion {n}: {title}: {detail} ({elapsed:.1f}s, limit {limit:.0f}s)")
    return ok


def rel_close(a: float, b, tol: float = 1e-9) -> bool:
    b = float(b)
    return abs(a - b) <= tol * max(abs(b), 1e-300) or abs(a - b) <= 1e-15


# ---------------------------------------------------------------------------
# 1. formula oracles


def _node(q: float, n: int) -> SearchNode:
    return SearchNode(0, None, None, None, q, visit_count=n, mean_reward=q)


def _ucb_oracle(q, n, total, c):
    return mpmath.mpf(q) + mpmath.mpf(c) * mpmath.sqrt(mpmath.log(total) / n)


def _mixed_oracle(qs, lam, alpha):
    qs = [mpmath.mpf(q) for q in qs]
    mean = mpmath.fsum(qs) / len(qs)
    w = [mpmath.exp(mpmath.mpf(alpha) * (q - mean)) for q in qs]
    z = mpmath.fsum(w)
    return [mpmath.mpf(lam) / len(qs) + (1 - mpmath.mpf(lam)) * x / z for x in w]


def _lcb_oracle(deltas, t):
    xs = [mpmath.mpf(d) for d in deltas]
    k = len(xs)
    mean = mpmath.fsum(xs) / k
    s = mpmath.sqrt(mpmath.fsum((x - mean) ** 2 for x in xs) / (k - 1)) if k > 1 else 0
    return mean - mpmath.mpf(t) * s / mpmath.sqrt(k)


def test_criterion_1_formula_oracles():
    t0 = time.perf_counter()
    rng = random.Random(20240601)
    bad = []
    for i in range(1000):
        n = rng.randint(1, 200)
        total = rng.randint(n, 5000)
        q, c = rng.random(), rng.uniform(0, 3)
        if not rel_close(ucb1_score(_node(q, n), total, c), _ucb_oracle(q, n, total, c)):
            bad.append(("ucb1", i))
        qs = [rng.random() for _ in range(rng.randint(1, 12))]
        lam, alpha = rng.random(), rng.uniform(0.01, 20)
        got = mixed_probabilities(qs, lam, alpha)
        if not all(rel_close(float(g), o) for g, o in zip(got, _mixed_oracle(qs, lam, alpha))):
            bad.append(("mixed", i))
        # deltas with a nonzero mean so relative error is well defined
        deltas = [rng.gauss(0.05, 0.03) for _ in range(rng.randint(1, 20))]
        t = rng.uniform(0, 3)
        if not rel_close(lcb(deltas, t), _lcb_oracle(deltas, t)):
            bad.append(("lcb", i))
    worked = (
        round(ucb1_score(_node(0.5, 2), 10, 1.2), 6) == 1.787580,
        round(float(mixed_probabilities([0.2, 0.8], 0.25, 0.55)[1]), 6) == 0.561320,
        round(lcb([0.02, 0.04, 0.06], 1.0), 6) == 0.028453,
    )
    ok = not bad and all(worked)
    detail = f"3000 comparisons at 1e-9, {len(bad)} mismatches; worked values {worked}"
    assert report(1, "formula oracles", ok, detail, t0, 5)


# ---------------------------------------------------------------------------
# 2. selection-policy laws


def _flat_tree(qs, ns=None):
    t = SearchTree()
    t.add_root(None, None, qs[0])
    for q in qs[1:]:
        t.add_child(0, None, None, q, ())
    for i, q in enumerate(qs):
        t.nodes[i].mean_reward = q
        t.nodes[i].visit_count = (ns or [1] * len(qs))[i]
    return t


def _frequencies(tree, lam, alpha, draws, seed):
    rng = np.random.default_rng(seed)
    counts = np.zeros(len(tree), dtype=int)
    for _ in range(draws):
        counts[select_mixed(tree, lam, alpha, rng)] += 1
    return counts


def _within_3se(counts, p):
    n = counts.sum()
    se = np.sqrt(p * (1 - p) / n)
    return bool(np.all(np.abs(counts / n - p) <= 3 * se)), float(np.max(np.abs(counts / n - p) / se))


def test_criterion_2_selection_laws():
    t0 = time.perf_counter()
    draws = 100_000
    uni = _flat_tree([0.05, 0.9, 0.3, 0.6, 0.75])
    ok_u, z_u = _within_3se(_frequencies(uni, 1.0, 5.0, draws, 1), np.full(5, 0.2))
    sym = _flat_tree([0.4, 0.4, 0.4])
    ok_s, z_s = _within_3se(_frequencies(sym, 0.25, 0.55, draws, 2), np.full(3, 1 / 3))
    mix = _flat_tree([0.2, 0.8, 0.5])
    p = mixed_probabilities([0.2, 0.8, 0.5], 0.25, 0.55)
    ok_m, z_m = _within_3se(_frequencies(mix, 0.25, 0.55, draws, 3), p)

    rng = np.random.default_rng(4)
    argmax_ok = True
    for _ in range(500):
        k = int(rng.integers(1, 9))
        qs = list(np.round(rng.random(k), 1))  # coarse values force ties
        ns = list(rng.integers(1, 20, size=k))
        tree = _flat_tree(qs, ns)
        best = max(qs)
        argmax_ok &= select_ucb1(tree, 0.0) == qs.index(best)
    ok = ok_u and ok_s and ok_m and argmax_ok
    detail = (f"uniform max|z|={z_u:.2f}, symmetry max|z|={z_s:.2f}, mixed law max|z|={z_m:.2f} "
              f"over {draws} draws each; c=0 argmax with lowest-id ties {'holds' if argmax_ok else 'violated'}")
    assert report(2, "selection-policy laws", ok, detail, t0, 30)


# ---------------------------------------------------------------------------
# 3. backpropagation invariants


def test_criterion_3_backprop_invariants(seed):
    t0 = time.perf_counter()
    land = SyntheticLandscape(0.6, {"reference count = 0": 0.08, "has_section:Question-Type Triage Checklist": 0.05,
                                    "lacks_section:Heuristics": -0.04, "section count = 5": 0.03},
                              noise_sd=0.05, rng_seed=17)
    playbook = read_yaml("playbook.yaml")
    failures, rounds_total, nodes_total = [], 0, 0
    for s in range(100):
        rr = random.Random(s)
        policy = "UCB1" if s % 2 else "Mixed"
        cfg = SearchConfig(max_rounds=rr.randint(1, 50), selection_policy=policy, exploration_constant=rr.uniform(0.1, 2),
                           alpha=rr.uniform(0.1, 5), lambda_=rr.random(), stale_rounds_to_stop=50,
                           min_rounds_before_convergence=50, rng_seed=s)
        res = run_search(seed, cfg, ScriptedAdvisor(playbook), SyntheticEvaluator(land),
                         RefinementBudget(1, 1.833, 1))
        t = res.tree
        root = t.nodes[t.root_id]
        total = math.fsum(n.reward_at_creation for n in t.nodes.values())
        if not math.isclose(root.mean_reward * root.visit_count, total, rel_tol=0, abs_tol=1e-12):
            failures.append((s, "conservation"))
        if root.visit_count != len(t):
            failures.append((s, "root count"))
        for n in t.nodes.values():
            if n.visit_count != 1 + sum(t.nodes[c].visit_count for c in n.children):
                failures.append((s, f"count at {n.id}"))
        rounds_total += len(res.round_log)
        nodes_total += len(t)
    detail = f"100 seeds, {rounds_total} rounds, {nodes_total} nodes, {len(failures)} violations"
    assert report(3, "backpropagation invariants", not failures, detail, t0, 60)


# ---------------------------------------------------------------------------
# 4. LCB gate calibration


class _SameContent:
    """Variant generator whose candidates equal the current content, so true improvement is 0."""

    def refine_variant(self, family, current, structure, profile, feedback):
        return current

    def refinement_done(self, family, m, records):
        return False


def test_criterion_4_gate_calibration(theta0, phi0):
    t0 = time.perf_counter()
    trials, k = 10_000, 10
    land = SyntheticLandscape(0.5, noise_sd=0.05, rng_seed=99)
    baseline = land.noiseless(theta0, phi0)
    ev = SyntheticEvaluator(land)
    # single-structure package: skip re-validation, it cannot change between variants
    fast_validator = lambda pkg, policy=None: _VALID
    deltas = []
    for _ in range(trials):
        rec = refine(phi0, theta0, RefinementFamily.InstructionText, _SameContent(), ev,
                     RefinementBudget(1, 1.833, k), baseline, validator=fast_validator)[0]
        assert len(rec.deltas) == k
        deltas.append(rec.deltas)
    lines, ok = [], True
    for t in (0.0, 1.0, 1.833):
        rate = sum(lcb(d, t) >= 0 for d in deltas) / trials
        nominal = float(stats.t.sf(t, k - 1))
        se = math.sqrt(nominal * (1 - nominal) / trials)
        good = rate <= nominal + 3 * se
        if t == 0.0:
            good &= abs(rate - 0.5) <= 3 * se
        ok &= good
        lines.append(f"t={t}: rate {rate:.4f} vs nominal {nominal:.4f} (+3se {nominal + 3 * se:.4f})")
    assert report(4, "LCB gate calibration", ok, "; ".join(lines), t0, 30)


_VALID = validate(load_package(SEED_DIR))


# ---------------------------------------------------------------------------
# 5. end-to-end oracle equivalence


def test_criterion_5_end_to_end_oracle(seed, theta0, phi0, landscape):
    t0 = time.perf_counter()
    playbook = read_yaml("playbook_actions.yaml")
    actions = ScriptedAdvisor(playbook).action_set
    oracle = enumerate_optimum(theta0, phi0, actions, landscape, depth=2)
    seeds = range(20)
    hits: dict[str, list[int]] = {"A": [], "B": []}
    export_ok = True
    for name in ("A", "B"):
        for s in seeds:
            cfg = SearchConfig.preset(name, max_rounds=6, rng_seed=s)
            res = run_search(seed, cfg, ScriptedAdvisor(playbook), SyntheticEvaluator(landscape),
                             RefinementBudget(1, 1.833, 1))
            if math.isclose(res.best_reward, oracle, abs_tol=1e-12):
                hits[name].append(s)
            doc = tree_document(res)
            validate_tree_document(doc)
            by_id = {n["id"]: n for n in doc["nodes"]}
            path = doc["best_path"]
            export_ok &= path == res.best_path() and math.isclose(by_id[path[-1]]["reward"], res.best_reward)
            export_ok &= all(by_id[b]["parent"] == a for a, b in zip(path, path[1:]))
    misses = {k: sorted(set(seeds) - set(v)) for k, v in hits.items()}
    ok = all(len(v) == len(seeds) for v in hits.values()) and export_ok
    detail = (f"enumerated optimum {oracle:.4f}; A reached it on {len(hits['A'])}/20 seeds, "
              f"B on {len(hits['B'])}/20 (misses A {misses['A']}, B {misses['B']}); "
              f"winning path in export: {'yes' if export_ok else 'no'}")
    assert report(5, "end-to-end oracle equivalence", ok, detail, t0, 60)


# ---------------------------------------------------------------------------
# 6. parser round trip and budget boundaries


def _corpus() -> list[SkillPackage]:
    out = [load_package(SEED_DIR)]
    rng = random.Random(6)
    words = "objective constraint variable parameter index set bound feasible optimal slack".split()
    for i in range(19):
        n_sections = 1 + i % 5
        sections = []
        if i % 4 == 0:
            sections.append(("", f"Preamble for fixture {i}."))
        for j in range(n_sections):
            body = "\n".join(f"- {' '.join(rng.choices(words, k=rng.randint(3, 9)))}" for _ in range(1 + j))
            if (i + j) % 3 == 0:
                body += "\n\n```\n## not a heading\nx = 1\n```"
            sections.append((f"Section {j} {rng.choice(words).title()}", body))
        extra = {"license": "MIT"} if i % 3 == 0 else {}
        if i % 5 == 0:
            extra["metadata"] = {"owner": "ops", "rev": i}
        fm = Frontmatter(name=f"fixture-{i}", description=f"Fixture {i}: {' '.join(rng.choices(words, k=6))}.",
                         compatibility="python>=3.10" if i % 2 else None,
                         allowed_tools=("Read", "Bash") if i % 7 == 0 else None, extra=extra)
        refs = tuple((f"references/ref{r}.md", f"# Ref {r}\n{' '.join(rng.choices(words, k=12))}\n")
                     for r in range(i % 3))
        scripts = tuple((f"scripts/tool{r}.py", f"print({r})\n") for r in range(i % 2 + (i % 4 == 3)))
        assets = tuple((f"assets/blob{r}.bin", bytes(rng.randrange(256) for _ in range(8))) for r in range(i % 2))
        out.append(SkillPackage(fm, tuple(sections), scripts, refs, assets, root_name=f"fixture-{i}"))
    return out


def _sized(total_words: int) -> SkillPackage:
    skeleton = "---\nname: orqa\ndescription: d\n---\n\n## A\n"
    body_words = total_words - len(skeleton.split())
    raw = (skeleton + " ".join(["w"] * body_words) + "\n").encode()
    return parse_package({"SKILL.md": raw})


def test_criterion_6_round_trip_and_boundaries():
    t0 = time.perf_counter()
    corpus = _corpus()
    assert any(p.references and [x for x, _ in p.references] == [REF] for p in corpus[:1])
    round_trip_fail = []
    for pkg in corpus:
        once = serialize_package(pkg)
        again = parse_package(once, root_name=pkg.root_name)
        if again != pkg or serialize_package(again) != once:
            round_trip_fail.append(pkg.frontmatter.name)
        if derive_structure(again) != derive_structure(pkg):
            round_trip_fail.append(pkg.frontmatter.name + " structure")
        if not validate(pkg).valid:
            round_trip_fail.append(pkg.frontmatter.name + " invalid")

    # activation tokens = ceil(4w/3) over the whole SKILL.md, computed here with exact fractions
    boundary = []
    for words, expect_tokens, warn, valid in ((2625, 3500, False, True), (2626, 3502, True, True),
                                              (3750, 5000, True, True), (3751, 5002, False, False)):
        assert math.ceil(Fraction(4 * words, 3)) == expect_tokens
        rep = validate(_sized(words))
        got = (rep.activation_tokens, "BudgetWarning" in rep.codes(), rep.valid, "BudgetExceeded" in rep.codes())
        want = (expect_tokens, warn, valid, not valid)
        boundary.append(got == want)
        if got != want:
            _emit(f"  boundary {words} words: got {got}, want {want}")
    ok = not round_trip_fail and all(boundary)
    detail = (f"{len(corpus)} fixtures, {len(round_trip_fail)} round-trip failures; "
              f"boundaries 3500/3502/5000/5002 tokens {'exact' if all(boundary) else 'wrong'}")
    assert report(6, "parser round trip and budget boundaries", ok, detail, t0, 5)


# ---------------------------------------------------------------------------
# 7. sweep protocol audit


def audit_sweep_report(rep: dict) -> list[str]:
    """Check the selection protocol using only the report's contents."""
    problems = []
    if len(rep.get("protocol") or []) != 4:
        problems.append("protocol description missing")
    rows = rep["configs"]
    ok_rows = [r for r in rows if r["status"] == "ok"]
    for r in ok_rows:
        if r["search_peak"] is None or r["confirm"] is None:
            problems.append(f"{r['name']}: missing search peak or confirm score")
        elif r["search_peak"] < r["seed_search_reward"]:
            problems.append(f"{r['name']}: search peak below the seed")
    best = None
    for r in ok_rows:  # argmax, earliest row wins ties
        if best is None or r["confirm"] > best["confirm"]:
            best = r
    if best is None or rep["winner"] is None or rep["winner"]["name"] != best["name"]:
        problems.append("winner is not the confirm argmax")
    elif rep["winner"]["confirm"] != best["confirm"]:
        problems.append("winner confirm score disagrees with its row")
    counts = rep.get("evaluation_counts") or {}
    if counts.get("confirm") != len(ok_rows):
        problems.append("confirm evaluations != completed configs")
    if counts.get("test") != 2:
        problems.append("test split not evaluated exactly twice (winner and seed)")
    t = rep.get("test") or {}
    if not {"winner", "seed"} <= set(t) or not math.isclose(t["improvement"], t["winner"] - t["seed"]):
        problems.append("test block incomplete")
    return problems


def test_criterion_7_sweep_audit(tmp_path, monkeypatch):
    t0 = time.perf_counter()
    work = tmp_path / "fx"
    shutil.copytree(FIXTURES, work)
    monkeypatch.chdir(work)
    # second pair: A is confined to InlineReference by its profile whitelist, so B finds the better skill
    (work / "narrow.yaml").write_text(yaml.safe_dump({
        "profile": {"task_summary": "t", "priority_action_kinds": ["InlineReference"]},
        "actions": [f'InlineReference(path="{REF}", into="Question Types")',
                    'AddSection(heading="Question-Type Triage Checklist")'],
        "fallback": "none", "stop_after": 1}))
    (work / "steep.yaml").write_text(yaml.safe_dump({
        "base_reward": 0.7, "bonuses": {"reference count = 0": 0.02,
                                        "has_section:Question-Type Triage Checklist": 0.1}}))
    for c in "AB":
        m = yaml.safe_load((work / f"manifest_{c}.yaml").read_text())
        m.update(advisor="scripted:narrow.yaml", evaluator="synthetic:steep.yaml")
        (work / f"narrow_{c}.yaml").write_text(yaml.safe_dump(m))

    results = []
    for label, configs, expect in (("table2", ["manifest_A.yaml", "manifest_B.yaml"], "A"),
                                   ("narrow", ["narrow_A.yaml", "narrow_B.yaml"], "B")):
        argv = ["sweep", "--out", f"sw_{label}"]
        for c in configs:
            argv += ["--config", c]
        code = cli_main(argv)
        rep = json.loads((work / f"sw_{label}" / "sweep_report.json").read_text())
        problems = audit_sweep_report(rep)
        if code != 0:
            problems.append(f"exit {code}")
        if rep["winner"] and rep["winner"]["name"] != expect:
            problems.append(f"winner {rep['winner']['name']}, expected {expect}")
        results.append((label, rep, problems))
    ok = all(not p for _, _, p in results)
    detail = "; ".join(
        f"{label}: peaks {[r['search_peak'] for r in rep['configs']]}, confirm {[r['confirm'] for r in rep['configs']]}, "
        f"winner {rep['winner']['name'] if rep['winner'] else None}, problems {p or 'none'}"
        for label, rep, p in results)
    assert report(7, "sweep protocol audit", ok, detail, t0, 60)


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))

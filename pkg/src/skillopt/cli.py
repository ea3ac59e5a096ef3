"""Command-line entry point: ``skillopt {validate,optimize,sweep,evaluate,export-tree}``."""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path
from typing import Any, Sequence

from .advisor import make_advisor
from .errors import AdvisorFailure, ConfigError, PackageError, SeedInvalid, SkillOptError
from .export import dumps_json, tree_document, tree_dot, validate_tree_document, write_jsonl
from .manifest import EvaluatorFactory, RunManifest, load_manifest, manifest_from_mapping
from .package import BudgetPolicy, SkillPackage, derive_structure, extract_content, load_package, recompose, \
    validate, write_package
from .search import SearchResult, run_search

log = logging.getLogger("skillopt")

EXIT_OK, EXIT_FAIL, EXIT_IO = 0, 1, 2

RUN_FILES = ("optimized", "tree.json", "tree.dot", "rounds.jsonl", "report.json", "advisor_exchanges.jsonl")


class CommandError(Exception):
    def __init__(self, message: str, code: int = EXIT_IO):
        super().__init__(message)
        self.code = code


def _err(msg: str) -> None:
    print(f"error: {msg}", file=sys.stderr)


def _prepare_out(out: Path, overwrite: bool) -> None:
    if out.exists() and any(out.iterdir()):
        if not overwrite:
            raise CommandError(f"{out} is not empty (pass --overwrite to replace it)")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)


def _manifest(args: argparse.Namespace, path: str | None) -> RunManifest:
    if path:
        m = load_manifest(path)
    else:
        m = manifest_from_mapping({"max_rounds": 3}, Path.cwd())
    return m.with_overrides(skill=getattr(args, "skill", None), dataset=getattr(args, "dataset", None),
                            out=getattr(args, "out", None), seed=getattr(args, "seed", None),
                            advisor=getattr(args, "advisor", None), evaluator=getattr(args, "evaluator", None))


def _load_skill(path: Path | None) -> SkillPackage:
    if path is None:
        raise CommandError("no skill directory given (--skill or manifest 'skill')")
    try:
        return load_package(path)
    except (OSError, PackageError) as exc:
        raise CommandError(f"{type(exc).__name__}: {exc}") from exc


# ---------------------------------------------------------------------------
# validate


def cmd_validate(args: argparse.Namespace) -> int:
    try:
        pkg = load_package(args.skill)
    except (OSError, PackageError) as exc:
        print(f"{type(exc).__name__}: {exc}")
        return EXIT_IO
    policy = BudgetPolicy()
    if args.config:
        policy = load_manifest(args.config).policy
    report = validate(pkg, policy)
    print(report.format())
    return EXIT_OK if report.valid else EXIT_FAIL


# ---------------------------------------------------------------------------
# optimize


def optimize(manifest: RunManifest) -> tuple[SearchResult, SkillPackage]:
    seed = _load_skill(manifest.skill)
    if not manifest.advisor:
        raise CommandError("no advisor backend given (--advisor or manifest 'advisor')")
    if not manifest.evaluator:
        raise CommandError("no evaluator backend given (--evaluator or manifest 'evaluator')")
    advisor = make_advisor(manifest.advisor, model=manifest.model, budgets=manifest.stage_budgets,
                           composite_cap=manifest.config.composite_cap)
    factory = EvaluatorFactory(manifest)
    result = run_search(seed, manifest.config, advisor, factory.for_split("search", seed.root_name),
                        manifest.refinement, policy=manifest.policy)
    return result, seed


def report_document(manifest: RunManifest, result: SearchResult) -> dict[str, Any]:
    best = result.tree.best
    return {
        "run": manifest.summary(),
        "seed_reward": result.seed_reward,
        "best_reward": result.best_reward,
        "improvement": result.best_reward - result.seed_reward,
        "best_node": best.id,
        "best_path": result.best_path(),
        "best_actions": [result.tree.nodes[i].action_label for i in result.best_path()[1:]],
        "rounds": len(result.round_log),
        "accepted_rounds": result.accepted_rounds,
        "rejected_rounds": len(result.round_log) - result.accepted_rounds,
        "stop_reason": result.stop_reason,
        "nodes": len(result.tree),
        "profile": result.profile.to_dict(),
        "advisor_calls": len(result.exchanges),
    }


def write_run(out: Path, manifest: RunManifest, result: SearchResult, seed: SkillPackage) -> dict[str, Any]:
    best_pkg = recompose(result.best_content, result.best_structure, root_name=seed.root_name)
    write_package(best_pkg, out / "optimized")
    doc = tree_document(result)
    (out / "tree.json").write_text(dumps_json(doc), encoding="utf-8")
    (out / "tree.dot").write_text(tree_dot(doc), encoding="utf-8")
    write_jsonl(out / "rounds.jsonl", result.round_log)
    write_jsonl(out / "advisor_exchanges.jsonl", (e.to_dict() for e in result.exchanges))
    report = report_document(manifest, result)
    (out / "report.json").write_text(dumps_json(report), encoding="utf-8")
    return report


def cmd_optimize(args: argparse.Namespace) -> int:
    manifest = _manifest(args, args.config)
    if manifest.out is None:
        raise CommandError("no output directory given (--out or manifest 'out')")
    try:
        result, seed = optimize(manifest)
    except SeedInvalid as exc:
        _err(f"seed skill is invalid\n{exc}")
        return EXIT_FAIL
    except AdvisorFailure as exc:
        _err(f"advisor failed: {exc}")
        return EXIT_FAIL
    _prepare_out(manifest.out, args.overwrite)
    report = write_run(manifest.out, manifest, result, seed)
    print(f"seed reward {report['seed_reward']:.4f} -> best {report['best_reward']:.4f} "
          f"({report['accepted_rounds']} accepted of {report['rounds']} rounds, stop: {report['stop_reason']})")
    print(f"wrote {manifest.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# sweep


def sweep(manifests: Sequence[RunManifest], out: Path) -> dict[str, Any]:
    """Search per config, confirm-split selection, one test evaluation of winner and seed."""
    shared = manifests[0]
    seed = _load_skill(shared.skill)
    theta0 = derive_structure(seed)
    phi0 = extract_content(seed, theta0)
    judge = EvaluatorFactory(shared)

    rows: list[dict[str, Any]] = []
    candidates: dict[str, tuple[Any, Any]] = {}
    counts = {"confirm": 0, "test": 0}
    for m in manifests:
        row: dict[str, Any] = {"name": m.name, "manifest": str(m.source) if m.source else None,
                               "config": m.config.to_dict()}
        try:
            result, run_seed = optimize(m)
            run_dir = out / "runs" / m.name
            run_dir.mkdir(parents=True, exist_ok=True)
            write_run(run_dir, m, result, run_seed)
            confirm = judge.for_split("confirm", seed.root_name).evaluate(result.best_structure, result.best_content)
            counts["confirm"] += 1
            row.update(status="ok", seed_search_reward=result.seed_reward, search_peak=result.best_reward,
                       best_actions=[result.tree.nodes[i].action_label for i in result.best_path()[1:]],
                       rounds=len(result.round_log), stop_reason=result.stop_reason,
                       confirm=confirm.reward, run_dir=f"runs/{m.name}")
            candidates[m.name] = (result.best_structure, result.best_content)
        except (SkillOptError, CommandError, OSError, ValueError) as exc:
            log.warning("config %s failed: %s", m.name, exc)
            row.update(status="failed", error=f"{type(exc).__name__}: {exc}", search_peak=None, confirm=None)
        rows.append(row)

    ok = [r for r in rows if r["status"] == "ok"]
    report: dict[str, Any] = {
        "protocol": [
            "each configuration searches on the search split and yields one candidate",
            "each candidate is re-evaluated once on the confirm split",
            "the winner is the candidate with the highest confirm score (earliest configuration on ties)",
            "the winner and the seed are each evaluated once on the test split",
        ],
        "configs": rows,
        "winner": None,
        "test": None,
        "evaluation_counts": counts,
    }
    if not ok:
        return report
    winner = ok[0]
    for r in ok[1:]:
        if r["confirm"] > winner["confirm"]:
            winner = r
    report["winner"] = {"name": winner["name"], "confirm": winner["confirm"]}
    structure, content = candidates[winner["name"]]
    win_test = judge.for_split("test", seed.root_name).evaluate(structure, content)
    seed_test = judge.for_split("test", seed.root_name).evaluate(theta0, phi0)
    counts["test"] += 2
    report["test"] = {"winner": win_test.reward, "seed": seed_test.reward,
                      "improvement": win_test.reward - seed_test.reward}
    best_pkg = recompose(content, structure, root_name=seed.root_name)
    write_package(best_pkg, out / "winner")
    return report


def _sweep_table(report: dict[str, Any]) -> str:
    def fmt(x: Any) -> str:
        return "-" if x is None else f"{x:.4f}"

    lines = [f"{'config':<12} {'status':<7} {'search peak':>11} {'confirm':>8}"]
    for r in report["configs"]:
        lines.append(f"{r['name']:<12} {r['status']:<7} {fmt(r.get('search_peak')):>11} {fmt(r.get('confirm')):>8}")
    if report["winner"]:
        t = report["test"]
        lines.append(f"winner: {report['winner']['name']}  test: winner {fmt(t['winner'])}, seed {fmt(t['seed'])}")
    else:
        lines.append("no configuration completed")
    return "\n".join(lines)


def cmd_sweep(args: argparse.Namespace) -> int:
    if not args.config:
        raise CommandError("sweep needs at least one --config")
    manifests = [_manifest(args, p) for p in args.config]
    names = [m.name for m in manifests]
    if len(set(names)) != len(names):
        raise CommandError(f"manifest names must be unique, got {names}")
    out = Path(args.out) if args.out else manifests[0].out
    if out is None:
        raise CommandError("no output directory given (--out)")
    _prepare_out(out, args.overwrite)
    report = sweep(manifests, out)
    (out / "sweep_report.json").write_text(dumps_json(report), encoding="utf-8")
    print(_sweep_table(report))
    return EXIT_OK if report["winner"] else EXIT_FAIL


# ---------------------------------------------------------------------------
# evaluate and export-tree


def cmd_evaluate(args: argparse.Namespace) -> int:
    manifest = _manifest(args, args.config)
    pkg = _load_skill(manifest.skill)
    if not manifest.evaluator:
        raise CommandError("no evaluator backend given (--evaluator)")
    report = validate(pkg, manifest.policy)
    if not report.valid:
        print(report.format())
        return EXIT_FAIL
    structure = derive_structure(pkg)
    result = EvaluatorFactory(manifest).for_split(args.split, pkg.root_name).evaluate(
        structure, extract_content(pkg, structure))
    print(dumps_json({"split": args.split, **result.to_dict()}), end="")
    return EXIT_OK


def cmd_export_tree(args: argparse.Namespace) -> int:
    src = Path(args.run_dir) / "tree.json"
    if not src.is_file():
        raise CommandError(f"{args.run_dir} has no tree.json")
    try:
        doc = json.loads(src.read_text(encoding="utf-8"))
        validate_tree_document(doc)
    except Exception as exc:  # noqa: BLE001 - any malformed export is an IO-class failure
        raise CommandError(f"bad tree export: {exc}") from exc
    text = dumps_json(doc) if args.format == "structured" else tree_dot(doc)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="skillopt", description="Bilevel structure/content optimizer for agent skills.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def backends(sp: argparse.ArgumentParser) -> None:
        sp.add_argument("--skill", help="seed skill directory")
        sp.add_argument("--dataset", help="JSONL task dataset (exact-match evaluator)")
        sp.add_argument("--seed", type=int, help="overrides rng_seed and the split seed")
        sp.add_argument("--advisor", help="scripted:<playbook.yaml> or remote")
        sp.add_argument("--evaluator", help="exact-match:<runner command or URL> or synthetic:<landscape.yaml>")

    v = sub.add_parser("validate", help="check a skill directory")
    v.add_argument("skill", nargs="?")
    v.add_argument("--skill", dest="skill_flag")
    v.add_argument("--config", help="manifest supplying the budget policy")
    v.set_defaults(func=cmd_validate)

    o = sub.add_parser("optimize", help="run one search")
    o.add_argument("--config", help="run manifest (YAML)")
    o.add_argument("--out")
    o.add_argument("--overwrite", action="store_true")
    backends(o)
    o.set_defaults(func=cmd_optimize)

    s = sub.add_parser("sweep", help="run several manifests and select a winner on the confirm split")
    s.add_argument("--config", action="append", default=[], help="repeat once per configuration")
    s.add_argument("--out")
    s.add_argument("--overwrite", action="store_true")
    backends(s)
    s.set_defaults(func=cmd_sweep)

    e = sub.add_parser("evaluate", help="score a skill on one split")
    e.add_argument("--config")
    e.add_argument("--split", default="test", choices=("search", "confirm", "test"))
    backends(e)
    e.set_defaults(func=cmd_evaluate)

    x = sub.add_parser("export-tree", help="re-export a finished run's search tree")
    x.add_argument("run_dir")
    x.add_argument("--format", choices=("structured", "dot"), default="dot")
    x.add_argument("--out")
    x.set_defaults(func=cmd_export_tree)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "validate":
        args.skill = args.skill_flag or args.skill
        if not args.skill:
            _err("validate needs a skill directory")
            return EXIT_IO
    try:
        return args.func(args)
    except CommandError as exc:
        _err(str(exc))
        return exc.code
    except ConfigError as exc:
        _err(f"configuration: {exc}")
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())

from __future__ import annotations

from dataclasses import replace

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from skillopt.edits import (
    ActionKind,
    EditAction,
    admissible_actions,
    admissible_kinds,
    apply_edit,
    apply_edits,
    composite_label,
    diff_structures,
    heading_for_reference,
    parse_action,
)
from skillopt.errors import ActionSyntaxError, BadParams, InadmissibleAction
from skillopt.package import Structure, derive_structure, load_package

from conftest import REF, SEED_DIR

K = ActionKind


def act(kind: ActionKind, **params) -> EditAction:
    return EditAction(kind, params)


class TestAdmissible:
    def test_seed_catalog(self, theta0):
        kinds = admissible_kinds(theta0)
        assert {K.InlineReference, K.AddSection, K.ReviseDescription} <= kinds
        assert K.RemoveScript not in kinds and K.RemoveAsset not in kinds

    def test_whitelist(self, theta0):
        assert admissible_kinds(theta0, {"AddSection"}) == {K.AddSection}

    def test_no_reorder_with_one_section(self):
        s = Structure(("Only",), frozenset(), frozenset(), frozenset(), frozenset({"name", "description"}))
        assert K.ReorderSections not in admissible_kinds(s)
        assert K.InlineReference not in admissible_kinds(s)

    def test_reference_heading(self):
        assert heading_for_reference("references/question-types.md") == "Question Types"


class TestApply:
    def test_inline_reference_to_new_section(self, theta0):
        out = apply_edit(theta0, act(K.InlineReference, path=REF, into="Question-Type Triage Checklist"))
        assert not out.new_structure.references
        assert out.new_structure.section_headings[-1] == "Question-Type Triage Checklist"
        assert out.carried_note.moves == ((f"reference:{REF}", "section:Question-Type Triage Checklist"),)

    def test_identity_reorder(self, theta0):
        out = apply_edit(theta0, act(K.ReorderSections, perm=[0, 1, 2]))
        assert out.new_structure == theta0 and not out.carried_note.reordered

    def test_reorder(self, theta0):
        out = apply_edit(theta0, act(K.ReorderSections, perm=[2, 0, 1]))
        assert out.new_structure.section_headings == ("Final Checks", "Workflow", "Heuristics")
        assert out.carried_note.reordered

    def test_bad_permutation(self, theta0):
        with pytest.raises(BadParams):
            apply_edit(theta0, act(K.ReorderSections, perm=[0, 0, 1]))

    def test_remove_reference_when_none(self, theta0):
        s = replace(theta0, references=frozenset())
        with pytest.raises(InadmissibleAction):
            apply_edit(s, act(K.RemoveReference, path=REF))

    def test_missing_param(self, theta0):
        with pytest.raises(BadParams):
            apply_edit(theta0, act(K.AddSection))

    def test_add_section_anchor(self, theta0):
        out = apply_edit(theta0, act(K.AddSection, heading="Triage", anchor="Workflow"))
        assert out.new_structure.section_headings == ("Workflow", "Triage", "Heuristics", "Final Checks")

    def test_rename(self, theta0):
        out = apply_edit(theta0, act(K.RenameSection, heading="Heuristics", new_heading="Rules"))
        assert out.new_structure.section_headings == ("Workflow", "Rules", "Final Checks")
        assert out.carried_note.renamed_sections == (("Heuristics", "Rules"),)

    def test_extract(self, theta0):
        out = apply_edit(theta0, act(K.ExtractToReference, heading="Heuristics", path="references/heuristics.md"))
        assert "Heuristics" not in out.new_structure.section_headings
        assert "references/heuristics.md" in out.new_structure.references

    def test_metadata_keys(self, theta0):
        out = apply_edit(theta0, act(K.EditMetadataKeys, add=["compatibility"]))
        assert "compatibility" in out.new_structure.frontmatter_keys
        with pytest.raises(BadParams):
            apply_edit(theta0, act(K.EditMetadataKeys, remove=["name"]))

    def test_revise_description_keeps_structure(self, theta0):
        out = apply_edit(theta0, act(K.ReviseDescription))
        assert out.new_structure == theta0
        assert out.carried_note.revised == ("frontmatter:description",)

    def test_composite(self, theta0):
        out = apply_edits(theta0, [act(K.ReviseDescription), act(K.InlineReference, path=REF, into="Question Types")])
        assert not out.new_structure.references
        assert "frontmatter:description" in out.carried_note.revised

    def test_composite_cap(self, theta0):
        with pytest.raises(BadParams):
            apply_edits(theta0, [act(K.ReviseDescription)] * 4)


class TestDiff:
    def test_empty(self, theta0):
        assert diff_structures(theta0, theta0).is_empty()

    def test_added_section(self, theta0):
        after = apply_edit(theta0, act(K.AddSection, heading="Checks")).new_structure
        assert diff_structures(theta0, after).added_sections == ("Checks",)


class TestLabels:
    def test_canonical_form(self):
        a = act(K.InlineReference, path=REF, into="Question Types")
        assert a.label() == 'InlineReference(path="references/question-types.md", into="Question Types")'
        assert parse_action(a.label()) == a

    def test_composite_label(self):
        assert composite_label([act(K.ReviseDescription), act(K.AddSection, heading="X")]) == \
            'ReviseDescription() + AddSection(heading="X")'

    def test_syntax_error(self):
        with pytest.raises(ActionSyntaxError):
            parse_action("Explode(now=1)")
        with pytest.raises(ActionSyntaxError):
            parse_action("AddSection(heading=unquoted)")


# --- properties over the seed's reachable structures -----------------------

def _reachable(theta0, depth=2):
    frontier, seen = [theta0], {theta0.key(): theta0}
    for _ in range(depth):
        nxt = []
        for s in frontier:
            for a in admissible_actions(s):
                t = apply_edit(s, a).new_structure
                if t.key() not in seen:
                    seen[t.key()] = t
                    nxt.append(t)
        frontier = nxt
    return list(seen.values())


def test_admissibility_soundness_and_locality(theta0):
    for s in _reachable(theta0):
        for a in admissible_actions(s):
            out = apply_edit(s, a)
            t = out.new_structure
            # closure: no duplicate headings, prefixes respected
            assert len(set(t.section_headings)) == len(t.section_headings)
            assert all(p.startswith("references/") for p in t.references)
            # locality: untouched components keep their relative order
            touched = {a.params.get("heading"), a.params.get("new_heading"), a.params.get("into")}
            if a.kind is not K.ReorderSections:
                kept = [h for h in s.section_headings if h not in touched]
                assert [h for h in t.section_headings if h in kept] == kept
            # consistency with the structural diff
            d = diff_structures(s, t)
            n = out.carried_note.structural()
            assert set(d.added_sections) == set(n.added_sections)
            assert set(d.removed_sections) == set(n.removed_sections)
            assert set(d.added_references) == set(n.added_references)
            assert set(d.removed_references) == set(n.removed_references)


_SEED_STRUCTURE = derive_structure(load_package(SEED_DIR))


@settings(max_examples=200, deadline=None)
@given(st.data())
def test_apply_is_deterministic(data):
    theta0 = _SEED_STRUCTURE
    cat = admissible_actions(theta0)
    a = data.draw(st.sampled_from(cat))
    assert apply_edit(theta0, a) == apply_edit(theta0, a)
    assert parse_action(a.label()) == a

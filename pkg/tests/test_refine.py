from __future__ import annotations

import mpmath
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from skillopt.edits import ActionKind as K, EditAction, apply_edit
from skillopt.errors import BridgeFailure, EmptyDeltas, FamilyViolation, NoValidAttempts
from skillopt.evaluation import SyntheticEvaluator, SyntheticLandscape
from skillopt.package import is_compatible
from skillopt.refine import (
    STUB,
    AttemptRecord,
    RefinementBudget,
    RefinementFamily as F,
    align_content,
    check_family_edit,
    confidence,
    dispatch_family,
    lcb,
    rank_and_select,
    refine,
)

from conftest import REF


def act(kind, **params):
    return EditAction(kind, params)


class TestAlign:
    def test_identity(self, theta0, phi0):
        out = apply_edit(theta0, act(K.ReorderSections, perm=[0, 1, 2]))
        assert align_content(phi0, theta0, out.new_structure, out.carried_note) == phi0

    def test_inline_reference(self, theta0, phi0):
        out = apply_edit(theta0, act(K.InlineReference, path=REF, into="Question Types"))
        aligned = align_content(phi0, theta0, out.new_structure, out.carried_note)
        assert aligned.reference_texts == {}
        body = aligned.section_bodies["Question Types"]
        assert "- Objective: asks what quantity" in body
        assert "# Question Types" not in body  # duplicate title dropped

    def test_inline_into_existing_section_demotes(self, theta0, phi0):
        out = apply_edit(theta0, act(K.InlineReference, path=REF, into="Heuristics"))
        body = align_content(phi0, theta0, out.new_structure, out.carried_note).section_bodies["Heuristics"]
        assert body.startswith(phi0.section_bodies["Heuristics"])
        assert "### Question Types" in body

    def test_add_section_stub(self, theta0, phi0):
        out = apply_edit(theta0, act(K.AddSection, heading="Checks"))
        aligned = align_content(phi0, theta0, out.new_structure, out.carried_note)
        assert STUB in aligned.section_bodies["Checks"]

    def test_rename_carries_text(self, theta0, phi0):
        out = apply_edit(theta0, act(K.RenameSection, heading="Heuristics", new_heading="Rules"))
        aligned = align_content(phi0, theta0, out.new_structure, out.carried_note)
        assert aligned.section_bodies["Rules"] == phi0.section_bodies["Heuristics"]

    def test_extract_then_inline_round_trip(self, theta0, phi0):
        path = "references/heuristics.md"
        o1 = apply_edit(theta0, act(K.ExtractToReference, heading="Heuristics", path=path))
        c1 = align_content(phi0, theta0, o1.new_structure, o1.carried_note)
        assert c1.reference_texts[path].startswith("# Heuristics")
        o2 = apply_edit(o1.new_structure, act(K.InlineReference, path=path, into="Heuristics"))
        c2 = align_content(c1, o1.new_structure, o2.new_structure, o2.carried_note)
        assert c2.section_bodies["Heuristics"] == phi0.section_bodies["Heuristics"]

    def test_unknown_key(self, theta0, phi0):
        from skillopt.edits import CarriedNote
        note = CarriedNote(moves=(("reference:references/nope.md", "section:Workflow"),))
        with pytest.raises(BridgeFailure):
            align_content(phi0, theta0, theta0, note)

    def test_every_admissible_edit_aligns(self, theta0, phi0):
        from skillopt.edits import admissible_actions
        for a in admissible_actions(theta0):
            out = apply_edit(theta0, a)
            aligned = align_content(phi0, theta0, out.new_structure, out.carried_note)
            assert is_compatible(aligned, out.new_structure)


class TestDispatch:
    @pytest.mark.parametrize("kind,family", [
        (K.AddSection, F.InstructionText),
        (K.RemoveSection, F.InstructionText),
        (K.ReorderSections, F.InstructionText),
        (K.RenameSection, F.InstructionText),
        (K.InlineReference, F.Redistribution),
        (K.ExtractToReference, F.Redistribution),
        (K.AddReference, F.Redistribution),
        (K.RemoveReference, F.Redistribution),
        (K.AddScript, F.ScriptEdit),
        (K.RemoveScript, F.ScriptEdit),
        (K.AddAsset, F.MetadataLight),
        (K.RemoveAsset, F.MetadataLight),
        (K.ReviseDescription, F.MetadataRoutingText),
    ])
    def test_single(self, kind, family):
        assert dispatch_family(EditAction(kind, {})) is family

    def test_metadata_keys_only(self):
        assert dispatch_family(act(K.EditMetadataKeys, add=["license"])) is F.MetadataLight

    def test_composite_priority(self):
        assert dispatch_family([act(K.ReviseDescription), act(K.InlineReference, path=REF, into="X")]) \
            is F.Redistribution


class TestLcb:
    def test_worked_value(self):
        assert lcb([0.02, 0.04, 0.06], 1.0) == pytest.approx(0.028453, abs=1e-6)

    def test_zero_deltas_pass(self):
        assert lcb([0.0, 0.0, 0.0], 1.833) == 0.0

    def test_single(self):
        assert lcb([0.05], 1.833) == 0.05

    def test_empty(self):
        with pytest.raises(EmptyDeltas):
            lcb([], 1.0)

    @settings(max_examples=300)
    @given(st.lists(st.floats(-1, 1), min_size=1, max_size=12), st.floats(0, 5))
    def test_matches_high_precision(self, deltas, t):
        mpmath.mp.dps = 50
        k = len(deltas)
        xs = [mpmath.mpf(d) for d in deltas]
        mean = mpmath.fsum(xs) / k
        s = mpmath.sqrt(mpmath.fsum((x - mean) ** 2 for x in xs) / (k - 1)) if k > 1 else mpmath.mpf(0)
        expected = float(mean - mpmath.mpf(t) * s / mpmath.sqrt(k))
        assert lcb(deltas, t) == pytest.approx(expected, rel=1e-9, abs=1e-12)

    @given(st.lists(st.floats(-1, 1), min_size=2, max_size=8), st.floats(0, 3), st.floats(0, 3))
    def test_nonincreasing_in_t(self, deltas, t1, t2):
        lo, hi = sorted((t1, t2))
        assert lcb(deltas, hi) <= lcb(deltas, lo) + 1e-12


class TestRanking:
    def rec(self, i, gate, mean, conf):
        return AttemptRecord(i, None, (mean,), mean, 0.0, mean if gate else -1.0, gate, conf, 0.5)

    def test_gate_dominates(self):
        a, b = self.rec(1, False, 0.9, 0.5), self.rec(2, True, 0.1, 0.5)
        assert rank_and_select([a, b]) is b

    def test_larger_improvement(self):
        a, b = self.rec(1, True, 0.02, 0.5), self.rec(2, True, 0.05, 0.5)
        assert rank_and_select([a, b]) is b

    def test_confidence(self):
        a, b = self.rec(1, True, 0.05, 0.4), self.rec(2, True, 0.05, 0.7)
        assert rank_and_select([a, b]) is b

    def test_earliest_on_full_tie(self):
        a, b = self.rec(1, True, 0.05, 0.5), self.rec(2, True, 0.05, 0.5)
        assert rank_and_select([b, a]) is a

    def test_no_valid(self):
        r = self.rec(1, True, 0.0, 0.0)
        r.valid = False
        with pytest.raises(NoValidAttempts):
            rank_and_select([r])

    @given(st.permutations(range(6)))
    def test_permutation_invariant(self, order):
        recs = [self.rec(i + 1, i % 2 == 0, (i % 3) / 10, (i % 4) / 4) for i in range(6)]
        assert rank_and_select([recs[i] for i in order]) is rank_and_select(recs)

    def test_confidence_definition(self):
        assert confidence([0.1, -0.1, 0.2]) == pytest.approx(3 / 4 * 2 / 3)
        assert confidence([]) == 0.0


class TestFamilyCheck:
    def test_routing_text_cannot_edit_body(self, phi0):
        after = phi0.evolve(section_bodies={**phi0.section_bodies, "Workflow": "changed"})
        with pytest.raises(FamilyViolation):
            check_family_edit(F.MetadataRoutingText, phi0, after)

    def test_instruction_text_edits_body(self, phi0):
        after = phi0.evolve(section_bodies={**phi0.section_bodies, "Workflow": "changed"})
        check_family_edit(F.InstructionText, phi0, after)

    def test_also_editable(self, phi0):
        after = phi0.evolve(frontmatter=phi0.frontmatter.with_value("description", "new"))
        with pytest.raises(FamilyViolation):
            check_family_edit(F.Redistribution, phi0, after)
        check_family_edit(F.Redistribution, phi0, after, also=("frontmatter:description",))


# --- refine loop with scripted variants --------------------------------------

class FixedAdvisor:
    """Returns queued variant builders; signals done after ``stop_after`` attempts."""

    def __init__(self, builders, stop_after=None):
        self.builders = list(builders)
        self.stop_after = stop_after
        self.calls = 0

    def refine_variant(self, family, current, structure, profile, feedback):
        b = self.builders[self.calls % len(self.builders)]
        self.calls += 1
        return b(current)

    def refinement_done(self, family, m, records):
        return self.stop_after is not None and m >= self.stop_after


def with_body(text):
    return lambda c: c.evolve(section_bodies={**c.section_bodies, "Workflow": c.section_bodies["Workflow"] + text})


class TestRefineLoop:
    def land(self, bonus):
        return SyntheticLandscape(0.5, {"section_contains:Workflow|CHECKLIST": bonus})

    def test_single_variant_improvement(self, theta0, phi0):
        recs = refine(phi0, theta0, F.InstructionText, FixedAdvisor([with_body("\nCHECKLIST")]),
                      SyntheticEvaluator(self.land(0.05)), RefinementBudget(1, 1.833, 1), 0.5)
        assert len(recs) == 1
        assert recs[0].mean_delta == pytest.approx(0.05)
        assert recs[0].gate_passed and recs[0].deltas == pytest.approx((0.05,))

    def test_early_stop(self, theta0, phi0):
        recs = refine(phi0, theta0, F.InstructionText, FixedAdvisor([with_body("\nx")], stop_after=1),
                      SyntheticEvaluator(self.land(0.0)), RefinementBudget(3, 1.833, 2), 0.5)
        assert len(recs) == 1

    def test_sequential_trajectory(self, theta0, phi0):
        recs = refine(phi0, theta0, F.InstructionText, FixedAdvisor([with_body("\nstep")]),
                      SyntheticEvaluator(self.land(0.0)), RefinementBudget(3, 1.833, 1), 0.5)
        assert [r.content.section_bodies["Workflow"].count("step") for r in recs][-3:] == [1, 2, 3]

    def test_invalid_variant_discarded(self, theta0, phi0):
        empty = lambda c: c.evolve(section_bodies={**c.section_bodies, "Heuristics": ""})
        recs = refine(phi0, theta0, F.InstructionText, FixedAdvisor([empty, with_body("\nok")]),
                      SyntheticEvaluator(self.land(0.0)), RefinementBudget(1, 1.833, 2), 0.5)
        assert len(recs[0].deltas) == 1 and recs[0].discarded

    def test_all_invalid_recorded_and_skipped(self, theta0, phi0):
        empty = lambda c: c.evolve(section_bodies={**c.section_bodies, "Heuristics": ""})
        recs = refine(phi0, theta0, F.InstructionText, FixedAdvisor([empty]),
                      SyntheticEvaluator(self.land(0.0)), RefinementBudget(2, 1.833, 1), 0.5)
        assert [r.valid for r in recs] == [False, False]
        with pytest.raises(NoValidAttempts):
            rank_and_select(recs)

    def test_family_violation_discarded(self, theta0, phi0):
        touch = lambda c: c.evolve(frontmatter=c.frontmatter.with_value("description", "x"))
        recs = refine(phi0, theta0, F.InstructionText, FixedAdvisor([touch, with_body("\nok")]),
                      SyntheticEvaluator(self.land(0.0)), RefinementBudget(1, 1.833, 2), 0.5)
        assert any("FamilyViolation" in d for d in recs[0].discarded)

    def test_records_are_compatible(self, theta0, phi0):
        recs = refine(phi0, theta0, F.InstructionText, FixedAdvisor([with_body("\na"), with_body("\nb")]),
                      SyntheticEvaluator(self.land(0.0)), RefinementBudget(2, 1.833, 2), 0.5)
        assert all(is_compatible(r.content, theta0) for r in recs)
        assert all(len(r.digest) == 16 for r in recs)

from collections import Counter
from fractions import Fraction
from math import floor, sqrt

import pytest

from argstance.corpus import Label, LabeledDataset
from argstance.preprocess import (
    DictionaryRecognizer,
    FewShotPlan,
    PersonSpan,
    sample_stratified,
    sample_tfs,
    shuffle_persons,
    swap_onion,
)
from argstance.synthetic import PERSON_POOL, make_dataset, make_dataset_with_counts

from conftest import unit


class TestDictionaryRecognizer:
    def test_finds_surfaces_sorted_and_disjoint(self):
        rec = DictionaryRecognizer(["Anna Berger", "Berger", "Falk"])
        spans = rec.recognize("Anna Berger traf Falk und Berger")
        assert [(s.surface, s.start) for s in spans] == [
            ("Anna Berger", 0),
            ("Falk", 17),
            ("Berger", 26),
        ]
        ends = [s.end for s in spans]
        assert all(spans[i + 1].start >= ends[i] for i in range(len(spans) - 1))

    def test_word_boundaries(self):
        rec = DictionaryRecognizer(["Stein"])
        assert rec.recognize("Steinmeier sprach") == []
        assert [s.surface for s in rec.recognize("Stein sprach")] == ["Stein"]

    def test_empty_dictionary(self):
        assert DictionaryRecognizer([]).recognize("Anna Berger") == []

    def test_from_file(self, tmp_path):
        path = tmp_path / "persons.txt"
        path.write_text("Anna Berger\nFalk\n\n", encoding="utf-8")
        rec = DictionaryRecognizer.from_file(path)
        assert rec.surfaces == ["Anna Berger", "Falk"]


class _BrokenRecognizer:
    def recognize(self, text):
        if "Falk" in text:
            i = text.index("Falk")
            return [PersonSpan(i, i + 4, "Falk"), PersonSpan(i + 2, i + 6, "lk u")]
        return []


class TestShufflePersons:
    def test_single_entity_pool_maps_to_itself(self):
        ds = LabeledDataset(
            units=(
                unit(uid="a", text="Anna Berger verlangt die lieferung sofort"),
                unit(uid="b", text="Anna Berger untersagt das", label=Label.CLAIM_AGAINST),
            )
        )
        out = shuffle_persons(ds, DictionaryRecognizer(["Anna Berger"]), seed=0)
        assert [u.text for u in out.units] == [u.text for u in ds.units]

    def test_repeated_surface_gets_one_replacement(self):
        ds = LabeledDataset(
            units=(
                unit(uid="a", text="Falk sagt und Falk betont die lieferung"),
                unit(uid="b", text="Roth bleibt still", label=Label.NO_STANCE),
            )
        )
        rec = DictionaryRecognizer(["Falk", "Roth"])
        out = shuffle_persons(ds, rec, seed=3)
        words = out.units[0].text.split()
        assert words[0] == words[3]
        assert words[0] in ("Falk", "Roth")

    def test_deterministic(self):
        ds = make_dataset(50, seed=21, person_rate=0.8)
        rec = DictionaryRecognizer(PERSON_POOL)
        a = shuffle_persons(ds, rec, seed=5)
        b = shuffle_persons(ds, rec, seed=5)
        assert a.units == b.units

    def test_preserves_label_multiset_and_non_span_text(self):
        ds = make_dataset(60, seed=8, person_rate=0.7)
        rec = DictionaryRecognizer(PERSON_POOL)
        out = shuffle_persons(ds, rec, seed=1)
        assert Counter(u.label for u in out.units) == Counter(u.label for u in ds.units)
        for before, after in zip(ds.units, out.units):
            assert before.onion == after.onion
            # replacing names with names keeps everything else intact
            spans = rec.recognize(before.text)
            residue = before.text
            for span in reversed(spans):
                residue = residue[: span.start] + "#" + residue[span.end :]
            out_spans = rec.recognize(after.text)
            out_residue = after.text
            for span in reversed(out_spans):
                out_residue = out_residue[: span.start] + "#" + out_residue[span.end :]
            assert residue == out_residue

    def test_mapping_consistent_across_unit_fields(self):
        ds = LabeledDataset(
            units=(
                unit(
                    uid="a",
                    text="Falk verlangt die lieferung",
                    before=("zuvor sprach Falk",),
                    after=("Falk blieb dabei",),
                ),
                unit(uid="b", text="Roth sagt nichts", label=Label.NO_STANCE),
            )
        )
        rec = DictionaryRecognizer(["Falk", "Roth"])
        out = shuffle_persons(ds, rec, seed=11)
        transformed = out.units[0]
        replacement = transformed.text.split()[0]
        assert transformed.context_before[0].split()[-1] == replacement
        assert transformed.context_after[0].split()[0] == replacement

    def test_empty_pool_returns_dataset_unchanged(self, caplog):
        ds = make_dataset(10, seed=2, person_rate=0.0)
        with caplog.at_level("WARNING"):
            out = shuffle_persons(ds, DictionaryRecognizer(["Unbekannt"]), seed=0)
        assert out is ds
        assert "unchanged" in caplog.text

    def test_recognizer_contract_violation(self):
        ds = LabeledDataset(units=(unit(text="Falk und andere reden"),))
        with pytest.raises(ValueError, match="overlapping"):
            shuffle_persons(ds, _BrokenRecognizer(), seed=0)


class TestSwapOnion:
    def test_flips_flagged_claim_for(self):
        ds = LabeledDataset(units=(unit(label=Label.CLAIM_FOR, onion=True),))
        assert swap_onion(ds).units[0].label is Label.CLAIM_AGAINST

    def test_unflagged_untouched(self):
        ds = LabeledDataset(units=(unit(label=Label.ARGUMENT_AGAINST),))
        assert swap_onion(ds).units[0].label is Label.ARGUMENT_AGAINST

    def test_involution(self):
        ds = make_dataset(80, seed=13, onion_rate=0.3)
        assert swap_onion(swap_onion(ds)).units == ds.units

    def test_concept_preserved(self):
        ds = make_dataset(80, seed=14, onion_rate=0.5)
        def concept(label):
            return label.value.split("_")[0]

        for before, after in zip(ds.units, swap_onion(ds).units):
            assert concept(before.label) == concept(after.label)


class TestSampleStratified:
    def test_floor_rule_with_minimum_one(self):
        ds = make_dataset_with_counts((3, 40, 40, 40, 40))
        out = sample_stratified(ds, 0.025, seed=0)
        counts = Counter(u.label for u in out.units)
        assert counts[Label.ARGUMENT_FOR] == 1  # floor would be 0
        assert counts[Label.ARGUMENT_AGAINST] == 1

    def test_full_proportion_returns_everything(self):
        ds = make_dataset(40, seed=4)
        out = sample_stratified(ds, 1.0, seed=9)
        assert out.units == ds.units

    def test_exact_floor_counts(self):
        sizes = (46, 45, 101, 81, 91)
        ds = make_dataset_with_counts(sizes)
        for proportion in (0.025, 0.1, 0.3, 0.7):
            out = sample_stratified(ds, proportion, seed=17)
            counts = Counter(u.label for u in out.units)
            for label, size in zip(Label, sizes):
                expected = max(1, floor(Fraction(proportion).limit_denominator(10**6) * size))
                assert counts[label] == expected

    def test_floor_rule_on_both_published_size_vectors(self):
        # the floor rule governs samples for both label conditions' sizes
        for sizes in ((46, 45, 101, 81, 1091), (49, 42, 101, 81, 1091)):
            ds = make_dataset_with_counts(sizes)
            for proportion in (0.025, 0.05, 0.1, 0.2, 0.3, 0.5, 0.7, 1.0):
                out = sample_stratified(ds, proportion, seed=23)
                counts = Counter(u.label for u in out.units)
                frac = Fraction(proportion).limit_denominator(10**6)
                for label, size in zip(Label, sizes):
                    assert counts[label] == max(1, floor(frac * size))

    def test_subset_and_deterministic(self):
        ds = make_dataset(100, seed=5)
        a = sample_stratified(ds, 0.3, seed=2)
        b = sample_stratified(ds, 0.3, seed=2)
        ids = {u.unit_id for u in ds.units}
        assert {u.unit_id for u in a.units} <= ids
        assert a.units == b.units

    def test_empty_train_rejected(self):
        with pytest.raises(ValueError):
            sample_stratified(LabeledDataset(units=()), 0.5, seed=0)

    def test_proportion_bounds(self):
        ds = make_dataset(10, seed=0)
        for p in (0.0, 1.5):
            with pytest.raises(ValueError):
                sample_stratified(ds, p, seed=0)


class TestSampleTfs:
    def test_full_proportion(self):
        ds = make_dataset(30, seed=6)
        assert sample_tfs(ds, 1.0, seed=1).units == ds.units

    def test_sample_size_is_floor_of_total(self):
        ds = make_dataset(100, seed=7)
        assert len(sample_tfs(ds, 0.5, seed=3,).units) == 50
        assert len(sample_tfs(ds, 0.333, seed=3).units) == 33

    def test_zero_sample_rejected(self):
        ds = make_dataset(5, seed=0)
        with pytest.raises(ValueError, match="empty sample"):
            sample_tfs(ds, 0.1, seed=0)

    def test_different_seeds_differ(self):
        ds = make_dataset(100, seed=8)
        samples = [tuple(u.unit_id for u in sample_tfs(ds, 0.5, seed=s).units) for s in range(10)]
        assert len(set(samples)) == 10

    def test_per_class_counts_match_hypergeometric_mean(self):
        # unstratified sampling: per-class counts drift but their mean over
        # many seeds matches proportion x class size within 3 standard errors
        sizes = (10, 15, 20, 25, 30)
        ds = make_dataset_with_counts(sizes)
        total = sum(sizes)
        proportion = 0.4
        n = floor(proportion * total)
        runs = 150
        sums = Counter()
        for seed in range(runs):
            for u in sample_tfs(ds, proportion, seed=seed).units:
                sums[u.label] += 1
        for label, size in zip(Label, sizes):
            mean = n * size / total
            var = n * (size / total) * (1 - size / total) * (total - n) / (total - 1)
            se = sqrt(var / runs)
            assert abs(sums[label] / runs - mean) <= 3 * se


class TestFewShotPlan:
    def test_validation(self):
        with pytest.raises(ValueError):
            FewShotPlan(proportion=0.0, mode="stratified", seed=0)
        with pytest.raises(ValueError):
            FewShotPlan(proportion=0.5, mode="bogus", seed=0)
        with pytest.raises(ValueError):
            FewShotPlan(proportion=0.5, mode="tfs", seed=0, repetitions=0)

    def test_off_grid_proportion_is_flagged(self, caplog):
        with caplog.at_level("WARNING"):
            FewShotPlan(proportion=0.42, mode="stratified", seed=0)
        assert "outside the standard sweep grid" in caplog.text

    def test_grid_proportion_is_silent(self, caplog):
        with caplog.at_level("WARNING"):
            FewShotPlan(proportion=0.05, mode="tfs", seed=0, repetitions=10)
        assert caplog.text == ""

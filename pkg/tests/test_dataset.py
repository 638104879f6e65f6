"""Manifest validation, label stats, split planning, balancing."""

import collections

import numpy as np
import pytest

from hepacrop import dataset as ds


def rec(pid="p0", lesion=1, sl=0, spacing=2.0, days=30, **flags):
    labels = ds.MutationLabels(**{c: flags.get(c, 0) for c in ds.CLASSES_5})
    return ds.CropRecord(
        patient_id=pid, lesion_id=lesion, slice_index=sl,
        image_path=f"crops/{pid}_{lesion:03d}_{sl:04d}_128.png", resolution=128,
        labels=labels, slice_spacing_mm=spacing, days_ct_to_biopsy=days,
    )


def make_manifest(rng, n_patients, images_range=(2, 12), single_label=True):
    records = []
    for p in range(n_patients):
        pid = f"p{p:03d}"
        n_img = int(rng.integers(*images_range))
        cls = ds.CLASSES_5[int(rng.integers(0, 5))]
        flags = {cls: 1}
        if not single_label and cls != "other" and rng.random() < 0.2:
            extra = ds.CLASSES_5[int(rng.integers(0, 4))]
            if extra != "other":
                flags[extra] = 1
        for s in range(n_img):
            records.append(rec(pid, 1, s, **flags))
    return records


class TestValidateStudy:
    def test_boundary_inclusive(self):
        records = [rec(spacing=2.5, days=90, kras=1)]
        assert ds.validate_study(records) == []

    def test_spacing_violation(self):
        out = ds.validate_study([rec(spacing=3.0, kras=1)])
        assert [v.kind for v in out] == ["spacing"]

    def test_biopsy_delay_violation(self):
        out = ds.validate_study([rec(days=91, kras=1)])
        assert [v.kind for v in out] == ["biopsy_delay"]

    def test_label_consistency_violation(self):
        out = ds.validate_study([rec(other=1, kras=1)])
        assert [v.kind for v in out] == ["label_consistency"]
        out = ds.validate_study([rec()])  # no flag at all
        assert [v.kind for v in out] == ["label_consistency"]

    def test_does_not_mutate(self):
        records = [rec(spacing=9.9, kras=1)]
        before = records[0]
        ds.validate_study(records)
        assert records[0] == before


class TestGrouping:
    def test_examples(self):
        assert ds.group_labels_3(ds.MutationLabels(kras=1, pik3ca=1)) == (1, 1, 0)
        assert ds.group_labels_3(ds.MutationLabels(other=1)) == (0, 0, 1)
        assert ds.group_labels_3(ds.MutationLabels(nras=1)) == (1, 0, 0)

    def test_surjective_over_valid_inputs(self):
        seen = set()
        for flags in ([1, 0, 0, 0, 0], [0, 0, 1, 0, 0], [1, 0, 1, 0, 0],
                      [0, 0, 0, 0, 1]):
            seen.add(ds.group_labels_3(ds.MutationLabels(*flags)))
        assert seen == {(1, 0, 0), (0, 1, 0), (1, 1, 0), (0, 0, 1)}

    def test_idempotent_under_regrouping(self):
        # embedding a grouped triple back into five flags and regrouping
        # reproduces the triple
        import itertools
        for flags in itertools.product((0, 1), repeat=5):
            triple = ds.group_labels_3(ds.MutationLabels(*flags))
            ras, pik_braf, other = triple
            embedded = ds.MutationLabels(nras=ras, pik3ca=pik_braf, other=other)
            assert ds.group_labels_3(embedded) == triple


class TestLabelCorrelation:
    def test_identical_columns(self):
        labels = [ds.MutationLabels(nras=1, kras=1), ds.MutationLabels(other=1)]
        m = ds.label_correlation(labels)
        assert m[0, 1] == pytest.approx(1.0)

    def test_complement_columns(self):
        labels = [ds.MutationLabels(nras=1), ds.MutationLabels(kras=1)]
        m = ds.label_correlation(labels)
        assert m[0, 1] == pytest.approx(-1.0)

    def test_orthogonal_columns(self):
        # nras = [1,1,0,0], kras = [1,0,1,0] -> phi 0
        labels = [
            ds.MutationLabels(nras=1, kras=1),
            ds.MutationLabels(nras=1),
            ds.MutationLabels(kras=1),
            ds.MutationLabels(other=1),
        ]
        m = ds.label_correlation(labels)
        assert m[0, 1] == pytest.approx(0.0)

    def test_symmetric_unit_diagonal_bounded(self):
        rng = np.random.default_rng(4)
        labels = [ds.MutationLabels(*(int(v) for v in rng.integers(0, 2, size=5)))
                  for _ in range(40)]
        m = ds.label_correlation(labels)
        assert np.array_equal(m, m.T) or np.allclose(m, m.T, equal_nan=True)
        finite = np.isfinite(m)
        assert np.all(np.abs(m[finite]) <= 1 + 1e-12)
        for i in range(5):
            if finite[i, i]:
                assert m[i, i] == 1.0

    def test_zero_variance_yields_nan(self):
        labels = [ds.MutationLabels(kras=1), ds.MutationLabels(kras=1)]
        m = ds.label_correlation(labels)
        assert np.isnan(m[1, 1]) and np.isnan(m[0, 1])

    def test_needs_two_lesions(self):
        with pytest.raises(ValueError):
            ds.label_correlation([ds.MutationLabels(kras=1)])


class TestClassDistribution:
    def test_single_record_100_percent(self):
        dist = ds.class_distribution([rec(kras=1)])
        assert dist["kras"] == {"patients": 100.0, "lesions": 100.0, "images": 100.0}

    def test_two_patients_50_percent(self):
        records = [rec("a", kras=1), rec("b", other=1)]
        dist = ds.class_distribution(records)
        assert dist["kras"]["patients"] == 50.0
        assert dist["kras"]["lesions"] == 50.0
        assert dist["kras"]["images"] == 50.0

    def test_engineered_image_row_exact(self):
        from hepacrop.synth import manifest_from_class_counts
        counts = {"nras": 6, "kras": 34, "braf": 3, "pik3ca": 14, "other": 43}
        records = manifest_from_class_counts(counts)
        assert len(records) == 100
        dist = ds.class_distribution(records)
        for cls, pct in counts.items():
            assert dist[cls]["images"] == float(pct)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            ds.class_distribution([])


class TestMakeSplit:
    def test_uniform_ten_patients_one_test(self):
        records = [rec(f"p{i}", 1, s, kras=1) for i in range(10) for s in range(5)]
        plan = ds.make_split(records, seed=17, candidates=50)
        assert len(plan.test_patients) == 1
        assert set(plan.train_patients) | set(plan.test_patients) == \
            {f"p{i}" for i in range(10)}
        assert not set(plan.train_patients) & set(plan.test_patients)

    def test_deterministic(self):
        rng = np.random.default_rng(1)
        records = make_manifest(rng, 30)
        a = ds.make_split(records, seed=42, candidates=100)
        b = ds.make_split(records, seed=42, candidates=100)
        assert a == b
        assert a.to_json() == b.to_json()

    def test_disjoint_exhaustive_over_seeds_and_manifests(self):
        rng = np.random.default_rng(2)
        for trial in range(4):
            records = make_manifest(rng, int(rng.integers(20, 60)))
            patients = {r.patient_id for r in records}
            for seed in (17, 42, 1337, 2022, 31337):
                plan = ds.make_split(records, seed, candidates=200)
                train, test = set(plan.train_patients), set(plan.test_patients)
                assert train | test == patients
                assert not train & test
                frac = sum(plan.assignments[r.patient_id] == "test"
                           for r in records) / len(records)
                assert abs(frac - 0.1) <= 0.05 + 1e-12

    def test_chosen_plan_minimizes_divergence_over_candidates(self):
        # one patient holds every braf image; re-score all candidates by brute force
        records = []
        for i in range(12):
            records.extend(rec(f"p{i:02d}", 1, s, kras=1) for s in range(4))
        records.extend(rec("p_braf", 1, s, braf=1) for s in range(4))
        seed, m = 7, 300
        plan = ds.make_split(records, seed, candidates=m)

        total = len(records)
        best = None
        for test_set in ds.split_candidates(records, seed, 0.9, m):
            test = [r for r in records if r.patient_id in test_set]
            train = [r for r in records if r.patient_id not in test_set]
            if abs(len(test) / total - 0.1) > 0.05 + 1e-12 or not train or not test:
                continue

            def fracs(side):
                out = []
                for c in ds.CLASSES_5:
                    out.append(sum(getattr(r.labels, c) for r in side) / len(side))
                return out

            tv = 0.5 * sum(abs(a - b) for a, b in zip(fracs(train), fracs(test)))
            if best is None or tv < best - 1e-15:
                best = tv
        assert best is not None
        assert plan.label_divergence == pytest.approx(best, abs=1e-12)

    def test_no_candidate_in_window_reports_closest(self):
        # 2 patients with wildly unequal image counts: no 10% +/- 5% cut exists
        records = [rec("a", 1, s, kras=1) for s in range(50)]
        records += [rec("b", 1, s, other=1) for s in range(50)]
        with pytest.raises(ds.SplitError, match="closest"):
            ds.make_split(records, seed=1, candidates=20)

    def test_plan_json_roundtrip(self):
        records = make_manifest(np.random.default_rng(3), 25)
        plan = ds.make_split(records, seed=1337, candidates=100)
        back = ds.SplitPlan.from_json(plan.to_json())
        assert back == plan


class TestBalanceTrain:
    def test_median_example(self):
        records = []
        records += [rec(f"a{i}", 1, i, kras=1) for i in range(10)]
        records += [rec(f"b{i}", 1, i, other=1) for i in range(4)]
        records += [rec("c0", 1, 0, braf=1)]
        out = ds.balance_train(records, seed=0)
        assert out.target_size == 4
        counts = collections.Counter(r.labels.positives()[0] for r in out.records)
        assert counts == {"kras": 4, "other": 4, "braf": 4}

    def test_equal_groups_permutation(self):
        records = [rec(f"a{i}", 1, i, kras=1) for i in range(5)]
        records += [rec(f"b{i}", 1, i, other=1) for i in range(5)]
        out = ds.balance_train(records, seed=3)
        assert sorted(r.key for r in out.records) == sorted(r.key for r in records)

    def test_single_group_unchanged(self):
        records = [rec(f"a{i}", 1, i, kras=1) for i in range(7)]
        out = ds.balance_train(records, seed=9)
        assert out.target_size == 7
        assert len(out.records) == 7

    def test_rarest_class_key_with_tie_order(self):
        # kras appears 3x, braf 1x -> a kras+braf record keys to braf
        records = [rec("a", 1, 0, kras=1), rec("a", 1, 1, kras=1),
                   rec("b", 1, 0, kras=1, braf=1)]
        counts = {c: 0 for c in ds.CLASSES_5}
        for r in records:
            for c in r.labels.positives():
                counts[c] += 1
        assert ds.balancing_key(records[2].labels, counts) == "braf"
        # ties break by the fixed class order
        assert ds.balancing_key(ds.MutationLabels(nras=1, kras=1),
                                {c: 1 for c in ds.CLASSES_5}) == "nras"

    def test_properties_on_100_random_manifests(self):
        rng = np.random.default_rng(31)
        for trial in range(100):
            records = make_manifest(rng, int(rng.integers(4, 20)),
                                    single_label=False)
            out = ds.balance_train(records, seed=trial)

            counts = {c: 0 for c in ds.CLASSES_5}
            for r in records:
                for c in r.labels.positives():
                    counts[c] += 1
            orig_groups = collections.defaultdict(list)
            for r in records:
                orig_groups[ds.balancing_key(r.labels, counts)].append(r)

            import statistics
            expected_t = statistics.median_low(
                sorted(len(g) for g in orig_groups.values()))
            assert out.target_size == expected_t

            got_groups = collections.defaultdict(list)
            for r in out.records:
                got_groups[ds.balancing_key(r.labels, counts)].append(r)
            assert set(got_groups) == set(orig_groups)
            for key, group in got_groups.items():
                assert len(group) == expected_t, f"trial {trial} group {key}"
                keys = [r.key for r in group]
                if len(orig_groups[key]) >= expected_t:
                    assert len(set(keys)) == len(keys)  # subsample: no repeats
                else:
                    originals = {r.key for r in orig_groups[key]}
                    assert set(keys) <= originals  # resample stays in group
                    assert originals <= set(keys)  # every original kept

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            ds.balance_train([], seed=0)


class TestManifestIO:
    def test_roundtrip(self, tmp_path):
        records = make_manifest(np.random.default_rng(8), 6)
        path = tmp_path / "manifest.jsonl"
        ds.write_manifest(records, path)
        assert ds.read_manifest(path) == records

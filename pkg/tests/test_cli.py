"""CLI contract: exit codes, determinism, end-to-end pipeline wiring."""

import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from hepacrop import cli
from hepacrop import dataset as ds
from hepacrop import metrics as mx
from hepacrop import synth


def tree_hash(root: Path) -> dict[str, str]:
    out = {}
    for p in sorted(root.rglob("*")):
        if p.is_file():
            out[str(p.relative_to(root))] = hashlib.sha256(p.read_bytes()).hexdigest()
    return out


@pytest.fixture(scope="module")
def cohort(tmp_path_factory):
    root = tmp_path_factory.mktemp("cohort")
    vols = root / "vols"
    rc = cli.main(["synth", "--seed", "7", "--n-patients", "8", "--out", str(vols)])
    assert rc == 0
    out = root / "prep"
    rc = cli.main([
        "preprocess", "--volumes", str(vols), "--studies", str(vols / "studies.jsonl"),
        "--out", str(out), "--res", "32,64", "--eps", "0.4", "--border-mm", "10",
    ])
    assert rc == 0
    return root


class TestSynthCommand:
    def test_dry_run_writes_nothing(self, tmp_path, capsys):
        rc = cli.main(["synth", "--seed", "1", "--n-patients", "2",
                       "--out", str(tmp_path / "x"), "--dry-run"])
        assert rc == 0
        assert "dry-run" in capsys.readouterr().out
        assert not (tmp_path / "x").exists()

    def test_deterministic_rerun(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert cli.main(["synth", "--seed", "3", "--n-patients", "2", "--out", str(a)]) == 0
        assert cli.main(["synth", "--seed", "3", "--n-patients", "2", "--out", str(b)]) == 0
        assert tree_hash(a) == tree_hash(b)


class TestPreprocessCommand:
    def test_outputs_exist(self, cohort):
        out = cohort / "prep"
        for r in (32, 64):
            manifest = out / f"manifest_{r}.jsonl"
            assert manifest.exists()
            records = ds.read_manifest(manifest)
            assert records
            for rec in records[:10]:
                png = out / rec.image_path
                assert png.exists()
                assert rec.resolution == r
                assert png.name.endswith(f"_{r}.png")

    def test_filename_schema(self, cohort):
        records = ds.read_manifest(cohort / "prep" / "manifest_32.jsonl")
        rec = records[0]
        expected = (f"crops/{rec.patient_id}_{rec.lesion_id:03d}_"
                    f"{rec.slice_index:04d}_32.png")
        assert rec.image_path == expected

    def test_png_payload_matches_library(self, cohort):
        from PIL import Image
        records = ds.read_manifest(cohort / "prep" / "manifest_32.jsonl")
        img = Image.open(cohort / "prep" / records[0].image_path)
        arr = np.asarray(img)
        assert arr.shape == (32, 32)
        assert arr.dtype == np.uint8

    def test_idempotent_rerun(self, cohort, tmp_path):
        vols = cohort / "vols"
        out = tmp_path / "again"
        args = ["preprocess", "--volumes", str(vols),
                "--studies", str(vols / "studies.jsonl"),
                "--out", str(out), "--res", "32,64",
                "--eps", "0.4", "--border-mm", "10"]
        assert cli.main(args) == 0
        first = tree_hash(out)
        assert cli.main(args) == 0
        assert tree_hash(out) == first
        assert first == {k: v for k, v in tree_hash(cohort / "prep").items()}

    def test_parallel_jobs_match_serial(self, cohort, tmp_path):
        vols = cohort / "vols"
        out = tmp_path / "par"
        assert cli.main(["preprocess", "--volumes", str(vols),
                         "--studies", str(vols / "studies.jsonl"),
                         "--out", str(out), "--res", "32,64",
                         "--eps", "0.4", "--border-mm", "10", "--jobs", "4"]) == 0
        assert tree_hash(out) == tree_hash(cohort / "prep")

    def test_missing_input_exit_2(self, tmp_path):
        rc = cli.main(["preprocess", "--volumes", str(tmp_path / "nope"),
                       "--studies", str(tmp_path / "nope.jsonl"),
                       "--out", str(tmp_path / "o")])
        assert rc == 2


class TestSplitCommand:
    def test_five_seeds_disjoint(self, cohort, tmp_path):
        manifest = cohort / "prep" / "manifest_64.jsonl"
        out = tmp_path / "splits"
        rc = cli.main(["split", "--manifest", str(manifest),
                       "--seeds", "17,42,1337,2022,31337", "--out", str(out)])
        assert rc == 0
        records = ds.read_manifest(manifest)
        patients = {r.patient_id for r in records}
        for seed in (17, 42, 1337, 2022, 31337):
            plan = ds.SplitPlan.from_json((out / f"split_{seed}.json").read_text())
            assert set(plan.train_patients) | set(plan.test_patients) == patients
            assert not set(plan.train_patients) & set(plan.test_patients)

    def test_env_var_seed_list(self, cohort, tmp_path, monkeypatch):
        manifest = cohort / "prep" / "manifest_64.jsonl"
        out = tmp_path / "splits_env"
        monkeypatch.setenv(cli.SEED_ENV_VAR, "5,6")
        assert cli.main(["split", "--manifest", str(manifest), "--out", str(out)]) == 0
        assert sorted(p.name for p in out.glob("*.json")) == \
            ["split_5.json", "split_6.json"]

    def test_rerun_bit_identical(self, cohort, tmp_path):
        manifest = cohort / "prep" / "manifest_64.jsonl"
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert cli.main(["split", "--manifest", str(manifest),
                             "--seeds", "42", "--out", str(out)]) == 0
        assert tree_hash(a) == tree_hash(b)


class TestBalanceCommand:
    def test_balance_output(self, cohort, tmp_path):
        manifest = cohort / "prep" / "manifest_64.jsonl"
        splits = tmp_path / "s"
        assert cli.main(["split", "--manifest", str(manifest), "--seeds", "17",
                         "--out", str(splits)]) == 0
        out = tmp_path / "balanced.jsonl"
        assert cli.main(["balance", "--manifest", str(manifest),
                         "--plan", str(splits / "split_17.json"),
                         "--out", str(out)]) == 0
        plan = ds.SplitPlan.from_json((splits / "split_17.json").read_text())
        balanced = ds.read_manifest(out)
        train_patients = set(plan.train_patients)
        assert balanced
        assert {r.patient_id for r in balanced} <= train_patients


class TestValidateCommand:
    def test_clean_manifest_exit_0(self, cohort):
        rc = cli.main(["validate", "--manifest",
                       str(cohort / "prep" / "manifest_64.jsonl")])
        assert rc == 0

    def test_violations_exit_1(self, tmp_path):
        bad = [ds.CropRecord(
            patient_id="p0", lesion_id=1, slice_index=0, image_path="x.png",
            resolution=32, labels=ds.MutationLabels(kras=1, other=1),
            slice_spacing_mm=5.0, days_ct_to_biopsy=200,
        )]
        path = tmp_path / "bad.jsonl"
        ds.write_manifest(bad, path)
        assert cli.main(["validate", "--manifest", str(path)]) == 1


class TestStatsCommand:
    def test_stats_output(self, cohort, tmp_path, capsys):
        out = tmp_path / "stats.json"
        rc = cli.main(["stats", "--manifest",
                       str(cohort / "prep" / "manifest_64.jsonl"),
                       "--out", str(out)])
        assert rc == 0
        printed = capsys.readouterr().out
        assert "images%" in printed
        payload = json.loads(out.read_text())
        assert set(payload["distribution"]) == set(ds.CLASSES_5)


class TestScoreCommand:
    def test_constant_zero_scoring(self, cohort, tmp_path, capsys):
        manifest = cohort / "prep" / "manifest_64.jsonl"
        records = ds.read_manifest(manifest)
        splits = tmp_path / "s"
        assert cli.main(["split", "--manifest", str(manifest), "--seeds", "17,42",
                         "--out", str(splits)]) == 0

        pred_paths, plan_paths = [], []
        for seed in (17, 42):
            plan_path = splits / f"split_{seed}.json"
            plan = ds.SplitPlan.from_json(plan_path.read_text())
            preds = mx.PredictionSet(
                scores={r.key: np.zeros(5) for r in plan.side(records, "test")},
                class_space=5, seed=seed, model_tag="zero",
            )
            pp = tmp_path / f"preds_{seed}.jsonl"
            mx.write_predictions(preds, pp)
            pred_paths.append(pp)
            plan_paths.append(plan_path)

        out = tmp_path / "report.json"
        args = ["score", "--manifest", str(manifest)]
        for p in plan_paths:
            args += ["--plan", str(p)]
        for p in pred_paths:
            args += ["--pred", str(p)]
        args += ["--group", "5", "--out", str(out)]
        assert cli.main(args) == 0

        payload = json.loads(out.read_text())
        assert payload["n_seeds"] == 2
        for seed in (17, 42):
            plan = ds.SplitPlan.from_json((splits / f"split_{seed}.json").read_text())
            test_recs = plan.side(records, "test")
            density = float(np.mean([r.labels.as_tuple() for r in test_recs]))
            got = payload["metrics"]["hamming"]["per_seed"][str(seed)]
            assert abs(got - density) < 1e-12

    def test_unknown_flag_exit_2(self):
        with pytest.raises(SystemExit) as e:
            cli.main(["score", "--bogus"])
        assert e.value.code == 2

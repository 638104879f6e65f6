"""Acceptance suite for the training component.

Relies on the upstream crop pipeline only through its CLI and file
formats; the conftest hook prints one line per criterion.
"""

import json

import torch

from conftest import run_pipeline
from croptrain import classify, config, contrastive, data
from croptrain.models import MultiLabelClassifier, build_encoder


def test_contrastive_pretraining(cohort):
    """64 crops, 50 steps: loss strictly decreases, deterministic to 1e-6."""
    crops = data.read_manifest(cohort / "prep" / "manifest_32.jsonl")
    assert len(crops) >= 64
    images = data.load_images(crops[:64], cohort / "prep")
    cfg = config.TrainConfig(encoder="small", seed=3, learning_rate=0.01,
                             pretrain_epochs=100, variant="baseline",
                             resolution=32)
    policy = config.AugmentationPolicy(seed=1)
    _, h1 = contrastive.pretrain_backbone(images, cfg, policy, max_steps=50)
    assert len(h1) == 50
    assert h1[-1] < h1[0]
    _, h2 = contrastive.pretrain_backbone(images, cfg, policy, max_steps=50)
    assert abs(h1[-1] - h2[-1]) < 1e-6


def test_classifier_overfit(cohort):
    """16 crops reach train F1 >= 0.95 within 200 epochs, both variants;
    the attention block preserves feature shape; every parameter trains."""
    balanced = data.read_manifest(cohort / "balanced.jsonl")[:16]
    manifest = data.read_manifest(cohort / "prep" / "manifest_32.jsonl")
    split = data.read_split(cohort / "splits" / "split_17.json")
    _, test_crops = classify.select_sides(manifest, split)

    for variant in ("baseline", "baseline+SA"):
        cfg = config.TrainConfig(encoder="small", seed=5, learning_rate=0.01,
                                 epochs=200, variant=variant, grouping=5,
                                 augment=False, resolution=32)
        res = classify.train_classifier(balanced, test_crops, cohort / "prep", cfg)
        assert res.train_f1 >= 0.95, f"{variant}: train F1 {res.train_f1:.3f}"

        model = MultiLabelClassifier(build_encoder("small"), 5,
                                     use_sa=cfg.use_sa, heads=cfg.sa_heads)
        if model.sa is not None:
            x = torch.randn(2, model.encoder.out_channels, 4, 4)
            assert model.sa(x).shape == x.shape
        flow = classify.gradient_flow_ok(model, torch.randn(4, 1, 32, 32),
                                         torch.randint(0, 2, (4, 5)).float())
        dead = [name for name, ok in flow.items() if not ok]
        assert not dead, f"{variant}: no gradient in {dead}"


def test_predictions_score_through_pipeline(cohort, tmp_path):
    """Emitted predictions pass the upstream score subcommand under
    3-class grouping and the report carries an F1 value for the RAS class."""
    manifest_path = cohort / "prep" / "manifest_32.jsonl"
    plan_path = cohort / "splits" / "split_17.json"
    manifest = data.read_manifest(manifest_path)
    split = data.read_split(plan_path)
    balanced = data.read_manifest(cohort / "balanced.jsonl")
    _, test_crops = classify.select_sides(manifest, split)

    cfg = config.TrainConfig(encoder="small", seed=5, learning_rate=0.01,
                             epochs=10, variant="baseline", grouping=3,
                             augment=False, resolution=32)
    res = classify.train_classifier(balanced, test_crops, cohort / "prep", cfg)
    pred_path = tmp_path / "preds_17.jsonl"
    data.write_predictions(pred_path, res.test_crops, res.test_scores,
                           class_space=3, seed=split.seed, model_tag=cfg.variant)

    report_path = tmp_path / "report.json"
    proc = run_pipeline(
        "score", "--manifest", str(manifest_path), "--plan", str(plan_path),
        "--pred", str(pred_path), "--group", "3", "--out", str(report_path),
    )
    assert proc.returncode == 0, proc.stderr
    payload = json.loads(report_path.read_text())
    assert "f1[ras]" in payload["metrics"]
    assert 0.0 <= payload["metrics"]["f1[ras]"]["mean"] <= 1.0
    assert "F1 RAS" in proc.stdout

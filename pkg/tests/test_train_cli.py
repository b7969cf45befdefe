import json
from pathlib import Path

import numpy as np
import pytest

from lawground import train as training
from lawground.cli import main
from lawground.config import (
    TrainConfig,
    config_to_text,
    parse_config_text,
    validate,
)
from lawground.errors import ConfigError, NumericError, ShapeError
from lawground.serial import read_arrays, write_arrays
from lawground.synthground import generate_dataset, load_dataset
from lawground.tensor import Tensor


def tiny_cfg(data_path, **kw):
    base = dict(data_path=str(data_path), image_size=32, patch=8, d_model=16,
                blocks=2, heads=2, mlp_ratio=2, text_width=16, text_layers=1,
                text_heads=2, max_len=10, groups=4, rank_dw=4, reduction_r=4,
                pool_dim=8, steps=8, batch_size=2, eval_every=4, log_every=2,
                lr_backbone=1e-3, lr_rest=1e-3, seed=0)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    generate_dataset(root, seed=4, n_train=8, n_val=6, n_test=4, resolution=32)
    return root


# ---------------------------------------------------------------------------
# config


def test_config_defaults_follow_protocol():
    cfg = TrainConfig()
    assert (cfg.lr_backbone, cfg.lr_rest) == (4e-5, 4e-4)
    assert cfg.weight_decay == 1e-4
    assert cfg.reduction_r == 16
    assert cfg.threshold == 0.35
    assert cfg.max_len == 40
    assert (cfg.loss_l1, cfg.loss_giou, cfg.loss_focal, cfg.loss_dice) == (1, 1, 4, 4)


def test_config_parse_and_overrides():
    text = """
    # comment line
    train.steps = 12
    optim.lr_backbone = 1e-3
    ablation.lawg_enabled = false
    train.mode = rec
    """
    cfg = parse_config_text(text)
    assert cfg.steps == 12
    assert cfg.lr_backbone == 1e-3
    assert cfg.lawg_enabled is False
    assert cfg.mode == "rec"


def test_config_rejects_unknown_key_and_bad_value():
    with pytest.raises(ConfigError):
        parse_config_text("train.stepz = 5")
    with pytest.raises(ConfigError):
        parse_config_text("train.steps = soon")


def test_config_round_trips_through_text():
    cfg = TrainConfig(steps=77, lawg_enabled=False, mode="rec", seed=3)
    again = parse_config_text(config_to_text(cfg))
    assert again == cfg


def test_validate_forces_rec_without_mask_branch():
    cfg = validate(TrainConfig(mth_enabled=False, mode="multitask"))
    assert cfg.mode == "rec"


def test_validate_decay_default_two_thirds():
    cfg = validate(TrainConfig(steps=3000))
    assert cfg.decay_step == 2000


# ---------------------------------------------------------------------------
# training loop


def test_zero_steps_checkpoint_equals_initialization(dataset, tmp_path):
    cfg = tiny_cfg(dataset, steps=0)
    training.train(cfg, tmp_path / "run")
    model, _, step, _ = training.load_checkpoint(tmp_path / "run" / "last.ckpt",
                                                 dataset)
    assert step == 0
    fresh = training.build_model(validate(tiny_cfg(dataset, steps=0)),
                                 training.load_vocab(dataset))
    for name, p in fresh.store.items():
        assert np.array_equal(p.data, model.store[name].data), name


def test_overfit_smoke_loss_strictly_decreases(dataset, tmp_path):
    cfg = tiny_cfg(dataset, steps=50, batch_size=4, log_every=1, eval_every=50,
                   flip_prob=0.0, lr_backbone=5e-4, lr_rest=1e-3)
    training.train(cfg, tmp_path / "run")
    rows = (tmp_path / "run" / "metrics.csv").read_text().splitlines()
    train_rows = [r.split(",") for r in rows[1:] if r.split(",")[1] == "train"]
    first = float(train_rows[0][4])
    last = float(train_rows[-1][4])
    assert last < first


def test_two_runs_identical_bytes(dataset, tmp_path):
    cfg = tiny_cfg(dataset, steps=6)
    training.train(cfg, tmp_path / "a")
    training.train(cfg, tmp_path / "b")
    for rel in ("metrics.csv", "batches.log", "last.ckpt", "best.ckpt",
                "config.cfg"):
        assert (tmp_path / "a" / rel).read_bytes() == \
            (tmp_path / "b" / rel).read_bytes(), rel


def test_checkpoint_save_load_save_byte_identical(dataset, tmp_path):
    cfg = tiny_cfg(dataset, steps=4)
    training.train(cfg, tmp_path / "run")
    ckpt = tmp_path / "run" / "last.ckpt"
    arrays = read_arrays(ckpt)
    resaved = tmp_path / "resaved.ckpt"
    write_arrays(resaved, arrays)
    assert ckpt.read_bytes() == resaved.read_bytes()


def test_checkpoint_restores_forward_outputs_bitwise(dataset, tmp_path):
    cfg = tiny_cfg(dataset, steps=5)
    training.train(cfg, tmp_path / "run")
    model, loaded_cfg, _, _ = training.load_checkpoint(
        tmp_path / "run" / "last.ckpt", dataset)
    sample = load_dataset(dataset, "val")[0]
    box1, mask1 = training.predict_sample(model, sample, loaded_cfg.threshold)
    model2, _, _, _ = training.load_checkpoint(tmp_path / "run" / "last.ckpt",
                                               dataset)
    box2, mask2 = training.predict_sample(model2, sample, loaded_cfg.threshold)
    assert np.array_equal(box1, box2) and np.array_equal(mask1, mask2)


def test_checkpoint_shape_mismatch_rejected(dataset, tmp_path):
    cfg = tiny_cfg(dataset, steps=1)
    training.train(cfg, tmp_path / "run")
    ckpt = tmp_path / "run" / "last.ckpt"
    arrays = read_arrays(ckpt)
    arrays["param/text.embed"] = arrays["param/text.embed"][:, :-1]
    write_arrays(ckpt, arrays)
    with pytest.raises(ShapeError):
        training.load_checkpoint(ckpt, dataset)


def test_nan_loss_aborts_with_dump(dataset, tmp_path, monkeypatch):
    real = training.total_loss

    def poisoned(*args, **kwargs):
        loss, parts = real(*args, **kwargs)
        return loss * np.inf, parts

    monkeypatch.setattr(training, "total_loss", poisoned)
    cfg = tiny_cfg(dataset, steps=3)
    with pytest.raises(NumericError):
        training.train(cfg, tmp_path / "run")
    dump = json.loads((tmp_path / "run" / "nan_dump.json").read_text())
    assert dump["step"] == 1 and len(dump["scene_ids"]) == cfg.batch_size


def test_resolution_mismatch_is_config_error(dataset, tmp_path):
    cfg = tiny_cfg(dataset, image_size=64)
    with pytest.raises(ConfigError):
        training.train(cfg, tmp_path / "run")


# ---------------------------------------------------------------------------
# evaluation


def test_evaluate_gt_stub_is_perfect(dataset, monkeypatch):
    samples = load_dataset(dataset, "val")
    monkeypatch.setattr(training, "predict_sample",
                        lambda model, s, thr: (s.box.copy(), s.mask().copy()))
    report = training.evaluate_model(object(), samples)
    assert report["prec_at_05"] == 1.0
    assert report["miou"] == 1.0
    assert report["relational"]["prec_at_05"] == 1.0


def test_evaluate_constant_box_stub_matches_loop(dataset, monkeypatch):
    from lawground.losses import box_iou

    samples = load_dataset(dataset, "val")
    const = np.array([0.5, 0.5, 0.25, 0.25])
    monkeypatch.setattr(training, "predict_sample",
                        lambda model, s, thr: (const.copy(), None))
    report = training.evaluate_model(object(), samples)
    want = sum(1 for s in samples if box_iou(const, s.box) > 0.5) / len(samples)
    assert report["prec_at_05"] == want
    assert report["miou"] is None


def test_evaluate_threaded_reduction_is_order_fixed(dataset, tmp_path,
                                                    monkeypatch):
    cfg = tiny_cfg(dataset, steps=2)
    training.train(cfg, tmp_path / "run")
    model, loaded_cfg, _, _ = training.load_checkpoint(
        tmp_path / "run" / "last.ckpt", dataset)
    samples = load_dataset(dataset, "val")
    monkeypatch.setenv("LAWG_THREADS", "1")
    serial_report = training.evaluate_model(model, samples, loaded_cfg.threshold)
    monkeypatch.setenv("LAWG_THREADS", "4")
    threaded_report = training.evaluate_model(model, samples, loaded_cfg.threshold)
    assert serial_report == threaded_report


def test_rerun_evaluation_identical(dataset, tmp_path):
    cfg = tiny_cfg(dataset, steps=3)
    training.train(cfg, tmp_path / "run")
    a = training.evaluate_checkpoint(tmp_path / "run" / "last.ckpt", dataset,
                                     "val", out_dir=tmp_path / "ev1")
    b = training.evaluate_checkpoint(tmp_path / "run" / "last.ckpt", dataset,
                                     "val", out_dir=tmp_path / "ev2")
    assert a == b
    assert (tmp_path / "ev1" / "eval_metrics.csv").read_bytes() == \
        (tmp_path / "ev2" / "eval_metrics.csv").read_bytes()
    buckets = (tmp_path / "ev1" / "length_buckets.csv").read_text().splitlines()
    assert buckets[0] == "bucket,count,prec_at_05"
    assert [row.split(",")[0] for row in buckets[1:]] == \
        ["1-5", "6-7", "8-10", "11+"]


# ---------------------------------------------------------------------------
# inspect


def test_inspect_writes_artifact_bundle(dataset, tmp_path):
    cfg = tiny_cfg(dataset, steps=3)
    training.train(cfg, tmp_path / "run")
    sample = load_dataset(dataset, "val")[0]
    out = training.inspect(tmp_path / "run" / "last.ckpt", dataset,
                           sample.scene_id, tmp_path / "insp")
    for name in ("rollout.pgm", "rollout.csv", "lap.pgm", "lap.csv",
                 "overlay.json", "word_layer_affinity.csv"):
        assert (out / name).exists(), name

    overlay = json.loads((out / "overlay.json").read_text())
    assert overlay["scene_id"] == sample.scene_id
    assert len(overlay["pred_box"]) == 4
    rle = overlay["mask_rle"]
    assert sum(rle["counts"]) == rle["size"][0] * rle["size"][1]

    rows = (out / "word_layer_affinity.csv").read_text().splitlines()
    assert rows[0] == "word,layer0,layer1"
    for row in rows[1:]:
        cols = row.split(",")
        total = sum(float(v) for v in cols[1:])
        assert abs(total - 1.0) < 1e-9  # softmax across layers


def test_inspect_affinity_empty_when_lawg_disabled(dataset, tmp_path):
    cfg = tiny_cfg(dataset, steps=2, lawg_enabled=False)
    training.train(cfg, tmp_path / "run")
    sample = load_dataset(dataset, "val")[0]
    out = training.inspect(tmp_path / "run" / "last.ckpt", dataset,
                           sample.scene_id, tmp_path / "insp")
    lines = (out / "word_layer_affinity.csv").read_text().splitlines()
    assert lines[0].startswith("#")  # explanatory header
    assert len(lines) == 2  # comment + column header, no data rows


def test_inspect_missing_sample_is_error(dataset, tmp_path):
    cfg = tiny_cfg(dataset, steps=1)
    training.train(cfg, tmp_path / "run")
    with pytest.raises(ConfigError):
        training.inspect(tmp_path / "run" / "last.ckpt", dataset, 999999,
                         tmp_path / "insp")


def test_word_affinity_matches_manual_trace(dataset, tmp_path):
    cfg = tiny_cfg(dataset, steps=2)
    training.train(cfg, tmp_path / "run")
    model, _, _, _ = training.load_checkpoint(tmp_path / "run" / "last.ckpt",
                                              dataset)
    tokens = model.tokenize("red circle left of the red square")
    table = training.word_layer_affinity(model, tokens)

    from lawground.law import generate_all

    feats = model.text.encode(tokens)
    _, alphas = generate_all(feats.feats, feats.mask, model.law)
    # manual trace for the duplicated word "red" (positions 1 and 6)
    per_layer = np.array([a.data.mean(axis=0)[[1, 6]].mean() for a in alphas])
    want = np.exp(per_layer - per_layer.max())
    want /= want.sum()
    np.testing.assert_allclose(table["red"], want, atol=1e-12)


# ---------------------------------------------------------------------------
# ablation


def test_ablate_four_arms_table_and_shared_batches(dataset, tmp_path):
    cfg = tiny_cfg(dataset, steps=4, eval_every=4)
    rows = training.ablate(cfg, tmp_path / "abl")
    toggles = [(r["lawg"], r["lap"], r["mth"]) for r in rows]
    assert toggles == [(1, 0, 0), (0, 1, 0), (1, 1, 0), (1, 1, 1)]
    csv = (tmp_path / "abl" / "ablation.csv").read_text().splitlines()
    assert csv[0] == "lawg,lap,mth,prec_at_05,prec_at_05_relational,miou"
    assert len(csv) == 5
    logs = {(tmp_path / "abl" / f"arm_{n}" / "batches.log").read_text()
            for n in ("lawg", "lap", "lawg_lap", "lawg_lap_mth")}
    assert len(logs) == 1  # identical data order across arms


# ---------------------------------------------------------------------------
# CLI


def test_cli_gen_and_exit_codes(tmp_path, capsys):
    out = tmp_path / "ds"
    code = main(["gen", "--out", str(out), "--seed", "3", "--n-train", "4",
                 "--n-val", "2", "--n-test", "2", "--res", "32"])
    assert code == 0
    assert (out / "index.jsonl").exists()
    assert (out / "manifest.sha").exists()
    assert "wrote dataset" in capsys.readouterr().out


def test_cli_synthground_alias(tmp_path):
    from lawground.cli import synthground_main

    out = tmp_path / "ds"
    assert synthground_main(["gen", "--out", str(out), "--n-train", "2",
                             "--n-val", "1", "--n-test", "1", "--res", "32"]) == 0
    assert (out / "vocab.txt").exists()


def test_cli_train_eval_inspect_round_trip(dataset, tmp_path, capsys):
    cfg_file = tmp_path / "cfg.txt"
    cfg_file.write_text(
        f"data.path = {dataset}\n"
        "model.image_size = 32\nmodel.d_model = 16\nmodel.blocks = 2\n"
        "model.heads = 2\nmodel.mlp_ratio = 2\ntext.width = 16\n"
        "text.layers = 1\ntext.heads = 2\ntext.max_len = 10\n"
        "law.groups = 4\nlaw.rank_dw = 4\nlaw.reduction_r = 4\n"
        "head.pool_dim = 8\ntrain.steps = 4\ntrain.batch_size = 2\n"
        "train.eval_every = 4\ntrain.log_every = 2\n"
        "optim.lr_backbone = 1e-3\noptim.lr_rest = 1e-3\n")
    run = tmp_path / "run"
    assert main(["train", "--config", str(cfg_file), "--out", str(run)]) == 0
    assert (run / "best.ckpt").exists() and (run / "metrics.csv").exists()

    assert main(["eval", "--ckpt", str(run / "last.ckpt"), "--split", "val",
                 "--out", str(tmp_path / "ev")]) == 0
    assert (tmp_path / "ev" / "length_buckets.csv").exists()

    sample = load_dataset(dataset, "val")[0]
    assert main(["inspect", "--ckpt", str(run / "last.ckpt"),
                 "--sample-id", str(sample.scene_id),
                 "--out", str(tmp_path / "insp")]) == 0
    assert (tmp_path / "insp" / "overlay.json").exists()


def test_cli_config_error_exit_code(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("train.stepz = 5\n")
    assert main(["train", "--config", str(bad), "--out", str(tmp_path / "r")]) == 2


def test_cli_missing_dataset_exit_code(tmp_path):
    cfg = tmp_path / "cfg.txt"
    cfg.write_text(f"data.path = {tmp_path / 'nowhere'}\n")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "r")]) == 2

"""Trainer: stateless batching, exact resume, determinism, evaluation."""

import json

import numpy as np
import pytest

from multicos import synth, train
from multicos.config import RunConfig
from multicos.errors import ConfigError, ShapeMismatch
from multicos.train import (Trainer, ablation_rows, batch_indices,
                            eval_threads, evaluate_model, format_table,
                            metric_record, predict_masks)

_RECORD_KEYS = ("dataset", "M", "F_max", "F_mean", "F_adp",
                "E_max", "E_mean", "S")


def _corpus(n, seed=7, kappa=1.0, size=32):
    samples = synth.generate(seed, n, size, size, kappa)
    return {k: np.stack([s[k] for s in samples])
            for k in ("rgb", "aux", "mask", "edge")}


def _pairs(n, seed=19, size=32):
    c = _corpus(n, seed=seed, size=size)
    return {"rgb": c["rgb"], "aux": c["aux"]}


def _cfg(**kw):
    base = dict(image_size=32, widths=(2, 3, 4, 5, 6), d_model=4, d_inner=8,
                n_state=2, knowledge_channels=8, batch_size=2, steps=4,
                seed=3)
    base.update(kw)
    return RunConfig(**base)


def test_batch_indices_stateless():
    a = batch_indices(5, 17, 100, 8)
    b = batch_indices(5, 17, 100, 8)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, batch_indices(5, 18, 100, 8))
    assert not np.array_equal(a, batch_indices(6, 17, 100, 8))
    assert not np.array_equal(a, batch_indices(5, 17, 100, 8, tag=1))
    # without replacement while the corpus is large enough
    assert len(set(a.tolist())) == 8
    small = batch_indices(5, 0, 3, 8)
    assert len(small) == 8 and set(small.tolist()) <= {0, 1, 2}


def test_run_records_and_pure_seg_loss():
    data = _corpus(6)
    tr = Trainer(_cfg(), data)
    recs = tr.run()
    assert [r["step"] for r in recs] == [0, 1, 2, 3]
    for r in recs:
        assert r["l_l"] == 0.0
        assert r["l_t"] == r["l_s"]
        assert np.isfinite(r["l_t"])
    assert tr.step_count == 4
    assert tr.run() == []  # already at the target


def test_joint_loss_is_exact_sum():
    data = _corpus(6)
    pairs = _pairs(5)
    tr = Trainer(_cfg(enable_ckler=True, enable_injection=True, steps=2),
                 data, pairs)
    recs = tr.run()
    for r in recs:
        assert r["l_l"] > 0.0
        assert r["l_t"] == r["l_s"] + r["l_l"]


def test_trainer_guards():
    data = _corpus(4)
    with pytest.raises(ConfigError):
        Trainer(_cfg(enable_ckler=True), data, None)
    bad = dict(data)
    del bad["edge"]
    with pytest.raises(ConfigError):
        Trainer(_cfg(), bad)
    bad = dict(data)
    bad["aux"] = bad["aux"][:, :, :16]
    with pytest.raises(ShapeMismatch):
        Trainer(_cfg(), bad)
    bad = dict(data)
    bad["mask"] = bad["mask"][:2]
    with pytest.raises(ShapeMismatch):
        Trainer(_cfg(), bad)


def test_resume_continues_exactly(tmp_path):
    data = _corpus(6)
    straight = Trainer(_cfg(steps=6), data)
    full = straight.run()

    broken = Trainer(_cfg(steps=6), data)
    head = broken.run(steps=3)
    ckpt = tmp_path / "mid.bsfk"
    broken.save(ckpt)

    resumed = Trainer(_cfg(steps=6), data)
    resumed.load(ckpt)
    assert resumed.step_count == 3
    tail = resumed.run()
    assert [r["step"] for r in head + tail] == [0, 1, 2, 3, 4, 5]
    for a, b in zip(full, head + tail):
        assert a["l_s"] == b["l_s"]
        assert a["l_t"] == b["l_t"]

    end_a = tmp_path / "a.bsfk"
    end_b = tmp_path / "b.bsfk"
    straight.save(end_a)
    resumed.save(end_b)
    assert end_a.read_bytes() == end_b.read_bytes()


def test_identical_seeds_bit_identical_checkpoints(tmp_path):
    data = _corpus(6)
    paths = []
    for name in ("x", "y"):
        tr = Trainer(_cfg(steps=3), data)
        tr.run()
        p = tmp_path / f"{name}.bsfk"
        tr.save(p)
        paths.append(p)
    assert paths[0].read_bytes() == paths[1].read_bytes()
    other = Trainer(_cfg(steps=3, seed=4), data)
    other.run()
    p3 = tmp_path / "z.bsfk"
    other.save(p3)
    assert p3.read_bytes() != paths[0].read_bytes()


def test_checkpoint_translator_state_guards(tmp_path):
    data = _corpus(4)
    plain = Trainer(_cfg(steps=1), data)
    plain.run()
    p_plain = tmp_path / "plain.bsfk"
    plain.save(p_plain)

    joint = Trainer(_cfg(enable_ckler=True, steps=1), data, _pairs(3))
    joint.run()
    p_joint = tmp_path / "joint.bsfk"
    joint.save(p_joint)

    with pytest.raises(ConfigError):
        Trainer(_cfg(enable_ckler=True), data, _pairs(3)).load(p_plain)
    with pytest.raises(ConfigError):
        Trainer(_cfg(), data).load(p_joint)
    from multicos.tensor import save_checkpoint
    stray = tmp_path / "stray.bsfk"
    save_checkpoint(stray, {"weights": np.zeros(3)})
    with pytest.raises(ConfigError):
        Trainer(_cfg(), data).load(stray)


def test_evaluate_and_report_shape():
    data = _corpus(5)
    tr = Trainer(_cfg(steps=1), data)
    tr.run()
    scores = tr.evaluate(data, batch=2)
    assert 0.0 <= scores["mae"] <= 1.0
    rec = metric_record(scores, dataset="toy")
    assert tuple(rec.keys()) == _RECORD_KEYS
    assert rec["dataset"] == "toy"
    assert all(0.0 <= rec[k] <= 1.0 for k in _RECORD_KEYS[1:])
    assert tr.model.training  # evaluation leaves the trainer trainable
    json.dumps(rec)  # the record is a JSON object as-is


def test_predict_masks_thread_fanout_deterministic():
    data = _corpus(7)
    tr = Trainer(_cfg(steps=1), data)
    tr.run()
    one = predict_masks(tr.model, data["rgb"], aux=data["aux"], batch=2,
                        threads=1)
    many = predict_masks(tr.model, data["rgb"], aux=data["aux"], batch=2,
                         threads=3)
    assert one.shape == (7, 1, 32, 32)
    assert one.tobytes() == many.tobytes()
    assert one.min() > 0.0 and one.max() < 1.0


def test_rgb_only_evaluation_ignores_aux():
    data = _corpus(4)
    tr = Trainer(_cfg(rgb_only=True, steps=1), data)
    tr.run()
    scores = evaluate_model(tr.model, data, rgb_only=True, batch=2)
    assert 0.0 <= scores["mae"] <= 1.0


def test_eval_threads_env(monkeypatch):
    monkeypatch.delenv("MULTICOS_THREADS", raising=False)
    assert eval_threads() == 1
    monkeypatch.setenv("MULTICOS_THREADS", "4")
    assert eval_threads() == 4
    monkeypatch.setenv("MULTICOS_THREADS", "zero")
    with pytest.raises(ConfigError):
        eval_threads()
    monkeypatch.setenv("MULTICOS_THREADS", "0")
    with pytest.raises(ConfigError):
        eval_threads()


def test_ablation_rows_cover_fusion_flags():
    rows = ablation_rows(_cfg())
    labels = [label for label, _ in rows]
    assert labels == ["full", "rgb_only", "no_lsfm", "no_ssfm", "no_ffm"]
    by = dict(rows)
    assert by["rgb_only"].rgb_only and not by["full"].rgb_only
    assert not by["no_lsfm"].enable_lsfm and by["no_lsfm"].enable_ssfm
    assert not by["no_ssfm"].enable_ssfm
    assert not by["no_ffm"].enable_ffm


def test_fusion_rows_build_up_cumulatively():
    rows = train.fusion_rows(_cfg())
    labels = [label for label, _ in rows]
    assert labels == ["rgb_only", "aux_encoder", "plus_ssfm", "plus_lsfm",
                      "full"]
    by = dict(rows)
    assert by["rgb_only"].rgb_only
    enc = by["aux_encoder"]
    assert not enc.rgb_only
    assert not (enc.enable_lsfm or enc.enable_ssfm or enc.enable_ffm)
    assert by["plus_ssfm"].enable_ssfm and not by["plus_ssfm"].enable_lsfm
    assert by["plus_lsfm"].enable_lsfm and not by["plus_lsfm"].enable_ffm
    full = by["full"]
    assert full.enable_lsfm and full.enable_ssfm and full.enable_ffm


def test_submodule_rows_toggle_scan_internals():
    rows = train.submodule_rows(_cfg())
    labels = [label for label, _ in rows]
    assert labels == ["no_gate", "no_scan", "no_cross", "full"]
    by = dict(rows)
    assert not by["no_gate"].enable_gate and by["no_gate"].enable_cssm
    assert not by["no_scan"].enable_scan_blocks
    assert not by["no_cross"].enable_cssm
    assert by["full"].enable_gate and by["full"].enable_scan_blocks


def test_knowledge_rows_route_translator():
    rows = train.knowledge_rows(_cfg())
    labels = [label for label, _ in rows]
    assert labels == ["no_injection", "pseudo_aux_only", "full_knowledge"]
    for _, row_cfg in rows:
        assert row_cfg.enable_ckler
        row_cfg.validate()
    by = dict(rows)
    assert not by["no_injection"].enable_injection
    assert by["pseudo_aux_only"].pseudo_aux
    assert by["full_knowledge"].enable_injection
    assert not by["full_knowledge"].pseudo_aux
    assert set(train.ABLATION_TABLES) == {"effect", "fusion", "submodules",
                                          "knowledge"}


def test_run_ablation_knowledge_needs_pairs():
    data = _corpus(4)
    rows = [("no_injection", _cfg(enable_ckler=True))]
    with pytest.raises(ConfigError):
        train.run_ablation(_cfg(), data, data, rows=rows, steps=1)
    out = train.run_ablation(_cfg(), data, data, rows=rows, steps=1,
                             translation=_pairs(4))
    assert out[0][0] == "no_injection"
    assert out[0][1]["dataset"] == "no_injection"


def test_format_table_alignment():
    rec = {k: 0.5 for k in _RECORD_KEYS[1:]}
    rows = [("full", dict(rec)), ("a_much_longer_label", dict(rec))]
    text = format_table(rows)
    lines = text.splitlines()
    assert len(lines) == 4
    assert lines[0].startswith("config")
    assert set(lines[1]) <= {"-", " "}
    assert lines[2].index("0.5000") == lines[3].index("0.5000")
    assert "a_much_longer_label" in lines[3]

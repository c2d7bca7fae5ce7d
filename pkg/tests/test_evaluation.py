import math

import numpy as np
import pytest
import torch

from conftest import tiny_config, tiny_synth
from mi2m.datasets import ActivityClip
from mi2m.encoder import EncoderArch, MaskedEncoder
from mi2m.errors import ArgumentError, ConfigurationError, ProtocolViolation
from mi2m.evaluation import (EvalReport, ProtocolSpec, _report, aggregate, evaluate, read_reports, render_table,
                             run_protocol, write_reports)
from mi2m.temporal import FinetuneSchedule, TemporalHead, finetune


def balanced_clips(geometry, classes=6, per_class=4, T=8, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for k in range(classes):
        for i in range(per_class):
            csi = (k + 0.3 * rng.standard_normal((T, *geometry.csi_shape))).astype(np.float32)
            img = np.full((T, *geometry.image_shape), (k + 1) / (classes + 1), dtype=np.float32)
            out.append(ActivityClip(csi, img, k, 0, "A", 8 * i, f"k{k}_{i}_{seed}"))
    return out


@pytest.fixture
def encoder(tiny_geometry):
    torch.manual_seed(0)
    return MaskedEncoder(EncoderArch(tiny_geometry, 8, 1, 2, 2, 16, 16))


def constant_head(K=6, label=0):
    head = TemporalHead(8, K, 4)
    with torch.no_grad():
        head.W_c.zero_()
        head.B_c.zero_()
        head.B_c[label] = 5.0
    return head


def test_constant_predictor_scores_one_over_k(encoder, tiny_geometry):
    r = evaluate(encoder, constant_head(), balanced_clips(tiny_geometry))
    assert r.accuracy == pytest.approx(1 / 6)
    assert r.per_class[0] == 1.0 and all(r.per_class[k] == 0.0 for k in range(1, 6))
    assert r.num_samples == {k: 4 for k in range(6)}


def test_perfect_predictor_scores_one(encoder, tiny_geometry):
    train = balanced_clips(tiny_geometry, classes=3, seed=0)
    torch.manual_seed(0)
    head, _ = finetune(train, encoder, TemporalHead(8, 3, 16), FinetuneSchedule(lr=1e-2, batch_size=4, epochs=30))
    r = evaluate(encoder, head, balanced_clips(tiny_geometry, classes=3, seed=1), finetune_ids=[c.clip_id for c in train])
    assert r.accuracy == 1.0
    assert r.per_class == {0: 1.0, 1: 1.0, 2: 1.0}


def test_overlap_with_finetuning_is_refused(encoder, tiny_geometry):
    clips = balanced_clips(tiny_geometry)
    with pytest.raises(ProtocolViolation, match="1 test clips"):
        evaluate(encoder, constant_head(), clips, finetune_ids=[clips[3].clip_id])


def test_evaluation_does_not_mutate_parameters(encoder, tiny_geometry):
    head = constant_head()
    before = [{k: v.clone() for k, v in m.state_dict().items()} for m in (encoder, head)]
    evaluate(encoder, head, balanced_clips(tiny_geometry), "dark", 3.0)
    for m, snap in zip((encoder, head), before):
        for k, v in m.state_dict().items():
            assert torch.equal(v, snap[k])


def test_dark_condition_touches_only_images(encoder, tiny_geometry, monkeypatch):
    import mi2m.evaluation as ev

    seen = {}

    def spy(clips, enc, csi_transform=None, image_transform=None, modalities=("wifi", "vision")):
        seen["csi"] = csi_transform
        seen["image"] = image_transform
        return torch.zeros(len(clips), 8, 8)

    monkeypatch.setattr(ev, "clip_features", spy)
    clips = balanced_clips(tiny_geometry)
    csi_before = [c.csi.copy() for c in clips]
    evaluate(encoder, constant_head(), clips, "dark", 2.0)
    assert seen["csi"] is None
    x = np.full((2, 1, 2, 4), 0.5, np.float32)
    np.testing.assert_allclose(seen["image"](x), 0.25)
    assert all(np.array_equal(a, c.csi) for a, c in zip(csi_before, clips))
    evaluate(encoder, constant_head(), clips, "normal")
    assert seen["image"] is None


def test_dark_report_records_gamma(encoder, tiny_geometry):
    r = evaluate(encoder, constant_head(), balanced_clips(tiny_geometry), "dark", 2.5)
    assert r.condition == "dark" and r.gamma == 2.5
    assert evaluate(encoder, constant_head(), balanced_clips(tiny_geometry)).gamma is None


def test_bad_condition_and_empty_clips(encoder, tiny_geometry):
    with pytest.raises(ArgumentError):
        evaluate(encoder, constant_head(), balanced_clips(tiny_geometry), "foggy")
    with pytest.raises(ConfigurationError):
        evaluate(encoder, constant_head(), [])


def test_uniform_random_predictor_converges_to_chance():
    K, n = 6, 6000
    gen = torch.Generator().manual_seed(0)
    y = torch.randint(0, K, (n,), generator=gen)
    pred = torch.randint(0, K, (n,), generator=gen)
    r = _report("activity", "normal", y, pred)
    sigma = math.sqrt((1 / K) * (1 - 1 / K) / n)
    assert abs(r.accuracy - 1 / K) <= 3 * sigma
    assert sum(r.num_samples.values()) == n


def _report_for(correct, total, seed):
    return EvalReport("activity", "normal", correct, total, {0: correct / total}, {0: total}, (seed,),
                      (correct / total,), pretrain_id="A", finetune_id="A")


def test_aggregate_pools_counts_and_keeps_seeds():
    r = aggregate([_report_for(3, 4, 1), _report_for(1, 4, 2)])
    assert (r.correct, r.total, r.seeds) == (4, 8, (1, 2))
    assert r.accuracy == 0.5
    assert r.per_class == {0: 0.5}
    assert r.seed_accuracies == (0.75, 0.25)
    assert r.mean_accuracy == 0.5
    with pytest.raises(ArgumentError):
        aggregate([])


def test_render_table_has_one_row_per_report():
    reports = [_report_for(3, 4, 1), _report_for(1, 4, 2)]
    table = render_table(reports, ["walk"])
    lines = table.splitlines()
    assert len(lines) == 4
    assert "walk" in lines[0] and "avg" in lines[0]
    assert "75.00" in lines[2] and "25.00" in lines[3]
    assert render_table([]) == ""


def test_reports_round_trip_through_jsonl(tmp_path):
    reports = [_report_for(3, 4, 1), aggregate([_report_for(3, 4, 1), _report_for(1, 4, 2)])]
    write_reports(tmp_path / "r.jsonl", reports)
    assert read_reports(tmp_path / "r.jsonl") == reports
    assert len((tmp_path / "r.jsonl").read_text().splitlines()) == 2


# ---------------------------------------------------------------------------
# protocol


def test_protocol_argument_errors(tiny_dataset):
    path = str(tiny_dataset.manifest.root_path)
    with pytest.raises(ArgumentError):
        run_protocol(ProtocolSpec([path], [path], tiny_config(), encoder="frozen"))
    with pytest.raises(ConfigurationError):
        run_protocol(ProtocolSpec([path], [path], tiny_config(), seeds=()))
    with pytest.raises(ArgumentError):
        run_protocol(ProtocolSpec([path], [path], tiny_config(), conditions=("foggy",)))


def test_missing_dataset_is_a_configuration_error(tmp_path):
    with pytest.raises(ConfigurationError, match="not found"):
        run_protocol(ProtocolSpec([str(tmp_path / "nope")], [str(tmp_path / "nope")], tiny_config()))


def test_protocol_grid_reuses_pretraining(tmp_path):
    a = tiny_synth(tmp_path / "A", "A")
    b = tiny_synth(tmp_path / "B", "B")
    pa, pb = str(a.manifest.root_path), str(b.manifest.root_path)
    cache = {}
    spec = ProtocolSpec([pa], [pa, pb], tiny_config(), conditions=("normal", "dark"), seeds=(1,))
    reports = run_protocol(spec, cache)
    assert len(cache) == 1
    assert [(r.pretrain_id, r.finetune_id, r.condition) for r in reports] == [
        ("A", "A", "normal"), ("A", "A", "dark"), ("A", "B", "normal"), ("A", "B", "dark")]
    assert all(r.total == 6 and r.seeds == (1,) for r in reports)
    # a random-encoder baseline reuses the cached tokenizers and skips pretraining
    rnd = run_protocol(ProtocolSpec([pa], [pa], tiny_config(), seeds=(1,), encoder="random"), cache)
    assert len(cache) == 1 and rnd[0].encoder_init == "random"

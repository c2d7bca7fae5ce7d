import math
from decimal import Decimal

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

import oracles
from oracles import central_difference, relative_error
from mi2m.datasets import MultimodalFrame
from mi2m.encoder import (EncoderArch, MaskedEncoder, MaskPlan, PretrainSchedule, attention, check_compatible,
                          embed_and_corrupt, encode, load_encoder, make_optimizer, mask_count, masked_token_loss,
                          mi2m_loss, plan_mask, predict_tokens, pretrain, sample_masks, save_encoder)
from mi2m.errors import ArgumentError, CheckpointError, ConfigurationError, ShapeError, ValidationError
from mi2m.tokenizer import PatchGeometry, Tokenizer, TokenizerSchedule, patchify, tokenize_batch, train_tokenizer


def tiny_encoder(geometry, width=8, layers=1, heads=2, codebook=16, seed=0, dtype=torch.float64):
    torch.manual_seed(seed)
    return MaskedEncoder(EncoderArch(geometry, width, layers, heads, 2, codebook, codebook)).to(dtype)


def random_frame(geometry, seed=0):
    rng = np.random.default_rng(seed)
    return MultimodalFrame(rng.standard_normal(geometry.csi_shape), rng.uniform(size=geometry.image_shape), 0)


# ---------------------------------------------------------------------------
# mask plans


def test_mask_counts_at_default_ratio():
    plan = plan_mask(38, 196, 0.4, seed=0)
    assert (len(plan.wifi), len(plan.vision)) == (16, 79)


def test_mask_plan_is_deterministic():
    a, b = plan_mask(38, 196, 0.4, 7), plan_mask(38, 196, 0.4, 7)
    assert np.array_equal(a.wifi, b.wifi) and np.array_equal(a.vision, b.vision)
    c = plan_mask(38, 196, 0.4, 8)
    assert not (np.array_equal(a.wifi, c.wifi) and np.array_equal(a.vision, c.vision))


def test_small_ratio_masks_at_least_one():
    assert len(plan_mask(38, 196, 0.01, 0).wifi) == 1


@pytest.mark.parametrize("alpha", [0.0, 1.0, -0.2, 1.3])
def test_mask_ratio_out_of_range(alpha):
    with pytest.raises(ArgumentError):
        plan_mask(38, 196, alpha, 0)


def test_mask_count_uses_exact_ceiling():
    # the binary double nearest 0.4 is slightly above 2/5; the ratio means 2/5
    assert mask_count(0.4, 5) == 2 and mask_count(0.4, 10) == 4
    assert mask_count(0.7, 10) == 7 and mask_count(0.1 + 0.2, 10) == 4
    assert mask_count(0.4, 38) == 16 and mask_count(0.4, 196) == 79


@given(st.integers(1, 300), st.integers(1, 300), st.floats(0.001, 0.999), st.integers(0, 2**32 - 1))
@settings(max_examples=200, deadline=None)
def test_mask_plan_invariants(nw, nv, alpha, seed):
    plan = plan_mask(nw, nv, alpha, seed)
    for idx, n in ((plan.wifi, nw), (plan.vision, nv)):
        assert len(idx) == math.ceil(Decimal(repr(alpha)) * n) >= 1
        assert len(set(idx.tolist())) == len(idx)
        assert idx.min() >= 0 and idx.max() < n
    assert int(plan.mask().sum()) == len(plan.wifi) + len(plan.vision)


def test_batched_masks_have_plan_counts():
    m = sample_masks(50, 12, 16, 0.4, torch.Generator().manual_seed(0))
    assert m.shape == (50, 28)
    assert torch.all(m[:, :12].sum(1) == 5) and torch.all(m[:, 12:].sum(1) == 7)


# ---------------------------------------------------------------------------
# corruption


def test_empty_plan_leaves_no_mask_embedding(tiny_geometry):
    enc = tiny_encoder(tiny_geometry)
    frame = random_frame(tiny_geometry)
    sample = embed_and_corrupt(frame, MaskPlan.empty(2, 2), enc)
    pw, pv = enc.patches(torch.from_numpy(frame.csi)[None], torch.from_numpy(frame.image)[None])
    assert torch.equal(sample.embeddings, enc.embed(pw, pv)[0])
    assert not sample.mask.any()


def test_corruption_replaces_and_keeps_length(tiny_geometry):
    enc = tiny_encoder(tiny_geometry)
    frame = random_frame(tiny_geometry)
    plan = MaskPlan(np.array([1]), np.array([0]), 0.5, 0, 2, 2)
    sample = embed_and_corrupt(frame, plan, enc)
    clean = embed_and_corrupt(frame, MaskPlan.empty(2, 2), enc)
    assert sample.embeddings.shape == clean.embeddings.shape == (4, 8)
    assert torch.equal(sample.embeddings[[0, 3]], clean.embeddings[[0, 3]])
    # masked joint positions 1 (wifi) and 2 (first vision patch)
    extra = enc.pos_embedding + enc.modality_embedding[enc.modality_ids()]
    torch.testing.assert_close(sample.embeddings[1] - extra[1], enc.mask_embedding, rtol=0, atol=1e-15)
    torch.testing.assert_close(sample.embeddings[2] - extra[2], enc.mask_embedding, rtol=0, atol=1e-15)


def test_embedding_is_local(tiny_geometry):
    enc = tiny_encoder(tiny_geometry)
    a = random_frame(tiny_geometry, 1)
    image = a.image.copy()
    image[:, :, 2:] += 0.5  # second vision patch only
    b = MultimodalFrame(a.csi, image, 0)
    plan = MaskPlan.empty(2, 2)
    ea, eb = embed_and_corrupt(a, plan, enc).embeddings, embed_and_corrupt(b, plan, enc).embeddings
    changed = (ea != eb).any(dim=1).tolist()
    assert changed == [False, False, False, True]


def test_corruption_rejects_mismatched_plan(tiny_geometry):
    enc = tiny_encoder(tiny_geometry)
    with pytest.raises(ValidationError, match="mask plan"):
        embed_and_corrupt(random_frame(tiny_geometry), plan_mask(3, 2, 0.5, 0), enc)


def test_corruption_rejects_wrong_frame_shape(tiny_geometry):
    enc = tiny_encoder(tiny_geometry)
    bad = MultimodalFrame(np.zeros((1, 4, 4)), np.zeros((1, 2, 4)), 0)
    with pytest.raises(ValidationError, match="do not match"):
        embed_and_corrupt(bad, MaskPlan.empty(2, 2), enc)


# ---------------------------------------------------------------------------
# attention


def test_single_position_returns_value():
    v = torch.tensor([[1.5, -2.0, 3.0]], dtype=torch.float64)
    out = attention(torch.randn(1, 4, dtype=torch.float64), torch.randn(1, 4, dtype=torch.float64), v, 4)
    assert torch.equal(out, v)


def test_identical_keys_average_values():
    k = torch.tensor([[0.3, -1.0], [0.3, -1.0]], dtype=torch.float64)
    v = torch.tensor([[1.0, 2.0], [3.0, -4.0]], dtype=torch.float64)
    out = attention(torch.randn(3, 2, dtype=torch.float64), k, v, 2)
    torch.testing.assert_close(out, torch.tensor([[2.0, -1.0]] * 3, dtype=torch.float64), rtol=0, atol=1e-15)


def test_attention_matches_direct_evaluation():
    rng = np.random.default_rng(0)
    q, k, v = (rng.standard_normal((4, 8)) for _ in range(3))
    out = attention(*(torch.from_numpy(a) for a in (q, k, v)), 8)
    assert np.max(np.abs(out.numpy() - oracles.attention(q, k, v, 8))) < 1e-6


@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 5), st.integers(0, 10_000))
@settings(max_examples=60, deadline=None)
def test_attention_rows_sum_to_one_and_permutation(n, m, d, seed):
    g = torch.Generator().manual_seed(seed)
    q = torch.randn(n, d, generator=g, dtype=torch.float64)
    k = torch.randn(m, d, generator=g, dtype=torch.float64)
    v = torch.randn(m, 3, generator=g, dtype=torch.float64)
    weights = attention(q, k, torch.eye(m, dtype=torch.float64), d)
    torch.testing.assert_close(weights.sum(-1), torch.ones(n, dtype=torch.float64))
    perm = torch.randperm(m, generator=g)
    torch.testing.assert_close(attention(q, k[perm], v[perm], d), attention(q, k, v, d))


def test_attention_shape_errors():
    with pytest.raises(ShapeError):
        attention(torch.zeros(2, 3), torch.zeros(2, 4), torch.zeros(2, 4), 3)
    with pytest.raises(ShapeError):
        attention(torch.zeros(2, 3), torch.zeros(2, 3), torch.zeros(5, 4), 3)
    with pytest.raises(ShapeError):
        attention(torch.zeros(2, 3), torch.zeros(2, 3), torch.zeros(2, 4), 0)


def test_self_attention_heads_match_oracle():
    # multi-head layer = per-head oracle attention on the projected inputs
    torch.manual_seed(0)
    enc = tiny_encoder(PatchGeometry((1, 4, 2), (1, 2, 4), (2, 2), (2, 2)), width=8, heads=2)
    layer = enc.blocks[0].attn
    x = torch.randn(1, 4, 8, dtype=torch.float64)
    with torch.no_grad():
        q, k, v = (lin(x)[0].numpy() for lin in (layer.q, layer.k, layer.v))
        heads = [oracles.attention(q[:, h * 4 : (h + 1) * 4], k[:, h * 4 : (h + 1) * 4], v[:, h * 4 : (h + 1) * 4], 4)
                 for h in range(2)]
        expected = np.concatenate(heads, axis=1) @ layer.out.weight.numpy().T + layer.out.bias.numpy()
        assert np.max(np.abs(layer(x)[0].numpy() - expected)) < 1e-12


# ---------------------------------------------------------------------------
# encode / predict


def test_encode_keeps_length(tiny_geometry):
    enc = tiny_encoder(tiny_geometry)
    sample = embed_and_corrupt(random_frame(tiny_geometry), plan_mask(2, 2, 0.5, 0), enc)
    assert encode(sample, enc).shape == (4, 8)


def test_empty_stack_is_final_norm(tiny_geometry):
    enc = tiny_encoder(tiny_geometry, layers=0)
    sample = embed_and_corrupt(random_frame(tiny_geometry), MaskPlan.empty(2, 2), enc)
    assert torch.equal(encode(sample, enc), enc.norm(sample.embeddings[None])[0])


def test_encoder_gradient_matches_finite_differences(tiny_geometry):
    enc = tiny_encoder(tiny_geometry, width=8, layers=1)
    sample = embed_and_corrupt(random_frame(tiny_geometry), MaskPlan.empty(2, 2), enc)
    x0 = sample.embeddings.detach().numpy().copy()
    w = np.random.default_rng(1).standard_normal((4, 8))

    def f(x):
        with torch.no_grad():
            return float((encode(torch.from_numpy(x.reshape(4, 8)), enc).numpy() * w).sum())

    x = torch.from_numpy(x0).requires_grad_(True)
    (encode(x, enc) * torch.from_numpy(w)).sum().backward()
    assert relative_error(x.grad.numpy().ravel(), central_difference(f, x0.ravel())) < 1e-4


def test_non_finite_activations_name_the_block(tiny_geometry):
    enc = tiny_encoder(tiny_geometry, layers=2)
    with torch.no_grad():
        enc.blocks[1].ff[0].weight.fill_(float("inf"))
    x = embed_and_corrupt(random_frame(tiny_geometry), MaskPlan.empty(2, 2), enc).embeddings
    with pytest.raises(ArithmeticError, match="block 1"):
        encode(x, enc)


def _zero_heads(enc):
    with torch.no_grad():
        for head in (enc.wifi_head, enc.vision_head):
            head.weight.zero_()
            head.bias.zero_()


def test_zero_head_predicts_uniform(tiny_geometry):
    enc = tiny_encoder(tiny_geometry, codebook=16)
    _zero_heads(enc)
    plan = plan_mask(2, 2, 0.5, 0)
    h = encode(embed_and_corrupt(random_frame(tiny_geometry), plan, enc), enc)
    preds = predict_tokens(h, enc, plan)
    for p in (preds.wifi, preds.vision):
        torch.testing.assert_close(p, torch.full_like(p, 1 / 16), rtol=0, atol=1e-15)


def test_predictions_are_distributions_over_full_codebook():
    g = PatchGeometry((3, 114, 10), (3, 32, 32), (6, 5), (16, 16))
    enc = tiny_encoder(g, width=8, codebook=8192, dtype=torch.float32)
    plan = plan_mask(g.num_wifi, g.num_vision, 0.4, 0)
    h = encode(embed_and_corrupt(random_frame(g), plan, enc), enc)
    preds = predict_tokens(h, enc, plan)
    assert preds.wifi.shape == (16, 8192) and preds.vision.shape == (2, 8192)
    for p in (preds.wifi, preds.vision):
        assert torch.all((p.sum(-1) - 1).abs() < 1e-6)


# ---------------------------------------------------------------------------
# loss


def test_uniform_loss_is_log_codebook():
    V = 8192
    uniform = torch.full((5, V), 1.0 / V, dtype=torch.float64)
    loss = mi2m_loss([uniform[:3], uniform[3:]], torch.tensor([0, 17, 8191, 4, 5]))
    assert abs(float(loss) - math.log(V)) < 1e-9
    assert abs(math.log(V) - 9.0109) < 1e-4


def test_perfect_predictions_give_zero_loss():
    targets = torch.tensor([2, 0, 3])
    probs = torch.nn.functional.one_hot(targets, 4).double()
    assert float(mi2m_loss([probs[:1], probs[1:]], targets)) == 0.0


def test_hand_built_three_positions():
    probs = [np.array([0.7, 0.2, 0.1]), np.array([0.25, 0.25, 0.5]), np.array([0.6, 0.3, 0.1])]
    targets = [0, 2, 1]
    loss = mi2m_loss([torch.from_numpy(np.stack(probs[:2])), torch.from_numpy(probs[2][None])], torch.tensor(targets))
    assert abs(float(loss) - oracles.masked_nll(probs, targets)) < 1e-12
    assert abs(float(loss) + (math.log(0.7) + math.log(0.5) + math.log(0.3)) / 3) < 1e-12


def test_loss_rejects_out_of_range_target():
    p = torch.full((2, 4), 0.25)
    with pytest.raises(ValidationError, match="range"):
        mi2m_loss([p[:1], p[1:]], torch.tensor([0, 4]))
    with pytest.raises(ValidationError):
        mi2m_loss([p[:1], p[1:]], torch.tensor([0, 1, 2]))


def test_batched_loss_matches_per_sample_loss(tiny_geometry):
    enc = tiny_encoder(tiny_geometry)
    frame = random_frame(tiny_geometry)
    plan = plan_mask(2, 2, 0.5, 3)
    tokens = torch.tensor([3, 7, 11, 15])
    sample = embed_and_corrupt(frame, plan, enc, tokens=tokens)
    h = encode(sample, enc)
    single = mi2m_loss(predict_tokens(h, enc, plan), sample.targets)
    batched = masked_token_loss(enc, h[None], plan.mask()[None], tokens[None, :2], tokens[None, 2:])
    torch.testing.assert_close(single, batched)


def test_unmasked_targets_contribute_nothing(tiny_geometry):
    enc = tiny_encoder(tiny_geometry)
    mask = torch.tensor([[True, False, False, True]])
    h = torch.randn(1, 4, 8, dtype=torch.float64)
    a = masked_token_loss(enc, h, mask, torch.tensor([[1, 2]]), torch.tensor([[3, 4]]))
    b = masked_token_loss(enc, h, mask, torch.tensor([[1, 9]]), torch.tensor([[0, 4]]))
    assert torch.equal(a, b)


@given(st.integers(1, 6), st.integers(2, 20), st.integers(0, 10_000))
@settings(max_examples=50, deadline=None)
def test_loss_is_non_negative(n, V, seed):
    g = torch.Generator().manual_seed(seed)
    p = torch.softmax(torch.randn(n, V, generator=g, dtype=torch.float64), -1)
    t = torch.randint(V, (n,), generator=g)
    assert float(mi2m_loss([p, p[:0]], t)) >= 0.0


# ---------------------------------------------------------------------------
# training


def test_single_batch_overfits():
    g = PatchGeometry((1, 4, 4), (1, 4, 4), (2, 2), (2, 2))
    torch.manual_seed(0)
    enc = MaskedEncoder(EncoderArch(g, 32, 2, 4, 2, 16, 16))
    gen = torch.Generator().manual_seed(0)
    csi, img = torch.randn(8, 1, 4, 4, generator=gen), torch.rand(8, 1, 4, 4, generator=gen)
    tw, tv = torch.randint(16, (8, 4), generator=gen), torch.randint(16, (8, 4), generator=gen)
    mask = sample_masks(8, 4, 4, 0.4, gen)
    pw, pv = enc.patches(csi, img)
    opt = make_optimizer(enc, 1e-3)
    for step in range(500):
        loss = masked_token_loss(enc, enc.encode(enc.embed(pw, pv, mask)), mask, tw, tv)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if loss.item() < 0.1:
            break
    assert loss.item() < 0.1, (step, loss.item())


@pytest.fixture(scope="module")
def tiny_setup():
    g = PatchGeometry((1, 4, 4), (1, 8, 8), (2, 2), (4, 4))
    gen = torch.Generator().manual_seed(0)
    phase = torch.rand(96, generator=gen) * 2 * math.pi
    ramp = torch.linspace(0, 2 * math.pi, 16).reshape(4, 4)
    csi = torch.sin(ramp + phase[:, None, None])[:, None] + 0.05 * torch.randn(96, 1, 4, 4, generator=gen)
    img = (0.5 + 0.4 * torch.cos(torch.linspace(0, 2 * math.pi, 64).reshape(8, 8) + phase[:, None, None]))[:, None]
    toks = []
    for mod, frames, patch in (("wifi", csi, (2, 2)), ("vision", img, (4, 4))):
        torch.manual_seed(1)
        t = Tokenizer(mod, frames.shape[1:], patch, codebook_size=32, hidden=8)
        p = patchify(frames, patch)
        train_tokenizer(p.reshape(-1, p.shape[-1]), t, TokenizerSchedule(epochs=3, batch_size=64, seed=1))
        toks.append(t)
    return g, csi, img, tuple(toks)


def _fresh(g, seed=0):
    torch.manual_seed(seed)
    return MaskedEncoder(EncoderArch(g, 16, 1, 2, 2, 32, 32))


def test_pretraining_reduces_masked_loss(tiny_setup):
    g, csi, img, toks = tiny_setup
    _, trace = pretrain(csi, img, toks, _fresh(g), PretrainSchedule(lr=3e-3, batch_size=16, epochs=6, seed=0))
    assert len(trace.epoch_loss) == 6 and len(trace.rows) == 6 * 6
    assert trace.epoch_loss[-1] < trace.epoch_loss[0]


def test_pretraining_is_deterministic(tiny_setup):
    g, csi, img, toks = tiny_setup
    sched = PretrainSchedule(lr=3e-3, batch_size=32, epochs=2, seed=5)
    a, ta = pretrain(csi, img, toks, _fresh(g), sched)
    b, tb = pretrain(csi, img, toks, _fresh(g), sched)
    assert ta.rows == tb.rows
    for (k, va), vb in zip(a.state_dict().items(), b.state_dict().values()):
        assert torch.equal(va, vb), k


def test_resume_reproduces_uninterrupted_run(tiny_setup, tmp_path):
    g, csi, img, toks = tiny_setup
    sched = PretrainSchedule(lr=3e-3, batch_size=32, epochs=4, seed=2)
    full, tf = pretrain(csi, img, toks, _fresh(g), sched)

    saved = {}

    def stop_after_two(epoch, params, opt, trace):
        if epoch == 1:
            save_encoder(tmp_path / "enc.bin", params, epoch + 1, opt)
            saved["rows"] = list(trace.rows)
            saved["epochs"] = list(trace.epoch_loss)

    pretrain(csi, img, toks, _fresh(g), PretrainSchedule(lr=3e-3, batch_size=32, epochs=2, seed=2),
             on_epoch=stop_after_two)
    enc, header, opt = load_encoder(tmp_path / "enc.bin")
    from mi2m.encoder import PretrainTrace
    trace = PretrainTrace(saved["rows"], saved["epochs"])
    resumed, tr = pretrain(csi, img, toks, enc, sched, optimizer=opt, start_epoch=header["epoch"], trace=trace)
    assert tr.rows == tf.rows
    steps = [s for _, s, _ in tr.rows]
    assert steps == list(range(len(steps)))
    for va, vb in zip(full.state_dict().values(), resumed.state_dict().values()):
        assert torch.equal(va, vb)


def test_incompatible_tokenizers_rejected(tiny_setup):
    g, csi, img, toks = tiny_setup
    other = MaskedEncoder(EncoderArch(g, 16, 1, 2, 2, 64, 32))
    with pytest.raises(ConfigurationError, match="codebook"):
        check_compatible(toks, other)
    with pytest.raises(ConfigurationError, match="ordered"):
        check_compatible(toks[::-1], _fresh(g))


# ---------------------------------------------------------------------------
# checkpoint


def test_checkpoint_round_trip_is_byte_identical(tiny_setup, tmp_path):
    g, csi, img, toks = tiny_setup
    enc, _ = pretrain(csi, img, toks, _fresh(g), PretrainSchedule(lr=3e-3, batch_size=32, epochs=1, seed=0))
    opt = make_optimizer(enc, 3e-3)
    loss = masked_token_loss(enc, enc(csi[:4], img[:4], torch.ones(4, g.num_positions, dtype=torch.bool)),
                             torch.ones(4, g.num_positions, dtype=torch.bool),
                             tokenize_batch(csi[:4], toks[0]), tokenize_batch(img[:4], toks[1]))
    loss.backward()
    opt.step()
    save_encoder(tmp_path / "a.bin", enc, 3, opt, {"seed": 1})
    back, header, opt2 = load_encoder(tmp_path / "a.bin")
    save_encoder(tmp_path / "b.bin", back, header["epoch"], opt2, header["extra"])
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
    assert (tmp_path / "a.bin").read_bytes()[:8] == b"MI2MENC1"
    assert header["epoch"] == 3 and back.arch == enc.arch


def test_checkpoint_refuses_other_magic(tmp_path, tiny_geometry):
    from mi2m.temporal import TemporalHead, save_head
    save_head(tmp_path / "head.bin", TemporalHead(4, 3, 5))
    with pytest.raises(CheckpointError, match="magic"):
        load_encoder(tmp_path / "head.bin")

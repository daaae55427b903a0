import numpy as np
import pytest

from ces import autograd as ag
from ces.autograd import Tensor, grad_check
from ces.models import (
    Batch,
    EncoderConfig,
    EncoderStack,
    classify_multimodal,
    classify_unimodal,
    encode_single_stream,
    encode_text,
    encode_two_stream,
    load_checkpoint,
    mlm_logits,
    pool,
    save_checkpoint,
)
from ces.text import PAD_ID, TokenSequence, build_vocab, encode_pair

TOL = 1e-4


def tiny(architecture="unimodal", **kw):
    base = dict(vocab_size=14, layers=1, hidden=8, heads=2, ff=12, max_len=10, max_regions=3, region_dim=5,
                dropout=0.0, architecture=architecture, init_std=0.3, ln_eps=1e-5)
    base.update(kw)
    if architecture == "two_stream":
        base.setdefault("pooling", "product")
    return EncoderConfig(**base)


def tiny_batch(rng, B=2, T=7, n_real=(7, 4), V=14, k=None, d=5):
    ids = rng.integers(5, V, size=(B, T))
    attn = np.zeros((B, T), dtype=np.int64)
    for b, n in enumerate(n_real):
        attn[b, :n] = 1
    ids[attn == 0] = PAD_ID
    ids[:, 0] = 2  # [CLS]
    segs = np.zeros((B, T), dtype=np.int64)
    segs[:, T // 2 :] = 1
    segs *= attn
    regions = None if k is None else rng.normal(size=(B, k, d))
    return Batch(ids, segs, attn, regions)


class TestConfig:
    def test_head_divisibility(self):
        with pytest.raises(ValueError):
            EncoderConfig(vocab_size=10, hidden=10, heads=4)

    def test_product_needs_two_stream(self):
        with pytest.raises(ValueError):
            EncoderConfig(vocab_size=10, pooling="product")
        with pytest.raises(ValueError):
            EncoderConfig(vocab_size=10, architecture="single_stream", pooling="product")

    def test_parameter_count_is_pure_function_of_config(self):
        cfg = tiny()
        assert EncoderStack(cfg, 0).num_parameters() == EncoderStack(cfg, 5).num_parameters()
        d, f, V = 8, 12, 14
        block = 4 * (d * d + d) + 2 * d + (d * f + f + f * d + d) + 2 * d
        emb = V * d + 10 * d + 2 * d + 2 * d
        assert EncoderStack(cfg, 0).num_parameters() == emb + block + V + d + 1

    def test_init_is_pure_function_of_config_and_seed(self):
        cfg = tiny("two_stream")
        assert EncoderStack(cfg, 3).checksum() == EncoderStack(cfg, 3).checksum()
        assert EncoderStack(cfg, 3).checksum() != EncoderStack(cfg, 4).checksum()

    def test_default_init_scale(self):
        stack = EncoderStack(EncoderConfig(vocab_size=500), 0)
        assert abs(stack["emb.tok"].data.std() - 0.02) < 0.002
        assert np.all(stack["blk0.ln1_g"].data == 1.0)


class TestTextEncoder:
    def test_shapes_and_too_long(self, rng):
        stack = EncoderStack(tiny(), 0)
        batch = tiny_batch(rng)
        assert stack.encode_text(batch).shape == (2, 7, 8)
        long = tiny_batch(rng, T=11, n_real=(11, 3))
        with pytest.raises(ValueError, match="max_len"):
            stack.encode_text(long)

    def test_attention_never_reaches_padding(self, rng):
        stack = EncoderStack(tiny(layers=2), 0)
        v = build_vocab(["a b c"])
        seq = encode_pair("", None, v, 10)  # [CLS] [SEP] then padding
        stack.attention_log = []
        h = encode_text(stack, seq)
        assert np.all(np.isfinite(h.data))
        for weights in stack.attention_log:
            assert np.all(weights[..., seq.attn_mask == 0] == 0.0)

    def test_pad_token_ids_never_change_the_logit(self, rng):
        stack = EncoderStack(tiny(), 0)
        batch = tiny_batch(rng)
        ref = stack.logits(batch).data
        ids = batch.ids.copy()
        pads = batch.attn == 0
        ids[pads] = rng.integers(0, 14, size=pads.sum())
        other = stack.logits(Batch(ids, batch.segments, batch.attn)).data
        assert np.array_equal(ref, other)

    def test_non_pad_states_unchanged_when_pad_positions_swap(self, rng):
        stack = EncoderStack(tiny(), 0)
        batch = tiny_batch(rng, B=1, n_real=(4,))
        ids = batch.ids.copy()
        ids[0, 5], ids[0, 6] = 9, 11
        swapped = ids.copy()
        swapped[0, [5, 6]] = ids[0, [6, 5]]
        a = stack.encode_text(Batch(ids, batch.segments, batch.attn)).data[0, :4]
        b = stack.encode_text(Batch(swapped, batch.segments, batch.attn)).data[0, :4]
        assert np.array_equal(a, b)

    def test_grad_check_through_encoder(self, rng):
        stack = EncoderStack(tiny(), 1)
        batch = tiny_batch(rng)
        params = [stack[n] for n in stack.backbone_names()]
        # mean(hidden) is flat after the final layer norm (always mean(beta)); project instead
        w = Tensor(rng.normal(size=(2, 7, 8)))
        err = grad_check(lambda _: ag.sum_all(ag.mul(stack.encode_text(batch), w)), params, max_coords=250, seed=1)
        assert err <= TOL

    def test_batched_equals_single_sample(self, rng):
        stack = EncoderStack(tiny(), 0)
        batch = tiny_batch(rng)
        full = stack.encode_text(batch).data
        for b in range(2):
            seq = TokenSequence(batch.ids[b], batch.segments[b], batch.attn[b])
            np.testing.assert_allclose(encode_text(stack, seq).data, full[b], atol=1e-12)


class TestMLMHead:
    def test_shape_and_zero_hidden(self):
        stack = EncoderStack(tiny(), 0)
        stack["mlm.bias"].data = np.arange(14.0)
        out = mlm_logits(stack, Tensor(np.zeros((5, 8))))
        assert out.shape == (5, 14)
        assert np.array_equal(out.data, np.tile(np.arange(14.0), (5, 1)))

    def test_head_is_tied_to_token_embedding(self, rng):
        stack = EncoderStack(tiny(), 0)
        h = Tensor(rng.normal(size=(3, 8)))
        np.testing.assert_allclose(mlm_logits(stack, h).data, h.data @ stack["emb.tok"].data.T, atol=1e-12)

    def test_initial_loss_near_log_vocab(self, rng):
        V = 400
        stack = EncoderStack(EncoderConfig(vocab_size=V), 0)
        batch = tiny_batch(rng, B=8, T=20, n_real=[20] * 8, V=V)
        hidden = stack.encode_text(batch)
        targets = rng.integers(5, V, size=8 * 20)
        loss = ag.softmax_cross_entropy(stack.mlm_logits(ag.reshape(hidden, (-1, 64))), targets).item()
        assert abs(loss - np.log(V)) / np.log(V) <= 0.15

    def test_grad_check(self, rng):
        stack = EncoderStack(tiny(), 2)
        batch = tiny_batch(rng)
        targets = rng.integers(0, 14, size=14)
        f = lambda _: ag.softmax_cross_entropy(stack.mlm_logits(ag.reshape(stack.encode_text(batch), (-1, 8))), targets)
        assert grad_check(f, [stack["emb.tok"], stack["mlm.bias"], stack["blk0.ff_w1"]], max_coords=200) <= TOL


class TestUnimodalHead:
    def test_zero_head_gives_half(self, rng):
        stack = EncoderStack(tiny(), 0)
        stack.zero_head()
        seq = encode_pair("a b", "c", build_vocab(["a b c"]), 10)
        logit = classify_unimodal(stack, seq)
        assert logit.item() == 0.0
        assert ag.sigmoid(logit).item() == 0.5

    def test_wrong_architecture(self):
        stack = EncoderStack(tiny("single_stream"), 0)
        with pytest.raises(ValueError):
            classify_unimodal(stack, encode_pair("a", None, build_vocab(["a"]), 10))

    def test_end_to_end_grad_check(self, rng):
        stack = EncoderStack(tiny(), 3)
        batch = tiny_batch(rng)
        y = np.array([1, 0])
        f = lambda _: ag.bce_with_logits(stack.logits(batch), y)
        assert grad_check(f, stack.parameters(), max_coords=250, seed=3) <= TOL


class TestSingleStream:
    def test_zero_regions_reduce_to_text_encoder(self, rng):
        uni = EncoderStack(tiny(), 0)
        ss = EncoderStack(tiny("single_stream"), 0)
        for name in uni.backbone_names():
            src = uni[name].data
            if name == "emb.seg":
                ss[name].data[:2] = src
            else:
                ss[name].data = src.copy()
        batch = tiny_batch(rng)
        seq = TokenSequence(batch.ids[1], batch.segments[1], batch.attn[1])
        a = encode_single_stream(ss, np.zeros((0, 5)), seq).data
        b = encode_text(uni, seq).data
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)

    def test_regions_are_prepended_with_distinct_positions(self, rng):
        ss = EncoderStack(tiny("single_stream"), 0)
        batch = tiny_batch(rng, k=3)
        assert ss.encode_single_stream(batch).shape == (2, 3 + 7, 8)
        pos = ss["img.pos"].data
        assert len({row.tobytes() for row in pos}) == pos.shape[0]
        # duplicate region rows still produce distinct states (different slot embeddings)
        dup = batch.regions.copy()
        dup[:, 1] = dup[:, 0]
        h = ss.encode_single_stream(Batch(batch.ids, batch.segments, batch.attn, dup)).data
        assert not np.allclose(h[:, 0], h[:, 1])

    def test_too_many_regions(self, rng):
        ss = EncoderStack(tiny("single_stream"), 0)
        with pytest.raises(ValueError, match="max_regions"):
            ss.encode_single_stream(tiny_batch(rng, k=4))

    def test_pooling_reads_text_cls(self, rng):
        ss = EncoderStack(tiny("single_stream"), 0)
        batch = tiny_batch(rng, k=3)
        hidden = ss.encode_single_stream(batch)
        np.testing.assert_array_equal(ss.pool(batch).data, hidden.data[:, 3])
        seq = TokenSequence(batch.ids[0], batch.segments[0], batch.attn[0])
        one = encode_single_stream(ss, batch.regions[0], seq)
        np.testing.assert_array_equal(pool(ss, (one, 3)).data, one.data[3])

    def test_grad_check_through_region_projection(self, rng):
        ss = EncoderStack(tiny("single_stream"), 4)
        batch = tiny_batch(rng, k=3)
        y = np.array([0, 1])
        names = ["img.proj_w", "img.proj_b", "img.pos", "emb.seg", "blk0.attn_wk", "head.w1", "head.w2"]
        f = lambda _: ag.bce_with_logits(ss.logits(batch), y)
        assert grad_check(f, [ss[n] for n in names], max_coords=250) <= TOL


class TestTwoStream:
    def test_shapes(self, rng):
        ts = EncoderStack(tiny("two_stream", layers=2), 0)
        img, txt = ts.encode_two_stream(tiny_batch(rng, k=3))
        assert img.shape == (2, 3, 8) and txt.shape == (2, 7, 8)

    def test_severed_cross_attention_matches_text_only_stack(self, rng):
        # with the cross output zeroed, the freshly initialised post-cross norm re-normalises an
        # already normalised input; a tiny eps makes that an identity to rounding
        ts = EncoderStack(tiny("two_stream", layers=2, ln_eps=1e-12), 0)
        uni = EncoderStack(tiny(layers=2, ln_eps=1e-12), 0)
        for name in uni.backbone_names():
            src = name.replace("blk", "txt")
            uni[name].data = ts[src].data[:2].copy() if name == "emb.seg" else ts[src].data.copy()
        for layer in range(2):
            ts[f"txt{layer}.x_wo"].data[:] = 0.0
            ts[f"txt{layer}.x_bo"].data[:] = 0.0
        batch = tiny_batch(rng, k=3)
        _, txt = ts.encode_two_stream(batch)
        np.testing.assert_allclose(txt.data, uni.encode_text(batch).data, rtol=0, atol=1e-12)

    def test_no_regions_is_an_error(self, rng):
        ts = EncoderStack(tiny("two_stream"), 0)
        with pytest.raises(ValueError):
            ts.encode_two_stream(tiny_batch(rng))

    def test_grad_check_through_cross_attention(self, rng):
        ts = EncoderStack(tiny("two_stream"), 5)
        batch = tiny_batch(rng, k=3)
        y = np.array([1, 0])
        names = [n for n in ts.params if ".x_" in n or n.startswith(("img.", "head."))]
        f = lambda _: ag.bce_with_logits(ts.logits(batch), y)
        assert grad_check(f, [ts[n] for n in names], max_coords=300, seed=5) <= TOL

    def test_single_sample_wrapper(self, rng):
        ts = EncoderStack(tiny("two_stream"), 0)
        batch = tiny_batch(rng, k=3)
        img, txt = ts.encode_two_stream(batch)
        seq = TokenSequence(batch.ids[0], batch.segments[0], batch.attn[0])
        i1, t1 = encode_two_stream(ts, batch.regions[0], seq)
        np.testing.assert_allclose(i1.data, img.data[0], atol=1e-12)
        np.testing.assert_allclose(t1.data, txt.data[0], atol=1e-12)


class TestPooling:
    def test_product_with_ones_image_token_returns_text_token(self, rng):
        ts = EncoderStack(tiny("two_stream"), 0)
        txt = Tensor(rng.normal(size=(7, 8)))
        img = Tensor(np.vstack([np.ones(8), rng.normal(size=(2, 8))]))
        assert np.array_equal(pool(ts, (img, txt)).data, txt.data[0])

    def test_product_absorbs_zero(self, rng):
        ts = EncoderStack(tiny("two_stream"), 0)
        txt = Tensor(rng.normal(size=(7, 8)))
        img = Tensor(np.zeros((3, 8)))
        assert np.array_equal(pool(ts, (img, txt)).data, np.zeros(8))

    def test_cls_is_row_zero(self, rng):
        uni = EncoderStack(tiny(), 0)
        h = Tensor(rng.normal(size=(7, 8)))
        assert np.array_equal(pool(uni, h).data, h.data[0])

    def test_product_pool_on_batch_uses_first_positions(self, rng):
        ts = EncoderStack(tiny("two_stream"), 0)
        batch = tiny_batch(rng, k=3)
        img, txt = ts.encode_two_stream(batch)
        np.testing.assert_array_equal(ts.pool(batch).data, img.data[:, 0] * txt.data[:, 0])


class TestMultimodalHead:
    def test_zero_final_layer_gives_half(self, rng):
        ts = EncoderStack(tiny("two_stream"), 0)
        ts["head.w2"].data[:] = 0.0
        logit = classify_multimodal(ts, Tensor(rng.normal(size=8)))
        assert ag.sigmoid(logit).item() == 0.5

    def test_deterministic(self, rng):
        ts = EncoderStack(tiny("two_stream"), 0)
        p = Tensor(rng.normal(size=8))
        assert classify_multimodal(ts, p).item() == classify_multimodal(ts, p).item()

    def test_head_grad_check(self, rng):
        ts = EncoderStack(tiny("two_stream"), 0)
        pooled = Tensor(rng.normal(size=(4, 8)))
        y = np.array([0, 1, 1, 0])
        f = lambda _: ag.bce_with_logits(ts.classify_pooled(pooled), y)
        assert grad_check(f, [pooled] + [ts[n] for n in ts.head_names()]) <= TOL


class TestDropout:
    def test_eval_mode_is_deterministic_and_train_mode_seeded(self, rng):
        stack = EncoderStack(tiny(dropout=0.3), 0)
        batch = tiny_batch(rng)
        a = stack.logits(batch).data
        assert np.array_equal(a, stack.logits(batch).data)
        stack.train(np.random.default_rng(1))
        b = stack.logits(batch).data
        stack.train(np.random.default_rng(1))
        assert np.array_equal(b, stack.logits(batch).data)
        assert not np.array_equal(a, b)
        stack.eval()
        assert np.array_equal(a, stack.logits(batch).data)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        stack = EncoderStack(tiny("two_stream"), 7)
        digest = save_checkpoint(stack, tmp_path / "m.ckpt")
        assert (tmp_path / "m.ckpt").read_bytes()[:4] == b"CESM"
        back = load_checkpoint(tmp_path / "m.ckpt", expect=stack.cfg)
        assert back.checksum() == stack.checksum()
        assert len(digest) == 64

    def test_rejects_config_mismatch(self, tmp_path):
        save_checkpoint(EncoderStack(tiny(), 0), tmp_path / "m.ckpt")
        with pytest.raises(ValueError, match="does not match"):
            load_checkpoint(tmp_path / "m.ckpt", expect=tiny(hidden=12))

    def test_detects_corruption(self, tmp_path):
        save_checkpoint(EncoderStack(tiny(), 0), tmp_path / "m.ckpt")
        raw = bytearray((tmp_path / "m.ckpt").read_bytes())
        raw[-100] ^= 0xFF
        (tmp_path / "m.ckpt").write_bytes(bytes(raw))
        with pytest.raises(ValueError, match="checksum"):
            load_checkpoint(tmp_path / "m.ckpt")

    def test_load_backbone_leaves_head(self):
        a, b = EncoderStack(tiny(), 0), EncoderStack(tiny(), 1)
        head_before = b.checksum(b.head_names())
        b.load_backbone(a)
        assert b.checksum(b.backbone_names()) == a.checksum(a.backbone_names())
        assert b.checksum(b.head_names()) == head_before

import dataclasses
import json
import math

import numpy as np
import pytest

from ces import autograd as ag
from ces.captioner import OracleConfig, OracleProvider, enrich
from ces.data import CorpusSpec, generate_corpus
from ces.models import EncoderStack
from ces.training import (
    PLANS,
    AdamState,
    Featurizer,
    PretrainCache,
    RunSettings,
    TrainConfig,
    VariantPlan,
    adam_step,
    corpus_vocab,
    default_warmup,
    epoch_batches,
    finetune,
    lr_schedule,
    mlm_accuracy,
    pretrain_inputs,
    pretrain_mlm,
    run_ablation_suite,
    run_multimodal,
    run_unimodal,
)

TINY = RunSettings(layers=1, hidden=16, heads=2, ff=32, finetune_updates=40, pretrain_updates=30, batch_size=16)


@pytest.fixture(scope="module")
def small_corpus(tmp_path_factory):
    raw = generate_corpus(CorpusSpec(n_train=120, n_val=40, n_test=40))
    cache = tmp_path_factory.mktemp("captions") / "c.jsonl"
    provider = OracleProvider(OracleConfig())
    return {split: enrich(samples, provider, cache) for split, samples in raw.items()}


class TestSchedule:
    def test_full_scale_landmarks(self):
        cfg = TrainConfig(total_updates=22000, peak_lr=5e-5)
        assert cfg.warmup_steps == 2000
        assert lr_schedule(0, cfg) == 0.0
        assert lr_schedule(2000, cfg) == 5e-5
        assert lr_schedule(2000 + 10000, cfg) == pytest.approx(2.5e-5, rel=1e-12)
        assert lr_schedule(22000, cfg) <= 1e-12 * 5e-5

    def test_desk_warmup(self):
        assert default_warmup(2000) == 200
        assert default_warmup(1500) == 150
        assert default_warmup(7) == 1

    def test_out_of_range(self):
        cfg = TrainConfig(total_updates=100)
        with pytest.raises(ValueError):
            lr_schedule(-1, cfg)
        with pytest.raises(ValueError):
            lr_schedule(101, cfg)

    def test_shape(self):
        cfg = TrainConfig(total_updates=500, peak_lr=1.0)
        lrs = np.array([lr_schedule(s, cfg) for s in range(501)])
        assert np.all(lrs >= 0)
        assert int(np.argmax(lrs)) == cfg.warmup_steps and np.sum(lrs == lrs.max()) == 1
        assert np.all(np.diff(lrs[: cfg.warmup_steps + 1]) > 0)
        assert np.all(np.diff(lrs[cfg.warmup_steps :]) < 0)
        assert np.max(np.abs(np.diff(lrs))) <= 1.0 / cfg.warmup_steps + 1e-12

    def test_config_invariants(self):
        with pytest.raises(ValueError):
            TrainConfig(total_updates=10, warmup_steps=11)
        with pytest.raises(ValueError):
            TrainConfig(peak_lr=0.0)
        with pytest.raises(ValueError):
            TrainConfig(variant="nope")
        with pytest.raises(ValueError):
            TrainConfig(phase="pretrain")


def _scalar_adam(x, lr, steps, b1=0.9, b2=0.999, eps=1e-8):
    """Reference trajectory written out for a single float."""
    m = v = 0.0
    out = []
    for t in range(1, steps + 1):
        g = 2.0 * x
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x = x - lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
        out.append(x)
    return out


class TestAdam:
    def test_first_step_is_signed_lr(self):
        cfg = TrainConfig(weight_decay=0.0)
        p = {"w": np.zeros(4)}
        adam_step(p, {"w": np.array([3.0, -0.2, 1e-3, -50.0])}, AdamState(), 1, cfg, 0.01)
        np.testing.assert_allclose(p["w"], -0.01 * np.array([1, -1, 1, -1]), rtol=1e-4)

    def test_zero_grad_is_fixed_point(self):
        cfg = TrainConfig(weight_decay=0.0)
        p = {"w": np.array([1.0, -2.0])}
        state = AdamState()
        for t in range(1, 4):
            adam_step(p, {"w": np.zeros(2)}, state, t, cfg, 0.1)
        assert np.array_equal(p["w"], [1.0, -2.0])

    def test_quadratic_matches_scalar_oracle(self):
        cfg = TrainConfig(weight_decay=0.0)
        p = {"x": np.array([1.0])}
        state = AdamState()
        traj = []
        for t in range(1, 11):
            adam_step(p, {"x": 2.0 * p["x"]}, state, t, cfg, 0.1)
            traj.append(p["x"][0])
        np.testing.assert_allclose(traj, _scalar_adam(1.0, 0.1, 10), rtol=0, atol=1e-10)
        assert np.all(np.diff(np.abs([1.0] + traj)) < 0)

    def test_decoupled_weight_decay(self):
        cfg = TrainConfig(weight_decay=0.1)
        p = {"w": np.array([2.0])}
        adam_step(p, {"w": np.zeros(1)}, AdamState(), 1, cfg, 0.5)
        assert p["w"][0] == pytest.approx(2.0 - 0.5 * 0.1 * 2.0)

    def test_non_finite_gradient_names_parameter(self):
        with pytest.raises(FloatingPointError, match="blk0.ff_w1"):
            adam_step({"blk0.ff_w1": np.zeros(2)}, {"blk0.ff_w1": np.array([1.0, np.nan])}, AdamState(), 1, TrainConfig(), 0.1)

    def test_step_counts_from_one(self):
        with pytest.raises(ValueError):
            adam_step({}, {}, AdamState(), 0, TrainConfig(), 0.1)


class TestBatching:
    def test_epochs_are_seeded_permutations(self):
        got = list(epoch_batches(10, 5, seed=3, total=6))
        assert [e for e, _ in got] == [0, 0, 1, 1, 2, 2]
        for epoch in range(3):
            idx = np.concatenate([i for e, i in got if e == epoch])
            assert sorted(idx) == list(range(10))
        again = list(epoch_batches(10, 5, seed=3, total=6))
        assert all(np.array_equal(a[1], b[1]) for a, b in zip(got, again))
        other = list(epoch_batches(10, 5, seed=4, total=6))
        assert not all(np.array_equal(a[1], b[1]) for a, b in zip(got, other))

    def test_partial_batches_dropped(self):
        assert all(len(i) == 4 for _, i in epoch_batches(10, 4, 0, 7))


class TestPlans:
    def test_exact_mappings(self):
        assert PLANS == {
            "baseline": VariantPlan("none", "c_only"),
            "ces_full": VariantPlan("pairs", "pairs"),
            "abl_i": VariantPlan("none", "pairs"),
            "abl_ii": VariantPlan("c_only", "c_only"),
            "abl_iii": VariantPlan("c_only", "pairs"),
        }

    def test_after_pretrain_lr_is_a_tenth(self):
        s = RunSettings()
        assert s.finetune_config(0, "ces_full", True).peak_lr == pytest.approx(s.finetune_config(0, "baseline", False).peak_lr / 10)


class TestLosses:
    def test_bce_at_zero_head_is_ln2(self, small_corpus):
        vocab = corpus_vocab(small_corpus)
        feat = Featurizer(vocab, 48)
        stack = EncoderStack(TINY.model_config(len(vocab)), 0)
        stack.zero_head()
        enc = feat.encode(small_corpus["train"][:16], with_caption=True)
        loss = ag.bce_with_logits(stack.logits(enc.batch(np.arange(16))), enc.labels[:16]).item()
        assert loss == pytest.approx(math.log(2), abs=1e-15)

    def test_constant_labels_learned_within_200_steps(self, small_corpus):
        const = {k: [dataclasses.replace(s, label=1) for s in v] for k, v in small_corpus.items()}
        vocab = corpus_vocab(const)
        stack = EncoderStack(TINY.model_config(len(vocab)), 0)
        cfg = TrainConfig(total_updates=200, batch_size=16)
        res = finetune(stack, {"train": const["train"]}, cfg, PLANS["baseline"], Featurizer(vocab, 48))
        assert np.mean(res.losses[-20:]) < math.log(2)

    def test_initial_mlm_loss_near_log_vocab(self, small_corpus):
        vocab = corpus_vocab(small_corpus)
        feat = Featurizer(vocab, 48)
        stack = EncoderStack(TINY.model_config(len(vocab)), 0)
        cfg = TrainConfig.pretrain_default(total_updates=1, batch_size=32)
        res = pretrain_mlm(stack, pretrain_inputs(small_corpus, "pairs", feat), cfg)
        assert abs(res.losses[0] - math.log(len(vocab))) / math.log(len(vocab)) <= 0.15


class TestPretrain:
    def test_loss_decreases_and_beats_unigram(self, small_corpus):
        vocab = corpus_vocab(small_corpus)
        feat = Featurizer(vocab, 48)
        for seed in (0, 1):
            stack = EncoderStack(RunSettings(layers=1).model_config(len(vocab)), seed)
            cfg = TrainConfig.pretrain_default(total_updates=300, batch_size=16, peak_lr=1e-3, seed=seed)
            res = pretrain_mlm(stack, pretrain_inputs(small_corpus, "pairs", feat), cfg)
            assert np.nanmean(res.losses[-50:]) < np.nanmean(res.losses[:50])
        model_acc, unigram_acc = mlm_accuracy(res.stack, feat.encode(small_corpus["val"], True), seed=5)
        assert model_acc > unigram_acc

    def test_multimodal_stack_rejected(self, small_corpus):
        vocab = corpus_vocab(small_corpus)
        stack = EncoderStack(TINY.model_config(len(vocab), "single_stream"), 0)
        with pytest.raises(ValueError, match="unimodal"):
            pretrain_mlm(stack, pretrain_inputs(small_corpus, "pairs", Featurizer(vocab)), TrainConfig.pretrain_default())

    def test_empty_input(self, small_corpus):
        vocab = corpus_vocab(small_corpus)
        feat = Featurizer(vocab)
        stack = EncoderStack(TINY.model_config(len(vocab)), 0)
        data = feat.encode(small_corpus["train"][:1], False)
        data.ids = data.ids[:0]
        with pytest.raises(ValueError, match="no pre-training input"):
            pretrain_mlm(stack, data, TrainConfig.pretrain_default())


class TestFinetune:
    def test_multimodal_with_pretrain_plan_is_an_error(self, small_corpus):
        vocab = corpus_vocab(small_corpus)
        stack = EncoderStack(TINY.model_config(len(vocab), "two_stream"), 0)
        with pytest.raises(ValueError, match="no continued pre-training"):
            finetune(stack, small_corpus, TrainConfig(), PLANS["ces_full"], Featurizer(vocab))

    def test_pairs_need_captions(self, small_corpus):
        raw = generate_corpus(CorpusSpec(n_train=20, n_val=10, n_test=10))
        vocab = corpus_vocab(small_corpus)
        stack = EncoderStack(TINY.model_config(len(vocab)), 0)
        with pytest.raises(ValueError, match="not caption-enriched"):
            finetune(stack, raw, TrainConfig(total_updates=2), PLANS["abl_i"], Featurizer(vocab))

    def test_identical_runs_are_identical(self, small_corpus):
        a = run_unimodal(small_corpus, "ces_full", 3, TINY)
        b = run_unimodal(small_corpus, "ces_full", 3, TINY)
        assert a.stack.checksum() == b.stack.checksum()
        assert a.reports["val"].auroc == b.reports["val"].auroc
        assert a.losses == b.losses

    def test_phase_coupling(self, small_corpus):
        cache = PretrainCache()
        run_unimodal(small_corpus, "ces_full", 0, TINY, cache=cache)
        (backbone,) = cache._store.values()
        vocab = corpus_vocab(small_corpus)
        fresh = EncoderStack(TINY.model_config(len(vocab)), 0)
        fresh.load_backbone(backbone)
        names = fresh.backbone_names()
        assert fresh.checksum(names) == backbone.checksum(names)
        assert fresh.checksum(fresh.head_names()) == EncoderStack(TINY.model_config(len(vocab)), 0).checksum(fresh.head_names())

    def test_reports_cover_val_and_test(self, small_corpus):
        res = run_multimodal(small_corpus, "two_stream", True, 0, TINY)
        assert set(res.reports) == {"val", "test"}
        assert res.reports["val"].variant == "two_stream+ces"
        assert res.reports["val"].n == 40

    def test_run_log_records_losses(self, small_corpus, tmp_path):
        run_unimodal(small_corpus, "abl_ii", 0, TINY, log_path=tmp_path / "log.jsonl")
        rows = [json.loads(x) for x in (tmp_path / "log.jsonl").read_text().splitlines()]
        assert [r["phase"] for r in rows] == ["pretrain_mlm", "finetune"]
        assert len(rows[0]["losses"]) == TINY.pretrain_updates
        assert len(rows[1]["losses"]) == TINY.finetune_updates


class TestAblationSuite:
    def test_five_rows_with_std(self, small_corpus):
        rows, reports = run_ablation_suite(small_corpus, TINY, seeds=range(2))
        assert [r["variant"] for r in rows] == ["baseline", "ces_full", "abl_i", "abl_ii", "abl_iii"]
        assert all(r["val_seeds"] == 2 and len(r["val_auroc"]) == 2 and len(r["test_auroc"]) == 2 for r in rows)
        assert len(reports) == 5 * 2 * 2

"""Dual-phase CES training: MLM continued pre-training, then BCE fine-tuning.

Desk-scale budgets stand in for the original 22k-update runs. The learning
rate after a pre-training phase stays a tenth of the from-scratch rate, and
warmup is ``min(2000, ceil(0.1 * total))`` so full-scale settings reproduce the
original 2000-step warmup.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autograd as ag
from .autograd import IGNORE_INDEX, Tensor
from .data import EnrichedSample, MemeSample, substream
from .metrics import EvalReport
from .models import Batch, EncoderConfig, EncoderStack
from .text import Vocab, apply_mlm_mask, build_vocab, encode_pair, special_mask

log = logging.getLogger(__name__)

FULL_SCALE_WARMUP = 2000
FULL_SCALE_LR = 5e-5
FULL_SCALE_LR_AFTER_PRETRAIN = 5e-6
# from-scratch desk models need a larger step than pretrained BERT; the 1:10 ratio is kept
DESK_LR_SCALE = 20.0


@dataclass(frozen=True)
class VariantPlan:
    pretrain_input: str  # none | c_only | pairs
    finetune_input: str  # c_only | pairs


PLANS = {
    "baseline": VariantPlan("none", "c_only"),
    "ces_full": VariantPlan("pairs", "pairs"),
    "abl_i": VariantPlan("none", "pairs"),
    "abl_ii": VariantPlan("c_only", "c_only"),
    "abl_iii": VariantPlan("c_only", "pairs"),
}
VARIANTS = tuple(PLANS)


def default_warmup(total_updates: int) -> int:
    return min(FULL_SCALE_WARMUP, math.ceil(0.1 * total_updates))


@dataclass
class TrainConfig:
    phase: str = "finetune"
    total_updates: int = 2000
    warmup_steps: int | None = None
    peak_lr: float = FULL_SCALE_LR * DESK_LR_SCALE
    batch_size: int = 32
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    variant: str = "baseline"

    def __post_init__(self):
        if self.phase not in ("pretrain_mlm", "finetune"):
            raise ValueError(f"unknown phase {self.phase!r}")
        if self.warmup_steps is None:
            self.warmup_steps = default_warmup(self.total_updates)
        if self.total_updates < 1:
            raise ValueError("total_updates must be positive")
        if not 0 <= self.warmup_steps <= self.total_updates:
            raise ValueError(f"warmup_steps {self.warmup_steps} outside [0, {self.total_updates}]")
        if self.peak_lr <= 0:
            raise ValueError("peak_lr must be positive")
        if self.variant not in PLANS:
            raise ValueError(f"unknown variant {self.variant!r}")

    @classmethod
    def pretrain_default(cls, **kw) -> "TrainConfig":
        kw.setdefault("total_updates", 1500)
        return cls(phase="pretrain_mlm", **kw)

    @classmethod
    def finetune_default(cls, after_pretrain: bool, **kw) -> "TrainConfig":
        kw.setdefault("peak_lr", (FULL_SCALE_LR_AFTER_PRETRAIN if after_pretrain else FULL_SCALE_LR) * DESK_LR_SCALE)
        return cls(phase="finetune", **kw)


# -- optimisation ------------------------------------------------------------------


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``peak_lr`` then half-cosine decay to zero at ``total_updates``."""
    total, warm, peak = cfg.total_updates, cfg.warmup_steps, cfg.peak_lr
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    if step < warm:
        return peak * step / warm
    if total == warm:
        return peak
    return peak * 0.5 * (1.0 + math.cos(math.pi * (step - warm) / (total - warm)))


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    step: int,
    cfg: TrainConfig,
    lr: float,
) -> None:
    """One in-place AdamW update (decoupled weight decay), ``step`` counting from 1."""
    if step < 1:
        raise ValueError("adam step counts from 1")
    b1, b2 = cfg.beta1, cfg.beta2
    c1, c2 = 1.0 - b1**step, 1.0 - b2**step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        if cfg.weight_decay:
            update = update + cfg.weight_decay * p
        p -= lr * update


class Optimizer:
    """Adam state bound to a stack's parameters."""

    def __init__(self, stack: EncoderStack, cfg: TrainConfig, names: Sequence[str] | None = None):
        self.stack = stack
        self.cfg = cfg
        self.names = list(names) if names is not None else list(stack.params)
        self.state = AdamState()
        self.t = 0

    def step(self) -> float:
        self.t += 1
        lr = lr_schedule(self.t, self.cfg)
        params = {n: self.stack.params[n].data for n in self.names}
        grads = {n: self.stack.params[n].grad for n in self.names if self.stack.params[n].grad is not None}
        adam_step(params, grads, self.state, self.t, self.cfg, lr)
        for n in self.names:
            self.stack.params[n].grad = None
        return lr


def epoch_batches(n: int, batch_size: int, seed: int, total: int):
    """Yield (epoch, index array) for ``total`` batches; each epoch reshuffled by (seed, epoch)."""
    produced, epoch = 0, 0
    while produced < total:
        perm = substream(seed, "shuffle", epoch).permutation(n)
        for start in range(0, n, batch_size):
            idx = perm[start : start + batch_size]
            if len(idx) < batch_size and n >= batch_size:
                break
            yield epoch, idx
            produced += 1
            if produced >= total:
                return
        epoch += 1


# -- featurisation ---------------------------------------------------------------


@dataclass
class Featurizer:
    vocab: Vocab
    max_len: int = 48
    caption_first: bool = False

    def pair(self, s: MemeSample, with_caption: bool):
        if with_caption:
            if not isinstance(s, EnrichedSample):
                raise ValueError(f"sample {s.id} is not caption-enriched but the plan needs pairs")
            return (s.caption, s.text) if self.caption_first else (s.text, s.caption)
        return s.text, None

    def encode(self, samples: Sequence[MemeSample], with_caption: bool, with_regions: bool = False) -> "Encoded":
        seqs = [encode_pair(*self.pair(s, with_caption), self.vocab, self.max_len) for s in samples]
        regions = None
        if with_regions:
            missing = [s.id for s in samples if s.regions is None]
            if missing:
                raise ValueError(f"{len(missing)} samples lack region features (first: {missing[0]})")
            regions = np.stack([s.regions for s in samples])
        labels = np.array([-1 if s.label is None else s.label for s in samples], dtype=np.int64)
        return Encoded(
            ids=np.stack([q.ids for q in seqs]),
            segments=np.stack([q.segments for q in seqs]),
            attn=np.stack([q.attn_mask for q in seqs]),
            labels=labels,
            sample_ids=np.array([s.id for s in samples], dtype=np.int64),
            regions=regions,
        )


@dataclass
class Encoded:
    ids: np.ndarray
    segments: np.ndarray
    attn: np.ndarray
    labels: np.ndarray
    sample_ids: np.ndarray
    regions: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.ids)

    def batch(self, idx) -> Batch:
        r = None if self.regions is None else self.regions[idx]
        return Batch(self.ids[idx], self.segments[idx], self.attn[idx], r).trimmed()


def corpus_vocab(splits: dict[str, list[MemeSample]]) -> Vocab:
    """Vocabulary over training texts and captions."""
    lines = []
    for s in splits["train"]:
        lines.append(s.text)
        if isinstance(s, EnrichedSample):
            lines.append(s.caption)
    return build_vocab(lines, min_count=1)


# -- MLM pre-training ----------------------------------------------------------------


@dataclass
class PretrainResult:
    stack: EncoderStack
    losses: list[float]


def mask_rows(ids: np.ndarray, row_keys: np.ndarray, seed: int, epoch: int, vocab_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Mask each row with its own generator keyed by (seed, sample key, epoch)."""
    out = np.empty_like(ids)
    labels = np.empty_like(ids)
    for r, key in enumerate(row_keys):
        mb = apply_mlm_mask(ids[r], substream(seed, "mask", int(key), epoch), vocab_size)
        out[r], labels[r] = mb.ids, mb.mlm_labels
    return out, labels


def mlm_loss(stack: EncoderStack, batch: Batch, labels: np.ndarray) -> Tensor:
    """Cross-entropy over masked positions only."""
    hidden = stack.encode_text(batch)
    flat = labels.reshape(-1)
    rows = np.flatnonzero(flat != IGNORE_INDEX)
    h = ag.take(ag.reshape(hidden, (-1, stack.cfg.hidden)), rows)
    return ag.softmax_cross_entropy(stack.mlm_logits(h), flat[rows])


def pretrain_mlm(stack: EncoderStack, data: Encoded, cfg: TrainConfig, log_path: str | Path | None = None) -> PretrainResult:
    if stack.cfg.architecture != "unimodal":
        raise ValueError("continued MLM pre-training is only defined for unimodal stacks")
    if cfg.phase != "pretrain_mlm":
        raise ValueError(f"pretrain_mlm needs phase=pretrain_mlm, got {cfg.phase}")
    if len(data) == 0:
        raise ValueError("no pre-training input")
    opt = Optimizer(stack, cfg, [n for n in stack.params if not n.startswith("head.")])
    losses: list[float] = []
    stack.train(substream(cfg.seed, "dropout", 1))
    V = stack.cfg.vocab_size
    with ag.checked(False):
        for epoch, idx in epoch_batches(len(data), cfg.batch_size, cfg.seed, cfg.total_updates):
            ids, labels = mask_rows(data.ids[idx], data.sample_ids[idx], cfg.seed, epoch, V)
            batch = Batch(ids, data.segments[idx], data.attn[idx]).trimmed()
            labels = labels[:, : batch.ids.shape[1]]
            if not np.any(labels != IGNORE_INDEX):
                opt.step()
                losses.append(float("nan"))
                continue
            loss = mlm_loss(stack, batch, labels)
            loss.backward()
            opt.step()
            losses.append(loss.item())
    stack.eval()
    _append_log(log_path, {"phase": "pretrain_mlm", "seed": cfg.seed, "variant": cfg.variant, "losses": losses})
    return PretrainResult(stack, losses)


def mlm_accuracy(stack: EncoderStack, data: Encoded, seed: int = 0) -> tuple[float, float]:
    """(model, unigram-baseline) accuracy at masked positions of a held-out set.

    The unigram baseline always predicts the most frequent content token of
    ``data`` itself, which is an optimistic baseline.
    """
    V = stack.cfg.vocab_size
    ids, labels = mask_rows(data.ids, data.sample_ids, seed, 0, V)
    content = data.ids[~special_mask(data.ids)]
    top = np.bincount(content, minlength=V).argmax()
    stack.eval()
    correct = total = 0
    with ag.checked(False):
        for start in range(0, len(data), 256):
            sl = slice(start, start + 256)
            batch = Batch(ids[sl], data.segments[sl], data.attn[sl]).trimmed()
            lab = labels[sl, : batch.ids.shape[1]]
            logits = stack.mlm_logits(stack.encode_text(batch)).data
            sel = lab != IGNORE_INDEX
            correct += int((logits.argmax(-1)[sel] == lab[sel]).sum())
            total += int(sel.sum())
    hit_uni = float(np.mean(labels[labels != IGNORE_INDEX] == top))
    return correct / total, hit_uni


# -- fine-tuning ---------------------------------------------------------------------


@dataclass
class FinetuneResult:
    stack: EncoderStack
    reports: dict[str, EvalReport]
    losses: list[float]


def predict(stack: EncoderStack, data: Encoded, batch_size: int = 256) -> np.ndarray:
    stack.eval()
    out = []
    with ag.checked(False):
        for start in range(0, len(data), batch_size):
            logits = stack.logits(data.batch(slice(start, start + batch_size))).data
            out.append(np.exp(-np.logaddexp(0.0, -logits)))
    return np.concatenate(out)


def finetune(
    stack: EncoderStack,
    corpus: dict[str, list[MemeSample]],
    cfg: TrainConfig,
    plan: VariantPlan,
    featurizer: Featurizer,
    run_id: str = "",
    variant_tag: str | None = None,
    log_path: str | Path | None = None,
) -> FinetuneResult:
    """Fine-tune with sigmoid BCE on train; report on every other labelled split."""
    if stack.cfg.multimodal and plan.pretrain_input != "none":
        raise ValueError("multimodal backbones are fine-tuned only; no continued pre-training phase")
    if cfg.phase != "finetune":
        raise ValueError(f"finetune needs phase=finetune, got {cfg.phase}")
    pairs = plan.finetune_input == "pairs"
    mm = stack.cfg.multimodal
    train = featurizer.encode(corpus["train"], pairs, with_regions=mm)
    if np.any(train.labels < 0):
        raise ValueError("training samples must be labelled")

    opt = Optimizer(stack, cfg)
    losses: list[float] = []
    stack.train(substream(cfg.seed, "dropout", 2))
    with ag.checked(False):
        for _, idx in epoch_batches(len(train), cfg.batch_size, cfg.seed, cfg.total_updates):
            loss = ag.bce_with_logits(stack.logits(train.batch(idx)), train.labels[idx])
            loss.backward()
            opt.step()
            losses.append(loss.item())
    stack.eval()

    tag = variant_tag or cfg.variant
    run_id = run_id or f"{tag}-s{cfg.seed}"
    reports = {}
    for split in ("val", "test"):
        samples = corpus.get(split) or []
        if not samples or any(s.label is None for s in samples):
            continue
        enc = featurizer.encode(samples, pairs, with_regions=mm)
        scores = predict(stack, enc)
        reports[split] = EvalReport.from_scores(run_id, split, enc.sample_ids, scores, enc.labels, cfg.seed, tag)
    _append_log(
        log_path,
        {"phase": "finetune", "run_id": run_id, "seed": cfg.seed, "variant": tag, "losses": losses,
         "metrics": {k: r.to_dict() for k, r in reports.items()}},
    )
    return FinetuneResult(stack, reports, losses)


def _append_log(path, record: dict) -> None:
    if path is None:
        return
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(record) + "\n")


# -- end-to-end runs -------------------------------------------------------------------


@dataclass
class RunSettings:
    """Everything besides the corpus and seed that determines a run."""

    layers: int = 2
    hidden: int = 64
    heads: int = 4
    ff: int = 128
    max_len: int = 48
    dropout: float = 0.1
    finetune_updates: int = 2000
    pretrain_updates: int = 1500
    batch_size: int = 32
    lr_scale: float = DESK_LR_SCALE
    pretrain_lr: float = FULL_SCALE_LR * DESK_LR_SCALE
    weight_decay: float = 0.01
    caption_first: bool = False

    def model_config(self, vocab_size: int, architecture: str = "unimodal", max_regions: int = 4, region_dim: int = 16) -> EncoderConfig:
        return EncoderConfig(
            vocab_size=vocab_size,
            layers=self.layers,
            hidden=self.hidden,
            heads=self.heads,
            ff=self.ff,
            max_len=self.max_len,
            max_regions=max_regions,
            region_dim=region_dim,
            dropout=self.dropout,
            architecture=architecture,
            pooling="product" if architecture == "two_stream" else "cls",
        )

    def pretrain_config(self, seed: int, variant: str) -> TrainConfig:
        return TrainConfig.pretrain_default(
            total_updates=self.pretrain_updates, peak_lr=self.pretrain_lr, batch_size=self.batch_size,
            weight_decay=self.weight_decay, seed=seed, variant=variant,
        )

    def finetune_config(self, seed: int, variant: str, after_pretrain: bool) -> TrainConfig:
        base = FULL_SCALE_LR_AFTER_PRETRAIN if after_pretrain else FULL_SCALE_LR
        return TrainConfig.finetune_default(
            after_pretrain, total_updates=self.finetune_updates, peak_lr=base * self.lr_scale,
            batch_size=self.batch_size, weight_decay=self.weight_decay, seed=seed, variant=variant,
        )

    def to_dict(self) -> dict:
        return asdict(self)


class PretrainCache:
    """Memoises pre-trained backbones by (input kind, seed, corpus key)."""

    def __init__(self):
        self._store: dict[tuple, EncoderStack] = {}

    def get(self, key, build: Callable[[], EncoderStack]) -> EncoderStack:
        if key not in self._store:
            self._store[key] = build()
        return self._store[key]


def pretrain_inputs(corpus: dict[str, list[MemeSample]], kind: str, featurizer: Featurizer) -> Encoded:
    """Unlabelled train-split text (``c_only``) or packed (c, c*) pairs (``pairs``)."""
    return featurizer.encode(corpus["train"], with_caption=(kind == "pairs"))


def run_unimodal(
    corpus: dict[str, list[MemeSample]],
    variant: str,
    seed: int,
    settings: RunSettings,
    vocab: Vocab | None = None,
    cache: PretrainCache | None = None,
    corpus_key: str = "",
    log_path: str | Path | None = None,
) -> FinetuneResult:
    plan = PLANS[variant]
    vocab = vocab or corpus_vocab(corpus)
    feat = Featurizer(vocab, settings.max_len, settings.caption_first)
    mcfg = settings.model_config(len(vocab))
    stack = EncoderStack(mcfg, seed=seed)
    pretrained = plan.pretrain_input != "none"
    if pretrained:
        def build():
            fresh = EncoderStack(mcfg, seed=seed)
            data = pretrain_inputs(corpus, plan.pretrain_input, feat)
            return pretrain_mlm(fresh, data, settings.pretrain_config(seed, variant), log_path).stack

        key = (plan.pretrain_input, seed, corpus_key, json.dumps(settings.to_dict(), sort_keys=True))
        backbone = cache.get(key, build) if cache is not None else build()
        stack.load_backbone(backbone)
    cfg = settings.finetune_config(seed, variant, pretrained)
    return finetune(stack, corpus, cfg, plan, feat, run_id=f"{variant}-s{seed}", log_path=log_path)


def run_multimodal(
    corpus: dict[str, list[MemeSample]],
    architecture: str,
    with_captions: bool,
    seed: int,
    settings: RunSettings,
    vocab: Vocab | None = None,
    log_path: str | Path | None = None,
) -> FinetuneResult:
    vocab = vocab or corpus_vocab(corpus)
    k, d = corpus["train"][0].regions.shape
    mcfg = settings.model_config(len(vocab), architecture, max_regions=k, region_dim=d)
    stack = EncoderStack(mcfg, seed=seed)
    plan = VariantPlan("none", "pairs" if with_captions else "c_only")
    tag = f"{architecture}{'+ces' if with_captions else ''}"
    variant = "abl_i" if with_captions else "baseline"
    cfg = settings.finetune_config(seed, variant, after_pretrain=False)
    feat = Featurizer(vocab, settings.max_len, settings.caption_first)
    return finetune(stack, corpus, cfg, plan, feat, run_id=f"{tag}-s{seed}", variant_tag=tag, log_path=log_path)


def run_ablation_suite(
    corpus: dict[str, list[MemeSample]],
    settings: RunSettings,
    seeds: Sequence[int] = range(5),
    variants: Sequence[str] = VARIANTS,
    cache: PretrainCache | None = None,
    log_path: str | Path | None = None,
) -> tuple[list[dict], list[EvalReport]]:
    """Every variant x seed; returns aggregated rows (mean/std per split) and raw reports."""
    from .metrics import aggregate

    cache = cache or PretrainCache()
    vocab = corpus_vocab(corpus)
    reports: list[EvalReport] = []
    for variant in variants:
        for seed in seeds:
            t0 = time.time()
            res = run_unimodal(corpus, variant, seed, settings, vocab, cache, log_path=log_path)
            reports.extend(res.reports.values())
            log.info("%s seed %d: val AUROC %.4f (%.0fs)", variant, seed, res.reports["val"].auroc, time.time() - t0)
    return aggregate(reports, order=list(variants)), reports

"""Multi-seed experiment grid shared by the acceptance suite and ad-hoc scripts.

Each cell is an ordinary run from :mod:`ces.training`; this module only wires
corpora, caption noise levels and fusion together and keeps the results.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .captioner import OracleConfig, OracleProvider, enrich
from .data import CorpusSpec, MemeSample, generate_corpus
from .fusion import FusionConfig, extract_embeddings, fuse_predict, train_fusion
from .metrics import EvalReport
from .training import (
    PLANS,
    VARIANTS,
    Featurizer,
    FinetuneResult,
    PretrainCache,
    RunSettings,
    corpus_vocab,
    run_multimodal,
    run_unimodal,
)

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")


def enriched_corpus(spec: CorpusSpec, noise_rate: float, cache_dir: str | Path, oracle_seed: int = 11) -> dict[str, list[MemeSample]]:
    """Generate ``spec`` and caption every split with the oracle at ``noise_rate``."""
    raw = generate_corpus(spec)
    provider = OracleProvider(OracleConfig(noise_rate=noise_rate, seed=oracle_seed))
    cache = Path(cache_dir) / f"captions-rho{noise_rate:g}-s{oracle_seed}.jsonl"
    return {split: enrich(raw[split], provider, cache) for split in SPLITS}


def fuse_pair(
    strong: FinetuneResult,
    weak: FinetuneResult,
    corpus: dict[str, list[MemeSample]],
    settings: RunSettings,
    seed: int,
    strong_pairs: bool = True,
    weak_pairs: bool = True,
    cfg: FusionConfig | None = None,
) -> dict[str, EvalReport]:
    """Late fusion of two fine-tuned stacks: train on train-split embeddings, report val/test."""
    feat = Featurizer(corpus_vocab(corpus), settings.max_len, settings.caption_first)
    dumps = {
        (role, split): extract_embeddings(res.stack, corpus[split], feat, pairs)
        for role, res, pairs in (("strong", strong, strong_pairs), ("weak", weak, weak_pairs))
        for split in SPLITS
    }
    labels = {s.id: s.label for split in SPLITS for s in corpus[split]}
    cfg = cfg or FusionConfig(seed=seed)
    mlp = train_fusion(dumps["strong", "train"], dumps["weak", "train"], labels, cfg)
    tag = "fusion"
    out = {}
    for split in ("val", "test"):
        a, b = dumps["strong", split], dumps["weak", split]
        out[split] = EvalReport.from_scores(f"{tag}-s{seed}", split, a.ids, fuse_predict(mlp, a, b),
                                            [labels[int(i)] for i in a.ids], seed, tag)
    return out


def uses_captions(cell: str) -> bool:
    """Whether a cell fine-tunes on (c, c*) pairs."""
    return PLANS[cell].finetune_input == "pairs" if cell in PLANS else cell.endswith("+ces")


@dataclass
class Grid:
    """Validation/test AUROC per (cell name, seed); cells are run lazily and memoised."""

    settings: RunSettings = field(default_factory=RunSettings)
    spec: CorpusSpec = field(default_factory=CorpusSpec)
    seeds: Sequence[int] = tuple(range(5))
    cache_dir: Path = Path(".")
    keep_stacks: Sequence[str] = ("ces_full", "two_stream+ces")
    results: dict[tuple[str, int], dict[str, EvalReport]] = field(default_factory=dict)
    seconds: dict[tuple[str, int], float] = field(default_factory=dict)
    _corpora: dict[float, dict] = field(default_factory=dict)
    _runs: dict[tuple[str, int], FinetuneResult] = field(default_factory=dict)
    _pretrain: dict[float, PretrainCache] = field(default_factory=dict)

    def corpus(self, rho: float = 0.0) -> dict[str, list[MemeSample]]:
        if rho not in self._corpora:
            self._corpora[rho] = enriched_corpus(self.spec, rho, self.cache_dir)
        return self._corpora[rho]

    def run(self, cell: str, seed: int, rho: float = 0.0) -> dict[str, EvalReport]:
        """``cell`` is an ablation variant or ``<architecture>[+ces]``."""
        key = (cell if rho == 0.0 else f"{cell}@rho{rho:g}", seed)
        if key in self.results:
            return self.results[key]
        corpus = self.corpus(rho)
        t0 = time.time()
        if cell in VARIANTS:
            cache = self._pretrain.setdefault(rho, PretrainCache())
            res = run_unimodal(corpus, cell, seed, self.settings, cache=cache, corpus_key=f"rho{rho:g}")
        else:
            arch, _, suffix = cell.partition("+")
            res = run_multimodal(corpus, arch, suffix == "ces", seed, self.settings)
        self.seconds[key] = time.time() - t0
        log.info("%s seed %d: val %.4f (%.0fs)", key[0], seed, res.reports["val"].auroc, self.seconds[key])
        if cell in self.keep_stacks and rho == 0.0:
            self._runs[key] = res
        self.results[key] = res.reports
        return res.reports

    def fused(self, strong: str, weak: str, seed: int) -> dict[str, EvalReport]:
        key = (f"fusion({strong}+{weak})", seed)
        if key not in self.results:
            self.run(strong, seed)
            self.run(weak, seed)
            self.results[key] = fuse_pair(self._runs[(strong, seed)], self._runs[(weak, seed)], self.corpus(), self.settings, seed,
                                          strong_pairs=uses_captions(strong), weak_pairs=uses_captions(weak))
        return self.results[key]

    def val(self, cell: str, rho: float = 0.0) -> np.ndarray:
        return np.array([self.run(cell, s, rho)["val"].auroc for s in self.seeds])

    def fused_val(self, strong: str, weak: str) -> np.ndarray:
        return np.array([self.fused(strong, weak, s)["val"].auroc for s in self.seeds])

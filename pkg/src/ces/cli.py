"""``ces`` command line: one subcommand per pipeline stage.

Artifacts live under ``--out`` (default ``runs``)::

    corpus/      train/val/test.jsonl, diagnostics.jsonl, regions.bin, img/, manifest.json
    enriched/    the same splits with a caption field, captions.jsonl cache, manifest.json
    pretrain/    <input>-s<seed>/backbone.ckpt
    runs/        <variant>-s<seed>/model.ckpt, vocab.txt, reports.jsonl, log.jsonl, manifest.json
    fusion/      s<seed>/*.cese dumps, reports.jsonl, manifest.json
    tables/      ablation / report / fusion CSV + markdown

Exit codes: 0 success, 2 configuration or usage error, 3 caption provider failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .captioner import CaptionError, EnrichError, HttpProvider, OracleConfig, OracleProvider, enrich
from .data import SPLITS, CorpusSpec, EnrichedSample, corpus_hash, generate_corpus, load_corpus, save_corpus
from .fusion import FusionConfig, extract_embeddings, fuse_predict, train_fusion
from .metrics import EvalReport, emit_report
from .models import EncoderStack, load_checkpoint
from .text import Vocab
from .training import (
    PLANS,
    VARIANTS,
    Featurizer,
    RunSettings,
    VariantPlan,
    corpus_vocab,
    finetune,
    predict,
    pretrain_inputs,
    pretrain_mlm,
)

log = logging.getLogger("ces")

EXIT_OK, EXIT_USAGE, EXIT_PROVIDER = 0, 2, 3
MULTIMODAL_VARIANTS = ("single_stream", "single_stream+ces", "two_stream", "two_stream+ces")
ALL_VARIANTS = VARIANTS + MULTIMODAL_VARIANTS


class UsageError(Exception):
    """Bad configuration, flags or missing upstream artifacts (exit code 2)."""


# -- configuration ---------------------------------------------------------------------


@dataclass
class EnrichSettings:
    provider: str = "oracle"  # oracle | http
    noise_rate: float = 0.0
    oracle_seed: int = 11
    endpoint: str | None = None
    timeout: float = 10.0
    attempts: int = 3
    backoff: float = 0.5


@dataclass
class FuseSettings:
    strong: str = "two_stream+ces"
    weak: str = "ces_full"
    hidden: int | None = None
    total_updates: int = 1000
    peak_lr: float = 1e-3


@dataclass
class Config:
    seed: int = 0
    seeds: int = 1
    variant: str = "ces_full"
    baseline: str = "baseline"
    jobs: int = 1
    write_images: bool = True
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    enrich: EnrichSettings = field(default_factory=EnrichSettings)
    train: RunSettings = field(default_factory=RunSettings)
    fuse: FuseSettings = field(default_factory=FuseSettings)

    SECTIONS = {"enrich": EnrichSettings, "train": RunSettings, "fuse": FuseSettings}

    @classmethod
    def from_dict(cls, raw: dict) -> "Config":
        if not isinstance(raw, dict):
            raise UsageError("configuration must be a JSON object")
        top = {f.name for f in fields(cls)}
        unknown = set(raw) - top
        if unknown:
            raise UsageError(f"unknown configuration keys: {sorted(unknown)}")
        kw = {}
        for key, value in raw.items():
            if key == "corpus":
                try:
                    kw[key] = CorpusSpec.from_dict(value)
                except (TypeError, ValueError) as exc:
                    raise UsageError(f"corpus section: {exc}") from None
            elif key in cls.SECTIONS:
                section = cls.SECTIONS[key]
                bad = set(value) - {f.name for f in fields(section)}
                if bad:
                    raise UsageError(f"unknown keys in {key} section: {sorted(bad)}")
                kw[key] = section(**value)
            else:
                kw[key] = value
        cfg = cls(**kw)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        try:
            self.corpus.validate()
        except ValueError as exc:
            raise UsageError(f"corpus section: {exc}") from None
        if self.variant not in ALL_VARIANTS:
            raise UsageError(f"unknown variant {self.variant!r}; choose from {', '.join(ALL_VARIANTS)}")
        if self.seeds < 1 or self.jobs < 1:
            raise UsageError("--seeds and --jobs must be positive")
        if self.enrich.provider not in ("oracle", "http"):
            raise UsageError(f"unknown caption provider {self.enrich.provider!r}")
        if not 0.0 <= self.enrich.noise_rate <= 1.0:
            raise UsageError(f"noise_rate {self.enrich.noise_rate} outside [0, 1]")

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["corpus"] = self.corpus.to_dict()
        for key in self.SECTIONS:
            d[key] = asdict(d[key])
        return d

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def seed_list(self) -> list[int]:
        return [self.seed + i for i in range(self.seeds)]


def load_config(args: argparse.Namespace) -> Config:
    raw = {}
    if args.config:
        try:
            raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise UsageError(f"config file {args.config} not found") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {args.config}: {exc}") from None
    try:
        cfg = Config.from_dict(raw)
    except TypeError as exc:
        raise UsageError(f"invalid configuration: {exc}") from None
    for flag in ("seed", "seeds", "variant", "jobs"):
        value = getattr(args, flag, None)
        if value is not None:
            setattr(cfg, flag, value)
    if getattr(args, "noise_rate", None) is not None:
        cfg.enrich.noise_rate = args.noise_rate
    if getattr(args, "provider", None) is not None:
        cfg.enrich.provider = args.provider
    cfg.validate()
    return cfg


# -- manifests -------------------------------------------------------------------------


@dataclass
class RunManifest:
    command: str
    config_hash: str
    corpus_hash: str
    seeds: list[int]
    started: float
    finished: float = 0.0
    artifacts: dict[str, str] = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    phases: list[str] = field(default_factory=list)

    def write(self, path: Path) -> Path:
        """Atomic: write a sibling temp file, then rename over the target."""
        self.finished = time.time()
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".manifest-", suffix=".json")
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, path)
        return path


# -- shared helpers ------------------------------------------------------------------------


class Workspace:
    def __init__(self, out: str | Path):
        self.root = Path(out)

    corpus = property(lambda self: self.root / "corpus")
    enriched = property(lambda self: self.root / "enriched")
    tables = property(lambda self: self.root / "tables")

    def pretrain_dir(self, kind: str, seed: int) -> Path:
        return self.root / "pretrain" / f"{kind}-s{seed}"

    def run_dir(self, variant: str, seed: int) -> Path:
        return self.root / "runs" / f"{variant}-s{seed}"

    def fusion_dir(self, seed: int) -> Path:
        return self.root / "fusion" / f"s{seed}"

    def training_corpus(self, need_captions: bool) -> tuple[dict, str]:
        for d in (self.enriched, self.corpus):
            if (d / "train.jsonl").exists():
                splits = load_corpus(d)
                if need_captions and not all(isinstance(s, EnrichedSample) for s in splits["train"]):
                    continue
                return splits, corpus_hash(splits)
        if need_captions:
            raise UsageError(f"no enriched corpus under {self.root}; run `ces gen-data` then `ces enrich` first")
        raise UsageError(f"no corpus under {self.root}; run `ces gen-data` first")


def variant_plan(variant: str) -> tuple[str, VariantPlan]:
    """(architecture, plan) for a unimodal ablation variant or a multimodal tag."""
    if variant in PLANS:
        return "unimodal", PLANS[variant]
    arch, _, suffix = variant.partition("+")
    return arch, VariantPlan("none", "pairs" if suffix == "ces" else "c_only")


def _needs_captions(plan: VariantPlan) -> bool:
    return "pairs" in (plan.pretrain_input, plan.finetune_input)


def _setup_stack(cfg: Config, corpus: dict, variant: str, seed: int) -> tuple[EncoderStack, Vocab, Featurizer]:
    arch, _ = variant_plan(variant)
    vocab = corpus_vocab(corpus)
    settings = cfg.train
    if arch == "unimodal":
        mcfg = settings.model_config(len(vocab))
    else:
        regions = corpus["train"][0].regions
        if regions is None:
            raise UsageError("multimodal variants need region features (regions.bin) next to the corpus")
        mcfg = settings.model_config(len(vocab), arch, max_regions=regions.shape[0], region_dim=regions.shape[1])
    return EncoderStack(mcfg, seed=seed), vocab, Featurizer(vocab, settings.max_len, settings.caption_first)


def run_pretrain(cfg: Config, ws: Workspace, kind: str, seed: int, command: str = "pretrain") -> Path:
    """Continued MLM pre-training on ``kind`` input; returns the checkpoint path (reused when present)."""
    out = ws.pretrain_dir(kind, seed)
    ckpt = out / "backbone.ckpt"
    corpus, chash = ws.training_corpus(kind == "pairs")
    key = hashlib.sha256(json.dumps([kind, seed, chash, asdict(cfg.train)], sort_keys=True).encode()).hexdigest()
    if ckpt.exists() and (out / "manifest.json").exists():
        if json.loads((out / "manifest.json").read_text(encoding="utf-8")).get("metrics", {}).get("input_key") == key:
            log.info("pretrain phase: reusing %s", ckpt)
            return ckpt
        log.info("pretrain phase: %s was built from other settings or corpus; rebuilding", ckpt)
    log.info("pretrain phase: running MLM on %s input, seed %d", kind, seed)
    manifest = RunManifest(command, cfg.hash(), chash, [seed], time.time(), phases=["pretrain_mlm"])
    variant = "ces_full" if kind == "pairs" else "abl_ii"
    stack, _, feat = _setup_stack(cfg, corpus, variant, seed)
    result = pretrain_mlm(stack, pretrain_inputs(corpus, kind, feat), cfg.train.pretrain_config(seed, variant), out / "log.jsonl")
    _atomic_checkpoint(result.stack, ckpt)
    manifest.artifacts = {"checkpoint": str(ckpt), "log": str(out / "log.jsonl")}
    tail = [x for x in result.losses[-100:] if np.isfinite(x)]
    manifest.metrics = {"input_key": key, "final_loss_mean": float(np.mean(tail)) if tail else None}
    manifest.write(out / "manifest.json")
    return ckpt


def _atomic_checkpoint(stack: EncoderStack, path: Path) -> str:
    tmp = path.with_name(path.name + f".tmp{os.getpid()}")
    digest = stack.save(tmp)
    os.replace(tmp, path)
    return digest


def run_finetune(cfg: Config, ws: Workspace, variant: str, seed: int, command: str = "finetune") -> list[EvalReport]:
    arch, plan = variant_plan(variant)
    corpus, chash = ws.training_corpus(_needs_captions(plan))
    out = ws.run_dir(variant, seed)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(command, cfg.hash(), chash, [seed], time.time())
    stack, vocab, feat = _setup_stack(cfg, corpus, variant, seed)
    pretrained = plan.pretrain_input != "none"
    if pretrained:
        ckpt = run_pretrain(cfg, ws, plan.pretrain_input, seed, command)
        stack.load_backbone(load_checkpoint(ckpt))
        manifest.phases.append("pretrain_mlm")
        manifest.artifacts["backbone"] = str(ckpt)
        log.info("%s seed %d: backbone loaded from %s", variant, seed, ckpt)
    else:
        log.info("%s seed %d: pretrain phase skipped (plan has no pre-training input)", variant, seed)
    # multimodal tags borrow the schedule of the caption-free / caption-using unimodal plan
    train_variant = variant if variant in PLANS else ("abl_i" if plan.finetune_input == "pairs" else "baseline")
    tcfg = cfg.train.finetune_config(seed, train_variant, pretrained)
    log_path = out / "log.jsonl"
    log_path.unlink(missing_ok=True)
    res = finetune(stack, corpus, tcfg, plan, feat, run_id=f"{variant}-s{seed}", variant_tag=variant, log_path=log_path)
    manifest.phases.append("finetune")
    vocab.save(out / "vocab.txt")
    manifest.artifacts.update(
        checkpoint=str(out / "model.ckpt"), vocab=str(out / "vocab.txt"), reports=str(out / "reports.jsonl"), log=str(log_path)
    )
    manifest.metrics = {split: {"auroc": r.auroc, "accuracy": r.accuracy} for split, r in res.reports.items()}
    manifest.metrics["checkpoint_sha256"] = _atomic_checkpoint(res.stack, out / "model.ckpt")
    _write_reports(out / "reports.jsonl", res.reports.values())
    manifest.write(out / "manifest.json")
    for split, r in res.reports.items():
        log.info("%s seed %d: %s AUROC %.4f accuracy %.4f", variant, seed, split, r.auroc, r.accuracy)
    return list(res.reports.values())


def _write_reports(path: Path, reports) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in reports:
            fh.write(json.dumps(r.to_dict(with_samples=True)) + "\n")


def _read_reports(path: Path) -> list[EvalReport]:
    return [EvalReport.from_dict(json.loads(line)) for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]


def _finetune_cell(args) -> list[EvalReport]:
    cfg, out, variant, seed, command = args
    return run_finetune(cfg, Workspace(out), variant, seed, command)


def _sweep(cfg: Config, ws: Workspace, variants: Sequence[str], command: str) -> list[EvalReport]:
    """Every (variant, seed) cell, optionally in worker processes; pre-training runs first so cells share it."""
    seeds = cfg.seed_list()
    kinds = sorted({PLANS[v].pretrain_input for v in variants if v in PLANS} - {"none"})
    for kind in kinds:
        for seed in seeds:
            run_pretrain(cfg, ws, kind, seed, command)
    cells = [(cfg, str(ws.root), v, s, command) for v in variants for s in seeds]
    if cfg.jobs > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            results = list(pool.map(_finetune_cell, cells))
    else:
        results = [_finetune_cell(c) for c in cells]
    return [r for rs in results for r in rs]


# -- subcommands ---------------------------------------------------------------------------


def cmd_gen_data(cfg: Config, ws: Workspace, args) -> int:
    started = time.time()
    splits = generate_corpus(cfg.corpus)
    paths = save_corpus(ws.corpus, splits)
    if cfg.write_images:
        # region matrices double as the "image" files uploaded to an HTTP captioner
        img_root = ws.corpus
        for split in SPLITS:
            for s in splits[split]:
                p = img_root / (s.img or f"img/{s.id:06d}.npy")
                p.parent.mkdir(parents=True, exist_ok=True)
                with open(p, "wb") as fh:
                    np.save(fh, s.regions)
        paths["images"] = img_root / "img"
    chash = corpus_hash(splits)
    manifest = RunManifest("gen-data", cfg.hash(), chash, [cfg.corpus.seed], started)
    manifest.artifacts = {k: str(v) for k, v in paths.items()}
    manifest.metrics = {split: {"n": len(splits[split]), "positives": sum(s.label for s in splits[split])} for split in SPLITS}
    manifest.write(ws.corpus / "manifest.json")
    print(f"corpus written to {ws.corpus} (hash {chash[:12]})")
    return EXIT_OK


def cmd_enrich(cfg: Config, ws: Workspace, args) -> int:
    if not (ws.corpus / "train.jsonl").exists():
        raise UsageError(f"no corpus under {ws.root}; run `ces gen-data` first")
    started = time.time()
    splits = load_corpus(ws.corpus)
    e = cfg.enrich
    if e.provider == "oracle":
        provider = OracleProvider(OracleConfig(noise_rate=e.noise_rate, seed=e.oracle_seed))
    else:
        try:
            provider = HttpProvider(e.endpoint, e.timeout, e.attempts, e.backoff, root=ws.corpus)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    cache = ws.enriched / "captions.jsonl"
    enriched = {}
    for split in SPLITS:
        enriched[split] = enrich(splits[split], provider, cache, jobs=cfg.jobs)
    log.info("enrich: %d provider calls", provider.calls)
    paths = save_corpus(ws.enriched, enriched)
    chash = corpus_hash(enriched)
    manifest = RunManifest("enrich", cfg.hash(), chash, [cfg.seed], started)
    manifest.artifacts = {k: str(v) for k, v in paths.items()} | {"cache": str(cache)}
    manifest.metrics = {"provider": e.provider, "provider_calls": provider.calls, "noise_rate": e.noise_rate}
    manifest.write(ws.enriched / "manifest.json")
    print(f"enriched corpus written to {ws.enriched} ({provider.calls} provider calls)")
    return EXIT_OK


def cmd_pretrain(cfg: Config, ws: Workspace, args) -> int:
    plan = PLANS.get(cfg.variant)
    if plan is None or plan.pretrain_input == "none":
        raise UsageError(f"variant {cfg.variant!r} has no pre-training phase")
    for seed in cfg.seed_list():
        print(run_pretrain(cfg, ws, plan.pretrain_input, seed))
    return EXIT_OK


def cmd_finetune(cfg: Config, ws: Workspace, args) -> int:
    reports = _sweep(cfg, ws, [cfg.variant], "finetune")
    if cfg.seeds > 1:
        csv_path, md_path = emit_report(reports, ws.tables / cfg.variant, order=[cfg.variant])
        print(md_path.read_text(encoding="utf-8"), end="")
    else:
        for r in reports:
            print(f"{r.run_id} {r.split}: AUROC {r.auroc:.4f} accuracy {r.accuracy:.4f}")
    return EXIT_OK


def cmd_ablate(cfg: Config, ws: Workspace, args) -> int:
    started = time.time()
    reports = _sweep(cfg, ws, VARIANTS, "ablate")
    csv_path, md_path = emit_report(reports, ws.tables / "ablation", order=list(VARIANTS), baseline="baseline")
    _table_manifest(cfg, ws, "ablate", started, reports, csv_path, md_path)
    print(md_path.read_text(encoding="utf-8"), end="")
    return EXIT_OK


def _table_manifest(cfg, ws, command, started, reports, csv_path, md_path, corpus=None) -> None:
    chash = corpus_hash(corpus) if corpus else ""
    if not chash:
        for d in (ws.enriched, ws.corpus):
            if (d / "manifest.json").exists():
                chash = json.loads((d / "manifest.json").read_text())["corpus_hash"]
                break
    m = RunManifest(command, cfg.hash(), chash, cfg.seed_list(), started)
    m.artifacts = {"csv": str(csv_path), "markdown": str(md_path)}
    m.metrics = {f"{r.variant}/{r.split}/s{r.seed}": r.auroc for r in reports}
    m.write(csv_path.with_suffix(".manifest.json"))


def cmd_fuse(cfg: Config, ws: Workspace, args) -> int:
    started = time.time()
    f = cfg.fuse
    for name in (f.strong, f.weak):
        if name not in ALL_VARIANTS:
            raise UsageError(f"fuse: unknown variant {name!r}")
    seeds = cfg.seed_list()
    missing = [
        f"ces finetune --variant {v} --seed {s} --out {ws.root}"
        for v in (f.strong, f.weak)
        for s in seeds
        if not (ws.run_dir(v, s) / "model.ckpt").exists()
    ]
    if missing:
        raise UsageError("fuse needs fine-tuned checkpoints; run first:\n  " + "\n  ".join(missing))
    corpus, chash = ws.training_corpus(True)
    tag = f"fusion({f.strong}+{f.weak})"
    all_reports: list[EvalReport] = []
    for seed in seeds:
        out = ws.fusion_dir(seed)
        dumps = {}
        for role, variant in (("strong", f.strong), ("weak", f.weak)):
            run = ws.run_dir(variant, seed)
            stack = load_checkpoint(run / "model.ckpt")
            feat = Featurizer(Vocab.load(run / "vocab.txt"), cfg.train.max_len, cfg.train.caption_first)
            pairs = variant_plan(variant)[1].finetune_input == "pairs"
            for split in SPLITS:
                dump = extract_embeddings(stack, corpus[split], feat, pairs)
                dump.save(out / f"{role}_{split}.cese")
                dumps[role, split] = dump
            all_reports.extend(r for r in _read_reports(run / "reports.jsonl") if r.variant == variant)
        labels = {s.id: s.label for split in SPLITS for s in corpus[split]}
        fcfg = FusionConfig(hidden=f.hidden, total_updates=f.total_updates, peak_lr=f.peak_lr, seed=seed)
        mlp = train_fusion(dumps["strong", "train"], dumps["weak", "train"], labels, fcfg)
        reports = []
        for split in ("val", "test"):
            a, b = dumps["strong", split], dumps["weak", split]
            scores = fuse_predict(mlp, a, b)
            reports.append(EvalReport.from_scores(f"{tag}-s{seed}", split, a.ids, scores, [labels[int(i)] for i in a.ids], seed, tag))
        _write_reports(out / "reports.jsonl", reports)
        m = RunManifest("fuse", cfg.hash(), chash, [seed], started, phases=["fusion"])
        m.artifacts = {p.stem: str(p) for p in sorted(out.glob("*.cese"))} | {"reports": str(out / "reports.jsonl")}
        m.metrics = {r.split: {"auroc": r.auroc, "accuracy": r.accuracy} for r in reports}
        m.write(out / "manifest.json")
        all_reports.extend(reports)
    order = [f.strong, f.weak, tag]
    csv_path, md_path = emit_report(all_reports, ws.tables / "fusion", order=order, baseline=f.strong)
    _table_manifest(cfg, ws, "fuse", started, all_reports, csv_path, md_path, corpus)
    print(md_path.read_text(encoding="utf-8"), end="")
    return EXIT_OK


def cmd_eval(cfg: Config, ws: Workspace, args) -> int:
    run = ws.run_dir(cfg.variant, cfg.seed)
    if not (run / "model.ckpt").exists():
        raise UsageError(f"no checkpoint at {run}; run `ces finetune --variant {cfg.variant} --seed {cfg.seed}` first")
    _, plan = variant_plan(cfg.variant)
    corpus, _ = ws.training_corpus(_needs_captions(plan))
    samples = corpus[args.split]
    if any(s.label is None for s in samples):
        raise UsageError(f"split {args.split} is unlabelled")
    stack = load_checkpoint(run / "model.ckpt")
    feat = Featurizer(Vocab.load(run / "vocab.txt"), cfg.train.max_len, cfg.train.caption_first)
    enc = feat.encode(samples, plan.finetune_input == "pairs", with_regions=stack.cfg.multimodal)
    scores = predict(stack, enc)
    report = EvalReport.from_scores(f"{cfg.variant}-s{cfg.seed}", args.split, enc.sample_ids, scores, enc.labels, cfg.seed, cfg.variant, args.threshold)
    (run / f"eval_{args.split}.json").write_text(json.dumps(report.to_dict(with_samples=True)) + "\n", encoding="utf-8")
    print(json.dumps(report.to_dict(), sort_keys=True))
    return EXIT_OK


def cmd_report(cfg: Config, ws: Workspace, args) -> int:
    started = time.time()
    paths = sorted((ws.root / "runs").glob("*/reports.jsonl")) + sorted((ws.root / "fusion").glob("*/reports.jsonl"))
    if not paths:
        raise UsageError(f"no reports under {ws.root}; run `ces finetune` or `ces ablate` first")
    reports = [r for p in paths for r in _read_reports(p)]
    if not reports:
        raise UsageError(f"report files under {ws.root} are empty; rerun the training commands")
    order = [v for v in ALL_VARIANTS if any(r.variant == v for r in reports)]
    baseline = args.baseline or cfg.baseline
    csv_path, md_path = emit_report(reports, ws.tables / "report", order=order, baseline=baseline)
    _table_manifest(cfg, ws, "report", started, reports, csv_path, md_path)
    print(md_path.read_text(encoding="utf-8"), end="")
    return EXIT_OK


COMMANDS = {
    "gen-data": (cmd_gen_data, "generate the synthetic meme corpus"),
    "enrich": (cmd_enrich, "caption every sample (oracle or HTTP captioner)"),
    "pretrain": (cmd_pretrain, "continued MLM pre-training for a variant"),
    "finetune": (cmd_finetune, "pre-train if the variant plans it, then fine-tune and evaluate"),
    "ablate": (cmd_ablate, "run all five unimodal variants over the seeds"),
    "fuse": (cmd_fuse, "late-fuse two fine-tuned models with an MLP"),
    "eval": (cmd_eval, "evaluate a fine-tuned run on a split"),
    "report": (cmd_report, "aggregate every report under --out into one table"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON configuration file")
    common.add_argument("--seed", type=int, help="base seed (overrides config)")
    common.add_argument("--seeds", type=int, help="number of consecutive seeds starting at --seed")
    common.add_argument("--variant", help=f"one of: {', '.join(ALL_VARIANTS)}")
    common.add_argument("--jobs", type=int, help="worker cap for captioning and sweeps")
    common.add_argument("--out", default="runs", metavar="DIR", help="artifact root (default: runs)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="ces", description="Caption-enriched hateful meme classification")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_text)
        if name == "enrich":
            p.add_argument("--provider", choices=("oracle", "http"))
            p.add_argument("--noise-rate", type=float, dest="noise_rate")
        elif name == "eval":
            p.add_argument("--split", default="test", choices=SPLITS)
            p.add_argument("--threshold", type=float, default=0.5)
        elif name == "report":
            p.add_argument("--baseline", help="variant the p-value column compares against")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors already
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    handler, _ = COMMANDS[args.command]
    try:
        cfg = load_config(args)
        return handler(cfg, Workspace(args.out), args)
    except UsageError as exc:
        print(f"ces {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except EnrichError as exc:
        print(f"ces {args.command}: {exc}", file=sys.stderr)
        return EXIT_PROVIDER
    except CaptionError as exc:
        print(f"ces {args.command}: caption provider failed: {exc}", file=sys.stderr)
        return EXIT_PROVIDER


if __name__ == "__main__":
    sys.exit(main())

"""Synthetic meme corpus with benign confounders, plus JSONL ingestion.

An "image" is a k x d matrix of region features rendered around a per-concept
prototype. The label needs both modalities: a meme is hateful only when its
subject is a protected-group concept AND its text attacks. Most texts never
name their subject, so text alone cannot resolve the label.
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PROTECTED = ("group_a", "group_b", "group_c", "group_d", "group_e", "group_f")
NEUTRAL = ("cat", "dog", "cow", "shoe", "car", "tree")

ATTACK = (
    "should be kicked out",
    "are a disease",
    "ruin every neighborhood",
    "do not belong here",
    "are nothing but trouble",
    "should go back where they came from",
    "are ruining this country",
    "can never be trusted",
    "are worse than animals",
    "deserve nothing",
    "should be locked away",
    "are a plague on society",
)
BENIGN = (
    "are having a great day",
    "love the summer",
    "enjoy a good meal",
    "make me smile",
    "are my favorite",
    "went to the beach",
    "look so happy today",
    "deserve a nap",
    "are celebrating tonight",
    "just finished work",
    "like to dance",
    "are ready for the weekend",
)
FILLERS = ("they", "these ones", "look how they", "everyone knows they")

CONFOUNDER_ID_OFFSET = 1_000_000


def substream(seed: int, name: str, *keys: int) -> np.random.Generator:
    """Independent generator for a named purpose, e.g. ``substream(7, "corpus", split, i)``."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode()), *(int(k) for k in keys)])


@dataclass
class MemeSample:
    id: int
    text: str
    label: int | None = None
    regions: np.ndarray | None = None
    img: str | None = None
    # generator-side fields, never fed to models
    concept: str | None = None
    predicate: str | None = None
    confounder_of: int | None = None


@dataclass
class EnrichedSample(MemeSample):
    caption: str = ""


@dataclass
class CorpusSpec:
    n_train: int = 2000
    n_val: int = 400
    n_test: int = 400
    protected: tuple[str, ...] = PROTECTED
    neutral: tuple[str, ...] = NEUTRAL
    attack: tuple[str, ...] = ATTACK
    benign: tuple[str, ...] = BENIGN
    fillers: tuple[str, ...] = FILLERS
    q: float = 0.3
    pc: float = 0.3
    k: int = 4
    d: int = 16
    sigma: float = 3.0
    protected_rate: float = 0.5
    attack_rate: float = 0.5
    seed: int = 7

    def validate(self) -> None:
        if min(self.n_train, self.n_val, self.n_test) < 10:
            raise ValueError("each split needs at least 10 samples")
        if set(self.protected) & set(self.neutral):
            raise ValueError("protected and neutral concept sets overlap")
        if set(self.attack) & set(self.benign):
            raise ValueError("attack and benign predicate sets overlap")
        if not (self.protected and self.neutral and self.attack and self.benign and self.fillers):
            raise ValueError("concept, predicate and filler sets must be non-empty")
        for name in ("q", "pc", "protected_rate", "attack_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        if self.k < 1 or self.d < 1 or self.sigma < 0:
            raise ValueError("k and d must be positive and sigma non-negative")

    @property
    def concepts(self) -> tuple[str, ...]:
        return tuple(self.protected) + tuple(self.neutral)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusSpec":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown corpus fields: {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def label_rule(concept: str, predicate: str, spec: CorpusSpec | None = None) -> int:
    spec = spec or CorpusSpec()
    if concept not in spec.protected and concept not in spec.neutral:
        raise ValueError(f"unknown concept {concept!r}")
    if predicate not in spec.attack and predicate not in spec.benign:
        raise ValueError(f"unknown predicate {predicate!r}")
    return int(concept in spec.protected and predicate in spec.attack)


def prototype(concept: str, spec: CorpusSpec) -> np.ndarray:
    return substream(spec.seed, "prototype:" + concept).standard_normal(spec.d)


def render_regions(concept: str, spec: CorpusSpec, sample_seed: int) -> np.ndarray:
    proto = prototype(concept, spec)
    noise = substream(spec.seed, "regions", sample_seed).standard_normal((spec.k, spec.d))
    return proto[None, :] + spec.sigma * noise


def make_confounder(s: MemeSample, spec: CorpusSpec, new_id: int | None = None) -> MemeSample:
    """Same text, neutral subject, re-rendered image: the label flips to 0."""
    if s.label != 1:
        raise ValueError(f"confounders are made from hateful samples; sample {s.id} has label {s.label}")
    new_id = s.id + CONFOUNDER_ID_OFFSET if new_id is None else new_id
    rng = substream(spec.seed, "confounder", s.id)
    concept = spec.neutral[rng.integers(len(spec.neutral))]
    return replace(
        s,
        id=new_id,
        concept=concept,
        regions=render_regions(concept, spec, new_id),
        label=label_rule(concept, s.predicate, spec),
        confounder_of=s.id,
    )


SPLITS = ("train", "val", "test")


def generate_corpus(spec: CorpusSpec) -> dict[str, list[MemeSample]]:
    spec.validate()
    out: dict[str, list[MemeSample]] = {}
    next_id = 0
    for split_idx, (split, n) in enumerate(zip(SPLITS, (spec.n_train, spec.n_val, spec.n_test))):
        samples: list[MemeSample] = []
        draw = 0
        while len(samples) < n:
            rng = substream(spec.seed, "corpus", split_idx, draw)
            draw += 1
            pool = spec.protected if rng.random() < spec.protected_rate else spec.neutral
            concept = pool[rng.integers(len(pool))]
            preds = spec.attack if rng.random() < spec.attack_rate else spec.benign
            predicate = preds[rng.integers(len(preds))]
            if rng.random() < spec.q:
                text = f"{concept} {predicate}"
            else:
                text = f"{spec.fillers[rng.integers(len(spec.fillers))]} {predicate}"
            s = MemeSample(
                id=next_id,
                text=text,
                label=label_rule(concept, predicate, spec),
                regions=render_regions(concept, spec, next_id),
                concept=concept,
                predicate=predicate,
            )
            next_id += 1
            samples.append(s)
            if s.label == 1 and rng.random() < spec.pc and len(samples) < n:
                samples.append(make_confounder(s, spec, new_id=next_id))
                next_id += 1
        out[split] = samples
    return out


# -- diagnostics ---------------------------------------------------------------


def text_only_ceiling(samples: Sequence[MemeSample]) -> float:
    """Accuracy of predicting the majority label of each unique text."""
    groups: dict[str, Counter] = defaultdict(Counter)
    for s in samples:
        groups[s.text][s.label] += 1
    return sum(max(c.values()) for c in groups.values()) / len(samples)


def confounder_pairs(samples: Sequence[MemeSample]) -> list[tuple[MemeSample, MemeSample]]:
    by_id = {s.id: s for s in samples}
    return [(by_id[s.confounder_of], s) for s in samples if s.confounder_of is not None]


def corpus_hash(splits: dict[str, list[MemeSample]]) -> str:
    h = hashlib.sha256()
    for split in SPLITS:
        for s in splits.get(split, []):
            h.update(json.dumps([split, s.id, s.text, s.label, getattr(s, "caption", None)]).encode())
            if s.regions is not None:
                h.update(np.ascontiguousarray(s.regions, dtype="<f8").tobytes())
    return h.hexdigest()


# -- persistence ---------------------------------------------------------------

REGIONS_MAGIC = b"CESR"


def write_regions(path: str | Path, samples: Sequence[MemeSample]) -> None:
    """Sidecar layout: magic, k, d, count, then int64 ids, then float64 matrices (little-endian)."""
    if not samples:
        raise ValueError("no samples to write")
    k, d = samples[0].regions.shape
    with open(path, "wb") as fh:
        fh.write(REGIONS_MAGIC + struct.pack("<IIQ", k, d, len(samples)))
        fh.write(np.array([s.id for s in samples], dtype="<i8").tobytes())
        for s in samples:
            if s.regions.shape != (k, d):
                raise ValueError(f"sample {s.id} regions shape {s.regions.shape} != {(k, d)}")
            fh.write(np.ascontiguousarray(s.regions, dtype="<f8").tobytes())


def read_regions(path: str | Path) -> dict[int, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != REGIONS_MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:4]!r}")
    k, d, count = struct.unpack_from("<IIQ", raw, 4)
    off = 4 + struct.calcsize("<IIQ")
    ids = np.frombuffer(raw, dtype="<i8", count=count, offset=off)
    off += 8 * count
    mats = np.frombuffer(raw, dtype="<f8", count=count * k * d, offset=off).reshape(count, k, d)
    return {int(i): mats[j].astype(np.float64) for j, i in enumerate(ids)}


def _visible_record(s: MemeSample) -> dict:
    rec = {"id": s.id, "img": s.img or f"img/{s.id:06d}.npy", "text": s.text}
    if s.label is not None:
        rec["label"] = s.label
    if isinstance(s, EnrichedSample):
        rec["caption"] = s.caption
    return rec


def save_corpus(out_dir: str | Path, splits: dict[str, list[MemeSample]]) -> dict[str, Path]:
    """Write model-visible JSONL per split, a diagnostics JSONL and the regions sidecar."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    for split in SPLITS:
        p = out / f"{split}.jsonl"
        with open(p, "w", encoding="utf-8") as fh:
            for s in splits[split]:
                fh.write(json.dumps(_visible_record(s)) + "\n")
        paths[split] = p
    diag = out / "diagnostics.jsonl"
    with open(diag, "w", encoding="utf-8") as fh:
        for split in SPLITS:
            for s in splits[split]:
                row = {"id": s.id, "split": split, "concept": s.concept, "predicate": s.predicate, "confounder_of": s.confounder_of}
                fh.write(json.dumps(row) + "\n")
    paths["diagnostics"] = diag
    every = [s for split in SPLITS for s in splits[split]]
    if all(s.regions is not None for s in every):
        paths["regions"] = out / "regions.bin"
        write_regions(paths["regions"], every)
    return paths


def load_jsonl(path: str | Path) -> list[MemeSample]:
    """Read Hateful-Memes style lines ``{"id", "img", "text", "label"?}``; a ``caption`` field enriches."""
    samples: list[MemeSample] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}: line {lineno}: malformed JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise ValueError(f"{path}: line {lineno}: expected an object")
            for key in ("id", "img", "text"):
                if key not in obj:
                    raise ValueError(f"{path}: line {lineno}: missing required field {key!r}")
            label = obj.get("label")
            if label is not None and label not in (0, 1):
                raise ValueError(f"{path}: line {lineno}: label must be 0 or 1, got {label!r}")
            kw = dict(id=int(obj["id"]), text=str(obj["text"]), label=label, img=obj["img"])
            if "caption" in obj:
                samples.append(EnrichedSample(caption=str(obj["caption"]), **kw))
            else:
                samples.append(MemeSample(**kw))
    return samples


def load_corpus(corpus_dir: str | Path, with_diagnostics: bool = True) -> dict[str, list[MemeSample]]:
    """Inverse of ``save_corpus``; attaches regions and, optionally, generator diagnostics."""
    d = Path(corpus_dir)
    splits = {split: load_jsonl(d / f"{split}.jsonl") for split in SPLITS}
    regions = read_regions(d / "regions.bin") if (d / "regions.bin").exists() else {}
    diag = {}
    if with_diagnostics and (d / "diagnostics.jsonl").exists():
        for line in (d / "diagnostics.jsonl").read_text(encoding="utf-8").splitlines():
            row = json.loads(line)
            diag[row["id"]] = row
    for samples in splits.values():
        for s in samples:
            s.regions = regions.get(s.id)
            if s.id in diag:
                s.concept = diag[s.id]["concept"]
                s.predicate = diag[s.id]["predicate"]
                s.confounder_of = diag[s.id]["confounder_of"]
    return splits


def iter_texts(samples: Iterable[MemeSample], with_captions: bool = True) -> Iterable[str]:
    for s in samples:
        yield s.text
        if with_captions and isinstance(s, EnrichedSample):
            yield s.caption

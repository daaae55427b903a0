"""Late fusion: a two-layer MLP over concatenated pooled embeddings of two frozen models."""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .data import MemeSample, substream
from .models import EncoderStack
from .training import Featurizer, Optimizer, TrainConfig, epoch_batches

DUMP_MAGIC = b"CESE"


@dataclass
class EmbeddingDump:
    ids: np.ndarray  # int64, one per row
    matrix: np.ndarray  # [n, d] float64
    checkpoint: str  # sha256 hex of the source stack's parameters

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2 or self.matrix.shape[0] != self.ids.shape[0]:
            raise ValueError(f"matrix shape {self.matrix.shape} does not match {len(self.ids)} ids")
        if len(np.unique(self.ids)) != len(self.ids):
            raise ValueError("duplicate sample ids in embedding dump")

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def __len__(self) -> int:
        return len(self.ids)

    def rows_for(self, ids: Sequence[int]) -> np.ndarray:
        """Rows keyed by sample id; every id must be present and no id may be extra."""
        check_aligned(self.ids, ids)
        pos = {int(i): r for r, i in enumerate(self.ids)}
        return self.matrix[[pos[int(i)] for i in ids]]

    def save(self, path: str | Path) -> None:
        """Layout: magic, <QQ n d>, 32-byte checkpoint digest, int64 ids, float64 matrix (all little-endian)."""
        digest = bytes.fromhex(self.checkpoint) if self.checkpoint else bytes(32)
        if len(digest) != 32:
            raise ValueError("checkpoint hash must be a sha256 hex digest")
        n, d = self.matrix.shape
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as fh:
            fh.write(DUMP_MAGIC + struct.pack("<QQ", n, d) + digest)
            fh.write(self.ids.astype("<i8").tobytes())
            fh.write(np.ascontiguousarray(self.matrix, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path: str | Path) -> "EmbeddingDump":
        raw = Path(path).read_bytes()
        if raw[:4] != DUMP_MAGIC:
            raise ValueError(f"{path}: not an embedding dump (magic {raw[:4]!r})")
        n, d = struct.unpack_from("<QQ", raw, 4)
        digest = raw[20:52]
        expected = 52 + 8 * n + 8 * n * d
        if len(raw) != expected:
            raise ValueError(f"{path}: truncated or oversized dump ({len(raw)} bytes, expected {expected})")
        ids = np.frombuffer(raw, dtype="<i8", count=n, offset=52)
        matrix = np.frombuffer(raw, dtype="<f8", count=n * d, offset=52 + 8 * n).reshape(n, d)
        return cls(ids.astype(np.int64), matrix.astype(np.float64), digest.hex())


def check_aligned(a_ids, b_ids) -> None:
    a, b = set(map(int, a_ids)), set(map(int, b_ids))
    if a != b or len(a) != len(a_ids) or len(b) != len(b_ids):
        diff = sorted(a ^ b)
        shown = ", ".join(map(str, diff[:10])) + (" ..." if len(diff) > 10 else "")
        raise ValueError(f"embedding dumps are not aligned; {len(diff)} ids in only one side: [{shown}]")


def extract_embeddings(
    stack: EncoderStack,
    samples: Sequence[MemeSample],
    featurizer: Featurizer,
    with_caption: bool,
    batch_size: int = 256,
) -> EmbeddingDump:
    """Pooled representation per sample in evaluation mode (dropout off, no parameter updates)."""
    if not samples:
        raise ValueError("no samples to embed")
    enc = featurizer.encode(samples, with_caption, with_regions=stack.cfg.multimodal)
    stack.eval()
    rows = []
    with ag.checked(False):
        for start in range(0, len(enc), batch_size):
            rows.append(stack.pool(enc.batch(slice(start, start + batch_size))).data.copy())
    return EmbeddingDump(enc.sample_ids, np.concatenate(rows), stack.checksum(stack.backbone_names()))


@dataclass
class FusionConfig:
    hidden: int | None = None  # defaults to d_a + d_b
    total_updates: int = 1000
    peak_lr: float = 1e-3
    batch_size: int = 32
    weight_decay: float = 0.01
    init_std: float = 0.02
    seed: int = 0

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            phase="finetune", total_updates=self.total_updates, peak_lr=self.peak_lr,
            batch_size=self.batch_size, weight_decay=self.weight_decay, seed=self.seed,
        )


class FusionMLP:
    """affine(d_a + d_b -> h) -> GELU -> affine(h -> 1) on standardised features."""

    def __init__(self, d_a: int, d_b: int, hidden: int | None = None, init_std: float = 0.02, seed: int = 0):
        self.d_a, self.d_b = d_a, d_b
        h = hidden or d_a + d_b
        rng = substream(seed, "fusion-init")
        self.params = {
            "w1": ag.parameter(rng.normal(0.0, init_std, size=(d_a + d_b, h))),
            "b1": ag.parameter(np.zeros(h)),
            "w2": ag.parameter(rng.normal(0.0, init_std, size=(h, 1))),
            "b2": ag.parameter(np.zeros(1)),
        }
        self.mean = np.zeros(d_a + d_b)
        self.scale = np.ones(d_a + d_b)

    def fit_standardizer(self, x: np.ndarray) -> None:
        self.mean = x.mean(axis=0)
        std = x.std(axis=0)
        # constant columns (e.g. an all-zero dump) pass through as zeros
        self.scale = np.where(std > 1e-12, std, 1.0)

    def logits(self, x: np.ndarray) -> Tensor:
        z = Tensor((x - self.mean) / self.scale)
        h = ag.gelu(ag.linear(z, self.params["w1"], self.params["b1"]))
        return ag.reshape(ag.linear(h, self.params["w2"], self.params["b2"]), (-1,))

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, p in self.params.items():
            h.update(name.encode() + p.data.tobytes())
        return h.hexdigest()


class _ParamHolder:
    """Adapter so the training module's Optimizer can drive the MLP."""

    def __init__(self, params: dict[str, Tensor]):
        self.params = params


def _concat(dump_a: EmbeddingDump, dump_b: EmbeddingDump) -> np.ndarray:
    return np.concatenate([dump_a.matrix, dump_b.rows_for(dump_a.ids)], axis=1)


def _labels_for(ids: np.ndarray, labels) -> np.ndarray:
    if isinstance(labels, Mapping):
        missing = [int(i) for i in ids if int(i) not in labels]
        if missing:
            raise ValueError(f"{len(missing)} dump ids have no label (first: {missing[0]})")
        return np.array([labels[int(i)] for i in ids], dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if y.shape != (len(ids),):
        raise ValueError(f"{y.shape[0] if y.ndim else 0} labels for {len(ids)} dump rows")
    return y


def train_fusion(dump_a: EmbeddingDump, dump_b: EmbeddingDump, labels, cfg: FusionConfig | None = None) -> FusionMLP:
    """Train the fusion head with sigmoid BCE; ``labels`` is an id -> label mapping or aligned with ``dump_a``."""
    cfg = cfg or FusionConfig()
    x = _concat(dump_a, dump_b)
    y = _labels_for(dump_a.ids, labels)
    if not set(np.unique(y)) <= {0.0, 1.0}:
        raise ValueError("fusion labels must be 0/1")
    mlp = FusionMLP(dump_a.dim, dump_b.dim, cfg.hidden, cfg.init_std, cfg.seed)
    mlp.fit_standardizer(x)
    opt = Optimizer(_ParamHolder(mlp.params), cfg.train_config())
    with ag.checked(False):
        for _, idx in epoch_batches(len(y), cfg.batch_size, cfg.seed, cfg.total_updates):
            ag.bce_with_logits(mlp.logits(x[idx]), y[idx]).backward()
            opt.step()
    return mlp


def fuse_predict(mlp: FusionMLP, dump_a: EmbeddingDump, dump_b: EmbeddingDump) -> np.ndarray:
    """Sigmoid scores in ``dump_a`` id order."""
    if (dump_a.dim, dump_b.dim) != (mlp.d_a, mlp.d_b):
        raise ValueError(f"dump widths ({dump_a.dim}, {dump_b.dim}) do not match the MLP ({mlp.d_a}, {mlp.d_b})")
    with ag.checked(False):
        z = mlp.logits(_concat(dump_a, dump_b)).data
    # keep scores strictly inside (0, 1) even for saturated logits
    return np.clip(np.exp(-np.logaddexp(0.0, -z)), np.finfo(float).tiny, np.nextafter(1.0, 0.0))

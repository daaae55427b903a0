"""Transformer encoders: text-only, single-stream and two-stream (co-attention).

All three share the same building blocks (post-LN self-attention and GELU
feed-forward). Parameters live in one ordered name -> Tensor dict so they can
be checkpointed, checksummed and partially transferred between phases.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .data import substream
from .text import TokenSequence

ARCHITECTURES = ("unimodal", "single_stream", "two_stream")
POOLINGS = ("cls", "product")
REGION_SEGMENT = 2


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    layers: int = 2
    hidden: int = 64
    heads: int = 4
    ff: int = 128
    max_len: int = 48
    max_regions: int = 4
    region_dim: int = 16
    dropout: float = 0.1
    architecture: str = "unimodal"
    pooling: str = "cls"
    init_std: float = 0.02
    ln_eps: float = 1e-12

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}")
        if self.pooling not in POOLINGS:
            raise ValueError(f"unknown pooling {self.pooling!r}")
        if self.hidden % self.heads:
            raise ValueError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if self.pooling == "product" and self.architecture != "two_stream":
            raise ValueError("product pooling requires the two_stream architecture")

    @property
    def multimodal(self) -> bool:
        return self.architecture != "unimodal"

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class Batch:
    """Padded text (and optional regions) for B samples."""

    ids: np.ndarray
    segments: np.ndarray
    attn: np.ndarray
    regions: np.ndarray | None = None

    @classmethod
    def from_sequences(cls, seqs: list[TokenSequence], regions=None, trim: bool = True) -> "Batch":
        ids = np.stack([s.ids for s in seqs])
        segs = np.stack([s.segments for s in seqs])
        attn = np.stack([s.attn_mask for s in seqs])
        batch = cls(ids, segs, attn, None if regions is None else np.asarray(regions, dtype=np.float64))
        return batch.trimmed() if trim else batch

    def trimmed(self) -> "Batch":
        """Drop trailing columns that are padding in every row."""
        n = int(self.attn.sum(axis=1).max())
        return Batch(self.ids[:, :n], self.segments[:, :n], self.attn[:, :n], self.regions)

    def __len__(self) -> int:
        return self.ids.shape[0]


def _param_shapes(cfg: EncoderConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """(name, shape, init) in canonical order; init is normal | zeros | ones."""
    d, f, V = cfg.hidden, cfg.ff, cfg.vocab_size
    n_seg = 3 if cfg.multimodal else 2
    specs = [
        ("emb.tok", (V, d), "normal"),
        ("emb.pos", (cfg.max_len, d), "normal"),
        ("emb.seg", (n_seg, d), "normal"),
        ("emb.ln_g", (d,), "ones"),
        ("emb.ln_b", (d,), "zeros"),
    ]
    if cfg.multimodal:
        specs += [
            ("img.proj_w", (cfg.region_dim, d), "normal"),
            ("img.proj_b", (d,), "zeros"),
            ("img.pos", (cfg.max_regions, d), "normal"),
        ]
    if cfg.architecture == "two_stream":
        specs += [("img.ln_g", (d,), "ones"), ("img.ln_b", (d,), "zeros")]

    def block(prefix: str, cross: bool) -> list:
        out = []
        for part in ("attn", "x") if cross else ("attn",):
            for w in ("q", "k", "v", "o"):
                out += [(f"{prefix}.{part}_w{w}", (d, d), "normal"), (f"{prefix}.{part}_b{w}", (d,), "zeros")]
            ln = "ln1" if part == "attn" else "lnx"
            out += [(f"{prefix}.{ln}_g", (d,), "ones"), (f"{prefix}.{ln}_b", (d,), "zeros")]
        out += [
            (f"{prefix}.ff_w1", (d, f), "normal"),
            (f"{prefix}.ff_b1", (f,), "zeros"),
            (f"{prefix}.ff_w2", (f, d), "normal"),
            (f"{prefix}.ff_b2", (d,), "zeros"),
            (f"{prefix}.ln2_g", (d,), "ones"),
            (f"{prefix}.ln2_b", (d,), "zeros"),
        ]
        return out

    for layer in range(cfg.layers):
        if cfg.architecture == "two_stream":
            specs += block(f"txt{layer}", cross=True) + block(f"img{layer}", cross=True)
        else:
            specs += block(f"blk{layer}", cross=False)

    if cfg.architecture == "unimodal":
        specs += [("mlm.bias", (V,), "zeros"), ("head.w", (d, 1), "normal"), ("head.b", (1,), "zeros")]
    else:
        specs += [
            ("head.w1", (d, d), "normal"),
            ("head.b1", (d,), "zeros"),
            ("head.w2", (d, 1), "normal"),
            ("head.b2", (1,), "zeros"),
        ]
    return specs


class EncoderStack:
    def __init__(self, cfg: EncoderConfig, seed: int = 0):
        self.cfg = cfg
        self.seed = seed
        self.params: dict[str, Tensor] = {}
        rng = substream(seed, "init")
        for name, shape, init in _param_shapes(cfg):
            if init == "normal":
                data = rng.normal(0.0, cfg.init_std, size=shape)
            elif init == "ones":
                data = np.ones(shape)
            else:
                data = np.zeros(shape)
            self.params[name] = ag.parameter(data)
        self.training = False
        self.attention_log: list[np.ndarray] | None = None
        self._dropout_rng: np.random.Generator | None = None

    # -- parameter plumbing -------------------------------------------------

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self.params.items())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def backbone_names(self) -> list[str]:
        return [n for n in self.params if not n.startswith("head.") and not n.startswith("mlm.")]

    def head_names(self) -> list[str]:
        return [n for n in self.params if n.startswith("head.")]

    def reset_head(self, seed: int, zero: bool = False) -> None:
        rng = substream(seed, "head-init")
        for name, shape, init in _param_shapes(self.cfg):
            if not name.startswith("head."):
                continue
            if init == "normal" and not zero:
                self.params[name].data = rng.normal(0.0, self.cfg.init_std, size=shape)
            else:
                self.params[name].data = np.zeros(shape)

    def zero_head(self) -> None:
        self.reset_head(0, zero=True)

    def load_backbone(self, other: "EncoderStack") -> None:
        """Copy every non-head parameter from ``other`` (shapes must agree)."""
        for name in self.backbone_names():
            src = other.params.get(name)
            if src is None or src.shape != self.params[name].shape:
                raise ValueError(f"backbone parameter {name} missing or mis-shaped in source stack")
            self.params[name].data = src.data.copy()

    def checksum(self, names: list[str] | None = None) -> str:
        h = hashlib.sha256()
        for name in names or list(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name].data, dtype="<f8").tobytes())
        return h.hexdigest()

    def train(self, rng: np.random.Generator | None) -> None:
        self.training = True
        self._dropout_rng = rng

    def eval(self) -> None:
        self.training = False
        self._dropout_rng = None

    # -- building blocks ------------------------------------------------------

    def _drop(self, x: Tensor) -> Tensor:
        if not self.training:
            return x
        return ag.dropout(x, self.cfg.dropout, self._dropout_rng)

    def _ln(self, x: Tensor, prefix: str) -> Tensor:
        return ag.layer_norm(x, self.params[prefix + "_g"], self.params[prefix + "_b"], self.cfg.ln_eps)

    def _linear(self, x: Tensor, prefix: str, w: str, b: str) -> Tensor:
        return ag.linear(x, self.params[prefix + w], self.params[prefix + b])

    def _mha(self, x: Tensor, other: Tensor, other_mask: np.ndarray, prefix: str) -> Tensor:
        """Queries from ``x``; keys and values from ``other`` (``other is x`` for self-attention)."""
        q = self._linear(x, prefix, "_wq", "_bq")
        k = self._linear(other, prefix, "_wk", "_bk")
        v = self._linear(other, prefix, "_wv", "_bv")
        ctx = ag.attention(q, k, v, other_mask, self.cfg.heads, self.attention_log)
        return self._linear(ctx, prefix, "_wo", "_bo")

    def _self_attention(self, x: Tensor, mask: np.ndarray, prefix: str) -> Tensor:
        return self._mha(x, x, mask, prefix + ".attn")

    def _cross_attention(self, x: Tensor, other: Tensor, other_mask: np.ndarray, prefix: str) -> Tensor:
        return self._mha(x, other, other_mask, prefix + ".x")

    def _feed_forward(self, x: Tensor, prefix: str) -> Tensor:
        h = ag.gelu(self._linear(x, prefix, ".ff_w1", ".ff_b1"))
        return self._linear(h, prefix, ".ff_w2", ".ff_b2")

    def _block(self, x: Tensor, mask: np.ndarray, prefix: str) -> Tensor:
        x = self._ln(x + self._drop(self._self_attention(x, mask, prefix)), prefix + ".ln1")
        return self._ln(x + self._drop(self._feed_forward(x, prefix)), prefix + ".ln2")

    def _text_embed(self, batch: Batch, layer_norm: bool = True) -> Tensor:
        T = batch.ids.shape[1]
        if T > self.cfg.max_len:
            raise ValueError(f"sequence length {T} exceeds max_len {self.cfg.max_len}")
        x = ag.embedding(self.params["emb.tok"], batch.ids)
        x = x + ag.embedding(self.params["emb.pos"], np.arange(T))
        x = x + ag.embedding(self.params["emb.seg"], batch.segments)
        return x

    def _region_embed(self, regions: np.ndarray) -> Tensor:
        k = regions.shape[1]
        if k > self.cfg.max_regions:
            raise ValueError(f"{k} regions exceed max_regions {self.cfg.max_regions}")
        x = ag.linear(Tensor(regions), self.params["img.proj_w"], self.params["img.proj_b"])
        return x + ag.embedding(self.params["img.pos"], np.arange(k))

    # -- encoders -----------------------------------------------------------------

    def encode_text(self, batch: Batch) -> Tensor:
        x = self._drop(self._ln(self._text_embed(batch), "emb.ln"))
        for layer in range(self.cfg.layers):
            x = self._block(x, batch.attn, f"blk{layer}")
        return x

    def encode_single_stream(self, batch: Batch) -> Tensor:
        if self.cfg.architecture != "single_stream":
            raise ValueError(f"encode_single_stream needs single_stream, stack is {self.cfg.architecture}")
        regions = _regions_or_empty(batch, self.cfg.region_dim)
        B, k = regions.shape[:2]
        txt = self._text_embed(batch)
        img = self._region_embed(regions) + ag.embedding(self.params["emb.seg"], np.full((B, k), REGION_SEGMENT))
        x = self._drop(self._ln(ag.concat([img, txt], axis=1), "emb.ln"))
        mask = np.concatenate([np.ones((B, k), dtype=batch.attn.dtype), batch.attn], axis=1)
        for layer in range(self.cfg.layers):
            x = self._block(x, mask, f"blk{layer}")
        return x

    def encode_two_stream(self, batch: Batch) -> tuple[Tensor, Tensor]:
        if self.cfg.architecture != "two_stream":
            raise ValueError(f"encode_two_stream needs two_stream, stack is {self.cfg.architecture}")
        regions = _regions_or_empty(batch, self.cfg.region_dim)
        if regions.shape[1] == 0:
            raise ValueError("two_stream encoding needs at least one region")
        B, k = regions.shape[:2]
        t = self._drop(self._ln(self._text_embed(batch), "emb.ln"))
        v = self._drop(self._ln(self._region_embed(regions), "img.ln"))
        tmask, vmask = batch.attn, np.ones((B, k), dtype=batch.attn.dtype)
        for layer in range(self.cfg.layers):
            tp, vp = f"txt{layer}", f"img{layer}"
            t = self._ln(t + self._drop(self._self_attention(t, tmask, tp)), tp + ".ln1")
            v = self._ln(v + self._drop(self._self_attention(v, vmask, vp)), vp + ".ln1")
            t_x = self._cross_attention(t, v, vmask, tp)
            v_x = self._cross_attention(v, t, tmask, vp)
            t = self._ln(t + self._drop(t_x), tp + ".lnx")
            v = self._ln(v + self._drop(v_x), vp + ".lnx")
            t = self._ln(t + self._drop(self._feed_forward(t, tp)), tp + ".ln2")
            v = self._ln(v + self._drop(self._feed_forward(v, vp)), vp + ".ln2")
        return v, t

    # -- heads ------------------------------------------------------------------------

    def mlm_logits(self, hidden: Tensor) -> Tensor:
        """Project hidden states onto the (tied) token embedding plus a bias."""
        return ag.matmul(hidden, ag.transpose(self.params["emb.tok"])) + self.params["mlm.bias"]

    def pool(self, batch: Batch) -> Tensor:
        """Pooled [B, d] representation fed to the classifier head."""
        arch = self.cfg.architecture
        if arch == "unimodal":
            if self.cfg.pooling != "cls":
                raise ValueError("product pooling requires the two_stream architecture")
            return self.encode_text(batch)[:, 0, :]
        if arch == "single_stream":
            if self.cfg.pooling != "cls":
                raise ValueError("product pooling requires the two_stream architecture")
            k = 0 if batch.regions is None else batch.regions.shape[1]
            return self.encode_single_stream(batch)[:, k, :]
        img, txt = self.encode_two_stream(batch)
        if self.cfg.pooling == "product":
            return ag.mul(img[:, 0, :], txt[:, 0, :])
        return txt[:, 0, :]

    def classify_pooled(self, pooled: Tensor) -> Tensor:
        if self.cfg.architecture == "unimodal":
            return ag.reshape(ag.linear(pooled, self.params["head.w"], self.params["head.b"]), (-1,))
        h = self._drop(ag.gelu(ag.linear(pooled, self.params["head.w1"], self.params["head.b1"])))
        return ag.reshape(ag.linear(h, self.params["head.w2"], self.params["head.b2"]), (-1,))

    def logits(self, batch: Batch) -> Tensor:
        return self.classify_pooled(self.pool(batch))

    # -- checkpoints -----------------------------------------------------------------

    def save(self, path: str | Path) -> str:
        return save_checkpoint(self, path)

    @classmethod
    def load(cls, path: str | Path, expect: EncoderConfig | None = None) -> "EncoderStack":
        return load_checkpoint(path, expect)


def _regions_or_empty(batch: Batch, region_dim: int) -> np.ndarray:
    if batch.regions is None:
        return np.zeros((len(batch), 0, region_dim))
    r = np.asarray(batch.regions, dtype=np.float64)
    if r.ndim != 3 or r.shape[0] != len(batch) or r.shape[2] != region_dim:
        raise ValueError(f"regions shape {r.shape} incompatible with batch {len(batch)} and region_dim {region_dim}")
    return r


# -- single-sample convenience API ------------------------------------------------------


def _one(seq: TokenSequence, regions=None) -> Batch:
    r = None if regions is None else np.asarray(regions, dtype=np.float64)[None]
    return Batch.from_sequences([seq], r, trim=False)


def encode_text(stack: EncoderStack, seq: TokenSequence) -> Tensor:
    return stack.encode_text(_one(seq))[0]


def encode_single_stream(stack: EncoderStack, regions, seq: TokenSequence) -> Tensor:
    return stack.encode_single_stream(_one(seq, regions))[0]


def encode_two_stream(stack: EncoderStack, regions, seq: TokenSequence) -> tuple[Tensor, Tensor]:
    img, txt = stack.encode_two_stream(_one(seq, regions))
    return img[0], txt[0]


def mlm_logits(stack: EncoderStack, hidden: Tensor) -> Tensor:
    return stack.mlm_logits(hidden)


def classify_unimodal(stack: EncoderStack, seq: TokenSequence) -> Tensor:
    if stack.cfg.architecture != "unimodal":
        raise ValueError(f"classify_unimodal needs a unimodal stack, got {stack.cfg.architecture}")
    return stack.logits(_one(seq))[0]


def pool(stack: EncoderStack, encoder_output) -> Tensor:
    """Pool one sample's encoder output.

    ``encoder_output`` is the hidden matrix for cls pooling (text [CLS] at row
    0, or at row ``k`` when passed as ``(hidden, k)`` for single-stream), and
    the ``(img_hidden, txt_hidden)`` pair for product pooling.
    """
    if stack.cfg.pooling == "product":
        if stack.cfg.architecture != "two_stream":
            raise ValueError("product pooling requires the two_stream architecture")
        img, txt = encoder_output
        return ag.mul(img[0], txt[0])
    if isinstance(encoder_output, tuple):
        first, second = encoder_output
        if isinstance(second, Tensor):  # two-stream pair: pool the text side
            return second[0]
        return first[int(second)]
    return encoder_output[0]


def classify_multimodal(stack: EncoderStack, pooled: Tensor) -> Tensor:
    if not stack.cfg.multimodal:
        raise ValueError("classify_multimodal needs a multimodal stack")
    return stack.classify_pooled(ag.reshape(pooled, (1, -1)))[0]


# -- checkpoint file ---------------------------------------------------------------------

CHECKPOINT_MAGIC = b"CESM"


def save_checkpoint(stack: EncoderStack, path: str | Path) -> str:
    """Layout: magic, u32 header length, JSON header, float64 params, sha256 of everything before."""
    header = json.dumps(
        {"config": json.loads(stack.cfg.to_json()), "seed": stack.seed, "params": [[n, list(p.shape)] for n, p in stack.params.items()]},
        sort_keys=True,
    ).encode()
    body = CHECKPOINT_MAGIC + struct.pack("<I", len(header)) + header
    body += b"".join(np.ascontiguousarray(p.data, dtype="<f8").tobytes() for p in stack.params.values())
    digest = hashlib.sha256(body).digest()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(body + digest)
    return digest.hex()


def load_checkpoint(path: str | Path, expect: EncoderConfig | None = None) -> EncoderStack:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (magic {raw[:4]!r})")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ValueError(f"{path}: checksum mismatch, file is corrupt")
    (hlen,) = struct.unpack_from("<I", body, 4)
    header = json.loads(body[8 : 8 + hlen])
    cfg = EncoderConfig(**header["config"])
    if expect is not None and expect != cfg:
        raise ValueError(f"{path}: checkpoint config {cfg} does not match expected {expect}")
    stack = EncoderStack(cfg, seed=header["seed"])
    off = 8 + hlen
    for name, shape in header["params"]:
        n = int(np.prod(shape))
        stack.params[name].data = np.frombuffer(body, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64)
        off += 8 * n
    return stack

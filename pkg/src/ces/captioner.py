"""Caption providers and cached corpus enrichment.

Two providers: a template oracle that knows each synthetic sample's concept
(optionally substituting a wrong one), and an HTTP client for the IBM MAX
Image Caption Generator ``/model/predict`` protocol.
"""

from __future__ import annotations

import json
import logging
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import requests

from .data import PROTECTED, NEUTRAL, EnrichedSample, MemeSample, substream

log = logging.getLogger(__name__)

MAX_CAPTION_WORDS = 15
ENDPOINT_ENV = "CES_CAPTION_ENDPOINT"

DEFAULT_TEMPLATES = (
    "a photo of a {} in a field",
    "a close up of a {}",
    "a {} standing next to a wall",
    "a picture of a {} on the street",
    "there is a {} in this image",
    "a black and white photo of a {}",
)


class CaptionError(RuntimeError):
    """Base class for provider failures."""


class RetryableError(CaptionError):
    """Network failure or timeout that survived every retry."""


class ProviderError(CaptionError):
    """The service answered but reported a failure or returned no predictions."""


class ProtocolError(CaptionError):
    """The service answered with a body that does not follow the predict protocol."""


class EnrichError(RuntimeError):
    def __init__(self, message: str, done: int, cache_path: Path):
        super().__init__(message)
        self.done = done
        self.cache_path = cache_path


def cap_words(caption: str, limit: int = MAX_CAPTION_WORDS) -> str:
    return " ".join(caption.split()[:limit])


@dataclass
class CaptionRecord:
    sample_id: int
    caption: str
    source: str
    provider_meta: str = ""

    def __post_init__(self):
        self.caption = cap_words(self.caption)
        if not self.caption:
            raise ProviderError(f"empty caption for sample {self.sample_id}")


@dataclass
class OracleConfig:
    noise_rate: float = 0.0
    templates: tuple[str, ...] = DEFAULT_TEMPLATES
    concepts: tuple[str, ...] = PROTECTED + NEUTRAL
    seed: int = 11

    def __post_init__(self):
        if not 0.0 <= self.noise_rate <= 1.0:
            raise ValueError(f"noise_rate {self.noise_rate} outside [0, 1]")
        for t in self.templates:
            if t.count("{}") != 1:
                raise ValueError(f"template {t!r} must contain exactly one concept slot")
        if len(set(self.concepts)) < 2:
            raise ValueError("the oracle needs at least two concepts to substitute")


def caption_oracle(sample: MemeSample, cfg: OracleConfig) -> CaptionRecord:
    if sample.concept is None:
        raise CaptionError(
            f"sample {sample.id} carries no generator concept; use the HTTP provider for real images"
        )
    rng = substream(cfg.seed, "caption", sample.id)
    t_idx = int(rng.integers(len(cfg.templates)))
    concept = sample.concept
    if rng.random() < cfg.noise_rate:
        others = [c for c in cfg.concepts if c != sample.concept]
        concept = others[int(rng.integers(len(others)))]
    return CaptionRecord(sample.id, cfg.templates[t_idx].format(concept), "oracle", f"template:{t_idx}")


def caption_http(
    image_path: str | Path,
    endpoint: str,
    timeout: float = 10.0,
    attempts: int = 3,
    backoff: float = 0.5,
    sample_id: int = -1,
    session: requests.Session | None = None,
) -> CaptionRecord:
    """POST an image to ``{endpoint}/model/predict`` and keep the top-1 caption."""
    url = endpoint.rstrip("/") + "/model/predict"
    data = Path(image_path).read_bytes()
    http = session or requests
    last: Exception | None = None
    for attempt in range(attempts):
        try:
            resp = http.post(url, files={"image": (Path(image_path).name, data)}, timeout=timeout)
            break
        except (requests.ConnectionError, requests.Timeout) as exc:
            last = exc
            if attempt + 1 < attempts:
                time.sleep(backoff * 2**attempt)
    else:
        raise RetryableError(f"{url}: failed after {attempts} attempts: {last}") from last

    excerpt = resp.text[:200]
    try:
        body = resp.json()
    except ValueError:
        raise ProtocolError(f"{url}: HTTP {resp.status_code}, non-JSON body: {excerpt!r}") from None
    if not isinstance(body, dict):
        raise ProtocolError(f"{url}: expected a JSON object, got: {excerpt!r}")
    if body.get("status") != "ok":
        raise ProviderError(f"{url}: status {body.get('status')!r}: {excerpt!r}")
    preds = body.get("predictions")
    if not isinstance(preds, list):
        raise ProtocolError(f"{url}: 'predictions' missing or not a list: {excerpt!r}")
    if not preds:
        raise ProviderError(f"{url}: empty predictions: {excerpt!r}")
    top = preds[0]
    if not isinstance(top, dict) or not isinstance(top.get("caption"), str):
        raise ProtocolError(f"{url}: prediction without a caption string: {excerpt!r}")
    return CaptionRecord(sample_id, top["caption"], "http", url)


# -- providers ---------------------------------------------------------------


class Provider(Protocol):
    calls: int

    def __call__(self, sample: MemeSample) -> CaptionRecord: ...


class OracleProvider:
    def __init__(self, cfg: OracleConfig):
        self.cfg = cfg
        self.calls = 0
        self._lock = threading.Lock()

    def __call__(self, sample: MemeSample) -> CaptionRecord:
        with self._lock:
            self.calls += 1
        return caption_oracle(sample, self.cfg)


class HttpProvider:
    def __init__(
        self,
        endpoint: str | None = None,
        timeout: float = 10.0,
        attempts: int = 3,
        backoff: float = 0.5,
        root: str | Path | None = None,
    ):
        """``root`` resolves relative ``img`` paths (normally the corpus directory)."""
        endpoint = os.environ.get(ENDPOINT_ENV) or endpoint
        if not endpoint:
            raise ValueError(f"no caption endpoint configured (set {ENDPOINT_ENV} or pass one)")
        self.endpoint = endpoint
        self.timeout = timeout
        self.attempts = attempts
        self.backoff = backoff
        self.root = Path(root) if root is not None else None
        self.calls = 0
        self._lock = threading.Lock()

    def __call__(self, sample: MemeSample) -> CaptionRecord:
        if not sample.img:
            raise CaptionError(f"sample {sample.id} has no image path")
        with self._lock:
            self.calls += 1
        path = Path(sample.img)
        if self.root is not None and not path.is_absolute():
            path = self.root / path
        return caption_http(path, self.endpoint, self.timeout, self.attempts, self.backoff, sample_id=sample.id)


# -- cache + enrichment ----------------------------------------------------------


def read_cache(path: str | Path) -> dict[int, dict]:
    p = Path(path)
    cache: dict[int, dict] = {}
    if not p.exists():
        return cache
    for line in p.read_text(encoding="utf-8").splitlines():
        if line.strip():
            row = json.loads(line)
            cache[int(row["id"])] = row
    return cache


def enrich(
    samples: Sequence[MemeSample],
    provider: Provider,
    cache_path: str | Path,
    jobs: int = 1,
) -> list[EnrichedSample]:
    """Attach a caption to every sample, reading and appending the JSONL cache.

    Output order follows ``samples``. Samples already cached cost no provider
    call. On a provider failure the cache keeps every caption obtained so far.
    """
    cache_path = Path(cache_path)
    cache_path.parent.mkdir(parents=True, exist_ok=True)
    cache = read_cache(cache_path)
    todo = [s for s in samples if s.id not in cache]
    log.info("enrich: %d cached, %d to caption", len(samples) - len(todo), len(todo))

    done = 0
    with open(cache_path, "a", encoding="utf-8") as fh:
        pool = ThreadPoolExecutor(max_workers=max(1, jobs)) if jobs > 1 and todo else None
        try:
            results = pool.map(_safe_call(provider), todo) if pool else map(_safe_call(provider), todo)
            for s, res in zip(todo, results):
                if isinstance(res, Exception):
                    raise EnrichError(
                        f"captioning sample {s.id} failed: {res}. {done} new captions were cached in "
                        f"{cache_path}; rerun the same command to resume",
                        done,
                        cache_path,
                    ) from res
                row = {"id": s.id, "caption": res.caption, "source": res.source}
                fh.write(json.dumps(row) + "\n")
                fh.flush()
                cache[s.id] = row
                done += 1
        finally:
            if pool:
                pool.shutdown(wait=True, cancel_futures=True)

    out = []
    for s in samples:
        fields = {k: getattr(s, k) for k in MemeSample.__dataclass_fields__}
        out.append(EnrichedSample(caption=cap_words(cache[s.id]["caption"]), **fields))
    return out


def _safe_call(provider: Provider):
    def call(sample):
        try:
            return provider(sample)
        except Exception as exc:  # surfaced in input order by enrich()
            return exc

    return call

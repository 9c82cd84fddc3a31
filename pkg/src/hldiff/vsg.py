"""Caption generation: structured prompts, a VLM client, and a token budget.

Each image gets a prompt built from dataset metadata (modality plus
per-category visual feature strings), the endpoint's free-text description
comes back, and anything over 120 tokens is pushed through a "simplify:"
round-trip before falling back to hard truncation. Records carry the
tokenizer id and a prompt hash so a rerun can tell which captions are
already up to date.
"""

import base64
import json
import logging
import os
import re
import threading
import time
import zlib
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

from .tokenization import WhitespacePunctTokenizer

log = logging.getLogger(__name__)

TOKEN_BUDGET = 120
SIMPLIFY_MIN = 90
DEFAULT_RETRIES = 3

PROMPT_TEMPLATE = (
    "{art} {modality} image of {category}. "
    "Please describe the {modality} image of {category} using the following "
    "visual features: {visual_features}. "
    "Start with '{art} {modality} image of {category}' and ensure the "
    "description does not exceed 100 words."
)


class VlmError(RuntimeError):
    pass


def article_for(modality: str) -> str:
    return "An" if modality[:1].lower() in "aeiou" else "A"


@dataclass
class VsgRequest:
    modality: str
    category: str
    visual_features: str
    image_b64: str

    def __post_init__(self):
        for name in ("modality", "category", "visual_features", "image_b64"):
            if not getattr(self, name):
                raise ValueError(f"VsgRequest.{name} must be non-empty")


@dataclass
class CaptionRecord:
    image_path: str
    caption: str | None
    token_count: int | None
    source: str | None  # vlm | simplified | simple_template
    category: str
    modality: str
    tokenizer_id: str
    prompt_hash: str
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None

    def to_json(self) -> str:
        return json.dumps(
            {
                "image_path": self.image_path,
                "caption": self.caption,
                "token_count": self.token_count,
                "source": self.source,
                "category": self.category,
                "modality": self.modality,
                "tokenizer_id": self.tokenizer_id,
                "prompt_hash": self.prompt_hash,
                "error": self.error,
            }
        )

    @classmethod
    def from_json(cls, line: str) -> "CaptionRecord":
        d = json.loads(line)
        return cls(**d)


def build_prompt(req: VsgRequest) -> str:
    return PROMPT_TEMPLATE.format(
        art=article_for(req.modality),
        modality=req.modality,
        category=req.category,
        visual_features=req.visual_features,
    )


def simple_caption(modality: str, category: str) -> str:
    if not modality or not category:
        raise ValueError("modality and category must be non-empty")
    return f"{article_for(modality)} {modality} image of {category}"


def prompt_hash(prompt: str) -> str:
    return f"{zlib.crc32(prompt.encode('utf-8')):08x}"


def encode_image(path) -> str:
    return base64.b64encode(Path(path).read_bytes()).decode("ascii")


def file_fingerprint(path) -> int:
    return zlib.crc32(Path(path).read_bytes())


class VlmClient(Protocol):
    def generate(self, prompt: str, image_b64: str | None = None) -> str: ...


class HttpVlmClient:
    """POSTs {model, prompt, image} JSON and expects {"text": ...} back.

    Auth token is read from the environment at call time so the pipeline can
    be constructed before credentials exist. Retries with exponential backoff.
    """

    def __init__(self, url: str, model: str = "default",
                 auth_env: str | None = None, auth_header: str = "Authorization",
                 retries: int = DEFAULT_RETRIES, timeout: float = 60.0,
                 backoff: float = 1.0):
        self.url = url
        self.model = model
        self.auth_env = auth_env
        self.auth_header = auth_header
        self.retries = retries
        self.timeout = timeout
        self.backoff = backoff

    def _headers(self):
        headers = {"Content-Type": "application/json"}
        if self.auth_env:
            token = os.environ.get(self.auth_env)
            if not token:
                raise VlmError(f"auth variable {self.auth_env} is not set")
            headers[self.auth_header] = f"Bearer {token}"
        return headers

    def generate(self, prompt: str, image_b64: str | None = None) -> str:
        import requests

        body = {"model": self.model, "prompt": prompt, "image": image_b64}
        last_err = None
        for attempt in range(self.retries):
            if attempt:
                time.sleep(self.backoff * 2 ** (attempt - 1))
            try:
                resp = requests.post(self.url, json=body,
                                     headers=self._headers(),
                                     timeout=self.timeout)
                if resp.status_code != 200:
                    last_err = VlmError(f"endpoint returned {resp.status_code}")
                    continue
                return str(resp.json().get("text", ""))
            except VlmError as e:
                raise e
            except Exception as e:
                last_err = e
        raise VlmError(f"request failed after {self.retries} attempts: {last_err}")


class MockVlmClient:
    """Deterministic offline stand-in with fault injection hooks.

    Captions are the prompt's required opening phrase plus filler words keyed
    by the image fingerprint, padded to exactly `caption_tokens` whitespace
    words. "simplify:" prompts return the first `simplify_tokens` words.
    """

    _START_RE = re.compile(r"Start with '([^']*)'")

    def __init__(self, caption_tokens: int = 40, simplify_tokens: int = 100,
                 fail_fingerprints=(), empty_fingerprints=()):
        self.caption_tokens = caption_tokens
        self.simplify_tokens = simplify_tokens
        self.fail_fingerprints = set(fail_fingerprints)
        self.empty_fingerprints = set(empty_fingerprints)
        self.calls = 0
        self._lock = threading.Lock()

    def generate(self, prompt: str, image_b64: str | None = None) -> str:
        with self._lock:
            self.calls += 1
        if prompt.startswith("simplify: "):
            words = prompt[len("simplify: "):].split()
            out = words[: self.simplify_tokens]
            out += [f"s{i}" for i in range(self.simplify_tokens - len(out))]
            return " ".join(out)
        if image_b64 is None:
            raise VlmError("describe request without an image")
        fp = zlib.crc32(base64.b64decode(image_b64))
        if fp in self.fail_fingerprints:
            raise VlmError("injected endpoint failure")
        if fp in self.empty_fingerprints:
            return ""
        m = self._START_RE.search(prompt)
        words = (m.group(1).split() if m else ["A", "medical", "image"])
        words = words + ["showing"]
        words += [f"pattern{(fp + 31 * i) % 9973}"
                  for i in range(max(0, self.caption_tokens - len(words)))]
        return " ".join(words[: max(self.caption_tokens, len(words))])


def enforce_budget(caption: str, client: VlmClient, tokenizer=None,
                   retries: int = DEFAULT_RETRIES):
    """(text, token_count, source) with token_count <= 120 guaranteed."""
    if not caption or not caption.strip():
        raise VlmError("empty caption")
    tok = tokenizer or WhitespacePunctTokenizer()
    count = tok.count(caption)
    if count <= TOKEN_BUDGET:
        return caption, count, "vlm"
    simplify_prompt = f"simplify: {caption}"
    for _ in range(retries):
        try:
            candidate = client.generate(simplify_prompt)
        except Exception as e:
            log.warning("simplifier unavailable (%s), truncating", e)
            break
        n = tok.count(candidate)
        if SIMPLIFY_MIN <= n <= TOKEN_BUDGET:
            return candidate, n, "simplified"
    log.warning("simplification failed to meet the %d-%d window, truncating",
                SIMPLIFY_MIN, TOKEN_BUDGET)
    truncated = tok.truncate(caption, TOKEN_BUDGET)
    return truncated, tok.count(truncated), "simplified"


def caption_image(req: VsgRequest, client: VlmClient, image_path: str,
                  tokenizer=None, retries: int = DEFAULT_RETRIES) -> CaptionRecord:
    tok = tokenizer or WhitespacePunctTokenizer()
    prompt = build_prompt(req)
    text = client.generate(prompt, req.image_b64)
    if not text or not text.strip():
        raise VlmError("endpoint returned empty text")
    final, count, source = enforce_budget(text, client, tok, retries)
    return CaptionRecord(
        image_path=image_path, caption=final, token_count=count, source=source,
        category=req.category, modality=req.modality,
        tokenizer_id=tok.tokenizer_id, prompt_hash=prompt_hash(prompt),
    )


@dataclass
class DatasetMeta:
    """Per-dataset captioning metadata: modality plus visual feature strings."""

    modality: str
    visual_features: dict  # category -> feature description

    def __post_init__(self):
        if not self.modality:
            raise ValueError("modality must be non-empty")
        for cat, feats in self.visual_features.items():
            if not feats:
                raise ValueError(f"empty visual features for category {cat!r}")

    def features_for(self, category: str) -> str:
        if category not in self.visual_features:
            raise KeyError(f"no visual features for category {category!r}")
        return self.visual_features[category]

    @classmethod
    def load(cls, path) -> "DatasetMeta":
        with open(path) as f:
            d = json.load(f)
        return cls(modality=d["modality"], visual_features=d["visual_features"])

    def save(self, path):
        with open(path, "w") as f:
            json.dump({"modality": self.modality,
                       "visual_features": self.visual_features}, f, indent=2)


@dataclass
class PipelineResult:
    n_total: int
    n_done: int
    n_fetched: int
    n_failed: int
    failures: list = field(default_factory=list)

    @property
    def complete(self) -> bool:
        return self.n_failed == 0


class CaptionPipeline:
    """Fills a caption manifest for a dataset manifest, resumably.

    Completed (image_path, prompt_hash) pairs are skipped on rerun; failed or
    missing entries are fetched again. Requests run on a small thread pool,
    writes go through the single coordinating thread in completion order.
    """

    def __init__(self, client: VlmClient, meta: DatasetMeta, tokenizer=None,
                 parallelism: int = 4, retries: int = DEFAULT_RETRIES,
                 simple_only: bool = False):
        if parallelism < 1:
            raise ValueError("parallelism must be >= 1")
        self.client = client
        self.meta = meta
        self.tokenizer = tokenizer or WhitespacePunctTokenizer()
        self.parallelism = parallelism
        self.retries = retries
        self.simple_only = simple_only

    def _expected_hash(self, category: str) -> str:
        if self.simple_only:
            return prompt_hash(simple_caption(self.meta.modality, category))
        req_prompt = PROMPT_TEMPLATE.format(
            art=article_for(self.meta.modality), modality=self.meta.modality,
            category=category,
            visual_features=self.meta.features_for(category),
        )
        return prompt_hash(req_prompt)

    def _fetch_one(self, image_path: str, category: str) -> CaptionRecord:
        if self.simple_only:
            text = simple_caption(self.meta.modality, category)
            return CaptionRecord(
                image_path=image_path, caption=text,
                token_count=self.tokenizer.count(text), source="simple_template",
                category=category, modality=self.meta.modality,
                tokenizer_id=self.tokenizer.tokenizer_id,
                prompt_hash=prompt_hash(text),
            )
        req = VsgRequest(
            modality=self.meta.modality, category=category,
            visual_features=self.meta.features_for(category),
            image_b64=encode_image(image_path),
        )
        return caption_image(req, self.client, image_path,
                             self.tokenizer, self.retries)

    def run(self, manifest, out_path) -> PipelineResult:
        """Caption every record in `manifest`, appending to `out_path`."""
        out_path = Path(out_path)
        done = {}
        if out_path.exists():
            for line in out_path.read_text().splitlines():
                if not line.strip():
                    continue
                rec = CaptionRecord.from_json(line)
                if rec.ok:
                    done[(rec.image_path, rec.prompt_hash)] = rec

        todo = []
        n_done = 0
        for rec in manifest.records:
            key = (rec.image_path, self._expected_hash(rec.category))
            if key in done:
                n_done += 1
            else:
                todo.append((rec.image_path, rec.category))

        n_fetched = 0
        failures = []
        with open(out_path, "a") as out, \
                ThreadPoolExecutor(max_workers=self.parallelism) as pool:
            futures = {
                pool.submit(self._fetch_one, path, cat): (path, cat)
                for path, cat in todo
            }
            for fut in as_completed(futures):
                path, cat = futures[fut]
                try:
                    record = fut.result()
                    n_fetched += 1
                except Exception as e:
                    record = CaptionRecord(
                        image_path=path, caption=None, token_count=None,
                        source=None, category=cat, modality=self.meta.modality,
                        tokenizer_id=self.tokenizer.tokenizer_id,
                        prompt_hash=self._expected_hash(cat), error=str(e),
                    )
                    failures.append(path)
                    log.warning("caption failed for %s: %s", path, e)
                out.write(record.to_json() + "\n")
                out.flush()
        return PipelineResult(
            n_total=len(manifest.records), n_done=n_done,
            n_fetched=n_fetched, n_failed=len(failures), failures=failures,
        )


def load_caption_map(path) -> dict:
    """image_path -> CaptionRecord, keeping the last successful record."""
    out = {}
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            rec = CaptionRecord.from_json(line)
            if rec.ok:
                out[rec.image_path] = rec
    return out


def assert_budget(records) -> None:
    """Hard gate before training: every caption within the token budget."""
    for rec in records:
        if not rec.ok:
            raise ValueError(f"failed caption record for {rec.image_path}")
        if rec.token_count > TOKEN_BUDGET:
            raise ValueError(
                f"{rec.image_path}: {rec.token_count} tokens exceeds "
                f"{TOKEN_BUDGET}"
            )

"""
Uniform access to the model backends the cascade relies on.

One ``ReasoningGateway`` fronts every reasoner, pairwise reranker, listwise
ranker and zero-shot MLLM judge. Requests are rendered from named prompt
templates, answered by a transport chosen from the backend endpoint
(``sim``, ``http(s)://`` or ``ollama://<model>``), cached on disk and retried
on timeouts.
"""

from typing import Callable, Dict, List, Optional, Sequence, Tuple
from dataclasses import dataclass, field
import hashlib
import json
import logging
import math
import os
import re
import socket
import string
import threading
import time
import urllib.error
import urllib.request

import ollama
import yaml

from core_model import (
    CascadeError,
    ConfigError,
    EcrTrace,
    Item,
    KIND_ORIGINAL,
    KIND_QAR,
    PreconditionError,
)

logger = logging.getLogger(__name__)

KIND_REASONER = "reasoner"
KIND_PAIRWISE = "pairwise_reranker"
KIND_LISTWISE = "listwise_ranker"
KIND_ZERO_SHOT = "zero_shot_mllm"
BACKEND_KINDS = (KIND_REASONER, KIND_PAIRWISE, KIND_LISTWISE, KIND_ZERO_SHOT)

OP_GENERATE_ECR = "generate_ecr"
OP_REWRITE_QAR = "rewrite_qar"
OP_SCORE_PAIR = "score_pair"
OP_RANK_LISTWISE = "rank_listwise"

DEFAULT_TEMPLATES_PATH = os.path.join(os.path.dirname(os.path.abspath(__file__)), "config", "templates.yaml")
DEFAULT_LISTWISE_MAX = 50
RELEVANT_BASE = 0.9
IRRELEVANT_BASE = 0.1


class GatewayError(CascadeError):
    pass


class BackendTimeoutError(GatewayError):
    """Retryable."""


class BackendFailureError(GatewayError):
    pass


class ResponseParseError(GatewayError):
    def __init__(self, message: str, raw_text: str = ""):
        super().__init__(message)
        self.raw_text = raw_text


@dataclass(frozen=True)
class BackendDescriptor:
    backend_id: str
    kind: str
    endpoint: str = "sim"
    timeout_ms: int = 30000
    max_in_flight: int = 4

    def __post_init__(self):
        if self.kind not in BACKEND_KINDS:
            raise ConfigError(f"Backend '{self.backend_id}' has unknown kind '{self.kind}'")
        if self.max_in_flight < 1:
            raise ConfigError(f"Backend '{self.backend_id}': max_in_flight must be >= 1")
        if self.timeout_ms <= 0:
            raise ConfigError(f"Backend '{self.backend_id}': timeout_ms must be > 0")

    @classmethod
    def from_dict(cls, data: Dict) -> "BackendDescriptor":
        try:
            return cls(
                backend_id=data["backend_id"],
                kind=data["kind"],
                endpoint=data.get("endpoint", "sim"),
                timeout_ms=int(data.get("timeout_ms", 30000)),
                max_in_flight=int(data.get("max_in_flight", 4)),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"Bad backend entry {data!r}: {e}") from e


@dataclass(frozen=True)
class PairScore:
    query_id: str
    candidate_id: str
    score: float
    backend_id: str

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ResponseParseError(f"Pair score {self.score} outside [0, 1]", str(self.score))


@dataclass(frozen=True)
class SimBackendConfig:
    """
    Knobs of the simulated judge.

    fidelity is the probability that the judge agrees with the planted
    relevance; rewritten_fidelity applies to QAR-rewritten traces and
    defaults to fidelity.
    """
    seed: int = 0
    fidelity: float = 1.0
    noise_scale: float = 0.0
    rewritten_fidelity: Optional[float] = None
    distractor_base: float = IRRELEVANT_BASE

    def __post_init__(self):
        for name in ("fidelity", "rewritten_fidelity", "distractor_base"):
            value = getattr(self, name)
            if value is not None and not 0.0 <= value <= 1.0:
                raise ConfigError(f"Sim backend {name} must lie in [0, 1], got {value}")
        if self.noise_scale < 0:
            raise ConfigError(f"Sim backend noise_scale must be >= 0, got {self.noise_scale}")

    @classmethod
    def from_dict(cls, data: Optional[Dict]) -> "SimBackendConfig":
        try:
            return cls(**(data or {}))
        except TypeError as e:
            raise ConfigError(f"Bad sim backend settings: {e}") from e


class TokenBudget:
    """Counts logical backend calls and prompt characters; safe across threads."""

    def __init__(self):
        self._lock = threading.Lock()
        self.backend_calls = 0
        self.chars_sent = 0

    def record(self, chars: int) -> None:
        with self._lock:
            self.backend_calls += 1
            self.chars_sent += chars

    def to_dict(self) -> Dict[str, int]:
        with self._lock:
            return {"backend_calls": self.backend_calls, "chars_sent": self.chars_sent}


def planted_key(query_id: str) -> str:
    """Marker the synthetic corpus writes into traces relevant to ``query_id``."""
    return f"⟦rel:{query_id}⟧"


def near_key(query_id: str) -> str:
    """Marker for near-duplicate distractors of ``query_id``'s positive."""
    return f"⟦near:{query_id}⟧"


_MARKER_RE = re.compile("⟦(?:rel|near):[^⟧]*⟧")


def _unit_draw(seed: int, *parts: str) -> float:
    """Deterministic uniform draw in [0, 1) keyed by seed and parts."""
    key = "\x1f".join((str(seed),) + parts).encode("utf-8")
    value = int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "little")
    return value / 2.0 ** 64


def _sim_score(query_id: str, candidate_id: str, text: str, generation_kind: str,
               cfg: SimBackendConfig) -> float:
    relevant = planted_key(query_id) in text
    fidelity = cfg.fidelity
    if generation_kind == KIND_QAR and cfg.rewritten_fidelity is not None:
        fidelity = cfg.rewritten_fidelity
    flipped = _unit_draw(cfg.seed, "flip", query_id, candidate_id) < 1.0 - fidelity
    if relevant:
        base = IRRELEVANT_BASE if flipped else RELEVANT_BASE
    elif flipped:
        base = RELEVANT_BASE
    else:
        base = cfg.distractor_base if near_key(query_id) in text else IRRELEVANT_BASE
    noise = (2.0 * _unit_draw(cfg.seed, "noise", query_id, candidate_id) - 1.0) * cfg.noise_scale
    return min(1.0, max(0.0, base + noise))


def sim_backend_score(query: Item, candidate: Item, cfg: SimBackendConfig) -> float:
    """
    Simulated relevance of ``candidate`` to ``query``.

    Planted relevance is read from the candidate's trace (or its text when it
    has none). Fully determined by (seed, query.id, candidate.id).
    """
    if candidate.ecr is not None:
        return _sim_score(query.id, candidate.id, candidate.ecr.text, candidate.ecr.generation_kind, cfg)
    return _sim_score(query.id, candidate.id, candidate.text_or_ecr, KIND_ORIGINAL, cfg)


def mllm_zero_shot_score(logit_yes: float, logit_no: float) -> float:
    """Normalize the yes-token logit against the no-token logit (two-way softmax)."""
    if not (math.isfinite(logit_yes) and math.isfinite(logit_no)):
        raise ResponseParseError(f"Non-finite logits ({logit_yes}, {logit_no})", f"{logit_yes} {logit_no}")
    margin = logit_yes - logit_no
    if margin >= 0:
        return 1.0 / (1.0 + math.exp(-margin))
    shifted = math.exp(margin)
    return shifted / (1.0 + shifted)


_ECR_RE = re.compile(r"<think>(.*?)</think>\s*(.*)", re.DOTALL)


def parse_ecr_response(raw_text: str) -> Tuple[str, str]:
    """Split ``<think>x</think> y`` into (x, y)."""
    match = _ECR_RE.search(raw_text or "")
    if not match:
        raise ResponseParseError("Response lacks <think>...</think> delimiters", raw_text)
    think, summary = match.group(1).strip(), match.group(2).strip()
    if not summary:
        raise ResponseParseError("Response has an empty summary after </think>", raw_text)
    return think, summary


def parse_listwise_response(raw_text: str, n: int) -> List[int]:
    """
    Repair a listwise ranking into a permutation of 1..n.

    Integer tokens are read in order; out-of-range and repeated indices are
    dropped (first occurrence wins) and missing indices are appended in
    ascending order.
    """
    if n < 1:
        raise PreconditionError(f"Listwise ranking needs n >= 1, got {n}")
    seen = set()
    order = []
    for token in re.findall(r"-?\d+", raw_text or ""):
        index = int(token)
        if 1 <= index <= n and index not in seen:
            seen.add(index)
            order.append(index)
    if not order:
        raise ResponseParseError(f"No index in 1..{n} found in listwise response", raw_text)
    order.extend(i for i in range(1, n + 1) if i not in seen)
    return order


class PromptTemplates:
    """Named prompt templates with ``{slot}`` placeholders."""

    def __init__(self, templates: Dict[str, str]):
        self.templates = dict(templates)

    @classmethod
    def load(cls, path: Optional[str] = None) -> "PromptTemplates":
        path = path or DEFAULT_TEMPLATES_PATH
        try:
            with open(path, "r", encoding="utf-8") as f:
                data = yaml.safe_load(f) or {}
        except OSError as e:
            raise ConfigError(f"Cannot read prompt templates at {path}: {e}") from e
        templates = data.get("templates", data)
        if not isinstance(templates, dict):
            raise ConfigError(f"{path}: 'templates' must be a mapping")
        return cls({str(k): str(v) for k, v in templates.items()})

    def has(self, template_id: str) -> bool:
        return template_id in self.templates

    def slots(self, template_id: str) -> List[str]:
        return [name for _, name, _, _ in string.Formatter().parse(self.require(template_id)) if name]

    def require(self, template_id: str) -> str:
        try:
            return self.templates[template_id]
        except KeyError:
            raise ConfigError(f"Prompt template '{template_id}' is not registered") from None

    def render(self, template_id: str, slots: Dict[str, str]) -> str:
        template = self.require(template_id)
        missing = [name for name in self.slots(template_id) if name not in slots]
        if missing:
            raise ConfigError(f"Template '{template_id}' needs slots: {', '.join(missing)}")
        return template.format_map(slots)


@dataclass
class BackendRequest:
    operation: str
    template_id: str
    slots: Dict[str, str]
    prompt: str
    n: Optional[int] = None
    # identities the simulated backend needs; never sent over the wire
    meta: Dict = field(default_factory=dict)

    def wire_body(self) -> Dict:
        body = {"operation": self.operation, "template_id": self.template_id, "slots": self.slots}
        if self.n is not None:
            body["n"] = self.n
        return body


class SimulatedBackend:
    """Deterministic stand-in for every backend kind, driven by planted markers."""

    def __init__(self, backend: BackendDescriptor, cfg: SimBackendConfig):
        self.backend = backend
        self.cfg = cfg

    def send(self, request: BackendRequest) -> Dict:
        handler = {
            OP_GENERATE_ECR: self._generate_ecr,
            OP_REWRITE_QAR: self._rewrite_qar,
            OP_SCORE_PAIR: self._score_pair,
            OP_RANK_LISTWISE: self._rank_listwise,
        }.get(request.operation)
        if handler is None:
            return {"ok": False, "error": f"unsupported operation {request.operation}"}
        return handler(request.meta)

    def _generate_ecr(self, meta: Dict) -> Dict:
        body = meta.get("content_text") or f"Media at {meta.get('media_ref')}."
        shade = _unit_draw(self.cfg.seed, "ecr", meta["item_id"])
        think = f"Task: {meta.get('instruction', '')}. Reading {meta['item_id']} (pass {shade:.6f})."
        return {"ok": True, "text": f"<think>{think}</think> {body}"}

    def _rewrite_qar(self, meta: Dict) -> Dict:
        query_id = meta["query_id"]
        original = meta["original_summary"]
        kept = _MARKER_RE.sub("", original).strip()
        if planted_key(query_id) in original:
            focus = f"The content shows what the query describes: {meta['query_text']} {planted_key(query_id)}"
        elif near_key(query_id) in original:
            focus = f"Parts resemble the query but details differ. {near_key(query_id)}"
        else:
            focus = "No detail supports the query."
        think = f"Checking {meta['candidate_id']} against query {query_id}."
        return {"ok": True, "text": f"<think>{think}</think> {kept} {focus}".strip()}

    def _score_pair(self, meta: Dict) -> Dict:
        score = _sim_score(meta["query_id"], meta["candidate_id"], meta["candidate_text"],
                           meta["generation_kind"], self.cfg)
        if self.backend.kind == KIND_ZERO_SHOT:
            p = min(max(score, 1e-6), 1.0 - 1e-6)
            return {"ok": True, "logit_yes": math.log(p), "logit_no": math.log(1.0 - p)}
        return {"ok": True, "score": score}

    def _rank_listwise(self, meta: Dict) -> Dict:
        scores = [
            _sim_score(meta["query_id"], cid, text, kind, self.cfg)
            for cid, text, kind in zip(meta["candidate_ids"], meta["candidate_texts"], meta["generation_kinds"])
        ]
        order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
        return {"ok": True, "text": ", ".join(str(i + 1) for i in order)}


class HttpTransport:
    """POSTs the JSON request body to an HTTP scorer service."""

    def __init__(self, backend: BackendDescriptor, opener: Optional[Callable] = None):
        self.backend = backend
        self.opener = opener or urllib.request.urlopen

    def send(self, request: BackendRequest) -> Dict:
        payload = json.dumps(request.wire_body()).encode("utf-8")
        http_request = urllib.request.Request(
            self.backend.endpoint,
            data=payload,
            headers={"Content-Type": "application/json"},
            method="POST",
        )
        try:
            with self.opener(http_request, timeout=self.backend.timeout_ms / 1000.0) as response:
                raw = response.read().decode("utf-8")
        except socket.timeout as e:
            raise BackendTimeoutError(f"{self.backend.backend_id}: timed out") from e
        except urllib.error.URLError as e:
            if isinstance(e.reason, socket.timeout):
                raise BackendTimeoutError(f"{self.backend.backend_id}: timed out") from e
            raise BackendFailureError(f"{self.backend.backend_id}: {e}") from e
        try:
            body = json.loads(raw)
        except json.JSONDecodeError as e:
            raise ResponseParseError(f"{self.backend.backend_id}: response is not JSON", raw) from e
        if not isinstance(body, dict):
            raise ResponseParseError(f"{self.backend.backend_id}: response is not an object", raw)
        return body


_NUMBER_RE = re.compile(r"-?\d+(?:\.\d+)?(?:[eE][-+]?\d+)?")


class OllamaTransport:
    """
    Local models through Ollama.

    Text operations return the reply verbatim. Pairwise scoring reads the
    first number in the reply as the [0, 1] score; anything outside that
    range is a parse error.
    """

    def __init__(self, backend: BackendDescriptor):
        self.backend = backend
        self.model_name = backend.endpoint[len("ollama://"):]
        self.model_params = {"temperature": 0.0, "num_ctx": 8192}
        self.client = ollama.Client(timeout=backend.timeout_ms / 1000.0)

    def send(self, request: BackendRequest) -> Dict:
        try:
            response = self.client.generate(model=self.model_name, prompt=request.prompt, options=self.model_params)
        except Exception as e:
            if "timeout" in type(e).__name__.lower():
                raise BackendTimeoutError(f"{self.backend.backend_id}: {e}") from e
            raise BackendFailureError(f"{self.backend.backend_id}: {e}") from e
        text = response["response"]
        if request.operation != OP_SCORE_PAIR:
            return {"ok": True, "text": text}
        match = _NUMBER_RE.search(text)
        if not match:
            raise ResponseParseError(f"{self.backend.backend_id}: no score in reply", text)
        score = float(match.group(0))
        if not 0.0 <= score <= 1.0:
            raise ResponseParseError(f"{self.backend.backend_id}: score {score} outside [0, 1]", text)
        return {"ok": True, "score": score}


class ResponseCache:
    """Append-only JSON-lines cache of successful backend responses."""

    def __init__(self, path: str):
        self.path = path
        self._lock = threading.Lock()
        self._entries: Dict[str, Dict] = {}
        if os.path.exists(path):
            with open(path, "r", encoding="utf-8") as f:
                for line in f:
                    line = line.strip()
                    if not line:
                        continue
                    try:
                        record = json.loads(line)
                    except json.JSONDecodeError:
                        # a torn final line after a crash
                        logger.warning(f"Skipping unreadable cache line in {path}")
                        continue
                    self._entries[record["key"]] = record["response"]

    def __len__(self) -> int:
        return len(self._entries)

    def get(self, key: str) -> Optional[Dict]:
        with self._lock:
            return self._entries.get(key)

    def put(self, key: str, response: Dict) -> None:
        with self._lock:
            if key in self._entries:
                return
            self._entries[key] = response
            os.makedirs(os.path.dirname(os.path.abspath(self.path)), exist_ok=True)
            with open(self.path, "a", encoding="utf-8") as f:
                f.write(json.dumps({"key": key, "response": response}, sort_keys=True) + "\n")


def cache_key(backend_id: str, request: BackendRequest) -> str:
    material = json.dumps(
        [request.operation, request.template_id, request.slots, request.n, backend_id, request.meta],
        sort_keys=True,
        ensure_ascii=False,
    )
    return hashlib.sha256(material.encode("utf-8")).hexdigest()


class ReasoningGateway:
    """
    Front door to the reasoner, reranker and judge backends.

    Each backend admits at most ``max_in_flight`` concurrent requests;
    timeouts are retried up to ``max_retries`` times with exponential
    backoff, parse errors never.
    """

    def __init__(self, backends: Sequence[BackendDescriptor],
                 templates: Optional[PromptTemplates] = None,
                 sim_configs: Optional[Dict[str, SimBackendConfig]] = None,
                 default_sim_config: Optional[SimBackendConfig] = None,
                 cache_dir: Optional[str] = None,
                 cache_enabled: bool = True,
                 transports: Optional[Dict[str, object]] = None,
                 max_retries: int = 2,
                 backoff_s: float = 0.5,
                 sleep: Callable[[float], None] = time.sleep):
        self.backends: Dict[str, BackendDescriptor] = {}
        for backend in backends:
            if backend.backend_id in self.backends:
                raise ConfigError(f"Duplicate backend id '{backend.backend_id}'")
            self.backends[backend.backend_id] = backend
        self.templates = templates or PromptTemplates.load()
        self.sim_configs = dict(sim_configs or {})
        self.default_sim_config = default_sim_config or SimBackendConfig()
        self.max_retries = max_retries
        self.backoff_s = backoff_s
        self._sleep = sleep
        self._transports = dict(transports or {})
        self._semaphores = {b.backend_id: threading.BoundedSemaphore(b.max_in_flight) for b in backends}
        self._counts_lock = threading.Lock()
        self._request_counts = {b.backend_id: 0 for b in backends}

        cache_dir = os.environ.get("CASCADE_CACHE_DIR") or cache_dir
        self.cache = None
        if cache_enabled and cache_dir:
            self.cache = ResponseCache(os.path.join(cache_dir, "responses.jsonl"))
            self.log(f"✓ Response cache at {self.cache.path} ({len(self.cache)} entries)")

    def log(self, msg: str):
        logger.info(msg)

    def backend(self, backend_id: str) -> BackendDescriptor:
        try:
            return self.backends[backend_id]
        except KeyError:
            raise ConfigError(f"Unknown backend id '{backend_id}'") from None

    def request_count(self, backend_id: Optional[str] = None) -> int:
        """Transport-level requests issued (cache hits excluded)."""
        with self._counts_lock:
            if backend_id is None:
                return sum(self._request_counts.values())
            return self._request_counts.get(backend_id, 0)

    def _transport(self, backend: BackendDescriptor):
        transport = self._transports.get(backend.backend_id)
        if transport is not None:
            return transport
        endpoint = backend.endpoint
        if endpoint == "sim":
            cfg = self.sim_configs.get(backend.backend_id, self.default_sim_config)
            transport = SimulatedBackend(backend, cfg)
        elif endpoint.startswith(("http://", "https://")):
            transport = HttpTransport(backend)
        elif endpoint.startswith("ollama://"):
            transport = OllamaTransport(backend)
        else:
            raise ConfigError(f"Backend '{backend.backend_id}' has unsupported endpoint '{endpoint}'")
        self._transports[backend.backend_id] = transport
        return transport

    def _require_kind(self, backend: BackendDescriptor, *kinds: str) -> None:
        if backend.kind not in kinds:
            raise PreconditionError(
                f"Backend '{backend.backend_id}' is a {backend.kind}, expected {' or '.join(kinds)}"
            )

    def _send_with_retry(self, backend: BackendDescriptor, request: BackendRequest) -> Dict:
        transport = self._transport(backend)
        attempt = 0
        while True:
            with self._semaphores[backend.backend_id]:
                with self._counts_lock:
                    self._request_counts[backend.backend_id] += 1
                try:
                    response = transport.send(request)
                except BackendTimeoutError:
                    if attempt >= self.max_retries:
                        raise
                    delay = self.backoff_s * (2 ** attempt)
                    attempt += 1
                    self.log(f"✗ {backend.backend_id} timed out; retry {attempt} in {delay:.1f}s")
                else:
                    break
            self._sleep(delay)
        if not response.get("ok", False):
            raise BackendFailureError(f"{backend.backend_id}: {response.get('error', 'backend reported failure')}")
        return response

    def _call(self, backend: BackendDescriptor, request: BackendRequest,
              parse: Callable[[Dict], object], budget: Optional[TokenBudget]):
        if budget is not None:
            budget.record(len(request.prompt))
        key = cache_key(backend.backend_id, request) if self.cache is not None else None
        if key is not None:
            cached = self.cache.get(key)
            if cached is not None:
                return parse(cached)
        response = self._send_with_retry(backend, request)
        parsed = parse(response)
        if key is not None:
            self.cache.put(key, response)
        return parsed

    def _request(self, operation: str, template_id: str, slots: Dict[str, str],
                 meta: Dict, n: Optional[int] = None) -> BackendRequest:
        slots = {name: ("" if value is None else str(value)) for name, value in slots.items()}
        prompt = self.templates.render(template_id, slots)
        return BackendRequest(operation=operation, template_id=template_id, slots=slots,
                              prompt=prompt, n=n, meta=meta)

    def generate_ecr(self, item: Item, template_id: str, backend_id: str,
                     budget: Optional[TokenBudget] = None) -> EcrTrace:
        """
        Generate the original ECR trace of an item.

        Args:
            item: Query or candidate to reason about
            template_id: Registered prompt template (e.g. ``ecr_candidate``)
            backend_id: A reasoner backend

        Returns:
            EcrTrace with generation_kind=original and source_model=backend_id
        """
        backend = self.backend(backend_id)
        self._require_kind(backend, KIND_REASONER)
        request = self._request(
            OP_GENERATE_ECR, template_id,
            {"instruction": item.instruction, "content_text": item.content_text, "media_ref": item.media_ref},
            meta={"item_id": item.id, "instruction": item.instruction,
                  "content_text": item.content_text, "media_ref": item.media_ref},
        )

        def parse(response: Dict) -> EcrTrace:
            think, summary = parse_ecr_response(response.get("text", ""))
            return EcrTrace(item_id=item.id, think=think, summary=summary, source_model=backend_id)

        return self._call(backend, request, parse, budget)

    def rewrite_qar(self, query: Item, candidate: Item, original: EcrTrace, backend_id: str,
                    budget: Optional[TokenBudget] = None) -> EcrTrace:
        """Rewrite a candidate's original trace so it addresses ``query``."""
        if original.generation_kind != KIND_ORIGINAL:
            raise PreconditionError(
                f"Trace of '{original.item_id}' is already {original.generation_kind}; only original traces are rewritten"
            )
        backend = self.backend(backend_id)
        self._require_kind(backend, KIND_REASONER)
        request = self._request(
            OP_REWRITE_QAR, "qar_rewrite",
            {"instruction": query.instruction, "query_text_or_ecr": query.text_or_ecr,
             "candidate_ecr": original.text, "media_ref": candidate.media_ref},
            meta={"query_id": query.id, "candidate_id": candidate.id,
                  "query_text": query.content_text or query.text_or_ecr,
                  "original_summary": original.summary},
        )

        def parse(response: Dict) -> EcrTrace:
            think, summary = parse_ecr_response(response.get("text", ""))
            return EcrTrace(item_id=candidate.id, think=think, summary=summary, source_model=backend_id,
                            generation_kind=KIND_QAR, derived_for_query=query.id)

        return self._call(backend, request, parse, budget)

    def score_pair(self, query: Item, candidate_ecr: EcrTrace, backend_id: str,
                   candidate_media_ref: Optional[str] = None,
                   budget: Optional[TokenBudget] = None) -> PairScore:
        """
        Score how well a candidate trace matches the query.

        A query that carries its own ECR is represented by that trace rather
        than its raw text. Zero-shot MLLM backends answer with yes/no logits
        and see the candidate media reference.
        """
        backend = self.backend(backend_id)
        self._require_kind(backend, KIND_PAIRWISE, KIND_ZERO_SHOT)
        template_id = "zero_shot_mllm" if backend.kind == KIND_ZERO_SHOT else "pairwise_rerank"
        request = self._request(
            OP_SCORE_PAIR, template_id,
            {"instruction": query.instruction, "query_text_or_ecr": query.text_or_ecr,
             "candidate_ecr": candidate_ecr.text, "media_ref": candidate_media_ref},
            meta={"query_id": query.id, "candidate_id": candidate_ecr.item_id,
                  "candidate_text": candidate_ecr.text, "generation_kind": candidate_ecr.generation_kind},
        )

        def parse(response: Dict) -> PairScore:
            if backend.kind == KIND_ZERO_SHOT:
                try:
                    score = mllm_zero_shot_score(float(response["logit_yes"]), float(response["logit_no"]))
                except (KeyError, TypeError, ValueError) as e:
                    raise ResponseParseError(f"{backend_id}: missing yes/no logits", json.dumps(response)) from e
            else:
                try:
                    score = float(response["score"])
                except (KeyError, TypeError, ValueError) as e:
                    raise ResponseParseError(f"{backend_id}: missing score", json.dumps(response)) from e
                if not (math.isfinite(score) and 0.0 <= score <= 1.0):
                    raise ResponseParseError(f"{backend_id}: score {score} outside [0, 1]", json.dumps(response))
            return PairScore(query_id=query.id, candidate_id=candidate_ecr.item_id, score=score,
                             backend_id=backend_id)

        return self._call(backend, request, parse, budget)

    def rank_listwise(self, query: Item, candidate_ecrs: Sequence[EcrTrace], backend_id: str,
                      max_n: int = DEFAULT_LISTWISE_MAX,
                      budget: Optional[TokenBudget] = None) -> List[int]:
        """Rank candidate traces in one request; returns a 1-based permutation."""
        n = len(candidate_ecrs)
        if not 1 <= n <= max_n:
            raise PreconditionError(f"Listwise ranking takes 1..{max_n} candidates, got {n}")
        backend = self.backend(backend_id)
        self._require_kind(backend, KIND_LISTWISE)
        candidate_list = "\n".join(f"[{i}] {trace.text}" for i, trace in enumerate(candidate_ecrs, start=1))
        request = self._request(
            OP_RANK_LISTWISE, "listwise_rerank",
            {"instruction": query.instruction, "query_text_or_ecr": query.text_or_ecr,
             "candidate_list": candidate_list},
            meta={"query_id": query.id,
                  "candidate_ids": [t.item_id for t in candidate_ecrs],
                  "candidate_texts": [t.text for t in candidate_ecrs],
                  "generation_kinds": [t.generation_kind for t in candidate_ecrs]},
            n=n,
        )
        return self._call(backend, request, lambda response: parse_listwise_response(response.get("text", ""), n),
                          budget)

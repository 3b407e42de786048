"""JSON-over-HTTP access to remote logit sources and attribute scorers.

Endpoints (all bodies UTF-8 JSON):

* ``GET  /v1/vocab``  -> ``{"tokens", "eos_id", "bos_id", "fingerprint"}``
* ``POST /v1/logits`` ``{"prefixes": [[ids]...]}`` -> ``{"logits": [[...]...]}``
* ``POST /v1/score``  ``{"sequences": [[ids]...], "class_label": str}`` -> ``{"probs": [...]}``

Validation failures answer 4xx with ``{"error": "..."}``. :class:`ModelServer` is
an in-process loopback server used for protocol and parity tests.
"""

from __future__ import annotations

import json
import logging
import math
import socket
import threading
import urllib.error
import urllib.request
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np

from .core import AttributeTarget, Vocabulary
from .models import AttributeScorer, LogitSource

logger = logging.getLogger(__name__)


class TransportError(RuntimeError):
    pass


class RemoteTimeoutError(TransportError):
    pass


class MalformedResponseError(TransportError):
    pass


class FingerprintMismatchError(TransportError):
    pass


class RemoteRequestError(TransportError):
    """The server rejected the request (non-200 status)."""

    def __init__(self, status: int, message: str):
        super().__init__(f"HTTP {status}: {message}")
        self.status = status


@dataclass(frozen=True)
class RemoteEndpoint:
    base_url: str
    timeout_ms: int = 10_000
    max_retries: int = 2
    fingerprint: str | None = None

    def __post_init__(self):
        if self.timeout_ms <= 0:
            raise ValueError("timeout_ms must be positive")
        if self.max_retries < 0:
            raise ValueError("max_retries must be non-negative")


def _is_timeout(exc: BaseException) -> bool:
    if isinstance(exc, (socket.timeout, TimeoutError)):
        return True
    return isinstance(exc, urllib.error.URLError) and isinstance(
        exc.reason, (socket.timeout, TimeoutError)
    )


def _request(endpoint: RemoteEndpoint, path: str, body: dict | None = None) -> dict:
    url = endpoint.base_url.rstrip("/") + path
    data = None if body is None else json.dumps(body).encode("utf-8")
    headers = {"Content-Type": "application/json"} if data is not None else {}
    attempts = endpoint.max_retries + 1
    for attempt in range(attempts):
        req = urllib.request.Request(url, data=data, headers=headers)
        try:
            with urllib.request.urlopen(req, timeout=endpoint.timeout_ms / 1000) as resp:
                raw = resp.read()
            break
        except urllib.error.HTTPError as exc:
            try:
                message = json.loads(exc.read().decode("utf-8")).get("error", "")
            except (ValueError, AttributeError):
                message = exc.reason
            raise RemoteRequestError(exc.code, str(message)) from None
        except Exception as exc:
            if not _is_timeout(exc):
                raise TransportError(f"{url}: {exc}") from exc
            logger.warning("timeout on %s (attempt %d/%d)", url, attempt + 1, attempts)
    else:
        raise RemoteTimeoutError(f"{url}: no response within {endpoint.timeout_ms} ms after {attempts} attempts")
    try:
        obj = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as exc:
        raise MalformedResponseError(f"{url}: response is not JSON") from exc
    if not isinstance(obj, dict):
        raise MalformedResponseError(f"{url}: expected a JSON object")
    return obj


def fetch_vocabulary(endpoint: RemoteEndpoint) -> Vocabulary:
    """Handshake: fetch the server vocabulary and check its fingerprint."""
    obj = _request(endpoint, "/v1/vocab")
    try:
        vocab = Vocabulary.from_dict(obj)
        claimed = obj["fingerprint"]
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedResponseError(f"bad vocabulary payload: {exc}") from exc
    if claimed != vocab.fingerprint():
        raise FingerprintMismatchError("server fingerprint does not match its own token list")
    if endpoint.fingerprint is not None and endpoint.fingerprint != claimed:
        raise FingerprintMismatchError(
            f"expected vocabulary {endpoint.fingerprint[:12]}, server has {claimed[:12]}"
        )
    return vocab


def _finite_number(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool) and math.isfinite(x)


class RemoteLogitSource:
    """LogitSource backed by ``POST /v1/logits``."""

    def __init__(self, endpoint: RemoteEndpoint, vocabulary: Vocabulary | None = None):
        self.endpoint = endpoint
        self.vocabulary = fetch_vocabulary(endpoint)
        if vocabulary is not None and vocabulary.fingerprint() != self.vocabulary.fingerprint():
            raise FingerprintMismatchError("remote logit source uses a different vocabulary")

    def next_logits(self, prefix_batch):
        prefixes = [[int(t) for t in p] for p in prefix_batch]
        obj = _request(self.endpoint, "/v1/logits", {"prefixes": prefixes})
        rows = obj.get("logits")
        v = self.vocabulary.size
        if not isinstance(rows, list) or len(rows) != len(prefixes):
            raise MalformedResponseError(
                f"expected {len(prefixes)} logit rows, got {len(rows) if isinstance(rows, list) else rows!r}"
            )
        for row in rows:
            if not isinstance(row, list) or len(row) != v:
                got = len(row) if isinstance(row, list) else type(row).__name__
                raise MalformedResponseError(f"logit row length: expected {v}, got {got}")
            if not all(_finite_number(x) for x in row):
                raise MalformedResponseError("logit row contains a non-finite or non-numeric value")
        if not rows:
            return np.zeros((0, v))
        return np.array(rows, dtype=np.float64)


class RemoteScorer:
    """AttributeScorer backed by ``POST /v1/score``."""

    def __init__(self, endpoint: RemoteEndpoint, vocabulary: Vocabulary | None = None):
        self.endpoint = endpoint
        self.vocabulary = fetch_vocabulary(endpoint)
        if vocabulary is not None and vocabulary.fingerprint() != self.vocabulary.fingerprint():
            raise FingerprintMismatchError("remote scorer uses a different vocabulary")

    def score_batch(self, sequences, target: AttributeTarget):
        seqs = [[int(t) for t in s] for s in sequences]
        obj = _request(
            self.endpoint, "/v1/score", {"sequences": seqs, "class_label": target.class_label}
        )
        probs = obj.get("probs")
        if not isinstance(probs, list) or len(probs) != len(seqs):
            raise MalformedResponseError(f"expected {len(seqs)} probabilities")
        for p in probs:
            if not _finite_number(p) or not 0.0 <= p <= 1.0:
                raise MalformedResponseError(f"probability {p!r} outside [0, 1]")
        return np.array(probs, dtype=np.float64)


def remote_next_logits(source: RemoteLogitSource, prefix_batch) -> np.ndarray:
    return source.next_logits(prefix_batch)


def remote_score_batch(scorer: RemoteScorer, sequences, target: AttributeTarget) -> np.ndarray:
    return scorer.score_batch(sequences, target)


# --------------------------------------------------------------------------- server


class _BadRequest(Exception):
    pass


def _id_lists(obj, key: str, vocab_size: int) -> list[tuple[int, ...]]:
    value = obj.get(key)
    if not isinstance(value, list):
        raise _BadRequest(f"'{key}' must be a list of id lists")
    out = []
    for seq in value:
        if not isinstance(seq, list):
            raise _BadRequest(f"'{key}' must be a list of id lists")
        for t in seq:
            if not isinstance(t, int) or isinstance(t, bool) or not 0 <= t < vocab_size:
                raise _BadRequest(f"invalid token id {t!r}")
        out.append(tuple(seq))
    return out


class ModelServer:
    """Serve a logit source and/or scorer over HTTP on a background thread."""

    def __init__(
        self,
        lm: LogitSource | None = None,
        scorer: AttributeScorer | None = None,
        vocabulary: Vocabulary | None = None,
        host: str = "127.0.0.1",
        port: int = 0,
    ):
        if vocabulary is None:
            if lm is None:
                raise ValueError("a scorer-only server needs an explicit vocabulary")
            vocabulary = lm.vocabulary
        self.lm = lm
        self.scorer = scorer
        self.vocabulary = vocabulary
        self._httpd = ThreadingHTTPServer((host, port), self._handler_class())
        self._httpd.daemon_threads = True
        self._thread: threading.Thread | None = None

    @property
    def url(self) -> str:
        host, port = self._httpd.server_address[:2]
        return f"http://{host}:{port}"

    def endpoint(self, **kwargs) -> RemoteEndpoint:
        return RemoteEndpoint(self.url, fingerprint=self.vocabulary.fingerprint(), **kwargs)

    def start(self) -> "ModelServer":
        self._thread = threading.Thread(target=self._httpd.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._httpd.shutdown()
        self._httpd.server_close()
        if self._thread is not None:
            self._thread.join()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()

    def _vocab_payload(self) -> dict:
        return {**self.vocabulary.to_dict(), "fingerprint": self.vocabulary.fingerprint()}

    def _logits(self, body: dict) -> dict:
        if self.lm is None:
            raise _BadRequest("this server has no logit source")
        prefixes = _id_lists(body, "prefixes", self.vocabulary.size)
        if not prefixes:
            return {"logits": []}
        try:
            rows = self.lm.next_logits(prefixes)
        except KeyError as exc:
            raise _BadRequest(str(exc)) from exc
        return {"logits": np.asarray(rows, dtype=np.float64).tolist()}

    def _score(self, body: dict) -> dict:
        if self.scorer is None:
            raise _BadRequest("this server has no scorer")
        seqs = _id_lists(body, "sequences", self.vocabulary.size)
        label = body.get("class_label")
        if not isinstance(label, str) or not label:
            raise _BadRequest("'class_label' must be a non-empty string")
        if not seqs:
            return {"probs": []}
        try:
            probs = self.scorer.score_batch(seqs, AttributeTarget(label))
        except KeyError as exc:
            raise _BadRequest(str(exc)) from exc
        return {"probs": np.asarray(probs, dtype=np.float64).tolist()}

    def _handler_class(self):
        server = self

        class Handler(BaseHTTPRequestHandler):
            protocol_version = "HTTP/1.1"

            def log_message(self, fmt, *args):
                logger.debug("%s " + fmt, self.address_string(), *args)

            def _send(self, status: int, obj: dict) -> None:
                payload = json.dumps(obj).encode("utf-8")
                self.send_response(status)
                self.send_header("Content-Type", "application/json; charset=utf-8")
                self.send_header("Content-Length", str(len(payload)))
                self.end_headers()
                self.wfile.write(payload)

            def do_GET(self):
                if self.path == "/v1/vocab":
                    self._send(200, server._vocab_payload())
                else:
                    self._send(404, {"error": f"unknown path {self.path}"})

            def do_POST(self):
                routes = {"/v1/logits": server._logits, "/v1/score": server._score}
                length = int(self.headers.get("Content-Length") or 0)
                raw = self.rfile.read(length)
                route = routes.get(self.path)
                if route is None:
                    self._send(404, {"error": f"unknown path {self.path}"})
                    return
                try:
                    body = json.loads(raw.decode("utf-8"))
                    if not isinstance(body, dict):
                        raise _BadRequest("request body must be a JSON object")
                    self._send(200, route(body))
                except (_BadRequest, ValueError) as exc:
                    self._send(400, {"error": str(exc)})
                except Exception as exc:  # model failure, not the client's fault
                    logger.exception("request to %s failed", self.path)
                    self._send(500, {"error": f"{type(exc).__name__}: {exc}"})

        return Handler

"""Black-box ownership verification.

An oracle is anything with ``predict(images) -> class indices``; the verifier
never sees weights. Each key trigger is queried exactly once per session and
ownership is claimed when the fraction predicted as the target class reaches
the threshold.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import math
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Protocol

import numpy as np
import requests
from PIL import Image
from scipy.stats import binom

from fusemark.triggers import WatermarkKey

log = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = "1.0"
DEFAULT_THRESHOLD = 0.9


class OracleTransportError(RuntimeError):
    pass


class OracleProtocolError(RuntimeError):
    pass


class PredictionOracle(Protocol):
    transport: str

    def predict(self, images: np.ndarray) -> np.ndarray: ...

    def describe(self) -> dict: ...


class InProcessOracle:
    transport = "in_process"

    def __init__(self, model, batch_size: int = 256):
        self.model = model
        self.batch_size = batch_size

    def predict(self, images: np.ndarray) -> np.ndarray:
        from fusemark.zoo import predict

        return predict(self.model, images, self.batch_size)

    def describe(self) -> dict:
        spec = getattr(self.model, "spec", None)
        return {"transport": self.transport, "arch": asdict(spec) if spec is not None else None}


def encode_png(image: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(image[..., 0] if image.shape[2] == 1 else image).save(buf, format="PNG")
    return buf.getvalue()


def decode_png(data: bytes) -> np.ndarray:
    arr = np.asarray(Image.open(io.BytesIO(data)), dtype=np.uint8)
    return arr[..., None] if arr.ndim == 2 else arr


class RemoteOracle:
    """Client for the ``POST /predict`` protocol.

    Request body: one lossless PNG (``image/png``). Response: JSON
    ``{"label": int, "scores": [float, ...]}`` with ``scores`` optional.
    Every attempt lands in ``audit`` as (index, attempt, status, label).
    """

    transport = "remote_http"

    def __init__(self, url: str, *, max_retries: int = 5, backoff: float = 0.05, timeout: float = 10.0,
                 min_interval: float = 0.0, max_in_flight: int = 4, num_classes: int | None = None,
                 session: requests.Session | None = None):
        self.url = url.rstrip("/")
        self.max_retries = max_retries
        self.backoff = backoff
        self.timeout = timeout
        self.min_interval = min_interval
        self.max_in_flight = max_in_flight
        self.num_classes = num_classes
        self.session = session or requests.Session()
        self.audit: list[dict] = []
        self._lock = threading.Lock()
        self._last = 0.0

    def _throttle(self):
        if self.min_interval <= 0:
            return
        with self._lock:
            wait = self._last + self.min_interval - time.monotonic()
            if wait > 0:
                time.sleep(wait)
            self._last = time.monotonic()

    def _record(self, **entry):
        with self._lock:
            self.audit.append(entry)

    def query(self, index: int, image: np.ndarray) -> int:
        body = encode_png(image)
        digest = hashlib.sha256(body).hexdigest()[:16]
        last_error = None
        for attempt in range(self.max_retries + 1):
            self._throttle()
            try:
                resp = self.session.post(f"{self.url}/predict", data=body, timeout=self.timeout,
                                         headers={"Content-Type": "image/png"})
            except requests.RequestException as exc:
                last_error = exc
                self._record(index=index, attempt=attempt, status="error", detail=type(exc).__name__, image=digest)
                time.sleep(self.backoff * (2 ** attempt))
                continue
            if resp.status_code >= 500 or resp.status_code == 429:
                last_error = OracleTransportError(f"HTTP {resp.status_code}")
                self._record(index=index, attempt=attempt, status=resp.status_code, image=digest)
                time.sleep(self.backoff * (2 ** attempt))
                continue
            if resp.status_code != 200:
                self._record(index=index, attempt=attempt, status=resp.status_code, image=digest)
                raise OracleProtocolError(f"trigger {index}: HTTP {resp.status_code}")
            label = self._parse(index, resp)
            self._record(index=index, attempt=attempt, status=200, label=label, image=digest)
            return label
        raise OracleTransportError(f"trigger {index}: retries exhausted ({last_error})")

    def _parse(self, index: int, resp) -> int:
        try:
            payload = resp.json()
        except ValueError:
            raise OracleProtocolError(f"trigger {index}: response is not JSON") from None
        label = payload.get("label") if isinstance(payload, dict) else None
        if isinstance(label, bool) or not isinstance(label, int) or label < 0:
            raise OracleProtocolError(f"trigger {index}: response carries no class index: {payload!r}")
        if self.num_classes is not None and label >= self.num_classes:
            raise OracleProtocolError(f"trigger {index}: class {label} outside [0, {self.num_classes})")
        scores = payload.get("scores")
        if scores is not None and (not isinstance(scores, list) or
                                   not all(isinstance(s, (int, float)) for s in scores)):
            raise OracleProtocolError(f"trigger {index}: malformed score vector")
        return label

    def predict(self, images: np.ndarray) -> np.ndarray:
        with ThreadPoolExecutor(max_workers=self.max_in_flight) as pool:
            labels = list(pool.map(self.query, range(len(images)), list(images)))
        return np.asarray(labels, dtype=np.int64)

    def describe(self) -> dict:
        return {"transport": self.transport, "url": self.url}


def remote_oracle(url: str, **kwargs) -> RemoteOracle:
    return RemoteOracle(url, **kwargs)


# --- serving side ----------------------------------------------------------

def make_handler(predict_one):
    class Handler(BaseHTTPRequestHandler):
        def do_POST(self):
            if self.path.rstrip("/") != "/predict":
                self.send_error(404)
                return
            body = self.rfile.read(int(self.headers.get("Content-Length", 0)))
            try:
                image = decode_png(body)
            except Exception:
                self.send_error(400, "body is not a PNG image")
                return
            label, scores = predict_one(image)
            payload = json.dumps({"label": int(label), "scores": [float(s) for s in scores]}).encode()
            self.send_response(200)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(payload)))
            self.end_headers()
            self.wfile.write(payload)

        def log_message(self, *args):
            pass

    return Handler


def model_predictor(model):
    from fusemark.zoo import predict

    lock = threading.Lock()

    def predict_one(image):
        with lock:
            labels, scores = predict(model, image[None], return_scores=True)
        return int(labels[0]), scores[0]

    return predict_one


def serve_model(model, host: str = "127.0.0.1", port: int = 0, handler=None) -> ThreadingHTTPServer:
    """Start an HTTP prediction server in a daemon thread; ``server.server_address`` has the port."""
    server = ThreadingHTTPServer((host, port), handler or make_handler(model_predictor(model)))
    server.daemon_threads = True
    threading.Thread(target=server.serve_forever, daemon=True).start()
    return server


# --- verification ----------------------------------------------------------

def required_matches(n_triggers: int, threshold: float) -> int:
    return max(0, math.ceil(round(threshold * n_triggers, 9)))


def false_positive_bound(n_classes: int, n_triggers: int, threshold: float) -> float:
    """P[Binomial(n_triggers, 1/n_classes) >= ceil(threshold * n_triggers)].

    The chance that a classifier guessing uniformly at random passes
    verification.
    """
    if n_classes < 2 or n_triggers < 1:
        raise ValueError("need n_classes >= 2 and n_triggers >= 1")
    if not 0.0 < threshold <= 1.0:
        raise ValueError(f"threshold must lie in (0, 1], got {threshold}")
    k = required_matches(n_triggers, threshold)
    return float(binom.sf(k - 1, n_triggers, 1.0 / n_classes))


@dataclass
class VerificationReport:
    asr: float | None
    n_queried: int
    n_matched: int
    threshold: float
    decision: bool | None
    fp_bound: float
    per_trigger: list[tuple[int, int, bool]]
    valid: bool = True
    error: str | None = None
    key_digest: str = ""
    oracle: dict = field(default_factory=dict)
    target_class: int = -1
    schema_version: str = REPORT_SCHEMA_VERSION

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_trigger"] = [list(t) for t in self.per_trigger]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "VerificationReport":
        major = int(str(d.get("schema_version", "1.0")).split(".")[0])
        if major > int(REPORT_SCHEMA_VERSION.split(".")[0]):
            raise ValueError(f"report schema {d['schema_version']} is newer than supported")
        d = dict(d)
        d["per_trigger"] = [tuple(t) for t in d["per_trigger"]]
        return cls(**d)


def report_from_predictions(predictions, key: WatermarkKey, threshold: float, n_classes: int,
                            oracle: dict | None = None) -> VerificationReport:
    predictions = np.asarray(predictions, dtype=np.int64)
    matched = predictions == key.target_class
    n = len(predictions)
    n_matched = int(matched.sum())
    asr = n_matched / n
    return VerificationReport(
        asr=asr, n_queried=n, n_matched=n_matched, threshold=threshold,
        decision=n_matched >= required_matches(n, threshold),
        fp_bound=false_positive_bound(n_classes, n, threshold),
        per_trigger=[(i, int(p), bool(m)) for i, (p, m) in enumerate(zip(predictions, matched))],
        key_digest=key.digest(), oracle=oracle or {}, target_class=key.target_class,
    )


def authenticate(oracle: PredictionOracle, key: WatermarkKey, threshold: float = DEFAULT_THRESHOLD,
                 n_classes: int | None = None) -> VerificationReport:
    """Query every trigger once and decide ownership.

    A transport failure yields a report with ``valid=False`` and no decision.
    """
    if len(key) == 0:
        raise ValueError("key has no triggers")
    if not 0.0 < threshold <= 1.0:
        raise ValueError(f"threshold must lie in (0, 1], got {threshold}")
    if n_classes is None:
        spec = getattr(getattr(oracle, "model", None), "spec", None)
        n_classes = spec.num_classes if spec is not None else 10
    try:
        predictions = oracle.predict(key.triggers)
    except OracleTransportError as exc:
        answered = [a for a in getattr(oracle, "audit", []) if a.get("status") == 200]
        n_matched = sum(a["label"] == key.target_class for a in answered)
        return VerificationReport(
            asr=None, n_queried=len(answered), n_matched=n_matched, threshold=threshold, decision=None,
            fp_bound=false_positive_bound(n_classes, len(key), threshold),
            per_trigger=sorted((a["index"], a["label"], a["label"] == key.target_class) for a in answered),
            valid=False, error=str(exc), key_digest=key.digest(), oracle=oracle.describe(),
            target_class=key.target_class,
        )
    if len(predictions) != len(key):
        raise OracleProtocolError(f"oracle answered {len(predictions)} of {len(key)} queries")
    return report_from_predictions(predictions, key, threshold, n_classes, oracle.describe())


def asr(model, key: WatermarkKey) -> float:
    """Authentication success rate of an in-process model (the single code path used by attacks)."""
    return authenticate(InProcessOracle(model), key, threshold=1.0).asr

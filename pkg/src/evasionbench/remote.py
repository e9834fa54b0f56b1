"""HTTP scoring protocol: a threaded server around one detector and a client.

``POST /v1/score`` takes ``{"id", "image_png_b64"}`` and answers
``{"id", "score", "model"}`` where ``score`` is the probability that the
image is generated. ``GET /v1/health`` answers ``{"status": "ok", "model"}``.
Errors are JSON ``{"error": ...}`` with a 4xx status.
"""

from __future__ import annotations

import base64
import binascii
import json
import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import requests

from .datagen import DatasetManifest, PngError, center_crop, png_read
from .metrics import EvalReport, MetricsError, _summarize
from .zoo import Detector, DetectorError, probability

__all__ = ["ScoringServer", "RemoteError", "serve", "remote_score", "remote_evaluate"]

logger = logging.getLogger(__name__)

MAX_BODY = 16 * 1024 * 1024


class RemoteError(RuntimeError):
    pass


class _RequestError(Exception):
    def __init__(self, status: int, message: str):
        super().__init__(message)
        self.status = status


def _score_payload(detector: Detector, model: str, body: bytes) -> dict:
    try:
        req = json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise _RequestError(400, f"body is not JSON: {exc}") from None
    if not isinstance(req, dict):
        raise _RequestError(400, "body must be a JSON object")
    rid, b64 = req.get("id"), req.get("image_png_b64")
    if not isinstance(rid, str) or not isinstance(b64, str):
        raise _RequestError(400, "fields 'id' and 'image_png_b64' must be strings")
    try:
        png = base64.b64decode(b64, validate=True)
    except (binascii.Error, ValueError) as exc:
        raise _RequestError(400, f"invalid base64: {exc}") from None
    try:
        img = png_read(png)
    except PngError as exc:
        raise _RequestError(422, str(exc)) from None
    side = detector.spec.input_side
    if img.shape[0] < side or img.shape[1] < side:
        raise _RequestError(422, f"image {img.shape[:2]} is smaller than {side}x{side}")
    if img.shape[:2] != (side, side):
        img = center_crop(img, side)
    try:
        p = probability(detector, img)
    except DetectorError as exc:
        raise _RequestError(422, str(exc)) from None
    return {"id": rid, "score": p, "model": model}


def _handler(detector: Detector, model: str):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def _send(self, status: int, obj: dict) -> None:
            data = json.dumps(obj).encode("utf-8")
            self.send_response(status)
            self.send_header("Content-Type", "application/json; charset=utf-8")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

        def do_GET(self):  # noqa: N802 - http.server naming
            if self.path == "/v1/health":
                self._send(200, {"status": "ok", "model": model})
            else:
                self._send(404, {"error": f"no route GET {self.path}"})

        def do_POST(self):  # noqa: N802
            length = self.headers.get("Content-Length")
            try:
                n = int(length)
            except (TypeError, ValueError):
                self._send(411, {"error": "Content-Length required"})
                return
            if n < 0 or n > MAX_BODY:
                self._send(413, {"error": f"body larger than {MAX_BODY} bytes"})
                return
            body = self.rfile.read(n)
            if self.path != "/v1/score":
                self._send(404, {"error": f"no route POST {self.path}"})
                return
            try:
                self._send(200, _score_payload(detector, model, body))
            except _RequestError as exc:
                self._send(exc.status, {"error": str(exc)})

        def log_message(self, fmt, *args):
            logger.debug("%s %s", self.address_string(), fmt % args)

    return Handler


class ScoringServer:
    """A running server; use as a context manager or call :meth:`shutdown`."""

    def __init__(self, detector: Detector, host: str = "127.0.0.1", port: int = 0, model: str | None = None):
        self.model = model or detector.name
        self._httpd = ThreadingHTTPServer((host, port), _handler(detector, self.model))
        self._httpd.daemon_threads = True
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> tuple[str, int]:
        return self._httpd.server_address[:2]

    @property
    def url(self) -> str:
        host, port = self.address
        return f"http://{host}:{port}"

    def start(self) -> "ScoringServer":
        self._thread = threading.Thread(target=self._httpd.serve_forever, daemon=True)
        self._thread.start()
        return self

    def serve_forever(self) -> None:
        self._httpd.serve_forever()

    def shutdown(self) -> None:
        if self._thread is not None:
            self._httpd.shutdown()
            self._thread.join()
            self._thread = None
        self._httpd.server_close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.shutdown()


def serve(detector: Detector, host: str = "127.0.0.1", port: int = 0, model: str | None = None) -> ScoringServer:
    """Start serving in a background thread; ``port=0`` picks a free port."""
    return ScoringServer(detector, host, port, model).start()


def remote_score(session, endpoint: str, rid: str, png: bytes, timeout: float) -> float:
    body = {"id": rid, "image_png_b64": base64.b64encode(png).decode("ascii")}
    resp = session.post(endpoint.rstrip("/") + "/v1/score", json=body, timeout=timeout)
    if resp.status_code != 200:
        try:
            msg = resp.json().get("error", resp.text)
        except ValueError:
            msg = resp.text
        raise RemoteError(f"HTTP {resp.status_code}: {msg}")
    out = resp.json()
    if out.get("id") != rid:
        raise RemoteError(f"response id {out.get('id')!r} does not echo {rid!r}")
    score = out.get("score")
    if not isinstance(score, (int, float)) or not 0.0 <= score <= 1.0:
        raise RemoteError(f"score {score!r} is not a probability")
    return float(score)


def _check_health(endpoint: str, timeout: float, retries: int) -> None:
    last = None
    for attempt in range(retries + 1):
        try:
            r = requests.get(endpoint.rstrip("/") + "/v1/health", timeout=timeout)
            if r.status_code == 200 and r.json().get("status") == "ok":
                return
            last = f"HTTP {r.status_code}"
        except (requests.RequestException, ValueError) as exc:
            last = str(exc)
        time.sleep(0.1 * (attempt + 1))
    raise RemoteError(f"endpoint {endpoint} unreachable after {retries + 1} attempts: {last}")


def remote_evaluate(
    endpoint: str,
    manifest: DatasetManifest,
    concurrency: int = 4,
    timeout: float = 10.0,
    retries: int = 2,
) -> EvalReport:
    """Post every stored PNG unchanged and summarize as local evaluation does.

    Each record is tried ``retries + 1`` times before it counts as failed;
    more than 1% failed records aborts the run.
    """
    if len(manifest) == 0:
        raise MetricsError("empty manifest")
    if concurrency < 1:
        raise ValueError("concurrency must be positive")
    _check_health(endpoint, timeout, retries)
    local = threading.local()

    def session():
        if not hasattr(local, "s"):
            local.s = requests.Session()
        return local.s

    def one(record):
        try:
            png = manifest.read_bytes(record)
        except OSError as exc:
            return None, f"{record.id}: {exc}"
        err = None
        for _ in range(retries + 1):
            try:
                return remote_score(session(), endpoint, record.id, png, timeout), None
            except (requests.RequestException, RemoteError, ValueError) as exc:
                err = f"{record.id}: {exc}"
        return None, err

    with ThreadPoolExecutor(max_workers=concurrency) as pool:
        outcomes = list(pool.map(one, manifest.records))
    return _summarize(manifest.records, outcomes)

"""JSON-over-HTTP captioning service.

``POST /v1/caption`` takes an ``image/png`` body or ``application/json``
``{"image_base64": "<png bytes>"}`` and answers with a CaptionResult
object.  ``GET /v1/health`` reports the loaded model identifiers.
"""

import base64
import binascii
import io
import json
import logging
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
from PIL import Image, UnidentifiedImageError

from .pipeline import PipelineStageError
from .tensor.ops import ShapeError

log = logging.getLogger(__name__)


class BadImage(ValueError):
    pass


def decode_png(data):
    """PNG bytes -> float64 array (3, H, W) in [0, 1]."""
    try:
        with Image.open(io.BytesIO(data)) as im:
            if im.format != "PNG":
                raise BadImage(f"expected PNG data, got {im.format}")
            rgb = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise BadImage(f"cannot decode PNG: {exc}") from exc
    return np.ascontiguousarray(rgb.transpose(2, 0, 1))


def encode_png(image):
    """(3, H, W) array in [0, 1] -> PNG bytes (8-bit, rounded)."""
    arr = np.clip(np.rint(np.asarray(image).transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr, "RGB").save(buf, format="PNG")
    return buf.getvalue()


def decode_request_image(body, content_type):
    ctype = (content_type or "").split(";")[0].strip().lower()
    if ctype == "application/json":
        try:
            payload = json.loads(body.decode("utf-8"))
            data = base64.b64decode(payload["image_base64"], validate=True)
        except (ValueError, KeyError, TypeError, binascii.Error) as exc:
            raise BadImage(f"expected JSON object with base64 'image_base64': {exc}") from exc
        return decode_png(data)
    return decode_png(body)


class CaptionHandler(BaseHTTPRequestHandler):
    server_version = "caption-forge/0.1"
    protocol_version = "HTTP/1.1"

    def log_message(self, fmt, *args):
        log.info("%s - %s", self.address_string(), fmt % args)

    def _send(self, status, payload):
        body = json.dumps(payload).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def do_GET(self):
        if self.path.rstrip("/") == "/v1/health":
            self._send(200, self.server.pipeline.health())
        else:
            self._send(404, {"error": f"no route for GET {self.path}"})

    def do_POST(self):
        if self.path.rstrip("/") != "/v1/caption":
            self._send(404, {"error": f"no route for POST {self.path}"})
            return
        try:
            length = int(self.headers.get("Content-Length", ""))
        except ValueError:
            self.close_connection = True
            self._send(411, {"error": "Content-Length required"})
            return
        if length > self.server.max_body_bytes:
            self.close_connection = True
            self._send(413, {"error": f"body of {length} bytes exceeds limit {self.server.max_body_bytes}"})
            return
        body = self.rfile.read(length)
        try:
            image = decode_request_image(body, self.headers.get("Content-Type"))
            result = self.server.pipeline.caption(image)
        except BadImage as exc:
            self._send(400, {"error": str(exc)})
            return
        except PipelineStageError as exc:
            bad_input = exc.stage == "vision" and isinstance(exc.error, (ValueError, ShapeError))
            status = 400 if bad_input else 500
            self._send(status, {"error": str(exc), "stage": exc.stage})
            return
        self._send(200, result.to_json())


class CaptionServer(ThreadingHTTPServer):
    daemon_threads = True

    def __init__(self, address, pipeline, max_body_bytes=None):
        super().__init__(address, CaptionHandler)
        self.pipeline = pipeline
        self.max_body_bytes = max_body_bytes or pipeline.config.max_body_bytes


def serve(pipeline, host="127.0.0.1", port=8080, block=True):
    """Start the service.  With ``block=False`` run it on a daemon thread and return the server."""
    server = CaptionServer((host, port), pipeline)
    if not block:
        threading.Thread(target=server.serve_forever, daemon=True).start()
        return server
    log.info("serving on http://%s:%d", *server.server_address[:2])
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return server

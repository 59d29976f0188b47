"""Live HTTP clients: an OpenAI-compatible VLM and a JSON detector endpoint.

Both clients retry transport failures (connection errors, timeouts) with a
fixed backoff schedule and never retry protocol failures (bad status, bad
body). Outbound concurrency is capped per client.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import threading
import time
from pathlib import Path
from typing import Any, Callable, Sequence

import httpx

from refverify.backends.base import Proposal, VlmReply, VlmRequest
from refverify.errors import ProtocolError, TransportError
from refverify.geometry import BoundingBox
from refverify.render import RasterImage

logger = logging.getLogger(__name__)

DEFAULT_BACKOFF = (0.5, 2.0)
API_KEY_ENV = "REFVERIFY_API_KEY"


def png_data_url(image: RasterImage) -> str:
    return "data:image/png;base64," + base64.b64encode(image.to_png()).decode("ascii")


def dump_wire(payload: dict) -> bytes:
    """Canonical JSON bytes: same payload, same bytes."""
    return json.dumps(payload, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode()


class _JsonPoster:
    def __init__(
        self,
        *,
        timeout: float = 60.0,
        retries: int = 2,
        backoff: Sequence[float] = DEFAULT_BACKOFF,
        max_concurrency: int = 4,
        client: httpx.Client | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.retries = retries
        self.backoff = tuple(backoff)
        self._client = client or httpx.Client(timeout=timeout)
        self._gate = threading.BoundedSemaphore(max_concurrency)
        self._sleep = sleep

    def _headers(self) -> dict[str, str]:
        return {"Content-Type": "application/json"}

    def post(self, url: str, body: bytes) -> Any:
        attempt = 0
        while True:
            try:
                with self._gate:
                    resp = self._client.post(url, content=body, headers=self._headers())
            except httpx.TransportError as exc:
                if attempt >= self.retries:
                    raise TransportError(f"POST {url} failed after {attempt + 1} attempts: {exc}") from exc
                delay = self.backoff[min(attempt, len(self.backoff) - 1)] if self.backoff else 0.0
                logger.warning("POST %s failed (%s); retrying in %.1fs", url, exc, delay)
                self._sleep(delay)
                attempt += 1
                continue
            if not resp.is_success:
                text = resp.text[:300]
                raise ProtocolError(f"POST {url} returned HTTP {resp.status_code}: {text}", resp.status_code, text)
            try:
                return resp.json()
            except ValueError as exc:
                raise ProtocolError(f"POST {url} returned non-JSON body", resp.status_code, resp.text[:300]) from exc


class OpenAICompatibleVlm(_JsonPoster):
    """Chat-completions client usable with hosted GPT-4o or a local LLaVA server."""

    def __init__(self, base_url: str, model_id: str, api_key: str | None = None, **kwargs: Any):
        super().__init__(**kwargs)
        self.base_url = base_url.rstrip("/")
        self.model_id = model_id
        self.api_key = api_key

    @property
    def url(self) -> str:
        return f"{self.base_url}/chat/completions"

    def _headers(self) -> dict[str, str]:
        headers = super()._headers()
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        return headers

    def build_payload(self, request: VlmRequest) -> dict:
        content: list[dict] = [{"type": "text", "text": request.prompt}]
        for image in request.images:
            content.append({"type": "image_url", "image_url": {"url": png_data_url(image)}})
        return {
            "model": request.model_id or self.model_id,
            "temperature": request.temperature,
            "messages": [{"role": "user", "content": content}],
        }

    def serialize(self, request: VlmRequest) -> bytes:
        return dump_wire(self.build_payload(request))

    def query(self, request: VlmRequest) -> VlmReply:
        data = self.post(self.url, self.serialize(request))
        return VlmReply(extract_message_text(data))


def extract_message_text(data: Any) -> str:
    try:
        content = data["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError) as exc:
        raise ProtocolError(f"malformed chat completion: {str(data)[:200]}") from exc
    if content is None:
        return ""
    if isinstance(content, str):
        return content
    if isinstance(content, list):
        return "".join(part.get("text", "") for part in content if isinstance(part, dict))
    raise ProtocolError(f"unexpected message content type {type(content).__name__}")


class HttpDetector(_JsonPoster):
    """POST {image: base64 PNG, classes: [c]} to ``<base_url>/detect``."""

    def __init__(self, base_url: str, **kwargs: Any):
        super().__init__(**kwargs)
        self.base_url = base_url.rstrip("/")

    @property
    def url(self) -> str:
        return f"{self.base_url}/detect"

    def serialize(self, image: RasterImage, class_name: str) -> bytes:
        payload = {"image": base64.b64encode(image.to_png()).decode("ascii"), "classes": [class_name]}
        return dump_wire(payload)

    def detect(self, image: RasterImage, class_name: str) -> list[Proposal]:
        data = self.post(self.url, self.serialize(image, class_name))
        return parse_detections(data, class_name)


def parse_detections(data: Any, class_name: str) -> list[Proposal]:
    if not isinstance(data, dict) or not isinstance(data.get("boxes"), list):
        raise ProtocolError(f"detector response lacks a 'boxes' list: {str(data)[:200]}")
    out = []
    for i, entry in enumerate(data["boxes"]):
        try:
            box = BoundingBox.from_xywh(entry["x"], entry["y"], entry["w"], entry["h"])
            score = float(entry.get("score", 1.0))
            out.append(Proposal(box, class_name, min(1.0, max(0.0, score))))
        except (KeyError, TypeError, ValueError) as exc:
            raise ProtocolError(f"malformed detector box #{i}: {entry!r}") from exc
    return out


# -- recorded wire fixtures ---------------------------------------------------


def fixture_key(method: str, url: str, body: bytes) -> str:
    h = hashlib.sha256()
    h.update(method.upper().encode() + b" " + url.encode() + b"\n")
    h.update(body)
    return h.hexdigest()


def record_fixture(directory: str | Path, method: str, url: str, body: bytes, status: int, response: Any) -> Path:
    """Write one ``{request-hash}.json`` replay file."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    key = fixture_key(method, url, body)
    entry = {
        "request": {"method": method.upper(), "url": url, "body": json.loads(body)},
        "response": {"status": status, "json": response},
    }
    path = directory / f"{key}.json"
    path.write_text(json.dumps(entry, indent=2, sort_keys=True) + "\n")
    return path


def replay_transport(directory: str | Path) -> httpx.MockTransport:
    """httpx transport answering from recorded fixtures; unknown requests get a 599."""
    directory = Path(directory)

    def handler(request: httpx.Request) -> httpx.Response:
        key = fixture_key(request.method, str(request.url), request.content)
        path = directory / f"{key}.json"
        if not path.exists():
            return httpx.Response(599, text=f"no fixture for {key}")
        entry = json.loads(path.read_text())
        return httpx.Response(entry["response"]["status"], json=entry["response"]["json"])

    return httpx.MockTransport(handler)

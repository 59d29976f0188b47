"""On-disk VLM response cache.

One JSON file per entry at ``<root>/<k[0:2]>/<k[2:4]>/<k>.json`` where ``k``
is the request content hash. Entries are written to a temp file and renamed
into place, so concurrent writers never expose half-written files. Requests
with a nonzero temperature bypass the cache: every sample must be a fresh draw.
"""

from __future__ import annotations

import json
import logging
import os
import tempfile
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

from refverify.backends.base import Vlm, VlmReply, VlmRequest, request_key

logger = logging.getLogger(__name__)

CACHE_DIR_ENV = "REFVERIFY_CACHE_DIR"


class ResponseCache:
    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.hits = 0
        self.misses = 0

    def path_for(self, key: str) -> Path:
        return self.root / key[:2] / key[2:4] / f"{key}.json"

    def get(self, key: str) -> dict[str, Any] | None:
        path = self.path_for(key)
        try:
            raw = path.read_text(encoding="utf-8")
        except FileNotFoundError:
            return None
        try:
            entry = json.loads(raw)
            if entry["key"] != key or not isinstance(entry["reply_text"], str):
                raise ValueError("key mismatch")
        except (ValueError, KeyError, TypeError) as exc:
            logger.warning("ignoring corrupt cache entry %s (%s)", path, exc)
            return None
        return entry

    def put(self, key: str, reply_text: str, model_id: str) -> Path:
        path = self.path_for(key)
        path.parent.mkdir(parents=True, exist_ok=True)
        entry = {
            "key": key,
            "reply_text": reply_text,
            "model_id": model_id,
            "created_at": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        }
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=".json")
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as fh:
                json.dump(entry, fh, ensure_ascii=False)
            os.replace(tmp, path)
        except BaseException:
            Path(tmp).unlink(missing_ok=True)
            raise
        return path


def cache_get_or_call(cache: ResponseCache, request: VlmRequest, backend: Vlm) -> VlmReply:
    if request.temperature > 0:
        return VlmReply(backend.query(request).text, cached=False)
    key = request_key(request)
    entry = cache.get(key)
    if entry is not None:
        cache.hits += 1
        return VlmReply(entry["reply_text"], cached=True)
    cache.misses += 1
    reply = backend.query(request)
    cache.put(key, reply.text, request.model_id or backend.model_id)
    return VlmReply(reply.text, cached=False)


class CachedVlm:
    """A VLM whose temperature-0 answers are served from a ``ResponseCache``."""

    def __init__(self, backend: Vlm, cache: ResponseCache):
        self.backend = backend
        self.cache = cache
        self.model_id = backend.model_id

    def query(self, request: VlmRequest) -> VlmReply:
        return cache_get_or_call(self.cache, request, self.backend)

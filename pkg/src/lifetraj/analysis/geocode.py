"""Rate-limited, disk-cached client for a Nominatim-style search endpoint."""
from __future__ import annotations

import json
import logging
import os
import tempfile
import threading
import time
from pathlib import Path
from typing import Callable

import requests

logger = logging.getLogger(__name__)

DEFAULT_ENDPOINT = "https://nominatim.openstreetmap.org/search"
ENDPOINT_ENV = "LIFETRAJ_GEOCODER_URL"
USER_AGENT = "lifetraj-geocoder/0.1"


def normalize_query(query: str) -> str:
    return " ".join(query.split()).casefold()


class Geocoder:
    """First-result geocoding with a persistent JSON cache.

    Cache entries are ``[lat, lon]`` or ``null`` for queries the service could
    not resolve. Network failures are not cached. Requests are serialised and
    spaced at least ``min_interval`` seconds apart.
    """

    def __init__(
        self,
        endpoint: str | None = None,
        cache_path: str | Path | None = None,
        *,
        min_interval: float = 1.0,
        retries: int = 2,
        backoff: float = 1.0,
        timeout: float = 10.0,
        session: requests.Session | None = None,
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.endpoint = endpoint or os.environ.get(ENDPOINT_ENV) or DEFAULT_ENDPOINT
        self.cache_path = Path(cache_path) if cache_path else None
        self.min_interval = min_interval
        self.retries = retries
        self.backoff = backoff
        self.timeout = timeout
        self.session = session or requests.Session()
        self.clock = clock
        self.sleep = sleep
        self.requests_made = 0
        self._lock = threading.Lock()
        self._last_request: float | None = None
        self.cache: dict[str, list[float] | None] = {}
        if self.cache_path and self.cache_path.exists():
            self.cache = json.loads(self.cache_path.read_text(encoding="utf-8"))

    def _wait_turn(self):
        if self._last_request is not None:
            remaining = self.min_interval - (self.clock() - self._last_request)
            if remaining > 0:
                self.sleep(remaining)
        self._last_request = self.clock()

    def _fetch(self, query: str):
        params = {"q": query, "format": "json"}
        for attempt in range(self.retries + 1):
            self._wait_turn()
            self.requests_made += 1
            try:
                resp = self.session.get(self.endpoint, params=params, timeout=self.timeout,
                                        headers={"User-Agent": USER_AGENT})
                resp.raise_for_status()
                return resp.json()
            except (requests.RequestException, ValueError) as exc:
                if attempt == self.retries:
                    raise
                logger.warning("geocoder request for %r failed (%s); retrying", query, exc)
                self.sleep(self.backoff * 2 ** attempt)

    @staticmethod
    def _first_coords(results) -> list[float] | None:
        if not isinstance(results, list):
            return None
        for item in results:
            try:
                lat, lon = float(item["lat"]), float(item["lon"])
            except (KeyError, TypeError, ValueError):
                continue
            if -90 <= lat <= 90 and -180 <= lon <= 180:
                return [lat, lon]
        return None

    def geocode(self, query: str) -> tuple[float, float] | None:
        key = normalize_query(query)
        if not key:
            return None
        with self._lock:
            if key in self.cache:
                hit = self.cache[key]
                return tuple(hit) if hit is not None else None
            try:
                results = self._fetch(query)
            except (requests.RequestException, ValueError) as exc:
                logger.warning("geocoding %r failed: %s", query, exc)
                return None
            coords = self._first_coords(results)
            self.cache[key] = coords
            self._save()
            return tuple(coords) if coords is not None else None

    def _save(self):
        if not self.cache_path:
            return
        self.cache_path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=self.cache_path.parent, prefix=".geocache-")
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            json.dump(self.cache, fh, ensure_ascii=False, sort_keys=True, indent=0)
        os.replace(tmp, self.cache_path)

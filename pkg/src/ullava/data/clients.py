"""Captioner / tagger clients used by the salient dataset builder.

HTTP wire format (JSON over POST):

* caption: request ``{"image_png_b64": <base64 PNG>}`` -> response ``{"caption": str}``
* tag:     request ``{"text": <description>}``         -> response ``{"tag": str}``

Endpoints, timeout and retry budget come from the run config, overridable with
``ULLAVA_CAPTION_URL``, ``ULLAVA_TAG_URL``, ``ULLAVA_CLIENT_TIMEOUT`` and
``ULLAVA_CLIENT_RETRIES``.
"""

from __future__ import annotations

import base64
import io
import logging
import os
import re
import time
from dataclasses import dataclass
from typing import Callable, Protocol, TypeVar

import httpx
import numpy as np
from PIL import Image

from ..errors import ClientError

log = logging.getLogger(__name__)
T = TypeVar("T")


class CaptionClient(Protocol):
    def caption(self, image_png: bytes) -> str: ...


class TagClient(Protocol):
    def tag(self, description: str) -> str: ...


@dataclass
class ClientSettings:
    caption_url: str | None = None
    tag_url: str | None = None
    timeout: float = 30.0
    attempts: int = 3
    backoff: float = 0.5  # seconds before the 2nd attempt, doubled afterwards

    def with_env(self, environ=None) -> "ClientSettings":
        env = os.environ if environ is None else environ
        return ClientSettings(
            caption_url=env.get("ULLAVA_CAPTION_URL", self.caption_url),
            tag_url=env.get("ULLAVA_TAG_URL", self.tag_url),
            timeout=float(env.get("ULLAVA_CLIENT_TIMEOUT", self.timeout)),
            attempts=int(env.get("ULLAVA_CLIENT_RETRIES", self.attempts)),
            backoff=self.backoff,
        )


def encode_png(pixels: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(np.asarray(pixels, dtype=np.uint8)).save(buf, format="PNG")
    return buf.getvalue()


def decode_png(data: bytes) -> np.ndarray:
    return np.asarray(Image.open(io.BytesIO(data)).convert("RGB"))


def with_retries(call: Callable[[], T], attempts: int = 3, backoff: float = 0.5, sleep=time.sleep) -> T:
    """Run ``call`` up to ``attempts`` times with exponential backoff; raise ClientError at the end."""
    last: Exception | None = None
    for i in range(attempts):
        try:
            return call()
        except Exception as e:  # noqa: BLE001 - any client failure counts as an attempt
            last = e
            log.warning("client call failed (attempt %d/%d): %s", i + 1, attempts, e)
            if i + 1 < attempts and backoff > 0:
                sleep(backoff * 2**i)
    raise ClientError(f"giving up after {attempts} attempts: {last}") from last


class HttpCaptionClient:
    def __init__(self, url: str, timeout: float = 30.0, transport: httpx.BaseTransport | None = None):
        self.url = url
        self._client = httpx.Client(timeout=timeout, transport=transport)

    def caption(self, image_png: bytes) -> str:
        resp = self._client.post(self.url, json={"image_png_b64": base64.b64encode(image_png).decode("ascii")})
        resp.raise_for_status()
        text = resp.json().get("caption")
        if not isinstance(text, str) or not text.strip():
            raise ClientError(f"caption service returned no caption: {resp.text[:200]}")
        return text


class HttpTagClient:
    def __init__(self, url: str, timeout: float = 30.0, transport: httpx.BaseTransport | None = None):
        self.url = url
        self._client = httpx.Client(timeout=timeout, transport=transport)

    def tag(self, description: str) -> str:
        resp = self._client.post(self.url, json={"text": description})
        resp.raise_for_status()
        tag = resp.json().get("tag")
        if not isinstance(tag, str) or not tag.strip():
            raise ClientError(f"tag service returned no tag: {resp.text[:200]}")
        return tag


COLOR_NAMES = {
    "red": (220, 40, 40),
    "green": (40, 200, 60),
    "blue": (40, 70, 220),
    "yellow": (230, 220, 40),
    "purple": (150, 50, 200),
    "orange": (240, 140, 30),
    "cyan": (40, 210, 220),
    "white": (240, 240, 240),
}


def nearest_color(rgb) -> str:
    rgb = np.asarray(rgb, dtype=float)
    return min(COLOR_NAMES, key=lambda k: float(((np.asarray(COLOR_NAMES[k]) - rgb) ** 2).sum()))


class MockCaptioner:
    """Describes a crop by its dominant color and aspect ratio, e.g. "a red block"."""

    def caption(self, image_png: bytes) -> str:
        crop = decode_png(image_png).reshape(-1, 3).astype(int)
        values, counts = np.unique(crop, axis=0, return_counts=True)
        color = nearest_color(values[counts.argmax()])
        h, w = decode_png(image_png).shape[:2]
        ratio = max(h, w) / min(h, w)
        shape = "square" if ratio < 1.2 else ("bar" if ratio > 2.0 else "block")
        return f"a {color} {shape}"


class MockTagger:
    """Keeps the last word of the description as the tag ("a red ball" -> "ball")."""

    def tag(self, description: str) -> str:
        words = re.findall(r"[A-Za-z]+", description)
        if not words:
            raise ClientError(f"no noun phrase in {description!r}")
        return words[-1].lower()

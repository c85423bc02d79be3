"""Caption providers: the boundary in front of the vision-language model.

The stub is fully deterministic given its seed and is the default for
reproducible pipeline runs; the HTTP provider posts the patch (lossless
PNG, base64) plus the prompt to a remote endpoint and expects the caption
as the plain-text response body.
"""

import base64
import hashlib
import io
import os
import re
import time

import numpy as np
import requests
from PIL import Image

from .errors import ProviderError

DEFAULT_API_KEY_ENV = "UAVRIS_CAPTION_KEY"

# the prompt template marks its target in this form so providers (and the
# stub in particular) can recover it without guessing
TARGET_PATTERN = re.compile(r"mention the word '([^']+)'")


class CaptionProvider:
    """Interface: one call per (patch image, prompt) request."""

    def caption(self, image, prompt, attempt=0):
        raise NotImplementedError


class StubCaptionProvider(CaptionProvider):
    """Template captions keyed by the prompt's target category, with
    variation derived from a digest of (seed, image bytes, prompt, attempt)."""

    TEMPLATES = (
        "the {category} in the scene",
        "a {category} seen from above",
        "{category} near the {noun} of the patch",
        "some {category} by the {noun}",
        "{adj} {category} in the area",
        "{adj} {category} around the {noun}",
    )
    ADJECTIVES = ("large", "small", "long", "bright", "dark", "scattered")
    NOUNS = ("edge", "corner", "center", "border", "middle")

    def __init__(self, seed=0):
        self.seed = int(seed)

    def caption(self, image, prompt, attempt=0):
        match = TARGET_PATTERN.search(prompt)
        category = match.group(1) if match else "object"
        h = hashlib.md5()
        h.update(str(self.seed).encode())
        h.update(np.ascontiguousarray(image).tobytes())
        h.update(prompt.encode("utf-8"))
        h.update(str(attempt).encode())
        digest = int.from_bytes(h.digest()[:8], "big")
        template = self.TEMPLATES[digest % len(self.TEMPLATES)]
        return template.format(
            category=category,
            adj=self.ADJECTIVES[(digest >> 8) % len(self.ADJECTIVES)],
            noun=self.NOUNS[(digest >> 16) % len(self.NOUNS)],
        )


class HttpCaptionProvider(CaptionProvider):
    """Remote provider with timeout, transport retries, and exponential
    backoff.  Credentials come from the configured environment variable and
    are sent as a bearer token."""

    def __init__(self, url, timeout=30.0, transport_retries=3, backoff=0.5,
                 api_key_env=DEFAULT_API_KEY_ENV):
        self.url = url
        self.timeout = timeout
        self.transport_retries = transport_retries
        self.backoff = backoff
        self.api_key_env = api_key_env

    def _headers(self):
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def caption(self, image, prompt, attempt=0):
        buf = io.BytesIO()
        Image.fromarray(np.asarray(image, dtype=np.uint8)).save(buf, format="PNG")
        payload = {
            "prompt": prompt,
            "image_png_b64": base64.b64encode(buf.getvalue()).decode("ascii"),
        }
        last_error = None
        for i in range(self.transport_retries + 1):
            try:
                resp = requests.post(self.url, json=payload,
                                     headers=self._headers(), timeout=self.timeout)
                if resp.status_code == 200:
                    return resp.text.strip()
                last_error = f"HTTP {resp.status_code}"
            except requests.RequestException as exc:
                last_error = str(exc)
            if i < self.transport_retries:
                time.sleep(self.backoff * (2 ** i))
        raise ProviderError(
            f"caption request to {self.url} failed after "
            f"{self.transport_retries + 1} attempts: {last_error}")

"""
Reward scoring for rendered sketches.

Two families of scorers:
  - Embedding scores: mean cosine between each of the 16 view embeddings and
    a text (or reference-image) embedding fetched from an HTTP embedding
    service. Cosines are computed here on the returned vectors.
  - Proxy score: a deterministic geometric stand-in combining ink coverage,
    non-degeneracy and 3D spread, used for offline runs and tests.

Embedding service contract:
    POST {base_url}/embed_text  {"text": str}        -> {"vector": [float, ...]}
    POST {base_url}/embed_image {"png_base64": str}  -> {"vector": [float, ...]}
The API key (if any) is read from the env var named in the config and sent
as a bearer token.

Only score_text / score_image touch the network.
"""

from __future__ import annotations

import base64
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Protocol, Sequence

import numpy as np
import requests

from scripts.curves import DEFAULT_DEGENERACY_EPSILON, Sketch, degenerate_fraction, is_degenerate
from scripts.renderer import VIEW_COUNT, RenderedView, encode_png

logger = logging.getLogger(__name__)

DEFAULT_TEMPLATE = "{C}, minimal 2d line drawing, on a white background, black and white."
DEFAULT_PROXY_WEIGHTS = (0.4, 0.4, 0.2)
DEFAULT_TARGET_INKED = 5000
PLANAR_TOLERANCE = 1e-12

# HTTP statuses worth retrying
_RETRY_STATUSES = {429, 500, 502, 503, 504}


class EmbeddingServiceError(Exception):
    """Embedding service failed after retries or returned unusable data."""
    pass


class RewardKind(str, Enum):
    EMBEDDING_TEXT = 'EmbeddingText'
    EMBEDDING_IMAGE = 'EmbeddingImage'
    PROXY = 'Proxy'
    PARSE_FAILURE = 'ParseFailure'


@dataclass(frozen=True)
class RewardScore:
    value: float
    kind: RewardKind
    per_view: Optional[tuple[float, ...]] = None

    def __post_init__(self):
        if self.kind is RewardKind.PARSE_FAILURE and self.value != 0.0:
            raise ValueError(f"Parse failures score exactly 0.0, got {self.value}")
        if self.per_view is not None:
            object.__setattr__(self, 'per_view', tuple(float(v) for v in self.per_view))
            if len(self.per_view) != VIEW_COUNT:
                raise ValueError(f"per_view needs {VIEW_COUNT} entries, got {len(self.per_view)}")
            if abs(self.value - float(np.mean(self.per_view))) > 1e-12:
                raise ValueError("RewardScore.value must equal the mean of per_view")

    @classmethod
    def from_per_view(cls, kind: RewardKind, per_view: Sequence[float]) -> RewardScore:
        return cls(value=float(np.mean(per_view)), kind=kind, per_view=tuple(per_view))

    @classmethod
    def parse_failure(cls) -> RewardScore:
        return cls(value=0.0, kind=RewardKind.PARSE_FAILURE)

    def as_dict(self) -> dict:
        return {
            'value': self.value,
            'kind': self.kind.value,
            'per_view': list(self.per_view) if self.per_view is not None else None,
        }

    @classmethod
    def from_dict(cls, data: dict) -> RewardScore:
        per_view = data.get('per_view')
        return cls(value=float(data['value']), kind=RewardKind(data['kind']),
                   per_view=tuple(per_view) if per_view is not None else None)


@dataclass(frozen=True)
class PromptTemplate:
    pattern: str = DEFAULT_TEMPLATE

    def __post_init__(self):
        if self.pattern.count('{C}') != 1:
            raise ValueError(f"Prompt template needs exactly one {{C}} slot: {self.pattern!r}")

    def fill(self, category: str) -> str:
        return self.pattern.replace('{C}', category)


@dataclass(frozen=True)
class EmbeddingServiceConfig:
    base_url: str
    timeout: float = 30.0
    max_retries: int = 3
    backoff_seconds: float = 1.0
    api_key_env: str = 'EMBED_API_KEY'
    fan_out: int = 4

    def __post_init__(self):
        if not self.base_url:
            raise ValueError("Embedding service base_url must not be empty")
        if self.fan_out < 1:
            raise ValueError(f"fan_out must be >= 1, got {self.fan_out}")


# --------------------------------------------------------------------------- #
# Embedding service client
# --------------------------------------------------------------------------- #

class EmbeddingClient:
    """Thin JSON-over-HTTP client with retry and exponential backoff."""

    def __init__(self, config: EmbeddingServiceConfig, session: Optional[requests.Session] = None):
        self.config = config
        self.session = session or requests.Session()
        api_key = os.getenv(config.api_key_env)
        self.headers = {'Content-Type': 'application/json'}
        if api_key:
            self.headers['Authorization'] = f"Bearer {api_key}"

    def _post(self, route: str, payload: dict) -> np.ndarray:
        url = self.config.base_url.rstrip('/') + route
        last_error = None

        for attempt in range(self.config.max_retries + 1):
            try:
                response = self.session.post(url, json=payload, headers=self.headers,
                                             timeout=self.config.timeout)
            except (requests.ConnectionError, requests.Timeout) as e:
                last_error = f"{type(e).__name__}: {e}"
            else:
                if response.status_code in _RETRY_STATUSES:
                    last_error = f"HTTP {response.status_code}"
                elif response.status_code >= 400:
                    raise EmbeddingServiceError(
                        f"{url} rejected the request with HTTP {response.status_code}: "
                        f"{response.text[:200]}")
                else:
                    return self._parse_vector(url, response)

            if attempt < self.config.max_retries:
                delay = self.config.backoff_seconds * (2 ** attempt)
                logger.warning("Embedding request to %s failed (%s), attempt %d/%d; retrying in %.1fs",
                               url, last_error, attempt + 1, self.config.max_retries + 1, delay)
                time.sleep(delay)

        raise EmbeddingServiceError(
            f"{url} failed after {self.config.max_retries + 1} attempts: {last_error}")

    @staticmethod
    def _parse_vector(url: str, response) -> np.ndarray:
        try:
            vector = np.asarray(response.json()['vector'], dtype=np.float64)
        except (ValueError, KeyError, TypeError) as e:
            raise EmbeddingServiceError(f"{url} returned no usable 'vector': {e}") from e
        if vector.ndim != 1 or vector.size == 0 or not np.all(np.isfinite(vector)):
            raise EmbeddingServiceError(f"{url} returned a malformed vector of shape {vector.shape}")
        return vector

    def embed_text(self, text: str) -> np.ndarray:
        return self._post('/embed_text', {'text': text})

    def embed_image(self, view: RenderedView) -> np.ndarray:
        png = base64.b64encode(encode_png(view)).decode('ascii')
        return self._post('/embed_image', {'png_base64': png})


def _unit(vector: np.ndarray) -> np.ndarray:
    # Service vectors are nominally unit length; only rescale real drift
    norm = float(np.linalg.norm(vector))
    if norm == 0.0:
        raise EmbeddingServiceError("Embedding service returned a zero vector")
    if abs(norm - 1.0) > 1e-6:
        return vector / norm
    return vector


def _per_view_cosines(anchor: np.ndarray, views: Sequence[RenderedView],
                      client: EmbeddingClient) -> list[float]:
    if len(views) != VIEW_COUNT:
        raise ValueError(f"Scoring needs exactly {VIEW_COUNT} views, got {len(views)}")
    anchor = _unit(anchor)
    with ThreadPoolExecutor(max_workers=client.config.fan_out) as pool:
        vectors = list(pool.map(client.embed_image, views))

    cosines = []
    for view, vector in zip(views, vectors):
        if vector.shape != anchor.shape:
            raise EmbeddingServiceError(
                f"Embedding dimension mismatch: view {view.pose_index} has {vector.shape[0]}, "
                f"anchor has {anchor.shape[0]}")
        cosines.append(float(np.dot(anchor, _unit(vector))))
    return cosines


def score_text(views: Sequence[RenderedView], prompt: str, template: PromptTemplate,
               svc: EmbeddingServiceConfig,
               client: Optional[EmbeddingClient] = None) -> RewardScore:
    """Mean cosine between the templated prompt and each view."""
    client = client or EmbeddingClient(svc)
    if len(views) != VIEW_COUNT:
        raise ValueError(f"Scoring needs exactly {VIEW_COUNT} views, got {len(views)}")
    anchor = client.embed_text(template.fill(prompt))
    return RewardScore.from_per_view(RewardKind.EMBEDDING_TEXT,
                                     _per_view_cosines(anchor, views, client))


def score_image(views: Sequence[RenderedView], reference_image: RenderedView,
                svc: EmbeddingServiceConfig,
                client: Optional[EmbeddingClient] = None) -> RewardScore:
    """Mean cosine between a reference image and each view."""
    client = client or EmbeddingClient(svc)
    if len(views) != VIEW_COUNT:
        raise ValueError(f"Scoring needs exactly {VIEW_COUNT} views, got {len(views)}")
    anchor = client.embed_image(reference_image)
    return RewardScore.from_per_view(RewardKind.EMBEDDING_IMAGE,
                                     _per_view_cosines(anchor, views, client))


# --------------------------------------------------------------------------- #
# Offline proxy
# --------------------------------------------------------------------------- #

def spread_term(sketch: Sketch, bound: float = 0.8,
                epsilon: float = DEFAULT_DEGENERACY_EPSILON) -> float:
    """Std-dev of live control points along their thinnest principal axis, scaled by bound/2.

    Rotation-invariant: zero for any planar (or collinear) sketch whatever
    plane it lies in, and for sketches with no non-degenerate curves.
    """
    live = [c for c in sketch.curves if not is_degenerate(c, epsilon)]
    if not live:
        return 0.0
    points = Sketch(tuple(live)).control_points()
    eigenvalues = np.linalg.eigvalsh(np.cov(points.T, bias=True))
    smallest, largest = float(eigenvalues[0]), float(eigenvalues[-1])
    # Rounding noise on coplanar points
    if smallest <= PLANAR_TOLERANCE * largest:
        return 0.0
    return float(np.clip(math.sqrt(smallest) / (bound / 2.0), 0.0, 1.0))


def coverage_term(views: Sequence[RenderedView], target_inked: int = DEFAULT_TARGET_INKED) -> float:
    if not views:
        return 0.0
    return float(np.mean([min(1.0, int(v.inked_mask().sum()) / target_inked) for v in views]))


def score_proxy(sketch: Sketch, views: Sequence[RenderedView],
                weights: tuple[float, float, float] = DEFAULT_PROXY_WEIGHTS,
                target_inked: int = DEFAULT_TARGET_INKED,
                bound: float = 0.8,
                epsilon: float = DEFAULT_DEGENERACY_EPSILON) -> RewardScore:
    """w1*coverage + w2*(1 - degenerate_fraction) + w3*spread."""
    if not sketch.curves:
        return RewardScore(value=0.0, kind=RewardKind.PROXY)
    w_cov, w_live, w_spread = weights
    value = (w_cov * coverage_term(views, target_inked)
             + w_live * (1.0 - degenerate_fraction(sketch, epsilon))
             + w_spread * spread_term(sketch, bound, epsilon))
    return RewardScore(value=value, kind=RewardKind.PROXY)


# --------------------------------------------------------------------------- #
# Scorer objects used by the extraction loop and CLI
# --------------------------------------------------------------------------- #

class Scorer(Protocol):
    kind: RewardKind

    def score(self, sketch: Sketch, views: Sequence[RenderedView], prompt: str) -> RewardScore:
        ...


class ProxyScorer:
    kind = RewardKind.PROXY

    def __init__(self, weights=DEFAULT_PROXY_WEIGHTS, target_inked=DEFAULT_TARGET_INKED,
                 bound=0.8, epsilon=DEFAULT_DEGENERACY_EPSILON):
        self.weights = tuple(weights)
        self.target_inked = target_inked
        self.bound = bound
        self.epsilon = epsilon

    def score(self, sketch, views, prompt):
        return score_proxy(sketch, views, self.weights, self.target_inked, self.bound, self.epsilon)


class TextEmbeddingScorer:
    kind = RewardKind.EMBEDDING_TEXT

    def __init__(self, svc: EmbeddingServiceConfig, template: PromptTemplate = PromptTemplate(),
                 use_template: bool = True, client: Optional[EmbeddingClient] = None):
        self.svc = svc
        # Raw category name is scored through a bare "{C}" template
        self.template = template if use_template else PromptTemplate('{C}')
        self.client = client or EmbeddingClient(svc)

    def score(self, sketch, views, prompt):
        return score_text(views, prompt, self.template, self.svc, self.client)


class ImageEmbeddingScorer:
    kind = RewardKind.EMBEDDING_IMAGE

    def __init__(self, svc: EmbeddingServiceConfig, reference: RenderedView,
                 client: Optional[EmbeddingClient] = None):
        self.svc = svc
        self.reference = reference
        self.client = client or EmbeddingClient(svc)

    def score(self, sketch, views, prompt):
        return score_image(views, self.reference, self.svc, self.client)

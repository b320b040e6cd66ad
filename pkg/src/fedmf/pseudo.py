"""Pseudo-item defenses: who to fill, and which virtual rating to fabricate.

Two selection strategies are provided. ``random`` draws unrated items
uniformly and rates them at the user's observed mean (the classic hybrid
filling baseline). ``similarity`` picks the unrated items whose encoded
feature vectors are closest to something the user already rated, and
copies or blends nearby ratings, which fabricates far less noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import LatentFactors, item_gradient
from .data import RATING_MAX, RATING_MIN


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine of the angle between two vectors; 0 if either has zero norm."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"vector length mismatch: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(a @ b / (na * nb))


class FeatureEncoder:
    """Maps item latent vectors to the feature space similarities live in.

    The default is the identity (features are the latent vectors
    themselves). A fixed seeded linear projection is available for
    ablations; the same matrix is applied to every item in every round.
    """

    def __init__(self, matrix: np.ndarray | None = None):
        self.matrix = None if matrix is None else np.asarray(matrix, dtype=float)

    @classmethod
    def identity(cls) -> "FeatureEncoder":
        return cls(None)

    @classmethod
    def fixed_linear(cls, in_dim: int, out_dim: int, seed: int) -> "FeatureEncoder":
        rng = np.random.default_rng(seed)
        mat = rng.normal(0.0, 1.0 / np.sqrt(in_dim), size=(in_dim, out_dim))
        return cls(mat)

    def encode(self, vecs: np.ndarray) -> np.ndarray:
        vecs = np.asarray(vecs, dtype=float)
        if self.matrix is None:
            return vecs
        return vecs @ self.matrix


@dataclass
class PseudoConfig:
    """Pseudo-item behavior. Pseudo count per user is ceil(ratio_q * |rated|)."""

    ratio_q: float = 1.0
    strategy: str = "similarity"  # "similarity" | "random"
    virtual_rating_rule: str = "nearest_item"  # "nearest_item" | "similarity_weighted"
    top_s: int = 3
    encoder: FeatureEncoder = field(default_factory=FeatureEncoder.identity)

    def __post_init__(self) -> None:
        if self.ratio_q < 0:
            raise ValueError("ratio_q must be nonnegative")
        if self.strategy not in ("similarity", "random"):
            raise ValueError(f"unknown pseudo strategy {self.strategy!r}")
        if self.virtual_rating_rule not in ("nearest_item", "similarity_weighted"):
            raise ValueError(f"unknown virtual rating rule {self.virtual_rating_rule!r}")
        if self.top_s < 1:
            raise ValueError("top_s must be >= 1")

    def pseudo_count(self, num_rated: int, num_unrated: int) -> int:
        return min(math.ceil(self.ratio_q * num_rated), num_unrated)


@dataclass
class UserProfile:
    """A user's observed ratings, by contiguous item index."""

    user: int
    items: np.ndarray
    ratings: np.ndarray


@dataclass
class FilledProfile:
    """Observed ratings plus fabricated (item, virtual rating) pairs.

    Rated and pseudo item sets are disjoint; virtual ratings stay inside
    the rating range.
    """

    user: int
    rated_items: np.ndarray
    rated_ratings: np.ndarray
    pseudo_items: np.ndarray
    pseudo_ratings: np.ndarray

    def all_items(self) -> np.ndarray:
        return np.concatenate([self.rated_items, self.pseudo_items])

    def all_ratings(self) -> np.ndarray:
        return np.concatenate([self.rated_ratings, self.pseudo_ratings])


def _empty_profile(user: int) -> FilledProfile:
    empty_i = np.empty(0, dtype=np.int64)
    empty_r = np.empty(0, dtype=float)
    return FilledProfile(user, empty_i.copy(), empty_r.copy(), empty_i, empty_r)


def normalized_features(item_vecs: np.ndarray, encoder: FeatureEncoder) -> np.ndarray:
    """Encode then row-normalize; zero feature rows stay zero (similarity 0)."""
    feats = encoder.encode(item_vecs)
    norms = np.linalg.norm(feats, axis=1, keepdims=True)
    return np.divide(feats, norms, out=np.zeros_like(feats), where=norms > 0)


def select_pseudo_similarity(
    profile: UserProfile,
    item_vecs: np.ndarray,
    cfg: PseudoConfig,
    features: np.ndarray | None = None,
) -> FilledProfile:
    """Pick the unrated items most feature-similar to the user's rated set.

    Each unrated item j is scored by max_i cos(feat_i, feat_j) over the
    user's rated items i; the top pseudo_count scorers are filled with a
    virtual rating derived from the nearby rated items. ``features`` may
    carry precomputed normalized features to share across users.
    """
    rated = np.asarray(profile.items, dtype=np.int64)
    if rated.size == 0:
        return _empty_profile(profile.user)
    if features is None:
        features = normalized_features(item_vecs, cfg.encoder)
    num_items = features.shape[0]
    k = cfg.pseudo_count(rated.size, num_items - rated.size)
    if k == 0:
        return FilledProfile(
            profile.user,
            rated.copy(),
            np.asarray(profile.ratings, dtype=float).copy(),
            np.empty(0, dtype=np.int64),
            np.empty(0, dtype=float),
        )

    sims = features @ features[rated].T  # (num_items, n_rated)
    score = sims.max(axis=1)
    score[rated] = -np.inf
    # Stable top-k: ties broken by ascending item index.
    order = np.lexsort((np.arange(num_items), -score))
    chosen = np.sort(order[:k]).astype(np.int64)

    ratings = np.asarray(profile.ratings, dtype=float)
    chosen_sims = sims[chosen]  # (k, n_rated)
    if cfg.virtual_rating_rule == "nearest_item":
        virtual = ratings[np.argmax(chosen_sims, axis=1)]
    else:
        s = min(cfg.top_s, rated.size)
        top_idx = np.argsort(-chosen_sims, axis=1, kind="stable")[:, :s]
        top_w = np.take_along_axis(chosen_sims, top_idx, axis=1)
        top_r = ratings[top_idx]
        denom = top_w.sum(axis=1)
        safe = np.abs(denom) > 1e-12
        virtual = top_r.mean(axis=1)
        virtual[safe] = (top_w[safe] * top_r[safe]).sum(axis=1) / denom[safe]
        virtual = np.clip(virtual, RATING_MIN, RATING_MAX)
    return FilledProfile(profile.user, rated.copy(), ratings.copy(), chosen, virtual)


def select_pseudo_random(
    profile: UserProfile,
    num_items: int,
    cfg: PseudoConfig,
    rng: np.random.Generator,
) -> FilledProfile:
    """Uniformly sample unrated items; every virtual rating is the user's mean."""
    rated = np.asarray(profile.items, dtype=np.int64)
    if rated.size == 0:
        return _empty_profile(profile.user)
    unrated = np.setdiff1d(np.arange(num_items, dtype=np.int64), rated, assume_unique=False)
    k = cfg.pseudo_count(rated.size, unrated.size)
    ratings = np.asarray(profile.ratings, dtype=float)
    if k == 0:
        pseudo_items = np.empty(0, dtype=np.int64)
        pseudo_ratings = np.empty(0, dtype=float)
    else:
        pseudo_items = np.sort(rng.choice(unrated, size=k, replace=False))
        pseudo_ratings = np.full(k, float(ratings.mean()))
    return FilledProfile(profile.user, rated.copy(), ratings.copy(), pseudo_items, pseudo_ratings)


def filled_gradient(
    profile: FilledProfile, factors: LatentFactors, reg_lambda: float
) -> dict[int, np.ndarray]:
    """Per-item gradients over the filled profile.

    Rated items use the true rating, pseudo items the virtual one; both go
    through the same item gradient, so nothing in the output marks which
    is which.
    """
    u_vec = factors.user_vecs[profile.user]
    grads: dict[int, np.ndarray] = {}
    for item, rating in zip(profile.all_items(), profile.all_ratings()):
        grads[int(item)] = item_gradient(u_vec, factors.item_vecs[item], float(rating), reg_lambda)
    return grads

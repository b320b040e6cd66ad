"""Seeded synthetic rating generators for experiments and validation runs.

Two flavors:

* :func:`movielens_like` mimics the marginal statistics of the public
  MovieLens-100K file (user activity, item popularity long tail, rating
  mean/spread) plus a low-rank taste component, so similarity-based
  pseudo-item selection has real structure to exploit.
* :func:`planted_factors` draws ratings from known low-rank factors plus
  Gaussian noise, giving ground truth for convergence and attack studies.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import RATING_MAX, RATING_MIN, RatingsDataset


@dataclass
class PlantedData:
    """A dataset plus the full ground-truth rating matrix it was drawn from."""

    dataset: RatingsDataset
    full_ratings: np.ndarray  # (num_users, num_items), includes unobserved entries
    user_factors: np.ndarray
    item_factors: np.ndarray


def _weighted_distinct_items(rng: np.random.Generator, weights: np.ndarray, k: int) -> np.ndarray:
    # Gumbel top-k: weighted sampling without replacement in one vector op.
    keys = np.log(weights) + rng.gumbel(size=weights.size)
    return np.argpartition(-keys, k - 1)[:k]


def movielens_like(
    num_users: int = 943,
    num_items: int = 1682,
    num_ratings: int = 100_000,
    seed: int = 7,
) -> RatingsDataset:
    """Generate integer 1..5 ratings with MovieLens-100K-like shape.

    Ratings follow  clip(round(mu + b_u + b_i + x_u . y_i + noise), 1, 5)
    so user and item effects plus a rank-8 taste term drive them.
    """
    rng = np.random.default_rng(seed)

    # Long-tail item popularity, heavy-tail user activity (min 20 like ML-100K).
    pop = 1.0 / np.arange(1, num_items + 1) ** 0.9
    pop = rng.permutation(pop)
    pop /= pop.sum()
    activity = np.exp(rng.normal(0.0, 0.8, size=num_users))
    counts = 20 + activity / activity.sum() * (num_ratings - 20 * num_users)
    counts = np.maximum(counts.astype(int), 20)
    counts = np.minimum(counts, num_items)

    b_user = rng.normal(0.0, 0.40, size=num_users)
    b_item = rng.normal(0.0, 0.50, size=num_items)
    dim = 8
    x = rng.normal(0.0, 1.0, size=(num_users, dim)) / np.sqrt(dim)
    y = rng.normal(0.0, 1.4, size=(num_items, dim)) / np.sqrt(dim)

    users, items, ratings = [], [], []
    for u in range(num_users):
        basket = np.sort(_weighted_distinct_items(rng, pop, int(counts[u])))
        raw = 3.53 + b_user[u] + b_item[basket] + x[u] @ y[basket].T
        raw += rng.normal(0.0, 0.65, size=basket.size)
        r = np.clip(np.rint(raw), RATING_MIN, RATING_MAX)
        users.append(np.full(basket.size, u + 1, dtype=np.int64))
        items.append(basket.astype(np.int64) + 1)
        ratings.append(r)
    return RatingsDataset(
        users=np.concatenate(users),
        items=np.concatenate(items),
        ratings=np.concatenate(ratings),
    )


def planted_factors(
    num_users: int = 60,
    num_items: int = 40,
    rated_per_user: int = 20,
    dim: int = 4,
    noise: float = 0.1,
    seed: int = 0,
) -> PlantedData:
    """Ratings from planted low-rank factors plus Gaussian observation noise.

    The signal is centered at 3 and squashed into the rating range before
    noise is added, so metric-time clamping never distorts it.
    """
    if rated_per_user > num_items:
        raise ValueError("rated_per_user cannot exceed num_items")
    rng = np.random.default_rng(seed)
    u_true = rng.normal(0.0, 1.0, size=(num_users, dim)) / np.sqrt(dim)
    v_true = rng.normal(0.0, 1.0, size=(num_items, dim))
    signal = u_true @ v_true.T
    signal = 3.0 + 1.2 * np.tanh(signal)
    full = np.clip(signal + rng.normal(0.0, noise, size=signal.shape), RATING_MIN, RATING_MAX)

    users, items, ratings = [], [], []
    for u in range(num_users):
        basket = np.sort(rng.choice(num_items, size=rated_per_user, replace=False))
        users.append(np.full(basket.size, u, dtype=np.int64))
        items.append(basket.astype(np.int64))
        ratings.append(full[u, basket])
    ds = RatingsDataset(
        users=np.concatenate(users),
        items=np.concatenate(items),
        ratings=np.concatenate(ratings),
    )
    return PlantedData(dataset=ds, full_ratings=full, user_factors=u_true, item_factors=v_true)

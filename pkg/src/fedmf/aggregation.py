"""Distance-aware server aggregation weights.

Each client's round update is summarized by the mean statistic of its
local steps (the flattened per-item delta) and optionally a diagonal
variance estimate. Treating updates as Gaussians, the squared 2-Wasserstein
distance between a client and the global reference has the closed form

    d^2 = ||mu_1 - mu_2||^2 + sum_i (sqrt(s_1i) - sqrt(s_2i))^2

and the aggregation weights minimizing sum_u p_u^2 d_u^2 on the simplex
are inversely proportional to d_u^2. A chi-square divergence against the
uniform vector diagnoses how biased the resulting weighting is.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_DISTANCE_FLOOR = 1e-8


def gaussian_wasserstein_sq(
    mu1: np.ndarray,
    mu2: np.ndarray,
    s1: np.ndarray | None = None,
    s2: np.ndarray | None = None,
) -> float:
    """Squared 2-Wasserstein distance between diagonal Gaussians.

    ``s1`` / ``s2`` are per-coordinate variances (diagonal covariances);
    None means a point mass. Negative variance entries are rejected.
    """
    mu1 = np.atleast_1d(np.asarray(mu1, dtype=float))
    mu2 = np.atleast_1d(np.asarray(mu2, dtype=float))
    if mu1.shape != mu2.shape:
        raise ValueError(f"mean shape mismatch: {mu1.shape} vs {mu2.shape}")
    d2 = float(np.sum((mu1 - mu2) ** 2))
    if s1 is None and s2 is None:
        return d2
    s1 = np.zeros_like(mu1) if s1 is None else np.atleast_1d(np.asarray(s1, dtype=float))
    s2 = np.zeros_like(mu2) if s2 is None else np.atleast_1d(np.asarray(s2, dtype=float))
    if s1.shape != mu1.shape or s2.shape != mu2.shape:
        raise ValueError("covariance diagonals must match the mean shape")
    if (s1 < 0).any() or (s2 < 0).any():
        raise ValueError("covariance diagonal entries must be nonnegative")
    return d2 + float(np.sum((np.sqrt(s1) - np.sqrt(s2)) ** 2))


@dataclass
class ClientUpdateStats:
    """One client's upload: per-item deltas plus optional gradient variance.

    ``items`` are ascending item indices touched this round; ``deltas``
    holds the matching rows of V_local - V_broadcast. The flattened mean
    statistic lives in a shared coordinate system of dimension
    num_items * dim where untouched items contribute zero blocks.
    ``grad_var`` is the per-coordinate variance of the client's per-epoch
    gradients (raw, unscaled by learning rates).
    """

    client_id: int
    items: np.ndarray
    deltas: np.ndarray
    num_items: int
    grad_var: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.items = np.asarray(self.items, dtype=np.int64)
        self.deltas = np.asarray(self.deltas, dtype=float)
        if self.deltas.ndim != 2 or self.deltas.shape[0] != self.items.size:
            raise ValueError("deltas must be (len(items), dim)")
        if self.items.size > 1 and (np.diff(self.items) <= 0).any():
            raise ValueError("items must be strictly ascending")
        if self.grad_var is not None:
            self.grad_var = np.asarray(self.grad_var, dtype=float)
            if self.grad_var.shape != self.deltas.shape:
                raise ValueError("grad_var must match deltas in shape")
            if (self.grad_var < 0).any():
                raise ValueError("grad_var entries must be nonnegative")

    @property
    def dim(self) -> int:
        return self.deltas.shape[1]

    @property
    def mu(self) -> np.ndarray:
        """Dense flattened delta statistic (num_items * dim,)."""
        out = np.zeros((self.num_items, self.dim))
        out[self.items] = self.deltas
        return out.ravel()

    @property
    def sigma_diag(self) -> np.ndarray | None:
        """Dense flattened gradient-variance diagonal, or None if not tracked."""
        if self.grad_var is None:
            return None
        out = np.zeros((self.num_items, self.dim))
        out[self.items] = self.grad_var
        return out.ravel()

    @classmethod
    def from_dense(
        cls, client_id: int, mu: np.ndarray, dim: int = 1, grad_var: np.ndarray | None = None
    ) -> "ClientUpdateStats":
        """Build stats from an already-flattened statistic (test helper)."""
        mu = np.asarray(mu, dtype=float).ravel()
        if mu.size % dim:
            raise ValueError("flattened statistic length must be a multiple of dim")
        num_items = mu.size // dim
        gv = None if grad_var is None else np.asarray(grad_var, dtype=float).reshape(num_items, dim)
        return cls(
            client_id=client_id,
            items=np.arange(num_items, dtype=np.int64),
            deltas=mu.reshape(num_items, dim),
            num_items=num_items,
            grad_var=gv,
        )


@dataclass
class AggregationWeights:
    """Probability vector over clients: strictly positive, sums to one."""

    client_ids: np.ndarray
    probs: np.ndarray

    def __post_init__(self) -> None:
        self.client_ids = np.asarray(self.client_ids, dtype=np.int64)
        self.probs = np.asarray(self.probs, dtype=float)
        if self.client_ids.shape != self.probs.shape:
            raise ValueError("client_ids and probs must align")
        if self.probs.size == 0:
            raise ValueError("weights over an empty client set")
        if (self.probs <= 0).any():
            raise ValueError("aggregation weights must be strictly positive")
        if abs(self.probs.sum() - 1.0) > 1e-12:
            raise ValueError("aggregation weights must sum to 1")

    def __getitem__(self, client_id: int) -> float:
        pos = np.flatnonzero(self.client_ids == client_id)
        if pos.size != 1:
            raise KeyError(client_id)
        return float(self.probs[pos[0]])

    def as_dict(self) -> dict[int, float]:
        return {int(c): float(p) for c, p in zip(self.client_ids, self.probs)}


def uniform_weights(client_ids) -> AggregationWeights:
    ids = np.asarray(client_ids, dtype=np.int64)
    return AggregationWeights(ids, np.full(ids.size, 1.0 / ids.size))


def weights_from_distances(
    client_ids, sq_distances: np.ndarray, floor: float = DEFAULT_DISTANCE_FLOOR
) -> AggregationWeights:
    """Inverse-distance weights: p_u proportional to 1 / (d_u^2 + floor)."""
    d2 = np.asarray(sq_distances, dtype=float)
    if (d2 < 0).any():
        raise ValueError("squared distances must be nonnegative")
    inv = 1.0 / (d2 + floor)
    return AggregationWeights(np.asarray(client_ids, dtype=np.int64), inv / inv.sum())


def variance_distance_term(
    sigma_u: np.ndarray | None,
    global_sigma: np.ndarray | None,
    global_lr: float,
    local_lr: float,
    local_epochs: int,
    batch_size: int,
) -> float:
    """tr(M^2) for diagonal covariances.

    M = sqrt(global_lr^2 * Sigma_g / B) - sqrt(local_epochs^2 * local_lr^2 * Sigma_u / B),
    evaluated coordinate-wise on the diagonals.
    """
    if sigma_u is None and global_sigma is None:
        return 0.0
    if sigma_u is None or global_sigma is None:
        size = (global_sigma if sigma_u is None else sigma_u).size
        sigma_u = np.zeros(size) if sigma_u is None else np.asarray(sigma_u, dtype=float)
        global_sigma = (
            np.zeros(size) if global_sigma is None else np.asarray(global_sigma, dtype=float)
        )
    else:
        sigma_u = np.asarray(sigma_u, dtype=float)
        global_sigma = np.asarray(global_sigma, dtype=float)
    if (sigma_u < 0).any() or (global_sigma < 0).any():
        raise ValueError("variance diagonals must be nonnegative")
    a = np.sqrt(global_lr**2 * global_sigma / batch_size)
    b = np.sqrt(local_epochs**2 * local_lr**2 * sigma_u / batch_size)
    return float(np.sum((a - b) ** 2))


def optimal_weights_simplified(
    stats: list[ClientUpdateStats],
    global_mu: np.ndarray,
    global_lr: float = 1.0,
    floor: float = DEFAULT_DISTANCE_FLOOR,
) -> AggregationWeights:
    """Large-batch limit weights: p_u proportional to 1 / ||mu_u - global_lr * mu_g||^2.

    The local-step scaling is already realized inside each client's delta
    statistic, so only the global reference carries an explicit rate.
    """
    if not stats:
        raise ValueError("no client updates to weight")
    global_mu = np.asarray(global_mu, dtype=float).ravel()
    d2 = np.array([float(np.sum((s.mu - global_lr * global_mu) ** 2)) for s in stats])
    return weights_from_distances([s.client_id for s in stats], d2, floor)


def optimal_weights_full(
    stats: list[ClientUpdateStats],
    global_mu: np.ndarray,
    global_sigma: np.ndarray | None,
    global_lr: float,
    local_lr: float,
    local_epochs: int,
    batch_size: int,
    floor: float = DEFAULT_DISTANCE_FLOOR,
) -> AggregationWeights:
    """Inverse squared-Wasserstein weights including the covariance term.

    Per client: d_u^2 = ||mu_u - global_lr * mu_g||^2 + tr(M^2) with the
    diagonal covariance term of :func:`variance_distance_term`. Solves the
    simplex-constrained minimum of sum_u p_u^2 d_u^2 in closed form.
    """
    if not stats:
        raise ValueError("no client updates to weight")
    global_mu = np.asarray(global_mu, dtype=float).ravel()
    d2 = np.empty(len(stats))
    for j, s in enumerate(stats):
        mean_term = float(np.sum((s.mu - global_lr * global_mu) ** 2))
        var_term = variance_distance_term(
            s.sigma_diag, global_sigma, global_lr, local_lr, local_epochs, batch_size
        )
        d2[j] = mean_term + var_term
    return weights_from_distances([s.client_id for s in stats], d2, floor)


def chi_square_divergence(w: np.ndarray, p: np.ndarray) -> float:
    """Chi-square divergence sum_i (w_i - p_i)^2 / p_i; zero iff w == p."""
    w = np.asarray(w, dtype=float)
    p = np.asarray(p, dtype=float)
    if w.shape != p.shape:
        raise ValueError("weight vectors must have equal length")
    if (p <= 0).any():
        raise ValueError("reference weights must be strictly positive")
    return float(np.sum((w - p) ** 2 / p))

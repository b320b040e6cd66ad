"""Matrix factorization backbone: predictions, loss, and SGD update rules.

All federation strategies share these primitives. A rating is modeled as
the inner product of a user vector and an item vector; both are trained
by per-pair stochastic gradient steps with L2 shrinkage.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class Hyperparams:
    """Training knobs shared by every federation strategy.

    All randomness in a run derives from ``rng_seed``, so two runs with
    equal hyperparameters and data are bit-identical.

    batch_size=None means one full pass over the local profile per epoch.
    """

    latent_dim: int = 16
    reg_lambda: float = 0.01
    local_lr: float = 0.05
    global_lr: float = 30.0
    local_epochs: int = 1
    batch_size: int | None = None
    rounds: int = 100
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        if self.local_lr <= 0 or self.global_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.reg_lambda < 0:
            raise ValueError("reg_lambda must be nonnegative")
        if self.local_epochs < 1:
            raise ValueError("local_epochs must be >= 1")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be a positive integer or None")
        if self.rounds < 0:
            raise ValueError("rounds must be nonnegative")


@dataclass
class LatentFactors:
    """Dense per-user and per-item factor matrices, row index = entity index."""

    user_vecs: np.ndarray  # (num_users, d)
    item_vecs: np.ndarray  # (num_items, d)

    def __post_init__(self) -> None:
        if self.user_vecs.ndim != 2 or self.item_vecs.ndim != 2:
            raise ValueError("factor matrices must be 2-D")
        if self.user_vecs.shape[1] != self.item_vecs.shape[1]:
            raise ValueError("user and item factors must share one latent dimension")

    @property
    def latent_dim(self) -> int:
        return self.item_vecs.shape[1]

    def check_finite(self) -> None:
        if not (np.isfinite(self.user_vecs).all() and np.isfinite(self.item_vecs).all()):
            raise FloatingPointError("non-finite entries in latent factors")


def init_factors(num_users: int, num_items: int, dim: int, rng: np.random.Generator) -> LatentFactors:
    """Draw factors i.i.d. uniform on [-0.5/sqrt(d), 0.5/sqrt(d)].

    The small magnitude keeps initial predictions near zero so early SGD
    steps stay stable.
    """
    half = 0.5 / np.sqrt(dim)
    user_vecs = rng.uniform(-half, half, size=(num_users, dim))
    item_vecs = rng.uniform(-half, half, size=(num_items, dim))
    return LatentFactors(user_vecs=user_vecs, item_vecs=item_vecs)


def predict(u_vec: np.ndarray, v_vec: np.ndarray) -> float:
    """Predicted rating: inner product of the two factor vectors.

    The prediction is not clamped to the rating range here; clamping is
    applied at metric time only.
    """
    u_vec = np.asarray(u_vec, dtype=float)
    v_vec = np.asarray(v_vec, dtype=float)
    if u_vec.shape != v_vec.shape:
        raise ValueError(f"vector length mismatch: {u_vec.shape} vs {v_vec.shape}")
    return float(u_vec @ v_vec)


def regularized_loss(factors: LatentFactors, triples, reg_lambda: float) -> float:
    """Squared-error loss with per-pair L2 shrinkage.

    For each rated pair (u, i, r) the contribution is

        0.5 * (r - U_u . V_i)^2 + reg_lambda * (||V_i||^2 + ||U_u||^2)

    i.e. the regularizer is counted once per rated pair, matching the
    per-sample gradient steps below.

    ``triples`` is an iterable of (user_index, item_index, rating) or a
    tuple of three parallel arrays.
    """
    if isinstance(triples, tuple) and len(triples) == 3:
        uidx, iidx, r = (np.asarray(a) for a in triples)
    else:
        rows = list(triples)
        if not rows:
            return 0.0
        arr = np.asarray(rows, dtype=float)
        uidx, iidx, r = arr[:, 0].astype(int), arr[:, 1].astype(int), arr[:, 2]
    if uidx.size == 0:
        return 0.0
    if uidx.max(initial=-1) >= factors.user_vecs.shape[0] or iidx.max(initial=-1) >= factors.item_vecs.shape[0]:
        raise ValueError("rating references an entity with no factor vector")
    um = factors.user_vecs[uidx]
    vm = factors.item_vecs[iidx]
    err = r - np.einsum("ij,ij->i", um, vm)
    sq = 0.5 * float(err @ err)
    reg = reg_lambda * float(np.einsum("ij,ij->", um, um) + np.einsum("ij,ij->", vm, vm))
    return sq + reg


def item_gradient(u_vec: np.ndarray, v_vec: np.ndarray, rating: float, reg_lambda: float) -> np.ndarray:
    """Gradient of the per-pair objective w.r.t. the item vector.

    g = reg_lambda * v - e * u  with  e = rating - u . v.
    The item step is then v <- v - local_lr * g.
    """
    u_vec = np.asarray(u_vec, dtype=float)
    v_vec = np.asarray(v_vec, dtype=float)
    if u_vec.shape != v_vec.shape:
        raise ValueError(f"vector length mismatch: {u_vec.shape} vs {v_vec.shape}")
    err = rating - u_vec @ v_vec
    return reg_lambda * v_vec - err * u_vec


def user_gradient(u_vec: np.ndarray, v_vec: np.ndarray, rating: float, reg_lambda: float) -> np.ndarray:
    """Gradient of the per-pair objective w.r.t. the user vector (mirror of item_gradient)."""
    u_vec = np.asarray(u_vec, dtype=float)
    v_vec = np.asarray(v_vec, dtype=float)
    if u_vec.shape != v_vec.shape:
        raise ValueError(f"vector length mismatch: {u_vec.shape} vs {v_vec.shape}")
    err = rating - u_vec @ v_vec
    return reg_lambda * u_vec - err * v_vec


def user_update(u_vec: np.ndarray, v_vec: np.ndarray, rating: float, reg_lambda: float, local_lr: float) -> np.ndarray:
    """One SGD step on the user vector: u <- u - local_lr * (reg_lambda * u - e * v)."""
    return np.asarray(u_vec, dtype=float) - local_lr * user_gradient(u_vec, v_vec, rating, reg_lambda)

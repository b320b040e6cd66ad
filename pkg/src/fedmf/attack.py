"""Honest-but-curious server attack on uploaded item gradients.

With plain federated matrix factorization the support of a user's upload
IS the rated set, and two consecutive rounds of per-item gradients
overdetermine the user's private vector and raw ratings: each residual
vector reg*V_i - g_i equals e_i * U, so all of them are parallel to the
unknown user vector, and the known user-update rule between the rounds
pins the remaining scale. Pseudo items break the first step by diluting
the support with fabricated entries the solver cannot separate.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares

from .core import Hyperparams
from .federation import TrainOutcome

SUPPORT_TOL = 1e-12


@dataclass
class AttackObservation:
    """Server-visible evidence about one client across two consecutive rounds.

    ``items`` is the union of upload supports; rows missing from one round
    are zero-filled with the matching ``seen_*`` flag cleared. ``v_prev``
    and ``v_curr`` are the item vectors the server broadcast before each
    round; ``reg_lambda`` and ``local_lr`` are public training constants.
    """

    client_id: int
    items: np.ndarray
    g_prev: np.ndarray
    g_curr: np.ndarray
    v_prev: np.ndarray
    v_curr: np.ndarray
    reg_lambda: float
    local_lr: float
    round_pair: tuple[int, int]
    seen_prev: np.ndarray = field(default=None)  # type: ignore[assignment]
    seen_curr: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        if self.seen_prev is None:
            self.seen_prev = np.ones(self.items.size, dtype=bool)
        if self.seen_curr is None:
            self.seen_curr = np.ones(self.items.size, dtype=bool)


@dataclass
class AttackResult:
    """Outcome of a rating reconstruction attempt."""

    inferred_rated: set[int]
    reconstructed_ratings: dict[int, float]
    residual: float
    success: bool
    user_vec_estimate: np.ndarray | None = None
    note: str = ""


def observations_from_run(
    outcome: TrainOutcome, hp: Hyperparams, round_pair: tuple[int, int] = (1, 2)
) -> dict[int, AttackObservation]:
    """Rebuild per-client observations from a run recorded with uploads.

    Gradients are recovered from deltas as g = -delta / local_lr, which is
    exact for single-epoch local training (the only regime the rating
    reconstruction below is stated for).
    """
    if outcome.uploads is None:
        raise ValueError("run was not recorded; pass record_uploads=True to run_training")
    if hp.local_epochs != 1:
        raise ValueError("gradient recovery from deltas requires local_epochs == 1")
    t0, t1 = round_pair
    by_round = {rec["round"]: rec for rec in outcome.uploads}
    if t0 not in by_round or t1 not in by_round or t1 != t0 + 1:
        raise ValueError(f"need two consecutive recorded rounds, got {round_pair}")
    prev_rec, curr_rec = by_round[t0], by_round[t1]
    prev_stats = {s.client_id: s for s in prev_rec["stats"]}
    curr_stats = {s.client_id: s for s in curr_rec["stats"]}

    obs: dict[int, AttackObservation] = {}
    for cid in sorted(set(prev_stats) & set(curr_stats)):
        sp, sc = prev_stats[cid], curr_stats[cid]
        items = np.union1d(sp.items, sc.items)
        dim = sp.deltas.shape[1]
        g_prev = np.zeros((items.size, dim))
        g_curr = np.zeros((items.size, dim))
        pos_p = np.searchsorted(items, sp.items)
        pos_c = np.searchsorted(items, sc.items)
        g_prev[pos_p] = -sp.deltas / hp.local_lr
        g_curr[pos_c] = -sc.deltas / hp.local_lr
        seen_prev = np.zeros(items.size, dtype=bool)
        seen_curr = np.zeros(items.size, dtype=bool)
        seen_prev[pos_p] = True
        seen_curr[pos_c] = True
        obs[cid] = AttackObservation(
            client_id=cid,
            items=items,
            g_prev=g_prev,
            g_curr=g_curr,
            v_prev=prev_rec["broadcast"][items],
            v_curr=curr_rec["broadcast"][items],
            reg_lambda=hp.reg_lambda,
            local_lr=hp.local_lr,
            round_pair=round_pair,
            seen_prev=seen_prev,
            seen_curr=seen_curr,
        )
    return obs


def infer_interactions(obs: AttackObservation, tol: float = SUPPORT_TOL) -> set[int]:
    """Items whose uploaded gradient is nonzero in either round."""
    norms_prev = np.linalg.norm(obs.g_prev, axis=1)
    norms_curr = np.linalg.norm(obs.g_curr, axis=1)
    hit = (norms_prev > tol) | (norms_curr > tol)
    return {int(i) for i in obs.items[hit]}


def _attack_residuals(
    x: np.ndarray,
    v_prev: np.ndarray,
    v_curr: np.ndarray,
    g_prev: np.ndarray,
    g_curr: np.ndarray,
    reg: float,
    lr: float,
) -> np.ndarray:
    """Forward-model both rounds from (user vector, ratings) candidates."""
    d = v_prev.shape[1]
    u_a = x[:d]
    r = x[d:]
    e_prev = r - v_prev @ u_a
    res1 = reg * v_prev - e_prev[:, None] * u_a[None, :] - g_prev
    e0 = r - v_curr @ u_a
    u_b = u_a - lr * (reg * u_a - (e0[:, None] * v_curr).mean(axis=0))
    e_curr = r - v_curr @ u_b
    res2 = reg * v_curr - e_curr[:, None] * u_b[None, :] - g_curr
    return np.concatenate([res1.ravel(), res2.ravel()])


def reconstruct_ratings(
    obs: AttackObservation,
    max_restarts: int = 8,
    max_iters: int = 500,
    residual_tol: float = 1e-3,
    seed: int = 0,
) -> AttackResult:
    """Solve for the private user vector and raw ratings behind an upload.

    Works on the items present in both rounds (for a plain client that is
    exactly the rated set). The solve is damped Gauss-Newton least squares
    over (user vector, ratings); the first two starts exploit the rank-one
    structure of reg*V - g (its top right-singular vector is the user
    direction up to sign), the rest are random. Reconstructed ratings are
    reported only when the worst equation residual beats ``residual_tol``.
    """
    both = obs.seen_prev & obs.seen_curr
    items = obs.items[both]
    if items.size < 2:
        raise ValueError("ambiguous observation: need at least 2 items seen in both rounds")
    v_prev = obs.v_prev[both]
    v_curr = obs.v_curr[both]
    g_prev = obs.g_prev[both]
    g_curr = obs.g_curr[both]
    reg, lr = obs.reg_lambda, obs.local_lr
    d = v_prev.shape[1]
    k = items.size

    note = ""
    starts: list[np.ndarray] = []
    w = reg * v_prev - g_prev  # equals e_i * U for an honest single-profile client
    if np.abs(w).max() < 1e-10:
        note = "degenerate scale: residual vectors vanish (zero prediction error)"
        starts.append(np.concatenate([np.zeros(d), np.full(k, 3.0)]))
    else:
        _, svals, vt = np.linalg.svd(w, full_matrices=False)
        direction = vt[0]
        scale = np.sqrt(svals[0])
        for sign in (1.0, -1.0):
            u0 = sign * scale * direction
            e0 = w @ u0 / float(u0 @ u0)
            starts.append(np.concatenate([u0, e0 + v_prev @ u0]))
    rng = np.random.default_rng(seed)
    while len(starts) < max_restarts:
        u0 = rng.normal(0.0, 0.5, size=d)
        r0 = rng.uniform(1.0, 5.0, size=k)
        starts.append(np.concatenate([u0, r0]))

    best_x = None
    best_res = np.inf
    for x0 in starts:
        sol = least_squares(
            _attack_residuals,
            x0,
            args=(v_prev, v_curr, g_prev, g_curr, reg, lr),
            method="lm",
            max_nfev=max_iters,
        )
        res = float(np.abs(sol.fun).max())
        if res < best_res:
            best_res = res
            best_x = sol.x
        if best_res < 1e-10:
            break

    success = best_res < residual_tol
    ratings = {}
    if success and best_x is not None:
        ratings = {int(i): float(r) for i, r in zip(items, best_x[d:])}
    return AttackResult(
        inferred_rated=infer_interactions(obs),
        reconstructed_ratings=ratings,
        residual=best_res,
        success=success,
        user_vec_estimate=None if best_x is None else best_x[:d].copy(),
        note=note,
    )


def interaction_scores(inferred: set[int], rated: np.ndarray) -> tuple[float, float]:
    """(precision, recall) of an inferred rated set against the truth."""
    truth = {int(i) for i in rated}
    if not inferred:
        return (1.0 if not truth else 0.0), (1.0 if not truth else 0.0)
    hits = len(inferred & truth)
    return hits / len(inferred), (hits / len(truth) if truth else 1.0)

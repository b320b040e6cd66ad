"""Round-based federated training of the factorization model.

Item vectors live on the server; each user's vector never leaves its
client. Every round all clients (optionally) fill their profile with
pseudo items, run local SGD epochs, and upload only per-item deltas plus
optional update statistics. The server combines deltas with aggregation
weights and broadcasts the new item matrix.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import aggregation as agg
from .core import Hyperparams, LatentFactors, init_factors, regularized_loss
from .data import FoldView, MetricsReport, metrics
from .pseudo import (
    FilledProfile,
    PseudoConfig,
    UserProfile,
    normalized_features,
    select_pseudo_random,
    select_pseudo_similarity,
)

STRATEGIES = ("vanilla", "fedrec", "fedrecplus")
AGGREGATION_MODES = ("uniform", "wasserstein_simplified", "wasserstein_full")


class RoundAbortError(RuntimeError):
    """A round produced a non-finite update and was stopped."""


@dataclass
class ClientState:
    """Local view of one user: private vector, private ratings, own RNG stream."""

    client_id: int
    user_vec: np.ndarray
    items: np.ndarray
    ratings: np.ndarray
    pseudo_cfg: PseudoConfig | None
    rng: np.random.Generator


@dataclass
class ServerState:
    """Authoritative item matrix plus aggregation policy."""

    item_vecs: np.ndarray
    round: int = 0
    aggregation_mode: str = "wasserstein_simplified"
    distance_floor: float = agg.DEFAULT_DISTANCE_FLOOR
    last_weights: agg.AggregationWeights | None = None

    def __post_init__(self) -> None:
        if self.aggregation_mode not in AGGREGATION_MODES:
            raise ValueError(f"unknown aggregation mode {self.aggregation_mode!r}")


def fill_profile(
    client: ClientState, item_vecs: np.ndarray, features: np.ndarray | None
) -> FilledProfile:
    """Apply the client's pseudo-item strategy to its rated profile."""
    profile = UserProfile(client.client_id, client.items, client.ratings)
    cfg = client.pseudo_cfg
    if cfg is None or cfg.ratio_q == 0:
        return FilledProfile(
            client.client_id,
            client.items.copy(),
            client.ratings.copy(),
            np.empty(0, dtype=np.int64),
            np.empty(0, dtype=float),
        )
    if cfg.strategy == "similarity":
        return select_pseudo_similarity(profile, item_vecs, cfg, features)
    return select_pseudo_random(profile, item_vecs.shape[0], cfg, client.rng)


def client_round(
    client: ClientState,
    item_vecs: np.ndarray,
    hp: Hyperparams,
    features: np.ndarray | None = None,
) -> tuple[agg.ClientUpdateStats, np.ndarray]:
    """Run one round of local training and package the upload.

    Per epoch the user vector takes one step with the gradient averaged
    over the filled profile, then every touched item takes one step in
    mini-batches. Returns the upload (item deltas, optional per-coordinate
    gradient variance) and the client's new private vector; only the
    former is sent to the server.
    """
    filled = fill_profile(client, item_vecs, features)
    touched = filled.all_items()
    if touched.size == 0:
        empty = agg.ClientUpdateStats(
            client_id=client.client_id,
            items=np.empty(0, dtype=np.int64),
            deltas=np.empty((0, item_vecs.shape[1])),
            num_items=item_vecs.shape[0],
        )
        return empty, client.user_vec.copy()

    order = np.argsort(touched)
    items = touched[order]
    targets = filled.all_ratings()[order]
    v_start = item_vecs[items]
    v_loc = v_start.copy()
    u = client.user_vec.copy()
    n = items.size
    lr = hp.local_lr
    reg = hp.reg_lambda

    epoch_grads = [] if hp.local_epochs >= 2 else None
    for _ in range(hp.local_epochs):
        err = targets - v_loc @ u
        u = u - lr * (reg * u - (err[:, None] * v_loc).mean(axis=0))

        if hp.batch_size is None or hp.batch_size >= n:
            batches = [np.arange(n)]
        else:
            perm = client.rng.permutation(n)
            batches = np.array_split(perm, int(np.ceil(n / hp.batch_size)))
        grad_epoch = np.empty_like(v_loc) if epoch_grads is not None else None
        for batch in batches:
            e_b = targets[batch] - v_loc[batch] @ u
            g_b = reg * v_loc[batch] - e_b[:, None] * u[None, :]
            v_loc[batch] -= lr * g_b
            if grad_epoch is not None:
                grad_epoch[batch] = g_b
        if epoch_grads is not None:
            epoch_grads.append(grad_epoch)

    grad_var = None
    if epoch_grads is not None:
        grad_var = np.var(np.stack(epoch_grads), axis=0)
    stats = agg.ClientUpdateStats(
        client_id=client.client_id,
        items=items,
        deltas=v_loc - v_start,
        num_items=item_vecs.shape[0],
        grad_var=grad_var,
    )
    return stats, u


def _simplified_distances(
    updates: list[agg.ClientUpdateStats], item_vecs_shape: tuple[int, int], global_lr: float
) -> np.ndarray:
    """Sparse evaluation of ||delta_u - global_lr * mean_delta||^2 per client."""
    mean_delta = np.zeros(item_vecs_shape)
    for s in updates:
        mean_delta[s.items] += s.deltas
    mean_delta /= len(updates)
    ref = global_lr * mean_delta
    ref_total = float(np.sum(ref**2))
    d2 = np.empty(len(updates))
    for j, s in enumerate(updates):
        rows = ref[s.items]
        d2[j] = ref_total - float(np.sum(rows**2)) + float(np.sum((s.deltas - rows) ** 2))
    return np.maximum(d2, 0.0)


def round_weights(
    updates: list[agg.ClientUpdateStats],
    server: ServerState,
    hp: Hyperparams,
) -> agg.AggregationWeights:
    """Aggregation weights for this round's uploads under the server's mode."""
    ids = [s.client_id for s in updates]
    if server.aggregation_mode == "uniform":
        return agg.uniform_weights(ids)
    if server.aggregation_mode == "wasserstein_simplified":
        d2 = _simplified_distances(updates, server.item_vecs.shape, hp.global_lr)
        return agg.weights_from_distances(ids, d2, server.distance_floor)
    # Full mode: dense statistics, global reference = uniform client mean.
    mu_g = np.zeros(server.item_vecs.shape)
    for s in updates:
        mu_g[s.items] += s.deltas
    mu_g = (mu_g / len(updates)).ravel()
    sigmas = [s.sigma_diag for s in updates]
    sigma_g = None
    if any(sg is not None for sg in sigmas):
        sigma_g = np.zeros(mu_g.size)
        for sg in sigmas:
            if sg is not None:
                sigma_g += sg
        sigma_g /= len(updates)
    return agg.optimal_weights_full(
        updates,
        mu_g,
        sigma_g,
        global_lr=hp.global_lr,
        local_lr=hp.local_lr,
        local_epochs=hp.local_epochs,
        batch_size=hp.batch_size if hp.batch_size is not None else 1,
        floor=server.distance_floor,
    )


def server_round(
    server: ServerState, updates: list[agg.ClientUpdateStats], hp: Hyperparams
) -> ServerState:
    """Weight, combine, and apply this round's client deltas.

    V_i <- V_i + global_lr * sum_u p_u * delta_ui, reduced in ascending
    client-id order so results do not depend on upload arrival order.
    """
    if not updates:
        raise ValueError("server_round needs at least one client update")
    for s in updates:
        if not np.isfinite(s.deltas).all():
            raise RoundAbortError(
                f"non-finite delta from client {s.client_id} in round {server.round}"
            )
    weights = round_weights(updates, server, hp)
    acc = np.zeros_like(server.item_vecs)
    by_id = sorted(updates, key=lambda s: s.client_id)
    for s in by_id:
        acc[s.items] += weights[s.client_id] * s.deltas
    server.item_vecs = server.item_vecs + hp.global_lr * acc
    if not np.isfinite(server.item_vecs).all():
        raise RoundAbortError(f"non-finite item vectors after round {server.round}")
    server.round += 1
    server.last_weights = weights
    return server


def resolve_pseudo_config(strategy: str, pseudo_cfg: PseudoConfig | None) -> PseudoConfig | None:
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    if strategy == "vanilla":
        return None
    if pseudo_cfg is not None:
        return pseudo_cfg
    if strategy == "fedrec":
        return PseudoConfig(strategy="random")
    return PseudoConfig(strategy="similarity")


def build_clients(
    train: FoldView, hp: Hyperparams, pseudo_cfg: PseudoConfig | None
) -> tuple[list[ClientState], LatentFactors]:
    """Materialize per-user clients and seeded initial factors.

    Every user in the fold's index space gets a client (users with no
    training ratings simply never participate), and every client gets its
    own child RNG stream so execution order cannot change results.
    """
    root = np.random.SeedSequence(hp.rng_seed)
    init_seq, client_root = root.spawn(2)
    factors = init_factors(
        train.num_users, train.num_items, hp.latent_dim, np.random.default_rng(init_seq)
    )
    order = np.argsort(train.uidx, kind="stable")
    uidx_sorted = train.uidx[order]
    iidx_sorted = train.iidx[order]
    r_sorted = train.ratings[order]
    bounds = np.searchsorted(uidx_sorted, np.arange(train.num_users + 1))
    streams = client_root.spawn(train.num_users)
    clients = []
    for u in range(train.num_users):
        lo, hi = bounds[u], bounds[u + 1]
        item_order = np.argsort(iidx_sorted[lo:hi])
        clients.append(
            ClientState(
                client_id=u,
                user_vec=factors.user_vecs[u].copy(),
                items=iidx_sorted[lo:hi][item_order].astype(np.int64),
                ratings=r_sorted[lo:hi][item_order].astype(float),
                pseudo_cfg=pseudo_cfg,
                rng=np.random.default_rng(streams[u]),
            )
        )
    return clients, factors


@dataclass
class TrainOutcome:
    """Everything a run produced: metric series, loss curve, final model."""

    reports: list[MetricsReport]
    train_loss: list[float]
    factors: LatentFactors
    chi_square_log: list[float]
    weight_log: list[dict[int, float]] | None = None
    uploads: list[dict] | None = None
    strategy: str = ""
    fold_id: int = 0


def run_training(
    train: FoldView,
    test: FoldView,
    hp: Hyperparams,
    strategy: str = "fedrecplus",
    pseudo_cfg: PseudoConfig | None = None,
    aggregation_mode: str = "wasserstein_simplified",
    distance_floor: float = agg.DEFAULT_DISTANCE_FLOOR,
    eval_interval: int = 10,
    fold_id: int = 0,
    record_uploads: bool = False,
    log_weights: bool = False,
) -> TrainOutcome:
    """Train for ``hp.rounds`` rounds and evaluate every ``eval_interval``.

    The test fold is scored with each user's current private vector and
    the server's item matrix; per-round training loss is tracked for
    convergence diagnostics.
    """
    cfg = resolve_pseudo_config(strategy, pseudo_cfg)
    clients, factors = build_clients(train, hp, cfg)
    server = ServerState(
        item_vecs=factors.item_vecs,
        aggregation_mode=aggregation_mode,
        distance_floor=distance_floor,
    )
    user_mat = factors.user_vecs
    active = [c for c in clients if c.items.size > 0]
    needs_features = cfg is not None and cfg.strategy == "similarity" and cfg.ratio_q > 0

    reports: list[MetricsReport] = []
    train_loss: list[float] = []
    chi_log: list[float] = []
    weight_log: list[dict[int, float]] | None = [] if log_weights else None
    uploads: list[dict] | None = [] if record_uploads else None

    def evaluate(round_no: int) -> None:
        preds = np.einsum("ij,ij->i", user_mat[test.uidx], server.item_vecs[test.iidx])
        reports.append(
            metrics(preds, test.ratings, fold_id=fold_id, round_no=round_no, algo=strategy)
        )

    if hp.rounds == 0:
        evaluate(0)

    for t in range(1, hp.rounds + 1):
        features = None
        if needs_features:
            features = normalized_features(server.item_vecs, cfg.encoder)
        if uploads is not None:
            round_record = {"round": t, "broadcast": server.item_vecs.copy(), "stats": []}
        updates = []
        for client in active:
            stats, new_u = client_round(client, server.item_vecs, hp, features)
            client.user_vec = new_u
            user_mat[client.client_id] = new_u
            updates.append(stats)
            if uploads is not None:
                round_record["stats"].append(stats)
        server_round(server, updates, hp)
        if uploads is not None:
            uploads.append(round_record)
        if server.last_weights is not None:
            probs = server.last_weights.probs
            chi_log.append(agg.chi_square_divergence(np.full(probs.size, 1.0 / probs.size), probs))
            if weight_log is not None:
                weight_log.append(server.last_weights.as_dict())
        snapshot = LatentFactors(user_vecs=user_mat, item_vecs=server.item_vecs)
        train_loss.append(regularized_loss(snapshot, train.triples(), hp.reg_lambda))
        if t % eval_interval == 0 or t == hp.rounds:
            evaluate(t)

    final = LatentFactors(user_vecs=user_mat.copy(), item_vecs=server.item_vecs.copy())
    final.check_finite()
    return TrainOutcome(
        reports=reports,
        train_loss=train_loss,
        factors=final,
        chi_square_log=chi_log,
        weight_log=weight_log,
        uploads=uploads,
        strategy=strategy,
        fold_id=fold_id,
    )


def train(
    train_fold: FoldView,
    test_fold: FoldView,
    hp: Hyperparams,
    strategy: str = "fedrecplus",
    **kwargs,
) -> list[MetricsReport]:
    """Convenience wrapper returning only the metric time series."""
    return run_training(train_fold, test_fold, hp, strategy, **kwargs).reports

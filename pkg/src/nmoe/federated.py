"""Three-stage federated training for the networked mixture of experts.

Stage 1 learns the shared feature extractor, either supervised with local
cross-entropy heads (FedCE) or self-supervised with spectral contrastive
losses over differentially private correlation shares (FedSC). Stage 2
trains one personalized expert per client on frozen features with no
communication. Stage 3 produces the shared gate: sampled (RanGate), ring
trained on pseudo-labels (RollGate), or federated-averaged with a
load-balance penalty (FedGate).

Randomness discipline: every stream derives from (seed, component, round,
client). Local-training streams use client slot 0 for every client, so
clients holding identical shards follow identical trajectories and a
single-client federation reproduces its centralized counterpart bit for
bit (the centralized_* functions share the epoch helpers and the same
derivations). Correlation noise and pseudo-label assignment keep
per-client streams.

Communication accounting (4-byte wire scalars by default): FedCE moves
the extractor down and up for every client each round; FedSC adds one
correlation matrix up and one aggregate down per client each round;
stage 2 moves nothing; RollGate moves the gate once per ring hop; FedGate
ships every expert to the training host once, then moves the gate down
and up for each participant each round.
"""

from __future__ import annotations

import hashlib
import math
import time
from dataclasses import dataclass

import numpy as np

from . import kernels, seeding
from .datasets import AugmentSpec, Dataset, Shard, apportion, augment
from .errors import ConfigError, DataError, InternalError, TrainingError
from .moe import GateParams, RandomGate, gate_topk, load_balance_loss
from .numerics import (MlpSpec, ParamSet, add_params, backward,
                       check_compatible, cross_entropy, forward,
                       grad_normalize, init_mlp_params, params_digest,
                       sgd_step, softmax_backward)
from .seeding import derive_rng

ROLLGATE_LOSS_TOL = 1e-4
DEFAULT_BYTES_PER_SCALAR = 4


@dataclass(frozen=True)
class FedRoundReport:
    """One synchronization round as it lands in the training log.

    wall_clock is informational only and never serialized, so artifacts
    stay byte-identical across reruns.
    """

    stage: str
    round_index: int
    participants: tuple[int, ...]
    client_losses: dict[int, float]
    params_digest: str
    bytes_sent: int
    wall_clock: float


@dataclass(frozen=True)
class CorrelationShare:
    """A client's latent correlation matrix after noising, with its
    dataset-fraction weight."""

    client_id: int
    matrix: np.ndarray
    sample_weight: float


@dataclass(frozen=True)
class Stage1Result:
    fe_params: ParamSet
    heads: tuple[ParamSet, ...] | None
    reports: tuple[FedRoundReport, ...]


@dataclass(frozen=True)
class Stage2Result:
    experts: tuple[ParamSet, ...]
    reports: tuple[FedRoundReport, ...]


@dataclass(frozen=True)
class Stage3Result:
    """setup_bytes (expert shipping for FedGate) is already included in
    the first report, so total traffic is the plain sum over reports."""

    gate: GateParams | RandomGate
    reports: tuple[FedRoundReport, ...]
    setup_bytes: int = 0


def classifier_round_bytes(num_clients: int, fe_size: int,
                           bytes_per_scalar: int) -> int:
    return 2 * num_clients * fe_size * bytes_per_scalar


def spectral_round_bytes(num_clients: int, fe_size: int, latent_dim: int,
                         bytes_per_scalar: int) -> int:
    share = 2 * num_clients * latent_dim * latent_dim * bytes_per_scalar
    return classifier_round_bytes(num_clients, fe_size, bytes_per_scalar) \
        + share


def rollgate_pass_bytes(num_clients: int, gate_size: int,
                        bytes_per_scalar: int) -> int:
    return num_clients * gate_size * bytes_per_scalar


def fedgate_setup_bytes(num_experts: int, expert_size: int,
                        bytes_per_scalar: int) -> int:
    return num_experts * expert_size * bytes_per_scalar


def fedgate_round_bytes(num_participants: int, gate_size: int,
                        bytes_per_scalar: int) -> int:
    return 2 * num_participants * gate_size * bytes_per_scalar


def fedavg(param_sets, weights) -> ParamSet:
    """Elementwise weighted average with normalized weights.

    Accumulation runs in list order so results are reproducible; a single
    set is returned bit-identically (its weight normalizes to exactly
    1.0).
    """
    sets = list(param_sets)
    if not sets:
        raise ConfigError("fedavg requires at least one parameter set")
    w = np.asarray(list(weights), dtype=np.float64)
    if w.shape != (len(sets),):
        raise ConfigError(
            f"got {len(sets)} parameter sets but {w.size} weights")
    if (w < 0.0).any() or not w.sum() > 0.0:
        raise ConfigError("weights must be nonnegative with positive sum")
    for other in sets[1:]:
        check_compatible(sets[0], other)
    norm = w / w.sum()
    acc = {name: norm[0] * arr for name, arr in sets[0].items()}
    for i, ps in enumerate(sets[1:], start=1):
        for name, arr in ps.items():
            acc[name] = acc[name] + norm[i] * arr
    return ParamSet(acc)


def _check_clients(clients) -> None:
    if not clients:
        raise ConfigError("at least one client is required")
    ids = [s.client_id for s in clients]
    if len(set(ids)) != len(ids):
        raise ConfigError(f"duplicate client ids: {sorted(ids)}")
    for s in clients:
        if s.train.num_samples == 0:
            raise DataError(f"client {s.client_id} has an empty train shard")


def _check_schedule(rounds: int, epochs: int, lr: float,
                    batch_size: int) -> None:
    if rounds < 1 or epochs < 1:
        raise ConfigError(
            f"rounds and epochs must be >= 1, got {rounds} and {epochs}")
    if not lr > 0.0:
        raise ConfigError(f"lr must be positive, got {lr}")
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")


def _check_finite(loss: float, stage: str, client: int, round_index: int):
    if not math.isfinite(loss):
        raise TrainingError(
            f"client {client} loss became non-finite in {stage} "
            f"round {round_index}")


def _digest_group(param_sets) -> str:
    h = hashlib.sha256()
    for ps in param_sets:
        h.update(params_digest(ps).encode())
    return h.hexdigest()


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def _sgd_classifier_epoch(fe_spec: MlpSpec, fe: ParamSet,
                          head_spec: MlpSpec, head: ParamSet,
                          features: np.ndarray, labels: np.ndarray,
                          lr: float, batch_size: int,
                          rng: np.random.Generator):
    """One joint cross-entropy epoch over extractor and head."""
    n = features.shape[0]
    total = 0.0
    for rows in _batches(n, batch_size, rng):
        latents, fe_tape = forward(fe_spec, fe, features[rows],
                                   want_tape=True)
        logits, head_tape = forward(head_spec, head, latents,
                                    want_tape=True)
        loss, dlogits = cross_entropy(logits, labels[rows])
        head_grads, dlatents = backward(head_tape, dlogits)
        fe_grads, _ = backward(fe_tape, dlatents)
        fe = sgd_step(fe, fe_grads, lr)
        head = sgd_step(head, head_grads, lr)
        total += loss * rows.size
    return fe, head, total / n


def _sgd_head_epoch(head_spec: MlpSpec, head: ParamSet,
                    latents: np.ndarray, labels: np.ndarray, lr: float,
                    batch_size: int, rng: np.random.Generator):
    """One cross-entropy epoch over the head only, on fixed latents."""
    n = latents.shape[0]
    total = 0.0
    for rows in _batches(n, batch_size, rng):
        logits, tape = forward(head_spec, head, latents[rows],
                               want_tape=True)
        loss, dlogits = cross_entropy(logits, labels[rows])
        grads, _ = backward(tape, dlogits)
        head = sgd_step(head, grads, lr)
        total += loss * rows.size
    return head, total / n


def spectral_contrastive_local_loss(z1: np.ndarray, z2: np.ndarray,
                                    rbar: np.ndarray, q: float):
    """Spectral contrastive loss of one client's minibatch views.

    With cross-view estimate Rp = mean of z1 z2^T and pooled second
    moment R = mean of z z^T over both views, the loss is
    -Tr(Rp) + (q/2) ||R||_F^2 + (1-q) Tr(R rbar), where rbar is the
    held-fixed aggregate of the other clients' shares and q the client's
    dataset fraction. Returns the loss and its gradients for both views;
    rbar is treated as a constant.
    """
    z1 = np.ascontiguousarray(z1, dtype=np.float64)
    z2 = np.ascontiguousarray(z2, dtype=np.float64)
    if z1.ndim != 2 or z1.shape != z2.shape:
        raise ConfigError(
            f"views must share one 2-d shape, got {z1.shape} and {z2.shape}")
    d = z1.shape[1]
    rbar = np.asarray(rbar, dtype=np.float64)
    if rbar.shape != (d, d):
        raise ConfigError(
            f"aggregate matrix must be {d}x{d}, got {rbar.shape}")
    if not 0.0 < q <= 1.0:
        raise ConfigError(f"sample weight must lie in (0, 1], got {q}")
    b = z1.shape[0]
    rp_trace = float(np.sum(z1 * z2)) / b
    rhat = (z1.T @ z1 + z2.T @ z2) / (2.0 * b)
    quad = float(np.sum(rhat * rhat))
    cross = float(np.sum(rhat * rbar.T))
    loss = -rp_trace + 0.5 * q * quad + (1.0 - q) * cross
    # rhat enters both trailing terms; symmetrized right-factors give the
    # exact derivative of the expression as computed
    coupling = q * (rhat + rhat.T) + (1.0 - q) * (rbar + rbar.T)
    dz1 = (-z2 + 0.5 * (z1 @ coupling)) / b
    dz2 = (-z1 + 0.5 * (z2 @ coupling)) / b
    return loss, dz1, dz2


def compute_correlation_share(fe_spec: MlpSpec, fe: ParamSet, shard: Shard,
                              aug_spec: AugmentSpec, dp_noise_std: float,
                              q: float,
                              rng: np.random.Generator) -> CorrelationShare:
    """Full-shard latent correlation under the current extractor.

    Uses the first of the two augmented views, symmetrizes the Gram
    estimate, then adds elementwise Gaussian noise when dp_noise_std > 0.
    """
    view, _ = augment(aug_spec, shard.train.features, rng)
    z = forward(fe_spec, fe, view)
    r = z.T @ z / z.shape[0]
    if np.abs(r - r.T).max() > 1e-9:
        raise InternalError("correlation estimate lost symmetry")
    r = 0.5 * (r + r.T)
    if dp_noise_std > 0.0:
        r = r + rng.normal(0.0, dp_noise_std, size=r.shape)
    return CorrelationShare(client_id=shard.client_id, matrix=r,
                            sample_weight=q)


def _sgd_spectral_epoch(fe_spec: MlpSpec, fe: ParamSet,
                        features: np.ndarray, aug_spec: AugmentSpec,
                        rbar: np.ndarray, q: float, lr: float,
                        batch_size: int, rng: np.random.Generator):
    n = features.shape[0]
    total = 0.0
    for rows in _batches(n, batch_size, rng):
        v1, v2 = augment(aug_spec, features[rows], rng)
        z1, tape1 = forward(fe_spec, fe, v1, want_tape=True)
        z2, tape2 = forward(fe_spec, fe, v2, want_tape=True)
        loss, dz1, dz2 = spectral_contrastive_local_loss(z1, z2, rbar, q)
        g1, _ = backward(tape1, dz1)
        g2, _ = backward(tape2, dz2)
        fe = sgd_step(fe, add_params(g1, g2), lr)
        total += loss * rows.size
    return fe, total / n


def stage1_fedce(clients, fe_spec: MlpSpec, head_spec: MlpSpec, rounds: int,
                 local_epochs: int, lr: float, seed: int, *,
                 batch_size: int = 64,
                 bytes_per_scalar: int = DEFAULT_BYTES_PER_SCALAR
                 ) -> Stage1Result:
    """Federated supervised pretraining of the shared extractor.

    Every round each client minimizes local cross-entropy through its own
    head for the given epochs; extractors are then averaged with weights
    proportional to shard sizes. Heads never leave their clients and are
    returned for warm-starting the experts.
    """
    _check_clients(clients)
    _check_schedule(rounds, local_epochs, lr, batch_size)
    if head_spec.in_width != fe_spec.out_width:
        raise ConfigError(
            f"head input width {head_spec.in_width} does not match the "
            f"extractor output {fe_spec.out_width}")
    m = len(clients)
    sizes = [float(s.train.num_samples) for s in clients]
    fe = init_mlp_params(
        fe_spec, derive_rng(seed, seeding.INIT, seeding.INIT_EXTRACTOR, 0))
    head0 = init_mlp_params(
        head_spec, derive_rng(seed, seeding.INIT, seeding.INIT_EXPERT, 0))
    heads = [head0] * m
    reports = []
    for r in range(rounds):
        t0 = time.perf_counter()
        locals_fe = []
        losses: dict[int, float] = {}
        for c, shard in enumerate(clients):
            rng = derive_rng(seed, seeding.STAGE1, r, 0)
            fe_c, head_c = fe, heads[c]
            epoch_losses = []
            for _ in range(local_epochs):
                fe_c, head_c, loss = _sgd_classifier_epoch(
                    fe_spec, fe_c, head_spec, head_c,
                    shard.train.features, shard.train.labels, lr,
                    batch_size, rng)
                _check_finite(loss, "stage1_fedce", shard.client_id, r)
                epoch_losses.append(loss)
            locals_fe.append(fe_c)
            heads[c] = head_c
            losses[shard.client_id] = float(np.mean(epoch_losses))
        fe = fedavg(locals_fe, sizes)
        reports.append(FedRoundReport(
            stage="stage1_fedce", round_index=r,
            participants=tuple(s.client_id for s in clients),
            client_losses=losses, params_digest=params_digest(fe),
            bytes_sent=classifier_round_bytes(m, fe.size(),
                                              bytes_per_scalar),
            wall_clock=time.perf_counter() - t0))
    return Stage1Result(fe_params=fe, heads=tuple(heads),
                        reports=tuple(reports))


def stage1_fedsc(clients, fe_spec: MlpSpec, rounds: int, local_epochs: int,
                 lr: float, aug_spec: AugmentSpec, dp_noise_std: float,
                 seed: int, *, batch_size: int = 64,
                 bytes_per_scalar: int = DEFAULT_BYTES_PER_SCALAR
                 ) -> Stage1Result:
    """Federated self-supervised pretraining of the shared extractor.

    Every round: each client shares its noised full-shard correlation
    matrix; the server hands each client the weighted aggregate of
    everyone else's shares; clients run spectral-contrastive epochs on
    augmented view pairs; extractors are averaged by shard size. A lone
    client sees a zero aggregate, which reduces the loss to its
    single-client form.
    """
    _check_clients(clients)
    _check_schedule(rounds, local_epochs, lr, batch_size)
    if dp_noise_std < 0.0:
        raise ConfigError(f"dp_noise_std must be >= 0, got {dp_noise_std}")
    m = len(clients)
    sizes = np.array([s.train.num_samples for s in clients],
                     dtype=np.float64)
    q = sizes / sizes.sum()
    if m > 1 and (q >= 1.0).any():
        raise InternalError("a client weight reached 1 with several "
                            "clients; weights must be normalized")
    d = fe_spec.out_width
    fe = init_mlp_params(
        fe_spec, derive_rng(seed, seeding.INIT, seeding.INIT_EXTRACTOR, 0))
    reports = []
    for r in range(rounds):
        t0 = time.perf_counter()
        shares = [
            compute_correlation_share(
                fe_spec, fe, shard, aug_spec, dp_noise_std, float(q[c]),
                derive_rng(seed, seeding.CORRELATION, r, shard.client_id))
            for c, shard in enumerate(clients)
        ]
        locals_fe = []
        losses: dict[int, float] = {}
        for c, shard in enumerate(clients):
            if m == 1:
                rbar = np.zeros((d, d))
            else:
                acc = np.zeros((d, d))
                for i, share in enumerate(shares):
                    if i != c:
                        acc = acc + float(q[i]) * share.matrix
                rbar = acc / (1.0 - float(q[c]))
            rng = derive_rng(seed, seeding.STAGE1, r, 0)
            fe_c = fe
            epoch_losses = []
            for _ in range(local_epochs):
                fe_c, loss = _sgd_spectral_epoch(
                    fe_spec, fe_c, shard.train.features, aug_spec, rbar,
                    float(q[c]), lr, batch_size, rng)
                _check_finite(loss, "stage1_fedsc", shard.client_id, r)
                epoch_losses.append(loss)
            locals_fe.append(fe_c)
            losses[shard.client_id] = float(np.mean(epoch_losses))
        fe = fedavg(locals_fe, sizes)
        reports.append(FedRoundReport(
            stage="stage1_fedsc", round_index=r,
            participants=tuple(s.client_id for s in clients),
            client_losses=losses, params_digest=params_digest(fe),
            bytes_sent=spectral_round_bytes(m, fe.size(), d,
                                            bytes_per_scalar),
            wall_clock=time.perf_counter() - t0))
    return Stage1Result(fe_params=fe, heads=None, reports=tuple(reports))


def stage2_experts(clients, fe_spec: MlpSpec, fe_params: ParamSet,
                   expert_spec: MlpSpec, epochs: int, lr: float, seed: int,
                   *, batch_size: int = 64,
                   init_experts=None) -> Stage2Result:
    """Per-client expert training on frozen extractor features.

    Pass init_experts (for example stage-1 heads) to warm-start;
    otherwise experts initialize fresh. No bytes move in this stage.
    """
    _check_clients(clients)
    _check_schedule(1, epochs, lr, batch_size)
    if expert_spec.in_width != fe_spec.out_width:
        raise ConfigError(
            f"expert input width {expert_spec.in_width} does not match "
            f"the extractor output {fe_spec.out_width}")
    m = len(clients)
    fe_before = params_digest(fe_params)
    if init_experts is None:
        rng = derive_rng(seed, seeding.INIT, seeding.INIT_EXPERT, 0)
        experts = [init_mlp_params(expert_spec, rng) for _ in range(m)]
    else:
        experts = list(init_experts)
        if len(experts) != m:
            raise ConfigError(
                f"got {len(experts)} warm-start experts for {m} clients")
        template = init_mlp_params(expert_spec, np.random.default_rng(0))
        for ps in experts:
            check_compatible(template, ps)
    latents = [forward(fe_spec, fe_params, s.train.features)
               for s in clients]
    rngs = [derive_rng(seed, seeding.STAGE2, 0, 0) for _ in clients]
    reports = []
    for epoch in range(epochs):
        t0 = time.perf_counter()
        losses: dict[int, float] = {}
        for c, shard in enumerate(clients):
            experts[c], loss = _sgd_head_epoch(
                expert_spec, experts[c], latents[c], shard.train.labels,
                lr, batch_size, rngs[c])
            _check_finite(loss, "stage2_experts", shard.client_id, epoch)
            losses[shard.client_id] = loss
        reports.append(FedRoundReport(
            stage="stage2_experts", round_index=epoch,
            participants=tuple(s.client_id for s in clients),
            client_losses=losses, params_digest=_digest_group(experts),
            bytes_sent=0, wall_clock=time.perf_counter() - t0))
    if params_digest(fe_params) != fe_before:
        raise InternalError("stage 2 mutated the frozen extractor")
    return Stage2Result(experts=tuple(experts), reports=tuple(reports))


def stage3_rangate(distribution) -> Stage3Result:
    """Data-independent gate drawing experts from a fixed distribution."""
    return Stage3Result(gate=RandomGate(np.asarray(distribution,
                                                   dtype=np.float64)),
                        reports=(), setup_bytes=0)


def rollgate_pseudo_labels(num_experts: int, own_id: int, p: float,
                           num_samples: int,
                           rng: np.random.Generator) -> np.ndarray:
    """Pseudo client-id labels: fraction p keeps the owner's id, the rest
    spreads over the other ids by largest-remainder apportionment."""
    if not 0.0 < p < 1.0:
        raise ConfigError(f"p must lie in (0, 1), got {p}")
    if num_experts < 2:
        raise ConfigError("pseudo-labeling needs at least two clients")
    quotas = np.full(num_experts,
                     (1.0 - p) * num_samples / (num_experts - 1))
    quotas[own_id] = p * num_samples
    counts = apportion(quotas, num_samples)
    labels = np.repeat(np.arange(num_experts, dtype=np.int64), counts)
    out = np.empty(num_samples, dtype=np.int64)
    out[rng.permutation(num_samples)] = labels
    return out


def stage3_rollgate(clients, fe_spec: MlpSpec, fe_params: ParamSet,
                    gate_init: GateParams, p: float, epochs_per_client: int,
                    max_passes: int, lr: float, seed: int, *,
                    batch_size: int = 64,
                    bytes_per_scalar: int = DEFAULT_BYTES_PER_SCALAR
                    ) -> Stage3Result:
    """Ring-trained gate on pseudo client-id labels.

    The gate visits clients 0, 1, ..., m-1 in a loop, training
    epochs_per_client cross-entropy epochs per hop on frozen-extractor
    latents. Training stops once a full pass moves the pass-averaged loss
    by less than ROLLGATE_LOSS_TOL, or after max_passes.
    """
    _check_clients(clients)
    _check_schedule(max_passes, epochs_per_client, lr, batch_size)
    m = len(clients)
    if m < 2:
        raise ConfigError("rolling training needs at least two clients")
    fe_before = params_digest(fe_params)
    spec = MlpSpec((gate_init.latent_dim, m), (kernels.ACT_IDENTITY,))
    latents = [forward(fe_spec, fe_params, s.train.features)
               for s in clients]
    pseudo = [
        rollgate_pseudo_labels(
            m, c, p, s.train.num_samples,
            derive_rng(seed, seeding.PSEUDO, 0, s.client_id))
        for c, s in enumerate(clients)
    ]
    gate_params = gate_init.params
    reports = []
    previous = None
    for pass_index in range(max_passes):
        t0 = time.perf_counter()
        losses: dict[int, float] = {}
        for c, shard in enumerate(clients):
            rng = derive_rng(seed, seeding.STAGE3, pass_index, 0)
            epoch_losses = []
            for _ in range(epochs_per_client):
                gate_params, loss = _sgd_head_epoch(
                    spec, gate_params, latents[c], pseudo[c], lr,
                    batch_size, rng)
                _check_finite(loss, "stage3_rollgate", shard.client_id,
                              pass_index)
                epoch_losses.append(loss)
            losses[shard.client_id] = float(np.mean(epoch_losses))
        pass_avg = float(np.mean(list(losses.values())))
        reports.append(FedRoundReport(
            stage="stage3_rollgate", round_index=pass_index,
            participants=tuple(s.client_id for s in clients),
            client_losses=losses,
            params_digest=params_digest(gate_params),
            bytes_sent=rollgate_pass_bytes(m, gate_params.size(),
                                           bytes_per_scalar),
            wall_clock=time.perf_counter() - t0))
        if previous is not None and \
                abs(pass_avg - previous) < ROLLGATE_LOSS_TOL:
            break
        previous = pass_avg
    if params_digest(fe_params) != fe_before:
        raise InternalError("stage 3 mutated the frozen extractor")
    return Stage3Result(
        gate=GateParams(params=gate_params, noise_std=gate_init.noise_std),
        reports=tuple(reports), setup_bytes=0)


def _sgd_gate_epoch(gate: GateParams, latents: np.ndarray,
                    labels: np.ndarray, expert_logits: np.ndarray, k: int,
                    lr: float, lambda_load: float, grad_max_norm: float,
                    batch_size: int, rng: np.random.Generator,
                    multiplier: float | None):
    """One FedGate epoch: cross-entropy of the top-k mixture plus the
    load-balance penalty, gradients normalized before each step.

    Experts are frozen, so their logits arrive precomputed for the whole
    shard.
    """
    n = latents.shape[0]
    total = 0.0
    for rows in _batches(n, batch_size, rng):
        x = np.ascontiguousarray(latents[rows])
        outs = np.ascontiguousarray(expert_logits[:, rows, :])
        decision, probs = gate_topk(x, gate, k, rng=rng)
        ridx = np.arange(rows.size)
        gathered = probs[ridx[:, None], decision.indices]
        combined = kernels.combine_topk(outs, decision.indices, gathered)
        ce, dlogits = cross_entropy(combined, labels[rows])
        lb, dlb = load_balance_loss(probs, multiplier=multiplier)
        dprob = lambda_load * dlb
        for s in range(k):
            cols = decision.indices[:, s]
            chosen = outs[cols, ridx, :]
            dprob[ridx, cols] += np.sum(dlogits * chosen, axis=1)
        dgate_logits = softmax_backward(probs, dprob)
        grads = grad_normalize(
            ParamSet({"w0": x.T @ dgate_logits,
                      "b0": dgate_logits.sum(axis=0)}), grad_max_norm)
        gate = GateParams(params=sgd_step(gate.params, grads, lr),
                          noise_std=gate.noise_std)
        total += (ce + lambda_load * lb) * rows.size
    return gate, total / n


def _expert_logit_cache(fe_spec, fe_params, expert_spec, experts, clients):
    caches = []
    for shard in clients:
        latents = forward(fe_spec, fe_params, shard.train.features)
        outs = np.stack([forward(expert_spec, e, latents)
                         for e in experts])
        caches.append((latents, outs))
    return caches


def stage3_fedgate(clients, fe_spec: MlpSpec, fe_params: ParamSet,
                   expert_spec: MlpSpec, experts, gate_init: GateParams,
                   rounds: int, local_epochs: int, lr: float,
                   lambda_load: float, client_fraction: float,
                   grad_max_norm: float, k: int, seed: int, *,
                   batch_size: int = 64,
                   load_balance_multiplier: float | None = None,
                   bytes_per_scalar: int = DEFAULT_BYTES_PER_SCALAR
                   ) -> Stage3Result:
    """Federated-averaged gate over frozen extractor and experts.

    Each round samples ceil(client_fraction * m) participants without
    replacement; each trains the gate on its shard through the same top-k
    path used at inference, and the results are averaged by shard size.
    Training is hosted where all experts are available, so their one-time
    shipping cost lands in the first round's bytes.
    """
    _check_clients(clients)
    _check_schedule(rounds, local_epochs, lr, batch_size)
    if not 0.0 < client_fraction <= 1.0:
        raise ConfigError(
            f"client_fraction must lie in (0, 1], got {client_fraction}")
    if lambda_load < 0.0:
        raise ConfigError(f"lambda_load must be >= 0, got {lambda_load}")
    m = len(clients)
    experts = tuple(experts)
    if len(experts) != m:
        raise ConfigError(f"got {len(experts)} experts for {m} clients")
    fe_before = params_digest(fe_params)
    experts_before = _digest_group(experts)
    caches = _expert_logit_cache(fe_spec, fe_params, expert_spec, experts,
                                 clients)
    sizes = [float(s.train.num_samples) for s in clients]
    count = max(1, min(m, math.ceil(client_fraction * m - 1e-9)))
    setup = fedgate_setup_bytes(m, experts[0].size(), bytes_per_scalar)
    gate = gate_init
    reports = []
    for r in range(rounds):
        t0 = time.perf_counter()
        sched = derive_rng(seed, seeding.SCHEDULE, r, 0)
        participants = np.sort(sched.choice(m, size=count, replace=False))
        locals_gate = []
        losses: dict[int, float] = {}
        for c in participants:
            shard = clients[c]
            latents, outs = caches[c]
            rng = derive_rng(seed, seeding.STAGE3, r, 0)
            gate_c = gate
            epoch_losses = []
            for _ in range(local_epochs):
                gate_c, loss = _sgd_gate_epoch(
                    gate_c, latents, shard.train.labels, outs, k, lr,
                    lambda_load, grad_max_norm, batch_size, rng,
                    load_balance_multiplier)
                _check_finite(loss, "stage3_fedgate", shard.client_id, r)
                epoch_losses.append(loss)
            locals_gate.append(gate_c.params)
            losses[shard.client_id] = float(np.mean(epoch_losses))
        merged = fedavg(locals_gate, [sizes[c] for c in participants])
        gate = GateParams(params=merged, noise_std=gate_init.noise_std)
        bytes_sent = fedgate_round_bytes(count, merged.size(),
                                         bytes_per_scalar)
        if r == 0:
            bytes_sent += setup
        reports.append(FedRoundReport(
            stage="stage3_fedgate", round_index=r,
            participants=tuple(clients[c].client_id for c in participants),
            client_losses=losses, params_digest=params_digest(merged),
            bytes_sent=bytes_sent, wall_clock=time.perf_counter() - t0))
    if params_digest(fe_params) != fe_before:
        raise InternalError("stage 3 mutated the frozen extractor")
    if _digest_group(experts) != experts_before:
        raise InternalError("stage 3 mutated a frozen expert")
    return Stage3Result(gate=gate, reports=tuple(reports),
                        setup_bytes=setup)


def centralized_classifier(train: Dataset, fe_spec: MlpSpec,
                           head_spec: MlpSpec, rounds: int,
                           local_epochs: int, lr: float, seed: int, *,
                           batch_size: int = 64):
    """Plain SGD counterpart of stage1_fedce on one dataset.

    Follows the same rounds-by-epochs schedule and stream derivations, so
    a single-client federation matches it bit for bit.
    """
    _check_schedule(rounds, local_epochs, lr, batch_size)
    fe = init_mlp_params(
        fe_spec, derive_rng(seed, seeding.INIT, seeding.INIT_EXTRACTOR, 0))
    head = init_mlp_params(
        head_spec, derive_rng(seed, seeding.INIT, seeding.INIT_EXPERT, 0))
    losses = []
    for r in range(rounds):
        rng = derive_rng(seed, seeding.STAGE1, r, 0)
        for _ in range(local_epochs):
            fe, head, loss = _sgd_classifier_epoch(
                fe_spec, fe, head_spec, head, train.features, train.labels,
                lr, batch_size, rng)
            _check_finite(loss, "centralized_classifier", 0, r)
            losses.append(loss)
    return fe, head, losses


def centralized_spectral(train: Dataset, fe_spec: MlpSpec, rounds: int,
                         local_epochs: int, lr: float,
                         aug_spec: AugmentSpec, seed: int, *,
                         batch_size: int = 64):
    """Spectral-contrastive counterpart of stage1_fedsc on one dataset;
    the aggregate term is zero, matching a lone federated client."""
    _check_schedule(rounds, local_epochs, lr, batch_size)
    fe = init_mlp_params(
        fe_spec, derive_rng(seed, seeding.INIT, seeding.INIT_EXTRACTOR, 0))
    rbar = np.zeros((fe_spec.out_width, fe_spec.out_width))
    losses = []
    for r in range(rounds):
        rng = derive_rng(seed, seeding.STAGE1, r, 0)
        for _ in range(local_epochs):
            fe, loss = _sgd_spectral_epoch(
                fe_spec, fe, train.features, aug_spec, rbar, 1.0, lr,
                batch_size, rng)
            _check_finite(loss, "centralized_spectral", 0, r)
            losses.append(loss)
    return fe, losses


def centralized_gate(train: Dataset, fe_spec: MlpSpec, fe_params: ParamSet,
                     expert_spec: MlpSpec, experts,
                     gate_init: GateParams, rounds: int, local_epochs: int,
                     lr: float, lambda_load: float, grad_max_norm: float,
                     k: int, seed: int, *, batch_size: int = 64,
                     load_balance_multiplier: float | None = None):
    """Gate-training counterpart of stage3_fedgate on one dataset."""
    _check_schedule(rounds, local_epochs, lr, batch_size)
    experts = tuple(experts)
    latents = forward(fe_spec, fe_params, train.features)
    outs = np.stack([forward(expert_spec, e, latents) for e in experts])
    gate = gate_init
    losses = []
    for r in range(rounds):
        rng = derive_rng(seed, seeding.STAGE3, r, 0)
        for _ in range(local_epochs):
            gate, loss = _sgd_gate_epoch(
                gate, latents, train.labels, outs, k, lr, lambda_load,
                grad_max_norm, batch_size, rng, load_balance_multiplier)
            _check_finite(loss, "centralized_gate", 0, r)
            losses.append(loss)
    return gate, losses

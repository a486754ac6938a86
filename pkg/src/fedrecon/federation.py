"""Federation engine: client update phase, server aggregation phase,
adaptive loss-weighted aggregation, and baseline strategies.

Strategies:

* ``MODFED``   -- personalized partition, client-side loss regularization,
  and softmax-of-loss aggregation weights.
* ``FEDAVG``   -- sample-count aggregation weights.
* ``FEDPROX``  -- FEDAVG weights plus a proximal term pulling local
  weights toward the received server weights.
* ``SINGLESET`` -- local training only, no communication.

Clients train sequentially with explicit per-(round, epoch) RNG streams,
so a run is bitwise reproducible for a fixed master seed.  Upload
payloads carry only named tensors and scalar losses; raw images or
k-space never cross the client boundary.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import PartitionTag, Tensor
from .metrics import MetricConfig, normalized_magnitude, psnr, ssim
from .mri import Sample, adjoint_op
from .network import UnrolledModel, partition_params
from .optim import AdamW

STRATEGIES = ("MODFED", "FEDAVG", "FEDPROX", "SINGLESET")
LOSS_MODES = ("LITERAL", "CONSISTENCY")


class ProtocolError(RuntimeError):
    pass


class FederationError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# losses


def batch_loss(model: UnrolledModel, samples: list[Sample]) -> Tensor:
    """Mean per-sample l2 reconstruction error as a graph node."""
    mask = samples[0].mask
    b = np.stack([s.kspace for s in samples])
    target = np.stack(
        [np.stack([s.image.real, s.image.imag]) for s in samples]
    )
    pred = model.forward(b, mask)
    diff = ad.sub(pred, Tensor(target))
    per_sample = ad.sqrt(ad.tsum(ad.mul(diff, diff), axis=(-3, -2, -1)))
    return ad.tmean(per_sample)


def dataset_loss(model: UnrolledModel, samples: list[Sample], batch: int = 8) -> float:
    """Mean per-sample l2 reconstruction error, no gradient recording."""
    if not samples:
        raise ValueError("dataset_loss needs a non-empty sample list")
    total = 0.0
    with ad.no_grad():
        for i in range(0, len(samples), batch):
            chunk = samples[i : i + batch]
            total += batch_loss(model, chunk).item() * len(chunk)
    return total / len(samples)


def evaluate_model(
    model: UnrolledModel, samples: list[Sample], config: MetricConfig = MetricConfig()
) -> tuple[float, float]:
    """Mean PSNR/SSIM of reconstructions vs ground truth magnitudes."""
    psnrs, ssims = [], []
    for i in range(0, len(samples), 8):
        chunk = samples[i : i + 8]
        recon = model.reconstruct(np.stack([s.kspace for s in chunk]), chunk[0].mask)
        for r, s in zip(recon, chunk):
            x, ref = normalized_magnitude(r, s.image)
            psnrs.append(psnr(x, ref, config.data_range))
            ssims.append(ssim(x, ref, config))
    return float(np.mean(psnrs)), float(np.mean(ssims))


def zero_filled_metrics(
    samples: list[Sample], config: MetricConfig = MetricConfig()
) -> tuple[float, float]:
    """PSNR/SSIM of the zero-filled adjoint reconstruction baseline."""
    psnrs, ssims = [], []
    for s in samples:
        zf = adjoint_op(s.kspace, s.mask)
        x, ref = normalized_magnitude(zf, s.image)
        psnrs.append(psnr(x, ref, config.data_range))
        ssims.append(ssim(x, ref, config))
    return float(np.mean(psnrs)), float(np.mean(ssims))


# ---------------------------------------------------------------------------
# states and messages


@dataclass
class ClientState:
    """One simulated client: model, optimizer, data splits, hyperparameters."""

    client_id: int
    model: UnrolledModel
    optimizer: AdamW
    s1: list[Sample]
    s2: list[Sample]
    gamma: float = 0.1
    local_epochs: int = 2
    batch_size: int = 4
    seed: int = 0
    frozen_server: UnrolledModel | None = None
    frozen_server_outputs: list[Sample] | None = None


@dataclass
class ServerState:
    """Aggregated model, current weights, and round bookkeeping."""

    model: UnrolledModel
    alphas: np.ndarray
    round: int = 0
    total_rounds: int = 0


@dataclass
class UploadPayload:
    """The only message type a client may send: named tensors + scalars."""

    client_id: int
    tensors: dict[str, np.ndarray]
    loss_s1: float
    loss_s2: float


@dataclass
class RoundReport:
    round: int
    client_losses_s1: list[float]
    client_losses_s2: list[float]
    client_losses_server: list[float]
    alphas: list[float]
    wall_time: float
    psnr_val: list[float] | None = None
    ssim_val: list[float] | None = None


# ---------------------------------------------------------------------------
# protocol operations


def client_receive(client: ClientState, server_model: UnrolledModel) -> None:
    """Overwrite the client's global-shared tensors with the server's and
    stash a frozen full copy of the server model for loss evaluation."""
    server_state = server_model.state_dict()
    named = client.model.named_parameters()
    if set(named) != set(server_state):
        raise ProtocolError("client/server parameter names do not match")
    for name, p in named.items():
        if server_state[name].shape != p.data.shape:
            raise ProtocolError(
                f"client/server shape mismatch for {name!r}: "
                f"{p.data.shape} vs {server_state[name].shape}"
            )
    for name, p in named.items():
        if p.tag is PartitionTag.GLOBAL_SHARED:
            p.data = server_state[name].copy()
    client.frozen_server = server_model.clone()
    client.frozen_server_outputs = None


def eval_server_loss(client: ClientState) -> float:
    """Loss of the frozen full server model on the client's subset 2."""
    if not client.s2:
        raise ValueError(f"client {client.client_id} has an empty subset 2")
    if client.frozen_server is None:
        raise ProtocolError("eval_server_loss before client_receive")
    return dataset_loss(client.frozen_server, client.s2)


def eval_mixed_loss(client: ClientState) -> float:
    """Loss on subset 2 of the server's shared part combined with the
    client's personalized part.

    After ``client_receive`` the client model holds exactly that
    combination, so this is its subset-2 loss.
    """
    if not client.s2:
        raise ValueError(f"client {client.client_id} has an empty subset 2")
    return dataset_loss(client.model, client.s2)


def _prox_term(model: UnrolledModel, anchor: dict[str, np.ndarray], mu: float) -> Tensor:
    acc = None
    for name, p in model.named_parameters().items():
        diff = ad.sub(p, Tensor(anchor[name]))
        term = ad.tsum(ad.mul(diff, diff))
        acc = term if acc is None else ad.add(acc, term)
    return ad.mul(acc, mu / 2.0)


def client_train(
    client: ClientState,
    loss_server: float,
    mode: str = "LITERAL",
    strategy: str = "MODFED",
    fedprox_mu: float = 0.01,
    round_index: int = 0,
) -> tuple[float, float]:
    """Run the client's local epochs and return (mean s1 loss, s2 loss).

    ``mode`` selects the treatment of the server-loss regularizer:
    LITERAL adds ``gamma * loss_server`` as a constant (it carries no
    gradient w.r.t. client parameters), CONSISTENCY replaces it with a
    differentiable output-matching term against the frozen server model.
    FEDPROX ignores both and adds the proximal term instead.
    """
    if mode not in LOSS_MODES:
        raise ValueError(f"unknown loss mode {mode!r}")
    loss_s2 = eval_mixed_loss(client) if client.s2 else math.nan

    anchor = None
    if strategy == "FEDPROX":
        if client.frozen_server is None:
            raise ProtocolError("FEDPROX training before client_receive")
        anchor = client.frozen_server.state_dict()

    use_consistency = (
        mode == "CONSISTENCY" and strategy == "MODFED" and client.gamma > 0.0
    )
    if use_consistency and client.frozen_server_outputs is None:
        # frozen-server reconstructions of subset 2, computed once per round
        outs = []
        for i in range(0, len(client.s2), 8):
            chunk = client.s2[i : i + 8]
            recon = client.frozen_server.reconstruct(
                np.stack([s.kspace for s in chunk]), chunk[0].mask
            )
            outs.extend(
                Sample(recon[j], chunk[j].kspace, chunk[j].mask)
                for j in range(len(chunk))
            )
        client.frozen_server_outputs = outs

    params = client.model.parameters()
    recon_losses = []
    s2_cursor = 0
    for epoch in range(client.local_epochs):
        rng = np.random.default_rng(
            (client.seed, round_index, epoch, 0xC11E)
        )
        order = rng.permutation(len(client.s1))
        for start in range(0, len(order), client.batch_size):
            batch = [client.s1[i] for i in order[start : start + client.batch_size]]
            loss = batch_loss(client.model, batch)
            recon_losses.append(loss.item())
            if strategy == "FEDPROX":
                loss = ad.add(loss, _prox_term(client.model, anchor, fedprox_mu))
            elif use_consistency:
                ref = [
                    client.frozen_server_outputs[
                        (s2_cursor + j) % len(client.frozen_server_outputs)
                    ]
                    for j in range(len(batch))
                ]
                s2_cursor += len(batch)
                loss = ad.add(
                    loss, ad.mul(batch_loss(client.model, ref), client.gamma)
                )
            grads = ad.backward(loss, params)
            client.optimizer.step(params, grads)
    mean_s1 = float(np.mean(recon_losses))
    if not math.isfinite(mean_s1):
        raise FederationError(
            f"non-finite training loss on client {client.client_id} "
            f"in round {round_index}"
        )
    # In LITERAL mode the gamma-weighted server loss enters the objective
    # as a constant, so it never alters the parameter trajectory; the
    # components are reported separately and the total is derivable.
    return mean_s1, loss_s2


def adaptive_weights(losses: list[float]) -> np.ndarray:
    """Softmax of the per-client subset-2 losses (shift-invariant form)."""
    arr = np.asarray(losses, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ProtocolError(f"non-finite client losses: {losses}")
    e = np.exp(arr - arr.max())
    return e / e.sum()


def fedavg_weights(sample_counts: list[int]) -> np.ndarray:
    """Sample-count-proportional aggregation weights."""
    arr = np.asarray(sample_counts, dtype=float)
    if np.any(arr < 1):
        raise ValueError(f"sample counts must be >= 1, got {sample_counts}")
    total = arr.sum()
    if total <= 0:
        raise ValueError("total sample count must be positive")
    return arr / total


def aggregate(
    payloads: list[UploadPayload], alphas: np.ndarray
) -> dict[str, np.ndarray]:
    """Tensor-wise convex combination of client weight sets."""
    if abs(float(np.sum(alphas)) - 1.0) > 1e-9:
        raise ProtocolError(f"aggregation weights must sum to 1, got {np.sum(alphas)}")
    names = set(payloads[0].tensors)
    out = {}
    for payload in payloads:
        if set(payload.tensors) != names:
            raise ProtocolError("clients uploaded mismatched parameter names")
    for name in names:
        shape = payloads[0].tensors[name].shape
        acc = np.zeros(shape)
        for a, payload in zip(alphas, payloads):
            t = payload.tensors[name]
            if t.shape != shape:
                raise ProtocolError(f"shape mismatch for uploaded tensor {name!r}")
            acc = acc + a * t
        out[name] = acc
    return out


# ---------------------------------------------------------------------------
# orchestration


@dataclass
class FedRunConfig:
    strategy: str = "MODFED"
    partition_scheme: str = "SLAM_LOCAL"
    custom_local: list[str] | None = None
    loss_mode: str = "LITERAL"
    rounds: int = 30
    local_epochs: int = 2
    learning_rate: float = 1e-3
    batch_size: int = 4
    gamma: float = 0.1
    fedprox_mu: float = 0.01
    hidden: int = 16
    unroll_steps: int = 2
    cg_iters: int = 10
    cg_tol: float = 1e-6
    lam_init: float = 0.05
    seed: int = 0
    val_interval: int = 0  # 0: validation metrics at the final round only
    record_server_states: bool = False

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"unknown loss mode {self.loss_mode!r}")


@dataclass
class FederationResult:
    server: ServerState
    clients: list[ClientState]
    reports: list[RoundReport]
    server_states: list[dict[str, np.ndarray]] = field(default_factory=list)


def run_federation(
    config: FedRunConfig,
    client_datasets: list[tuple[list[Sample], list[Sample]]],
    val_sets: list[list[Sample]] | None = None,
) -> FederationResult:
    """Run the full communication loop.

    ``client_datasets`` holds the (s1, s2) split per client.  Every round:
    distribute, evaluate the server and mixed losses on subset 2, run the
    local epochs, upload, compute aggregation weights, aggregate.
    SINGLESET skips all communication.  Deterministic for a fixed config.
    """
    n_clients = len(client_datasets)
    if n_clients < 1:
        raise ValueError("at least one client is required")

    server_model = UnrolledModel(
        hidden=config.hidden,
        unroll_steps=config.unroll_steps,
        cg_iters=config.cg_iters,
        cg_tol=config.cg_tol,
        seed=config.seed,
        lam_init=config.lam_init,
    )
    partition_params(server_model, config.partition_scheme, config.custom_local)

    clients = []
    for k, (s1, s2) in enumerate(client_datasets):
        model = server_model.clone()
        clients.append(
            ClientState(
                client_id=k,
                model=model,
                optimizer=AdamW(lr=config.learning_rate),
                s1=s1,
                s2=s2,
                gamma=config.gamma,
                local_epochs=config.local_epochs,
                batch_size=config.batch_size,
                seed=int(np.random.default_rng((config.seed, k)).integers(2**31)),
            )
        )

    counts = [len(c.s1) for c in clients]
    server = ServerState(
        model=server_model,
        alphas=fedavg_weights(counts),
        total_rounds=config.rounds,
    )

    communicate = config.strategy != "SINGLESET"
    result = FederationResult(server=server, clients=clients, reports=[])

    for t in range(1, config.rounds + 1):
        t0 = time.perf_counter()
        server.round = t
        payloads = []
        losses_s1, losses_s2, losses_server = [], [], []
        try:
            for client in clients:
                if communicate:
                    client_receive(client, server.model)
                    loss_server = eval_server_loss(client)
                else:
                    loss_server = 0.0
                loss_s1, loss_s2 = client_train(
                    client,
                    loss_server,
                    mode=config.loss_mode,
                    strategy=config.strategy,
                    fedprox_mu=config.fedprox_mu,
                    round_index=t,
                )
                losses_s1.append(loss_s1)
                losses_s2.append(loss_s2)
                losses_server.append(loss_server)
                if communicate:
                    payloads.append(
                        UploadPayload(
                            client_id=client.client_id,
                            tensors=client.model.state_dict(),
                            loss_s1=loss_s1,
                            loss_s2=loss_s2,
                        )
                    )
            if communicate:
                if config.strategy == "MODFED":
                    server.alphas = adaptive_weights(losses_s2)
                else:
                    server.alphas = fedavg_weights(counts)
                server.model.load_state_dict(aggregate(payloads, server.alphas))
                if config.record_server_states:
                    result.server_states.append(server.model.state_dict())
        except (FederationError, ProtocolError, FloatingPointError) as exc:
            raise FederationError(f"round {t}: {exc}") from exc

        report = RoundReport(
            round=t,
            client_losses_s1=losses_s1,
            client_losses_s2=losses_s2,
            client_losses_server=losses_server,
            alphas=list(map(float, server.alphas)) if communicate else [math.nan] * n_clients,
            wall_time=time.perf_counter() - t0,
        )
        want_val = val_sets is not None and (
            t == config.rounds
            or (config.val_interval > 0 and t % config.val_interval == 0)
        )
        if want_val:
            report.psnr_val, report.ssim_val = [], []
            for client, vs in zip(clients, val_sets):
                p, s = evaluate_model(_personalized_view(client, server, communicate), vs)
                report.psnr_val.append(p)
                report.ssim_val.append(s)
        result.reports.append(report)

    # final distribution so clients hold the last aggregated shared part
    if communicate:
        for client in clients:
            client_receive(client, server.model)
    return result


def _personalized_view(client: ClientState, server: ServerState, communicate: bool):
    """Client model as it would look after receiving the current server
    weights (shared part from the server, personalized part local)."""
    if not communicate:
        return client.model
    view = client.model.clone()
    server_state = server.model.state_dict()
    for name, p in view.named_parameters().items():
        if p.tag is PartitionTag.GLOBAL_SHARED:
            p.data = server_state[name].copy()
    return view


# ---------------------------------------------------------------------------
# reporting


CSV_COLUMNS = [
    "round",
    "client",
    "loss_s1",
    "loss_s2",
    "loss_server",
    "alpha",
    "psnr_val",
    "ssim_val",
]


def _fmt(x) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    return format(float(x), ".17g")


def write_reports_csv(reports: list[RoundReport], path) -> None:
    """Append-style round/client CSV; wall times are deliberately
    excluded so identical runs produce byte-identical files."""
    path = Path(path)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(CSV_COLUMNS)
        for rep in reports:
            for k in range(len(rep.client_losses_s1)):
                writer.writerow(
                    [
                        rep.round,
                        k,
                        _fmt(rep.client_losses_s1[k]),
                        _fmt(rep.client_losses_s2[k]),
                        _fmt(rep.client_losses_server[k]),
                        _fmt(rep.alphas[k]),
                        _fmt(rep.psnr_val[k] if rep.psnr_val else None),
                        _fmt(rep.ssim_val[k] if rep.ssim_val else None),
                    ]
                )


def split_dataset(
    samples: list[Sample], ratio: float = 0.8, seed: int = 0
) -> tuple[list[Sample], list[Sample]]:
    """Deterministic disjoint s1/s2 split (default 80/20)."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(samples))
    n1 = int(round(ratio * len(samples)))
    n1 = min(max(n1, 1), len(samples) - 1)
    s1 = [samples[i] for i in order[:n1]]
    s2 = [samples[i] for i in order[n1:]]
    return s1, s2

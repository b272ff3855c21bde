"""Single-process simulation of FedGCA rounds.

Each round broadcasts the global weights, runs every client's local
training against that frozen snapshot, updates the client duals and then
applies the server's dual-corrected average. ``alpha == 0`` takes the plain
averaging path (FedAvg), since the server correction divides by alpha.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np
import torch

from fedgca import classifier as clf
from fedgca.config import ExperimentConfig
from fedgca.dataset_store import LabeledDataset, partition_dirichlet
from fedgca.objectives import LossBreakdown, PredictionSet, loss_ce, loss_gc, loss_oc, loss_total
from fedgca.streams import derive_seed, make_rng
from fedgca.style_complement import style_complement

log = logging.getLogger(__name__)

# stream families under the master seed
SHUFFLE_STREAM = 1
AUGMENT_STREAM = 2


class FederationError(RuntimeError):
    pass


@dataclass
class ClientState:
    id: int
    shard: LabeledDataset
    lambda_i: torch.Tensor
    current_params: torch.Tensor | None = None


@dataclass
class ServerState:
    round: int
    global_params: torch.Tensor
    lambda_: torch.Tensor
    eta: float
    alpha: float
    local_epochs: int
    rounds: int
    client_count: int
    weighted_aggregation: bool = False

    @classmethod
    def initial(cls, params: torch.Tensor, config: ExperimentConfig) -> "ServerState":
        return cls(
            round=0,
            global_params=params.clone(),
            lambda_=torch.zeros_like(params),
            eta=config.eta,
            alpha=config.alpha,
            local_epochs=config.I,
            rounds=config.T,
            client_count=config.K,
            weighted_aggregation=config.weighted_aggregation,
        )


class LocalObjective(Protocol):
    def __call__(
        self, w: torch.Tensor, images: np.ndarray, labels: np.ndarray, snapshot: torch.Tensor,
        lambda_i: torch.Tensor, seed: int,
    ) -> LossBreakdown: ...


class FedGCAObjective:
    """``L_DG = CE + alpha * OC + beta * GC`` on a style-augmented batch.

    The CAM class for every view is the local model's prediction on the
    original (unaugmented) view.
    """

    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.spec = config.classifier_spec
        self.augment = config.augment
        self.ablation = config.ablation

    def __call__(self, w, images, labels, snapshot, lambda_i, seed) -> LossBreakdown:
        cfg, spec, abl = self.config, self.spec, self.ablation
        aug = style_complement(images, labels, self.augment, seed)
        V, n = len(aug.views), len(labels)
        x = aug.stacked().reshape(V * n, *images.shape[1:])
        logits, feats = clf.forward(spec, w, x)
        probs = clf.softmax(logits).view(V, n, -1)
        ce = loss_ce(probs, labels)

        gc = cp = cam = torch.zeros((), dtype=w.dtype)
        use_gc = cfg.beta > 0 and abl.use_local_pred
        if use_gc:
            need_global = abl.use_global_pred or abl.use_global_cam
            if need_global:
                with torch.no_grad():
                    g_logits, g_feats = clf.forward(spec, snapshot, x)
                    g_probs = clf.softmax(g_logits).view(V, n, -1)
            pred_set = PredictionSet(probs, g_probs if abl.use_global_pred else None)
            local_cams = global_cams = None
            if abl.use_local_cam:
                class_ids = probs[0].detach().argmax(dim=-1).repeat(V)
                fc = clf.unflatten(spec, w)["fc.weight"]
                local_cams = self._cams(fc, feats, class_ids, V, n)
                if abl.use_global_cam:
                    with torch.no_grad():
                        g_fc = clf.unflatten(spec, snapshot)["fc.weight"]
                        global_cams = self._cams(g_fc, g_feats, class_ids, V, n)
            gc, cp, cam = loss_gc(pred_set, local_cams, global_cams, cfg.cp_form)

        oc = torch.zeros((), dtype=w.dtype)
        if cfg.alpha > 0:
            oc = loss_oc(w, snapshot, lambda_i, cfg.alpha)
        return loss_total(ce, oc, gc, cfg.alpha, cfg.beta if use_gc else 0.0, cp=cp, cam=cam)

    def _cams(self, fc, feats, class_ids, V, n):
        raw = clf.raw_cam(fc, feats, class_ids)
        norm = clf.normalize_cam(raw, self.config.cam_temperature, self.config.cam_norm)
        return norm.view(V, n, *norm.shape[1:])


def epoch_order(master_seed: int, round_idx: int, client_id: int, epoch: int, n: int) -> np.ndarray:
    return make_rng((master_seed, SHUFFLE_STREAM, round_idx, client_id, epoch)).permutation(n)


def batch_seed(master_seed: int, round_idx: int, client_id: int, epoch: int, batch: int) -> int:
    return derive_seed(master_seed, AUGMENT_STREAM, round_idx, client_id, epoch, batch)


@dataclass
class ClientResult:
    params: torch.Tensor
    lambda_i: torch.Tensor
    losses: list[LossBreakdown] = field(default_factory=list)

    def __iter__(self):
        # unpacks as (updated_params, updated_lambda)
        return iter((self.params, self.lambda_i))


def client_update(
    client: ClientState,
    server_snapshot: torch.Tensor,
    config: ExperimentConfig,
    round_idx: int = 0,
    objective: LocalObjective | None = None,
) -> ClientResult:
    """Local gradient descent on ``L_DG`` followed by the client dual update."""
    if len(client.shard) == 0:
        raise FederationError(f"client {client.id}: empty shard")
    objective = objective or FedGCAObjective(config)
    snapshot = server_snapshot.detach().clone()
    w = snapshot.clone()
    eta = config.eta
    losses: list[LossBreakdown] = []
    n = len(client.shard)
    for epoch in range(config.I):
        order = epoch_order(config.master_seed, round_idx, client.id, epoch, n)
        for b, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start : start + config.batch_size]
            images = client.shard.images[idx]
            labels = client.shard.labels[idx]
            seed = batch_seed(config.master_seed, round_idx, client.id, epoch, b)
            w.requires_grad_(True)
            parts = objective(w, images, labels, snapshot, client.lambda_i, seed)
            total = parts.total
            if not torch.isfinite(total):
                raise FederationError(
                    f"non-finite loss {total.item()} at round {round_idx}, client {client.id}, epoch {epoch}, batch {b}"
                )
            if total.requires_grad:
                (grad,) = torch.autograd.grad(total, w)
            else:
                grad = torch.zeros_like(w)
            with torch.no_grad():
                w = w.detach() - eta * grad
            losses.append(LossBreakdown(**parts.as_floats()))
    w = w.detach()
    lam = client.lambda_i
    if config.alpha > 0:
        lam = client.lambda_i - config.alpha * (w - snapshot)
    return ClientResult(w, lam, losses)


def server_aggregate(
    server: ServerState, client_params: Sequence[torch.Tensor], weights: Sequence[float] | None = None
) -> ServerState:
    """Dual update and dual-corrected average; plain averaging when ``alpha == 0``."""
    K = server.client_count
    if len(client_params) != K:
        raise FederationError(f"expected {K} client models, got {len(client_params)}")
    D = server.global_params.numel()
    for i, p in enumerate(client_params):
        if p.numel() != D:
            raise FederationError(f"client {i}: parameter vector has length {p.numel()}, expected {D}")
    w_t = server.global_params
    deltas = torch.stack([p.detach() for p in client_params]) - w_t
    # averaging the deltas keeps w^t an exact fixed point
    if server.weighted_aggregation and weights is not None:
        wts = torch.as_tensor(weights, dtype=deltas.dtype)
        avg = w_t + (wts[:, None] * deltas).sum(dim=0) / wts.sum()
    else:
        avg = w_t + deltas.sum(dim=0) / K
    if server.alpha == 0:
        new_lambda = torch.zeros_like(server.lambda_)
        new_w = avg
    else:
        new_lambda = server.lambda_ - (server.alpha / K) * deltas.sum(dim=0)
        new_w = avg - new_lambda / server.alpha
    return dataclasses.replace(server, round=server.round + 1, global_params=new_w, lambda_=new_lambda)


@dataclass
class RoundMetrics:
    round: int
    per_domain_accuracy: dict[str, float]
    mean_loss: LossBreakdown
    per_client_losses: list[dict] = field(default_factory=list)

    def to_json(self) -> str:
        doc = {"round": self.round, "per_client_losses": self.per_client_losses, "mean_loss": self.mean_loss.as_floats()}
        if self.per_domain_accuracy:
            doc["eval"] = self.per_domain_accuracy
        return json.dumps(doc)


def make_clients(source: LabeledDataset, config: ExperimentConfig, D: int, dtype) -> list[ClientState]:
    plan = partition_dirichlet(source, config.K, config.dirichlet_concentration, config.master_seed)
    return [
        ClientState(i, source.subset(idx), torch.zeros(D, dtype=dtype))
        for i, idx in enumerate(plan.assignments)
    ]


def torch_dtype(name: str) -> torch.dtype:
    return {"float32": torch.float32, "float64": torch.float64}[name]


def run_federation(
    config: ExperimentConfig,
    source: LabeledDataset,
    evaluator: Callable[[torch.Tensor], dict] | None = None,
    history_path: Path | None = None,
    checkpoint_dir: Path | None = None,
    objective: LocalObjective | None = None,
    initial_params: torch.Tensor | None = None,
) -> tuple[torch.Tensor, list[RoundMetrics]]:
    """Run ``T`` rounds of FedGCA over ``K`` clients drawn from ``source``.

    Target data never reaches this function; ``evaluator`` is an opaque
    callback invoked on the global weights every ``eval_every`` rounds and
    after the final round.
    """
    spec = config.classifier_spec
    if source.shape != spec.input_shape:
        raise FederationError(f"source images {source.shape} do not match classifier input {spec.input_shape}")
    dtype = torch_dtype(config.dtype)
    params = initial_params if initial_params is not None else clf.init_params(spec, config.master_seed, dtype)
    server = ServerState.initial(params, config)
    clients = make_clients(source, config, spec.D, dtype)
    sizes = [len(c.shard) for c in clients]
    objective = objective or FedGCAObjective(config)
    history: list[RoundMetrics] = []
    hist_fh = open(history_path, "a") if history_path else None
    try:
        for t in range(config.T):
            snapshot = server.global_params.detach().clone()
            uploads, per_client = [], []
            for client in clients:
                try:
                    res = client_update(client, snapshot, config, t, objective)
                except FederationError:
                    raise
                except Exception as exc:
                    raise FederationError(f"round {t}, client {client.id}: {exc}") from exc
                client.lambda_i = res.lambda_i
                client.current_params = res.params
                uploads.append(res.params)
                per_client.append(LossBreakdown.mean(res.losses).as_floats())
            server = server_aggregate(server, uploads, sizes)
            if not torch.isfinite(server.global_params).all():
                raise FederationError(f"round {t}: global parameters became non-finite")
            mean = LossBreakdown.mean([LossBreakdown(**d) for d in per_client])
            record = RoundMetrics(t + 1, {}, mean, per_client)
            last = t == config.T - 1
            if evaluator is not None and (last or (config.eval_every and (t + 1) % config.eval_every == 0)):
                record.per_domain_accuracy = evaluator(server.global_params)
            history.append(record)
            log.info("round %d/%d loss %.4f %s", t + 1, config.T, mean.total, record.per_domain_accuracy or "")
            if hist_fh:
                hist_fh.write(record.to_json() + "\n")
                hist_fh.flush()
            if checkpoint_dir and (last or (config.checkpoint_every and (t + 1) % config.checkpoint_every == 0)):
                save_server_state(checkpoint_dir / f"round_{t + 1:04d}.json", spec, server)
    finally:
        if hist_fh:
            hist_fh.close()
    return server.global_params, history


def save_server_state(path: Path, spec, server: ServerState) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    return clf.save_checkpoint(path, spec, server.global_params, round=server.round, **{"lambda": server.lambda_})

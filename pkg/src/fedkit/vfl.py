"""Vertical federated learning: feature-split clients, label-holding server.

Each client owns a disjoint block of feature columns and a small embedding
network.  The server concatenates the client embeddings, runs its head
network, and sends each client the gradient of the loss with respect to
that client's embedding block; clients backpropagate it locally.  Samples
are assumed row-aligned across parties.

``run_vfl_experiment`` is the batteries-included harness: it standardizes
features and labels with training-split statistics (the optimizer starts
at the label mean instead of fighting its offset), trains full-batch with
Adam, and reports validation MSE in original label units next to the
mean-predictor baseline.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import DimMismatch
from .models import (
    Dataset,
    ModelSpec,
    backward_from_output_grad,
    backward_with_input_grad,
    forward,
    init_params,
    split_train_val,
)
from .optim import make_optimizer
from .params import ParameterSet

VFL_LR = 0.01
VFL_EPOCHS = 200
DEFAULT_HIDDEN = 16
DEFAULT_EMBED = 4


@dataclass(frozen=True)
class VflConfig:
    feature_split: tuple[tuple[int, ...], ...]  # column indices per client
    client_specs: tuple[ModelSpec, ...]
    head_spec: ModelSpec

    def __post_init__(self):
        if len(self.feature_split) != len(self.client_specs):
            raise DimMismatch(
                f"{len(self.feature_split)} feature blocks vs {len(self.client_specs)} client specs"
            )
        seen: set[int] = set()
        for block in self.feature_split:
            if not block:
                raise DimMismatch("empty feature block")
            if seen & set(block):
                raise DimMismatch("feature blocks overlap")
            seen |= set(block)
        if seen != set(range(len(seen))):
            raise DimMismatch("feature blocks must cover columns 0..d-1 without gaps")
        for block, spec in zip(self.feature_split, self.client_specs):
            if spec.layer_dims[0] != len(block):
                raise DimMismatch(
                    f"client spec expects {spec.layer_dims[0]} features, block has {len(block)}"
                )
        total_embed = sum(s.layer_dims[-1] for s in self.client_specs)
        if self.head_spec.layer_dims[0] != total_embed:
            raise DimMismatch(
                f"head expects {self.head_spec.layer_dims[0]} inputs, embeddings total {total_embed}"
            )

    @property
    def n_clients(self) -> int:
        return len(self.client_specs)

    @property
    def n_features(self) -> int:
        return sum(len(b) for b in self.feature_split)

    def embedding_slices(self) -> list[slice]:
        """Column ranges of each client's block inside the concatenated embedding."""
        out, start = [], 0
        for spec in self.client_specs:
            width = spec.layer_dims[-1]
            out.append(slice(start, start + width))
            start += width
        return out


def default_vfl_config(
    n_features: int,
    n_clients: int = 3,
    hidden: int = DEFAULT_HIDDEN,
    embed: int = DEFAULT_EMBED,
    head_hidden: int = DEFAULT_HIDDEN,
) -> VflConfig:
    """Contiguous column blocks; remainder columns go to the trailing clients."""
    if n_clients < 1 or n_features < n_clients:
        raise DimMismatch(f"cannot split {n_features} features over {n_clients} clients")
    sizes = [n_features // n_clients] * n_clients
    for i in range(n_features % n_clients):
        sizes[-(i + 1)] += 1
    blocks, start = [], 0
    for s in sizes:
        blocks.append(tuple(range(start, start + s)))
        start += s
    client_specs = tuple(ModelSpec((s, hidden, embed), "relu", "mse") for s in sizes)
    head_spec = ModelSpec((embed * n_clients, head_hidden, 1), "relu", "mse")
    return VflConfig(tuple(blocks), client_specs, head_spec)


def vfl_server_step(
    cfg: VflConfig,
    head_params: ParameterSet,
    embeddings: Sequence[np.ndarray],
    labels: np.ndarray,
    optimizer=None,
) -> tuple[float, list[np.ndarray], ParameterSet]:
    """Head forward/backward on concatenated embeddings.

    Returns (loss, per-client embedding gradients, updated head params).
    With no optimizer the head is left untouched (pure gradient service).
    """
    if len(embeddings) != cfg.n_clients:
        raise DimMismatch(f"got {len(embeddings)} embeddings for {cfg.n_clients} clients")
    rows = {e.shape[0] for e in embeddings}
    if len(rows) != 1:
        raise DimMismatch(f"embedding row counts differ: {sorted(rows)}")
    z = np.hstack([np.asarray(e) for e in embeddings])
    if z.shape[1] != cfg.head_spec.layer_dims[0]:
        raise DimMismatch(f"concatenated width {z.shape[1]} vs head input {cfg.head_spec.layer_dims[0]}")
    loss, grads, dz = backward_with_input_grad(cfg.head_spec, head_params, z, labels)
    per_client = [dz[:, sl] for sl in cfg.embedding_slices()]
    new_head = head_params if optimizer is None else optimizer.step(head_params, grads)
    return float(loss), per_client, new_head


def vfl_client_step(
    spec: ModelSpec,
    params: ParameterSet,
    features: np.ndarray,
    embedding_grad: np.ndarray,
    optimizer,
) -> ParameterSet:
    """Backprop the server-supplied embedding gradient; one optimizer step."""
    _, grads, _ = backward_from_output_grad(spec, params, features, embedding_grad)
    return optimizer.step(params, grads)


@dataclass
class VflRun:
    config: VflConfig
    client_params: list[ParameterSet]
    head_params: ParameterSet
    history: list[dict] = field(default_factory=list)
    val_mse: float = float("nan")
    baseline_mse: float = float("nan")


def _standardize(train: np.ndarray, *others: np.ndarray):
    mu = train.mean(axis=0)
    sd = train.std(axis=0)
    sd = np.where(sd < 1e-12, 1.0, sd)
    return mu, sd, [(a - mu) / sd for a in (train, *others)]


def run_vfl_experiment(
    dataset: Dataset,
    cfg: Optional[VflConfig] = None,
    epochs: int = VFL_EPOCHS,
    lr: float = VFL_LR,
    seed: int = 0,
    val_fraction: float = 0.2,
    eval_every: int = 20,
) -> VflRun:
    """Full-batch split training; reports MSE in original label units."""
    if cfg is None:
        cfg = default_vfl_config(dataset.features.shape[1])
    if dataset.features.shape[1] != cfg.n_features:
        raise DimMismatch(
            f"dataset has {dataset.features.shape[1]} features, config covers {cfg.n_features}"
        )
    train, val = split_train_val(dataset, val_fraction=val_fraction, seed=seed)
    x_tr = train.features.astype(np.float64)
    x_va = val.features.astype(np.float64)
    y_tr = train.labels.astype(np.float64)
    y_va = val.labels.astype(np.float64)

    _, _, (x_tr, x_va) = _standardize(x_tr, x_va)
    y_mu, y_sd, (y_tr_s,) = _standardize(y_tr)
    y_sd = float(y_sd)

    client_params = [
        init_params(spec, seed=[seed, i]) for i, spec in enumerate(cfg.client_specs)
    ]
    head_params = init_params(cfg.head_spec, seed=[seed, len(cfg.client_specs)])
    client_opts = [make_optimizer("adam", lr) for _ in cfg.client_specs]
    head_opt = make_optimizer("adam", lr)

    blocks_tr = [x_tr[:, list(b)] for b in cfg.feature_split]
    blocks_va = [x_va[:, list(b)] for b in cfg.feature_split]
    run = VflRun(cfg, client_params, head_params)

    def val_mse() -> float:
        embs = [
            forward(spec, p, xb)
            for spec, p, xb in zip(cfg.client_specs, run.client_params, blocks_va)
        ]
        pred_s = forward(cfg.head_spec, run.head_params, np.hstack(embs)).ravel()
        pred = pred_s * y_sd + float(y_mu)
        return float(np.mean((pred - y_va) ** 2))

    for epoch in range(epochs):
        embeddings = [
            forward(spec, p, xb)
            for spec, p, xb in zip(cfg.client_specs, run.client_params, blocks_tr)
        ]
        loss, grads, run.head_params = vfl_server_step(
            cfg, run.head_params, embeddings, y_tr_s, head_opt
        )
        run.client_params = [
            vfl_client_step(spec, p, xb, g, opt)
            for spec, p, xb, g, opt in zip(
                cfg.client_specs, run.client_params, blocks_tr, grads, client_opts
            )
        ]
        if (epoch + 1) % eval_every == 0 or epoch == epochs - 1:
            run.history.append({"epoch": epoch + 1, "train_loss": loss, "val_mse": val_mse()})

    run.val_mse = val_mse()
    # one-number yardstick: predict the training mean everywhere
    run.baseline_mse = float(np.mean((y_va - y_tr.mean()) ** 2))
    return run

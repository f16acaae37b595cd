"""Dense networks with hand-written backprop, plus dataset builders.

No autodiff: gradients are closed-form so they can be verified against
central finite differences.  Parameters follow the naming scheme
``W0, b0, W1, b1, ...`` with ``W_l`` of shape (fan_in, fan_out).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from typing import Optional

import csv

import numpy as np

from .errors import DimMismatch, EmptyDataset, InfeasiblePartition, ParseError, ShapeMismatch
from .params import ParameterSet

ACTIVATIONS = ("relu", "identity")
LOSSES = ("mse", "softmax_cross_entropy")


@dataclass(frozen=True)
class ModelSpec:
    """Architecture of a multilayer perceptron.

    ``layer_dims = (d_in, h1, ..., d_out)``; hidden layers use ``activation``,
    the output layer is linear.
    """

    layer_dims: tuple[int, ...]
    activation: str = "relu"
    loss: str = "softmax_cross_entropy"

    def __post_init__(self):
        object.__setattr__(self, "layer_dims", tuple(int(d) for d in self.layer_dims))
        if len(self.layer_dims) < 2:
            raise DimMismatch("layer_dims needs at least input and output sizes")
        if any(d <= 0 for d in self.layer_dims):
            raise DimMismatch(f"non-positive layer dim in {self.layer_dims}")
        if self.activation not in ACTIVATIONS:
            raise DimMismatch(f"unknown activation {self.activation!r}")
        if self.loss not in LOSSES:
            raise DimMismatch(f"unknown loss {self.loss!r}")

    @property
    def n_layers(self) -> int:
        return len(self.layer_dims) - 1


def init_params(spec: ModelSpec, seed: int, dtype=np.float64) -> ParameterSet:
    """Uniform init in [-1/sqrt(fan_in), +1/sqrt(fan_in)] for weights and biases."""
    rng = np.random.default_rng(seed)
    dt = np.dtype(dtype)
    entries = []
    for layer in range(spec.n_layers):
        fan_in = spec.layer_dims[layer]
        fan_out = spec.layer_dims[layer + 1]
        bound = 1.0 / np.sqrt(fan_in)
        entries.append((f"W{layer}", rng.uniform(-bound, bound, (fan_in, fan_out)).astype(dt)))
        entries.append((f"b{layer}", rng.uniform(-bound, bound, fan_out).astype(dt)))
    return ParameterSet(entries)


def _act(spec: ModelSpec, z: np.ndarray) -> np.ndarray:
    if spec.activation == "relu":
        return np.maximum(z, 0.0)
    return z


def _act_grad(spec: ModelSpec, z: np.ndarray) -> np.ndarray:
    if spec.activation == "relu":
        return (z > 0.0).astype(z.dtype)
    return np.ones_like(z)


def _check_features(spec: ModelSpec, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[1] != spec.layer_dims[0]:
        raise DimMismatch(f"features {x.shape} incompatible with input dim {spec.layer_dims[0]}")
    return x


def _forward_cache(spec: ModelSpec, params: ParameterSet, x: np.ndarray):
    """Returns (output, pre-activations per layer, post-activations incl. input)."""
    x = _check_features(spec, x)
    pre, post = [], [x]
    h = x
    for layer in range(spec.n_layers):
        z = h @ params[f"W{layer}"] + params[f"b{layer}"]
        pre.append(z)
        h = _act(spec, z) if layer < spec.n_layers - 1 else z
        post.append(h)
    return h, pre, post


def forward(spec: ModelSpec, params: ParameterSet, x: np.ndarray) -> np.ndarray:
    """Network output (n, d_out)."""
    out, _, _ = _forward_cache(spec, params, x)
    return out


def _loss_and_grad(spec: ModelSpec, out: np.ndarray, y: np.ndarray):
    n = out.shape[0]
    if spec.loss == "mse":
        target = np.asarray(y, dtype=out.dtype)
        if target.ndim == 1:
            target = target.reshape(n, -1)
        if target.shape != out.shape:
            raise DimMismatch(f"labels {target.shape} vs outputs {out.shape}")
        diff = out - target
        loss = float(np.mean(diff * diff))
        return loss, (2.0 / diff.size) * diff
    # softmax cross entropy over integer labels
    labels = np.asarray(y)
    if labels.ndim != 1 or labels.shape[0] != n:
        raise DimMismatch(f"labels {labels.shape} vs batch {n}")
    labels = labels.astype(np.int64)
    if labels.min() < 0 or labels.max() >= out.shape[1]:
        raise DimMismatch("label out of range for output layer")
    shifted = out - out.max(axis=1, keepdims=True)
    logsumexp = np.log(np.sum(np.exp(shifted), axis=1))
    loss = float(np.mean(logsumexp - shifted[np.arange(n), labels]))
    probs = np.exp(shifted)
    probs /= probs.sum(axis=1, keepdims=True)
    probs[np.arange(n), labels] -= 1.0
    return loss, probs / n


def _backprop(spec: ModelSpec, params: ParameterSet, pre, post, delta: np.ndarray):
    """Gradients of a scalar whose d/d(output) is ``delta``; also returns d/d(input)."""
    grads: dict[str, np.ndarray] = {}
    for layer in range(spec.n_layers - 1, -1, -1):
        if layer < spec.n_layers - 1:
            delta = delta * _act_grad(spec, pre[layer])
        grads[f"W{layer}"] = post[layer].T @ delta
        grads[f"b{layer}"] = delta.sum(axis=0)
        delta = delta @ params[f"W{layer}"].T
    ordered = ParameterSet((name, grads[name]) for name in params.names)
    return ordered, delta


def loss_on(spec: ModelSpec, params: ParameterSet, x, y) -> float:
    out, _, _ = _forward_cache(spec, params, x)
    loss, _ = _loss_and_grad(spec, out, y)
    return loss


def backward(spec: ModelSpec, params: ParameterSet, x, y):
    """(mean loss, gradient ParameterSet) for one batch."""
    out, pre, post = _forward_cache(spec, params, x)
    loss, dout = _loss_and_grad(spec, out, y)
    grads, _ = _backprop(spec, params, pre, post, dout)
    return loss, grads


def backward_with_input_grad(spec: ModelSpec, params: ParameterSet, x, y):
    """(mean loss, gradient ParameterSet, d loss / d input) for one batch."""
    out, pre, post = _forward_cache(spec, params, x)
    loss, dout = _loss_and_grad(spec, out, y)
    grads, dx = _backprop(spec, params, pre, post, dout)
    return loss, grads, dx


def backward_from_output_grad(spec: ModelSpec, params: ParameterSet, x, dout: np.ndarray):
    """Backprop an externally supplied output gradient (split-model training).

    Returns (output, gradient ParameterSet, input gradient).
    """
    out, pre, post = _forward_cache(spec, params, x)
    if np.asarray(dout).shape != out.shape:
        raise DimMismatch(f"output grad {np.asarray(dout).shape} vs outputs {out.shape}")
    grads, dx = _backprop(spec, params, pre, post, np.asarray(dout))
    return out, grads, dx


# ---------------------------------------------------------------------------
# datasets


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    task: str = "classification"  # classification | regression

    def __post_init__(self):
        self.features = np.asarray(self.features)
        self.labels = np.asarray(self.labels)
        if self.features.ndim != 2:
            raise ShapeMismatch(f"features must be 2-D, got {self.features.shape}")
        if len(self.labels) != len(self.features):
            raise ShapeMismatch("features and labels disagree on sample count")
        if len(self.features) == 0:
            raise EmptyDataset("dataset has no rows")
        if self.task not in ("classification", "regression"):
            raise ShapeMismatch(f"unknown task {self.task!r}")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.features[idx], self.labels[idx], self.task)


def dataset_metrics(spec: ModelSpec, params: ParameterSet, ds: Dataset) -> dict:
    """Full-dataset loss plus accuracy (classification) or mse (regression)."""
    out = forward(spec, params, ds.features)
    loss, _ = _loss_and_grad(spec, out, ds.labels)
    metrics = {"loss": loss}
    if ds.task == "classification":
        pred = out.argmax(axis=1)
        metrics["accuracy"] = float(np.mean(pred == ds.labels.astype(np.int64)))
    else:
        target = ds.labels.reshape(len(ds), -1)
        metrics["mse"] = float(np.mean((out - target) ** 2))
    return metrics


def make_blobs(
    classes: int = 10,
    dim: int = 16,
    per_class: int = 100,
    spread: float = 1.0,
    mean_scale: float = 3.0,
    seed: int = 0,
    dtype=np.float64,
) -> Dataset:
    """Gaussian clusters, one per class, rows shuffled; fully seed-determined."""
    rng = np.random.default_rng(seed)
    means = rng.normal(0.0, mean_scale, (classes, dim))
    feats = np.concatenate(
        [means[c] + spread * rng.normal(0.0, 1.0, (per_class, dim)) for c in range(classes)]
    )
    labels = np.repeat(np.arange(classes), per_class)
    order = rng.permutation(len(labels))
    return Dataset(feats[order].astype(np.dtype(dtype)), labels[order], "classification")


def load_csv(path, task: str = "regression") -> Dataset:
    """Header row, last column is the label, every cell numeric."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise EmptyDataset(f"{path}: no header row") from None
        width = len(header)
        if width < 2:
            raise ParseError(f"{path}: need at least one feature column plus label")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                raise ParseError(f"{path}:{lineno}: expected {width} cells, got {len(row)}")
            try:
                rows.append([float(cell) for cell in row])
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
    if not rows:
        raise EmptyDataset(f"{path}: no data rows")
    data = np.asarray(rows, dtype=np.float64)
    feats, labels = data[:, :-1], data[:, -1]
    if task == "classification":
        labels = labels.astype(np.int64)
    return Dataset(feats, labels, task)


def load_bundled_diabetes() -> Dataset:
    """The classic 442-sample, 10-feature regression table shipped with the package."""
    ref = resources.files("fedkit").joinpath("data/diabetes.csv")
    with resources.as_file(ref) as path:
        return load_csv(path, task="regression")


def split_train_val(ds: Dataset, val_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Deterministic shuffled split; val gets round(n * val_fraction) rows."""
    if not 0.0 < val_fraction < 1.0:
        raise InfeasiblePartition(f"val_fraction {val_fraction} outside (0, 1)")
    n = len(ds)
    n_val = int(round(n * val_fraction))
    if n_val == 0 or n_val == n:
        raise InfeasiblePartition(f"val_fraction {val_fraction} leaves an empty split for n={n}")
    order = np.random.default_rng(seed).permutation(n)
    return ds.subset(np.sort(order[n_val:])), ds.subset(np.sort(order[:n_val]))


# ---------------------------------------------------------------------------
# partitioning


@dataclass(frozen=True)
class PartitionSpec:
    scheme: str  # iid | class_restricted | dirichlet
    n_clients: int
    seed: int = 0
    classes_range: tuple[int, int] = (1, 1)  # class_restricted: label-set size bounds
    alpha: float = 1.0  # dirichlet concentration

    def __post_init__(self):
        if self.n_clients < 1:
            raise InfeasiblePartition(f"n_clients must be positive, got {self.n_clients}")
        if self.scheme not in ("iid", "class_restricted", "dirichlet"):
            raise InfeasiblePartition(f"unknown partition scheme {self.scheme!r}")


def _split_evenly(idx: np.ndarray, n_parts: int) -> list[np.ndarray]:
    # sizes differ by at most one
    return [np.asarray(part, dtype=np.int64) for part in np.array_split(idx, n_parts)]


def partition_indices(labels: np.ndarray, spec: PartitionSpec) -> list[np.ndarray]:
    """Index arrays per client: pairwise disjoint, union covers every sample."""
    labels = np.asarray(labels)
    n = len(labels)
    rng = np.random.default_rng(spec.seed)
    if n < spec.n_clients:
        raise InfeasiblePartition(f"{n} samples cannot cover {spec.n_clients} clients")

    if spec.scheme == "iid":
        parts = _split_evenly(rng.permutation(n), spec.n_clients)
        return [np.sort(p) for p in parts]

    classes = np.unique(labels)
    k = len(classes)

    if spec.scheme == "dirichlet":
        buckets: list[list[np.ndarray]] = [[] for _ in range(spec.n_clients)]
        for c in classes:
            idx_c = rng.permutation(np.flatnonzero(labels == c))
            props = rng.dirichlet(np.full(spec.n_clients, spec.alpha))
            counts = _largest_remainder(len(idx_c), props)
            start = 0
            for i, cnt in enumerate(counts):
                buckets[i].append(idx_c[start : start + cnt])
                start += cnt
        return [np.sort(np.concatenate(b)) if b else np.zeros(0, np.int64) for b in buckets]

    # class_restricted
    lo, hi = spec.classes_range
    if not 1 <= lo <= hi <= k:
        raise InfeasiblePartition(f"classes_range {spec.classes_range} outside [1, {k}]")
    if spec.n_clients * hi < k:
        raise InfeasiblePartition(
            f"{spec.n_clients} clients with at most {hi} classes each cannot cover {k} classes"
        )
    for _ in range(1000):
        sizes = rng.integers(lo, hi + 1, spec.n_clients)
        label_sets = [rng.choice(k, size=s, replace=False) for s in sizes]
        covered = np.zeros(k, dtype=bool)
        for ls in label_sets:
            covered[ls] = True
        if covered.all():
            break
    else:
        raise InfeasiblePartition("could not draw label sets covering every class")
    owners: dict[int, list[int]] = {c: [] for c in range(k)}
    for client, ls in enumerate(label_sets):
        for c in ls:
            owners[c].append(client)
    buckets = [[] for _ in range(spec.n_clients)]
    for ci, c in enumerate(classes):
        idx_c = rng.permutation(np.flatnonzero(labels == c))
        for owner, chunk in zip(owners[ci], _split_evenly(idx_c, len(owners[ci]))):
            buckets[owner].append(chunk)
    out = []
    for b in buckets:
        merged = np.concatenate([x for x in b if len(x)]) if b else np.zeros(0, np.int64)
        out.append(np.sort(merged))
    return out


def _largest_remainder(total: int, props: np.ndarray) -> np.ndarray:
    """Integer allocation of ``total`` by proportions, remainders to largest fractions."""
    raw = props * total
    base = np.floor(raw).astype(np.int64)
    short = total - int(base.sum())
    if short:
        frac = raw - base
        for i in np.argsort(-frac, kind="stable")[:short]:
            base[i] += 1
    return base


def partition(ds: Dataset, spec: PartitionSpec) -> list[Dataset]:
    parts = partition_indices(ds.labels, spec)
    if any(len(p) == 0 for p in parts):
        raise InfeasiblePartition("a client received zero samples; adjust sizes or seed")
    return [ds.subset(p) for p in parts]


# ---------------------------------------------------------------------------
# dataset registry (config-facing)


def _build_blobs(kwargs: dict) -> Dataset:
    return make_blobs(**kwargs)


def _build_csv(kwargs: dict) -> Dataset:
    kw = dict(kwargs)
    path = kw.pop("path", None)
    if path is None:
        raise ParseError("csv dataset needs a 'path' kwarg")
    return load_csv(path, task=kw.pop("task", "regression"))


def _build_diabetes(kwargs: dict) -> Dataset:
    if kwargs:
        raise ParseError(f"diabetes dataset takes no kwargs, got {sorted(kwargs)}")
    return load_bundled_diabetes()


DATASETS = {
    "blobs": _build_blobs,
    "csv": _build_csv,
    "diabetes": _build_diabetes,
}


def build_dataset(name: str, kwargs: Optional[dict] = None) -> Dataset:
    """Instantiate a registered dataset, honoring split/partition plumbing.

    Recognized meta kwargs (handled here, not passed to the builder):

    - ``val_fraction`` + ``role`` ("train" | "val"): deterministic holdout split
    - ``split_seed``: seed for that split (default 0)
    - ``partition``: mapping with ``scheme``, ``n_clients``, ``index`` and
      scheme-specific fields; selects one shard of the train split
    """
    from .errors import UnknownStrategyName

    if name not in DATASETS:
        raise UnknownStrategyName(f"unknown dataset {name!r}; known: {sorted(DATASETS)}")
    kw = dict(kwargs or {})
    val_fraction = kw.pop("val_fraction", None)
    role = kw.pop("role", "train")
    split_seed = kw.pop("split_seed", 0)
    part_cfg = kw.pop("partition", None)
    ds = DATASETS[name](kw)
    if val_fraction is not None:
        train, val = split_train_val(ds, float(val_fraction), int(split_seed))
        ds = val if role == "val" else train
    elif role == "val":
        raise ParseError("role 'val' requires val_fraction")
    if part_cfg is not None:
        if role == "val":
            raise ParseError("partition applies to the train split only")
        pc = dict(part_cfg)
        index = pc.pop("index")
        pspec = PartitionSpec(
            scheme=pc.pop("scheme"),
            n_clients=int(pc.pop("n_clients")),
            seed=int(pc.pop("seed", 0)),
            classes_range=tuple(pc.pop("classes_range", (1, 1))),
            alpha=float(pc.pop("alpha", 1.0)),
        )
        if pc:
            raise ParseError(f"unknown partition keys {sorted(pc)}")
        shards = partition(ds, pspec)
        if not 0 <= int(index) < len(shards):
            raise InfeasiblePartition(f"partition index {index} outside 0..{len(shards) - 1}")
        ds = shards[int(index)]
    return ds

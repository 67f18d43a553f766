"""Small MLP encoder, projection head, probability heads, and SGD.

The encoder/projection pair is the desk-scale model the trainer adapts;
the probability heads map embeddings to per-task class distributions.
Two head variants are provided: a parameter-free prototype softmax with
leave-one-out prototypes (default) and a frozen, seeded linear head.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .rng import stream
from .tensor import DiffRecord, ShapeMismatchError, Tensor, TensorError, apply, as_tensor

SNAPSHOT_TAGS = ("current", "adapted", "target")

PiFn = Callable[[Tensor, Sequence[int]], Tensor]


class ModelError(Exception):
    pass


class GradientKeyError(ModelError):
    """A gradient is missing for one of the parameters."""


@dataclass(frozen=True)
class EncoderConfig:
    input_dim: int
    hidden_dims: tuple[int, ...] = (64, 64)
    embed_dim: int = 32
    proj_dim: int = 16

    def __post_init__(self):
        dims = (self.input_dim, *self.hidden_dims, self.embed_dim, self.proj_dim)
        if any(int(d) < 1 for d in dims):
            raise ModelError(f"all encoder dimensions must be >= 1, got {dims}")
        object.__setattr__(self, "hidden_dims", tuple(int(d) for d in self.hidden_dims))


class ParameterSet:
    """Ordered named parameters; iteration order is stable across clones."""

    def __init__(self, items: Mapping[str, Tensor] | Iterable[tuple[str, object]]):
        pairs = items.items() if isinstance(items, Mapping) else items
        self._values: dict[str, Tensor] = {}
        for name, value in pairs:
            if name in self._values:
                raise ModelError(f"duplicate parameter name: {name!r}")
            self._values[name] = as_tensor(value)

    def names(self) -> list[str]:
        return list(self._values)

    def items(self):
        return self._values.items()

    def __getitem__(self, name: str) -> Tensor:
        return self._values[name]

    def __contains__(self, name: str) -> bool:
        return name in self._values

    def __iter__(self):
        return iter(self._values)

    def __len__(self):
        return len(self._values)

    def clone(self) -> "ParameterSet":
        return ParameterSet((n, t.data.copy()) for n, t in self._values.items())

    def bind(self, record: DiffRecord) -> "BoundParams":
        """Register every parameter as a tracked leaf on ``record``."""
        return BoundParams(record, {n: record.parameter(t.data) for n, t in self._values.items()})

    def equals(self, other: "ParameterSet") -> bool:
        if self.names() != other.names():
            return False
        return all(np.array_equal(self[n].data, other[n].data) for n in self)

    def allclose(self, other: "ParameterSet", rtol=1e-12, atol=1e-12) -> bool:
        if self.names() != other.names():
            return False
        return all(np.allclose(self[n].data, other[n].data, rtol=rtol, atol=atol) for n in self)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([t.data.ravel() for t in self._values.values()]) \
            if self._values else np.zeros(0)

    def from_vector(self, vec: np.ndarray) -> "ParameterSet":
        """A new set with this set's names/shapes and values from ``vec``."""
        out = []
        offset = 0
        for name, t in self._values.items():
            n = t.size
            out.append((name, vec[offset:offset + n].reshape(t.shape).copy()))
            offset += n
        if offset != vec.size:
            raise ShapeMismatchError(f"from_vector: expected {offset} values, got {vec.size}")
        return ParameterSet(out)


class BoundParams(Mapping):
    """Tracked leaf tensors for one forward/backward pass."""

    def __init__(self, record: DiffRecord, items: dict[str, Tensor]):
        self.record = record
        self._items = items

    def __getitem__(self, name):
        return self._items[name]

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def gradients(self, grad_map: Mapping[int, Tensor]) -> dict[str, np.ndarray]:
        return {name: grad_map[t.node].data for name, t in self._items.items()}

    def detached(self) -> ParameterSet:
        return ParameterSet((n, t.data.copy()) for n, t in self._items.items())


@dataclass(frozen=True)
class Snapshot:
    """Immutable deep copy of a parameter set at a point in the pipeline."""
    params: ParameterSet
    tag: str

    def __post_init__(self):
        if self.tag not in SNAPSHOT_TAGS:
            raise ModelError(f"unknown snapshot tag {self.tag!r}; expected one of {SNAPSHOT_TAGS}")
        object.__setattr__(self, "params", self.params.clone())


@dataclass
class OptimState:
    """SGD state: per-parameter velocities plus momentum/weight-decay."""
    momentum: float = 0.0
    weight_decay: float = 0.0
    velocities: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ModelError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0.0:
            raise ModelError(f"weight_decay must be >= 0, got {self.weight_decay}")


def init_encoder(config: EncoderConfig, seed: int) -> ParameterSet:
    """Seeded init: weights ~ U(-1, 1)/sqrt(fan_in), biases zero."""
    dims = (config.input_dim, *config.hidden_dims, config.embed_dim)
    items: list[tuple[str, np.ndarray]] = []
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        rng = stream(seed, "init", i)
        w = rng.uniform(-1.0, 1.0, size=(fan_in, fan_out)) / np.sqrt(fan_in)
        items.append((f"enc{i}.w", w))
        items.append((f"enc{i}.b", np.zeros(fan_out)))
    rng = stream(seed, "init", "proj")
    w = rng.uniform(-1.0, 1.0, size=(config.embed_dim, config.proj_dim)) / np.sqrt(config.embed_dim)
    items.append(("proj.w", w))
    items.append(("proj.b", np.zeros(config.proj_dim)))
    return ParameterSet(items)


def _encoder_layers(params: Mapping[str, Tensor]) -> int:
    count = 0
    while f"enc{count}.w" in params:
        count += 1
    if count == 0:
        raise ModelError("parameter set has no encoder layers (enc0.w missing)")
    return count


def encode(params: Mapping[str, Tensor], batch) -> Tensor:
    """MLP forward: alternating affine/relu, final affine to embed_dim."""
    x = as_tensor(batch)
    layers = _encoder_layers(params)
    for i in range(layers):
        x = x @ params[f"enc{i}.w"] + params[f"enc{i}.b"]
        if i < layers - 1:
            x = x.relu()
    return x


def project(params: Mapping[str, Tensor], embeddings: Tensor) -> Tensor:
    """Affine projection head followed by row normalization."""
    z = as_tensor(embeddings) @ params["proj.w"] + params["proj.b"]
    return apply("l2_normalize_rows", [z])


def _class_counts(labels: Sequence[int]) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise ModelError("labels must be non-empty")
    n_classes = int(labels.max()) + 1
    counts = np.bincount(labels, minlength=n_classes)
    if np.any(counts == 0):
        missing = np.flatnonzero(counts == 0).tolist()
        raise ModelError(f"every class id must appear at least once; missing {missing}")
    return counts


def pi_prototype(embeddings: Tensor, labels: Sequence[int], tau: float) -> Tensor:
    """Prototype-softmax class distributions with leave-one-out prototypes.

    Prototypes are means of row-normalized embeddings per class,
    re-normalized. For a sample's own class the prototype excludes the
    sample itself whenever that class has >= 2 members; a singleton class
    keeps its only member. Rows are softmax over cosine/tau; differentiable
    through both the sample embeddings and the prototypes.
    """
    if tau <= 0.0:
        raise ModelError(f"temperature must be > 0, got {tau}")
    emb = as_tensor(embeddings)
    labels_arr = np.asarray(labels, dtype=np.int64)
    counts = _class_counts(labels_arr)
    n_classes = counts.size
    n_samples = emb.shape[0]
    if labels_arr.size != n_samples:
        raise ShapeMismatchError(
            f"pi_prototype: {n_samples} embeddings but {labels_arr.size} labels")

    unit = apply("l2_normalize_rows", [emb])

    class_mean = np.zeros((n_classes, n_samples))
    class_mean[labels_arr, np.arange(n_samples)] = 1.0 / counts[labels_arr]
    prototypes = apply("l2_normalize_rows", [as_tensor(class_mean) @ unit])
    cosines = unit @ prototypes.transposed()  # [S x N]

    loo_mix = np.zeros((n_samples, n_samples))
    for s in range(n_samples):
        members = np.flatnonzero(labels_arr == labels_arr[s])
        if members.size >= 2:
            others = members[members != s]
            loo_mix[s, others] = 1.0 / others.size
        else:
            loo_mix[s, s] = 1.0
    own_proto = apply("l2_normalize_rows", [as_tensor(loo_mix) @ unit])
    own_cos = apply("sum", [unit * own_proto], axis=1, keepdims=True)  # [S x 1]

    one_hot = np.zeros((n_samples, n_classes))
    one_hot[np.arange(n_samples), labels_arr] = 1.0
    logits = cosines * as_tensor(1.0 - one_hot) + own_cos * as_tensor(one_hot)
    return apply("softmax_rows", [logits * (1.0 / tau)])


def make_linear_head(embed_dim: int, n_classes: int, seed: int) -> ParameterSet:
    """Frozen affine head embed_dim -> n_classes, seeded deterministically."""
    rng = stream(seed, "pi_head")
    w = rng.uniform(-1.0, 1.0, size=(embed_dim, n_classes)) / np.sqrt(embed_dim)
    return ParameterSet([("pi.w", w), ("pi.b", np.zeros(n_classes))])


def pi_linear(head_params: Mapping[str, Tensor], embeddings: Tensor) -> Tensor:
    """Softmax of a frozen affine map of the embeddings."""
    emb = as_tensor(embeddings)
    logits = emb @ head_params["pi.w"].detached() + head_params["pi.b"].detached()
    return apply("softmax_rows", [logits])


@dataclass(frozen=True)
class PrototypePi:
    tau: float = 0.1

    def __post_init__(self):
        if self.tau <= 0.0:
            raise ModelError(f"temperature must be > 0, got {self.tau}")


@dataclass(frozen=True)
class LinearPi:
    seed: int = 0


PiKind = PrototypePi | LinearPi


def make_pi(pi: PiKind, embed_dim: int, n_classes: int, task_key: tuple[int, ...] = ()) -> PiFn:
    """Bind a head config to one task, returning (embeddings, labels) -> distributions.

    Linear heads are seeded per task from ``(pi.seed, *task_key)`` and
    frozen; the prototype head is parameter-free.
    """
    if isinstance(pi, PrototypePi):
        tau = pi.tau
        return lambda emb, labels: pi_prototype(emb, labels, tau)
    head_seed_rng = stream(pi.seed, "pi_head_seed", *task_key)
    head = make_linear_head(embed_dim, n_classes, int(head_seed_rng.integers(2**63)))
    return lambda emb, labels: pi_linear(head, emb)


def sgd_step(params: ParameterSet, grads: Mapping[str, object], lr: float,
             state: OptimState) -> ParameterSet:
    """v <- momentum*v + (grad + wd*param); param <- param - lr*v.

    With momentum=0 and weight_decay=0 this is the plain gradient step.
    Velocities in ``state`` are updated in place; a new ParameterSet is
    returned.
    """
    if lr < 0.0:
        raise ModelError(f"learning rate must be >= 0, got {lr}")
    out = []
    for name, p in params.items():
        if name not in grads:
            raise GradientKeyError(f"no gradient for parameter {name!r}")
        g = grads[name]
        g = g.data if isinstance(g, Tensor) else np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeMismatchError(
                f"gradient shape {g.shape} does not match parameter {name!r} {p.shape}")
        v = state.velocities.get(name)
        if v is None:
            v = np.zeros(p.shape)
        v = state.momentum * v + (g + state.weight_decay * p.data)
        state.velocities[name] = v
        out.append((name, p.data - lr * v))
    return ParameterSet(out)


def clone_snapshot(params: ParameterSet, tag: str) -> Snapshot:
    """Deep-copied snapshot; later mutation of the source is invisible."""
    return Snapshot(params=params, tag=tag)

"""Block-structured MLP classifiers, SGD with momentum, teacher pretraining."""

from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Iterable, NamedTuple

import numpy as np

from . import tensor as T
from .errors import ContractError, DataError, ShapeError
from .tensor import Tape, Tensor

if TYPE_CHECKING:
    from .data import Dataset


@dataclass(frozen=True)
class BlockSpec:
    """Layer widths per block, e.g. ``((64,), (64,), (32,))``, plus a C-way linear head."""

    input_dim: int
    blocks: tuple[tuple[int, ...], ...]
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(tuple(int(w) for w in b) for b in self.blocks))
        self.validate()

    def validate(self) -> None:
        if self.input_dim < 1:
            raise ContractError(f"input_dim must be positive, got {self.input_dim}")
        if self.num_classes < 1:
            raise ContractError(f"num_classes must be positive, got {self.num_classes}")
        if not self.blocks:
            raise ContractError("a network needs at least one block")
        for j, block in enumerate(self.blocks):
            if not block:
                raise ContractError(f"block {j} has no layers")
            if any(w < 1 for w in block):
                raise ContractError(f"block {j} has a non-positive width: {block}")

    @property
    def num_blocks(self) -> int:
        return len(self.blocks)

    @property
    def block_widths(self) -> list[int]:
        """Width of each block's last layer (the alignment point)."""
        return [b[-1] for b in self.blocks]

    def layer_shapes(self) -> list[tuple[int, int]]:
        shapes = []
        fan_in = self.input_dim
        for block in self.blocks:
            for w in block:
                shapes.append((fan_in, w))
                fan_in = w
        shapes.append((fan_in, self.num_classes))
        return shapes

    def to_dict(self) -> dict:
        return {"input_dim": self.input_dim, "blocks": [list(b) for b in self.blocks],
                "num_classes": self.num_classes}

    @classmethod
    def from_dict(cls, d: dict) -> "BlockSpec":
        return cls(int(d["input_dim"]), tuple(tuple(b) for b in d["blocks"]), int(d["num_classes"]))

    @classmethod
    def parse(cls, text: str, input_dim: int, num_classes: int) -> "BlockSpec":
        """Parse ``"64,64/64/32"``: blocks split on ``/``, layers on ``,``."""
        try:
            blocks = tuple(tuple(int(w) for w in part.split(",")) for part in text.split("/"))
        except ValueError as exc:
            raise ContractError(f"bad block spec {text!r}: {exc}") from None
        return cls(input_dim, blocks, num_classes)


@dataclass
class NetworkParams:
    """Dense layers grouped by block; ``head`` maps the last block to logits."""

    blocks: list[list[tuple[Tensor, Tensor]]]
    head: tuple[Tensor, Tensor]

    def flat(self) -> list[Tensor]:
        out = []
        for block in self.blocks:
            for w, b in block:
                out += [w, b]
        out += list(self.head)
        return out

    def named(self) -> list[tuple[str, Tensor]]:
        names = []
        for j, block in enumerate(self.blocks):
            for i, (w, b) in enumerate(block):
                names += [(f"block{j}.layer{i}.weight", w), (f"block{j}.layer{i}.bias", b)]
        names += [("head.weight", self.head[0]), ("head.bias", self.head[1])]
        return names

    def copy(self) -> "NetworkParams":
        return copy.deepcopy(self)

    def frozen(self) -> "NetworkParams":
        """Copy whose tensors never record gradients."""
        p = self.copy()
        for t in p.flat():
            t.requires_grad = False
        return p


def params_hash(params: NetworkParams | Iterable[Tensor]) -> str:
    tensors = params.flat() if isinstance(params, NetworkParams) else list(params)
    h = hashlib.sha256()
    for t in tensors:
        h.update(np.ascontiguousarray(t.values, dtype="<f8").tobytes())
    return h.hexdigest()


def dense_init(fan_in: int, fan_out: int, rng: np.random.Generator) -> tuple[Tensor, Tensor]:
    w = rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)
    return Tensor(w, requires_grad=True), Tensor(np.zeros(fan_out), requires_grad=True)


def init_network(spec: BlockSpec, seed: int) -> NetworkParams:
    spec.validate()
    rng = np.random.default_rng(seed)
    blocks = []
    fan_in = spec.input_dim
    for block in spec.blocks:
        layers = []
        for w in block:
            layers.append(dense_init(fan_in, w, rng))
            fan_in = w
        blocks.append(layers)
    return NetworkParams(blocks, dense_init(fan_in, spec.num_classes, rng))


class ForwardOutput(NamedTuple):
    block_outputs: list[Tensor]
    logits: Tensor
    probs: Tensor


def forward_blocks(params: NetworkParams, spec: BlockSpec, batch) -> ForwardOutput:
    x = T.as_tensor(batch)
    if x.values.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ShapeError(f"batch shape {x.shape} does not match input_dim {spec.input_dim}")
    outputs = []
    h = x
    for layers in params.blocks:
        for w, b in layers:
            h = T.relu(T.add_bias(T.matmul(h, w), b))
        outputs.append(h)
    logits = T.add_bias(T.matmul(h, params.head[0]), params.head[1])
    return ForwardOutput(outputs, logits, T.softmax(logits))


@dataclass
class BlockNetwork:
    spec: BlockSpec
    params: NetworkParams

    @classmethod
    def init(cls, spec: BlockSpec, seed: int) -> "BlockNetwork":
        return cls(spec, init_network(spec, seed))

    def forward(self, batch) -> ForwardOutput:
        return forward_blocks(self.params, self.spec, batch)

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        return forward_blocks(self.params, self.spec, x).probs.values

    def copy(self) -> "BlockNetwork":
        return BlockNetwork(self.spec, self.params.copy())

    def hash(self) -> str:
        return params_hash(self.params)


@dataclass
class TeacherModel:
    network: BlockNetwork
    val_accuracy: float
    frozen: bool = True
    provenance: dict = field(default_factory=dict)

    @property
    def spec(self) -> BlockSpec:
        return self.network.spec

    @property
    def params(self) -> NetworkParams:
        return self.network.params

    def hash(self) -> str:
        return self.network.hash()


@dataclass(frozen=True)
class TrainHyper:
    lr: float = 0.05
    momentum: float = 0.9
    batch_size: int = 64
    epochs: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ContractError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.lr > 0:
            raise ContractError(f"learning rate must be > 0, got {self.lr}")
        if self.epochs < 0:
            raise ContractError(f"epochs must be >= 0, got {self.epochs}")


class SGD:
    """SGD with heavy-ball momentum: ``v = mu v + g; p -= lr v``."""

    def __init__(self, params: list[Tensor], lr: float, momentum: float = 0.9):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.values) for p in params]

    def step(self) -> None:
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            v *= self.momentum
            v += p.grad
            p.values -= self.lr * v

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    out = np.zeros((len(labels), num_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def cross_entropy(probs: Tensor, targets: np.ndarray) -> Tensor:
    """Mean over rows of -sum_c t_c log p_c."""
    return T.scale(T.total(T.mul(Tensor(targets), T.log(probs))), -1.0 / probs.shape[0])


def minibatches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def check_labels(labels: np.ndarray, num_classes: int) -> None:
    bad = np.flatnonzero((labels < 0) | (labels >= num_classes))
    if bad.size:
        raise DataError(f"label {labels[bad[0]]} at row {bad[0]} is outside [0, {num_classes})")


def accuracy(model, dataset: "Dataset") -> float:
    return 1.0 - evaluate(model, dataset, 1)


def pretrain_teacher(spec: BlockSpec, train: "Dataset", val: "Dataset", hyper: TrainHyper,
                     history: list | None = None) -> TeacherModel:
    """Fit ``spec`` to one-hot labels; return the best-validation snapshot, frozen.

    Validation accuracy is measured at initialization and after every epoch;
    ties keep the earlier snapshot. Per-epoch mean training loss is appended to
    ``history`` when given.
    """
    check_labels(train.labels, spec.num_classes)
    check_labels(val.labels, spec.num_classes)
    net = BlockNetwork.init(spec, hyper.seed)
    rng = np.random.default_rng([hyper.seed, 1])
    opt = SGD(net.params.flat(), hyper.lr, hyper.momentum)
    targets = one_hot(train.labels, spec.num_classes)

    best_acc = accuracy(net, val)
    best = net.params.copy()
    for _ in range(hyper.epochs):
        losses = []
        for idx in minibatches(len(train), hyper.batch_size, rng):
            with Tape() as tape:
                out = net.forward(train.features[idx])
                loss = cross_entropy(out.probs, targets[idx])
                T.backward(tape, loss)
            opt.step()
            losses.append(loss.item() * len(idx))
        if history is not None:
            history.append(sum(losses) / len(train))
        acc = accuracy(net, val)
        if acc > best_acc:
            best_acc, best = acc, net.params.copy()
    final = BlockNetwork(spec, best.frozen())
    return TeacherModel(final, best_acc, frozen=True, provenance={"spec": spec.to_dict(), "seed": hyper.seed})


def _probs_of(model, x: np.ndarray) -> np.ndarray:
    if isinstance(model, TeacherModel):
        model = model.network
    if isinstance(model, BlockNetwork):
        return model.predict_proba(x)
    return np.asarray(model(x), dtype=np.float64)


def top_k_error(probs: np.ndarray, labels: np.ndarray, k: int) -> float:
    c = probs.shape[1]
    if not 1 <= k <= c:
        raise ContractError(f"k must lie in [1, {c}], got {k}")
    # stable sort on -p keeps the lowest class index first among ties
    ranked = np.argsort(-probs, axis=1, kind="stable")[:, :k]
    hit = (ranked == labels[:, None]).any(axis=1)
    return float(1.0 - hit.mean())


def evaluate(model, dataset: "Dataset", k: int = 1) -> float:
    """Top-k error rate of ``model`` (network, teacher, or probs callable) on ``dataset``."""
    return top_k_error(_probs_of(model, dataset.features), dataset.labels, k)

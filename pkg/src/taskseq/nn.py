"""Dense multi-head networks with hand-written backprop and Adam.

Everything here is float64. A network is a shared trunk of rectified dense
layers followed by one private 2-logit head per task.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class DivergenceError(RuntimeError):
    """Raised when training produces non-finite values."""


@dataclass
class ParamBlock:
    value: np.ndarray
    grad: np.ndarray = None
    adam_m: np.ndarray = None
    adam_v: np.ndarray = None
    step_count: int = 0

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=np.float64)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.adam_m is None:
            self.adam_m = np.zeros_like(self.value)
        if self.adam_v is None:
            self.adam_v = np.zeros_like(self.value)

    def reset_optimizer(self):
        self.adam_m[...] = 0.0
        self.adam_v[...] = 0.0
        self.step_count = 0

    def copy(self) -> "ParamBlock":
        return ParamBlock(self.value.copy(), self.grad.copy(), self.adam_m.copy(),
                          self.adam_v.copy(), self.step_count)


@dataclass
class Dense:
    weight: ParamBlock
    bias: ParamBlock

    @property
    def blocks(self):
        return (self.weight, self.bias)

    def copy(self) -> "Dense":
        return Dense(self.weight.copy(), self.bias.copy())


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        for name in ("beta1", "beta2"):
            val = getattr(self, name)
            if not 0.0 < val < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {val}")
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")


def glorot_uniform(fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def new_dense(fan_in: int, fan_out: int, rng: np.random.Generator) -> Dense:
    return Dense(ParamBlock(glorot_uniform(fan_in, fan_out, rng)), ParamBlock(np.zeros(fan_out)))


@dataclass
class MultiHeadNet:
    """Shared rectified trunk plus named output heads.

    ``layer_sizes`` lists the input width followed by every hidden width,
    e.g. ``[784, 256, 256]``. Heads map the last hidden width to
    ``n_outputs`` logits.
    """

    layer_sizes: list[int]
    trunk: list[Dense]
    heads: dict[str, Dense] = field(default_factory=dict)
    n_outputs: int = 2

    @classmethod
    def create(cls, layer_sizes, rng: np.random.Generator, n_outputs: int = 2) -> "MultiHeadNet":
        sizes = [int(s) for s in layer_sizes]
        if len(sizes) < 2 or min(sizes) <= 0:
            raise ValueError(f"need an input width and at least one hidden width, got {sizes}")
        trunk = [new_dense(a, b, rng) for a, b in zip(sizes[:-1], sizes[1:])]
        return cls(sizes, trunk, {}, n_outputs)

    @property
    def feature_width(self) -> int:
        return self.layer_sizes[-1]

    def add_head(self, name: str, rng: np.random.Generator) -> Dense:
        if name in self.heads:
            raise ValueError(f"head {name!r} already exists")
        head = new_dense(self.feature_width, self.n_outputs, rng)
        self.heads[name] = head
        return head

    def trunk_blocks(self) -> list[ParamBlock]:
        return [blk for layer in self.trunk for blk in layer.blocks]

    def head_blocks(self, name: str) -> list[ParamBlock]:
        return list(self.heads[name].blocks)

    def all_blocks(self) -> list[ParamBlock]:
        blocks = self.trunk_blocks()
        for name in self.heads:
            blocks.extend(self.head_blocks(name))
        return blocks

    def copy(self) -> "MultiHeadNet":
        return MultiHeadNet(list(self.layer_sizes), [l.copy() for l in self.trunk],
                            {k: h.copy() for k, h in self.heads.items()}, self.n_outputs)

    def check(self):
        """Validate shape compatibility and finiteness."""
        for i, layer in enumerate(self.trunk):
            expect = (self.layer_sizes[i], self.layer_sizes[i + 1])
            if layer.weight.value.shape != expect or layer.bias.value.shape != expect[1:]:
                raise ValueError(f"trunk layer {i} has shape {layer.weight.value.shape}, expected {expect}")
        for name, head in self.heads.items():
            if head.weight.value.shape != (self.feature_width, self.n_outputs):
                raise ValueError(f"head {name!r} does not match trunk width {self.feature_width}")
        for blk in self.all_blocks():
            if not np.all(np.isfinite(blk.value)):
                raise DivergenceError("non-finite parameter value")


def relu(x):
    return np.maximum(x, 0.0)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def trunk_forward(trunk: list[Dense], inputs: np.ndarray) -> list[np.ndarray]:
    """Return the list of activations ``[x, h1, ..., hL]``."""
    acts = [inputs]
    h = inputs
    for layer in trunk:
        h = relu(h @ layer.weight.value + layer.bias.value)
        acts.append(h)
    return acts


def _check_inputs(net: MultiHeadNet, inputs, head: str) -> np.ndarray:
    if head not in net.heads:
        raise KeyError(f"unknown head {head!r}")
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != net.layer_sizes[0]:
        raise ValueError(f"input width {x.shape[-1]} does not match network input {net.layer_sizes[0]}")
    return x


def dense_forward(net: MultiHeadNet, inputs, head: str, return_activations: bool = False):
    """Logits of ``head`` for a batch of input rows."""
    x = _check_inputs(net, inputs, head)
    acts = trunk_forward(net.trunk, x)
    h = net.heads[head]
    logits = acts[-1] @ h.weight.value + h.bias.value
    if return_activations:
        return logits, acts
    return logits


def _check_labels(labels, n_outputs: int) -> np.ndarray:
    y = np.asarray(labels)
    if y.size == 0:
        raise ValueError("empty batch")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(y == np.round(y)):
            raise ValueError("labels must be integers")
        y = y.astype(np.int64)
    if y.min() < 0 or y.max() >= n_outputs:
        raise ValueError(f"labels must lie in [0, {n_outputs})")
    return y


def loss_and_backprop(net: MultiHeadNet, inputs, labels, head: str) -> tuple[float, list[np.ndarray]]:
    """Mean softmax cross-entropy and its gradient.

    Gradients are written into the ``grad`` field of every block: trunk and
    ``head`` receive the real gradient, every other head is zeroed. The
    returned list holds the trunk gradients followed by the head gradients.
    """
    y = _check_labels(labels, net.n_outputs)
    logits, acts = dense_forward(net, inputs, head, return_activations=True)
    if logits.shape[0] != y.shape[0]:
        raise ValueError("inputs and labels differ in length")
    n = y.shape[0]
    logp = log_softmax(logits)
    loss = -float(logp[np.arange(n), y].mean())
    if not np.isfinite(loss):
        raise DivergenceError("non-finite loss")

    dlogits = np.exp(logp)
    dlogits[np.arange(n), y] -= 1.0
    dlogits /= n

    for name, other in net.heads.items():
        if name != head:
            other.weight.grad[...] = 0.0
            other.bias.grad[...] = 0.0
    hd = net.heads[head]
    hd.weight.grad[...] = acts[-1].T @ dlogits
    hd.bias.grad[...] = dlogits.sum(axis=0)
    delta = dlogits @ hd.weight.value.T
    for i in range(len(net.trunk) - 1, -1, -1):
        delta = delta * (acts[i + 1] > 0)
        layer = net.trunk[i]
        layer.weight.grad[...] = acts[i].T @ delta
        layer.bias.grad[...] = delta.sum(axis=0)
        if i > 0:
            delta = delta @ layer.weight.value.T
    grads = [blk.grad for blk in net.trunk_blocks()] + [hd.weight.grad, hd.bias.grad]
    return loss, grads


def adam_step(param: ParamBlock, config: OptimizerConfig = OptimizerConfig()) -> ParamBlock:
    """One bias-corrected Adam update of ``param`` in place."""
    g = param.grad
    if not np.all(np.isfinite(g)):
        raise DivergenceError("non-finite gradient")
    b1, b2 = config.beta1, config.beta2
    param.step_count += 1
    t = param.step_count
    param.adam_m *= b1
    param.adam_m += (1.0 - b1) * g
    param.adam_v *= b2
    param.adam_v += (1.0 - b2) * g * g
    m_hat = param.adam_m / (1.0 - b1 ** t)
    v_hat = param.adam_v / (1.0 - b2 ** t)
    param.value -= config.learning_rate * m_hat / (np.sqrt(v_hat) + config.epsilon)
    if not np.all(np.isfinite(param.value)):
        raise DivergenceError("non-finite parameter after Adam step")
    return param


def flatten(arrays) -> np.ndarray:
    return np.concatenate([np.ravel(a) for a in arrays]) if arrays else np.zeros(0)


def unflatten_into(flat: np.ndarray, arrays) -> None:
    pos = 0
    for a in arrays:
        a[...] = flat[pos:pos + a.size].reshape(a.shape)
        pos += a.size


def error_rate(logits_or_probs: np.ndarray, labels) -> float:
    pred = np.argmax(logits_or_probs, axis=-1)
    return float(np.mean(pred != np.asarray(labels)))


def iterate_minibatches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def train_epochs(net: MultiHeadNet, inputs, labels, head: str, epochs: int, batch_size: int,
                 rng: np.random.Generator, config: OptimizerConfig = OptimizerConfig(),
                 train_trunk: bool = True) -> float:
    """Plain minibatch Adam training; returns the last minibatch loss."""
    x = np.asarray(inputs, dtype=np.float64)
    y = np.asarray(labels)
    blocks = (net.trunk_blocks() if train_trunk else []) + net.head_blocks(head)
    loss = float("nan")
    for _ in range(epochs):
        for idx in iterate_minibatches(len(y), batch_size, rng):
            loss, _ = loss_and_backprop(net, x[idx], y[idx], head)
            for blk in blocks:
                adam_step(blk, config)
    return loss

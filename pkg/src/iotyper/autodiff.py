"""Minimal reverse-mode automatic differentiation over dense float64
vectors and matrices.

Shapes are explicit, there is no broadcasting, and every primitive checks
its output for non-finite entries. One Tape records one forward pass;
gradients for shared nodes accumulate, which the sink fan-out relies on.
"""

from __future__ import annotations

import json

import numpy as np


class AutodiffError(Exception):
    """Shape mismatch, non-finite value or misuse of the tape."""


class Tensor:
    """A (rows, cols) float64 array; vectors are (n, 1)."""

    __slots__ = ("value", "requires_grad", "grad")

    def __init__(self, value, requires_grad: bool = False):
        arr = np.asarray(value, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(-1, 1)
        elif arr.ndim != 2:
            raise AutodiffError(f"tensors are 2-d, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise AutodiffError("non-finite entries in tensor")
        self.value = arr
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self):
        return self.value.shape

    def item(self) -> float:
        if self.value.size != 1:
            raise AutodiffError(f"item() on non-scalar of shape {self.shape}")
        return float(self.value[0, 0])


class Tape:
    """Topologically ordered record of one forward pass."""

    def __init__(self):
        self._entries = []

    def __len__(self):
        return len(self._entries)

    def append(self, entry) -> None:
        self._entries.append(entry)

    def entries(self):
        return self._entries


def _check(op: str, out: np.ndarray) -> np.ndarray:
    if not np.isfinite(out).all():
        raise AutodiffError(f"{op}: non-finite output")
    return out


def _wrap(tape: Tape, op: str, out_value: np.ndarray, backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.value = _check(op, out_value)
    out.requires_grad = False
    out.grad = None
    tape.append((out, backward_fn))
    return out


def matvec(tape: Tape, w: Tensor, x: Tensor) -> Tensor:
    rows, cols = w.shape
    if x.shape != (cols, 1):
        raise AutodiffError(f"matvec: W is {w.shape}, x is {x.shape}")
    value = w.value @ x.value

    def backward(g, acc):
        acc(w, g @ x.value.T)
        acc(x, w.value.T @ g)

    return _wrap(tape, "matvec", value, backward)


def add(tape: Tape, a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise AutodiffError(f"add: shapes {a.shape} vs {b.shape}")

    def backward(g, acc):
        acc(a, g)
        acc(b, g)

    return _wrap(tape, "add", a.value + b.value, backward)


def hadamard(tape: Tape, a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise AutodiffError(f"hadamard: shapes {a.shape} vs {b.shape}")

    def backward(g, acc):
        acc(a, g * b.value)
        acc(b, g * a.value)

    return _wrap(tape, "hadamard", a.value * b.value, backward)


def sigmoid(tape: Tape, x: Tensor) -> Tensor:
    # exp may overflow for very negative inputs; the limit value 0.0 is fine
    with np.errstate(over="ignore"):
        value = 1.0 / (1.0 + np.exp(-x.value))

    def backward(g, acc):
        acc(x, g * value * (1.0 - value))

    return _wrap(tape, "sigmoid", value, backward)


def tanh(tape: Tape, x: Tensor) -> Tensor:
    value = np.tanh(x.value)

    def backward(g, acc):
        acc(x, g * (1.0 - value * value))

    return _wrap(tape, "tanh", value, backward)


def relu(tape: Tape, x: Tensor) -> Tensor:
    # subgradient 1 at exactly 0, so a zero-initialized classifier head
    # still receives gradient on the first step
    mask = x.value >= 0.0

    def backward(g, acc):
        acc(x, g * mask)

    return _wrap(tape, "relu", np.where(mask, x.value, 0.0), backward)


def sum_list(tape: Tape, tensors) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise AutodiffError("sum_list: empty input")
    shape = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != shape:
            raise AutodiffError(f"sum_list: shapes {shape} vs {t.shape}")
    value = tensors[0].value.copy()
    for t in tensors[1:]:
        value += t.value

    def backward(g, acc):
        for t in tensors:
            acc(t, g)

    return _wrap(tape, "sum_list", value, backward)


def scale(tape: Tape, x: Tensor, factor: float) -> Tensor:
    def backward(g, acc):
        acc(x, g * factor)

    return _wrap(tape, "scale", x.value * factor, backward)


def embed_lookup(tape: Tape, table: Tensor, index: int) -> Tensor:
    rows, dim = table.shape
    if not 0 <= index < rows:
        raise AutodiffError(f"embed_lookup: index {index} out of {rows} rows")
    value = table.value[index].reshape(dim, 1).copy()

    def backward(g, acc):
        full = np.zeros_like(table.value)
        full[index, :] = g[:, 0]
        acc(table, full)

    return _wrap(tape, "embed_lookup", value, backward)


def softmax_cross_entropy(tape: Tape, logits: Tensor, class_index: int) -> Tensor:
    n, one = logits.shape
    if one != 1:
        raise AutodiffError(f"softmax_cross_entropy: logits shape {logits.shape}")
    if not 0 <= class_index < n:
        raise AutodiffError(f"softmax_cross_entropy: class {class_index} out of {n}")
    shifted = logits.value - logits.value.max()
    exp = np.exp(shifted)
    probs = exp / exp.sum()
    # log(0) -> inf is caught by the non-finite output check below
    with np.errstate(divide="ignore"):
        value = np.array([[-np.log(probs[class_index, 0])]])

    def backward(g, acc):
        d = probs.copy()
        d[class_index, 0] -= 1.0
        acc(logits, g[0, 0] * d)

    return _wrap(tape, "softmax_cross_entropy", value, backward)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Plain (untaped) softmax, for reporting probabilities."""
    shifted = logits - logits.max()
    exp = np.exp(shifted)
    return exp / exp.sum()


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate .grad for every requires_grad tensor reachable from loss.

    Intermediate gradients live in a local map and are dropped on return.
    """
    if loss.shape != (1, 1):
        raise AutodiffError(f"backward: loss must be scalar, got {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones((1, 1))}
    holders: dict[int, Tensor] = {id(loss): loss}

    def acc(tensor: Tensor, g: np.ndarray):
        key = id(tensor)
        if key in grads:
            grads[key] += g
        else:
            grads[key] = g.copy()
            holders[key] = tensor

    for out, backward_fn in reversed(tape.entries()):
        g = grads.get(id(out))
        if g is None:
            continue
        backward_fn(g, acc)

    for key, tensor in holders.items():
        if tensor.requires_grad:
            if tensor.grad is None:
                tensor.grad = grads[key].copy()
            else:
                tensor.grad += grads[key]


class ParameterStore:
    """Named map of trainable tensors plus their gradient buffers."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        tensor = Tensor(value, requires_grad=True)
        self._params[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params.keys())

    def items(self):
        return list(self._params.items())

    def zero_grads(self) -> None:
        for tensor in self._params.values():
            tensor.grad = None

    def n_entries(self) -> int:
        return sum(t.value.size for t in self._params.values())

    def to_json_dict(self) -> dict:
        return {
            "format_version": 1,
            "params": {
                name: {"shape": list(t.shape), "data": t.value.ravel().tolist()}
                for name, t in self._params.items()
            },
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json_dict())

    @classmethod
    def from_json_dict(cls, doc: dict) -> "ParameterStore":
        if doc.get("format_version") != 1:
            raise ValueError(f"unsupported format_version {doc.get('format_version')!r}")
        store = cls()
        for name, entry in doc["params"].items():
            rows, cols = entry["shape"]
            arr = np.array(entry["data"], dtype=np.float64).reshape(rows, cols)
            store.add(name, arr)
        return store

    @classmethod
    def loads(cls, text: str) -> "ParameterStore":
        return cls.from_json_dict(json.loads(text))


def grad_check(forward_fn, params: ParameterStore, eps: float = 1e-5) -> float:
    """Compare tape gradients against central finite differences.

    `forward_fn(tape)` must rebuild the loss from the current parameter
    values. Returns the worst relative error over every parameter entry,
    with denominator max(|analytic|, |numeric|, 1e-8).
    """
    if not 0.0 < eps <= 1e-3:
        raise ValueError(f"eps must be in (0, 1e-3], got {eps}")

    tape = Tape()
    loss = forward_fn(tape)
    params.zero_grads()
    backward(tape, loss)

    def loss_value() -> float:
        value = forward_fn(Tape()).item()
        if not np.isfinite(value):
            raise AutodiffError("non-finite loss during perturbation")
        return value

    worst = 0.0
    for name, tensor in params.items():
        analytic = tensor.grad if tensor.grad is not None \
            else np.zeros_like(tensor.value)
        flat = tensor.value.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = loss_value()
            flat[i] = orig - eps
            f_minus = loss_value()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = analytic.ravel()[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst

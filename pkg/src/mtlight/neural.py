"""Small dense-tensor toolkit: reverse-mode autodiff over numpy arrays,
linear/GRU layers, MSE loss, RMSprop and Adam, finite-difference checks
and checkpoint files.

Everything is float64. Layers accept a leading "stack" dimension on their
weights so that several independent networks (one per intersection) can be
evaluated in a single batched matmul.
"""
from __future__ import annotations

import json
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

_GRAD_ENABLED = True


class NonFiniteError(FloatingPointError):
    """Raised when a NaN or Inf shows up where finite values are required."""


@contextmanager
def no_grad():
    """Disable graph recording inside the block (used for acting)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{label})"

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    # -- graph construction ------------------------------------------------
    @staticmethod
    def _make(data: np.ndarray, parents: tuple, backward) -> "Tensor":
        out = Tensor(data)
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        return out

    def __add__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self, other

        def back(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g, b.shape))

        return Tensor._make(a.data + b.data, (a, b), back)

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        a = self

        def back(g):
            a._accumulate(-g)

        return Tensor._make(-a.data, (a,), back)

    def __sub__(self, other) -> "Tensor":
        return self + (-as_tensor(other))

    def __rsub__(self, other) -> "Tensor":
        return as_tensor(other) + (-self)

    def __mul__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self, other

        def back(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g * b.data, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g * a.data, b.shape))

        return Tensor._make(a.data * b.data, (a, b), back)

    __rmul__ = __mul__

    def __matmul__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self, other

        def back(g):
            if a.requires_grad:
                if b.data.ndim == 1:
                    ga = np.multiply.outer(g, b.data)
                else:
                    ga = g @ np.swapaxes(b.data, -1, -2)
                a._accumulate(_unbroadcast(ga, a.shape))
            if b.requires_grad:
                if a.data.ndim == 1:
                    gb = np.multiply.outer(a.data, g)
                else:
                    gb = np.swapaxes(a.data, -1, -2) @ g
                b._accumulate(_unbroadcast(gb, b.shape))

        return Tensor._make(a.data @ b.data, (a, b), back)

    def sum(self, axis=None) -> "Tensor":
        a = self

        def back(g):
            if axis is None:
                a._accumulate(np.broadcast_to(g, a.shape))
            else:
                a._accumulate(np.broadcast_to(np.expand_dims(g, axis), a.shape))

        return Tensor._make(np.asarray(a.data.sum(axis=axis)), (a,), back)

    def mean(self) -> "Tensor":
        return self.sum() * (1.0 / self.data.size)

    def reshape(self, *shape) -> "Tensor":
        a = self

        def back(g):
            a._accumulate(g.reshape(a.shape))

        return Tensor._make(a.data.reshape(*shape), (a,), back)

    def __getitem__(self, idx) -> "Tensor":
        a = self

        basic = not any(isinstance(i, (np.ndarray, list)) for i in (idx if isinstance(idx, tuple) else (idx,)))

        def back(g):
            full = np.zeros_like(a.data)
            if basic:
                full[idx] = g
            else:
                np.add.at(full, idx, g)
            a._accumulate(full)

        return Tensor._make(a.data[idx], (a,), back)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def back(g):
        x._accumulate(g * mask)

    return Tensor._make(np.where(mask, x.data, 0.0), (x,), back)


def sigmoid_np(d: np.ndarray) -> np.ndarray:
    # split by sign so large |x| never overflows exp
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x: Tensor) -> Tensor:
    out = sigmoid_np(x.data)

    def back(g):
        x._accumulate(g * out * (1.0 - out))

    return Tensor._make(out, (x,), back)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def back(g):
        x._accumulate(g * (1.0 - out * out))

    return Tensor._make(out, (x,), back)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        for t, part in zip(tensors, np.split(g, splits, axis=axis)):
            if t.requires_grad:
                t._accumulate(part)

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), back)


def gather_last(x: Tensor, index: np.ndarray) -> Tensor:
    """Pick ``x[..., index[...]]`` along the last axis (Q(s, a) lookup)."""
    index = np.asarray(index, dtype=np.int64)
    picked = np.take_along_axis(x.data, index[..., None], axis=-1)[..., 0]

    def back(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, index[..., None], g[..., None], axis=-1)
        x._accumulate(full)

    return Tensor._make(picked, (x,), back)


def mse_loss(pred: Tensor, target, mask: np.ndarray | None = None) -> Tensor:
    """Mean squared error. With ``mask`` the mean runs over unmasked entries
    only and masked entries carry exactly zero gradient."""
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs target {target.shape}")
    diff = pred - target
    if mask is None:
        return (diff * diff).mean()
    mask = np.broadcast_to(np.asarray(mask, dtype=np.float64), pred.shape)
    n = mask.sum()
    if n == 0:
        return (diff * np.zeros(pred.shape)).sum()
    return (diff * diff * mask).sum() * (1.0 / n)


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> list[np.ndarray] | None:
    """Reverse-mode sweep from a scalar ``loss``.

    Gradients accumulate into ``.grad`` of every leaf that requires them.
    When ``params`` is given, their gradients are returned in order (zeros for
    parameters the loss does not depend on).
    """
    if loss.data.size != 1:
        raise ValueError("backward needs a scalar loss")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    if loss.requires_grad:
        loss._accumulate(np.ones_like(loss.data))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            if node._parents:
                node.grad = None  # interior node, free memory
    if params is None:
        return None
    return [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]


# -- layers ------------------------------------------------------------------

def uniform_init(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear:
    """Affine map ``x @ W + b``; with ``stack`` the weights have a leading
    dimension and the input is expected as ``(stack, batch, in)``."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, stack: int | None = None,
                 name: str = "linear"):
        lead = () if stack is None else (stack,)
        self.n_in, self.n_out = n_in, n_out
        self.W = Tensor(uniform_init(rng, lead + (n_in, n_out), n_in), requires_grad=True, name=f"{name}.W")
        self.b = Tensor(np.zeros(lead + (1, n_out) if stack is not None else (n_out,)),
                        requires_grad=True, name=f"{name}.b")

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.n_in:
            raise ValueError(f"{self.W.name}: expected input dim {self.n_in}, got {x.shape[-1]}")
        return x @ self.W + self.b

    def parameters(self) -> list[Tensor]:
        return [self.W, self.b]


def linear_relu_forward(x, W, b) -> np.ndarray:
    """Plain-array ``max(0, W x + b)`` with W shaped (out, in)."""
    x, W, b = (np.asarray(v, dtype=np.float64) for v in (x, W, b))
    if W.shape[1] != x.shape[-1]:
        raise ValueError(f"shape mismatch: W {W.shape} vs x {x.shape}")
    return np.maximum(0.0, x @ W.T + b)


class GRUCell:
    """Conventional gated recurrent unit.

        r  = sigmoid(x W_ir + b_ir + h W_hr + b_hr)
        z  = sigmoid(x W_iz + b_iz + h W_hz + b_hz)
        n  = tanh(x W_in + b_in + r * (h W_hn + b_hn))
        h' = (1 - z) * n + z * h

    Gate blocks are packed in (r, z, n) order along the last axis.
    """

    def __init__(self, n_in: int, hidden: int, rng: np.random.Generator, name: str = "gru"):
        self.n_in, self.hidden = n_in, hidden
        self.W_i = Tensor(uniform_init(rng, (n_in, 3 * hidden), hidden), requires_grad=True, name=f"{name}.W_i")
        self.W_h = Tensor(uniform_init(rng, (hidden, 3 * hidden), hidden), requires_grad=True, name=f"{name}.W_h")
        self.b_i = Tensor(np.zeros(3 * hidden), requires_grad=True, name=f"{name}.b_i")
        self.b_h = Tensor(np.zeros(3 * hidden), requires_grad=True, name=f"{name}.b_h")

    def __call__(self, x: Tensor, h: Tensor) -> Tensor:
        if x.shape[-1] != self.n_in or h.shape[-1] != self.hidden:
            raise ValueError(f"GRU expects x[..., {self.n_in}] and h[..., {self.hidden}]")
        H = self.hidden
        gi = x @ self.W_i + self.b_i
        gh = h @ self.W_h + self.b_h
        r = sigmoid(gi[..., :H] + gh[..., :H])
        z = sigmoid(gi[..., H:2 * H] + gh[..., H:2 * H])
        n = tanh(gi[..., 2 * H:] + r * gh[..., 2 * H:])
        return (1.0 - z) * n + z * h

    def parameters(self) -> list[Tensor]:
        return [self.W_i, self.W_h, self.b_i, self.b_h]


def gru_step(x, h_prev, cell: GRUCell) -> np.ndarray:
    with no_grad():
        return cell(as_tensor(x), as_tensor(h_prev)).data


# -- optimizers ----------------------------------------------------------------

class _Optimizer:
    kind = ""

    def __init__(self, params: Sequence[Tensor], lr: float):
        self.params = list(params)
        self.lr = lr
        self.step_count = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def _grads(self) -> list[np.ndarray]:
        grads = []
        for p in self.params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient for {p.name or 'parameter'}")
            grads.append(g)
        return grads

    def state_arrays(self) -> dict[str, np.ndarray]:
        raise NotImplementedError


class RMSprop(_Optimizer):
    """``v <- a v + (1 - a) g^2;  p <- p - lr g / (sqrt(v) + eps)``."""

    kind = "rmsprop"

    def __init__(self, params, lr: float = 0.001, alpha: float = 0.99, eps: float = 1e-8):
        super().__init__(params, lr)
        self.alpha, self.eps = alpha, eps
        self.sq = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        grads = self._grads()
        for p, g, v in zip(self.params, grads, self.sq):
            v *= self.alpha
            v += (1.0 - self.alpha) * g * g
            p.data -= self.lr * g / (np.sqrt(v) + self.eps)
        self.step_count += 1

    def state_arrays(self):
        return {f"sq{i}": v for i, v in enumerate(self.sq)}


class Adam(_Optimizer):
    """Adam with bias-corrected first and second moments."""

    kind = "adam"

    def __init__(self, params, lr: float = 0.01, betas=(0.9, 0.999), eps: float = 1e-8):
        super().__init__(params, lr)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        grads = self._grads()
        self.step_count += 1
        c1 = 1.0 - self.beta1 ** self.step_count
        c2 = 1.0 - self.beta2 ** self.step_count
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_arrays(self):
        out = {f"m{i}": m for i, m in enumerate(self.m)}
        out.update({f"v{i}": v for i, v in enumerate(self.v)})
        return out


def optimizer_step(opt: _Optimizer) -> None:
    opt.step()


# -- verification ------------------------------------------------------------

def finite_difference_grads(loss_fn: Callable[[], float], params: Sequence[Tensor],
                            h: float = 1e-5, coords: Sequence[np.ndarray] | None = None) -> list[np.ndarray]:
    """Central differences of ``loss_fn`` with respect to every entry of ``params``.

    ``loss_fn`` must re-run the forward pass from the current parameter values.
    With ``coords`` (one flat-index array per parameter) only those entries
    are perturbed and the result holds just those derivatives, in order.
    """
    out = []
    for j, p in enumerate(params):
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size) if coords is None else np.asarray(coords[j], dtype=np.int64)
        g = np.zeros(len(idx))
        for n, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn()
            flat[i] = orig - h
            down = loss_fn()
            flat[i] = orig
            g[n] = (up - down) / (2.0 * h)
        out.append(g.reshape(p.data.shape) if coords is None else g)
    return out


def sample_coords(params: Sequence[Tensor], per_param: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Up to ``per_param`` distinct flat indices per parameter, for spot gradient checks."""
    return [np.sort(rng.choice(p.data.size, size=min(per_param, p.data.size), replace=False)) for p in params]


def max_relative_error(analytic: Sequence[np.ndarray], numeric: Sequence[np.ndarray],
                       floor: float = 1e-6) -> float:
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        if a.size:
            worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


# -- checkpoints -----------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(path, named: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write arrays to an ``.npz`` with a JSON shape manifest."""
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "shapes": {k: list(np.shape(v)) for k, v in named.items()},
        "meta": meta or {},
    }
    arrays = {k: np.asarray(v, dtype=np.float64) for k, v in named.items()}
    with open(path, "wb") as fh:
        np.savez(fh, __manifest__=np.frombuffer(json.dumps(manifest, sort_keys=True).encode(), dtype=np.uint8),
                 **arrays)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with np.load(path, allow_pickle=False) as z:
        manifest = json.loads(bytes(z["__manifest__"]).decode())
        if manifest.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {manifest.get('format_version')}")
        arrays = {k: z[k].copy() for k in manifest["shapes"]}
    for k, shape in manifest["shapes"].items():
        if list(arrays[k].shape) != shape:
            raise ValueError(f"checkpoint entry {k} has shape {arrays[k].shape}, manifest says {shape}")
    return arrays, manifest["meta"]

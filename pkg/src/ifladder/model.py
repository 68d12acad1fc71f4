"""Tanh MLP classifier with the derivatives the curvature code needs.

Parameters live in one flat float64 vector. Each layer owns a contiguous
block holding its weight matrix ``W`` of shape ``(fan_out, fan_in + 1)``
(bias in the last column) stored column-major, so that flat index
``i * fan_out + k`` is ``W[k, i]``. With that ordering a per-example layer
gradient ``ds abar^T`` flattens to ``kron(abar, ds)``, which is what makes
the Kronecker factors line up with dense curvature blocks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .seeding import rng

TANH_GAIN = 5.0 / 3.0
# Upper bound on elements of the (directions, examples, width) tensors in
# batched Hessian-vector products.
_ROP_BUDGET = 4_000_000


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, batch: int, loss: float):
        super().__init__(f"non-finite loss or gradient (loss {loss}) at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


@dataclass(frozen=True)
class MlpConfig:
    input_dim: int = 64
    hidden_widths: tuple[int, ...] = (16,)
    classes: int = 10
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        if self.activation != "tanh":
            raise ValueError("only tanh activations are supported")
        if any(w < 1 for w in self.hidden_widths) or self.input_dim < 1 or self.classes < 2:
            raise ValueError(f"invalid MLP config {self}")

    @classmethod
    def uniform(cls, depth: int, width: int, input_dim: int = 64, classes: int = 10) -> "MlpConfig":
        return cls(input_dim, (width,) * depth, classes)

    @property
    def depth(self) -> int:
        return len(self.hidden_widths)


@dataclass(frozen=True)
class ParamLayout:
    shapes: tuple[tuple[int, int], ...]
    offsets: tuple[int, ...] = field(init=False)
    dim: int = field(init=False)

    def __post_init__(self):
        offsets, pos = [], 0
        for rows, cols in self.shapes:
            offsets.append(pos)
            pos += rows * cols
        object.__setattr__(self, "offsets", tuple(offsets))
        object.__setattr__(self, "dim", pos)

    @classmethod
    def for_config(cls, cfg: MlpConfig) -> "ParamLayout":
        widths = [cfg.input_dim, *cfg.hidden_widths, cfg.classes]
        return cls(tuple((widths[i + 1], widths[i] + 1) for i in range(len(widths) - 1)))

    @property
    def n_layers(self) -> int:
        return len(self.shapes)

    @property
    def block_sizes(self) -> list[int]:
        return [r * c for r, c in self.shapes]

    def block(self, layer: int) -> slice:
        rows, cols = self.shapes[layer]
        start = self.offsets[layer]
        return slice(start, start + rows * cols)

    def unflatten(self, theta: np.ndarray) -> list[np.ndarray]:
        """Weight matrices as views into ``theta``."""
        return [theta[self.block(l)].reshape(c, r).T for l, (r, c) in enumerate(self.shapes)]

    def flatten(self, mats) -> np.ndarray:
        return np.concatenate([np.asarray(w).T.ravel() for w in mats])

    def to_dict(self) -> dict:
        return {"shapes": [list(s) for s in self.shapes], "offsets": list(self.offsets), "dim": self.dim}


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 0.03
    batch: int = 32
    epochs: int = 100
    weight_decay: float = 0.0
    seed: int = 0
    schedule: str = "cosine"

    def __post_init__(self):
        if self.lr0 <= 0 or self.batch < 1 or self.epochs < 0:
            raise ValueError(f"invalid training config {self}")
        if self.schedule != "cosine":
            raise ValueError("only the cosine schedule is supported")


def cosine_lr(lr0: float, epoch: int, epochs: int) -> float:
    if epochs == 0:
        return lr0
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * epoch / epochs))


def softmax(u: np.ndarray) -> np.ndarray:
    z = u - u.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(u: np.ndarray) -> np.ndarray:
    z = u - u.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _augment(a: np.ndarray) -> np.ndarray:
    return np.concatenate([a, np.ones((a.shape[0], 1))], axis=1)


class MLP:
    """Softmax cross-entropy classifier ``u = W_L abar_{L-1}``, ``a_l = tanh(W_l abar_{l-1})``."""

    def __init__(self, cfg: MlpConfig):
        self.cfg = cfg
        self.layout = ParamLayout.for_config(cfg)

    @property
    def dim(self) -> int:
        return self.layout.dim

    def init_params(self, seed: int) -> np.ndarray:
        """Xavier-uniform weights with tanh gain, zero biases."""
        gen = rng(seed, "init")
        mats = []
        for fan_out, cols in self.layout.shapes:
            fan_in = cols - 1
            bound = TANH_GAIN * math.sqrt(6.0 / (fan_in + fan_out))
            w = np.zeros((fan_out, cols))
            w[:, :fan_in] = gen.uniform(-bound, bound, size=(fan_out, fan_in))
            mats.append(w)
        return self.layout.flatten(mats)

    # -- forward -------------------------------------------------------------

    def _forward_cache(self, theta, X):
        """Bias-augmented layer inputs, hidden activations and logits."""
        Ws = self.layout.unflatten(theta)
        abars, acts = [], []
        h = np.asarray(X, dtype=np.float64)
        for l, W in enumerate(Ws):
            abar = _augment(h)
            abars.append(abar)
            s = abar @ W.T
            if l < len(Ws) - 1:
                h = np.tanh(s)
                acts.append(h)
        return Ws, abars, acts, s

    def forward(self, theta: np.ndarray, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        single = X.ndim == 1
        u = self._forward_cache(theta, np.atleast_2d(X))[3]
        return u[0] if single else u

    def predict(self, theta, X) -> np.ndarray:
        return self.forward(theta, X).argmax(axis=-1)

    def per_example_losses(self, theta, X, y) -> np.ndarray:
        u = self.forward(theta, np.atleast_2d(X))
        y = np.atleast_1d(y)
        return -log_softmax(u)[np.arange(len(y)), y]

    def loss(self, theta, X, y) -> float:
        return float(np.mean(self.per_example_losses(theta, X, y)))

    # -- first order ---------------------------------------------------------

    def loss_and_grad(self, theta, X, y) -> tuple[float, np.ndarray]:
        """Mean cross-entropy and its gradient."""
        Ws, abars, acts, u = self._forward_cache(theta, X)
        n = u.shape[0]
        logp = log_softmax(u)
        loss = -float(np.mean(logp[np.arange(n), y]))
        delta = np.exp(logp)
        delta[np.arange(n), y] -= 1.0
        delta /= n
        grad = np.empty(self.dim)
        for l in range(len(Ws) - 1, -1, -1):
            grad[self.layout.block(l)] = (abars[l].T @ delta).ravel()
            if l > 0:
                delta = (delta @ Ws[l][:, :-1]) * (1.0 - acts[l - 1] ** 2)
        return loss, grad

    def grad(self, theta, X, y) -> np.ndarray:
        return self.loss_and_grad(theta, np.atleast_2d(X), np.atleast_1d(y))[1]

    def backprop(self, theta, X, cotangents: np.ndarray):
        """Pull output cotangents of shape ``(N, M, C)`` back to every layer.

        Returns ``(abars, deltas)`` where ``deltas[l]`` has shape
        ``(N, M, fan_out_l)`` and holds the pre-activation sensitivities.
        """
        Ws, abars, acts, _ = self._forward_cache(theta, X)
        deltas = [None] * len(Ws)
        delta = np.asarray(cotangents, dtype=np.float64)
        for l in range(len(Ws) - 1, -1, -1):
            deltas[l] = delta
            if l > 0:
                delta = (delta @ Ws[l][:, :-1]) * (1.0 - acts[l - 1] ** 2)[:, None, :]
        return abars, deltas

    def _layer_grads(self, abars, deltas) -> np.ndarray:
        """Per-example, per-cotangent flat gradients ``(N, M, D)``."""
        n, m = deltas[0].shape[:2]
        out = np.empty((n, m, self.dim))
        for l, (abar, delta) in enumerate(zip(abars, deltas)):
            block = abar[:, None, :, None] * delta[:, :, None, :]
            out[:, :, self.layout.block(l)] = block.reshape(n, m, -1)
        return out

    def per_example_grads(self, theta, X, y) -> np.ndarray:
        X = np.atleast_2d(X)
        y = np.atleast_1d(y)
        p = softmax(self.forward(theta, X))
        p[np.arange(len(y)), y] -= 1.0
        abars, deltas = self.backprop(theta, X, p[:, None, :])
        return self._layer_grads(abars, deltas)[:, 0, :]

    def output_jacobians(self, theta, X) -> np.ndarray:
        """``(N, C, D)``; row k of each slice is the gradient of logit k."""
        X = np.atleast_2d(X)
        eye = np.broadcast_to(np.eye(self.cfg.classes), (X.shape[0], self.cfg.classes, self.cfg.classes))
        abars, deltas = self.backprop(theta, X, eye)
        return self._layer_grads(abars, deltas)

    def output_jacobian(self, theta, x) -> np.ndarray:
        return self.output_jacobians(theta, np.atleast_2d(x))[0]

    # -- second order --------------------------------------------------------

    def _rop_chunk(self, theta, X, y, V, residual_only):
        Ws, abars, acts, u = self._forward_cache(theta, X)
        n = X.shape[0]
        m = V.shape[1]
        L = len(Ws)
        dWs = [V[self.layout.block(l)].T.reshape(m, c, r).transpose(0, 2, 1)
               for l, (r, c) in enumerate(self.layout.shapes)]

        # Forward tangents of the pre-activations and hidden activations.
        Racts = []
        Rs = None
        for l in range(L):
            Rs = np.matmul(abars[l], dWs[l].transpose(0, 2, 1))
            if l > 0:
                Rs += np.matmul(Racts[l - 1], Ws[l][:, :-1].T)
            if l < L - 1:
                Racts.append((1.0 - acts[l] ** 2) * Rs)

        p = softmax(u)
        delta = p.copy()
        delta[np.arange(n), y] -= 1.0
        delta /= n
        if residual_only:
            Rdelta = np.zeros((m, n, self.cfg.classes))
        else:
            Rdelta = (p * Rs - p * np.sum(p * Rs, axis=-1, keepdims=True)) / n

        out = np.empty((self.dim, m))
        for l in range(L - 1, -1, -1):
            RgW = np.matmul(Rdelta.transpose(0, 2, 1), abars[l])
            if l > 0:
                RgW[:, :, :-1] += np.matmul(delta.T, Racts[l - 1])
            out[self.layout.block(l)] = RgW.transpose(0, 2, 1).reshape(m, -1).T
            if l > 0:
                Wl = Ws[l][:, :-1]
                deriv = 1.0 - acts[l - 1] ** 2
                back = delta @ Wl
                Rback = np.matmul(Rdelta, Wl) + np.matmul(delta, dWs[l][:, :, :-1])
                Rdelta = Rback * deriv - back * (2.0 * acts[l - 1]) * Racts[l - 1]
                delta = back * deriv
        return out

    def _rop(self, theta, X, y, V, residual_only):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        y = np.atleast_1d(y)
        V = np.asarray(V, dtype=np.float64)
        vec = V.ndim == 1
        if vec:
            V = V[:, None]
        widest = max(self.cfg.input_dim, self.cfg.classes, *self.cfg.hidden_widths)
        chunk = max(1, _ROP_BUDGET // (X.shape[0] * widest))
        out = np.empty_like(V)
        for j in range(0, V.shape[1], chunk):
            out[:, j:j + chunk] = self._rop_chunk(theta, X, y, V[:, j:j + chunk], residual_only)
        return out[:, 0] if vec else out

    def hvp(self, theta, X, y, V) -> np.ndarray:
        """Hessian of the mean loss times ``V`` (a vector or ``(D, m)`` block)."""
        return self._rop(theta, X, y, V, residual_only=False)

    def residual_hvp(self, theta, X, y, V) -> np.ndarray:
        """``R V`` with ``R = mean_i sum_k [p_i - y_i]_k Hess(u_ik)`` (output gradients frozen)."""
        return self._rop(theta, X, y, V, residual_only=True)

    def accuracy(self, theta, X, y) -> float:
        return float(np.mean(self.predict(theta, X) == y))


def train(cfg: MlpConfig, tcfg: TrainConfig, X: np.ndarray, y: np.ndarray,
          theta0: np.ndarray | None = None, callback=None) -> np.ndarray:
    """Mini-batch SGD with a per-epoch cosine learning rate.

    Batch order is reshuffled each epoch from ``(seed, epoch)``; the last
    partial batch is kept. ``callback(epoch, theta)`` runs after each epoch.
    """
    model = MLP(cfg)
    theta = model.init_params(tcfg.seed) if theta0 is None else np.array(theta0, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    n = X.shape[0]
    for epoch in range(tcfg.epochs):
        lr = cosine_lr(tcfg.lr0, epoch, tcfg.epochs)
        perm = rng(tcfg.seed, "shuffle", epoch).permutation(n)
        for b, start in enumerate(range(0, n, tcfg.batch)):
            idx = perm[start:start + tcfg.batch]
            loss, g = model.loss_and_grad(theta, X[idx], y[idx])
            if not (math.isfinite(loss) and np.isfinite(g).all()):
                raise TrainingDiverged(epoch, b, loss)
            if tcfg.weight_decay:
                g = g + tcfg.weight_decay * theta
            theta -= lr * g
        if callback is not None:
            callback(epoch + 1, theta)
    return theta

"""Trainable projection head: two affine layers, each with batch norm, plus
ReLU and dropout between them.

    x -> W1 x + b1 -> BN1 -> ReLU -> dropout -> W2 . + b2 -> BN2 -> z

Forward and backward are written out by hand in float64. Train mode uses
batch statistics (falling back to running statistics for single-sample
batches, where a batch variance would be zero) and updates the running
estimates in place; eval mode is a pure function of (params, x).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, ShapeError

# Keys of the tensors the optimizer updates, in a fixed order shared by the
# gradient dicts, the Adam state, and the checkpoint layout.
TRAINABLE_KEYS = ("W1", "b1", "bn1.gamma", "bn1.beta",
                  "W2", "b2", "bn2.gamma", "bn2.beta", "w_v", "b_v")


@dataclass
class BatchNormState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    epsilon: float = 1e-5

    @classmethod
    def identity(cls, width: int, momentum: float = 0.1,
                 epsilon: float = 1e-5) -> "BatchNormState":
        return cls(np.ones(width), np.zeros(width), np.zeros(width), np.ones(width),
                   momentum, epsilon)

    def copy(self) -> "BatchNormState":
        return BatchNormState(self.gamma.copy(), self.beta.copy(),
                              self.running_mean.copy(), self.running_var.copy(),
                              self.momentum, self.epsilon)


@dataclass
class HeadParams:
    W1: np.ndarray  # (hidden, dim_total)
    b1: np.ndarray  # (hidden,)
    bn1: BatchNormState
    W2: np.ndarray  # (out, hidden)
    b2: np.ndarray  # (out,)
    bn2: BatchNormState
    dropout_rate: float = 0.20
    w_v: np.ndarray = field(default_factory=lambda: np.array(1.0))  # 0-d float64
    b_v: np.ndarray = field(default_factory=lambda: np.array(0.0))

    @property
    def dim_total(self) -> int:
        return self.W1.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.W1.shape[0]

    @property
    def out_dim(self) -> int:
        return self.W2.shape[0]

    def trainable(self) -> dict[str, np.ndarray]:
        """Views of the tensors the optimizer updates (in-place friendly)."""
        return {
            "W1": self.W1, "b1": self.b1,
            "bn1.gamma": self.bn1.gamma, "bn1.beta": self.bn1.beta,
            "W2": self.W2, "b2": self.b2,
            "bn2.gamma": self.bn2.gamma, "bn2.beta": self.bn2.beta,
            "w_v": self.w_v, "b_v": self.b_v,
        }

    def all_tensors(self) -> dict[str, np.ndarray]:
        """Every array field, including running statistics (checkpoint order)."""
        return {
            "W1": self.W1, "b1": self.b1,
            "bn1.gamma": self.bn1.gamma, "bn1.beta": self.bn1.beta,
            "bn1.running_mean": self.bn1.running_mean, "bn1.running_var": self.bn1.running_var,
            "W2": self.W2, "b2": self.b2,
            "bn2.gamma": self.bn2.gamma, "bn2.beta": self.bn2.beta,
            "bn2.running_mean": self.bn2.running_mean, "bn2.running_var": self.bn2.running_var,
        }

    def copy(self) -> "HeadParams":
        return HeadParams(self.W1.copy(), self.b1.copy(), self.bn1.copy(),
                          self.W2.copy(), self.b2.copy(), self.bn2.copy(),
                          self.dropout_rate, self.w_v.copy(), self.b_v.copy())

    def check_finite(self) -> None:
        for name, arr in {**self.all_tensors(), "w_v": self.w_v, "b_v": self.b_v}.items():
            if not np.all(np.isfinite(arr)):
                raise NumericError(f"parameter {name} became non-finite")


def init_head(dim_total: int, hidden: int, out: int, rng: np.random.Generator,
              dropout_rate: float = 0.20) -> HeadParams:
    """Glorot-uniform weights, zero biases, identity batch norm."""
    def glorot(fan_out, fan_in):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-bound, bound, size=(fan_out, fan_in))

    return HeadParams(
        W1=glorot(hidden, dim_total), b1=np.zeros(hidden),
        bn1=BatchNormState.identity(hidden),
        W2=glorot(out, hidden), b2=np.zeros(out),
        bn2=BatchNormState.identity(out),
        dropout_rate=dropout_rate,
        w_v=np.array(1.0), b_v=np.array(0.0),
    )


@dataclass
class ForwardCache:
    params: HeadParams
    train: bool
    x: np.ndarray
    bn1_cache: tuple
    n1: np.ndarray          # BN1 output = ReLU input
    drop_mask: np.ndarray | None
    h: np.ndarray           # input to the second affine layer
    bn2_cache: tuple
    z_shape: tuple


def _bn_forward(state: BatchNormState, a: np.ndarray, train: bool):
    if train and a.shape[0] > 1:
        mu = a.mean(axis=0)
        var = a.var(axis=0)  # biased; matches the backward pass below
        inv_std = 1.0 / np.sqrt(var + state.epsilon)
        xhat = (a - mu) * inv_std
        m = state.momentum
        state.running_mean[:] = (1.0 - m) * state.running_mean + m * mu
        state.running_var[:] = (1.0 - m) * state.running_var + m * var
        cache = (xhat, inv_std, True)
    else:
        inv_std = 1.0 / np.sqrt(state.running_var + state.epsilon)
        xhat = (a - state.running_mean) * inv_std
        cache = (xhat, inv_std, False)
    return state.gamma * xhat + state.beta, cache


def _bn_backward(state: BatchNormState, cache: tuple, dy: np.ndarray):
    xhat, inv_std, batch_stats = cache
    dgamma = (dy * xhat).sum(axis=0)
    dbeta = dy.sum(axis=0)
    dxhat = dy * state.gamma
    if batch_stats:
        n = dy.shape[0]
        da = (inv_std / n) * (n * dxhat - dxhat.sum(axis=0)
                              - xhat * (dxhat * xhat).sum(axis=0))
    else:
        da = dxhat * inv_std
    return da, dgamma, dbeta


def head_forward(params: HeadParams, x, mode: str = "eval",
                 rng: np.random.Generator | None = None):
    """Run the head on a batch of row vectors; returns (z, cache).

    ``mode`` is "train" or "eval". Train mode needs ``rng`` when the dropout
    rate is nonzero.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    train = mode == "train"
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != params.dim_total:
        raise ShapeError(f"layer1 expects {params.dim_total} input features, "
                         f"got {x.shape[1]}")
    if x.shape[0] < 1:
        raise ShapeError("batch must hold at least one row")

    a1 = x @ params.W1.T + params.b1
    n1, bn1_cache = _bn_forward(params.bn1, a1, train)
    r = np.maximum(n1, 0.0)
    drop_mask = None
    if train and params.dropout_rate > 0.0:
        if rng is None:
            raise ValueError("train-mode forward with dropout needs an rng")
        keep = 1.0 - params.dropout_rate
        drop_mask = (rng.random(r.shape) < keep) / keep
        h = r * drop_mask
    else:
        h = r
    a2 = h @ params.W2.T + params.b2
    z, bn2_cache = _bn_forward(params.bn2, a2, train)
    cache = ForwardCache(params, train, x, bn1_cache, n1, drop_mask, h, bn2_cache, z.shape)
    return z, cache


def head_backward(cache: ForwardCache, upstream_grad, l2: float = 1e-4):
    """Backpropagate through the head; returns (parameter grads, input grads).

    Weight-matrix gradients include the penalty term ``2 * l2 * W``; bias and
    batch-norm gradients carry no penalty. The verification scalars get zero
    placeholders here (their data gradient comes from the pairwise loss).
    """
    if not cache.train:
        raise ValueError("head_backward needs a cache from a train-mode forward")
    p = cache.params
    dz = np.asarray(upstream_grad, dtype=np.float64)
    if dz.shape != cache.z_shape:
        raise ShapeError(f"upstream gradient shape {dz.shape} does not match "
                         f"output shape {cache.z_shape}")

    da2, dgamma2, dbeta2 = _bn_backward(p.bn2, cache.bn2_cache, dz)
    dW2 = da2.T @ cache.h + 2.0 * l2 * p.W2
    db2 = da2.sum(axis=0)
    dh = da2 @ p.W2
    dr = dh * cache.drop_mask if cache.drop_mask is not None else dh
    dn1 = dr * (cache.n1 > 0.0)
    da1, dgamma1, dbeta1 = _bn_backward(p.bn1, cache.bn1_cache, dn1)
    dW1 = da1.T @ cache.x + 2.0 * l2 * p.W1
    db1 = da1.sum(axis=0)
    dx = da1 @ p.W1

    grads = {
        "W1": dW1, "b1": db1, "bn1.gamma": dgamma1, "bn1.beta": dbeta1,
        "W2": dW2, "b2": db2, "bn2.gamma": dgamma2, "bn2.beta": dbeta2,
        "w_v": np.zeros(()), "b_v": np.zeros(()),
    }
    return grads, dx

"""Neural building blocks on top of the tensor engine.

Linear layers, pre-norm multi-head self-attention blocks, SGD with momentum
and weight decay, a single-cycle cosine learning-rate schedule, and
fan-in-aware uniform initialization (bit-reproducible per seed).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from cdcl import tensor as tt
from cdcl.tensor import DimensionError, Tensor

__all__ = [
    "LinearLayer",
    "MhsaBlock",
    "SgdState",
    "CosineSchedule",
    "OptimizerError",
    "make_rng",
    "init_uniform",
    "init_zeros",
    "init_ones",
    "linear_forward",
    "mhsa_forward",
    "sgd_step",
    "cosine_lr",
]


class OptimizerError(RuntimeError):
    """Optimizer step aborted (non-finite gradient or bad hyperparameter)."""


# ---------------------------------------------------------------------------
# initialization


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def init_uniform(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    """Uniform in [-s, s] with s = sqrt(6 / fan_in)."""
    bound = math.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def init_zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def init_ones(shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


# ---------------------------------------------------------------------------
# linear layer


class LinearLayer:
    """y = x @ weight.T + bias, applied over the last axis."""

    def __init__(self, weight: Tensor, bias: Tensor):
        if weight.ndim != 2 or bias.shape != (weight.shape[0],):
            raise DimensionError(f"linear layer: weight {weight.shape} vs bias {bias.shape}")
        self.weight = weight
        self.bias = bias

    @classmethod
    def create(cls, rng: np.random.Generator, in_features: int, out_features: int) -> "LinearLayer":
        return cls(init_uniform(rng, (out_features, in_features), in_features), init_zeros(out_features))

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]

    def parameters(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def __call__(self, x: Tensor) -> Tensor:
        return linear_forward(self, x)


def linear_forward(layer: LinearLayer, x: Tensor) -> Tensor:
    nin, nout = layer.in_features, layer.out_features
    if x.shape[-1] != nin:
        raise DimensionError(f"linear: input {x.shape} does not end in {nin}")
    lead = x.shape[:-1]
    rows = int(np.prod(lead, dtype=np.int64)) if lead else 1
    x2 = tt.reshape(x, (rows, nin))
    y2 = tt.matmul(x2, tt.transpose(layer.weight))
    y = tt.reshape(y2, lead + (nout,))
    return tt.add(y, layer.bias)


# ---------------------------------------------------------------------------
# multi-head self-attention block


class MhsaBlock:
    """Pre-norm residual transformer block: MHSA then a position-wise FFN.

    No positional encoding and full (unmasked) attention, so the block is
    permutation-equivariant over tokens. FFN hidden width is 2*d.
    """

    def __init__(self, num_heads, head_dim, wq, wk, wv, wo, ln1_gain, ln1_bias, ln2_gain, ln2_bias, ffn1, ffn2):
        d = num_heads * head_dim
        for name, lin in (("wq", wq), ("wk", wk), ("wv", wv), ("wo", wo)):
            if lin.weight.shape != (d, d):
                raise DimensionError(f"mhsa {name}: expected ({d},{d}), got {lin.weight.shape}")
        self.num_heads = num_heads
        self.head_dim = head_dim
        self.wq, self.wk, self.wv, self.wo = wq, wk, wv, wo
        self.ln1_gain, self.ln1_bias = ln1_gain, ln1_bias
        self.ln2_gain, self.ln2_bias = ln2_gain, ln2_bias
        self.ffn1, self.ffn2 = ffn1, ffn2

    @classmethod
    def create(cls, rng: np.random.Generator, d: int, num_heads: int) -> "MhsaBlock":
        if d % num_heads != 0:
            raise DimensionError(f"width {d} not divisible by {num_heads} heads")
        mk = lambda: LinearLayer.create(rng, d, d)
        wq, wk, wv, wo = mk(), mk(), mk(), mk()
        ffn1 = LinearLayer.create(rng, d, 2 * d)
        ffn2 = LinearLayer.create(rng, 2 * d, d)
        return cls(num_heads, d // num_heads, wq, wk, wv, wo,
                   init_ones(d), init_zeros(d), init_ones(d), init_zeros(d), ffn1, ffn2)

    @property
    def width(self) -> int:
        return self.num_heads * self.head_dim

    def parameters(self):
        out = []
        for sub, lin in (("wq", self.wq), ("wk", self.wk), ("wv", self.wv), ("wo", self.wo),
                         ("ffn1", self.ffn1), ("ffn2", self.ffn2)):
            out += [(f"{sub}.{n}", p) for n, p in lin.parameters()]
        out += [("ln1.gain", self.ln1_gain), ("ln1.bias", self.ln1_bias),
                ("ln2.gain", self.ln2_gain), ("ln2.bias", self.ln2_bias)]
        return out


def mhsa_forward(block: MhsaBlock, seq: Tensor, return_attn: bool = False):
    """Apply one block to a (n, d) sequence or a (B, n, d) stack.

    Returns the transformed sequence; with ``return_attn`` also the
    (B, heads, n, n) attention probabilities as a plain array.
    """
    d = block.width
    if seq.shape[-1] != d:
        raise DimensionError(f"mhsa: sequence width {seq.shape} does not match block width {d}")
    squeeze = seq.ndim == 2
    x = tt.reshape(seq, (1,) + seq.shape) if squeeze else seq
    if x.ndim != 3:
        raise DimensionError(f"mhsa: expected (n,d) or (B,n,d), got {seq.shape}")
    b, n, _ = x.shape
    nh, hd = block.num_heads, block.head_dim

    def split_heads(t):
        return tt.transpose(tt.reshape(t, (b, n, nh, hd)), (0, 2, 1, 3))

    h = tt.layer_norm(x, block.ln1_gain, block.ln1_bias)
    q = split_heads(linear_forward(block.wq, h))
    k = split_heads(linear_forward(block.wk, h))
    v = split_heads(linear_forward(block.wv, h))
    scores = tt.scale(tt.matmul(q, tt.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(hd))
    attn = tt.softmax(scores, axis=-1)
    ctx = tt.reshape(tt.transpose(tt.matmul(attn, v), (0, 2, 1, 3)), (b, n, d))
    z = tt.add(x, linear_forward(block.wo, ctx))

    h2 = tt.layer_norm(z, block.ln2_gain, block.ln2_bias)
    f = linear_forward(block.ffn2, tt.silu(linear_forward(block.ffn1, h2)))
    out = tt.add(z, f)

    if squeeze:
        out = tt.reshape(out, (n, d))
    if return_attn:
        return out, attn.data.copy()
    return out


# ---------------------------------------------------------------------------
# SGD with momentum + weight decay


class SgdState:
    """Per-parameter velocity buffers for momentum SGD."""

    def __init__(self, params, momentum: float = 0.95, weight_decay: float = 1e-4, base_lr: float = 1e-3):
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.base_lr = float(base_lr)
        self._velocity = {p.graph_id: np.zeros_like(p.data) for p in params}

    def velocity_of(self, p: Tensor) -> np.ndarray:
        return self._velocity[p.graph_id]


def sgd_step(state: SgdState, params, grads, lr: float):
    """θ ← θ − lr·v with v ← momentum·v + (g + weight_decay·θ)."""
    if lr < 0:
        raise OptimizerError(f"learning rate must be >= 0, got {lr}")
    params = list(params)
    grads = list(grads)
    if len(params) != len(grads):
        raise OptimizerError(f"{len(params)} params vs {len(grads)} grads")
    for p, g in zip(params, grads):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.data.shape:
            raise OptimizerError(f"gradient shape {g.shape} vs parameter {p.data.shape}")
        if not np.all(np.isfinite(g)):
            raise OptimizerError("non-finite gradient; step aborted")
    for p, g in zip(params, grads):
        v = state._velocity[p.graph_id]
        v *= state.momentum
        v += g + state.weight_decay * p.data
        p.data -= lr * v


# ---------------------------------------------------------------------------
# cosine annealing


@dataclass
class CosineSchedule:
    """Single annealing cycle from base_lr down to min_lr over total_steps."""

    base_lr: float
    total_steps: int
    min_lr: float = 0.0

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError(f"total_steps must be >= 1, got {self.total_steps}")


def cosine_lr(sched: CosineSchedule, t: int) -> float:
    if not 0 <= t <= sched.total_steps:
        raise ValueError(f"step {t} outside [0, {sched.total_steps}]")
    span = sched.base_lr - sched.min_lr
    return sched.min_lr + span * (1.0 + math.cos(math.pi * t / sched.total_steps)) / 2.0

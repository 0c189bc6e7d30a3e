"""Neural building blocks on top of the tape engine.

Contains the GRU encoder layer (with average pooling), the MLP heads, the
gradient reversal layer, the three training losses, AdamW, and parameter
initialization. Everything is expressed through `autodiff` primitives so a
single backward pass differentiates the whole pipeline.

GRU convention used throughout (one of the two common sign choices):

    z_t = sigmoid(W_z x_t + U_z h_{t-1} + b_z)
    r_t = sigmoid(W_r x_t + U_r h_{t-1} + b_r)
    hc_t = tanh(W_h x_t + U_h (r_t * h_{t-1}) + b_h)
    h_t = (1 - z_t) * h_{t-1} + z_t * hc_t

so z_t gates how much of the *candidate* state enters.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from scipy.special import expit

from . import autodiff as ad
from .autodiff import NonFinite, ShapeMismatch, Tape, Tensor

__all__ = [
    "EmptySequence",
    "InvalidLabel",
    "GruParams",
    "GruTensors",
    "MlpLayer",
    "MlpParams",
    "AdamWState",
    "adamw_step",
    "init_gru_params",
    "init_mlp_params",
    "gru_forward",
    "gru_encode_pooled",
    "avg_pool",
    "mlp_forward",
    "grl_apply",
    "triplet_loss",
    "bce_with_logits",
    "mse_loss",
]


class EmptySequence(ValueError):
    """An operation that needs at least one timestep got none."""


class InvalidLabel(ValueError):
    """A binary label was not 0 or 1."""


# ---------------------------------------------------------------------------
# Parameter containers
# ---------------------------------------------------------------------------


class GruTensors(NamedTuple):
    """GruParams bound to a tape as leaf tensors."""

    w_z: Tensor
    w_r: Tensor
    w_h: Tensor
    u_z: Tensor
    u_r: Tensor
    u_h: Tensor
    b_z: Tensor
    b_r: Tensor
    b_h: Tensor


@dataclass
class GruParams:
    """One-layer GRU parameters: W_* are (H, d), U_* are (H, H), b_* are (H,)."""

    w_z: np.ndarray
    w_r: np.ndarray
    w_h: np.ndarray
    u_z: np.ndarray
    u_r: np.ndarray
    u_h: np.ndarray
    b_z: np.ndarray
    b_r: np.ndarray
    b_h: np.ndarray

    def __post_init__(self) -> None:
        h, d = self.w_z.shape
        for name, arr in self.named_arrays():
            expected = {
                "w": (h, d), "u": (h, h), "b": (h,),
            }[name[0]]
            if arr.shape != expected:
                raise ShapeMismatch(f"GRU parameter {name} has shape {arr.shape}, expected {expected}")
            if not np.isfinite(arr).all():
                raise NonFinite(f"GRU parameter {name} contains NaN or Inf")

    @property
    def input_dim(self) -> int:
        return self.w_z.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.w_z.shape[0]

    def named_arrays(self) -> list[tuple[str, np.ndarray]]:
        return [
            ("w_z", self.w_z), ("w_r", self.w_r), ("w_h", self.w_h),
            ("u_z", self.u_z), ("u_r", self.u_r), ("u_h", self.u_h),
            ("b_z", self.b_z), ("b_r", self.b_r), ("b_h", self.b_h),
        ]

    def bind(self, tape: Tape, trainable: bool = True) -> GruTensors:
        return GruTensors(*(tape.tensor(arr, requires_grad=trainable) for _, arr in self.named_arrays()))

    def copy(self) -> "GruParams":
        return GruParams(*(arr.copy() for _, arr in self.named_arrays()))


@dataclass
class MlpLayer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "linear"  # "relu" or "linear"

    def __post_init__(self) -> None:
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeMismatch(
                f"MLP layer shapes inconsistent: W {self.weight.shape}, b {self.bias.shape}"
            )
        if self.activation not in ("relu", "linear"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if not (np.isfinite(self.weight).all() and np.isfinite(self.bias).all()):
            raise NonFinite("MLP layer contains NaN or Inf")


@dataclass
class MlpParams:
    layers: list[MlpLayer] = field(default_factory=list)

    def __post_init__(self) -> None:
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if nxt.weight.shape[1] != prev.weight.shape[0]:
                raise ShapeMismatch(
                    f"MLP layer dims do not chain: {prev.weight.shape} -> {nxt.weight.shape}"
                )

    @property
    def input_dim(self) -> int:
        return self.layers[0].weight.shape[1]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].weight.shape[0]

    def named_arrays(self, prefix: str = "") -> list[tuple[str, np.ndarray]]:
        out = []
        for i, layer in enumerate(self.layers):
            out.append((f"{prefix}w{i}", layer.weight))
            out.append((f"{prefix}b{i}", layer.bias))
        return out

    def bind(self, tape: Tape, trainable: bool = True) -> list[tuple[Tensor, Tensor, str]]:
        return [
            (tape.tensor(l.weight, requires_grad=trainable),
             tape.tensor(l.bias, requires_grad=trainable),
             l.activation)
            for l in self.layers
        ]

    def copy(self) -> "MlpParams":
        return MlpParams([MlpLayer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers])


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------


def _xavier(rng: np.random.Generator, shape: tuple[int, int]) -> np.ndarray:
    fan_out, fan_in = shape
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def init_gru_params(input_dim: int, hidden_dim: int, seed) -> GruParams:
    """Xavier-uniform weights, zero biases; bit-identical for a given seed."""
    if input_dim <= 0 or hidden_dim <= 0:
        raise ValueError("dimensions must be positive")
    rng = np.random.default_rng(seed)
    d, h = input_dim, hidden_dim
    return GruParams(
        w_z=_xavier(rng, (h, d)), w_r=_xavier(rng, (h, d)), w_h=_xavier(rng, (h, d)),
        u_z=_xavier(rng, (h, h)), u_r=_xavier(rng, (h, h)), u_h=_xavier(rng, (h, h)),
        b_z=np.zeros(h), b_r=np.zeros(h), b_h=np.zeros(h),
    )


def init_mlp_params(dims: Sequence[int], seed, hidden_activation: str = "relu") -> MlpParams:
    """MLP with the given layer widths; hidden layers activated, output linear."""
    if len(dims) < 2 or any(d <= 0 for d in dims):
        raise ValueError("need at least two positive layer dims")
    rng = np.random.default_rng(seed)
    layers = []
    for i, (din, dout) in enumerate(zip(dims[:-1], dims[1:])):
        act = "linear" if i == len(dims) - 2 else hidden_activation
        layers.append(MlpLayer(_xavier(rng, (dout, din)), np.zeros(dout), act))
    return MlpParams(layers)


# ---------------------------------------------------------------------------
# GRU forward
# ---------------------------------------------------------------------------


class _GruPassConsts(NamedTuple):
    bz: Tensor
    br: Tensor
    bh: Tensor
    ones: Tensor
    neg_ones: Tensor


def _pass_consts(tape: Tape, bound: GruTensors, batch: int, hidden: int) -> _GruPassConsts:
    return _GruPassConsts(
        bz=ad.expand_rows(bound.b_z, batch),
        br=ad.expand_rows(bound.b_r, batch),
        bh=ad.expand_rows(bound.b_h, batch),
        ones=tape.tensor(np.ones((batch, hidden))),
        neg_ones=tape.tensor(np.full((batch, hidden), -1.0)),
    )


def _gru_step(bound: GruTensors, c: _GruPassConsts, x_t: Tensor, h_prev: Tensor) -> Tensor:
    z = ad.sigmoid(ad.add(ad.add(
        ad.matmul(x_t, bound.w_z, transpose_b=True),
        ad.matmul(h_prev, bound.u_z, transpose_b=True)), c.bz))
    r = ad.sigmoid(ad.add(ad.add(
        ad.matmul(x_t, bound.w_r, transpose_b=True),
        ad.matmul(h_prev, bound.u_r, transpose_b=True)), c.br))
    hc = ad.tanh(ad.add(ad.add(
        ad.matmul(x_t, bound.w_h, transpose_b=True),
        ad.matmul(ad.mul(r, h_prev), bound.u_h, transpose_b=True)), c.bh))
    one_minus_z = ad.add(c.ones, ad.mul(z, c.neg_ones))
    return ad.add(ad.mul(one_minus_z, h_prev), ad.mul(z, hc))


def _as_bound(params, tape: Tape, trainable: bool) -> GruTensors:
    if isinstance(params, GruParams):
        return params.bind(tape, trainable=trainable)
    return params


def gru_forward(frames, params, h0=None, tape: Tape | None = None) -> list[Tensor]:
    """Run the GRU over one sequence of input vectors, returning every h_t.

    `frames` is a (T, d) array (or sequence of d-vectors); `params` is either
    a GruParams or an already-bound GruTensors. With no tape given, a fresh
    one is created, which makes plain numeric evaluation convenient.
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.size == 0:
        raise EmptySequence("gru_forward needs at least one frame")
    if frames.ndim == 1:
        frames = frames[None, :]
    if tape is None:
        tape = Tape()
    bound = _as_bound(params, tape, trainable=True)
    h_dim = bound.u_z.shape[0]
    d = bound.w_z.shape[1]
    if frames.shape[1] != d:
        raise ShapeMismatch(f"frames have dim {frames.shape[1]}, encoder expects {d}")
    if h0 is None:
        h0 = np.zeros(h_dim)
    h0 = np.asarray(h0, dtype=np.float64)
    if h0.shape != (h_dim,):
        raise ShapeMismatch(f"h0 has shape {h0.shape}, expected ({h_dim},)")

    consts = _pass_consts(tape, bound, 1, h_dim)
    h = tape.tensor(h0[None, :])
    states = []
    for t in range(frames.shape[0]):
        h = _gru_step(bound, consts, tape.tensor(frames[t : t + 1]), h)
        states.append(ad.reshape(h, (h_dim,)))
    return states


def avg_pool(states: Sequence) -> Tensor:
    """Elementwise arithmetic mean over a non-empty sequence of vectors."""
    if len(states) == 0:
        raise EmptySequence("avg_pool needs at least one state")
    if not isinstance(states[0], Tensor):
        tape = Tape()
        states = [tape.tensor(s) for s in states]
    acc = states[0]
    for s in states[1:]:
        acc = ad.add(acc, s)
    tape = acc.tape
    scale = tape.tensor(np.full(acc.shape, 1.0 / len(states)))
    return ad.mul(acc, scale)


def gru_encode_pooled(
    tape: Tape,
    bound: GruTensors,
    frames_padded: np.ndarray,
    lengths: np.ndarray,
) -> Tensor:
    """Average-pooled GRU features for a padded batch of sequences.

    `frames_padded` is (B, T_max, d) with rows zero-padded past their length;
    `lengths` gives the true length of each row. Pooling only accumulates
    states at valid timesteps, so padding never influences the result (the
    recurrence is causal, later padded steps cannot reach earlier states).
    """
    batch, t_max, _ = frames_padded.shape
    if t_max == 0 or batch == 0:
        raise EmptySequence("batch encode needs at least one frame")
    lengths = np.asarray(lengths)
    if lengths.shape != (batch,) or lengths.min() < 1 or lengths.max() > t_max:
        raise ShapeMismatch("lengths inconsistent with the padded batch")
    h_dim = bound.u_z.shape[0]
    consts = _pass_consts(tape, bound, batch, h_dim)
    h = tape.tensor(np.zeros((batch, h_dim)))
    min_len = int(lengths.min())
    acc = None
    for t in range(t_max):
        h = _gru_step(bound, consts, tape.tensor(frames_padded[:, t, :]), h)
        if t < min_len:
            contrib = h
        else:
            valid = (lengths > t).astype(np.float64)
            mask = tape.tensor(np.ascontiguousarray(np.broadcast_to(valid[:, None], (batch, h_dim))))
            contrib = ad.mul(h, mask)
        acc = contrib if acc is None else ad.add(acc, contrib)
    inv_len = np.ascontiguousarray(np.broadcast_to((1.0 / lengths)[:, None], (batch, h_dim)))
    return ad.mul(acc, tape.tensor(inv_len))


# ---------------------------------------------------------------------------
# MLP heads
# ---------------------------------------------------------------------------


def mlp_forward(x, params, tape: Tape | None = None) -> Tensor:
    """Affine layers with their declared activations; final layer linear.

    Accepts a single vector or a (B, in) batch; `params` may be MlpParams or
    an already-bound layer list.
    """
    if tape is None:
        tape = Tape()
    if not isinstance(x, Tensor):
        x = tape.tensor(x)
    else:
        tape = x.tape
    bound = params.bind(tape, trainable=True) if isinstance(params, MlpParams) else params
    single = x.data.ndim == 1
    if single:
        x = ad.reshape(x, (1, x.shape[0]))
    for weight, bias, activation in bound:
        if x.shape[1] != weight.shape[1]:
            raise ShapeMismatch(f"MLP input dim {x.shape[1]} != layer dim {weight.shape[1]}")
        x = ad.add(ad.matmul(x, weight, transpose_b=True), ad.expand_rows(bias, x.shape[0]))
        if activation == "relu":
            x = ad.relu(x)
    if single:
        x = ad.reshape(x, (x.shape[1],))
    return x


# ---------------------------------------------------------------------------
# Gradient reversal and losses
# ---------------------------------------------------------------------------


def grl_apply(x: Tensor) -> Tensor:
    """Gradient reversal: identity forward, upstream gradient times -1 backward."""
    tape = x.tape
    if tape is None:
        raise ValueError("grl_apply needs a taped tensor")
    out = Tensor(x.data.copy(), x.requires_grad, tape)
    if out.requires_grad:

        def backward() -> None:
            g = out.grad
            if g is None:
                return
            neg = -g
            x.grad = neg if x.grad is None else x.grad + neg

        tape.record(out, backward)
    return out


def triplet_loss(v_a: Tensor, v_p: Tensor, v_n: Tensor) -> Tensor:
    """Hinge on Euclidean distances: max{1 + D(v_a,v_p) - D(v_a,v_n), 0}.

    Margin fixed at 1. Vector inputs give a scalar; (B, k) inputs give one
    loss per row. The hinge's gradient is exactly zero when inactive.
    """
    d_ap = ad.sqrt_guarded(ad.squared_distance(v_a, v_p))
    d_an = ad.sqrt_guarded(ad.squared_distance(v_a, v_n))
    tape = d_ap.tape
    one = tape.tensor(np.ones(d_ap.shape))
    neg_one = tape.tensor(np.full(d_ap.shape, -1.0))
    return ad.relu(ad.add(ad.add(one, d_ap), ad.mul(d_an, neg_one)))


def bce_with_logits(logit: Tensor, label) -> Tensor:
    """Numerically stable binary cross-entropy from raw logits.

    Computes max(l, 0) - l*h + log(1 + exp(-|l|)) elementwise, which equals
    -[h log sigmoid(l) + (1-h) log(1 - sigmoid(l))] without overflow.
    """
    h = np.asarray(label, dtype=np.float64)
    if not np.isin(h, (0.0, 1.0)).all():
        raise InvalidLabel(f"labels must be 0 or 1, got {label!r}")
    if h.shape != logit.data.shape:
        if h.size == 1 and logit.data.size == 1:
            h = h.reshape(logit.data.shape)
        else:
            raise ShapeMismatch(f"label shape {h.shape} != logit shape {logit.data.shape}")
    tape = logit.tape
    l = logit.data
    value = np.maximum(l, 0.0) - l * h + np.log1p(np.exp(-np.abs(l)))
    out = Tensor(value, logit.requires_grad, tape)
    if out.requires_grad:

        def backward() -> None:
            g = out.grad
            if g is None:
                return
            gl = g * (expit(l) - h)
            logit.grad = gl if logit.grad is None else logit.grad + gl

        tape.record(out, backward)
    return out


def mse_loss(a_hat: Tensor, a) -> Tensor:
    """Squared error (a_hat - a)^2 elementwise; batch mean is the caller's job."""
    target = np.asarray(a, dtype=np.float64)
    if target.shape != a_hat.data.shape:
        if target.size == 1 and a_hat.data.size == 1:
            target = target.reshape(a_hat.data.shape)
        else:
            raise ShapeMismatch(f"target shape {target.shape} != prediction shape {a_hat.data.shape}")
    if not np.isfinite(target).all():
        raise NonFinite("mse target contains NaN or Inf")
    tape = a_hat.tape
    diff = a_hat.data - target
    out = Tensor(diff * diff, a_hat.requires_grad, tape)
    if out.requires_grad:

        def backward() -> None:
            g = out.grad
            if g is None:
                return
            gd = g * (2.0 * diff)
            a_hat.grad = gd if a_hat.grad is None else a_hat.grad + gd

        tape.record(out, backward)
    return out


# ---------------------------------------------------------------------------
# AdamW
# ---------------------------------------------------------------------------


@dataclass
class AdamWState:
    """Per-parameter moments plus hyperparameters for decoupled weight decay."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], **hyper) -> "AdamWState":
        state = cls(**hyper)
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
        return state


def adamw_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray | None],
    state: AdamWState,
) -> AdamWState:
    """One AdamW update, in place on the parameter arrays.

    theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * theta)
    with bias-corrected moments; a None gradient is treated as zero.
    """
    if len(params) != len(state.m):
        raise ShapeMismatch("optimizer state does not match parameter list")
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p)
        else:
            if g.shape != p.shape:
                raise ShapeMismatch(f"grad shape {g.shape} != param shape {p.shape}")
            if not np.isfinite(g).all():
                raise NonFinite("gradient contains NaN or Inf")
        m = state.m[i]
        v = state.v[i]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        if state.weight_decay != 0.0:
            update = update + state.weight_decay * p
        p -= state.lr * update
    return state

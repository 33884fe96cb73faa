"""Minimal dense-network stack with reverse-mode gradients.

A ``Tape`` records every operation applied to ``Var`` nodes (numpy
arrays); ``Tape.backward`` replays them in reverse and accumulates exact
gradients into the participating ``Param`` objects. Layers sharing a
``Param`` (the two-encoder shared head) accumulate through the same
storage automatically. No graphs survive across steps: one tape per
forward pass, one backward per tape.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError

ACTIVATIONS = ("relu", "softplus", "identity", "softmax", "sigmoid")


# ---------------------------------------------------------------------------
# Parameters and tape


class Param:
    """A trainable array with a persistent gradient accumulator."""

    __slots__ = ("value", "grad", "name")

    def __init__(self, value, name=""):
        self.value = np.asarray(value, dtype=float)
        self.grad = np.zeros_like(self.value)
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad.fill(0.0)

    def __repr__(self):
        return f"Param({self.name or 'unnamed'}, shape={self.value.shape})"


class Var:
    """A node on a tape: a value plus the backward rule that produced it."""

    __slots__ = ("value", "tape", "grad", "_backward", "param")

    # keep numpy from hijacking ndarray <op> Var; reflected ops run instead
    __array_ufunc__ = None

    def __init__(self, value, tape, backward=None, param=None):
        self.value = np.asarray(value, dtype=float)
        self.tape = tape
        self.grad = None
        self._backward = backward
        self.param = param

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, _negated(other))

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _negated(x):
    return neg(x) if isinstance(x, Var) else -np.asarray(x, dtype=float)


class Tape:
    """Operation recorder; owns the reverse pass."""

    def __init__(self):
        self._nodes: list[Var] = []
        self._leaves: dict[int, Var] = {}
        self._consumed = False

    def node(self, value, backward=None, param=None) -> Var:
        v = Var(value, self, backward, param)
        self._nodes.append(v)
        return v

    def leaf(self, param: Param) -> Var:
        """The unique Var bound to ``param`` on this tape."""
        v = self._leaves.get(id(param))
        if v is None:
            v = self.node(param.value, param=param)
            self._leaves[id(param)] = v
        return v

    def backward(self, out: Var, seed=1.0) -> None:
        """Propagate d(out)/d(everything); accumulates into Param.grad."""
        if self._consumed:
            raise ContractError("tape already backpropagated")
        if not isinstance(out, Var) or out.tape is not self:
            raise ContractError("backward target was not recorded on this tape")
        self._consumed = True
        out.grad = np.broadcast_to(np.asarray(seed, dtype=float), out.value.shape).copy()
        # creation order is topological, so one reverse sweep suffices
        for v in reversed(self._nodes):
            if v.grad is None:
                continue
            if v.param is not None:
                v.param.grad += v.grad
            if v._backward is not None:
                v._backward(v.grad)


def _val(x):
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=float)


def _tape_of(*xs) -> Tape:
    tape = None
    for x in xs:
        if isinstance(x, Var):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise ContractError("operands come from different tapes")
    if tape is None:
        raise ContractError("at least one operand must be a tape Var")
    return tape


def _accum(x, g):
    if isinstance(x, Var):
        if x.grad is None:
            x.grad = np.zeros_like(x.value)
        x.grad += g


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Primitive ops


def add(a, b):
    tape = _tape_of(a, b)
    av, bv = _val(a), _val(b)

    def backward(g):
        _accum(a, _unbroadcast(g, av.shape))
        _accum(b, _unbroadcast(g, bv.shape))

    return tape.node(av + bv, backward)


def neg(a):
    tape = _tape_of(a)

    def backward(g):
        _accum(a, -g)

    return tape.node(-_val(a), backward)


def mul(a, b):
    tape = _tape_of(a, b)
    av, bv = _val(a), _val(b)

    def backward(g):
        _accum(a, _unbroadcast(g * bv, av.shape))
        _accum(b, _unbroadcast(g * av, bv.shape))

    return tape.node(av * bv, backward)


def reciprocal(a):
    tape = _tape_of(a)
    av = _val(a)
    out = 1.0 / av

    def backward(g):
        _accum(a, -g * out * out)

    return tape.node(out, backward)


def matmul(a, b):
    tape = _tape_of(a, b)
    av, bv = _val(a), _val(b)
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ContractError(f"matmul shape mismatch: {av.shape} @ {bv.shape}")

    def backward(g):
        _accum(a, g @ bv.T)
        _accum(b, av.T @ g)

    return tape.node(av @ bv, backward)


def exp(a):
    tape = _tape_of(a)
    out = np.exp(_val(a))

    def backward(g):
        _accum(a, g * out)

    return tape.node(out, backward)


def relu(a):
    tape = _tape_of(a)
    av = _val(a)
    mask = av > 0

    def backward(g):
        _accum(a, g * mask)

    return tape.node(np.where(mask, av, 0.0), backward)


def _sigmoid_np(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    tape = _tape_of(a)
    out = _sigmoid_np(_val(a))

    def backward(g):
        _accum(a, g * out * (1.0 - out))

    return tape.node(out, backward)


def _softplus_np(x):
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)


def softplus(a):
    tape = _tape_of(a)
    av = _val(a)
    sig = _sigmoid_np(av)

    def backward(g):
        _accum(a, g * sig)

    return tape.node(_softplus_np(av), backward)


def _softmax_np(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows(a):
    tape = _tape_of(a)
    out = _softmax_np(_val(a))

    def backward(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        _accum(a, out * (g - dot))

    return tape.node(out, backward)


def sum_all(a):
    tape = _tape_of(a)
    av = _val(a)

    def backward(g):
        _accum(a, np.broadcast_to(g, av.shape).copy())

    return tape.node(av.sum(), backward)


def mean_all(a):
    tape = _tape_of(a)
    av = _val(a)
    n = av.size

    def backward(g):
        _accum(a, np.broadcast_to(g / n, av.shape).copy())

    return tape.node(av.mean(), backward)


def sum_axis(a, axis, keepdims=True):
    tape = _tape_of(a)
    av = _val(a)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, av.shape).copy())

    return tape.node(av.sum(axis=axis, keepdims=keepdims), backward)


def cols(a, start, stop):
    """Column slice [start:stop] of a 2D node."""
    tape = _tape_of(a)
    av = _val(a)

    def backward(g):
        full = np.zeros_like(av)
        full[:, start:stop] = g
        _accum(a, full)

    return tape.node(av[:, start:stop].copy(), backward)


def take_cols(a, index):
    """Column gather by integer index array (indices must be unique)."""
    tape = _tape_of(a)
    av = _val(a)
    index = np.asarray(index, dtype=int)

    def backward(g):
        full = np.zeros_like(av)
        full[:, index] = g
        _accum(a, full)

    return tape.node(av[:, index].copy(), backward)


def hstack(parts):
    """Concatenate 2D nodes/constants along columns."""
    tape = _tape_of(*parts)
    values = [_val(p) for p in parts]
    widths = [v.shape[1] for v in values]
    offsets = np.concatenate([[0], np.cumsum(widths)])

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            _accum(p, g[:, lo:hi])

    return tape.node(np.concatenate(values, axis=1), backward)


def grad_reverse(a, scale):
    """Identity forward; multiplies the upstream gradient by -scale."""
    if scale < 0:
        raise ContractError(f"grad_reverse scale must be >= 0, got {scale}")
    tape = _tape_of(a)

    def backward(g):
        _accum(a, -scale * g)

    return tape.node(_val(a).copy(), backward)


def custom(tape: Tape, value, vjps):
    """Node with caller-supplied vector-Jacobian products.

    ``vjps`` is a list of ``(input, fn)`` pairs; each ``fn`` maps the
    upstream gradient to that input's gradient contribution.
    """

    def backward(g):
        for x, fn in vjps:
            _accum(x, fn(g))

    return tape.node(value, backward)


def reparam_gaussian(mu, log_var, noise):
    """Draw mu + exp(log_var / 2) * eps with gradients through both."""
    shape = _val(mu).shape
    if shape != _val(log_var).shape:
        raise ContractError(
            f"reparam shape mismatch: {shape} vs {_val(log_var).shape}"
        )
    eps = noise.normal(shape)
    return add(mu, mul(exp(mul(log_var, 0.5)), eps)), eps


# ---------------------------------------------------------------------------
# Noise sources (capture/replay keeps finite-difference checks deterministic)


class RngNoise:
    def __init__(self, rng: np.random.Generator):
        self.rng = rng

    def normal(self, shape):
        return self.rng.standard_normal(shape)


class RecordingNoise(RngNoise):
    def __init__(self, rng):
        super().__init__(rng)
        self.draws: list[np.ndarray] = []

    def normal(self, shape):
        draw = super().normal(shape)
        self.draws.append(draw)
        return draw


class ReplayNoise:
    def __init__(self, draws):
        self.draws = list(draws)
        self._i = 0

    def normal(self, shape):
        if self._i >= len(self.draws):
            raise ContractError("replay noise exhausted")
        draw = self.draws[self._i]
        if draw.shape != tuple(shape):
            raise ContractError(
                f"replay noise shape mismatch: {draw.shape} vs {tuple(shape)}"
            )
        self._i += 1
        return draw

    def rewind(self):
        self._i = 0


# ---------------------------------------------------------------------------
# Dense networks


_ACT_OPS = {
    "relu": relu,
    "softplus": softplus,
    "identity": lambda v: v,
    "softmax": softmax_rows,
    "sigmoid": sigmoid,
}

_ACT_NP = {
    "relu": lambda x: np.maximum(x, 0.0),
    "softplus": _softplus_np,
    "identity": lambda x: x,
    "softmax": _softmax_np,
    "sigmoid": _sigmoid_np,
}


class DenseLayer:
    """Affine map plus activation tag; weights are (in, out)."""

    def __init__(self, weight: Param, bias: Param, activation: str):
        if activation not in ACTIVATIONS:
            raise ContractError(f"unknown activation {activation!r}")
        if weight.value.ndim != 2 or bias.value.shape != (weight.value.shape[1],):
            raise ContractError("layer weight/bias shapes are inconsistent")
        self.weight = weight
        self.bias = bias
        self.activation = activation

    @property
    def in_width(self):
        return self.weight.value.shape[0]

    @property
    def out_width(self):
        return self.weight.value.shape[1]


def glorot_layer(in_width, out_width, activation, rng, name=""):
    bound = math.sqrt(6.0 / (in_width + out_width))
    w = Param(rng.uniform(-bound, bound, size=(in_width, out_width)), f"{name}.W")
    b = Param(np.zeros(out_width), f"{name}.b")
    return DenseLayer(w, b, activation)


class DenseNet:
    """A chain of DenseLayers. Layer objects may be shared across nets."""

    def __init__(self, layers):
        layers = list(layers)
        if not layers:
            raise ContractError("DenseNet needs at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.out_width != nxt.in_width:
                raise ContractError(
                    f"layer widths do not chain: {prev.out_width} -> {nxt.in_width}"
                )
        for layer in layers[:-1]:
            if layer.activation == "softmax":
                raise ContractError("softmax is only valid as the final activation")
        self.layers = layers

    @property
    def input_width(self):
        return self.layers[0].in_width

    @property
    def output_width(self):
        return self.layers[-1].out_width

    def params(self):
        out = []
        for layer in self.layers:
            out.extend([layer.weight, layer.bias])
        return out

    def forward(self, x, tape: Tape | None = None):
        """Apply the network; records on ``tape`` when given.

        Accepts a (batch, in_width) array/Var; with ``tape=None`` a bare
        vector is also accepted and a vector is returned.
        """
        squeeze = False
        if tape is None and not isinstance(x, Var):
            x = np.asarray(x, dtype=float)
            if x.ndim == 1:
                x = x[None, :]
                squeeze = True
        width = _val(x).shape[-1] if isinstance(x, Var) else x.shape[-1]
        if width != self.input_width:
            raise ContractError(
                f"input width {width} does not match network input {self.input_width}"
            )
        h = x
        if tape is None:
            for layer in self.layers:
                h = _ACT_NP[layer.activation](h @ layer.weight.value + layer.bias.value)
            return h[0] if squeeze else h
        for layer in self.layers:
            pre = add(matmul(h, tape.leaf(layer.weight)), tape.leaf(layer.bias))
            h = _ACT_OPS[layer.activation](pre)
        return h

    # -- serialization ------------------------------------------------

    def spec(self):
        return [
            {"in": l.in_width, "out": l.out_width, "activation": l.activation}
            for l in self.layers
        ]

    def arrays(self, prefix=""):
        out = {}
        for i, layer in enumerate(self.layers):
            out[f"{prefix}layer{i}.W"] = layer.weight.value
            out[f"{prefix}layer{i}.b"] = layer.bias.value
        return out

    @classmethod
    def from_spec(cls, spec, arrays, prefix=""):
        layers = []
        for i, entry in enumerate(spec):
            w = Param(arrays[f"{prefix}layer{i}.W"], f"{prefix}layer{i}.W")
            b = Param(arrays[f"{prefix}layer{i}.b"], f"{prefix}layer{i}.b")
            layers.append(DenseLayer(w, b, entry["activation"]))
        return cls(layers)

    def to_bytes(self) -> bytes:
        from . import blob

        return blob.pack({"kind": "dense_net", "layers": self.spec()}, self.arrays())

    @classmethod
    def from_bytes(cls, data: bytes) -> "DenseNet":
        from . import blob

        meta, arrays = blob.unpack(data)
        return cls.from_spec(meta["layers"], arrays)


def collect_params(*sources) -> list[Param]:
    """Unique Params from nets/layers/params, in first-seen order."""
    seen = {}
    for src in sources:
        if isinstance(src, Param):
            items = [src]
        elif isinstance(src, DenseLayer):
            items = [src.weight, src.bias]
        elif isinstance(src, DenseNet):
            items = src.params()
        else:
            items = list(src)
        for p in items:
            seen.setdefault(id(p), p)
    return list(seen.values())


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: list = field(default_factory=list)
    second_moment: list = field(default_factory=list)


class Adam:
    """Adam with bias correction over a fixed parameter list."""

    def __init__(self, params, learning_rate=1e-3, beta1=0.9, beta2=0.999,
                 epsilon=1e-8):
        self.params = list(params)
        self.state = AdamState(
            learning_rate=learning_rate,
            beta1=beta1,
            beta2=beta2,
            epsilon=epsilon,
            first_moment=[np.zeros_like(p.value) for p in self.params],
            second_moment=[np.zeros_like(p.value) for p in self.params],
        )

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        s = self.state
        s.step_count += 1
        c1 = 1.0 - s.beta1**s.step_count
        c2 = 1.0 - s.beta2**s.step_count
        for p, m, v in zip(self.params, s.first_moment, s.second_moment):
            g = p.grad
            if g.shape != p.value.shape:
                raise ContractError(
                    f"gradient shape {g.shape} does not match {p.value.shape}"
                )
            m *= s.beta1
            m += (1.0 - s.beta1) * g
            v *= s.beta2
            v += (1.0 - s.beta2) * g * g
            p.value -= s.learning_rate * (m / c1) / (np.sqrt(v / c2) + s.epsilon)

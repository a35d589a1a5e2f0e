"""Dense ReLU networks over flat parameter vectors.

Parameters for a network with widths ``(w_0, ..., w_L)`` are stored layer by
layer as ``W_l.ravel()`` (shape ``w_{l-1} x w_l``, row-major) followed by
``b_l``.  The output layer has width 1 and is read as a logit; probabilities
come from a sigmoid on top of it.

Only the derivatives the condensation loop needs are provided: the parameter
gradient of the mean binary cross-entropy, and the input gradient of its inner
product with a fixed parameter-space vector.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

PROB_CLAMP = 1e-12


@dataclass(frozen=True)
class MlpSpec:
    layer_widths: tuple[int, ...]
    activation: str = "relu"
    dropout_rate: float = 0.0
    seed: int = 0
    _offsets: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 2:
            raise ValueError("layer_widths needs at least an input and an output width")
        if any(w < 1 for w in widths):
            raise ValueError(f"layer widths must be positive, got {widths}")
        if widths[-1] != 1:
            raise ValueError("final width must be 1 (binary output)")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        offsets = []
        pos = 0
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            w_end = pos + fan_in * fan_out
            offsets.append((pos, w_end, w_end + fan_out, fan_in, fan_out))
            pos = w_end + fan_out
        object.__setattr__(self, "_offsets", tuple(offsets))

    @property
    def input_dim(self) -> int:
        return self.layer_widths[0]

    @property
    def n_params(self) -> int:
        return self._offsets[-1][2]

    @classmethod
    def hidden(cls, input_dim: int, hidden: list[int] | tuple[int, ...], **kwargs) -> "MlpSpec":
        return cls((input_dim, *hidden, 1), **kwargs)

    def layers(self, params: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        """Views ``(W, b)`` into ``params`` for each layer."""
        if params.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got shape {params.shape}")
        return [
            (params[s:w].reshape(fi, fo), params[w:e])
            for s, w, e, fi, fo in self._offsets
        ]

    def bias_mask(self) -> np.ndarray:
        mask = np.zeros(self.n_params, dtype=bool)
        for _, w, e, _, _ in self._offsets:
            mask[w:e] = True
        return mask

    def to_dict(self) -> dict:
        return {
            "layer_widths": list(self.layer_widths),
            "activation": self.activation,
            "dropout_rate": self.dropout_rate,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpSpec":
        return cls(
            tuple(d["layer_widths"]),
            activation=d.get("activation", "relu"),
            dropout_rate=float(d.get("dropout_rate", 0.0)),
            seed=int(d.get("seed", 0)),
        )


@dataclass(frozen=True)
class Batch:
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.inputs, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.float64)
        if x.ndim != 2:
            raise ValueError("batch inputs must be a matrix")
        if y.shape != (x.shape[0],):
            raise ValueError(f"labels shape {y.shape} does not match {x.shape[0]} inputs")
        if x.shape[0] < 1:
            raise ValueError("empty batch")
        if not (np.all(np.isfinite(x)) and np.all((y == 0) | (y == 1))):
            raise ValueError("batch must hold finite inputs and binary labels")
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return self.inputs.shape[0]


def init_params(spec: MlpSpec, seed: int | None = None) -> np.ndarray:
    """Kaiming-uniform weights (ReLU gain), zero biases."""
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    params = np.zeros(spec.n_params)
    for (W, _), (_, _, _, fan_in, _) in zip(spec.layers(params), spec._offsets):
        bound = np.sqrt(6.0 / fan_in)
        W[...] = rng.uniform(-bound, bound, size=W.shape)
    return params


def _check_inputs(spec: MlpSpec, inputs: np.ndarray) -> np.ndarray:
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ValueError(f"inputs must have shape (b, {spec.input_dim}), got {x.shape}")
    return x


def _forward_cache(spec, params, x, dropout_rng=None):
    """Run the network, keeping pre-activations and the masks needed for backprop.

    Masks combine the ReLU gate and (when ``dropout_rng`` is given) the scaled
    inverted-dropout mask.
    """
    layers = spec.layers(params)
    acts = [x]
    masks = []
    a = x
    keep = 1.0 - spec.dropout_rate
    for W, b in layers[:-1]:
        z = a @ W + b
        m = (z > 0).astype(np.float64)
        if dropout_rng is not None and spec.dropout_rate > 0:
            m *= (dropout_rng.random(z.shape) < keep) / keep
        a = z * m
        acts.append(a)
        masks.append(m)
    W, b = layers[-1]
    logits = (a @ W + b)[:, 0]
    return layers, acts, masks, logits


def forward_logits(spec: MlpSpec, params: np.ndarray, inputs: np.ndarray, dropout_rng=None) -> np.ndarray:
    x = _check_inputs(spec, inputs)
    return _forward_cache(spec, params, x, dropout_rng)[3]


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def forward(spec: MlpSpec, params: np.ndarray, inputs: np.ndarray, dropout_rng=None) -> np.ndarray:
    """Sigmoid output probabilities, one per input row."""
    return sigmoid(forward_logits(spec, params, inputs, dropout_rng))


def bce_loss(probs: np.ndarray, labels: np.ndarray) -> float:
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if p.shape != y.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {y.shape}")
    p = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log1p(-p)))


def _bce_from_logits(z: np.ndarray, y: np.ndarray) -> float:
    # softplus(z) - y*z, stable for large |z|
    return float(np.mean(np.logaddexp(0.0, z) - y * z))


def batch_loss(spec: MlpSpec, params: np.ndarray, batch: Batch) -> float:
    """Mean BCE over the batch, computed from logits.

    Agrees with ``bce_loss(forward(...))`` wherever the probability clamp is
    inactive, and is the function ``grad_params`` differentiates.
    """
    return _bce_from_logits(forward_logits(spec, params, batch.inputs), batch.labels)


def loss_and_grad(spec: MlpSpec, params: np.ndarray, batch: Batch, dropout_rng=None) -> tuple[float, np.ndarray]:
    x = _check_inputs(spec, batch.inputs)
    y = batch.labels
    layers, acts, masks, z = _forward_cache(spec, params, x, dropout_rng)
    loss = _bce_from_logits(z, y)
    grad = np.empty_like(params)
    glayers = spec.layers(grad)
    delta = ((sigmoid(z) - y) / len(y))[:, None]
    for l in range(len(layers) - 1, -1, -1):
        gW, gb = glayers[l]
        gW[...] = acts[l].T @ delta
        gb[...] = delta.sum(axis=0)
        if l > 0:
            delta = (delta @ layers[l][0].T) * masks[l - 1]
    return loss, grad


def grad_params(spec: MlpSpec, params: np.ndarray, batch: Batch, dropout_rng=None) -> np.ndarray:
    """Gradient of the mean BCE over ``batch`` with respect to ``params``."""
    return loss_and_grad(spec, params, batch, dropout_rng)[1]


def grad_inputs_of_inner_product(spec: MlpSpec, params: np.ndarray, batch: Batch, v: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the batch inputs of ``<grad_params(params, batch), v>``.

    ``v`` is held constant.  The inner product equals the directional
    derivative of the batch loss along ``v``, so it is computed with a forward
    tangent pass, and the input gradient by backpropagating through both the
    primal and the tangent pass.  ReLU gates are piecewise constant in the
    inputs and contribute nothing.
    """
    x = _check_inputs(spec, batch.inputs)
    v = np.asarray(v, dtype=np.float64)
    y = batch.labels
    b = len(y)
    layers, acts, masks, z = _forward_cache(spec, params, x)
    vlayers = spec.layers(v)

    # tangent pass: zdot_l = adot_{l-1} W_l + a_{l-1} V_l + c_l, adot_0 = 0
    adot = None
    zdots = []
    for l, ((W, _), (V, c)) in enumerate(zip(layers, vlayers)):
        zd = acts[l] @ V + c
        if adot is not None:
            zd = zd + adot @ W
        zdots.append(zd)
        if l < len(layers) - 1:
            adot = zd * masks[l]

    p = sigmoid(z)
    # s = (1/b) sum (p - y) * zdot_L
    bar_zdot = ((p - y) / b)[:, None]
    bar_z = (p * (1.0 - p) * zdots[-1][:, 0] / b)[:, None]
    for l in range(len(layers) - 1, -1, -1):
        W, _ = layers[l]
        V, _ = vlayers[l]
        bar_a = bar_z @ W.T + bar_zdot @ V.T
        if l == 0:
            return bar_a
        bar_adot = bar_zdot @ W.T
        bar_zdot = bar_adot * masks[l - 1]
        bar_z = bar_a * masks[l - 1]
    raise AssertionError("unreachable")


def sgd_step(
    params: np.ndarray,
    grad: np.ndarray,
    lr: float,
    momentum_state: np.ndarray,
    momentum: float = 0.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Heavy-ball SGD: ``v <- m v + g``, ``p <- p - lr v``."""
    velocity = momentum * momentum_state + grad
    return params - lr * velocity, velocity

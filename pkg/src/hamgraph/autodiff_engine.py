"""Small dense networks with hand-written derivatives, plus Adam.

Everything here is plain numpy. The networks are tiny (a few dense layers,
tanh hidden units, scalar output), but training needs more than parameter
gradients: the physics loss is built from d(encoder)/d(input), so its
parameter gradient is a second-order quantity. Rather than pull in a
framework, the forward pass, the tangent (directional) pass and the reverse
pass over both are written out explicitly.

Shape conventions: a network with layer widths ``[d0, d1, ..., dL]`` stores
``weights[k]`` with shape ``(d_{k+1}, d_k)`` and ``biases[k]`` with shape
``(d_{k+1},)``. Batched inputs are ``(B, d0)``. The final layer is linear
with width 1 and scalar outputs come back as ``(B,)``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ValidationError

ACTIVATIONS = ("tanh", "identity")


@dataclass
class EncoderParams:
    """Weights of one encoder network.

    ``activation`` applies to every layer except the last, which is always
    linear. A single-layer network is therefore purely linear regardless of
    the activation setting.
    """

    weights: list
    biases: list
    activation: str = "tanh"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValidationError(
                f"unknown activation {self.activation!r}, expected one of {ACTIVATIONS}"
            )
        if not self.weights or len(self.weights) != len(self.biases):
            raise ValidationError(
                f"need equally many weight and bias arrays, got "
                f"{len(self.weights)} weights / {len(self.biases)} biases"
            )
        self.weights = [np.asarray(w, dtype=float) for w in self.weights]
        self.biases = [np.asarray(b, dtype=float) for b in self.biases]
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
                raise ValidationError(
                    f"layer {k}: weight {w.shape} and bias {b.shape} do not form a dense layer"
                )
            if k > 0 and w.shape[1] != self.weights[k - 1].shape[0]:
                raise ValidationError(
                    f"layer {k}: input width {w.shape[1]} does not match "
                    f"previous output width {self.weights[k - 1].shape[0]}"
                )
        if self.weights[-1].shape[0] != 1:
            raise ValidationError(
                f"final layer must have output width 1, got {self.weights[-1].shape[0]}"
            )

    @property
    def widths(self):
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    def param_list(self):
        """Flat list of parameter arrays, weights interleaved with biases."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def with_param_list(self, arrays) -> "EncoderParams":
        """Rebuild an encoder from the layout produced by param_list."""
        n = len(self.weights)
        if len(arrays) != 2 * n:
            raise ValidationError(f"expected {2 * n} arrays, got {len(arrays)}")
        return EncoderParams(
            weights=[arrays[2 * k] for k in range(n)],
            biases=[arrays[2 * k + 1] for k in range(n)],
            activation=self.activation,
        )


def init_encoder(widths, activation: str = "tanh", *, rng=None, seed=None) -> EncoderParams:
    """Glorot-uniform weights, zero biases.

    ``widths`` includes the input and output dims, e.g. ``[4, 32, 32, 1]``.
    """
    if rng is None:
        rng = np.random.default_rng(seed)
    if len(widths) < 2:
        raise ValidationError(f"widths needs at least input and output dims, got {widths}")
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return EncoderParams(weights=weights, biases=biases, activation=activation)


def encoder_to_dict(params: EncoderParams) -> dict:
    return {
        "activation": params.activation,
        "widths": params.widths,
        "weights": [w.tolist() for w in params.weights],
        "biases": [b.tolist() for b in params.biases],
    }


def encoder_from_dict(d: dict) -> EncoderParams:
    try:
        enc = EncoderParams(
            weights=[np.array(w, dtype=float) for w in d["weights"]],
            biases=[np.array(b, dtype=float) for b in d["biases"]],
            activation=d.get("activation", "tanh"),
        )
    except KeyError as err:
        raise ValidationError(f"encoder dict missing key {err}") from err
    if "widths" in d and list(d["widths"]) != enc.widths:
        raise ValidationError(f"declared widths {d['widths']} != actual {enc.widths}")
    return enc


def _slope(a, activation):
    # sigma'(z) expressed through the stored activation a = sigma(z)
    if activation == "tanh":
        return 1.0 - a * a
    return np.ones_like(a)


def forward(params: EncoderParams, x):
    """Batched forward pass.

    Returns ``(y, acts)`` with ``y`` of shape ``(B,)`` and ``acts`` the list
    ``[A_0, ..., A_{L-1}]`` of layer inputs (``A_0`` is ``x`` itself); these
    are exactly what the gradient passes below need.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] != params.in_dim:
        raise ValidationError(
            f"input shape {x.shape} does not match encoder input width {params.in_dim}"
        )
    acts = [x]
    a = x
    L = len(params.weights)
    for k in range(L - 1):
        z = a @ params.weights[k].T + params.biases[k]
        a = np.tanh(z) if params.activation == "tanh" else z
        acts.append(a)
    y = a @ params.weights[-1].T + params.biases[-1]
    return y[:, 0], acts


def encoder_eval(params: EncoderParams, x):
    """Scalar network value; accepts one input vector or a batch."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    y, _ = forward(params, x[None, :] if single else x)
    return float(y[0]) if single else y


def input_gradient(params: EncoderParams, acts):
    """d f / d x for every row of the batch, from a stored forward pass."""
    L = len(params.weights)
    p = np.ones((acts[0].shape[0], 1))
    for k in range(L - 1, 0, -1):
        g = p @ params.weights[k]
        p = g * _slope(acts[k], params.activation)
    return p @ params.weights[0]


def grad_wrt_input(params: EncoderParams, x):
    """Convenience single-input wrapper around input_gradient."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    _, acts = forward(params, x[None, :] if single else x)
    g = input_gradient(params, acts)
    return g[0] if single else g


def directional_param_grads(params: EncoderParams, acts, direction, coef):
    """Parameter gradient of S = sum_b coef_b * (direction_b . df/dx (x_b)).

    df/dx is itself a backward pass, so dS/dtheta is second order. It is
    computed with a tangent sweep that pushes ``direction`` through the
    network,

        Zdot_k = Adot_{k-1} W_k^T,   Adot_k = sigma'(Z_k) * Zdot_k,

    whose scalar output is s_b = direction_b . df/dx(x_b), followed by one
    reverse sweep over the joint (primal, tangent) graph. The adjoint pair
    (RZ, RZdot) starts at RZdot_L = coef, RZ_L = 0; crossing an activation
    mixes the pair through sigma' and sigma''.

    Returns ``(s, grads)`` where ``s`` has shape ``(B,)`` (not scaled by
    ``coef``) and ``grads`` is a list of ``(dW_k, db_k)`` tuples.
    """
    L = len(params.weights)
    act = params.activation
    slopes = [None] + [_slope(acts[k], act) for k in range(1, L)]
    adots = [np.asarray(direction, dtype=float)]
    zdots = [None]
    for k in range(L - 1):
        zd = adots[k] @ params.weights[k].T
        zdots.append(zd)
        adots.append(slopes[k + 1] * zd)
    s = (adots[L - 1] @ params.weights[-1].T)[:, 0]

    coef = np.asarray(coef, dtype=float)[:, None]
    rz = np.zeros_like(coef)
    rzd = coef
    grads = [None] * L
    for k in range(L - 1, -1, -1):
        dw = rz.T @ acts[k] + rzd.T @ adots[k]
        db = rz.sum(axis=0)
        grads[k] = (dw, db)
        if k > 0:
            ra = rz @ params.weights[k]
            rad = rzd @ params.weights[k]
            sp = slopes[k]
            # tanh curvature through the stored activation: -2 a (1 - a^2)
            curv = -2.0 * acts[k] * sp if act == "tanh" else 0.0
            rz = ra * sp + rad * curv * zdots[k]
            rzd = rad * sp
    return s, grads


@dataclass
class AdamState:
    """First/second moment accumulators plus hyperparameters.

    ``m``/``v`` mirror the structure of the parameter list being optimized.
    """

    m: list
    v: list
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(params, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> AdamState:
    return AdamState(
        m=[np.zeros_like(p) for p in params],
        v=[np.zeros_like(p) for p in params],
        step=0, lr=lr, beta1=beta1, beta2=beta2, eps=eps,
    )


def adam_state_to_dict(state: AdamState) -> dict:
    return {
        "step": state.step, "lr": state.lr, "beta1": state.beta1,
        "beta2": state.beta2, "eps": state.eps,
        "m": [a.tolist() for a in state.m],
        "v": [a.tolist() for a in state.v],
    }


def adam_state_from_dict(d: dict) -> AdamState:
    try:
        return AdamState(
            m=[np.array(a, dtype=float) for a in d["m"]],
            v=[np.array(a, dtype=float) for a in d["v"]],
            step=int(d["step"]), lr=float(d["lr"]),
            beta1=float(d["beta1"]), beta2=float(d["beta2"]),
            eps=float(d["eps"]),
        )
    except KeyError as err:
        raise ValidationError(f"optimizer state dict missing key {err}") from err


def adam_step(params, grads, state: AdamState):
    """One Adam update with bias correction; returns (new_params, new_state)."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValidationError(
            f"param/grad/state length mismatch: {len(params)}/{len(grads)}/{len(state.m)}"
        )
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        step = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_params.append(p - step)
        new_m.append(m)
        new_v.append(v)
    return new_params, replace(state, m=new_m, v=new_v, step=t)

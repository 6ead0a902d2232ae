"""Graph Hamiltonian surrogates and the physics-residual training loop.

The surrogate is a weighted sum of encoder outputs over a site graph,

    H(q, p) = sum_k sum_{i in nodes_k} g_noc^k(n_i)
            + sum_k sum_{(i,j) in edges_k} w_ij * g_enc^k(e_ij),

with n_i and e_ij the feature maps from feature_builder. One GraphModel
covers both stages of the pipeline: the dense structure learner uses a
single encoder pair, every ordered pair (i, j) including i = j assigned to
edge group 0, and a trainable weight matrix; the pruned per-cluster
predictor uses several encoders, a sparse assignment and frozen weights.

Training minimizes the mean squared residual of Hamilton's equations,

    loss = mean_b [ ||dH/dp - dq_b||^2 + ||dH/dq + dp_b||^2 ] + gamma * R(W),

so the parameter gradient goes through dH/d(q,p), i.e. through the
input-gradients of the encoders. That second-order step is assembled here
from the exact passes in autodiff_engine; per ordered pair the chain rule
through the feature map gives the directional input perturbation

    d(e_ij) . v = [vq_j - vq_i, vp_j - vp_i,
                   vq_j q_i + q_j vq_i, vp_j p_i + p_j vp_i]

with (vq, vp) the residual adjoints, and w_ij enters as the coefficient of
that directional derivative (plus the regularizer term for dloss/dw_ij).
Site scatter/gather uses precomputed 0/1 incidence matrices so every
reduction has a fixed order and results are bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace

import numpy as np

from .autodiff_engine import (
    adam_init,
    adam_step,
    directional_param_grads,
    encoder_from_dict,
    encoder_to_dict,
    forward,
    init_encoder,
    input_gradient,
)
from .errors import NumericalError, ValidationError
from .feature_builder import edge_features, node_features

REGULARIZERS = ("frobenius", "l1")
DERIVATIVE_MODES = ("exact", "finite_difference")


@dataclass
class GraphModel:
    """Adjacency + encoders + group assignments defining a learned Hamiltonian.

    ``edge_assign[i, j]`` names the edge-encoder index of ordered pair
    (i, j), or -1 if the pair is absent. ``node_assign[i]`` names the
    node-encoder index of site i (every site must have one). When
    ``train_weights`` is False the adjacency is frozen and only encoder
    parameters are trainable.
    """

    n_sites: int
    weights: np.ndarray
    edge_assign: np.ndarray
    node_assign: np.ndarray
    edge_encoders: list
    node_encoders: list
    train_weights: bool = True

    def __post_init__(self):
        n = self.n_sites
        self.weights = np.asarray(self.weights, dtype=float)
        self.edge_assign = np.asarray(self.edge_assign, dtype=int)
        self.node_assign = np.asarray(self.node_assign, dtype=int)
        if self.weights.shape != (n, n) or self.edge_assign.shape != (n, n):
            raise ValidationError(
                f"weights {self.weights.shape} and edge_assign {self.edge_assign.shape} "
                f"must both be ({n}, {n})"
            )
        if not np.isfinite(self.weights).all():
            raise ValidationError("adjacency contains non-finite entries")
        if self.node_assign.shape != (n,):
            raise ValidationError(f"node_assign must have shape ({n},)")
        if self.edge_assign.max(initial=-1) >= len(self.edge_encoders) or \
                self.edge_assign.min(initial=0) < -1:
            raise ValidationError("edge_assign refers to a missing edge encoder")
        if self.node_assign.min(initial=0) < 0 or \
                self.node_assign.max(initial=-1) >= len(self.node_encoders):
            raise ValidationError("every site needs a valid node encoder index")
        for enc in self.edge_encoders:
            if enc.in_dim != 4:
                raise ValidationError(f"edge encoder expects input width 4, got {enc.in_dim}")
        for enc in self.node_encoders:
            if enc.in_dim != 2:
                raise ValidationError(f"node encoder expects input width 2, got {enc.in_dim}")
        self._build_groups()

    def _build_groups(self):
        n = self.n_sites
        self._edge_groups = []
        for k in range(len(self.edge_encoders)):
            ii, jj = np.nonzero(self.edge_assign == k)
            inc_i = np.zeros((len(ii), n))
            inc_j = np.zeros((len(jj), n))
            inc_i[np.arange(len(ii)), ii] = 1.0
            inc_j[np.arange(len(jj)), jj] = 1.0
            self._edge_groups.append((ii, jj, inc_i, inc_j))
        self._node_groups = []
        for k in range(len(self.node_encoders)):
            idx = np.nonzero(self.node_assign == k)[0]
            inc = np.zeros((len(idx), n))
            inc[np.arange(len(idx)), idx] = 1.0
            self._node_groups.append((idx, inc))

    def trainable_params(self):
        """Flat parameter-array list in a fixed order (adjacency first)."""
        params = [self.weights] if self.train_weights else []
        for enc in self.edge_encoders + self.node_encoders:
            params.extend(enc.param_list())
        return params

    def set_trainable_params(self, arrays):
        """Rebind parameters from the trainable_params layout, in place."""
        pos = 0
        if self.train_weights:
            self.weights = np.asarray(arrays[0], dtype=float)
            pos = 1
        for enc in self.edge_encoders + self.node_encoders:
            n = 2 * len(enc.weights)
            new = enc.with_param_list(arrays[pos:pos + n])
            enc.weights, enc.biases = new.weights, new.biases
            pos += n
        if pos != len(arrays):
            raise ValidationError(f"expected {pos} parameter arrays, got {len(arrays)}")


def build_structure_model(n_sites: int, hidden=(100, 100), seed: int = 0,
                          weight_scale: float = 0.1) -> GraphModel:
    """Dense single-encoder model: all ordered pairs (including self-pairs)
    share one edge encoder, all sites share one node encoder, adjacency
    initialized i.i.d. uniform on [0, weight_scale]."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    weights = rng.uniform(0.0, weight_scale, size=(n_sites, n_sites))
    edge_enc = init_encoder([4, *hidden, 1], rng=rng)
    node_enc = init_encoder([2, *hidden, 1], rng=rng)
    return GraphModel(
        n_sites=n_sites,
        weights=weights,
        edge_assign=np.zeros((n_sites, n_sites), dtype=int),
        node_assign=np.zeros(n_sites, dtype=int),
        edge_encoders=[edge_enc],
        node_encoders=[node_enc],
        train_weights=True,
    )


def _as_state_batch(q, p):
    q = np.asarray(q, dtype=float)
    p = np.asarray(p, dtype=float)
    single = q.ndim == 1
    if single:
        q, p = q[None, :], p[None, :]
    return q, p, single


def _field_pass(model: GraphModel, q, p, keep_caches: bool):
    """Hamiltonian value, dH/dq, dH/dp for a (B, N) state batch.

    Optionally keeps per-group forward caches for the second-order pass.
    """
    b, n = q.shape
    if n != model.n_sites:
        raise ValidationError(f"state has {n} sites, model expects {model.n_sites}")
    nf = node_features(q, p)
    ef = edge_features(q, p)
    value = np.zeros(b)
    dhdq = np.zeros((b, n))
    dhdp = np.zeros((b, n))
    edge_caches, node_caches = [], []
    for k, enc in enumerate(model.edge_encoders):
        ii, jj, inc_i, inc_j = model._edge_groups[k]
        m = len(ii)
        if m == 0:
            edge_caches.append(None)
            continue
        x = ef[:, ii, jj, :].reshape(b * m, 4)
        y, acts = forward(enc, x)
        g = input_gradient(enc, acts).reshape(b, m, 4)
        w = model.weights[ii, jj]
        value += (y.reshape(b, m) * w).sum(axis=1)
        qi, qj = q[:, ii], q[:, jj]
        pi, pj = p[:, ii], p[:, jj]
        dhdq += (w * (-g[..., 0] + g[..., 2] * qj)) @ inc_i
        dhdq += (w * (g[..., 0] + g[..., 2] * qi)) @ inc_j
        dhdp += (w * (-g[..., 1] + g[..., 3] * pj)) @ inc_i
        dhdp += (w * (g[..., 1] + g[..., 3] * pi)) @ inc_j
        edge_caches.append(acts if keep_caches else None)
    for k, enc in enumerate(model.node_encoders):
        idx, inc = model._node_groups[k]
        m = len(idx)
        if m == 0:
            node_caches.append(None)
            continue
        x = nf[:, idx, :].reshape(b * m, 2)
        y, acts = forward(enc, x)
        g = input_gradient(enc, acts).reshape(b, m, 2)
        value += y.reshape(b, m).sum(axis=1)
        qi, pi = q[:, idx], p[:, idx]
        dhdq += (g[..., 0] + g[..., 1] * pi) @ inc
        dhdp += (-g[..., 0] + g[..., 1] * qi) @ inc
        node_caches.append(acts if keep_caches else None)
    return value, dhdq, dhdp, edge_caches, node_caches


def surrogate_hamiltonian(model: GraphModel, q, p):
    """Learned energy; accepts one state (N,) or a batch (B, N)."""
    q, p, single = _as_state_batch(q, p)
    value, _, _, _, _ = _field_pass(model, q, p, keep_caches=False)
    return float(value[0]) if single else value


def state_gradient(model: GraphModel, q, p):
    """(dH/dq, dH/dp) of the learned energy; batched like the input."""
    q, p, single = _as_state_batch(q, p)
    _, dhdq, dhdp, _, _ = _field_pass(model, q, p, keep_caches=False)
    return (dhdq[0], dhdp[0]) if single else (dhdq, dhdp)


def _as_sample_batch(batch):
    """Accepts (q, p, dq, dp) arrays or a list of per-sample 4-tuples."""
    if isinstance(batch, (list, tuple)) and len(batch) > 0 and \
            isinstance(batch[0], (list, tuple)):
        qs, ps, dqs, dps = zip(*batch)
        return (np.stack([np.asarray(a, dtype=float) for a in qs]),
                np.stack([np.asarray(a, dtype=float) for a in ps]),
                np.stack([np.asarray(a, dtype=float) for a in dqs]),
                np.stack([np.asarray(a, dtype=float) for a in dps]))
    if isinstance(batch, (list, tuple)) and len(batch) == 4:
        q, p, dq, dp = (np.asarray(a, dtype=float) for a in batch)
        if q.ndim == 1:
            q, p, dq, dp = q[None], p[None], dq[None], dp[None]
        return q, p, dq, dp
    raise ValidationError("batch must be (q, p, dq, dp) arrays or a list of 4-tuples")


def _reg_value(weights, kind: str) -> float:
    if kind == "frobenius":
        return float(np.sum(weights * weights))
    if kind == "l1":
        return float(np.sum(np.abs(weights)))
    raise ValidationError(f"unknown regularizer {kind!r}, expected one of {REGULARIZERS}")


def _reg_grad(weights, kind: str):
    if kind == "frobenius":
        return 2.0 * weights
    return np.sign(weights)


def physics_residual(model: GraphModel, sample) -> float:
    """Squared residual of Hamilton's equations for one annotated sample."""
    q, p, dq, dp = _as_sample_batch(sample if len(sample) == 4 else tuple(sample))
    _, dhdq, dhdp, _, _ = _field_pass(model, q, p, keep_caches=False)
    rq = dhdp - dq
    rp = dhdq + dp
    return float(np.sum(rq * rq) + np.sum(rp * rp))


def total_loss(model: GraphModel, batch, config) -> float:
    """Mean physics residual plus gamma times the adjacency regularizer."""
    q, p, dq, dp = _as_sample_batch(batch)
    _, dhdq, dhdp, _, _ = _field_pass(model, q, p, keep_caches=False)
    rq = dhdp - dq
    rp = dhdq + dp
    delta = np.sum(rq * rq, axis=1) + np.sum(rp * rp, axis=1)
    loss = float(delta.mean())
    if config.gamma:
        loss += config.gamma * _reg_value(model.weights, config.regularizer)
    return loss


def loss_param_gradient(model: GraphModel, batch, loss_spec):
    """Loss and its exact gradient for every trainable parameter.

    ``loss_spec`` needs fields gamma and regularizer (a TrainConfig works).
    Returns (loss, grads) with grads aligned with model.trainable_params().
    The residual part threads through the encoder input-gradients, so each
    encoder gets one tangent-plus-reverse sweep per batch; everything is
    evaluated in a fixed order for determinism.
    """
    q, p, dq, dp = _as_sample_batch(batch)
    b = q.shape[0]
    _, dhdq, dhdp, edge_caches, node_caches = _field_pass(model, q, p, keep_caches=True)
    rq = dhdp - dq
    rp = dhdq + dp
    delta = np.sum(rq * rq, axis=1) + np.sum(rp * rp, axis=1)
    if not np.isfinite(delta).all():
        bad = int(np.nonzero(~np.isfinite(delta))[0][0])
        raise NumericalError(f"non-finite physics residual at batch sample {bad}")
    loss = float(delta.mean())
    gamma = getattr(loss_spec, "gamma", 0.0)
    reg_kind = getattr(loss_spec, "regularizer", "frobenius")
    if gamma:
        loss += gamma * _reg_value(model.weights, reg_kind)

    # adjoints of the mean residual w.r.t. the field components
    vq = (2.0 / b) * rp  # matches dH/dq
    vp = (2.0 / b) * rq  # matches dH/dp

    w_grad = np.zeros_like(model.weights) if model.train_weights else None
    edge_grads, node_grads = [], []
    for k, enc in enumerate(model.edge_encoders):
        ii, jj, _, _ = model._edge_groups[k]
        m = len(ii)
        if m == 0:
            edge_grads.append([(np.zeros_like(w), np.zeros_like(bb))
                               for w, bb in zip(enc.weights, enc.biases)])
            continue
        d0 = vq[:, jj] - vq[:, ii]
        d1 = vp[:, jj] - vp[:, ii]
        d2 = vq[:, jj] * q[:, ii] + q[:, jj] * vq[:, ii]
        d3 = vp[:, jj] * p[:, ii] + p[:, jj] * vp[:, ii]
        direction = np.stack([d0, d1, d2, d3], axis=-1).reshape(b * m, 4)
        w = model.weights[ii, jj]
        coef = np.broadcast_to(w, (b, m)).reshape(b * m)
        s, grads = directional_param_grads(enc, edge_caches[k], direction, coef)
        edge_grads.append(grads)
        if w_grad is not None:
            w_grad[ii, jj] += s.reshape(b, m).sum(axis=0)
    for k, enc in enumerate(model.node_encoders):
        idx, _ = model._node_groups[k]
        m = len(idx)
        if m == 0:
            node_grads.append([(np.zeros_like(w), np.zeros_like(bb))
                               for w, bb in zip(enc.weights, enc.biases)])
            continue
        dn0 = vq[:, idx] - vp[:, idx]
        dn1 = vq[:, idx] * p[:, idx] + q[:, idx] * vp[:, idx]
        direction = np.stack([dn0, dn1], axis=-1).reshape(b * m, 2)
        _, grads = directional_param_grads(enc, node_caches[k], direction,
                                           np.ones(b * m))
        node_grads.append(grads)

    flat = []
    if w_grad is not None:
        if gamma:
            w_grad = w_grad + gamma * _reg_grad(model.weights, reg_kind)
        flat.append(w_grad)
    for grads in edge_grads + node_grads:
        for dw, db in grads:
            flat.extend((dw, db))
    return loss, flat


@dataclass
class TrainConfig:
    """Settings shared by the structure and predictor training loops."""

    epochs: int = 2000
    batch_size: int = 256
    lr_schedule: tuple = ((1, 1e-3),)
    gamma: float = 0.05
    regularizer: str = "frobenius"
    derivative_mode: str = "exact"
    seed: int = 0
    hidden: tuple = (100, 100)
    weight_scale: float = 0.1

    def __post_init__(self):
        if self.epochs <= 0 or self.batch_size <= 0:
            raise ValidationError("epochs and batch_size must be positive")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValidationError(f"gamma must lie in [0, 1], got {self.gamma}")
        if self.regularizer not in REGULARIZERS:
            raise ValidationError(
                f"regularizer must be one of {REGULARIZERS}, got {self.regularizer!r}"
            )
        if self.derivative_mode not in DERIVATIVE_MODES:
            raise ValidationError(
                f"derivative_mode must be one of {DERIVATIVE_MODES}, "
                f"got {self.derivative_mode!r}"
            )
        self.lr_schedule = tuple((int(e), float(lr)) for e, lr in self.lr_schedule)
        if not self.lr_schedule or self.lr_schedule[0][0] != 1:
            raise ValidationError("lr_schedule must start at epoch 1")
        epochs_ = [e for e, _ in self.lr_schedule]
        if epochs_ != sorted(set(epochs_)) or any(lr <= 0 for _, lr in self.lr_schedule):
            raise ValidationError("lr_schedule epochs must increase and rates be positive")
        self.hidden = tuple(int(h) for h in self.hidden)
        if any(h < 1 for h in self.hidden):
            raise ValidationError("hidden widths must be positive")


def train_config_to_dict(config: TrainConfig) -> dict:
    return {
        "epochs": config.epochs, "batch_size": config.batch_size,
        "lr_schedule": [[e, lr] for e, lr in config.lr_schedule],
        "gamma": config.gamma, "regularizer": config.regularizer,
        "derivative_mode": config.derivative_mode, "seed": config.seed,
        "hidden": list(config.hidden), "weight_scale": config.weight_scale,
    }


def train_config_from_dict(d: dict) -> TrainConfig:
    allowed = {f.name for f in fields(TrainConfig)}
    unknown = set(d) - allowed
    if unknown:
        raise ValidationError(f"unknown training config keys {sorted(unknown)}")
    return TrainConfig(**d)


def _lr_at(schedule, epoch: int) -> float:
    lr = schedule[0][1]
    for start, value in schedule:
        if epoch >= start:
            lr = value
    return lr


def training_samples(dataset, split: str, mode: str):
    """Stacked (q, p, dq, dp) arrays for one split.

    ``exact`` uses the stored derivative annotations; ``finite_difference``
    ignores them and takes central differences of the sampled states (the
    two endpoint samples of each trajectory are dropped).
    """
    trajs = dataset.splits.get(split, [])
    if not trajs:
        raise ValidationError(f"dataset has no {split!r} trajectories")
    qs, ps, dqs, dps = [], [], [], []
    for traj in trajs:
        if mode == "exact":
            if traj.dq is None or traj.dp is None:
                raise ValidationError("exact derivative mode needs annotated trajectories")
            qs.append(traj.q)
            ps.append(traj.p)
            dqs.append(traj.dq)
            dps.append(traj.dp)
        elif mode == "finite_difference":
            dt = float(traj.t[1] - traj.t[0])
            qs.append(traj.q[1:-1])
            ps.append(traj.p[1:-1])
            dqs.append((traj.q[2:] - traj.q[:-2]) / (2.0 * dt))
            dps.append((traj.p[2:] - traj.p[:-2]) / (2.0 * dt))
        else:
            raise ValidationError(f"unknown derivative mode {mode!r}")
    return (np.concatenate(qs), np.concatenate(ps),
            np.concatenate(dqs), np.concatenate(dps))


def run_training(model: GraphModel, samples, config: TrainConfig, *, shuffle_seed):
    """Adam loop over shuffled mini-batches.

    The model is updated in place; returns (history, adam_state) with one
    sample-weighted mean batch loss per epoch and the final optimizer state.
    """
    q, p, dq, dp = samples
    n = q.shape[0]
    rng = np.random.default_rng(shuffle_seed)
    params = model.trainable_params()
    state = adam_init(params, lr=_lr_at(config.lr_schedule, 1))
    history = []
    for epoch in range(1, config.epochs + 1):
        state = replace(state, lr=_lr_at(config.lr_schedule, epoch))
        perm = rng.permutation(n)
        total, seen = 0.0, 0
        for lo in range(0, n, config.batch_size):
            sel = perm[lo:lo + config.batch_size]
            batch = (q[sel], p[sel], dq[sel], dp[sel])
            try:
                loss, grads = loss_param_gradient(model, batch, config)
            except NumericalError as err:
                raise NumericalError(f"epoch {epoch}: {err}") from err
            if not np.isfinite(loss):
                raise NumericalError(f"training diverged at epoch {epoch}")
            params, state = adam_step(params, grads, state)
            model.set_trainable_params(params)
            total += loss * len(sel)
            seen += len(sel)
        history.append(total / seen)
    return history, state


def train_structure(dataset, config: TrainConfig):
    """Fit the dense structure model on the train split.

    Returns (model, history). Deterministic given config.seed: one child
    seed initializes the parameters, another drives the batch shuffling.
    """
    ss = np.random.SeedSequence(config.seed)
    init_ss, shuffle_ss = ss.spawn(2)
    n_sites = dataset.system.n_sites
    rng = np.random.default_rng(init_ss)
    weights = rng.uniform(0.0, config.weight_scale, size=(n_sites, n_sites))
    model = GraphModel(
        n_sites=n_sites,
        weights=weights,
        edge_assign=np.zeros((n_sites, n_sites), dtype=int),
        node_assign=np.zeros(n_sites, dtype=int),
        edge_encoders=[init_encoder([4, *config.hidden, 1], rng=rng)],
        node_encoders=[init_encoder([2, *config.hidden, 1], rng=rng)],
        train_weights=True,
    )
    samples = training_samples(dataset, "train", config.derivative_mode)
    history, _ = run_training(model, samples, config, shuffle_seed=shuffle_ss)
    return model, history


def split_residual(model: GraphModel, dataset, split: str,
                   mode: str = "exact") -> float:
    """Mean physics residual of a model over one dataset split."""
    q, p, dq, dp = training_samples(dataset, split, mode)
    out = 0.0
    step = 4096
    for lo in range(0, q.shape[0], step):
        _, dhdq, dhdp, _, _ = _field_pass(model, q[lo:lo + step], p[lo:lo + step],
                                          keep_caches=False)
        rq = dhdp - dq[lo:lo + step]
        rp = dhdq + dp[lo:lo + step]
        out += float(np.sum(rq * rq) + np.sum(rp * rp))
    return out / q.shape[0]


def model_to_dict(model: GraphModel) -> dict:
    return {
        "n_sites": model.n_sites,
        "weights": model.weights.tolist(),
        "edge_assign": model.edge_assign.tolist(),
        "node_assign": model.node_assign.tolist(),
        "edge_encoders": [encoder_to_dict(e) for e in model.edge_encoders],
        "node_encoders": [encoder_to_dict(e) for e in model.node_encoders],
        "train_weights": model.train_weights,
    }


def model_from_dict(doc: dict) -> GraphModel:
    try:
        return GraphModel(
            n_sites=int(doc["n_sites"]),
            weights=np.array(doc["weights"], dtype=float),
            edge_assign=np.array(doc["edge_assign"], dtype=int),
            node_assign=np.array(doc["node_assign"], dtype=int),
            edge_encoders=[encoder_from_dict(e) for e in doc["edge_encoders"]],
            node_encoders=[encoder_from_dict(e) for e in doc["node_encoders"]],
            train_weights=bool(doc["train_weights"]),
        )
    except KeyError as err:
        raise ValidationError(f"model document missing key {err}") from err

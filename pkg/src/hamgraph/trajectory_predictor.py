"""Per-cluster Hamiltonian surrogates on the pruned interaction graph.

After the adjacency has been learned and partitioned, each effective
off-diagonal cluster gets its own edge encoder and each diagonal cluster
its own node encoder.  The adjacency is frozen: only encoder parameters
train, under the same physics-residual loss as the structure stage.
Long-horizon predictions come from integrating the learned field
(dH/dp, -dH/dq) with the same RK4 stepper the data generator uses.
"""

from dataclasses import dataclass, replace

import numpy as np

from .autodiff_engine import adam_state_from_dict, adam_state_to_dict, init_encoder
from .edge_partitioner import ClusterPartition, partition_from_dict, partition_to_dict
from .errors import ValidationError
from .lattice_bench import Trajectory, _steps_for, integrate_field
from .structure_learner import (
    GraphModel,
    TrainConfig,
    model_from_dict,
    model_to_dict,
    run_training,
    state_gradient,
    surrogate_hamiltonian,
    train_config_from_dict,
    train_config_to_dict,
    training_samples,
)

# keeps the batch-shuffle stream disjoint from encoder-init streams even
# when the same seed feeds both
_SHUFFLE_STREAM = 0x73687566


def _encoder_bank(n_edge: int, n_node: int, hidden, seed: int):
    """Independently seeded encoders: edge encoders first, then node."""
    kids = np.random.SeedSequence(seed).spawn(n_edge + n_node)
    edge = [init_encoder([4, *hidden, 1], rng=np.random.default_rng(k))
            for k in kids[:n_edge]]
    node = [init_encoder([2, *hidden, 1], rng=np.random.default_rng(k))
            for k in kids[n_edge:]]
    return edge, node


def build_subgraph_model(part: ClusterPartition, weights, hidden=(100, 100),
                         seed: int = 0) -> GraphModel:
    """Frozen-adjacency model with one encoder per effective cluster.

    Edge encoder k serves off-diagonal cluster k (ascending centroid
    order), node encoder k serves diagonal cluster k. Pruned pairs are
    absent; diagonal adjacency entries are retained in the matrix but
    unused, since on-site terms enter unweighted through node encoders.
    """
    pruned = part.pruned_weights(weights)
    n = part.n_sites
    edge_assign = np.full((n, n), -1, dtype=int)
    for k, cid in enumerate(part.off_ids):
        rows, cols = part.members(cid)
        edge_assign[rows, cols] = k
    node_assign = np.full(n, -1, dtype=int)
    for k, cid in enumerate(part.diag_ids):
        rows, _ = part.members(cid)
        node_assign[rows] = k
    missing = np.nonzero(node_assign < 0)[0]
    if missing.size:
        raise ValidationError(
            f"sites {missing.tolist()} belong to no diagonal cluster; "
            "every site needs an on-site encoder"
        )
    edge_enc, node_enc = _encoder_bank(part.v, part.u, hidden, seed)
    return GraphModel(
        n_sites=n,
        weights=pruned,
        edge_assign=edge_assign,
        node_assign=node_assign,
        edge_encoders=edge_enc,
        node_encoders=node_enc,
        train_weights=False,
    )


def subgraph_hamiltonian(model: GraphModel, q, p):
    """Learned energy of the per-cluster model; one state or a batch."""
    return surrogate_hamiltonian(model, q, p)


def learned_field(model: GraphModel, q, p):
    """Hamiltonian vector field (dq/dt, dp/dt) = (dH/dp, -dH/dq)."""
    dhdq, dhdp = state_gradient(model, q, p)
    return dhdp, -dhdq


def _train_frozen(dataset, model: GraphModel, config: TrainConfig):
    if model.train_weights:
        raise ValidationError(
            "predictor training requires a frozen adjacency (train_weights=False)"
        )
    samples = training_samples(dataset, "train", config.derivative_mode)
    shuffle_ss = np.random.SeedSequence((config.seed, _SHUFFLE_STREAM))
    history, state = run_training(model, samples, config, shuffle_seed=shuffle_ss)
    return model, history, state


def train_predictor(dataset, model: GraphModel, config: TrainConfig):
    """Fit the encoder parameters on the train split; adjacency stays fixed.

    Returns (model, history). Deterministic given config.seed; the shuffle
    stream is derived from (seed, tag) so it never collides with the
    encoder-init streams of the model builders.
    """
    model, history, _ = _train_frozen(dataset, model, config)
    return model, history


def oracle_variant(weights, part: ClusterPartition, dataset, config: TrainConfig):
    """Fixed-weight ablation: one shared encoder pair on the dense graph.

    The adjacency is the learned matrix with every raw noise-cluster entry
    set to zero (diagonal included). Zero-weight pairs are skipped when the
    edge group is built; they contribute exactly nothing to the energy, the
    field, or any gradient, so this is a pure cost optimization. Trains
    with the regularizer switched off and returns (model, history).
    """
    model = build_oracle_model(part, weights, config.hidden, config.seed)
    return train_predictor(dataset, model, replace(config, gamma=0.0))


def build_oracle_model(part: ClusterPartition, weights, hidden=(100, 100),
                       seed: int = 0) -> GraphModel:
    """Untrained fixed-weight ablation model (see oracle_variant)."""
    w0 = part.noise_zeroed_weights(weights)
    n = part.n_sites
    edge_assign = np.where(w0 != 0.0, 0, -1).astype(int)
    edge_enc, node_enc = _encoder_bank(1, 1, hidden, seed)
    return GraphModel(
        n_sites=n,
        weights=w0,
        edge_assign=edge_assign,
        node_assign=np.zeros(n, dtype=int),
        edge_encoders=edge_enc,
        node_encoders=node_enc,
        train_weights=False,
    )


def predictor_checkpoint(model: GraphModel, part: ClusterPartition,
                         config: TrainConfig, history, adam_state=None) -> dict:
    """JSON-serializable bundle of everything a trained predictor is."""
    doc = {
        "schema_version": 1,
        "model": model_to_dict(model),
        "partition": partition_to_dict(part),
        "config": train_config_to_dict(config),
        "history": [float(x) for x in history],
    }
    if adam_state is not None:
        doc["adam_state"] = adam_state_to_dict(adam_state)
    return doc


def load_predictor_checkpoint(doc: dict):
    """Inverse of predictor_checkpoint.

    Returns (model, partition, config, history, adam_state); the optimizer
    state is None when the bundle carries none.
    """
    try:
        model = model_from_dict(doc["model"])
        part = partition_from_dict(doc["partition"])
        config = train_config_from_dict(doc["config"])
        history = [float(x) for x in doc["history"]]
    except KeyError as err:
        raise ValidationError(f"checkpoint missing key {err}") from err
    state = None
    if doc.get("adam_state") is not None:
        state = adam_state_from_dict(doc["adam_state"])
    return model, part, config, history, state


@dataclass
class RolloutResult:
    """Predicted trajectory plus integrator bookkeeping."""

    trajectory: Trajectory
    field_evaluations: int
    integrator: dict


def _integrate_model(model: GraphModel, q0, p0, t_end: float, dt: float,
                     store_every: int):
    steps = _steps_for(t_end, dt)

    def field(q, p):
        return learned_field(model, q, p)

    t, qs, ps = integrate_field(field, q0, p0, dt, steps, store_every)
    meta = {"method": "rk4", "dt": dt, "store_every": store_every,
            "field_evals_per_step": 4}
    return t, qs, ps, 4 * steps, meta


def rollout(model: GraphModel, q0, p0, t_end: float, dt: float = 1e-3,
            store_every: int = 50) -> RolloutResult:
    """Integrate the learned field from one initial condition."""
    q0 = np.asarray(q0, dtype=float)
    p0 = np.asarray(p0, dtype=float)
    if q0.ndim != 1 or q0.shape != p0.shape:
        raise ValidationError(
            f"initial condition must be a matching 1-D pair, got {q0.shape}/{p0.shape}"
        )
    t, qs, ps, evals, meta = _integrate_model(model, q0, p0, t_end, dt, store_every)
    return RolloutResult(Trajectory(t=t, q=qs, p=ps), evals, meta)


def rollout_batch(model: GraphModel, q0, p0, t_end: float, dt: float = 1e-3,
                  store_every: int = 50) -> list:
    """Integrate several initial conditions in one batched time march.

    All trajectories share the integrator work; the reported evaluation
    count is the total number of (batched) field calls.
    """
    q0 = np.asarray(q0, dtype=float)
    p0 = np.asarray(p0, dtype=float)
    if q0.ndim != 2 or q0.shape != p0.shape:
        raise ValidationError(
            f"batched initial conditions must be matching (M, N), got {q0.shape}/{p0.shape}"
        )
    t, qs, ps, evals, meta = _integrate_model(model, q0, p0, t_end, dt, store_every)
    return [RolloutResult(Trajectory(t=t, q=qs[:, m], p=ps[:, m]), evals, meta)
            for m in range(q0.shape[0])]

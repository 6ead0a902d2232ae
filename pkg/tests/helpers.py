"""Shared test utilities: hand-built models, finite-difference oracles,
and an on-disk cache for generated datasets."""

import hashlib
import json
import os
from dataclasses import asdict

import numpy as np

from hamgraph.autodiff_engine import EncoderParams
from hamgraph.lattice_bench import GenConfig, generate_dataset, load_dataset
from hamgraph.structure_learner import GraphModel, total_loss


def cache_root() -> str:
    """Artifact cache shared across pytest runs; HAMGRAPH_TEST_CACHE moves it."""
    root = os.environ.get(
        "HAMGRAPH_TEST_CACHE",
        os.path.join(os.path.dirname(__file__), os.pardir, ".cache"),
    )
    os.makedirs(root, exist_ok=True)
    return root


def cached_dataset(config: GenConfig):
    """Generate-or-load a dataset, keyed by the full generation config.

    Regeneration is bit-identical (seeded), so reusing the serialized file
    across test runs is safe; set HAMGRAPH_TEST_CACHE to relocate the cache.
    """
    root = cache_root()
    key = hashlib.sha256(
        json.dumps(asdict(config), sort_keys=True).encode()
    ).hexdigest()[:16]
    path = os.path.join(root, f"dataset-{key}.json")
    if os.path.exists(path):
        return load_dataset(path)
    return generate_dataset(config, path=path)


def cached_json(tag: str, key_doc, builder):
    """Build-or-load a JSON-serializable result, keyed by a config document.

    Only sound for deterministic builders; the key must capture everything
    the result depends on.
    """
    key = hashlib.sha256(
        json.dumps(key_doc, sort_keys=True).encode()
    ).hexdigest()[:16]
    path = os.path.join(cache_root(), f"{tag}-{key}.json")
    if os.path.exists(path):
        with open(path) as fh:
            return json.load(fh)
    result = builder()
    with open(path, "w") as fh:
        json.dump(result, fh)
    return result


def ring_distance(i, j, n):
    d = abs(i - j)
    return min(d, n - d)


def banded_adjacency(n, bands, noise_scale=1e-3, seed=0):
    """Symmetric ring adjacency: entries at ring distance d get bands[d],
    everything else (diagonal included) gets uniform noise."""
    rng = np.random.default_rng(seed)
    w = rng.uniform(-noise_scale, noise_scale, size=(n, n))
    for i in range(n):
        for j in range(n):
            d = ring_distance(i, j, n)
            if i != j and d in bands:
                w[i, j] = bands[d]
    return w


def linear_encoder(row, activation="identity"):
    """Single linear layer mapping a feature vector to row . x."""
    row = np.asarray(row, dtype=float)
    return EncoderParams(weights=[row[None, :]], biases=[np.zeros(1)],
                         activation=activation)


def zero_encoder(width_in, hidden=()):
    widths = [width_in, *hidden, 1]
    weights = [np.zeros((b, a)) for a, b in zip(widths[:-1], widths[1:])]
    biases = [np.zeros(b) for b in widths[1:]]
    return EncoderParams(weights=weights, biases=biases)


def make_harmonic_model(n):
    """Self-edge-only model realizing H = sum_i (q_i^2 + p_i^2) / 2 exactly.

    The self-edge feature is [0, 0, q^2, p^2]; a linear encoder picking
    (e2 + e3)/2 with unit diagonal weights reproduces the harmonic energy,
    so the learned field is (p, -q).
    """
    edge_assign = np.full((n, n), -1, dtype=int)
    np.fill_diagonal(edge_assign, 0)
    return GraphModel(
        n_sites=n,
        weights=np.eye(n),
        edge_assign=edge_assign,
        node_assign=np.zeros(n, dtype=int),
        edge_encoders=[linear_encoder([0.0, 0.0, 0.5, 0.5])],
        node_encoders=[zero_encoder(2)],
        train_weights=False,
    )


def fd_loss_gradient(model, batch, spec, h=1e-5):
    """Central finite differences of total_loss over every trainable array."""
    grads = []
    for arr in model.trainable_params():
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = arr[idx]
            arr[idx] = orig + h
            up = total_loss(model, batch, spec)
            arr[idx] = orig - h
            dn = total_loss(model, batch, spec)
            arr[idx] = orig
            g[idx] = (up - dn) / (2.0 * h)
        grads.append(g)
    return grads


def max_rel_error(got, expected):
    scale = max(1.0, max(float(np.max(np.abs(e))) for e in expected))
    worst = max(float(np.max(np.abs(g - e))) for g, e in zip(got, expected))
    return worst / scale

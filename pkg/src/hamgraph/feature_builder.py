"""State-to-feature maps for node and edge encoders.

A site carries canonical coordinates (q_i, p_i). The node feature is

    n_i = [q_i - p_i, q_i * p_i]

and the edge feature for the ordered pair (i, j), with h = (q, p), is

    e_ij = [h_j - h_i, h_j * h_i]

i.e. the difference block followed by the elementwise-product block. For
scalar sites that is [q_j - q_i, p_j - p_i, q_j q_i, p_j p_i]. The batched
builders below produce the full feature tensors a lattice model consumes.
"""

from __future__ import annotations

import numpy as np

from .errors import ValidationError


def node_feature(q_i, p_i):
    """Feature [q - p, q * p] for one site; works for d-dimensional sites."""
    q_i = np.atleast_1d(np.asarray(q_i, dtype=float))
    p_i = np.atleast_1d(np.asarray(p_i, dtype=float))
    if q_i.shape != p_i.shape:
        raise ValidationError(f"q {q_i.shape} and p {p_i.shape} differ in shape")
    return np.concatenate([q_i - p_i, q_i * p_i])


def edge_feature(h_i, h_j):
    """Feature [h_j - h_i, h_j * h_i] for the ordered pair (i, j)."""
    h_i = np.atleast_1d(np.asarray(h_i, dtype=float))
    h_j = np.atleast_1d(np.asarray(h_j, dtype=float))
    if h_i.shape != h_j.shape:
        raise ValidationError(f"h_i {h_i.shape} and h_j {h_j.shape} differ in shape")
    return np.concatenate([h_j - h_i, h_j * h_i])


def node_features(q, p):
    """Node features for a batch of lattice states.

    q, p: (B, N) arrays. Returns (B, N, 2).
    """
    q = np.asarray(q, dtype=float)
    p = np.asarray(p, dtype=float)
    if q.shape != p.shape or q.ndim != 2:
        raise ValidationError(f"expected matching (B, N) arrays, got {q.shape} and {p.shape}")
    return np.stack([q - p, q * p], axis=-1)


def edge_features(q, p):
    """Edge features for every ordered pair of a batch of lattice states.

    q, p: (B, N) arrays. Returns (B, N, N, 4) indexed [b, i, j, component]
    with components (q_j - q_i, p_j - p_i, q_j q_i, p_j p_i). The diagonal
    holds self-pair features [0, 0, q_i^2, p_i^2].
    """
    q = np.asarray(q, dtype=float)
    p = np.asarray(p, dtype=float)
    if q.shape != p.shape or q.ndim != 2:
        raise ValidationError(f"expected matching (B, N) arrays, got {q.shape} and {p.shape}")
    qi, qj = q[:, :, None], q[:, None, :]
    pi, pj = p[:, :, None], p[:, None, :]
    return np.stack([qj - qi, pj - pi, qj * qi, pj * pi], axis=-1)

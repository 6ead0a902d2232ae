"""Cluster the entries of a learned adjacency matrix into coupling bands.

The learned matrix carries one scalar per ordered site pair (diagonal
included).  A 1-D k-means over all N^2 entries, with the cluster count
chosen by the silhouette criterion, splits them into a near-zero "noise"
class and a handful of effective coupling bands.  Off-diagonal noise
entries are pruned; clusters mixing diagonal and off-diagonal positions
are split by position; diagonal entries stranded in the noise class are
lifted into their own cluster so every site keeps an on-site term.
"""

from dataclasses import dataclass, field

import numpy as np
from sklearn.cluster import KMeans
from sklearn.metrics import silhouette_score

from .errors import ValidationError

PARITY_EVEN = "even"
PARITY_NON_EVEN = "non-even"
PARITY_ABSENT = "absent"

_SCHEMA_VERSION = 1


def kmeans_1d(values, k: int, seed: int = 0):
    """Best-of-10 Lloyd k-means on scalars; labels relabeled so centroids
    come out in ascending order.  Returns (labels, centroids)."""
    vals = np.asarray(values, dtype=float).ravel()
    if vals.size == 0:
        raise ValidationError("kmeans_1d needs at least one value")
    if not np.all(np.isfinite(vals)):
        raise ValidationError("kmeans_1d values must be finite")
    if k < 1:
        raise ValidationError(f"cluster count must be >= 1, got {k}")
    n_distinct = np.unique(vals).size
    if k > n_distinct:
        raise ValidationError(
            f"cluster count {k} exceeds distinct value count {n_distinct}"
        )
    km = KMeans(n_clusters=k, n_init=10, tol=0.0, max_iter=500,
                random_state=seed)
    raw = km.fit_predict(vals[:, None])
    centers = km.cluster_centers_.ravel()
    order = np.argsort(centers, kind="stable")
    relabel = np.empty(k, dtype=int)
    relabel[order] = np.arange(k)
    return relabel[raw], centers[order]


def silhouette(values, labels) -> float:
    """Mean silhouette score of a scalar clustering (Euclidean distance)."""
    vals = np.asarray(values, dtype=float).ravel()
    labels = np.asarray(labels)
    if vals.shape != labels.shape:
        raise ValidationError(
            f"values/labels length mismatch: {vals.size} vs {labels.size}"
        )
    ids, counts = np.unique(labels, return_counts=True)
    if ids.size < 2:
        raise ValidationError("silhouette needs at least 2 clusters")
    if counts.min() < 1:
        raise ValidationError("silhouette clusters must be nonempty")
    if ids.size >= vals.size:
        raise ValidationError(
            "silhouette undefined when every cluster is a singleton"
        )
    return float(silhouette_score(vals[:, None], labels))


def scan_silhouette(values, k_max: int, seed: int = 0) -> dict:
    """Silhouette score for each candidate k in {2..k_max}.

    The search range is capped by the distinct-value count (k-means cannot
    make more clusters than there are distinct scalars) and by n-1.
    """
    vals = np.asarray(values, dtype=float).ravel()
    if k_max < 2:
        raise ValidationError(f"k_max must be >= 2, got {k_max}")
    n_distinct = np.unique(vals).size
    top = min(k_max, n_distinct, vals.size - 1)
    if top < 2:
        raise ValidationError(
            f"need at least 2 distinct values to cluster, got {n_distinct}"
        )
    scores = {}
    for k in range(2, top + 1):
        labels, _ = kmeans_1d(vals, k, seed=seed)
        scores[k] = silhouette(vals, labels)
    return scores


def _best_k(scores: dict) -> int:
    # ties break toward the smaller k: strict improvement required
    best, best_score = None, -np.inf
    for k in sorted(scores):
        if scores[k] > best_score:
            best, best_score = k, scores[k]
    return best


def select_cluster_count(values, k_max: int, seed: int = 0) -> int:
    """Silhouette-optimal cluster count over k in {2..k_max}."""
    return _best_k(scan_silhouette(values, k_max, seed=seed))


@dataclass
class ClusterPartition:
    """Final clustering of an N x N adjacency into noise / edge / node groups.

    ``labels`` holds one final cluster id per entry, ids ordered ascending
    by centroid.  ``noise_id`` marks the near-zero class (smallest
    |centroid| among the raw k-means clusters); ``off_ids`` and ``diag_ids``
    list the effective off-diagonal and diagonal cluster ids.  ``noise_mask``
    records raw k-means noise membership before the position split and
    diagonal lift; it is what the pruning rules consume.  ``parity`` maps
    each unordered off-diagonal pair (i < j) to even / non-even / absent.
    """

    n_sites: int
    labels: np.ndarray
    centroids: np.ndarray
    noise_id: int
    off_ids: tuple
    diag_ids: tuple
    noise_mask: np.ndarray
    parity: dict
    k_raw: int
    lifted: bool
    silhouette_scores: dict = field(default_factory=dict)

    def __post_init__(self):
        n = self.n_sites
        self.labels = np.asarray(self.labels, dtype=int)
        self.centroids = np.asarray(self.centroids, dtype=float)
        self.noise_mask = np.asarray(self.noise_mask, dtype=bool)
        if self.labels.shape != (n, n) or self.noise_mask.shape != (n, n):
            raise ValidationError(
                f"label/noise mask shape must be ({n}, {n})"
            )
        ids = {self.noise_id, *self.off_ids, *self.diag_ids}
        if ids != set(range(len(self.centroids))):
            raise ValidationError(
                "cluster ids must cover 0..n_clusters-1 exactly once"
            )
        present = set(np.unique(self.labels))
        if not present <= ids:
            raise ValidationError(f"labels reference unknown clusters {present - ids}")

    @property
    def n_clusters(self) -> int:
        return len(self.centroids)

    @property
    def u(self) -> int:
        return len(self.diag_ids)

    @property
    def v(self) -> int:
        return len(self.off_ids)

    def members(self, cluster_id: int):
        """(row, col) index arrays of the entries in one final cluster."""
        return np.nonzero(self.labels == cluster_id)

    def pruned_weights(self, weights) -> np.ndarray:
        """Adjacency for the subgraph model: off-diagonal noise entries
        zeroed, everything else (diagonal included) kept as learned."""
        w = self._check_weights(weights).copy()
        off = ~np.eye(self.n_sites, dtype=bool)
        w[self.noise_mask & off] = 0.0
        return w

    def noise_zeroed_weights(self, weights) -> np.ndarray:
        """Adjacency with every raw noise-cluster entry zeroed, diagonal
        included; this is the matrix the fixed-weight ablation uses."""
        w = self._check_weights(weights).copy()
        w[self.noise_mask] = 0.0
        return w

    def _check_weights(self, weights) -> np.ndarray:
        w = np.asarray(weights, dtype=float)
        if w.shape != (self.n_sites, self.n_sites):
            raise ValidationError(
                f"weights shape {w.shape} != ({self.n_sites}, {self.n_sites})"
            )
        return w


def partition(weights, k_max: int = 8, seed: int = 0) -> ClusterPartition:
    """Full partition of a learned adjacency matrix.

    Runs the silhouette scan + k-means over all N^2 entries, identifies the
    noise class by smallest |centroid|, prunes off-diagonal noise, splits
    position-mixed effective clusters, and lifts an all-diagonal noise
    residue into its own cluster.
    """
    w = np.asarray(weights, dtype=float)
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise ValidationError(f"adjacency must be square, got shape {w.shape}")
    if not np.all(np.isfinite(w)):
        raise ValidationError("adjacency entries must be finite")
    n = w.shape[0]
    vals = w.ravel()

    scores = scan_silhouette(vals, k_max, seed=seed)
    k_star = _best_k(scores)
    raw_labels, raw_centroids = kmeans_1d(vals, k_star, seed=seed)
    raw_labels = raw_labels.reshape(n, n)
    raw_noise = int(np.argmin(np.abs(raw_centroids)))
    noise_mask = raw_labels == raw_noise

    diag = np.eye(n, dtype=bool)
    # derived clusters as (kind, boolean member mask) before final ordering
    groups = [("noise", noise_mask.copy())]
    for c in range(k_star):
        if c == raw_noise:
            continue
        mask = raw_labels == c
        has_diag = bool(np.any(mask & diag))
        has_off = bool(np.any(mask & ~diag))
        if has_diag and has_off:
            groups.append(("off", mask & ~diag))
            groups.append(("diag", mask & diag))
        elif has_diag:
            groups.append(("diag", mask))
        else:
            groups.append(("off", mask))

    lifted = bool(np.all(noise_mask[diag]))
    if lifted:
        groups[0] = ("noise", noise_mask & ~diag)
        groups.append(("diag", diag.copy()))

    # order final clusters ascending by member mean; an emptied noise class
    # keeps its raw centroid so the id space stays well defined
    def centroid_of(kind, mask):
        if not mask.any():
            return float(raw_centroids[raw_noise])
        return float(w[mask].mean())

    annotated = [(centroid_of(kind, mask), i, kind, mask)
                 for i, (kind, mask) in enumerate(groups)]
    annotated.sort(key=lambda t: (t[0], t[1]))

    labels = np.full((n, n), -1, dtype=int)
    centroids = np.empty(len(annotated))
    noise_id = -1
    off_ids, diag_ids = [], []
    for final_id, (cent, _, kind, mask) in enumerate(annotated):
        centroids[final_id] = cent
        labels[mask] = final_id
        if kind == "noise":
            noise_id = final_id
        elif kind == "off":
            off_ids.append(final_id)
        else:
            diag_ids.append(final_id)

    parity = {}
    off_present = ~noise_mask & ~diag
    for i in range(n):
        for j in range(i + 1, n):
            a, b = off_present[i, j], off_present[j, i]
            if not a and not b:
                parity[(i, j)] = PARITY_ABSENT
            elif a and b and labels[i, j] == labels[j, i]:
                parity[(i, j)] = PARITY_EVEN
            else:
                # different bands, or an edge present in one direction only
                parity[(i, j)] = PARITY_NON_EVEN

    return ClusterPartition(
        n_sites=n,
        labels=labels,
        centroids=centroids,
        noise_id=noise_id,
        off_ids=tuple(off_ids),
        diag_ids=tuple(diag_ids),
        noise_mask=noise_mask,
        parity=parity,
        k_raw=k_star,
        lifted=lifted,
        silhouette_scores=scores,
    )


def partition_to_dict(part: ClusterPartition) -> dict:
    return {
        "schema_version": _SCHEMA_VERSION,
        "n_sites": part.n_sites,
        "labels": part.labels.tolist(),
        "centroids": part.centroids.tolist(),
        "noise_id": part.noise_id,
        "off_ids": list(part.off_ids),
        "diag_ids": list(part.diag_ids),
        "noise_mask": part.noise_mask.astype(int).tolist(),
        "parity": {f"{i},{j}": flag for (i, j), flag in sorted(part.parity.items())},
        "k_raw": part.k_raw,
        "lifted": part.lifted,
        "silhouette_scores": {str(k): v for k, v in part.silhouette_scores.items()},
    }


def partition_from_dict(d: dict) -> ClusterPartition:
    try:
        parity = {}
        for key, flag in d["parity"].items():
            i, j = (int(s) for s in key.split(","))
            parity[(i, j)] = flag
        return ClusterPartition(
            n_sites=int(d["n_sites"]),
            labels=np.array(d["labels"], dtype=int),
            centroids=np.array(d["centroids"], dtype=float),
            noise_id=int(d["noise_id"]),
            off_ids=tuple(d["off_ids"]),
            diag_ids=tuple(d["diag_ids"]),
            noise_mask=np.array(d["noise_mask"], dtype=bool),
            parity=parity,
            k_raw=int(d["k_raw"]),
            lifted=bool(d["lifted"]),
            silhouette_scores={int(k): float(v)
                               for k, v in d.get("silhouette_scores", {}).items()},
        )
    except KeyError as err:
        raise ValidationError(f"partition dict missing key {err}") from err

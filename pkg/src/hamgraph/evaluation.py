"""Prediction metrics, observation noise, and report emission.

Trajectory error is the plain mean squared error over trajectories, time
steps, and both canonical coordinates of every site.  Energy error runs
the true Hamiltonian over predicted and true states and compares the two
energy traces; the constant-rollout caveat (a frozen state scores almost
zero because the true energy is conserved) is inherent to that definition
and documented where reports are written.  Observation noise perturbs the
stored states only; exact derivative annotations are left untouched, so a
finite-difference target mode automatically sees derivatives of the noisy
samples while the exact mode keeps clean targets.
"""

import csv
import json
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ValidationError
from .lattice_bench import Dataset, LatticeSystem, Trajectory, hamiltonian_eval

_SCHEMA_VERSION = 1


def _paired(pred, truth):
    if isinstance(pred, Trajectory):
        pred = [pred]
    if isinstance(truth, Trajectory):
        truth = [truth]
    if len(pred) != len(truth):
        raise ValidationError(
            f"got {len(pred)} predicted vs {len(truth)} true trajectories"
        )
    if not pred:
        raise ValidationError("need at least one trajectory pair")
    for a, b in zip(pred, truth):
        if a.q.shape != b.q.shape:
            raise ValidationError(
                f"trajectory shape mismatch: {a.q.shape} vs {b.q.shape}"
            )
        if not np.allclose(a.t, b.t, rtol=0, atol=1e-9):
            raise ValidationError("trajectory time grids differ")
    return pred, truth


def state_mse(pred, truth) -> float:
    """Mean squared state error over trajectories, steps, sites, and both
    coordinates: (1/M)(1/T)(1/2N) sum (x - x_hat)^2."""
    pred, truth = _paired(pred, truth)
    total = 0.0
    count = 0
    for a, b in zip(pred, truth):
        dq = a.q - b.q
        dp = a.p - b.p
        total += float(np.sum(dq * dq) + np.sum(dp * dp))
        count += 2 * a.q.size
    return total / count


def energy_mse(pred, truth, system: LatticeSystem) -> float:
    """MSE between the true Hamiltonian on predicted and on true states,
    averaged over trajectories and time steps."""
    pred, truth = _paired(pred, truth)
    total = 0.0
    count = 0
    for a, b in zip(pred, truth):
        diff = hamiltonian_eval(system, a.q, a.p) - hamiltonian_eval(system, b.q, b.p)
        total += float(np.sum(diff * diff))
        count += diff.size
    return total / count


def mse_over_time(pred, truth) -> np.ndarray:
    """Per-step mean squared state error, averaged over trajectories and
    sites; returns a length-T series aligned with the shared time grid."""
    pred, truth = _paired(pred, truth)
    t_len = pred[0].q.shape[0]
    for a in pred:
        if a.q.shape[0] != t_len:
            raise ValidationError("trajectories disagree on series length")
    series = np.zeros(t_len)
    per_step = 0
    for a, b in zip(pred, truth):
        dq = a.q - b.q
        dp = a.p - b.p
        series += np.sum(dq * dq, axis=1) + np.sum(dp * dp, axis=1)
        per_step += 2 * a.q.shape[1]
    return series / per_step


def add_noise(dataset: Dataset, sigma: float, seed: int) -> Dataset:
    """Gaussian observation noise on every stored state of every split.

    Only q and p are perturbed; derivative annotations stay exact. With
    sigma = 0 the arrays are returned byte-identical and only the
    provenance record changes. Deterministic given seed: trajectories are
    visited in split order train/val/test.
    """
    if sigma < 0:
        raise ValidationError(f"noise level must be >= 0, got {sigma}")
    rng = np.random.default_rng(seed)
    splits = {}
    for name in ("train", "val", "test"):
        if name not in dataset.splits:
            continue
        out = []
        for traj in dataset.splits[name]:
            if sigma > 0:
                q = traj.q + rng.normal(0.0, sigma, size=traj.q.shape)
                p = traj.p + rng.normal(0.0, sigma, size=traj.p.shape)
            else:
                q, p = traj.q, traj.p
            out.append(replace(traj, q=q, p=p))
        splits[name] = out
    for name in dataset.splits:
        if name not in splits:
            raise ValidationError(f"unknown split {name!r} in dataset")
    provenance = dict(dataset.provenance or {})
    provenance["noise"] = {"sigma": float(sigma), "seed": int(seed)}
    return replace(dataset, splits=splits, provenance=provenance)


@dataclass
class MetricReport:
    """Scalar metrics plus the error-over-time series for one evaluation."""

    scalars: dict
    series: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, value in self.scalars.items():
            value = float(value)
            if not np.isfinite(value) or value < 0:
                raise ValidationError(
                    f"metric {name!r} must be finite and >= 0, got {value}"
                )
            self.scalars[name] = value
        self.series = {k: np.asarray(v, dtype=float) for k, v in self.series.items()}
        lengths = {v.shape for v in self.series.values()}
        if len(lengths) > 1:
            raise ValidationError(f"series lengths disagree: {sorted(lengths)}")


def report_to_dict(report: MetricReport) -> dict:
    return {
        "schema_version": _SCHEMA_VERSION,
        "scalars": dict(report.scalars),
        "series": {k: v.tolist() for k, v in report.series.items()},
        "metadata": report.metadata,
    }


def report_from_dict(d: dict) -> MetricReport:
    try:
        return MetricReport(
            scalars=dict(d["scalars"]),
            series={k: np.array(v, dtype=float) for k, v in d["series"].items()},
            metadata=d.get("metadata", {}),
        )
    except KeyError as err:
        raise ValidationError(f"report dict missing key {err}") from err


def save_report(report: MetricReport, path) -> None:
    with open(path, "w") as fh:
        json.dump(report_to_dict(report), fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_report(path) -> MetricReport:
    with open(path) as fh:
        return report_from_dict(json.load(fh))


def series_to_csv(report: MetricReport, path) -> None:
    """One column per series, aligned row-by-row, for external plotting."""
    if not report.series:
        raise ValidationError("report has no series to write")
    names = sorted(report.series)
    columns = [report.series[k] for k in names]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(names)
        for row in zip(*columns):
            writer.writerow([f"{x:.17g}" for x in row])

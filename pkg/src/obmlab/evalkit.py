"""Matching and scoring shared by every predictor.

Each true-object label is matched independently to its best slot (offset
distance plus table cross-entropy), then scored for table identity and
offset error, with a wrong table costing the fixed penalty. Aggregations
report metrics at fixed counts of valid observations and as accuracy
versus steps-since-last-sighting curves.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

__all__ = [
    "WRONG_TABLE_PENALTY",
    "MetricsRecord",
    "match",
    "score",
    "valid_obs_counts",
    "evaluate_trajectory",
    "aggregate_at_counts",
    "gap_hits",
    "recovery_curve",
    "write_metrics_csv",
    "write_curve_csv",
    "write_compare_csv",
]

WRONG_TABLE_PENALTY = 0.15


@dataclass
class MetricsRecord:
    observations_seen: int
    table_accuracy: float
    position_error: float
    n_trajectories: int = 0

    def to_row(self) -> dict:
        return {
            "observations": self.observations_seen,
            "table_accuracy": self.table_accuracy,
            "position_error": self.position_error,
            "n_trajectories": self.n_trajectories,
        }


def _table_blocks(arr: np.ndarray, num_tables: int) -> np.ndarray:
    return arr[:, 2:2 + num_tables]


def match(y: np.ndarray, c: np.ndarray, labels: np.ndarray,
          num_tables: int) -> np.ndarray:
    """Per-label argmin over slots of Euclidean offset distance plus
    cross-entropy of the predicted table distribution against the true
    one-hot. Ties go to the lower slot index; several labels may share a
    slot. Returns one slot index per label, -1 when there are no slots."""
    labels = np.asarray(labels, dtype=np.float64)
    n_labels = labels.shape[0]
    if len(y) == 0:
        return np.full(n_labels, -1, dtype=int)
    offs = np.linalg.norm(y[:, None, 0:2] - labels[None, :, 0:2], axis=2)
    pred_t = np.clip(_table_blocks(np.asarray(y), num_tables), 1e-12, None)
    true_t = _table_blocks(labels, num_tables)
    ce = -(true_t[None, :, :] * np.log(pred_t[:, None, :])).sum(axis=2)
    return np.argmin(offs + ce, axis=0).astype(int)


def score(y: np.ndarray, c: np.ndarray, labels: np.ndarray,
          assignment: np.ndarray, num_tables: int,
          penalty: float = WRONG_TABLE_PENALTY) -> MetricsRecord:
    """Fraction of labels whose matched slot names the right table, and
    mean offset error: per label, the mean absolute offset error (capped
    at the penalty) when the table is right, the full penalty otherwise."""
    labels = np.asarray(labels, dtype=np.float64)
    hits, errs = [], []
    for j, slot in enumerate(np.asarray(assignment, dtype=int)):
        if slot < 0:
            hits.append(False)
            errs.append(penalty)
            continue
        ok = int(np.argmax(_table_blocks(y, num_tables)[slot])) == int(
            np.argmax(_table_blocks(labels, num_tables)[j]))
        hits.append(ok)
        if ok:
            mae = float(np.abs(y[slot, 0:2] - labels[j, 0:2]).mean())
            errs.append(min(mae, penalty))
        else:
            errs.append(penalty)
    return MetricsRecord(
        observations_seen=0,
        table_accuracy=float(np.mean(hits)),
        position_error=float(np.mean(errs)),
        n_trajectories=1,
    )


def valid_obs_counts(trajectory) -> np.ndarray:
    """Cumulative count of valid (non-empty) observations after each step."""
    flags = np.array([1 if s.z[-1] > 0.5 else 0 for s in trajectory.steps])
    return np.cumsum(flags)


def evaluate_trajectory(outputs, trajectory, num_tables: int,
                        obs_counts=(10, 25, 50),
                        penalty: float = WRONG_TABLE_PENALTY) -> dict:
    """Metrics at the first step whose cumulative valid-observation count
    reaches each requested level; levels never reached map to None."""
    cum = valid_obs_counts(trajectory)
    results = {}
    for target in obs_counts:
        idx = np.nonzero(cum >= target)[0]
        if len(idx) == 0:
            results[target] = None
            continue
        t = int(idx[0])
        step = trajectory.steps[t]
        if len(step.label_ids) == 0:
            results[target] = None
            continue
        y, c = outputs[t]
        assignment = match(y, c, step.labels, num_tables)
        results[target] = score(y, c, step.labels, assignment, num_tables, penalty)
    return results


def aggregate_at_counts(outputs_per_traj, trajectories, num_tables: int,
                        obs_counts=(10, 25, 50),
                        penalty: float = WRONG_TABLE_PENALTY) -> list[MetricsRecord]:
    """Mean metrics across trajectories, one record per observation count.

    Trajectories that never reach a count are excluded from that record;
    a count no trajectory reaches yields NaN metrics with n_trajectories 0.
    """
    records = []
    for target in obs_counts:
        accs, errs = [], []
        for outputs, traj in zip(outputs_per_traj, trajectories):
            rec = evaluate_trajectory(outputs, traj, num_tables, (target,), penalty)[target]
            if rec is not None:
                accs.append(rec.table_accuracy)
                errs.append(rec.position_error)
        records.append(MetricsRecord(
            observations_seen=target,
            table_accuracy=float(np.mean(accs)) if accs else float("nan"),
            position_error=float(np.mean(errs)) if errs else float("nan"),
            n_trajectories=len(accs),
        ))
    return records


def gap_hits(outputs, trajectory, num_tables: int) -> list[tuple[int, bool]]:
    """(steps since the label's last sighting, matched table correct) for
    every label at every step."""
    rows = []
    for t, step in enumerate(trajectory.steps):
        if len(step.label_ids) == 0:
            continue
        y, c = outputs[t]
        assignment = match(y, c, step.labels, num_tables)
        true_tables = np.argmax(_table_blocks(step.labels, num_tables), axis=1)
        for j, slot in enumerate(assignment):
            ok = slot >= 0 and int(
                np.argmax(_table_blocks(y, num_tables)[slot])) == int(true_tables[j])
            rows.append((int(step.gaps[j]), bool(ok)))
    return rows


def recovery_curve(hits, bin_width: int = 5) -> list[tuple[int, float, int]]:
    """Bucket (gap, correct) pairs into [0,w), [w,2w), ... and report
    (bin start, table accuracy, count) per nonempty bucket, ascending."""
    if bin_width < 1:
        raise ValueError("bin_width must be >= 1")
    buckets: dict[int, list[bool]] = {}
    for gap, ok in hits:
        buckets.setdefault((gap // bin_width) * bin_width, []).append(ok)
    return [(start, float(np.mean(oks)), len(oks))
            for start, oks in sorted(buckets.items())]


def write_metrics_csv(path, rows) -> None:
    """rows: iterables of (method, config_digest, MetricsRecord)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "config", "observations",
                         "table_accuracy", "position_error", "n_trajectories"])
        for method, config, rec in rows:
            writer.writerow([method, config, rec.observations_seen,
                             f"{rec.table_accuracy:.6f}",
                             f"{rec.position_error:.6f}", rec.n_trajectories])


def write_curve_csv(path, curves) -> None:
    """curves: iterables of (method, [(gap_bin, accuracy, count), ...])."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "gap_bin", "accuracy", "count"])
        for method, rows in curves:
            for start, acc, count in rows:
                writer.writerow([method, start, f"{acc:.6f}", count])


def write_compare_csv(path, table, obs_counts=(10, 25, 50)) -> None:
    """table: iterables of (method, {count: MetricsRecord}). One row per
    method with accuracy and error columns per observation count."""
    header = ["method"]
    for v in obs_counts:
        header += [f"table_accuracy@{v}", f"position_error@{v}"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for method, recs in table:
            row = [method]
            for v in obs_counts:
                rec = recs[v]
                row += [f"{rec.table_accuracy:.6f}", f"{rec.position_error:.6f}"]
            writer.writerow(row)

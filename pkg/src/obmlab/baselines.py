"""Reference predictors to compare the slot-memory filter against.

Three systems share the streaming predict interface (observations in,
per-step (y, c) out): a hand-built data-association filter that knows the
true dynamics, batch clustering over all observations so far, and a gated
recurrent network trained with the identical loss and trainer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from . import obmnet
from .simworld import MOTION_AXES, DomainConfig, reflect_axis

__all__ = [
    "TrackingError",
    "DafConfig",
    "DafHypothesis",
    "daf_step",
    "daf_outputs",
    "DafPredictor",
    "clustering_predict",
    "ClusteringPredictor",
    "RecurrentHyperParams",
    "recurrent_init_params",
    "run_recurrent",
    "RecurrentPredictor",
]


class TrackingError(RuntimeError):
    """The data-association filter hit a degenerate numeric state."""


# ---------------------------------------------------------------------------
# data-association filter


@dataclass
class DafConfig:
    """Gating and noise settings for the hand-built filter.

    Hypotheses are never discarded: the domain produces no clutter, so a
    spawned hypothesis always corresponds to some real sighting.
    """

    gate_threshold: float = 9.21  # chi-squared, 2 dof, 99%
    process_noise: float = 0.02
    obs_noise: float = 0.01

    def validate(self):
        if self.gate_threshold <= 0:
            raise ValueError("gate_threshold must be positive")
        if self.process_noise <= 0 or self.obs_noise < 0:
            raise ValueError("noise scales must be positive")

    @property
    def Q(self) -> np.ndarray:
        return np.eye(2) * self.process_noise**2

    @property
    def R(self) -> np.ndarray:
        # floor keeps R positive definite when the domain is noiseless
        return np.eye(2) * max(self.obs_noise, 1e-6) ** 2

    @classmethod
    def for_domain(cls, domain: DomainConfig, gate_threshold: float = 9.21) -> "DafConfig":
        return cls(gate_threshold=gate_threshold,
                   process_noise=max(s.drift_per_step for s in domain.classes),
                   obs_noise=domain.obs_noise_sigma)


@dataclass
class DafHypothesis:
    """One tracked object: Gaussian offset estimate plus discrete table
    belief. The drift sign is latent in the domain, so it is re-estimated
    from displacement between consecutive sightings (zero until two
    sightings exist, meaning the mean holds still)."""

    mean: np.ndarray  # (2,)
    covariance: np.ndarray  # 2x2 SPD
    table_belief: np.ndarray  # (num_tables,)
    class_id: int
    obs_count: int
    last_update: int
    drift_sign: np.ndarray  # (2,) in {-1, 0, +1}
    last_obs: np.ndarray  # (2,) offset of the most recent sighting

    @property
    def table_id(self) -> int:
        return int(np.argmax(self.table_belief))


def _parse_obs(z: np.ndarray, domain: DomainConfig):
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    if z.shape[0] != domain.obs_dim:
        raise ValueError(f"observation width {z.shape[0]}, expected {domain.obs_dim}")
    if z[-1] < 0.5:
        return None
    t0, t1 = 2, 2 + domain.num_tables
    return z[0:2], int(np.argmax(z[t0:t1])), int(np.argmax(z[t1:-1]))


def _predict(hyp: DafHypothesis, config: DafConfig, domain: DomainConfig):
    spec = domain.classes[hyp.class_id]
    axes = MOTION_AXES[spec.motion]
    half = domain.table_half_size
    for axis in (0, 1):
        if axes[axis] and hyp.drift_sign[axis] != 0.0:
            pos = hyp.mean[axis] + spec.drift_per_step * hyp.drift_sign[axis]
            hyp.mean[axis], hyp.drift_sign[axis] = reflect_axis(
                pos, hyp.drift_sign[axis], half)
    hyp.covariance = hyp.covariance + config.Q
    if spec.teleports:
        p = spec.teleport_prob
        hyp.table_belief = (1.0 - p) * hyp.table_belief + p * np.roll(hyp.table_belief, 1)


def _mahalanobis_sq(hyp: DafHypothesis, offset: np.ndarray, config: DafConfig) -> float:
    nu = offset - hyp.mean
    s = hyp.covariance + config.R
    try:
        return float(nu @ np.linalg.solve(s, nu))
    except np.linalg.LinAlgError as exc:
        raise TrackingError(f"singular innovation covariance: {s.tolist()}") from exc


def _measurement_update(hyp: DafHypothesis, offset: np.ndarray, table: int,
                        config: DafConfig, domain: DomainConfig, t: int):
    s = hyp.covariance + config.R
    try:
        gain = hyp.covariance @ np.linalg.inv(s)
    except np.linalg.LinAlgError as exc:
        raise TrackingError(f"singular innovation covariance: {s.tolist()}") from exc
    hyp.mean = hyp.mean + gain @ (offset - hyp.mean)
    cov = (np.eye(2) - gain) @ hyp.covariance
    hyp.covariance = 0.5 * (cov + cov.T)
    hyp.table_belief = _one_hot(table, domain.num_tables)
    axes = MOTION_AXES[domain.classes[hyp.class_id].motion]
    if hyp.obs_count >= 1:
        for axis in (0, 1):
            if axes[axis]:
                d = offset[axis] - hyp.last_obs[axis]
                if abs(d) > 1e-12:
                    hyp.drift_sign[axis] = np.sign(d)
    hyp.last_obs = offset.copy()
    hyp.obs_count += 1
    hyp.last_update = t


def _one_hot(i: int, n: int) -> np.ndarray:
    v = np.zeros(n)
    v[i] = 1.0
    return v


def _spawn(offset: np.ndarray, table: int, class_id: int, config: DafConfig,
           domain: DomainConfig, t: int) -> DafHypothesis:
    return DafHypothesis(
        mean=offset.copy(),
        covariance=config.R.copy(),
        table_belief=_one_hot(table, domain.num_tables),
        class_id=class_id,
        obs_count=1,
        last_update=t,
        drift_sign=np.zeros(2),
        last_obs=offset.copy(),
    )


def daf_step(hyps: list[DafHypothesis], z, config: DafConfig,
             domain: DomainConfig, t: int = 0) -> list[DafHypothesis]:
    """Advance all hypotheses one step, then absorb the observation.

    Every hypothesis is predicted forward with the true class dynamics
    (signed drift with boundary reflection, teleport kernel on the table
    belief). A valid observation is assigned to the same-class hypothesis
    with the smallest squared Mahalanobis distance if that distance passes
    the gate, and applied as a standard Gaussian measurement update; a
    failed gate (or no same-class hypothesis) spawns a new hypothesis. An
    empty observation triggers predict only.
    """
    for hyp in hyps:
        _predict(hyp, config, domain)
    parsed = _parse_obs(z, domain)
    if parsed is None:
        return hyps
    offset, table, class_id = parsed
    candidates = [h for h in hyps if h.class_id == class_id]
    if candidates:
        d2 = [_mahalanobis_sq(h, offset, config) for h in candidates]
        best = int(np.argmin(d2))
        if d2[best] <= config.gate_threshold:
            _measurement_update(candidates[best], offset, table, config, domain, t)
            return hyps
    hyps.append(_spawn(offset, table, class_id, config, domain, t))
    return hyps


def daf_outputs(hyps: list[DafHypothesis], domain: DomainConfig):
    """Adapt filter state to the shared (y, c) interface.

    Each hypothesis contributes one row: mean offset, one-hot at the table
    belief argmax, one-hot class. Confidence is proportional to sightings.
    An empty hypothesis set yields empty outputs (evaluated as all-miss).
    """
    d_y = domain.label_dim
    if not hyps:
        return np.zeros((0, d_y)), np.zeros(0)
    y = np.zeros((len(hyps), d_y))
    counts = np.zeros(len(hyps))
    for i, hyp in enumerate(hyps):
        y[i, 0:2] = hyp.mean
        y[i, 2 + hyp.table_id] = 1.0
        y[i, 2 + domain.num_tables + hyp.class_id] = 1.0
        counts[i] = hyp.obs_count
    return y, counts / counts.sum()


class DafPredictor:
    name = "daf"

    def __init__(self, domain: DomainConfig, config: DafConfig | None = None):
        self.domain = domain
        self.config = config or DafConfig.for_domain(domain)
        self.config.validate()

    def run(self, trajectory) -> list[tuple[np.ndarray, np.ndarray]]:
        hyps: list[DafHypothesis] = []
        outputs = []
        for t, step in enumerate(trajectory.steps):
            hyps = daf_step(hyps, step.z, self.config, self.domain, t)
            outputs.append(daf_outputs(hyps, self.domain))
        return outputs


# ---------------------------------------------------------------------------
# clustering


def _weighted_kmeans(points: np.ndarray, weights: np.ndarray, k: int,
                     rng: np.random.Generator, iters: int = 50):
    # k-means++ style seeding on weighted points
    centers = np.empty((k, points.shape[1]))
    probs = weights / weights.sum()
    centers[0] = points[rng.choice(len(points), p=probs)]
    for j in range(1, k):
        d2 = np.min(((points[:, None, :] - centers[None, :j, :]) ** 2).sum(-1), axis=1)
        mass = d2 * weights
        if mass.sum() <= 0.0:
            centers[j:] = centers[0]
            break
        centers[j] = points[rng.choice(len(points), p=mass / mass.sum())]
    assign = np.zeros(len(points), dtype=int)
    for _ in range(iters):
        d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(-1)
        assign = np.argmin(d2, axis=1)
        new_centers = centers.copy()
        for j in range(k):
            mask = assign == j
            if mask.any():
                w = weights[mask]
                new_centers[j] = (points[mask] * w[:, None]).sum(0) / w.sum()
        if np.array_equal(new_centers, centers):
            break
        centers = new_centers
    sizes = np.array([weights[assign == j].sum() for j in range(k)])
    return centers, assign, sizes


def clustering_predict(observations, k: int, num_tables: int, num_classes: int,
                       seed: int = 0):
    """Batch k-means over every (offset, table one-hot, class one-hot) seen
    so far. Returns (y, c) with each center's table/class snapped to the
    cluster's modal one-hot and c proportional to cluster weight.

    Duplicates are collapsed to unique rows with counts before clustering
    (equivalent to weighted k-means), which also fixes a canonical input
    order, so the result is invariant to observation order. With fewer
    distinct observations than k, each distinct observation becomes its
    own center.
    """
    obs = np.asarray(observations, dtype=np.float64)
    if k < 1:
        raise ValueError("k must be >= 1")
    if obs.ndim != 2 or obs.shape[0] == 0:
        raise ValueError("need at least one valid observation")
    points, weights = np.unique(obs, axis=0, return_counts=True)
    k_eff = min(k, len(points))
    centers, assign, sizes = _weighted_kmeans(
        points, weights.astype(np.float64), k_eff, np.random.default_rng(seed))

    d_y = 2 + num_tables + num_classes
    y = np.zeros((k_eff, d_y))
    for j in range(k_eff):
        mask = assign == j
        if not mask.any():
            y[j, 0:2] = centers[j, 0:2]
            y[j, 2] = 1.0
            y[j, 2 + num_tables] = 1.0
            continue
        w = weights[mask].astype(np.float64)
        y[j, 0:2] = (points[mask, 0:2] * w[:, None]).sum(0) / w.sum()
        votes_t = (points[mask, 2:2 + num_tables] * w[:, None]).sum(0)
        votes_c = (points[mask, 2 + num_tables:] * w[:, None]).sum(0)
        y[j, 2 + int(np.argmax(votes_t))] = 1.0
        y[j, 2 + num_tables + int(np.argmax(votes_c))] = 1.0
    total = sizes.sum()
    c = sizes / total if total > 0 else np.full(k_eff, 1.0 / k_eff)
    return y, c


class ClusteringPredictor:
    """Re-clusters the prefix of valid observations at every step.

    k defaults to the number of true objects seen so far, which favors the
    baseline; pass a fixed k to override.
    """

    name = "clustering"

    def __init__(self, num_tables: int, num_classes: int, k: int | None = None,
                 seed: int = 0):
        self.num_tables = num_tables
        self.num_classes = num_classes
        self.k = k
        self.seed = seed

    def run(self, trajectory) -> list[tuple[np.ndarray, np.ndarray]]:
        d_y = 2 + self.num_tables + self.num_classes
        seen: list[np.ndarray] = []
        outputs = []
        for step in trajectory.steps:
            if step.z[-1] > 0.5:
                seen.append(np.asarray(step.z[:-1], dtype=np.float64))
            k = self.k if self.k is not None else len(step.label_ids)
            if not seen or k < 1:
                outputs.append((np.zeros((0, d_y)), np.zeros(0)))
                continue
            outputs.append(clustering_predict(
                np.stack(seen), k, self.num_tables, self.num_classes, self.seed))
        return outputs


# ---------------------------------------------------------------------------
# gated recurrent baseline


@dataclass
class RecurrentHyperParams:
    """Single gated recurrent cell plus a linear slot head, budgeted to
    roughly the same parameter count as the slot-memory filter."""

    num_tables: int
    num_classes: int
    K: int = 10
    hidden: int = 95

    def validate(self):
        if min(self.num_tables, self.num_classes, self.K, self.hidden) < 1:
            raise ValueError("widths must be >= 1")

    @property
    def d_z(self) -> int:
        return 2 + self.num_tables + self.num_classes + 1

    @property
    def d_y(self) -> int:
        return 2 + self.num_tables + self.num_classes

    def to_dict(self) -> dict:
        return {"num_tables": self.num_tables, "num_classes": self.num_classes,
                "K": self.K, "hidden": self.hidden}

    @classmethod
    def from_dict(cls, d: dict) -> "RecurrentHyperParams":
        hp = cls(**d)
        hp.validate()
        return hp


def recurrent_init_params(hyper: RecurrentHyperParams,
                          rng: np.random.Generator) -> dc.ParamStore:
    hyper.validate()
    h = hyper.hidden
    params = dc.ParamStore()

    def glorot(fan_in, fan_out):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-limit, limit, size=(fan_in, fan_out))

    params.add("cell_wx", glorot(hyper.d_z, 4 * h))
    params.add("cell_wh", glorot(h, 4 * h))
    bias = np.zeros((1, 4 * h))
    bias[0, h:2 * h] = 1.0  # open the forget gate at init
    params.add("cell_b", bias)
    params.add("head_y_w", glorot(h, hyper.K * hyper.d_y))
    params.add("head_y_b", np.zeros((1, hyper.K * hyper.d_y)))
    params.add("head_c_w", glorot(h, hyper.K))
    params.add("head_c_b", np.zeros((1, hyper.K)))
    return params


def run_recurrent(params: dc.ParamStore, hyper: RecurrentHyperParams,
                  observations) -> list[obmnet.SlotOutputs]:
    """Roll the cell over the stream; every step emits all K slots from
    the hidden state through the linear head, structured like the filter's
    decoded outputs."""
    h_dim = hyper.hidden
    h = dc.constant(np.zeros((1, h_dim)))
    cell = dc.constant(np.zeros((1, h_dim)))
    outputs = []
    for z in observations:
        z = np.asarray(z, dtype=np.float64).reshape(1, -1)
        if z.shape[1] != hyper.d_z:
            raise dc.ShapeError(f"observation width {z.shape[1]}, expected {hyper.d_z}")
        gates = dc.add(dc.affine(dc.constant(z), params["cell_wx"], params["cell_b"]),
                       dc.matmul(h, params["cell_wh"]))
        i = dc.sigmoid(dc.slice_cols(gates, 0, h_dim))
        f = dc.sigmoid(dc.slice_cols(gates, h_dim, 2 * h_dim))
        g = dc.tanh(dc.slice_cols(gates, 2 * h_dim, 3 * h_dim))
        o = dc.sigmoid(dc.slice_cols(gates, 3 * h_dim, 4 * h_dim))
        cell = dc.add(dc.mul(f, cell), dc.mul(i, g))
        h = dc.mul(o, dc.tanh(cell))
        raw = dc.reshape(dc.affine(h, params["head_y_w"], params["head_y_b"]),
                         hyper.K, hyper.d_y)
        y = obmnet.structure_rows(raw, hyper.num_tables, hyper.num_classes)
        c = dc.softmax(dc.affine(h, params["head_c_w"], params["head_c_b"]))
        outputs.append(obmnet.SlotOutputs(y=y, c=c))
    return outputs


class RecurrentPredictor:
    name = "recurrent"

    def __init__(self, params: dc.ParamStore, hyper: RecurrentHyperParams):
        self.params = params
        self.hyper = hyper

    def run(self, trajectory) -> list[tuple[np.ndarray, np.ndarray]]:
        with dc.no_grad():
            outs = run_recurrent(self.params, self.hyper,
                                 (s.z for s in trajectory.steps))
        return [(o.y.value.copy(), o.c.value[0].copy()) for o in outs]

"""Synthetic entity-monitoring worlds.

A problem instance places a few objects on tables; each object drifts
along a class-specific axis (reflecting at table edges) and may teleport
to the cyclically next table. An observing agent sees, on roughly half
the steps, one object on one table; the rest of the time it receives an
explicit empty observation. Each step is labeled with the true current
state of every object observed so far.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ConfigError",
    "DatasetError",
    "ClassSpec",
    "DomainConfig",
    "ObjectState",
    "TrajStep",
    "Trajectory",
    "MOTIONS",
    "MOTION_AXES",
    "reflect_axis",
    "sample_domain",
    "step_dynamics",
    "sample_trajectory",
    "generate_trajectories",
    "write_dataset",
    "read_dataset",
    "write_config",
    "read_config",
    "config_a_style",
]

MOTIONS = ("horizontal", "vertical", "diagonal")


class ConfigError(ValueError):
    """A domain configuration field is invalid."""


class DatasetError(ValueError):
    """A dataset file is malformed."""


@dataclass(frozen=True)
class ClassSpec:
    class_id: int
    motion: str
    drift_per_step: float = 0.02
    teleports: bool = False
    teleport_prob: float = 0.1

    def validate(self):
        if self.motion not in MOTIONS:
            raise ConfigError(f"classes[{self.class_id}].motion must be one of {MOTIONS}")
        if self.drift_per_step < 0:
            raise ConfigError(f"classes[{self.class_id}].drift_per_step must be >= 0")
        if not 0.0 <= self.teleport_prob <= 1.0:
            raise ConfigError(f"classes[{self.class_id}].teleport_prob must be in [0, 1]")


@dataclass
class DomainConfig:
    num_tables: int
    classes: list[ClassSpec]
    table_half_size: float = 0.15
    objects_per_table: int = 2
    trajectory_length: int = 50
    observe_prob: float = 0.5
    obs_noise_sigma: float = 0.01
    seed: int = 0

    def validate(self):
        if self.num_tables < 1:
            raise ConfigError("num_tables must be >= 1")
        if self.table_half_size <= 0:
            raise ConfigError("table_half_size must be > 0")
        if self.objects_per_table < 1:
            raise ConfigError("objects_per_table must be >= 1")
        if not self.classes:
            raise ConfigError("classes must be non-empty")
        if not 0.0 <= self.observe_prob <= 1.0:
            raise ConfigError("observe_prob must be in [0, 1]")
        if self.obs_noise_sigma < 0:
            raise ConfigError("obs_noise_sigma must be >= 0")
        if self.trajectory_length < 0:
            raise ConfigError("trajectory_length must be >= 0")
        seen = set()
        for i, cls in enumerate(self.classes):
            if cls.class_id != i:
                raise ConfigError(f"classes[{i}].class_id must equal its index {i}")
            if cls.class_id in seen:
                raise ConfigError(f"duplicate class_id {cls.class_id}")
            seen.add(cls.class_id)
            cls.validate()

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    @property
    def obs_dim(self) -> int:
        # offset(2) + table one-hot + class one-hot + validity flag
        return 2 + self.num_tables + self.num_classes + 1

    @property
    def label_dim(self) -> int:
        # offset(2) + table one-hot + class one-hot
        return 2 + self.num_tables + self.num_classes

    def to_dict(self) -> dict:
        return {
            "num_tables": self.num_tables,
            "table_half_size": self.table_half_size,
            "objects_per_table": self.objects_per_table,
            "trajectory_length": self.trajectory_length,
            "observe_prob": self.observe_prob,
            "obs_noise_sigma": self.obs_noise_sigma,
            "seed": self.seed,
            "classes": [
                {
                    "class_id": c.class_id,
                    "motion": c.motion,
                    "drift_per_step": c.drift_per_step,
                    "teleports": c.teleports,
                    "teleport_prob": c.teleport_prob,
                }
                for c in self.classes
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DomainConfig":
        try:
            classes = [ClassSpec(**c) for c in d["classes"]]
            cfg = cls(
                num_tables=d["num_tables"],
                classes=classes,
                table_half_size=d.get("table_half_size", 0.15),
                objects_per_table=d.get("objects_per_table", 2),
                trajectory_length=d.get("trajectory_length", 50),
                observe_prob=d.get("observe_prob", 0.5),
                obs_noise_sigma=d.get("obs_noise_sigma", 0.01),
                seed=d.get("seed", 0),
            )
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"bad config structure: {exc}") from exc
        cfg.validate()
        return cfg

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def config_a_style(num_tables: int = 4, seed: int = 0, **overrides) -> DomainConfig:
    """Default three-class domain: one horizontal, one vertical, one
    diagonal drifting class that also teleports between tables."""
    classes = [
        ClassSpec(0, "horizontal"),
        ClassSpec(1, "vertical"),
        ClassSpec(2, "diagonal", teleports=True),
    ]
    cfg = DomainConfig(num_tables=num_tables, classes=classes, seed=seed, **overrides)
    cfg.validate()
    return cfg


@dataclass
class ObjectState:
    object_id: int
    class_id: int
    table_id: int
    offset: np.ndarray  # (2,), within [-half, half]^2
    drift_sign: np.ndarray  # (2,), entries +-1


@dataclass
class TrajStep:
    z: np.ndarray  # (obs_dim,)
    labels: np.ndarray  # (J, label_dim) true current states of seen objects
    label_ids: list[int]  # object ids aligned with label rows
    gaps: np.ndarray  # (J,) steps since each labeled object was last observed
    observed_id: int | None  # object id observed this step, if any


@dataclass
class Trajectory:
    traj_id: int
    config_digest: str
    steps: list[TrajStep] = field(default_factory=list)

    def __len__(self):
        return len(self.steps)

    def observations(self) -> list[np.ndarray]:
        return [s.z for s in self.steps]


def _rng_for(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(index,)))


def sample_domain(config: DomainConfig, rng: np.random.Generator) -> list[ObjectState]:
    """Place objects_per_table objects on each table, classes uniform,
    offsets uniform in the table square, drift signs uniform +-1."""
    config.validate()
    half = config.table_half_size
    objects = []
    oid = 0
    for table in range(config.num_tables):
        for _ in range(config.objects_per_table):
            cls = int(rng.integers(config.num_classes))
            offset = rng.uniform(-half, half, size=2)
            sign = np.where(rng.random(2) < 0.5, -1.0, 1.0)
            objects.append(ObjectState(oid, cls, table, offset, sign))
            oid += 1
    return objects


MOTION_AXES = {
    "horizontal": (True, False),
    "vertical": (False, True),
    "diagonal": (True, True),
}


def reflect_axis(pos: float, sign: float, half: float):
    # reflect at the table edge; sign flips on each bounce
    while pos > half or pos < -half:
        if pos > half:
            pos = 2.0 * half - pos
        else:
            pos = -2.0 * half - pos
        sign = -sign
    return pos, sign


def step_dynamics(
    states: list[ObjectState], config: DomainConfig, rng: np.random.Generator
) -> list[ObjectState]:
    """Advance every object one timestep in object-id order.

    Drift moves the offset along the class motion axes, reflecting at the
    table boundary; teleporting classes then move to the cyclic successor
    table with their per-step probability, offset unchanged.
    """
    half = config.table_half_size
    for obj in states:
        spec = config.classes[obj.class_id]
        axes = MOTION_AXES[spec.motion]
        for axis in (0, 1):
            if not axes[axis]:
                continue
            pos = obj.offset[axis] + spec.drift_per_step * obj.drift_sign[axis]
            pos, sign = reflect_axis(pos, obj.drift_sign[axis], half)
            obj.offset[axis] = pos
            obj.drift_sign[axis] = sign
        if spec.teleports and rng.random() < spec.teleport_prob:
            obj.table_id = (obj.table_id + 1) % config.num_tables
    return states


def _label_vector(obj: ObjectState, config: DomainConfig) -> np.ndarray:
    v = np.zeros(config.label_dim)
    v[0:2] = obj.offset
    v[2 + obj.table_id] = 1.0
    v[2 + config.num_tables + obj.class_id] = 1.0
    return v


def sample_trajectory(
    objects: list[ObjectState],
    config: DomainConfig,
    rng: np.random.Generator,
    traj_id: int = 0,
) -> Trajectory:
    """Roll the domain forward, emitting one (observation, label set) pair
    per step. Labels are cumulative: the true current state of every object
    observed so far, ordered by first sighting."""
    traj = Trajectory(traj_id=traj_id, config_digest=config.digest())
    seen: dict[int, int] = {}  # object_id -> timestep of last sighting
    first_seen_order: list[int] = []
    by_id = {o.object_id: o for o in objects}

    for t in range(config.trajectory_length):
        step_dynamics(objects, config, rng)
        z = np.zeros(config.obs_dim)
        observed_id = None
        if rng.random() < config.observe_prob:
            table = int(rng.integers(config.num_tables))
            on_table = [o for o in objects if o.table_id == table]
            if on_table:
                pick = on_table[int(rng.integers(len(on_table)))]
                noise = rng.normal(0.0, 1.0, size=2) * config.obs_noise_sigma
                z[0:2] = pick.offset + noise
                z[2 + table] = 1.0
                z[2 + config.num_tables + pick.class_id] = 1.0
                z[-1] = 1.0
                observed_id = pick.object_id
                if pick.object_id not in seen:
                    first_seen_order.append(pick.object_id)
                seen[pick.object_id] = t

        label_ids = list(first_seen_order)
        labels = np.array(
            [_label_vector(by_id[i], config) for i in label_ids]
        ).reshape(len(label_ids), config.label_dim)
        gaps = np.array([t - seen[i] for i in label_ids], dtype=np.int64)
        traj.steps.append(TrajStep(z, labels, label_ids, gaps, observed_id))
    return traj


def generate_trajectories(config: DomainConfig, n: int) -> list[Trajectory]:
    """Sample n independent problem instances; trajectory i uses a generator
    derived from (config.seed, i), so generation parallelizes by index."""
    config.validate()
    out = []
    for i in range(n):
        rng = _rng_for(config.seed, i)
        objects = sample_domain(config, rng)
        out.append(sample_trajectory(objects, config, rng, traj_id=i))
    return out


# ---------------------------------------------------------------------------
# dataset files: one JSON record per line


def _step_record(step: TrajStep) -> dict:
    return {
        "z": step.z.tolist(),
        "m": step.labels.tolist(),
        "ids": step.label_ids,
        "gaps": step.gaps.tolist(),
        "obs": step.observed_id,
    }


def write_dataset(trajectories, path):
    with open(path, "w") as fh:
        for traj in trajectories:
            record = {
                "id": traj.traj_id,
                "config_digest": traj.config_digest,
                "steps": [_step_record(s) for s in traj.steps],
            }
            fh.write(json.dumps(record))
            fh.write("\n")


def read_dataset(path) -> list[Trajectory]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
                steps = [
                    TrajStep(
                        z=np.array(s["z"], dtype=np.float64),
                        labels=np.array(s["m"], dtype=np.float64).reshape(
                            len(s["ids"]), -1
                        )
                        if s["ids"]
                        else np.zeros((0, len(s["z"]) - 1)),
                        label_ids=list(s["ids"]),
                        gaps=np.array(s["gaps"], dtype=np.int64),
                        observed_id=s["obs"],
                    )
                    for s in record["steps"]
                ]
                out.append(
                    Trajectory(
                        traj_id=record["id"],
                        config_digest=record["config_digest"],
                        steps=steps,
                    )
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DatasetError(f"{path}: bad record at line {lineno}: {exc}") from exc
    return out


def write_config(config: DomainConfig, path):
    with open(path, "w") as fh:
        json.dump(config.to_dict(), fh, indent=2)
        fh.write("\n")


def read_config(path) -> DomainConfig:
    with open(path) as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON: {exc}") from exc
    return DomainConfig.from_dict(d)

"""Recurrent slot-memory filter.

K hypothesis slots are held in a matrix s with per-slot observation counts
n. Each incoming observation is encoded, softly matched against the slots,
hard-sparsified to the top M matches, gated by a scalar relevance value,
and blended into the matched slots; counts accumulate the (renormalized)
attention weights and normalize into the output confidence vector. A
transition map advances every slot one timestep, so state evolves even on
empty observations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc

__all__ = [
    "HyperParams",
    "MemoryState",
    "SlotOutputs",
    "StepTrace",
    "NumericError",
    "init_params",
    "init_memory",
    "slot_features",
    "attend_suppress",
    "suppress",
    "relevance",
    "structure_rows",
    "decode_slots",
    "step",
    "run_trajectory",
    "Predictor",
]


class NumericError(RuntimeError):
    """A non-finite value appeared during a filter step."""


@dataclass
class HyperParams:
    num_tables: int
    num_classes: int
    K: int = 10
    M: int = 2
    d_s: int = 32
    hidden: int = 96
    n_init: float = 1e-3
    eps: float = 1e-3

    def validate(self):
        if not 1 <= self.M <= self.K:
            raise ValueError(f"M must satisfy 1 <= M <= K, got M={self.M}, K={self.K}")
        if min(self.num_tables, self.num_classes, self.d_s, self.hidden) < 1:
            raise ValueError("widths must be >= 1")

    @property
    def d_z(self) -> int:
        return 2 + self.num_tables + self.num_classes + 1

    @property
    def d_y(self) -> int:
        return 2 + self.num_tables + self.num_classes

    def to_dict(self) -> dict:
        return {
            "num_tables": self.num_tables,
            "num_classes": self.num_classes,
            "K": self.K,
            "M": self.M,
            "d_s": self.d_s,
            "hidden": self.hidden,
            "n_init": self.n_init,
            "eps": self.eps,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HyperParams":
        hp = cls(**d)
        hp.validate()
        return hp


@dataclass
class MemoryState:
    s: dc.Node  # K x d_s slot matrix
    n: dc.Node  # 1 x K nonnegative counts


@dataclass
class SlotOutputs:
    y: dc.Node  # K x d_y: offset, table distribution, class distribution
    c: dc.Node  # 1 x K confidences on the simplex


@dataclass
class StepTrace:
    e: dc.Node = None
    w: dc.Node = None
    a: dc.Node = None
    r: dc.Node = None
    u: dc.Node = None
    s_prime: dc.Node = None


def _glorot(rng, fan_in, fan_out, gain=1.0):
    limit = gain * np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def _add_mlp(params, rng, prefix, d_in, d_hidden, d_out, out_gain=1.0):
    params.add(f"{prefix}_w1", _glorot(rng, d_in, d_hidden))
    params.add(f"{prefix}_b1", np.zeros((1, d_hidden)))
    params.add(f"{prefix}_w2", _glorot(rng, d_hidden, d_out, gain=out_gain))
    params.add(f"{prefix}_b2", np.zeros((1, d_out)))


def init_params(hyper: HyperParams, rng: np.random.Generator) -> dc.ParamStore:
    """Fresh weights for the seven trainable modules plus the learned
    initial slot embeddings. Default widths land near 5e4 parameters."""
    hyper.validate()
    params = dc.ParamStore()
    feat = 2 * hyper.d_s + 1  # per-slot features: slot, count, encoded input
    params.add("slot_init", rng.normal(0.0, 0.5, size=(hyper.K, hyper.d_s)))
    _add_mlp(params, rng, "enc", hyper.d_z, hyper.hidden, hyper.d_s)
    _add_mlp(params, rng, "att", feat, hyper.hidden, 1)
    _add_mlp(params, rng, "upd", feat, hyper.hidden, hyper.d_s)
    _add_mlp(params, rng, "rel1", feat, hyper.hidden, feat)
    _add_mlp(params, rng, "rel2", feat, hyper.hidden, 1)
    _add_mlp(params, rng, "dec", hyper.d_s, hyper.hidden, hyper.d_y)
    # transition is residual; start it near the identity
    _add_mlp(params, rng, "tra", hyper.d_s, hyper.hidden, hyper.d_s, out_gain=0.1)
    return params


def _mlp(params: dc.ParamStore, prefix: str, x: dc.Node) -> dc.Node:
    h = dc.tanh(dc.affine(x, params[f"{prefix}_w1"], params[f"{prefix}_b1"]))
    return dc.affine(h, params[f"{prefix}_w2"], params[f"{prefix}_b2"])


def init_memory(params: dc.ParamStore, hyper: HyperParams) -> MemoryState:
    """Slots start at their learned embeddings; counts at n_init."""
    n = dc.constant(np.full((1, hyper.K), hyper.n_init))
    return MemoryState(s=params["slot_init"], n=n)


def slot_features(s: dc.Node, n: dc.Node, e: dc.Node, K: int) -> dc.Node:
    """Per-slot feature rows [s_k, log1p(n_k), e]: K x (2*d_s + 1).

    Counts enter through log1p so they stay in range for the tanh layers.
    """
    n_col = dc.transpose(dc.log(dc.add(n, dc.constant([[1.0]]))))
    return dc.concat_cols([s, n_col, dc.tile_rows(e, K)])


def suppress(w: dc.Node, M: int) -> dc.Node:
    """Keep the top-M attention weights (ties to the lower slot index) and
    renormalize. The mask is a constant, so gradients flow only through
    the kept entries."""
    order = np.argsort(-w.value[0], kind="stable")
    mask = np.zeros_like(w.value)
    mask[0, order[:M]] = 1.0
    kept = dc.mul(w, dc.constant(mask))
    return dc.div(kept, dc.sum_all(kept))


def attend_suppress(s, n, e, params: dc.ParamStore, M: int, hyper: HyperParams):
    """Softmax match of the encoded input against every slot, then hard
    top-M sparsification. Returns (w, a)."""
    feats = slot_features(s, n, e, hyper.K)
    return _attend_suppress_from(feats, params, M)


def _attend_suppress_from(feats: dc.Node, params: dc.ParamStore, M: int):
    logits = dc.transpose(_mlp(params, "att", feats))
    w = dc.softmax(logits)
    return w, suppress(w, M)


def relevance(e, s, n, params: dc.ParamStore, hyper: HyperParams) -> dc.Node:
    """Scalar gate in (0,1) for how strongly this input updates memory;
    slot-permutation invariant because slots enter through a mean."""
    feats = slot_features(s, n, e, hyper.K)
    return _relevance_from(feats, params)


def _relevance_from(feats: dc.Node, params: dc.ParamStore) -> dc.Node:
    per_slot = _mlp(params, "rel1", feats)
    pooled = dc.mean_rows(per_slot)
    return dc.sigmoid(_mlp(params, "rel2", pooled))


def structure_rows(raw: dc.Node, num_tables: int, num_classes: int) -> dc.Node:
    """Shared output convention: per row, linear offset pair followed by a
    softmax table distribution and a softmax class distribution."""
    t0, t1 = 2, 2 + num_tables
    offset = dc.slice_cols(raw, 0, 2)
    table = dc.softmax(dc.slice_cols(raw, t0, t1))
    klass = dc.softmax(dc.slice_cols(raw, t1, t1 + num_classes))
    return dc.concat_cols([offset, table, klass])


def decode_slots(s_prime: dc.Node, params: dc.ParamStore, hyper: HyperParams) -> dc.Node:
    """Slot state to output space."""
    raw = _mlp(params, "dec", s_prime)
    return structure_rows(raw, hyper.num_tables, hyper.num_classes)


def step(memory: MemoryState, z, params: dc.ParamStore, hyper: HyperParams,
         record_trace: bool = False):
    """One filter update. Returns (next memory, outputs, trace or None).

    Order per update: attend/suppress and relevance gate the convex blend
    of each slot with its update candidate; counts then accumulate the
    suppressed weights (ungated), outputs decode from the blended slots,
    and the transition map advances them into the next timestep.
    """
    z = np.asarray(z, dtype=np.float64).reshape(1, -1)
    if z.shape[1] != hyper.d_z:
        raise dc.ShapeError(f"observation width {z.shape[1]}, expected {hyper.d_z}")
    e = _mlp(params, "enc", dc.constant(z))
    feats = slot_features(memory.s, memory.n, e, hyper.K)
    w, a = _attend_suppress_from(feats, params, hyper.M)
    r = _relevance_from(feats, params)
    u = _mlp(params, "upd", feats)

    ra_col = dc.transpose(dc.mul(r, a))
    keep_col = dc.sub(dc.constant([[1.0]]), ra_col)
    s_prime = dc.add(dc.scale_rows(memory.s, keep_col), dc.scale_rows(u, ra_col))
    n_next = dc.add(memory.n, a)
    y = decode_slots(s_prime, params, hyper)
    c = dc.div(n_next, dc.sum_all(n_next))
    s_next = dc.add(s_prime, _mlp(params, "tra", s_prime))

    if not (np.isfinite(s_next.value).all() and np.isfinite(y.value).all()
            and np.isfinite(c.value).all()):
        raise NumericError(_diagnose_stage(e, w, a, r, u, s_prime, y, c, s_next))

    trace = StepTrace(e, w, a, r, u, s_prime) if record_trace else None
    return MemoryState(s=s_next, n=n_next), SlotOutputs(y=y, c=c), trace


def _diagnose_stage(e, w, a, r, u, s_prime, y, c, s_next) -> str:
    stages = [("encode", e), ("attend", w), ("suppress", a), ("relevance", r),
              ("update", u), ("slot blend", s_prime), ("decode", y),
              ("confidence", c), ("transition", s_next)]
    for name, node in stages:
        if not np.isfinite(node.value).all():
            return f"non-finite value at stage {name!r}"
    return "non-finite value"


def run_trajectory(params: dc.ParamStore, hyper: HyperParams, observations,
                   record_traces: bool = False):
    """Fold step over an observation stream from the initial memory.

    Every observation, including empty ones, passes through the full loop,
    so outputs at step t depend only on z_1..z_t.
    """
    memory = init_memory(params, hyper)
    outputs, traces = [], []
    for t, z in enumerate(observations):
        try:
            memory, out, trace = step(memory, z, params, hyper, record_traces)
        except NumericError as exc:
            raise NumericError(f"step {t}: {exc}") from exc
        outputs.append(out)
        if record_traces:
            traces.append(trace)
    return (outputs, traces) if record_traces else (outputs, None)


class Predictor:
    """Streaming (y, c) interface shared with the baselines."""

    name = "obmnet"

    def __init__(self, params: dc.ParamStore, hyper: HyperParams):
        self.params = params
        self.hyper = hyper

    def run(self, trajectory) -> list[tuple[np.ndarray, np.ndarray]]:
        with dc.no_grad():
            outputs, _ = run_trajectory(
                self.params, self.hyper, (s.z for s in trajectory.steps)
            )
        return [(o.y.value.copy(), o.c.value[0].copy()) for o in outputs]

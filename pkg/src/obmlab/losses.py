"""Set-based training objective for slot-memory filters.

Three per-step terms: a confidence-weighted chamfer term pulling some slot
onto every true object, a reverse term pushing confident slots onto true
objects, and a sparsity term on the confidence vector. Hard min selections
are taken as constants, so gradients flow only through the selected
entries.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc

__all__ = [
    "LossBreakdown",
    "loss_obj",
    "loss_slot",
    "loss_sparse",
    "step_loss",
    "total_step_loss",
    "project_to_simplex",
]


@dataclass
class LossBreakdown:
    l_obj: float
    l_slot: float
    l_sparse: float
    lambda_sparse: float
    total: float
    total_node: dc.Node | None = None


def _as_node(x) -> dc.Node:
    return x if isinstance(x, dc.Node) else dc.constant(x)


def _as_labels(m) -> np.ndarray:
    if isinstance(m, dc.Node):
        m = m.value
    m = np.asarray(m, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    return m


def _distance_matrix(y: dc.Node, m: np.ndarray) -> dc.Node:
    """KxJ matrix of Euclidean distances between slot rows and label rows."""
    if m.shape[1] != y.value.shape[1]:
        raise dc.ShapeError(
            f"labels have width {m.shape[1]}, predictions have width {y.value.shape[1]}"
        )
    cols = [dc.row_l2(dc.sub(y, dc.constant(m[j : j + 1]))) for j in range(m.shape[0])]
    return cols[0] if len(cols) == 1 else dc.concat_cols(cols)


def _inv_conf_col(c: dc.Node, eps: float) -> dc.Node:
    shifted = dc.add(c, dc.constant([[eps]]))
    inv = dc.div(dc.constant([[1.0]]), shifted)
    return dc.transpose(inv)


def loss_obj(y, c, m, eps: float = 1e-3) -> dc.Node:
    """For each label, the distance to its best slot, downweighted by that
    slot's confidence: sum_j min_k (1/(c_k+eps)) * ||y_k - m_j||."""
    m = _as_labels(m)
    if m.shape[0] == 0:
        return dc.constant([[0.0]])
    y = _as_node(y)
    c = _as_node(c)
    dist = _distance_matrix(y, m)
    weighted = dc.scale_rows(dist, _inv_conf_col(c, eps))
    mask = np.zeros_like(weighted.value)
    mask[np.argmin(weighted.value, axis=0), np.arange(m.shape[0])] = 1.0
    return dc.sum_all(dc.mul(weighted, dc.constant(mask)))


def loss_slot(y, c, m) -> dc.Node:
    """For each slot, the distance to its nearest label, scaled by the
    slot's confidence: sum_k min_j c_k * ||y_k - m_j||."""
    m = _as_labels(m)
    if m.shape[0] == 0:
        return dc.constant([[0.0]])
    y = _as_node(y)
    c = _as_node(c)
    dist = _distance_matrix(y, m)
    weighted = dc.scale_rows(dist, dc.transpose(c))
    mask = np.zeros_like(weighted.value)
    mask[np.arange(weighted.value.shape[0]), np.argmin(weighted.value, axis=1)] = 1.0
    return dc.sum_all(dc.mul(weighted, dc.constant(mask)))


def loss_sparse(c) -> dc.Node:
    """-log of the Euclidean norm of the confidence vector; zero exactly at
    a one-hot c, maximal at uniform c."""
    c = _as_node(c)
    return dc.neg(dc.log(dc.l2norm(c)))


def step_loss(y, c, m, eps: float = 1e-3, lambda_sparse: float = 1.0):
    """One step's three terms, sharing a single distance subgraph.

    Returns (total Node, l_obj float, l_slot float, l_sparse float).
    Empty-label steps contribute only the sparsity term.
    """
    m = _as_labels(m)
    y = _as_node(y)
    c = _as_node(c)
    l_sp = loss_sparse(c)
    if m.shape[0] == 0:
        total = dc.scale(l_sp, lambda_sparse)
        return total, 0.0, 0.0, float(l_sp.value[0, 0])

    dist = _distance_matrix(y, m)
    K, J = dist.value.shape

    w_obj = dc.scale_rows(dist, _inv_conf_col(c, eps))
    mask_obj = np.zeros((K, J))
    mask_obj[np.argmin(w_obj.value, axis=0), np.arange(J)] = 1.0
    l_ob = dc.sum_all(dc.mul(w_obj, dc.constant(mask_obj)))

    w_slot = dc.scale_rows(dist, dc.transpose(c))
    mask_slot = np.zeros((K, J))
    mask_slot[np.arange(K), np.argmin(w_slot.value, axis=1)] = 1.0
    l_sl = dc.sum_all(dc.mul(w_slot, dc.constant(mask_slot)))

    total = dc.add(dc.add(l_ob, l_sl), dc.scale(l_sp, lambda_sparse))
    return total, float(l_ob.value[0, 0]), float(l_sl.value[0, 0]), float(l_sp.value[0, 0])


def total_step_loss(outputs, labels, eps: float = 1e-3, lambda_sparse: float = 1.0) -> LossBreakdown:
    """Sum the per-step terms over an aligned (outputs, labels) sequence.

    outputs yields (y, c) pairs; labels yields per-step label matrices. The
    returned breakdown carries the differentiable total in total_node.
    """
    outputs = list(outputs)
    labels = list(labels)
    if len(outputs) != len(labels):
        raise dc.ShapeError(
            f"{len(outputs)} output steps but {len(labels)} label steps"
        )
    sum_obj = sum_slot = sum_sparse = 0.0
    total_node = None
    for (y, c), m in zip(outputs, labels):
        node, l_ob, l_sl, l_sp = step_loss(y, c, m, eps, lambda_sparse)
        sum_obj += l_ob
        sum_slot += l_sl
        sum_sparse += l_sp
        total_node = node if total_node is None else dc.add(total_node, node)
    if total_node is None:
        total_node = dc.constant([[0.0]])
    return LossBreakdown(
        l_obj=sum_obj,
        l_slot=sum_slot,
        l_sparse=sum_sparse,
        lambda_sparse=lambda_sparse,
        total=float(total_node.value[0, 0]),
        total_node=total_node,
    )


def project_to_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection of a vector onto the probability simplex."""
    v = np.asarray(v, dtype=np.float64).ravel()
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    idx = np.arange(1, v.size + 1)
    rho = np.nonzero(u - css / idx > 0)[0][-1]
    theta = css[rho] / (rho + 1.0)
    return np.maximum(v - theta, 0.0)

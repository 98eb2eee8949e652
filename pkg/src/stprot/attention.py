"""GATv2-style multi-head graph attention layer with exact reverse-mode gradients.

Node features are rows. For head ``k`` with neighbor set ``N_i`` (in-neighbors
of target node ``i``, self-loop included)::

    s_ij  = W_a[k] @ [h_i || h_j]          (F_out)
    e_ij  = a[k] . leaky_relu(s_ij)
    alpha = softmax over j in N_i of e_ij
    out_i = mean_k  sum_j alpha_ij W[k] @ h_j

``W_a[k]`` is split as ``[W_left | W_right]`` so that ``s_ij`` is computed as
``W_left h_i + W_right h_j`` from two per-node projections instead of one
per-edge product.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .errors import AlphaMismatch, NonFiniteActivation, ShapeMismatch

NEGATIVE_SLOPE = 0.2


@dataclass
class GatLayerParams:
    """Per-head weights of one attention layer, stacked on axis 0.

    Attributes
    ----------
    w : (H, F_out, F_in)
        Feature transform.
    w_a : (H, F_out, 2 * F_in)
        Attention transform applied to ``[h_i || h_j]``.
    a : (H, F_out)
        Attention vector.
    """

    w: np.ndarray
    w_a: np.ndarray
    a: np.ndarray

    def __post_init__(self):
        h, f_out, f_in = self.w.shape
        if self.w_a.shape != (h, f_out, 2 * f_in) or self.a.shape != (h, f_out):
            raise ShapeMismatch(
                f"inconsistent layer shapes w={self.w.shape} w_a={self.w_a.shape} a={self.a.shape}"
            )

    @property
    def heads(self) -> int:
        return self.w.shape[0]

    @property
    def f_in(self) -> int:
        return self.w.shape[2]

    @property
    def f_out(self) -> int:
        return self.w.shape[1]

    def tensors(self) -> dict[str, np.ndarray]:
        return {"w": self.w, "w_a": self.w_a, "a": self.a}

    @classmethod
    def zeros_like(cls, other: "GatLayerParams") -> "GatLayerParams":
        return cls(np.zeros_like(other.w), np.zeros_like(other.w_a), np.zeros_like(other.a))

    def copy(self) -> "GatLayerParams":
        return GatLayerParams(self.w.copy(), self.w_a.copy(), self.a.copy())


class Neighbors:
    """CSR in-neighbor lists: node ``i`` aggregates from ``indices[offsets[i]:offsets[i+1]]``.

    Edges are stored target-major, so per-node reductions are contiguous
    segment reductions. Scatter matrices used in the backward pass are built
    once and cached.
    """

    def __init__(self, offsets: np.ndarray, indices: np.ndarray):
        self.offsets = np.asarray(offsets, dtype=np.int64)
        self.indices = np.asarray(indices, dtype=np.int64)
        self.n_nodes = len(self.offsets) - 1
        counts = np.diff(self.offsets)
        if np.any(counts < 1):
            empty = np.flatnonzero(counts < 1)[:5].tolist()
            raise ShapeMismatch(f"nodes without in-neighbors: {empty}")
        if self.offsets[-1] != len(self.indices):
            raise ShapeMismatch("offsets do not cover indices")
        self.dst = np.repeat(np.arange(self.n_nodes), counts)
        self._src_scatter: Optional[sp.csr_matrix] = None

    @property
    def n_edges(self) -> int:
        return len(self.indices)

    def segment_starts(self) -> np.ndarray:
        return self.offsets[:-1]

    def src_scatter(self) -> sp.csr_matrix:
        """(N, E) 0/1 matrix summing per-edge rows into their source node."""
        if self._src_scatter is None:
            e = self.n_edges
            self._src_scatter = sp.csr_matrix(
                (np.ones(e), (self.indices, np.arange(e))), shape=(self.n_nodes, e)
            )
        return self._src_scatter

    def aggregation(self, alpha_head: np.ndarray) -> sp.csr_matrix:
        """(N, N) matrix with entry ``[i, j] = alpha_ij``."""
        return sp.csr_matrix(
            (alpha_head, self.indices, self.offsets), shape=(self.n_nodes, self.n_nodes)
        )


@dataclass
class LayerActivation:
    """Forward-pass record kept for the backward pass.

    ``alpha`` and ``scores`` are (H, E) in the edge order of the neighbor
    lists; ``pre`` is the (H, E, F_out) attention pre-activation whose sign
    fixes the LeakyReLU branch; ``z`` is the (H, N, F_out) projection W h.
    """

    alpha: np.ndarray
    scores: np.ndarray
    pre: Optional[np.ndarray]
    z: np.ndarray
    output: np.ndarray

    @property
    def pre_softmax(self) -> np.ndarray:
        return self.scores


def _leaky(x: np.ndarray) -> np.ndarray:
    return np.where(x < 0, NEGATIVE_SLOPE * x, x)


def _leaky_grad(x: np.ndarray) -> np.ndarray:
    return np.where(x < 0, NEGATIVE_SLOPE, 1.0)


def segment_softmax(scores: np.ndarray, nbrs: Neighbors) -> np.ndarray:
    """Softmax of a (E,) score vector within each target node's segment."""
    starts = nbrs.segment_starts()
    seg_max = np.maximum.reduceat(scores, starts)
    ex = np.exp(scores - seg_max[nbrs.dst])
    denom = np.add.reduceat(ex, starts)
    return ex / denom[nbrs.dst]


def _check_input(params: GatLayerParams, h: np.ndarray, nbrs: Neighbors):
    if h.ndim != 2 or h.shape[1] != params.f_in:
        raise ShapeMismatch(f"h has shape {h.shape}, layer expects (N, {params.f_in})")
    if h.shape[0] != nbrs.n_nodes:
        raise ShapeMismatch(f"h has {h.shape[0]} rows, graph has {nbrs.n_nodes} nodes")


def gat_forward(params: GatLayerParams, h: np.ndarray, nbrs: Neighbors) -> LayerActivation:
    _check_input(params, h, nbrs)
    n_heads, f_out, f_in = params.w.shape
    src, dst = nbrs.indices, nbrs.dst
    alpha = np.empty((n_heads, nbrs.n_edges))
    scores = np.empty((n_heads, nbrs.n_edges))
    pre = np.empty((n_heads, nbrs.n_edges, f_out))
    z = np.empty((n_heads, h.shape[0], f_out))
    out = np.zeros((h.shape[0], f_out))
    for k in range(n_heads):
        w_left = params.w_a[k, :, :f_in]
        w_right = params.w_a[k, :, f_in:]
        q_dst = h @ w_left.T
        q_src = h @ w_right.T
        s = q_dst[dst] + q_src[src]
        pre[k] = s
        scores[k] = _leaky(s) @ params.a[k]
        alpha[k] = segment_softmax(scores[k], nbrs)
        z[k] = h @ params.w[k].T
        out += nbrs.aggregation(alpha[k]) @ z[k]
    out /= n_heads
    if not np.all(np.isfinite(out)):
        raise NonFiniteActivation("attention layer produced non-finite output")
    return LayerActivation(alpha=alpha, scores=scores, pre=pre, z=z, output=out)


def gat_forward_with_fixed_alpha(
    params: GatLayerParams, h: np.ndarray, nbrs: Neighbors, alpha: np.ndarray
) -> LayerActivation:
    """Aggregate with externally supplied attention coefficients.

    The score and softmax stages are skipped; ``alpha`` is treated as a
    constant by :func:`gat_backward_fixed_alpha`.
    """
    _check_input(params, h, nbrs)
    n_heads, f_out, _ = params.w.shape
    if alpha.shape != (n_heads, nbrs.n_edges):
        raise AlphaMismatch(
            f"alpha has shape {alpha.shape}, expected ({n_heads}, {nbrs.n_edges})"
        )
    z = np.empty((n_heads, h.shape[0], f_out))
    out = np.zeros((h.shape[0], f_out))
    for k in range(n_heads):
        z[k] = h @ params.w[k].T
        out += nbrs.aggregation(alpha[k]) @ z[k]
    out /= n_heads
    if not np.all(np.isfinite(out)):
        raise NonFiniteActivation("attention layer produced non-finite output")
    return LayerActivation(alpha=alpha, scores=np.full_like(alpha, np.nan), pre=None, z=z, output=out)


def _check_grad(act: LayerActivation, grad_output: np.ndarray):
    if grad_output.shape != act.output.shape:
        raise ShapeMismatch(
            f"grad_output has shape {grad_output.shape}, expected {act.output.shape}"
        )


def gat_backward(
    params: GatLayerParams,
    h: np.ndarray,
    nbrs: Neighbors,
    act: LayerActivation,
    grad_output: np.ndarray,
) -> tuple[GatLayerParams, np.ndarray]:
    """Gradients of a scalar loss w.r.t. the layer parameters and the input ``h``."""
    _check_input(params, h, nbrs)
    _check_grad(act, grad_output)
    n_heads, f_out, f_in = params.w.shape
    src, dst = nbrs.indices, nbrs.dst
    starts = nbrs.segment_starts()
    scatter_src = nbrs.src_scatter()
    grads = GatLayerParams.zeros_like(params)
    grad_h = np.zeros_like(h)
    g = grad_output / n_heads
    for k in range(n_heads):
        agg = nbrs.aggregation(act.alpha[k])
        # aggregation path: out_i += alpha_ij z_j
        grad_z = agg.T @ g
        grads.w[k] = grad_z.T @ h
        grad_h += grad_z @ params.w[k]

        # softmax path
        grad_alpha = np.einsum("ef,ef->e", g[dst], act.z[k][src])
        weighted = act.alpha[k] * grad_alpha
        seg = np.add.reduceat(weighted, starts)
        grad_e = weighted - act.alpha[k] * seg[dst]

        s = act.pre[k]
        grads.a[k] = grad_e @ _leaky(s)
        grad_s = (grad_e[:, None] * params.a[k][None, :]) * _leaky_grad(s)
        grad_q_dst = np.add.reduceat(grad_s, starts, axis=0)
        grad_q_src = scatter_src @ grad_s
        grads.w_a[k, :, :f_in] = grad_q_dst.T @ h
        grads.w_a[k, :, f_in:] = grad_q_src.T @ h
        grad_h += grad_q_dst @ params.w_a[k, :, :f_in] + grad_q_src @ params.w_a[k, :, f_in:]
    return grads, grad_h


def gat_backward_fixed_alpha(
    params: GatLayerParams,
    h: np.ndarray,
    nbrs: Neighbors,
    act: LayerActivation,
    grad_output: np.ndarray,
) -> tuple[GatLayerParams, np.ndarray]:
    """Backward pass of :func:`gat_forward_with_fixed_alpha`; ``w_a`` and ``a`` get zero gradient."""
    _check_input(params, h, nbrs)
    _check_grad(act, grad_output)
    grads = GatLayerParams.zeros_like(params)
    grad_h = np.zeros_like(h)
    g = grad_output / params.heads
    for k in range(params.heads):
        grad_z = nbrs.aggregation(act.alpha[k]).T @ g
        grads.w[k] = grad_z.T @ h
        grad_h += grad_z @ params.w[k]
    return grads, grad_h

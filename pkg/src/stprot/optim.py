"""Adam with decoupled weight decay, the full-graph training loop and prediction."""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .autoencoder import ModelParams, encode, forward, forward_backward, init_params
from .config import LossWeights, TrainConfig
from .dataset import PreprocessState, ProcessedDataset, SpatialOmicsDataset
from .errors import ConfigError, NonFiniteGradient
from .graph import FeatureGraph, build_knn_graph, build_spatial_graph, neighbor_lists
from .preprocess import apply_rna_pipeline, invert_protein_pipeline

logger = logging.getLogger(__name__)

PATIENCE_REL_TOL = 1e-6


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: ModelParams, grads: ModelParams, state: AdamState, t: int, cfg: TrainConfig) -> None:
    """One in-place update of every distinct tensor.

    ``p <- p * (1 - lr * wd)`` first, then the bias-corrected Adam step. Tied
    tensors appear once in ``named_tensors`` and so are stepped once with their
    summed gradient. Nothing is modified if any gradient is non-finite.
    """
    if t < 1:
        raise ValueError("step counter t must be >= 1")
    pairs = list(zip(params.named_tensors(), grads.named_tensors()))
    for (name, p), (gname, g) in pairs:
        if name != gname or p.shape != g.shape:
            raise ValueError(f"gradient layout mismatch at {name}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for {name}")
    b1, b2 = cfg.adam_b1, cfg.adam_b2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    decay = 1.0 - cfg.lr * cfg.weight_decay
    for (name, p), (_, g) in pairs:
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p *= decay
        p -= cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)


@dataclass
class TrainLog:
    epoch: list[int] = field(default_factory=list)
    total: list[float] = field(default_factory=list)
    l_rna: list[float] = field(default_factory=list)
    l_protein: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)

    def __len__(self):
        return len(self.epoch)

    def append(self, epoch, losses, seconds):
        self.epoch.append(epoch)
        self.total.append(losses.total)
        self.l_rna.append(losses.l_rna)
        self.l_protein.append(losses.l_protein)
        self.seconds.append(seconds)

    def losses_equal(self, other: "TrainLog") -> bool:
        """Equality of everything except wall-clock timings."""
        return (self.epoch, self.total, self.l_rna, self.l_protein) == (
            other.epoch, other.total, other.l_rna, other.l_protein,
        )

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "total", "l_rna", "l_protein", "seconds"])
        for row in zip(self.epoch, self.total, self.l_rna, self.l_protein, self.seconds):
            w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])
        return buf.getvalue()


def build_graph(cfg: TrainConfig, embedding: np.ndarray, coords: np.ndarray) -> FeatureGraph:
    if cfg.graph_kind == "knn":
        return build_knn_graph(embedding, cfg.k_neighbors)
    return build_spatial_graph(coords, cfg.radius)


def train(
    ds: ProcessedDataset,
    g: FeatureGraph,
    cfg: TrainConfig,
    callback: Optional[Callable[[int, ModelParams], None]] = None,
) -> tuple[ModelParams, TrainLog]:
    """Full-graph training for ``cfg.epochs`` epochs (or until ``cfg.patience`` runs out).

    ``callback(epoch, params)`` runs after every optimizer step.
    """
    if ds.y is None:
        raise ConfigError("training data has no protein targets")
    if g.n_nodes != ds.x.shape[0]:
        raise ConfigError(f"graph has {g.n_nodes} nodes but data has {ds.x.shape[0]} spots")
    x, y = np.asarray(ds.x), np.asarray(ds.y)
    p = x.shape[1]
    params = init_params((p, *cfg.hidden), cfg.heads, cfg.seed, tied=cfg.tied)
    nbrs = neighbor_lists(g)
    weights = LossWeights.from_config(cfg)
    state = AdamState()
    log = TrainLog()
    best, since_best = np.inf, 0
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        losses, grads = forward_backward(params, x, y, nbrs, weights)
        adam_step(params, grads, state, epoch, cfg)
        log.append(epoch, losses, time.perf_counter() - t0)
        if callback is not None:
            callback(epoch, params)
        if cfg.log_every and epoch % cfg.log_every == 0:
            logger.info(
                "epoch %d total=%.6g rna=%.6g protein=%.6g",
                epoch, losses.total, losses.l_rna, losses.l_protein,
            )
        if cfg.patience is not None:
            if losses.total < best * (1.0 - PATIENCE_REL_TOL):
                best, since_best = losses.total, 0
            else:
                since_best += 1
                if since_best >= cfg.patience:
                    logger.info("early stop at epoch %d", epoch)
                    break
    return params, log


def predict_embedding(
    params: ModelParams, rna_pipeline: PreprocessState, ds_new: SpatialOmicsDataset, cfg: TrainConfig
) -> np.ndarray:
    """PCA-space protein scores ``z`` for an RNA-only dataset."""
    x_new = apply_rna_pipeline(rna_pipeline, ds_new)
    g_new = build_graph(cfg, x_new, ds_new.coords)
    z, _ = encode(params, x_new, neighbor_lists(g_new))
    return z


def predict(
    params: ModelParams,
    rna_pipeline: PreprocessState,
    protein_pipeline: PreprocessState,
    ds_new: SpatialOmicsDataset,
    cfg: TrainConfig,
) -> np.ndarray:
    """CLR-space protein expression predicted from RNA alone."""
    return invert_protein_pipeline(protein_pipeline, predict_embedding(params, rna_pipeline, ds_new, cfg))


__all__ = [
    "AdamState", "TrainLog", "TrainConfig", "adam_step", "build_graph",
    "train", "predict", "predict_embedding", "forward",
]

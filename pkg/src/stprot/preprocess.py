"""RNA and protein normalization, highly-variable-gene selection and PCA."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .dataset import PreprocessState, ProcessedDataset, SpatialOmicsDataset
from .errors import EmptyRow, GeneMissing, ProteinMissing, RankDeficient, ShapeMismatch

N_HVG = 4000
HVG_BINS = 20
# each mean-expression bin must hold at least this many genes
HVG_MIN_BIN = 10


def _library_scale(counts: np.ndarray) -> np.ndarray:
    rowsum = counts.sum(axis=1)
    empty = np.flatnonzero(rowsum <= 0)
    if empty.size:
        raise EmptyRow(f"spot(s) with all-zero counts at rows {empty[:10].tolist()}")
    return np.median(rowsum) / rowsum


def lognorm_rna(counts: np.ndarray) -> np.ndarray:
    """``log(1 + counts * S / rowsum)`` with ``S`` the median library size."""
    counts = np.asarray(counts, dtype=np.float64)
    return np.log1p(counts * _library_scale(counts)[:, None])


@dataclass(frozen=True)
class HvgRanking:
    gene_index: np.ndarray
    standardized_variance: np.ndarray


def _standardized_variance(lognorm: np.ndarray) -> np.ndarray:
    n_genes = lognorm.shape[1]
    mean = lognorm.mean(axis=0)
    var = lognorm.var(axis=0, ddof=1 if lognorm.shape[0] > 1 else 0)
    out = np.full(n_genes, -np.inf)
    n_bins = int(np.clip(n_genes // HVG_MIN_BIN, 1, HVG_BINS))
    order = np.lexsort((np.arange(n_genes), np.log1p(mean)))
    for members in np.array_split(order, n_bins):
        members = members[var[members] > 0]
        if members.size == 0:
            continue
        lv = np.log(var[members])
        sd = lv.std()
        out[members] = (lv - lv.mean()) / sd if sd > 0 else 0.0
    return out


def select_hvg(lognorm: np.ndarray, n_top: int = N_HVG) -> HvgRanking:
    """Rank genes by log-variance z-scored within equal-occupancy mean-expression bins.

    Genes are split into up to 20 bins of equal size by ``log1p(mean)``
    (at least 10 genes per bin); constant genes score ``-inf`` and sort last.
    Ties resolve to the lower gene index.
    """
    lognorm = np.asarray(lognorm, dtype=np.float64)
    if lognorm.ndim != 2 or lognorm.shape[1] < 2:
        raise ShapeMismatch("select_hvg needs a spots x genes matrix with at least 2 genes")
    score = _standardized_variance(lognorm)
    order = np.lexsort((np.arange(len(score)), -score))
    top = order[: min(n_top, len(score))]
    return HvgRanking(gene_index=top, standardized_variance=score[top])


def fit_pca(
    x: np.ndarray, n_components: int, transform_kind: str = "rna_lognorm_pca"
) -> tuple[PreprocessState, np.ndarray]:
    """Exact PCA through the eigendecomposition of the sample covariance.

    Each component is signed so its largest-magnitude loading is positive.
    Returns the fitted state (names and scales left empty for the caller) and
    the ``(N, n_components)`` scores.
    """
    x = np.asarray(x, dtype=np.float64)
    n, d = x.shape
    if not 1 <= n_components <= min(n, d):
        raise ValueError(f"n_components={n_components} must lie in [1, min(N, D)={min(n, d)}]")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / max(n - 1, 1)
    try:
        evals, evecs = np.linalg.eigh(cov)
    except np.linalg.LinAlgError as exc:
        raise RankDeficient(f"covariance eigendecomposition failed: {exc}") from exc
    top = np.argsort(-evals, kind="stable")[:n_components]
    comps = evecs[:, top]
    pivot = np.argmax(np.abs(comps), axis=0)
    comps = comps * np.where(comps[pivot, np.arange(n_components)] < 0, -1.0, 1.0)
    state = PreprocessState(
        selected_gene_names=(),
        per_spot_scale=np.ones(n),
        pca_mean=mean,
        pca_components=comps,
        transform_kind=transform_kind,
        explained_variance=np.maximum(evals[top], 0.0),
    )
    return state, xc @ comps


def clr_protein(counts: np.ndarray) -> np.ndarray:
    """Centered log ratio with a +1 pseudo-count."""
    logc = np.log(np.asarray(counts, dtype=np.float64) + 1.0)
    return logc - logc.mean(axis=1, keepdims=True)


def _project(state: PreprocessState, m: np.ndarray) -> np.ndarray:
    return (m - state.pca_mean) @ state.pca_components


def _columns_by_name(names, available, matrix) -> np.ndarray:
    pos = {g: i for i, g in enumerate(available)}
    missing = [g for g in names if g not in pos]
    if missing:
        raise GeneMissing(missing)
    return matrix[:, [pos[g] for g in names]]


def _rna_features(state: PreprocessState, ds: SpatialOmicsDataset) -> np.ndarray:
    # library size is taken over all genes, before restricting to the HVG set
    lognorm = lognorm_rna(ds.rna_counts)
    return _columns_by_name(state.selected_gene_names, ds.gene_names, lognorm)


def preprocess_training_pair(ds: SpatialOmicsDataset, n_hvg: int = N_HVG) -> ProcessedDataset:
    if not ds.has_protein:
        raise ProteinMissing("training requires a protein table (none supplied)")
    n_prot = len(ds.protein_names)
    if n_hvg < n_prot:
        raise ValueError(f"n_hvg={n_hvg} must be at least the number of proteins ({n_prot})")

    scale = _library_scale(ds.rna_counts)
    lognorm = np.log1p(ds.rna_counts * scale[:, None])
    hvg = select_hvg(lognorm, n_hvg)
    genes = np.sort(hvg.gene_index)
    rna_state, x = fit_pca(lognorm[:, genes], n_prot, "rna_lognorm_pca")
    rna_state = replace(
        rna_state,
        selected_gene_names=tuple(ds.gene_names[g] for g in genes),
        per_spot_scale=scale,
    )

    prot_state, y = fit_pca(clr_protein(ds.protein_counts), n_prot, "protein_clr_pca")
    prot_state = replace(prot_state, selected_gene_names=ds.protein_names)
    return ProcessedDataset(x=x, y=y, rna_pipeline=rna_state, protein_pipeline=prot_state, spot_ids=ds.spot_ids)


def apply_rna_pipeline(state: PreprocessState, ds: SpatialOmicsDataset) -> np.ndarray:
    """Project new RNA data with the stored gene list, centering and loadings (no refit)."""
    if state.transform_kind != "rna_lognorm_pca":
        raise ValueError("state is not an RNA pipeline")
    return _project(state, _rna_features(state, ds))


def apply_protein_pipeline(state: PreprocessState, ds: SpatialOmicsDataset) -> np.ndarray:
    """CLR + stored PCA projection of a protein table, aligned by protein name."""
    if state.transform_kind != "protein_clr_pca":
        raise ValueError("state is not a protein pipeline")
    if not ds.has_protein:
        raise ProteinMissing("dataset has no protein table")
    counts = _columns_by_name(state.selected_gene_names, ds.protein_names, ds.protein_counts)
    return _project(state, clr_protein(counts))


def invert_protein_pipeline(state: PreprocessState, y_hat: np.ndarray) -> np.ndarray:
    """Map PCA-space protein scores back to CLR space."""
    if state.transform_kind != "protein_clr_pca":
        raise ValueError("state is not a protein pipeline")
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y_hat.ndim != 2 or y_hat.shape[1] != state.n_components:
        raise ShapeMismatch(f"expected (N, {state.n_components}) scores, got {y_hat.shape}")
    return y_hat @ state.pca_components.T + state.pca_mean

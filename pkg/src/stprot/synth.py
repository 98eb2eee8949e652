"""Desk-scale synthetic spatial RNA + protein data with known domain labels.

Spots sit on a unit grid and are split into ``n_domains`` contiguous domains
(nearest of randomly placed centers). Gene rates combine a baseline, a
per-domain fold-change program and a few smooth spatial factors; RNA counts are
Poisson draws. Each protein is read from its own handful of highly expressed
driver genes, which share a protein-level domain program. Protein counts are a
fixed non-negative linear map of the RNA counts plus Gaussian noise whose
standard deviation is ``noise`` times the protein's spread across spots, so
``noise=0`` gives protein exactly linear in RNA.

``seed`` fixes the tissue layout, gene programs and RNA->protein map;
``replicate`` redraws the counts and noise, which gives a second slice of the
same tissue for held-out evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import SpatialOmicsDataset

N_FACTORS = 3
GENES_PER_PROTEIN = 8


@dataclass(frozen=True)
class SynthResult:
    dataset: SpatialOmicsDataset
    labels: np.ndarray


def _grid(n_spots: int) -> np.ndarray:
    side = int(np.ceil(np.sqrt(n_spots)))
    i = np.arange(n_spots)
    return np.stack([i % side, i // side], axis=1).astype(np.float64)


def synthesize(
    n_spots: int = 500,
    n_genes: int = 1000,
    n_proteins: int = 10,
    n_domains: int = 3,
    noise: float = 0.1,
    seed: int = 0,
    replicate: int = 0,
    depth: float = 5000.0,
) -> SynthResult:
    if min(n_spots, n_genes, n_proteins, n_domains) < 1:
        raise ValueError("all sizes must be positive")
    if n_domains > n_spots:
        raise ValueError("more domains than spots")
    if noise < 0:
        raise ValueError("noise must be >= 0")
    rng = np.random.default_rng(seed)
    coords = _grid(n_spots)
    extent = coords.max(axis=0) + 1.0

    # domains: nearest of n_domains centers drawn among the spots
    centers = coords[rng.choice(n_spots, size=n_domains, replace=False)]
    d2 = ((coords[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    labels = np.argmin(d2, axis=1)

    base = rng.gamma(shape=0.6, scale=2.0, size=n_genes) + 0.05
    log_fold = np.zeros((n_domains, n_genes))
    for k in range(n_domains):
        markers = rng.choice(n_genes, size=max(1, n_genes // 10), replace=False)
        log_fold[k, markers] = rng.normal(0.0, 1.0, size=markers.size)
    loadings = rng.normal(0.0, 0.5, size=(N_FACTORS, n_genes)) * (rng.random((N_FACTORS, n_genes)) < 0.2)
    freq = rng.uniform(0.5, 2.0, size=(N_FACTORS, 2))
    phase = rng.uniform(0, 2 * np.pi, size=N_FACTORS)
    u = coords / extent
    factors = np.sin(2 * np.pi * (u @ freq.T) + phase)  # (N, N_FACTORS)

    # each protein reads its own set of well-expressed driver genes that share
    # a protein-level domain program and spatial-factor response
    n_driver = min(GENES_PER_PROTEIN, max(1, n_genes // n_proteins))
    drivers = rng.permutation(np.argsort(-base, kind="stable")[: n_driver * n_proteins])
    mapping = np.zeros((n_genes, n_proteins))
    for p in range(n_proteins):
        genes = drivers[p * n_driver : (p + 1) * n_driver]
        program = rng.normal(0.0, 0.5, size=n_domains)
        response = rng.normal(0.0, 0.5, size=N_FACTORS)
        log_fold[:, genes] = program[:, None] + rng.normal(0.0, 0.2, size=(n_domains, genes.size))
        loadings[:, genes] = response[:, None]
        mapping[genes, p] = rng.uniform(0.5, 1.5, size=genes.size)

    rng_rep = np.random.default_rng([seed, replicate + 1])
    log_rate = np.log(base)[None, :] + log_fold[labels] + factors @ loadings
    rate = np.exp(log_rate)
    rate /= rate.sum(axis=1, keepdims=True)
    library = depth * rng_rep.lognormal(0.0, 0.2, size=n_spots)
    rna = rng_rep.poisson(rate * library[:, None]).astype(np.float64)
    # keep every spot non-empty
    empty = rna.sum(axis=1) == 0
    rna[empty, np.argmax(rate[empty], axis=1)] = 1.0

    clean = rna @ mapping
    spread = clean.std(axis=0)
    protein = clean + noise * spread[None, :] * rng_rep.standard_normal(clean.shape)
    np.clip(protein, 0.0, None, out=protein)

    ds = SpatialOmicsDataset(
        spot_ids=[f"spot{i:05d}" for i in range(n_spots)],
        coords=coords,
        rna_counts=rna,
        gene_names=[f"gene{j:05d}" for j in range(n_genes)],
        protein_counts=protein,
        protein_names=[f"prot{p:03d}" for p in range(n_proteins)],
    )
    return SynthResult(dataset=ds, labels=labels)

import numpy as np
import pytest

from stprot.synth import synthesize


def test_shapes_and_labels():
    r = synthesize(n_spots=50, n_genes=40, n_proteins=3, n_domains=4, seed=1)
    ds = r.dataset
    assert ds.rna_counts.shape == (50, 40) and ds.protein_counts.shape == (50, 3)
    assert r.labels.shape == (50,) and set(r.labels.tolist()) == {0, 1, 2, 3}
    assert np.all(ds.rna_counts.sum(axis=1) > 0) and np.all(ds.protein_counts >= 0)


def test_same_seed_same_data():
    a, b = synthesize(n_spots=30, n_genes=30, seed=4), synthesize(n_spots=30, n_genes=30, seed=4)
    assert np.array_equal(a.dataset.rna_counts, b.dataset.rna_counts)
    assert np.array_equal(a.dataset.protein_counts, b.dataset.protein_counts)
    c = synthesize(n_spots=30, n_genes=30, seed=5)
    assert not np.array_equal(a.dataset.rna_counts, c.dataset.rna_counts)


def test_replicate_keeps_tissue_and_redraws_counts():
    a = synthesize(n_spots=40, n_genes=30, seed=2, replicate=0)
    b = synthesize(n_spots=40, n_genes=30, seed=2, replicate=1)
    assert np.array_equal(a.labels, b.labels)
    assert np.array_equal(a.dataset.coords, b.dataset.coords)
    assert not np.array_equal(a.dataset.rna_counts, b.dataset.rna_counts)


def test_zero_noise_protein_is_linear_in_rna():
    ds = synthesize(n_spots=80, n_genes=20, n_proteins=3, noise=0.0, seed=3).dataset
    coef, *_ = np.linalg.lstsq(ds.rna_counts, ds.protein_counts, rcond=None)
    resid = ds.protein_counts - ds.rna_counts @ coef
    assert np.abs(resid).max() < 1e-8 * np.abs(ds.protein_counts).max()
    assert np.all(coef > -1e-8)


def test_argument_checks():
    with pytest.raises(ValueError):
        synthesize(n_spots=0)
    with pytest.raises(ValueError):
        synthesize(n_spots=2, n_domains=3)
    with pytest.raises(ValueError):
        synthesize(noise=-1)

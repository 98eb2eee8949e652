import json
import struct

import numpy as np
import pytest

from stprot.autoencoder import init_params
from stprot.config import TrainConfig
from stprot.dataset import (
    MAGIC,
    SpatialOmicsDataset,
    load_checkpoint,
    load_dataset,
    read_labels_csv,
    save_checkpoint,
    write_dataset,
    write_labels_csv,
)
from stprot.errors import ChecksumError, DimensionMismatch, DuplicateId, ManifestError, ParseError
from stprot.preprocess import preprocess_training_pair


def write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


def test_load_small_csv(tmp_path):
    rna = write(tmp_path / "rna.csv", "spot_id,g1,g2\ns1,1,0\ns2,0,4\ns3,2,2\n")
    coords = write(tmp_path / "coords.csv", "spot_id,x,y\ns1,0,0\ns2,1,0\ns3,0,1\n")
    ds = load_dataset(rna, coords)
    assert ds.n_spots == 3 and ds.gene_names == ("g1", "g2") and not ds.has_protein
    np.testing.assert_array_equal(ds.rna_counts, [[1, 0], [0, 4], [2, 2]])


def test_rows_follow_coordinate_order(tmp_path):
    rna = write(tmp_path / "rna.csv", "spot_id,g1\nb,2\na,1\n")
    prot = write(tmp_path / "prot.csv", "spot_id,p1\na,10\nb,20\n")
    coords = write(tmp_path / "coords.csv", "spot_id,x,y\na,0,0\nb,1,1\n")
    ds = load_dataset(rna, coords, prot)
    assert ds.spot_ids == ("a", "b")
    np.testing.assert_array_equal(ds.rna_counts[:, 0], [1, 2])
    np.testing.assert_array_equal(ds.protein_counts[:, 0], [10, 20])


def test_spot_absent_from_rna(tmp_path):
    rna = write(tmp_path / "rna.csv", "spot_id,g1\ns1,1\ns2,1\n")
    coords = write(tmp_path / "coords.csv", "spot_id,x,y\ns1,0,0\ns2,1,0\ns9,2,2\n")
    with pytest.raises(DimensionMismatch):
        load_dataset(rna, coords)


def test_matrix_market_expansion(tmp_path):
    mtx = write(tmp_path / "rna.mtx", "%%MatrixMarket matrix coordinate integer general\n2 2 2\n1 1 5\n2 2 7\n")
    write(tmp_path / "rna.spots.txt", "s1\ns2\n")
    write(tmp_path / "rna.features.txt", "g1\ng2\n")
    coords = write(tmp_path / "coords.csv", "spot_id,x,y\ns1,0,0\ns2,1,0\n")
    ds = load_dataset(mtx, coords)
    np.testing.assert_array_equal(ds.rna_counts, [[5, 0], [0, 7]])


def test_matrix_market_sidecar_mismatch(tmp_path):
    mtx = write(tmp_path / "rna.mtx", "%%MatrixMarket matrix coordinate real general\n2 2 1\n1 1 5\n")
    write(tmp_path / "rna.spots.txt", "s1\n")
    write(tmp_path / "rna.features.txt", "g1\ng2\n")
    coords = write(tmp_path / "coords.csv", "spot_id,x,y\ns1,0,0\n")
    with pytest.raises(DimensionMismatch):
        load_dataset(mtx, coords)


def test_duplicate_and_malformed(tmp_path):
    coords = write(tmp_path / "coords.csv", "spot_id,x,y\ns1,0,0\ns2,1,0\n")
    dup_gene = write(tmp_path / "dup.csv", "spot_id,g1,g1\ns1,1,1\ns2,1,1\n")
    with pytest.raises(DuplicateId):
        load_dataset(dup_gene, coords)
    dup_spot = write(tmp_path / "coords2.csv", "spot_id,x,y\ns1,0,0\ns1,1,0\n")
    with pytest.raises(DuplicateId):
        load_dataset(write(tmp_path / "ok.csv", "spot_id,g1\ns1,1\n"), dup_spot)
    bad = write(tmp_path / "bad.csv", "spot_id,g1\ns1,abc\ns2,1\n")
    with pytest.raises(ParseError, match="abc"):
        load_dataset(bad, coords)
    neg = write(tmp_path / "neg.csv", "spot_id,g1\ns1,-1\ns2,1\n")
    with pytest.raises(ParseError):
        load_dataset(neg, coords)


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path / "nope.csv", tmp_path / "nope2.csv")


def test_write_then_load_round_trip(tmp_path, small_synth):
    ds = small_synth.dataset
    paths = write_dataset(ds, tmp_path)
    back = load_dataset(paths["rna"], paths["coords"], paths["protein"])
    assert back.spot_ids == ds.spot_ids and back.protein_names == ds.protein_names
    np.testing.assert_array_equal(back.rna_counts, ds.rna_counts)
    np.testing.assert_array_equal(back.protein_counts, ds.protein_counts)
    np.testing.assert_array_equal(back.coords, ds.coords)


def test_labels_round_trip(tmp_path):
    write_labels_csv(tmp_path / "l.csv", ["a", "b"], [3, "x"])
    assert read_labels_csv(tmp_path / "l.csv") == (["a", "b"], ["3", "x"])


def test_row_permutation_stability(small_synth):
    ds = small_synth.dataset
    perm = np.random.default_rng(2).permutation(ds.n_spots)
    a = preprocess_training_pair(ds, n_hvg=50)
    b = preprocess_training_pair(ds.subset(perm), n_hvg=50)
    assert a.rna_pipeline.selected_gene_names == b.rna_pipeline.selected_gene_names
    np.testing.assert_allclose(np.abs(b.x), np.abs(a.x[perm]), atol=1e-9)


def test_dataset_validation():
    with pytest.raises(DimensionMismatch):
        SpatialOmicsDataset(["a"], np.zeros((2, 2)), np.ones((1, 1)), ["g"])
    with pytest.raises(DimensionMismatch):
        SpatialOmicsDataset(["a"], np.zeros((1, 2)), np.ones((1, 1)), ["g"], protein_counts=np.ones((1, 1)))


# --------------------------------------------------------------------------
# checkpoints


@pytest.fixture
def checkpoint(tmp_path, small_synth):
    proc = preprocess_training_pair(small_synth.dataset, n_hvg=50)
    params = init_params((proc.x.shape[1], 5, 3), 2, 4)
    cfg = TrainConfig(epochs=3, hidden=(5, 3), heads=2)
    path = tmp_path / "m.stpk"
    save_checkpoint(params, cfg, (proc.rna_pipeline, proc.protein_pipeline), path)
    return path, params, cfg, proc


def split(raw):
    (n,) = struct.unpack("<Q", raw[len(MAGIC) : len(MAGIC) + 8])
    start = len(MAGIC) + 8
    return json.loads(raw[start : start + n]), raw[start + n :]


def join(header, blob):
    head = json.dumps(header).encode()
    return MAGIC + struct.pack("<Q", len(head)) + head + blob


def test_checkpoint_round_trip_is_bit_exact(checkpoint):
    path, params, cfg, proc = checkpoint
    p2, cfg2, (rna, prot) = load_checkpoint(path)
    assert cfg2 == cfg and p2.tied
    for (n1, a), (n2, b) in zip(params.named_tensors(), p2.named_tensors()):
        assert n1 == n2 and a.tobytes() == b.tobytes()
    assert rna.equals(proc.rna_pipeline) and prot.equals(proc.protein_pipeline)
    assert p2.dec_layer1 is p2.enc_layer1


def test_untied_checkpoint_round_trip(tmp_path, checkpoint):
    _, _, cfg, proc = checkpoint
    params = init_params((proc.x.shape[1], 5, 3), 2, 4, tied=False)
    save_checkpoint(params, cfg, (proc.rna_pipeline, proc.protein_pipeline), tmp_path / "u.stpk")
    back, _, _ = load_checkpoint(tmp_path / "u.stpk")
    assert not back.tied
    assert all(np.array_equal(a, b) for (_, a), (_, b) in zip(params.named_tensors(), back.named_tensors()))


def test_truncated_blob(checkpoint):
    path = checkpoint[0]
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(ChecksumError):
        load_checkpoint(path)


def test_corrupted_byte(checkpoint):
    path = checkpoint[0]
    raw = bytearray(path.read_bytes())
    raw[-3] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(ChecksumError):
        load_checkpoint(path)


def test_empty_file(tmp_path):
    (tmp_path / "e.stpk").write_bytes(b"")
    with pytest.raises(ManifestError):
        load_checkpoint(tmp_path / "e.stpk")


def test_manifest_shape_disagrees_with_blob(checkpoint):
    path = checkpoint[0]
    header, blob = split(path.read_bytes())
    header["tensors"][0]["shape"] = [s + 1 for s in header["tensors"][0]["shape"]]
    path.write_bytes(join(header, blob))
    with pytest.raises(ManifestError):
        load_checkpoint(path)


def test_reordered_manifest_loads_identically(checkpoint):
    path, params, _, _ = checkpoint
    header, blob = split(path.read_bytes())
    header["tensors"] = header["tensors"][::-1]
    path.write_bytes(join(header, blob))
    back, _, _ = load_checkpoint(path)
    assert all(a.tobytes() == b.tobytes() for (_, a), (_, b) in zip(params.named_tensors(), back.named_tensors()))


def test_saving_is_byte_deterministic(tmp_path, checkpoint):
    path, params, cfg, proc = checkpoint
    save_checkpoint(params, cfg, (proc.rna_pipeline, proc.protein_pipeline), tmp_path / "again.stpk")
    assert path.read_bytes() == (tmp_path / "again.stpk").read_bytes()


def test_non_finite_tensor_refused(tmp_path, checkpoint):
    _, params, cfg, proc = checkpoint
    params.enc_fc_b[0] = np.inf
    with pytest.raises(ValueError):
        save_checkpoint(params, cfg, (proc.rna_pipeline, proc.protein_pipeline), tmp_path / "bad.stpk")

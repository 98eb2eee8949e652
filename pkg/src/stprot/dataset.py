"""Spatial multi-omics data model, file readers/writers and the ``.stpk`` checkpoint format.

Input formats
-------------
* Matrix CSV: header row of feature names, first column spot ids.
* MatrixMarket: ``%%MatrixMarket matrix coordinate real general``, spots as
  rows. Names come from sidecar files next to ``foo.mtx``: ``foo.spots.txt``
  and ``foo.features.txt``, one name per line.
* Coordinates CSV: columns ``spot_id,x,y``.

Checkpoint layout
-----------------
``b"STPK\\x01"``, an 8-byte little-endian header length, a UTF-8 JSON header
(tensor manifest, blob length and CRC32, config, preprocessing metadata), then
the blob of little-endian float64 tensors in row-major order.
"""

from __future__ import annotations

import csv
import json
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd
import scipy.io

from .autoencoder import ModelParams
from .config import TrainConfig
from .errors import (
    ChecksumError,
    DimensionMismatch,
    DuplicateId,
    ManifestError,
    ParseError,
    ShapeMismatch,
)

MAGIC = b"STPK\x01"
FORMAT_VERSION = 1
TRANSFORM_KINDS = ("rna_lognorm_pca", "protein_clr_pca")


def _frozen(a, dtype=np.float64) -> np.ndarray:
    arr = np.array(a, dtype=dtype)
    arr.setflags(write=False)
    return arr


def _check_unique(names: Sequence[str], what: str) -> None:
    seen = set()
    dups = []
    for n in names:
        if n in seen:
            dups.append(n)
        seen.add(n)
    if dups:
        raise DuplicateId(f"duplicate {what}: {sorted(set(dups))[:10]}")


def _check_counts(m: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(m)):
        raise ParseError(f"{what} contains non-finite values")
    if np.any(m < 0):
        raise ParseError(f"{what} contains negative values")


@dataclass(frozen=True)
class SpatialOmicsDataset:
    spot_ids: tuple[str, ...]
    coords: np.ndarray
    rna_counts: np.ndarray
    gene_names: tuple[str, ...]
    protein_counts: Optional[np.ndarray] = None
    protein_names: Optional[tuple[str, ...]] = None

    def __post_init__(self):
        object.__setattr__(self, "spot_ids", tuple(str(s) for s in self.spot_ids))
        object.__setattr__(self, "gene_names", tuple(str(s) for s in self.gene_names))
        object.__setattr__(self, "coords", _frozen(self.coords))
        object.__setattr__(self, "rna_counts", _frozen(self.rna_counts))
        n = len(self.spot_ids)
        if self.coords.shape != (n, 2):
            raise DimensionMismatch(f"coords shape {self.coords.shape}, expected ({n}, 2)")
        if self.rna_counts.shape != (n, len(self.gene_names)):
            raise DimensionMismatch(
                f"rna_counts shape {self.rna_counts.shape}, expected ({n}, {len(self.gene_names)})"
            )
        _check_unique(self.spot_ids, "spot ids")
        _check_unique(self.gene_names, "gene names")
        _check_counts(self.rna_counts, "RNA counts")
        if not np.all(np.isfinite(self.coords)):
            raise ParseError("coordinates contain non-finite values")
        if (self.protein_counts is None) != (self.protein_names is None):
            raise DimensionMismatch("protein_counts and protein_names must be given together")
        if self.protein_counts is not None:
            object.__setattr__(self, "protein_names", tuple(str(s) for s in self.protein_names))
            object.__setattr__(self, "protein_counts", _frozen(self.protein_counts))
            if self.protein_counts.shape != (n, len(self.protein_names)):
                raise DimensionMismatch(
                    f"protein_counts shape {self.protein_counts.shape}, "
                    f"expected ({n}, {len(self.protein_names)})"
                )
            _check_unique(self.protein_names, "protein names")
            _check_counts(self.protein_counts, "protein counts")

    @property
    def n_spots(self) -> int:
        return len(self.spot_ids)

    @property
    def has_protein(self) -> bool:
        return self.protein_counts is not None

    def subset(self, order: Sequence[int]) -> "SpatialOmicsDataset":
        """Reorder or subset spots."""
        idx = np.asarray(order, dtype=np.int64)
        return SpatialOmicsDataset(
            spot_ids=[self.spot_ids[i] for i in idx],
            coords=self.coords[idx],
            rna_counts=self.rna_counts[idx],
            gene_names=self.gene_names,
            protein_counts=None if self.protein_counts is None else self.protein_counts[idx],
            protein_names=self.protein_names,
        )


@dataclass(frozen=True)
class PreprocessState:
    """Everything needed to re-apply a fitted transform to new data.

    For RNA, ``selected_gene_names`` are the highly variable genes (in the
    column order fed to PCA) and ``per_spot_scale`` the training library-size
    factors. For protein, ``selected_gene_names`` holds the protein names.
    """

    selected_gene_names: tuple[str, ...]
    per_spot_scale: np.ndarray
    pca_mean: np.ndarray
    pca_components: np.ndarray  # (D, n_components), orthonormal columns
    transform_kind: str
    explained_variance: np.ndarray = field(default_factory=lambda: _frozen([]))

    def __post_init__(self):
        if self.transform_kind not in TRANSFORM_KINDS:
            raise ValueError(f"unknown transform kind {self.transform_kind!r}")
        object.__setattr__(self, "selected_gene_names", tuple(self.selected_gene_names))
        for name in ("per_spot_scale", "pca_mean", "pca_components", "explained_variance"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        if self.pca_components.ndim != 2 or self.pca_components.shape[0] != len(self.pca_mean):
            raise ShapeMismatch("pca_components rows must match pca_mean length")

    @property
    def n_components(self) -> int:
        return self.pca_components.shape[1]

    def arrays(self) -> dict[str, np.ndarray]:
        return {
            "per_spot_scale": self.per_spot_scale,
            "pca_mean": self.pca_mean,
            "pca_components": self.pca_components,
            "explained_variance": self.explained_variance,
        }

    def meta(self) -> dict:
        return {
            "selected_gene_names": list(self.selected_gene_names),
            "transform_kind": self.transform_kind,
        }

    def to_json(self) -> dict:
        d = self.meta()
        for k, v in self.arrays().items():
            d[k] = {"shape": list(v.shape), "data": v.ravel().tolist()}
        return d

    @classmethod
    def from_json(cls, d: dict) -> "PreprocessState":
        arrays = {
            k: np.array(d[k]["data"], dtype=np.float64).reshape(d[k]["shape"])
            for k in ("per_spot_scale", "pca_mean", "pca_components", "explained_variance")
        }
        return cls(
            selected_gene_names=tuple(d["selected_gene_names"]),
            transform_kind=d["transform_kind"],
            **arrays,
        )

    def equals(self, other: "PreprocessState") -> bool:
        return self.meta() == other.meta() and all(
            a.shape == b.shape and np.array_equal(a, b)
            for a, b in zip(self.arrays().values(), other.arrays().values())
        )


@dataclass(frozen=True)
class ProcessedDataset:
    x: np.ndarray
    y: Optional[np.ndarray]
    rna_pipeline: PreprocessState
    protein_pipeline: Optional[PreprocessState]
    spot_ids: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "x", _frozen(self.x))
        if not np.all(np.isfinite(self.x)):
            raise ParseError("processed RNA matrix has non-finite entries")
        if self.y is not None:
            object.__setattr__(self, "y", _frozen(self.y))
            if self.y.shape != self.x.shape:
                raise ShapeMismatch(f"x {self.x.shape} and y {self.y.shape} differ in shape")
            if not np.all(np.isfinite(self.y)):
                raise ParseError("processed protein matrix has non-finite entries")


# --------------------------------------------------------------------------
# readers


def _read_matrix_csv(path: Path) -> tuple[list[str], list[str], np.ndarray]:
    try:
        df = pd.read_csv(path, index_col=0, dtype=str, keep_default_na=False)
    except (pd.errors.ParserError, UnicodeDecodeError, ValueError) as exc:
        raise ParseError(f"{path}: {exc}") from exc
    if df.shape[1] == 0:
        raise ParseError(f"{path}: no feature columns")
    spots = [str(s) for s in df.index]
    # pandas renames repeated headers ("g", "g.1"); take names from the raw header line
    with open(path, encoding="utf-8", newline="") as fh:
        features = next(csv.reader(fh))[1:]
    if len(features) != df.shape[1]:
        raise ParseError(f"{path}: header has {len(features)} feature names for {df.shape[1]} columns")
    try:
        # numpy's string conversion is correctly rounded; pd.to_numeric is not
        values = df.to_numpy(dtype=str).astype(np.float64)
    except (ValueError, TypeError):
        # locate the first bad cell for the message
        for r, row in enumerate(df.itertuples(index=False)):
            for c, cell in enumerate(row):
                try:
                    float(cell)
                except ValueError:
                    raise ParseError(
                        f"{path}: malformed value {cell!r} at spot {spots[r]!r}, column {features[c]!r}"
                    ) from None
        raise ParseError(f"{path}: malformed numeric data")
    return spots, features, values


def _read_names(path: Path) -> list[str]:
    if not path.exists():
        raise FileNotFoundError(f"sidecar name list not found: {path}")
    with open(path, encoding="utf-8") as fh:
        return [line.rstrip("\r\n") for line in fh if line.strip()]


def _read_mtx(path: Path) -> tuple[list[str], list[str], np.ndarray]:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip().lower().split()
    if header[:3] != ["%%matrixmarket", "matrix", "coordinate"] or header[4:5] != ["general"]:
        raise ParseError(f"{path}: expected a '%%MatrixMarket matrix coordinate <real|integer> general' header")
    try:
        m = scipy.io.mmread(str(path))
    except (ValueError, IndexError) as exc:
        raise ParseError(f"{path}: {exc}") from exc
    dense = np.asarray(m.toarray() if hasattr(m, "toarray") else m, dtype=np.float64)
    stem = path.with_suffix("")
    spots = _read_names(Path(f"{stem}.spots.txt"))
    features = _read_names(Path(f"{stem}.features.txt"))
    if dense.shape != (len(spots), len(features)):
        raise DimensionMismatch(
            f"{path}: matrix is {dense.shape} but sidecars list {len(spots)} spots, {len(features)} features"
        )
    return spots, features, dense


def read_matrix(path) -> tuple[list[str], list[str], np.ndarray]:
    """Read a spots x features matrix from CSV or MatrixMarket."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    if path.suffix.lower() == ".mtx":
        return _read_mtx(path)
    return _read_matrix_csv(path)


def read_coords(path) -> tuple[list[str], np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False)
    except (pd.errors.ParserError, ValueError) as exc:
        raise ParseError(f"{path}: {exc}") from exc
    missing = {"spot_id", "x", "y"} - set(df.columns)
    if missing:
        raise ParseError(f"{path}: coordinate file lacks columns {sorted(missing)}")
    try:
        xy = df[["x", "y"]].to_numpy(dtype=str).astype(np.float64)
    except (ValueError, TypeError) as exc:
        raise ParseError(f"{path}: malformed coordinate: {exc}") from exc
    return [str(s) for s in df["spot_id"]], xy


def _align(spots: list[str], order: list[str], what: str) -> np.ndarray:
    _check_unique(spots, f"spot ids in {what}")
    pos = {s: i for i, s in enumerate(spots)}
    absent = [s for s in order if s not in pos]
    extra = set(spots) - set(order)
    if absent or extra:
        raise DimensionMismatch(
            f"spot sets differ between coordinates and {what}: "
            f"{len(absent)} missing from {what} (e.g. {absent[:3]}), {len(extra)} extra"
        )
    return np.array([pos[s] for s in order], dtype=np.int64)


def load_dataset(rna_path, coords_path, protein_path=None) -> SpatialOmicsDataset:
    """Load RNA (and optionally protein) counts aligned to the coordinate file's spot order."""
    spot_order, coords = read_coords(coords_path)
    _check_unique(spot_order, "spot ids in coordinates")
    rna_spots, genes, rna = read_matrix(rna_path)
    rna = rna[_align(rna_spots, spot_order, "RNA matrix")]
    protein = protein_names = None
    if protein_path is not None:
        prot_spots, protein_names, protein = read_matrix(protein_path)
        protein = protein[_align(prot_spots, spot_order, "protein matrix")]
    return SpatialOmicsDataset(
        spot_ids=spot_order,
        coords=coords,
        rna_counts=rna,
        gene_names=genes,
        protein_counts=protein,
        protein_names=protein_names,
    )


# --------------------------------------------------------------------------
# writers


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def write_matrix_csv(path, spot_ids, columns, values, index_label="spot_id") -> None:
    df = pd.DataFrame(np.asarray(values), index=list(spot_ids), columns=list(columns))
    df.index.name = index_label
    # 17 significant digits round-trip every float64 exactly
    atomic_write_text(path, df.to_csv(lineterminator="\n", float_format="%.17g"))


def write_coords_csv(path, spot_ids, coords) -> None:
    df = pd.DataFrame({"spot_id": list(spot_ids), "x": coords[:, 0], "y": coords[:, 1]})
    atomic_write_text(path, df.to_csv(index=False, lineterminator="\n", float_format="%.17g"))


def write_dataset(ds: SpatialOmicsDataset, outdir) -> dict[str, Path]:
    outdir = Path(outdir)
    paths = {"rna": outdir / "rna.csv", "coords": outdir / "coords.csv"}
    write_matrix_csv(paths["rna"], ds.spot_ids, ds.gene_names, ds.rna_counts)
    write_coords_csv(paths["coords"], ds.spot_ids, ds.coords)
    if ds.has_protein:
        paths["protein"] = outdir / "protein.csv"
        write_matrix_csv(paths["protein"], ds.spot_ids, ds.protein_names, ds.protein_counts)
    return paths


def write_labels_csv(path, spot_ids, labels) -> None:
    df = pd.DataFrame({"spot_id": list(spot_ids), "label": list(labels)})
    atomic_write_text(path, df.to_csv(index=False, lineterminator="\n"))


def read_labels_csv(path) -> tuple[list[str], list[str]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    df = pd.read_csv(path, dtype=str, keep_default_na=False)
    if list(df.columns[:1]) != ["spot_id"] or "label" not in df.columns:
        raise ParseError(f"{path}: expected columns spot_id,label")
    return list(df["spot_id"]), list(df["label"])


# --------------------------------------------------------------------------
# checkpoints


def _pack(tensors: list[tuple[str, np.ndarray]]) -> tuple[list[dict], bytes]:
    manifest, chunks, offset = [], [], 0
    for name, arr in tensors:
        data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(data)
        offset += len(data)
    return manifest, b"".join(chunks)


def save_checkpoint(
    params: ModelParams,
    cfg: TrainConfig,
    states: tuple[PreprocessState, PreprocessState],
    path,
) -> None:
    rna_state, protein_state = states
    tensors = list(params.named_tensors())
    for t_name, t in tensors:
        if not np.all(np.isfinite(t)):
            raise ValueError(f"refusing to save non-finite tensor {t_name}")
    for prefix, st in (("rna_pipeline", rna_state), ("protein_pipeline", protein_state)):
        tensors += [(f"{prefix}.{k}", v) for k, v in st.arrays().items()]
    manifest, blob = _pack(tensors)
    header = {
        "format_version": FORMAT_VERSION,
        "blob_length": len(blob),
        "blob_crc32": zlib.crc32(blob),
        "tied": params.tied,
        "tensors": manifest,
        "config": cfg.to_dict(),
        "rna_pipeline": rna_state.meta(),
        "protein_pipeline": protein_state.meta(),
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    atomic_write_bytes(path, MAGIC + struct.pack("<Q", len(head)) + head + blob)


def _parse_header(raw: bytes) -> tuple[dict, bytes]:
    if len(raw) < len(MAGIC) + 8 or raw[: len(MAGIC)] != MAGIC:
        raise ManifestError("not an STPK checkpoint (bad or missing magic bytes)")
    (head_len,) = struct.unpack("<Q", raw[len(MAGIC) : len(MAGIC) + 8])
    start = len(MAGIC) + 8
    if start + head_len > len(raw):
        raise ManifestError("header length exceeds file size")
    try:
        header = json.loads(raw[start : start + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ManifestError(f"unreadable checkpoint header: {exc}") from exc
    for key in ("blob_length", "blob_crc32", "tensors", "config", "tied"):
        if key not in header:
            raise ManifestError(f"checkpoint header lacks {key!r}")
    return header, raw[start + head_len :]


def _unpack(header: dict, blob: bytes) -> dict[str, np.ndarray]:
    if len(blob) != header["blob_length"] or zlib.crc32(blob) != header["blob_crc32"]:
        raise ChecksumError(
            f"blob is {len(blob)} bytes (expected {header['blob_length']}) or fails its CRC32"
        )
    spans, out = [], {}
    for entry in header["tensors"]:
        name, shape, offset = entry["name"], tuple(entry["shape"]), entry["offset"]
        if name in out:
            raise ManifestError(f"tensor {name!r} listed twice")
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if offset < 0 or offset + nbytes > len(blob):
            raise ManifestError(f"tensor {name!r} extends past the blob")
        spans.append((offset, nbytes, name))
        out[name] = np.frombuffer(blob, dtype="<f8", count=nbytes // 8, offset=offset).astype(np.float64).reshape(shape)
    pos = 0
    for offset, nbytes, name in sorted(spans):
        if offset != pos:
            raise ManifestError(f"tensor {name!r} overlaps or leaves a gap at byte {pos}")
        pos += nbytes
    if pos != len(blob):
        raise ManifestError(f"manifest covers {pos} bytes but blob holds {len(blob)}")
    return out


def load_checkpoint(path) -> tuple[ModelParams, TrainConfig, tuple[PreprocessState, PreprocessState]]:
    raw = Path(path).read_bytes()
    header, blob = _parse_header(raw)
    tensors = _unpack(header, blob)
    cfg = TrainConfig.from_dict(header["config"])
    states = []
    for prefix in ("rna_pipeline", "protein_pipeline"):
        arrays = {k.split(".", 1)[1]: v for k, v in tensors.items() if k.startswith(prefix + ".")}
        try:
            states.append(PreprocessState(**header[prefix], **arrays))
        except (KeyError, TypeError) as exc:
            raise ManifestError(f"incomplete {prefix} in checkpoint: {exc}") from exc
    model = {k: v for k, v in tensors.items() if "_pipeline." not in k}
    try:
        params = ModelParams.from_named_tensors(model, tied=bool(header["tied"]))
    except (KeyError, ValueError) as exc:
        raise ManifestError(f"checkpoint is missing model tensors: {exc}") from exc
    expected = {name for name, _ in params.named_tensors()}
    if expected != set(model):
        raise ManifestError(f"unexpected tensors in checkpoint: {sorted(set(model) - expected)}")
    return params, cfg, (states[0], states[1])

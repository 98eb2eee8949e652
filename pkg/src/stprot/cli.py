"""Command-line front end: ``stprot <command> [options]``.

Exit codes: 0 success, 2 configuration or usage error, 3 data error,
4 numerical failure. Every command that writes a directory also writes
``manifest.json`` describing the run.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

from . import __version__
from .cluster import assign, fit_gmm
from .config import TrainConfig
from .dataset import (
    atomic_write_text,
    load_checkpoint,
    load_dataset,
    read_coords,
    read_labels_csv,
    read_matrix,
    save_checkpoint,
    write_dataset,
    write_labels_csv,
    write_matrix_csv,
)
from .errors import ConfigError, DataError, DimensionMismatch, NumericError
from .graph import write_edge_csv
from .metrics import evaluate, rmse
from .optim import build_graph, predict_embedding, train
from .plot import scatter_labels, scatter_values
from .preprocess import (
    N_HVG,
    apply_protein_pipeline,
    apply_rna_pipeline,
    invert_protein_pipeline,
    preprocess_training_pair,
)
from .synth import synthesize

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
LOSS_MODES = ("mtl", "rna-only", "protein-only")
GRAPH_FLAGS = {"knn": "knn", "spatial": "spatial_radius"}
SWEEP_PARAMS = ("k", "beta")


@dataclass
class RunManifest:
    command: str
    config: dict
    inputs: dict
    outputs: dict
    seed: Optional[int]
    version: str = __version__
    wall_time_s: float = 0.0
    argv: list = field(default_factory=list)

    def write(self, outdir) -> Path:
        path = Path(outdir) / "manifest.json"
        atomic_write_text(path, json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return path


# --------------------------------------------------------------------------
# configuration


def _read_toml(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return dict(doc.get("train", doc))


def _env_seed() -> Optional[int]:
    raw = os.environ.get("STPROT_SEED")
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"STPROT_SEED must be an integer, got {raw!r}") from None


def resolve_seed(flag: Optional[int], file_value: Optional[int] = None) -> int:
    """Flag, then config file, then ``STPROT_SEED``, then 0."""
    for v in (flag, file_value, _env_seed()):
        if v is not None:
            return int(v)
    return 0


def _hidden(text: str) -> tuple[int, int]:
    parts = [p for p in text.split(",") if p.strip()]
    if len(parts) != 2:
        raise argparse.ArgumentTypeError("--hidden takes two comma-separated widths, e.g. 64,64")
    return int(parts[0]), int(parts[1])


def train_config_from_args(args) -> TrainConfig:
    """Merge defaults < TOML file < command-line flags."""
    values = _read_toml(getattr(args, "config", None))
    flag_map = {
        "epochs": "epochs", "lr": "lr", "weight_decay": "weight_decay",
        "beta1": "beta1_loss", "beta2": "beta2_loss", "k": "k_neighbors",
        "radius": "radius", "heads": "heads", "hidden": "hidden",
        "patience": "patience", "log_every": "log_every",
    }
    for flag, key in flag_map.items():
        v = getattr(args, flag, None)
        if v is not None:
            values[key] = v
    if getattr(args, "graph", None) is not None:
        values["graph_kind"] = GRAPH_FLAGS[args.graph]
    if getattr(args, "untied", False):
        values["tied"] = False
    loss_mode = getattr(args, "loss", None) or "mtl"
    values["seed"] = resolve_seed(getattr(args, "seed", None), values.get("seed"))
    try:
        cfg = TrainConfig.from_dict(values)
    except TypeError as exc:
        raise ConfigError(f"bad config value: {exc}") from exc
    if loss_mode == "rna-only":
        cfg = cfg.replace(beta2_loss=0.0)
    elif loss_mode == "protein-only":
        cfg = cfg.replace(beta1_loss=0.0)
    return cfg


# --------------------------------------------------------------------------
# commands


def _pc_names(p: int) -> list[str]:
    return [f"PC{i + 1}" for i in range(p)]


def _load(args, protein: bool):
    return load_dataset(args.rna, args.coords, args.protein if protein else None)


def cmd_synth(args) -> dict:
    seed = resolve_seed(args.seed)
    res = synthesize(
        n_spots=args.n_spots, n_genes=args.n_genes, n_proteins=args.n_proteins,
        n_domains=args.n_domains, noise=args.noise, seed=seed, replicate=args.replicate,
    )
    paths = write_dataset(res.dataset, args.out)
    paths["labels"] = Path(args.out) / "labels.csv"
    write_labels_csv(paths["labels"], res.dataset.spot_ids, res.labels)
    cfg = {k: getattr(args, k) for k in ("n_spots", "n_genes", "n_proteins", "n_domains", "noise", "replicate")}
    return {"config": cfg, "outputs": paths, "seed": seed}


def cmd_preprocess(args) -> dict:
    out = Path(args.out)
    if args.checkpoint:
        _, _, (rna_state, _) = load_checkpoint(args.checkpoint)
        ds = _load(args, protein=False)
        x = apply_rna_pipeline(rna_state, ds)
        paths = {"x": out / "x.csv"}
        write_matrix_csv(paths["x"], ds.spot_ids, _pc_names(x.shape[1]), x)
        return {"config": {"mode": "apply"}, "outputs": paths}
    ds = _load(args, protein=args.protein is not None)
    pd_ = preprocess_training_pair(ds, n_hvg=args.n_hvg)
    p = pd_.x.shape[1]
    paths = {
        "x": out / "x.csv", "y": out / "y.csv",
        "rna_pipeline": out / "rna_pipeline.json", "protein_pipeline": out / "protein_pipeline.json",
    }
    write_matrix_csv(paths["x"], ds.spot_ids, _pc_names(p), pd_.x)
    write_matrix_csv(paths["y"], ds.spot_ids, _pc_names(p), pd_.y)
    atomic_write_text(paths["rna_pipeline"], json.dumps(pd_.rna_pipeline.to_json()) + "\n")
    atomic_write_text(paths["protein_pipeline"], json.dumps(pd_.protein_pipeline.to_json()) + "\n")
    return {"config": {"mode": "fit", "n_hvg": args.n_hvg}, "outputs": paths}


def _fit(ds, cfg: TrainConfig, n_hvg: int):
    pd_ = preprocess_training_pair(ds, n_hvg=n_hvg)
    g = build_graph(cfg, pd_.x, ds.coords)
    params, log = train(pd_, g, cfg)
    return pd_, g, params, log


def cmd_train(args) -> dict:
    cfg = train_config_from_args(args)
    ds = _load(args, protein=args.protein is not None)
    pd_, g, params, log = _fit(ds, cfg, args.n_hvg)
    out = Path(args.out)
    paths = {"checkpoint": out / "model.stpk", "train_log": out / "train_log.csv"}
    save_checkpoint(params, cfg, (pd_.rna_pipeline, pd_.protein_pipeline), paths["checkpoint"])
    atomic_write_text(paths["train_log"], log.to_csv())
    if args.export_graph:
        paths["graph"] = out / "graph.csv"
        write_edge_csv(g, paths["graph"])
    cfg_d = dict(cfg.to_dict(), loss=args.loss, n_hvg=args.n_hvg)
    return {"config": cfg_d, "outputs": paths, "seed": cfg.seed}


def cmd_predict(args) -> dict:
    params, cfg, (rna_state, prot_state) = load_checkpoint(args.checkpoint)
    ds = _load(args, protein=False)
    z = predict_embedding(params, rna_state, ds, cfg)
    clr = invert_protein_pipeline(prot_state, z)
    out = Path(args.out)
    paths = {"protein_clr": out / "protein_clr.csv", "protein_pca": out / "protein_pca.csv"}
    write_matrix_csv(paths["protein_clr"], ds.spot_ids, prot_state.selected_gene_names, clr)
    write_matrix_csv(paths["protein_pca"], ds.spot_ids, _pc_names(z.shape[1]), z)
    return {"config": cfg.to_dict(), "outputs": paths, "seed": cfg.seed}


def _labels_by_spot(path, spot_ids) -> list[str]:
    ids, labels = read_labels_csv(path)
    lookup = dict(zip(ids, labels))
    absent = [s for s in spot_ids if s not in lookup]
    if absent or len(lookup) != len(ids):
        raise DimensionMismatch(f"{path}: labels missing for {len(absent)} spot(s) or duplicated ids")
    return [lookup[s] for s in spot_ids]


def cmd_cluster(args) -> dict:
    src = Path(args.input)
    if src.is_dir():
        src = src / f"protein_{args.space}.csv"
    spots, _, z = read_matrix(src)
    truth = None
    if args.truth:
        truth = _labels_by_spot(args.truth, spots)
    k = args.k if args.k is not None else (len(set(truth)) if truth is not None else None)
    if k is None:
        raise ConfigError("--k is required unless --truth supplies reference labels")
    seed = resolve_seed(args.seed)
    model = fit_gmm(z, k, seed=seed)
    labels = assign(model, z)
    out = Path(args.out)
    paths = {"labels": out / "labels.csv"}
    write_labels_csv(paths["labels"], spots, labels)
    cfg = {"k": k, "space": args.space, "log_likelihood": model.log_likelihood}
    if truth is not None:
        cfg["ari"] = evaluate(labels_true=truth, labels_pred=labels).ari
    return {"config": cfg, "outputs": paths, "seed": seed}


def _matrix_aligned(true_path, pred_path):
    t_spots, t_cols, t = read_matrix(true_path)
    p_spots, p_cols, p = read_matrix(pred_path)
    if set(t_spots) != set(p_spots) or len(t_spots) != len(p_spots):
        raise DimensionMismatch("true and predicted protein tables cover different spots")
    if set(t_cols) != set(p_cols):
        raise DimensionMismatch("true and predicted protein tables have different columns")
    rows = {s: i for i, s in enumerate(p_spots)}
    cols = {c: j for j, c in enumerate(p_cols)}
    p = p[[rows[s] for s in t_spots]][:, [cols[c] for c in t_cols]]
    return t, p


def cmd_evaluate(args) -> dict:
    kwargs = {}
    if args.true_protein or args.pred_protein:
        if not (args.true_protein and args.pred_protein):
            raise ConfigError("--true-protein and --pred-protein must be given together")
        kwargs["y_true"], kwargs["y_pred"] = _matrix_aligned(args.true_protein, args.pred_protein)
    if args.truth or args.pred_labels:
        if not (args.truth and args.pred_labels):
            raise ConfigError("--truth and --pred-labels must be given together")
        ids, pred = read_labels_csv(args.pred_labels)
        kwargs["labels_pred"] = pred
        kwargs["labels_true"] = _labels_by_spot(args.truth, ids)
    report = evaluate(**kwargs)
    out = Path(args.out)
    paths = {"json": out / "report.json", "csv": out / "report.csv"}
    atomic_write_text(paths["json"], report.to_json(args.percent))
    atomic_write_text(paths["csv"], report.to_csv(args.percent))
    sys.stdout.write(report.to_csv(args.percent))
    return {"config": {"percent": args.percent}, "outputs": paths}


def cmd_plot(args) -> dict:
    spots, coords = read_coords(args.coords)
    if args.labels:
        svg = scatter_labels(coords, _labels_by_spot(args.labels, spots), title=args.title or "labels")
    else:
        if not args.values:
            raise ConfigError("give --labels FILE or --values FILE --column NAME")
        v_spots, cols, m = read_matrix(args.values)
        if args.column not in cols:
            raise ConfigError(f"column {args.column!r} not in {args.values} (has {cols[:10]}...)")
        pos = {s: i for i, s in enumerate(v_spots)}
        absent = [s for s in spots if s not in pos]
        if absent:
            raise DimensionMismatch(f"{len(absent)} spot(s) lack values, e.g. {absent[:3]}")
        vals = m[[pos[s] for s in spots], cols.index(args.column)]
        svg = scatter_values(coords, vals, title=args.title or args.column)
    out = Path(args.out)
    atomic_write_text(out, svg)
    return {"config": {}, "outputs": {"svg": out}, "manifest_dir": out.parent}


def parse_int_list(text: str) -> list[int]:
    """``"1,2,5"`` or ``"1..5"`` (inclusive)."""
    text = text.strip()
    if not text:
        return []
    if ".." in text:
        lo, hi = text.split("..", 1)
        return list(range(int(lo), int(hi) + 1))
    return [int(t) for t in text.split(",") if t.strip()]


def parse_grid(text: str) -> list[tuple[int, int]]:
    """``"1..5x1..5"`` -> all (beta1, beta2) pairs, beta1 outer."""
    parts = text.lower().split("x")
    if len(parts) != 2:
        raise ConfigError(f"grid must look like A..BxC..D, got {text!r}")
    a, b = parse_int_list(parts[0]), parse_int_list(parts[1])
    return [(i, j) for i in a for j in b]


def _sweep_one(ds, test, truth, cfg: TrainConfig, n_hvg: int) -> dict:
    pd_, _, params, _ = _fit(ds, cfg, n_hvg)
    if test is not None:
        y = apply_protein_pipeline(pd_.protein_pipeline, test)
        z = predict_embedding(params, pd_.rna_pipeline, test, cfg)
        spots = test.spot_ids
    else:
        y = pd_.y
        z = predict_embedding(params, pd_.rna_pipeline, ds, cfg)
        spots = ds.spot_ids
    row = {"rmse": rmse(y, z)}
    if truth is not None:
        lookup = dict(zip(*truth))
        labels_true = [lookup[s] for s in spots]
        labels = assign(fit_gmm(z, len(set(labels_true)), seed=cfg.seed), z)
        rep = evaluate(labels_true=labels_true, labels_pred=labels)
        row.update({k: v for k, v in rep.as_dict().items() if k != "rmse"})
    return row


def cmd_sweep(args) -> dict:
    base = train_config_from_args(args)
    if args.param == "k":
        if args.values is None:
            raise ConfigError("--param k needs --values, e.g. 1,2,3,4,5")
        points = [{"k_neighbors": v} for v in parse_int_list(args.values)]
    else:
        if args.grid is None:
            raise ConfigError("--param beta needs --grid, e.g. 1..5x1..5")
        points = [{"beta1_loss": float(a), "beta2_loss": float(b)} for a, b in parse_grid(args.grid)]
    if not points:
        raise ConfigError("the parameter grid is empty")
    configs = [base.replace(**p) for p in points]
    ds = _load(args, protein=True)
    test = None
    if args.test_rna:
        test = load_dataset(args.test_rna, args.test_coords, args.test_protein)
    truth = read_labels_csv(args.truth) if args.truth else None
    with ThreadPoolExecutor(max_workers=max(1, args.workers)) as pool:
        rows = list(pool.map(lambda c: _sweep_one(ds, test, truth, c, args.n_hvg), configs))
    keys = list(points[0])
    metrics = list(rows[0])
    lines = [",".join(keys + metrics)]
    for p, r in zip(points, rows):
        lines.append(",".join([repr(p[k]) for k in keys] + [repr(float(r[m])) for m in metrics]))
    out = Path(args.out)
    paths = {"sweep": out / "sweep.csv"}
    atomic_write_text(paths["sweep"], "\n".join(lines) + "\n")
    return {"config": dict(base.to_dict(), param=args.param, points=points), "outputs": paths, "seed": base.seed}


# --------------------------------------------------------------------------
# argument parsing


def _add_data_args(p, protein: bool):
    p.add_argument("--rna", required=True, help="RNA counts (CSV or .mtx)")
    p.add_argument("--coords", required=True, help="spot coordinates CSV (spot_id,x,y)")
    if protein:
        p.add_argument("--protein", help="protein counts (CSV or .mtx)")


def _add_train_args(p):
    p.add_argument("--config", help="TOML file with training settings")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--beta1", type=float, help="RNA reconstruction weight")
    p.add_argument("--beta2", type=float, help="protein prediction weight")
    p.add_argument("--loss", choices=LOSS_MODES, default="mtl")
    p.add_argument("--k", type=int, help="neighbours in the KNN feature graph")
    p.add_argument("--graph", choices=sorted(GRAPH_FLAGS))
    p.add_argument("--radius", type=float)
    p.add_argument("--heads", type=int)
    p.add_argument("--hidden", type=_hidden, help="two hidden widths, e.g. 64,64")
    p.add_argument("--untied", action="store_true", help="give the decoder its own weights")
    p.add_argument("--patience", type=int)
    p.add_argument("--log-every", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--n-hvg", type=int, default=N_HVG)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stprot", description="Predict spatial protein expression from RNA.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic paired dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-spots", type=int, default=500)
    p.add_argument("--n-genes", type=int, default=1000)
    p.add_argument("--n-proteins", type=int, default=10)
    p.add_argument("--n-domains", type=int, default=3)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--replicate", type=int, default=0, help="redraw counts for a second slice")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="normalize, select genes and project")
    _add_data_args(p, protein=True)
    p.add_argument("--checkpoint", help="apply the stored RNA pipeline instead of fitting")
    p.add_argument("--n-hvg", type=int, default=N_HVG)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="fit the autoencoder")
    _add_data_args(p, protein=True)
    _add_train_args(p)
    p.add_argument("--export-graph", action="store_true", help="also write graph.csv")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="predict protein from RNA with a checkpoint")
    _add_data_args(p, protein=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("cluster", help="Gaussian-mixture clustering of an embedding")
    p.add_argument("--input", required=True, help="matrix CSV, or a predict output directory")
    p.add_argument("--space", choices=("pca", "clr"), default="pca",
                   help="which predict output to read when --input is a directory")
    p.add_argument("--k", type=int)
    p.add_argument("--truth", help="reference labels CSV; K defaults to its label count")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("evaluate", help="RMSE and clustering scores")
    p.add_argument("--true-protein")
    p.add_argument("--pred-protein")
    p.add_argument("--truth", help="reference labels CSV")
    p.add_argument("--pred-labels")
    p.add_argument("--percent", action="store_true", help="report clustering scores in percent")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("plot", help="SVG scatter of spots")
    p.add_argument("--coords", required=True)
    p.add_argument("--labels")
    p.add_argument("--values")
    p.add_argument("--column")
    p.add_argument("--title")
    p.add_argument("--out", required=True, help="output .svg path")
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("sweep", help="train across a parameter grid")
    _add_data_args(p, protein=True)
    _add_train_args(p)
    p.add_argument("--param", choices=SWEEP_PARAMS, required=True)
    p.add_argument("--values", help="k values, e.g. 1,2,3 or 1..5")
    p.add_argument("--grid", help="beta grid, e.g. 1..5x1..5")
    p.add_argument("--test-rna")
    p.add_argument("--test-coords")
    p.add_argument("--test-protein")
    p.add_argument("--truth", help="labels CSV; adds clustering scores")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)
    return parser


def _jsonable(d: dict) -> dict:
    return {k: str(v) if isinstance(v, Path) else v for k, v in d.items()}


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    t0 = time.perf_counter()
    try:
        result = args.func(args)
    except ConfigError as exc:
        print(f"stprot: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as exc:
        print(f"stprot: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        print(f"stprot: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        # remaining argument-range checks in the library
        print(f"stprot: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    inputs = {
        k: getattr(args, k)
        for k in ("rna", "coords", "protein", "checkpoint", "input", "truth", "labels", "values",
                  "true_protein", "pred_protein", "pred_labels")
        if getattr(args, k, None)
    }
    manifest = RunManifest(
        command=args.command,
        config=result.get("config", {}),
        inputs=inputs,
        outputs=_jsonable(result.get("outputs", {})),
        seed=result.get("seed"),
        wall_time_s=time.perf_counter() - t0,
        argv=list(sys.argv[1:] if argv is None else argv),
    )
    manifest.write(result.get("manifest_dir", args.out))
    return EXIT_OK


def main(argv=None) -> None:
    sys.exit(run(argv))


if __name__ == "__main__":
    main()

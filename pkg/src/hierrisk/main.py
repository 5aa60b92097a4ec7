from __future__ import annotations

import argparse
import logging
from collections.abc import Callable, Sequence
from dataclasses import asdict
from pathlib import Path
from typing import Any

from hierrisk import storage
from hierrisk.config import (
    PRESETS,
    ConfigError,
    HyperParams,
    apply_preset,
    config_hash,
    load_config_file,
)
from hierrisk.grid import GridSpec
from hierrisk.hierarchy import GranularityHierarchy
from hierrisk.ingest import Dataset, load_csv_dataset, load_dataset, save_dataset, split_dataset
from hierrisk.metrics import interval_frame, write_interval_csv
from hierrisk.objective import NonFiniteLossError
from hierrisk.pipeline import build_base_graphs, build_hierarchy, prepare, rs_tiles_tensor
from hierrisk.remote_sensing import load_encoder, pretrain_autoencoder, save_encoder
from hierrisk.similarity import ViewAdjacency, load_adjacency, save_adjacency
from hierrisk.synthetic import generate_synthetic_city
from hierrisk.train import (
    baseline_report,
    evaluate,
    predict,
    predict_targets,
    render_heatmap,
    restore_model,
    train,
)
from hierrisk.window import DataError, intervals_per_week

logger = logging.getLogger(__name__)

EXIT_DIVERGED = 1
EXIT_CONFIG_ERROR = 2
EXIT_DATA_ERROR = 3
GRAPHS_DIR = "graphs"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hierrisk",
        description="Multi-granularity traffic-accident risk prediction.",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file (may set preset=NAME).")
    common.add_argument("--preset", choices=sorted(PRESETS), default=None)
    common.add_argument("--seed", type=int, default=None, help="Overrides the config seed.")
    common.add_argument(
        "--out", required=True, help="Output directory; nothing is written elsewhere."
    )
    common.add_argument(
        "--no-rs",
        action="store_true",
        help="Disable remote-sensing enhancement.",
    )
    common.add_argument("--log-level", default="INFO")

    sub = parser.add_subparsers(dest="command", required=True)

    build_data = sub.add_parser("build-data", parents=[common], help="Build a dataset directory.")
    build_data.add_argument("--dataset", choices=["synthetic", "csv-dir"], default="synthetic")
    build_data.add_argument("--input", help="CSV directory (with --dataset csv-dir).")
    build_data.add_argument("--rows", type=int, default=16)
    build_data.add_argument("--cols", type=int, default=16)
    build_data.add_argument("--weeks", type=int, default=8)

    pretrain = sub.add_parser("pretrain", parents=[common], help="Pre-train the RS autoencoder.")
    pretrain.add_argument("--data", required=True)
    pretrain.add_argument("--epochs", type=int, default=None)

    hierarchy = sub.add_parser(
        "build-hierarchy", parents=[common], help="Cluster regions into granularity levels."
    )
    hierarchy.add_argument("--data", required=True)
    hierarchy.add_argument("--encoder", help="Pre-trained encoder; uniform blocks without it.")

    train_cmd = sub.add_parser("train", parents=[common], help="Train the network.")
    train_cmd.add_argument("--data", required=True)
    train_cmd.add_argument("--hierarchy", required=True)
    train_cmd.add_argument("--resume", help="Checkpoint to continue from.")

    eval_cmd = sub.add_parser("eval", parents=[common], help="Score a checkpoint on a split.")
    eval_cmd.add_argument("--data", required=True)
    eval_cmd.add_argument("--hierarchy", required=True)
    eval_cmd.add_argument("--checkpoint", required=True)
    eval_cmd.add_argument("--split", choices=["train", "val", "test"], default="test")
    eval_cmd.add_argument(
        "--per-interval",
        action="store_true",
        help="Also write per-interval metric terms as CSV.",
    )

    predict_cmd = sub.add_parser("predict", parents=[common], help="Predict one interval.")
    predict_cmd.add_argument("--data", required=True)
    predict_cmd.add_argument("--hierarchy", required=True)
    predict_cmd.add_argument("--checkpoint", required=True)
    predict_cmd.add_argument("--target", type=int, required=True)
    predict_cmd.add_argument("--heatmap", action="store_true", help="Render the finest level.")

    baseline = sub.add_parser("baseline", parents=[common], help="Historical-average baseline.")
    baseline.add_argument("--data", required=True)
    baseline.add_argument("--split", choices=["train", "val", "test"], default="test")

    return parser


def validate_args(args: argparse.Namespace, parser: argparse.ArgumentParser) -> None:
    if args.config and args.preset:
        parser.error("--preset cannot be combined with --config; set preset= in the file")
    if args.seed is not None and args.seed < 0:
        parser.error("seed must be >= 0")
    if args.command == "build-data":
        if args.dataset == "csv-dir" and not args.input:
            parser.error("--dataset csv-dir requires --input")
        if args.rows < 1 or args.cols < 1 or args.weeks < 1:
            parser.error("rows, cols and weeks must be >= 1")
    if args.command == "pretrain" and args.epochs is not None and args.epochs < 0:
        parser.error("epochs must be >= 0")
    if args.command == "predict" and args.target < 0:
        parser.error("target must be >= 0")


def make_settings(args: argparse.Namespace) -> HyperParams:
    overrides: dict[str, Any] = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.no_rs:
        overrides["use_rs"] = False
    if args.config:
        return load_config_file(args.config, overrides)
    return apply_preset(args.preset or "default", overrides)


def _load(args: argparse.Namespace) -> Dataset:
    return load_dataset(args.data)


def _base_graphs(
    hierarchy_path: str, dataset: Dataset, h: HyperParams
) -> list[ViewAdjacency] | None:
    """Level-1 view graphs saved next to the hierarchy, if build-hierarchy wrote them."""
    directory = Path(hierarchy_path).parent / GRAPHS_DIR
    if not h.use_graph_views or not directory.is_dir():
        return None
    graphs = [load_adjacency(directory, view, level=1) for view in h.views]
    for adj in graphs:
        if adj.n_nodes != dataset.n_regions:
            raise DataError(f"{directory}: {adj.view} graph has {adj.n_nodes} nodes")
    logger.info("graphs loaded dir=%s views=%s", directory, ",".join(h.views))
    return graphs


def run_build_data(args: argparse.Namespace, h: HyperParams) -> dict[str, Any]:
    out = Path(args.out)
    if args.dataset == "synthetic":
        dataset = generate_synthetic_city(
            h.seed,
            GridSpec(rows=args.rows, cols=args.cols),
            args.weeks,
            q=h.q,
            tile_size=h.rs_tile,
        )
    else:
        dataset = load_csv_dataset(args.input)
    path = save_dataset(dataset, out / "dataset")
    logger.info(
        "dataset regions=%d intervals=%d accidents=%.0f",
        dataset.n_regions,
        dataset.n_intervals,
        float(dataset.risk.sum()),
    )
    return {"outputs": {"dataset": path.parent}}


def run_pretrain(args: argparse.Namespace, h: HyperParams) -> dict[str, Any]:
    dataset = _load(args)
    if dataset.rs_tiles is None:
        raise DataError(f"{args.data}: dataset has no RS tiles to pre-train on")
    out = Path(args.out)
    result = pretrain_autoencoder(dataset.rs_tiles, h, epochs=args.epochs, out_dir=out)
    path = save_encoder(out / "encoder.pt", result.model)
    storage.atomic_write_json(
        out / "pretrain.json",
        {"losses": result.losses, "learning_rates": result.learning_rates},
    )
    final = result.losses[-1] if result.losses else None
    return {"outputs": {"encoder": path}, "metrics": {"final_loss": final}}


def run_build_hierarchy(args: argparse.Namespace, h: HyperParams) -> dict[str, Any]:
    dataset = _load(args)
    out = Path(args.out)
    encoder = load_encoder(args.encoder, h) if args.encoder else None
    hierarchy = build_hierarchy(dataset, h, encoder)
    path = out / "hierarchy.json"
    hierarchy.save(path)
    outputs: dict[str, Any] = {"hierarchy": path}
    if h.use_graph_views:
        train, _, _ = split_dataset(dataset, h.p, h.q, intervals_per_week(h.interval_hours))
        for adj in build_base_graphs(dataset, h, int(train[-1]) + 1):
            save_adjacency(out / GRAPHS_DIR, adj, level=1)
        outputs["graphs"] = out / GRAPHS_DIR
    logger.info("hierarchy method=%s sizes=%s", hierarchy.method, list(hierarchy.level_sizes))
    return {"outputs": outputs}


def run_train(args: argparse.Namespace, h: HyperParams) -> dict[str, Any]:
    dataset = _load(args)
    hierarchy = GranularityHierarchy.load(args.hierarchy)
    result = train(
        dataset,
        hierarchy,
        h,
        args.out,
        base_graphs=_base_graphs(args.hierarchy, dataset, h),
        resume_from=args.resume,
    )
    history = [vars(r) for r in result.history]
    storage.atomic_write_json(Path(args.out) / "history.json", history)
    metrics = {"best_val_loss": result.state.best_val if history else None, "epochs": len(history)}
    return {
        "outputs": {"last": result.last_checkpoint, "best": result.best_checkpoint},
        "metrics": metrics,
    }


def _restore(args: argparse.Namespace, h: HyperParams):
    dataset = _load(args)
    hierarchy = GranularityHierarchy.load(args.hierarchy)
    data = prepare(dataset, h, hierarchy, _base_graphs(args.hierarchy, dataset, h))
    grid_shape = (dataset.grid.rows, dataset.grid.cols)
    model = restore_model(args.checkpoint, h, data, grid_shape, rs_tiles_tensor(dataset, h))
    return dataset, data, model


def run_eval(args: argparse.Namespace, h: HyperParams) -> dict[str, Any]:
    _, data, model = _restore(args, h)
    report = evaluate(model, data, args.split, h)
    json_path, text_path = report.save(args.out, stem=f"metrics.{args.split}")
    print(report.format_table(), end="")
    outputs: dict[str, Any] = {"metrics_json": json_path, "metrics_txt": text_path}
    if args.per_interval:
        targets = data.split(args.split)
        preds, _ = predict_targets(model, data, targets, h.batch_size)
        frame = interval_frame(preds[0], data.levels[0].risk[targets], targets, data.hours)
        outputs["per_interval"] = write_interval_csv(
            Path(args.out) / f"intervals.{args.split}.csv", frame
        )
    return {"outputs": outputs, "metrics": report.to_dict()}


def run_predict(args: argparse.Namespace, h: HyperParams) -> dict[str, Any]:
    dataset, data, model = _restore(args, h)
    prediction = predict(model, data, args.target)
    written = prediction.save(args.out)
    outputs: dict[str, Any] = {"tensors": written}
    if args.heatmap:
        outputs["heatmap"] = render_heatmap(
            Path(args.out) / f"heatmap.t{args.target}.png",
            prediction.maps[0],
            (dataset.grid.rows, dataset.grid.cols),
        )
    totals = {f"total_g{m.level}": m.total for m in prediction.maps}
    logger.info("predict target=%d levels=%d", args.target, len(prediction.maps))
    return {"outputs": outputs, "metrics": totals}


def run_baseline(args: argparse.Namespace, h: HyperParams) -> dict[str, Any]:
    report = baseline_report(_load(args), h, args.split)
    json_path, text_path = report.save(args.out, stem=f"baseline.{args.split}")
    print(report.format_table(), end="")
    outputs = {"metrics_json": json_path, "metrics_txt": text_path}
    return {"outputs": outputs, "metrics": report.to_dict()}


COMMANDS: dict[str, Callable[[argparse.Namespace, HyperParams], dict[str, Any]]] = {
    "build-data": run_build_data,
    "pretrain": run_pretrain,
    "build-hierarchy": run_build_hierarchy,
    "train": run_train,
    "eval": run_eval,
    "predict": run_predict,
    "baseline": run_baseline,
}


def run(args: argparse.Namespace) -> int:
    try:
        h = make_settings(args)
        result = COMMANDS[args.command](args, h)
    except ConfigError as exc:
        logger.error("config error: %s", exc)
        return EXIT_CONFIG_ERROR
    except DataError as exc:
        logger.error("data error: %s", exc)
        return EXIT_DATA_ERROR
    except NonFiniteLossError as exc:
        logger.error("training diverged: %s", exc)
        return EXIT_DIVERGED
    storage.write_manifest(
        args.out,
        command=args.command,
        config={"hash": config_hash(h), **asdict(h)},
        seed=h.seed,
        outputs=result.get("outputs"),
        metrics=result.get("metrics"),
    )
    return 0


def main(argv: Sequence[str] | None = None) -> None:
    parser = build_parser()
    args = parser.parse_args(argv)
    validate_args(args, parser)

    logging.basicConfig(
        level=getattr(logging, args.log_level.upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(message)s",
    )
    raise SystemExit(run(args))


if __name__ == "__main__":
    main()

"""Command-line harness: gen-data | train | eval | viz | compare.

Every command takes --config <toml> plus repeatable --set section.key=value
overrides, writes a manifest echoing the fully resolved config, and exits with
0 on success, 2 on config errors, 3 on data errors, 4 on numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint, save_tensors
from .config import RunConfig, load_run_config, require_seed
from .data import PartDataset, default_category_specs, generate_dataset, load_dataset, save_dataset
from .errors import ConfigError, DataError, InputError, NumericalError, ParameterError
from .interp import InterpConv2D
from .metrics import evaluate_maps, part_distribution_heatmap, select_top_indices, valid_region_rf
from .nn.network import reference_network_config
from .nn.train import EpochStats, TrainConfig, fit
from .pgm import write_pgm


def _write_manifest(cfg: RunConfig, command: str, outputs: list[str]) -> None:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "version": __version__,
        "config": cfg.resolved(),
        "outputs": sorted(outputs),
    }
    with open(out / f"{command.replace('-', '_')}_manifest.json", "w") as f:
        json.dump(manifest, f, sort_keys=True, indent=1)


def _dataset_dirs(cfg: RunConfig) -> tuple[Path, Path]:
    root = Path(cfg.dataset.path)
    return root / "train", root / "test"


def cmd_gen_data(cfg: RunConfig) -> int:
    seed = require_seed(cfg, "dataset")
    specs = default_category_specs(cfg.dataset.categories, cfg.dataset.jitter, cfg.dataset.clutter)
    train_dir, test_dir = _dataset_dirs(cfg)
    train = generate_dataset(specs, cfg.dataset.train_per_category, cfg.dataset.image_size, seed, stream=0)
    test = generate_dataset(specs, cfg.dataset.test_per_category, cfg.dataset.image_size, seed, stream=1)
    save_dataset(train, train_dir)
    save_dataset(test, test_dir)
    _write_manifest(cfg, "gen-data", [str(train_dir), str(test_dir)])
    print(f"wrote {len(train.samples)} train / {len(test.samples)} test samples under {cfg.dataset.path}")
    return 0


def _train_config(cfg: RunConfig, lambda_coeff: float | None = None) -> TrainConfig:
    t = cfg.train
    return TrainConfig(
        epochs=t.epochs,
        seed=require_seed(cfg, "train"),
        lr=t.lr,
        momentum=t.momentum,
        batch_size=t.batch_size,
        lambda_coeff=t.lambda_coeff if lambda_coeff is None else lambda_coeff,
        ema_rate=t.ema_rate,
        warmup_epochs=t.warmup_epochs,
        px_mode=t.px_mode,
        lambda_per_filter=t.lambda_per_filter,
        lr_decay_epochs=t.lr_decay_epochs,
        lr_decay_factor=t.lr_decay_factor,
        log_subset=t.log_subset,
    )


def _net_config(cfg: RunConfig, dataset: PartDataset):
    n = cfg.network
    return reference_network_config(
        image_size=dataset.image_size,
        num_classes=dataset.num_categories,
        interpretable=n.interpretable,
        loss=n.loss,
        conv1_channels=n.conv1_channels,
        conv2_channels=n.conv2_channels,
        interp_filters=n.interp_filters,
        tau=n.tau,
        beta=n.beta,
        alpha=n.alpha,
    )


def _write_train_log(path: Path, history: list[EpochStats]) -> None:
    layer_ids = sorted({i for st in history for i in st.filter_losses})
    headers = ["epoch", "task_loss", "train_accuracy", "lr"]
    for i in layer_ids:
        headers += [
            f"layer{i}_lambda",
            f"layer{i}_mean_filter_loss",
            f"layer{i}_filter_losses",
            f"layer{i}_categories",
        ]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(headers)
        for st in history:
            row: list[object] = [st.epoch, repr(st.task_loss), repr(st.train_accuracy), repr(st.lr)]
            for i in layer_ids:
                fls = st.filter_losses.get(i)
                cats = st.categories.get(i)
                row += [
                    repr(st.lambdas.get(i, 0.0)),
                    repr(float(np.mean(fls))) if fls else "",
                    ";".join(repr(v) for v in fls) if fls else "",
                    ";".join(str(c) for c in cats) if cats else "",
                ]
            w.writerow(row)


def _run_training(cfg: RunConfig, out_dir: Path, lambda_coeff: float | None = None) -> Path:
    train_dir, _ = _dataset_dirs(cfg)
    dataset = load_dataset(train_dir)
    net_config = _net_config(cfg, dataset)
    tcfg = _train_config(cfg, lambda_coeff)
    network, history = fit(net_config, dataset.images_array(), dataset.labels_array(), tcfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = out_dir / "checkpoint.icnn"
    run_echo = cfg.resolved()
    run_echo["train"]["lambda_coeff"] = tcfg.lambda_coeff
    save_checkpoint(ckpt, run_echo, network)
    _write_train_log(out_dir / "train_log.csv", history)
    return ckpt


def cmd_train(cfg: RunConfig) -> int:
    ckpt = _run_training(cfg, Path(cfg.out_dir))
    _write_manifest(cfg, "train", [str(ckpt), str(Path(cfg.out_dir) / "train_log.csv")])
    print(f"checkpoint written to {ckpt}")
    return 0


def _checkpoint_path(cfg: RunConfig) -> Path:
    p = Path(cfg.eval.checkpoint) if cfg.eval.checkpoint else Path(cfg.out_dir) / "checkpoint.icnn"
    if not p.exists():
        raise DataError(f"checkpoint not found: {p}")
    return p


def _evaluate_checkpoint(cfg: RunConfig, ckpt: Path, report_path: Path) -> dict:
    _, test_dir = _dataset_dirs(cfg)
    dataset = load_dataset(test_dir)
    network, _ = load_checkpoint(ckpt)
    images = dataset.images_array()
    labels = dataset.labels_array()
    accuracy = float(np.mean(network.predict(images) == labels))
    maps = network.top_feature_maps(images)
    report = evaluate_maps(
        maps,
        dataset,
        iou_threshold=cfg.eval.iou_threshold,
        top_n=cfg.eval.top_n,
        dilation_radius=cfg.eval.dilation_radius,
        accuracy=accuracy,
    )
    payload = report.to_dict()
    payload["checkpoint"] = str(ckpt)
    report_path.parent.mkdir(parents=True, exist_ok=True)
    with open(report_path, "w") as f:
        json.dump(payload, f, sort_keys=True, indent=1)
    return payload


def cmd_eval(cfg: RunConfig) -> int:
    ckpt = _checkpoint_path(cfg)
    report_path = Path(cfg.out_dir) / "report.json"
    payload = _evaluate_checkpoint(cfg, ckpt, report_path)
    _write_manifest(cfg, "eval", [str(report_path)])
    print(
        f"mean P_f {payload['mean_part_interpretability']:.4f}, "
        f"location instability {payload['location_instability']:.4f}, "
        f"accuracy {payload['accuracy']:.4f} -> {report_path}"
    )
    return 0


def cmd_viz(cfg: RunConfig) -> int:
    ckpt = _checkpoint_path(cfg)
    _, test_dir = _dataset_dirs(cfg)
    dataset = load_dataset(test_dir)
    network, _ = load_checkpoint(ckpt)
    images = dataset.images_array()
    maps = network.top_feature_maps(images)
    size = (dataset.image_size, dataset.image_size)
    viz_dir = Path(cfg.out_dir) / "viz"
    viz_dir.mkdir(parents=True, exist_ok=True)
    outputs: list[str] = []

    peak = maps.max(axis=(2, 3))
    for fm in range(min(cfg.eval.viz_filters, maps.shape[1])):
        from .metrics import activation_threshold

        threshold = activation_threshold(maps[:, fm])
        for rank, i in enumerate(select_top_indices(peak[:, fm], cfg.eval.viz_images)):
            region = valid_region_rf(maps[i, fm], threshold, size, cfg.eval.dilation_radius)
            overlay = np.clip(0.35 * dataset.samples[i].image + 0.65 * region, 0.0, 1.0)
            path = viz_dir / f"filter{fm:02d}_top{rank}.pgm"
            write_pgm(path, np.round(overlay * 255).astype(np.uint8))
            outputs.append(str(path))

    heat = part_distribution_heatmap(maps, size)
    path = viz_dir / "heatmap_all.pgm"
    write_pgm(path, np.round(heat * 255).astype(np.uint8))
    outputs.append(str(path))
    labels = dataset.labels_array()
    for spec in dataset.specs:
        idx = np.nonzero(labels == spec.category_id)[0]
        if not idx.size:
            continue
        heat = part_distribution_heatmap(maps[idx], size)
        path = viz_dir / f"heatmap_cat{spec.category_id}.pgm"
        write_pgm(path, np.round(heat * 255).astype(np.uint8))
        outputs.append(str(path))

    top = network.layers[network.top_conv_index]
    if isinstance(top, InterpConv2D):
        path = viz_dir / "templates_top.icnn"
        save_tensors(
            path,
            {"templates": top.bank.stacked, "priors": top.bank.priors},
            note=f"n={top.bank.n} tau={top.bank.tau} beta={top.bank.beta} alpha={top.bank.alpha}",
        )
        outputs.append(str(path))

    _write_manifest(cfg, "viz", outputs)
    print(f"wrote {len(outputs)} images under {viz_dir}")
    return 0


def cmd_compare(cfg: RunConfig) -> int:
    """Paired interpretable-vs-baseline run on identical seeds and data."""
    out = Path(cfg.out_dir)
    arms = {
        "interp": cfg.train.lambda_coeff,
        "baseline": 0.0,
    }
    summaries: dict[str, dict] = {}
    for arm, coeff in arms.items():
        arm_dir = out / arm
        ckpt = _run_training(cfg, arm_dir, lambda_coeff=coeff)
        payload = _evaluate_checkpoint(cfg, ckpt, arm_dir / "report.json")
        summaries[arm] = {
            "lambda_coeff": coeff,
            "accuracy": payload["accuracy"],
            "mean_part_interpretability": payload["mean_part_interpretability"],
            "location_instability": payload["location_instability"],
            "multi_category_instability": payload["multi_category_instability"],
            "report": str(arm_dir / "report.json"),
        }
    side = {
        "interp": summaries["interp"],
        "baseline": summaries["baseline"],
        "difference": {
            "mean_part_interpretability": summaries["interp"]["mean_part_interpretability"]
            - summaries["baseline"]["mean_part_interpretability"],
            "location_instability": summaries["interp"]["location_instability"]
            - summaries["baseline"]["location_instability"],
            "accuracy": summaries["interp"]["accuracy"] - summaries["baseline"]["accuracy"],
        },
    }
    path = out / "side_by_side.json"
    with open(path, "w") as f:
        json.dump(side, f, sort_keys=True, indent=1)
    _write_manifest(cfg, "compare", [str(path)])
    print(json.dumps(side["difference"], sort_keys=True))
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "viz": cmd_viz,
    "compare": cmd_compare,
}


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="interpconv", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="TOML run configuration")
        p.add_argument(
            "--set",
            dest="overrides",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="override a config value, e.g. --set train.epochs=5",
        )
    args = parser.parse_args(argv)
    try:
        cfg = load_run_config(args.config, args.overrides)
        return COMMANDS[args.command](cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (DataError, ParameterError, InputError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())

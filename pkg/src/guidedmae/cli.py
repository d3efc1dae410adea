"""Command-line pipeline: gen-data, gen-maps, train, eval, plot.

Every run resolves its full flag set (defaults < --config file < explicit
flags) into a flat key=value document written next to its outputs, so any
run can be replayed exactly from that document with ``--config``.

Exit codes: 0 success, 2 usage or validation failure, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import fileio, plotting
from .attention import NORMALIZED, RAW, AttentionMap, TemperatureSchedule, normalize_map, pool_heatmap, temperature_at
from .errors import GuidedMAEError, NonFiniteLossError
from .evaluation import (
    EmbeddingSet,
    LinearProbe,
    few_shot_indices,
    knn_accuracy,
    retrieval_map,
    robustness_suite,
)
from .model import ModelConfig, embed, load_checkpoint, save_checkpoint, train_mae
from .segmentation import AFFINITY_FLOOR, AFFINITY_THRESHOLD, PatchFeatures, tokencut_map

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3

GUIDANCE_FLAGS = {
    "vanilla": "vanilla",
    "attg": "attg",
    "fg-only": "foreground_only",
    "bg-only": "background_only",
    "inverted": "inverted",
    "input-mask": "input_masking",
}
UNIT_WEIGHT_FLAGS = ("vanilla", "input-mask")
DEFAULT_TAU = 0.75


class UsageError(GuidedMAEError):
    pass


def _int_list(text: str):
    return tuple(int(tok) for tok in str(text).split(",") if tok)


# (default, converter) per flag; converters also parse config-file strings
_SPECS = {
    "gen-data": {
        "out": (None, str),
        "classes": (10, int),
        "per_class": (100, int),
        "image_size": (64, int),
        "patch_size": (8, int),
        "seed": (0, int),
        "feature_dim": (16, int),
    },
    "gen-maps": {
        "data": (None, str),
        "out": (None, str),
        "method": ("oracle", str),
        "seed": (0, int),
        "noise_amp": (0.0, float),
        "features": (None, str),
        "heatmaps": (None, str),
        "src": (None, str),
        "threshold": (AFFINITY_THRESHOLD, float),
        "floor_weight": (AFFINITY_FLOOR, float),
    },
    "train": {
        "data": (None, str),
        "maps": (None, str),
        "out": (None, str),
        "guidance": ("attg", str),
        "tau_start": (DEFAULT_TAU, float),
        "tau_end": (1.0, float),
        "schedule": ("cosine", str),
        "mask_ratio": (0.75, float),
        "epochs": (100, int),
        "batch_size": (32, int),
        "lr": (1.5e-3, float),
        "weight_decay": (0.05, float),
        "warmup_frac": (0.05, float),
        "seed": (0, int),
        "embed_dim": (128, int),
        "decoder_dim": (64, int),
        "heads": (4, int),
        "enc_blocks": (4, int),
        "dec_blocks": (2, int),
        "mlp_ratio": (4.0, float),
        "checkpoint_every": (0, int),
    },
    "eval": {
        "checkpoint": (None, str),
        "data": (None, str),
        "out": (None, str),
        "seed": (0, int),
        "k": (20, int),
        "n": ((1, 5, 10, 20), _int_list),
        "query_split": ("val", str),
        "probe_epochs": (100, int),
        "probe_lr": (0.1, float),
    },
    "plot": {
        "loss_csv": (None, str),
        "metrics_csv": (None, str),
        "out": (None, str),
    },
}


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_flags(parser: argparse.ArgumentParser, command: str) -> None:
    parser.add_argument("--config", default=None, help="key=value file of flag defaults")
    for name in _SPECS[command]:
        parser.add_argument(_flag(name), dest=name, default=argparse.SUPPRESS)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="guidedmae",
        description="attention-guided masked autoencoder lab",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    _add_flags(sub.add_parser("gen-data", help="generate the synthetic corpus"), "gen-data")
    _add_flags(sub.add_parser("gen-maps", help="produce per-image attention maps"), "gen-maps")
    _add_flags(sub.add_parser("train", help="pre-train the masked autoencoder"), "train")
    eval_parser = sub.add_parser("eval", help="frozen-feature evaluation")
    eval_parser.add_argument(
        "eval_mode", choices=("knn", "linear", "fewshot", "retrieval", "robustness")
    )
    _add_flags(eval_parser, "eval")
    _add_flags(sub.add_parser("plot", help="render CSV logs as SVG charts"), "plot")
    return parser


def _resolve(command: str, ns: argparse.Namespace) -> dict:
    spec = _SPECS[command]
    resolved = {k: default for k, (default, _) in spec.items()}
    if ns.config is not None:
        path = Path(ns.config)
        if not path.exists():
            raise UsageError(f"config file {path} does not exist")
        for line_no, line in enumerate(path.read_text().splitlines(), 1):
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            key, eq, value = line.partition("=")
            key = key.strip()
            if not eq or key not in spec:
                raise UsageError(f"{path}:{line_no}: unknown config key {key!r}")
            value = value.strip()
            resolved[key] = spec[key][1](value) if value else None
    for key in spec:
        if hasattr(ns, key):
            resolved[key] = spec[key][1](getattr(ns, key))
    return resolved


def _format_value(value) -> str:
    if value is None:
        return ""
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_resolved(out_dir: Path, name: str, resolved: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / f"{name}.cfg", "w") as f:
        for key in sorted(resolved):
            f.write(f"{key}={_format_value(resolved[key])}\n")


def _require(resolved: dict, *keys: str) -> None:
    for key in keys:
        if resolved.get(key) in (None, ""):
            raise UsageError(f"missing required flag {_flag(key)}")


def _repr_row(values) -> list:
    return [repr(v) if isinstance(v, float) else str(v) for v in values]


# --- commands -----------------------------------------------------------------

def cmd_gen_data(resolved: dict) -> int:
    _require(resolved, "out")
    data_mod.generate_dataset(
        resolved["out"],
        classes=resolved["classes"],
        per_class=resolved["per_class"],
        image_size=resolved["image_size"],
        patch_size=resolved["patch_size"],
        seed=resolved["seed"],
        feature_dim=resolved["feature_dim"],
    )
    _write_resolved(Path(resolved["out"]), "gen-data", resolved)
    return EXIT_OK


def _noise_seed(seed: int, idx: int) -> int:
    return int(np.random.SeedSequence((seed, 5, idx)).generate_state(1)[0])


def cmd_gen_maps(resolved: dict) -> int:
    _require(resolved, "data", "out")
    method = resolved["method"]
    if method not in ("oracle", "tokencut", "pooled", "ingest"):
        raise UsageError(f"unknown map method {method!r}")
    index = data_mod.load_index(resolved["data"])
    out = Path(resolved["out"])
    out.mkdir(parents=True, exist_ok=True)
    patch_size = int(index.meta.get("patch_size", 8))
    image_size = int(index.meta.get("image_size", 64))
    grid = image_size // patch_size
    for i, rec in enumerate(index.records):
        if method == "oracle":
            fractions = data_mod.load_patch_mask(index, rec.id)
            raw = data_mod.oracle_attention(
                fractions,
                noise_amp=resolved["noise_amp"],
                seed=_noise_seed(resolved["seed"], i),
            )
        elif method == "tokencut":
            feat_dir = Path(resolved["features"] or (index.root / "features"))
            feats = fileio.read_pfea(feat_dir / f"{rec.id}.pfea")
            raw = tokencut_map(
                PatchFeatures(feats, grid, grid),
                threshold=resolved["threshold"],
                floor_weight=resolved["floor_weight"],
            )
        elif method == "pooled":
            _require(resolved, "heatmaps")
            heat = fileio.read_pgm(Path(resolved["heatmaps"]) / f"{rec.id}.pgm")
            raw = pool_heatmap(heat.astype(np.float64) / 255.0, patch_size)
        else:  # ingest
            _require(resolved, "src")
            loaded = fileio.read_atmp(Path(resolved["src"]) / f"{rec.id}.atmp")
            raw = AttentionMap(loaded.values, state=RAW, source="ingested")
        fileio.write_atmp(out / f"{rec.id}.atmp", normalize_map(raw))
    _write_resolved(out, "gen-maps", resolved)
    return EXIT_OK


def cmd_train(resolved: dict) -> int:
    _require(resolved, "data", "out")
    guidance_flag = resolved["guidance"]
    if guidance_flag not in GUIDANCE_FLAGS:
        raise UsageError(
            f"unknown guidance {guidance_flag!r}; pick one of {sorted(GUIDANCE_FLAGS)}"
        )
    mode = GUIDANCE_FLAGS[guidance_flag]
    if guidance_flag in UNIT_WEIGHT_FLAGS:
        # unit-weight modes ignore the temperature flags entirely
        resolved = dict(resolved, schedule="fixed", tau_start=DEFAULT_TAU, tau_end=DEFAULT_TAU)
    if resolved["schedule"] not in ("fixed", "cosine"):
        raise UsageError(f"unknown schedule {resolved['schedule']!r}")

    index = data_mod.load_index(resolved["data"])
    images, _, ids = data_mod.load_split(index, "train")
    maps = None
    if mode != "vanilla":
        _require(resolved, "maps")
        maps = data_mod.load_maps(resolved["maps"], ids, require_state=NORMALIZED)

    config = ModelConfig(
        image_size=int(index.meta.get("image_size", images.shape[1])),
        patch_size=int(index.meta.get("patch_size", 8)),
        embed_dim=resolved["embed_dim"],
        decoder_dim=resolved["decoder_dim"],
        heads=resolved["heads"],
        encoder_blocks=resolved["enc_blocks"],
        decoder_blocks=resolved["dec_blocks"],
        mlp_ratio=resolved["mlp_ratio"],
        seed=resolved["seed"],
    )
    epochs = resolved["epochs"]
    schedule = TemperatureSchedule(
        "half_cosine" if resolved["schedule"] == "cosine" else "fixed",
        resolved["tau_start"],
        resolved["tau_end"],
        max(epochs - 1, 1),
    )
    out = Path(resolved["out"])
    out.mkdir(parents=True, exist_ok=True)
    every = resolved["checkpoint_every"]

    def on_epoch(epoch, params):
        if every and (epoch + 1) % every == 0:
            save_checkpoint(out / f"checkpoint_epoch{epoch:04d}.amck", params)

    params, log = train_mae(
        config,
        images,
        maps=maps,
        schedule=schedule,
        mode=mode,
        epochs=epochs,
        batch_size=resolved["batch_size"],
        mask_ratio=resolved["mask_ratio"],
        base_lr=resolved["lr"],
        weight_decay=resolved["weight_decay"],
        warmup_frac=resolved["warmup_frac"],
        seed=resolved["seed"],
        on_epoch=on_epoch,
    )
    save_checkpoint(out / "checkpoint.amck", params)
    with open(out / "loss.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "step", "tau", "mode", "loss"])
        for epoch, step, tau, row_mode, loss_value in log:
            writer.writerow([epoch, step, repr(tau), row_mode, repr(loss_value)])
    _write_resolved(out, "train", resolved)
    return EXIT_OK


def _append_metrics(out: Path, rows) -> None:
    out.mkdir(parents=True, exist_ok=True)
    path = out / "metrics.csv"
    new = not path.exists()
    with open(path, "a", newline="") as f:
        writer = csv.writer(f)
        if new:
            writer.writerow(["metric", "split", "k", "value"])
        for row in rows:
            writer.writerow(_repr_row(row))


def cmd_eval(resolved: dict, eval_mode: str) -> int:
    _require(resolved, "checkpoint", "data", "out")
    params = load_checkpoint(resolved["checkpoint"])
    index = data_mod.load_index(resolved["data"])
    image_size = int(index.meta.get("image_size", 0))
    if image_size and image_size != params.config.image_size:
        raise UsageError(
            f"checkpoint expects {params.config.image_size}px images, "
            f"dataset provides {image_size}px"
        )
    out = Path(resolved["out"])
    out.mkdir(parents=True, exist_ok=True)

    def embedder(images):
        return np.asarray(embed(params, images), dtype=np.float64)

    train_images, train_labels, train_ids = data_mod.load_split(index, "train")
    val_images, val_labels, val_ids = data_mod.load_split(index, "val")
    train_set = EmbeddingSet(embedder(train_images), train_labels, train_ids)
    val_set = EmbeddingSet(embedder(val_images), val_labels, val_ids)
    fileio.write_embd(out / "train.embd", train_set.vectors, train_set.labels, train_set.ids)
    fileio.write_embd(out / "val.embd", val_set.vectors, val_set.labels, val_set.ids)

    rows = []
    if eval_mode == "knn":
        query = train_set if resolved["query_split"] == "train" else val_set
        rows.append(("knn_acc", resolved["query_split"], resolved["k"],
                     knn_accuracy(train_set, query, resolved["k"])))
    elif eval_mode == "linear":
        n_classes = int(train_labels.max()) + 1
        probe = LinearProbe(
            epochs=resolved["probe_epochs"], lr=resolved["probe_lr"], n_classes=n_classes
        ).fit(train_set.vectors, train_set.labels)
        acc = float((probe.predict(val_set.vectors) == val_set.labels).mean())
        rows.append(("linear_acc", "val", "", acc))
    elif eval_mode == "fewshot":
        for n in resolved["n"]:
            picks = few_shot_indices(train_set.labels, n, resolved["seed"])
            acc = knn_accuracy(train_set.subset(picks), val_set, resolved["k"])
            rows.append((f"fewshot_knn_n{n}", "val", resolved["k"], acc))
    elif eval_mode == "retrieval":
        by_label = {}
        for gid, label in zip(train_set.ids, train_set.labels):
            by_label.setdefault(int(label), set()).add(gid)
        relevance = [by_label[int(label)] for label in val_labels]
        rows.append(("retrieval_map", "medium", "", retrieval_map(val_set, train_set, relevance)))
        mr_images, mr_labels, mr_ids = data_mod.load_variant_split(index, "MR")
        hard = EmbeddingSet(embedder(mr_images), mr_labels, mr_ids)
        rows.append(("retrieval_map", "hard", "", retrieval_map(hard, train_set, relevance)))
    else:  # robustness
        scores = robustness_suite(
            embedder, index,
            probe_epochs=resolved["probe_epochs"], probe_lr=resolved["probe_lr"],
        )
        for mode in ("OF", "MS", "MR", "MN"):
            rows.append(("robustness_acc", mode, "", scores[mode]))

    _append_metrics(out, rows)
    _write_resolved(out, f"eval-{eval_mode}", resolved)
    return EXIT_OK


def cmd_plot(resolved: dict) -> int:
    _require(resolved, "out")
    if not resolved["loss_csv"] and not resolved["metrics_csv"]:
        raise UsageError("plot needs --loss-csv and/or --metrics-csv")
    out = Path(resolved["out"])
    out.mkdir(parents=True, exist_ok=True)
    if resolved["loss_csv"]:
        path = Path(resolved["loss_csv"])
        if not path.exists():
            raise UsageError(f"loss CSV {path} does not exist")
        per_epoch_losses: dict = {}
        taus: dict = {}
        with open(path, newline="") as f:
            for row in csv.DictReader(f):
                epoch = int(row["epoch"])
                per_epoch_losses.setdefault(epoch, []).append(float(row["loss"]))
                taus[epoch] = float(row["tau"])
        if not per_epoch_losses:
            raise UsageError(f"loss CSV {path} has no rows")
        loss_pts = [(e, float(np.mean(v))) for e, v in sorted(per_epoch_losses.items())]
        tau_pts = sorted(taus.items())
        plotting.line_chart({"loss": loss_pts}, out / "loss.svg",
                            title="training loss", xlabel="epoch", ylabel="loss")
        plotting.line_chart({"tau": tau_pts}, out / "tau.svg",
                            title="temperature schedule", xlabel="epoch", ylabel="tau")
    if resolved["metrics_csv"]:
        path = Path(resolved["metrics_csv"])
        if not path.exists():
            raise UsageError(f"metrics CSV {path} does not exist")
        fewshot = []
        with open(path, newline="") as f:
            for row in csv.DictReader(f):
                if row["metric"].startswith("fewshot_knn_n"):
                    fewshot.append((int(row["metric"][len("fewshot_knn_n"):]),
                                    float(row["value"])))
        if fewshot:
            plotting.line_chart({"knn_acc": sorted(fewshot)}, out / "fewshot.svg",
                                title="few-shot accuracy", xlabel="images per class",
                                ylabel="top-1 accuracy")
    _write_resolved(out, "plot", resolved)
    return EXIT_OK


# --- entry point ----------------------------------------------------------------

def main(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else EXIT_OK
    try:
        resolved = _resolve(ns.command, ns)
        if ns.command == "gen-data":
            return cmd_gen_data(resolved)
        if ns.command == "gen-maps":
            return cmd_gen_maps(resolved)
        if ns.command == "train":
            return cmd_train(resolved)
        if ns.command == "eval":
            return cmd_eval(resolved, ns.eval_mode)
        return cmd_plot(resolved)
    except NonFiniteLossError as exc:
        print(f"guidedmae: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (GuidedMAEError, OSError, ValueError, KeyError) as exc:
        print(f"guidedmae: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def console_main() -> None:
    sys.exit(main())

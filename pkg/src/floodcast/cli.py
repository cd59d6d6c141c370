"""Command-line pipeline: simulate data, prepare datasets from sensor CSVs,
train, sweep loss weights, evaluate, and emit per-sensor flood
probabilities for an event.

Settings merge three layers (defaults < config file < command-line flags).
The config file is flat ``key = value`` text with ``#`` comments; unknown
keys are rejected. Every emitted table starts with a comment line recording
the resolved config hash and seed.

Exit codes: 0 success, 1 usage/config error, 2 input/output error,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import evaluation as ev
from . import floodgen as fl
from . import model as fm
from .autodiff import Rng
from .errors import (
    ConfigurationError,
    ContractError,
    DimensionError,
    DivergenceError,
    ModelIOError,
    NumericError,
    ParseError,
    UndefinedMetricError,
    WindowError,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_IO = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    pass


# =====================================================================
# Config handling
# =====================================================================

def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "1", "yes", "on"):
        return True
    if lowered in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_int_list(text: str) -> tuple[int, ...]:
    return tuple(int(part) for part in text.split(",") if part.strip())


def _parse_float_list(text: str) -> tuple[float, ...]:
    return tuple(float(part) for part in text.split(",") if part.strip())


def _parse_str_list(text: str) -> tuple[str, ...]:
    return tuple(part.strip() for part in text.split(",") if part.strip())


# key -> (parser, default, help)
_COMMON_KEYS = {
    "seed": (int, 0, "master random seed"),
    "out": (str, "out", "output directory"),
}

_SIMULATE_KEYS = {
    "n_sensors": (int, 40, "number of sensors in the synthetic network"),
    "train_events": (int, 3, "number of training flood events"),
    "test_events": (int, 1, "number of held-out test events"),
    "train_stride": (int, 8, "window stride for training events"),
    "test_stride": (int, 3, "window stride for test events"),
    "val_fraction": (float, 0.2, "share of training windows held out for validation"),
    "zero_future_rain": (_parse_bool, False, "blank the forecast-rain feature rows"),
    "catchment_gain": (float, fl.SimulationConfig.catchment_gain,
                       "feet of channel rise per inch of effective rain"),
    "discharge_coeff": (float, fl.SimulationConfig.discharge_coeff,
                        "per-step drain fraction at the reference cross-section"),
    "spill_fraction": (float, fl.SimulationConfig.spill_fraction,
                       "share of overflow routed downstream"),
}

_MODEL_KEYS = {
    "hidden_size": (int, 64, "recurrent hidden size"),
    "conv_channels": (_parse_int_list, (128, 256, 128), "conv block channel counts"),
    "kernel_sizes": (_parse_int_list, (9, 5, 3), "conv block kernel widths (odd)"),
    "dropout_rate": (float, 0.5, "dropout rate for both branches"),
    "variant": (str, "hybrid", "hybrid | fastgrnn-only | fcn-only"),
    "loss_weight": (float, 1.0, "positive-class weight in the loss"),
    "sparsity_w": (float, 1.0, "max nonzero fraction of the input matrix"),
    "sparsity_u": (float, 1.0, "max nonzero fraction of the recurrence matrix"),
    "learning_rate": (float, 1e-3, "Adam learning rate"),
    "patience": (int, 20, "early-stop patience in epochs"),
    "max_epochs": (int, 600, "epoch cap"),
    "batch_size": (int, 64, "mini-batch size"),
    "normalize": (_parse_bool, True, "standardize features per variable"),
}

_TRAIN_KEYS = {
    "data": (str, "out", "directory with dataset_{train,val}.npz"),
    "resume": (str, "", "model file to continue training from"),
    **_MODEL_KEYS,
}

_SWEEP_KEYS = {
    "data": (str, "out", "directory with dataset_{train,val,test}.npz"),
    "weights": (_parse_float_list, tuple(ev.paper_weight_grid()),
                "comma-separated loss weights"),
    "runs": (int, 10, "training runs per weight"),
    **_MODEL_KEYS,
}

_PREPARE_KEYS = {
    "graph_nodes": (str, "", "sensor attribute CSV"),
    "graph_edges": (str, "", "edge list CSV"),
    "train_event_dirs": (_parse_str_list, (), "comma-separated training event dirs"),
    "test_event_dirs": (_parse_str_list, (), "comma-separated test event dirs"),
    "stride": (int, 1, "window stride"),
    "val_fraction": (float, 0.2, "share of training windows held out for validation"),
    "zero_future_rain": (_parse_bool, False, "blank the forecast-rain feature rows"),
}

_EVALUATE_KEYS = {
    "model": (str, "out/model.bin", "trained model file"),
    "data": (str, "out", "directory with dataset_test.npz"),
    "train_report": (str, "", "train report CSV (for seconds-per-epoch)"),
}

_PREDICT_KEYS = {
    "model": (str, "out/model.bin", "trained model file"),
    "graph_nodes": (str, "", "sensor attribute CSV"),
    "graph_edges": (str, "", "edge list CSV"),
    "event_dir": (str, "", "directory of per-sensor event CSVs"),
    "interval_steps": (int, 4, "evaluation cadence in 30-minute steps"),
    "threshold": (float, 0.5, "classification cutoff (critical threshold)"),
}

_COMMAND_KEYS = {
    "simulate": {**_COMMON_KEYS, **_SIMULATE_KEYS},
    "prepare": {**_COMMON_KEYS, **_PREPARE_KEYS},
    "train": {**_COMMON_KEYS, **_TRAIN_KEYS},
    "sweep": {**_COMMON_KEYS, **_SWEEP_KEYS},
    "evaluate": {**_COMMON_KEYS, **_EVALUATE_KEYS},
    "predict": {**_COMMON_KEYS, **_PREDICT_KEYS},
}


class RunConfig(dict):
    """Resolved settings for one command, hashable for provenance lines."""

    def config_hash(self) -> str:
        # the output directory is not a semantic setting; identical runs
        # into different directories must emit identical bytes
        lines = "\n".join(f"{k}={self[k]!r}" for k in sorted(self) if k != "out")
        return hashlib.sha256(lines.encode("utf-8")).hexdigest()[:12]

    def comment(self) -> str:
        return f"config_hash={self.config_hash()} seed={self['seed']}"


def read_config_file(path: str) -> dict[str, str]:
    """Flat ``key = value`` lines; blank lines and # comments ignored."""
    values: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            if "=" not in text:
                raise UsageError(f"{path}:{lineno}: expected key=value, got {line.strip()!r}")
            key, value = text.split("=", 1)
            values[key.strip()] = value.strip()
    return values


def resolve_config(command: str, file_path: str | None,
                   overrides: dict[str, str]) -> RunConfig:
    spec = _COMMAND_KEYS[command]
    resolved = RunConfig({key: default for key, (_, default, _) in spec.items()})
    layers = []
    if file_path:
        layers.append((f"config file {file_path}", read_config_file(file_path)))
    layers.append(("command line", overrides))
    for origin, values in layers:
        for key, raw in values.items():
            if key not in spec:
                raise UsageError(f"{origin}: unknown key {key!r} for command {command!r}")
            parser = spec[key][0]
            try:
                resolved[key] = parser(raw) if isinstance(raw, str) else raw
            except (ValueError, TypeError) as exc:
                raise UsageError(f"{origin}: bad value for {key!r}: {exc}") from exc
    return resolved


def model_config_from(config: RunConfig, seed: int) -> fm.ModelConfig:
    from .fastgrnn import SparsityBudget
    return fm.ModelConfig(
        hidden_size=config["hidden_size"],
        conv_channels=tuple(config["conv_channels"]),
        kernel_sizes=tuple(config["kernel_sizes"]),
        dropout_rate=config["dropout_rate"],
        variant=config["variant"],
        loss_weight=config["loss_weight"],
        sparsity=SparsityBudget(config["sparsity_w"], config["sparsity_u"]),
        learning_rate=config["learning_rate"],
        patience=config["patience"],
        max_epochs=config["max_epochs"],
        batch_size=config["batch_size"],
        normalize_features=config["normalize"],
        seed=seed,
    )


# =====================================================================
# Table helpers
# =====================================================================

def _write_table(path, header, rows, comment):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# {comment}\n")
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(repr(c) if isinstance(c, float) else str(c)
                              for c in row) + "\n")


def _load_split(data_dir: str, split: str):
    path = Path(data_dir) / f"dataset_{split}.npz"
    if not path.exists():
        raise FileNotFoundError(f"missing dataset file {path}")
    x, y, _ = fl.load_dataset(path)
    return x, y


# =====================================================================
# Commands
# =====================================================================

def cmd_simulate(config: RunConfig) -> int:
    out = Path(config["out"])
    out.mkdir(parents=True, exist_ok=True)
    sim = fl.SimulationConfig(
        catchment_gain=config["catchment_gain"],
        discharge_coeff=config["discharge_coeff"],
        spill_fraction=config["spill_fraction"],
    )
    pipeline = fl.PipelineConfig(
        n_sensors=config["n_sensors"],
        train_events=config["train_events"],
        test_events=config["test_events"],
        sim=sim,
        train_stride=config["train_stride"],
        test_stride=config["test_stride"],
        val_fraction=config["val_fraction"],
        zero_future_rain=config["zero_future_rain"],
    )
    result = fl.run_pipeline(pipeline, config["seed"])
    comment = config.comment()

    fl.write_graph_csv(result.graph, out / "graph_nodes.csv", out / "graph_edges.csv",
                       comment=comment)
    for i, trace in enumerate(result.train_traces):
        fl.write_event_csv(trace, out / "events" / f"train_{i:03d}", comment=comment)
    for i, trace in enumerate(result.test_traces):
        fl.write_event_csv(trace, out / "events" / f"test_{i:03d}", comment=comment)

    splits = {
        "train": (result.x_train, result.y_train),
        "val": (result.x_val, result.y_val),
        "test": (result.x_test, result.y_test),
    }
    for split, (x, y) in splits.items():
        fl.save_dataset(out / f"dataset_{split}.npz", x, y)
        pos = int(y.sum())
        neg = len(y) - pos
        ratio = f"1:{neg / pos:.2f}" if pos else f"0:{neg}"
        print(f"{split}: {len(y)} samples, positive:negative {ratio}")
    print(f"training pool: {result.train_dataset.summary.describe()}")
    print(f"test pool:     {result.test_dataset.summary.describe()}")
    print(f"wrote {out}/graph_nodes.csv, event CSVs, and dataset_*.npz")
    return EXIT_OK


def cmd_prepare(config: RunConfig) -> int:
    for key in ("graph_nodes", "graph_edges"):
        if not config[key]:
            raise UsageError(f"prepare needs {key}")
    if not config["train_event_dirs"]:
        raise UsageError("prepare needs train_event_dirs")
    out = Path(config["out"])
    out.mkdir(parents=True, exist_ok=True)
    graph = fl.read_graph_csv(config["graph_nodes"], config["graph_edges"])

    train_traces = []
    for event_dir in config["train_event_dirs"]:
        train_traces.extend(fl.read_event_dir(graph, event_dir))
    train_ds = fl.build_dataset(graph, train_traces, stride=config["stride"],
                                zero_future_rain=config["zero_future_rain"])
    x_pool, y_pool = train_ds.to_arrays()
    order = Rng(config["seed"]).split("val_split").permutation(len(x_pool))
    n_val = int(round(config["val_fraction"] * len(x_pool)))
    fl.save_dataset(out / "dataset_train.npz", x_pool[order[n_val:]], y_pool[order[n_val:]])
    fl.save_dataset(out / "dataset_val.npz", x_pool[order[:n_val]], y_pool[order[:n_val]])
    print(f"training pool: {train_ds.summary.describe()}")

    if config["test_event_dirs"]:
        test_traces = []
        for event_dir in config["test_event_dirs"]:
            test_traces.extend(fl.read_event_dir(graph, event_dir))
        test_ds = fl.build_dataset(graph, test_traces, stride=config["stride"],
                                   zero_future_rain=config["zero_future_rain"])
        x_test, y_test = test_ds.to_arrays()
        fl.save_dataset(out / "dataset_test.npz", x_test, y_test)
        print(f"test pool:     {test_ds.summary.describe()}")
    print(f"wrote datasets to {out}")
    return EXIT_OK


def _write_train_report(path, report: fm.TrainReport, comment: str, epoch_offset: int):
    header = ["epoch", "train_loss", "train_accuracy", "val_loss", "val_accuracy",
              "seconds"]
    rows = [[epoch_offset + i + 1, report.train_loss[i], report.train_accuracy[i],
             report.val_loss[i], report.val_accuracy[i], report.epoch_seconds[i]]
            for i in range(report.stopped_epoch)]
    _write_table(path, header, rows, comment)


def cmd_train(config: RunConfig) -> int:
    out = Path(config["out"])
    out.mkdir(parents=True, exist_ok=True)
    train_xy = _load_split(config["data"], "train")
    val_xy = _load_split(config["data"], "val")

    initial_params = None
    epoch_offset = 0
    if config["resume"]:
        initial_params, loaded_cfg = fm.load_model(config["resume"])
        model_cfg = replace(loaded_cfg, max_epochs=config["max_epochs"],
                            patience=config["patience"], seed=config["seed"])
        epoch_offset = loaded_cfg.trained_epochs
    else:
        model_cfg = model_config_from(config, config["seed"])

    params, report = fm.train(model_cfg, train_xy, val_xy, initial_params=initial_params)
    saved_cfg = replace(model_cfg, trained_epochs=epoch_offset + report.stopped_epoch)
    model_path = out / "model.bin"
    fm.save_model(params, saved_cfg, model_path)
    _write_train_report(out / "train_report.csv", report, config.comment(), epoch_offset)
    print(f"trained {report.stopped_epoch} epochs "
          f"(best epoch {report.best_epoch}, "
          f"val loss {min(report.val_loss):.4f}, "
          f"val accuracy {report.val_accuracy[report.best_epoch - 1]:.4f})")
    print(f"wrote {model_path} and {out}/train_report.csv")
    return EXIT_OK


def cmd_sweep(config: RunConfig) -> int:
    out = Path(config["out"])
    out.mkdir(parents=True, exist_ok=True)
    train_xy = _load_split(config["data"], "train")
    val_xy = _load_split(config["data"], "val")
    test_xy = _load_split(config["data"], "test")
    model_cfg = model_config_from(config, config["seed"])
    report = ev.monte_carlo_sweep(model_cfg, train_xy, val_xy, test_xy,
                                  weights=list(config["weights"]),
                                  runs=config["runs"])
    comment = config.comment()
    ev.write_sweep_summary_csv(report, out / "sweep_summary.csv", comment)
    ev.write_sweep_runs_csv(report, out / "sweep_runs.csv", comment)
    failed = [row.weight for row in report.rows if row.failed]
    for row in report.rows:
        print(f"weight {row.weight:g}: mean max F {row.mean_max_f:.4f}, "
              f"F area {row.mean_f_area:.4f}, PR area {row.mean_pr_area:.4f} "
              f"({row.succeeded}/{report.runs_per_weight} runs)")
    if failed:
        print(f"weights with no successful run: {failed}")
    print(f"best weight {report.best_weight:g} with critical threshold "
          f"{report.best_phi_c}")
    print(f"wrote {out}/sweep_summary.csv and {out}/sweep_runs.csv")
    return EXIT_OK if any(not row.failed for row in report.rows) else EXIT_NUMERIC


def cmd_evaluate(config: RunConfig) -> int:
    out = Path(config["out"])
    out.mkdir(parents=True, exist_ok=True)
    params, model_cfg = fm.load_model(config["model"])
    x_test, y_test = _load_split(config["data"], "test")
    scores = fm.predict_probabilities(params, model_cfg, x_test)
    fc = ev.f_curve_and_critical(scores, y_test)
    pc = ev.pr_curve(scores, y_test)
    comment = config.comment()

    seconds = float("nan")
    if config["train_report"]:
        with open(config["train_report"], "r", encoding="utf-8") as fh:
            lines = [ln for ln in fh if not ln.startswith("#")]
        idx = lines[0].strip().split(",").index("seconds")
        values = [float(ln.strip().split(",")[idx]) for ln in lines[1:]]
        seconds = sum(values) / len(values) if values else float("nan")

    row = {
        "variant": model_cfg.variant,
        "max_accuracy": ev.max_accuracy(scores, y_test),
        "max_f_measure": fc.f_max,
        "f_measure_curve_area": fc.area,
        "pr_curve_area": pc.area,
        "seconds_per_epoch": seconds,
    }
    ev.write_variant_table_csv([row], out / "evaluation_summary.csv", comment)
    ev.write_curve_csv(pc, out / "pr_curve.csv",
                       f"{comment} no_skill_baseline={pc.baseline!r}")
    ev.write_curve_csv(fc, out / "f_curve.csv", comment)
    acc_half = ev.accuracy(ev.confusion_at(scores, y_test, 0.5))
    acc_crit = ev.accuracy(ev.confusion_at(scores, y_test, fc.phi_c))
    print(f"variant {model_cfg.variant}: accuracy@0.5 {acc_half:.4f}, "
          f"max F {fc.f_max:.4f} at phi_c {fc.phi_c:g} "
          f"(accuracy@phi_c {acc_crit:.4f})")
    print(f"F curve area {fc.area:.4f}, PR curve area {pc.area:.4f} "
          f"(no-skill baseline {pc.baseline:.4f})")
    print(f"wrote evaluation_summary.csv, pr_curve.csv, f_curve.csv in {out}")
    return EXIT_OK


def cmd_predict(config: RunConfig) -> int:
    for key in ("graph_nodes", "graph_edges", "event_dir"):
        if not config[key]:
            raise UsageError(f"predict needs {key}")
    out = Path(config["out"])
    out.mkdir(parents=True, exist_ok=True)
    params, model_cfg = fm.load_model(config["model"])
    graph = fl.read_graph_csv(config["graph_nodes"], config["graph_edges"])
    traces = fl.read_event_dir(graph, config["event_dir"])
    interval = config["interval_steps"]
    threshold = config["threshold"]

    rows = []
    for trace in traces:
        last_end = trace.n_steps - 1 - fl.HORIZON_STEPS
        ends = list(range(fl.WINDOW_STEPS - 1, last_end + 1, interval))
        if not ends:
            continue
        stamps = trace.timestamps()
        for sensor_id in trace.sensor_ids:
            windows = np.stack([fl.derive_features(graph, trace, sensor_id, t)
                                for t in ends])
            scores = fm.predict_probabilities(params, model_cfg, windows)
            s = trace.sensor_ids.index(sensor_id)
            for t_end, score in zip(ends, scores):
                actual = int(trace.water_level[s, t_end + fl.HORIZON_STEPS] > 0.0)
                rows.append([sensor_id, stamps[t_end].strftime("%Y-%m-%d %H:%M"),
                             float(score), int(score > threshold), actual])
    if not rows:
        raise UsageError("event too short for any prediction window")
    path = out / "predictions.csv"
    _write_table(path, ["sensor_id", "time", "probability", "predicted", "actual"],
                 rows, config.comment() + f" threshold={threshold!r}")
    flagged = sum(1 for r in rows if r[3] == 1)
    print(f"wrote {path}: {len(rows)} rows, {flagged} flagged flooded "
          f"at threshold {threshold:g}")
    return EXIT_OK


# =====================================================================
# Entry point
# =====================================================================

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="floodcast", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)
    for command, keys in _COMMAND_KEYS.items():
        p = sub.add_parser(command, help=f"{command} step of the pipeline")
        p.add_argument("--config", default=None, help="flat key=value config file")
        for key, (_, default, help_text) in keys.items():
            p.add_argument(f"--{key.replace('_', '-')}", dest=key, default=None,
                           metavar="V", help=f"{help_text} (default {default!r})")
    return parser


_DISPATCH = {
    "simulate": cmd_simulate,
    "prepare": cmd_prepare,
    "train": cmd_train,
    "sweep": cmd_sweep,
    "evaluate": cmd_evaluate,
    "predict": cmd_predict,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        overrides = {key: value for key, value in vars(args).items()
                     if key not in ("command", "config") and value is not None}
        config = resolve_config(args.command, args.config, overrides)
        return _DISPATCH[args.command](config)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigurationError, ContractError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ParseError, ModelIOError, DimensionError,
            UndefinedMetricError, WindowError) as exc:
        print(f"input/output error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (DivergenceError, NumericError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

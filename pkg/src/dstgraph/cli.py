"""Command-line pipeline: ingest, decompose, build-graph, train, evaluate, ablate, sweep-layers, forecast.

Every command reads the resolved configuration (``--config`` file plus
``--section.key value`` overrides) and writes deterministic artifacts under
``--out``. Each artifact carries the config hash of the run that wrote it.

    dstgraph ingest --data.path synthetic --out run/
    dstgraph build-graph --data.path synthetic --graph.k 1 --out run/
    dstgraph train --data.path synthetic --seed 0 --out run/
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from . import train_eval
from .config import ConfigError, ExperimentConfig, load_config
from .data import (
    NormalizationStats,
    PreparedData,
    TimeSeriesTable,
    destandardize,
    make_time_features,
    split_windows,
)
from .decompose import COMPONENT_NAMES, decompose
from .diff import load_params, save_params
from .graph import ComponentGraph, build_component_graphs

log = logging.getLogger("dstgraph")

GRAPH_TAGS = COMPONENT_NAMES + ("raw",)
_HASH_PARAM = "meta.config_hash."


class MissingArtifactError(FileNotFoundError):
    pass


# ---- artifact helpers ---------------------------------------------------------


def _header(cfg: ExperimentConfig) -> str:
    return f"# config_hash={cfg.hash()}\n"


def _write_frame(path: Path, frame: pd.DataFrame, cfg: ExperimentConfig) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(_header(cfg))
        frame.to_csv(fh, index=False, float_format="%.17g", lineterminator="\n")


def _read_frame(path: Path) -> pd.DataFrame:
    with open(path) as fh:
        commented = fh.read(1) == "#"
    return pd.read_csv(path, skiprows=1 if commented else 0)


def _require(out: Path, name: str, command: str) -> Path:
    path = out / name
    if not path.exists():
        raise MissingArtifactError(f"missing {path}; run `dstgraph {command}` with the same --out first")
    return path


def _table_frame(table: TimeSeriesTable) -> pd.DataFrame:
    frame = pd.DataFrame(table.values, columns=list(table.channel_names))
    frame.insert(0, "date", table.timestamps.strftime("%Y-%m-%d %H:%M:%S"))
    return frame


def _write_config_echo(out: Path, command: str, cfg: ExperimentConfig) -> None:
    (out / f"config_{command.replace('-', '_')}.txt").write_text(_header(cfg) + cfg.to_text())


def _load_prepared(out: Path) -> PreparedData:
    frame = _read_frame(_require(out, "standardized.csv", "ingest"))
    stamps = pd.DatetimeIndex(pd.to_datetime(frame.pop("date"), format="%Y-%m-%d %H:%M:%S"))
    table = TimeSeriesTable(stamps, frame.to_numpy(np.float64), tuple(frame.columns))
    stats_frame = _read_frame(_require(out, "stats.csv", "ingest"))
    stats = NormalizationStats(stats_frame["mean"].to_numpy(np.float64), stats_frame["std"].to_numpy(np.float64))
    splits = _read_frame(_require(out, "splits.csv", "ingest"))
    bounds = {row.split: (int(row.start), int(row.stop)) for row in splits.itertuples()}
    return PreparedData(table, stats, bounds)


def _load_graphs(out: Path) -> dict[str, ComponentGraph]:
    graphs = {}
    for tag in GRAPH_TAGS:
        adj = _read_frame(_require(out, f"graph_{tag}.adj.csv", "build-graph"))
        graphs[tag] = ComponentGraph(adj.to_numpy(np.int64), tag)
    return graphs


def _params_name(seed: int) -> str:
    return f"model_seed{seed}.params"


def _load_model(cfg: ExperimentConfig, out: Path, data: PreparedData, graphs, seed: int):
    state = load_params(_require(out, _params_name(seed), "train"))
    state = {k: v for k, v in state.items() if not k.startswith(_HASH_PARAM)}
    model = train_eval.build_model(cfg, data.table.n_channels, graphs, seed)
    model.load_state_dict(state)
    return model


# ---- commands -----------------------------------------------------------------


def cmd_ingest(cfg: ExperimentConfig, out: Path, args) -> None:
    data = train_eval.prepare_data(cfg, train_eval.load_dataset(cfg))
    _write_frame(out / "standardized.csv", _table_frame(data.table), cfg)
    names = list(data.table.channel_names)
    _write_frame(out / "stats.csv", pd.DataFrame({"channel": names, "mean": data.stats.mean, "std": data.stats.std}), cfg)
    rows = [(name, lo, hi) for name, (lo, hi) in data.boundaries.items()]
    _write_frame(out / "splits.csv", pd.DataFrame(rows, columns=["split", "start", "stop"]), cfg)
    meta = {
        "config_hash": cfg.hash(),
        "config": {k: v for k, v in cfg.to_flat().items()},
        "n_steps": data.table.n_steps,
        "channels": names,
        "start": str(data.table.timestamps[0]),
        "resolution": str(data.table.timestamps[1] - data.table.timestamps[0]) if data.table.n_steps > 1 else "",
    }
    (out / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")
    print(f"ingested {data.table.n_steps} steps x {len(names)} channels into {out}")


def cmd_decompose(cfg: ExperimentConfig, out: Path, args) -> None:
    data = _load_prepared(out)
    parts = decompose(data.table.values.T, train_eval.decomposition_config(cfg))
    for name, values in parts.as_dict().items():
        table = TimeSeriesTable(data.table.timestamps, values.T, data.table.channel_names)
        _write_frame(out / f"component_{name}.csv", _table_frame(table), cfg)
    err = np.abs(parts.reconstruct() - data.table.values.T).max()
    print(f"wrote {len(COMPONENT_NAMES)} component files; max reconstruction error {err:.3e}")


def cmd_build_graph(cfg: ExperimentConfig, out: Path, args) -> None:
    data = _load_prepared(out)
    lo, hi = data.boundaries["train"]
    graphs, distances = build_component_graphs(
        data.table.values[lo:hi], train_eval.decomposition_config(cfg), train_eval.graph_config(cfg), include_raw=True
    )
    columns = [str(i) for i in range(data.table.n_channels)]
    for tag in GRAPH_TAGS:
        _write_frame(out / f"graph_{tag}.adj.csv", pd.DataFrame(graphs[tag].adjacency, columns=columns), cfg)
        _write_frame(out / f"graph_{tag}.dist.csv", pd.DataFrame(distances[tag].values, columns=columns), cfg)
        edges = "".join(f"{i} -> {j}\n" for i, j in graphs[tag].edges())
        (out / f"graph_{tag}.edges").write_text(_header(cfg) + edges)
    print(f"built {len(GRAPH_TAGS)} graphs with K={min(cfg.graph_k, data.table.n_channels - 1)}")


def cmd_train(cfg: ExperimentConfig, out: Path, args) -> None:
    data = _load_prepared(out)
    graphs = _load_graphs(out)
    windows = split_windows(data, cfg.data_lookback, cfg.data_horizon, cfg.data_stride)
    for seed in cfg.seeds:
        model, history = train_eval.fit(cfg, data, graphs, seed, windows)
        params = dict(model.state_dict())
        params[_HASH_PARAM + cfg.hash()] = np.zeros(0)
        save_params(out / _params_name(seed), params)
        manifest = [
            _header(cfg).rstrip("\n"),
            f"seed = {seed}",
            f"components = {','.join(model.config.components)}",
            *(f"graph.{tag} = graph_{tag}.adj.csv" for tag in model.config.components),
            f"best_epoch = {history.best_epoch}",
            f"stopped_early = {str(history.stopped_early).lower()}",
            f"diverged = {str(history.diverged).lower()}",
            "",
            cfg.to_text(),
        ]
        (out / f"model_seed{seed}.manifest").write_text("\n".join(manifest))
        (out / f"history_seed{seed}.csv").write_text(_header(cfg) + history.to_csv())
        final = history.step_losses[-1][1] if history.step_losses else float("nan")
        print(f"seed {seed}: {len(history.step_losses)} steps, final loss {final:.6f}, best epoch {history.best_epoch}")


def cmd_evaluate(cfg: ExperimentConfig, out: Path, args) -> None:
    data = _load_prepared(out)
    graphs = _load_graphs(out)
    test = split_windows(data, cfg.data_lookback, cfg.data_horizon, cfg.data_stride)["test"]
    records = []
    for seed in cfg.seeds:
        model = _load_model(cfg, out, data, graphs, seed)
        report = train_eval.evaluate(model, test, cfg.eval_setting, cfg.eval_target_channel, seed)
        records.append(report.record(cfg.dataset_name, cfg.hash()))
    (out / "report.jsonl").write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records))
    lines = [_header(cfg).rstrip("\n"), f"{'seed':>6} {'mse':>10} {'mae':>10} {'imp_mse%':>10} {'imp_mae%':>10}"]
    for r in records:
        lines.append(f"{r['seed']:>6} {r['mse']:>10.4f} {r['mae']:>10.4f} {r['imp_mse']:>10.2f} {r['imp_mae']:>10.2f}")
    mean = {k: float(np.mean([r[k] for r in records])) for k in ("mse", "mae", "imp_mse", "imp_mae")}
    lines.append(f"{'mean':>6} {mean['mse']:>10.4f} {mean['mae']:>10.4f} {mean['imp_mse']:>10.2f} {mean['imp_mae']:>10.2f}")
    lines.append(f"repeat-last mse {records[0]['baseline_mse']:.4f} mae {records[0]['baseline_mae']:.4f}")
    (out / "summary.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines[1:]))


def cmd_ablate(cfg: ExperimentConfig, out: Path, args) -> None:
    data = _load_prepared(out)
    results = train_eval.ablate(cfg, data, _load_graphs(out))
    frame = pd.DataFrame(list(results.items()), columns=["variant", "mse"])
    _write_frame(out / "ablation.csv", frame, cfg)
    print(frame.to_string(index=False))


def cmd_sweep_layers(cfg: ExperimentConfig, out: Path, args) -> None:
    data = _load_prepared(out)
    sweep = train_eval.layer_sweep(cfg, data, _load_graphs(out), args.max_layers)
    frame = pd.DataFrame(sweep, columns=["layers", "mse"])
    _write_frame(out / "sweep.csv", frame, cfg)
    print(frame.to_string(index=False))


def cmd_forecast(cfg: ExperimentConfig, out: Path, args) -> None:
    """Forecast the horizon after the last stored row, in raw units."""
    data = _load_prepared(out)
    graphs = _load_graphs(out)
    seed = cfg.seeds[0]
    model = _load_model(cfg, out, data, graphs, seed)
    table, stats = data.table, data.stats
    if table.n_steps < cfg.data_lookback:
        raise ValueError(f"need {cfg.data_lookback} rows for a look-back, have {table.n_steps}")
    if cfg.eval_setting == "SISO":
        target = cfg.eval_target_channel % table.n_channels
        table = table.select([target])
        stats = NormalizationStats(stats.mean[[target]], stats.std[[target]])
    x = table.values[-cfg.data_lookback:].T[None]
    tf = make_time_features(table.timestamps[-cfg.data_lookback:])[None]
    pred = model.predict(x, tf)[0]
    step = table.timestamps[-1] - table.timestamps[-2]
    future = pd.DatetimeIndex([table.timestamps[-1] + step * (i + 1) for i in range(cfg.data_horizon)])
    raw = destandardize(TimeSeriesTable(future, pred.T, table.channel_names), stats)
    _write_frame(out / "forecast.csv", _table_frame(raw), cfg)
    print(f"wrote {cfg.data_horizon}-step forecast for {raw.n_channels} channels to {out / 'forecast.csv'}")


COMMANDS = {
    "ingest": cmd_ingest,
    "decompose": cmd_decompose,
    "build-graph": cmd_build_graph,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "sweep-layers": cmd_sweep_layers,
    "forecast": cmd_forecast,
}


# ---- argument handling ----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dstgraph",
        description="Decomposition + graph forecasting pipeline. Any config key can be overridden "
        "as --section.key VALUE (e.g. --graph.k 1).",
    )
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="flat 'section.key = value' config file")
    parser.add_argument("--seed", type=int, help="run seed; replaces train.seed and train.seeds")
    parser.add_argument("--out", default="out", help="artifact directory (default: out)")
    parser.add_argument("--max-layers", type=int, default=3, help="sweep-layers: largest GATv2 depth")
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    return parser


def parse_overrides(tokens: list[str]) -> dict[str, str]:
    """``--a.b 1`` and ``--a.b=1`` pairs; anything else is rejected."""
    overrides: dict[str, str] = {}
    i = 0
    while i < len(tokens):
        token = tokens[i]
        if not token.startswith("--") or "." not in token:
            raise ConfigError(f"unrecognized argument {token!r}")
        key = token[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(tokens):
                raise ConfigError(f"missing value for {token}")
            value = tokens[i + 1]
            i += 2
        if key not in ExperimentConfig.keys():
            raise ConfigError(f"unknown config key {key!r}")
        overrides[key] = value
    return overrides


def resolve_config(args, extra: list[str]) -> ExperimentConfig:
    overrides = parse_overrides(extra)
    if args.seed is not None:
        overrides["train.seed"] = str(args.seed)
        overrides["train.seeds"] = str(args.seed)
    return load_config(args.config, overrides)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = resolve_config(args, extra)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_config_echo(out, args.command, cfg)
        COMMANDS[args.command](cfg, out, args)
    except Exception as exc:  # noqa: BLE001 - every failure becomes one parseable line
        message = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {message}", file=sys.stderr)
        return 2 if isinstance(exc, ConfigError) else 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Training, evaluation, the Repeat-Last baseline and the ablation / layer-sweep harnesses."""
from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import diff
from .config import ConfigError, ExperimentConfig
from .data import (
    PreparedData,
    SplitConfig,
    TableSchema,
    TimeSeriesTable,
    WindowSample,
    WindowSet,
    load_table,
    prepare,
    split_windows,
    synthetic_table,
)
from .decompose import DecompositionConfig
from .graph import ComponentGraph, GraphConfig, build_component_graphs
from .model import AblationFlags, DstModel, ModelConfig

log = logging.getLogger(__name__)

SETTINGS = ("MIMO", "MISO", "SISO")


def mse(pred, target) -> float:
    pred, target = np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    return float(np.mean((pred - target) ** 2))


def mae(pred, target) -> float:
    pred, target = np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    return float(np.mean(np.abs(pred - target)))


def improvement(baseline: float, model: float) -> float:
    """Percentage error reduction relative to the baseline."""
    return (baseline - model) / baseline * 100.0


def repeat_last(sample: WindowSample | np.ndarray, horizon: int | None = None) -> np.ndarray:
    """Copy each channel's last look-back value across the horizon.

    Accepts a WindowSample or a (..., D, L) look-back array with ``horizon``.
    """
    if isinstance(sample, WindowSample):
        lookback, horizon = sample.lookback, sample.target.shape[-1]
    else:
        lookback = np.asarray(sample, dtype=np.float64)
    if lookback.shape[-1] < 1:
        raise ValueError("look-back must hold at least one step")
    return np.repeat(lookback[..., -1:], horizon, axis=-1)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """In-place bias-corrected Adam update of ``params``."""
    state.step += 1
    c1 = 1.0 - beta1**state.step
    c2 = 1.0 - beta2**state.step
    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 32
    max_epochs: int = 50
    patience: int = 5
    seed: int = 0
    setting: str = "MIMO"
    target_channel: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.patience > self.max_epochs:
            raise ValueError("patience must not exceed max_epochs")
        if self.setting not in SETTINGS:
            raise ValueError(f"setting must be one of {SETTINGS}")


@dataclass
class TrainHistory:
    step_losses: list[tuple[int, float]] = field(default_factory=list)
    val_mse: list[float] = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False
    diverged: bool = False

    def to_csv(self) -> str:
        return "step,loss\n" + "".join(f"{s},{l!r}\n" for s, l in self.step_losses)


def _loss_channels(setting: str, target_channel: int, n_channels: int):
    if setting == "MISO":
        if not -n_channels <= target_channel < n_channels:
            raise ValueError(f"target_channel {target_channel} out of range for {n_channels} channels")
        return [target_channel % n_channels]
    return slice(None)


def predict(model: DstModel, samples: WindowSet, batch_size: int = 256) -> np.ndarray:
    """(N, D, H) forecasts for every sample, in order."""
    out = []
    for lo in range(0, len(samples), batch_size):
        x, _, tf = samples.batch(np.arange(lo, min(lo + batch_size, len(samples))))
        out.append(model.predict(x, tf))
    return np.concatenate(out) if out else np.zeros((0, samples.n_channels, samples.horizon))


def _validation_mse(model: DstModel, samples: WindowSet, channels, chunk_size: int = 256) -> float:
    total, count = 0.0, 0
    for lo in range(0, len(samples), chunk_size):
        x, y, tf = samples.batch(np.arange(lo, min(lo + chunk_size, len(samples))))
        err = model.predict(x, tf)[:, channels] - y[:, channels]
        total += float((err**2).sum())
        count += err.size
    return total / count


def train(
    model: DstModel,
    train_set: WindowSet,
    val_set: WindowSet | None,
    config: TrainConfig,
) -> tuple[DstModel, TrainHistory]:
    """Minimise MSE over the full horizon with Adam; keep the best-validation parameters.

    MISO restricts the loss to ``target_channel``. A non-finite loss stops
    training and restores the best finite checkpoint seen so far.
    """
    if len(train_set) == 0:
        raise ValueError("empty training split")
    channels = _loss_channels(config.setting, config.target_channel, train_set.n_channels)
    rng = np.random.default_rng(config.seed)
    params = model.parameters()
    state = AdamState()
    history = TrainHistory()
    best_state = model.state_dict()
    best_val = math.inf
    bad_epochs = 0
    step = 0
    for epoch in range(config.max_epochs):
        order = rng.permutation(len(train_set))
        for lo in range(0, len(order), config.batch_size):
            x, y, tf = train_set.batch(order[lo:lo + config.batch_size])
            model.zero_grad()
            pred = model.forward(x, tf)
            if isinstance(channels, list):
                pred = pred[:, channels]
                y = y[:, channels]
            loss = diff.mse(pred, y)
            value = float(loss.data)
            if not math.isfinite(value):
                log.warning("non-finite loss at step %d; restoring best checkpoint", step)
                history.diverged = True
                model.load_state_dict(best_state)
                return model, history
            loss.backward()
            adam_step(
                {k: t.data for k, t in params.items()},
                {k: t.grad for k, t in params.items()},
                state,
                config.learning_rate,
            )
            history.step_losses.append((step, value))
            step += 1

        monitor = val_set if val_set is not None and len(val_set) else train_set
        val = _validation_mse(model, monitor, channels)
        history.val_mse.append(val)
        log.info("epoch %d: train loss %.5f, val mse %.5f", epoch, history.step_losses[-1][1], val)
        if val < best_val:
            best_val, best_state, bad_epochs = val, model.state_dict(), 0
            history.best_epoch = epoch
        else:
            bad_epochs += 1
            if bad_epochs >= config.patience:
                history.stopped_early = True
                break
    model.load_state_dict(best_state)
    return model, history


@dataclass(frozen=True)
class EvalReport:
    setting: str
    horizon: int
    seed: int
    mse: float
    mae: float
    baseline_mse: float
    baseline_mae: float

    @property
    def imp_mse(self) -> float:
        return improvement(self.baseline_mse, self.mse)

    @property
    def imp_mae(self) -> float:
        return improvement(self.baseline_mae, self.mae)

    def record(self, dataset: str, config_hash: str = "") -> dict[str, object]:
        rec = {
            "dataset": dataset,
            "setting": self.setting,
            "horizon": self.horizon,
            "seed": self.seed,
            "mse": self.mse,
            "mae": self.mae,
            "imp_mse": self.imp_mse,
            "imp_mae": self.imp_mae,
            "baseline_mse": self.baseline_mse,
            "baseline_mae": self.baseline_mae,
        }
        if config_hash:
            rec["config_hash"] = config_hash
        return rec


def evaluate(
    model,
    samples: WindowSet,
    setting: str = "MIMO",
    target_channel: int = 0,
    seed: int = 0,
    chunk_size: int = 256,
) -> EvalReport:
    """Average MSE/MAE over ``samples`` plus the Repeat-Last reference on the same windows.

    ``model`` is a DstModel or any callable ``(lookback, time_features) -> forecast``.
    ``samples`` always carries every channel; SISO feeds only the target
    channel to the model. Windows are processed ``chunk_size`` at a time so
    long test splits never materialise at once.
    """
    if setting not in SETTINGS:
        raise ValueError(f"setting must be one of {SETTINGS}")
    d = samples.n_channels
    if setting != "MIMO" and not -d <= target_channel < d:
        raise ValueError(f"target_channel {target_channel} out of range for {d} channels")
    if len(samples) == 0:
        raise ValueError("no samples to evaluate")
    target_channel %= d
    inputs = samples.select_channels([target_channel]) if setting == "SISO" else samples
    sums = np.zeros(4)  # model sq, model abs, baseline sq, baseline abs
    count = 0
    for lo in range(0, len(inputs), chunk_size):
        x, y, tf = inputs.batch(np.arange(lo, min(lo + chunk_size, len(inputs))))
        pred = model.predict(x, tf) if isinstance(model, DstModel) else np.asarray(model(x, tf), dtype=np.float64)
        if pred.shape != y.shape:
            raise ValueError(f"forecast shape {pred.shape} does not match target shape {y.shape}")
        base = repeat_last(x, y.shape[-1])
        if setting == "MISO":
            sel = [target_channel]
            pred, y, base = pred[:, sel], y[:, sel], base[:, sel]
        err, berr = pred - y, base - y
        sums += [(err**2).sum(), np.abs(err).sum(), (berr**2).sum(), np.abs(berr).sum()]
        count += y.size
    m_sq, m_abs, b_sq, b_abs = (float(v) for v in sums / count)
    return EvalReport(setting, inputs.horizon, seed, m_sq, m_abs, b_sq, b_abs)


# ---- experiment orchestration ------------------------------------------------


def decomposition_config(cfg: ExperimentConfig) -> DecompositionConfig:
    return DecompositionConfig(
        period=cfg.decomposition_period,
        trend_window=cfg.decomposition_trend_window or None,
        block_window=cfg.decomposition_block_window,
        block_stride=cfg.decomposition_block_stride,
    )


def graph_config(cfg: ExperimentConfig) -> GraphConfig:
    return GraphConfig(
        k=cfg.graph_k,
        trend_factor=cfg.graph_trend_factor or None,
        seasonal_factor=cfg.graph_seasonal_factor,
        residual_factor=cfg.graph_residual_factor or None,
        band=cfg.graph_band or None,
    )


def ablation_flags(cfg: ExperimentConfig) -> AblationFlags:
    return AblationFlags(
        use_decomposition=cfg.ablation_use_decomposition,
        use_time_embedding=cfg.ablation_use_time_embedding,
        use_temporal=cfg.ablation_use_temporal,
        use_spatial=cfg.ablation_use_spatial,
    )


def model_config(cfg: ExperimentConfig, n_channels: int) -> ModelConfig:
    return ModelConfig(
        lookback=cfg.data_lookback,
        horizon=cfg.data_horizon,
        n_channels=n_channels,
        gat_hidden=cfg.model_gat_hidden or None,
        gat_heads=cfg.model_gat_heads,
        gat_layers=cfg.model_gat_layers,
        tcn_layers=cfg.model_tcn_layers,
        tcn_kernel=cfg.model_tcn_kernel,
        flags=ablation_flags(cfg),
    )


def train_config(cfg: ExperimentConfig, seed: int | None = None) -> TrainConfig:
    return TrainConfig(
        learning_rate=cfg.train_lr,
        batch_size=cfg.train_batch_size,
        max_epochs=cfg.train_max_epochs,
        patience=cfg.train_patience,
        seed=cfg.train_seed if seed is None else seed,
        setting=cfg.eval_setting,
        target_channel=cfg.eval_target_channel,
    )


SYNTHETIC = "synthetic"


def load_dataset(cfg: ExperimentConfig) -> TimeSeriesTable:
    if cfg.data_path == SYNTHETIC:
        return synthetic_table(cfg.data_synthetic_steps, cfg.data_synthetic_noise, seed=0)
    if not cfg.data_path:
        raise ConfigError("data.path is required (a CSV file or 'synthetic')")
    schema = TableSchema(
        timestamp_column=cfg.data_timestamp_column,
        channels=tuple(cfg.channel_list) if cfg.channel_list else None,
        resolution=cfg.data_resolution or None,
        delimiter=cfg.data_delimiter,
    )
    table = load_table(cfg.data_path, schema)
    if cfg.data_first_channels:
        table = table.select(range(min(cfg.data_first_channels, table.n_channels)))
    return table


def prepare_data(cfg: ExperimentConfig, table: TimeSeriesTable) -> PreparedData:
    split = SplitConfig(cfg.data_train_fraction, cfg.data_val_fraction, cfg.data_test_fraction)
    return prepare(table, split)


def infer_graphs(cfg: ExperimentConfig, data: PreparedData) -> dict[str, ComponentGraph]:
    lo, hi = data.boundaries["train"]
    graphs, _ = build_component_graphs(
        data.table.values[lo:hi], decomposition_config(cfg), graph_config(cfg), include_raw=True
    )
    return graphs


def setting_graphs(cfg: ExperimentConfig, graphs: dict[str, ComponentGraph]) -> dict[str, ComponentGraph]:
    """SISO models see one channel, so every graph collapses to a single self-loop."""
    if cfg.eval_setting != "SISO":
        return graphs
    return {name: ComponentGraph.self_loops_only(1, name) for name in graphs}


def setting_windows(cfg: ExperimentConfig, windows: WindowSet) -> WindowSet:
    if cfg.eval_setting != "SISO":
        return windows
    return windows.select_channels([cfg.eval_target_channel % windows.n_channels])


def build_model(
    cfg: ExperimentConfig, n_channels: int, graphs: dict[str, ComponentGraph], seed: int | None = None
) -> DstModel:
    """Fresh model for the configured setting; ``n_channels`` counts every dataset channel."""
    width = 1 if cfg.eval_setting == "SISO" else n_channels
    return DstModel(
        model_config(cfg, width),
        setting_graphs(cfg, graphs),
        decomposition_config(cfg),
        seed=cfg.train_seed if seed is None else seed,
    )


@dataclass
class RunResult:
    model: DstModel
    history: TrainHistory
    report: EvalReport


def fit(
    cfg: ExperimentConfig,
    data: PreparedData,
    graphs: dict[str, ComponentGraph],
    seed: int | None = None,
    windows: dict[str, WindowSet] | None = None,
) -> tuple[DstModel, TrainHistory]:
    seed = cfg.train_seed if seed is None else seed
    windows = windows or split_windows(data, cfg.data_lookback, cfg.data_horizon, cfg.data_stride)
    model = build_model(cfg, data.table.n_channels, graphs, seed)
    tcfg = train_config(cfg, seed)
    if cfg.eval_setting == "SISO":
        tcfg = dataclasses.replace(tcfg, target_channel=0)
    return train(model, setting_windows(cfg, windows["train"]), setting_windows(cfg, windows["val"]), tcfg)


def fit_evaluate(
    cfg: ExperimentConfig,
    data: PreparedData,
    graphs: dict[str, ComponentGraph],
    seed: int | None = None,
    windows: dict[str, WindowSet] | None = None,
) -> RunResult:
    seed = cfg.train_seed if seed is None else seed
    windows = windows or split_windows(data, cfg.data_lookback, cfg.data_horizon, cfg.data_stride)
    model, history = fit(cfg, data, graphs, seed, windows)
    report = evaluate(model, windows["test"], cfg.eval_setting, cfg.eval_target_channel, seed)
    return RunResult(model, history, report)


ABLATIONS = {
    "w/o decomposition": {"ablation.use_decomposition": False},
    "w/o date-time embedding": {"ablation.use_time_embedding": False},
    "w/o temporal": {"ablation.use_temporal": False},
    "w/o spatial": {"ablation.use_spatial": False},
    "original": {},
}


def ablate(cfg: ExperimentConfig, data: PreparedData, graphs: dict[str, ComponentGraph]) -> dict[str, float]:
    """Test MSE of the full model and of each single-module removal, same seed throughout."""
    windows = split_windows(data, cfg.data_lookback, cfg.data_horizon, cfg.data_stride)
    out = {}
    for name, change in ABLATIONS.items():
        result = fit_evaluate(cfg.override(change), data, graphs, windows=windows)
        out[name] = result.report.mse
        log.info("ablation %s: mse %.5f", name, result.report.mse)
    return out


def layer_sweep(
    cfg: ExperimentConfig, data: PreparedData, graphs: dict[str, ComponentGraph], max_layers: int
) -> list[tuple[int, float]]:
    """Test MSE for 1..max_layers stacked GATv2 layers, same seed throughout."""
    if max_layers < 1:
        raise ValueError("max_layers must be >= 1")
    windows = split_windows(data, cfg.data_lookback, cfg.data_horizon, cfg.data_stride)
    return [
        (n, fit_evaluate(cfg.override({"model.gat_layers": n}), data, graphs, windows=windows).report.mse)
        for n in range(1, max_layers + 1)
    ]

"""Decomposition-based spatio-temporal forecaster.

Per component (trend, seasonal, residual) a GATv2 spatial branch and a TCN
temporal branch run in parallel on the (B, D, L) look-back; their outputs are
added to a linear embedding of the calendar features and mapped by a
per-channel linear head to the (B, D, H) forecast. Component forecasts are
summed.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import diff
from .data import N_TIME_FEATURES, WindowSample
from .decompose import COMPONENT_NAMES, DecompositionConfig, decompose
from .diff import Tensor
from .graph import ComponentGraph


@dataclass(frozen=True)
class AblationFlags:
    use_decomposition: bool = True
    use_time_embedding: bool = True
    use_temporal: bool = True
    use_spatial: bool = True


@dataclass(frozen=True)
class ModelConfig:
    lookback: int
    horizon: int
    n_channels: int
    n_time_features: int = N_TIME_FEATURES
    gat_hidden: int | None = None  # None -> lookback
    gat_heads: int = 1
    gat_layers: int = 1
    gat_projection: bool = True
    tcn_layers: int = 3
    tcn_kernel: int = 3
    tcn_residual: bool = True
    activation: str = "leaky_relu"  # or "linear"
    slope: float = 0.2
    flags: AblationFlags = field(default_factory=AblationFlags)

    @property
    def hidden(self) -> int:
        return self.lookback if self.gat_hidden is None else self.gat_hidden

    @property
    def receptive_field(self) -> int:
        return 1 + (self.tcn_kernel - 1) * (2**self.tcn_layers - 1)

    @property
    def components(self) -> tuple[str, ...]:
        return COMPONENT_NAMES if self.flags.use_decomposition else ("raw",)


def _activate(x: Tensor, activation: str, slope: float) -> Tensor:
    if activation == "linear":
        return x
    if activation == "leaky_relu":
        return diff.leaky_relu(x, slope)
    raise ValueError(f"unknown activation {activation!r}")


@dataclass
class Gatv2Params:
    W: Tensor  # (2L, d_h): maps [h_i || h_j] to the hidden width
    a: Tensor  # (d_h,)
    proj: Tensor | None = None  # (L, L) message projection


@dataclass
class TcnParams:
    kernels: list[Tensor]  # each (D, k); layer i uses dilation 2**i
    residual: bool = True

    @property
    def dilations(self) -> list[int]:
        return [2**i for i in range(len(self.kernels))]


@dataclass
class TimeEmbedParams:
    W: Tensor  # (D, F)
    b: Tensor  # (D, 1)


@dataclass
class LinearHeadParams:
    W: Tensor  # (D, H, L)
    b: Tensor  # (D, H)


def _as_batch(x) -> tuple[Tensor, bool]:
    x = diff.as_tensor(x)
    if x.ndim == 2:
        return diff.reshape(x, (1,) + x.shape), True
    return x, False


def _unbatch(x: Tensor, squeeze: bool) -> Tensor:
    return x[0] if squeeze else x


def gatv2_attention(x: Tensor, graph: ComponentGraph, params: Gatv2Params, slope: float = 0.2) -> Tensor:
    """Attention weights (B, D, K+1) over each node's neighbourhood, self first.

    Scores are a^T LeakyReLU(W [h_i || h_j]). The product with the stacked
    pair is evaluated as [h_i || h_j] W = h_i W_top + h_j W_bottom, which
    avoids materialising every concatenated pair.
    """
    index, mask = graph.neighborhoods()
    n_feat = x.shape[-1]
    query = x @ params.W[:n_feat]  # (B, D, d_h)
    key = x @ params.W[n_feat:]
    b, d, dh = query.shape
    pre = diff.reshape(query, (b, d, 1, dh)) + diff.take(key, index, axis=1)
    scores = diff.einsum("bdkh,h->bdk", diff.leaky_relu(pre, slope), params.a)
    return diff.masked_softmax(scores, mask)


def gatv2_forward(
    node_features,
    graph: ComponentGraph,
    params: Gatv2Params,
    activation: str = "leaky_relu",
    slope: float = 0.2,
) -> Tensor:
    """One GATv2 layer over (D, L) or (B, D, L) node features; self-loops always included."""
    x, squeeze = _as_batch(node_features)
    if x.shape[1] != graph.n_nodes:
        raise ValueError(f"{x.shape[1]} nodes in the features but {graph.n_nodes} in the graph")
    index, _ = graph.neighborhoods()
    alpha = gatv2_attention(x, graph, params, slope)
    messages = x @ params.proj if params.proj is not None else x
    agg = diff.einsum("bdk,bdkl->bdl", alpha, diff.take(messages, index, axis=1))
    return _unbatch(_activate(agg, activation, slope), squeeze)


def gat_scores(h: np.ndarray, W: np.ndarray, a: np.ndarray, slope: float = 0.2) -> np.ndarray:
    """Original GAT scores LeakyReLU(a^T [W h_i || W h_j]) for all pairs of rows of ``h``."""
    z = h @ W.T
    half = z.shape[1]
    left, right = z @ a[:half], z @ a[half:]
    e = left[:, None] + right[None, :]
    return np.where(e > 0, e, slope * e)


def gatv2_scores(h: np.ndarray, W: np.ndarray, a: np.ndarray, slope: float = 0.2) -> np.ndarray:
    """GATv2 scores a^T LeakyReLU(W [h_i || h_j]) for all pairs of rows of ``h``."""
    n = h.shape[0]
    pairs = np.concatenate([np.repeat(h[:, None], n, 1), np.repeat(h[None, :], n, 0)], axis=-1)
    z = pairs @ W.T
    return np.where(z > 0, z, slope * z) @ a


def tcn_forward(series, params: TcnParams, activation: str = "leaky_relu", slope: float = 0.2) -> Tensor:
    """Stacked causal dilated convolutions, each followed by act(conv(x) + x)."""
    x, squeeze = _as_batch(series)
    for kernel, dilation in zip(params.kernels, params.dilations):
        y = diff.causal_dilated_conv1d(x, kernel, dilation)
        x = _activate(y + x if params.residual else y, activation, slope)
    return _unbatch(x, squeeze)


def time_embedding(time_features, params: TimeEmbedParams) -> Tensor:
    tf, squeeze = _as_batch(time_features)
    return _unbatch(diff.einsum("df,bft->bdt", params.W, tf) + params.b, squeeze)


def linear_head(features, params: LinearHeadParams) -> Tensor:
    """Y[b, d, h] = sum_l W[d, h, l] X[b, d, l] + b[d, h]."""
    x, squeeze = _as_batch(features)
    return _unbatch(diff.einsum("dhl,bdl->bdh", params.W, x) + params.b, squeeze)


@dataclass
class ComponentModel:
    gat: list[Gatv2Params]
    tcn: TcnParams
    time: TimeEmbedParams
    head: LinearHeadParams
    graph: ComponentGraph

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        out = {}
        for i, layer in enumerate(self.gat):
            out[f"{prefix}.gat{i}.W"] = layer.W
            out[f"{prefix}.gat{i}.a"] = layer.a
            if layer.proj is not None:
                out[f"{prefix}.gat{i}.proj"] = layer.proj
        for i, kernel in enumerate(self.tcn.kernels):
            out[f"{prefix}.tcn{i}.kernel"] = kernel
        out[f"{prefix}.time.W"] = self.time.W
        out[f"{prefix}.time.b"] = self.time.b
        out[f"{prefix}.head.W"] = self.head.W
        out[f"{prefix}.head.b"] = self.head.b
        return out


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = np.sqrt(1.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def init_component(config: ModelConfig, graph: ComponentGraph, rng: np.random.Generator) -> ComponentModel:
    L, H, D, F = config.lookback, config.horizon, config.n_channels, config.n_time_features
    dh = config.hidden
    gat = []
    for _ in range(config.gat_layers):
        for _ in range(config.gat_heads):
            gat.append(Gatv2Params(
                W=_uniform(rng, (2 * L, dh), 2 * L),
                a=_uniform(rng, (dh,), dh),
                proj=_uniform(rng, (L, L), L) if config.gat_projection else None,
            ))
    kernels = [_uniform(rng, (D, config.tcn_kernel), config.tcn_kernel) for _ in range(config.tcn_layers)]
    return ComponentModel(
        gat=gat,
        tcn=TcnParams(kernels, residual=config.tcn_residual),
        time=TimeEmbedParams(_uniform(rng, (D, F), F), _uniform(rng, (D, 1), F)),
        head=LinearHeadParams(_uniform(rng, (D, H, L), L), _uniform(rng, (D, H), L)),
        graph=graph,
    )


def spatial_forward(x: Tensor, comp: ComponentModel, config: ModelConfig) -> Tensor:
    """Stack ``gat_layers`` GATv2 layers; multiple heads per layer are averaged."""
    heads = config.gat_heads
    for layer in range(config.gat_layers):
        outs = [
            gatv2_forward(x, comp.graph, p, config.activation, config.slope)
            for p in comp.gat[layer * heads:(layer + 1) * heads]
        ]
        x = outs[0]
        for o in outs[1:]:
            x = x + o
        if heads > 1:
            x = x * (1.0 / heads)
    return x


def component_forward(x, time_features, comp: ComponentModel, config: ModelConfig) -> Tensor:
    """Forecast one component: head(spatial(x) + temporal(x) + time_embed(x_time)).

    A disabled branch contributes nothing; with both branches disabled the
    head sees ``x`` itself. A disabled time embedding contributes zeros.
    """
    x, squeeze = _as_batch(x)
    tf, _ = _as_batch(time_features)
    flags = config.flags
    branches = []
    if flags.use_spatial:
        branches.append(spatial_forward(x, comp, config))
    if flags.use_temporal:
        branches.append(tcn_forward(x, comp.tcn, config.activation, config.slope))
    features = branches[0] if branches else x
    for b in branches[1:]:
        features = features + b
    if flags.use_time_embedding:
        features = features + time_embedding(tf, comp.time)
    return _unbatch(linear_head(features, comp.head), squeeze)


class DstModel:
    """Per-component parameter bundles plus their graphs and the decomposition setup."""

    def __init__(
        self,
        config: ModelConfig,
        graphs: dict[str, ComponentGraph],
        decomposition: DecompositionConfig,
        seed: int = 0,
    ):
        self.config = config
        self.decomposition = decomposition
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.components: dict[str, ComponentModel] = {}
        for name in config.components:
            graph = graphs[name]
            if graph.n_nodes != config.n_channels:
                raise ValueError(
                    f"{name} graph has {graph.n_nodes} nodes, model expects {config.n_channels} channels"
                )
            self.components[name] = init_component(config, graph, rng)

    @property
    def flags(self) -> AblationFlags:
        return self.config.flags

    def with_flags(self, flags: AblationFlags) -> DstModel:
        """Same parameters, different ablation switches (decomposition must not change)."""
        if flags.use_decomposition != self.flags.use_decomposition:
            raise ValueError("toggling decomposition changes the parameter set; build a new model")
        other = object.__new__(DstModel)
        other.config = replace(self.config, flags=flags)
        other.decomposition = self.decomposition
        other.seed = self.seed
        other.components = self.components
        return other

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for name, comp in self.components.items():
            out.update(comp.named_parameters(name))
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        if set(state) != set(params):
            missing = sorted(set(params) - set(state))
            extra = sorted(set(state) - set(params))
            raise ValueError(f"state mismatch: missing {missing[:3]}, unexpected {extra[:3]}")
        for k, t in params.items():
            if state[k].shape != t.shape:
                raise ValueError(f"{k}: shape {state[k].shape} != {t.shape}")
            t.data[...] = state[k]

    def zero_grad(self) -> None:
        for t in self.parameters().values():
            t.zero_grad()

    def component_inputs(self, lookback: np.ndarray) -> dict[str, np.ndarray]:
        if not self.flags.use_decomposition:
            return {"raw": lookback}
        return decompose(lookback, self.decomposition).as_dict()

    def forward(self, lookback: np.ndarray, time_features: np.ndarray) -> Tensor:
        """(B, D, L) look-back and (B, F, L) calendar features -> (B, D, H) forecast tensor."""
        lookback = np.asarray(lookback, dtype=np.float64)
        if lookback.shape[-2] != self.config.n_channels:
            raise ValueError(
                f"sample has {lookback.shape[-2]} channels, graphs were built for {self.config.n_channels}"
            )
        out = None
        for name, x in self.component_inputs(lookback).items():
            y = component_forward(x, time_features, self.components[name], self.config)
            out = y if out is None else out + y
        return out

    def component_forecasts(self, lookback: np.ndarray, time_features: np.ndarray) -> dict[str, np.ndarray]:
        return {
            name: component_forward(x, time_features, self.components[name], self.config).data
            for name, x in self.component_inputs(np.asarray(lookback, dtype=np.float64)).items()
        }

    def predict(self, lookback: np.ndarray, time_features: np.ndarray) -> np.ndarray:
        return self.forward(lookback, time_features).data


def model_forward(sample: WindowSample, model: DstModel) -> np.ndarray:
    """(D, H) forecast for a single window sample."""
    return model.predict(sample.lookback[None], sample.time_features[None])[0]

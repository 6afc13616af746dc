"""Parameter-conditioned sampling network.

The map ``f(x; eta)`` is a stack of ``depth`` sigmoid layers of a fixed
``width``. The first three layers have companion layers whose weight matrix
and bias vector are generated from the shared physical parameter ``eta`` by
small three-stage generator networks (contraction on the last two axes,
broadcast over the leading axis, sigmoid between stages, no activation on
the final stage). Skip connections add the previous-previous layer output
into each layer input from layer 4 on, and a trainable linear bypass runs
straight from the input to the output.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Graph


@dataclass(frozen=True)
class NetConfig:
    d: int
    d_eta: int
    width: int = 20
    depth: int = 12
    parnet_width: int = 10
    conditioned_layers: int = 3

    def __post_init__(self):
        if self.d < 1 or self.d_eta < 1:
            raise ValueError("d and d_eta must be >= 1")
        if self.width < 1:
            raise ValueError("width must be >= 1")
        if self.depth < 4:
            raise ValueError("depth must be >= 4")
        if not 0 <= self.conditioned_layers <= 3:
            raise ValueError("conditioned_layers must be in 0..3")
        if self.parnet_width < 1:
            raise ValueError("parnet_width must be >= 1")
        if self.conditioned_layers >= 1 and self.d > self.width:
            raise ValueError("conditioned layers require d <= width (zero padding)")


def param_shapes(config: NetConfig) -> dict[str, tuple[int, ...]]:
    """Tensor name -> shape, in the fixed construction order."""
    w, d, de, p = config.width, config.d, config.d_eta, config.parnet_width
    shapes: dict[str, tuple[int, ...]] = {}
    shapes["layer1.weight"] = (w, d + de)
    shapes["layer1.bias"] = (w,)
    for k in range(2, config.depth):
        shapes[f"layer{k}.weight"] = (w, w)
        shapes[f"layer{k}.bias"] = (w,)
    shapes[f"layer{config.depth}.weight"] = (d, w)
    shapes[f"layer{config.depth}.bias"] = (d,)
    shapes["bypass.weight"] = (d, d)
    shapes["bypass.bias"] = (d,)
    for k in range(1, config.conditioned_layers + 1):
        for target in ("w", "b"):
            shapes[f"par{k}.{target}.l1.weight"] = (w, de, p)
            shapes[f"par{k}.{target}.l1.bias"] = (w, 1, p)
            shapes[f"par{k}.{target}.l2.weight"] = (w, p, p)
            shapes[f"par{k}.{target}.l2.bias"] = (w, 1, p)
            shapes[f"par{k}.{target}.l3.weight"] = (w, p, 1)
            shapes[f"par{k}.{target}.l3.bias"] = (w, 1, 1)
    return shapes


# contraction axis size per generator stage, used for fan-in scaling
def _fan_in(name: str, config: NetConfig) -> int:
    if name == "layer1.weight":
        return config.d + config.d_eta
    if name.startswith("layer"):
        return config.width
    if name.endswith("l1.weight"):
        return config.d_eta
    return config.parnet_width


@dataclass
class NetParams:
    """All trainable tensors, keyed by name (see :func:`param_shapes`)."""

    config: NetConfig
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def validate(self):
        shapes = param_shapes(self.config)
        if set(shapes) != set(self.tensors):
            missing = set(shapes) - set(self.tensors)
            extra = set(self.tensors) - set(shapes)
            raise ValueError(f"tensor set mismatch: missing={missing} extra={extra}")
        for name, arr in self.tensors.items():
            if arr.shape != shapes[name]:
                raise ValueError(
                    f"{name}: shape {arr.shape}, expected {shapes[name]}"
                )
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name}: non-finite entries")

    def n_parameters(self) -> int:
        return sum(arr.size for arr in self.tensors.values())

    def copy(self) -> "NetParams":
        return NetParams(self.config, {k: v.copy() for k, v in self.tensors.items()})


def is_decayable(name: str) -> bool:
    """Weight-decay applies to weight matrices only, never to biases."""
    return name.endswith(".weight")


def init_params(config: NetConfig, rng: np.random.Generator) -> NetParams:
    """Uniform(-sqrt(1/fan_in), +sqrt(1/fan_in)) weights, zero biases.

    The bypass starts at the identity so the initial output has full support
    over the input domain.
    """
    tensors = {}
    for name, shape in param_shapes(config).items():
        if name == "bypass.weight":
            tensors[name] = np.eye(config.d)
        elif name.endswith(".bias"):
            tensors[name] = np.zeros(shape)
        else:
            lim = np.sqrt(1.0 / _fan_in(name, config))
            tensors[name] = rng.uniform(-lim, lim, size=shape)
    params = NetParams(config, tensors)
    params.validate()
    return params


@dataclass
class EtaBatch:
    """n_eta parameter values, each tagging a group of N samples."""

    eta_values: np.ndarray  # (n_eta, d_eta)
    group_size: int

    def __post_init__(self):
        self.eta_values = np.atleast_2d(np.asarray(self.eta_values, dtype=float))
        if self.eta_values.shape[0] < 1 or self.group_size < 1:
            raise ValueError("need n_eta >= 1 and group size >= 1")


def _as_eta(eta, config):
    eta = np.asarray(eta, dtype=float).reshape(-1)
    if eta.shape[0] != config.d_eta:
        raise ValueError(f"eta has {eta.shape[0]} entries, expected {config.d_eta}")
    return eta


def _parnet_chain(g, params, k, target, tile_node):
    t = params.tensors
    prefix = f"par{k}.{target}"
    h = tile_node
    for stage in (1, 2, 3):
        q = g.parameter(f"{prefix}.l{stage}.weight", t[f"{prefix}.l{stage}.weight"])
        c = g.parameter(f"{prefix}.l{stage}.bias", t[f"{prefix}.l{stage}.bias"])
        h = g.add(g.batched_contract(h, q), c)
        if stage < 3:
            h = g.sigmoid(h)
    return h  # (width, width, 1) for target "w", (width, 1, 1) for "b"


def build_forward_graph(params: NetParams, checked: bool = False) -> Graph:
    """Assemble the full forward DAG for one eta group.

    Inputs expected at eval time: ``x`` (N, d), ``x_eta`` (N, d+d_eta),
    and, when conditioned layers are present, ``x_pad`` (N, width) plus the
    eta tiles ``tile_w`` (width, width, d_eta) and ``tile_b``
    (width, 1, d_eta).
    """
    cfg = params.config
    t = params.tensors
    cl = cfg.conditioned_layers
    g = Graph(checked=checked)

    x = g.input("x")
    x_eta = g.input("x_eta")
    if cl >= 1:
        x_pad = g.input("x_pad")
        tile_w = g.input("tile_w")
        tile_b = g.input("tile_b")

    def main_layer(k, inp):
        w = g.parameter(f"layer{k}.weight", t[f"layer{k}.weight"])
        b = g.parameter(f"layer{k}.bias", t[f"layer{k}.bias"])
        return g.affine(w, inp, b)

    def companion(k, inp):
        w_gen = _parnet_chain(g, params, k, "w", tile_w)
        b_gen = _parnet_chain(g, params, k, "b", tile_b)
        return g.sigmoid(g.affine(w_gen, inp, b_gen))

    h = {1: g.sigmoid(main_layer(1, x_eta))}
    u = {}

    u[2] = g.add(h[1], companion(1, x_pad)) if cl >= 1 else h[1]
    h[2] = g.sigmoid(main_layer(2, u[2]))
    u[3] = g.add(h[2], companion(2, h[1])) if cl >= 2 else h[2]
    h[3] = g.sigmoid(main_layer(3, u[3]))
    u[4] = g.add(h[3], companion(3, h[2])) if cl >= 3 else h[3]
    u[4] = g.add(u[4], h[2])  # skip from layer 2

    for k in range(4, cfg.depth):
        h[k] = g.sigmoid(main_layer(k, u[k]))
        u[k + 1] = g.add(h[k], h[k - 1])

    head = main_layer(cfg.depth, u[cfg.depth])
    bypass = g.affine(
        g.parameter("bypass.weight", t["bypass.weight"]),
        x,
        g.parameter("bypass.bias", t["bypass.bias"]),
    )
    g.add(head, bypass)
    return g


def make_bindings(config: NetConfig, X: np.ndarray, eta) -> dict[str, np.ndarray]:
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != config.d:
        raise ValueError(f"X must be (N, {config.d}), got {X.shape}")
    eta = _as_eta(eta, config)
    n = X.shape[0]
    bindings = {
        "x": X,
        "x_eta": np.concatenate([X, np.broadcast_to(eta, (n, config.d_eta))], axis=1),
    }
    if config.conditioned_layers >= 1:
        x_pad = np.zeros((n, config.width))
        x_pad[:, : config.d] = X
        bindings["x_pad"] = x_pad
        bindings["tile_w"] = np.broadcast_to(
            eta, (config.width, config.width, config.d_eta)
        )
        bindings["tile_b"] = np.broadcast_to(eta, (config.width, 1, config.d_eta))
    return bindings


def generate_conditioned_layer(params: NetParams, k: int, eta):
    """Weight matrix (width, width) and bias vector (width,) for layer k."""
    cfg = params.config
    if not 1 <= k <= cfg.conditioned_layers:
        raise ValueError(
            f"conditioned layer {k} not in 1..{cfg.conditioned_layers}"
        )
    eta = _as_eta(eta, cfg)
    g = Graph()
    tile_w = g.input("tile_w")
    tile_b = g.input("tile_b")
    w_node = _parnet_chain(g, params, k, "w", tile_w)
    b_node = _parnet_chain(g, params, k, "b", tile_b)
    g.forward_eval(
        {
            "tile_w": np.broadcast_to(eta, (cfg.width, cfg.width, cfg.d_eta)),
            "tile_b": np.broadcast_to(eta, (cfg.width, 1, cfg.d_eta)),
        }
    )
    return (
        w_node.value.reshape(cfg.width, cfg.width).copy(),
        b_node.value.reshape(cfg.width).copy(),
    )


def forward(params: NetParams, X: np.ndarray, eta, checked: bool = False):
    """Map a batch X (N, d) through the network at parameter value eta."""
    g = build_forward_graph(params, checked=checked)
    return g.forward_eval(make_bindings(params.config, X, eta))


def forward_backward(params: NetParams, X: np.ndarray, eta, output_grad):
    """Forward pass plus gradients of sum(output_grad * f(X)) w.r.t. params.

    Returns (output, gradient dict). Gradients flow through the layer
    generators into their tensors.
    """
    g = build_forward_graph(params)
    out = g.forward_eval(make_bindings(params.config, X, eta))
    grads = g.backward(np.asarray(output_grad, dtype=float))
    return out, grads


def forward_groups(params: NetParams, batches, etas):
    """Forward each group in ``batches`` with its matching eta row."""
    return [forward(params, X, eta) for X, eta in zip(batches, etas)]

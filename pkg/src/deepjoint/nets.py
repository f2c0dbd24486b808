"""Neural building blocks: MLP, LSTM, GRU, GRU-D with input/hidden decay,
and the positive-weight monotone MLP used for the cumulative intensity.

Each block exposes a node-level builder (operating on batched [B, dim]
graph nodes, used by the trainer) and a value-level convenience wrapper
matching the per-sequence contracts used in tests and prediction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .seeding import rng_for

ACTIVATIONS = {"softplus": ad.softplus, "tanh": ad.tanh,
               "sigmoid": ad.sigmoid, "relu": ad.relu}
MONOTONE_ACTIVATIONS = ("softplus", "tanh")


@dataclass
class MLPConfig:
    """Feed-forward stack; ``hidden_layers=[]`` means a single affine map."""

    input_dim: int
    hidden_layers: list[int] = field(default_factory=list)
    output_dim: int = 1
    activation: str = "tanh"
    output_activation: str | None = None

    def __post_init__(self):
        if self.input_dim <= 0 or self.output_dim <= 0:
            raise ValueError("dimensions must be positive")
        if any(w <= 0 for w in self.hidden_layers):
            raise ValueError("hidden widths must be positive")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


@dataclass
class RecurrentConfig:
    cell: str  # lstm | gru | gru_d
    input_dim: int
    hidden_dim: int
    num_layers: int = 1

    def __post_init__(self):
        if self.cell not in ("lstm", "gru", "gru_d"):
            raise ValueError(f"unknown cell {self.cell!r}")
        if self.input_dim <= 0 or self.hidden_dim <= 0 or self.num_layers <= 0:
            raise ValueError("dimensions must be positive")


@dataclass
class EmbeddingState:
    """Hidden state after one encounter: top-layer ``h`` plus cell internals
    (LSTM cell state / GRU-D last-observed references) in ``aux``."""

    h: np.ndarray
    aux: list


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------

def _uniform_param(pid: str, shape, fan_in: int, seed: int) -> ad.Parameter:
    bound = 1.0 / np.sqrt(fan_in)
    tensor = rng_for(seed, "init", pid).uniform(-bound, bound, size=shape)
    return ad.Parameter(pid, tensor)


def init_mlp_params(cfg: MLPConfig, prefix: str, seed: int) -> dict[str, ad.Parameter]:
    params = {}
    dims = [cfg.input_dim] + list(cfg.hidden_layers) + [cfg.output_dim]
    for i, (d_in, d_out) in enumerate(zip(dims, dims[1:])):
        for name, shape in ((f"{prefix}/layer{i}/W", (d_in, d_out)),
                            (f"{prefix}/layer{i}/b", (1, d_out))):
            params[name] = _uniform_param(name, shape, d_in, seed)
    return params


def init_recurrent_params(cfg: RecurrentConfig, prefix: str, seed: int) -> dict[str, ad.Parameter]:
    params = {}
    for layer in range(cfg.num_layers):
        x_dim = cfg.input_dim if layer == 0 else cfg.hidden_dim
        if cfg.cell == "gru_d" and layer == 0:
            x_dim = 2 * cfg.input_dim  # decayed values + observation mask
        d = cfg.hidden_dim
        lp = f"{prefix}/l{layer}"
        if cfg.cell == "lstm":
            gates = ("forget", "input", "output", "cand")
            for gate in gates:
                params[f"{lp}/{gate}/W"] = _uniform_param(f"{lp}/{gate}/W", (x_dim + d, d), x_dim + d, seed)
                params[f"{lp}/{gate}/b"] = _uniform_param(f"{lp}/{gate}/b", (1, d), x_dim + d, seed)
        else:  # gru or gru_d (gru_d wraps a gru cell)
            for gate in ("update", "reset"):
                params[f"{lp}/{gate}/W"] = _uniform_param(f"{lp}/{gate}/W", (x_dim + d, d), x_dim + d, seed)
                params[f"{lp}/{gate}/b"] = _uniform_param(f"{lp}/{gate}/b", (1, d), x_dim + d, seed)
            params[f"{lp}/cand/Wx"] = _uniform_param(f"{lp}/cand/Wx", (x_dim, d), x_dim, seed)
            params[f"{lp}/cand/Uh"] = _uniform_param(f"{lp}/cand/Uh", (d, d), d, seed)
            params[f"{lp}/cand/b"] = _uniform_param(f"{lp}/cand/b", (1, d), x_dim, seed)
    if cfg.cell == "gru_d":
        # zero-initialized decay: the model starts as a plain GRU
        k, d = cfg.input_dim, cfg.hidden_dim
        for name, shape in ((f"{prefix}/decay_x/w", (1, k)), (f"{prefix}/decay_x/b", (1, k)),
                            (f"{prefix}/decay_h/w", (1, d)), (f"{prefix}/decay_h/b", (1, d))):
            params[name] = ad.Parameter(name, np.zeros(shape))
    return params


# ---------------------------------------------------------------------------
# node-level builders (batched)
# ---------------------------------------------------------------------------

def _affine(graph: ad.Graph, name: str, x: ad.Node, rows: int, squared: bool = False) -> ad.Node:
    w = graph.leaf(f"{name}/W")
    if squared:
        w = ad.square(w)
    b = graph.leaf(f"{name}/b")
    out = ad.matmul(x, w)
    return ad.add(out, ad.broadcast_to(b, (rows, out.value.shape[1])))


def mlp_nodes(graph: ad.Graph, cfg: MLPConfig, prefix: str, x: ad.Node) -> ad.Node:
    if x.value.ndim != 2 or x.value.shape[1] != cfg.input_dim:
        raise ad.ShapeError("mlp", (x.value.shape, (cfg.input_dim,)))
    rows = x.value.shape[0]
    act = ACTIVATIONS[cfg.activation]
    h = x
    for i in range(len(cfg.hidden_layers)):
        h = act(_affine(graph, f"{prefix}/layer{i}", h, rows))
    out = _affine(graph, f"{prefix}/layer{len(cfg.hidden_layers)}", h, rows)
    if cfg.output_activation is not None:
        out = ACTIVATIONS[cfg.output_activation](out)
    return out


def positive_mlp_nodes(graph: ad.Graph, cfg: MLPConfig, prefix: str,
                       h: ad.Node | None, eps: ad.Node) -> ad.Node:
    """Anchored monotone response: N([h, eps]) - N([h, 0]) with every weight
    squared and a SoftPlus output, so the result is 0 at eps=0, non-negative
    and non-decreasing in eps."""
    if cfg.activation not in MONOTONE_ACTIVATIONS:
        raise ValueError("monotone head requires a monotone hidden activation")
    rows = eps.value.shape[0]
    act = ACTIVATIONS[cfg.activation]

    def net(eps_col: ad.Node) -> ad.Node:
        z = eps_col if h is None else ad.concat([h, eps_col], axis=1)
        for i in range(len(cfg.hidden_layers)):
            z = act(_affine(graph, f"{prefix}/layer{i}", z, rows, squared=True))
        out = _affine(graph, f"{prefix}/layer{len(cfg.hidden_layers)}", z, rows, squared=True)
        return ad.softplus(out)

    zero = graph.constant(np.zeros_like(eps.value))
    return ad.sub(net(eps), net(zero))


def _lstm_step(graph, lp, x, state):
    rows = x.value.shape[0]
    z = ad.concat([x, state["h"]], axis=1)
    f = ad.sigmoid(_affine(graph, f"{lp}/forget", z, rows))
    i = ad.sigmoid(_affine(graph, f"{lp}/input", z, rows))
    y = ad.sigmoid(_affine(graph, f"{lp}/output", z, rows))
    cand = ad.tanh(_affine(graph, f"{lp}/cand", z, rows))
    c = ad.add(ad.mul(f, state["c"]), ad.mul(i, cand))
    h = ad.mul(y, ad.tanh(c))
    return {"h": h, "c": c}


def _gru_step(graph, lp, x, h_prev):
    rows = x.value.shape[0]
    d = h_prev.value.shape[1]
    zc = ad.concat([x, h_prev], axis=1)
    update = ad.sigmoid(_affine(graph, f"{lp}/update", zc, rows))
    reset = ad.sigmoid(_affine(graph, f"{lp}/reset", zc, rows))
    rec = ad.mul(reset, ad.matmul(h_prev, graph.leaf(f"{lp}/cand/Uh")))
    pre = ad.add(ad.matmul(x, graph.leaf(f"{lp}/cand/Wx")), rec)
    cand = ad.tanh(ad.add(pre, ad.broadcast_to(graph.leaf(f"{lp}/cand/b"), (rows, d))))
    one = graph.constant(np.ones((rows, d)))
    return ad.add(ad.mul(ad.sub(one, update), h_prev), ad.mul(update, cand))


def _decay(graph, name, eps, width):
    """exp(-relu(w * eps + b)) broadcast to [rows, width]."""
    rows = eps.value.shape[0]
    w = ad.broadcast_to(graph.leaf(f"{name}/w"), (rows, width))
    b = ad.broadcast_to(graph.leaf(f"{name}/b"), (rows, width))
    eps_wide = ad.broadcast_to(eps, (rows, width))
    return ad.exp(ad.neg(ad.relu(ad.add(ad.mul(eps_wide, w), b))))


def _gru_d_step(graph, prefix, x, mask, eps, means, state):
    """Input decay toward the empirical mean plus hidden-state decay, then a
    plain GRU step on [decayed values, mask]."""
    rows, k = x.value.shape
    one = graph.constant(np.ones((rows, k)))
    gamma_x = _decay(graph, f"{prefix}/decay_x", eps, k)
    filled = ad.add(ad.mul(gamma_x, state["x_last"]),
                    ad.mul(ad.sub(one, gamma_x), means))
    x_hat = ad.add(ad.mul(mask, x), ad.mul(ad.sub(one, mask), filled))
    gamma_h = _decay(graph, f"{prefix}/decay_h", eps, state["h"].value.shape[1])
    h_decayed = ad.mul(gamma_h, state["h"])
    h = _gru_step(graph, f"{prefix}/l0", ad.concat([x_hat, mask], axis=1), h_decayed)
    x_last = ad.add(ad.mul(mask, x), ad.mul(ad.sub(one, mask), state["x_last"]))
    return {"h": h, "x_last": x_last}


def init_state_nodes(graph: ad.Graph, cfg: RecurrentConfig, rows: int) -> list[dict]:
    zeros = lambda d: graph.constant(np.zeros((rows, d)))
    states = []
    for layer in range(cfg.num_layers):
        if cfg.cell == "lstm":
            states.append({"h": zeros(cfg.hidden_dim), "c": zeros(cfg.hidden_dim)})
        elif cfg.cell == "gru_d" and layer == 0:
            states.append({"h": zeros(cfg.hidden_dim), "x_last": zeros(cfg.input_dim)})
        else:
            states.append({"h": zeros(cfg.hidden_dim)})
    return states


def rnn_step_nodes(graph: ad.Graph, cfg: RecurrentConfig, prefix: str,
                   states: list[dict], x: ad.Node,
                   mask: ad.Node | None = None, eps: ad.Node | None = None,
                   means: ad.Node | None = None) -> list[dict]:
    """Advance all layers one encounter. For gru_d, layer 0 consumes the
    (values, mask, eps) triplet; upper layers are plain GRUs."""
    new_states = []
    inp = x
    for layer in range(cfg.num_layers):
        lp = f"{prefix}/l{layer}"
        if cfg.cell == "lstm":
            st = _lstm_step(graph, lp, inp, states[layer])
        elif cfg.cell == "gru_d" and layer == 0:
            if mask is None or eps is None or means is None:
                raise ValueError("gru_d requires mask, eps and means")
            st = _gru_d_step(graph, prefix, inp, mask, eps, means, states[layer])
        else:
            st = {"h": _gru_step(graph, lp, inp, states[layer]["h"])}
        new_states.append(st)
        inp = st["h"]
    return new_states


# ---------------------------------------------------------------------------
# value-level wrappers
# ---------------------------------------------------------------------------

def _as_row(x) -> np.ndarray:
    arr = ad.as_tensor(x)
    return arr.reshape(1, -1)


def mlp_forward(cfg: MLPConfig, params: dict, x, prefix: str = "mlp") -> np.ndarray:
    graph = ad.Graph(params)
    out = mlp_nodes(graph, cfg, prefix, graph.constant(_as_row(x)))
    return out.value[0]


def positive_mlp_forward(cfg: MLPConfig, params: dict, h, eps: float,
                         prefix: str = "intensity") -> float:
    if eps < 0:
        raise ValueError("eps must be non-negative")
    graph = ad.Graph(params)
    h_node = None
    if h is not None and np.size(h) > 0:
        h_node = graph.constant(_as_row(h))
    out = positive_mlp_nodes(graph, cfg, prefix, h_node,
                             graph.input(np.array([[float(eps)]])))
    return out.value.item()


def _state_to_nodes(graph, cfg, state: EmbeddingState | None, rows=1) -> list[dict]:
    if state is None:
        return init_state_nodes(graph, cfg, rows)
    return [{k: graph.constant(v.reshape(1, -1)) for k, v in layer.items()}
            for layer in state.aux]


def _nodes_to_state(states: list[dict]) -> EmbeddingState:
    aux = [{k: v.value[0].copy() for k, v in layer.items()} for layer in states]
    return EmbeddingState(h=aux[-1]["h"], aux=aux)


def lstm_step(params: dict, x_t, state: EmbeddingState | None,
              prefix: str = "enc") -> EmbeddingState:
    cfg = _infer_cfg("lstm", params, prefix)
    graph = ad.Graph(params)
    states = _state_to_nodes(graph, cfg, state)
    return _nodes_to_state(rnn_step_nodes(graph, cfg, prefix, states,
                                          graph.constant(_as_row(x_t))))


def gru_step(params: dict, x_t, state: EmbeddingState | None,
             prefix: str = "enc") -> EmbeddingState:
    cfg = _infer_cfg("gru", params, prefix)
    graph = ad.Graph(params)
    states = _state_to_nodes(graph, cfg, state)
    return _nodes_to_state(rnn_step_nodes(graph, cfg, prefix, states,
                                          graph.constant(_as_row(x_t))))


def gru_d_step(params: dict, x_t, mask_t, eps_t: float,
               state: EmbeddingState | None, empirical_means,
               prefix: str = "enc") -> EmbeddingState:
    if eps_t < 0:
        raise ValueError("eps must be non-negative")
    cfg = _infer_cfg("gru_d", params, prefix)
    graph = ad.Graph(params)
    states = _state_to_nodes(graph, cfg, state)
    new = rnn_step_nodes(
        graph, cfg, prefix, states,
        graph.constant(_as_row(x_t)),
        mask=graph.constant(_as_row(mask_t)),
        eps=graph.constant(np.array([[float(eps_t)]])),
        means=graph.constant(_as_row(empirical_means)))
    return _nodes_to_state(new)


def _infer_cfg(cell: str, params: dict, prefix: str) -> RecurrentConfig:
    num_layers = 0
    while any(k.startswith(f"{prefix}/l{num_layers}/") for k in params):
        num_layers += 1
    if num_layers == 0:
        raise KeyError(f"no recurrent parameters under prefix {prefix!r}")
    if cell == "lstm":
        first_w = params[f"{prefix}/l0/forget/W"].tensor
        d = first_w.shape[1]
        x_dim = first_w.shape[0] - d
    else:
        first_w = params[f"{prefix}/l0/cand/Wx"].tensor
        d = first_w.shape[1]
        x_dim = first_w.shape[0]
    if cell == "gru_d":
        x_dim = params[f"{prefix}/decay_x/w"].tensor.shape[1]
    return RecurrentConfig(cell=cell, input_dim=x_dim, hidden_dim=d,
                           num_layers=num_layers)


def encode_sequence(cfg: RecurrentConfig, params: dict, step_inputs,
                    prefix: str = "enc") -> list[EmbeddingState]:
    """Run the configured cell over one patient's encounters.

    ``step_inputs`` is a list of dicts, one per encounter, with key "x"
    (input vector) and, for gru_d, "mask", "eps" and "means". Returns the
    state after every encounter, causally ordered.
    """
    if not step_inputs:
        raise ValueError("empty sequence")
    state: EmbeddingState | None = None
    out = []
    for step in step_inputs:
        if cfg.cell == "lstm":
            state = lstm_step(params, step["x"], state, prefix)
        elif cfg.cell == "gru":
            state = gru_step(params, step["x"], state, prefix)
        else:
            state = gru_d_step(params, step["x"], step["mask"], step["eps"],
                               state, step["means"], prefix)
        out.append(state)
    return out

"""The joint model bundle: shared encoder plus up to three heads (survival,
gap intensity, missingness), its batched forward graphs, prediction,
evaluation, and bit-exact checkpointing."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import metrics as mx
from . import nets, presence
from .data import (ABLATIONS, STRATEGIES, NormalizationStats, PreparedDataset,
                   strategy_input_dim)
from .survival import BreslowTable, breslow_fit, cox_loss_nodes, predict_survival

CHECKPOINT_VERSION = 1

HEAD_SURVIVAL = "survival"
HEAD_INTENSITY = "intensity"
HEAD_MISSINGNESS = "missingness"

STRATEGY_HEADS = {
    "last": (HEAD_SURVIVAL,),
    "count": (HEAD_SURVIVAL,),
    "ignore": (HEAD_SURVIVAL,),
    "resample": (HEAD_SURVIVAL,),
    "gru_d": (HEAD_SURVIVAL,),
    "feature": (HEAD_SURVIVAL,),
    "deepjoint": (HEAD_SURVIVAL, HEAD_INTENSITY, HEAD_MISSINGNESS),
    "deepjoint_i": (HEAD_SURVIVAL, HEAD_INTENSITY),
    "deepjoint_m": (HEAD_SURVIVAL, HEAD_MISSINGNESS),
}

_VECTOR_STRATEGIES = ("last", "count")


@dataclass
class ModelConfig:
    """Architecture knobs, following the hyperparameter grid of the study
    design (hidden 10/25, 1-2 recurrent layers, 0-3 head layers, width 50)."""

    strategy: str
    n_labs: int
    hidden_dim: int = 10
    rnn_layers: int = 1
    surv_layers: int = 1
    surv_width: int = 50
    intensity_layers: int = 1
    intensity_width: int = 50
    missingness_layers: int = 1
    missingness_width: int = 50

    def __post_init__(self):
        if self.strategy not in STRATEGY_HEADS:
            raise ValueError(f"unknown strategy {self.strategy!r}")

    @property
    def heads(self) -> tuple:
        return STRATEGY_HEADS[self.strategy]

    @property
    def prepare_strategy(self) -> str:
        return "deepjoint" if self.strategy in ABLATIONS else self.strategy

    @property
    def uses_encoder(self) -> bool:
        return self.strategy not in _VECTOR_STRATEGIES

    @property
    def input_dim(self) -> int:
        return strategy_input_dim(self.strategy, self.n_labs)

    @property
    def embedding_dim(self) -> int:
        return self.hidden_dim if self.uses_encoder else self.input_dim

    def encoder_cfg(self) -> nets.RecurrentConfig | None:
        if not self.uses_encoder:
            return None
        cell = "gru_d" if self.strategy == "gru_d" else "lstm"
        return nets.RecurrentConfig(cell=cell, input_dim=self.input_dim,
                                    hidden_dim=self.hidden_dim,
                                    num_layers=self.rnn_layers)

    def surv_cfg(self) -> nets.MLPConfig:
        return nets.MLPConfig(input_dim=self.embedding_dim,
                              hidden_layers=[self.surv_width] * self.surv_layers,
                              output_dim=1, activation="tanh")

    def intensity_cfg(self) -> nets.MLPConfig:
        return nets.MLPConfig(input_dim=self.embedding_dim + 1,
                              hidden_layers=[self.intensity_width] * self.intensity_layers,
                              output_dim=1, activation="softplus")

    def missingness_cfg(self) -> nets.MLPConfig:
        return nets.MLPConfig(input_dim=self.embedding_dim + 1,
                              hidden_layers=[self.missingness_width] * self.missingness_layers,
                              output_dim=self.n_labs, activation="tanh")

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, payload: dict) -> "ModelConfig":
        return cls(**payload)


class JointModel:
    """Parameter bundle with the strategy's encoder and heads, the train
    normalization statistics, and (after fitting) a Breslow baseline."""

    def __init__(self, cfg: ModelConfig, stats: NormalizationStats, seed: int):
        self.cfg = cfg
        self.stats = stats
        self.seed = seed
        self.breslow: BreslowTable | None = None
        self.params: dict[str, ad.Parameter] = {}
        enc = cfg.encoder_cfg()
        if enc is not None:
            self.params.update(nets.init_recurrent_params(enc, "enc", seed))
        self.params.update(nets.init_mlp_params(cfg.surv_cfg(), "surv", seed))
        if HEAD_INTENSITY in cfg.heads:
            self.params.update(nets.init_mlp_params(cfg.intensity_cfg(), "intensity", seed))
        if HEAD_MISSINGNESS in cfg.heads:
            self.params.update(nets.init_mlp_params(cfg.missingness_cfg(), "missingness", seed))

    def param_ids(self, prefix: str | None = None) -> list:
        if prefix is None:
            return sorted(self.params)
        return sorted(pid for pid in self.params if pid.startswith(prefix + "/"))

    def clone_tensors(self, ids=None) -> dict:
        ids = self.param_ids() if ids is None else ids
        return {pid: self.params[pid].tensor.copy() for pid in ids}

    def restore_tensors(self, snapshot: dict):
        for pid, tensor in snapshot.items():
            self.params[pid].tensor = tensor.copy()


# ---------------------------------------------------------------------------
# padded batch tensors
# ---------------------------------------------------------------------------

@dataclass
class BatchTensors:
    """Whole-split padded arrays; minibatches fancy-index the first axis."""

    n: int
    times: np.ndarray                 # survival times [N]
    events: np.ndarray                # [N]
    X: np.ndarray | None = None       # [N, T, D] encoder inputs
    lengths: np.ndarray | None = None
    masks: np.ndarray | None = None   # [N, T, K] gru_d observation masks
    eps_steps: np.ndarray | None = None  # [N, T] gru_d gaps
    vectors: np.ndarray | None = None    # [N, D] vector strategies
    gap_targets: np.ndarray | None = None    # [N, T] next-gap, pad 1.0
    mask_targets: np.ndarray | None = None   # [N, T, K]
    interval_mask: np.ndarray | None = None  # [N, T] 1 where a real interval
    censored_mask: np.ndarray | None = None  # [N, T] 1 at the censored tail

    def subset(self, idx) -> "BatchTensors":
        take = lambda a: None if a is None else a[idx]
        return BatchTensors(n=len(idx), times=self.times[idx], events=self.events[idx],
                            X=take(self.X), lengths=take(self.lengths),
                            masks=take(self.masks), eps_steps=take(self.eps_steps),
                            vectors=take(self.vectors), gap_targets=take(self.gap_targets),
                            mask_targets=take(self.mask_targets),
                            interval_mask=take(self.interval_mask),
                            censored_mask=take(self.censored_mask))


def build_tensors(model: JointModel, dataset: PreparedDataset) -> BatchTensors:
    patients = dataset.patients
    n = len(patients)
    times = np.array([p.label.time for p in patients])
    events = np.array([p.label.event for p in patients], dtype=float)
    bt = BatchTensors(n=n, times=times, events=events)
    cfg = model.cfg
    if not cfg.uses_encoder:
        bt.vectors = np.stack([p.vector for p in patients])
        return bt

    t_max = max(len(p.steps) for p in patients)
    d = cfg.input_dim
    bt.X = np.zeros((n, t_max, d))
    bt.lengths = np.array([len(p.steps) for p in patients])
    if cfg.strategy == "gru_d":
        k = cfg.n_labs
        bt.masks = np.zeros((n, t_max, k))
        bt.eps_steps = np.zeros((n, t_max))
        for i, p in enumerate(patients):
            for t, step in enumerate(p.steps):
                bt.X[i, t] = step["x"]
                bt.masks[i, t] = step["mask"]
                bt.eps_steps[i, t] = step["eps"]
    else:
        for i, p in enumerate(patients):
            for t, step in enumerate(p.steps):
                bt.X[i, t] = step["x"]

    needs_presence = set(cfg.heads) & {HEAD_INTENSITY, HEAD_MISSINGNESS}
    if needs_presence:
        k = cfg.n_labs
        bt.gap_targets = np.ones((n, t_max))
        bt.mask_targets = np.zeros((n, t_max, k))
        bt.interval_mask = np.zeros((n, t_max))
        bt.censored_mask = np.zeros((n, t_max))
        for i, p in enumerate(patients):
            if p.targets is None:
                raise ValueError(f"{p.patient_id}: strategy {cfg.strategy!r} "
                                 "requires presence targets")
            for j, target in enumerate(p.targets):
                if target.censored:
                    bt.gap_targets[i, j] = target.next_gap
                    bt.censored_mask[i, j] = 1.0
                else:
                    bt.gap_targets[i, j] = target.next_gap
                    bt.mask_targets[i, j] = target.next_mask
                    bt.interval_mask[i, j] = 1.0
    return bt


# ---------------------------------------------------------------------------
# batched forward graphs
# ---------------------------------------------------------------------------

def _encode_batch(graph: ad.Graph, model: JointModel, batch: BatchTensors) -> list:
    """Run the encoder over the padded batch; returns the top-layer hidden
    node for every step."""
    cfg = model.cfg
    enc = cfg.encoder_cfg()
    b, t_max = batch.X.shape[0], batch.X.shape[1]
    states = nets.init_state_nodes(graph, enc, b)
    hs = []
    zero_means = graph.constant(np.zeros((b, cfg.n_labs))) if enc.cell == "gru_d" else None
    for t in range(t_max):
        kwargs = {}
        if enc.cell == "gru_d":
            kwargs = dict(mask=graph.constant(batch.masks[:, t, :]),
                          eps=graph.constant(batch.eps_steps[:, t:t + 1]),
                          means=zero_means)
        states = nets.rnn_step_nodes(graph, enc, "enc", states,
                                     graph.constant(batch.X[:, t, :]), **kwargs)
        hs.append(states[-1]["h"])
    return hs


def _last_state(graph: ad.Graph, hs: list, lengths: np.ndarray) -> ad.Node:
    b = hs[0].value.shape[0]
    d = hs[0].value.shape[1]
    out = None
    for t, h in enumerate(hs):
        sel = (lengths == t + 1).astype(float).reshape(b, 1)
        if not sel.any():
            continue
        piece = ad.mul(ad.broadcast_to(graph.constant(sel), (b, d)), h)
        out = piece if out is None else ad.add(out, piece)
    return out


@dataclass
class ForwardNodes:
    eta: ad.Node
    loss_surv: ad.Node
    presence_losses: dict = field(default_factory=dict)

    def loss_values(self) -> dict:
        out = {HEAD_SURVIVAL: self.loss_surv.value.item()}
        out.update({k: v.value.item() for k, v in self.presence_losses.items()})
        return out


def batch_forward(model: JointModel, batch: BatchTensors,
                  include_censored_interval: bool = False) -> tuple[ad.Graph, ForwardNodes]:
    """Build the full training graph for one minibatch: survival loss plus
    any enabled presence losses (per-patient averaged)."""
    cfg = model.cfg
    graph = ad.Graph(model.params)

    if not cfg.uses_encoder:
        h_last = graph.constant(batch.vectors)
        hs = None
    else:
        hs = _encode_batch(graph, model, batch)
        h_last = _last_state(graph, hs, batch.lengths)

    eta = nets.mlp_nodes(graph, cfg.surv_cfg(), "surv", h_last)
    loss_surv = cox_loss_nodes(graph, eta, batch.times, batch.events)
    out = ForwardNodes(eta=eta, loss_surv=loss_surv)

    needs_presence = set(cfg.heads) & {HEAD_INTENSITY, HEAD_MISSINGNESS}
    if needs_presence:
        b, t_max = batch.X.shape[0], batch.X.shape[1]
        h_stack = ad.concat(hs, axis=0)  # row t*B + i

        def flat(a):  # [B, T] -> [T*B, 1], matching the stack order
            return a.T.reshape(-1, 1)

        per_patient = batch.interval_mask.sum(axis=1)
        has_censored = batch.censored_mask.sum(axis=1)

        def patient_weights(norms, n_contrib):
            # 1 / (per-patient term count * number of contributing patients),
            # spread over that patient's rows
            w = np.where(norms > 0, 1.0 / (np.maximum(norms, 1.0) * n_contrib), 0.0)
            return flat(np.repeat(w[:, None], t_max, axis=1))

        n_contrib = int((per_patient > 0).sum())
        if n_contrib == 0:
            raise ValueError("no patient contributes a presence interval")
        weights = flat(batch.interval_mask) * patient_weights(per_patient, n_contrib)
        eps_values = flat(batch.gap_targets)

        if HEAD_INTENSITY in cfg.heads:
            eps_leaf = graph.input(eps_values)
            big_lambda, lam = presence.intensity_terms_nodes(
                graph, cfg.intensity_cfg(), "intensity", h_stack, eps_leaf)
            if include_censored_interval:
                # censored tails add their survival term Lambda(eps_cens) and
                # widen the per-patient average; patients whose only term is
                # the censored one now contribute too
                norms = per_patient + has_censored
                n_all = int((norms > 0).sum())
                w_unc = flat(batch.interval_mask) * patient_weights(norms, n_all)
                w_cens = flat(batch.censored_mask) * patient_weights(norms, n_all)
            else:
                w_unc, w_cens = weights, np.zeros_like(weights)
            loss_int = ad.sub(
                ad.reduce_sum(ad.mul(graph.constant(w_unc + w_cens), big_lambda)),
                ad.reduce_sum(ad.mul(graph.constant(w_unc), ad.log(lam))))
            out.presence_losses[HEAD_INTENSITY] = loss_int

        if HEAD_MISSINGNESS in cfg.heads:
            logits = presence.missingness_logits_nodes(
                graph, cfg.missingness_cfg(), "missingness", h_stack,
                graph.constant(eps_values))
            terms = presence.bce_terms_nodes(
                graph, logits,
                batch.mask_targets.transpose(1, 0, 2).reshape(-1, cfg.n_labs))
            w_wide = ad.broadcast_to(graph.constant(weights), (b * t_max, cfg.n_labs))
            out.presence_losses[HEAD_MISSINGNESS] = ad.reduce_sum(ad.mul(w_wide, terms))
    return graph, out


def predict_eta_from_tensors(model: JointModel, tensors: BatchTensors,
                             chunk: int = 512) -> np.ndarray:
    """Log-hazard shift per patient (no gradients kept)."""
    etas = []
    for start in range(0, tensors.n, chunk):
        idx = np.arange(start, min(start + chunk, tensors.n))
        batch = tensors.subset(idx)
        graph = ad.Graph(model.params)
        if not model.cfg.uses_encoder:
            h_last = graph.constant(batch.vectors)
        else:
            hs = _encode_batch(graph, model, batch)
            h_last = _last_state(graph, hs, batch.lengths)
        eta = nets.mlp_nodes(graph, model.cfg.surv_cfg(), "surv", h_last)
        etas.append(eta.value[:, 0].copy())
    return np.concatenate(etas)


def predict_eta(model: JointModel, dataset: PreparedDataset,
                chunk: int = 512) -> np.ndarray:
    return predict_eta_from_tensors(model, build_tensors(model, dataset), chunk)


def refit_breslow(model: JointModel, dataset: PreparedDataset):
    eta = predict_eta(model, dataset)
    labels = [p.label for p in dataset.patients]
    model.breslow = breslow_fit(eta, labels)
    return model.breslow


def survival_matrix(model: JointModel, eta: np.ndarray, grid: np.ndarray) -> np.ndarray:
    if model.breslow is None:
        raise ValueError("model has no fitted baseline hazard; train first")
    return np.stack([predict_survival(model.breslow, e, grid) for e in eta])


def evaluate(model: JointModel, dataset: PreparedDataset, horizons,
             n_bootstrap: int = 100, seed: int = 0,
             max_horizon: float | None = None) -> mx.EvaluationReport:
    """Bootstrap evaluation on a prepared test split: per-horizon C-index and
    IPCW Brier plus the integrated C-index."""
    labels = [p.label for p in dataset.patients]
    eta = predict_eta(model, dataset)
    horizons = [float(h) for h in horizons]
    max_h = float(max_horizon if max_horizon is not None else max(horizons))
    times = np.array([l.time for l in labels])
    events = np.array([l.event for l in labels])
    event_times = np.unique(times[(events == 1) & (times <= max_h)])
    grid = np.unique(np.concatenate([event_times, horizons]))
    curves = survival_matrix(model, eta, grid)
    cols = {h: int(np.nonzero(grid == h)[0][0]) for h in horizons}

    def report_fn(pred, lbls):
        out = {}
        for h in horizons:
            risk = 1.0 - pred[:, cols[h]]
            out[f"cindex@{h:g}"] = mx.cindex_td(risk, lbls, h)
            out[f"brier@{h:g}"] = mx.brier(pred[:, cols[h]], lbls, h)
        out["integrated"] = mx.cindex_integrated(pred, grid, lbls, max_h)
        return out

    summary = mx.bootstrap(report_fn, curves, labels, iters=n_bootstrap, seed=seed)
    tag = test_set_tag(dataset)
    return mx.EvaluationReport(
        horizons=horizons,
        cindex={h: summary[f"cindex@{h:g}"] for h in horizons},
        brier={h: summary[f"brier@{h:g}"] for h in horizons},
        integrated_cindex=summary["integrated"],
        n_bootstrap=n_bootstrap, test_tag=tag)


def point_integrated_cindex(model: JointModel, dataset: PreparedDataset,
                            max_horizon: float) -> float:
    labels = [p.label for p in dataset.patients]
    eta = predict_eta(model, dataset)
    times = np.array([l.time for l in labels])
    events = np.array([l.event for l in labels])
    grid = np.unique(times[(events == 1) & (times <= max_horizon)])
    if grid.size == 0:
        raise mx.MetricError("no events before the horizon")
    curves = survival_matrix(model, eta, grid)
    return mx.cindex_integrated(curves, grid, labels, max_horizon)


def test_set_tag(dataset: PreparedDataset) -> str:
    import hashlib
    ids = ",".join(sorted(p.patient_id for p in dataset.patients))
    return hashlib.sha256(ids.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------

def save_checkpoint(model: JointModel, path, train_config: dict | None = None):
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": model.cfg.to_dict(),
        "stats": model.stats.to_dict(),
        "seed": model.seed,
        "train_config": train_config or {},
        "breslow": None if model.breslow is None else {
            "event_times": model.breslow.event_times.tolist(),
            "cumulative_baseline": model.breslow.cumulative_baseline.tolist(),
        },
    }
    arrays = {f"param/{pid}": p.tensor for pid, p in model.params.items()}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta)), **arrays)


def load_checkpoint(path) -> tuple[JointModel, dict]:
    with np.load(path) as payload:
        meta = json.loads(str(payload["__meta__"]))
        if meta["format_version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta['format_version']}")
        cfg = ModelConfig.from_dict(meta["model_config"])
        stats = NormalizationStats.from_dict(meta["stats"])
        model = JointModel(cfg, stats, seed=meta["seed"])
        for pid in model.param_ids():
            model.params[pid].tensor = payload[f"param/{pid}"].copy()
        if meta["breslow"] is not None:
            model.breslow = BreslowTable(
                event_times=np.asarray(meta["breslow"]["event_times"]),
                cumulative_baseline=np.asarray(meta["breslow"]["cumulative_baseline"]))
    return model, meta.get("train_config", {})

"""Encoder-decoder forecaster, training loop, loss, metrics, optimizer.

The encoder runs the gated graph blocks over the history window; the
decoder sees the encoder's final-layer sequence prepended with a learned
start embedding and predicts all horizon steps in one pass from its last
position (no autoregressive feedback). By default the decoder reuses the
encoder's adjacency sequence instead of re-filtering its own embeddings
(``decoder_alpha_mode``)."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import block, data, kernels, serialize
from .tensor import (ContractError, DimensionError, Tape, Tensor, as_tensor,
                     concat)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
EPS_MAPE = 1e-3


@dataclass
class ModelConfig:
    n_encoder: int = 4
    n_decoder: int = 4
    history_p: int = 12
    horizon_k: int = 1
    d_model: int = 32
    d_state: int = 16
    expansion_factor: int = 2
    gru_hidden: int = 64
    variant: str = "full"
    decoder_alpha_mode: str = "reuse_last"

    def __post_init__(self):
        if self.n_encoder < 1 or self.n_decoder < 1:
            raise ContractError("need at least one encoder and one decoder block")
        if self.history_p < 1 or self.horizon_k < 1:
            raise ContractError("history_p and horizon_k must be >= 1")
        if self.variant not in block.VARIANTS:
            raise ContractError(f"unknown variant {self.variant!r}")
        if self.decoder_alpha_mode not in ("reuse_last", "recompute"):
            raise ContractError(
                f"unknown decoder_alpha_mode {self.decoder_alpha_mode!r}"
            )


@dataclass
class TrainConfig:
    batch_size: int = 32
    lr_init: float = 1e-3
    weight_decay: float = 5e-2
    lr_min: float = 1e-5
    cosine_T_max: int = 50
    epochs: int = 300
    seed: int = 0

    def __post_init__(self):
        for name in ("batch_size", "lr_init", "lr_min", "cosine_T_max", "epochs"):
            if getattr(self, name) <= 0:
                raise ContractError(f"{name} must be positive")
        if self.weight_decay < 0:
            raise ContractError("weight_decay must be non-negative")
        if self.lr_min >= self.lr_init:
            raise ContractError("lr_min must be below lr_init")


@dataclass
class MetricsReport:
    rmse: float
    mae: float
    mape: float  # percent
    scenarios: dict = field(default_factory=dict)


@dataclass
class ModelWeights:
    embed_w: Tensor
    embed_b: Tensor
    tod_table: Tensor
    encoder: list
    decoder: list
    start_token: Tensor
    head_w: Tensor
    head_b: Tensor
    n_nodes: int
    feat_dim: int
    steps_per_day: int


def init_model(rng, cfg: ModelConfig, n_nodes, feat_dim, steps_per_day) -> ModelWeights:
    def mat(rows, cols, s=None):
        s = s if s is not None else 1.0 / np.sqrt(rows)
        return Tensor(rng.normal(0.0, s, size=(rows, cols)), trainable=True)

    def blk():
        return block.init_block(rng, cfg.d_model, n_nodes, d_state=cfg.d_state,
                                expansion_factor=cfg.expansion_factor,
                                gru_hidden=cfg.gru_hidden)

    return ModelWeights(
        embed_w=mat(feat_dim, cfg.d_model),
        embed_b=Tensor(np.zeros(cfg.d_model), trainable=True),
        tod_table=Tensor(rng.normal(0.0, 0.02, size=(steps_per_day, cfg.d_model)),
                         trainable=True),
        encoder=[blk() for _ in range(cfg.n_encoder)],
        decoder=[blk() for _ in range(cfg.n_decoder)],
        start_token=Tensor(rng.normal(0.0, 0.02, size=cfg.d_model), trainable=True),
        head_w=mat(cfg.d_model, cfg.horizon_k * feat_dim),
        head_b=Tensor(np.zeros(cfg.horizon_k * feat_dim), trainable=True),
        n_nodes=n_nodes,
        feat_dim=feat_dim,
        steps_per_day=steps_per_day,
    )


def named_parameters(weights: ModelWeights):
    items = [
        ("embed_w", weights.embed_w), ("embed_b", weights.embed_b),
        ("tod_table", weights.tod_table), ("start_token", weights.start_token),
        ("head_w", weights.head_w), ("head_b", weights.head_b),
    ]
    for i, blk in enumerate(weights.encoder):
        items.extend(block.named_parameters(blk, prefix=f"enc.{i}."))
    for i, blk in enumerate(weights.decoder):
        items.extend(block.named_parameters(blk, prefix=f"dec.{i}."))
    return items


def model_forward(x_window, weights: ModelWeights, cfg: ModelConfig,
                  tod_idx=None, static_alpha=None):
    """Forecast (B, k, N, d) from a history window (B, p, N, d).

    tod_idx, when given, is a (B, p) integer array of time-of-day slots
    added to the input embedding.
    """
    x = as_tensor(x_window)
    if x.ndim != 4:
        raise DimensionError(f"expected (batch, p, N, d), got {x.shape}")
    B, p, N, d = x.shape
    if p != cfg.history_p:
        raise ContractError(f"window length {p} != configured history_p {cfg.history_p}")
    if N != weights.n_nodes or d != weights.feat_dim:
        raise DimensionError(
            f"window {x.shape} does not match model ({weights.n_nodes} nodes, "
            f"{weights.feat_dim} features)"
        )

    h = x @ weights.embed_w + weights.embed_b
    if tod_idx is not None:
        tod_idx = np.asarray(tod_idx, dtype=np.intp)
        if tod_idx.max(initial=0) >= weights.steps_per_day:
            raise ContractError(
                f"time-of-day index {int(tod_idx.max())} exceeds the model's "
                f"daily grid of {weights.steps_per_day} slots (dataset "
                "interval does not match the one trained on)")
        tod = weights.tod_table[tod_idx]
        h = h + tod.reshape(B, p, 1, -1)

    alphas = None
    for blk in weights.encoder:
        h, alphas = block.block_forward(h, blk, variant=cfg.variant,
                                        static_alpha=static_alpha)

    start = weights.start_token.reshape(1, 1, 1, -1) + Tensor(
        np.zeros((B, 1, N, weights.start_token.shape[0])))
    dec_h = concat([start, h], axis=1)

    dec_override = None
    if cfg.variant != "kfgn_off" and cfg.decoder_alpha_mode == "reuse_last":
        dec_override = concat([alphas[:, :1], alphas], axis=1)
        if alphas.row_stochastic_hint:
            dec_override._row_stochastic = True
    for blk in weights.decoder:
        dec_h, _ = block.block_forward(dec_h, blk, variant=cfg.variant,
                                       static_alpha=static_alpha,
                                       alphas_override=dec_override)

    last = dec_h[:, -1]
    out = last @ weights.head_w + weights.head_b
    return out.reshape(B, N, cfg.horizon_k, d).transpose((0, 2, 1, 3))


def mse_loss(pred, truth):
    pred, truth = as_tensor(pred), as_tensor(truth)
    if pred.shape != truth.shape:
        raise DimensionError(f"mse_loss shapes differ: {pred.shape} vs {truth.shape}")
    diff = pred - truth
    return (diff * diff).mean()


def compute_metrics(pred, truth, mask=None, eps_mape=EPS_MAPE) -> MetricsReport:
    """RMSE / MAE / MAPE over (optionally masked) entries.

    mask is boolean per sample-step, i.e. shaped like the leading dims of
    pred; it is broadcast over nodes and features. MAPE is in percent and
    skips entries whose |truth| falls below eps_mape (meant to be applied
    to denormalized values)."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise DimensionError(f"metric shapes differ: {pred.shape} vs {truth.shape}")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != pred.shape:
            lead = pred.shape[:mask.ndim]
            if mask.shape != lead:
                raise DimensionError(
                    f"mask shape {mask.shape} does not lead pred shape {pred.shape}"
                )
            mask = np.broadcast_to(
                mask.reshape(mask.shape + (1,) * (pred.ndim - mask.ndim)), pred.shape)
        if not mask.any():
            raise ContractError("metric mask selects no entries")
        pred, truth = pred[mask], truth[mask]

    err = pred - truth
    rmse = float(np.sqrt(np.mean(err * err)))
    mae = float(np.mean(np.abs(err)))
    keep = np.abs(truth) >= eps_mape
    if keep.any():
        mape = float(100.0 * np.mean(np.abs(err[keep]) / np.abs(truth[keep])))
    else:
        mape = 0.0
    return MetricsReport(rmse=rmse, mae=mae, mape=mape)


def adamw_step(params, grads, moments, t, train_cfg: TrainConfig, lr=None):
    """Decoupled-weight-decay Adam update, in place on the parameters.

    moments maps id(param) -> (m, v) and must start empty (t starts at 1).
    grads maps the parameter object to its gradient array.
    """
    lr = train_cfg.lr_init if lr is None else lr
    wd = train_cfg.weight_decay
    bc1 = 1.0 - ADAM_BETA1 ** t
    bc2 = 1.0 - ADAM_BETA2 ** t
    for p in params:
        g = grads[p]
        m, v = moments.get(id(p), (np.zeros_like(p.data), np.zeros_like(p.data)))
        m = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * g
        v = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * (g * g)
        moments[id(p)] = (m, v)
        update = (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
        p.data = p.data - lr * (update + wd * p.data)
    return params


def cosine_lr(epoch, train_cfg: TrainConfig):
    """Cosine annealing from lr_init to lr_min over cosine_T_max epochs,
    clamped at lr_min afterwards (no warm restarts)."""
    if epoch < 0:
        raise ContractError(f"epoch must be >= 0, got {epoch}")
    t = min(epoch, train_cfg.cosine_T_max)
    span = train_cfg.lr_init - train_cfg.lr_min
    return train_cfg.lr_min + 0.5 * span * (
        1.0 + np.cos(np.pi * t / train_cfg.cosine_T_max))


@dataclass
class WindowSet:
    """Materialized (windows, horizon targets, clock indices, target times)."""

    x: np.ndarray          # (W, p, N, d)
    y: np.ndarray          # (W, k, N, d)
    tod: np.ndarray        # (W, p) ints
    target_times: list     # per window: list of k datetimes

    @property
    def count(self):
        return self.x.shape[0]


def build_windows(split: data.STGDataset, p, k, norm=None) -> WindowSet:
    xs, ys, tods, times = [], [], [], []
    values = split.values if norm is None else data.minmax_normalize(split.values, norm)
    base_tod = split.time_of_day_index(0)
    spd = split.steps_per_day
    for start in range(data.window_count(split.n_steps, p, k)):
        xs.append(values[start:start + p])
        ys.append(values[start + p:start + p + k])
        tods.append([(base_tod + start + j) % spd for j in range(p)])
        times.append([split.timestamp(start + p + j) for j in range(k)])
    if not xs:
        raise ContractError(
            f"split of {split.n_steps} steps yields no (p={p}, k={k}) windows")
    return WindowSet(x=np.stack(xs), y=np.stack(ys),
                     tod=np.asarray(tods, dtype=np.intp), target_times=times)


def predict_windows(weights, cfg, ws: WindowSet, static_alpha=None, batch_size=64):
    """Forward over a window set in batches; returns (W, k, N, d)."""
    outs = []
    for lo in range(0, ws.count, batch_size):
        hi = min(lo + batch_size, ws.count)
        pred = model_forward(ws.x[lo:hi], weights, cfg, tod_idx=ws.tod[lo:hi],
                             static_alpha=static_alpha)
        outs.append(pred.data)
    return np.concatenate(outs, axis=0)


def dataset_mse(weights, cfg, ws: WindowSet, static_alpha=None, batch_size=64):
    pred = predict_windows(weights, cfg, ws, static_alpha, batch_size)
    err = pred - ws.y
    return float(np.mean(err * err))


def persistence_rmse(ws: WindowSet):
    """Repeat-last-value baseline on the same windows."""
    pred = np.repeat(ws.x[:, -1:], ws.y.shape[1], axis=1)
    err = pred - ws.y
    return float(np.sqrt(np.mean(err * err)))


@dataclass
class HistoryRow:
    epoch: int
    lr: float
    train_loss: float
    val_loss: float


@dataclass
class FitResult:
    weights: ModelWeights
    history: list
    norm: data.NormalizationState
    best_epoch: int
    initial_train_loss: float
    static_alpha: np.ndarray | None


def fit(dataset: data.STGDataset, model_cfg: ModelConfig,
        train_cfg: TrainConfig, log=None) -> FitResult:
    """Train on the 6:2:2 split with AdamW and epoch-level cosine
    annealing; returns the best-validation weights and the loss history.
    Fully reproducible from train_cfg.seed."""
    if dataset.n_steps == 0:
        raise ContractError("empty dataset")
    with kernels.single_thread_blas():
        return _fit_single_threaded(dataset, model_cfg, train_cfg, log)


def _fit_single_threaded(dataset, model_cfg, train_cfg, log):
    p, k = model_cfg.history_p, model_cfg.horizon_k
    train_split, val_split, _ = data.split_dataset(dataset, p=p, k=k)
    norm = data.minmax_fit(train_split.values)
    train_ws = build_windows(train_split, p, k, norm)
    val_ws = build_windows(val_split, p, k, norm)
    static_alpha = dataset.static_adjacency

    rng = np.random.default_rng(train_cfg.seed)
    weights = init_model(rng, model_cfg, dataset.n_nodes, dataset.n_features,
                         dataset.steps_per_day)
    params = [t for _, t in named_parameters(weights)]
    moments = {}
    step = 0

    eval_bs = max(train_cfg.batch_size, 256)
    initial_train_loss = dataset_mse(weights, model_cfg, train_ws, static_alpha,
                                     eval_bs)
    history = []
    best_val = np.inf
    best_epoch = -1
    best_state = None

    n_train = train_ws.count
    for epoch in range(train_cfg.epochs):
        lr = cosine_lr(epoch, train_cfg)
        perm = rng.permutation(n_train)
        loss_sum = 0.0
        for lo in range(0, n_train, train_cfg.batch_size):
            idx = perm[lo:lo + train_cfg.batch_size]
            xb, yb, todb = train_ws.x[idx], train_ws.y[idx], train_ws.tod[idx]
            tape = Tape()
            with tape:
                for prm in params:
                    tape.watch(prm)
                pred = model_forward(xb, weights, model_cfg, tod_idx=todb,
                                     static_alpha=static_alpha)
                loss = mse_loss(pred, Tensor(yb))
            grads = tape.backward(loss)
            step += 1
            adamw_step(params, grads, moments, step, train_cfg, lr=lr)
            loss_sum += loss.item() * len(idx)
        train_loss = loss_sum / n_train
        val_loss = dataset_mse(weights, model_cfg, val_ws, static_alpha,
                               eval_bs)
        history.append(HistoryRow(epoch=epoch, lr=float(lr),
                                  train_loss=train_loss, val_loss=val_loss))
        if log is not None:
            log(history[-1])
        if val_loss < best_val:
            best_val = val_loss
            best_epoch = epoch
            best_state = {name: t.data.copy() for name, t in named_parameters(weights)}

    if best_state is not None:
        for name, t in named_parameters(weights):
            t.data = best_state[name]
    return FitResult(weights=weights, history=history, norm=norm,
                     best_epoch=best_epoch, initial_train_loss=initial_train_loss,
                     static_alpha=static_alpha)


def evaluate_windows(weights, cfg, ws: WindowSet, norm, static_alpha=None,
                     with_scenarios=True, batch_size=64) -> MetricsReport:
    """Metrics on denormalized predictions, with per-scenario sub-reports
    for every scenario that selects at least one window step."""
    pred = data.minmax_denormalize(
        predict_windows(weights, cfg, ws, static_alpha, batch_size), norm)
    truth = data.minmax_denormalize(ws.y, norm)
    report = compute_metrics(pred, truth)
    if with_scenarios:
        flat_times = [t for times in ws.target_times for t in times]
        k = ws.y.shape[1]
        for name in data.SCENARIOS:
            m = data.scenario_mask(flat_times, name).reshape(ws.count, k)
            if m.any():
                report.scenarios[name] = compute_metrics(pred, truth, mask=m)
    return report


def config_hash(model_cfg: ModelConfig, train_cfg: TrainConfig) -> str:
    blob = json.dumps({"model": asdict(model_cfg), "train": asdict(train_cfg)},
                      sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def write_history_csv(path, history, model_cfg, train_cfg, version="0.1.0"):
    with open(path, "w") as f:
        f.write(f"# stgssm v{version} seed={train_cfg.seed} "
                f"config={config_hash(model_cfg, train_cfg)}\n")
        f.write("epoch,lr,train_loss,val_loss\n")
        for row in history:
            f.write(f"{row.epoch},{row.lr!r},{row.train_loss!r},{row.val_loss!r}\n")


def save_model(path, result: FitResult, model_cfg, train_cfg, metrics=None):
    tensors = {name: t.data for name, t in named_parameters(result.weights)}
    manifest = {
        "model": asdict(model_cfg),
        "train": asdict(train_cfg),
        "config_hash": config_hash(model_cfg, train_cfg),
        "best_epoch": result.best_epoch,
        "n_nodes": result.weights.n_nodes,
        "feat_dim": result.weights.feat_dim,
        "steps_per_day": result.weights.steps_per_day,
        "norm": {
            "feat_min": result.norm.feat_min.tolist(),
            "feat_max": result.norm.feat_max.tolist(),
        },
        "static_alpha": None if result.static_alpha is None
        else np.asarray(result.static_alpha).tolist(),
        "metrics": metrics or {},
    }
    serialize.save_checkpoint(path, tensors, manifest)


def load_model(path):
    """Rebuild (weights, model_cfg, train_cfg, norm, static_alpha, manifest)
    from a checkpoint."""
    tensors, manifest = serialize.load_checkpoint(path)
    model_cfg = ModelConfig(**manifest["model"])
    train_cfg = TrainConfig(**manifest["train"])
    rng = np.random.default_rng(0)  # structure only; arrays are overwritten
    weights = init_model(rng, model_cfg, manifest["n_nodes"], manifest["feat_dim"],
                         manifest["steps_per_day"])
    for name, t in named_parameters(weights):
        if name not in tensors:
            raise ContractError(f"checkpoint missing tensor {name}")
        if tensors[name].shape != t.data.shape:
            raise ContractError(
                f"checkpoint tensor {name} has shape {tensors[name].shape}, "
                f"expected {t.data.shape}")
        t.data = tensors[name]
    norm = data.NormalizationState(
        feat_min=np.asarray(manifest["norm"]["feat_min"]),
        feat_max=np.asarray(manifest["norm"]["feat_max"]),
    )
    static = manifest.get("static_alpha")
    static = None if static is None else np.asarray(static)
    return weights, model_cfg, train_cfg, norm, static, manifest

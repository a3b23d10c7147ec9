"""Adam training over patients, evaluation and checkpoint files."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numba
import numpy as np

from . import autodiff as ad
from . import evidential, model, survival
from .dataio import BinEdges, Dataset, discretize_times, label_for

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 2e-4
    weight_decay: float = 1e-5
    epochs: int = 3
    seed: int = 0
    grad_accum: int = 1
    hazard_eps: float = survival.HAZARD_EPS
    # auxiliary per-modality evidential losses are not implemented; must stay off
    evidence_aux_loss: bool = False

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.grad_accum < 1:
            raise ValueError(f"grad_accum must be >= 1, got {self.grad_accum}")
        if not 0 < self.hazard_eps < 0.5:
            raise ValueError(f"hazard_eps must lie in (0, 0.5), got {self.hazard_eps}")
        if self.evidence_aux_loss:
            raise NotImplementedError("auxiliary evidential losses are not implemented")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: model.Params) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()})


@numba.njit(cache=True)
def _adam_kernel(p, g, m, v, step_size, v_corr, b1, b2, eps, wd):
    p, g, m, v = p.reshape(-1), g.reshape(-1), m.reshape(-1), v.reshape(-1)
    for i in range(p.size):
        gi = g[i] + wd * p[i]
        m[i] = b1 * m[i] + (1.0 - b1) * gi
        v[i] = b2 * v[i] + (1.0 - b2) * gi * gi
        p[i] -= step_size * m[i] / (math.sqrt(v[i] * v_corr) + eps)


def adam_step(params: model.Params, grads: dict, state: AdamState, config: TrainConfig) -> None:
    """One bias-corrected Adam update in place; weight decay is added to the gradient."""
    missing = set(params) - set(grads)
    if missing:
        raise TrainingError(f"missing gradients for {sorted(missing)}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    step_size = config.learning_rate / (1.0 - b1**state.step)
    v_corr = 1.0 / (1.0 - b2**state.step)
    for name, p in params.items():
        g = grads[name]
        g = g.data if isinstance(g, ad.Tensor) else g
        if g.shape != p.shape:
            raise TrainingError(f"gradient for {name} has shape {g.shape}, parameter is {p.shape}")
        _adam_kernel(p, np.ascontiguousarray(g, dtype=np.float64), state.m[name], state.v[name],
                     step_size, v_corr, b1, b2, state.eps, config.weight_decay)


# ---------------------------------------------------------------------------
# per-patient computation


def patient_loss(record, label, dataset: Dataset, params: model.Params, mcfg: model.ModelConfig,
                 dropout_rng=None, hazard_eps: float = survival.HAZARD_EPS):
    """Forward, evidential fusion and NLL on a fresh tape; returns (tape, loss, fusion)."""
    tape = ad.Tape()
    P = model.bind(params, tape)
    out = model.forward(record, dataset.gene_sets, P, mcfg, dropout_rng)
    fused = evidential.fuse_tensors(out.e_h, out.e_g, out.s_risk)
    loss = survival.nll_loss(fused.o_risk, label, hazard_eps)
    return tape, loss, fused


def predict(record, dataset: Dataset, params: model.Params, mcfg: model.ModelConfig):
    """Evaluation-mode forward without a tape."""
    P = model.bind(params, None)
    out = model.forward(record, dataset.gene_sets, P, mcfg, None)
    fused = evidential.fuse_tensors(out.e_h, out.e_g, out.s_risk)
    return out, fused


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    model_config: model.ModelConfig
    bin_edges: BinEdges
    d_h: int
    gene_set_sizes: list[int]
    params: model.Params
    meta: dict = field(default_factory=dict)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    index, offset = {}, 0
    for name, arr in ckpt.params.items():
        rows, cols = arr.shape
        index[name] = [offset, rows, cols]
        offset += rows * cols * 8
    header = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": ckpt.model_config.to_dict(),
        "bin_edges": list(ckpt.bin_edges.edges),
        "d_h": ckpt.d_h,
        "gene_set_sizes": list(ckpt.gene_set_sizes),
        "meta": ckpt.meta,
        "tensors": index,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, separators=(",", ":")).encode() + b"\n")
        for arr in ckpt.params.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise CheckpointError(f"{path}: no header line")
    try:
        header = json.loads(raw[:nl])
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    if not isinstance(header, dict) or "format_version" not in header:
        raise CheckpointError(f"{path}: corrupt header (no format_version)")
    if header["format_version"] != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {header['format_version']}")
    try:
        mcfg = model.ModelConfig.from_dict(header["model_config"])
        edges = BinEdges(tuple(float(x) for x in header["bin_edges"]))
        index = header["tensors"]
        d_h, sizes = int(header["d_h"]), [int(s) for s in header["gene_set_sizes"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    payload = memoryview(raw)[nl + 1:]
    expected = sum(r * c * 8 for _, r, c in index.values())
    if len(payload) != expected:
        raise CheckpointError(f"{path}: payload length {len(payload)} bytes, header implies {expected}")
    params = {}
    for name, (off, rows, cols) in index.items():
        if off + rows * cols * 8 > len(payload):
            raise CheckpointError(f"{path}: tensor {name} runs past the payload")
        params[name] = np.frombuffer(payload, dtype="<f8", count=rows * cols, offset=off).reshape(rows, cols).astype(np.float64)
    shapes = model.param_shapes(mcfg, d_h, sizes)
    if {k: v.shape for k, v in params.items()} != shapes:
        raise CheckpointError(f"{path}: tensors do not match the declared model config")
    return Checkpoint(mcfg, edges, d_h, sizes, params, header.get("meta", {}))


# ---------------------------------------------------------------------------
# training and evaluation


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_cindex: float


def _check_dims(dataset: Dataset, d_h: int, sizes) -> None:
    if dataset.wsi_dim != d_h or dataset.gene_sets.sizes() != list(sizes):
        raise ad.ShapeError(
            f"dataset dims (wsi_dim={dataset.wsi_dim}, gene sets={dataset.gene_sets.sizes()}) "
            f"do not match the model (wsi_dim={d_h}, gene sets={list(sizes)})"
        )


def evaluate(ckpt: Checkpoint, dataset: Dataset, indices=None) -> dict:
    """Eval-mode risks, hazards and uncertainties for ``indices`` (all patients by default)."""
    _check_dims(dataset, ckpt.d_h, ckpt.gene_set_sizes)
    idx = list(range(len(dataset))) if indices is None else [int(i) for i in indices]
    ids, risks, o_risk, u_h, u_g, u_f = [], [], [], [], [], []
    for i in idx:
        rec = dataset[i]
        _, fused = predict(rec, dataset, ckpt.params, ckpt.model_config)
        hz = fused.o_risk.data[0]
        ids.append(rec.id)
        o_risk.append(hz.copy())
        risks.append(survival.scalar_risk(hz))
        u_h.append(fused.u_h.item())
        u_g.append(fused.u_g.item())
        u_f.append(fused.u_fused.item())
    times, events = dataset.times(idx), dataset.events(idx)
    try:
        conc = survival.concordance(risks, times, events)
        c, pairs = conc.c_index, conc.n_pairs
    except survival.UndefinedMetricError:
        c, pairs = float("nan"), 0
    return {
        "indices": idx,
        "ids": ids,
        "times": times,
        "events": events,
        "risks": np.array(risks),
        "o_risk": np.array(o_risk).reshape(len(idx), ckpt.model_config.K),
        "u_h": np.array(u_h),
        "u_g": np.array(u_g),
        "u_fused": np.array(u_f),
        "c_index": c,
        "n_comparable_pairs": pairs,
    }


def train(dataset: Dataset, fold: tuple, mcfg: model.ModelConfig, tcfg: TrainConfig,
          meta: dict | None = None) -> tuple[Checkpoint, list[EpochRecord]]:
    """Train on ``fold = (train_indices, val_indices)``."""
    train_idx = [int(i) for i in fold[0]]
    val_idx = [int(i) for i in fold[1]]
    n = len(dataset)
    if not train_idx or any(not 0 <= i < n for i in train_idx + val_idx):
        raise ValueError("fold indices out of range or empty training set")
    if mcfg.n_sets != dataset.gene_sets.n_sets:
        raise ValueError(f"model has n_sets={mcfg.n_sets}, dataset has {dataset.gene_sets.n_sets} gene sets")
    edges, _ = discretize_times(dataset, mcfg.K, train_idx)
    labels = [label_for(edges, r) for r in dataset.records]

    sizes = dataset.gene_sets.sizes()
    params = model.init_params(mcfg, dataset.wsi_dim, sizes, tcfg.seed)
    state = AdamState.zeros_like(params)
    order_rng = np.random.default_rng([tcfg.seed, 1])
    dropout_rng = np.random.default_rng([tcfg.seed, 2])
    ckpt = Checkpoint(mcfg, edges, dataset.wsi_dim, sizes, params, dict(meta or {}))

    history = []
    for epoch in range(1, tcfg.epochs + 1):
        order = order_rng.permutation(train_idx)
        total = 0.0
        pending, n_pending = None, 0
        for i in order:
            rec = dataset[i]
            tape, loss, _ = patient_loss(rec, labels[i], dataset, params, mcfg, dropout_rng, tcfg.hazard_eps)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss {value} at epoch {epoch} for patient {rec.id}")
            total += value
            grads = {k: g.data for k, g in tape.backward(loss).items()}
            if tcfg.grad_accum == 1:
                adam_step(params, grads, state, tcfg)
                continue
            if pending is None:
                pending = grads
            else:
                for k in pending:
                    pending[k] += grads[k]
            n_pending += 1
            if n_pending == tcfg.grad_accum:
                adam_step(params, {k: g / n_pending for k, g in pending.items()}, state, tcfg)
                pending, n_pending = None, 0
        if pending is not None:
            adam_step(params, {k: g / n_pending for k, g in pending.items()}, state, tcfg)

        val_c = evaluate(ckpt, dataset, val_idx)["c_index"] if val_idx else float("nan")
        history.append(EpochRecord(epoch, total / len(order), val_c))
        log.info("epoch %d loss %.5f val c-index %.4f", epoch, total / len(order), val_c)
    return ckpt, history

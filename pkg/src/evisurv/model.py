"""Genomic-guided co-attention network over WSI and gene-set bags.

All layers use the row-vector convention ``y = x @ W.T + b`` with ``W`` stored
as ``out x in``. Parameters live in a plain ``dict`` of float64 arrays; a
forward pass either runs on constants (evaluation) or wraps every parameter as
a leaf of a :class:`~evisurv.autodiff.Tape` (training).
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dataio import GeneSetMap, PatientRecord

Params = dict  # name -> np.ndarray


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 256
    K: int = 4
    n_sets: int = 6
    heads: int = 4
    ffn_dim: int = 512
    encoder_layers: int = 2
    dropout_rate: float = 0.25
    attn_hidden: int = 256
    gene_hidden: int = 256
    coattn_heads: int = 1

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "dropout_rate":
                if not 0.0 <= v < 1.0:
                    raise ValueError(f"dropout_rate must lie in [0, 1), got {v}")
            elif v < 1:
                raise ValueError(f"{f.name} must be >= 1, got {v}")
        if self.encoder_layers != 2:
            raise ValueError("encoder_layers is fixed at 2")
        for name in ("heads", "coattn_heads"):
            if self.d_model % getattr(self, name):
                raise ValueError(f"d_model={self.d_model} is not divisible by {name}={getattr(self, name)}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ForwardOutput:
    s_risk: Tensor  # 1 x K
    e_h: Tensor  # 1 x K
    e_g: Tensor  # 1 x K
    R_h: Tensor
    R_g: Tensor
    R_fusion: Tensor
    A_coat: Tensor  # n_sets x M
    A_h: Tensor  # 1 x n_sets
    A_g: Tensor  # 1 x n_sets


# ---------------------------------------------------------------------------
# parameters


def param_shapes(config: ModelConfig, d_h: int, gene_set_sizes) -> dict[str, tuple[int, int]]:
    d, L, F = config.d_model, config.attn_hidden, config.ffn_dim
    shapes: dict[str, tuple[int, int]] = {
        "wsi_proj.weight": (d, d_h),
        "wsi_proj.bias": (1, d),
    }
    if len(gene_set_sizes) != config.n_sets:
        raise ValueError(f"expected {config.n_sets} gene-set sizes, got {len(gene_set_sizes)}")
    for c, n_c in enumerate(gene_set_sizes):
        shapes[f"gene.{c}.fc1.weight"] = (config.gene_hidden, n_c)
        shapes[f"gene.{c}.fc1.bias"] = (1, config.gene_hidden)
        shapes[f"gene.{c}.fc2.weight"] = (d, config.gene_hidden)
        shapes[f"gene.{c}.fc2.bias"] = (1, d)
    for w in ("W_q", "W_k", "W_v"):
        shapes[f"coattn.{w}"] = (d, d)
    for path in ("h", "g"):
        for layer in range(config.encoder_layers):
            pre = f"enc_{path}.{layer}"
            for w in ("W_q", "W_k", "W_v", "W_o"):
                shapes[f"{pre}.attn.{w}"] = (d, d)
                shapes[f"{pre}.attn.b_{w[-1]}"] = (1, d)
            shapes[f"{pre}.ln1.gamma"] = (1, d)
            shapes[f"{pre}.ln1.beta"] = (1, d)
            shapes[f"{pre}.ffn.fc1.weight"] = (F, d)
            shapes[f"{pre}.ffn.fc1.bias"] = (1, F)
            shapes[f"{pre}.ffn.fc2.weight"] = (d, F)
            shapes[f"{pre}.ffn.fc2.bias"] = (1, d)
            shapes[f"{pre}.ln2.gamma"] = (1, d)
            shapes[f"{pre}.ln2.beta"] = (1, d)
        shapes[f"pool_{path}.W_rho"] = (1, L)
        shapes[f"pool_{path}.V_rho"] = (L, d)
        shapes[f"pool_{path}.U_rho"] = (L, d)
        shapes[f"pool_{path}.W_zeta"] = (d, d)
    shapes["fusion.fc1.weight"] = (d, 2 * d)
    shapes["fusion.fc1.bias"] = (1, d)
    shapes["fusion.fc2.weight"] = (d, d)
    shapes["fusion.fc2.bias"] = (1, d)
    for head in ("risk", "evid_h", "evid_g"):
        shapes[f"{head}.weight"] = (config.K, d)
        shapes[f"{head}.bias"] = (1, config.K)
    return shapes


def _is_bias(name: str) -> bool:
    last = name.rsplit(".", 1)[-1]
    return last in ("bias", "beta") or last.startswith("b_")


def xavier_bound(shape: tuple[int, int]) -> float:
    fan_out, fan_in = shape
    return math.sqrt(6.0 / (fan_in + fan_out))


def init_params(config: ModelConfig, d_h: int, gene_set_sizes, seed: int) -> Params:
    """Xavier-uniform weights, zero biases, unit layer-norm gains."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config, d_h, gene_set_sizes).items():
        if name.endswith("gamma"):
            params[name] = np.ones(shape)
        elif _is_bias(name):
            params[name] = np.zeros(shape)
        else:
            bound = xavier_bound(shape)
            params[name] = rng.uniform(-bound, bound, size=shape)
    return params


def bind(params: Params, tape: ad.Tape | None) -> dict[str, Tensor]:
    """Wrap raw arrays as tape leaves (training) or constants (evaluation)."""
    if tape is None:
        return {k: Tensor(v, name=k) for k, v in params.items()}
    return {k: tape.leaf(v, k) for k, v in params.items()}


# ---------------------------------------------------------------------------
# layers


def linear(x: Tensor, P: dict, prefix: str) -> Tensor:
    return ad.add(ad.matmul_t(x, P[f"{prefix}.weight"]), P[f"{prefix}.bias"])


class Dropout:
    """Inverted dropout with its own seeded stream."""

    def __init__(self, rate: float, rng: np.random.Generator | None):
        self.rate = rate
        self.rng = rng

    def __call__(self, x: Tensor) -> Tensor:
        if self.rng is None or self.rate == 0.0:
            return x
        keep = self.rng.random(x.shape) >= self.rate
        return ad.mul(x, Tensor(keep / (1.0 - self.rate)))


def encode_genes(gene_values, gene_sets: GeneSetMap, P: dict) -> Tensor:
    """One ``d_model`` row per gene category, packed in category order."""
    gene_values = np.asarray(gene_values, dtype=np.float64).reshape(-1)
    if gene_values.size != gene_sets.n_genes:
        raise ValueError(f"gene vector has {gene_values.size} values, map expects {gene_sets.n_genes}")
    rows = []
    for c in range(gene_sets.n_sets):
        x = Tensor(gene_values[gene_sets.members(c)])
        hidden = ad.relu(linear(x, P, f"gene.{c}.fc1"))
        rows.append(linear(hidden, P, f"gene.{c}.fc2"))
    return ad.concat(rows, axis=0)


def _attention(q: Tensor, k: Tensor, v: Tensor, heads: int) -> tuple[Tensor, list[Tensor]]:
    d = q.cols
    dk = d // heads
    outs, weights = [], []
    for h in range(heads):
        qs, ks, vs = (ad.slice_cols(t, h * dk, (h + 1) * dk) if heads > 1 else t for t in (q, k, v))
        a = ad.row_softmax(ad.scale(ad.matmul_t(qs, ks), 1.0 / math.sqrt(dk)))
        weights.append(a)
        outs.append(ad.matmul(a, vs))
    return (outs[0] if heads == 1 else ad.concat(outs, axis=1)), weights


def coattention(G_bag: Tensor, H_proj: Tensor, P: dict, heads: int = 1) -> tuple[Tensor, Tensor]:
    """Genes query the WSI bag; returns (H_hat, A_coat).

    With ``heads > 1`` the returned attention is the head average.
    """
    if G_bag.cols != H_proj.cols:
        raise ad.ShapeError(f"coattention: gene width {G_bag.cols} != WSI width {H_proj.cols}")
    Q = ad.matmul_t(G_bag, P["coattn.W_q"])
    Kk = ad.matmul_t(H_proj, P["coattn.W_k"])
    V = ad.matmul_t(H_proj, P["coattn.W_v"])
    H_hat, weights = _attention(Q, Kk, V, heads)
    A = weights[0] if heads == 1 else ad.scale(_sum_all(weights), 1.0 / heads)
    return H_hat, A


def _sum_all(ts):
    out = ts[0]
    for t in ts[1:]:
        out = ad.add(out, t)
    return out


def encoder_layer(x: Tensor, P: dict, prefix: str, heads: int, drop: Dropout) -> Tensor:
    """Post-norm transformer encoder layer."""
    attn = f"{prefix}.attn"
    q = ad.add(ad.matmul_t(x, P[f"{attn}.W_q"]), P[f"{attn}.b_q"])
    k = ad.add(ad.matmul_t(x, P[f"{attn}.W_k"]), P[f"{attn}.b_k"])
    v = ad.add(ad.matmul_t(x, P[f"{attn}.W_v"]), P[f"{attn}.b_v"])
    mixed, _ = _attention(q, k, v, heads)
    out = ad.add(ad.matmul_t(mixed, P[f"{attn}.W_o"]), P[f"{attn}.b_o"])
    x = ad.layer_norm(ad.add(x, drop(out)), P[f"{prefix}.ln1.gamma"], P[f"{prefix}.ln1.beta"])
    ff = linear(ad.relu(linear(x, P, f"{prefix}.ffn.fc1")), P, f"{prefix}.ffn.fc2")
    return ad.layer_norm(ad.add(x, drop(ff)), P[f"{prefix}.ln2.gamma"], P[f"{prefix}.ln2.beta"])


def gated_pool(bag: Tensor, P: dict, path: str) -> tuple[Tensor, Tensor]:
    """Gated attention weights over instances and the pooled ReLU embedding."""
    pre = f"pool_{path}"
    gate = ad.mul(
        ad.tanh(ad.matmul_t(bag, P[f"{pre}.V_rho"])),
        ad.sigmoid(ad.matmul_t(bag, P[f"{pre}.U_rho"])),
    )
    scores = ad.matmul_t(P[f"{pre}.W_rho"], gate)  # 1 x N
    A = ad.row_softmax(scores)
    pooled = ad.row_weighted_sum(A, bag)
    R = ad.relu(ad.matmul_t(pooled, P[f"{pre}.W_zeta"]))
    return R, A


def encode_and_pool(
    bag: Tensor, path: str, P: dict, config: ModelConfig, drop: Dropout | None = None
) -> tuple[Tensor, Tensor]:
    if bag.rows < 1:
        raise ValueError("cannot pool an empty bag")
    drop = drop or Dropout(0.0, None)
    x = bag
    for layer in range(config.encoder_layers):
        x = encoder_layer(x, P, f"enc_{path}.{layer}", config.heads, drop)
    return gated_pool(x, P, path)


def late_fuse(R_h: Tensor, R_g: Tensor, P: dict) -> Tensor:
    if R_h.cols != R_g.cols:
        raise ad.ShapeError(f"late_fuse: widths differ, {R_h.shape} vs {R_g.shape}")
    x = ad.concat([R_h, R_g], axis=1)
    x = ad.relu(linear(x, P, "fusion.fc1"))
    return ad.relu(linear(x, P, "fusion.fc2"))


def forward(
    record: PatientRecord,
    gene_sets: GeneSetMap,
    P: dict,
    config: ModelConfig,
    dropout_rng: np.random.Generator | None = None,
) -> ForwardOutput:
    """One patient through the network.

    ``P`` holds bound tensors (see :func:`bind`). Dropout is active only when
    ``dropout_rng`` is given, which is how train mode is selected.
    """
    drop = Dropout(config.dropout_rate, dropout_rng)
    wsi = Tensor(record.wsi_bag)
    if wsi.cols != P["wsi_proj.weight"].cols:
        raise ad.ShapeError(f"patient {record.id}: WSI width {wsi.cols} does not match the model")
    H_proj = linear(wsi, P, "wsi_proj")
    G_bag = encode_genes(record.gene_values, gene_sets, P)
    H_hat, A_coat = coattention(G_bag, H_proj, P, config.coattn_heads)
    R_h, A_h = encode_and_pool(H_hat, "h", P, config, drop)
    R_g, A_g = encode_and_pool(G_bag, "g", P, config, drop)
    R_fusion = late_fuse(R_h, R_g, P)
    s_risk = ad.sigmoid(linear(R_fusion, P, "risk"))
    e_h = ad.softplus(linear(R_h, P, "evid_h"))
    e_g = ad.softplus(linear(R_g, P, "evid_g"))
    return ForwardOutput(s_risk, e_h, e_g, R_h, R_g, R_fusion, A_coat, A_h, A_g)

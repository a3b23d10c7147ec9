"""Subjective-logic opinions and Dempster's rule for two sources.

The plain functions work on numpy vectors and validate their inputs. The
``fuse_tensors`` route performs the same chain on autodiff tensors so the
training loss can back-propagate through the evidence heads.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class EvidenceError(ValueError):
    pass


class TotalConflictError(EvidenceError):
    """The two opinions put all their belief on disjoint classes."""


@dataclass(frozen=True)
class Opinion:
    b: np.ndarray  # belief mass per class
    u: float

    @property
    def K(self) -> int:
        return len(self.b)

    @classmethod
    def vacuous(cls, K: int) -> "Opinion":
        return cls(np.zeros(K), 1.0)

    def total(self) -> float:
        return float(self.b.sum() + self.u)


@dataclass(frozen=True)
class DirichletEvidence:
    e: np.ndarray

    @property
    def K(self) -> int:
        return len(self.e)

    @property
    def alpha(self) -> np.ndarray:
        return self.e + 1.0

    @property
    def S(self) -> float:
        return float(self.alpha.sum())


def evidence_to_opinion(e) -> Opinion:
    e = np.asarray(e, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(e)):
        raise EvidenceError(f"evidence must be finite, got {e}")
    if np.any(e < 0):
        raise EvidenceError(f"evidence must be nonnegative, got {e}")
    S = float((e + 1.0).sum())
    return Opinion(e / S, len(e) / S)


def ds_combine(o1: Opinion, o2: Opinion) -> Opinion:
    """Dempster's rule with conflict ``C = sum_{i != j} b1_i b2_j``.

    The expression is arranged so that swapping the operands gives a
    bitwise-identical result.
    """
    if o1.K != o2.K:
        raise EvidenceError(f"opinions have different class counts: {o1.K} vs {o2.K}")
    b1, b2, u1, u2 = o1.b, o2.b, o1.u, o2.u
    agree = b1 * b2
    C = b1.sum() * b2.sum() - agree.sum()
    norm = 1.0 - C
    if norm <= 0.0:
        raise TotalConflictError(f"total conflict between opinions (C={C})")
    b = (agree + (b1 * u2 + b2 * u1)) / norm
    return Opinion(b, float(u1 * u2 / norm))


def opinion_to_evidence(o: Opinion) -> DirichletEvidence:
    if o.u <= 0.0:
        raise EvidenceError("opinion with zero uncertainty has infinite Dirichlet strength")
    S = o.K / o.u
    return DirichletEvidence(o.b * S)


def modulate_risk(e_fused, s_risk) -> np.ndarray:
    """Scale each class risk by the sigmoid of its fused evidence."""
    e = np.asarray(e_fused, dtype=np.float64)
    s = np.asarray(s_risk, dtype=np.float64)
    if np.any(e < 0):
        raise EvidenceError("fused evidence must be nonnegative")
    if np.any((s <= 0) | (s >= 1)):
        raise EvidenceError("s_risk entries must lie in (0, 1)")
    return ad._sigmoid(e.reshape(1, -1)).reshape(e.shape) * s


def fuse_evidence(e_h, e_g) -> tuple[np.ndarray, Opinion, Opinion, Opinion]:
    """Full two-source chain; returns (fused evidence, opinion_h, opinion_g, fused opinion)."""
    o_h, o_g = evidence_to_opinion(e_h), evidence_to_opinion(e_g)
    fused = ds_combine(o_h, o_g)
    return opinion_to_evidence(fused).e, o_h, o_g, fused


# ---------------------------------------------------------------------------
# differentiable route


@dataclass
class TensorFusion:
    o_risk: Tensor  # 1 x K
    e_fused: Tensor
    u_h: Tensor
    u_g: Tensor
    u_fused: Tensor


def _tensor_opinion(e: Tensor) -> tuple[Tensor, Tensor]:
    K = e.cols
    inv_S = ad.reciprocal(ad.sum(ad.add_scalar(e, 1.0)))
    return ad.mul(e, inv_S), ad.scale(inv_S, float(K))


def fuse_tensors(e_h: Tensor, e_g: Tensor, s_risk: Tensor) -> TensorFusion:
    """Opinion formation, Dempster combination, back to evidence, then risk modulation."""
    K = e_h.cols
    b1, u1 = _tensor_opinion(e_h)
    b2, u2 = _tensor_opinion(e_g)
    agree = ad.mul(b1, b2)
    conflict = ad.sub(ad.mul(ad.sum(b1), ad.sum(b2)), ad.sum(agree))
    inv_norm = ad.reciprocal(ad.add_scalar(ad.scale(conflict, -1.0), 1.0))
    b = ad.mul(ad.add(agree, ad.add(ad.mul(b1, u2), ad.mul(b2, u1))), inv_norm)
    u = ad.mul(ad.mul(u1, u2), inv_norm)
    e_fused = ad.mul(b, ad.scale(ad.reciprocal(u), float(K)))
    o_risk = ad.mul(ad.sigmoid(e_fused), s_risk)
    return TensorFusion(o_risk, e_fused, u1, u2, u)

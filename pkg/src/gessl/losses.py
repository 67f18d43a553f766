"""Inner-loop SSL objectives over projected views.

Three pluggable instantiations cover the alignment/regularization
families: a pairwise contrastive loss (NT-Xent), a cross-correlation
redundancy-reduction loss, and plain cosine alignment against a detached
branch. All are differentiable through the tensor core.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import Tensor, apply, as_tensor


class LossError(Exception):
    pass


@dataclass(frozen=True)
class ContrastiveNtXent:
    tau: float = 0.1

    def __post_init__(self):
        if self.tau <= 0.0:
            raise LossError(f"temperature must be > 0, got {self.tau}")


@dataclass(frozen=True)
class RedundancyBarlow:
    lambda_offdiag: float = 5e-3

    def __post_init__(self):
        if self.lambda_offdiag < 0.0:
            raise LossError(f"lambda_offdiag must be >= 0, got {self.lambda_offdiag}")


@dataclass(frozen=True)
class AlignCosine:
    pass


LossKind = ContrastiveNtXent | RedundancyBarlow | AlignCosine

_STD_EPS = 1e-9  # added to the column variance before the square root


def _check_unit_rows(z: Tensor, name: str) -> None:
    norms = np.sqrt((z.data * z.data).sum(axis=1))
    if not np.allclose(norms, 1.0, atol=1e-8):
        raise LossError(f"{name}: rows must be unit-norm (max deviation "
                        f"{np.max(np.abs(norms - 1.0)):.2e})")


def nt_xent(projections: Tensor, pseudo_labels: Sequence[int], tau: float) -> Tensor:
    """Mean over anchors of -log softmax similarity to the paired view.

    Each anchor's candidates are every other row (self excluded, positive
    included). Restricted to exactly two views per class.
    """
    if tau <= 0.0:
        raise LossError(f"temperature must be > 0, got {tau}")
    z = as_tensor(projections)
    labels = np.asarray(pseudo_labels, dtype=np.int64)
    n = z.shape[0]
    if labels.size != n:
        raise LossError(f"{n} projections but {labels.size} labels")
    counts = np.bincount(labels)
    if np.any(counts != 2):
        raise LossError("nt_xent requires exactly two views per class")
    _check_unit_rows(z, "nt_xent")

    same = labels[:, None] == labels[None, :]
    pos_mask = same & ~np.eye(n, dtype=bool)       # the partner view
    cand_mask = ~np.eye(n, dtype=bool)             # everyone but self

    logits = (z @ z.transposed()) * (1.0 / tau)
    pos_logit = apply("sum", [logits * as_tensor(pos_mask.astype(float))],
                      axis=1, keepdims=True)
    denom = apply("sum", [logits.exp() * as_tensor(cand_mask.astype(float))],
                  axis=1, keepdims=True)
    return apply("mean", [denom.log() - pos_logit])


def barlow(z_a: Tensor, z_b: Tensor, lambda_offdiag: float) -> Tensor:
    """Redundancy-reduction loss on the standardized cross-correlation.

    Columns of both inputs are standardized internally (mean 0, std 1,
    std computed as sqrt(var + 1e-9)); C = z_a_std.T @ z_b_std / N.
    Loss = sum_i (1 - C_ii)^2 + lambda * sum_{i != j} C_ij^2.
    """
    if lambda_offdiag < 0.0:
        raise LossError(f"lambda_offdiag must be >= 0, got {lambda_offdiag}")
    z_a, z_b = as_tensor(z_a), as_tensor(z_b)
    if z_a.shape != z_b.shape:
        raise LossError(f"barlow: shapes differ, {z_a.shape} vs {z_b.shape}")
    n, p = z_a.shape
    if n < 2:
        raise LossError(f"barlow needs at least 2 samples, got {n}")

    def standardize(z):
        centered = z - z.mean(axis=0, keepdims=True)
        var = (centered * centered).mean(axis=0, keepdims=True)
        inv_std = ((var + _STD_EPS).log() * -0.5).exp()
        return centered * inv_std

    c = (standardize(z_a).transposed() @ standardize(z_b)) * (1.0 / n)
    eye = np.eye(p)
    diag_err = (as_tensor(eye) - c * as_tensor(eye))
    on_diag = apply("sum", [diag_err * diag_err])
    off = c * as_tensor(1.0 - eye)
    off_diag = apply("sum", [off * off])
    return on_diag + off_diag * lambda_offdiag


def align_cosine(z_a: Tensor, z_b_detached: Tensor) -> Tensor:
    """Negative mean row cosine against a constant branch."""
    z_a = as_tensor(z_a)
    z_b = as_tensor(z_b_detached)
    if z_b.grad_tracked:
        raise LossError("align_cosine: the second branch must carry no gradient")
    if z_a.shape != z_b.shape:
        raise LossError(f"align_cosine: shapes differ, {z_a.shape} vs {z_b.shape}")
    _check_unit_rows(z_a, "align_cosine")
    _check_unit_rows(z_b, "align_cosine")
    per_row = apply("sum", [z_a * z_b], axis=1)
    return apply("mean", [per_row]) * -1.0

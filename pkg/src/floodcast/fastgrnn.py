"""Gated recurrent branch: single-matrix gated cell, sequence unrolling,
dimension shuffle, and an optional hard-sparsity projection.

The cell reuses one input matrix W and one recurrence matrix U for both the
gate and the candidate state:

    z_t  = sigmoid(W x_t + U h_{t-1} + b_z)
    h~_t = tanh   (W x_t + U h_{t-1} + b_h)
    h_t  = (zeta * (1 - z_t) + nu) . h~_t + z_t . h_{t-1}

with the scalar mixing parameters zeta and nu kept in (0, 1) through a
sigmoid reparameterization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Node, Rng
from .errors import ConfigurationError, DimensionError


@dataclass
class FastGrnnParams:
    """Trainable state of the recurrent branch.

    ``zeta_raw`` and ``nu_raw`` are pre-sigmoid scalars; the effective
    mixing values stay strictly inside (0, 1) by construction.
    """

    W: Node       # (hidden, input_dim)
    U: Node       # (hidden, hidden)
    b_z: Node     # (hidden,)
    b_h: Node     # (hidden,)
    zeta_raw: Node  # ()
    nu_raw: Node    # ()

    @property
    def hidden_size(self) -> int:
        return self.W.shape[0]

    @property
    def input_size(self) -> int:
        return self.W.shape[1]

    def trainable(self) -> tuple[Node, ...]:
        return (self.W, self.U, self.b_z, self.b_h, self.zeta_raw, self.nu_raw)

    def zeta(self) -> float:
        return float(1.0 / (1.0 + np.exp(-self.zeta_raw.data)))

    def nu(self) -> float:
        return float(1.0 / (1.0 + np.exp(-self.nu_raw.data)))


def init_fastgrnn(input_size: int, hidden_size: int, rng: Rng) -> FastGrnnParams:
    """Zero-mean 1/sqrt(fan-in) weights, zero biases, mixing logits at 1."""
    if input_size < 1 or hidden_size < 1:
        raise ConfigurationError("input_size and hidden_size must be positive")
    return FastGrnnParams(
        W=Node(rng.normal((hidden_size, input_size), scale=1.0 / math.sqrt(input_size))),
        U=Node(rng.normal((hidden_size, hidden_size), scale=1.0 / math.sqrt(hidden_size))),
        b_z=Node(np.zeros(hidden_size)),
        b_h=Node(np.zeros(hidden_size)),
        zeta_raw=Node(np.asarray(1.0)),
        nu_raw=Node(np.asarray(1.0)),
    )


# =====================================================================
# Cell and unrolling
# =====================================================================

def cell_step_batch(p: FastGrnnParams, x_t: Node, h_prev: Node) -> Node:
    """One gated update for a (B, D) input and (B, H) state."""
    if x_t.shape[1] != p.input_size or h_prev.shape[1] != p.hidden_size:
        raise DimensionError(
            f"cell_step: x {x_t.shape}, h {h_prev.shape}, "
            f"W {p.W.shape}, U {p.U.shape}")
    pre = ad.add(ad.matmul(x_t, ad.transpose(p.W)),
                 ad.matmul(h_prev, ad.transpose(p.U)))
    z = ad.sigmoid(ad.add(pre, p.b_z))
    h_tilde = ad.tanh(ad.add(pre, p.b_h))
    zeta = ad.sigmoid(p.zeta_raw)
    nu = ad.sigmoid(p.nu_raw)
    mix = ad.add(ad.hadamard(zeta, ad.rsub_const(1.0, z)), nu)
    return ad.add(ad.hadamard(mix, h_tilde), ad.hadamard(z, h_prev))


def cell_step(p: FastGrnnParams, x_t, h_prev) -> Node:
    """Single-sample cell update: (D,) input, (H,) state -> (H,) state."""
    x_t, h_prev = ad.as_node(x_t), ad.as_node(h_prev)
    if x_t.shape != (p.input_size,) or h_prev.shape != (p.hidden_size,):
        raise DimensionError(
            f"cell_step: x {x_t.shape}, h {h_prev.shape}, "
            f"W {p.W.shape}, U {p.U.shape}")
    out = cell_step_batch(p, ad.reshape(x_t, (1, p.input_size)),
                          ad.reshape(h_prev, (1, p.hidden_size)))
    return ad.reshape(out, (p.hidden_size,))


def run_sequence_batch(p: FastGrnnParams, x: Node, h_0: Node | None = None) -> Node:
    """Fold the cell over a (B, D, T) batch; returns the final (B, H) state."""
    if x.data.ndim != 3:
        raise DimensionError(f"run_sequence_batch expects (B, D, T), got {x.shape}")
    n_batch, _, t_steps = x.shape
    h = h_0 if h_0 is not None else Node(np.zeros((n_batch, p.hidden_size)))
    for t in range(t_steps):
        h = cell_step_batch(p, ad.time_slice(x, t), h)
    return h


def run_sequence(p: FastGrnnParams, x, h_0=None) -> Node:
    """Fold the cell over a (D, T) sequence; returns the final (H,) state."""
    x = ad.as_node(x)
    if x.data.ndim != 2:
        raise DimensionError(f"run_sequence expects (D, T), got {x.shape}")
    h = ad.as_node(h_0) if h_0 is not None else Node(np.zeros(p.hidden_size))
    for t in range(x.shape[1]):
        h = cell_step(p, ad.column(x, t), h)
    return h


def dimension_shuffle(x: np.ndarray) -> np.ndarray:
    """Swap the last two axes: an (M, Q) series becomes (Q, M).

    The recurrent branch consumes the shuffled view, so a 9-variable,
    96-step sample turns into 96 input features unrolled over 9 steps.
    Accepts a leading batch axis.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        return np.ascontiguousarray(x.T)
    if x.ndim == 3:
        return np.ascontiguousarray(x.transpose(0, 2, 1))
    raise DimensionError(f"dimension_shuffle expects rank 2 or 3, got {x.shape}")


# =====================================================================
# Sparsity projection
# =====================================================================

@dataclass(frozen=True)
class SparsityBudget:
    """Maximum fraction of nonzero entries allowed in W and U."""

    s_w: float = 1.0
    s_u: float = 1.0

    def __post_init__(self):
        for name, value in (("s_w", self.s_w), ("s_u", self.s_u)):
            if not (0.0 < value <= 1.0):
                raise ConfigurationError(f"{name} must be in (0, 1], got {value}")

    @property
    def active(self) -> bool:
        return self.s_w < 1.0 or self.s_u < 1.0


def _top_magnitude_mask(values: np.ndarray, fraction: float) -> np.ndarray:
    """Boolean mask keeping the ceil(fraction * n) largest-magnitude entries.

    Ties at the cutoff keep the smallest flat index (stable sort).
    """
    flat = values.reshape(-1)
    keep = math.ceil(fraction * flat.size)
    order = np.argsort(-np.abs(flat), kind="stable")
    mask = np.zeros(flat.size, dtype=bool)
    mask[order[:keep]] = True
    return mask.reshape(values.shape)


def project_sparse(p: FastGrnnParams, budget: SparsityBudget,
                   in_place: bool = False) -> FastGrnnParams:
    """Zero all but the largest-magnitude entries of W and U.

    With ``in_place`` the existing parameter arrays are overwritten (the
    form the training loop uses after each optimizer step); otherwise a
    fresh parameter set is returned and ``p`` is left untouched.
    """
    w_mask = _top_magnitude_mask(p.W.data, budget.s_w)
    u_mask = _top_magnitude_mask(p.U.data, budget.s_u)
    if in_place:
        p.W.data *= w_mask
        p.U.data *= u_mask
        return p
    return FastGrnnParams(
        W=Node(p.W.data * w_mask),
        U=Node(p.U.data * u_mask),
        b_z=Node(p.b_z.data.copy()),
        b_h=Node(p.b_h.data.copy()),
        zeta_raw=Node(p.zeta_raw.data.copy()),
        nu_raw=Node(p.nu_raw.data.copy()),
    )

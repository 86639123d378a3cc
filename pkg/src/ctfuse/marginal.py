"""Schur-complement marginalization and the square-root marginal prior.

Eliminating blocks beta from the normal equations

    [H_aa H_ab] [x_a]   [b_a]
    [H_ba H_bb] [x_b] = [b_b]

gives the reduced system Hhat x_a = bhat with

    Hhat = H_aa - H_ab H_bb^{-1} H_ba,   bhat = b_a - H_ab H_bb^{-1} b_b.

The prior stores Hhat in square-root form: residual L (x ⊟ x_lin) + r0 with
L^T L = Hhat and L^T r0 = bhat, where ⊟ is right-minus Log(lin^T x) on
rotation blocks and plain subtraction elsewhere. Rank deficiency is handled
by dropping near-zero eigenvalues, so an empty or partially informative
prior is representable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .factors import FactorEval
from .lie import log_so3
from .solver import BLOCK_DIMS

_EIG_REL_FLOOR = 1e-10


def schur_complement(
    h: np.ndarray, b: np.ndarray, keep: np.ndarray, drop: np.ndarray
) -> tuple[np.ndarray, np.ndarray, bool]:
    """Marginalize index set `drop`; returns (Hhat, bhat, degenerate_flag).

    A singular dropped block falls back to an eigenvalue-floored
    pseudo-inverse (degenerate_flag True), which leaves directions of the
    dropped states that carried no information out of the prior.
    """
    h_aa = h[np.ix_(keep, keep)]
    h_ab = h[np.ix_(keep, drop)]
    h_bb = h[np.ix_(drop, drop)]
    b_a = b[keep]
    b_b = b[drop]
    degenerate = False
    try:
        c = np.linalg.cholesky(h_bb)
        x1 = np.linalg.solve(c, h_ab.T)
        x2 = np.linalg.solve(c, b_b)
        h_hat = h_aa - x1.T @ x1
        b_hat = b_a - x1.T @ x2
    except np.linalg.LinAlgError:
        degenerate = True
        w, v = np.linalg.eigh(h_bb)
        floor = max(w.max(initial=0.0) * _EIG_REL_FLOOR, 1e-300)
        inv_w = np.where(w > floor, 1.0 / np.maximum(w, floor), 0.0)
        h_bb_inv = (v * inv_w) @ v.T
        h_hat = h_aa - h_ab @ h_bb_inv @ h_ab.T
        b_hat = b_a - h_ab @ h_bb_inv @ b_b
    h_hat = 0.5 * (h_hat + h_hat.T)
    return h_hat, b_hat, degenerate


@dataclass
class MarginalPrior:
    """Square-root prior on a set of retained state blocks.

    keys: ordered block keys; lin: linearization values per key;
    sqrt_info: (r, n) with sqrt_info^T sqrt_info = Hhat; r0: (r,).
    """

    keys: list = field(default_factory=list)
    lin: dict = field(default_factory=dict)
    sqrt_info: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    r0: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def is_empty(self) -> bool:
        return len(self.keys) == 0 or self.sqrt_info.shape[0] == 0

    @property
    def dim(self) -> int:
        return sum(BLOCK_DIMS[k[0]] for k in self.keys)

    def key_slices(self) -> dict:
        out = {}
        off = 0
        for k in self.keys:
            d = BLOCK_DIMS[k[0]]
            out[k] = slice(off, off + d)
            off += d
        return out

    @classmethod
    def from_information(cls, h: np.ndarray, b: np.ndarray, keys: list, lin: dict) -> "MarginalPrior":
        """Build the square-root form from (Hhat, bhat) over `keys`."""
        n = h.shape[0]
        if n == 0:
            return cls()
        w, v = np.linalg.eigh(0.5 * (h + h.T))
        floor = max(w.max(initial=0.0) * _EIG_REL_FLOOR, 1e-300)
        keep = w > floor
        if not np.any(keep):
            return cls(keys=list(keys), lin=dict(lin))
        sw = np.sqrt(w[keep])
        l_mat = sw[:, None] * v[:, keep].T
        r0 = (v[:, keep].T @ b) / sw
        return cls(keys=list(keys), lin=dict(lin), sqrt_info=l_mat, r0=r0)

    def information(self) -> np.ndarray:
        return self.sqrt_info.T @ self.sqrt_info

    def error_vector(self, values: dict) -> np.ndarray:
        """Stacked x ⊟ x_lin over the prior keys."""
        out = np.zeros(self.dim)
        for k, sl in self.key_slices().items():
            x = values[k]
            lin = self.lin[k]
            if k[0] == "R":
                out[sl] = log_so3(lin.T @ x)
            elif BLOCK_DIMS[k[0]] == 1:
                out[sl] = x - lin
            else:
                out[sl] = np.asarray(x) - np.asarray(lin)
        return out


def prior_factor(prior: MarginalPrior, values: dict) -> FactorEval | None:
    """Prior as a factor: residual L (x ⊟ x_lin) + r0, Jacobian columns of L.

    Missing keys in `values` indicate a window-bookkeeping bug and raise.
    """
    if prior.is_empty:
        return None
    missing = [k for k in prior.keys if k not in values]
    if missing:
        raise KeyError(f"prior references absent state blocks: {missing}")
    delta = prior.error_vector(values)
    r = prior.sqrt_info @ delta + prior.r0
    jac = {k: prior.sqrt_info[:, sl] for k, sl in prior.key_slices().items()}
    return FactorEval(r=r, jac=jac, sqrt_w=None)

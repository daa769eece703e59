"""Training objectives and their multiplier bookkeeping.

All losses are averaged over the instances of a batch.  The supervised term
is computed in normalised target space; constraint terms use the
denormalised (per-unit) prediction.

    L_mse = mean (y_hat - y)^2
    L_al  = L_mse + lam.r + rho/2 |r|^2 + mu.max(h, 0) + rho/2 |h|^2
    L_vbl = L_mse + lam.|r| + mu.max(h, 0)

``h`` in the AL quadratic is the raw inequality vector unless
``clip_quadratic`` is set, in which case ``max(h, 0)`` is used.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .grid import GridCase
from .residuals import constraint_counts, traced_r_h

OBJECTIVES = ("mse", "al", "vbl")


@dataclass
class DualState:
    """Per-topology multipliers plus the shared penalty schedule.

    ``lam[case_id]`` has one entry per equality constraint and ``mu[case_id]``
    one per inequality constraint.  ``rho`` is multiplied by ``gamma`` after
    every update (``gamma=1`` keeps it constant).
    """

    rho: float = 1.0
    update_period: int = 200
    gamma: float = 1.0
    lam: dict = field(default_factory=dict)
    mu: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.rho >= 0:
            raise ValueError(f"rho must be non-negative, got {self.rho}")
        if self.update_period < 1:
            raise ValueError("update_period must be >= 1")
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")

    def ensure(self, case: GridCase) -> "DualState":
        """Add zero multipliers for ``case`` if it has none yet."""
        n_eq, n_in = constraint_counts(case)
        if case.case_id not in self.lam:
            self.lam[case.case_id] = np.zeros(n_eq)
            self.mu[case.case_id] = np.zeros(n_in)
        return self

    def get(self, case: GridCase):
        n_eq, n_in = constraint_counts(case)
        if case.case_id not in self.lam:
            return np.zeros(n_eq), np.zeros(n_in)
        lam, mu = self.lam[case.case_id], self.mu[case.case_id]
        if lam.shape != (n_eq,) or mu.shape != (n_in,):
            raise ValueError(
                f"{case.case_id}: dual sizes ({lam.size}, {mu.size}) do not match "
                f"constraint counts ({n_eq}, {n_in})"
            )
        return lam, mu

    def copy(self) -> "DualState":
        return DualState(
            self.rho,
            self.update_period,
            self.gamma,
            {k: v.copy() for k, v in self.lam.items()},
            {k: v.copy() for k, v in self.mu.items()},
        )

    def to_arrays(self) -> dict:
        out = {"duals/rho": np.array(self.rho)}
        for k in self.lam:
            out[f"duals/{k}/lambda"] = self.lam[k]
            out[f"duals/{k}/mu"] = self.mu[k]
        return out

    @classmethod
    def from_arrays(cls, arrays: dict, update_period: int = 200, gamma: float = 1.0) -> "DualState":
        d = cls(float(arrays["duals/rho"]), update_period, gamma)
        for key, v in arrays.items():
            parts = key.split("/")
            if len(parts) == 3 and parts[0] == "duals":
                target = d.lam if parts[2] == "lambda" else d.mu
                target[parts[1]] = np.asarray(v, dtype=float)
        return d


def _flat(t):
    t = ad.astensor(t)
    return ad.reshape(t, (t.shape[0], -1)) if t.ndim > 1 else ad.reshape(t, (1, -1))


def mse_loss(y_hat, y) -> ad.Tensor:
    """Mean squared error over every component.

    ``y_hat`` and ``y`` may be single arrays or matching sequences of arrays
    (e.g. bus and generator blocks), which are concatenated per instance.
    """
    if isinstance(y_hat, (list, tuple)):
        if not isinstance(y, (list, tuple)) or len(y) != len(y_hat):
            raise ValueError("mse_loss: y_hat and y must have the same block structure")
        for a, b in zip(y_hat, y):
            if tuple(np.shape(getattr(a, "data", a))) != tuple(np.shape(getattr(b, "data", b))):
                raise ValueError(f"mse_loss: shape mismatch {np.shape(getattr(a, 'data', a))} vs {np.shape(b)}")
        y_hat = ad.concat([_flat(a) for a in y_hat], axis=1)
        like = y_hat
        y = ad.concat([_flat(ad.astensor(b, like)) for b in y], axis=1)
    y_hat = ad.astensor(y_hat)
    y = ad.astensor(y, y_hat)
    if y_hat.shape != y.shape:
        raise ValueError(f"mse_loss: shape mismatch {y_hat.shape} vs {y.shape}")
    d = y_hat - y
    return ad.mean(d * d)


def _terms(pred, case, pd, qd):
    return traced_r_h(case, pred.vm, pred.va, pred.pg, pred.qg, pd, qd)


def _dot_mean(v, w):
    """Mean over instances of v_b . w for a (B, n) tensor and an (n,) vector."""
    return ad.mean(ad.sum_(v * ad.astensor(w, v), axis=-1))


def _sq_mean(v):
    return ad.mean(ad.sum_(v * v, axis=-1))


def al_loss(pred, target, case: GridCase, duals: DualState, pd, qd, clip_quadratic: bool = False,
            return_parts: bool = False):
    """Augmented-Lagrangian loss on a batch prediction.

    ``pred`` carries normalised outputs (``z_bus``, ``z_gen``) and the
    denormalised operating point (``vm``, ``va``, ``pg``, ``qg``); ``target``
    is the normalised pair ``(y_bus, y_gen)``.  With ``return_parts`` the
    traced ``r`` and ``h`` are returned alongside the loss.
    """
    lam, mu = duals.get(case)
    rho = duals.rho
    base = mse_loss([pred.z_bus, pred.z_gen], list(target))
    r, h = _terms(pred, case, pd, qd)
    hp = ad.max_with_zero(h)
    hq = hp if clip_quadratic else h
    loss = base + _dot_mean(r, lam) + _sq_mean(r) * (0.5 * rho) + _dot_mean(hp, mu) + _sq_mean(hq) * (0.5 * rho)
    return (loss, {"r": r, "h": h}) if return_parts else loss


def vbl_loss(pred, target, case: GridCase, duals: DualState, pd, qd, return_parts: bool = False):
    """Violation-based Lagrangian loss; the multipliers must be non-negative."""
    lam, mu = duals.get(case)
    if np.any(lam < 0) or np.any(mu < 0):
        raise ValueError(f"{case.case_id}: vbl_loss requires non-negative multipliers")
    base = mse_loss([pred.z_bus, pred.z_gen], list(target))
    r, h = _terms(pred, case, pd, qd)
    loss = base + _dot_mean(ad.abs_(r), lam) + _dot_mean(ad.max_with_zero(h), mu)
    return (loss, {"r": r, "h": h}) if return_parts else loss


def _apply(duals, residuals, lam_step):
    out = duals.copy()
    for cid, (r, h) in residuals.items():
        r = np.asarray(r, dtype=float)
        h = np.asarray(h, dtype=float)
        lam = out.lam.get(cid, np.zeros_like(r))
        mu = out.mu.get(cid, np.zeros_like(h))
        if lam.shape != r.shape or mu.shape != h.shape:
            raise ValueError(f"{cid}: residual sizes do not match the multipliers")
        out.lam[cid] = lam + out.rho * lam_step(r)
        out.mu[cid] = np.maximum(mu + out.rho * np.maximum(h, 0.0), 0.0)
    out.rho = out.rho * out.gamma
    return out


def dual_update_al(duals: DualState, residuals: dict) -> DualState:
    """lam += rho r, mu += rho max(h, 0), per topology.

    ``residuals`` maps case_id to window-averaged ``(r, h)``.  Returns a new
    state; the input is left untouched.
    """
    return _apply(duals, residuals, lambda r: r)


def dual_update_vbl(duals: DualState, residuals: dict) -> DualState:
    """lam += rho |r|, mu += rho max(h, 0), per topology."""
    return _apply(duals, residuals, np.abs)


def objective_loss(objective, pred, target, case, duals, pd, qd, clip_quadratic=False):
    """Dispatch on ``objective``; returns ``(loss, parts)`` where parts may be empty."""
    if objective == "mse":
        return mse_loss([pred.z_bus, pred.z_gen], list(target)), {}
    if objective == "al":
        return al_loss(pred, target, case, duals, pd, qd, clip_quadratic, return_parts=True)
    if objective == "vbl":
        return vbl_loss(pred, target, case, duals, pd, qd, return_parts=True)
    raise ValueError(f"unknown objective {objective!r}; choose from {OBJECTIVES}")

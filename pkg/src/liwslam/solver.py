"""Levenberg-Marquardt nonlinear least squares over vector and rotation slots.

A :class:`Problem` owns named state slots and a list of residual blocks.
Each block wraps a callback ``fn(*values) -> (residual, [jacobian, ...])``
that returns one Jacobian per referenced slot, taken with respect to the
slot's tangent perturbation.  Rotation-vector slots are perturbed on the
right: ``theta [+] d = log(exp(theta) exp(d))``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg

from .geometry import boxplus_rotvec

VECTOR = "vector"
ROTVEC = "rotvec"

LAMBDA_MIN = 1e-9
LAMBDA_MAX = 1e6


class SingularSystemError(RuntimeError):
    def __init__(self, message: str, condition: float = math.inf, dims=()):
        super().__init__(message)
        self.condition = condition
        self.dims = tuple(dims)


def retract(kind: str, x: np.ndarray, delta: np.ndarray) -> np.ndarray:
    if kind == ROTVEC:
        return boxplus_rotvec(x, delta)
    return x + delta


@dataclass
class Slot:
    name: str
    value: np.ndarray
    kind: str = VECTOR
    fixed: bool = False

    @property
    def dim(self) -> int:
        return self.value.shape[0]


class HuberLoss:
    """Huber kernel on the squared norm of each residual group."""

    def __init__(self, delta: float = 1.0):
        if delta <= 0:
            raise ValueError("Huber delta must be positive")
        self.delta = float(delta)

    def rho(self, s: np.ndarray) -> np.ndarray:
        d = self.delta
        root = np.sqrt(s)
        return np.where(s <= d * d, s, 2.0 * d * root - d * d)

    def scale(self, s: np.ndarray) -> np.ndarray:
        d = self.delta
        root = np.sqrt(np.maximum(s, 1e-300))
        return np.where(s <= d * d, 1.0, np.sqrt(d / root))


class ResidualBlock:
    """One residual term.

    ``weight`` is an optional upper-triangular square-root information
    matrix applied on top of whatever the callback returns.  With a loss,
    rows are robustified in consecutive groups of ``loss_group`` rows.
    """

    def __init__(self, slots: Sequence[str], fn: Callable, weight=None, loss: HuberLoss | None = None,
                 loss_group: int | None = None, robustify: bool = False, name: str = ""):
        self.slots = list(slots)
        self.fn = fn
        self.weight = None
        if weight is not None:
            W = np.atleast_2d(np.asarray(weight, dtype=float))
            if not np.allclose(W, np.triu(W)) or np.any(np.diag(W) <= 0):
                raise ValueError("weight must be upper-triangular with positive diagonal")
            self.weight = W
        self.loss = loss
        self.loss_group = loss_group
        self.robustify = robustify
        self.name = name

    def evaluate(self, values: Sequence[np.ndarray]):
        r, Js = self.fn(*values)
        r = np.asarray(r, dtype=float).reshape(-1)
        if not np.all(np.isfinite(r)):
            raise ValueError(f"non-finite residual in block {self.name!r}")
        Js = [np.asarray(J, dtype=float).reshape(r.shape[0], -1) for J in Js]
        if self.weight is not None:
            r = self.weight @ r
            Js = [self.weight @ J for J in Js]
        return r, Js


class Problem:
    def __init__(self):
        self.slots: dict[str, Slot] = {}
        self.blocks: list[ResidualBlock] = []

    def add_slot(self, name: str, value, kind: str = VECTOR, fixed: bool = False) -> str:
        if name in self.slots:
            raise ValueError(f"duplicate slot {name!r}")
        if kind not in (VECTOR, ROTVEC):
            raise ValueError(f"unknown slot kind {kind!r}")
        v = np.array(value, dtype=float).reshape(-1)
        if kind == ROTVEC and v.shape[0] != 3:
            raise ValueError("rotation slots are 3-vectors")
        self.slots[name] = Slot(name, v, kind, fixed)
        return name

    def set_fixed(self, name: str, fixed: bool = True) -> None:
        self.slots[name].fixed = fixed

    def add_block(self, block: ResidualBlock) -> ResidualBlock:
        for s in block.slots:
            if s not in self.slots:
                raise KeyError(f"block {block.name!r} references unknown slot {s!r}")
        self.blocks.append(block)
        return block

    def value(self, name: str) -> np.ndarray:
        return self.slots[name].value

    def kinds(self, names: Sequence[str]) -> list[str]:
        return [self.slots[n].kind for n in names]


@dataclass
class SolveOptions:
    max_iters: int = 50
    tol_grad: float = 1e-10
    tol_step: float = 1e-12
    tol_cost: float = 1e-14
    lm_init_lambda: float = 1e-4
    robust_loss: HuberLoss | None = None
    sparse_threshold: int = 400


@dataclass
class SolveResult:
    states: dict
    initial_cost: float
    final_cost: float
    iters: int
    converged: bool
    reason: str
    cost_history: list = field(default_factory=list)


class _Layout:
    def __init__(self, problem: Problem):
        self.offsets: dict[str, int] = {}
        n = 0
        for name, slot in problem.slots.items():
            if not slot.fixed:
                self.offsets[name] = n
                n += slot.dim
        self.n = n


def _block_loss(block: ResidualBlock, opts: SolveOptions):
    if block.loss is not None:
        return block.loss
    if block.robustify:
        return opts.robust_loss
    return None


def _evaluate(problem: Problem, opts: SolveOptions, values: dict, with_jac: bool):
    """Return (cost, residual list, jacobian list) with robust scaling applied."""
    cost = 0.0
    out = []
    for block in problem.blocks:
        r, Js = block.evaluate([values[s] for s in block.slots])
        loss = _block_loss(block, opts)
        if loss is None:
            cost += 0.5 * float(r @ r)
        else:
            g = block.loss_group or r.shape[0]
            sq = (r.reshape(-1, g) ** 2).sum(axis=1)
            cost += 0.5 * float(loss.rho(sq).sum())
            if with_jac:
                sc = np.repeat(loss.scale(sq), g)
                r = r * sc
                Js = [J * sc[:, None] for J in Js]
        if with_jac:
            out.append((block, r, Js))
    return cost, out


def _assemble(layout: _Layout, evals, sparse: bool):
    m = sum(r.shape[0] for _, r, _ in evals)
    rvec = np.empty(m)
    if sparse:
        rows, cols, data = [], [], []
    else:
        J = np.zeros((m, layout.n))
    row = 0
    for block, r, Js in evals:
        k = r.shape[0]
        rvec[row:row + k] = r
        for name, Jb in zip(block.slots, Js):
            off = layout.offsets.get(name)
            if off is None:
                continue
            d = Jb.shape[1]
            if sparse:
                rr, cc = np.meshgrid(np.arange(row, row + k), np.arange(off, off + d), indexing="ij")
                rows.append(rr.ravel())
                cols.append(cc.ravel())
                data.append(Jb.ravel())
            else:
                J[row:row + k, off:off + d] += Jb
        row += k
    if sparse:
        J = scipy.sparse.csr_matrix(
            (np.concatenate(data) if data else np.zeros(0),
             (np.concatenate(rows) if rows else np.zeros(0, int),
              np.concatenate(cols) if cols else np.zeros(0, int))),
            shape=(m, layout.n))
    return rvec, J


def _apply_step(problem: Problem, layout: _Layout, values: dict, delta: np.ndarray) -> dict:
    new = dict(values)
    for name, off in layout.offsets.items():
        slot = problem.slots[name]
        new[name] = retract(slot.kind, values[name], delta[off:off + slot.dim])
    return new


def _condition(H) -> float:
    if scipy.sparse.issparse(H):
        H = H.toarray()
    try:
        return float(np.linalg.cond(H))
    except np.linalg.LinAlgError:
        return math.inf


def solve(problem: Problem, opts: SolveOptions | None = None) -> SolveResult:
    """Minimise 0.5 * sum of squared (robustified) residuals.

    Slot values in ``problem`` are updated in place with the solution.
    """
    opts = opts or SolveOptions()
    layout = _Layout(problem)
    if layout.n == 0:
        raise ValueError("problem has no free slots")
    values = {name: slot.value.copy() for name, slot in problem.slots.items()}
    sparse = layout.n > opts.sparse_threshold

    cost, evals = _evaluate(problem, opts, values, with_jac=True)
    initial_cost = cost
    history = [cost]
    lam = min(max(opts.lm_init_lambda, LAMBDA_MIN), LAMBDA_MAX)
    converged = False
    reason = "max_iters"
    iters = 0
    need_linearize = False

    rvec, J = _assemble(layout, evals, sparse)
    colnorm = (np.asarray(abs(J).sum(axis=0)).ravel())
    dead = np.flatnonzero(colnorm == 0.0)
    if dead.size:
        raise SingularSystemError(
            f"{dead.size} free tangent dimension(s) are not constrained by any residual",
            condition=math.inf, dims=dead)

    while iters < opts.max_iters:
        if need_linearize:
            rvec, J = _assemble(layout, evals, sparse)
            need_linearize = False
        g = np.asarray(J.T @ rvec).ravel()
        if np.abs(g).max() <= opts.tol_grad:
            converged, reason = True, "gradient"
            break
        H = J.T @ J
        diag = H.diagonal() if sparse else np.diag(H).copy()
        dmax = float(diag.max())
        damp = np.maximum(diag, 1e-12 * max(dmax, 1e-300))
        iters += 1
        accepted = False
        while True:
            try:
                if sparse:
                    A = (H + scipy.sparse.diags(lam * damp)).tocsc()
                    delta = scipy.sparse.linalg.spsolve(A, -g)
                    if not np.all(np.isfinite(delta)):
                        raise np.linalg.LinAlgError("sparse solve failed")
                else:
                    A = H + np.diag(lam * damp)
                    c, low = scipy.linalg.cho_factor(A, check_finite=False)
                    delta = scipy.linalg.cho_solve((c, low), -g, check_finite=False)
            except (np.linalg.LinAlgError, scipy.linalg.LinAlgError, RuntimeError):
                if lam >= LAMBDA_MAX:
                    raise SingularSystemError("normal equations singular at maximum damping",
                                              condition=_condition(H))
                lam = min(lam * 10.0, LAMBDA_MAX)
                continue
            new_values = _apply_step(problem, layout, values, delta)
            # callbacks return Jacobians anyway; keep them for the next iteration
            new_cost, new_evals = _evaluate(problem, opts, new_values, with_jac=True)
            if np.isfinite(new_cost) and new_cost <= cost:
                accepted = True
                break
            if lam >= LAMBDA_MAX:
                break
            lam = min(lam * 10.0, LAMBDA_MAX)
        if not accepted:
            # no damped step lowers the cost: numerically at a minimum
            converged, reason = True, "no_descent"
            break
        step_norm = float(np.linalg.norm(delta))
        x_norm = math.sqrt(sum(float(values[n] @ values[n]) for n in layout.offsets))
        values = new_values
        old_cost, cost = cost, new_cost
        history.append(cost)
        lam = max(lam / 10.0, LAMBDA_MIN)
        evals = new_evals
        need_linearize = True
        if step_norm <= opts.tol_step * (x_norm + opts.tol_step):
            converged, reason = True, "step"
            break
        if old_cost - cost <= opts.tol_cost * old_cost:
            converged, reason = True, "cost"
            break

    for name in layout.offsets:
        problem.slots[name].value = values[name]
    return SolveResult(states={n: v.copy() for n, v in values.items()}, initial_cost=initial_cost,
                       final_cost=cost, iters=iters, converged=converged, reason=reason,
                       cost_history=history)


def check_jacobian(block: ResidualBlock, states, kinds: Sequence[str] | None = None,
                   step: float = 1e-6) -> float:
    """Max |analytic - central difference| over all Jacobian entries.

    ``states`` are raw arrays or :class:`Slot` objects; for raw arrays
    ``kinds`` gives each slot's retraction (default: vector).
    """
    values, ks = [], []
    for i, s in enumerate(states):
        if isinstance(s, Slot):
            values.append(np.array(s.value, dtype=float))
            ks.append(s.kind)
        else:
            values.append(np.array(s, dtype=float).reshape(-1))
            ks.append(kinds[i] if kinds is not None else VECTOR)
    _, Js = block.evaluate(values)
    worst = 0.0
    for i, (v, kind) in enumerate(zip(values, ks)):
        J_num = np.zeros_like(Js[i])
        for k in range(v.shape[0]):
            e = np.zeros(v.shape[0])
            e[k] = step
            plus = list(values)
            minus = list(values)
            plus[i] = retract(kind, v, e)
            minus[i] = retract(kind, v, -e)
            rp, _ = block.evaluate(plus)
            rm, _ = block.evaluate(minus)
            J_num[:, k] = (rp - rm) / (2.0 * step)
        worst = max(worst, float(np.abs(J_num - Js[i]).max(initial=0.0)))
    return worst

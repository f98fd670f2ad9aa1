"""Preference-aware multi-gradient reconciliation of two training losses.

The recommendation loss and the cross-domain attention loss each produce a
gradient. Every step picks simplex weights ``(alpha_rec, alpha_cd)`` for them:

* with no active preference constraint, the min-norm point of the two
  gradients' convex hull (closed form);
* otherwise, Frank-Wolfe over the two task gradients plus the gradients of
  the active constraints ``(p_k - p_1) . L``, mapped back onto the two tasks.

All solvers work on Gram matrices, so the cost after the dot products is
independent of the parameter count.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from . import numerics as nx

SCOPE_ALL = "all"
SCOPE_EXCLUDE_EMBEDDING = "exclude-embedding"

LOG_COLUMNS = ("step", "L_rec", "L_cd", "alpha1", "alpha2", "S_size", "fw_iters")


class DegenerateGradients(ValueError):
    pass


@dataclass
class SolverConfig:
    max_iterations: int = 100
    tolerance: float = 1e-4
    scope: str = SCOPE_EXCLUDE_EMBEDDING
    num_preferences: int = 5  # K; K + 1 preference vectors
    preference_index: int = 1
    away_steps: bool = True  # False gives the plain toward-only iteration

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not self.tolerance > 0:
            raise ValueError("tolerance must be > 0")
        if self.scope not in (SCOPE_ALL, SCOPE_EXCLUDE_EMBEDDING):
            raise ValueError(f"unknown solver scope {self.scope!r}")
        if self.num_preferences < 1:
            raise ValueError("num_preferences must be >= 1")
        if not 0 <= self.preference_index <= self.num_preferences:
            raise ValueError("preference_index out of range")


@dataclass
class StepRecord:
    step: int
    L_rec: float
    L_cd: float
    alpha1: float
    alpha2: float
    S_size: int
    fw_iters: int


# ------------------------------------------------------------- two-task case


def _min_norm_two_gram(a: float, b: float, c: float) -> tuple[float, float]:
    """Weights from the Gram entries ``a=|g1|^2, b=<g1,g2>, c=|g2|^2``."""
    if a == 0.0 and c == 0.0:
        raise DegenerateGradients("both gradients are zero")
    # a stationary task offers no direction; follow the other one
    if c == 0.0:
        return 1.0, 0.0
    if a == 0.0:
        return 0.0, 1.0
    denom = a + c - 2.0 * b
    if denom <= 1e-14 * (a + c):
        return 0.5, 0.5
    if b >= a:
        return 1.0, 0.0
    if b >= c:
        return 0.0, 1.0
    alpha1 = (c - b) / denom
    alpha1 = min(max(alpha1, 0.0), 1.0)
    return alpha1, 1.0 - alpha1


def min_norm_two(g1: np.ndarray, g2: np.ndarray) -> tuple[float, float]:
    """Simplex weights minimising ``|alpha1 g1 + alpha2 g2|``.

    If one gradient is exactly zero the other task receives all the weight,
    since a zero direction would stall training.

    Examples
    --------
    >>> min_norm_two(np.array([1.0, 0.0]), np.array([0.0, 2.0]))
    (0.8, 0.19999999999999996)
    """
    g1 = np.asarray(g1, dtype=np.float64).ravel()
    g2 = np.asarray(g2, dtype=np.float64).ravel()
    if g1.shape != g2.shape:
        raise ValueError("gradients differ in length")
    return _min_norm_two_gram(float(g1 @ g1), float(g1 @ g2), float(g2 @ g2))


# -------------------------------------------------------- preference vectors


@dataclass(frozen=True)
class PreferenceSet:
    vectors: np.ndarray  # (K + 1, 2)
    chosen: int = 1

    @property
    def K(self) -> int:
        return len(self.vectors) - 1

    @property
    def preferred(self) -> np.ndarray:
        return self.vectors[self.chosen]


def preference_vectors(K: int, chosen: int = 1) -> PreferenceSet:
    """``p_k = (cos(k pi / 2K), sin(k pi / 2K))`` for ``k = 0..K``."""
    if K < 1:
        raise ValueError("K must be >= 1")
    k = np.arange(K + 1)
    ang = k * np.pi / (2 * K)
    vecs = np.stack([np.cos(ang), np.sin(ang)], axis=1)
    vecs[0] = (1.0, 0.0)
    vecs[K] = (0.0, 1.0)
    vecs.flags.writeable = False
    if not 0 <= chosen <= K:
        raise ValueError("chosen preference out of range")
    return PreferenceSet(vecs, chosen)


def active_constraints(losses: Sequence[float], prefs: PreferenceSet) -> list[int]:
    """Indices k != chosen with ``p_k . L - p_chosen . L > 0``."""
    L = np.asarray(losses, dtype=np.float64)
    if L.shape != (2,):
        raise ValueError("loss vector must have two entries")
    if np.any(L < 0):
        raise ValueError("losses must be non-negative")
    vals = prefs.vectors @ L - prefs.preferred @ L
    return [k for k in range(len(vals)) if k != prefs.chosen and vals[k] > 0]


# ------------------------------------------------------------- Frank-Wolfe


class FrankWolfeResult(NamedTuple):
    weights: np.ndarray
    iterations: int
    converged: bool
    steps: tuple  # step size per iteration
    objectives: tuple = ()  # |sum beta g|^2 before the first and after every iteration


def frank_wolfe_gram(
    gram: np.ndarray,
    max_iterations: int = 100,
    tolerance: float = 1e-4,
    away_steps: bool = True,
) -> FrankWolfeResult:
    """Min-norm point of a convex hull given the Gram matrix of its vertices.

    Starts from uniform weights. A toward step moves to the vertex least
    aligned with the current combination, with the exact two-point line
    search. With ``away_steps`` the solver may instead move weight off the
    most aligned vertex in the support when that promises more decrease;
    without it, iterates zigzag when the optimum lies on a face. Stops once
    an untruncated step is shorter than ``tolerance``.
    """
    G = np.asarray(gram, dtype=np.float64)
    n = G.shape[0]
    if n == 0:
        raise ValueError("empty gradient set")
    if n == 1:
        return FrankWolfeResult(np.ones(1), 0, True, (), (float(G[0, 0]),))
    beta = np.full(n, 1.0 / n)
    steps = []
    objs = [float(beta @ G @ beta)]
    converged = False
    for _ in range(max_iterations):
        Gb = G @ beta
        dd = float(beta @ Gb)  # |d|^2
        t = int(np.argmin(Gb))
        gap_fw = dd - float(Gb[t])
        support = np.flatnonzero(beta > 0)
        a = int(support[np.argmax(Gb[support])])
        gap_away = float(Gb[a]) - dd
        away = away_steps and gap_away > gap_fw and beta[a] < 1.0
        if away:
            # direction beta - e_a, capped where beta_a reaches zero
            direction = beta.copy()
            direction[a] -= 1.0
            eta_max = beta[a] / (1.0 - beta[a])
        else:
            direction = -beta.copy()
            direction[t] += 1.0
            eta_max = 1.0
        Gd = G @ direction
        curv = float(direction @ Gd)  # |d|^2 along the direction
        slope = float(direction @ Gb)
        eta = 0.0 if curv <= 0.0 else min(max(-slope / curv, 0.0), eta_max)
        beta = beta + eta * direction
        if away and eta == eta_max:
            beta[a] = 0.0  # drop step: the vertex leaves the support
        beta = np.maximum(beta, 0.0)
        beta /= beta.sum()
        steps.append(eta)
        objs.append(float(beta @ G @ beta))
        if eta < tolerance and eta < eta_max:
            converged = True
            break
    return FrankWolfeResult(beta, len(steps), converged, tuple(steps), tuple(objs))


def frank_wolfe_min_norm(gradients: Sequence[np.ndarray] | np.ndarray, cfg: SolverConfig | None = None) -> FrankWolfeResult:
    """Frank-Wolfe on ``min |sum_k beta_k g_k|`` over the simplex.

    Starts from uniform weights; each iteration moves towards the vertex
    least aligned with the current combination, with an exact line search.
    Stops when the step falls below ``cfg.tolerance`` or after
    ``cfg.max_iterations`` iterations.
    """
    cfg = cfg or SolverConfig()
    if len(gradients) == 0:
        raise ValueError("empty gradient set")
    M = np.stack([np.asarray(g, dtype=np.float64).ravel() for g in gradients])
    if not np.all(np.isfinite(M)):
        raise ValueError("non-finite gradient")
    return frank_wolfe_gram(M @ M.T, cfg.max_iterations, cfg.tolerance, cfg.away_steps)


# ---------------------------------------------------------- reconciliation


def scope_names(names: Sequence[str], embedding_names: Iterable[str], scope: str) -> list[str]:
    if scope == SCOPE_ALL:
        out = list(names)
    elif scope == SCOPE_EXCLUDE_EMBEDDING:
        emb = set(embedding_names)
        out = [n for n in names if n not in emb]
    else:
        raise ValueError(f"unknown scope {scope!r}")
    if not out:
        raise ValueError("parameter scope is empty")
    return out


def flatten_gradients(grads: Mapping[str, np.ndarray], names: Sequence[str]) -> np.ndarray:
    """Concatenate the listed gradients in the given order into one float64 vector."""
    if not names:
        raise ValueError("parameter scope is empty")
    return np.concatenate([np.asarray(grads[n], dtype=np.float64).ravel() for n in names])


class Reconciliation(NamedTuple):
    alpha: tuple[float, float]
    active: list[int]
    fw_iters: int


def reconcile_weights(
    g_rec: np.ndarray,
    g_cd: np.ndarray,
    losses: Sequence[float],
    prefs: PreferenceSet,
    cfg: SolverConfig,
) -> Reconciliation:
    """Effective ``(alpha_rec, alpha_cd)`` for one step from flat gradients and losses."""
    a = float(g_rec @ g_rec)
    b = float(g_rec @ g_cd)
    c = float(g_cd @ g_cd)
    if not all(map(math.isfinite, (a, b, c))):
        raise FloatingPointError("non-finite gradient")
    if c == 0.0:
        return Reconciliation((1.0, 0.0), active_constraints(losses, prefs), 0)
    if a == 0.0:
        return Reconciliation((0.0, 1.0), active_constraints(losses, prefs), 0)
    S = active_constraints(losses, prefs)
    if not S:
        return Reconciliation(_min_norm_two_gram(a, b, c), S, 0)
    # rows: coefficients of each candidate direction on (g_rec, g_cd)
    coef = [(1.0, 0.0), (0.0, 1.0)]
    p1 = prefs.preferred
    coef += [tuple(prefs.vectors[k] - p1) for k in S]
    C = np.asarray(coef)
    G2 = np.array([[a, b], [b, c]])
    res = frank_wolfe_gram(C @ G2 @ C.T, cfg.max_iterations, cfg.tolerance, cfg.away_steps)
    w = res.weights @ C
    w = np.maximum(w, 0.0)
    total = float(w.sum())
    if total <= 0.0:
        alpha = (1.0, 0.0)
    else:
        alpha = (float(w[0] / total), float(w[1] / total))
    return Reconciliation(alpha, S, res.iterations)


def combine_gradients(
    g_rec: Mapping[str, np.ndarray], g_cd: Mapping[str, np.ndarray], alpha: tuple[float, float]
) -> dict[str, np.ndarray]:
    a1, a2 = alpha
    out = {}
    for k, v in g_rec.items():
        if a2 == 0.0:
            out[k] = v if a1 == 1.0 else a1 * v
        elif a1 == 0.0:
            out[k] = a2 * g_cd[k]
        else:
            out[k] = a1 * v + a2 * g_cd[k]
    return out


def reconcile_step(
    params: Mapping[str, nx.Tensor],
    compute_losses: Callable[[], tuple[nx.Tape, nx.Tensor, nx.Tensor]],
    prefs: PreferenceSet,
    cfg: SolverConfig,
    embedding_names: Iterable[str] = (),
    step: int = 0,
) -> tuple[dict[str, np.ndarray], StepRecord]:
    """One reconciled descent direction over all parameters.

    ``compute_losses`` runs a forward pass on a fresh tape and returns
    ``(tape, L_rec, L_cd)``. Both losses are differentiated on that tape; the
    weights are solved on the scoped gradients and then applied to the full
    gradients of both losses.
    """
    tape, l_rec, l_cd = compute_losses()
    lr_val, lc_val = float(l_rec.data), float(l_cd.data)
    if not (math.isfinite(lr_val) and math.isfinite(lc_val)):
        raise FloatingPointError(f"non-finite loss at step {step}: L_rec={lr_val}, L_cd={lc_val}")
    g_rec = nx.backward(l_rec, tape, params)
    g_cd = nx.backward(l_cd, tape, params)
    names = scope_names(list(params), embedding_names, cfg.scope)
    rec = reconcile_weights(
        flatten_gradients(g_rec, names), flatten_gradients(g_cd, names), (lr_val, lc_val), prefs, cfg
    )
    direction = combine_gradients(g_rec, g_cd, rec.alpha)
    record = StepRecord(step, lr_val, lc_val, rec.alpha[0], rec.alpha[1], len(rec.active), rec.fw_iters)
    return direction, record


# --------------------------------------------------------------------- logs


class StepLog:
    """Append-only CSV of :class:`StepRecord` rows."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        if not self.path.exists() or self.path.stat().st_size == 0:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("w", newline="") as fh:
                csv.writer(fh).writerow(LOG_COLUMNS)

    def append(self, records: Iterable[StepRecord]) -> None:
        with self.path.open("a", newline="") as fh:
            w = csv.writer(fh)
            for r in records:
                w.writerow(_format_record(r))


def _format_record(r: StepRecord) -> list:
    return [r.step, repr(r.L_rec), repr(r.L_cd), repr(r.alpha1), repr(r.alpha2), r.S_size, r.fw_iters]


def read_step_log(path: str | Path) -> list[StepRecord]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for row in rows:
        out.append(
            StepRecord(
                int(row["step"]),
                float(row["L_rec"]),
                float(row["L_cd"]),
                float(row["alpha1"]),
                float(row["alpha2"]),
                int(row["S_size"]),
                int(row["fw_iters"]),
            )
        )
    return out

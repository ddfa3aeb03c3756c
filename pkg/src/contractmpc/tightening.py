"""Constraint-tightening sequences for component-wise Lipschitz plants.

Two families of origin-symmetric boxes are computed from the Lipschitz
tables and the disturbance bound:

* F(j) bounds how an initial-state gap propagates along nominal
  trajectories under a shared input sequence,
* R(j) bounds the accumulated effect of the disturbance after j steps.

The recursion is elementary: c_{i,0} = sum_c L_w[i,c] wbar_c,
c_{i,j} = sum_a L_x[i,a] c_{a,j-1}, and d_{i,j} = sum_{k<j} c_{i,k}.
F(j) has half-widths c_{.,j}, R(j) has half-widths d_{.,j}, and the
tightened state sets are X (-) R(j).
"""

import csv
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal

import numpy as np

from .boxes import Box, pontryagin_diff
from .validation import check_positive_int

__all__ = [
    "TighteningSequences",
    "compute_tightening",
    "tightened_state_box",
    "max_feasible_horizon",
    "check_initial_gap_propagation",
    "check_disturbance_propagation",
    "round_half_up",
    "format_tightening_rows",
    "write_tightening_csv",
]


@dataclass(frozen=True)
class TighteningSequences:
    """The c/d constants and the boxes they induce, for j = 0..N_max.

    ``c`` and ``d`` are arrays of shape (N_max+1, n); row j holds the
    half-widths of F(j) and R(j) respectively.
    """

    c: np.ndarray
    d: np.ndarray

    @property
    def N_max(self):
        return self.c.shape[0] - 1

    @property
    def n(self):
        return self.c.shape[1]

    def F(self, j):
        return Box.symmetric(self.c[j])

    def R(self, j):
        return Box.symmetric(self.d[j])


def compute_tightening(model, N_max):
    """Run the c/d recursion for the worst-case disturbance magnitude.

    Parameters
    ----------
    model : PlantModel
    N_max : int
        Largest step index to compute (N_max >= 1).

    Returns
    -------
    TighteningSequences
    """
    check_positive_int(N_max, "N_max")
    wbar = model.dist_box.hi  # origin-symmetric by construction
    c = np.empty((N_max + 1, model.n))
    c[0] = model.L_w @ wbar
    for j in range(1, N_max + 1):
        c[j] = model.L_x @ c[j - 1]
    d = np.vstack([np.zeros(model.n), np.cumsum(c[:-1], axis=0)])
    return TighteningSequences(c=c, d=d)


def tightened_state_box(model, seq, j):
    """X (-) R(j); may be empty, which callers must check."""
    return pontryagin_diff(model.state_box, seq.R(j))


def max_feasible_horizon(model, seq):
    """Largest N <= N_max such that every X (-) R(j), j <= N, is non-empty
    and contains the regulation target.

    Raises
    ------
    ValueError
        If already X (-) R(1) fails, i.e. the disturbance is too large for
        any one-step prediction.
    """
    last_ok = -1
    for j in range(seq.N_max + 1):
        box = tightened_state_box(model, seq, j)
        if box.is_empty or not box.contains(model.x_ref):
            break
        last_ok = j
    if last_ok < 1:
        raise ValueError(
            "disturbance too large: X shrunk by R(1) is empty or excludes the target"
        )
    return last_ok


# ---------------------------------------------------------------------------
# sampled validation of the two propagation bounds
# ---------------------------------------------------------------------------

def _rollout(model, x0, useq, wseq):
    """Nominal/perturbed trajectory under an input sequence; returns (N+1, n)."""
    xs = [np.asarray(x0, dtype=float)]
    for k in range(useq.shape[0]):
        xs.append(model.step(xs[-1], useq[k], wseq[k]))
    return np.stack(xs)


def check_initial_gap_propagation(model, seq, n_samples=200, seed=0):
    """Sampled check that an F(0)-sized initial gap stays inside F(j).

    For each sample: draw x from X, a gap from F(0), an input sequence from
    U^(N_max), and roll both states forward without disturbance.  Returns
    the worst signed margin of the per-step bound (negative = violation).
    """
    rng = np.random.default_rng(seed)
    N = seq.N_max
    worst = np.inf
    w0 = np.zeros((N, model.r))
    for _ in range(n_samples):
        x = model.state_box.sample(rng, 1)[0]
        gap = seq.F(0).sample(rng, 1)[0]
        useq = model.input_box.sample(rng, N)
        traj = _rollout(model, x, useq, w0)
        traj_shifted = _rollout(model, x + gap, useq, w0)
        margin = (seq.c - np.abs(traj_shifted - traj)).min()
        worst = min(worst, float(margin))
    return worst


def check_disturbance_propagation(model, seq, n_samples=200, seed=0):
    """Sampled check that disturbance effects after j steps stay inside R(j).

    For each sample: draw x, an input sequence, and a disturbance sequence,
    and compare the perturbed trajectory against the nominal one.  Returns
    the worst signed margin (negative = violation).
    """
    rng = np.random.default_rng(seed)
    N = seq.N_max
    worst = np.inf
    w0 = np.zeros((N, model.r))
    for _ in range(n_samples):
        x = model.state_box.sample(rng, 1)[0]
        useq = model.input_box.sample(rng, N)
        wseq = model.dist_box.sample(rng, N)
        nominal = _rollout(model, x, useq, w0)
        perturbed = _rollout(model, x, useq, wseq)
        margin = (seq.d - np.abs(perturbed - nominal)).min()
        worst = min(worst, float(margin))
    return worst


# ---------------------------------------------------------------------------
# table formatting (published tables print rounded values, zeros as "0")
# ---------------------------------------------------------------------------

def round_half_up(x, decimals):
    """Round with ties away from zero, matching the published tables.

    numpy's round() ties to even, which would disagree on exact half-way
    values, so the decimal module does the rounding.
    """
    q = Decimal(1).scaleb(-decimals)
    return float(Decimal(repr(float(x))).quantize(q, rounding=ROUND_HALF_UP))


def _fmt(x, decimals):
    v = round_half_up(x, decimals)
    return "0" if v == 0 else f"{v:.{decimals}f}"


def format_tightening_rows(seq, decimals):
    """Rows of the F/R table: j, then F(j) bounds, then R(j) bounds.

    Values are strings rounded to ``decimals`` places with exact zeros
    printed as "0", matching the published layout.
    """
    header = (
        ["j"]
        + [f"F_x{i + 1}" for i in range(seq.n)]
        + [f"R_x{i + 1}" for i in range(seq.n)]
    )
    rows = [header]
    for j in range(seq.N_max + 1):
        rows.append(
            [str(j)]
            + [_fmt(v, decimals) for v in seq.c[j]]
            + [_fmt(v, decimals) for v in seq.d[j]]
        )
    return rows


def write_tightening_csv(path, seq, decimals):
    """Write the formatted F/R table to a CSV file."""
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerows(format_tightening_rows(seq, decimals))

"""Spectral test bench for causal mixing dynamics.

Models the looped update's error propagation as eps <- M eps with
M = (1-beta) I + beta A, where A is a row-stochastic lower-triangular
matrix playing the role of time-averaged causal attention. Provides the
eigenvalue identity for triangular matrices, the entropy bound on diagonal
mass with a brute-force oracle, the trace bound, and a synthesizer that
hits a target mean normalized entropy by temperature bisection.

The diagonal bound exp(-E_i / i) is treated as a heuristic, not a theorem:
peaked rows at small support sizes violate it (support 2 with p = 0.9 is
the standard counterexample), so everything here reports hold/violate
flags instead of asserting the inequality.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .engine.rng import make_generator
from .schemas import SCHEMA_VERSION, write_csv


class TheoryError(ValueError):
    pass


def _check_causal_stochastic(a_bar: np.ndarray) -> np.ndarray:
    a = np.asarray(a_bar, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise TheoryError("mixing source must be a square matrix")
    if np.any(np.triu(a, 1) != 0.0):
        raise TheoryError("mixing source must be lower-triangular")
    if np.any(a < 0.0):
        raise TheoryError("mixing source must be nonnegative")
    if np.any(np.abs(a.sum(axis=1) - 1.0) > 1e-9):
        raise TheoryError("mixing source rows must sum to 1")
    return a


@dataclass(frozen=True)
class MixingMatrix:
    a_bar: np.ndarray
    beta: float

    def __post_init__(self) -> None:
        a = _check_causal_stochastic(self.a_bar)
        object.__setattr__(self, "a_bar", a)
        if not 0.0 < self.beta <= 1.0:
            raise TheoryError("beta must be in (0, 1]")

    @property
    def n(self) -> int:
        return self.a_bar.shape[0]

    @property
    def m(self) -> np.ndarray:
        return (1.0 - self.beta) * np.eye(self.n) + self.beta * self.a_bar


def row_entropy_unnormalized(row: np.ndarray) -> float:
    """Shannon entropy in nats over a simplex row; 0 log 0 reads as 0."""
    r = np.asarray(row, dtype=np.float64)
    if r.ndim != 1:
        raise TheoryError("row must be 1-D")
    if np.any(r < 0.0):
        raise TheoryError("row entries must be nonnegative")
    if abs(r.sum() - 1.0) > 1e-9:
        raise TheoryError("row must sum to 1")
    nz = r[r > 0.0]
    return float(-(nz * np.log(nz)).sum())


def mean_unnormalized_entropy(a_bar: np.ndarray) -> float:
    """Mean of per-row entropies over causal support (row i keeps i+1 cells)."""
    a = _check_causal_stochastic(a_bar)
    return float(
        np.mean([row_entropy_unnormalized(a[i, : i + 1]) for i in range(len(a))])
    )


def mean_normalized_entropy(a_bar: np.ndarray) -> float:
    """Mean over rows with >= 2 causal positions of entropy / log(support)."""
    a = _check_causal_stochastic(a_bar)
    if len(a) < 2:
        raise TheoryError("need at least 2 rows for normalized entropy")
    values = []
    for i in range(1, len(a)):
        values.append(row_entropy_unnormalized(a[i, : i + 1]) / np.log(i + 1))
    return float(np.mean(values))


def _causal_softmax_rows(logits: np.ndarray, temperature: float) -> np.ndarray:
    n = logits.shape[0]
    scaled = logits / temperature
    rows = np.zeros((n, n), dtype=np.float64)
    rows[0, 0] = 1.0
    for i in range(1, n):
        z = scaled[i, : i + 1]
        z = z - z.max()
        e = np.exp(z)
        rows[i, : i + 1] = e / e.sum()
    return rows


def synthesize_attention(
    n: int, target_entropy: float, seed: int, index: int = 0, tol: float = 0.02
) -> np.ndarray:
    """Causal softmax of fixed random logits, temperature found by bisection
    so the mean normalized entropy lands within tol of the target."""
    if n < 2:
        raise TheoryError("synthesis needs n >= 2")
    if not 0.0 < target_entropy <= 1.0:
        raise TheoryError(f"target entropy {target_entropy} outside (0, 1]")
    logits = make_generator(seed, "theory_logits", index).standard_normal((n, n))

    lo, hi = 1e-4, 1e4
    ent_lo = mean_normalized_entropy(_causal_softmax_rows(logits, lo))
    ent_hi = mean_normalized_entropy(_causal_softmax_rows(logits, hi))
    if not ent_lo - tol <= target_entropy <= ent_hi + tol:
        raise TheoryError(
            f"target entropy {target_entropy} unreachable "
            f"(range [{ent_lo:.4f}, {ent_hi:.4f}])"
        )
    for _ in range(200):
        mid = np.sqrt(lo * hi)  # bisect in log space: entropy is monotone in T
        if mean_normalized_entropy(_causal_softmax_rows(logits, mid)) < target_entropy:
            lo = mid
        else:
            hi = mid
    rows = _causal_softmax_rows(logits, np.sqrt(lo * hi))
    achieved = mean_normalized_entropy(rows)
    if abs(achieved - target_entropy) > tol:
        raise TheoryError(
            f"bisection landed at {achieved:.4f}, outside {target_entropy} +- {tol}"
        )
    return rows


def build_mixing_matrix(source, beta: float) -> MixingMatrix:
    """source: either an (N, N) array of averaged causal attention rows, or a
    dict {n, target_entropy, seed[, index, tol]} for the synthesizer."""
    if isinstance(source, dict):
        rows = synthesize_attention(
            n=int(source["n"]),
            target_entropy=float(source["target_entropy"]),
            seed=int(source.get("seed", 0)),
            index=int(source.get("index", 0)),
            tol=float(source.get("tol", 0.02)),
        )
        return MixingMatrix(rows, beta)
    return MixingMatrix(np.asarray(source, dtype=np.float64), beta)


@dataclass(frozen=True)
class ErrorTrajectory:
    norms: tuple[float, ...]

    @property
    def ratio(self) -> float:
        return self.norms[-1] / self.norms[0]


def simulate_error_dynamics(mixing, eps0: np.ndarray, k: int) -> ErrorTrajectory:
    """Iterate eps <- M eps for k steps, recording Frobenius norms.

    Accepts a MixingMatrix or a raw square matrix (the latter allows
    sub-stochastic test modes like M = I/2)."""
    m = mixing.m if isinstance(mixing, MixingMatrix) else np.asarray(mixing, np.float64)
    if k < 1:
        raise TheoryError("k must be >= 1")
    eps = np.asarray(eps0, dtype=np.float64)
    if not np.all(np.isfinite(eps)):
        raise TheoryError("initial error must be finite")
    norms = [float(np.linalg.norm(eps))]
    for _ in range(k):
        eps = m @ eps
        norms.append(float(np.linalg.norm(eps)))
    return ErrorTrajectory(norms=tuple(norms))


def triangular_eigenvalues(m: np.ndarray) -> np.ndarray:
    """Eigenvalues of a lower-triangular matrix: exactly its diagonal."""
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise TheoryError("need a square matrix")
    if np.any(np.triu(a, 1) != 0.0):
        raise TheoryError("matrix is not lower-triangular")
    return np.diag(a).copy()


def characteristic_polynomial_roots(m: np.ndarray) -> np.ndarray:
    """Root-finding oracle: Faddeev-LeVerrier coefficients, then np.roots.

    Deliberately never reads the diagonal shortcut, so it can cross-check
    triangular_eigenvalues."""
    a = np.asarray(m, dtype=np.float64)
    n = a.shape[0]
    coeffs = np.zeros(n + 1)
    coeffs[0] = 1.0
    mk = a.copy()
    for k in range(1, n + 1):
        coeffs[k] = -np.trace(mk) / k
        mk = a @ (mk + coeffs[k] * np.eye(n))
    return np.sort(np.roots(coeffs).real)


def lemma_bound(entropy: float, support: int) -> float:
    """Heuristic ceiling exp(-E / i) for the diagonal of a length-i row."""
    if entropy < 0.0:
        raise TheoryError("entropy must be nonnegative")
    if support < 1:
        raise TheoryError("support must be >= 1")
    return float(np.exp(-entropy / support))


def max_diagonal_oracle(
    support: int,
    target_entropy: float,
    resolution: float = 1e-4,
    n_random: int = 20000,
    seed: int = 0,
) -> float:
    """Largest diagonal entry achievable at a given row entropy, by search.

    Sweeps the one-parameter family {p, (1-p)/(i-1), ...} plus dense random
    simplex samples; returns the best diagonal whose entropy lies within
    resolution of the target. This is the ground truth the heuristic bound
    is compared against.
    """
    if support < 1:
        raise TheoryError("support must be >= 1")
    if resolution < 1e-4:
        raise TheoryError("resolution below 1e-4 is not supported")
    max_e = float(np.log(support))
    if not 0.0 <= target_entropy <= max_e + 1e-12:
        raise TheoryError(
            f"entropy {target_entropy} infeasible for support {support} "
            f"(range [0, {max_e:.5f}])"
        )
    if target_entropy == 0.0:
        return 1.0
    if support == 1:
        return 1.0

    best = -1.0
    # Family {p on the diagonal, rest uniform}: entropy is monotone in p on
    # [1/i, 1), so a fine grid brackets the target tightly.
    ps = np.arange(1.0 / support, 1.0, resolution / 10.0)
    rest = (1.0 - ps) / (support - 1)
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -ps * np.log(ps) - np.where(rest > 0, (1 - ps) * np.log(rest), 0.0)
    close = np.abs(h - target_entropy) <= resolution
    if np.any(close):
        best = float(ps[close].max())

    rng = make_generator(seed, "oracle", support)
    samples = rng.dirichlet(np.ones(support), size=n_random)
    ents = np.array([-(r[r > 0] * np.log(r[r > 0])).sum() for r in samples])
    close = np.abs(ents - target_entropy) <= resolution
    if np.any(close):
        best = max(best, float(samples[close].max()))

    if best < 0.0:
        raise TheoryError(
            f"no simplex point found with entropy {target_entropy} "
            f"+- {resolution} at support {support}"
        )
    return best


def trace_bound_check(mixing: MixingMatrix) -> tuple[float, float, bool]:
    """Trace of A against N * exp(-mean_row_entropy / N)."""
    a = mixing.a_bar
    n = mixing.n
    mean_e = mean_unnormalized_entropy(a)
    trace = float(np.trace(a))
    bound = float(n * np.exp(-mean_e / n))
    return trace, bound, trace <= bound + 1e-12


def lemma_violations(a_bar: np.ndarray, slack: float = 1e-12) -> int:
    """Rows whose diagonal exceeds the heuristic entropy ceiling."""
    a = _check_causal_stochastic(a_bar)
    count = 0
    for i in range(len(a)):
        row = a[i, : i + 1]
        bound = lemma_bound(row_entropy_unnormalized(row), i + 1)
        if a[i, i] > bound + slack:
            count += 1
    return count


def spearman_rank_correlation(x, y) -> float:
    """Spearman rho via average ranks; no external stats dependency."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 2:
        raise TheoryError("need two equal-length 1-D samples")

    def ranks(v: np.ndarray) -> np.ndarray:
        order = np.argsort(v, kind="stable")
        r = np.empty(len(v), dtype=np.float64)
        i = 0
        while i < len(v):
            j = i
            while j + 1 < len(v) and v[order[j + 1]] == v[order[i]]:
                j += 1
            r[order[i : j + 1]] = (i + j) / 2.0 + 1.0
            i = j + 1
        return r

    rx, ry = ranks(x), ranks(y)
    rx -= rx.mean()
    ry -= ry.mean()
    denom = np.sqrt((rx**2).sum() * (ry**2).sum())
    if denom == 0.0:
        raise TheoryError("constant ranks have no correlation")
    return float((rx * ry).sum() / denom)


def basis_error(n: int) -> np.ndarray:
    """Canonical initial error: one basis column per position after the first.

    Position 0 attends only to itself, so its loop iterate is already a
    fixed point and its error is identically zero; the remaining columns
    probe every other direction deterministically, making the K-step ratio
    a pure function of the mixing matrix.
    """
    eps = np.zeros((n, n - 1))
    eps[1:, :] = np.eye(n - 1)
    return eps


def entropy_sweep(
    n: int,
    beta: float,
    targets,
    k: int = 10,
    seed: int = 0,
) -> tuple[list[dict], dict]:
    """One synthesized matrix per target entropy; returns (rows, summary).

    All targets share a single logit draw, so temperature (hence entropy)
    is the only thing varying across the sweep, and the initial error is
    the canonical basis probe. Each row records the realized mean
    normalized entropy, the K-step error ratio, the trace bound sides, and
    the count of rows violating the diagonal ceiling. The summary holds the
    rank correlation between entropy and error ratio, the sweep's headline
    number.
    """
    rows: list[dict] = []
    entropies: list[float] = []
    ratios: list[float] = []
    eps0 = basis_error(n)
    for target in targets:
        a_bar = synthesize_attention(n, float(target), seed, index=0)
        mix = MixingMatrix(a_bar, beta)
        trajectory = simulate_error_dynamics(mix, eps0, k)
        trace, bound, _ = trace_bound_check(mix)
        realized = mean_normalized_entropy(a_bar)
        entropies.append(realized)
        ratios.append(trajectory.ratio)
        rows.append(
            {
                "N": n,
                "beta": beta,
                "mean_entropy": realized,
                "error_ratio_K": trajectory.ratio,
                "trace": trace,
                "trace_bound": bound,
                "lemma_violations_count": lemma_violations(a_bar),
            }
        )
    summary = {
        "schema_version": SCHEMA_VERSION,
        "n_matrices": len(rows),
        "N": n,
        "beta": beta,
        "K": k,
        "seed": seed,
        "spearman_entropy_vs_error_ratio": spearman_rank_correlation(
            entropies, ratios
        ),
    }
    return rows, summary


def write_theory_report(out_dir: str, rows: list[dict], summary: dict) -> None:
    os.makedirs(out_dir, exist_ok=True)
    write_csv(os.path.join(out_dir, "theory_matrices.csv"), "theory_matrices", rows)
    with open(os.path.join(out_dir, "theory_summary.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")

"""Subspace similarity between learned LoRA factors, projection of a weight onto
its update's subspace, and rank sweeps."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .adapters import AdaptationState, AdaptationStrategy
from .tensor_core import DimensionError, frobenius_norm, svd


def right_basis(A: np.ndarray, i: int) -> np.ndarray:
    """Top-``i`` right-singular vectors of ``A`` as columns (k x i)."""
    res = svd(A)
    if not 1 <= i <= res.V.shape[1]:
        raise DimensionError(f"requested {i} singular vectors, matrix of shape {np.shape(A)} has {res.V.shape[1]}")
    return res.V[:, :i]


def left_basis(W: np.ndarray, i: int) -> np.ndarray:
    res = svd(W)
    if not 1 <= i <= res.U.shape[1]:
        raise DimensionError(f"requested {i} singular vectors, matrix of shape {np.shape(W)} has {res.U.shape[1]}")
    return res.U[:, :i]


def _check_pair(A1, A2):
    A1, A2 = np.asarray(A1, dtype=np.float64), np.asarray(A2, dtype=np.float64)
    if A1.ndim != 2 or A2.ndim != 2 or A1.shape[1] != A2.shape[1]:
        raise DimensionError(f"factors must share the column dimension: {A1.shape} vs {A2.shape}")
    return A1, A2


def subspace_similarity(A1, A2, i: int, j: int) -> float:
    """phi = ||U1_i^T U2_j||_F^2 / min(i, j), in [0, 1]."""
    A1, A2 = _check_pair(A1, A2)
    U1, U2 = right_basis(A1, i), right_basis(A2, j)
    # roundoff can push a perfect overlap a few ulps past 1
    return min(frobenius_norm(U1.T @ U2) ** 2 / min(i, j), 1.0)


def projection_metric_check(A1, A2, i: int, j: int, tol: float = 1e-10) -> tuple[float, float]:
    """Projection distance d and similarity phi from the principal-angle cosines.

    The two are tied by phi = (p - d^2) / p with p = min(i, j); this is
    asserted before returning.
    """
    A1, A2 = _check_pair(A1, A2)
    U1, U2 = right_basis(A1, i), right_basis(A2, j)
    p = min(i, j)
    cos2 = float(np.sum(svd(U1.T @ U2).S ** 2))
    d = math.sqrt(max(p - cos2, 0.0))
    phi = frobenius_norm(U1.T @ U2) ** 2 / p
    if abs(phi - (p - d * d) / p) > tol:
        raise ArithmeticError(f"phi={phi} disagrees with (p - d^2)/p={(p - d * d) / p}")
    return d, phi


@dataclass
class SubspaceReport:
    left_label: str
    right_label: str
    grid: np.ndarray  # grid[i-1, j-1] = phi(A1, A2, i, j)

    @property
    def i_max(self) -> int:
        return self.grid.shape[0]

    @property
    def j_max(self) -> int:
        return self.grid.shape[1]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["i"] + [f"j={j}" for j in range(1, self.j_max + 1)])
            for i in range(self.i_max):
                w.writerow([i + 1] + [f"{v:.6f}" for v in self.grid[i]])


def grid_from_bases(U1: np.ndarray, U2: np.ndarray) -> np.ndarray:
    """phi for every (i, j) prefix of two orthonormal bases."""
    M2 = (U1.T @ U2) ** 2
    cum = M2.cumsum(axis=0).cumsum(axis=1)
    i = np.arange(1, U1.shape[1] + 1)[:, None]
    j = np.arange(1, U2.shape[1] + 1)[None, :]
    return np.clip(cum / np.minimum(i, j), 0.0, 1.0)


def subspace_grid(A1, A2, i_max: int | None = None, j_max: int | None = None,
                  left_label: str = "A1", right_label: str = "A2") -> SubspaceReport:
    A1, A2 = _check_pair(A1, A2)
    i_max = i_max or min(A1.shape)
    j_max = j_max or min(A2.shape)
    return SubspaceReport(left_label, right_label, grid_from_bases(right_basis(A1, i_max), right_basis(A2, j_max)))


def weight_delta_grid(W, dW, i_max: int, j_max: int) -> SubspaceReport:
    """Similarity between the column spaces of a weight and of its update."""
    return SubspaceReport("W", "dW", grid_from_bases(left_basis(W, i_max), left_basis(dW, j_max)))


@dataclass
class BaselineStats:
    mean_grid: np.ndarray
    top1_samples: np.ndarray

    def top1_quantile(self, q: float) -> float:
        return float(np.quantile(self.top1_samples, q))


def random_baseline(shape1, shape2, i_max: int, j_max: int, draws: int = 100, seed: int = 0) -> BaselineStats:
    """phi grids of independent Gaussian matrices with the given shapes."""
    rng = np.random.default_rng(seed)
    grids = []
    for _ in range(draws):
        G1, G2 = rng.standard_normal(shape1), rng.standard_normal(shape2)
        grids.append(grid_from_bases(right_basis(G1, i_max), right_basis(G2, j_max)))
    grids = np.stack(grids)
    return BaselineStats(mean_grid=grids.mean(axis=0), top1_samples=grids[:, 0, 0])


@dataclass
class SeedPairResult:
    reports: dict[tuple[int, str], SubspaceReport]
    baseline: BaselineStats
    baseline_report: SubspaceReport
    threshold: float = field(default=0.0)

    def top1(self) -> dict[tuple[int, str], float]:
        return {k: float(r.grid[0, 0]) for k, r in self.reports.items()}

    def exceeds_baseline(self) -> dict[tuple[int, str], bool]:
        return {k: v > self.threshold for k, v in self.top1().items()}


def _factors(run) -> dict[tuple[int, str], np.ndarray]:
    if isinstance(run, AdaptationState):
        return {k: m.A for k, m in run.lora.items()}
    if hasattr(run, "state") and isinstance(run.state, AdaptationState):
        return {k: m.A for k, m in run.state.lora.items()}
    return dict(run)


def seed_pair_study(run_a, run_b, targets=None, ranks: tuple[int, int] | None = None,
                    draws: int = 100, quantile: float = 0.99, seed: int = 0) -> SeedPairResult:
    """Compare the A factors of two runs that differ only in random seed."""
    fa, fb = _factors(run_a), _factors(run_b)
    keys = [k for k in fa if targets is None or k[1] in targets]
    if not keys:
        raise ValueError("no LoRA factors to compare")
    reports = {}
    shape = None
    for k in keys:
        if k not in fb:
            raise ValueError(f"run_b has no factor for {k}")
        A1, A2 = fa[k], fb[k]
        if A1.shape != A2.shape:
            raise DimensionError(f"rank mismatch for {k}: {A1.shape} vs {A2.shape}")
        shape = A1.shape
        i_max, j_max = ranks or (A1.shape[0], A2.shape[0])
        reports[k] = subspace_grid(A1, A2, i_max, j_max, f"a:{k[0]}.{k[1]}", f"b:{k[0]}.{k[1]}")
    i_max, j_max = ranks or (shape[0], shape[0])
    base = random_baseline(shape, shape, i_max, j_max, draws=draws, seed=seed)
    return SeedPairResult(reports=reports, baseline=base,
                          baseline_report=SubspaceReport("gauss", "gauss", base.mean_grid),
                          threshold=base.top1_quantile(quantile))


# ---------------------------------------------------------------------------
# Projection of W onto the subspace of its update
# ---------------------------------------------------------------------------

@dataclass
class ProjectionReport:
    r: int
    norm_W: float
    norm_dW: float
    norm_projected: dict[str, float]  # keyed by basis: "dW", "W", "random"
    amplification: float

    def row(self) -> dict:
        return {"r": self.r, "norm_W": self.norm_W, "norm_dW": self.norm_dW,
                "proj_dW": self.norm_projected["dW"], "proj_W": self.norm_projected["W"],
                "proj_random": self.norm_projected["random"], "amplification": self.amplification}


def projected_norm(W, U, V) -> float:
    """||U^T W V||_F for orthonormal columns U (d x r), V (k x r)."""
    return frobenius_norm(U.T @ W @ V)


def projection_study(W, dW, r: int, seed: int = 0) -> ProjectionReport:
    W, dW = np.asarray(W, dtype=np.float64), np.asarray(dW, dtype=np.float64)
    if W.shape != dW.shape:
        raise DimensionError(f"W {W.shape} and dW {dW.shape} differ in shape")
    if not 1 <= r <= min(W.shape):
        raise DimensionError(f"rank {r} outside [1, {min(W.shape)}]")
    sd, sw = svd(dW), svd(W)
    rng = np.random.default_rng(seed)
    sr = svd(rng.standard_normal(W.shape))
    norms = {
        "dW": projected_norm(W, sd.U[:, :r], sd.V[:, :r]),
        "W": projected_norm(W, sw.U[:, :r], sw.V[:, :r]),
        "random": projected_norm(W, sr.U[:, :r], sr.V[:, :r]),
    }
    norm_dW = frobenius_norm(dW)
    amp = norm_dW / norms["dW"] if norms["dW"] > 0 else math.inf
    return ProjectionReport(r=r, norm_W=frobenius_norm(W), norm_dW=norm_dW, norm_projected=norms, amplification=amp)


def projection_table(W, dW_by_rank: Mapping[int, np.ndarray], seed: int = 0) -> list[dict]:
    """One row per rank, laid out like a weight/update norm comparison table."""
    return [projection_study(W, dW, r, seed=seed).row() for r, dW in sorted(dW_by_rank.items())]


# ---------------------------------------------------------------------------
# Heat maps
# ---------------------------------------------------------------------------

def write_pgm(grid: np.ndarray, path, cell: int = 1) -> None:
    """Plain (P2) 8-bit grayscale image; value 1.0 maps to white."""
    g = np.clip(np.asarray(grid, dtype=np.float64), 0.0, 1.0)
    g = np.kron(g, np.ones((cell, cell)))
    px = np.rint(g * 255).astype(int)
    lines = ["P2", f"{px.shape[1]} {px.shape[0]}", "255"]
    lines += [" ".join(map(str, row)) for row in px]
    Path(path).write_text("\n".join(lines) + "\n")


def read_pgm(path) -> np.ndarray:
    tokens = Path(path).read_text().split()
    if tokens[0] != "P2":
        raise ValueError("not a plain PGM file")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    return np.array(tokens[4:4 + w * h], dtype=float).reshape(h, w) / maxval


# ---------------------------------------------------------------------------
# Rank sweep
# ---------------------------------------------------------------------------

@dataclass
class SweepCell:
    targets: tuple[str, ...]
    r: int
    trainable_params: int
    train_loss: float
    eval_loss: float
    eval_accuracy: float
    result: object = field(default=None, repr=False)

    def row(self) -> dict:
        return {"targets": "".join(t[-1] for t in self.targets), "r": self.r,
                "trainable_params": self.trainable_params, "train_loss": self.train_loss,
                "eval_loss": self.eval_loss, "eval_accuracy": self.eval_accuracy}


def rank_sweep(model, train_set, eval_set, ranks, targets_variants, hyper, alpha: float | None = None,
               keep_results: bool = False) -> list[SweepCell]:
    """Train one LoRA adaptation per (targets, r) cell and record its losses.

    ``alpha`` defaults to the first rank so it stays fixed across the sweep.
    """
    from .model import adapt, evaluate

    ranks = list(ranks)
    alpha = float(ranks[0] if alpha is None else alpha)
    cells = []
    for targets in targets_variants:
        for r in ranks:
            strat = AdaptationStrategy("LoRA", r=r, alpha=alpha, targets=tuple(targets))
            res = adapt(model, train_set, strat, hyper)
            ev = evaluate(res.model, eval_set)
            cells.append(SweepCell(strat.targets, r, res.trainable_params, res.epoch_losses[-1],
                                   ev["loss"], ev["accuracy"], res if keep_results else None))
    return cells


def sweep_grid(cells: list[SweepCell], value: str = "eval_loss") -> tuple[list[str], list[int], np.ndarray]:
    """Rows = target sets, columns = ranks."""
    rows = sorted({"".join(t[-1] for t in c.targets) for c in cells},
                  key=lambda s: [c.targets for c in cells].index(tuple(f"W_{x}" for x in s)))
    cols = sorted({c.r for c in cells})
    grid = np.full((len(rows), len(cols)), np.nan)
    for c in cells:
        grid[rows.index("".join(t[-1] for t in c.targets)), cols.index(c.r)] = getattr(c, value)
    return rows, cols, grid

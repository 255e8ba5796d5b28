"""Retrieval metrics, attention-map comparison statistics and Nemenyi
critical-difference analysis.

Ties are handled with the mean-rank convention everywhere: tied items share
the average of the positions they jointly occupy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, stats
from scipy.special import logsumexp

from gma.errors import ContractError

RECALL_KS = (1, 5, 10)
EMD_EXACT_MAX_SIDE = 8
SINKHORN_REG = 1e-2
SINKHORN_TOL = 1e-7


@dataclass
class RankedRound:
    scores: np.ndarray
    gt_index: int
    relevance: np.ndarray | None = None

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        n = len(self.scores)
        if n < 1:
            raise ContractError("a round needs at least one candidate")
        if not 0 <= self.gt_index < n:
            raise ContractError(f"gt index {self.gt_index} out of range [0, {n})")
        if self.relevance is None:
            rel = np.zeros(n)
            rel[self.gt_index] = 1.0
            self.relevance = rel
        self.relevance = np.asarray(self.relevance, dtype=np.float64)
        if self.relevance.shape != self.scores.shape:
            raise ContractError("relevance and scores differ in length")
        if self.relevance[self.gt_index] <= 0:
            raise ContractError("ground-truth relevance must be positive")


@dataclass
class MetricVector:
    r_at: dict[int, float]
    mrr: float
    mean_rank: float
    ndcg: float
    count: int = 0

    def to_table_row(self) -> dict[str, float]:
        """Flat mapping keyed by the usual results-table column names."""
        return {
            "R@1": self.r_at[1],
            "R@5": self.r_at[5],
            "R@10": self.r_at[10],
            "MRR": self.mrr,
            "Mean": self.mean_rank,
            "NDCG": self.ndcg,
        }


def gt_rank(scores: np.ndarray, gt_index: int) -> float:
    """1 + #(strictly higher) + half the number of other candidates tied with the ground truth."""
    s = scores[gt_index]
    higher = int(np.count_nonzero(scores > s))
    ties = int(np.count_nonzero(scores == s)) - 1
    return 1.0 + higher + ties / 2.0


def _tie_aware_discounts(scores: np.ndarray) -> np.ndarray:
    """Per-candidate discount ``1/log2(1 + position)`` averaged over tie groups."""
    n = len(scores)
    order = np.argsort(-scores, kind="stable")
    disc = 1.0 / np.log2(np.arange(2, n + 2))
    out = np.empty(n)
    sorted_scores = scores[order]
    start = 0
    while start < n:
        end = start
        while end + 1 < n and sorted_scores[end + 1] == sorted_scores[start]:
            end += 1
        out[order[start:end + 1]] = disc[start:end + 1].mean()
        start = end + 1
    return out


def ndcg(scores: np.ndarray, relevance: np.ndarray) -> float:
    """Full-depth NDCG with linear gains."""
    disc = 1.0 / np.log2(np.arange(2, len(scores) + 2))
    ideal = float(np.sort(relevance)[::-1] @ disc)
    if ideal <= 0:
        raise ContractError("NDCG undefined for all-zero relevance")
    return float(relevance @ _tie_aware_discounts(scores)) / ideal


def retrieval_metrics(rounds: list[RankedRound]) -> MetricVector:
    if not rounds:
        raise ContractError("retrieval_metrics needs at least one round")
    ranks = np.array([gt_rank(r.scores, r.gt_index) for r in rounds])
    return MetricVector(
        r_at={k: float(np.mean(ranks <= k)) for k in RECALL_KS},
        mrr=float(np.mean(1.0 / ranks)),
        mean_rank=float(np.mean(ranks)),
        ndcg=float(np.mean([ndcg(r.scores, r.relevance) for r in rounds])),
        count=len(rounds),
    )


# --------------------------------------------------------------------------
# map comparison
# --------------------------------------------------------------------------


def spearman_rc(a: np.ndarray, b: np.ndarray) -> tuple[float, float]:
    """Spearman rho of two maps (flattened) and its two-sided t-approximation p-value."""
    x = np.asarray(a, dtype=np.float64).reshape(-1)
    y = np.asarray(b, dtype=np.float64).reshape(-1)
    if np.shape(a) != np.shape(b):
        raise ContractError(f"map shapes differ: {np.shape(a)} vs {np.shape(b)}")
    n = x.size
    if n < 3:
        raise ContractError("rank correlation needs at least 3 cells")
    rx, ry = stats.rankdata(x), stats.rankdata(y)
    dx, dy = rx - rx.mean(), ry - ry.mean()
    denom = math.sqrt(float(dx @ dx) * float(dy @ dy))
    if denom == 0:
        raise ContractError("rank correlation undefined for a constant map")
    rho = float(np.clip((dx @ dy) / denom, -1.0, 1.0))
    if abs(rho) == 1.0:
        return rho, 0.0
    t = rho * math.sqrt((n - 2) / (1 - rho * rho))
    return rho, float(2 * stats.t.sf(abs(t), n - 2))


@dataclass
class EMDResult:
    distance: float
    exact: bool
    iterations: int = 0


def _normalise(m: np.ndarray, name: str) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if np.any(m < 0):
        raise ContractError(f"{name} has negative mass")
    total = m.sum()
    if total <= 0:
        raise ContractError(f"{name} has zero total mass")
    return m / total


def grid_cost(shape: tuple[int, int]) -> np.ndarray:
    rows, cols = np.indices(shape)
    pts = np.stack([rows.ravel(), cols.ravel()], axis=1).astype(np.float64)
    diff = pts[:, None, :] - pts[None, :, :]
    return np.sqrt((diff ** 2).sum(-1))


def transport_min_cost_flow(supply: np.ndarray, demand: np.ndarray, cost: np.ndarray) -> tuple[float, np.ndarray]:
    """Exact balanced transportation by successive shortest augmenting paths.

    Shortest paths on the residual bipartite graph come from a vectorised
    Bellman-Ford pass (reverse arcs carry negative cost). Every augmentation
    empties a source, fills a sink or cancels a reverse arc.
    """
    n, m = cost.shape
    flow = np.zeros((n, m))
    rem_s = supply.astype(np.float64).copy()
    rem_d = demand.astype(np.float64).copy()
    tol = 1e-15
    for _ in range(50 * (n + m)):
        active = rem_s > tol
        if not active.any() or not (rem_d > tol).any():
            break
        dist_s = np.where(active, 0.0, np.inf)
        prev_s = np.full(n, -1)
        dist_t = np.full(m, np.inf)
        prev_t = np.full(m, -1)
        for _ in range(n + m + 1):
            via = dist_s[:, None] + cost
            best_i = np.argmin(via, axis=0)
            cand_t = via[best_i, np.arange(m)]
            upd_t = cand_t < dist_t - tol
            dist_t = np.where(upd_t, cand_t, dist_t)
            prev_t = np.where(upd_t, best_i, prev_t)
            back = np.where(flow > tol, dist_t[None, :] - cost, np.inf)
            best_j = np.argmin(back, axis=1)
            cand_s = back[np.arange(n), best_j]
            upd_s = cand_s < dist_s - tol
            dist_s = np.where(upd_s, cand_s, dist_s)
            prev_s = np.where(upd_s, best_j, prev_s)
            if not upd_t.any() and not upd_s.any():
                break
        open_sinks = np.flatnonzero((rem_d > tol) & np.isfinite(dist_t))
        if open_sinks.size == 0:
            break
        sink = int(open_sinks[np.argmin(dist_t[open_sinks])])
        forward, reverse = [], []
        j = sink
        while True:
            i = int(prev_t[j])
            forward.append((i, j))
            if prev_s[i] < 0:
                break
            j = int(prev_s[i])
            reverse.append((i, j))
        src = forward[-1][0]
        amount = min(rem_s[src], rem_d[sink], *(flow[i, j] for i, j in reverse))
        for i, j in forward:
            flow[i, j] += amount
        for i, j in reverse:
            flow[i, j] -= amount
        rem_s[src] -= amount
        rem_d[sink] -= amount
    return float((flow * cost).sum()), flow


def transport_linprog(supply: np.ndarray, demand: np.ndarray, cost: np.ndarray) -> float:
    """Same transportation problem through scipy's HiGHS LP solver."""
    n, m = cost.shape
    A_eq = np.zeros((n + m, n * m))
    for i in range(n):
        A_eq[i, i * m:(i + 1) * m] = 1.0
    for j in range(m):
        A_eq[n + j, j::m] = 1.0
    res = optimize.linprog(cost.ravel(), A_eq=A_eq, b_eq=np.concatenate([supply, demand]),
                           bounds=(0, None), method="highs")
    if not res.success:
        raise ContractError(f"LP failed: {res.message}")
    return float(res.fun)


def sinkhorn_emd(a: np.ndarray, b: np.ndarray, cost: np.ndarray, reg: float = SINKHORN_REG,
                 tol: float = SINKHORN_TOL, max_iter: int = 200_000) -> tuple[float, int]:
    """Entropic-regularised transport cost, log-domain Sinkhorn with epsilon scaling.

    The regularisation is annealed geometrically from the cost scale down to
    ``reg``, warm-starting the dual potentials; the final stage iterates until
    the row-marginal L1 error drops below ``tol``.
    """
    log_a = np.log(np.where(a > 0, a, 1e-300))
    log_b = np.log(np.where(b > 0, b, 1e-300))
    f = np.zeros_like(a)
    g = np.zeros_like(b)
    schedule = []
    eps = max(float(cost.max()), reg)
    while eps > reg:
        schedule.append(eps)
        eps /= 2.0
    schedule.append(reg)
    total = 0
    for stage, eps in enumerate(schedule):
        final = stage == len(schedule) - 1
        stage_tol = tol if final else max(tol, 1e-3)
        for it in range(1, max_iter + 1):
            f = -eps * logsumexp((g[None, :] - cost) / eps, axis=1) + eps * log_a
            g = -eps * logsumexp((f[:, None] - cost) / eps, axis=0) + eps * log_b
            total += 1
            if it % 10 == 0 or final and it == max_iter:
                plan = np.exp((f[:, None] + g[None, :] - cost) / eps)
                if np.abs(plan.sum(axis=1) - a).sum() < stage_tol:
                    break
    plan = np.exp((f[:, None] + g[None, :] - cost) / reg)
    return float((plan * cost).sum()), total


def emd_2d_detailed(a: np.ndarray, b: np.ndarray) -> EMDResult:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise ContractError(f"EMD needs two equal 2-D grids, got {a.shape} and {b.shape}")
    pa, pb = _normalise(a, "first map").ravel(), _normalise(b, "second map").ravel()
    cost = grid_cost(a.shape)
    if max(a.shape) <= EMD_EXACT_MAX_SIDE:
        return EMDResult(transport_min_cost_flow(pa, pb, cost)[0], exact=True)
    dist, iters = sinkhorn_emd(pa, pb, cost)
    return EMDResult(dist, exact=False, iterations=iters)


def emd_2d(a: np.ndarray, b: np.ndarray) -> float:
    """Earth mover's distance between two grid maps with Euclidean ground cost."""
    return emd_2d_detailed(a, b).distance


@dataclass
class MapComparison:
    rank_correlation: float
    p_value: float
    emd: float
    emd_exact: bool = True

    def to_dict(self) -> dict:
        return {"rank_correlation": self.rank_correlation, "p_value": self.p_value,
                "emd": self.emd, "emd_exact": self.emd_exact}


def compare_maps(a: np.ndarray, b: np.ndarray) -> MapComparison:
    rho, p = spearman_rc(a, b)
    e = emd_2d_detailed(a, b)
    return MapComparison(rho, p, e.distance, e.exact)


# --------------------------------------------------------------------------
# Nemenyi post-hoc test
# --------------------------------------------------------------------------

# Studentized range quantiles for infinite degrees of freedom divided by sqrt(2).
NEMENYI_Q = {
    0.05: (1.959964, 2.343701, 2.569032, 2.727774, 2.849705, 2.948320, 3.030878, 3.101730,
           3.163684, 3.218654, 3.268004, 3.312739, 3.353618, 3.391230, 3.426041, 3.458425,
           3.488685, 3.517073, 3.543799),
    0.10: (1.644854, 2.052293, 2.291341, 2.459516, 2.588521, 2.692732, 2.779884, 2.854606,
           2.919889, 2.977768, 3.029694, 3.076733, 3.119693, 3.159199, 3.195743, 3.229723,
           3.261461, 3.291224, 3.319233),
}
NEMENYI_MAX_K = 20


def nemenyi_q(k: int, alpha: float) -> float:
    if alpha not in NEMENYI_Q:
        raise ContractError(f"alpha must be one of {sorted(NEMENYI_Q)}, got {alpha}")
    if not 2 <= k <= NEMENYI_MAX_K:
        raise ContractError(f"Nemenyi table covers 2..{NEMENYI_MAX_K} models, got {k}")
    return NEMENYI_Q[alpha][k - 2]


def rank_models(scores: np.ndarray, higher_is_better: bool = True) -> np.ndarray:
    """Per-dataset ranks (1 = best) of a ``models x datasets`` score matrix, mean ranks for ties."""
    s = np.asarray(scores, dtype=np.float64)
    return np.column_stack([stats.rankdata(-col if higher_is_better else col) for col in s.T])


@dataclass
class NemenyiResult:
    avg_ranks: np.ndarray
    cd: float
    significant: np.ndarray  # bool [k, k]
    alpha: float
    n_datasets: int
    names: list[str] = field(default_factory=list)

    def significant_pairs(self) -> list[tuple[int, int]]:
        k = len(self.avg_ranks)
        return [(i, j) for i in range(k) for j in range(i + 1, k) if self.significant[i, j]]

    def to_dict(self) -> dict:
        names = self.names or [str(i) for i in range(len(self.avg_ranks))]
        return {
            "alpha": self.alpha,
            "n_datasets": self.n_datasets,
            "cd": self.cd,
            "avg_ranks": dict(zip(names, map(float, self.avg_ranks))),
            "significant_pairs": [[names[i], names[j]] for i, j in self.significant_pairs()],
        }


def nemenyi_cd(ranks: np.ndarray, alpha: float = 0.05, names: list[str] | None = None) -> NemenyiResult:
    """Critical difference ``q_alpha(k) sqrt(k(k+1)/(6N))`` over a ``models x datasets`` rank matrix."""
    r = np.asarray(ranks, dtype=np.float64)
    if r.ndim != 2 or r.shape[0] < 2 or r.shape[1] < 2:
        raise ContractError("need a ranks matrix with at least 2 models and 2 datasets")
    k, N = r.shape
    q = nemenyi_q(k, alpha)
    expected = k * (k + 1) / 2
    if not np.allclose(r.sum(axis=0), expected):
        raise ContractError("each dataset column must hold a (possibly tied) ranking 1..k")
    avg = r.mean(axis=1)
    cd = q * math.sqrt(k * (k + 1) / (6.0 * N))
    diff = np.abs(avg[:, None] - avg[None, :])
    return NemenyiResult(avg, cd, diff > cd, alpha, N, list(names or []))

"""Virtual-clock simulator for MindFlayer, Vecna, Rennala, ASGD and Minibatch SGD.

MindFlayer, Vecna and Minibatch are round-synchronous: each round's
duration is the slowest participating worker's total, so no event queue is
needed.  Rennala and ASGD are event driven: a heap of pending completions
keyed by ``(time, worker, seq)``.  A completion at ``+inf`` stays in the heap
forever; when it is the earliest event the run is declared stalled.

Randomness: one root seed is split (``numpy.random.SeedSequence``) into an
independent timing stream and gradient-noise stream per worker, so what a
worker draws never depends on how other workers are scheduled.
"""

from __future__ import annotations

import csv
import heapq
import io
import math
from dataclasses import dataclass, field, replace
from functools import partial
from typing import Callable, Sequence

import numpy as np

from .planner import MindFlayerPlan, VecnaPlan
from .problems import HeterogeneousProblem, QuadraticProblem
from .timemodel import INF, ClusterModel

__all__ = [
    "DivergenceError",
    "RunConfig",
    "RunRecord",
    "TRACE_COLUMNS",
    "TuneResult",
    "WorkerStreams",
    "clipped_round",
    "default_gamma_grid",
    "mindflayer_estimator",
    "run_asgd",
    "run_mindflayer",
    "run_minibatch",
    "run_rennala",
    "run_vecna",
    "tune_gamma",
    "tune_rennala",
    "vecna_estimator",
]

CONVERGED = "converged"
STALLED = "stalled"
BUDGET = "budget_exhausted"

TRACE_COLUMNS = (
    "k",
    "time",
    "grad_sq_norm",
    "f_value",
    "gradients_used",
    "trials_attempted",
    "discarded_stale",
)

# iterates this large are treated as divergent; keeps bad stepsizes cheap
_DIVERGED_SQ_NORM = 1e30


class DivergenceError(FloatingPointError):
    pass


@dataclass(frozen=True)
class RunConfig:
    """Budgets and stopping rule shared by every method.

    ``stop_rule="average"`` stops once the running mean of ``||grad f(x^k)||^2``
    over ``k = 0..K`` is ``<= eps``; ``"first_hit"`` stops at the first
    iterate with ``||grad f||^2 <= eps``.  Both events are recorded either way.
    """

    eps: float = 1e-4
    time_budget: float = INF
    iter_budget: int = 10_000
    stop_rule: str = "average"
    x0: tuple[float, ...] | None = None

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError("eps must be > 0")
        if not self.time_budget > 0 or self.iter_budget < 1:
            raise ValueError("budgets must be positive")
        if self.stop_rule not in ("average", "first_hit"):
            raise ValueError(f"unknown stop_rule {self.stop_rule!r}")

    def start(self, dim: int) -> np.ndarray:
        if self.x0 is None:
            return np.zeros(dim)
        x = np.array(self.x0, dtype=float)
        if x.shape != (dim,):
            raise ValueError(f"x0 has shape {x.shape}, problem dimension is {dim}")
        return x


class WorkerStreams:
    """Per-worker ``timing`` and ``noise`` generators derived from one root seed."""

    def __init__(self, seed: int | np.random.SeedSequence, n: int):
        if isinstance(seed, np.random.SeedSequence):
            # spawn() mutates its receiver; work on a copy so reusing a seed reproduces the run
            root = np.random.SeedSequence(seed.entropy, spawn_key=seed.spawn_key, pool_size=seed.pool_size)
        else:
            root = np.random.SeedSequence(seed)
        children = root.spawn(n)
        self.timing = []
        self.noise = []
        for child in children:
            t_seq, g_seq = child.spawn(2)
            self.timing.append(np.random.Generator(np.random.PCG64(t_seq)))
            self.noise.append(np.random.Generator(np.random.PCG64(g_seq)))


@dataclass
class RunRecord:
    """Per-iteration trace plus terminal status of one simulated run."""

    method: str
    status: str = BUDGET
    end_time: float = 0.0
    end_k: int = 0
    first_hit: tuple[int, float] | None = None
    average_hit: tuple[int, float] | None = None
    rows: list[tuple] = field(default_factory=list)
    delays: list[int] = field(default_factory=list)
    message: str = ""

    @property
    def time_to_eps(self) -> float:
        """Virtual time of the first iterate with ``||grad f||^2 <= eps`` (``inf`` if never)."""
        return self.first_hit[1] if self.first_hit else INF

    @property
    def iters_to_eps(self) -> int | None:
        return self.first_hit[0] if self.first_hit else None

    def column(self, name: str) -> np.ndarray:
        j = TRACE_COLUMNS.index(name)
        return np.array([r[j] for r in self.rows])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for r in self.rows:
            w.writerow([r[0], repr(r[1]), repr(r[2]), repr(r[3]), r[4], r[5], r[6]])
        return buf.getvalue()

    def summary(self) -> dict:
        return {
            "method": self.method,
            "status": self.status,
            "end_time": self.end_time,
            "end_k": self.end_k,
            "first_hit": list(self.first_hit) if self.first_hit else None,
            "average_hit": list(self.average_hit) if self.average_hit else None,
            "iterations": len(self.rows) - 1,
            "max_delay": max(self.delays) if self.delays else None,
            "message": self.message,
        }


class _Tracker:
    """Appends trace rows and decides when to stop."""

    def __init__(self, problem, cfg: RunConfig, record: RunRecord):
        self.problem = problem
        self.cfg = cfg
        self.rec = record
        self.sq_sum = 0.0

    def log(self, k: int, time: float, x: np.ndarray, used=0, trials=0, stale=0) -> bool:
        g = self.problem.grad(x)
        gsq = float(g @ g)
        if not math.isfinite(gsq) or gsq > _DIVERGED_SQ_NORM:
            raise DivergenceError(
                f"{self.rec.method}: iterate diverged at k={k}, t={time:g} (||grad||^2={gsq:g})"
            )
        self.rec.rows.append((k, time, gsq, self.problem.value(x), used, trials, stale))
        self.sq_sum += gsq
        eps = self.cfg.eps
        if self.rec.first_hit is None and gsq <= eps:
            self.rec.first_hit = (k, time)
        if self.rec.average_hit is None and self.sq_sum / (k + 1) <= eps:
            self.rec.average_hit = (k, time)
        hit = self.rec.first_hit if self.cfg.stop_rule == "first_hit" else self.rec.average_hit
        if hit is not None:
            return self.finish(CONVERGED, time, k)
        if k >= self.cfg.iter_budget:
            return self.finish(BUDGET, time, k)
        return False

    def finish(self, status: str, time: float, k: int) -> bool:
        self.rec.status = status
        self.rec.end_time = time
        self.rec.end_k = k
        return True


def _check_finite(x: np.ndarray, method: str, k: int) -> None:
    if not np.all(np.isfinite(x)):
        raise DivergenceError(f"{method}: non-finite iterate at k={k}")


# ----------------------------------------------------- round-synchronous


def clipped_round(
    grad_sum: Sequence[Callable[[np.ndarray, int, np.random.Generator], np.ndarray]],
    cluster: ClusterModel,
    t: Sequence[float],
    B: Sequence[int],
    x: np.ndarray,
    streams: WorkerStreams,
) -> tuple[list[np.ndarray | None], list[int], float, int]:
    """One round of clipped trials on every worker.

    Worker ``i`` runs ``B[i]`` trials back to back; a trial succeeds iff
    ``eta <= t[i]`` and lasts ``tau_i + min(eta, t_i)``.  Returns the per-worker
    sums of successful stochastic gradients (``None`` when there are none),
    the success counts, the round time (slowest active worker) and the total
    number of trials.
    """
    sums: list[np.ndarray | None] = []
    counts: list[int] = []
    round_time = 0.0
    trials = 0
    for i, w in enumerate(cluster.workers):
        b = int(B[i])
        if b <= 0:
            sums.append(None)
            counts.append(0)
            continue
        etas = np.asarray(w.delay.sample(streams.timing[i], b), dtype=float)
        ti = float(t[i])
        ok = etas <= ti
        elapsed = float(np.sum(w.tau + np.minimum(etas, ti)))
        round_time = max(round_time, elapsed)
        c = int(ok.sum())
        counts.append(c)
        sums.append(grad_sum[i](x, c, streams.noise[i]) if c > 0 else None)
        trials += b
    return sums, counts, round_time, trials


def mindflayer_estimator(sums: Sequence[np.ndarray | None], B_expected: float) -> np.ndarray | None:
    """All successful gradients of a round summed and divided by ``B = sum p_i B_i``; ``None`` if none succeeded."""
    got = [s for s in sums if s is not None]
    return sum(got) / B_expected if got else None


def vecna_estimator(sums: Sequence[np.ndarray | None], p: Sequence[float], B: Sequence[int]) -> np.ndarray | None:
    """``1/n sum_i sums[i] / (p_i B_i)``; workers without a success contribute zero."""
    n = len(sums)
    got = [(1.0 / (n * pi * bi)) * s for s, pi, bi in zip(sums, p, B) if s is not None]
    return sum(got) if got else None


def _run_clipped(method, problem, grad_sums, combine, cluster, t, B, gamma, cfg, seed) -> RunRecord:
    if len(t) != cluster.n or len(B) != cluster.n:
        raise ValueError(f"plan is for {len(B)} workers but the cluster has {cluster.n}")
    streams = WorkerStreams(seed, cluster.n)
    rec = RunRecord(method)
    tracker = _Tracker(problem, cfg, rec)
    x = cfg.start(problem.dim)
    clock = 0.0
    if tracker.log(0, clock, x):
        return rec
    k = 0
    while True:
        sums, counts, round_time, trials = clipped_round(grad_sums, cluster, t, B, x, streams)
        if round_time == INF:
            tracker.finish(STALLED, clock, k)
            return rec
        if clock + round_time > cfg.time_budget:
            tracker.finish(BUDGET, cfg.time_budget, k)
            return rec
        clock += round_time
        g = combine(sums)
        if g is not None:
            x = x - gamma * g
            _check_finite(x, method, k + 1)
        k += 1
        if tracker.log(k, clock, x, sum(counts), trials, 0):
            return rec


def run_mindflayer(
    problem: QuadraticProblem,
    cluster: ClusterModel,
    plan: MindFlayerPlan,
    cfg: RunConfig,
    seed,
    gamma: float | None = None,
) -> RunRecord:
    """MindFlayer SGD: ``x <- x - gamma * (sum of successful gradients) / B``, ``B = sum p_i B_i``.

    ``gamma`` defaults to the plan's theoretical stepsize.  Rounds with no
    success still take time and leave ``x`` unchanged.
    """
    gamma = plan.gamma if gamma is None else gamma
    grad_sums = [problem.stochastic_grad_sum] * cluster.n
    return _run_clipped(
        "mindflayer", problem, grad_sums, partial(mindflayer_estimator, B_expected=plan.B_expected),
        cluster, plan.t, plan.B, gamma, cfg, seed,
    )


def run_vecna(
    problem: HeterogeneousProblem,
    cluster: ClusterModel,
    plan: VecnaPlan,
    cfg: RunConfig,
    seed,
    gamma: float | None = None,
) -> RunRecord:
    """Vecna SGD: ``g = 1/n sum_i (worker i's gradient sum) / (p_i B_i)``; worker ``i`` samples ``grad f_i``."""
    if problem.n != cluster.n:
        raise ValueError(f"{problem.n} component functions for {cluster.n} workers")
    gamma = plan.gamma if gamma is None else gamma
    grad_sums = [c.stochastic_grad_sum for c in problem.components]
    return _run_clipped(
        "vecna", problem.aggregate, grad_sums, partial(vecna_estimator, p=plan.p, B=plan.B),
        cluster, plan.t, plan.B, gamma, cfg, seed,
    )


def run_minibatch(problem, cluster: ClusterModel, gamma: float, cfg: RunConfig, seed) -> RunRecord:
    """Minibatch SGD: one gradient per worker per round; the round lasts ``max_i(tau_i + eta_i)``."""
    streams = WorkerStreams(seed, cluster.n)
    rec = RunRecord("minibatch")
    tracker = _Tracker(problem, cfg, rec)
    x = cfg.start(problem.dim)
    clock = 0.0
    if tracker.log(0, clock, x):
        return rec
    n = cluster.n
    k = 0
    while True:
        round_time = max(w.tau + w.delay.sample(streams.timing[i]) for i, w in enumerate(cluster.workers))
        if round_time == INF:
            tracker.finish(STALLED, clock, k)
            return rec
        if clock + round_time > cfg.time_budget:
            tracker.finish(BUDGET, cfg.time_budget, k)
            return rec
        clock += round_time
        g = sum(problem.stochastic_grad(x, streams.noise[i]) for i in range(n)) / n
        x = x - gamma * g
        _check_finite(x, "minibatch", k + 1)
        k += 1
        if tracker.log(k, clock, x, n, n, 0):
            return rec


# ---------------------------------------------------------- event driven


class _EventQueue:
    """Pending completions ordered by ``(time, worker, insertion sequence)``."""

    def __init__(self):
        self._heap: list[tuple[float, int, int]] = []
        self._seq = 0

    def push(self, time: float, worker: int) -> None:
        heapq.heappush(self._heap, (time, worker, self._seq))
        self._seq += 1

    def peek_time(self) -> float:
        return self._heap[0][0] if self._heap else INF

    def pop(self) -> tuple[float, int]:
        time, worker, _ = heapq.heappop(self._heap)
        return time, worker


def run_rennala(problem, cluster: ClusterModel, S: int, gamma: float, cfg: RunConfig, seed) -> RunRecord:
    """Rennala SGD: average the first ``S`` gradients computed at the current ``x^k``.

    Every worker is always busy.  A completion tagged with an older
    iteration is discarded.  The worker that delivers is handed the current
    point right away; if its gradient completed the batch it gets the new
    point ``x^{k+1}``.
    """
    if S < 1:
        raise ValueError("S must be >= 1")
    n = cluster.n
    streams = WorkerStreams(seed, n)
    rec = RunRecord("rennala")
    tracker = _Tracker(problem, cfg, rec)
    x = cfg.start(problem.dim)
    if tracker.log(0, 0.0, x):
        return rec
    queue = _EventQueue()
    assigned = [0] * n
    for i, w in enumerate(cluster.workers):
        queue.push(w.tau + w.delay.sample(streams.timing[i]), i)
    k = 0
    clock = 0.0
    batch = np.zeros(problem.dim)
    s = used = trials = stale = 0
    while True:
        nxt = queue.peek_time()
        if nxt == INF:
            tracker.finish(STALLED, clock, k)
            return rec
        if nxt > cfg.time_budget:
            tracker.finish(BUDGET, cfg.time_budget, k)
            return rec
        clock, i = queue.pop()
        trials += 1
        if assigned[i] == k:
            batch += problem.stochastic_grad(x, streams.noise[i])
            s += 1
            used += 1
        else:
            stale += 1
        if s == S:
            x = x - gamma * (batch / S)
            _check_finite(x, "rennala", k + 1)
            k += 1
            if tracker.log(k, clock, x, used, trials, stale):
                return rec
            batch = np.zeros(problem.dim)
            s = used = trials = stale = 0
        w = cluster.workers[i]
        assigned[i] = k
        queue.push(clock + (w.tau + w.delay.sample(streams.timing[i])), i)


def run_asgd(problem, cluster: ClusterModel, gamma: float, cfg: RunConfig, seed) -> RunRecord:
    """Asynchronous SGD: apply every completed gradient, however stale.

    A worker's gradient is taken at the iterate it was handed; the delay
    ``k - k_assigned`` of each update is kept in ``RunRecord.delays``.
    """
    n = cluster.n
    streams = WorkerStreams(seed, n)
    rec = RunRecord("asgd")
    tracker = _Tracker(problem, cfg, rec)
    x = cfg.start(problem.dim)
    if tracker.log(0, 0.0, x):
        return rec
    queue = _EventQueue()
    pending: list[np.ndarray] = [None] * n  # type: ignore[list-item]
    assigned = [0] * n

    def assign(i: int, now: float, k: int) -> None:
        w = cluster.workers[i]
        pending[i] = problem.stochastic_grad(x, streams.noise[i])
        assigned[i] = k
        queue.push(now + (w.tau + w.delay.sample(streams.timing[i])), i)

    for i in range(n):
        assign(i, 0.0, 0)
    k = 0
    clock = 0.0
    while True:
        nxt = queue.peek_time()
        if nxt == INF:
            tracker.finish(STALLED, clock, k)
            return rec
        if nxt > cfg.time_budget:
            tracker.finish(BUDGET, cfg.time_budget, k)
            return rec
        clock, i = queue.pop()
        x = x - gamma * pending[i]
        _check_finite(x, "asgd", k + 1)
        rec.delays.append(k - assigned[i])
        k += 1
        if tracker.log(k, clock, x, 1, 1, 0):
            return rec
        assign(i, clock, k)


# ------------------------------------------------------------------ tuning


def default_gamma_grid(L: float) -> list[float]:
    """``2^j / (2L)`` for ``j = -6..4``."""
    return [2.0**j / (2.0 * L) for j in range(-6, 5)]


@dataclass
class TuneResult:
    gamma: float | None
    table: list[dict]

    @property
    def converged(self) -> bool:
        return self.gamma is not None


def tune_gamma(
    run_fn: Callable[..., RunRecord],
    problem,
    cluster: ClusterModel,
    cfg: RunConfig,
    gamma_grid: Sequence[float],
    seeds: Sequence[int],
    best_known: float = INF,
) -> TuneResult:
    """Pick the stepsize with the smallest median time to first reach ``eps``.

    ``run_fn(problem, cluster, gamma, cfg, seed)`` runs one simulation.
    Divergent or non-converging runs score ``inf``.  Ties go to the smaller
    stepsize.  ``TuneResult.gamma`` is ``None`` when no grid point converges
    (or none beats ``best_known``).

    Stepsizes are tried from large to small and every run is given the time
    budget ``min(cfg.time_budget, 2 * best median so far)``.  This cannot
    change the winner: a median at or below ``m`` needs the middle order
    statistics at or below ``2m`` (even seed counts average two of them), and
    runs finishing under the budget are unaffected by it.
    Pruned rows are marked ``pruned=True`` and their score is a lower bound.
    """
    grid = sorted({float(g) for g in gamma_grid}, reverse=True)
    if not grid:
        raise ValueError("gamma_grid is empty")
    if not seeds:
        raise ValueError("need at least one seed")
    rows = {}
    best, best_score = None, best_known
    for gamma in grid:
        cap = min(cfg.time_budget, 2.0 * best_score)
        run_cfg = replace(cfg, time_budget=cap) if cap < cfg.time_budget else cfg
        times = []
        for seed in seeds:
            try:
                times.append(run_fn(problem, cluster, gamma, run_cfg, seed).time_to_eps)
            except DivergenceError:
                times.append(INF)
        score = float(np.median(times))
        rows[gamma] = {"gamma": gamma, "score": score, "times": times, "pruned": cap < cfg.time_budget and score == INF}
        if score <= best_score and score < INF:
            best, best_score = gamma, score
    table = [rows[g] for g in sorted(rows)]
    return TuneResult(best, table)


def tune_rennala(
    problem,
    cluster: ClusterModel,
    cfg: RunConfig,
    S_grid: Sequence[int],
    gamma_grid: Callable[[int], Sequence[float]] | Sequence[float],
    seeds: Sequence[int],
) -> tuple[int | None, TuneResult]:
    """Tune Rennala's batch size and stepsize jointly.

    ``gamma_grid`` is either a fixed list or a function of ``S``.  Each ``S``
    (ascending) gets its own :func:`tune_gamma`; the pair with the smallest
    median time wins, ties going to the smaller ``S``.  The returned table
    has one row per ``(S, gamma)``.
    """
    if not S_grid:
        raise ValueError("S_grid is empty")
    best_S, best_gamma = None, None
    best_score = INF
    table = []
    for S in sorted(int(v) for v in S_grid):
        grid = gamma_grid(S) if callable(gamma_grid) else gamma_grid

        def run_fn(p, c, gamma, cfg_, seed, S=S):
            return run_rennala(p, c, S, gamma, cfg_, seed)

        res = tune_gamma(run_fn, problem, cluster, cfg, grid, seeds, best_known=best_score)
        for row in res.table:
            table.append({"S": S, **row})
        if res.gamma is not None:
            score = next(r["score"] for r in res.table if r["gamma"] == res.gamma)
            if score < best_score:
                best_S, best_gamma, best_score = S, res.gamma, score
    return best_S, TuneResult(best_gamma, table)

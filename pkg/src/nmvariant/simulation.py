"""Security evaluation: closed-form bounds, the adversary Monte Carlo and resistance estimates.

The adversary model: every adversarial request is served by a uniformly
drawn serving set. If every member is already compromised the adversary
wins on that request. Otherwise it compromises exactly one clean member,
choosing the one whose pool has the fewest compromised replicas (lowest
pool index on ties). Between adversarial requests ``b`` replicas are drawn
without replacement from all ``n*m`` and rejuvenated. Fractional ``b`` is
spread over requests with the same exact rolling sum the scheduler uses.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Iterable, Mapping, Optional, Sequence, TextIO

import numpy as np

from .config import Rational, as_fraction
from .fleet import RollingSum


class SimulationError(ValueError):
    pass


@dataclass
class CompromiseState:
    """Per-pool compromised replica counts."""

    counts: list[int]
    m: int

    def __post_init__(self):
        self.counts = [int(c) for c in self.counts]
        if self.m < 1 or not self.counts:
            raise SimulationError("need m >= 1 and at least one pool")
        for c in self.counts:
            if not 0 <= c <= self.m:
                raise SimulationError(f"compromised count {c} outside [0, {self.m}]")

    @classmethod
    def clean(cls, n: int, m: int) -> "CompromiseState":
        return cls([0] * n, m)

    @property
    def n(self) -> int:
        return len(self.counts)

    @property
    def total(self) -> int:
        return sum(self.counts)

    @property
    def fraction(self) -> float:
        return self.total / (self.n * self.m)


def p_success(state: CompromiseState | Sequence[int], m: Optional[int] = None) -> float:
    """Probability that a uniform serving set is entirely compromised: prod(c_i / m)."""
    if isinstance(state, CompromiseState):
        counts, m = state.counts, state.m
    else:
        counts = list(state)
        if m is None:
            raise SimulationError("m is required with a bare count list")
    return math.prod(counts) / m ** len(counts)


def p_success_bound(c: int, n: int, m: int) -> float:
    """Upper bound ((c/n)/m)**n on :func:`p_success` over every split of ``c`` compromises."""
    if not 0 <= c <= n * m:
        raise SimulationError(f"c={c} outside [0, {n * m}]")
    return (c / n / m) ** n


def cleanse_zero_bound(c: int, n: int, m: int, b: Rational) -> float:
    """Tail bound exp(-2 b (c/nm)^2) on the chance that ``b`` refreshes miss every compromise.

    Valid for integer ``b`` >= 1; fractional ``b`` just interpolates.
    """
    gamma = c / (n * m)
    return math.exp(-2 * float(b) * gamma * gamma)


def _uniform_index(rng: np.random.Generator, size: int) -> int:
    # floor(u * size); the compiled kernel draws the same way
    return int(rng.random() * size)


def sample_cleanse(state: CompromiseState, draws: int, rng: np.random.Generator) -> int:
    """Rejuvenate ``draws`` distinct replicas chosen uniformly from all n*m.

    Compromised replicas that get drawn are reset in ``state``; returns how
    many were reset (hypergeometric with mean draws*c/(nm)).
    """
    total = state.n * state.m
    draws = min(int(draws), total)
    undrawn = [state.m] * state.n
    hot = list(state.counts)
    removed = 0
    for t in range(draws):
        r = _uniform_index(rng, total - t)
        for i in range(state.n):
            if r < undrawn[i]:
                if r < hot[i]:
                    hot[i] -= 1
                    state.counts[i] -= 1
                    removed += 1
                undrawn[i] -= 1
                break
            r -= undrawn[i]
    return removed


@dataclass(frozen=True)
class SimParams:
    n: int
    m: int
    b: Fraction
    trials: int = 200
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "b", as_fraction(self.b))
        if self.n < 1 or self.m < 1:
            raise SimulationError("n and m must be >= 1")
        if self.b < 0:
            raise SimulationError("b must be >= 0")
        if self.trials < 1:
            raise SimulationError("trials must be >= 1")
        if not 0 <= self.seed < 1 << 64:
            raise SimulationError("seed must fit in 64 bits")
        if math.floor(self.b) > self.n * (self.m - 1):
            raise SimulationError(
                f"b={self.b} leaves fewer than n={self.n} replicas unrefreshed after each "
                "request; the adversary can never succeed")


Observer = Callable[[str, int, CompromiseState], None]


def _choose_target(state: CompromiseState, member_hot: Sequence[bool]) -> int:
    target = -1
    for i, hot in enumerate(member_hot):
        if not hot and (target < 0 or state.counts[i] < state.counts[target]):
            target = i
    return target


def _trial_python(params: SimParams, rng: np.random.Generator,
                  observer: Optional[Observer] = None) -> int:
    state = CompromiseState.clean(params.n, params.m)
    refresh = RollingSum(params.b)
    requests = 0
    while True:
        requests += 1
        member_hot = [rng.random() * params.m < c for c in state.counts]
        target = _choose_target(state, member_hot)
        if target < 0:
            if observer:
                observer("success", requests, state)
            return requests
        state.counts[target] += 1
        if observer:
            observer("compromise", requests, state)
        sample_cleanse(state, refresh.step(), rng)
        if observer:
            observer("cleanse", requests, state)


def run_trial(params: SimParams, rng: np.random.Generator,
              observer: Optional[Observer] = None) -> int:
    """Adversarial requests until the first fully compromised serving set.

    With an ``observer`` the pure-Python loop runs so every intermediate
    state can be inspected; otherwise the compiled kernel does the work.
    Both consume ``rng`` identically.
    """
    if observer is not None:
        return _trial_python(params, rng, observer)
    from ._kernels import adversary_trial

    return int(adversary_trial(rng, params.n, params.m,
                               params.b.numerator, params.b.denominator))


def trial_rng(seed: int, trial_index: int) -> np.random.Generator:
    return np.random.default_rng([seed, trial_index])


def _run_trials(params: SimParams, indices: Sequence[int]) -> list[int]:
    return [run_trial(params, trial_rng(params.seed, i)) for i in indices]


@dataclass(frozen=True)
class SimOutcome:
    params: SimParams
    samples: tuple[int, ...] = field(repr=False)
    p5: float
    q1: float
    median: float
    q3: float
    p95: float

    @classmethod
    def from_samples(cls, params: SimParams, samples: Iterable[int]) -> "SimOutcome":
        arr = np.asarray(list(samples), dtype=np.int64)
        p5, q1, q2, q3, p95 = (float(x) for x in np.percentile(arr, [5, 25, 50, 75, 95]))
        return cls(params, tuple(int(x) for x in arr), p5, q1, q2, q3, p95)


def run_experiment(params: SimParams, workers: int = 1) -> SimOutcome:
    """Run ``params.trials`` independent trials; trial ``i`` is seeded from (seed, i).

    Results do not depend on ``workers``.
    """
    indices = list(range(params.trials))
    if workers <= 1 or params.trials < 2:
        samples = _run_trials(params, indices)
    else:
        chunks = [indices[w::workers] for w in range(workers)]
        by_index: dict[int, int] = {}
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for chunk, result in zip(chunks, pool.map(_run_trials, [params] * workers, chunks)):
                by_index.update(zip(chunk, result))
        samples = [by_index[i] for i in indices]
    return SimOutcome.from_samples(params, samples)


def run_grid(n_values: Iterable[int], m: int, b_values: Iterable[Rational],
             trials: int, seed: int, workers: int = 1) -> list[SimOutcome]:
    b_list = [as_fraction(b) for b in b_values]
    return [run_experiment(SimParams(n, m, b, trials, seed), workers)
            for n in n_values for b in b_list]


# ---------------------------------------------------------------------------
# trend fitting and resistance

@dataclass(frozen=True)
class TrendFit:
    """y = amplitude * exp(rate * b)."""

    amplitude: float
    rate: float
    r_squared: float
    r_squared_linear: float = float("nan")
    n: Optional[int] = None
    m: Optional[int] = None
    source: str = "local-fit"

    def predict(self, b: Rational) -> float:
        return self.amplitude * math.exp(self.rate * float(b))


# Published trend lines for m = 25; R^2 is the only goodness figure given.
PUBLISHED_FITS: Mapping[int, TrendFit] = {
    2: TrendFit(14.235, 0.2028, 0.9923, n=2, m=25, source="published-fit"),
    3: TrendFit(25.46, 0.3446, 0.9903, n=3, m=25, source="published-fit"),
    4: TrendFit(41.537, 0.5057, 0.9797, n=4, m=25, source="published-fit"),
}


def fit_trend(b_values: Sequence[float], medians: Sequence[float],
              n: Optional[int] = None, m: Optional[int] = None) -> TrendFit:
    """Least-squares fit of ln(median) = ln(A) + C*b.

    ``r_squared`` is measured on the log scale (the scale of the fit);
    ``r_squared_linear`` compares the fitted curve to the raw medians.
    """
    b = np.asarray([float(x) for x in b_values])
    y = np.asarray([float(x) for x in medians])
    if b.shape != y.shape:
        raise SimulationError("b_values and medians differ in length")
    if len(b) < 3:
        raise SimulationError("need at least 3 points to fit a trend")
    if np.any(y <= 0):
        raise SimulationError("medians must be positive for a log-linear fit")
    if np.ptp(b) == 0:
        raise SimulationError("b_values must not all be equal")
    logy = np.log(y)
    rate, intercept = np.polyfit(b, logy, 1)
    pred = intercept + rate * b
    return TrendFit(
        amplitude=float(math.exp(intercept)),
        rate=float(rate),
        r_squared=_r_squared(logy, pred),
        r_squared_linear=_r_squared(y, np.exp(pred)),
        n=n,
        m=m,
    )


def _r_squared(actual: np.ndarray, predicted: np.ndarray) -> float:
    ss_res = float(np.sum((actual - predicted) ** 2))
    ss_tot = float(np.sum((actual - actual.mean()) ** 2))
    if ss_tot == 0.0:
        return 1.0 if ss_res == 0.0 else 0.0
    return 1.0 - ss_res / ss_tot


def fit_outcomes(outcomes: Iterable[SimOutcome]) -> list[TrendFit]:
    """One trend fit per (n, m) group of experiment outcomes."""
    groups: dict[tuple[int, int], list[SimOutcome]] = {}
    for out in outcomes:
        groups.setdefault((out.params.n, out.params.m), []).append(out)
    fits = []
    for (n, m), outs in sorted(groups.items()):
        outs.sort(key=lambda o: o.params.b)
        fits.append(fit_trend([o.params.b for o in outs], [o.median for o in outs], n, m))
    return fits


@dataclass(frozen=True)
class ResistanceQuery:
    n: int
    m: int
    k: Fraction
    alpha: Fraction
    rate: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "k", as_fraction(self.k))
        object.__setattr__(self, "alpha", as_fraction(self.alpha))
        if not 0 <= self.alpha <= 1:
            raise SimulationError("alpha must lie in [0, 1]")
        if self.k < 0:
            raise SimulationError("k must be >= 0")
        if not self.rate > 0:
            raise SimulationError("adversarial request rate must be > 0")

    @property
    def b(self) -> Optional[Fraction]:
        """Refreshes per adversarial request, k/alpha; None when alpha is 0."""
        if self.alpha == 0:
            return None
        return self.k / self.alpha


def resistance(query: ResistanceQuery, fit: TrendFit) -> float:
    """Median seconds until the adversary holds a fully compromised serving set."""
    b = query.b
    if b is None:
        return math.inf
    try:
        return fit.predict(b) / query.rate
    except OverflowError:
        return math.inf


def throughput_per_vcpu(throughput_rps: float, vcpu_count: float) -> float:
    if not vcpu_count > 0:
        raise SimulationError("vcpu_count must be > 0")
    return throughput_rps / vcpu_count


_UNITS = (
    (600, 1, "sec."),
    (2 * 3600, 60, "min."),
    (2 * 86400, 3600, "hours"),
    (365.25 * 86400, 86400, "days"),
    (math.inf, 365.25 * 86400, "years"),
)


def format_duration(seconds: float) -> str:
    if math.isinf(seconds):
        return "unbounded"
    for limit, scale, unit in _UNITS:
        if seconds < limit:
            value = seconds / scale
            return f"{value:.0f} {unit}" if value >= 20 or unit == "sec." else f"{value:.1f} {unit}"
    raise AssertionError


# ---------------------------------------------------------------------------
# CSV

OUTCOME_FIELDS = ("n", "m", "b", "q1", "median", "q3", "p5", "p95", "trials", "seed")
FIT_FIELDS = ("n", "m", "A", "C", "R2", "R2_linear", "source")


def _fmt_b(b: Fraction) -> str:
    return str(b.numerator) if b.denominator == 1 else f"{b.numerator}/{b.denominator}"


def write_outcomes_csv(outcomes: Iterable[SimOutcome], fh: TextIO) -> None:
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(OUTCOME_FIELDS)
    for o in outcomes:
        p = o.params
        writer.writerow([p.n, p.m, _fmt_b(p.b), f"{o.q1:g}", f"{o.median:g}", f"{o.q3:g}",
                         f"{o.p5:g}", f"{o.p95:g}", p.trials, p.seed])


def read_outcome_rows(fh: TextIO) -> list[dict[str, object]]:
    """Parse a simulation CSV into dicts with typed n, m, b and median."""
    reader = csv.DictReader(fh)
    missing = {"n", "m", "b", "median"} - set(reader.fieldnames or ())
    if missing:
        raise SimulationError(f"CSV lacks columns: {', '.join(sorted(missing))}")
    rows = []
    for row in reader:
        rows.append({"n": int(row["n"]), "m": int(row["m"]),
                     "b": as_fraction(row["b"]), "median": float(row["median"])})
    return rows


def fit_rows(rows: Iterable[Mapping[str, object]]) -> list[TrendFit]:
    groups: dict[tuple[int, int], list[tuple[Fraction, float]]] = {}
    for row in rows:
        groups.setdefault((row["n"], row["m"]), []).append((row["b"], row["median"]))  # type: ignore[index]
    fits = []
    for (n, m), pts in sorted(groups.items()):
        pts.sort()
        fits.append(fit_trend([b for b, _ in pts], [y for _, y in pts], n, m))
    return fits


def write_fits_csv(fits: Iterable[TrendFit], fh: TextIO) -> None:
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(FIT_FIELDS)
    for f in fits:
        writer.writerow(["" if f.n is None else f.n, "" if f.m is None else f.m,
                         f"{f.amplitude:.6g}", f"{f.rate:.6g}", f"{f.r_squared:.6f}",
                         f"{f.r_squared_linear:.6f}", f.source])


def read_fits_csv(fh: TextIO) -> list[TrendFit]:
    out = []
    for row in csv.DictReader(fh):
        out.append(TrendFit(
            amplitude=float(row["A"]), rate=float(row["C"]), r_squared=float(row["R2"]),
            r_squared_linear=float(row.get("R2_linear") or "nan"),
            n=int(row["n"]) if row.get("n") else None,
            m=int(row["m"]) if row.get("m") else None,
            source=row.get("source") or "local-fit",
        ))
    return out

"""Dispersion theory made executable.

Theoretical coefficient bounds per attention variant, empirical dispersion
sweeps over growing sequence lengths (the max coefficient must decay like
1/n for every normalized global variant, and must not decay at all for
windowed attention with fixed window content), the heavy-tailed-logit
counterexample where a query keeps attending to the first key, and
multiply-add cost models for the complexity claims.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .attention import KernelSpec, WindowSpec, phi_values, _apply_psi, _phi_weights
from .errors import BoundViolationError, DimensionError
from .rng import rng_for

VARIANTS = ("softmax", "linear", "focused", "mila", "window", "differential")

_DEFAULT_KERNELS = {
    "softmax": KernelSpec.softmax,
    "linear": KernelSpec.linear,
    "focused": KernelSpec.focused,
    "window": KernelSpec.softmax,
    "mila": KernelSpec.linear,
    "differential": KernelSpec.softmax,
}


def default_kernel(variant: str) -> KernelSpec:
    if variant not in _DEFAULT_KERNELS:
        raise ValueError(f"unknown variant {variant!r}, choose from {VARIANTS}")
    return _DEFAULT_KERNELS[variant]()


@dataclass(frozen=True)
class BoundSpec:
    """Inputs of the per-variant coefficient bound.

    phi_at_argmin and phi_at_argmax are the kernel values at the extremes of
    the compact logit domain (phi(a) and phi(b)); n is the key count the
    coefficients are normalized over.
    """

    variant: str
    phi_at_argmin: float
    phi_at_argmax: float
    n: int

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.phi_at_argmin <= 0:
            raise ValueError(f"phi(a) must be positive, got {self.phi_at_argmin}")
        if self.phi_at_argmax < self.phi_at_argmin:
            raise ValueError("phi(b) must be >= phi(a)")
        if self.n < 1:
            raise ValueError("n must be >= 1")

    @classmethod
    def from_logit_range(cls, variant: str, kernel: KernelSpec, lo: float, hi: float,
                         n: int) -> "BoundSpec":
        # every supported phi is nondecreasing, so the extremizers are the endpoints
        pa, pb = float(phi_values(kernel, lo)), float(phi_values(kernel, hi))
        return cls(variant, pa, pb, n)


def coefficient_bounds(spec: BoundSpec) -> tuple[float, float]:
    """Theoretical (lower, upper) for one normalized coefficient.

    Standard variants: phi(a)/(n phi(b)) <= alpha <= phi(b)/(n phi(a)).
    Differential attention subtracts two such matrices, so its coefficients
    live in the symmetric difference interval around zero.
    """
    pa, pb, n = spec.phi_at_argmin, spec.phi_at_argmax, spec.n
    if spec.variant == "differential":
        spread = (pb / pa - pa / pb) / n
        return (-spread, spread)
    return (pa / (n * pb), pb / (n * pa))


@dataclass(frozen=True)
class BoundedSampler:
    """Draws (q, k) with every logit q_i . k_j bounded by logit_bound.

    Rows are random directions with norms in (0, sqrt(M)], so |q_i . k_j| <= M
    by Cauchy-Schwarz. Options support the degenerate sweep modes: nonneg
    draws elementwise-nonnegative rows (required by relu-based features),
    tile_rows repeats one fixed block of rows so window content is identical
    at every sequence length, and zero_queries zeroes q for uniform logits.
    """

    d: int = 16
    logit_bound: float = 1.0
    nonneg: bool = False
    tile_rows: int | None = None
    zero_queries: bool = False

    def _rows(self, rng: np.random.Generator, count: int) -> np.ndarray:
        x = rng.standard_normal((count, self.d))
        if self.nonneg:
            x = np.abs(x)
        norms = np.linalg.norm(x, axis=1, keepdims=True)
        radius = rng.uniform(0.2, 1.0, (count, 1)) * math.sqrt(self.logit_bound)
        return x * radius / norms

    def draw(self, rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
        if self.tile_rows is not None:
            if n % self.tile_rows != 0:
                raise DimensionError(f"tile_rows {self.tile_rows} does not divide n={n}")
            reps = n // self.tile_rows
            q = np.tile(self._rows(rng, self.tile_rows), (reps, 1))
            k = np.tile(self._rows(rng, self.tile_rows), (reps, 1))
        else:
            q, k = self._rows(rng, n), self._rows(rng, n)
        if self.zero_queries:
            q = np.zeros_like(q)
        return q, k


@dataclass
class DispersionReport:
    """Per-n extreme coefficients, their theoretical bounds, and the decay fit."""

    variant: str
    n_values: list[int]
    max_coeff: list[float]
    min_coeff: list[float]
    upper_bound: list[float]
    lower_bound: list[float]
    slope: float
    samples: int
    seed: int
    max_coeff_median: list[float] = field(default_factory=list)

    def __post_init__(self):
        lengths = {len(self.n_values), len(self.max_coeff), len(self.min_coeff),
                   len(self.upper_bound), len(self.lower_bound)}
        if lengths != {len(self.n_values)}:
            raise ValueError("report columns must share one length")
        if self.variant != "differential":
            # normalized-coefficient variants produce strictly positive weights
            for mx, mn in zip(self.max_coeff, self.min_coeff):
                if not mx >= mn > 0:
                    raise ValueError(f"expected max >= min > 0, got ({mx}, {mn})")

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["n", "max_coeff", "min_coeff", "lower", "upper"])
        for i, n in enumerate(self.n_values):
            writer.writerow([n, repr(self.max_coeff[i]), repr(self.min_coeff[i]),
                             repr(self.lower_bound[i]), repr(self.upper_bound[i])])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DispersionReport":
        return cls(**json.loads(text))


def _variant_cell(variant: str, kernel: KernelSpec, q: np.ndarray, k: np.ndarray,
                  win: WindowSpec | None, epsilon: float = 1e-6):
    """Coefficients plus their sample-specific rigorous bounds for one draw."""
    fq = _apply_psi(q, kernel.psi_q, kernel.psi_p)
    fk = _apply_psi(k, kernel.psi_k, kernel.psi_p)
    n = q.shape[0]
    if variant == "window":
        if win is None:
            raise ValueError("window variant requires a WindowSpec")
        if n % win.w != 0:
            raise DimensionError(f"window {win.w} does not divide n={n}")
        coeff = np.empty((n, win.w))
        lo_logit, hi_logit = np.inf, -np.inf
        for b in range(n // win.w):
            s = slice(b * win.w, (b + 1) * win.w)
            logits = fq[s] @ fk[s].T
            lo_logit = min(lo_logit, logits.min())
            hi_logit = max(hi_logit, logits.max())
            w = _shifted_phi(kernel, logits)
            coeff[s] = w / w.sum(axis=1, keepdims=True)
        spec = BoundSpec.from_logit_range(variant, kernel, lo_logit, hi_logit, win.w)
        return coeff, coefficient_bounds(spec)
    logits = fq @ fk.T
    lo_logit, hi_logit = float(logits.min()), float(logits.max())
    if variant == "mila":
        # un-gated ratio with the stabilizer in the denominator; the epsilon
        # keeps the true coefficient at or below the textbook lower bound, so
        # the rigorous lower bound carries the epsilon too
        den = logits.sum(axis=1, keepdims=True) + epsilon
        coeff = logits / den
        pa, pb = phi_values(kernel, lo_logit), phi_values(kernel, hi_logit)
        return coeff, (float(pa / (n * pb + epsilon)), float(pb / (n * pa)))
    w = _shifted_phi(kernel, logits)
    coeff = w / w.sum(axis=1, keepdims=True)
    spec = BoundSpec.from_logit_range(variant, kernel, lo_logit, hi_logit, n)
    return coeff, coefficient_bounds(spec)


def _shifted_phi(kernel: KernelSpec, logits: np.ndarray) -> np.ndarray:
    # ratio-preserving weights (exp kernels shift by the row max)
    return _phi_weights(kernel, logits)


def measure_dispersion(variant: str, kernel: KernelSpec | None, sampler: BoundedSampler,
                       n_values, trials: int, seed: int,
                       win: WindowSpec | None = None,
                       threads: int | None = None) -> DispersionReport:
    """Empirical dispersion sweep with per-sample bound containment.

    For each n, draws `trials` seeded (q, k) pairs, extracts the variant's
    coefficient matrix, and checks every coefficient against the bounds
    computed from that draw's own logit extrema. A violation raises
    BoundViolationError: the bounds are a test oracle, not advice. The
    recorded per-n bounds are the loosest per-trial bounds.
    """
    if variant not in ("softmax", "linear", "focused", "window", "mila"):
        raise ValueError(f"cannot sweep variant {variant!r}")
    kernel = kernel or default_kernel(variant)
    n_values = [int(n) for n in n_values]
    if any(b <= a for a, b in zip(n_values, n_values[1:])):
        raise ValueError("n_values must be strictly ascending")

    def run_cell(n: int, trial: int):
        # fixed window content must not depend on n, or it would not be fixed
        if sampler.tile_rows is not None:
            rng = rng_for(seed, variant, "tile", trial)
        else:
            rng = rng_for(seed, variant, n, trial)
        q, k = sampler.draw(rng, n)
        coeff, (lo, hi) = _variant_cell(variant, kernel, q, k, win)
        cmin, cmax = float(coeff.min()), float(coeff.max())
        if cmin < lo - 1e-15 or cmax > hi + 1e-15:
            raise BoundViolationError(
                f"{variant}: coefficient outside bounds at n={n}, trial={trial}: "
                f"observed [{cmin}, {cmax}], bounds [{lo}, {hi}]"
            )
        return cmin, cmax, lo, hi

    if threads is None:
        threads = int(os.environ.get("DISPERSION_LAB_THREADS", "1"))
    max_c, min_c, ub, lb, med = [], [], [], [], []
    for n in n_values:
        cells = list(range(trials))
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                results = list(pool.map(lambda t: run_cell(n, t), cells))
        else:
            results = [run_cell(n, t) for t in cells]
        mins, maxs, los, his = zip(*results)
        max_c.append(max(maxs))
        min_c.append(min(mins))
        lb.append(min(los))
        ub.append(max(his))
        med.append(float(np.median(maxs)))
    report = DispersionReport(variant=variant, n_values=n_values, max_coeff=max_c,
                              min_coeff=min_c, upper_bound=ub, lower_bound=lb,
                              slope=0.0, samples=trials, seed=seed,
                              max_coeff_median=med)
    report.slope = fit_decay_slope(report)
    return report


def fit_decay_slope(report: DispersionReport) -> float:
    """Least-squares slope of log(max coefficient) against log(n).

    Bitwise-constant coefficients (the windowed non-dispersion case) return
    an exact slope of 0.
    """
    if len(report.n_values) < 3:
        raise ValueError("need at least 3 sequence lengths to fit a slope")
    y = np.asarray(report.max_coeff, dtype=np.float64)
    if np.any(y <= 0):
        raise ValueError("slope fit requires positive coefficients")
    if np.all(y == y[0]):
        return 0.0
    x = np.log(np.asarray(report.n_values, dtype=np.float64))
    return float(np.polyfit(x, np.log(y), 1)[0])


def remark_counterexample(n: int) -> tuple[float, float]:
    """First coefficient under the heavy-tailed logits log(1/j^2).

    With an exp kernel the first coefficient is 1 / sum_{j<=n} j^-2, which
    stays strictly above its n -> infinity limit 6/pi^2. Unbounded logits
    escape the dispersion theorem: this query never stops attending to the
    first key.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    j = np.arange(1, n + 1, dtype=np.float64)
    partial = float(np.sum(1.0 / (j * j)))
    return 1.0 / partial, 6.0 / math.pi**2


_COMPLEXITY_VARIANTS = ("full", "window", "homogeneous_mix", "sema", "linear")


def complexity_estimate(variant: str, n: int, d: int, w: int | None = None) -> int:
    """Closed-form multiply-add count of coefficient computation plus value
    aggregation (projections and the exp/divide of normalization excluded)."""
    if variant == "softmax":
        variant = "full"
    if variant not in _COMPLEXITY_VARIANTS:
        raise ValueError(f"unknown variant {variant!r}, choose from {_COMPLEXITY_VARIANTS}")
    if n < 1 or d < 1:
        raise ValueError("n and d must be positive")
    if variant in ("window", "sema"):
        if w is None or w < 1:
            raise ValueError(f"variant {variant!r} requires a window size")
        if n % w != 0:
            raise ValueError(f"window {w} does not divide n={n}")
    if variant == "full":
        return 2 * n * n * d
    if variant == "window":
        return 2 * n * w * d
    if variant == "homogeneous_mix":
        return n * d
    if variant == "sema":
        return 2 * n * w * d + n * d
    return 2 * n * d * d  # linear, associative form


def instrumented_counts(variant: str, q: np.ndarray, k: np.ndarray, v: np.ndarray,
                        w: int | None = None) -> int:
    """Count multiply-adds by actually iterating the computation loops.

    Independent oracle for complexity_estimate: the count emerges from loop
    structure, not from a formula. Counts the numerator path only, matching
    the cost-model scope (no exp, no divides).
    """
    if variant == "softmax":
        variant = "full"
    n, d = q.shape
    count = 0
    if variant == "full":
        for i in range(n):
            for j in range(n):
                for l in range(d):
                    count += 1  # logit accumulation q[i,l]*k[j,l]
        for i in range(n):
            for j in range(n):
                for c in range(d):
                    count += 1  # value aggregation coeff[i,j]*v[j,c]
        return count
    if variant == "window":
        for _ in range(n // w):
            for i in range(w):
                for j in range(w):
                    for l in range(d):
                        count += 1
            for i in range(w):
                for j in range(w):
                    for c in range(d):
                        count += 1
        return count
    if variant == "homogeneous_mix":
        for i in range(n):
            for c in range(d):
                count += 1  # running sum of value rows
        return count
    if variant == "sema":
        return instrumented_counts("window", q, k, v, w) + instrumented_counts(
            "homogeneous_mix", q, k, v
        )
    if variant == "linear":
        for i in range(n):
            for a in range(d):
                for b in range(d):
                    count += 1  # state accumulation k[i,a]*v[i,b]
        for i in range(n):
            for a in range(d):
                for b in range(d):
                    count += 1  # query contraction q[i,a]*S[a,b]
        return count
    raise ValueError(f"unknown variant {variant!r}")

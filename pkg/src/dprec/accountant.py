"""Renyi-divergence bookkeeping and (epsilon, delta) extraction.

For equal-variance Gaussians the order-lambda divergence has the closed
form ``lambda * C^2 / (2 sigma^2)`` (both directions), and the subsampled
mixture admits an exact binomial expansion for integer lambda, evaluated
here in log space. Composition tracks three accumulators per run: the
importance-sampling overhead ``rho`` (sum of e^{D_2} without subsampling,
the conservative reading), and per-order sums of the amplified
divergences at orders ``lambda`` and ``lambda + 1``. Natural logs
throughout; base 2 appears only in bit counts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import (
    InfeasibleError,
    InvalidConfigError,
    InvalidOrderError,
    OverheadExceedsDeltaError,
    VacuousBoundError,
)

_LOG2 = math.log(2.0)


@dataclass(frozen=True)
class OrderGrid:
    """Strictly increasing integer Renyi orders, all >= 2."""

    lambdas: tuple[int, ...]

    def __post_init__(self) -> None:
        if not self.lambdas:
            raise InvalidConfigError("order grid must be non-empty")
        if any(not isinstance(l, int) or l < 2 for l in self.lambdas):
            raise InvalidConfigError("orders must be integers >= 2")
        if any(b <= a for a, b in zip(self.lambdas, self.lambdas[1:])):
            raise InvalidConfigError("orders must be strictly increasing")

    @classmethod
    def default(cls) -> "OrderGrid":
        """All integer orders 2..64, covering every regime exercised here."""
        return cls(tuple(range(2, 65)))


@dataclass(frozen=True)
class PrivacyTarget:
    epsilon: float
    delta: float

    def __post_init__(self) -> None:
        if self.epsilon < 0:
            raise InvalidConfigError("epsilon must be nonnegative")
        if not 0.0 < self.delta < 1.0:
            raise InvalidConfigError("delta must be in (0, 1)")


@dataclass(frozen=True)
class BitrateQuery:
    """Inputs to the sufficient-bitrate bound."""

    xi: float  # target bias
    bound: float  # bound G on |test function|
    d2: float  # order-2 divergence of target from proposal

    def __post_init__(self) -> None:
        if self.xi <= 0 or self.bound <= 0:
            raise InvalidConfigError("xi and bound must be positive")
        if self.d2 < 0:
            raise InvalidConfigError("d2 must be nonnegative")


@dataclass(frozen=True)
class AccountantState:
    """Immutable accumulator snapshot; ``step`` returns a new state."""

    orders: OrderGrid
    rho: float = 0.0
    k_hat: tuple[float, ...] = ()
    m_hat: tuple[float, ...] = ()
    steps: int = 0
    amplified_steps: int = 0  # steps taken at alpha < 1

    def __post_init__(self) -> None:
        if not self.k_hat:
            object.__setattr__(self, "k_hat", (0.0,) * len(self.orders.lambdas))
        if not self.m_hat:
            object.__setattr__(self, "m_hat", (0.0,) * len(self.orders.lambdas))
        if len(self.k_hat) != len(self.orders.lambdas) or len(self.m_hat) != len(
            self.orders.lambdas
        ):
            raise InvalidConfigError("accumulator length does not match order grid")


@dataclass(frozen=True)
class EpsilonReport:
    epsilon: float
    best_lambda: int
    overhead: float


def renyi_gauss(lam: float, clip: float, sigma: float) -> float:
    """Worst-case order-lam divergence between clipped update and prior.

    Equals ``lam * clip^2 / (2 sigma^2)``; the same value serves both
    argument orders for equal-variance Gaussians.
    """
    if lam <= 1:
        raise InvalidOrderError(f"order must exceed 1, got {lam}")
    if sigma <= 0:
        raise InvalidConfigError("sigma must be positive")
    if clip < 0:
        raise InvalidConfigError("clip must be nonnegative")
    return lam * clip * clip / (2.0 * sigma * sigma)


def _as_integer_order(lam) -> int:
    if isinstance(lam, bool) or not (
        isinstance(lam, int) or (isinstance(lam, float) and lam.is_integer())
    ):
        raise InvalidOrderError(f"subsampled bound needs integer order, got {lam!r}")
    lam = int(lam)
    if lam < 2:
        raise InvalidOrderError(f"order must be an integer >= 2, got {lam}")
    return lam


def renyi_subsampled(lam, clip: float, sigma: float, alpha: float) -> float:
    """Binomial-expansion bound on the subsampled-mixture divergence.

    ``(1/(lam-1)) ln E_{k~Binomial(lam, alpha)} exp((k^2-k) clip^2 / (2 sigma^2))``,
    computed with log-sum-exp. Exact for equal-variance Gaussians at the
    clip boundary, and it dominates the reverse mixture direction.
    """
    lam = _as_integer_order(lam)
    if sigma <= 0:
        raise InvalidConfigError("sigma must be positive")
    if clip < 0:
        raise InvalidConfigError("clip must be nonnegative")
    if not 0.0 <= alpha <= 1.0:
        raise InvalidConfigError("alpha must be in [0, 1]")
    if alpha == 0.0 or clip == 0.0:
        return 0.0
    if alpha == 1.0:
        return renyi_gauss(lam, clip, sigma)
    r2 = clip * clip / (2.0 * sigma * sigma)
    log_a = math.log(alpha)
    log_1ma = math.log1p(-alpha)
    terms = []
    for k in range(lam + 1):
        log_comb = (
            math.lgamma(lam + 1) - math.lgamma(k + 1) - math.lgamma(lam - k + 1)
        )
        terms.append(log_comb + k * log_a + (lam - k) * log_1ma + (k * k - k) * r2)
    m = max(terms)
    lse = m + math.log(sum(math.exp(t - m) for t in terms))
    return lse / (lam - 1)


def accumulate(
    state: AccountantState, clip: float, sigma: float, alpha: float, n_steps: int
) -> AccountantState:
    """Apply ``n_steps`` identical mechanism steps in closed form."""
    if n_steps < 0:
        raise InvalidConfigError("n_steps must be nonnegative")
    if n_steps == 0:
        return state
    rho_term = math.exp(renyi_gauss(2, clip, sigma)) if clip > 0 else 1.0
    k_new = tuple(
        k + n_steps * renyi_subsampled(lam, clip, sigma, alpha)
        for k, lam in zip(state.k_hat, state.orders.lambdas)
    )
    m_new = tuple(
        m + n_steps * renyi_subsampled(lam + 1, clip, sigma, alpha)
        for m, lam in zip(state.m_hat, state.orders.lambdas)
    )
    return AccountantState(
        orders=state.orders,
        rho=state.rho + n_steps * rho_term,
        k_hat=k_new,
        m_hat=m_new,
        steps=state.steps + n_steps,
        amplified_steps=state.amplified_steps + (n_steps if alpha < 1.0 else 0),
    )


def step(state: AccountantState, clip: float, sigma: float, alpha: float) -> AccountantState:
    """One mechanism step: rho += e^{D_2 unamplified}; per-order sums grow
    by the amplified divergences at orders lambda and lambda + 1."""
    return accumulate(state, clip, sigma, alpha, 1)


def overhead_term(rho: float, bits_total: int | None) -> float:
    """The ``12 rho / 2^bits_total`` addition to delta.

    ``None`` means the mechanism transmits exact samples (no coding), so
    the importance-sampling failure term vanishes.
    """
    if bits_total is None:
        return 0.0
    if bits_total < 0:
        raise InvalidConfigError("bits_total must be nonnegative")
    if rho == 0.0:
        return 0.0
    # Plain float path while 2^bits is representable; log-space fallback
    # for huge bit totals where the term underflows anyway.
    if bits_total <= 1023:
        return 12.0 * rho / (2.0**bits_total)
    log2_term = math.log2(12.0) + math.log2(rho) - bits_total
    if log2_term < -1074.0:
        return 0.0
    return 2.0**log2_term


def epsilon_report(
    state: AccountantState, delta: float, bits_total: int | None
) -> EpsilonReport:
    """Best epsilon over the order grid, with the minimizing order."""
    if not 0.0 < delta < 1.0:
        raise InvalidConfigError("delta must be in (0, 1)")
    ov = overhead_term(state.rho, bits_total)
    if delta <= ov:
        raise OverheadExceedsDeltaError(
            f"delta {delta:g} <= overhead {ov:g}; raise bits_total or reduce steps"
        )
    log_slack = math.log(delta - ov)
    best = math.inf
    best_lam = state.orders.lambdas[0]
    for lam, k, m in zip(state.orders.lambdas, state.k_hat, state.m_hat):
        eps = (lam - 1) / lam * k + m - log_slack / lam
        if eps < best:
            best = eps
            best_lam = lam
    return EpsilonReport(best, best_lam, ov)


def epsilon_of_delta(state: AccountantState, delta: float, bits_total: int | None) -> float:
    """min over orders of ((lam-1)/lam) k_hat + m_hat - ln(delta - overhead)/lam."""
    return epsilon_report(state, delta, bits_total).epsilon


def local_epsilon_of_delta(state: AccountantState, delta: float, bits_total: int | None) -> float:
    """Per-update guarantee: same formula, but the state must have been
    accumulated without subsampling amplification (alpha = 1)."""
    if state.amplified_steps:
        raise InvalidConfigError(
            "local guarantee requires a state accumulated entirely at alpha=1"
        )
    return epsilon_of_delta(state, delta, bits_total)


def bitrate_bound(query: BitrateQuery) -> float:
    """Sufficient bitrate: ``log2 12 + d2/ln 2 - log2(xi / G)``.

    Raises once the formula goes negative (bias targets loose enough
    that the bound says nothing); at ``xi = 12 G, d2 = 0`` it collapses
    to exactly zero bits.
    """
    value = math.log2(12.0) + query.d2 / _LOG2 - math.log2(query.xi / query.bound)
    if value < 0.0:
        raise VacuousBoundError(
            f"bias target {query.xi:g} is vacuous for |zeta| <= {query.bound:g}"
        )
    return value


def calibrate_clip(
    rounds: int,
    per_round: int,
    population: int,
    sigma: float,
    bits_total: int,
    target: PrivacyTarget,
    orders: OrderGrid | None = None,
    rel_tol: float = 1e-6,
) -> float:
    """Largest clip threshold whose end-of-run epsilon meets the target.

    Accounts ``rounds * per_round`` steps at rate ``1/population``
    (sampling with replacement); epsilon is monotone increasing in the
    clip, so bisection on [0, 10 sigma] (doubled until the bracket
    contains the crossing) is valid.
    """
    if rounds < 0 or per_round < 1 or population < 1:
        raise InvalidConfigError("rounds >= 0, per_round >= 1, population >= 1 required")
    if sigma <= 0:
        raise InvalidConfigError("sigma must be positive")
    orders = orders or OrderGrid.default()
    n_steps = rounds * per_round
    alpha = 1.0 / population

    def eps_at(clip_value: float) -> float:
        state = accumulate(AccountantState(orders), clip_value, sigma, alpha, n_steps)
        try:
            return epsilon_of_delta(state, target.delta, bits_total)
        except OverheadExceedsDeltaError:
            return math.inf

    if eps_at(0.0) > target.epsilon:
        raise InfeasibleError(
            "even a zero clip exceeds the privacy budget; raise bits_total, "
            "delta, or epsilon, or reduce rounds"
        )
    lo, hi = 0.0, 10.0 * sigma
    while eps_at(hi) <= target.epsilon:
        hi *= 2.0
        if hi > 1e12 * sigma:
            return hi  # target effectively unconstrained at this scale
    while hi - lo > rel_tol * max(hi, sigma):
        mid = 0.5 * (lo + hi)
        if eps_at(mid) <= target.epsilon:
            lo = mid
        else:
            hi = mid
    return lo


def gauss_baseline_epsilon(
    rounds: int,
    q_rate: float,
    noise_mult: float,
    delta: float,
    orders: OrderGrid | None = None,
) -> float:
    """Standard subsampled-Gaussian accounting for the averaging baseline.

    ``min over lam of rounds * D_sub(lam, C=1, sigma=noise_mult, alpha=q) +
    ln(1/delta)/(lam-1)``.
    """
    if rounds < 0:
        raise InvalidConfigError("rounds must be nonnegative")
    if not 0.0 < q_rate <= 1.0:
        raise InvalidConfigError("q_rate must be in (0, 1]")
    if noise_mult <= 0:
        raise InvalidConfigError("noise_mult must be positive")
    if not 0.0 < delta < 1.0:
        raise InvalidConfigError("delta must be in (0, 1)")
    orders = orders or OrderGrid.default()
    log_inv_delta = math.log(1.0 / delta)
    return min(
        rounds * renyi_subsampled(lam, 1.0, noise_mult, q_rate) + log_inv_delta / (lam - 1)
        for lam in orders.lambdas
    )


def calibrate_noise_multiplier(
    rounds: int,
    q_rate: float,
    target: PrivacyTarget,
    orders: OrderGrid | None = None,
    rel_tol: float = 1e-6,
) -> float:
    """Smallest noise multiplier meeting the baseline target (bisection)."""
    if rounds < 1:
        raise InvalidConfigError("rounds must be >= 1")

    def eps_at(z: float) -> float:
        return gauss_baseline_epsilon(rounds, q_rate, z, target.delta, orders)

    lo, hi = 1e-3, 1.0
    while eps_at(hi) > target.epsilon:
        hi *= 2.0
        if hi > 1e9:
            raise InfeasibleError("no noise multiplier below 1e9 meets the target")
    while hi - lo > rel_tol * hi:
        mid = 0.5 * (lo + hi)
        if eps_at(mid) <= target.epsilon:
            hi = mid
        else:
            lo = mid
    return hi

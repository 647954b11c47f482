"""Privacy accounting for the Poisson-subsampled Gaussian mechanism.

Two independent accountants:

* a privacy-loss-distribution (PLD) accountant that discretises the privacy
  loss random variable on a uniform grid and self-composes it by FFT
  convolution (the tight route), and
* a Renyi accountant using the exact integer-order bound for the subsampled
  Gaussian with the classical conversion to (epsilon, delta) (the oracle
  route; always an upper bound on the PLD route).

Conventions.  `noise_multiplier` (rho) is the std of the Gaussian noise added
to the *sum* of clipped per-example gradients, in units of the clip norm, so
the mechanism analysed is the sensitivity-1 pair

    Q = N(0, rho^2)   vs   P = (1 - q) N(0, rho^2) + q N(1, rho^2)

and the privacy loss is L(x) = ln(dP/dQ)(x) with x ~ P.  Discretised losses
are always rounded *up* to the next grid point, mass trimmed off the upper
tail is charged to delta, and mass trimmed off the lower tail is collapsed
into the lowest kept bucket (a further round-up), so every epsilon reported
from the grid is a guarantee, never an estimate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import fft as spfft
from scipy import stats
from scipy.special import gammaln, logsumexp

from .errors import GridSizeError, UnattainablePrivacyError

# Grid-length hard limit for a single mass vector; exceeding it is an explicit
# resource error, never a silent truncation.
MAX_GRID_LEN = 1 << 26

DEFAULT_MESH = 1e-3
DEFAULT_TAIL_MASS = 1e-15

# Trim threshold used inside compose(); see compose() docstring.
_TRIM_TAIL = 1e-18

# Construction refuses grids whose truncated mass could rival delta/10 for
# any plausible target delta (smallest considered: 1e-5).
_PLAUSIBLE_DELTA_FLOOR = 1e-5

_NORMALISATION_TOL = 1e-9


@dataclass(frozen=True)
class PrivacyConfig:
    """Inputs of one accounting question: (rho, q, T, delta)."""

    noise_multiplier: float
    sampling_rate: float
    steps: int
    delta: float

    def __post_init__(self) -> None:
        if not self.noise_multiplier > 0:
            raise ValueError("noise_multiplier must be > 0")
        if not 0 < self.sampling_rate <= 1:
            raise ValueError("sampling_rate must be in (0, 1]")
        if not self.steps >= 1:
            raise ValueError("steps must be >= 1")
        if not 0 < self.delta < 1:
            raise ValueError("delta must be in (0, 1)")


@dataclass(frozen=True)
class PrivacySpend:
    """An (epsilon, delta) guarantee plus the grid slack folded into it."""

    epsilon: float
    delta: float
    error_bound: float

    def __post_init__(self) -> None:
        if self.epsilon < 0 or self.error_bound < 0:
            raise ValueError("epsilon and error_bound must be non-negative")


@dataclass
class PrivacyLossDistribution:
    """Discretised privacy loss: mass `masses[i]` at `grid_origin + i*mesh`.

    `truncated_mass_plus` is mass known to lie above the grid (charged to
    delta when queried); `truncated_mass_minus` is mass dropped below the
    grid (zero for distributions built here, kept for generality);
    `infinity_mass` is mass where the loss is +inf.
    """

    grid_origin: float
    mesh: float
    masses: np.ndarray
    truncated_mass_plus: float = 0.0
    truncated_mass_minus: float = 0.0
    infinity_mass: float = 0.0
    compositions: int = field(default=1, compare=False)

    @property
    def grid(self) -> np.ndarray:
        return self.grid_origin + self.mesh * np.arange(len(self.masses))

    def total_mass(self) -> float:
        return (
            float(np.sum(self.masses))
            + self.truncated_mass_plus
            + self.truncated_mass_minus
            + self.infinity_mass
        )

    def validate(self) -> None:
        if not self.mesh > 0:
            raise ValueError("mesh must be > 0")
        if len(self.masses) == 0:
            raise ValueError("empty mass vector")
        if np.any(self.masses < 0):
            raise ValueError("negative probability mass")
        if min(self.truncated_mass_plus, self.truncated_mass_minus, self.infinity_mass) < 0:
            raise ValueError("negative truncated/infinity mass")
        if abs(self.total_mass() - 1.0) > _NORMALISATION_TOL:
            raise ValueError(f"mass not normalised: {self.total_mass()!r}")


def gaussian_mechanism_delta(epsilon: float, rho: float) -> float:
    """Exact hockey-stick divergence delta(eps) of N(0,rho^2) vs N(1,rho^2).

    delta(eps) = Phi(1/(2 rho) - eps rho) - e^eps Phi(-1/(2 rho) - eps rho).
    The second term is evaluated through logcdf so large eps does not
    overflow.  Monotone non-increasing in eps; range [0, 1].
    """
    if not rho > 0:
        raise ValueError("rho must be > 0")
    a = 0.5 / rho - epsilon * rho
    b = -0.5 / rho - epsilon * rho
    term1 = stats.norm.cdf(a)
    term2 = math.exp(min(epsilon + stats.norm.logcdf(b), 0.0))
    return float(min(1.0, max(0.0, term1 - term2)))


def gaussian_epsilon(delta: float, rho: float, tol: float = 1e-12) -> float:
    """Invert `gaussian_mechanism_delta` by bisection (independent oracle)."""
    if not 0 < delta < 1:
        raise ValueError("delta must be in (0, 1)")
    lo, hi = 0.0, 1.0
    if gaussian_mechanism_delta(lo, rho) <= delta:
        return 0.0
    while gaussian_mechanism_delta(hi, rho) > delta:
        hi *= 2.0
        if hi > 1e8:
            raise UnattainablePrivacyError("gaussian epsilon bisection diverged")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if gaussian_mechanism_delta(mid, rho) <= delta:
            hi = mid
        else:
            lo = mid
    return hi


def _loss_to_sample(loss: np.ndarray, rho: float, q: float) -> np.ndarray:
    """Inverse of the privacy-loss function: x with ln(dP/dQ)(x) = loss.

    dP/dQ(x) = (1-q) + q exp((2x-1)/(2 rho^2)) is strictly increasing, so
    x(loss) = rho^2 (ln z - ln q) + 1/2 with z = e^loss - (1-q), computed as
    ln z = loss + log1p(-exp(-(loss - ln(1-q)))) which is stable for losses
    arbitrarily close to the ln(1-q) support edge.
    """
    loss = np.asarray(loss, dtype=float)
    if q >= 1.0:
        return rho * rho * loss + 0.5
    u = loss - math.log1p(-q)  # > 0 on the loss support
    with np.errstate(divide="ignore"):
        ln_z = loss + np.log1p(-np.exp(-u))
    return rho * rho * (ln_z - math.log(q)) + 0.5


def _mixture_cdf_sf(x: np.ndarray, rho: float, q: float) -> tuple[np.ndarray, np.ndarray]:
    """CDF and survival of P = (1-q) N(0, rho^2) + q N(1, rho^2)."""
    cdf = (1 - q) * stats.norm.cdf(x / rho) + q * stats.norm.cdf((x - 1.0) / rho)
    sf = (1 - q) * stats.norm.sf(x / rho) + q * stats.norm.sf((x - 1.0) / rho)
    return cdf, sf


def subsampled_gaussian_pld(
    rho: float,
    q: float,
    mesh: float = DEFAULT_MESH,
    tail_mass: float = DEFAULT_TAIL_MASS,
) -> PrivacyLossDistribution:
    """Discretise the single-step privacy loss of the subsampled Gaussian.

    Losses in (grid[i-1], grid[i]] are assigned to grid[i] (round-up); all
    mass below the first grid point is collapsed into it, which for q < 1 is
    vacuous because the loss support is bounded below by ln(1-q).  Mass above
    the last grid point (at most ~tail_mass by construction) is recorded in
    `truncated_mass_plus`.
    """
    if not rho > 0:
        raise ValueError("rho must be > 0")
    if not 0 < q <= 1:
        raise ValueError("q must be in (0, 1]")
    if not mesh > 0:
        raise ValueError("mesh must be > 0")
    if not 0 < tail_mass < 1:
        raise ValueError("tail_mass must be in (0, 1)")

    # Upper extent: S_P(x_hi) <= tail_mass.
    x_hi = 1.0 + rho * float(stats.norm.isf(tail_mass / 2.0))
    w_hi = (2.0 * x_hi - 1.0) / (2.0 * rho * rho)
    if q >= 1.0:
        loss_hi = w_hi
        # Lower extent by the same normal tail bound.
        loss_lo = (1.0 / (2 * rho * rho)) - float(stats.norm.isf(tail_mass)) / rho
        k0 = math.floor(loss_lo / mesh)
    else:
        loss_hi = float(np.logaddexp(math.log1p(-q), math.log(q) + w_hi))
        # Support is (ln(1-q), inf): first grid point strictly above the edge.
        k0 = math.floor(math.log1p(-q) / mesh) + 1
    origin = k0 * mesh
    n = int(math.ceil((loss_hi - origin) / mesh)) + 1
    if n < 1:
        n = 1
    if n > MAX_GRID_LEN:
        raise GridSizeError(f"single-step grid needs {n} points (limit {MAX_GRID_LEN})")

    grid = origin + mesh * np.arange(n)
    bounds = _loss_to_sample(grid, rho, q)
    cdf, sf = _mixture_cdf_sf(bounds, rho, q)
    # Difference the CDF where the boundary is left of the mixture bulk and
    # the survival function where it is right of it, for full tail precision.
    mass_from_cdf = np.diff(cdf, prepend=0.0)
    mass_from_sf = -np.diff(sf, prepend=1.0)
    masses = np.where(bounds <= 0.5, mass_from_cdf, mass_from_sf)
    np.clip(masses, 0.0, None, out=masses)
    truncated_plus = float(sf[-1])

    if truncated_plus > _PLAUSIBLE_DELTA_FLOOR / 10.0:
        raise GridSizeError(
            f"grid too small: truncated mass {truncated_plus:.3e} exceeds "
            f"{_PLAUSIBLE_DELTA_FLOOR / 10.0:.1e}; decrease tail_mass"
        )

    pld = PrivacyLossDistribution(
        grid_origin=origin,
        mesh=mesh,
        masses=masses,
        truncated_mass_plus=truncated_plus,
        compositions=1,
    )
    pld.validate()
    return pld


def _trim(
    masses: np.ndarray, origin: float, mesh: float, trunc_plus: float
) -> tuple[np.ndarray, float, float]:
    """Drop negligible tails: upper tail to trunc_plus, lower tail rounded up
    into the lowest kept bucket.  Exact mass bookkeeping, pessimistic moves only."""
    cum = np.cumsum(masses)
    total = cum[-1]
    i_lo = int(np.searchsorted(cum, _TRIM_TAIL, side="right"))
    tail = total - cum  # tail[i] = mass strictly above index i
    i_hi = int(np.searchsorted(tail[::-1], _TRIM_TAIL, side="right"))
    hi_end = len(masses) - max(i_hi - 1, 0)
    if i_lo >= hi_end:  # degenerate: keep at least one bucket
        i_lo, hi_end = 0, len(masses)
    if hi_end < len(masses):
        trunc_plus += float(np.sum(masses[hi_end:]))
    kept = masses[i_lo:hi_end].copy()
    if i_lo > 0:
        kept[0] += float(cum[i_lo - 1])
    return kept, origin + i_lo * mesh, trunc_plus


def convolve_plds(
    a: PrivacyLossDistribution, b: PrivacyLossDistribution
) -> PrivacyLossDistribution:
    """Linear convolution of two PLDs on the same mesh (one composition step).

    Full zero-padded FFT convolution, so periodisation contributes nothing;
    small cases use direct convolution and are exact.  Truncated and infinity
    masses compose additively (upper bounds on the exact cross terms).
    """
    if abs(a.mesh - b.mesh) > 1e-15 * max(a.mesh, b.mesh):
        raise ValueError("mesh mismatch")
    n = len(a.masses) + len(b.masses) - 1
    if n > MAX_GRID_LEN:
        raise GridSizeError(f"composed grid needs {n} points (limit {MAX_GRID_LEN})")
    if len(a.masses) * len(b.masses) <= 1 << 16:
        conv = np.convolve(a.masses, b.masses)
    else:
        m = spfft.next_fast_len(n, real=True)
        conv = spfft.irfft(spfft.rfft(a.masses, m) * spfft.rfft(b.masses, m), m)[:n]
        np.clip(conv, 0.0, None, out=conv)
    masses, origin, trunc_plus = _trim(
        conv,
        a.grid_origin + b.grid_origin,
        a.mesh,
        min(1.0, a.truncated_mass_plus + b.truncated_mass_plus),
    )
    return PrivacyLossDistribution(
        grid_origin=origin,
        mesh=a.mesh,
        masses=masses,
        truncated_mass_plus=trunc_plus,
        truncated_mass_minus=min(1.0, a.truncated_mass_minus + b.truncated_mass_minus),
        infinity_mass=min(1.0, a.infinity_mass + b.infinity_mass),
        compositions=a.compositions + b.compositions,
    )


def compose(pld: PrivacyLossDistribution, steps: int) -> PrivacyLossDistribution:
    """T-fold self-composition by exponentiation-by-squaring.

    ceil(log2 T) squarings plus one multiply per set bit of T, each an exact
    linear FFT convolution followed by a tail trim at cumulative mass 1e-18
    per side (upper trims are charged to truncated_mass_plus, lower trims are
    rounded up into the lowest kept bucket, so soundness is preserved and the
    extra truncation beyond T x per-step truncated mass is < 1e-16).
    """
    if not isinstance(steps, (int, np.integer)) or steps < 1:
        raise ValueError("steps must be a positive integer")
    pld.validate()
    if steps == 1:
        out = PrivacyLossDistribution(
            grid_origin=pld.grid_origin,
            mesh=pld.mesh,
            masses=pld.masses.copy(),
            truncated_mass_plus=pld.truncated_mass_plus,
            truncated_mass_minus=pld.truncated_mass_minus,
            infinity_mass=pld.infinity_mass,
            compositions=pld.compositions,
        )
        return out
    result: PrivacyLossDistribution | None = None
    square = pld
    remaining = int(steps)
    while remaining:
        if remaining & 1:
            result = square if result is None else convolve_plds(result, square)
        remaining >>= 1
        if remaining:
            square = convolve_plds(square, square)
    assert result is not None
    result.validate()
    return result


def delta_from_pld(pld: PrivacyLossDistribution, epsilon: float) -> float:
    """Upper bound on delta(epsilon) read off the discretised losses:

    sum_{l > eps} mass(l) (1 - e^{eps-l}) + infinity_mass + truncated_mass_plus
    (+ truncated_mass_minus, a conservative extra that is 0 by construction).
    """
    grid = pld.grid
    idx = int(np.searchsorted(grid, epsilon, side="right"))
    base = pld.infinity_mass + pld.truncated_mass_plus + pld.truncated_mass_minus
    if idx >= len(grid):
        return float(min(1.0, base))
    m = pld.masses[idx:]
    l = grid[idx:]
    keep = m > 0
    if not np.any(keep):
        return float(min(1.0, base))
    m, l = m[keep], l[keep]
    s = float(np.sum(m))
    log_weighted = float(logsumexp(np.log(m) - l))
    val = s - math.exp(min(epsilon + log_weighted, 700.0))
    return float(min(1.0, max(0.0, val) + base))


def epsilon_from_pld(pld: PrivacyLossDistribution, delta: float) -> PrivacySpend:
    """Smallest grid epsilon with delta(epsilon) <= delta (clamped to >= 0)."""
    if not 0 < delta < 1:
        raise ValueError("delta must be in (0, 1)")
    pld.validate()
    grid = pld.grid
    if delta_from_pld(pld, grid[-1]) > delta:
        raise UnattainablePrivacyError(
            f"delta={delta} unattainable with this grid (truncated/infinity mass "
            f"{pld.truncated_mass_plus + pld.infinity_mass:.3e})"
        )
    lo, hi = 0, len(grid) - 1  # invariant: predicate holds at hi
    if delta_from_pld(pld, grid[0]) <= delta:
        hi = 0
    while lo < hi:
        mid = (lo + hi) // 2
        if delta_from_pld(pld, grid[mid]) <= delta:
            hi = mid
        else:
            lo = mid + 1
    error_bound = pld.mesh + pld.truncated_mass_plus + pld.infinity_mass
    return PrivacySpend(
        epsilon=max(0.0, float(grid[hi])), delta=delta, error_bound=error_bound
    )


def _subsampled_rdp(order: int, q: float, rho: float) -> float:
    """Exact integer-order Renyi divergence of the subsampled Gaussian pair:

    (1/(a-1)) ln sum_j C(a,j) (1-q)^{a-j} q^j e^{j(j-1)/(2 rho^2)},

    evaluated in log space so large orders / small noise never overflow.
    """
    a = int(order)
    j = np.arange(a + 1, dtype=float)
    log_binom = gammaln(a + 1) - gammaln(j + 1) - gammaln(a - j + 1)
    if q >= 1.0:
        log_mix = np.where(a - j == 0, 0.0, -np.inf)
    else:
        log_mix = (a - j) * math.log1p(-q) + j * math.log(q)
    terms = log_binom + log_mix + j * (j - 1) / (2.0 * rho * rho)
    return float(logsumexp(terms)) / (a - 1)


def rdp_epsilon(
    rho: float,
    q: float,
    steps: int,
    delta: float,
    orders: tuple[int, ...] | None = None,
) -> PrivacySpend:
    """Renyi accountant: eps = min_a [T * RDP(a) + ln(1/delta)/(a-1)]."""
    cfg = PrivacyConfig(rho, q, steps, delta)  # validates inputs
    if orders is None:
        orders = tuple(range(2, 257))
    if any(o < 2 for o in orders):
        raise ValueError("all orders must be >= 2")
    best = math.inf
    for a in orders:
        rdp = _subsampled_rdp(a, q, rho)
        if not math.isfinite(rdp):
            continue
        eps = cfg.steps * rdp + math.log(1.0 / delta) / (a - 1)
        best = min(best, eps)
    return PrivacySpend(epsilon=float(max(0.0, best)), delta=delta, error_bound=0.0)


def _auto_mesh(rho: float, q: float, steps: int, delta: float) -> float:
    """Mesh policy: hold the pessimistic round-up degradation (<= steps*mesh)
    near 1% of the cheap RDP estimate, between floors 1e-7 and 1e-3."""
    rough = rdp_epsilon(rho, q, steps, delta).epsilon
    if not math.isfinite(rough) or rough <= 0:
        return DEFAULT_MESH
    return float(min(DEFAULT_MESH, max(1e-7, 0.01 * rough / steps)))


def account(
    rho: float,
    q: float,
    steps: int,
    delta: float,
    mesh: float | None = None,
    tail_mass: float = DEFAULT_TAIL_MASS,
) -> PrivacySpend:
    """PLD accountant for T steps of the subsampled Gaussian at rate q."""
    PrivacyConfig(rho, q, steps, delta)
    if mesh is None:
        mesh = _auto_mesh(rho, q, steps, delta)
    pld = subsampled_gaussian_pld(rho, q, mesh, tail_mass)
    return epsilon_from_pld(compose(pld, steps), delta)


def calibrate_noise(
    target_epsilon: float,
    q: float,
    steps: int,
    delta: float,
    rho_bounds: tuple[float, float] = (1e-2, 1e2),
    rel_tol: float = 1e-3,
) -> float:
    """Smallest noise multiplier whose PLD-accounted epsilon lands in
    [0.99 * target, target].

    A cheap Renyi bisection brackets the answer first (the RDP-calibrated
    noise always suffices for the tighter PLD accountant); the PLD accountant
    then walks the noise down geometrically and bisects into the window.  A
    noise value whose grid the PLD accountant refuses counts as failing the
    target, which only ever pushes the calibration to more noise (sound).
    """
    if not target_epsilon > 0:
        raise ValueError("target_epsilon must be > 0")
    lo_bound, hi_bound = rho_bounds

    def rdp_at(rho: float) -> float:
        return rdp_epsilon(rho, q, steps, delta).epsilon

    def pld_at(rho: float) -> float:
        try:
            return account(rho, q, steps, delta).epsilon
        except GridSizeError:
            return math.inf

    if rdp_at(hi_bound) > target_epsilon and pld_at(hi_bound) > target_epsilon:
        raise UnattainablePrivacyError(
            f"target epsilon {target_epsilon} unattainable for rho <= {hi_bound}"
        )
    r_lo, r_hi = lo_bound, hi_bound
    while r_hi / r_lo > 1.0 + rel_tol:
        mid = math.sqrt(r_lo * r_hi)
        if rdp_at(mid) <= target_epsilon:
            r_hi = mid
        else:
            r_lo = mid

    hi = r_hi
    eps_hi = pld_at(hi)
    while eps_hi > target_epsilon and hi < hi_bound:  # only if the grid refused
        hi = min(hi_bound, 1.5 * hi)
        eps_hi = pld_at(hi)
    if eps_hi > target_epsilon:
        raise UnattainablePrivacyError(
            f"target epsilon {target_epsilon} unattainable for rho <= {hi_bound}"
        )

    # Walk down while the (tighter) PLD accountant still certifies the target.
    lo = lo_bound
    step = 1.2
    while eps_hi < 0.99 * target_epsilon and hi > lo_bound * (1 + rel_tol):
        cand = max(lo_bound, hi / step)
        eps_cand = pld_at(cand)
        if eps_cand <= target_epsilon:
            hi, eps_hi = cand, eps_cand
        else:
            lo = cand
            break
    else:
        if eps_hi < 0.99 * target_epsilon:
            return float(lo_bound)  # even the smallest allowed noise meets it
        return float(hi)

    for _ in range(60):
        if 0.99 * target_epsilon <= eps_hi or hi / lo <= 1 + rel_tol:
            break
        mid = math.sqrt(lo * hi)
        eps_mid = pld_at(mid)
        if eps_mid <= target_epsilon:
            hi, eps_hi = mid, eps_mid
        else:
            lo = mid
    return float(hi)


def paper_convention_spends(
    sigma: float,
    clip_norm: float,
    batch_size: int,
    q: float,
    steps: int,
    delta: float,
) -> dict[str, dict]:
    """Account a published (sigma, C) pair under both noise conventions.

    "sum": sigma is already the sensitivity-1 multiplier on the clipped sum
    (rho = sigma).  "mean": sigma is the absolute noise std applied after
    averaging, so the equivalent multiplier is rho = sigma * B / C.  Falls
    back to the RDP accountant when the PLD grid refuses a pathological rho.
    """
    out: dict[str, dict] = {}
    for name, rho in (("sum", sigma), ("mean", sigma * batch_size / clip_norm)):
        try:
            spend = account(rho, q, steps, delta)
            kind = "prv"
        except (GridSizeError, UnattainablePrivacyError):
            spend = rdp_epsilon(rho, q, steps, delta)
            kind = "rdp"
        out[name] = {
            "noise_multiplier": rho,
            "epsilon": spend.epsilon,
            "delta": spend.delta,
            "accountant": kind,
        }
    return out

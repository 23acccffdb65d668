"""Ensemble diagnostics for multi-particle localization.

Monte-Carlo estimates of fractional resolvent moments, conditional
single-site boundedness checks, energy-averaged moments with their
eta-sensitivity companions, two-sided decay probes comparing moments against
eigenfunction correlators, a finite-volume boundary-flux monitor, and the
rescaling / region-scan layers on top of it.

Estimates carry (mean, stderr, count, seeds) and are reproducible: the same
seed set yields bit-identical results. Sup-type quantities (sup over z, sup
over energy intervals, sup over sub-regions) are evaluated on deterministic
finite grids and tile families, so reported values are grid suprema, lower
bounds of the mathematical sup; results flag this explicitly.

Fractional moments with s in (0, 1) have heavy-tailed integrands near the
spectrum (already infinite variance at s = 1/2 for on-axis z), so stderr
values are honest sample statistics, not tail-risk certificates; the
conditional check exists precisely to monitor those means directly.
"""

from __future__ import annotations

import dataclasses
import functools
import logging
import math
from dataclasses import dataclass

import numpy as np

from .configspace import (
    Box,
    ConfigIndex,
    Configuration,
    diameter,
    hausdorff_dist,
    occupation,
)
from .disorder import UNIFORM_HALF, DensitySpec, resample_at, sample
from .errors import BudgetError, SingularityError
from .operator import InteractionSpec, OperatorSpec, OperatorTemplate
from .spectral import (
    DENSE_DIAG_CAP,
    EnergyInterval,
    SpectralData,
    _green_column,
    correlator,
    spectral_data,
)

logger = logging.getLogger("mplab.diagnostics")

DEFAULT_ETA = 1e-6
DEFAULT_QUAD_POINTS = 16
B_MONITOR_QUAD_POINTS = 8
B_PAIR_BUDGET = 1_000_000

_NUDGE = 1e-10


def _check_s(s: float) -> float:
    if not 0.0 < s < 1.0:
        raise ValueError(f"fractional exponent must lie in (0, 1), got {s}")
    return float(s)


def seed_descriptor(seeds) -> str:
    seeds = [int(v) for v in seeds]
    if not seeds:
        return "none"
    lo, hi = min(seeds), max(seeds)
    if sorted(seeds) == list(range(lo, hi + 1)):
        return f"{lo}..{hi}"
    if len(seeds) <= 8:
        return ",".join(str(v) for v in seeds)
    return f"{len(seeds)} seeds in [{lo}, {hi}]"


@dataclass(frozen=True)
class Estimate:
    """Sample mean with its standard error and provenance."""

    mean: float
    stderr: float
    count: int
    seeds: str

    def __post_init__(self):
        if self.count < 2:
            raise ValueError("an ensemble estimate needs at least 2 samples")

    @classmethod
    def from_samples(cls, samples, seeds) -> "Estimate":
        arr = np.asarray(samples, dtype=float)
        if arr.size < 2:
            raise ValueError("an ensemble estimate needs at least 2 samples")
        return cls(
            mean=float(arr.mean()),
            stderr=float(arr.std(ddof=1) / math.sqrt(arr.size)),
            count=int(arr.size),
            seeds=seed_descriptor(seeds),
        )


# ----------------------------------------------------------- shared plumbing


@functools.lru_cache(maxsize=32)
def _template_for(spec: OperatorSpec) -> OperatorTemplate:
    # templates are immutable after assembly; equal specs can share one
    return OperatorTemplate(spec)


def ensemble_spectra(spec: OperatorSpec, seeds, density: DensitySpec):
    """Yield (seed, SpectralData) per realization, one template for all."""
    if spec.dim > DENSE_DIAG_CAP:
        raise BudgetError(
            f"ensemble eigendecomposition at dimension {spec.dim} exceeds "
            f"cap {DENSE_DIAG_CAP}; use the solve backend",
            count=spec.dim,
            limit=DENSE_DIAG_CAP,
        )
    template = _template_for(spec)
    for seed in seeds:
        real = sample(spec.box, density, int(seed))
        yield int(seed), spectral_data(template.hamiltonian(real))


def _pick_backend(backend: str, dim: int) -> str:
    if backend == "auto":
        return "eigen" if dim <= DENSE_DIAG_CAP else "solve"
    if backend not in ("eigen", "solve"):
        raise ValueError(f"unknown backend {backend!r}")
    return backend


def _abs_green_eig(S: SpectralData, ix: int, iy: int, zs: np.ndarray) -> np.ndarray:
    """|G(x, y; z)| on an array of z through the eigendecomposition."""
    w = S.vectors[ix, :] * S.vectors[iy, :]
    return np.abs(np.sum(w[None, :] / (S.energies[None, :] - zs[:, None]), axis=1))


# --------------------------------------------------------- fractional moment


def fractional_moment(
    seeds,
    spec: OperatorSpec,
    x: Configuration,
    y: Configuration,
    z: complex,
    s: float,
    density: DensitySpec = UNIFORM_HALF,
    backend: str = "auto",
) -> Estimate:
    """Monte-Carlo estimate of E |G(x, y; z)|^s over the disorder ensemble.

    A solve that lands exactly on an eigenvalue (possible for real z) is
    retried once at z + 1e-10i and the nudge is logged; the eigen backend
    applies the same nudge on an exact eigenvalue hit.
    """
    s = _check_s(s)
    z = complex(z)
    seeds = [int(v) for v in seeds]
    backend = _pick_backend(backend, spec.dim)
    template = OperatorTemplate(spec)
    ix, iy = spec.config_index.index_of(x), spec.config_index.index_of(y)
    samples = np.empty(len(seeds))
    for j, seed in enumerate(seeds):
        H = template.hamiltonian(sample(spec.box, density, seed))
        if backend == "eigen":
            S = spectral_data(H)
            if z.imag == 0.0 and np.min(np.abs(S.energies - z.real)) == 0.0:
                logger.warning("z = %s hit an eigenvalue; nudging by +1e-10i", z)
                g = _abs_green_eig(S, ix, iy, np.array([z + 1j * _NUDGE]))[0]
            else:
                g = _abs_green_eig(S, ix, iy, np.array([z]))[0]
        else:
            try:
                g = abs(_green_column(H.matrix, iy, z)[ix])
            except SingularityError:
                logger.warning(
                    "singular solve at z = %s (seed %d); retrying at +1e-10i",
                    z,
                    seed,
                )
                g = abs(_green_column(H.matrix, iy, z + 1j * _NUDGE)[ix])
        samples[j] = g**s
    return Estimate.from_samples(samples, seeds)


# --------------------------------------------------------- conditional check


@dataclass(frozen=True)
class WegnerReport:
    """Conditional fractional-moment scan over a z grid.

    estimates[k] is the conditional Monte-Carlo mean of |G(x, y; z_k)|^s
    with only the two marked sites resampled; worst is the estimate at the
    worst grid point and c_emp = lambda^s * worst.mean the empirical
    constant that the single-site bound predicts to be O(1) uniformly in z
    and lambda.
    """

    z_grid: tuple
    estimates: tuple
    worst: Estimate
    c_emp: float
    marked: tuple
    s: float


def wegner_samples(
    spec: OperatorSpec,
    base_seed: int,
    x: Configuration,
    y: Configuration,
    marked,
    z_grid,
    s: float,
    subseeds,
    density: DensitySpec = UNIFORM_HALF,
) -> np.ndarray:
    """Conditional sample rows |G(x, y; z)|^s for a block of subseeds.

    Row k depends only on subseeds[k] (frozen background plus one resample
    draw), so a parallel caller may split the subseed range into chunks and
    stack the chunks in order with results identical to one serial pass.
    """
    s = _check_s(s)
    zs = np.asarray([complex(z) for z in z_grid])
    subseeds = [int(k) for k in subseeds]
    template = OperatorTemplate(spec)
    base = sample(spec.box, density, int(base_seed))
    ix, iy = spec.config_index.index_of(x), spec.config_index.index_of(y)
    values = np.empty((len(subseeds), zs.size))
    for row, k in enumerate(subseeds):
        real = resample_at(base, marked, subseed=k)
        S = spectral_data(template.hamiltonian(real))
        safe = zs.copy()
        on_axis = safe.imag == 0.0
        if np.any(on_axis):
            hits = np.min(
                np.abs(S.energies[None, :] - safe[on_axis, None].real), axis=1
            )
            if np.any(hits == 0.0):
                logger.warning("z grid hit an eigenvalue; nudging by +1e-10i")
                bumped = safe[on_axis]
                bumped[hits == 0.0] += 1j * _NUDGE
                safe[on_axis] = bumped
        values[row, :] = _abs_green_eig(S, ix, iy, safe) ** s
    return values


def wegner_check(
    spec: OperatorSpec,
    base_seed: int,
    x: Configuration,
    y: Configuration,
    u1,
    u2,
    z_grid,
    s: float,
    subsamples: int,
    density: DensitySpec = UNIFORM_HALF,
) -> WegnerReport:
    """Resample only the sites u1, u2 on top of a frozen background field.

    Requires a particle of x at u1 and a particle of y at u2 (the bound's
    hypothesis) and lambda != 0. All other site values stay bit-identical
    across the subsample ensemble, so the estimates are genuine conditional
    expectations. The z grid may approach the real spectrum freely; exact
    eigenvalue hits are nudged as in fractional_moment.
    """
    s = _check_s(s)
    u1, u2 = tuple(u1), tuple(u2)
    if occupation(x, u1) < 1:
        raise ValueError(f"x has no particle at the marked site {u1}")
    if occupation(y, u2) < 1:
        raise ValueError(f"y has no particle at the marked site {u2}")
    if spec.lam == 0:
        raise ValueError("conditional bound needs lambda != 0")
    if subsamples < 2:
        raise ValueError(f"need at least 2 subsamples, got {subsamples}")
    if spec.dim > DENSE_DIAG_CAP:
        raise BudgetError(
            f"conditional check needs dense spectra; dimension {spec.dim} "
            f"exceeds {DENSE_DIAG_CAP}",
            count=spec.dim,
            limit=DENSE_DIAG_CAP,
        )
    marked = (u1,) if u1 == u2 else (u1, u2)
    zs = np.asarray([complex(z) for z in z_grid])
    values = wegner_samples(
        spec, base_seed, x, y, marked, zs, s, range(subsamples), density
    )
    return wegner_reduce(spec, zs, values, marked, s, range(subsamples))


def wegner_reduce(
    spec: OperatorSpec, zs, values: np.ndarray, marked, s: float, sub_ids
) -> WegnerReport:
    """Fold conditional sample rows (in subseed order) into the report."""
    zs = np.asarray([complex(z) for z in zs])
    estimates = tuple(
        Estimate.from_samples(values[:, j], sub_ids) for j in range(zs.size)
    )
    worst = max(estimates, key=lambda e: e.mean)
    return WegnerReport(
        z_grid=tuple(zs.tolist()),
        estimates=estimates,
        worst=worst,
        c_emp=float(abs(spec.lam) ** s * worst.mean),
        marked=tuple(marked),
        s=s,
    )


# ---------------------------------------------------- energy-averaged moment


@dataclass(frozen=True)
class AveragedMoment:
    """Interval-averaged fractional moment and its eta -> 2*eta companion."""

    estimate: Estimate
    estimate_2eta: Estimate
    interval: EnergyInterval
    eta: float
    quad_points: int

    @property
    def eta_shift(self) -> float:
        """Relative change of the mean when eta doubles."""
        scale = max(abs(self.estimate.mean), 1e-300)
        return abs(self.estimate.mean - self.estimate_2eta.mean) / scale


def _interval_nodes(interval: EnergyInterval, quad_points: int) -> np.ndarray:
    if not np.isfinite(interval.length):
        raise ValueError("energy averaging needs a finite interval")
    if interval.length < 1.0 - 1e-12:
        raise ValueError(
            f"averaging interval must have length >= 1, got {interval.length}"
        )
    step = interval.length / quad_points
    return interval.lo + step * (np.arange(quad_points) + 0.5)


def energy_averaged_moment(
    seeds,
    spec: OperatorSpec,
    x: Configuration,
    y: Configuration,
    interval: EnergyInterval,
    s: float,
    eta: float = DEFAULT_ETA,
    quad_points: int = DEFAULT_QUAD_POINTS,
    density: DensitySpec = UNIFORM_HALF,
) -> AveragedMoment:
    """(1/|I|) integral over I of E |G(x, y; E + i eta)|^s, midpoint rule.

    Needs |I| >= 1. The companion estimate at 2*eta shares every disorder
    sample, so the pair isolates regularization sensitivity from
    Monte-Carlo noise.
    """
    s = _check_s(s)
    if eta <= 0:
        raise ValueError(f"eta must be positive, got {eta}")
    if quad_points < 1:
        raise ValueError(f"need at least one quadrature node, got {quad_points}")
    seeds = [int(v) for v in seeds]
    nodes = _interval_nodes(interval, quad_points)
    ix, iy = spec.config_index.index_of(x), spec.config_index.index_of(y)
    vals = np.empty(len(seeds))
    vals2 = np.empty(len(seeds))
    for j, (seed, S) in enumerate(ensemble_spectra(spec, seeds, density)):
        vals[j] = np.mean(_abs_green_eig(S, ix, iy, nodes + 1j * eta) ** s)
        vals2[j] = np.mean(_abs_green_eig(S, ix, iy, nodes + 2j * eta) ** s)
    return AveragedMoment(
        estimate=Estimate.from_samples(vals, seeds),
        estimate_2eta=Estimate.from_samples(vals2, seeds),
        interval=interval,
        eta=eta,
        quad_points=quad_points,
    )


# ---------------------------------------------------------- equivalence probe


@dataclass(frozen=True)
class ProbeRow:
    """One configuration pair: distance, averaged moment, mean correlator."""

    x: Configuration
    y: Configuration
    dist: int
    moment: Estimate
    q: Estimate


def default_probe_interval(
    spec: OperatorSpec, density: DensitySpec = UNIFORM_HALF
) -> EnergyInterval:
    """Unit interval centered in the operator's spectral enclosure."""
    lo, hi = OperatorTemplate(spec).gershgorin_interval(density)
    return EnergyInterval.unit((lo + hi) / 2.0)


def probe_samples(
    spec: OperatorSpec,
    seed: int,
    pairs,
    interval: EnergyInterval,
    s: float = 0.5,
    eta: float = DEFAULT_ETA,
    quad_points: int = DEFAULT_QUAD_POINTS,
    density: DensitySpec = UNIFORM_HALF,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-pair (moment, correlator) samples for a single realization.

    One eigendecomposition serves every pair and both columns. The output
    depends only on this seed, so averaging these rows over a seed list in
    order reproduces equivalence_probe exactly regardless of how the list
    was partitioned among workers.
    """
    s = _check_s(s)
    pairs = [(px, py) for px, py in pairs]
    nodes = _interval_nodes(interval, quad_points)
    index = spec.config_index
    ranks = [(index.index_of(px), index.index_of(py)) for px, py in pairs]
    full = EnergyInterval.full_line()
    moments = np.empty(len(pairs))
    qvals = np.empty(len(pairs))
    _, S = next(ensemble_spectra(spec, [int(seed)], density))
    for p, ((px, py), (ix, iy)) in enumerate(zip(pairs, ranks)):
        moments[p] = np.mean(_abs_green_eig(S, ix, iy, nodes + 1j * eta) ** s)
        qvals[p] = correlator(S, px, py, full)
    return moments, qvals


def equivalence_probe(
    seeds,
    spec: OperatorSpec,
    pairs,
    interval: EnergyInterval = None,
    s: float = 0.5,
    eta: float = DEFAULT_ETA,
    quad_points: int = DEFAULT_QUAD_POINTS,
    density: DensitySpec = UNIFORM_HALF,
) -> tuple[ProbeRow, ...]:
    """Side-by-side decay data: averaged moments vs mean correlators.

    The moment column averages over `interval` (default: the unit interval
    centered in the uniform spectral enclosure); the correlator column uses
    the whole line, the monotone envelope of the interval correlators.
    Distances are Hausdorff in spec.norm. One eigendecomposition per
    realization serves every pair and both columns.
    """
    s = _check_s(s)
    seeds = [int(v) for v in seeds]
    pairs = [(px, py) for px, py in pairs]
    if interval is None:
        interval = default_probe_interval(spec, density)
    moments = np.empty((len(seeds), len(pairs)))
    qvals = np.empty((len(seeds), len(pairs)))
    for j, seed in enumerate(seeds):
        moments[j, :], qvals[j, :] = probe_samples(
            spec, seed, pairs, interval, s, eta, quad_points, density
        )
    rows = []
    for p, (px, py) in enumerate(pairs):
        rows.append(
            ProbeRow(
                x=px,
                y=py,
                dist=hausdorff_dist(px, py, spec.norm),
                moment=Estimate.from_samples(moments[:, p], seeds),
                q=Estimate.from_samples(qvals[:, p], seeds),
            )
        )
    return tuple(rows)


# ------------------------------------------------------------------ decay fit


@dataclass(frozen=True)
class DecayFit:
    """Least-squares exponential fit v ~ A exp(-r / xi) on log values.

    `pairs` holds the points that entered the fit (positive values only);
    xi is +inf with verdict "no_decay" when the fitted slope is nonnegative.
    """

    xi: float
    A: float
    r2: float
    pairs: tuple
    dropped_zeros: int
    verdict: str


def decay_fit(pairs) -> DecayFit:
    """Fit (distance, value) pairs; zero values are dropped, negatives rejected."""
    pts = [(float(r), float(v)) for r, v in pairs]
    if any(v < 0 for _, v in pts):
        raise ValueError("values must be nonnegative")
    kept = [(r, v) for r, v in pts if v > 0]
    dropped = len(pts) - len(kept)
    if len(kept) < 3:
        raise ValueError(
            f"need at least 3 positive values for a decay fit, have {len(kept)}"
        )
    r = np.array([p[0] for p in kept])
    v = np.array([p[1] for p in kept])
    if np.ptp(r) == 0:
        raise ValueError("distances are all equal; nothing to fit")
    logv = np.log(v)
    slope, intercept = np.polyfit(r, logv, 1)
    resid = logv - (slope * r + intercept)
    ss_tot = float(np.sum((logv - logv.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss_tot if ss_tot > 0 else 1.0
    return DecayFit(
        xi=float(-1.0 / slope) if slope < 0 else float("inf"),
        A=float(np.exp(intercept)),
        r2=r2,
        pairs=tuple(kept),
        dropped_zeros=dropped,
        verdict="decay" if slope < 0 else "no_decay",
    )


# ------------------------------------------------------------------ B monitor


@dataclass(frozen=True)
class BMonitorResult:
    """Boundary-flux monitor value for one box size.

    value is the maximum over the evaluated region family (the full box plus
    any sampled sub-boxes) of the worst-tile ensemble mean. A finite tile
    grid and a sampled region family both truncate suprema, so value is a
    lower bound of the mathematical quantity, as note spells out.
    """

    value: float
    full: Estimate
    full_interval: EnergyInterval
    tiles: tuple
    subbox_values: tuple
    pair_count: int
    boundary_count: int
    note: str = (
        "grid supremum: max over finite tile family and sampled regions; "
        "under-estimates the true sup"
    )


def _clustered_ranks(
    index: ConfigIndex, anchor, max_diam: float, norm: str
) -> np.ndarray:
    anchor = tuple(anchor)
    ranks = [
        k
        for k, cfg in enumerate(index.enumerate())
        if anchor in cfg.sites and diameter(cfg, norm) < max_diam
    ]
    return np.asarray(ranks, dtype=int)


@dataclass(frozen=True)
class RegionTask:
    """One region of the monitor's family with its admissible pair geometry.

    Ranks index configurations of the operator restricted to `box`; anchors
    group the boundary-cluster ranks per boundary site. The boundary
    prefactor always refers to the full box, no matter the region.
    """

    box: Box
    x_ranks: tuple
    anchors: tuple
    pair_count: int


@dataclass(frozen=True)
class MonitorPlan:
    """Deterministic evaluation plan for the boundary-flux monitor.

    regions[0] is the full box; any further entries are the sampled
    sub-boxes, drawn at plan time so every worker sees the same family.
    All fields are plain data, safe to ship to worker processes.
    """

    spec: OperatorSpec
    regions: tuple
    tile_edges: tuple
    s: float
    eta: float
    quad_points: int
    density: DensitySpec
    boundary_count: int


def _region_task(
    spec: OperatorSpec,
    region: Box,
    boundary_sites,
    half_width: float,
) -> RegionTask | None:
    """Pair geometry on one region, or None without admissible pairs."""
    rspec = dataclasses.replace(spec, box=region)
    index = rspec.config_index
    x_ranks = _clustered_ranks(index, (0,) * region.d, half_width, spec.norm)
    anchors = [
        _clustered_ranks(index, y, half_width, spec.norm)
        for y in boundary_sites
        if region.contains(y)
    ]
    anchors = [rr for rr in anchors if rr.size]
    if x_ranks.size == 0 or not anchors:
        return None
    pair_count = int(x_ranks.size) * sum(int(rr.size) for rr in anchors)
    if pair_count > B_PAIR_BUDGET:
        raise BudgetError(
            f"boundary pair count {pair_count} exceeds budget {B_PAIR_BUDGET}",
            count=pair_count,
            limit=B_PAIR_BUDGET,
        )
    return RegionTask(
        box=region,
        x_ranks=tuple(int(k) for k in x_ranks),
        anchors=tuple(tuple(int(k) for k in rr) for rr in anchors),
        pair_count=pair_count,
    )


def monitor_plan(
    spec: OperatorSpec,
    seeds,
    s: float = 0.5,
    omega_samples: int = 0,
    eta: float = None,
    quad_points: int = B_MONITOR_QUAD_POINTS,
    density: DensitySpec = UNIFORM_HALF,
) -> MonitorPlan:
    """Validate the monitor call and freeze its region family and grids."""
    s = _check_s(s)
    if eta is None:
        eta = 0.5 / quad_points
    box = spec.box
    if box.side % 4 != 0:
        raise ValueError(
            f"monitor box side must be a multiple of 4, got {box.side}; "
            "the box spans radius L = side/2 with cluster diameter < L/2"
        )
    if box != Box.centered(box.d, box.side):
        raise ValueError("monitor expects the centered box (origin at -side//2)")
    seeds = [int(v) for v in seeds]
    if len(seeds) < 2:
        raise ValueError("monitor needs an ensemble of at least 2 seeds")
    half_width = box.side / 4.0
    boundary = box.boundary_sites()
    lo, hi = OperatorTemplate(spec).gershgorin_interval(density)
    tile_edges = np.arange(math.floor(lo - 1.0), math.ceil(hi + 1.0) + 1, 1.0)

    full_task = _region_task(spec, box, boundary, half_width)
    if full_task is None:
        raise ValueError("no admissible boundary pairs on the full box")
    regions = [full_task]
    if omega_samples:
        rng = np.random.default_rng([int(seeds[0]), 0x0B, int(omega_samples)])
        for _ in range(omega_samples):
            side = int(rng.integers(box.side // 2 + 1, box.side))
            lo_org = max(-(box.side // 2), 1 - side)
            hi_org = min(0, box.side // 2 - side)
            org = int(rng.integers(lo_org, hi_org + 1))
            region = Box(d=box.d, side=side, origin=(org,) * box.d)
            task = _region_task(spec, region, boundary, half_width)
            if task is not None:
                regions.append(task)
    return MonitorPlan(
        spec=spec,
        regions=tuple(regions),
        tile_edges=tuple(float(e) for e in tile_edges),
        s=s,
        eta=eta,
        quad_points=quad_points,
        density=density,
        boundary_count=len(boundary),
    )


def monitor_seed_rows(plan: MonitorPlan, seed: int) -> tuple:
    """Tile-resolved boundary sums of one realization, one row per region.

    Rows depend only on this seed and the plan, so an ensemble may be split
    across workers and the rows reassembled in seed order with results
    identical to a serial sweep.
    """
    tile_edges = np.asarray(plan.tile_edges)
    n_tiles = tile_edges.size - 1
    # tiles have width 1
    offsets = (np.arange(plan.quad_points) + 0.5) / plan.quad_points
    prefactor = float(plan.boundary_count)
    rows = []
    for task in plan.regions:
        rspec = dataclasses.replace(plan.spec, box=task.box)
        x_ranks = np.asarray(task.x_ranks, dtype=int)
        row = np.zeros(n_tiles)
        _, S = next(ensemble_spectra(rspec, [int(seed)], plan.density))
        Wx = S.vectors[x_ranks, :]
        for y_ranks in task.anchors:
            WyT = S.vectors[np.asarray(y_ranks, dtype=int), :].T
            for t in range(n_tiles):
                nodes = tile_edges[t] + offsets
                D = 1.0 / (S.energies[None, :] - (nodes[:, None] + 1j * plan.eta))
                G = (Wx[None, :, :] * D[:, None, :]) @ WyT
                row[t] += (
                    prefactor * float(np.sum(np.abs(G) ** plan.s)) / plan.quad_points
                )
        rows.append(row)
    return tuple(rows)


def monitor_reduce(plan: MonitorPlan, seeds, rows_by_seed) -> BMonitorResult:
    """Fold per-seed rows (in seed order) into the monitor result."""
    seeds = [int(v) for v in seeds]
    tile_edges = np.asarray(plan.tile_edges)
    samples = np.stack([rows[0] for rows in rows_by_seed])
    means = samples.mean(axis=0)
    t_best = int(np.argmax(means))
    full_est = Estimate.from_samples(samples[:, t_best], seeds)
    tiles = tuple(
        (
            float(tile_edges[t]),
            float(samples[:, t].mean()),
            float(samples[:, t].std(ddof=1) / math.sqrt(len(seeds))),
        )
        for t in range(means.size)
    )
    sub_values = []
    for r in range(1, len(plan.regions)):
        sub_samples = np.stack([rows[r] for rows in rows_by_seed])
        sub_values.append(float(sub_samples.mean(axis=0).max()))
    return BMonitorResult(
        value=float(max([full_est.mean, *sub_values])),
        full=full_est,
        full_interval=EnergyInterval(
            float(tile_edges[t_best]), float(tile_edges[t_best + 1])
        ),
        tiles=tiles,
        subbox_values=tuple(sub_values),
        pair_count=plan.regions[0].pair_count,
        boundary_count=plan.boundary_count,
    )


def b_monitor(
    spec: OperatorSpec,
    seeds,
    s: float = 0.5,
    omega_samples: int = 0,
    eta: float = None,
    quad_points: int = B_MONITOR_QUAD_POINTS,
    density: DensitySpec = UNIFORM_HALF,
) -> BMonitorResult:
    """Boundary-flux localization monitor; the size parameter is side/2.

    Sums interval-averaged |G|^s over pairs (clustered configuration at the
    box center, clustered configuration at a boundary site), weighted by the
    boundary size and maximized over unit energy tiles covering the uniform
    spectral enclosure. Clustered means diameter under a quarter of the box
    side with at least one particle on the anchor: for a monitor at length
    scale L the box spans radius L around the center and clusters have
    diameter under L/2, less than half the center-to-boundary separation.
    That keeps the two clusters of every pair spatially disjoint, which is
    what makes the quantity a transport monitor: every term needs tunneling
    across the gap, and nothing sits on a shared diagonal. `omega_samples`
    extra sub-boxes probe the sup over regions; their values are reported
    separately and folded into `value`.

    Requires the centered box with side a multiple of 4 (even length
    parameter), so the thresholds stay aligned across a doubling family.

    eta defaults to half the quadrature node spacing, 1/(2*quad_points).
    The tile average approximates an integral of |G|^s whose singularities
    at eigenvalues are integrable, but a midpoint sample taken much closer
    to an eigenvalue than the node spacing overshoots the integral by
    (spacing/eta)^s; matching eta to the resolution keeps every sample the
    size of its tile contribution and the ensemble variance finite. Pass an
    explicit eta to override.
    """
    plan = monitor_plan(spec, seeds, s, omega_samples, eta, quad_points, density)
    seeds = [int(v) for v in seeds]
    rows_by_seed = [monitor_seed_rows(plan, seed) for seed in seeds]
    return monitor_reduce(plan, seeds, rows_by_seed)


# ------------------------------------------------------------------ rescaling


@dataclass(frozen=True)
class RescalingReport:
    """Doubling inequality and its contraction corollary for one B pair.

    satisfied checks b_large <= (a/|lambda|^s) b_small^2 + A L^(2p) e^(-2 nu L)
    at the supplied constants. The corollary: condition_value =
    (a/|lambda|^s) b_small under 1/2 predicts contraction; `consistent`
    records whether the observation matches whenever the prediction fires.
    """

    satisfied: bool
    inequality_margin: float
    condition_value: float
    margin: float
    contraction_predicted: bool
    contraction_observed: bool
    consistent: bool
    b_small: float
    b_large: float


def rescaling_check(
    b_small,
    b_large,
    lam: float,
    s: float,
    L: int,
    a: float = 1.0,
    A: float = 0.0,
    nu: float = 0.0,
    p: float = 0.0,
) -> RescalingReport:
    """Check the doubling inequality between monitor values at L and 2L.

    Accepts plain values or BMonitorResult. lambda = 0 makes the coupling
    factor infinite: nothing is predicted and only the observed comparison
    is reported.
    """
    s = _check_s(s)
    if L < 1:
        raise ValueError(f"box side must be positive, got {L}")
    bs = float(getattr(b_small, "value", b_small))
    bl = float(getattr(b_large, "value", b_large))
    if bs < 0 or bl < 0:
        raise ValueError("monitor values are nonnegative by construction")
    factor = a / abs(lam) ** s if lam != 0 else math.inf
    tail = A * float(L) ** (2.0 * p) * math.exp(-2.0 * nu * L)
    rhs = tail if bs == 0.0 else factor * bs**2 + tail
    condition = factor * bs if bs > 0 else (math.inf if lam == 0 else 0.0)
    # strict contraction b_large < b_small is vacuous at b_small = 0
    predicted = condition < 0.5 and bs > 0
    observed = bl < bs
    return RescalingReport(
        satisfied=bool(bl <= rhs),
        inequality_margin=float(rhs - bl),
        condition_value=float(condition),
        margin=float(0.5 - condition),
        contraction_predicted=predicted,
        contraction_observed=observed,
        consistent=(not predicted) or observed,
        b_small=bs,
        b_large=bl,
    )


# ---------------------------------------------------------------- region scan


@dataclass(frozen=True)
class ScanProtocol:
    """Knobs shared by every grid point of a region scan.

    L is the monitor length parameter: each point compares monitors on the
    centered boxes of sides 2L and 4L and fits correlator decay on the
    larger one.
    """

    d: int = 1
    L: int = 8
    n: int = 2
    sector: str = "distinguishable"
    count: int = 40
    base_seed: int = 0
    s: float = 0.5
    eta: float = DEFAULT_ETA  # probe regularization
    monitor_eta: float = None  # monitor tiles default to resolution-matched
    quad_points: int = B_MONITOR_QUAD_POINTS
    omega_samples: int = 0
    norm: str = "l1"
    density: DensitySpec = UNIFORM_HALF
    interaction_range: int = 1
    r2_threshold: float = 0.9
    xi_max: float = None  # defaults to L


@dataclass(frozen=True)
class RegionVerdict:
    lam: float
    alpha: float
    b_small: BMonitorResult
    b_large: BMonitorResult
    fit: DecayFit
    verdict: str


@dataclass(frozen=True)
class RegionScanResult:
    points: tuple
    protocol: ScanProtocol


def _scan_spec(lam: float, alpha: float, L: int, proto: ScanProtocol) -> OperatorSpec:
    inter = (
        InteractionSpec.pair_nn(alpha, range=proto.interaction_range)
        if alpha
        else InteractionSpec.none()
    )
    return OperatorSpec(
        box=Box.centered(proto.d, L),
        n=proto.n,
        sector=proto.sector,
        lam=lam,
        interaction=inter,
        norm=proto.norm,
    )


def probe_pairs(spec: OperatorSpec, max_points: int = 6):
    """Corner-anchored block pairs at even separations along the first axis.

    Blocks of n consecutive sites are valid in every sector; shifting a
    block by r along one axis moves its Hausdorff distance to exactly r in
    both supported norms.
    """
    box, n = spec.box, spec.n
    corner = box.origin

    def block(start):
        return Configuration(
            sites=tuple((start[0] + k,) + tuple(start[1:]) for k in range(n)),
            sector=spec.sector,
        )

    x = block(corner)
    out = []
    r = 2
    while r + n - 1 < box.side and len(out) < max_points:
        out.append((x, block((corner[0] + r,) + tuple(corner[1:]))))
        r += 2
    if len(out) < 3:
        raise ValueError(
            f"box side {box.side} too small for a {n}-particle decay probe"
        )
    return out


def scan_point(lam: float, alpha: float, proto: ScanProtocol) -> RegionVerdict:
    """Monitor doubling plus a correlator decay fit at one (lambda, alpha).

    Verdict "inconclusive" when the monitor difference is dominated by the
    combined standard errors; "contracting" requires both the observed
    monitor drop and a convincing exponential correlator fit (r2 and xi
    thresholds from the protocol); anything else is "non-contracting".
    """
    seeds = range(proto.base_seed, proto.base_seed + proto.count)
    common = dict(
        s=proto.s,
        omega_samples=proto.omega_samples,
        eta=proto.monitor_eta,
        quad_points=proto.quad_points,
        density=proto.density,
    )
    spec_small = _scan_spec(lam, alpha, 2 * proto.L, proto)
    spec_large = _scan_spec(lam, alpha, 4 * proto.L, proto)
    b_small = b_monitor(spec_small, seeds, **common)
    b_large = b_monitor(spec_large, seeds, **common)
    rows = equivalence_probe(
        seeds,
        spec_large,
        probe_pairs(spec_large),
        s=proto.s,
        eta=proto.eta,
        density=proto.density,
    )
    fit = decay_fit([(row.dist, row.q.mean) for row in rows])
    xi_max = proto.xi_max if proto.xi_max is not None else float(proto.L)
    gap = b_small.value - b_large.value
    noise = math.hypot(b_small.full.stderr, b_large.full.stderr)
    if abs(gap) <= noise:
        verdict = "inconclusive"
    elif gap > 0 and fit.r2 >= proto.r2_threshold and fit.xi <= xi_max:
        verdict = "contracting"
    else:
        verdict = "non-contracting"
    return RegionVerdict(
        lam=float(lam),
        alpha=float(alpha),
        b_small=b_small,
        b_large=b_large,
        fit=fit,
        verdict=verdict,
    )


def region_scan(grid, proto: ScanProtocol = ScanProtocol()) -> RegionScanResult:
    """Scan an iterable of (lambda, alpha) pairs with a shared protocol."""
    points = tuple(scan_point(lam, alpha, proto) for lam, alpha in grid)
    return RegionScanResult(points=points, protocol=proto)

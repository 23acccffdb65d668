"""Site disorder: single-site densities and per-site random fields on boxes.

Every site of a box gets its own counter-based substream (Philox keyed by
(ensemble seed, site key)), so realizations are reproducible site by site,
independent across sites, and stable under box enlargement: sampling a
sub-box reproduces exactly the values the parent box assigns to the shared
sites. Conditional resampling redraws marked sites from fresh counter tags
while leaving every other value bit-identical, which is what the
conditional-expectation arguments in the diagnostics need.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import stats

from .configspace import Box, Site

# Exact injective packing of coordinates into the 64-bit Philox key lane is
# available for d <= 4 (64//d bits per signed coordinate); higher dimensions
# fall back to a deterministic polynomial mix (collision odds ~ V^2 / 2^64).
_MIX_MULT = np.uint64(0x9E3779B97F4A7C15)
_MASK64 = 0xFFFFFFFFFFFFFFFF


def site_key(site: Site) -> int:
    """Deterministic 64-bit stream key for a lattice site (absolute coords)."""
    d = len(site)
    if d <= 4:
        bits = 64 // d
        offset = 1 << (bits - 1)
        key = 0
        for c in site:
            if not -offset <= c < offset:
                raise ValueError(
                    f"coordinate {c} exceeds the +-{offset} packing range for d={d}"
                )
            key = (key << bits) | (c + offset)
        return key & _MASK64
    key = np.uint64(d)
    for c in site:
        key = key * _MIX_MULT + np.uint64((c + (1 << 31)) & _MASK64)
    return int(key)


def _u01(seed: int, key: int, tag: int) -> float:
    bg = np.random.Philox(
        key=np.array([seed & _MASK64, key & _MASK64], dtype=np.uint64),
        counter=np.array([tag & _MASK64, 0, 0, 0], dtype=np.uint64),
    )
    return np.random.Generator(bg).random()


@dataclass(frozen=True)
class DensitySpec:
    """Bounded compactly supported single-site density.

    Kinds: "uniform" on [a, b]; "truncated_gaussian" with scale sigma cut at
    +-cutoff; "piecewise" constant on a break table. Construction validates
    that the density integrates to 1 within 1e-10.
    """

    kind: str
    params: tuple

    def __post_init__(self):
        object.__setattr__(self, "params", tuple(self.params))
        if self.kind == "uniform":
            a, b = self.params
            if not a < b:
                raise ValueError(f"uniform needs a < b, got ({a}, {b})")
        elif self.kind == "truncated_gaussian":
            sigma, cutoff = self.params
            if sigma <= 0 or cutoff <= 0:
                raise ValueError(
                    f"truncated gaussian needs sigma, cutoff > 0, got {self.params}"
                )
        elif self.kind == "piecewise":
            breaks, dens = self.params
            breaks = tuple(float(x) for x in breaks)
            dens = tuple(float(x) for x in dens)
            object.__setattr__(self, "params", (breaks, dens))
            if len(breaks) != len(dens) + 1:
                raise ValueError("piecewise needs len(breaks) == len(densities) + 1")
            if any(x >= y for x, y in zip(breaks, breaks[1:])):
                raise ValueError(f"piecewise breaks must increase: {breaks}")
            if any(v < 0 for v in dens):
                raise ValueError(f"piecewise densities must be nonnegative: {dens}")
        else:
            raise ValueError(f"unknown density kind {self.kind!r}")
        total = self._total_mass()
        if abs(total - 1.0) > 1e-10:
            raise ValueError(f"density integrates to {total!r}, expected 1 +- 1e-10")

    def _total_mass(self) -> float:
        if self.kind == "uniform":
            return 1.0
        if self.kind == "truncated_gaussian":
            return float(self._frozen().cdf(self.support[1]))
        breaks, dens = self.params
        return sum(v * (hi - lo) for v, lo, hi in zip(dens, breaks, breaks[1:]))

    # ---------------------------------------------------------- factories

    @classmethod
    def uniform(cls, a: float = -0.5, b: float = 0.5) -> "DensitySpec":
        return cls(kind="uniform", params=(float(a), float(b)))

    @classmethod
    def truncated_gaussian(cls, sigma: float, cutoff: float) -> "DensitySpec":
        return cls(kind="truncated_gaussian", params=(float(sigma), float(cutoff)))

    @classmethod
    def piecewise(cls, breaks, densities) -> "DensitySpec":
        breaks = tuple(float(x) for x in breaks)
        dens = tuple(float(x) for x in densities)
        mass = sum(
            v * (hi - lo) for v, lo, hi in zip(dens, breaks, breaks[1:])
        )
        if mass <= 0:
            raise ValueError("piecewise table carries no mass")
        dens = tuple(v / mass for v in dens)  # normalize exactly
        return cls(kind="piecewise", params=(breaks, dens))

    # -------------------------------------------------------- evaluation

    @property
    def support(self) -> tuple[float, float]:
        if self.kind == "uniform":
            return self.params
        if self.kind == "truncated_gaussian":
            sigma, cutoff = self.params
            return (-cutoff, cutoff)
        breaks, _ = self.params
        return (breaks[0], breaks[-1])

    @property
    def bound(self) -> float:
        """sup of the density (enters Wegner-type constants)."""
        if self.kind == "uniform":
            a, b = self.params
            return 1.0 / (b - a)
        if self.kind == "truncated_gaussian":
            return float(self._frozen().pdf(0.0))
        _, dens = self.params
        return max(dens)

    def _frozen(self):
        sigma, cutoff = self.params
        return stats.truncnorm(-cutoff / sigma, cutoff / sigma, loc=0.0, scale=sigma)

    @staticmethod
    def _as_result(x, scalar: bool):
        return float(x) if scalar else np.asarray(x, dtype=float)

    def pdf(self, v):
        """Density at v; accepts scalars or arrays."""
        scalar = np.isscalar(v) or np.ndim(v) == 0
        v = np.asarray(v, dtype=float)
        if self.kind == "uniform":
            a, b = self.params
            out = np.where((v >= a) & (v <= b), 1.0 / (b - a), 0.0)
        elif self.kind == "truncated_gaussian":
            out = self._frozen().pdf(v)
        else:
            breaks, dens = self.params
            table = np.asarray(dens + (0.0,))
            idx = np.clip(np.searchsorted(breaks, v, side="right") - 1, 0, len(dens))
            out = np.where((v >= breaks[0]) & (v <= breaks[-1]), table[idx], 0.0)
            # right edge of the last bin still carries its density
            out = np.where(v == breaks[-1], dens[-1], out)
        return self._as_result(out, scalar)

    def cdf(self, v):
        """Distribution function at v; accepts scalars or arrays."""
        scalar = np.isscalar(v) or np.ndim(v) == 0
        v = np.asarray(v, dtype=float)
        if self.kind == "uniform":
            a, b = self.params
            out = np.clip((v - a) / (b - a), 0.0, 1.0)
        elif self.kind == "truncated_gaussian":
            out = self._frozen().cdf(v)
        else:
            breaks, dens = self.params
            lo = np.asarray(breaks[:-1])
            hi = np.asarray(breaks[1:])
            rho = np.asarray(dens)
            vv = v[..., None]
            out = np.sum(rho * np.clip(vv - lo, 0.0, hi - lo), axis=-1)
            out = np.clip(out, 0.0, 1.0)
        return self._as_result(out, scalar)

    def ppf(self, u):
        """Quantile function on [0, 1]; accepts scalars or arrays."""
        scalar = np.isscalar(u) or np.ndim(u) == 0
        u = np.asarray(u, dtype=float)
        if np.any((u < 0.0) | (u > 1.0)):
            raise ValueError("quantile argument outside [0, 1]")
        if self.kind == "uniform":
            a, b = self.params
            out = a + u * (b - a)
        elif self.kind == "truncated_gaussian":
            out = self._frozen().ppf(u)
        else:
            breaks, dens = self.params
            lo = np.asarray(breaks[:-1])
            rho = np.asarray(dens)
            mass = rho * (np.asarray(breaks[1:]) - lo)
            cum = np.concatenate(([0.0], np.cumsum(mass)))
            cum[-1] = 1.0  # absorb rounding in the last bin
            # leftmost bin whose cumulative mass reaches u, skipping zero bins
            idx = np.clip(np.searchsorted(cum, u, side="left") - 1, 0, len(rho) - 1)
            idx = np.where(u <= 0.0, np.argmax(rho > 0), idx)
            safe_rho = np.where(rho[idx] > 0, rho[idx], 1.0)
            out = lo[idx] + (u - cum[idx]) / safe_rho
        return self._as_result(out, scalar)

    # ------------------------------------------------------ serialization

    def to_dict(self) -> dict:
        if self.kind == "piecewise":
            breaks, dens = self.params
            return {"kind": self.kind, "breaks": list(breaks), "densities": list(dens)}
        return {"kind": self.kind, "params": list(self.params)}

    @classmethod
    def from_dict(cls, obj: dict) -> "DensitySpec":
        kind = obj["kind"]
        if kind == "piecewise":
            return cls(kind=kind, params=(tuple(obj["breaks"]), tuple(obj["densities"])))
        return cls(kind=kind, params=tuple(obj["params"]))


UNIFORM_HALF = DensitySpec.uniform(-0.5, 0.5)


@dataclass(frozen=True, eq=False)
class DisorderRealization:
    """One draw of the site field on a box, values indexed by site rank."""

    box: Box
    density: DensitySpec
    seed: int
    values: np.ndarray
    # chain of (marked site ranks, subseed) applied on top of the base draw
    history: tuple = ()

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def value_at(self, site: Site) -> float:
        return float(self.values[self.box.encode(site)])


def sample(box: Box, density: DensitySpec, seed: int) -> DisorderRealization:
    """Draw the base field: one independent substream per site, tag 0."""
    if seed < 0:
        raise ValueError(f"seed must be nonnegative, got {seed}")
    vals = np.empty(box.volume)
    for k in range(box.volume):
        vals[k] = density.ppf(_u01(seed, site_key(box.decode(k)), tag=0))
    return DisorderRealization(box=box, density=density, seed=seed, values=vals)


def resample_at(
    real: DisorderRealization, sites, subseed: int
) -> DisorderRealization:
    """Redraw the marked sites from substream tag subseed+1; rest untouched.

    Tag 0 is the base draw, so subseed 0 already yields fresh values.
    Different subseeds give independent redraws of the same sites.
    """
    if subseed < 0:
        raise ValueError(f"subseed must be nonnegative, got {subseed}")
    marked = tuple(tuple(s) for s in sites)
    if not marked:
        raise ValueError("no sites marked for resampling")
    vals = np.array(real.values)
    ranks = []
    for s in marked:
        k = real.box.encode(s)
        ranks.append(k)
        vals[k] = real.density.ppf(_u01(real.seed, site_key(s), tag=subseed + 1))
    return DisorderRealization(
        box=real.box,
        density=real.density,
        seed=real.seed,
        values=vals,
        history=real.history + ((tuple(ranks), subseed),),
    )

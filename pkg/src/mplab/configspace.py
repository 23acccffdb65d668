"""Finite boxes in Z^d and n-particle configurations on them.

A configuration is an ordered tuple of n lattice sites inside a box. Four
exchange sectors are supported: distinguishable particles (all tuples),
bosons (canonically non-decreasing tuples), fermions (strictly increasing
tuples), and hardcore particles (distinct sites, order irrelevant). Each
sector carries an explicit ranking bijection onto 0..size-1 so that sparse
operators can be indexed without dictionaries.

Distances between configurations come in two flavours: the symmetrized
(optimal-transport) distance, a true metric on unordered configurations, and
the Hausdorff pseudo-distance between occupied site sets, which is the
quantity the localization bounds are actually expressed in. The two are
deliberately kept distinct; collapsing them loses the physics of clustered
configurations (two configurations can share supports, hence Hausdorff
distance zero, while no particle relabeling maps one to the other).
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field

from scipy.optimize import linear_sum_assignment

SECTORS = ("distinguishable", "boson", "fermion", "hardcore")

# Beyond this particle count the n! assignment problem stops being a desk-side
# computation; the cap is explicit rather than silent.
SYMMETRIZED_MAX_PARTICLES = 8

Site = tuple[int, ...]


def site_dist(p: Site, q: Site, norm: str = "l1") -> int:
    """Distance between two sites, l1 (default) or l-infinity."""
    if len(p) != len(q):
        raise ValueError(f"site dimension mismatch: {len(p)} vs {len(q)}")
    diffs = [abs(a - b) for a, b in zip(p, q)]
    if norm == "l1":
        return sum(diffs)
    if norm == "linf":
        return max(diffs)
    raise ValueError(f"unknown norm {norm!r} (expected 'l1' or 'linf')")


@dataclass(frozen=True)
class Box:
    """Axis-aligned box of side `side` in Z^d, anchored at `origin`.

    Sites are the integer points origin + [0, side)^d. Single-site encoding
    is row-major in the coordinate offsets.
    """

    d: int
    side: int
    origin: Site = None  # type: ignore[assignment]

    def __post_init__(self):
        if self.d < 1:
            raise ValueError(f"dimension must be positive, got {self.d}")
        if self.side < 1:
            raise ValueError(f"side must be positive, got {self.side}")
        if self.origin is None:
            object.__setattr__(self, "origin", (0,) * self.d)
        else:
            object.__setattr__(self, "origin", tuple(int(c) for c in self.origin))
        if len(self.origin) != self.d:
            raise ValueError(
                f"origin has {len(self.origin)} coordinates, expected {self.d}"
            )

    @classmethod
    def centered(cls, d: int, side: int) -> "Box":
        """Box containing the origin, anchored at -side//2 in every axis."""
        return cls(d=d, side=side, origin=(-(side // 2),) * d)

    @property
    def volume(self) -> int:
        return self.side**self.d

    def contains(self, site: Site) -> bool:
        return len(site) == self.d and all(
            o <= c < o + self.side for c, o in zip(site, self.origin)
        )

    def encode(self, site: Site) -> int:
        """Row-major rank of a site; inverse of decode."""
        if not self.contains(site):
            raise ValueError(f"site {site} outside box {self}")
        k = 0
        for c, o in zip(site, self.origin):
            k = k * self.side + (c - o)
        return k

    def decode(self, k: int) -> Site:
        if not 0 <= k < self.volume:
            raise ValueError(f"site rank {k} out of range for volume {self.volume}")
        coords = []
        for _ in range(self.d):
            coords.append(k % self.side)
            k //= self.side
        return tuple(o + c for o, c in zip(self.origin, reversed(coords)))

    def sites(self):
        """All sites in encoding order."""
        for k in range(self.volume):
            yield self.decode(k)

    def boundary_sites(self) -> tuple[Site, ...]:
        """Sites with at least one coordinate on a face of the box."""
        out = []
        for s in self.sites():
            if any(
                c == o or c == o + self.side - 1 for c, o in zip(s, self.origin)
            ):
                out.append(s)
        return tuple(out)

    def is_subbox_of(self, other: "Box") -> bool:
        return self.d == other.d and all(
            oo <= so and so + self.side <= oo + other.side
            for so, oo in zip(self.origin, other.origin)
        )


def _validate_sector_order(sites: tuple[Site, ...], sector: str) -> None:
    if sector == "fermion":
        for a, b in zip(sites, sites[1:]):
            if a >= b:
                raise ValueError(
                    "fermion configuration must be strictly increasing in "
                    f"lexicographic site order, got {sites}"
                )
    elif sector == "boson":
        for a, b in zip(sites, sites[1:]):
            if a > b:
                raise ValueError(
                    "boson configuration must be non-decreasing in "
                    f"lexicographic site order, got {sites}"
                )
    elif sector == "hardcore":
        if len(set(sites)) != len(sites):
            raise ValueError(f"hardcore configuration has a repeated site: {sites}")


@dataclass(frozen=True)
class Configuration:
    """Ordered n-tuple of sites tagged with its exchange sector."""

    sites: tuple[Site, ...]
    sector: str = "distinguishable"

    def __post_init__(self):
        sites = tuple(tuple(int(c) for c in s) for s in self.sites)
        object.__setattr__(self, "sites", sites)
        if not sites:
            raise ValueError("configuration needs at least one particle")
        d = len(sites[0])
        if any(len(s) != d for s in sites):
            raise ValueError(f"inconsistent site dimensions in {sites}")
        if self.sector not in SECTORS:
            raise ValueError(f"unknown sector {self.sector!r}")
        _validate_sector_order(sites, self.sector)

    @property
    def n(self) -> int:
        return len(self.sites)

    @property
    def d(self) -> int:
        return len(self.sites[0])

    def support(self) -> frozenset[Site]:
        return frozenset(self.sites)

    def to_json(self) -> str:
        return json.dumps(
            {"sites": [list(s) for s in self.sites], "sector": self.sector}
        )

    @classmethod
    def from_json(cls, text: str) -> "Configuration":
        obj = json.loads(text)
        return cls(
            sites=tuple(tuple(s) for s in obj["sites"]), sector=obj["sector"]
        )


def occupation(config: Configuration, u: Site) -> int:
    """Number of particles of `config` sitting on site `u`."""
    u = tuple(u)
    return sum(1 for s in config.sites if s == u)


def diameter(config: Configuration, norm: str = "l1") -> int:
    """Max pairwise site distance; 0 for a single particle."""
    return max(
        (site_dist(p, q, norm) for p, q in itertools.combinations(config.sites, 2)),
        default=0,
    )


def hausdorff_dist(x: Configuration, y: Configuration, norm: str = "l1") -> int:
    """Hausdorff distance between the occupied site sets.

    A pseudo-metric on configurations: zero iff supports coincide, so
    occupation multiplicities are invisible to it. This is intentional; the
    decay bounds are stated in terms of it.
    """
    xs, ys = x.support(), y.support()
    d_xy = max(min(site_dist(p, q, norm) for q in ys) for p in xs)
    d_yx = max(min(site_dist(q, p, norm) for p in xs) for q in ys)
    return max(d_xy, d_yx)


def symmetrized_dist(x: Configuration, y: Configuration, norm: str = "l1") -> int:
    """Minimal total displacement over particle relabelings.

    min over permutations pi of sum_j dist(x_j, y_pi(j)); a true metric on
    unordered configurations. Solved as an assignment problem; refuses
    n > SYMMETRIZED_MAX_PARTICLES since the instance is dense in n.
    """
    if x.n != y.n:
        raise ValueError(f"particle number mismatch: {x.n} vs {y.n}")
    if x.n > SYMMETRIZED_MAX_PARTICLES:
        raise ValueError(
            f"symmetrized distance capped at n <= {SYMMETRIZED_MAX_PARTICLES}, "
            f"got n = {x.n}"
        )
    cost = [
        [site_dist(p, q, norm) for q in y.sites] for p in x.sites
    ]
    rows, cols = linear_sum_assignment(cost)
    return int(sum(cost[r][c] for r, c in zip(rows, cols)))


def _comb_rank(combo: tuple[int, ...], universe: int) -> int:
    # Lexicographic rank of a strictly increasing tuple within all
    # len(combo)-subsets of range(universe).
    n = len(combo)
    rank = 0
    prev = -1
    for j, c in enumerate(combo):
        for v in range(prev + 1, c):
            rank += math.comb(universe - 1 - v, n - 1 - j)
        prev = c
    return rank


def _comb_unrank(rank: int, n: int, universe: int) -> tuple[int, ...]:
    combo = []
    prev = -1
    for j in range(n):
        v = prev + 1
        while True:
            block = math.comb(universe - 1 - v, n - 1 - j)
            if rank < block:
                break
            rank -= block
            v += 1
        combo.append(v)
        prev = v
    return tuple(combo)


@dataclass(frozen=True)
class ConfigIndex:
    """Ranking bijection between a sector's configurations and 0..size-1.

    Distinguishable: mixed-radix over single-site ranks. Fermion/hardcore:
    lexicographic combination rank of the strictly increasing site ranks
    (hardcore inputs are canonicalized by sorting). Boson: non-decreasing
    tuples mapped to combinations by the staircase shift b_j -> b_j + j.
    """

    box: Box
    n: int
    sector: str = "distinguishable"
    size: int = field(init=False)

    def __post_init__(self):
        if self.n < 1:
            raise ValueError(f"particle number must be positive, got {self.n}")
        if self.sector not in SECTORS:
            raise ValueError(f"unknown sector {self.sector!r}")
        V = self.box.volume
        if self.sector == "distinguishable":
            size = V**self.n
        elif self.sector == "boson":
            size = math.comb(V + self.n - 1, self.n)
        else:  # fermion, hardcore
            if self.n > V:
                raise ValueError(
                    f"cannot place {self.n} mutually excluding particles on "
                    f"{V} sites"
                )
            size = math.comb(V, self.n)
        object.__setattr__(self, "size", size)

    def __len__(self) -> int:
        return self.size

    def _site_ranks(self, config: Configuration) -> tuple[int, ...]:
        return tuple(self.box.encode(s) for s in config.sites)

    def index_of(self, config: Configuration) -> int:
        """Rank of a configuration. Hardcore accepts any site order."""
        if config.sector != self.sector:
            raise ValueError(
                f"sector mismatch: index is {self.sector!r}, "
                f"configuration is {config.sector!r}"
            )
        if config.n != self.n:
            raise ValueError(f"particle number mismatch: {config.n} vs {self.n}")
        ranks = self._site_ranks(config)
        V = self.box.volume
        if self.sector == "distinguishable":
            k = 0
            for r in ranks:
                k = k * V + r
            return k
        if self.sector == "boson":
            # lexicographic site order on tuples == numeric order on ranks
            shifted = tuple(r + j for j, r in enumerate(sorted(ranks)))
            return _comb_rank(shifted, V + self.n - 1)
        ranks = tuple(sorted(ranks)) if self.sector == "hardcore" else ranks
        return _comb_rank(ranks, V)

    def config_at(self, k: int) -> Configuration:
        if not 0 <= k < self.size:
            raise ValueError(f"index {k} out of range for size {self.size}")
        V = self.box.volume
        if self.sector == "distinguishable":
            ranks = []
            for _ in range(self.n):
                ranks.append(k % V)
                k //= V
            ranks.reverse()
        elif self.sector == "boson":
            shifted = _comb_unrank(k, self.n, V + self.n - 1)
            ranks = [r - j for j, r in enumerate(shifted)]
        else:
            ranks = list(_comb_unrank(k, self.n, V))
        sites = tuple(self.box.decode(r) for r in ranks)
        return Configuration(sites=sites, sector=self.sector)

    def enumerate(self):
        """All configurations in rank order."""
        for k in range(self.size):
            yield self.config_at(k)

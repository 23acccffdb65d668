"""Assembly of n-particle lattice Hamiltonians with disorder and interaction.

H = (hopping) + lambda * (site disorder summed over particles) + (short-range
k-body interaction), acting on the chosen exchange sector over a finite box.

Boundary convention (easy to get subtly wrong, so stated loudly): the box
restriction is the Dirichlet restriction of the full-lattice operator. Hops
that would leave the box are dropped, but the kinetic diagonal stays 2*d*n
everywhere, including at the walls. Wall sites do NOT get a reduced diagonal.

Sector hop amplitudes, with occupations read from the source configuration:
distinguishable moves one labelled particle with amplitude -1; bosons move
one particle u -> t with amplitude -sqrt(m_u * (m_t + 1)); fermions carry
-(-1)^(number of occupied sites strictly between u and t in site-rank
order); hardcore particles hop with amplitude -1 and hops into occupied
sites are dropped. Interactions and number operators are diagonal in every
sector. All of this is cross-checked in the tests against explicit
symmetrization isometries applied to the distinguishable operator.
"""

from __future__ import annotations

import itertools
import math
from collections import Counter
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.io
import scipy.sparse as sp

from .configspace import (
    Box,
    ConfigIndex,
    Configuration,
    Site,
    site_dist,
)
from .disorder import DensitySpec, DisorderRealization


def _pair_nn_term(pattern, occs):
    # nearest-neighbour density-density; adjacency is graph adjacency
    # (l1 distance 1) regardless of the diameter norm in force
    (u, v) = pattern
    if site_dist(u, v, "l1") != 1:
        return 0.0
    return float(occs[0] * occs[1])


def _onsite_pairs_term(pattern, occs):
    m = occs[0]
    return 0.5 * m * (m - 1)


@dataclass(frozen=True)
class InteractionSpec:
    """Translation-invariant finite-range k-body interaction, k <= p.

    The energy of a configuration is sum_k alpha[k-1] * sum_A U_k(A, occs)
    over site patterns A with |A| = k and diameter <= range. Patterns with
    all occupations zero contribute nothing by convention, so the sums are
    finite. `terms` maps k to a callable (pattern_sites, occupations) ->
    float; patterns arrive lexicographically sorted. Equality compares the
    declared (p, alpha, range, label) only, never the callables, which is
    exact for the built-ins and approximate for custom terms.
    """

    p: int
    alpha: tuple[float, ...]
    range: int
    label: str = "custom"
    terms: dict = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "alpha", tuple(float(a) for a in self.alpha))
        if self.terms is None:
            object.__setattr__(self, "terms", {})
        if self.p < 0:
            raise ValueError(f"pattern size bound must be >= 0, got {self.p}")
        if len(self.alpha) != self.p:
            raise ValueError(
                f"need one coupling per pattern size: got {len(self.alpha)} "
                f"couplings for p = {self.p}"
            )
        if self.range < 0:
            raise ValueError(f"interaction range must be >= 0, got {self.range}")
        for k in self.terms:
            if not 1 <= k <= self.p:
                raise ValueError(f"term for pattern size {k} outside 1..{self.p}")
        for k, a in enumerate(self.alpha, start=1):
            if a != 0.0 and k not in self.terms:
                raise ValueError(
                    f"coupling alpha_{k} = {a} is nonzero but no size-{k} term "
                    "was provided"
                )

    @property
    def is_trivial(self) -> bool:
        return all(a == 0.0 for a in self.alpha)

    # ---------------------------------------------------------- factories

    @classmethod
    def none(cls) -> "InteractionSpec":
        return cls(p=0, alpha=(), range=0, label="none")

    @classmethod
    def pair_nn(cls, coupling: float, range: int = 1) -> "InteractionSpec":
        """Nearest-neighbour density-density pair interaction."""
        return cls(
            p=2,
            alpha=(0.0, float(coupling)),
            range=range,
            label="pair_nn",
            terms={2: _pair_nn_term},
        )

    @classmethod
    def onsite(cls, coupling: float) -> "InteractionSpec":
        """Same-site pair counting, alpha * m(m-1)/2 per site."""
        return cls(
            p=1,
            alpha=(float(coupling),),
            range=0,
            label="onsite",
            terms={1: _onsite_pairs_term},
        )

    # ------------------------------------------------------ serialization

    def to_dict(self) -> dict:
        if self.label not in BUILTIN_INTERACTIONS:
            raise ValueError(
                f"only built-in interactions serialize; label {self.label!r}"
            )
        return {"builtin": self.label, "alpha": list(self.alpha), "range": self.range}

    @classmethod
    def from_dict(cls, obj: dict) -> "InteractionSpec":
        name = obj.get("builtin", "none")
        if name == "none":
            return cls.none()
        if name == "pair_nn":
            alpha = obj.get("alpha", (0.0, 0.0))
            return cls.pair_nn(alpha[1], range=int(obj.get("range", 1)))
        if name == "onsite":
            alpha = obj.get("alpha", (0.0,))
            return cls.onsite(alpha[0])
        raise ValueError(f"unknown built-in interaction {name!r}")


BUILTIN_INTERACTIONS = ("none", "pair_nn", "onsite")


def _ball(center: Site, radius: int, norm: str):
    d = len(center)
    for offset in itertools.product(range(-radius, radius + 1), repeat=d):
        if site_dist(offset, (0,) * d, norm) <= radius:
            yield tuple(c + o for c, o in zip(center, offset))


def interaction_energy(
    config: Configuration, inter: InteractionSpec, norm: str = "l1"
) -> float:
    """Total interaction energy of a configuration.

    Patterns range over the infinite lattice; only patterns meeting the
    occupied support can contribute, which keeps the sum finite.
    """
    if inter.is_trivial:
        return 0.0
    occs = Counter(config.sites)
    support = set(occs)
    total = 0.0
    for k, a in enumerate(inter.alpha, start=1):
        if a == 0.0 or k not in inter.terms:
            continue
        f = inter.terms[k]
        if k == 1:
            total += a * sum(f((u,), (occs[u],)) for u in sorted(support))
            continue
        candidates = set()
        for u in support:
            candidates.update(_ball(u, inter.range, norm))
        for pattern in itertools.combinations(sorted(candidates), k):
            if not support.intersection(pattern):
                continue
            if max(
                site_dist(pp, qq, norm)
                for pp, qq in itertools.combinations(pattern, 2)
            ) > inter.range:
                continue
            total += a * f(pattern, tuple(occs[u] for u in pattern))
    return total


@dataclass(frozen=True)
class OperatorSpec:
    """Everything that defines the model apart from the disorder draw."""

    box: Box
    n: int
    sector: str = "distinguishable"
    lam: float = 1.0
    interaction: InteractionSpec = field(default_factory=InteractionSpec.none)
    boundary: str = "dirichlet_restriction"
    norm: str = "l1"

    def __post_init__(self):
        if self.boundary != "dirichlet_restriction":
            raise ValueError(
                f"unsupported boundary condition {self.boundary!r}; only "
                "'dirichlet_restriction' is implemented"
            )
        if self.norm not in ("l1", "linf"):
            raise ValueError(f"unknown norm {self.norm!r}")
        if self.lam < 0:
            raise ValueError(f"disorder strength must be >= 0, got {self.lam}")
        if not self.interaction.is_trivial and self.interaction.range >= self.box.side:
            raise ValueError(
                f"interaction range {self.interaction.range} >= box side "
                f"{self.box.side}; patterns would wrap the whole box"
            )
        # instantiating the index validates n against the sector
        ConfigIndex(self.box, self.n, self.sector)

    @cached_property
    def config_index(self) -> ConfigIndex:
        return ConfigIndex(self.box, self.n, self.sector)

    @property
    def dim(self) -> int:
        return self.config_index.size


def _sector_hops(sites: tuple[Site, ...], sector: str, box: Box):
    """Yield (target_sites_canonical, amplitude) for one kinetic application.

    `sites` is the canonical site tuple of the source configuration.
    """
    d = box.d
    unit = [tuple(1 if a == ax else 0 for a in range(d)) for ax in range(d)]
    if sector == "distinguishable":
        for j, u in enumerate(sites):
            for e in unit:
                for sgn in (1, -1):
                    t = tuple(c + sgn * o for c, o in zip(u, e))
                    if box.contains(t):
                        yield sites[:j] + (t,) + sites[j + 1 :], -1.0
        return
    occ = Counter(sites)
    ordered = sorted(occ)
    for u in ordered:
        m_u = occ[u]
        for e in unit:
            for sgn in (1, -1):
                t = tuple(c + sgn * o for c, o in zip(u, e))
                if not box.contains(t):
                    continue
                m_t = occ.get(t, 0)
                if sector == "boson":
                    amp = -math.sqrt(m_u * (m_t + 1))
                elif sector == "fermion":
                    if m_t:
                        continue
                    lo, hi = min(u, t), max(u, t)
                    crossings = sum(1 for w in occ if lo < w < hi)
                    amp = -1.0 * (1 if crossings % 2 == 0 else -1)
                else:  # hardcore
                    if m_t:
                        continue
                    amp = -1.0
                target = list(sites)
                target.remove(u)
                target.append(t)
                target.sort()
                yield tuple(target), amp


class OperatorTemplate:
    """Realization-independent parts of the Hamiltonian, assembled once.

    Holds the kinetic matrix (with its constant 2*d*n diagonal), the
    interaction diagonal, and the configuration-by-site occupation matrix M,
    so a realization v enters only through lam * diag(M @ v). Ensembles
    reuse one template across every seed.
    """

    def __init__(self, spec: OperatorSpec):
        self.spec = spec
        self.index = spec.config_index
        box = spec.box
        dim = self.index.size
        V = box.volume

        rows, cols, vals = [], [], []
        occ_rows, occ_cols, occ_vals = [], [], []
        inter_diag = np.zeros(dim)
        trivial = spec.interaction.is_trivial
        for k, cfg in enumerate(self.index.enumerate()):
            for site, m in Counter(cfg.sites).items():
                occ_rows.append(k)
                occ_cols.append(box.encode(site))
                occ_vals.append(float(m))
            if not trivial:
                inter_diag[k] = interaction_energy(cfg, spec.interaction, spec.norm)
            for target, amp in _sector_hops(cfg.sites, spec.sector, box):
                cfg_t = Configuration(sites=target, sector=spec.sector)
                rows.append(k)
                cols.append(self.index.index_of(cfg_t))
                vals.append(amp)

        self.kinetic = sp.csr_matrix(
            (vals, (rows, cols)), shape=(dim, dim), dtype=float
        )
        self.kinetic += sp.diags(
            np.full(dim, 2.0 * box.d * spec.n), format="csr", dtype=float
        )
        self.occupation = sp.csr_matrix(
            (occ_vals, (occ_rows, occ_cols)), shape=(dim, V), dtype=float
        )
        self.interaction_diag = inter_diag

    @property
    def dim(self) -> int:
        return self.index.size

    def hamiltonian(self, real: DisorderRealization) -> "SparseHamiltonian":
        if real.box != self.spec.box:
            raise ValueError(
                f"realization drawn on {real.box}, template expects {self.spec.box}"
            )
        diag = self.interaction_diag + self.spec.lam * (
            self.occupation @ real.values
        )
        matrix = (self.kinetic + sp.diags(diag, format="csr")).tocsr()
        return SparseHamiltonian(
            matrix=matrix, spec=self.spec, index=self.index, realization=real
        )

    def gershgorin_interval(self, density: DensitySpec) -> tuple[float, float]:
        """Interval containing every eigenvalue of every realization.

        Gershgorin row bounds with the potential replaced by its support
        envelope; valid uniformly over the ensemble drawn from `density`.
        """
        lam, n = self.spec.lam, self.spec.n
        v_lo, v_hi = density.support
        pot = (lam * n * v_lo, lam * n * v_hi)
        kin_diag = 2.0 * self.spec.box.d * n
        offdiag = np.abs(self.kinetic - sp.diags(self.kinetic.diagonal())).sum(axis=1)
        r = float(offdiag.max()) if offdiag.size else 0.0
        lo = kin_diag + self.interaction_diag.min() + min(pot) - r
        hi = kin_diag + self.interaction_diag.max() + max(pot) + r
        return (float(lo), float(hi))


@dataclass(frozen=True, eq=False)
class SparseHamiltonian:
    """Assembled sparse operator together with its provenance."""

    matrix: sp.csr_matrix
    spec: OperatorSpec
    index: ConfigIndex
    realization: DisorderRealization

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def rank_of(self, config: Configuration) -> int:
        return self.index.index_of(config)

    def to_matrix_market(self, path) -> None:
        """Write the matrix in MatrixMarket coordinate format."""
        s = self.spec
        comment = (
            f"n={s.n} sector={s.sector} d={s.box.d} side={s.box.side} "
            f"lambda={s.lam} interaction={s.interaction.label} seed="
            f"{self.realization.seed}"
        )
        scipy.io.mmwrite(path, self.matrix.tocoo(), comment=comment)


def assemble(spec: OperatorSpec, real: DisorderRealization) -> SparseHamiltonian:
    """One-shot assembly; build an OperatorTemplate instead for ensembles."""
    return OperatorTemplate(spec).hamiltonian(real)


def number_operator(index: ConfigIndex, u: Site) -> sp.csr_matrix:
    """Diagonal operator counting the particles on site u."""
    u = tuple(u)
    diag = np.array(
        [sum(1 for s in cfg.sites if s == u) for cfg in index.enumerate()],
        dtype=float,
    )
    return sp.diags(diag, format="csr")


def gershgorin_interval(
    spec: OperatorSpec, density: DensitySpec
) -> tuple[float, float]:
    return OperatorTemplate(spec).gershgorin_interval(density)

"""Experiment configuration, deterministic parallel execution, persistence.

A single JSON document describes one experiment: which diagnostic to run
(`kind`), the model operator (`model`), the disorder ensemble (`ensemble`),
numerical knobs (`numerics`), output location and formats (`output`), and
kind-specific parameters (`params`). `validate` returns a list of violation
strings (budget problems carry a "budget:" prefix); `run` executes a valid
config and writes a CSV table, a JSON mirror, and a metadata sidecar before
returning.

Execution is deterministic by construction: work splits into units that
depend only on their own seed (or instance index), workers share nothing
mutable, and a single reducer folds unit results in seed order. The result
rows are therefore byte-identical for any worker count, and identical to
the serial library entry points, which share the same per-unit functions.

Boxes are always centered at the origin. `model.L` is the side of the box
the model operator lives on; kinds that compare scales derive their boxes
from it (b_monitor runs at side L; rescaling at sides L and 2L; region_scan
monitors at sides L and 2L with the decay probe on the larger box).
"""

from __future__ import annotations

import copy
import csv
import dataclasses
import hashlib
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .configspace import SECTORS, Box, Configuration, hausdorff_dist, occupation
from .diagnostics import (
    B_MONITOR_QUAD_POINTS,
    DEFAULT_ETA,
    DEFAULT_QUAD_POINTS,
    Estimate,
    ScanProtocol,
    decay_fit,
    default_probe_interval,
    monitor_plan,
    monitor_reduce,
    monitor_seed_rows,
    probe_pairs,
    probe_samples,
    rescaling_check,
    scan_point,
    seed_descriptor,
    wegner_reduce,
    wegner_samples,
)
from .disorder import DensitySpec, sample
from .errors import BudgetError
from .operator import (
    BUILTIN_INTERACTIONS,
    InteractionSpec,
    OperatorSpec,
    assemble,
    gershgorin_interval,
)
from .spectral import (
    DENSE_DIAG_CAP,
    EnergyInterval,
    composite_green_check,
    composite_spectral_data,
    spectral_data,
    subadditivity_check,
)

KINDS = (
    "decay_probe",
    "wegner",
    "equivalence",
    "b_monitor",
    "rescaling",
    "region_scan",
    "composite_check",
    "subadditivity",
)

# kinds whose tables aggregate over a seed ensemble (need >= 2 draws)
_ENSEMBLE_KINDS = (
    "decay_probe",
    "equivalence",
    "wegner",
    "b_monitor",
    "rescaling",
    "region_scan",
)

_DEFAULT_MODEL = {
    "d": 1,
    "L": 8,
    "n": 1,
    "sector": "distinguishable",
    "lambda": 1.0,
    "interaction": {"builtin": "none", "coupling": 0.0, "range": 1},
    "density": {"kind": "uniform", "params": [-0.5, 0.5]},
    "norm": "l1",
}

_DEFAULT_SECTIONS = {
    "model": _DEFAULT_MODEL,
    "ensemble": {"base_seed": 0, "count": 8},
    "numerics": {"s": 0.5, "eta": None, "quad_points": None, "time_grid": None},
    "output": {"directory": "out", "formats": ["csv", "json"]},
}

_PARAM_DEFAULTS = {
    "decay_probe": {"max_points": 6, "pairs": None, "interval": None},
    "equivalence": {"max_points": 6, "pairs": None, "interval": None},
    "wegner": {
        "x": None,
        "y": None,
        "u1": None,
        "u2": None,
        "z_grid": None,
        "z_count": 8,
        "z_im": 0.0,
    },
    "b_monitor": {"omega_samples": 0},
    "rescaling": {"a": 1.0, "A": 0.0, "nu": 0.0, "p": 0.0, "omega_samples": 0},
    "region_scan": {
        "lambdas": None,
        "alphas": [0.0],
        "r2_threshold": 0.9,
        "xi_max": None,
        "monitor_eta": None,
        "omega_samples": 0,
    },
    "composite_check": {"instances": 20, "dim_cap": 10, "quadrature_points": 512},
    "subadditivity": {"instances": 500, "dim_cap": 12},
}


class ConfigError(ValueError):
    """A config failed validation; `violations` lists every problem."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


def _merge(defaults: dict, raw) -> dict:
    """Defaults overlaid with raw values; unknown raw keys are kept."""
    out = copy.deepcopy(defaults)
    if not isinstance(raw, dict):
        return raw
    for key, value in raw.items():
        if key in out and isinstance(out[key], dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


@dataclass(frozen=True)
class ExperimentConfig:
    """One experiment: kind, model, ensemble, numerics, output, params."""

    kind: str
    model: dict
    ensemble: dict
    numerics: dict
    output: dict
    params: dict
    extra: dict = dataclasses.field(default_factory=dict)

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        """Overlay raw sections on the defaults; nothing is rejected here.

        Unknown keys survive the merge so validate() can report them by
        name instead of silently dropping them.
        """
        if not isinstance(raw, dict):
            raise ConfigError(["config must be a JSON object"])
        kind = raw.get("kind")
        sections = {
            name: _merge(_DEFAULT_SECTIONS[name], raw.get(name, {}))
            for name in _DEFAULT_SECTIONS
        }
        params = _merge(_PARAM_DEFAULTS.get(kind, {}), raw.get("params", {}))
        extra = {
            k: raw[k]
            for k in raw
            if k not in ("kind", "params", *_DEFAULT_SECTIONS)
        }
        return cls(
            kind=kind,
            model=sections["model"],
            ensemble=sections["ensemble"],
            numerics=sections["numerics"],
            output=sections["output"],
            params=params,
            extra=extra,
        )

    def to_dict(self) -> dict:
        out = {
            "kind": self.kind,
            "model": copy.deepcopy(self.model),
            "ensemble": copy.deepcopy(self.ensemble),
            "numerics": copy.deepcopy(self.numerics),
            "output": copy.deepcopy(self.output),
            "params": copy.deepcopy(self.params),
        }
        out.update(copy.deepcopy(self.extra))
        return out

    # ------------------------------------------------------- model builders

    def interaction_spec(self) -> InteractionSpec:
        d = self.model["interaction"]
        builtin = d.get("builtin", "none")
        if "alpha" in d and "coupling" not in d:
            return InteractionSpec.from_dict(d)
        coupling = float(d.get("coupling", 0.0))
        if builtin == "none":
            return InteractionSpec.none()
        if builtin == "pair_nn":
            return InteractionSpec.pair_nn(coupling, range=int(d.get("range", 1)))
        if builtin == "onsite":
            return InteractionSpec.onsite(coupling)
        raise ValueError(f"unknown built-in interaction {builtin!r}")

    def density_spec(self) -> DensitySpec:
        d = self.model["density"]
        return DensitySpec(kind=d["kind"], params=tuple(d["params"]))

    def operator_spec(self, side: int = None) -> OperatorSpec:
        side = int(self.model["L"]) if side is None else int(side)
        return OperatorSpec(
            box=Box.centered(int(self.model["d"]), side),
            n=int(self.model["n"]),
            sector=self.model["sector"],
            lam=float(self.model["lambda"]),
            interaction=self.interaction_spec(),
            norm=self.model["norm"],
        )

    def seeds(self) -> list:
        base = int(self.ensemble["base_seed"])
        return [base + i for i in range(int(self.ensemble["count"]))]


def load_config(path) -> ExperimentConfig:
    """Read a JSON config file."""
    with open(path, "r", encoding="utf-8") as fh:
        return ExperimentConfig.from_dict(json.load(fh))


def apply_override(raw: dict, dotted: str, value) -> None:
    """Set a dotted path like model.lambda in a raw config dict, in place."""
    parts = dotted.split(".")
    node = raw
    for part in parts[:-1]:
        nxt = node.get(part)
        if not isinstance(nxt, dict):
            nxt = {}
            node[part] = nxt
        node = nxt
    node[parts[-1]] = value


# ------------------------------------------------------------------ validate


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v) -> bool:
    return (
        isinstance(v, (int, float))
        and not isinstance(v, bool)
        and math.isfinite(float(v))
    )


def _as_configuration(obj, spec: OperatorSpec) -> Configuration:
    """Accept a bare site list or a {sites, sector} object."""
    if isinstance(obj, dict):
        sites = obj["sites"]
        sector = obj.get("sector", spec.sector)
    else:
        sites, sector = obj, spec.sector
    cfg = Configuration(
        sites=tuple(tuple(int(c) for c in s) for s in sites), sector=sector
    )
    for site in cfg.sites:
        if not spec.box.contains(site):
            raise ValueError(f"site {site} lies outside the box")
    if cfg.n != spec.n:
        raise ValueError(f"configuration has {cfg.n} particles, model has {spec.n}")
    return cfg


def _corner_block(spec: OperatorSpec) -> Configuration:
    corner = spec.box.origin
    sites = tuple((corner[0] + k,) + tuple(corner[1:]) for k in range(spec.n))
    return Configuration(sites=sites, sector=spec.sector)


def _sector_dim(d: int, side: int, n: int, sector: str) -> int:
    V = side**d
    if sector == "distinguishable":
        return V**n
    if sector == "boson":
        return math.comb(V + n - 1, n)
    return math.comb(V, n) if n <= V else 0


def _block_candidates(config: ExperimentConfig) -> tuple:
    """(side, n) choices whose block dimension fits under params.dim_cap."""
    cap = int(config.params.get("dim_cap", 10))
    inter = config.interaction_spec()
    min_side = 2 if inter.is_trivial else max(2, inter.range + 1)
    out = []
    for side in range(min_side, int(config.model["L"]) + 1):
        for n in range(1, int(config.model["n"]) + 1):
            dim = _sector_dim(int(config.model["d"]), side, n, config.model["sector"])
            if 0 < dim <= cap:
                out.append((side, n))
    return tuple(out)


def _resolve_wegner(config: ExperimentConfig, spec: OperatorSpec):
    """Materialize x, y, u1, u2, z grid (defaults: corner block, its first
    site, a real grid across the spectral enclosure)."""
    p = config.params
    x = _as_configuration(p["x"], spec) if p["x"] is not None else _corner_block(spec)
    y = _as_configuration(p["y"], spec) if p["y"] is not None else x
    u1 = tuple(int(c) for c in p["u1"]) if p["u1"] is not None else x.sites[0]
    u2 = tuple(int(c) for c in p["u2"]) if p["u2"] is not None else y.sites[0]
    if p["z_grid"] is not None:
        zs = []
        for z in p["z_grid"]:
            if isinstance(z, (list, tuple)):
                zs.append(complex(float(z[0]), float(z[1])))
            else:
                zs.append(complex(float(z), 0.0))
    else:
        lo, hi = gershgorin_interval(spec, config.density_spec())
        count = int(p["z_count"])
        zs = [
            complex(v, float(p["z_im"]))
            for v in np.linspace(lo, hi, count)
        ]
    return x, y, u1, u2, zs


def _resolve_pairs(config: ExperimentConfig, spec: OperatorSpec):
    p = config.params
    if p["pairs"] is not None:
        return [
            (_as_configuration(px, spec), _as_configuration(py, spec))
            for px, py in p["pairs"]
        ]
    return probe_pairs(spec, int(p["max_points"]))


def _monitor_side_ok(config: ExperimentConfig, side: int, out: list) -> None:
    if side % 4 != 0:
        out.append(
            f"model.L: monitor boxes need a side divisible by 4, got {side}"
        )
        return
    n = int(config.model["n"])
    if config.model["sector"] in ("fermion", "hardcore") and n > 1:
        # distinct-site sectors cannot cluster below diameter n - 1
        if side <= 4 * (n - 1):
            out.append(
                f"model.L: side {side} leaves no cluster of {n} distinct "
                f"particles with diameter under {side / 4}"
            )


def _budget_check(config: ExperimentConfig, side: int, out: list) -> None:
    dim = _sector_dim(
        int(config.model["d"]), side, int(config.model["n"]),
        config.model["sector"],
    )
    if dim > DENSE_DIAG_CAP:
        out.append(
            f"budget: configuration space dimension {dim} at box side {side} "
            f"exceeds the dense-diagonalization cap {DENSE_DIAG_CAP}"
        )


def validate(config) -> list:
    """Every violation in the config, as human-readable strings.

    An empty list means runnable. Budget problems (work or memory caps) are
    prefixed with "budget:" so callers can distinguish them from plain
    validation failures.
    """
    if isinstance(config, dict):
        config = ExperimentConfig.from_dict(config)
    out = []

    if config.kind not in KINDS:
        out.append(f"kind must be one of {', '.join(KINDS)}, got {config.kind!r}")
        return out
    for key in config.extra:
        out.append(f"unknown config section {key!r}")

    m = config.model
    known_model = set(_DEFAULT_MODEL)
    for key in set(m) - known_model:
        out.append(f"unknown model field {key!r}")
    if not _is_int(m.get("d")) or not 1 <= m["d"] <= 3:
        out.append(f"model.d must be an integer in [1, 3], got {m.get('d')!r}")
    if not _is_int(m.get("L")) or m["L"] < 1:
        out.append(f"model.L must be a positive integer, got {m.get('L')!r}")
    if not _is_int(m.get("n")) or m["n"] < 1:
        out.append(f"model.n must be a positive integer, got {m.get('n')!r}")
    if m.get("sector") not in SECTORS:
        out.append(f"model.sector must be one of {SECTORS}, got {m.get('sector')!r}")
    if not _is_num(m.get("lambda")) or float(m["lambda"]) < 0:
        out.append(
            f"model.lambda must be a finite number >= 0, got {m.get('lambda')!r}"
        )
    if m.get("norm") not in ("l1", "linf"):
        out.append(f"model.norm must be 'l1' or 'linf', got {m.get('norm')!r}")
    inter = m.get("interaction", {})
    if not isinstance(inter, dict):
        out.append("model.interaction must be an object")
        inter = {}
    if inter.get("builtin", "none") not in BUILTIN_INTERACTIONS:
        out.append(
            f"model.interaction.builtin must be one of {BUILTIN_INTERACTIONS}, "
            f"got {inter.get('builtin')!r}"
        )
    if "coupling" in inter and not _is_num(inter["coupling"]):
        out.append(
            f"model.interaction.coupling must be a finite number, "
            f"got {inter['coupling']!r}"
        )
    if "range" in inter and (not _is_int(inter["range"]) or inter["range"] < 1):
        out.append(
            f"model.interaction.range must be a positive integer, "
            f"got {inter['range']!r}"
        )
    density_ok = True
    try:
        config.density_spec()
    except (ValueError, KeyError, TypeError) as e:
        density_ok = False
        out.append(f"model.density: {e}")

    e = config.ensemble
    for key in set(e) - {"base_seed", "count"}:
        out.append(f"unknown ensemble field {key!r}")
    if not _is_int(e.get("base_seed")) or e["base_seed"] < 0:
        out.append(
            f"ensemble.base_seed must be a nonnegative integer, "
            f"got {e.get('base_seed')!r}"
        )
    min_count = 2 if config.kind in _ENSEMBLE_KINDS else 1
    if not _is_int(e.get("count")) or e["count"] < min_count:
        out.append(
            f"ensemble.count must be an integer >= {min_count} for kind "
            f"{config.kind}, got {e.get('count')!r}"
        )

    num = config.numerics
    for key in set(num) - {"s", "eta", "quad_points", "time_grid"}:
        out.append(f"unknown numerics field {key!r}")
    s = num.get("s")
    if not _is_num(s) or not 0.0 < float(s) < 1.0:
        out.append(f"numerics.s must lie in (0,1), got {s!r}")
    if num.get("eta") is not None and (not _is_num(num["eta"]) or num["eta"] <= 0):
        out.append(f"numerics.eta must be null or positive, got {num['eta']!r}")
    qp = num.get("quad_points")
    if qp is not None and (not _is_int(qp) or qp < 1):
        out.append(
            f"numerics.quad_points must be null or a positive integer, got {qp!r}"
        )
    tg = num.get("time_grid")
    if tg is not None and (
        not isinstance(tg, list) or not all(_is_num(t) for t in tg)
    ):
        out.append("numerics.time_grid must be null or a list of numbers")

    o = config.output
    for key in set(o) - {"directory", "formats"}:
        out.append(f"unknown output field {key!r}")
    if not isinstance(o.get("directory"), str) or not o["directory"]:
        out.append(f"output.directory must be a nonempty string, got {o.get('directory')!r}")
    fmts = o.get("formats")
    if not isinstance(fmts, list) or not set(fmts) <= {"csv", "json"} or not fmts:
        out.append(f"output.formats must be a nonempty subset of [csv, json], got {fmts!r}")

    if out or not density_ok:
        # structural problems make the model unbuildable; stop here
        return out

    # the model spec itself (catches interaction range >= side, fermion
    # capacity, and anything else the operator layer validates)
    try:
        spec = config.operator_spec()
    except (ValueError, TypeError) as err:
        out.append(f"model: {err}")
        return out

    _validate_params(config, spec, out)
    return out


def _validate_params(config, spec, out: list) -> None:
    allowed = set(_PARAM_DEFAULTS[config.kind])
    for key in set(config.params) - allowed:
        out.append(f"unknown params field {key!r} for kind {config.kind}")
    p = config.params
    kind = config.kind
    L = int(config.model["L"])

    if kind in ("decay_probe", "equivalence"):
        if not _is_int(p.get("max_points")) or p["max_points"] < 3:
            out.append(
                f"params.max_points must be an integer >= 3, got {p.get('max_points')!r}"
            )
        else:
            try:
                _resolve_pairs(config, spec)
            except (ValueError, KeyError, TypeError) as err:
                out.append(f"params.pairs: {err}")
        iv = p.get("interval")
        if iv is not None:
            if (
                not isinstance(iv, list)
                or len(iv) != 2
                or not all(_is_num(v) for v in iv)
            ):
                out.append(f"params.interval must be null or [lo, hi], got {iv!r}")
            elif not iv[1] - iv[0] >= 1.0 - 1e-12:
                out.append(
                    f"params.interval must have length >= 1, got {iv[1] - iv[0]}"
                )
        _budget_check(config, L, out)

    elif kind == "wegner":
        if float(config.model["lambda"]) == 0.0:
            out.append("model.lambda: the conditional check needs lambda != 0")
        if p.get("z_grid") is None and (
            not _is_int(p.get("z_count")) or p["z_count"] < 1
        ):
            out.append(
                f"params.z_count must be a positive integer, got {p.get('z_count')!r}"
            )
        if p.get("z_grid") is None and not _is_num(p.get("z_im")):
            out.append(f"params.z_im must be a finite number, got {p.get('z_im')!r}")
        try:
            x, y, u1, u2, zs = _resolve_wegner(config, spec)
        except (ValueError, KeyError, TypeError, IndexError) as err:
            out.append(f"params: {err}")
        else:
            if not zs:
                out.append("params.z_grid must not be empty")
            if occupation(x, u1) < 1:
                out.append(f"params.u1: x has no particle at {u1}")
            if occupation(y, u2) < 1:
                out.append(f"params.u2: y has no particle at {u2}")
        _budget_check(config, L, out)

    elif kind == "b_monitor":
        if not _is_int(p.get("omega_samples")) or p["omega_samples"] < 0:
            out.append(
                f"params.omega_samples must be a nonnegative integer, "
                f"got {p.get('omega_samples')!r}"
            )
        _monitor_side_ok(config, L, out)
        _budget_check(config, L, out)

    elif kind == "rescaling":
        for name in ("a", "A", "nu", "p"):
            if not _is_num(p.get(name)) or float(p[name]) < 0:
                out.append(
                    f"params.{name} must be a finite number >= 0, got {p.get(name)!r}"
                )
        if _is_num(p.get("a")) and float(p["a"]) == 0.0:
            out.append("params.a must be positive")
        if not _is_int(p.get("omega_samples")) or p["omega_samples"] < 0:
            out.append(
                f"params.omega_samples must be a nonnegative integer, "
                f"got {p.get('omega_samples')!r}"
            )
        _monitor_side_ok(config, L, out)
        _budget_check(config, 2 * L, out)

    elif kind == "region_scan":
        lambdas = p.get("lambdas")
        if lambdas is None:
            lambdas = [float(config.model["lambda"])]
        if (
            not isinstance(lambdas, list)
            or not lambdas
            or not all(_is_num(v) and float(v) >= 0 for v in lambdas)
        ):
            out.append(
                f"params.lambdas must be a nonempty list of numbers >= 0, "
                f"got {p.get('lambdas')!r}"
            )
        alphas = p.get("alphas")
        if (
            not isinstance(alphas, list)
            or not alphas
            or not all(_is_num(v) for v in alphas)
        ):
            out.append(
                f"params.alphas must be a nonempty list of numbers, got {alphas!r}"
            )
        if not _is_num(p.get("r2_threshold")) or not 0 < p["r2_threshold"] <= 1:
            out.append(
                f"params.r2_threshold must lie in (0, 1], got {p.get('r2_threshold')!r}"
            )
        if p.get("xi_max") is not None and (
            not _is_num(p["xi_max"]) or p["xi_max"] <= 0
        ):
            out.append(f"params.xi_max must be null or positive, got {p['xi_max']!r}")
        if p.get("monitor_eta") is not None and (
            not _is_num(p["monitor_eta"]) or p["monitor_eta"] <= 0
        ):
            out.append(
                f"params.monitor_eta must be null or positive, "
                f"got {p['monitor_eta']!r}"
            )
        if not _is_int(p.get("omega_samples")) or p["omega_samples"] < 0:
            out.append(
                f"params.omega_samples must be a nonnegative integer, "
                f"got {p.get('omega_samples')!r}"
            )
        if config.interaction_spec().label == "onsite":
            out.append(
                "model.interaction: region_scan sweeps pair couplings; "
                "onsite is not supported here"
            )
        irange = config.model["interaction"].get("range", 1)
        if (
            isinstance(alphas, list)
            and any(_is_num(a) and float(a) != 0 for a in alphas)
            and _is_int(irange)
            and irange >= L
        ):
            out.append(
                f"model.interaction.range {irange} must be smaller than the "
                f"monitor box side {L} when the scan sweeps nonzero couplings"
            )
        _monitor_side_ok(config, L, out)
        if not out:
            try:
                probe_pairs(config.operator_spec(side=2 * L))
            except ValueError as err:
                out.append(f"model.L: {err}")
        _budget_check(config, 2 * L, out)

    elif kind in ("composite_check", "subadditivity"):
        if not _is_int(p.get("instances")) or p["instances"] < 1:
            out.append(
                f"params.instances must be a positive integer, "
                f"got {p.get('instances')!r}"
            )
        cap = p.get("dim_cap")
        if not _is_int(cap) or cap < 1:
            out.append(f"params.dim_cap must be a positive integer, got {cap!r}")
        else:
            if not _block_candidates(config):
                out.append(
                    f"params.dim_cap {cap} admits no block on boxes up to side {L}"
                )
            if cap * cap > DENSE_DIAG_CAP:
                out.append(
                    f"budget: composite dimension up to {cap * cap} exceeds the "
                    f"dense-diagonalization cap {DENSE_DIAG_CAP}"
                )
        if kind == "composite_check" and (
            not _is_int(p.get("quadrature_points")) or p["quadrature_points"] < 8
        ):
            out.append(
                f"params.quadrature_points must be an integer >= 8, "
                f"got {p.get('quadrature_points')!r}"
            )


# -------------------------------------------------------------- result table


@dataclass(frozen=True)
class ResultTable:
    """Typed columns, plain-value rows, and run metadata.

    dtypes name the cell type per column ("int", "float", "str", "bool").
    Every row carries the seed(s) that produced it in its `seeds` column.
    """

    columns: tuple
    dtypes: tuple
    rows: tuple
    metadata: dict

    def __post_init__(self):
        if len(self.columns) != len(self.dtypes):
            raise ValueError("one dtype per column required")
        for row in self.rows:
            if len(row) != len(self.columns):
                raise ValueError(
                    f"row width {len(row)} != column count {len(self.columns)}"
                )


def _format_cell(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return "%.17g" % float(value)
    return str(value)


def _parse_cell(text: str, dtype: str):
    if dtype == "int":
        return int(text)
    if dtype == "float":
        return float(text)
    if dtype == "bool":
        return text == "true"
    return text


def emit(table: ResultTable, directory, basename: str, formats=("csv", "json")):
    """Write the table (CSV and/or JSON mirror) plus a metadata sidecar.

    CSV cells are comma-separated with minimal double-quote quoting and
    CRLF row endings; floats carry 17 significant digits with a '.'
    decimal point, enough to reproduce the binary values exactly. Returns
    the list of written paths.
    """
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as err:
        raise OSError(f"cannot create output directory {directory}: {err}") from err
    written = []

    def _write(path, writer):
        try:
            with open(path, "w", encoding="utf-8", newline="") as fh:
                writer(fh)
        except OSError as err:
            raise OSError(f"cannot write {path}: {err}") from err
        written.append(str(path))

    if "csv" in formats:

        def _csv(fh):
            w = csv.writer(fh)
            w.writerow(table.columns)
            for row in table.rows:
                w.writerow([_format_cell(v) for v in row])

        _write(directory / f"{basename}.csv", _csv)

    if "json" in formats:

        def _json(fh):
            json.dump(
                {
                    "columns": list(table.columns),
                    "dtypes": list(table.dtypes),
                    "rows": [list(row) for row in table.rows],
                },
                fh,
                indent=1,
            )
            fh.write("\n")

        _write(directory / f"{basename}.json", _json)

    def _meta(fh):
        json.dump(
            {
                "columns": list(table.columns),
                "dtypes": list(table.dtypes),
                "metadata": table.metadata,
            },
            fh,
            indent=1,
            sort_keys=True,
            default=_jsonable,
        )
        fh.write("\n")

    _write(directory / f"{basename}.meta.json", _meta)
    return written


def _jsonable(value):
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return float(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    if dataclasses.is_dataclass(value) and not isinstance(value, type):
        return dataclasses.asdict(value)
    if isinstance(value, complex):
        return [value.real, value.imag]
    raise TypeError(f"not JSON-serializable: {type(value)}")


def read_table(csv_path) -> ResultTable:
    """Rebuild a ResultTable from its CSV file and metadata sidecar."""
    csv_path = Path(csv_path)
    sidecar = csv_path.parent / (csv_path.stem + ".meta.json")
    with open(csv_path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        raw_rows = [row for row in reader]
    dtypes = ["str"] * len(header)
    metadata = {}
    if sidecar.exists():
        with open(sidecar, "r", encoding="utf-8") as fh:
            meta = json.load(fh)
        if list(meta.get("columns", [])) == header:
            dtypes = list(meta.get("dtypes", dtypes))
        metadata = meta.get("metadata", {})
    rows = tuple(
        tuple(_parse_cell(cell, dt) for cell, dt in zip(row, dtypes))
        for row in raw_rows
    )
    return ResultTable(
        columns=tuple(header), dtypes=tuple(dtypes), rows=rows, metadata=metadata
    )


# ------------------------------------------------------------- parallel map


def _chunked_map(fn, units, workers):
    """Order-preserving map over independent units, optionally in processes.

    Results are identical for any worker count: units carry everything
    they need, nothing mutable is shared, and the output order is the
    input order.
    """
    units = list(units)
    if workers is None:
        workers = os.cpu_count() or 1
    workers = max(1, int(workers))
    if workers == 1 or len(units) <= 1:
        return [fn(u) for u in units]
    chunksize = max(1, math.ceil(len(units) / (workers * 4)))
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, units, chunksize=chunksize))


def _probe_unit(args):
    spec, seed, pairs, interval, s, eta, quad_points, density = args
    return probe_samples(spec, seed, pairs, interval, s, eta, quad_points, density)


def _wegner_unit(args):
    spec, base_seed, x, y, marked, zs, s, chunk, density = args
    return wegner_samples(spec, base_seed, x, y, marked, zs, s, chunk, density)


def _monitor_unit(args):
    plan, seed = args
    return monitor_seed_rows(plan, seed)


def _scan_unit(args):
    lam, alpha, proto = args
    return scan_point(lam, alpha, proto)


def _draw_block(rng, config: ExperimentConfig, candidates):
    side, n = candidates[int(rng.integers(len(candidates)))]
    spec = OperatorSpec(
        box=Box.centered(int(config.model["d"]), side),
        n=n,
        sector=config.model["sector"],
        lam=float(config.model["lambda"]),
        interaction=config.interaction_spec(),
        norm=config.model["norm"],
    )
    seed = int(rng.integers(2**31))
    H = assemble(spec, sample(spec.box, config.density_spec(), seed))
    return spec, seed, H


def _composite_unit(args):
    config, candidates, i = args
    rng = np.random.default_rng([int(config.ensemble["base_seed"]), 0xC0, i])
    spec_j, seed_j, H_j = _draw_block(rng, config, candidates)
    spec_k, seed_k, H_k = _draw_block(rng, config, candidates)
    density = config.density_spec()
    xj = H_j.index.config_at(int(rng.integers(H_j.index.size)))
    yj = H_j.index.config_at(int(rng.integers(H_j.index.size)))
    xk = H_k.index.config_at(int(rng.integers(H_k.index.size)))
    yk = H_k.index.config_at(int(rng.integers(H_k.index.size)))
    lo_j, hi_j = gershgorin_interval(spec_j, density)
    lo_k, hi_k = gershgorin_interval(spec_k, density)
    re = float(rng.uniform(lo_j + lo_k, hi_j + hi_k))
    # imaginary part strictly above any admissible contour radius
    im = max(1.25 * (hi_k - lo_k) / 2.0, 1.0) + 0.75
    z = complex(re, im)
    quad = int(config.params["quadrature_points"])
    chk = composite_green_check(H_j, H_k, (xj, xk), (yj, yk), z, quad)
    chk2 = composite_green_check(H_j, H_k, (xj, xk), (yj, yk), z, 2 * quad)
    return (
        i,
        seed_j,
        seed_k,
        H_j.index.size,
        H_k.index.size,
        z.real,
        z.imag,
        float(chk.gap),
        float(chk2.gap),
        f"{seed_j},{seed_k}",
    )


def _subadditivity_unit(args):
    config, candidates, i = args
    rng = np.random.default_rng([int(config.ensemble["base_seed"]), 0x5B, i])
    spec_j, seed_j, H_j = _draw_block(rng, config, candidates)
    spec_k, seed_k, H_k = _draw_block(rng, config, candidates)
    density = config.density_spec()
    S_j = spectral_data(H_j)
    S_k = spectral_data(H_k)
    S_jk = composite_spectral_data(H_j, H_k)
    xj = H_j.index.config_at(int(rng.integers(H_j.index.size)))
    yj = H_j.index.config_at(int(rng.integers(H_j.index.size)))
    xk = H_k.index.config_at(int(rng.integers(H_k.index.size)))
    yk = H_k.index.config_at(int(rng.integers(H_k.index.size)))
    lo_j, hi_j = gershgorin_interval(spec_j, density)
    lo_k, hi_k = gershgorin_interval(spec_k, density)
    lo, hi = lo_j + lo_k, hi_j + hi_k
    a = float(rng.uniform(lo, hi))
    width = float(rng.uniform(0.1, max(hi - lo, 0.2)))
    res = subadditivity_check(
        S_j, S_k, S_jk, (xj, xk), (yj, yk), EnergyInterval(a, a + width)
    )
    return (
        i,
        seed_j,
        seed_k,
        float(res.lhs),
        float(res.rhs),
        float(res.q_left),
        float(res.q_right),
        bool(res.satisfied),
        f"{seed_j},{seed_k}",
    )


# ------------------------------------------------------------------- runners


def _fit_dict(fit) -> dict:
    if fit is None:
        return None
    d = dataclasses.asdict(fit)
    d["pairs"] = [list(p) for p in fit.pairs]
    return d


def _try_fit(points):
    try:
        return decay_fit(points)
    except ValueError:
        return None


def _estimate_cols(est: Estimate):
    return est.mean, est.stderr


def _run_probe(config: ExperimentConfig, workers) -> ResultTable:
    spec = config.operator_spec()
    density = config.density_spec()
    seeds = config.seeds()
    num = config.numerics
    s = float(num["s"])
    eta = DEFAULT_ETA if num["eta"] is None else float(num["eta"])
    qp = DEFAULT_QUAD_POINTS if num["quad_points"] is None else int(num["quad_points"])
    pairs = _resolve_pairs(config, spec)
    iv = config.params["interval"]
    interval = (
        default_probe_interval(spec, density)
        if iv is None
        else EnergyInterval(float(iv[0]), float(iv[1]))
    )
    units = [
        (spec, seed, tuple(pairs), interval, s, eta, qp, density) for seed in seeds
    ]
    results = _chunked_map(_probe_unit, units, workers)
    moments = np.stack([m for m, _ in results])
    qvals = np.stack([q for _, q in results])
    desc = seed_descriptor(seeds)
    rows = []
    for p, (px, py) in enumerate(pairs):
        m_est = Estimate.from_samples(moments[:, p], seeds)
        q_est = Estimate.from_samples(qvals[:, p], seeds)
        rows.append(
            (
                int(hausdorff_dist(px, py, spec.norm)),
                q_est.mean,
                q_est.stderr,
                m_est.mean,
                m_est.stderr,
                desc,
            )
        )
    fit_q = _try_fit([(r[0], r[1]) for r in rows])
    fit_m = _try_fit([(r[0], r[3]) for r in rows])
    return ResultTable(
        columns=("dist_H", "EQ_mean", "EQ_stderr", "moment_mean", "moment_stderr", "seeds"),
        dtypes=("int", "float", "float", "float", "float", "str"),
        rows=tuple(rows),
        metadata={
            "interval": [interval.lo, interval.hi],
            "s": s,
            "eta": eta,
            "quad_points": qp,
            "pairs": [
                [[list(site) for site in px.sites], [list(site) for site in py.sites]]
                for px, py in pairs
            ],
            "fit_q": _fit_dict(fit_q),
            "fit_moment": _fit_dict(fit_m),
        },
    )


def _run_wegner(config: ExperimentConfig, workers) -> ResultTable:
    spec = config.operator_spec()
    density = config.density_spec()
    base_seed = int(config.ensemble["base_seed"])
    count = int(config.ensemble["count"])
    s = float(config.numerics["s"])
    x, y, u1, u2, zs = _resolve_wegner(config, spec)
    marked = (u1,) if u1 == u2 else (u1, u2)
    zarr = np.asarray(zs)
    chunk = 32
    chunks = [
        tuple(range(k, min(k + chunk, count))) for k in range(0, count, chunk)
    ]
    units = [
        (spec, base_seed, x, y, marked, zarr, s, ch, density) for ch in chunks
    ]
    blocks = _chunked_map(_wegner_unit, units, workers)
    values = np.vstack(blocks)
    report = wegner_reduce(spec, zarr, values, marked, s, range(count))
    rows = tuple(
        (z.real, z.imag, est.mean, est.stderr, est.count, est.seeds)
        for z, est in zip(report.z_grid, report.estimates)
    )
    return ResultTable(
        columns=("z_re", "z_im", "mean", "stderr", "count", "seeds"),
        dtypes=("float", "float", "float", "float", "int", "str"),
        rows=rows,
        metadata={
            "c_emp": report.c_emp,
            "worst_mean": report.worst.mean,
            "worst_stderr": report.worst.stderr,
            "marked": [list(u) for u in report.marked],
            "x": [list(site) for site in x.sites],
            "y": [list(site) for site in y.sites],
            "s": s,
            "lambda": spec.lam,
            "base_seed": base_seed,
            "subsamples": count,
        },
    )


def _monitor_numerics(config: ExperimentConfig):
    num = config.numerics
    eta = None if num["eta"] is None else float(num["eta"])
    qp = (
        B_MONITOR_QUAD_POINTS
        if num["quad_points"] is None
        else int(num["quad_points"])
    )
    return float(num["s"]), eta, qp


def _run_b_monitor(config: ExperimentConfig, workers) -> ResultTable:
    spec = config.operator_spec()
    seeds = config.seeds()
    s, eta, qp = _monitor_numerics(config)
    plan = monitor_plan(
        spec,
        seeds,
        s=s,
        omega_samples=int(config.params["omega_samples"]),
        eta=eta,
        quad_points=qp,
        density=config.density_spec(),
    )
    rows_by_seed = _chunked_map(_monitor_unit, [(plan, sd) for sd in seeds], workers)
    res = monitor_reduce(plan, seeds, rows_by_seed)
    desc = seed_descriptor(seeds)
    rows = tuple(
        (lo, lo + 1.0, mean, stderr, len(seeds), desc)
        for lo, mean, stderr in res.tiles
    )
    return ResultTable(
        columns=("tile_lo", "tile_hi", "mean", "stderr", "count", "seeds"),
        dtypes=("float", "float", "float", "float", "int", "str"),
        rows=rows,
        metadata={
            "value": res.value,
            "full_mean": res.full.mean,
            "full_stderr": res.full.stderr,
            "full_interval": [res.full_interval.lo, res.full_interval.hi],
            "subbox_values": list(res.subbox_values),
            "pair_count": res.pair_count,
            "boundary_count": res.boundary_count,
            "note": res.note,
            "s": plan.s,
            "eta": plan.eta,
            "quad_points": plan.quad_points,
        },
    )


def _run_rescaling(config: ExperimentConfig, workers) -> ResultTable:
    L = int(config.model["L"])
    seeds = config.seeds()
    s, eta, qp = _monitor_numerics(config)
    density = config.density_spec()
    p = config.params
    plans = [
        monitor_plan(
            config.operator_spec(side=side),
            seeds,
            s=s,
            omega_samples=int(p["omega_samples"]),
            eta=eta,
            quad_points=qp,
            density=density,
        )
        for side in (L, 2 * L)
    ]
    units = [(plan, sd) for plan in plans for sd in seeds]
    results = _chunked_map(_monitor_unit, units, workers)
    res_small = monitor_reduce(plans[0], seeds, results[: len(seeds)])
    res_large = monitor_reduce(plans[1], seeds, results[len(seeds):])
    report = rescaling_check(
        res_small,
        res_large,
        lam=float(config.model["lambda"]),
        s=s,
        L=L // 2,
        a=float(p["a"]),
        A=float(p["A"]),
        nu=float(p["nu"]),
        p=float(p["p"]),
    )
    desc = seed_descriptor(seeds)
    rows = (
        ("small", L, res_small.value, res_small.full.mean,
         res_small.full.stderr, len(seeds), desc),
        ("large", 2 * L, res_large.value, res_large.full.mean,
         res_large.full.stderr, len(seeds), desc),
    )
    return ResultTable(
        columns=("scale", "side", "value", "full_mean", "full_stderr", "count", "seeds"),
        dtypes=("str", "int", "float", "float", "float", "int", "str"),
        rows=rows,
        metadata={
            "report": dataclasses.asdict(report),
            "constants": {k: float(p[k]) for k in ("a", "A", "nu", "p")},
            "lambda": float(config.model["lambda"]),
            "s": s,
            "length_parameter": L // 2,
        },
    )


def _run_region_scan(config: ExperimentConfig, workers) -> ResultTable:
    L = int(config.model["L"])
    p = config.params
    num = config.numerics
    lambdas = p["lambdas"]
    if lambdas is None:
        lambdas = [float(config.model["lambda"])]
    proto = ScanProtocol(
        d=int(config.model["d"]),
        L=L // 2,
        n=int(config.model["n"]),
        sector=config.model["sector"],
        count=int(config.ensemble["count"]),
        base_seed=int(config.ensemble["base_seed"]),
        s=float(num["s"]),
        eta=DEFAULT_ETA if num["eta"] is None else float(num["eta"]),
        monitor_eta=None if p["monitor_eta"] is None else float(p["monitor_eta"]),
        quad_points=(
            B_MONITOR_QUAD_POINTS
            if num["quad_points"] is None
            else int(num["quad_points"])
        ),
        omega_samples=int(p["omega_samples"]),
        norm=config.model["norm"],
        density=config.density_spec(),
        interaction_range=int(config.model["interaction"].get("range", 1)),
        r2_threshold=float(p["r2_threshold"]),
        xi_max=None if p["xi_max"] is None else float(p["xi_max"]),
    )
    grid = [
        (float(lam), float(alpha)) for lam in lambdas for alpha in p["alphas"]
    ]
    verdicts = _chunked_map(
        _scan_unit, [(lam, alpha, proto) for lam, alpha in grid], workers
    )
    desc = seed_descriptor(range(proto.base_seed, proto.base_seed + proto.count))
    rows = []
    for v in verdicts:
        gap = v.b_small.value - v.b_large.value
        noise = math.hypot(v.b_small.full.stderr, v.b_large.full.stderr)
        rows.append(
            (
                v.lam,
                v.alpha,
                v.b_small.value,
                v.b_small.full.stderr,
                v.b_large.value,
                v.b_large.full.stderr,
                gap,
                noise,
                v.fit.xi,
                v.fit.r2,
                v.verdict,
                desc,
            )
        )
    return ResultTable(
        columns=(
            "lambda", "alpha", "b_small", "b_small_stderr", "b_large",
            "b_large_stderr", "gap", "noise", "xi", "r2", "verdict", "seeds",
        ),
        dtypes=(
            "float", "float", "float", "float", "float", "float", "float",
            "float", "float", "float", "str", "str",
        ),
        rows=tuple(rows),
        metadata={
            "sides": [2 * proto.L, 4 * proto.L],
            "count": proto.count,
            "base_seed": proto.base_seed,
            "s": proto.s,
            "r2_threshold": proto.r2_threshold,
            "xi_max": proto.xi_max if proto.xi_max is not None else float(proto.L),
        },
    )


def _run_composite(config: ExperimentConfig, workers) -> ResultTable:
    candidates = _block_candidates(config)
    n = int(config.params["instances"])
    rows = _chunked_map(
        _composite_unit, [(config, candidates, i) for i in range(n)], workers
    )
    return ResultTable(
        columns=(
            "instance", "seed_left", "seed_right", "dim_left", "dim_right",
            "z_re", "z_im", "gap", "gap_2x", "seeds",
        ),
        dtypes=(
            "int", "int", "int", "int", "int", "float", "float", "float",
            "float", "str",
        ),
        rows=tuple(rows),
        metadata={
            "quadrature_points": int(config.params["quadrature_points"]),
            "dim_cap": int(config.params["dim_cap"]),
            "max_gap": max((r[7] for r in rows), default=0.0),
        },
    )


def _run_subadditivity(config: ExperimentConfig, workers) -> ResultTable:
    candidates = _block_candidates(config)
    n = int(config.params["instances"])
    rows = _chunked_map(
        _subadditivity_unit, [(config, candidates, i) for i in range(n)], workers
    )
    return ResultTable(
        columns=(
            "instance", "seed_left", "seed_right", "lhs", "rhs", "q_left",
            "q_right", "satisfied", "seeds",
        ),
        dtypes=(
            "int", "int", "int", "float", "float", "float", "float", "bool",
            "str",
        ),
        rows=tuple(rows),
        metadata={
            "dim_cap": int(config.params["dim_cap"]),
            "violations": sum(1 for r in rows if not r[7]),
        },
    )


_RUNNERS = {
    "decay_probe": _run_probe,
    "equivalence": _run_probe,
    "wegner": _run_wegner,
    "b_monitor": _run_b_monitor,
    "rescaling": _run_rescaling,
    "region_scan": _run_region_scan,
    "composite_check": _run_composite,
    "subadditivity": _run_subadditivity,
}


def _config_sha256(config: ExperimentConfig) -> str:
    text = json.dumps(config.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _code_version() -> str:
    from . import __version__

    return __version__


def run(config, workers=None) -> ResultTable:
    """Validate, execute, and persist one experiment.

    Raises ConfigError when validation fails (BudgetError when the only
    failures are budget overruns). Writes the output files before
    returning; the table's metadata records the config, its hash, the
    package version, and the wall time.
    """
    if isinstance(config, dict):
        config = ExperimentConfig.from_dict(config)
    violations = validate(config)
    budget = [v for v in violations if v.startswith("budget:")]
    if len(budget) < len(violations):
        raise ConfigError(violations)
    if budget:
        raise BudgetError("; ".join(budget))
    start = time.monotonic()
    table = _RUNNERS[config.kind](config, workers)
    meta = {
        "kind": config.kind,
        "config": config.to_dict(),
        "config_sha256": _config_sha256(config),
        "version": _code_version(),
        "wall_time_s": time.monotonic() - start,
    }
    meta.update(table.metadata)
    table = dataclasses.replace(table, metadata=meta)
    emit(
        table,
        config.output["directory"],
        config.kind,
        tuple(config.output["formats"]),
    )
    return table

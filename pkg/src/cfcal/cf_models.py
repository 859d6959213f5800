"""Car-following acceleration laws: linear, Full Velocity Difference and IDM.

All laws are pure and broadcast over numpy arrays, so the same function
evaluates a single state or a (candidates x vehicles) batch during
calibration.

State convention: ``gap`` is always a positive spacing (leader minus ego)
and ``dv`` is leader speed minus ego speed. The linear law uses the signed
spacing ``ego - leader`` internally, i.e. ``-gap``.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Callable, ClassVar

import numpy as np
import yaml

VEHICLE_CLASSES = ("small", "large")
GAP_SEMANTICS = ("bumper", "center")

_SQRT_FLOOR = 1e-12


@dataclass(frozen=True)
class CFState:
    """Ego/leader state seen by a car-following law.

    Fields may be floats or broadcastable arrays.
    """

    v_ego: float | np.ndarray
    gap: float | np.ndarray
    dv: float | np.ndarray
    leader_length: float | np.ndarray = 0.0


class _Params:
    names: ClassVar[tuple[str, ...]]

    def to_vector(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in self.names], dtype=float)

    @classmethod
    def from_vector(cls, vec):
        if len(vec) != len(cls.names):
            raise ValueError(f"{cls.__name__} expects {len(cls.names)} values, got {len(vec)}")
        return cls(*(vec[i] for i in range(len(cls.names))))

    def as_dict(self) -> dict[str, float]:
        return {k: float(v) for k, v in asdict(self).items()}


@dataclass(frozen=True)
class LinearParams(_Params):
    k1: float
    k2: float
    k3: float

    names: ClassVar[tuple[str, ...]] = ("k1", "k2", "k3")


@dataclass(frozen=True)
class FVDParams(_Params):
    k: float
    lam: float
    V0: float
    b: float
    beta: float

    names: ClassVar[tuple[str, ...]] = ("k", "lam", "V0", "b", "beta")


@dataclass(frozen=True)
class IDMParams(_Params):
    v_f: float
    a_max: float
    b_comf: float
    S0: float
    t0: float

    names: ClassVar[tuple[str, ...]] = ("v_f", "a_max", "b_comf", "S0", "t0")


def linear_accel(s: CFState, p: LinearParams):
    """k1 * (ego - leader spacing) + k2 * dv + k3.

    With the signed spacing negative, a negative ``k1`` pulls the follower
    forward when the gap opens.
    """
    return p.k1 * (-s.gap) + p.k2 * s.dv + p.k3


def optimal_velocity(gap, leader_length, p: FVDParams):
    return 0.5 * p.V0 * (np.tanh((gap - leader_length) / p.b - p.beta) - np.tanh(-p.beta))


def fvd_accel(s: CFState, p: FVDParams):
    return p.k * (optimal_velocity(s.gap, s.leader_length, p) - s.v_ego) + p.lam * s.dv


def idm_desired_gap(v, dv, p: IDMParams):
    # dv is leader - ego, so closing in (dv < 0) enlarges the desired gap
    root = np.sqrt(np.maximum(p.a_max * p.b_comf, _SQRT_FLOOR))
    return p.S0 + p.t0 * v - v * dv / (2.0 * root)


def idm_accel(s: CFState, p: IDMParams, check: bool = True):
    """IDM acceleration with velocity exponent 4, no clamping.

    Raises:
        ValueError: if any gap is not strictly positive and ``check`` is set.
    """
    if check and np.any(np.asarray(s.gap) <= 0):
        raise ValueError("IDM undefined for non-positive gap")
    s_star = idm_desired_gap(s.v_ego, s.dv, p)
    return p.a_max * (1.0 - (s.v_ego / p.v_f) ** 4 - (s_star / s.gap) ** 2)


@dataclass(frozen=True)
class ModelKind:
    name: str
    params: type
    accel: Callable


MODELS: dict[str, ModelKind] = {
    "Linear": ModelKind("Linear", LinearParams, linear_accel),
    "FVD": ModelKind("FVD", FVDParams, fvd_accel),
    "IDM": ModelKind("IDM", IDMParams, lambda s, p: idm_accel(s, p, check=False)),
}


def model_kind(name: str) -> ModelKind:
    for key, kind in MODELS.items():
        if key.lower() == str(name).lower():
            return kind
    raise ValueError(f"unknown car-following model {name!r}; expected one of {sorted(MODELS)}")


def accel(kind: str, s: CFState, p):
    return model_kind(kind).accel(s, p)


@dataclass
class ModelSpec:
    """A model kind with one parameter set per vehicle class."""

    kind: str
    params: dict
    gap_semantics: str = "bumper"

    def __post_init__(self):
        mk = model_kind(self.kind)
        self.kind = mk.name
        missing = [c for c in VEHICLE_CLASSES if c not in self.params]
        if missing:
            raise ValueError(f"ModelSpec missing parameters for classes {missing}")
        for c, p in list(self.params.items()):
            if isinstance(p, dict):
                self.params[c] = mk.params(**{k: float(p[k]) for k in mk.params.names})
            elif not isinstance(p, mk.params):
                self.params[c] = mk.params.from_vector(p)
        if self.gap_semantics not in GAP_SEMANTICS:
            raise ValueError(f"gap_semantics must be one of {GAP_SEMANTICS}")

    @classmethod
    def uniform(cls, kind: str, params, gap_semantics: str = "bumper") -> ModelSpec:
        """Same parameters for every class."""
        return cls(kind, {c: params for c in VEHICLE_CLASSES}, gap_semantics)

    def for_class(self, vclass: str):
        return self.params[vclass]

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "gap_semantics": self.gap_semantics,
            "params": {c: self.params[c].as_dict() for c in VEHICLE_CLASSES},
        }

    @classmethod
    def from_dict(cls, d: dict) -> ModelSpec:
        return cls(d["kind"], dict(d["params"]), d.get("gap_semantics", "bumper"))


# -- parameter files ---------------------------------------------------------

TABLE4_FILE = Path(__file__).with_name("data") / "table4_params.yaml"


def load_param_file(path=TABLE4_FILE) -> dict:
    """Read a parameter file: ``{label: {model: {class: {name: value}}}}``."""
    with open(path) as fh:
        raw = yaml.safe_load(fh) or {}
    out = {}
    for label, models in raw.items():
        if label.startswith("_"):
            continue
        out[label] = {}
        for kind, by_class in models.items():
            mk = model_kind(kind)
            out[label][mk.name] = {c: mk.params(**{k: float(v[k]) for k in mk.params.names})
                                   for c, v in by_class.items()}
    return out


def table4_spec(method: str, kind: str, gap_semantics: str = "bumper") -> ModelSpec:
    """ModelSpec from the shipped reference parameter sets (method in MiC/MaC/BiC)."""
    table = load_param_file()
    return ModelSpec(model_kind(kind).name, dict(table[method][model_kind(kind).name]), gap_semantics)


def write_param_file(path, label: str, spec: ModelSpec):
    doc = {label: {spec.kind: {c: spec.params[c].as_dict() for c in spec.params}}}
    with open(path, "w") as fh:
        yaml.safe_dump(doc, fh, sort_keys=False)


def param_names(kind: str) -> tuple[str, ...]:
    return model_kind(kind).params.names

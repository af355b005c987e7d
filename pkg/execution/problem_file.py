#!/usr/bin/env python3
"""
Problem files: one JSON document describing a plant or a data record, horizons,
weights, constraints and solver options.

Schema violations raise ValueError with "<file>:<line>:" in front of the message,
pointing at the offending key where it can be found.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from condense import ConstraintSet, CostWeights, ParametricQP, signal_bounds
from datamat import DataRecord, HankelPartition, HorizonSpec, generate_excitation
from mpqp import Polyhedron, feasible_parameter_box
from sysmodel import SystemModel

logger = logging.getLogger(__name__)

PROBLEM_DIR = Path(__file__).parent / "problems"


@dataclass
class ProblemOptions:
    tol_rank: float | None = None
    tol_opt: float | None = None
    phi: float | None = None
    V_p: np.ndarray | None = None
    mpc_domain: np.ndarray | None = None
    dpc_domain: np.ndarray | None = None
    expected: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        for name in ("mpc_domain", "dpc_domain"):
            value = getattr(self, name)
            if value is None:
                continue
            bounds = np.array(value, dtype=float)
            if bounds.ndim != 2 or bounds.shape[1] != 2 or np.any(bounds[:, 0] > bounds[:, 1]):
                raise ValueError(f"{name} must be a list of [lower, upper] pairs")
            setattr(self, name, bounds)
        if self.phi is not None and self.phi == 0:
            raise ValueError("phi must be non-zero (Phi = phi * identity)")


@dataclass
class ProblemFile:
    """Either a system or a data block must be present; the DPC pipeline only needs the data."""
    horizons: HorizonSpec
    weights: CostWeights
    constraints: ConstraintSet
    system: SystemModel | None = None
    data: DataRecord | None = None
    generation: dict[str, Any] | None = None
    options: ProblemOptions = field(default_factory=ProblemOptions)
    name: str = "problem"

    def __post_init__(self):
        if self.system is None and self.data is None:
            raise ValueError("problem needs a 'system' block or a 'data' block")
        if self.data is None and self.generation is None:
            self.generation = {}
        m, p = (self.system.m, self.system.p) if self.system is not None else (self.data.m, self.data.p)
        if self.weights.m != m or self.weights.p != p:
            raise ValueError(f"weights are {self.weights.m}x{self.weights.p}, plant has m={m}, p={p}")
        if self.constraints.m != m or self.constraints.p != p:
            raise ValueError(f"constraints act on m={self.constraints.m}, p={self.constraints.p}; plant has m={m}, p={p}")

    @property
    def m(self) -> int:
        return self.system.m if self.system is not None else self.data.m

    @property
    def p(self) -> int:
        return self.system.p if self.system is not None else self.data.p

    def data_record(self, seed: int | None = None) -> DataRecord:
        """Recorded data, or data generated from the system block (a CLI seed overrides the file's)."""
        if self.data is not None:
            return self.data
        gen = self.generation or {}
        N_d = int(gen.get("N_d", 0))
        if N_d < 1:
            raise ValueError("generation block needs a positive N_d")
        seed = gen.get("seed") if seed is None else seed
        return generate_excitation(self.system, N_d, seed=seed, amplitude=float(gen.get("amplitude", 1.0)),
                                   tol_rank=self.options.tol_rank)

    def dpc_domain(self, part: HankelPartition) -> Polyhedron:
        """File bounds, or per-coordinate input/output bounds implied by the constraints."""
        if self.options.dpc_domain is not None:
            bounds = self.options.dpc_domain
            if bounds.shape[0] != part.W_p.shape[0]:
                raise ValueError(f"dpc_domain has {bounds.shape[0]} pairs, the past window has {part.W_p.shape[0]} entries")
            return Polyhedron.box(bounds[:, 0], bounds[:, 1])
        u_lo, u_hi = signal_bounds(self.constraints.M_u, self.constraints.v_u)
        y_lo, y_hi = signal_bounds(self.constraints.M_y, self.constraints.v_y)
        lower = np.concatenate([np.tile(u_lo, part.N_p), np.tile(y_lo, part.N_p)])
        upper = np.concatenate([np.tile(u_hi, part.N_p), np.tile(y_hi, part.N_p)])
        return Polyhedron.box(lower, upper)

    def mpc_domain(self, qp: ParametricQP) -> Polyhedron:
        """File bounds, or the bounding box of the feasible states enlarged by 1 %."""
        if self.options.mpc_domain is not None:
            bounds = self.options.mpc_domain
            if bounds.shape[0] != qp.n_theta:
                raise ValueError(f"mpc_domain has {bounds.shape[0]} pairs, the state has {qp.n_theta} entries")
            return Polyhedron.box(bounds[:, 0], bounds[:, 1])
        return feasible_parameter_box(qp, margin=0.01)

    def to_dict(self) -> dict:
        out = {
            "name": self.name,
            "horizons": {"N_p": self.horizons.N_p, "N_f": self.horizons.N_f, "n": self.horizons.n},
            "weights": self.weights.to_dict(),
            "constraints": self.constraints.to_dict(),
        }
        if self.system is not None:
            out["system"] = self.system.to_dict()
        if self.data is not None:
            out["data"] = {"u": self.data.u_d.tolist(), "y": self.data.y_d.tolist(), "m": self.data.m, "p": self.data.p}
        elif self.generation:
            out["generation"] = dict(self.generation)
        return out


def _line_of(text: str, key: str) -> int:
    needle = f'"{key}"'
    for number, line in enumerate(text.splitlines(), start=1):
        if needle in line:
            return number
    return 1


def _block(doc: dict, key: str, required: bool = True) -> dict | None:
    value = doc.get(key)
    if value is None:
        if required:
            raise KeyError(key)
        return None
    if not isinstance(value, dict):
        raise TypeError(key)
    return value


def _constraints(block: dict) -> ConstraintSet:
    if "u_max" in block or "y_max" in block:
        u_max = np.atleast_1d(np.array(block["u_max"], dtype=float))
        y_max = np.atleast_1d(np.array(block["y_max"], dtype=float))
        return ConstraintSet.box(u_max, y_max, m=u_max.size, p=y_max.size)
    return ConstraintSet(block["M_u"], block["v_u"], block["M_y"], block["v_y"])


def parse_problem(doc: dict[str, Any], name: str = "problem") -> ProblemFile:
    """
    Builds a ProblemFile from a parsed document.

    Expected structure:
    {
        "system": {"A": [[...]], "B": [[...]], "C": [[...]], "D": [[...]]},      (optional)
        "data": {"u": [...], "y": [...], "m": 1, "p": 1},                      (or "generation")
        "generation": {"N_d": int, "seed": int, "amplitude": float},
        "horizons": {"N_p": int, "N_f": int, "n": int},
        "weights": {"Q": [[...]], "R": [[...]]},
        "constraints": {"M_u", "v_u", "M_y", "v_y"} or {"u_max", "y_max"},
        "options": {"tol_rank", "tol_opt", "phi", "V_p", "mpc_domain", "dpc_domain", "expected"}
    }
    """
    system_block = _block(doc, "system", required=False)
    data_block = _block(doc, "data", required=False)
    generation = _block(doc, "generation", required=False)
    horizons = _block(doc, "horizons")
    weights = _block(doc, "weights")
    constraints = _block(doc, "constraints")
    options = _block(doc, "options", required=False) or {}

    system = None
    if system_block is not None:
        system = SystemModel(system_block["A"], system_block["B"], system_block["C"],
                             system_block.get("D", np.zeros((len(system_block["C"]), np.shape(system_block["B"])[1]))))
    data = None
    if data_block is not None:
        data = DataRecord(data_block["u"], data_block["y"], m=int(data_block.get("m", 1)), p=int(data_block.get("p", 1)))
    if data is None and generation is None and system is not None:
        raise KeyError("generation")

    return ProblemFile(
        horizons=HorizonSpec(int(horizons["N_p"]), int(horizons["N_f"]), int(horizons["n"])),
        weights=CostWeights(weights["Q"], weights["R"]),
        constraints=_constraints(constraints),
        system=system,
        data=data,
        generation=generation,
        options=ProblemOptions(
            tol_rank=options.get("tol_rank"),
            tol_opt=options.get("tol_opt"),
            phi=options.get("phi"),
            V_p=None if options.get("V_p") is None else np.array(options["V_p"], dtype=float),
            mpc_domain=options.get("mpc_domain"),
            dpc_domain=options.get("dpc_domain"),
            expected=dict(options.get("expected", {})),
        ),
        name=str(doc.get("name", name)),
    )


def load_problem(path) -> ProblemFile:
    """Read and validate a problem file; every failure is a ValueError naming file and line."""
    path = Path(path)
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise ValueError(f"{path}: problem file not found")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ValueError(f"{path}:{e.lineno}: invalid JSON: {e.msg} (column {e.colno})")
    if not isinstance(doc, dict):
        raise ValueError(f"{path}:1: top level must be an object")

    try:
        problem = parse_problem(doc, name=path.stem)
    except KeyError as e:
        key = e.args[0]
        raise ValueError(f"{path}:{_line_of(text, key)}: missing required key '{key}'")
    except TypeError as e:
        raise ValueError(f"{path}:{_line_of(text, str(e))}: wrong type for '{e}'")
    except ValueError as e:
        key = next((k for k in ("system", "data", "horizons", "weights", "constraints", "options")
                    if k in str(e)), "")
        raise ValueError(f"{path}:{_line_of(text, key) if key else 1}: {e}")
    logger.info(f"Loaded problem '{problem.name}' from {path}")
    return problem


def builtin_problem(name: str) -> ProblemFile:
    return load_problem(PROBLEM_DIR / f"{name}.json")

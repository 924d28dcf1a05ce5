"""Chemical kinetics models: mass-action mechanisms and analytic test systems.

Three built-in models are provided: the two-variable Davis--Skodje system,
a six-species hydrogen combustion mechanism with temperature-independent
rate constants, and the three-species ozone decomposition mechanism with
Arrhenius kinetics and third-body efficiencies.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from functools import cached_property
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.linalg import null_space
from scipy.optimize import linprog

from . import _backend

log = logging.getLogger(__name__)

#: Gas constant in kJ/(mol K).
R_GAS = 8.314462618e-3

DAVIS_SKODJE = "davis-skodje"
MASS_ACTION = "mass-action"
LINEAR = "linear"


class MechanismError(ValueError):
    pass


class EquilibriumError(RuntimeError):
    """Newton refinement of the equilibrium failed; ``best`` holds the best iterate."""

    def __init__(self, message, best):
        super().__init__(message)
        self.best = best


@dataclass(frozen=True)
class Species:
    name: str
    elements: Mapping[str, int] = field(default_factory=dict)


@dataclass(frozen=True)
class ArrheniusParams:
    A: float
    b: float = 0.0
    Ea: float = 0.0  # kJ/mol

    def __post_init__(self):
        if not self.A > 0:
            raise MechanismError(f"pre-exponential factor must be positive, got {self.A}")


@dataclass(frozen=True)
class Reaction:
    reactants: Mapping[int, int]
    products: Mapping[int, int]
    kinetics: ArrheniusParams
    third_body: Mapping[int, float] | None = None
    reversible_pair: int | None = None

    def __post_init__(self):
        for side in (self.reactants, self.products):
            for k, nu in side.items():
                if int(nu) != nu or nu <= 0:
                    raise MechanismError(f"stoichiometric coefficients must be positive integers, got {nu}")


@dataclass(frozen=True)
class ConservationRelation:
    coefficients: tuple
    constant: float


@dataclass(frozen=True)
class State:
    c: np.ndarray
    t: float = 0.0


def rate_constant(p: ArrheniusParams, T: float) -> float:
    """Modified Arrhenius rate coefficient ``A T^b exp(-Ea / (R T))``."""
    if not T > 0:
        raise ValueError(f"temperature must be positive, got {T}")
    return p.A * T ** p.b * math.exp(-p.Ea / (R_GAS * T))


@dataclass(frozen=True, eq=False)
class Mechanism:
    """An isothermal kinetic model.

    ``kind`` is one of ``"davis-skodje"`` (parameter ``gamma``),
    ``"mass-action"`` (species/reactions/conservation) or ``"linear"``
    (``f(c) = matrix @ c``, used for analytic test problems).
    """

    name: str
    species: tuple
    reactions: tuple = ()
    conservation: tuple = ()
    temperature: float = 298.15
    kind: str = MASS_ACTION
    gamma: float | None = None
    matrix: np.ndarray | None = None
    reference: tuple | None = None  # an admissible composition, if known

    def __post_init__(self):
        names = [s.name for s in self.species]
        if len(set(names)) != len(names):
            raise MechanismError("species names must be unique")
        if self.kind == DAVIS_SKODJE:
            if len(self.species) != 2 or self.conservation:
                raise MechanismError("the Davis-Skodje model has two variables and no conservation relations")
            if self.gamma is None or not self.gamma > 1:
                raise MechanismError(f"Davis-Skodje requires gamma > 1, got {self.gamma}")
        elif self.kind == LINEAR:
            mat = np.asarray(self.matrix, dtype=float)
            if mat.shape != (len(self.species),) * 2:
                raise MechanismError("linear model matrix must be square and match the species count")
        elif self.kind == MASS_ACTION:
            if not self.temperature > 0:
                raise MechanismError("temperature must be positive")
            self._check_element_balance()
            self._check_conservation()
        else:
            raise MechanismError(f"unknown mechanism kind {self.kind!r}")

    def _check_element_balance(self):
        for j, r in enumerate(self.reactions):
            totals = {}
            for side, sign in ((r.reactants, 1), (r.products, -1)):
                for i, nu in side.items():
                    for el, cnt in self.species[i].elements.items():
                        totals[el] = totals.get(el, 0) + sign * nu * cnt
            bad = {el: v for el, v in totals.items() if v != 0}
            if bad:
                raise MechanismError(f"reaction {j} violates element balance: {bad}")

    def _check_conservation(self):
        S = self.stoichiometry
        for rel in self.conservation:
            if len(rel.coefficients) != self.n_species:
                raise MechanismError("conservation coefficient vector has the wrong length")
            if np.any(np.asarray(rel.coefficients, dtype=float) @ S != 0):
                raise MechanismError(f"{rel.coefficients} is not conserved by the reactions")

    @property
    def n_species(self) -> int:
        return len(self.species)

    @property
    def species_names(self) -> list:
        return [s.name for s in self.species]

    def index(self, name) -> int:
        if isinstance(name, (int, np.integer)):
            if not 0 <= name < self.n_species:
                raise KeyError(name)
            return int(name)
        try:
            return self.species_names.index(name)
        except ValueError:
            raise KeyError(f"unknown species {name!r}; known: {self.species_names}") from None

    @cached_property
    def stoichiometry(self) -> np.ndarray:
        """Net stoichiometric matrix, shape ``(n_species, n_reactions)``."""
        S = np.zeros((self.n_species, len(self.reactions)))
        for j, r in enumerate(self.reactions):
            for i, nu in r.reactants.items():
                S[i, j] -= nu
            for i, nu in r.products.items():
                S[i, j] += nu
        return S

    @property
    def conservation_matrix(self) -> np.ndarray:
        return np.array([rel.coefficients for rel in self.conservation], dtype=float).reshape(
            len(self.conservation), self.n_species)

    @property
    def conservation_constants(self) -> np.ndarray:
        return np.array([rel.constant for rel in self.conservation], dtype=float)

    @cached_property
    def rate_constants(self) -> np.ndarray:
        return np.array([rate_constant(r.kinetics, self.temperature) for r in self.reactions])

    @cached_property
    def model(self):
        """Kernel-level model object for the selected backend."""
        return self.kernel_model(_backend.kernels)

    def kernel_model(self, kernels):
        n = self.n_species
        if self.kind == DAVIS_SKODJE:
            return kernels.Model(kernels.KIND_DAVIS_SKODJE, n, gamma=self.gamma)
        if self.kind == LINEAR:
            return kernels.Model(kernels.KIND_LINEAR, n, matrix=np.asarray(self.matrix, dtype=float))
        nr = len(self.reactions)
        order = max(1, max((sum(r.reactants.values()) for r in self.reactions), default=1))
        idx = np.full((nr, order), n, dtype=np.intp)
        tb = np.zeros(nr, dtype=np.intp)
        eff = np.zeros((nr, n))
        for j, r in enumerate(self.reactions):
            slots = [i for i, nu in sorted(r.reactants.items()) for _ in range(int(nu))]
            idx[j, :len(slots)] = slots
            if r.third_body is not None:
                tb[j] = 1
                eff[j] = [r.third_body.get(i, 1.0) for i in range(n)]
        return kernels.Model(kernels.KIND_MASS_ACTION, n, idx=idx, k=self.rate_constants,
                             nu_net=self.stoichiometry.T.copy(), tb=tb, eff=eff)

    def rhs(self, c) -> np.ndarray:
        return self.model.rhs(np.asarray(c, dtype=float))

    def jacobian(self, c) -> np.ndarray:
        return np.asarray(self.model.jac(np.asarray(c, dtype=float)))

    def with_constants(self, constants: Sequence[float]) -> "Mechanism":
        constants = list(constants)
        if len(constants) != len(self.conservation):
            raise MechanismError(f"expected {len(self.conservation)} conservation constants, got {len(constants)}")
        rels = tuple(ConservationRelation(rel.coefficients, float(v))
                     for rel, v in zip(self.conservation, constants))
        return replace(self, conservation=rels, reference=None)

    def with_temperature(self, T: float) -> "Mechanism":
        return replace(self, temperature=float(T))

    @cached_property
    def null_basis(self) -> np.ndarray:
        """Orthonormal basis of the directions that leave every conserved quantity unchanged."""
        if not self.conservation:
            return np.eye(self.n_species)
        return null_space(self.conservation_matrix)

    def describe(self) -> dict:
        d = {"name": self.name, "kind": self.kind, "species": self.species_names}
        if self.kind == DAVIS_SKODJE:
            d["gamma"] = self.gamma
        if self.kind == MASS_ACTION:
            d["temperature"] = self.temperature
            d["reactions"] = len(self.reactions)
            d["conservation"] = [{"coefficients": list(r.coefficients), "constant": r.constant}
                                 for r in self.conservation]
        return d


def _state_vector(m: Mechanism, s) -> np.ndarray:
    c = np.asarray(s.c if isinstance(s, State) else s, dtype=float)
    if c.shape != (m.n_species,):
        raise ValueError(f"state has shape {c.shape}, mechanism {m.name} expects ({m.n_species},)")
    return c


def rhs(m: Mechanism, s) -> np.ndarray:
    """Time derivative ``f(c)`` at a :class:`State` or concentration vector."""
    return m.rhs(_state_vector(m, s))


def jacobian(m: Mechanism, s) -> np.ndarray:
    """Analytic Jacobian ``df/dc``."""
    return m.jacobian(_state_vector(m, s))


def conservation_residual(m: Mechanism, c) -> np.ndarray:
    c = _state_vector(m, c)
    return m.conservation_matrix @ c - m.conservation_constants


def feasible_composition(m: Mechanism, fixed: Mapping[int, float] | None = None,
                         upper: np.ndarray | None = None) -> np.ndarray:
    """A nonnegative composition meeting the conservation relations and fixed values.

    Solved as a phase-one linear program maximising the smallest free
    concentration, which places the point in the interior when one exists.
    Raises :class:`MechanismError` when the constraints admit no
    nonnegative solution.
    """
    n = m.n_species
    fixed = dict(fixed or {})
    free = [i for i in range(n) if i not in fixed]
    c = np.zeros(n)
    for i, v in fixed.items():
        c[i] = v
    if not free:
        if m.conservation and np.max(np.abs(conservation_residual(m, c))) > 1e-12:
            raise MechanismError("fixed values violate the conservation relations")
        return c
    G = m.conservation_matrix
    rhs_eq = m.conservation_constants - (G[:, list(fixed)] @ np.array(list(fixed.values()))
                                         if fixed else 0.0)
    nf = len(free)
    # variables: c_free (nf), s (margin); maximise s subject to c_free >= s
    cost = np.zeros(nf + 1)
    cost[-1] = -1.0
    A_ub = np.hstack([-np.eye(nf), np.ones((nf, 1))])
    b_ub = np.zeros(nf)
    bounds = [(0.0, None if upper is None or not np.isfinite(upper[i]) else upper[i]) for i in free]
    bounds.append((0.0, None))
    if G.shape[0]:
        A_eq = np.hstack([G[:, free], np.zeros((G.shape[0], 1))])
        b_eq = rhs_eq
    else:
        A_eq = b_eq = None
    if upper is None or not np.all(np.isfinite([upper[i] for i in free])):
        # cap the margin so unbounded directions do not make the program unbounded
        bounds[-1] = (0.0, 1.0)
    res = linprog(cost, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=b_eq, bounds=bounds, method="highs")
    if res.status != 0:
        raise MechanismError(f"constraints admit no nonnegative composition ({res.message})")
    c[free] = np.maximum(res.x[:nf], 0.0)
    return c


def reference_composition(m: Mechanism) -> np.ndarray:
    if m.reference is not None:
        return np.array(m.reference, dtype=float)
    if m.kind == DAVIS_SKODJE:
        return np.array([1.0, 1.0])
    return feasible_composition(m)


def equilibrium_state(m: Mechanism, start=None, newton_tol: float = 1e-12) -> State:
    """Equilibrium composition by long-horizon integration plus Newton refinement.

    Newton's method works in the affine subspace selected by the
    conservation relations, where the reduced Jacobian is nonsingular at a
    stable fixed point.
    """
    from .integrator import IntegratorOptions, StopCondition, integrate

    c0 = reference_composition(m) if start is None else _state_vector(m, start)
    f0 = np.linalg.norm(m.rhs(c0))
    if f0 > 0:
        # the velocity threshold may sit below the round-off floor of |f|; the
        # last accepted state is still a good Newton start
        traj = integrate(m, c0, StopCondition.velocity(max(f0 * 1e-10, 1e-300)),
                         opts=IntegratorOptions(rtol=1e-10, atol=1e-14, max_steps=5000),
                         raise_on_failure=False)
        c = traj.states[-1].copy()
        t = float(traj.times[-1])
    else:
        c, t = c0.copy(), 0.0
    N = m.null_basis
    best = c.copy()
    best_norm = np.linalg.norm(m.rhs(c))
    for _ in range(50):
        f = m.rhs(c)
        fn = np.linalg.norm(f)
        if fn < best_norm:
            best, best_norm = c.copy(), fn
        if fn <= newton_tol:
            break
        Jr = N.T @ m.jacobian(c) @ N
        try:
            dz = np.linalg.solve(Jr, -(N.T @ f))
        except np.linalg.LinAlgError:
            break
        step = N @ dz
        # damp so that no concentration is driven below zero
        lam = 1.0
        neg = (c + step < 0) & (step < 0)
        if m.kind == MASS_ACTION and np.any(neg):
            lam = min(1.0, 0.9 * np.min(c[neg] / -step[neg]))
        c_new = c + lam * step
        if np.linalg.norm(m.rhs(c_new)) >= fn and lam == 1.0 and fn <= 1e3 * newton_tol:
            break
        c = c_new
    f = m.rhs(best)
    if np.linalg.norm(f) > newton_tol:
        if np.linalg.norm(f) > 1e3 * newton_tol:
            raise EquilibriumError(
                f"Newton refinement stalled at |f| = {np.linalg.norm(f):.3e}", State(best, t))
        log.warning("equilibrium residual %.3e above requested %.1e", np.linalg.norm(f), newton_tol)
    return State(best, t)


# ---------------------------------------------------------------- built-ins

def davis_skodje(gamma: float = 6.0) -> Mechanism:
    return Mechanism(name=DAVIS_SKODJE, species=(Species("y1"), Species("y2")),
                     kind=DAVIS_SKODJE, gamma=float(gamma))


def linear_model(matrix, names: Sequence[str] | None = None) -> Mechanism:
    """Linear test system ``dc/dt = matrix @ c``."""
    matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
    n = matrix.shape[0]
    names = names or [f"x{i + 1}" for i in range(n)]
    return Mechanism(name="linear", species=tuple(Species(s) for s in names), kind=LINEAR,
                     matrix=matrix)


_H2_REACTIONS = [
    # reactants, products, k+, k-
    ({"H2": 1}, {"H": 2}, 2.0, 216.0),
    ({"O2": 1}, {"O": 2}, 1.0, 337.5),
    ({"H2O": 1}, {"H": 1, "OH": 1}, 1.0, 1400.0),
    ({"H2": 1, "O": 1}, {"H": 1, "OH": 1}, 1000.0, 10800.0),
    ({"O2": 1, "H": 1}, {"O": 1, "OH": 1}, 1000.0, 33750.0),
    ({"H2": 1, "O": 1}, {"H2O": 1}, 100.0, 0.7714),
]


def h2_6species(C1: float = 2.0, C2: float = 1.0) -> Mechanism:
    species = (Species("H2", {"H": 2}), Species("O2", {"O": 2}), Species("H2O", {"H": 2, "O": 1}),
               Species("H", {"H": 1}), Species("O", {"O": 1}), Species("OH", {"H": 1, "O": 1}))
    idx = {s.name: i for i, s in enumerate(species)}
    reactions = []
    for lhs, rhs_, kf, kb in _H2_REACTIONS:
        j = len(reactions)
        r = {idx[k]: v for k, v in lhs.items()}
        p = {idx[k]: v for k, v in rhs_.items()}
        reactions.append(Reaction(r, p, ArrheniusParams(kf), reversible_pair=j + 1))
        reactions.append(Reaction(p, r, ArrheniusParams(kb), reversible_pair=j))
    conservation = (ConservationRelation((2, 0, 2, 1, 0, 1), float(C1)),
                    ConservationRelation((0, 2, 1, 0, 1, 1), float(C2)))
    reference = None
    if (C1, C2) == (2.0, 1.0):
        reference = (1.0, 0.5, 0.0, 0.0, 0.0, 0.0)
    return Mechanism(name="h2-6species", species=species, reactions=tuple(reactions),
                     conservation=conservation, temperature=1000.0, reference=reference)


OZONE_EFFICIENCIES = {"O": 1.14, "O2": 0.40, "O3": 0.92}

_OZONE_REACTIONS = [
    ({"O": 2}, {"O2": 1}, True, 2.90e17, -1.0, 0.0),
    ({"O2": 1}, {"O": 2}, True, 6.81e18, -1.0, 496.0),
    ({"O3": 1}, {"O": 1, "O2": 1}, True, 9.50e14, 0.0, 95.0),
    ({"O": 1, "O2": 1}, {"O3": 1}, True, 3.32e13, 0.0, -4.9),
    ({"O": 1, "O3": 1}, {"O2": 2}, False, 5.20e12, 0.0, 17.4),
    ({"O2": 2}, {"O": 1, "O3": 1}, False, 4.27e12, 0.0, 413.9),
]


def ozone(temperature: float = 1000.0, C: float = 1.0) -> Mechanism:
    species = (Species("O", {"O": 1}), Species("O2", {"O": 2}), Species("O3", {"O": 3}))
    idx = {s.name: i for i, s in enumerate(species)}
    eff = {idx[k]: v for k, v in OZONE_EFFICIENCIES.items()}
    reactions = []
    for j, (lhs, rhs_, third, A, b, Ea) in enumerate(_OZONE_REACTIONS):
        pair = j + 1 if j % 2 == 0 else j - 1
        reactions.append(Reaction({idx[k]: v for k, v in lhs.items()},
                                  {idx[k]: v for k, v in rhs_.items()},
                                  ArrheniusParams(A, b, Ea), eff if third else None, pair))
    return Mechanism(name="ozone", species=species, reactions=tuple(reactions),
                     conservation=(ConservationRelation((1, 2, 3), float(C)),),
                     temperature=float(temperature), reference=(0.0, float(C) / 2.0, 0.0))


BUILTINS = {
    DAVIS_SKODJE: "Davis-Skodje model (y1, y2); parameter gamma > 1, default 6",
    "h2-6species": "H2/O2 six-species test mechanism, 12 irreversible reactions; C1=2, C2=1",
    "ozone": "O/O2/O3 decomposition with Arrhenius kinetics; T default 1000 K, C=1",
}


def builtin(name: str, gamma: float | None = None, temperature: float | None = None,
            constants: Sequence[float] | None = None) -> Mechanism:
    if name == DAVIS_SKODJE:
        return davis_skodje(6.0 if gamma is None else gamma)
    if name == "h2-6species":
        m = h2_6species()
    elif name == "ozone":
        m = ozone(1000.0 if temperature is None else temperature)
    else:
        raise KeyError(f"unknown built-in mechanism {name!r}; choose from {sorted(BUILTINS)}")
    if temperature is not None and name != "ozone":
        m = m.with_temperature(temperature)
    if constants is not None:
        m = m.with_constants(constants)
    return m


# ------------------------------------------------------------ JSON ingestion

def integer_left_null_space(S: np.ndarray) -> list:
    """Integer basis of ``{v : v @ S == 0}`` by exact elimination over the rationals."""
    n, r = S.shape
    rows = [[Fraction(int(round(S[i, j]))) for i in range(n)] for j in range(r)]
    if np.any(S != np.round(S)):
        raise MechanismError("stoichiometric coefficients must be integers")
    pivots = []
    row = 0
    for col in range(n):
        piv = next((k for k in range(row, len(rows)) if rows[k][col] != 0), None)
        if piv is None:
            continue
        rows[row], rows[piv] = rows[piv], rows[row]
        p = rows[row][col]
        rows[row] = [x / p for x in rows[row]]
        for k in range(len(rows)):
            if k != row and rows[k][col] != 0:
                fct = rows[k][col]
                rows[k] = [a - fct * b for a, b in zip(rows[k], rows[row])]
        pivots.append(col)
        row += 1
        if row == len(rows):
            break
    basis = []
    for free in (c for c in range(n) if c not in pivots):
        v = [Fraction(0)] * n
        v[free] = Fraction(1)
        for k, pc in enumerate(pivots):
            v[pc] = -rows[k][free]
        lcm = 1
        for x in v:
            lcm = lcm * x.denominator // math.gcd(lcm, x.denominator)
        ints = [int(x * lcm) for x in v]
        g = 0
        for x in ints:
            g = math.gcd(g, x)
        ints = [x // g for x in ints]
        if next(x for x in ints if x != 0) < 0:
            ints = [-x for x in ints]
        basis.append(tuple(ints))
    return basis


def mechanism_from_dict(doc: Mapping) -> Mechanism:
    species = tuple(Species(s["name"], dict(s.get("elements", {}))) for s in doc["species"])
    idx = {s.name: i for i, s in enumerate(species)}
    n = len(species)

    def side(d):
        try:
            return {idx[k]: int(v) for k, v in d.items()}
        except KeyError as exc:
            raise MechanismError(f"reaction references unknown species {exc}") from None

    reactions = []
    for r in doc["reactions"]:
        tb = r.get("third_body")
        if tb is True:
            tb = {}
        if tb is not None and tb is not False:
            tb = {idx[k]: float(v) for k, v in tb.items()}
        else:
            tb = None
        reactions.append(Reaction(side(r["reactants"]), side(r["products"]),
                                  ArrheniusParams(float(r["A"]), float(r.get("b", 0.0)),
                                                  float(r.get("Ea", 0.0))), tb))
    if "conservation" in doc:
        conservation = tuple(ConservationRelation(tuple(rel["coefficients"]), float(rel["constant"]))
                             for rel in doc["conservation"])
    else:
        S = np.zeros((n, len(reactions)))
        for j, r in enumerate(reactions):
            for i, nu in r.reactants.items():
                S[i, j] -= nu
            for i, nu in r.products.items():
                S[i, j] += nu
        basis = integer_left_null_space(S)
        comp = doc.get("composition")
        if comp is not None:
            cvec = np.array([float(comp.get(s.name, 0.0)) for s in species])
            consts = [float(np.dot(v, cvec)) for v in basis]
        else:
            consts = [1.0] * len(basis)
        conservation = tuple(ConservationRelation(v, k) for v, k in zip(basis, consts))
    return Mechanism(name=doc.get("name", "custom"), species=species, reactions=tuple(reactions),
                     conservation=conservation, temperature=float(doc.get("temperature", 298.15)))


def load_mechanism(spec: str, gamma: float | None = None, temperature: float | None = None,
                   constants: Sequence[float] | None = None) -> Mechanism:
    """Resolve a built-in name or a path to a JSON mechanism document."""
    if spec in BUILTINS:
        return builtin(spec, gamma=gamma, temperature=temperature, constants=constants)
    path = Path(spec)
    if not path.exists():
        raise KeyError(f"{spec!r} is neither a built-in mechanism ({', '.join(BUILTINS)}) nor a file")
    m = mechanism_from_dict(json.loads(path.read_text()))
    if temperature is not None:
        m = m.with_temperature(temperature)
    if constants is not None:
        m = m.with_constants(constants)
    return m

#  Authors: The odecheck contributors
#
#  License: 3-clause BSD, <LICENSE>
"""
ODE systems, initial value problems and explicit Runge-Kutta solvers.

Fixed-step solvers (midpoint, classic RK4) take exactly K equal steps between consecutive output times. The adaptive
solver is the Dormand-Prince 4(5) pair, started with h0 = 0.1 on every solve and clamped so that it lands exactly on
every output time.

Every solver works unchanged on `Dual` states: running a fixed-step recursion over duals is the direct method (exact
derivative of the discrete solver output). For RK45 the error norm then also covers every tangent component, so the
step sequence is the one the controller would choose for the forward sensitivity system of dimension D(P+1).
"""
import logging
import re

import numpy as np

from odecheck import dual
from odecheck.dual import Dual
from odecheck.utils import DomainError

try:
    # noinspection PyUnresolvedReferences
    from typing import Callable, Sequence, Optional, Union, Tuple
except ImportError:
    pass

logger = logging.getLogger(__name__)

MIDPOINT = 'midpoint'
RK4 = 'rk4'
RK45 = 'rk45'
FIXED_STEP_METHODS = (MIDPOINT, RK4)
ALL_METHODS = (MIDPOINT, RK4, RK45)

DEFAULT_MAX_STEPS = 100000
DEFAULT_H0 = 0.1


class SolverError(Exception):
    """Base class of the errors raised when a numerical solve does not succeed. `stats` holds the work done."""
    stats = None


class SolverFailure(SolverError):
    """Raised when a non-finite value appears in a stage or in the state."""
    def __init__(self, t, what='state'):
        self.t = t
        self.what = what

    def __str__(self):
        return "Non-finite %s encountered at t=%r" % (self.what, self.t)


class MaxStepsExceeded(SolverError):
    """Raised when the adaptive solver exhausts its step budget between two output times."""
    def __init__(self, t_start, t_end, max_steps):
        self.t_start = t_start
        self.t_end = t_end
        self.max_steps = max_steps

    def __str__(self):
        return "Maximum number of steps (%s) exceeded while integrating from t=%r to t=%r" \
               % (self.max_steps, self.t_start, self.t_end)


class InvalidIvp(ValueError):
    pass


class SolverStats(object):
    """Counters of a single solve."""
    __slots__ = ('steps', 'rejected', 'rhs_evals')

    def __init__(self, steps=0, rejected=0, rhs_evals=0):
        self.steps = steps
        self.rejected = rejected
        self.rhs_evals = rhs_evals

    def __repr__(self):
        return "SolverStats(steps=%s, rejected=%s, rhs_evals=%s)" % (self.steps, self.rejected, self.rhs_evals)

    def __eq__(self, other):
        return isinstance(other, SolverStats) \
            and (self.steps, self.rejected, self.rhs_evals) == (other.steps, other.rejected, other.rhs_evals)


class OdeSystem(object):
    """
    An ODE right-hand side `rhs(y, t, psi)` of dimension `dimension`.

    `rhs` must be deterministic and written with plain arithmetic (no in-place numpy assignment) so that it can be
    evaluated over `Dual` states and parameters. It may return any sequence of D scalars.
    """
    __slots__ = ('rhs', 'dimension', 'name')

    def __init__(self,
                 rhs,        # type: Callable
                 dimension,  # type: int
                 name=None   # type: str
                 ):
        if dimension < 1:
            raise ValueError("dimension should be a positive integer, found %r" % dimension)
        self.rhs = rhs
        self.dimension = dimension
        self.name = name or getattr(rhs, '__name__', 'ode')

    def evaluate(self, y, t, psi, stats=None):
        """
        Evaluates the rhs and stacks the result into an array (or Dual). Increments `stats.rhs_evals` when provided.
        """
        out = self.rhs(y, t, psi)
        if not isinstance(out, (np.ndarray, Dual)):
            out = dual.stack(out)
        if len(out) != self.dimension:
            raise ValueError("rhs '%s' returned %s components, expected %s" % (self.name, len(out), self.dimension))
        if stats is not None:
            stats.rhs_evals += 1
        return out

    def __repr__(self):
        return "OdeSystem(%s, D=%s)" % (self.name, self.dimension)


class Ivp(object):
    """
    An initial value problem: `system`, initial time `t0`, initial state `y0` (an array or a callable of `psi`),
    output times and parameters `psi`.
    """
    __slots__ = ('system', 't0', 'y0', 'output_times', 'psi')

    def __init__(self,
                 system,        # type: OdeSystem
                 t0,            # type: float
                 y0,            # type: Union[Sequence[float], Callable]
                 output_times,  # type: Sequence[float]
                 psi=()         # type: Union[Sequence[float], Dual]
                 ):
        output_times = np.asarray(output_times, dtype=float)
        if output_times.ndim != 1 or len(output_times) == 0:
            raise InvalidIvp("output_times should be a non-empty 1-D sequence")
        if np.any(np.diff(output_times) <= 0):
            raise InvalidIvp("output_times should be strictly increasing")
        if output_times[0] < t0:
            raise InvalidIvp("output times should all be >= t0=%r, found %r" % (t0, output_times[0]))
        self.system = system
        self.t0 = float(t0)
        self.y0 = y0
        self.output_times = output_times
        self.psi = psi if isinstance(psi, Dual) else np.asarray(psi, dtype=float)

    def initial_state(self, psi=None):
        """Returns y0, evaluated at `psi` (default: own psi) if it is a function of the parameters."""
        if callable(self.y0):
            y0 = self.y0(self.psi if psi is None else psi)
        else:
            y0 = self.y0
        if not isinstance(y0, (np.ndarray, Dual)):
            y0 = dual.stack(y0)
        if len(y0) != self.system.dimension:
            raise InvalidIvp("y0 has %s components, expected %s" % (len(y0), self.system.dimension))
        return y0

    def replace(self, **kwargs):
        """Returns a copy of this ivp with some fields replaced."""
        fields = dict(system=self.system, t0=self.t0, y0=self.y0, output_times=self.output_times, psi=self.psi)
        fields.update(kwargs)
        return Ivp(**fields)


_SPEC_PATTERN = re.compile(r"^\s*(midpoint|rk45|rk4)\s*\(([^)]*)\)\s*$", re.IGNORECASE)


class SolverSpec(object):
    """
    A solving method with its accuracy controls: `steps` (K, fixed-step methods) or `tol_abs`/`tol_rel` (rk45).

    The textual form is `midpoint(K)`, `rk4(K)`, `rk45(tol)` or `rk45(tol_abs,tol_rel)`:

    >>> SolverSpec.parse('rk45(1e-3)')
    SolverSpec('rk45(0.001)')
    >>> str(SolverSpec.rk4(2))
    'rk4(2)'
    """
    __slots__ = ('method', 'steps', 'tol_abs', 'tol_rel', 'max_steps', 'h0')

    def __init__(self, method, steps=None, tol_abs=None, tol_rel=None, max_steps=DEFAULT_MAX_STEPS, h0=DEFAULT_H0):
        method = method.lower()
        if method not in ALL_METHODS:
            raise ValueError("Unknown solver method %r, should be one of %s" % (method, ALL_METHODS))
        if method in FIXED_STEP_METHODS:
            if steps is None or int(steps) != steps or steps < 1:
                raise ValueError("%s needs a positive integer number of steps, found %r" % (method, steps))
            steps = int(steps)
            tol_abs = tol_rel = None
        else:
            if tol_abs is None or not tol_abs > 0:
                raise ValueError("rk45 needs tol_abs > 0, found %r" % tol_abs)
            if tol_rel is None:
                tol_rel = tol_abs
            if not tol_rel >= 0:
                raise ValueError("rk45 needs tol_rel >= 0, found %r" % tol_rel)
            if max_steps < 1 or not h0 > 0:
                raise ValueError("rk45 needs max_steps >= 1 and h0 > 0")
            tol_abs, tol_rel, steps = float(tol_abs), float(tol_rel), None
        self.method = method
        self.steps = steps
        self.tol_abs = tol_abs
        self.tol_rel = tol_rel
        self.max_steps = int(max_steps)
        self.h0 = float(h0)

    @classmethod
    def midpoint(cls, steps):
        return cls(MIDPOINT, steps=steps)

    @classmethod
    def rk4(cls, steps):
        return cls(RK4, steps=steps)

    @classmethod
    def rk45(cls, tol_abs, tol_rel=None, max_steps=DEFAULT_MAX_STEPS, h0=DEFAULT_H0):
        return cls(RK45, tol_abs=tol_abs, tol_rel=tol_rel, max_steps=max_steps, h0=h0)

    @classmethod
    def parse(cls, text):
        # type: (str) -> SolverSpec
        """Parses the textual form of a spec (see class docstring)."""
        if isinstance(text, SolverSpec):
            return text
        match = _SPEC_PATTERN.match(text)
        if match is None:
            raise ValueError("Invalid solver spec %r, expected e.g. 'rk45(1e-3)', 'rk4(2)' or 'midpoint(3)'" % text)
        method, args = match.group(1).lower(), [a.strip() for a in match.group(2).split(',')]
        try:
            if method in FIXED_STEP_METHODS:
                if len(args) != 1:
                    raise ValueError()
                return cls(method, steps=int(args[0]))
            if len(args) not in (1, 2):
                raise ValueError()
            return cls(method, tol_abs=float(args[0]), tol_rel=float(args[-1]))
        except ValueError as e:
            raise ValueError("Invalid solver spec %r: %s" % (text, e))

    @property
    def is_adaptive(self):
        return self.method == RK45

    @property
    def family(self):
        """Specs of the same family are comparable by accuracy."""
        return self.method

    def is_more_accurate_than(self, other):
        # type: (SolverSpec) -> bool
        """
        True iff both specs are of the same family and this one is strictly more accurate: more steps, or tolerances
        no larger and at least one strictly smaller.
        """
        if self.family != other.family:
            return False
        if self.is_adaptive:
            return (self.tol_abs <= other.tol_abs and self.tol_rel <= other.tol_rel
                    and (self.tol_abs, self.tol_rel) != (other.tol_abs, other.tol_rel))
        return self.steps > other.steps

    def refined(self, i=1, floor=1e-12):
        """
        Returns the i-th default refinement of this spec: tolerances divided by 10**i (never below `floor`), or
        steps multiplied by 2**i.
        """
        if self.is_adaptive:
            return SolverSpec.rk45(max(self.tol_abs / 10 ** i, floor), max(self.tol_rel / 10 ** i, floor),
                                   max_steps=self.max_steps, h0=self.h0)
        return SolverSpec(self.method, steps=self.steps * 2 ** i)

    def _key(self):
        return self.method, self.steps, self.tol_abs, self.tol_rel, self.max_steps, self.h0

    def __eq__(self, other):
        return isinstance(other, SolverSpec) and self._key() == other._key()

    def __ne__(self, other):
        return not self == other

    def __hash__(self):
        return hash(self._key())

    def __str__(self):
        if self.is_adaptive:
            if self.tol_rel == self.tol_abs:
                return "rk45(%r)" % self.tol_abs
            return "rk45(%r,%r)" % (self.tol_abs, self.tol_rel)
        return "%s(%d)" % (self.method, self.steps)

    def __repr__(self):
        return "SolverSpec('%s')" % self


class OdeSolution(object):
    """
    Solver output on the output time grid: `states` (N x D float array, row n is the state at output time n),
    optional `sensitivities` (N x D x P, derivatives with respect to the seeded inputs) and `stats`.
    """
    __slots__ = ('times', 'states', 'sensitivities', 'stats', 'spec')

    def __init__(self, times, states, stats, spec=None, sensitivities=None):
        self.times = times
        self.states = states
        self.sensitivities = sensitivities
        self.stats = stats
        self.spec = spec

    @classmethod
    def from_rows(cls, times, rows, stats, spec=None):
        stacked = dual.stack(rows)
        if isinstance(stacked, Dual):
            return cls(times, stacked.val, stats, spec=spec, sensitivities=np.array(stacked.eps))
        return cls(times, stacked, stats, spec=spec)

    @property
    def variables(self):
        """The states as a Dual when sensitivities are available (for differentiable post-processing), else floats."""
        if self.sensitivities is None:
            return self.states
        return Dual(self.states, self.sensitivities)


class ButcherTableau(object):
    """Coefficients of an explicit RK method, optionally with an embedded lower-order weight vector `b_low`."""
    __slots__ = ('name', 'a', 'b', 'c', 'b_low')

    def __init__(self, name, a, b, c, b_low=None):
        self.name = name
        self.a = a
        self.b = b
        self.c = c
        self.b_low = b_low

    @property
    def stages(self):
        return len(self.c)


MIDPOINT_TABLEAU = ButcherTableau(MIDPOINT, a=[[], [0.5]], b=[0.0, 1.0], c=[0.0, 0.5])

RK4_TABLEAU = ButcherTableau(RK4,
                             a=[[], [0.5], [0.0, 0.5], [0.0, 0.0, 1.0]],
                             b=[1 / 6, 1 / 3, 1 / 3, 1 / 6],
                             c=[0.0, 0.5, 0.5, 1.0])

DOPRI5_TABLEAU = ButcherTableau(
    'dopri5',
    a=[[],
       [1 / 5],
       [3 / 40, 9 / 40],
       [44 / 45, -56 / 15, 32 / 9],
       [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
       [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
       [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84]],
    b=[35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0],
    c=[0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0],
    b_low=[5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])

_TABLEAUS = {MIDPOINT: MIDPOINT_TABLEAU, RK4: RK4_TABLEAU}


def _weighted_sum(weights, ks):
    acc = None
    for w, k in zip(weights, ks):
        if w != 0.0:
            term = k * w
            acc = term if acc is None else acc + term
    return acc


def _stages(tableau, system, y, t, h, psi, stats):
    """Evaluates the R stage derivatives k_1..k_R of one step."""
    ks = []
    for r in range(tableau.stages):
        incr = _weighted_sum(tableau.a[r], ks)
        y_r = y if incr is None else y + h * incr
        k = system.evaluate(y_r, t + tableau.c[r] * h, psi, stats)
        if not dual.isfinite(k):
            raise SolverFailure(t + tableau.c[r] * h, what='stage value')
        ks.append(k)
    return ks


def step_explicit_rk(y,           # type: Union[np.ndarray, Dual]
                     t,           # type: float
                     h,           # type: float
                     method,      # type: str
                     system,      # type: OdeSystem
                     psi,         # type: Union[np.ndarray, Dual]
                     stats=None   # type: SolverStats
                     ):
    """
    Takes one explicit RK step of size `h` with `method` ('midpoint' or 'rk4'), returning y + h * sum_r(b_r k_r).

    :param stats: optional counters, `rhs_evals` is incremented by the number of stages
    :return: the new state
    """
    tableau = _TABLEAUS[method] if not isinstance(method, ButcherTableau) else method
    if not h > 0:
        raise ValueError("step size should be positive, found %r" % h)
    ks = _stages(tableau, system, y, t, h, psi, stats)
    y_next = y + h * _weighted_sum(tableau.b, ks)
    if not dual.isfinite(y_next):
        raise SolverFailure(t + h)
    return y_next


def solve_fixed(ivp,   # type: Ivp
                method,  # type: str
                steps    # type: int
                ):
    # type: (...) -> OdeSolution
    """
    Solves `ivp` with `steps` equal steps of `method` between each pair of consecutive output times (the first pair
    being t0 and the first output time). States are recorded exactly at the output times.
    """
    if steps < 1:
        raise ValueError("steps should be >= 1, found %r" % steps)
    tableau = _TABLEAUS[method]
    stats = SolverStats()
    psi = ivp.psi
    y = ivp.initial_state()
    t_prev = ivp.t0
    rows = []
    try:
        for t_next in ivp.output_times:
            if t_next > t_prev:
                h = (t_next - t_prev) / steps
                for j in range(steps):
                    y = step_explicit_rk(y, t_prev + j * h, h, tableau, ivp.system, psi, stats)
                    stats.steps += 1
            rows.append(y)
            t_prev = t_next
    except SolverError as e:
        e.stats = stats
        raise
    return OdeSolution.from_rows(ivp.output_times, rows, stats, spec=SolverSpec(method, steps=steps))


def rk45_error_norm(y_high, y_low, y_cur, f_cur, h, tol_abs, tol_rel):
    """
    Maximum relative estimated local truncation error

        v = max_d |y_high_d - y_low_d| / (tol_abs + tol_rel * (|y_cur_d| + h * |f_cur_d|))

    Inputs may be Duals, in which case every tangent component takes part in the maximum.

    :return: v >= 0
    """
    p = max([x.n_tangents for x in (y_high, y_low, y_cur, f_cur) if isinstance(x, Dual)] or [0])
    diff = np.abs(dual.components(y_high, p) - dual.components(y_low, p))
    scale = tol_abs + tol_rel * (np.abs(dual.components(y_cur, p)) + h * np.abs(dual.components(f_cur, p)))
    if np.any(scale <= 0):
        raise DomainError("rk45 error scale (tol_abs=%r, tol_rel=%r)" % (tol_abs, tol_rel), np.min(scale))
    return float(np.max(diff / scale))


def rk45_adapt_step(v, h):
    """
    Step size controller. Returns `(accepted, h_next)`:

     - v > 1: rejected, h_next = h * max(0.9 * v**(-1/3), 1/5)
     - v < 0.5: accepted, h_next = h * min(0.9 * v**(-1/5), 5)
     - otherwise accepted, h_next = h

    >>> rk45_adapt_step(8.0, 1.0)
    (False, 0.45)
    """
    if v > 1:
        return False, float(h * max(0.9 / np.cbrt(v), 0.2))
    if v < 0.5:
        if v == 0:
            return True, float(h * 5.0)
        return True, float(h * min(0.9 * v ** -0.2, 5.0))
    return True, h


def _integrate_rk45(ivp, spec, stats):
    tableau = DOPRI5_TABLEAU
    system, psi = ivp.system, ivp.psi
    y = ivp.initial_state()
    t = ivp.t0
    h = spec.h0
    rows = []
    for t_out in ivp.output_times:
        t_start = t
        attempts = 0
        while t < t_out:
            if attempts >= spec.max_steps:
                raise MaxStepsExceeded(t_start, t_out, spec.max_steps)
            attempts += 1
            clamped = t + h >= t_out
            h_try = t_out - t if clamped else h
            ks = _stages(tableau, system, y, t, h_try, psi, stats)
            y_high = y + h_try * _weighted_sum(tableau.b, ks)
            y_low = y + h_try * _weighted_sum(tableau.b_low, ks)
            v = rk45_error_norm(y_high, y_low, y, ks[0], h_try, spec.tol_abs, spec.tol_rel)
            accepted, h_next = rk45_adapt_step(v, h_try)
            stats.steps += 1
            if not accepted:
                stats.rejected += 1
                h = h_next
                continue
            if not dual.isfinite(y_high):
                raise SolverFailure(t + h_try)
            y = y_high
            if clamped:
                # restore the working step size
                t = t_out
            else:
                t = t + h_try
                h = h_next
        rows.append(y)
    return rows


def solve_rk45(ivp,  # type: Ivp
               spec  # type: SolverSpec
               ):
    # type: (...) -> OdeSolution
    """
    Solves `ivp` with the Dormand-Prince 4(5) pair. The working step size starts at `spec.h0`; a step that would
    overshoot the next output time is shortened to land on it, and the pre-clamp step size is restored once it is
    accepted. The higher order solution advances the state. All 7 stages are evaluated on every attempted step.
    """
    if not spec.is_adaptive:
        raise ValueError("solve_rk45 needs a rk45 spec, found %s" % spec)
    stats = SolverStats()
    try:
        rows = _integrate_rk45(ivp, spec, stats)
    except SolverError as e:
        e.stats = stats
        raise
    return OdeSolution.from_rows(ivp.output_times, rows, stats, spec=spec)


def solve(ivp,  # type: Ivp
          spec  # type: SolverSpec
          ):
    # type: (...) -> OdeSolution
    """Solves `ivp` with the method described by `spec`."""
    if spec.is_adaptive:
        return solve_rk45(ivp, spec)
    return solve_fixed(ivp, spec.method, spec.steps)


def solve_with_sensitivities(ivp,            # type: Ivp
                             spec,           # type: SolverSpec
                             psi=None,       # type: Sequence[float]
                             dy0_dpsi=None   # type: np.ndarray
                             ):
    # type: (...) -> Tuple[OdeSolution, np.ndarray]
    """
    Solves `ivp` together with the sensitivities of the states with respect to the P parameters `psi`.

    The initial sensitivities are `dy0_dpsi` (D x P) when given. Otherwise they are obtained by differentiating y0
    when it is a function of `psi`, and are zero when it is a constant.

    :return: a tuple (solution, sensitivity matrix of shape N x D x P)
    """
    psi = dual.value(ivp.psi if psi is None else psi)
    n_params = len(psi)
    psi_d = Dual.seed(psi)
    d = ivp.system.dimension
    if dy0_dpsi is not None:
        y0 = Dual(dual.value(ivp.initial_state(psi)), np.asarray(dy0_dpsi, dtype=float).reshape(d, n_params))
    else:
        y0 = ivp.initial_state(psi_d)
        if not isinstance(y0, Dual):
            y0 = Dual(y0, np.zeros((d, n_params)))
    sol = solve(ivp.replace(psi=psi_d, y0=y0), spec)
    return sol, sol.sensitivities

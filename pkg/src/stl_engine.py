"""
Signal temporal logic over sampled (x, y, v) trajectories.

Formula AST (affine predicates, conjunction, disjunction, bounded always and
eventually), a text grammar with parser and canonical printer, exact recursive
robustness, and smooth differentiable robustness in torch.

Grammar (ASCII):
    formula   := disj
    disj      := conj ('|' conj)*
    conj      := unary ('&' unary)*
    unary     := ('G' | 'F') '[' INT ',' INT ']' '(' formula ')'
               | '(' formula ')'
               | affine '>' '0'
    affine    := ['-'] term (('+' | '-') term)*
    term      := NUMBER ['*' FEATURE] | FEATURE
    FEATURE   := 'x' | 'y' | 'v'

Example:
    >>> phi = parse_formula("G[30,31](0.4111*x - 0.3976*y + 3.8745 > 0)")
    >>> robustness(np.zeros((67, 3)), phi)
    3.8745
"""

import logging
import math
import re
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from torch import nn

from src.errors import InvalidInputError, StlSyntaxError, StlWindowError
from src.signal_core import Trajectory

logger = logging.getLogger(__name__)

FEATURES = ("x", "y", "v")


@dataclass(frozen=True)
class Predicate:
    """a^T s - b > 0."""
    a: Tuple[float, ...]
    b: float

    def __post_init__(self):
        object.__setattr__(self, "a", tuple(float(v) for v in self.a))
        object.__setattr__(self, "b", float(self.b))
        if not self.a:
            raise InvalidInputError("predicate needs at least one coefficient")
        if not all(math.isfinite(v) for v in self.a + (self.b,)):
            raise InvalidInputError("predicate coefficients must be finite")


@dataclass(frozen=True)
class And:
    children: Tuple["Formula", ...]

    def __post_init__(self):
        object.__setattr__(self, "children", tuple(self.children))
        if len(self.children) < 2:
            raise InvalidInputError("And needs at least two children; use conjunction() to collapse")


@dataclass(frozen=True)
class Or:
    children: Tuple["Formula", ...]

    def __post_init__(self):
        object.__setattr__(self, "children", tuple(self.children))
        if len(self.children) < 2:
            raise InvalidInputError("Or needs at least two children; use disjunction() to collapse")


def _check_window(k1, k2):
    if isinstance(k1, bool) or isinstance(k2, bool) or int(k1) != k1 or int(k2) != k2:
        raise InvalidInputError(f"window bounds must be integers, got [{k1}, {k2}]")
    if not 0 <= k1 <= k2:
        raise InvalidInputError(f"window bounds must satisfy 0 <= k1 <= k2, got [{k1}, {k2}]")


@dataclass(frozen=True)
class Always:
    k1: int
    k2: int
    child: "Formula"

    def __post_init__(self):
        _check_window(self.k1, self.k2)
        object.__setattr__(self, "k1", int(self.k1))
        object.__setattr__(self, "k2", int(self.k2))


@dataclass(frozen=True)
class Eventually:
    k1: int
    k2: int
    child: "Formula"

    def __post_init__(self):
        _check_window(self.k1, self.k2)
        object.__setattr__(self, "k1", int(self.k1))
        object.__setattr__(self, "k2", int(self.k2))


Formula = Union[Predicate, And, Or, Always, Eventually]


def conjunction(*children: Formula) -> Formula:
    """And of the children, or the single child itself."""
    if not children:
        raise InvalidInputError("conjunction needs at least one child")
    return children[0] if len(children) == 1 else And(tuple(children))


def disjunction(*children: Formula) -> Formula:
    """Or of the children, or the single child itself."""
    if not children:
        raise InvalidInputError("disjunction needs at least one child")
    return children[0] if len(children) == 1 else Or(tuple(children))


def negation(phi: Formula) -> Formula:
    """Negation pushed to the predicates; robustness changes sign exactly."""
    if isinstance(phi, Predicate):
        return Predicate(tuple(-c for c in phi.a), -phi.b)
    if isinstance(phi, And):
        return Or(tuple(negation(c) for c in phi.children))
    if isinstance(phi, Or):
        return And(tuple(negation(c) for c in phi.children))
    if isinstance(phi, Always):
        return Eventually(phi.k1, phi.k2, negation(phi.child))
    return Always(phi.k1, phi.k2, negation(phi.child))


def horizon(phi: Formula) -> int:
    """Number of slots past k the formula looks at."""
    if isinstance(phi, Predicate):
        return 0
    if isinstance(phi, (And, Or)):
        return max(horizon(c) for c in phi.children)
    return phi.k2 + horizon(phi.child)


def predicates(phi: Formula) -> List[Predicate]:
    if isinstance(phi, Predicate):
        return [phi]
    if isinstance(phi, (And, Or)):
        return [p for c in phi.children for p in predicates(c)]
    return predicates(phi.child)


# --------------------------------------------------------------------------- exact semantics

def _states(traj) -> np.ndarray:
    states = traj.states if isinstance(traj, Trajectory) else np.asarray(traj, dtype=float)
    if states.ndim != 2:
        raise InvalidInputError(f"trajectory must be a (K, d) array, got shape {states.shape}")
    return states


def _check_fits(phi: Formula, k: int, K: int, path: str):
    if isinstance(phi, Predicate):
        if not 0 <= k < K:
            raise StlWindowError(f"slot {k} outside trajectory of length {K}", path)
        return
    if isinstance(phi, (And, Or)):
        name = type(phi).__name__
        for i, child in enumerate(phi.children):
            _check_fits(child, k, K, f"{path}/{name}[{i}]")
        return
    name = "Always" if isinstance(phi, Always) else "Eventually"
    here = f"{path}/{name}[{phi.k1},{phi.k2}]"
    if k < 0 or k + phi.k2 > K - 1:
        raise StlWindowError(f"window [{k + phi.k1}, {k + phi.k2}] exceeds trajectory of length {K}", here)
    # child requirements grow with the slot, so the last window slot is the binding one
    _check_fits(phi.child, k + phi.k2, K, here)


def _trace(states: np.ndarray, phi: Formula) -> np.ndarray:
    """Robustness at every slot where the formula is defined."""
    if isinstance(phi, Predicate):
        if len(phi.a) != states.shape[1]:
            raise InvalidInputError(
                f"predicate dimension {len(phi.a)} does not match trajectory dimension {states.shape[1]}")
        return states @ np.asarray(phi.a) - phi.b
    if isinstance(phi, (And, Or)):
        traces = [_trace(states, c) for c in phi.children]
        length = min(len(t) for t in traces)
        stacked = np.stack([t[:length] for t in traces])
        return stacked.min(axis=0) if isinstance(phi, And) else stacked.max(axis=0)
    child = _trace(states, phi.child)
    length = len(child) - phi.k2
    if length <= 0:
        return np.empty(0)
    windows = np.lib.stride_tricks.sliding_window_view(child, phi.k2 - phi.k1 + 1)[phi.k1:phi.k1 + length]
    return windows.min(axis=1) if isinstance(phi, Always) else windows.max(axis=1)


def robustness(traj, phi: Formula, k: int = 0) -> float:
    """
    Exact robustness r(s_k, phi).

    Args:
        traj: Trajectory or (K, d) array
        phi: Formula
        k: Evaluation slot

    Returns:
        Robustness value; >= 0 means satisfied

    Raises:
        StlWindowError: If a temporal window leaves [0, K-1]; the message names the operator path
    """
    states = _states(traj)
    _check_fits(phi, k, states.shape[0], "root")
    return float(_trace(states, phi)[k])


def robustness_trace(traj, phi: Formula) -> np.ndarray:
    """Robustness at every slot k with k + horizon(phi) <= K - 1."""
    return _trace(_states(traj), phi)


def satisfies(traj, phi: Formula) -> bool:
    return robustness(traj, phi, 0) >= 0


def misclassification_rate(trajectories: Sequence, labels: Sequence[int], phi: Formula) -> float:
    """
    Fraction of samples where satisfaction disagrees with the in-class label.

    Args:
        trajectories: Trajectories or (K, d) arrays
        labels: 1 for in-class, 0 for out-of-class
        phi: Formula

    Returns:
        Misclassification rate in [0, 1]
    """
    if len(trajectories) == 0:
        raise InvalidInputError("misclassification rate of an empty dataset")
    if len(trajectories) != len(labels):
        raise InvalidInputError("trajectories and labels differ in length")
    wrong = sum(int(satisfies(t, phi)) != int(label) for t, label in zip(trajectories, labels))
    return wrong / len(trajectories)


# --------------------------------------------------------------------------- grammar

_TOKEN = re.compile(r"\s*(?:(?P<number>(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?)"
                    r"|(?P<ident>[A-Za-z_]\w*)|(?P<symbol>[\[\](),&|>+\-*]))")


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.tokens = []
        position = 0
        while position < len(text):
            if text[position:].strip() == "":
                break
            match = _TOKEN.match(text, position)
            if not match or match.end() == position:
                offset = position + len(text[position:]) - len(text[position:].lstrip())
                raise StlSyntaxError(f"unexpected character {text[offset]!r}", offset)
            kind = match.lastgroup
            start = match.start(kind)
            self.tokens.append((kind, match.group(kind), start))
            position = match.end()
        self.index = 0

    def peek(self, offset: int = 0):
        i = self.index + offset
        return self.tokens[i] if i < len(self.tokens) else ("end", "", len(self.text))

    def take(self, value: Optional[str] = None, kind: Optional[str] = None):
        token = self.peek()
        if (value is not None and token[1] != value) or (kind is not None and token[0] != kind):
            expected = repr(value) if value is not None else kind
            found = repr(token[1]) if token[0] != "end" else "end of input"
            raise StlSyntaxError(f"expected {expected}, found {found}", token[2])
        self.index += 1
        return token

    def parse(self) -> Formula:
        phi = self.disj()
        token = self.peek()
        if token[0] != "end":
            raise StlSyntaxError(f"unexpected {token[1]!r}", token[2])
        return phi

    def disj(self) -> Formula:
        children = [self.conj()]
        while self.peek()[1] == "|":
            self.take("|")
            children.append(self.conj())
        return disjunction(*children)

    def conj(self) -> Formula:
        children = [self.unary()]
        while self.peek()[1] == "&":
            self.take("&")
            children.append(self.unary())
        return conjunction(*children)

    def unary(self) -> Formula:
        kind, value, position = self.peek()
        if kind == "ident" and value in ("G", "F") and self.peek(1)[1] == "[":
            self.take()
            self.take("[")
            k1 = self.window_bound()
            self.take(",")
            k2 = self.window_bound()
            self.take("]")
            if k1 > k2:
                raise StlSyntaxError(f"reversed window [{k1},{k2}]", position)
            self.take("(")
            child = self.disj()
            self.take(")")
            return Always(k1, k2, child) if value == "G" else Eventually(k1, k2, child)
        if value == "(":
            self.take("(")
            phi = self.disj()
            self.take(")")
            return phi
        return self.predicate()

    def window_bound(self) -> int:
        kind, value, position = self.take(kind="number")
        if not re.fullmatch(r"\d+", value):
            raise StlSyntaxError(f"window bound {value!r} must be a non-negative integer", position)
        return int(value)

    def predicate(self) -> Predicate:
        coefficients = {name: 0.0 for name in FEATURES}
        constant = 0.0
        sign = 1.0
        if self.peek()[1] == "-":
            self.take("-")
            sign = -1.0
        while True:
            kind, value, position = self.peek()
            if kind == "number":
                self.take()
                number = sign * float(value)
                if self.peek()[1] == "*":
                    self.take("*")
                    name = self.feature()
                    coefficients[name] += number
                else:
                    constant += number
            elif kind == "ident":
                coefficients[self.feature()] += sign
            else:
                found = repr(value) if kind != "end" else "end of input"
                raise StlSyntaxError(f"expected a term, found {found}", position)
            operator = self.peek()[1]
            if operator in ("+", "-"):
                self.take()
                sign = 1.0 if operator == "+" else -1.0
                continue
            break
        self.take(">")
        kind, value, position = self.take(kind="number")
        if float(value) != 0.0:
            raise StlSyntaxError("predicates must compare against 0", position)
        return Predicate(tuple(coefficients[name] for name in FEATURES), -constant)

    def feature(self) -> str:
        kind, value, position = self.take(kind="ident")
        if value not in FEATURES:
            raise StlSyntaxError(f"unknown feature {value!r}; expected one of {', '.join(FEATURES)}", position)
        return value


def parse_formula(text: str) -> Formula:
    """Parse formula text; raises StlSyntaxError with the character position."""
    return _Parser(text).parse()


def _format_number(value: float) -> str:
    return repr(float(value))


def _format_predicate(phi: Predicate) -> str:
    if len(phi.a) != len(FEATURES):
        raise InvalidInputError(f"only {len(FEATURES)}-feature predicates have a text form")
    terms = [(c, name) for c, name in zip(phi.a, FEATURES) if c != 0.0]
    constant = -phi.b
    text = ""
    for c, name in terms:
        if not text:
            text = f"{_format_number(c)}*{name}"
        else:
            text += f" {'-' if c < 0 else '+'} {_format_number(abs(c))}*{name}"
    if constant != 0.0 or not text:
        constant = 0.0 if constant == 0.0 else constant
        if not text:
            text = _format_number(constant)
        else:
            text += f" {'-' if constant < 0 else '+'} {_format_number(abs(constant))}"
    return f"{text} > 0"


def format_formula(phi: Formula) -> str:
    """Canonical text of a formula; parse_formula(format_formula(phi)) == phi."""
    if isinstance(phi, Predicate):
        return _format_predicate(phi)
    if isinstance(phi, (And, Or)):
        joiner = " & " if isinstance(phi, And) else " | "
        parts = []
        for child in phi.children:
            text = format_formula(child)
            parts.append(f"({text})" if isinstance(child, (And, Or)) else text)
        return joiner.join(parts)
    op = "G" if isinstance(phi, Always) else "F"
    return f"{op}[{phi.k1},{phi.k2}]({format_formula(phi.child)})"


# --------------------------------------------------------------------------- smooth semantics

_NEG_LARGE = -1e30


def soft_max(values: torch.Tensor, beta: float, weights: Optional[torch.Tensor] = None, dim: int = -1) -> torch.Tensor:
    """
    Averaged max: sum_i w_i x_i with w_i proportional to weight_i * exp(beta x_i).

    Entries with zero weight are excluded without producing NaN gradients.
    """
    if weights is None:
        weights = torch.ones_like(values)
    weights = torch.broadcast_to(weights, values.shape)
    active = weights.detach() > 0
    masked = torch.where(active, values, torch.full_like(values, _NEG_LARGE))
    peak = masked.detach().amax(dim=dim, keepdim=True)
    peak = torch.where(peak > _NEG_LARGE / 2, peak, torch.zeros_like(peak))
    exponent = torch.where(active, beta * (values - peak), torch.full_like(values, _NEG_LARGE))
    scores = weights * torch.exp(exponent)
    total = scores.sum(dim=dim).clamp_min(1e-300 if values.dtype == torch.float64 else 1e-30)
    return (scores * values).sum(dim=dim) / total


def soft_min(values: torch.Tensor, beta: float, weights: Optional[torch.Tensor] = None, dim: int = -1) -> torch.Tensor:
    return -soft_max(-values, beta, weights, dim)


def time_window_weights(length: int, k1: torch.Tensor, k2: torch.Tensor, eta: float,
                        offset: int = 0, dtype=torch.float64) -> torch.Tensor:
    """
    Soft window indicator over slots n = 0..length-1 relative to offset.

    T(n) = (1/eta) min(relu(n - (k1 - eta)) - relu(n - k1), relu(-n + k2 + eta) - relu(-n + k2)),
    which is 1 inside [k1, k2] and 0 outside [k1 - eta, k2 + eta] for integer n.
    """
    k1 = torch.as_tensor(k1, dtype=dtype)
    k2 = torch.as_tensor(k2, dtype=dtype)
    n = torch.arange(length, dtype=dtype) - offset
    rise = torch.relu(n - (k1 - eta)) - torch.relu(n - k1)
    fall = torch.relu(-n + (k2 + eta)) - torch.relu(-n + k2)
    return torch.minimum(rise, fall) / eta


def ml_draw(p: torch.Tensor, mode: str = "straight_through") -> torch.Tensor:
    """
    Maximum-likelihood draw of a selector: 1 when p >= 0.5, else 0.

    'straight_through' passes the gradient to p; 'relaxed' returns p itself.
    """
    if mode == "relaxed":
        return p
    if mode != "straight_through":
        raise InvalidInputError(f"selector mode must be 'relaxed' or 'straight_through', got {mode!r}")
    hard = (p.detach() >= 0.5).to(p.dtype)
    return hard + p - p.detach()


def boolean_unit(values: torch.Tensor, beta: float, p_kappa: torch.Tensor, p_children: torch.Tensor,
                 mode: str = "straight_through") -> torch.Tensor:
    """
    Learnable Boolean operator over the last dimension.

    kappa = 1 selects disjunction, kappa = 0 conjunction; child i takes part when
    its selector draws 1.
    """
    kappa = ml_draw(p_kappa, mode)
    include = ml_draw(p_children, mode)
    disjunctive = soft_max(values, beta, include)
    conjunctive = soft_min(values, beta, include)
    return kappa * disjunctive + (1 - kappa) * conjunctive


def temporal_unit(trace: torch.Tensor, k1: torch.Tensor, k2: torch.Tensor, eta: float, beta: float,
                  p_rho: torch.Tensor, k: int = 0, mode: str = "straight_through") -> torch.Tensor:
    """
    Learnable temporal operator at slot k: rho = 1 selects eventually, rho = 0 always.

    trace has the slots on its last dimension.
    """
    weights = time_window_weights(trace.shape[-1], k1, k2, eta, offset=k, dtype=trace.dtype)
    rho = ml_draw(p_rho, mode)
    eventually = soft_max(trace, beta, weights)
    always = soft_min(trace, beta, weights)
    return rho * eventually + (1 - rho) * always


class SmoothFormula(nn.Module):
    """
    Differentiable robustness of a fixed formula structure.

    Predicate coefficients and window bounds become parameters; every max/min is
    replaced by the averaged max and windows by the soft indicator. Parameters are
    keyed by the node's child-index path, so a subformula reused at two places of
    the tree gets two independent sets.
    """

    def __init__(self, phi: Formula, eta: float = 0.1, dtype=torch.float64):
        super().__init__()
        self.structure = phi
        self.eta = eta
        self.predicate_weights = nn.ParameterList()
        self.predicate_biases = nn.ParameterList()
        self.windows = nn.ParameterList()
        self._slots: Dict[Tuple[int, ...], int] = {}
        self._register(phi, (), dtype)

    def _register(self, phi: Formula, path: Tuple[int, ...], dtype):
        if isinstance(phi, Predicate):
            self._slots[path] = len(self.predicate_weights)
            self.predicate_weights.append(nn.Parameter(torch.tensor(phi.a, dtype=dtype)))
            self.predicate_biases.append(nn.Parameter(torch.tensor(phi.b, dtype=dtype)))
        elif isinstance(phi, (And, Or)):
            for i, child in enumerate(phi.children):
                self._register(child, path + (i,), dtype)
        else:
            self._slots[path] = len(self.windows)
            self.windows.append(nn.Parameter(torch.tensor([float(phi.k1), float(phi.k2)], dtype=dtype)))
            self._register(phi.child, path + (0,), dtype)

    def slot(self, path: Sequence[int]) -> int:
        """Parameter index of the predicate or temporal node at path."""
        return self._slots[tuple(path)]

    def _trace(self, states: torch.Tensor, phi: Formula, path: Tuple[int, ...], beta: float) -> torch.Tensor:
        if isinstance(phi, Predicate):
            slot = self._slots[path]
            return states @ self.predicate_weights[slot] - self.predicate_biases[slot]
        if isinstance(phi, (And, Or)):
            traces = [self._trace(states, c, path + (i,), beta) for i, c in enumerate(phi.children)]
            length = min(t.shape[-1] for t in traces)
            stacked = torch.stack([t[..., :length] for t in traces], dim=-1)
            return soft_min(stacked, beta) if isinstance(phi, And) else soft_max(stacked, beta)
        child = self._trace(states, phi.child, path + (0,), beta)
        window = self.windows[self._slots[path]]
        length = child.shape[-1] - phi.k2
        if length <= 0:
            raise StlWindowError(f"window [{phi.k1}, {phi.k2}] exceeds trajectory", "root")
        weights = torch.stack([time_window_weights(child.shape[-1], window[0], window[1], self.eta,
                                                   offset=k, dtype=child.dtype) for k in range(length)])
        expanded = child.unsqueeze(-2).expand(*child.shape[:-1], length, child.shape[-1])
        if isinstance(phi, Eventually):
            return soft_max(expanded, beta, weights)
        return soft_min(expanded, beta, weights)

    def forward(self, states: torch.Tensor, beta: float, k: int = 0) -> torch.Tensor:
        """Smooth robustness at slot k for (K, d) or (B, K, d) states."""
        if beta <= 0:
            raise InvalidInputError(f"temperature must be positive, got {beta}")
        return self._trace(states, self.structure, (), beta)[..., k]


def smooth_robustness(traj, phi: Union[Formula, SmoothFormula], k: int = 0, beta: float = 10.0,
                      eta: float = 0.1) -> torch.Tensor:
    """
    Smooth robustness of phi at slot k.

    Passing a SmoothFormula evaluates it as is, so backward() reaches its parameters;
    a plain formula is wrapped in a fresh SmoothFormula with window sharpness eta.
    """
    model = phi if isinstance(phi, SmoothFormula) else SmoothFormula(phi, eta=eta)
    _check_fits(model.structure, k, _states(traj).shape[0], "root")
    states = torch.as_tensor(_states(traj), dtype=model.predicate_weights[0].dtype)
    return model(states, beta, k)

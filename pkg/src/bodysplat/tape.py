"""Scalar reverse-mode automatic differentiation on an explicit tape.

Vars record onto their Tape in creation order, which is already a valid
topological order, so the backward sweep is a single reversed pass.  The
heavy per-pixel gradients in the renderer use hand-derived adjoints instead;
this tape covers scalar math (loss terms, Jacobian probes) where clarity
beats speed.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence


class Tape:
    """Records Vars in creation order and replays adjoints in reverse."""

    def __init__(self) -> None:
        self._nodes: list[Var] = []

    def var(self, value: float) -> "Var":
        return Var(self, float(value))

    def _record(self, node: "Var") -> int:
        self._nodes.append(node)
        return len(self._nodes) - 1

    def backward(self, out: "Var") -> None:
        """Accumulate d out / d node into every node's .grad."""
        if out._tape is not self:
            raise ValueError("output Var belongs to a different tape")
        for node in self._nodes:
            node.grad = 0.0
        out.grad = 1.0
        for node in reversed(self._nodes[: out._index + 1]):
            if node._backward is not None and node.grad != 0.0:
                node._backward(node.grad)


class Var:
    """One scalar node: a value, an adjoint slot, and a local backward rule."""

    __slots__ = ("_tape", "value", "grad", "_index", "_backward")

    def __init__(self, tape: Tape, value: float,
                 backward: Callable[[float], None] | None = None) -> None:
        self._tape = tape
        self.value = value
        self.grad = 0.0
        self._backward = backward
        self._index = tape._record(self)

    def _lift(self, other) -> "Var":
        if isinstance(other, Var):
            return other
        return Var(self._tape, float(other))

    # -- arithmetic -------------------------------------------------------

    def __add__(self, other) -> "Var":
        o = self._lift(other)

        def bwd(g: float) -> None:
            self.grad += g
            o.grad += g

        return Var(self._tape, self.value + o.value, bwd)

    __radd__ = __add__

    def __neg__(self) -> "Var":
        def bwd(g: float) -> None:
            self.grad -= g

        return Var(self._tape, -self.value, bwd)

    def __sub__(self, other) -> "Var":
        return self + (-self._lift(other))

    def __rsub__(self, other) -> "Var":
        return self._lift(other) + (-self)

    def __mul__(self, other) -> "Var":
        o = self._lift(other)

        def bwd(g: float) -> None:
            self.grad += g * o.value
            o.grad += g * self.value

        return Var(self._tape, self.value * o.value, bwd)

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Var":
        o = self._lift(other)

        def bwd(g: float) -> None:
            self.grad += g / o.value
            o.grad -= g * self.value / (o.value * o.value)

        return Var(self._tape, self.value / o.value, bwd)

    def __rtruediv__(self, other) -> "Var":
        return self._lift(other) / self

    def __pow__(self, exponent: float) -> "Var":
        e = float(exponent)

        def bwd(g: float) -> None:
            self.grad += g * e * self.value ** (e - 1.0)

        return Var(self._tape, self.value ** e, bwd)

    # -- elementary functions ---------------------------------------------

    def exp(self) -> "Var":
        y = math.exp(self.value)

        def bwd(g: float) -> None:
            self.grad += g * y

        return Var(self._tape, y, bwd)

    def log(self) -> "Var":
        def bwd(g: float) -> None:
            self.grad += g / self.value

        return Var(self._tape, math.log(self.value), bwd)

    def sqrt(self) -> "Var":
        y = math.sqrt(self.value)

        def bwd(g: float) -> None:
            self.grad += g * 0.5 / y

        return Var(self._tape, y, bwd)

    def tanh(self) -> "Var":
        y = math.tanh(self.value)

        def bwd(g: float) -> None:
            self.grad += g * (1.0 - y * y)

        return Var(self._tape, y, bwd)

    def sin(self) -> "Var":
        def bwd(g: float) -> None:
            self.grad += g * math.cos(self.value)

        return Var(self._tape, math.sin(self.value), bwd)

    def cos(self) -> "Var":
        def bwd(g: float) -> None:
            self.grad -= g * math.sin(self.value)

        return Var(self._tape, math.cos(self.value), bwd)

    def abs(self) -> "Var":
        s = 0.0 if self.value == 0.0 else math.copysign(1.0, self.value)

        def bwd(g: float) -> None:
            self.grad += g * s

        return Var(self._tape, abs(self.value), bwd)

    def maximum(self, other) -> "Var":
        """max(self, other); at a tie the gradient goes to self."""
        o = self._lift(other)
        take_self = self.value >= o.value

        def bwd(g: float) -> None:
            if take_self:
                self.grad += g
            else:
                o.grad += g

        return Var(self._tape, self.value if take_self else o.value, bwd)

    def minimum(self, other) -> "Var":
        o = self._lift(other)
        take_self = self.value <= o.value

        def bwd(g: float) -> None:
            if take_self:
                self.grad += g
            else:
                o.grad += g

        return Var(self._tape, self.value if take_self else o.value, bwd)

    def __repr__(self) -> str:
        return f"Var(value={self.value!r}, grad={self.grad!r})"


def grad(f: Callable[[Sequence[Var]], Var], xs: Sequence[float]) -> list[float]:
    """Gradient of a scalar function built from tape ops, at point xs."""
    tape = Tape()
    vars_ = [tape.var(x) for x in xs]
    out = f(vars_)
    tape.backward(out)
    return [v.grad for v in vars_]


def fd_gradient(f: Callable[[Sequence[float]], float], xs: Sequence[float],
                step: float = 1e-4) -> list[float]:
    """Central-difference gradient of a plain float function."""
    xs = [float(x) for x in xs]
    out = []
    for i in range(len(xs)):
        hi = list(xs)
        lo = list(xs)
        hi[i] += step
        lo[i] -= step
        out.append((f(hi) - f(lo)) / (2.0 * step))
    return out


def max_rel_err(a: Sequence[float], b: Sequence[float]) -> float:
    """max_i |a_i - b_i| / max(|a_i|, |b_i|, 1e-6)."""
    worst = 0.0
    for x, y in zip(a, b):
        worst = max(worst, abs(x - y) / max(abs(x), abs(y), 1e-6))
    return worst

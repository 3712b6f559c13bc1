"""Symbolic derivatives over the jet space plus a truncated-Taylor numeric
evaluator used for residual sampling.

`diff` is the partial derivative chaining through function arguments (jet
atoms are independent coordinates and differentiate to zero); `dpartial`
differentiates with respect to a single atom treated as a coordinate;
`total_derivative` is the jet-space operator D_v.
"""
from __future__ import annotations

import math
from fractions import Fraction as Q

from .expr import (
    Add,
    Expr,
    Fun,
    Jet,
    Mul,
    Opq,
    Par,
    Pow,
    Rat,
    Sym,
    UnsupportedNode,
    ZERO,
    ONE,
    atoms_of,
    radd,
    rmul,
    rneg,
    rpow,
)


class LambertWDomain(Exception):
    pass


class DivisionByZeroAtPoint(Exception):
    pass


def diff(e, v):
    """Partial derivative of e with respect to the base variable v.

    Opaque atoms chain through their arguments (g''(a) -> g'''(a)*a_v);
    jet atoms and parameters are constants; d/dv W(a) = W/(a*(1+W)) * a_v.
    """
    if isinstance(v, str):
        v = Sym(v)
    if isinstance(e, (Rat, Par, Jet)):
        return ZERO
    if isinstance(e, Sym):
        return ONE if e == v else ZERO
    if isinstance(e, Opq):
        da = diff(e.arg, v)
        if da is ZERO or da == ZERO:
            return ZERO
        return rmul(Opq(e.name, e.arg, e.order + 1), da)
    if isinstance(e, Fun):
        da = diff(e.arg, v)
        if da == ZERO:
            return ZERO
        if e.fname == "exp":
            return rmul(e, da)
        if e.fname == "ln":
            return rmul(da, rpow(e.arg, Rat(-1)))
        # Lambert W, principal branch
        return rmul(e, rpow(rmul(e.arg, radd(ONE, e)), Rat(-1)), da)
    if isinstance(e, Add):
        return radd(*[diff(t, v) for t in e.terms])
    if isinstance(e, Mul):
        out = []
        fs = e.factors
        for i, f in enumerate(fs):
            df = diff(f, v)
            if df == ZERO:
                continue
            out.append(rmul(*fs[:i], df, *fs[i + 1 :]))
        return radd(*out) if out else ZERO
    if isinstance(e, Pow):
        if not isinstance(e.exponent, Rat):
            raise UnsupportedNode("cannot differentiate a power with non-rational exponent")
        n = e.exponent.value
        db = diff(e.base, v)
        if db == ZERO:
            return ZERO
        return rmul(Rat(n), rpow(e.base, Rat(n - 1)), db)
    raise UnsupportedNode(type(e).__name__)


def dpartial(e, atom):
    """Derivative of e with respect to a single atom (jet atom, opaque atom,
    symbol, ...) treated as an independent coordinate: every other atom is
    held fixed, with no chaining."""
    if isinstance(e, (Rat,)):
        return ZERO
    if isinstance(e, (Sym, Par, Jet, Opq, Fun)):
        return ONE if e == atom else ZERO
    if isinstance(e, Add):
        return radd(*[dpartial(t, atom) for t in e.terms])
    if isinstance(e, Mul):
        out = []
        fs = e.factors
        for i, f in enumerate(fs):
            df = dpartial(f, atom)
            if df == ZERO:
                continue
            out.append(rmul(*fs[:i], df, *fs[i + 1 :]))
        return radd(*out) if out else ZERO
    if isinstance(e, Pow):
        if not isinstance(e.exponent, Rat):
            raise UnsupportedNode("non-rational exponent")
        n = e.exponent.value
        db = dpartial(e.base, atom)
        if db == ZERO:
            return ZERO
        return rmul(Rat(n), rpow(e.base, Rat(n - 1)), db)
    raise UnsupportedNode(type(e).__name__)


def jet_atoms(e):
    return sorted((a for a in atoms_of(e) if isinstance(a, Jet)), key=lambda j: (j.dep, j.idx))


def total_derivative(e, v):
    """Jet-space total derivative D_v: the explicit part plus the chain
    contribution of every jet atom (u_x -> u_{xv} and so on)."""
    if isinstance(v, Sym):
        v = v.name
    out = diff(e, Sym(v))
    for j in jet_atoms(e):
        dj = dpartial(e, j)
        if dj == ZERO:
            continue
        out = radd(out, rmul(dj, Jet(j.dep, j.idx + (v,))))
    return out


# ---------------------------------------------------------------------------
# Numeric layer: truncated multivariate Taylor arithmetic ("jets") in double
# precision, plus Lambert W by Halley iteration.


def lambertw(x, tol=1e-15, max_iter=50):
    """Principal-branch Lambert W via Halley iteration; exact to machine
    precision on the defining residual w*e^w - x."""
    if x < -1.0 / math.e:
        raise LambertWDomain(f"W argument {x} < -1/e")
    if x == 0.0:
        return 0.0
    if abs(x + 1.0 / math.e) < 1e-12:
        return -1.0
    # initial guess
    if x < -0.25:
        w = -1.0 + math.sqrt(2.0 * (math.e * x + 1.0))
    elif x < 2.0:
        w = x / (1.0 + x) if x > -0.2 else x
    else:
        lx = math.log(x)
        w = lx - math.log(lx) if lx > 1 else lx
    for _ in range(max_iter):
        ew = math.exp(w)
        f = w * ew - x
        if abs(f) < tol * (1.0 + abs(x)):
            break
        wp = w + 1.0
        delta = f / (ew * wp - (w + 2.0) * f / (2.0 * wp))
        w -= delta
        if abs(delta) < 1e-17 * (1.0 + abs(w)):
            break
    return w


def _monomials_upto(nvars, deg):
    if nvars == 0:
        return [()]
    out = []

    def rec(prefix, remaining, left):
        if remaining == 1:
            out.append(prefix + (left,))
            return
        for e in range(left + 1):
            rec(prefix + (e,), remaining - 1, left - e)

    for total in range(deg + 1):
        rec((), nvars, total)
    # keep only exponent vectors with sum <= deg (rec enumerates sum == total)
    return sorted(set(out), key=lambda k: (sum(k), k))


class TaylorJet:
    """Truncated multivariate Taylor expansion around a base point."""

    __slots__ = ("vars", "deg", "coeffs")

    def __init__(self, vars, deg, coeffs=None):
        self.vars = tuple(vars)
        self.deg = deg
        self.coeffs = dict(coeffs) if coeffs else {}

    @classmethod
    def const(cls, c, vars, deg):
        j = cls(vars, deg)
        if c:
            j.coeffs[(0,) * len(j.vars)] = float(c)
        return j

    @classmethod
    def variable(cls, name, value, vars, deg):
        j = cls.const(value, vars, deg)
        if deg >= 1:
            k = [0] * len(j.vars)
            k[j.vars.index(name)] = 1
            j.coeffs[tuple(k)] = j.coeffs.get(tuple(k), 0.0) + 1.0
        return j

    def value(self):
        return self.coeffs.get((0,) * len(self.vars), 0.0)

    def coefficient(self, mono):
        return self.coeffs.get(tuple(mono), 0.0)

    def derivative(self, mono):
        """Mixed partial derivative at the base point (coefficient times the
        multinomial factorial)."""
        c = self.coefficient(mono)
        scale = 1.0
        for e in mono:
            scale *= math.factorial(e)
        return c * scale

    def _zip(self, other, op):
        out = TaylorJet(self.vars, self.deg)
        coeffs = dict(self.coeffs)
        for k, v in other.coeffs.items():
            coeffs[k] = op(coeffs.get(k, 0.0), v)
        for k in list(coeffs):
            if k not in other.coeffs:
                coeffs[k] = op(coeffs[k], 0.0)
        out.coeffs = {k: v for k, v in coeffs.items() if v != 0.0}
        return out

    def __add__(self, other):
        other = self._coerce(other)
        return self._zip(other, lambda a, b: a + b)

    def __sub__(self, other):
        other = self._coerce(other)
        return self._zip(other, lambda a, b: a - b)

    def __neg__(self):
        return TaylorJet(self.vars, self.deg, {k: -v for k, v in self.coeffs.items()})

    def _coerce(self, other):
        if isinstance(other, TaylorJet):
            return other
        return TaylorJet.const(other, self.vars, self.deg)

    def __mul__(self, other):
        other = self._coerce(other)
        out = TaylorJet(self.vars, self.deg)
        acc = {}
        for k1, v1 in self.coeffs.items():
            s1 = sum(k1)
            for k2, v2 in other.coeffs.items():
                if s1 + sum(k2) > self.deg:
                    continue
                k = tuple(a + b for a, b in zip(k1, k2))
                acc[k] = acc.get(k, 0.0) + v1 * v2
        out.coeffs = {k: v for k, v in acc.items() if v != 0.0}
        return out

    __radd__ = __add__
    __rmul__ = __mul__

    def compose_univariate(self, series):
        """sum series[k] * (self - self.value())^k, truncated."""
        delta = self - self.value()
        out = TaylorJet.const(series[0], self.vars, self.deg)
        power = TaylorJet.const(1.0, self.vars, self.deg)
        for k in range(1, min(len(series), self.deg + 1)):
            power = power * delta
            if not power.coeffs:
                break
            out = out + power * series[k]
        return out

    def reciprocal(self):
        c = self.value()
        if c == 0.0:
            raise DivisionByZeroAtPoint("reciprocal of a jet with zero value")
        series = [(-1.0) ** k / c ** (k + 1) for k in range(self.deg + 1)]
        return self.compose_univariate(series)

    def __truediv__(self, other):
        other = self._coerce(other)
        return self * other.reciprocal()

    def pow_rational(self, num, den=1):
        a = Q(num, den)
        if a.denominator == 1 and a >= 0:
            out = TaylorJet.const(1.0, self.vars, self.deg)
            for _ in range(a.numerator):
                out = out * self
            return out
        c = self.value()
        if c == 0.0:
            raise DivisionByZeroAtPoint("fractional/negative power at zero value")
        al = float(a)
        series = []
        binom = 1.0
        for k in range(self.deg + 1):
            series.append(binom * c ** (al - k))
            binom *= (al - k) / (k + 1)
        return self.compose_univariate(series)

    def exp(self):
        c = self.value()
        ec = math.exp(c)
        series = [ec / math.factorial(k) for k in range(self.deg + 1)]
        return self.compose_univariate(series)

    def ln(self):
        c = self.value()
        if c <= 0.0:
            raise DivisionByZeroAtPoint("ln of a non-positive value")
        series = [math.log(c)]
        for k in range(1, self.deg + 1):
            series.append((-1.0) ** (k + 1) / (k * c**k))
        return self.compose_univariate(series)

    def lambert_w(self):
        c = self.value()
        w0 = lambertw(c)
        # series of W at c by reversion of x = w*e^w around w0
        d = self.deg
        # b[k]: Taylor coefficients of (w0+s)e^(w0+s) - c in s
        ew = math.exp(w0)
        b = [0.0] * (d + 1)
        for k in range(d + 1):
            # coefficient of s^k in (w0+s)*ew*e^s
            term = ew * (w0 / math.factorial(k) + (1.0 / math.factorial(k - 1) if k >= 1 else 0.0))
            b[k] = term
        b[0] = 0.0  # w0*ew - c = 0
        series = _reverse_series(b, d)
        series[0] = w0
        return self.compose_univariate(series)


def _reverse_series(b, d):
    """Power-series reversion: given x(s) = sum b[k] s^k with b[0]=0,
    b[1] != 0, return coefficients a with s(x) = sum a[k] x^k, a[0]=0."""
    if d >= 1 and b[1] == 0.0:
        raise DivisionByZeroAtPoint("series not invertible (zero linear term)")
    a = [0.0] * (d + 1)
    if d >= 1:
        a[1] = 1.0 / b[1]
    for k in range(2, d + 1):
        # impose coefficient of x^k in b(a(x)) = 0
        # compute composition coefficient using current a[1..k-1], a[k]=unknown:
        # b1*a_k + (terms from higher b with lower a) = 0
        total = 0.0
        # powers of a(x) up to needed order
        powers = [[0.0] * (d + 1) for _ in range(d + 1)]
        powers[0][0] = 1.0
        for p in range(1, d + 1):
            prev = powers[p - 1]
            cur = [0.0] * (d + 1)
            for i in range(d + 1):
                if prev[i] == 0.0:
                    continue
                for j in range(1, d + 1 - i):
                    cur[i + j] += prev[i] * a[j]
            powers[p] = cur
        for p in range(2, k + 1):
            total += b[p] * powers[p][k]
        a[k] = -total / b[1]
    return a


def eval_jet(e, point, degree=2, fn_table=None):
    """Numeric truncated-Taylor evaluation of e.

    `point` maps names to floats; symbols are perturbed (carry Taylor
    variables), parameters and jet atoms are constants looked up by their
    rendered name.  `fn_table` supplies numeric implementations for opaque
    atoms: name -> callable(center, n) returning the first n+1 Taylor
    coefficients of the function at center.
    """
    fn_table = fn_table or {}
    symnames = sorted({a.name for a in atoms_of(e) if isinstance(a, Sym)})
    vars = tuple(n for n in symnames if n in point)
    missing = [n for n in symnames if n not in point]
    if missing:
        raise KeyError(f"no numeric binding for symbol(s) {missing}")
    return _ev(e, point, degree, fn_table, vars)


def _ev(e, point, deg, fn_table, vars):
    if isinstance(e, Rat):
        return TaylorJet.const(float(e.value), vars, deg)
    if isinstance(e, Sym):
        return TaylorJet.variable(e.name, point[e.name], vars, deg)
    if isinstance(e, Par):
        if e.name not in point:
            raise KeyError(f"no numeric binding for parameter {e.name}")
        return TaylorJet.const(point[e.name], vars, deg)
    if isinstance(e, Jet):
        name = e.dep if not e.idx else f"{e.dep}_{''.join(e.idx)}"
        if name not in point:
            raise KeyError(f"no numeric binding for jet atom {name}")
        return TaylorJet.const(point[name], vars, deg)
    if isinstance(e, Opq):
        if e.name not in fn_table:
            raise KeyError(f"no numeric implementation for opaque function {e.name}")
        inner = _ev(e.arg, point, deg, fn_table, vars)
        c = inner.value()
        coeffs = list(fn_table[e.name](c, deg + e.order))
        # shift to the e.order-th derivative's Taylor coefficients
        for _ in range(e.order):
            coeffs = [coeffs[k + 1] * (k + 1) for k in range(len(coeffs) - 1)]
        return inner.compose_univariate(coeffs)
    if isinstance(e, Fun):
        inner = _ev(e.arg, point, deg, fn_table, vars)
        if e.fname == "exp":
            return inner.exp()
        if e.fname == "ln":
            return inner.ln()
        return inner.lambert_w()
    if isinstance(e, Add):
        out = _ev(e.terms[0], point, deg, fn_table, vars)
        for t in e.terms[1:]:
            out = out + _ev(t, point, deg, fn_table, vars)
        return out
    if isinstance(e, Mul):
        out = _ev(e.factors[0], point, deg, fn_table, vars)
        for f in e.factors[1:]:
            out = out * _ev(f, point, deg, fn_table, vars)
        return out
    if isinstance(e, Pow):
        if not isinstance(e.exponent, Rat):
            raise UnsupportedNode("non-rational exponent")
        n = e.exponent.value
        base = _ev(e.base, point, deg, fn_table, vars)
        return base.pow_rational(n.numerator, n.denominator)
    raise UnsupportedNode(type(e).__name__)

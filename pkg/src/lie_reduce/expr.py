"""Immutable symbolic expressions with an exact rational-function canonical form.

Everything is built from exact rationals; no floating point enters the
symbolic layer.  Zero-testing is complete for rational functions in the
atom set (symbols, parameters, jet atoms, opaque-function atoms, elementary
function atoms, and adjoined radical atoms for fractional powers).
"""
from __future__ import annotations

from fractions import Fraction
from functools import lru_cache


class ExprError(Exception):
    pass


class UnsupportedNode(ExprError):
    """Expression contains a node the canonical form cannot handle
    (in practice: a power with a non-rational exponent)."""


class CyclicBinding(ExprError):
    pass


class NotPolynomialInAtoms(ExprError):
    pass


Q = Fraction


def _q(v):
    if isinstance(v, Fraction):
        return v
    if isinstance(v, int):
        return Fraction(v)
    raise TypeError(f"expected exact rational, got {type(v).__name__}")


# ---------------------------------------------------------------------------
# Expression nodes


class Expr:
    __slots__ = ("_hash",)

    def __hash__(self):
        return self._hash

    # arithmetic sugar; every operator routes through the smart constructors
    def __add__(self, other):
        return radd(self, _coerce(other))

    def __radd__(self, other):
        return radd(_coerce(other), self)

    def __sub__(self, other):
        return radd(self, rneg(_coerce(other)))

    def __rsub__(self, other):
        return radd(_coerce(other), rneg(self))

    def __mul__(self, other):
        return rmul(self, _coerce(other))

    def __rmul__(self, other):
        return rmul(_coerce(other), self)

    def __truediv__(self, other):
        return rmul(self, rpow(_coerce(other), Rat(Q(-1))))

    def __rtruediv__(self, other):
        return rmul(_coerce(other), rpow(self, Rat(Q(-1))))

    def __pow__(self, other):
        if isinstance(other, (int, Fraction)):
            other = Rat(_q(other))
        return rpow(self, other)

    def __neg__(self):
        return rneg(self)

    def __repr__(self):
        return to_text(self)


def _coerce(v):
    if isinstance(v, Expr):
        return v
    return Rat(_q(v))


class Rat(Expr):
    __slots__ = ("value",)

    def __init__(self, value):
        object.__setattr__(self, "value", _q(value))
        object.__setattr__(self, "_hash", hash(("Rat", self.value)))

    def __setattr__(self, *a):
        raise AttributeError("immutable")

    def __eq__(self, other):
        return isinstance(other, Rat) and self.value == other.value

    __hash__ = Expr.__hash__


class Sym(Expr):
    """A base variable such as t, x, y, z."""

    __slots__ = ("name",)

    def __init__(self, name):
        object.__setattr__(self, "name", name)
        object.__setattr__(self, "_hash", hash(("Sym", name)))

    def __setattr__(self, *a):
        raise AttributeError("immutable")

    def __eq__(self, other):
        return isinstance(other, Sym) and self.name == other.name

    __hash__ = Expr.__hash__


class Par(Expr):
    """A named constant parameter such as k0, c3, alpha."""

    __slots__ = ("name",)

    def __init__(self, name):
        object.__setattr__(self, "name", name)
        object.__setattr__(self, "_hash", hash(("Par", name)))

    def __setattr__(self, *a):
        raise AttributeError("immutable")

    def __eq__(self, other):
        return isinstance(other, Par) and self.name == other.name

    __hash__ = Expr.__hash__


class Jet(Expr):
    """A jet coordinate of a multi-variable dependent: Jet('u', ('t','x'))
    is u_{xt}.  The multi-index is kept sorted (mixed partials commute);
    order zero is the dependent variable itself."""

    __slots__ = ("dep", "idx")

    def __init__(self, dep, idx=()):
        idx = tuple(sorted(idx))
        object.__setattr__(self, "dep", dep)
        object.__setattr__(self, "idx", idx)
        object.__setattr__(self, "_hash", hash(("Jet", dep, idx)))

    def __setattr__(self, *a):
        raise AttributeError("immutable")

    def __eq__(self, other):
        return isinstance(other, Jet) and self.dep == other.dep and self.idx == other.idx

    __hash__ = Expr.__hash__


class Opq(Expr):
    """An opaque single-argument function atom: Opq('g', t, 2) is g''(t).
    No functional identities are applied; atoms with mathematically equal
    arguments are identified through the canonical form."""

    __slots__ = ("name", "arg", "order")

    def __init__(self, name, arg, order=0):
        if order < 0:
            raise ValueError("derivative order must be >= 0")
        object.__setattr__(self, "name", name)
        object.__setattr__(self, "arg", arg)
        object.__setattr__(self, "order", order)
        object.__setattr__(self, "_hash", hash(("Opq", name, order, arg._hash)))

    def __setattr__(self, *a):
        raise AttributeError("immutable")

    def __eq__(self, other):
        return (
            isinstance(other, Opq)
            and self.name == other.name
            and self.order == other.order
            and self.arg == other.arg
        )

    __hash__ = Expr.__hash__


class Fun(Expr):
    """Elementary function application: exp, ln, or W (Lambert W, principal
    branch)."""

    __slots__ = ("fname", "arg")

    NAMES = ("exp", "ln", "W")

    def __init__(self, fname, arg):
        if fname not in Fun.NAMES:
            raise ValueError(f"unknown elementary function {fname!r}")
        object.__setattr__(self, "fname", fname)
        object.__setattr__(self, "arg", arg)
        object.__setattr__(self, "_hash", hash(("Fun", fname, arg._hash)))

    def __setattr__(self, *a):
        raise AttributeError("immutable")

    def __eq__(self, other):
        return isinstance(other, Fun) and self.fname == other.fname and self.arg == other.arg

    __hash__ = Expr.__hash__


class Add(Expr):
    __slots__ = ("terms",)

    def __init__(self, terms):
        terms = tuple(terms)
        object.__setattr__(self, "terms", terms)
        object.__setattr__(self, "_hash", hash(("Add",) + tuple(t._hash for t in terms)))

    def __setattr__(self, *a):
        raise AttributeError("immutable")

    def __eq__(self, other):
        return isinstance(other, Add) and self.terms == other.terms

    __hash__ = Expr.__hash__


class Mul(Expr):
    __slots__ = ("factors",)

    def __init__(self, factors):
        factors = tuple(factors)
        object.__setattr__(self, "factors", factors)
        object.__setattr__(self, "_hash", hash(("Mul",) + tuple(f._hash for f in factors)))

    def __setattr__(self, *a):
        raise AttributeError("immutable")

    def __eq__(self, other):
        return isinstance(other, Mul) and self.factors == other.factors

    __hash__ = Expr.__hash__


class Pow(Expr):
    """base^exponent.  The exponent is an Expr; only exact-rational
    exponents can be normalized (others may exist transiently in catalog
    templates and must be substituted away before canonicalization)."""

    __slots__ = ("base", "exponent")

    def __init__(self, base, exponent):
        object.__setattr__(self, "base", base)
        object.__setattr__(self, "exponent", exponent)
        object.__setattr__(self, "_hash", hash(("Pow", base._hash, exponent._hash)))

    def __setattr__(self, *a):
        raise AttributeError("immutable")

    def __eq__(self, other):
        return isinstance(other, Pow) and self.base == other.base and self.exponent == other.exponent

    __hash__ = Expr.__hash__


ZERO = Rat(Q(0))
ONE = Rat(Q(1))
MINUS_ONE = Rat(Q(-1))


# ---------------------------------------------------------------------------
# Smart constructors: light flattening/folding; the heavy lifting is done by
# the canonical form.


def radd(*terms):
    flat = []
    const = Q(0)
    for t in terms:
        t = _coerce(t)
        if isinstance(t, Add):
            flat.extend(t.terms)
        else:
            flat.append(t)
    out = []
    for t in flat:
        if isinstance(t, Rat):
            const += t.value
        else:
            out.append(t)
    if const != 0 or not out:
        out.append(Rat(const))
    if len(out) == 1:
        return out[0]
    return Add(out)


def rneg(e):
    return rmul(MINUS_ONE, e)


def rmul(*factors):
    flat = []
    const = Q(1)
    for f in factors:
        f = _coerce(f)
        if isinstance(f, Mul):
            flat.extend(f.factors)
        else:
            flat.append(f)
    out = []
    for f in flat:
        if isinstance(f, Rat):
            const *= f.value
        else:
            out.append(f)
    if const == 0:
        return ZERO
    if const != 1 or not out:
        out.insert(0, Rat(const))
    if len(out) == 1:
        return out[0]
    return Mul(out)


def _iroot(n, q):
    """Exact integer q-th root of n >= 0, or None."""
    if n in (0, 1):
        return n
    lo, hi = 1, 1 << ((n.bit_length() + q - 1) // q + 1)
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if mid**q <= n:
            lo = mid
        else:
            hi = mid - 1
    return lo if lo**q == n else None


def _rat_root(c, q):
    """Exact rational q-th root of Fraction c, or None."""
    neg = c < 0
    if neg and q % 2 == 0:
        return None
    n = _iroot(abs(c.numerator), q)
    d = _iroot(c.denominator, q)
    if n is None or d is None:
        return None
    r = Fraction(n, d)
    return -r if neg else r


def rpow(base, exponent):
    base = _coerce(base)
    exponent = _coerce(exponent)
    if isinstance(exponent, Rat):
        e = exponent.value
        if e == 0:
            return ONE
        if e == 1:
            return base
        if isinstance(base, Rat):
            c = base.value
            if e.denominator == 1:
                if c == 0 and e < 0:
                    raise ZeroDivisionError("0 raised to a negative power")
                return Rat(c**e.numerator) if e >= 0 else Rat(Q(1) / c**(-e.numerator))
            if c == 0:
                if e < 0:
                    raise ZeroDivisionError("0 raised to a negative power")
                return ZERO
            if c == 1:
                return ONE
            r = _rat_root(c, e.denominator)
            if r is not None:
                return rpow(Rat(r), Rat(Q(e.numerator)))
        if isinstance(base, Pow) and isinstance(base.exponent, Rat):
            return rpow(base.base, Rat(base.exponent.value * e))
    return Pow(base, exponent)


def rexp(a):
    a = _coerce(a)
    if isinstance(a, Rat) and a.value == 0:
        return ONE
    if isinstance(a, Fun) and a.fname == "ln":
        # the one identity applied at construction
        return a.arg
    return Fun("exp", a)


def rln(a):
    a = _coerce(a)
    if isinstance(a, Rat) and a.value == 1:
        return ZERO
    return Fun("ln", a)


def rW(a):
    return Fun("W", _coerce(a))


def sym(name):
    return Sym(name)


def par(name):
    return Par(name)


def rat(p, q=1):
    return Rat(Fraction(p, q))


# ---------------------------------------------------------------------------
# Text rendering (the parser-grammar form; parse(to_text(e)) is is_zero-equal
# to e).  Opaque atoms whose argument equals their conventional variable are
# rendered bare ("w''"), others in call form ("w''(y^2/x)").

FUNCTION_VARS = {"f": "t", "g": "t", "h": "t", "w": "z"}

_PREC_ADD, _PREC_MUL, _PREC_UNARY, _PREC_POW, _PREC_ATOM = 10, 20, 25, 30, 100


def _render(e, prec):
    if isinstance(e, Rat):
        v = e.value
        s = str(v.numerator) if v.denominator == 1 else f"{v.numerator}/{v.denominator}"
        if v < 0 and prec > _PREC_ADD:
            return f"({s})"
        if v.denominator != 1 and prec >= _PREC_MUL:
            return f"({s})"
        return s
    if isinstance(e, (Sym, Par)):
        return e.name
    if isinstance(e, Jet):
        if not e.idx:
            return e.dep
        return f"D({e.dep},{','.join(e.idx)})"
    if isinstance(e, Opq):
        name = e.name + "'" * e.order
        default = FUNCTION_VARS.get(e.name)
        if default is not None and isinstance(e.arg, Sym) and e.arg.name == default:
            return name
        return f"{name}({_render(e.arg, 0)})"
    if isinstance(e, Fun):
        return f"{e.fname}({_render(e.arg, 0)})"
    if isinstance(e, Add):
        parts = []
        for i, t in enumerate(e.terms):
            c, rest = _split_coeff(t)
            if i > 0 and c < 0:
                parts.append(" - " + _render_signed(rest, -c))
            elif i > 0:
                parts.append(" + " + _render_signed(rest, c))
            else:
                parts.append(_render(t, _PREC_ADD))
        s = "".join(parts)
        return f"({s})" if prec > _PREC_ADD else s
    if isinstance(e, Mul):
        num, den = [], []
        coeff = Q(1)
        for f in e.factors:
            if isinstance(f, Rat):
                coeff *= f.value
            elif isinstance(f, Pow) and isinstance(f.exponent, Rat) and f.exponent.value < 0:
                den.append(rpow(f.base, Rat(-f.exponent.value)))
            else:
                num.append(f)
        ns = "*".join(_render(f, _PREC_MUL + 1) for f in num)
        if coeff != 1 or not ns:
            cs = _render(Rat(coeff), _PREC_MUL if coeff >= 0 else _PREC_UNARY)
            if coeff == -1 and ns:
                ns = "-" + ns
            else:
                ns = f"{cs}*{ns}" if ns else cs
        if den:
            ds = "*".join(_render(f, _PREC_ATOM) for f in den)
            if len(den) > 1 or not isinstance(den[0], (Sym, Par, Rat)):
                ds = f"({ds})"
            s = f"{ns}/{ds}"
        else:
            s = ns
        needs = _PREC_MUL if not s.startswith("-") else _PREC_UNARY
        return f"({s})" if prec > needs else s
    if isinstance(e, Pow):
        bs = _render(e.base, _PREC_POW + 1)
        ex = e.exponent
        if isinstance(ex, Rat) and ex.value.denominator == 1 and ex.value >= 0:
            es = str(ex.value.numerator)
        else:
            es = f"({_render(ex, 0)})"
        s = f"{bs}^{es}"
        return f"({s})" if prec > _PREC_POW else s
    raise TypeError(f"cannot render {type(e).__name__}")


def _split_coeff(t):
    if isinstance(t, Rat):
        return t.value, ONE
    if isinstance(t, Mul) and isinstance(t.factors[0], Rat):
        rest = t.factors[1:]
        return t.factors[0].value, (rest[0] if len(rest) == 1 else Mul(rest))
    return Q(1), t


def _render_signed(rest, c):
    if rest is ONE or (isinstance(rest, Rat) and rest.value == 1):
        return _render(Rat(c), _PREC_MUL)
    if c == 1:
        return _render(rest, _PREC_ADD + 1)
    return _render(rmul(Rat(c), rest), _PREC_ADD + 1)


def to_text(e):
    """Deterministic textual form in the parser grammar."""
    return _render(e, 0)


# ---------------------------------------------------------------------------
# Sparse multivariate polynomials over Q in a sorted atom tuple.

_ATOM_TYPES = (Sym, Par, Jet, Opq, Fun)


def is_atom(e):
    return isinstance(e, _ATOM_TYPES) or (
        isinstance(e, Pow)
        and isinstance(e.exponent, Rat)
        and e.exponent.value.numerator == 1
        and e.exponent.value.denominator > 1
    )


def atom_sort_key(a):
    # names almost always disambiguate; the type name breaks e.g. Sym('u')
    # vs Jet('u', ()) deterministically across processes
    return (_atom_name(a), type(a).__name__)


@lru_cache(maxsize=None)
def _atom_name(a):
    return _render(a, _PREC_ATOM)


class Poly:
    """Multivariate polynomial: sorted atom tuple + {exponent vector: Fraction}."""

    __slots__ = ("atoms", "terms")

    def __init__(self, atoms, terms):
        self.atoms = atoms
        self.terms = terms

    @staticmethod
    def const(c):
        c = _q(c)
        return Poly((), {(): c} if c else {})

    @staticmethod
    def atom(a, e=1):
        return Poly((a,), {(e,): Q(1)})

    def is_zero(self):
        return not self.terms

    def is_const(self):
        return all(not any(k) for k in self.terms)

    def const_value(self):
        if not self.terms:
            return Q(0)
        return self.terms.get((0,) * len(self.atoms), Q(0))

    def strip(self):
        """Drop atoms with zero exponent everywhere; drop zero coefficients."""
        terms = {k: v for k, v in self.terms.items() if v}
        if not terms:
            return Poly((), {})
        used = [i for i in range(len(self.atoms)) if any(k[i] for k in terms)]
        if len(used) == len(self.atoms):
            return Poly(self.atoms, terms)
        atoms = tuple(self.atoms[i] for i in used)
        out = {}
        for k, v in terms.items():
            out[tuple(k[i] for i in used)] = v
        return Poly(atoms, out)

    def key(self):
        return (
            tuple(a._hash for a in self.atoms),
            tuple(sorted((k, (v.numerator, v.denominator)) for k, v in self.terms.items())),
        )

    def degree(self):
        return max((sum(k) for k in self.terms), default=-1)

    def leading(self):
        """(exponent vector, coeff) under graded lex (atoms ascending by name,
        earlier atom dominates)."""
        k = max(self.terms, key=lambda k: (sum(k), k))
        return k, self.terms[k]

    def __repr__(self):
        return f"Poly({[(_atom_name(a)) for a in self.atoms]}, {self.terms})"


def _align(p, q):
    if p.atoms == q.atoms:
        return p.atoms, p.terms, q.terms
    merged = sorted(set(p.atoms) | set(q.atoms), key=atom_sort_key)
    merged = tuple(merged)
    pos = {a: i for i, a in enumerate(merged)}
    n = len(merged)

    def rekey(poly):
        idx = [pos[a] for a in poly.atoms]
        out = {}
        for k, v in poly.terms.items():
            nk = [0] * n
            for i, e in zip(idx, k):
                nk[i] = e
            out[tuple(nk)] = v
        return out

    return merged, rekey(p), rekey(q)


def p_add(p, q):
    atoms, tp, tq = _align(p, q)
    out = dict(tp)
    for k, v in tq.items():
        nv = out.get(k, Q(0)) + v
        if nv:
            out[k] = nv
        else:
            out.pop(k, None)
    return Poly(atoms, out).strip()


def p_neg(p):
    return Poly(p.atoms, {k: -v for k, v in p.terms.items()})


def p_sub(p, q):
    return p_add(p, p_neg(q))


def p_scale(p, c):
    c = _q(c)
    if not c:
        return Poly((), {})
    return Poly(p.atoms, {k: v * c for k, v in p.terms.items()})


def p_mul(p, q):
    if p.is_zero() or q.is_zero():
        return Poly((), {})
    atoms, tp, tq = _align(p, q)
    out = {}
    for k1, v1 in tp.items():
        for k2, v2 in tq.items():
            k = tuple(a + b for a, b in zip(k1, k2))
            nv = out.get(k, Q(0)) + v1 * v2
            if nv:
                out[k] = nv
            else:
                out.pop(k, None)
    return Poly(atoms, out).strip()


def p_pow(p, n):
    if n < 0:
        raise ValueError("negative power of polynomial")
    result = Poly.const(1)
    base = p
    while n:
        if n & 1:
            result = p_mul(result, base)
        base = p_mul(base, base) if n > 1 else base
        n >>= 1
    return result


def p_content(p):
    """Signed rational content: gcd of coefficient numerators over lcm of
    denominators, carrying the sign of the leading coefficient."""
    if p.is_zero():
        return Q(0)
    from math import gcd, lcm

    ng = 0
    dl = 1
    for v in p.terms.values():
        ng = gcd(ng, abs(v.numerator))
        dl = lcm(dl, v.denominator)
    c = Q(ng, dl)
    _, lead = p.leading()
    return -c if lead < 0 else c


def p_primitive(p):
    """(content, primitive) with primitive having integer coprime
    coefficients and positive leading coefficient."""
    c = p_content(p)
    if not c:
        return Q(0), p
    return c, p_scale(p, 1 / c)


def _monomial_content(p):
    """Per-atom minimum exponents."""
    if p.is_zero():
        return ()
    mins = None
    for k in p.terms:
        if mins is None:
            mins = list(k)
        else:
            mins = [min(a, b) for a, b in zip(mins, k)]
    return tuple(mins)


def _shift_monomial(p, shift, sign=-1):
    out = {}
    for k, v in p.terms.items():
        out[tuple(a + sign * s for a, s in zip(k, shift))] = v
    return Poly(p.atoms, out).strip()


def p_divexact(p, q):
    """Exact multivariate division p / q, or None."""
    if q.is_zero():
        raise ZeroDivisionError
    if p.is_zero():
        return Poly((), {})
    atoms, tp, tq = _align(p, q)
    rem = dict(tp)
    qk, qv = max(tq, key=lambda k: (sum(k), k)), None
    qv = tq[qk]
    out = {}
    while rem:
        rk = max(rem, key=lambda k: (sum(k), k))
        nk = tuple(a - b for a, b in zip(rk, qk))
        if any(e < 0 for e in nk):
            return None
        c = rem[rk] / qv
        out[nk] = c
        for k2, v2 in tq.items():
            k = tuple(a + b for a, b in zip(nk, k2))
            nv = rem.get(k, Q(0)) - c * v2
            if nv:
                rem[k] = nv
            else:
                rem.pop(k, None)
    return Poly(atoms, out).strip()


def _to_recursive(p, pos):
    """Dense list of Polys (coefficients) by degree in atom position pos."""
    rest = p.atoms[:pos] + p.atoms[pos + 1 :]
    by_deg = {}
    for k, v in p.terms.items():
        d = k[pos]
        rk = k[:pos] + k[pos + 1 :]
        by_deg.setdefault(d, {})[rk] = v
    deg = max(by_deg) if by_deg else 0
    return [Poly(rest, by_deg.get(d, {})).strip() for d in range(deg + 1)], rest


def _from_recursive(coeffs, atom):
    acc = Poly((), {})
    for d, c in enumerate(coeffs):
        if c.is_zero():
            continue
        acc = p_add(acc, p_mul(c, Poly.atom(atom, d)) if d else c)
    return acc


def _rec_deg(coeffs):
    for d in range(len(coeffs) - 1, -1, -1):
        if not coeffs[d].is_zero():
            return d
    return -1


def _rec_trim(coeffs):
    d = _rec_deg(coeffs)
    return coeffs[: d + 1]


def _rec_content(coeffs):
    g = Poly((), {})
    for c in coeffs:
        g = p_gcd(g, c)
        if g.is_const() and not g.is_zero():
            break
    return g


def _pseudo_rem(a, b):
    """Pseudo-remainder of dense coefficient lists a mod b (deg a >= deg b >= 0)."""
    a = list(a)
    db = len(b) - 1
    lb = b[-1]
    while len(a) - 1 >= db and _rec_deg(a) >= 0:
        da = len(a) - 1
        if a[da].is_zero():
            a.pop()
            continue
        lead = a[da]
        # a = a*lb - lead * x^(da-db) * b
        a = [p_mul(c, lb) for c in a]
        for i, bc in enumerate(b):
            a[da - db + i] = p_sub(a[da - db + i], p_mul(lead, bc))
        a = _rec_trim(a)
        if not a:
            break
    return a


def p_gcd(p, q):
    """GCD over Q (primitive, positive leading coefficient), up to a unit."""
    if p.is_zero():
        return q if q.is_zero() else p_primitive(q)[1]
    if q.is_zero():
        return p_primitive(p)[1]
    # monomial + rational content
    atoms, tp, tq = _align(p, q)
    p = Poly(atoms, tp)
    q = Poly(atoms, tq)
    mp, mq = _monomial_content(p), _monomial_content(q)
    mg = tuple(min(a, b) for a, b in zip(mp, mq))
    p = _shift_monomial(p, mg)
    q = _shift_monomial(q, mg)
    _, p = p_primitive(p.strip())
    _, q = p_primitive(q.strip())
    g = _gcd_primitive(p, q)
    mono = Poly(atoms, {mg: Q(1)}).strip() if any(mg) else Poly.const(1)
    return p_primitive(p_mul(g, mono))[1]


def _gcd_primitive(p, q):
    if p.key() == q.key():
        return p
    if p.is_const() or q.is_const():
        return Poly.const(1)
    d = p_divexact(p, q)
    if d is not None:
        return q
    d = p_divexact(q, p)
    if d is not None:
        return p
    common = [a for a in p.atoms if a in set(q.atoms)]
    if not common:
        return Poly.const(1)
    # univariate PRS in the common atom of smallest combined degree
    def maxdeg(poly, a):
        i = poly.atoms.index(a)
        return max(k[i] for k in poly.terms)

    main = min(common, key=lambda a: maxdeg(p, a) + maxdeg(q, a))
    ap, rest_p = _to_recursive(p, p.atoms.index(main))
    aq, rest_q = _to_recursive(q, q.atoms.index(main))
    if len(ap) < len(aq):
        ap, aq = aq, ap
    cp, cq = _rec_content(ap), _rec_content(aq)
    cont = _gcd_primitive(cp, cq) if not (cp.is_const() and cq.is_const()) else Poly.const(1)
    ap = [_pdiv_sure(c, cp) for c in ap]
    aq = [_pdiv_sure(c, cq) for c in aq]
    while True:
        r = _pseudo_rem(ap, aq)
        r = _rec_trim(r)
        if not r:
            g = aq
            break
        if len(r) == 1:
            g = [Poly.const(1)]
            break
        rc = _rec_content(r)
        r = [_pdiv_sure(c, rc) for c in r]
        ap, aq = aq, r
    guni = _from_recursive(g, main)
    out = p_mul(cont, guni)
    return p_primitive(out)[1]


def _pdiv_sure(p, q):
    d = p_divexact(p, q)
    if d is None:
        raise ArithmeticError("content division failed")
    return d


# ---------------------------------------------------------------------------
# Canonical rational-function form.


class CanonicalForm:
    """num/den, both radical-reduced polynomials over Q with gcd 1 and the
    denominator's leading coefficient normalized to 1."""

    __slots__ = ("num", "den", "_key")

    def __init__(self, num, den):
        self.num = num
        self.den = den
        self._key = None

    def key(self):
        if self._key is None:
            self._key = (self.num.key(), self.den.key())
        return self._key

    def __eq__(self, other):
        return isinstance(other, CanonicalForm) and self.key() == other.key()

    def __hash__(self):
        return hash(self.key())

    def is_zero(self):
        return self.num.is_zero()

    def is_const(self):
        return self.num.is_const() and self.den.is_const()

    def const_value(self):
        return self.num.const_value() / self.den.const_value()

    def atoms(self):
        return set(self.num.atoms) | set(self.den.atoms)

    def __repr__(self):
        return f"CF({to_text(cf_to_expr(self))})"


def _radical_relation(a):
    """For a radical atom base^(1/q): (base polynomial, q); else None."""
    if isinstance(a, Pow):
        q = a.exponent.value.denominator
        base_cf = normalize(a.base)
        if not base_cf.den.is_const() or base_cf.den.const_value() != 1:
            raise UnsupportedNode("radical atom with non-polynomial base")
        return base_cf.num, q
    return None


def _reduce_radicals(p):
    """Rewrite rho^e -> base^(e//q) * rho^(e%q) for every radical atom."""
    rad_pos = []
    for i, a in enumerate(p.atoms):
        rel = _radical_relation(a)
        if rel is not None:
            rad_pos.append((i, rel[0], rel[1]))
    if not rad_pos:
        return p
    if not any(k[i] >= q for k, _ in p.terms.items() for (i, _b, q) in rad_pos):
        return p
    acc = Poly((), {})
    for k, v in p.terms.items():
        mult = Poly.const(v)
        nk = list(k)
        for i, base, q in rad_pos:
            if nk[i] >= q:
                mult = p_mul(mult, p_pow(base, nk[i] // q))
                nk[i] = nk[i] % q
        mono = Poly(p.atoms, {tuple(nk): Q(1)})
        acc = p_add(acc, p_mul(mult, mono))
    return acc.strip()


def _rationalize_monomial_radicals(num, den):
    """Remove radical atoms from the denominator's monomial content."""
    while True:
        mc = _monomial_content(den)
        if not mc:
            return num, den
        fix = None
        for i, a in enumerate(den.atoms):
            if mc[i] > 0:
                rel = _radical_relation(a)
                if rel is not None:
                    fix = (a, rel[1] - mc[i] % rel[1] if mc[i] % rel[1] else 0)
                    if fix[1]:
                        break
                    fix = None
        if fix is None:
            return num, den
        a, extra = fix
        m = Poly.atom(a, extra)
        num = _reduce_radicals(p_mul(num, m))
        den = _reduce_radicals(p_mul(den, m))


def _make_cf(num, den):
    num = _reduce_radicals(num)
    den = _reduce_radicals(den)
    if den.is_zero():
        raise ZeroDivisionError("zero denominator in canonical form")
    if num.is_zero():
        return CanonicalForm(Poly((), {}), Poly.const(1))
    g = p_gcd(num, den)
    if not (g.is_const() and g.const_value() == 1):
        num = _pdiv_sure(num, g)
        den = _pdiv_sure(den, g)
    num, den = _rationalize_monomial_radicals(num, den)
    g = p_gcd(num, den)
    if not (g.is_const() and g.const_value() == 1):
        num = _pdiv_sure(num, g)
        den = _pdiv_sure(den, g)
    _, lc = den.leading()
    if lc != 1:
        num = p_scale(num, 1 / lc)
        den = p_scale(den, 1 / lc)
    return CanonicalForm(num.strip(), den.strip())


def cf_const(c):
    return _make_cf(Poly.const(c), Poly.const(1))


def cf_add(a, b):
    return _make_cf(p_add(p_mul(a.num, b.den), p_mul(b.num, a.den)), p_mul(a.den, b.den))


def cf_sub(a, b):
    return _make_cf(p_sub(p_mul(a.num, b.den), p_mul(b.num, a.den)), p_mul(a.den, b.den))


def cf_mul(a, b):
    return _make_cf(p_mul(a.num, b.num), p_mul(a.den, b.den))


def cf_neg(a):
    return CanonicalForm(p_neg(a.num), a.den)


def cf_div(a, b):
    if b.is_zero():
        raise ZeroDivisionError("division by zero canonical form")
    return _make_cf(p_mul(a.num, b.den), p_mul(a.den, b.num))


def cf_pow_int(a, n):
    if n == 0:
        return cf_const(1)
    if n < 0:
        if a.is_zero():
            raise ZeroDivisionError("negative power of zero")
        return _make_cf(p_pow(a.den, -n), p_pow(a.num, -n))
    return _make_cf(p_pow(a.num, n), p_pow(a.den, n))


def _underlying_base(a):
    """(base expression, q) for exponent bookkeeping in fractional powers."""
    if isinstance(a, Pow):
        return a.base, a.exponent.value.denominator
    return a, 1


def _atom_rational_power(base_expr, e):
    """base_expr^e for an atom-like canonical base expression, e rational.

    Returns a CanonicalForm.  Fractional residues become radical atoms
    Pow(base_expr, 1/q)."""
    num = Poly.const(1)
    den = Poly.const(1)
    q = e.denominator
    whole, resid = divmod(e.numerator, q)
    if whole > 0:
        num = p_pow(_poly_of_atom_expr(base_expr), whole)
    elif whole < 0:
        den = p_pow(_poly_of_atom_expr(base_expr), -whole)
    if resid:
        rad = rpow(base_expr, Rat(Q(1, q)))
        if isinstance(rad, Pow):
            num = p_mul(num, Poly.atom(rad, resid))
        else:
            # the root folded exactly (perfect power)
            cf = cf_pow_int(normalize(rad), resid)
            return cf_mul(cf, _make_cf(num, den))
    return _make_cf(num, den)


def _poly_of_atom_expr(e):
    if isinstance(e, _ATOM_TYPES):
        return Poly.atom(e)
    cf = normalize(e)
    if not (cf.den.is_const() and cf.den.const_value() == 1):
        raise UnsupportedNode("expected polynomial base")
    return cf.num


def _poly_rational_power(p, e):
    """p^e for a polynomial p and rational e with e.denominator > 1."""
    if p.is_zero():
        if e < 0:
            raise ZeroDivisionError
        return cf_const(0)
    # single-term: distribute over the monomial, tracking per-base exponents
    if len(p.terms) == 1:
        (k, v), = p.terms.items()
        out = cf_const(1)
        croot = _rat_root(v, e.denominator) if v > 0 or e.denominator % 2 else None
        if croot is not None:
            out = cf_mul(out, cf_pow_int(cf_const(croot), e.numerator))
        else:
            out = cf_mul(out, _atom_rational_power(Rat(v), e))
        per_base = {}
        order = []
        for a, ea in zip(p.atoms, k):
            if not ea:
                continue
            b, q0 = _underlying_base(a)
            if b not in per_base:
                per_base[b] = Q(0)
                order.append(b)
            per_base[b] += Q(ea, q0)
        for b in order:
            out = cf_mul(out, _atom_rational_power(b, per_base[b] * e))
        return out
    c, prim = p_primitive(p)
    out = cf_const(1)
    if c != 1:
        croot = _rat_root(c, e.denominator) if c > 0 or e.denominator % 2 else None
        if croot is not None:
            out = cf_pow_int(cf_const(croot), e.numerator)
        else:
            out = _atom_rational_power(Rat(c), e)
    base_expr = cf_to_expr(CanonicalForm(prim, Poly.const(1)))
    return cf_mul(out, _atom_rational_power(base_expr, e))


def cf_pow(a, e):
    if e.denominator == 1:
        return cf_pow_int(a, e.numerator)
    if a.is_zero():
        if e < 0:
            raise ZeroDivisionError
        return cf_const(0)
    n = _poly_rational_power(a.num, e)
    d = _poly_rational_power(a.den, e)
    return cf_div(n, d)


def _canonical_opq(e):
    arg = cf_to_expr(normalize(e.arg))
    return Opq(e.name, arg, e.order)


def _canonical_fun(e):
    """exp gets rational content extracted from its argument so that, e.g.,
    exp(2*a) and exp(a)^2 share one atom; ln and W keep canonical args."""
    if e.fname == "exp":
        cf = normalize(e.arg)
        if cf.is_zero():
            return cf_const(1)
        cn, pn = p_primitive(cf.num)
        cd, pd = p_primitive(cf.den)
        content = cn / cd
        prim = cf_to_expr(CanonicalForm(pn, pd))
        atom = Fun("exp", prim)
        if content == 1:
            return _make_cf(Poly.atom(atom), Poly.const(1))
        return _atom_rational_power(atom, content)
    arg = cf_to_expr(normalize(e.arg))
    atom = Fun(e.fname, arg)
    return _make_cf(Poly.atom(atom), Poly.const(1))


@lru_cache(maxsize=200000)
def normalize(e):
    """Canonical rational-function form of e.

    Raises UnsupportedNode for powers with non-rational exponents."""
    if isinstance(e, Rat):
        return cf_const(e.value)
    if isinstance(e, (Sym, Par, Jet)):
        return _make_cf(Poly.atom(e), Poly.const(1))
    if isinstance(e, Opq):
        return _make_cf(Poly.atom(_canonical_opq(e)), Poly.const(1))
    if isinstance(e, Fun):
        return _canonical_fun(e)
    if isinstance(e, Add):
        acc = cf_const(0)
        for t in e.terms:
            acc = cf_add(acc, normalize(t))
        return acc
    if isinstance(e, Mul):
        acc = cf_const(1)
        for f in e.factors:
            acc = cf_mul(acc, normalize(f))
        return acc
    if isinstance(e, Pow):
        if not isinstance(e.exponent, Rat):
            raise UnsupportedNode(f"non-rational exponent: {to_text(e.exponent)}")
        return cf_pow(normalize(e.base), e.exponent.value)
    raise UnsupportedNode(f"unsupported node {type(e).__name__}")


def cf_to_expr(cf):
    """Deterministic expression rendering of a canonical form."""
    num = _poly_to_expr(cf.num)
    if cf.den.is_const() and cf.den.const_value() == 1:
        return num
    return rmul(num, rpow(_poly_to_expr(cf.den), MINUS_ONE))


def _poly_to_expr(p):
    if p.is_zero():
        return ZERO
    terms = sorted(p.terms.items(), key=lambda kv: (sum(kv[0]), kv[0]), reverse=True)
    out = []
    for k, v in terms:
        factors = [Rat(v)] if v != 1 or not any(k) else []
        for a, e in zip(p.atoms, k):
            if e:
                factors.append(rpow(a, Rat(Q(e))) if e != 1 else a)
        out.append(rmul(*factors) if factors else ONE)
    return radd(*out) if len(out) > 1 else out[0]


def is_zero(e):
    """Exact zero test within the supported class."""
    return normalize(e).is_zero()


def equivalent(a, b):
    return is_zero(a - b)


# ---------------------------------------------------------------------------
# Substitution.


def _binding_key(k):
    if isinstance(k, (Sym, Par, Jet)):
        return k
    if isinstance(k, Opq):
        return _canonical_opq(k)
    if isinstance(k, Fun):
        return Fun(k.fname, cf_to_expr(normalize(k.arg)))
    raise TypeError(f"cannot bind {type(k).__name__}")


def substitute(e, bindings):
    """Simultaneous substitution of atoms (symbols, parameters, jet atoms,
    opaque-function atoms, elementary-function atoms) by expressions.

    Raises CyclicBinding when two or more distinct keys form a dependency
    cycle (self-references are allowed and harmless since the substitution
    is one simultaneous pass)."""
    table = {}
    for k, v in bindings.items():
        table[_binding_key(k)] = _coerce(v)
    _check_cycles(table)
    return _subst(e, _SubstTable(table))


class _SubstTable:
    def __init__(self, table):
        self.table = table
        self.keys = set(table)

    def lookup(self, atom):
        return self.table.get(atom)


def _check_cycles(table):
    keys = list(table)
    deps = {}
    for k, v in table.items():
        occurring = set()
        _collect_bound_atoms(v, table, occurring)
        occurring.discard(k)
        deps[k] = occurring
    seen = {}

    def visit(k, stack):
        if k in stack:
            raise CyclicBinding(f"cyclic bindings through {_atom_name(k)}")
        if seen.get(k):
            return
        stack.add(k)
        for d in deps.get(k, ()):
            visit(d, stack)
        stack.discard(k)
        seen[k] = True

    for k in keys:
        visit(k, set())


def _collect_bound_atoms(e, table, out):
    if isinstance(e, (Sym, Par, Jet)):
        if e in table:
            out.add(e)
        return
    if isinstance(e, Opq):
        ck = _canonical_opq(e)
        if ck in table:
            out.add(ck)
        _collect_bound_atoms(e.arg, table, out)
        return
    if isinstance(e, Fun):
        ck = Fun(e.fname, cf_to_expr(normalize(e.arg)))
        if ck in table:
            out.add(ck)
        _collect_bound_atoms(e.arg, table, out)
        return
    if isinstance(e, Add):
        for t in e.terms:
            _collect_bound_atoms(t, table, out)
    elif isinstance(e, Mul):
        for f in e.factors:
            _collect_bound_atoms(f, table, out)
    elif isinstance(e, Pow):
        _collect_bound_atoms(e.base, table, out)
        _collect_bound_atoms(e.exponent, table, out)


def _subst(e, st):
    if isinstance(e, Rat):
        return e
    if isinstance(e, (Sym, Par, Jet)):
        hit = st.lookup(e)
        return hit if hit is not None else e
    if isinstance(e, Opq):
        arg = _subst(e.arg, st)
        node = Opq(e.name, arg, e.order)
        hit = st.lookup(_canonical_opq(node))
        return hit if hit is not None else node
    if isinstance(e, Fun):
        arg = _subst(e.arg, st)
        node = Fun(e.fname, cf_to_expr(normalize(arg)))
        hit = st.lookup(node)
        if hit is not None:
            return hit
        if e.fname == "exp":
            return rexp(arg)
        if e.fname == "ln":
            return rln(arg)
        return rW(arg)
    if isinstance(e, Add):
        return radd(*[_subst(t, st) for t in e.terms])
    if isinstance(e, Mul):
        return rmul(*[_subst(f, st) for f in e.factors])
    if isinstance(e, Pow):
        return rpow(_subst(e.base, st), _subst(e.exponent, st))
    raise UnsupportedNode(type(e).__name__)


# ---------------------------------------------------------------------------
# Coefficient extraction.


def collect(e, atoms):
    """Coefficients of e as a polynomial in the given atoms.

    Returns a dict {exponent tuple aligned with `atoms`: coefficient Expr}.
    The coefficients contain none of the listed atoms; raises
    NotPolynomialInAtoms when e is not polynomial in them (atom in a
    denominator or inside a radical)."""
    cf = normalize(e)
    targets = [_binding_key(a) for a in atoms]
    tset = set(targets)
    for a in cf.den.atoms:
        if a in tset:
            raise NotPolynomialInAtoms(f"{_atom_name(a)} occurs in a denominator")
    for a in list(cf.num.atoms) + list(cf.den.atoms):
        rel = _radical_relation(a)
        if rel is not None and any(b in tset for b in rel[0].atoms):
            raise NotPolynomialInAtoms(f"listed atom inside radical {_atom_name(a)}")
    pos = {}
    for i, a in enumerate(cf.num.atoms):
        if a in tset:
            pos[targets.index(a)] = i
    groups = {}
    n = len(cf.num.atoms)
    for k, v in cf.num.terms.items():
        key = tuple(k[pos[j]] if j in pos else 0 for j in range(len(targets)))
        rk = tuple(0 if i in pos.values() else k[i] for i in range(n))
        groups.setdefault(key, {})
        groups[key][rk] = groups[key].get(rk, Q(0)) + v
    out = {}
    for key, terms in groups.items():
        poly = Poly(cf.num.atoms, {k: v for k, v in terms.items() if v}).strip()
        if poly.is_zero():
            continue
        out[key] = cf_to_expr(_make_cf(poly, cf.den))
    return out


def collect_rebuild(coeffs, atoms):
    """Inverse of collect: sum of monomial * coefficient."""
    acc = ZERO
    for key, c in coeffs.items():
        m = c
        for a, e in zip(atoms, key):
            if e:
                m = rmul(m, rpow(a, Rat(Q(e))))
        acc = radd(acc, m)
    return acc


def atoms_of(e):
    """All leaf atoms occurring in e (structurally, pre-canonicalization)."""
    out = set()

    def walk(n):
        if isinstance(n, (Sym, Par, Jet, Opq, Fun)):
            out.add(n)
            if isinstance(n, (Opq, Fun)):
                walk(n.arg)
        elif isinstance(n, Add):
            for t in n.terms:
                walk(t)
        elif isinstance(n, Mul):
            for f in n.factors:
                walk(f)
        elif isinstance(n, Pow):
            walk(n.base)
            walk(n.exponent)

    walk(e)
    return out

"""Text <-> expression conversion.

The grammar is the wire format used in catalog files, CLI arguments and
reports: infix + - * / ^ with the usual precedence (^ right-associative,
unary minus binding below ^), no juxtaposition-multiplication, prime marks
for derivatives of declared single-variable functions (w'', g'(t)),
D(u,x,t) for jet atoms of multi-variable dependents, and exp/ln/W calls.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

from .expr import (
    Expr,
    Jet,
    Opq,
    Par,
    Rat,
    Sym,
    cf_to_expr,
    normalize,
    radd,
    rexp,
    rln,
    rmul,
    rneg,
    rpow,
    rW,
    to_text,
)


@dataclass(frozen=True)
class SourceSpan:
    start: int
    end: int


class ParseFailure(Exception):
    def __init__(self, message, span):
        super().__init__(f"{message} (at {span.start}..{span.end})")
        self.message = message
        self.span = span


class ExprSyntaxError(ParseFailure):
    pass


class UnknownIdentifier(ParseFailure):
    pass


@dataclass(frozen=True)
class Namespace:
    """Declared-names table: which identifiers are symbols, parameters,
    single-variable functions (name -> its variable) and multi-variable
    dependents (name -> variable tuple)."""

    symbols: frozenset = frozenset({"t", "x", "y", "z"})
    parameters: frozenset = frozenset(
        {"k0", "k1", "c1", "c2", "c3", "r", "s", "alpha", "beta", "A", "B", "eps"}
    )
    functions: tuple = (("f", "t"), ("g", "t"), ("h", "t"), ("w", "z"))
    dependents: tuple = (("u", ("t", "x", "y")),)

    def function_var(self, name):
        for n, v in self.functions:
            if n == name:
                return v
        return None

    def dependent_vars(self, name):
        for n, v in self.dependents:
            if n == name:
                return v
        return None

    def with_symbols(self, *names):
        return replace(self, symbols=self.symbols | set(names))

    def with_parameters(self, *names):
        return replace(self, parameters=self.parameters | set(names))

    def with_function(self, name, var):
        return replace(self, functions=self.functions + ((name, var),))


STANDARD = Namespace()

_OPS = "+-*/^(),"


@dataclass
class _Token:
    kind: str  # 'int' | 'name' | 'op' | 'prime'
    text: str
    start: int
    end: int

    @property
    def span(self):
        return SourceSpan(self.start, self.end)


def _tokenize(text):
    toks = []
    i, n = 0, len(text)
    while i < n:
        c = text[i]
        if c.isspace():
            i += 1
            continue
        if c.isdigit():
            j = i
            while j < n and text[j].isdigit():
                j += 1
            if j < n and text[j] == ".":
                raise ExprSyntaxError("decimal literals are not allowed; use p/q rationals", SourceSpan(i, j + 1))
            toks.append(_Token("int", text[i:j], i, j))
            i = j
            continue
        if c.isalpha() or c == "_":
            j = i
            while j < n and (text[j].isalnum() or text[j] == "_"):
                j += 1
            toks.append(_Token("name", text[i:j], i, j))
            i = j
            continue
        if c == "'":
            j = i
            while j < n and text[j] == "'":
                j += 1
            toks.append(_Token("prime", text[i:j], i, j))
            i = j
            continue
        if c in _OPS:
            toks.append(_Token("op", c, i, i + 1))
            i += 1
            continue
        raise ExprSyntaxError(f"unexpected character {c!r}", SourceSpan(i, i + 1))
    return toks


_PREC = {"+": 10, "-": 10, "*": 20, "/": 20, "^": 30}
_UNARY_PREC = 25


class _Parser:
    def __init__(self, text, ns):
        self.text = text
        self.ns = ns
        self.toks = _tokenize(text)
        self.pos = 0

    def peek(self):
        return self.toks[self.pos] if self.pos < len(self.toks) else None

    def next(self):
        t = self.peek()
        if t is None:
            raise ExprSyntaxError("unexpected end of input", SourceSpan(len(self.text), len(self.text)))
        self.pos += 1
        return t

    def expect(self, text):
        t = self.next()
        if t.kind != "op" or t.text != text:
            raise ExprSyntaxError(f"expected {text!r}", t.span)
        return t

    def parse(self):
        e = self.expr(0)
        t = self.peek()
        if t is not None:
            raise ExprSyntaxError(f"unexpected token {t.text!r}", t.span)
        return e

    def expr(self, min_prec):
        lhs = self.prefix(min_prec)
        while True:
            t = self.peek()
            if t is None or t.kind != "op" or t.text not in _PREC:
                break
            prec = _PREC[t.text]
            if prec < min_prec:
                break
            self.next()
            if t.text == "^":
                rhs = self.expr(prec)  # right-associative
                lhs = rpow(lhs, rhs)
            else:
                rhs = self.expr(prec + 1)
                if t.text == "+":
                    lhs = radd(lhs, rhs)
                elif t.text == "-":
                    lhs = radd(lhs, rneg(rhs))
                elif t.text == "*":
                    lhs = rmul(lhs, rhs)
                else:
                    lhs = rmul(lhs, rpow(rhs, Rat(-1)))
        return lhs

    def prefix(self, min_prec):
        t = self.next()
        if t.kind == "op" and t.text == "-":
            if min_prec > _UNARY_PREC:
                raise ExprSyntaxError("unary minus binds below ^; parenthesize the exponent", t.span)
            return rneg(self.expr(_UNARY_PREC + 1))
        if t.kind == "op" and t.text == "(":
            e = self.expr(0)
            self.expect(")")
            return e
        if t.kind == "int":
            return Rat(int(t.text))
        if t.kind == "name":
            return self.name(t)
        raise ExprSyntaxError(f"unexpected token {t.text!r}", t.span)

    def name(self, t):
        name = t.text
        order = 0
        nt = self.peek()
        if nt is not None and nt.kind == "prime":
            order = len(nt.text)
            self.next()
        args = None
        nt = self.peek()
        if nt is not None and nt.kind == "op" and nt.text == "(":
            self.next()
            args = [self.expr(0)]
            while (p := self.peek()) is not None and p.kind == "op" and p.text == ",":
                self.next()
                args.append(self.expr(0))
            self.expect(")")

        fv = self.ns.function_var(name)
        if fv is not None:
            if args is not None and len(args) != 1:
                raise ExprSyntaxError(f"{name} takes one argument", t.span)
            arg = args[0] if args is not None else Sym(fv)
            return Opq(name, arg, order)
        if order:
            raise ExprSyntaxError("prime marks are only allowed on declared functions", t.span)
        if name == "D":
            return self.jet(t, args)
        if name in ("exp", "ln", "W"):
            if args is None or len(args) != 1:
                raise ExprSyntaxError(f"{name} takes one argument", t.span)
            return {"exp": rexp, "ln": rln, "W": rW}[name](args[0])
        if args is not None:
            raise ExprSyntaxError(f"{name} is not a function", t.span)
        if self.ns.dependent_vars(name) is not None:
            return Jet(name, ())
        if name in self.ns.symbols:
            return Sym(name)
        if name in self.ns.parameters:
            return Par(name)
        raise UnknownIdentifier(f"unknown identifier {name!r}", t.span)

    def jet(self, t, args):
        if not args or len(args) < 2:
            raise ExprSyntaxError("D(dep, var, ...) needs a dependent and variables", t.span)
        dep = args[0]
        if not isinstance(dep, Jet) or dep.idx:
            raise ExprSyntaxError("first D argument must be a dependent name", t.span)
        dvars = self.ns.dependent_vars(dep.dep)
        idx = []
        for a in args[1:]:
            if not isinstance(a, Sym) or a.name not in dvars:
                raise ExprSyntaxError(f"D variables must be independents of {dep.dep}", t.span)
            idx.append(a.name)
        return Jet(dep.dep, tuple(idx))


def parse(text, ns=STANDARD):
    """Parse text into an expression."""
    return _Parser(text, ns).parse()


def print_expr(e, ns=STANDARD):
    """Deterministic canonical rendering; the output re-parses to an
    is_zero-equal expression."""
    return to_text(cf_to_expr(normalize(e)))

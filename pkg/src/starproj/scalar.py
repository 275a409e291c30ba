"""Commutative scalar kernel.

Scalars are finite sums of terms

    (a + b*I) * hbar^h * Ginv^g * m

where a, b are exact rationals, I is the imaginary unit, Ginv is the formal
inverse of the gradient square Gsq = sum_i G_i G_i, and m is a monomial in
position symbols x_i and derivative jets of the surface function G (plus
optional user-registered formal atoms).

Canonical form: within each hbar grade all terms are put over the common
Ginv power and the numerator polynomial is divided by the Gsq polynomial as
many times as possible.  Equal scalars therefore compare equal as dicts.
Everything is immutable; arithmetic returns new objects.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable

from .errors import DivisionByZero, DivisionByZeroSymbol, UnboundAtom

Frac = Fraction


from math import gcd as _gcd


class Q:
    """Gaussian rational (a + b*I)/d with integer numerators, d > 0."""

    __slots__ = ('a', 'b', 'd')

    def __init__(self, a=0, b=0, d=1, _norm=True):
        if _norm:
            if d < 0:
                a, b, d = -a, -b, -d
            g = _gcd(_gcd(abs(a), abs(b)), d)
            if g > 1:
                a //= g
                b //= g
                d //= g
        self.a = a
        self.b = b
        self.d = d

    @property
    def re(self):
        return Fraction(self.a, self.d)

    @property
    def im(self):
        return Fraction(self.b, self.d)

    def __add__(self, o):
        if self.d == o.d:
            return Q(self.a + o.a, self.b + o.b, self.d)
        return Q(self.a * o.d + o.a * self.d, self.b * o.d + o.b * self.d,
                 self.d * o.d)

    def __sub__(self, o):
        if self.d == o.d:
            return Q(self.a - o.a, self.b - o.b, self.d)
        return Q(self.a * o.d - o.a * self.d, self.b * o.d - o.b * self.d,
                 self.d * o.d)

    def __mul__(self, o):
        return Q(self.a * o.a - self.b * o.b, self.a * o.b + self.b * o.a,
                 self.d * o.d)

    def __neg__(self):
        return Q(-self.a, -self.b, self.d, _norm=False)

    def conj(self):
        return Q(self.a, -self.b, self.d, _norm=False)

    def inv(self):
        n = self.a * self.a + self.b * self.b
        if n == 0:
            raise DivisionByZero("inverse of zero")
        return Q(self.a * self.d, -self.b * self.d, n)

    def is_zero(self):
        return self.a == 0 and self.b == 0

    def __eq__(self, o):
        return (isinstance(o, Q) and self.a == o.a and self.b == o.b
                and self.d == o.d)

    def __hash__(self):
        return hash((self.a, self.b, self.d))

    def __repr__(self):
        return f"Q({self.a},{self.b},{self.d})"

    def __str__(self):
        if self.b == 0:
            return str(Fraction(self.a, self.d))
        if self.a == 0:
            return f"{Fraction(self.b, self.d)}*I"
        return (f"({Fraction(self.a, self.d)}"
                f"{'+' if self.b > 0 else '-'}{abs(Fraction(self.b, self.d))}*I)")


QZERO = Q()
QONE = Q(1)
QI = Q(0, 1)


def qnum(re, im=0):
    re = Fraction(re)
    im = Fraction(im)
    d = re.denominator * im.denominator // _gcd(re.denominator, im.denominator)
    return Q(re.numerator * (d // re.denominator),
             im.numerator * (d // im.denominator), d, _norm=False)


# Atom keys.  ('x', i) position symbol; ('g', derivs) jet of the surface
# function, derivs a sorted tuple of 1-based indices; ('sym', name, tensor,
# derivs) user-registered formal atom.
def x_atom(i):
    return ('x', i)


def g_jet(derivs=()):
    return ('g', tuple(sorted(derivs)))


def sym_atom(name, tensor=(), derivs=()):
    return ('sym', name, tuple(tensor), tuple(sorted(derivs)))


def _mono_mul(m1, m2):
    d = dict(m1)
    for a, p in m2:
        d[a] = d.get(a, 0) + p
    return tuple(sorted((a, p) for a, p in d.items() if p))


def _poly_mul(p1, p2):
    out = {}
    for m1, c1 in p1.items():
        for m2, c2 in p2.items():
            m = _mono_mul(m1, m2)
            c = out.get(m, QZERO) + c1 * c2
            if c.is_zero():
                out.pop(m, None)
            else:
                out[m] = c
    return out


def _poly_pow(p, k):
    out = {(): QONE}
    for _ in range(k):
        out = _poly_mul(out, p)
    return out


def _mono_divides(m1, m2):
    """Does monomial m1 divide m2? Return quotient monomial or None."""
    d2 = dict(m2)
    quo = {}
    for a, p in m1:
        if d2.get(a, 0) < p:
            return None
        d2[a] -= p
    for a, p in m2:
        r = d2[a]
        if r:
            quo[a] = r
        d2[a] = 0
    return tuple(sorted(quo.items()))


def _mono_lex_key(m):
    """Sparse lex key: earlier atoms more significant, higher power bigger."""
    return tuple((a, p) for a, p in sorted(m))


def _mono_lex_max(p):
    """Lex-leading monomial of a polynomial dict."""
    best = None
    for m in p:
        if best is None or _lex_greater(m, best):
            best = m
    return best


def _lex_greater(m1, m2):
    d1, d2 = dict(m1), dict(m2)
    for a in sorted(set(d1) | set(d2)):
        p1, p2 = d1.get(a, 0), d2.get(a, 0)
        if p1 != p2:
            return p1 > p2
    return False


class SurfaceContext:
    """Fixes the dimension, the surface mode, and the Ginv denominator.

    In formal mode the gradient square is the polynomial sum_i G_(i)^2 in
    independent jet atoms.  In bound mode the surface function is a concrete
    polynomial in x and the gradient square evaluates accordingly; Ginv then
    denotes the formal inverse of its primitive part, with the rational
    content folded into coefficients.
    """

    def __init__(self, nvars, bound=None):
        self.nvars = nvars
        self.bound = None
        self._jet_cache = {}
        if bound is None:
            q = {}
            for i in range(1, nvars + 1):
                q[(((('g', (i,))), 2),)] = QONE
            self.q_poly = q
            self.q_content = Fraction(1)
        else:
            # bound: dict monomial -> Q over x atoms only
            self.bound = dict(bound)
            grad_sq = {}
            for i in range(1, nvars + 1):
                gi = _poly_diff_x(self.bound, i)
                grad_sq = _poly_add(grad_sq, _poly_mul(gi, gi))
            if not grad_sq:
                raise DivisionByZeroSymbol("gradient square identically zero")
            lead = _mono_lex_max(grad_sq)
            content = grad_sq[lead]
            if content.im != 0:
                raise DivisionByZeroSymbol("complex surface binding")
            cinv = content.inv()
            self.q_poly = {m: c * cinv for m, c in grad_sq.items()}
            self.q_content = content.re
        self.q_lead = _mono_lex_max(self.q_poly)
        assert self.q_poly[self.q_lead] == QONE
        self.q_tail = {m: c for m, c in self.q_poly.items() if m != self.q_lead}

    def zero(self):
        return ScalarExpr(self, {})

    def scalar(self, re, im=0, hbar=0):
        c = qnum(re, im)
        if c.is_zero():
            return self.zero()
        return ScalarExpr(self, {(hbar, 0, ()): c})

    def one(self):
        return self.scalar(1)

    def i_hbar(self):
        return self.scalar(0, 1, hbar=1)

    def x(self, i):
        return ScalarExpr(self, {(0, 0, ((x_atom(i), 1),)): QONE})

    def atom(self, key, hbar=0, ginv=0):
        return ScalarExpr(self, {(hbar, ginv, ((key, 1),)): QONE})

    def surface(self, derivs=()):
        """Jet of the surface function; bound mode differentiates the binding."""
        if self.bound is None:
            return ScalarExpr(self, {(0, 0, ((g_jet(derivs), 1),)): QONE})
        p = dict(self.bound)
        for i in derivs:
            p = _poly_diff_x(p, i)
        return ScalarExpr(self, {(0, 0, m): c for m, c in p.items()})

    def ginv(self, power=1):
        e = ScalarExpr(self, {(0, power, ()): QONE})
        if self.bound is not None and self.q_content != 1:
            e = e * self.scalar(Fraction(1) / self.q_content ** power)
        return e

    def grad_square(self):
        g = self.zero()
        for i in range(1, self.nvars + 1):
            gi = self.surface((i,))
            g = g + gi * gi
        return g

    def nu(self, i):
        """-Ginv * G_i"""
        return -(self.ginv() * self.surface((i,)))

    def mu3(self, k, l):
        """-Ginv * G_kl"""
        return -(self.ginv() * self.surface((k, l)))

    def mu2(self, i, k, l):
        """G_i * mu3_kl"""
        return self.surface((i,)) * self.mu3(k, l)

    def transverse_projector(self, i, j):
        """delta_ij - Ginv G_i G_j (definition inferred from usage; see README)."""
        d = self.one() if i == j else self.zero()
        return d - self.ginv() * self.surface((i,)) * self.surface((j,))


def _poly_add(p1, p2):
    out = dict(p1)
    for m, c in p2.items():
        nc = out.get(m, QZERO) + c
        if nc.is_zero():
            out.pop(m, None)
        else:
            out[m] = nc
    return out


def _poly_diff_x(p, i):
    out = {}
    xi = x_atom(i)
    for m, c in p.items():
        for a, pw in m:
            if a == xi:
                dm = tuple(sorted([(b, q) for b, q in m if b != a] +
                                  ([(a, pw - 1)] if pw > 1 else [])))
                nc = out.get(dm, QZERO) + c * qnum(pw)
                if nc.is_zero():
                    out.pop(dm, None)
                else:
                    out[dm] = nc
    return out


class ScalarExpr:
    """Immutable canonical scalar over a SurfaceContext."""

    __slots__ = ('ctx', 'terms', '_hash')

    def __init__(self, ctx, terms, _canonical=False):
        self.ctx = ctx
        if _canonical:
            self.terms = terms
        else:
            self.terms = _canonicalize(ctx, terms)
        self._hash = None

    # -- ring structure ----------------------------------------------------
    def __add__(self, other):
        _check(self, other)
        out = dict(self.terms)
        for k, c in other.terms.items():
            nc = out.get(k, QZERO) + c
            if nc.is_zero():
                out.pop(k, None)
            else:
                out[k] = nc
        return ScalarExpr(self.ctx, out)

    def __sub__(self, other):
        return self + (-other)

    def __neg__(self):
        return ScalarExpr(self.ctx, {k: -c for k, c in self.terms.items()},
                          _canonical=True)

    def __mul__(self, other):
        _check(self, other)
        out = {}
        for (h1, g1, m1), c1 in self.terms.items():
            for (h2, g2, m2), c2 in other.terms.items():
                k = (h1 + h2, g1 + g2, _mono_mul(m1, m2))
                nc = out.get(k, QZERO) + c1 * c2
                if nc.is_zero():
                    out.pop(k, None)
                else:
                    out[k] = nc
        return ScalarExpr(self.ctx, out)

    def conj(self):
        return ScalarExpr(self.ctx, {k: c.conj() for k, c in self.terms.items()},
                          _canonical=True)

    def scaled(self, coeff, hbar_shift=0):
        if coeff.is_zero():
            return self.ctx.zero()
        return ScalarExpr(self.ctx,
                          {(h + hbar_shift, g, m): c * coeff
                           for (h, g, m), c in self.terms.items()},
                          _canonical=True)

    def truncate(self, order):
        """Drop terms with hbar power above order; returns (expr, dropped)."""
        kept, dropped = {}, 0
        for k, c in self.terms.items():
            if k[0] <= order:
                kept[k] = c
            else:
                dropped += 1
        return ScalarExpr(self.ctx, kept, _canonical=True), dropped

    def is_zero(self):
        return not self.terms

    def hbar_part(self, h):
        return ScalarExpr(self.ctx,
                          {k: c for k, c in self.terms.items() if k[0] == h},
                          _canonical=True)

    def max_hbar(self):
        return max((k[0] for k in self.terms), default=0)

    def __eq__(self, other):
        return (isinstance(other, ScalarExpr) and self.ctx is other.ctx
                and self.terms == other.terms)

    def __hash__(self):
        if self._hash is None:
            self._hash = hash(frozenset(self.terms.items()))
        return self._hash

    def __repr__(self):
        return f"ScalarExpr({render_scalar(self)})"

    def key(self):
        return tuple(sorted(self.terms.items(), key=lambda kv: kv[0]))


def _check(a, b):
    if a.ctx is not b.ctx:
        raise ValueError("scalars from different contexts")


def _canonicalize(ctx, terms):
    """Remainder normal form modulo Ginv * Gsq = 1.

    A term with Ginv power >= 1 whose monomial is divisible by the lex-leading
    monomial of Gsq is rewritten through Ginv*LM = 1 - Ginv*tail; the fixed
    point (no such term) is the unique normal form of the localized ring.
    """
    lead, tail = ctx.q_lead, ctx.q_tail
    out = {}
    work = [(k[0], k[1], k[2], c) for k, c in terms.items()]
    while work:
        h, g, m, c = work.pop()
        if c.is_zero():
            continue
        if g:
            quot = _mono_divides(lead, m)
            if quot is not None:
                work.append((h, g - 1, quot, c))
                for tm, tc in tail.items():
                    work.append((h, g, _mono_mul(tm, quot), -(c * tc)))
                continue
        key = (h, g, m)
        nc = out.get(key)
        nc = c if nc is None else nc + c
        if nc.is_zero():
            out.pop(key, None)
        else:
            out[key] = nc
    return out


# -- kernel operations -----------------------------------------------------

def differentiate(e: ScalarExpr, i: int) -> ScalarExpr:
    """Partial derivative with respect to x_i.

    Leibniz over terms; jets gain a derivative index; Ginv differentiates as
    -Ginv^2 * d(Gsq).
    """
    ctx = e.ctx
    out = {}

    def emit(key, c):
        if c.is_zero():
            return
        nc = out.get(key, QZERO) + c
        if nc.is_zero():
            out.pop(key, None)
        else:
            out[key] = nc

    dq = None
    if any(k[1] for k in e.terms):
        if ctx.bound is None:
            dq = {}
            for k in range(1, ctx.nvars + 1):
                t = _poly_mul({((g_jet((k,)), 1),): qnum(2)},
                              {((g_jet((k, i)), 1),): QONE})
                dq = _poly_add(dq, t)
        else:
            dq = _poly_diff_x(ctx.q_poly, i)
    for (h, g, m), c in e.terms.items():
        # d/dx of each atom in the monomial
        for idx, (a, p) in enumerate(m):
            rest = [(b, q) for j, (b, q) in enumerate(m) if j != idx]
            if p > 1:
                rest.append((a, p - 1))
            base = tuple(sorted(rest))
            if a[0] == 'x':
                if a[1] == i:
                    emit((h, g, base), c * qnum(p))
            elif a[0] == 'g':
                da = g_jet(a[1] + (i,))
                emit((h, g, _mono_mul(base, ((da, 1),))), c * qnum(p))
            elif a[0] == 'sym':
                da = sym_atom(a[1], a[2], a[3] + (i,))
                emit((h, g, _mono_mul(base, ((da, 1),))), c * qnum(p))
        # d/dx of Ginv^g: -g * Ginv^(g+1) * dq
        if g:
            for mm, cc in dq.items():
                emit((h, g + 1, _mono_mul(mm, m)), c * cc * qnum(-g))
    return ScalarExpr(ctx, out)


def grad(e: ScalarExpr) -> list:
    return [differentiate(e, i) for i in range(1, e.ctx.nvars + 1)]


def directional(e: ScalarExpr, vec) -> ScalarExpr:
    """sum_k vec[k] * d_k e   (vec is a list of ScalarExpr, 0-based)."""
    out = e.ctx.zero()
    for k in range(1, e.ctx.nvars + 1):
        out = out + vec[k - 1] * differentiate(e, k)
    return out


def laplacian(e: ScalarExpr) -> ScalarExpr:
    out = e.ctx.zero()
    for k in range(1, e.ctx.nvars + 1):
        out = out + differentiate(differentiate(e, k), k)
    return out


def substitute(e: ScalarExpr, binding: dict) -> ScalarExpr:
    """Replace formal atoms by concrete polynomials in x.

    binding maps base names ('G', or registered names) to ScalarExpr
    polynomials in x over a *bound* context.  Jets turn into actual
    derivatives of the binding; Ginv becomes the formal inverse of the bound
    gradient square.
    """
    if 'G' in binding:
        tgt = binding['G'].ctx
    else:
        tgt = e.ctx
    out = tgt.zero()
    for (h, g, m), c in e.terms.items():
        term = tgt.scalar(1, hbar=h)
        for a, p in m:
            if a[0] == 'x':
                f = tgt.x(a[1])
            elif a[0] == 'g':
                if 'G' not in binding:
                    raise UnboundAtom("no binding for surface function G")
                f = tgt.surface(a[1])
            else:
                if a[1] not in binding:
                    raise UnboundAtom(f"no binding for atom {a[1]}")
                f = binding[a[1]]
                for i in a[3]:
                    f = differentiate(f, i)
            for _ in range(p):
                term = term * f
        if g:
            term = term * tgt.ginv(g)
        out = out + term.scaled(c)
    return out


def eval_numeric(e: ScalarExpr, point: dict, hbar: Fraction) -> Q:
    """Exact rational evaluation at x_i -> point[i], hbar -> value."""
    total = QZERO
    qval = None
    for (h, g, m), c in e.terms.items():
        v = c * qnum(Fraction(hbar) ** h)
        for a, p in m:
            if a[0] != 'x':
                raise UnboundAtom(f"cannot evaluate formal atom {a}")
            if a[1] not in point:
                raise UnboundAtom(f"no value for x_{a[1]}")
            v = v * qnum(Fraction(point[a[1]]) ** p)
        if g:
            if qval is None:
                qval = QZERO
                for mm, cc in e.ctx.q_poly.items():
                    t = cc
                    for a, p in mm:
                        t = t * qnum(Fraction(point[a[1]]) ** p)
                    qval = qval + t
            if qval.is_zero():
                raise DivisionByZero("gradient square vanishes at the point")
            qi = qval.inv()
            for _ in range(g):
                v = v * qi
        total = total + v
    return total


# -- rendering -------------------------------------------------------------

def _atom_str(a):
    if a[0] == 'x':
        return f"x_{a[1]}"
    if a[0] == 'g':
        if not a[1]:
            return "G()"
        return "G(" + ",".join(str(i) for i in a[1]) + ")"
    name, tensor, derivs = a[1], a[2], a[3]
    s = name
    if tensor:
        s += "[" + ",".join(str(i) for i in tensor) + "]"
    if derivs:
        s += "(" + ",".join(str(i) for i in derivs) + ")"
    return s


def render_scalar(e: ScalarExpr) -> str:
    if not e.terms:
        return "0"
    bits = []
    for (h, g, m), c in sorted(e.terms.items(), key=lambda kv: kv[0]):
        fs = []
        if not (c == QONE and (h or g or m)):
            fs.append(str(c))
        if h:
            fs.append("hbar" if h == 1 else f"hbar^{h}")
        if g:
            fs.append("Ginv" if g == 1 else f"Ginv^{g}")
        for a, p in m:
            fs.append(_atom_str(a) if p == 1 else f"{_atom_str(a)}^{p}")
        bits.append("*".join(fs) if fs else "1")
    return " + ".join(bits)

"""Noncommutative operator polynomials over scalar coefficients.

An OperatorExpr is a finite sum  sum_w  c_w(x) * w  where w is a word in the
algebra's generators (canonical order) and c_w a ScalarExpr.  Multiplication
normal-orders: out-of-order generator pairs are swapped against the algebra's
commutator table, and coefficients are pushed to the left through generators
using first-order derivation rules [g, f(x)] = i*hbar * tau^g_k * f_{;k}.

All values are immutable; the algebra object carries the generator order,
the pair table ([g1,g2]/(i*hbar)), the tau rules, and the working hbar
truncation order.  Dropped high-order terms are counted in alg.drop_log.
"""

from __future__ import annotations

from fractions import Fraction

from .errors import UnknownGenerator
from .scalar import Q, QONE, QZERO, qnum, ScalarExpr, differentiate, render_scalar

I_HBAR_INV = qnum(0, -1)  # 1/(i) = -i


class Algebra:
    """Generator set, canonical order, commutator table, coefficient rules."""

    def __init__(self, name, ctx, gens, table=None, tau=None, trunc=4,
                 star_coefficients=False):
        self.name = name
        self.ctx = ctx
        self.gens = list(gens)
        self._order = {g: k for k, g in enumerate(self.gens)}
        self.table = {}            # (g1,g2) with g1 before g2 -> OperatorExpr of [g1,g2]/(i hbar)
        self.tau = tau or {}       # gen -> {k: ScalarExpr} for [g, x_k]/(i hbar)
        self.trunc = trunc
        self.star_coefficients = star_coefficients
        self.drop_log = 0
        self._norm_cache = {}
        self._push_cache = {}
        if table:
            for (g1, g2), v in table.items():
                self.set_commutator(g1, g2, v)

    # -- construction ------------------------------------------------------
    def set_commutator(self, g1, g2, value):
        """Register [g1, g2] = i*hbar*value (value OperatorExpr or ScalarExpr)."""
        if isinstance(value, ScalarExpr):
            value = self.coeff(value)
        if self._order[g1] < self._order[g2]:
            self.table[(g1, g2)] = value
        else:
            self.table[(g2, g1)] = -value

    def pair_value(self, g1, g2):
        """[g1, g2]/(i hbar) with sign, zero if absent."""
        if g1 not in self._order or g2 not in self._order:
            raise UnknownGenerator(f"{g1} or {g2} not in algebra {self.name}")
        v = self.table.get((g1, g2))
        if v is not None:
            return v
        v = self.table.get((g2, g1))
        if v is not None:
            return -v
        return self.zero()

    def order_key(self, g):
        try:
            return self._order[g]
        except KeyError:
            raise UnknownGenerator(f"{g} not in algebra {self.name}") from None

    def zero(self):
        return OperatorExpr(self, {})

    def one(self):
        return self.coeff(self.ctx.one())

    def coeff(self, scalar):
        if isinstance(scalar, (int, Fraction)):
            scalar = self.ctx.scalar(scalar)
        if scalar.is_zero():
            return self.zero()
        return OperatorExpr(self, {(): scalar})

    def gen(self, g):
        if g not in self._order:
            raise UnknownGenerator(f"{g} not in algebra {self.name}")
        return OperatorExpr(self, {(g,): self.ctx.one()})

    # -- normal ordering core ----------------------------------------------
    def _truncate_scalar(self, s):
        s2, dropped = s.truncate(self.trunc)
        self.drop_log += dropped
        return s2

    def norm_word(self, word):
        """Canonical OperatorExpr equal to the product of the letters of word."""
        cached = self._norm_cache.get(word)
        if cached is not None:
            return cached
        pos = None
        for k in range(len(word) - 1):
            if self.order_key(word[k]) > self.order_key(word[k + 1]):
                pos = k
                break
        if pos is None:
            result = OperatorExpr(self, {word: self.ctx.one()})
        else:
            g1, g2 = word[pos], word[pos + 1]
            swapped = word[:pos] + (g2, g1) + word[pos + 2:]
            result = self.norm_word(swapped)
            corr = self.pair_value(g1, g2).scaled_q(qnum(0, 1), 1)  # i hbar V
            if not corr.is_zero():
                left = OperatorExpr(self, {word[:pos]: self.ctx.one()})
                mid = left * corr
                result = result + mid.append_word(word[pos + 2:])
        self._norm_cache[word] = result
        return result

    def push_coeff(self, word, f):
        """word * f  ->  OperatorExpr (f pushed to the left)."""
        if not word or not f.terms:
            return OperatorExpr(self, {word: f} if not f.is_zero() else {})
        if not any(g in self.tau for g in word):
            return OperatorExpr(self, {word: f})
        ck = (word, f)
        cached = self._push_cache.get(ck)
        if cached is not None:
            return cached
        g = word[-1]
        head = word[:-1]
        out = self.push_coeff(head, f).append_gen(g)
        rules = self.tau.get(g)
        if rules:
            for k, t in rules.items():
                df = differentiate(f, k)
                if df.is_zero() or t.is_zero():
                    continue
                corr = self._truncate_scalar((t * df).scaled(qnum(0, 1), 1))
                if not corr.is_zero():
                    out = out + self.push_coeff(head, corr)
        self._push_cache[ck] = out
        return out

    def mul(self, a, b):
        out = {}
        for w1, c1 in a.terms.items():
            for w2, c2 in b.terms.items():
                if self.star_coefficients and _has_atoms(c1) and _has_atoms(c2):
                    raise ValueError(
                        "product of two starred coefficient functions")
                moved = self.push_coeff(w1, c2)
                for wm, cm in moved.terms.items():
                    piece = self.norm_word(wm + w2)
                    cc = self._truncate_scalar(c1 * cm)
                    if cc.is_zero():
                        continue
                    for wf, cf in piece.terms.items():
                        nc = self._truncate_scalar(cc * cf)
                        prev = out.get(wf)
                        nc = nc if prev is None else prev + nc
                        if nc.is_zero():
                            out.pop(wf, None)
                        else:
                            out[wf] = nc
        return OperatorExpr(self, out)


def _has_atoms(scalar):
    return any(m for (_, _, m) in scalar.terms) or any(
        g for (_, g, _) in scalar.terms)


class OperatorExpr:
    __slots__ = ('alg', 'terms', '_hash')

    def __init__(self, alg, terms):
        self.alg = alg
        self.terms = {w: c for w, c in terms.items() if not c.is_zero()}
        self._hash = None

    # internal helpers used during normalization (words stay canonical)
    def append_gen(self, g):
        return OperatorExpr(self.alg, {w + (g,): c for w, c in self.terms.items()})

    def append_word(self, tail):
        if not tail:
            return self
        out = self.alg.zero()
        for w, c in self.terms.items():
            piece = self.alg.norm_word(w + tail)
            out = out + piece.scaled_scalar(c)
        return out

    def scaled_scalar(self, s):
        out = {}
        for w, c in self.terms.items():
            nc = self.alg._truncate_scalar(c * s)
            if not nc.is_zero():
                out[w] = nc
        return OperatorExpr(self.alg, out)

    def scaled_q(self, q, hbar_shift=0):
        if isinstance(q, (int, Fraction)):
            q = qnum(q)
        return OperatorExpr(self.alg,
                            {w: self.alg._truncate_scalar(c.scaled(q, hbar_shift))
                             for w, c in self.terms.items()})

    # -- public algebra ------------------------------------------------------
    def __add__(self, other):
        assert self.alg is other.alg
        out = dict(self.terms)
        for w, c in other.terms.items():
            nc = out.get(w)
            nc = c if nc is None else nc + c
            if nc.is_zero():
                out.pop(w, None)
            else:
                out[w] = nc
        return OperatorExpr(self.alg, out)

    def __sub__(self, other):
        return self + (-other)

    def __neg__(self):
        return OperatorExpr(self.alg, {w: -c for w, c in self.terms.items()})

    def __mul__(self, other):
        return self.alg.mul(self, other)

    def is_zero(self):
        return not self.terms

    def __eq__(self, other):
        return (isinstance(other, OperatorExpr) and self.alg is other.alg
                and self.terms == other.terms)

    def __hash__(self):
        if self._hash is None:
            self._hash = hash(frozenset((w, c.key()) for w, c in self.terms.items()))
        return self._hash

    def key(self):
        return tuple(sorted((w, c.key()) for w, c in self.terms.items()))

    def adjoint(self):
        out = self.alg.zero()
        for w, c in self.terms.items():
            rev = OperatorExpr(self.alg, {tuple(reversed(w)): self.alg.ctx.one()})
            out = out + rev * self.alg.coeff(c.conj())
        return out

    def is_hermitian(self):
        return self == self.adjoint()

    def truncate(self, order):
        out = {}
        for w, c in self.terms.items():
            c2, _ = c.truncate(order)
            if not c2.is_zero():
                out[w] = c2
        return OperatorExpr(self.alg, out)

    def max_hbar(self):
        return max((c.max_hbar() for c in self.terms.values()), default=0)

    def min_hbar(self):
        return min((min(k[0] for k in c.terms) for c in self.terms.values()
                    if c.terms), default=0)

    def rebrand(self, alg):
        """Reinterpret in another algebra whose order agrees on our letters."""
        for w in self.terms:
            for g in w:
                alg.order_key(g)
        return OperatorExpr(alg, dict(self.terms))

    def __repr__(self):
        return f"Op({render_operator(self)})"


# -- free functions ----------------------------------------------------------

def commutator(a, b):
    return a * b - b * a


def commutator_over_ihbar(a, b):
    """[a, b]/(i hbar); asserts the commutator is a multiple of hbar."""
    c = commutator(a, b)
    out = {}
    for w, s in c.terms.items():
        shifted = {}
        for (h, g, m), q in s.terms.items():
            if h == 0:
                raise ArithmeticError("commutator has an hbar-free term")
            shifted[(h - 1, g, m)] = q * I_HBAR_INV
        out[w] = ScalarExpr(s.ctx, shifted, _canonical=True)
    return OperatorExpr(a.alg, out)


def symmetrized(a, b):
    """(ab + ba)/2; Hermitian when a and b are."""
    return (a * b + b * a).scaled_q(Fraction(1, 2))


def normal_order(alg, raw):
    """Canonical form of a raw presentation: iterable of (coeff, word)."""
    out = alg.zero()
    for c, w in raw:
        if isinstance(c, (int, Fraction)):
            c = alg.ctx.scalar(c)
        out = out + alg.norm_word(tuple(w)).scaled_scalar(c)
    return out


def check_jacobi(alg, triple):
    a, b, c = (alg.gen(g) for g in triple)
    s = (commutator(commutator(a, b), c)
         + commutator(commutator(b, c), a)
         + commutator(commutator(c, a), b))
    return s.is_zero()


def substitute_generators(expr, mapping, target):
    """Positional generator substitution, re-normalized in `target`.

    mapping: gen -> OperatorExpr (in target) for eliminated generators;
    all other letters must exist in target with the same mutual table.
    """
    out = target.zero()
    untouched = {}
    for w, c in expr.terms.items():
        if not any(g in mapping for g in w):
            prev = untouched.get(w)
            untouched[w] = c if prev is None else prev + c
            continue
        acc = target.coeff(c)
        for g in w:
            if g in mapping:
                acc = acc * mapping[g]
                if acc.is_zero():
                    break
            else:
                acc = acc * target.gen(g)
        out = out + acc
    if untouched:
        out = out + OperatorExpr(target, untouched)
    return out


def gen_name(g):
    kind, idx = g
    return kind if idx == 0 else f"{kind}{idx}"


def render_operator(e):
    if not e.terms:
        return "0"
    bits = []
    for w in sorted(e.terms, key=lambda w: (len(w), [e.alg.order_key(g) for g in w])):
        c = e.terms[w]
        cs = render_scalar(c)
        ws = "*".join(gen_name(g) for g in w)
        if not w:
            bits.append(f"({cs})")
        else:
            bits.append(f"({cs})*{ws}")
    return " + ".join(bits)

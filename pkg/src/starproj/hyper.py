"""Projection superoperators, uncertainty corrections, and star products.

For a canonical constraint pair set {(xi_a, pi_a)} inside an operator
algebra, the minus maps Z- = [Z, .]/(i hbar) are derivations and the plus
maps Z+ = {Z, .} are symmetrized multiplications.  The projector P onto the
commutant is evaluated through the decomposition-of-unity expansion

    O = sum_{n,m} (-1)^n/(n! m!) xi+^n pi+^m  P  xi-^m pi-^n O ,

unfolded into nested sandwich terms.  Two evaluation modes:

* pure mode (no reduction): operands must be polynomial in the pair set so
  the minus chains terminate; this is the honest projector used for the
  abstract identities and as the contraction oracle.

* reduced mode: the projection is composed with the stage's generator
  elimination.  Chains on formal coefficient functions never terminate, but
  every sandwich factor that survives the elimination costs at least half a
  power of hbar, so the enumeration is cut at 2 * truncation total factors.
  The result is the projected operator written in the next stage's
  generators, which is what the elimination pipeline consumes.
"""

from __future__ import annotations

import itertools
from fractions import Fraction
from math import comb, factorial

from .errors import NonPolynomialInACCS
from .operators import (OperatorExpr, commutator_over_ihbar, substitute_generators,
                        symmetrized)
from .scalar import Q, qnum, differentiate

PURE_DEPTH_CAP = 60


class HyperOperator:
    """A superoperator Z- (derivation) or Z+ (symmetrized multiplication)."""

    def __init__(self, kind, source, action_table=None):
        assert kind in ('minus', 'plus')
        self.kind = kind
        self.source = source
        self.action_table = action_table  # {generator-or-('x',k): OperatorExpr}

    def __call__(self, o):
        if self.kind == 'plus':
            return apply_plus(self, o)
        return apply_minus(self, o)


def apply_plus(h, o):
    assert h.kind == 'plus'
    return symmetrized(h.source, o)


def apply_minus(h, o):
    assert h.kind == 'minus'
    if h.action_table is None:
        return commutator_over_ihbar(h.source, o)
    return _minus_via_table(h, o)


def _minus_via_table(h, o):
    alg = o.alg
    out = alg.zero()
    for w, c in o.terms.items():
        # derivation on the coefficient through its x dependence
        for k in range(1, alg.ctx.nvars + 1):
            act = h.action_table.get(('x', k))
            if act is None or act.is_zero():
                continue
            dc = differentiate(c, k)
            if dc.is_zero():
                continue
            out = out + (alg.coeff(dc) * act) * alg.norm_word(w)
        # derivation on each letter
        for j, g in enumerate(w):
            act = h.action_table.get(g)
            if act is None or act.is_zero():
                continue
            left = OperatorExpr(alg, {w[:j]: c})
            right = alg.norm_word(w[j + 1:])
            out = out + (left * act) * right
    return out


class AccsPair:
    """Conjugate constraint pairs (xi_a, pi_a), a = 1..npairs."""

    def __init__(self, xi, pi, stage=''):
        assert len(xi) == len(pi) and xi
        self.xi = list(xi)
        self.pi = list(pi)
        self.stage = stage
        self.alg = xi[0].alg

    @property
    def npairs(self):
        return len(self.xi)

    def minus(self, which, a):
        z = (self.xi if which == 'xi' else self.pi)[a]
        return HyperOperator('minus', z)

    def plus(self, which, a):
        z = (self.xi if which == 'xi' else self.pi)[a]
        return HyperOperator('plus', z)

    def audit(self):
        """Verify the canonical pair algebra [xi_a, pi_b] = i hbar delta_ab."""
        alg = self.alg
        ok = True
        for a, b in itertools.product(range(self.npairs), repeat=2):
            c = commutator_over_ihbar(self.xi[a], self.pi[b])
            want = alg.one() if a == b else alg.zero()
            ok &= (c == want)
            ok &= commutator_over_ihbar(self.xi[a], self.xi[b]).is_zero()
            ok &= commutator_over_ihbar(self.pi[a], self.pi[b]).is_zero()
        return ok


class ProjectionState:
    """An AccsPair plus the generator elimination of the projected stage.

    reduction: None for pure mode, else (mapping, target_algebra) where
    mapping sends eliminated generators to their replacement in the target.
    """

    def __init__(self, accs, reduction=None, trunc=None):
        self.accs = accs
        self.reduction = reduction
        self.trunc = accs.alg.trunc if trunc is None else trunc
        self._memo = {}
        self._minus_memo = {}
        self._pi_partners = self._partner_analysis()

    def _partner_analysis(self):
        """For pi's that are single bare letters eliminated to zero, the set
        of letters they can contract with.  Used to prune dead sandwiches."""
        if self.reduction is None:
            return None
        mapping, _ = self.reduction
        alg = self.accs.alg
        out = []
        for p in self.accs.pi:
            if len(p.terms) != 1:
                return None
            (w, c), = p.terms.items()
            if len(w) != 1 or c != alg.ctx.one() or w[0] in alg.tau:
                return None
            letter = w[0]
            mapped = mapping.get(letter)
            if mapped is None or not mapped.is_zero():
                return None
            partners = {g for g in alg.gens
                        if not alg.pair_value(letter, g).is_zero()}
            out.append(partners)
        # which xi's contain a partner letter for pi[b]
        provides = []
        for x in self.accs.xi:
            xlets = {g for w in x.terms for g in w}
            provides.append([bool(xlets & partners) for partners in out])
        return out, provides

    def sandwich_alive(self, chained, a_tup, b_tup):
        """False if every dressed term keeps an uncontracted eliminated pi."""
        if self._pi_partners is None or not b_tup:
            return True
        partners, provides = self._pi_partners
        for beta in set(b_tup):
            need = b_tup.count(beta)
            have = sum(1 for a in a_tup if provides[a][beta])
            if have >= need:
                continue
            best = 0
            for w in chained.terms:
                cnt = sum(1 for g in w if g in partners[beta])
                if cnt > best:
                    best = cnt
            if have + best < need:
                return False
        return True

    def reduce(self, o):
        if self.reduction is None:
            return o
        mapping, target = self.reduction
        return substitute_generators(o, mapping, target)

    def _action_table(self, which, a):
        """Exact derivation table of (1/i hbar)[Z, .]: action on every
        generator letter and on each coefficient symbol x_k."""
        key = (which, a)
        got = self._minus_memo.get(key)
        if got is None:
            z = (self.accs.xi if which == 'xi' else self.accs.pi)[a]
            alg = self.accs.alg
            tbl = {}
            for g in alg.gens:
                v = commutator_over_ihbar(z, alg.gen(g))
                if not v.is_zero():
                    tbl[g] = v
            for k in range(1, alg.ctx.nvars + 1):
                v = commutator_over_ihbar(z, alg.coeff(alg.ctx.x(k)))
                if not v.is_zero():
                    tbl[('x', k)] = v
            got = HyperOperator('minus', z, action_table=tbl)
            self._minus_memo[key] = got
        return got

    def minus(self, which, a, o):
        return _minus_via_table(self._action_table(which, a), o)


def _multiplicity(tup):
    """Number of distinct orderings of the multiset tup."""
    n = factorial(len(tup))
    for v in set(tup):
        n //= factorial(tup.count(v))
    return n


def project(state, o, order=None):
    """Projection onto the pair commutant, composed with the stage reduction.

    Closed form: the nested decomposition-of-unity recursion telescopes
    (sum the level compositions of e^{x+y} - 1 with alternating signs) to

        P O = sum_{n,m} (-1)^m/(n! m!) xi+^(n) pi+^(m)  xi-^(m) pi-^(n) O ,

    indices of the xi+ block contracted with the pi- chain and vice versa.
    This fixes the undefined overall sign of the exponential form: the
    surviving weight is (-1) per pi+ factor.  `order` overrides the hbar
    order the result needs to be exact to (default: the state truncation).
    """
    trunc = state.trunc if order is None else order
    key = (o.key(), trunc)
    got = state._memo.get(key)
    if got is not None:
        return got
    npairs = state.accs.npairs
    reduced_mode = state.reduction is not None
    budget = max(2 * trunc, 0) if reduced_mode else 2 * PURE_DEPTH_CAP
    base_h = o.min_hbar()
    total = state.reduce(o)
    chain_cache = {((), ()): o}

    def chain_for(a_tup, b_tup):
        key_ = (a_tup, b_tup)
        got_ = chain_cache.get(key_)
        if got_ is not None:
            return got_
        if b_tup:
            prev = chain_for(a_tup, b_tup[:-1])
            cur = prev if prev.is_zero() else state.minus('xi', b_tup[-1], prev)
        else:
            prev = chain_for(a_tup[:-1], ())
            cur = prev if prev.is_zero() else state.minus('pi', a_tup[-1], prev)
        if reduced_mode and not cur.is_zero():
            # a depth-d chain only contributes with >= ceil(d/2) powers of
            # hbar from the sandwich contractions
            depth = len(a_tup) + len(b_tup)
            cur = cur.truncate(trunc - (depth + 1) // 2)
        chain_cache[key_] = cur
        return cur

    for p in range(1, budget + 1):
        if reduced_mode and base_h + (p + 1) // 2 > trunc:
            break
        alive = False
        for n in range(p + 1):
            m = p - n
            base_coeff = Fraction((-1) ** m, factorial(n) * factorial(m))
            for a_tup in itertools.combinations_with_replacement(range(npairs), n):
                for b_tup in itertools.combinations_with_replacement(range(npairs), m):
                    chained = chain_for(a_tup, b_tup)
                    if chained.is_zero():
                        continue
                    alive = True
                    if reduced_mode:
                        if chained.min_hbar() + (p + 1) // 2 > trunc:
                            continue
                        if not state.sandwich_alive(chained, a_tup, b_tup):
                            continue
                    dressed = chained
                    for b in b_tup:
                        dressed = symmetrized(state.accs.pi[b], dressed)
                        if reduced_mode:
                            dressed = dressed.truncate(trunc)
                        if dressed.is_zero():
                            break
                    for a in a_tup:
                        if dressed.is_zero():
                            break
                        dressed = symmetrized(state.accs.xi[a], dressed)
                        if reduced_mode:
                            dressed = dressed.truncate(trunc)
                    if dressed.is_zero():
                        continue
                    coeff = base_coeff * _multiplicity(a_tup) * _multiplicity(b_tup)
                    term = state.reduce(dressed).scaled_q(qnum(coeff))
                    if not term.is_zero():
                        total = total + term
        if not alive:
            break
        if not reduced_mode and p > PURE_DEPTH_CAP:
            raise NonPolynomialInACCS("projection chains do not terminate")

    if reduced_mode:
        total = total.truncate(trunc) if trunc < state.accs.alg.trunc else total
    state._memo[key] = total
    return total


def q_correction(state, o):
    """Uncertainty-relation correction of the eliminated pairs.

    sum_{n+m>=1} 1/(n! m!) (hbar/4)^(n+m) P (xi- xi-)^m (pi- pi-)^n O,
    with the squares contracted over the pair index.
    """
    npairs = state.accs.npairs
    out = None
    for total in range(1, state.trunc + 1):
        for n in range(total + 1):
            m = total - n
            inner_order = state.trunc - total
            chained = o if state.reduction is None else o.truncate(inner_order)
            for _ in range(n):
                chained = _pair_square(state, 'pi', chained)
                if state.reduction is not None:
                    chained = chained.truncate(inner_order)
                if chained.is_zero():
                    break
            if chained.is_zero():
                continue
            for _ in range(m):
                chained = _pair_square(state, 'xi', chained)
                if state.reduction is not None:
                    chained = chained.truncate(inner_order)
                if chained.is_zero():
                    break
            if chained.is_zero():
                continue
            piece = project(state, chained, order=inner_order).scaled_q(
                qnum(Fraction(1, 4 ** total * factorial(n) * factorial(m))), total)
            out = piece if out is None else out + piece
    if out is None:
        target = state.reduction[1] if state.reduction else state.accs.alg
        return target.zero()
    return out


def _pair_square(state, which, o):
    acc = None
    for a in range(state.accs.npairs):
        t = state.minus(which, a, state.minus(which, a, o))
        if not t.is_zero():
            acc = t if acc is None else acc + t
    return acc if acc is not None else o.alg.zero()


def project_with_correction(state, o):
    return project(state, o) + q_correction(state, o)


def star_product(x, y, state):
    """exp((hbar/2i) Omega) X(slot1) Y(slot2) merged at equal slots."""
    alg = x.alg
    out = alg.zero()
    npairs = state.accs.npairs
    half_over_i = qnum(0, Fraction(-1, 2))  # 1/(2i)
    for r in range(0, state.trunc + 1):
        level = alg.zero()
        any_nonzero = False
        for j in range(r + 1):
            weight = comb(r, j) * (-1) ** (r - j)
            for a_tup in itertools.product(range(npairs), repeat=j):
                for c_tup in itertools.product(range(npairs), repeat=r - j):
                    xs = x
                    for a in a_tup:
                        xs = state.minus('xi', a, xs)
                        if xs.is_zero():
                            break
                    if xs.is_zero():
                        continue
                    for c in c_tup:
                        xs = state.minus('pi', c, xs)
                        if xs.is_zero():
                            break
                    if xs.is_zero():
                        continue
                    ys = y
                    for a in a_tup:
                        ys = state.minus('pi', a, ys)
                        if ys.is_zero():
                            break
                    if ys.is_zero():
                        continue
                    for c in c_tup:
                        ys = state.minus('xi', c, ys)
                        if ys.is_zero():
                            break
                    if ys.is_zero():
                        continue
                    level = level + (xs * ys).scaled_q(qnum(weight))
                    any_nonzero = True
        if any_nonzero:
            q = qnum(Fraction(1, factorial(r)))
            for _ in range(r):
                q = q * half_over_i
            out = out + level.scaled_q(q, r)
    return out


def star_commutator(x, y, state):
    return star_product(x, y, state) - star_product(y, x, state)


def star_product_projected(x, y, state):
    """The projected star product: P on each slot of exp((hbar/2i) Omega^t)."""
    alg = x.alg
    out = None
    npairs = state.accs.npairs
    minus_half_over_i = qnum(0, Fraction(1, 2))  # -1/(2i)
    for r in range(0, state.trunc + 1):
        level = None
        for j in range(r + 1):
            weight = comb(r, j) * (-1) ** (r - j)
            for a_tup in itertools.product(range(npairs), repeat=j):
                for c_tup in itertools.product(range(npairs), repeat=r - j):
                    xs = x
                    for a in a_tup:
                        xs = state.minus('xi', a, xs)
                        if xs.is_zero():
                            break
                    if xs.is_zero():
                        continue
                    for c in c_tup:
                        xs = state.minus('pi', c, xs)
                        if xs.is_zero():
                            break
                    if xs.is_zero():
                        continue
                    ys = y
                    for a in a_tup:
                        ys = state.minus('pi', a, ys)
                        if ys.is_zero():
                            break
                    if ys.is_zero():
                        continue
                    for c in c_tup:
                        ys = state.minus('xi', c, ys)
                        if ys.is_zero():
                            break
                    if ys.is_zero():
                        continue
                    piece = (project(state, xs) * project(state, ys)).scaled_q(qnum(weight))
                    level = piece if level is None else level + piece
        if level is not None:
            q = qnum(Fraction(1, factorial(r)))
            for _ in range(r):
                q = q * minus_half_over_i
            piece = level.scaled_q(q, r)
            out = piece if out is None else out + piece
    return out if out is not None else x.alg.zero()


def accs_degree(state, o, cap=12):
    """Largest d with some d-fold minus chain nonzero (pure operands only)."""
    frontier = [o]
    d = 0
    while frontier and d <= cap:
        nxt = []
        for cur in frontier:
            for which in ('xi', 'pi'):
                for a in range(state.accs.npairs):
                    t = state.minus(which, a, cur)
                    if not t.is_zero():
                        nxt.append(t)
        if not nxt:
            return d
        frontier = nxt
        d += 1
    raise NonPolynomialInACCS(f"pair degree exceeds cap {cap}")


def check_unity_decomposition(state, o, order):
    """Truncated decomposition of unity at the given order, both sign readings.

    Returns {'standard': bool, 'flipped': bool}: whether
    sum_{n+m<=order} s(n,m)/(n!m!) xi+^n pi+^m P xi-^m pi-^n o reproduces o,
    with s = (-1)^n (standard) or s = (-1)^m (flipped reading).
    """
    npairs = state.accs.npairs
    results = {}
    for label, sign_of in (('standard', lambda n, m: (-1) ** n),
                           ('flipped', lambda n, m: (-1) ** m)):
        total = o.alg.zero()
        for n in range(order + 1):
            for m in range(order + 1 - n):
                coeff = Fraction(sign_of(n, m), factorial(n) * factorial(m))
                for a_tup in itertools.product(range(npairs), repeat=n):
                    for b_tup in itertools.product(range(npairs), repeat=m):
                        chained = o
                        for a in a_tup:
                            chained = state.minus('pi', a, chained)
                            if chained.is_zero():
                                break
                        if chained.is_zero():
                            continue
                        for b in b_tup:
                            chained = state.minus('xi', b, chained)
                            if chained.is_zero():
                                break
                        if chained.is_zero():
                            continue
                        dressed = project(state, chained)
                        for b in b_tup:
                            dressed = symmetrized(state.accs.pi[b], dressed)
                        for a in a_tup:
                            dressed = symmetrized(state.accs.xi[a], dressed)
                        total = total + dressed.scaled_q(qnum(coeff))
        results[label] = (total == o)
    return results

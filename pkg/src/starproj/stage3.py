"""Third projection: auxiliary-sector elimination and the final systems.

The added constraint set is linear in (x, p^x, u, p_u) with constant
coefficients, so every generator splits exactly as (commutant part) +
(linear pair combination).  Projection is evaluated in that split: operands
are rewritten with the split letters, coefficient functions Taylor-expand
around the projected position, and the pure pair words contract to their
scalar projections.  Results live in a "starred" algebra whose letters are
the projected generators and whose coefficients are functions of the
projected (noncommuting) position, manipulated only linearly.
"""

from __future__ import annotations

import itertools
from fractions import Fraction
from math import factorial

from .errors import ProjectionResidual, SingularM
from .hyper import AccsPair, ProjectionState, project, star_commutator
from .matrices import (mat_add, mat_eq, mat_inv, mat_mul, mat_scale, mat_sub,
                       mat_T, eye, zeros)
from .operators import (Algebra, OperatorExpr, commutator_over_ihbar,
                        substitute_generators, symmetrized)
from .pipeline import QuantumSystem, _idx, _over_ihbar_expr
from .scalar import ScalarExpr, differentiate, qnum


# -- constraint construction --------------------------------------------------

def additional_constraints(s2):
    """psi2_i = Mbar_ij u_j - px_i - (1/2) Xi_ij x_j on the stage-2 algebra."""
    alg, ctx, n = s2.algebra, s2.ctx, s2.spec.nvars
    mats = s2.extras['mats']
    out = []
    for i in _idx(n):
        t = -alg.gen(('px', i))
        for j in _idx(n):
            mb = mats.Mbar[i - 1][j - 1]
            if mb:
                t = t + alg.gen(('u', j)).scaled_q(mb)
            xi_ = mats.Xi[i - 1][j - 1]
            if xi_:
                t = t - alg.coeff(ctx.x(j)).scaled_q(Fraction(xi_, 2))
        out.append(t)
    return out


def stage3_accs(s2):
    """The conjugate pairs of the auxiliary constraint set:
    xi_i = Minv_ij (psi2_j + (1/2) Xi_jk phi4_k),
    pi_i = Minv_ij (phi4_j - (1/2) Theta_jk psi2_k)."""
    alg, n = s2.algebra, s2.spec.nvars
    mats = s2.extras['mats']
    phi4 = s2.constraints['phi4']
    psi2 = additional_constraints(s2)
    xi, pi = [], []
    for i in _idx(n):
        tx = alg.zero()
        tp = alg.zero()
        for j in _idx(n):
            minv = mats.Minv[i - 1][j - 1]
            if not minv:
                continue
            inner_x = psi2[j - 1]
            inner_p = phi4[j - 1]
            for k in _idx(n):
                xj = mats.Xi[j - 1][k - 1]
                if xj:
                    inner_x = inner_x + phi4[k - 1].scaled_q(Fraction(xj, 2))
                th = mats.Theta[j - 1][k - 1]
                if th:
                    inner_p = inner_p - psi2[k - 1].scaled_q(Fraction(th, 2))
            tx = tx + inner_x.scaled_q(minv)
            tp = tp + inner_p.scaled_q(minv)
        xi.append(tx)
        pi.append(tp)
    return AccsPair(xi, pi, 'S3'), psi2


def constraint_set_table(s2, psi2):
    """Pairwise commutators of (phi4, psi2) against the constant matrices."""
    alg, n = s2.algebra, s2.spec.nvars
    mats = s2.extras['mats']
    phi4 = s2.constraints['phi4']
    named = [(f"phi4_{i}", phi4[i - 1]) for i in _idx(n)] + \
            [(f"psi2_{i}", psi2[i - 1]) for i in _idx(n)]
    # [phi4_i, psi2_j] = -i hbar Mbar_ij: the printed table carries +Mbar,
    # but the pair construction and the final table only close with the
    # derived sign (see ledger); the conjugate-pair audit discriminates.
    expected = {}
    for i in _idx(n):
        for j in _idx(n):
            expected[(f"phi4_{i}", f"phi4_{j}")] = mats.Theta[i - 1][j - 1]
            expected[(f"phi4_{i}", f"psi2_{j}")] = -mats.Mbar[i - 1][j - 1]
            expected[(f"psi2_{i}", f"psi2_{j}")] = mats.Xi[i - 1][j - 1]
    mismatches = []
    for (na, oa), (nb, ob) in itertools.combinations(named, 2):
        got = commutator_over_ihbar(oa, ob)
        want = alg.coeff(alg.ctx.scalar(expected[(na, nb)]))
        if got != want:
            mismatches.append({'pair': (na, nb), 'derived': got, 'expected': want})
    return mismatches


# -- split data ---------------------------------------------------------------

KINDS = ('px', 'u', 'pu')


class Stage3Split:
    """Constant split coefficients: for each generator (and x),
    g = g* + sum_a A[g][a] xi_a + B[g][a] pi_a."""

    def __init__(self, s2, accs):
        alg, n = s2.algebra, s2.spec.nvars
        self.n = n
        self.A = {}
        self.B = {}

        def const_of(op):
            if op.is_zero():
                return Fraction(0)
            assert set(op.terms) == {()}, op
            s = op.terms[()]
            (key, c), = s.terms.items()
            assert key == (0, 0, ()), s
            assert c.b == 0
            return Fraction(c.a, c.d)

        targets = [(('x', k), alg.coeff(alg.ctx.x(k))) for k in _idx(n)]
        targets += [((kind, k), alg.gen((kind, k)))
                    for kind in KINDS for k in _idx(n)]
        for name, op in targets:
            arow, brow = [], []
            for a in range(n):
                brow.append(const_of(commutator_over_ihbar(accs.xi[a], op)))
                arow.append(-const_of(commutator_over_ihbar(accs.pi[a], op)))
            self.A[name] = arow
            self.B[name] = brow
        # pair-square contraction matrices for scalar chains:
        # sum_a (xi-_a xi-_a) f = Sxi[k][l] f_{;kl}, likewise Spi
        self.Sxi = [[sum(self.B[('x', k)][a] * self.B[('x', l)][a]
                         for a in range(n)) for l in _idx(n)] for k in _idx(n)]
        self.Spi = [[sum(self.A[('x', k)][a] * self.A[('x', l)][a]
                         for a in range(n)) for l in _idx(n)] for k in _idx(n)]


def star_algebra(s2, table, order, kinds=('x', 'px'), names=('xs', 'pxs')):
    """A reduced stage-3 algebra on an independent projected pair family.

    The projected generators satisfy the eliminated constraints as exact
    linear relations, so only 2N of them are independent; `kinds` picks the
    retained family ((x, px) for the momentum form, (x, u) for the
    auxiliary form).  Coefficients are functions of the starred position."""
    ctx, n = s2.ctx, s2.spec.nvars
    kindmap = dict(zip(kinds, names))
    gens = [(kindmap[k], i) for k in kinds for i in _idx(n)]
    alg = Algebra('S3_' + '_'.join(names), ctx, gens, trunc=order + 1,
                  star_coefficients=True)
    for (k1, i1), (k2, i2) in itertools.combinations(
            [(k, i) for k in kinds for i in _idx(n)], 2):
        val = table.get((k1, i1, k2, i2))
        if val is None:
            rev = table.get((k2, i2, k1, i1))
            val = -rev if rev is not None else Fraction(0)
        if val:
            alg.set_commutator((kindmap[k1], i1), (kindmap[k2], i2),
                               alg.coeff(ctx.scalar(val)))
    tau = {}
    for kind in kinds:
        for i in _idx(n):
            row = {}
            for k in _idx(n):
                v = table.get(('x', k, kind, i))
                if v is None:
                    v = table.get((kind, i, 'x', k))
                    v = -v if v is not None else Fraction(0)
                else:
                    v = -v
                # [g_i, f(x*)] = i hbar sum_k ([g_i, x_k]/(i hbar)) f_{;k}
                if v:
                    row[k] = ctx.scalar(v)
            if row:
                tau[(kindmap[kind], i)] = row
    alg.tau = tau
    return alg


def derive_c3_table(s2, accs):
    """[P A, P B] = P([A,B]_star) for the stage-2 generators; the bracket is
    already a constant here, so no reduction is involved.  Returns
    {(kind_a, i, kind_b, j): Fraction} with i hbar stripped."""
    alg, n = s2.algebra, s2.spec.nvars
    state = ProjectionState(accs, None, trunc=s2.spec.order)
    reps = [('x', i, alg.coeff(alg.ctx.x(i))) for i in _idx(n)]
    for kind in KINDS:
        reps += [(kind, i, alg.gen((kind, i))) for i in _idx(n)]
    table = {}
    for (ka, ia, oa), (kb, ib, ob) in itertools.combinations(reps, 2):
        sc = star_commutator(oa, ob, state)
        if sc.is_zero():
            continue
        assert set(sc.terms) == {()}, (ka, ia, kb, ib, sc)
        v = _over_ihbar_expr(sc).terms[()]
        (key, c), = v.terms.items()
        assert key == (0, 0, ()) and c.b == 0
        table[(ka, ia, kb, ib)] = Fraction(c.a, c.d)
    return table


def expected_c3_table(mats, n):
    """The deformed table in matrix form."""
    Minv, Theta, Xi, G, Mbar = mats.Minv, mats.Theta, mats.Xi, mats.G, mats.Mbar
    sw = mats.sandwich
    xx = sw(Theta)
    uu = sw(Xi)
    xpx = sw(mat_add(eye(n), mat_scale(mat_mul(G, G), Fraction(1, 16))))
    upu = mat_scale(sw(G), Fraction(1, 2))
    pxpx = mat_scale(sw(mat_mul(G, Xi)), Fraction(-1, 4))
    pupu = mat_scale(sw(mat_mul(G, Theta)), Fraction(-1, 4))
    xu = sw(Mbar)
    upx = mat_scale(sw(mat_mul(Xi, Mbar)), Fraction(1, 2))
    xpu = mat_scale(sw(mat_mul(Theta, Mbar)), Fraction(1, 2))
    pxpu = mat_scale(sw(mat_mul(G, Mbar)), Fraction(1, 4))
    out = {}
    for i in range(1, n + 1):
        for j in range(1, n + 1):
            out[('x', i, 'x', j)] = xx[i - 1][j - 1]
            out[('u', i, 'u', j)] = uu[i - 1][j - 1]
            out[('x', i, 'px', j)] = xpx[i - 1][j - 1]
            out[('u', i, 'pu', j)] = upu[i - 1][j - 1]
            out[('px', i, 'px', j)] = pxpx[i - 1][j - 1]
            out[('pu', i, 'pu', j)] = pupu[i - 1][j - 1]
            out[('x', i, 'u', j)] = xu[i - 1][j - 1]
            out[('u', i, 'px', j)] = upx[i - 1][j - 1]
            out[('x', i, 'pu', j)] = xpu[i - 1][j - 1]
            out[('px', i, 'pu', j)] = pxpu[i - 1][j - 1]
    return out


def diff_c3_table(derived, expected, n):
    bad = []
    for key, want in expected.items():
        ka, ia, kb, ib = key
        got = derived.get(key)
        if got is None:
            rev = derived.get((kb, ib, ka, ia))
            got = -rev if rev is not None else Fraction(0)
        if got != want:
            bad.append({'pair': key, 'derived': got, 'expected': want})
    return bad


# -- split projection ---------------------------------------------------------

class Stage3Projector:
    """Evaluates P (and the pair-square chains for Q) on stage-2 operands,
    producing starred-algebra operators."""

    def __init__(self, s2, accs, star_alg, split, trunc):
        self.s2 = s2
        self.accs = accs
        self.star = star_alg
        self.split = split
        self.trunc = trunc
        n = s2.spec.nvars
        ctx = s2.ctx
        # the raw state provides action-table minus ops on the stage-2 algebra
        self.raw_state = ProjectionState(accs, None, trunc=trunc)
        # split algebra: star letters plus abstract pair letters
        gens = list(star_alg.gens) + \
               [('xi', i) for i in _idx(n)] + [('pi', i) for i in _idx(n)]
        self.split_alg = Algebra('S3split', ctx, gens, trunc=star_alg.trunc,
                                 star_coefficients=True)
        for pair, val in star_alg.table.items():
            self.split_alg.set_commutator(pair[0], pair[1],
                                          val.rebrand(self.split_alg))
        for i in _idx(n):
            self.split_alg.set_commutator(('xi', i), ('pi', i),
                                          self.split_alg.one())
        self.split_alg.tau = {g: dict(r) for g, r in star_alg.tau.items()}
        # starred generators in the independent (xs, pxs) family: because the
        # eliminated constraints hold exactly, u* = Mbarinv (px* + Xi/2 x*)
        # and pu* = -(1/2) Theta u*.
        mats = s2.extras['mats']
        star_image = {}
        for i in _idx(n):
            star_image[('px', i)] = self.split_alg.gen(('pxs', i))
        for i in _idx(n):
            t = self.split_alg.zero()
            for j in _idx(n):
                mb = mats.Mbarinv[i - 1][j - 1]
                if not mb:
                    continue
                t = t + self.split_alg.gen(('pxs', j)).scaled_q(mb)
                for k in _idx(n):
                    xi_ = mats.Xi[j - 1][k - 1]
                    if xi_:
                        t = t + self.split_alg.gen(('xs', k)).scaled_q(
                            Fraction(mb * xi_, 2))
            star_image[('u', i)] = t
        for i in _idx(n):
            t = self.split_alg.zero()
            for j in _idx(n):
                th = mats.Theta[i - 1][j - 1]
                if th:
                    t = t + star_image[('u', j)].scaled_q(Fraction(-th, 2))
            star_image[('pu', i)] = t
        self.star_image = star_image
        # linear split expressions
        self.lin = {}
        for kind in KINDS:
            for i in _idx(n):
                t = star_image[(kind, i)]
                for a in range(n):
                    ca = split.A[(kind, i)][a]
                    cb = split.B[(kind, i)][a]
                    if ca:
                        t = t + self.split_alg.gen(('xi', a + 1)).scaled_q(ca)
                    if cb:
                        t = t + self.split_alg.gen(('pi', a + 1)).scaled_q(cb)
                self.lin[(kind, i)] = t
        self.linx = []
        for k in _idx(n):
            t = self.split_alg.zero()
            for a in range(n):
                ca = split.A[('x', k)][a]
                cb = split.B[('x', k)][a]
                if ca:
                    t = t + self.split_alg.gen(('xi', a + 1)).scaled_q(ca)
                if cb:
                    t = t + self.split_alg.gen(('pi', a + 1)).scaled_q(cb)
            self.linx.append(t)
        # pure pair algebra for the word contractions
        pgens = [('xi', i) for i in _idx(n)] + [('pi', i) for i in _idx(n)]
        self.pure_alg = Algebra('S3pure', ctx, pgens, trunc=star_alg.trunc)
        for i in _idx(n):
            self.pure_alg.set_commutator(('xi', i), ('pi', i),
                                         self.pure_alg.one())
        self.pure_state = ProjectionState(
            AccsPair([self.pure_alg.gen(('xi', i)) for i in _idx(n)],
                     [self.pure_alg.gen(('pi', i)) for i in _idx(n)]))
        self._tau_cache = {(): ctx.one()}
        self._symlinx_cache = {}

    def tau(self, word):
        """Scalar projection of a pure pair word."""
        got = self._tau_cache.get(word)
        if got is not None:
            return got
        op = OperatorExpr(self.pure_alg, {word: self.s2.ctx.one()})
        val = project(self.pure_state, op)
        if val.is_zero():
            out = self.s2.ctx.zero()
        else:
            assert set(val.terms) == {()}
            out = val.terms[()]
        self._tau_cache[word] = out
        return out

    def sym_linx(self, tup):
        """Fully symmetrized product of the pair-linear shifts L_{i}, i in tup.
        Needed because [L_i, L_j] is a central i*hbar constant: the starred
        coefficients are Weyl-ordered functions of the projected position."""
        got = self._symlinx_cache.get(tup)
        if got is not None:
            return got
        if not tup:
            out = self.split_alg.one()
        elif len(tup) == 1:
            out = self.linx[tup[0] - 1]
        else:
            acc = None
            for j in range(len(tup)):
                rest = tup[:j] + tup[j + 1:]
                t = self.sym_linx(tuple(sorted(rest))) * self.linx[tup[j] - 1]
                acc = t if acc is None else acc + t
            out = acc.scaled_q(Fraction(1, len(tup)))
        self._symlinx_cache[tup] = out
        return out

    def split_coeff(self, c, budget):
        """f(x) -> Weyl-Taylor around the starred position."""
        out = self.split_alg.coeff(c)
        n = self.s2.spec.nvars
        level = {(): c}
        for k in range(1, budget + 1):
            nxt = {}
            for tup, f in level.items():
                start = tup[-1] if tup else 1
                for i in range(start, n + 1):
                    df = differentiate(f, i)
                    if not df.is_zero():
                        nxt[tup + (i,)] = df
            if not nxt:
                break
            level = nxt
            for tup, df in level.items():
                # multiplicity of the sorted derivative tuple
                mult = factorial(k)
                for v in set(tup):
                    mult //= factorial(tup.count(v))
                piece = self.split_alg.coeff(
                    df.scaled(qnum(Fraction(mult, factorial(k)))))
                piece = piece * self.sym_linx(tup)
                out = out + piece
        return out

    def split_op(self, o):
        """Rewrite a stage-2 operator in the split algebra."""
        out = self.split_alg.zero()
        for w, c in o.terms.items():
            h0 = min((k[0] for k in c.terms), default=0)
            budget = max(2 * (self.trunc - h0), 0)
            acc = self.split_coeff(c, budget)
            for g in w:
                acc = acc * self.lin[(g[0], g[1])]
            out = out + acc
        return out

    def contract(self, split_expr):
        """Apply the pair-word contraction, producing a starred operator."""
        out = self.star.zero()
        pure_kinds = ('xi', 'pi')
        for w, c in split_expr.terms.items():
            star_word = tuple(g for g in w if g[0] not in pure_kinds)
            pair_word = tuple(g for g in w if g[0] in pure_kinds)
            t = self.tau(pair_word)
            if t.is_zero():
                continue
            coeff = (c * t).truncate(self.star.trunc)[0]
            if coeff.is_zero():
                continue
            out = out + OperatorExpr(self.star, {star_word: coeff})
        return out

    def project(self, o):
        return self.contract(self.split_op(o))

    def minus_square(self, which, o):
        """sum_a (Z-_a)^2 on a stage-2 operand."""
        acc = None
        for a in range(self.accs.npairs):
            t = self.raw_state.minus(which, a, self.raw_state.minus(which, a, o))
            if not t.is_zero():
                acc = t if acc is None else acc + t
        return acc if acc is not None else o.alg.zero()

    def project_with_correction(self, o):
        """P o + sum (1/n!m!) (hbar/4)^(n+m) P (xi-sq)^m (pi-sq)^n o."""
        total = self.project(o)
        for t in range(1, self.trunc + 1):
            for nn in range(t + 1):
                mm = t - nn
                chained = o.truncate(self.trunc - t)
                for _ in range(nn):
                    chained = self.minus_square('pi', chained).truncate(self.trunc - t)
                    if chained.is_zero():
                        break
                if chained.is_zero():
                    continue
                for _ in range(mm):
                    chained = self.minus_square('xi', chained).truncate(self.trunc - t)
                    if chained.is_zero():
                        break
                if chained.is_zero():
                    continue
                piece = self.project(chained).scaled_q(
                    qnum(Fraction(1, 4 ** t * factorial(nn) * factorial(mm))), t)
                total = total + piece
        return total


# -- Hamiltonian form extraction and assembly ----------------------------------

def kinetic_form(s2, mt):
    """(1/2) sum_ij {mt_ij, {px_i, px_j}}_sym on the stage-2 algebra."""
    alg, n = s2.algebra, s2.spec.nvars
    out = alg.zero()
    for i in _idx(n):
        for j in _idx(n):
            c = mt[(i, j)]
            if c.is_zero():
                continue
            out = out + symmetrized(alg.coeff(c),
                                    symmetrized(alg.gen(('px', i)),
                                                alg.gen(('px', j)))
                                    ).scaled_q(Fraction(1, 2))
    return out


def extract_kinetic(s2):
    """Solve H2 = (1/2){Mt_ij, {px_i,px_j}} + U for a symmetric coefficient
    family Mt and a scalar potential U (which keeps the additive constant).
    Raises if a residual beyond that shape survives."""
    alg, ctx, n = s2.algebra, s2.ctx, s2.spec.nvars
    order = s2.spec.order
    mt = {(i, j): ctx.zero() for i in _idx(n) for j in _idx(n)}
    H = s2.hamiltonian
    for h in range(order + 1):
        D = H - kinetic_form(s2, mt)
        for i in _idx(n):
            for j in _idx(n):
                if i > j:
                    continue
                c = D.terms.get((('px', i), ('px', j)))
                if c is None:
                    continue
                ch = c.hbar_part(h)
                if ch.is_zero():
                    continue
                share = ch if i != j else ch.scaled(qnum(2))
                mt[(i, j)] = mt[(i, j)] + share
                if i != j:
                    mt[(j, i)] = mt[(j, i)] + share
    D = (H - kinetic_form(s2, mt)).truncate(order)
    U = D.terms.get((), ctx.zero())
    residual = D - alg.coeff(U)
    if not residual.is_zero():
        raise ProjectionResidual(
            f"stage-2 Hamiltonian has terms beyond kinetic+potential: {residual}")
    return mt, U


class XSeries:
    """The iterated pair-square dressings of the kinetic coefficients."""

    def __init__(self, s2, split, mt, order):
        self.ctx = s2.ctx
        self.n = s2.spec.nvars
        self.split = split
        self.order = order
        self.mt = mt
        self._cache = {}

    def d_xi(self, f):
        out = self.ctx.zero()
        for k in _idx(self.n):
            for l in _idx(self.n):
                s = self.split.Sxi[k - 1][l - 1]
                if s:
                    out = out + differentiate(differentiate(f, k), l).scaled(qnum(s))
        return out

    def d_pi(self, f):
        out = self.ctx.zero()
        for k in _idx(self.n):
            for l in _idx(self.n):
                s = self.split.Spi[k - 1][l - 1]
                if s:
                    out = out + differentiate(differentiate(f, k), l).scaled(qnum(s))
        return out

    def x_mn(self, i, j, m, n_):
        key = (i, j, m, n_)
        got = self._cache.get(key)
        if got is None:
            if m == 0 and n_ == 0:
                got = self.mt[(i, j)]
            elif m > 0:
                got = self.d_pi(self.x_mn(i, j, m - 1, n_))
            else:
                got = self.d_xi(self.x_mn(i, j, 0, n_ - 1))
            self._cache[key] = got
        return got

    def x_corr(self, i, j):
        """X_ij = sum_{n+m>=1} (1/n!m!)(hbar/4)^(n+m) X^(m,n)_ij."""
        out = self.ctx.zero()
        for t in range(1, self.order + 1):
            for n_ in range(t + 1):
                m = t - n_
                v = self.x_mn(i, j, m, n_)
                if v.is_zero():
                    continue
                out = out + v.scaled(
                    qnum(Fraction(1, 4 ** t * factorial(n_) * factorial(m))), t)
        out, _ = out.truncate(self.order)
        return out

    def x_tilde(self, i, j):
        out = self.mt[(i, j)] + self.x_corr(i, j)
        out, _ = out.truncate(self.order)
        return out


def assemble_h3(s2, star, split, mt, u2, order):
    """The closed-form third-stage Hamiltonian:

    -(hbar/4) N + (1/2){Xt*_ij, {px_i, px_j}} + (hbar/4){Mcal_kl Xt*_ik;l, px_i}
    + U_I + U_II + U_Q,

    with Mcal = Minv Xi (I - Theta^2/4) Minv, U_I the reordering correction
    of the projected kinetic term, U_II the projected stage-2 potential, and
    U_Q the scalar remainder of the pair-square dressing of the kinetic term.
    """
    ctx, n = s2.ctx, s2.spec.nvars
    mats = s2.extras['mats']
    xs = XSeries(s2, split, mt, order)
    out = star.coeff(ctx.scalar(Fraction(-n, 4), hbar=1))
    xt = {(i, j): xs.x_tilde(i, j) for i in _idx(n) for j in _idx(n)}
    for i in _idx(n):
        for j in _idx(n):
            if xt[(i, j)].is_zero():
                continue
            out = out + symmetrized(star.coeff(xt[(i, j)]),
                                    symmetrized(star.gen(('pxs', i)),
                                                star.gen(('pxs', j)))
                                    ).scaled_q(Fraction(1, 2))
    mcal = mat_mul(mats.Minv, mat_mul(
        mats.Xi, mat_mul(mat_sub(eye(n), mat_scale(mat_mul(mats.Theta, mats.Theta),
                                                   Fraction(1, 4))), mats.Minv)))
    for i in _idx(n):
        c = ctx.zero()
        for k in _idx(n):
            for l in _idx(n):
                w = mcal[k - 1][l - 1]
                if w:
                    c = c + differentiate(xt[(i, k)], l).scaled(qnum(w))
        if not c.is_zero():
            c, _ = c.scaled(qnum(Fraction(1, 4)), 1).truncate(order)
            out = out + symmetrized(star.coeff(c), star.gen(('pxs', i)))

    sw = mats.sandwich
    MGM = sw(mats.G)
    MG2M = sw(mat_mul(mats.G, mats.G))
    MXi2M = sw(mat_mul(mats.Xi, mats.Xi))
    MGTM = sw(mat_mul(mats.G, mats.Theta))
    MXiM = sw(mats.Xi)

    def d(f, *ix):
        for k in ix:
            f = differentiate(f, k)
        return f

    u3i = ctx.zero()
    for i in _idx(n):
        for j in _idx(n):
            for k in _idx(n):
                a = MGM[i - 1][k - 1]
                if a:
                    u3i = u3i - d(mt[(i, j)], k, j).scaled(qnum(Fraction(a, 16)), 2)
                b = MGM[j - 1][k - 1]
                if b:
                    u3i = u3i - d(mt[(i, j)], k, i).scaled(qnum(Fraction(b, 16)), 2)
                for l in _idx(n):
                    ab = MGM[i - 1][k - 1] * MGM[j - 1][l - 1]
                    if ab:
                        u3i = u3i + d(mt[(i, j)], k, l).scaled(
                            qnum(Fraction(ab, 32)), 2)

    u3q = ctx.zero()
    for i in _idx(n):
        for j in _idx(n):
            xtij = xt[(i, j)]
            xij = xs.x_corr(i, j)
            a = MG2M[i - 1][j - 1]
            if a and not xtij.is_zero():
                u3q = u3q + xtij.scaled(qnum(Fraction(a, 64)), 1)
            b = MXi2M[i - 1][j - 1]
            if b and not xtij.is_zero():
                u3q = u3q - xtij.scaled(qnum(Fraction(b, 16)), 1)
            for k in _idx(n):
                gm = MGM[i - 1][k - 1]
                if gm:
                    u3q = u3q - d(xij, k, j).scaled(qnum(Fraction(gm, 8)), 2)
                for l in _idx(n):
                    c1 = MGTM[i - 1][k - 1] * MGTM[j - 1][l - 1]
                    if c1:
                        u3q = u3q + d(xtij, k, l).scaled(qnum(Fraction(c1, 512)), 2)
                    c2 = MXiM[i - 1][k - 1] * MXiM[j - 1][l - 1]
                    if c2:
                        u3q = u3q + d(xtij, k, l).scaled(qnum(Fraction(c2, 32)), 2)
                    c3 = MXiM[i - 1][k - 1] * MGTM[j - 1][l - 1]
                    if c3:
                        u3q = u3q - d(xtij, k, l).scaled(qnum(Fraction(c3, 64)), 2)
                    c4 = MGM[i - 1][k - 1] * MGM[j - 1][l - 1]
                    if c4:
                        u3q = u3q + d(xij, k, l).scaled(qnum(Fraction(c4, 32)), 2)

    total_pot = u3i + u2 + u3q
    total_pot, _ = total_pot.truncate(order)
    return out + star.coeff(total_pot), {'U3I': u3i, 'U3Q': u3q, 'U3II': u2,
                                         'Mcal': mcal, 'Xt': xt}


def project_stage3(s2):
    """Eliminate the auxiliary constraint set, returning the deformed system."""
    spec = s2.spec
    order = spec.order
    accs3, psi2 = stage3_accs(s2)
    if not accs3.audit():
        raise ProjectionResidual("stage-3 pair set is not canonical")
    table = derive_c3_table(s2, accs3)
    exp = expected_c3_table(s2.extras['mats'], spec.nvars)
    table_diff = diff_c3_table(table, exp, spec.nvars)
    star = star_algebra(s2, table, order)
    split = Stage3Split(s2, accs3)
    projector = Stage3Projector(s2, accs3, star, split, order)
    # projection conditions on the full auxiliary set
    for t in list(s2.constraints['phi4']) + list(psi2):
        if not projector.project(t).is_zero():
            raise ProjectionResidual("stage-3 constraint failed to vanish")
    H3 = projector.project_with_correction(s2.hamiltonian).truncate(order)
    mt, u_with_const = extract_kinetic(s2)
    u2 = u_with_const - s2.ctx.scalar(Fraction(-spec.nvars, 4), hbar=1)
    H3a, parts = assemble_h3(s2, star, split, mt, u2, order)
    out = QuantumSystem(
        stage='S3', spec=spec, ctx=s2.ctx, algebra=star,
        hamiltonian=H3,
        constraints={},
        eliminated={},
        state=projector, parent=s2,
        extras=dict(s2.extras) | {
            'assembled_h3': H3a.truncate(order), 'h3_parts': parts,
            'table': table, 'table_diff': table_diff, 'accs3': accs3,
            'psi2': psi2, 'split': split, 'mt': mt, 'u2': u2})
    return out

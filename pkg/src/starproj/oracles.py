"""Low-tech verification oracles.

Two independent cross-checks for the symbolic machinery: a brute-force
projector that re-expands the decomposition of unity with no memoization or
term merging, and Gauss-Hermite quadrature of coherent ground-state moments
in the one-mode Schroedinger representation.
"""

from __future__ import annotations

import itertools
from fractions import Fraction
from math import factorial, isqrt, pi, sqrt

import numpy as np

from .errors import DegreeTooHigh
from .operators import commutator_over_ihbar, symmetrized
from .scalar import qnum


# -- brute-force projector ---------------------------------------------------

def _minus(z, o):
    return commutator_over_ihbar(z, o)


def _degree(accs, o, cap):
    frontier = [o]
    for d in range(cap + 1):
        nxt = []
        for cur in frontier:
            for z in accs.xi + accs.pi:
                t = _minus(z, cur)
                if not t.is_zero():
                    nxt.append(t)
        if not nxt:
            return d
        frontier = nxt
    raise DegreeTooHigh(f"pair degree exceeds {cap}")


def naive_project(o, accs, cap=6):
    """Brute-force projection: re-expands P o = o - sum Z+ ... P Z- ... o
    term by term, recursing into every inner projection afresh."""
    deg = _degree(accs, o, cap)
    npairs = len(accs.xi)

    def pr(cur, depth):
        result = cur
        for p in range(1, depth + 1):
            for n in range(p + 1):
                m = p - n
                coeff = Fraction((-1) ** n, factorial(n) * factorial(m))
                for a_tup in itertools.product(range(npairs), repeat=n):
                    for b_tup in itertools.product(range(npairs), repeat=m):
                        chained = cur
                        for a in a_tup:
                            chained = _minus(accs.pi[a], chained)
                        for b in b_tup:
                            chained = _minus(accs.xi[b], chained)
                        if chained.is_zero():
                            continue
                        dressed = pr(chained, depth - p)
                        for b in b_tup:
                            dressed = symmetrized(accs.pi[b], dressed)
                        for a in a_tup:
                            dressed = symmetrized(accs.xi[a], dressed)
                        result = result - dressed.scaled_q(qnum(coeff))
        return result

    return pr(o, deg)


# -- quadrature oracle -------------------------------------------------------

class QuadratureGrid:
    """Gauss-Hermite grid for Gaussian-weighted polynomial integrands.

    Exact (to roundoff) for polynomial degree <= 2*npoints - 1.
    """

    def __init__(self, npoints=40, hbar=Fraction(1)):
        self.npoints = npoints
        self.hbar = Fraction(hbar)
        self.nodes, self.weights = np.polynomial.hermite.hermgauss(npoints)

    def gaussian_expectation(self, poly):
        """<poly(y)> against exp(-y^2/hbar)/sqrt(pi hbar), poly complex coeffs."""
        h = float(self.hbar)
        y = sqrt(h) * self.nodes
        vals = np.polyval(poly[::-1], y)
        return np.sum(self.weights * vals) / sqrt(pi)


def _apply_letter(letter, poly, hbar):
    """Operator action on p(y) with states p(y) * exp(-y^2 / (2 hbar)).

    xi: multiply by y.  pi = -i hbar d/dy: acts as -i hbar p' + i y p.
    Polynomials are complex coefficient lists, index = power of y.
    """
    if letter == 'xi':
        return [0j] + list(poly)
    out = [0j] * (len(poly) + 1)
    for k, c in enumerate(poly):
        if k >= 1:
            out[k - 1] += -1j * float(hbar) * k * c
        out[k + 1] += 1j * c
    return out


def word_moment(word, grid):
    """<Phi| O |Phi> for a word in ('xi','pi') letters (rightmost acts first)."""
    poly = [1 + 0j]
    for letter in reversed(word):
        poly = _apply_letter(letter, poly, grid.hbar)
    return grid.gaussian_expectation(np.array(poly))


def symmetrized_moment(n, m, grid):
    """Expectation of the fully symmetrized product of n xi's and m pi's."""
    letters = ['xi'] * n + ['pi'] * m
    seen = set()
    total = 0j
    count = 0
    for perm in itertools.permutations(letters):
        if perm in seen:
            continue
        seen.add(perm)
        total += word_moment(perm, grid)
        count += 1
    return total / count


def coherent_moment(n, m, grid=None):
    """Symmetrized ground-state moment as (rational coefficient, hbar power).

    Rationalized from quadrature at two widths and cross-validated to 1e-10.
    """
    if n + m > 12:
        raise DegreeTooHigh("moment order above 12")
    if grid is None:
        grid = QuadratureGrid()
    if (n + m) % 2 == 1:
        v = symmetrized_moment(n, m, grid)
        assert abs(v) < 1e-10
        return Fraction(0), 0
    power = (n + m) // 2
    v1 = symmetrized_moment(n, m, grid)
    assert abs(v1.imag) < 1e-10
    coef = Fraction(v1.real).limit_denominator(10 ** 6)
    other = QuadratureGrid(grid.npoints, Fraction(1, 3))
    v2 = symmetrized_moment(n, m, other)
    assert abs(v2 - float(coef) * float(other.hbar) ** power) < 1e-10
    return coef, power


def uncertainty_check(grid=None):
    """Minimal-uncertainty audit of the coherent ground state.

    Returns a dict with the ground-state product (== hbar/2) and a
    non-minimal excited-state control (> hbar/2).
    """
    if grid is None:
        grid = QuadratureGrid()
    h = float(grid.hbar)
    cx, px_ = coherent_moment(2, 0, grid)
    cp, pp_ = coherent_moment(0, 2, grid)
    dxi = sqrt(float(cx) * h ** px_)
    dpi = sqrt(float(cp) * h ** pp_)
    ground = dxi * dpi

    # first excited state: p(y) = y, norm <y^2> relative weights
    def excited_expect(word):
        poly = [0j, 1 + 0j]
        for letter in reversed(word):
            poly = _apply_letter(letter, poly, grid.hbar)
        conj = np.array([0j, 1 + 0j])
        prod = np.convolve(conj, np.array(poly))
        num = grid.gaussian_expectation(prod)
        den = grid.gaussian_expectation(np.convolve(conj, conj))
        return num / den

    ex_x2 = excited_expect(('xi', 'xi')).real
    ex_p2 = excited_expect(('pi', 'pi')).real
    excited = sqrt(ex_x2) * sqrt(ex_p2)
    return {
        'ground_product': ground,
        'bound': h / 2,
        'minimal': abs(ground - h / 2) < 1e-10,
        'excited_product': excited,
        'excited_above_bound': excited > h / 2 + 1e-12,
    }

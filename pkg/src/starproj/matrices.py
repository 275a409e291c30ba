"""Small exact-rational matrix helpers for the constant-parameter sector."""

from fractions import Fraction

from .errors import SingularM


def eye(n):
    return [[Fraction(i == j) for j in range(n)] for i in range(n)]


def zeros(n):
    return [[Fraction(0)] * n for _ in range(n)]


def eps_matrix(n):
    """Totally antisymmetric sign matrix: +1 below the diagonal."""
    return [[Fraction(1) if i > j else Fraction(-1) if i < j else Fraction(0)
             for j in range(n)] for i in range(n)]


def mat_add(a, b):
    return [[x + y for x, y in zip(ra, rb)] for ra, rb in zip(a, b)]


def mat_sub(a, b):
    return [[x - y for x, y in zip(ra, rb)] for ra, rb in zip(a, b)]


def mat_scale(a, s):
    s = Fraction(s)
    return [[x * s for x in row] for row in a]


def mat_mul(a, b):
    n, m, p = len(a), len(b), len(b[0])
    return [[sum((a[i][k] * b[k][j] for k in range(m)), Fraction(0))
             for j in range(p)] for i in range(n)]


def mat_T(a):
    return [list(col) for col in zip(*a)]


def mat_inv(a):
    n = len(a)
    aug = [list(row) + [Fraction(i == j) for j in range(n)]
           for i, row in enumerate(a)]
    for col in range(n):
        piv = next((r for r in range(col, n) if aug[r][col] != 0), None)
        if piv is None:
            raise SingularM("matrix not invertible")
        aug[col], aug[piv] = aug[piv], aug[col]
        d = aug[col][col]
        aug[col] = [x / d for x in aug[col]]
        for r in range(n):
            if r != col and aug[r][col] != 0:
                f = aug[r][col]
                aug[r] = [x - f * y for x, y in zip(aug[r], aug[col])]
    return [row[n:] for row in aug]


def mat_eq(a, b):
    return all(x == y for ra, rb in zip(a, b) for x, y in zip(ra, rb))


class DeformationMatrices:
    """Theta = theta*eps, Xi = eta*eps, G = Theta Xi, M = I + G/4, Mbar = I - G/4."""

    def __init__(self, n, theta, eta):
        self.n = n
        e = eps_matrix(n)
        self.eps = e
        self.Theta = mat_scale(e, Fraction(theta))
        self.Xi = mat_scale(e, Fraction(eta))
        self.G = mat_mul(self.Theta, self.Xi)
        self.M = mat_add(eye(n), mat_scale(self.G, Fraction(1, 4)))
        self.Mbar = mat_sub(eye(n), mat_scale(self.G, Fraction(1, 4)))
        self.Minv = mat_inv(self.M)
        self.Mbarinv = mat_inv(self.Mbar)

    def sandwich(self, mid):
        """Minv * mid * Minv."""
        return mat_mul(self.Minv, mat_mul(mid, self.Minv))

"""Independent reference computations shared by the unit and acceptance tests."""
import numpy as np

from rasa_lora.matrix import make_rng
from rasa_lora.reconstruction import TargetSet, random_factors


def random_instance(seed, L=None, b=None, a=None, r=None, k=None):
    """Small random targets plus random factors, all dimensions drawn from ``seed``."""
    rng = make_rng(seed)
    L = L or int(rng.integers(1, 5))
    b = b or int(rng.integers(3, 13))
    a = a or int(rng.integers(3, 13))
    r = r or int(rng.integers(1, min(a, b) + 1))
    if k is None:
        k = int(rng.integers(1, min(r, 8 // L) + 1)) if 8 // L >= 1 else 1
    targets = TargetSet.from_dense([rng.standard_normal((b, a)) for _ in range(L)])
    f = random_factors(targets, r, k, seed=seed + 1)
    f.B_tilde = [rng.standard_normal(m.shape) for m in f.B_tilde]
    f.D = [rng.standard_normal(d.shape) for d in f.D]
    return targets, f


def lstsq_B(t, f):
    """Solve for B_S by stacking vec(B_S D_i A_S) = ((D_i A_S)^T kron I) vec(B_S)."""
    b = f.B_S.shape[0]
    rows, rhs = [], []
    for i in range(f.L):
        rows.append(np.kron((f.D[i][:, None] * f.A_S).T, np.eye(b)))
        rhs.append((t.matrix(i) - f.B_tilde[i] @ f.A_tilde[i]).ravel(order="F"))
    sol = np.linalg.lstsq(np.vstack(rows), np.concatenate(rhs), rcond=None)[0]
    return sol.reshape(f.B_S.shape, order="F")


def lstsq_A(t, f):
    a = f.A_S.shape[1]
    rows, rhs = [], []
    for i in range(f.L):
        rows.append(np.kron(np.eye(a), f.B_S * f.D[i]))
        rhs.append((t.matrix(i) - f.B_tilde[i] @ f.A_tilde[i]).ravel(order="F"))
    sol = np.linalg.lstsq(np.vstack(rows), np.concatenate(rhs), rcond=None)[0]
    return sol.reshape(f.A_S.shape, order="F")


def lstsq_D(t, f, i):
    cols = [np.outer(f.B_S[:, j], f.A_S[j]).ravel() for j in range(f.pool_width)]
    resid = t.matrix(i) - f.B_tilde[i] @ f.A_tilde[i]
    return np.linalg.lstsq(np.column_stack(cols), resid.ravel(), rcond=None)[0]


def rel_err(x, ref):
    return np.linalg.norm(x - ref) / np.linalg.norm(ref)

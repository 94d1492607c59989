"""
Dense linear algebra and random-number primitives.

Matrices are plain 2-D float64 numpy arrays. Random streams are numpy
``Generator`` objects backed by PCG64 and seeded through ``SeedSequence``;
normal draws use numpy's ziggurat sampler, so a seed fixes the stream on a
given numpy build.
"""

from typing import List, NamedTuple, Tuple

import numpy as np

from continual_lora.core.exceptions import NumericError, ShapeError

RNG_ALGORITHM = "PCG64+SeedSequence/ziggurat-normal"

SVD_MAX_SWEEPS = 60
SVD_TOLERANCE = 1e-12
SVD_MAX_SMALL_DIM = 512
RANK_RTOL = 1e-12


class SVDResult(NamedTuple):
    u: np.ndarray
    sigma: np.ndarray
    v: np.ndarray


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    m = np.asarray(x, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    return m


def _ensure_finite(m: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(m)):
        raise NumericError(f"{what} produced non-finite entries")
    return m


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "left operand")
    b = as_matrix(b, "right operand")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"Cannot multiply {a.shape[0]}x{a.shape[1]} by {b.shape[0]}x{b.shape[1]}")
    return _ensure_finite(a @ b, "matmul")


def _round_robin(k: int) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Tournament ordering: each round is a set of disjoint column pairs, all pairs covered once per sweep"""
    players = list(range(k)) + ([-1] if k % 2 else [])
    size = len(players)
    rounds = []
    for _ in range(size - 1):
        pairs = [(players[i], players[size - 1 - i]) for i in range(size // 2)]
        pairs = [(min(p, q), max(p, q)) for p, q in pairs if p >= 0 and q >= 0]
        if pairs:
            rounds.append((np.array([p for p, _ in pairs]), np.array([q for _, q in pairs])))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def _complete_columns(basis: np.ndarray, total: int) -> np.ndarray:
    """Extend orthonormal columns to `total` orthonormal columns"""
    dim, have = basis.shape
    if have >= total:
        return basis[:, :total]
    q, _ = np.linalg.qr(np.hstack([basis, np.eye(dim)]), mode="complete")
    return np.hstack([basis, q[:, have:total]])


def _jacobi_tall(m: np.ndarray, full_matrices: bool) -> SVDResult:
    rows, k = m.shape
    work = m.copy()
    v = np.eye(k)
    fro = float(np.linalg.norm(m))
    # columns below this norm are treated as numerically zero and never rotated
    tiny = SVD_TOLERANCE * fro

    if fro > 0.0 and k > 1:
        rounds = _round_robin(k)
        for sweep in range(SVD_MAX_SWEEPS):
            rotated = False
            for p, q in rounds:
                mp = work[:, p]
                mq = work[:, q]
                alpha = np.einsum("ij,ij->j", mp, mp)
                beta = np.einsum("ij,ij->j", mq, mq)
                gamma = np.einsum("ij,ij->j", mp, mq)
                active = (
                    (np.abs(gamma) > SVD_TOLERANCE * np.sqrt(alpha * beta))
                    & (np.sqrt(alpha) > tiny)
                    & (np.sqrt(beta) > tiny)
                )
                if not active.any():
                    continue
                rotated = True
                g = np.where(active, gamma, 1.0)
                zeta = (beta - alpha) / (2.0 * g)
                t = np.where(zeta >= 0.0, 1.0, -1.0) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                c = np.where(active, c, 1.0)
                s = np.where(active, s, 0.0)
                work[:, p] = c * mp - s * mq
                work[:, q] = s * mp + c * mq
                vp = v[:, p]
                vq = v[:, q]
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
            if not rotated:
                break
        else:
            norms = np.linalg.norm(work, axis=0)
            gram = work.T @ work
            np.fill_diagonal(gram, 0.0)
            denom = np.outer(norms, norms)
            residual = float(np.max(np.abs(gram) / np.where(denom > 0, denom, 1.0)))
            raise NumericError(
                f"Jacobi SVD did not converge after {SVD_MAX_SWEEPS} sweeps (residual {residual:.3e})",
                residual=residual,
                iterations=SVD_MAX_SWEEPS,
            )

    sigma = np.linalg.norm(work, axis=0)
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    work = work[:, order]
    v = v[:, order]

    good = int(np.count_nonzero(sigma > tiny)) if fro > 0.0 else 0
    u = work[:, :good] / sigma[:good]
    u = _complete_columns(u, rows if full_matrices else k)
    return SVDResult(u=u, sigma=sigma, v=v)


def svd(m, full_matrices: bool = False) -> SVDResult:
    """One-sided Jacobi SVD; m == u[:, :k] @ diag(sigma) @ v[:, :k].T with k = min(m.shape).

    Sigma is sorted descending. With ``full_matrices`` both u and v are square.
    """
    m = as_matrix(m)
    _ensure_finite(m, "svd input")
    rows, cols = m.shape
    k = min(rows, cols)
    if k > SVD_MAX_SMALL_DIM:
        raise ShapeError(f"svd supports min(rows, cols) <= {SVD_MAX_SMALL_DIM}, got {k}")
    if k == 0:
        return SVDResult(
            u=np.eye(rows) if full_matrices else np.zeros((rows, 0)),
            sigma=np.zeros(0),
            v=np.eye(cols) if full_matrices else np.zeros((cols, 0)),
        )

    if rows >= cols:
        return _jacobi_tall(m, full_matrices)

    # wide input: decompose the transpose and swap the factors
    t = _jacobi_tall(m.T.copy(), full_matrices)
    return SVDResult(u=t.v, sigma=t.sigma, v=t.u)


def rank_threshold(shape: Tuple[int, int], sigma_max: float) -> float:
    return max(shape) * sigma_max * RANK_RTOL


def numerical_rank(m) -> int:
    m = as_matrix(m)
    if m.size == 0:
        return 0
    sigma = svd(m).sigma
    if sigma.size == 0 or sigma[0] == 0.0:
        return 0
    return int(np.count_nonzero(sigma > rank_threshold(m.shape, float(sigma[0]))))


def orthonormal_rowspace_basis(m) -> np.ndarray:
    """Rows of the result are orthonormal and span the row space of m"""
    m = as_matrix(m)
    cols = m.shape[1]
    if m.size == 0:
        return np.zeros((0, cols))
    result = svd(m)
    sigma = result.sigma
    if sigma[0] == 0.0:
        return np.zeros((0, cols))
    rank = int(np.count_nonzero(sigma > rank_threshold(m.shape, float(sigma[0]))))
    return result.v[:, :rank].T.copy()


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))


def derive_rng(master_seed: int, *key: int) -> np.random.Generator:
    """Independent stream for (master_seed, *key) via SeedSequence hashing"""
    return np.random.Generator(np.random.PCG64(derive_seed_sequence(master_seed, *key)))


def derive_seed_sequence(master_seed: int, *key: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(master_seed), *(int(k) for k in key)])


def randn_matrix(rng: np.random.Generator, rows: int, cols: int, std: float = 1.0) -> np.ndarray:
    if std < 0:
        raise ValueError(f"std must be non-negative, got {std}")
    draws = rng.standard_normal((rows, cols))
    if std == 0:
        return np.zeros((rows, cols))
    return draws * std


def frobenius_norm(m) -> float:
    return float(np.linalg.norm(as_matrix(m)))


def cosine_with_flag(u, v) -> Tuple[float, bool]:
    """Cosine similarity plus a flag that is True when either vector is zero (cosine reported as 0)"""
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise ShapeError(f"Cosine needs equal lengths, got {u.size} and {v.size}")
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        return 0.0, True
    value = float(np.dot(u, v) / (nu * nv))
    return min(1.0, max(-1.0, value)), False


def cosine_similarity(u, v) -> float:
    return cosine_with_flag(u, v)[0]

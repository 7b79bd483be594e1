"""Shared test utilities: random SPD factories, an independent Jacobi
eigensolver oracle, and a layer-level finite-difference checker."""

import math

import numpy as np


def random_orthogonal(rng, d):
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.sign(np.diag(r))


def random_spd(rng, d, cond=100.0, trace_normalized=True):
    """Symmetric positive definite matrix with condition number <= cond."""
    v = random_orthogonal(rng, d)
    evals = np.geomspace(1.0, 1.0 / cond, d)
    a = (v * evals[None, :]) @ v.T
    a = 0.5 * (a + a.T)
    if trace_normalized:
        a = a / np.trace(a)
        # pin the trace to 1 exactly up to one rounding
        a[-1, -1] += 1.0 - np.trace(a)
    return a


def jacobi_eigh(a, sweeps=100, tol=1e-14):
    """Cyclic Jacobi eigensolver; slow but entirely independent of LAPACK.

    Returns eigenvalues in descending order and eigenvectors as columns
    with the largest-magnitude component of each made positive.
    """
    a = np.array(a, dtype=np.float64)
    d = a.shape[0]
    v = np.eye(d)
    for _ in range(sweeps):
        off = np.sqrt(np.sum(np.tril(a, -1) ** 2 + np.triu(a, 1) ** 2))
        if off <= tol * max(1.0, np.linalg.norm(a)):
            break
        for p in range(d - 1):
            for q in range(p + 1, d):
                if a[p, q] == 0.0:
                    continue
                tau = (a[q, q] - a[p, p]) / (2.0 * a[p, q])
                t = np.sign(tau) / (abs(tau) + np.sqrt(1.0 + tau * tau)) if tau != 0 else 1.0
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                rot = np.eye(d)
                rot[p, p] = rot[q, q] = c
                rot[p, q] = s
                rot[q, p] = -s
                a = rot.T @ a @ rot
                v = v @ rot
    evals = np.diag(a).copy()
    order = np.argsort(evals)[::-1]
    evals = evals[order]
    vecs = v[:, order]
    anchor = np.abs(vecs).argmax(axis=0)
    signs = np.sign(vecs[anchor, np.arange(d)])
    signs[signs == 0] = 1.0
    return evals, vecs * signs


def finite_difference_dx(forward, x, probe, step=1e-6):
    """Central-difference gradient of sum(probe * forward(x)[0]) w.r.t. x.

    The scalar loss is reduced with math.fsum: at a step of 1e-6 the
    difference quotient amplifies the loss's own rounding error by 5e5, so
    a naively accumulated sum would drown small gradient coordinates.
    """

    def loss(v):
        return math.fsum((forward(v)[0] * probe).ravel().tolist())

    num = np.zeros_like(x)
    for i in range(x.shape[0]):
        for j in range(x.shape[1]):
            xp = x.copy()
            xp[i, j] += step
            xm = x.copy()
            xm[i, j] -= step
            num[i, j] = (loss(xp) - loss(xm)) / (2.0 * step)
    return num


def relative_error(analytic, numeric, floor=1e-8):
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))

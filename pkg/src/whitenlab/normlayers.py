"""Mini-batch normalization transforms with analytic backward passes.

Three kinds operate on a d x m batch (features by samples):

* ``bn``       - per-dimension standardization to zero mean, unit variance;
* ``dbn``      - exact ZCA whitening through a symmetric eigendecomposition;
* ``iternorm`` - approximate ZCA whitening: the covariance is trace-normalized
  so its spectrum lies in (0, 1], a fixed number of Newton-Schulz steps
  approximate its inverse square root, and the result is rescaled.

Each forward returns an opaque cache consumed by exactly one backward call.
Group-wise operation splits the feature dimension into consecutive blocks
and normalizes each block independently. Running statistics (mean and the
whitening matrix itself) support batch-independent inference.
"""

import json
from dataclasses import dataclass

import numpy as np

from . import linalg
from .errors import InputError, NumericError

KINDS = ("bn", "dbn", "iternorm")

# Eigenvalue-gap threshold below which the exact-whitening backward refuses
# to run: the eigenvector adjoint divides by spectral gaps and would return
# garbage rather than a gradient.
_DEGENERATE_GAP = 1e-10


@dataclass(frozen=True)
class NormConfig:
    """Hyperparameters of one normalization layer.

    ``iterations`` only matters for kind ``iternorm``; ``group_size`` is the
    block width for group-wise whitening; ``momentum`` is the running-average
    weight of the current batch.
    """

    kind: str
    eps: float = 1e-5
    iterations: int = 5
    group_size: int = 64
    momentum: float = 0.1
    affine: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InputError(f"unknown normalizer kind {self.kind!r}")
        if self.eps < 0.0:
            raise InputError("eps must be >= 0")
        if self.iterations < 0:
            raise InputError("iterations must be >= 0")
        if self.group_size < 1:
            raise InputError("group_size must be >= 1")
        if not 0.0 <= self.momentum <= 1.0:
            raise InputError("momentum must lie in [0, 1]")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "eps": self.eps,
            "iterations": self.iterations,
            "group_size": self.group_size,
            "momentum": self.momentum,
            "affine": self.affine,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormConfig":
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise InputError(f"unknown normalizer config keys: {sorted(unknown)}")
        if "kind" not in d:
            raise InputError("normalizer config requires 'kind'")
        return cls(**d)


def _consume(cache):
    if cache.used:
        raise InputError("cache already consumed by a backward pass")
    cache.used = True


# ---------------------------------------------------------------------------
# standardization


@dataclass
class BNCache:
    xhat: np.ndarray
    inv_std: np.ndarray
    mean: np.ndarray
    m: int
    used: bool = False

    def whitener(self) -> np.ndarray:
        return np.diag(self.inv_std)


def bn_forward(x: np.ndarray, eps: float) -> tuple[np.ndarray, BNCache]:
    """Standardize each row to zero mean and unit (biased) variance."""
    x = linalg.as_matrix(x, "x")
    if eps < 0.0:
        raise InputError("eps must be >= 0")
    m = x.shape[1]
    mean = x.mean(axis=1)
    x_c = x - mean[:, None]
    var = (x_c * x_c).mean(axis=1)
    if eps == 0.0 and (var == 0.0).any():
        raise NumericError("zero variance")
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = x_c * inv_std[:, None]
    return xhat, BNCache(xhat=xhat, inv_std=inv_std, mean=mean, m=m)


def bn_backward(g: np.ndarray, cache: BNCache) -> np.ndarray:
    g = linalg.as_matrix(g, "g")
    if g.shape != cache.xhat.shape:
        raise InputError(f"gradient shape {g.shape} does not match forward {cache.xhat.shape}")
    _consume(cache)
    g_mean = g.mean(axis=1)
    gx_mean = (g * cache.xhat).mean(axis=1)
    return cache.inv_std[:, None] * (g - g_mean[:, None] - cache.xhat * gx_mean[:, None])


# ---------------------------------------------------------------------------
# exact ZCA whitening


@dataclass
class DBNCache:
    x_c: np.ndarray
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    inv_sqrt: np.ndarray
    mean: np.ndarray
    m: int
    used: bool = False

    def whitener(self) -> np.ndarray:
        return self.inv_sqrt


def dbn_forward(x: np.ndarray, eps: float) -> tuple[np.ndarray, DBNCache]:
    """Whiten a batch exactly: X_hat = V diag(lambda^-1/2) V^T (X - mu 1^T)."""
    x = linalg.as_matrix(x, "x")
    m = x.shape[1]
    mean = x.mean(axis=1)
    x_c = x - mean[:, None]
    sigma = linalg.covariance(x_c, eps)
    evals, evecs = linalg.sym_eigen(sigma)
    if evals[-1] <= 0.0:
        raise NumericError("covariance is singular; increase eps or the batch size")
    inv_sqrt = linalg.symmetrize((evecs * (1.0 / np.sqrt(evals))[None, :]) @ evecs.T)
    xhat = inv_sqrt @ x_c
    return xhat, DBNCache(
        x_c=x_c, eigenvalues=evals, eigenvectors=evecs, inv_sqrt=inv_sqrt, mean=mean, m=m
    )


def dbn_backward(g: np.ndarray, cache: DBNCache) -> np.ndarray:
    """Backward through the eigendecomposition-based whitener.

    Uses the standard symmetric-eigen adjoint, which divides by eigenvalue
    gaps; a near-degenerate spectrum is refused rather than amplified.
    """
    g = linalg.as_matrix(g, "g")
    if g.shape != cache.x_c.shape:
        raise InputError(f"gradient shape {g.shape} does not match forward {cache.x_c.shape}")
    _consume(cache)
    lam, v = cache.eigenvalues, cache.eigenvectors
    if lam.shape[0] > 1 and float(np.min(lam[:-1] - lam[1:])) < _DEGENERATE_GAP:
        raise NumericError("degenerate spectrum")
    m = cache.m
    dw = g @ cache.x_c.T
    inv_sqrt_lam = 1.0 / np.sqrt(lam)
    dv = (dw + dw.T) @ (v * inv_sqrt_lam[None, :])
    dlam = -0.5 * lam ** (-1.5) * np.einsum("ji,jk,ki->i", v, dw, v)
    gaps = lam[None, :] - lam[:, None]
    np.fill_diagonal(gaps, 1.0)
    coeff = 1.0 / gaps
    np.fill_diagonal(coeff, 0.0)
    n = coeff * (v.T @ dv)
    n[np.diag_indices_from(n)] = dlam
    dsigma = linalg.symmetrize(v @ n @ v.T)
    f = g.mean(axis=1)
    return cache.inv_sqrt @ (g - f[:, None]) + (2.0 / m) * (dsigma @ cache.x_c)


# ---------------------------------------------------------------------------
# Newton-Schulz whitening


@dataclass
class IterNormCache:
    x_c: np.ndarray
    sigma_n: np.ndarray
    trace: float
    iterates: list[np.ndarray]
    inv_sqrt: np.ndarray
    mean: np.ndarray
    m: int
    used: bool = False

    def whitener(self) -> np.ndarray:
        return self.inv_sqrt


def iternorm_forward(x: np.ndarray, cfg: NormConfig) -> tuple[np.ndarray, IterNormCache]:
    """Whiten a batch with Newton-Schulz steps on the trace-normalized covariance.

    mu = mean(X); X_C = X - mu 1^T; S = (1/m) X_C X_C^T + eps I;
    S_N = S / tr(S); P_T from the Newton-Schulz recursion;
    whitener = P_T / sqrt(tr(S)); X_hat = whitener X_C.

    Trace normalization puts the spectrum of S_N in (0, 1], which guarantees
    the iteration converges; directions with large eigenvalues converge
    fastest, so a small iteration count whitens dominant directions while
    barely stretching noise directions.
    """
    x = linalg.as_matrix(x, "x")
    m = x.shape[1]
    mean = x.mean(axis=1)
    x_c = x - mean[:, None]
    sigma = linalg.covariance(x_c, cfg.eps)
    trace = float(np.trace(sigma))
    if trace <= 0.0:
        raise NumericError("zero variance")
    sigma_n = sigma / trace
    p_t, iterates = linalg.newton_schulz(sigma_n, cfg.iterations)
    inv_sqrt = p_t / np.sqrt(trace)
    xhat = inv_sqrt @ x_c
    return xhat, IterNormCache(
        x_c=x_c,
        sigma_n=sigma_n,
        trace=trace,
        iterates=iterates,
        inv_sqrt=inv_sqrt,
        mean=mean,
        m=m,
    )


def iternorm_backward(g: np.ndarray, cache: IterNormCache) -> np.ndarray:
    """Analytic backward of the Newton-Schulz whitening forward.

    Replays the iteration in reverse to push the whitener gradient back
    onto the normalized covariance, adds the two trace-derivative
    corrections (the trace is a function of the batch and must carry
    gradient itself), then distributes onto the inputs through the
    centering map.

    The reverse recurrence, like the forward one written plainly, amplifies
    rounding once the iteration has long converged; gradients are accurate
    for practical iteration counts (the regime the layer runs in), not for
    iteration counts far past convergence.
    """
    g = linalg.as_matrix(g, "g")
    if g.shape != cache.x_c.shape:
        raise InputError(f"gradient shape {g.shape} does not match forward {cache.x_c.shape}")
    _consume(cache)
    x_c, sigma_n, trace = cache.x_c, cache.sigma_n, cache.trace
    m = cache.m
    sqrt_trace = np.sqrt(trace)

    dw = g @ x_c.T                      # gradient w.r.t. the whitener
    dp = dw / sqrt_trace                # gradient w.r.t. the final iterate
    dsigma_n = np.zeros_like(sigma_n)
    # P, P^2 and the normalized covariance are exactly symmetric (the
    # forward re-symmetrizes), so every transposed factor collapses and the
    # shared product dP.S can be reused, leaving 8 d^3 products per step
    p2 = np.empty_like(dsigma_n)
    dps = np.empty_like(dsigma_n)
    scratch = np.empty_like(dsigma_n)
    for p in reversed(cache.iterates[:-1]):
        np.matmul(p, p, out=p2)
        np.matmul(dp, sigma_n, out=dps)
        dsigma_n -= 0.5 * ((p2 @ p) @ dp)
        np.matmul(p, dps, out=scratch)
        dp = 1.5 * dp - 0.5 * (dps @ p2 + p2 @ dps + scratch @ p)

    t_norm = float((dsigma_n * sigma_n).sum()) / trace
    t_scale = float((dw * cache.iterates[-1]).sum()) / (2.0 * trace * sqrt_trace)
    dsigma = dsigma_n / trace
    dsigma[np.diag_indices_from(dsigma)] -= t_norm + t_scale

    f = g.mean(axis=1)
    return cache.inv_sqrt @ (g - f[:, None]) + (1.0 / m) * ((dsigma + dsigma.T) @ x_c)


# ---------------------------------------------------------------------------
# learnable scale and shift


@dataclass
class AffineCache:
    xhat: np.ndarray
    gamma: np.ndarray
    used: bool = False


def affine_forward(xhat: np.ndarray, gamma: np.ndarray, beta: np.ndarray):
    xhat = linalg.as_matrix(xhat, "xhat")
    gamma = np.asarray(gamma, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    if gamma.shape != (xhat.shape[0],) or beta.shape != (xhat.shape[0],):
        raise InputError("gamma/beta must be vectors of the feature dimension")
    y = gamma[:, None] * xhat + beta[:, None]
    return y, AffineCache(xhat=xhat, gamma=gamma)


def affine_backward(g: np.ndarray, cache: AffineCache):
    g = linalg.as_matrix(g, "g")
    if g.shape != cache.xhat.shape:
        raise InputError(f"gradient shape {g.shape} does not match forward {cache.xhat.shape}")
    _consume(cache)
    dgamma = (g * cache.xhat).sum(axis=1)
    dbeta = g.sum(axis=1)
    dxhat = cache.gamma[:, None] * g
    return dxhat, dgamma, dbeta


# ---------------------------------------------------------------------------
# group-wise dispatch


def group_slices(d: int, group_size: int) -> list[slice]:
    """Consecutive blocks of `group_size` rows; the last block keeps the remainder."""
    if group_size > d:
        raise InputError(f"group_size {group_size} exceeds dimension {d}")
    return [slice(start, min(start + group_size, d)) for start in range(0, d, group_size)]


@dataclass
class GroupedCache:
    cfg: NormConfig
    slices: list[slice]
    caches: list
    shape: tuple
    used: bool = False

    @property
    def mean(self) -> np.ndarray:
        return np.concatenate([c.mean for c in self.caches])

    def whitener(self) -> np.ndarray:
        d = self.shape[0]
        w = np.zeros((d, d))
        for sl, c in zip(self.slices, self.caches):
            w[sl, sl] = c.whitener()
        return w


def grouped_forward(x: np.ndarray, cfg: NormConfig) -> tuple[np.ndarray, GroupedCache]:
    """Apply the configured normalizer independently to consecutive row blocks."""
    x = linalg.as_matrix(x, "x")
    slices = group_slices(x.shape[0], cfg.group_size)
    xhat = np.empty_like(x)
    caches = []
    for sl in slices:
        block = x[sl]
        if cfg.kind == "bn":
            out, c = bn_forward(block, cfg.eps)
        elif cfg.kind == "dbn":
            out, c = dbn_forward(block, cfg.eps)
        else:
            out, c = iternorm_forward(block, cfg)
        xhat[sl] = out
        caches.append(c)
    return xhat, GroupedCache(cfg=cfg, slices=slices, caches=caches, shape=x.shape)


def grouped_backward(g: np.ndarray, cache: GroupedCache) -> np.ndarray:
    g = linalg.as_matrix(g, "g")
    if g.shape != cache.shape:
        raise InputError(f"gradient shape {g.shape} does not match forward {cache.shape}")
    _consume(cache)
    dx = np.empty_like(g)
    for sl, c in zip(cache.slices, cache.caches):
        if cache.cfg.kind == "bn":
            dx[sl] = bn_backward(g[sl], c)
        elif cache.cfg.kind == "dbn":
            dx[sl] = dbn_backward(g[sl], c)
        else:
            dx[sl] = iternorm_backward(g[sl], c)
    return dx


# ---------------------------------------------------------------------------
# convolutional unrolling


def unroll_conv(x4: np.ndarray) -> np.ndarray:
    """Reshape an h x w x d x m feature map into a d x (m*h*w) batch.

    Every spatial position of every sample becomes one column; columns are
    ordered sample-major, then row, then column.
    """
    x4 = np.asarray(x4, dtype=np.float64)
    if x4.ndim != 4:
        raise InputError(f"expected a 4-D tensor, got shape {x4.shape}")
    if not np.isfinite(x4).all():
        raise InputError("non-finite input")
    h, w, d, m = x4.shape
    return x4.transpose(2, 3, 0, 1).reshape(d, m * h * w)


def roll_conv(x: np.ndarray, shape: tuple) -> np.ndarray:
    """Inverse of unroll_conv for a feature map of the given h, w, d, m shape."""
    x = linalg.as_matrix(x, "x")
    h, w, d, m = shape
    if x.shape != (d, m * h * w):
        raise InputError(f"size mismatch: cannot roll {x.shape} into {shape}")
    return x.reshape(d, m, h, w).transpose(2, 3, 0, 1)


# ---------------------------------------------------------------------------
# running statistics and inference


@dataclass
class LayerState:
    """Per-layer mutable state: running statistics plus learnable scale/shift."""

    running_mean: np.ndarray
    running_whitener: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray

    @classmethod
    def initial(cls, d: int) -> "LayerState":
        return cls(
            running_mean=np.zeros(d),
            running_whitener=np.eye(d),
            gamma=np.ones(d),
            beta=np.zeros(d),
        )


def update_running(state: LayerState, mean: np.ndarray, whitener: np.ndarray, momentum: float):
    """Exponential moving average of the batch mean and whitening matrix.

    The whitening matrix itself is averaged, not the covariance; the
    averaged matrix is generally not an exact inverse square root of any
    covariance, which is accepted.
    """
    if not 0.0 <= momentum <= 1.0:
        raise InputError("momentum must lie in [0, 1]")
    state.running_mean = (1.0 - momentum) * state.running_mean + momentum * mean
    state.running_whitener = (1.0 - momentum) * state.running_whitener + momentum * whitener


def infer(x: np.ndarray, state: LayerState, cfg: NormConfig) -> np.ndarray:
    """Normalize with frozen running statistics; no batch statistics consumed."""
    x = linalg.as_matrix(x, "x")
    d = state.running_mean.shape[0]
    if x.shape[0] != d:
        raise InputError(f"input dimension {x.shape[0]} does not match state dimension {d}")
    y = state.running_whitener @ (x - state.running_mean[:, None])
    if cfg.affine:
        y = state.gamma[:, None] * y + state.beta[:, None]
    return y


# ---------------------------------------------------------------------------
# checkpoint document for a stack of normalization layers

CHECKPOINT_VERSION = 1


def norm_states_to_doc(cfg: NormConfig, states: list[LayerState]) -> dict:
    return {
        "version": CHECKPOINT_VERSION,
        "config": cfg.to_dict(),
        "layers": [
            {
                "mean": s.running_mean.tolist(),
                "whitener": s.running_whitener.tolist(),
                "gamma": s.gamma.tolist(),
                "beta": s.beta.tolist(),
            }
            for s in states
        ],
    }


def norm_states_from_doc(doc: dict) -> tuple[NormConfig, list[LayerState]]:
    if not isinstance(doc, dict) or doc.get("version") != CHECKPOINT_VERSION:
        raise InputError("unsupported checkpoint document")
    cfg = NormConfig.from_dict(doc.get("config", {}))
    states = []
    for i, layer in enumerate(doc.get("layers", [])):
        try:
            mean = np.asarray(layer["mean"], dtype=np.float64)
            whitener = np.asarray(layer["whitener"], dtype=np.float64)
            gamma = np.asarray(layer["gamma"], dtype=np.float64)
            beta = np.asarray(layer["beta"], dtype=np.float64)
        except (KeyError, TypeError, ValueError) as exc:
            raise InputError(f"layer {i}: malformed checkpoint entry") from exc
        d = mean.shape[0]
        if mean.ndim != 1 or whitener.shape != (d, d):
            raise InputError(f"layer {i}: inconsistent shapes in checkpoint")
        if gamma.shape != (d,) or beta.shape != (d,):
            raise InputError(f"layer {i}: inconsistent gamma/beta shapes")
        if not (
            np.isfinite(mean).all()
            and np.isfinite(whitener).all()
            and np.isfinite(gamma).all()
            and np.isfinite(beta).all()
        ):
            raise InputError(f"layer {i}: non-finite checkpoint values")
        mask = np.ones((d, d), dtype=bool)
        for sl in group_slices(d, min(cfg.group_size, d)):
            mask[sl, sl] = False
        if np.any(whitener[mask] != 0.0):
            raise InputError(f"layer {i}: whitener is not block-diagonal for the config")
        states.append(
            LayerState(running_mean=mean, running_whitener=whitener, gamma=gamma, beta=beta)
        )
    return cfg, states


def save_checkpoint(path, cfg: NormConfig, states: list[LayerState]):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(norm_states_to_doc(cfg, states), fh)


def load_checkpoint(path) -> tuple[NormConfig, list[LayerState]]:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read checkpoint: {exc}") from exc
    return norm_states_from_doc(doc)

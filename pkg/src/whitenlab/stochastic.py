"""Monte-Carlo estimation of normalization stochasticity and conditioning.

A probe sample x is normalized many times, each time inside a freshly
resampled batch in which it occupies column 0; the spread of its
normalized images measures how much stochastic disturbance the
normalizer injects. The same machinery reports the condition number of
the covariance of normalized outputs over one large batch.

Every probe owns an independent counter-based RNG stream derived from
(seed, probe index), so sweeps are schedule-independent and bitwise
reproducible.
"""

import csv
import json
import math
from dataclasses import dataclass, replace

import numpy as np

from . import data as datamod
from . import linalg, normlayers
from .errors import InputError, NumericError

# stream derivation tags (second element of the spawn key)
_POPULATION = 1
_PROBES = 2
_KAPPA = 3
_PARTNERS = 4
_SWEEP = 5

SWEEP_AXES = ("batch_size", "dimension")

CSV_COLUMNS = (
    "axis_value",
    "kind",
    "T",
    "group_size",
    "B",
    "d",
    "snd_mean",
    "snd_stderr",
    "cond_number",
    "seed",
    "status",
)


@dataclass(frozen=True)
class SNDQuery:
    """One disturbance measurement: a normalizer, a geometry, and sampling sizes.

    ``repeats`` is the number of resampled batches per probe, ``probes`` the
    number of probe samples averaged into the operator-level value. A
    ``group_size`` larger than the dimension means full whitening.
    """

    normalizer: normlayers.NormConfig
    dimension: int
    batch_size: int
    repeats: int = 100
    probes: int = 1000
    population_size: int = 60000
    kappa_batch: int = 1024
    seed: int = 0

    def __post_init__(self):
        if self.dimension < 1:
            raise InputError("dimension must be >= 1")
        if self.batch_size < 2:
            raise InputError("batch size must be >= 2")
        if self.repeats < 2:
            raise InputError("repeats must be >= 2")
        if self.probes < 1:
            raise InputError("probes must be >= 1")
        if self.population_size < 1:
            raise InputError("population size must be >= 1")
        if self.batch_size > self.population_size:
            raise InputError("batch size exceeds the available population")

    def effective_config(self) -> normlayers.NormConfig:
        g = min(self.normalizer.group_size, self.dimension)
        return replace(self.normalizer, group_size=g)


@dataclass
class SNDReport:
    """Per-query disturbance estimates plus output-conditioning summary."""

    query: SNDQuery
    per_sample: np.ndarray
    snd_mean: float
    snd_stderr: float
    cond_number: float
    failures: int = 0
    axis_value: float = math.nan

    @property
    def status(self) -> str:
        return "failed" if math.isnan(self.snd_mean) else "ok"


def _batched_normalize_col0(batches: np.ndarray, cfg: normlayers.NormConfig):
    """Normalized output of column 0 for a stack of batches (s, d, B).

    Runs the same arithmetic as the normlayers forwards, vectorized over
    the resample axis. Returns (outputs (s, d), bad (s,) bool) where bad
    marks resamples whose whitening failed (singular covariance).
    """
    s, d, b = batches.shape
    out = np.empty((s, d))
    bad = np.zeros(s, dtype=bool)
    for sl in normlayers.group_slices(d, min(cfg.group_size, d)):
        xb = batches[:, sl, :]
        mu = xb.mean(axis=2, keepdims=True)
        xc = xb - mu
        if cfg.kind == "bn":
            var = (xc * xc).mean(axis=2)
            out[:, sl] = xc[:, :, 0] * (1.0 / np.sqrt(var + cfg.eps))
            continue
        cov = xc @ xc.swapaxes(1, 2) / b
        cov = 0.5 * (cov + cov.swapaxes(1, 2))
        idx = np.arange(sl.stop - sl.start)
        cov[:, idx, idx] += cfg.eps
        if cfg.kind == "iternorm":
            tr = np.trace(cov, axis1=1, axis2=2)
            if (tr <= 0.0).any():
                bad |= tr <= 0.0
                tr = np.where(tr > 0.0, tr, 1.0)
            a = cov / tr[:, None, None]
            eye = np.eye(len(idx))
            p = np.broadcast_to(eye, a.shape).copy()
            q = a.copy()
            for _ in range(cfg.iterations):
                t = 1.5 * eye - 0.5 * (p @ q)
                p = t @ p
                p = 0.5 * (p + p.swapaxes(1, 2))
                q = q @ t
            w = p / np.sqrt(tr)[:, None, None]
        else:
            evals, evecs = np.linalg.eigh(cov)
            singular = evals[:, 0] <= 0.0
            if singular.any():
                bad |= singular
                evals = np.where(evals > 0.0, evals, 1.0)
            w = (evecs * (1.0 / np.sqrt(evals))[:, None, :]) @ evecs.swapaxes(1, 2)
        out[:, sl] = np.einsum("sij,sj->si", w, xc[:, :, 0])
    return out, bad


def _disturbance(outputs: np.ndarray) -> float:
    """Mean Euclidean spread of a probe's normalized images across resamples."""
    dev = outputs - outputs.mean(axis=0)
    return float(np.linalg.norm(dev, axis=1).mean())


def _bn_probe_disturbance(x, partners, batch_size, eps) -> float:
    """Standardization disturbance from sample-major partners (s, B-1, d).

    Works off partner sums and sums of squares, so the batch tensor is never
    materialized; the variance uses the E[x^2] - mu^2 form, clamped at zero
    against rounding, which matches the two-pass form to rounding for the
    O(1)-scaled populations used here.
    """
    psum = partners.sum(axis=1)
    psq = np.einsum("sbd,sbd->sd", partners, partners)
    mu = (x + psum) / batch_size
    var = (x * x + psq) / batch_size - mu * mu
    np.maximum(var, 0.0, out=var)
    out = (x - mu) * (1.0 / np.sqrt(var + eps))
    return _disturbance(out)


def _probe_disturbance(x, pop_rows, query, rng, sampler=None, transform=None) -> float:
    """Disturbance of one probe given a prepared sample-major population."""
    s, b = query.repeats, query.batch_size
    d = x.shape[0]
    if sampler is None:
        idx = rng.integers(0, pop_rows.shape[0], size=(s, b - 1))
        partners = pop_rows[idx]  # (s, b-1, d), contiguous gather
    else:
        partners = np.stack(
            [np.asarray(sampler(i), dtype=np.float64).T for i in range(s)]
        )
    cfg = query.effective_config()
    if transform is None and cfg.kind == "bn":
        return _bn_probe_disturbance(x, partners, b, cfg.eps)
    batches = np.empty((s, d, b))
    batches[:, :, 0] = x
    batches[:, :, 1:] = partners.transpose(0, 2, 1)
    if transform is not None:
        return _disturbance(transform(batches))
    outputs, bad = _batched_normalize_col0(batches, cfg)
    if bad.any():
        return math.nan
    return _disturbance(outputs)


def snd_per_sample(
    x: np.ndarray,
    population: np.ndarray,
    query: SNDQuery,
    rng: np.random.Generator | None = None,
    sampler=None,
    transform=None,
) -> float:
    """Empirical disturbance of one probe over `repeats` resampled batches.

    The probe occupies column 0 of every batch; the remaining columns are
    i.i.d. draws from the population. `sampler(i) -> d x (B-1)` overrides
    the partner draw and `transform(batches) -> (s, d)` overrides the
    normalizer itself (both exist for tests and degenerate setups).
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    population = linalg.as_matrix(population, "population")
    d, n_pop = population.shape
    if x.shape[0] != d:
        raise InputError("probe dimension does not match the population")
    if query.batch_size > n_pop:
        raise InputError("batch size exceeds the available population")
    if rng is None:
        rng = datamod.stream(query.seed, _PARTNERS, 0)
    return _probe_disturbance(
        x, np.ascontiguousarray(population.T), query, rng, sampler, transform
    )


def _condition_number(population: np.ndarray, query: SNDQuery, rng: np.random.Generator) -> float:
    """lambda_max / lambda_min of the covariance of normalized outputs of one batch."""
    n_pop = population.shape[1]
    size = min(query.kappa_batch, n_pop)
    idx = rng.choice(n_pop, size=size, replace=False)
    batch = population[:, idx]
    try:
        out, _ = normlayers.grouped_forward(batch, query.effective_config())
    except NumericError:
        return math.nan
    centered = out - out.mean(axis=1, keepdims=True)
    evals = linalg.sym_eigen(linalg.covariance(centered, 0.0)).eigenvalues
    if evals[-1] <= 0.0:
        return math.inf
    return float(evals[0] / evals[-1])


def snd_operator(query: SNDQuery, transform=None) -> SNDReport:
    """Operator-level disturbance: the mean per-probe value over fresh probes.

    Whitening failures are recorded as missing probes rather than raised;
    the report carries how many probes were lost.
    """
    d = query.dimension
    population = datamod.gaussian_population(
        d, query.population_size, datamod.derive_seed(query.seed, _POPULATION)
    ).x
    pop_rows = np.ascontiguousarray(population.T)  # sample-major for fast gathers
    probe_rng = datamod.stream(query.seed, _PROBES)
    probe_idx = probe_rng.integers(0, query.population_size, size=query.probes)
    values = np.empty(query.probes)
    for i, col in enumerate(probe_idx):
        rng = datamod.stream(query.seed, _PARTNERS, i)
        try:
            values[i] = _probe_disturbance(
                pop_rows[col], pop_rows, query, rng, transform=transform
            )
        except NumericError:
            values[i] = math.nan
    ok = np.isfinite(values)
    failures = int((~ok).sum())
    if ok.any():
        mean = float(values[ok].mean())
        stderr = float(values[ok].std(ddof=0) / math.sqrt(ok.sum()))
    else:
        mean = math.nan
        stderr = math.nan
    kappa = _condition_number(population, query, datamod.stream(query.seed, _KAPPA))
    return SNDReport(
        query=query,
        per_sample=values,
        snd_mean=mean,
        snd_stderr=stderr,
        cond_number=kappa,
        failures=failures,
    )


def point_query(base: SNDQuery, axis: str, value: int, point: int, repetition: int) -> SNDQuery:
    """The fully-resolved query a sweep runs at one (grid point, repetition).

    Dimension sweeps re-derive the population per point, so the group size
    is capped at the point's dimension via `effective_config`.
    """
    if axis not in SWEEP_AXES:
        raise InputError(f"unknown sweep axis {axis!r}")
    seed = datamod.derive_seed(base.seed, _SWEEP, point, repetition)
    if axis == "batch_size":
        return replace(base, batch_size=int(value), seed=seed)
    return replace(base, dimension=int(value), seed=seed)


def sweep(axis: str, grid, base_query: SNDQuery, repetitions: int = 10) -> list[SNDReport]:
    """One aggregated report per grid point, averaged over seeded repetitions."""
    grid = [int(v) for v in grid]
    if not grid or any(b >= a for a, b in zip(grid[1:], grid)):
        raise InputError("grid must be non-empty and strictly ascending")
    if repetitions < 1:
        raise InputError("repetitions must be >= 1")
    reports = []
    for i, value in enumerate(grid):
        reps = [
            snd_operator(point_query(base_query, axis, value, i, r)) for r in range(repetitions)
        ]
        if repetitions == 1:
            report = reps[0]
            report.axis_value = float(value)
        else:
            means = np.array([r.snd_mean for r in reps])
            kappas = np.array([r.cond_number for r in reps])
            ok = np.isfinite(means)
            report = SNDReport(
                query=reps[0].query,
                per_sample=means,
                snd_mean=float(means[ok].mean()) if ok.any() else math.nan,
                snd_stderr=(
                    float(means[ok].std(ddof=0) / math.sqrt(ok.sum())) if ok.any() else math.nan
                ),
                cond_number=float(np.nanmean(kappas)) if np.isfinite(kappas).any() else math.nan,
                failures=sum(r.failures for r in reps),
                axis_value=float(value),
            )
        reports.append(report)
    return reports


def write_reports_csv(path, reports: list[SNDReport], echo: dict | None = None):
    """Sweep reports in the stable CSV schema, with a JSON config echo header."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if echo is not None:
            fh.write("# " + json.dumps(echo, sort_keys=True) + "\n")
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for r in reports:
            q = r.query
            writer.writerow(
                [
                    r.axis_value,
                    q.normalizer.kind,
                    q.normalizer.iterations,
                    q.effective_config().group_size,
                    q.batch_size,
                    q.dimension,
                    r.snd_mean,
                    r.snd_stderr,
                    r.cond_number,
                    q.seed,
                    r.status,
                ]
            )

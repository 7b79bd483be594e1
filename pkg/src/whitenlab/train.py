"""Minimal fully-connected network trainer around the normalization layers.

Architecture per hidden layer: linear -> normalizer -> learnable scale and
shift -> ReLU, with softmax cross-entropy on top and plain SGD. Enough to
run desk-scale ablations of the normalizers under full-batch and
micro-batch regimes, plus a reusable central-difference gradient checker.
"""

import csv
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import data as datamod
from . import normlayers
from .errors import InputError, NumericError

DIVERGENCE_LIMIT = 1e6


@dataclass(frozen=True)
class MLPSpec:
    """Layer widths (input, hidden..., output) and an optional normalizer."""

    widths: tuple
    normalizer: normlayers.NormConfig | None = None
    seed: int = 0

    def __post_init__(self):
        widths = tuple(int(w) for w in self.widths)
        object.__setattr__(self, "widths", widths)
        if len(widths) < 3:
            raise InputError("need at least one hidden layer")
        if any(w < 1 for w in widths):
            raise InputError("layer widths must be >= 1")

    @property
    def hidden(self) -> tuple:
        return self.widths[1:-1]


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float
    iterations: int
    batch_size: int = 0  # 0 means full batch
    eval_every: int = 10

    def __post_init__(self):
        if self.iterations < 0:
            raise InputError("iterations must be >= 0")
        if self.batch_size < 0:
            raise InputError("batch size must be >= 0")
        if self.eval_every < 1:
            raise InputError("eval_every must be >= 1")


@dataclass
class ModelParams:
    weights: list
    biases: list
    norm_states: list  # LayerState or None per hidden layer


@dataclass
class Grads:
    weights: list
    biases: list
    gammas: list
    betas: list


@dataclass
class ForwardCache:
    layers: list
    logits: np.ndarray
    probs: np.ndarray
    labels: np.ndarray
    inputs: np.ndarray
    m: int
    used: bool = False


@dataclass
class TrainRun:
    """Per-iteration loss/error curves plus periodic test error."""

    learning_rate: float
    batch_size: int
    iterations: int
    train_loss: list = field(default_factory=list)
    train_err: list = field(default_factory=list)
    test_err: list = field(default_factory=list)  # (iteration, error) pairs
    diverged: bool = False
    params: ModelParams | None = None

    @property
    def final_train_loss(self) -> float:
        if self.diverged or not self.train_loss:
            return math.inf
        return self.train_loss[-1]

    @property
    def final_train_err(self) -> float:
        if not self.train_err:
            return math.nan
        return self.train_err[-1]


def init_params(spec: MLPSpec) -> ModelParams:
    """He-scaled Gaussian weights, zero biases, identity normalizer states.

    Hidden layers followed by a normalizer carry no bias: centering would
    cancel it exactly, and the post-normalization shift plays its role.
    """
    weights, biases, states = [], [], []
    for i, (fan_in, fan_out) in enumerate(zip(spec.widths[:-1], spec.widths[1:])):
        rng = datamod.stream(spec.seed, 20, i)
        weights.append(rng.standard_normal((fan_out, fan_in)) * np.sqrt(2.0 / fan_in))
        hidden = i < len(spec.widths) - 2
        biases.append(None if hidden and spec.normalizer is not None else np.zeros(fan_out))
        if hidden:
            states.append(
                normlayers.LayerState.initial(fan_out) if spec.normalizer is not None else None
            )
    return ModelParams(weights=weights, biases=biases, norm_states=states)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    zmax = logits.max(axis=0, keepdims=True)
    shifted = logits - zmax
    return shifted - np.log(np.exp(shifted).sum(axis=0, keepdims=True))


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    logp = _log_softmax(logits)
    return float(-logp[labels, np.arange(labels.shape[0])].mean())


def error_rate(logits: np.ndarray, labels: np.ndarray) -> float:
    return float((logits.argmax(axis=0) != labels).mean())


def forward_loss(
    spec: MLPSpec,
    params: ModelParams,
    x: np.ndarray,
    labels: np.ndarray,
    mode: str = "train",
    update_stats: bool = True,
) -> tuple[float, ForwardCache]:
    """Softmax cross-entropy of the network on a batch.

    Training mode normalizes with batch statistics and (by default) folds
    them into the running averages; inference mode uses the frozen running
    statistics only.
    """
    if mode not in ("train", "infer"):
        raise InputError(f"unknown mode {mode!r}")
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels)
    cfg = spec.normalizer
    a = x
    layer_caches = []
    # overflow on a diverging run surfaces as the finiteness error below,
    # not as a warning
    with np.errstate(over="ignore", invalid="ignore"):
        for i in range(len(spec.widths) - 2):
            z = params.weights[i] @ a
            if params.biases[i] is not None:
                z = z + params.biases[i][:, None]
            if not np.isfinite(z).all():
                raise NumericError(f"non-finite activations at layer {i}")
            state = params.norm_states[i]
            if cfg is not None:
                if mode == "train":
                    xhat, ncache = normlayers.grouped_forward(z, cfg)
                    if update_stats:
                        normlayers.update_running(
                            state, ncache.mean, ncache.whitener(), cfg.momentum
                        )
                    if cfg.affine:
                        y, acache = normlayers.affine_forward(xhat, state.gamma, state.beta)
                    else:
                        y, acache = xhat, None
                else:
                    y, ncache, acache = normlayers.infer(z, state, cfg), None, None
            else:
                y, ncache, acache = z, None, None
            if not np.isfinite(y).all():
                raise NumericError(f"non-finite activations at layer {i}")
            mask = y > 0.0
            a = y * mask
            layer_caches.append({"a_prev": x if i == 0 else layer_caches[-1]["a"],
                                 "norm": ncache, "affine": acache, "mask": mask, "a": a})
        logits = params.weights[-1] @ a + params.biases[-1][:, None]
    if not np.isfinite(logits).all():
        raise NumericError(f"non-finite activations at layer {len(spec.widths) - 2}")
    logp = _log_softmax(logits)
    m = labels.shape[0]
    loss = float(-logp[labels, np.arange(m)].mean())
    cache = ForwardCache(
        layers=layer_caches,
        logits=logits,
        probs=np.exp(logp),
        labels=labels,
        inputs=x,
        m=m,
    )
    return loss, cache


def backward(spec: MLPSpec, params: ModelParams, cache: ForwardCache) -> Grads:
    """Gradients of the cross-entropy loss for every learnable parameter."""
    if cache.used:
        raise InputError("cache already consumed by a backward pass")
    cache.used = True
    m = cache.m
    n_hidden = len(spec.widths) - 2
    grads = Grads(
        weights=[None] * len(params.weights),
        biases=[None] * len(params.biases),
        gammas=[None] * n_hidden,
        betas=[None] * n_hidden,
    )
    dlogits = cache.probs.copy()
    dlogits[cache.labels, np.arange(m)] -= 1.0
    dlogits /= m
    a_last = cache.layers[-1]["a"] if cache.layers else cache.inputs
    grads.weights[-1] = dlogits @ a_last.T
    grads.biases[-1] = dlogits.sum(axis=1)
    da = params.weights[-1].T @ dlogits
    for i in range(n_hidden - 1, -1, -1):
        lc = cache.layers[i]
        dy = da * lc["mask"]
        if lc["affine"] is not None:
            dxhat, dgamma, dbeta = normlayers.affine_backward(dy, lc["affine"])
            grads.gammas[i], grads.betas[i] = dgamma, dbeta
        else:
            dxhat = dy
        if lc["norm"] is not None:
            dz = normlayers.grouped_backward(dxhat, lc["norm"])
        else:
            dz = dxhat
        grads.weights[i] = dz @ lc["a_prev"].T
        if params.biases[i] is not None:
            grads.biases[i] = dz.sum(axis=1)
        if i > 0:
            da = params.weights[i].T @ dz
    return grads


def backward_step(spec: MLPSpec, params: ModelParams, cache: ForwardCache, lr: float) -> ModelParams:
    """One vanilla SGD step in place; the cache is consumed."""
    grads = backward(spec, params, cache)
    for i in range(len(params.weights)):
        params.weights[i] -= lr * grads.weights[i]
        if params.biases[i] is not None:
            params.biases[i] -= lr * grads.biases[i]
    for i, state in enumerate(params.norm_states):
        if state is not None and grads.gammas[i] is not None:
            state.gamma = state.gamma - lr * grads.gammas[i]
            state.beta = state.beta - lr * grads.betas[i]
    return params


def grad_check(f, point: np.ndarray, step: float = 1e-6) -> float:
    """Worst relative error of analytic vs central-difference gradients.

    `f(point) -> (value, gradient)`; the denominator of the relative error
    is max(|analytic|, |numeric|, 1e-8) per coordinate.
    """
    point = np.asarray(point, dtype=np.float64)
    value, analytic = f(point)
    analytic = np.asarray(analytic, dtype=np.float64)
    if not (np.isfinite(value) and np.isfinite(analytic).all()):
        raise NumericError("non-finite evaluation at the expansion point")
    worst = 0.0
    for i in range(point.size):
        shifted = point.copy()
        shifted[i] += step
        up, _ = f(shifted)
        shifted[i] -= 2.0 * step
        down, _ = f(shifted)
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NumericError(f"non-finite evaluation at coordinate {i}")
        numeric = (up - down) / (2.0 * step)
        denom = max(abs(analytic[i]), abs(numeric), 1e-8)
        worst = max(worst, abs(analytic[i] - numeric) / denom)
    return worst


def flatten_params(spec: MLPSpec, params: ModelParams) -> np.ndarray:
    parts = []
    for w, b in zip(params.weights, params.biases):
        parts.append(w.ravel())
        if b is not None:
            parts.append(b)
    if spec.normalizer is not None and spec.normalizer.affine:
        for state in params.norm_states:
            parts.append(state.gamma)
            parts.append(state.beta)
    return np.concatenate(parts)


def unflatten_params(spec: MLPSpec, vec: np.ndarray) -> ModelParams:
    params = init_params(spec)
    pos = 0

    def take(shape):
        nonlocal pos
        size = int(np.prod(shape))
        out = vec[pos : pos + size].reshape(shape)
        pos += size
        return out.copy()

    for i, (fan_in, fan_out) in enumerate(zip(spec.widths[:-1], spec.widths[1:])):
        params.weights[i] = take((fan_out, fan_in))
        if params.biases[i] is not None:
            params.biases[i] = take((fan_out,))
    if spec.normalizer is not None and spec.normalizer.affine:
        for state in params.norm_states:
            d = state.gamma.shape[0]
            state.gamma = take((d,))
            state.beta = take((d,))
    if pos != vec.size:
        raise InputError("parameter vector size does not match the spec")
    return params


def loss_function(spec: MLPSpec, x: np.ndarray, labels: np.ndarray):
    """(value, gradient) closure over the flattened parameters, for grad_check."""

    def f(vec):
        params = unflatten_params(spec, vec)
        loss, cache = forward_loss(spec, params, x, labels, mode="train", update_stats=False)
        grads = backward(spec, params, cache)
        parts = []
        for dw, db in zip(grads.weights, grads.biases):
            parts.append(dw.ravel())
            if db is not None:
                parts.append(db)
        if spec.normalizer is not None and spec.normalizer.affine:
            for dg, dbeta in zip(grads.gammas, grads.betas):
                parts.append(dg)
                parts.append(dbeta)
        return loss, np.concatenate(parts)

    return f


def run_experiment(
    spec: MLPSpec,
    cfg: TrainConfig,
    train_ds: datamod.Dataset,
    test_ds: datamod.Dataset | None = None,
) -> TrainRun:
    """SGD training loop with per-iteration records and periodic test error.

    Divergence (non-finite or loss above 1e6) terminates the run early with
    the `diverged` flag set; curves keep the iterations actually executed.
    """
    if train_ds.labels is None:
        raise InputError("training data requires labels")
    params = init_params(spec)
    run = TrainRun(
        learning_rate=cfg.learning_rate, batch_size=cfg.batch_size, iterations=cfg.iterations
    )
    batches = (
        None
        if cfg.batch_size == 0
        else datamod.batch_iter(train_ds, cfg.batch_size, datamod.derive_seed(spec.seed, 21))
    )
    for it in range(cfg.iterations):
        if batches is None:
            xb, yb = train_ds.x, train_ds.labels
        else:
            xb, yb = next(batches)
        try:
            loss, cache = forward_loss(spec, params, xb, yb, mode="train")
        except NumericError:
            run.diverged = True
            break
        if not math.isfinite(loss) or loss > DIVERGENCE_LIMIT:
            run.diverged = True
            break
        run.train_loss.append(loss)
        run.train_err.append(error_rate(cache.logits, yb))
        if test_ds is not None and (it % cfg.eval_every == 0 or it == cfg.iterations - 1):
            test_logits = infer_logits(spec, params, test_ds.x)
            run.test_err.append((it, error_rate(test_logits, test_ds.labels)))
        backward_step(spec, params, cache, cfg.learning_rate)
    run.params = params
    return run


def infer_logits(spec: MLPSpec, params: ModelParams, x: np.ndarray) -> np.ndarray:
    """Network output in inference mode (frozen running statistics)."""
    a = np.asarray(x, dtype=np.float64)
    cfg = spec.normalizer
    for i in range(len(spec.widths) - 2):
        z = params.weights[i] @ a
        if params.biases[i] is not None:
            z = z + params.biases[i][:, None]
        if cfg is not None:
            z = normlayers.infer(z, params.norm_states[i], cfg)
        a = np.maximum(z, 0.0)
    return params.weights[-1] @ a + params.biases[-1][:, None]


_BLAS_ENV = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def run_job(job: dict) -> TrainRun:
    """One experiment described entirely by plain values (process-portable).

    Keys: `widths`, `normalizer` (config dict or None), `seed`,
    `learning_rate`, `iterations`, `batch_size`, `eval_every`, `data`
    (a data descriptor for `data.load_split`).
    """
    train_ds, test_ds = datamod.load_split(job["data"])
    norm = job.get("normalizer")
    spec = MLPSpec(
        tuple(job["widths"]),
        None if norm is None else normlayers.NormConfig.from_dict(norm),
        int(job.get("seed", 0)),
    )
    cfg = TrainConfig(
        learning_rate=float(job["learning_rate"]),
        iterations=int(job["iterations"]),
        batch_size=int(job.get("batch_size", 0)),
        eval_every=int(job.get("eval_every", 10)),
    )
    return run_experiment(spec, cfg, train_ds, test_ds if job.get("use_test", False) else None)


def run_jobs(jobs, workers: int = 1) -> list:
    """Run independent experiments, optionally across worker processes.

    Grid points are independent (own state, own seeds), so any schedule
    produces the same per-job result for a fixed BLAS thread count. Workers
    are spawned with single-threaded BLAS: the training loop's many small
    matrix products run faster that way than under shared-pool threading.
    """
    jobs = list(jobs)
    if workers <= 1 or len(jobs) <= 1:
        return [run_job(j) for j in jobs]
    import concurrent.futures
    import multiprocessing

    saved = {k: os.environ.get(k) for k in _BLAS_ENV}
    os.environ.update({k: "1" for k in _BLAS_ENV})
    try:
        ctx = multiprocessing.get_context("spawn")
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as ex:
            return list(ex.map(run_job, jobs, chunksize=1))
    finally:
        for k, v in saved.items():
            if v is None:
                os.environ.pop(k, None)
            else:
                os.environ[k] = v


def lr_search(
    spec: MLPSpec,
    cfg: TrainConfig,
    learning_rates,
    train_ds: datamod.Dataset,
    test_ds: datamod.Dataset | None = None,
) -> tuple[float, dict]:
    """Train once per learning rate; the best is the lowest final train loss.

    Mirrors the protocol of reporting each method at its own best rate;
    single-rate comparisons would misrepresent the methods.
    """
    runs = {}
    for lr in learning_rates:
        runs[lr] = run_experiment(
            MLPSpec(spec.widths, spec.normalizer, spec.seed),
            TrainConfig(lr, cfg.iterations, cfg.batch_size, cfg.eval_every),
            train_ds,
            test_ds,
        )
    best = min(runs, key=lambda lr: runs[lr].final_train_loss)
    return best, runs


# ---------------------------------------------------------------------------
# model checkpoint (linear weights plus normalizer states)

CHECKPOINT_VERSION = 1


def to_checkpoint(spec: MLPSpec, params: ModelParams) -> dict:
    doc = {
        "version": CHECKPOINT_VERSION,
        "config": {
            "widths": list(spec.widths),
            "normalizer": None if spec.normalizer is None else spec.normalizer.to_dict(),
            "seed": spec.seed,
        },
        "linear": [
            {"weight": w.tolist(), "bias": None if b is None else b.tolist()}
            for w, b in zip(params.weights, params.biases)
        ],
    }
    if spec.normalizer is not None:
        doc["normalization"] = normlayers.norm_states_to_doc(spec.normalizer, params.norm_states)
    return doc


def from_checkpoint(doc: dict) -> tuple[MLPSpec, ModelParams]:
    if not isinstance(doc, dict) or doc.get("version") != CHECKPOINT_VERSION:
        raise InputError("unsupported checkpoint document")
    config = doc.get("config", {})
    try:
        widths = tuple(int(w) for w in config["widths"])
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError("checkpoint config is missing layer widths") from exc
    norm_cfg = config.get("normalizer")
    spec = MLPSpec(
        widths,
        None if norm_cfg is None else normlayers.NormConfig.from_dict(norm_cfg),
        int(config.get("seed", 0)),
    )
    params = init_params(spec)
    linear = doc.get("linear", [])
    if len(linear) != len(params.weights):
        raise InputError("checkpoint linear-layer count does not match the widths")
    for i, entry in enumerate(linear):
        w = np.asarray(entry["weight"], dtype=np.float64)
        if w.shape != params.weights[i].shape:
            raise InputError(f"linear layer {i}: shape mismatch in checkpoint")
        if not np.isfinite(w).all():
            raise InputError(f"linear layer {i}: non-finite checkpoint values")
        params.weights[i] = w
        if entry.get("bias") is None:
            params.biases[i] = None
        else:
            b = np.asarray(entry["bias"], dtype=np.float64)
            if params.biases[i] is None or b.shape != params.biases[i].shape:
                raise InputError(f"linear layer {i}: bias shape mismatch in checkpoint")
            if not np.isfinite(b).all():
                raise InputError(f"linear layer {i}: non-finite checkpoint values")
            params.biases[i] = b
    if spec.normalizer is not None:
        _, states = normlayers.norm_states_from_doc(doc.get("normalization", {}))
        if len(states) != len(params.norm_states):
            raise InputError("checkpoint normalizer-state count does not match the widths")
        for state, width in zip(states, spec.hidden):
            if state.running_mean.shape[0] != width:
                raise InputError("checkpoint normalizer state width mismatch")
        params.norm_states = states
    return spec, params


def save_checkpoint(path, spec: MLPSpec, params: ModelParams):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(to_checkpoint(spec, params), fh)


def load_checkpoint(path) -> tuple[MLPSpec, ModelParams]:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read checkpoint: {exc}") from exc
    return from_checkpoint(doc)


def write_run_csv(path, run: TrainRun, echo: dict | None = None):
    """Training curves as CSV: iteration, train_loss, train_err, test_err."""
    test_by_iter = dict(run.test_err)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if echo is not None:
            fh.write("# " + json.dumps(echo, sort_keys=True) + "\n")
        writer = csv.writer(fh)
        writer.writerow(["iteration", "train_loss", "train_err", "test_err"])
        for it, (loss, err) in enumerate(zip(run.train_loss, run.train_err)):
            test = test_by_iter.get(it, "")
            writer.writerow([it, repr(loss), repr(err), "" if test == "" else repr(test)])

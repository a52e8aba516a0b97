"""Single-hidden-layer sigmoid perceptron for binary targets.

Training minimizes mean squared error: full-batch gradient descent first,
then Polak-Ribiere+ nonlinear conjugate gradient with Armijo backtracking.

Flat parameter order: W1 (H x D, row-major), b1 (H), W2 (H), b2 (1).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.special import expit

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
# Keeps the output strictly inside (0, 1) where float64 expit saturates.
_OUT_LO = np.finfo(float).tiny
_OUT_HI = 1.0 - 2.0 ** -53


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class MlpModel:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: float

    @property
    def input_dim(self) -> int:
        return self.w1.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.w1.shape[0]

    @property
    def n_params(self) -> int:
        return self.hidden_dim * (self.input_dim + 2) + 1

    def flat(self) -> np.ndarray:
        return np.concatenate([self.w1.ravel(), self.b1, self.w2, [self.b2]])

    def with_flat(self, theta) -> "MlpModel":
        return from_flat(theta, self.input_dim, self.hidden_dim)

    def mirrored(self) -> "MlpModel":
        """Model whose output is ``1 - output`` of this one."""
        return MlpModel(self.w1.copy(), self.b1.copy(), -self.w2, -self.b2)


def from_flat(theta, d: int, h: int) -> MlpModel:
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (h * (d + 2) + 1,):
        raise ValueError(f"expected {h * (d + 2) + 1} parameters, got {theta.shape}")
    w1 = theta[: h * d].reshape(h, d).copy()
    b1 = theta[h * d : h * d + h].copy()
    w2 = theta[h * d + h : h * d + 2 * h].copy()
    return MlpModel(w1, b1, w2, float(theta[-1]))


@dataclass(frozen=True)
class TrainSchedule:
    bp_epochs: int = 100
    bp_learning_rate: float = 0.01
    cg_epochs: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.bp_epochs < 0 or self.cg_epochs < 0:
            raise ValueError("epoch counts must be >= 0")
        if not self.bp_learning_rate > 0:
            raise ValueError("learning rate must be > 0")


@dataclass
class LossTrace:
    bp: list = field(default_factory=list)
    cg: list = field(default_factory=list)
    cg_stopped_at: Optional[int] = None

    @property
    def values(self) -> list:
        return self.bp + self.cg


def init_weights(d: int, h: int, seed) -> MlpModel:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases."""
    if d < 1 or h < 1:
        raise ValueError("dimensions must be >= 1")
    rng = np.random.default_rng(seed)
    w1 = rng.uniform(-1.0 / np.sqrt(d), 1.0 / np.sqrt(d), size=(h, d))
    w2 = rng.uniform(-1.0 / np.sqrt(h), 1.0 / np.sqrt(h), size=h)
    return MlpModel(w1, np.zeros(h), w2, 0.0)


def _forward(model: MlpModel, x: np.ndarray):
    hidden = expit(x @ model.w1.T + model.b1)
    out = np.clip(expit(hidden @ model.w2 + model.b2), _OUT_LO, _OUT_HI)
    return hidden, out


def forward(model: MlpModel, x) -> float:
    x = np.asarray(x, dtype=float)
    if x.shape != (model.input_dim,):
        raise ValueError(f"expected input of length {model.input_dim}, got shape {x.shape}")
    return float(_forward(model, x[None, :])[1][0])


def predict_proba(model: MlpModel, x) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[1] != model.input_dim:
        raise ValueError(f"expected {model.input_dim} input columns, got {x.shape[1]}")
    return _forward(model, x)[1]


def predict_binary(model: MlpModel, x, threshold: float = 0.5):
    """1 where the output is >= threshold. Accepts one row or a matrix."""
    x = np.asarray(x, dtype=float)
    out = (predict_proba(model, x) >= threshold).astype(int)
    return int(out[0]) if x.ndim == 1 else out


def _check(x, y):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.asarray(y, dtype=float)
    if len(y) == 0:
        raise ValueError("empty dataset")
    if len(x) != len(y):
        raise ValueError("features and targets differ in length")
    return x, y


def mse(model: MlpModel, x, y) -> float:
    x, y = _check(x, y)
    err = predict_proba(model, x) - y
    return float(np.mean(err * err))


def _loss_and_grad(theta, x, y, d, h):
    m = from_flat(theta, d, h)
    hidden, out = _forward(m, x)
    err = out - y
    loss = float(np.mean(err * err))
    d_out = (2.0 / len(y)) * err * out * (1.0 - out)
    g_w2 = hidden.T @ d_out
    g_b2 = d_out.sum()
    d_hidden = np.outer(d_out, m.w2) * hidden * (1.0 - hidden)
    g_w1 = d_hidden.T @ x
    g_b1 = d_hidden.sum(axis=0)
    return loss, np.concatenate([g_w1.ravel(), g_b1, g_w2, [g_b2]])


def gradient(model: MlpModel, x, y) -> np.ndarray:
    """Analytic gradient of the MSE in the flat parameter order."""
    x, y = _check(x, y)
    return _loss_and_grad(model.flat(), x, y, model.input_dim, model.hidden_dim)[1]


def train_bp(model: MlpModel, x, y, schedule: TrainSchedule):
    x, y = _check(x, y)
    theta = model.flat()
    d, h = model.input_dim, model.hidden_dim
    trace = []
    _, g = _loss_and_grad(theta, x, y, d, h)
    for epoch in range(schedule.bp_epochs):
        theta = theta - schedule.bp_learning_rate * g
        loss, g = _loss_and_grad(theta, x, y, d, h)
        if not np.isfinite(loss) or not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite loss at backpropagation epoch {epoch + 1}")
        trace.append(loss)
    return from_flat(theta, d, h), trace


@dataclass
class CGResult:
    x: np.ndarray
    trace: list
    stopped_at: Optional[int] = None

    @property
    def converged(self) -> bool:
        return self.stopped_at is not None


def minimize_cg(fun_grad: Callable, x0, iterations: int, *, restart_every: Optional[int] = None,
                c1: float = 1e-4, max_halvings: int = 40, max_failures: int = 10) -> CGResult:
    """Polak-Ribiere+ nonlinear conjugate gradient.

    ``fun_grad(x)`` returns ``(f, grad)``. Each iteration does one line
    search: a trial step is refined by quadratic interpolation along the
    direction, then halved until the Armijo condition holds. A failed search
    takes no step and restarts from steepest descent; ``max_failures`` failures
    in a row stop the run. ``trace`` holds f after each iteration.
    """
    x = np.asarray(x0, dtype=float).copy()
    restart_every = restart_every or len(x)
    f, g = fun_grad(x)
    d = -g
    step = 1.0 / max(np.linalg.norm(g), 1e-12)
    trace = []
    failures = 0
    since_restart = 0
    for it in range(iterations):
        slope = float(g @ d)
        if not slope < 0:
            d = -g
            slope = float(g @ d)
        accepted = None
        if slope < 0:
            alpha = _initial_step(fun_grad, x, d, f, slope, step)
            for _ in range(max_halvings + 1):
                f_new, g_new = fun_grad(x + alpha * d)
                if np.isfinite(f_new) and f_new <= f + c1 * alpha * slope:
                    accepted = alpha
                    break
                alpha *= 0.5
        if accepted is None:
            failures += 1
            trace.append(f)
            d = -g
            since_restart = 0
            if failures >= max_failures:
                return CGResult(x, trace, stopped_at=it + 1)
            continue
        failures = 0
        x = x + accepted * d
        step = accepted
        beta = float(g_new @ (g_new - g)) / max(float(g @ g), 1e-300)
        f, g = f_new, g_new
        trace.append(f)
        since_restart += 1
        if beta <= 0 or since_restart >= restart_every:
            d = -g
            since_restart = 0
        else:
            d = -g + beta * d
    return CGResult(x, trace)


def _initial_step(fun_grad, x, d, f0, slope, trial):
    """Minimizer of the parabola through f(0), f'(0) and f(trial)."""
    f_t, _ = fun_grad(x + trial * d)
    curvature = f_t - f0 - slope * trial
    if np.isfinite(f_t) and curvature > 0:
        return -slope * trial * trial / (2.0 * curvature)
    return trial


def train_cg(model: MlpModel, x, y, schedule: TrainSchedule):
    """One CG iteration per epoch; the trace is padded if the run stalls."""
    x, y = _check(x, y)
    d, h = model.input_dim, model.hidden_dim
    if schedule.cg_epochs == 0:
        return model, [], None
    result = minimize_cg(lambda t: _loss_and_grad(t, x, y, d, h), model.flat(),
                         schedule.cg_epochs, restart_every=model.n_params)
    trace = list(result.trace)
    if result.stopped_at is not None:
        log.debug("conjugate gradient stalled after %d iterations", result.stopped_at)
        trace += [trace[-1]] * (schedule.cg_epochs - len(trace))
    return from_flat(result.x, d, h), trace, result.stopped_at


def train(x, y, hidden: int, schedule: TrainSchedule, model: Optional[MlpModel] = None):
    """Initialize (unless ``model`` is given), then run both phases."""
    x, y = _check(x, y)
    if model is None:
        model = init_weights(x.shape[1], hidden, schedule.seed)
    model, bp_trace = train_bp(model, x, y, schedule)
    model, cg_trace, stopped = train_cg(model, x, y, schedule)
    return model, LossTrace(bp_trace, cg_trace, stopped)


def dumps(model: MlpModel) -> str:
    lines = [
        f"crashforest-mlp {FORMAT_VERSION}",
        f"input_dim {model.input_dim}",
        f"hidden_dim {model.hidden_dim}",
        "order w1_row_major b1 w2 b2",
        f"params {model.n_params}",
    ]
    lines.extend("%.17g" % v for v in model.flat())
    return "\n".join(lines) + "\n"


def loads(text: str) -> MlpModel:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    magic = lines[0].split()
    if magic[:1] != ["crashforest-mlp"] or int(magic[1]) != FORMAT_VERSION:
        raise ValueError("not a crashforest mlp dump")
    meta = dict(ln.split(" ", 1) for ln in lines[1:5])
    d, h, n = int(meta["input_dim"]), int(meta["hidden_dim"]), int(meta["params"])
    values = [float(v) for v in lines[5:]]
    if len(values) != n:
        raise ValueError(f"expected {n} parameters, found {len(values)}")
    return from_flat(values, d, h)

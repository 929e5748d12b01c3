"""Loss, Adam updates, gradient clipping, and finite-difference verification."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericError
from .nncore import (
    Gradients,
    NetworkConfig,
    NetworkParams,
    init_params,
    network_backward,
    network_forward,
    zeros_like_params,
)


@dataclass(frozen=True)
class Hyperparams:
    """Training knobs.

    ``max_train_windows`` bounds the training subset drawn (seeded, without
    replacement) from all sliding windows; ``eval_window_cap`` bounds
    validation/test evaluation to an evenly strided subset.  Both exist so
    a full run stays desk-scale; ``None`` means no cap.
    """

    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 256
    max_epochs: int = 50
    patience: int = 5
    seed: int = 0
    grad_clip_norm: float | None = 1.0
    max_train_windows: int | None = 32768
    eval_window_cap: int | None = 24576

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("beta1 and beta2 must be in [0, 1)")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("batch_size and max_epochs must be >= 1")


@dataclass
class AdamState:
    """First/second moment tensors mirroring the parameter layout."""

    m: Gradients
    v: Gradients
    step: int = 0


def init_adam_state(params: NetworkParams) -> AdamState:
    return AdamState(m=zeros_like_params(params), v=zeros_like_params(params))


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error over one output vector and its gradient.

    loss = mean((pred - target)^2), d_pred = 2/len * (pred - target).
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape or pred.ndim != 1:
        raise ConfigError(f"pred/target shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred - target
    loss = float(np.mean(diff * diff))
    return loss, (2.0 / pred.size) * diff


def mse_loss_batch(preds: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Batch mean of per-sample MSE losses; gradient scaled accordingly."""
    if preds.shape != targets.shape:
        raise ConfigError(f"preds/targets shape mismatch: {preds.shape} vs {targets.shape}")
    diff = preds - targets
    loss = float(np.mean(diff * diff))
    return loss, (2.0 / diff.size) * diff


def adam_step(
    params: NetworkParams,
    grads: Gradients,
    state: AdamState,
    hp: Hyperparams,
) -> tuple[NetworkParams, AdamState]:
    """One bias-corrected Adam update; inputs are left untouched."""
    new_params = params.copy()
    new_m = zeros_like_params(params)
    new_v = zeros_like_params(params)
    t = state.step + 1
    bc1 = 1.0 - hp.beta1 ** t
    bc2 = 1.0 - hp.beta2 ** t

    param_it = new_params.named_arrays()
    m_it = zip(state.m.named_arrays(), new_m.named_arrays())
    v_it = zip(state.v.named_arrays(), new_v.named_arrays())
    for (name, g), (pname, p) in zip(grads.named_arrays(), param_it):
        if g.shape != p.shape:
            raise ConfigError(f"gradient {name} has shape {g.shape}, params expect {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in tensor {name}")
        (_, m_old), (_, m_new) = next(m_it)
        (_, v_old), (_, v_new) = next(v_it)
        m_new[...] = hp.beta1 * m_old + (1.0 - hp.beta1) * g
        v_new[...] = hp.beta2 * v_old + (1.0 - hp.beta2) * (g * g)
        m_hat = m_new / bc1
        v_hat = v_new / bc2
        p -= hp.learning_rate * m_hat / (np.sqrt(v_hat) + hp.adam_eps)
    return new_params, AdamState(m=new_m, v=new_v, step=t)


def clip_global_norm(grads: Gradients, max_norm: float) -> tuple[Gradients, float]:
    """Scale all gradients so their joint L2 norm is at most ``max_norm``."""
    sq = 0.0
    for _, g in grads.named_arrays():
        sq += float(np.sum(g * g))
    norm = float(np.sqrt(sq))
    if norm <= max_norm or norm == 0.0:
        return grads, norm
    scale = max_norm / norm
    clipped = zeros_like_params(grads)
    for (_, dst), (_, src) in zip(clipped.named_arrays(), grads.named_arrays()):
        dst[...] = src * scale
    return clipped, norm


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_tensor: str
    tol: float
    n_params: int
    per_tensor: dict[str, float]

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


def make_check_problem(
    config: NetworkConfig, seed: int, residual_scale: float = 1e-4
) -> tuple[np.ndarray, np.ndarray]:
    """A well-conditioned (window, target) pair for finite-difference checks.

    The target sits a small random residual away from the seeded network's
    own prediction.  Central differences divide loss values by 2*fd_eps, so
    the float64 rounding of the loss must stay far below the relative-error
    guard; a small residual keeps the loss tiny while still driving a
    nonzero gradient through every parameter.  The 1e-4 scale was chosen
    empirically: larger residuals drown near-zero gradient entries in
    rounding noise, much smaller ones hit the prediction's own rounding.
    """
    rng = np.random.default_rng(seed)
    window = rng.normal(size=(config.t_steps, config.h_in))
    params = init_params(config, seed)
    pred, _ = network_forward(window, params)
    target = pred + residual_scale * rng.uniform(-1.0, 1.0, size=config.h_out)
    return window, target


def gradient_check(
    config: NetworkConfig,
    window: np.ndarray,
    target: np.ndarray,
    fd_eps: float = 1e-5,
    tol: float = 1e-4,
    seed: int = 0,
    params: NetworkParams | None = None,
    analytic: Gradients | None = None,
) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    Perturbs every parameter entry by +-fd_eps and differentiates the MSE
    loss numerically.  Relative error uses |a - b| / max(1e-12, |a| + |b|).
    ``params`` defaults to a seeded random initialisation; ``analytic``
    overrides the gradients under test (used for fault injection), by
    default they come from the network's own backward pass.
    """
    if params is None:
        params = init_params(config, seed)
    window = np.asarray(window, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)

    pred, tape = network_forward(window, params)
    _, d_pred = mse_loss(pred, target)
    if analytic is None:
        analytic = network_backward(tape, window, d_pred, params)

    def loss_at(p: NetworkParams) -> float:
        out, _ = network_forward(window, p)
        return mse_loss(out, target)[0]

    worst = 0.0
    worst_tensor = ""
    per_tensor: dict[str, float] = {}
    n_params = 0
    work = params.copy()
    work_arrays = dict(work.named_arrays())
    for name, g in analytic.named_arrays():
        a = work_arrays[name]
        flat_a = a.reshape(-1)
        flat_g = g.reshape(-1)
        tensor_worst = 0.0
        for k in range(flat_a.size):
            orig = flat_a[k]
            flat_a[k] = orig + fd_eps
            up = loss_at(work)
            flat_a[k] = orig - fd_eps
            down = loss_at(work)
            flat_a[k] = orig
            numeric = (up - down) / (2.0 * fd_eps)
            rel = abs(flat_g[k] - numeric) / max(1e-12, abs(flat_g[k]) + abs(numeric))
            tensor_worst = max(tensor_worst, rel)
            n_params += 1
        per_tensor[name] = tensor_worst
        if tensor_worst > worst:
            worst = tensor_worst
            worst_tensor = name
    return GradCheckReport(
        max_rel_err=worst,
        worst_tensor=worst_tensor,
        tol=tol,
        n_params=n_params,
        per_tensor=per_tensor,
    )

"""Central finite-difference check of end-to-end parameter gradients."""

from dataclasses import dataclass
from typing import List

import numpy as np

from .model import ModelConfig, TransducerModel, init_model, loss_and_param_grads


@dataclass(frozen=True)
class GradCheckResult:
    case: int
    n_params: int
    max_rel_error: float
    max_abs_error: float
    multi: bool
    train_mode: bool


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def random_case(seed: int):
    """A small random model with features and one or two targets."""
    rng = np.random.default_rng([seed, 0xC4EC])
    V = int(rng.integers(2, 5))
    cfg = ModelConfig(
        vocab_size=V,
        feat_dim=int(rng.integers(2, 4)),
        enc_hidden=int(rng.integers(2, 5)),
        pred_hidden=int(rng.integers(2, 5)),
        embed_dim=int(rng.integers(2, 4)),
        joint_dim=int(rng.integers(2, 6)),
        dropout_rate=float(rng.choice([0.0, 0.3])),
        seed=int(rng.integers(2**31)),
    )
    model = init_model(cfg)
    # larger weights than the default init make the check less trivial
    model = TransducerModel(cfg, {k: v * 3.0 for k, v in model.params.items()})
    T = int(rng.integers(1, 6))
    x = rng.normal(size=(T, cfg.feat_dim))
    n_targets = int(rng.integers(1, 3))
    targets = [tuple(int(k) for k in rng.integers(1, V + 1, size=int(rng.integers(0, 4)))) for _ in range(n_targets)]
    target = targets[0] if n_targets == 1 else targets
    train_mode = bool(rng.integers(2))
    return model, x, target, train_mode, int(rng.integers(2**31))


def check_case(seed: int, eps: float = 1e-5) -> GradCheckResult:
    model, x, target, train_mode, dseed = random_case(seed)
    _, grads = loss_and_param_grads(model, x, target, train_mode, dseed)
    theta = model.flat()
    analytic = np.concatenate([grads[k].ravel() for k in model.params])
    numeric = np.empty_like(theta)
    for i in range(theta.size):
        step = np.zeros_like(theta)
        step[i] = eps
        up, _ = loss_and_param_grads(TransducerModel.from_flat(model.config, theta + step), x, target, train_mode, dseed)
        down, _ = loss_and_param_grads(TransducerModel.from_flat(model.config, theta - step), x, target, train_mode, dseed)
        numeric[i] = (up - down) / (2 * eps)
    rel = relative_error(analytic, numeric)
    return GradCheckResult(
        seed, theta.size, float(rel.max()), float(np.abs(analytic - numeric).max()),
        isinstance(target, list), train_mode,
    )


def run_gradcheck(n_cases: int = 20, seed: int = 0) -> List[GradCheckResult]:
    return [check_case(seed * 100003 + i) for i in range(n_cases)]

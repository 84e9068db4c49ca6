"""A small transducer network with hand-written backpropagation.

Topology: one recurrent encoder layer over the features, one recurrent
prediction layer over ``[<sos>, y_1, ..., y_L]`` with inverted dropout on its
output, and an additive tanh joint followed by log-softmax over ``V + 1``
symbols. Both recurrent layers use a minimal gated unit (a GRU-class cell
with one gate)::

    f  = sigmoid(Wf x + Uf h + bf)
    c  = tanh(Wc x + Uc (f * h) + bc)
    h' = (1 - f) * h + f * c

Embedding row 0 doubles as the start-of-sequence token (it is the blank
index, which never occurs inside a transcript).
"""

from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit, log_softmax

from .exceptions import ContractViolation, DivergenceError, ValidationError
from .loss import as_transcript, rnnt_loss_grad

SOS = 0


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 12
    feat_dim: int = 8
    enc_hidden: int = 32
    pred_hidden: int = 32
    embed_dim: int = 8
    joint_dim: int = 32
    dropout_rate: float = 0.1
    seed: int = 0

    def __post_init__(self):
        for name in ("vocab_size", "feat_dim", "enc_hidden", "pred_hidden", "embed_dim", "joint_dim"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ValidationError(f"{name} must be a positive integer, got {value!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValidationError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")

    def to_dict(self) -> dict:
        return asdict(self)

    def replace(self, **changes) -> "ModelConfig":
        return ModelConfig(**{**asdict(self), **changes})

    def param_shapes(self) -> Dict[str, Tuple[int, ...]]:
        """Ordered mapping of parameter group name to shape."""
        V1, d, H, P, E, J = (
            self.vocab_size + 1, self.feat_dim, self.enc_hidden,
            self.pred_hidden, self.embed_dim, self.joint_dim,
        )
        return {
            "enc.Wf": (H, d), "enc.Uf": (H, H), "enc.bf": (H,),
            "enc.Wc": (H, d), "enc.Uc": (H, H), "enc.bc": (H,),
            "pred.embed": (V1, E),
            "pred.Wf": (P, E), "pred.Uf": (P, P), "pred.bf": (P,),
            "pred.Wc": (P, E), "pred.Uc": (P, P), "pred.bc": (P,),
            "joint.enc": (J, H), "joint.pred": (J, P), "joint.b": (J,),
            "joint.out": (V1, J), "joint.out_b": (V1,),
        }

    def _init_scale(self, name: str) -> float:
        if name == "pred.embed":
            return 1.0
        if name.startswith("enc."):
            return 1.0 / np.sqrt(self.enc_hidden)
        if name.startswith("pred."):
            return 1.0 / np.sqrt(self.pred_hidden)
        if name in ("joint.enc", "joint.pred", "joint.b"):
            fan_in = self.enc_hidden if name == "joint.enc" else self.pred_hidden
            return 1.0 / np.sqrt(fan_in)
        return 1.0 / np.sqrt(self.joint_dim)


class TransducerModel:
    """Parameter container. ``params`` maps group name to a float64 array."""

    def __init__(self, config: ModelConfig, params: Dict[str, np.ndarray]):
        shapes = config.param_shapes()
        if list(params) != list(shapes):
            raise ContractViolation(f"parameter groups {list(params)} do not match config")
        for name, shape in shapes.items():
            if params[name].shape != shape:
                raise ContractViolation(f"{name} has shape {params[name].shape}, expected {shape}")
        self.config = config
        self.params = params

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy(self) -> "TransducerModel":
        return TransducerModel(self.config, {k: v.copy() for k, v in self.params.items()})

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params.values()])

    @classmethod
    def from_flat(cls, config: ModelConfig, flat: np.ndarray) -> "TransducerModel":
        shapes = config.param_shapes()
        need = sum(int(np.prod(s)) for s in shapes.values())
        if flat.size != need:
            raise ContractViolation(f"flat vector has {flat.size} values, config needs {need}")
        params = {}
        offset = 0
        for name, shape in shapes.items():
            size = int(np.prod(shape))
            params[name] = np.array(flat[offset:offset + size], dtype=np.float64).reshape(shape)
            offset += size
        return cls(config, params)

    def __eq__(self, other):
        if not isinstance(other, TransducerModel):
            return NotImplemented
        return self.config == other.config and all(
            np.array_equal(a, b) for a, b in zip(self.params.values(), other.params.values())
        )

    # -- pieces used by the decoder --------------------------------------
    def encode(self, features) -> np.ndarray:
        return _mgu_forward(self.params, "enc.", _check_features(self, features))[0]

    def predict_step(self, token: int, state: np.ndarray) -> np.ndarray:
        p = self.params
        x = p["pred.embed"][token]
        f = expit(p["pred.Wf"] @ x + p["pred.Uf"] @ state + p["pred.bf"])
        c = np.tanh(p["pred.Wc"] @ x + p["pred.Uc"] @ (f * state) + p["pred.bc"])
        return state + f * (c - state)

    def initial_pred_state(self) -> np.ndarray:
        return np.zeros(self.config.pred_hidden)

    def joint_logprobs(self, enc_frame: np.ndarray, pred_out: np.ndarray) -> np.ndarray:
        """Log-probabilities for one frame against a batch of prediction outputs."""
        p = self.params
        z = np.tanh(p["joint.enc"] @ enc_frame + pred_out @ p["joint.pred"].T + p["joint.b"])
        return log_softmax(z @ p["joint.out"].T + p["joint.out_b"], axis=-1)


def param_count(config: ModelConfig) -> int:
    """Closed-form parameter count."""
    V1, d, H, P, E, J = (
        config.vocab_size + 1, config.feat_dim, config.enc_hidden,
        config.pred_hidden, config.embed_dim, config.joint_dim,
    )
    encoder = 2 * (H * d + H * H + H)
    prediction = V1 * E + 2 * (P * E + P * P + P)
    joint = J * H + J * P + J + V1 * J + V1
    return encoder + prediction + joint


def init_model(config: ModelConfig) -> TransducerModel:
    """Uniform(-s, s) initialization, ``s`` set by each group's fan-in."""
    rng = np.random.default_rng(config.seed)
    params = {}
    for name, shape in config.param_shapes().items():
        scale = config._init_scale(name)
        params[name] = rng.uniform(-scale, scale, size=shape)
    return TransducerModel(config, params)


def _check_features(model, features) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ContractViolation(f"features must be (T >= 1, d), got shape {x.shape}")
    if x.shape[1] != model.config.feat_dim:
        raise ContractViolation(
            f"feature dim {x.shape[1]} does not match model feat_dim {model.config.feat_dim}"
        )
    return x


def _mgu_forward(p, prefix, xs):
    """Run the cell over rows of ``xs`` from a zero state.

    Returns ``(hidden, cache)`` where ``hidden[i]`` is the state after row i.
    """
    Wf, Uf, bf = p[prefix + "Wf"], p[prefix + "Uf"], p[prefix + "bf"]
    Wc, Uc, bc = p[prefix + "Wc"], p[prefix + "Uc"], p[prefix + "bc"]
    n, H = xs.shape[0], bf.shape[0]
    xf = xs @ Wf.T + bf
    xc = xs @ Wc.T + bc
    hs = np.empty((n + 1, H))
    hs[0] = 0.0
    fs = np.empty((n, H))
    cs = np.empty((n, H))
    for i in range(n):
        h = hs[i]
        f = expit(xf[i] + Uf @ h)
        c = np.tanh(xc[i] + Uc @ (f * h))
        fs[i] = f
        cs[i] = c
        hs[i + 1] = h + f * (c - h)
    return hs[1:], (xs, hs, fs, cs)


def _mgu_backward(p, prefix, cache, dout, grads):
    """Backprop ``dout`` (grad wrt every output state) through the cell.

    Accumulates weight gradients into ``grads`` and returns grad wrt inputs.
    """
    xs, hs, fs, cs = cache
    Uf, Uc = p[prefix + "Uf"], p[prefix + "Uc"]
    n, H = fs.shape
    dpre_f = np.empty((n, H))
    dpre_c = np.empty((n, H))
    dh_next = np.zeros(H)
    for i in range(n - 1, -1, -1):
        h, f, c = hs[i], fs[i], cs[i]
        dh_out = dout[i] + dh_next
        dc = dh_out * f * (1.0 - c * c)
        dfh = Uc.T @ dc
        df = (dh_out * (c - h) + dfh * h) * f * (1.0 - f)
        dpre_c[i] = dc
        dpre_f[i] = df
        dh_next = dh_out * (1.0 - f) + dfh * f + Uf.T @ df
    fh = fs * hs[:-1]
    grads[prefix + "Wf"] += dpre_f.T @ xs
    grads[prefix + "Uf"] += dpre_f.T @ hs[:-1]
    grads[prefix + "bf"] += dpre_f.sum(axis=0)
    grads[prefix + "Wc"] += dpre_c.T @ xs
    grads[prefix + "Uc"] += dpre_c.T @ fh
    grads[prefix + "bc"] += dpre_c.sum(axis=0)
    return dpre_f @ p[prefix + "Wf"] + dpre_c @ p[prefix + "Wc"]


def dropout_mask(rate: float, n_rows: int, width: int, seed: Optional[int]) -> Optional[np.ndarray]:
    """Inverted-dropout multiplier, or None when dropout is inactive.

    Rows are drawn in order, so every hypothesis of an utterance sees the
    same per-position mask regardless of its length.
    """
    if rate <= 0.0:
        return None
    rng = np.random.default_rng([0 if seed is None else int(seed), 0x5EED])
    keep = rng.random((n_rows, width)) >= rate
    return keep / (1.0 - rate)


def _prediction_forward(model, target, train_mode, dropout_seed):
    p = model.params
    tokens = np.concatenate(([SOS], target)).astype(np.int64)
    emb = p["pred.embed"][tokens]
    g, cache = _mgu_forward(p, "pred.", emb)
    mask = dropout_mask(model.config.dropout_rate, g.shape[0], g.shape[1], dropout_seed) if train_mode else None
    g_out = g if mask is None else g * mask
    return g_out, (tokens, cache, mask)


def _joint_forward(p, enc, g_out):
    pe = enc @ p["joint.enc"].T
    pp = g_out @ p["joint.pred"].T + p["joint.b"]
    z = np.tanh(pe[:, None, :] + pp[None, :, :])
    act = z @ p["joint.out"].T + p["joint.out_b"]
    return log_softmax(act, axis=-1), z


def forward_lattice(model, features, target, train_mode=False, dropout_seed=None) -> np.ndarray:
    """(T, L+1, V+1) log-softmax lattice for one (utterance, transcript) pair."""
    x = _check_features(model, features)
    target = as_transcript(target, vocab_size=model.config.vocab_size)
    enc, _ = _mgu_forward(model.params, "enc.", x)
    g_out, _ = _prediction_forward(model, target, train_mode, dropout_seed)
    return _joint_forward(model.params, enc, g_out)[0]


def zero_grads(model) -> Dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in model.params.items()}


def loss_and_param_grads(model, features, targets, train_mode=False, dropout_seed=None):
    """Loss and parameter gradients for one utterance.

    ``targets`` is either one transcript or a list of transcripts; with a list
    the loss is the unweighted sum over hypotheses and the encoder is shared.
    """
    x = _check_features(model, features)
    hyps = _as_hypothesis_list(targets, model.config.vocab_size)
    p = model.params
    grads = zero_grads(model)
    enc, enc_cache = _mgu_forward(p, "enc.", x)
    d_enc = np.zeros_like(enc)
    total = 0.0
    for target in hyps:
        g_out, (tokens, pred_cache, mask) = _prediction_forward(model, target, train_mode, dropout_seed)
        logits, z = _joint_forward(p, enc, g_out)
        if not np.all(np.isfinite(logits)):
            raise DivergenceError("non-finite joint output", {"frames": x.shape[0], "target": target.tolist()})
        loss, d_act = rnnt_loss_grad(logits, target)
        if not np.isfinite(loss):
            raise DivergenceError(
                "non-finite transducer loss",
                {"loss": loss, "frames": x.shape[0], "target": target.tolist()},
            )
        total += loss
        grads["joint.out"] += np.einsum("tuk,tuj->kj", d_act, z)
        grads["joint.out_b"] += d_act.sum(axis=(0, 1))
        dz = (d_act @ p["joint.out"]) * (1.0 - z * z)
        grads["joint.b"] += dz.sum(axis=(0, 1))
        d_pe = dz.sum(axis=1)
        d_pp = dz.sum(axis=0)
        grads["joint.enc"] += d_pe.T @ enc
        grads["joint.pred"] += d_pp.T @ g_out
        d_enc += d_pe @ p["joint.enc"]
        d_g = d_pp @ p["joint.pred"]
        if mask is not None:
            d_g = d_g * mask
        d_emb = _mgu_backward(p, "pred.", pred_cache, d_g, grads)
        np.add.at(grads["pred.embed"], tokens, d_emb)
    _mgu_backward(p, "enc.", enc_cache, d_enc, grads)
    return total, grads


def _as_hypothesis_list(targets, vocab_size) -> List[np.ndarray]:
    if is_multi_target(targets):
        hyps = [as_transcript(t, vocab_size) for t in getattr(targets, "transcripts", targets)]
        if not hyps:
            raise ContractViolation("empty hypothesis list")
        return hyps
    return [as_transcript(targets, vocab_size)]


def is_multi_target(targets) -> bool:
    """True for a list of transcripts, False for a single transcript."""
    if isinstance(targets, np.ndarray):
        return targets.dtype == object or targets.ndim > 1
    if hasattr(targets, "transcripts"):
        return True
    targets = list(targets) if not isinstance(targets, (list, tuple)) else targets
    return len(targets) > 0 and not np.isscalar(targets[0]) and not isinstance(targets[0], np.integer)


def sgd_step(model, grads, learning_rate) -> TransducerModel:
    """Plain SGD: ``theta - lr * grad`` for every group. Returns a new model."""
    if not learning_rate >= 0.0:
        raise ValidationError(f"learning rate must be non-negative, got {learning_rate}")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient in {name}", {"group": name})
    params = {name: value - learning_rate * grads[name] for name, value in model.params.items()}
    return TransducerModel(model.config, params)


def add_grads(a: Dict[str, np.ndarray], b: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
    return {k: a[k] + b[k] for k in a}


def scale_grads(grads: Dict[str, np.ndarray], factor: float) -> Dict[str, np.ndarray]:
    return {k: v * factor for k, v in grads.items()}



"""scikit-learn style wrapper around the toy transducer.

``X`` is a list of (T_i, d) feature arrays. ``y`` holds one target per
utterance: either a label sequence, or a list of label sequences (several
pseudo-label hypotheses), in which case that utterance is trained with the
summed multi-hypothesis loss.
"""

from typing import List, Optional

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .decode import beam_decode
from .model import ModelConfig, TransducerModel, init_model
from .scoring import score_set
from .training import mean_loss, train
from .validation import check_sequences, check_targets


class TransducerASR(BaseEstimator):
    """Transducer speech recognizer trained with plain minibatch SGD.

    Parameters mirror :class:`~mhrnnt.model.ModelConfig` plus the training
    schedule. ``random_state`` seeds both initialization and data order.
    With ``warm_start=True`` a second :meth:`fit` continues from the current
    parameters, which is how fine-tuning is expressed.
    """

    def __init__(
        self,
        vocab_size=12,
        feat_dim=8,
        enc_hidden=32,
        pred_hidden=32,
        embed_dim=8,
        joint_dim=32,
        dropout_rate=0.1,
        learning_rate=0.3,
        n_epochs=15,
        batch_size=4,
        clip_norm=5.0,
        beam_size=4,
        random_state=0,
        warm_start=False,
        producer_id="model",
    ):
        self.vocab_size = vocab_size
        self.feat_dim = feat_dim
        self.enc_hidden = enc_hidden
        self.pred_hidden = pred_hidden
        self.embed_dim = embed_dim
        self.joint_dim = joint_dim
        self.dropout_rate = dropout_rate
        self.learning_rate = learning_rate
        self.n_epochs = n_epochs
        self.batch_size = batch_size
        self.clip_norm = clip_norm
        self.beam_size = beam_size
        self.random_state = random_state
        self.warm_start = warm_start
        self.producer_id = producer_id

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            vocab_size=self.vocab_size,
            feat_dim=self.feat_dim,
            enc_hidden=self.enc_hidden,
            pred_hidden=self.pred_hidden,
            embed_dim=self.embed_dim,
            joint_dim=self.joint_dim,
            dropout_rate=self.dropout_rate,
            seed=self.random_state,
        )

    @classmethod
    def from_model(cls, model: TransducerModel, **params) -> "TransducerASR":
        """Wrap an existing model; config fields become estimator params."""
        cfg = model.config.to_dict()
        cfg["random_state"] = cfg.pop("seed")
        est = cls(**{**cfg, **params})
        est.model_ = model
        est.n_features_in_ = model.config.feat_dim
        est.history_ = []
        return est

    def fit(self, X, y, X_dev=None, y_dev=None):
        X = check_sequences(X, self.feat_dim)
        y = check_targets(y, len(X), self.vocab_size)
        dev_X = dev_y = None
        if X_dev is not None and len(X_dev):
            dev_X = check_sequences(X_dev, self.feat_dim)
            dev_y = check_targets(y_dev, len(dev_X), self.vocab_size)
        if self.warm_start and hasattr(self, "model_"):
            model = self.model_
            if model.config.replace(seed=0, dropout_rate=0) != self.model_config().replace(seed=0, dropout_rate=0):
                raise ValueError("warm_start with changed network dimensions")
            model = TransducerModel(model.config.replace(dropout_rate=self.dropout_rate), model.params)
        else:
            model = init_model(self.model_config())
        result = train(
            model, X, y,
            epochs=self.n_epochs,
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            seed=self.random_state,
            dev_features=dev_X,
            dev_targets=dev_y,
            clip_norm=self.clip_norm,
        )
        self.model_ = result.model
        self.history_ = result.history
        self.best_epoch_ = result.best_epoch
        self.n_features_in_ = self.feat_dim
        return self

    def decode(self, X, beam_size: Optional[int] = None, n_best: int = 1):
        """Scored hypotheses: one list of ``n_best`` per utterance."""
        check_is_fitted(self, "model_")
        X = check_sequences(X, self.feat_dim)
        beam = beam_size or self.beam_size
        return [
            beam_decode(self.model_, x, beam_size=beam, n_best=n_best, producer_id=self.producer_id)
            for x in X
        ]

    def predict(self, X) -> List[tuple]:
        return [hyps[0].transcript for hyps in self.decode(X)]

    def loss(self, X, y) -> float:
        """Mean per-utterance transducer loss in eval mode."""
        check_is_fitted(self, "model_")
        X = check_sequences(X, self.feat_dim)
        return mean_loss(self.model_, X, check_targets(y, len(X), self.vocab_size))

    def wer(self, X, y) -> float:
        refs = {i: tuple(t) for i, t in enumerate(y)}
        hyps = dict(enumerate(self.predict(X)))
        return score_set(refs, hyps).wer

    def score(self, X, y) -> float:
        """Token accuracy, ``1 - WER / 100`` (can go negative)."""
        return 1.0 - self.wer(X, y) / 100.0

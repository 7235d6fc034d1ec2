"""scikit-learn compatible wrapper around pretraining and representation extraction.

``Data2Vec`` is an unsupervised transformer: ``fit`` pretrains on raw samples,
``transform`` returns mean-pooled final-block features.  It composes with
scikit-learn pipelines, e.g. ``make_pipeline(Data2Vec(...), LogisticRegression())``.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .config import RunConfig, preset
from .data import toy_vocab
from .errors import InputError
from .eval import extract_representation
from .train import fit, init_state


class Data2Vec(TransformerMixin, BaseEstimator):
    """Self-distillation pretraining as an estimator.

    Parameters
    ----------
    modality : {"vision", "speech", "text"}
        Selects the shipped preset used as the base configuration.
    config : RunConfig, path or None
        Overrides the preset entirely when given.
    overrides : dict or None
        ``{section: {key: value}}`` applied on top of the base configuration.
    total_steps : int or None
        Shortcut for ``overrides={"train": {"total_steps": ...}}``.
    vocab : sequence of str or None
        Text vocabulary (reserved tokens first); defaults to the toy vocabulary.
    seed : int
    """

    def __init__(self, modality="vision", config=None, overrides=None, total_steps=None, vocab=None, seed=0):
        self.modality = modality
        self.config = config
        self.overrides = overrides
        self.total_steps = total_steps
        self.vocab = vocab
        self.seed = seed

    def _run_config(self) -> RunConfig:
        if isinstance(self.config, RunConfig):
            rc = self.config
        elif self.config is not None:
            rc = RunConfig.load(self.config)
        else:
            rc = preset(self.modality)
        changes = {k: dict(v) for k, v in (self.overrides or {}).items()}
        if self.total_steps is not None:
            changes.setdefault("train", {})["total_steps"] = int(self.total_steps)
        return rc.replace(**changes) if changes else rc

    def _check_samples(self, X, rc: RunConfig) -> np.ndarray:
        X = np.asarray(X)
        if X.size == 0 or len(X) == 0:
            raise InputError("no samples given")
        expected = {"vision": 4, "speech": 2, "text": 2}[rc.modality]
        if X.ndim != expected:
            raise InputError(f"{rc.modality} input must have {expected} dimensions, got {X.ndim}")
        if rc.modality == "text":
            if X.dtype.kind not in "iu":
                raise InputError("text input must hold integer token ids")
            return X.astype(np.int64)
        X = X.astype(np.float64)
        if not np.all(np.isfinite(X)):
            raise InputError("input contains non-finite values")
        return X

    def fit(self, X, y=None):
        rc = self._run_config()
        X = self._check_samples(X, rc)
        vocab = None
        if rc.modality == "text":
            vocab = tuple(self.vocab) if self.vocab is not None else toy_vocab(rc["data"]["task"].get("n_types", 12))
        cfg = rc.train_config(vocab, self.seed)
        state, history = fit(cfg, X, init_state(cfg))
        self.config_ = rc
        self.spec_ = cfg.model
        self.state_ = state
        self.history_ = history
        self.fingerprint_ = rc.fingerprint()
        self.n_features_out_ = cfg.model.encoder.hidden
        return self

    def transform(self, X):
        check_is_fitted(self, "state_")
        X = self._check_samples(X, self.config_)
        return extract_representation(self.state_.params, self.spec_, X, self.config_["probe"]["batch"])

    @property
    def collapsed_(self) -> bool:
        check_is_fitted(self, "state_")
        return self.state_.collapse.fired_at is not None

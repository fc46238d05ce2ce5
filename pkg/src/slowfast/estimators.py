"""scikit-learn style wrappers around pre-training and scheduled fine-tuning.

>>> pre = MLMPretrainer(steps=500).fit(corpus)              # doctest: +SKIP
>>> clf = SlowFastClassifier(pre, method="slow_and_fast")     # doctest: +SKIP
>>> clf.fit(X, y).predict(X_other_language)                   # doctest: +SKIP

Inputs are sequences of token-id arrays that start with the CLS id; see
:mod:`slowfast.validation` for the exact checks.
"""

from __future__ import annotations

from collections import defaultdict

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import numcore as nc
from .bench import TAGS, DataSplit, TaskInstance, batch_arrays, span_f1
from .model import IGNORE, ModelConfig, ModelParams, build_model, encode, forward, load_params, mlm_eval, pretrain_mlm
from .runner.pipeline import METHODS, TrainSettings, finetune
from .schedule import PolicyConfig
from .validation import check_class_labels, check_languages, check_tag_labels, check_token_sequences


class MLMPretrainer(BaseEstimator, TransformerMixin):
    """Masked-LM pre-training; ``transform`` returns CLS states of ``layer``."""

    def __init__(self, num_layers=6, hidden=64, num_heads=4, ff_width=256, vocab_size=512, max_len=32,
                 steps=1000, batch_size=64, lr=1e-3, mask_rate=0.15, warmup_fraction=0.1, layer=-1,
                 random_state=0):
        self.num_layers = num_layers
        self.hidden = hidden
        self.num_heads = num_heads
        self.ff_width = ff_width
        self.vocab_size = vocab_size
        self.max_len = max_len
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.mask_rate = mask_rate
        self.warmup_fraction = warmup_fraction
        self.layer = layer
        self.random_state = random_state

    def _config(self):
        return ModelConfig(num_layers=self.num_layers, hidden=self.hidden, num_heads=self.num_heads,
                           ff_width=self.ff_width, vocab_size=self.vocab_size, max_len=self.max_len)

    def fit(self, X, y=None):
        cfg = self._config()
        seqs = check_token_sequences(X, cfg.vocab_size, cfg.max_len)
        self.model_ = pretrain_mlm(build_model(cfg, self.random_state), seqs, mask_rate=self.mask_rate,
                                   steps=self.steps, seed=self.random_state, batch_size=self.batch_size,
                                   lr=self.lr, warmup_fraction=self.warmup_fraction)
        self.n_features_out_ = cfg.hidden
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        cfg = self.model_.config
        seqs = check_token_sequences(X, cfg.vocab_size, cfg.max_len)
        return _cls_states(self.model_, seqs, self.layer)

    def score(self, X, y=None):
        """Negative masked-token loss under a fixed masking seed (higher is better)."""
        check_is_fitted(self, "model_")
        seqs = check_token_sequences(X, self.model_.config.vocab_size, self.model_.config.max_len)
        return -mlm_eval(self.model_, seqs, self.mask_rate, seed=self.random_state)[0]


def _cls_states(params, seqs, layer, batch_size=256):
    from .model import pad_batch
    out = []
    with nc.no_grad():
        for i in range(0, len(seqs), batch_size):
            _, hs = encode(params, pad_batch(seqs[i:i + batch_size]))
            out.append(hs[layer].data[:, 0])
    return np.concatenate(out, axis=0)


def _resolve_pretrained(pretrained) -> ModelParams:
    if isinstance(pretrained, ModelParams):
        return pretrained
    if isinstance(pretrained, MLMPretrainer):
        check_is_fitted(pretrained, "model_")
        return pretrained.model_
    if isinstance(pretrained, (str, bytes)) or hasattr(pretrained, "__fspath__"):
        return load_params(pretrained)
    raise TypeError("pretrained must be ModelParams, a fitted MLMPretrainer, or a checkpoint path; "
                    f"got {type(pretrained).__name__}")


class _SlowFastBase(BaseEstimator):
    _kind = None

    def __init__(self, pretrained=None, method="slow_and_fast", c1=0.01, c2=10.0, r_exp=3, tau=0.1,
                 window_size=20, policy4_mode="cka_gated", steps=500, batch_size=32, lr=5e-4,
                 warmup_fraction=0.1, eval_every=20, random_state=0):
        self.pretrained = pretrained
        self.method = method
        self.c1 = c1
        self.c2 = c2
        self.r_exp = r_exp
        self.tau = tau
        self.window_size = window_size
        self.policy4_mode = policy4_mode
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.warmup_fraction = warmup_fraction
        self.eval_every = eval_every
        self.random_state = random_state

    def _policy(self):
        return PolicyConfig(c1=self.c1, c2=self.c2, r_exp=self.r_exp, tau=self.tau,
                            window_size=self.window_size, policy4_mode=self.policy4_mode)

    def _settings(self, select_best):
        return TrainSettings(steps=self.steps, batch_size=self.batch_size, lr=self.lr,
                             warmup_fraction=self.warmup_fraction, eval_every=self.eval_every,
                             select_best=select_best)

    def _fit_instances(self, train, eval_set, n_labels):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        pre = _resolve_pretrained(self.pretrained)
        validation = {}
        if eval_set is not None:
            for inst in eval_set:
                validation.setdefault(inst.language, []).append(inst)
        languages = sorted(set(validation) | {0})
        split = DataSplit(self._kind, train, validation, dict(validation), {}, languages)
        result = finetune(pre, split, self.method, self._policy(), self._settings(bool(validation)),
                          seed=self.random_state, n_classes=n_labels)
        self.model_ = result.params
        self.losses_ = np.array(result.losses)
        self.trace_ = result.trace
        self.gap_history_ = result.gap_rows
        self.cka_history_ = result.cka_rows
        self.eval_metrics_ = result.final
        return self

    def _logits(self, seqs, batch_size=256):
        out = []
        with nc.no_grad():
            for i in range(0, len(seqs), batch_size):
                chunk = [TaskInstance(s, 0 if self._kind == "classification" else np.zeros(len(s), int), 0)
                         for s in seqs[i:i + batch_size]]
                ids, _ = batch_arrays(self._kind, chunk)
                logits, _ = forward(self.model_, ids, self._kind)
                out.append((ids, logits.data))
        return out

    def _check_X(self, X):
        check_is_fitted(self, "model_")
        cfg = self.model_.config
        return check_token_sequences(X, cfg.vocab_size, cfg.max_len)


class SlowFastClassifier(ClassifierMixin, _SlowFastBase):
    """Sequence classifier fine-tuned from a pre-trained encoder with a slow/fast schedule.

    ``eval_set`` -- optional ``(X, y, languages)`` held-out data; when it
    covers more than one language the fit tracks the source/non-source gap
    (``gap_history_``) and keeps the checkpoint with the best mean metric.
    """

    _kind = "classification"

    def fit(self, X, y, languages=None, eval_set=None):
        pre = _resolve_pretrained(self.pretrained)
        seqs = check_token_sequences(X, pre.config.vocab_size, pre.config.max_len)
        y = check_class_labels(y, len(seqs))
        lang = check_languages(languages, len(seqs))
        self.classes_, codes = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        train = [TaskInstance(s, int(c), int(g)) for s, c, g in zip(seqs, codes, lang)]
        held = None
        if eval_set is not None:
            Xe, ye, le = eval_set
            se = check_token_sequences(Xe, pre.config.vocab_size, pre.config.max_len)
            ye = check_class_labels(ye, len(se))
            unknown = set(np.unique(ye)) - set(self.classes_)
            if unknown:
                raise ValueError(f"eval_set has labels not seen in y: {sorted(unknown)}")
            ce = np.searchsorted(self.classes_, ye)
            held = [TaskInstance(s, int(c), int(g)) for s, c, g in zip(se, ce, check_languages(le, len(se)))]
        return self._fit_instances(train, held, len(self.classes_))

    def predict_proba(self, X):
        seqs = self._check_X(X)
        probs = []
        for _, z in self._logits(seqs):
            z = z - z.max(axis=1, keepdims=True)
            e = np.exp(z)
            probs.append(e / e.sum(axis=1, keepdims=True))
        return np.concatenate(probs, axis=0)

    def predict(self, X):
        return self.classes_[self.predict_proba(X).argmax(axis=1)]


class SlowFastTagger(_SlowFastBase):
    """Token tagger (BIO tags of :data:`slowfast.bench.TAGS`); ``score`` is span F1."""

    _kind = "tagging"

    def fit(self, X, y, languages=None, eval_set=None):
        pre = _resolve_pretrained(self.pretrained)
        seqs = check_token_sequences(X, pre.config.vocab_size, pre.config.max_len)
        tags = check_tag_labels(y, seqs, len(TAGS))
        lang = check_languages(languages, len(seqs))
        train = [TaskInstance(s, t, int(g)) for s, t, g in zip(seqs, tags, lang)]
        held = None
        if eval_set is not None:
            Xe, ye, le = eval_set
            se = check_token_sequences(Xe, pre.config.vocab_size, pre.config.max_len)
            te = check_tag_labels(ye, se, len(TAGS))
            held = [TaskInstance(s, t, int(g)) for s, t, g in zip(se, te, check_languages(le, len(se)))]
        self.tags_ = TAGS
        return self._fit_instances(train, held, len(TAGS))

    def predict(self, X):
        seqs = self._check_X(X)
        out = []
        start = 0
        for ids, z in self._logits(seqs):
            best = z.argmax(axis=1).reshape(ids.shape)
            for r in range(ids.shape[0]):
                out.append(best[r, :len(seqs[start + r])])
            start += ids.shape[0]
        return out

    def score(self, X, y):
        seqs = self._check_X(X)
        gold = check_tag_labels(y, seqs, len(TAGS))
        pred = self.predict(seqs)
        gold = [np.where(g[1:] == IGNORE, 0, g[1:]) for g in gold]
        return span_f1(gold, [p[1:] for p in pred])


def per_language_scores(estimator, X, y, languages) -> dict:
    """``estimator.score`` separately for every language id."""
    groups = defaultdict(list)
    for i, g in enumerate(np.asarray(languages)):
        groups[int(g)].append(i)
    return {g: estimator.score([X[i] for i in idx], [y[i] for i in idx]) for g, idx in sorted(groups.items())}

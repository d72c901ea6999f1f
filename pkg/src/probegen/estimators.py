"""scikit-learn style estimators over populations of frozen models.

``X`` is always a sequence of :class:`~probegen.models.ProbedModel`. The
probing estimators learn probes (directly, or through a shared generator)
jointly with an MLP head; the baselines use fixed synthetic probes or weight
statistics and train the head only.

>>> clf = ProbingClassifier(method="probegen", n_probes=64, epochs=30)
>>> clf.fit(train_models, train_labels).score(test_models, test_labels)  # doctest: +SKIP
"""

from __future__ import annotations

import logging

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted, column_or_1d

from .autodiff import Adam, Graph
from .exceptions import ConfigError, NonFiniteError, ShapeError
from .metrics import accuracy, kendall_tau
from .models import ProbedModel
from .predictors import (
    MLPHead, build_probe_features, can_stack, entropy_features, probe_representation_batch,
    stack_weights, statnn_features,
)
from .probes import (
    GeneratorConfig, ProbeGenerator, calibrate_output, dead_leaves_probes, init_latents, synthetic_uniform_coords,
)

log = logging.getLogger(__name__)

METHODS = ("probegen", "vanilla", "synthetic-uniform", "synthetic-dead-leaves", "statnn", "entropy-only")
FIXED_FEATURE_METHODS = ("synthetic-uniform", "synthetic-dead-leaves", "statnn")
PRECISIONS = {"float32": np.float32, "float64": np.float64}


def check_models(X):
    """Validate a population of probed models sharing input/output shapes."""
    if isinstance(X, ProbedModel):
        raise TypeError("expected a sequence of ProbedModel, got a single model")
    models = list(X)
    if not models:
        raise ValueError("need at least one model")
    for m in models:
        if not isinstance(m, ProbedModel):
            raise TypeError(f"expected ProbedModel instances, got {type(m).__name__}")
    first = models[0].spec
    for m in models[1:]:
        if m.spec.input_shape != first.input_shape or m.spec.output_shape != first.output_shape:
            raise ShapeError(
                f"{m.identifier}: input/output shapes {m.spec.input_shape}->{m.spec.output_shape} "
                f"differ from {first.input_shape}->{first.output_shape}"
            )
    return models


def default_generator_config(input_shape, kind=None, depth=None, latent_dim=32,
                             width_multiplier=16, hidden=32):
    """Coordinate inputs get a 2-layer FC generator, images a conv generator
    with one doubling stage per factor of two in the image size."""
    input_shape = tuple(input_shape)
    if len(input_shape) == 1:
        kind = kind or "fc-linear"
        depth = depth or 2
    else:
        kind = kind or "conv-linear"
        depth = depth or int(np.log2(input_shape[1]))
    return GeneratorConfig(kind=kind, depth=depth, output_shape=input_shape, latent_dim=latent_dim,
                           width_multiplier=width_multiplier, hidden=hidden)


class _ProbingBase(BaseEstimator):
    def __init__(self, method="probegen", n_probes=64, generator_kind=None, generator_depth=None,
                 latent_dim=32, width_multiplier=16, generator_hidden=32, head_depth=6,
                 head_hidden=256, learning_rate=3e-4, batch_size=32, epochs=30,
                 latent_scale=1.0, standardize=False, precision="float32", random_state=0, verbose=0):
        self.method = method
        self.n_probes = n_probes
        self.generator_kind = generator_kind
        self.generator_depth = generator_depth
        self.latent_dim = latent_dim
        self.width_multiplier = width_multiplier
        self.generator_hidden = generator_hidden
        self.head_depth = head_depth
        self.head_hidden = head_hidden
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.latent_scale = latent_scale
        self.standardize = standardize
        self.precision = precision
        self.random_state = random_state
        self.verbose = verbose

    # -- configuration ----------------------------------------------------
    def _check_params(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision must be one of {tuple(PRECISIONS)}")
        if self.method == "statnn":
            if self.n_probes:
                raise ConfigError("statnn uses no probes; set n_probes=0")
        elif self.n_probes < 1:
            raise ConfigError(f"method {self.method!r} needs n_probes >= 1")
        if self.method == "vanilla" and self.generator_kind not in (None, "identity"):
            raise ConfigError("vanilla probing learns the probes directly (identity generator)")
        if self.method in FIXED_FEATURE_METHODS and self.generator_kind is not None:
            raise ConfigError(f"method {self.method!r} has no trainable probes; drop generator_kind")
        if self.standardize and self.method not in FIXED_FEATURE_METHODS:
            raise ConfigError("standardize is only defined for fixed-feature methods")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")

    @property
    def _dtype(self):
        return PRECISIONS[self.precision]

    @property
    def _learns_probes(self):
        return self.method in ("probegen", "vanilla", "entropy-only")

    def _initialize(self, input_shape, output_shape, n_outputs):
        """Create latents, generator and head for the given model family."""
        self._check_params()
        seeds = np.random.SeedSequence(self.random_state).spawn(5)
        self.input_shape_ = tuple(input_shape)
        self.model_output_dim_ = int(np.prod(output_shape))
        self.generator_ = None
        self.latents_ = None
        self.fixed_probes_ = None
        k = self.n_probes
        if self._learns_probes:
            if self.method == "vanilla":
                cfg = GeneratorConfig("identity", output_shape=self.input_shape_)
            else:
                cfg = default_generator_config(self.input_shape_, self.generator_kind, self.generator_depth,
                                               self.latent_dim, self.width_multiplier, self.generator_hidden)
            self.generator_ = ProbeGenerator(cfg, np.random.default_rng(seeds[0]))
            rng = np.random.default_rng(seeds[1])
            # probes start spread over the input domain: coordinates in
            # [-1, 1], pixel intensities in [0, 1]
            lo = -1.0 if len(self.input_shape_) == 1 else 0.0
            if self.method == "vanilla":
                self.latents_ = rng.uniform(lo, 1.0, (k,) + self.input_shape_).reshape(k, -1).astype(np.float32)
            else:
                self.latents_ = init_latents(k, cfg, rng, self.latent_scale)
                calibrate_output(self.generator_, self.latents_, (lo + 1.0) / 2, (1.0 - lo) / np.sqrt(12.0))
        elif self.method == "synthetic-uniform":
            if self.input_shape_ != (2,):
                raise ConfigError("uniform coordinate probes need 2-D coordinate models")
            self.fixed_probes_ = synthetic_uniform_coords(k, np.random.default_rng(seeds[0])).probes
        elif self.method == "synthetic-dead-leaves":
            if len(self.input_shape_) != 3:
                raise ConfigError("dead leaves probes need image models")
            self.fixed_probes_ = dead_leaves_probes(k, self.input_shape_, seeds[0]).probes

        if self.method == "statnn":
            in_dim = None  # set from the first feature matrix
        elif self.method == "entropy-only":
            if self.model_output_dim_ < 2:
                raise ConfigError("entropy features need models with >= 2 outputs")
            in_dim = k
        else:
            in_dim = k * self.model_output_dim_
        self._head_seed = seeds[2]
        self._shuffle_seed = seeds[3]
        self.n_outputs_ = n_outputs
        self.head_ = None if in_dim is None else MLPHead(
            in_dim, n_outputs, self.head_depth, self.head_hidden, np.random.default_rng(seeds[2]))
        self.feature_mean_ = None
        self.feature_scale_ = None

    def _ensure_head(self, in_dim):
        if self.head_ is None:
            self.head_ = MLPHead(in_dim, self.n_outputs_, self.head_depth, self.head_hidden,
                                 np.random.default_rng(self._head_seed))

    def _trainable_params(self):
        params = dict(self.head_.params)
        if self._learns_probes:
            params["latents"] = self.latents_
            params.update(self.generator_.params)
        return params

    # -- features ---------------------------------------------------------
    def current_probes(self):
        """The probes the estimator currently feeds to models."""
        check_is_fitted(self, "head_")
        if self._learns_probes:
            return self.generator_(self.latents_, dtype=self._dtype)
        return self.fixed_probes_

    def _raw_fixed_features(self, models):
        if self.method == "statnn":
            return statnn_features(models).features
        return probe_representation_batch(models, self.fixed_probes_, self._dtype).features

    def transform(self, X):
        """Representation fed to the head (after optional standardization)."""
        check_is_fitted(self, "head_")
        models = check_models(X)
        if self.method in FIXED_FEATURE_METHODS:
            feats = self._raw_fixed_features(models)
            if self.feature_mean_ is not None:
                feats = (feats - self.feature_mean_) / self.feature_scale_
            return feats.astype(self._dtype)
        rep = probe_representation_batch(models, self.current_probes(), self._dtype)
        if self.method == "entropy-only":
            rep = entropy_features(rep)
        return rep.features.astype(self._dtype)

    def _build_batch(self, g, models, stacked, fixed):
        if fixed is not None:
            feats = g.constant(fixed)
        else:
            z = g.param(self.latents_, name="latents")
            probes = self.generator_.build(g, z)
            feats = build_probe_features(g, models, probes, stacked)
            if self.method == "entropy-only":
                feats = g.reshape(feats, (len(models), self.n_probes, self.model_output_dim_))
                feats = g.softmax_entropy(feats, name="entropy")
        return self.head_.build(g, feats)

    # -- training ---------------------------------------------------------
    def _loss(self, g, out, y):
        raise NotImplementedError

    def _encode_targets(self, y, fit):
        raise NotImplementedError

    def _metric(self, out, y):
        raise NotImplementedError

    def fit(self, X, y, eval_set=None):
        """Train probes, generator and head jointly (method permitting).

        ``eval_set`` is an optional (models, labels) pair scored after every
        epoch; it only feeds :attr:`history_`.
        """
        models = check_models(X)
        y = column_or_1d(np.asarray(y), warn=True)
        if len(y) != len(models):
            raise ValueError(f"{len(models)} models but {len(y)} labels")
        y_enc = self._encode_targets(y, fit=True)
        spec = models[0].spec
        self._initialize(spec.input_shape, spec.output_shape, self._n_outputs(y_enc))
        dtype = self._dtype

        fixed = None
        if self.method in FIXED_FEATURE_METHODS:
            fixed = self._raw_fixed_features(models)
            if self.standardize:
                self.feature_mean_ = fixed.mean(axis=0)
                self.feature_scale_ = np.where(fixed.std(axis=0) > 0, fixed.std(axis=0), 1.0)
                fixed = (fixed - self.feature_mean_) / self.feature_scale_
            fixed = fixed.astype(dtype)
            self._ensure_head(fixed.shape[1])
        stacked = stack_weights(models) if self._learns_probes and can_stack(models) else None

        val = None
        if eval_set is not None:
            val_models = check_models(eval_set[0])
            val = (val_models, self._encode_targets(column_or_1d(np.asarray(eval_set[1])), fit=False))

        params = self._trainable_params()
        opt = Adam(self.learning_rate)
        rng = np.random.default_rng(self._shuffle_seed)
        self.history_ = []
        n = len(models)
        for epoch in range(1, self.epochs + 1):
            order = rng.permutation(n)
            losses = []
            for b, start in enumerate(range(0, n, self.batch_size)):
                idx = np.sort(order[start:start + self.batch_size])
                batch = [models[i] for i in idx]
                g = Graph(dtype, frozen_grads=False)
                st = None if stacked is None else [(w[idx], bb[idx]) for w, bb in stacked]
                out = self._build_batch(g, batch, st, None if fixed is None else fixed[idx])
                loss = self._loss(g, out, y_enc[idx])
                try:
                    g.evaluate()
                    grads = g.named_grads(g.backward(loss))
                except NonFiniteError as exc:
                    raise NonFiniteError(f"epoch {epoch}, batch {b}: {exc}") from None
                peak = max(float(np.abs(v).max()) for v in grads.values())
                if not np.isfinite(peak):
                    raise NonFiniteError(f"epoch {epoch}, batch {b}: non-finite gradient (max |grad| {peak})")
                opt.step(params, grads)
                losses.append(float(loss.value))
            row = {"epoch": epoch, "train_loss": float(np.mean(losses))}
            if val is not None:
                out = self._decision(val[0])
                row["val_loss"] = self._loss_value(out, val[1])
                row["val_metric"] = self._metric(out, val[1])
            self.history_.append(row)
            if self.verbose:
                log.info("epoch %d %s", epoch, row)
        return self

    def _decision(self, models):
        feats = self.transform(models)
        g = Graph(self._dtype, frozen_grads=False)
        out = self.head_.build(g, g.constant(feats), trainable=False)
        return g.evaluate(outputs=[out])[out]

    def _loss_value(self, out, y):
        g = Graph(np.float64)
        loss = self._loss(g, g.constant(out), y)
        g.evaluate()
        return float(loss.value)

    def decision_function(self, X):
        check_is_fitted(self, "head_")
        return self._decision(check_models(X))

    # -- state ------------------------------------------------------------
    def get_state(self):
        """All learned arrays by name (for checkpoints)."""
        check_is_fitted(self, "head_")
        state = dict(self.head_.params)
        if self._learns_probes:
            state["latents"] = self.latents_
            state.update(self.generator_.params)
        if self.feature_mean_ is not None:
            state["feature_mean"] = np.asarray(self.feature_mean_, dtype=np.float32)
            state["feature_scale"] = np.asarray(self.feature_scale_, dtype=np.float32)
        return state

    def set_state(self, state, input_shape, output_shape, n_outputs, head_in_dim=None):
        """Restore from :meth:`get_state` output without refitting."""
        self._initialize(input_shape, output_shape, n_outputs)
        if self.head_ is None:
            self._ensure_head(head_in_dim if head_in_dim is not None else state["head.0.w"].shape[1])
        for name, arr in state.items():
            arr = np.array(arr, dtype=np.float32)
            if name == "latents":
                self.latents_ = arr
            elif name.startswith("head."):
                self.head_.params[name] = arr
            elif name.startswith("gen."):
                self.generator_.params[name] = arr
            elif name == "feature_mean":
                self.feature_mean_ = arr.astype(np.float64)
            elif name == "feature_scale":
                self.feature_scale_ = arr.astype(np.float64)
        self.history_ = []
        return self


class ProbingClassifier(ClassifierMixin, _ProbingBase):
    """Predict a class label (e.g. training-image class) of each model."""

    def _encode_targets(self, y, fit):
        if fit:
            self.classes_ = np.unique(y)
        idx = np.searchsorted(self.classes_, y)
        idx = np.clip(idx, 0, len(self.classes_) - 1)
        if not np.array_equal(self.classes_[idx], y):
            raise ValueError("labels contain classes unseen during fit")
        return idx

    def _n_outputs(self, y_enc):
        return len(self.classes_)

    def _loss(self, g, out, y):
        return g.softmax_cross_entropy(out, y, name="loss")

    def _metric(self, out, y):
        return accuracy(out.argmax(axis=1), y)

    def predict_proba(self, X):
        out = self.decision_function(X).astype(np.float64)
        z = np.exp(out - out.max(axis=1, keepdims=True))
        return z / z.sum(axis=1, keepdims=True)

    def predict(self, X):
        return self.classes_[self.decision_function(X).argmax(axis=1)]


class ProbingRegressor(RegressorMixin, _ProbingBase):
    """Predict a real attribute (e.g. test accuracy) of each model.

    :meth:`score` returns Kendall's tau-b rather than R^2.
    """

    def _encode_targets(self, y, fit):
        return np.asarray(y, dtype=np.float64)

    def _n_outputs(self, y_enc):
        return 1

    def _loss(self, g, out, y):
        return g.mse(out, np.asarray(y, dtype=g.dtype).reshape(-1, 1), name="loss")

    def _metric(self, out, y):
        return safe_kendall_tau(out.reshape(-1), y)

    def predict(self, X):
        return self.decision_function(X).reshape(-1)

    def score(self, X, y, sample_weight=None):
        return safe_kendall_tau(self.predict(X), y)


def safe_kendall_tau(pred, truth):
    """Kendall's tau-b, or 0.0 when either side carries no ranking (all tied)."""
    try:
        return kendall_tau(pred, truth)
    except ValueError:
        if len(np.asarray(pred)) < 2:
            raise
        return 0.0


class StatNNFeatures(TransformerMixin, BaseEstimator):
    """Per-layer weight/bias statistics as a stateless transformer."""

    def fit(self, X, y=None):
        models = check_models(X)
        self.n_features_out_ = statnn_features(models[:1]).features.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "n_features_out_")
        return statnn_features(check_models(X)).features


class ProbeResponses(TransformerMixin, BaseEstimator):
    """Responses of each model to a fixed probe set (optionally their entropies)."""

    def __init__(self, probes=None, entropy=False):
        self.probes = probes
        self.entropy = entropy

    def fit(self, X, y=None):
        models = check_models(X)
        if self.probes is None:
            raise ConfigError("ProbeResponses needs a probe array")
        if np.asarray(self.probes).shape[1:] != models[0].spec.input_shape:
            raise ShapeError("probe shape does not match the models' input shape")
        self.n_probes_ = len(self.probes)
        return self

    def transform(self, X):
        check_is_fitted(self, "n_probes_")
        rep = probe_representation_batch(check_models(X), self.probes)
        if self.entropy:
            rep = entropy_features(rep)
        return rep.features

"""Convolutional text+context classifier with explicit forward/backward passes.

Two encoders feed a shared classifier head. The textual encoder embeds hashed
word ids and runs three 1-D convolution blocks (filter counts grow 32/64/128),
each block being conv -> batch norm -> SELU, with dropout after blocks two and
three, finished by a global max pool. The contextual encoder embeds each
categorical field, runs the same block structure, then average-pools and
projects through a fully connected layer. Concatenated representations pass
through batch norm, dropout, a fully connected layer and softmax.

Embeddings are trained end to end from scratch (hashed word ids for text, one
table per categorical field for context); no pretrained vectors are involved.
All gradients are hand-derived and checked against central finite differences
by ``gradient_check``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .base import ModelOutput, TriageEstimator
from .features import stable_hash64
from .textprep import incident_token_stream

logger = logging.getLogger(__name__)

SELU_LAMBDA = 1.0507009873554804934193349852946
SELU_ALPHA = 1.6732632423543772848170429916717

#: Categorical incident fields consumed by the contextual encoder, in order.
CONTEXT_FIELDS = (
    "source_name",
    "originating_service_id",
    "occurring_device_name",
    "raising_dc",
    "severity",
    "incident_type",
    "keywords",
)

_UNK = "<unk>"
_BN_EPS = 1e-5


@dataclass
class CnnConfig:
    embed_dim: int = 64
    context_embed_dim: int = 16
    max_tokens: int = 256
    filter_counts: tuple = (32, 64, 128)
    filter_width: int = 3
    dropout_rate: float = 0.3
    context_fc_dim: int = 64
    text_hash_dim: int = 1 << 15
    epochs: int = 10
    batch_size: int = 32
    learning_rate: float = 0.05
    momentum: float = 0.9
    bn_momentum: float = 0.99
    bn_eps: float = 1e-5
    seed: int = 0
    dtype: str = "float32"
    classes: list = field(default_factory=list)

    def __post_init__(self):
        if not (len(self.filter_counts) == 3
                and self.filter_counts[0] < self.filter_counts[1] < self.filter_counts[2]):
            raise ValueError("filter_counts must be three strictly increasing ints")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0,1)")
        if self.filter_width % 2 != 1:
            raise ValueError("filter_width must be odd (same padding)")


# --------------------------------------------------------------------------
# layers


class _Layer:
    def params(self):
        return []

    def forward(self, x, training):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError


class _Embedding(_Layer):
    """Lookup table; id -1 is padding and maps to a frozen zero vector."""

    def __init__(self, vocab, dim, rng, dtype, name):
        # Unit-scale init keeps downstream batch-norm variances well away from
        # the eps floor, where the normalization becomes badly conditioned.
        self.W = rng.standard_normal((vocab, dim)).astype(dtype)
        self.dW = np.zeros_like(self.W)
        self.name = name

    def params(self):
        return [(self.name + ".W", self.W, self.dW)]

    def forward(self, ids, training):
        self._ids = ids
        out = self.W[np.maximum(ids, 0)]
        out[ids < 0] = 0.0
        return out

    def backward(self, dout):
        valid = self._ids >= 0
        np.add.at(self.dW, self._ids[valid], dout[valid])
        return None


class _Conv1d(_Layer):
    """Same-padded 1-D convolution over (B, L, Cin) -> (B, L, Cout)."""

    def __init__(self, cin, cout, width, rng, dtype, name):
        fan_in = width * cin
        self.W = (rng.standard_normal((fan_in, cout)) / np.sqrt(fan_in)).astype(dtype)
        self.b = np.zeros(cout, dtype=dtype)
        self.dW = np.zeros_like(self.W)
        self.db = np.zeros_like(self.b)
        self.width = width
        self.cin = cin
        self.name = name

    def params(self):
        return [(self.name + ".W", self.W, self.dW), (self.name + ".b", self.b, self.db)]

    def _windows(self, x):
        p = self.width // 2
        padded = np.pad(x, ((0, 0), (p, p), (0, 0)))
        win = np.lib.stride_tricks.sliding_window_view(padded, self.width, axis=1)
        # (B, L, Cin, width) -> (B, L, width*Cin) matching W's (width*Cin) layout
        return np.ascontiguousarray(win.transpose(0, 1, 3, 2)).reshape(
            x.shape[0], x.shape[1], self.width * self.cin
        )

    def forward(self, x, training):
        self._x_shape = x.shape
        self._cols = self._windows(x)
        return self._cols @ self.W + self.b

    def backward(self, dout):
        B, L, _ = self._x_shape
        cols2d = self._cols.reshape(B * L, -1)
        d2d = dout.reshape(B * L, -1)
        self.dW += cols2d.T @ d2d
        self.db += d2d.sum(axis=0)
        dcols = (d2d @ self.W.T).reshape(B, L, self.width, self.cin)
        dx = np.zeros(self._x_shape, dtype=dout.dtype)
        p = self.width // 2
        for k in range(self.width):
            lo, hi = max(0, k - p), min(L, L + k - p)
            dx[:, lo:hi] += dcols[:, lo - (k - p) : hi - (k - p), k]
        return dx


class _BatchNorm(_Layer):
    """Normalizes channels over all leading axes; frozen running stats at eval."""

    def __init__(self, channels, momentum, rng, dtype, name, eps=_BN_EPS):
        self.gamma = np.ones(channels, dtype=dtype)
        self.beta = np.zeros(channels, dtype=dtype)
        self.dgamma = np.zeros_like(self.gamma)
        self.dbeta = np.zeros_like(self.beta)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps
        self.update_stats = True
        self.name = name

    def params(self):
        return [(self.name + ".gamma", self.gamma, self.dgamma),
                (self.name + ".beta", self.beta, self.dbeta)]

    def forward(self, x, training):
        axes = tuple(range(x.ndim - 1))
        if training:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            if self.update_stats:
                m = self.momentum
                self.running_mean = m * self.running_mean + (1 - m) * mean
                self.running_var = m * self.running_var + (1 - m) * var
        else:
            mean, var = self.running_mean, self.running_var
        self._training = training
        self._inv_std = 1.0 / np.sqrt(var + self.eps)
        self._x_hat = (x - mean) * self._inv_std
        self._n = x.size // x.shape[-1]
        return self.gamma * self._x_hat + self.beta

    def backward(self, dout):
        axes = tuple(range(dout.ndim - 1))
        self.dgamma += (dout * self._x_hat).sum(axis=axes)
        self.dbeta += dout.sum(axis=axes)
        if not self._training:
            return dout * self.gamma * self._inv_std
        n = self._n
        dxhat = dout * self.gamma
        return (self._inv_std / n) * (
            n * dxhat - dxhat.sum(axis=axes) - self._x_hat * (dxhat * self._x_hat).sum(axis=axes)
        )


class _Selu(_Layer):
    def forward(self, x, training):
        self._x = x
        pos = x > 0
        return np.where(pos, SELU_LAMBDA * x, SELU_LAMBDA * SELU_ALPHA * (np.exp(np.minimum(x, 0.0)) - 1.0))

    def backward(self, dout):
        x = self._x
        grad = np.where(x > 0, SELU_LAMBDA, SELU_LAMBDA * SELU_ALPHA * np.exp(np.minimum(x, 0.0)))
        return dout * grad


class _Dropout(_Layer):
    def __init__(self, rate, rng):
        self.rate = rate
        self.rng = rng
        self.enabled = True

    def forward(self, x, training):
        if not training or not self.enabled or self.rate == 0.0:
            self._mask = None
            return x
        keep = 1.0 - self.rate
        self._mask = (self.rng.random(x.shape) < keep) / keep
        return x * self._mask

    def backward(self, dout):
        if self._mask is None:
            return dout
        return dout * self._mask


class _Dense(_Layer):
    def __init__(self, din, dout, rng, dtype, name, zero_init=False):
        if zero_init:
            self.W = np.zeros((din, dout), dtype=dtype)
        else:
            self.W = (rng.standard_normal((din, dout)) / np.sqrt(din)).astype(dtype)
        self.b = np.zeros(dout, dtype=dtype)
        self.dW = np.zeros_like(self.W)
        self.db = np.zeros_like(self.b)
        self.name = name

    def params(self):
        return [(self.name + ".W", self.W, self.dW), (self.name + ".b", self.b, self.db)]

    def forward(self, x, training):
        self._x = x
        return x @ self.W + self.b

    def backward(self, dout):
        self.dW += self._x.T @ dout
        self.db += dout.sum(axis=0)
        return dout @ self.W.T


class _MaxPoolOverTokens(_Layer):
    """Global max over valid token positions; empty rows pool to zero."""

    def forward(self, x_and_lengths, training):
        x, lengths = x_and_lengths
        B, L, C = x.shape
        mask = np.arange(L)[None, :] < lengths[:, None]
        neg = np.where(mask[:, :, None], x, -np.inf)
        out = neg.max(axis=1)
        empty = lengths == 0
        out[empty] = 0.0
        self._argmax = neg.argmax(axis=1)
        self._shape = x.shape
        self._empty = empty
        return out

    def backward(self, dout):
        B, L, C = self._shape
        dx = np.zeros(self._shape, dtype=dout.dtype)
        b_idx = np.repeat(np.arange(B), C)
        c_idx = np.tile(np.arange(C), B)
        l_idx = self._argmax.ravel()
        keep = ~self._empty[b_idx]
        np.add.at(dx, (b_idx[keep], l_idx[keep], c_idx[keep]), dout.ravel()[keep])
        return dx


class _AvgPoolOverTokens(_Layer):
    def forward(self, x, training):
        self._L = x.shape[1]
        return x.mean(axis=1)

    def backward(self, dout):
        return np.repeat(dout[:, None, :], self._L, axis=1) / self._L


def _conv_block(cin, counts, width, dropout_rate, bn_momentum, bn_eps, rng, dtype, drop_rng, prefix):
    layers = []
    for i, cout in enumerate(counts):
        layers.append(_Conv1d(cin, cout, width, rng, dtype, f"{prefix}.conv{i}"))
        layers.append(_BatchNorm(cout, bn_momentum, rng, dtype, f"{prefix}.bn{i}", eps=bn_eps))
        layers.append(_Selu())
        if i >= 1:
            layers.append(_Dropout(dropout_rate, drop_rng))
        cin = cout
    return layers


# --------------------------------------------------------------------------
# model


class IncidentCnn(TriageEstimator):
    """Text+context CNN recommender; see the module docstring for the wiring."""

    def __init__(self, config: CnnConfig = None, model_id: str = "cnn"):
        self.config = config or CnnConfig()
        self.model_id = model_id
        self.classes_ = None
        self.context_vocabs_ = None
        self._layers_built = False

    # -- construction ------------------------------------------------------

    def _build(self, n_classes):
        cfg = self.config
        dtype = np.dtype(cfg.dtype)
        rng = np.random.default_rng(cfg.seed)
        self._drop_rng = np.random.default_rng([cfg.seed, 1])
        self._shuffle_rng = np.random.default_rng([cfg.seed, 2])

        self.text_embedding = _Embedding(cfg.text_hash_dim, cfg.embed_dim, rng, dtype, "text.embed")
        self.text_block = _conv_block(
            cfg.embed_dim, cfg.filter_counts, cfg.filter_width, cfg.dropout_rate,
            cfg.bn_momentum, cfg.bn_eps, rng, dtype, self._drop_rng, "text",
        )
        self.text_pool = _MaxPoolOverTokens()

        self.context_embeddings = {
            f: _Embedding(1 + len(self.context_vocabs_[f]), cfg.context_embed_dim,
                          rng, dtype, f"ctx.embed.{f}")
            for f in CONTEXT_FIELDS
        }
        self.context_block = _conv_block(
            cfg.context_embed_dim, cfg.filter_counts, cfg.filter_width, cfg.dropout_rate,
            cfg.bn_momentum, cfg.bn_eps, rng, dtype, self._drop_rng, "ctx",
        )
        self.context_pool = _AvgPoolOverTokens()
        self.context_fc = _Dense(cfg.filter_counts[2], cfg.context_fc_dim, rng, dtype, "ctx.fc")

        concat_dim = cfg.filter_counts[2] + cfg.context_fc_dim
        self.head_bn = _BatchNorm(concat_dim, cfg.bn_momentum, rng, dtype, "head.bn", eps=cfg.bn_eps)
        self.head_dropout = _Dropout(cfg.dropout_rate, self._drop_rng)
        # Zero-init classifier: an untrained model emits the uniform softmax.
        self.classifier = _Dense(concat_dim, n_classes, rng, dtype, "head.fc", zero_init=True)
        self._dtype = dtype
        self._layers_built = True

    def _all_layers(self):
        layers = [self.text_embedding, *self.text_block, self.text_pool]
        layers.extend(self.context_embeddings.values())
        layers.extend([*self.context_block, self.context_pool, self.context_fc,
                       self.head_bn, self.head_dropout, self.classifier])
        return layers

    def parameters(self):
        out = []
        for layer in self._all_layers():
            out.extend(layer.params())
        return out

    def zero_grads(self):
        for _, _, grad in self.parameters():
            grad[...] = 0.0

    # -- input encoding ----------------------------------------------------

    def _token_ids(self, incident) -> np.ndarray:
        tokens = list(incident_token_stream(incident).tokens())[: self.config.max_tokens]
        return np.array(
            [stable_hash64(t) % self.config.text_hash_dim for t in tokens], dtype=np.int64
        )

    def _context_values(self, incident) -> dict:
        return {
            "source_name": [incident.source_name] if incident.source_name else [],
            "originating_service_id": [incident.originating_service_id] if incident.originating_service_id else [],
            "occurring_device_name": [incident.occurring_device_name] if incident.occurring_device_name else [],
            "raising_dc": [incident.raising_dc] if incident.raising_dc else [],
            "severity": [str(incident.severity)],
            "incident_type": [incident.incident_type],
            "keywords": list(incident.keywords),
        }

    def _batch_arrays(self, incidents):
        ids_list = [self._token_ids(inc) for inc in incidents]
        lengths = np.array([len(ids) for ids in ids_list], dtype=np.int64)
        L = max(int(lengths.max()), 1)
        token_ids = np.full((len(incidents), L), -1, dtype=np.int64)
        for i, ids in enumerate(ids_list):
            token_ids[i, : len(ids)] = ids
        ctx_ids = {}
        for f in CONTEXT_FIELDS:
            vocab = self.context_vocabs_[f]
            rows = []
            for inc in incidents:
                values = self._context_values(inc)[f]
                rows.append([vocab.get(v, 0) for v in values] or [0])
            ctx_ids[f] = rows
        return token_ids, lengths, ctx_ids

    # -- forward / backward -------------------------------------------------

    def _forward(self, token_ids, lengths, ctx_ids, training):
        x = self.text_embedding.forward(token_ids, training)
        for layer in self.text_block:
            x = layer.forward(x, training)
        text_vec = self.text_pool.forward((x, lengths), training)

        field_vecs = []
        self._ctx_caches = {}
        for f in CONTEXT_FIELDS:
            emb = self.context_embeddings[f]
            rows = ctx_ids[f]
            flat = np.array([i for row in rows for i in row], dtype=np.int64)
            vecs = emb.forward(flat, training)
            counts = np.array([len(row) for row in rows])
            bounds = np.cumsum(counts)[:-1]
            # mean over this field's (possibly multiple) values per example
            mean = np.array([seg.mean(axis=0) for seg in np.split(vecs, bounds)])
            self._ctx_caches[f] = counts
            field_vecs.append(mean.astype(vecs.dtype))
        c = np.stack(field_vecs, axis=1)  # (B, n_fields, D)
        for layer in self.context_block:
            c = layer.forward(c, training)
        c = self.context_pool.forward(c, training)
        ctx_vec = self.context_fc.forward(c, training)

        h = np.concatenate([text_vec, ctx_vec], axis=1)
        h = self.head_bn.forward(h, training)
        h = self.head_dropout.forward(h, training)
        return self.classifier.forward(h, training)

    def _backward(self, dlogits):
        dh = self.classifier.backward(dlogits)
        dh = self.head_dropout.backward(dh)
        dh = self.head_bn.backward(dh)
        text_dim = self.config.filter_counts[2]
        dtext, dctx = dh[:, :text_dim], dh[:, text_dim:]

        dc = self.context_fc.backward(dctx)
        dc = self.context_pool.backward(dc)
        for layer in reversed(self.context_block):
            dc = layer.backward(dc)
        for j, f in enumerate(CONTEXT_FIELDS):
            counts = self._ctx_caches[f]
            dmean = dc[:, j, :]
            dflat = np.repeat(dmean / counts[:, None], counts, axis=0)
            self.context_embeddings[f].backward(dflat)

        dx = self.text_pool.backward(dtext)
        for layer in reversed(self.text_block):
            dx = layer.backward(dx)
        self.text_embedding.backward(dx)

    @staticmethod
    def _softmax(logits):
        z = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def loss_and_grad(self, incidents, labels, training=True):
        """Mean cross-entropy over the batch plus dlogits for backprop."""
        token_ids, lengths, ctx_ids = self._batch_arrays(incidents)
        logits = self._forward(token_ids, lengths, ctx_ids, training)
        probs = self._softmax(logits)
        y = np.array([self.classes_.index(l) for l in labels])
        eps = 1e-12
        loss = float(-np.log(probs[np.arange(len(y)), y] + eps).mean())
        dlogits = probs.copy()
        dlogits[np.arange(len(y)), y] -= 1.0
        dlogits /= len(y)
        return loss, dlogits.astype(self._dtype)

    # -- training ------------------------------------------------------------

    def fit(self, incidents, classes=None):
        incidents = list(incidents)
        if not incidents:
            raise ValueError("cannot train on an empty corpus")
        labels = [inc.owning_team for inc in incidents]
        self.classes_ = sorted(classes) if classes else sorted(set(labels))
        if len(self.classes_) < 2:
            raise ValueError("need at least 2 classes")
        present = set(labels)
        missing = [c for c in self.classes_ if c not in present]
        if missing:
            raise ValueError(f"classes without any training example: {missing}")
        known = set(self.classes_)
        if not all(l in known for l in labels):
            dropped = sum(1 for l in labels if l not in known)
            logger.warning("dropping %d incidents with labels outside the class list", dropped)
            incidents = [i for i in incidents if i.owning_team in known]
            labels = [i.owning_team for i in incidents]

        self.context_vocabs_ = {}
        for f in CONTEXT_FIELDS:
            values = sorted({v for inc in incidents for v in self._context_values(inc)[f]})
            self.context_vocabs_[f] = {v: i + 1 for i, v in enumerate(values)}  # 0 = <unk>
        self._build(len(self.classes_))

        velocities = {name: np.zeros_like(value) for name, value, _ in self.parameters()}
        cfg = self.config
        n = len(incidents)
        self.epoch_losses_ = []
        for epoch in range(cfg.epochs):
            order = self._shuffle_rng.permutation(n)
            epoch_loss = 0.0
            for start in range(0, n, cfg.batch_size):
                batch_idx = order[start : start + cfg.batch_size]
                batch = [incidents[i] for i in batch_idx]
                batch_labels = [labels[i] for i in batch_idx]
                self.zero_grads()
                loss, dlogits = self.loss_and_grad(batch, batch_labels, training=True)
                if not np.isfinite(loss):
                    raise RuntimeError(
                        f"training diverged at epoch {epoch}: loss={loss} "
                        f"(lr={cfg.learning_rate}, batch={len(batch)})"
                    )
                self._backward(dlogits)
                for name, value, grad in self.parameters():
                    v = velocities[name]
                    v *= cfg.momentum
                    v -= cfg.learning_rate * grad
                    value += v
                epoch_loss += loss * len(batch)
            self.epoch_losses_.append(epoch_loss / n)
        return self

    # -- inference -------------------------------------------------------

    def encode_textual(self, incident):
        """Pooled textual representation; flags incidents with zero tokens."""
        self._check_fitted("classes_")
        token_ids, lengths, _ = self._batch_arrays([incident])
        if lengths[0] == 0:
            return np.zeros(self.config.filter_counts[2], dtype=self._dtype), True
        x = self.text_embedding.forward(token_ids, False)
        for layer in self.text_block:
            x = layer.forward(x, False)
        return self.text_pool.forward((x, lengths), False)[0], False

    def encode_contextual(self, incident):
        self._check_fitted("classes_")
        _, _, ctx_ids = self._batch_arrays([incident])
        field_vecs = []
        for f in CONTEXT_FIELDS:
            emb = self.context_embeddings[f]
            row = ctx_ids[f][0]
            vecs = emb.forward(np.array(row, dtype=np.int64), False)
            field_vecs.append(vecs.mean(axis=0))
        c = np.stack(field_vecs)[None, :, :].astype(self._dtype)
        for layer in self.context_block:
            c = layer.forward(c, False)
        c = self.context_pool.forward(c, False)
        return self.context_fc.forward(c, False)[0]

    def predict_proba(self, incident) -> np.ndarray:
        self._check_fitted("classes_")
        token_ids, lengths, ctx_ids = self._batch_arrays([incident])
        logits = self._forward(token_ids, lengths, ctx_ids, training=False)
        return self._softmax(logits)[0]

    def predict_output(self, incident) -> ModelOutput:
        probs = self.predict_proba(incident)
        scores = {c: float(p) for c, p in zip(self.classes_, probs)}
        return ModelOutput.from_scores(self.model_id, scores)

    # -- serialization -----------------------------------------------------

    def tensors(self) -> dict:
        self._check_fitted("classes_")
        out = {name: value for name, value, _ in self.parameters()}
        for layer in self._all_layers():
            if isinstance(layer, _BatchNorm):
                out[layer.name + ".running_mean"] = layer.running_mean
                out[layer.name + ".running_var"] = layer.running_var
        return out

    def metadata(self) -> dict:
        from dataclasses import asdict

        return {
            "format": "cnn/1",
            "config": asdict(self.config),
            "model_id": self.model_id,
            "classes": self.classes_,
            "context_vocabs": self.context_vocabs_,
        }

    @classmethod
    def from_saved(cls, metadata: dict, tensors: dict) -> "IncidentCnn":
        if metadata.get("format") != "cnn/1":
            raise ValueError(f"unsupported cnn format {metadata.get('format')!r}")
        cfg_fields = dict(metadata["config"])
        cfg_fields["filter_counts"] = tuple(cfg_fields["filter_counts"])
        model = cls(CnnConfig(**cfg_fields), model_id=metadata["model_id"])
        model.classes_ = list(metadata["classes"])
        model.context_vocabs_ = {f: dict(v) for f, v in metadata["context_vocabs"].items()}
        model._build(len(model.classes_))
        saved_names = set(tensors)
        for name, value, _ in model.parameters():
            value[...] = tensors[name]
            saved_names.discard(name)
        for layer in model._all_layers():
            if isinstance(layer, _BatchNorm):
                layer.running_mean[...] = tensors[layer.name + ".running_mean"]
                layer.running_var[...] = tensors[layer.name + ".running_var"]
        return model


def train_cnn(incidents, config: CnnConfig = None, model_id: str = "cnn") -> IncidentCnn:
    model = IncidentCnn(config, model_id=model_id)
    return model.fit(incidents, classes=config.classes if config and config.classes else None)


def predict_cnn(model: IncidentCnn, incident) -> ModelOutput:
    return model.predict_output(incident)


def gradient_check(model: IncidentCnn, incidents, labels, h: float = 1e-4,
                   max_entries_per_tensor: int = 6, seed: int = 0) -> float:
    """Compare analytic gradients with central finite differences.

    Dropout is disabled and batch norm runs in per-batch mode with frozen
    running statistics, so the loss is a smooth deterministic function of the
    parameters. Returns the maximum relative error over sampled entries.
    """
    if len(incidents) > 4:
        raise ValueError("gradient check batches are capped at 4 examples")
    for layer in model._all_layers():
        if isinstance(layer, _Dropout):
            layer.enabled = False
        if isinstance(layer, _BatchNorm):
            layer.update_stats = False

    model.zero_grads()
    loss, dlogits = model.loss_and_grad(incidents, labels, training=True)
    model._backward(dlogits)
    analytic = {name: grad.copy() for name, _, grad in model.parameters()}

    rng = np.random.default_rng(seed)
    max_rel = 0.0
    for name, value, _ in model.parameters():
        flat = value.reshape(-1)
        n_entries = min(max_entries_per_tensor, flat.size)
        picks = rng.choice(flat.size, size=n_entries, replace=False)
        for idx in picks:
            original = flat[idx]
            flat[idx] = original + h
            up, _ = model.loss_and_grad(incidents, labels, training=True)
            flat[idx] = original - h
            down, _ = model.loss_and_grad(incidents, labels, training=True)
            flat[idx] = original
            numeric = (up - down) / (2.0 * h)
            a = analytic[name].reshape(-1)[idx]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            max_rel = max(max_rel, rel)

    for layer in model._all_layers():
        if isinstance(layer, _Dropout):
            layer.enabled = True
        if isinstance(layer, _BatchNorm):
            layer.update_stats = True
    return max_rel

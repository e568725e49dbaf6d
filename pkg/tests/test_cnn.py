import numpy as np
import pytest

from triagekit.cnn import (
    SELU_ALPHA,
    SELU_LAMBDA,
    CnnConfig,
    IncidentCnn,
    gradient_check,
    train_cnn,
)
from triagekit.incident import Incident


def make_incident(i, team, title, summary="", keywords=(), svc=None):
    return Incident(
        id=f"INC-{i:04d}", created_at=float(i), severity=i % 5, incident_type="LSI",
        title=title, summary=summary, keywords=list(keywords) or [f"kw-{i % 4}"],
        source_name=f"monitor-{i % 3}", originating_service_id=svc or f"svc-{team}",
        occurring_device_name=f"dev-{i % 3}", raising_dc=f"dc-{i % 2}",
        owning_team=team, routing_path=[team],
    )


def separable_corpus(n_per_class=10):
    """Two classes with disjoint vocabularies."""
    incidents = []
    vocab_a = ["storage", "disk", "volume", "raid", "sector", "platter"]
    vocab_b = ["login", "token", "auth", "password", "session", "cookie"]
    for i in range(n_per_class):
        words_a = [vocab_a[(i + j) % len(vocab_a)] for j in range(4)]
        words_b = [vocab_b[(i + j) % len(vocab_b)] for j in range(4)]
        incidents.append(make_incident(2 * i, "team-store", " ".join(words_a),
                                       summary=" ".join(reversed(words_a))))
        incidents.append(make_incident(2 * i + 1, "team-auth", " ".join(words_b),
                                       summary=" ".join(reversed(words_b))))
    return incidents


def tiny_config(**overrides):
    params = dict(
        embed_dim=8, context_embed_dim=4, max_tokens=16, filter_counts=(3, 4, 5),
        context_fc_dim=4, text_hash_dim=1 << 10, epochs=0, batch_size=4,
        learning_rate=0.05, dropout_rate=0.2, bn_eps=1e-2, seed=0, dtype="float64",
    )
    params.update(overrides)
    return CnnConfig(**params)


class TestSelu:
    def test_constants_and_fixed_points(self):
        assert SELU_LAMBDA == pytest.approx(1.0507, abs=1e-4)
        assert SELU_ALPHA == pytest.approx(1.6733, abs=1e-4)
        from triagekit.cnn import _Selu

        layer = _Selu()
        x = np.array([[-2.0, 0.0, 3.0]])
        out = layer.forward(x, training=False)
        assert out[0, 1] == 0.0
        assert out[0, 2] == pytest.approx(SELU_LAMBDA * 3.0)
        assert out[0, 0] == pytest.approx(SELU_LAMBDA * SELU_ALPHA * (np.exp(-2.0) - 1.0))

    def test_monotone(self):
        from triagekit.cnn import _Selu

        xs = np.linspace(-4, 4, 201)[None, :]
        out = _Selu().forward(xs, training=False)[0]
        assert all(b >= a for a, b in zip(out, out[1:]))


class TestUntrainedModel:
    def test_epochs_zero_uniform_softmax(self):
        model = train_cnn(separable_corpus(4), tiny_config(epochs=0))
        probs = model.predict_proba(separable_corpus(1)[0])
        assert probs == pytest.approx(np.full(2, 0.5), abs=1e-9)

    def test_probabilities_sum_to_one(self):
        model = train_cnn(separable_corpus(4), tiny_config(epochs=1))
        for inc in separable_corpus(2):
            assert model.predict_proba(inc).sum() == pytest.approx(1.0, abs=1e-6)

    def test_top_size_saturates_at_class_count(self):
        model = train_cnn(separable_corpus(3), tiny_config())
        out = model.predict_output(separable_corpus(1)[0])
        assert len(out.top) == 2


class TestDeterminism:
    def test_same_seed_identical_parameters(self):
        a = train_cnn(separable_corpus(5), tiny_config(epochs=2, seed=3))
        b = train_cnn(separable_corpus(5), tiny_config(epochs=2, seed=3))
        for (name_a, ta), (name_b, tb) in zip(sorted(a.tensors().items()),
                                              sorted(b.tensors().items())):
            assert name_a == name_b
            assert np.array_equal(ta, tb)

    def test_inference_repeatable_bitwise(self):
        model = train_cnn(separable_corpus(5), tiny_config(epochs=2))
        inc = separable_corpus(1)[0]
        assert np.array_equal(model.predict_proba(inc), model.predict_proba(inc))

    def test_argmax_invariant_to_logit_shift(self):
        # softmax(z + c) == softmax(z)
        model = train_cnn(separable_corpus(5), tiny_config(epochs=2))
        inc = separable_corpus(1)[0]
        token_ids, lengths, ctx_ids = model._batch_arrays([inc])
        logits = model._forward(token_ids, lengths, ctx_ids, training=False)
        p = model._softmax(logits)
        p_shift = model._softmax(logits + 7.5)
        assert p == pytest.approx(p_shift, abs=1e-9)


class TestEncoders:
    def test_textual_encoding_shape_and_zero_flag(self):
        model = train_cnn(separable_corpus(4), tiny_config())
        vec, empty = model.encode_textual(separable_corpus(1)[0])
        assert vec.shape == (5,) and not empty
        blank = make_incident(999, "team-store", "??? !!!")  # cleans to no tokens
        vec, empty = model.encode_textual(blank)
        assert empty and np.all(vec == 0.0)

    def test_contextual_encoding_deterministic_and_fixed_width(self):
        model = train_cnn(separable_corpus(4), tiny_config())
        a = make_incident(100, "team-store", "disk", svc="svc-shared")
        b = make_incident(100, "team-store", "volume", svc="svc-shared")
        b.id = "INC-other"
        enc_a = model.encode_contextual(a)
        enc_b = model.encode_contextual(b)
        assert enc_a.shape == (4,)
        assert np.allclose(enc_a, enc_b)  # identical contextual fields

    def test_unseen_context_values_fall_back_to_unk(self):
        model = train_cnn(separable_corpus(4), tiny_config())
        alien = make_incident(300, "team-store", "disk", svc="svc-never-seen")
        alien.source_name = "completely-new-source"
        alien.raising_dc = "dc-unknown"
        vec = model.encode_contextual(alien)
        assert np.all(np.isfinite(vec))


class TestTraining:
    def test_separable_corpus_reaches_full_accuracy_within_50_epochs(self):
        incidents = separable_corpus(10)
        config = CnnConfig(
            embed_dim=16, context_embed_dim=8, max_tokens=16, filter_counts=(8, 12, 16),
            context_fc_dim=8, text_hash_dim=1 << 12, epochs=50, batch_size=8,
            learning_rate=0.05, dropout_rate=0.1, seed=0, dtype="float64",
        )
        model = train_cnn(incidents, config)
        correct = sum(
            model.predict_output(inc).top[0][0] == inc.owning_team for inc in incidents
        )
        assert correct == len(incidents)

    def test_loss_decreases_over_first_five_epochs(self):
        incidents = separable_corpus(10)
        model = train_cnn(incidents, tiny_config(epochs=5, learning_rate=0.05,
                                                 dropout_rate=0.0))
        losses = model.epoch_losses_
        assert losses[4] < losses[0]

    def test_divergence_aborts_with_diagnostics(self):
        with pytest.raises(RuntimeError, match="diverged"):
            train_cnn(separable_corpus(6), tiny_config(epochs=30, learning_rate=1e4))

    def test_class_list_must_be_covered(self):
        with pytest.raises(ValueError, match="without any training example"):
            IncidentCnn(tiny_config()).fit(separable_corpus(3),
                                           classes=["team-store", "team-auth", "team-ghost"])


class TestSerialization:
    def test_round_trip_identical_probabilities(self):
        model = train_cnn(separable_corpus(5), tiny_config(epochs=2))
        clone = IncidentCnn.from_saved(model.metadata(), model.tensors())
        inc = separable_corpus(2)[1]
        assert np.array_equal(model.predict_proba(inc), clone.predict_proba(inc))


class TestGradientCheck:
    def batch(self):
        incidents = separable_corpus(2)  # 4 incidents, varied context fields
        return incidents, [i.owning_team for i in incidents]

    def live_model(self):
        """Fresh init with a random classifier head so every path carries
        gradient (the zero-init head would zero out all upstream gradients)."""
        model = train_cnn(separable_corpus(3), tiny_config(epochs=0))
        rng = np.random.default_rng(0)
        W = model.classifier.W
        W[...] = rng.standard_normal(W.shape) / np.sqrt(W.shape[0])
        return model

    def test_max_relative_error_below_tolerance(self):
        model = self.live_model()
        incidents, labels = self.batch()
        err = gradient_check(model, incidents, labels, h=1e-4, seed=0)
        assert err < 1e-3

    def test_zero_classifier_bias_gradient_matches_closed_form(self):
        # With a zero classifier the logits are zero, the softmax is uniform,
        # and d loss / d bias = mean(softmax - onehot) over the batch.
        model = train_cnn(separable_corpus(3), tiny_config(epochs=0))
        incidents, labels = self.batch()
        for layer in model._all_layers():
            from triagekit.cnn import _Dropout

            if isinstance(layer, _Dropout):
                layer.enabled = False
        model.zero_grads()
        loss, dlogits = model.loss_and_grad(incidents, labels, training=True)
        model._backward(dlogits)
        n_classes = len(model.classes_)
        onehot = np.zeros((len(incidents), n_classes))
        for i, label in enumerate(labels):
            onehot[i, model.classes_.index(label)] = 1.0
        expected = (np.full_like(onehot, 1.0 / n_classes) - onehot).mean(axis=0)
        assert model.classifier.db == pytest.approx(expected, abs=1e-12)

    def test_truncation_error_scales_quadratically(self):
        # Central differences have O(h^2) truncation error: doubling h should
        # roughly quadruple the error along a fixed random direction.
        model = self.live_model()
        incidents, labels = self.batch()
        from triagekit.cnn import _BatchNorm, _Dropout

        for layer in model._all_layers():
            if isinstance(layer, _Dropout):
                layer.enabled = False
            if isinstance(layer, _BatchNorm):
                layer.update_stats = False
        model.zero_grads()
        _, dlogits = model.loss_and_grad(incidents, labels, training=True)
        model._backward(dlogits)

        rng = np.random.default_rng(1)
        params = model.parameters()
        direction = [rng.standard_normal(v.shape) for _, v, _ in params]
        norm = np.sqrt(sum(float((d * d).sum()) for d in direction))
        direction = [d / norm for d in direction]  # unit step keeps h meaningful
        analytic = sum(float((g * d).sum()) for (_, _, g), d in zip(params, direction))

        def directional(h):
            for (_, v, _), d in zip(params, direction):
                v += h * d
            up, _ = model.loss_and_grad(incidents, labels, training=True)
            for (_, v, _), d in zip(params, direction):
                v -= 2 * h * d
            down, _ = model.loss_and_grad(incidents, labels, training=True)
            for (_, v, _), d in zip(params, direction):
                v += h * d
            return (up - down) / (2 * h)

        e1 = abs(directional(2e-3) - analytic)
        e2 = abs(directional(4e-3) - analytic)
        assert e1 > 1e-12  # truncation must dominate roundoff at this h
        assert 2.0 < e2 / e1 < 8.0

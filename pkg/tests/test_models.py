import numpy as np
import pytest
import torch

from distill_cl import LabeledSet, ModelSpec, backward, build_model, embed, forward
from distill_cl.errors import NumericError, ValidationError
from distill_cl.models import convnet_spec

from conftest import random_set
from gradcheck import finite_difference, max_rel_error
from reference_net import reference_forward


class TestModelSpec:
    def test_flatten_dims_match_pooling_arithmetic(self):
        assert ModelSpec(2, (8, 8), (1, 28, 28), 10).flatten_dim == 8 * 7 * 7
        assert ModelSpec(4, (128,) * 4, (3, 64, 64), 50).flatten_dim == 128 * 4 * 4

    def test_ceil_pooling_on_odd_dims(self):
        spec = ModelSpec(3, (64,) * 3, (1, 9, 9), 5)
        assert spec.spatial_trace() == [(5, 5), (3, 3), (2, 2)]
        assert spec.flatten_dim == 64 * 2 * 2

    def test_invalid_shapes_rejected(self):
        with pytest.raises(ValidationError, match="shape path"):
            ModelSpec(2, (4, 4), (1, 0, 5), 3)
        with pytest.raises(ValidationError):
            ModelSpec(2, (4,), (1, 8, 8), 3)  # widths/depth mismatch
        with pytest.raises(ValidationError):
            ModelSpec(0, (), (1, 8, 8), 3)

    def test_norm_groups_must_divide_width(self):
        with pytest.raises(ValidationError):
            ModelSpec(1, (6,), (1, 8, 8), 2, norm_groups=4)
        ModelSpec(1, (6,), (1, 8, 8), 2, norm_groups=3)  # ok


class TestBuildModel:
    def test_identical_seed_gives_bit_identical_params(self, tiny_spec):
        a = build_model(tiny_spec, seed=123)
        b = build_model(tiny_spec, seed=123)
        for (name, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert torch.equal(pa, pb), name

    def test_different_seed_differs(self, tiny_spec):
        a = build_model(tiny_spec, seed=1)
        b = build_model(tiny_spec, seed=2)
        assert not torch.equal(a.convs[0].weight, b.convs[0].weight)

    def test_param_count_reproducible_from_spec(self, tiny_spec):
        # conv 1->4 and 4->4, two norms, classifier on 4*2*2 features
        expect = (9 * 1 * 4) + (9 * 4 * 4) + 2 * 4 + 2 * 4 + (4 * 2 * 2) * 3 + 3
        assert build_model(tiny_spec, seed=0).param_count() == expect


class TestForward:
    def test_zero_classifier_gives_zero_logits(self, tiny_spec, tiny_set):
        model = build_model(tiny_spec, seed=0)
        with torch.no_grad():
            model.classifier.weight.zero_()
            model.classifier.bias.zero_()
        assert np.all(forward(model, tiny_set) == 0.0)

    def test_hand_computed_single_pixel_net(self):
        # 1x1 input: the per-channel norm maps the lone value to 0, so the
        # block output is relu(beta) and the logits are W*relu(beta) + b.
        spec = ModelSpec(1, (1,), (1, 1, 1), 2)
        model = build_model(spec, seed=0)
        with torch.no_grad():
            model.norms[0].bias.fill_(0.5)
            model.classifier.weight.copy_(torch.tensor([[2.0], [-1.0]]))
            model.classifier.bias.copy_(torch.tensor([0.1, 0.0]))
        x = np.full((1, 1, 1, 1), 0.3, np.float32)
        logits = forward(model, x)
        assert np.allclose(logits, [[2.0 * 0.5 + 0.1, -1.0 * 0.5]], atol=1e-6)

    def test_identical_images_give_identical_rows(self, tiny_spec):
        model = build_model(tiny_spec, seed=3)
        one = np.random.default_rng(0).uniform(0, 1, (1, 1, 8, 8)).astype(np.float32)
        logits = forward(model, np.tile(one, (6, 1, 1, 1)))
        for i in range(1, 6):
            assert np.array_equal(logits[0], logits[i])

    def test_shape_mismatch_rejected(self, tiny_spec):
        model = build_model(tiny_spec, seed=0)
        with pytest.raises(ValidationError, match="expected"):
            forward(model, np.zeros((2, 1, 9, 9), np.float32))

    def test_matches_independent_reference_implementation(self):
        spec = convnet_spec(2, (2, 7, 9), 4, width=3)
        model = build_model(spec, seed=11)
        rng = np.random.default_rng(5)
        for _ in range(3):
            img = rng.uniform(0, 1, (2, 7, 9)).astype(np.float32)
            got = forward(model, img[None])[0]
            want = reference_forward(model, img)
            assert np.allclose(got, want, atol=1e-4), (got, want)


class TestEmbed:
    def test_zero_input_zero_shift_gives_zero_features(self):
        spec = ModelSpec(1, (4,), (1, 6, 6), 2)
        model = build_model(spec, seed=0)  # norm shift is zero by init
        feats = embed(model, np.zeros((2, 1, 6, 6), np.float32))
        assert np.all(feats == 0.0)

    def test_embed_then_classify_equals_forward(self, tiny_spec, tiny_set):
        model = build_model(tiny_spec, seed=4)
        feats = embed(model, tiny_set)
        w = model.classifier.weight.detach().numpy()
        b = model.classifier.bias.detach().numpy()
        assert np.allclose(feats @ w.T + b, forward(model, tiny_set), atol=1e-5)

    def test_feature_dim_equals_flatten_dim(self, tiny_spec, tiny_set):
        model = build_model(tiny_spec, seed=4)
        assert embed(model, tiny_set).shape == (len(tiny_set), tiny_spec.flatten_dim)


class TestBackward:
    def test_gradients_match_finite_differences(self):
        spec = convnet_spec(2, (1, 6, 6), 2, width=3)
        model = build_model(spec, seed=9, dtype=torch.float64)
        batch = random_set(4, (1, 6, 6), 2, seed=1)
        param_grads, input_grads = backward(model, batch)

        def loss():
            with torch.no_grad():
                logits = model(torch.from_numpy(imgs64))
                return float(
                    torch.nn.functional.cross_entropy(logits, torch.from_numpy(batch.labels))
                )

        imgs64 = batch.images.astype(np.float64)
        fd_inputs = finite_difference(loss, imgs64)
        assert max_rel_error(input_grads, fd_inputs) < 1e-4

        for name, p in model.named_parameters():
            arr = p.detach().numpy()  # shares storage; finite_difference restores it

            def param_loss():
                with torch.no_grad():
                    return float(
                        torch.nn.functional.cross_entropy(
                            model(torch.from_numpy(batch.images.astype(np.float64))),
                            torch.from_numpy(batch.labels),
                        )
                    )

            fd = finite_difference(param_loss, arr)
            assert max_rel_error(param_grads[name], fd) < 1e-4, name

    def test_duplicated_sample_doubles_contribution_under_sum(self, tiny_spec):
        model = build_model(tiny_spec, seed=2)
        one = random_set(1, (1, 8, 8), 3, seed=3)
        two = LabeledSet(
            np.repeat(one.images, 2, axis=0), np.repeat(one.labels, 2), 3
        )
        g1, _ = backward(model, one, reduction="sum")
        g2, _ = backward(model, two, reduction="sum")
        for name in g1:
            assert np.allclose(2.0 * g1[name], g2[name], rtol=1e-4, atol=1e-6), name

    def test_input_grad_shape_matches_batch(self, tiny_spec, tiny_set):
        model = build_model(tiny_spec, seed=0)
        _, input_grads = backward(model, tiny_set)
        assert input_grads.shape == tiny_set.images.shape
        assert np.isfinite(input_grads).all()

    def test_non_finite_loss_reports_batch_index(self, tiny_spec, tiny_set):
        model = build_model(tiny_spec, seed=0)
        with torch.no_grad():
            model.classifier.weight.fill_(float("inf"))
        with pytest.raises(NumericError, match="batch index 0"):
            backward(model, tiny_set)

    def test_custom_loss_callable(self, tiny_spec, tiny_set):
        model = build_model(tiny_spec, seed=0)
        param_grads, input_grads = backward(
            model, tiny_set, loss=lambda logits, labels: (logits ** 2).mean()
        )
        assert np.isfinite(input_grads).all()
        assert set(param_grads) == {n for n, _ in model.named_parameters()}


def test_forward_embed_backward_determinism(tiny_spec, tiny_set):
    a = build_model(tiny_spec, seed=5)
    b = build_model(tiny_spec, seed=5)
    assert np.array_equal(forward(a, tiny_set), forward(b, tiny_set))
    assert np.array_equal(embed(a, tiny_set), embed(b, tiny_set))
    ga, _ = backward(a, tiny_set)
    gb, _ = backward(b, tiny_set)
    for name in ga:
        assert np.array_equal(ga[name], gb[name]), name

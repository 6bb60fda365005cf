import math

import numpy as np
import pytest
import torch
from scipy import ndimage

from nailguard import models, pipeline
from nailguard.backbones import BACKBONES, BackboneError, WeightsUnavailableError, make_backbone
from nailguard.dataset import LabelTaxonomy
from nailguard.models import Checkpoint, CheckpointError, NumericError, build

from conftest import build_gentle_tiny, build_tiny, random_batch


class TestBuild:
    def test_tiny_parameter_count(self):
        clf = build("tiny_test")
        # oracle: enumerate parameter arrays and sum sizes
        by_array = sum(p.numel() for p in clf.net.parameters())
        assert by_array == clf.num_parameters() == 1494
        assert 3 * 3 * 3 * 8 + 8 + 3 * 3 * 8 * 16 + 16 + 16 * 6 + 6 == 1494

    def test_input_shape_recorded(self):
        assert BACKBONES["inception_v3"].input_shape == (224, 224, 3)
        assert BACKBONES["tiny_test"].input_shape == (224, 224, 3)

    def test_unknown_id_is_error(self):
        with pytest.raises(BackboneError, match="unknown backbone"):
            build("mystery_net")

    def test_pretrained_without_cached_weights_errors_with_instructions(self):
        with pytest.raises(WeightsUnavailableError, match="checkpoints"):
            make_backbone("resnet50", pretrained=True)

    def test_seeded_build_is_reproducible(self):
        a = build("tiny_test", seed=7).state_arrays()
        b = build("tiny_test", seed=7).state_arrays()
        assert all(np.array_equal(a[k], b[k]) for k in a)
        c = build("tiny_test", seed=8).state_arrays()
        assert any(not np.array_equal(a[k], c[k]) for k in a)


class TestForward:
    def test_zero_head_gives_uniform_probs(self):
        clf = build_tiny()  # head is zero-init
        batch = random_batch(n=3, seed=0)
        logits, probs = clf.forward(batch)
        np.testing.assert_allclose(probs, 1.0 / 6.0, atol=1e-7)
        np.testing.assert_allclose(logits, 0.0, atol=1e-7)

    def test_fixed_logit_row_softmax(self):
        clf = build_tiny()
        with torch.no_grad():
            clf.net.head.bias.copy_(torch.tensor([2.0, 0, 0, 0, 0, 0]))
        _, probs = clf.forward(random_batch(n=1, seed=1))
        expected_p0 = math.exp(2) / (math.exp(2) + 5)
        assert abs(probs[0, 0] - expected_p0) < 1e-6
        assert abs(expected_p0 - 0.5964) < 5e-4

    def test_prob_rows_sum_to_one(self):
        clf = build_tiny(head_seed=3, head_scale=2.0)
        batch = random_batch(n=100, seed=2)
        logits, probs = clf.forward(batch)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-6)
        # softmax is monotone: argmaxes agree
        np.testing.assert_array_equal(logits.argmax(axis=1), probs.argmax(axis=1))

    def test_nan_weights_raise_numeric_error(self):
        clf = build_tiny()
        with torch.no_grad():
            clf.net.head.bias.fill_(float("nan"))
        with pytest.raises(NumericError):
            clf.forward(random_batch(n=1))


class TestLossAndGrads:
    def bias_model_for_probs(self, probs):
        clf = build_tiny()
        with torch.no_grad():
            clf.net.head.bias.copy_(torch.log(torch.tensor(probs, dtype=torch.float32)))
        return clf

    def test_known_distribution_loss(self):
        clf = self.bias_model_for_probs([0.5, 0.1, 0.1, 0.1, 0.1, 0.1])
        batch = random_batch(n=1, seed=0, labels=[0])
        loss, _ = clf.loss_and_grads(batch, wrt="params")
        assert abs(loss - (-math.log(0.5))) < 1e-6
        assert abs(loss - 0.6931) < 1e-4

    def test_perfect_prediction_loss_near_zero(self):
        eps = 1e-9
        clf = self.bias_model_for_probs([1 - eps] + [eps / 5] * 5)
        batch = random_batch(n=1, seed=0, labels=[0])
        loss, _ = clf.loss_and_grads(batch, wrt="params")
        assert loss <= 1e-6

    def test_uniform_prediction_loss_is_ln6(self):
        clf = build_tiny()  # zero head -> uniform prediction
        for labels in ([0], [3], [5]):
            loss, _ = clf.loss_and_grads(random_batch(n=1, seed=1, labels=labels), wrt="params")
            assert abs(loss - math.log(6)) < 1e-6

    def test_loss_non_negative(self):
        clf = build_tiny(head_seed=5, head_scale=1.0)
        for seed in range(5):
            loss, _ = clf.loss_and_grads(random_batch(n=3, seed=seed), wrt="params")
            assert loss >= 0.0

    def test_non_one_hot_labels_rejected(self):
        clf = build_tiny()
        batch = random_batch(n=2, seed=0)
        soft = batch.labels * 0.5 + 1 / 12
        bad = pipeline.ImageBatch.__new__(pipeline.ImageBatch)
        object.__setattr__(bad, "images", batch.images)
        object.__setattr__(bad, "labels", soft)
        object.__setattr__(bad, "sample_ids", batch.sample_ids)
        with pytest.raises(ValueError, match="one-hot"):
            clf.loss_and_grads(bad, wrt="params")

    def test_wrt_modes(self):
        clf = build_tiny(head_seed=1)
        batch = random_batch(n=2, seed=3)
        _, params = clf.loss_and_grads(batch, wrt="params")
        assert set(params) == {n for n, _ in clf.net.named_parameters()}
        _, inp = clf.loss_and_grads(batch, wrt="input")
        assert inp.shape == batch.images.shape
        _, (p2, i2) = clf.loss_and_grads(batch, wrt="both")
        np.testing.assert_array_equal(i2, inp)
        with pytest.raises(ValueError):
            clf.loss_and_grads(batch, wrt="everything")

    def _central_difference(self, clf, batch, coord, h=1e-3):
        flat = batch.images.copy().astype(np.float64)
        n, i, j, c = coord
        plus = flat.copy()
        plus[n, i, j, c] += h
        minus = flat.copy()
        minus[n, i, j, c] -= h
        loss_plus = clf.loss_and_grads(
            pipeline.ImageBatch(images=plus, labels=batch.labels, sample_ids=batch.sample_ids), wrt="params"
        )[0]
        loss_minus = clf.loss_and_grads(
            pipeline.ImageBatch(images=minus, labels=batch.labels, sample_ids=batch.sample_ids), wrt="params"
        )[0]
        return (loss_plus - loss_minus) / (2 * h)

    def test_input_gradient_matches_finite_differences(self):
        # gentle fixture weights: the probe checks gradient code, and the
        # h=1e-3 step needs a moderate-curvature operating point
        clf = build_gentle_tiny(seed=0).set_dtype(torch.float64)
        batch = random_batch(n=2, seed=4)
        _, grad = clf.loss_and_grads(batch, wrt="input")
        rng = np.random.default_rng(0)
        usable = np.argwhere(np.abs(grad) > 1e-6)
        picks = usable[rng.choice(len(usable), size=20, replace=False)]
        for coord in picks:
            fd = self._central_difference(clf, batch, tuple(coord))
            analytic = grad[tuple(coord)]
            assert abs(fd - analytic) / max(abs(fd), 1e-12) < 1e-3

    def test_param_gradient_matches_finite_differences(self):
        # gradcheck-style tolerance (|fd - g| < atol + rtol*|g|): a conv weight
        # touches ~50k spatial positions, so a +-h step crosses some ReLU
        # kinks no matter how small h gets
        clf = build_gentle_tiny(seed=1).set_dtype(torch.float64)
        batch = random_batch(n=2, seed=5)
        _, grads = clf.loss_and_grads(batch, wrt="params")
        rng = np.random.default_rng(1)
        h = 1e-6
        for name, grad in grads.items():
            flat_idx = rng.integers(0, grad.size, size=3)
            param = dict(clf.net.named_parameters())[name]
            for fi in flat_idx:
                idx = tuple(np.unravel_index(fi, grad.shape))
                with torch.no_grad():
                    param[idx] += h
                lp, _ = clf.loss_and_grads(batch, wrt="params")
                with torch.no_grad():
                    param[idx] -= 2 * h
                lm, _ = clf.loss_and_grads(batch, wrt="params")
                with torch.no_grad():
                    param[idx] += h
                fd = (lp - lm) / (2 * h)
                assert abs(fd - grad[idx]) < 1e-5 + 1e-3 * abs(grad[idx]), name


def numpy_tiny_features(clf, pixels):
    """Independent partial forward of the tiny backbone with scipy convolutions."""
    w1 = clf.net.backbone.conv1.weight.detach().numpy().astype(np.float64)
    b1 = clf.net.backbone.conv1.bias.detach().numpy().astype(np.float64)
    w2 = clf.net.backbone.conv2.weight.detach().numpy().astype(np.float64)
    b2 = clf.net.backbone.conv2.bias.detach().numpy().astype(np.float64)

    def conv(x_chw, w, b):
        out = np.zeros((w.shape[0], x_chw.shape[1], x_chw.shape[2]))
        for o in range(w.shape[0]):
            acc = np.zeros(x_chw.shape[1:])
            for i in range(x_chw.shape[0]):
                acc += ndimage.correlate(x_chw[i], w[o, i], mode="constant", cval=0.0)
            out[o] = acc + b[o]
        return out

    def pool(x_chw):
        c, h, w = x_chw.shape
        return x_chw.reshape(c, h // 2, 2, w // 2, 2).max(axis=(2, 4))

    x = pixels.transpose(2, 0, 1).astype(np.float64)
    x = pool(np.maximum(conv(x, w1, b1), 0.0))
    x = pool(np.maximum(conv(x, w2, b2), 0.0))
    return x.transpose(1, 2, 0)


class TestActivations:
    def test_tap_shape_by_propagation(self):
        # symbolic shape oracle over the stated layer list
        h = w = 224
        for kind in ("conv_same", "pool", "conv_same", "pool"):
            if kind == "pool":
                h, w = h // 2, w // 2
        assert (h, w) == (56, 56)
        clf = build_tiny()
        a, g = clf.activations_and_grads(np.zeros((224, 224, 3), dtype=np.float32), 0)
        assert a.shape == g.shape == (56, 56, 16)

    def test_gradient_zero_for_zero_head(self):
        clf = build_tiny()  # zero head
        rng = np.random.default_rng(0)
        _, g = clf.activations_and_grads(rng.random((224, 224, 3)).astype(np.float32), 2)
        np.testing.assert_array_equal(g, 0.0)

    def test_activations_match_independent_forward(self):
        clf = build_gentle_tiny(seed=2, weight_scale=0.2)
        rng = np.random.default_rng(3)
        pixels = rng.random((224, 224, 3)).astype(np.float32)
        a, _ = clf.activations_and_grads(pixels, 1)
        expected = numpy_tiny_features(clf, pixels)
        np.testing.assert_allclose(a, expected, atol=1e-6)

    def test_target_out_of_range(self):
        clf = build_tiny()
        with pytest.raises(ValueError):
            clf.activations_and_grads(np.zeros((224, 224, 3), dtype=np.float32), 6)


class TestCheckpoint:
    def test_roundtrip_prediction_drift(self, tmp_path):
        clf = build_tiny(head_seed=9, head_scale=0.5)
        batch = random_batch(n=4, seed=6)
        _, before = clf.forward(batch)
        models.save(clf, tmp_path / "ckpt", metrics={"val_acc": 0.5}, epoch=3)
        restored = models.load(tmp_path / "ckpt")
        _, after = restored.forward(batch)
        assert np.abs(after - before).max() <= 1e-7

    def test_wrong_taxonomy_rejected(self, tmp_path):
        clf = build_tiny()
        models.save(clf, tmp_path / "ckpt")
        shuffled = tuple(reversed(LabelTaxonomy().categories))
        with pytest.raises(CheckpointError, match="taxonomy"):
            models.load(tmp_path / "ckpt", taxonomy=LabelTaxonomy(shuffled))

    def test_metadata_schema(self, tmp_path):
        import json

        import jsonschema

        clf = build_tiny()
        ckpt = models.save(
            clf, tmp_path / "ckpt", training_config={"learning_rate": 1e-4}, metrics={"val_acc": 0.9}, epoch=12
        )
        doc = json.loads((tmp_path / "ckpt" / "metadata.json").read_text())
        jsonschema.validate(doc, models.CHECKPOINT_METADATA_SCHEMA)
        assert doc["backbone_id"] == "tiny_test"
        assert doc["metrics"]["val_acc"] == 0.9
        assert doc["epoch"] == 12
        bad = dict(doc)
        del bad["backbone_id"]
        with pytest.raises(jsonschema.ValidationError):
            jsonschema.validate(bad, models.CHECKPOINT_METADATA_SCHEMA)

    def test_invalid_metadata_rejected_on_save(self, tmp_path):
        ckpt = Checkpoint(weights={}, metadata={"backbone_id": "tiny_test"})
        with pytest.raises(CheckpointError):
            ckpt.save(tmp_path / "bad")

    def test_missing_directory(self, tmp_path):
        with pytest.raises(CheckpointError):
            Checkpoint.load(tmp_path / "nope")

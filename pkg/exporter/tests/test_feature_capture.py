"""Selector resolution and capture behavior, checked against sliced forwards.

Each happy-path test recomputes the expected features without hooks (by
running the relevant sub-stack directly) so the capture path has an
independent answer to match.
"""
import numpy as np
import pytest
import torch
from torch import nn

from gist_export.capture import FeatureTap
from gist_export.errors import DataFormatError, LayerNotFound, SelectorAmbiguous

from toynets import (
    N_CLASSES,
    conv_net,
    conv_pool_output,
    image_data,
    mlp_net,
    token_data,
    token_hidden,
    token_net,
    two_pool_net,
)

rng = np.random.default_rng(3)


def run_tap(net, selector, inputs, **kw):
    tap = FeatureTap(net, selector, **kw)
    feats, logits = tap.run(torch.as_tensor(inputs))
    return feats.numpy(), logits.numpy()


def test_named_layer_capture_matches_sliced_forward():
    net = conv_net(0)
    x, _ = image_data(rng, 6)
    feats, logits = run_tap(net, "2", x)
    assert np.array_equal(feats, conv_pool_output(net, x))
    with torch.no_grad():
        assert np.array_equal(logits, net(torch.as_tensor(x)).numpy())


def test_unknown_layer_name_lists_what_exists():
    with pytest.raises(LayerNotFound, match="mix"):
        FeatureTap(token_net(), "encoder.block.9")


def test_empty_selector_is_rejected():
    with pytest.raises(LayerNotFound):
        FeatureTap(conv_net(), "")


def test_pool_convention_matches_sliced_forward():
    net = conv_net(1)
    x, _ = image_data(rng, 5)
    feats, _ = run_tap(net, "penultimate-pool", x)
    assert np.array_equal(feats, conv_pool_output(net, x))


def test_pool_convention_takes_the_last_pool():
    net = two_pool_net()
    x, _ = image_data(rng, 4)
    feats, _ = run_tap(net, "penultimate-pool", x)
    with torch.no_grad():
        expect = net[:5](torch.as_tensor(x)).reshape(4, -1).numpy()
    assert feats.shape == (4, 20)
    assert np.array_equal(feats, expect)


def test_pool_convention_needs_a_pool():
    x = rng.normal(size=(3, 8)).astype(np.float32)
    with pytest.raises(LayerNotFound, match="pool"):
        run_tap(mlp_net(), "penultimate-pool", x)


def test_cls_convention_takes_position_zero_by_default():
    net = token_net(0)
    x, _ = token_data(rng, 6)
    feats, _ = run_tap(net, "cls-token", x)
    assert np.array_equal(feats, token_hidden(net, x, 0))


def test_cls_position_override_reaches_the_last_token():
    net = token_net(1)
    x, _ = token_data(rng, 6)
    feats, _ = run_tap(net, "cls-token", x, cls_position=-1)
    assert np.array_equal(feats, token_hidden(net, x, -1))


def test_cls_position_outside_sequence_fails():
    x, _ = token_data(rng, 4, length=5)
    with pytest.raises(SelectorAmbiguous, match="position"):
        run_tap(token_net(), "cls-token", x, cls_position=9)


def test_cls_convention_needs_sequence_activations():
    x, _ = image_data(rng, 3)
    with pytest.raises(LayerNotFound, match="sequence"):
        run_tap(conv_net(), "cls-token", x)


class _Recycler(nn.Module):
    """Runs one pool module twice per forward pass."""

    def __init__(self):
        super().__init__()
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.head = nn.Linear(2, N_CLASSES)

    def forward(self, x):
        a = self.pool(x)
        b = self.pool(torch.relu(x))
        return self.head(torch.cat([a, b], dim=1).flatten(1))


def test_module_firing_twice_is_ambiguous():
    x, _ = image_data(rng, 3)
    with pytest.raises(SelectorAmbiguous, match="fired"):
        run_tap(_Recycler().eval(), "penultimate-pool", x)


def test_module_firing_twice_is_ambiguous_for_named_layers_too():
    x, _ = image_data(rng, 3)
    with pytest.raises(SelectorAmbiguous, match="2 tensors"):
        run_tap(_Recycler().eval(), "pool", x)


class _PairBody(nn.Module):
    def __init__(self):
        super().__init__()
        self.lin = nn.Linear(8, 4)

    def forward(self, x):
        h = self.lin(x)
        return h, h.sum()


class _PairNet(nn.Module):
    """The tapped module returns (tensor, extra); the tensor should win."""

    def __init__(self):
        super().__init__()
        self.body = _PairBody()
        self.head = nn.Linear(4, N_CLASSES)

    def forward(self, x):
        h, _ = self.body(x)
        return self.head(h)


def test_tuple_output_yields_its_leading_tensor():
    net = _PairNet().eval()
    x = rng.normal(size=(5, 8)).astype(np.float32)
    feats, _ = run_tap(net, "body", x)
    with torch.no_grad():
        assert np.array_equal(feats, net.body.lin(torch.as_tensor(x)).numpy())


class _DictBody(nn.Module):
    def forward(self, x):
        return {"hidden": x}


class _DictNet(nn.Module):
    def __init__(self):
        super().__init__()
        self.body = _DictBody()
        self.head = nn.Linear(8, N_CLASSES)

    def forward(self, x):
        return self.head(self.body(x)["hidden"])


def test_dict_output_is_not_a_feature_tensor():
    x = rng.normal(size=(4, 8)).astype(np.float32)
    with pytest.raises(SelectorAmbiguous, match="dict"):
        run_tap(_DictNet().eval(), "body", x)


class _BatchPooler(nn.Module):
    def forward(self, x):
        return x.mean(dim=0)


class _BatchPoolNet(nn.Module):
    """The tapped module collapses the batch axis, losing per-input rows."""

    def __init__(self):
        super().__init__()
        self.body = _BatchPooler()
        self.head = nn.Linear(8, N_CLASSES)

    def forward(self, x):
        self.body(x)
        return self.head(x)


def test_features_must_keep_one_row_per_input():
    x = rng.normal(size=(4, 8)).astype(np.float32)
    with pytest.raises(SelectorAmbiguous, match="leading"):
        run_tap(_BatchPoolNet().eval(), "body", x)


class _WrappedOutput(nn.Module):
    """Returns an object carrying .logits, the way transformer stacks do."""

    def __init__(self):
        super().__init__()
        self.body = nn.Linear(8, 4)
        self.head = nn.Linear(4, N_CLASSES)

    def forward(self, x):
        from types import SimpleNamespace

        return SimpleNamespace(logits=self.head(self.body(x)))


def test_logits_attribute_is_understood():
    net = _WrappedOutput().eval()
    x = rng.normal(size=(5, 8)).astype(np.float32)
    _, logits = run_tap(net, "body", x)
    assert logits.shape == (5, N_CLASSES)


class _NoLogits(nn.Module):
    def __init__(self):
        super().__init__()
        self.body = nn.Linear(8, 4)

    def forward(self, x):
        return {"scores": self.body(x)}


def test_unrecognizable_model_output_fails():
    x = rng.normal(size=(5, 8)).astype(np.float32)
    with pytest.raises(DataFormatError, match="output"):
        run_tap(_NoLogits().eval(), "body", x)

"""Autograd cross-check: central finite differences in float64 must agree with
backpropagated gradients on small instances of every trainable module."""

import numpy as np
import pytest
import torch

from hiresdiar import AamSoftmaxHead, HeeModel, ModelConfig
from hiresdiar.model import EnhancerBlock, FeatureMapExtractor

TOLERANCE = 1e-4
STEP = 1e-5


def _perturb(module, seed):
    """Move all parameters off their init so no gradient is structurally zero."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.add_(0.1 * torch.randn(p.shape, generator=gen, dtype=p.dtype))


def max_relative_error(module, loss_fn, seed, coords_per_param=20):
    """Largest relative gap between autograd and central differences over a
    random subset of coordinates of every parameter tensor."""
    module.zero_grad()
    loss_fn().backward()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _, param in sorted(module.named_parameters()):
        grad = param.grad.detach().reshape(-1)
        flat = param.data.reshape(-1)
        picks = rng.choice(flat.numel(), size=min(coords_per_param, flat.numel()), replace=False)
        for i in picks:
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + STEP
                up = loss_fn().item()
                flat[i] = orig - STEP
                down = loss_fn().item()
                flat[i] = orig
            numeric = (up - down) / (2.0 * STEP)
            analytic = grad[i].item()
            denom = max(abs(numeric), abs(analytic), 1e-5)
            worst = max(worst, abs(numeric - analytic) / denom)
    return worst


class TestFiniteDifferenceGradients:
    def test_feature_map_extractor(self):
        torch.manual_seed(20)
        net = FeatureMapExtractor(ModelConfig(n_mels=8, d_model=8, n_heads=2)).double()
        _perturb(net, 21)
        x = torch.randn(1, 16, 8, dtype=torch.float64)
        w = torch.randn(1, 2, 8, dtype=torch.float64)
        err = max_relative_error(net, lambda: (net(x) * w).mean(), seed=22)
        assert err <= TOLERANCE, f"feature-map extractor FD mismatch: {err:.3e}"

    def test_enhancer_block(self):
        torch.manual_seed(23)
        block = EnhancerBlock(d_model=8, n_heads=2, expansion=4).double()
        _perturb(block, 24)
        x = torch.randn(1, 5, 8, dtype=torch.float64)
        w = torch.randn(1, 5, 8, dtype=torch.float64)
        err = max_relative_error(block, lambda: (block(x) * w).mean(), seed=25)
        assert err <= TOLERANCE, f"enhancer block FD mismatch: {err:.3e}"

    def test_margin_head(self):
        torch.manual_seed(26)
        head = AamSoftmaxHead(8, 3, scale=30.0, margin=0.15).double()
        _perturb(head, 27)
        emb = torch.randn(4, 8, dtype=torch.float64)
        labels = torch.tensor([0, 1, 2, 1])
        err = max_relative_error(head, lambda: head(emb, labels), seed=28)
        assert err <= TOLERANCE, f"margin head FD mismatch: {err:.3e}"

    def test_full_model_loss(self):
        torch.manual_seed(29)
        model = HeeModel(
            ModelConfig(n_mels=8, d_model=8, n_enhancer_blocks=1, n_heads=2, n_classes=3)
        ).double()
        _perturb(model, 30)
        x = torch.randn(1, 16, 8, dtype=torch.float64)
        labels = torch.tensor([0, 2])

        def loss_fn():
            emb = model(x).reshape(-1, 8)
            return model.head(emb, labels)

        err = max_relative_error(model, loss_fn, seed=31, coords_per_param=10)
        assert err <= TOLERANCE, f"end-to-end FD mismatch: {err:.3e}"

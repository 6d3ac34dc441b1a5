"""Composite spiking blocks: token and channel mixers, SPE cell, patch partition, head.

All blocks take time-major stacks [T*B, C, H, W] and exchange real-valued
carriers (BN-sum tensors). A block applies its own entry LIF to the carrier it
receives, so every weighted op below consumes spikes; the only exception is
the patch partition, which sees the raw image.
"""
from __future__ import annotations

import numpy as np

from .config import SkipFlags
from .layers import BatchNorm, Conv2d, Linear, Projection
from .neuron import LifParams, LifSite
from .tensor import ShapeError, Tensor, concat_channels, mean, repeat_leading, reshape, scale, sum


class NonBinaryInputError(ValueError):
    pass


def _require_binary(x: Tensor, where: str) -> None:
    if not np.all((x.data == 0.0) | (x.data == 1.0)):
        raise NonBinaryInputError(f"{where}: expected a binary spike tensor")


class Block:
    """Shared plumbing: projections, LIF sites and their enumeration."""

    def projections(self) -> list[tuple[str, Projection]]:
        return [(k, v) for k, v in vars(self).items() if isinstance(v, Projection)]

    def sites(self) -> list[LifSite]:
        return [v for v in vars(self).values() if isinstance(v, LifSite)]

    def parameters(self):
        return [p for _, proj in self.projections() for p in proj.parameters()]

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for _, proj in self.projections():
            out.update(proj.buffers())
        return out

    def fold(self, dtype=np.float32) -> None:
        for key, proj in self.projections():
            setattr(self, key, proj.fold(dtype))

    @property
    def folded(self) -> bool:
        return all(proj.folded for _, proj in self.projections())


class TokenBlock(Block):
    """Axial token mixing: height FC and width FC branches fused by a C x 3C FC."""

    def __init__(self, channels: int, height: int, width: int, lif: LifParams, name: str,
                 rng: np.random.Generator):
        self.name = name
        self.channels, self.height, self.width = channels, height, width
        self.entry = LifSite(f"{name}.entry", lif)
        self.w_h = Projection(Linear(height, height, axis=2, name=f"{name}.w_h", rng=rng),
                              BatchNorm(height, axis=2, name=f"{name}.bn_h"))
        self.w_w = Projection(Linear(width, width, axis=3, name=f"{name}.w_w", rng=rng),
                              BatchNorm(width, axis=3, name=f"{name}.bn_w"))
        self.lif_h = LifSite(f"{name}.lif_h", lif)
        self.lif_w = LifSite(f"{name}.lif_w", lif)
        self.w_f = Projection(Linear(3 * channels, channels, axis=1, name=f"{name}.w_f", rng=rng),
                              BatchNorm(channels, axis=1, name=f"{name}.bn_f"))

    def __call__(self, x: Tensor, anchor: Tensor | None, T: int, skips: SkipFlags,
                 spikes: Tensor | None = None, prev: Tensor | None = None, first: bool = False) -> Tensor:
        if x.shape[1:] != (self.channels, self.height, self.width):
            raise ShapeError(f"{self.name}: expected [N x {self.channels} x {self.height} x {self.width}], "
                             f"got {x.shape}")
        inp = spikes if spikes is not None else self.entry(x, T)
        u_h = self.w_h(inp)
        u_w = self.w_w(inp)
        out = self.w_f(concat_channels([self.lif_h(u_h, T), self.lif_w(u_w, T), inp]))
        if anchor is not None and (skips.pt or first):
            out = out + anchor
        if prev is not None and skips.ct:
            out = out + prev
        return out


class ChannelBlock(Block):
    """Channel MLP: C -> alpha*C -> C, each FC followed by BN, spiking in between."""

    def __init__(self, channels: int, alpha: int, lif: LifParams, name: str, rng: np.random.Generator):
        self.name = name
        self.channels = channels
        hidden = alpha * channels
        self.entry = LifSite(f"{name}.entry", lif)
        self.w_c1 = Projection(Linear(channels, hidden, axis=1, name=f"{name}.w_c1", rng=rng),
                               BatchNorm(hidden, axis=1, name=f"{name}.bn_c1"))
        self.hidden = LifSite(f"{name}.hidden", lif)
        self.w_c2 = Projection(Linear(hidden, channels, axis=1, name=f"{name}.w_c2", rng=rng),
                               BatchNorm(channels, axis=1, name=f"{name}.bn_c2"))

    def __call__(self, x: Tensor, anchor: Tensor | None, T: int, skips: SkipFlags) -> Tensor:
        if x.shape[1] != self.channels:
            raise ShapeError(f"{self.name}: expected {self.channels} channels, got {x.shape}")
        h = self.hidden(self.w_c1(self.entry(x, T)), T)
        out = self.w_c2(h)
        if skips.tc:
            out = out + x
        if anchor is not None and skips.pc:
            out = out + anchor
        return out


class SpeCell(Block):
    """Three-node spiking patch encoding cell; halves H and W.

    Every node convolves the incoming spikes (3x3, stride 2). Edges 1->2 and
    2->3 are 3x3 stride-1 convs on node spikes; edge 1->3 adds node 1's BN
    state. Output spikes and anchor are 3-way channel concatenations.
    """

    def __init__(self, in_channels: int, out_channels: int, lif: LifParams, name: str,
                 rng: np.random.Generator):
        if out_channels % 3:
            raise ValueError(f"{name}: SPE output channels {out_channels} not divisible by 3")
        self.name = name
        self.in_channels, self.out_channels = in_channels, out_channels
        node = out_channels // 3

        def proj(tag, cin, stride):
            return Projection(Conv2d(cin, node, 3, stride=stride, padding=1, name=f"{name}.{tag}", rng=rng),
                              BatchNorm(node, axis=1, name=f"{name}.{tag}_bn"))

        self.in1 = proj("in1", in_channels, 2)
        self.in2 = proj("in2", in_channels, 2)
        self.in3 = proj("in3", in_channels, 2)
        self.e12 = proj("e12", node, 1)
        self.e23 = proj("e23", node, 1)
        self.node1 = LifSite(f"{name}.node1", lif)
        self.node2 = LifSite(f"{name}.node2", lif)
        self.node3 = LifSite(f"{name}.node3", lif)

    def __call__(self, spikes_in: Tensor, T: int, check_binary: bool = True) -> tuple[Tensor, Tensor]:
        if spikes_in.shape[1] != self.in_channels:
            raise ShapeError(f"{self.name}: expected {self.in_channels} input channels, got {spikes_in.shape}")
        if check_binary:
            _require_binary(spikes_in, self.name)
        a1 = self.in1(spikes_in)
        y1 = self.node1(a1, T)
        a2 = self.in2(spikes_in) + self.e12(y1)
        y2 = self.node2(a2, T)
        a3 = self.in3(spikes_in) + self.e23(y2) + a1
        y3 = self.node3(a3, T)
        return concat_channels([y1, y2, y3]), concat_channels([a1, a2, a3])


class PatchPartition(Block):
    """Non-overlapping p x p patches projected to C1 channels (conv with kernel = stride = p)."""

    def __init__(self, in_channels: int, channels: int, patch_size: int, lif: LifParams, name: str,
                 rng: np.random.Generator):
        self.name = name
        self.patch_size = patch_size
        self.proj = Projection(Conv2d(in_channels, channels, patch_size, stride=patch_size,
                                      name=f"{name}.conv", rng=rng),
                               BatchNorm(channels, axis=1, name=f"{name}.bn"))
        self.site = LifSite(f"{name}.lif", lif)

    def anchor(self, image: Tensor) -> Tensor:
        """BN state of the patch projection for one time step, [B x C1 x H/p x W/p]."""
        p = self.patch_size
        if image.ndim != 4 or image.shape[2] % p or image.shape[3] % p:
            raise ShapeError(f"{self.name}: image {image.shape} not divisible into {p}x{p} patches")
        return self.proj(image)

    def __call__(self, image: Tensor, T: int) -> tuple[Tensor, Tensor]:
        # the image is static, so one conv serves all T steps
        anchor = repeat_leading(self.anchor(image), T)
        return self.site(anchor, T), anchor


class Head(Block):
    """Spiking head: full HW x HW spatial FC + BN + LIF, spatial mean, linear classifier.

    With ``pool=False`` the classifier runs on per-position spikes and the
    spatial mean is applied afterwards (identical logits by linearity); this is
    the form whose classifier multiplies are all real x binary.
    """

    def __init__(self, channels: int, height: int, width: int, num_classes: int, lif: LifParams, name: str,
                 rng: np.random.Generator, pool: bool = True):
        self.name = name
        self.channels, self.height, self.width = channels, height, width
        self.pool = pool
        hw = height * width
        self.entry = LifSite(f"{name}.entry", lif)
        self.w_hw = Projection(Linear(hw, hw, axis=2, name=f"{name}.w_hw", rng=rng),
                               BatchNorm(hw, axis=2, name=f"{name}.bn_hw"))
        self.hidden = LifSite(f"{name}.hidden", lif)
        self.classifier = Linear(channels, num_classes, axis=1, name=f"{name}.classifier", rng=rng)
        # set by fold(): classifier weights pre-divided by HW for per-position accumulation
        self.classifier_per_position: Linear | None = None

    def parameters(self):
        return super().parameters() + self.classifier.parameters()

    def fold(self, dtype=np.float32) -> None:
        super().fold(dtype)
        w = self.classifier.weight.data
        self.classifier = Linear(w.shape[1], w.shape[0], axis=1, name=self.classifier.name,
                                 weight=w.astype(dtype))
        self.classifier_per_position = Linear(w.shape[1], w.shape[0], axis=1, name=f"{self.name}.classifier",
                                              weight=(w / (self.height * self.width)).astype(dtype))

    def __call__(self, x: Tensor, T: int) -> Tensor:
        n, c, h, w = x.shape
        if (c, h, w) != (self.channels, self.height, self.width):
            raise ShapeError(f"{self.name}: expected [N x {self.channels} x {self.height} x {self.width}], "
                             f"got {x.shape}")
        s = reshape(self.entry(x, T), (n, c, h * w))
        m = self.hidden(self.w_hw(s), T)
        if self.pool:
            return self.classifier(mean(m, axis=2))
        if self.classifier_per_position is not None:
            return sum(self.classifier_per_position(m), axis=2)
        return scale(sum(self.classifier(m), axis=2), 1.0 / (h * w))

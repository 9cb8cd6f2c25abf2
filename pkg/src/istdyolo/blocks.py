"""Composable network blocks with exact parameter accounting.

Module is a minimal container: attributes that are Tensors count as learnable
parameters, registered buffers hold non-learned state (batchnorm running
statistics), and nested Modules compose. param_count sums learnable scalars
only, so attention layers and pooling report zero.

Block zoo:
  CBS            conv (no bias) + batchnorm + silu
  ELAN           4-tap aggregation block (backbone)
  ELANW          6-tap aggregation block (heavier neck baseline)
  MP1            parallel maxpool / strided-conv downsampler
  GSConv         half-dense, half-depthwise conv with channel shuffle
  GSBottleneck   two stacked GSConvs
  VoVGSCSP       cross-stage partial block built from a GSBottleneck
  SimAM          parameter-free attention (wraps simam_apply)
  Identity       pass-through (ablation stand-in for SimAM)
"""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from istdyolo import tensor as T
from istdyolo.simam import SimamConfig, simam_apply


class Module:
    """Base container: tracks parameters, buffers, and children by attribute name."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "training", False)

    def __setattr__(self, name, value):
        if isinstance(value, T.Tensor):
            self._params[name] = value
            self._modules.pop(name, None)
        elif isinstance(value, Module):
            self._modules[name] = value
            self._params.pop(name, None)
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray):
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    # -- traversal ---------------------------------------------------------

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, T.Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, m in self._modules.items():
            yield from m.named_parameters(prefix + name + ".")

    def parameters(self) -> list[T.Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, b in self._buffers.items():
            yield prefix + name, b
        for name, m in self._modules.items():
            yield from m.named_buffers(prefix + name + ".")

    def param_count(self) -> int:
        return sum(p.size for _, p in self.named_parameters())

    def train(self, mode: bool = True):
        object.__setattr__(self, "training", mode)
        for m in self._modules.values():
            m.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def flops(self, h: int, w: int) -> tuple[int, int, int]:
        """(operation count, h_out, w_out) for one sample at spatial size h x w.

        Convolutions count 2 ops per multiply-accumulate; elementwise layers
        use the documented per-element costs. Indicative, not profiled.
        """
        raise NotImplementedError


class ModuleList(Module):
    def __init__(self, mods):
        super().__init__()
        self._list = list(mods)
        for i, m in enumerate(self._list):
            self._modules[str(i)] = m

    def __iter__(self):
        return iter(self._list)

    def __len__(self):
        return len(self._list)

    def __getitem__(self, i):
        return self._list[i]


def conv_macs(c_in: int, c_out: int, k: int, h_out: int, w_out: int, groups: int = 1) -> int:
    """Multiply-accumulates of one convolution at the given output size."""
    return c_in * c_out * k * k * h_out * w_out // groups


def _he_weight(rng: np.random.Generator, c_out: int, c_in: int, k: int) -> T.Tensor:
    fan_in = c_in * k * k
    w = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(c_out, c_in, k, k))
    return T.Tensor(w, requires_grad=True)


class Conv2d(Module):
    def __init__(self, c_in, c_out, k, s, p, rng, bias=False):
        super().__init__()
        if c_in < 1 or c_out < 1:
            raise ValueError(f"channel counts must be positive, got {c_in}/{c_out}")
        self.c_in, self.c_out, self.k, self.s, self.p = c_in, c_out, k, s, p
        self.weight = _he_weight(rng, c_out, c_in, k)
        self.bias = T.Tensor(np.zeros(c_out), requires_grad=True) if bias else None

    def forward(self, x):
        return T.conv2d(x, self.weight, self.bias, stride=self.s, padding=self.p)

    def flops(self, h, w):
        h_out = (h + 2 * self.p - self.k) // self.s + 1
        w_out = (w + 2 * self.p - self.k) // self.s + 1
        ops = 2 * conv_macs(self.c_in, self.c_out, self.k, h_out, w_out)
        if self.bias is not None:
            ops += self.c_out * h_out * w_out
        return ops, h_out, w_out


class DepthwiseConv2d(Module):
    def __init__(self, c, k, s, p, rng):
        super().__init__()
        self.c, self.k, self.s, self.p = c, k, s, p
        fan_in = k * k
        w = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(c, 1, k, k))
        self.weight = T.Tensor(w, requires_grad=True)

    def forward(self, x):
        return T.depthwise_conv2d(x, self.weight, stride=self.s, padding=self.p)

    def flops(self, h, w):
        h_out = (h + 2 * self.p - self.k) // self.s + 1
        w_out = (w + 2 * self.p - self.k) // self.s + 1
        return 2 * conv_macs(self.c, self.c, self.k, h_out, w_out, groups=self.c), h_out, w_out


class BatchNorm2d(Module):
    def __init__(self, c, eps=1e-5, momentum=0.1):
        super().__init__()
        self.c, self.eps, self.momentum = c, eps, momentum
        self.gamma = T.Tensor(np.ones(c), requires_grad=True)
        self.beta = T.Tensor(np.zeros(c), requires_grad=True)
        self.register_buffer("running_mean", np.zeros(c))
        self.register_buffer("running_var", np.ones(c))

    def forward(self, x):
        return T.batchnorm2d(
            x,
            self.gamma,
            self.beta,
            self.running_mean,
            self.running_var,
            eps=self.eps,
            training=self.training,
            momentum=self.momentum,
        )

    def flops(self, h, w):
        return 2 * self.c * h * w, h, w


class SiLU(Module):
    def forward(self, x):
        return T.silu(x)

    def flops(self, h, w):
        return 0, h, w  # folded into the convention: activations not counted


class CBS(Module):
    """conv + batchnorm + silu; padding k//2 keeps 'same' geometry for odd k."""

    def __init__(self, c_in, c_out, k, s, rng):
        super().__init__()
        self.conv = Conv2d(c_in, c_out, k, s, k // 2, rng, bias=False)
        self.bn = BatchNorm2d(c_out)
        self.act = SiLU()

    def forward(self, x):
        return self.act(self.bn(self.conv(x)))

    def flops(self, h, w):
        f1, h, w = self.conv.flops(h, w)
        f2, h, w = self.bn.flops(h, w)
        return f1 + f2, h, w


class MaxPool2d(Module):
    def __init__(self, k, s):
        super().__init__()
        self.k, self.s = k, s

    def forward(self, x):
        return T.maxpool2d(x, self.k, self.s)

    def flops(self, h, w):
        h_out = (h - self.k) // self.s + 1
        w_out = (w - self.k) // self.s + 1
        return 0, h_out, w_out


class Upsample2x(Module):
    def forward(self, x):
        return T.upsample_nearest2x(x)

    def flops(self, h, w):
        return 0, 2 * h, 2 * w


class Identity(Module):
    def forward(self, x):
        return x

    def flops(self, h, w):
        return 0, h, w


class SimAM(Module):
    """Energy attention layer; contributes zero learnable parameters."""

    def __init__(self, e_lambda: float = 1e-4):
        super().__init__()
        self.cfg = SimamConfig(e_lambda=e_lambda)

    def forward(self, x):
        return simam_apply(x, self.cfg)

    def flops(self, h, w):
        return 0, h, w


class ELAN(Module):
    """Aggregation block: two 1x1 stems, a chain of four 3x3 convs on the
    second stem tapped after convs 2 and 4, concat of the four taps, 1x1 fuse.
    Requires c_out == 4 * hidden so the concat width matches the fuse input.
    """

    def __init__(self, c_in, hidden, c_out, rng):
        super().__init__()
        if c_out != 4 * hidden:
            raise ValueError(f"aggregation width mismatch: c_out={c_out} must equal 4*hidden={4 * hidden}")
        self.stem_a = CBS(c_in, hidden, 1, 1, rng)
        self.stem_b = CBS(c_in, hidden, 1, 1, rng)
        self.chain = ModuleList([CBS(hidden, hidden, 3, 1, rng) for _ in range(4)])
        self.fuse = CBS(4 * hidden, c_out, 1, 1, rng)

    def forward(self, x):
        a = self.stem_a(x)
        b = self.stem_b(x)
        c1 = self.chain[0](b)
        c2 = self.chain[1](c1)
        c3 = self.chain[2](c2)
        c4 = self.chain[3](c3)
        return self.fuse(T.concat_channels([a, b, c2, c4]))

    def flops(self, h, w):
        total = 0
        for m in (self.stem_a, self.stem_b, *self.chain, self.fuse):
            f, _, _ = m.flops(h, w)
            total += f
        return total, h, w


class ELANW(Module):
    """Wider aggregation used as the heavier neck baseline: two 1x1 stems at
    2*hidden, a chain 2*hidden -> hidden -> hidden -> hidden -> hidden tapped
    after every chain conv (6 concatenated branches), 1x1 fuse. The chain
    widths follow the common neck convention; only relative size claims
    against VoVGSCSP are meaningful.
    """

    def __init__(self, c_in, hidden, c_out, rng):
        super().__init__()
        if c_out != 4 * hidden:
            raise ValueError(f"aggregation width mismatch: c_out={c_out} must equal 4*hidden={4 * hidden}")
        self.stem_a = CBS(c_in, 2 * hidden, 1, 1, rng)
        self.stem_b = CBS(c_in, 2 * hidden, 1, 1, rng)
        chain = [CBS(2 * hidden, hidden, 3, 1, rng)]
        chain += [CBS(hidden, hidden, 3, 1, rng) for _ in range(3)]
        self.chain = ModuleList(chain)
        self.fuse = CBS(8 * hidden, c_out, 1, 1, rng)

    def forward(self, x):
        a = self.stem_a(x)
        b = self.stem_b(x)
        taps = [a, b]
        t = b
        for m in self.chain:
            t = m(t)
            taps.append(t)
        return self.fuse(T.concat_channels(taps))

    def flops(self, h, w):
        total = 0
        for m in (self.stem_a, self.stem_b, *self.chain, self.fuse):
            f, _, _ = m.flops(h, w)
            total += f
        return total, h, w


class MP1(Module):
    """Downsampler: maxpool branch and strided-conv branch, each to c/2
    channels, concatenated back to c channels at half resolution."""

    def __init__(self, c, rng):
        super().__init__()
        if c % 2 != 0:
            raise ValueError(f"downsampler needs an even channel count, got {c}")
        half = c // 2
        self.pool = MaxPool2d(2, 2)
        self.pool_proj = CBS(c, half, 1, 1, rng)
        self.conv_proj = CBS(c, half, 1, 1, rng)
        self.conv_down = CBS(half, half, 3, 2, rng)

    def forward(self, x):
        a = self.pool_proj(self.pool(x))
        b = self.conv_down(self.conv_proj(x))
        return T.concat_channels([a, b])

    def flops(self, h, w):
        f1, ph, pw = self.pool.flops(h, w)
        f2, _, _ = self.pool_proj.flops(ph, pw)
        f3, _, _ = self.conv_proj.flops(h, w)
        f4, h2, w2 = self.conv_down.flops(h, w)
        return f1 + f2 + f3 + f4, h2, w2


class GSConv(Module):
    """Half the output channels from a dense conv, half from a 3x3 depthwise
    pass over them, interleaved by a 2-group channel shuffle."""

    def __init__(self, c_in, c_out, k, s, rng):
        super().__init__()
        if c_out % 2 != 0:
            raise ValueError(f"shuffled conv needs an even output width, got {c_out}")
        half = c_out // 2
        self.dense = CBS(c_in, half, k, s, rng)
        self.dw = DepthwiseConv2d(half, 3, 1, 1, rng)
        self.dw_bn = BatchNorm2d(half)
        self.act = SiLU()

    def forward(self, x):
        a = self.dense(x)
        b = self.act(self.dw_bn(self.dw(a)))
        return T.channel_shuffle(T.concat_channels([a, b]), groups=2)

    def flops(self, h, w):
        f1, h, w = self.dense.flops(h, w)
        f2, _, _ = self.dw.flops(h, w)
        f3, _, _ = self.dw_bn.flops(h, w)
        return f1 + f2 + f3, h, w


class GSBottleneck(Module):
    def __init__(self, c_in, c_out, rng):
        super().__init__()
        self.g1 = GSConv(c_in, c_out, 1, 1, rng)
        self.g2 = GSConv(c_out, c_out, 3, 1, rng)

    def forward(self, x):
        return self.g2(self.g1(x))

    def flops(self, h, w):
        f1, h, w = self.g1.flops(h, w)
        f2, h, w = self.g2.flops(h, w)
        return f1 + f2, h, w


class VoVGSCSP(Module):
    """Cross-stage partial aggregation: a shuffled-bottleneck branch and a
    plain 1x1 branch, concatenated and fused. Cheaper than ELANW at equal
    widths, which is the point of using it in the neck."""

    def __init__(self, c_in, c_out, rng):
        super().__init__()
        if c_out % 2 != 0:
            raise ValueError(f"partial block needs an even output width, got {c_out}")
        half = c_out // 2
        self.main = CBS(c_in, half, 1, 1, rng)
        self.bottleneck = GSBottleneck(half, half, rng)
        self.shortcut = CBS(c_in, half, 1, 1, rng)
        self.fuse = CBS(c_out, c_out, 1, 1, rng)

    def forward(self, x):
        a = self.bottleneck(self.main(x))
        b = self.shortcut(x)
        return self.fuse(T.concat_channels([a, b]))

    def flops(self, h, w):
        total = 0
        for m in (self.main, self.bottleneck, self.shortcut, self.fuse):
            f, _, _ = m.flops(h, w)
            total += f
        return total, h, w

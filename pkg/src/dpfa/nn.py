"""Parameter containers: a minimal Module, Linear and MLP."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Walks attributes in insertion order to find parameters."""

    def named_parameters(self, prefix=""):
        for name, val in vars(self).items():
            if isinstance(val, Tensor):
                if val.requires_grad:
                    yield prefix + name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{name}.")
            elif isinstance(val, (list, tuple)):
                for i, v in enumerate(val):
                    if isinstance(v, Module):
                        yield from v.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def zero_grad(self):
        for p in self.parameters().values():
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_parameters()}

    def load_arrays(self, arrays):
        params = self.parameters()
        # shapes of shared names first: a wrong architecture names its first bad tensor
        for k, p in params.items():
            if k in arrays and np.shape(arrays[k]) != p.shape:
                raise ValueError(f"shape mismatch for '{k}': checkpoint {np.shape(arrays[k])}, model {p.shape}")
        missing = [k for k in params if k not in arrays]
        if missing:
            raise KeyError(f"missing parameter arrays: {missing[:5]}")
        for k, p in params.items():
            p.data = np.ascontiguousarray(arrays[k], dtype=p.dtype)

    def num_parameters(self):
        return sum(p.data.size for p in self.parameters().values())


class Linear(Module):
    def __init__(self, d_in, d_out, rng, dtype=np.float32, gain=1.0):
        bound = gain * np.sqrt(3.0 / d_in)
        self.W = Tensor(rng.uniform(-bound, bound, size=(d_in, d_out)), requires_grad=True, dtype=dtype)
        self.b = Tensor(np.zeros(d_out), requires_grad=True, dtype=dtype)

    def __call__(self, x):
        return T.linear(x, self.W, self.b)


class MLP(Module):
    """Stack of linear maps with leaky-ReLU between them.

    ``widths = [d_in, h1, ..., d_out]``.  The activation follows every hidden
    map, and also the last one when ``activate_last``.  With ``standardize``
    each activated map is preceded by a per-channel affine standardisation.
    """

    def __init__(self, widths, rng, slope=0.2, activate_last=False, standardize=False, dtype=np.float32):
        widths = list(widths)
        if len(widths) < 2:
            raise ValueError("an MLP needs at least input and output widths")
        self.slope = slope
        self.activate_last = activate_last
        n = len(widths) - 1
        act_gain = np.sqrt(2.0 / (1.0 + slope**2))
        self.layers = []
        self.norms = []
        for i in range(n):
            activated = i < n - 1 or activate_last
            self.layers.append(Linear(widths[i], widths[i + 1], rng, dtype, act_gain if activated else 1.0))
            if standardize and activated:
                self.norms.append(_Affine(widths[i + 1], dtype))
            else:
                self.norms.append(None)

    @property
    def d_in(self):
        return self.layers[0].W.shape[0]

    @property
    def d_out(self):
        return self.layers[-1].W.shape[1]

    def __call__(self, x):
        n = len(self.layers)
        for i, (lin, norm) in enumerate(zip(self.layers, self.norms)):
            x = lin(x)
            if i < n - 1 or self.activate_last:
                if norm is not None:
                    x = T.channel_standardize(x, norm.gamma, norm.beta)
                x = T.leaky_relu(x, self.slope)
        return x


class _Affine(Module):
    def __init__(self, width, dtype):
        self.gamma = Tensor(np.ones(width), requires_grad=True, dtype=dtype)
        self.beta = Tensor(np.zeros(width), requires_grad=True, dtype=dtype)

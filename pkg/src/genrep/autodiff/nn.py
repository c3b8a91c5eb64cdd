"""Minimal module system: parameter containers and the standard layers."""

import numpy as np

from . import functional as F
from .tensor import Tensor


class Module:
    """Base container.

    Parameters are :class:`Tensor` attributes with ``requires_grad`` set,
    sub-modules are attributes (or lists of attributes) that are modules.
    Traversal follows attribute assignment order, which keeps flattened
    state vectors stable.
    """

    training = True

    def _children(self):
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and getattr(value, "name", None) == "param":
                yield prefix + name, value
        for name, child in self._children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def buffers(self):
        out = []
        for name, value in vars(self).items():
            if name.startswith("running_") and isinstance(value, np.ndarray):
                out.append(value)
        for _, child in self._children():
            out.extend(child.buffers())
        return out

    def train(self, mode=True):
        self.training = mode
        for _, child in self._children():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def requires_grad_(self, flag):
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def n_params(self):
        return int(np.sum([p.size for p in self.parameters()], dtype=np.int64))

    def state_vector(self):
        """Parameters then buffers, flattened in traversal order."""
        parts = [p.data.ravel() for p in self.parameters()] + [b.ravel() for b in self.buffers()]
        return np.concatenate(parts) if parts else np.zeros(0)

    def load_state_vector(self, vec):
        vec = np.asarray(vec, dtype=np.float64).ravel()
        targets = [p.data for p in self.parameters()] + self.buffers()
        total = int(np.sum([t.size for t in targets], dtype=np.int64))
        if vec.size != total:
            raise ValueError(f"state vector has {vec.size} values, module expects {total}")
        pos = 0
        for t in targets:
            t[...] = vec[pos:pos + t.size].reshape(t.shape)
            pos += t.size
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def parameter(data):
    t = Tensor(data, requires_grad=True)
    t.name = "param"
    return t


class Conv2d(Module):
    def __init__(self, c_in, c_out, k, rng, gain=np.sqrt(2.0)):
        std = gain / np.sqrt(c_in * k * k)
        self.weight = parameter(rng.normal((c_out, c_in, k, k)) * std)
        self.bias = parameter(np.zeros(c_out))

    def forward(self, x):
        return F.conv2d(x, self.weight, self.bias)


class Linear(Module):
    def __init__(self, n_in, n_out, rng, gain=1.0):
        self.weight = parameter(rng.normal((n_out, n_in)) * gain / np.sqrt(n_in))
        self.bias = parameter(np.zeros(n_out))

    def forward(self, x):
        return F.linear(x, self.weight, self.bias)


class BatchNorm2d(Module):
    def __init__(self, channels, momentum=0.9, eps=1e-5):
        self.gamma = parameter(np.ones(channels))
        self.beta = parameter(np.zeros(channels))
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps

    def forward(self, x):
        return F.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                            self.training, self.momentum, self.eps)

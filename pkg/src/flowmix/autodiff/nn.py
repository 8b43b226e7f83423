"""Parameter containers and the few layers the models need."""
from __future__ import annotations

from collections import OrderedDict

import numpy as np

from ..exceptions import BatchSizeError, DimensionError
from .tensor import Tensor, batchnorm1d, matmul, swish


class Parameter(Tensor):
    """A leaf tensor that always requires gradients."""

    def __init__(self, data, name=None):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True, name=name)


class Module:
    """Base class: tracks parameters, buffers and sub-modules in insertion order.

    Attribute assignment registers :class:`Parameter`, :class:`Module` and
    lists of modules automatically, so ``named_parameters`` yields a stable,
    deterministic ordering used by checkpoints and optimizers.
    """

    def __init__(self):
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_modules", OrderedDict())
        object.__setattr__(self, "_buffers", OrderedDict())
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
            value = ModuleList(value)
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name, value):
        arr = np.array(value, dtype=np.float64)
        self._buffers[name] = arr
        object.__setattr__(self, name, arr)

    def set_buffer(self, name, value):
        arr = np.array(value, dtype=np.float64)
        if arr.shape != self._buffers[name].shape:
            raise DimensionError(f"buffer {name}: shape {arr.shape} != {self._buffers[name].shape}")
        self._buffers[name] = arr
        object.__setattr__(self, name, arr)

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield prefix + name, p
        for name, mod in self._modules.items():
            yield from mod.named_parameters(prefix + name + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        for name, b in self._buffers.items():
            yield prefix + name, b
        for name, mod in self._modules.items():
            yield from mod.named_buffers(prefix + name + ".")

    def modules(self):
        yield self
        for mod in self._modules.values():
            yield from mod.modules()

    def num_parameters(self):
        return int(sum(p.size for p in self.parameters()))

    def train(self, mode=True):
        for mod in self.modules():
            object.__setattr__(mod, "training", bool(mode))
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self):
        """Ordered ``name -> ndarray`` of parameters followed by buffers."""
        state = OrderedDict()
        for name, p in self.named_parameters():
            state[name] = p.data.copy()
        for name, b in self.named_buffers():
            state["buffer:" + name] = b.copy()
        return state

    def load_state_dict(self, state):
        params = dict(self.named_parameters())
        buffers = {}
        for mod_name, mod in self._iter_named_modules(""):
            for bname in mod._buffers:
                buffers[mod_name + bname] = (mod, bname)
        expected = set(params) | {"buffer:" + k for k in buffers}
        if set(state) != expected:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise DimensionError(f"state mismatch; missing={missing[:5]} unexpected={extra[:5]}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise DimensionError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()
        for name, (mod, bname) in buffers.items():
            mod.set_buffer(bname, state["buffer:" + name])

    def _iter_named_modules(self, prefix):
        yield prefix, self
        for name, mod in self._modules.items():
            yield from mod._iter_named_modules(prefix + name + ".")

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._items = []
        for mod in modules:
            self.append(mod)

    def append(self, mod):
        self._modules[str(len(self._items))] = mod
        self._items.append(mod)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


class Linear(Module):
    """``y = x @ W + b`` with ``W`` of shape ``(in, out)``.

    Weights start uniform in ``±1/sqrt(in)``; ``zero_init`` zeroes both
    weight and bias (used for the last layer of coupling nets).
    """

    def __init__(self, n_in, n_out, rng, zero_init=False):
        super().__init__()
        self.n_in, self.n_out = n_in, n_out
        if zero_init:
            w = np.zeros((n_in, n_out))
            b = np.zeros(n_out)
        else:
            bound = 1.0 / np.sqrt(max(n_in, 1))
            w = rng.uniform(-bound, bound, size=(n_in, n_out))
            b = rng.uniform(-bound, bound, size=n_out)
        self.weight = Parameter(w)
        self.bias = Parameter(b)

    def forward(self, x):
        return matmul(x, self.weight) + self.bias


class BatchNorm1d(Module):
    """Batch normalization over every leading axis of a ``[..., F]`` input.

    In training mode the batch statistics normalize the input and update the
    running estimates (``momentum`` 0.1, unbiased variance); in eval mode, or
    when ``use_running=True`` is passed, the running estimates are used.
    """

    def __init__(self, n_features, momentum=0.1, eps=1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.gamma = Parameter(np.ones(n_features))
        self.beta = Parameter(np.zeros(n_features))
        self.register_buffer("running_mean", np.zeros(n_features))
        self.register_buffer("running_var", np.ones(n_features))

    def forward(self, x, use_running=False):
        if self.training and not use_running:
            n = int(np.prod(x.shape[:-1]))
            if n < 2:
                raise BatchSizeError(f"batchnorm in train mode needs >= 2 rows, got {n}")
            out, mu, var = batchnorm1d(x, self.gamma, self.beta, eps=self.eps)
            mom = self.momentum
            self.set_buffer("running_mean", (1 - mom) * self.running_mean + mom * mu)
            self.set_buffer("running_var", (1 - mom) * self.running_var + mom * var * n / (n - 1))
            return out
        out, _, _ = batchnorm1d(
            x, self.gamma, self.beta, mean=self.running_mean, var=self.running_var, eps=self.eps
        )
        return out


class Swish(Module):
    def forward(self, x):
        return swish(x)


def count_linear(n_in, n_out):
    return n_in * n_out + n_out


def to_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)

"""Parameter containers built on :mod:`artnet.tensor`."""
from __future__ import annotations

import numpy as np

from .tensor import Tensor, concat, layer_norm, take_rows


class Module:
    """Minimal parameter registry: attributes that are Tensors or Modules are collected."""

    training = True

    def named_parameters(self, prefix=""):
        out = {}
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            if isinstance(val, Tensor) and val.requires_grad:
                out[prefix + key] = val
            elif isinstance(val, Module):
                out.update(val.named_parameters(prefix + key + "."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{prefix}{key}.{i}."))
        return out

    def train(self, mode=True):
        self.training = mode
        for val in vars(self).values():
            if isinstance(val, Module):
                val.train(mode)
            elif isinstance(val, (list, tuple)):
                for item in val:
                    if isinstance(item, Module):
                        item.train(mode)
        return self

    def eval(self):
        return self.train(False)


def _param(arr, name=None):
    return Tensor(arr, requires_grad=True, name=name)


def xavier(rng, n_in, n_out):
    bound = np.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-bound, bound, size=(n_in, n_out))


class Linear(Module):
    def __init__(self, n_in, n_out, rng, bias=True):
        self.weight = _param(xavier(rng, n_in, n_out))
        self.bias = _param(np.zeros(n_out)) if bias else None

    def __call__(self, x):
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class Embedding(Module):
    def __init__(self, n, dim, rng, scale=0.1):
        self.table = _param(rng.normal(0.0, scale, size=(n, dim)))

    def __call__(self, ids):
        return take_rows(self.table, ids)


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5):
        self.gain = _param(np.ones(dim))
        self.bias = _param(np.zeros(dim))
        self.eps = eps

    def __call__(self, x):
        return layer_norm(x, self.gain, self.bias, self.eps)


class LSTM(Module):
    """Single-layer LSTM; ``mask`` (B, T) freezes the state on padded steps."""

    def __init__(self, n_in, n_hidden, rng):
        self.n_hidden = n_hidden
        self.gates = Linear(n_in + n_hidden, 4 * n_hidden, rng)
        # forget-gate bias of 1 keeps early gradients alive
        self.gates.bias.data[n_hidden:2 * n_hidden] = 1.0

    def __call__(self, xs, mask=None):
        """``xs``: (B, T, n_in) Tensor. Returns the final hidden state (B, n_hidden)."""
        b, t_len = xs.shape[0], xs.shape[1]
        hd = self.n_hidden
        h = Tensor(np.zeros((b, hd)))
        c = Tensor(np.zeros((b, hd)))
        for t in range(t_len):
            z = self.gates(concat([xs[:, t, :], h], axis=-1))
            i = z[:, :hd].sigmoid()
            f = z[:, hd:2 * hd].sigmoid()
            g = z[:, 2 * hd:3 * hd].tanh()
            o = z[:, 3 * hd:].sigmoid()
            c_new = f * c + i * g
            h_new = o * c_new.tanh()
            if mask is None:
                h, c = h_new, c_new
            else:
                m = np.asarray(mask[:, t], dtype=np.float64)[:, None]
                h = h_new * m + h * (1.0 - m)
                c = c_new * m + c * (1.0 - m)
        return h

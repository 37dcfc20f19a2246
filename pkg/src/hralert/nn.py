"""Parameter containers and the layers shared by every model."""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


@dataclass
class Context:
    """Forward-pass mode.  Dropout draws from ``rng`` only when ``training``."""

    training: bool = False
    rng: np.random.Generator | None = None

    def dropout(self, x, rate):
        return ad.dropout(x, rate, self.rng, self.training)


EVAL = Context()


class Module:
    """Ordered tree of named parameters.

    Names are dotted paths (``ffn.lin1.weight``); iteration order is insertion
    order, which fixes the checkpoint layout.
    """

    def __init__(self):
        self._params = {}
        self._children = {}

    def add_param(self, name, values):
        p = ad.parameter(values)
        self._params[name] = p
        return p

    def add_child(self, name, module):
        self._children[name] = module
        return module

    def named_parameters(self, prefix=""):
        out = [(prefix + name, p) for name, p in self._params.items()]
        for cname, child in self._children.items():
            out.extend(child.named_parameters(f"{prefix}{cname}."))
        return out

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self, prefix=""):
        return {name: p.values.copy() for name, p in self.named_parameters(prefix)}

    def load_state_dict(self, state, prefix=""):
        named = self.named_parameters(prefix)
        missing = [n for n, _ in named if n not in state]
        if missing:
            raise KeyError(f"state is missing parameters: {missing[:5]}")
        for name, p in named:
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise ad.ShapeError(f"{name}: stored shape {value.shape} != model shape {p.shape}")
            p.values = value.copy()
            p.zero_grad()


def embedding_init(rng, n, d):
    return rng.normal(0.0, 1.0 / np.sqrt(d), size=(n, d))


class Linear(Module):
    def __init__(self, d_in, d_out, rng, bias=True):
        super().__init__()
        bound = 1.0 / np.sqrt(d_in)
        self.weight = self.add_param("weight", rng.uniform(-bound, bound, size=(d_in, d_out)))
        self.bias = self.add_param("bias", np.zeros(d_out)) if bias else None

    def __call__(self, x):
        y = ad.matmul(x, self.weight)
        return y if self.bias is None else y + self.bias


class LayerNorm(Module):
    def __init__(self, d, eps=1e-5):
        super().__init__()
        self.eps = eps
        self.scale = self.add_param("scale", np.ones(d))
        self.shift = self.add_param("shift", np.zeros(d))

    def __call__(self, x):
        return ad.layer_norm(x, self.eps) * self.scale + self.shift


class MLP2(Module):
    """Linear -> LayerNorm -> ReLU -> Dropout -> Linear."""

    def __init__(self, d_in, d_hidden, d_out, rng, dropout=0.0):
        super().__init__()
        self.rate = dropout
        self.lin1 = self.add_child("lin1", Linear(d_in, d_hidden, rng))
        self.norm = self.add_child("norm", LayerNorm(d_hidden))
        self.lin2 = self.add_child("lin2", Linear(d_hidden, d_out, rng))

    def __call__(self, x, ctx=EVAL):
        return self.lin2(ctx.dropout(ad.relu(self.norm(self.lin1(x))), self.rate))


class MultiHeadAttention(Module):
    """Scaled dot-product attention over ``[..., L, d]`` inputs, no positions."""

    def __init__(self, d, heads, rng):
        super().__init__()
        if heads < 1 or d % heads:
            raise ValueError(f"model width {d} is not divisible by {heads} heads")
        self.d, self.heads = d, heads
        self.q_proj = self.add_child("q_proj", Linear(d, d, rng))
        self.k_proj = self.add_child("k_proj", Linear(d, d, rng))
        self.v_proj = self.add_child("v_proj", Linear(d, d, rng))
        self.out_proj = self.add_child("out_proj", Linear(d, d, rng))

    def _split(self, x):
        lead = x.shape[:-1]
        x = x.reshape(lead + (self.heads, self.d // self.heads))
        return x.swapaxes(-2, -3)  # [..., M, L, dh]

    def __call__(self, query, keys):
        q = self._split(self.q_proj(query))
        k = self._split(self.k_proj(keys))
        v = self._split(self.v_proj(keys))
        scale = 1.0 / np.sqrt(self.d // self.heads)
        weights = ad.softmax(ad.matmul(q, k.swapaxes(-1, -2)) * scale)
        mixed = ad.matmul(weights, v).swapaxes(-2, -3)  # [..., Lq, M, dh]
        return self.out_proj(mixed.reshape(mixed.shape[:-2] + (self.d,)))

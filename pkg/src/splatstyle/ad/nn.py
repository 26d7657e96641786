"""Small neural-net layer zoo on top of the tensor engine.

Modules hold Parameters (requires_grad tensors) and submodules; parameter
discovery walks attributes recursively, so state_dict keys are dotted
attribute paths. Initialization is fully determined by the rng handed to
each constructor.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Parameter(Tensor):
    def __init__(self, data, name: str = ""):
        super().__init__(np.asarray(data, dtype=np.float32), requires_grad=True, name=name)


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    x = rng.normal(0.0, std, size=shape)
    return np.clip(x, -2 * std, 2 * std).astype(np.float32)


class Module:
    def __init__(self):
        self.training = True

    # -- parameter plumbing ------------------------------------------------

    def named_parameters(self, prefix: str = ""):
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Parameter):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{name}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{name}.{i}", item

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True):
        self.training = mode
        for key, val in vars(self).items():
            if isinstance(val, Module):
                val.train(mode)
            elif isinstance(val, (list, tuple)):
                for item in val:
                    if isinstance(item, Module):
                        item.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def astype(self, dtype):
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise KeyError(f"state dict mismatch; missing={missing} unexpected={unexpected}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=p.data.dtype)
            if arr.shape != p.data.shape:
                raise KeyError(f"shape mismatch for {name}: {arr.shape} vs {p.data.shape}")
            p.data = arr.copy()
        return self


class Linear(Module):
    def __init__(self, rng, d_in: int, d_out: int, bias: bool = True):
        super().__init__()
        self.weight = Parameter(trunc_normal(rng, (d_in, d_out)))
        self.bias = Parameter(np.zeros(d_out, dtype=np.float32)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        if self.bias is not None:
            y = T.add(y, self.bias)
        return y


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.gain = Parameter(np.ones(dim, dtype=np.float32))
        self.bias = Parameter(np.zeros(dim, dtype=np.float32))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.add(T.mul(T.layernorm(x, self.eps), self.gain), self.bias)


class Mlp(Module):
    def __init__(self, rng, dim: int, hidden: int):
        super().__init__()
        self.fc1 = Linear(rng, dim, hidden)
        self.fc2 = Linear(rng, hidden, dim)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


class MultiheadAttention(Module):
    """Self- or cross-attention over (L, D) or (B, L, D) token tensors."""

    def __init__(self, rng, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.dim = dim
        self.q_proj = Linear(rng, dim, dim)
        self.k_proj = Linear(rng, dim, dim)
        self.v_proj = Linear(rng, dim, dim)
        self.out_proj = Linear(rng, dim, dim)

    def _split(self, x: Tensor) -> Tensor:
        h, dh = self.heads, self.dim // self.heads
        if x.ndim == 2:
            l = x.shape[0]
            return T.permute(T.reshape(x, (l, h, dh)), (1, 0, 2))
        b, l = x.shape[0], x.shape[1]
        return T.permute(T.reshape(x, (b, l, h, dh)), (0, 2, 1, 3))

    def _merge(self, x: Tensor) -> Tensor:
        if x.ndim == 3:
            h, l, dh = x.shape
            return T.reshape(T.permute(x, (1, 0, 2)), (l, h * dh))
        b, h, l, dh = x.shape
        return T.reshape(T.permute(x, (0, 2, 1, 3)), (b, l, h * dh))

    def __call__(self, x_q: Tensor, x_kv: Tensor | None = None) -> Tensor:
        if x_kv is None:
            x_kv = x_q
        q = self._split(self.q_proj(x_q))
        k = self._split(self.k_proj(x_kv))
        v = self._split(self.v_proj(x_kv))
        scale = 1.0 / math.sqrt(self.dim // self.heads)
        scores = T.mul(T.matmul(q, T.permute(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2))), scale)
        attn = T.softmax(scores, axis=-1)
        out = self._merge(T.matmul(attn, v))
        return self.out_proj(out)


class DropPath(Module):
    """Stochastic depth on a residual branch; identity in eval mode."""

    def __init__(self, rate: float):
        super().__init__()
        self.rate = rate

    def __call__(self, x: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        if not self.training or self.rate <= 0.0 or rng is None:
            return x
        if rng.random() < self.rate:
            return T.mul(x, 0.0)
        return T.mul(x, 1.0 / (1.0 - self.rate))


class TransformerBlock(Module):
    def __init__(self, rng, dim: int, heads: int, mlp_ratio: float = 4.0, drop_path: float = 0.0):
        super().__init__()
        self.ln1 = LayerNorm(dim)
        self.attn = MultiheadAttention(rng, dim, heads)
        self.ln2 = LayerNorm(dim)
        self.mlp = Mlp(rng, dim, int(dim * mlp_ratio))
        self.drop_path = DropPath(drop_path)

    def __call__(self, x: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        x = T.add(x, self.drop_path(self.attn(self.ln1(x)), rng))
        x = T.add(x, self.drop_path(self.mlp(self.ln2(x)), rng))
        return x


class TransformerStack(Module):
    def __init__(self, rng, dim: int, heads: int, layers: int, drop_path: float = 0.0):
        super().__init__()
        self.blocks = [TransformerBlock(rng, dim, heads, drop_path=drop_path) for _ in range(layers)]
        self.ln_out = LayerNorm(dim)

    def __call__(self, x: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        for blk in self.blocks:
            x = blk(x, rng)
        return self.ln_out(x)


class SinusoidalEmbed(Module):
    """Sinusoidal features of coordinates followed by a learned linear map."""

    def __init__(self, rng, in_dim: int, out_dim: int, n_freqs: int = 6):
        super().__init__()
        self.freqs = (2.0 ** np.arange(n_freqs)).astype(np.float32) * math.pi
        self.proj = Linear(rng, in_dim * n_freqs * 2, out_dim)
        self.in_dim = in_dim

    def features(self, coords: np.ndarray) -> np.ndarray:
        x = np.asarray(coords, dtype=np.float32)
        ang = x[..., :, None] * self.freqs  # (..., in_dim, n_freqs)
        feats = np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)
        return feats.reshape(x.shape[:-1] + (-1,))

    def __call__(self, coords: np.ndarray) -> Tensor:
        return self.proj(Tensor(self.features(coords)))

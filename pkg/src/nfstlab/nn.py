"""Numeric substrate: float64 tensors, explicit RNG, hand-written cells.

Everything trainable lives in a flat dict mapping parameter names to
float64 torch tensors, so the optimizer, gradient checks, clipping, and
checkpoints stay trivial.  Recurrent cells are written out gate by gate
(same equations and gate order as the stock torch cells) because the
models step them one lattice arc at a time.
"""

from __future__ import annotations

import hashlib
import math
from typing import Callable, Iterable

import torch

from .errors import DataError

DTYPE = torch.float64

Params = dict[str, torch.Tensor]


def make_generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g


def init_matrix(rows: int, cols: int, gen: torch.Generator) -> torch.Tensor:
    bound = 1.0 / math.sqrt(cols)
    w = torch.empty(rows, cols, dtype=DTYPE)
    w.uniform_(-bound, bound, generator=gen)
    w.requires_grad_(True)
    return w


def init_vector(n: int) -> torch.Tensor:
    return torch.zeros(n, dtype=DTYPE, requires_grad=True)


class Vocab:
    """Dense token index; iteration order is the given token order."""

    def __init__(self, tokens: Iterable[str]):
        self.tokens = tuple(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise DataError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.tokens)

    def __getitem__(self, token: str) -> int:
        try:
            return self.index[token]
        except KeyError:
            raise DataError(f"token {token!r} not in vocabulary") from None

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self[t] for t in tokens]


# --- recurrent cells --------------------------------------------------------

def add_gru(params: Params, prefix: str, in_dim: int, hid: int,
            gen: torch.Generator) -> None:
    params[f"{prefix}.w_ih"] = init_matrix(3 * hid, in_dim, gen)
    params[f"{prefix}.w_hh"] = init_matrix(3 * hid, hid, gen)
    params[f"{prefix}.b_ih"] = init_vector(3 * hid)
    params[f"{prefix}.b_hh"] = init_vector(3 * hid)


def gru_step(params: Params, prefix: str, x: torch.Tensor,
             h: torch.Tensor) -> torch.Tensor:
    """One GRU step; x is (..., in_dim), h is (..., hid)."""
    gi = x @ params[f"{prefix}.w_ih"].T + params[f"{prefix}.b_ih"]
    gh = h @ params[f"{prefix}.w_hh"].T + params[f"{prefix}.b_hh"]
    hid = h.shape[-1]
    i_r, i_z, i_n = gi.split(hid, dim=-1)
    h_r, h_z, h_n = gh.split(hid, dim=-1)
    r = torch.sigmoid(i_r + h_r)
    z = torch.sigmoid(i_z + h_z)
    n = torch.tanh(i_n + r * h_n)
    return (1 - z) * n + z * h


def add_rnn(params: Params, prefix: str, in_dim: int, hid: int,
            gen: torch.Generator) -> None:
    params[f"{prefix}.w_ih"] = init_matrix(hid, in_dim, gen)
    params[f"{prefix}.w_hh"] = init_matrix(hid, hid, gen)
    params[f"{prefix}.b_ih"] = init_vector(hid)
    params[f"{prefix}.b_hh"] = init_vector(hid)


def rnn_step(params: Params, prefix: str, x: torch.Tensor,
             h: torch.Tensor) -> torch.Tensor:
    """Plain tanh recurrence (the forget-gate-free cell)."""
    return torch.tanh(x @ params[f"{prefix}.w_ih"].T + params[f"{prefix}.b_ih"]
                      + h @ params[f"{prefix}.w_hh"].T + params[f"{prefix}.b_hh"])


def add_lstm(params: Params, prefix: str, in_dim: int, hid: int,
             gen: torch.Generator) -> None:
    params[f"{prefix}.w_ih"] = init_matrix(4 * hid, in_dim, gen)
    params[f"{prefix}.w_hh"] = init_matrix(4 * hid, hid, gen)
    params[f"{prefix}.b_ih"] = init_vector(4 * hid)
    params[f"{prefix}.b_hh"] = init_vector(4 * hid)


def lstm_step(params: Params, prefix: str, x: torch.Tensor,
              h: torch.Tensor, c: torch.Tensor):
    gates = (x @ params[f"{prefix}.w_ih"].T + params[f"{prefix}.b_ih"]
             + h @ params[f"{prefix}.w_hh"].T + params[f"{prefix}.b_hh"])
    hid = h.shape[-1]
    i, f, g, o = gates.split(hid, dim=-1)
    c_next = torch.sigmoid(f) * c + torch.sigmoid(i) * torch.tanh(g)
    h_next = torch.sigmoid(o) * torch.tanh(c_next)
    return h_next, c_next


def run_gru(params: Params, prefix: str, xs: torch.Tensor,
            h0: torch.Tensor | None = None) -> torch.Tensor:
    """Run a GRU over xs of shape (L, in_dim); returns (L, hid) states."""
    hid = params[f"{prefix}.w_hh"].shape[1]
    h = torch.zeros(hid, dtype=DTYPE) if h0 is None else h0
    out = []
    for t in range(xs.shape[0]):
        h = gru_step(params, prefix, xs[t], h)
        out.append(h)
    return torch.stack(out) if out else torch.zeros(0, hid, dtype=DTYPE)


def add_bi_gru(params: Params, prefix: str, in_dim: int, hid: int,
               gen: torch.Generator) -> None:
    """Bidirectional encoder producing hid-dim states (hid // 2 each way)."""
    if hid % 2:
        raise DataError("bidirectional encoder needs an even state size")
    add_gru(params, f"{prefix}.fwd", in_dim, hid // 2, gen)
    add_gru(params, f"{prefix}.bwd", in_dim, hid // 2, gen)


def bi_encode(params: Params, prefix: str, xs: torch.Tensor) -> torch.Tensor:
    fwd = run_gru(params, f"{prefix}.fwd", xs)
    bwd = run_gru(params, f"{prefix}.bwd", xs.flip(0)).flip(0)
    return torch.cat([fwd, bwd], dim=-1)


def attention(query: torch.Tensor, memory: torch.Tensor) -> torch.Tensor:
    """Dot-product attention: convex combination of memory rows."""
    if memory.shape[0] == 0:
        raise DataError("attention over empty memory")
    weights = torch.softmax(memory @ query, dim=0)
    return weights @ memory


def dropout(x: torch.Tensor, p: float, gen: torch.Generator,
            training: bool) -> torch.Tensor:
    if not training or p <= 0.0:
        return x
    keep = (torch.rand(x.shape, generator=gen, dtype=DTYPE) >= p).to(DTYPE)
    return x * keep / (1.0 - p)


# --- optimization -----------------------------------------------------------

def gradients(loss: torch.Tensor, params: Params) -> Params:
    names = list(params)
    grads = torch.autograd.grad(loss, [params[n] for n in names],
                                allow_unused=True)
    return {n: (g if g is not None else torch.zeros_like(params[n]))
            for n, g in zip(names, grads)}


def clip_gradients(grads: Params, max_norm: float) -> tuple[Params, float]:
    """Scale all gradients by min(1, max_norm / global_norm)."""
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total <= max_norm or total == 0.0:
        return grads, total
    scale = max_norm / total
    return {n: g * scale for n, g in grads.items()}, total


class Adam:
    """Standard Adam with bias correction, over a flat parameter dict."""

    def __init__(self, params: Params, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {n: torch.zeros_like(p) for n, p in params.items()}
        self.v = {n: torch.zeros_like(p) for n, p in params.items()}

    def step(self, grads: Params) -> None:
        self.t += 1
        bc1 = 1 - self.beta1 ** self.t
        bc2 = 1 - self.beta2 ** self.t
        with torch.no_grad():
            for n, p in self.params.items():
                g = grads[n]
                self.m[n] = self.beta1 * self.m[n] + (1 - self.beta1) * g
                self.v[n] = self.beta2 * self.v[n] + (1 - self.beta2) * g * g
                p -= self.lr * (self.m[n] / bc1) / ((self.v[n] / bc2).sqrt()
                                                    + self.eps)


def optimizer_step(opt: Adam, grads: Params) -> None:
    """Apply one optimizer update in place."""
    opt.step(grads)


# --- verification and persistence -------------------------------------------

def grad_check(fn: Callable[[], torch.Tensor], params: Params,
               eps: float = 1e-5) -> float:
    """Worst disagreement between autograd and central differences.

    The error is |analytic - numeric| / max(1, |analytic| + |numeric|):
    relative for large gradients, absolute below unit scale so that
    exactly-zero gradients are not swamped by finite-difference noise.
    """
    analytic = gradients(fn(), params)
    worst = 0.0
    with torch.no_grad():
        for name, p in params.items():
            flat = p.reshape(-1)
            for k in range(flat.numel()):
                orig = float(flat[k])
                flat[k] = orig + eps
                hi = float(fn())
                flat[k] = orig - eps
                lo = float(fn())
                flat[k] = orig
                numeric = (hi - lo) / (2 * eps)
                a = float(analytic[name].reshape(-1)[k])
                err = abs(a - numeric) / max(1.0, abs(a) + abs(numeric))
                worst = max(worst, err)
    return worst


def params_digest(params: Params) -> str:
    """Content hash of a parameter dict, stable across runs and loads."""
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(params[name].detach().to(DTYPE).contiguous().numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(path, params: Params, meta: dict) -> None:
    blob = {"tensors": {n: p.detach().clone() for n, p in params.items()},
            "meta": dict(meta)}
    torch.save(blob, path)


def load_checkpoint(path) -> tuple[Params, dict]:
    blob = torch.load(path, weights_only=True)
    params = {n: t.clone().requires_grad_(True)
              for n, t in blob["tensors"].items()}
    return params, blob["meta"]

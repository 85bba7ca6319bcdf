"""Training loops for samplers and the scorer.

Samplers minimize the inclusive KL from the posterior to q by
self-normalized importance sampling: draw k proposals, weight them by
ptilde/q normalized to 1, and descend -sum_i w_i log q(z_i) with the
weights treated as constants.  The scorer descends the sampled
variational bound, which w.r.t. theta is just the Monte Carlo mean of
-log ptilde over proposal draws, teacher-forced with label smoothing.

alternate_train interleaves the two to bootstrap a scorer from scratch
with a cheap helper sampler, which is then thrown away; everything else
in the package treats theta as frozen.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
import math
import pathlib
from typing import Optional, Sequence
import warnings

import numpy as np
import torch

from .errors import DataError
from .lattice import Lattice
from .metrics import exact_inclusive_kl
from . import nn
from .samplers import Context, Sampler
from .scorer import Scorer, log_grammatical_mass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    k_proposals: int = 16
    K_iwae: int = 32
    dropout: float = 0.3
    grad_clip: float = 5.0
    sampler_lr: float = 1e-5
    scorer_lr: float = 1e-3
    label_smoothing: float = 0.1
    length_threshold: int = 100
    length_penalty: float = 1.0
    seed: int = 0
    epochs: int = 1
    hidden_dim: int = 64

    def __post_init__(self):
        for f in ("batch_size", "k_proposals", "K_iwae", "grad_clip",
                  "sampler_lr", "scorer_lr", "length_threshold", "epochs",
                  "hidden_dim"):
            if getattr(self, f) <= 0:
                raise DataError(f"{f} must be positive")
        for f in ("dropout", "label_smoothing", "length_penalty"):
            if getattr(self, f) < 0:
                raise DataError(f"{f} cannot be negative")
        if self.dropout >= 1.0 or self.label_smoothing >= 1.0:
            raise DataError("dropout and label_smoothing must stay below 1")


def save_config(config: TrainConfig, path) -> None:
    lines = [f"{f.name}={getattr(config, f.name)}" for f in fields(config)]
    pathlib.Path(path).write_text("\n".join(lines) + "\n")


def load_config(path) -> TrainConfig:
    types = {f.name: f.type for f in fields(TrainConfig)}
    kw = {}
    for ln, line in enumerate(pathlib.Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or key not in types:
            raise DataError(f"{path}:{ln}: unknown config line {line!r}")
        caster = int if types[key] in ("int", int) else float
        try:
            kw[key] = caster(value.strip())
        except ValueError as e:
            raise DataError(f"{path}:{ln}: {e}") from None
    return TrainConfig(**kw)


def snis_weights(log_w: np.ndarray) -> np.ndarray:
    """Normalized importance weights from log ptilde - log q; sums to 1."""
    shifted = log_w - log_w.max()
    w = np.exp(shifted)
    return w / w.sum()


# --- sampler training ---------------------------------------------------------

def proposal_draws(sampler: Sampler, ctx: Context, scorer: Scorer,
                   rng: np.random.Generator, k: int,
                   max_len: Optional[int] = None) -> list[dict]:
    """k proposals with scorer log weights attached (no gradients)."""
    draws = sampler.sample_batch(ctx, rng, k, max_len=max_len)
    with torch.no_grad():
        lp = scorer.score_batch([d["marks"] for d in draws])
    for d, v in zip(draws, lp):
        d["log_ptilde"] = v.item()
    return draws


def inclusive_kl_loss(sampler: Sampler, ctx: Context, draws: Sequence[dict],
                      config: TrainConfig,
                      x_len: int, y_len: int,
                      gen: Optional[torch.Generator] = None) -> torch.Tensor:
    """Differentiable per-example loss given fixed draws.

    The importance weights are constants; the optional length penalty
    enters through the score-function estimator, so paths shorter than
    the |x|+|y| floor push their own log q down."""
    log_w = np.array([d["log_ptilde"] - d["log_q"] for d in draws])
    what = snis_weights(log_w)
    forced = sampler.forced_logprob(ctx, [d["path"] for d in draws],
                                    dropout_p=config.dropout, gen=gen)
    loss = -(torch.from_numpy(what) * forced).sum()
    if config.length_penalty > 0.0:
        floor = x_len + y_len
        pens = np.maximum(
            floor - np.array([len(d["marks"]) for d in draws]), 0.0)
        if pens.any():
            pens *= config.length_penalty / len(draws)
            loss = loss + (torch.from_numpy(pens) * forced).sum()
    return loss


def inclusive_kl_step(sampler: Sampler, scorer: Scorer,
                      lattices: Sequence[Lattice], rng: np.random.Generator,
                      opt: nn.Adam, config: TrainConfig,
                      gen: Optional[torch.Generator] = None) -> float:
    """One batch update of the sampler against the frozen scorer; returns
    the batch loss.  Examples whose weights all vanish are skipped."""
    losses = []
    for lat in lattices:
        ctx = sampler.begin(lat)
        draws = proposal_draws(sampler, ctx, scorer, rng,
                               config.k_proposals,
                               max_len=config.length_threshold)
        log_w = np.array([d["log_ptilde"] - d["log_q"] for d in draws])
        if not np.isfinite(log_w).any():
            warnings.warn("degenerate importance weights; skipping example")
            continue
        losses.append(inclusive_kl_loss(sampler, ctx, draws, config,
                                        len(lat.x), len(lat.y), gen=gen))
    if not losses:
        return math.nan
    loss = torch.stack(losses).mean()
    grads = nn.gradients(loss, sampler.params)
    grads, _ = nn.clip_gradients(grads, config.grad_clip)
    nn.optimizer_step(opt, grads)
    return loss.item()


def iwae_bound(scorer: Scorer, sampler: Sampler, lat: Lattice, k: int,
               rng: np.random.Generator) -> float:
    """Importance-weighted upper bound on -log ptilde(x, y): averaging k
    weights under the log tightens the single-sample variational bound."""
    ctx = sampler.begin(lat)
    draws = proposal_draws(sampler, ctx, scorer, rng, k)
    log_w = torch.tensor([d["log_ptilde"] - d["log_q"] for d in draws],
                         dtype=nn.DTYPE)
    return -(torch.logsumexp(log_w, 0).item() - math.log(k))


# --- scorer training ----------------------------------------------------------

def smoothed_nll(scorer: Scorer, seqs, config: TrainConfig,
                 gen: Optional[torch.Generator] = None) -> torch.Tensor:
    """Teacher-forced negative log likelihood of each string (B,), with
    label smoothing spreading epsilon of each step's target mass evenly
    over the vocabulary."""
    logprobs, targets, mask = scorer.forced_log_probs(
        seqs, dropout_p=config.dropout, gen=gen)
    picked = logprobs.gather(-1, targets[..., None]).squeeze(-1)
    eps = config.label_smoothing
    step_loss = -(1.0 - eps) * picked - eps * logprobs.mean(dim=-1)
    return (step_loss * mask).sum(dim=1)


def train_scorer_step(scorer: Scorer, sampler: Sampler,
                      lattices: Sequence[Lattice], rng: np.random.Generator,
                      opt: nn.Adam, config: TrainConfig,
                      gen: Optional[torch.Generator] = None) -> float:
    """One batch update of the scorer on proposal draws; the gradient
    flows through log ptilde only (draws carry no sampler gradients)."""
    losses = []
    for lat in lattices:
        ctx = sampler.begin(lat)
        draws = sampler.sample_batch(ctx, rng, config.k_proposals,
                                     max_len=config.length_threshold)
        nll = smoothed_nll(scorer, [d["marks"] for d in draws], config,
                           gen=gen)
        losses.append(nll.mean())
    loss = torch.stack(losses).mean()
    grads = nn.gradients(loss, scorer.params)
    grads, _ = nn.clip_gradients(grads, config.grad_clip)
    nn.optimizer_step(opt, grads)
    return loss.item()


# --- loops --------------------------------------------------------------------

def _batches(items, size, rng: np.random.Generator):
    order = rng.permutation(len(items))
    for start in range(0, len(items), size):
        yield [items[i] for i in order[start:start + size]]


def _write_trace(path, header, rows) -> None:
    lines = ["\t".join(header)]
    for row in rows:
        lines.append("\t".join(str(v) for v in row))
    pathlib.Path(path).write_text("\n".join(lines) + "\n")


def train_sampler(sampler: Sampler, scorer: Scorer,
                  lattices: Sequence[Lattice], config: TrainConfig,
                  probe: Sequence[Lattice] = (),
                  trace_path=None) -> list[tuple]:
    """Epochs of inclusive-KL updates; returns (step, loss, probe_kl) rows,
    probe_kl being the exact enumerated inclusive KL on the probe set."""
    rng = np.random.default_rng(config.seed)
    gen = nn.make_generator(config.seed)
    opt = nn.Adam(sampler.params, lr=config.sampler_lr)
    rows = []
    step = 0
    for _ in range(config.epochs):
        for batch in _batches(lattices, config.batch_size, rng):
            loss = inclusive_kl_step(sampler, scorer, batch, rng, opt,
                                     config, gen=gen)
            step += 1
            kl = (float(np.mean([exact_inclusive_kl(sampler, scorer, p)
                                 for p in probe])) if probe else math.nan)
            rows.append((step, loss, kl))
    if trace_path is not None:
        _write_trace(trace_path, ("step", "loss", "probe_kl"), rows)
    return rows


def train_scorer(scorer: Scorer, sampler: Sampler,
                 lattices: Sequence[Lattice], config: TrainConfig,
                 probe: Sequence[Lattice] = (),
                 trace_path=None) -> list[tuple]:
    """Epochs of scorer updates against a fixed proposal sampler; rows are
    (step, loss, probe_nll) with probe_nll = mean exact -log ptilde(x, y)."""
    rng = np.random.default_rng(config.seed)
    gen = nn.make_generator(config.seed)
    opt = nn.Adam(scorer.params, lr=config.scorer_lr)
    rows = []
    step = 0
    for _ in range(config.epochs):
        for batch in _batches(lattices, config.batch_size, rng):
            loss = train_scorer_step(scorer, sampler, batch, rng, opt,
                                     config, gen=gen)
            step += 1
            nll = (float(np.mean([-log_grammatical_mass(scorer, p)
                                  for p in probe])) if probe else math.nan)
            rows.append((step, loss, nll))
    if trace_path is not None:
        _write_trace(trace_path, ("step", "loss", "probe_nll"), rows)
    return rows


def alternate_train(scorer: Scorer, sampler: Sampler,
                    lattices: Sequence[Lattice], config: TrainConfig,
                    alternations: int = 1, scorer_epochs: int = 1,
                    sampler_epochs: int = 1) -> Scorer:
    """Bootstrap theta with a helper sampler: alternate scorer epochs and
    sampler epochs, then return the scorer as the frozen model.  The
    helper must be the attention sampler with the plain recurrent history
    cell; it is not returned and should be discarded."""
    if sampler.kind != "swa" or sampler.config.history_cell != "rnn":
        raise DataError("alternation expects the attention sampler with "
                        "the plain recurrent history cell")
    rng = np.random.default_rng(config.seed)
    gen = nn.make_generator(config.seed)
    opt_s = nn.Adam(scorer.params, lr=config.scorer_lr)
    opt_q = nn.Adam(sampler.params, lr=config.sampler_lr)
    for _ in range(alternations):
        for _ in range(scorer_epochs):
            for batch in _batches(lattices, config.batch_size, rng):
                train_scorer_step(scorer, sampler, batch, rng, opt_s,
                                  config, gen=gen)
        for _ in range(sampler_epochs):
            for batch in _batches(lattices, config.batch_size, rng):
                inclusive_kl_step(sampler, scorer, batch, rng, opt_q,
                                  config, gen=gen)
    return scorer

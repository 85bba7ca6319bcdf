"""Autoregressive scorer over mark strings.

A stacked LSTM language model assigns every finite mark string a strictly
positive probability: each step predicts the next mark or end-of-string
from learned initial states (no begin token), so

    log score(w) = sum_t log p(w_t | w_<t) + log p(EOS | w).

During sampler training and evaluation the scorer is frozen and plays the
role of the global string weight; restricted to a lattice's mark strings
it is unnormalized, and the importance-sampling machinery estimates the
missing normalizer.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
import math
import pathlib
from typing import Optional, Sequence

import torch

from .errors import DataError
from .fst import SymStr
from . import nn
from .nn import Params, Vocab

EOS = "<eos>"


@dataclass(frozen=True)
class ScorerConfig:
    marks: tuple[str, ...]
    hidden: int = 256
    layers: int = 2

    def __post_init__(self):
        if EOS in self.marks:
            raise DataError(f"{EOS} is implicit and cannot be a mark")
        if len(set(self.marks)) != len(self.marks):
            raise DataError("duplicate marks in scorer config")


class Scorer:
    """The mark-string model; ``params`` is a flat float64 tensor dict."""

    def __init__(self, config: ScorerConfig, seed: int,
                 params: Optional[Params] = None):
        self.config = config
        self.vocab = Vocab(config.marks)
        self.eos_id = len(self.vocab)
        self.seed = seed
        if params is not None:
            self.params = params
            return
        gen = nn.make_generator(seed)
        p: Params = {}
        p["emb"] = nn.init_matrix(len(self.vocab), config.hidden, gen)
        for layer in range(config.layers):
            nn.add_lstm(p, f"lstm{layer}", config.hidden, config.hidden, gen)
            p[f"h0.{layer}"] = nn.init_vector(config.hidden)
            p[f"c0.{layer}"] = nn.init_vector(config.hidden)
        p["out.w"] = nn.init_matrix(len(self.vocab) + 1, config.hidden + 1, gen)
        self.params = p

    # -- incremental interface (single sequence) --

    def initial_carry(self):
        return tuple((self.params[f"h0.{i}"], self.params[f"c0.{i}"])
                     for i in range(self.config.layers))

    def advance(self, carry, mark: str):
        x = self.params["emb"][self.vocab[mark]]
        out = []
        for layer, (h, c) in enumerate(carry):
            x, c = nn.lstm_step(self.params, f"lstm{layer}", x, h, c)
            out.append((x, c))
        return tuple(out)

    def next_log_probs(self, carry) -> torch.Tensor:
        h_top = carry[-1][0]
        one = torch.ones(h_top.shape[:-1] + (1,), dtype=nn.DTYPE)
        logits = torch.cat([one, h_top], dim=-1) @ self.params["out.w"].T
        return torch.log_softmax(logits, dim=-1)

    # -- batched teacher forcing --

    def forced_log_probs(self, seqs: Sequence[SymStr], *,
                         dropout_p: float = 0.0,
                         gen: Optional[torch.Generator] = None):
        """Per-step next-token log distributions for a batch.

        Returns (logprobs, targets, mask) with shapes (B, T+1, V),
        (B, T+1), (B, T+1); position t of sequence i predicts its t-th
        token, with EOS as the final target.  mask covers the real steps.
        """
        batch = len(seqs)
        tmax = max((len(s) for s in seqs), default=0)
        ids = torch.zeros(batch, tmax, dtype=torch.long)
        mask = torch.zeros(batch, tmax + 1, dtype=torch.bool)
        targets = torch.full((batch, tmax + 1), self.eos_id, dtype=torch.long)
        for i, s in enumerate(seqs):
            enc = self.vocab.encode(s)
            ids[i, :len(s)] = torch.tensor(enc, dtype=torch.long)
            targets[i, :len(s)] = torch.tensor(enc, dtype=torch.long)
            mask[i, :len(s) + 1] = True
        carry = [(self.params[f"h0.{i}"].expand(batch, -1),
                  self.params[f"c0.{i}"].expand(batch, -1))
                 for i in range(self.config.layers)]
        steps = []
        for t in range(tmax + 1):
            steps.append(self.next_log_probs(tuple(carry)))
            if t == tmax:
                break
            x = self.params["emb"][ids[:, t]]
            for layer in range(self.config.layers):
                h, c = carry[layer]
                x, c = nn.lstm_step(self.params, f"lstm{layer}", x, h, c)
                if dropout_p > 0.0:
                    x = nn.dropout(x, dropout_p, gen, training=True)
                carry[layer] = (x, c)
        return torch.stack(steps, dim=1), targets, mask

    def score_batch(self, seqs: Sequence[SymStr]) -> torch.Tensor:
        """Log score of each mark string, shape (B,)."""
        logprobs, targets, mask = self.forced_log_probs(seqs)
        picked = logprobs.gather(-1, targets[..., None]).squeeze(-1)
        return (picked * mask).sum(dim=1)

    def score(self, marks: SymStr) -> torch.Tensor:
        return self.score_batch([tuple(marks)])[0]

    # -- persistence --

    def digest(self) -> str:
        return nn.params_digest(self.params)

    def save(self, path) -> None:
        nn.save_checkpoint(path, self.params,
                           {"kind": "scorer", "seed": self.seed,
                            **asdict(self.config)})
        # sidecar vocabulary list, line number = mark id, EOS last
        vocab_path = pathlib.Path(str(path) + ".marks")
        vocab_path.write_text(
            "".join(m + "\n" for m in self.config.marks + (EOS,)))

    @classmethod
    def load(cls, path) -> "Scorer":
        params, meta = nn.load_checkpoint(path)
        if meta.get("kind") != "scorer":
            raise DataError(f"{path} is not a scorer checkpoint")
        config = ScorerConfig(marks=tuple(meta["marks"]),
                              hidden=meta["hidden"], layers=meta["layers"])
        return cls(config, seed=meta["seed"], params=params)


# --- whole-string and lattice-level views ------------------------------------

def score_marks(scorer: Scorer, marks: SymStr) -> torch.Tensor:
    """Differentiable log score of one mark string, EOS step included."""
    return scorer.score(tuple(marks))


def next_mark_dist(scorer: Scorer, prefix: SymStr) -> dict[str, float]:
    """The next-step distribution over marks and EOS after a prefix."""
    carry = scorer.initial_carry()
    for mark in prefix:
        carry = scorer.advance(carry, mark)
    lp = scorer.next_log_probs(carry).detach()
    toks = scorer.config.marks + (EOS,)
    return {tok: math.exp(lp[i].item()) for i, tok in enumerate(toks)}


def log_grammatical_mass(scorer: Scorer, lat, max_paths: int = 1_000_000) -> float:
    """log of the scorer's total mass on the lattice's mark strings; this
    is the exact pair score, available only at enumerable scale."""
    strings = lat.mark_strings(max_paths)
    scores = scorer.score_batch(strings).detach()
    return torch.logsumexp(scores, 0).item()


def grammatical_mass(scorer: Scorer, lat, max_paths: int = 1_000_000) -> float:
    return math.exp(log_grammatical_mass(scorer, lat, max_paths))

"""Evaluation metrics for trained samplers against a frozen scorer.

Partial KL is the sampler's objective with the intractable pair
normalizer dropped: E_q[log q(z) - log ptilde(z)], averaged over the
dataset.  Adding back log ptilde(x, y) (computable by enumeration at desk
scale) turns it into the exclusive KL from q to the exact posterior, so
Gibbs' inequality pins partial KL >= -log ptilde(x, y) and equality holds
exactly at the posterior.

All Monte Carlo quantities report standard errors; exact oracles that
enumerate the lattice live here too and back the acceptance checks.
"""

from __future__ import annotations

from dataclasses import dataclass
import math
from typing import Optional, Sequence

import numpy as np
import torch

from .errors import DataError, DigestMismatch
from .fst import SymStr
from .lattice import Lattice
from . import nn
from .samplers import Sampler, WeightedSample, weigh
from .scorer import Scorer, log_grammatical_mass


def _logsumexp(values) -> float:
    return torch.logsumexp(torch.tensor(values, dtype=nn.DTYPE), 0).item()


# --- exact oracles (enumerable lattices only) --------------------------------

def exact_posterior(scorer: Scorer, lat: Lattice,
                    max_paths: int = 1_000_000) -> dict[SymStr, float]:
    """Posterior over paths, keyed by mark string (paths and mark strings
    biject on canonical lattices); probabilities sum to 1."""
    strings = lat.mark_strings(max_paths)
    scores = scorer.score_batch(strings).detach()
    probs = torch.softmax(scores, 0)
    return {s: p.item() for s, p in zip(strings, probs)}


def sampler_path_dist(sampler: Sampler, lat: Lattice,
                      max_paths: int = 1_000_000) -> dict[SymStr, float]:
    """q as an explicit distribution, by scoring every lattice path."""
    paths = list(lat.iter_paths(max_paths))
    ctx = sampler.begin(lat)
    lq = sampler.forced_logprob(ctx, [p.arcs for p in paths]).detach()
    return {p.marks: math.exp(v.item()) for p, v in zip(paths, lq)}


def exact_partial_kl(q_dist: dict[SymStr, float], scorer: Scorer,
                     lat: Lattice) -> float:
    """Sum_z q(z) (log q(z) - log ptilde(z)) by enumeration; zero-mass
    strings contribute nothing."""
    total = 0.0
    scores = scorer.score_batch(list(q_dist)).detach()
    for (marks, q), lp in zip(q_dist.items(), scores):
        if q > 0.0:
            total += q * (math.log(q) - lp.item())
    return total


def exact_inclusive_kl(sampler: Sampler, scorer: Scorer,
                       lat: Lattice, max_paths: int = 1_000_000) -> float:
    """KL from the exact posterior to q, the quantity sampler training
    descends; finite only while q covers every posterior-positive path."""
    post = exact_posterior(scorer, lat, max_paths)
    q = sampler_path_dist(sampler, lat, max_paths)
    total = 0.0
    for marks, p in post.items():
        if p > 0.0:
            total += p * (math.log(p) - math.log(q[marks]))
    return total


# --- Monte Carlo metrics ------------------------------------------------------

def partial_kl(sampler: Sampler, scorer: Scorer,
               lattices: Sequence[Lattice], m_samples: int = 16,
               rng: Optional[np.random.Generator] = None,
               max_len: Optional[int] = None):
    """Dataset-averaged E_q[log q - log ptilde] with its standard error,
    m_samples Monte Carlo draws per example."""
    rng = rng if rng is not None else np.random.default_rng(0)
    means, variances = [], []
    for lat in lattices:
        ctx = sampler.begin(lat)
        draws = sampler.sample_batch(ctx, rng, m_samples, max_len=max_len)
        lp = scorer.score_batch([d["marks"] for d in draws]).detach().numpy()
        diffs = np.array([d["log_q"] for d in draws]) - lp
        means.append(float(diffs.mean()))
        variances.append(float(diffs.var(ddof=1)) / m_samples
                         if m_samples > 1 else 0.0)
    value = float(np.mean(means))
    se = math.sqrt(sum(variances)) / len(means)
    return value, se


def expected_mark_length(sampler: Sampler, scorer: Scorer,
                         lattices: Sequence[Lattice], m_samples: int = 16,
                         rng: Optional[np.random.Generator] = None):
    """Self-normalized importance-sampling estimate of the posterior mark
    string length, dataset-averaged, with its standard error."""
    rng = rng if rng is not None else np.random.default_rng(0)
    estimates, variances = [], []
    for lat in lattices:
        est, var = _snis_length(sampler, scorer, lat, m_samples, rng)
        estimates.append(est)
        variances.append(var)
    value = float(np.mean(estimates))
    se = math.sqrt(sum(variances)) / len(estimates)
    return value, se


def _snis_estimate(log_w: np.ndarray, values: np.ndarray):
    """Self-normalized estimate of E[values] with its variance.  Weighting
    centered deviations keeps the estimate exact when all values agree,
    where the raw weighted sum would pick up normalization rounding."""
    w = np.exp(log_w - log_w.max())
    w /= w.sum()
    pivot = float(values.mean())
    est = pivot + float(w @ (values - pivot))
    var = float((w ** 2) @ (values - est) ** 2)
    return est, var


def _snis_length(sampler, scorer, lat, m_samples, rng):
    ctx = sampler.begin(lat)
    draws = sampler.sample_batch(ctx, rng, m_samples)
    lp = scorer.score_batch([d["marks"] for d in draws]).detach().numpy()
    log_w = lp - np.array([d["log_q"] for d in draws])
    lens = np.array([float(len(d["marks"])) for d in draws])
    return _snis_estimate(log_w, lens)


def dedup_ess(samples: Sequence[WeightedSample]) -> float:
    """Effective sample size after merging identical mark strings.

    Weights of duplicates are summed (they are one atom of q's pushforward
    onto mark strings), then 1 / sum of squared normalized weights is
    computed in log-space."""
    if not samples:
        raise DataError("dedup_ess needs at least one sample")
    groups: dict[SymStr, list[float]] = {}
    for s in samples:
        lw = s.log_ptilde - s.log_q
        if math.isnan(lw):
            raise DataError("samples carry no scorer weights")
        groups.setdefault(s.marks, []).append(lw)
    merged = [_logsumexp(v) for v in groups.values()]
    if all(lw == -math.inf for lw in merged):
        raise DataError("all sample weights are zero")
    return math.exp(2.0 * _logsumexp(merged) - _logsumexp([2 * lw for lw
                                                           in merged]))


# --- the full report ----------------------------------------------------------

@dataclass(frozen=True)
class ExampleRow:
    x: str
    y: str
    partial_kl: float
    mark_length: float
    ess: float


@dataclass(frozen=True)
class EvalReport:
    sampler_kind: str
    scorer_digest: str
    sampler_digest: str
    partial_kl: float
    partial_kl_se: float
    expected_mark_length: float
    expected_mark_length_se: float
    dedup_ess: float
    n_examples: int
    n_samples: int
    rows: tuple[ExampleRow, ...]

    def diff(self, other: "EvalReport") -> dict[str, float]:
        """Metric deltas (self minus other); comparable only against one
        shared frozen scorer."""
        if self.scorer_digest != other.scorer_digest:
            raise DigestMismatch(
                "reports were evaluated against different scorers: "
                f"{self.scorer_digest[:12]} vs {other.scorer_digest[:12]}")
        return {"partial_kl": self.partial_kl - other.partial_kl,
                "expected_mark_length": (self.expected_mark_length
                                         - other.expected_mark_length),
                "dedup_ess": self.dedup_ess - other.dedup_ess}


def evaluate(sampler: Sampler, scorer: Scorer, lattices: Sequence[Lattice],
             m_samples: int = 16,
             rng: Optional[np.random.Generator] = None) -> EvalReport:
    """All Monte Carlo metrics in one pass: one batch of draws per example
    feeds the KL term, the length estimate, and the sample-size figure."""
    if not lattices:
        raise DataError("evaluation needs at least one example")
    rng = rng if rng is not None else np.random.default_rng(0)
    rows = []
    kl_vars, len_vars = [], []
    for lat in lattices:
        ctx = sampler.begin(lat)
        draws = sampler.sample_batch(ctx, rng, m_samples)
        samples = weigh(draws, scorer)
        lp = np.array([s.log_ptilde for s in samples])
        lq = np.array([s.log_q for s in samples])
        diffs = lq - lp
        kl_vars.append(float(diffs.var(ddof=1)) / m_samples
                       if m_samples > 1 else 0.0)
        lens = np.array([float(len(s.marks)) for s in samples])
        est, len_var = _snis_estimate(lp - lq, lens)
        len_vars.append(len_var)
        rows.append(ExampleRow(x=" ".join(lat.x), y=" ".join(lat.y),
                               partial_kl=float(diffs.mean()),
                               mark_length=est,
                               ess=dedup_ess(samples)))
    n = len(rows)
    return EvalReport(
        sampler_kind=sampler.kind,
        scorer_digest=scorer.digest(),
        sampler_digest=sampler.digest(),
        partial_kl=float(np.mean([r.partial_kl for r in rows])),
        partial_kl_se=math.sqrt(sum(kl_vars)) / n,
        expected_mark_length=float(np.mean([r.mark_length for r in rows])),
        expected_mark_length_se=math.sqrt(sum(len_vars)) / n,
        dedup_ess=float(np.mean([r.ess for r in rows])),
        n_examples=n, n_samples=m_samples, rows=tuple(rows))


_SCALARS = ("sampler_kind", "scorer_digest", "sampler_digest", "partial_kl",
            "partial_kl_se", "expected_mark_length",
            "expected_mark_length_se", "dedup_ess", "n_examples",
            "n_samples")
_ROW_FIELDS = ("x", "y", "partial_kl", "mark_length", "ess")


def report_to_text(report: EvalReport) -> str:
    """TSV rendering: a key-value header block, then per-example rows."""
    lines = [f"{k}\t{getattr(report, k)}" for k in _SCALARS]
    lines.append("")
    lines.append("\t".join(_ROW_FIELDS))
    for r in report.rows:
        lines.append("\t".join(str(getattr(r, f)) for f in _ROW_FIELDS))
    return "\n".join(lines) + "\n"


def report_from_text(text: str) -> EvalReport:
    head, _, table = text.partition("\n\n")
    kv = {}
    for line in head.splitlines():
        k, _, v = line.partition("\t")
        kv[k] = v
    missing = [k for k in _SCALARS if k not in kv]
    if missing:
        raise DataError(f"report header is missing {missing}")
    rows = []
    lines = table.splitlines()
    if not lines or lines[0].split("\t") != list(_ROW_FIELDS):
        raise DataError("report table header is malformed")
    for line in lines[1:]:
        f = line.split("\t")
        rows.append(ExampleRow(x=f[0], y=f[1], partial_kl=float(f[2]),
                               mark_length=float(f[3]), ess=float(f[4])))
    return EvalReport(
        sampler_kind=kv["sampler_kind"],
        scorer_digest=kv["scorer_digest"],
        sampler_digest=kv["sampler_digest"],
        partial_kl=float(kv["partial_kl"]),
        partial_kl_se=float(kv["partial_kl_se"]),
        expected_mark_length=float(kv["expected_mark_length"]),
        expected_mark_length_se=float(kv["expected_mark_length_se"]),
        dedup_ess=float(kv["dedup_ess"]),
        n_examples=int(kv["n_examples"]), n_samples=int(kv["n_samples"]),
        rows=tuple(rows))

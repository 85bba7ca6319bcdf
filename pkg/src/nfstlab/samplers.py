"""Proposal distributions over lattice paths.

Four samplers share one interface: walk the lattice arc by arc, each step
a distribution over the current state's out-arcs (equivalently over their
marks, which are distinct per state).  Stopping is uniform across kinds:
the lattice is augmented with an arc carrying the end mark from every
final state to a fresh sink, so "stop here" is just another arc choice
and every kind is a proper distribution over complete paths.

kinds
  nolook  logits from [1; h] where h is a recurrent digest of the chosen
          mark prefix; no lookahead at all.
  swa     adds attention over a bidirectional encoding of x # reversed(y):
          logits from [1; h; Att(h, enc)].
  sws     adds right-to-left encodings of the unaligned suffixes of x and
          y at the current state: logits from [1; h; enc_x; enc_y].
  swp     precomputes arc weights over the whole lattice in one reverse
          topological pass and samples by the backward-weight ratios; the
          walk is Markovian in the lattice state.

The swp pass follows the arc-weight construction exactly: arc embeddings
sigma(U [1; e_mark; e_target]), weights exp(w . e), backward weights
beta(s) = sum_arcs w * beta(target) with beta(sink) = 1, transitions
w * beta(target) / beta(s), and state embeddings as the transition-
weighted average of arc embeddings.  The end arc has fixed weight 1, so
beta equals the classic recurrence with the final-state indicator folded
in.  Everything runs in log-space.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import math
from typing import Optional, Sequence

import numpy as np
import torch

from .errors import DataError, InvalidPath, LimitExceeded
from .fst import Arc, SymStr
from .lattice import Lattice
from . import nn
from .nn import Params, Vocab
from .scorer import EOS, Scorer

SEP = "#"

KINDS = ("nolook", "swa", "sws", "swp")


@dataclass(frozen=True)
class SamplerConfig:
    kind: str
    marks: tuple[str, ...]
    pair_symbols: tuple[str, ...] = ()
    dim: int = 16
    history_cell: str = "gru"      # "rnn" swaps every recurrent cell to tanh
    swp_variant: str = "static"    # "history": experimental, step-dependent

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DataError(f"unknown sampler kind {self.kind!r}")
        if EOS in self.marks or len(set(self.marks)) != len(self.marks):
            raise DataError(f"marks must be unique and exclude {EOS!r}")
        if self.kind in ("swa", "sws") and not self.pair_symbols:
            raise DataError(f"{self.kind} needs the pair symbol vocabulary")
        if SEP in self.pair_symbols:
            raise DataError(f"{SEP!r} is reserved for the encoder separator")
        if self.dim < 2 or self.dim % 2:
            raise DataError("dim must be even (bidirectional halves)")
        if self.history_cell not in ("gru", "rnn"):
            raise DataError(f"unknown history cell {self.history_cell!r}")
        if self.swp_variant not in ("static", "history"):
            raise DataError(f"unknown swp variant {self.swp_variant!r}")


@dataclass(frozen=True)
class WeightedSample:
    path: tuple[Arc, ...]
    marks: SymStr
    log_q: float
    log_ptilde: float
    weight: float


@dataclass(frozen=True)
class SwpTables:
    """Per-arc and per-state quantities of the precompute pass, in the
    augmented lattice's arc order; positives are exp() of the log fields."""

    arc_embeddings: torch.Tensor   # (A, d)
    log_weights: torch.Tensor      # (A,)
    state_embeddings: torch.Tensor  # (S, d)
    log_beta: torch.Tensor         # (S,)
    log_transition: torch.Tensor   # (A,)
    aug: "AugLattice"


@dataclass(frozen=True)
class AugLattice:
    """Lattice plus the end arcs: one per final state, into a fresh sink."""

    lat: Lattice
    sink: int
    n_states: int
    arc_src: tuple[int, ...]
    arc_dst: tuple[int, ...]
    arc_mark: tuple[int, ...]          # ids in the sampler mark vocab
    arc_lat_index: tuple[Optional[int], ...]  # None for end arcs
    out: tuple[tuple[int, ...], ...]   # arc ids per state, end arc last
    allowed: torch.Tensor              # (S, V) bool mark mask
    progress: tuple[tuple[int, int], ...]

    @property
    def n_arcs(self) -> int:
        return len(self.arc_src)

    def rev_states(self):
        """Reverse topological order of the augmented lattice."""
        return (self.sink,) + tuple(reversed(self.lat.topo))

    def structure(self) -> "AugStructure":
        """Index tensors for the vectorized backward pass: arcs grouped by
        the level (longest distance to a terminal) of their source state,
        so each level's states depend only on already-finished ones."""
        src = torch.tensor(self.arc_src, dtype=torch.long)
        dst = torch.tensor(self.arc_dst, dtype=torch.long)
        mark = torch.tensor(self.arc_mark, dtype=torch.long)
        eos = torch.tensor([d == self.sink for d in self.arc_dst])
        level = [0] * self.n_states
        buckets: dict[int, list[int]] = {}
        for s in self.rev_states():
            if self.out[s]:
                level[s] = 1 + max(level[self.arc_dst[a]]
                                   for a in self.out[s])
                buckets.setdefault(level[s], []).append(s)
        levels = tuple(
            (torch.tensor(states, dtype=torch.long),
             torch.tensor([a for s in states for a in self.out[s]],
                          dtype=torch.long))
            for _, states in sorted(buckets.items()))
        return AugStructure(src=src, dst=dst, mark=mark, eos=eos,
                            levels=levels)


@dataclass(frozen=True)
class AugStructure:
    """Arc endpoints as index tensors plus a level partition of the states,
    deepest-suffix last, for batched right-to-left sweeps."""

    src: torch.Tensor    # (A,) long
    dst: torch.Tensor    # (A,) long
    mark: torch.Tensor   # (A,) long
    eos: torch.Tensor    # (A,) bool, true for end arcs
    levels: tuple[tuple[torch.Tensor, torch.Tensor], ...]  # (states, arcs)


def _segment_logsumexp(values: torch.Tensor, seg: torch.Tensor,
                       n: int) -> torch.Tensor:
    """logsumexp of `values` grouped by segment id, over n segments.
    Untouched segments come back as -inf."""
    mx = torch.full((n,), -torch.inf, dtype=values.dtype)
    mx = mx.scatter_reduce(0, seg, values.detach(), reduce="amax")
    shift = torch.where(torch.isinf(mx), torch.zeros_like(mx), mx)
    sums = torch.zeros(n, dtype=values.dtype)
    sums = sums.index_add(0, seg, (values - shift[seg]).exp())
    return shift + sums.log()


def augment(lat: Lattice, vocab: Vocab) -> AugLattice:
    eos_id = vocab[EOS]
    sink = lat.n_states
    srcs, dsts, marks, lidx = [], [], [], []
    out: list[list[int]] = [[] for _ in range(sink + 1)]
    for i, a in enumerate(lat.machine.arcs):
        out[a.src].append(len(srcs))
        srcs.append(a.src)
        dsts.append(a.dst)
        marks.append(vocab[a.marks[0]])
        lidx.append(i)
    for f in sorted(lat.finals):
        out[f].append(len(srcs))
        srcs.append(f)
        dsts.append(sink)
        marks.append(eos_id)
        lidx.append(None)
    allowed = torch.zeros(sink + 1, len(vocab), dtype=torch.bool)
    for arc_id, s in enumerate(srcs):
        allowed[s, marks[arc_id]] = True
    return AugLattice(lat=lat, sink=sink, n_states=sink + 1,
                      arc_src=tuple(srcs), arc_dst=tuple(dsts),
                      arc_mark=tuple(marks), arc_lat_index=tuple(lidx),
                      out=tuple(tuple(row) for row in out), allowed=allowed,
                      progress=lat.state_progress + ((len(lat.x), len(lat.y)),))


@dataclass
class Context:
    """Per-pair working set: built once, reused for every walk and every
    teacher-forced scoring on that lattice."""

    aug: AugLattice
    enc: Optional[torch.Tensor] = None        # swa: (L, d) encoder states
    state_enc: Optional[torch.Tensor] = None  # sws: (S, 2d) suffix encodings
    tables: Optional[SwpTables] = None        # swp
    arc_by_mark: dict = field(default_factory=dict)  # (state, mark_id) -> arc


class Sampler:
    def __init__(self, config: SamplerConfig, seed: int,
                 params: Optional[Params] = None):
        self.config = config
        self.vocab = Vocab(config.marks + (EOS,))
        self.eos_id = self.vocab[EOS]
        self.seed = seed
        if config.kind == "swa":
            self.pair_vocab = Vocab(config.pair_symbols + (SEP,))
        elif config.kind == "sws":
            self.pair_vocab = Vocab(config.pair_symbols)
        d = config.dim
        if params is not None:
            self.params = params
            return
        gen = nn.make_generator(seed)
        p: Params = {}
        p["e_mark"] = nn.init_matrix(len(self.vocab), d, gen)
        add_cell = nn.add_rnn if config.history_cell == "rnn" else nn.add_gru
        if config.kind != "swp" or config.swp_variant == "history":
            add_cell(p, "hist", d, d, gen)
        if config.kind == "nolook":
            p["w_out"] = nn.init_matrix(len(self.vocab), 1 + d, gen)
        elif config.kind == "swa":
            p["e_pair"] = nn.init_matrix(len(self.pair_vocab), d, gen)
            if config.history_cell == "rnn":
                nn.add_rnn(p, "enc.fwd", d, d // 2, gen)
                nn.add_rnn(p, "enc.bwd", d, d // 2, gen)
            else:
                nn.add_bi_gru(p, "enc", d, d, gen)
            p["w_out"] = nn.init_matrix(len(self.vocab), 1 + 2 * d, gen)
        elif config.kind == "sws":
            p["e_pair"] = nn.init_matrix(len(self.pair_vocab), d, gen)
            add_cell(p, "enc_x", d, d, gen)
            add_cell(p, "enc_y", d, d, gen)
            p["w_out"] = nn.init_matrix(len(self.vocab), 1 + 3 * d, gen)
        elif config.kind == "swp":
            p["swp_u"] = nn.init_matrix(d, 1 + 2 * d, gen)
            p["swp_w"] = nn.init_matrix(1, d, gen)[0]
        self.params = p

    @property
    def kind(self) -> str:
        return self.config.kind

    def _cell(self, prefix: str, x: torch.Tensor, h: torch.Tensor):
        if self.config.history_cell == "rnn":
            return nn.rnn_step(self.params, prefix, x, h)
        return nn.gru_step(self.params, prefix, x, h)

    def _embed_pair(self, symbols: Sequence[str]) -> torch.Tensor:
        ids = self.pair_vocab.encode(symbols)
        if not ids:
            return torch.zeros(0, self.config.dim, dtype=nn.DTYPE)
        return self.params["e_pair"][torch.tensor(ids, dtype=torch.long)]

    # -- per-pair setup --

    def begin(self, lat: Lattice) -> Context:
        aug = augment(lat, self.vocab)
        ctx = Context(aug=aug)
        ctx.arc_by_mark = {(aug.arc_src[i], aug.arc_mark[i]): i
                           for i in range(aug.n_arcs)}
        if self.kind == "swa":
            joint = tuple(lat.x) + (SEP,) + tuple(reversed(lat.y))
            embs = self._embed_pair(joint)
            if self.config.history_cell == "rnn":
                fwd = self._run_cell("enc.fwd", embs)
                bwd = self._run_cell("enc.bwd", embs.flip(0)).flip(0)
                ctx.enc = torch.cat([fwd, bwd], dim=-1)
            else:
                ctx.enc = nn.bi_encode(self.params, "enc", embs)
        elif self.kind == "sws":
            ex = self._suffix_table("enc_x", lat.x)
            ey = self._suffix_table("enc_y", lat.y)
            ns = torch.tensor([n for n, _ in aug.progress], dtype=torch.long)
            ms = torch.tensor([m for _, m in aug.progress], dtype=torch.long)
            ctx.state_enc = torch.cat([ex[ns], ey[ms]], dim=1)
        elif self.kind == "swp":
            ctx.tables = self.precompute(aug)
        return ctx

    def _run_cell(self, prefix: str, xs: torch.Tensor) -> torch.Tensor:
        hid = self.params[f"{prefix}.w_hh"].shape[1]
        h = torch.zeros(hid, dtype=nn.DTYPE)
        states = []
        for t in range(xs.shape[0]):
            h = self._cell(prefix, xs[t], h)
            states.append(h)
        return (torch.stack(states) if states
                else torch.zeros(0, hid, dtype=nn.DTYPE))

    def _suffix_table(self, prefix: str, s: SymStr) -> torch.Tensor:
        """Row i encodes the suffix s[i:], scanned right to left; the empty
        suffix encodes to zeros."""
        d = self.config.dim
        embs = self._embed_pair(s)
        rows = [torch.zeros(d, dtype=nn.DTYPE)]
        h = rows[0]
        for i in range(len(s) - 1, -1, -1):
            h = self._cell(prefix, embs[i], h)
            rows.append(h)
        return torch.stack(rows[::-1])

    # -- swp precompute --

    def precompute(self, aug: AugLattice) -> SwpTables:
        d = self.config.dim
        u, w_vec = self.params["swp_u"], self.params["swp_w"]
        e_mark = self.params["e_mark"]
        st = aug.structure()
        # Terminal states (the sink) keep zero embedding and log beta 0,
        # the beta = 1 base case; deeper levels overwrite their own rows.
        e_state = torch.zeros(aug.n_states, d, dtype=nn.DTYPE)
        log_beta = torch.zeros(aug.n_states, dtype=nn.DTYPE)
        arc_emb = torch.zeros(aug.n_arcs, d, dtype=nn.DTYPE)
        arc_log_w = torch.zeros(aug.n_arcs, dtype=nn.DTYPE)
        arc_log_q = torch.zeros(aug.n_arcs, dtype=nn.DTYPE)
        for states, arcs in st.levels:
            seg, dst = st.src[arcs], st.dst[arcs]
            ones = torch.ones(len(arcs), 1, dtype=nn.DTYPE)
            feats = torch.cat([ones, e_mark[st.mark[arcs]], e_state[dst]], 1)
            e_arcs = torch.sigmoid(feats @ u.T)
            log_w = e_arcs @ w_vec
            # The end arc keeps fixed weight 1, reproducing the classic
            # final-state indicator in the backward recurrence.
            log_w = torch.where(st.eos[arcs], torch.zeros_like(log_w), log_w)
            contrib = log_w + log_beta[dst]
            lb = _segment_logsumexp(contrib, seg, aug.n_states)
            log_beta = log_beta.index_copy(0, states, lb[states])
            log_q = contrib - log_beta[seg]
            es = torch.zeros(aug.n_states, d, dtype=nn.DTYPE)
            es = es.index_add(0, seg, log_q.exp()[:, None] * e_arcs)
            e_state = e_state.index_copy(0, states, es[states])
            arc_emb = arc_emb.index_copy(0, arcs, e_arcs)
            arc_log_w = arc_log_w.index_copy(0, arcs, log_w)
            arc_log_q = arc_log_q.index_copy(0, arcs, log_q)
        return SwpTables(arc_embeddings=arc_emb, log_weights=arc_log_w,
                         state_embeddings=e_state, log_beta=log_beta,
                         log_transition=arc_log_q, aug=aug)

    # -- stepwise distributions --

    def _mark_log_dists(self, ctx: Context, h: torch.Tensor,
                        states: Sequence[int]) -> torch.Tensor:
        """(B, V) log distribution over next marks for history-based kinds;
        marks without an out-arc get -inf."""
        base = torch.cat([torch.ones(h.shape[0], 1, dtype=nn.DTYPE), h], 1)
        if self.kind == "swa":
            scores = torch.softmax(ctx.enc @ h.T, dim=0)
            inputs = torch.cat([base, scores.T @ ctx.enc], 1)
        elif self.kind == "sws":
            idx = torch.tensor(list(states), dtype=torch.long)
            inputs = torch.cat([base, ctx.state_enc[idx]], 1)
        elif self.kind == "nolook":
            inputs = base
        else:
            raise DataError("swp distributions come from the tables")
        logits = inputs @ self.params["w_out"].T
        mask = ctx.aug.allowed[torch.tensor(list(states), dtype=torch.long)]
        return torch.log_softmax(
            logits.masked_fill(~mask, -torch.inf), dim=-1)

    def _swp_history_group(self, ctx: Context, h_rows: torch.Tensor,
                           state: int) -> torch.Tensor:
        """Experimental variant: one precompute pass, but step t reweights
        arcs by exp(h . e_arc) * beta(target) instead of the static w.
        Returns (rows, out_degree) log probabilities."""
        t = ctx.tables
        arcs = ctx.aug.out[state]
        idx = torch.tensor(arcs, dtype=torch.long)
        down = torch.stack([t.log_beta[ctx.aug.arc_dst[a]] for a in arcs])
        scores = h_rows @ t.arc_embeddings[idx].T + down[None, :]
        return torch.log_softmax(scores, dim=1)

    def _swp_history_log_dist(self, ctx: Context, h_b: torch.Tensor,
                              state: int) -> torch.Tensor:
        return self._swp_history_group(ctx, h_b[None], state)[0]

    def _arc_log_probs(self, ctx: Context, h_b, state: int) -> torch.Tensor:
        """Log probability of each out-arc of `state`, in aug.out order."""
        arcs = ctx.aug.out[state]
        if self.kind == "swp":
            if self.config.swp_variant == "history":
                return self._swp_history_log_dist(ctx, h_b, state)
            idx = torch.tensor(arcs, dtype=torch.long)
            return ctx.tables.log_transition[idx]
        dist = self._mark_log_dists(ctx, h_b[None], [state])[0]
        return dist[torch.tensor([ctx.aug.arc_mark[a] for a in arcs])]

    def _needs_history(self) -> bool:
        return self.kind != "swp" or self.config.swp_variant == "history"

    # -- sampling --

    def sample_batch(self, ctx: Context, rng: np.random.Generator, n: int,
                     max_len: Optional[int] = None) -> list[dict]:
        """Draw n paths in lockstep; returns dicts with keys path (lattice
        arcs), marks, log_q (float).  max_len rejects over-long walks; on
        these acyclic lattices it only fires when set below the depth.

        Walks at the same state draw from one shared distribution, so each
        step costs one vectorized categorical per occupied state."""
        aug = ctx.aug
        d = self.config.dim
        arc_dst = np.array(aug.arc_dst, dtype=np.int64)
        arc_mark = np.array(aug.arc_mark, dtype=np.int64)
        out: list[Optional[dict]] = [None] * n
        pending = list(range(n))
        attempts = 0
        hist_kind = self.kind in ("swa", "sws", "nolook")
        while pending:
            attempts += 1
            if attempts > 100:
                raise LimitExceeded("sampling keeps exceeding max_len")
            b = len(pending)
            states = np.full(b, aug.lat.initial, dtype=np.int64)
            h = torch.zeros(b, d, dtype=nn.DTYPE)
            log_q = np.zeros(b)
            paths: list[list[int]] = [[] for _ in range(b)]
            alive = np.arange(b)
            overlong = np.zeros(0, dtype=np.int64)
            step = 0
            while alive.size:
                step += 1
                if max_len is not None and step > max_len:
                    overlong = alive
                    break
                if hist_kind:
                    dists = self._mark_log_dists(
                        ctx, h[torch.from_numpy(alive)],
                        states[alive].tolist()).detach()
                chosen = np.empty(alive.size, dtype=np.int64)
                for state in sorted(set(states[alive].tolist())):
                    rows = np.nonzero(states[alive] == state)[0]
                    arcs = np.array(aug.out[state], dtype=np.int64)
                    if hist_kind:
                        lp = dists[torch.from_numpy(rows)][
                            :, torch.from_numpy(arc_mark[arcs])]
                    elif self.config.swp_variant == "history":
                        lp = self._swp_history_group(
                            ctx, h[torch.from_numpy(alive[rows])],
                            state).detach()
                    else:
                        lp = ctx.tables.log_transition[
                            torch.from_numpy(arcs)].detach().expand(
                                len(rows), -1)
                    probs = lp.exp().numpy()
                    u = rng.random(len(rows))
                    ks = np.minimum((np.cumsum(probs, 1) < u[:, None]).sum(1),
                                    len(arcs) - 1)
                    chosen[rows] = arcs[ks]
                    log_q[alive[rows]] += lp.numpy()[np.arange(len(rows)), ks]
                dsts = arc_dst[chosen]
                done = np.nonzero(dsts == aug.sink)[0]
                for r in done:
                    i = int(alive[r])
                    out[pending[i]] = {
                        "path": tuple(aug.lat.machine.arcs[j]
                                      for j in paths[i]),
                        "marks": tuple(aug.lat.machine.arcs[j].marks[0]
                                       for j in paths[i]),
                        "log_q": float(log_q[i]),
                    }
                cont = np.nonzero(dsts != aug.sink)[0]
                for r in cont:
                    paths[int(alive[r])].append(aug.arc_lat_index[chosen[r]])
                states[alive[cont]] = dsts[cont]
                if cont.size and self._needs_history():
                    rows_t = torch.from_numpy(alive[cont])
                    embs = self.params["e_mark"][
                        torch.from_numpy(arc_mark[chosen[cont]])]
                    h[rows_t] = self._cell("hist", embs, h[rows_t]).detach()
                alive = alive[cont]
            pending = [pending[int(i)] for i in overlong]
        return out  # type: ignore[return-value]

    # -- teacher forcing --

    def _aug_arc_ids(self, ctx: Context, path: Sequence[Arc]) -> list[int]:
        aug = ctx.aug
        state = aug.lat.initial
        ids = []
        for arc in path:
            if arc.src != state:
                raise InvalidPath(f"arc from {arc.src} does not continue "
                                  f"state {state}")
            key = (state, self.vocab[arc.marks[0]])
            if key not in ctx.arc_by_mark:
                raise InvalidPath(f"no arc with mark {arc.marks[0]!r} at "
                                  f"state {state}")
            a = ctx.arc_by_mark[key]
            if aug.arc_dst[a] != arc.dst:
                raise InvalidPath(f"arc target {arc.dst} does not match")
            ids.append(a)
            state = arc.dst
        if not aug.lat.is_final(state):
            raise InvalidPath(f"path stops at non-final state {state}")
        ids.append(ctx.arc_by_mark[(state, self.eos_id)])
        return ids

    def forced_logprob(self, ctx: Context, paths: Sequence[Sequence[Arc]],
                       dropout_p: float = 0.0,
                       gen: Optional[torch.Generator] = None) -> torch.Tensor:
        """Differentiable log q of each path (B,); the stop choice at the
        end of every path is included."""
        aug = ctx.aug
        arc_ids = [self._aug_arc_ids(ctx, p) for p in paths]
        if self.kind == "swp" and self.config.swp_variant == "static":
            table = ctx.tables.log_transition
            return torch.stack([table[torch.tensor(ids)].sum()
                                for ids in arc_ids])
        batch = len(paths)
        tmax = max(len(ids) for ids in arc_ids)
        h = torch.zeros(batch, self.config.dim, dtype=nn.DTYPE)
        total = torch.zeros(batch, dtype=nn.DTYPE)
        states = [aug.lat.initial] * batch
        for t in range(tmax):
            live = [b for b in range(batch) if t < len(arc_ids[b])]
            if self.kind == "swp":
                lps = []
                for b in live:
                    arcs = aug.out[states[b]]
                    lp = self._swp_history_log_dist(ctx, h[b], states[b])
                    lps.append(lp[arcs.index(arc_ids[b][t])])
                picked = torch.stack(lps)
            else:
                dists = self._mark_log_dists(ctx, h[live],
                                             [states[b] for b in live])
                marks = torch.tensor([aug.arc_mark[arc_ids[b][t]]
                                      for b in live])
                picked = dists.gather(1, marks[:, None])[:, 0]
            total = total.index_add(0, torch.tensor(live), picked)
            advancing = [b for b in live
                         if aug.arc_dst[arc_ids[b][t]] != aug.sink]
            if advancing and self._needs_history():
                embs = self.params["e_mark"][torch.tensor(
                    [aug.arc_mark[arc_ids[b][t]] for b in advancing])]
                rows = torch.tensor(advancing)
                h_new = self._cell("hist", embs, h[rows])
                if dropout_p > 0.0:
                    h_new = nn.dropout(h_new, dropout_p, gen, training=True)
                h = h.index_copy(0, rows, h_new)
            for b in advancing:
                states[b] = aug.arc_dst[arc_ids[b][t]]
        return total

    # -- persistence --

    def digest(self) -> str:
        return nn.params_digest(self.params)

    def save(self, path) -> None:
        cfg = {"kind": self.config.kind, "marks": list(self.config.marks),
               "pair_symbols": list(self.config.pair_symbols),
               "dim": self.config.dim,
               "history_cell": self.config.history_cell,
               "swp_variant": self.config.swp_variant}
        nn.save_checkpoint(path, self.params,
                           {"container": "sampler", "seed": self.seed, **cfg})

    @classmethod
    def load(cls, path) -> "Sampler":
        params, meta = nn.load_checkpoint(path)
        if meta.get("container") != "sampler":
            raise DataError(f"{path} is not a sampler checkpoint")
        config = SamplerConfig(kind=meta["kind"], marks=tuple(meta["marks"]),
                               pair_symbols=tuple(meta["pair_symbols"]),
                               dim=meta["dim"],
                               history_cell=meta["history_cell"],
                               swp_variant=meta["swp_variant"])
        return cls(config, seed=meta["seed"], params=params)


# --- operation wrappers ------------------------------------------------------

def _walk_prefix(sampler: Sampler, ctx: Context, prefix: Sequence[Arc]):
    """Replay a path prefix, returning (state, history)."""
    aug = ctx.aug
    state = aug.lat.initial
    h = torch.zeros(sampler.config.dim, dtype=nn.DTYPE)
    for arc in prefix:
        if arc.src != state or (state, sampler.vocab[arc.marks[0]]) \
                not in ctx.arc_by_mark:
            raise InvalidPath(f"prefix breaks at state {state}: {arc}")
        if sampler._needs_history():
            h = sampler._cell("hist", sampler.params["e_mark"]
                              [sampler.vocab[arc.marks[0]]], h)
        state = arc.dst
    return state, h


def _dist_after_prefix(sampler: Sampler, lat: Lattice, prefix: Sequence[Arc],
                       ctx: Optional[Context] = None) -> dict[str, float]:
    ctx = ctx or sampler.begin(lat)
    state, h = _walk_prefix(sampler, ctx, prefix)
    lps = sampler._arc_log_probs(ctx, h, state)
    return {EOS if ctx.aug.arc_dst[a] == ctx.aug.sink
            else lat.machine.arcs[ctx.aug.arc_lat_index[a]].marks[0]:
            math.exp(float(lps[k].detach()))
            for k, a in enumerate(ctx.aug.out[state])}


def _expect_kind(sampler: Sampler, kind: str) -> None:
    if sampler.kind != kind:
        raise DataError(f"need a {kind} sampler, got {sampler.kind}")


def swa_next_dist(sampler: Sampler, lat: Lattice, prefix: Sequence[Arc],
                  cache: Optional[Context] = None) -> dict[str, float]:
    _expect_kind(sampler, "swa")
    return _dist_after_prefix(sampler, lat, prefix, cache)


def sws_next_dist(sampler: Sampler, lat: Lattice,
                  prefix: Sequence[Arc]) -> dict[str, float]:
    _expect_kind(sampler, "sws")
    return _dist_after_prefix(sampler, lat, prefix)


def nolook_next_dist(sampler: Sampler, lat: Lattice,
                     prefix: Sequence[Arc]) -> dict[str, float]:
    _expect_kind(sampler, "nolook")
    return _dist_after_prefix(sampler, lat, prefix)


def swp_precompute(sampler: Sampler, lat: Lattice) -> SwpTables:
    _expect_kind(sampler, "swp")
    return sampler.precompute(augment(lat, sampler.vocab))


def swp_next_dist(tables: SwpTables, state: int) -> dict[str, float]:
    aug = tables.aug
    return {EOS if aug.arc_dst[a] == aug.sink
            else aug.lat.machine.arcs[aug.arc_lat_index[a]].marks[0]:
            math.exp(float(tables.log_transition[a].detach()))
            for a in aug.out[state]}


def swp_tables_from_log_weights(aug: AugLattice,
                                log_weights: torch.Tensor) -> SwpTables:
    """The backward recurrence alone, with arc weights injected directly.

    Used to verify beta and the transitions against enumeration and to
    study weight rescalings without touching any parameters.
    """
    if log_weights.shape != (aug.n_arcs,):
        raise DataError("need one log weight per augmented arc")
    st = aug.structure()
    log_beta = torch.zeros(aug.n_states, dtype=nn.DTYPE)
    log_q = torch.zeros(aug.n_arcs, dtype=nn.DTYPE)
    for states, arcs in st.levels:
        seg = st.src[arcs]
        contrib = log_weights[arcs] + log_beta[st.dst[arcs]]
        lb = _segment_logsumexp(contrib, seg, aug.n_states)
        log_beta = log_beta.index_copy(0, states, lb[states])
        log_q = log_q.index_copy(0, arcs, contrib - log_beta[seg])
    zeros = torch.zeros(aug.n_arcs, 1, dtype=nn.DTYPE)
    return SwpTables(arc_embeddings=zeros, log_weights=log_weights.clone(),
                     state_embeddings=torch.zeros(aug.n_states, 1,
                                                  dtype=nn.DTYPE),
                     log_beta=log_beta, log_transition=log_q, aug=aug)


def sample_path(sampler: Sampler, lat: Lattice, rng: np.random.Generator,
                scorer: Optional[Scorer] = None,
                ctx: Optional[Context] = None) -> WeightedSample:
    ctx = ctx or sampler.begin(lat)
    draw = sampler.sample_batch(ctx, rng, 1)[0]
    return weigh([draw], scorer)[0]


def weigh(draws: Sequence[dict], scorer: Optional[Scorer]) -> list[WeightedSample]:
    """Attach scorer weights to raw draws; without a scorer the weight
    fields are NaN placeholders."""
    if scorer is None:
        return [WeightedSample(d["path"], d["marks"], d["log_q"],
                               math.nan, math.nan) for d in draws]
    scores = scorer.score_batch([d["marks"] for d in draws]).detach()
    return [WeightedSample(d["path"], d["marks"], d["log_q"], float(lp),
                           math.exp(float(lp) - d["log_q"]))
            for d, lp in zip(draws, scores)]


def path_logprob(sampler: Sampler, lat: Lattice, path: Sequence[Arc],
                 ctx: Optional[Context] = None) -> torch.Tensor:
    ctx = ctx or sampler.begin(lat)
    return sampler.forced_logprob(ctx, [tuple(path)])[0]

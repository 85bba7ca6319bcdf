"""Task topologies and corpus pipelines.

Three marked machines cover the tasks: a deletion/insertion machine that
freely generates any pair, the same plus copy arcs, and a substitution
cipher built from seeded permutations and composed with the copy machine
so every enciphered symbol is then copied or deleted.

Marks follow one rendering convention throughout: operation marks are
fixed tokens, a symbol consumed on the input side appears as ``<a>``,
and a symbol on the output side as ``<a'>``.  The prime keeps the two
sides distinct even when the alphabets coincide, so the mark alphabet is
always the disjoint union of operations, cipher selectors, and the two
per-symbol groups.
"""

import dataclasses
import re
import statistics
from typing import Mapping, Optional

import numpy as np

from .errors import DataError
from .fst import Arc, Mfst, SymStr, compose_mfst
from .lattice import determinize

DELETE = "<delete>"
INSERT = "<insert>"
REPLACE = "<replace>"
COPY = "<copy>"
OPERATIONS = (DELETE, INSERT, REPLACE, COPY)

SPLITS = ("train", "valid", "test")

_SELECTOR_RX = re.compile(r"<cipher(\d+)>")


def _in_mark(sym: str) -> str:
    return f"<{sym}>"


def _out_mark(sym: str) -> str:
    return f"<{sym}'>"


@dataclasses.dataclass(frozen=True)
class MarkScheme:
    """Mark vocabulary for a task: which token stands for which operation
    or symbol, and how an arc's mark string decomposes into groups."""

    input_marks: Mapping[str, str]
    output_marks: Mapping[str, str]
    selectors: tuple[str, ...] = ()
    operations: tuple[str, ...] = OPERATIONS

    def __post_init__(self):
        groups = (tuple(self.operations) + tuple(self.selectors)
                  + tuple(self.input_marks.values())
                  + tuple(self.output_marks.values()))
        if len(set(groups)) != len(groups):
            raise DataError("mark scheme groups are not disjoint: "
                            f"{sorted(m for m in set(groups) if groups.count(m) > 1)}")

    @property
    def marks(self) -> tuple[str, ...]:
        return (tuple(self.operations) + tuple(self.selectors)
                + tuple(self.input_marks.values())
                + tuple(self.output_marks.values()))

    def in_mark(self, sym: str) -> str:
        try:
            return self.input_marks[sym]
        except KeyError:
            raise DataError(f"symbol {sym!r} not in the scheme's input alphabet")

    def out_mark(self, sym: str) -> str:
        try:
            return self.output_marks[sym]
        except KeyError:
            raise DataError(f"symbol {sym!r} not in the scheme's output alphabet")

    def parse(self, marks: SymStr) -> tuple[SymStr, ...]:
        """Split a mark string into operation groups, left to right.

        Raises DataError when the string does not decompose: an unknown
        leading token, or an operation missing its symbol marks.
        """
        ins = frozenset(self.input_marks.values())
        outs = frozenset(self.output_marks.values())
        # <delete> takes whichever side the local machine consumes from.
        arity = {DELETE: (ins | outs,), INSERT: (outs,), COPY: (outs,),
                 REPLACE: (ins, outs)}
        groups = []
        i = 0
        while i < len(marks):
            head = marks[i]
            if head in self.selectors:
                groups.append((head,))
                i += 1
                continue
            if head not in arity:
                raise DataError(f"mark {head!r} at position {i} does not "
                                f"start an operation group")
            wants = arity[head]
            tail = marks[i + 1:i + 1 + len(wants)]
            for mark, allowed in zip(tail, wants):
                if mark not in allowed:
                    raise DataError(f"operation {head} followed by {mark!r}, "
                                    f"not a symbol mark of the right side")
            if len(tail) < len(wants):
                raise DataError(f"operation {head} truncated at end of string")
            groups.append((head,) + tail)
            i += 1 + len(wants)
        return tuple(groups)

    def well_formed(self, marks: SymStr) -> bool:
        try:
            self.parse(marks)
            return True
        except DataError:
            return False


def make_scheme(sigma, delta, n_ciphers: int = 0) -> MarkScheme:
    selectors = tuple(f"<cipher{i}>" for i in range(1, n_ciphers + 1))
    return MarkScheme(input_marks={s: _in_mark(s) for s in sorted(sigma)},
                      output_marks={s: _out_mark(s) for s in sorted(delta)},
                      selectors=selectors)


# --- topologies --------------------------------------------------------------

def topology_del_ins(sigma, delta, scheme: Optional[MarkScheme] = None) -> Mfst:
    """Single-state machine that deletes any input symbol and inserts any
    output symbol, so it generates every pair with every interleaving."""
    scheme = scheme or make_scheme(sigma, delta)
    arcs = [Arc(0, (a,), (), (DELETE, scheme.in_mark(a)), 0)
            for a in sorted(sigma)]
    arcs += [Arc(0, (), (b,), (INSERT, scheme.out_mark(b)), 0)
             for b in sorted(delta)]
    return Mfst(frozenset(sigma), frozenset(delta), frozenset(scheme.marks),
                n_states=1, arcs=tuple(arcs), initial=0, finals=frozenset({0}))


def topology_del_ins_copy(delta, scheme: Optional[MarkScheme] = None) -> Mfst:
    """Deletion/insertion over one alphabet plus a copy arc per symbol.

    All three operations reference output-side marks: the machine's
    symbols play the output role when it serves as the noise stage of a
    composed task, and keeping one rendering makes the composed mark
    vocabulary the plain union of the stages'.
    """
    scheme = scheme or make_scheme(delta, delta)
    arcs = []
    for b in sorted(delta):
        mark = scheme.out_mark(b)
        arcs.append(Arc(0, (b,), (), (DELETE, mark), 0))
        arcs.append(Arc(0, (), (b,), (INSERT, mark), 0))
        arcs.append(Arc(0, (b,), (b,), (COPY, mark), 0))
    return Mfst(frozenset(delta), frozenset(delta), frozenset(scheme.marks),
                n_states=1, arcs=tuple(arcs), initial=0, finals=frozenset({0}))


def fisher_yates(items: list, rng: np.random.Generator) -> list:
    """Uniform random permutation; the classic downward swap loop."""
    out = list(items)
    for j in range(len(out) - 1, 0, -1):
        k = int(rng.integers(0, j + 1))
        out[j], out[k] = out[k], out[j]
    return out


def cipher_tables(sigma, delta, n_ciphers: int, seed: int) -> tuple[dict, ...]:
    """The substitution tables, one independent permutation per cipher."""
    src, dst = sorted(sigma), sorted(delta)
    if len(src) != len(dst):
        raise DataError(f"cipher needs equal alphabet sizes, got "
                        f"{len(src)} vs {len(dst)}")
    rng = np.random.default_rng(seed)
    return tuple(dict(zip(src, fisher_yates(dst, rng)))
                 for _ in range(n_ciphers))


def cipher_stage(sigma, delta, n_ciphers: int = 5, seed: int = 0,
                 scheme: Optional[MarkScheme] = None) -> Mfst:
    """The selection-plus-substitution machine alone: an initial state
    with one selector arc per cipher, then per-cipher substitution loops."""
    scheme = scheme or make_scheme(sigma, delta, n_ciphers)
    tables = cipher_tables(sigma, delta, n_ciphers, seed)
    arcs = []
    for i, table in enumerate(tables, start=1):
        arcs.append(Arc(0, (), (), (f"<cipher{i}>",), i))
        for a in sorted(table):
            b = table[a]
            arcs.append(Arc(i, (a,), (b,),
                            (REPLACE, scheme.in_mark(a), scheme.out_mark(b)),
                            i))
    return Mfst(frozenset(sigma), frozenset(delta), frozenset(scheme.marks),
                n_states=1 + n_ciphers, arcs=tuple(arcs), initial=0,
                finals=frozenset(range(1, n_ciphers + 1)))


def build_cipher_mfst(sigma, delta, n_ciphers: int = 5, seed: int = 0,
                      scheme: Optional[MarkScheme] = None) -> Mfst:
    """Cipher selection and substitution composed with the copy machine,
    so each enciphered symbol is afterwards copied or deleted and fresh
    symbols can be inserted anywhere."""
    scheme = scheme or make_scheme(sigma, delta, n_ciphers)
    return compose_mfst(cipher_stage(sigma, delta, n_ciphers, seed, scheme),
                        topology_del_ins_copy(delta, scheme))


def ciphers_of(t: Mfst) -> tuple[dict, ...]:
    """Read the substitution tables back out of a composed cipher machine.

    Selector arcs name the ciphers; the substitutions are the
    replace-and-copy arcs reachable from each selector's target.
    """
    starts: dict[int, list[int]] = {}
    for a in t.arcs:
        if len(a.marks) == 1 and _SELECTOR_RX.fullmatch(a.marks[0]):
            starts.setdefault(int(_SELECTOR_RX.fullmatch(a.marks[0]).group(1)),
                              []).append(a.dst)
    if not starts or sorted(starts) != list(range(1, len(starts) + 1)):
        raise DataError("machine has no contiguous <cipherN> selector arcs")
    tables = []
    for i in sorted(starts):
        table: dict[str, str] = {}
        seen = set(starts[i])
        stack = list(seen)
        while stack:
            q = stack.pop()
            for a in t.out_arcs(q):
                if a.marks and a.marks[0] == REPLACE and a.olabel:
                    sub = table.setdefault(a.ilabel[0], a.olabel[0])
                    if sub != a.olabel[0]:
                        raise DataError(f"cipher {i} maps {a.ilabel[0]!r} "
                                        f"two ways")
                if a.dst not in seen:
                    seen.add(a.dst)
                    stack.append(a.dst)
        if (sorted(table) != sorted(t.input_alphabet)
                or sorted(set(table.values())) != sorted(t.output_alphabet)):
            raise DataError(f"cipher {i} is not a bijection over the alphabets")
        tables.append(table)
    return tuple(tables)


# --- corpora -----------------------------------------------------------------

@dataclasses.dataclass(frozen=True)
class StatsRow:
    split: str
    n_pairs: int
    mean_x_len: float
    mean_y_len: float
    mean_states: float
    mean_arcs: float
    mark_vocab: int


@dataclasses.dataclass(frozen=True)
class CorpusSplit:
    """One split of a paired corpus, with optional gold mark strings."""

    split: str
    pairs: tuple[tuple[SymStr, SymStr], ...]
    sigma: frozenset[str]
    delta: frozenset[str]
    gold: Optional[tuple[SymStr, ...]] = None

    def __post_init__(self):
        if self.split not in SPLITS:
            raise DataError(f"unknown split {self.split!r}")
        for x, y in self.pairs:
            if not set(x) <= self.sigma or not set(y) <= self.delta:
                raise DataError(f"pair {(x, y)} strays outside the declared "
                                f"alphabets")
        if self.gold is not None and len(self.gold) != len(self.pairs):
            raise DataError("gold alignments do not match the pairs")


def _sample_length(rng: np.random.Generator, mean: float) -> int:
    return 1 + int(rng.poisson(mean - 1.0))


def _check_profile(sizes, means):
    for name in sizes:
        if name not in SPLITS:
            raise DataError(f"unknown split {name!r}")
        if name not in means:
            raise DataError(f"no mean length given for split {name!r}")
        if means[name] < 1.0:
            raise DataError(f"mean length for {name!r} must be at least 1")


def gen_cipher_corpus(t: Mfst, sizes: Mapping[str, int],
                      mean_len: Mapping[str, float],
                      noise: tuple[float, float] = (0.1, 0.1),
                      seed: int = 0) -> dict[str, CorpusSplit]:
    """Draw pairs from a composed cipher machine.

    Each pair: sample x (symbols uniform, length 1 + Poisson around the
    split's mean), pick a cipher uniformly, encipher, drop each output
    symbol with probability noise[0], insert a uniform symbol at each
    remaining gap with probability noise[1].  The generating mark string
    is kept as gold metadata.  Every pair is drawn from its own child
    seed, so generation order does not matter.
    """
    _check_profile(sizes, mean_len)
    p_del, p_ins = noise
    tables = ciphers_of(t)
    sigma = sorted(t.input_alphabet)
    delta = sorted(t.output_alphabet)
    scheme = make_scheme(sigma, delta, len(tables))
    out = {}
    for name in (s for s in SPLITS if s in sizes):
        pairs, gold = [], []
        for i in range(sizes[name]):
            rng = np.random.default_rng([seed, SPLITS.index(name), i])
            x = tuple(sigma[k] for k in
                      rng.integers(0, len(sigma),
                                   _sample_length(rng, mean_len[name])))
            c = int(rng.integers(0, len(tables)))
            z = [tables[c][a] for a in x]
            kept = rng.random(len(x)) >= p_del
            gaps = rng.random(int(kept.sum()) + 1) < p_ins
            fills = [delta[k] for k in
                     rng.integers(0, len(delta), int(gaps.sum()))]

            y: list[str] = []
            marks: list[str] = [f"<cipher{c + 1}>"]
            fill_it = iter(fills)

            def insert_at(gap: int):
                if gaps[gap]:
                    b = next(fill_it)
                    y.append(b)
                    marks.extend((INSERT, scheme.out_mark(b)))

            insert_at(0)
            survivors = 0
            for a, b, keep in zip(x, z, kept):
                marks.extend((REPLACE, scheme.in_mark(a), scheme.out_mark(b)))
                if keep:
                    marks.extend((COPY, scheme.out_mark(b)))
                    y.append(b)
                    survivors += 1
                    insert_at(survivors)
                else:
                    marks.extend((DELETE, scheme.out_mark(b)))
            pairs.append((x, tuple(y)))
            gold.append(tuple(marks))
        out[name] = CorpusSplit(name, tuple(pairs), frozenset(sigma),
                                frozenset(delta), gold=tuple(gold))
    return out


def gen_tr_corpus(sigma, delta, sizes: Mapping[str, int],
                  mean_len: Mapping[str, float],
                  seed: int = 0) -> dict[str, CorpusSplit]:
    """Monotonic transliteration stand-in over disjoint alphabets.

    A seeded table maps each (previous, current) input context to one or
    two output symbols; y is the concatenation in input order, so the
    true alignment never crosses.  Gold mark strings target the
    deletion/insertion topology.
    """
    sigma, delta = sorted(sigma), sorted(delta)
    if set(sigma) & set(delta):
        raise DataError("transliteration alphabets must be disjoint")
    _check_profile(sizes, mean_len)
    scheme = make_scheme(sigma, delta)
    table_rng = np.random.default_rng([seed, 101])
    table = {}
    for prev in [None] + sigma:
        for cur in sigma:
            n_out = 1 + int(table_rng.random() < 0.3)
            table[(prev, cur)] = tuple(
                delta[k] for k in table_rng.integers(0, len(delta), n_out))
    out = {}
    for name in (s for s in SPLITS if s in sizes):
        pairs, gold = [], []
        for i in range(sizes[name]):
            rng = np.random.default_rng([seed, SPLITS.index(name), i])
            x = tuple(sigma[k] for k in
                      rng.integers(0, len(sigma),
                                   _sample_length(rng, mean_len[name])))
            y: list[str] = []
            marks: list[str] = []
            prev = None
            for a in x:
                marks.extend((DELETE, scheme.in_mark(a)))
                for b in table[(prev, a)]:
                    y.append(b)
                    marks.extend((INSERT, scheme.out_mark(b)))
                prev = a
            pairs.append((x, tuple(y)))
            gold.append(tuple(marks))
        out[name] = CorpusSplit(name, tuple(pairs), frozenset(sigma),
                                frozenset(delta), gold=tuple(gold))
    return out


# --- TSV and statistics ------------------------------------------------------

def load_tsv(path, split: str = "train") -> CorpusSplit:
    """Two tab-separated, space-tokenized columns per line; alphabets are
    induced from the data."""
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            cols = line.split("\t")
            if len(cols) != 2:
                raise DataError(f"{path}:{lineno}: expected 2 tab-separated "
                                f"columns, found {len(cols)}")
            pairs.append((tuple(cols[0].split()), tuple(cols[1].split())))
    sigma = frozenset(s for x, _ in pairs for s in x)
    delta = frozenset(s for _, y in pairs for s in y)
    return CorpusSplit(split, tuple(pairs), sigma, delta)


def save_tsv(split: CorpusSplit, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for x, y in split.pairs:
            fh.write(" ".join(x) + "\t" + " ".join(y) + "\n")


def corpus_stats(split: CorpusSplit, t: Mfst) -> StatsRow:
    """Mean pair lengths and mean lattice sizes before state merging (the
    merged sizes would understate what the samplers actually walk during
    subset construction)."""
    if not split.pairs:
        raise DataError(f"split {split.split!r} is empty")
    lats = [determinize(t, x, y) for x, y in split.pairs]
    return StatsRow(split=split.split, n_pairs=len(split.pairs),
                    mean_x_len=statistics.fmean(len(x) for x, _ in split.pairs),
                    mean_y_len=statistics.fmean(len(y) for _, y in split.pairs),
                    mean_states=statistics.fmean(l.n_states for l in lats),
                    mean_arcs=statistics.fmean(l.n_arcs for l in lats),
                    mark_vocab=len(t.mark_alphabet))


STATS_HEADER = "split\tpairs\tmean_x\tmean_y\tmean_states\tmean_arcs\tmarks"


def stats_to_text(rows) -> str:
    lines = [STATS_HEADER]
    for r in rows:
        lines.append("\t".join(str(v) for v in
                               (r.split, r.n_pairs, r.mean_x_len, r.mean_y_len,
                                r.mean_states, r.mean_arcs, r.mark_vocab)))
    return "\n".join(lines) + "\n"

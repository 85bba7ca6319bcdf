"""Marked finite-state transducers and the symbolic algorithms over them.

An Mfst is a transducer whose arcs carry an input substring, an output
substring, and a mark substring.  Generating paths (initial state to a
final state) emit the concatenation of each tape.  Strings over alphabets
are represented as tuples of symbol tokens so that multi-character tokens
(e.g. "I_TURN_LEFT") work the same as single characters.
"""

from __future__ import annotations

from collections import defaultdict, deque
from dataclasses import dataclass
from functools import cached_property
import heapq
from typing import Iterable, NamedTuple, Optional

from .errors import CyclicMachine, DataError, LimitExceeded

Sym = str
SymStr = tuple[Sym, ...]

EPS_TOKEN = "<eps>"

# Filter states for epsilon coordination in composition: 0 = may move either
# or both sides, 1 = committed to right-side epsilon moves, 2 = committed to
# left-side epsilon moves.  Real-symbol matches reset to 0.
_F_BOTH, _F_RIGHT_ONLY, _F_LEFT_ONLY = 0, 1, 2


class Arc(NamedTuple):
    src: int
    ilabel: SymStr
    olabel: SymStr
    marks: SymStr
    dst: int


def _check_syms(syms: Iterable[Sym], what: str) -> frozenset[Sym]:
    out = frozenset(syms)
    for s in out:
        if not isinstance(s, str) or not s or s.split() != [s] or s == EPS_TOKEN:
            raise DataError(f"bad {what} symbol {s!r}: symbols are nonempty, "
                            f"whitespace-free, and not {EPS_TOKEN!r}")
    return out


@dataclass(frozen=True)
class Mfst:
    """Immutable marked FST with dense integer state ids.

    The empty machine (no states at all) is the canonical empty-language
    result; its ``initial`` is None.
    """

    input_alphabet: frozenset[Sym]
    output_alphabet: frozenset[Sym]
    mark_alphabet: frozenset[Sym]
    n_states: int
    arcs: tuple[Arc, ...]
    initial: Optional[int]
    finals: frozenset[int]

    def __post_init__(self):
        object.__setattr__(self, "input_alphabet", _check_syms(self.input_alphabet, "input"))
        object.__setattr__(self, "output_alphabet", _check_syms(self.output_alphabet, "output"))
        object.__setattr__(self, "mark_alphabet", _check_syms(self.mark_alphabet, "mark"))
        object.__setattr__(self, "arcs", tuple(Arc(a.src, tuple(a.ilabel), tuple(a.olabel),
                                                   tuple(a.marks), a.dst) for a in self.arcs))
        object.__setattr__(self, "finals", frozenset(self.finals))
        if self.n_states == 0:
            if self.initial is not None or self.finals or self.arcs:
                raise DataError("empty machine must have no initial, finals, or arcs")
            return
        if self.initial is None or not (0 <= self.initial < self.n_states):
            raise DataError(f"initial state {self.initial} out of range")
        for q in self.finals:
            if not (0 <= q < self.n_states):
                raise DataError(f"final state {q} out of range")
        for a in self.arcs:
            if not (0 <= a.src < self.n_states and 0 <= a.dst < self.n_states):
                raise DataError(f"arc endpoints out of range: {a}")
            for s in a.ilabel:
                if s not in self.input_alphabet:
                    raise DataError(f"arc input symbol {s!r} not in input alphabet")
            for s in a.olabel:
                if s not in self.output_alphabet:
                    raise DataError(f"arc output symbol {s!r} not in output alphabet")
            for s in a.marks:
                if s not in self.mark_alphabet:
                    raise DataError(f"arc mark {s!r} not in mark alphabet")

    @property
    def is_empty(self) -> bool:
        return self.n_states == 0

    @cached_property
    def _adj(self) -> tuple[tuple[Arc, ...], ...]:
        out: list[list[Arc]] = [[] for _ in range(self.n_states)]
        for a in self.arcs:
            out[a.src].append(a)
        return tuple(tuple(row) for row in out)

    def out_arcs(self, q: int) -> tuple[Arc, ...]:
        return self._adj[q]

    def is_final(self, q: int) -> bool:
        return q in self.finals


EMPTY_MFST_TEMPLATE = dict(n_states=0, arcs=(), initial=None, finals=frozenset())


def _empty_like(m: Mfst) -> Mfst:
    return Mfst(m.input_alphabet, m.output_alphabet, m.mark_alphabet,
                **EMPTY_MFST_TEMPLATE)


@dataclass(frozen=True)
class GenPath:
    """A generating path plus the three strings it emits."""

    arcs: tuple[Arc, ...]
    x_emitted: SymStr
    y_emitted: SymStr
    marks: SymStr

    @classmethod
    def from_arcs(cls, arcs: Iterable[Arc]) -> "GenPath":
        arcs = tuple(arcs)
        x: list[Sym] = []
        y: list[Sym] = []
        w: list[Sym] = []
        for a in arcs:
            x.extend(a.ilabel)
            y.extend(a.olabel)
            w.extend(a.marks)
        return cls(arcs, tuple(x), tuple(y), tuple(w))


def _reachable(m: Mfst) -> set[int]:
    if m.is_empty:
        return set()
    seen = {m.initial}
    dq = deque(seen)
    while dq:
        q = dq.popleft()
        for a in m.out_arcs(q):
            if a.dst not in seen:
                seen.add(a.dst)
                dq.append(a.dst)
    return seen


def _coreachable(m: Mfst) -> set[int]:
    radj: dict[int, set[int]] = defaultdict(set)
    for a in m.arcs:
        radj[a.dst].add(a.src)
    seen = set(m.finals)
    dq = deque(seen)
    while dq:
        q = dq.popleft()
        for p in radj[q]:
            if p not in seen:
                seen.add(p)
                dq.append(p)
    return seen


def useful_states(m: Mfst) -> set[int]:
    """States on some initial-to-final path."""
    return _reachable(m) & _coreachable(m)


def trim(m: Mfst) -> Mfst:
    """Keep exactly the useful states; renumber densely by ascending old id.

    The renumbering is order-preserving, so trimming a trimmed machine
    returns an equal machine.
    """
    keep = useful_states(m)
    if m.initial not in keep:
        return _empty_like(m)
    order = sorted(keep)
    remap = {old: new for new, old in enumerate(order)}
    arcs = tuple(Arc(remap[a.src], a.ilabel, a.olabel, a.marks, remap[a.dst])
                 for a in m.arcs if a.src in keep and a.dst in keep)
    return Mfst(m.input_alphabet, m.output_alphabet, m.mark_alphabet,
                n_states=len(order), arcs=arcs, initial=remap[m.initial],
                finals=frozenset(remap[q] for q in m.finals if q in keep))


def topo_order(m: Mfst) -> tuple[int, ...]:
    """Topological order of all states (every arc goes earlier -> later).

    Deterministic: among ready states the smallest id comes first.
    Raises CyclicMachine if any cycle exists.
    """
    indeg = [0] * m.n_states
    for a in m.arcs:
        indeg[a.dst] += 1
    ready = [q for q in range(m.n_states) if indeg[q] == 0]
    heapq.heapify(ready)
    order: list[int] = []
    while ready:
        q = heapq.heappop(ready)
        order.append(q)
        for a in m.out_arcs(q):
            indeg[a.dst] -= 1
            if indeg[a.dst] == 0:
                heapq.heappush(ready, a.dst)
    if len(order) != m.n_states:
        stuck = [q for q in range(m.n_states) if indeg[q] > 0]
        raise CyclicMachine(f"machine has a cycle through states {stuck[:5]}")
    return tuple(order)


def enumerate_paths(m: Mfst, max_paths: int) -> list[GenPath]:
    """All generating paths, in lexicographic order of arc insertion index.

    Raises LimitExceeded if more than max_paths generating paths exist
    (including the infinite case of a cycle on a useful path).
    """
    keep = useful_states(m)
    if m.is_empty or m.initial not in keep:
        return []
    arc_index = {id(a): i for i, a in enumerate(m.arcs)}
    adj: list[list[Arc]] = [[] for _ in range(m.n_states)]
    for a in m.arcs:
        if a.src in keep and a.dst in keep:
            adj[a.src].append(a)
    paths: list[GenPath] = []
    # Stack holds (state, chosen-arc list); arcs tried in insertion order.
    stack: list[tuple[int, tuple[Arc, ...]]] = [(m.initial, ())]
    while stack:
        q, pref = stack.pop()
        if len(pref) > m.n_states:
            # A walk longer than the state count repeats a useful state, so
            # the path family is infinite.
            raise LimitExceeded("cycle on a useful path: infinitely many paths")
        if q in m.finals:
            paths.append(GenPath.from_arcs(pref))
            if len(paths) > max_paths:
                raise LimitExceeded(f"more than {max_paths} generating paths")
        for a in reversed(adj[q]):
            stack.append((a.dst, pref + (a,)))
    paths.sort(key=lambda p: tuple(arc_index[id(a)] for a in p.arcs))
    return paths


def compose_with_pair(t: Mfst, x: SymStr, y: SymStr) -> Mfst:
    """Restrict a machine to the paths that generate exactly (x, y).

    States of the result stand for triples (input progress, machine state,
    output progress); the result is trimmed, and may be empty.
    """
    x, y = tuple(x), tuple(y)
    for s in x:
        if s not in t.input_alphabet:
            raise DataError(f"input symbol {s!r} not in machine's input alphabet")
    for s in y:
        if s not in t.output_alphabet:
            raise DataError(f"output symbol {s!r} not in machine's output alphabet")
    if t.is_empty:
        return t
    start = (0, t.initial, 0)
    ids = {start: 0}
    frontier = deque([start])
    arcs: list[Arc] = []
    while frontier:
        (i, q, j) = triple = frontier.popleft()
        sid = ids[triple]
        for a in t.out_arcs(q):
            ni, nj = i + len(a.ilabel), j + len(a.olabel)
            if x[i:ni] != a.ilabel or y[j:nj] != a.olabel:
                continue
            ntriple = (ni, a.dst, nj)
            if ntriple not in ids:
                ids[ntriple] = len(ids)
                frontier.append(ntriple)
            arcs.append(Arc(sid, a.ilabel, a.olabel, a.marks, ids[ntriple]))
    finals = frozenset(ids[(len(x), f, len(y))] for f in t.finals
                       if (len(x), f, len(y)) in ids)
    composed = Mfst(t.input_alphabet, t.output_alphabet, t.mark_alphabet,
                    n_states=len(ids), arcs=tuple(arcs), initial=0, finals=finals)
    return trim(composed)


def split_labels(m: Mfst) -> Mfst:
    """Normalize arcs so every input/output label has length <= 1.

    Longer labels become chains through fresh states; the arc's marks ride
    on the first chain link so each original arc's marks stay contiguous.
    """
    if all(len(a.ilabel) <= 1 and len(a.olabel) <= 1 for a in m.arcs):
        return m
    n = m.n_states
    arcs: list[Arc] = []
    for a in m.arcs:
        steps = max(len(a.ilabel), len(a.olabel), 1)
        if steps == 1:
            arcs.append(a)
            continue
        hops = [a.src] + [n + k for k in range(steps - 1)] + [a.dst]
        n += steps - 1
        for k in range(steps):
            arcs.append(Arc(hops[k], a.ilabel[k:k + 1], a.olabel[k:k + 1],
                            a.marks if k == 0 else (), hops[k + 1]))
    return Mfst(m.input_alphabet, m.output_alphabet, m.mark_alphabet,
                n_states=n, arcs=tuple(arcs), initial=m.initial, finals=m.finals)


def compose_mfst(a: Mfst, b: Mfst) -> Mfst:
    """Compose two machines on (input of a, output of b).

    Marks concatenate per matched arc pair, left machine's marks first.
    Epsilon moves are coordinated through the standard three-state filter so
    each compatible path pair yields exactly one composed path.
    """
    if a.output_alphabet != b.input_alphabet:
        raise DataError("composition needs left output alphabet == right input alphabet")
    a, b = split_labels(a), split_labels(b)
    if a.is_empty or b.is_empty:
        return Mfst(a.input_alphabet, b.output_alphabet,
                    a.mark_alphabet | b.mark_alphabet, **EMPTY_MFST_TEMPLATE)
    b_by_in: dict[tuple[int, Sym], list[Arc]] = defaultdict(list)
    b_eps_in: dict[int, list[Arc]] = defaultdict(list)
    for arc in b.arcs:
        if arc.ilabel:
            b_by_in[(arc.src, arc.ilabel[0])].append(arc)
        else:
            b_eps_in[arc.src].append(arc)

    start = (a.initial, b.initial, _F_BOTH)
    ids = {start: 0}
    frontier = deque([start])
    arcs: list[Arc] = []

    def target(triple):
        if triple not in ids:
            ids[triple] = len(ids)
            frontier.append(triple)
        return ids[triple]

    while frontier:
        (p, q, f) = triple = frontier.popleft()
        sid = ids[triple]
        for pa in a.out_arcs(p):
            if pa.olabel:
                # Real-symbol match, allowed from any filter state.
                for qa in b_by_in[(q, pa.olabel[0])]:
                    arcs.append(Arc(sid, pa.ilabel, qa.olabel,
                                    pa.marks + qa.marks,
                                    target((pa.dst, qa.dst, _F_BOTH))))
            else:
                if f == _F_BOTH:
                    for qa in b_eps_in[q]:
                        arcs.append(Arc(sid, pa.ilabel, qa.olabel,
                                        pa.marks + qa.marks,
                                        target((pa.dst, qa.dst, _F_BOTH))))
                if f in (_F_BOTH, _F_LEFT_ONLY):
                    arcs.append(Arc(sid, pa.ilabel, (), pa.marks,
                                    target((pa.dst, q, _F_LEFT_ONLY))))
        if f in (_F_BOTH, _F_RIGHT_ONLY):
            for qa in b_eps_in[q]:
                arcs.append(Arc(sid, (), qa.olabel, qa.marks,
                                target((p, qa.dst, _F_RIGHT_ONLY))))
    finals = frozenset(sid for (p, q, _), sid in ids.items()
                       if p in a.finals and q in b.finals)
    composed = Mfst(a.input_alphabet, b.output_alphabet,
                    a.mark_alphabet | b.mark_alphabet,
                    n_states=len(ids), arcs=tuple(arcs), initial=0, finals=finals)
    return trim(composed)


# --- text serialization ----------------------------------------------------

def _fmt_str(s: SymStr) -> str:
    return " ".join(s) if s else EPS_TOKEN


def _parse_str(field: str) -> SymStr:
    return () if field == EPS_TOKEN else tuple(field.split(" "))


def to_text(m: Mfst) -> str:
    """One arc per line `src <TAB> dst <TAB> in <TAB> out <TAB> marks` after
    header lines; round-trips bit-exactly through from_text."""
    lines = [
        f"states\t{m.n_states}",
        f"initial\t{'-' if m.initial is None else m.initial}",
        "finals\t" + " ".join(str(q) for q in sorted(m.finals)),
        "isyms\t" + " ".join(sorted(m.input_alphabet)),
        "osyms\t" + " ".join(sorted(m.output_alphabet)),
        "msyms\t" + " ".join(sorted(m.mark_alphabet)),
    ]
    for a in m.arcs:
        lines.append(f"{a.src}\t{a.dst}\t{_fmt_str(a.ilabel)}\t"
                     f"{_fmt_str(a.olabel)}\t{_fmt_str(a.marks)}")
    return "\n".join(lines) + "\n"


def from_text(text: str) -> Mfst:
    header: dict[str, str] = {}
    arcs: list[Arc] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line:
            continue
        fields = line.split("\t")
        if fields[0] in ("states", "initial", "finals", "isyms", "osyms", "msyms"):
            if len(fields) != 2:
                raise DataError(f"line {lineno}: malformed header {line!r}")
            header[fields[0]] = fields[1]
        else:
            if len(fields) != 5:
                raise DataError(f"line {lineno}: expected 5 arc fields, got {len(fields)}")
            try:
                src, dst = int(fields[0]), int(fields[1])
            except ValueError as e:
                raise DataError(f"line {lineno}: bad state id") from e
            arcs.append(Arc(src, _parse_str(fields[2]), _parse_str(fields[3]),
                            _parse_str(fields[4]), dst))
    missing = {"states", "initial", "finals", "isyms", "osyms", "msyms"} - set(header)
    if missing:
        raise DataError(f"missing header lines: {sorted(missing)}")
    initial = None if header["initial"] == "-" else int(header["initial"])
    return Mfst(frozenset(header["isyms"].split()),
                frozenset(header["osyms"].split()),
                frozenset(header["msyms"].split()),
                n_states=int(header["states"]), arcs=tuple(arcs), initial=initial,
                finals=frozenset(int(q) for q in header["finals"].split()))

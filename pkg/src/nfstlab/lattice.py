"""Canonical alignment lattices for a fixed string pair.

canonicalize(t, x, y) restricts a marked FST to the generating paths for
(x, y) and normalizes the result into a canonical DAG over the mark tape:
each arc carries exactly one mark plus the substrings of x and y it
accounts for, out-arcs of a state carry distinct marks, every state lies
on a complete path, and consumed symbols are attributed to arcs as early
as the mark tape commits to them.  Distinct generating paths that share a
mark string collapse, so lattice paths are in bijection with the mark
strings the machine can emit for the pair.

The construction is a determinization of the restricted machine over the
mark tape.  Subsets carry the pair progress already attributed to lattice
arcs; because every unattributed residual is a slice of x (resp. y)
starting at the attributed position, the longest common prefix of the
residuals is just the shortest one, so each subset transition attributes
min-over-members consumption.  A mark string that is complete before all
of x and y can be attributed has no single consistent alignment, which
surfaces as AmbiguousMarks.
"""

from __future__ import annotations

from collections import defaultdict, deque
from dataclasses import dataclass
from functools import cached_property
import hashlib
from typing import Iterator, Optional, Sequence

from .errors import (AmbiguousMarks, CyclicMachine, DataError, EmptyLanguage,
                     InvalidPath, LimitExceeded)
from .fst import (Arc, Mfst, SymStr, compose_with_pair, enumerate_paths,
                  from_text as mfst_from_text, to_text as mfst_to_text,
                  topo_order, trim, useful_states)


@dataclass(frozen=True)
class Lattice:
    """Canonical alignment DAG for the pair (x, y).

    ``machine`` is a marked FST whose arcs carry exactly one mark; an
    arc's input/output labels are the slices of x and y it accounts for.
    ``state_progress[q]`` is the (consumed x, consumed y) prefix length
    at state q, which is path-invariant.
    """

    x: SymStr
    y: SymStr
    machine: Mfst
    state_progress: tuple[tuple[int, int], ...]

    @property
    def n_states(self) -> int:
        return self.machine.n_states

    @property
    def n_arcs(self) -> int:
        return len(self.machine.arcs)

    @property
    def initial(self) -> int:
        return self.machine.initial

    @property
    def finals(self) -> frozenset[int]:
        return self.machine.finals

    def out_arcs(self, q: int) -> tuple[Arc, ...]:
        return self.machine.out_arcs(q)

    def is_final(self, q: int) -> bool:
        return q in self.machine.finals

    def suffixes_at(self, q: int) -> tuple[SymStr, SymStr]:
        """The parts of x and y not yet accounted for at state q."""
        n, m = self.state_progress[q]
        return self.x[n:], self.y[m:]

    @cached_property
    def topo(self) -> tuple[int, ...]:
        return topo_order(self.machine)

    def mark_strings(self, max_paths: int = 1_000_000) -> list[SymStr]:
        return [p.marks for p in enumerate_paths(self.machine, max_paths)]

    def iter_paths(self, max_paths: int = 1_000_000) -> Iterator:
        return iter(enumerate_paths(self.machine, max_paths))


def _positions(m: Mfst) -> list[tuple[int, int]]:
    """Per-state (consumed x, consumed y); DataError if path-dependent."""
    pos: list[tuple[int, int] | None] = [None] * m.n_states
    pos[m.initial] = (0, 0)
    dq = deque([m.initial])
    while dq:
        q = dq.popleft()
        i, j = pos[q]
        for a in m.out_arcs(q):
            cand = (i + len(a.ilabel), j + len(a.olabel))
            if pos[a.dst] is None:
                pos[a.dst] = cand
                dq.append(a.dst)
            elif pos[a.dst] != cand:
                raise DataError(f"state {a.dst} has path-dependent progress")
    return pos  # type: ignore[return-value]


def _split_marks(m: Mfst, pos: list[tuple[int, int]]):
    """Normalize arcs to at most one mark; chains put the pair consumption
    on the first link, so fresh chain states sit at the target's progress."""
    if all(len(a.marks) <= 1 for a in m.arcs):
        return m, list(pos)
    n = m.n_states
    newpos = list(pos)
    arcs: list[Arc] = []
    for a in m.arcs:
        if len(a.marks) <= 1:
            arcs.append(a)
            continue
        hops = [a.src] + list(range(n, n + len(a.marks) - 1)) + [a.dst]
        n += len(a.marks) - 1
        newpos.extend([pos[a.dst]] * (len(a.marks) - 1))
        for k, mark in enumerate(a.marks):
            arcs.append(Arc(hops[k],
                            a.ilabel if k == 0 else (),
                            a.olabel if k == 0 else (),
                            (mark,), hops[k + 1]))
    split = Mfst(m.input_alphabet, m.output_alphabet, m.mark_alphabet,
                 n_states=n, arcs=tuple(arcs), initial=m.initial,
                 finals=m.finals)
    return split, newpos


def _renumbered(machine: Mfst, x: SymStr, y: SymStr) -> Lattice:
    """Canonical state numbering: breadth-first from the initial state,
    out-arcs explored in mark order; arcs sorted by (source, mark)."""
    remap = {machine.initial: 0}
    dq = deque([machine.initial])
    while dq:
        q = dq.popleft()
        for a in sorted(machine.out_arcs(q), key=lambda a: a.marks):
            if a.dst not in remap:
                remap[a.dst] = len(remap)
                dq.append(a.dst)
    if len(remap) != machine.n_states:
        raise DataError("lattice has unreachable states")
    arcs = tuple(sorted((Arc(remap[a.src], a.ilabel, a.olabel, a.marks,
                             remap[a.dst]) for a in machine.arcs),
                        key=lambda a: (a.src, a.marks)))
    renum = Mfst(machine.input_alphabet, machine.output_alphabet,
                 machine.mark_alphabet, n_states=machine.n_states, arcs=arcs,
                 initial=0, finals=frozenset(remap[f] for f in machine.finals))
    return Lattice(x, y, renum, tuple(_positions(renum)))


def suffixes_at(lat: Lattice, prefix: Sequence[Arc]) -> tuple[SymStr, SymStr]:
    """Unaligned suffixes of (x, y) after following a path prefix from the
    initial state; the empty prefix gives the whole pair back."""
    arcset = set(lat.machine.arcs)
    state = lat.initial
    n = m = 0
    for a in prefix:
        if a not in arcset or a.src != state:
            raise InvalidPath(f"prefix breaks at state {state}: {a}")
        n += len(a.ilabel)
        m += len(a.olabel)
        state = a.dst
    return lat.x[n:], lat.y[m:]


def determinize(t: Mfst, x: SymStr, y: SymStr,
                max_states: int = 1_000_000) -> Lattice:
    """Build the reduced, mark-deterministic lattice for (x, y), without
    merging equivalent states (see minimize / canonicalize)."""
    x, y = tuple(x), tuple(y)
    comp = compose_with_pair(t, x, y)
    if comp.is_empty:
        raise EmptyLanguage(f"machine generates no path for pair {(x, y)}")
    m, pos = _split_marks(comp, _positions(comp))
    totals = (len(x), len(y))

    eps_adj: list[list[int]] = [[] for _ in range(m.n_states)]
    mark_adj: list[list[tuple[str, int]]] = [[] for _ in range(m.n_states)]
    for a in m.arcs:
        if a.marks:
            mark_adj[a.src].append((a.marks[0], a.dst))
        else:
            eps_adj[a.src].append(a.dst)

    def closure(states) -> frozenset[int]:
        seen = set(states)
        dq = deque(seen)
        while dq:
            for nxt in eps_adj[dq.popleft()]:
                if nxt not in seen:
                    seen.add(nxt)
                    dq.append(nxt)
        return frozenset(seen)

    init_members = closure({m.initial})
    init_key = (init_members, 0, 0)
    ids: dict[tuple[frozenset[int], int, int], int] = {init_key: 0}
    dq = deque([init_key])
    finals: set[int] = set()
    arcs: list[Arc] = []
    while dq:
        (members, n, mm) = key = dq.popleft()
        sid = ids[key]
        if any(s in m.finals for s in members):
            if (n, mm) != totals:
                raise AmbiguousMarks(
                    f"a complete mark string accounts for only {(n, mm)} of "
                    f"{totals} symbols: the pair alignment is not a function "
                    f"of the marks")
            finals.add(sid)
        by_mark: dict[str, set[int]] = defaultdict(set)
        for s in members:
            for mark, dst in mark_adj[s]:
                by_mark[mark].add(dst)
        for mark in sorted(by_mark):
            tgt = closure(by_mark[mark])
            tn = min(pos[s][0] for s in tgt)
            tm = min(pos[s][1] for s in tgt)
            tkey = (tgt, tn, tm)
            if tkey not in ids:
                if len(ids) >= max_states:
                    raise LimitExceeded(f"lattice exceeds {max_states} states")
                ids[tkey] = len(ids)
                dq.append(tkey)
            arcs.append(Arc(sid, x[n:tn], y[mm:tm], (mark,), ids[tkey]))
    machine = Mfst(t.input_alphabet, t.output_alphabet, t.mark_alphabet,
                   n_states=len(ids), arcs=tuple(arcs), initial=0,
                   finals=frozenset(finals))
    machine = trim(machine)
    topo_order(machine)  # raises CyclicMachine when marks can repeat forever
    return _renumbered(machine, x, y)


def minimize(lat: Lattice) -> Lattice:
    """Merge states with identical labeled suffix structure (exact for
    DAGs: classes are computed in reverse topological order)."""
    mach = lat.machine
    classes: dict[int, int] = {}
    sig_ids: dict[tuple, int] = {}
    rep: dict[int, int] = {}
    for q in reversed(lat.topo):
        sig = (q in mach.finals,
               tuple(sorted((a.marks, a.ilabel, a.olabel, classes[a.dst])
                            for a in mach.out_arcs(q))))
        cls = sig_ids.setdefault(sig, len(sig_ids))
        classes[q] = cls
        rep.setdefault(cls, q)
    arcs = tuple(Arc(cls, a.ilabel, a.olabel, a.marks, classes[a.dst])
                 for cls, q in rep.items() for a in mach.out_arcs(q))
    merged = Mfst(mach.input_alphabet, mach.output_alphabet,
                  mach.mark_alphabet, n_states=len(sig_ids), arcs=arcs,
                  initial=classes[mach.initial],
                  finals=frozenset(classes[f] for f in mach.finals))
    return _renumbered(merged, lat.x, lat.y)


def canonicalize(t: Mfst, x: SymStr, y: SymStr,
                 max_states: int = 1_000_000) -> Lattice:
    """The canonical alignment lattice: determinize over marks, then
    minimize.  Equal machines and pairs give bit-identical lattices
    regardless of arc insertion order."""
    return minimize(determinize(t, x, y, max_states=max_states))


@dataclass(frozen=True)
class CanonicalReport:
    ok: bool
    failures: tuple[str, ...]

    def __bool__(self) -> bool:
        return self.ok


def check_canonical(lat: Lattice, t: Optional[Mfst] = None,
                    x: Optional[SymStr] = None, y: Optional[SymStr] = None,
                    max_paths: int = 10_000) -> CanonicalReport:
    """Audit the canonical-lattice invariants; the report carries failures
    instead of raising so tampered artifacts can be described.  Given the
    source machine t, the mark language is additionally compared against
    direct enumeration of the pair-restricted machine."""
    fails: list[str] = []
    mach = lat.machine
    if mach.is_empty:
        return CanonicalReport(False, ("lattice is empty",))
    try:
        order = topo_order(mach)
    except CyclicMachine:
        return CanonicalReport(False, ("lattice is cyclic",))
    if useful_states(mach) != set(range(mach.n_states)):
        fails.append("some states lie off every complete path")
    try:
        pos = _positions(mach)
    except DataError as e:
        return CanonicalReport(False, tuple(fails) + (str(e),))
    if tuple(pos) != lat.state_progress:
        fails.append("stored state progress disagrees with the arcs")
    totals = (len(lat.x), len(lat.y))
    if pos[mach.initial] != (0, 0):
        fails.append("initial state progress is not (0, 0)")
    for f in sorted(mach.finals):
        if pos[f] != totals:
            fails.append(f"final state {f} at progress {pos[f]}, "
                         f"want {totals}")
    sig_ids: dict[tuple, int] = {}
    classes: dict[int, int] = {}
    for q in reversed(order):
        marks = set()
        for a in mach.out_arcs(q):
            if len(a.marks) != 1:
                fails.append(f"arc {a} carries {len(a.marks)} marks, want 1")
                continue
            if a.marks[0] in marks:
                fails.append(f"state {a.src} has two out-arcs on "
                             f"{a.marks[0]}")
            marks.add(a.marks[0])
            n, m = pos[a.src]
            if a.ilabel != lat.x[n:n + len(a.ilabel)] or \
                    a.olabel != lat.y[m:m + len(a.olabel)]:
                fails.append(f"arc {a} labels are not slices of the pair "
                             f"at its progress")
        sig = (q in mach.finals,
               tuple(sorted((a.marks, a.ilabel, a.olabel, classes[a.dst])
                            for a in mach.out_arcs(q))))
        if sig in sig_ids:
            fails.append(f"states {q} and its twin share suffix structure: "
                         f"not minimal")
        classes[q] = sig_ids.setdefault(sig, len(sig_ids))
    if t is not None:
        px = tuple(x) if x is not None else lat.x
        py = tuple(y) if y is not None else lat.y
        comp = compose_with_pair(t, px, py)
        want = {p.marks for p in enumerate_paths(comp, max_paths)}
        got = lat.mark_strings(max_paths)
        if set(got) != want:
            fails.append("mark language disagrees with the enumeration "
                         "oracle")
        if len(got) != len(set(got)):
            fails.append("two lattice paths share one mark string")
    return CanonicalReport(not fails, tuple(fails))


# --- serialization ---------------------------------------------------------

def to_text(lat: Lattice) -> str:
    xline = "pair-x\t" + " ".join(lat.x)
    yline = "pair-y\t" + " ".join(lat.y)
    return xline + "\n" + yline + "\n" + mfst_to_text(lat.machine)


def from_text(text: str) -> Lattice:
    lines = text.split("\n", 2)
    if len(lines) < 3 or not lines[0].startswith("pair-x\t") \
            or not lines[1].startswith("pair-y\t"):
        raise DataError("lattice text must start with pair-x and pair-y lines")
    x = tuple(lines[0].split("\t", 1)[1].split())
    y = tuple(lines[1].split("\t", 1)[1].split())
    machine = mfst_from_text(lines[2])
    return Lattice(x, y, machine, tuple(_positions(machine)))


def digest(lat: Lattice) -> str:
    return hashlib.sha256(to_text(lat).encode()).hexdigest()

"""Tests for topology builders, corpus generators, and TSV plumbing."""

import math
import string

import pytest

from nfstlab.data import (COPY, DELETE, INSERT, REPLACE, CorpusSplit,
                          build_cipher_mfst, cipher_stage, cipher_tables,
                          ciphers_of, corpus_stats, fisher_yates,
                          gen_cipher_corpus, gen_tr_corpus, load_tsv,
                          make_scheme, save_tsv, stats_to_text,
                          topology_del_ins, topology_del_ins_copy)
from nfstlab.errors import DataError
from nfstlab.fst import to_text
from nfstlab.lattice import canonicalize, determinize

import numpy as np

LETTERS = tuple(string.ascii_lowercase)


class TestMarkScheme:
    def test_cipher_vocab_counts(self):
        assert len(make_scheme(LETTERS, LETTERS, n_ciphers=5).marks) == 61
        assert len(make_scheme("0123456789", "0123456789", 5).marks) == 29

    def test_groups_must_stay_disjoint(self):
        with pytest.raises(DataError):
            make_scheme(("delete",), ("b",))  # renders the op mark itself
        with pytest.raises(DataError):
            make_scheme(("a'",), ("a",))  # input <a'> == primed output <a'>

    def test_unknown_symbols_rejected(self):
        scheme = make_scheme("ab", "cd")
        assert scheme.in_mark("a") == "<a>"
        assert scheme.out_mark("c") == "<c'>"
        with pytest.raises(DataError):
            scheme.in_mark("c")
        with pytest.raises(DataError):
            scheme.out_mark("a")

    def test_parse_groups(self):
        scheme = make_scheme("ab", "ab", n_ciphers=2)
        marks = ("<cipher2>", REPLACE, "<a>", "<b'>", COPY, "<b'>",
                 INSERT, "<a'>", DELETE, "<b>")
        assert scheme.parse(marks) == (
            ("<cipher2>",), (REPLACE, "<a>", "<b'>"), (COPY, "<b'>"),
            (INSERT, "<a'>"), (DELETE, "<b>"))

    def test_malformed_mark_strings(self):
        scheme = make_scheme("ab", "ab")
        assert not scheme.well_formed(("<a>",))  # no leading operation
        assert not scheme.well_formed((REPLACE, "<a>"))  # truncated
        assert not scheme.well_formed((INSERT, "<a>"))  # input-side mark
        assert scheme.well_formed(())
        with pytest.raises(DataError):
            scheme.parse((REPLACE, "<a'>", "<b'>"))  # sides swapped


class TestTopologies:
    def test_del_ins_shape(self):
        t = topology_del_ins("ab", "cde")
        assert t.n_states == 1
        assert len(t.arcs) == 5
        scheme = make_scheme("ab", "cde")
        for a in t.arcs:
            assert scheme.well_formed(a.marks)

    @pytest.mark.parametrize("nx,ny", [(0, 2), (1, 1), (2, 3), (3, 3)])
    def test_interleaving_counts_and_mark_lengths(self, nx, ny):
        t = topology_del_ins("a", "b")
        lat = canonicalize(t, ("a",) * nx, ("b",) * ny)
        paths = list(lat.iter_paths())
        assert len(paths) == math.comb(nx + ny, nx)
        assert all(len(p.marks) == 2 * (nx + ny) for p in paths)

    def test_del_ins_copy_shape(self):
        t = topology_del_ins_copy(LETTERS)
        assert t.n_states == 1
        assert len(t.arcs) == 78

    def test_copy_path_is_the_short_one(self):
        t = topology_del_ins_copy("a")
        lat = canonicalize(t, ("a",), ("a",))
        strings = sorted(lat.mark_strings(), key=len)
        assert len(strings) == 3
        assert strings[0] == (COPY, "<a'>")
        assert all(len(s) == 4 for s in strings[1:])


class TestCipherMachine:
    def test_stage_counts(self):
        stage = cipher_stage(LETTERS, LETTERS, n_ciphers=5, seed=0)
        assert stage.n_states == 6
        assert len(stage.arcs) == 5 + 130

    def test_permutations_are_bijections(self):
        for table in cipher_tables(LETTERS, LETTERS, 5, seed=9):
            assert sorted(table) == sorted(LETTERS)
            assert sorted(table.values()) == sorted(LETTERS)

    def test_fisher_yates_is_uniform_on_three_items(self):
        rng = np.random.default_rng(0)
        counts = {}
        n = 6000
        for _ in range(n):
            perm = tuple(fisher_yates([0, 1, 2], rng))
            counts[perm] = counts.get(perm, 0) + 1
        assert len(counts) == 6
        for c in counts.values():
            assert abs(c - n / 6) < 5 * math.sqrt(n / 6)

    def test_same_seed_same_machine(self):
        a = build_cipher_mfst("abcd", "abcd", n_ciphers=3, seed=5)
        b = build_cipher_mfst("abcd", "abcd", n_ciphers=3, seed=5)
        assert to_text(a) == to_text(b)
        c = build_cipher_mfst("abcd", "abcd", n_ciphers=3, seed=6)
        assert to_text(a) != to_text(c)

    def test_alphabet_size_mismatch(self):
        with pytest.raises(DataError):
            build_cipher_mfst("abc", "ab", n_ciphers=2, seed=0)

    def test_replace_groups_run_five_marks(self):
        t = build_cipher_mfst("abc", "abc", n_ciphers=2, seed=1)
        replace_arcs = [a for a in t.arcs if a.marks
                        and a.marks[0] == REPLACE]
        assert replace_arcs
        assert all(len(a.marks) == 5 for a in replace_arcs)
        assert len(t.mark_alphabet) == 2 + 4 + 6

    def test_recovered_tables_match_the_construction(self):
        t = build_cipher_mfst("abcde", "abcde", n_ciphers=4, seed=2)
        assert ciphers_of(t) == cipher_tables("abcde", "abcde", 4, seed=2)

    def test_non_cipher_machine_rejected(self):
        with pytest.raises(DataError):
            ciphers_of(topology_del_ins("ab", "ab"))


class TestCipherCorpus:
    def build(self, n_ciphers=3, seed=11):
        return build_cipher_mfst("abcdef", "abcdef", n_ciphers, seed=seed)

    def test_noiseless_pairs_are_pure_cipher_images(self):
        t = self.build()
        tables = ciphers_of(t)
        corp = gen_cipher_corpus(t, {"train": 20}, {"train": 4.0},
                                 noise=(0.0, 0.0), seed=3)["train"]
        for (x, y), gold in zip(corp.pairs, corp.gold):
            c = int(gold[0].removeprefix("<cipher").removesuffix(">"))
            assert y == tuple(tables[c - 1][a] for a in x)

    def test_default_noise_keeps_lengths_close(self):
        corp = gen_cipher_corpus(self.build(), {"train": 1000},
                                 {"train": 6.0}, seed=4)["train"]
        mean_x = np.mean([len(x) for x, _ in corp.pairs])
        mean_y = np.mean([len(y) for _, y in corp.pairs])
        assert 0.9 <= mean_y / mean_x <= 1.1

    def test_gold_marks_are_lattice_mark_strings(self):
        t = self.build()
        corp = gen_cipher_corpus(t, {"train": 12}, {"train": 2.0},
                                 seed=5)["train"]
        checked = 0
        for (x, y), gold in zip(corp.pairs, corp.gold):
            if len(x) + len(y) > 6:
                continue
            lat = canonicalize(t, x, y)
            assert gold in set(lat.mark_strings())
            checked += 1
        assert checked >= 3

    def test_every_pair_has_a_nonempty_lattice(self):
        t = self.build()
        corp = gen_cipher_corpus(t, {"valid": 15}, {"valid": 3.0},
                                 seed=6)["valid"]
        for x, y in corp.pairs:
            assert canonicalize(t, x, y).n_states > 0

    def test_regeneration_is_identical(self):
        t = self.build()
        sizes = {"train": 8, "test": 4}
        means = {"train": 3.0, "test": 5.0}
        a = gen_cipher_corpus(t, sizes, means, seed=7)
        b = gen_cipher_corpus(t, sizes, means, seed=7)
        assert a == b
        c = gen_cipher_corpus(t, sizes, means, seed=8)
        assert a["train"].pairs != c["train"].pairs

    def test_profile_validation(self):
        t = self.build()
        with pytest.raises(DataError):
            gen_cipher_corpus(t, {"dev": 3}, {"dev": 2.0})
        with pytest.raises(DataError):
            gen_cipher_corpus(t, {"train": 3}, {"test": 2.0})
        with pytest.raises(DataError):
            gen_cipher_corpus(t, {"train": 3}, {"train": 0.5})


class TestTrCorpus:
    def test_alphabets_must_be_disjoint(self):
        with pytest.raises(DataError):
            gen_tr_corpus("abc", "cde", {"train": 2}, {"train": 3.0})

    def test_pairs_are_monotonic_and_bounded(self):
        corp = gen_tr_corpus("abc", "XYZ", {"train": 30}, {"train": 4.0},
                             seed=2)["train"]
        for x, y in corp.pairs:
            assert len(x) <= len(y) <= 2 * len(x)
            assert set(y) <= {"X", "Y", "Z"}

    def test_gold_marks_fit_the_del_ins_topology(self):
        corp = gen_tr_corpus("ab", "XY", {"train": 10}, {"train": 2.0},
                             seed=3)["train"]
        t = topology_del_ins("ab", "XY")
        for (x, y), gold in zip(corp.pairs, corp.gold):
            if len(x) + len(y) > 6:
                continue
            assert gold in set(canonicalize(t, x, y).mark_strings())

    def test_same_seed_same_corpus(self):
        kw = dict(sizes={"train": 6}, mean_len={"train": 3.0}, seed=9)
        assert gen_tr_corpus("ab", "XY", **kw) == gen_tr_corpus("ab", "XY", **kw)


class TestTsv:
    def test_token_columns(self, tmp_path):
        p = tmp_path / "c.tsv"
        p.write_text("look left\tI_TURN_LEFT I_LOOK\n")
        split = load_tsv(p)
        assert split.pairs == ((("look", "left"), ("I_TURN_LEFT", "I_LOOK")),)
        assert split.sigma == {"look", "left"}

    def test_empty_file(self, tmp_path):
        p = tmp_path / "e.tsv"
        p.write_text("")
        assert load_tsv(p).pairs == ()

    def test_round_trip(self, tmp_path):
        corp = gen_tr_corpus("ab", "XY", {"test": 12}, {"test": 3.0},
                             seed=1)["test"]
        p = tmp_path / "r.tsv"
        save_tsv(corp, p)
        again = load_tsv(p, split="test")
        assert again.pairs == corp.pairs

    def test_malformed_row_reports_line_number(self, tmp_path):
        p = tmp_path / "bad.tsv"
        p.write_text("a\tb\na\tb\nno tabs here\n")
        with pytest.raises(DataError, match=":3"):
            load_tsv(p)


class TestStats:
    def test_singleton_hand_count(self):
        t = topology_del_ins("a", "b")
        split = CorpusSplit("train", ((("a",), ("b",)),),
                            frozenset("a"), frozenset("b"))
        row = corpus_stats(split, t)
        # Grid of 4 cells, 4 two-mark moves: each move adds a chain state.
        assert (row.mean_states, row.mean_arcs) == (8.0, 8.0)
        assert (row.mean_x_len, row.mean_y_len) == (1.0, 1.0)
        assert row.mark_vocab == 6

    @pytest.mark.parametrize("nx,ny", [(1, 2), (2, 2), (3, 1), (3, 3)])
    def test_grid_formula(self, nx, ny):
        t = topology_del_ins("a", "b")
        lat = determinize(t, ("a",) * nx, ("b",) * ny)
        cells = (nx + 1) * (ny + 1)
        moves = nx * (ny + 1) + ny * (nx + 1)
        assert lat.n_states == cells + moves
        assert lat.n_arcs == 2 * moves

    def test_cipher_scale_matches_reference_order_of_magnitude(self):
        # Reference test-split means are 3989 states / 4645 arcs.  Exact
        # constants depend on construction details of the machine (our
        # mark scheme has 61 marks, not 67); we land at ~2.3x with the
        # same arc-to-state ratio, comfortably the same order of magnitude.
        t = build_cipher_mfst(LETTERS, LETTERS, n_ciphers=5, seed=0)
        corp = gen_cipher_corpus(t, {"test": 6}, {"test": 12.0},
                                 seed=3)["test"]
        row = corpus_stats(corp, t)
        assert 3989 / 3 <= row.mean_states <= 3989 * 3
        assert 4645 / 3 <= row.mean_arcs <= 4645 * 3
        assert 1.0 < row.mean_arcs / row.mean_states < 1.5

    def test_stats_text_shape(self):
        t = topology_del_ins("a", "b")
        split = CorpusSplit("train", ((("a",), ("b",)),),
                            frozenset("a"), frozenset("b"))
        text = stats_to_text([corpus_stats(split, t)])
        lines = text.splitlines()
        assert lines[0].startswith("split\tpairs")
        assert lines[1].split("\t")[0] == "train"

    def test_empty_split_rejected(self):
        t = topology_del_ins("a", "b")
        split = CorpusSplit("train", (), frozenset("a"), frozenset("b"))
        with pytest.raises(DataError):
            corpus_stats(split, t)

    def test_alphabet_containment_enforced(self):
        with pytest.raises(DataError):
            CorpusSplit("train", ((("z",), ("b",)),),
                        frozenset("a"), frozenset("b"))
        with pytest.raises(DataError):
            CorpusSplit("dev", (), frozenset(), frozenset())

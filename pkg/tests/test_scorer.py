"""Tests for the autoregressive mark-string scorer.

The frozen oracle: with all parameters zero every next-step distribution
is uniform over |marks| + 1 outcomes, so a length-L string scores exactly
-(L+1) * log(|marks| + 1).  The batched teacher-forced path is checked
against the independent incremental stepper.
"""

import itertools
import math

import pytest
import torch

from nfstlab.errors import DataError
from nfstlab.lattice import canonicalize
from nfstlab import nn
from nfstlab.scorer import (Scorer, ScorerConfig, grammatical_mass,
                            next_mark_dist, score_marks)

from test_fst import delins_machine, mk

MARKS = ("<del>", "<ins>", "<sub>", "<cp>")


def small_scorer(seed=0, hidden=6, layers=2):
    return Scorer(ScorerConfig(marks=MARKS, hidden=hidden, layers=layers), seed)


def zeroed_scorer():
    s = small_scorer()
    with torch.no_grad():
        for p in s.params.values():
            p.zero_()
    return s


def incremental_score(s, marks):
    carry = s.initial_carry()
    total = 0.0
    for mark in marks:
        total += s.next_log_probs(carry)[s.vocab[mark]].item()
        carry = s.advance(carry, mark)
    return total + s.next_log_probs(carry)[s.eos_id].item()


class TestClosedForms:
    def test_zero_params_give_uniform_steps(self):
        s = zeroed_scorer()
        lp = s.next_log_probs(s.initial_carry())
        torch.testing.assert_close(lp, torch.full((5,), -math.log(5.0),
                                                  dtype=nn.DTYPE))

    def test_zero_params_string_score(self):
        s = zeroed_scorer()
        got = s.score(("<del>", "<cp>", "<ins>")).item()
        assert abs(got - (-4 * math.log(5.0))) < 1e-12
        assert abs(got - (-6.437751649736401)) < 1e-9
        assert abs(s.score(()).item() - (-math.log(5.0))) < 1e-12


class TestChainRule:
    def test_forced_equals_incremental(self):
        s = small_scorer(seed=3)
        for marks in [(), ("<del>",), ("<cp>", "<cp>", "<sub>", "<ins>")]:
            assert abs(s.score(marks).item() - incremental_score(s, marks)) < 1e-10

    def test_batch_equals_singles(self):
        s = small_scorer(seed=4)
        seqs = [(), ("<del>",), ("<cp>", "<sub>"), ("<ins>",) * 5]
        batch = s.score_batch(seqs)
        for i, marks in enumerate(seqs):
            torch.testing.assert_close(batch[i], s.score(marks))


class TestDistribution:
    def test_each_step_normalizes(self):
        s = small_scorer(seed=5)
        carry = s.initial_carry()
        for mark in ["<del>", "<sub>"]:
            assert abs(s.next_log_probs(carry).exp().sum().item() - 1.0) < 1e-12
            carry = s.advance(carry, mark)

    def test_total_mass_grows_toward_one(self):
        s = small_scorer(seed=6, hidden=4)
        prev = 0.0
        for length in range(4):
            mass = sum(
                math.exp(s.score(w).item())
                for n in range(length + 1)
                for w in itertools.product(MARKS, repeat=n))
            assert prev < mass < 1.0
            prev = mass

    def test_scores_are_finite(self):
        s = small_scorer(seed=7)
        assert math.isfinite(s.score(("<del>",) * 30).item())


class TestGradients:
    def test_autograd_matches_finite_differences(self):
        s = small_scorer(seed=8, hidden=3, layers=2)
        target = ("<cp>", "<del>")

        def fn():
            return -s.score(target)

        assert nn.grad_check(fn, s.params) < 1e-4


class TestConfigAndPersistence:
    def test_eos_and_duplicates_rejected(self):
        with pytest.raises(DataError):
            ScorerConfig(marks=("a", "<eos>"))
        with pytest.raises(DataError):
            ScorerConfig(marks=("a", "a"))

    def test_seed_determinism(self):
        assert small_scorer(seed=1).digest() == small_scorer(seed=1).digest()
        assert small_scorer(seed=1).digest() != small_scorer(seed=2).digest()

    def test_save_load_round_trip(self, tmp_path):
        s = small_scorer(seed=9)
        path = tmp_path / "scorer.pt"
        s.save(path)
        s2 = Scorer.load(path)
        assert s2.digest() == s.digest()
        assert s2.config == s.config
        marks = ("<sub>", "<ins>")
        torch.testing.assert_close(s2.score(marks), s.score(marks))

    def test_dropout_is_seeded_and_active(self):
        s = small_scorer(seed=10)
        seqs = [("<del>", "<cp>", "<ins>")]
        a, _, _ = s.forced_log_probs(seqs, dropout_p=0.4, gen=nn.make_generator(1))
        b, _, _ = s.forced_log_probs(seqs, dropout_p=0.4, gen=nn.make_generator(1))
        c, _, _ = s.forced_log_probs(seqs)
        torch.testing.assert_close(a, b)
        assert not torch.allclose(a, c)


class TestStringAndLatticeViews:
    def test_next_mark_dist_uniform_when_zeroed(self):
        s = zeroed_scorer()
        d = next_mark_dist(s, ())
        assert set(d) == set(MARKS) | {"<eos>"}
        for v in d.values():
            assert v == pytest.approx(0.2, abs=1e-12)

    def test_next_mark_dist_chains_to_score_marks(self):
        s = small_scorer(seed=3)
        marks = ("<del>", "<cp>", "<del>")
        total = 0.0
        for t in range(len(marks)):
            total += math.log(next_mark_dist(s, marks[:t])[marks[t]])
        total += math.log(next_mark_dist(s, marks)["<eos>"])
        assert score_marks(s, marks).item() == pytest.approx(total, abs=1e-9)

    def test_grammatical_mass_single_string(self):
        t = mk(1, [(0, "a", "b", "<cp>", 0)], finals={0})
        lat = canonicalize(t, ("a",), ("b",))
        s = small_scorer(seed=5)
        assert grammatical_mass(s, lat) == pytest.approx(
            math.exp(score_marks(s, ("<cp>",)).item()), rel=1e-12)

    def test_grammatical_mass_closed_form(self):
        # Two mark strings of length 2 under uniform 1/5 steps.
        lat = canonicalize(delins_machine("a", "b"), ("a",), ("b",))
        s = zeroed_scorer()
        assert grammatical_mass(s, lat) == pytest.approx(2 / 125, rel=1e-12)

    def test_score_reads_only_the_mark_string(self):
        # The same string scores identically no matter which lattice
        # produced it.
        s = small_scorer(seed=7)
        lat1 = canonicalize(delins_machine("a", "b"), ("a",), ("b",))
        lat2 = canonicalize(delins_machine("ab", "b"), ("a", "b"), ("b", "b"))
        w = ("<del>", "<ins>")
        from_lat1 = [p.marks for p in lat1.iter_paths() if p.marks == w]
        from_lat2 = [p.marks for p in lat2.iter_paths() if p.marks[:2] == w]
        assert from_lat1 and from_lat2
        assert score_marks(s, from_lat1[0]).item() == \
            score_marks(s, w).item()

    def test_vocab_sidecar_is_written(self, tmp_path):
        s = small_scorer()
        path = tmp_path / "scorer.pt"
        s.save(path)
        lines = (tmp_path / "scorer.pt.marks").read_text().splitlines()
        assert lines == list(MARKS) + ["<eos>"]

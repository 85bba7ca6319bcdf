"""Desk-scale lab for neuralized finite-state transducers.

The pieces fit together in one line of flow: a marked FST composed with a
string pair yields a canonical alignment lattice; an autoregressive
scorer weighs mark strings; proposal samplers walk the lattice; training
fits the samplers to the scorer's posterior and the metrics compare
them.  Import the submodules directly for anything not re-exported here.
"""

from nfstlab.errors import (AmbiguousMarks, CyclicMachine, DataError,
                            DigestMismatch, EmptyLanguage, InvalidPath,
                            LimitExceeded, NfstError)
from nfstlab.fst import (Arc, Mfst, compose_mfst, compose_with_pair,
                         enumerate_paths)
from nfstlab.lattice import (Lattice, canonicalize, check_canonical,
                             determinize, minimize)
from nfstlab.samplers import Sampler, SamplerConfig, sample_path, weigh
from nfstlab.scorer import Scorer, ScorerConfig, score_marks
from nfstlab.training import (TrainConfig, alternate_train, train_sampler,
                              train_scorer)
from nfstlab.metrics import evaluate, partial_kl

__all__ = [
    "AmbiguousMarks", "Arc", "CyclicMachine", "DataError", "DigestMismatch",
    "EmptyLanguage", "InvalidPath", "Lattice", "LimitExceeded", "Mfst",
    "NfstError", "Sampler", "SamplerConfig", "Scorer", "ScorerConfig",
    "TrainConfig", "alternate_train", "canonicalize", "check_canonical",
    "compose_mfst", "compose_with_pair", "determinize", "enumerate_paths",
    "evaluate", "minimize", "partial_kl", "sample_path", "score_marks",
    "train_sampler", "train_scorer", "weigh",
]

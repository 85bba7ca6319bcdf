"""Command-line pipeline: generate data, cache lattices, train both
models, evaluate, sample, and sweep hidden sizes.

All artifacts live under one output directory: the task machine as
text, per-split TSV corpora, content-hash-keyed lattice caches,
checkpoints with a sidecar recording the scorer digest a sampler was
trained against, loss traces, and evaluation reports.  Progress goes to
standard error; files carry the machine-readable output.  Every
invocation appends a manifest line recording what ran with which
config, so a directory documents its own history.

Exit codes: 0 success, 1 usage error, 2 data error.
"""

import argparse
import dataclasses
import hashlib
import string
import sys
from datetime import datetime, timezone
from importlib import metadata
from pathlib import Path

import numpy as np
import torch

from . import lattice as latmod
from .data import (build_cipher_mfst, corpus_stats, gen_cipher_corpus,
                   gen_tr_corpus, load_tsv, save_tsv, stats_to_text,
                   topology_del_ins)
from .errors import DigestMismatch, NfstError
from .fst import from_text as fst_from_text
from .fst import to_text as fst_to_text
from .lattice import canonicalize
from .metrics import evaluate, exact_inclusive_kl, report_to_text
from .samplers import KINDS, Sampler, SamplerConfig, sample_path, weigh
from .scorer import Scorer, ScorerConfig
from .training import (TrainConfig, alternate_train, load_config,
                       save_config, train_sampler)


@dataclasses.dataclass(frozen=True)
class RunManifest:
    command: str
    seed: str
    config_digest: str
    checkpoints: tuple[str, ...]
    datasets: tuple[str, ...]
    timestamp: str
    versions: str


def _versions() -> str:
    try:
        own = metadata.version("nfstlab")
    except metadata.PackageNotFoundError:
        own = "unknown"
    return f"nfstlab={own},numpy={np.__version__},torch={torch.__version__}"


def config_digest(config: TrainConfig) -> str:
    text = "\n".join(f"{f.name}={getattr(config, f.name)}"
                     for f in dataclasses.fields(config))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def append_manifest(out: Path, command: str, seed, config: TrainConfig,
                    checkpoints=(), datasets=()) -> None:
    row = RunManifest(command=command, seed=str(seed),
                      config_digest=config_digest(config),
                      checkpoints=tuple(str(p) for p in checkpoints),
                      datasets=tuple(str(p) for p in datasets),
                      timestamp=datetime.now(timezone.utc)
                      .isoformat(timespec="seconds"),
                      versions=_versions())
    line = "\t".join((row.timestamp, row.command, row.seed,
                      row.config_digest, ";".join(row.checkpoints),
                      ";".join(row.datasets), row.versions))
    with open(out / "manifest.tsv", "a", encoding="utf-8") as fh:
        fh.write(line + "\n")


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def _machine_path(out: Path) -> Path:
    return out / "machine.fst"


def _load_machine(out: Path):
    return fst_from_text(_machine_path(out).read_text(encoding="utf-8"))


def _load_split(out: Path, split: str):
    return load_tsv(out / f"{split}.tsv", split=split)


def lattice_key(machine_text: str, x, y) -> str:
    h = hashlib.sha256()
    h.update(machine_text.encode())
    h.update(("\x00".join(x) + "\x01" + "\x00".join(y)).encode())
    return h.hexdigest()[:24]


def cached_lattice(out: Path, t, machine_text: str, x, y):
    cache = out / "lattices" / (lattice_key(machine_text, x, y) + ".lat")
    if cache.exists():
        return latmod.from_text(cache.read_text(encoding="utf-8"))
    lat = canonicalize(t, x, y)
    cache.parent.mkdir(parents=True, exist_ok=True)
    cache.write_text(latmod.to_text(lat), encoding="utf-8")
    return lat


def _split_lattices(out: Path, split: str, limit=None):
    t = _load_machine(out)
    text = _machine_path(out).read_text(encoding="utf-8")
    pairs = _load_split(out, split).pairs
    if limit is not None:
        pairs = tuple(sorted(pairs, key=lambda p: len(p[0]) + len(p[1]))
                      [:limit])
    return t, [cached_lattice(out, t, text, x, y) for x, y in pairs]


def _train_config(args) -> TrainConfig:
    config = load_config(args.config) if args.config else TrainConfig()
    if getattr(args, "seed", None) is not None:
        config = dataclasses.replace(config, seed=args.seed)
    return config


def _vocab_of(t) -> tuple[str, ...]:
    return tuple(sorted(t.mark_alphabet))


def _pair_symbols_of(t) -> tuple[str, ...]:
    return tuple(sorted(t.input_alphabet | t.output_alphabet))


def _new_sampler(kind: str, t, config: TrainConfig, seed: int,
                 history_cell: str = "gru") -> Sampler:
    return Sampler(SamplerConfig(kind=kind, marks=_vocab_of(t),
                                 pair_symbols=_pair_symbols_of(t),
                                 dim=config.hidden_dim,
                                 history_cell=history_cell), seed=seed)


def _theta_sidecar(path: Path) -> Path:
    return path.with_suffix(path.suffix + ".theta")


# --- subcommands -------------------------------------------------------------

def cmd_gen_data(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.seed is None:
        args.seed = 0
    sigma = tuple(string.ascii_lowercase[:args.alphabet_size])
    sizes = {"train": args.train, "valid": args.valid, "test": args.test}
    sizes = {k: v for k, v in sizes.items() if v > 0}
    means = {"train": args.train_len, "valid": args.train_len,
             "test": args.test_len}
    if args.task == "cipher":
        t = build_cipher_mfst(sigma, sigma, n_ciphers=args.n_ciphers,
                              seed=args.seed)
        corpora = gen_cipher_corpus(t, sizes, means,
                                    noise=(args.p_del, args.p_ins),
                                    seed=args.seed)
    else:
        delta = tuple(string.ascii_uppercase[:args.alphabet_size])
        t = topology_del_ins(sigma, delta)
        corpora = gen_tr_corpus(sigma, delta, sizes, means, seed=args.seed)
    _machine_path(out).write_text(fst_to_text(t), encoding="utf-8")
    written = [_machine_path(out)]
    for name, split in corpora.items():
        path = out / f"{name}.tsv"
        save_tsv(split, path)
        written.append(path)
        _log(f"gen-data: {name} {len(split.pairs)} pairs -> {path}")
    append_manifest(out, "gen-data", args.seed, _train_config(args),
                    datasets=written)
    return 0


def cmd_build_lattice(args) -> int:
    out = Path(args.out)
    t = _load_machine(out)
    text = _machine_path(out).read_text(encoding="utf-8")
    fresh = reused = 0
    for split in args.splits:
        for x, y in _load_split(out, split).pairs:
            key = lattice_key(text, x, y)
            if (out / "lattices" / (key + ".lat")).exists():
                reused += 1
            else:
                cached_lattice(out, t, text, x, y)
                fresh += 1
    _log(f"build-lattice: {fresh} built, {reused} cached")
    append_manifest(out, "build-lattice", "-", _train_config(args),
                    datasets=[out / f"{s}.tsv" for s in args.splits])
    return 0


def cmd_train_scorer(args) -> int:
    out = Path(args.out)
    config = _train_config(args)
    t, lats = _split_lattices(out, "train", limit=args.limit)
    scorer = Scorer(ScorerConfig(marks=_vocab_of(t),
                                 hidden=config.hidden_dim, layers=1),
                    seed=config.seed)
    helper = _new_sampler("swa", t, config, config.seed, history_cell="rnn")
    alternate_train(scorer, helper, lats, config,
                    alternations=args.alternations)
    path = out / "scorer.pt"
    scorer.save(path)
    save_config(config, out / "config.cfg")
    _log(f"train-scorer: {len(lats)} lattices, digest {scorer.digest()[:12]}"
         f" -> {path}")
    append_manifest(out, "train-scorer", config.seed, config,
                    checkpoints=[path])
    return 0


def cmd_train_sampler(args) -> int:
    out = Path(args.out)
    config = _train_config(args)
    t, lats = _split_lattices(out, "train", limit=args.limit)
    scorer = Scorer.load(out / "scorer.pt")
    sampler = _new_sampler(args.kind, t, config, config.seed)
    probe = lats[:args.probe] if args.probe else ()
    trace = out / f"trace-{args.kind}.tsv"
    train_sampler(sampler, scorer, lats, config, probe=probe,
                  trace_path=trace)
    path = out / f"sampler-{args.kind}.pt"
    sampler.save(path)
    _theta_sidecar(path).write_text(scorer.digest() + "\n", encoding="utf-8")
    _log(f"train-sampler: kind={args.kind} on {len(lats)} lattices -> {path}")
    append_manifest(out, f"train-sampler --kind {args.kind}", config.seed,
                    config, checkpoints=[path, trace])
    return 0


def _load_pair_checkpoints(out: Path, kind: str):
    scorer = Scorer.load(out / "scorer.pt")
    path = out / f"sampler-{kind}.pt"
    sampler = Sampler.load(path)
    sidecar = _theta_sidecar(path)
    if sidecar.exists():
        trained_against = sidecar.read_text(encoding="utf-8").strip()
        if trained_against != scorer.digest():
            raise DigestMismatch(
                f"sampler {path.name} was trained against scorer "
                f"{trained_against[:12]}, but scorer.pt has digest "
                f"{scorer.digest()[:12]}; reports would not be comparable")
    return scorer, sampler


def cmd_evaluate(args) -> int:
    out = Path(args.out)
    config = _train_config(args)
    _, lats = _split_lattices(out, args.split, limit=args.limit)
    plot_rows = []
    for kind in args.kinds:
        scorer, sampler = _load_pair_checkpoints(out, kind)
        rng = np.random.default_rng(config.seed)
        report = evaluate(sampler, scorer, lats, m_samples=args.samples,
                          rng=rng)
        path = out / f"report-{kind}-{args.split}.tsv"
        path.write_text(report_to_text(report), encoding="utf-8")
        _log(f"evaluate: kind={kind} partial_kl="
             f"{report.partial_kl:.4f}+-{report.partial_kl_se:.4f} "
             f"ess={report.dedup_ess:.2f} -> {path}")
        plot_rows.append((kind, report.partial_kl, report.partial_kl_se,
                          report.dedup_ess))
    if args.emit_plot_data:
        plot = out / f"plot-eval-{args.split}.tsv"
        lines = ["kind\tpartial_kl\tse\tdedup_ess"]
        lines += ["\t".join(str(v) for v in row) for row in plot_rows]
        plot.write_text("\n".join(lines) + "\n", encoding="utf-8")
    append_manifest(out, f"evaluate --split {args.split}", config.seed,
                    config,
                    checkpoints=[out / f"sampler-{k}.pt" for k in args.kinds])
    return 0


def cmd_sample(args) -> int:
    out = Path(args.out)
    config = _train_config(args)
    t, lats = _split_lattices(out, args.split, limit=args.limit)
    scorer, sampler = _load_pair_checkpoints(out, args.kind)
    rng = np.random.default_rng(config.seed)
    path = out / f"samples-{args.kind}.tsv"
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("x\ty\tmarks\tlog_q\tlog_ptilde\tweight\n")
        for lat in lats:
            ctx = sampler.begin(lat)
            for _ in range(args.n):
                ws = sample_path(sampler, lat, rng, scorer=scorer, ctx=ctx)
                fh.write("\t".join((" ".join(lat.x), " ".join(lat.y),
                                    " ".join(ws.marks), str(ws.log_q),
                                    str(ws.log_ptilde), str(ws.weight)))
                         + "\n")
    _log(f"sample: {args.n} draws x {len(lats)} pairs -> {path}")
    append_manifest(out, f"sample --kind {args.kind}", config.seed, config,
                    checkpoints=[path])
    return 0


def cmd_sweep(args) -> int:
    out = Path(args.out)
    base = _train_config(args)
    t, lats = _split_lattices(out, "train", limit=args.limit)
    _, probes = _split_lattices(out, args.split, limit=args.eval_limit)
    scorer = Scorer.load(out / "scorer.pt")
    rows = []
    for dim in args.dims:
        config = dataclasses.replace(base, hidden_dim=dim)
        sampler = _new_sampler(args.kind, t, config, config.seed)
        train_sampler(sampler, scorer, lats, config)
        rng = np.random.default_rng(config.seed)
        report = evaluate(sampler, scorer, probes, m_samples=args.samples,
                          rng=rng)
        _log(f"sweep: dim={dim} partial_kl={report.partial_kl:.4f}")
        rows.append((dim, report.partial_kl, report.partial_kl_se,
                     report.dedup_ess))
    path = out / f"sweep-{args.kind}.tsv"
    lines = ["dim\tpartial_kl\tse\tdedup_ess"]
    lines += ["\t".join(str(v) for v in row) for row in rows]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    if args.emit_plot_data:
        (out / f"plot-sweep-{args.kind}.tsv").write_text(
            "\n".join(lines) + "\n", encoding="utf-8")
    append_manifest(out, f"sweep --kind {args.kind}", base.seed, base,
                    checkpoints=[path])
    return 0


def cmd_stats(args) -> int:
    out = Path(args.out)
    t = _load_machine(out)
    rows = []
    for split in args.splits:
        corp = _load_split(out, split)
        if args.limit is not None:
            corp = dataclasses.replace(
                corp, pairs=corp.pairs[:args.limit], gold=None)
        rows.append(corpus_stats(corp, t))
    text = stats_to_text(rows)
    (out / "stats.tsv").write_text(text, encoding="utf-8")
    _log(text.rstrip("\n"))
    append_manifest(out, "stats", "-", _train_config(args),
                    datasets=[out / f"{s}.tsv" for s in args.splits])
    return 0


# --- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nfstlab",
        description="lattice construction, sampler training, and evaluation")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--out", required=True, help="artifact directory")
        p.add_argument("--config", default=None, help="training config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--limit", type=int, default=None,
                       help="use only the N shortest pairs")

    p = sub.add_parser("gen-data", help="generate a synthetic corpus")
    common(p)
    p.set_defaults(fn=cmd_gen_data)
    p.add_argument("--task", choices=("cipher", "tr"), default="cipher")
    p.add_argument("--alphabet-size", type=int, default=10)
    p.add_argument("--n-ciphers", type=int, default=5)
    p.add_argument("--train", type=int, default=500)
    p.add_argument("--valid", type=int, default=50)
    p.add_argument("--test", type=int, default=50)
    p.add_argument("--train-len", type=float, default=5.0)
    p.add_argument("--test-len", type=float, default=8.0)
    p.add_argument("--p-del", type=float, default=0.1)
    p.add_argument("--p-ins", type=float, default=0.1)

    p = sub.add_parser("build-lattice", help="fill the lattice cache")
    common(p)
    p.set_defaults(fn=cmd_build_lattice)
    p.add_argument("--splits", nargs="+", default=["train"])

    p = sub.add_parser("train-scorer", help="alternating scorer training")
    common(p)
    p.set_defaults(fn=cmd_train_scorer)
    p.add_argument("--alternations", type=int, default=1)

    p = sub.add_parser("train-sampler", help="train one proposal sampler "
                                             "against the frozen scorer")
    common(p)
    p.set_defaults(fn=cmd_train_sampler)
    p.add_argument("--kind", choices=KINDS, required=True)
    p.add_argument("--probe", type=int, default=0,
                   help="track exact KL on the N shortest train lattices")

    p = sub.add_parser("evaluate", help="report partial KL, length, and ESS")
    common(p)
    p.set_defaults(fn=cmd_evaluate)
    p.add_argument("--kinds", nargs="+", choices=KINDS, required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--samples", type=int, default=16)
    p.add_argument("--emit-plot-data", action="store_true")

    p = sub.add_parser("sample", help="emit weighted proposals")
    common(p)
    p.set_defaults(fn=cmd_sample)
    p.add_argument("--kind", choices=KINDS, required=True)
    p.add_argument("--split", default="test")
    p.add_argument("-n", type=int, default=4)

    p = sub.add_parser("sweep", help="hidden-size ablation for one kind")
    common(p)
    p.set_defaults(fn=cmd_sweep)
    p.add_argument("--kind", choices=KINDS, default="swp")
    p.add_argument("--dims", type=lambda s: [int(d) for d in s.split(",")],
                   required=True)
    p.add_argument("--split", default="valid")
    p.add_argument("--samples", type=int, default=16)
    p.add_argument("--eval-limit", type=int, default=None)
    p.add_argument("--emit-plot-data", action="store_true")

    p = sub.add_parser("stats", help="corpus statistics table")
    common(p)
    p.set_defaults(fn=cmd_stats)
    p.add_argument("--splits", nargs="+", default=["train", "test"])

    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage problems and 0 for --help.
        return 0 if exc.code == 0 else 1
    try:
        return args.fn(args)
    except (NfstError, OSError) as exc:
        _log(f"error: {exc}")
        return 2


if __name__ == "__main__":
    sys.exit(main())

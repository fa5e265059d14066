"""Command-line entry point for reproducible experiment runs.

Subcommands: generate | counterfactual | joint | eval | oracle | fit-table.
A run is fully determined by its config: per-record random streams are derived
from the run seed and the record index (SeedSequence(entropy=seed,
spawn_key=(index,))), so identical configs produce byte-identical outputs and
any single record can be reproduced in isolation. Logs go to stderr, data to
files only. Exit codes: 0 success, 1 usage, 2 data error, 3 oracle violation.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import shutil
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__, kernels
from .engine import EngineError, generate
from .hindsight import (
    CounterfactualPair,
    ImpossibleObservation,
    counterfactual,
    joint_sample,
)
from .interventions import apply_intervention, load_intervention
from .metrics import metric_report, normalized_lcp
from .models import ModelError, Vocabulary, fit_table_lm, load_table_lm, save_table_lm
from .oracle import (
    CONTRAST_OBSERVED,
    CONTRAST_ORDERINGS,
    CONTRAST_PHI,
    CONTRAST_PHI_CF,
    OracleError,
    check_counterfactual_stability,
    enumerate_distribution,
    find_inverse_cdf_witness,
    inverse_cdf_counterfactual,
    single_step_counterfactuals,
)
from .remote import RemoteProvider

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_VIOLATION = 0, 1, 2, 3

REMOTE_ENV_VAR = "GUMBELCF_REMOTE"

log = logging.getLogger("gumbelcf")


class CliError(Exception):
    """Data-level failure; maps to exit code 2."""


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage errors; this tool reserves 2 for data errors
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


# ---------------------------------------------------------------------------
# config handling

_INT_OPTS = {"max_len", "seed", "jobs", "top_n", "trials", "instances", "order", "vocab_size"}
_FLOAT_OPTS = {"smoothing"}
_FLAG_OPTS = {"force", "csv"}
# execution details that must not affect the recorded config identity
_HASH_EXCLUDED = {"out", "force", "jobs", "config", "func"}


def _load_config_file(path: str) -> dict[str, str]:
    values = {}
    try:
        with open(path, encoding="utf-8") as fh:
            for ln, raw in enumerate(fh, 1):
                line = raw.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise CliError(f"{path}:{ln}: expected 'key = value'")
                key, _, value = line.partition("=")
                values[key.strip().replace("-", "_")] = value.strip()
    except OSError as exc:
        raise CliError(f"cannot read config file {path}: {exc}") from exc
    return values


def _coerce(key: str, value: str):
    if key in _INT_OPTS:
        return int(value)
    if key in _FLOAT_OPTS:
        return float(value)
    if key in _FLAG_OPTS:
        return value.lower() in ("1", "true", "yes", "on")
    return value


def _merge_config(args: argparse.Namespace) -> dict:
    """Resolve options: explicit flags, then config-file values, then defaults.

    Every option parses with default None (flags with False) so that a config
    file can fill in whatever the command line left unset.
    """
    if getattr(args, "config", None):
        for key, value in _load_config_file(args.config).items():
            if not hasattr(args, key) or key.startswith("_"):
                raise CliError(f"config file option {key!r} unknown for this subcommand")
            if getattr(args, key) is None or getattr(args, key) is False:
                setattr(args, key, _coerce(key, value))
    for key, value in getattr(args, "_defaults", {}).items():
        if getattr(args, key) is None:
            setattr(args, key, value)
    resolved = {
        k: v
        for k, v in sorted(vars(args).items())
        if k not in ("func", "config") and not k.startswith("_")
    }
    return resolved


def _config_hash(resolved: dict) -> str:
    semantic = {k: v for k, v in resolved.items() if k not in _HASH_EXCLUDED}
    blob = json.dumps(semantic, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:12]


def _record_stream(run_seed: int, index: int):
    """Per-record generator plus a storable integer fingerprint of its seed."""
    ss = np.random.SeedSequence(entropy=run_seed, spawn_key=(index,))
    fingerprint = int(ss.generate_state(1, np.uint64)[0] % (2**63 - 1))
    return np.random.default_rng(ss), fingerprint


def _prepare_out_dir(out: str, force: bool) -> Path:
    path = Path(out)
    if path.exists():
        if not force:
            raise CliError(f"output directory {out} exists (rerun with --force)")
        shutil.rmtree(path)
    path.mkdir(parents=True)
    (path / "noise").mkdir()
    return path


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _write_run_json(out: Path, resolved: dict, cfg_hash: str) -> None:
    info = {
        "config": {k: v for k, v in resolved.items() if k != "func"},
        "config_hash": cfg_hash,
        "kernel_backend": kernels.BACKEND,
        "version": __version__,
    }
    (out / "run.json").write_text(_dump(info) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# providers and inputs

def resolve_provider(source: str):
    """'table:PATH' or bare PATH loads a table LM; 'remote:HOST:PORT' or
    'remote:stdio:CMD' connects a protocol client. GUMBELCF_REMOTE overrides
    the remote address."""
    if source.startswith("remote:"):
        address = os.environ.get(REMOTE_ENV_VAR) or source[len("remote:"):]
        return RemoteProvider(address)
    path = source[len("table:"):] if source.startswith("table:") else source
    return load_table_lm(path)


def _resolve_pair(args):
    original = resolve_provider(args.original)
    cf = resolve_provider(args.cf) if args.cf else original
    if args.intervention:
        cf = apply_intervention(cf, load_intervention(args.intervention))
    elif not args.cf:
        raise CliError("need --cf and/or --intervention to define the counterfactual provider")
    return original, cf


def _read_jsonl(path: str) -> list[dict]:
    records = []
    try:
        with open(path, encoding="utf-8") as fh:
            for ln, raw in enumerate(fh, 1):
                line = raw.strip()
                if not line:
                    continue
                try:
                    records.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise CliError(f"{path}:{ln}: bad JSON: {exc}") from exc
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc}") from exc
    if not records:
        raise CliError(f"{path}: no records")
    return records


def _prompt_tokens(rec: dict, provider, path: str, ln: int) -> list[int]:
    if "prompt_tokens" in rec:
        return [int(t) for t in rec["prompt_tokens"]]
    if "prompt" in rec:
        return [int(t) for t in rec["prompt"]]
    if "prompt_text" in rec:
        encode = getattr(provider, "encode", None)
        if encode is None:
            raise CliError(
                f"{path}:{ln}: prompt_text requires a remote provider with an encode op"
            )
        return encode(rec["prompt_text"])
    raise CliError(f"{path}:{ln}: record has no prompt_tokens/prompt_text")


def _observed_tokens(rec: dict, path: str, ln: int) -> list[int]:
    for key in ("observed_tokens", "observed", "tokens"):
        if key in rec:
            return [int(t) for t in rec[key]]
    raise CliError(f"{path}:{ln}: record has no observed/tokens field")


def _pool_map(jobs: int, fn, items):
    if jobs and jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, range(len(items)), items))
    return [fn(i, item) for i, item in enumerate(items)]


# ---------------------------------------------------------------------------
# subcommands

def cmd_generate(args, resolved) -> int:
    provider = resolve_provider(args.original)
    records = _read_jsonl(args.prompts)
    out = _prepare_out_dir(args.out, args.force)
    cfg_hash = _config_hash(resolved)
    _write_run_json(out, resolved, cfg_hash)

    def one(index: int, rec: dict) -> dict:
        rng, fingerprint = _record_stream(args.seed, index)
        base = {"index": index, "seed": fingerprint, "config_hash": cfg_hash}
        try:
            prompt = _prompt_tokens(rec, provider, args.prompts, index + 1)
            gen = generate(provider, prompt, args.max_len, rng, seed=fingerprint)
        except (ModelError, EngineError, CliError) as exc:
            log.warning("record %d failed: %s", index, exc)
            return dict(base, error=str(exc))
        noise_file = f"noise/gen_{index:06d}.gnr"
        gen.noise.save(out / noise_file, dtype=args.noise_dtype)
        return dict(
            base,
            prompt=gen.prompt,
            tokens=gen.tokens,
            stop=gen.stop,
            noise_file=noise_file,
            provider=gen.provider_descriptor,
        )

    results = _pool_map(args.jobs, one, records)
    with open(out / "generations.jsonl", "w", encoding="utf-8") as fh:
        for rec in results:
            fh.write(_dump(rec) + "\n")
    failures = sum("error" in r for r in results)
    log.info("generate: %d records (%d failed) -> %s", len(results), failures, out)
    return EXIT_OK


def cmd_counterfactual(args, resolved) -> int:
    original, cf = _resolve_pair(args)
    records = _read_jsonl(args.prompts)
    out = _prepare_out_dir(args.out, args.force)
    cfg_hash = _config_hash(resolved)
    _write_run_json(out, resolved, cfg_hash)

    def one(index: int, rec: dict) -> dict:
        rng, fingerprint = _record_stream(args.seed, index)
        base = {"index": index, "seed": fingerprint, "config_hash": cfg_hash}
        if "error" in rec:
            return dict(base, error=f"skipped: upstream record failed ({rec['error']})")
        try:
            prompt = _prompt_tokens(rec, original, args.prompts, index + 1)
            observed = _observed_tokens(rec, args.prompts, index + 1)
            max_len = args.max_len if args.max_len else len(observed)
            pair = counterfactual(original, cf, prompt, observed, max_len, rng, seed=fingerprint)
        except ImpossibleObservation as exc:
            log.warning("record %d: posterior undefined, skipped (%s)", index, exc)
            return dict(base, error=f"posterior undefined: {exc}")
        except (ModelError, EngineError, CliError) as exc:
            log.warning("record %d failed: %s", index, exc)
            return dict(base, error=str(exc))
        noise_file = f"noise/pair_{index:06d}.gnr"
        pair.noise.save(out / noise_file, dtype=args.noise_dtype)
        pair.metrics = {"normalized_lcp": normalized_lcp(pair.observed, pair.counterfactual)}
        return dict(base, **pair.to_json_record(noise_file))

    results = _pool_map(args.jobs, one, records)
    with open(out / "pairs.jsonl", "w", encoding="utf-8") as fh:
        for rec in results:
            fh.write(_dump(rec) + "\n")
    failures = sum("error" in r for r in results)
    log.info("counterfactual: %d pairs (%d skipped) -> %s", len(results), failures, out)
    return EXIT_OK


def cmd_joint(args, resolved) -> int:
    original, cf = _resolve_pair(args)
    records = _read_jsonl(args.prompts)
    out = _prepare_out_dir(args.out, args.force)
    cfg_hash = _config_hash(resolved)
    _write_run_json(out, resolved, cfg_hash)

    def one(index: int, rec: dict) -> dict:
        rng, fingerprint = _record_stream(args.seed, index)
        base = {"index": index, "seed": fingerprint, "config_hash": cfg_hash}
        try:
            prompt = _prompt_tokens(rec, original, args.prompts, index + 1)
            pair = joint_sample(original, cf, prompt, args.max_len, rng, seed=fingerprint)
        except (ModelError, EngineError, CliError) as exc:
            log.warning("record %d failed: %s", index, exc)
            return dict(base, error=str(exc))
        noise_file = f"noise/joint_{index:06d}.gnr"
        pair.noise.save(out / noise_file, dtype=args.noise_dtype)
        pair.metrics = {"normalized_lcp": normalized_lcp(pair.observed, pair.counterfactual)}
        return dict(base, **pair.to_json_record(noise_file))

    results = _pool_map(args.jobs, one, records)
    with open(out / "pairs.jsonl", "w", encoding="utf-8") as fh:
        for rec in results:
            fh.write(_dump(rec) + "\n")
    log.info("joint: %d pairs -> %s", len(results), out)
    return EXIT_OK


def cmd_eval(args, resolved) -> int:
    records = _read_jsonl(args.pairs)
    pairs = []
    for rec in records:
        if "error" in rec:
            continue
        pairs.append(
            CounterfactualPair(
                prompt=[int(t) for t in rec["prompt"]],
                observed=[int(t) for t in rec["observed"]],
                counterfactual=[int(t) for t in rec["counterfactual"]],
                noise=None,
                original_descriptor=rec.get("orig", ""),
                counterfactual_descriptor=rec.get("cf", ""),
                observed_stop=rec.get("stop", {}).get("observed", ""),
                counterfactual_stop=rec.get("stop", {}).get("cf", ""),
            )
        )
    if not pairs:
        raise CliError(f"{args.pairs}: no usable pair records")
    providers = (None, None)
    if args.original and (args.cf or args.intervention):
        providers = _resolve_pair(args)
    out = _prepare_out_dir(args.out, args.force)
    cfg_hash = _config_hash(resolved)
    _write_run_json(out, resolved, cfg_hash)
    report = metric_report(pairs, providers[0], providers[1], top_n=args.top_n, mode=args.mode)
    report["config_hash"] = cfg_hash
    (out / "report.json").write_text(_dump(report) + "\n", encoding="utf-8")
    if args.csv:
        with open(out / "records.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["index", "normalized_lcp", "observed_len", "counterfactual_len"])
            for i, p in enumerate(pairs):
                writer.writerow(
                    [i, normalized_lcp(p.observed, p.counterfactual), len(p.observed), len(p.counterfactual)]
                )
    log.info("eval: %d pairs -> %s", len(pairs), out)
    return EXIT_OK


def _oracle_stability(args, rng) -> dict:
    per_instance = max(1, args.trials // args.instances)
    instance_rng = np.random.default_rng(np.random.SeedSequence(entropy=args.seed, spawn_key=(0,)))
    total = 0
    violations = 0
    for _ in range(args.instances):
        phi = instance_rng.normal(size=args.vocab_size) * 2.0
        phi_cf = instance_rng.normal(size=args.vocab_size) * 2.0
        violations += check_counterfactual_stability(phi, phi_cf, per_instance, rng)
        total += per_instance
    return {
        "check": "stability",
        "instances": args.instances,
        "trials": total,
        "violations": violations,
        "ok": violations == 0,
    }


def _oracle_contrast(args, rng) -> dict:
    witness = find_inverse_cdf_witness(rng)
    n = 100_000
    counts = []
    for ordering in CONTRAST_ORDERINGS:
        draws = [
            inverse_cdf_counterfactual(CONTRAST_PHI, CONTRAST_PHI_CF, CONTRAST_OBSERVED, ordering, rng)
            for _ in range(n)
        ]
        counts.append(np.bincount(draws, minlength=3) / n)
    ordering_tv = float(0.5 * np.abs(counts[0] - counts[1]).sum())
    gumbel_counts = []
    for _ in CONTRAST_ORDERINGS:  # same mechanism twice: ordering cannot enter
        draws = single_step_counterfactuals(CONTRAST_PHI, CONTRAST_PHI_CF, CONTRAST_OBSERVED, n, rng)
        gumbel_counts.append(np.bincount(draws, minlength=3) / n)
    gumbel_tv = float(0.5 * np.abs(gumbel_counts[0] - gumbel_counts[1]).sum())
    ok = witness is not None and ordering_tv > 0.05
    return {
        "check": "contrast",
        "witness": witness,
        "ordering_tv": ordering_tv,
        "gumbel_resample_tv": gumbel_tv,
        "ok": bool(ok),
    }


def _oracle_enumerate(args, out: Path) -> dict:
    if not args.original:
        raise CliError("enumerate check needs --original")
    provider = resolve_provider(args.original)
    dist = enumerate_distribution(provider, [], args.max_len or 3)
    with open(out / "enumeration.jsonl", "w", encoding="utf-8") as fh:
        for seq, prob in sorted(dist.entries.items()):
            fh.write(_dump({"string": list(seq), "prob": prob}) + "\n")
    mass_err = abs(dist.total - 1.0)
    return {
        "check": "enumerate",
        "sequences": len(dist.entries),
        "total_mass": dist.total,
        "cap_mass": dist.cap_mass,
        "ok": bool(mass_err < 1e-10),
    }


def cmd_oracle(args, resolved) -> int:
    out = _prepare_out_dir(args.out, args.force)
    cfg_hash = _config_hash(resolved)
    _write_run_json(out, resolved, cfg_hash)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=args.seed, spawn_key=(1,)))
    checks = ["stability", "contrast"] if args.check == "all" else [args.check]
    reports = []
    for name in checks:
        if name == "stability":
            reports.append(_oracle_stability(args, rng))
        elif name == "contrast":
            reports.append(_oracle_contrast(args, rng))
        elif name == "enumerate":
            reports.append(_oracle_enumerate(args, out))
        else:
            raise CliError(f"unknown oracle check {name!r}")
        log.info("oracle %s: %s", name, "ok" if reports[-1]["ok"] else "VIOLATION")
    report = {"checks": reports, "config_hash": cfg_hash}
    (out / "report.json").write_text(_dump(report) + "\n", encoding="utf-8")
    return EXIT_OK if all(r["ok"] for r in reports) else EXIT_VIOLATION


def cmd_fit_table(args, resolved) -> int:
    try:
        with open(args.vocab, encoding="utf-8") as fh:
            symbols = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(f"cannot read vocab file {args.vocab}: {exc}") from exc
    if args.eos not in symbols:
        raise CliError(f"EOS symbol {args.eos!r} not in vocabulary")
    vocab = Vocabulary(tuple(symbols), symbols.index(args.eos))
    corpus = [_observed_tokens(rec, args.corpus, i + 1) for i, rec in enumerate(_read_jsonl(args.corpus))]
    try:
        lm = fit_table_lm(corpus, vocab, order=args.order, smoothing=args.smoothing)
    except ModelError as exc:
        raise CliError(str(exc)) from exc
    out = Path(args.out)
    if out.exists() and not args.force:
        raise CliError(f"output file {out} exists (rerun with --force)")
    if out.parent and not out.parent.exists():
        out.parent.mkdir(parents=True)
    save_table_lm(lm, out)
    log.info("fit-table: %d sequences, order %d -> %s", len(corpus), args.order, out)
    return EXIT_OK


# ---------------------------------------------------------------------------

def _add_common(sub):
    # defaults stay None here; _merge_config applies the _defaults table after
    # folding in the config file
    sub.add_argument("--config", help="key = value file mirroring the flags; flags override")
    sub.add_argument("--seed", type=int, help="run seed (drives all randomness; default 0)")
    sub.add_argument("--out", help="output directory")
    sub.add_argument("--force", action="store_true", default=False, help="replace an existing output")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gumbelcf", description=__doc__)
    parser.add_argument("--version", action="version", version=f"gumbelcf {__version__}")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("generate", help="sample strings and record their noise")
    _add_common(p)
    p.add_argument("--original", help="provider source (table:PATH | remote:ADDR)")
    p.add_argument("--prompts", help="JSONL of {prompt_tokens|prompt_text}")
    p.add_argument("--max-len", type=int)
    p.add_argument("--jobs", type=int)
    p.add_argument("--noise-dtype", choices=("f64", "f32"))
    p.set_defaults(
        func=cmd_generate,
        _required=("original", "prompts", "out"),
        _defaults={"seed": 0, "max_len": 25, "jobs": 1, "noise_dtype": "f64"},
    )

    p = subs.add_parser("counterfactual", help="hindsight-regenerate observed strings")
    _add_common(p)
    p.add_argument("--original")
    p.add_argument("--cf", help="counterfactual provider source (defaults to --original)")
    p.add_argument("--intervention", help="InterventionSpec JSON file applied to the base")
    p.add_argument("--prompts",
                   help="JSONL with prompt and observed tokens (e.g. generations.jsonl)")
    p.add_argument("--max-len", type=int,
                   help="counterfactual cap; 0 means each record's observed length")
    p.add_argument("--jobs", type=int)
    p.add_argument("--noise-dtype", choices=("f64", "f32"))
    p.set_defaults(
        func=cmd_counterfactual,
        _required=("original", "prompts", "out"),
        _defaults={"seed": 0, "max_len": 0, "jobs": 1, "noise_dtype": "f64"},
    )

    p = subs.add_parser("joint", help="sample (original, counterfactual) pairs from shared noise")
    _add_common(p)
    p.add_argument("--original")
    p.add_argument("--cf")
    p.add_argument("--intervention")
    p.add_argument("--prompts")
    p.add_argument("--max-len", type=int)
    p.add_argument("--jobs", type=int)
    p.add_argument("--noise-dtype", choices=("f64", "f32"))
    p.set_defaults(
        func=cmd_joint,
        _required=("original", "prompts", "out"),
        _defaults={"seed": 0, "max_len": 25, "jobs": 1, "noise_dtype": "f64"},
    )

    p = subs.add_parser("eval", help="metric report over a pairs file")
    _add_common(p)
    p.add_argument("--pairs", help="pairs.jsonl from counterfactual/joint")
    p.add_argument("--original", help="provider for log-ratio rankings")
    p.add_argument("--cf")
    p.add_argument("--intervention")
    p.add_argument("--mode", choices=("observed", "paired"),
                   help="score observed tokens only, or both texts")
    p.add_argument("--top-n", type=int)
    p.add_argument("--csv", action="store_true", default=False, help="also write per-record rows")
    p.set_defaults(
        func=cmd_eval,
        _required=("pairs", "out"),
        _defaults={"seed": 0, "mode": "observed", "top_n": 15},
    )

    p = subs.add_parser("oracle", help="run independent verification suites")
    _add_common(p)
    p.add_argument("--check", choices=("stability", "contrast", "enumerate", "all"))
    p.add_argument("--trials", type=int, help="total stability trials")
    p.add_argument("--instances", type=int, help="random (phi, phi~) pairs")
    p.add_argument("--vocab-size", type=int)
    p.add_argument("--original", help="table LM for the enumerate check")
    p.add_argument("--max-len", type=int, help="enumeration cap")
    p.set_defaults(
        func=cmd_oracle,
        _required=("out",),
        _defaults={
            "seed": 0,
            "check": "all",
            "trials": 1_000_000,
            "instances": 10,
            "vocab_size": 5,
            "max_len": 3,
        },
    )

    p = subs.add_parser("fit-table", help="count-based table-LM fit from a token-id corpus")
    _add_common(p)
    p.add_argument("--corpus", help="JSONL of {tokens: [ids]}")
    p.add_argument("--vocab", help="JSON array of symbols")
    p.add_argument("--eos", help="EOS symbol (must be in the vocabulary)")
    p.add_argument("--order", type=int)
    p.add_argument("--smoothing", type=float)
    p.set_defaults(
        func=cmd_fit_table,
        _required=("corpus", "vocab", "eos", "out"),
        _defaults={"seed": 0, "order": 2, "smoothing": 1.0},
    )
    return parser


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO, format="%(levelname)s %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        resolved = _merge_config(args)
    except CliError as exc:
        log.error("%s", exc)
        return EXIT_DATA
    missing = [name for name in getattr(args, "_required", ()) if not getattr(args, name)]
    if missing:
        parser.error("missing required options: " + ", ".join(f"--{m.replace('_', '-')}" for m in missing))
    try:
        return args.func(args, resolved)
    except (CliError, ModelError, EngineError, OracleError, OSError) as exc:
        log.error("%s", exc)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``dcin <subcommand> ...``.

Exit codes: 0 success, 1 usage, 2 validation (bad config, bad input files,
wrong checkpoint kind), 3 runtime failure (aborted training, failed
verification, stale cache).
"""

from __future__ import annotations

import os
import sys

# BLAS pools are sized when numpy is first imported, so the cap has to be in
# the environment before that happens.
_THREADS = os.environ.get("DCIN_THREADS")
if _THREADS and _THREADS.isdigit() and int(_THREADS) > 0:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[_var] = _THREADS

import argparse  # noqa: E402
import hashlib  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import platform  # noqa: E402
import time  # noqa: E402
from dataclasses import replace  # noqa: E402

import numpy as np  # noqa: E402

from . import data as D  # noqa: E402
from . import serving as S  # noqa: E402
from . import training as T  # noqa: E402
from .core import ContractError, DimensionError  # noqa: E402
from .model import AblationFlags  # noqa: E402
from .schema import ValidationError  # noqa: E402

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2, 3
RUN_MANIFEST_SCHEMA = "dcin-run/v1"
ABLATIONS = {"none": AblationFlags(), "no-position": AblationFlags(use_position=False),
             "no-fcfm": AblationFlags(use_fcfm=False)}

log = logging.getLogger("dcin")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------------
# helpers


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_run_manifest(path, args, config: dict, inputs: dict, outputs: dict, extra=None) -> None:
    manifest = {
        "schema": RUN_MANIFEST_SCHEMA,
        "subcommand": args.command,
        "argv": sys.argv[1:],
        "config": config,
        "seed": getattr(args, "seed", None),
        "inputs": inputs,
        "outputs": outputs,
        "digests": {k: _sha256(v) for k, v in outputs.items() if v and os.path.isfile(v)},
        "threads": os.environ.get("DCIN_THREADS"),
        "python": platform.python_version(),
        "numpy": np.__version__,
    }
    if extra:
        manifest.update(extra)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")


def _dataset(data_dir):
    mpath = os.path.join(data_dir, "manifest.json")
    if not os.path.isfile(mpath):
        raise FileNotFoundError(f"no dataset at {data_dir!r} (missing manifest.json)")
    manifest = D.read_manifest(mpath)
    schema = D.SyntheticConfig.from_dict(manifest["config"]).schema()
    files = manifest.get("files", {"train": "train.jsonl", "test": "test.jsonl"})
    paths = {k: os.path.join(data_dir, v) for k, v in files.items()}
    return manifest, schema, paths


def _parse_seeds(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--seeds must be comma-separated integers, got {text!r}") from None
    if not seeds:
        raise UsageError("--seeds is empty")
    return seeds


def _train_config(args, **kw) -> T.TrainConfig:
    if args.paper:
        base = T.TrainConfig.paper()
    else:
        base = T.TrainConfig(lr=T.DESK_LR, epochs=T.DESK_EPOCHS)
    over = {k: v for k, v in (("lr", args.lr), ("batch_size", args.batch_size),
                              ("epochs", args.epochs)) if v is not None}
    cfg = replace(base, **over, **kw)
    if cfg.lr == 0:
        print("warning: --lr 0 leaves every parameter at its initial value", file=sys.stderr)
    return cfg


def _mkparent(path) -> None:
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)


# --------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    config = D.SyntheticConfig(
        num_users=args.num_users, num_items=args.num_items, num_categories=args.num_categories,
        n_clicks=args.n_clicks, window=args.window, page_size=args.page_size,
        position_bias=args.position_bias, context_strength=args.context_strength,
        label_noise=args.label_noise, base_rate=args.base_rate,
        sessions_per_page=args.sessions_per_page, page_jitter=args.page_jitter,
        rate_drift=args.rate_drift, quality_strength=args.quality_strength, page_tilt=args.page_tilt,
        seed=args.seed,
    )
    split = D.generate_dataset(config, args.out, compress=args.compress)
    outputs = {"train": split.train_path, "test": split.test_path, "manifest": split.manifest_path}
    _write_run_manifest(os.path.join(args.out, "run.json"), args, config.to_dict(), {}, outputs)
    c = split.manifest["counts"]
    print(f"wrote {c['train_sessions']} train / {c['test_sessions']} test sessions to {args.out} "
          f"(N={config.n_clicks}, M={config.window})")
    return EXIT_OK


def cmd_train(args) -> int:
    manifest, schema, paths = _dataset(args.data)
    cfg = _train_config(args, model=args.model, flags=ABLATIONS[args.ablation], seed=args.seed)
    train_store = D.load_store(paths["train"], schema)
    test_store = D.load_store(paths["test"], schema)
    model, history = T.train(cfg, train_store, test_store)
    _mkparent(args.out)
    ckpt = T.Checkpoint(model, cfg.to_dict(), {"history": history, "ablation": args.ablation})
    digest = T.save_checkpoint(ckpt, args.out)
    last = history[-1]
    _write_run_manifest(args.out + ".run.json", args, cfg.to_dict(), paths, {"checkpoint": args.out},
                        {"history": history, "param_digest": digest})
    print(f"{args.model}[{args.ablation}] seed={args.seed} auc={last['test_auc']:.5f} "
          f"logloss={last['test_logloss']:.5f} -> {args.out}")
    return EXIT_OK


def cmd_suite(args) -> int:
    manifest, schema, paths = _dataset(args.data)
    seeds = _parse_seeds(args.seeds)
    cfg = _train_config(args)
    train_store = D.load_store(paths["train"], schema)
    test_store = D.load_store(paths["test"], schema)
    result = T.run_experiment_suite(train_store, test_store, seeds, cfg)
    os.makedirs(args.out, exist_ok=True)
    csv_path = os.path.join(args.out, "metrics.csv")
    summary_path = os.path.join(args.out, "summary.json")
    T.write_metrics_csv(result["runs"], csv_path)
    with open(summary_path, "w", encoding="utf-8") as fh:
        json.dump(result, fh, indent=2)
        fh.write("\n")
    _write_run_manifest(os.path.join(args.out, "run.json"), args, {**cfg.to_dict(), "seeds": seeds},
                        paths, {"metrics": csv_path, "summary": summary_path})
    print(f"{'model':<18}{'auc_mean':>10}{'auc_std':>10}{'RelaImpr%':>11}")
    for row in result["summary"]:
        print(f"{row['model']:<18}{row['auc_mean']:>10.5f}{row['auc_std']:>10.5f}{row['rela_impr_mean']:>11.2f}")
    return EXIT_OK


def _bench_users(args, ckpt) -> list:
    if args.data:
        _, schema, paths = _dataset(args.data)
        store = D.load_store(paths["test"], schema)
        rows = np.random.default_rng(args.seed).choice(len(store), size=min(args.users, len(store)),
                                                       replace=False)
        beh = store.batch(np.sort(rows)).behaviors()
    else:
        beh = S.random_behaviors(ckpt.model.schema, args.users, args.n_clicks, args.window, args.seed)
    return [beh.take(i) for i in range(len(beh))]


def cmd_serve_bench(args) -> int:
    ckpt = T.load_checkpoint(args.ckpt)
    users = _bench_users(args, ckpt)
    report = S.bench_latency(ckpt, users, k=args.k, repetitions=args.reps, warmup=args.warmup,
                             requests_per_cache=args.requests_per_cache, seed=args.seed,
                             verify=args.verify)
    out = {}
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        out["latency_csv"] = os.path.join(args.out, "latency.csv")
        out["report"] = os.path.join(args.out, "report.json")
        report.write_csv(out["latency_csv"])
        with open(out["report"], "w", encoding="utf-8") as fh:
            json.dump(report.to_dict(), fh, indent=2)
            fh.write("\n")
        _write_run_manifest(os.path.join(args.out, "run.json"), args, vars(args) | {"func": None},
                            {"checkpoint": args.ckpt, "data": args.data}, out)
    print(json.dumps(report.to_dict(), indent=2))
    if args.verify:
        print(f"max |cached - full| = {report.max_abs_diff:.3e}")
        if report.max_abs_diff > S.EQUIVALENCE_TOL:
            print(f"error: cached scores deviate by more than {S.EQUIVALENCE_TOL:g}", file=sys.stderr)
            return EXIT_RUNTIME
    return EXIT_OK


def cmd_dump_interests(args) -> int:
    ckpt = T.load_checkpoint(args.ckpt)
    if ckpt.kind != "dcin":
        raise T.KindError(f"interest export needs a dcin checkpoint, got {ckpt.kind!r}")
    _, schema, paths = _dataset(args.data)
    batches = D.load_batches(paths[args.split], args.limit, schema)
    batch = next(batches, None)
    if batch is None:
        raise ValidationError(f"{paths[args.split]}: no sessions")
    _mkparent(args.out)
    records = T.dump_interests(ckpt, batch, args.out)
    _write_run_manifest(args.out + ".run.json", args, {"limit": args.limit, "split": args.split},
                        {"checkpoint": args.ckpt, "data": paths[args.split]}, {"interests": args.out})
    print(f"wrote {len(records)} interest records for {len(batch)} sessions to {args.out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dcin", description="Context-aware CTR models on synthetic browsing logs.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="simulate a dataset")
    d = D.SyntheticConfig()
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--seed", type=int, default=d.seed)
    g.add_argument("--num-users", type=int, default=d.num_users)
    g.add_argument("--num-items", type=int, default=d.num_items)
    g.add_argument("--num-categories", type=int, default=d.num_categories)
    g.add_argument("--n-clicks", type=int, default=d.n_clicks, help="N, clicks kept per session")
    g.add_argument("--window", type=int, default=d.window, help="M, display items per click")
    g.add_argument("--page-size", type=int, default=d.page_size)
    g.add_argument("--position-bias", type=float, default=d.position_bias)
    g.add_argument("--context-strength", type=float, default=d.context_strength)
    g.add_argument("--label-noise", type=float, default=d.label_noise)
    g.add_argument("--base-rate", type=float, default=d.base_rate)
    g.add_argument("--sessions-per-page", type=int, default=d.sessions_per_page)
    g.add_argument("--page-jitter", type=float, default=d.page_jitter)
    g.add_argument("--rate-drift", type=float, default=d.rate_drift)
    g.add_argument("--quality-strength", type=float, default=d.quality_strength)
    g.add_argument("--page-tilt", type=float, default=d.page_tilt)
    g.add_argument("--no-compress", dest="compress", action="store_false",
                   help="write plain .jsonl instead of .jsonl.gz")
    g.set_defaults(func=cmd_gen_data)

    def optim_flags(q):
        q.add_argument("--lr", type=float, default=None)
        q.add_argument("--batch-size", type=int, default=None)
        q.add_argument("--epochs", type=int, default=None)
        q.add_argument("--paper", action="store_true",
                       help=f"published optimizer settings (lr {T.PAPER_LR:g}, batch {T.PAPER_BATCH_SIZE})")

    t = sub.add_parser("train", help="train one model")
    t.add_argument("--data", required=True, help="dataset directory from gen-data")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--model", choices=sorted(T.MODEL_KINDS), default="dcin")
    t.add_argument("--ablation", choices=sorted(ABLATIONS), default="none")
    t.add_argument("--seed", type=int, default=0)
    optim_flags(t)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("suite", help="train every variant over several seeds")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--seeds", default="1,2,3,4,5")
    optim_flags(s)
    s.set_defaults(func=cmd_suite)

    b = sub.add_parser("serve-bench", help="cached vs full-path latency")
    b.add_argument("--ckpt", required=True)
    b.add_argument("--data", default=None, help="draw users from this dataset's test split")
    b.add_argument("--out", default=None, help="directory for latency.csv and report.json")
    b.add_argument("--k", type=int, default=100, help="candidates per request")
    b.add_argument("--reps", type=int, default=1000)
    b.add_argument("--warmup", type=int, default=100)
    b.add_argument("--users", type=int, default=20)
    b.add_argument("--requests-per-cache", type=int, default=10)
    b.add_argument("--n-clicks", type=int, default=50, help="N for synthetic users when --data is absent")
    b.add_argument("--window", type=int, default=20, help="M for synthetic users when --data is absent")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--verify", action="store_true", help="compare scores, fail above 1e-9")
    b.set_defaults(func=cmd_serve_bench)

    e = sub.add_parser("dump-interests", help="export interests and attention weights")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--split", choices=("train", "test"), default="test")
    e.add_argument("--limit", type=int, default=100, help="number of sessions to export")
    e.set_defaults(func=cmd_dump_interests)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    if _THREADS is not None and not (_THREADS.isdigit() and int(_THREADS) > 0):
        print(f"dcin: error: DCIN_THREADS must be a positive integer, got {_THREADS!r}", file=sys.stderr)
        return EXIT_USAGE
    t0 = time.perf_counter()
    try:
        code = args.func(args)
    except UsageError as exc:
        print(f"dcin {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValidationError, DimensionError, ContractError, T.KindError, FileNotFoundError,
            ValueError) as exc:
        print(f"dcin {args.command}: invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (T.TrainingAborted, S.StaleCacheError, RuntimeError, OSError) as exc:
        print(f"dcin {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    log.info("%s finished in %.1fs", args.command, time.perf_counter() - t0)
    return code


if __name__ == "__main__":
    sys.exit(main())

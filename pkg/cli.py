"""Command-line tool for GTTF graph traversal, embedding training and audits."""

import argparse
import logging
import sys
import time
from pathlib import Path

# Add project root to path
sys.path.insert(0, str(Path(__file__).parent))

import numpy as np
from pydantic import ValidationError

from app.config import settings
from app.errors import GttfError
from app.graph import toy_graph
from app.graph.compact_adj import SNAPSHOT_MAGIC, CompactAdj, build_compact_adj
from app.graph.edge_list import EdgeList, load_edge_list, write_edge_list, write_id_map
from app.graph.generators import GRAPH_KINDS, generate_graph
from app.reports import RunManifest, write_table
from app.services.audits import CHECKS, run_checks
from app.services.benchmark import bench_traverse, storage_audit
from app.services.estimators import audit_unbiasedness, audit_variance, estimate_tk
from app.services.evaluation import evaluate_link_prediction, make_split
from app.services.learning import (
    METHODS,
    EmbeddingModel,
    TrainConfig,
    read_embeddings,
    train_embeddings,
    write_embeddings,
    write_loss_trace,
    write_q_trace,
)
from app.services.traversal import RngStream

logger = logging.getLogger("gttf")

EXIT_OK, EXIT_AUDIT_FAILED, EXIT_USAGE = 0, 1, 2
SMALL_GRAPH = 1000


class UsageError(Exception):
    """Bad flag combination or missing file; exits with code 2."""


def _int_list(text: str) -> list[int]:
    try:
        values = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("expected at least one integer")
    return values


def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


# ── Shared plumbing ──────────────────────────────────────────────────


class Run:
    """Timings and outputs of one command, flushed into the manifest."""

    def __init__(self, command: str, args: argparse.Namespace):
        self.command = command
        self.args = args
        self.output_dir = Path(args.output_dir)
        self.output_dir.mkdir(parents=True, exist_ok=True)
        self.timings: dict[str, float] = {}
        self.outputs: list[str] = []
        self.graph: dict[str, int] = {}
        self._phase_start = time.perf_counter()

    def phase(self, name: str) -> None:
        now = time.perf_counter()
        self.timings[name] = round(now - self._phase_start, 6)
        self._phase_start = now

    def path(self, name: str) -> Path:
        path = self.output_dir / name
        self.outputs.append(str(path))
        return path

    def finish(self) -> Path:
        flags = {k: v for k, v in vars(self.args).items() if k not in ("command", "from_manifest")}
        manifest = RunManifest(
            command=self.command,
            flags=flags,
            seed=self.args.seed,
            graph=self.graph,
            timings=self.timings,
            outputs=self.outputs,
        )
        return manifest.write(self.output_dir / "manifest.json")


def _load_edges(args: argparse.Namespace) -> EdgeList:
    path = Path(args.graph)
    if not path.exists():
        raise UsageError(f"graph file not found: {path}")
    if _is_snapshot(path):
        adj = CompactAdj.load(path)
        return EdgeList(src=adj.sources(), dst=adj.pool, n=adj.n, directed=True)
    return load_edge_list(
        path, args.format, map_ids=args.map_ids, allow_self_loops=args.allow_self_loops,
        directed=args.directed,
    )


def _is_snapshot(path: Path) -> bool:
    with open(path, "rb") as handle:
        return handle.read(len(SNAPSHOT_MAGIC)) == SNAPSHOT_MAGIC


def _load_graph(args: argparse.Namespace, run: Run) -> tuple[CompactAdj, EdgeList | None]:
    if args.graph is None:
        adj, edges = toy_graph(), None
    elif Path(args.graph).exists() and _is_snapshot(Path(args.graph)):
        adj, edges = CompactAdj.load(args.graph), None
    else:
        edges = _load_edges(args)
        adj = build_compact_adj(edges, symmetrize=not args.directed)
        if edges.labels is not None:
            write_id_map(edges.labels, run.path("id_map.tsv"))
    run.graph = {"n": adj.n, "m": adj.m}
    run.phase("load")
    print(f"📄 Graph: n={adj.n}, m={adj.m}")
    return adj, edges


def _train_config(args: argparse.Namespace) -> TrainConfig:
    return TrainConfig(
        batch_size=args.batch_size,
        fanouts=args.fanouts or [args.fanout] * args.window,
        window=args.window,
        dim=args.dim,
        negatives=args.negatives,
        contrastive_samples=args.contrastive_samples,
        learning_rate=args.lr,
        lr_decay=args.lr_decay,
        lr_decay_every=args.lr_decay_every,
        epochs=args.epochs,
        seed=args.seed,
        p=args.p,
        q=args.q,
        node2vec_mode=args.n2v_mode,
        q_init=args.q_init,
        replace=not args.without_replacement,
        log_every=args.log_every,
    )


def _train(adj: CompactAdj, method: str, args: argparse.Namespace, run: Run):
    config = _train_config(args)
    rng = RngStream(args.seed)
    model = EmbeddingModel.initialize(
        adj.n, config.dim, "deepwalk" if method == "node2vec" else method,
        rng.generator(0), q_init=config.q_init, window=len(config.resolved_fanouts()),
    )
    print(f"🧠 Training {method}: dim={config.dim}, fanouts={config.resolved_fanouts()}, epochs={config.epochs}")
    result = train_embeddings(adj, model, method, config, rng, workers=args.workers)
    run.phase("train")
    return result


# ── Commands ─────────────────────────────────────────────────────────


def cmd_gen_graph(args: argparse.Namespace, run: Run) -> int:
    edges = generate_graph(args.kind, args.n, args.param, args.seed)
    out = Path(args.out) if args.out else run.output_dir / f"{args.kind}_n{args.n}.tsv"
    write_edge_list(edges, out)
    run.outputs.append(str(out))
    adj = build_compact_adj(edges)
    run.graph = {"n": adj.n, "m": adj.m}
    if args.snapshot:
        adj.save(args.snapshot)
        run.outputs.append(str(args.snapshot))
    run.phase("generate")
    print(f"✅ {args.kind}: n={adj.n}, {edges.m} edges → {out}")
    return EXIT_OK


def cmd_estimate_tk(args: argparse.Namespace, run: Run) -> int:
    adj, _ = _load_graph(args, run)
    if args.batch is not None:
        batch = np.asarray(args.batch, dtype=np.int64)
    elif adj.n <= SMALL_GRAPH:
        batch = np.arange(adj.n, dtype=np.int64)
    else:
        raise UsageError(f"--batch is required for graphs above {SMALL_GRAPH} nodes")
    if ((batch < 0) | (batch >= adj.n)).any():
        raise UsageError(f"--batch holds ids outside [0, {adj.n})")

    rng = RngStream(args.seed)
    dump = run.path(args.dump_forest) if args.dump_forest else None
    estimate = estimate_tk(adj, batch, args.k, args.fanout, rng.substream(0), workers=args.workers, dump=dump)
    estimate.write(run.path(f"transition_k{args.k}.tsv"))
    run.phase("estimate")
    print(f"🔍 T̂^{args.k}: {estimate.entries.nnz} non-zero entries over {batch.size} seed(s)")

    if not args.audit:
        return EXIT_OK
    unbiased = audit_unbiasedness(adj, batch, args.k, args.fanout, args.runs, rng.substream(1), workers=args.workers)
    variance = audit_variance(
        adj, batch, args.k, args.fanout, args.runs, rng.substream(2),
        strict_bound=args.strict_bound, workers=args.workers,
    )
    run.phase("audit")
    text = unbiased.render("unbiasedness.") + variance.render("variance.")
    run.path("audit.txt").write_text(text, encoding="utf-8")
    variance_rows = {(u, v): row for u, v, *row in variance.entries}
    rows = [
        (u, v, exact, mean, se, *variance_rows.get((u, v), (0.0, 0.0, 0.0, 0.0)))
        for u, v, exact, mean, se in unbiased.entries
    ]
    write_table(
        run.path("audit_entries.tsv"),
        ["u", "v", "exact", "mean", "mean_se", "variance", "exact_variance", "independent_variance", "variance_se"],
        rows,
    )
    print(text, end="")
    ok = unbiased.passed and variance.passed
    print("✅ Audit passed" if ok else "❌ Audit failed")
    return EXIT_OK if ok else EXIT_AUDIT_FAILED


def cmd_train(args: argparse.Namespace, run: Run) -> int:
    adj, edges = _load_graph(args, run)
    result = _train(adj, args.method, args, run)
    labels = edges.labels if edges is not None else None
    write_embeddings(run.path("embeddings.txt"), result.model.embeddings(), labels)
    write_loss_trace(run.path("loss.csv"), result.losses)
    if args.method == "wys":
        write_q_trace(run.path("q_trace.csv"), result.q_trace)
        print(f"   → Q = {np.round(result.model.Q, 4).tolist()}")
    run.phase("write")
    print(f"✅ {len(result.losses)} rounds, final loss {result.losses[-1]:.6g}")
    return EXIT_OK


def cmd_eval_linkpred(args: argparse.Namespace, run: Run) -> int:
    if args.graph is None:
        raise UsageError("--graph is required for eval-linkpred")
    edges = _load_edges(args)
    run.phase("load")
    split = make_split(edges, args.fraction, args.negatives_per_edge, args.split_seed)
    train_adj = build_compact_adj(split.train)
    run.graph = {"n": train_adj.n, "m": train_adj.m}
    run.phase("split")
    print(f"✂️  Held out {split.test.shape[0]} edge(s), {split.negatives.shape[0]} negative pair(s)")

    if args.embeddings:
        path = Path(args.embeddings)
        if not path.exists():
            raise UsageError(f"embeddings file not found: {path}")
        Z = read_embeddings(path)
    else:
        Z = _train(train_adj, args.method, args, run).model.embeddings()
    report = evaluate_link_prediction(Z, split)
    run.phase("evaluate")
    report.write(run.path("metrics.txt"))
    print(f"📊 roc_auc={report.roc_auc:.4f} mean_rank={report.mean_rank:.3f} n_test={report.n_test}")
    return EXIT_OK


def cmd_bench_traverse(args: argparse.Namespace, run: Run) -> int:
    report = bench_traverse(args.sizes, args.batch_size, args.fanouts, args.repeats, args.seed)
    run.phase("bench")
    write_table(run.path("bench.tsv"), ["n", "m", "mean_s", "std_s"], report.rows)
    print(report.render(), end="")
    ok = report.passed is not False
    if args.storage:
        storage = storage_audit(seed=args.seed)
        run.phase("storage")
        write_table(run.path("storage.tsv"), ["n", "m", "bytes"], storage.rows)
        print(storage.render(), end="")
        ok = ok and bool(storage.passed)
    return EXIT_OK if ok else EXIT_AUDIT_FAILED


def cmd_check(args: argparse.Namespace, run: Run) -> int:
    adj, _ = _load_graph(args, run)
    if args.all or not args.prop:
        props = list(CHECKS)
    else:
        props = args.prop
    ensemble_fanout = args.ensemble_fanout
    if ensemble_fanout is None:
        ensemble_fanout = args.fanout if props == ["8"] else 1
    report = run_checks(
        adj,
        props,
        seed=args.seed,
        fanout=args.fanout,
        k=args.k,
        runs=args.runs,
        alpha=args.alpha,
        ensemble_n=args.n,
        ensemble_fanout=ensemble_fanout,
        window=args.window,
        strict_bound=args.strict_bound,
        strict_ensemble=args.strict_ensemble,
        workers=args.workers,
    )
    run.phase("check")
    text = report.render()
    run.path("check_report.txt").write_text(text, encoding="utf-8")
    print(text, end="")
    print("✅ All checks passed" if report.passed else f"❌ Failed: {', '.join(report.failed)}")
    return EXIT_OK if report.passed else EXIT_AUDIT_FAILED


COMMANDS = {
    "gen-graph": cmd_gen_graph,
    "estimate-tk": cmd_estimate_tk,
    "train": cmd_train,
    "eval-linkpred": cmd_eval_linkpred,
    "bench-traverse": cmd_bench_traverse,
    "check": cmd_check,
}


# ── Parser ───────────────────────────────────────────────────────────


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seed", type=int, default=settings.seed, help="64-bit run seed")
    parser.add_argument("--output-dir", default=settings.output_dir, help="Directory for outputs")
    parser.add_argument("--workers", type=int, default=settings.workers, help="Traversal worker threads")
    parser.add_argument("--log-level", default=settings.log_level, help="Logging level (default: INFO)")


def _add_graph(parser: argparse.ArgumentParser, required: bool = False) -> None:
    parser.add_argument("--graph", required=required, help="Edge-list file or CompactAdj snapshot")
    parser.add_argument("--format", choices=["tsv", "csv", "space"], help="Edge-list format (default: by suffix)")
    parser.add_argument("--map-ids", action="store_true", help="Remap arbitrary node labels to dense ids")
    parser.add_argument("--allow-self-loops", action="store_true", help="Keep self-loop lines")
    parser.add_argument("--directed", action="store_true", help="Do not symmetrize edges")


def _add_training(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--dim", type=int, default=settings.dim)
    parser.add_argument("--fanout", type=int, default=settings.fanout)
    parser.add_argument("--fanouts", type=_int_list, help="Per-depth fanouts, e.g. 3,3,3 (overrides --fanout)")
    parser.add_argument("--window", type=int, default=settings.window)
    parser.add_argument("--epochs", type=int, default=settings.epochs)
    parser.add_argument("--batch-size", type=int, default=64)
    parser.add_argument("--lr", type=float, default=settings.learning_rate)
    parser.add_argument("--lr-decay", type=float, default=settings.lr_decay)
    parser.add_argument("--lr-decay-every", type=int, default=settings.lr_decay_every)
    parser.add_argument("--negatives", type=int, default=settings.negatives, help="WYS negatives per batch")
    parser.add_argument("--contrastive-samples", type=int, default=settings.contrastive_samples)
    parser.add_argument("--p", type=float, default=1.0, help="node2vec return parameter")
    parser.add_argument("--q", type=float, default=1.0, help="node2vec in-out parameter")
    parser.add_argument("--n2v-mode", choices=["bias", "weight"], default="bias")
    parser.add_argument("--q-init", type=_float_list, help="WYS initial context coefficients")
    parser.add_argument(
        "--without-replacement", action="store_true", help="Draw distinct neighbours at every expansion"
    )
    parser.add_argument("--log-every", type=int, default=settings.log_every)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="GTTF CLI: graph traversal, embeddings and statistical audits"
    )
    parser.add_argument("--from-manifest", help="Replay the command recorded in a manifest.json")
    sub = parser.add_subparsers(dest="command")

    gen = sub.add_parser("gen-graph", help="Generate a synthetic graph")
    _add_common(gen)
    gen.add_argument("--kind", choices=GRAPH_KINDS, required=True)
    gen.add_argument("--n", type=int, required=True)
    gen.add_argument("--param", type=float, default=0.0, help="p, degree or path length")
    gen.add_argument("--out", help="Edge-list output path")
    gen.add_argument("--snapshot", help="Also write a CompactAdj snapshot here")

    est = sub.add_parser("estimate-tk", help="Estimate T^k rows from one traversal")
    _add_common(est)
    _add_graph(est, required=True)
    est.add_argument("--k", type=int, default=2)
    est.add_argument("--fanout", type=int, default=settings.fanout)
    est.add_argument("--batch", type=_int_list, help="Seed ids (default: all nodes when n <= 1000)")
    est.add_argument("--dump-forest", metavar="NAME", help="Also write the walk forest to NAME in the output directory")
    est.add_argument("--runs", type=int, default=settings.audit_runs)
    est.add_argument("--audit", action="store_true", help="Run unbiasedness and variance audits")
    est.add_argument("--strict-bound", action="store_true", help="Fail when the variance bound is exceeded")

    train = sub.add_parser("train", help="Train node embeddings")
    train.add_argument("method", choices=METHODS)
    _add_common(train)
    _add_graph(train, required=True)
    _add_training(train)

    ev = sub.add_parser("eval-linkpred", help="Link-prediction evaluation")
    _add_common(ev)
    _add_graph(ev, required=True)
    _add_training(ev)
    ev.add_argument("--method", choices=METHODS, default="deepwalk")
    ev.add_argument("--embeddings", help="Evaluate an existing embeddings file instead of training")
    ev.add_argument("--fraction", type=float, default=settings.test_fraction)
    ev.add_argument("--negatives-per-edge", type=int, default=settings.eval_negatives_per_edge)
    ev.add_argument("--split-seed", type=int, default=settings.seed)

    bench = sub.add_parser("bench-traverse", help="Time traversals across graph sizes")
    _add_common(bench)
    bench.add_argument("--sizes", type=_int_list, default=[1000, 100000])
    bench.add_argument("--batch-size", type=int, default=64)
    bench.add_argument("--fanouts", type=_int_list, default=[3, 3])
    bench.add_argument("--repeats", type=int, default=20)
    bench.add_argument("--storage", action="store_true", help="Also fit CompactAdj storage against (n, m)")

    check = sub.add_parser("check", help="Run the statistical audits")
    _add_common(check)
    _add_graph(check)
    check.add_argument("--all", action="store_true")
    check.add_argument("--prop", action="append", choices=CHECKS, help="Audit to run (repeatable)")
    check.add_argument("--fanout", type=int, default=settings.fanout)
    check.add_argument("--k", type=int, default=2)
    check.add_argument("--runs", type=int, default=settings.audit_runs)
    check.add_argument("--window", type=int, default=2)
    check.add_argument("--alpha", type=int, default=3)
    check.add_argument("--n", type=int, default=6, help="Nodes of the ensemble graph")
    check.add_argument("--ensemble-fanout", type=int)
    check.add_argument("--strict-bound", action="store_true")
    check.add_argument(
        "--strict-ensemble", action="store_true", help="Fail the ensemble sections when the ratio exceeds 0.2"
    )
    return parser


def _replay(path: str) -> argparse.Namespace:
    manifest_path = Path(path)
    if not manifest_path.exists():
        raise UsageError(f"manifest not found: {manifest_path}")
    manifest = RunManifest.read(manifest_path)
    if manifest.command not in COMMANDS:
        raise UsageError(f"{manifest_path}: unknown command {manifest.command!r}")
    return argparse.Namespace(command=manifest.command, from_manifest=None, **manifest.flags)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    try:
        if args.from_manifest:
            args = _replay(args.from_manifest)
        if not args.command:
            parser.print_help()
            return EXIT_USAGE

        logging.basicConfig(
            level=getattr(logging, str(args.log_level).upper(), logging.INFO),
            format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        )
        run = Run(args.command, args)
        code = COMMANDS[args.command](args, run)
        run.finish()
        return code
    except (UsageError, GttfError, ValidationError, OSError) as exc:
        print(f"❌ {exc}")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

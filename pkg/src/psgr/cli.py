"""Command-line entry point.

Subcommands: gen-data, build-graph, reason, gradcheck, train, eval,
sweep-ru, bench. Every run echoes its fully resolved config and seed so
it can be reproduced. Exit codes: 0 success, 1 validation failure,
2 numeric failure, 3 I/O error.
"""

import argparse
import json
import os
import sys
import time
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import _backend, data, graph, metrics, tensor
from .errors import NumericError, PsgrError, ValidationError
from .gradchecks import REGISTRY, gradcheck_all, run_gradcheck
from .network import NetConfig, LossConfig, load_checkpoint, save_checkpoint
from .ops import EdgeIndex
from .reasoner import PsgrConfig, PsgrModule, attention_row_dump, init_params
from .tensor import Rng, read_pstn, write_pstn
from .train import TrainSchedule, evaluate, train

CONFIG_KEYS = ("ru", "k", "norm_mode", "gnn_layers", "nonlinearity", "lambda",
               "lr", "epochs", "warmup_epochs", "weight_decay", "batch_size",
               "seed", "n_classes", "psgr_enabled")


@dataclass
class RunConfig:
    """Union of the JSON config keys; unknown keys are rejected."""

    ru: float = 0.1
    k: object = "auto"          # "auto" -> floor(N/2), else int
    norm_mode: str = "random_walk"
    gnn_layers: int = 1
    nonlinearity: str = "sigmoid"
    lam: float = 0.5            # JSON key "lambda"
    lr: float = 1e-3
    epochs: int = 60
    warmup_epochs: int = 5
    weight_decay: float = 1e-5
    batch_size: int = 8
    seed: int = 0
    n_classes: int = 2
    psgr_enabled: bool = True

    @staticmethod
    def from_file(path):
        with open(path) as fh:
            raw = json.load(fh)
        return RunConfig.from_dict(raw)

    @staticmethod
    def from_dict(raw):
        unknown = set(raw) - set(CONFIG_KEYS)
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}; "
                                  f"accepted: {list(CONFIG_KEYS)}")
        kwargs = {("lam" if k == "lambda" else k): v for k, v in raw.items()}
        cfg = RunConfig(**kwargs)
        if cfg.k != "auto":
            cfg.k = int(cfg.k)
        return cfg

    def to_dict(self):
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return {k: d[k] for k in CONFIG_KEYS}

    def resolved_k(self):
        return None if self.k == "auto" else int(self.k)

    def psgr_config(self):
        return PsgrConfig(ru=self.ru, k=self.resolved_k(), norm_mode=self.norm_mode,
                          n_layers=self.gnn_layers, nonlinearity=self.nonlinearity)

    def net_config(self):
        return NetConfig(n_classes=self.n_classes,
                         psgr=self.psgr_config() if self.psgr_enabled else None)

    def schedule(self):
        return TrainSchedule(base_lr=self.lr, warmup_epochs=self.warmup_epochs,
                             weight_decay=self.weight_decay, epochs=self.epochs,
                             batch_size=self.batch_size, seed=self.seed)

    def loss_config(self):
        return LossConfig(lam=self.lam)


def _load_config(args):
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _echo(cfg_dict, seed):
    print(f"resolved config: {json.dumps(cfg_dict, sort_keys=True)}")
    print(f"seed: {seed}")


def _load_feature_nodes(path):
    """PSTN feature file -> (N x c nodes, (h, w) or None)."""
    arr = read_pstn(path)
    if arr.dtype == np.uint8:
        raise ValidationError(f"{path}: expected a float tensor")
    if arr.ndim == 3:
        nodes, hw = graph.feature_map_to_nodes(arr)
        return nodes, hw
    if arr.ndim == 2:
        return arr, None
    raise ValidationError(f"{path}: expected h x w x c or N x c, got shape {arr.shape}")


def _split_samples(samples, val_count):
    if val_count is None:
        val_count = max(1, len(samples) // 5)
    if not 0 < val_count < len(samples):
        raise ValidationError(f"val-count {val_count} must be in (0, {len(samples)})")
    return samples[:-val_count], samples[-val_count:]


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args):
    h, w = _parse_size(args.size)
    cfg = {"command": "gen-data", "n": args.n, "h": h, "w": w,
           "classes": args.classes, "seed": args.seed or 0, "out": args.out}
    _echo(cfg, cfg["seed"])
    if args.from_pgm:
        samples = []
        for path in args.from_pgm:
            image = data.read_pgm(path)
            mask = np.zeros(image.shape[:2], dtype=np.uint8)
            samples.append(data.SyntheticSample(image=image, mask=mask,
                                                meta={"source": os.path.basename(path)}))
    else:
        samples = data.generate(args.n, h, w, args.classes, cfg["seed"])
    manifest = data.save_dataset(args.out, samples, args.classes, cfg["seed"])
    print(f"wrote {manifest['n']} samples to {args.out}")
    return 0


def cmd_build_graph(args):
    nodes, hw = _load_feature_nodes(args.features)
    coarse = read_pstn(args.coarse)
    if coarse.ndim == 3:
        coarse = coarse.reshape(-1, coarse.shape[-1])
    if coarse.shape[0] != nodes.shape[0]:
        raise ValidationError(f"coarse rows {coarse.shape[0]} != nodes {nodes.shape[0]}")
    k = None if args.k == "auto" else int(args.k)
    cfg = {"command": "build-graph", "features": args.features, "coarse": args.coarse,
           "ru": args.ru, "k": args.k, "norm": args.norm, "out": args.out,
           "seed": args.seed or 0}
    _echo(cfg, cfg["seed"])
    selection, adjacency, _ = graph.build_sparse_graph(nodes, coarse, args.ru,
                                                       k=k, mode=args.norm)
    graph.write_edge_list(args.out, adjacency, selection)
    print(f"nodes={adjacency.n_nodes} k={adjacency.k} uncertain={selection.n_selected} "
          f"edges={adjacency.n_edges}")
    return 0


def cmd_reason(args):
    arr = read_pstn(args.features)
    if arr.ndim != 3:
        raise ValidationError(f"{args.features}: expected h x w x c feature map")
    coarse = read_pstn(args.coarse)
    if coarse.ndim != 3:
        raise ValidationError(f"{args.coarse}: expected h x w x n_classes probabilities")
    cfg = _load_config(args)
    echo = cfg.to_dict()
    echo["command"] = "reason"
    _echo(echo, cfg.seed)
    # validate probability rows up front for a clear diagnostic
    graph.class_margins(coarse.reshape(-1, coarse.shape[-1]))

    channels = arr.shape[-1]
    pcfg = cfg.psgr_config()
    params = init_params(channels, pcfg, Rng(tensor.derive_seed(cfg.seed, "reason/init")),
                         dtype=arr.dtype)
    module = PsgrModule(channels, pcfg, params)
    refined, trace = module.forward(arr, coarse)
    write_pstn(args.out, np.asarray(refined.data, dtype=arr.dtype))
    if trace.skipped:
        print("empty uncertain set: output equals input (identity)")
    else:
        shown = ",".join(str(i) for i in trace.selection.selected[:16])
        more = "..." if trace.selection.n_selected > 16 else ""
        print(f"uncertain={trace.selection.n_selected} [{shown}{more}] "
              f"edges={trace.adjacency.n_edges}")
    if args.dump_attention:
        node, path = int(args.dump_attention[0]), args.dump_attention[1]
        if trace.adjacency is None:
            raise ValidationError("cannot dump attention: reasoning was skipped")
        dump = attention_row_dump(trace.adjacency, node, arr.shape[:2])
        write_pstn(path, dump.astype(np.float32))
        print(f"wrote attention row {node} to {path}")
    return 0


def cmd_gradcheck(args):
    if args.dtype not in (None, "f64"):
        raise ValidationError("gradcheck runs in f64 only")
    seed = args.seed or 0
    _echo({"command": "gradcheck", "op": args.op or "all", "dtype": args.dtype},
          seed)
    if args.op:
        if args.op not in REGISTRY:
            raise ValidationError(f"unknown op {args.op!r}; registered: "
                                  f"{sorted(REGISTRY)}")
        builder, tol = REGISTRY[args.op]
        results = [(run_gradcheck(args.op, builder, seed=seed), tol, None)]
        results = [(r, t, r.passed(t)) for r, t, _ in results]
    else:
        results = gradcheck_all(seed=seed)
    print(f"{'op':14s} {'max_rel_err':>12s} {'max_abs_err':>12s} {'tol':>8s} status")
    failed = False
    for report, tol, passed in results:
        status = "pass" if passed else "FAIL"
        failed = failed or not passed
        print(f"{report.op:14s} {report.max_rel_err:12.3e} "
              f"{report.max_abs_err:12.3e} {tol:8.0e} {status}")
    if failed:
        raise NumericError("gradient check failed")
    return 0


def cmd_train(args):
    cfg = _load_config(args)
    echo = cfg.to_dict()
    echo["command"] = "train"
    echo["data"] = args.data
    _echo(echo, cfg.seed)
    samples, _ = data.load_dataset(args.data)
    train_samples, val_samples = _split_samples(samples, args.val_count)
    result = train(train_samples, val_samples, cfg.schedule(), cfg.net_config(),
                   cfg.loss_config(), dtype=args.dtype or "f32", verbose=args.verbose)
    save_checkpoint(args.out, result.net,
                    extra={"history": result.history, "config": cfg.to_dict()})
    print(f"final val DSC {result.final_val_dsc:.4f}; checkpoint -> {args.out}")
    return 0


def cmd_eval(args):
    cfg = {"command": "eval", "data": args.data, "ckpt": args.ckpt,
           "report": args.report, "seed": args.seed or 0}
    _echo(cfg, cfg["seed"])
    net, manifest = load_checkpoint(args.ckpt)
    samples, _ = data.load_dataset(args.data)
    reports, summary = evaluate(net, samples)
    payload = {"summary": summary,
               "per_sample": [asdict(r) for r in reports],
               "checkpoint_seed": manifest["seed"]}
    with open(args.report, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
    print(" ".join(f"{k}={v:.4f}" for k, v in summary.items()))
    return 0


def _parse_values(text):
    try:
        return [float(v) for v in text.split(",") if v != ""]
    except ValueError as exc:
        raise ValidationError(f"bad value list {text!r}: {exc}") from None


def cmd_sweep_ru(args):
    values = _parse_values(args.values)
    if values != sorted(values):
        raise ValidationError("sweep values must be sorted ascending")
    if 0.0 not in values:
        raise ValidationError("sweep values must include 0 (the baseline row)")
    cfg = _load_config(args)
    echo = cfg.to_dict()
    echo.update({"command": "sweep-ru", "values": values, "data": args.data})
    _echo(echo, cfg.seed)
    samples, _ = data.load_dataset(args.data)
    train_samples, val_samples = _split_samples(samples, args.val_count)

    rows = []
    for ru in values:
        row_cfg = replace(cfg, ru=ru)
        try:
            result = train(train_samples, val_samples, row_cfg.schedule(),
                           row_cfg.net_config(), row_cfg.loss_config(),
                           dtype=args.dtype or "f32")
            _, summary = evaluate(result.net, val_samples)
            rows.append((ru, summary["dsc"], summary["hd"]))
            print(f"ru={ru:g} dsc={summary['dsc']:.4f} hd={summary['hd']:.3f}")
        except PsgrError as exc:
            rows.append((ru, float("nan"), float("nan")))
            print(f"ru={ru:g} failed: {exc}", file=sys.stderr)

    with open(args.out_csv, "w") as fh:
        fh.write("ru,dsc,hd\n")
        for ru, dsc_v, hd_v in rows:
            fh.write(f"{ru:.17g},{dsc_v:.17g},{hd_v:.17g}\n")
    _write_sweep_svg(args.out_svg, rows)
    print(f"wrote {args.out_csv} and {args.out_svg}")
    return 0


def cmd_bench(args):
    sizes = [int(v) for v in args.n_nodes.split(",") if v]
    if max(sizes) > 4096 and not args.force:
        raise ValidationError(f"n_nodes {max(sizes)} exceeds the 4096 cap "
                              f"(pass --force to override)")
    seed = args.seed or 0
    k_arg = None if args.k == "auto" else int(args.k)
    _echo({"command": "bench", "n_nodes": sizes, "ru": args.ru, "k": args.k,
           "backend": _backend.active_backend()}, seed)
    print(f"{'N':>6s} {'dense_edges':>12s} {'sparse_edges':>12s} {'ratio':>10s} "
          f"{'dense_MB':>9s} {'sparse_MB':>10s} {'t_dense_s':>10s} {'t_sparse_s':>11s}")
    for n in sizes:
        rng = Rng(tensor.derive_seed(seed, f"bench/{n}"))
        c = 16
        feats = rng.normal((n, c))
        logits = rng.normal((n, 2))
        probs = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        k = graph.default_k(n) if k_arg is None else k_arg
        z = rng.normal((n, c))

        t0 = time.perf_counter()
        selection, adjacency, _ = graph.build_sparse_graph(feats, probs, args.ru, k=k)
        index = EdgeIndex.from_edges(n, adjacency.src, adjacency.dst)
        agg = _backend.edge_gather_sum(index.indptr, index.cols,
                                       adjacency.weight.astype(np.float64), z)
        t_sparse = time.perf_counter() - t0

        t0 = time.perf_counter()
        dense = graph.normalize(graph.build_similarity(feats), "random_walk")
        _ = _backend.matmul(dense.normalized, z)
        t_dense = time.perf_counter() - t0

        dense_edges = n * n
        sparse_edges = adjacency.n_edges
        expected = graph.round_half_up(args.ru * n) * min(k, n - 1)
        if sparse_edges != expected:
            raise NumericError(f"edge counter {sparse_edges} != closed form {expected}")
        ratio = sparse_edges / dense_edges
        dense_mb = dense_edges * 8 / 1e6
        sparse_mb = sparse_edges * 24 / 1e6
        print(f"{n:6d} {dense_edges:12d} {sparse_edges:12d} {ratio:10.5%} "
              f"{dense_mb:9.1f} {sparse_mb:10.3f} {t_dense:10.3f} {t_sparse:11.3f}")
        del agg, dense
    return 0


def _write_sweep_svg(path, rows):
    """Hand-rolled line chart: DSC vs uncertain ratio, baseline dashed."""
    width, height, margin = 480, 320, 50
    clean = [(ru, d) for ru, d, _ in rows if np.isfinite(d)]
    if not clean:
        clean = [(0.0, 0.0)]
    xs = [ru for ru, _ in clean]
    ys = [d for _, d in clean]
    x_lo, x_hi = min(xs), max(xs) or 1.0
    y_lo, y_hi = min(ys), max(ys)
    if y_hi - y_lo < 1e-9:
        y_lo, y_hi = y_lo - 0.05, y_hi + 0.05

    def sx(x):
        return margin + (x - x_lo) / (x_hi - x_lo or 1.0) * (width - 2 * margin)

    def sy(y):
        return height - margin - (y - y_lo) / (y_hi - y_lo) * (height - 2 * margin)

    points = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in clean)
    baseline = next((d for ru, d, _ in rows if ru == 0.0 and np.isfinite(d)), None)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" '
        f'y2="{height - margin}" stroke="black"/>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{height - margin}" '
        f'stroke="black"/>',
        f'<polyline points="{points}" fill="none" stroke="crimson" stroke-width="2"/>',
    ]
    for x, y in clean:
        parts.append(f'<circle cx="{sx(x):.1f}" cy="{sy(y):.1f}" r="3" fill="crimson"/>')
    if baseline is not None:
        parts.append(f'<line x1="{margin}" y1="{sy(baseline):.1f}" '
                     f'x2="{width - margin}" y2="{sy(baseline):.1f}" '
                     f'stroke="steelblue" stroke-dasharray="6,4"/>')
    parts.append(f'<text x="{width / 2:.0f}" y="{height - 12}" text-anchor="middle" '
                 f'font-size="12">uncertain-node ratio</text>')
    parts.append(f'<text x="14" y="{height / 2:.0f}" font-size="12" '
                 f'transform="rotate(-90 14 {height / 2:.0f})" '
                 f'text-anchor="middle">validation DSC</text>')
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts))


# ---------------------------------------------------------------------------
# parser


def _parse_size(text):
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError as exc:
        raise ValidationError(f"bad size {text!r}, expected HxW: {exc}") from None


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(message)


def _add_global_flags(parser, suppress=False):
    d = argparse.SUPPRESS if suppress else None
    parser.add_argument("--seed", type=int, default=d,
                        help="root seed (overrides config seed)")
    parser.add_argument("--config", default=d, help="JSON config file")
    parser.add_argument("--threads", type=int, default=d,
                        help="worker threads (overrides PSGR_THREADS)")
    parser.add_argument("--dtype", choices=("f32", "f64"), default=d,
                        help="compute dtype (default: f32 for training, f64 "
                             "for gradcheck)")


def build_parser():
    parser = _Parser(prog="psgr", description=__doc__)
    _add_global_flags(parser)
    # the same flags are accepted after the subcommand too
    shared = _Parser(add_help=False)
    _add_global_flags(shared, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=lambda **kw: _Parser(
                                    parents=[shared], **kw))

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--size", default="64x64")
    p.add_argument("--classes", type=int, choices=(2, 3), default=2)
    p.add_argument("--out", required=True)
    p.add_argument("--from-pgm", nargs="+", default=None,
                   help="import 8-bit PGM images instead of generating")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("build-graph", help="construct a sparse pixel graph")
    p.add_argument("--features", required=True)
    p.add_argument("--coarse", required=True)
    p.add_argument("--ru", type=float, required=True)
    p.add_argument("--k", default="auto")
    p.add_argument("--norm", choices=graph.NORM_MODES, default=graph.DEFAULT_NORM_MODE)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_graph)

    p = sub.add_parser("reason", help="run the reasoning module on features")
    p.add_argument("--features", required=True)
    p.add_argument("--coarse", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dump-attention", nargs=2, metavar=("NODE", "PATH"),
                   default=None)
    p.set_defaults(func=cmd_reason)

    p = sub.add_parser("gradcheck", help="verify analytic gradients")
    p.add_argument("--op", default=None)
    p.add_argument("--all", action="store_true")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("train", help="train the toy segmentation net")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--val-count", type=int, default=None)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep-ru", help="train/evaluate across uncertain ratios")
    p.add_argument("--values", default="0,0.005,0.01,0.015,0.02")
    p.add_argument("--data", required=True)
    p.add_argument("--out-csv", required=True)
    p.add_argument("--out-svg", required=True)
    p.add_argument("--val-count", type=int, default=None)
    p.set_defaults(func=cmd_sweep_ru)

    p = sub.add_parser("bench", help="dense vs sparse reasoning costs")
    p.add_argument("--n-nodes", default="1024,4096")
    p.add_argument("--ru", type=float, default=0.005)
    p.add_argument("--k", default="auto")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.threads is not None:
            _backend.set_num_threads(args.threads)
        return args.func(args) or 0
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())

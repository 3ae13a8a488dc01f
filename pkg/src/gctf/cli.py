"""Command-line entry point: ``gctf <command> [options]``.

Exit codes: 0 ok, 1 usage or configuration error, 2 numeric failure,
3 bad input data.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import costs, data, tensor as T, train as TR
from .config import ConfigError, ModelConfig, dump_config, paper_config, parse_kv, split_sections
from .model import DualBranchModel, grad_cam

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_DATA = 0, 1, 2, 3

SWEEP_AXES = ("fusion_variant", "lateral_placement", "skips", "frames", "final_fusion")


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    """argparse with usage errors mapped to exit code 1 instead of 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# helpers


def _configs(path: str | None, overrides: list[str] | None = None):
    text = Path(path).read_text() if path else ""
    values = parse_kv(text, path or "<defaults>")
    for i, kv in enumerate(overrides or []):
        if "=" not in kv:
            raise ConfigError(f"--set expects key=value, got {kv!r}")
        key, value = (s.strip() for s in kv.split("=", 1))
        values[key] = (value, -(i + 1))
    mcfg, tcfg = split_sections(values, ModelConfig, TR.TrainConfig, source=path or "<defaults>")
    mcfg.validate()
    return mcfg, tcfg


def _split_corpus(corpus: data.Corpus, splits: list[str]):
    tr = [i for i, s in enumerate(splits) if s == "train"]
    te = [i for i, s in enumerate(splits) if s in ("test", "val")]
    if not tr or not te:
        raise data.DataFormatError("corpus needs both train and test clips")
    return corpus.subset(tr), corpus.subset(te)


def _model_input(cfg: ModelConfig, videos: np.ndarray) -> np.ndarray:
    """Resize to the configured frame size and precision."""
    if cfg.cropping:
        raise ConfigError("cropping=true needs per-clip detections; use pipeline tooling first")
    H, W = cfg.size
    if videos.shape[-2:] != (H, W):
        videos = np.stack([data.apply_crop(v, (0, 0, v.shape[-1], v.shape[-2]), (H, W)) for v in videos])
    if videos.shape[-3] < cfg.input_frames:
        raise data.DataFormatError(f"clips have {videos.shape[-3]} frames, config needs {cfg.input_frames}")
    return videos.astype(T.get_dtype())


def _train(mcfg, tcfg, corpus_dir, out: Path, log=print):
    try:
        schedule = tcfg.schedule()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    corpus, splits = data.load_corpus(corpus_dir)
    tr, te = _split_corpus(corpus, splits)
    mcfg.init_seed = tcfg.seed
    model = DualBranchModel(mcfg)
    out.mkdir(parents=True, exist_ok=True)
    res = TR.train_loop(model, _model_input(mcfg, tr.videos), tr.labels,
                        _model_input(mcfg, te.videos), te.labels, schedule,
                        seed=tcfg.seed, batch_size=tcfg.batch_size, weight_decay=tcfg.weight_decay,
                        on_epoch=lambda r: log(f"epoch {r['epoch']:3d}  loss {r['train_loss']:.4f}  "
                                               f"train {r['train_acc']:.1f}%  val {r['val_acc']:.1f}%"))
    TR.write_trace(out / "metrics.csv", res.trace)
    T.save_checkpoint(out / "checkpoint.gctf", model.named_parameters().values())
    report = TR.evaluate(model, _model_input(mcfg, te.videos), te.labels, tcfg.batch_size)
    return model, res, report


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    mcfg, tcfg = _configs(args.config, args.set)
    if args.seed is not None:
        tcfg.seed = args.seed
    if args.epochs is not None:
        tcfg.epochs = args.epochs
    out = Path(args.out)
    try:
        _, res, rep = _train(mcfg, tcfg, args.corpus, out, print if not args.quiet else (lambda *_: None))
    except TR.TrainingDiverged as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    (out / "config.txt").write_text(dump_config(mcfg, tcfg))
    print(f"best epoch {res.best_epoch}: top1 {rep.top1:.2f}%  F1 violent {rep.f1_violent:.4f}  "
          f"F1 non-violent {rep.f1_non_violent:.4f}")
    return EXIT_OK


def cmd_count(args) -> int:
    if args.paper:
        cfg = paper_config(1 if args.paper == "single" else 2)
    else:
        cfg, _ = _configs(args.config, args.set)
    params = costs.param_breakdown(cfg)
    if args.module:
        if args.module not in params:
            raise UsageError(f"no module {args.module!r}; have {', '.join(params)}")
        print(f"{args.module}: {params[args.module]} params")
        return EXIT_OK
    total = sum(params.values())
    print(f"params: {total}")
    for k, v in params.items():
        print(f"  {k:<14} {v}")
    for conv in costs.CONVENTIONS:
        fl = costs.flops_breakdown(cfg, conv)
        print(f"flops[{conv}]: {sum(fl.values()) / 1e9:.1f}G")
        for k, v in fl.items():
            print(f"  {k:<14} {v / 1e9:.2f}G")
    if args.paper:
        d = costs.paper_deltas(cfg)
        ref = costs.PAPER_PARAMS[cfg.branches], costs.PAPER_FLOPS[cfg.branches]
        print(f"vs published {ref[0] / 1e6:.1f}M params: {100 * d['params']:+.2f}%")
        print(f"vs published {ref[1] / 1e9:.0f}G FLOPs: {100 * d['flops_2mac']:+.2f}% (2mac), "
              f"{100 * d['flops_layer_mac']:+.2f}% (layer-mac)")
    return EXIT_OK


def cmd_mcnemar(args) -> int:
    a = data.read_id_column(args.a, "prediction")
    b = data.read_id_column(args.b, "prediction")
    y = data.read_id_column(args.labels, "label")
    if set(a) != set(y) or set(b) != set(y):
        raise data.DataFormatError("prediction and label files must cover the same ids")
    ids = sorted(y)
    truth = np.array([y[i] for i in ids])
    n01, n10 = TR.disagreements(np.array([a[i] for i in ids]) == truth, np.array([b[i] for i in ids]) == truth)
    res = TR.mcnemar_exact(n01, n10)
    print(f"n01={n01} n10={n10} p={TR.format_p(res.p)}" + ("  (no disagreements)" if res.degenerate else ""))
    return EXIT_OK


def cmd_manifest(args) -> int:
    labels, fps = data.read_label_stream(args.labels)
    recs = data.build_manifest(labels, fps, args.source or Path(args.labels).stem, args.width, args.height)
    _write_or_print(args.out, lambda p: data.write_manifest(p, recs))
    return EXIT_OK


def cmd_leak_scan(args) -> int:
    feats = data.read_features(args.features)
    train = [f for f in feats if f.split == "train"]
    test = [f for f in feats if f.split == "test"]
    flags = data.leakage_scan(train, test, args.threshold)
    _write_or_print(args.out, lambda p: data.write_flags(p, flags))
    print(f"{len(flags)} flagged pair(s) at threshold {args.threshold}", file=sys.stderr)
    return EXIT_OK


def cmd_stats(args) -> int:
    if args.paper:
        entries = [e for name, sp in data.PAPER_SPLITS.items() for e in data.entries_from_counts(name, sp)]
        removals = ["RLVS/test/violent/00000"]
    else:
        if not args.entries:
            raise UsageError("stats needs --entries or --paper")
        entries = []
        for n, row in data._read_csv(args.entries, ("id", "dataset", "split", "label")):
            if row["split"] not in ("train", "test") or row["label"] not in data.LABEL_IDS:
                raise data.DataFormatError(f"{args.entries}:{n}: bad split or label")
            entries.append(data.ClipEntry(row["id"], row["dataset"], row["split"], row["label"]))
        removals = []
    if args.remove:
        removals += [s.strip() for s in Path(args.remove).read_text().splitlines() if s.strip()]
    try:
        table = data.combined_stats(entries, removals)
    except KeyError as exc:
        raise data.DataFormatError(exc.args[0]) from None
    print(data.format_stats(table))
    return EXIT_OK


def cmd_cam(args) -> int:
    mcfg, _ = _configs(args.config, args.set)
    model = DualBranchModel(mcfg)
    model.load_state_dict(T.load_checkpoint(args.checkpoint))
    corpus, _ = data.load_corpus(args.corpus)
    if args.clip not in corpus.ids:
        raise data.DataFormatError(f"clip {args.clip!r} not in corpus")
    video = _model_input(mcfg, corpus.videos[[corpus.ids.index(args.clip)]])[0]
    cam = grad_cam(model, video, args.target, args.layer)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    from PIL import Image
    for t, frame in enumerate(cam):
        Image.fromarray(np.round(frame * 255).astype(np.uint8), "L").save(out / f"cam_{t:04d}.pgm")
    np.savetxt(out / "cam.csv", cam.reshape(len(cam), -1), delimiter=",", fmt="%.6f")
    print(f"wrote {len(cam)} heatmap frame(s) of {cam.shape[1]}x{cam.shape[2]} to {out}")
    return EXIT_OK


def cmd_synth(args) -> int:
    dims = tuple(int(x) for x in args.dims.lower().split("x"))
    if len(dims) != 3:
        raise UsageError("--dims is TxHxW")
    tr = data.synth_corpus(args.seed, args.train, dims, prefix="train")
    te = data.synth_corpus(args.seed + 1, args.test, dims, prefix="test")
    if args.duplicates > min(args.train, args.test):
        raise UsageError("more duplicates than clips")
    # planted duplicates: test clips overwritten by copies of train clips
    for k in range(args.duplicates):
        te.videos[k] = tr.videos[k]
        te.labels[k] = tr.labels[k]
        te.detections[k] = tr.detections[k]
    both = data.Corpus(tr.ids + te.ids, np.concatenate([tr.videos, te.videos]),
                       np.concatenate([tr.labels, te.labels]), tr.detections + te.detections)
    splits = ["train"] * len(tr) + ["test"] * len(te)
    data.save_corpus(args.out, both, splits)
    feats = [data.FeatureVector(i, s, "synth", data.clip_features(v)) for i, s, v in zip(both.ids, splits, both.videos)]
    data.write_features(Path(args.out) / "features.csv", feats)
    print(f"wrote {len(tr)} train + {len(te)} test clips to {args.out}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    base_m, base_t = _configs(args.config, args.set)
    if args.epochs is not None:
        base_t.epochs = args.epochs
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for value in args.values.split(";") if args.axis == "frames" else args.values.split(","):
        value = value.strip()
        values = parse_kv(dump_config(base_m, base_t), "<sweep>")
        values[args.axis] = (value, 0)
        mcfg, tcfg = split_sections(values, ModelConfig, TR.TrainConfig, source="<sweep>")
        mcfg.validate()
        row = {"axis": args.axis, "value": value, "params": costs.count_params(mcfg),
               "flops": costs.count_flops(mcfg)}
        if args.corpus:
            tag = f"{args.axis}={value}".replace(",", "x").replace("/", "_")
            try:
                _, res, rep = _train(mcfg, tcfg, args.corpus, out / tag, log=lambda *_: None)
                row.update(top1=rep.top1, f1_v=rep.f1_violent, f1_nv=rep.f1_non_violent, best_epoch=res.best_epoch)
            except TR.TrainingDiverged as exc:
                row.update(top1=float("nan"), f1_v=float("nan"), f1_nv=float("nan"), best_epoch=-1)
                print(f"{tag}: {exc}", file=sys.stderr)
        rows.append(row)
        print(json.dumps(row))
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return EXIT_OK


def _write_or_print(path, writer) -> None:
    if path:
        writer(path)
    else:
        with tempfile.TemporaryDirectory() as d:
            p = Path(d) / "out.csv"
            writer(p)
            sys.stdout.write(p.read_text())


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = Parser(prog="gctf", description="Dual-branch video state-space classifier toolkit.")
    p.add_argument("--precision", choices=("64", "32"), default="64", help="floating-point width (default 64)")
    sub = p.add_subparsers(dest="command", required=True, parser_class=Parser)

    def with_config(sp):
        sp.add_argument("--config", help="flat key=value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")

    sp = sub.add_parser("train", help="train on a corpus directory")
    with_config(sp)
    sp.add_argument("--corpus", required=True, help="corpus directory with index.csv")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--quiet", action="store_true")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("count", help="analytic parameter and FLOP counts")
    with_config(sp)
    sp.add_argument("--paper", choices=("single", "dual"), help="use the published full-scale config")
    sp.add_argument("--module", help="report one module's parameter count only")
    sp.set_defaults(func=cmd_count)

    sp = sub.add_parser("mcnemar", help="exact McNemar test between two prediction files")
    sp.add_argument("a", help="CSV id,prediction for classifier A")
    sp.add_argument("b", help="CSV id,prediction for classifier B")
    sp.add_argument("labels", help="CSV id,label")
    sp.set_defaults(func=cmd_mcnemar)

    pp = sub.add_parser("pipeline", help="dataset hygiene tools")
    psub = pp.add_subparsers(dest="tool", required=True, parser_class=Parser)
    sp = psub.add_parser("manifest", help="clip manifest from a frame label stream")
    sp.add_argument("--labels", required=True)
    sp.add_argument("--source")
    sp.add_argument("--width", type=int, default=0)
    sp.add_argument("--height", type=int, default=0)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_manifest)
    sp = psub.add_parser("leak-scan", help="flag near-duplicate train/test pairs")
    sp.add_argument("--features", required=True)
    sp.add_argument("--threshold", type=float, default=0.75)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_leak_scan)
    sp = psub.add_parser("stats", help="per-dataset split statistics")
    sp.add_argument("--entries", help="CSV id,dataset,split,label")
    sp.add_argument("--paper", action="store_true", help="published dataset counts and removal")
    sp.add_argument("--remove", help="file with one clip id per line to drop")
    sp.set_defaults(func=cmd_stats)
    sp = psub.add_parser("cam", help="gradient-weighted activation maps for one clip")
    with_config(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--clip", required=True)
    sp.add_argument("--layer", type=int, default=0)
    sp.add_argument("--target", type=int, default=0, help="class index (0 violent)")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_cam)

    sp = sub.add_parser("synth", help="write a synthetic two-actor corpus")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--train", type=int, default=200)
    sp.add_argument("--test", type=int, default=50)
    sp.add_argument("--dims", default="4x16x16", help="TxHxW")
    sp.add_argument("--duplicates", type=int, default=0, help="copy this many train clips into test")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("sweep", help="expand a config along one ablation axis")
    with_config(sp)
    sp.add_argument("--axis", required=True, choices=SWEEP_AXES)
    sp.add_argument("--values", required=True, help="comma-separated (frames: ';'-separated pairs)")
    sp.add_argument("--corpus", help="train each variant on this corpus; counts only when omitted")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with T.precision("float64" if args.precision == "64" else "float32"):
            return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"gctf: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (T.NonFiniteError, TR.TrainingDiverged) as exc:
        print(f"gctf: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (data.DataFormatError, FileNotFoundError, ValueError) as exc:
        print(f"gctf: bad input: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

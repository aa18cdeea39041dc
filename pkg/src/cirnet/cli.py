"""Command-line entry point: generate, train, infer, eval, grad-check.

Exit codes: 0 ok, 2 bad configuration, 3 missing files, 4 non-finite loss,
5 gradient check failure.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import checks, data, metrics, model
from .config import ConfigError, dump_config, load_config

log = logging.getLogger("cirnet")

EXIT_CONFIG, EXIT_MISSING, EXIT_NONFINITE, EXIT_GRADCHECK = 2, 3, 4, 5


class CliError(Exception):
    def __init__(self, code: int, msg: str):
        super().__init__(msg)
        self.code = code


def _dataset_dirs(root) -> tuple[Path, Path, Path]:
    root = Path(root)
    return root / "rgb", root / "depth", root / "gt"


def _load_dataset(root, need_gt: bool = True):
    rgb_dir, depth_dir, gt_dir = _dataset_dirs(root)
    for d in (rgb_dir, depth_dir) + ((gt_dir,) if need_gt else ()):
        if not d.is_dir():
            raise CliError(EXIT_MISSING, f"missing directory {d}")
    try:
        return data.load_pairs(rgb_dir, depth_dir, gt_dir if need_gt or gt_dir.is_dir() else None)
    except FileNotFoundError as exc:
        raise CliError(EXIT_MISSING, str(exc)) from None


def cmd_generate(args) -> int:
    spec = data.SceneSpec(size=args.size, min_objects=args.min_objects, max_objects=args.max_objects,
                          contrast=args.contrast, depth_noise=args.depth_noise, seed=args.seed)
    samples = data.generate(spec, args.n)
    data.save_samples(samples, args.out)
    print(f"wrote {len(samples)} samples to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.set)
    data_root = args.data or cfg.paths.get("data")
    out = Path(args.out or cfg.paths.get("out") or "run")
    if not data_root:
        raise CliError(EXIT_CONFIG, "no dataset given (--data or [paths] data)")
    samples = _load_dataset(data_root)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(dump_config(cfg))
    net = model.CirNet(cfg.model)
    model.save_checkpoint(net, out / "init.cirk")
    with open(out / "loss.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "loss_total", "loss_r", "loss_d", "loss_rgbd"])

        def on_step(step, row):
            writer.writerow([row[0]] + [repr(v) for v in row[1:]])
            if step % 10 == 0:
                log.info("step %d loss %.5f", step, row[1])

        try:
            rows = model.train(net, samples, cfg.train, on_step)
        except model.NonFiniteLoss as exc:
            raise CliError(EXIT_NONFINITE, str(exc)) from None
    model.save_checkpoint(net, out / "final.cirk")
    last = rows[-1][1] if rows else float("nan")
    print(f"trained {len(rows)} steps, final loss {last:.6f}; checkpoint {out / 'final.cirk'}")
    return 0


def _fit_size(n: int, div: int) -> int:
    return max(div, int(round(n / div)) * div)


def cmd_infer(args) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise CliError(EXIT_MISSING, f"missing checkpoint {ckpt}")
    net = model.load_checkpoint(ckpt)
    samples = _load_dataset(args.data, need_gt=False)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    div = net.cfg.min_divisor
    for s in samples:
        h, w = s.gt.shape
        th = args.size or _fit_size(h, div)
        tw = args.size or _fit_size(w, div)
        rgb = data.resize_bilinear(s.rgb, th, tw)[None]
        depth = data.resize_bilinear(s.depth, th, tw)[None]
        maps = model.predict(net, rgb, depth)
        for tag, m in zip(("r", "d", "rgbd"), maps):
            full = np.clip(data.resize_bilinear(m[0, 0], h, w), 0.0, 1.0)
            data.save_png(out / f"{s.name}_sal_{tag}.png", full)
            if tag == "rgbd":
                data.save_png(out / f"{s.name}_sal.png", full)
    print(f"wrote saliency maps for {len(samples)} images to {out}")
    return 0


def cmd_eval(args) -> int:
    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    for d in (pred_dir, gt_dir):
        if not d.is_dir():
            raise CliError(EXIT_MISSING, f"missing directory {d}")
    gts = sorted(gt_dir.glob("*_gt.png"))
    if not gts:
        raise CliError(EXIT_MISSING, f"no *_gt.png files in {gt_dir}")
    preds, truths, names = [], [], []
    for g in gts:
        name = g.name[: -len("_gt.png")]
        p = pred_dir / f"{name}_{args.suffix}.png"
        if not p.is_file():
            raise CliError(EXIT_MISSING, f"missing prediction {p}")
        pred = data.read_png(p, 1)
        gt = (data.read_png(g, 1) >= 0.5).astype(np.float64)
        if pred.shape != gt.shape:
            pred = np.clip(data.resize_bilinear(pred, *gt.shape), 0.0, 1.0)
        preds.append(pred)
        truths.append(gt)
        names.append(name)
    report = metrics.evaluate(preds, truths, names)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.write_json(out / "report.json")
    report.write_curve_csv(out / "pr_curve.csv")
    d = report.to_dict()
    print(f"images {d['n_images']}  MAE {d['mae']:.4f}  maxF {d['max_f']:.4f}  S {d['s_measure']:.4f}")
    return 0


def cmd_grad_check(args) -> int:
    names = args.ops or list(checks.CASES)
    unknown = [n for n in names if n not in checks.CASES]
    if unknown:
        raise CliError(EXIT_CONFIG, f"unknown operations {unknown}; choose from {list(checks.CASES)}")
    rows = checks.run_suite(range(args.seeds), names, step=args.step, tol=args.tol)
    print(checks.format_table(rows))
    failed = [r for r in rows if not r.report.passed]
    if failed:
        print(f"{len(failed)} gradient check(s) failed", file=sys.stderr)
        return EXIT_GRADCHECK
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cirnet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="render a synthetic RGB-D dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, default=16)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--min-objects", type=int, default=1)
    g.add_argument("--max-objects", type=int, default=2)
    g.add_argument("--contrast", type=float, default=0.8)
    g.add_argument("--depth-noise", type=float, default=0.0)
    g.set_defaults(fn=cmd_generate)

    t = sub.add_parser("train", help="train a model; writes checkpoints and loss.csv")
    t.add_argument("--config")
    t.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    t.add_argument("--data")
    t.add_argument("--out")
    t.set_defaults(fn=cmd_train)

    i = sub.add_parser("infer", help="write saliency maps for every stream")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--data", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--size", type=int, default=None, help="network input size (default: nearest valid)")
    i.set_defaults(fn=cmd_infer)

    e = sub.add_parser("eval", help="score predictions against ground truth")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--suffix", default="sal", help="prediction files are NNNN_<suffix>.png")
    e.set_defaults(fn=cmd_eval)

    c = sub.add_parser("grad-check", help="finite-difference check of every op")
    c.add_argument("--seeds", type=int, default=5)
    c.add_argument("--ops", nargs="*")
    c.add_argument("--step", type=float, default=checks.STEP)
    c.add_argument("--tol", type=float, default=checks.TOL)
    c.set_defaults(fn=cmd_grad_check)
    return p


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()

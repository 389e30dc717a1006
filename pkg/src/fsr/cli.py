"""Command-line entry point: ``fsr train|eval|predict|bench|probe-mi``.

Exit codes: 0 success, 1 validation/config error, 2 data error, 3 numerical
divergence.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .errors import ConfigError, FSRError


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _float_list(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fsr", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser(
        "train",
        help="train one model per category (few-shot/separate) or one pooled model (unified)",
        description="An epoch is one pass over a training set regardless of batch size.",
    )
    t.add_argument("--config", required=True, help="flat key=value config file")
    t.add_argument("--tau", type=float)
    t.add_argument("--setting", choices=["few-shot", "separate", "unified"])
    t.add_argument("--k", type=int, help="samples per category for few-shot")
    t.add_argument("--seed", type=int)
    t.add_argument("--data", help="dataset root in MVTec layout")
    t.add_argument("--out", help="output directory")

    e = sub.add_parser("eval", help="image/pixel AUROC of a checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--category", action="append", help="restrict to category (repeatable)")
    e.add_argument("--report", help="report path (.json; a .csv is written beside it)")

    pr = sub.add_parser("predict", help="anomaly map for one image")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--image", required=True)
    pr.add_argument("--out", help="directory for the raw map and heatmap")

    b = sub.add_parser("bench", help="Rec vs shuffling-rate sweep on synthetic textures")
    b.add_argument("--taus", type=_float_list, default=None)
    b.add_argument("--textures", type=int, default=3)
    b.add_argument("--steps", type=int, default=None)
    b.add_argument("--setting", choices=["unified", "separate"], default="unified")
    b.add_argument("--seed", type=int, default=1, help="training seed")
    b.add_argument("--data-seed", type=int, default=0, help="seed of the generated textures")
    b.add_argument("--out", default="bench_out")

    m = sub.add_parser("probe-mi", help="exact mutual information between a sequence and its shuffle")
    m.add_argument("--alphabet", type=int, default=2)
    m.add_argument("--length", type=int, default=4)
    m.add_argument("--taus", type=_float_list, default=[0.0, 0.25, 0.5, 0.75, 1.0])
    return p


def cmd_train(args) -> int:
    from .config import load_config
    from .data import build_setting, list_categories, scan_dataset
    from .pipeline import train

    cfg = load_config(args.config)
    changes = {}
    if args.tau is not None:
        changes["tau"] = args.tau
    if args.setting is not None:
        changes["mode"] = args.setting.replace("-", "_")
    if args.k is not None:
        changes["k"] = args.k
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.data is not None:
        changes["data"] = args.data
    if args.out is not None:
        changes["out"] = args.out
    cfg = cfg.replace(**changes)
    if not cfg.data:
        raise ConfigError("no dataset root: pass --data or set data= in the config")
    categories = cfg.setting.categories or tuple(list_categories(cfg.data))
    indices = [scan_dataset(cfg.data, c) for c in categories]
    sets = build_setting(indices, cfg.setting)
    for ckpt in train(cfg, sets):
        print(f"{ckpt.state['name']}: {Path(cfg.out) / ckpt.state['name'] / 'model.fsr'}")
    return 0


def cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint
    from .data import list_categories, scan_dataset
    from .pipeline import evaluate

    ckpt = load_checkpoint(args.checkpoint)
    if args.category:
        categories = args.category
    elif ckpt.state.get("name") == "unified":
        categories = list(ckpt.config.setting.categories) or list_categories(args.data)
    else:
        categories = [ckpt.state["name"]]
    report = evaluate(ckpt, [scan_dataset(args.data, c) for c in categories])
    path = Path(args.report) if args.report else Path(args.checkpoint).with_name("report.json")
    json_path, csv_path = report.write(path)
    for name, m in report.categories.items():
        print(f"{name}: image_auroc={m.image_auroc:.4f} pixel_auroc={m.pixel_auroc:.4f}")
    print(f"mean: image_auroc={report.mean_image_auroc:.4f} pixel_auroc={report.mean_pixel_auroc:.4f}")
    print(f"report: {json_path} {csv_path}")
    return 0


def cmd_predict(args) -> int:
    from .checkpoint import load_checkpoint
    from .pipeline import predict

    amap = predict(load_checkpoint(args.checkpoint), args.image, args.out)
    print(f"image_score={amap.image_score:.6g}")
    return 0


def cmd_bench(args) -> int:
    from .bench import DEFAULT_TAUS, bench_config, bench_synthetic

    overrides = {"seed": args.seed}
    if args.steps is not None:
        overrides["steps"] = args.steps
    report = bench_synthetic(
        taus=args.taus or DEFAULT_TAUS,
        textures=args.textures,
        cfg=bench_config(**overrides),
        data_seed=args.data_seed,
        out_dir=args.out,
        setting=args.setting,
    )
    print("tau,image_auroc,pixel_auroc")
    for r in report.rows:
        print(f"{r.tau},{r.image_auroc:.4f},{r.pixel_auroc:.4f}")
    print(f"best FSR - Rec pixel AUROC: {report.pixel_gap:+.4f}")
    return 0


def cmd_probe_mi(args) -> int:
    from .scoring import DiscreteSequenceModel, entropy_bits, mutual_information_probe

    model = DiscreteSequenceModel.uniform(args.alphabet, args.length)
    print(f"H(X) = {entropy_bits(model):.6f} bits")
    print("tau,mi_bits")
    for tau, mi in mutual_information_probe(model, args.taus):
        print(f"{tau},{mi:.6f}")
    return 0


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "bench": cmd_bench,
    "probe-mi": cmd_probe_mi,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except FSRError as exc:
        print(f"fsr: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())

"""Command-line front end.

Subcommands: params, verify-table1, synth, train, eval, nwd, simam,
gradcheck. Exit codes: 0 success, 1 verification or numeric failure, 2 usage
error. All numeric stdout uses 9 significant digits so outputs are stable
byte-for-byte given identical flags and seed (run with ISTD_THREADS=1).
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import tensor as T
from .boxes import BBox, ciou_loss_t, nwd, nwd_loss_t, wasserstein2_boxes
from .data import (
    SynthConfig,
    generate_dataset,
    load_image,
    read_class_names,
    read_dataset,
    save_image,
    split_dataset,
)
from .metrics import evaluate
from .model import (
    ATTENTIONS,
    NECKS,
    ORIGINAL_TOTAL,
    TABLE1_ROWS,
    TABLE1_TOTAL,
    VARIANTS,
    Backbone,
    ModelConfig,
    build_model,
    load_weights,
    save_weights,
)
from .simam import SimamConfig, energy_heatmap, simam_apply
from .train import TrainConfig, convert_dtype, gradient_audit, predict, train
from . import blocks as B
from .data import synth_scene

AUDIT_TOL = 1e-4


def fmt(x) -> str:
    """Fixed 9-significant-digit rendering for portable golden output."""
    return f"{float(x):.9g}"


def _pair(text: str, cast, flag: str) -> tuple:
    parts = text.split(",")
    if len(parts) != 2:
        raise ValueError(f"{flag} expects two comma-separated values, got {text!r}")
    return cast(parts[0]), cast(parts[1])


def _box(text: str, flag: str) -> BBox:
    parts = text.split(",")
    if len(parts) != 4:
        raise ValueError(f"{flag} expects cx,cy,w,h, got {text!r}")
    return BBox(*(float(p) for p in parts))


def _ratios(text: str) -> tuple:
    parts = tuple(float(p) for p in text.split(","))
    if len(parts) != 3:
        raise ValueError(f"--split expects three comma-separated ratios, got {text!r}")
    return parts


# ---------------------------------------------------------------------------
# params / verify-table1
# ---------------------------------------------------------------------------


def cmd_params(args) -> int:
    rng = np.random.default_rng(0)
    backbone = Backbone(args.variant, rng, width=args.width)
    rows = backbone.row_param_counts()
    total = backbone.param_count()
    flops, _, _ = backbone.flops(args.input_size, args.input_size)
    if args.format == "json":
        payload = {
            "variant": args.variant,
            "width": args.width,
            "input_size": args.input_size,
            "rows": [
                {"row": i, "module": kind, "params": count}
                for i, (kind, count) in enumerate(rows, start=1)
            ],
            "total": total,
            "flops": flops,
        }
        print(json.dumps(payload, sort_keys=True))
    else:
        print(f"variant {args.variant} width {fmt(args.width)} input {args.input_size}")
        for i, (kind, count) in enumerate(rows, start=1):
            print(f"row {i:>2}  {kind:<6} {count:>10}")
        print(f"total         {total:>10}")
        print(f"flops         {flops:>10}")
    return 0


def cmd_verify_table1(args) -> int:
    rng = np.random.default_rng(0)
    backbone = Backbone("reconstructed", rng, width=1.0, conv_bias=args.conv_bias)
    rows = backbone.row_param_counts()
    ok = True

    def line(label: str, want: int, got: int) -> None:
        nonlocal ok
        match = want == got
        ok = ok and match
        print(f"{label:<24} expected {want:>10} actual {got:>10} {'OK' if match else 'MISMATCH'}")

    for i, ((kind, want), (_, got)) in enumerate(zip(TABLE1_ROWS, rows), start=1):
        line(f"row {i} {kind}", want, got)
    line("backbone total", TABLE1_TOTAL, backbone.param_count())
    original = Backbone("original", rng, width=1.0, conv_bias=args.conv_bias)
    line("original total", ORIGINAL_TOTAL, original.param_count())
    ratio = round(100 * backbone.param_count() / original.param_count())
    line("reduction ratio (%)", 45, ratio)
    print("table-1 verification " + ("PASSED" if ok else "FAILED"))
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# nwd / simam
# ---------------------------------------------------------------------------


def cmd_nwd(args) -> int:
    a = _box(args.box_a, "--box-a")
    b = _box(args.box_b, "--box-b")
    from .boxes import iou as iou_scalar

    print(f"iou {fmt(iou_scalar(a, b))}")
    print(f"w2_squared {fmt(wasserstein2_boxes(a, b))}")
    print(f"nwd {fmt(nwd(a, b, args.c))}")
    return 0


def cmd_simam(args) -> int:
    image = load_image(args.input)
    feature = image.data[None]  # (1, c, h, w)
    heat = energy_heatmap(feature, SimamConfig(e_lambda=args.e_lambda))
    save_image(heat.astype(np.float32), args.output)
    print(f"wrote heatmap {args.output} ({heat.shape[1]}x{heat.shape[0]})")
    return 0


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------


def _check_simam(rng) -> float:
    x = T.Tensor(rng.normal(size=(1, 2, 4, 4)), requires_grad=True)
    return T.grad_check(lambda t: T.mean(simam_apply(t)), [x])


def _check_boxes(rng) -> float:
    def boxes_pair():
        base = rng.uniform(4.0, 12.0, size=(3, 4))
        shift = base + rng.normal(scale=1.0, size=(3, 4)) * [1, 1, 0.3, 0.3]
        shift[:, 2:] = np.abs(shift[:, 2:]) + 1.0
        return T.Tensor(base.copy(), requires_grad=True), T.Tensor(shift)

    pred, gt = boxes_pair()
    worst = T.grad_check(lambda p: T.mean(nwd_loss_t(p, gt, 8.0)), [pred])
    pred, gt = boxes_pair()
    worst = max(worst, T.grad_check(lambda p: T.mean(ciou_loss_t(p, gt)), [pred]))
    return worst


def _block_suite(rng):
    return [
        ("CBS", B.CBS(3, 8, 3, 1, rng), 3),
        ("ELAN", B.ELAN(8, 2, 8, rng), 8),
        ("ELANW", B.ELANW(8, 2, 8, rng), 8),
        ("MP1", B.MP1(8, rng), 8),
        ("GSConv", B.GSConv(4, 8, 1, 1, rng), 4),
        ("GSBottleneck", B.GSBottleneck(4, 8, rng), 4),
        ("VoVGSCSP", B.VoVGSCSP(8, 8, rng), 8),
        ("SimAM", B.SimAM(), 4),
    ]


def _check_block(block, c_in: int, rng) -> float:
    block.train(True)
    x = T.Tensor(rng.normal(size=(2, c_in, 6, 6)), requires_grad=True)
    params = [p for _, p in block.named_parameters()]

    def fn(*inputs):
        out = block(inputs[0])
        return T.mean(out * out)

    return T.grad_check(fn, [x] + params)


def _check_model(seed: int) -> float:
    model = build_model(ModelConfig(width=0.25, input_size=64, n_classes=2), seed=seed)
    convert_dtype(model, np.float64)
    scfg = SynthConfig(img_size=64, targets_per_image=(1, 2), target_size=(4.0, 12.0), seed=seed)
    samples = [synth_scene(scfg, i) for i in range(2)]
    report = gradient_audit(model, samples, TrainConfig(loss_mode="mixed"),
                            sample_size=10, seed=seed)
    return report["max_rel_error"]


def cmd_gradcheck(args) -> int:
    rng = np.random.default_rng(args.seed)
    checks = []
    if args.module in ("all", "simam"):
        checks.append(("simam_apply", lambda: _check_simam(rng)))
    if args.module in ("all", "boxes"):
        checks.append(("box_losses", lambda: _check_boxes(rng)))
    if args.module in ("all", "blocks"):
        for name, block, c_in in _block_suite(rng):
            checks.append((name, lambda b=block, c=c_in: _check_block(b, c, rng)))
    if args.module in ("all", "model"):
        checks.append(("toy_model", lambda: _check_model(args.seed)))
    if not checks:
        raise ValueError(f"unknown gradcheck module {args.module!r}")
    ok = True
    for name, run in checks:
        err = run()
        passed = err <= AUDIT_TOL
        ok = ok and passed
        print(f"gradcheck {name:<14} max_rel {fmt(err)} {'OK' if passed else 'FAIL'}")
    print("gradient audit " + ("PASSED" if ok else "FAILED"))
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# synth / train / eval
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = SynthConfig(
        img_size=args.img_size,
        targets_per_image=_pair(args.targets_per_image, int, "--targets-per-image"),
        target_size=_pair(args.target_size, float, "--target-size"),
        target_intensity=_pair(args.target_intensity, float, "--target-intensity"),
        noise_sigma=args.noise_sigma,
        background=args.background,
        seed=args.seed,
        size_buckets=tuple(float(b) for b in args.size_buckets.split(",")),
    )
    ids = generate_dataset(cfg, args.count, args.out)
    names = ", ".join(cfg.class_names())
    print(f"wrote {len(ids)} scenes to {args.out} ({cfg.n_classes} classes: {names})")
    return 0


def _load_split(args):
    samples = read_dataset(args.data)
    if not samples:
        raise ValueError(f"no samples found under {args.data}")
    ids = [s.id for s in samples]
    by_id = {s.id: s for s in samples}
    tr, va, te = split_dataset(ids, _ratios(args.split), seed=args.split_seed)
    parts = {"train": tr, "val": va, "test": te, "all": ids}
    return by_id, parts


def cmd_train(args) -> int:
    names = read_class_names(args.data)
    by_id, parts = _load_split(args)
    train_s = [by_id[i] for i in parts["train"]]
    val_s = [by_id[i] for i in parts["val"]]
    if not train_s:
        raise ValueError("training split is empty")
    img_size = train_s[0].image_size[0]
    mcfg = ModelConfig(
        variant=args.variant,
        neck=args.neck,
        attention=args.attention,
        width=args.width,
        input_size=img_size,
        n_classes=len(names),
    )
    model = build_model(mcfg, seed=args.seed)
    convert_dtype(model, np.float32)
    tcfg = TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        learning_rate=args.lr,
        momentum=args.momentum,
        loss_mode=args.loss_mode,
        iou_ratio=args.iou_ratio,
        nwd_c=args.nwd_c,
        box_weight=args.box_weight,
        obj_pos_weight=args.obj_pos_weight,
        seed=args.seed,
    )
    log = train(model, train_s, val_s, tcfg)
    for rec in log:
        bits = [f"epoch {rec['epoch']}"]
        for key in ("loss_total", "loss_box", "loss_obj", "loss_cls"):
            bits.append(f"{key} {fmt(rec[key])}")
        if "val_map50" in rec:
            bits.append(f"val_map50 {fmt(rec['val_map50'])}")
        print(" ".join(bits))
    save_weights(model, args.weights_out)
    with open(args.weights_out + ".json", "w", encoding="ascii") as fh:
        fh.write(mcfg.to_json() + "\n")
    if args.log_out:
        with open(args.log_out, "w", encoding="ascii") as fh:
            for rec in log:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    print(f"saved weights {args.weights_out}")
    return 0


def cmd_eval(args) -> int:
    config_path = args.model_config or args.weights + ".json"
    with open(config_path, "r", encoding="ascii") as fh:
        mcfg = ModelConfig.from_json(fh.read())
    model = build_model(mcfg, seed=0)
    load_weights(model, args.weights)
    by_id, parts = _load_split(args)
    chosen = [by_id[i] for i in parts[args.part]]
    if not chosen:
        raise ValueError(f"split part {args.part!r} is empty")
    preds = predict(model, chosen, conf_thresh=args.decode_conf, nms_iou=args.nms_iou)
    report = evaluate(
        preds,
        [s.gts for s in chosen],
        conf_thresh=args.conf,
        iou_thresh=args.match_iou,
        n_classes=mcfg.n_classes,
        metric=args.match_metric,
        nwd_c=args.nwd_c,
    )
    if args.format == "json":
        print(report.to_json())
    else:
        print(f"images {len(chosen)}")
        print(f"precision {fmt(report.precision)}")
        print(f"recall {fmt(report.recall)}")
        print(f"map50 {fmt(report.map50)}")
        for cid in sorted(report.per_class_ap):
            print(f"ap class {cid} {fmt(report.per_class_ap[cid])}")
    return 0


# ---------------------------------------------------------------------------
# parser / dispatch
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="istdyolo", description="infrared small-target detector toolkit"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("params", help="per-module parameter counts")
    p.add_argument("--variant", choices=VARIANTS, default="reconstructed")
    p.add_argument("--width", type=float, default=1.0)
    p.add_argument("--input-size", type=int, default=640)
    p.add_argument("--format", choices=("table", "json"), default="table")
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("verify-table1", help="check golden parameter counts")
    p.add_argument("--conv-bias", action="store_true",
                   help="negative control: bias every backbone CBS conv")
    p.set_defaults(func=cmd_verify_table1)

    p = sub.add_parser("nwd", help="box similarity scalars for two boxes")
    p.add_argument("--box-a", required=True, help="cx,cy,w,h")
    p.add_argument("--box-b", required=True, help="cx,cy,w,h")
    p.add_argument("--c", type=float, default=8.0)
    p.set_defaults(func=cmd_nwd)

    p = sub.add_parser("simam", help="write an attention-energy heatmap image")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--e-lambda", type=float, default=1e-4)
    p.set_defaults(func=cmd_simam)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audits")
    p.add_argument("--module", default="all",
                   choices=("all", "simam", "boxes", "blocks", "model"))
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth", help="generate a synthetic scene dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--img-size", type=int, default=160)
    p.add_argument("--targets-per-image", default="1,5")
    p.add_argument("--target-size", default="2,12")
    p.add_argument("--target-intensity", default="0.3,0.8")
    p.add_argument("--noise-sigma", type=float, default=0.02)
    p.add_argument("--background", choices=("gradient", "clouds", "clutter"),
                   default="gradient")
    p.add_argument("--size-buckets", default="6")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a detector on a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--weights-out", required=True)
    p.add_argument("--log-out")
    p.add_argument("--split", default="0.7,0.2,0.1")
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--variant", choices=VARIANTS, default="reconstructed")
    p.add_argument("--neck", choices=NECKS, default="ltsn")
    p.add_argument("--attention", choices=ATTENTIONS, default="simam")
    p.add_argument("--width", type=float, default=0.125)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--loss-mode", choices=("iou_only", "nwd_only", "mixed"),
                   default="mixed")
    p.add_argument("--iou-ratio", type=float, default=0.5)
    p.add_argument("--nwd-c", type=float, default=8.0)
    p.add_argument("--box-weight", type=float, default=0.05)
    p.add_argument("--obj-pos-weight", type=float, default=20.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate saved weights on a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--model-config", help="defaults to <weights>.json")
    p.add_argument("--split", default="0.7,0.2,0.1")
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--part", choices=("train", "val", "test", "all"), default="all")
    p.add_argument("--conf", type=float, default=0.25)
    p.add_argument("--decode-conf", type=float, default=0.05)
    p.add_argument("--nms-iou", type=float, default=0.5)
    p.add_argument("--match-iou", type=float, default=0.5)
    p.add_argument("--match-metric", choices=("iou", "nwd"), default="iou")
    p.add_argument("--nwd-c", type=float, default=8.0)
    p.add_argument("--format", choices=("json", "table"), default="json")
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FloatingPointError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError, T.ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def console() -> None:
    sys.exit(main())


if __name__ == "__main__":
    console()

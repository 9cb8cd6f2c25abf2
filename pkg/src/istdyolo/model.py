"""Full detector assembly: backbone, three-scale neck, anchor heads.

The backbone follows a fixed nine-row plan (four stem convs, then
aggregation/downsample alternation) that stops at stride 16; the "original"
variant appends the two stride-32 rows it replaces, and exists so the
parameter savings can be verified row by row. The neck fuses the stride
4/8/16 taps top-down then bottom-up, with two attention insertions after its
first two channel reducers. Heads are 1x1 convs emitting per-anchor box,
objectness, and class logits.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import expit

from istdyolo import tensor as T
from istdyolo import blocks as B
from istdyolo.boxes import BBox

VARIANTS = ("reconstructed", "original")
NECKS = ("ltsn", "elanw_baseline")
ATTENTIONS = ("simam", "none")
STRIDES = (4, 8, 16)

DEFAULT_ANCHORS = (
    ((4.0, 4.0), (8.0, 8.0), (12.0, 12.0)),
    ((16.0, 16.0), (24.0, 24.0), (32.0, 32.0)),
    ((40.0, 40.0), (56.0, 56.0), (72.0, 72.0)),
)

# Reference per-row parameter counts the reconstructed backbone must
# reproduce (checked by the verify-table1 subcommand and the test suite).
TABLE1_ROWS = (
    ("CBS", 928),
    ("CBS", 18560),
    ("CBS", 36992),
    ("CBS", 73984),
    ("ELAN", 230656),
    ("MP1", 213760),
    ("ELAN", 920064),
    ("MP1", 853504),
    ("ELAN", 3675136),
)
TABLE1_TOTAL = 6023584
ORIGINAL_TOTAL = 13371808


@dataclass(frozen=True)
class Detection:
    bbox: BBox
    class_id: int
    score: float

    def __post_init__(self):
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"score must be in [0, 1], got {self.score}")


def validate_anchors(anchors):
    try:
        anchors = tuple(tuple((float(w), float(h)) for w, h in scale) for scale in anchors)
    except (TypeError, ValueError):
        raise ValueError("anchors must be 3 scales of 3 (w, h) pairs") from None
    if len(anchors) != 3 or any(len(s) != 3 for s in anchors):
        raise ValueError("anchors must be 3 scales of 3 (w, h) pairs")
    for scale in anchors:
        areas = [w * h for w, h in scale]
        if any(w <= 0 or h <= 0 for w, h in scale):
            raise ValueError("anchor sides must be positive")
        if sorted(areas) != areas:
            raise ValueError("anchors must be sorted ascending by area within a scale")
    return anchors


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "reconstructed"
    neck: str = "ltsn"
    attention: str = "simam"
    width: float = 1.0
    input_size: int = 640
    n_classes: int = 2
    e_lambda: float = 1e-4
    anchors: tuple = field(default_factory=lambda: DEFAULT_ANCHORS)
    conv_bias: bool = False  # verification fixture; reference rows use bias-free convs

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.neck not in NECKS:
            raise ValueError(f"neck must be one of {NECKS}, got {self.neck!r}")
        if self.attention not in ATTENTIONS:
            raise ValueError(f"attention must be one of {ATTENTIONS}, got {self.attention!r}")
        if not (0.0 < self.width <= 1.0):
            raise ValueError(f"width multiplier must be in (0, 1], got {self.width}")
        if self.input_size % 32 != 0 or self.input_size < 32:
            raise ValueError(f"input size must be a positive multiple of 32, got {self.input_size}")
        if self.n_classes < 1:
            raise ValueError(f"need at least one class, got {self.n_classes}")
        object.__setattr__(self, "anchors", validate_anchors(self.anchors))

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "ModelConfig":
        raw = json.loads(text)
        if "anchors" in raw:
            raw["anchors"] = tuple(tuple(tuple(a) for a in s) for s in raw["anchors"])
        return ModelConfig(**raw)


def scale_channels(c: int, width: float) -> int:
    """Apply the width multiplier, keeping channels a positive multiple of 4
    so aggregation splits (quarters/halves) stay integral."""
    return max(4, int(round(c * width / 4.0)) * 4)


class Backbone(B.Module):
    """The nine-row feature extractor with taps at strides 4, 8, 16.

    Row plan (full width): CBS(3,32,3,1), CBS(32,64,3,2), CBS(64,64,3,1),
    CBS(64,128,3,2), ELAN(128,64,256) [tap p2], MP1(256), ELAN(256,128,512)
    [tap p3], MP1(512), ELAN(512,256,1024) [tap p4]. The original variant
    appends MP1(1024) and ELAN(1024,256,1024) [tap p5, stride 32].
    """

    def __init__(self, variant: str, rng, width: float = 1.0, conv_bias: bool = False):
        super().__init__()
        if variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {variant!r}")
        self.variant = variant
        w_ = lambda c: scale_channels(c, width)

        def cbs(c_in, c_out, k, s):
            m = B.CBS(c_in, c_out, k, s, rng)
            if conv_bias:
                # rebuild the conv with a bias vector (verification fixture)
                m.conv = B.Conv2d(c_in, c_out, k, s, k // 2, rng, bias=True)
            return m

        rows: list[tuple[str, B.Module, str | None]] = [
            ("CBS", cbs(3, w_(32), 3, 1), None),
            ("CBS", cbs(w_(32), w_(64), 3, 2), None),
            ("CBS", cbs(w_(64), w_(64), 3, 1), None),
            ("CBS", cbs(w_(64), w_(128), 3, 2), None),
            ("ELAN", B.ELAN(w_(128), w_(256) // 4, w_(256), rng), "p2"),
            ("MP1", B.MP1(w_(256), rng), None),
            ("ELAN", B.ELAN(w_(256), w_(512) // 4, w_(512), rng), "p3"),
            ("MP1", B.MP1(w_(512), rng), None),
            ("ELAN", B.ELAN(w_(512), w_(1024) // 4, w_(1024), rng), "p4"),
        ]
        if variant == "original":
            rows += [
                ("MP1", B.MP1(w_(1024), rng), None),
                ("ELAN", B.ELAN(w_(1024), w_(1024) // 4, w_(1024), rng), "p5"),
            ]
        self.rows = B.ModuleList([m for _, m, _ in rows])
        self.row_kinds = tuple(k for k, _, _ in rows)
        self.row_taps = tuple(t for _, _, t in rows)
        self.tap_channels = {
            "p2": w_(256),
            "p3": w_(512),
            "p4": w_(1024),
        }

    def row_param_counts(self) -> list[tuple[str, int]]:
        return [(kind, m.param_count()) for kind, m in zip(self.row_kinds, self.rows)]

    def forward(self, x) -> dict[str, T.Tensor]:
        taps = {}
        h = x
        for m, tap in zip(self.rows, self.row_taps):
            h = m(h)
            if tap is not None:
                taps[tap] = h
        return taps

    def flops(self, h, w):
        total = 0
        for m in self.rows:
            f, h, w = m.flops(h, w)
            total += f
        return total, h, w


class Neck(B.Module):
    """Three-scale fusion: top-down feature spreading then bottom-up path
    aggregation; two attention layers sit right after the first two channel
    reducers. Output channels (full width): 128 at stride 4, 256 at stride 8,
    512 at stride 16.
    """

    def __init__(
        self,
        variant: str,
        rng,
        width: float = 1.0,
        attention: str = "simam",
        e_lambda: float = 1e-4,
    ):
        super().__init__()
        if variant not in NECKS:
            raise ValueError(f"neck must be one of {NECKS}, got {variant!r}")
        if attention not in ATTENTIONS:
            raise ValueError(f"attention must be one of {ATTENTIONS}, got {attention!r}")
        self.variant = variant
        w_ = lambda c: scale_channels(c, width)
        c2, c3, c4 = w_(256), w_(512), w_(1024)
        n128, n256, n512 = w_(128), w_(256), w_(512)

        if variant == "ltsn":
            agg = lambda c_in, c_out: B.VoVGSCSP(c_in, c_out, rng)
            att = (lambda: B.SimAM(e_lambda)) if attention == "simam" else B.Identity
        else:
            agg = lambda c_in, c_out: B.ELANW(c_in, c_out // 4, c_out, rng)
            att = B.Identity

        self.reduce4 = B.CBS(c4, n256, 1, 1, rng)
        self.att4 = att()
        self.lat3 = B.CBS(c3, n256, 1, 1, rng)
        self.up = B.Upsample2x()
        self.merge3 = agg(2 * n256, n256)
        self.reduce3 = B.CBS(n256, n128, 1, 1, rng)
        self.att3 = att()
        self.lat2 = B.CBS(c2, n128, 1, 1, rng)
        self.merge2 = agg(2 * n128, n128)
        self.down2 = B.GSConv(n128, n128, 3, 2, rng)
        self.merge3b = agg(n128 + n256, n256)
        self.down3 = B.GSConv(n256, n256, 3, 2, rng)
        self.merge4b = agg(2 * n256, n512)
        self.out_channels = (n128, n256, n512)

    def forward(self, taps: dict[str, T.Tensor]) -> list[T.Tensor]:
        for need in ("p2", "p3", "p4"):
            if need not in taps:
                raise ValueError(f"neck requires tap {need!r}; got {sorted(taps)}")
        r4 = self.att4(self.reduce4(taps["p4"]))
        m3 = self.merge3(T.concat_channels([self.up(r4), self.lat3(taps["p3"])]))
        r3 = self.att3(self.reduce3(m3))
        out2 = self.merge2(T.concat_channels([self.up(r3), self.lat2(taps["p2"])]))
        out3 = self.merge3b(T.concat_channels([self.down2(out2), m3]))
        out4 = self.merge4b(T.concat_channels([self.down3(out3), r4]))
        return [out2, out3, out4]

    def attention_layer_count(self) -> int:
        return sum(1 for m in (self.att4, self.att3) if isinstance(m, B.SimAM))

    def flops(self, h4, w4):
        """h4, w4 are the stride-4 tap's spatial dims; strides 8/16 follow."""
        h8, w8 = h4 // 2, w4 // 2
        h16, w16 = h4 // 4, w4 // 4
        total = 0
        for m, (h, w) in (
            (self.reduce4, (h16, w16)),
            (self.lat3, (h8, w8)),
            (self.merge3, (h8, w8)),
            (self.reduce3, (h8, w8)),
            (self.lat2, (h4, w4)),
            (self.merge2, (h4, w4)),
            (self.down2, (h4, w4)),
            (self.merge3b, (h8, w8)),
            (self.down3, (h8, w8)),
            (self.merge4b, (h16, w16)),
        ):
            f, _, _ = m.flops(h, w)
            total += f
        return total, h4, w4


class Heads(B.Module):
    """Per scale, one 1x1 conv (with bias) emitting 3 anchors x
    (tx, ty, tw, th, objectness, class logits)."""

    def __init__(self, in_channels, n_classes: int, rng, obj_bias: float = -4.0):
        super().__init__()
        self.n_classes = n_classes
        self.per_anchor = 5 + n_classes
        convs = []
        for c in in_channels:
            conv = B.Conv2d(c, 3 * self.per_anchor, 1, 1, 0, rng, bias=True)
            # start objectness negative so the untrained model predicts few boxes
            bias = conv.bias.data
            bias[4 :: self.per_anchor] = obj_bias
            convs.append(conv)
        self.convs = B.ModuleList(convs)

    def forward(self, feats: list[T.Tensor]) -> list[T.Tensor]:
        return [conv(f) for conv, f in zip(self.convs, feats)]

    def flops(self, h4, w4):
        total = 0
        for i, conv in enumerate(self.convs):
            f, _, _ = conv.flops(h4 >> i, w4 >> i)
            total += f
        return total, h4, w4


class Detector(B.Module):
    """Backbone + neck + heads; forward maps a (n, 3, s, s) batch to three
    raw prediction tensors at strides 4, 8, 16."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        self.backbone = Backbone(cfg.variant, rng, width=cfg.width, conv_bias=cfg.conv_bias)
        self.neck = Neck(
            cfg.neck, rng, width=cfg.width, attention=cfg.attention, e_lambda=cfg.e_lambda
        )
        self.heads = Heads(self.neck.out_channels, cfg.n_classes, rng)

    def forward(self, x) -> list[T.Tensor]:
        x = T.as_tensor(x)
        if x.data.ndim != 4 or x.data.shape[2] != x.data.shape[3]:
            raise T.ShapeError(f"expected a square (n, c, s, s) batch, got {x.shape}")
        if x.data.shape[2] % 32 != 0:
            raise T.ShapeError(f"input side must be a multiple of 32, got {x.data.shape[2]}")
        return self.heads(self.neck(self.backbone(x)))

    def flops(self, h, w):
        fb, _, _ = self.backbone.flops(h, w)
        fn, _, _ = self.neck.flops(h // 4, w // 4)
        fh, _, _ = self.heads.flops(h // 4, w // 4)
        return fb + fn + fh, h, w


def build_model(cfg: ModelConfig, seed: int = 0) -> Detector:
    return Detector(cfg, seed=seed)


def count_params(module: B.Module) -> int:
    return module.param_count()


def count_flops(module: B.Module, input_size: int) -> int:
    return module.flops(input_size, input_size)[0]


# ---------------------------------------------------------------------------
# decode
# ---------------------------------------------------------------------------


def decode(
    raws,
    anchors=DEFAULT_ANCHORS,
    strides=STRIDES,
    conf_thresh: float = 0.25,
    img_size: int | None = None,
) -> list[list[Detection]]:
    """Turn raw per-scale logits into detections.

    Per cell and anchor: cx = (2 sig(tx) - 0.5 + col) * stride,
    w = (2 sig(tw))^2 * anchor_w (so w < 4 anchor_w), score =
    sig(obj) * max_c sig(cls_c). Boxes are clamped to the image square;
    boxes that clamp to nothing are dropped. Returns one list per image,
    unsorted (NMS sorts).
    """
    if not (0.0 <= conf_thresh <= 1.0):
        raise ValueError(f"conf_thresh must be in [0, 1], got {conf_thresh}")
    anchors = validate_anchors(anchors)
    arrs = [r.data if isinstance(r, T.Tensor) else np.asarray(r) for r in raws]
    n = arrs[0].shape[0]
    if img_size is None:
        img_size = arrs[0].shape[2] * strides[0]
    out: list[list[Detection]] = [[] for _ in range(n)]
    for arr, anc, stride in zip(arrs, anchors, strides):
        nb, ch, h, w = arr.shape
        per = ch // 3
        nc = per - 5
        # f64 keeps scores strictly monotone in the logits; f32 sigmoid
        # saturates to exactly 1.0 and ties would scramble the AP ranking
        a = arr.reshape(nb, 3, per, h, w).astype(np.float64)
        sig = expit(a)
        col = np.arange(w, dtype=np.float64)[None, None, None, :]
        row = np.arange(h, dtype=np.float64)[None, None, :, None]
        cx = (2.0 * sig[:, :, 0] - 0.5 + col) * stride
        cy = (2.0 * sig[:, :, 1] - 0.5 + row) * stride
        aw = np.array([p[0] for p in anc])[None, :, None, None]
        ah = np.array([p[1] for p in anc])[None, :, None, None]
        bw = (2.0 * sig[:, :, 2]) ** 2 * aw
        bh = (2.0 * sig[:, :, 3]) ** 2 * ah
        obj = sig[:, :, 4]
        cls = sig[:, :, 5:]
        score = obj * cls.max(axis=2)
        cid = cls.argmax(axis=2)
        keep = score >= conf_thresh
        for bi in range(nb):
            idx = np.argwhere(keep[bi])
            for ai, yi, xi in idx:
                x1 = max(0.0, cx[bi, ai, yi, xi] - bw[bi, ai, yi, xi] / 2)
                y1 = max(0.0, cy[bi, ai, yi, xi] - bh[bi, ai, yi, xi] / 2)
                x2 = min(float(img_size), cx[bi, ai, yi, xi] + bw[bi, ai, yi, xi] / 2)
                y2 = min(float(img_size), cy[bi, ai, yi, xi] + bh[bi, ai, yi, xi] / 2)
                if x2 - x1 <= 0 or y2 - y1 <= 0:
                    continue
                out[bi].append(
                    Detection(
                        bbox=BBox((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1),
                        class_id=int(cid[bi, ai, yi, xi]),
                        score=float(score[bi, ai, yi, xi]),
                    )
                )
    return out


# ---------------------------------------------------------------------------
# weights file
# ---------------------------------------------------------------------------

WEIGHTS_MAGIC = b"ISTD1"


def save_weights(module: B.Module, path):
    """Write all parameters then all buffers as named float32 records."""
    with open(path, "wb") as f:
        f.write(WEIGHTS_MAGIC)
        records = list(module.named_parameters()) + [
            (name, arr) for name, arr in module.named_buffers()
        ]
        for name, value in records:
            data = value.data if isinstance(value, T.Tensor) else value
            arr = np.ascontiguousarray(data, dtype="<f4")
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            for d in arr.shape:
                f.write(struct.pack("<I", d))
            f.write(arr.tobytes())


def load_weights(module: B.Module, path):
    """Restore parameters and buffers saved by save_weights; shapes must match."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:5] != WEIGHTS_MAGIC:
        raise ValueError(f"not a weights file (bad magic {blob[:5]!r})")
    records = {}
    off = 5
    while off < len(blob):
        (nlen,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off : off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<I", blob, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}I", blob, off) if rank else ()
        off += 4 * rank
        count = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=off).reshape(dims)
        off += 4 * count
        records[name] = arr
    targets = dict(module.named_parameters())
    buffers = dict(module.named_buffers())
    for name, arr in records.items():
        if name in targets:
            dst = targets[name]
            if dst.data.shape != arr.shape:
                raise ValueError(f"shape mismatch for {name}: {dst.data.shape} vs {arr.shape}")
            dst.data = arr.astype(dst.data.dtype)
        elif name in buffers:
            if buffers[name].shape != arr.shape:
                raise ValueError(f"shape mismatch for {name}: {buffers[name].shape} vs {arr.shape}")
            buffers[name][...] = arr
        else:
            raise ValueError(f"unknown record {name!r} in weights file")
    missing = (set(targets) | set(buffers)) - set(records)
    if missing:
        raise ValueError(f"weights file is missing {len(missing)} records, e.g. {sorted(missing)[:3]}")


# ---------------------------------------------------------------------------
# anchor fitting
# ---------------------------------------------------------------------------


def kmeans_anchors(wh: np.ndarray, k: int = 9, seed: int = 0, iters: int = 50):
    """Plain k-means over (w, h) label sizes; returns anchors grouped into
    3 scales of 3, ascending by area."""
    wh = np.asarray(wh, dtype=np.float64).reshape(-1, 2)
    if wh.shape[0] < k:
        raise ValueError(f"need at least {k} boxes to fit {k} anchors, got {wh.shape[0]}")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    # farthest-point seeding: robust to clustered size distributions
    centers = [wh[int(rng.integers(wh.shape[0]))]]
    while len(centers) < k:
        d = np.min(((wh[:, None, :] - np.array(centers)[None]) ** 2).sum(axis=2), axis=1)
        centers.append(wh[int(d.argmax())])
    centers = np.array(centers)
    for _ in range(iters):
        d = ((wh[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        assign = d.argmin(axis=1)
        for j in range(k):
            pts = wh[assign == j]
            if len(pts):
                centers[j] = pts.mean(axis=0)
    order = np.argsort(centers[:, 0] * centers[:, 1], kind="stable")
    centers = np.maximum(centers[order], 1.0)
    grouped = tuple(
        tuple((float(w), float(h)) for w, h in centers[3 * i : 3 * i + 3]) for i in range(3)
    )
    return validate_anchors(grouped)

"""Dataset plumbing: YOLO-text labels, portable anymap images, splits, synthesis.

Images travel as float32 arrays in [0, 1] wrapped in Tensor. The only codec is
binary PNM (P5 grayscale / P6 color, 8 bit); labels are whitespace-separated
"class cx cy w h" lines with coordinates normalized to the image size. A small
scene generator produces infrared-like frames (smooth background, pixel noise,
a handful of dim Gaussian blobs) so experiments never need external data.
"""

from __future__ import annotations

import dataclasses
import math
import os

import numpy as np

from .boxes import BBox
from .metrics import GroundTruth
from .tensor import Tensor

_BACKGROUNDS = ("gradient", "clouds", "clutter")
_LUMA = (0.299, 0.587, 0.114)


@dataclasses.dataclass
class Sample:
    """One image with its ground-truth boxes.

    image is (c, h, w) float32 in [0, 1] with c in {1, 3}; every box must lie
    inside the image rectangle.
    """

    image: Tensor
    gts: list
    id: str

    def __post_init__(self) -> None:
        arr = self.image.data
        if arr.ndim != 3 or arr.shape[0] not in (1, 3):
            raise ValueError(f"image must be (c, h, w) with 1 or 3 channels, got {arr.shape}")
        if arr.size and (arr.min() < -1e-6 or arr.max() > 1 + 1e-6):
            raise ValueError("image values must lie in [0, 1]")
        h, w = arr.shape[1], arr.shape[2]
        for g in self.gts:
            x0, y0, x1, y1 = g.bbox.corners()
            if x0 < -1e-6 or y0 < -1e-6 or x1 > w + 1e-6 or y1 > h + 1e-6:
                raise ValueError(f"box {g.bbox} exceeds image bounds {w}x{h}")

    @property
    def image_size(self) -> tuple:
        return self.image.data.shape[1], self.image.data.shape[2]


# ---------------------------------------------------------------------------
# labels
# ---------------------------------------------------------------------------


def load_labels(path: str, img_w: int, img_h: int) -> list:
    """Read normalized "class cx cy w h" lines into pixel-space GroundTruths."""
    gts = []
    with open(path, "r", encoding="ascii") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 5:
                raise ValueError(f"{path}:{lineno}: expected 5 fields, got {len(parts)}")
            try:
                cid = int(parts[0])
                cx, cy, w, h = (float(p) for p in parts[1:])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: non-numeric field in {line!r}") from None
            if cid < 0:
                raise ValueError(f"{path}:{lineno}: class id must be non-negative")
            for name, v in (("cx", cx), ("cy", cy), ("w", w), ("h", h)):
                if not 0.0 <= v <= 1.0:
                    raise ValueError(f"{path}:{lineno}: {name}={v} outside [0, 1]")
            if w <= 0.0 or h <= 0.0:
                raise ValueError(f"{path}:{lineno}: box size must be positive")
            gts.append(GroundTruth(BBox(cx * img_w, cy * img_h, w * img_w, h * img_h), cid))
    return gts


def save_labels(gts: list, path: str, img_w: int, img_h: int) -> None:
    lines = []
    for g in gts:
        b = g.bbox
        lines.append(
            f"{g.class_id} {b.cx / img_w:.6f} {b.cy / img_h:.6f} "
            f"{b.w / img_w:.6f} {b.h / img_h:.6f}"
        )
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + ("\n" if lines else ""))


# ---------------------------------------------------------------------------
# portable anymap images
# ---------------------------------------------------------------------------


def _read_pnm_header(buf: bytes, path: str) -> tuple:
    """Parse magic plus three integer tokens; returns (magic, w, h, maxval, offset)."""
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise ValueError(f"{path}: unsupported magic {magic!r}, want P5 or P6")
    pos, tokens = 2, []
    while len(tokens) < 3:
        if pos >= len(buf):
            raise ValueError(f"{path}: truncated header")
        ch = buf[pos : pos + 1]
        if ch == b"#":
            while pos < len(buf) and buf[pos : pos + 1] != b"\n":
                pos += 1
        elif ch.isspace():
            pos += 1
        elif ch.isdigit():
            start = pos
            while pos < len(buf) and buf[pos : pos + 1].isdigit():
                pos += 1
            tokens.append(int(buf[start:pos]))
        else:
            raise ValueError(f"{path}: unexpected byte {ch!r} in header")
    # exactly one whitespace byte separates the header from the payload
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise ValueError(f"{path}: missing payload separator")
    w, h, maxval = tokens
    if not (0 < maxval <= 255):
        raise ValueError(f"{path}: only 8-bit depth supported, got maxval {maxval}")
    if w <= 0 or h <= 0:
        raise ValueError(f"{path}: bad dimensions {w}x{h}")
    return magic, w, h, maxval, pos + 1


def load_image(path: str, grayscale: bool = True) -> Tensor:
    """Load a P5/P6 file as (c, h, w) float32 in [0, 1].

    P6 input collapses to a single luminance channel unless grayscale=False.
    """
    with open(path, "rb") as fh:
        buf = fh.read()
    magic, w, h, maxval, offset = _read_pnm_header(buf, path)
    channels = 1 if magic == b"P5" else 3
    need = w * h * channels
    payload = buf[offset : offset + need]
    if len(payload) != need:
        raise ValueError(f"{path}: expected {need} payload bytes, got {len(payload)}")
    arr = np.frombuffer(payload, dtype=np.uint8).astype(np.float32) / np.float32(maxval)
    if channels == 1:
        arr = arr.reshape(1, h, w)
    else:
        arr = arr.reshape(h, w, 3).transpose(2, 0, 1)
        if grayscale:
            luma = sum(np.float32(k) * arr[i] for i, k in enumerate(_LUMA))
            arr = luma.reshape(1, h, w)
    return Tensor(np.ascontiguousarray(arr, dtype=np.float32))


def save_image(image, path: str) -> None:
    """Write (h, w), (1, h, w) as P5 or (3, h, w) as P6, quantized to 8 bit."""
    arr = image.data if isinstance(image, Tensor) else np.asarray(image)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[0] not in (1, 3):
        raise ValueError(f"image must be (h, w), (1, h, w) or (3, h, w), got {arr.shape}")
    quant = np.rint(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    c, h, w = quant.shape
    magic = b"P5" if c == 1 else b"P6"
    payload = quant[0] if c == 1 else quant.transpose(1, 2, 0)
    with open(path, "wb") as fh:
        fh.write(magic + b"\n" + f"{w} {h}\n255\n".encode("ascii"))
        fh.write(payload.tobytes())


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------


def split_dataset(ids: list, ratios: tuple = (0.7, 0.2, 0.1), seed: int = 0) -> tuple:
    """Shuffle ids by seed and cut floor(n*r) for train and val, rest to test."""
    if not ids:
        raise ValueError("cannot split an empty id list")
    if len(ratios) != 3 or any(r < 0 for r in ratios):
        raise ValueError(f"ratios must be 3 non-negative values, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {sum(ratios)}")
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    n = len(ids)
    n_train = math.floor(n * ratios[0])
    n_val = math.floor(n * ratios[1])
    return (
        shuffled[:n_train],
        shuffled[n_train : n_train + n_val],
        shuffled[n_train + n_val :],
    )


# ---------------------------------------------------------------------------
# synthetic scenes
# ---------------------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class SynthConfig:
    """Recipe for generated infrared-like frames.

    target_size bounds the box side length in pixels (the blob's 3-sigma
    extent); target_intensity bounds the peak contrast above the local
    background. size_buckets are class boundaries: a target whose side is
    below the first boundary is class 0, between the first two is class 1,
    and so on.
    """

    img_size: int = 160
    targets_per_image: tuple = (1, 5)
    target_size: tuple = (2.0, 12.0)
    target_intensity: tuple = (0.3, 0.8)
    noise_sigma: float = 0.02
    background: str = "gradient"
    seed: int = 0
    size_buckets: tuple = (6.0,)

    def __post_init__(self) -> None:
        if self.img_size < 16:
            raise ValueError(f"img_size must be at least 16, got {self.img_size}")
        lo, hi = self.targets_per_image
        if not (0 <= lo <= hi):
            raise ValueError(f"bad targets_per_image range {self.targets_per_image}")
        lo, hi = self.target_size
        if not (1.0 <= lo <= hi):
            raise ValueError(f"target sizes must be >= 1 px and ordered, got {self.target_size}")
        lo, hi = self.target_intensity
        if not (0.0 < lo <= hi):
            raise ValueError(f"bad target_intensity range {self.target_intensity}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if self.background not in _BACKGROUNDS:
            raise ValueError(f"background must be one of {_BACKGROUNDS}")
        if list(self.size_buckets) != sorted(self.size_buckets) or not self.size_buckets:
            raise ValueError("size_buckets must be a non-empty ascending tuple")

    @property
    def n_classes(self) -> int:
        return len(self.size_buckets) + 1

    def class_names(self) -> list:
        bounds = [f"{b:g}" for b in self.size_buckets]
        names = [f"lt_{bounds[0]}"]
        names += [f"{bounds[i]}_to_{bounds[i + 1]}" for i in range(len(bounds) - 1)]
        names.append(f"ge_{bounds[-1]}")
        return names

    def class_of(self, size: float) -> int:
        return int(np.searchsorted(np.asarray(self.size_buckets), size, side="right"))


def _gaussian_bump(xs, ys, cx, cy, sigma, amp):
    d2 = (xs - cx) ** 2 + (ys - cy) ** 2
    return amp * np.exp(-d2 / (2.0 * sigma * sigma))


def _background(cfg: SynthConfig, rng) -> np.ndarray:
    s = cfg.img_size
    ys, xs = np.mgrid[0:s, 0:s].astype(np.float64)
    base = rng.uniform(0.2, 0.4)
    gx, gy = rng.uniform(-0.15, 0.15, size=2)
    img = base + gx * (xs / s - 0.5) + gy * (ys / s - 0.5)
    if cfg.background in ("clouds", "clutter"):
        for _ in range(6):
            img += _gaussian_bump(
                xs, ys, rng.uniform(0, s), rng.uniform(0, s),
                rng.uniform(s / 8, s / 3), rng.uniform(-0.1, 0.15),
            )
    if cfg.background == "clutter":
        for _ in range(25):
            img += _gaussian_bump(
                xs, ys, rng.uniform(0, s), rng.uniform(0, s),
                rng.uniform(1.5, 5.0), rng.uniform(0.0, 0.12),
            )
    return np.clip(img, 0.05, 0.6)


def synth_scene(cfg: SynthConfig, index: int) -> Sample:
    """Render scene `index`: background, noise, and non-overlapping dim blobs.

    The output is fully determined by (cfg.seed, index). Targets that cannot
    be placed without overlap after bounded retries are dropped, so the label
    count can fall short of the drawn count.
    """
    rng = np.random.default_rng((cfg.seed, index))
    s = cfg.img_size
    img = _background(cfg, rng)
    ys, xs = np.mgrid[0:s, 0:s].astype(np.float64)

    n_targets = int(rng.integers(cfg.targets_per_image[0], cfg.targets_per_image[1] + 1))
    gts, placed = [], []
    for _ in range(n_targets):
        for _attempt in range(50):
            size = float(rng.uniform(*cfg.target_size))
            amp = float(rng.uniform(*cfg.target_intensity))
            margin = size / 2 + 1.0
            # centers snap to the pixel lattice so the peak pixel carries the
            # full configured contrast even for 2 px blobs
            cx = float(np.rint(rng.uniform(margin, s - margin)))
            cy = float(np.rint(rng.uniform(margin, s - margin)))
            half = size / 2
            rect = (cx - half, cy - half, cx + half, cy + half)
            if any(
                rect[0] < r[2] and r[0] < rect[2] and rect[1] < r[3] and r[1] < rect[3]
                for r in placed
            ):
                continue
            placed.append(rect)
            sigma = size / 6.0  # box side is the 3-sigma extent on both sides
            img += _gaussian_bump(xs, ys, cx, cy, sigma, amp)
            x0, y0 = max(rect[0], 0.0), max(rect[1], 0.0)
            x1, y1 = min(rect[2], float(s)), min(rect[3], float(s))
            box = BBox((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0)
            gts.append(GroundTruth(box, cfg.class_of(size)))
            break
    if cfg.noise_sigma > 0:
        img += rng.normal(0.0, cfg.noise_sigma, size=img.shape)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)[None]
    return Sample(Tensor(img), gts, f"{index:06d}")


# ---------------------------------------------------------------------------
# on-disk datasets: images/<id>.pgm, labels/<id>.txt, classes.txt
# ---------------------------------------------------------------------------


def write_dataset(samples: list, out_dir: str, class_names: list) -> None:
    img_dir = os.path.join(out_dir, "images")
    lbl_dir = os.path.join(out_dir, "labels")
    os.makedirs(img_dir, exist_ok=True)
    os.makedirs(lbl_dir, exist_ok=True)
    for sample in samples:
        h, w = sample.image_size
        save_image(sample.image, os.path.join(img_dir, f"{sample.id}.pgm"))
        save_labels(sample.gts, os.path.join(lbl_dir, f"{sample.id}.txt"), w, h)
    with open(os.path.join(out_dir, "classes.txt"), "w", encoding="ascii") as fh:
        fh.write("\n".join(class_names) + "\n")


def read_class_names(dataset_dir: str) -> list:
    with open(os.path.join(dataset_dir, "classes.txt"), "r", encoding="ascii") as fh:
        return [line.strip() for line in fh if line.strip()]


def _clip_to_image(gt: GroundTruth, w: int, h: int) -> GroundTruth:
    x0, y0, x1, y1 = gt.bbox.corners()
    x0, y0 = max(x0, 0.0), max(y0, 0.0)
    x1, y1 = min(x1, float(w)), min(y1, float(h))
    return GroundTruth(BBox((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0), gt.class_id)


def read_dataset(dataset_dir: str, ids: list = None) -> list:
    """Load samples from the directory layout written by write_dataset.

    Boxes are clipped to the image rectangle to absorb the label file's
    fixed-point quantization.
    """
    img_dir = os.path.join(dataset_dir, "images")
    lbl_dir = os.path.join(dataset_dir, "labels")
    if ids is None:
        ids = sorted(os.path.splitext(f)[0] for f in os.listdir(img_dir) if f.endswith(".pgm"))
    samples = []
    for sid in ids:
        image = load_image(os.path.join(img_dir, f"{sid}.pgm"))
        h, w = image.data.shape[1], image.data.shape[2]
        gts = load_labels(os.path.join(lbl_dir, f"{sid}.txt"), w, h)
        gts = [_clip_to_image(g, w, h) for g in gts]
        samples.append(Sample(image, gts, sid))
    return samples


def generate_dataset(cfg: SynthConfig, count: int, out_dir: str) -> list:
    """Render `count` scenes and write them; returns the sample ids."""
    if count <= 0:
        raise ValueError(f"count must be positive, got {count}")
    samples = [synth_scene(cfg, i) for i in range(count)]
    write_dataset(samples, out_dir, cfg.class_names())
    return [s.id for s in samples]

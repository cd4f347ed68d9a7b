"""Sequence I/O, patch cropping, pair sampling, and the synthetic generator.

On-disk sequence layout (all integers little-endian where binary):

    <seq>/frames/%08d.pgm   binary PGM P5, 8-bit single channel
                            (PNG is also accepted on read, luminance-converted)
    <seq>/groundtruth.txt   one "x,y,w,h" ASCII line per frame, LF-terminated
    <seq>/meta.txt          "class_id=<int>" and "domain=<grayscale|tir>" lines

Boxes are (x, y, w, h) in pixels with a top-left origin and may extend past
the frame; every consumer clips on use.  Crops are mean-filled outside the
frame, which keeps white-hot imagery free of artificial cold borders.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass
from typing import Iterator, NamedTuple

import numpy as np

from .errors import FormatError, InputError
from .rng import Rng

EXEMPLAR_SIZE = 127
SEARCH_SIZE = 255
CONTEXT_AMOUNT = 0.5
STRIDE = 8
JITTER_PX = 8


@dataclass
class SequenceRecord:
    name: str
    frames: list
    boxes: np.ndarray            # (n, 4) float64, (x, y, w, h)
    class_id: int
    source_domain: str = "grayscale"

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64)
        if len(self.frames) != len(self.boxes):
            raise FormatError(
                f"{self.name}: {len(self.frames)} frames vs {len(self.boxes)} boxes"
            )
        if len(self.frames) and (self.boxes[:, 2:] <= 0).any():
            raise InputError(f"{self.name}: boxes need positive width/height")
        if self.source_domain not in ("grayscale", "tir"):
            raise FormatError(f"unknown domain {self.source_domain!r}")

    def __len__(self) -> int:
        return len(self.frames)


class SamplePair(NamedTuple):
    exemplar: np.ndarray         # (1, 1, 127, 127) float32 in [0, 1]
    search: np.ndarray           # (1, 1, 255, 255) float32 in [0, 1]
    class_id: int
    displacement: tuple          # ground-truth offset in response cells (di, dj)


# ------------------------------------------------------------------ pgm/png


def write_pgm(path: str, image: np.ndarray) -> None:
    img = np.asarray(image)
    if img.ndim != 2 or img.dtype != np.uint8:
        raise InputError(f"PGM writer needs a 2-D uint8 array, got {img.dtype} {img.shape}")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(b"P5"):
        raise FormatError(f"{path}: not a binary PGM (P5) file")
    # header = magic, width, height, maxval; comments allowed between tokens
    tokens, pos = [], 2
    while len(tokens) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PGM header")
        tokens.append(data[start:pos])
    w, h, maxval = (int(t) for t in tokens)
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit PGM supported, maxval {maxval}")
    pos += 1  # single whitespace after maxval
    raster = data[pos:pos + w * h]
    if len(raster) != w * h:
        raise FormatError(f"{path}: raster truncated at byte {pos + len(raster)}")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w)


def read_frame(path: str) -> np.ndarray:
    """Read a PGM or PNG frame as 2-D uint8, luminance-converting color."""
    if path.endswith(".pgm"):
        return read_pgm(path)
    from PIL import Image

    with Image.open(path) as img:
        return np.asarray(img.convert("L"))


# ------------------------------------------------------------ sequence i/o


def save_sequence(record: SequenceRecord, out_dir: str) -> None:
    frames_dir = os.path.join(out_dir, "frames")
    os.makedirs(frames_dir, exist_ok=True)
    for i, frame in enumerate(record.frames):
        write_pgm(os.path.join(frames_dir, f"{i:08d}.pgm"), frame)
    with open(os.path.join(out_dir, "groundtruth.txt"), "w") as fh:
        for box in record.boxes:
            fh.write(",".join(repr(float(v)) for v in box) + "\n")
    with open(os.path.join(out_dir, "meta.txt"), "w") as fh:
        fh.write(f"class_id={record.class_id}\n")
        fh.write(f"domain={record.source_domain}\n")


def load_sequence(path: str) -> SequenceRecord:
    frames_dir = os.path.join(path, "frames")
    if not os.path.isdir(frames_dir):
        raise FormatError(f"{path}: missing frames/ directory")
    entries = []
    for fname in os.listdir(frames_dir):
        m = re.fullmatch(r"(\d+)\.(pgm|png)", fname)
        if m:
            entries.append((int(m.group(1)), fname))
    if not entries:
        raise FormatError(f"{path}: no frames found")
    entries.sort()
    indices = [idx for idx, _ in entries]
    if indices != list(range(indices[0], indices[0] + len(indices))):
        raise FormatError(f"{path}: frame names not consecutive: {indices[:5]}...")

    frames = [read_frame(os.path.join(frames_dir, fname)) for _, fname in entries]

    gt_path = os.path.join(path, "groundtruth.txt")
    boxes = []
    with open(gt_path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 4:
                raise FormatError(f"{gt_path}:{lineno}: expected x,y,w,h")
            boxes.append([float(p) for p in parts])
    if len(boxes) < len(frames):
        raise FormatError(
            f"{gt_path}: missing box line {len(boxes) + 1} ({len(frames)} frames)"
        )
    if len(boxes) > len(frames):
        raise FormatError(f"{gt_path}: {len(boxes)} boxes for {len(frames)} frames")

    class_id, domain = 0, "grayscale"
    meta_path = os.path.join(path, "meta.txt")
    if os.path.exists(meta_path):
        with open(meta_path) as fh:
            for line in fh:
                line = line.strip()
                if line.startswith("class_id="):
                    class_id = int(line.split("=", 1)[1])
                elif line.startswith("domain="):
                    domain = line.split("=", 1)[1]
    return SequenceRecord(name=os.path.basename(os.path.normpath(path)),
                          frames=frames, boxes=np.array(boxes),
                          class_id=class_id, source_domain=domain)


# ---------------------------------------------------------------- cropping


def crop_window(frame: np.ndarray, center: tuple, side: float, out_size: int) -> np.ndarray:
    """Bilinear square crop around a float center, mean-filled off-frame.

    Output pixel i samples source coordinate left + (i + 0.5) * side/out - 0.5,
    so an integer-aligned crop with side == out_size is the identity.
    Returns (out_size, out_size) float64 in [0, 1].
    """
    img = np.asarray(frame, dtype=np.float64) / 255.0
    h, w = img.shape
    fill = float(img.mean())
    cy, cx = float(center[0]), float(center[1])
    scale = side / out_size
    coords = (np.arange(out_size) + 0.5) * scale - 0.5
    ys = cy - side / 2.0 + coords
    xs = cx - side / 2.0 + coords

    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    fy = ys - y0
    fx = xs - x0

    def tap(yi, xi):
        yc = np.clip(yi, 0, h - 1)
        xc = np.clip(xi, 0, w - 1)
        vals = img[yc[:, None], xc[None, :]]
        inside = ((yi >= 0) & (yi < h))[:, None] & ((xi >= 0) & (xi < w))[None, :]
        return np.where(inside, vals, fill)

    top = tap(y0, x0) * (1 - fx)[None, :] + tap(y0, x0 + 1) * fx[None, :]
    bot = tap(y0 + 1, x0) * (1 - fx)[None, :] + tap(y0 + 1, x0 + 1) * fx[None, :]
    return top * (1 - fy)[:, None] + bot * fy[:, None]


def patch_side(box, context_amount: float = CONTEXT_AMOUNT) -> float:
    """Context-padded square side sqrt((w + 2p)(h + 2p)), p = c*(w+h)/2."""
    w, h = float(box[2]), float(box[3])
    p = context_amount * (w + h) / 2.0
    return float(np.sqrt((w + 2 * p) * (h + 2 * p)))


def crop_patch(frame: np.ndarray, box, context_amount: float = CONTEXT_AMOUNT,
               out_size: int = EXEMPLAR_SIZE) -> np.ndarray:
    """Context crop of a box, resized to (1, 1, out, out) in [0, 1]."""
    box = np.asarray(box, dtype=np.float64)
    if out_size < 8:
        raise InputError(f"out_size must be >= 8, got {out_size}")
    if box[2] <= 0 or box[3] <= 0:
        raise InputError(f"degenerate box {box.tolist()}")
    cx = box[0] + box[2] / 2.0
    cy = box[1] + box[3] / 2.0
    side = patch_side(box, context_amount)
    patch = crop_window(frame, (cy, cx), side, out_size)
    return patch[None, None].astype(np.float64)


# ---------------------------------------------------------------- sampling


def sample_pair(dataset, rng: Rng, max_gap: int = 100) -> SamplePair:
    """One exemplar/search training pair with jittered search center."""
    if not dataset:
        raise InputError("empty dataset")
    for _ in range(100):
        record = dataset[rng.randint(len(dataset))]
        if len(record) >= 2:
            break
    else:
        raise InputError("no sequence with >= 2 frames after 100 draws")

    n = len(record)
    i = rng.randint(n)
    lo = max(0, i - max_gap)
    hi = min(n - 1, i + max_gap)
    j = lo + rng.randint(hi - lo + 1)
    if j == i:
        j = hi if i < hi else lo

    ex = crop_patch(record.frames[i], record.boxes[i], out_size=EXEMPLAR_SIZE)

    box = record.boxes[j]
    cx = box[0] + box[2] / 2.0
    cy = box[1] + box[3] / 2.0
    jy = rng.randint(2 * JITTER_PX + 1) - JITTER_PX
    jx = rng.randint(2 * JITTER_PX + 1) - JITTER_PX
    side_z = patch_side(box)
    side_y = side_z * SEARCH_SIZE / EXEMPLAR_SIZE
    patch = crop_window(record.frames[j], (cy + jy, cx + jx), side_y, SEARCH_SIZE)

    # the target sits at -jitter from the crop center; convert to cells
    px_per_src = SEARCH_SIZE / side_y
    di = int(np.rint(-jy * px_per_src / STRIDE))
    dj = int(np.rint(-jx * px_per_src / STRIDE))
    return SamplePair(exemplar=ex.astype(np.float32),
                      search=patch[None, None].astype(np.float32),
                      class_id=record.class_id, displacement=(di, dj))


def mixed_iterator(a, b, weights, rng: Rng) -> Iterator[SamplePair]:
    """Endless stream drawing domain a with probability wa/(wa+wb)."""
    wa, wb = float(weights[0]), float(weights[1])
    if wa < 0 or wb < 0 or wa + wb == 0:
        raise InputError(f"bad mixture weights ({wa}, {wb})")
    if not a and not b:
        raise InputError("both domains empty")
    p_a = wa / (wa + wb)
    while True:
        take_a = rng.uniform() < p_a
        pool = a if take_a else b
        if not pool:
            pool = b if take_a else a
        yield sample_pair(pool, rng)


# ---------------------------------------------------------------- synthesis


@dataclass
class SynthSpec:
    frames: int = 100
    size: int = 256
    target_size: int = 24
    n_distractors: int = 0
    noise_std: float = 2.0
    bg_mean: float = 40.0
    fg_mean: float = 220.0
    speed: float = 3.0           # linear drift, px/frame
    wobble: float = 10.0         # sinusoidal amplitude, px
    textured_target: bool = True
    class_id: int = 0
    domain: str = "tir"

    def __post_init__(self):
        if self.frames < 2:
            raise InputError(f"need >= 2 frames, got {self.frames}")
        if self.size < 64:
            raise InputError(f"need size >= 64, got {self.size}")


def _trajectory(spec: SynthSpec, rng: Rng, n: int):
    """Linear + sinusoidal center path kept >= target_size from all borders."""
    margin = 2 * spec.target_size
    lo, hi = margin, spec.size - margin
    span = hi - lo
    if span <= 0:
        raise InputError(
            f"size {spec.size} leaves no room for target_size {spec.target_size} "
            f"plus safety margins"
        )
    x0 = lo + rng.uniform() * span
    y0 = lo + rng.uniform() * span
    angle = rng.uniform() * 2 * np.pi
    vx, vy = spec.speed * np.cos(angle), spec.speed * np.sin(angle)
    phase = rng.uniform() * 2 * np.pi
    period = 40.0 + rng.uniform() * 40.0
    t = np.arange(n, dtype=np.float64)
    xs = x0 + vx * t + spec.wobble * np.sin(2 * np.pi * t / period + phase)
    ys = y0 + vy * t + spec.wobble * np.cos(2 * np.pi * t / period + phase)
    # reflect off the safety margin instead of clipping, keeps motion smooth
    xs = lo + np.abs((xs - lo) % (2 * span) - span)
    ys = lo + np.abs((ys - lo) % (2 * span) - span)
    return xs, ys


def _paint_square(img: np.ndarray, cx: float, cy: float, side: int,
                  tile: np.ndarray) -> None:
    """Blend a side x side tile onto img at a float center, bilinear split.

    The float offset is distributed over the four neighbouring integer
    placements so the painted mass moves smoothly with the trajectory.
    """
    h, w = img.shape
    y = cy - side / 2.0
    x = cx - side / 2.0
    y0, x0 = int(np.floor(y)), int(np.floor(x))
    fy, fx = y - y0, x - x0
    val = np.zeros_like(img)
    alpha = np.zeros_like(img)
    for dy, wy in ((0, 1 - fy), (1, fy)):
        for dx, wx in ((0, 1 - fx), (1, fx)):
            weight = wy * wx
            if weight == 0.0:
                continue
            ys, xs = y0 + dy, x0 + dx
            ye, xe = ys + side, xs + side
            cys, cxs = max(ys, 0), max(xs, 0)
            cye, cxe = min(ye, h), min(xe, w)
            if cys >= cye or cxs >= cxe:
                continue
            sub = tile[cys - ys:cye - ys, cxs - xs:cxe - xs]
            val[cys:cye, cxs:cxe] += weight * sub
            alpha[cys:cye, cxs:cxe] += weight
    # composite once so interior coverage is exactly 1 at any subpixel offset
    img *= 1.0 - alpha
    img += val


def _target_tile(spec: SynthSpec, textured: bool) -> np.ndarray:
    """Uniform or checker-textured tile with mean exactly fg_mean."""
    side = spec.target_size
    if not textured:
        return np.full((side, side), spec.fg_mean, dtype=np.float64)
    cell = max(2, side // 4)
    ii = (np.arange(side) // cell)[:, None]
    jj = (np.arange(side) // cell)[None, :]
    checker = ((ii + jj) % 2) * 2.0 - 1.0
    tile = spec.fg_mean + 30.0 * checker
    return tile - (tile.mean() - spec.fg_mean)


def _box_iou(a, b) -> float:
    ax1, ay1, ax2, ay2 = a[0], a[1], a[0] + a[2], a[1] + a[3]
    bx1, by1, bx2, by2 = b[0], b[1], b[0] + b[2], b[1] + b[3]
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = a[2] * a[3] + b[2] * b[3] - inter
    return inter / union if union > 0 else 0.0


def synth_sequence(spec: SynthSpec, seed: int) -> SequenceRecord:
    """White-hot synthetic sequence: bright target, optional distractors.

    The target carries a fixed checker texture (mean fg_mean); distractors
    share the mean intensity and size but stay flat, so only fine-grained
    structure separates them.  Distractor trajectories are re-drawn until
    no frame overlaps the target by IoU > 0.2.
    """
    rng = Rng(seed)
    n = spec.frames
    xs, ys = _trajectory(spec, rng, n)

    distractors = []
    for k in range(spec.n_distractors):
        for attempt in range(200):
            dxs, dys = _trajectory(spec, rng, n)
            ok = True
            for t in range(n):
                a = (xs[t] - spec.target_size / 2, ys[t] - spec.target_size / 2,
                     spec.target_size, spec.target_size)
                b = (dxs[t] - spec.target_size / 2, dys[t] - spec.target_size / 2,
                     spec.target_size, spec.target_size)
                if _box_iou(a, b) > 0.2:
                    ok = False
                    break
            if ok:
                distractors.append((dxs, dys))
                break
        else:
            raise InputError(
                f"could not place distractor {k + 1} without overlap after 200 tries"
            )

    target_tile = _target_tile(spec, spec.textured_target)
    flat_tile = _target_tile(spec, False)
    frames, boxes = [], []
    for t in range(n):
        img = np.full((spec.size, spec.size), spec.bg_mean, dtype=np.float64)
        if spec.noise_std > 0:
            img += rng.normal_array((spec.size, spec.size)) * spec.noise_std
        for dxs, dys in distractors:
            _paint_square(img, dxs[t], dys[t], spec.target_size, flat_tile)
        _paint_square(img, xs[t], ys[t], spec.target_size, target_tile)
        frames.append(np.clip(np.rint(img), 0, 255).astype(np.uint8))
        boxes.append([xs[t] - spec.target_size / 2.0, ys[t] - spec.target_size / 2.0,
                      float(spec.target_size), float(spec.target_size)])
    return SequenceRecord(name=f"synth-{seed}", frames=frames,
                          boxes=np.array(boxes), class_id=spec.class_id,
                          source_domain=spec.domain)

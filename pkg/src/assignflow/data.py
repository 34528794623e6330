"""Images, prototypes, distances, synthetic benchmarks and labeling metrics.

Pixels are stored node-major: an image of shape (height, width) with d
channels keeps its values in a (height*width, d) float array in [0, 1],
row r and column col mapping to node r*width + col.  This matches the node
ordering of the grid graphs and discrete operators.

File formats: binary PPM (P6, maxval 255) is always available and is
byte-stable under a read/write round trip; PNG works when Pillow is
installed.  Labelings can be rendered to images through prototype colors
and exported as CSV of integer indices.
"""

from __future__ import annotations

import colorsys
import csv
from dataclasses import dataclass

import numpy as np

from .errors import ImageFormatError

Array = np.ndarray

__all__ = [
    "ImageBuffer",
    "PrototypeSet",
    "distance_matrix",
    "synth_partition",
    "round_to_labeling",
    "labeling_error",
    "read_image",
    "write_image",
    "render_labeling",
    "write_prototypes_csv",
    "read_prototypes_csv",
    "write_labeling_csv",
    "read_labeling_csv",
]


@dataclass(frozen=True)
class ImageBuffer:
    """Pixel features in [0, 1], node-major."""

    height: int
    width: int
    pixels: Array

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ValueError(f"bad image dimensions {self.height}x{self.width}")
        p = np.asarray(self.pixels, dtype=float)
        object.__setattr__(self, "pixels", p)
        if p.ndim != 2 or p.shape[0] != self.height * self.width:
            raise ValueError(
                f"pixel array shape {p.shape} does not match {self.height}x{self.width}"
            )
        if not np.all(np.isfinite(p)):
            raise ValueError("pixels must be finite")


@dataclass(frozen=True)
class PrototypeSet:
    """Label feature vectors, pairwise distinct."""

    colors: Array

    def __post_init__(self):
        c = np.asarray(self.colors, dtype=float)
        object.__setattr__(self, "colors", c)
        if c.ndim != 2 or c.shape[0] < 2:
            raise ValueError(f"need at least 2 prototypes, got shape {c.shape}")
        for i in range(c.shape[0]):
            for j in range(i + 1, c.shape[0]):
                if np.array_equal(c[i], c[j]):
                    raise ValueError(f"prototypes {i} and {j} coincide")

    @property
    def c(self) -> int:
        return self.colors.shape[0]


def distance_matrix(img: ImageBuffer, protos: PrototypeSet, metric: str = "euclidean") -> Array:
    """Per-pixel Euclidean distances to each prototype, an (n, c) matrix."""
    if metric != "euclidean":
        raise ValueError(f"unsupported metric {metric!r}")
    if img.pixels.shape[1] != protos.colors.shape[1]:
        raise ValueError("pixel and prototype feature dimensions differ")
    diff = img.pixels[:, None, :] - protos.colors[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=2))


def _hue_palette(c: int, rng: np.random.Generator) -> Array:
    # evenly spaced hues with a random phase: pairwise distinct, well separated
    offset = rng.random()
    cols = [
        colorsys.hsv_to_rgb((offset + j / c) % 1.0, 0.85, 0.95) for j in range(c)
    ]
    return np.array(cols)


def synth_partition(height: int, width: int, c: int, seed: int, noise_rate: float):
    """Random Voronoi partition of the grid with label-color pixels and noise.

    The c cell sites are collinear: they share one column and take
    stratified random heights, so the partition is a stack of horizontal
    bands, the Voronoi diagram of stacked sites.  Junction-free cell
    interfaces keep the benchmark well conditioned: every solver in the
    package reaches a stationary labeling on it instead of chasing slowly
    wandering triple points.  Each pixel takes the label of its nearest
    site (ties to the lowest index); pixel colors are the label's prototype
    color, independently replaced by a uniformly random prototype color
    with probability noise_rate.  Deterministic given seed.

    Returns (ImageBuffer, ground-truth Labeling, PrototypeSet).
    """
    n = height * width
    if c < 2 or 2 * c > height:
        raise ValueError(
            f"label count c={c} needs a grid at least 2c tall, got height {height}"
        )
    if not 0.0 <= noise_rate <= 1.0:
        raise ValueError(f"noise_rate must be in [0, 1], got {noise_rate}")
    rng = np.random.default_rng(seed)

    # one site per horizontal stratum; the interior jitter window keeps
    # consecutive sites at least half a stratum apart, so no band is empty
    site_y = (np.arange(c) + rng.uniform(0.25, 0.75, size=c)) * (height / c)
    ys = np.arange(n) // width + 0.5
    truth = np.argmin(np.abs(ys[:, None] - site_y[None, :]), axis=1)

    colors = _hue_palette(c, rng)
    noisy = np.where(
        rng.random(n) < noise_rate, rng.integers(0, c, size=n), truth
    )
    img = ImageBuffer(height=height, width=width, pixels=colors[noisy])
    return img, truth, PrototypeSet(colors=colors)


def round_to_labeling(S: Array) -> Array:
    """Per-row argmax; ties resolve to the lowest label index."""
    S = np.asarray(S)
    if S.ndim != 2:
        raise ValueError(f"expected an (n, c) matrix, got shape {S.shape}")
    return np.argmax(S, axis=1)


def labeling_error(a: Array, b: Array) -> float:
    """Fraction of nodes on which the labelings disagree."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"labeling shapes differ: {a.shape} vs {b.shape}")
    return float(np.mean(a != b))


def render_labeling(labeling: Array, protos: PrototypeSet, height: int, width: int) -> ImageBuffer:
    """Color each node with its label's prototype color."""
    labeling = np.asarray(labeling)
    if np.min(labeling) < 0 or np.max(labeling) >= protos.c:
        raise ValueError("labeling indices out of prototype range")
    return ImageBuffer(height=height, width=width, pixels=protos.colors[labeling])


def _parse_ppm_tokens(buf: bytes, count: int):
    """First `count` whitespace-separated header tokens, skipping # comments.

    Returns the tokens and the offset one whitespace byte past the last one,
    where the binary payload starts.
    """
    tokens = []
    pos = 0
    while len(tokens) < count:
        if pos >= len(buf):
            raise ImageFormatError("unexpected end of header")
        ch = buf[pos : pos + 1]
        if ch in b" \t\r\n":
            pos += 1
        elif ch == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in b"\r\n":
                pos += 1
        else:
            start = pos
            while pos < len(buf) and buf[pos : pos + 1] not in b" \t\r\n#":
                pos += 1
            tokens.append(buf[start:pos])
    if pos >= len(buf) or buf[pos : pos + 1] not in b" \t\r\n":
        raise ImageFormatError("header not terminated by whitespace")
    return tokens, pos + 1


def read_image(path) -> ImageBuffer:
    """Read a binary PPM (P6) file, or a PNG when Pillow is available."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:2] == b"P6":
        tokens, offset = _parse_ppm_tokens(buf, 4)
        try:
            width, height, maxval = (int(t) for t in tokens[1:])
        except ValueError as exc:
            raise ImageFormatError(f"bad header field: {exc}") from exc
        if width < 1 or height < 1:
            raise ImageFormatError(f"bad dimensions {width}x{height}")
        if not 0 < maxval < 256:
            raise ImageFormatError(f"unsupported maxval {maxval}")
        payload = buf[offset : offset + 3 * width * height]
        if len(payload) != 3 * width * height:
            raise ImageFormatError(
                f"expected {3 * width * height} payload bytes, found {len(payload)}"
            )
        raw = np.frombuffer(payload, dtype=np.uint8).astype(float) / maxval
        return ImageBuffer(height=height, width=width, pixels=raw.reshape(-1, 3))
    if buf[:8] == b"\x89PNG\r\n\x1a\n":
        return _read_png(path)
    raise ImageFormatError("unrecognized image format (want P6 PPM or PNG)")


def _read_png(path) -> ImageBuffer:
    try:
        from PIL import Image
    except ImportError as exc:
        raise ImageFormatError("PNG support needs the Pillow package") from exc
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=float) / 255.0
    height, width = arr.shape[:2]
    return ImageBuffer(height=height, width=width, pixels=arr.reshape(-1, 3))


def _quantize(img: ImageBuffer) -> Array:
    vals = np.clip(np.rint(img.pixels * 255.0), 0, 255).astype(np.uint8)
    if vals.shape[1] == 1:
        vals = np.repeat(vals, 3, axis=1)
    if vals.shape[1] != 3:
        raise ValueError(f"cannot write {vals.shape[1]}-channel pixels")
    return vals


def write_image(path, img: ImageBuffer) -> None:
    """Write a binary PPM (P6, maxval 255); .png paths go through Pillow."""
    path = str(path)
    if path.lower().endswith(".png"):
        _write_png(path, img)
        return
    vals = _quantize(img)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{img.width} {img.height}\n255\n".encode("ascii"))
        fh.write(vals.tobytes())


def _write_png(path, img: ImageBuffer) -> None:
    try:
        from PIL import Image
    except ImportError as exc:
        raise ImageFormatError("PNG support needs the Pillow package") from exc
    vals = _quantize(img).reshape(img.height, img.width, 3)
    Image.fromarray(vals, mode="RGB").save(path)


def write_prototypes_csv(path, protos: PrototypeSet) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index"] + [f"ch{j}" for j in range(protos.colors.shape[1])])
        for i, row in enumerate(protos.colors):
            writer.writerow([i] + [repr(float(v)) for v in row])


def read_prototypes_csv(path) -> PrototypeSet:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[0] != "index":
            raise ImageFormatError("prototype CSV missing its header row")
        rows = [[float(v) for v in row[1:]] for row in reader if row]
    if not rows:
        raise ImageFormatError("prototype CSV has no data rows")
    return PrototypeSet(colors=np.array(rows))


def write_labeling_csv(path, labeling: Array) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["node", "label"])
        for i, lab in enumerate(np.asarray(labeling).ravel()):
            writer.writerow([i, int(lab)])


def read_labeling_csv(path) -> Array:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:2] != ["node", "label"]:
            raise ImageFormatError("labeling CSV missing its header row")
        labs = [int(row[1]) for row in reader if row]
    return np.array(labs, dtype=np.int64)

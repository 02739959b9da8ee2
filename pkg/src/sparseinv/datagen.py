"""Synthetic data and preprocessing.

Generators are pure functions of (config, random generator): identical
seeds give bitwise-identical outputs.  Images use (row, col) indexing;
where an (x, y) convention appears, x runs along columns and y along
rows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

__all__ = [
    "ToyConfig",
    "PatchSequence",
    "line_templates",
    "gen_toy_patch",
    "toy_patches",
    "gaussian_kernel2d",
    "local_mean_subtract",
    "contrast_normalize",
    "preprocess",
    "extract_sequence",
    "edge_function",
    "edge_stimulus",
    "gen_texture_image",
    "read_pgm",
    "write_pgm",
    "write_patch_csv",
]

_ORIENTATION_DEGREES = (0, 45, 90, 135)


@dataclass(frozen=True)
class ToyConfig:
    """The line-world distribution: one orientation per patch, each of its
    parallel lines present independently with ``line_prob``."""

    size: int = 20
    n_orientations: int = 4
    n_positions: int = 10
    line_prob: float = 0.2

    def __post_init__(self):
        if self.size < 4:
            raise ValueError("patch size must be at least 4")
        if self.n_orientations != 4:
            raise ValueError(
                "line rendering is defined for the 4 canonical orientations "
                f"(0/45/90/135 degrees), got n_orientations={self.n_orientations}"
            )
        if not 2 <= self.n_positions <= self.size:
            raise ValueError("n_positions must lie between 2 and the patch size")
        if not 0.0 < self.line_prob < 1.0:
            raise ValueError("line_prob must lie in (0, 1)")


@dataclass(frozen=True)
class PatchSequence:
    """A short stack of same-size frames plus the (dx, dy) shift per frame."""

    frames: np.ndarray
    displacement: tuple

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 3:
            raise ValueError(f"frames must be (n_t, h, w), got ndim={frames.ndim}")
        if not np.all(np.isfinite(frames)):
            raise ValueError("frames must be finite")
        object.__setattr__(self, "frames", frames)

    @property
    def n_frames(self):
        return self.frames.shape[0]


def line_templates(cfg):
    """Render the line dictionary: (n_orientations, n_positions, size, size).

    Lines are 1 pixel wide with value 1.  Horizontal/vertical offsets are
    round((p + 0.5) * size / n_positions); diagonals use the same spacing
    on the (row +/- col) index, centered so every line crosses a decent
    part of the patch.
    """
    s = cfg.size
    offs = [int(round((p + 0.5) * s / cfg.n_positions)) for p in range(cfg.n_positions)]
    diag = [int(round(s / 2 + (p + 0.5) * s / cfg.n_positions)) for p in range(cfg.n_positions)]
    rows, cols = np.indices((s, s))
    out = np.zeros((cfg.n_orientations, cfg.n_positions, s, s))
    for p in range(cfg.n_positions):
        out[0, p][rows == offs[p]] = 1.0            # horizontal
        out[1, p][rows + cols == diag[p]] = 1.0     # 45 degrees
        out[2, p][cols == offs[p]] = 1.0            # vertical
        out[3, p][rows - cols == diag[p] - s] = 1.0  # 135 degrees
    return out


def gen_toy_patch(cfg, rng):
    """Draw one line-world patch.

    Picks an orientation uniformly, then includes each of its lines
    independently with ``cfg.line_prob``.  Returns (patch, orientation,
    line mask).
    """
    templates = line_templates(cfg)
    orientation = int(rng.integers(cfg.n_orientations))
    mask = rng.random(cfg.n_positions) < cfg.line_prob
    patch = templates[orientation][mask].sum(axis=0) if mask.any() else np.zeros((cfg.size, cfg.size))
    return patch, orientation, mask


def toy_patches(cfg, n, rng):
    """Draw ``n`` line-world patches in bulk.

    Returns (patches, orientations, masks) with patches of shape
    (n, size, size).  Orientations are drawn first, then all line masks,
    so the stream differs from n calls to :func:`gen_toy_patch`.
    """
    templates = line_templates(cfg)
    flat = templates.reshape(cfg.n_orientations, cfg.n_positions, -1)
    orientations = rng.integers(0, cfg.n_orientations, size=n)
    masks = rng.random((n, cfg.n_positions)) < cfg.line_prob
    patches = np.zeros((n, cfg.size * cfg.size))
    for o in range(cfg.n_orientations):
        idx = orientations == o
        patches[idx] = masks[idx].astype(np.float64) @ flat[o]
    return patches.reshape(n, cfg.size, cfg.size), orientations, masks


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------


def gaussian_kernel2d(width=9):
    """Normalized Gaussian kernel on a width x width window, sigma = width / 4."""
    if width < 1 or width % 2 == 0:
        raise ValueError("kernel width must be a positive odd integer")
    sigma = width / 4.0
    r = (width - 1) // 2
    d = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-(d * d) / (2.0 * sigma * sigma))
    k = np.outer(g, g)
    return k / k.sum()


def local_mean_subtract(image, width=9):
    """Subtract the Gaussian-weighted local mean from every pixel."""
    image = np.asarray(image, dtype=np.float64)
    k = gaussian_kernel2d(width)
    return image - ndimage.correlate(image, k, mode="reflect")


def contrast_normalize(image, width=9, cutoff_scale=0.01):
    """Divide every pixel by the local Gaussian-weighted standard deviation.

    The divisor is floored at cutoff_scale times the image's global
    standard deviation so flat regions do not blow up.
    """
    image = np.asarray(image, dtype=np.float64)
    k = gaussian_kernel2d(width)
    m = ndimage.correlate(image, k, mode="reflect")
    msq = ndimage.correlate(image * image, k, mode="reflect")
    sd = np.sqrt(np.clip(msq - m * m, 0.0, None))
    cutoff = max(cutoff_scale * float(image.std()), 1e-12)
    return image / np.maximum(sd, cutoff)


def preprocess(image, width=9, cutoff_scale=0.01):
    """Local mean removal followed by local contrast normalization."""
    return contrast_normalize(local_mean_subtract(image, width), width, cutoff_scale)


# ---------------------------------------------------------------------------
# translating windows
# ---------------------------------------------------------------------------


def extract_sequence(image, window=20, n_t=3, mag_range=(1.0, 2.0), rng=None,
                     cumulative=True):
    """Cut ``n_t`` frames from a window gliding across ``image``.

    A direction theta ~ U[0, 2pi) and magnitude m ~ U[mag_range] are
    drawn; frame t's window origin is the base plus round(t * m * (cos
    theta, sin theta)) pixels (or a single fixed offset for every later
    frame when ``cumulative`` is false).  The base position is drawn
    uniformly among placements that keep every frame inside the image.
    """
    image = np.asarray(image, dtype=np.float64)
    if rng is None:
        raise ValueError("an explicit random generator is required")
    lo, hi = mag_range
    if lo > hi or lo < 0.0:
        raise ValueError(f"bad magnitude range {mag_range}")
    h, w = image.shape
    if h < window or w < window:
        raise ValueError(f"image {image.shape} smaller than the {window}x{window} window")

    theta = rng.uniform(0.0, 2.0 * np.pi)
    m = rng.uniform(lo, hi)
    dx = m * np.cos(theta)
    dy = m * np.sin(theta)
    steps = np.arange(n_t) if cumulative else (np.arange(n_t) > 0).astype(float)
    off_r = np.round(steps * dy).astype(int)
    off_c = np.round(steps * dx).astype(int)

    r_lo, r_hi = -off_r.min(), h - window - off_r.max()
    c_lo, c_hi = -off_c.min(), w - window - off_c.max()
    if r_lo > r_hi or c_lo > c_hi:
        raise ValueError(
            f"image {image.shape} cannot hold a {window}x{window} window "
            f"travelling up to {hi * (n_t - 1):.1f} pixels"
        )
    base_r = int(rng.integers(r_lo, r_hi + 1))
    base_c = int(rng.integers(c_lo, c_hi + 1))

    frames = np.stack([
        image[base_r + off_r[t]: base_r + off_r[t] + window,
              base_c + off_c[t]: base_c + off_c[t] + window]
        for t in range(n_t)
    ])
    return PatchSequence(frames=frames, displacement=(dx, dy))


# ---------------------------------------------------------------------------
# parametric edge stimulus
# ---------------------------------------------------------------------------


def edge_function(x, y, b, theta, k=1.0):
    """Profile of a mean-subtracted edge at continuous coordinates (x, y).

    v = k * (cos(theta) * x + sin(theta) * y) + k * b, value
    exp(-0.25 v^2) * sin(v); b is the signed distance of the edge from the
    origin along the normal, theta the normal's angle from the x axis.
    """
    if not k > 0.0:
        raise ValueError(f"spatial frequency k must be positive, got {k}")
    v = k * (np.cos(theta) * np.asarray(x) + np.sin(theta) * np.asarray(y)) + k * b
    return np.exp(-0.25 * v * v) * np.sin(v)


def edge_stimulus(b, theta, k=1.0, size=20):
    """Render the edge profile on a size x size pixel grid centered at 0."""
    c = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    xx, yy = np.meshgrid(c, c)
    return edge_function(xx, yy, b, theta, k)


# ---------------------------------------------------------------------------
# synthetic imagery for training
# ---------------------------------------------------------------------------


def gen_texture_image(height, width, rng, n_bars=60, amp_range=(0.5, 1.5),
                      bar_width_range=(0.8, 2.0)):
    """An image made of random oriented bars with Gaussian cross sections.

    Gives locally oriented structure everywhere, a stand-in for natural
    imagery when none is supplied.
    """
    yy, xx = np.indices((height, width)).astype(np.float64)
    img = np.zeros((height, width))
    for _ in range(n_bars):
        theta = rng.uniform(0.0, np.pi)
        px = rng.uniform(0.0, width)
        py = rng.uniform(0.0, height)
        bw = rng.uniform(*bar_width_range)
        amp = rng.uniform(*amp_range)
        if rng.random() < 0.5:
            amp = -amp
        d = np.cos(theta) * (xx - px) + np.sin(theta) * (yy - py)
        img += amp * np.exp(-(d * d) / (2.0 * bw * bw))
    return img


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------


def read_pgm(path):
    """Read a binary (P5) PGM file, 8- or 16-bit, into a float array."""
    with open(path, "rb") as fh:
        data = fh.read()

    tokens = []
    i = 0
    while len(tokens) < 4:
        if i >= len(data):
            raise ValueError(f"{path}: truncated PGM header")
        ch = data[i: i + 1]
        if ch == b"#":
            i = data.index(b"\n", i) + 1
        elif ch.isspace():
            i += 1
        else:
            j = i
            while j < len(data) and not data[j: j + 1].isspace():
                j += 1
            tokens.append(data[i:j])
            i = j
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    width, height, maxval = (int(t) for t in tokens[1:])
    if not 0 < maxval < 65536:
        raise ValueError(f"{path}: bad maxval {maxval}")
    i += 1  # single whitespace after maxval
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    count = width * height
    if len(data) - i < count * dtype.itemsize:
        raise ValueError(
            f"{path}: truncated raster ({len(data) - i} bytes for "
            f"{count * dtype.itemsize} expected)"
        )
    raster = np.frombuffer(data, dtype=dtype, count=count, offset=i)
    return raster.reshape(height, width).astype(np.float64)


def write_pgm(path, image, maxval=255):
    """Write a float image as binary PGM, min-max scaled onto [0, maxval]."""
    image = np.asarray(image, dtype=np.float64)
    lo, hi = float(image.min()), float(image.max())
    scale = (image - lo) / (hi - lo) if hi > lo else np.zeros_like(image)
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    raster = np.round(scale * maxval).astype(dtype)
    header = f"P5\n{image.shape[1]} {image.shape[0]}\n{maxval}\n".encode()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(raster.tobytes())


def write_patch_csv(path, patch):
    """Write one patch as a flat row-major CSV of pixel values."""
    np.savetxt(path, np.asarray(patch, dtype=np.float64).reshape(1, -1),
               delimiter=",", fmt="%.17g")

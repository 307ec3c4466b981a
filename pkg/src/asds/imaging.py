"""Image rasters, patch grids, periodic degradation operators and quality metrics.

Images are 2-D ``float64`` arrays indexed ``[row, col]`` on the nominal
[0, 255] scale. Nothing here clips intensities; clipping happens only when an
image is written to disk, so every operator stays linear.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "PatchGrid",
    "Degradation",
    "IdenticalImagesError",
    "PGMFormatError",
    "as_image",
    "extract_patch",
    "extract_patches",
    "assemble_image",
    "make_kernel",
    "uniform_kernel",
    "gaussian_kernel",
    "delta_kernel",
    "convolve_periodic",
    "correlate_periodic",
    "apply_DH",
    "apply_DH_adjoint",
    "add_noise",
    "psnr",
    "ssim",
    "load_image",
    "save_image",
]


class IdenticalImagesError(ValueError):
    """Raised by :func:`psnr` when the two images are identical (MSE = 0)."""


class PGMFormatError(ValueError):
    """Raised when a file is not a valid 8-bit binary PGM."""


def as_image(img, name="image"):
    """Return ``img`` as a finite 2-D float64 array."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


# ---------------------------------------------------------------------------
# Patch grid

def _anchors(length, patch_size, stride):
    last = length - patch_size
    pos = list(range(0, last + 1, stride))
    if pos[-1] != last:
        pos.append(last)
    return np.asarray(pos, dtype=np.intp)


@dataclass(frozen=True)
class PatchGrid:
    """Overlapping square patches covering an ``height x width`` image.

    Anchors (top-left corners) sit at multiples of ``stride``; when the last
    multiple does not reach the border, one extra anchor is clamped to the
    edge so every pixel is covered. Patches are numbered in row-major order
    of their anchors.
    """

    patch_size: int
    stride: int
    height: int
    width: int
    rows: np.ndarray = field(init=False, repr=False, compare=False)
    cols: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        p, s = self.patch_size, self.stride
        if p < 1:
            raise ValueError("patch_size must be >= 1")
        if not 1 <= s <= p:
            raise ValueError(f"stride must satisfy 1 <= stride <= patch_size, got {s}")
        if self.height < p or self.width < p:
            raise ValueError(
                f"image {self.height}x{self.width} smaller than patch size {p}"
            )
        object.__setattr__(self, "rows", _anchors(self.height, p, s))
        object.__setattr__(self, "cols", _anchors(self.width, p, s))

    @classmethod
    def for_image(cls, img, patch_size, stride):
        h, w = np.shape(img)
        return cls(patch_size, stride, h, w)

    @property
    def shape(self):
        return (self.height, self.width)

    @property
    def n(self):
        """Pixels per patch."""
        return self.patch_size * self.patch_size

    @property
    def patch_count(self):
        return len(self.rows) * len(self.cols)

    def anchor(self, i):
        """Top-left ``(row, col)`` of patch ``i``."""
        if not 0 <= i < self.patch_count:
            raise IndexError(f"patch index {i} out of range [0, {self.patch_count})")
        r, c = divmod(int(i), len(self.cols))
        return int(self.rows[r]), int(self.cols[c])

    def anchors(self):
        """``(N, 2)`` array of all anchors, row-major."""
        rr, cc = np.meshgrid(self.rows, self.cols, indexing="ij")
        return np.stack([rr.ravel(), cc.ravel()], axis=1)

    def centers(self):
        """``(N, 2)`` array of patch center pixels."""
        return self.anchors() + self.patch_size // 2

    def cover_counts(self):
        """Number of patches covering each pixel (the diagonal of sum R_i^T R_i)."""
        p = self.patch_size
        rc = np.zeros(self.height)
        cc = np.zeros(self.width)
        for r in self.rows:
            rc[r:r + p] += 1
        for c in self.cols:
            cc[c:c + p] += 1
        return np.outer(rc, cc)


def _check_grid(img, grid):
    if img.shape != grid.shape:
        raise ValueError(f"image shape {img.shape} does not match grid {grid.shape}")


def extract_patch(img, grid, i):
    """Pixels of patch ``i`` as a row-major vector of length ``grid.n``."""
    img = np.asarray(img, dtype=np.float64)
    _check_grid(img, grid)
    r, c = grid.anchor(i)
    p = grid.patch_size
    return img[r:r + p, c:c + p].ravel().copy()


def extract_patches(img, grid):
    """All patches as an ``(N, n)`` array; row ``i`` is ``extract_patch(img, grid, i)``."""
    img = np.asarray(img, dtype=np.float64)
    _check_grid(img, grid)
    p = grid.patch_size
    win = np.lib.stride_tricks.sliding_window_view(img, (p, p))
    return win[np.ix_(grid.rows, grid.cols)].reshape(grid.patch_count, p * p)


def _accumulate(patches, grid):
    p = grid.patch_size
    stack = patches.reshape(len(grid.rows), len(grid.cols), p, p)
    out = np.zeros(grid.shape)
    for u in range(p):
        ri = grid.rows + u
        for v in range(p):
            # anchors are distinct, so no pixel is hit twice for a fixed (u, v)
            out[np.ix_(ri, grid.cols + v)] += stack[:, :, u, v]
    return out


def assemble_image(patches, grid):
    """Average overlapping patches back into an image.

    Each pixel receives the mean of all patch values that cover it, i.e.
    ``(sum R_i^T R_i)^{-1} sum R_i^T patch_i``.
    """
    patches = np.asarray(patches, dtype=np.float64)
    if patches.shape != (grid.patch_count, grid.n):
        raise ValueError(
            f"expected {grid.patch_count} patches of length {grid.n}, got {patches.shape}"
        )
    return _accumulate(patches, grid) / grid.cover_counts()


def patch_adjoint(image, grid):
    """Adjoint of :func:`assemble_image`: patches of ``image / cover_counts``."""
    return extract_patches(np.asarray(image) / grid.cover_counts(), grid)


# ---------------------------------------------------------------------------
# Kernels

def _normalized(taps):
    return taps / taps.sum()


def delta_kernel():
    return np.ones((1, 1))


def uniform_kernel(size):
    if size < 1 or size % 2 == 0:
        raise ValueError(f"kernel size must be odd and positive, got {size}")
    return np.full((size, size), 1.0 / (size * size))


def default_gaussian_size(sigma):
    """Odd support covering roughly +-4 sigma (25 for sigma=3)."""
    return 2 * math.ceil(4 * sigma) + 1


def gaussian_kernel(sigma, size=None):
    """Sampled isotropic Gaussian on integer offsets, normalized to unit sum."""
    if not sigma > 0:
        raise ValueError(f"gaussian sigma must be positive, got {sigma}")
    if size is None:
        size = default_gaussian_size(sigma)
    if size < 1 or size % 2 == 0:
        raise ValueError(f"kernel size must be odd and positive, got {size}")
    c = size // 2
    d = np.arange(-c, c + 1, dtype=np.float64)
    g = np.exp(-(d[:, None] ** 2 + d[None, :] ** 2) / (2.0 * sigma * sigma))
    return _normalized(g)


_KERNEL_RE = re.compile(r"^(uniform|gauss|gaussian|delta)(?::(.*))?$")


def make_kernel(spec):
    """Build a kernel from a text spec.

    Accepted forms: ``delta``, ``uniform:SIZE``, ``gauss:SIGMA`` and
    ``gauss:SIGMA:SIZE``. A Gaussian without an explicit size gets
    :func:`default_gaussian_size`.
    """
    m = _KERNEL_RE.match(spec.strip().lower())
    if not m:
        raise ValueError(f"unrecognized kernel spec {spec!r}")
    kind, rest = m.group(1), m.group(2)
    args = rest.split(":") if rest else []
    try:
        if kind == "delta":
            if args:
                raise ValueError("delta takes no arguments")
            return delta_kernel()
        if kind == "uniform":
            if len(args) != 1:
                raise ValueError("expected uniform:SIZE")
            return uniform_kernel(int(args[0]))
        if len(args) not in (1, 2):
            raise ValueError("expected gauss:SIGMA[:SIZE]")
        size = int(args[1]) if len(args) == 2 else None
        return gaussian_kernel(float(args[0]), size)
    except ValueError as exc:
        raise ValueError(f"bad kernel spec {spec!r}: {exc}") from None


def _check_kernel(kernel, shape):
    k = np.asarray(kernel, dtype=np.float64)
    if k.ndim != 2 or k.shape[0] != k.shape[1] or k.shape[0] % 2 == 0:
        raise ValueError(f"kernel must be square with odd size, got {k.shape}")
    if k.shape[0] > min(shape):
        raise ValueError(f"kernel size {k.shape[0]} exceeds image dims {shape}")
    return k


def _otf(kernel, shape):
    """Transfer function of ``kernel`` centred at pixel (0, 0) on a periodic grid."""
    c = kernel.shape[0] // 2
    pad = np.zeros(shape)
    pad[: kernel.shape[0], : kernel.shape[1]] = kernel
    pad = np.roll(pad, (-c, -c), axis=(0, 1))
    return np.fft.rfft2(pad)


def convolve_periodic(img, kernel, otf=None):
    """Circular 2-D convolution ``out[p] = sum_q k[q] img[p - q]``."""
    img = np.asarray(img, dtype=np.float64)
    k = _check_kernel(kernel, img.shape)
    if k.size == 1:
        return img * k[0, 0]
    if otf is None:
        otf = _otf(k, img.shape)
    return np.fft.irfft2(np.fft.rfft2(img) * otf, s=img.shape)


def correlate_periodic(img, kernel, otf=None):
    """Adjoint of :func:`convolve_periodic` (convolution with the flipped kernel)."""
    img = np.asarray(img, dtype=np.float64)
    k = _check_kernel(kernel, img.shape)
    if k.size == 1:
        return img * k[0, 0]
    if otf is None:
        otf = _otf(k, img.shape)
    return np.fft.irfft2(np.fft.rfft2(img) * np.conj(otf), s=img.shape)


# ---------------------------------------------------------------------------
# Degradation

@dataclass(frozen=True)
class Degradation:
    """Blur with ``kernel`` (periodic), keep every ``scale``-th pixel, add noise.

    Decimation keeps pixels whose row and column are multiples of ``scale``,
    starting at (0, 0).
    """

    kernel: np.ndarray
    scale: int = 1
    noise_sigma: float = 0.0
    _otfs: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        k = np.asarray(self.kernel, dtype=np.float64)
        if k.ndim != 2 or k.shape[0] != k.shape[1] or k.shape[0] % 2 == 0:
            raise ValueError(f"kernel must be square with odd size, got {k.shape}")
        if abs(k.sum() - 1.0) > 1e-12:
            raise ValueError("kernel taps must sum to 1")
        if int(self.scale) != self.scale or self.scale < 1:
            raise ValueError(f"scale must be a positive integer, got {self.scale}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        object.__setattr__(self, "kernel", k)
        object.__setattr__(self, "scale", int(self.scale))

    def otf(self, shape):
        shape = tuple(shape)
        if shape not in self._otfs:
            self._otfs[shape] = _otf(_check_kernel(self.kernel, shape), shape)
        return self._otfs[shape]

    def observed_shape(self, shape):
        h, w = shape
        s = self.scale
        if h % s or w % s:
            raise ValueError(f"image dims {shape} not divisible by scale {s}")
        return (h // s, w // s)


def apply_DH(img, d):
    """Blur then decimate: maps ``H x W`` to ``H/s x W/s``."""
    img = np.asarray(img, dtype=np.float64)
    d.observed_shape(img.shape)
    blurred = convolve_periodic(img, d.kernel, d.otf(img.shape))
    s = d.scale
    return blurred[::s, ::s] if s > 1 else blurred


def apply_DH_adjoint(img, d):
    """Zero-insertion upsampling by ``s`` followed by the flipped-kernel blur."""
    img = np.asarray(img, dtype=np.float64)
    s = d.scale
    shape = (img.shape[0] * s, img.shape[1] * s)
    if s > 1:
        up = np.zeros(shape)
        up[::s, ::s] = img
    else:
        up = img
    return correlate_periodic(up, d.kernel, d.otf(shape))


def add_noise(img, sigma, seed):
    """Add i.i.d. N(0, sigma^2) noise drawn from ``numpy.random.default_rng(seed)``."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    img = np.asarray(img, dtype=np.float64)
    if sigma == 0:
        return img.copy()
    rng = np.random.default_rng(seed)
    return img + sigma * rng.standard_normal(img.shape)


# ---------------------------------------------------------------------------
# Metrics

def psnr(ref, test, peak=255.0):
    """Peak signal-to-noise ratio in dB.

    Raises
    ------
    IdenticalImagesError
        If the images are identical, where PSNR is unbounded.
    """
    ref = as_image(ref, "ref")
    test = as_image(test, "test")
    if ref.shape != test.shape:
        raise ValueError(f"shape mismatch {ref.shape} vs {test.shape}")
    mse = np.mean((ref - test) ** 2)
    if mse == 0:
        raise IdenticalImagesError("images are identical; PSNR is infinite")
    return 10.0 * math.log10(peak * peak / mse)


def _gauss1d(size, sigma):
    d = np.arange(size) - size // 2
    g = np.exp(-(d * d) / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img, g):
    k = len(g)
    rows = np.lib.stride_tricks.sliding_window_view(img, k, axis=0) @ g
    return np.lib.stride_tricks.sliding_window_view(rows, k, axis=1) @ g


def ssim(ref, test, peak=255.0, win_size=11, sigma=1.5, k1=0.01, k2=0.03):
    """Mean structural similarity over all fully-contained Gaussian windows."""
    x = as_image(ref, "ref")
    y = as_image(test, "test")
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    if min(x.shape) < win_size:
        raise ValueError(f"images must be at least {win_size}x{win_size}")
    c1 = (k1 * peak) ** 2
    c2 = (k2 * peak) ** 2
    g = _gauss1d(win_size, sigma)
    mx = _filter_valid(x, g)
    my = _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


# ---------------------------------------------------------------------------
# PGM I/O

def _read_token(buf, pos):
    n = len(buf)
    while pos < n:
        ch = buf[pos:pos + 1]
        if ch == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise PGMFormatError("truncated PGM header")
    return buf[start:pos], pos


def load_image(path):
    """Read an 8-bit binary PGM (P5) as a float64 array."""
    buf = Path(path).read_bytes()
    if buf[:2] != b"P5":
        raise PGMFormatError(f"{path}: not a binary PGM (magic {buf[:2]!r})")
    pos = 2
    fields = []
    for _ in range(3):
        tok, pos = _read_token(buf, pos)
        if not tok.isdigit():
            raise PGMFormatError(f"{path}: malformed header field {tok!r}")
        fields.append(int(tok))
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise PGMFormatError(f"{path}: bad dimensions {width}x{height}")
    if maxval != 255:
        raise PGMFormatError(f"{path}: only maxval 255 is supported, got {maxval}")
    pos += 1  # single whitespace byte before the raster
    data = buf[pos:pos + width * height]
    if len(data) != width * height:
        raise PGMFormatError(f"{path}: truncated raster")
    return np.frombuffer(data, dtype=np.uint8).reshape(height, width).astype(np.float64)


def save_image(img, path):
    """Write ``img`` as an 8-bit binary PGM, clamping to [0, 255] and rounding."""
    arr = as_image(img)
    q = np.clip(np.rint(arr), 0, 255).astype(np.uint8)
    h, w = q.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(q.tobytes())

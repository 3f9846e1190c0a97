"""Low-frequency luminance gain/bias compensation between image pairs.

Images are float arrays (H, W, 3) in [0, 1].  Offsets live on two coarse
grids (8x8 and 16x16) that are bilinearly upsampled and blurred with a
51x51 Gaussian.  The pipeline is linear and separable, so each axis is an
explicit (size x resolution) matrix and fitting is a small linear
least-squares problem solved through its normal equations.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.fft import dctn
from scipy.ndimage import gaussian_filter1d

KERNEL_SIZE = 51
SIGMA = KERNEL_SIZE / 6.0
LEVELS = (8, 16)

# BT.601 full range
_RGB_TO_YCC = np.array(
    [
        [0.299, 0.587, 0.114],
        [-0.168735891647856, -0.331264108352144, 0.5],
        [0.5, -0.418687589158345, -0.081312410841655],
    ]
)
_YCC_TO_RGB = np.linalg.inv(_RGB_TO_YCC)
_CHROMA_OFFSET = np.array([0.0, 0.5, 0.5])


class ImageTooSmall(ValueError):
    pass


class SizeMismatch(ValueError):
    pass


def rgb_to_ycbcr(image) -> np.ndarray:
    """(H, W, 3) RGB -> (H, W, 3) Y, Cb, Cr with chroma centred at 0.5."""
    return np.asarray(image, dtype=float) @ _RGB_TO_YCC.T + _CHROMA_OFFSET


def ycbcr_to_rgb(image) -> np.ndarray:
    return (np.asarray(image, dtype=float) - _CHROMA_OFFSET) @ _YCC_TO_RGB.T


@dataclass(frozen=True)
class OffsetGrid:
    gain: tuple  # one (r, r) array per level
    bias: tuple
    size: tuple  # (height, width)

    def __post_init__(self):
        gain = tuple(np.array(g, dtype=float) for g in self.gain)
        bias = tuple(np.array(b, dtype=float) for b in self.bias)
        if len(gain) != len(bias) or not gain:
            raise ValueError("gain and bias need the same, non-zero number of levels")
        for g, b in zip(gain, bias):
            if g.ndim != 2 or g.shape != b.shape:
                raise ValueError("each level needs matching 2-D gain and bias grids")
        for a in gain + bias:
            a.setflags(write=False)
        object.__setattr__(self, "gain", gain)
        object.__setattr__(self, "bias", bias)
        object.__setattr__(self, "size", (int(self.size[0]), int(self.size[1])))

    @classmethod
    def identity(cls, size, levels=LEVELS) -> "OffsetGrid":
        return cls(
            tuple(np.ones((r, r)) for r in levels), tuple(np.zeros((r, r)) for r in levels), size
        )

    @classmethod
    def constant(cls, size, gain: float, bias: float, levels=LEVELS) -> "OffsetGrid":
        return cls(
            tuple(np.full((r, r), gain) for r in levels),
            tuple(np.full((r, r), bias / len(levels)) for r in levels),
            size,
        )

    def __add__(self, other: "OffsetGrid") -> "OffsetGrid":
        if self.size != other.size:
            raise SizeMismatch(f"{self.size} vs {other.size}")
        return OffsetGrid(
            tuple(a + b for a, b in zip(self.gain, other.gain)),
            tuple(a + b for a, b in zip(self.bias, other.bias)),
            self.size,
        )

    def to_dict(self) -> dict:
        return {
            "size": list(self.size),
            "levels": [
                {"resolution": int(g.shape[0]), "gain": g.tolist(), "bias": b.tolist()}
                for g, b in zip(self.gain, self.bias)
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "OffsetGrid":
        levels = data["levels"]
        return cls(
            tuple(lv["gain"] for lv in levels), tuple(lv["bias"] for lv in levels), tuple(data["size"])
        )


def _upsample_matrix(n: int, r: int) -> np.ndarray:
    """(n, r) bilinear weights sampling r cell-centred values at n pixel centres."""
    pos = (np.arange(n) + 0.5) * r / n - 0.5
    pos = np.clip(pos, 0.0, r - 1)
    lo = np.minimum(np.floor(pos).astype(int), r - 1)
    hi = np.minimum(lo + 1, r - 1)
    w = pos - lo
    out = np.zeros((n, r))
    np.add.at(out, (np.arange(n), lo), 1.0 - w)
    np.add.at(out, (np.arange(n), hi), w)
    return out


@lru_cache(maxsize=32)
def _axis_operator(n: int, r: int) -> np.ndarray:
    """Blur-after-upsample along one axis, edge-replicate padding."""
    radius = KERNEL_SIZE // 2
    op = gaussian_filter1d(_upsample_matrix(n, r), SIGMA, axis=0, mode="nearest", truncate=radius / SIGMA)
    op.setflags(write=False)
    return op


def _check_size(size):
    h, w = size
    if h < KERNEL_SIZE or w < KERNEL_SIZE:
        raise ImageTooSmall(f"image {h}x{w} is smaller than the {KERNEL_SIZE}x{KERNEL_SIZE} kernel")


def _render_levels(levels, size, weight: float, base: float = 0.0) -> np.ndarray:
    h, w = size
    out = np.zeros((h, w))
    for grid in levels:
        r_y, r_x = grid.shape
        out += _axis_operator(h, r_y) @ (grid - base) @ _axis_operator(w, r_x).T
    return base + weight * out


def render_offset(grid: OffsetGrid, size=None):
    """Per-pixel (gain, bias) maps.  Gain levels are averaged, bias levels summed.

    Gain is rendered as a deviation from 1, so an identity grid gives maps of
    exactly 1 and 0.
    """
    size = tuple(size) if size is not None else grid.size
    _check_size(size)
    gain = _render_levels(grid.gain, size, 1.0 / len(grid.gain), base=1.0)
    bias = _render_levels(grid.bias, size, 1.0)
    return gain, bias


def compensate_ycbcr(ycc, grid: OffsetGrid) -> np.ndarray:
    """Y' = gain * Y + bias (clamped to [0, 1]); Cb and Cr are copied as is."""
    ycc = np.array(ycc, dtype=float)
    if ycc.shape[:2] != grid.size:
        raise SizeMismatch(f"image {ycc.shape[:2]} vs grid {grid.size}")
    gain, bias = render_offset(grid)
    y = ycc[..., 0]
    y_new = gain * y + bias
    # only values the offset actually changes are clamped, so identity stays exact
    ycc[..., 0] = np.where(y_new == y, y, np.clip(y_new, 0.0, 1.0))
    return ycc


def apply_compensation(image, grid: OffsetGrid) -> np.ndarray:
    """RGB in, RGB out; the offset acts on luminance only."""
    image = np.asarray(image, dtype=float)
    if image.shape[:2] != grid.size:
        raise SizeMismatch(f"image {image.shape[:2]} vs grid {grid.size}")
    ycc = rgb_to_ycbcr(image)
    dy = compensate_ycbcr(ycc, grid)[..., 0] - ycc[..., 0]
    # chroma is unchanged, so the RGB change is dy times the Y column of the inverse transform
    return image + dy[..., None] * _YCC_TO_RGB[:, 0]


# --- fitting ---------------------------------------------------------------------


@dataclass(frozen=True)
class FitResult:
    grid: OffsetGrid
    initial_residual: float  # RMS luminance difference over unsaturated pixels
    final_residual: float
    rank: int  # rank of the normal matrix; levels share a constant, so < size


def _pack(grid: OffsetGrid) -> np.ndarray:
    return np.concatenate([a.ravel() for a in grid.gain + grid.bias])


def _unpack(vec, template: OffsetGrid) -> OffsetGrid:
    parts, i = [], 0
    for a in template.gain + template.bias:
        parts.append(vec[i: i + a.size].reshape(a.shape))
        i += a.size
    n = len(template.gain)
    return OffsetGrid(tuple(parts[:n]), tuple(parts[n:]), template.size)


def _gram_block(op_a, op_b, weight) -> np.ndarray:
    """sum_pixels weight * phi_k * phi_l for separable bases of two levels."""
    (ya, xa), (yb, xb) = op_a, op_b
    ra, rb = ya.shape[1], yb.shape[1]
    x_pairs = (xa[:, :, None] * xb[:, None, :]).reshape(xa.shape[0], -1)  # (W, ra*rb)
    t = weight @ x_pairs  # (H, ra*rb)
    g = np.einsum("yp,yP,yk->pPk", ya, yb, t).reshape(ra, rb, ra, rb)
    # rows (p, q) of level a, columns (P, Q) of level b
    return g.transpose(0, 2, 1, 3).reshape(ra * ra, rb * rb)


def fit_offset(source, target, levels=LEVELS, rcond: float = 1e-12) -> FitResult:
    """Least-squares gain/bias grids mapping the source luminance onto the target.

    The rendered maps are linear in the grid values, so the fit is a linear
    least-squares problem.  Its normal matrix is assembled from the
    separable per-axis operators and solved with a pseudo-inverse, which
    also handles the constant that can shift between levels.  Target
    pixels saturated at 0 or 1 are ignored, since clamping hides the affine
    relation there.
    """
    source = np.asarray(source, dtype=float)
    target = np.asarray(target, dtype=float)
    if source.shape != target.shape:
        raise SizeMismatch(f"source {source.shape} vs target {target.shape}")
    size = source.shape[:2]
    _check_size(size)
    y_s = rgb_to_ycbcr(source)[..., 0]
    y_t = rgb_to_ycbcr(target)[..., 0]
    # tolerance absorbs the colour round trip, which maps a clamped Y = 1 to 1 - 1 ulp
    mask = ((y_t > 1e-9) & (y_t < 1.0 - 1e-9)).astype(float)
    n_lv = len(levels)
    ops = [(_axis_operator(size[0], r), _axis_operator(size[1], r)) for r in levels]
    template = OffsetGrid.identity(size, levels)

    # pixel weights of each basis type: gain cells multiply Y / n_levels
    w = {"g": y_s / n_lv, "b": np.ones_like(y_s)}
    blocks = [(kind, op) for kind in "gb" for op in ops]
    gram = np.block(
        [[_gram_block(oa, ob, mask * w[ka] * w[kb]) for kb, ob in blocks] for ka, oa in blocks]
    )

    def forward(vec):
        g = _unpack(vec, template)
        gain = sum(a @ x @ b.T for (a, b), x in zip(ops, g.gain)) / n_lv
        bias = sum(a @ x @ b.T for (a, b), x in zip(ops, g.bias))
        return mask * (gain * y_s + bias)

    def adjoint(res):
        parts = [a.T @ (res * w[kind]) @ b for kind, (a, b) in blocks]
        return np.concatenate([p.ravel() for p in parts])

    x0 = _pack(template)
    r0 = mask * y_t - forward(x0)
    n_valid = max(mask.sum(), 1.0)
    initial = float(np.sqrt(np.sum(r0 * r0) / n_valid))
    rhs = adjoint(r0)
    evals, evecs = np.linalg.eigh(gram)
    keep = evals > rcond * evals.max()
    step = evecs[:, keep] @ ((evecs[:, keep].T @ rhs) / evals[keep])
    x = x0 + step
    r = mask * y_t - forward(x)
    final = float(np.sqrt(np.sum(r * r) / n_valid))
    if final > initial:  # numerically possible only for degenerate inputs
        x, final = x0, initial
    return FitResult(_unpack(x, template), initial, final, int(keep.sum()))


def low_frequency_fraction(field, cutoff: float = 1.0 / 16.0) -> float:
    """Share of a map's non-DC spectral energy below ``cutoff`` x Nyquist.

    The spectrum is that of the mirror-extended map (a DCT-II), which avoids
    the artificial edges a periodic FFT would see at the image border.
    """
    field = np.asarray(field, dtype=float)
    coef = dctn(field - field.mean(), type=2, norm="ortho")
    h, w = field.shape
    # DCT index k corresponds to k / (2n) cycles per pixel; Nyquist is 0.5
    fy = np.arange(h)[:, None] / (2.0 * h) / 0.5
    fx = np.arange(w)[None, :] / (2.0 * w) / 0.5
    energy = coef**2
    total = energy.sum()
    if total == 0.0:
        return 1.0
    return float(energy[np.hypot(fy, fx) < cutoff].sum() / total)


# --- file IO ---------------------------------------------------------------------


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=float) / 255.0


def save_image(image, path) -> None:
    data = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data).save(path)


def save_offset(grid: OffsetGrid, path) -> None:
    Path(path).write_text(json.dumps(grid.to_dict()) + "\n")


def load_offset(path) -> OffsetGrid:
    return OffsetGrid.from_dict(json.loads(Path(path).read_text()))

"""Rotation-equivariant convolution (RConv).

A layer learns C canonical m-by-m filters and convolves the input against all
of their rotated copies at angles 2*pi*r/n for r = 0..n-1, so the output has
C*n channels laid out filter-major, rotation-minor (channel index c*n + r).
Gradients from every rotated copy are pulled back onto the single canonical
filter through the transpose of the rotation resampling, so the layer stores
n times fewer parameters than a standard convolution with the same number of
output channels.

Only the weights inside the inscribed circle of the filter square carry
information: rotation would otherwise shuffle corner weights in and out of
the support. The circular mask is applied to the canonical weights, to every
rotated copy, and to the weight gradient.

When the rotation count is divisible by 4, rotated copies are built by
resampling only within the first quadrant and then applying exact 90-degree
index permutations, and the cos/sin tables are constructed with exact
quarter-turn symmetry. Together with the float64 reduction rules in
`tensor`, this makes the rotate-input <-> shift-rotation-channels identity
bit-exact at quarter turns.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .tensor import (
    GridSampleSpec,
    Tensor,
    TWO_PI,
    conv2d,
    conv2d_backward,
    rotate_grid,
    rotate_grid_adjoint,
)

SCALAR = "scalar"
VECTOR = "vector-field"


def circular_mask(m: int, dtype=np.float64) -> Tensor:
    """Binary m-by-m mask of the inscribed circle (diameter m, pixel centers)."""
    if m % 2 != 1:
        raise ShapeError(f"filter size must be odd, got {m}")
    c = 0.5 * (m - 1)
    rows, cols = np.meshgrid(np.arange(m), np.arange(m), indexing="ij")
    r2 = (rows - c) ** 2 + (cols - c) ** 2
    return (r2 <= (0.5 * m) ** 2 + 1e-9).astype(dtype)


def rotation_angles(n: int) -> np.ndarray:
    """Sampled rotation angles 2*pi*r/n, r = 0..n-1."""
    return np.array([TWO_PI * r / n for r in range(n)], dtype=np.float64)


def angle_table(n: int):
    """(cos, sin) of the sampled angles.

    For n divisible by 4 the table is built from the first quadrant and
    extended by cos(a + pi/2) = -sin(a), sin(a + pi/2) = cos(a), so the
    quarter-turn identities hold bitwise, not just to rounding.
    """
    cos_t = np.empty(n, dtype=np.float64)
    sin_t = np.empty(n, dtype=np.float64)
    if n % 4 == 0:
        quarter = n // 4
        for r in range(quarter):
            a = TWO_PI * r / n
            cos_t[r] = math.cos(a)
            sin_t[r] = math.sin(a)
        for r in range(quarter, n):
            cos_t[r] = -sin_t[r - quarter]
            sin_t[r] = cos_t[r - quarter]
    else:
        for r in range(n):
            a = TWO_PI * r / n
            cos_t[r] = math.cos(a)
            sin_t[r] = math.sin(a)
    return cos_t, sin_t


@dataclass
class CanonicalFilterBank:
    """C learnable canonical filters plus the bookkeeping for their rotations.

    weights: [m, m, Cin, C]. For vector-field input, Cin is even and plane
    2i / 2i+1 hold the horizontal/vertical component filters of input field i.
    """

    weights: Tensor
    n_rotations: int
    input_kind: str = SCALAR
    mask: Tensor = field(default=None)

    def __post_init__(self):
        if self.weights.ndim != 4:
            raise ShapeError(f"weights must be [m,m,Cin,C], got {self.weights.shape}")
        m, n, cin, _ = self.weights.shape
        if m != n or m % 2 != 1:
            raise ShapeError(f"filters must be square with odd size, got {m}x{n}")
        if self.n_rotations < 1:
            raise ShapeError(f"rotation count must be >= 1, got {self.n_rotations}")
        if self.input_kind not in (SCALAR, VECTOR):
            raise ShapeError(f"unknown input_kind {self.input_kind!r}")
        if self.input_kind == VECTOR and cin % 2 != 0:
            raise ShapeError(
                f"vector-field filters need paired (p,q) planes, got Cin={cin}"
            )
        if self.mask is None:
            self.mask = circular_mask(m, dtype=self.weights.dtype)
        self.apply_mask()

    @property
    def size(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[2]

    @property
    def n_filters(self) -> int:
        return self.weights.shape[3]

    @property
    def angles(self) -> np.ndarray:
        return rotation_angles(self.n_rotations)

    def apply_mask(self) -> None:
        """Zero the weights outside the inscribed circle, in place."""
        self.weights *= self.mask[:, :, None, None].astype(self.weights.dtype)

    def parameter_count(self) -> int:
        return self.weights.size


@dataclass
class RConvOutput:
    """Activations [H, W, C*n] in filter-major, rotation-minor channel order."""

    activations: Tensor
    n_rotations: int

    @property
    def rotation_angles(self) -> np.ndarray:
        return rotation_angles(self.n_rotations)


def _masked(bank: CanonicalFilterBank) -> Tensor:
    return bank.weights * bank.mask[:, :, None, None].astype(bank.weights.dtype)


def _rotated_stack(w: Tensor, n: int):
    """List of n spatially rotated copies of [m,m,...] weights.

    Quadrant construction when 4 | n: copy r = q*n/4 + j is the exact
    90-degree permutation (applied q times) of the bilinear rotation by
    2*pi*j/n, so copies a quarter turn apart are exact rot90 images of each
    other.
    """
    copies = [None] * n
    if n % 4 == 0:
        quarter = n // 4
        for j in range(quarter):
            base = rotate_grid(w, GridSampleSpec(TWO_PI * j / n))
            copies[j] = base
            for q in range(1, 4):
                copies[j + q * quarter] = np.rot90(base, q).copy()
    else:
        for r in range(n):
            copies[r] = rotate_grid(w, GridSampleSpec(TWO_PI * r / n))
    return copies


def _rotated_stack_adjoint(grads, n: int) -> Tensor:
    """Transpose of `_rotated_stack`: fold per-rotation gradients back."""
    total = None
    if n % 4 == 0:
        quarter = n // 4
        for j in range(quarter):
            acc = grads[j].copy()
            for q in range(1, 4):
                acc += np.rot90(grads[j + q * quarter], -q)
            g = rotate_grid_adjoint(acc, GridSampleSpec(TWO_PI * j / n))
            total = g if total is None else total + g
    else:
        for r in range(n):
            g = rotate_grid_adjoint(grads[r], GridSampleSpec(TWO_PI * r / n))
            total = g if total is None else total + g
    return total


def expand_rotations(bank: CanonicalFilterBank) -> Tensor:
    """Expanded filter tensor [m, m, Cin, C*n] of all masked rotated copies.

    Copy r of filter c sits at output channel c*n + r; copy 0 equals the
    masked canonical filter exactly.
    """
    m = bank.size
    n = bank.n_rotations
    cin = bank.in_channels
    c = bank.n_filters
    w = _masked(bank)
    maskb = bank.mask[:, :, None, None].astype(w.dtype)

    if bank.input_kind == SCALAR:
        copies = _rotated_stack(w, n)
        mixed = [cp * maskb for cp in copies]
    else:
        cos_t, sin_t = angle_table(n)
        wp = w[:, :, 0::2, :]
        wq = w[:, :, 1::2, :]
        rp = _rotated_stack(wp, n)
        rq = _rotated_stack(wq, n)
        mixed = []
        for r in range(n):
            cr = w.dtype.type(cos_t[r])
            sr = w.dtype.type(sin_t[r])
            fp = cr * rp[r] - sr * rq[r]
            fq = cr * rq[r] + sr * rp[r]
            full = np.empty((m, m, cin, c), dtype=w.dtype)
            full[:, :, 0::2, :] = fp
            full[:, :, 1::2, :] = fq
            mixed.append(full * maskb)

    out = np.stack(mixed, axis=0)  # [n, m, m, cin, c]
    out = out.transpose(1, 2, 3, 4, 0).reshape(m, m, cin, c * n)
    return np.ascontiguousarray(out)


def expand_rotations_backward(bank: CanonicalFilterBank, grad_expanded: Tensor) -> Tensor:
    """Pull a gradient w.r.t. the expanded filters back onto the canonical
    weights (mask -> rotation transpose -> sum over rotations -> mask)."""
    m = bank.size
    n = bank.n_rotations
    cin = bank.in_channels
    c = bank.n_filters
    maskb = bank.mask[:, :, None, None].astype(grad_expanded.dtype)
    g = grad_expanded.reshape(m, m, cin, c, n).transpose(4, 0, 1, 2, 3)
    g = g * maskb[None]

    if bank.input_kind == SCALAR:
        grads = [g[r] for r in range(n)]
        total = _rotated_stack_adjoint(grads, n)
    else:
        cos_t, sin_t = angle_table(n)
        gp_rot = []
        gq_rot = []
        for r in range(n):
            cr = g.dtype.type(cos_t[r])
            sr = g.dtype.type(sin_t[r])
            gfp = g[r][:, :, 0::2, :]
            gfq = g[r][:, :, 1::2, :]
            # transpose of the (p,q) mixing matrix [[c,-s],[s,c]]
            gp_rot.append(cr * gfp + sr * gfq)
            gq_rot.append(cr * gfq - sr * gfp)
        tp = _rotated_stack_adjoint(gp_rot, n)
        tq = _rotated_stack_adjoint(gq_rot, n)
        total = np.empty((m, m, cin, c), dtype=g.dtype)
        total[:, :, 0::2, :] = tp
        total[:, :, 1::2, :] = tq

    return total * maskb


def rconv_forward(x: Tensor, bank: CanonicalFilterBank) -> RConvOutput:
    """Same-padding stride-1 convolution against all rotated filter copies."""
    if bank.input_kind != SCALAR:
        raise ShapeError("rconv_forward requires a scalar-input bank")
    f = expand_rotations(bank)
    pad = bank.size // 2
    y = conv2d(x, f, stride=1, padding=pad)
    return RConvOutput(y, bank.n_rotations)


def rconv_backward(x: Tensor, bank: CanonicalFilterBank, upstream: Tensor):
    """Gradients of sum(upstream * rconv_forward(x, bank).activations).

    Returns (grad_x, grad_weights); grad_weights is masked and has the
    canonical [m, m, Cin, C] shape.
    """
    f = expand_rotations(bank)
    pad = bank.size // 2
    gx, gf = conv2d_backward(x, f, upstream, stride=1, padding=pad)
    gw = expand_rotations_backward(bank, gf)
    return gx, gw


def rconv_forward_vf(v: Tensor, bank: CanonicalFilterBank) -> RConvOutput:
    """Vector-field RConv: input [H, W, 2*Cin] of interleaved (p, q) planes.

    Each rotated copy spatially rotates both component filters and mixes them
    with the 2x2 rotation of the (p, q) frame; output slice r is
    (Vp * fp_r) + (Vq * fq_r), realized as one convolution over the stacked
    planes.
    """
    if bank.input_kind != VECTOR:
        raise ShapeError("rconv_forward_vf requires a vector-field bank")
    if v.ndim != 3 or v.shape[2] != bank.in_channels:
        raise ShapeError(
            f"vector-field input {v.shape} does not match bank Cin={bank.in_channels}"
        )
    if v.shape[2] % 2 != 0:
        raise ShapeError(f"vector-field input needs paired planes, got {v.shape[2]}")
    f = expand_rotations(bank)
    pad = bank.size // 2
    y = conv2d(v, f, stride=1, padding=pad)
    return RConvOutput(y, bank.n_rotations)


def rconv_backward_vf(v: Tensor, bank: CanonicalFilterBank, upstream: Tensor):
    """Adjoint of `rconv_forward_vf`; returns (grad_v, grad_weights)."""
    f = expand_rotations(bank)
    pad = bank.size // 2
    gv, gf = conv2d_backward(v, f, upstream, stride=1, padding=pad)
    gw = expand_rotations_backward(bank, gf)
    return gv, gw

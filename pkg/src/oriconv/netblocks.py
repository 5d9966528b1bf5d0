"""Composite network blocks: backbone, image-pyramid feature extractor,
attention merge, level fusion, and the prediction heads.

Layers follow a hand-derived-backward protocol: `forward(x, training)` caches
what the adjoint needs, `backward(gy)` returns the input gradient and
accumulates parameter gradients. Arrays are batched [N, H, W, C]; vector-field
stacks use the interleaved (p, q) plane layout from `fieldops`. Every block
keeps the pooled fields equivariant: rotating the network input by a quarter
turn rotates each level's fields per `fieldops.rotate_stack_90`, exactly in
float64.

A shape dry-run with symbolic extents validates every merge point at build
time, so mismatched pyramids fail before any real data flows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import fieldops, rconv, steerbasis
from .errors import ConfigError, ShapeError
from .tensor import Tensor, conv2d, conv2d_backward, stable_sum


# ---------------------------------------------------------------------------
# layer protocol


class Layer:
    """Base: parameter dict + gradient accumulation + constraint hook."""

    def params(self) -> dict:
        return {}

    def grads(self) -> dict:
        return {}

    def zero_grads(self) -> None:
        for g in self.grads().values():
            g[...] = 0.0

    def apply_constraints(self) -> None:
        pass

    def state(self) -> dict:
        """Non-learnable persistent arrays (running stats)."""
        return {}


class RConvLayer(Layer):
    """Rotation-equivariant convolution, free or basis-parametrized filters."""

    def __init__(
        self,
        size: int,
        in_planes: int,
        n_filters: int,
        n_rotations: int,
        input_kind: str = rconv.SCALAR,
        parametrization: str = "free",
        basis_spec: steerbasis.BasisSpec | None = None,
        rng: np.random.Generator | None = None,
        dtype=np.float32,
    ):
        rng = rng or np.random.default_rng(0)
        self.n_rotations = n_rotations
        self.input_kind = input_kind
        self.parametrization = parametrization
        if parametrization == "steerable":
            self.basis = steerbasis.build_basis(
                basis_spec or steerbasis.BasisSpec(size=size)
            )
            fan_in = size * size * in_planes
            std = math.sqrt(1.0 / (fan_in * n_rotations))
            self.mixing = rng.normal(
                0.0, std, size=(self.basis.n_atoms, in_planes, n_filters)
            ).astype(dtype)
            self.g_mixing = np.zeros_like(self.mixing)
            w = steerbasis.compose_filters(self.basis, self.mixing)
        else:
            self.basis = None
            w = init_canonical_weights(
                size, in_planes, n_filters, n_rotations, rng
            ).astype(dtype)
        self.bank = rconv.CanonicalFilterBank(
            w.astype(dtype), n_rotations, input_kind=input_kind
        )
        self.g_weights = np.zeros_like(self.bank.weights)
        self._cache = None

    def params(self):
        if self.parametrization == "steerable":
            return {"mixing": self.mixing}
        return {"weights": self.bank.weights}

    def grads(self):
        if self.parametrization == "steerable":
            return {"mixing": self.g_mixing}
        return {"weights": self.g_weights}

    def apply_constraints(self):
        if self.parametrization == "steerable":
            self.bank.weights = steerbasis.compose_filters(self.basis, self.mixing)
        self.bank.apply_mask()

    def forward(self, x: Tensor, training: bool = True) -> Tensor:
        if self.parametrization == "steerable":
            self.bank.weights = steerbasis.compose_filters(self.basis, self.mixing)
            self.bank.apply_mask()
        fwd = (
            rconv.rconv_forward
            if self.input_kind == rconv.SCALAR
            else rconv.rconv_forward_vf
        )
        out = np.stack([fwd(img, self.bank).activations for img in x])
        self._cache = x
        return out

    def backward(self, gy: Tensor) -> Tensor:
        x = self._cache
        bwd = (
            rconv.rconv_backward
            if self.input_kind == rconv.SCALAR
            else rconv.rconv_backward_vf
        )
        gxs = []
        for img, g in zip(x, gy):
            gx, gw = bwd(img, self.bank, g)
            gxs.append(gx)
            if self.parametrization == "steerable":
                self.g_mixing += steerbasis.compose_filters_backward(self.basis, gw)
            else:
                self.g_weights += gw
        return np.stack(gxs)


class OrientationPool(Layer):
    """Collapse rotation channels to vector fields (see fieldops)."""

    def __init__(self, n_rotations: int):
        self.n_rotations = n_rotations
        self._cache = None

    def forward(self, x: Tensor, training: bool = True) -> Tensor:
        outs, caches = [], []
        for img in x:
            stack, winners = fieldops.orientation_pool_stack(img, self.n_rotations)
            outs.append(stack)
            caches.append((img, winners))
        self._cache = caches
        return np.stack(outs)

    def backward(self, gy: Tensor) -> Tensor:
        gxs = []
        for (img, winners), g in zip(self._cache, gy):
            gxs.append(
                fieldops.orientation_pool_backward(img, self.n_rotations, winners, g)
            )
        return np.stack(gxs)


class VfMaxPool(Layer):
    def __init__(self, window: int):
        self.window = window
        self._cache = None

    def forward(self, x: Tensor, training: bool = True) -> Tensor:
        outs, caches = [], []
        for img in x:
            pooled, winners = fieldops.vf_max_pool(img, self.window)
            outs.append(pooled)
            caches.append((img.shape, winners))
        self._cache = caches
        return np.stack(outs)

    def backward(self, gy: Tensor) -> Tensor:
        return np.stack(
            [
                fieldops.vf_max_pool_backward(shape, self.window, winners, g)
                for (shape, winners), g in zip(self._cache, gy)
            ]
        )


class MaxPool(Layer):
    def __init__(self, window: int):
        self.window = window
        self._cache = None

    def forward(self, x: Tensor, training: bool = True) -> Tensor:
        outs, caches = [], []
        for img in x:
            pooled, winners = fieldops.max_pool(img, self.window)
            outs.append(pooled)
            caches.append((img.shape, winners))
        self._cache = caches
        return np.stack(outs)

    def backward(self, gy: Tensor) -> Tensor:
        return np.stack(
            [
                fieldops.max_pool_backward(shape, self.window, winners, g)
                for (shape, winners), g in zip(self._cache, gy)
            ]
        )


class FieldAvgPool2(Layer):
    """2x vector-average downsampling of a field stack (used to align a finer
    pyramid level with its coarser neighbor)."""

    def forward(self, x: Tensor, training: bool = True) -> Tensor:
        n, h, w, c = x.shape
        if h % 2 or w % 2:
            raise ShapeError(f"field avg-pool needs even extents, got {x.shape}")
        tiles = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4)
        quads = tiles.reshape(n, h // 2, w // 2, c, 4)
        self._in_shape = x.shape
        return stable_sum(quads, axis=4) * x.dtype.type(0.25)

    def backward(self, gy: Tensor) -> Tensor:
        n, h, w, c = self._in_shape
        g = np.repeat(np.repeat(gy, 2, axis=1), 2, axis=2)
        return (g * gy.dtype.type(0.25)).astype(gy.dtype)


class FieldNorm(Layer):
    """Magnitude batch normalization of field stacks (VFBN)."""

    def __init__(self, n_fields: int, momentum: float = 0.9, eps: float = 1e-5):
        self.vstate = fieldops.VFBNState.create(n_fields, momentum, eps)
        self._cache = None

    def state(self):
        return {"running_var": self.vstate.running_var}

    def forward(self, x: Tensor, training: bool = True) -> Tensor:
        out, self._cache = fieldops.field_batch_norm(x, self.vstate, training)
        return out

    def backward(self, gy: Tensor) -> Tensor:
        return fieldops.field_batch_norm_backward(self._cache, gy)


class PlainConv(Layer):
    """Standard convolution with bias; used by prediction heads and the
    non-equivariant baseline network."""

    def __init__(self, size, cin, cout, rng=None, stride=1, dtype=np.float32, pad=None):
        rng = rng or np.random.default_rng(0)
        std = math.sqrt(1.0 / (size * size * cin))
        self.w = rng.normal(0.0, std, size=(size, size, cin, cout)).astype(dtype)
        self.b = np.zeros(cout, dtype=dtype)
        self.gw = np.zeros_like(self.w)
        self.gb = np.zeros_like(self.b)
        self.stride = stride
        self.pad = size // 2 if pad is None else pad
        self._cache = None

    def params(self):
        return {"w": self.w, "b": self.b}

    def grads(self):
        return {"w": self.gw, "b": self.gb}

    def forward(self, x: Tensor, training: bool = True) -> Tensor:
        out = np.stack(
            [conv2d(img, self.w, self.stride, self.pad) for img in x]
        )
        self._cache = x
        return out + self.b[None, None, None, :]

    def backward(self, gy: Tensor) -> Tensor:
        x = self._cache
        gxs = []
        for img, g in zip(x, gy):
            gx, gw = conv2d_backward(img, self.w, g, self.stride, self.pad)
            gxs.append(gx)
            self.gw += gw
            self.gb += g.sum(axis=(0, 1))
        return np.stack(gxs)


class Relu(Layer):
    def forward(self, x: Tensor, training: bool = True) -> Tensor:
        self._mask = x > 0
        return np.maximum(x, 0)

    def backward(self, gy: Tensor) -> Tensor:
        return gy * self._mask


class Sequential(Layer):
    def __init__(self, layers):
        self.layers = list(layers)

    def forward(self, x: Tensor, training: bool = True) -> Tensor:
        for l in self.layers:
            x = l.forward(x, training)
        return x

    def backward(self, gy: Tensor) -> Tensor:
        for l in reversed(self.layers):
            gy = l.backward(gy)
        return gy

    def params(self):
        out = {}
        for i, l in enumerate(self.layers):
            for k, v in l.params().items():
                out[f"{i}.{k}"] = v
        return out

    def grads(self):
        out = {}
        for i, l in enumerate(self.layers):
            for k, v in l.grads().items():
                out[f"{i}.{k}"] = v
        return out

    def state(self):
        out = {}
        for i, l in enumerate(self.layers):
            for k, v in l.state().items():
                out[f"{i}.{k}"] = v
        return out

    def apply_constraints(self):
        for l in self.layers:
            l.apply_constraints()


def init_canonical_weights(size, in_planes, n_filters, n_rotations, rng):
    """Zero-mean init with the fan-in variance shrunk by the rotation count:
    each canonical filter feeds n_rotations output channels, so its variance
    carries an extra 1/n factor to keep activation scale flat in n."""
    fan_in = size * size * in_planes
    std = math.sqrt(1.0 / (fan_in * n_rotations))
    return rng.normal(0.0, std, size=(size, size, in_planes, n_filters))


# ---------------------------------------------------------------------------
# image pyramid


def downsample2(image: Tensor) -> Tensor:
    """2x area-average downsampling (bilinear averaging over 2x2 cells)."""
    h, w, c = image.shape
    if h % 2 or w % 2:
        raise ShapeError(f"downsample needs even extents, got {image.shape}")
    quads = (
        image.reshape(h // 2, 2, w // 2, 2, c)
        .transpose(0, 2, 4, 1, 3)
        .reshape(h // 2, w // 2, c, 4)
    )
    return stable_sum(quads, axis=3) * image.dtype.type(0.25)


def build_image_pyramid(image: Tensor, n_levels: int):
    """[image, image/2, image/4, ...]: level k is the input downsampled by
    2**k with area averaging; level 0 is the input itself."""
    if n_levels < 1:
        raise ShapeError("need at least one level")
    h, w = image.shape[:2]
    if min(h, w) // (2 ** (n_levels - 1)) < 4:
        raise ShapeError(
            f"{n_levels} levels is too deep for a {h}x{w} image"
        )
    levels = [image]
    for _ in range(n_levels - 1):
        levels.append(downsample2(levels[-1]))
    return levels


# ---------------------------------------------------------------------------
# composite blocks


class PyramidStage(Layer):
    """Per-scale feature extractor: two 3x3 and one 1x1 rotation conv with
    orientation pooling after each, plus enough field max-pooling to land on
    the matched prediction layer's spatial size."""

    def __init__(self, n_rotations, c1, c2, c_out, pool_after=(2,), rng=None, dtype=np.float32, parametrization="free"):
        rng = rng or np.random.default_rng(0)
        layers = [
            RConvLayer(3, 1, c1, n_rotations, rconv.SCALAR, parametrization, rng=rng, dtype=dtype),
            OrientationPool(n_rotations),
        ]
        if 1 in pool_after:
            layers.append(VfMaxPool(2))
        layers += [
            RConvLayer(3, 2 * c1, c2, n_rotations, rconv.VECTOR, parametrization, rng=rng, dtype=dtype),
            OrientationPool(n_rotations),
        ]
        if 2 in pool_after:
            layers.append(VfMaxPool(2))
        layers += [
            RConvLayer(1, 2 * c2, c_out, n_rotations, rconv.VECTOR, parametrization, rng=rng, dtype=dtype),
            OrientationPool(n_rotations),
        ]
        self.seq = Sequential(layers)

    def forward(self, x, training=True):
        return self.seq.forward(x, training)

    def backward(self, gy):
        return self.seq.backward(gy)

    def params(self):
        return self.seq.params()

    def grads(self):
        return self.seq.grads()

    def state(self):
        return self.seq.state()

    def apply_constraints(self):
        self.seq.apply_constraints()


ROI_GATE_OUTSIDE = 0.3


def roi_gate(shape_hw, rois, stride: int, dtype=np.float32) -> Tensor:
    """Spatial attention gate: 1 inside any region of interest, 0.3 outside.
    With no regions the gate is all-ones (gating disabled)."""
    h, w = shape_hw
    if not rois:
        return np.ones((h, w, 1), dtype=dtype)
    gate = np.full((h, w, 1), ROI_GATE_OUTSIDE, dtype=dtype)
    for r in rois:
        x0 = max(int(math.floor(r.box.xmin / stride)), 0)
        y0 = max(int(math.floor(r.box.ymin / stride)), 0)
        x1 = min(int(math.ceil(r.box.xmax / stride)), w)
        y1 = min(int(math.ceil(r.box.ymax / stride)), h)
        if x1 > x0 and y1 > y0:
            gate[y0:y1, x0:x1, 0] = 1.0
    return gate


class AttentionMerge(Layer):
    """Fuse a prediction-layer field stack with the matching pyramid-stage
    stack: normalize both, combine (channel concatenation by default,
    elementwise product behind a switch), apply the region-of-interest gate,
    then reform with a 3x3 and a 1x1 rotation conv, orientation-pooled."""

    def __init__(self, n_rotations, c_ssd, c_lipm, c_out, mode="concat", rng=None, dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        if mode not in ("concat", "product"):
            raise ConfigError(f"unknown attention mode {mode!r}")
        if mode == "product" and c_ssd != c_lipm:
            raise ConfigError("product attention needs equal channel counts")
        self.mode = mode
        self.norm_ssd = FieldNorm(c_ssd)
        self.norm_lipm = FieldNorm(c_lipm)
        c_mix = c_ssd + c_lipm if mode == "concat" else c_ssd
        mid = max(c_out, c_mix // 2)
        self.conv3 = RConvLayer(3, 2 * c_mix, mid, n_rotations, rconv.VECTOR, rng=rng, dtype=dtype)
        self.op3 = OrientationPool(n_rotations)
        self.conv1 = RConvLayer(1, 2 * mid, c_out, n_rotations, rconv.VECTOR, rng=rng, dtype=dtype)
        self.op1 = OrientationPool(n_rotations)
        self._cache = None

    def forward(self, ssd_feat, lipm_feat, gates=None, training=True):
        """gates: optional [N, H, W, 1] per-image spatial attention maps
        (see `roi_gate`); None disables gating. The gate is a constant in the
        backward pass, matching its binary definition."""
        if ssd_feat.shape[1:3] != lipm_feat.shape[1:3]:
            raise ShapeError(
                f"spatial mismatch {ssd_feat.shape} vs {lipm_feat.shape}"
            )
        a = self.norm_ssd.forward(ssd_feat, training)
        b = self.norm_lipm.forward(lipm_feat, training)
        if self.mode == "concat":
            mix = np.concatenate([a, b], axis=3)
        else:
            mix = a * b
        gated = mix if gates is None else mix * gates
        self._cache = (a, b, gates)
        h = self.op3.forward(self.conv3.forward(gated, training), training)
        return self.op1.forward(self.conv1.forward(h, training), training)

    def backward(self, gy):
        g = self.conv3.backward(self.op3.backward(self.conv1.backward(self.op1.backward(gy))))
        a, b, gates = self._cache
        if gates is not None:
            g = g * gates
        ca = a.shape[3]
        if self.mode == "concat":
            ga, gb = g[..., :ca], g[..., ca:]
        else:
            ga, gb = g * b, g * a
        return self.norm_ssd.backward(ga), self.norm_lipm.backward(gb)

    def params(self):
        return _merge_params(
            conv3=self.conv3, conv1=self.conv1
        )

    def grads(self):
        return _merge_grads(conv3=self.conv3, conv1=self.conv1)

    def state(self):
        out = {}
        for name, l in (("norm_ssd", self.norm_ssd), ("norm_lipm", self.norm_lipm)):
            for k, v in l.state().items():
                out[f"{name}.{k}"] = v
        return out

    def apply_constraints(self):
        self.conv3.apply_constraints()
        self.conv1.apply_constraints()


class FeatureFusion(Layer):
    """Merge the previous (finer) level into the current one: each side goes
    through a 1x1 rotation conv and magnitude normalization, the finer side
    is vector-average-pooled 2x, the fields are added elementwise, and the
    sum is reformed by a 3x3 then 1x1 rotation conv with orientation pooling
    (the ReLU lives in the pooling's magnitude gate). The per-branch
    normalization keeps the two addends on comparable scale, so neither level
    dominates the sum."""

    def __init__(self, n_rotations, c_prev, c_cur, c_out, rng=None, dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        mid = max(c_out, min(c_prev, c_cur))
        self.pre_prev = RConvLayer(1, 2 * c_prev, mid, n_rotations, rconv.VECTOR, rng=rng, dtype=dtype)
        self.op_prev = OrientationPool(n_rotations)
        self.norm_prev = FieldNorm(mid)
        self.pre_cur = RConvLayer(1, 2 * c_cur, mid, n_rotations, rconv.VECTOR, rng=rng, dtype=dtype)
        self.op_cur = OrientationPool(n_rotations)
        self.norm_cur = FieldNorm(mid)
        self.pool = FieldAvgPool2()
        self.conv3 = RConvLayer(3, 2 * mid, mid, n_rotations, rconv.VECTOR, rng=rng, dtype=dtype)
        self.op3 = OrientationPool(n_rotations)
        self.conv1 = RConvLayer(1, 2 * mid, c_out, n_rotations, rconv.VECTOR, rng=rng, dtype=dtype)
        self.op1 = OrientationPool(n_rotations)

    def forward(self, r_prev, r_cur, training=True):
        if r_prev.shape[1] != 2 * r_cur.shape[1] or r_prev.shape[2] != 2 * r_cur.shape[2]:
            raise ShapeError(
                f"fusion needs adjacent levels, got {r_prev.shape} and {r_cur.shape}"
            )
        a = self.pool.forward(
            self.norm_prev.forward(
                self.op_prev.forward(self.pre_prev.forward(r_prev, training), training),
                training,
            ),
            training,
        )
        b = self.norm_cur.forward(
            self.op_cur.forward(self.pre_cur.forward(r_cur, training), training),
            training,
        )
        s = a + b
        h = self.op3.forward(self.conv3.forward(s, training), training)
        return self.op1.forward(self.conv1.forward(h, training), training)

    def backward(self, gy):
        gs = self.conv3.backward(self.op3.backward(self.conv1.backward(self.op1.backward(gy))))
        g_prev = self.pre_prev.backward(
            self.op_prev.backward(self.norm_prev.backward(self.pool.backward(gs)))
        )
        g_cur = self.pre_cur.backward(self.op_cur.backward(self.norm_cur.backward(gs)))
        return g_prev, g_cur

    def params(self):
        return _merge_params(
            pre_prev=self.pre_prev, pre_cur=self.pre_cur, conv3=self.conv3, conv1=self.conv1
        )

    def grads(self):
        return _merge_grads(
            pre_prev=self.pre_prev, pre_cur=self.pre_cur, conv3=self.conv3, conv1=self.conv1
        )

    def state(self):
        out = {}
        for name, l in (("norm_prev", self.norm_prev), ("norm_cur", self.norm_cur)):
            for k, v in l.state().items():
                out[f"{name}.{k}"] = v
        return out

    def apply_constraints(self):
        for l in (self.pre_prev, self.pre_cur, self.conv3, self.conv1):
            l.apply_constraints()


def _merge_params(**layers):
    out = {}
    for name, l in layers.items():
        for k, v in l.params().items():
            out[f"{name}.{k}"] = v
    return out


def _merge_grads(**layers):
    out = {}
    for name, l in layers.items():
        for k, v in l.grads().items():
            out[f"{name}.{k}"] = v
    return out


# ---------------------------------------------------------------------------
# orientation regression head


def tanh_unit_forward(rp, rq):
    """tanh both raw outputs and project onto the unit circle.

    Returns (s_hat, c_hat, degenerate, cache); a zero-norm raw pair maps to
    angle 0 (s=0, c=1) and is flagged rather than dividing by zero.
    """
    tp = np.tanh(rp)
    tq = np.tanh(rq)
    norm = np.hypot(tp, tq)
    degenerate = norm < 1e-12
    safe = np.where(degenerate, 1.0, norm)
    c_hat = np.where(degenerate, 1.0, tp / safe)
    s_hat = np.where(degenerate, 0.0, tq / safe)
    return s_hat, c_hat, degenerate, (tp, tq, safe, degenerate)


def tanh_unit_backward(cache, gs, gc):
    """Adjoint of `tanh_unit_forward`; returns (grad_rp, grad_rq)."""
    tp, tq, norm, degenerate = cache
    gs = np.where(degenerate, 0.0, gs)
    gc = np.where(degenerate, 0.0, gc)
    n3 = norm**3
    gtp = gc * (tq**2) / n3 - gs * tp * tq / n3
    gtq = gs * (tp**2) / n3 - gc * tp * tq / n3
    return gtp * (1.0 - tp**2), gtq * (1.0 - tq**2)


class Linear(Layer):
    """Dense layer for the non-equivariant baseline head."""

    def __init__(self, d_in, d_out, rng=None, dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        std = math.sqrt(1.0 / d_in)
        self.w = rng.normal(0.0, std, size=(d_in, d_out)).astype(dtype)
        self.b = np.zeros(d_out, dtype=dtype)
        self.gw = np.zeros_like(self.w)
        self.gb = np.zeros_like(self.b)
        self._cache = None

    def params(self):
        return {"w": self.w, "b": self.b}

    def grads(self):
        return {"w": self.gw, "b": self.gb}

    def forward(self, x: Tensor, training: bool = True) -> Tensor:
        self._cache = x
        return x @ self.w + self.b

    def backward(self, gy: Tensor) -> Tensor:
        x = self._cache
        self.gw += x.T @ gy
        self.gb += gy.sum(axis=0)
        return gy @ self.w.T


class OrientationHead(Layer):
    """Equivariant angle regressor on a pooled field vector.

    Combines the C input vectors with per-channel complex weights (a scaled
    rotation, the only linear map that commutes with simultaneous rotation of
    all field vectors), applies tanh to the two outputs and normalizes them to
    the unit circle. Predicted angle = atan2(s, c). The codebook attribute
    holds the (sin, cos) pairs of the sampled filter orientations, the targets
    the last layer is trained to hit.
    """

    def __init__(self, n_fields: int, n_rotations: int, rng=None, dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        std = math.sqrt(1.0 / n_fields)
        self.wr = rng.normal(0.0, std, size=n_fields).astype(dtype)
        self.wi = rng.normal(0.0, std, size=n_fields).astype(dtype)
        self.gwr = np.zeros_like(self.wr)
        self.gwi = np.zeros_like(self.wi)
        cos_t, sin_t = rconv.angle_table(n_rotations)
        # mappings r = 1..n of (sin, cos) at angles 2*pi*r/n
        self.codebook = np.stack(
            [np.roll(sin_t, -1), np.roll(cos_t, -1)], axis=1
        )
        self._cache = None

    def params(self):
        return {"wr": self.wr, "wi": self.wi}

    def grads(self):
        return {"wr": self.gwr, "wi": self.gwi}

    def forward(self, vectors: Tensor, training: bool = True):
        """vectors: [N, 2C] interleaved (p, q). Returns [N, 2] = (sin, cos)
        unit pairs and a degeneracy flag array."""
        p = vectors[:, 0::2]
        q = vectors[:, 1::2]
        rp = p @ self.wr - q @ self.wi
        rq = q @ self.wr + p @ self.wi
        s_hat, c_hat, degenerate, tcache = tanh_unit_forward(rp, rq)
        self._cache = (vectors, tcache)
        return np.stack([s_hat, c_hat], axis=1), degenerate

    def backward(self, g_out: Tensor) -> Tensor:
        """g_out: [N, 2] gradients w.r.t. (sin, cos). Returns gradient w.r.t.
        the input vectors."""
        vectors, tcache = self._cache
        grp, grq = tanh_unit_backward(tcache, g_out[:, 0], g_out[:, 1])
        p = vectors[:, 0::2]
        q = vectors[:, 1::2]
        self.gwr += grp @ p + grq @ q
        self.gwi += grq @ p - grp @ q
        gvec = np.empty_like(vectors)
        gvec[:, 0::2] = grp[:, None] * self.wr[None, :] + grq[:, None] * self.wi[None, :]
        gvec[:, 1::2] = grq[:, None] * self.wr[None, :] - grp[:, None] * self.wi[None, :]
        return gvec


def predict_angle(sin_cos: np.ndarray) -> np.ndarray:
    """Angle in degrees [0, 360) from (sin, cos) rows."""
    a = np.degrees(np.arctan2(sin_cos[:, 0], sin_cos[:, 1]))
    return np.where(a < 0, a + 360.0, a)


def center_field_average(stack: Tensor, window: int):
    """Mean field vector over the centered window x window patch, per channel.
    The center window maps to itself under quarter-turn rotations of the map,
    so the averaged vector inherits the field's covariance. Returns [N, 2C]."""
    n, h, w, c = stack.shape
    y0 = (h - window) // 2
    x0 = (w - window) // 2
    patch = stack[:, y0 : y0 + window, x0 : x0 + window, :]
    return patch.mean(axis=(1, 2)), (stack.shape, y0, x0, window)


def center_field_average_backward(cache, g: Tensor) -> Tensor:
    shape, y0, x0, window = cache
    out = np.zeros(shape, dtype=g.dtype)
    out[:, y0 : y0 + window, x0 : x0 + window, :] = (
        g[:, None, None, :] / (window * window)
    )
    return out

"""Joint visual-textual attention encoder and concept decoders.

Shapes used throughout (per instance):

* features ``V``: ``channels x regions`` where ``regions = grid_h * grid_w``
  in row-major cell order;
* phrase ``t``: ``embed_dim`` vector;
* attention: ``regions`` nonnegative weights summing to one.

A concept batch is passed around as a ``(k, channels, regions)`` feature stack
plus a ``(k, embed_dim)`` phrase stack.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import ConfigError, NumericError, ShapeError
from .numcore import (
    affine,
    affine_backward,
    relu,
    relu_backward,
    softmax,
    softmax_backward,
    softmax_cross_entropy_backward,
)

LOSS_MODES = ("ic", "cc", "icc")
# (common weight, independent weight)
LOSS_WEIGHTS = {"icc": (1.0, 1.0), "ic": (0.0, 1.0), "cc": (1.0, 0.0)}


@dataclass(frozen=True)
class HyperParams:
    """Model dimensions.

    ``attn_widths`` are the output widths of the four attention layers; the
    last must be 1 so the stack emits one logit per region.
    """

    channels: int
    embed_dim: int
    grid_h: int
    grid_w: int
    num_concepts: int
    attn_widths: tuple[int, int, int, int] = (64, 32, 16, 1)
    proj_channels: int = 16
    concept_batch_size: int = 5

    def __post_init__(self) -> None:
        object.__setattr__(self, "attn_widths", tuple(int(w) for w in self.attn_widths))
        if len(self.attn_widths) != 4:
            raise ConfigError(f"attn_widths must have 4 entries, got {self.attn_widths}")
        if self.attn_widths[-1] != 1:
            raise ConfigError("final attention width must be 1")
        counts = (self.channels, self.embed_dim, self.grid_h, self.grid_w,
                  self.proj_channels, self.concept_batch_size, *self.attn_widths)
        if min(counts) < 1:
            raise ConfigError(f"all dimensions must be >= 1: {self}")
        if self.num_concepts < 2:
            raise ConfigError("num_concepts must be >= 2")

    @property
    def regions(self) -> int:
        return self.grid_h * self.grid_w

    def layout(self) -> list[tuple[str, tuple[int, ...]]]:
        """Parameter names and shapes in flattening order."""
        shapes: list[tuple[str, tuple[int, ...]]] = []
        fan_in = self.channels + self.embed_dim
        for i, width in enumerate(self.attn_widths):
            shapes.append((f"attn{i}.W", (width, fan_in)))
            # a bias on the final layer only shifts every region logit equally,
            # which the softmax cancels, so that layer has none
            if i < 3:
                shapes.append((f"attn{i}.b", (width,)))
            fan_in = width
        flat_dim = self.proj_channels * self.regions
        shapes += [
            ("proj.W", (self.proj_channels, self.channels)),
            ("proj.b", (self.proj_channels,)),
            ("common.W", (self.num_concepts, flat_dim)),
            ("common.b", (self.num_concepts,)),
            ("indep.W", (self.num_concepts, flat_dim)),
            ("indep.b", (self.num_concepts,)),
        ]
        return shapes

    @property
    def num_params(self) -> int:
        return sum(math.prod(s) for _, s in self.layout())

    def to_dict(self) -> dict:
        d = asdict(self)
        d["attn_widths"] = list(self.attn_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "HyperParams":
        return cls(**{**d, "attn_widths": tuple(d["attn_widths"])})


class ModelParams:
    """All learnable weights backed by one contiguous float64 buffer.

    Named entries (``params["attn0.W"]``) are views into ``flat``, so an
    in-place optimizer update on ``flat`` is immediately visible through them.
    """

    def __init__(self, hyper: HyperParams, flat: np.ndarray | None = None):
        self.hyper = hyper
        size = hyper.num_params
        if flat is None:
            flat = np.zeros(size)
        flat = np.ascontiguousarray(flat, dtype=np.float64)
        if flat.shape != (size,):
            raise ShapeError(f"flat parameter array has shape {flat.shape}, expected ({size},)")
        self.flat = flat
        self._views: dict[str, np.ndarray] = {}
        offset = 0
        for name, shape in hyper.layout():
            count = math.prod(shape)
            self._views[name] = flat[offset:offset + count].reshape(shape)
            offset += count

    def __getitem__(self, name: str) -> np.ndarray:
        return self._views[name]

    def names(self) -> list[str]:
        return list(self._views)

    def slice_of(self, name: str) -> slice:
        offset = 0
        for n, shape in self.hyper.layout():
            count = math.prod(shape)
            if n == name:
                return slice(offset, offset + count)
            offset += count
        raise KeyError(name)

    def copy(self) -> "ModelParams":
        return ModelParams(self.hyper, self.flat.copy())


def init_params(hyper: HyperParams, rng: np.random.Generator, zero_logit_layer: bool = True) -> ModelParams:
    """Glorot-uniform weights, zero biases.

    With ``zero_logit_layer`` the final attention layer starts at zero, so the
    initial attention is exactly uniform.
    """
    params = ModelParams(hyper)
    for name, shape in hyper.layout():
        if name.endswith(".W"):
            limit = math.sqrt(6.0 / (shape[0] + shape[1]))
            params[name][...] = rng.uniform(-limit, limit, size=shape)
    if zero_logit_layer:
        params["attn3.W"][...] = 0.0
    return params


@dataclass
class AttentionMap:
    weights: np.ndarray
    grid_h: int
    grid_w: int

    def __post_init__(self) -> None:
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if self.weights.size != self.grid_h * self.grid_w:
            raise ShapeError(
                f"attention has {self.weights.size} weights for a {self.grid_h}x{self.grid_w} grid"
            )


@dataclass
class BatchOutputs:
    attention: np.ndarray  # (k, regions)
    independent: np.ndarray  # (k, C)
    common: np.ndarray  # (C,)
    cache: dict = field(default_factory=dict, repr=False)


def _check_inputs(V: np.ndarray, t: np.ndarray, hyper: HyperParams) -> None:
    if V.shape[-2:] != (hyper.channels, hyper.regions):
        raise ShapeError(
            f"feature grid {V.shape[-2:]} does not match model (channels={hyper.channels}, regions={hyper.regions})"
        )
    if t.shape[-1] != hyper.embed_dim:
        raise ShapeError(f"phrase embedding dim {t.shape[-1]} does not match model embed_dim={hyper.embed_dim}")


def concat_tile(V: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Stack ``t`` under every column of ``V``: ``(m + l) x n``.

    Works on a single instance or on ``(k, m, n)`` / ``(k, l)`` stacks.
    """
    V = np.asarray(V, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if V.ndim - 1 != t.ndim or V.shape[:-2] != t.shape[:-1]:
        raise ShapeError(f"concat_tile: features {V.shape} and phrase {t.shape} are not aligned")
    tiled = np.broadcast_to(t[..., :, None], t.shape + (V.shape[-1],))
    return np.concatenate([V, tiled], axis=-2)


def _attention_stack(X0: np.ndarray, params: ModelParams) -> tuple[np.ndarray, list]:
    """Run the four attention layers; return logits (..., n) and the cache."""
    acts = [X0]
    pres = []
    h = X0
    for i in range(3):
        pre = affine(params[f"attn{i}.W"], params[f"attn{i}.b"], h)
        pres.append(pre)
        h = relu(pre)
        acts.append(h)
    # raw logits, no ReLU before the softmax
    h = params["attn3.W"] @ h
    pres.append(h)
    return h[..., 0, :], list(zip(acts, pres))


def attention_forward(V: np.ndarray, t: np.ndarray, params: ModelParams) -> AttentionMap:
    """Attention over grid regions for one (features, phrase) pair."""
    hyper = params.hyper
    _check_inputs(V, t, hyper)
    logits, _ = _attention_stack(concat_tile(V, t), params)
    return AttentionMap(softmax(logits), hyper.grid_h, hyper.grid_w)


def attended_independent(attn, V: np.ndarray, params: ModelParams) -> np.ndarray:
    """Scale each region column of ``V`` by its weight, then project channels.

    Accepts an ``AttentionMap`` or raw weights, single or stacked. Output keeps
    the spatial dimension: ``proj_channels x regions``.
    """
    w = attn.weights if isinstance(attn, AttentionMap) else np.asarray(attn, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    if w.shape[-1] != V.shape[-1]:
        raise ShapeError(f"attention over {w.shape[-1]} regions applied to {V.shape[-1]} regions")
    return affine(params["proj.W"], params["proj.b"], V * w[..., None, :])


def aggregate_common(attended) -> np.ndarray:
    """Elementwise sum of the per-instance projected features."""
    items = [np.asarray(a, dtype=np.float64) for a in attended]
    if not items:
        raise ShapeError("aggregate_common needs at least one instance")
    shape = items[0].shape
    for a in items[1:]:
        if a.shape != shape:
            raise ShapeError(f"aggregate_common: inconsistent shapes {shape} and {a.shape}")
    return np.sum(items, axis=0)


def decode(flat: np.ndarray, head: str, params: ModelParams) -> np.ndarray:
    """Concept distribution from a flattened ``proj_channels x regions`` block.

    ``head`` is ``"common"`` or ``"independent"``. The flattening order is
    channel-major then region, i.e. ``block.reshape(-1)``.
    """
    key = {"common": "common", "independent": "indep"}.get(head)
    if key is None:
        raise ValueError(f"unknown head {head!r}")
    W, b = params[f"{key}.W"], params[f"{key}.b"]
    flat = np.asarray(flat, dtype=np.float64)
    if flat.shape[-1] != W.shape[1]:
        raise ShapeError(f"decode: flattened length {flat.shape[-1]}, head expects {W.shape[1]}")
    return softmax(flat @ W.T + b)


def forward_batch(V: np.ndarray, t: np.ndarray, params: ModelParams) -> BatchOutputs:
    """Attention, independent and common predictions for one concept batch.

    Args:
        V: ``(k, channels, regions)`` standardized features.
        t: ``(k, embed_dim)`` standardized phrase embeddings.
        params: shared model weights.
    """
    hyper = params.hyper
    V = np.asarray(V, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if V.ndim != 3 or t.ndim != 2:
        raise ShapeError(f"forward_batch expects stacked inputs, got features {V.shape}, phrases {t.shape}")
    if V.shape[0] != hyper.concept_batch_size:
        raise ConfigError(f"concept batch has {V.shape[0]} instances, model expects k={hyper.concept_batch_size}")
    _check_inputs(V, t, hyper)
    k = V.shape[0]

    X0 = concat_tile(V, t)
    logits, layers = _attention_stack(X0, params)
    attn = softmax(logits)
    A = V * attn[:, None, :]
    F = affine(params["proj.W"], params["proj.b"], A)
    G = F.sum(axis=0)
    y_ind = decode(F.reshape(k, -1), "independent", params)
    y_com = decode(G.reshape(-1), "common", params)
    cache = {"V": V, "layers": layers, "A": A, "F": F, "G": G}
    return BatchOutputs(attention=attn, independent=y_ind, common=y_com, cache=cache)


def _finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite gradient in layer {name}")


def backward_from_outputs(
    out: BatchOutputs, params: ModelParams, target: int, mode: str, scale: float = 1.0
) -> np.ndarray:
    """Flat gradient of the surrogate loss, reusing cached forward values.

    ``scale`` multiplies the whole loss before differentiation.
    """
    if mode not in LOSS_WEIGHTS:
        raise ConfigError(f"unknown loss mode {mode!r}; expected one of {LOSS_MODES}")
    w_com, w_ind = LOSS_WEIGHTS[mode]
    hyper = params.hyper
    c = out.cache
    V, A, F, G = c["V"], c["A"], c["F"], c["G"]
    k = V.shape[0]
    grad = ModelParams(hyper)

    # decoder heads
    d_com = scale * w_com * softmax_cross_entropy_backward(out.common, target)
    grad["common.W"][...] = np.outer(d_com, G.reshape(-1))
    grad["common.b"][...] = d_com
    dG = (params["common.W"].T @ d_com).reshape(G.shape)

    d_ind = np.stack([softmax_cross_entropy_backward(p, target) for p in out.independent])
    d_ind *= scale * w_ind / k
    grad["indep.W"][...] = d_ind.T @ F.reshape(k, -1)
    grad["indep.b"][...] = d_ind.sum(axis=0)
    dF = (d_ind @ params["indep.W"]).reshape(F.shape) + dG[None]
    _finite("decoder heads", grad.flat)

    # channel projection
    dW, db, dA = affine_backward(dF, params["proj.W"], A)
    grad["proj.W"][...] = dW
    grad["proj.b"][...] = db
    _finite("projection", dW)

    # attention weights -> logits
    d_attn = (dA * V).sum(axis=1)
    d_logits = softmax_backward(d_attn, out.attention)
    dh = d_logits[:, None, :]
    for i in (3, 2, 1, 0):
        x_in, pre = c["layers"][i]
        if i < 3:
            dh = relu_backward(dh, pre)
        dW, db, dh = affine_backward(dh, params[f"attn{i}.W"], x_in)
        grad[f"attn{i}.W"][...] = dW
        if i < 3:
            grad[f"attn{i}.b"][...] = db
        _finite(f"attention layer {i}", dW)
    return grad.flat


def backward_batch(
    V: np.ndarray, t: np.ndarray, params: ModelParams, target: int, mode: str
) -> np.ndarray:
    """Exact gradient of the selected surrogate loss, as a flat array."""
    return backward_from_outputs(forward_batch(V, t, params), params, target, mode)


def attention_argmax_point(attn, image_h: float, image_w: float,
                           grid_h: int | None = None, grid_w: int | None = None) -> tuple[float, float]:
    """Pixel ``(x, y)`` at the center of the highest-weight cell.

    Ties go to the lowest row-major cell index.
    """
    if isinstance(attn, AttentionMap):
        weights, grid_h, grid_w = attn.weights, attn.grid_h, attn.grid_w
    else:
        weights = np.asarray(attn).reshape(-1)
    idx = int(np.argmax(weights))
    return cell_center(idx, grid_h, grid_w, image_h, image_w)


def cell_center(idx: int, grid_h: int, grid_w: int, image_h: float, image_w: float) -> tuple[float, float]:
    row, col = divmod(idx, grid_w)
    return ((col + 0.5) * image_w / grid_w, (row + 0.5) * image_h / grid_h)


def heatmap_pixels(attn: AttentionMap, image_h: int, image_w: int) -> np.ndarray:
    """Bilinear upsampling of cell-center values, rescaled to 0..255 uint8.

    Pixel centers outside the outermost cell centers are clamped to the edge.
    A constant field maps to an all-zero image.
    """
    grid = attn.weights.reshape(attn.grid_h, attn.grid_w)
    gy = np.clip((np.arange(image_h) + 0.5) * attn.grid_h / image_h - 0.5, 0, attn.grid_h - 1)
    gx = np.clip((np.arange(image_w) + 0.5) * attn.grid_w / image_w - 0.5, 0, attn.grid_w - 1)
    y0 = np.floor(gy).astype(int)
    x0 = np.floor(gx).astype(int)
    y1 = np.minimum(y0 + 1, attn.grid_h - 1)
    x1 = np.minimum(x0 + 1, attn.grid_w - 1)
    fy = (gy - y0)[:, None]
    fx = (gx - x0)[None, :]
    top = grid[y0][:, x0] * (1 - fx) + grid[y0][:, x1] * fx
    bottom = grid[y1][:, x0] * (1 - fx) + grid[y1][:, x1] * fx
    img = top * (1 - fy) + bottom * fy
    lo, hi = img.min(), img.max()
    # interpolation rounding leaves a constant field a few ulps from flat
    if hi - lo <= 1e-12 * max(abs(hi), abs(lo), 1e-300):
        return np.zeros((image_h, image_w), dtype=np.uint8)
    return np.rint((img - lo) / (hi - lo) * 255.0).astype(np.uint8)


def export_heatmap(attn: AttentionMap, image_h: int, image_w: int, path) -> Path:
    """Write the upsampled attention as a binary (P5) 8-bit PGM."""
    pixels = heatmap_pixels(attn, image_h, image_w)
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{image_w} {image_h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())
    return path


def read_pgm(path) -> np.ndarray:
    """Read a binary PGM written by ``export_heatmap``."""
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8, count=w * h).reshape(h, w)

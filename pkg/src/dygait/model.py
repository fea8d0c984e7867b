"""The DyGait network.

Pipeline: LTA stem -> DAM blocks (with 2x2 spatial max pooling after selected
blocks) -> temporal max (TA) -> horizontal strip mapping (HM). All
convolutions are bias-free so a temporally constant input yields an exactly
zero dynamic branch.
"""
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from dygait import core
from dygait.core import ConvKernel3, ShapeError, Tensor

MODES = ("both", "gfe_only", "dfe_only")


class SequenceTooShortError(ValueError):
    pass


@dataclass
class ModelConfig:
    in_channels: int = 1
    stage_channels: tuple = (32, 64, 128)
    pool_after: tuple = (0, 1)
    strips: int = 16
    embed_dim: int = 128
    leaky_slope: float = 0.01
    input_size: tuple = (64, 44)
    ablation: str = "both"  # DAM branch mode used for training and embedding

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        self.pool_after = tuple(sorted({int(b) for b in self.pool_after}))
        self.input_size = tuple(int(s) for s in self.input_size)
        self.validate()

    @property
    def num_dam_blocks(self):
        return len(self.stage_channels)

    def output_hw(self):
        h, w = self.input_size
        for b in self.pool_after:
            if b < self.num_dam_blocks:
                h, w = h // 2, w // 2
        return h, w

    def validate(self):
        if self.num_dam_blocks < 1:
            raise ValueError("at least one DAM block is required")
        if any(c < 1 for c in self.stage_channels) or self.in_channels < 1:
            raise ValueError("channel counts must be positive")
        if any(b < 0 or b >= self.num_dam_blocks for b in self.pool_after):
            raise ValueError(f"pool_after {self.pool_after} references a block outside 0..{self.num_dam_blocks - 1}")
        if not 0 < self.leaky_slope < 1:
            raise ValueError("leaky_slope must lie in (0, 1)")
        h, w = self.input_size
        for b in self.pool_after:
            if h % 2 or w % 2:
                raise ValueError(f"input {self.input_size} cannot be 2x2 pooled after block {b}")
            h, w = h // 2, w // 2
        if self.strips < 1 or h % self.strips:
            raise ValueError(f"strip count {self.strips} must divide the backbone output height {h}")
        if self.embed_dim < 1:
            raise ValueError("embed_dim must be positive")
        if self.ablation not in MODES:
            raise ValueError(f"unknown ablation mode {self.ablation!r}; expected one of {MODES}")

    def with_blocks(self, n):
        """Same widths and pooling truncated (or extended with the last width) to ``n`` blocks."""
        chans = list(self.stage_channels[:n])
        while len(chans) < n:
            chans.append(self.stage_channels[-1])
        return ModelConfig(
            in_channels=self.in_channels,
            stage_channels=tuple(chans),
            pool_after=tuple(b for b in self.pool_after if b < n),
            strips=self.strips,
            embed_dim=self.embed_dim,
            leaky_slope=self.leaky_slope,
            input_size=self.input_size,
            ablation=self.ablation,
        )


def param_shapes(config, n_classes=None):
    """Ordered name -> shape table for every learnable tensor."""
    c0 = config.stage_channels[0]
    shapes = OrderedDict()
    shapes["lta.conv1"] = (c0, config.in_channels, 3, 3, 3)
    shapes["lta.conv2"] = (c0, c0, 3, 1, 1)
    c_in = c0
    for b, c_out in enumerate(config.stage_channels):
        shapes[f"dam{b}.afm"] = (c_out, c_in, 3, 3, 3)
        shapes[f"dam{b}.dfe"] = (c_out, c_in, 3, 3, 3)
        shapes[f"dam{b}.gfe"] = (c_out, c_in, 1, 3, 3)
        c_in = c_out
    shapes["hm"] = (config.strips, config.embed_dim, c_in)
    if n_classes is not None:
        shapes["cls.weight"] = (config.strips, n_classes, config.embed_dim)
        shapes["cls.bias"] = (config.strips, n_classes)
    return shapes


class ModelParams(OrderedDict):
    """Named parameter tensors. Kernels are assembled on demand with the right stride and padding."""

    def kernel(self, name):
        w = self[name]
        kt, kh, kw = w.shape[2:]
        if name == "lta.conv2":
            return ConvKernel3(w, stride_t=3, padding=(0, 0, 0))
        return ConvKernel3(w, stride_t=1, padding=(kt // 2, kh // 2, kw // 2))

    def block(self, b):
        return {part: self.kernel(f"dam{b}.{part}") for part in ("afm", "dfe", "gfe")}

    @property
    def n_classes(self):
        return self["cls.bias"].shape[1] if "cls.bias" in self else None

    def trainable(self):
        return [t for t in self.values() if t.requires_grad]

    def astype(self, dtype):
        out = ModelParams()
        for name, t in self.items():
            out[name] = Tensor(t.data.astype(dtype, copy=True), requires_grad=t.requires_grad, name=name)
        return out

    def copy(self):
        out = ModelParams()
        for name, t in self.items():
            out[name] = Tensor(t.data.copy(), requires_grad=t.requires_grad, name=name)
        return out


def check_params(params, config):
    expected = param_shapes(config, params.n_classes)
    got = OrderedDict((k, v.shape) for k, v in params.items())
    if got != expected:
        raise ShapeError(f"parameters do not match the model config: expected {dict(expected)}, got {dict(got)}")


# ---------------------------------------------------------------- blocks

def lta_forward(x, params, config):
    """Local temporal aggregation: 3x3x3 conv, then a stride-3 temporal conv; T -> T // 3."""
    x = core.as_tensor(x)
    t = x.shape[-3]
    if t < 3:
        raise SequenceTooShortError(f"LTA needs at least 3 frames, got {t}")
    slope = config.leaky_slope
    y = core.leaky_relu(core.conv3d(x, params.kernel("lta.conv1")), slope)
    return core.leaky_relu(core.conv3d(y, params.kernel("lta.conv2")), slope)


def gait_template(x):
    return core.mean_over_time(x)


def dynamic_difference(x):
    return core.subtract_broadcast(x, gait_template(x))


def dam_forward_ablated(x, block, mode="both", slope=0.01, trace=None):
    """One DAM block. ``mode`` drops the dynamic (gfe_only) or global (dfe_only) branch.

    If ``trace`` is a dict it receives the intermediate maps ``x_d``,
    ``y_dfe``, ``y_gfe``, ``y_dam`` and ``y_afm`` (absent branches are None).
    """
    if mode not in MODES:
        raise ValueError(f"unknown DAM mode {mode!r}; expected one of {MODES}")
    x = core.as_tensor(x)
    x_d = y_dfe = y_gfe = None
    if mode != "gfe_only":
        x_d = dynamic_difference(x)
        y_dfe = core.conv3d(x_d, block["dfe"])
    if mode != "dfe_only":
        y_gfe = core.conv3d(x, block["gfe"])
    if mode == "both":
        pre = core.add(y_gfe, y_dfe)
    else:
        pre = y_gfe if y_dfe is None else y_dfe
    y_dam = core.leaky_relu(pre, slope)
    y_afm = core.add(core.leaky_relu(core.conv3d(x, block["afm"]), slope), y_dam)
    if trace is not None:
        trace.update(x_d=x_d, y_dfe=y_dfe, y_gfe=y_gfe, y_dam=y_dam, y_afm=y_afm)
    return y_afm


def dam_forward(x, block, slope=0.01, trace=None):
    return dam_forward_ablated(x, block, "both", slope, trace)


def backbone_forward(x, params, config, mode=None, trace=None):
    """Stack of DAM blocks on the LTA output.

    ``trace``, when a list, receives one dict per block with the block's
    intermediates plus ``out`` (the block output after any pooling).
    """
    mode = config.ablation if mode is None else mode
    for b in range(config.num_dam_blocks):
        block_trace = {} if trace is not None else None
        x = dam_forward_ablated(x, params.block(b), mode, config.leaky_slope, block_trace)
        if b in config.pool_after:
            x = core.maxpool_spatial(x, (2, 2))
        if trace is not None:
            block_trace["out"] = x
            trace.append(block_trace)
    return x


def temporal_aggregation(x):
    return core.max_over_time(x)


def horizontal_mapping(x, params, config):
    """Strip pooling (max + mean per strip) followed by one linear map per strip; returns (..., S, d)."""
    pooled = core.strip_pool(x, config.strips)
    return core.strip_linear(pooled, params["hm"])


def as_input(frames, dtype=None):
    """Silhouette frames (T, H, W) or (N, T, H, W) -> single-channel feature map."""
    a = np.asarray(frames)
    if dtype is not None:
        a = a.astype(dtype, copy=False)
    if a.ndim == 3:
        return a[None]
    if a.ndim == 4:
        return a[:, None]
    raise ShapeError(f"expected frames shaped (T,H,W) or (N,T,H,W), got {a.shape}")


def network_forward(x, params, config, mode=None, trace=None):
    """LTA -> backbone -> TA -> HM. ``x`` is (C,T,H,W) or (N,C,T,H,W); returns (S, d) or (N, S, d).

    ``mode`` defaults to ``config.ablation``."""
    x = core.as_tensor(x)
    if x.shape[-2:] != tuple(config.input_size):
        raise ShapeError(f"input frames {x.shape[-2:]} do not match configured size {config.input_size}")
    y = lta_forward(x, params, config)
    y = backbone_forward(y, params, config, mode, trace)
    y = temporal_aggregation(y)
    return horizontal_mapping(y, params, config)


@dataclass
class Embedding:
    strips: np.ndarray  # (S, d)
    subject: str = ""
    condition: str = ""
    view: str = ""
    meta: dict = field(default_factory=dict)

    def flat(self):
        return self.strips.reshape(-1)


# ---------------------------------------------------------------- heatmaps

def _bilinear_weights(n_in, n_out):
    # half-pixel centres, edges clamped
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0, n_in - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    m = np.zeros((n_out, n_in))
    m[np.arange(n_out), lo] += 1 - frac
    m[np.arange(n_out), hi] += frac
    return m


def bilinear_resize(maps, size):
    """Resize (..., h, w) maps to (..., H, W) with separable bilinear interpolation."""
    h, w = maps.shape[-2:]
    ry = _bilinear_weights(h, size[0])
    rx = _bilinear_weights(w, size[1])
    return np.einsum("Hh,...hw,Ww->...HW", ry, maps, rx)


def activation_heatmap(frames, params, config, layer, mode=None):
    """Per-input-frame attention maps from the output of DAM block ``layer``.

    Mean |activation| over channels, bilinearly upsampled to the input size
    and min-max normalised per frame (an all-constant map normalises to 0).
    Block outputs run at T // 3 frames; input frame t reads block frame
    min(t // 3, T // 3 - 1). Returns (T, H, W) in [0, 1].
    """
    if not 0 <= layer < config.num_dam_blocks:
        raise IndexError(f"block index {layer} outside 0..{config.num_dam_blocks - 1}")
    x = as_input(frames, np.float64 if np.asarray(frames).dtype == np.float64 else np.float32)
    trace = []
    network_forward(x, params, config, mode, trace)
    act = trace[layer]["out"].data  # (C, T', h, w)
    energy = np.abs(act).mean(axis=0)
    up = bilinear_resize(energy, config.input_size)
    lo = up.min(axis=(1, 2), keepdims=True)
    span = up.max(axis=(1, 2), keepdims=True) - lo
    norm = np.where(span > 0, (up - lo) / np.where(span > 0, span, 1), 0.0)
    t_in = x.shape[-3]
    idx = np.minimum(np.arange(t_in) // 3, norm.shape[0] - 1)
    return norm[idx]

"""
A small holistically-nested network (HNN).

The trunk is a stack of stages of 3x3 conv + ReLU; every stage after the
first halves the resolution with a stride-2 convolution. Each stage feeds a
1x1 side classifier whose activation is bilinearly upsampled back to input
resolution. The fused activation is a learned weighted sum of the upsampled
side activations. All maps are trained with class-balanced cross-entropy.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import gridmath as gm
from .container import ContainerVersionError, read_container, write_container
from .preprocess import SlicePair, contour_from_mask

log = logging.getLogger(__name__)

MODEL_KIND = b"HNN1"
MODEL_VERSION = 1


class TrainingDivergence(RuntimeError):
    def __init__(self, epoch: int, learning_rate: float, loss: float):
        super().__init__(
            f"training diverged at epoch {epoch} (learning_rate={learning_rate}, loss={loss})"
        )
        self.epoch = epoch
        self.learning_rate = learning_rate


@dataclass(frozen=True)
class HnnConfig:
    num_stages: int = 3
    convs_per_stage: int = 2
    base_channels: int = 8
    stage_strides: tuple[int, ...] = (1, 2, 4)
    side_loss_weights: tuple[float, ...] | None = None
    learning_rate: float = 0.01
    epochs: int = 30
    batch_size: int = 1
    seed: int = 0
    balanced_fuse: bool = True
    kernel_size: int = 3

    def __post_init__(self):
        object.__setattr__(self, "stage_strides", tuple(int(s) for s in self.stage_strides))
        if self.side_loss_weights is None:
            object.__setattr__(self, "side_loss_weights", (1.0,) * self.num_stages)
        else:
            object.__setattr__(
                self, "side_loss_weights", tuple(float(a) for a in self.side_loss_weights)
            )
        if self.num_stages < 1:
            raise ValueError("num_stages must be >= 1")
        if len(self.stage_strides) != self.num_stages:
            raise ValueError(
                f"stage_strides has {len(self.stage_strides)} entries for {self.num_stages} stages"
            )
        prev = 1
        for s in self.stage_strides:
            if s not in (prev, 2 * prev):
                raise ValueError(
                    f"stage_strides must start at 1 or 2 and double at most per stage: {self.stage_strides}"
                )
            prev = s
        if len(self.side_loss_weights) != self.num_stages:
            raise ValueError("side_loss_weights needs one weight per stage")
        if any(a < 0 for a in self.side_loss_weights):
            raise ValueError("side_loss_weights must be non-negative")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.convs_per_stage < 1 or self.base_channels < 1:
            raise ValueError("convs_per_stage and base_channels must be positive")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd")

    def stage_channels(self, m: int) -> int:
        return min(self.base_channels * 2**m, self.base_channels * 4)

    def first_stride(self, m: int) -> int:
        return self.stage_strides[0] if m == 0 else self.stage_strides[m] // self.stage_strides[m - 1]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_strides"] = list(self.stage_strides)
        d["side_loss_weights"] = list(self.side_loss_weights)
        return d

    def architecture(self) -> dict:
        return {
            k: v
            for k, v in self.to_dict().items()
            if k in ("num_stages", "convs_per_stage", "base_channels", "stage_strides", "kernel_size")
        }


@dataclass(frozen=True)
class NetworkParams:
    config: HnnConfig
    trunk: tuple[tuple[gm.ConvLayer, ...], ...]
    side: tuple[gm.ConvLayer, ...]
    fusion: np.ndarray  # (M,)

    def __post_init__(self):
        m = self.config.num_stages
        if len(self.trunk) != m or len(self.side) != m:
            raise ValueError(f"expected {m} trunk stages and side classifiers")
        fusion = np.asarray(self.fusion, dtype=np.float64)
        if fusion.shape != (m,) or not np.all(np.isfinite(fusion)):
            raise ValueError("fusion weights must be M finite values")
        object.__setattr__(self, "fusion", fusion)

    def arrays(self) -> list[np.ndarray]:
        """All parameters in the declared (serialization) order."""
        out = []
        for stage in self.trunk:
            for layer in stage:
                out += [layer.weight, layer.bias]
        for layer in self.side:
            out += [layer.weight, layer.bias]
        out.append(self.fusion)
        return out

    def with_arrays(self, arrays: Sequence[np.ndarray]) -> "NetworkParams":
        it = iter(arrays)
        trunk = tuple(
            tuple(gm.ConvLayer(next(it), next(it), layer.stride) for layer in stage)
            for stage in self.trunk
        )
        side = tuple(gm.ConvLayer(next(it), next(it), 1) for _ in self.side)
        fusion = next(it)
        return NetworkParams(self.config, trunk, side, fusion)

    def with_fusion(self, h) -> "NetworkParams":
        return replace(self, fusion=np.asarray(h, dtype=np.float64))


@dataclass
class PredictionBundle:
    side_maps: list[np.ndarray]  # M maps (H, W)
    fused_map: np.ndarray  # (H, W)
    side_activations: list[np.ndarray] = field(repr=False, default_factory=list)
    fused_activation: np.ndarray | None = field(repr=False, default=None)

    def maps(self) -> list[np.ndarray]:
        return [self.fused_map, *self.side_maps]


def _he_uniform(rng, shape) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


def init_params(config: HnnConfig, rng=None) -> NetworkParams:
    """Fan-in scaled uniform weights, zero biases, fusion weights 1/M."""
    rng = np.random.default_rng(config.seed) if rng is None else rng
    k = config.kernel_size
    trunk = []
    c_in = 1
    for m in range(config.num_stages):
        c_out = config.stage_channels(m)
        stage = []
        for j in range(config.convs_per_stage):
            stride = config.first_stride(m) if j == 0 else 1
            w = _he_uniform(rng, (c_out, c_in, k, k))
            stage.append(gm.ConvLayer(w, np.zeros(c_out), stride))
            c_in = c_out
        trunk.append(tuple(stage))
    side = tuple(
        gm.ConvLayer(_he_uniform(rng, (1, config.stage_channels(m), 1, 1)), np.zeros(1), 1)
        for m in range(config.num_stages)
    )
    fusion = np.full(config.num_stages, 1.0 / config.num_stages)
    return NetworkParams(config, tuple(trunk), side, fusion)


def min_input_size(config: HnnConfig) -> int:
    """Smallest H (or W) that fills at least one cell of the deepest stride."""
    return config.stage_strides[-1]


def _prepare_input(params: NetworkParams, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3 and x.shape[0] == 1:
        x = x[0]
    if x.ndim != 2:
        raise gm.ShapeError(f"network input must be a single-channel (H, W) image, got {x.shape}")
    need = min_input_size(params.config)
    if min(x.shape) < need:
        raise gm.ShapeError(
            f"input {x.shape} too small for stride {params.config.stage_strides[-1]}; need >= {need}"
        )
    return x[None] / 255.0


def forward(params: NetworkParams, x):
    """Return ``(PredictionBundle, cache)`` for a single-channel image in [0, 255]."""
    inp = _prepare_input(params, x)
    h, w = inp.shape[1:]
    cache = {"input": inp, "conv_inputs": [], "pre_relu": [], "stage_out": [], "side_low": []}
    a = inp
    for stage in params.trunk:
        for layer in stage:
            cache["conv_inputs"].append(a)
            z = gm.conv2d_forward(a, layer)
            cache["pre_relu"].append(z)
            a = gm.relu(z)
        cache["stage_out"].append(a)
    side_acts = []
    for m, layer in enumerate(params.side):
        low = gm.conv2d_forward(cache["stage_out"][m], layer)
        cache["side_low"].append(low)
        side_acts.append(gm.bilinear_resize(low, h, w)[0])
    fused = np.zeros((h, w))
    for hm, act in zip(params.fusion, side_acts):
        fused += hm * act
    cache["side_acts"] = side_acts
    bundle = PredictionBundle(
        side_maps=[gm.sigmoid(a) for a in side_acts],
        fused_map=gm.sigmoid(fused),
        side_activations=side_acts,
        fused_activation=fused,
    )
    return bundle, cache


def class_balanced_bce(activations, gt):
    """
    Class-balanced cross-entropy on pre-sigmoid activations.

    ``beta = |negatives| / |pixels|`` weights the positive term and
    ``1 - beta`` the negative term. Returns ``(loss, d loss / d activations)``.
    """
    a = np.asarray(activations, dtype=np.float64)
    y = np.asarray(gt)
    if a.shape != y.shape:
        raise gm.ShapeError(f"activation shape {a.shape} != ground-truth shape {y.shape}")
    if a.size == 0:
        raise ValueError("empty image")
    pos = y.astype(bool)
    n_pos = int(pos.sum())
    beta = (a.size - n_pos) / a.size
    loss = -beta * gm.log_sigmoid(a[pos]).sum() - (1 - beta) * gm.log_sigmoid(-a[~pos]).sum()
    p = gm.sigmoid(a)
    grad = np.where(pos, -beta * (1.0 - p), (1.0 - beta) * p)
    return float(loss), grad


def plain_bce(activations, gt):
    """Unweighted cross-entropy, used when the fusion loss is not class-balanced."""
    a = np.asarray(activations, dtype=np.float64)
    pos = np.asarray(gt).astype(bool)
    if a.shape != pos.shape:
        raise gm.ShapeError(f"activation shape {a.shape} != ground-truth shape {pos.shape}")
    loss = -gm.log_sigmoid(a[pos]).sum() - gm.log_sigmoid(-a[~pos]).sum()
    p = gm.sigmoid(a)
    return float(loss), np.where(pos, p - 1.0, p)


def _fuse_loss_fn(params: NetworkParams):
    return class_balanced_bce if params.config.balanced_fuse else plain_bce


def side_loss(params: NetworkParams, x, gt, alpha=None) -> float:
    alpha = params.config.side_loss_weights if alpha is None else alpha
    if len(alpha) != params.config.num_stages:
        raise ValueError(f"alpha needs {params.config.num_stages} weights, got {len(alpha)}")
    bundle, _ = forward(params, x)
    return float(
        sum(am * class_balanced_bce(act, gt)[0] for am, act in zip(alpha, bundle.side_activations))
    )


def fuse_loss(params: NetworkParams, x, gt) -> float:
    bundle, _ = forward(params, x)
    return _fuse_loss_fn(params)(bundle.fused_activation, gt)[0]


def loss_and_grads(params: NetworkParams, x, gt, alpha=None):
    """
    Total objective ``L_side + L_fuse`` on one image and its gradient.

    Returns ``(side_loss, fuse_loss, grads)`` with ``grads`` aligned to
    :meth:`NetworkParams.arrays`.
    """
    alpha = params.config.side_loss_weights if alpha is None else alpha
    bundle, cache = forward(params, x)
    gt = np.asarray(gt)
    side_acts = cache["side_acts"]
    m_count = len(side_acts)

    l_side = 0.0
    d_acts = []
    for am, act in zip(alpha, side_acts):
        l, g = class_balanced_bce(act, gt)
        l_side += am * l
        d_acts.append(am * g)
    l_fuse, g_fuse = _fuse_loss_fn(params)(bundle.fused_activation, gt)
    d_fusion = np.array([np.sum(g_fuse * act) for act in side_acts])
    for m in range(m_count):
        d_acts[m] = d_acts[m] + params.fusion[m] * g_fuse

    # side classifiers
    d_stage_out = []
    side_grads = []
    for m, layer in enumerate(params.side):
        low = cache["side_low"][m]
        d_low = gm.bilinear_resize_backward(d_acts[m][None], low.shape[1], low.shape[2])
        dx, dw, db = gm.conv2d_backward(cache["stage_out"][m], layer, d_low)
        d_stage_out.append(dx)
        side_grads += [dw, db]

    # trunk, last layer first
    layers = [layer for stage in params.trunk for layer in stage]
    stage_end = np.cumsum([len(s) for s in params.trunk]) - 1
    trunk_grads = [None] * (2 * len(layers))
    d_a = np.zeros_like(cache["stage_out"][-1])
    for li in range(len(layers) - 1, -1, -1):
        hits = np.nonzero(stage_end == li)[0]
        if hits.size:
            d_a = d_a + d_stage_out[hits[0]]
        dz = gm.relu_backward(cache["pre_relu"][li], d_a)
        dx, dw, db = gm.conv2d_backward(cache["conv_inputs"][li], layers[li], dz)
        trunk_grads[2 * li], trunk_grads[2 * li + 1] = dw, db
        d_a = dx
    return float(l_side), float(l_fuse), trunk_grads + side_grads + [d_fusion]


def predict(params_i: NetworkParams, params_b: NetworkParams, x):
    """Interior and boundary prediction bundles for one image; no thresholding."""
    bi, _ = forward(params_i, x)
    bb, _ = forward(params_b, x)
    return bi, bb


# ---------------------------------------------------------------------------
# training

@dataclass
class TrainResult:
    params: NetworkParams
    loss_curve: list[float]
    initial_loss: float
    used_slices: int


def _slice_key(sp: SlicePair):
    digest = hashlib.sha1(np.ascontiguousarray(sp.image, dtype=np.float64).tobytes()).hexdigest()
    return (sp.case_id, sp.slice_index, digest)


def target_of(sp: SlicePair, target: str) -> np.ndarray:
    if target == "interior":
        return sp.interior_gt
    if target == "boundary":
        return sp.boundary_gt
    if target == "contour":
        return contour_from_mask(sp.interior_gt)
    raise ValueError(f"target must be 'interior', 'boundary' or 'contour', got {target!r}")


def train(config: HnnConfig, data: Sequence[SlicePair], target: str = "interior") -> TrainResult:
    """
    Plain mini-batch SGD on ``(L_side + L_fuse) / pixels`` per image.

    Slices whose target map has no foreground are dropped up front: with the
    class-balanced weighting their loss and gradient are identically zero.
    Training order is derived from the seed and each slice's identity, never
    from the order of ``data``.
    """
    if not data:
        raise ValueError("no training slices")
    slices = sorted(data, key=_slice_key)
    slices = [sp for sp in slices if target_of(sp, target).any()]
    if not slices:
        raise ValueError(f"no training slice has {target} foreground")

    rng = np.random.default_rng(config.seed)
    params = init_params(config, rng)
    arrays = [a.copy() for a in params.arrays()]
    lr = config.learning_rate

    def objective(p, sp):
        ls, lf, grads = loss_and_grads(p, sp.image, target_of(sp, target))
        n = sp.image.size
        return (ls + lf) / n, [g / n for g in grads]

    initial = float(np.mean([objective(params, sp)[0] for sp in slices]))
    curve = []
    # overflow shows up as a non-finite loss or weight and is reported as divergence
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(1, config.epochs + 1):
            order = rng.permutation(len(slices))
            total = 0.0
            for start in range(0, len(order), config.batch_size):
                batch = order[start : start + config.batch_size]
                acc = None
                for i in batch:
                    loss, grads = objective(params, slices[i])
                    if not np.isfinite(loss):
                        raise TrainingDivergence(epoch, lr, loss)
                    total += loss
                    acc = grads if acc is None else [a + g for a, g in zip(acc, grads)]
                scale = lr / len(batch)
                arrays = [a - scale * g for a, g in zip(arrays, acc)]
                if not all(np.all(np.isfinite(a)) for a in arrays):
                    raise TrainingDivergence(epoch, lr, float("nan"))
                params = params.with_arrays(arrays)
            mean = total / len(slices)
            curve.append(mean)
            log.debug("epoch %d/%d target=%s loss=%.5f", epoch, config.epochs, target, mean)
    return TrainResult(params, curve, initial, len(slices))


# ---------------------------------------------------------------------------
# persistence

def save_params(path, params: NetworkParams) -> None:
    strides = [layer.stride for stage in params.trunk for layer in stage]
    cfg = {"hnn": params.config.to_dict(), "strides": strides}
    write_container(path, MODEL_KIND, MODEL_VERSION, cfg, params.arrays())


def load_params(path, expected: HnnConfig | None = None) -> NetworkParams:
    cfg, blocks = read_container(path, MODEL_KIND, MODEL_VERSION)
    d = cfg["hnn"]
    if d.get("side_loss_weights") is not None:
        d["side_loss_weights"] = tuple(d["side_loss_weights"])
    config = HnnConfig(**{**d, "stage_strides": tuple(d["stage_strides"])})
    if expected is not None and expected.architecture() != config.architecture():
        raise ContainerVersionError(
            f"{path}: model architecture {config.architecture()} does not match "
            f"requested {expected.architecture()}"
        )
    template = init_params(config, np.random.default_rng(0))
    shapes = [a.shape for a in template.arrays()]
    if [b.shape for b in blocks] != shapes:
        raise ContainerVersionError(f"{path}: weight blocks do not match the declared config")
    return template.with_arrays(blocks)

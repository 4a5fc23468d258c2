"""The descriptor model.

Data flow per image::

    image (H, W, 3) --encoder--> X (H/8, W/8, 128)
    X --window sampler at each keypoint--> Y (K, 5, 5, 128)
    Y --regressor--> theta (K, 6 + 2n)          TPS offsets from identity
    polar unit grid --TPS(theta)--> warped grid --> pixels around the keypoint
    gray image --bilinear sampling--> rectified patches (K, 32, 32, 1)
    patches --head--> descriptors (K, 128), unit norm

The head wraps the angle axis with circular padding and averages over it at
the end, so cyclic shifts of a patch by a multiple of the head's angular
stride (4 bins) leave the descriptor unchanged.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import NormState, Tensor
from .errors import DealError, InputError, NumericError
from .geometry import (
    Keypoint,
    TpsParams,
    cartesian_unit_grid,
    control_points_lattice,
    make_polar_grid,
    polar_unit_grid,
    tps_apply,
    tps_warp,
)
from .sampler import bilinear_sample, sample_patches

__all__ = [
    "ArchConfig",
    "ModelWeights",
    "Keypoint",
    "Description",
    "init_weights",
    "encode_features",
    "regress_tps",
    "rectify_patch",
    "describe_patch",
    "describe_patches",
    "describe",
    "describe_tensor",
    "to_gray",
]


@dataclass(frozen=True)
class ArchConfig:
    encoder_channels: tuple[int, ...] = (32, 64, 128)
    encoder_blocks: int = 1
    window: int = 5
    regressor_hidden: tuple[int, ...] = (512, 256)
    dropout: float = 0.1
    control_side: int = 8
    angular_bins: int = 32
    radial_bins: int = 32
    radial_spacing: str = "linear"
    # Outer patch radius in units of keypoint size; the plumbing detector
    # reports size as its blob scale, so the patch spans several scales.
    support_factor: float = 6.0
    head_channels: tuple[int, ...] = (32, 64, 128)
    grid: str = "polar"
    warp: str = "learned"
    literal_kernel: bool = False
    min_image_side: int = 32

    def __post_init__(self):
        if self.grid not in ("polar", "cartesian"):
            raise InputError(f"grid must be 'polar' or 'cartesian', got {self.grid!r}")
        if self.warp not in ("learned", "fixed"):
            raise InputError(f"warp must be 'learned' or 'fixed', got {self.warp!r}")
        if self.angular_bins % 4 or self.radial_bins % 4:
            raise InputError("patch bins must be multiples of 4 (two stride-2 head stages)")

    @property
    def downscale(self) -> int:
        return 2 ** len(self.encoder_channels)

    @property
    def feature_dim(self) -> int:
        return self.encoder_channels[-1]

    @property
    def descriptor_dim(self) -> int:
        return self.head_channels[-1]

    @property
    def n_control(self) -> int:
        return self.control_side ** 2

    @property
    def theta_dim(self) -> int:
        return 6 + 2 * self.n_control

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "ArchConfig":
        raw = json.loads(text)
        for key in ("encoder_channels", "regressor_hidden", "head_channels"):
            raw[key] = tuple(raw[key])
        return cls(**raw)


@dataclass
class ModelWeights:
    """Named parameter tensors plus batch-normalisation running statistics."""

    config: ArchConfig
    params: dict[str, Tensor] = field(default_factory=dict)
    norms: dict[str, NormState] = field(default_factory=dict)

    def trainable(self) -> list[Tensor]:
        return list(self.params.values())

    def set_requires_grad(self, flag: bool) -> None:
        for t in self.params.values():
            t.requires_grad = flag

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def copy(self) -> "ModelWeights":
        params = {k: Tensor(v.value.copy(), name=k) for k, v in self.params.items()}
        norms = {k: NormState(s.mean.copy(), s.var.copy(), s.momentum) for k, s in self.norms.items()}
        return ModelWeights(self.config, params, norms)

    def n_parameters(self) -> int:
        return sum(t.value.size for t in self.params.values())

    def named_arrays(self) -> dict[str, np.ndarray]:
        """Flat name -> array view used by the checkpoint writer."""
        out = {k: t.value for k, t in self.params.items()}
        for k, s in self.norms.items():
            out[f"{k}.running_mean"] = s.mean
            out[f"{k}.running_var"] = s.var
        return out

    @classmethod
    def from_named_arrays(cls, config: ArchConfig, arrays: dict[str, np.ndarray]) -> "ModelWeights":
        template = init_weights(config, seed=0)
        params, norms = {}, {}
        for name, t in template.params.items():
            if name not in arrays:
                raise InputError(f"checkpoint is missing tensor {name!r}")
            arr = np.asarray(arrays[name], dtype=np.float32)
            if arr.shape != t.value.shape:
                raise InputError(f"tensor {name!r} has dims {arr.shape}, expected {t.value.shape}")
            params[name] = Tensor(arr.copy(), name=name)
        for name, s in template.norms.items():
            try:
                mean = np.asarray(arrays[f"{name}.running_mean"], dtype=np.float32)
                var = np.asarray(arrays[f"{name}.running_var"], dtype=np.float32)
            except KeyError:
                raise InputError(f"checkpoint is missing running statistics of {name!r}") from None
            if mean.shape != s.mean.shape or var.shape != s.var.shape:
                raise InputError(f"running statistics of {name!r} have wrong dims")
            norms[name] = NormState(mean.copy(), var.copy())
        return cls(config, params, norms)


def _he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def init_weights(config: ArchConfig | None = None, seed: int = 0) -> ModelWeights:
    """He-uniform initialisation; the regressor's last layer starts at zero."""
    cfg = config or ArchConfig()
    rng = np.random.default_rng(seed)
    p: dict[str, np.ndarray] = {}
    norms: dict[str, NormState] = {}

    def conv(name, cin, cout, bias=True):
        p[f"{name}.kernel"] = _he_uniform(rng, (3, 3, cin, cout), 9 * cin)
        if bias:
            p[f"{name}.bias"] = np.zeros(cout, np.float32)

    cin = 3
    for s, c in enumerate(cfg.encoder_channels):
        conv(f"encoder.stage{s}.down", cin, c)
        for b in range(cfg.encoder_blocks):
            conv(f"encoder.stage{s}.block{b}.conv0", c, c)
            conv(f"encoder.stage{s}.block{b}.conv1", c, c)
            # damp the residual branch so stacked blocks keep activations bounded
            p[f"encoder.stage{s}.block{b}.conv1.kernel"] *= 0.5
        cin = c

    fan = cfg.window * cfg.window * cfg.feature_dim
    for i, h in enumerate(cfg.regressor_hidden):
        p[f"regressor.fc{i}.weight"] = _he_uniform(rng, (h, fan), fan)
        p[f"regressor.fc{i}.bias"] = np.zeros(h, np.float32)
        fan = h
    last = len(cfg.regressor_hidden)
    p[f"regressor.fc{last}.weight"] = np.zeros((cfg.theta_dim, fan), np.float32)
    p[f"regressor.fc{last}.bias"] = np.zeros(cfg.theta_dim, np.float32)

    c0, c1, c2 = cfg.head_channels
    plan = [("conv0", 1, c0, 1), ("conv1", c0, c0, 1), ("conv2", c0, c1, 2), ("conv3", c1, c1, 1), ("conv4", c1, c2, 2)]
    for name, a, b, _ in plan:
        conv(f"head.{name}", a, b, bias=False)
        norms[f"head.{name}.bn"] = NormState.fresh(b)
    collapse_in = (cfg.radial_bins // 4) * c2
    p["head.collapse.weight"] = _he_uniform(rng, (c2, collapse_in), collapse_in)
    norms["head.collapse.bn"] = NormState.fresh(c2)

    params = {k: Tensor(v, name=k) for k, v in p.items()}
    return ModelWeights(cfg, params, norms)


_HEAD_PLAN = (("conv0", 1), ("conv1", 1), ("conv2", 2), ("conv3", 1), ("conv4", 2))


# ---------------------------------------------------------------- stages


def _image_tensor(image) -> np.ndarray:
    arr = image.value if isinstance(image, Tensor) else np.asarray(image)
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float32) / 255.0
    arr = arr.astype(np.float32, copy=False)
    if arr.ndim == 2:
        arr = arr[..., None]
    if arr.ndim != 3:
        raise InputError(f"image must be (H, W) or (H, W, C), got {arr.shape}")
    if arr.shape[-1] == 1:
        arr = np.repeat(arr, 3, axis=-1)
    if arr.shape[-1] != 3:
        raise InputError(f"image must have 1 or 3 channels, got {arr.shape[-1]}")
    return arr


def to_gray(image) -> np.ndarray:
    """Luma of an RGB image (or pass-through of a gray one) as float32 (H, W)."""
    arr = image.value if isinstance(image, Tensor) else np.asarray(image)
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float32) / 255.0
    arr = arr.astype(np.float32, copy=False)
    if arr.ndim == 3 and arr.shape[-1] == 3:
        return arr @ np.array([0.299, 0.587, 0.114], dtype=np.float32)
    if arr.ndim == 3 and arr.shape[-1] == 1:
        return arr[..., 0]
    if arr.ndim == 2:
        return arr
    raise InputError(f"cannot convert image of dims {arr.shape} to gray")


def encode_features(image, weights: ModelWeights, mode: str = "eval") -> Tensor:
    """Mid-level feature map ``(ceil(H/8), ceil(W/8), C)``."""
    cfg = weights.config
    arr = _image_tensor(image)
    H, W = arr.shape[:2]
    if min(H, W) < cfg.min_image_side:
        raise InputError(f"image {W}x{H} is smaller than {cfg.min_image_side} px")
    p = weights.params
    x = Tensor(arr - np.float32(0.5))
    for s in range(len(cfg.encoder_channels)):
        name = f"encoder.stage{s}"
        x = dc.relu(dc.conv2d(x, p[f"{name}.down.kernel"], p[f"{name}.down.bias"], stride=2))
        for b in range(cfg.encoder_blocks):
            blk = f"{name}.block{b}"
            h = dc.relu(dc.conv2d(x, p[f"{blk}.conv0.kernel"], p[f"{blk}.conv0.bias"]))
            h = dc.conv2d(h, p[f"{blk}.conv1.kernel"], p[f"{blk}.conv1.bias"])
            x = dc.relu(dc.add(x, h))
    return x


def regress_theta(features: Tensor, weights: ModelWeights, mode: str = "eval", rng=None) -> Tensor:
    """Regressor MLP: flattened windows ``(K, w*w*C)`` -> offsets ``(K, 6+2n)``."""
    cfg = weights.config
    expected = cfg.window * cfg.window * cfg.feature_dim
    if features.value.shape[-1] != expected:
        raise InputError(f"regressor input has length {features.value.shape[-1]}, expected {expected}")
    p = weights.params
    h = features
    for i in range(len(cfg.regressor_hidden)):
        h = dc.relu(dc.dense(h, p[f"regressor.fc{i}.weight"], p[f"regressor.fc{i}.bias"]))
        h = dc.dropout(h, cfg.dropout, rng, mode)
    last = len(cfg.regressor_hidden)
    return dc.dense(h, p[f"regressor.fc{last}.weight"], p[f"regressor.fc{last}.bias"])


def regress_tps(local_features, weights: ModelWeights, mode: str = "eval", rng=None) -> TpsParams:
    """TPS parameters for one flattened feature window."""
    cfg = weights.config
    flat = dc.as_tensor(local_features)
    if flat.value.size != cfg.window * cfg.window * cfg.feature_dim:
        raise InputError(
            f"regressor input has length {flat.value.size}, expected {cfg.window * cfg.window * cfg.feature_dim}"
        )
    theta = regress_theta(dc.reshape(flat, (1, -1)), weights, mode, rng)
    return TpsParams.from_offsets(theta.value[0], control_points_lattice(cfg.control_side))


def unit_grids(keypoints: Sequence[Keypoint], cfg: ArchConfig) -> np.ndarray:
    """Per-keypoint sampling grids in the normalised frame, ``(K, A, R, 2)`` float32."""
    if cfg.grid == "polar":
        grids = [polar_unit_grid(kp.orientation, cfg.angular_bins, cfg.radial_bins, cfg.radial_spacing) for kp in keypoints]
    else:
        grids = [cartesian_unit_grid(kp.orientation, cfg.angular_bins, cfg.radial_bins) for kp in keypoints]
    if not grids:
        return np.zeros((0, cfg.angular_bins, cfg.radial_bins, 2), np.float32)
    return np.stack(grids).astype(np.float32)


def _to_pixels(unit: Tensor, keypoints: Sequence[Keypoint], cfg: ArchConfig) -> Tensor:
    radius = np.array([kp.size * cfg.support_factor for kp in keypoints], np.float32).reshape(-1, 1, 1, 1)
    centre = np.array([[kp.x, kp.y] for kp in keypoints], np.float32).reshape(-1, 1, 1, 2)
    return dc.add(dc.mul(unit, Tensor(radius)), Tensor(centre))


def rectify_patch(image, kp: Keypoint, params: TpsParams, cfg: ArchConfig | None = None) -> np.ndarray:
    """Sample the TPS-warped polar patch ``(A, R, 1)`` of one keypoint.

    The identity grid is built in the normalised frame, warped, then mapped to
    pixels; identity parameters reproduce plain polar sampling exactly.
    """
    cfg = cfg or ArchConfig(support_factor=1.0)
    arr = np.asarray(image.value if isinstance(image, Tensor) else image, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[..., None]
    if arr.ndim != 3 or arr.shape[-1] != 1:
        raise InputError("rectify_patch expects a grayscale (H, W) or (H, W, 1) image")
    if kp.size <= 0:
        raise InputError("keypoint size must be positive")
    if cfg.grid == "polar":
        unit = polar_unit_grid(kp.orientation, cfg.angular_bins, cfg.radial_bins, cfg.radial_spacing)
    else:
        unit = cartesian_unit_grid(kp.orientation, cfg.angular_bins, cfg.radial_bins)
    if not params.is_identity():
        unit = tps_apply(params, unit, literal_kernel=cfg.literal_kernel)
    grid = np.array([kp.x, kp.y]) + (kp.size * cfg.support_factor) * unit
    return bilinear_sample(arr, grid, padding="zeros").value


def plain_polar_patch(image, kp: Keypoint, cfg: ArchConfig | None = None) -> np.ndarray:
    """Polar sampling without any warp (the fixed-polar reference)."""
    cfg = cfg or ArchConfig(support_factor=1.0)
    arr = np.asarray(image.value if isinstance(image, Tensor) else image, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[..., None]
    grid = make_polar_grid(kp, cfg.angular_bins, cfg.radial_bins, cfg.radial_spacing, cfg.support_factor)
    return bilinear_sample(arr, grid, padding="zeros").value


def _head_features(patches: Tensor, weights: ModelWeights, mode: str) -> Tensor:
    """Head up to (and including) angular pooling, before L2 normalisation."""
    cfg = weights.config
    p, norms = weights.params, weights.norms
    v = patches.value
    if v.ndim != 4 or v.shape[1:] != (cfg.angular_bins, cfg.radial_bins, 1):
        raise InputError(
            f"patches must be (K, {cfg.angular_bins}, {cfg.radial_bins}, 1), got {v.shape}"
        )
    x = dc.instance_standardize(patches, axes=(1, 2, 3))
    for name, stride in _HEAD_PLAN:
        x = dc.conv2d(x, p[f"head.{name}.kernel"], stride=stride, padding="circular_axis0")
        x = dc.relu(dc.batch_stat_normalize(x, mode, norms[f"head.{name}.bn"]))
    K, A, R, C = x.value.shape
    x = dc.reshape(x, (K, A, R * C))
    x = dc.dense(x, p["head.collapse.weight"])
    x = dc.batch_stat_normalize(x, mode, norms["head.collapse.bn"])
    x = dc.reshape(x, (K, A, 1, cfg.descriptor_dim))
    x = dc.pool_angular_mean(x)
    return dc.reshape(x, (K, cfg.descriptor_dim))


def describe_patches(patches, weights: ModelWeights, mode: str = "eval") -> Tensor:
    """Descriptors ``(K, D)`` of rectified patches ``(K, A, R, 1)``."""
    return dc.normalize_l2(_head_features(dc.as_tensor(patches), weights, mode))


def describe_patch(patch, weights: ModelWeights, mode: str = "eval") -> np.ndarray:
    """Unit-norm descriptor of a single ``(A, R, 1)`` patch."""
    arr = np.asarray(patch.value if isinstance(patch, Tensor) else patch, dtype=np.float32)
    cfg = weights.config
    if arr.shape != (cfg.angular_bins, cfg.radial_bins, 1):
        raise InputError(f"patch must be ({cfg.angular_bins}, {cfg.radial_bins}, 1), got {arr.shape}")
    return describe_patches(arr[None], weights, mode).value[0]


def _check_keypoint(kp: Keypoint, shape: tuple[int, int]) -> None:
    H, W = shape
    if kp.size <= 0:
        raise InputError("keypoint size must be positive")
    if not (0 <= kp.x <= W - 1 and 0 <= kp.y <= H - 1):
        raise InputError(f"keypoint at ({kp.x:.2f}, {kp.y:.2f}) lies outside the {W}x{H} image")


def _warped_unit(image, keypoints, weights, mode, rng, features: Tensor | None) -> Tensor:
    cfg = weights.config
    unit = unit_grids(keypoints, cfg)
    if cfg.warp == "fixed":
        return Tensor(unit)
    if features is None:
        features = encode_features(image, weights, mode)
    H, W = np.shape(image)[:2]
    Y = sample_patches(features, keypoints, cfg.downscale, cfg.window, image_shape=(H, W))
    theta = regress_theta(dc.reshape(Y, (len(keypoints), -1)), weights, mode, rng)
    cp = control_points_lattice(cfg.control_side)
    return tps_warp(theta, unit, cp, literal_kernel=cfg.literal_kernel)


def sample_rectified(image, gray, keypoints, weights, mode="eval", rng=None, features=None) -> Tensor:
    """Rectified patches ``(K, A, R, 1)`` for keypoints already validated."""
    cfg = weights.config
    g = to_gray(gray if gray is not None else image)
    unit = _warped_unit(image, keypoints, weights, mode, rng, features)
    pixels = _to_pixels(unit, keypoints, cfg)
    return bilinear_sample(g[..., None], pixels, padding="zeros")


def describe_tensor(image, gray, keypoints: Sequence[Keypoint], weights: ModelWeights,
                    mode: str = "eval", rng=None, features: Tensor | None = None) -> Tensor:
    """Differentiable batched description; every keypoint must be valid."""
    shape = np.shape(image)[:2]
    for i, kp in enumerate(keypoints):
        try:
            _check_keypoint(kp, shape)
        except InputError as exc:
            raise InputError(f"keypoint {i}: {exc}") from None
    patches = sample_rectified(image, gray, keypoints, weights, mode, rng, features)
    return describe_patches(patches, weights, mode)


@dataclass
class Description:
    """Descriptors in keypoint order; rows of failed keypoints are NaN."""

    descriptors: np.ndarray
    errors: dict[int, str] = field(default_factory=dict)

    @property
    def valid(self) -> np.ndarray:
        mask = np.ones(len(self.descriptors), bool)
        mask[list(self.errors)] = False
        return mask

    def __len__(self) -> int:
        return len(self.descriptors)


def describe(image, gray, keypoints: Sequence[Keypoint], weights: ModelWeights,
             mode: str = "eval", rng=None) -> Description:
    """Describe every keypoint of one image.

    Keypoints that fail validation or produce a degenerate (textureless) patch
    get an error entry and a NaN row; the others are unaffected.
    """
    cfg = weights.config
    D = cfg.descriptor_dim
    out = np.full((len(keypoints), D), np.nan, np.float32)
    errors: dict[int, str] = {}
    if not keypoints:
        return Description(out, errors)
    shape = np.shape(image)[:2]
    ok = []
    for i, kp in enumerate(keypoints):
        try:
            _check_keypoint(kp, shape)
            ok.append(i)
        except DealError as exc:
            errors[i] = str(exc)
    if ok:
        kps = [keypoints[i] for i in ok]
        patches = sample_rectified(image, gray, kps, weights, mode, rng)
        feats = _head_features(patches, weights, mode).value
        norms = np.sqrt((feats.astype(np.float64) ** 2).sum(-1))
        for row, i in enumerate(ok):
            if not (np.isfinite(norms[row]) and norms[row] > 1e-10):
                errors[i] = str(NumericError("degenerate patch: descriptor norm is zero"))
                continue
            out[i] = dc.normalize_l2(Tensor(feats[row])).value
    return Description(out, dict(sorted(errors.items())))


def fixed_polar_variant(weights: ModelWeights) -> ModelWeights:
    """Same weights with the warp pinned to identity (the fixed-polar ablation)."""
    return ModelWeights(replace(weights.config, warp="fixed"), weights.params, weights.norms)

"""EDSR and FNO super-resolution models built on the autodiff engine.

EDSR parameter count for width ``W``, depth ``D`` and pixel-shuffle stages
``r_1..r_k`` (all convs 3x3 with bias)::

    head   9W + W
    body   D * 2 * (9W^2 + W)
    up     sum_i (9 r_i^2 W^2 + r_i^2 W)
    tail   9W + 1

so width 16, depth 4, stages [2, 2] gives 160 + 18560 + 18560 + 145 = 37425.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ComplexPair, Tensor
from .errors import (
    BadMagic,
    ConfigError,
    FingerprintMismatch,
    FormatError,
    ModeTruncationTooLarge,
    ShapeMismatch,
    Truncated,
)
from .resample import Direction, KernelKind, ResamplePlan, refine

PARAM_MAGIC = b"PRM1"


def _factorize_scale(scale: int):
    """Pixel-shuffle stages for a scale factor, 2s first then the remaining primes."""
    stages, rest = [], scale
    for p in (2, 3, 5, 7):
        while rest % p == 0:
            stages.append(p)
            rest //= p
    if rest > 1:
        stages.append(rest)
    return stages


@dataclass(frozen=True)
class EdsrConfig:
    width: int = 64
    depth: int = 16
    scale: int = 4
    stages: tuple = ()
    residual_scaling: float = 0.1

    kind = "edsr"

    def __post_init__(self):
        if self.width < 1 or self.depth < 1:
            raise ConfigError("EDSR width and depth must be >= 1")
        if self.scale < 1:
            raise ConfigError("EDSR scale must be >= 1")
        stages = tuple(int(s) for s in self.stages) or tuple(_factorize_scale(self.scale))
        if math.prod(stages) != self.scale or any(s < 2 for s in stages) and self.scale > 1:
            raise ConfigError(f"pixel-shuffle stages {stages} do not multiply to scale {self.scale}")
        object.__setattr__(self, "stages", stages)

    def to_dict(self):
        return {"kind": self.kind, **dataclasses.asdict(self), "stages": list(self.stages)}


@dataclass(frozen=True)
class FnoConfig:
    """FNO refinement network.

    ``scale`` is the bicubic pre-refinement factor applied before the network;
    the network itself preserves spatial size.
    """

    layers: int = 4
    hidden: int = 32
    modes1: int = 12
    modes2: int = 12
    projection: int = 64
    scale: int = 1
    activation: str = "gelu"
    global_skip: bool = False

    kind = "fno"

    def __post_init__(self):
        if self.layers < 1 or self.hidden < 1 or self.projection < 1:
            raise ConfigError("FNO layers, hidden and projection widths must be >= 1")
        if self.modes1 < 1 or self.modes2 < 1:
            raise ConfigError("FNO needs at least one retained mode per axis")
        if self.activation not in ad.ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.scale < 1:
            raise ConfigError("FNO scale must be >= 1")

    def check_modes(self, h, w):
        if 2 * self.modes1 > h or self.modes2 > w // 2 + 1:
            raise ModeTruncationTooLarge(
                f"modes ({self.modes1}, {self.modes2}) do not fit a {h}x{w} grid "
                f"(need 2*modes1 <= H and modes2 <= W//2 + 1)"
            )

    def to_dict(self):
        return {"kind": self.kind, **dataclasses.asdict(self)}


def config_from_dict(d: dict):
    d = dict(d)
    kind = d.pop("kind")
    if kind == "edsr":
        if "stages" in d:
            d["stages"] = tuple(d["stages"])
        return EdsrConfig(**d)
    if kind == "fno":
        return FnoConfig(**d)
    raise ConfigError(f"unknown model kind {kind!r}")


def fingerprint(cfg) -> int:
    """64-bit architecture fingerprint (leading bytes of SHA-256 of canonical JSON)."""
    blob = json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":")).encode()
    return int.from_bytes(hashlib.sha256(blob).digest()[:8], "little")


@dataclass
class ModelParams:
    config: object
    tensors: dict = field(default_factory=dict)

    @property
    def fingerprint(self) -> int:
        return fingerprint(self.config)

    def names(self):
        return list(self.tensors)

    def count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def __getitem__(self, name) -> Tensor:
        return self.tensors[name]

    def arrays(self):
        return {k: t.data for k, t in self.tensors.items()}

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.config, {k: Tensor(t.data.copy(), t.requires_grad) for k, t in self.tensors.items()}
        )

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

    def equals(self, other: "ModelParams") -> bool:
        return (
            self.fingerprint == other.fingerprint
            and self.names() == other.names()
            and all(np.array_equal(self[k].data, other[k].data) for k in self.tensors)
        )


def _check_params(cfg, params: ModelParams):
    if params.fingerprint != fingerprint(cfg):
        raise FingerprintMismatch(
            f"parameter fingerprint {params.fingerprint:016x} does not match config {fingerprint(cfg):016x}"
        )


# ----------------------------------------------------------------------------
# parameter shapes and initialization


def param_shapes(cfg):
    """Ordered mapping name -> (shape, fan_in, kind) for a config."""
    shapes = {}

    def conv(name, cin, cout, k):
        shapes[f"{name}.w"] = ((cout, cin, k, k), cin * k * k, "conv")
        shapes[f"{name}.b"] = ((cout,), cin * k * k, "conv")

    if isinstance(cfg, EdsrConfig):
        w = cfg.width
        conv("head", 1, w, 3)
        for i in range(cfg.depth):
            conv(f"body{i}.conv1", w, w, 3)
            conv(f"body{i}.conv2", w, w, 3)
        for i, r in enumerate(cfg.stages):
            conv(f"up{i}", w, r * r * w, 3)
        conv("tail", w, 1, 3)
    elif isinstance(cfg, FnoConfig):
        hdim = cfg.hidden
        conv("lift", 1, hdim, 1)
        for i in range(cfg.layers):
            for part in ("low", "high"):
                for comp in ("re", "im"):
                    shapes[f"spec{i}.{part}.{comp}"] = (
                        (hdim, hdim, cfg.modes1, cfg.modes2),
                        hdim * hdim,
                        "spectral",
                    )
            conv(f"pw{i}", hdim, hdim, 1)
        conv("proj1", hdim, cfg.projection, 1)
        conv("proj2", cfg.projection, 1, 1)
    else:
        raise ConfigError(f"unsupported config {cfg!r}")
    return shapes


def edsr_param_count(width, depth, stages) -> int:
    w = width
    return (
        10 * w
        + depth * 2 * (9 * w * w + w)
        + sum(9 * r * r * w * w + r * r * w for r in stages)
        + 9 * w
        + 1
    )


def init_params(cfg, seed: int) -> ModelParams:
    """Conv weights/biases ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)); spectral re/im ~ U(0,1)/(C_in*C_out)."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, (shape, fan_in, kind) in param_shapes(cfg).items():
        if kind == "spectral":
            data = rng.random(shape) / fan_in
        else:
            bound = 1.0 / math.sqrt(fan_in)
            data = rng.uniform(-bound, bound, shape)
        tensors[name] = Tensor(data, requires_grad=True)
    return ModelParams(cfg, tensors)


def zero_params(cfg) -> ModelParams:
    return ModelParams(
        cfg, {n: Tensor(np.zeros(s), True) for n, (s, _, _) in param_shapes(cfg).items()}
    )


# ----------------------------------------------------------------------------
# forwards


def _input_tensor(x):
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim != 4 or x.shape[1] != 1:
        raise ShapeMismatch(f"model input must be N x 1 x H x W, got {x.shape}")
    return x


def _conv(params, name, x, padding):
    return ad.conv2d(x, params[f"{name}.w"], params[f"{name}.b"], padding)


def edsr_forward(cfg: EdsrConfig, params: ModelParams, x) -> Tensor:
    _check_params(cfg, params)
    x = _input_tensor(x)
    head = _conv(params, "head", x, 1)
    h = head
    for i in range(cfg.depth):
        r = _conv(params, f"body{i}.conv1", h, 1)
        r = ad.relu(r)
        r = _conv(params, f"body{i}.conv2", r, 1)
        h = ad.add(h, ad.scale(r, cfg.residual_scaling))
    h = ad.add(h, head)
    for i, r in enumerate(cfg.stages):
        h = ad.pixel_shuffle(_conv(params, f"up{i}", h, 1), r)
    return _conv(params, "tail", h, 1)


def fno_forward(cfg: FnoConfig, params: ModelParams, x) -> Tensor:
    """Resolution-preserving FNO; the input is already on the target grid."""
    _check_params(cfg, params)
    x = _input_tensor(x)
    _, _, h, w = x.shape
    cfg.check_modes(h, w)
    act = ad.ACTIVATIONS[cfg.activation]
    z = _conv(params, "lift", x, 0)
    for i in range(cfg.layers):
        low = ComplexPair(params[f"spec{i}.low.re"], params[f"spec{i}.low.im"])
        high = ComplexPair(params[f"spec{i}.high.re"], params[f"spec{i}.high.im"])
        # fused rfft2 -> spectral_mix(low) + spectral_mix(high) -> irfft2
        z = act(ad.add(ad.spectral_conv(z, low, high), _conv(params, f"pw{i}", z, 0)))
    out = _conv(params, "proj1", z, 0)
    out = _conv(params, "proj2", act(out), 0)
    if cfg.global_skip:
        out = ad.add(out, x)
    return out


def forward(cfg, params: ModelParams, x) -> Tensor:
    """Model forward on model-resolution input (FNO input must be pre-refined)."""
    if isinstance(cfg, EdsrConfig):
        return edsr_forward(cfg, params, x)
    return fno_forward(cfg, params, x)


def model_input(cfg, coarse: np.ndarray) -> np.ndarray:
    """Map coarse N x h x w fields to the model's input grid (N x 1 x H x W)."""
    coarse = np.asarray(coarse, dtype=np.float64)
    if isinstance(cfg, FnoConfig) and cfg.scale > 1:
        coarse = refine(coarse, ResamplePlan(KernelKind.BICUBIC, cfg.scale, Direction.REFINE))
    return coarse[:, None, :, :]


def output_scale(cfg) -> int:
    return cfg.scale


def predict(cfg, params: ModelParams, coarse: np.ndarray, batch_size: int = 32) -> np.ndarray:
    """Downscale N x h x w coarse fields (model units), batched, no gradient."""
    coarse = np.asarray(coarse, dtype=np.float64)
    frozen = ModelParams(cfg, {k: Tensor(t.data) for k, t in params.tensors.items()})
    out = []
    for start in range(0, coarse.shape[0], batch_size):
        xin = model_input(cfg, coarse[start : start + batch_size])
        out.append(forward(cfg, frozen, Tensor(xin)).data[:, 0])
    return np.concatenate(out, axis=0)


# ----------------------------------------------------------------------------
# PRM1 parameter files


def save_params(params: ModelParams, path) -> None:
    chunks = [PARAM_MAGIC, struct.pack("<QI", params.fingerprint, len(params.tensors))]
    for name, t in params.tensors.items():
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack(f"<I{t.ndim}I", t.ndim, *t.shape))
        chunks.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise Truncated(self.pos + n, len(self.data), what=what)
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        st = struct.Struct(fmt)
        return st.unpack(self.take(st.size, what))


def load_params(path, cfg) -> ModelParams:
    """Read a PRM1 file and verify it against ``cfg``'s fingerprint and shapes."""
    data = Path(path).read_bytes()
    if data[:4] != PARAM_MAGIC:
        raise BadMagic(f"expected magic {PARAM_MAGIC!r}, found {data[:4]!r}", offset=0)
    rd = _Reader(data)
    rd.pos = 4
    fp, count = rd.unpack("<QI", "parameter header")
    if fp != fingerprint(cfg):
        raise FingerprintMismatch(
            f"file fingerprint {fp:016x} does not match config {fingerprint(cfg):016x}"
        )
    tensors = {}
    for _ in range(count):
        (nlen,) = rd.unpack("<I", "entry name length")
        try:
            name = rd.take(nlen, "entry name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("entry name is not valid UTF-8", offset=rd.pos - nlen) from None
        (rank,) = rd.unpack("<I", "entry rank")
        shape = rd.unpack(f"<{rank}I", "entry shape")
        size = math.prod(shape)
        payload = np.frombuffer(rd.take(8 * size, f"payload of {name!r}"), dtype="<f8")
        tensors[name] = Tensor(payload.reshape(shape).astype(np.float64), requires_grad=True)
    if rd.pos != len(data):
        raise FormatError("trailing bytes after last entry", offset=rd.pos)
    expected = {n: s for n, (s, _, _) in param_shapes(cfg).items()}
    got = {n: t.shape for n, t in tensors.items()}
    if list(expected.items()) != list(got.items()):
        raise FingerprintMismatch("parameter names/shapes do not match the config")
    return ModelParams(cfg, tensors)

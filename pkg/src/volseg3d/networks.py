"""Network builders, forward passes and checkpoint files.

A network is a :class:`NetworkParams`: a role tag, a JSON-serializable
architecture descriptor listing every parametric layer, and the tensors those
layers own. Forward functions interpret the descriptor, so a checkpoint alone
is enough to rebuild and run a model.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import CorruptFileError, DimensionError, FormatError, GeometryError, ModelError

ROLES = ("G", "F", "H", "D1", "D2", "M")
CHECKPOINT_MAGIC = b"VSG3DCKP"
CHECKPOINT_VERSION = 1


# ------------------------------------------------------------------ configs
@dataclass
class UNetConfig:
    depth: int = 5
    base_channels: int = 16
    in_channels: int = 1
    out_channels: int = 1
    slope: float = 0.2
    bn_momentum: float = 0.1
    eps: float = 1e-5

    def __post_init__(self):
        if self.depth < 1 or self.base_channels < 1:
            raise ModelError(f"depth and base_channels must be positive: {self}")

    def channels(self) -> list[int]:
        """Encoder widths followed by the bridge width."""
        return [self.base_channels * 2**i for i in range(self.depth + 1)]


@dataclass
class GeneratorConfig:
    base_channels: int = 16
    n_down: int = 2
    n_res: int = 4
    in_channels: int = 1
    out_channels: int = 1
    slicewise: bool = False
    eps: float = 1e-5


@dataclass
class DiscriminatorConfig:
    base_channels: int = 16
    n_layers: int = 3
    in_channels: int = 1
    slope: float = 0.2
    slicewise: bool = False
    eps: float = 1e-5


@dataclass
class NetworkParams:
    role: str
    descriptor: dict
    params: dict[str, Tensor] = field(default_factory=dict)
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.role not in ROLES:
            raise ModelError(f"unknown role {self.role!r}; expected one of {ROLES}")

    def layer(self, name: str) -> dict:
        return self._index()[name]

    def _index(self) -> dict:
        idx = getattr(self, "_layer_index", None)
        if idx is None:
            idx = {spec["name"]: spec for spec in self.descriptor["layers"]}
            object.__setattr__(self, "_layer_index", idx)
        return idx

    def frozen(self) -> "NetworkParams":
        """Same values, detached from autodiff; buffers are shared."""
        net = NetworkParams(self.role, self.descriptor, {k: Tensor(p.data) for k, p in self.params.items()}, self.buffers)
        return net

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name].data).tobytes())
        return h.hexdigest()

    def validate(self) -> None:
        want = expected_tensors(self.descriptor)
        have_p = {k: v.shape for k, v in self.params.items()}
        have_b = {k: v.shape for k, v in self.buffers.items()}
        if want[0] != have_p or want[1] != have_b:
            raise ModelError(f"{self.role}: parameters do not match the architecture descriptor")


# ------------------------------------------------------------------ descriptor helpers
def _conv(name, cin, cout, k, s=1, p=0, transpose=False) -> dict:
    return {
        "name": name,
        "type": "convT" if transpose else "conv",
        "in": cin,
        "out": cout,
        "kernel": list(k),
        "stride": list(s),
        "padding": list(p),
    }


def _iso(v) -> list[int]:
    return [v, v, v]


def _plane(v, depth_value) -> list[int]:
    return [depth_value, v, v]


def expected_tensors(descriptor: dict) -> tuple[dict, dict]:
    """Parameter and buffer shapes implied by a descriptor."""
    params, buffers = {}, {}
    for spec in descriptor["layers"]:
        n, t = spec["name"], spec["type"]
        if t == "conv":
            params[f"{n}.weight"] = (spec["out"], spec["in"], *spec["kernel"])
            params[f"{n}.bias"] = (spec["out"],)
        elif t == "convT":
            params[f"{n}.weight"] = (spec["in"], spec["out"], *spec["kernel"])
            params[f"{n}.bias"] = (spec["out"],)
        elif t in ("batchnorm", "instancenorm"):
            params[f"{n}.gamma"] = (spec["channels"],)
            params[f"{n}.beta"] = (spec["channels"],)
            if t == "batchnorm":
                buffers[f"{n}.running_mean"] = (spec["channels"],)
                buffers[f"{n}.running_var"] = (spec["channels"],)
        else:
            raise ModelError(f"unknown layer type {t!r}")
    return params, buffers


def _materialize(role: str, descriptor: dict, rng: np.random.Generator, init: str, dtype) -> NetworkParams:
    shapes, buffer_shapes = expected_tensors(descriptor)
    params: dict[str, Tensor] = {}
    for name, shape in shapes.items():
        if name.endswith(".weight"):
            w = rng.standard_normal(shape)
            if init == "he":
                fan_in = shape[1] * int(np.prod(shape[2:]))
                w *= np.sqrt(2.0 / fan_in)
            else:
                w *= 0.02
            data = w
        elif name.endswith(".gamma"):
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        params[name] = Tensor(data.astype(dtype), requires_grad=True, name=name)
    buffers = {}
    for name, shape in buffer_shapes.items():
        buffers[name] = (np.zeros(shape) if name.endswith("running_mean") else np.ones(shape)).astype(np.float64)
    return NetworkParams(role, descriptor, params, buffers)


def _apply_conv(net: NetworkParams, name: str, x: Tensor) -> Tensor:
    spec = net.layer(name)
    w, b = net.params[f"{name}.weight"], net.params[f"{name}.bias"]
    if spec["type"] == "convT":
        return ad.conv_transpose3d(x, w, b, spec["stride"], spec["padding"])
    return ad.conv3d(x, w, b, spec["stride"], spec["padding"])


def _apply_bn(net: NetworkParams, name: str, x: Tensor, training: bool) -> Tensor:
    cfg = net.descriptor["config"]
    return ad.batchnorm3d(
        x,
        net.params[f"{name}.gamma"],
        net.params[f"{name}.beta"],
        net.buffers[f"{name}.running_mean"],
        net.buffers[f"{name}.running_var"],
        training=training,
        momentum=cfg["bn_momentum"],
        eps=cfg["eps"],
    )


def _apply_in(net: NetworkParams, name: str, x: Tensor) -> Tensor:
    spec = net.layer(name)
    return ad.instancenorm3d(
        x, net.params[f"{name}.gamma"], net.params[f"{name}.beta"], net.descriptor["config"]["eps"], spec["per_slice"]
    )


def _check_input(net: NetworkParams, x: Tensor, channels: int) -> None:
    if x.ndim != 5:
        raise DimensionError(f"{net.role}: expected input (N,C,D,H,W), got {x.shape}")
    if x.shape[1] != channels:
        raise DimensionError(f"{net.role}: expected {channels} input channel(s), got {x.shape[1]}")


# ------------------------------------------------------------------ U-Net
def unet_descriptor(cfg: UNetConfig) -> dict:
    ch = cfg.channels()
    layers = []
    cin = cfg.in_channels
    for i in range(cfg.depth):
        layers += [
            _conv(f"enc{i}.conv0", cin, ch[i], _iso(3), _iso(1), _iso(1)),
            {"name": f"enc{i}.bn0", "type": "batchnorm", "channels": ch[i]},
            _conv(f"enc{i}.conv1", ch[i], ch[i], _iso(3), _iso(1), _iso(1)),
            {"name": f"enc{i}.bn1", "type": "batchnorm", "channels": ch[i]},
        ]
        cin = ch[i]
    d = cfg.depth
    layers += [
        _conv("bridge.conv0", ch[d - 1], ch[d], _iso(3), _iso(1), _iso(1)),
        {"name": "bridge.bn0", "type": "batchnorm", "channels": ch[d]},
        _conv("bridge.conv1", ch[d], ch[d], _iso(3), _iso(1), _iso(1)),
        {"name": "bridge.bn1", "type": "batchnorm", "channels": ch[d]},
    ]
    for i in reversed(range(cfg.depth)):
        layers += [
            _conv(f"dec{i}.up", ch[i + 1], ch[i], _iso(2), _iso(2), _iso(0), transpose=True),
            _conv(f"dec{i}.conv0", 2 * ch[i], ch[i], _iso(3), _iso(1), _iso(1)),
            {"name": f"dec{i}.bn0", "type": "batchnorm", "channels": ch[i]},
            _conv(f"dec{i}.conv1", ch[i], ch[i], _iso(3), _iso(1), _iso(1)),
            {"name": f"dec{i}.bn1", "type": "batchnorm", "channels": ch[i]},
        ]
    layers.append(_conv("head", ch[0], cfg.out_channels, _iso(1), _iso(1), _iso(0)))
    return {"kind": "unet3d", "config": asdict(cfg), "layers": layers}


def build_unet3d(cfg: UNetConfig | None = None, rng: np.random.Generator | None = None, dtype=np.float32) -> NetworkParams:
    cfg = cfg or UNetConfig()
    rng = rng if rng is not None else np.random.default_rng(0)
    return _materialize("M", unet_descriptor(cfg), rng, "he", dtype)


def check_unet_geometry(dims, depth: int) -> None:
    """Spatial dims must halve ``depth`` times and leave at least 2 voxels at the bridge."""
    f = 2**depth
    for n in dims:
        if n % f or n // f < 2:
            raise GeometryError(
                f"U-Net of depth {depth} needs spatial dims that are multiples of {f} and at least {2 * f}; got {tuple(dims)}"
            )


def unet_forward(net: NetworkParams, x: Tensor, training: bool = False, zero_skips=()) -> Tensor:
    """Probability map (N,1,D,H,W) with values in (0, 1)."""
    cfg = net.descriptor["config"]
    _check_input(net, x, cfg["in_channels"])
    check_unet_geometry(x.shape[2:], cfg["depth"])
    slope = cfg["slope"]

    def block(prefix, h):
        for j in range(2):
            h = _apply_conv(net, f"{prefix}.conv{j}", h)
            h = _apply_bn(net, f"{prefix}.bn{j}", h, training)
            h = ad.leaky_relu(h, slope)
        return h

    skips = []
    h = x
    for i in range(cfg["depth"]):
        h = block(f"enc{i}", h)
        skips.append(h)
        h = ad.maxpool3d(h, 2, 2)
    h = block("bridge", h)
    for i in reversed(range(cfg["depth"])):
        h = _apply_conv(net, f"dec{i}.up", h)
        skip = skips[i]
        if i in zero_skips:
            skip = Tensor(np.zeros_like(skip.data))
        h = block(f"dec{i}", ad.concat([h, skip], axis=1))
    return ad.sigmoid(_apply_conv(net, "head", h))


# ------------------------------------------------------------------ GAN networks
def _gan_geometry(k: int, s: int, p: int, slicewise: bool):
    if slicewise:
        return _plane(k, 1), _plane(s, 1), _plane(p, 0)
    return _iso(k), _iso(s), _iso(p)


def generator_descriptor(cfg: GeneratorConfig) -> dict:
    sw = cfg.slicewise
    b = cfg.base_channels
    layers = [
        _conv("stem.conv", cfg.in_channels, b, *_gan_geometry(3, 1, 1, sw)),
        {"name": "stem.norm", "type": "instancenorm", "channels": b, "per_slice": sw},
    ]
    c = b
    for i in range(cfg.n_down):
        layers += [
            _conv(f"down{i}.conv", c, 2 * c, *_gan_geometry(4, 2, 1, sw)),
            {"name": f"down{i}.norm", "type": "instancenorm", "channels": 2 * c, "per_slice": sw},
        ]
        c *= 2
    for j in range(cfg.n_res):
        for t in range(2):
            layers += [
                _conv(f"res{j}.conv{t}", c, c, *_gan_geometry(3, 1, 1, sw)),
                {"name": f"res{j}.norm{t}", "type": "instancenorm", "channels": c, "per_slice": sw},
            ]
    for i in range(cfg.n_down):
        layers += [
            _conv(f"up{i}.conv", c, c // 2, *_gan_geometry(4, 2, 1, sw), transpose=True),
            {"name": f"up{i}.norm", "type": "instancenorm", "channels": c // 2, "per_slice": sw},
        ]
        c //= 2
    layers.append(_conv("head.conv", c, cfg.out_channels, *_gan_geometry(3, 1, 1, sw)))
    return {"kind": "generator3d", "config": asdict(cfg), "layers": layers}


def build_generator3d(cfg: GeneratorConfig | None = None, rng=None, role: str = "G", dtype=np.float32) -> NetworkParams:
    if role not in ("G", "F", "H"):
        raise ModelError(f"generators take roles G, F or H, not {role!r}")
    cfg = cfg or GeneratorConfig()
    rng = rng if rng is not None else np.random.default_rng(0)
    return _materialize(role, generator_descriptor(cfg), rng, "gan", dtype)


def generator_multiple(net_or_cfg) -> tuple[int, int, int]:
    """Per-axis divisor the generator's input dims must satisfy."""
    cfg = net_or_cfg.descriptor["config"] if isinstance(net_or_cfg, NetworkParams) else asdict(net_or_cfg)
    f = 2 ** cfg["n_down"]
    return (1 if cfg["slicewise"] else f, f, f)


def generator_forward(net: NetworkParams, x: Tensor) -> Tensor:
    """Residual encoder/decoder with a tanh head; output matches the input's spatial shape."""
    cfg = net.descriptor["config"]
    _check_input(net, x, cfg["in_channels"])
    mult = generator_multiple(net)
    if any(n % m for n, m in zip(x.shape[2:], mult)):
        raise GeometryError(f"generator input dims {x.shape[2:]} must be multiples of {mult}")
    h = ad.relu(_apply_in(net, "stem.norm", _apply_conv(net, "stem.conv", x)))
    for i in range(cfg["n_down"]):
        h = ad.relu(_apply_in(net, f"down{i}.norm", _apply_conv(net, f"down{i}.conv", h)))
    for j in range(cfg["n_res"]):
        r = ad.relu(_apply_in(net, f"res{j}.norm0", _apply_conv(net, f"res{j}.conv0", h)))
        r = _apply_in(net, f"res{j}.norm1", _apply_conv(net, f"res{j}.conv1", r))
        h = h + r
    for i in range(cfg["n_down"]):
        h = ad.relu(_apply_in(net, f"up{i}.norm", _apply_conv(net, f"up{i}.conv", h)))
    return ad.tanh(_apply_conv(net, "head.conv", h))


def discriminator_descriptor(cfg: DiscriminatorConfig) -> dict:
    sw = cfg.slicewise
    b = cfg.base_channels
    layers = [_conv("l0.conv", cfg.in_channels, b, *_gan_geometry(4, 2, 1, sw))]
    c = b
    for i in range(1, cfg.n_layers):
        layers += [
            _conv(f"l{i}.conv", c, 2 * c, *_gan_geometry(4, 2, 1, sw)),
            {"name": f"l{i}.norm", "type": "instancenorm", "channels": 2 * c, "per_slice": sw},
        ]
        c *= 2
    layers.append(_conv("out.conv", c, 1, *_gan_geometry(3, 1, 1, sw)))
    return {"kind": "discriminator3d", "config": asdict(cfg), "layers": layers}


def build_discriminator3d(cfg: DiscriminatorConfig | None = None, rng=None, role: str = "D1", dtype=np.float32) -> NetworkParams:
    if role not in ("D1", "D2"):
        raise ModelError(f"discriminators take roles D1 or D2, not {role!r}")
    cfg = cfg or DiscriminatorConfig()
    rng = rng if rng is not None else np.random.default_rng(0)
    return _materialize(role, discriminator_descriptor(cfg), rng, "gan", dtype)


def discriminator_forward(net: NetworkParams, x: Tensor) -> Tensor:
    """Patch-wise logit map (N,1,d,h,w); no global pooling."""
    cfg = net.descriptor["config"]
    _check_input(net, x, cfg["in_channels"])
    h = ad.leaky_relu(_apply_conv(net, "l0.conv", x), cfg["slope"])
    for i in range(1, cfg["n_layers"]):
        h = ad.leaky_relu(_apply_in(net, f"l{i}.norm", _apply_conv(net, f"l{i}.conv", h)), cfg["slope"])
    return _apply_conv(net, "out.conv", h)


def forward(net: NetworkParams, x: Tensor, training: bool = False) -> Tensor:
    """Dispatch on the descriptor kind."""
    kind = net.descriptor["kind"]
    if kind == "unet3d":
        return unet_forward(net, x, training)
    if kind == "generator3d":
        return generator_forward(net, x)
    if kind == "discriminator3d":
        return discriminator_forward(net, x)
    raise ModelError(f"unknown network kind {kind!r}")


# ------------------------------------------------------------------ checkpoints
def _tensor_table(net: NetworkParams):
    entries = [("param", k, v.data) for k, v in net.params.items()]
    entries += [("buffer", k, v) for k, v in net.buffers.items()]
    return entries


def save_checkpoint(path, net: NetworkParams) -> Path:
    """Header (magic, version, JSON) followed by the raw little-endian payload."""
    table, chunks, offset = [], [], 0
    for kind, name, arr in _tensor_table(net):
        le = np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        table.append({"name": name, "kind": kind, "dtype": le.dtype.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"format_version": CHECKPOINT_VERSION, "role": net.role, "descriptor": net.descriptor, "tensors": table},
        sort_keys=True,
        separators=(",", ":"),
    ).encode()
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with open(p, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        for raw in chunks:
            fh.write(raw)
    return p


def load_checkpoint(path, expect_role: str | tuple[str, ...] | None = None) -> NetworkParams:
    blob = Path(path).read_bytes()
    if not blob.startswith(CHECKPOINT_MAGIC):
        raise FormatError(f"{path} is not a checkpoint file")
    pos = len(CHECKPOINT_MAGIC)
    try:
        version, hlen = struct.unpack_from("<IQ", blob, pos)
    except struct.error as exc:
        raise CorruptFileError(f"{path}: truncated header") from exc
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    pos += struct.calcsize("<IQ")
    header = json.loads(blob[pos: pos + hlen])
    payload = memoryview(blob)[pos + hlen:]
    total = sum(t["nbytes"] for t in header["tensors"])
    if len(payload) != total:
        raise CorruptFileError(f"{path}: expected {total} payload bytes, found {len(payload)}")
    role = header["role"]
    if expect_role is not None:
        allowed = (expect_role,) if isinstance(expect_role, str) else tuple(expect_role)
        if role not in allowed:
            raise ModelError(f"{path} holds a {role!r} network; expected {' or '.join(allowed)}")
    params, buffers = {}, {}
    for t in header["tensors"]:
        dt = np.dtype(t["dtype"])
        arr = np.frombuffer(payload[t["offset"]: t["offset"] + t["nbytes"]], dtype=dt).reshape(t["shape"])
        arr = arr.astype(dt.newbyteorder("="))
        if t["kind"] == "param":
            params[t["name"]] = Tensor(arr, requires_grad=True, name=t["name"])
        else:
            buffers[t["name"]] = arr
    net = NetworkParams(role, header["descriptor"], params, buffers)
    net.validate()
    return net

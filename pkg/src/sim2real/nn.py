"""Layers, initialization, Adam, and binary checkpoints on top of autodiff.

Layer parameters are plain autodiff Tensors held in dicts keyed by
"<layer>.<tensor>" names, which is also the naming scheme inside NNCK
checkpoint files.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

ACTIVATIONS = {
    "relu": ad.relu,
    "sigmoid": ad.sigmoid,
    "tanh": ad.tanh,
    "none": lambda t: t,
}


class TrainingDiverged(RuntimeError):
    """Raised when a gradient or loss stops being finite."""


@dataclass
class LayerSpec:
    """Declarative layer description; concrete classes below wrap one each."""
    kind: str                       # dense | conv2d | deconv2d | lstm
    fan_in: int = 0
    fan_out: int = 0
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 1
    stride: int = 1
    padding: int = 0
    output_padding: int = 0
    activation: str = "none"

    def __post_init__(self):
        if self.kind not in ("dense", "conv2d", "deconv2d", "lstm"):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kernel < 1 or self.stride < 1 or self.padding < 0 or self.output_padding < 0:
            raise ValueError("kernel and stride must be >= 1, paddings >= 0")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


def glorot_uniform(shape, fan_in, fan_out, rng, dtype=np.float32):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def init_params(spec, rng_seed, dtype=np.float32):
    """Weights uniform in +-sqrt(6/(fan_in+fan_out)), biases zero."""
    rng = np.random.default_rng(rng_seed)
    k = spec.kernel
    if spec.kind == "dense":
        w = glorot_uniform((spec.fan_in, spec.fan_out), spec.fan_in, spec.fan_out, rng, dtype)
        b = np.zeros(spec.fan_out, dtype)
    elif spec.kind == "conv2d":
        w = glorot_uniform((spec.out_channels, spec.in_channels, k, k),
                           spec.in_channels * k * k, spec.out_channels * k * k, rng, dtype)
        b = np.zeros(spec.out_channels, dtype)
    elif spec.kind == "deconv2d":
        w = glorot_uniform((spec.in_channels, spec.out_channels, k, k),
                           spec.in_channels * k * k, spec.out_channels * k * k, rng, dtype)
        b = np.zeros(spec.out_channels, dtype)
    else:  # lstm: one fused gate matrix, gate order i, f, g, o
        fan_in = spec.fan_in + spec.fan_out
        w = glorot_uniform((fan_in, 4 * spec.fan_out), fan_in, 4 * spec.fan_out, rng, dtype)
        b = np.zeros(4 * spec.fan_out, dtype)
    return {"w": Tensor(w, requires_grad=True), "b": Tensor(b, requires_grad=True)}


def layer_forward(spec, params, x):
    act = ACTIVATIONS[spec.activation]
    if spec.kind == "dense":
        if x.shape[-1] != spec.fan_in:
            raise ad.ShapeMismatchError("dense", x.shape, (spec.fan_in, spec.fan_out))
        return act(ad.add(ad.matmul(x, params["w"]), params["b"]))
    if spec.kind == "conv2d":
        if x.shape[1] != spec.in_channels:
            raise ad.ShapeMismatchError("conv2d", x.shape, params["w"].shape)
        return act(ad.conv2d(x, params["w"], params["b"], stride=spec.stride, padding=spec.padding))
    if spec.kind == "deconv2d":
        if x.shape[1] != spec.in_channels:
            raise ad.ShapeMismatchError("deconv2d", x.shape, params["w"].shape)
        return act(ad.deconv2d(x, params["w"], params["b"], stride=spec.stride,
                               padding=spec.padding, output_padding=spec.output_padding))
    raise ValueError(f"layer_forward does not apply to {spec.kind!r}; use lstm_step")


def lstm_step(params, state, x):
    """One LSTM cell step. state = (h, c), both (B, hidden). Returns (h', (h', c'))."""
    h, c = state
    hidden = h.shape[-1]
    if x.shape[0] != h.shape[0]:
        raise ad.ShapeMismatchError("lstm_step", x.shape, h.shape)
    z = ad.add(ad.matmul(ad.concat([x, h], axis=1), params["w"]), params["b"])
    i = ad.sigmoid(ad.slice_axis(z, 1, 0, hidden))
    f = ad.sigmoid(ad.slice_axis(z, 1, hidden, 2 * hidden))
    g = ad.tanh(ad.slice_axis(z, 1, 2 * hidden, 3 * hidden))
    o = ad.sigmoid(ad.slice_axis(z, 1, 3 * hidden, 4 * hidden))
    c_new = ad.add(ad.mul(f, c), ad.mul(i, g))
    h_new = ad.mul(o, ad.tanh(c_new))
    return h_new, (h_new, c_new)


class Layer:
    """A LayerSpec bound to initialized parameters."""

    def __init__(self, spec, seed, name, dtype=np.float32):
        self.spec = spec
        self.name = name
        self.params = init_params(spec, seed, dtype)

    def __call__(self, x):
        return layer_forward(self.spec, self.params, x)

    def parameters(self):
        return {f"{self.name}.{k}": v for k, v in self.params.items()}


def dense(fan_in, fan_out, activation, seed, name, dtype=np.float32):
    return Layer(LayerSpec("dense", fan_in=fan_in, fan_out=fan_out, activation=activation),
                 seed, name, dtype)


def conv(in_ch, out_ch, kernel, stride, padding, activation, seed, name, dtype=np.float32):
    return Layer(LayerSpec("conv2d", in_channels=in_ch, out_channels=out_ch, kernel=kernel,
                           stride=stride, padding=padding, activation=activation),
                 seed, name, dtype)


def deconv(in_ch, out_ch, kernel, stride, padding, output_padding, activation, seed, name,
           dtype=np.float32):
    return Layer(LayerSpec("deconv2d", in_channels=in_ch, out_channels=out_ch, kernel=kernel,
                           stride=stride, padding=padding, output_padding=output_padding,
                           activation=activation),
                 seed, name, dtype)


class LstmCell:
    def __init__(self, input_size, hidden_size, seed, name="lstm", dtype=np.float32):
        self.spec = LayerSpec("lstm", fan_in=input_size, fan_out=hidden_size)
        self.hidden_size = hidden_size
        self.name = name
        self.params = init_params(self.spec, seed, dtype)
        self.dtype = dtype

    def zero_state(self, batch):
        z = np.zeros((batch, self.hidden_size), dtype=self.dtype)
        return Tensor(z), Tensor(z.copy())

    def __call__(self, x, state):
        return lstm_step(self.params, state, x)

    def parameters(self):
        return {f"{self.name}.{k}": v for k, v in self.params.items()}


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


class Adam:
    """Adam with bias correction; zeroes gradients after each step."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state = AdamState(
            m={k: np.zeros_like(p.data) for k, p in self.params.items()},
            v={k: np.zeros_like(p.data) for k, p in self.params.items()},
        )

    def step(self):
        st = self.state
        st.step += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** st.step
        c2 = 1.0 - b2 ** st.step
        for k, p in self.params.items():
            g = p.grad
            if not np.isfinite(g).all():
                raise TrainingDiverged(
                    f"non-finite gradient in {k!r} at step {st.step}: "
                    f"|g|max={np.abs(g[np.isfinite(g)]).max() if np.isfinite(g).any() else 'n/a'}")
            m = st.m[k]
            v = st.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            p.data -= (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.zero_grad()


# ---------------------------------------------------------------------------
# NNCK checkpoint format
#
# magic "NNCK" | u32 version | records:
#   u16 name length | name bytes (utf-8) | u32 rank | u32 extents... |
#   float32 little-endian values (row-major)
# Optional config text rides along as a float32-encoded byte record named
# "__config__".

NNCK_MAGIC = b"NNCK"
NNCK_VERSION = 1
CONFIG_RECORD = "__config__"


def save_checkpoint(path, tensors, config_text=None):
    items = []
    for name, t in tensors.items():
        arr = t.data if isinstance(t, Tensor) else np.asarray(t)
        items.append((name, arr.astype("<f4", copy=False)))
    if config_text is not None:
        raw = np.frombuffer(config_text.encode("utf-8"), dtype=np.uint8)
        items.append((CONFIG_RECORD, raw.astype("<f4")))
    with open(path, "wb") as fh:
        fh.write(NNCK_MAGIC)
        fh.write(struct.pack("<I", NNCK_VERSION))
        for name, arr in items:
            name_b = name.encode("utf-8")
            fh.write(struct.pack("<H", len(name_b)))
            fh.write(name_b)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path):
    """Returns (tensors: dict[str, float32 ndarray], config_text or None)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != NNCK_MAGIC:
        raise ValueError(f"not an NNCK checkpoint: bad magic {blob[:4]!r}")
    if len(blob) < 8:
        raise ValueError("truncated NNCK checkpoint: missing version")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != NNCK_VERSION:
        raise ValueError(f"unsupported NNCK version {version}")
    pos = 8
    tensors = {}
    config_text = None
    while pos < len(blob):
        if pos + 2 > len(blob):
            raise ValueError("truncated NNCK checkpoint: partial record header")
        (nlen,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        if pos + nlen + 4 > len(blob):
            raise ValueError("truncated NNCK checkpoint: partial record name")
        name = blob[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        if pos + 4 * rank > len(blob):
            raise ValueError("truncated NNCK checkpoint: partial extents")
        extents = struct.unpack_from(f"<{rank}I", blob, pos)
        pos += 4 * rank
        count = int(np.prod(extents)) if rank else 1
        if pos + 4 * count > len(blob):
            raise ValueError(f"truncated NNCK checkpoint: record {name!r} data")
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=pos).reshape(extents)
        pos += 4 * count
        if name == CONFIG_RECORD:
            config_text = arr.astype(np.uint8).tobytes().decode("utf-8")
        else:
            tensors[name] = arr.copy()
    return tensors, config_text


def assign_state(params, arrays):
    """Load checkpoint arrays into an existing parameter dict, by name."""
    missing = set(params) - set(arrays)
    extra = set(arrays) - set(params)
    if missing or extra:
        raise ValueError(f"checkpoint mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
    for k, p in params.items():
        if arrays[k].shape != p.data.shape:
            raise ValueError(f"checkpoint shape mismatch for {k!r}: "
                             f"{arrays[k].shape} vs {p.data.shape}")
        p.data = arrays[k].astype(p.data.dtype)

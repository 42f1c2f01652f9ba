"""Executable sequential CNNs built from an :class:`ArchDescriptor`."""

import json
import struct

import numpy as np

from . import tensor as T
from .arch import AvgPool, Conv, Flatten, Linear, MaxPool, parse_descriptor
from .channels import ChannelMask, ChannelRegistry
from .errors import ConstraintError, ParseError, ShapeError

BN_MOMENTUM = 0.1
BN_EPS = 1e-5

DTYPES = {"float32": np.float32, "float64": np.float64}


class Model:
    """Parameters and BN buffers for a sequential conv net.

    Parameter names: ``conv{l}.weight``, ``conv{l}.bias`` (optional),
    ``bn{l}.weight`` / ``bn{l}.bias`` for gamma / beta, ``fc.weight`` /
    ``fc.bias``. Buffers: ``bn{l}.running_mean`` / ``bn{l}.running_var``.
    """

    def __init__(self, desc, dtype=np.float64):
        self.desc = desc.validate()
        self.dtype = np.dtype(dtype)
        self.shapes = desc.trace()
        self.registry = ChannelRegistry(desc.conv_widths)
        self.params = {}
        self.buffers = {}
        c_in = desc.input_shape[0]
        conv_idx = 0
        for ls in self.shapes:
            b = ls.block
            if isinstance(b, Conv):
                pre = f"conv{conv_idx}"
                self._param(f"{pre}.weight", (b.out_channels, c_in, b.kernel, b.kernel))
                if b.bias:
                    self._param(f"{pre}.bias", (b.out_channels,))
                self._param(f"bn{conv_idx}.weight", (b.out_channels,), fill=1.0)
                self._param(f"bn{conv_idx}.bias", (b.out_channels,))
                self.buffers[f"bn{conv_idx}.running_mean"] = np.zeros(b.out_channels, self.dtype)
                self.buffers[f"bn{conv_idx}.running_var"] = np.ones(b.out_channels, self.dtype)
                c_in = b.out_channels
                conv_idx += 1
            elif isinstance(b, Linear):
                self._param("fc.weight", (b.out_features, ls.in_shape[0]))
                self._param("fc.bias", (b.out_features,))

    def _param(self, name, shape, fill=0.0):
        self.params[name] = T.Tensor(np.full(shape, fill, dtype=self.dtype), requires_grad=True)

    @property
    def num_conv(self):
        return self.registry.num_layers

    def parameters(self):
        return list(self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state_arrays(self):
        """Name -> array for every parameter and buffer (no copies)."""
        out = {k: v.data for k, v in self.params.items()}
        out.update(self.buffers)
        return out

    def copy(self):
        other = Model(self.desc, self.dtype)
        for k, v in self.params.items():
            other.params[k].data = v.data.copy()
        for k, v in self.buffers.items():
            other.buffers[k] = v.copy()
        return other

    def astype(self, dtype):
        other = Model(self.desc, dtype)
        for k, v in self.params.items():
            other.params[k].data = v.data.astype(dtype)
        for k, v in self.buffers.items():
            other.buffers[k] = v.astype(dtype)
        return other

    def num_parameters(self):
        return int(sum(p.data.size for p in self.params.values()))

    def flatten_spatial(self):
        """Spatial positions per channel at the Flatten boundary."""
        for ls in self.shapes:
            if isinstance(ls.block, Flatten):
                c, h, w = ls.in_shape
                return h * w
        raise ShapeError("flatten", "descriptor has no Flatten block")

    def update_masks(self, mask):
        """Per-parameter boolean arrays marking entries the thin net trains.

        A parameter entry is trainable when every gated channel it touches
        is active: conv kernels need both their output channel and their
        input channel live, BN affine terms their channel, and the
        classifier its source channel. ``None`` means fully trainable.
        """
        if mask is None or mask.all_active:
            return {name: None for name in self.params}
        bits = mask.layer_bits()
        out = {}
        for l in range(self.num_conv):
            act = bits[l]
            w = self.params[f"conv{l}.weight"]
            m = act[:, None, None, None]
            if l > 0:
                m = m & bits[l - 1][None, :, None, None]
            out[f"conv{l}.weight"] = np.broadcast_to(m, w.shape)
            if f"conv{l}.bias" in self.params:
                out[f"conv{l}.bias"] = act
            out[f"bn{l}.weight"] = act
            out[f"bn{l}.bias"] = act
        if self.num_conv:
            cols = np.repeat(bits[-1], self.flatten_spatial())
            out["fc.weight"] = np.broadcast_to(cols[None, :], self.params["fc.weight"].shape)
        for name in self.params:
            out.setdefault(name, None)
        return out


def build_model(desc, seed=0, dtype=np.float64):
    """He-normal conv/linear weights (std sqrt(2 / fan_in)), BN gamma=1, beta=0."""
    model = Model(desc, dtype)
    rng = np.random.default_rng(seed)
    for name, p in model.params.items():
        if name.endswith(".weight") and (name.startswith("conv") or name == "fc.weight"):
            fan_in = int(np.prod(p.shape[1:]))
            p.data = (rng.standard_normal(p.shape) * np.sqrt(2.0 / fan_in)).astype(model.dtype)
    return model


def _gates(model, mask, gates):
    if gates is not None:
        if len(gates) != model.num_conv:
            raise ConstraintError(f"{len(gates)} gate vectors for {model.num_conv} conv layers")
        return [np.asarray(g, dtype=model.dtype) for g in gates]
    if mask is None:
        return None
    if not isinstance(mask, ChannelMask):
        mask = ChannelMask(model.registry, mask)
    if mask.registry != model.registry:
        raise ConstraintError(f"mask over {mask.registry!r} does not fit model {model.registry!r}")
    return [b.astype(model.dtype) for b in mask.layer_bits()]


def forward(model, x, mask=None, mode="train", update_stats=None, taps=None, gates=None):
    """Run the (optionally gated) network and return logits.

    Each conv unit computes Conv -> BN -> ReLU and then multiplies channel
    ``k`` by its gate (0/1 from ``mask``, or arbitrary floats via
    ``gates``). In train mode BN uses batch statistics and, unless
    ``update_stats`` is False, updates running statistics of active
    channels only. If ``taps`` is a dict it receives the gated output of
    every conv layer with gradient retention enabled.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    training = mode == "train"
    if update_stats is None:
        update_stats = training
    if not isinstance(x, T.Tensor):
        x = T.Tensor(np.asarray(x, dtype=model.dtype))
    if x.ndim != 4 or tuple(x.shape[1:]) != model.desc.input_shape:
        raise ShapeError("forward", f"batch {x.shape} does not match input {model.desc.input_shape}")
    gv = _gates(model, mask, gates)
    h = x
    conv_idx = 0
    for ls in model.shapes:
        b = ls.block
        if isinstance(b, Conv):
            p = model.params
            pre = f"conv{conv_idx}"
            h = T.conv2d(h, p[f"{pre}.weight"], p.get(f"{pre}.bias"), stride=b.stride, padding=b.padding)
            upd = None
            if gv is not None:
                upd = gv[conv_idx] != 0
            h = T.batchnorm2d(h, p[f"bn{conv_idx}.weight"], p[f"bn{conv_idx}.bias"],
                              model.buffers[f"bn{conv_idx}.running_mean"],
                              model.buffers[f"bn{conv_idx}.running_var"],
                              training=training, momentum=BN_MOMENTUM, eps=BN_EPS,
                              update_stats=update_stats, update_mask=upd)
            h = T.relu(h)
            if gv is not None:
                h = T.channel_mask_mul(h, gv[conv_idx])
            if taps is not None:
                if T.is_grad_enabled():
                    h.requires_grad = True
                taps[conv_idx] = h.retain_grad()
            conv_idx += 1
        elif isinstance(b, MaxPool):
            h = T.maxpool2d(h, b.kernel, b.stride)
        elif isinstance(b, AvgPool):
            h = T.avgpool2d(h, b.kernel, b.stride)
        elif isinstance(b, Flatten):
            h = T.flatten(h)
        elif isinstance(b, Linear):
            h = T.linear(h, model.params["fc.weight"], model.params["fc.bias"])
    return h


def predict(model, x, mask=None, batch_size=500):
    """Eval-mode logits as a numpy array, without recording a graph."""
    outs = []
    with T.no_grad():
        for i in range(0, len(x), batch_size):
            outs.append(forward(model, x[i:i + batch_size], mask, mode="eval").data)
    return np.concatenate(outs) if outs else np.zeros((0, model.desc.num_classes), model.dtype)


# ---------------------------------------------------------------- checkpoints

MAGIC = b"DYNCHK\x00\x01"
FORMAT_VERSION = 1


def save_checkpoint(path, model, mask=None, meta=None):
    """Write a checkpoint; layout is documented in docs/checkpoint_format.md."""
    arrays = model.state_arrays()
    dt = "<f4" if model.dtype == np.float32 else "<f8"
    entries, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        raw = np.ascontiguousarray(arr, dtype=dt).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw),
                        "kind": "param" if name in model.params else "buffer"})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "format_version": FORMAT_VERSION,
        "descriptor": model.desc.to_text(),
        "arch_name": model.desc.name,
        "precision": "float32" if model.dtype == np.float32 else "float64",
        "mask": None if mask is None else mask.to_rle(),
        "tensors": entries,
        "meta": meta or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(hbytes)))
        fh.write(hbytes)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path):
    """Return ``(model, mask_or_None, meta)``."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != MAGIC:
        raise ParseError("not a checkpoint file (bad magic)", "byte 0")
    if len(data) < 16:
        raise ParseError("truncated checkpoint header", "byte 8")
    version, hlen = struct.unpack("<II", data[8:16])
    if version != FORMAT_VERSION:
        raise ParseError(f"unsupported checkpoint version {version}", "byte 8")
    if len(data) < 16 + hlen:
        raise ParseError(f"header needs {hlen} bytes, file has {len(data) - 16}", "byte 16")
    header = json.loads(data[16:16 + hlen].decode("utf-8"))
    desc = parse_descriptor(header["descriptor"], header.get("arch_name", "custom"))
    dtype = DTYPES[header["precision"]]
    model = Model(desc, dtype)
    dt = "<f4" if dtype == np.float32 else "<f8"
    base = 16 + hlen
    for e in header["tensors"]:
        start = base + e["offset"]
        if start + e["nbytes"] > len(data):
            raise ParseError(f"tensor {e['name']} runs past end of file", f"byte {start}")
        arr = np.frombuffer(data, dtype=dt, count=int(np.prod(e["shape"], dtype=np.int64)),
                            offset=start).reshape(e["shape"]).astype(dtype)
        if e["kind"] == "param":
            if model.params[e["name"]].shape != arr.shape:
                raise ParseError(f"tensor {e['name']} has shape {arr.shape}, descriptor implies "
                                 f"{model.params[e['name']].shape}", f"byte {start}")
            model.params[e["name"]].data = arr
        else:
            model.buffers[e["name"]] = arr
    mask = None
    if header.get("mask"):
        mask = ChannelMask.from_rle(model.registry, header["mask"])
    return model, mask, header.get("meta", {})

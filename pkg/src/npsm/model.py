"""Parameter container, initialisation and the binary model file.

Model file layout (all integers little-endian u32)::

    b"NPSM" | version | tensor count
    per tensor: name length | UTF-8 name | rank | dims... | float32 LE values

The run configuration travels inside the file as a rank-1 tensor named
``__config__`` whose values are the UTF-8 bytes of ``RunConfig.to_text()``,
followed by ``__n_identities__`` (a single value).
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

from .backbone import backbone_param_shapes
from .config import RunConfig
from .identification import ident_param_shapes
from .nsn import no_attention_param_shapes, no_context_param_shapes, nsn_param_shapes
from .tensor import Tensor

MAGIC = b"NPSM"
FORMAT_VERSION = 1
_CONFIG_KEY = "__config__"
_NID_KEY = "__n_identities__"


class ModelFileError(ValueError):
    pass


def param_shapes(cfg: RunConfig, n_identities: int) -> dict:
    shapes = dict(backbone_param_shapes(cfg.n_stages, cfg.D, kernel=cfg.backbone_kernel))
    if cfg.variant == "full":
        shapes.update(nsn_param_shapes(cfg.D))
    elif cfg.variant == "no_context":
        shapes.update(no_context_param_shapes(cfg.D))
    else:
        shapes.update(no_attention_param_shapes(cfg.D, cfg.K, cfg.mlp_hidden))
    shapes.update(ident_param_shapes(cfg.D, n_identities))
    return shapes


class Model:
    """All trainable tensors of one NPSM variant, keyed by name."""

    def __init__(self, cfg: RunConfig, n_identities: int, params: dict):
        self.cfg = cfg
        self.n_identities = n_identities
        self.params = params

    @classmethod
    def init(cls, cfg: RunConfig, n_identities: int, seed: int | None = None) -> "Model":
        """Uniform(-s, s) with s = 1/sqrt(fan_in); biases zero except the forget gate (+1)."""
        rng = np.random.default_rng(cfg.seed if seed is None else seed)
        dtype = np.dtype(cfg.dtype)
        params = {}
        for name, shape in sorted(param_shapes(cfg, n_identities).items()):
            if len(shape) == 1:
                data = np.full(shape, 1.0 if name == "nsn.b_f" else 0.0)
            else:
                fan_in = int(np.prod(shape[:-1]))
                s = 1.0 / np.sqrt(fan_in)
                data = rng.uniform(-s, s, size=shape)
            params[name] = Tensor(data.astype(dtype), requires_grad=True, name=name)
        return cls(cfg, n_identities, params)

    @classmethod
    def zeros(cls, cfg: RunConfig, n_identities: int) -> "Model":
        dtype = np.dtype(cfg.dtype)
        params = {name: Tensor(np.zeros(shape, dtype), requires_grad=True, name=name)
                  for name, shape in sorted(param_shapes(cfg, n_identities).items())}
        return cls(cfg, n_identities, params)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def astype(self, dtype) -> "Model":
        dtype = np.dtype(dtype)
        params = {k: Tensor(v.data.astype(dtype), requires_grad=True, name=k) for k, v in self.params.items()}
        return Model(self.cfg.replace(dtype=dtype.name), self.n_identities, params)

    # -- serialisation ------------------------------------------------------

    def to_bytes(self) -> bytes:
        items = [(k, self.params[k].data) for k in sorted(self.params)]
        cfg_bytes = np.frombuffer(self.cfg.to_text().encode("utf-8"), dtype=np.uint8)
        items.append((_CONFIG_KEY, cfg_bytes))
        items.append((_NID_KEY, np.asarray([self.n_identities])))
        out = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(items))]
        for name, arr in items:
            nb = name.encode("utf-8")
            out.append(struct.pack("<I", len(nb)))
            out.append(nb)
            out.append(struct.pack("<I", arr.ndim))
            out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
            out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        return b"".join(out)

    def save(self, path):
        Path(path).write_bytes(self.to_bytes())

    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()[:16]

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Model":
        if blob[:4] != MAGIC:
            raise ModelFileError("not an NPSM model file (bad magic)")
        try:
            version, count = struct.unpack_from("<II", blob, 4)
        except struct.error:
            raise ModelFileError("truncated model header") from None
        if version != FORMAT_VERSION:
            raise ModelFileError(f"model file version {version}, this build reads {FORMAT_VERSION}")
        off = 12
        tensors = {}
        try:
            for _ in range(count):
                (n,) = struct.unpack_from("<I", blob, off)
                off += 4
                name = blob[off : off + n].decode("utf-8")
                off += n
                (rank,) = struct.unpack_from("<I", blob, off)
                off += 4
                dims = struct.unpack_from(f"<{rank}I", blob, off)
                off += 4 * rank
                size = int(np.prod(dims)) if rank else 1
                arr = np.frombuffer(blob, dtype="<f4", count=size, offset=off).reshape(dims)
                off += 4 * size
                tensors[name] = arr
        except (struct.error, ValueError) as exc:
            raise ModelFileError(f"corrupt model file: {exc}") from None
        if off != len(blob):
            raise ModelFileError(f"{len(blob) - off} trailing bytes in model file")
        if _CONFIG_KEY not in tensors or _NID_KEY not in tensors:
            raise ModelFileError("model file lacks its embedded run configuration")
        cfg = RunConfig.from_text(tensors.pop(_CONFIG_KEY).astype(np.uint8).tobytes().decode("utf-8"))
        n_id = int(tensors.pop(_NID_KEY)[0])
        expected = param_shapes(cfg, n_id)
        if set(expected) != set(tensors):
            raise ModelFileError(f"parameter set mismatch: missing {sorted(set(expected) - set(tensors))}, "
                                 f"unexpected {sorted(set(tensors) - set(expected))}")
        dtype = np.dtype(cfg.dtype)
        params = {}
        for name in sorted(tensors):
            if tuple(tensors[name].shape) != tuple(expected[name]):
                raise ModelFileError(f"{name}: shape {tensors[name].shape}, expected {expected[name]}")
            params[name] = Tensor(tensors[name].astype(dtype), requires_grad=True, name=name)
        return cls(cfg, n_id, params)

    @classmethod
    def load(cls, path) -> "Model":
        return cls.from_bytes(Path(path).read_bytes())

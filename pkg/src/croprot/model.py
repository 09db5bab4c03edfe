"""Full classifier: encoders + head, with binary checkpoints.

Checkpoint layout: magic "RCWT", version u32, parameter count u32, then
per parameter a name (u16 length + utf-8), ndim u8, dims u32 each, and the
little-endian float32 data.  A JSON sidecar records the architecture.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, asdict

import numpy as np

from .encoders import EncoderDims, LtaeWeights, PseWeights
from .errors import DataFormatError
from .heads import HeadWeights

CKPT_MAGIC = b"RCWT"
CKPT_VERSION = 1


@dataclass
class ModelDims(EncoderDims):
    num_classes: int = 20
    head_hidden: int = 64

    def encoder(self):
        return EncoderDims(
            channels=self.channels,
            sample_pixels=self.sample_pixels,
            d1=self.d1,
            d2=self.d2,
            heads=self.heads,
            d_k=self.d_k,
            out_hidden=self.out_hidden,
            descriptor=self.descriptor,
        )


class CropModel:
    def __init__(self, dims: ModelDims, variant: str, seed: int = 0, dtype=np.float32):
        self.dims = dims
        self.variant = variant
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
        enc = dims.encoder()
        self.pse = PseWeights(enc, rng, dtype=dtype)
        self.ltae = LtaeWeights(enc, rng, dtype=dtype)
        self.head = HeadWeights(
            variant, dims.num_classes, dims.descriptor, dims.head_hidden, rng, dtype=dtype
        )

    def parameters(self):
        return self.pse.parameters() + self.ltae.parameters() + self.head.parameters()

    def named_parameters(self):
        names = ["pse.w1", "pse.b1", "pse.w2", "pse.b2", "pse.w3", "pse.b3",
                 "ltae.wk", "ltae.bk", "ltae.query", "ltae.wo1", "ltae.bo1",
                 "ltae.wo2", "ltae.bo2",
                 "head.w1", "head.b1", "head.w2", "head.b2"]
        return list(zip(names, self.parameters()))

    def state_arrays(self):
        return [np.array(p.data) for p in self.parameters()]

    def load_state_arrays(self, arrays):
        params = self.parameters()
        if len(arrays) != len(params):
            raise DataFormatError("parameter count mismatch")
        for p, a in zip(params, arrays):
            if p.data.shape != a.shape:
                raise DataFormatError(
                    f"parameter shape mismatch: {p.data.shape} vs {a.shape}"
                )
            p.data = a.astype(p.data.dtype)


def save_checkpoint(path, model: CropModel):
    path = str(path)
    named = model.named_parameters()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(named)))
        for name, p in named:
            raw = name.encode()
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", p.data.ndim))
            for d in p.data.shape:
                fh.write(struct.pack("<I", d))
            fh.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    sidecar = {"dims": asdict(model.dims), "variant": model.variant}
    with open(path + ".json", "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path):
    path = str(path)
    try:
        with open(path + ".json") as fh:
            sidecar = json.load(fh)
    except FileNotFoundError:
        raise DataFormatError(f"missing checkpoint sidecar {path}.json")
    dims = ModelDims(**sidecar["dims"])
    model = CropModel(dims, sidecar["variant"])
    arrays = []
    with open(path, "rb") as fh:
        def read(n):
            buf = fh.read(n)
            if len(buf) != n:
                raise DataFormatError("truncated checkpoint")
            return buf

        magic = fh.read(4)
        if magic != CKPT_MAGIC:
            raise DataFormatError(
                f"bad checkpoint magic {magic!r}; expected {CKPT_MAGIC!r}"
            )
        version, count = struct.unpack("<II", read(8))
        if version != CKPT_VERSION:
            raise DataFormatError(f"unsupported checkpoint version {version}")
        for _ in range(count):
            (nlen,) = struct.unpack("<H", read(2))
            read(nlen)  # name; order is canonical
            (ndim,) = struct.unpack("<B", read(1))
            shape = struct.unpack(f"<{ndim}I", read(4 * ndim))
            n = int(np.prod(shape)) if ndim else 1
            arrays.append(
                np.frombuffer(read(4 * n), dtype="<f4").reshape(shape)
            )
    model.load_state_arrays(arrays)
    return model

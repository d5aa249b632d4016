"""Residual encoder-decoder that maps a raw diffraction image to phase.

Layout for ``down_blocks=D, up_blocks=U, tail_blocks=T``::

    stem   3x3 conv -> relu                                   (stage 0)
    down   relu(3x3 conv, stride 2) + 1x1 stride-2 shortcut   (stages 1..D)
    up     relu(4x4 transposed conv, stride 2) + 2x2 transposed shortcut,
           then concat with the encoder stage of equal size and 1x1 project
    tail   x + relu(3x3 dilated conv)
    head   1x1 conv (or a transposed conv when U < D) -> -pi * sigmoid

Channels at stage ``k`` are ``base_channels * channel_growth**k``.
"""

from __future__ import annotations

import io
import struct
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from dlpr import autodiff as ad
from dlpr.autodiff import Tensor

CHECKPOINT_MAGIC = b"DLPR"
CHECKPOINT_VERSION = 1


class SpecError(ValueError):
    pass


class CheckpointError(Exception):
    """Base class for unreadable or incompatible checkpoints."""


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


def default_dilations(down, up, tail):
    dil = [1] * (down + up + tail)
    # 1, 2, 4 ... on the tail and the block feeding it
    for k, idx in enumerate(range(down + up - 1, down + up + tail)):
        if idx >= 0:
            dil[idx] = 2**k
    return tuple(dil)


@dataclass(frozen=True)
class NetworkSpec:
    input_size: int = 64
    down_blocks: int = 3
    up_blocks: int = 3
    tail_blocks: int = 2
    base_channels: int = 16
    channel_growth: int = 2
    dilations: tuple = None
    skip_pairs: tuple = None
    head: str = "logistic"

    def __post_init__(self):
        if self.dilations is None:
            object.__setattr__(
                self, "dilations", default_dilations(self.down_blocks, self.up_blocks, self.tail_blocks)
            )
        else:
            object.__setattr__(self, "dilations", tuple(int(d) for d in self.dilations))
        if self.skip_pairs is None:
            pairs = tuple((self.down_blocks - j - 1, j) for j in range(self.up_blocks))
            object.__setattr__(self, "skip_pairs", pairs)
        else:
            object.__setattr__(self, "skip_pairs", tuple((int(e), int(d)) for e, d in self.skip_pairs))
        self.validate()

    @classmethod
    def paper_scale(cls, input_size=128, base_channels=4, **kw):
        """The 7 down / 6 up / 2 tail arrangement, narrow enough for shape tests."""
        return cls(input_size=input_size, down_blocks=7, up_blocks=6, tail_blocks=2, base_channels=base_channels, **kw)

    @property
    def n_blocks(self):
        return self.down_blocks + self.up_blocks + self.tail_blocks

    def channels(self, stage: int) -> int:
        return self.base_channels * self.channel_growth**stage

    def validate(self):
        for name in ("input_size", "base_channels", "channel_growth"):
            if getattr(self, name) < 1:
                raise SpecError(f"{name} must be >= 1")
        for name in ("down_blocks", "up_blocks", "tail_blocks"):
            if getattr(self, name) < 0:
                raise SpecError(f"{name} must be >= 0")
        scale = 2**self.down_blocks
        if self.input_size % scale or self.input_size // scale < 1:
            raise SpecError(
                f"spatial extent: input_size {self.input_size} is not divisible by 2**down_blocks = {scale}"
            )
        if self.up_blocks > self.down_blocks:
            raise SpecError(f"up_blocks ({self.up_blocks}) cannot exceed down_blocks ({self.down_blocks})")
        if len(self.dilations) != self.n_blocks:
            raise SpecError(f"dilations: need {self.n_blocks} entries (one per block), got {len(self.dilations)}")
        if any(d < 1 for d in self.dilations):
            raise SpecError("dilations must be >= 1")
        ups = self.dilations[self.down_blocks : self.down_blocks + self.up_blocks]
        if any(d != 1 for d in ups):
            raise SpecError("dilations: upsampling blocks only support dilation 1")
        seen = set()
        for enc, dec in self.skip_pairs:
            if not 0 <= dec < self.up_blocks:
                raise SpecError(f"skip_pairs: decoder block {dec} does not exist")
            if enc != self.down_blocks - dec - 1:
                raise SpecError(
                    f"skip_pairs: encoder stage {enc} and decoder block {dec} differ in spatial size "
                    f"(decoder {dec} emits stage {self.down_blocks - dec - 1})"
                )
            if dec in seen:
                raise SpecError(f"skip_pairs: decoder block {dec} listed twice")
            seen.add(dec)
        if self.head not in ("logistic", "linear"):
            raise SpecError(f"head must be 'logistic' or 'linear', got {self.head!r}")

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "dilations":
                v = ",".join(str(d) for d in v)
            elif f.name == "skip_pairs":
                v = ",".join(f"{e}:{d}" for e, d in v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_mapping(cls, values: dict) -> "NetworkSpec":
        kw = {}
        for f in fields(cls):
            if f.name not in values:
                continue
            raw = str(values[f.name]).strip()
            if f.name == "dilations":
                kw[f.name] = tuple(int(x) for x in raw.split(",") if x.strip())
            elif f.name == "skip_pairs":
                kw[f.name] = tuple(tuple(int(y) for y in x.split(":")) for x in raw.split(",") if x.strip())
            elif f.name == "head":
                kw[f.name] = raw
            else:
                kw[f.name] = int(raw)
        unknown = set(values) - {f.name for f in fields(cls)}
        if unknown:
            raise SpecError(f"unknown network spec keys: {sorted(unknown)}")
        return cls(**kw)

    @classmethod
    def from_text(cls, text: str) -> "NetworkSpec":
        return cls.from_mapping(parse_key_values(text))


def parse_key_values(text: str) -> dict:
    """``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _fan_uniform(rng, shape, dtype):
    """Weights and bias drawn from U(-1/sqrt(fan), 1/sqrt(fan)).

    ``fan = shape[1] * kh * kw``, the common library default for both conv
    kinds.  For a transposed kernel ``(cin, cout, k, k)`` that is the output
    channel count, which keeps its scale comparable to the forward conv.
    """
    bound = 1.0 / np.sqrt(shape[1] * shape[2] * shape[3])
    w = rng.uniform(-bound, bound, shape).astype(dtype)
    return w, bound


class PhaseNet:
    """Parameters plus forward pass for a :class:`NetworkSpec`.

    Parameter order is fixed by construction and is the order used in
    checkpoints.
    """

    def __init__(self, spec: NetworkSpec, seed: int = 0, dtype=None):
        self.spec = spec
        self.seed = seed
        dtype = dtype or ad.default_dtype()
        rng = np.random.default_rng(seed)
        self._params: dict[str, Tensor] = {}

        def add(name, shape, cout):
            w, bound = _fan_uniform(rng, shape, dtype)
            self._params[name + ".w"] = ad.parameter(w)
            self._params[name + ".b"] = ad.parameter(rng.uniform(-bound, bound, cout).astype(dtype))

        def conv(name, cout, cin, k):
            add(name, (cout, cin, k, k), cout)

        def convt(name, cin, cout, k):
            add(name, (cin, cout, k, k), cout)

        s = spec
        conv("stem", s.channels(0), 1, 3)
        for k in range(1, s.down_blocks + 1):
            conv(f"down{k}.conv", s.channels(k), s.channels(k - 1), 3)
            conv(f"down{k}.short", s.channels(k), s.channels(k - 1), 1)
        skips = dict((dec, enc) for enc, dec in s.skip_pairs)
        for j in range(s.up_blocks):
            cin, cout = s.channels(s.down_blocks - j), s.channels(s.down_blocks - j - 1)
            convt(f"up{j}.conv", cin, cout, 4)
            convt(f"up{j}.short", cin, cout, 2)
            if j in skips:
                conv(f"up{j}.proj", cout, cout + s.channels(skips[j]), 1)
        c_tail = s.channels(s.down_blocks - s.up_blocks)
        for t in range(s.tail_blocks):
            conv(f"tail{t}.conv", c_tail, c_tail, 3)
        factor = 2 ** (s.down_blocks - s.up_blocks)
        if factor == 1:
            conv("head", 1, c_tail, 1)
        else:
            convt("head", c_tail, 1, factor)

    # -- parameters ---------------------------------------------------------

    def named_parameters(self):
        return list(self._params.items())

    def parameters(self):
        return list(self._params.values())

    def n_parameters(self) -> int:
        return int(sum(p.size for p in self._params.values()))

    def zero_grad(self):
        for p in self._params.values():
            p.zero_grad()

    def digest(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for name, p in self._params.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    # -- forward ------------------------------------------------------------

    def forward(self, x, activations: list | None = None) -> Tensor:
        """Phase estimate for a ``(n, 1, size, size)`` batch.

        If ``activations`` is a list, each block output (stem, down blocks,
        up blocks, tail blocks) is appended to it in that order.
        """
        s, P = self.spec, self._params
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.ndim != 4 or x.shape[1] != 1 or x.shape[2:] != (s.input_size, s.input_size):
            raise ValueError(f"expected input (n, 1, {s.input_size}, {s.input_size}), got {x.shape}")
        record = activations.append if activations is not None else (lambda t: None)

        h = ad.relu(ad.conv2d(x, P["stem.w"], P["stem.b"], padding=1))
        record(h)
        stages = [h]
        for k in range(1, s.down_blocks + 1):
            d = s.dilations[k - 1]
            main = ad.relu(ad.conv2d(h, P[f"down{k}.conv.w"], P[f"down{k}.conv.b"], stride=2, dilation=d, padding=d))
            short = ad.conv2d(h, P[f"down{k}.short.w"], P[f"down{k}.short.b"], stride=2)
            h = ad.residual_add(main, short)
            record(h)
            stages.append(h)
        skips = dict((dec, enc) for enc, dec in s.skip_pairs)
        for j in range(s.up_blocks):
            main = ad.relu(ad.conv2d_transpose(h, P[f"up{j}.conv.w"], P[f"up{j}.conv.b"], stride=2, padding=1))
            short = ad.conv2d_transpose(h, P[f"up{j}.short.w"], P[f"up{j}.short.b"], stride=2)
            h = ad.residual_add(main, short)
            if j in skips:
                h = ad.conv2d(ad.concat([h, stages[skips[j]]]), P[f"up{j}.proj.w"], P[f"up{j}.proj.b"])
            record(h)
        for t in range(s.tail_blocks):
            d = s.dilations[s.down_blocks + s.up_blocks + t]
            h = ad.residual_add(h, ad.relu(ad.conv2d(h, P[f"tail{t}.conv.w"], P[f"tail{t}.conv.b"], dilation=d, padding=d)))
            record(h)
        factor = 2 ** (s.down_blocks - s.up_blocks)
        if factor == 1:
            out = ad.conv2d(h, P["head.w"], P["head.b"])
        else:
            out = ad.conv2d_transpose(h, P["head.w"], P["head.b"], stride=factor)
        if s.head == "logistic":
            out = ad.scale(ad.sigmoid(out), -np.pi)
        return out

    __call__ = forward

    def block_names(self):
        s = self.spec
        return (
            ["stem"]
            + [f"down{k}" for k in range(1, s.down_blocks + 1)]
            + [f"up{j}" for j in range(s.up_blocks)]
            + [f"tail{t}" for t in range(s.tail_blocks)]
        )

    def predict(self, X, batch_size: int = 32) -> np.ndarray:
        """Forward pass over a numpy batch without keeping gradients."""
        X = np.asarray(X)
        out = []
        for i in range(0, len(X), batch_size):
            out.append(self.forward(Tensor(X[i : i + batch_size])).data)
        return np.concatenate(out)


def build(spec: NetworkSpec, seed: int = 0) -> PhaseNet:
    return PhaseNet(spec, seed=seed)


# -- checkpoints ---------------------------------------------------------------


def save_checkpoint(model: PhaseNet, path, metadata: dict | None = None) -> None:
    """Write magic, version, a text block (spec + metadata) and the tensors."""
    meta = {"epoch": 0, "seed": model.seed, "optics_digest": ""}
    meta.update(metadata or {})
    params = model.named_parameters()
    text = model.spec.to_text()
    text += "".join(f"meta.{k} = {v}\n" for k, v in meta.items())
    text += f"tensors = {len(params)}\n"
    blob = text.encode("utf-8")

    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<H", CHECKPOINT_VERSION))
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    for _, p in params:
        arr = np.ascontiguousarray(p.data, dtype="<f4")
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def _read(fh, n, what):
    data = fh.read(n)
    if len(data) != n:
        raise TruncatedCheckpointError(f"checkpoint truncated while reading {what}")
    return data


def load_checkpoint(path, expect: NetworkSpec | None = None) -> tuple[PhaseNet, dict]:
    """Rebuild a model from disk.  Returns ``(model, metadata)``.

    With ``expect`` set, the stored tensors must have the shapes that spec
    produces; the first mismatching tensor is named in the error.
    """
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise BadMagicError(f"{path}: not a checkpoint (magic {magic!r})")
        (version,) = struct.unpack("<H", _read(fh, 2, "version"))
        if version != CHECKPOINT_VERSION:
            raise VersionMismatchError(f"{path}: format version {version}, expected {CHECKPOINT_VERSION}")
        (n,) = struct.unpack("<I", _read(fh, 4, "header length"))
        values = parse_key_values(_read(fh, n, "header").decode("utf-8"))
        meta = {k[5:]: v for k, v in values.items() if k.startswith("meta.")}
        count = int(values.pop("tensors"))
        spec = NetworkSpec.from_mapping({k: v for k, v in values.items() if not k.startswith("meta.")})
        tensors = []
        for i in range(count):
            (rank,) = struct.unpack("<B", _read(fh, 1, f"tensor {i} rank"))
            shape = struct.unpack(f"<{rank}I", _read(fh, 4 * rank, f"tensor {i} shape"))
            size = int(np.prod(shape)) if rank else 1
            tensors.append(np.frombuffer(_read(fh, 4 * size, f"tensor {i} values"), dtype="<f4").reshape(shape))
        if fh.read(1):
            raise CheckpointError(f"{path}: trailing bytes after {count} tensors")

    target = expect or spec
    model = PhaseNet(target, seed=int(meta.get("seed", 0)), dtype=np.float32)
    named = model.named_parameters()
    if len(named) != len(tensors):
        raise ShapeMismatchError(f"{path}: holds {len(tensors)} tensors, spec builds {len(named)}")
    for (name, p), arr in zip(named, tensors):
        if p.shape != arr.shape:
            raise ShapeMismatchError(f"{path}: tensor {name!r} has shape {arr.shape}, spec expects {p.shape}")
        p.data = arr.astype(ad.default_dtype())
    return model, meta

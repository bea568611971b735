"""U-Net-lite with one shared encoder and two task decoders (MoS and SCS).

Parameters live in a flat ``name -> ndarray`` mapping.  Names are prefixed
``enc.``, ``mos.`` or ``scs.``; ``mos.*``/``scs.*`` together with ``enc.*``
form the two task networks.  The SCS decoder is optional so the same code
serves as the single-decoder Phase-I backbone.
"""

from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import gradcore as gc
from .gradcore import ShapeError

HEADS = ("mos", "scs")


@dataclass(frozen=True)
class ArchSpec:
    mos_classes: int
    scs_classes: int | None = None
    levels: int = 3
    base_channels: int = 16
    input_channels: int = 1

    def __post_init__(self):
        if self.levels < 2:
            raise ValueError("levels must be >= 2")
        if self.mos_classes < 2:
            raise ValueError("mos_classes must be >= 2")
        if self.scs_classes is not None and self.scs_classes < self.mos_classes:
            raise ValueError("scs_classes must be >= mos_classes")

    def channels(self, level: int) -> int:
        return self.base_channels * 2 ** level

    @property
    def divisor(self) -> int:
        return 2 ** (self.levels - 1)

    def shapes(self) -> dict[str, tuple[int, ...]]:
        """Parameter name -> shape, in a fixed order."""
        out: dict[str, tuple[int, ...]] = {}
        c_prev = self.input_channels
        for lv in range(self.levels):
            c = self.channels(lv)
            out[f"enc.{lv}.conv1.w"] = (c, c_prev, 3, 3)
            out[f"enc.{lv}.conv1.b"] = (c,)
            out[f"enc.{lv}.conv2.w"] = (c, c, 3, 3)
            out[f"enc.{lv}.conv2.b"] = (c,)
            c_prev = c
        heads = [("mos", self.mos_classes)]
        if self.scs_classes is not None:
            heads.append(("scs", self.scs_classes))
        for head, n_out in heads:
            for lv in range(self.levels - 2, -1, -1):
                c = self.channels(lv)
                out[f"{head}.{lv}.reduce.w"] = (c, self.channels(lv + 1), 1, 1)
                out[f"{head}.{lv}.reduce.b"] = (c,)
                out[f"{head}.{lv}.conv1.w"] = (c, 2 * c, 3, 3)
                out[f"{head}.{lv}.conv1.b"] = (c,)
                out[f"{head}.{lv}.conv2.w"] = (c, c, 3, 3)
                out[f"{head}.{lv}.conv2.b"] = (c,)
            out[f"{head}.out.w"] = (n_out, self.base_channels, 1, 1)
            out[f"{head}.out.b"] = (n_out,)
        return out

    @classmethod
    def from_shapes(cls, shapes: dict[str, tuple[int, ...]]) -> "ArchSpec":
        levels = len({k.split(".")[1] for k in shapes if k.startswith("enc.")})
        base, c_in = shapes["enc.0.conv1.w"][:2]
        scs = shapes["scs.out.w"][0] if "scs.out.w" in shapes else None
        return cls(mos_classes=shapes["mos.out.w"][0], scs_classes=scs, levels=levels,
                   base_channels=base, input_channels=c_in)


@dataclass
class ModelParams:
    spec: ArchSpec
    arrays: dict[str, np.ndarray]

    def _part(self, prefix: str) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.arrays.items() if k.startswith(prefix + ".")}

    @property
    def encoder(self):
        return self._part("enc")

    @property
    def decoder_mos(self):
        return self._part("mos")

    @property
    def decoder_scs(self):
        return self._part("scs")

    @property
    def has_scs(self) -> bool:
        return self.spec.scs_classes is not None

    def copy(self) -> "ModelParams":
        return ModelParams(self.spec, {k: v.copy() for k, v in self.arrays.items()})

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.arrays.items()}


def _param_rng(seed: int, name: str) -> np.random.Generator:
    # per-name streams: adding or removing a head never shifts the others
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


def init_params(spec: ArchSpec, seed: int) -> ModelParams:
    """He-normal weights (variance 2/fan_in), zero biases."""
    arrays = {}
    for name, shape in spec.shapes().items():
        if name.endswith(".b"):
            arrays[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            arrays[name] = _param_rng(seed, name).standard_normal(shape) * np.sqrt(2.0 / fan_in)
    return ModelParams(spec, arrays)


def extend_with_scs(backbone: ModelParams, scs_classes: int, seed: int) -> ModelParams:
    """Warm start: copy encoder + MoS decoder, freshly initialise an SCS decoder."""
    spec = ArchSpec(backbone.spec.mos_classes, scs_classes, backbone.spec.levels,
                    backbone.spec.base_channels, backbone.spec.input_channels)
    fresh = init_params(spec, seed)
    for k, v in backbone.arrays.items():
        if not k.startswith("scs."):
            fresh.arrays[k] = v.copy()
    return fresh


@dataclass
class Perturbation:
    """Additive clipped Gaussian input noise."""

    noise_sigma: float = 0.1
    noise_clip: float = 0.2
    seed: int = 0

    def sample(self, shape) -> np.ndarray:
        z = np.random.default_rng(self.seed).standard_normal(shape)
        return np.clip(self.noise_sigma * z, -self.noise_clip, self.noise_clip)


@dataclass
class PredictionMaps:
    mos: np.ndarray | None = None
    scs: np.ndarray | None = None


@dataclass
class TeacherState:
    params: ModelParams
    decay: float = 0.99
    # never written by the optimiser; exists so the stop-gradient contract is checkable
    grads: dict[str, np.ndarray] = field(default=None)

    def __post_init__(self):
        if self.grads is None:
            self.grads = self.params.zeros_like()


def make_teacher(student: ModelParams, decay: float = 0.99) -> TeacherState:
    return TeacherState(student.copy(), decay)


# ---------------------------------------------------------------------------
# forward / backward


def _conv_relu(a, x, name):
    y, c_cache = gc.conv2d_forward(x, a[name + ".w"], a[name + ".b"])
    y, r_cache = gc.relu_forward(y)
    return y, (c_cache, r_cache)


def _conv_relu_back(dy, cache, need_dx=True):
    c_cache, r_cache = cache
    dy = gc.relu_backward(dy, r_cache)
    return gc.conv2d_backward(dy, c_cache, need_input_grad=need_dx)


def _encode(a, spec: ArchSpec, x):
    caches, skips = [], []
    h = x
    for lv in range(spec.levels):
        pool_cache = None
        if lv > 0:
            h, pool_cache = gc.maxpool2_forward(h)
        h, c1 = _conv_relu(a, h, f"enc.{lv}.conv1")
        h, c2 = _conv_relu(a, h, f"enc.{lv}.conv2")
        caches.append((pool_cache, c1, c2))
        skips.append(h)
    return skips, caches


def _encode_back(a, spec, caches, dskips, grads):
    dh = dskips[-1]
    for lv in range(spec.levels - 1, -1, -1):
        if lv < spec.levels - 1:
            dh = dh + dskips[lv]
        pool_cache, c1, c2 = caches[lv]
        dh, grads[f"enc.{lv}.conv2.w"], grads[f"enc.{lv}.conv2.b"] = _conv_relu_back(dh, c2)
        # the input image needs no gradient
        dh, grads[f"enc.{lv}.conv1.w"], grads[f"enc.{lv}.conv1.b"] = _conv_relu_back(dh, c1, need_dx=lv > 0)
        if lv > 0:
            dh = gc.maxpool2_backward(dh, pool_cache)


def _decode(a, spec, head, skips):
    caches = []
    h = skips[-1]
    for lv in range(spec.levels - 2, -1, -1):
        h, red = gc.conv2d_forward(h, a[f"{head}.{lv}.reduce.w"], a[f"{head}.{lv}.reduce.b"])
        h, up = gc.upsample2_forward(h)
        h, cat = gc.concat_channels_forward(h, skips[lv])
        h, c1 = _conv_relu(a, h, f"{head}.{lv}.conv1")
        h, c2 = _conv_relu(a, h, f"{head}.{lv}.conv2")
        caches.append((red, up, cat, c1, c2))
    features = h
    logits, out = gc.conv2d_forward(h, a[f"{head}.out.w"], a[f"{head}.out.b"])
    probs, sm = gc.softmax_c_forward(logits)
    return probs, features, (caches, out, sm)


def _decode_back(a, spec, head, cache, dprobs, dskips, grads):
    caches, out, sm = cache
    dlogits = gc.softmax_c_backward(dprobs, sm)
    dh, grads[f"{head}.out.w"], grads[f"{head}.out.b"] = gc.conv2d_backward(dlogits, out)
    for lv, (red, up, cat, c1, c2) in zip(range(spec.levels - 1), reversed(caches)):
        dh, grads[f"{head}.{lv}.conv2.w"], grads[f"{head}.{lv}.conv2.b"] = _conv_relu_back(dh, c2)
        dh, grads[f"{head}.{lv}.conv1.w"], grads[f"{head}.{lv}.conv1.b"] = _conv_relu_back(dh, c1)
        dh, dskip = gc.concat_channels_backward(dh, cat)
        dskips[lv] = dskips[lv] + dskip
        dh = gc.upsample2_backward(dh, up)
        dh, grads[f"{head}.{lv}.reduce.w"], grads[f"{head}.{lv}.reduce.b"] = gc.conv2d_backward(dh, red)
    dskips[-1] = dskips[-1] + dh


def _resolve_heads(params: ModelParams, heads) -> tuple[str, ...]:
    if heads == "both":
        heads = HEADS
    elif isinstance(heads, str):
        heads = (heads,)
    for h in heads:
        if h not in HEADS:
            raise ValueError(f"unknown head {h!r}")
        if h == "scs" and not params.has_scs:
            raise ValueError("model has no SCS decoder")
    return tuple(heads)


def _prepare_input(params: ModelParams, image, noise):
    """Return ``(batched, internal)``: internal layout is ``1 x N x H x W``."""
    x = np.asarray(image, dtype=gc.DTYPE)
    if x.ndim == 2:
        x = x[None]
    batched = x.ndim == 4
    if x.ndim not in (3, 4):
        raise ShapeError(f"expected 1 x H x W or N x 1 x H x W image, got {x.shape}")
    d = params.spec.divisor
    if x.shape[-1] % d or x.shape[-2] % d:
        raise ShapeError(f"spatial size {x.shape[-2:]} is not divisible by {d}")
    if noise is not None:
        x = x + np.reshape(noise, x.shape)
    xi = x.transpose(1, 0, 2, 3) if batched else x[:, None]
    return batched, xi


def _to_external(t: np.ndarray, batched: bool) -> np.ndarray:
    return np.ascontiguousarray(t.transpose(1, 0, 2, 3)) if batched else t[:, 0]


def _to_internal(t: np.ndarray, batched: bool) -> np.ndarray:
    return np.ascontiguousarray(t.transpose(1, 0, 2, 3)) if batched else t[:, None]


def forward_train(params: ModelParams, image, heads="both", noise=None):
    """Forward pass keeping caches; returns ``(PredictionMaps, cache)``.

    ``image`` may be ``1 x H x W`` or batched ``N x 1 x H x W``; outputs follow
    the same batching (``C x H x W`` or ``N x C x H x W``).  ``noise`` is added
    to the input verbatim.
    """
    heads = _resolve_heads(params, heads)
    batched, xi = _prepare_input(params, image, noise)
    a, spec = params.arrays, params.spec
    skips, enc_cache = _encode(a, spec, xi)
    preds = PredictionMaps()
    dec_caches = {}
    for h in heads:
        probs, _, dec_caches[h] = _decode(a, spec, h, skips)
        setattr(preds, h, _to_external(probs, batched))
    return preds, (enc_cache, [s.shape for s in skips], dec_caches, batched)


def backward(params: ModelParams, cache, dmos=None, dscs=None) -> dict[str, np.ndarray]:
    """Parameter gradients given loss gradients w.r.t. the output probabilities.

    Heads whose gradient is ``None`` contribute nothing; their parameters get
    zero gradients.
    """
    enc_cache, skip_shapes, dec_caches, batched = cache
    a, spec = params.arrays, params.spec
    grads = params.zeros_like()
    dskips = [np.zeros(s) for s in skip_shapes]
    any_head = False
    for h, d in (("mos", dmos), ("scs", dscs)):
        if d is None:
            continue
        if h not in dec_caches:
            raise ValueError(f"head {h!r} was not evaluated in the forward pass")
        _decode_back(a, spec, h, dec_caches[h], _to_internal(d, batched), dskips, grads)
        any_head = True
    if any_head:
        _encode_back(a, spec, enc_cache, dskips, grads)
    return grads


def forward(params: ModelParams, image, heads="both", perturb: Perturbation | None = None) -> PredictionMaps:
    """Per-pixel class probabilities for the requested head(s)."""
    noise = perturb.sample(np.shape(image)) if perturb is not None else None
    preds, _ = forward_train(params, image, heads, noise)
    return preds


def extract_features(params: ModelParams, image) -> np.ndarray:
    """Penultimate MoS-decoder activations as a ``(H*W) x base_channels`` matrix.

    A batched ``N x 1 x H x W`` input gives ``N x (H*W) x base_channels``.
    """
    batched, xi = _prepare_input(params, image, None)
    a, spec = params.arrays, params.spec
    skips, _ = _encode(a, spec, xi)
    _, feats, _ = _decode(a, spec, "mos", skips)
    c, n, h, w = feats.shape
    rows = feats.transpose(1, 2, 3, 0).reshape(n, h * w, c)
    return rows if batched else rows[0]


def ema_update(teacher: TeacherState, student: ModelParams) -> TeacherState:
    """``theta' <- decay * theta' + (1 - decay) * theta`` for every parameter, in place."""
    t = teacher.params.arrays
    s = student.arrays
    if t.keys() != s.keys():
        raise ShapeError("teacher and student parameter names differ")
    for k, v in t.items():
        if v.shape != s[k].shape:
            raise ShapeError(f"{k}: teacher shape {v.shape} != student shape {s[k].shape}")
    d = teacher.decay
    for k, v in t.items():
        v *= d
        v += (1.0 - d) * s[k]
    return teacher


# ---------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"BSRN"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    """Write named float64 arrays; atomic via temp file + rename."""
    path = Path(path)
    chunks = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION)]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes(order="C"))
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    os.replace(tmp, path)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    buf = path.read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes {buf[:4]!r}")
    if len(buf) < 8:
        raise CheckpointError(f"{path}: truncated header")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version} (expected {CKPT_VERSION})")
    pos, out = 8, {}

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"{path}: truncated at byte {pos}")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    while pos < len(buf):
        (nlen,) = struct.unpack("<I", take(4))
        try:
            name = take(nlen).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"{path}: corrupt parameter name") from exc
        (rank,) = struct.unpack("<I", take(4))
        if rank > 8:
            raise CheckpointError(f"{path}: implausible rank {rank} for {name!r}")
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        out[name] = np.frombuffer(take(8 * count), dtype="<f8").reshape(dims).astype(np.float64)
    return out


def pack_models(student: ModelParams, teacher: TeacherState | None = None) -> dict[str, np.ndarray]:
    named = {f"student.{k}": v for k, v in student.arrays.items()}
    if teacher is not None:
        named.update({f"teacher.{k}": v for k, v in teacher.params.arrays.items()})
    return named


def unpack_models(named: dict[str, np.ndarray]) -> tuple[ModelParams, ModelParams | None]:
    parts: dict[str, dict[str, np.ndarray]] = {"student": {}, "teacher": {}}
    for k, v in named.items():
        role, _, rest = k.partition(".")
        if role not in parts:
            raise CheckpointError(f"unexpected parameter prefix in {k!r}")
        parts[role][rest] = v
    if not parts["student"]:
        raise CheckpointError("checkpoint holds no student parameters")
    spec = ArchSpec.from_shapes({k: v.shape for k, v in parts["student"].items()})
    student = ModelParams(spec, parts["student"])
    teacher = ModelParams(spec, parts["teacher"]) if parts["teacher"] else None
    return student, teacher

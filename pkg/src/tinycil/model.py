"""Micro vision transformer with interchangeable stems and a cosine head.

The backbone is a standard pre-norm ViT; the input stem is either a patchify
projection or a stack of stride-2 conv/batch-norm/relu layers whose final
channel count equals the embedding width. Two specs that differ only in
stem_kind produce models whose parameter sets differ only in `stem.*` names
(token counts match when patch_size == 2**stem_depth), which is what makes
the stem comparison fair. The classifier stores one raw weight row per class
plus a learnable softmax temperature; rows and features are L2-normalized
inside the forward pass so the temperature stays identifiable.
"""

from __future__ import annotations

import hashlib
import math
import struct
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataFormatError, ShapeError
from .rng import SplitMix64
from .tensor import Tensor

LN_EPS = 1e-5
BN_MOMENTUM = 0.1
NORM_EPS = 1e-12
TEMPERATURE_FLOOR = 1e-3
INIT_STD = 0.02

CHECKPOINT_MAGIC = b"CILM"
CHECKPOINT_VERSION = 1
_KIND_BACKBONE, _KIND_CLASSIFIER, _KIND_BUFFER = 0, 1, 2


@dataclass(frozen=True)
class ModelSpec:
    """Architecture hyperparameters; `validate` enforces the token arithmetic."""

    image_size: int = 16
    in_channels: int = 3
    stem_kind: str = "patchify"          # "patchify" | "conv"
    patch_size: int = 4
    stem_depth: int = 2
    stem_channels: tuple[int, ...] = (16, 32)
    embed_dim: int = 32
    num_blocks: int = 2
    num_heads: int = 2
    mlp_ratio: float = 4.0
    num_classes: int = 10

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.stem_kind not in ("patchify", "conv"):
            raise ConfigError(f"unknown stem_kind {self.stem_kind!r}")
        if self.embed_dim % self.num_heads != 0:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        if self.stem_kind == "patchify":
            if self.image_size % self.patch_size != 0:
                raise ConfigError(
                    f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        else:
            if len(self.stem_channels) != self.stem_depth:
                raise ConfigError(
                    f"stem_channels {list(self.stem_channels)} must list {self.stem_depth} layers")
            if self.stem_channels[-1] != self.embed_dim:
                raise ConfigError(
                    f"last stem channel {self.stem_channels[-1]} must equal embed_dim {self.embed_dim}")
            if self.image_size % (2 ** self.stem_depth) != 0:
                raise ConfigError(
                    f"image_size {self.image_size} too small for {self.stem_depth} stride-2 layers")
            if self.image_size // (2 ** self.stem_depth) < 1:
                raise ConfigError("conv stem collapses the image to zero tokens")

    @property
    def grid_size(self) -> int:
        if self.stem_kind == "patchify":
            return self.image_size // self.patch_size
        return self.image_size // (2 ** self.stem_depth)

    @property
    def token_count(self) -> int:
        return self.grid_size ** 2


@dataclass
class ModelState:
    """All learnable parameters plus batch-norm running buffers."""

    spec: ModelSpec
    backbone: dict[str, Tensor]
    classifier: dict[str, Tensor]        # "weight" [C, d], "temperature" [1]
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def temperature(self) -> float:
        return self.classifier["temperature"].item()

    def named_parameters(self) -> dict[str, Tensor]:
        """Backbone and classifier parameters under disjoint name prefixes."""
        out = {f"backbone.{k}": v for k, v in self.backbone.items()}
        out.update({f"classifier.{k}": v for k, v in self.classifier.items()})
        return out


def init_model(spec: ModelSpec, stream: SplitMix64, eta_init: float = 10.0) -> ModelState:
    """Fresh model; all weights drawn from the given stream in a fixed order."""
    rng = stream.child("init")
    d = spec.embed_dim
    backbone: dict[str, Tensor] = {}
    buffers: dict[str, np.ndarray] = {}

    def param(name, shape, std=INIT_STD):
        backbone[name] = Tensor(rng.normals(shape, std=std), requires_grad=True)

    def const(name, value):
        backbone[name] = Tensor(value, requires_grad=True)

    if spec.stem_kind == "patchify":
        pdim = spec.in_channels * spec.patch_size ** 2
        param("stem.proj_weight", (pdim, d))
        const("stem.proj_bias", np.zeros(d))
    else:
        c_in = spec.in_channels
        for i, c_out in enumerate(spec.stem_channels):
            param(f"stem.conv{i}_kernel", (c_out, c_in, 3, 3))
            const(f"stem.conv{i}_gain", np.ones(c_out))
            const(f"stem.conv{i}_bias", np.zeros(c_out))
            buffers[f"stem.conv{i}_running_mean"] = np.zeros(c_out)
            buffers[f"stem.conv{i}_running_var"] = np.ones(c_out)
            c_in = c_out

    param("cls_token", (1, 1, d))
    param("pos_embed", (1, spec.token_count + 1, d))
    hidden = int(round(spec.mlp_ratio * d))
    for i in range(spec.num_blocks):
        const(f"block{i}.ln1_gain", np.ones(d))
        const(f"block{i}.ln1_bias", np.zeros(d))
        param(f"block{i}.qkv_weight", (d, 3 * d))
        const(f"block{i}.qkv_bias", np.zeros(3 * d))
        param(f"block{i}.proj_weight", (d, d))
        const(f"block{i}.proj_bias", np.zeros(d))
        const(f"block{i}.ln2_gain", np.ones(d))
        const(f"block{i}.ln2_bias", np.zeros(d))
        param(f"block{i}.mlp1_weight", (d, hidden))
        const(f"block{i}.mlp1_bias", np.zeros(hidden))
        param(f"block{i}.mlp2_weight", (hidden, d))
        const(f"block{i}.mlp2_bias", np.zeros(d))
    const("final_norm_gain", np.ones(d))
    const("final_norm_bias", np.zeros(d))

    classifier = {
        "weight": Tensor(rng.normals((spec.num_classes, d), std=INIT_STD),
                         requires_grad=True),
        "temperature": Tensor(np.array([eta_init]), requires_grad=True),
    }
    return ModelState(spec=spec, backbone=backbone, classifier=classifier,
                      buffers=buffers)


# ---------------------------------------------------------------------------
# forward

def patchify_forward(state: ModelState, images: Tensor) -> Tensor:
    """Non-overlapping patches, row-major, each linearly projected."""
    spec = state.spec
    b, c, h, w = images.shape
    p = spec.patch_size
    g = h // p
    x = T.reshape(images, (b, c, g, p, g, p))
    x = T.transpose(x, (0, 2, 4, 1, 3, 5))            # [b, gh, gw, c, ph, pw]
    x = T.reshape(x, (b, g * g, c * p * p))
    return T.matmul(x, state.backbone["stem.proj_weight"]) + state.backbone["stem.proj_bias"]


def conv_stem_forward(state: ModelState, images: Tensor, training: bool) -> Tensor:
    """Stride-2 conv / batch-norm / relu stack, flattened to tokens."""
    spec = state.spec
    cur = images
    for i in range(spec.stem_depth):
        cur = T.conv2d(cur, state.backbone[f"stem.conv{i}_kernel"], stride=2, padding=1)
        cur = T.batch_norm(cur, state.backbone[f"stem.conv{i}_gain"],
                           state.backbone[f"stem.conv{i}_bias"],
                           state.buffers[f"stem.conv{i}_running_mean"],
                           state.buffers[f"stem.conv{i}_running_var"],
                           training=training, momentum=BN_MOMENTUM)
        cur = T.relu(cur)
    b, d, gh, gw = cur.shape
    cur = T.reshape(cur, (b, d, gh * gw))
    return T.transpose(cur, (0, 2, 1))                # [b, tokens, d]


def _attention(state: ModelState, block: int, x: Tensor) -> Tensor:
    spec = state.spec
    b, t, d = x.shape
    heads = spec.num_heads
    dh = d // heads
    qkv = T.matmul(x, state.backbone[f"block{block}.qkv_weight"]) \
        + state.backbone[f"block{block}.qkv_bias"]
    qkv = T.reshape(qkv, (b, t, 3, heads, dh))
    qkv = T.transpose(qkv, (2, 0, 3, 1, 4))           # [3, b, heads, t, dh]
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
    attn = T.softmax(scores, axis=-1)
    out = T.matmul(attn, v)                           # [b, heads, t, dh]
    out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (b, t, d))
    return T.matmul(out, state.backbone[f"block{block}.proj_weight"]) \
        + state.backbone[f"block{block}.proj_bias"]


def _mlp(state: ModelState, block: int, x: Tensor) -> Tensor:
    h = T.matmul(x, state.backbone[f"block{block}.mlp1_weight"]) \
        + state.backbone[f"block{block}.mlp1_bias"]
    h = T.gelu(h)
    return T.matmul(h, state.backbone[f"block{block}.mlp2_weight"]) \
        + state.backbone[f"block{block}.mlp2_bias"]


def forward_features(state: ModelState, images, mode: str = "eval") -> Tensor:
    """CLS-token feature after the final block and final norm.

    `mode` only switches batch-norm between batch and running statistics;
    recording onto a gradient tape is controlled by the caller's Tape context.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    spec = state.spec
    x = images if isinstance(images, Tensor) else Tensor(images)
    if x.data.ndim != 4 or x.shape[1:] != (spec.in_channels, spec.image_size, spec.image_size):
        raise ShapeError(
            f"expected images [b, {spec.in_channels}, {spec.image_size}, "
            f"{spec.image_size}], got {x.shape}")
    if spec.stem_kind == "conv":
        tokens = conv_stem_forward(state, x, training=(mode == "train"))
    else:
        tokens = patchify_forward(state, x)
    b = x.shape[0]
    cls = state.backbone["cls_token"] * Tensor(np.ones((b, 1, 1)))
    seq = T.concat([cls, tokens], axis=1) + state.backbone["pos_embed"]
    for i in range(spec.num_blocks):
        h = T.layer_norm(seq, state.backbone[f"block{i}.ln1_gain"],
                         state.backbone[f"block{i}.ln1_bias"], eps=LN_EPS)
        seq = seq + _attention(state, i, h)
        h = T.layer_norm(seq, state.backbone[f"block{i}.ln2_gain"],
                         state.backbone[f"block{i}.ln2_bias"], eps=LN_EPS)
        seq = seq + _mlp(state, i, h)
    seq = T.layer_norm(seq, state.backbone["final_norm_gain"],
                       state.backbone["final_norm_bias"], eps=LN_EPS)
    return seq[:, 0, :]


def cosine_scores(state: ModelState, features: Tensor) -> Tensor:
    """Cosine similarity of normalized features against normalized class rows."""
    fbar = T.l2_normalize(features, axis=-1, eps=NORM_EPS)
    wbar = T.l2_normalize(state.classifier["weight"], axis=-1, eps=NORM_EPS)
    return T.matmul(fbar, T.transpose(wbar, (1, 0)))


def cosine_logits(state: ModelState, features: Tensor) -> Tensor:
    """Class probabilities: softmax over temperature-scaled cosine scores."""
    fdata = features.data if isinstance(features, Tensor) else np.asarray(features)
    zero_rows = int((np.linalg.norm(fdata, axis=-1) < NORM_EPS).sum())
    if zero_rows:
        warnings.warn(f"cosine_logits: {zero_rows} zero-norm feature row(s), "
                      "eps-guarded", RuntimeWarning)
    features = features if isinstance(features, Tensor) else Tensor(features)
    scaled = cosine_scores(state, features) * state.classifier["temperature"]
    return T.softmax(scaled, axis=-1)


def expand_classifier(state: ModelState, new_class_count: int,
                      stream: SplitMix64) -> ModelState:
    """Append freshly initialized weight rows; old rows and η are bit-preserved."""
    if new_class_count <= 0:
        raise ConfigError("new_class_count must be positive")
    rng = stream.child("expand")
    d = state.spec.embed_dim
    new_rows = rng.normals((new_class_count, d), std=INIT_STD)
    weight = np.concatenate([state.classifier["weight"].data, new_rows], axis=0)
    classifier = {
        "weight": Tensor(weight, requires_grad=True),
        "temperature": state.classifier["temperature"],
    }
    spec = replace(state.spec,
                   num_classes=state.spec.num_classes + new_class_count)
    return ModelState(spec=spec, backbone=state.backbone,
                      classifier=classifier, buffers=state.buffers)


def clamp_temperature(state: ModelState, floor: float = TEMPERATURE_FLOOR) -> None:
    """Keep η positive after optimizer steps; no-op when already above floor."""
    eta = state.classifier["temperature"].data
    if eta[0] < floor:
        eta[0] = floor


def clone_state(state: ModelState, requires_grad: bool = True) -> ModelState:
    """Deep copy (used for the frozen old-model snapshot at each step)."""
    backbone = {k: Tensor(v.data.copy(), requires_grad=requires_grad)
                for k, v in state.backbone.items()}
    classifier = {k: Tensor(v.data.copy(), requires_grad=requires_grad)
                  for k, v in state.classifier.items()}
    buffers = {k: v.copy() for k, v in state.buffers.items()}
    return ModelState(spec=state.spec, backbone=backbone,
                      classifier=classifier, buffers=buffers)


def state_hash(state: ModelState, include_classifier: bool = True,
               include_buffers: bool = True) -> str:
    """SHA-256 over parameter names and exact bytes; order-independent."""
    h = hashlib.sha256()
    entries = [("backbone." + k, v.data) for k, v in state.backbone.items()]
    if include_classifier:
        entries += [("classifier." + k, v.data) for k, v in state.classifier.items()]
    if include_buffers:
        entries += [("buffer." + k, v) for k, v in state.buffers.items()]
    for name, arr in sorted(entries):
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def parameter_count(state: ModelState) -> dict[str, int]:
    return {name: t.size for name, t in state.named_parameters().items()}


# ---------------------------------------------------------------------------
# checkpoint format: magic "CILM", spec fields, then named parameter blobs

def save_checkpoint(state: ModelState, path) -> None:
    spec = state.spec
    chunks = [CHECKPOINT_MAGIC, struct.pack("<H", CHECKPOINT_VERSION)]
    chunks.append(struct.pack("<IIB", spec.image_size, spec.in_channels,
                              0 if spec.stem_kind == "patchify" else 1))
    chunks.append(struct.pack("<II", spec.patch_size, spec.stem_depth))
    chunks.append(struct.pack("<I", len(spec.stem_channels)))
    for c in spec.stem_channels:
        chunks.append(struct.pack("<I", c))
    chunks.append(struct.pack("<IIIdI", spec.embed_dim, spec.num_blocks,
                              spec.num_heads, spec.mlp_ratio, spec.num_classes))

    entries = [(_KIND_BACKBONE, k, v.data) for k, v in state.backbone.items()]
    entries += [(_KIND_CLASSIFIER, k, v.data) for k, v in state.classifier.items()]
    entries += [(_KIND_BUFFER, k, v) for k, v in state.buffers.items()]
    chunks.append(struct.pack("<I", len(entries)))
    for kind, name, arr in entries:
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<BH", kind, len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<B", arr.ndim))
        for dim in arr.shape:
            chunks.append(struct.pack("<I", dim))
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(chunks))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.off = 0

    def read(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.off + size > len(self.blob):
            raise DataFormatError(
                f"checkpoint truncated at byte {self.off} (needed {size} more)")
        vals = struct.unpack_from(fmt, self.blob, self.off)
        self.off += size
        return vals

    def read_bytes(self, n: int) -> bytes:
        if self.off + n > len(self.blob):
            raise DataFormatError(
                f"checkpoint truncated at byte {self.off} (needed {n} more)")
        out = self.blob[self.off:self.off + n]
        self.off += n
        return out


def load_checkpoint(path) -> ModelState:
    with open(path, "rb") as f:
        blob = f.read()
    r = _Reader(blob)
    if r.read_bytes(4) != CHECKPOINT_MAGIC:
        raise DataFormatError(f"bad magic in {path}: not a model checkpoint")
    (version,) = r.read("<H")
    if version != CHECKPOINT_VERSION:
        raise DataFormatError(f"unsupported checkpoint version {version}")
    image_size, in_channels, stem_code = r.read("<IIB")
    patch_size, stem_depth = r.read("<II")
    (n_ch,) = r.read("<I")
    stem_channels = tuple(r.read("<I")[0] for _ in range(n_ch))
    embed_dim, num_blocks, num_heads, mlp_ratio, num_classes = r.read("<IIIdI")
    spec = ModelSpec(image_size=image_size, in_channels=in_channels,
                     stem_kind="patchify" if stem_code == 0 else "conv",
                     patch_size=patch_size, stem_depth=stem_depth,
                     stem_channels=stem_channels, embed_dim=embed_dim,
                     num_blocks=num_blocks, num_heads=num_heads,
                     mlp_ratio=mlp_ratio, num_classes=num_classes)
    (n_entries,) = r.read("<I")
    backbone: dict[str, Tensor] = {}
    classifier: dict[str, Tensor] = {}
    buffers: dict[str, np.ndarray] = {}
    for _ in range(n_entries):
        kind, name_len = r.read("<BH")
        name = r.read_bytes(name_len).decode("utf-8")
        (ndim,) = r.read("<B")
        shape = tuple(r.read("<I")[0] for _ in range(ndim))
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(r.read_bytes(count * 8), dtype="<f8").reshape(shape).copy()
        if kind == _KIND_BACKBONE:
            backbone[name] = Tensor(arr, requires_grad=True)
        elif kind == _KIND_CLASSIFIER:
            classifier[name] = Tensor(arr, requires_grad=True)
        elif kind == _KIND_BUFFER:
            buffers[name] = arr
        else:
            raise DataFormatError(f"unknown entry kind {kind} at byte {r.off}")
    return ModelState(spec=spec, backbone=backbone, classifier=classifier,
                      buffers=buffers)

"""Small residual convolutional encoder with intermediate-layer taps.

Architecture: a 3x3 stem convolution, then a stack of residual blocks (each
block is n 3x3 convolutions with an additive shortcut, optionally
downsampling by 2 via its first convolution and a 1x1 projection), then
global average pooling and a dense embedding layer. The pre-ReLU output of
every block is exposed as a tap named ``block{i}``; intermediate taps are
spatially average-pooled and left unnormalised, while the ``final`` tap is
the embedding, L2-normalised when the config says so.

Checkpoints are a binary format: magic ``TRLM``, a version byte, a u32
header length, an LF-separated key=value header describing the architecture
and the tensor list, then the named tensors as little-endian float32 in
header order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .autodiff import Tape
from .errors import (
    CheckpointCorruptError,
    CheckpointFormatError,
    ValidationError,
    WriteError,
)

CHECKPOINT_MAGIC = b"TRLM"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class BlockSpec:
    channels: int
    n_layers: int = 2
    downsample: bool = True


DEFAULT_BLOCKS = (BlockSpec(8, 2, True), BlockSpec(16, 2, True), BlockSpec(32, 2, True))


@dataclass(frozen=True)
class EncoderConfig:
    blocks: tuple[BlockSpec, ...] = DEFAULT_BLOCKS
    embedding_dim: int = 64
    l2_normalize_output: bool = True
    seed: int = 0
    # Trailing dense layer appended by distillation when the student must
    # match a wider teacher tap; None means no adapter.
    adapter_dim: int | None = None

    def validate(self) -> None:
        if not self.blocks:
            raise ValidationError("encoder needs at least one block")
        for i, b in enumerate(self.blocks, start=1):
            if b.channels < 1 or b.n_layers < 1:
                raise ValidationError(f"block {i}: channels and n_layers must be >= 1")
        if self.embedding_dim < 1:
            raise ValidationError(f"embedding_dim must be >= 1, got {self.embedding_dim}")
        if self.adapter_dim is not None and self.adapter_dim < 1:
            raise ValidationError(f"adapter_dim must be >= 1, got {self.adapter_dim}")

    def tap_names(self) -> list[str]:
        return [f"block{i}" for i in range(1, len(self.blocks) + 1)] + ["final"]


def tap_width(config: EncoderConfig, tap: str) -> int:
    """Embedding width produced by ``embed`` for a tap (pooled channels for
    intermediate taps, dense output width for 'final')."""
    if tap == "final":
        return config.adapter_dim if config.adapter_dim is not None else config.embedding_dim
    for i, b in enumerate(config.blocks, start=1):
        if tap == f"block{i}":
            return b.channels
    raise ValidationError(f"unknown tap '{tap}'; expected one of {config.tap_names()}")


def _parameter_shapes(config: EncoderConfig) -> dict[str, tuple[int, ...]]:
    """Canonical parameter order and shapes; checkpoints follow this order."""
    shapes: dict[str, tuple[int, ...]] = {}
    c0 = config.blocks[0].channels
    shapes["stem.w"] = (c0, 1, 3, 3)
    shapes["stem.b"] = (c0,)
    in_ch = c0
    for i, b in enumerate(config.blocks, start=1):
        for j in range(1, b.n_layers + 1):
            cin = in_ch if j == 1 else b.channels
            shapes[f"block{i}.conv{j}.w"] = (b.channels, cin, 3, 3)
            shapes[f"block{i}.conv{j}.b"] = (b.channels,)
        if b.downsample or in_ch != b.channels:
            shapes[f"block{i}.proj.w"] = (b.channels, in_ch, 1, 1)
            shapes[f"block{i}.proj.b"] = (b.channels,)
        in_ch = b.channels
    shapes["embed.w"] = (in_ch, config.embedding_dim)
    shapes["embed.b"] = (config.embedding_dim,)
    if config.adapter_dim is not None:
        shapes["adapter.w"] = (config.embedding_dim, config.adapter_dim)
        shapes["adapter.b"] = (config.adapter_dim,)
    return shapes


@dataclass
class EncoderModel:
    config: EncoderConfig
    params: dict[str, np.ndarray] = field(default_factory=dict)

    def tap_names(self) -> list[str]:
        return self.config.tap_names()

    def n_parameters(self) -> int:
        return sum(int(p.size) for p in self.params.values())

    def copy(self) -> "EncoderModel":
        return EncoderModel(self.config, {k: v.copy() for k, v in self.params.items()})


def build_encoder(config: EncoderConfig | None = None) -> EncoderModel:
    """He-uniform initialisation drawn in canonical parameter order from the
    config seed; biases start at zero. Same config, same model."""
    if config is None:
        config = EncoderConfig()
    config.validate()
    rng = np.random.default_rng(config.seed)
    params: dict[str, np.ndarray] = {}
    for name, shape in _parameter_shapes(config).items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            bound = np.sqrt(6.0 / fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape)
    return EncoderModel(config=config, params=params)


def forward_graph(tape: Tape, config: EncoderConfig, params: dict[str, int],
                  x: int) -> dict[str, int]:
    """Build the encoder forward pass on a tape.

    ``params`` maps parameter names to tape node ids (leaves or parameters).
    Returns tap name -> node id, where block taps are the pre-ReLU 4-D
    activations and 'final' is the embedding.
    """
    taps: dict[str, int] = {}
    h = tape.relu(tape.conv2d(x, params["stem.w"], params["stem.b"], stride=1))
    for i, b in enumerate(config.blocks, start=1):
        stride = 2 if b.downsample else 1
        shortcut_in = h
        for j in range(1, b.n_layers + 1):
            h = tape.conv2d(h, params[f"block{i}.conv{j}.w"], params[f"block{i}.conv{j}.b"],
                            stride=stride if j == 1 else 1)
            if j < b.n_layers:
                h = tape.relu(h)
        if f"block{i}.proj.w" in params:
            shortcut = tape.conv2d(shortcut_in, params[f"block{i}.proj.w"],
                                   params[f"block{i}.proj.b"], stride=stride)
        else:
            shortcut = shortcut_in
        pre = tape.add(h, shortcut)
        taps[f"block{i}"] = pre
        h = tape.relu(pre)
    pooled = tape.global_avg_pool2d(h)
    emb = tape.dense(pooled, params["embed.w"], params["embed.b"])
    if config.adapter_dim is not None:
        emb = tape.dense(emb, params["adapter.w"], params["adapter.b"])
    if config.l2_normalize_output:
        emb = tape.l2_normalize(emb)
    taps["final"] = emb
    return taps


@dataclass
class EmbeddingSet:
    tap: str
    rows: np.ndarray  # (n_windows, width)
    clip_ids: list[str]
    speaker_ids: list[str]
    labels: list[str]

    @property
    def dim(self) -> int:
        return self.rows.shape[1]


def embed(model: EncoderModel, windows, tap: str = "final", chunk_size: int = 256,
          provenance: dict[str, tuple[str, str]] | None = None) -> EmbeddingSet:
    """Embed context windows at a tap; one row per window, input order kept.

    Intermediate taps are global-average-pooled and never normalised. Rows
    are independent of batch composition, so chunking cannot change values.
    ``provenance`` optionally maps clip_id -> (speaker_id, label).
    """
    width = tap_width(model.config, tap)  # validates the tap name
    rows = np.zeros((len(windows), width))
    for lo in range(0, len(windows), chunk_size):
        chunk = windows[lo : lo + chunk_size]
        tape = Tape()
        param_ids = {name: tape.leaf(value) for name, value in model.params.items()}
        x = tape.leaf(np.stack([w.values for w in chunk])[:, None, :, :])
        taps = forward_graph(tape, model.config, param_ids, x)
        node = taps[tap]
        if tap != "final":
            node = tape.global_avg_pool2d(node)
        rows[lo : lo + len(chunk)] = tape.value(node)
    clip_ids = [w.clip_id for w in windows]
    speaker_ids, labels = [], []
    for cid in clip_ids:
        spk, lab = (provenance or {}).get(cid, ("", ""))
        speaker_ids.append(spk)
        labels.append(lab)
    return EmbeddingSet(tap=tap, rows=rows, clip_ids=clip_ids,
                        speaker_ids=speaker_ids, labels=labels)


# ---------------------------------------------------------------------------
# checkpoints


def _header_text(config: EncoderConfig) -> str:
    blocks = ";".join(f"{b.channels},{b.n_layers},{int(b.downsample)}" for b in config.blocks)
    shapes = _parameter_shapes(config)
    tensors = ";".join(f"{name}:{','.join(str(d) for d in shape)}"
                       for name, shape in shapes.items())
    lines = [
        f"blocks={blocks}",
        f"embedding_dim={config.embedding_dim}",
        f"l2_normalize_output={int(config.l2_normalize_output)}",
        f"adapter_dim={'none' if config.adapter_dim is None else config.adapter_dim}",
        f"seed={config.seed}",
        f"tensors={tensors}",
    ]
    return "\n".join(lines) + "\n"


def save_checkpoint(model: EncoderModel, path) -> None:
    header = _header_text(model.config).encode("utf-8")
    blob = [CHECKPOINT_MAGIC, struct.pack("<BI", CHECKPOINT_VERSION, len(header)), header]
    for name, shape in _parameter_shapes(model.config).items():
        tensor = model.params[name]
        if tensor.shape != shape:
            raise CheckpointFormatError(
                f"tensor '{name}' has shape {tensor.shape}, config expects {shape}")
        blob.append(np.ascontiguousarray(tensor, dtype="<f4").tobytes())
    try:
        Path(path).write_bytes(b"".join(blob))
    except OSError as exc:
        raise WriteError(f"cannot write checkpoint to {path}: {exc}") from exc


def _parse_header(path, text: str) -> EncoderConfig:
    fields: dict[str, str] = {}
    for line in text.splitlines():
        if not line:
            continue
        if "=" not in line:
            raise CheckpointFormatError(f"{path}: malformed header line '{line}'")
        key, value = line.split("=", 1)
        fields[key] = value
    for key in ("blocks", "embedding_dim", "l2_normalize_output", "adapter_dim", "seed", "tensors"):
        if key not in fields:
            raise CheckpointFormatError(f"{path}: header missing '{key}'")
    blocks = []
    for part in fields["blocks"].split(";"):
        ch, nl, ds = part.split(",")
        blocks.append(BlockSpec(int(ch), int(nl), bool(int(ds))))
    adapter = fields["adapter_dim"]
    return EncoderConfig(
        blocks=tuple(blocks),
        embedding_dim=int(fields["embedding_dim"]),
        l2_normalize_output=bool(int(fields["l2_normalize_output"])),
        seed=int(fields["seed"]),
        adapter_dim=None if adapter == "none" else int(adapter),
    )


def load_checkpoint(path) -> EncoderModel:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"checkpoint not found: {path}")
    blob = path.read_bytes()
    fixed = len(CHECKPOINT_MAGIC) + struct.calcsize("<BI")
    if len(blob) < fixed:
        raise CheckpointCorruptError(f"{path}: file shorter than fixed header", offset=len(blob))
    if blob[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path}: bad checkpoint magic")
    version, header_len = struct.unpack("<BI", blob[len(CHECKPOINT_MAGIC) : fixed])
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported checkpoint version {version}")
    if len(blob) < fixed + header_len:
        raise CheckpointCorruptError(f"{path}: truncated header", offset=len(blob))
    config = _parse_header(path, blob[fixed : fixed + header_len].decode("utf-8"))
    config.validate()

    shapes = _parameter_shapes(config)
    declared = _header_text(config)
    if blob[fixed : fixed + header_len].decode("utf-8") != declared:
        raise CheckpointFormatError(
            f"{path}: header tensor list does not match the declared architecture")

    params: dict[str, np.ndarray] = {}
    offset = fixed + header_len
    for name, shape in shapes.items():
        nbytes = int(np.prod(shape)) * 4
        if len(blob) < offset + nbytes:
            raise CheckpointCorruptError(
                f"{path}: tensor '{name}' truncated at byte {len(blob)}", offset=offset)
        params[name] = (np.frombuffer(blob, dtype="<f4", count=int(np.prod(shape)),
                                      offset=offset).astype(np.float64).reshape(shape))
        offset += nbytes
    if offset != len(blob):
        raise CheckpointCorruptError(
            f"{path}: {len(blob) - offset} unexpected trailing bytes", offset=offset)
    return EncoderModel(config=config, params=params)


def half_width_config(config: EncoderConfig, embedding_dim: int | None = None,
                      seed: int | None = None) -> EncoderConfig:
    """A student config with every channel count halved (minimum 1)."""
    blocks = tuple(replace(b, channels=max(1, b.channels // 2)) for b in config.blocks)
    return replace(config, blocks=blocks,
                   embedding_dim=embedding_dim if embedding_dim is not None else config.embedding_dim,
                   seed=seed if seed is not None else config.seed,
                   adapter_dim=None)

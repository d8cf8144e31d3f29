"""Chunk embedding model: configuration, parameters, forward ops, weight files.

The network embeds one chunk of encoded characters into a unit-norm
vector (default 256 dims). A text longer than one chunk yields one
partial embedding per chunk plus a global embedding, the re-normalized
arithmetic mean of the partials, all computed from a single batched
forward pass. Partial embeddings serve chunk-level (partial duplicate)
matching; the global embedding serves whole-text matching.

Parameters are held as named float32 tensors; all arithmetic runs in
float64 (see :mod:`neardup._net`) and results are cast back at the API
boundary.
"""

import io
import json
import zlib
from dataclasses import dataclass, asdict, field

import numpy as np

from . import _net
from .codec import CharMatrix, CodecConfig, vectorize_text
from .errors import ConfigMismatchError, EmptyInputError, FormatError, IntegrityError, NumericError

WEIGHT_MAGIC = b"RSIMW1"
WEIGHT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters. The defaults are the shipped model."""

    num_blocks: int = 2
    hidden_dim: int = 256
    expansion_rate: float = 1.0
    attn_key_dim: int = 128
    activation: str = "swish"
    attn_activation: str = "relu_squared"
    abs_pos_encoding: str = "scaled_sin"
    rel_pos_encoding: str = "rope"
    norm: str = "scale_norm"
    pooling: str = "gem"
    gem_p: float = 3.0
    dropout: float = 0.0
    embedding_dim: int = 256
    chunk_len: int = 512
    bits_per_char: int = 24

    def __post_init__(self):
        for name in ("num_blocks", "hidden_dim", "attn_key_dim", "embedding_dim", "chunk_len", "bits_per_char"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.expansion_rate <= 0:
            raise ValueError("expansion_rate must be positive")
        if self.gem_p < 1:
            raise ValueError("gem_p must be >= 1")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")
        if self.activation != "swish":
            raise ValueError(f"unsupported activation: {self.activation}")
        if self.attn_activation != "relu_squared":
            raise ValueError(f"unsupported attention activation: {self.attn_activation}")
        if self.abs_pos_encoding not in ("scaled_sin", "none"):
            raise ValueError(f"unsupported absolute position encoding: {self.abs_pos_encoding}")
        if self.rel_pos_encoding not in ("rope", "none"):
            raise ValueError(f"unsupported relative position encoding: {self.rel_pos_encoding}")
        if self.rel_pos_encoding == "rope" and self.attn_key_dim % 2:
            raise ValueError("attn_key_dim must be even when using rotary positions")
        if self.norm != "scale_norm":
            raise ValueError(f"unsupported norm: {self.norm}")
        if self.pooling not in ("gem", "average", "max"):
            raise ValueError(f"unsupported pooling: {self.pooling}")

    @property
    def expanded_dim(self) -> int:
        return int(round(self.hidden_dim * self.expansion_rate))

    @property
    def codec(self) -> CodecConfig:
        return CodecConfig(chunk_len=self.chunk_len, bits_per_char=self.bits_per_char)


def tensor_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Expected name -> shape map, in canonical (serialization) order."""
    shapes: dict[str, tuple[int, ...]] = {
        "input/kernel": (cfg.bits_per_char, cfg.hidden_dim),
        "input/bias": (cfg.hidden_dim,),
    }
    if cfg.abs_pos_encoding == "scaled_sin":
        shapes["pos/scale"] = ()
    e, h, k = cfg.expanded_dim, cfg.hidden_dim, cfg.attn_key_dim
    for i in range(cfg.num_blocks):
        pre = f"block{i}/"
        shapes[pre + "norm_gain"] = ()
        shapes[pre + "w_u"] = (h, e)
        shapes[pre + "w_v"] = (h, e)
        shapes[pre + "w_z"] = (h, k)
        shapes[pre + "gamma_q"] = (k,)
        shapes[pre + "beta_q"] = (k,)
        shapes[pre + "gamma_k"] = (k,)
        shapes[pre + "beta_k"] = (k,)
        shapes[pre + "w_o"] = (e, h)
        shapes[pre + "b_o"] = (h,)
    shapes["output/kernel"] = (h, cfg.embedding_dim)
    shapes["output/bias"] = (cfg.embedding_dim,)
    return shapes


@dataclass
class ModelParams:
    """Named float32 tensor collection for one model configuration."""

    config: ModelConfig
    tensors: dict[str, np.ndarray] = field(repr=False)

    def __post_init__(self):
        expected = tensor_shapes(self.config)
        if set(self.tensors) != set(expected):
            missing = set(expected) - set(self.tensors)
            extra = set(self.tensors) - set(expected)
            raise ConfigMismatchError(f"tensor names do not match config (missing={missing}, extra={extra})")
        for name, shape in expected.items():
            if tuple(self.tensors[name].shape) != shape:
                raise ConfigMismatchError(
                    f"tensor {name} has shape {self.tensors[name].shape}, expected {shape}"
                )
            if not np.all(np.isfinite(self.tensors[name])):
                raise NumericError(f"tensor {name} contains non-finite values")

    def param_count(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))


@dataclass(frozen=True)
class TextEmbedding:
    """Per-chunk partial embeddings plus the averaged global embedding."""

    partials: np.ndarray  # (num_chunks, embedding_dim) float32, unit rows
    global_: np.ndarray  # (embedding_dim,) float32, unit norm


def init_params(cfg: ModelConfig, seed: int) -> ModelParams:
    """Fan-in-scaled random init; gains and the position scale start at 1."""
    rng = np.random.default_rng(seed)
    tensors: dict[str, np.ndarray] = {}
    for name, shape in tensor_shapes(cfg).items():
        base = name.rsplit("/", 1)[-1]
        if base in ("bias", "b_o", "beta_q", "beta_k"):
            arr = np.zeros(shape)
        elif base in ("norm_gain", "scale", "gamma_q", "gamma_k"):
            arr = np.ones(shape)
        else:
            fan_in = shape[0]
            arr = rng.normal(0.0, np.sqrt(1.0 / fan_in), size=shape)
        tensors[name] = np.array(arr, dtype=np.float32, order="C")
    return ModelParams(config=cfg, tensors=tensors)


def _check_matrix(cfg: ModelConfig, m: CharMatrix) -> None:
    if m.chunk_len != cfg.chunk_len or m.bits_per_char != cfg.bits_per_char:
        raise ConfigMismatchError(
            f"chunk matrix is ({m.chunk_len}, {m.bits_per_char}); "
            f"model expects ({cfg.chunk_len}, {cfg.bits_per_char})"
        )
    if not 1 <= m.valid_len <= m.chunk_len:
        raise ValueError(f"valid_len {m.valid_len} out of range")


def forward_batch(params: ModelParams, matrices: list[CharMatrix]) -> np.ndarray:
    """Embed a batch of chunks; returns (n, embedding_dim) float32 unit rows."""
    cfg = params.config
    for m in matrices:
        _check_matrix(cfg, m)
    bits = np.stack([m.data for m in matrices]).astype(np.float64)
    valid = np.array([m.valid_len for m in matrices], dtype=np.int64)
    try:
        emb, _ = _net.forward_batch(params.tensors, cfg, bits, valid)
    except FloatingPointError as exc:
        raise NumericError(str(exc)) from exc
    if not np.all(np.isfinite(emb)):
        raise NumericError("non-finite embedding values")
    return emb.astype(np.float32)


def forward_chunk(params: ModelParams, m: CharMatrix) -> np.ndarray:
    """Embed one chunk into a unit-norm float32 vector."""
    return forward_batch(params, [m])[0]


def gem_pool(x: np.ndarray, p: float, valid_len: int) -> np.ndarray:
    """Generalized-mean pooling over the first ``valid_len`` rows of ``x``.

    out_j = (mean over valid rows of clamp(x_ij, 1e-6)**p) ** (1/p);
    p=1 reduces to average pooling of the clamped values, large p
    approaches max pooling.
    """
    if p < 1:
        raise ValueError("p must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    if not 1 <= valid_len <= x.shape[0]:
        raise ValueError(f"valid_len must be in [1, {x.shape[0]}], got {valid_len}")
    c = np.clip(x[:valid_len], _net.GEM_CLAMP, None)
    return ((c**p).mean(axis=0)) ** (1.0 / p)


def _renorm_mean(partials: np.ndarray) -> np.ndarray:
    mean = partials.astype(np.float64).mean(axis=0)
    norm = np.linalg.norm(mean)
    if norm < 1e-12:
        raise NumericError("mean of partial embeddings has zero norm")
    return (mean / norm).astype(np.float32)


def embed_text(params: ModelParams, text: str) -> TextEmbedding:
    """Embed a text of any length: per-chunk partials plus the global mean."""
    if not text:
        raise EmptyInputError("cannot embed empty text")
    matrices = vectorize_text(text, params.config.codec)
    partials = forward_batch(params, matrices)
    return TextEmbedding(partials=partials, global_=_renorm_mean(partials))


def embed_texts(params: ModelParams, texts: list[str], batch_chunks: int = 256) -> list[TextEmbedding]:
    """Embed many texts, batching chunks across texts for throughput."""
    per_text = []
    flat: list[CharMatrix] = []
    for text in texts:
        if not text:
            raise EmptyInputError("cannot embed empty text")
        ms = vectorize_text(text, params.config.codec)
        per_text.append(len(ms))
        flat.extend(ms)
    rows = []
    for start in range(0, len(flat), batch_chunks):
        rows.append(forward_batch(params, flat[start : start + batch_chunks]))
    all_rows = np.concatenate(rows) if rows else np.zeros((0, params.config.embedding_dim), np.float32)
    out = []
    offset = 0
    for count in per_text:
        partials = all_rows[offset : offset + count]
        offset += count
        out.append(TextEmbedding(partials=partials, global_=_renorm_mean(partials)))
    return out


# ---------------------------------------------------------------------------
# weight container: magic + manifest JSON + raw little-endian f32 blob


def save_params(params: ModelParams, path) -> None:
    """Write the two-part weight container (manifest + float32 blob)."""
    entries = []
    blob = io.BytesIO()
    offset = 0
    for name in tensor_shapes(params.config):
        arr = np.array(params.tensors[name], dtype="<f4", order="C")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        raw = arr.tobytes()
        blob.write(raw)
        offset += len(raw)
    payload = blob.getvalue()
    manifest = {
        "format_version": WEIGHT_FORMAT_VERSION,
        "config": asdict(params.config),
        "blob_bytes": offset,
        "blob_crc32": zlib.crc32(payload),
        "tensors": entries,
    }
    manifest_bytes = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(WEIGHT_MAGIC)
        fh.write(len(manifest_bytes).to_bytes(4, "little"))
        fh.write(manifest_bytes)
        fh.write(payload)


def load_params(path) -> ModelParams:
    """Read and validate a weight container written by :func:`save_params`."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < len(WEIGHT_MAGIC) + 4 or data[: len(WEIGHT_MAGIC)] != WEIGHT_MAGIC:
        raise FormatError("not a weight container (bad magic)")
    mstart = len(WEIGHT_MAGIC) + 4
    mlen = int.from_bytes(data[len(WEIGHT_MAGIC) : mstart], "little")
    if len(data) < mstart + mlen:
        raise IntegrityError("truncated manifest")
    try:
        manifest = json.loads(data[mstart : mstart + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"manifest does not parse: {exc}") from exc
    if manifest.get("format_version") != WEIGHT_FORMAT_VERSION:
        raise FormatError(f"unsupported format version {manifest.get('format_version')}")
    try:
        cfg = ModelConfig(**manifest["config"])
    except (TypeError, KeyError, ValueError) as exc:
        raise FormatError(f"bad config in manifest: {exc}") from exc

    expected = tensor_shapes(cfg)
    entries = manifest.get("tensors", [])
    if [e["name"] for e in entries] != list(expected):
        raise IntegrityError("manifest tensor list does not match the stored config")

    blob = data[mstart + mlen :]
    if len(blob) != manifest.get("blob_bytes"):
        raise IntegrityError(
            f"blob length {len(blob)} does not match manifest ({manifest.get('blob_bytes')})"
        )
    if zlib.crc32(blob) != manifest.get("blob_crc32"):
        raise IntegrityError("blob checksum mismatch")

    tensors = {}
    offset = 0
    for entry in entries:
        name, shape = entry["name"], tuple(entry["shape"])
        if shape != expected[name]:
            raise IntegrityError(f"tensor {name} declared shape {shape}, config implies {expected[name]}")
        if entry["offset"] != offset:
            raise IntegrityError(f"tensor {name} offset {entry['offset']} is not contiguous")
        nbytes = int(np.prod(shape, dtype=np.int64)) * 4 if shape else 4
        raw = blob[offset : offset + nbytes]
        if len(raw) != nbytes:
            raise IntegrityError(f"tensor {name} extends past end of blob")
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
        offset += nbytes
    if offset != len(blob):
        raise IntegrityError("blob has trailing bytes beyond the manifest contents")
    return ModelParams(config=cfg, tensors=tensors)

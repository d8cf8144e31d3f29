"""Character-level binarization and fixed-size chunking of text.

Every Unicode scalar value is encoded as the little-endian binary
expansion of its codepoint, truncated to a fixed bit width (24 bits by
default, enough for the full 0..0x10FFFF range). Texts are split into
chunks of at most ``chunk_len`` scalars; each chunk becomes a dense
(chunk_len, bits_per_char) 0/1 matrix, zero-padded past its real length.

No normalization, lowercasing, or tokenization of any kind is applied:
the encoding is a verbatim function of the input scalars, which is what
makes the downstream embedding robust to typos and exotic characters.
"a character" here always means a Unicode scalar value, never a grapheme
cluster.
"""

from dataclasses import dataclass

import numpy as np

from .errors import EmptyInputError, InvalidCodepointError

_SURROGATE_LO = 0xD800
_SURROGATE_HI = 0xDFFF
_MAX_SCALAR = 0x10FFFF


@dataclass(frozen=True)
class CodecConfig:
    """Chunking and binarization parameters.

    The defaults (512 characters per chunk, 24 bits per character) are
    the ones the shipped embedding model is built around.
    """

    chunk_len: int = 512
    bits_per_char: int = 24

    def __post_init__(self):
        if self.chunk_len < 1:
            raise ValueError(f"chunk_len must be >= 1, got {self.chunk_len}")
        if not 1 <= self.bits_per_char <= 32:
            raise ValueError(f"bits_per_char must be in [1, 32], got {self.bits_per_char}")


@dataclass(frozen=True)
class CharMatrix:
    """Dense 0/1 encoding of one chunk.

    ``data`` has shape (chunk_len, bits_per_char) with dtype uint8; rows at
    index >= ``valid_len`` are all-zero padding.
    """

    data: np.ndarray
    valid_len: int

    @property
    def chunk_len(self) -> int:
        return self.data.shape[0]

    @property
    def bits_per_char(self) -> int:
        return self.data.shape[1]


def _check_codepoints(cps: np.ndarray) -> None:
    bad = (cps < 0) | (cps > _MAX_SCALAR) | ((cps >= _SURROGATE_LO) & (cps <= _SURROGATE_HI))
    if bad.any():
        offender = int(cps[bad][0])
        raise InvalidCodepointError(f"not a Unicode scalar value: U+{offender:04X}")


def encode_char(codepoint: int, bits: int) -> np.ndarray:
    """Little-endian binary expansion of a codepoint, truncated to ``bits`` bits.

    Bit i of the result equals ``(codepoint >> i) & 1``. Raises
    InvalidCodepointError for surrogates and out-of-range values.
    """
    cps = np.asarray([codepoint], dtype=np.int64)
    _check_codepoints(cps)
    shifts = np.arange(bits, dtype=np.int64)
    return ((cps[0] >> shifts) & 1).astype(np.uint8)


def chunk_text(text: str, cfg: CodecConfig = CodecConfig()) -> list[str]:
    """Split ``text`` into consecutive chunks of at most ``cfg.chunk_len`` scalars.

    The concatenation of the returned chunks is exactly the input; every
    chunk except possibly the last has exactly ``chunk_len`` characters.
    """
    if not text:
        raise EmptyInputError("cannot chunk empty text")
    n = cfg.chunk_len
    return [text[i : i + n] for i in range(0, len(text), n)]


def vectorize_chunk(chunk: str, cfg: CodecConfig = CodecConfig()) -> CharMatrix:
    """Encode one chunk into a zero-padded (chunk_len, bits_per_char) matrix."""
    if not chunk:
        raise EmptyInputError("cannot vectorize an empty chunk")
    if len(chunk) > cfg.chunk_len:
        raise ValueError(f"chunk of {len(chunk)} chars exceeds chunk_len {cfg.chunk_len}")
    cps = np.array([ord(c) for c in chunk], dtype=np.int64)
    _check_codepoints(cps)
    shifts = np.arange(cfg.bits_per_char, dtype=np.int64)
    rows = ((cps[:, None] >> shifts[None, :]) & 1).astype(np.uint8)
    data = np.zeros((cfg.chunk_len, cfg.bits_per_char), dtype=np.uint8)
    data[: len(chunk)] = rows
    return CharMatrix(data=data, valid_len=len(chunk))


def vectorize_text(text: str, cfg: CodecConfig = CodecConfig()) -> list[CharMatrix]:
    """Chunk then vectorize; one CharMatrix per chunk."""
    return [vectorize_chunk(c, cfg) for c in chunk_text(text, cfg)]

"""Fixed-width integer codec for DNS domain names.

Every valid character maps to a unique positive integer and names are
left-padded with zeros to the maximum DNS name length, so each domain becomes
an integer vector of fixed width suitable for an embedding layer.  The dot is
kept: top-level domains carry signal and are not stripped.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError

# id 0 is the pad symbol; alphabet characters get ids 1..39 in this order.
ALPHABET = "abcdefghijklmnopqrstuvwxyz0123456789-._"
PAD_ID = 0
VOCAB_SIZE = len(ALPHABET) + 1
MAX_DOMAIN_LENGTH = 253

_CHAR_TO_ID = {ch: i + 1 for i, ch in enumerate(ALPHABET)}
_ID_TO_CHAR = {i + 1: ch for i, ch in enumerate(ALPHABET)}

# ascii lookup table used by encode_batch; 255 marks invalid bytes
_LUT = np.full(256, 255, dtype=np.uint8)
for _ch, _id in _CHAR_TO_ID.items():
    _LUT[ord(_ch)] = _id


class EmptyDomain(DataError):
    """Domain name is empty."""


class DomainTooLong(DataError):
    """Domain name exceeds the maximum DNS name length."""


class UnknownCharacter(DataError):
    """Domain contains a character outside the alphabet."""


class MalformedEncoding(DataError):
    """Encoded vector violates the pad-then-content layout."""


@dataclass(frozen=True)
class EncodedDomain:
    """Integer id vector of width MAX_DOMAIN_LENGTH plus the content length."""

    ids: np.ndarray
    length: int


def encode(domain: str) -> EncodedDomain:
    """Lowercase, validate, and left-pad a domain into an id vector."""
    lowered = domain.lower()
    if not lowered:
        raise EmptyDomain("domain is empty")
    if len(lowered) > MAX_DOMAIN_LENGTH:
        raise DomainTooLong(
            f"domain has {len(lowered)} characters, limit is {MAX_DOMAIN_LENGTH}"
        )
    ids = np.zeros(MAX_DOMAIN_LENGTH, dtype=np.int32)
    start = MAX_DOMAIN_LENGTH - len(lowered)
    for pos, ch in enumerate(lowered):
        code = _CHAR_TO_ID.get(ch)
        if code is None:
            raise UnknownCharacter(f"character {ch!r} at position {pos} is not encodable")
        ids[start + pos] = code
    return EncodedDomain(ids=ids, length=len(lowered))


def decode(encoded: EncodedDomain | np.ndarray) -> str:
    """Invert encode; rejects vectors that are not pad-prefix + content."""
    ids = encoded.ids if isinstance(encoded, EncodedDomain) else np.asarray(encoded)
    if ids.shape != (MAX_DOMAIN_LENGTH,):
        raise MalformedEncoding(f"expected {MAX_DOMAIN_LENGTH} ids, got shape {ids.shape}")
    nonzero = np.flatnonzero(ids)
    if nonzero.size == 0:
        raise MalformedEncoding("vector is all padding")
    start = int(nonzero[0])
    content = ids[start:]
    if np.any(content == PAD_ID):
        raise MalformedEncoding("padding appears after content start")
    if np.any(content >= VOCAB_SIZE) or np.any(content < 0):
        raise MalformedEncoding("id outside the alphabet range")
    if isinstance(encoded, EncodedDomain) and encoded.length != content.size:
        raise MalformedEncoding(
            f"length field says {encoded.length}, content spans {content.size}"
        )
    return "".join(_ID_TO_CHAR[int(i)] for i in content)


def encode_batch(domains: list[str] | tuple[str, ...]) -> np.ndarray:
    """Encode many domains into one (n, MAX_DOMAIN_LENGTH) int32 matrix."""
    out = np.zeros((len(domains), MAX_DOMAIN_LENGTH), dtype=np.int32)
    for row, domain in enumerate(domains):
        lowered = domain.lower()
        if not lowered:
            raise EmptyDomain(f"domain at index {row} is empty")
        if len(lowered) > MAX_DOMAIN_LENGTH:
            raise DomainTooLong(
                f"domain at index {row} has {len(lowered)} characters,"
                f" limit is {MAX_DOMAIN_LENGTH}"
            )
        raw = lowered.encode("ascii", errors="replace")
        codes = _LUT[np.frombuffer(raw, dtype=np.uint8)]
        if np.any(codes == 255):
            bad = lowered[int(np.argmax(codes == 255))]
            raise UnknownCharacter(
                f"character {bad!r} in domain at index {row} is not encodable"
            )
        out[row, MAX_DOMAIN_LENGTH - len(lowered):] = codes
    return out

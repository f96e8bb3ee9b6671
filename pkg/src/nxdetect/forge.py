"""Deterministic corpus generation.

Regex-style DGA families, the two-character-substitution adversarial
generator, a regex-identical PRNG pair for probing beyond-surface features,
a dictionary-based benign-like stream, and blacklist filtering.  Every
generator is a pure function of (seed, ordinal): sample i of a run is
produced by its own PCG64 stream keyed on (seed, family tag, i), so corpora
are reproducible sample-by-sample and parallel generation can partition the
ordinal range.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass
from importlib import resources

import numpy as np

from . import codec
from .errors import DataError


class InvalidSpec(DataError):
    """Family spec violates its invariants."""


class SldTooShort(DataError):
    """Substitution needs at least two characters to work with."""


# every character a generated SLD may use; dots only separate labels
GENERATOR_CHARSET = codec.ALPHABET.replace(".", "")


def _parse_charset(ranges: str) -> str:
    """Expand a compact range string like "a-z0-9" into its characters."""
    out: list[str] = []
    seen = set()
    i = 0
    while i < len(ranges):
        if i + 2 < len(ranges) and ranges[i + 1] == "-" and ranges[i + 2] != "-":
            lo, hi = ranges[i], ranges[i + 2]
            if ord(lo) > ord(hi):
                raise InvalidSpec(f"descending range {lo}-{hi}")
            chars = [chr(c) for c in range(ord(lo), ord(hi) + 1)]
            i += 3
        else:
            chars = [ranges[i]]
            i += 1
        for ch in chars:
            if ch not in seen:
                seen.add(ch)
                out.append(ch)
    return "".join(out)


@dataclass(frozen=True)
class DgaSpec:
    """One regex-style family: charset, SLD length bounds, weighted TLDs.

    lengths, when given, is an explicit set of allowed SLD lengths that
    overrides uniform drawing from [length_min, length_max] (for families
    whose pattern is an alternation of fixed lengths rather than a range).
    """

    name: str
    charset: str
    length_min: int
    length_max: int
    tlds: tuple[tuple[str, float], ...]
    lengths: tuple[int, ...] | None = None

    def __post_init__(self):
        if not self.name:
            raise InvalidSpec("family name is empty")
        if not self.charset:
            raise InvalidSpec(f"{self.name}: charset is empty")
        bad = set(self.charset) - set(GENERATOR_CHARSET)
        if bad:
            raise InvalidSpec(f"{self.name}: charset not encodable: {sorted(bad)}")
        if len(set(self.charset)) != len(self.charset):
            raise InvalidSpec(f"{self.name}: charset has duplicates")
        if self.lengths is not None:
            if not self.lengths or any(n < 1 for n in self.lengths):
                raise InvalidSpec(f"{self.name}: bad explicit length set")
        elif not 1 <= self.length_min <= self.length_max:
            raise InvalidSpec(
                f"{self.name}: bad length bounds [{self.length_min}, {self.length_max}]"
            )
        if not self.tlds:
            raise InvalidSpec(f"{self.name}: no TLDs")
        for tld, weight in self.tlds:
            if not tld or weight <= 0:
                raise InvalidSpec(f"{self.name}: bad TLD entry ({tld!r}, {weight})")


@dataclass(frozen=True)
class GeneratedSample:
    """A labeled domain plus the (generator, seed, ordinal) that made it."""

    domain: str
    family: str
    seed_record: tuple[str, int, int]


def _sample_rng(seed: int, tag: str, ordinal: int) -> np.random.Generator:
    # one independent stream per sample keyed on (seed, family tag, ordinal)
    tag_id = zlib.crc32(tag.encode())
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, tag_id, ordinal))))


def _pick_weighted(rng: np.random.Generator, items: tuple[tuple[str, float], ...]) -> str:
    total = sum(w for _, w in items)
    x = rng.random() * total
    acc = 0.0
    for value, weight in items:
        acc += weight
        if x < acc:
            return value
    return items[-1][0]


# ---------------------------------------------------------------------------
# regex-style families
# ---------------------------------------------------------------------------

def generate_regex_dga(spec: DgaSpec, seed: int, n: int) -> list[GeneratedSample]:
    """n SLDs drawn character-uniform from the spec's charset and lengths."""
    if n < 1:
        raise InvalidSpec(f"need at least one sample, got {n}")
    charset = np.frombuffer(spec.charset.encode(), dtype=np.uint8)
    out = []
    for ordinal in range(n):
        rng = _sample_rng(seed, f"regex:{spec.name}", ordinal)
        if spec.lengths is not None:
            length = int(spec.lengths[rng.integers(len(spec.lengths))])
        else:
            length = int(rng.integers(spec.length_min, spec.length_max + 1))
        sld = charset[rng.integers(0, len(charset), size=length)].tobytes().decode()
        tld = _pick_weighted(rng, spec.tlds)
        out.append(GeneratedSample(
            domain=f"{sld}.{tld}",
            family=spec.name,
            seed_record=(f"regex:{spec.name}", seed, ordinal),
        ))
    return out


def load_family_specs(path: str | None = None) -> list[DgaSpec]:
    """Load family specs from a config document (bundled defaults if None)."""
    if path is None:
        raw = resources.files("nxdetect").joinpath("data/families.json").read_text()
    else:
        with open(path) as fh:
            raw = fh.read()
    try:
        doc = json.loads(raw)
        entries = doc["families"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise InvalidSpec(f"unreadable family config: {exc}") from exc
    specs = []
    for entry in entries:
        try:
            lengths = entry.get("lengths")
            lengths = None if lengths is None else tuple(int(x) for x in lengths)
            spec = DgaSpec(
                name=entry["name"],
                charset=_parse_charset(entry["charset"]),
                length_min=min(lengths) if lengths else int(entry["length_min"]),
                length_max=max(lengths) if lengths else int(entry["length_max"]),
                tlds=tuple((t, float(w)) for t, w in entry["tlds"].items()),
                lengths=lengths,
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidSpec(f"bad family entry: {exc}") from exc
        specs.append(spec)
    if not specs:
        raise InvalidSpec("family config lists no families")
    return specs


# ---------------------------------------------------------------------------
# adversarial generator: two substitutions into a benign SLD
# ---------------------------------------------------------------------------

def load_charbot_tlds(path: str | None = None) -> list[str]:
    """TLD list for the substitution generator (bundled 22 entries if None)."""
    if path is None:
        raw = resources.files("nxdetect").joinpath("data/charbot_tlds.txt").read_text()
    else:
        with open(path) as fh:
            raw = fh.read()
    tlds = [line.strip() for line in raw.splitlines() if line.strip()]
    if not tlds:
        raise InvalidSpec("TLD list is empty")
    return tlds


def generate_charbot(
    seed_slds: list[str], tlds: list[str], seed: int, n: int
) -> list[GeneratedSample]:
    """Mutate benign SLDs in exactly two positions and append a TLD.

    Each output picks a source SLD uniformly, picks two distinct positions
    uniformly, and replaces each with a uniformly drawn generator-charset
    character guaranteed to differ from the original at that position.
    """
    if n < 1:
        raise InvalidSpec(f"need at least one sample, got {n}")
    if not seed_slds:
        raise InvalidSpec("no source SLDs")
    if not tlds:
        raise InvalidSpec("no TLDs")
    for sld in seed_slds:
        if len(sld) < 2:
            raise SldTooShort(f"source SLD {sld!r} is shorter than 2 characters")
    out = []
    for ordinal in range(n):
        rng = _sample_rng(seed, "charbot", ordinal)
        source = seed_slds[int(rng.integers(len(seed_slds)))]
        positions = rng.choice(len(source), size=2, replace=False)
        chars = list(source)
        for pos in sorted(int(p) for p in positions):
            pool = [c for c in GENERATOR_CHARSET if c != chars[pos]]
            chars[pos] = pool[int(rng.integers(len(pool)))]
        tld = tlds[int(rng.integers(len(tlds)))]
        out.append(GeneratedSample(
            domain=f"{''.join(chars)}.{tld}",
            family="charbot",
            seed_record=("charbot", seed, ordinal),
        ))
    return out


# ---------------------------------------------------------------------------
# regex-identical PRNG pair
# ---------------------------------------------------------------------------

_MASK64 = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def _pair_state(seed: int, variant: str, ordinal: int) -> int:
    mixed = _splitmix64(((seed & _MASK64) * 0x9E3779B97F4A7C15 + ordinal + 1) & _MASK64)
    mixed = _splitmix64(mixed ^ zlib.crc32(variant.encode()))
    return mixed or 1  # the shift-register recurrence must never see zero


def generate_prng_pair(variant: str, seed: int, n: int) -> list[GeneratedSample]:
    """Ten-letter .com names from one of two algorithmically distinct PRNGs.

    Variant A iterates a 64-bit linear-congruential recurrence, variant B a
    64-bit xorshift recurrence; both emit characters by mod-26 extraction, so
    the two families match the identical regex and differ only in the hidden
    sequential structure of their generators.
    """
    if variant not in ("A", "B"):
        raise InvalidSpec(f"variant must be A or B, got {variant!r}")
    if n < 1:
        raise InvalidSpec(f"need at least one sample, got {n}")
    out = []
    for ordinal in range(n):
        state = _pair_state(seed, variant, ordinal)
        chars = []
        for _ in range(10):
            if variant == "A":
                state = (6364136223846793005 * state + 1442695040888963407) & _MASK64
            else:
                state ^= (state << 13) & _MASK64
                state ^= state >> 7
                state ^= (state << 17) & _MASK64
            chars.append(chr(ord("a") + state % 26))
        out.append(GeneratedSample(
            domain="".join(chars) + ".com",
            family=f"prng-{variant.lower()}",
            seed_record=(f"prng:{variant}", seed, ordinal),
        ))
    return out


# ---------------------------------------------------------------------------
# benign-like surrogate stream
# ---------------------------------------------------------------------------

def load_wordlist(path: str | None = None) -> list[str]:
    """Lowercase dictionary, one word per line (bundled list if None)."""
    if path is None:
        raw = resources.files("nxdetect").joinpath("data/wordlist.txt").read_text()
    else:
        with open(path) as fh:
            raw = fh.read()
    words = [line.strip() for line in raw.splitlines() if line.strip()]
    if not words:
        raise InvalidSpec("wordlist is empty")
    return words


_BENIGN_TLDS = ("com", "net", "org", "io", "co", "info")
_WORD_COUNT_WEIGHTS = ((1, 0.5), (2, 0.35), (3, 0.15))


def generate_benign_like(
    wordlist: list[str], tlds: tuple[str, ...] = _BENIGN_TLDS,
    seed: int = 0, n: int = 1,
) -> list[GeneratedSample]:
    """Compose 1-3 dictionary words with optional digits, hyphens, and typos."""
    if n < 1:
        raise InvalidSpec(f"need at least one sample, got {n}")
    if not wordlist:
        raise InvalidSpec("wordlist is empty")
    if not tlds:
        raise InvalidSpec("no TLDs")
    letters = "abcdefghijklmnopqrstuvwxyz"
    out = []
    for ordinal in range(n):
        rng = _sample_rng(seed, "benign", ordinal)
        count = int(_pick_weighted(rng, _WORD_COUNT_WEIGHTS))
        words = [wordlist[int(rng.integers(len(wordlist)))] for _ in range(count)]
        joiner = "-" if rng.random() < 0.15 and count > 1 else ""
        sld = joiner.join(words)
        if rng.random() < 0.25:
            sld += "".join(str(rng.integers(10)) for _ in range(int(rng.integers(1, 4))))
        if rng.random() < 0.3:
            pos = int(rng.integers(len(sld)))
            pool = [c for c in letters if c != sld[pos]]
            sld = sld[:pos] + pool[int(rng.integers(len(pool)))] + sld[pos + 1:]
        tld = tlds[int(rng.integers(len(tlds)))]
        out.append(GeneratedSample(
            domain=f"{sld}.{tld}",
            family="benign",
            seed_record=("benign", seed, ordinal),
        ))
    return out


# ---------------------------------------------------------------------------
# blacklist filtering and corpus files
# ---------------------------------------------------------------------------

def filter_blacklist(
    samples: list[GeneratedSample], known: set[str]
) -> tuple[list[GeneratedSample], list[GeneratedSample]]:
    """Split samples into (kept, removed) by case-insensitive exact match."""
    known_lower = {k.lower() for k in known}
    kept, removed = [], []
    for sample in samples:
        (removed if sample.domain.lower() in known_lower else kept).append(sample)
    return kept, removed


def write_corpus(samples: list[GeneratedSample], path: str) -> None:
    """One "domain,family" line per sample."""
    with open(path, "w") as fh:
        for sample in samples:
            fh.write(f"{sample.domain},{sample.family}\n")


def read_corpus(path: str) -> list[tuple[str, str]]:
    """Read "domain,family" lines back as (domain, family) pairs."""
    pairs = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 2 or not parts[0] or not parts[1]:
                raise DataError(f"{path}:{lineno}: expected 'domain,family'")
            pairs.append((parts[0], parts[1]))
    return pairs

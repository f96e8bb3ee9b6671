"""Post-detection analysis of positives.

Per-domain triage features (length, charset, TLD, Shannon entropy,
dictionary-word count, query count, time span), deterministic two-stage
grouping of positives, and regex summarization of each group.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

from .errors import DataError


class EmptyString(DataError):
    """Entropy is undefined on an empty string."""


class NoRecords(DataError):
    """Feature extraction needs at least one query record."""


_LETTERS = set("abcdefghijklmnopqrstuvwxyz")
_DIGITS = set("0123456789")


def split_domain(domain: str) -> tuple[str, str]:
    """(SLD, TLD): the label before the first dot and everything after it."""
    domain = domain.lower()
    sld, _, tld = domain.partition(".")
    return sld, tld


def shannon_entropy(s: str) -> float:
    """Character-distribution entropy in bits."""
    if not s:
        raise EmptyString("entropy of an empty string")
    counts = Counter(s)
    n = len(s)
    return -sum((c / n) * math.log2(c / n) for c in counts.values())


def english_word_count(s: str, wordlist, min_len: int = 3) -> int:
    """Non-overlapping dictionary substrings via greedy longest-match.

    Scans left to right; at each position the longest dictionary word of
    length >= min_len wins and the scan resumes after it.
    """
    words = wordlist if isinstance(wordlist, (set, frozenset)) else set(wordlist)
    if not words:
        return 0
    longest = max(len(w) for w in words)
    count = 0
    i = 0
    while i < len(s):
        matched = 0
        for length in range(min(longest, len(s) - i), min_len - 1, -1):
            if s[i:i + length] in words:
                matched = length
                break
        if matched:
            count += 1
            i += matched
        else:
            i += 1
    return count


@dataclass(frozen=True)
class TriageFeatures:
    """Per-domain triage record.

    charset_signature flags are (letters, digits, hyphen, underscore)
    membership over the SLD's characters.
    """

    domain: str
    sld_length: int
    charset_signature: tuple[bool, bool, bool, bool]
    tld: str
    query_count: int
    time_span_seconds: int
    entropy_bits: float
    english_words: int


def extract_features(domain: str, timestamps: list[float],
                     wordlist=None) -> TriageFeatures:
    """Compute the triage record for one domain from its query timestamps."""
    if not timestamps:
        raise NoRecords(f"no query records for {domain!r}")
    sld, tld = split_domain(domain)
    if not sld:
        raise EmptyString(f"{domain!r} has an empty SLD")
    chars = set(sld)
    return TriageFeatures(
        domain=domain.lower(),
        sld_length=len(sld),
        charset_signature=(
            bool(chars & _LETTERS),
            bool(chars & _DIGITS),
            "-" in chars,
            "_" in chars,
        ),
        tld=tld,
        query_count=len(timestamps),
        time_span_seconds=int(max(timestamps) - min(timestamps)),
        entropy_bits=shannon_entropy(sld),
        english_words=0 if wordlist is None else english_word_count(sld, wordlist),
    )


# ---------------------------------------------------------------------------
# regex summarization
# ---------------------------------------------------------------------------

def summarize_regex(domains: list[str]) -> str:
    """Narrowest [class]{lengths}.tld pattern covering every member.

    The character class is built from the charsets actually observed; the
    letters part narrows from a-z to a-y only when all 25 of a..y occur and
    z never does, so the exclusion is evidenced rather than accidental.
    Lengths render as {n} or {min,max}; multiple TLDs render as (t1|t2|...).
    """
    if not domains:
        raise DataError("cannot summarize an empty group")
    observed: set[str] = set()
    lengths: set[int] = set()
    tlds: set[str] = set()
    for domain in domains:
        sld, tld = split_domain(domain)
        observed |= set(sld)
        lengths.add(len(sld))
        tlds.add(tld)

    parts = []
    letters = observed & _LETTERS
    if letters:
        if letters == _LETTERS - {"z"}:
            parts.append("a-y")
        else:
            parts.append("a-z")
    if observed & _DIGITS:
        parts.append("0-9")
    if "-" in observed:
        parts.append("\\-")
    if "_" in observed:
        parts.append("_")
    charset = "[" + "".join(parts) + "]"

    lo, hi = min(lengths), max(lengths)
    quantifier = f"{{{lo}}}" if lo == hi else f"{{{lo},{hi}}}"
    tld_part = next(iter(tlds)) if len(tlds) == 1 else "(" + "|".join(sorted(tlds)) + ")"
    return f"{charset}{quantifier}.{tld_part}"


def regex_matches(summary: str, domain: str) -> bool:
    """Check a domain against a summary pattern, dots taken literally."""
    import re

    sld_pattern, dot, tld_pattern = summary.rpartition("}.")
    if not dot:
        return False
    sld_pattern += "}"
    if tld_pattern.startswith("("):
        tlds = tld_pattern[1:-1].split("|")
    else:
        tlds = [tld_pattern]
    sld, tld = split_domain(domain)
    return tld in tlds and re.fullmatch(sld_pattern, sld) is not None


# ---------------------------------------------------------------------------
# grouping
# ---------------------------------------------------------------------------

@dataclass
class GroupReport:
    """One cluster of positives with its regex summary and centroid."""

    members: list[str]
    regex: str
    centroid: dict[str, float]
    verdict: str = "unreviewed"
    features: list[TriageFeatures] = field(default_factory=list, repr=False)


_ENTROPY_MERGE_BITS = 0.5
_WORDS_MERGE_COUNT = 1.0


def cluster_positives(features: list[TriageFeatures]) -> list[GroupReport]:
    """Deterministic two-stage grouping of positive domains.

    Stage one buckets by the exact key (tld, charset signature, SLD length
    halved), putting domains whose lengths differ by one in reach of the same
    bucket.  Stage two merges buckets that share (tld, charset signature)
    whenever their entropy centroids lie within 0.5 bits and their word-count
    centroids within 1 word, closed transitively.  Output is independent of
    input order: groups sort by size (largest first), then by first member.
    """
    if not features:
        return []
    buckets: dict[tuple, list[TriageFeatures]] = {}
    for f in features:
        key = (f.tld, f.charset_signature, f.sld_length // 2)
        buckets.setdefault(key, []).append(f)

    keys = sorted(buckets, key=str)
    parent = {key: key for key in keys}

    def find(key):
        while parent[key] != key:
            parent[key] = parent[parent[key]]
            key = parent[key]
        return key

    def centroid_of(members):
        n = len(members)
        return (sum(m.entropy_bits for m in members) / n,
                sum(m.english_words for m in members) / n)

    centroids = {key: centroid_of(buckets[key]) for key in keys}
    for i, a in enumerate(keys):
        for b in keys[i + 1:]:
            if a[0] != b[0] or a[1] != b[1]:
                continue  # never merge across TLD or charset boundaries
            ea, wa = centroids[a]
            eb, wb = centroids[b]
            if abs(ea - eb) < _ENTROPY_MERGE_BITS and abs(wa - wb) < _WORDS_MERGE_COUNT:
                ra, rb = find(a), find(b)
                if ra != rb:
                    parent[max(ra, rb, key=str)] = min(ra, rb, key=str)

    merged: dict[tuple, list[TriageFeatures]] = {}
    for key in keys:
        merged.setdefault(find(key), []).extend(buckets[key])

    groups = []
    for members in merged.values():
        members = sorted(members, key=lambda f: f.domain)
        domains = [m.domain for m in members]
        n = len(members)
        groups.append(GroupReport(
            members=domains,
            regex=summarize_regex(domains),
            centroid={
                "sld_length": sum(m.sld_length for m in members) / n,
                "entropy_bits": sum(m.entropy_bits for m in members) / n,
                "english_words": sum(m.english_words for m in members) / n,
            },
            features=members,
        ))
    groups.sort(key=lambda g: (-len(g.members), g.members[0]))
    return groups

"""Ad record parsing, PII masking, sample expansion, and dataset splits.

The text field of every ad is ``title [SEP] description`` truncated to 512
whitespace tokens. Masking replaces links, email addresses, dates, post ids,
and every remaining ASCII digit before any text leaves this module.
"""

from __future__ import annotations

import csv
import json
import re
from dataclasses import dataclass
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from .validation import DataError

REGIONS = ("South", "Midwest", "West", "Northeast", "Other")

SEP_TOKEN = "[SEP]"
MAX_TEXT_TOKENS = 512
DEFAULT_SPLIT_RATIOS = (0.75, 0.05, 0.20)
DEFAULT_SPLIT_SEED = 1111


class ParseError(DataError):
    """Malformed input record; carries the 1-based line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class RawAd:
    id: str
    region: str
    title: str
    description: str
    image_refs: tuple[str, ...] = ()


@dataclass(frozen=True)
class MaskedAd:
    """An ad after text construction and PII masking.

    ``text`` contains exactly one ``[SEP]``; ``identifiers`` hold the
    canonical (digits-only) phone strings extracted from the raw text.
    """

    id: str
    region: str
    text: str
    identifiers: frozenset[str]
    image_refs: tuple[str, ...] = ()


@dataclass(frozen=True)
class MultimodalSample:
    ad_id: str
    text: str
    image_ref: str
    vendor: int


@dataclass(frozen=True)
class DatasetSplit:
    train_ids: tuple[str, ...]
    val_ids: tuple[str, ...]
    test_ids: tuple[str, ...]
    ratios: tuple[float, float, float] = DEFAULT_SPLIT_RATIOS
    seed: int = DEFAULT_SPLIT_SEED


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

_REQUIRED_FIELDS = ("id", "region", "title", "description")


def _lines(stream) -> Iterator[str]:
    if isinstance(stream, str):
        yield from stream.splitlines()
    else:
        for line in stream:
            yield line.rstrip("\n")


def _validate_record(rec: Mapping[str, object], line_no: int, seen_ids: set[str]) -> RawAd:
    for f in _REQUIRED_FIELDS:
        if f not in rec or rec[f] is None:
            raise ParseError(f"missing required field {f!r}", line_no)
    ad_id = str(rec["id"])
    if not ad_id:
        raise ParseError("empty id", line_no)
    if ad_id in seen_ids:
        raise ParseError(f"duplicate id {ad_id!r}", line_no)
    region = str(rec["region"])
    if region not in REGIONS:
        raise ParseError(f"unknown region {region!r}, expected one of {REGIONS}", line_no)
    images = rec.get("images", ())
    if isinstance(images, str):
        images = tuple(p for p in images.split(";") if p)
    else:
        images = tuple(str(p) for p in images)
    seen_ids.add(ad_id)
    return RawAd(
        id=ad_id,
        region=region,
        title=str(rec["title"]),
        description=str(rec["description"]),
        image_refs=images,
    )


def parse_ads(stream, format: str = "jsonl") -> list[RawAd]:
    """Parse a line-delimited ad stream into ``RawAd`` records, in input order.

    ``stream`` may be a string or any iterable of lines. ``format`` is
    ``jsonl`` (one object per line) or ``csv`` (header row with the same
    field names; ``images`` is a ``;``-separated list).
    """
    if format not in ("jsonl", "csv"):
        raise ValueError(f"unknown format {format!r}")
    ads: list[RawAd] = []
    seen: set[str] = set()
    if format == "jsonl":
        for line_no, line in enumerate(_lines(stream), start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON ({exc.msg})", line_no) from exc
            if not isinstance(rec, dict):
                raise ParseError("record is not a JSON object", line_no)
            ads.append(_validate_record(rec, line_no, seen))
    else:
        reader = csv.reader(_lines(stream))
        try:
            header = next(reader)
        except StopIteration:
            return ads
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) > len(header):
                raise ParseError(
                    f"row has {len(row)} fields, header has {len(header)}", line_no
                )
            rec = dict(zip(header, row))
            ads.append(_validate_record(rec, line_no, seen))
    return ads


# ---------------------------------------------------------------------------
# Text construction
# ---------------------------------------------------------------------------


def build_ad_text(title: str, description: str) -> str:
    """Join title and description with a single ``[SEP]`` separator.

    Occurrences of ``[SEP]`` inside either input are escaped to ``[SEP\\]``
    so the output always contains exactly one separator. The result is
    truncated to at most 512 whitespace tokens, always keeping the
    separator.
    """
    title = title.replace(SEP_TOKEN, "[SEP\\]")
    description = description.replace(SEP_TOKEN, "[SEP\\]")
    joined = title + " " + SEP_TOKEN + " " + description
    tokens = joined.split()
    if len(tokens) <= MAX_TEXT_TOKENS:
        return joined
    title_tokens = title.split()
    head = title_tokens[: MAX_TEXT_TOKENS - 1]
    budget = MAX_TEXT_TOKENS - len(head) - 1
    tail = description.split()[:budget]
    return " ".join(head + [SEP_TOKEN] + tail)


# ---------------------------------------------------------------------------
# Identifier extraction
# ---------------------------------------------------------------------------

_DIGIT_WORDS = {
    "zero": "0",
    "one": "1",
    "two": "2",
    "three": "3",
    "four": "4",
    "five": "5",
    "six": "6",
    "seven": "7",
    "eight": "8",
    "nine": "9",
}
# Boundaries are letters only, so digit-adjacent spellings ("five5five")
# still count as digit words.
_DIGIT_WORD_RE = re.compile(
    r"(?<![a-zA-Z])(" + "|".join(_DIGIT_WORDS) + r")(?![a-zA-Z])", re.IGNORECASE
)
# Digits joined by short runs of common phone separators. Commas are
# excluded so list punctuation terminates a candidate.
_PHONE_CANDIDATE_RE = re.compile(r"\d(?:[\s().\-*+_/#]{0,3}\d)+")

MIN_PHONE_DIGITS = 10
MAX_PHONE_DIGITS = 15


def _spell_out_digits(text: str) -> str:
    return _DIGIT_WORD_RE.sub(lambda m: _DIGIT_WORDS[m.group(0).lower()], text)


def extract_identifiers(ad: RawAd) -> frozenset[str]:
    """Extract canonical phone numbers (digits only) from an ad's raw text.

    Rule-based: spelled-out digit words are mapped to digits, then digit
    runs joined by separators are collected; matches with 10..15 digits
    are kept.
    """
    # "|" is not a phone separator, so numbers never merge across the join
    text = _spell_out_digits(ad.title + " | " + ad.description)
    found = set()
    for m in _PHONE_CANDIDATE_RE.finditer(text):
        digits = re.sub(r"\D", "", m.group(0))
        if MIN_PHONE_DIGITS <= len(digits) <= MAX_PHONE_DIGITS:
            found.add(digits)
    return frozenset(found)


# ---------------------------------------------------------------------------
# Masking
# ---------------------------------------------------------------------------

LINK_RE = re.compile(r"""(?:https?://|www\.)[^\s<>"']+""", re.IGNORECASE)
EMAIL_RE = re.compile(r"[A-Za-z0-9._%+-]+@[A-Za-z0-9.-]+\.[A-Za-z]{2,}")
# Date and post-id patterns are defined by the explicit list below,
# documented in the README.
DATE_RES = (
    re.compile(r"\b\d{4}-\d{2}-\d{2}\b"),
    re.compile(r"\b\d{1,2}[/\-.]\d{1,2}[/\-.]\d{2,4}\b"),
    re.compile(
        r"\b(?:jan|feb|mar|apr|may|jun|jul|aug|sep|oct|nov|dec)[a-z]*\.?\s+"
        r"\d{1,2}(?:st|nd|rd|th)?(?:\s*,?\s*\d{2,4})?\b",
        re.IGNORECASE,
    ),
)
POST_ID_RE = re.compile(r"\b(?:post|ad)[\s_-]*id\s*[:#]?\s*\d+", re.IGNORECASE)

LINK_TOKEN = "<LINK>"
DATE_TOKEN = "<DATES>"
POST_ID_TOKEN = "POST_ID: NNNNN"

# Matches the inserted email tokens so their counters survive digit masking
# and so cleanliness checks can discount them.
EMAIL_TOKEN_RE = re.compile(r"<EMAILID-\d+>")

_SENTINEL = "\x00"


def mask_text(text: str, identifiers: Iterable[str] = ()) -> str:
    """Mask links, emails, dates, post ids, then every remaining ASCII digit.

    Email addresses become ``<EMAILID-k>`` with ``k`` a per-document counter
    keyed by distinct address. Phone numbers need no dedicated token: the
    digit rule (digit -> ``N``) covers them, canonical ``identifiers`` are
    accepted for interface parity only. Masking is idempotent.
    """
    del identifiers  # subsumed by the global digit rule
    protected: list[str] = []

    def _protect(token: str) -> str:
        protected.append(token)
        return _SENTINEL + chr(ord("A") + len(protected) - 1) + _SENTINEL

    out = LINK_RE.sub(lambda m: _protect(LINK_TOKEN), text)

    email_ids: dict[str, int] = {}

    def _email(m: re.Match) -> str:
        addr = m.group(0)
        if addr not in email_ids:
            email_ids[addr] = len(email_ids) + 1
        return _protect(f"<EMAILID-{email_ids[addr]}>")

    out = EMAIL_RE.sub(_email, out)
    # already-masked email tokens must keep their counters on re-masking
    out = EMAIL_TOKEN_RE.sub(lambda m: _protect(m.group(0)), out)
    for pat in DATE_RES:
        out = pat.sub(DATE_TOKEN, out)
    out = POST_ID_RE.sub(lambda m: _protect(POST_ID_TOKEN), out)
    out = re.sub(r"\d", "N", out)
    for i, token in enumerate(protected):
        out = out.replace(_SENTINEL + chr(ord("A") + i) + _SENTINEL, token)
    return out


def is_masked_clean(text: str) -> bool:
    """True when no email, URL, or >=2-digit run survives outside the
    sanctioned ``<EMAILID-k>`` tokens."""
    stripped = EMAIL_TOKEN_RE.sub(" ", text)
    if LINK_RE.search(stripped) or EMAIL_RE.search(stripped):
        return False
    return re.search(r"\d{2}", stripped) is None


def build_masked_ad(ad: RawAd) -> MaskedAd:
    identifiers = extract_identifiers(ad)
    text = mask_text(build_ad_text(ad.title, ad.description), identifiers)
    return MaskedAd(
        id=ad.id,
        region=ad.region,
        text=text,
        identifiers=identifiers,
        image_refs=ad.image_refs,
    )


def build_masked_ads(ads: Sequence[RawAd]) -> list[MaskedAd]:
    return [build_masked_ad(ad) for ad in ads]


# ---------------------------------------------------------------------------
# Masked-corpus JSONL
# ---------------------------------------------------------------------------


def masked_ad_to_json(ad: MaskedAd) -> str:
    return json.dumps(
        {
            "id": ad.id,
            "region": ad.region,
            "text": ad.text,
            "identifiers": sorted(ad.identifiers),
            "images": list(ad.image_refs),
        },
        sort_keys=True,
    )


def write_masked_corpus(ads: Sequence[MaskedAd], fh) -> None:
    for ad in ads:
        fh.write(masked_ad_to_json(ad) + "\n")


def read_masked_corpus(stream) -> list[MaskedAd]:
    ads: list[MaskedAd] = []
    seen: set[str] = set()
    for line_no, line in enumerate(_lines(stream), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON ({exc.msg})", line_no) from exc
        ad_id = str(rec["id"])
        if ad_id in seen:
            raise ParseError(f"duplicate id {ad_id!r}", line_no)
        seen.add(ad_id)
        ads.append(
            MaskedAd(
                id=ad_id,
                region=str(rec["region"]),
                text=str(rec["text"]),
                identifiers=frozenset(str(p) for p in rec.get("identifiers", ())),
                image_refs=tuple(str(p) for p in rec.get("images", ())),
            )
        )
    return ads


# ---------------------------------------------------------------------------
# Sample expansion and splits
# ---------------------------------------------------------------------------


def expand_samples(ads: Sequence[MaskedAd], labels: Mapping[str, int]) -> list[MultimodalSample]:
    """One sample per (ad, image) pair; every ad must carry >=1 image."""
    samples: list[MultimodalSample] = []
    for ad in ads:
        if not ad.image_refs:
            raise DataError(f"ad {ad.id!r} has no images; corpus filter requires >=1")
        if ad.id not in labels:
            raise DataError(f"ad {ad.id!r} has no vendor label")
        for ref in ad.image_refs:
            samples.append(
                MultimodalSample(ad_id=ad.id, text=ad.text, image_ref=ref, vendor=labels[ad.id])
            )
    return samples


def sample_id(sample: MultimodalSample) -> str:
    return f"{sample.ad_id}:{sample.image_ref}"


def split_dataset(
    ids: Iterable[str],
    ratios: Sequence[float] = DEFAULT_SPLIT_RATIOS,
    seed: int = DEFAULT_SPLIT_SEED,
) -> DatasetSplit:
    """Deterministic seeded shuffle of the sorted id set, then a contiguous
    train/val/test partition at the given ratios."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3:
        raise ValueError("ratios must have three entries")
    if any(r < 0 for r in ratios):
        raise ValueError("ratios must be non-negative")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1.0, got {sum(ratios)!r}")
    id_list = sorted(set(ids))
    n = len(id_list)
    if n < 3:
        raise ValueError(f"need at least 3 ids to split, got {n}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    shuffled = [id_list[i] for i in order]
    n_train = int(round(ratios[0] * n))
    n_val = int(round(ratios[1] * n))
    n_train = min(n_train, n)
    n_val = min(n_val, n - n_train)
    return DatasetSplit(
        train_ids=tuple(shuffled[:n_train]),
        val_ids=tuple(shuffled[n_train : n_train + n_val]),
        test_ids=tuple(shuffled[n_train + n_val :]),
        ratios=ratios,
        seed=seed,
    )

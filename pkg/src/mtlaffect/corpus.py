"""Corpus data model, JSONL persistence, stratified splitting, statistics,
and a calibrated synthetic generator for valence/emotion-carrier data.

A corpus is a list of narratives; each narrative is an ordered list of
functional units (FUs). Every FU carries a valence label and a list of
candidate spans, each marked as an emotion carrier (EC) or not. The
structural law linking the two annotations: a neutral FU never contains a
carrier, and every generated polar FU contains at least one.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from random import Random
from typing import Callable, Iterable, Sequence

NEGATIVE = "negative"
POSITIVE = "positive"
NEUTRAL = "neutral"
# Index in this tuple == integer code of the label (0=negative, 1=positive, 2=neutral).
VALENCE_LABELS = (NEGATIVE, POSITIVE, NEUTRAL)
POLAR_LABELS = (NEGATIVE, POSITIVE)

CARRIER_YES = "yes"
CARRIER_NO = "no"
CARRIER_LABELS = (CARRIER_NO, CARRIER_YES)  # index == integer code


class CorpusError(Exception):
    """Base class for corpus-layer failures."""


class CorpusFormatError(CorpusError):
    """A record could not be parsed; names the offending line."""


class CorpusValidationError(CorpusError):
    """An invariant is violated; names the unit and the invariant."""


class StratificationError(CorpusError):
    """A split cannot satisfy the stratification contract."""


class GeneratorSpecError(CorpusError):
    """Generator targets are invalid or mutually infeasible."""


@dataclass
class ECCandidate:
    """A contiguous token span [start, end) with a binary carrier label."""

    start: int
    end: int
    carrier: str = CARRIER_NO

    def to_record(self) -> dict:
        return {"start": self.start, "end": self.end, "carrier": self.carrier}


@dataclass
class FunctionalUnit:
    """The atomic annotation unit: a token sequence, its valence, and its
    candidate spans."""

    unit_id: str
    narrative_id: str
    tokens: list[str]
    valence: str
    candidates: list[ECCandidate] = field(default_factory=list)

    @property
    def is_polar(self) -> bool:
        return self.valence in POLAR_LABELS

    def carrier_candidates(self) -> list[ECCandidate]:
        return [c for c in self.candidates if c.carrier == CARRIER_YES]

    def span_text(self, cand: ECCandidate) -> str:
        """Normalized surface form of a candidate span (lowercased,
        whitespace-joined)."""
        return " ".join(t.lower() for t in self.tokens[cand.start : cand.end])

    def validate(self) -> None:
        uid = self.unit_id
        if not self.tokens:
            raise CorpusValidationError(f"unit {uid}: tokens must be non-empty")
        if self.valence not in VALENCE_LABELS:
            raise CorpusValidationError(f"unit {uid}: unknown valence {self.valence!r}")
        prev_end = 0
        for cand in self.candidates:
            if cand.carrier not in CARRIER_LABELS:
                raise CorpusValidationError(
                    f"unit {uid}: unknown carrier label {cand.carrier!r}"
                )
            if not (0 <= cand.start < cand.end <= len(self.tokens)):
                raise CorpusValidationError(
                    f"unit {uid}: candidate span ({cand.start},{cand.end}) out of "
                    f"bounds for {len(self.tokens)} tokens"
                )
            if cand.start < prev_end:
                raise CorpusValidationError(
                    f"unit {uid}: candidate spans must be sorted and non-overlapping"
                )
            prev_end = cand.end
        if self.valence == NEUTRAL and any(
            c.carrier == CARRIER_YES for c in self.candidates
        ):
            raise CorpusValidationError(
                f"unit {uid}: neutral valence implies no carrier=yes candidates"
            )


@dataclass
class Narrative:
    """A sequence of functional units told by one subject."""

    narrative_id: str
    subject_id: str
    units: list[FunctionalUnit]

    def validate(self) -> None:
        if not self.units:
            raise CorpusValidationError(
                f"narrative {self.narrative_id}: units must be non-empty"
            )
        for unit in self.units:
            if unit.narrative_id != self.narrative_id:
                raise CorpusValidationError(
                    f"unit {unit.unit_id}: narrative_id {unit.narrative_id!r} does "
                    f"not match parent {self.narrative_id!r}"
                )
            unit.validate()


def all_units(narratives: Iterable[Narrative]) -> list[FunctionalUnit]:
    return [u for n in narratives for u in n.units]


# ---------------------------------------------------------------------------
# Persistence: UTF-8 JSONL, one functional unit per line.
# ---------------------------------------------------------------------------

_RECORD_FIELDS = {"narrative_id", "subject_id", "unit_id", "tokens", "valence", "candidates"}
_CANDIDATE_FIELDS = {"start", "end", "carrier"}


def _parse_record(obj: dict, lineno: int) -> tuple[str, str, FunctionalUnit]:
    if not isinstance(obj, dict):
        raise CorpusFormatError(f"line {lineno}: record is not an object")
    keys = set(obj)
    if keys != _RECORD_FIELDS:
        missing = sorted(_RECORD_FIELDS - keys)
        extra = sorted(keys - _RECORD_FIELDS)
        raise CorpusFormatError(
            f"line {lineno}: bad record fields (missing={missing}, unexpected={extra})"
        )
    tokens = obj["tokens"]
    if not isinstance(tokens, list) or not all(isinstance(t, str) for t in tokens):
        raise CorpusFormatError(f"line {lineno}: tokens must be an array of strings")
    raw_cands = obj["candidates"]
    if not isinstance(raw_cands, list):
        raise CorpusFormatError(f"line {lineno}: candidates must be an array")
    candidates = []
    for c in raw_cands:
        if not isinstance(c, dict) or set(c) != _CANDIDATE_FIELDS:
            raise CorpusFormatError(f"line {lineno}: bad candidate record")
        if not isinstance(c["start"], int) or not isinstance(c["end"], int):
            raise CorpusFormatError(f"line {lineno}: candidate bounds must be integers")
        candidates.append(ECCandidate(start=c["start"], end=c["end"], carrier=c["carrier"]))
    unit = FunctionalUnit(
        unit_id=obj["unit_id"],
        narrative_id=obj["narrative_id"],
        tokens=list(tokens),
        valence=obj["valence"],
        candidates=candidates,
    )
    return obj["narrative_id"], obj["subject_id"], unit


def load_corpus(path: str | Path) -> list[Narrative]:
    """Load a JSONL corpus file, validating every invariant.

    Raises CorpusFormatError on malformed lines (naming the line number) and
    CorpusValidationError on invariant violations (naming the unit).
    """
    narratives: list[Narrative] = []
    by_id: dict[str, Narrative] = {}
    subjects: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusFormatError(f"line {lineno}: invalid JSON ({exc.msg})") from exc
            narrative_id, subject_id, unit = _parse_record(obj, lineno)
            if narrative_id not in by_id:
                narr = Narrative(narrative_id=narrative_id, subject_id=subject_id, units=[])
                by_id[narrative_id] = narr
                subjects[narrative_id] = subject_id
                narratives.append(narr)
            elif subjects[narrative_id] != subject_id:
                raise CorpusFormatError(
                    f"line {lineno}: narrative {narrative_id} has inconsistent subject_id"
                )
            by_id[narrative_id].units.append(unit)
    seen_units: set[str] = set()
    for narr in narratives:
        narr.validate()
        for unit in narr.units:
            if unit.unit_id in seen_units:
                raise CorpusValidationError(f"unit {unit.unit_id}: duplicate unit_id")
            seen_units.add(unit.unit_id)
    return narratives


def save_corpus(narratives: Sequence[Narrative], path: str | Path) -> None:
    """Write a corpus as JSONL. load_corpus(save_corpus(x)) == x, and the
    byte stream is deterministic for a given corpus."""
    for narr in narratives:
        narr.validate()
    with open(path, "w", encoding="utf-8") as fh:
        for narr in narratives:
            for unit in narr.units:
                record = {
                    "narrative_id": narr.narrative_id,
                    "subject_id": narr.subject_id,
                    "unit_id": unit.unit_id,
                    "tokens": unit.tokens,
                    "valence": unit.valence,
                    "candidates": [c.to_record() for c in unit.candidates],
                }
                fh.write(json.dumps(record, ensure_ascii=False) + "\n")


# ---------------------------------------------------------------------------
# Stratified splitting
# ---------------------------------------------------------------------------


@dataclass
class CorpusSplit:
    train: list[FunctionalUnit]
    validation: list[FunctionalUnit]
    test: list[FunctionalUnit]
    seed: int

    def as_tuple(self) -> tuple[list[FunctionalUnit], list[FunctionalUnit], list[FunctionalUnit]]:
        return (self.train, self.validation, self.test)


def _apportion(n: int, ratios: Sequence[float]) -> list[int]:
    """Largest-remainder apportionment of n items over the given ratios."""
    quotas = [n * r for r in ratios]
    counts = [math.floor(q) for q in quotas]
    leftover = n - sum(counts)
    order = sorted(range(len(ratios)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[:leftover]:
        counts[i] += 1
    return counts


def stratified_split(
    units: Sequence[FunctionalUnit],
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
    seed: int = 0,
) -> CorpusSplit:
    """Partition units into train/validation/test, stratified on valence.

    Deterministic for a fixed seed. Each valence class present in the corpus
    is represented in every split with a nonzero ratio; per-split class
    proportions track the global ones up to apportionment rounding.
    """
    if len(units) < 10:
        raise StratificationError(f"need at least 10 units, got {len(units)}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {ratios}")
    rng = Random(seed)
    parts: tuple[list[FunctionalUnit], ...] = ([], [], [])
    n_nonzero = sum(1 for r in ratios if r > 0)
    for label in VALENCE_LABELS:
        members = [u for u in units if u.valence == label]
        if not members:
            continue
        if len(members) < n_nonzero:
            raise StratificationError(
                f"class {label!r} has {len(members)} units; cannot populate "
                f"{n_nonzero} splits"
            )
        counts = _apportion(len(members), ratios)
        # Guarantee every nonzero-ratio split sees the class.
        for i, (c, r) in enumerate(zip(counts, ratios)):
            if r > 0 and c == 0:
                donor = max(range(len(counts)), key=lambda j: counts[j])
                counts[donor] -= 1
                counts[i] += 1
        rng.shuffle(members)
        offset = 0
        for part, count in zip(parts, counts):
            part.extend(members[offset : offset + count])
            offset += count
    return CorpusSplit(train=parts[0], validation=parts[1], test=parts[2], seed=seed)


# ---------------------------------------------------------------------------
# Statistics
# ---------------------------------------------------------------------------


@dataclass
class StatsReport:
    n_units: int
    n_negative: int
    n_positive: int
    n_neutral: int
    n_candidates: int
    n_carriers: int
    n_polar_candidates: int
    polar_fraction: float
    ec_rate_overall: float
    ec_rate_polar: float

    def as_dict(self) -> dict[str, float]:
        return {
            "n_units": self.n_units,
            "n_negative": self.n_negative,
            "n_positive": self.n_positive,
            "n_neutral": self.n_neutral,
            "n_candidates": self.n_candidates,
            "n_carriers": self.n_carriers,
            "n_polar_candidates": self.n_polar_candidates,
            "polar_fraction": self.polar_fraction,
            "ec_rate_overall": self.ec_rate_overall,
            "ec_rate_polar": self.ec_rate_polar,
        }

    def as_text(self) -> str:
        rows = self.as_dict()
        width = max(len(k) for k in rows)
        lines = []
        for key, value in rows.items():
            if isinstance(value, float):
                lines.append(f"{key:<{width}}  {value:.4f}")
            else:
                lines.append(f"{key:<{width}}  {value}")
        return "\n".join(lines)


def corpus_stats(units: Sequence[FunctionalUnit]) -> StatsReport:
    """Counts and rates over a list of units. Empty input yields zero counts."""
    n_by_label = {label: 0 for label in VALENCE_LABELS}
    n_candidates = 0
    n_carriers = 0
    n_polar_candidates = 0
    for unit in units:
        n_by_label[unit.valence] += 1
        n_candidates += len(unit.candidates)
        n_carriers += len(unit.carrier_candidates())
        if unit.is_polar:
            n_polar_candidates += len(unit.candidates)
    n_units = len(units)
    n_polar = n_by_label[NEGATIVE] + n_by_label[POSITIVE]
    return StatsReport(
        n_units=n_units,
        n_negative=n_by_label[NEGATIVE],
        n_positive=n_by_label[POSITIVE],
        n_neutral=n_by_label[NEUTRAL],
        n_candidates=n_candidates,
        n_carriers=n_carriers,
        n_polar_candidates=n_polar_candidates,
        polar_fraction=n_polar / n_units if n_units else 0.0,
        ec_rate_overall=n_carriers / n_candidates if n_candidates else 0.0,
        ec_rate_polar=n_carriers / n_polar_candidates if n_polar_candidates else 0.0,
    )


@dataclass
class IntersectionReport:
    """Distinct carrier surface forms by polarity and their intersection."""

    positive_forms: frozenset[str]
    negative_forms: frozenset[str]

    @property
    def intersection(self) -> frozenset[str]:
        return self.positive_forms & self.negative_forms

    @property
    def union(self) -> frozenset[str]:
        return self.positive_forms | self.negative_forms

    @property
    def overlap_ratio(self) -> float:
        """|I| / |P ∪ N|, 0 when no carriers exist."""
        return len(self.intersection) / len(self.union) if self.union else 0.0

    @property
    def share_of_positive(self) -> float:
        return len(self.intersection) / len(self.positive_forms) if self.positive_forms else 0.0

    @property
    def share_of_negative(self) -> float:
        return len(self.intersection) / len(self.negative_forms) if self.negative_forms else 0.0

    def as_dict(self) -> dict[str, float]:
        return {
            "n_positive_forms": len(self.positive_forms),
            "n_negative_forms": len(self.negative_forms),
            "n_intersection": len(self.intersection),
            "overlap_ratio": self.overlap_ratio,
            "share_of_positive": self.share_of_positive,
            "share_of_negative": self.share_of_negative,
        }


def ec_intersection_stats(units: Sequence[FunctionalUnit]) -> IntersectionReport:
    """Carrier surface forms appearing in positive units, in negative units,
    and the ratios of their intersection."""
    pos: set[str] = set()
    neg: set[str] = set()
    for unit in units:
        if not unit.is_polar:
            continue
        target = pos if unit.valence == POSITIVE else neg
        for cand in unit.carrier_candidates():
            target.add(unit.span_text(cand))
    return IntersectionReport(positive_forms=frozenset(pos), negative_forms=frozenset(neg))


# ---------------------------------------------------------------------------
# Candidate extraction for raw external text
# ---------------------------------------------------------------------------

# A candidate extractor proposes spans over a token list.
CandidateExtractor = Callable[[Sequence[str]], list[tuple[int, int]]]


@dataclass
class RuleBasedChunker:
    """Default extractor: maximal runs of tokens whose tag is noun-like or
    verb-like, per the supplied tag function. Runs are disjoint, so the
    leftmost-longest rule is satisfied by construction."""

    tag_fn: Callable[[str], str]
    chunk_tags: frozenset[str] = frozenset({"NOUN", "VERB"})

    def __call__(self, tokens: Sequence[str]) -> list[tuple[int, int]]:
        spans = []
        start = None
        for i, tok in enumerate(tokens):
            if self.tag_fn(tok) in self.chunk_tags:
                if start is None:
                    start = i
            elif start is not None:
                spans.append((start, i))
                start = None
        if start is not None:
            spans.append((start, len(tokens)))
        return spans


def extract_candidates(
    tokens: Sequence[str], chunker: CandidateExtractor
) -> list[tuple[int, int]]:
    """Run a candidate extractor and enforce the span contract: sorted,
    non-overlapping, in-bounds."""
    if not tokens:
        raise ValueError("tokens must be non-empty")
    spans = sorted(chunker(tokens))
    prev_end = 0
    for start, end in spans:
        if not (0 <= start < end <= len(tokens)):
            raise ValueError(f"extractor produced out-of-bounds span ({start},{end})")
        if start < prev_end:
            raise ValueError(f"extractor produced overlapping span ({start},{end})")
        prev_end = end
    return spans


# ---------------------------------------------------------------------------
# Synthetic corpus generation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GeneratorSpec:
    """Targets for the synthetic generator.

    The polarity fractions and the carrier rate are hit exactly up to
    rounding; the lexicon overlap is an expectation realized through a shared
    carrier sub-lexicon usable under both polarities. A non-zero
    distractor_rate plants one polar-lexicon word as a non-carrier candidate
    in that fraction of neutral units, so carrier labels rather than surface
    forms decide polarity there.
    """

    n_narratives: int = 40
    units_per_narrative: int = 12
    polar_fraction: float = 0.40
    positive_fraction_of_all: float = 0.13
    negative_fraction_of_all: float = 0.27
    ec_rate_in_polar: float = 0.447
    lexicon_overlap: float = 0.04
    neutral_vocab_size: int = 150
    positive_vocab_size: int = 45
    negative_vocab_size: int = 105
    mean_candidates_per_unit: float = 2.5
    distractor_rate: float = 0.0
    seed: int = 0

    @property
    def n_units(self) -> int:
        return self.n_narratives * self.units_per_narrative

    def shared_lexicon_size(self) -> int:
        """Number of carrier tokens usable under both polarities, derived so
        the expected |I| / |P ∪ N| matches the overlap target."""
        if self.lexicon_overlap == 0.0:
            return 0
        total = self.positive_vocab_size + self.negative_vocab_size
        return round(self.lexicon_overlap * total / (1.0 + self.lexicon_overlap))

    def validate(self) -> None:
        if self.n_narratives < 1 or self.units_per_narrative < 1:
            raise GeneratorSpecError("n_narratives and units_per_narrative must be >= 1")
        for name in (
            "polar_fraction",
            "positive_fraction_of_all",
            "negative_fraction_of_all",
            "ec_rate_in_polar",
            "lexicon_overlap",
            "distractor_rate",
        ):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise GeneratorSpecError(f"{name} must be in [0,1], got {value}")
        paired = self.positive_fraction_of_all + self.negative_fraction_of_all
        if abs(paired - self.polar_fraction) > 1e-9:
            raise GeneratorSpecError(
                "positive_fraction_of_all + negative_fraction_of_all must equal "
                f"polar_fraction ({paired} != {self.polar_fraction})"
            )
        if self.neutral_vocab_size < 1:
            raise GeneratorSpecError("neutral_vocab_size must be >= 1")
        if self.mean_candidates_per_unit < 1.0:
            raise GeneratorSpecError("mean_candidates_per_unit must be >= 1")
        if self.polar_fraction > 0:
            if self.ec_rate_in_polar <= 0:
                raise GeneratorSpecError(
                    "ec_rate_in_polar must be > 0 when polar units exist: every "
                    "polar unit carries at least one EC"
                )
            floor = 1.0 / self.mean_candidates_per_unit
            if self.ec_rate_in_polar < floor - 1e-9:
                raise GeneratorSpecError(
                    f"ec_rate_in_polar {self.ec_rate_in_polar} is below the "
                    f"one-carrier-per-polar-unit floor {floor:.3f}"
                )
            if self.positive_fraction_of_all > 0 and self.positive_vocab_size < 1:
                raise GeneratorSpecError("positive_vocab_size must be >= 1")
            if self.negative_fraction_of_all > 0 and self.negative_vocab_size < 1:
                raise GeneratorSpecError("negative_vocab_size must be >= 1")
        shared = self.shared_lexicon_size()
        if shared > min(self.positive_vocab_size, self.negative_vocab_size):
            raise GeneratorSpecError(
                "lexicon_overlap target requires a shared lexicon larger than a "
                "polarity lexicon"
            )


def _poisson(rng: Random, lam: float) -> int:
    if lam <= 0:
        return 0
    threshold = math.exp(-lam)
    k = 0
    p = 1.0
    while True:
        p *= rng.random()
        if p <= threshold:
            return k
        k += 1


def _build_lexicons(spec: GeneratorSpec) -> tuple[list[str], list[str], list[str]]:
    """Returns (filler, positive-usable carriers, negative-usable carriers)."""
    shared = [f"s{i:03d}" for i in range(spec.shared_lexicon_size())]
    pos_only = [f"p{i:03d}" for i in range(spec.positive_vocab_size - len(shared))]
    neg_only = [f"m{i:03d}" for i in range(spec.negative_vocab_size - len(shared))]
    filler = [f"f{i:03d}" for i in range(spec.neutral_vocab_size)]
    return filler, pos_only + shared, neg_only + shared


def generate_corpus(spec: GeneratorSpec) -> list[Narrative]:
    """Generate a corpus meeting the spec's targets. Deterministic per seed."""
    spec.validate()
    rng = Random(spec.seed)
    filler, pos_lexicon, neg_lexicon = _build_lexicons(spec)

    n_units = spec.n_units
    n_pos = round(spec.positive_fraction_of_all * n_units)
    n_neg = round(spec.negative_fraction_of_all * n_units)
    while n_pos + n_neg > n_units:
        n_neg -= 1
    labels = [POSITIVE] * n_pos + [NEGATIVE] * n_neg + [NEUTRAL] * (n_units - n_pos - n_neg)
    rng.shuffle(labels)

    cand_counts = [1 + _poisson(rng, spec.mean_candidates_per_unit - 1.0) for _ in range(n_units)]

    # Allocate carriers over polar units: one guaranteed per unit, the rest
    # spread over remaining candidate slots so the global rate is exact.
    polar_idx = [i for i, lab in enumerate(labels) if lab != NEUTRAL]
    carriers_per_unit = [0] * n_units
    if polar_idx:
        total_polar_cands = sum(cand_counts[i] for i in polar_idx)
        need = round(spec.ec_rate_in_polar * total_polar_cands)
        extra = need - len(polar_idx)
        if extra < 0:
            raise GeneratorSpecError(
                f"ec_rate_in_polar {spec.ec_rate_in_polar} yields {need} carriers "
                f"for {len(polar_idx)} polar units; at least one per unit is required"
            )
        slots = [i for i in polar_idx for _ in range(cand_counts[i] - 1)]
        rng.shuffle(slots)
        for i in polar_idx:
            carriers_per_unit[i] = 1
        for i in slots[:extra]:
            carriers_per_unit[i] += 1

    # Distractors: chosen neutral units get one polar word as a non-carrier
    # candidate, so text alone underdetermines both tasks on those units.
    distractors: dict[int, tuple[int, list[str]]] = {}
    if spec.distractor_rate > 0.0:
        neutral_idx = [i for i, lab in enumerate(labels) if lab == NEUTRAL]
        chosen = rng.sample(neutral_idx, round(spec.distractor_rate * len(neutral_idx)))
        for i in sorted(chosen):
            lexicon = pos_lexicon if rng.random() < 0.5 else neg_lexicon
            distractors[i] = (rng.randrange(cand_counts[i]), lexicon)

    narratives: list[Narrative] = []
    unit_index = 0
    for narr_no in range(spec.n_narratives):
        narrative_id = f"n{narr_no:04d}"
        subject_id = f"subj{narr_no // 11:03d}"
        units = []
        for unit_no in range(spec.units_per_narrative):
            label = labels[unit_index]
            k = cand_counts[unit_index]
            m = carriers_per_unit[unit_index]
            lexicon = pos_lexicon if label == POSITIVE else neg_lexicon
            distract = distractors.get(unit_index)
            flags = [CARRIER_YES] * m + [CARRIER_NO] * (k - m)
            rng.shuffle(flags)
            tokens: list[str] = []
            candidates: list[ECCandidate] = []
            for slot, flag in enumerate(flags):
                tokens.extend(rng.choice(filler) for _ in range(rng.randint(1, 2)))
                if flag == CARRIER_YES:
                    source = lexicon
                elif distract is not None and slot == distract[0]:
                    source = distract[1]
                else:
                    source = filler
                tokens.append(rng.choice(source))
                candidates.append(
                    ECCandidate(start=len(tokens) - 1, end=len(tokens), carrier=flag)
                )
            tokens.extend(rng.choice(filler) for _ in range(rng.randint(1, 2)))
            units.append(
                FunctionalUnit(
                    unit_id=f"{narrative_id}_u{unit_no:02d}",
                    narrative_id=narrative_id,
                    tokens=tokens,
                    valence=label,
                    candidates=candidates,
                )
            )
            unit_index += 1
        narratives.append(Narrative(narrative_id=narrative_id, subject_id=subject_id, units=units))

    for narr in narratives:
        narr.validate()
    return narratives


def spec_from_mapping(mapping: dict[str, str]) -> GeneratorSpec:
    """Build a GeneratorSpec from string key/value pairs (config-file style)."""
    defaults = GeneratorSpec()
    kwargs: dict[str, object] = {}
    for key, raw in mapping.items():
        if not hasattr(defaults, key):
            raise GeneratorSpecError(f"unknown generator field {key!r}")
        current = getattr(defaults, key)
        kwargs[key] = type(current)(raw)
    return replace(defaults, **kwargs)

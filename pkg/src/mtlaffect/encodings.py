"""Task encodings: the closed whitespace vocabulary, label codecs,
discriminative input assembly (with optional two-step text context), and
prompt rendering for the generative model.

Prompt layouts (one token per whitespace-separated surface form):
  valence:   fu ⊕ <val> v
  carrier:   fu ⊕ (<cand> span)* ⊕ (<EC_pred> e)*
  two-step:  fu ⊕ (<cand> span)* ⊕ both target blocks, order configurable
where v ∈ {0,1,2} and e ∈ {y,n} are label tokens.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .corpus import CARRIER_LABELS, VALENCE_LABELS, FunctionalUnit

PAD_TOKEN = "[PAD]"
UNK_TOKEN = "[UNK]"
CLS_TOKEN = "[CLS]"
SEP_TOKEN = "[SEP]"
VAL_SEP = "<val>"
CAND_SEP = "<cand>"
ECPRED_SEP = "<EC_pred>"

# Label-token tuples are ordered by class code, so an arg-max that breaks
# ties by first index breaks them by lowest code.
VALENCE_LABEL_TOKENS = ("0", "1", "2")
CARRIER_LABEL_TOKENS = ("n", "y")

VALENCE_CONTEXT_MARKER = "valence:"
EC_CONTEXT_MARKER = "EC:"
EC_CONTEXT_EMPTY = "none"

RESERVED_TOKENS = (
    PAD_TOKEN,
    UNK_TOKEN,
    CLS_TOKEN,
    SEP_TOKEN,
    VAL_SEP,
    CAND_SEP,
    ECPRED_SEP,
    "0",
    "1",
    "2",
    "y",
    "n",
    VALENCE_CONTEXT_MARKER,
    EC_CONTEXT_MARKER,
    EC_CONTEXT_EMPTY,
)

VAL_FIRST = "val_first"
EC_FIRST = "ec_first"
TWO_STEP_ORDERS = (VAL_FIRST, EC_FIRST)

PREDICTED = "predicted"
GROUND_TRUTH = "ground_truth"

LOSS_SCOPE_FULL = "full"
LOSS_SCOPE_TARGETS = "targets"


def encode_valence_label(name: str) -> int:
    """negative→0, positive→1, neutral→2."""
    try:
        return VALENCE_LABELS.index(name)
    except ValueError:
        raise ValueError(f"unknown valence label {name!r}") from None


def decode_valence_label(code: int) -> str:
    if not 0 <= code < len(VALENCE_LABELS):
        raise ValueError(f"unknown valence code {code}")
    return VALENCE_LABELS[code]


def encode_carrier_label(name: str) -> int:
    """no→0, yes→1."""
    try:
        return CARRIER_LABELS.index(name)
    except ValueError:
        raise ValueError(f"unknown carrier label {name!r}") from None


def decode_carrier_label(code: int) -> str:
    if not 0 <= code < len(CARRIER_LABELS):
        raise ValueError(f"unknown carrier code {code}")
    return CARRIER_LABELS[code]


class Vocabulary:
    """Closed token→id map. Reserved tokens occupy a fixed prefix; corpus
    tokens follow in sorted order so the assignment is reproducible across
    processes. Unknown tokens encode to the UNK id."""

    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[: len(RESERVED_TOKENS)]) != RESERVED_TOKENS:
            raise ValueError("vocabulary must start with the reserved token block")
        self._id_to_token = list(tokens)
        self._token_to_id = {t: i for i, t in enumerate(tokens)}
        if len(self._token_to_id) != len(self._id_to_token):
            raise ValueError("vocabulary contains duplicate tokens")

    @classmethod
    def build(cls, units: Iterable[FunctionalUnit]) -> "Vocabulary":
        seen = set()
        for unit in units:
            seen.update(unit.tokens)
        corpus_tokens = sorted(seen - set(RESERVED_TOKENS))
        return cls(list(RESERVED_TOKENS) + corpus_tokens)

    def __len__(self) -> int:
        return len(self._id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self._token_to_id

    @property
    def pad_id(self) -> int:
        return self._token_to_id[PAD_TOKEN]

    @property
    def unk_id(self) -> int:
        return self._token_to_id[UNK_TOKEN]

    @property
    def cls_id(self) -> int:
        return self._token_to_id[CLS_TOKEN]

    @property
    def sep_id(self) -> int:
        return self._token_to_id[SEP_TOKEN]

    def id(self, token: str) -> int:
        return self._token_to_id.get(token, self._token_to_id[UNK_TOKEN])

    def token(self, idx: int) -> str:
        return self._id_to_token[idx]

    def encode(self, tokens: Iterable[str]) -> list[int]:
        unk = self._token_to_id[UNK_TOKEN]
        return [self._token_to_id.get(t, unk) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self._id_to_token[i] for i in ids]

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for token in self._id_to_token:
                fh.write(token + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        with open(path, "r", encoding="utf-8") as fh:
            tokens = [line.rstrip("\n") for line in fh]
        return cls(tokens)


# ---------------------------------------------------------------------------
# Two-step textual context (discriminative path)
# ---------------------------------------------------------------------------


@dataclass
class ValenceContext:
    """First-step valence outcome injected into the second-step input."""

    code: int
    source: str = PREDICTED


@dataclass
class ECContext:
    """First-step carrier outcome: the surface texts of spans judged to be
    carriers. Empty list means no span was detected."""

    span_texts: list[str]
    source: str = PREDICTED


def context_tokens(context: ValenceContext | ECContext) -> list[str]:
    if isinstance(context, ValenceContext):
        decode_valence_label(context.code)  # reuse the domain check
        return [VALENCE_CONTEXT_MARKER, str(context.code)]
    if isinstance(context, ECContext):
        if not context.span_texts:
            return [EC_CONTEXT_MARKER, EC_CONTEXT_EMPTY]
        flat = [tok for text in context.span_texts for tok in text.split()]
        return [EC_CONTEXT_MARKER] + flat
    raise TypeError(f"unsupported context type {type(context).__name__}")


@dataclass
class DiscriminativeExample:
    input_ids: list[int]
    span_slices: list[tuple[int, int]]
    valence_target: int
    ec_targets: list[int]

    def check(self) -> None:
        assert len(self.span_slices) == len(self.ec_targets)
        for start, end in self.span_slices:
            assert 0 < start < end < len(self.input_ids)


def encode_discriminative(
    fu: FunctionalUnit,
    vocab: Vocabulary,
    context: ValenceContext | ECContext | None = None,
) -> DiscriminativeExample:
    """[CLS] fu-tokens (context-tokens)? [SEP], with span positions shifted
    past CLS. Context tokens sit after the FU, so span slices are identical
    with and without context."""
    if not fu.tokens:
        raise ValueError(f"unit {fu.unit_id}: cannot encode zero tokens")
    tokens = list(fu.tokens)
    if context is not None:
        tokens.extend(context_tokens(context))
    input_ids = [vocab.cls_id] + vocab.encode(tokens) + [vocab.sep_id]
    span_slices = [(c.start + 1, c.end + 1) for c in fu.candidates]
    return DiscriminativeExample(
        input_ids=input_ids,
        span_slices=span_slices,
        valence_target=encode_valence_label(fu.valence),
        ec_targets=[encode_carrier_label(c.carrier) for c in fu.candidates],
    )


# ---------------------------------------------------------------------------
# Generative prompts
# ---------------------------------------------------------------------------


@dataclass
class PromptSequence:
    """A rendered causal-LM training sequence.

    target_slots lists (position, allowed-label-token tuple) in sequence
    order; input_ids holds the gold label token at each slot position.
    loss_mask[t] == 1 means ids[t] is predicted (from the states at t-1).
    segment_spans names half-open id ranges that partition the sequence.
    """

    input_ids: list[int]
    loss_mask: list[int]
    target_slots: list[tuple[int, tuple[str, ...]]]
    segment_spans: dict[str, tuple[int, int]] = field(default_factory=dict)

    def slot_positions(self) -> list[int]:
        return [pos for pos, _ in self.target_slots]


def _finish_prompt(
    ids: list[int],
    slots: list[tuple[int, tuple[str, ...]]],
    segments: dict[str, tuple[int, int]],
    loss_scope: str,
) -> PromptSequence:
    if loss_scope == LOSS_SCOPE_FULL:
        mask = [0] + [1] * (len(ids) - 1)
    elif loss_scope == LOSS_SCOPE_TARGETS:
        mask = [0] * len(ids)
        for pos, _ in slots:
            mask[pos] = 1
    else:
        raise ValueError(f"unknown loss scope {loss_scope!r}")
    return PromptSequence(input_ids=ids, loss_mask=mask, target_slots=slots, segment_spans=segments)


def render_prompt_valence(
    fu: FunctionalUnit, vocab: Vocabulary, loss_scope: str = LOSS_SCOPE_FULL
) -> PromptSequence:
    if not fu.tokens:
        raise ValueError(f"unit {fu.unit_id}: cannot render zero tokens")
    ids = vocab.encode(fu.tokens)
    fu_span = (0, len(ids))
    label = VALENCE_LABEL_TOKENS[encode_valence_label(fu.valence)]
    ids += [vocab.id(VAL_SEP), vocab.id(label)]
    slots = [(len(ids) - 1, VALENCE_LABEL_TOKENS)]
    segments = {"fu": fu_span, "valence": (fu_span[1], len(ids))}
    return _finish_prompt(ids, slots, segments, loss_scope)


def _candidate_segment(fu: FunctionalUnit, vocab: Vocabulary, ids: list[int]) -> tuple[int, int]:
    start = len(ids)
    for cand in fu.candidates:
        ids.append(vocab.id(CAND_SEP))
        ids.extend(vocab.encode(fu.tokens[cand.start : cand.end]))
    return (start, len(ids))


def _ec_target_block(
    fu: FunctionalUnit, vocab: Vocabulary, ids: list[int]
) -> tuple[tuple[int, int], list[tuple[int, tuple[str, ...]]]]:
    start = len(ids)
    slots = []
    for cand in fu.candidates:
        ids.append(vocab.id(ECPRED_SEP))
        label = CARRIER_LABEL_TOKENS[encode_carrier_label(cand.carrier)]
        ids.append(vocab.id(label))
        slots.append((len(ids) - 1, CARRIER_LABEL_TOKENS))
    return (start, len(ids)), slots


def _val_target_block(
    fu: FunctionalUnit, vocab: Vocabulary, ids: list[int]
) -> tuple[tuple[int, int], list[tuple[int, tuple[str, ...]]]]:
    start = len(ids)
    label = VALENCE_LABEL_TOKENS[encode_valence_label(fu.valence)]
    ids += [vocab.id(VAL_SEP), vocab.id(label)]
    return (start, len(ids)), [(len(ids) - 1, VALENCE_LABEL_TOKENS)]


def render_prompt_ec(
    fu: FunctionalUnit, vocab: Vocabulary, loss_scope: str = LOSS_SCOPE_FULL
) -> PromptSequence:
    if not fu.candidates:
        raise ValueError(f"unit {fu.unit_id}: carrier prompt needs at least one candidate")
    ids = vocab.encode(fu.tokens)
    segments = {"fu": (0, len(ids))}
    segments["candidates"] = _candidate_segment(fu, vocab, ids)
    segments["ec"], slots = _ec_target_block(fu, vocab, ids)
    return _finish_prompt(ids, slots, segments, loss_scope)


def render_prompt_two_step(
    fu: FunctionalUnit,
    vocab: Vocabulary,
    order: str,
    loss_scope: str = LOSS_SCOPE_FULL,
) -> PromptSequence:
    """Four segments: FU, candidate list, then both target blocks in the
    given order (VAL_FIRST: valence before carriers; EC_FIRST: reversed)."""
    if order not in TWO_STEP_ORDERS:
        raise ValueError(f"unknown two-step order {order!r}")
    if not fu.candidates:
        raise ValueError(f"unit {fu.unit_id}: two-step prompt needs at least one candidate")
    ids = vocab.encode(fu.tokens)
    segments = {"fu": (0, len(ids))}
    segments["candidates"] = _candidate_segment(fu, vocab, ids)
    if order == VAL_FIRST:
        segments["valence"], val_slots = _val_target_block(fu, vocab, ids)
        segments["ec"], ec_slots = _ec_target_block(fu, vocab, ids)
        slots = val_slots + ec_slots
    else:
        segments["ec"], ec_slots = _ec_target_block(fu, vocab, ids)
        segments["valence"], val_slots = _val_target_block(fu, vocab, ids)
        slots = ec_slots + val_slots
    return _finish_prompt(ids, slots, segments, loss_scope)

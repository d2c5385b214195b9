"""Token vocabularies and episode encoding for the two task families.

An episode is a prompt of study examples followed by a query; the answer
token(s) come after the final colon and are stored as targets rather than in
the prompt. Category episodes answer with one label token, compositional
episodes with two integer coordinate tokens (x then y).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SEP = "<sep>"
COLON = ":"

DEFAULT_DIM_NAMES = ("length", "orientation") + tuple(f"dim{i}" for i in range(2, 200))
ABSTRACT_COLORS = tuple(f"color-{i}" for i in range(1, 6))
ABSTRACT_ANIMALS = tuple(f"animal-{i}" for i in range(1, 6))
ENGLISH_COLORS = ("red", "green", "blue", "yellow", "purple")
ENGLISH_ANIMALS = ("bear", "elephant", "alligator", "giraffe", "dolphin")


@dataclass(frozen=True)
class Vocab:
    """Token list plus its inverse map; `sep` and `colon` are special ids."""

    tokens: tuple[str, ...]
    sep: int
    colon: int

    def __post_init__(self):
        object.__setattr__(self, "index", {t: i for i, t in enumerate(self.tokens)})
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate token strings in vocabulary")

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, token: str) -> int:
        try:
            return self.index[token]
        except KeyError:
            raise ValueError(f"unknown token {token!r}") from None

    def ids(self, tokens) -> np.ndarray:
        return np.array([self.id(t) for t in tokens], dtype=np.int32)

    def decode(self, ids) -> list[str]:
        return [self.tokens[int(i)] for i in ids]


def category_vocab(n_dims: int = 200, n_values: int = 8, dim_names: tuple[str, ...] | None = None) -> Vocab:
    """Feature tokens "<dim>-<value>" for values 1..n_values, labels A/B, specials."""
    names = DEFAULT_DIM_NAMES if dim_names is None else dim_names
    if len(names) < n_dims:
        raise ValueError("not enough dimension names")
    feats = [f"{names[d]}-{v}" for d in range(n_dims) for v in range(1, n_values + 1)]
    tokens = (SEP, COLON, "A", "B", *feats)
    return Vocab(tokens=tokens, sep=0, colon=1)


def compositional_vocab(flavor: str = "abstract") -> Vocab:
    """Five color and five animal tokens plus coordinates 0..8 (rotation needs 0..8)."""
    if flavor == "abstract":
        colors, animals, sep = ABSTRACT_COLORS, ABSTRACT_ANIMALS, SEP
    elif flavor == "english":
        colors, animals, sep = ENGLISH_COLORS, ENGLISH_ANIMALS, ";"
    else:
        raise ValueError(f"unknown vocabulary flavor {flavor!r}")
    numbers = tuple(str(n) for n in range(9))
    tokens = (sep, COLON, *colors, *animals, *numbers)
    return Vocab(tokens=tokens, sep=0, colon=1)


@dataclass
class EncodedEpisode:
    """Prompt token ids, where the answers go, and what they should be.

    tokens ends at the query's colon. answer_positions index the slots right
    after it (len(tokens), len(tokens)+1, ...). example_spans are half-open
    [start, end) ranges, one per study example, tiling the pre-query region.
    """

    tokens: np.ndarray
    answer_positions: np.ndarray
    targets: np.ndarray
    example_spans: tuple[tuple[int, int], ...]

    def full_tokens(self) -> np.ndarray:
        """Prompt with the true answers appended (teacher forcing)."""
        return np.concatenate([self.tokens, self.targets])

    def scored_positions(self) -> np.ndarray:
        """Positions in full_tokens() whose logits predict the answer tokens."""
        return self.answer_positions - 1


def _check_spans(ep: EncodedEpisode) -> EncodedEpisode:
    cursor = 0
    for start, end in ep.example_spans:
        if start != cursor or end <= start:
            raise ValueError("example spans must tile the study region in order")
        cursor = end
    return ep


def encode_category_episode(study, query, answer: str, dims: tuple[int, int], vocab: Vocab) -> EncodedEpisode:
    """study: ordered (f1, f2, label) tuples; query: (f1, f2); dims: the task's dimension pair.

    Each study example renders as "<dim1>-<f1> <dim2>-<f2> : <label> <sep>";
    the query stops at the colon and the label is the single target.
    """
    toks: list[int] = []
    spans: list[tuple[int, int]] = []
    names = _category_dim_names(vocab)
    n1, n2 = names[dims[0]], names[dims[1]]
    for f1, f2, label in study:
        start = len(toks)
        toks += [vocab.id(f"{n1}-{f1}"), vocab.id(f"{n2}-{f2}"), vocab.colon, vocab.id(label), vocab.sep]
        spans.append((start, len(toks)))
    f1, f2 = query
    toks += [vocab.id(f"{n1}-{f1}"), vocab.id(f"{n2}-{f2}"), vocab.colon]
    n = len(toks)
    ep = EncodedEpisode(
        tokens=np.array(toks, dtype=np.int32),
        answer_positions=np.array([n], dtype=np.int64),
        targets=np.array([vocab.id(answer)], dtype=np.int32),
        example_spans=tuple(spans),
    )
    return _check_spans(ep)


def decode_category_episode(ep: EncodedEpisode, vocab: Vocab):
    """Inverse of encode_category_episode: (study, query, dims)."""
    names = _category_dim_names(vocab)
    name_to_dim = {n: d for d, n in enumerate(names)}

    def parse_feature(tok: str) -> tuple[int, int]:
        name, _, value = tok.rpartition("-")
        if name not in name_to_dim or not value.isdigit():
            raise ValueError(f"not a feature token: {tok!r}")
        return name_to_dim[name], int(value)

    toks = vocab.decode(ep.tokens)
    study = []
    dims = None
    for start, end in ep.example_spans:
        chunk = toks[start:end]
        if len(chunk) != 5 or chunk[2] != COLON or chunk[4] != SEP:
            raise ValueError("malformed study example")
        (d1, f1), (d2, f2) = parse_feature(chunk[0]), parse_feature(chunk[1])
        dims = (d1, d2)
        study.append((f1, f2, chunk[3]))
    qstart = ep.example_spans[-1][1] if ep.example_spans else 0
    qchunk = toks[qstart:]
    if len(qchunk) != 3 or qchunk[2] != COLON:
        raise ValueError("malformed query")
    (d1, f1), (d2, f2) = parse_feature(qchunk[0]), parse_feature(qchunk[1])
    return study, (f1, f2), dims if dims is not None else (d1, d2)


def encode_compositional_episode(study, query, answer: tuple[int, int], vocab: Vocab) -> EncodedEpisode:
    """study: ordered (color_tok, animal_tok, (x, y)) tuples; query: (color_tok, animal_tok).

    Renders "<color> <animal> : <x> <y> <sep>" per example; the two coordinate
    tokens of the query are the targets, x first.
    """
    toks: list[int] = []
    spans: list[tuple[int, int]] = []
    for color, animal, (x, y) in study:
        start = len(toks)
        toks += [vocab.id(color), vocab.id(animal), vocab.colon, vocab.id(str(x)), vocab.id(str(y)), vocab.sep]
        spans.append((start, len(toks)))
    toks += [vocab.id(query[0]), vocab.id(query[1]), vocab.colon]
    n = len(toks)
    ep = EncodedEpisode(
        tokens=np.array(toks, dtype=np.int32),
        answer_positions=np.array([n, n + 1], dtype=np.int64),
        targets=np.array([vocab.id(str(answer[0])), vocab.id(str(answer[1]))], dtype=np.int32),
        example_spans=tuple(spans),
    )
    return _check_spans(ep)


def decode_compositional_episode(ep: EncodedEpisode, vocab: Vocab):
    """Inverse of encode_compositional_episode."""
    toks = vocab.decode(ep.tokens)
    study = []
    for start, end in ep.example_spans:
        chunk = toks[start:end]
        if len(chunk) != 6 or chunk[2] != COLON or not (chunk[3].isdigit() and chunk[4].isdigit()):
            raise ValueError("malformed study example")
        study.append((chunk[0], chunk[1], (int(chunk[3]), int(chunk[4]))))
    qstart = ep.example_spans[-1][1] if ep.example_spans else 0
    qchunk = toks[qstart:]
    if len(qchunk) != 3 or qchunk[2] != COLON:
        raise ValueError("malformed query")
    return study, (qchunk[0], qchunk[1])


def decode_answer(token_ids, vocab: Vocab):
    """Map answer token ids to a label string or an (x, y) pair.

    One label token decodes to the label; two digit tokens decode to (x, y);
    anything else is an error.
    """
    toks = vocab.decode(token_ids)
    if len(toks) == 1 and toks[0] in ("A", "B"):
        return toks[0]
    if len(toks) == 2 and all(t.isdigit() for t in toks):
        return (int(toks[0]), int(toks[1]))
    raise ValueError(f"not an answer token sequence: {toks!r}")


def _category_dim_names(vocab: Vocab) -> tuple[str, ...]:
    # feature tokens start after the 4 fixed tokens, 8 values per dimension
    n_dims = (len(vocab.tokens) - 4) // 8
    return tuple(vocab.tokens[4 + d * 8].rpartition("-")[0] for d in range(n_dims))


def maskable_token_mask(ep: EncodedEpisode, vocab: Vocab) -> np.ndarray:
    """Boolean (T,) array marking study-example tokens that key-masking may hide.

    Separator tokens and everything from the query onward stay visible.
    """
    out = np.zeros(ep.tokens.shape[0], dtype=bool)
    for start, end in ep.example_spans:
        out[start:end] = True
    out &= ep.tokens != vocab.sep
    return out

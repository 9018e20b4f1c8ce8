"""Token vocabulary for the shape world plus the language-prompt words."""

from __future__ import annotations

import hashlib
from pathlib import Path

from .microworld import WorldConfig

PAD_TOKEN = "<pad>"
BOS_TOKEN = "<bos>"
EOS_TOKEN = "<eos>"
SPECIAL_TOKENS = (PAD_TOKEN, BOS_TOKEN, EOS_TOKEN)

# ids are fixed by the layout above; synthetic test vocabularies follow the
# same convention
PAD_ID = 0
BOS_ID = 1
EOS_ID = 2

ANSWER_PROMPT = ("the", "answer", "is")
REASON_PROMPT = ("the", "reason", "is")

# every word the question/rationale grammars can emit besides attributes
GRAMMAR_WORDS = (
    "what", "color", "is", "the", "object", "how", "many", "are",
    "there", "a", "because", "no", "yes", "?",
)


class VocabError(ValueError):
    pass


class Vocabulary:
    """Immutable token <-> id bijection.  PAD is always id 0."""

    def __init__(self, tokens: list[str]):
        if tokens[: len(SPECIAL_TOKENS)] != list(SPECIAL_TOKENS):
            raise VocabError(f"vocabulary must start with the special tokens {SPECIAL_TOKENS}")
        if len(set(tokens)) != len(tokens):
            dupes = sorted({t for t in tokens if tokens.count(t) > 1})
            raise VocabError(f"vocabulary contains duplicate tokens: {dupes}")
        self._tokens = tuple(tokens)
        self._ids = {tok: i for i, tok in enumerate(tokens)}

    @classmethod
    def for_world(cls, world: WorldConfig, extra_tokens: tuple[str, ...] = ()) -> "Vocabulary":
        words = set(GRAMMAR_WORDS)
        words.update(ANSWER_PROMPT)
        words.update(REASON_PROMPT)
        words.update(world.shapes)
        words.update(world.colors)
        words.update(world.sizes)
        words.update(str(n) for n in range(world.max_objects + 1))
        words.update(extra_tokens)
        return cls(list(SPECIAL_TOKENS) + sorted(words))

    def __len__(self) -> int:
        return len(self._tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self._tokens == other._tokens

    @property
    def pad_id(self) -> int:
        return PAD_ID

    @property
    def bos_id(self) -> int:
        return BOS_ID

    @property
    def eos_id(self) -> int:
        return EOS_ID

    def id_of(self, token: str) -> int:
        try:
            return self._ids[token]
        except KeyError:
            raise VocabError(f"token {token!r} is not in the vocabulary") from None

    def token_of(self, token_id: int) -> str:
        if not 0 <= token_id < len(self._tokens):
            raise VocabError(f"token id {token_id} is out of range")
        return self._tokens[token_id]

    def encode(self, tokens) -> list[int]:
        return [self.id_of(t) for t in tokens]

    def decode(self, ids) -> tuple[str, ...]:
        return tuple(self.token_of(int(i)) for i in ids)

    @property
    def answer_prompt_ids(self) -> list[int]:
        return self.encode(ANSWER_PROMPT)

    @property
    def reason_prompt_ids(self) -> list[int]:
        return self.encode(REASON_PROMPT)

    def to_text(self) -> str:
        return "".join(tok + "\n" for tok in self._tokens)

    def sha256(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        return cls(Path(path).read_text().splitlines())

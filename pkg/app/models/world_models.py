"""
Synthetic World Models
Token vocabulary, co-occurrence prior table, scenes and token labels
"""

from dataclasses import dataclass
from enum import Enum
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from app.core.exceptions import DomainError

# Special tokens
BOS = 0
EOS = 1
SEP = 2
NULL = 3  # empty image slot (also the black reference image)
GRAY = 4  # uniform reference image slot

# Query words; the scene and reference prompts use disjoint words
QUERY_WORD_BASE = 5
NUM_QUERY_WORDS = 8
SCENE_QUERY: Tuple[int, ...] = (BOS, 5, 6, 7)
REFERENCE_QUERY: Tuple[int, ...] = (BOS, 8, 9, 10)

OBJECT_BASE = QUERY_WORD_BASE + NUM_QUERY_WORDS

SPECIAL_NAMES = {BOS: "<bos>", EOS: "<eos>", SEP: "<sep>", NULL: "<null>", GRAY: "<gray>"}


class TokenLabel(str, Enum):
    """Ground-truth label of a generated token."""

    TRUTHFUL = "truthful"
    HALLUCINATORY = "hallucinatory"
    FUNCTION = "function"


@dataclass(frozen=True)
class ObjectVocabulary:
    """K object tokens after the special and query tokens, plus the prior table."""

    num_objects: int
    prior: np.ndarray  # (K, K), row-stochastic, zero diagonal
    neighbors: Tuple[int, ...]  # strongest prior neighbor per object index

    def __post_init__(self) -> None:
        if self.prior.shape != (self.num_objects, self.num_objects):
            raise DomainError("prior table shape does not match num_objects")
        if not np.allclose(self.prior.sum(axis=1), 1.0, atol=1e-9):
            raise DomainError("prior table rows must sum to 1")
        self.prior.setflags(write=False)

    @property
    def vocab_size(self) -> int:
        return OBJECT_BASE + self.num_objects

    @property
    def object_tokens(self) -> range:
        return range(OBJECT_BASE, OBJECT_BASE + self.num_objects)

    @property
    def start_prior(self) -> np.ndarray:
        """Prior row used before any object has been generated."""
        return np.full(self.num_objects, 1.0 / self.num_objects)

    def is_object(self, token: int) -> bool:
        return OBJECT_BASE <= token < self.vocab_size

    def is_known(self, token: int) -> bool:
        return 0 <= token < self.vocab_size

    def object_index(self, token: int) -> int:
        if not self.is_object(token):
            raise DomainError("not an object token", token=token)
        return token - OBJECT_BASE

    def object_token(self, index: int) -> int:
        if not 0 <= index < self.num_objects:
            raise DomainError("object index out of range", index=index)
        return OBJECT_BASE + index

    def name(self, token: int) -> str:
        if token in SPECIAL_NAMES:
            return SPECIAL_NAMES[token]
        if self.is_object(token):
            return f"obj_{self.object_index(token):02d}"
        if QUERY_WORD_BASE <= token < OBJECT_BASE:
            return f"q_{token - QUERY_WORD_BASE}"
        raise DomainError("unknown token id", token=token)


@dataclass(frozen=True)
class Scene:
    """Ground truth of one synthetic image."""

    seed: int
    present: Tuple[int, ...]  # sorted object token ids
    layout: Tuple[int, ...]  # one token id per image slot, NULL when empty
    excluded: Tuple[int, ...] = ()  # prior neighbors kept out of the scene

    def __post_init__(self) -> None:
        for token in self.present:
            if token not in self.layout:
                raise DomainError("present object has no image slot", token=token)
        if any(t != NULL and t not in self.present for t in self.layout):
            raise DomainError("layout slot carries an object outside the present set")

    @property
    def num_slots(self) -> int:
        return len(self.layout)

    @property
    def null_slots(self) -> int:
        return self.layout.count(NULL)

    def slots_of(self, token: int) -> List[int]:
        return [i for i, t in enumerate(self.layout) if t == token]

    def is_present(self, token: int) -> bool:
        return token in self.present

    def to_document(self, vocab: Optional[ObjectVocabulary] = None) -> Dict[str, Any]:
        doc: Dict[str, Any] = {
            "seed": self.seed,
            "present": list(self.present),
            "layout": list(self.layout),
            "excluded": list(self.excluded),
        }
        if vocab is not None:
            doc["present_names"] = [vocab.name(t) for t in self.present]
        return doc

    @classmethod
    def from_document(cls, doc: Dict[str, Any]) -> "Scene":
        return cls(
            seed=int(doc["seed"]),
            present=tuple(int(t) for t in doc["present"]),
            layout=tuple(int(t) for t in doc["layout"]),
            excluded=tuple(int(t) for t in doc.get("excluded", ())),
        )

"""Lowercase word-level tokenizer over the prompt corpora and target texts."""
import logging
from typing import Dict, Iterable, List

from src.exceptions import ConfigurationError, DomainError

logger = logging.getLogger(__name__)

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
SPECIAL_TOKENS = (PAD, BOS, EOS, UNK)

# Target texts of the target-text study
BENIGN_TARGET_TEXTS = ("unknown", "i am sorry", "not sure", "very good", "too late", "metaphor")
HARMFUL_TARGET_TEXTS = ("suicide", "bomb", "kidnap")
DEFAULT_TARGET_TEXTS = BENIGN_TARGET_TEXTS + HARMFUL_TARGET_TEXTS


def normalize_text(text: str) -> str:
    """Lowercase and collapse whitespace."""
    return " ".join(text.lower().split())


class Tokenizer:
    """Maps whitespace-delimited lowercase words to dense ids.

    Specials occupy ids 0-3; words follow in lexicographic order.
    """

    def __init__(self, words: Iterable[str]):
        ordered = list(SPECIAL_TOKENS) + sorted(set(words) - set(SPECIAL_TOKENS))
        self.vocab: Dict[str, int] = {token: i for i, token in enumerate(ordered)}
        self.id_to_token: List[str] = ordered
        self.pad_id = self.vocab[PAD]
        self.bos_id = self.vocab[BOS]
        self.eos_id = self.vocab[EOS]
        self.unk_id = self.vocab[UNK]

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __eq__(self, other) -> bool:
        return isinstance(other, Tokenizer) and self.id_to_token == other.id_to_token

    @property
    def special_ids(self) -> frozenset:
        return frozenset((self.pad_id, self.bos_id, self.eos_id, self.unk_id))

    def tokenize(self, text: str) -> List[int]:
        """Lowercased, whitespace-split ids; out-of-vocabulary words map to unk."""
        return [self.vocab.get(word, self.unk_id) for word in text.lower().split()]

    def detokenize(self, ids: Iterable[int]) -> str:
        """Join word tokens, dropping pad/bos/eos."""
        words = []
        for i in ids:
            if not 0 <= i < len(self.id_to_token):
                raise DomainError(f"Token id {i} outside vocabulary of size {len(self)}")
            if i in (self.pad_id, self.bos_id, self.eos_id):
                continue
            words.append(self.id_to_token[i])
        return " ".join(words)

    def covers(self, text: str) -> bool:
        """True when every word of `text` has its own id."""
        return all(word in self.vocab for word in text.lower().split())

    def target_ids(self, text: str) -> List[int]:
        """Language-model target: the text's tokens followed by eos."""
        return self.tokenize(text) + [self.eos_id]


def build_vocab(corpus: List[str], targets: List[str]) -> Tokenizer:
    """
    Build a tokenizer covering every word of the corpus and the target texts.

    Args:
        corpus: Prompt texts
        targets: Target texts (and any extra words that must be representable)

    Returns:
        Tokenizer with deterministic lexicographic ids

    Raises:
        ConfigurationError: If the corpus is empty
    """
    if not corpus or not any(text.strip() for text in corpus):
        raise ConfigurationError("Cannot build a vocabulary from an empty corpus")

    words = set()
    for text in list(corpus) + list(targets):
        words.update(text.lower().split())

    tokenizer = Tokenizer(words)
    logger.info(f"Built vocabulary with {len(tokenizer)} tokens")
    return tokenizer

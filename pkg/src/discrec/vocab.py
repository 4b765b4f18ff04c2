"""Token vocabulary shared by the tokenizer and the recommender.

Layout: PAD=0, BOS=1, EOS=2, then L blocks of K code tokens; the code for
level l (0-based) at index c maps to token 3 + l*K + c.
"""

from __future__ import annotations

from dataclasses import dataclass

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
NUM_SPECIALS = 3


@dataclass(frozen=True)
class TokenVocabulary:
    levels: int
    codebook_size: int

    @property
    def size(self) -> int:
        return NUM_SPECIALS + self.levels * self.codebook_size

    def code_token(self, level: int, code: int) -> int:
        if not 0 <= level < self.levels:
            raise ValueError(f"level {level} outside [0, {self.levels})")
        if not 0 <= code < self.codebook_size:
            raise ValueError(f"code {code} outside [0, {self.codebook_size})")
        return NUM_SPECIALS + level * self.codebook_size + code

    def level_and_code(self, token: int) -> tuple[int, int] | None:
        """Inverse of code_token; None for PAD/BOS/EOS."""
        if token < NUM_SPECIALS:
            return None
        if token >= self.size:
            raise ValueError(f"token {token} outside vocabulary of size {self.size}")
        offset = token - NUM_SPECIALS
        return divmod(offset, self.codebook_size)

    def code_token_range(self, level: int) -> range:
        start = NUM_SPECIALS + level * self.codebook_size
        return range(start, start + self.codebook_size)

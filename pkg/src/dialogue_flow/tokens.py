"""Stream token vocabulary.

Tokens are stored as small integers so streams can live in numpy arrays.
The special tokens come first, followed by one id per character of
``CHARSET``.
"""

import string

import numpy as np

from .errors import UnknownCharacter

PAD = 0
SILENCE = 1
SILENCE_SPK1 = 2
SILENCE_SPK2 = 3
PROMPT_SPK1 = 4
PROMPT_SPK2 = 5
SEP = 6

SPECIAL_NAMES = ("[P]", "[S]", "[S1]", "[S2]", "[Spk1]", "[Spk2]", "[SEP]")
N_SPECIAL = len(SPECIAL_NAMES)

CHARSET = string.ascii_lowercase + string.ascii_uppercase + string.digits + " .,!?;:'-\""
_CHAR_TO_ID = {c: N_SPECIAL + i for i, c in enumerate(CHARSET)}

VOCAB_SIZE = N_SPECIAL + len(CHARSET)
SILENCE_IDS = (SILENCE, SILENCE_SPK1, SILENCE_SPK2)
PROMPT_IDS = (PROMPT_SPK1, PROMPT_SPK2)


def char_id(c):
    try:
        return _CHAR_TO_ID[c]
    except KeyError:
        raise UnknownCharacter(f"character {c!r} is not in the vocabulary") from None


def encode_text(text):
    return [char_id(c) for c in text]


def is_char(token):
    return token >= N_SPECIAL


def char_of(token):
    return CHARSET[token - N_SPECIAL]


def char_index(token):
    """Position of a character token inside ``CHARSET``."""
    return token - N_SPECIAL


def token_name(token):
    token = int(token)
    if token < N_SPECIAL:
        return SPECIAL_NAMES[token]
    return char_of(token)


def token_from_name(name):
    if name in SPECIAL_NAMES:
        return SPECIAL_NAMES.index(name)
    return char_id(name)


def silence_mask(tokens):
    """Boolean mask of frames holding any silence variant."""
    tokens = np.asarray(tokens)
    return (tokens == SILENCE) | (tokens == SILENCE_SPK1) | (tokens == SILENCE_SPK2)


def active_mask(tokens):
    """Frames carrying speech content (a character or a continuation pad)."""
    tokens = np.asarray(tokens)
    return (tokens == PAD) | (tokens >= N_SPECIAL)

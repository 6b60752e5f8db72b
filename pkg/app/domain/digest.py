import hashlib
from pathlib import Path
from typing import Union

_BLOCK = 1 << 20


def sequence_digest(sequence: bytes) -> bytes:
    return hashlib.sha256(sequence).digest()


def file_digest(path: Union[str, Path]) -> str:
    h = hashlib.sha256()
    with open(path, 'rb') as fh:
        for block in iter(lambda: fh.read(_BLOCK), b''):
            h.update(block)
    return h.hexdigest()

"""Sealing and unsealing of everything that leaves a secure stage.

Keys are derived with HKDF-SHA256 from a 32-byte platform root (or, for the
``user_key`` policy, from the user's pre-shared key) with the policy's
serialization as ``info``. Payloads are cut into chunks and each chunk is
encrypted with AES-256-GCM under its own 96-bit nonce.

Sealed file layout (little-endian)::

    magic "HSSB" | format version u16 | policy kind u8 | policy digest 32 B
    | policy version u32 | chunk size u32
    then per chunk: nonce 12 B | ciphertext | tag 16 B

Every chunk authenticates the full header plus its own index and a final
flag, so header edits, reordering and truncation all fail authentication.
"""

import hashlib
import importlib.util
import io
import itertools
import logging
import os
import stat
import struct
import threading
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import BinaryIO, Iterable, Iterator, List, Optional, Union

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF
from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.domain.errors import (
    AuthFailure,
    ConfigError,
    MissingRoot,
    PolicyMismatch,
    SealFailure,
)

logger = logging.getLogger(__name__)

MAGIC = b'HSSB'
FORMAT_VERSION = 1
KEY_SIZE = 32
NONCE_SIZE = 12
TAG_SIZE = 16
DEFAULT_CHUNK_SIZE = 1 << 20

_HEADER = struct.Struct('<4sHB32sII')
_CHUNK_AAD = struct.Struct('<QB')
_ZERO_DIGEST = b'\x00' * 32

PathLike = Union[str, Path]


class PolicyKind(str, Enum):
    ENCLAVE_IDENTITY = 'enclave_identity'
    SIGNING_IDENTITY = 'signing_identity'
    USER_KEY = 'user_key'

    @property
    def code(self) -> int:
        return _KIND_CODES[self]


_KIND_CODES = {
    PolicyKind.ENCLAVE_IDENTITY: 1,
    PolicyKind.SIGNING_IDENTITY: 2,
    PolicyKind.USER_KEY: 3,
}
_KINDS_BY_CODE = {v: k for k, v in _KIND_CODES.items()}


class KeyPolicy(BaseModel):
    """Which identity a sealing key is bound to. Carries ids, never keys."""

    model_config = ConfigDict(frozen=True)

    kind: PolicyKind
    enclave_measure: Optional[bytes] = None
    signer_id: Optional[bytes] = None
    version: Optional[int] = Field(None, ge=0, lt=2**32)

    @model_validator(mode='after')
    def _fields_match_kind(self):
        if self.kind is PolicyKind.ENCLAVE_IDENTITY:
            ok = (
                self.enclave_measure is not None
                and self.signer_id is None
                and self.version is None
            )
        elif self.kind is PolicyKind.SIGNING_IDENTITY:
            ok = (
                self.signer_id is not None
                and self.version is not None
                and self.enclave_measure is None
            )
        else:
            ok = (
                self.enclave_measure is None
                and self.signer_id is None
                and self.version is None
            )
        if not ok:
            raise ValueError(f'fields do not match policy kind {self.kind.value}')
        for name in ('enclave_measure', 'signer_id'):
            value = getattr(self, name)
            if value is not None and len(value) != 32:
                raise ValueError(f'{name} must be a 32-byte digest')
        return self

    @classmethod
    def enclave_identity(cls, measure: bytes) -> 'KeyPolicy':
        return cls(kind=PolicyKind.ENCLAVE_IDENTITY, enclave_measure=measure)

    @classmethod
    def signing_identity(cls, signer_id: bytes, version: int) -> 'KeyPolicy':
        return cls(
            kind=PolicyKind.SIGNING_IDENTITY, signer_id=signer_id, version=version
        )

    @classmethod
    def user_key(cls) -> 'KeyPolicy':
        return cls(kind=PolicyKind.USER_KEY)

    @property
    def digest(self) -> bytes:
        return self.enclave_measure or self.signer_id or _ZERO_DIGEST

    @property
    def header_version(self) -> int:
        return self.version or 0

    def serialize(self) -> bytes:
        return b'sealmap-seal|%s|%s|%d' % (
            self.kind.value.encode(),
            self.digest.hex().encode(),
            self.header_version,
        )

    @classmethod
    def from_header(cls, code: int, digest: bytes, version: int) -> 'KeyPolicy':
        kind = _KINDS_BY_CODE.get(code)
        if kind is None:
            raise AuthFailure(f'sealed blob names unknown policy kind {code}')
        try:
            if kind is PolicyKind.ENCLAVE_IDENTITY:
                return cls.enclave_identity(digest)
            if kind is PolicyKind.SIGNING_IDENTITY:
                return cls.signing_identity(digest, version)
            return cls.user_key()
        except ValueError:
            raise AuthFailure('sealed blob header carries an invalid policy')

    def describe(self) -> str:
        if self.kind is PolicyKind.USER_KEY:
            return 'user_key'
        return f'{self.kind.value}:{self.digest.hex()[:12]}:v{self.header_version}'


def signer_id_for(name: str) -> bytes:
    return hashlib.sha256(b'sealmap-signer|' + name.encode()).digest()


def enclave_measure(module: str) -> bytes:
    """Digest standing in for MRENCLAVE: the stage module's source bytes."""
    spec = importlib.util.find_spec(module)
    if spec is None or spec.origin is None:
        raise ConfigError(f'cannot measure unknown module {module}')
    return hashlib.sha256(Path(spec.origin).read_bytes()).digest()


def derive_key(root: Optional[bytes], policy: KeyPolicy) -> bytes:
    if not root:
        raise MissingRoot('no key material loaded for sealing', stage='seal')
    if len(root) != KEY_SIZE:
        raise MissingRoot(f'key material must be {KEY_SIZE} bytes, got {len(root)}')
    hkdf = HKDF(
        algorithm=hashes.SHA256(),
        length=KEY_SIZE,
        salt=None,
        info=policy.serialize(),
    )
    return hkdf.derive(root)


# ----- nonces -----
class NonceSource:
    """Random 4-byte per-process prefix followed by an 8-byte counter."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.reset()

    def reset(self) -> None:
        self._prefix = os.urandom(4)
        self._counter = itertools.count()

    def next(self) -> bytes:
        with self._lock:
            n = next(self._counter)
        return self._prefix + n.to_bytes(8, 'big')


_nonces = NonceSource()
# a forked worker must not replay the parent's counter under the same prefix
os.register_at_fork(after_in_child=_nonces.reset)


# ----- blobs -----
@dataclass(frozen=True)
class SealedChunk:
    nonce: bytes
    ciphertext: bytes
    tag: bytes

    def to_bytes(self) -> bytes:
        return self.nonce + self.ciphertext + self.tag


@dataclass(frozen=True)
class SealedBlob:
    policy: KeyPolicy
    chunk_size: int
    chunks: List[SealedChunk]

    @property
    def header(self) -> bytes:
        return _pack_header(self.policy, self.chunk_size)

    aad = header

    @property
    def nonce(self) -> bytes:
        return self.chunks[0].nonce

    @property
    def ciphertext(self) -> bytes:
        return b''.join(c.ciphertext for c in self.chunks)

    @property
    def auth_tag(self) -> bytes:
        return self.chunks[-1].tag

    def to_bytes(self) -> bytes:
        return self.header + b''.join(c.to_bytes() for c in self.chunks)

    @classmethod
    def from_bytes(cls, data: bytes) -> 'SealedBlob':
        return read_blob(io.BytesIO(data))


def _pack_header(policy: KeyPolicy, chunk_size: int) -> bytes:
    return _HEADER.pack(
        MAGIC,
        FORMAT_VERSION,
        policy.kind.code,
        policy.digest,
        policy.header_version,
        chunk_size,
    )


def _chunk_aad(header: bytes, index: int, final: bool) -> bytes:
    return header + _CHUNK_AAD.pack(index, 1 if final else 0)


def _read_header(stream: BinaryIO):
    raw = stream.read(_HEADER.size)
    if len(raw) != _HEADER.size:
        raise AuthFailure('sealed blob is truncated inside its header')
    magic, version, code, digest, policy_version, chunk_size = _HEADER.unpack(raw)
    if magic != MAGIC:
        raise AuthFailure('not a sealed blob')
    if version != FORMAT_VERSION:
        raise AuthFailure(f'unsupported sealed blob version {version}')
    if chunk_size < 1:
        raise AuthFailure('sealed blob header has a zero chunk size')
    policy = KeyPolicy.from_header(code, digest, policy_version)
    return raw, policy, chunk_size


def _iter_records(stream: BinaryIO, chunk_size: int) -> Iterator[tuple]:
    """(index, nonce, ciphertext, tag, final) for each chunk on ``stream``."""
    full = NONCE_SIZE + chunk_size + TAG_SIZE
    pending = stream.read(full)
    if not pending:
        raise AuthFailure('sealed blob has no chunks')
    for index in itertools.count():
        following = stream.read(full)
        final = not following
        if len(pending) < NONCE_SIZE + TAG_SIZE or (not final and len(pending) != full):
            raise AuthFailure(f'sealed blob chunk {index} is truncated')
        yield (
            index,
            pending[:NONCE_SIZE],
            pending[NONCE_SIZE:-TAG_SIZE],
            pending[-TAG_SIZE:],
            final,
        )
        if final:
            return
        pending = following


def read_blob(stream: BinaryIO) -> SealedBlob:
    _, policy, chunk_size = _read_header(stream)
    chunks = [
        SealedChunk(nonce, ct, tag)
        for _, nonce, ct, tag, _ in _iter_records(stream, chunk_size)
    ]
    return SealedBlob(policy=policy, chunk_size=chunk_size, chunks=chunks)


def _split(data: bytes, chunk_size: int) -> List[bytes]:
    if not data:
        return [b'']
    return [data[i : i + chunk_size] for i in range(0, len(data), chunk_size)]


class SealedWriter:
    """Streams plaintext into a sealed file one chunk at a time.

    A full chunk is held back until more data arrives so that the last chunk
    written is always the one carrying the final flag.
    """

    def __init__(
        self, stream: BinaryIO, key: bytes, policy: KeyPolicy, chunk_size: int
    ) -> None:
        self._stream = stream
        self._aead = AESGCM(key)
        self._header = _pack_header(policy, chunk_size)
        self._chunk_size = chunk_size
        self._buffer = bytearray()
        self._index = 0
        self._closed = False
        stream.write(self._header)

    def write(self, data: bytes) -> int:
        if self._closed:
            raise SealFailure('write to a closed sealed file')
        self._buffer += data
        while len(self._buffer) > self._chunk_size:
            self._emit(bytes(self._buffer[: self._chunk_size]), final=False)
            del self._buffer[: self._chunk_size]
        return len(data)

    def _emit(self, plaintext: bytes, final: bool) -> None:
        nonce = _nonces.next()
        aad = _chunk_aad(self._header, self._index, final)
        sealed = self._aead.encrypt(nonce, plaintext, aad)
        self._stream.write(nonce + sealed)
        self._index += 1

    def close(self) -> None:
        if self._closed:
            return
        self._emit(bytes(self._buffer), final=True)
        self._buffer.clear()
        self._closed = True

    def __enter__(self) -> 'SealedWriter':
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        if exc_type is None:
            self.close()


# ----- key files -----
def generate_key() -> bytes:
    return AESGCM.generate_key(bit_length=256)


def write_key_file(path: PathLike, key: Optional[bytes] = None) -> bytes:
    key = key or generate_key()
    if len(key) != KEY_SIZE:
        raise ConfigError(f'keys must be {KEY_SIZE} bytes', path=str(path))
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    try:
        fd = os.open(target, os.O_WRONLY | os.O_CREAT | os.O_EXCL, 0o600)
    except FileExistsError:
        raise ConfigError('refusing to overwrite an existing key file', path=str(path))
    with os.fdopen(fd, 'wb') as fh:
        fh.write(key)
    logger.info('wrote key file %s', target)
    return key


def load_key_file(path: PathLike) -> bytes:
    target = Path(path)
    try:
        mode = target.stat().st_mode
        key = target.read_bytes()
    except FileNotFoundError:
        raise ConfigError('key file does not exist', path=str(path))
    if mode & (stat.S_IRWXG | stat.S_IRWXO):
        raise ConfigError(
            f'key file permissions {stat.filemode(mode)} are too open, expected 0600',
            path=str(path),
        )
    if len(key) != KEY_SIZE:
        raise ConfigError(
            f'key file holds {len(key)} bytes, expected {KEY_SIZE}', path=str(path)
        )
    return key


# ----- vault -----
class SealVault:
    def __init__(
        self,
        root: Optional[bytes],
        user_key: Optional[bytes] = None,
        *,
        chunk_size: int = DEFAULT_CHUNK_SIZE,
    ) -> None:
        if chunk_size < 1:
            raise ConfigError('seal chunk size must be positive')
        self.root = root
        self.user_key = user_key
        self.chunk_size = chunk_size

    def key_for(self, policy: KeyPolicy) -> bytes:
        if policy.kind is PolicyKind.USER_KEY:
            if not self.user_key:
                raise MissingRoot('no user key loaded', stage='seal')
            return derive_key(self.user_key, policy)
        return derive_key(self.root, policy)

    # in-memory
    def seal(self, plaintext: bytes, policy: KeyPolicy) -> SealedBlob:
        aead = AESGCM(self.key_for(policy))
        header = _pack_header(policy, self.chunk_size)
        parts = _split(plaintext, self.chunk_size)
        chunks = []
        for index, part in enumerate(parts):
            nonce = _nonces.next()
            aad = _chunk_aad(header, index, index == len(parts) - 1)
            sealed = aead.encrypt(nonce, part, aad)
            chunks.append(SealedChunk(nonce, sealed[:-TAG_SIZE], sealed[-TAG_SIZE:]))
        return SealedBlob(policy=policy, chunk_size=self.chunk_size, chunks=chunks)

    def unseal(self, blob: SealedBlob, policy: KeyPolicy) -> bytes:
        self._check_policy(blob.policy, policy)
        aead = AESGCM(self.key_for(policy))
        header = blob.header
        last = len(blob.chunks) - 1
        out = []
        for index, chunk in enumerate(blob.chunks):
            aad = _chunk_aad(header, index, index == last)
            out.append(
                self._decrypt(aead, chunk.nonce, chunk.ciphertext, chunk.tag, aad)
            )
        return b''.join(out)

    def seal_bytes(self, plaintext: bytes, policy: KeyPolicy) -> bytes:
        return self.seal(plaintext, policy).to_bytes()

    def unseal_bytes(self, data: bytes, policy: KeyPolicy) -> bytes:
        return b''.join(self.iter_unsealed(io.BytesIO(data), policy))

    # streaming
    def writer(self, stream: BinaryIO, policy: KeyPolicy) -> SealedWriter:
        return SealedWriter(stream, self.key_for(policy), policy, self.chunk_size)

    def seal_file(
        self,
        target: PathLike,
        policy: KeyPolicy,
        source: Union[bytes, Iterable[bytes], PathLike],
    ) -> Path:
        """Seal ``source`` (bytes, byte blocks or a file path) into ``target``."""
        target = Path(target)
        target.parent.mkdir(parents=True, exist_ok=True)
        tmp = target.with_name(target.name + '.tmp')
        try:
            with open(tmp, 'wb') as fh, self.writer(fh, policy) as w:
                for block in _blocks(source, self.chunk_size):
                    w.write(block)
            os.replace(tmp, target)
        except OSError as e:
            raise SealFailure(f'cannot write sealed file: {e}', path=str(target))
        finally:
            tmp.unlink(missing_ok=True)
        return target

    def iter_unsealed(
        self, source: Union[PathLike, BinaryIO], policy: KeyPolicy
    ) -> Iterator[bytes]:
        if isinstance(source, (str, Path)):
            try:
                with open(source, 'rb') as fh:
                    yield from self.iter_unsealed(fh, policy)
            except AuthFailure as e:
                raise e.attribute(path=str(source))
            except OSError as e:
                raise AuthFailure(f'cannot read sealed file: {e}', path=str(source))
            return
        header, found, chunk_size = _read_header(source)
        self._check_policy(found, policy)
        aead = AESGCM(self.key_for(policy))
        for index, nonce, ct, tag, final in _iter_records(source, chunk_size):
            aad = _chunk_aad(header, index, final)
            yield self._decrypt(aead, nonce, ct, tag, aad)

    def unseal_file(self, source: PathLike, policy: KeyPolicy) -> bytes:
        return b''.join(self.iter_unsealed(source, policy))

    def user_encrypt_input(self, plaintext: bytes) -> SealedBlob:
        return self.seal(plaintext, KeyPolicy.user_key())

    def user_encrypt_file(self, source: PathLike, target: PathLike) -> Path:
        return self.seal_file(target, KeyPolicy.user_key(), Path(source))

    @staticmethod
    def _check_policy(found: KeyPolicy, expected: KeyPolicy) -> None:
        if found != expected:
            raise PolicyMismatch(
                f'blob sealed under {found.describe()}, '
                f'opened with {expected.describe()}'
            )

    @staticmethod
    def _decrypt(aead: AESGCM, nonce, ciphertext, tag, aad) -> bytes:
        try:
            return aead.decrypt(nonce, ciphertext + tag, aad)
        except InvalidTag:
            raise AuthFailure('sealed data failed authentication')


def _blocks(source, size: int) -> Iterator[bytes]:
    if isinstance(source, (bytes, bytearray)):
        yield bytes(source)
        return
    if isinstance(source, (str, Path)):
        with open(source, 'rb') as fh:
            while True:
                block = fh.read(size)
                if not block:
                    return
                yield block
    yield from source

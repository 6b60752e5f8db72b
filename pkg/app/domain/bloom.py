"""Per-partition Bloom filter over b-mers.

The bit count ``m`` is always a power of two: any requested size is rounded
up so that bit positions are taken with a mask instead of a modulo. The k
positions come from double hashing, ``(h1 + i*h2) & (m - 1)``, where h1 and
h2 are the two 64-bit halves of a seeded 128-bit MurmurHash3. ``h2`` is
forced odd so the k probes never collapse onto one bit.

File layout (little-endian): magic ``HSBF``, version u16, partition_id u32,
m u64, k u32, seed u64, params_fingerprint 32 bytes, n_inserted u64, then
ceil(m/8) bytes of bits.
"""

import hashlib
import math
import struct
from pathlib import Path
from typing import BinaryIO, Iterable, Optional, Union

import bitarray
import mmh3

from app.domain.errors import FingerprintMismatch, MalformedInput

MAGIC = b'HSBF'
VERSION = 1
DEFAULT_SEED = 0x5EED_B100
DEFAULT_HASHES = 3
DEFAULT_BITS_PER_ELEMENT = 12

_HEADER = struct.Struct('<4sHIQIQ32sQ')


def next_power_of_two(n: int) -> int:
    return 1 if n <= 1 else 1 << (n - 1).bit_length()


def params_fingerprint(
    reference_id: str, b: int, l: int, m: int, k: int  # noqa: E741
) -> bytes:
    """Digest naming a filter set; a change in any input invalidates the files."""
    material = f'{reference_id}|b={b}|l={l}|m={m}|k={k}'.encode()
    return hashlib.sha256(material).digest()


def fpr_estimate(m: int, k: int, n: int) -> float:
    """Exact closed form ``(1 - (1 - 1/m)^(k*n))^k``."""
    if n <= 0:
        return 0.0
    return (1.0 - (1.0 - 1.0 / m) ** (k * n)) ** k


def fpr_approximation(m: int, k: int, n: int) -> float:
    """``(1 - exp(-k/r))^k`` with ``r = m/n`` bits per element."""
    if n <= 0:
        return 0.0
    return (1.0 - math.exp(-k * n / m)) ** k


def optimal_hashes(m: int, n: int) -> int:
    if n <= 0:
        return 1
    return max(1, round(m / n * math.log(2)))


class BloomFilter:
    def __init__(
        self,
        m: int,
        k: int = DEFAULT_HASHES,
        *,
        seed: int = DEFAULT_SEED,
        partition_id: int = 0,
        params_fingerprint: bytes = b'\x00' * 32,
    ) -> None:
        if k < 1:
            raise ValueError('k must be at least 1')
        self.m = next_power_of_two(max(1, m))
        self.k = k
        self.seed = seed
        self.partition_id = partition_id
        self.params_fingerprint = params_fingerprint
        self.n_inserted = 0
        self._mask = self.m - 1
        self.bits = bitarray.bitarray(self.m, endian='little')
        self.bits.setall(False)

    @classmethod
    def for_capacity(
        cls,
        n: int,
        *,
        bits_per_element: int = DEFAULT_BITS_PER_ELEMENT,
        k: int = DEFAULT_HASHES,
        **kwargs,
    ) -> 'BloomFilter':
        return cls(max(1, n) * bits_per_element, k, **kwargs)

    def _positions(self, element: bytes):
        h1, h2 = mmh3.hash64(element, self.seed, signed=False)
        h2 |= 1
        mask = self._mask
        return [(h1 + i * h2) & mask for i in range(self.k)]

    def insert(self, element: bytes) -> 'BloomFilter':
        if not element:
            raise ValueError('cannot insert an empty element')
        for pos in self._positions(element):
            self.bits[pos] = True
        self.n_inserted += 1
        return self

    def update(self, elements: Iterable[bytes]) -> 'BloomFilter':
        for element in elements:
            self.insert(element)
        return self

    def test(self, element: bytes) -> bool:
        bits = self.bits
        return all(bits[pos] for pos in self._positions(element))

    __contains__ = test

    def popcount(self) -> int:
        return self.bits.count(1)

    def fill_ratio(self) -> float:
        return self.popcount() / self.m

    def expected_fpr(self) -> float:
        return fpr_estimate(self.m, self.k, self.n_inserted)

    def check_fingerprint(self, expected: bytes) -> None:
        if expected != self.params_fingerprint:
            raise FingerprintMismatch(
                f'bloom filter for partition {self.partition_id} was built with '
                'different reference/b/l parameters',
                partition_id=self.partition_id,
            )

    # ----- serialization -----
    def to_bytes(self) -> bytes:
        header = _HEADER.pack(
            MAGIC,
            VERSION,
            self.partition_id,
            self.m,
            self.k,
            self.seed,
            self.params_fingerprint,
            self.n_inserted,
        )
        return header + self.bits.tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> 'BloomFilter':
        if len(data) < _HEADER.size:
            raise MalformedInput('bloom filter file is truncated')
        magic, version, pid, m, k, seed, fp, n = _HEADER.unpack_from(data)
        if magic != MAGIC or version != VERSION:
            raise MalformedInput('not a bloom filter file')
        payload = data[_HEADER.size :]
        if len(payload) != (m + 7) // 8:
            raise MalformedInput('bloom filter bit data has the wrong length')
        bf = cls(m, k, seed=seed, partition_id=pid, params_fingerprint=fp)
        bf.bits = bitarray.bitarray(endian='little')
        bf.bits.frombytes(payload)
        del bf.bits[m:]
        bf.n_inserted = n
        return bf

    def save(self, target: Union[str, Path, BinaryIO]) -> None:
        if isinstance(target, (str, Path)):
            Path(target).write_bytes(self.to_bytes())
        else:
            target.write(self.to_bytes())

    @classmethod
    def load(cls, path: Union[str, Path], expected_fingerprint: Optional[bytes] = None):
        bf = cls.from_bytes(Path(path).read_bytes())
        if expected_fingerprint is not None:
            bf.check_fingerprint(expected_fingerprint)
        return bf

    def __eq__(self, other) -> bool:
        if not isinstance(other, BloomFilter):
            return NotImplemented
        return self.to_bytes() == other.to_bytes()

    def __repr__(self) -> str:
        return (
            f'BloomFilter(partition={self.partition_id}, m={self.m}, k={self.k}, '
            f'n={self.n_inserted})'
        )

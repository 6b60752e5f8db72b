"""Enclave overhead model.

Secure workers are ordinary processes; this model turns a measured or
assumed compute time into what the same work would cost inside an enclave:

* initialization grows linearly with the configured heap,
* each ECall / OCall crossing has a fixed cost,
* compute slows down by a constant factor once the working set no longer
  fits in the usable enclave page cache (a step, not a ramp).
"""

import logging
from pathlib import Path
from typing import Union

from dotenv import dotenv_values
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from app.domain.errors import ConfigError

logger = logging.getLogger(__name__)

CALLS_PER_UNIT = 1_000_000
# one OCall per page moved across the boundary
IO_PAGE_BYTES = 4096


class EnclaveProfile(BaseModel):
    model_config = ConfigDict(frozen=True)

    heap_mb: float = Field(1024, ge=0)
    init_cost_per_mb: float = Field(0.04, ge=0)
    ocall_cost: float = Field(5.27, ge=0)
    ecall_cost: float = Field(4.65, ge=0)
    epc_usable_mb: float = Field(90, ge=0)
    paging_slowdown: float = Field(100, ge=1)


def load_profile(path: Union[str, Path]) -> EnclaveProfile:
    """Read a key=value profile; unknown keys are rejected."""
    target = Path(path)
    if not target.exists():
        raise ConfigError('enclave profile not found', path=str(path))
    values = {
        k.strip().lower(): v for k, v in dotenv_values(target).items() if v is not None
    }
    unknown = set(values) - set(EnclaveProfile.model_fields)
    if unknown:
        raise ConfigError(
            f'unknown enclave profile keys: {", ".join(sorted(unknown))}',
            path=str(path),
        )
    try:
        return EnclaveProfile(**values)
    except ValidationError as e:
        raise ConfigError(f'invalid enclave profile: {e}', path=str(path))


def init_time(profile: EnclaveProfile, heap_mb: float) -> float:
    return heap_mb * profile.init_cost_per_mb


def call_time(profile: EnclaveProfile, n_ecalls: int, n_ocalls: int) -> float:
    return (
        n_ecalls * profile.ecall_cost + n_ocalls * profile.ocall_cost
    ) / CALLS_PER_UNIT


def paging_factor(profile: EnclaveProfile, working_set_mb: float) -> float:
    return profile.paging_slowdown if working_set_mb > profile.epc_usable_mb else 1.0


def compute_time(
    profile: EnclaveProfile, working_set_mb: float, base_time: float
) -> float:
    return base_time * paging_factor(profile, working_set_mb)


def model_secure_overhead(
    profile: EnclaveProfile,
    heap_mb: float,
    n_ecalls: int,
    n_ocalls: int,
    working_set_mb: float,
    base_time: float,
) -> float:
    """Modeled seconds for ``base_time`` of work run inside an enclave."""
    return (
        init_time(profile, heap_mb)
        + call_time(profile, n_ecalls, n_ocalls)
        + compute_time(profile, working_set_mb, base_time)
    )


def io_ocalls(nbytes: int) -> int:
    return -(-nbytes // IO_PAGE_BYTES)

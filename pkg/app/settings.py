import logging
from pathlib import Path
from typing import Optional, Union

from pydantic import Field, ValidationError, field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from app.adapters.aligner.constants import (
    DEFAULT_BAND_WIDTH,
    DEFAULT_GAP_EXTEND,
    DEFAULT_GAP_OPEN,
    DEFAULT_MATCH,
    DEFAULT_MAX_SEED_OCCURRENCES,
    DEFAULT_MIN_REPORT_SCORE,
    DEFAULT_MISMATCH,
    EXTERNAL_TIMEOUT_S,
    AlignerKind,
)
from app.domain.bloom import DEFAULT_BITS_PER_ELEMENT, DEFAULT_HASHES, DEFAULT_SEED
from app.domain.errors import ConfigError
from app.services.scheduler import ExecutorKind

ENV_PREFIX = 'SEALMAP_'


class Settings(BaseSettings):
    """Process configuration.

    Every field can be set as ``SEALMAP_<FIELD>`` in the environment or in a
    key=value config file; keyword arguments (CLI flags) win over both.
    """

    model_config = SettingsConfigDict(
        env_prefix=ENV_PREFIX, env_file='.env', extra='ignore'
    )

    WORKDIR: Path = Path('work')
    PARTITIONS: int = Field(8, ge=1)
    READ_LENGTH: int = Field(100, ge=1)
    OVERLAP: Optional[int] = Field(None, ge=0)

    # dispatch
    BMER: int = Field(25, ge=1)
    BMER_OVERLAP: int = Field(15, ge=0)
    DISPATCH_READ_STRIDE: Optional[int] = Field(None, ge=1)
    BLOOM_BITS: Optional[int] = Field(None, ge=1)
    BLOOM_BITS_PER_ELEMENT: int = Field(DEFAULT_BITS_PER_ELEMENT, ge=1)
    BLOOM_HASHES: int = Field(DEFAULT_HASHES, ge=1)
    BLOOM_SEED: int = DEFAULT_SEED

    # alignment
    SEED_LEN: int = Field(16, ge=1)
    MATCH: int = DEFAULT_MATCH
    MISMATCH: int = DEFAULT_MISMATCH
    GAP_OPEN: int = DEFAULT_GAP_OPEN
    GAP_EXTEND: int = DEFAULT_GAP_EXTEND
    BAND_WIDTH: int = Field(DEFAULT_BAND_WIDTH, ge=1)
    MIN_REPORT_SCORE: int = DEFAULT_MIN_REPORT_SCORE
    MAX_SEED_OCCURRENCES: int = Field(DEFAULT_MAX_SEED_OCCURRENCES, ge=1)
    ALIGNER: AlignerKind = AlignerKind.BUILTIN
    ALIGNER_CMD: Optional[str] = None
    ALIGNER_TIMEOUT_S: float = Field(EXTERNAL_TIMEOUT_S, gt=0)

    # execution
    SECURE_WORKERS: int = Field(2, ge=1)
    NONSECURE_WORKERS: int = Field(2, ge=0)
    EXECUTOR: ExecutorKind = ExecutorKind.PROCESS
    PROFILE_FILE: Optional[Path] = None

    # sealing
    ROOT_KEY_FILE: Path = Path('keys/root.key')
    USER_KEY_FILE: Path = Path('keys/user.key')
    SIGNER_NAME: str = 'sealmap'
    SIGNER_VERSION: int = Field(1, ge=0)
    SEAL_CHUNK_SIZE: int = Field(1 << 20, ge=1)

    LOG_LEVEL: str = 'INFO'

    # bench
    BENCH_MODEL_REFERENCE_MB: float = Field(3200.0, gt=0)
    BENCH_READS: int = Field(2000, ge=1)
    BENCH_GENOME_LENGTH: int = Field(200_000, ge=1)
    BENCH_SEED: int = 7

    @field_validator(
        'OVERLAP',
        'DISPATCH_READ_STRIDE',
        'BLOOM_BITS',
        'ALIGNER_CMD',
        'PROFILE_FILE',
        mode='before',
    )
    def allow_blank(cls, v):
        if v == '' or v is None:
            return None
        return v

    @field_validator('LOG_LEVEL', mode='before')
    def upper_log_level(cls, v):
        level = str(v).strip().upper()
        if not isinstance(logging.getLevelName(level), int):
            raise ValueError(f'unknown log level {v!r}')
        return level

    @property
    def effective_overlap(self) -> int:
        return self.READ_LENGTH - 1 if self.OVERLAP is None else self.OVERLAP

    def show(self) -> str:
        """Every effective setting as ``KEY=value`` lines."""
        lines = []
        for name in type(self).model_fields:
            value = getattr(self, name)
            if value is None:
                value = ''
            elif hasattr(value, 'value'):
                value = value.value
            lines.append(f'{name}={value}')
        return '\n'.join(lines)


def load_settings(
    config_file: Optional[Union[str, Path]] = None, **overrides
) -> Settings:
    """Settings with flags > environment > config file > defaults.

    Overrides set to ``None`` are treated as "flag not given".
    """
    given = {k: v for k, v in overrides.items() if v is not None}
    try:
        if config_file is None:
            return Settings(**given)
        path = Path(config_file)
        if not path.is_file():
            raise ConfigError('config file not found', path=str(path))
        return Settings(_env_file=path, **given)
    except ValidationError as e:
        path = str(config_file) if config_file is not None else None
        raise ConfigError(f'invalid settings: {e}', path=path)


settings = Settings()

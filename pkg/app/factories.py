import logging
from pathlib import Path
from typing import Optional, Tuple

from pydantic import ValidationError

from app.adapters.aligner.constants import AlignerKind
from app.adapters.aligner.external import ExternalAligner
from app.adapters.aligner.seed_extend import SeedExtendAligner
from app.domain.errors import ConfigError, MissingRoot
from app.domain.models import DispatchParams, ScoringScheme
from app.domain.ports.aligner import AlignerPort
from app.services.cost_model import EnclaveProfile, load_profile
from app.services.pipeline import StageContext
from app.services.scheduler import ExecutorKind
from app.services.sealvault import SealVault, load_key_file
from app.settings import Settings, settings

logger = logging.getLogger(__name__)


def configure(loaded: Settings) -> Settings:
    """Make ``loaded`` the settings every factory below reads."""
    global settings
    settings = loaded
    return loaded


def make_scoring() -> ScoringScheme:
    try:
        return ScoringScheme(
            match=settings.MATCH,
            mismatch=settings.MISMATCH,
            gap_open=settings.GAP_OPEN,
            gap_extend=settings.GAP_EXTEND,
            band_width=settings.BAND_WIDTH,
            min_report_score=settings.MIN_REPORT_SCORE,
        )
    except ValidationError as e:
        raise ConfigError(f'invalid scoring scheme: {e}', stage='align')


def make_dispatch_params(partitions: Optional[int] = None) -> DispatchParams:
    try:
        return DispatchParams(
            b=settings.BMER,
            l=settings.BMER_OVERLAP,
            p=partitions or settings.PARTITIONS,
            read_stride=settings.DISPATCH_READ_STRIDE,
        )
    except ValidationError as e:
        raise ConfigError(f'invalid dispatch parameters: {e}', stage='dispatch')


def make_aligner() -> AlignerPort:
    kind = AlignerKind(settings.ALIGNER)
    if kind is AlignerKind.EXTERNAL:
        if not settings.ALIGNER_CMD:
            raise ConfigError('ALIGNER_CMD is required for aligner=external')
        return ExternalAligner(
            settings.ALIGNER_CMD, timeout=settings.ALIGNER_TIMEOUT_S
        )
    return SeedExtendAligner(make_scoring(), settings.MAX_SEED_OCCURRENCES)


def make_profile(path: Optional[Path] = None) -> EnclaveProfile:
    """The profile file if one is configured, the built-in defaults otherwise."""
    target = path or settings.PROFILE_FILE
    if target is None:
        return EnclaveProfile()
    return load_profile(target)


def make_executor_kind() -> ExecutorKind:
    try:
        return ExecutorKind(settings.EXECUTOR)
    except ValueError:
        raise ConfigError(f'unknown executor {settings.EXECUTOR!r}')


def load_keys() -> Tuple[bytes, bytes]:
    """Platform root key and user key from their key files."""
    root_file = Path(settings.ROOT_KEY_FILE)
    if not root_file.exists():
        raise MissingRoot(
            'platform root key not found, run `sealmap keygen` first',
            path=str(root_file),
        )
    root = load_key_file(root_file)
    user_file = Path(settings.USER_KEY_FILE)
    if not user_file.exists():
        raise ConfigError(
            'user key not found, run `sealmap keygen` first', path=str(user_file)
        )
    return root, load_key_file(user_file)


def make_vault() -> SealVault:
    root, user = load_keys()
    return SealVault(root, user, chunk_size=settings.SEAL_CHUNK_SIZE)


def make_stage_context(
    reference: Path,
    *,
    partitions: Optional[int] = None,
    with_keys: bool = True,
    paired: bool = False,
) -> StageContext:
    p = partitions or settings.PARTITIONS
    if p < 1:
        raise ConfigError(f'partitions must be at least 1, got {p}')
    root, user = load_keys() if with_keys else (None, None)
    # surfaces a missing command before any stage runs
    make_aligner()
    try:
        return StageContext(
            workdir=Path(settings.WORKDIR),
            reference=Path(reference),
            partitions=p,
            overlap=settings.effective_overlap,
            dispatch=make_dispatch_params(p),
            seed_length=settings.SEED_LEN,
            bloom_bits=settings.BLOOM_BITS,
            bloom_hashes=settings.BLOOM_HASHES,
            bloom_seed=settings.BLOOM_SEED,
            bits_per_element=settings.BLOOM_BITS_PER_ELEMENT,
            scoring=make_scoring(),
            max_seed_occurrences=settings.MAX_SEED_OCCURRENCES,
            aligner=AlignerKind(settings.ALIGNER),
            aligner_cmd=settings.ALIGNER_CMD,
            aligner_timeout=settings.ALIGNER_TIMEOUT_S,
            paired=paired,
            signer_name=settings.SIGNER_NAME,
            signer_version=settings.SIGNER_VERSION,
            seal_chunk_size=settings.SEAL_CHUNK_SIZE,
            root_key=root,
            user_key=user,
        )
    except ValidationError as e:
        raise ConfigError(f'invalid pipeline settings: {e}')

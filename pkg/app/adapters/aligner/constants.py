from enum import Enum


class AlignerKind(str, Enum):
    BUILTIN = 'builtin'
    EXTERNAL = 'external'


# BWA-like penalty shape
DEFAULT_MATCH = 1
DEFAULT_MISMATCH = -4
DEFAULT_GAP_OPEN = -6
DEFAULT_GAP_EXTEND = -1
DEFAULT_BAND_WIDTH = 15
DEFAULT_MIN_REPORT_SCORE = 30
DEFAULT_MAX_SEED_OCCURRENCES = 1000

EXTERNAL_TIMEOUT_S = 3600.0

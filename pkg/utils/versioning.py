"""
Version-string helpers used to decide whether a stored instance document can be read.
"""
from utils.log_utils import get_logger

logger = get_logger(__name__)


def parse_version(version):
    """
    Parse "v1.2.3-alpha" style strings into a list of ints ([1, 2, 3]).

    Handles an optional leading 'v', pre-release/build tags and surrounding whitespace.

    Returns:
        list[int] | None: Components, or None when the string is not a version
    """
    if not version:
        return None
    try:
        clean = str(version).strip().lstrip('v').split('-')[0].split('+')[0]
        return list(map(int, clean.split('.')))
    except (ValueError, AttributeError) as e:
        logger.warning(f"Could not parse version string {version!r}: {e}")
        return None


def _padded(v1_parts, v2_parts):
    max_len = max(len(v1_parts), len(v2_parts))
    return (v1_parts + [0] * (max_len - len(v1_parts)),
            v2_parts + [0] * (max_len - len(v2_parts)))


def is_newer_version(version1, version2):
    """
    True if version1 is strictly newer than version2 ("1.0" equals "1.0.0").
    Unparseable input compares as not newer.
    """
    v1_parts = parse_version(version1)
    v2_parts = parse_version(version2)
    if v1_parts is None or v2_parts is None:
        return False
    v1_parts, v2_parts = _padded(v1_parts, v2_parts)
    return v1_parts > v2_parts


def is_compatible(stored, supported):
    """
    A stored schema is readable when it shares the supported major version and is not newer.

    Args:
        stored (str): Version written into the document
        supported (str): Version this build writes

    Returns:
        bool
    """
    stored_parts = parse_version(stored)
    supported_parts = parse_version(supported)
    if stored_parts is None or supported_parts is None:
        return False
    if stored_parts[0] != supported_parts[0]:
        return False
    return not is_newer_version(stored, supported)

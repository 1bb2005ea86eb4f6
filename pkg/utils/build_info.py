"""
Build provenance embedded in every result summary: tool version and source revision.
"""

import platform
from pathlib import Path

try:
    from git import GitError, InvalidGitRepositoryError, NoSuchPathError, Repo
except ImportError:
    Repo = None

from config import Config
from utils.log_utils import get_logger

logger = get_logger(__name__)

UNKNOWN_REVISION = "unknown"


def source_revision(path=None):
    """
    Git revision of the source tree.

    Args:
        path (str | Path | None): Directory inside the checkout; defaults to this package

    Returns:
        tuple[str, bool]: (hexsha or "unknown", dirty flag)
    """
    if Repo is None:
        logger.debug("GitPython not available; revision unknown")
        return UNKNOWN_REVISION, False
    path = Path(path) if path else Path(__file__).resolve().parent
    try:
        repo = Repo(path, search_parent_directories=True)
        return repo.head.commit.hexsha, repo.is_dirty(untracked_files=False)
    except (InvalidGitRepositoryError, NoSuchPathError, GitError, ValueError) as e:
        logger.debug(f"No git revision for {path}: {e}")
        return UNKNOWN_REVISION, False


def build_info():
    """Provenance dictionary: tool version, instance schema, revision, dirty flag, Python version."""
    revision, dirty = source_revision()
    return {
        "tool_version": Config.APP_VERSION,
        "schema_version": Config.INSTANCE_SCHEMA_VERSION,
        "revision": revision,
        "dirty": dirty,
        "python": platform.python_version(),
    }

"""
Generate Application.
Writes a seeded Cournot instance document.
"""

from pathlib import Path

from gne.cournot import CournotParams, generate
from gne.errors import ValidationError
from gne.instance_io import default_instance_path, save_instance
from utils.log_utils import get_logger

logger = get_logger("gne.apps.generate")


def cmd_generate(params, out_path):
    """
    Generate and save a Cournot instance.

    Args:
        params (CournotParams | dict): Generator parameters
        out_path (str | Path): Target file, or a directory for cournot_seed<k>.json

    Returns:
        tuple[Path, str]: Written path and instance hash

    Raises:
        ValidationError: Invalid parameters or an unwritable path
    """
    if isinstance(params, dict):
        params = CournotParams.from_dict(params)
    out_path = Path(out_path)
    if out_path.suffix.lower() != ".json":
        out_path = default_instance_path(out_path, params)
    game, graph = generate(params)
    try:
        path, digest = save_instance(game, graph, out_path)
    except OSError as e:
        raise ValidationError(f"Cannot write instance to {out_path}: {e}")
    logger.info(f"Wrote {game.kind} instance ({game.n_agents} agents, n={game.n}) to {path}")
    return path, digest

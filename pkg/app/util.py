import csv
import hashlib
import logging
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)


#
# Errors
#


class LabError(Exception):
    """Base class for every failure the lab reports to the command line."""

    exit_code = 1


class ConfigError(LabError, ValueError):
    exit_code = 2


class UsageError(LabError):
    exit_code = 2


class GenerationError(LabError):
    exit_code = 2


class DimensionError(LabError, ValueError):
    exit_code = 2


class NumericError(LabError, ArithmeticError):
    exit_code = 3


def exit_code_for(exception: BaseException) -> int:
    return getattr(exception, "exit_code", 1)


#
# Command registry
#


def command(*aliases):
    """Mark a method as a command reachable through a handler's dispatch table."""

    def decorator(func):
        setattr(func, "aliases", aliases)
        setattr(func, "command", True)
        return func

    return decorator


def format_success_reply(result):
    return {"result": result, "error": None, "exit_code": 0}


def format_exception_reply(exception):
    return {
        "result": None,
        "error": str(exception),
        "exit_code": exit_code_for(exception),
    }


request_schema = {
    "type": "object",
    "properties": {
        "action": {"type": "string", "minLength": 1},
        "params": {"type": "object"},
    },
    "required": ["action"],
}


#
# Random streams
#


def make_rng(*keys: int) -> np.random.Generator:
    """Counter-based generator keyed by a tuple of integers (seed, stream, ...)."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(list(keys))))


def stable_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


#
# CSV output
#


def write_csv(path: Path, header: list[str], rows: list[list], config_hash: str):
    """Write a CSV with the config hash as a leading comment line."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        fh.write(f"# config_hash={config_hash}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([format_cell(value) for value in row])
    logger.info(f"Wrote {len(rows)} rows to {path}")


def format_cell(value):
    if isinstance(value, float | np.floating):
        return f"{float(value):.6f}"
    return value


def read_csv(path: Path) -> tuple[str, list[dict]]:
    """Return (config hash, rows) of a CSV written by write_csv."""
    with path.open(encoding="utf-8") as fh:
        first = fh.readline().strip()
        config_hash = first.split("=", 1)[1] if first.startswith("#") else ""
        return config_hash, list(csv.DictReader(fh))

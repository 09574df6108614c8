"""
Key-value text configuration files.

One ``key = value`` pair per line (``:`` is accepted as separator), ``#``
starts a comment, blank lines are skipped. The same reader serves the NWS
config, the CSV schema remap, the alert-naming map and the CLI run config.
"""

import logging
import os
from typing import Dict, List

from nesy_soc.errors import ConfigError, InputFileError

logger = logging.getLogger(__name__)


def parse_kv_text(text: str, source: str = "<string>") -> Dict[str, str]:
    """Parses key-value text into an ordered dict; duplicate keys are rejected."""
    values: Dict[str, str] = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        positions = [p for p in (line.find("="), line.find(":")) if p >= 0]
        if not positions:
            raise InputFileError(source, number, f"expected 'key = value', got {raw.strip()!r}")
        cut = min(positions)
        key = line[:cut].strip()
        value = line[cut + 1:].strip()
        if not key:
            raise InputFileError(source, number, "empty key")
        if key in values:
            raise InputFileError(source, number, f"duplicate key {key!r}")
        values[key] = value
    return values


def read_kv_file(path: str) -> Dict[str, str]:
    """Reads a key-value file from disk."""
    if not os.path.isfile(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    values = parse_kv_text(text, source=path)
    logger.debug("read %d keys from %s", len(values), path)
    return values


def split_list(value: str) -> List[str]:
    """Splits a comma-separated value, dropping empty items."""
    return [item.strip() for item in value.split(",") if item.strip()]

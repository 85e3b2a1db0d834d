"""
Utility functions and classes for MeanFlowActions.
This module contains file helpers and the run manifest used across the package.
"""

import csv
import hashlib
import io
import json
import os
import logging
from dataclasses import dataclass, field, asdict
from datetime import datetime, timezone
from typing import Any, Dict, Iterable, List, Optional, Sequence

import numpy as np

from .error_handler import MeanFlowError, ErrorCategory

logger = logging.getLogger(__name__)

MANIFEST_NAME = 'manifest.json'

# Columns that hold wall-clock measurements; they are blanked before checksumming
TIMING_COLUMNS = ('gen_time_s', 'wall_time_s')


class OutputError(MeanFlowError):
    """Output location cannot be written"""
    category = ErrorCategory.IO
    error_type = "unwritable"


def ensure_dir(path: str) -> str:
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as e:
        raise OutputError(f"cannot create directory {path}: {e}") from e
    return path


def write_json(path: str, obj: Any) -> str:
    ensure_dir(os.path.dirname(os.path.abspath(path)))
    try:
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(obj, f, indent=2, default=str)
            f.write('\n')
    except OSError as e:
        raise OutputError(f"cannot write {path}: {e}") from e
    return path


def read_json(path: str) -> Any:
    with open(path, 'r', encoding='utf-8') as f:
        return json.load(f)


def write_csv(path: str, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
    ensure_dir(os.path.dirname(os.path.abspath(path)))
    try:
        with open(path, 'w', encoding='utf-8', newline='') as f:
            writer = csv.writer(f, lineterminator='\n')
            writer.writerow(header)
            for row in rows:
                writer.writerow(row)
    except OSError as e:
        raise OutputError(f"cannot write {path}: {e}") from e
    return path


def sha256_file(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, 'rb') as f:
        for block in iter(lambda: f.read(1 << 16), b''):
            digest.update(block)
    return digest.hexdigest()


def content_checksum(path: str) -> str:
    """SHA-256 of a file with timing fields removed (CSV columns or JSON keys)"""
    if path.endswith('.csv'):
        with open(path, 'r', encoding='utf-8', newline='') as f:
            rows = list(csv.reader(f))
        if not rows:
            return sha256_file(path)
        keep = [i for i, name in enumerate(rows[0]) if name not in TIMING_COLUMNS]
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator='\n')
        for row in rows:
            writer.writerow([row[i] for i in keep if i < len(row)])
        return hashlib.sha256(buf.getvalue().encode('utf-8')).hexdigest()
    if path.endswith('.json'):
        doc = read_json(path)
        return hashlib.sha256(json.dumps(_strip_timing(doc), sort_keys=True).encode('utf-8')).hexdigest()
    return sha256_file(path)


def _strip_timing(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {k: _strip_timing(v) for k, v in obj.items()
                if k not in TIMING_COLUMNS and not k.startswith('gen_time') and k != 'timestamp'}
    if isinstance(obj, list):
        return [_strip_timing(v) for v in obj]
    return obj


@dataclass
class RunManifest:
    """Provenance record written once per run directory"""
    command: str
    argv: List[str]
    config: Dict[str, Any]
    seed: int
    artifacts: Dict[str, str] = field(default_factory=dict)
    checksums: Dict[str, str] = field(default_factory=dict)
    tool_version: str = ''
    timestamp: str = ''

    def add_artifact(self, name: str, path: str):
        """Record an artifact path (relative to the run dir when inside it) and its content checksum"""
        self.artifacts[name] = path
        self.checksums[name] = content_checksum(path)

    def write(self, run_dir: str) -> str:
        from . import __version__
        self.tool_version = self.tool_version or __version__
        self.timestamp = datetime.now(timezone.utc).isoformat()
        path = write_json(os.path.join(run_dir, MANIFEST_NAME), asdict(self))
        logger.info(f"Manifest written: {path}")
        return path

    @classmethod
    def load(cls, path: str) -> 'RunManifest':
        if os.path.isdir(path):
            path = os.path.join(path, MANIFEST_NAME)
        try:
            data = read_json(path)
            return cls(**data)
        except (OSError, json.JSONDecodeError, TypeError) as e:
            raise MeanFlowError(f"cannot read manifest {path}: {e}", "manifest") from e

    def compare(self, other: 'RunManifest') -> List[str]:
        """Names of artifacts whose checksums differ or are missing in `other`"""
        return sorted(name for name, digest in self.checksums.items()
                      if other.checksums.get(name) != digest)


def median_iqr(values: Sequence[float]) -> Dict[str, Optional[float]]:
    """Median and inter-quartile range, ignoring NaN entries"""
    arr = np.asarray([v for v in values if v is not None], dtype=np.float64)
    arr = arr[np.isfinite(arr)]
    if arr.size == 0:
        return {'median': None, 'iqr': None, 'n': 0}
    q1, med, q3 = np.percentile(arr, [25, 50, 75])
    return {'median': float(med), 'iqr': float(q3 - q1), 'n': int(arr.size)}

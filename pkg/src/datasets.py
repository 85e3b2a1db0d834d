"""
Demonstration storage and training-pair extraction.

A dataset directory holds `dataset.jsonl` (one step per line) and the sidecar
`dataset.header.json` with dims and the generator config. Chunked training pairs
are sliding windows (observation_i, actions i..i+H-1), zero-padded past the end
of an episode with the terminal no-op action.
"""

import json
import logging
import os
from dataclasses import dataclass, field, asdict
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .error_handler import ConfigurationError, ContractViolation, DatasetFormatError, log_audit
from .tasks import TASK_TAGS, EpisodeRecord
from .utils import ensure_dir, OutputError

logger = logging.getLogger(__name__)

DATA_FILE = 'dataset.jsonl'
HEADER_FILE = 'dataset.header.json'
DATASET_FORMAT = 'meanflow-actions-dataset/1'
# standard deviations below this are treated as constant dimensions
MIN_STD = 1e-6


@dataclass
class Normalizer:
    """Per-dimension affine standardization x -> (x - mean) / std"""
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if self.mean.shape != self.std.shape or np.any(self.std <= 0.0):
            raise ContractViolation("normalizer needs matching mean/std shapes and positive std")

    @classmethod
    def fit(cls, x: np.ndarray) -> 'Normalizer':
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        std = x.std(axis=0)
        return cls(x.mean(axis=0), np.where(std < MIN_STD, 1.0, std))

    @classmethod
    def identity(cls, dim: int) -> 'Normalizer':
        return cls(np.zeros(dim), np.ones(dim))

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def inverse(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) * self.std + self.mean

    def to_dict(self) -> Dict[str, List[float]]:
        return {'mean': self.mean.tolist(), 'std': self.std.tolist()}

    @classmethod
    def from_dict(cls, data: Optional[Dict[str, Any]]) -> Optional['Normalizer']:
        if not data:
            return None
        return cls(data['mean'], data['std'])


@dataclass
class ChunkDataset:
    """Training pairs: cond rows are observations, x rows are (normalized) flattened chunks"""
    cond: np.ndarray
    x: np.ndarray
    raw_x: np.ndarray
    chunk_h: int
    act_dim: int
    normalizer: Optional[Normalizer] = None

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def cond_dim(self) -> int:
        return self.cond.shape[1]


def chunk_windows(record: EpisodeRecord, chunk_h: int) -> Tuple[np.ndarray, np.ndarray]:
    """(observations, flattened H-step action windows) for every step of one episode"""
    if chunk_h < 1:
        raise ConfigurationError(f"chunk_h must be >= 1, got {chunk_h}")
    n = len(record)
    padded = np.concatenate([record.actions, np.zeros((chunk_h - 1, record.act_dim))], axis=0)
    windows = np.stack([padded[i:i + chunk_h].ravel() for i in range(n)])
    return record.observations, windows


def build_chunk_dataset(records: Sequence[EpisodeRecord], chunk_h: int,
                        normalize: bool = True, normalizer: Optional[Normalizer] = None) -> ChunkDataset:
    """Stack every episode's sliding windows; fit a normalizer unless one is given"""
    if not records:
        raise ConfigurationError("no episodes to build a dataset from", "empty_dataset")
    act_dim = records[0].act_dim
    obs_dim = records[0].obs_dim
    conds, xs = [], []
    for rec in records:
        if rec.act_dim != act_dim or rec.obs_dim != obs_dim:
            raise ContractViolation(f"episode {rec.episode_id} has dims ({rec.obs_dim}, {rec.act_dim}), "
                                    f"expected ({obs_dim}, {act_dim})")
        c, x = chunk_windows(rec, chunk_h)
        conds.append(c)
        xs.append(x)
    cond = np.concatenate(conds, axis=0)
    raw_x = np.concatenate(xs, axis=0)
    if normalizer is None and normalize:
        normalizer = Normalizer.fit(raw_x)
    x = normalizer.apply(raw_x) if normalizer is not None else raw_x
    logger.debug(f"Chunk dataset: {x.shape[0]} pairs, chunk_h={chunk_h}, cond_dim={cond.shape[1]}")
    return ChunkDataset(cond=cond, x=x, raw_x=raw_x, chunk_h=chunk_h, act_dim=act_dim, normalizer=normalizer)


@dataclass
class DatasetHeader:
    task_tag: str
    obs_dim: int
    act_dim: int
    episodes: int
    steps: int
    generator: Dict[str, Any] = field(default_factory=dict)
    format: str = DATASET_FORMAT

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def _data_paths(path: str) -> Tuple[str, str]:
    if os.path.isdir(path) or not path.endswith('.jsonl'):
        return os.path.join(path, DATA_FILE), os.path.join(path, HEADER_FILE)
    return path, os.path.join(os.path.dirname(path), HEADER_FILE)


def save_dataset(out_dir: str, records: Sequence[EpisodeRecord],
                 generator: Optional[Dict[str, Any]] = None) -> Tuple[str, str]:
    """Write the JSON Lines data file and its header; identical records give identical bytes"""
    if not records:
        raise ConfigurationError("refusing to write an empty dataset", "empty_dataset")
    ensure_dir(out_dir)
    data_path, header_path = _data_paths(out_dir)
    header = DatasetHeader(task_tag=records[0].task_tag, obs_dim=records[0].obs_dim, act_dim=records[0].act_dim,
                           episodes=len(records), steps=sum(len(r) for r in records), generator=generator or {})
    try:
        with open(data_path, 'w', encoding='utf-8', newline='\n') as f:
            for rec in records:
                for step, (obs, act) in enumerate(zip(rec.observations, rec.actions)):
                    line = {'task': rec.task_tag, 'episode': rec.episode_id, 'step': step,
                            'obs': obs.tolist(), 'act': act.tolist()}
                    f.write(json.dumps(line) + '\n')
        with open(header_path, 'w', encoding='utf-8') as f:
            json.dump(header.to_dict(), f, indent=2)
            f.write('\n')
    except OSError as e:
        raise OutputError(f"cannot write dataset to {out_dir}: {e}") from e
    log_audit("dataset_written", {'path': data_path, 'episodes': header.episodes, 'steps': header.steps})
    logger.info(f"Dataset written: {data_path} ({header.episodes} episodes, {header.steps} steps)")
    return data_path, header_path


def _is_int(value: Any) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


def _is_finite_vector(value: Any) -> bool:
    if not isinstance(value, list):
        return False
    return all(isinstance(v, (int, float)) and not isinstance(v, bool) and np.isfinite(v) for v in value)


def _read_header(header_path: str) -> DatasetHeader:
    if not os.path.exists(header_path):
        raise DatasetFormatError(f"dataset header not found: {header_path}", error_type="missing")
    try:
        with open(header_path, 'r', encoding='utf-8') as f:
            data = json.load(f)
        header = DatasetHeader(**data)
    except (json.JSONDecodeError, TypeError) as e:
        raise DatasetFormatError(f"{header_path}: malformed header ({e})") from e
    bad = [name for name in ('obs_dim', 'act_dim', 'episodes', 'steps')
           if not _is_int(getattr(header, name)) or getattr(header, name) < 0]
    if bad:
        raise DatasetFormatError(f"{header_path}: {', '.join(bad)} must be non-negative integers")
    if not isinstance(header.generator, dict) or not isinstance(header.format, str):
        raise DatasetFormatError(f"{header_path}: generator must be an object and format a string")
    if not isinstance(header.task_tag, str) or header.task_tag not in TASK_TAGS:
        raise DatasetFormatError(f"{header_path}: unknown task tag {header.task_tag!r}")
    return header


def _parse_line(raw: str, line_no: int, header: DatasetHeader) -> Dict[str, Any]:
    try:
        line = json.loads(raw)
    except json.JSONDecodeError as e:
        raise DatasetFormatError(f"invalid JSON ({e.msg})", line_no) from e
    if not isinstance(line, dict) or not {'task', 'episode', 'step', 'obs', 'act'} <= set(line):
        raise DatasetFormatError("expected an object with task, episode, step, obs, act", line_no)
    if line['task'] != header.task_tag:
        raise DatasetFormatError(f"task {line['task']!r} does not match header '{header.task_tag}'", line_no)
    if not _is_int(line['episode']) or not _is_int(line['step']):
        raise DatasetFormatError(f"episode and step must be integers, got {line['episode']!r}, {line['step']!r}",
                                 line_no)
    for key in ('obs', 'act'):
        if not _is_finite_vector(line[key]):
            raise DatasetFormatError(f"{key} must be a list of finite numbers", line_no)
    if len(line['obs']) != header.obs_dim:
        raise DatasetFormatError(f"observation has {len(line['obs'])} entries, header says {header.obs_dim}", line_no)
    if len(line['act']) != header.act_dim:
        raise DatasetFormatError(f"action has {len(line['act'])} entries, header says {header.act_dim}", line_no)
    return line


def load_dataset(path: str) -> Tuple[List[EpisodeRecord], DatasetHeader]:
    """Parse a dataset directory (or its .jsonl file) back into episodes"""
    data_path, header_path = _data_paths(path)
    header = _read_header(header_path)
    if not os.path.exists(data_path):
        raise DatasetFormatError(f"dataset file not found: {data_path}", error_type="missing")

    episodes: Dict[int, Tuple[List, List]] = {}
    with open(data_path, 'r', encoding='utf-8') as f:
        for line_no, raw in enumerate(f, start=1):
            if not raw.strip():
                continue
            line = _parse_line(raw, line_no, header)
            obs, acts = episodes.setdefault(int(line['episode']), ([], []))
            if line['step'] != len(obs):
                raise DatasetFormatError(f"episode {line['episode']}: expected step {len(obs)}, "
                                         f"got {line['step']}", line_no)
            obs.append(line['obs'])
            acts.append(line['act'])

    records = [EpisodeRecord(np.array(obs), np.array(acts), header.task_tag, ep)
               for ep, (obs, acts) in sorted(episodes.items())]
    if len(records) != header.episodes:
        raise DatasetFormatError(f"header promises {header.episodes} episodes, file has {len(records)}")
    logger.info(f"Dataset loaded: {data_path} ({len(records)} episodes)")
    return records, header

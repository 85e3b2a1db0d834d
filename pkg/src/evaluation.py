"""
Metrics and sweeps.

Cells of a sweep are (axis value, seed) pairs. Each cell trains a field (or
reuses one when only the sampler changes), then measures task success, energy
distance against held-out data and chunk-generation time.
"""

import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np
from scipy.spatial.distance import cdist
from tqdm import tqdm

from .config import SampleConfig, TrainConfig, check_types, config_from_dict
from .datasets import ChunkDataset, build_chunk_dataset
from .error_handler import (ConfigurationError, ContractViolation, MeanFlowError, TrainingDivergence,
                            log_audit)
from .linalg import Rng
from .meanflow import train
from .sampler import generate_chunk, sample_batch
from .tasks import TASK_TAGS, EXPERT_MAX_STEPS, eval_success, gen_demos, gen_gmm_dataset, gmm_records
from .utils import median_iqr, write_csv, write_json

logger = logging.getLogger(__name__)

SWEEP_AXES = ('flow_ratio', 'gamma', 'nfe', 'chunk_size')
REPORT_COLUMNS = ('axis_value', 'seed', 'success_pct', 'energy_distance', 'gen_time_s', 'status', 'warmup_skipped')
GMM_ACT_DIM = 2


def _pair_mean(x: np.ndarray, y: np.ndarray) -> float:
    # sorted summation makes the cross term independent of argument order
    d = np.sort(cdist(x, y).ravel())
    return float(d.sum() / d.size)


def energy_distance(a, b) -> float:
    """2 E|a - b| - E|a - a'| - E|b - b'| over all pairs (V-statistic), clamped at 0"""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise ConfigurationError("energy distance needs two non-empty sample sets")
    a = a.reshape(a.shape[0], -1) if a.ndim > 1 else a[:, None]
    b = b.reshape(b.shape[0], -1) if b.ndim > 1 else b[:, None]
    if a.shape[1] != b.shape[1]:
        raise ContractViolation(f"sample dims differ: {a.shape[1]} vs {b.shape[1]}")
    cross = _pair_mean(a, b)
    within = _pair_mean(a, a) + _pair_mean(b, b)
    return max(2.0 * cross - within, 0.0)


@dataclass
class GenerationTiming:
    seconds: float
    reps: int
    warmup: int

    @property
    def warmup_skipped(self) -> bool:
        return self.warmup == 0


def time_generation(net, cfg: SampleConfig, warmup: int = 1, reps: int = 5, obs: Optional[np.ndarray] = None,
                    act_dim: Optional[int] = None, rng: Optional[Rng] = None) -> GenerationTiming:
    """Median wall time of one generate_chunk call after `warmup` discarded calls"""
    if reps < 3:
        raise ConfigurationError(f"time_generation needs reps >= 3, got {reps}")
    if warmup < 0:
        raise ConfigurationError(f"warmup must be >= 0, got {warmup}")
    if warmup == 0:
        logger.warning("Timing without warmup; the first call may include one-off costs")
    obs = np.zeros(net.cond_dim) if obs is None else obs
    act_dim = act_dim or net.z_dim
    rng = rng or Rng(cfg.seed)
    for _ in range(warmup):
        generate_chunk(net, obs, cfg, rng, act_dim)
    times = []
    for _ in range(reps):
        start = time.perf_counter()
        generate_chunk(net, obs, cfg, rng, act_dim)
        times.append(time.perf_counter() - start)
    return GenerationTiming(seconds=float(np.median(times)), reps=reps, warmup=warmup)


def field_energy_distance(net, held_out: ChunkDataset, cfg: SampleConfig, rng: Rng,
                          max_samples: int = 256) -> float:
    """Energy distance between generated chunks and held-out chunks for the same observations"""
    n = len(held_out)
    idx = np.sort(rng.permutation(n)[:max_samples]) if n > max_samples else np.arange(n)
    generated = sample_batch(net, held_out.cond[idx], cfg, rng)
    if held_out.normalizer is not None:
        generated = held_out.normalizer.inverse(generated)
    return energy_distance(generated, held_out.raw_x[idx])


@dataclass
class CellMetrics:
    success_pct: Optional[float]
    energy_distance: Optional[float]
    gen_time_s: Optional[float]
    warmup_skipped: bool = False


def evaluate_field(net, task_tag: str, cfg: SampleConfig, held_out: ChunkDataset, seed: int = 0,
                   rounds: int = 2, trials: int = 10, max_steps: int = EXPERT_MAX_STEPS,
                   eval_samples: int = 256, time_reps: int = 5, time_warmup: int = 1) -> CellMetrics:
    """Success (simulator tasks only), energy distance and generation time for one field and sampler"""
    root = Rng(seed)
    success = None
    if task_tag != 'gmm':
        success = eval_success(net, task_tag, rounds, trials, chunk_h=held_out.chunk_h, cfg=cfg, seed=seed,
                               max_steps=max_steps, normalizer=held_out.normalizer).mean_pct
    ed = field_energy_distance(net, held_out, cfg, root.derive(2), eval_samples)
    timing = time_generation(net, cfg, time_warmup, time_reps, obs=held_out.cond[0],
                             act_dim=held_out.act_dim, rng=root.derive(3))
    return CellMetrics(success_pct=success, energy_distance=ed, gen_time_s=timing.seconds,
                       warmup_skipped=timing.warmup_skipped)


@dataclass
class SweepSpec:
    """One swept axis over a base TrainConfig, repeated for every seed"""
    axis: str
    values: List[float]
    seeds: List[int]
    task_tag: str = 'pickplace'
    base: TrainConfig = field(default_factory=TrainConfig)
    nfe: int = 1
    mode: str = 'meanflow'
    episodes: int = 100
    holdout_episodes: int = 20
    gmm_modes: int = 2
    rounds: int = 2
    trials: int = 10
    max_steps: int = EXPERT_MAX_STEPS
    eval_samples: int = 256
    time_reps: int = 5
    time_warmup: int = 1

    def validate(self) -> 'SweepSpec':
        if self.axis not in SWEEP_AXES:
            raise ConfigurationError(f"axis must be one of {SWEEP_AXES}, got '{self.axis}'")
        if not self.values:
            raise ConfigurationError("sweep values must be non-empty")
        if not self.seeds:
            raise ConfigurationError("sweep seeds must be non-empty")
        if self.task_tag not in TASK_TAGS:
            raise ConfigurationError(f"unknown task tag '{self.task_tag}'")
        if self.task_tag == 'gmm' and self.axis == 'chunk_size':
            raise ConfigurationError("the gmm task has no action chunks to sweep")
        if min(self.episodes, self.holdout_episodes, self.rounds, self.trials, self.eval_samples) < 1:
            raise ConfigurationError("episodes, holdout_episodes, rounds, trials and eval_samples must be >= 1")
        for value in self.values:
            self.train_config(value, self.seeds[0])
            self.sample_config(value)
        return self

    def train_config(self, value, seed: int) -> TrainConfig:
        overrides: Dict[str, Any] = {'seed': int(seed)}
        if self.axis == 'chunk_size':
            overrides['chunk_h'] = int(value)
        elif self.axis in ('flow_ratio', 'gamma'):
            overrides[self.axis] = float(value)
        if self.task_tag == 'gmm':
            overrides.update(chunk_h=1, act_dim=GMM_ACT_DIM)
        return dataclasses.replace(self.base, **overrides).validate()

    def sample_config(self, value) -> SampleConfig:
        nfe = int(value) if self.axis == 'nfe' else self.nfe
        return SampleConfig(nfe=nfe, mode=self.mode).validate()

    @property
    def trains_per_value(self) -> bool:
        return self.axis != 'nfe'

    def to_dict(self) -> Dict[str, Any]:
        data = dataclasses.asdict(self)
        data['base'] = self.base.to_dict()
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any], source: str = "<dict>") -> 'SweepSpec':
        if not isinstance(data, dict):
            raise ConfigurationError(f"{source}: expected a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(k for k in data if k not in known)
        if unknown:
            raise ConfigurationError(f"{source}: unknown sweep key(s): {', '.join(unknown)}", "unknown_key")
        missing = [k for k in ('axis', 'values', 'seeds') if k not in data]
        if missing:
            raise ConfigurationError(f"{source}: missing sweep key(s): {', '.join(missing)}", "missing")
        data = dict(data)
        check_types(cls, {k: v for k, v in data.items() if k != 'base'}, source)
        data['base'] = config_from_dict(TrainConfig, data.get('base', {}), source=f"{source}:base")
        return cls(**data).validate()

    @classmethod
    def load(cls, path: str) -> 'SweepSpec':
        try:
            with open(path, 'r', encoding='utf-8') as f:
                data = json.load(f)
        except FileNotFoundError as e:
            raise ConfigurationError(f"sweep spec not found: {path}", "missing") from e
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"{path}: invalid JSON ({e})") from e
        return cls.from_dict(data, source=path)


@dataclass
class SweepCell:
    axis_value: float
    seed: int
    success_pct: Optional[float] = None
    energy_distance: Optional[float] = None
    gen_time_s: Optional[float] = None
    status: str = 'ok'
    error: str = ''
    warmup_skipped: bool = False

    @property
    def failed(self) -> bool:
        return self.status != 'ok'


def _fmt(value: Optional[float]) -> str:
    return '' if value is None or (isinstance(value, float) and math.isnan(value)) else repr(value)


@dataclass
class MetricReport:
    axis: str
    task_tag: str
    cells: List[SweepCell] = field(default_factory=list)

    @property
    def failed_cells(self) -> List[SweepCell]:
        return [c for c in self.cells if c.failed]

    def rows(self) -> List[Tuple[str, ...]]:
        return [(repr(c.axis_value), str(c.seed), _fmt(c.success_pct), _fmt(c.energy_distance),
                 _fmt(c.gen_time_s), c.status, 'true' if c.warmup_skipped else 'false') for c in self.cells]

    def summary(self) -> Dict[str, Any]:
        """Median and IQR over seeds of every metric, per axis value"""
        per_value: Dict[str, Any] = {}
        for value in dict.fromkeys(c.axis_value for c in self.cells):
            group = [c for c in self.cells if c.axis_value == value and not c.failed]
            per_value[repr(value)] = {
                'success_pct': median_iqr([c.success_pct for c in group]),
                'energy_distance': median_iqr([c.energy_distance for c in group]),
                'gen_time_s': median_iqr([c.gen_time_s for c in group]),
                'failed': sum(1 for c in self.cells if c.axis_value == value and c.failed),
            }
        return {'axis': self.axis, 'task': self.task_tag, 'cells': len(self.cells),
                'failed_cells': len(self.failed_cells), 
                'warmup_skipped': any(c.warmup_skipped for c in self.cells), 'values': per_value}

    def write_csv(self, path: str) -> str:
        return write_csv(path, REPORT_COLUMNS, self.rows())

    def write_summary(self, path: str) -> str:
        return write_json(path, self.summary())


def task_records(task_tag: str, rng: Rng, count: int, gmm_modes: int = 2, gmm_ambiguity: float = 0.5):
    """Demonstrations for a simulator task, or `count` single-step gmm episodes"""
    if task_tag == 'gmm':
        return gmm_records(gen_gmm_dataset(rng, count, gmm_modes, ambiguity=gmm_ambiguity))
    return gen_demos(task_tag, rng, count)


Trainer = Callable[[ChunkDataset, TrainConfig], Tuple[Any, Any]]


def _default_trainer(data: ChunkDataset, cfg: TrainConfig):
    return train(data, cfg)


def run_sweep(spec: SweepSpec, trainer: Optional[Trainer] = None, progress: bool = False) -> MetricReport:
    """Train and evaluate every (value, seed) cell; failures are recorded on the cell"""
    spec.validate()
    trainer = trainer or _default_trainer
    results: Dict[Tuple[int, int], SweepCell] = {}
    total = len(spec.values) * len(spec.seeds)
    bar = tqdm(total=total, desc=f"sweep {spec.axis}", disable=not progress, leave=False)

    for j, seed in enumerate(spec.seeds):
        root = Rng(seed)
        train_records = task_records(spec.task_tag, root.derive(0),
                                     spec.episodes, spec.gmm_modes)
        held_records = task_records(spec.task_tag, root.derive(1),
                                    spec.holdout_episodes, spec.gmm_modes)
        shared = None
        for i, value in enumerate(spec.values):
            cell = SweepCell(axis_value=value, seed=seed)
            try:
                cfg = spec.train_config(value, seed)
                data = build_chunk_dataset(train_records, cfg.chunk_h, cfg.normalize)
                if spec.trains_per_value or shared is None:
                    net, _ = trainer(data, cfg)
                    shared = net
                held = build_chunk_dataset(held_records, cfg.chunk_h, normalizer=data.normalizer)
                metrics = evaluate_field(shared, spec.task_tag, spec.sample_config(value), held, seed,
                                         spec.rounds, spec.trials, spec.max_steps, spec.eval_samples,
                                         spec.time_reps, spec.time_warmup)
                cell.success_pct = metrics.success_pct
                cell.energy_distance = metrics.energy_distance
                cell.gen_time_s = metrics.gen_time_s
                cell.warmup_skipped = metrics.warmup_skipped
            except TrainingDivergence as e:
                cell.status, cell.error = 'diverged', str(e)
            except MeanFlowError as e:
                cell.status, cell.error = 'failed', str(e)
            if cell.failed:
                logger.warning(f"Sweep cell {spec.axis}={value} seed={seed} {cell.status}: {cell.error}")
                log_audit("sweep_cell_failed", {'axis': spec.axis, 'value': value, 'seed': seed,
                                                 'status': cell.status, 'error': cell.error})
            results[(i, j)] = cell
            bar.update(1)
    bar.close()

    cells = [results[(i, j)] for i in range(len(spec.values)) for j in range(len(spec.seeds))]
    report = MetricReport(axis=spec.axis, task_tag=spec.task_tag, cells=cells)
    logger.info(f"Sweep over {spec.axis} finished: {len(cells)} cells, {len(report.failed_cells)} failed")
    return report


@dataclass
class MethodComparison:
    """MeanFlow one-step against the Euler FlowMatching baseline on one field"""
    task_tag: str
    baseline_nfe: int
    meanflow: CellMetrics
    baseline: CellMetrics

    @property
    def speed_ratio(self) -> Optional[float]:
        if not self.meanflow.gen_time_s:
            return None
        return self.baseline.gen_time_s / self.meanflow.gen_time_s

    def rows(self) -> List[Tuple[str, ...]]:
        return [('meanflow', '1', _fmt(self.meanflow.success_pct), _fmt(self.meanflow.energy_distance),
                 _fmt(self.meanflow.gen_time_s)),
                ('euler_fm', str(self.baseline_nfe), _fmt(self.baseline.success_pct),
                 _fmt(self.baseline.energy_distance), _fmt(self.baseline.gen_time_s))]

    def to_dict(self) -> Dict[str, Any]:
        return {'task': self.task_tag, 'baseline_nfe': self.baseline_nfe,
                'meanflow': dataclasses.asdict(self.meanflow), 'euler_fm': dataclasses.asdict(self.baseline),
                'speed_ratio': self.speed_ratio}


def compare_methods(net, task_tag: str, held_out: ChunkDataset, baseline_nfe: int = 10, seed: int = 0,
                    rounds: int = 2, trials: int = 10, max_steps: int = EXPERT_MAX_STEPS,
                    eval_samples: int = 256, time_reps: int = 5, time_warmup: int = 1) -> MethodComparison:
    """Evaluate meanflow nfe=1 and euler_fm nfe=baseline_nfe with identical seeds"""
    kwargs = dict(seed=seed, rounds=rounds, trials=trials, max_steps=max_steps, eval_samples=eval_samples,
                  time_reps=time_reps, time_warmup=time_warmup)
    mf = evaluate_field(net, task_tag, SampleConfig(nfe=1, mode='meanflow'), held_out, **kwargs)
    fm = evaluate_field(net, task_tag, SampleConfig(nfe=baseline_nfe, mode='euler_fm'), held_out, **kwargs)
    result = MethodComparison(task_tag, baseline_nfe, mf, fm)
    logger.info(f"{task_tag}: meanflow ED={mf.energy_distance:.4f}, euler_fm@{baseline_nfe} "
                f"ED={fm.energy_distance:.4f}, speed ratio {result.speed_ratio or float('nan'):.1f}x")
    return result

"""
Desk-scale tasks: a conditional Gaussian-mixture testbed and a deterministic
point-mass pick-place simulator with pickplace, stacking and sorting variants,
a scripted expert, demonstration generation and a chunked closed-loop executor.

Workspace units are [0,1]^2. Actions are (dx, dy, g): the move is clipped to
+-0.05 per axis, the gripper command is closed when g >= 0.5.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Protocol, Sequence, Tuple, runtime_checkable

import numpy as np

from .config import SampleConfig
from .error_handler import ConfigurationError, ContractViolation
from .linalg import Rng
from .sampler import ActionChunk, generate_chunk

logger = logging.getLogger(__name__)

MAX_MOVE = 0.05
GRASP_RADIUS = 0.03
GMM_STD = 0.05
EXPERT_STEP = 0.045
EXPERT_JITTER = 0.005
EXPERT_GRASP_DIST = 0.015
EXPERT_RELEASE_DIST = 0.01
EXPERT_MAX_STEPS = 400
START_REGION = 0.3
ACT_DIM = 3


@dataclass(frozen=True)
class TaskSpec:
    """Layout and partial-credit schedule of a pick-place variant"""
    tag: str
    goals: Tuple[Tuple[float, float], ...]
    # lower-left corner of each object's 0.3 x 0.3 start square
    start_corners: Tuple[Tuple[float, float], ...]
    release_tol: float
    grasp_credit: float
    place_credit: float
    agent_start: Tuple[float, float] = (0.5, 0.05)
    min_separation: float = 0.08

    @property
    def n_objects(self) -> int:
        return len(self.goals)

    @property
    def obs_dim(self) -> int:
        return 3 + 4 * self.n_objects + 2 * self.n_objects


TASKS: Dict[str, TaskSpec] = {
    'pickplace': TaskSpec('pickplace', goals=((0.75, 0.75),), start_corners=((0.15, 0.15),),
                          release_tol=0.05, grasp_credit=0.5, place_credit=0.5),
    'stacking': TaskSpec('stacking', goals=((0.75, 0.75),), start_corners=((0.15, 0.15),),
                         release_tol=0.02, grasp_credit=0.5, place_credit=0.5),
    'sorting': TaskSpec('sorting', goals=((0.2, 0.8), (0.8, 0.8)), start_corners=((0.35, 0.15), (0.35, 0.15)),
                        release_tol=0.05, grasp_credit=0.25, place_credit=0.25),
}
TASK_TAGS = ('gmm', *TASKS)


def get_task(tag: str) -> TaskSpec:
    if tag not in TASKS:
        raise ConfigurationError(f"unknown simulator task '{tag}', expected one of {sorted(TASKS)}")
    return TASKS[tag]


# Conditional Gaussian mixture

def gmm_centers(modes: int) -> np.ndarray:
    """Mode means evenly spaced on the unit circle"""
    angles = 2.0 * np.pi * np.arange(modes) / modes
    return np.stack([np.cos(angles), np.sin(angles)], axis=1)


def gen_gmm_dataset(rng: Rng, n: int, modes: int, centers: Optional[Sequence[Sequence[float]]] = None,
                    ambiguity: float = 0.5) -> List[Tuple[np.ndarray, np.ndarray]]:
    """n (cond, x) pairs with x ~ N(mu_class, 0.05^2 I).

    cond is the one-hot class feature; with probability `ambiguity` it is replaced
    by the uniform vector, which makes x | cond multimodal.
    """
    if n < 1:
        raise ConfigurationError(f"n must be >= 1, got {n}")
    if modes < 1:
        raise ConfigurationError(f"modes must be >= 1, got {modes}")
    if not 0.0 <= ambiguity <= 1.0:
        raise ConfigurationError(f"ambiguity must be in [0,1], got {ambiguity}")
    mu = gmm_centers(modes) if centers is None else np.asarray(centers, dtype=np.float64)
    if mu.shape != (modes, 2):
        raise ConfigurationError(f"centers must have shape ({modes}, 2), got {mu.shape}")

    classes = rng.integers(0, modes, size=n)
    noise = rng.gauss(n, 2)
    blank = rng.uniform(n) < ambiguity
    x = mu[classes] + GMM_STD * noise
    cond = np.eye(modes)[classes]
    cond[blank] = 1.0 / modes
    return [(cond[i], x[i]) for i in range(n)]


# Pick-place simulator

@dataclass
class PickPlaceState:
    task: str
    agent_xy: np.ndarray
    gripper: float
    object_xy: np.ndarray
    goal_xy: np.ndarray
    held_object: Optional[int] = None
    grasped: np.ndarray = None
    placed: np.ndarray = None

    def __post_init__(self):
        n = self.object_xy.shape[0]
        if self.grasped is None:
            self.grasped = np.zeros(n, dtype=bool)
        if self.placed is None:
            self.placed = np.zeros(n, dtype=bool)

    def copy(self) -> 'PickPlaceState':
        return PickPlaceState(self.task, self.agent_xy.copy(), self.gripper, self.object_xy.copy(),
                              self.goal_xy.copy(), self.held_object, self.grasped.copy(), self.placed.copy())

    @property
    def spec(self) -> TaskSpec:
        return get_task(self.task)

    @property
    def success(self) -> bool:
        return bool(np.all(self.placed))

    def score(self) -> float:
        spec = self.spec
        return float(spec.grasp_credit * np.sum(self.grasped) + spec.place_credit * np.sum(self.placed))

    def observation(self) -> np.ndarray:
        """[agent_xy, gripper, per object (xy, held, placed), per goal xy]"""
        parts = [self.agent_xy, [self.gripper]]
        for i in range(self.object_xy.shape[0]):
            parts.append(self.object_xy[i])
            parts.append([1.0 if self.held_object == i else 0.0, 1.0 if self.placed[i] else 0.0])
        parts.append(self.goal_xy.ravel())
        return np.concatenate([np.asarray(p, dtype=np.float64) for p in parts])

    @classmethod
    def from_observation(cls, obs: np.ndarray, task: str) -> 'PickPlaceState':
        spec = get_task(task)
        obs = np.asarray(obs, dtype=np.float64)
        if obs.shape != (spec.obs_dim,):
            raise ContractViolation(f"{task} observations have {spec.obs_dim} entries, got {obs.shape}")
        n = spec.n_objects
        objects = obs[3:3 + 4 * n].reshape(n, 4)
        held = [i for i in range(n) if objects[i, 2] > 0.5]
        return cls(task=task, agent_xy=obs[0:2].copy(), gripper=float(obs[2]),
                   object_xy=objects[:, :2].copy(), goal_xy=obs[3 + 4 * n:].reshape(n, 2).copy(),
                   held_object=held[0] if held else None,
                   grasped=objects[:, 2] > 0.5, placed=objects[:, 3] > 0.5)


def initial_state(task_tag: str, rng: Rng) -> PickPlaceState:
    """Objects uniformly inside their 0.3 x 0.3 start squares, kept apart by min_separation"""
    spec = get_task(task_tag)
    while True:
        objects = np.array([np.asarray(corner) + rng.uniform(2) * START_REGION for corner in spec.start_corners])
        if spec.n_objects == 1 or all(np.linalg.norm(objects[i] - objects[j]) >= spec.min_separation
                                      for i in range(spec.n_objects) for j in range(i + 1, spec.n_objects)):
            break
    return PickPlaceState(task=task_tag, agent_xy=np.array(spec.agent_start, dtype=np.float64), gripper=0.0,
                          object_xy=objects, goal_xy=np.array(spec.goals, dtype=np.float64))


def pickplace_step(s: PickPlaceState, a) -> PickPlaceState:
    """Deterministic transition: move, then gripper.

    Closing the gripper (open -> closed) within GRASP_RADIUS of an unplaced object
    grasps the nearest one. Opening drops the held object at the agent; it counts
    as placed when it lands within the task's release tolerance of its goal.
    Opening anywhere else is not an error: the object stays where it fell,
    unplaced, and can be grasped again.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.shape != (ACT_DIM,):
        raise ContractViolation(f"actions are (dx, dy, g), got shape {a.shape}")
    nxt = s.copy()
    move = np.clip(np.nan_to_num(a[:2]), -MAX_MOVE, MAX_MOVE)
    nxt.agent_xy = np.clip(s.agent_xy + move, 0.0, 1.0)
    if nxt.held_object is not None:
        nxt.object_xy[nxt.held_object] = nxt.agent_xy

    close = 1.0 if a[2] >= 0.5 else 0.0
    if close == 1.0 and s.gripper == 0.0 and nxt.held_object is None:
        dists = np.linalg.norm(nxt.object_xy - nxt.agent_xy, axis=1)
        dists[nxt.placed] = np.inf
        i = int(np.argmin(dists))
        if dists[i] <= GRASP_RADIUS:
            nxt.held_object = i
            nxt.grasped[i] = True
            nxt.object_xy[i] = nxt.agent_xy
    elif close == 0.0 and nxt.held_object is not None:
        i = nxt.held_object
        nxt.held_object = None
        if np.linalg.norm(nxt.object_xy[i] - nxt.goal_xy[i]) <= s.spec.release_tol:
            nxt.placed[i] = True
    nxt.gripper = close
    return nxt


def _expert_move(delta: np.ndarray, noise: Rng) -> np.ndarray:
    scale = np.max(np.abs(delta)) / EXPERT_STEP
    if scale > 1.0:
        delta = delta / scale
    return delta + noise.uniform(2, low=-EXPERT_JITTER, high=EXPERT_JITTER)


def scripted_expert(s: PickPlaceState, noise: Rng) -> np.ndarray:
    """Proportional controller: reach the next unplaced object, grasp, carry to its goal, release"""
    if s.success:
        return np.zeros(ACT_DIM)
    if s.held_object is not None:
        delta = s.goal_xy[s.held_object] - s.agent_xy
        if np.linalg.norm(delta) <= EXPERT_RELEASE_DIST:
            return np.array([*noise.uniform(2, low=-EXPERT_JITTER, high=EXPERT_JITTER), 0.0])
        return np.array([*_expert_move(delta, noise), 1.0])

    target = int(np.flatnonzero(~s.placed)[0])
    delta = s.object_xy[target] - s.agent_xy
    if np.linalg.norm(delta) <= EXPERT_GRASP_DIST:
        if s.gripper == 0.0:
            return np.array([*noise.uniform(2, low=-EXPERT_JITTER, high=EXPERT_JITTER), 1.0])
        # closed without an object: open first so the next close is a grasp
        return np.zeros(ACT_DIM)
    return np.array([*_expert_move(delta, noise), 0.0])


@dataclass
class EpisodeRecord:
    """One demonstration: aligned observation and action sequences"""
    observations: np.ndarray
    actions: np.ndarray
    task_tag: str
    episode_id: int = 0

    def __post_init__(self):
        self.observations = np.atleast_2d(np.asarray(self.observations, dtype=np.float64))
        self.actions = np.atleast_2d(np.asarray(self.actions, dtype=np.float64))
        if self.observations.shape[0] != self.actions.shape[0]:
            raise ContractViolation(f"episode {self.episode_id}: {self.observations.shape[0]} observations "
                                    f"but {self.actions.shape[0]} actions")
        if self.task_tag not in TASK_TAGS:
            raise ConfigurationError(f"unknown task tag '{self.task_tag}'")

    def __len__(self) -> int:
        return self.actions.shape[0]

    @property
    def obs_dim(self) -> int:
        return self.observations.shape[1]

    @property
    def act_dim(self) -> int:
        return self.actions.shape[1]


def run_expert_episode(task_tag: str, rng: Rng, episode_id: int = 0) -> Tuple[EpisodeRecord, PickPlaceState]:
    state = initial_state(task_tag, rng)
    observations, actions = [], []
    for _ in range(EXPERT_MAX_STEPS):
        if state.success:
            break
        a = scripted_expert(state, rng)
        observations.append(state.observation())
        actions.append(a)
        state = pickplace_step(state, a)
    return EpisodeRecord(np.array(observations), np.array(actions), task_tag, episode_id), state


def gen_demos(task_tag: str, rng: Rng, episodes: int) -> List[EpisodeRecord]:
    """Scripted-expert demonstrations from randomized starts"""
    if episodes < 1:
        raise ConfigurationError(f"episodes must be >= 1, got {episodes}")
    get_task(task_tag)
    records = []
    for i in range(episodes):
        record, final = run_expert_episode(task_tag, rng.derive(i), episode_id=i)
        if not final.success:
            logger.warning(f"{task_tag} expert episode {i} did not finish (score {final.score():.2f})")
        records.append(record)
    logger.info(f"Generated {episodes} {task_tag} demos, {sum(len(r) for r in records)} steps")
    return records


def gmm_records(pairs: Sequence[Tuple[np.ndarray, np.ndarray]]) -> List[EpisodeRecord]:
    """Wrap (cond, x) pairs as single-step episodes"""
    return [EpisodeRecord(np.asarray(c)[None], np.asarray(x)[None], 'gmm', i) for i, (c, x) in enumerate(pairs)]


# Closed-loop execution

@runtime_checkable
class ChunkPolicy(Protocol):
    """Anything that maps an observation to an action chunk"""

    def act(self, obs: np.ndarray, rng: Rng) -> ActionChunk:
        ...


class FieldPolicy:
    """Sample chunks from a trained field, undoing the target normalization"""

    def __init__(self, net, cfg: SampleConfig, act_dim: int = ACT_DIM, normalizer=None):
        self.net = net
        self.cfg = cfg.validate()
        self.act_dim = act_dim
        self.normalizer = normalizer

    @property
    def chunk_h(self) -> int:
        return self.net.z_dim // self.act_dim

    def act(self, obs: np.ndarray, rng: Rng) -> ActionChunk:
        return generate_chunk(self.net, obs, self.cfg, rng, self.act_dim, self.normalizer)


class ExpertPolicy:
    """The scripted expert served through the chunk interface (replays it on a scratch state)"""

    def __init__(self, task_tag: str, chunk_h: int):
        self.task_tag = task_tag
        self.chunk_h = chunk_h

    def act(self, obs: np.ndarray, rng: Rng) -> ActionChunk:
        state = PickPlaceState.from_observation(obs, self.task_tag)
        actions = []
        for _ in range(self.chunk_h):
            a = scripted_expert(state, rng)
            actions.append(a)
            state = pickplace_step(state, a)
        return ActionChunk(np.array(actions))


@dataclass
class RolloutResult:
    score: float
    steps_used: int
    trajectory: List[PickPlaceState] = field(default_factory=list)
    replans: int = 0


def rollout_policy(net, task_tag: str, chunk_h: int, exec_h: Optional[int] = None,
                   cfg: Optional[SampleConfig] = None, rng: Optional[Rng] = None,
                   max_steps: int = EXPERT_MAX_STEPS, normalizer=None,
                   keep_trajectory: bool = True) -> RolloutResult:
    """Observe, generate a chunk, execute its first exec_h actions, repeat until success or max_steps"""
    exec_h = chunk_h if exec_h is None else exec_h
    if not 1 <= exec_h <= chunk_h:
        raise ConfigurationError(f"need 1 <= exec_h <= chunk_h, got exec_h={exec_h}, chunk_h={chunk_h}")
    rng = rng or Rng(0)
    policy = net if isinstance(net, ChunkPolicy) else FieldPolicy(net, cfg or SampleConfig(), normalizer=normalizer)
    if getattr(policy, 'chunk_h', chunk_h) != chunk_h:
        raise ContractViolation(f"policy produces chunks of {policy.chunk_h}, rollout asked for {chunk_h}")

    state = initial_state(task_tag, rng.derive(0))
    policy_rng = rng.derive(1)
    trajectory = [state] if keep_trajectory else []
    steps = 0
    replans = 0
    while steps < max_steps and not state.success:
        chunk = policy.act(state.observation(), policy_rng)
        replans += 1
        for a in chunk.actions[:exec_h]:
            state = pickplace_step(state, a)
            steps += 1
            if keep_trajectory:
                trajectory.append(state)
            if state.success or steps >= max_steps:
                break
    return RolloutResult(score=state.score(), steps_used=steps, trajectory=trajectory, replans=replans)


@dataclass
class SuccessReport:
    mean_pct: float
    per_round_pct: List[float]

    def to_dict(self) -> Dict[str, object]:
        return {'mean_pct': self.mean_pct, 'per_round_pct': self.per_round_pct}


def eval_success(net, task_tag: str, rounds: int = 10, trials: int = 20, chunk_h: int = 20,
                 exec_h: Optional[int] = None, cfg: Optional[SampleConfig] = None, seed: int = 0,
                 max_steps: int = EXPERT_MAX_STEPS, normalizer=None) -> SuccessReport:
    """rounds x trials rollouts with seeds derived from (seed, round, trial); scores as percentages"""
    if rounds < 1 or trials < 1:
        raise ConfigurationError(f"rounds and trials must be >= 1, got {rounds}, {trials}")
    master = Rng(seed)
    per_round = []
    for k in range(rounds):
        scores = [rollout_policy(net, task_tag, chunk_h, exec_h, cfg, master.derive(k, j), max_steps,
                                 normalizer, keep_trajectory=False).score
                  for j in range(trials)]
        per_round.append(100.0 * float(np.mean(scores)))
    mean = float(np.mean(per_round))
    logger.info(f"{task_tag}: success {mean:.1f}% over {rounds}x{trials} trials")
    return SuccessReport(mean_pct=mean, per_round_pct=per_round)

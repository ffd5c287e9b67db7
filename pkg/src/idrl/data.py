"""Replay storage, the binary expert-trajectory format and expert augmentation."""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class TransitionRecord:
    x: np.ndarray
    x_aux: np.ndarray
    action: np.ndarray
    r_seq: np.ndarray
    x_n: np.ndarray
    x_aux_n: np.ndarray
    done: bool


@dataclass
class RecordBatch:
    """Columnar n-step records.

    ``x_seq``/``a_seq`` hold the augmented pairs at ``t .. t+n-1`` so that learned
    rewards can be filled for every slot; ``mask`` marks slots inside the episode.
    """

    x: np.ndarray
    x_aux: np.ndarray
    action: np.ndarray
    r_seq: np.ndarray
    x_n: np.ndarray
    x_aux_n: np.ndarray
    done: np.ndarray
    x_seq: np.ndarray
    a_seq: np.ndarray
    mask: np.ndarray

    def __len__(self):
        return len(self.x)

    def __getitem__(self, i) -> TransitionRecord:
        return TransitionRecord(self.x[i], self.x_aux[i], self.action[i], self.r_seq[i],
                                self.x_n[i], self.x_aux_n[i], bool(self.done[i]))

    def take(self, idx) -> "RecordBatch":
        return RecordBatch(**{k: v[idx] for k, v in self.__dict__.items()})


class ReplayBuffer:
    """FIFO ring of single-step transitions; n-step records are assembled at sampling time."""

    def __init__(self, capacity: int, x_dim: int, x_aux_dim: int, action_dim: int, n_step: int = 1):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        if n_step < 1:
            raise ValueError("n_step must be >= 1")
        self.capacity = capacity
        self.n_step = n_step
        self.x = np.zeros((capacity, x_dim))
        self.x_aux = np.zeros((capacity, x_aux_dim))
        self.action = np.zeros((capacity, action_dim))
        self.x_next = np.zeros((capacity, x_dim))
        self.x_aux_next = np.zeros((capacity, x_aux_dim))
        self.done = np.zeros(capacity, dtype=bool)
        self.reward = np.full(capacity, np.nan)
        self.episode = np.zeros(capacity, dtype=np.int64)
        self.count = 0  # total pushes so far

    def __len__(self):
        return min(self.count, self.capacity)

    def push(self, x, x_aux, action, x_next, x_aux_next, done: bool, episode: int, reward: float = math.nan):
        i = self.count % self.capacity
        self.x[i], self.x_aux[i], self.action[i] = x, x_aux, action
        self.x_next[i], self.x_aux_next[i] = x_next, x_aux_next
        self.done[i] = done
        self.reward[i] = reward
        self.episode[i] = episode
        self.count += 1

    def _complete(self, idx: np.ndarray) -> np.ndarray:
        """Whether the n-step window starting at absolute index ``idx`` is fully recorded."""
        ok = np.ones(len(idx), dtype=bool)
        alive = np.ones(len(idx), dtype=bool)
        for k in range(self.n_step - 1):
            pos = (idx + k) % self.capacity
            alive &= ~self.done[pos]
            nxt = idx + k + 1
            ok &= ~alive | (nxt < self.count)
            alive &= nxt < self.count
        return ok

    def sample_indices(self, batch_size: int, rng) -> np.ndarray:
        if len(self) == 0:
            raise ValueError("cannot sample from an empty buffer")
        rng = np.random.default_rng(rng)
        lo = self.count - len(self)
        idx = rng.integers(lo, self.count, size=batch_size)
        if self.n_step > 1:
            bad = ~self._complete(idx)
            while bad.any():
                idx[bad] = rng.integers(lo, self.count, size=int(bad.sum()))
                bad = ~self._complete(idx)
        return idx

    def gather(self, idx: np.ndarray) -> RecordBatch:
        n, B = self.n_step, len(idx)
        pos0 = idx % self.capacity
        r_seq = np.zeros((B, n))
        mask = np.zeros((B, n), dtype=bool)
        x_seq = np.zeros((B, n, self.x.shape[1]))
        a_seq = np.zeros((B, n, self.action.shape[1]))
        last = pos0.copy()
        alive = np.ones(B, dtype=bool)
        for k in range(n):
            pos = (idx + k) % self.capacity
            use = alive & (idx + k < self.count)
            last = np.where(use, pos, last)
            mask[:, k] = use
            x_seq[use, k] = self.x[pos[use]]
            a_seq[use, k] = self.action[pos[use]]
            r_seq[use, k] = self.reward[pos[use]]
            alive = use & ~self.done[pos]
        return RecordBatch(
            x=self.x[pos0].copy(), x_aux=self.x_aux[pos0].copy(), action=self.action[pos0].copy(),
            r_seq=np.where(mask, r_seq, 0.0), x_n=self.x_next[last].copy(),
            x_aux_n=self.x_aux_next[last].copy(), done=~alive, x_seq=x_seq, a_seq=a_seq, mask=mask)

    def sample(self, batch_size: int, rng) -> RecordBatch:
        """Uniform with replacement over live records."""
        return self.gather(self.sample_indices(batch_size, rng))

    # persistence for resume
    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in ("x", "x_aux", "action", "x_next", "x_aux_next",
                                              "done", "reward", "episode")} | {"count": np.array(self.count)}

    def load_arrays(self, arrays):
        """Restore records; the saved buffer may have a different capacity (e.g. a longer resumed run)."""
        count = int(arrays["count"])
        old_cap = len(arrays["x"])
        live = np.arange(count - min(count, old_cap, self.capacity), count)
        for k in ("x", "x_aux", "action", "x_next", "x_aux_next", "done", "reward", "episode"):
            getattr(self, k)[live % self.capacity] = arrays[k][live % old_cap]
        self.count = count


def buffer_push(buffer: ReplayBuffer, *args, **kwargs):
    buffer.push(*args, **kwargs)


def buffer_sample(buffer: ReplayBuffer, batch_size: int, seed) -> RecordBatch:
    return buffer.sample(batch_size, seed)


# ---------------------------------------------------------------------------
# expert dataset
#
# little-endian:
#   "IDRLEXP1" | u32 version | u32 len + env id (utf-8) | u32 delay | u32 state_dim
#   | u32 action_dim | u32 n_traj
#   per trajectory: u32 n_steps | u32 has_terminal_obs | f64 true return (NaN if unknown)
#   | n_steps x (f64 obs[state_dim], f64 action[action_dim]) | [f64 obs[state_dim]]
#
# Observation t is s_{t-delay} as revealed at time t (s_0 repeated while the
# window is padded); action t is the action emitted at time t.

EXPERT_MAGIC = b"IDRLEXP1"
EXPERT_VERSION = 1  # version 1: the first `delay` padded steps are included


class DatasetFormatError(ValueError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass
class Trajectory:
    observations: np.ndarray  # [T or T+1, state_dim]
    actions: np.ndarray       # [T, action_dim]
    ret: float = math.nan

    def __post_init__(self):
        obs = np.asarray(self.observations, dtype=np.float64)
        self.observations = obs if obs.ndim == 2 else np.atleast_2d(obs)
        acts = np.asarray(self.actions, dtype=np.float64)
        self.actions = acts if acts.ndim == 2 else acts.reshape(len(acts), -1)

    @property
    def n_steps(self) -> int:
        return len(self.actions)

    @property
    def has_terminal(self) -> bool:
        return len(self.observations) == self.n_steps + 1


@dataclass
class ExpertDataset:
    env_id: str
    delay: int
    state_dim: int
    action_dim: int
    trajectories: list[Trajectory] = field(default_factory=list)
    version: int = EXPERT_VERSION

    @property
    def n_trajectories(self) -> int:
        return len(self.trajectories)

    def validate(self):
        for i, tr in enumerate(self.trajectories):
            n_obs = len(tr.observations)
            if n_obs not in (tr.n_steps, tr.n_steps + 1):
                raise DatasetFormatError(f"trajectory[{i}].observations",
                                         f"{n_obs} observations for {tr.n_steps} actions")
            if n_obs and tr.observations.shape[1] != self.state_dim:
                raise DatasetFormatError("state_dim", f"trajectory {i} has observation width "
                                         f"{tr.observations.shape[1]}, header says {self.state_dim}")
            if tr.n_steps and tr.actions.shape[1] != self.action_dim:
                raise DatasetFormatError("action_dim", f"trajectory {i} has action width "
                                         f"{tr.actions.shape[1]}, header says {self.action_dim}")

    def to_bytes(self) -> bytes:
        self.validate()
        env = self.env_id.encode("utf-8")
        out = [EXPERT_MAGIC, struct.pack("<II", self.version, len(env)), env,
               struct.pack("<IIII", self.delay, self.state_dim, self.action_dim, len(self.trajectories))]
        for tr in self.trajectories:
            out.append(struct.pack("<IId", tr.n_steps, int(tr.has_terminal), tr.ret))
            frames = np.concatenate([tr.observations[:tr.n_steps], tr.actions], axis=1)
            out.append(np.ascontiguousarray(frames, dtype="<f8").tobytes())
            if tr.has_terminal:
                out.append(np.ascontiguousarray(tr.observations[-1], dtype="<f8").tobytes())
        return b"".join(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "ExpertDataset":
        pos = 0

        def take(n, what):
            nonlocal pos
            if pos + n > len(data):
                raise DatasetFormatError(what, f"file truncated (needed {n} bytes at offset {pos})")
            chunk = data[pos:pos + n]
            pos += n
            return chunk

        if take(8, "magic") != EXPERT_MAGIC:
            raise DatasetFormatError("magic", "not an expert dataset file")
        version, env_len = struct.unpack("<II", take(8, "version"))
        if version != EXPERT_VERSION:
            raise DatasetFormatError("version", f"unsupported version {version}")
        env_id = take(env_len, "env_id").decode("utf-8")
        delay, sdim, adim, n_traj = struct.unpack("<IIII", take(16, "header"))
        if sdim < 1:
            raise DatasetFormatError("state_dim", "must be positive")
        if adim < 1:
            raise DatasetFormatError("action_dim", "must be positive")
        trajs = []
        for i in range(n_traj):
            n, term, ret = struct.unpack("<IId", take(16, f"trajectory[{i}].header"))
            if term not in (0, 1):
                raise DatasetFormatError(f"trajectory[{i}].has_terminal", f"expected 0 or 1, got {term}")
            raw = take(8 * n * (sdim + adim), f"trajectory[{i}].frames")
            frames = np.frombuffer(raw, dtype="<f8").reshape(n, sdim + adim).astype(np.float64)
            obs = frames[:, :sdim]
            if term:
                last = np.frombuffer(take(8 * sdim, f"trajectory[{i}].terminal"), dtype="<f8")
                obs = np.concatenate([obs, last.astype(np.float64)[None]], axis=0)
            trajs.append(Trajectory(obs, frames[:, sdim:], ret))
        if pos != len(data):
            raise DatasetFormatError("n_traj", f"{len(data) - pos} trailing bytes after {n_traj} trajectories")
        return cls(env_id, delay, sdim, adim, trajs, version)

    def summary_rows(self) -> list[dict]:
        return [{"trajectory": i, "length": tr.n_steps, "return": tr.ret}
                for i, tr in enumerate(self.trajectories)]

    def write_summary_csv(self, path):
        rows = self.summary_rows()
        rets = np.array([r["return"] for r in rows], dtype=np.float64)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["trajectory", "length", "return"])
            for r in rows:
                w.writerow([r["trajectory"], r["length"], repr(float(r["return"]))])
            if len(rets):
                w.writerow(["mean", float(np.mean([r["length"] for r in rows])), repr(float(np.mean(rets)))])
                w.writerow(["std", float(np.std([r["length"] for r in rows])), repr(float(np.std(rets)))])


def save_expert(dataset: ExpertDataset, path):
    Path(path).write_bytes(dataset.to_bytes())


def load_expert(path) -> ExpertDataset:
    return ExpertDataset.from_bytes(Path(path).read_bytes())


def check_delay(dataset: ExpertDataset, delay: int):
    if dataset.delay != delay:
        raise ValueError(f"expert dataset was recorded at delay {dataset.delay} but the run is configured "
                         f"for delay {delay}")


def _window(actions: np.ndarray, t: int, d: int, pad: np.ndarray) -> np.ndarray:
    rows = [actions[k] if k >= 0 else pad for k in range(t - d, t)]
    return np.concatenate(rows) if rows else np.zeros(0)


def augment_expert(dataset: ExpertDataset, delay: int, aux_delay: int | None = None, n_step: int = 1,
                   pad_action: np.ndarray | None = None) -> RecordBatch:
    """Re-index delayed expert sequences into n-step augmented records.

    ``x_t`` pairs the observation revealed at ``t`` with actions ``t-D .. t-1``
    (zero-padded before the episode start). Every trajectory end counts as an
    episode end: windows reaching it are truncated with ``done`` set. Auxiliary
    states that would need observations past the recorded end are NaN.
    """
    check_delay(dataset, delay)
    dataset.validate()
    aux = delay if aux_delay is None else aux_delay
    if not 0 <= aux <= delay:
        raise ValueError(f"aux delay must lie in [0, {delay}]")
    pad = np.zeros(dataset.action_dim) if pad_action is None else np.asarray(pad_action, dtype=np.float64)
    sdim, adim = dataset.state_dim, dataset.action_dim
    cols = {k: [] for k in ("x", "x_aux", "action", "x_n", "x_aux_n", "done", "x_seq", "a_seq", "mask")}
    for tr in dataset.trajectories:
        T, obs, acts = tr.n_steps, tr.observations, tr.actions
        n_obs = len(obs)

        def x_at(t):
            if t >= n_obs:
                return None
            return np.concatenate([obs[t], _window(acts, t, delay, pad)])

        def xa_at(t):
            k = t + delay - aux
            if k >= n_obs:
                return np.full(sdim + aux * adim, np.nan)
            return np.concatenate([obs[k], _window(acts, t, aux, pad)])

        for t in range(T):
            steps = min(n_step, T - t)
            done = t + n_step >= T
            x_t = x_at(t)
            succ = x_at(t + steps)
            if succ is None:
                succ = x_t  # unused: the window reaches the end, so no bootstrap
            mask = np.arange(n_step) < steps
            x_seq = np.zeros((n_step, x_t.shape[0]))
            a_seq = np.zeros((n_step, adim))
            for k in range(steps):
                x_seq[k] = x_at(t + k)
                a_seq[k] = acts[t + k]
            cols["x"].append(x_t)
            cols["x_aux"].append(xa_at(t))
            cols["action"].append(acts[t])
            cols["x_n"].append(succ)
            cols["x_aux_n"].append(xa_at(t + steps))
            cols["done"].append(done)
            cols["x_seq"].append(x_seq)
            cols["a_seq"].append(a_seq)
            cols["mask"].append(mask)
    B = len(cols["x"])
    x_dim = sdim + delay * adim
    xa_dim = sdim + aux * adim
    if B == 0:
        return RecordBatch(np.zeros((0, x_dim)), np.zeros((0, xa_dim)), np.zeros((0, adim)),
                           np.zeros((0, n_step)), np.zeros((0, x_dim)), np.zeros((0, xa_dim)),
                           np.zeros(0, dtype=bool), np.zeros((0, n_step, x_dim)),
                           np.zeros((0, n_step, adim)), np.zeros((0, n_step), dtype=bool))
    return RecordBatch(
        x=np.array(cols["x"]), x_aux=np.array(cols["x_aux"]), action=np.array(cols["action"]),
        r_seq=np.zeros((B, n_step)), x_n=np.array(cols["x_n"]), x_aux_n=np.array(cols["x_aux_n"]),
        done=np.array(cols["done"]), x_seq=np.array(cols["x_seq"]), a_seq=np.array(cols["a_seq"]),
        mask=np.array(cols["mask"]))

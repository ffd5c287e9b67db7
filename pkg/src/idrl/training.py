"""Training loops: adversarial imitation under delay, expert generation and behavior cloning."""

from __future__ import annotations

import csv
import json
import logging
import math
import shutil
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .config import Config
from .data import ExpertDataset, RecordBatch, ReplayBuffer, Trajectory, augment_expert, check_delay
from .delay import DelayedEnv, split_flat
from .discriminator import Discriminator, Pairs
from .envs import Env, make_env
from .nn import (CategoricalPolicyHead, GaussianPolicyHead, descend, load_checkpoint, load_module_state,
                 load_optimizer_state, make_adam, make_generator, module_state, optimizer_state,
                 save_checkpoint)
from .policy_opt import AuxDelayAgent, TorchBatch, train_iteration

log = logging.getLogger(__name__)

METRIC_FIELDS = ("step", "eval_return_mean", "eval_return_std", "disc_loss", "critic_loss", "actor_loss",
                 "reward_mean")


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# featurisation


class Featurizer:
    """Raw flat augmented rows -> network inputs (one-hot for tabular parts)."""

    def __init__(self, env: Env, delay: int):
        self.env, self.delay = env, delay
        self.sdim, self.adim = env.spec.state_dim, env.spec.action_dim
        self.dim = env.state_feature_dim + delay * env.action_feature_dim

    def __call__(self, flat) -> torch.Tensor:
        flat = np.atleast_2d(np.asarray(flat, dtype=np.float64))
        obs, win = split_flat(flat, self.sdim, self.adim, self.delay)
        parts = [self.env.encode_states(obs)]
        parts += [self.env.encode_actions(win[:, k]) for k in range(self.delay)]
        return torch.from_numpy(np.concatenate(parts, axis=1))

    def obs_only(self, flat) -> torch.Tensor:
        flat = np.atleast_2d(np.asarray(flat, dtype=np.float64))
        return torch.from_numpy(self.env.encode_states(flat[:, :self.sdim]))

    def actions(self, raw) -> torch.Tensor:
        raw = np.asarray(raw, dtype=np.float64).reshape(-1, self.adim)
        return torch.from_numpy(self.env.encode_actions(raw))


def action_row(action) -> np.ndarray:
    return np.atleast_1d(np.asarray(action, dtype=np.float64)).reshape(-1)


# ---------------------------------------------------------------------------
# metrics


@dataclass
class Metrics:
    rows: list = field(default_factory=list)

    def add(self, **row):
        self.rows.append({k: row.get(k) for k in METRIC_FIELDS})

    def column(self, name: str) -> np.ndarray:
        return np.array([math.nan if r[name] is None else r[name] for r in self.rows], dtype=np.float64)

    def final_return(self) -> float:
        return float(self.rows[-1]["eval_return_mean"]) if self.rows else math.nan

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(METRIC_FIELDS)
            for r in self.rows:
                w.writerow([_fmt(r[k]) if k != "step" else int(r[k]) for k in METRIC_FIELDS])


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def read_metrics_csv(path) -> Metrics:
    m = Metrics()
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            m.add(**{k: (int(row[k]) if k == "step" else (None if row[k] == "" else float(row[k])))
                     for k in METRIC_FIELDS})
    return m


def _mean(xs):
    return float(np.mean(xs)) if xs else None


# ---------------------------------------------------------------------------
# evaluation


def _eval_rng(base: int, episode: int) -> np.random.Generator:
    return np.random.default_rng([base, episode])


def evaluate_policy(env: Env, delay: int, act: Callable[[np.ndarray], object], episodes: int,
                    seed: int) -> np.ndarray:
    """Undiscounted true returns of ``act(flat_x)`` in the delayed env; episode ``e`` uses a fixed seed."""
    returns = np.zeros(episodes)
    denv = DelayedEnv(env, delay)
    for e in range(episodes):
        rng = _eval_rng(seed, e)
        x = denv.reset(rng)
        total = 0.0
        done = False
        while not done:
            x, done = denv.step(act(x.flat()), rng)
            total += denv.true_reward
        returns[e] = total
    return returns


def rollout_occupancy(env: Env, delay: int, act: Callable[[np.ndarray], object], n_steps: int,
                      seed: int) -> dict:
    """Empirical augmented state-action frequencies over ``n_steps`` steps of consecutive episodes."""
    counts: Counter = Counter()
    denv = DelayedEnv(env, delay)
    rng = np.random.default_rng(seed)
    x = denv.reset(rng)
    for _ in range(n_steps):
        flat = x.flat()
        a = act(flat)
        counts[(flat.tobytes(), action_row(a).tobytes())] += 1
        x, done = denv.step(a, rng)
        if done:
            x = denv.reset(rng)
    return {k: v / n_steps for k, v in counts.items()}


def occupancy_tv(p: dict, q: dict) -> float:
    keys = set(p) | set(q)
    return 0.5 * sum(abs(p.get(k, 0.0) - q.get(k, 0.0)) for k in keys)


def rollout_dataset(env: Env, delay: int, act: Callable[[np.ndarray], object], n_traj: int,
                    seed: int) -> ExpertDataset:
    """Record ``n_traj`` delayed trajectories: observation revealed at each step, action emitted, true return."""
    ds = ExpertDataset(env.env_id, delay, env.spec.state_dim, env.spec.action_dim)
    denv = DelayedEnv(env, delay)
    for i in range(n_traj):
        rng = np.random.default_rng([seed, i])
        x = denv.reset(rng)
        obs, acts, total, done = [env.state_row(x.delayed_obs)], [], 0.0, False
        while not done:
            a = act(x.flat())
            acts.append(action_row(a))
            x, done = denv.step(a, rng)
            obs.append(env.state_row(x.delayed_obs))
            total += denv.true_reward
        ds.trajectories.append(Trajectory(np.array(obs), np.array(acts), total))
    return ds


# ---------------------------------------------------------------------------
# agent-based trainer


def make_agent(cfg: Config, env: Env, generator: torch.Generator) -> AuxDelayAgent:
    delay, aux, n = cfg.delay.resolved()
    a = cfg.agent
    gamma = a.gamma or env.spec.gamma
    common = dict(actor_hidden=a.actor_hidden, critic_hidden=a.critic_hidden, gamma=gamma, alpha=a.alpha,
                  polyak=a.polyak, n_step=n, lr=a.lr)
    x_dim = Featurizer(env, delay).dim
    xa_dim = Featurizer(env, aux).dim
    if env.spec.discrete:
        return AuxDelayAgent(x_dim, xa_dim, generator, n_actions=env.spec.n_actions, **common)
    return AuxDelayAgent(x_dim, xa_dim, generator, action_low=env.spec.action_low,
                         action_high=env.spec.action_high, **common)


def agent_act(agent: AuxDelayAgent, feat: Featurizer, env: Env, deterministic: bool = True,
              generator: torch.Generator | None = None) -> Callable[[np.ndarray], object]:
    def act(flat):
        a = agent.act(feat(flat), deterministic=deterministic, generator=generator)[0]
        return int(a) if env.spec.discrete else a.numpy().copy()
    return act


class Trainer:
    """Sequential collect/update/evaluate loop.

    With ``expert`` given, rewards come from the discriminator (the true reward
    is only read by the evaluator); without it, the agent learns from the
    environment's true reward.
    """

    def __init__(self, cfg: Config, env: Env | None = None, expert: ExpertDataset | None = None,
                 run_dir=None, steps: int | None = None):
        self.cfg = cfg
        self.env = env if env is not None else make_env(cfg.env.id, **cfg.env.params)
        self.delay, self.aux_delay, self.n_step = cfg.delay.resolved()
        self.steps = cfg.run.steps if steps is None else steps
        self.run_dir = None if run_dir is None else Path(run_dir)
        if self.run_dir is not None:
            self.run_dir.mkdir(parents=True, exist_ok=True)
        seeds = np.random.SeedSequence(cfg.run.seed).generate_state(8)
        self.rng_env = np.random.default_rng(seeds[0])
        self.rng_act = np.random.default_rng(seeds[1])
        self.rng_buf = np.random.default_rng(seeds[2])
        self.rng_coin = np.random.default_rng(seeds[3])
        self.rng_exp = np.random.default_rng(seeds[4])
        self.eval_seed = int(seeds[5])
        self.gen_pol = make_generator(int(seeds[6]))
        self.gen_disc = make_generator(int(seeds[7]))
        init_gen = make_generator(int(seeds[6]) ^ 0x5EED)

        self.feat = Featurizer(self.env, self.delay)
        self.feat_aux = Featurizer(self.env, self.aux_delay)
        self.agent = make_agent(cfg, self.env, init_gen)
        self.denv = DelayedEnv(self.env, self.delay, self.aux_delay)
        sd, ad = self.env.spec.state_dim, self.env.spec.action_dim
        self.buffer = ReplayBuffer(min(cfg.run.buffer_size, max(self.steps, 1)), sd + self.delay * ad,
                                   sd + self.aux_delay * ad, ad, self.n_step)
        self.imitation = expert is not None
        self.disc = None
        if self.imitation:
            check_delay(expert, self.delay)
            if expert.env_id != self.env.env_id:
                raise ValueError(f"expert dataset was recorded on {expert.env_id!r}, run uses {self.env.env_id!r}")
            rec = augment_expert(expert, self.delay, self.aux_delay, 1)
            if len(rec) == 0:
                raise ValueError("expert dataset contains no transitions")
            self.expert_pairs = Pairs(self.feat(rec.x), torch.from_numpy(rec.action),
                                      self.feat.actions(rec.action))
            d = cfg.disc
            self.disc = Discriminator(self.feat.dim + self.env.action_feature_dim, d.hidden, self.agent.actor,
                                      init_gen, d.delta, d.lambda_gp, d.lambda_ent, d.lr)
        self.metrics = Metrics()
        self.step = 0
        self.episode = -1
        self._acc = {"disc_loss": [], "critic_loss": [], "actor_loss": [], "reward_mean": []}

    # -- batches ------------------------------------------------------------
    def _pairs(self, x, a) -> Pairs:
        return Pairs(self.feat(x), torch.from_numpy(a), self.feat.actions(a))

    def _torch_batch(self, rec: RecordBatch, r_seq: np.ndarray) -> TorchBatch:
        return TorchBatch(x=self.feat(rec.x), x_aux=self.feat_aux(rec.x_aux), a=torch.from_numpy(rec.action),
                          a_feat=self.feat.actions(rec.action), r_seq=torch.from_numpy(r_seq),
                          x_n=self.feat(rec.x_n), x_aux_n=self.feat_aux(rec.x_aux_n),
                          done=torch.from_numpy(rec.done.astype(np.float64)))

    def fill_rewards(self, rec: RecordBatch) -> np.ndarray:
        """Learned reward for every slot of the n-step window, evaluated with the current (frozen) reward net."""
        B, n = rec.mask.shape
        pairs = self._pairs(rec.x_seq.reshape(B * n, -1), rec.a_seq.reshape(B * n, -1))
        r = self.disc.reward(pairs).numpy().reshape(B, n)
        return np.where(rec.mask, r, 0.0)

    def update(self):
        c = self.cfg
        if self.imitation:
            for _ in range(c.disc.updates_per_step):
                idx = self.rng_exp.integers(0, len(self.expert_pairs), size=c.disc.batch_size)
                exp = Pairs(self.expert_pairs.x[idx], self.expert_pairs.a[idx], self.expert_pairs.a_feat[idx])
                gen = self.buffer.sample(c.disc.batch_size, self.rng_buf)
                loss = self.disc.update(exp, self._pairs(gen.x, gen.action), self.gen_disc)
                self._check("disc_loss", loss)
        for _ in range(c.agent.updates_per_step):
            rec = self.buffer.sample(c.agent.batch_size, self.rng_buf)
            r_seq = self.fill_rewards(rec) if self.imitation else rec.r_seq
            self._acc["reward_mean"].append(float(r_seq[rec.mask].mean()))
            out = train_iteration(self.agent, self._torch_batch(rec, r_seq), self.rng_coin, self.gen_pol)
            self._check("critic_loss", out["critic_loss"])
            self._check("actor_loss", out["actor_loss"])

    def _check(self, name: str, value: float):
        if not math.isfinite(value):
            path = None
            if self.run_dir is not None:
                ck = self.run_dir / "checkpoints"
                ck.mkdir(parents=True, exist_ok=True)
                path = ck / f"diagnostic_step{self.step:08d}.ckpt"
                save_checkpoint(path, self.model_sections())
            raise TrainingDiverged(f"{name} became {value} at step {self.step}"
                                   + (f"; diagnostic checkpoint written to {path}" if path else ""))
        self._acc[name].append(value)

    # -- main loop ----------------------------------------------------------
    def random_action(self):
        spec = self.env.spec
        if spec.discrete:
            return int(self.rng_act.integers(0, spec.n_actions))
        return self.rng_act.uniform(spec.action_low, spec.action_high)

    def policy_action(self, flat):
        a = self.agent.act(self.feat(flat), deterministic=False, generator=self.gen_pol)[0]
        return int(a) if self.env.spec.discrete else a.numpy().copy()

    def evaluate(self) -> np.ndarray:
        act = agent_act(self.agent, self.feat, self.env, deterministic=True)
        return evaluate_policy(self.env, self.delay, act, self.cfg.run.eval_episodes, self.eval_seed)

    def run(self) -> Metrics:
        c = self.cfg.run
        batch_need = max(self.cfg.agent.batch_size, self.cfg.disc.batch_size if self.imitation else 1)
        while self.step < self.steps:
            if self.denv.done:
                self.denv.reset(self.rng_env)
                self.episode += 1
            x, xa = self.denv.observe().flat(), self.denv.observe_aux().flat()
            a = self.random_action() if self.step < c.warmup else self.policy_action(x)
            x_next, done = self.denv.step(a, self.rng_env)
            reward = math.nan if self.imitation else self.denv.true_reward
            self.buffer.push(x, xa, action_row(a), x_next.flat(), self.denv.observe_aux().flat(), done,
                             self.episode, reward)
            self.step += 1
            if self.step >= c.warmup and len(self.buffer) >= batch_need:
                self.update()
            if self.step % c.eval_interval == 0 or self.step == self.steps:
                self.record_eval()
        return self.metrics

    def record_eval(self):
        rets = self.evaluate()
        self.metrics.add(step=self.step, eval_return_mean=float(rets.mean()), eval_return_std=float(rets.std()),
                         **{k: _mean(v) for k, v in self._acc.items()})
        self._acc = {k: [] for k in self._acc}
        log.info("step %d  return %.3f +- %.3f", self.step, rets.mean(), rets.std())
        if self.run_dir is not None:
            self.metrics.write_csv(self.run_dir / "metrics.csv")
            self.save()

    # -- persistence --------------------------------------------------------
    def model_sections(self) -> dict:
        out = {}
        for name, mod in self.agent.modules().items():
            out |= module_state(f"agent.{name}", mod)
        for name, opt in self.agent.optimizers().items():
            out |= optimizer_state(f"opt.{name}", opt)
        if self.disc is not None:
            out |= module_state("disc.reward_net", self.disc.reward_net)
            out |= optimizer_state("opt.disc", self.disc.opt)
        return out

    def load_model_sections(self, sections):
        for name, mod in self.agent.modules().items():
            load_module_state(f"agent.{name}", mod, sections)
        for name, opt in self.agent.optimizers().items():
            load_optimizer_state(f"opt.{name}", opt, sections)
        if self.disc is not None:
            load_module_state("disc.reward_net", self.disc.reward_net, sections)
            load_optimizer_state("opt.disc", self.disc.opt, sections)

    def _loop_state(self) -> dict:
        return {
            "step": self.step,
            "episode": self.episode,
            "rng": {k: getattr(self, k).bit_generator.state
                    for k in ("rng_env", "rng_act", "rng_buf", "rng_coin", "rng_exp")},
            "torch_rng": {k: getattr(self, k).get_state().tolist() for k in ("gen_pol", "gen_disc")},
            "denv": {
                "states": [np.asarray(s, dtype=np.float64).tolist() for s in self.denv._states],
                "actions": [np.asarray(a, dtype=np.float64).tolist() for a in self.denv._actions],
                "rewards": list(self.denv._rewards),
                "t": self.denv.t,
                "done": self.denv.done,
            },
            "metrics": self.metrics.rows,
        }

    def save(self):
        ck = self.run_dir / "checkpoints"
        ck.mkdir(parents=True, exist_ok=True)
        tag = f"step_{self.step:08d}"
        save_checkpoint(ck / f"{tag}.ckpt", self.model_sections())
        (ck / f"{tag}.json").write_text(json.dumps(self._loop_state()))
        # only the newest replay snapshot is kept; it is large and only needed for resume
        tmp = ck / "replay.tmp.npz"
        with open(tmp, "wb") as fh:
            np.savez(fh, **self.buffer.state_arrays())
        shutil.move(tmp, ck / "replay.npz")
        (ck / "latest").write_text(tag + "\n")

    def resume(self) -> bool:
        """Restore from ``run_dir/checkpoints/latest``; returns False when there is nothing to resume."""
        ck = None if self.run_dir is None else self.run_dir / "checkpoints"
        if ck is None or not (ck / "latest").exists():
            return False
        tag = (ck / "latest").read_text().strip()
        self.load_model_sections(load_checkpoint(ck / f"{tag}.ckpt"))
        st = json.loads((ck / f"{tag}.json").read_text())
        self.step, self.episode = st["step"], st["episode"]
        for k, v in st["rng"].items():
            getattr(self, k).bit_generator.state = v
        for k, v in st["torch_rng"].items():
            getattr(self, k).set_state(torch.tensor(v, dtype=torch.uint8))
        d = st["denv"]
        self.denv._states = [self._restore_state(s) for s in d["states"]]
        self.denv._actions = [self._restore_action(a) for a in d["actions"]]
        self.denv._rewards = list(d["rewards"])
        self.denv.t, self.denv.done = d["t"], d["done"]
        self.metrics = Metrics(list(st["metrics"]))
        with np.load(ck / "replay.npz") as arrays:
            self.buffer.load_arrays(arrays)
        return True

    def _restore_state(self, s):
        return int(round(s)) if self.env.spec.discrete else np.asarray(s, dtype=np.float64)

    def _restore_action(self, a):
        return int(round(a)) if self.env.spec.discrete else np.asarray(a, dtype=np.float64)


def train_idrl(cfg: Config, expert: ExpertDataset, env: Env | None = None, run_dir=None,
               resume: bool = False) -> Trainer:
    """Adversarial imitation under delay; the returned trainer holds the agent, discriminator and metrics."""
    tr = Trainer(cfg, env, expert, run_dir)
    if resume:
        tr.resume()
    tr.run()
    return tr


def train_expert(cfg: Config, env: Env | None = None, n_traj: int | None = None,
                 run_dir=None) -> tuple[Trainer, ExpertDataset]:
    """Train on the true reward for ``expert.train_steps`` steps, then record trajectories."""
    tr = Trainer(cfg, env, None, run_dir, steps=cfg.expert.train_steps)
    tr.run()
    n = cfg.expert.n_traj if n_traj is None else n_traj
    gen = make_generator(cfg.run.seed + 1) if cfg.expert.stochastic else None
    act = agent_act(tr.agent, tr.feat, tr.env, deterministic=not cfg.expert.stochastic, generator=gen)
    seed = int(np.random.SeedSequence([cfg.run.seed, 7]).generate_state(1)[0])
    return tr, rollout_dataset(tr.env, tr.delay, act, n, seed)


# ---------------------------------------------------------------------------
# behavior cloning


class BcPolicy:
    """Maximum-likelihood imitator over either the delayed observation or the full augmented state."""

    def __init__(self, env: Env, delay: int, input_mode: str, hidden, generator: torch.Generator):
        if input_mode not in ("delayed_obs", "augmented"):
            raise ValueError(f"unknown input mode {input_mode!r}")
        self.env, self.delay, self.input_mode = env, delay, input_mode
        self.feat = Featurizer(env, delay)
        in_dim = self.feat.dim if input_mode == "augmented" else env.state_feature_dim
        if env.spec.discrete:
            self.head = CategoricalPolicyHead(in_dim, env.spec.n_actions, hidden, generator)
        else:
            self.head = GaussianPolicyHead(in_dim, env.spec.action_dim, hidden, env.spec.action_low,
                                           env.spec.action_high, generator)

    def inputs(self, flat) -> torch.Tensor:
        return self.feat(flat) if self.input_mode == "augmented" else self.feat.obs_only(flat)

    def act(self, flat):
        with torch.no_grad():
            a = self.head.mode(self.inputs(flat))[0]
        return int(a) if self.env.spec.discrete else a.numpy().copy()


def train_bc(cfg: Config, expert: ExpertDataset, input_mode: str, env: Env | None = None,
             run_dir=None) -> tuple[BcPolicy, Metrics]:
    """Fit expert actions by log-likelihood; ``metrics.step`` counts epochs. Never reads rewards."""
    env = env if env is not None else make_env(cfg.env.id, **cfg.env.params)
    delay = cfg.delay.delay
    check_delay(expert, delay)
    seeds = np.random.SeedSequence([cfg.run.seed, 11]).generate_state(3)
    policy = BcPolicy(env, delay, input_mode, cfg.bc.hidden, make_generator(int(seeds[0])))
    rec = augment_expert(expert, delay)
    inputs = policy.inputs(rec.x) if len(rec) else None
    actions = torch.from_numpy(rec.action)
    opt = make_adam(policy.head.parameters(), cfg.bc.lr)
    rng = np.random.default_rng(seeds[1])
    metrics = Metrics()
    run_dir = None if run_dir is None else Path(run_dir)
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
    for epoch in range(1, cfg.bc.epochs + 1):
        losses = []
        order = rng.permutation(len(rec))
        for lo in range(0, len(order), cfg.bc.batch_size):
            idx = torch.from_numpy(order[lo:lo + cfg.bc.batch_size])
            loss = -policy.head.log_prob(inputs[idx], actions[idx]).mean()
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"behavior cloning loss became {float(loss)} at epoch {epoch}")
            descend(policy.head, opt, loss)
            losses.append(float(loss.detach()))
        if epoch % cfg.bc.eval_interval == 0 or epoch == cfg.bc.epochs:
            rets = evaluate_policy(env, delay, policy.act, cfg.run.eval_episodes, int(seeds[2]))
            metrics.add(step=epoch, eval_return_mean=float(rets.mean()), eval_return_std=float(rets.std()),
                        actor_loss=_mean(losses))
            if run_dir is not None:
                metrics.write_csv(run_dir / "metrics.csv")
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(run_dir / "bc_policy.ckpt", module_state("bc", policy.head))
        if not metrics.rows:
            metrics.write_csv(run_dir / "metrics.csv")
    return policy, metrics

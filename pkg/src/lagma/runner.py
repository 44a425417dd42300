"""Training orchestration: rollouts, evaluation, metrics, checkpoints.

One call to run_training drives the whole pipeline for one seed: collect an
episode with the current greedy-plus-exploration policy, push it to replay,
take one learner step (which quantizes states, annotates intrinsic rewards,
and runs the cadenced latent-model update when the variant asks for them),
and on every eval-interval boundary roll fresh greedy episodes and append
one JSON line of metrics. Everything random flows from named generator
streams spawned off the config seed, so equal seeds give equal runs and a
checkpoint restores a run bit-exactly.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import envs, marl
from . import vq as vqlat
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .codebook import CodeValueTable, SequenceBuffer
from .config import ExperimentConfig, config_to_mapping, mapping_to_config

logger = logging.getLogger(__name__)

# Evaluation episodes draw env seeds from far above any training episode
# index, keeping the two seed families disjoint.
EVAL_SEED_OFFSET = 1 << 32

METRICS_NAME = "metrics.jsonl"
CHECKPOINT_NAME = "checkpoint.ckpt"
_RNG_STREAMS = ("param", "vq_init", "action", "replay")


@dataclass(frozen=True)
class MetricsRecord:
    """One evaluation point of a training run."""

    env_step: int
    win_rate: float
    mean_return: float
    td_loss: float
    mean_intrinsic: float
    codes_used_fraction: float
    epsilon: float

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self))

    @classmethod
    def from_json(cls, line: str) -> "MetricsRecord":
        return cls(**json.loads(line))


@dataclass
class EvalResult:
    wins: list
    returns: list

    @property
    def win_rate(self) -> float:
        return float(np.mean([1.0 if w else 0.0 for w in self.wins]))

    @property
    def mean_return(self) -> float:
        return float(np.mean(self.returns))


def rollout_episode(env_spec: envs.EnvSpec, agent_spec: marl.AgentSpec,
                    params: ad.ParamSet, eps: float,
                    rng: np.random.Generator, env_seed: int):
    """Play one episode; returns (Episode, won, undiscounted return)."""
    state, obs = envs.reset(env_spec, env_seed)
    states = [envs.global_state(env_spec, state)]
    obs_hist = [obs]
    avail_hist = [envs.avail_actions(env_spec, state)]
    actions_hist, rewards, term_flags = [], [], []
    hidden = marl.init_hidden(agent_spec, env_spec.n_agents)
    prev = None
    won = False
    while True:
        acts, hidden = marl.select_actions(
            agent_spec, params, obs, prev, avail_hist[-1], hidden, eps, rng)
        state, obs, reward, terminated, won = envs.step(env_spec, state, acts)
        actions_hist.append(acts)
        rewards.append(reward)
        term_flags.append(1.0 if terminated else 0.0)
        states.append(envs.global_state(env_spec, state))
        obs_hist.append(obs)
        avail_hist.append(envs.avail_actions(env_spec, state))
        prev = acts
        if terminated:
            break
    episode = marl.Episode(
        state=np.asarray(states),
        obs=np.asarray(obs_hist),
        avail=np.asarray(avail_hist, dtype=bool),
        actions=np.asarray(actions_hist, dtype=np.int64),
        reward=np.asarray(rewards, dtype=np.float64),
        terminated=np.asarray(term_flags, dtype=np.float64),
    )
    return episode, won, float(np.sum(rewards))


def evaluate_policy(env_spec: envs.EnvSpec, agent_spec: marl.AgentSpec,
                    params: ad.ParamSet, n_episodes: int, seed_base: int,
                    parallel: int = 1) -> EvalResult:
    """Greedy evaluation over n_episodes with per-index seeds.

    Episode i always runs env seed seed_base + i with its own generator, so
    the result is one fixed function of (params, seed_base, n_episodes)
    whether episodes run serially or across parallel workers.
    """
    if n_episodes < 1:
        raise ValueError("n_episodes must be at least 1")

    def one(i: int):
        rng = np.random.default_rng(seed_base + i)
        _, won, ret = rollout_episode(env_spec, agent_spec, params, 0.0,
                                      rng, seed_base + i)
        return won, ret

    if parallel > 1:
        with ThreadPoolExecutor(max_workers=parallel) as pool:
            outcomes = list(pool.map(one, range(n_episodes)))
    else:
        outcomes = [one(i) for i in range(n_episodes)]
    return EvalResult(wins=[w for w, _ in outcomes],
                      returns=[r for _, r in outcomes])


class TrainingRun:
    """All live state of one seeded run, resumable from a checkpoint."""

    def __init__(self, config: ExperimentConfig, out_dir=None,
                 zero_intrinsic: bool = False, parallel_eval: int = 1):
        self.config = config
        self.out_dir = out_dir
        self.zero_intrinsic = zero_intrinsic
        self.parallel_eval = parallel_eval
        self.wiring = config.wiring
        env = config.env
        streams = np.random.SeedSequence(config.seed).spawn(len(_RNG_STREAMS))
        self.rngs = {name: np.random.default_rng(seq)
                     for name, seq in zip(_RNG_STREAMS, streams)}
        self.learner = marl.Learner(
            envs.obs_dim(env), envs.state_dim(env), envs.n_actions(env),
            env.n_agents, config.learner, self.rngs["param"])
        self.vq_model = None
        self.vq_optimizer = None
        self.value_table = None
        self.seq_buffer = None
        if self.wiring.use_vq:
            self.vq_model = vqlat.VqModel(config.vq, envs.state_dim(env),
                                          self.rngs["vq_init"])
            self.vq_optimizer = ad.Adam(lr=config.learner.lr)
            self.value_table = CodeValueTable(config.vq.n_codes, config.m)
            self.seq_buffer = SequenceBuffer(config.vq.n_codes, config.k)
        self.records: list[MetricsRecord] = []
        self.train_episode_counter = 0
        self.eval_rounds = 0
        self.last_eval_bucket = 0
        self._loss_sum = 0.0
        self._loss_n = 0
        self._ri_sum = 0.0
        self._ri_n = 0
        self._codes_window: set[int] = set()
        if out_dir is not None:
            os.makedirs(out_dir, exist_ok=True)
            self.metrics_path = os.path.join(out_dir, METRICS_NAME)
            self.checkpoint_path = os.path.join(out_dir, CHECKPOINT_NAME)
        else:
            self.metrics_path = None
            self.checkpoint_path = None

    # -- the loop ---------------------------------------------------------

    def run(self) -> list[MetricsRecord]:
        cfg = self.config
        learner = self.learner
        if self.eval_rounds == 0:
            self._eval_and_record()
        while learner.env_steps < cfg.total_env_steps:
            eps = learner.current_epsilon()
            episode, _, _ = rollout_episode(
                cfg.env, learner.agent_spec, learner.params, eps,
                self.rngs["action"], self.train_episode_counter)
            self.train_episode_counter += 1
            learner.observe_episode(episode)
            stats = marl.train_step(
                learner, learner.replay, self.rngs["replay"],
                vq_model=self.vq_model, vq_optimizer=self.vq_optimizer,
                value_table=self.value_table, seq_buffer=self.seq_buffer,
                intrinsic_config=cfg.intrinsic,
                vq_mode=self.wiring.coverage_mode,
                n_freq_vq=cfg.n_freq_vq, n_freq_cd=cfg.n_freq_cd,
                use_intrinsic=self.wiring.use_intrinsic
                and not self.zero_intrinsic)
            if stats is not None:
                self._absorb(stats)
            bucket = learner.env_steps // cfg.eval_interval
            if bucket > self.last_eval_bucket:
                self.last_eval_bucket = bucket
                self._eval_and_record()
        self.save()
        return self.records

    def _absorb(self, stats: dict) -> None:
        self._loss_sum += stats["td_loss"]
        self._loss_n += 1
        self._ri_sum += stats.get("r_int_mean", 0.0)
        self._ri_n += 1
        if "codes_seen" in stats:
            self._codes_window.update(int(z) for z in stats["codes_seen"])
        if logger.isEnabledFor(logging.DEBUG):
            shown = {k: v for k, v in stats.items() if np.isscalar(v)}
            logger.debug("train step %d: %s", self.learner.train_steps, shown)

    def _eval_and_record(self) -> None:
        cfg = self.config
        result = evaluate_policy(
            cfg.env, self.learner.agent_spec, self.learner.params,
            cfg.eval_episodes,
            EVAL_SEED_OFFSET + self.eval_rounds * cfg.eval_episodes,
            self.parallel_eval)
        codes_fraction = 0.0
        if self.vq_model is not None and cfg.vq.n_codes > 0:
            codes_fraction = len(self._codes_window) / cfg.vq.n_codes
        record = MetricsRecord(
            env_step=self.learner.env_steps,
            win_rate=result.win_rate,
            mean_return=result.mean_return,
            td_loss=self._loss_sum / self._loss_n if self._loss_n else 0.0,
            mean_intrinsic=self._ri_sum / self._ri_n if self._ri_n else 0.0,
            codes_used_fraction=codes_fraction,
            epsilon=self.learner.current_epsilon(),
        )
        self.records.append(record)
        self.eval_rounds += 1
        self._loss_sum = 0.0
        self._loss_n = 0
        self._ri_sum = 0.0
        self._ri_n = 0
        self._codes_window = set()
        if self.metrics_path is not None:
            with open(self.metrics_path, "a", encoding="utf-8") as fh:
                fh.write(record.to_json() + "\n")
                fh.flush()
        logger.info(
            "step %d: win_rate %.3f, mean_return %.1f, td_loss %.4f, "
            "mean_intrinsic %.4f, codes %.2f, eps %.3f",
            record.env_step, record.win_rate, record.mean_return,
            record.td_loss, record.mean_intrinsic,
            record.codes_used_fraction, record.epsilon)

    # -- checkpointing ----------------------------------------------------

    def save(self, path=None) -> None:
        """Write the full run state (and replay contents alongside)."""
        path = path or self.checkpoint_path
        if path is None:
            return
        learner = self.learner
        meta = {
            "kind": "training-run",
            "config": config_to_mapping(self.config),
            "zero_intrinsic": self.zero_intrinsic,
            "counters": {
                "train_steps": learner.train_steps,
                "env_steps": learner.env_steps,
                "episodes_seen": learner.episodes_seen,
                "train_episode_counter": self.train_episode_counter,
                "eval_rounds": self.eval_rounds,
                "last_eval_bucket": self.last_eval_bucket,
                "opt_learner_steps": learner.optimizer.step_count,
                "opt_vq_steps":
                    self.vq_optimizer.step_count if self.vq_optimizer else 0,
            },
            "window": {
                "loss_sum": float(self._loss_sum), "loss_n": self._loss_n,
                "ri_sum": float(self._ri_sum), "ri_n": self._ri_n,
                "codes": sorted(self._codes_window),
            },
            "rng": {name: _rng_state(gen) for name, gen in self.rngs.items()},
            "replay": {
                "total_added": learner.replay.total_added,
                "n_episodes": len(learner.replay),
            },
            "value_table": None,
            "seq_buffer": None,
        }
        if self.value_table is not None:
            meta["value_table"] = {
                "buffers": self.value_table.state(),
                "visits": [self.value_table.visits(z)
                           for z in range(self.config.vq.n_codes)],
            }
        if self.seq_buffer is not None:
            meta["seq_buffer"] = {
                "heaps": self.seq_buffer.state(),
                "insert_count": self.seq_buffer._insert_count,
            }
        arrays: dict[str, np.ndarray] = {}
        for name in learner.params.names():
            arrays[f"theta.{name}"] = learner.params[name].data
            arrays[f"target.{name}"] = learner.target_params[name].data
        _pack_adam(arrays, "opt.learner", learner.optimizer)
        if self.vq_model is not None:
            for name in self.vq_model.params.names():
                arrays[f"vq.{name}"] = self.vq_model.params[name].data
            _pack_adam(arrays, "opt.vq", self.vq_optimizer)
        save_checkpoint(path, meta, arrays)
        _save_replay(f"{path}.replay", learner.replay)

    def restore(self, path=None) -> None:
        """Load a checkpoint written by save into this freshly-built run.

        The whole file is parsed and shape-checked against this run's
        parameters before anything is assigned.
        """
        path = path or self.checkpoint_path
        meta, arrays = load_checkpoint(path)
        stored = config_to_mapping(mapping_to_config(meta["config"]))
        current = config_to_mapping(self.config)
        stored["run"].pop("total_env_steps")
        current["run"].pop("total_env_steps")
        if stored != current:
            raise CheckpointError(
                "checkpoint config does not match the requested config "
                "(only total_env_steps may differ for a resume)")
        learner = self.learner
        expected: dict[str, tuple] = {}
        for name in learner.params.names():
            expected[f"theta.{name}"] = learner.params[name].data.shape
            expected[f"target.{name}"] = learner.target_params[name].data.shape
        if self.vq_model is not None:
            for name in self.vq_model.params.names():
                expected[f"vq.{name}"] = self.vq_model.params[name].data.shape
        for name, shape in expected.items():
            if name not in arrays:
                raise CheckpointError(f"checkpoint is missing array {name!r}")
            if arrays[name].shape != shape:
                raise CheckpointError(
                    f"shape mismatch for {name!r}: checkpoint has "
                    f"{arrays[name].shape}, this config needs {shape}")
        _check_adam_arrays(arrays, "opt.learner", learner.params)
        if self.vq_model is not None:
            _check_adam_arrays(arrays, "opt.vq", self.vq_model.params)
        episodes, total_added = _load_replay(f"{path}.replay")
        if len(episodes) != meta["replay"]["n_episodes"]:
            raise CheckpointError("replay sidecar does not match the manifest")

        for name in learner.params.names():
            learner.params[name].data[...] = arrays[f"theta.{name}"]
            learner.target_params[name].data[...] = arrays[f"target.{name}"]
        _unpack_adam(arrays, "opt.learner", learner.optimizer,
                     meta["counters"]["opt_learner_steps"])
        if self.vq_model is not None:
            for name in self.vq_model.params.names():
                self.vq_model.params[name].data[...] = arrays[f"vq.{name}"]
            _unpack_adam(arrays, "opt.vq", self.vq_optimizer,
                         meta["counters"]["opt_vq_steps"])
            vt = meta["value_table"]
            self.value_table.load_state(vt["buffers"], vt["visits"])
            sb = meta["seq_buffer"]
            self.seq_buffer.load_state(sb["heaps"], sb["insert_count"])

        counters = meta["counters"]
        learner.train_steps = int(counters["train_steps"])
        learner.env_steps = int(counters["env_steps"])
        learner.episodes_seen = int(counters["episodes_seen"])
        self.train_episode_counter = int(counters["train_episode_counter"])
        self.eval_rounds = int(counters["eval_rounds"])
        self.last_eval_bucket = int(counters["last_eval_bucket"])
        window = meta["window"]
        self._loss_sum = float(window["loss_sum"])
        self._loss_n = int(window["loss_n"])
        self._ri_sum = float(window["ri_sum"])
        self._ri_n = int(window["ri_n"])
        self._codes_window = set(int(z) for z in window["codes"])
        for name, gen in self.rngs.items():
            gen.bit_generator.state = meta["rng"][name]
        learner.replay.load(episodes, total_added)
        if self.metrics_path is not None and os.path.exists(self.metrics_path):
            self._trim_metrics()

    def _trim_metrics(self) -> None:
        """Keep exactly the records the checkpoint knows were written."""
        with open(self.metrics_path, "r", encoding="utf-8") as fh:
            lines = [line for line in fh if line.strip()]
        kept = lines[: self.eval_rounds]
        self.records = [MetricsRecord.from_json(line) for line in kept]
        if len(kept) != len(lines):
            with open(self.metrics_path, "w", encoding="utf-8") as fh:
                fh.writelines(kept)


def run_training(config: ExperimentConfig, out_dir=None, resume: bool = False,
                 zero_intrinsic: bool = False,
                 parallel_eval: int = 1) -> TrainingRun:
    """Train one seeded run to config.total_env_steps; returns the run.

    With out_dir set, metrics stream to out_dir/metrics.jsonl (append-only,
    one JSON line per evaluation) and a full checkpoint lands next to them
    when the step budget is reached. With resume=True the run picks up
    bit-exactly from that checkpoint instead of starting fresh.
    """
    run = TrainingRun(config, out_dir, zero_intrinsic, parallel_eval)
    if resume:
        if run.checkpoint_path is None:
            raise CheckpointError("resume needs an out_dir with a checkpoint")
        if not os.path.exists(run.checkpoint_path):
            raise CheckpointError(
                f"resume requested but no checkpoint at {run.checkpoint_path}")
        run.restore()
        logger.info("resumed at env step %d", run.learner.env_steps)
    elif run.metrics_path is not None and os.path.exists(run.metrics_path):
        os.remove(run.metrics_path)
    run.run()
    return run


# ---------------------------------------------------------------------------
# checkpoint helpers

def _rng_state(gen: np.random.Generator) -> dict:
    state = gen.bit_generator.state
    return json.loads(json.dumps(state, default=int))


def _pack_adam(arrays: dict, prefix: str, opt: ad.Adam) -> None:
    for name, buf in opt.m.items():
        arrays[f"{prefix}.m.{name}"] = buf
    for name, buf in opt.v.items():
        arrays[f"{prefix}.v.{name}"] = buf


def _check_adam_arrays(arrays: dict, prefix: str, params: ad.ParamSet) -> None:
    """Validate optimizer arrays against parameter shapes before any load."""
    head = f"{prefix}.m."
    for name in arrays:
        if not name.startswith(head):
            continue
        pname = name[len(head):]
        partner = f"{prefix}.v.{pname}"
        if partner not in arrays:
            raise CheckpointError(f"checkpoint is missing array {partner!r}")
        if pname not in params:
            raise CheckpointError(
                f"checkpoint optimizer state {name!r} matches no parameter")
        want = params[pname].data.shape
        for aname in (name, partner):
            if arrays[aname].shape != want:
                raise CheckpointError(
                    f"shape mismatch for {aname!r}: checkpoint has "
                    f"{arrays[aname].shape}, this config needs {want}")


def _unpack_adam(arrays: dict, prefix: str, opt: ad.Adam,
                 step_count: int) -> None:
    opt.step_count = int(step_count)
    opt.m = {}
    opt.v = {}
    head = f"{prefix}.m."
    for name in arrays:
        if name.startswith(head):
            pname = name[len(head):]
            opt.m[pname] = arrays[name].copy()
            opt.v[pname] = arrays[f"{prefix}.v.{pname}"].copy()


def _save_replay(path, replay: marl.ReplayBuffer) -> None:
    episodes = replay.episodes()
    meta = {"kind": "replay", "total_added": replay.total_added,
            "n_episodes": len(episodes)}
    arrays: dict[str, np.ndarray] = {}
    for i, ep in enumerate(episodes):
        key = f"ep{i:06d}"
        arrays[f"{key}.state"] = ep.state
        arrays[f"{key}.obs"] = ep.obs
        arrays[f"{key}.avail"] = ep.avail.astype(np.float64)
        arrays[f"{key}.actions"] = ep.actions.astype(np.float64)
        arrays[f"{key}.reward"] = ep.reward
        arrays[f"{key}.terminated"] = ep.terminated
    save_checkpoint(path, meta, arrays)


def _load_replay(path) -> tuple[list, int]:
    meta, arrays = load_checkpoint(path)
    if meta.get("kind") != "replay":
        raise CheckpointError(f"{path}: not a replay sidecar")
    episodes = []
    for i in range(int(meta["n_episodes"])):
        key = f"ep{i:06d}"
        episodes.append(marl.Episode(
            state=arrays[f"{key}.state"],
            obs=arrays[f"{key}.obs"],
            avail=arrays[f"{key}.avail"].astype(bool),
            actions=arrays[f"{key}.actions"].astype(np.int64),
            reward=arrays[f"{key}.reward"],
            terminated=arrays[f"{key}.terminated"],
        ))
    return episodes, int(meta["total_added"])


# ---------------------------------------------------------------------------
# loading a policy for standalone evaluation

def load_policy(path):
    """Rebuild (config, agent_spec, params) from a training checkpoint."""
    meta, arrays = load_checkpoint(path)
    config = mapping_to_config(meta["config"])
    env = config.env
    spec = marl.AgentSpec(envs.obs_dim(env), envs.n_actions(env),
                          env.n_agents, config.learner.agent_hidden)
    params = ad.ParamSet()
    marl.init_agent_params(spec, params, np.random.default_rng(0))
    for name in params.names():
        key = f"theta.{name}"
        if key not in arrays:
            raise CheckpointError(f"checkpoint is missing array {key!r}")
        if arrays[key].shape != params[name].data.shape:
            raise CheckpointError(
                f"shape mismatch for {key!r}: checkpoint has "
                f"{arrays[key].shape}, this config needs "
                f"{params[name].data.shape}")
        params[name].data[...] = arrays[key]
    return config, spec, params


def evaluate_checkpoint(path, n_episodes: int = 32,
                        parallel: int = 1) -> EvalResult:
    """Greedy evaluation of a saved policy on its own environment."""
    config, spec, params = load_policy(path)
    return evaluate_policy(config.env, spec, params, n_episodes,
                           EVAL_SEED_OFFSET, parallel)


# ---------------------------------------------------------------------------
# diagnostics

PCA_HEADER = "t,code_index,pc1,pc2,is_code_vector"
HIST_HEADER = "code_index,count"


def write_diagnostics(vq_model: vqlat.VqModel, states: np.ndarray,
                      t_index: np.ndarray, out_dir) -> dict:
    """Project states and codebook to 2-D and count per-code recalls.

    Writes pca.csv (one row per quantized state, then one per code vector)
    and code_histogram.csv whose counts sum to the number of states given.
    """
    states = np.asarray(states, dtype=np.float64)
    if states.ndim != 2 or states.shape[0] == 0:
        raise ValueError("diagnostics need at least one state")
    t_index = np.asarray(t_index, dtype=np.int64)
    if t_index.shape != (states.shape[0],):
        raise ValueError("t_index must pair one timestep with each state")
    latents = vqlat.encode(vq_model, states).data
    codes, _ = vqlat.quantize(vq_model, latents)
    book = vq_model.codebook
    coords, _ = vqlat.pca_project(np.concatenate([latents, book], axis=0))
    os.makedirs(out_dir, exist_ok=True)
    pca_path = os.path.join(out_dir, "pca.csv")
    with open(pca_path, "w", encoding="utf-8") as fh:
        fh.write(PCA_HEADER + "\n")
        for i in range(latents.shape[0]):
            fh.write(f"{int(t_index[i])},{int(codes[i])},"
                     f"{float(coords[i, 0])!r},{float(coords[i, 1])!r},0\n")
        for j in range(book.shape[0]):
            row = coords[latents.shape[0] + j]
            fh.write(f"-1,{j},{float(row[0])!r},{float(row[1])!r},1\n")
    counts = np.bincount(codes, minlength=vq_model.config.n_codes)
    hist_path = os.path.join(out_dir, "code_histogram.csv")
    with open(hist_path, "w", encoding="utf-8") as fh:
        fh.write(HIST_HEADER + "\n")
        for j, count in enumerate(counts):
            fh.write(f"{j},{int(count)}\n")
    return {"pca_csv": pca_path, "histogram_csv": hist_path,
            "n_points": int(states.shape[0]),
            "distinct_codes": int(np.count_nonzero(counts))}


def dump_diagnostics(ckpt_path, out_dir) -> dict:
    """Diagnostics for a training checkpoint, over its own replay states."""
    meta, arrays = load_checkpoint(ckpt_path)
    config = mapping_to_config(meta["config"])
    if not config.wiring.use_vq:
        raise ValueError(
            f"variant {config.variant!r} trains no latent model; "
            "nothing to diagnose")
    rng = np.random.default_rng(0)
    vq_model = vqlat.VqModel(config.vq, envs.state_dim(config.env), rng)
    for name in vq_model.params.names():
        key = f"vq.{name}"
        if key not in arrays or arrays[key].shape != vq_model.params[name].data.shape:
            raise CheckpointError(f"checkpoint array {key!r} missing or misshaped")
        vq_model.params[name].data[...] = arrays[key]
    episodes, _ = _load_replay(f"{ckpt_path}.replay")
    if not episodes:
        raise ValueError("checkpoint replay holds no episodes to diagnose")
    states = np.concatenate([ep.state for ep in episodes], axis=0)
    t_index = np.concatenate(
        [np.arange(ep.state.shape[0]) for ep in episodes])
    return write_diagnostics(vq_model, states, t_index, out_dir)

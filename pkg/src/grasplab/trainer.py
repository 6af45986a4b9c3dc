"""Orchestration: self-supervised collection, training, retraining, evaluation.

Two logical workers cooperate: a collector executes grasps in the simulator
and appends attempts to the log; a trainer fits the network on the split log
and publishes immutable snapshots.  The default mode interleaves the two in
one thread (deterministic, used by tests); a threaded mode runs them
concurrently with the log as the only writer-to-reader channel and snapshots
as the only trainer-to-collector channel.
"""

from __future__ import annotations

import json
import logging
import math
import threading
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import dataset as ds
from . import heightmap_io, image as img_mod, net as net_mod, policy
from .config import LabConfig, ScheduleConfig
from .metrics import MetricsReport, binary_scores, grasp_rate_report
from .sim import (ObjectSpec, PlacementError, Scene, Simulator, cube_spec,
                  cylinder_spec)
from .snapshots import SnapshotStore

log = logging.getLogger("grasplab")

METHOD_RANDOM = "random"
METHOD_PROB = "prob"
METHOD_UNCERTAIN = "uncertain"


@dataclass
class ExplorationSchedule:
    """Pure-random warm-up, then a fixed stochastic method mixture."""

    random_phase: int
    mixture: list[tuple[str, float]]

    @classmethod
    def from_config(cls, cfg: ScheduleConfig) -> "ExplorationSchedule":
        mix = [
            (METHOD_RANDOM, cfg.mix_random),
            (METHOD_PROB, cfg.mix_probabilistic),
            (METHOD_UNCERTAIN, cfg.mix_uncertain),
            (f"maxN:{cfg.maximum_n}", cfg.mix_maximum),
        ]
        total = sum(w for _, w in mix)
        if total <= 0:
            raise ValueError("schedule mixture weights must sum > 0")
        return cls(cfg.random_phase, [(m, w / total) for m, w in mix])

    def method_at(self, t: int, rng: np.random.Generator) -> str:
        if t < self.random_phase:
            return METHOD_RANDOM
        p = np.array([w for _, w in self.mixture])
        k = rng.choice(len(self.mixture), p=p)
        return self.mixture[int(k)][0]


# -- collection ---------------------------------------------------------------

class Collector:
    """Scene lifecycle + one grasp attempt per step, appended to the log."""

    def __init__(self, lab: LabConfig, sim: Simulator, alog: ds.AttemptLog,
                 clock: ds.LogicalClock, seed: int,
                 object_spec: ObjectSpec | None = None,
                 objects: int | None = None):
        self.lab = lab
        self.sim = sim
        self.log = alog
        self.clock = clock
        self.schedule = ExplorationSchedule.from_config(lab.schedule)
        self.objects = objects if objects is not None else lab.pipeline.objects
        self.object_spec = object_spec or _spec_for(lab)
        self.rng_sched = np.random.default_rng((seed, 11))
        self.rng_select = np.random.default_rng((seed, 12))
        self.scene_counter = 0
        self.seed = seed
        self.scene: Optional[Scene] = None
        self._engine: Optional[net_mod.InferenceEngine] = None
        self._map_cache: tuple | None = None
        # in-memory mirror of the log for fast training rounds
        self.attempts: list[ds.GraspAttempt] = []
        self.windows: list[np.ndarray] = []
        self.recent_rewards: list[int] = []

    def _next_scene(self):
        while True:
            scene_seed = self.seed * 1_000_003 + self.scene_counter
            self.scene_counter += 1
            try:
                self.scene = self.sim.spawn_scene(self.objects,
                                                  self.object_spec, scene_seed)
                return
            except PlacementError:
                log.warning("placement failed for scene seed %d; skipping",
                            scene_seed)

    def _value_map(self, depth, params, snapshot_id):
        key = (self.scene.digest(), params.version)
        if self._map_cache is not None and self._map_cache[0] == key:
            return self._map_cache[1]
        if self._engine is None or self._engine.version != params.version:
            self._engine = net_mod.InferenceEngine(params, self.lab.net)
        vmap = policy.evaluate(depth, params, image_cfg=self.lab.image,
                               net_cfg=self.lab.net, engine=self._engine,
                               snapshot_id=snapshot_id, scene_id=key[0])
        self._map_cache = (key, vmap)
        return vmap

    def _window_image(self, depth) -> img_mod.DepthImage:
        cached = self.scene._caches.get("safe_padded")
        if cached is None:
            padded = img_mod.pad_for_inference(depth, self.lab.image.size_px)
            cached = img_mod.pad_to(padded, img_mod.window_safe_size(
                self.lab.image.size_px, self.lab.image.window_px,
                self.lab.image.grid_size))
            self.scene._caches["safe_padded"] = cached
        return cached

    def step(self, t: int, params: net_mod.NetworkParams, snapshot_id: str):
        """Execute one scheduled grasp; returns (attempt, outcome)."""
        if self.scene is None or not self.scene.objects:
            self._next_scene()
        depth = self.sim.render_depth(self.scene)
        spec = self.sim.grid_spec()
        method = self.schedule.method_at(t, self.rng_sched)
        if method == METHOD_RANDOM:
            idx = policy.select_random(self.rng_select, spec)
        else:
            vmap = self._value_map(depth, params, snapshot_id)
            if method == METHOD_PROB:
                idx = policy.select_probabilistic(vmap, self.rng_select)
            elif method == METHOD_UNCERTAIN:
                idx = policy.select_uncertain(vmap)
            else:
                n = int(method.split(":", 1)[1])
                idx = policy.select_maximum(vmap, n, self.rng_select)
        pose = policy.to_pose(idx, spec)
        win = img_mod.extract_window(
            self._window_image(depth), pose.x, pose.y, pose.a,
            window_px=self.lab.image.window_px,
            clamp_mm=self.lab.image.normalize_clamp_mm)
        blob = heightmap_io.encode_window(win.values, self.lab.image.pitch_mm)
        _, stored, _, _, _ = heightmap_io.decode(blob)
        stored = stored.astype(np.float32)
        psi = float(net_mod.forward_train(params, stored,
                                          net_cfg=self.lab.net)[idx.k_d])
        outcome, next_scene = self.sim.attempt_grasp(self.scene, pose)
        attempt = ds.GraspAttempt(
            self.clock.next(), "", idx.k_rot, idx.i, idx.j, idx.k_d,
            outcome.reward, psi, method, self.scene.digest(), snapshot_id)
        attempt = self.log.append(attempt, blob)
        self.scene = next_scene
        self.attempts.append(attempt)
        self.windows.append(stored)
        self.recent_rewards.append(outcome.reward)
        return attempt, outcome


def _spec_for(lab: LabConfig) -> ObjectSpec:
    kind = lab.pipeline.object_kind
    if kind == "cylinder":
        return cylinder_spec(lab.sim)
    if kind == "cube":
        return cube_spec(lab.sim)
    raise ValueError(f"unknown object kind {kind!r}")


# -- training -----------------------------------------------------------------

@dataclass
class TrainResult:
    params: net_mod.NetworkParams
    history: list[MetricsReport] = field(default_factory=list)
    diverged: bool = False

    @property
    def final(self) -> MetricsReport:
        return self.history[-1] if self.history else MetricsReport()


def predict_batched(params, windows, d_index, net_cfg,
                    chunk: int = 512) -> np.ndarray:
    """Inference-mode psi at each attempt's jaw opening."""
    out = np.empty(len(windows), np.float64)
    for lo in range(0, len(windows), chunk):
        hi = min(lo + chunk, len(windows))
        probs = net_mod.forward_train(params, windows[lo:hi], net_cfg=net_cfg)
        out[lo:hi] = probs[np.arange(hi - lo), d_index[lo:hi]]
    return out


def _split_masks(attempts):
    split = np.array([ds.assign_split(a.timestamp) == "test"
                      for a in attempts])
    return ~split, split


def train_network(attempts, windows, params: net_mod.NetworkParams,
                  lab: LabConfig, *, seed: int, max_epochs: int | None = None,
                  extra_weights: np.ndarray | None = None,
                  optimizer: net_mod.SGDState | None = None) -> TrainResult:
    """Minibatch SGD on the train split with early stop on test-loss saturation.

    ``extra_weights`` (aligned with ``attempts``) multiplies the standard
    balance x asymmetry product; used by weighted retraining.  Divergence
    (non-finite gradients) aborts the pass and restores the best snapshot.
    """
    cfg = lab.train
    windows = np.asarray(windows, np.float32)
    d_index = np.array([a.k_d for a in attempts], np.intp)
    rewards = np.array([a.reward for a in attempts], np.int8)
    train_mask, test_mask = _split_masks(attempts)
    tr_idx = np.flatnonzero(train_mask)
    te_idx = np.flatnonzero(test_mask)
    tr_rewards = rewards[tr_idx]
    weights = (ds.balance_weights(tr_rewards)
               * ds.asymmetry_weights(tr_rewards, cfg.kappa))
    if extra_weights is not None:
        weights = weights * np.asarray(extra_weights)[tr_idx]

    params = params.copy()
    opt = optimizer or net_mod.SGDState.for_params(params, cfg.learning_rate,
                                                   cfg.momentum)
    rng = np.random.default_rng((seed, 21))
    max_epochs = max_epochs if max_epochs is not None else cfg.max_epochs
    best_loss = math.inf
    best_params = params.copy()
    stale = 0
    history = []
    diverged = False

    def test_report() -> MetricsReport:
        if te_idx.size == 0:
            return MetricsReport(attempts=len(attempts))
        psi = predict_batched(params, windows[te_idx], d_index[te_idx],
                              lab.net)
        r = rewards[te_idx].astype(np.float64)
        p = np.clip(psi, 1e-7, 1 - 1e-7)
        ce = float(-(r * np.log(p) + (1 - r) * np.log(1 - p)).mean())
        acc, f1 = binary_scores(psi, rewards[te_idx])
        return MetricsReport(attempts=len(attempts), loss=ce, accuracy=acc,
                             f1=f1, n_samples=int(te_idx.size))

    for epoch in range(max_epochs):
        order = rng.permutation(tr_idx.size)
        step_rng = np.random.default_rng((seed, 22, epoch))
        try:
            for lo in range(0, order.size, cfg.batch_size):
                pos = order[lo:lo + cfg.batch_size]
                if pos.size < 8:      # too small for stable batch-norm stats
                    continue
                sel = tr_idx[pos]
                batch = net_mod.TrainBatch(
                    windows[sel], d_index[sel], rewards[sel], weights[pos])
                net_mod.backward_and_step(params, batch, opt,
                                          net_cfg=lab.net,
                                          reg_mode=cfg.reg_mode,
                                          dropout_rng=step_rng)
        except net_mod.NonFiniteGradient:
            log.warning("training diverged at epoch %d; restoring best", epoch)
            diverged = True
            params = best_params.copy()
            break
        report = test_report()
        history.append(report)
        current = report.loss if te_idx.size else -epoch  # no test set: run out
        if current < best_loss - 1e-6:
            best_loss = current
            best_params = params.copy()
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    if not diverged and history and te_idx.size \
            and history[-1].loss > best_loss:
        params = best_params
    return TrainResult(params, history, diverged)


def retrain_weighted(attempts, windows, params: net_mod.NetworkParams,
                     lab: LabConfig, *, seed: int,
                     predict_fn=None) -> TrainResult:
    """Agreement-weighted continuation pass.

    Weights come from fresh inference-mode predictions of the frozen snapshot
    over the train split (mean exactly 1 there) and stay frozen for the whole
    pass; training then continues from the current parameters (warm start) or
    from a fresh init when configured.
    """
    windows = np.asarray(windows, np.float32)
    d_index = np.array([a.k_d for a in attempts], np.intp)
    rewards = np.array([a.reward for a in attempts], np.float64)
    train_mask, _ = _split_masks(attempts)
    tr_idx = np.flatnonzero(train_mask)
    predict = predict_fn or (lambda w, d: predict_batched(params, w, d,
                                                          lab.net))
    psi = predict(windows[tr_idx], d_index[tr_idx])
    w_tr = ds.retrain_weights(rewards[tr_idx], psi)
    extra = np.ones(len(attempts))
    extra[tr_idx] = w_tr
    start = params if lab.train.retrain_warm_start else net_mod.init_params(
        seed)
    return train_network(attempts, windows, start, lab, seed=seed,
                         max_epochs=lab.train.retrain_epochs,
                         extra_weights=extra)


# -- evaluation ---------------------------------------------------------------

@dataclass
class EvalProtocol:
    n: int
    m: int
    trials: int

    @classmethod
    def parse(cls, token: str) -> "EvalProtocol":
        n, m, trials = (int(v) for v in token.split(":"))
        return cls(n, m, trials)


def _spawn_with_retries(sim: Simulator, m: int, spec, rng) -> Scene:
    for _ in range(80):
        try:
            return sim.spawn_scene(m, spec, int(rng.integers(2 ** 62)))
        except PlacementError:
            continue
    raise PlacementError(f"could not spawn an {m}-object scene")


class _EvalRunner:
    """Shared machinery: exploit_with_retry attempts on application-mode sim."""

    def __init__(self, params, lab: LabConfig, seed: int,
                 object_spec: ObjectSpec | None):
        self.lab = lab
        app_grasp = replace(lab.grasp, clamp_mode="application")
        eval_sim_cfg = replace(lab.sim, p_flip=0.0)
        self.sim = Simulator(eval_sim_cfg, app_grasp, lab.image)
        self.spec = object_spec or _spec_for(lab)
        self.params = params
        self.engine = net_mod.InferenceEngine(params, lab.net)
        self.rng = np.random.default_rng((seed, 31))
        self.grid = self.sim.grid_spec()
        self._map_cache = None

    def value_map(self, scene) -> policy.ValueMap:
        key = scene.digest()
        if self._map_cache is not None and self._map_cache[0] == key:
            return self._map_cache[1]
        depth = self.sim.render_depth(scene)
        vmap = policy.evaluate(depth, self.params, image_cfg=self.lab.image,
                               net_cfg=self.lab.net, engine=self.engine,
                               scene_id=key)
        self._map_cache = (key, vmap)
        return vmap

    def run_plan(self, scene):
        """One exploit_with_retry plan; returns (attempts, successes, scene)."""
        vmap = self.value_map(scene)
        plan = policy.exploit_with_retry(vmap, self.rng)
        attempts = 0
        for idx in plan:
            pose = policy.to_pose(idx, self.grid)
            outcome, scene = self.sim.attempt_grasp(scene, pose)
            attempts += 1
            if outcome.reward == 1:
                return attempts, 1, scene
        return attempts, 0, scene


def evaluate_grasp_rate(params, lab: LabConfig, protocol: EvalProtocol, *,
                        seed: int = 0,
                        object_spec: ObjectSpec | None = None) -> MetricsReport:
    """n-out-of-m protocol: a trial succeeds only if n objects are removed
    without replacement; it is aborted after `failure_budget` consecutive
    fully failed plans."""
    if protocol.n > protocol.m:
        raise ValueError("cannot grasp more objects than the bin holds")
    runner = _EvalRunner(params, lab, seed, object_spec)
    scene_rng = np.random.default_rng((seed, 32))
    budget = lab.eval.failure_budget
    trial_successes = 0
    total_attempts = 0
    for _ in range(protocol.trials):
        scene = _spawn_with_retries(runner.sim, protocol.m, runner.spec,
                                    scene_rng)
        removed = 0
        consecutive_failures = 0
        while removed < protocol.n and consecutive_failures < budget:
            attempts, success, scene = runner.run_plan(scene)
            total_attempts += attempts
            if success:
                removed += 1
                consecutive_failures = 0
            else:
                consecutive_failures += 1
        if removed >= protocol.n:
            trial_successes += 1
    return grasp_rate_report(trial_successes, protocol.trials, total_attempts,
                             lab.eval.nominal_attempt_s)


def evaluate_per_attempt(params, lab: LabConfig, *, scenes: int,
                         objects: int, seed: int = 0,
                         object_spec: ObjectSpec | None = None):
    """Per-attempt success of exploit_with_retry over held-out scenes.

    Each scene is worked until empty or until `failure_budget` consecutive
    failed plans; returns (successes, attempts, rate).
    """
    runner = _EvalRunner(params, lab, seed, object_spec)
    scene_rng = np.random.default_rng((seed, 33))
    budget = lab.eval.failure_budget
    successes = 0
    attempts = 0
    for _ in range(scenes):
        scene = _spawn_with_retries(runner.sim, objects, runner.spec,
                                    scene_rng)
        consecutive_failures = 0
        while scene.objects and consecutive_failures < budget:
            a, s, scene = runner.run_plan(scene)
            attempts += a
            successes += s
            consecutive_failures = 0 if s else consecutive_failures + 1
    rate = successes / attempts if attempts else 0.0
    return successes, attempts, rate


def evaluate_random_baseline(lab: LabConfig, *, attempts: int, objects: int,
                             seed: int = 0,
                             object_spec: ObjectSpec | None = None) -> float:
    """Success rate of uniformly random grasps (no network involved)."""
    sim = Simulator(replace(lab.sim, p_flip=0.0), lab.grasp, lab.image)
    spec = object_spec or _spec_for(lab)
    grid = sim.grid_spec()
    rng = np.random.default_rng((seed, 34))
    scene_rng = np.random.default_rng((seed, 35))
    scene = _spawn_with_retries(sim, objects, spec, scene_rng)
    since_refill = 0
    successes = 0
    for _ in range(attempts):
        if not scene.objects or len(scene.objects) < objects - 2 \
                or since_refill >= 200:
            scene = _spawn_with_retries(sim, objects, spec, scene_rng)
            since_refill = 0
        idx = policy.select_random(rng, grid)
        outcome, scene = sim.attempt_grasp(scene, policy.to_pose(idx, grid))
        successes += outcome.reward
        since_refill += 1
    return successes / attempts


# -- pipeline -----------------------------------------------------------------

@dataclass
class PipelineResult:
    out_dir: Path
    snapshot_id: str
    params: net_mod.NetworkParams
    attempts: int
    elapsed_s: float
    log_dir: Path
    metrics_path: Path


def _train_boundary(t: int, lab: LabConfig) -> str | None:
    rp = lab.schedule.random_phase
    every = lab.pipeline.train_every
    if t == rp:
        return "initial"
    if t > rp and (t - rp) % every == 0:
        return "round"
    return None


def run_pipeline(lab: LabConfig, seed: int, out_dir, *,
                 run_tag: str | None = None,
                 object_spec: ObjectSpec | None = None,
                 resume: bool = False) -> PipelineResult:
    """Interleaved (or threaded) collect-and-train run producing artifacts:
    attempt log, snapshot series, metrics CSV, and a resumable state file."""
    t_start = time.perf_counter()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    from .config import save_config
    save_config(lab, out / "config.txt")
    store = SnapshotStore(out / "snapshots")
    alog = ds.AttemptLog(out / "attempts")
    tag = run_tag or f"pipeline-s{seed}"
    state_path = out / "state.json"
    metrics_path = out / "metrics.csv"

    sim = Simulator(lab.sim, lab.grasp, lab.image)
    clock = ds.LogicalClock(tag)
    collector = Collector(lab, sim, alog, clock, seed,
                          object_spec=object_spec)
    rng_states = {}

    if resume and state_path.exists():
        state = json.loads(state_path.read_text())
        t0 = state["next_attempt"]
        clock.counter = state["clock_counter"]
        collector.scene_counter = state["scene_counter"]
        collector.rng_sched.bit_generator.state = state["rng_sched"]
        collector.rng_select.bit_generator.state = state["rng_select"]
        snapshot_id = state["snapshot_id"]
        params = store.load(snapshot_id)
        attempts_list = alog.load_all()
        collector.attempts = list(attempts_list)
        collector.windows = [alog.load_window(a.window_hash)
                             for a in attempts_list]
        collector.recent_rewards = [a.reward for a in attempts_list]
    else:
        t0 = 0
        params = net_mod.init_params(seed)
        snapshot_id = store.save(params)       # collector never waits: initial
        metrics_path.write_text(MetricsReport.CSV_HEADER + "\n")

    def save_state(t_next):
        state_path.write_text(json.dumps({
            "next_attempt": t_next,
            "clock_counter": clock.counter,
            "scene_counter": collector.scene_counter,
            "rng_sched": collector.rng_sched.bit_generator.state,
            "rng_select": collector.rng_select.bit_generator.state,
            "snapshot_id": snapshot_id,
        }, default=str))

    def train_round(kind: str, t: int):
        nonlocal params, snapshot_id
        epochs = {"initial": lab.pipeline.initial_epochs,
                  "round": lab.pipeline.epochs_per_round,
                  "final": lab.pipeline.final_epochs}[kind]
        try:
            result = train_network(collector.attempts, collector.windows,
                                   params, lab, seed=(seed * 131 + t),
                                   max_epochs=epochs)
        except ds.SingleClassError:
            log.info("skipping %s training at t=%d: single-class data",
                     kind, t)
            return
        params = result.params
        snapshot_id = store.save(params)
        window = collector.recent_rewards[-lab.pipeline.train_every:]
        rate = sum(window) / len(window) if window else float("nan")
        report = result.final
        report.attempts = t
        report.grasp_rate = rate
        with open(metrics_path, "a") as fh:
            fh.write(report.csv_row() + "\n")

    total = lab.pipeline.total_attempts
    if lab.pipeline.threaded:
        shared = _run_threaded(lab, collector, store, params, snapshot_id,
                               t0, total, seed)
        params = shared["params"]
        snapshot_id = shared["snapshot_id"]
    else:
        for t in range(t0, total):
            kind = _train_boundary(t, lab)
            if kind:
                train_round(kind, t)
                save_state(t)
            collector.step(t, params, snapshot_id)
    train_round("final", total)
    save_state(total)
    alog.close()
    return PipelineResult(out, snapshot_id, params, total,
                          time.perf_counter() - t_start, out / "attempts",
                          metrics_path)


def _run_threaded(lab, collector, store, params, snapshot_id, t0, total,
                  seed):
    """Concurrent collect/train: log is single-writer (collector), snapshots
    are published atomically by the trainer; the collector always grabs the
    newest published snapshot.  Returns the shared state after both join."""
    shared = {"params": params, "snapshot_id": snapshot_id, "t": t0}
    lock = threading.Lock()
    stop = threading.Event()

    def collect_loop():
        for t in range(t0, total):
            with lock:
                p, sid = shared["params"], shared["snapshot_id"]
            collector.step(t, p, sid)
            shared["t"] = t + 1
        stop.set()

    def train_loop():
        last_trained = t0
        while not stop.wait(0.05):
            t = shared["t"]
            if t - last_trained >= lab.pipeline.train_every \
                    and t >= lab.schedule.random_phase:
                try:
                    result = train_network(
                        list(collector.attempts), list(collector.windows),
                        shared["params"], lab, seed=(seed * 131 + t),
                        max_epochs=lab.pipeline.epochs_per_round)
                except ds.SingleClassError:
                    last_trained = t
                    continue
                sid = store.save(result.params)
                with lock:
                    shared["params"] = result.params
                    shared["snapshot_id"] = sid
                last_trained = t

    ct = threading.Thread(target=collect_loop)
    tt = threading.Thread(target=train_loop)
    ct.start()
    tt.start()
    ct.join()
    tt.join()
    return shared

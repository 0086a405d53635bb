"""Continual-learning strategies over one shared inner training loop.

Six variants: plain finetuning, quadratic parameter anchoring weighted
by diagonal Fisher information (ewc), output distillation against the
frozen previous model (lwf), experience replay with a bounded
per-dataset buffer (replay), replay with similarity-gated buffer
retention (cmp), and a dual-anchor penalty with an auxiliary
plasticity model (ancl). The finetune baseline adds exactly zero
penalty terms: its per-step loss is the unsupervised objective alone.
"""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

from . import diffcore as dc
from . import losses
from . import models
from .errors import ContractError, NumericError

log = logging.getLogger(__name__)

VARIANTS = ("finetune", "ewc", "lwf", "replay", "cmp", "ancl")


@dataclass(frozen=True)
class StrategyHyper:
    lambda_ewc: float = 1.0   # anchor weight, tuned value from the source method
    lambda_lwf: float = 0.5   # distillation weight
    lambda_aux: float = 0.5   # auxiliary-anchor weight
    delta: float = 0.9        # retention similarity threshold
    capacity: int = 64        # replay slots per previous dataset
    fisher_mode: str = "all"  # accumulate over "all" epochs or the "last" only
    multi_anchor: bool = False  # anchor to every past dataset instead of the previous one

    def __post_init__(self):
        if not (0 < self.delta <= 1):
            raise ContractError("delta must lie in (0, 1]")
        if self.capacity < 1:
            raise ContractError("buffer capacity must be positive")
        if self.fisher_mode not in ("all", "last"):
            raise ContractError("fisher_mode must be 'all' or 'last'")


class FisherDiag:
    """Nonnegative per-parameter importance aligned with a ParamVector."""

    def __init__(self, vector: dc.ParamVector):
        flat = vector.flatten()
        if np.any(flat < 0):
            raise ContractError("Fisher entries must be nonnegative")
        self.vector = vector

    @property
    def size(self) -> int:
        return self.vector.size

    def flatten(self) -> np.ndarray:
        return self.vector.flatten()

    def __getitem__(self, name):
        return self.vector[name]


class FisherAccumulator:
    """Running mean of squared-gradient observations."""

    def __init__(self):
        self.count = 0
        self.mean = None

    def reset(self):
        self.count = 0
        self.mean = None

    def observe(self, grad_flat: np.ndarray):
        sq = grad_flat * grad_flat
        if self.mean is None:
            self.mean = sq
            self.count = 1
        else:
            self.count += 1
            self.mean += (sq - self.mean) / self.count

    def snapshot(self, template: dc.ParamVector) -> FisherDiag | None:
        if self.mean is None:
            return None
        return FisherDiag(template.unflatten(self.mean))


class ReplayBuffer:
    """Bounded per-dataset sample store; insertion order tracks the sequence."""

    def __init__(self, capacity: int = 64):
        if capacity < 1:
            raise ContractError("buffer capacity must be positive")
        self.capacity = capacity
        self._store: dict[str, list] = {}   # dataset_id -> list of (sample, ref)

    def datasets(self):
        return list(self._store.keys())

    def add(self, dataset_id: str, sample, ref) -> None:
        slot = self._store.setdefault(dataset_id, [])
        if len(slot) >= self.capacity:
            raise ContractError(f"buffer for {dataset_id!r} is full ({self.capacity})")
        slot.append((sample, ref))

    def remaining(self, dataset_id: str) -> int:
        return self.capacity - len(self._store.get(dataset_id, []))

    def samples(self, dataset_id: str):
        return [s for s, _ in self._store.get(dataset_id, [])]

    def all_samples(self):
        return [s for slot in self._store.values() for s, _ in slot]

    def refs(self) -> dict:
        return {did: [ref for _, ref in slot] for did, slot in self._store.items()}

    def size(self, dataset_id: str) -> int:
        return len(self._store.get(dataset_id, []))


@dataclass
class StrategyState:
    """Everything a strategy carries between datasets of a sequence."""

    variant: str
    hyper: StrategyHyper = field(default_factory=StrategyHyper)
    datasets_seen: list = field(default_factory=list)
    anchor: dc.ParamVector | None = None          # frozen previous parameters
    fisher: FisherDiag | None = None              # importance from the previous dataset
    fisher_aux: FisherDiag | None = None          # importance of the auxiliary model
    aux_params: dc.ParamVector | None = None
    aux_opt: dc.OptimizerState | None = None
    buffer: ReplayBuffer | None = None
    past_anchors: list = field(default_factory=list)  # (anchor, fisher) when multi_anchor

    @classmethod
    def create(cls, variant: str, hyper: StrategyHyper | None = None) -> "StrategyState":
        if variant not in VARIANTS:
            raise ContractError(f"unknown strategy {variant!r}; have {VARIANTS}")
        hyper = hyper or StrategyHyper()
        state = cls(variant=variant, hyper=hyper)
        if variant in ("replay", "cmp"):
            state.buffer = ReplayBuffer(hyper.capacity)
        return state

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ContractError(f"unknown strategy {self.variant!r}")
        needs_buffer = self.variant in ("replay", "cmp")
        if needs_buffer and self.buffer is None:
            raise ContractError(f"{self.variant} requires a replay buffer")
        if not needs_buffer and self.buffer is not None:
            raise ContractError(f"{self.variant} must not carry a replay buffer")
        if self.variant == "finetune" and (self.anchor is not None or self.fisher is not None):
            raise ContractError("finetune carries no anchors")
        if self.datasets_seen and self.variant in ("ewc", "lwf", "ancl") and self.anchor is None:
            raise ContractError(f"{self.variant} must hold the previous parameters after a dataset")


# ---------------------------------------------------------------------------
# penalties
# ---------------------------------------------------------------------------


def _quadratic_anchor(params_t: dict, anchor: dc.ParamVector, fisher: FisherDiag) -> dc.Tensor:
    """sum_i 0.5 F_i (theta_i - anchor_i)^2 as a differentiable scalar."""
    if set(params_t) != set(anchor.names):
        raise ContractError("parameter/anchor segment names disagree")
    total = None
    for name in anchor.names:
        t = params_t[name]
        if t.data.shape != anchor[name].shape or anchor[name].shape != fisher[name].shape:
            raise ContractError(f"segment {name!r} length mismatch")
        diff = dc.sub(t, anchor[name])
        term = dc.reduce_sum(dc.mul(fisher[name], dc.mul(diff, diff)))
        total = term if total is None else dc.add(total, term)
    return dc.mul(total, 0.5)


def _as_tensor_map(params) -> dict:
    if isinstance(params, dc.ParamVector):
        return params.as_tensors(requires_grad=False)
    return params


def ewc_penalty(params, anchor: dc.ParamVector, fisher: FisherDiag, lam: float) -> dc.Tensor:
    """Importance-weighted quadratic pull toward the previous parameters."""
    return dc.mul(_quadratic_anchor(_as_tensor_map(params), anchor, fisher), lam)


def ancl_penalty(params, anchor: dc.ParamVector, aux: dc.ParamVector,
                 fisher: FisherDiag, fisher_aux: FisherDiag,
                 lam_ewc: float = 1.0, lam_aux: float = 0.5) -> dc.Tensor:
    """Stability anchor to the frozen model plus a plasticity anchor to the auxiliary one."""
    p = _as_tensor_map(params)
    stability = dc.mul(_quadratic_anchor(p, anchor, fisher), lam_ewc)
    plasticity = dc.mul(_quadratic_anchor(p, aux, fisher_aux), lam_aux)
    return dc.add(stability, plasticity)


def lwf_penalty(current: dc.Tensor, frozen: np.ndarray, lam: float) -> dc.Tensor:
    """lam * mean squared difference between current and frozen-model outputs."""
    frozen = np.asarray(frozen, dtype=np.float64)
    if current.data.shape != frozen.shape:
        raise ContractError("current/frozen output shape mismatch")
    diff = dc.sub(current, frozen)
    return dc.mul(dc.reduce_mean(dc.mul(diff, diff)), lam)


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ContractError("representation length mismatch")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ContractError("zero-norm representation")
    return float(a @ b / (na * nb))


def cmp_should_store(candidate_repr: np.ndarray, buffer_repr: np.ndarray, delta: float) -> bool:
    """Admit a candidate only when it is dissimilar to the stored sample."""
    if not (0 < delta <= 1):
        raise ContractError("delta must lie in (0, 1]")
    return cosine_similarity(candidate_repr, buffer_repr) < delta


# ---------------------------------------------------------------------------
# replay batch composition
# ---------------------------------------------------------------------------


@dataclass
class ComposedBatch:
    new: list
    replay: dict          # dataset_id -> list of samples
    counts: dict          # dataset_id -> int, for inspection/tests

    @property
    def replay_samples(self):
        return [s for group in self.replay.values() for s in group]


def replay_counts(batch_size: int, previous: list) -> tuple[int, dict]:
    """New/replay split: half new (round up), half replay split evenly
    across previous datasets with the remainder assigned round-robin in
    sequence order."""
    if batch_size < 2:
        raise ContractError("batch size must be at least 2")
    if not previous:
        return batch_size, {}
    n_new = math.ceil(batch_size / 2)
    n_replay = batch_size // 2
    base, rem = divmod(n_replay, len(previous))
    counts = {did: base + (1 if i < rem else 0) for i, did in enumerate(previous)}
    return n_new, counts


def replay_compose_batch(new_pool, buffer: ReplayBuffer, batch_size: int, rng) -> ComposedBatch:
    """Draw a 50-50 new/replay batch; all-new when no dataset has been stored."""
    if not len(new_pool):
        raise ContractError("new-sample pool is empty")
    previous = buffer.datasets() if buffer is not None else []
    n_new, counts = replay_counts(batch_size, previous)
    new = list(new_pool[:n_new])
    replay = {}
    for did, count in counts.items():
        stored = buffer.samples(did)
        if not stored:
            raise ContractError(f"previous dataset {did!r} has an empty buffer entry")
        if count == 0:
            continue
        if count <= len(stored):
            idx = rng.choice(len(stored), size=count, replace=False)
        else:
            idx = rng.choice(len(stored), size=count, replace=True)
        replay[did] = [stored[i] for i in idx]
    return ComposedBatch(new=new, replay=replay, counts=counts)


# ---------------------------------------------------------------------------
# Fisher estimation
# ---------------------------------------------------------------------------


def estimate_fisher(params: dc.ParamVector, samples, loss_fn, sample_count: int,
                    seed: int = 0) -> FisherDiag:
    """Mean squared gradient of `loss_fn` over a seeded sample subset.

    `loss_fn(tensors, sample)` must return a scalar Tensor; deterministic
    given the seed and sample order.
    """
    if sample_count < 1:
        raise ContractError("sample_count must be at least 1")
    if not len(samples):
        raise ContractError("cannot estimate Fisher information on an empty dataset")
    if len(samples) > sample_count:
        rng = np.random.default_rng(np.random.PCG64(seed))
        chosen = [samples[i] for i in sorted(rng.choice(len(samples), sample_count, replace=False))]
    else:
        chosen = list(samples)
    acc = FisherAccumulator()
    for sample in chosen:
        tensors = params.as_tensors(requires_grad=True)
        out = loss_fn(tensors, sample)
        dc.backward(out)
        acc.observe(dc.grads_from_tensors(params, tensors).flatten())
    return acc.snapshot(params)


# ---------------------------------------------------------------------------
# inner training loop
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1
    batch_size: int = 8
    lr: float = 1e-4
    seed: int = 0
    optimizer: str = "adam"
    weights: losses.LossWeights = field(default_factory=losses.LossWeights)
    loss_config: losses.LossConfig = field(default_factory=losses.LossConfig)
    fisher_sample_cap: int = 512

    def __post_init__(self):
        if self.epochs < 0:
            raise ContractError("epochs must be nonnegative")
        if self.batch_size < 1:
            raise ContractError("batch size must be positive")


@dataclass
class TrainLog:
    dataset_id: str
    losses: list = field(default_factory=list)     # one entry per optimizer step
    epoch_summaries: list = field(default_factory=list)
    steps: int = 0

    def record(self, value: float):
        if not np.isfinite(value):
            raise NumericError("non-finite loss recorded")
        self.losses.append(float(value))
        self.steps += 1

    def close_epoch(self, epoch: int, start_step: int):
        chunk = self.losses[start_step:]
        self.epoch_summaries.append({
            "epoch": epoch,
            "steps": len(chunk),
            "mean_loss": float(np.mean(chunk)) if chunk else None,
        })


class TrainingAborted(NumericError):
    """Numeric failure mid-training; carries the last good state."""

    def __init__(self, message, params, state, train_log):
        super().__init__(message)
        self.params = params
        self.state = state
        self.train_log = train_log


def _mean_loss(samples, depths, cfg: TrainConfig) -> dc.Tensor:
    total = None
    for s, d in zip(samples, depths):
        term = losses.total_loss(s, d, cfg.weights, cfg.loss_config)
        total = term if total is None else dc.add(total, term)
    return dc.mul(total, 1.0 / len(samples))


def train_on_dataset(state: StrategyState, params: dc.ParamVector, samples,
                     model_config: models.DepthNetConfig, cfg: TrainConfig,
                     dataset_id: str):
    """Train on one dataset under the strategy; returns (params, state, log).

    Afterwards the state holds the new anchor (trained parameters),
    Fisher snapshots accumulated from the squared step gradients, and
    replay buffers extended from this dataset. Zero epochs leave the
    parameters untouched and perform bookkeeping only.
    """
    state.validate()
    if not len(samples):
        raise ContractError("dataset is empty")
    variant = state.variant
    hyper = state.hyper
    k = len(state.datasets_seen)
    rng = np.random.default_rng(np.random.PCG64(np.random.SeedSequence((cfg.seed, k))))

    collect_fisher = variant in ("ewc", "ancl")
    main_acc = FisherAccumulator() if collect_fisher else None
    aux_acc = FisherAccumulator() if variant == "ancl" else None

    anchor = state.anchor
    fisher = state.fisher
    use_penalty = k >= 1 and anchor is not None and variant in ("ewc", "ancl") and fisher is not None
    use_lwf = k >= 1 and anchor is not None and variant == "lwf"
    anchors = state.past_anchors + [(anchor, fisher)] if (hyper.multi_anchor and use_penalty) else None

    aux_params = None
    aux_opt = None
    if variant == "ancl" and use_penalty:
        aux_params = params.copy()   # plasticity model restarts from the frozen weights
        aux_opt = None
    fisher_aux = state.fisher_aux if state.fisher_aux is not None else fisher

    opt_cfg = dc.OptimizerConfig(lr=cfg.lr, method=cfg.optimizer)
    opt_state = None
    train_log = TrainLog(dataset_id=dataset_id)
    current = params.copy()

    try:
        for epoch in range(cfg.epochs):
            if collect_fisher and hyper.fisher_mode == "last" and epoch == cfg.epochs - 1:
                main_acc.reset()
                if aux_acc is not None:
                    aux_acc.reset()
            order = list(rng.permutation(len(samples)))
            epoch_start = train_log.steps
            pos = 0
            while pos < len(order):
                use_replay = variant in ("replay", "cmp") and state.buffer and state.buffer.datasets()
                if use_replay:
                    remaining = len(order) - pos
                    b_eff = min(cfg.batch_size, 2 * remaining)  # keep the 50-50 ratio on the tail
                    pool = [samples[i] for i in order[pos:pos + math.ceil(b_eff / 2)]]
                    composed = replay_compose_batch(pool, state.buffer, b_eff, rng)
                    pos += len(composed.new)
                    batch_new = composed.new
                    batch_replay = composed.replay_samples
                else:
                    batch_new = [samples[i] for i in order[pos:pos + cfg.batch_size]]
                    batch_replay = []
                    pos += len(batch_new)

                leaves = current.as_tensors(requires_grad=True)
                everything = batch_new + batch_replay
                depths = models.depth_net_forward_batch(everything, leaves, model_config)
                loss = _mean_loss(batch_new, depths[:len(batch_new)], cfg)
                if batch_replay:
                    # separate means, summed: L_total = L_new + L_replay
                    loss = dc.add(loss, _mean_loss(batch_replay, depths[len(batch_new):], cfg))

                if use_penalty:
                    if variant == "ewc":
                        if hyper.multi_anchor:
                            for anc, fsh in anchors:
                                loss = dc.add(loss, ewc_penalty(leaves, anc, fsh, hyper.lambda_ewc))
                        else:
                            loss = dc.add(loss, ewc_penalty(leaves, anchor, fisher, hyper.lambda_ewc))
                    else:  # ancl
                        loss = dc.add(loss, ancl_penalty(
                            leaves, anchor, aux_params, fisher, fisher_aux,
                            hyper.lambda_ewc, hyper.lambda_aux))
                if use_lwf:
                    frozen_depths = models.predict_depth_batch(batch_new, anchor, model_config)
                    lwf_terms = [lwf_penalty(d, fz, hyper.lambda_lwf)
                                 for d, fz in zip(depths[:len(batch_new)], frozen_depths)]
                    lwf_total = lwf_terms[0]
                    for term in lwf_terms[1:]:
                        lwf_total = dc.add(lwf_total, term)
                    loss = dc.add(loss, dc.mul(lwf_total, 1.0 / len(lwf_terms)))

                dc.backward(loss)
                grads = dc.grads_from_tensors(current, leaves)
                current, opt_state = dc.optimizer_step(current, grads, opt_state, opt_cfg)
                train_log.record(loss.item())
                if collect_fisher:
                    main_acc.observe(grads.flatten())

                if aux_params is not None:
                    aux_leaves = aux_params.as_tensors(requires_grad=True)
                    aux_depths = models.depth_net_forward_batch(batch_new, aux_leaves, model_config)
                    aux_loss = _mean_loss(batch_new, aux_depths, cfg)
                    dc.backward(aux_loss)
                    aux_grads = dc.grads_from_tensors(aux_params, aux_leaves)
                    aux_params, aux_opt = dc.optimizer_step(aux_params, aux_grads, aux_opt, opt_cfg)
                    aux_acc.observe(aux_grads.flatten())
            train_log.close_epoch(epoch, epoch_start)
    except NumericError as err:
        raise TrainingAborted(str(err), params=current, state=state, train_log=train_log) from err

    new_state = replace(state)
    new_state.datasets_seen = state.datasets_seen + [dataset_id]
    if variant in ("ewc", "lwf", "ancl"):
        if hyper.multi_anchor and use_penalty:
            new_state.past_anchors = state.past_anchors + [(anchor, fisher)]
        new_state.anchor = current.copy()
    if collect_fisher:
        snap = main_acc.snapshot(current)
        if snap is not None:
            new_state.fisher = snap
    if variant == "ancl":
        new_state.aux_params = aux_params
        new_state.aux_opt = aux_opt
        if aux_acc is not None:
            aux_snap = aux_acc.snapshot(current)
            if aux_snap is not None:
                new_state.fisher_aux = aux_snap
    if variant in ("replay", "cmp"):
        _extend_buffer(new_state, current, samples, model_config, cfg, dataset_id, k)
    return current, new_state, train_log


def save_strategy_state(state: StrategyState, path) -> None:
    """Serialize anchors, Fisher diagonals, aux state and buffer references."""
    import json

    meta = {
        "variant": state.variant,
        "hyper": {
            "lambda_ewc": state.hyper.lambda_ewc, "lambda_lwf": state.hyper.lambda_lwf,
            "lambda_aux": state.hyper.lambda_aux, "delta": state.hyper.delta,
            "capacity": state.hyper.capacity, "fisher_mode": state.hyper.fisher_mode,
            "multi_anchor": state.hyper.multi_anchor,
        },
        "datasets_seen": state.datasets_seen,
        "buffer_refs": state.buffer.refs() if state.buffer is not None else None,
        "n_past": len(state.past_anchors),
        "param_names": list(state.anchor.names) if state.anchor is not None else None,
    }
    arrays = {}

    def put(prefix, pv):
        for name, arr in pv.items():
            arrays[f"{prefix}/{name}"] = arr

    if state.anchor is not None:
        put("anchor", state.anchor)
    if state.fisher is not None:
        put("fisher", state.fisher.vector)
    if state.fisher_aux is not None:
        put("fisher_aux", state.fisher_aux.vector)
    if state.aux_params is not None:
        put("aux_params", state.aux_params)
    for i, (anc, fsh) in enumerate(state.past_anchors):
        put(f"past{i}/anchor", anc)
        put(f"past{i}/fisher", fsh.vector)
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)


def load_strategy_state(path, resolve_sample=None) -> StrategyState:
    """Inverse of save_strategy_state.

    `resolve_sample(dataset_index, sample_index)` materializes buffer
    entries; required when the saved state carries buffer references.
    """
    import json

    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        names = meta["param_names"]

        def grab(prefix):
            key0 = f"{prefix}/{names[0]}" if names else None
            if key0 is None or key0 not in data:
                return None
            return dc.ParamVector([(n, data[f"{prefix}/{n}"]) for n in names])

        hyper = StrategyHyper(**meta["hyper"])
        state = StrategyState(variant=meta["variant"], hyper=hyper,
                              datasets_seen=list(meta["datasets_seen"]))
        state.anchor = grab("anchor")
        fisher = grab("fisher")
        state.fisher = FisherDiag(fisher) if fisher is not None else None
        fisher_aux = grab("fisher_aux")
        state.fisher_aux = FisherDiag(fisher_aux) if fisher_aux is not None else None
        state.aux_params = grab("aux_params")
        for i in range(meta["n_past"]):
            state.past_anchors.append((grab(f"past{i}/anchor"), FisherDiag(grab(f"past{i}/fisher"))))

    if meta["buffer_refs"] is not None:
        if resolve_sample is None:
            raise ContractError("state carries buffer references but no resolver was given")
        buf = ReplayBuffer(hyper.capacity)
        for did, refs in meta["buffer_refs"].items():
            for dataset_index, sample_index in refs:
                buf.add(did, resolve_sample(int(dataset_index), int(sample_index)),
                        (int(dataset_index), int(sample_index)))
        state.buffer = buf
    return state


def _extend_buffer(state: StrategyState, params: dc.ParamVector, samples,
                   model_config, cfg: TrainConfig, dataset_id: str, dataset_index: int):
    """Fill this dataset's replay slot after training finishes."""
    buf = state.buffer
    rng = np.random.default_rng(np.random.PCG64(np.random.SeedSequence((cfg.seed, dataset_index, 1))))
    n = len(samples)
    if state.variant == "replay":
        count = min(buf.capacity, n)
        for i in sorted(rng.choice(n, size=count, replace=False)):
            buf.add(dataset_id, samples[i], (dataset_index, int(i)))
        return

    # cmp: keep batches whose pooled representation is dissimilar to a
    # randomly drawn stored batch; the very first batch seeds the buffer
    def rep(batch):
        return np.mean([models.encode_representation(s, params, model_config) for s in batch], axis=0)

    for start in range(0, n, cfg.batch_size):
        if buf.remaining(dataset_id) == 0:
            break
        idx = list(range(start, min(start + cfg.batch_size, n)))
        batch = [samples[i] for i in idx]
        stored = buf.all_samples()
        if stored:
            pick = rng.choice(len(stored), size=min(len(idx), len(stored)), replace=False)
            stored_batch = [stored[i] for i in pick]
            if not cmp_should_store(rep(batch), rep(stored_batch), state.hyper.delta):
                continue
        room = buf.remaining(dataset_id)
        for i in idx[:room]:
            buf.add(dataset_id, samples[i], (dataset_index, int(i)))

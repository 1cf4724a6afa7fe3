"""Online adaptation loop.

One engine owns a frozen source model, a target clone, an optimizer over the
masked parameter subset, and the source buffer.  Each step follows
predict-then-adapt: the logits used for the accuracy log are computed before
the parameter update.  Buffer energies under the frozen source model are
precomputed once per episode (the buffer is immutable), which brings the
per-batch cost of the pairwise variants down to three forwards and one
backward.

Batch-statistics handling is asymmetric by construction: target-side batches
(x_t) are normalized per bn_mode for both models, while source-side batches
(x_s) always run under the frozen running statistics, matching the cached
source-model energies.  At a fresh clone both sides therefore cancel exactly
and the first logged loss is ln 2.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from . import kernels
from .buffer import (AugmentationSpec, SourceBuffer, init_buffer,
                     next_source_batch, make_pairs, confidence_filter)
from .config import AdaptConfig, config_to_dict, adapt_config_from_dict
from .metrics import accuracy as accuracy_metric
from .model import (Classifier, forward, energy, build_param_mask,
                    clone_as_target, checkpoint_dict, classifier_from_dict)
from .objectives import (build_pair_batch, cretta_loss, entropy_loss,
                         no_contrastive_loss, no_contrastive_sigma_loss,
                         nce_loss, pairwise_non_residual_loss,
                         pseudo_label_loss, weighted_energy_surrogate)
from .optim import Adam
from .seeding import rng_for
from .stream import StreamBatch

ENGINE_SNAPSHOT_FORMAT = "cretta-engine"
ENGINE_SNAPSHOT_VERSION = 1

#: variants that read the source buffer
PAIRED_VARIANTS = ("cretta", "nce_residual", "nce_non_residual",
                   "pairwise_non_residual")
#: variants that never update parameters
FROZEN_VARIANTS = ("bn_only",)


class EpisodeAbort(RuntimeError):
    """Raised when a step produces a non-finite loss; carries diagnostics."""


@dataclass
class CostCounters:
    forwards: int = 0
    backwards: int = 0
    updates: int = 0
    precompute_forwards: int = 0
    aux_backwards: int = 0

    def snapshot(self) -> dict:
        return asdict(self)


@dataclass
class RunRecord:
    """One row per processed batch."""
    batch_index: int
    stage: str
    batch_size: int
    loss: float | None
    mean_weight: float | None
    mean_e_theta_t: float | None
    mean_e_theta_s: float | None
    mean_e_phi_t: float | None
    accuracy: float
    correct: int
    mean_confidence: float
    retained: int | None
    substituted: int
    bin_counts: list
    bin_conf_sums: list
    bin_correct_sums: list
    spot_check_dev: float | None
    costs: dict

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "RunRecord":
        return cls(**json.loads(line))


class AdaptationEngine:
    """Runs one adaptation episode for a single configured variant."""

    def __init__(self, config: AdaptConfig, source_model: Classifier,
                 source_dataset=None, surrogate_dataset=None,
                 buffer: SourceBuffer | None = None):
        config.validate()
        if source_model.role != "source":
            raise ValueError("engine needs a source-role model")
        if config.weight_mode == "uniform_random" and config.loss_variant != "cretta":
            raise ValueError("uniform weighting applies to the cretta variant only")
        self.config = config
        self.source = source_model
        self.target = clone_as_target(source_model)
        self.batch_counter = 0
        self.costs = CostCounters()
        self._source_hash = source_model.param_hash()

        updates = config.loss_variant not in FROZEN_VARIANTS
        mask_policy = config.param_mask if updates else "none"
        mask = build_param_mask(self.target, mask_policy)
        if updates and not any(mask.values()):
            raise ValueError("adaptation requires at least one adaptable "
                             "parameter")
        self.target.set_requires_grad(mask)
        adaptable = {n: t for n, t in self.target.params.items() if mask[n]}
        self.optimizer = Adam(adaptable, lr=config.lr) if updates else None

        self.buffer = None
        self.cached_buffer_energies = None
        if config.loss_variant in PAIRED_VARIANTS:
            self.buffer = buffer if buffer is not None else self._build_buffer(
                source_dataset, surrogate_dataset)
            if self.buffer.augmentation is None:
                logits = forward(self.source, self.buffer.samples,
                                 bn_mode="running")
                self.cached_buffer_energies = energy(
                    logits, self.config.temperature).data
                self.costs.precompute_forwards += 1

    def _build_buffer(self, source_dataset, surrogate_dataset) -> SourceBuffer:
        cfg = self.config.buffer
        augmentation = cfg.augmentation
        if cfg.origin == "source_train":
            if source_dataset is None:
                raise ValueError("source dataset required for the buffer")
            return init_buffer(source_dataset, cfg.fraction, cfg.balanced,
                               seed=self.config.seed, augmentation=augmentation)
        if cfg.origin == "surrogate_dataset":
            if surrogate_dataset is None:
                raise ValueError("surrogate dataset required for a surrogate "
                                 "buffer")
            return init_buffer(surrogate_dataset, cfg.fraction, cfg.balanced,
                               seed=self.config.seed,
                               augmentation=augmentation,
                               origin="surrogate_dataset")
        if cfg.origin in ("confidence_high", "confidence_low"):
            if source_dataset is None:
                raise ValueError("source dataset required for the buffer")
            keep = "top_fraction" if cfg.origin == "confidence_high" \
                else "bottom_fraction"
            subset = confidence_filter(source_dataset, self.source, keep,
                                       cfg.fraction)
            # The filtered subset is exactly buffer sized; class balance is
            # whatever the confidence ranking produced.
            buf = init_buffer(subset, 1.0, balanced=False,
                              seed=self.config.seed, augmentation=augmentation,
                              origin=cfg.origin)
            return buf
        raise ValueError(f"unknown buffer origin {cfg.origin!r}")

    # -- stepping -----------------------------------------------------------

    def step(self, batch: StreamBatch) -> RunRecord:
        """Process one target batch: predict, adapt, log."""
        if batch.stage == "Q_eval":
            return self._eval_step(batch)
        x_t = np.asarray(batch.inputs, dtype=np.float64)
        if x_t.shape[0] < 2:
            raise ValueError("adaptation batches need at least 2 samples")
        cfg = self.config
        variant = cfg.loss_variant
        bn_t = "batch" if cfg.bn_mode == "batch" else "running"

        logits_t = forward(self.target, x_t, bn_mode=bn_t)
        self.costs.forwards += 1
        e_theta_t = energy(logits_t, cfg.temperature)

        loss = None
        pair_batch = None
        weights_drawn = None
        retained = None
        mean_e_theta_s = None
        mean_e_phi_t = None

        if variant == "bn_only":
            pass
        elif variant == "entropy_tent":
            loss = entropy_loss(logits_t)
        elif variant == "pseudo_label":
            loss, retained = pseudo_label_loss(logits_t, cfg.pl_threshold)
        elif variant == "no_contrastive":
            loss = no_contrastive_loss(e_theta_t)
        elif variant == "no_contrastive_sigma":
            e_phi_t = self._phi_energy(x_t, bn_t)
            mean_e_phi_t = float(np.mean(e_phi_t))
            loss = no_contrastive_sigma_loss(e_phi_t, e_theta_t, cfg.beta)
        elif variant in PAIRED_VARIANTS:
            src = next_source_batch(self.buffer, cfg.batch_size)
            e_theta_s = self._theta_source_energy(src.inputs)
            mean_e_theta_s = float(np.mean(e_theta_s.data))
            if variant == "pairwise_non_residual":
                pairs = make_pairs(x_t, src.inputs, cfg.pairing)
                loss = pairwise_non_residual_loss(e_theta_s.take(pairs[1]),
                                                  e_theta_t.take(pairs[0]))
            else:
                e_phi_s = self._phi_source_energy(src)
                e_phi_t = self._phi_energy(x_t, bn_t)
                mean_e_phi_t = float(np.mean(e_phi_t))
                if variant == "cretta":
                    pairs = make_pairs(x_t, src.inputs, cfg.pairing)
                    pair_batch = build_pair_batch(
                        src.inputs, x_t, e_phi_s, e_phi_t,
                        e_theta_s, e_theta_t, pairs, cfg.beta)
                    loss = cretta_loss(pair_batch)
                else:
                    nce_variant = ("residual" if variant == "nce_residual"
                                   else "non_residual")
                    loss = nce_loss(e_theta_s, e_phi_s, e_theta_t, e_phi_t,
                                    variant=nce_variant, beta=cfg.beta)
        else:
            raise ValueError(f"unknown loss variant {variant!r}")

        loss_value = None if loss is None else loss.item()
        if loss_value is not None and not np.isfinite(loss_value):
            raise EpisodeAbort(
                f"non-finite loss {loss_value!r} at batch {self.batch_counter} "
                f"(variant {variant}, stage {batch.stage!r})")

        spot_dev = None
        if self.optimizer is not None and loss is not None:
            can_update = not (variant == "pseudo_label" and retained == 0)
            if can_update:
                if pair_batch is not None and cfg.weight_mode == "uniform_random":
                    weights_drawn = self._draw_uniform_weights(
                        pair_batch.num_pairs)
                    surrogate = weighted_energy_surrogate(pair_batch,
                                                          weights_drawn)
                    self.optimizer.zero_grad()
                    surrogate.backward()
                else:
                    self.optimizer.zero_grad()
                    loss.backward()
                    if (pair_batch is not None and cfg.spot_check_every > 0
                            and self.batch_counter % cfg.spot_check_every == 0):
                        spot_dev = self._spot_check(pair_batch)
                self.costs.backwards += 1
                self.optimizer.step()
                self.costs.updates += 1

        mean_weight = None
        if pair_batch is not None:
            mean_weight = float(np.mean(
                weights_drawn if weights_drawn is not None
                else pair_batch.weights()))

        record = self._log_row(batch, logits_t, loss_value, mean_weight,
                               float(np.mean(e_theta_t.data)),
                               mean_e_theta_s, mean_e_phi_t, retained,
                               spot_dev)
        self.batch_counter += 1
        return record

    def _eval_step(self, batch: StreamBatch) -> RunRecord:
        """Frozen evaluation: running-statistics forward, no updates."""
        logits = forward(self.target, batch.inputs, bn_mode="running")
        self.costs.forwards += 1
        record = self._log_row(batch, logits, None, None,
                               float(np.mean(energy(
                                   logits, self.config.temperature).data)),
                               None, None, None, None)
        self.batch_counter += 1
        return record

    def _phi_energy(self, x, bn_mode) -> np.ndarray:
        logits = forward(self.source, x, bn_mode=bn_mode)
        self.costs.forwards += 1
        return energy(logits, self.config.temperature).data

    def _phi_source_energy(self, src) -> np.ndarray:
        if src.augmented or self.cached_buffer_energies is None:
            return self._phi_energy(src.inputs, "running")
        return self.cached_buffer_energies[src.indices]

    def _theta_source_energy(self, inputs):
        logits = forward(self.target, inputs, bn_mode="running")
        self.costs.forwards += 1
        return energy(logits, self.config.temperature)

    def _draw_uniform_weights(self, count: int) -> np.ndarray:
        rng = rng_for(self.config.seed, "uniform-weight", self.batch_counter)
        return rng.random(count)

    def _spot_check(self, pair_batch) -> float:
        """Compare the applied tape gradient against the manually assembled
        weighted-pair gradient; returns the largest absolute deviation."""
        params = self.optimizer.params
        applied = {n: (t.grad.copy() if t.grad is not None
                       else np.zeros_like(t.data)) for n, t in params.items()}
        for t in params.values():
            t.grad = None
        weighted_energy_surrogate(pair_batch, pair_batch.weights()).backward()
        self.costs.aux_backwards += 1
        dev = 0.0
        for n, t in params.items():
            manual = t.grad if t.grad is not None else np.zeros_like(t.data)
            dev = max(dev, float(np.max(np.abs(manual - applied[n]))))
            t.grad = applied[n]
        return dev

    def _log_row(self, batch, logits, loss_value, mean_weight, mean_e_theta_t,
                 mean_e_theta_s, mean_e_phi_t, retained, spot_dev) -> RunRecord:
        labels = np.asarray(batch.labels, dtype=np.int64)
        probs = kernels.softmax_rows(logits.data)
        predicted = np.argmax(logits.data, axis=1)
        conf = probs[np.arange(probs.shape[0]), predicted]
        correct = (predicted == labels).astype(np.float64)
        counts, conf_sums, correct_sums = kernels.calibration_bin_stats(
            conf, correct, 10)
        return RunRecord(
            batch_index=self.batch_counter,
            stage=batch.stage,
            batch_size=int(labels.size),
            loss=loss_value,
            mean_weight=mean_weight,
            mean_e_theta_t=mean_e_theta_t,
            mean_e_theta_s=mean_e_theta_s,
            mean_e_phi_t=mean_e_phi_t,
            accuracy=accuracy_metric(logits.data, labels),
            correct=int(correct.sum()),
            mean_confidence=float(conf.mean()),
            retained=retained,
            substituted=int(batch.substituted),
            bin_counts=counts.tolist(),
            bin_conf_sums=conf_sums.tolist(),
            bin_correct_sums=correct_sums.tolist(),
            spot_check_dev=spot_dev,
            costs=self.costs.snapshot(),
        )

    # -- persistence ----------------------------------------------------------

    def snapshot(self) -> dict:
        """Self-contained engine state; restoring reproduces subsequent
        records bitwise."""
        payload = {
            "format": ENGINE_SNAPSHOT_FORMAT,
            "version": ENGINE_SNAPSHOT_VERSION,
            "config": config_to_dict(self.config),
            "source_model": checkpoint_dict(self.source),
            "target_model": checkpoint_dict(self.target),
            "batch_counter": self.batch_counter,
            "costs": self.costs.snapshot(),
            "optimizer": None,
            "buffer": None,
        }
        if self.optimizer is not None:
            state = self.optimizer.state
            payload["optimizer"] = {
                "step_count": state.step_count,
                "m": {n: v.tolist() for n, v in state.m.items()},
                "v": {n: v.tolist() for n, v in state.v.items()},
            }
        if self.buffer is not None:
            buf = self.buffer
            payload["buffer"] = {
                "samples": buf.samples.tolist(),
                "labels": None if buf.labels is None else buf.labels.tolist(),
                "cursor": buf.cursor,
                "reads": buf.reads,
                "seed": buf.seed,
                "origin": buf.origin,
                "augmentation": None if buf.augmentation is None
                else asdict(buf.augmentation),
            }
        return payload

    @classmethod
    def restore(cls, payload: dict) -> "AdaptationEngine":
        if not isinstance(payload, dict) or \
                payload.get("format") != ENGINE_SNAPSHOT_FORMAT:
            raise ValueError("not an engine snapshot")
        if payload.get("version") != ENGINE_SNAPSHOT_VERSION:
            raise ValueError(
                f"unsupported snapshot version {payload.get('version')!r}")
        for key in ("config", "source_model", "target_model", "batch_counter",
                    "costs"):
            if key not in payload:
                raise ValueError(f"snapshot is missing {key!r}")
        config = adapt_config_from_dict(payload["config"])
        source = classifier_from_dict(payload["source_model"])
        if source.role != "source":
            raise ValueError("snapshot source model has the wrong role")
        buffer = None
        if payload["buffer"] is not None:
            raw = payload["buffer"]
            aug = raw["augmentation"]
            buffer = SourceBuffer(
                samples=np.asarray(raw["samples"], dtype=np.float64),
                labels=None if raw["labels"] is None
                else np.asarray(raw["labels"], dtype=np.int64),
                cursor=int(raw["cursor"]),
                augmentation=None if aug is None else AugmentationSpec(**aug),
                origin=raw["origin"], seed=int(raw["seed"]),
                reads=int(raw["reads"]))
        engine = cls(config, source, buffer=buffer)
        target = classifier_from_dict(payload["target_model"])
        engine.target.load_param_values(
            {n: t.data for n, t in target.params.items()})
        for name, arr in target.running.items():
            np.copyto(engine.target.running[name], arr)
        engine.batch_counter = int(payload["batch_counter"])
        engine.costs = CostCounters(**payload["costs"])
        if payload["optimizer"] is not None:
            if engine.optimizer is None:
                raise ValueError("snapshot has optimizer state for a frozen "
                                 "variant")
            raw = payload["optimizer"]
            engine.optimizer.state.step_count = int(raw["step_count"])
            engine.optimizer.state.m = {
                n: np.asarray(v, dtype=np.float64) for n, v in raw["m"].items()}
            engine.optimizer.state.v = {
                n: np.asarray(v, dtype=np.float64) for n, v in raw["v"].items()}
        return engine

    def verify_source_frozen(self) -> bool:
        return self.source.param_hash() == self._source_hash


@dataclass
class EpisodeResult:
    records: list
    engine: AdaptationEngine


def run_episode(config: AdaptConfig, source_model: Classifier, stream,
                source_dataset=None, surrogate_dataset=None,
                stream_length: int | None = None, sink=None) -> EpisodeResult:
    """Drive an engine over a stream for stream_length batches (or until the
    stream ends), evaluating online.  Deterministic for a fixed config."""
    engine = AdaptationEngine(config, source_model,
                              source_dataset=source_dataset,
                              surrogate_dataset=surrogate_dataset)
    length = config.stream_length if stream_length is None else stream_length
    records = []
    for _ in range(length):
        try:
            batch = next(stream)
        except StopIteration:
            break
        record = engine.step(batch)
        records.append(record)
        if sink is not None:
            sink(record)
    return EpisodeResult(records=records, engine=engine)

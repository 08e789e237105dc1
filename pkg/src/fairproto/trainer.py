"""Episode sampling and the episodic meta-training loop.

Each episode is one randomly drawn k-way n-shot task; the same task is
optimized for a fixed number of mini-epochs (one gradient update each), with
gradient clipping, Adam, and a cosine-annealed learning rate. Validation
loss on a fixed set of held-out episodes drives early stopping, and the
best-validation parameters are returned.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import CapacityError, NumericError, ValidationError
from .head import HeadParams, head_backward, head_forward, init_head
from .optim import AdamState, CosineSchedule, adam_step, clip_grad_norm, cosine_lr, global_norm
from .protonet import (
    _sigmoid,
    BCE_EPS,
    compute_prototypes,
    cross_entropy,
    episode_logits,
)
from .rng import as_generator, named_stream
from .store import DatasetManifest, EmbeddingRecord, Split

OBJECTIVES = ("prototypical_ce", "pairwise_bce", "sum_both")


@dataclass
class EpisodeConfig:
    k_min: int = 5
    k_max: int = 8
    n_min: int = 1
    n_max: int = 5
    q_train: int = 5
    episodes: int = 250
    mini_epochs: int = 25
    objective: str = "prototypical_ce"
    patience: int = 20
    min_delta: float = 1e-4
    seed: int = 0
    lr_max: float = 1e-4
    lr_min: float = 1e-6
    clip_norm: float = 1.0
    l2: float = 1e-4
    hidden: int = 512
    out_dim: int = 256
    dropout: float = 0.20
    val_episodes: int = 10

    def validate(self) -> None:
        if not (1 <= self.k_min <= self.k_max):
            raise ValidationError(f"bad k range [{self.k_min}, {self.k_max}]")
        if not (1 <= self.n_min <= self.n_max):
            raise ValidationError(f"bad n range [{self.n_min}, {self.n_max}]")
        if self.q_train < 1 or self.episodes < 1 or self.mini_epochs < 1:
            raise ValidationError("q_train, episodes, mini_epochs must be >= 1")
        if self.objective not in OBJECTIVES:
            raise ValidationError(f"objective must be one of {OBJECTIVES}, "
                                  f"got {self.objective!r}")
        if self.patience < 0 or self.val_episodes < 1:
            raise ValidationError("patience must be >= 0 and val_episodes >= 1")
        if not (0.0 <= self.dropout < 1.0):
            raise ValidationError("dropout must be in [0, 1)")


@dataclass
class Episode:
    """One sampled task: k classes with n support and q query records each."""

    class_ids: list[int]
    support: dict[int, list[EmbeddingRecord]]
    query: dict[int, list[EmbeddingRecord]]

    @property
    def n_shot(self) -> int:
        return len(next(iter(self.support.values())))


@dataclass
class StepRecord:
    step: int
    episode: int
    mini_epoch: int
    lr: float
    train_loss: float
    grad_norm: float       # before clipping
    clipped_norm: float    # after clipping


@dataclass
class TrainHistory:
    steps: list[StepRecord] = field(default_factory=list)
    val_losses: list[tuple[int, float]] = field(default_factory=list)  # (episode, loss)
    stop_reason: str = "completed"
    best_episode: int = -1
    best_val_loss: float = float("inf")

    def lr_column(self) -> list[float]:
        return [s.lr for s in self.steps]

    @property
    def final_train_loss(self) -> float:
        """Mean train loss over the last episode (single mini-epoch losses are
        noisy under dropout; the per-episode mean is the reported quantity)."""
        if not self.steps:
            return float("nan")
        last = self.steps[-1].episode
        losses = [s.train_loss for s in self.steps if s.episode == last]
        return float(np.mean(losses))

    def to_csv(self, path) -> None:
        """Columns: step, episode, mini_epoch, lr, train_loss, val_loss.
        val_loss is blank except on the last mini-epoch row of an episode."""
        val_by_episode = dict(self.val_losses)
        path = os.fspath(path)
        tmp = path + ".tmp"
        with open(tmp, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "episode", "mini_epoch", "lr", "train_loss", "val_loss"])
            for rec in self.steps:
                last_of_episode = rec.mini_epoch == max(
                    s.mini_epoch for s in self.steps if s.episode == rec.episode)
                val = val_by_episode.get(rec.episode, "") if last_of_episode else ""
                writer.writerow([rec.step, rec.episode, rec.mini_epoch,
                                 repr(rec.lr), repr(rec.train_loss),
                                 repr(val) if val != "" else ""])
        os.replace(tmp, path)


def sample_episode(manifest: DatasetManifest, config: EpisodeConfig,
                   rng, split: Split = Split.TRAIN) -> Episode:
    """Draw k ~ U{k_min..k_max}, n ~ U{n_min..n_max}, then classes and
    records without replacement from the given split."""
    rng = as_generator(rng)
    k = int(rng.integers(config.k_min, config.k_max + 1))
    n = int(rng.integers(config.n_min, config.n_max + 1))
    need = n + config.q_train

    pool: dict[int, list[EmbeddingRecord]] = {}
    for rec in manifest.records:
        if rec.split == split:
            pool.setdefault(rec.class_id, []).append(rec)
    eligible = sorted(cid for cid, recs in pool.items() if len(recs) >= need)
    if len(eligible) < k:
        raise CapacityError(
            f"{split.name.lower()} split has {len(eligible)} classes with >= {need} "
            f"records, needs {k}")
    chosen = sorted(int(c) for c in rng.choice(eligible, size=k, replace=False))
    support, query = {}, {}
    for cid in chosen:
        recs = pool[cid]
        picks = rng.permutation(len(recs))[:need]
        support[cid] = [recs[i] for i in picks[:n]]
        query[cid] = [recs[i] for i in picks[n:]]
    return Episode(chosen, support, query)


def _l2_penalty(params: HeadParams, l2: float) -> float:
    return l2 * (float(np.sum(params.W1 ** 2)) + float(np.sum(params.W2 ** 2)))


def episode_loss(episode: Episode, params: HeadParams, objective: str, rng,
                 *, l2: float = 1e-4, train: bool = True):
    """Loss (and gradients when ``train``) of one episode under ``objective``.

    The whole episode batch (support rows first, then query rows, classes in
    ascending id order) goes through the head in one forward pass. The
    returned loss includes the weight penalty term, consistent with the
    gradients. Eval mode returns (loss, None).
    """
    if objective not in OBJECTIVES:
        raise ValidationError(f"unknown objective {objective!r}")
    class_ids = episode.class_ids
    sup_rows, sup_class_slices = [], {}
    for cid in class_ids:
        start = len(sup_rows)
        sup_rows.extend(rec.vector for rec in episode.support[cid])
        sup_class_slices[cid] = slice(start, len(sup_rows))
    qry_rows, labels = [], []
    for idx, cid in enumerate(class_ids):
        for rec in episode.query[cid]:
            qry_rows.append(rec.vector)
            labels.append(idx)
    n_sup = len(sup_rows)
    x = np.asarray(sup_rows + qry_rows, dtype=np.float64)

    z, cache = head_forward(params, x, "train" if train else "eval", rng)
    z_sup, z_qry = z[:n_sup], z[n_sup:]
    labels = np.asarray(labels)

    loss = _l2_penalty(params, l2)
    dz = np.zeros_like(z)
    d_wv = 0.0
    d_bv = 0.0

    if objective in ("prototypical_ce", "sum_both"):
        protos = compute_prototypes({cid: z_sup[sup_class_slices[cid]] for cid in class_ids})
        logits = episode_logits(z_qry, protos)
        ce, dlogits = cross_entropy(logits, labels)
        loss += ce
        diff = z_qry[:, None, :] - protos.prototypes[None, :, :]   # (Q, k, D)
        dz[n_sup:] += -2.0 * np.einsum("qc,qcd->qd", dlogits, diff)
        dproto = 2.0 * np.einsum("qc,qcd->cd", dlogits, diff)
        for idx, cid in enumerate(class_ids):
            sl = sup_class_slices[cid]
            dz[sl] += dproto[idx] / (sl.stop - sl.start)

    if objective in ("pairwise_bce", "sum_both"):
        sup_labels = np.concatenate([
            np.full(sup_class_slices[cid].stop - sup_class_slices[cid].start, idx)
            for idx, cid in enumerate(class_ids)])
        diff = z_qry[:, None, :] - z_sup[None, :, :]               # (Q, S, D)
        dist = np.sqrt(np.sum(diff * diff, axis=2))
        y = (labels[:, None] != sup_labels[None, :]).astype(np.float64)
        t = float(params.w_v) * dist + float(params.b_v)
        yh = _sigmoid(t)
        yh_c = np.clip(yh, BCE_EPS, 1.0 - BCE_EPS)
        n_pairs = yh.size
        loss += float(-(y * np.log(yh_c) + (1.0 - y) * np.log(1.0 - yh_c)).mean())
        # dL/dt = (dL/dyh at the clamp) * sigmoid'(t), averaged over pairs
        dl_dyh = (-(y / yh_c) + (1.0 - y) / (1.0 - yh_c)) / n_pairs
        dl_dt = dl_dyh * yh * (1.0 - yh)
        d_wv = float(np.sum(dl_dt * dist))
        d_bv = float(np.sum(dl_dt))
        dd = dl_dt * float(params.w_v)
        safe = dist > 0.0
        unit = np.zeros_like(diff)
        unit[safe] = diff[safe] / dist[safe][..., None]
        dz[n_sup:] += np.einsum("qs,qsd->qd", dd, unit)
        dz[:n_sup] += -np.einsum("qs,qsd->sd", dd, unit)

    if not train:
        return loss, None
    grads, _ = head_backward(cache, dz, l2)
    grads["w_v"] = grads["w_v"] + d_wv
    grads["b_v"] = grads["b_v"] + d_bv
    return loss, grads


def _mean_episode_loss(episodes: list[Episode], params: HeadParams,
                       objective: str, l2: float) -> float:
    losses = [episode_loss(ep, params, objective, None, l2=l2, train=False)[0]
              for ep in episodes]
    return float(np.mean(losses))


def validate(manifest: DatasetManifest, params: HeadParams,
             config: EpisodeConfig, rng) -> float:
    """Mean eval-mode episode loss over ``config.val_episodes`` episodes
    sampled from the val split with ``rng``."""
    rng = as_generator(rng)
    episodes = [sample_episode(manifest, config, rng, Split.VAL)
                for _ in range(config.val_episodes)]
    return _mean_episode_loss(episodes, params, config.objective, config.l2)


def train(manifest: DatasetManifest, config: EpisodeConfig):
    """Run the full episodic loop; returns (best params, history).

    Capacity or numeric failures raise with the partial history attached to
    the exception as ``.history``.
    """
    config.validate()
    params = init_head(manifest.dim_total, config.hidden, config.out_dim,
                       named_stream(config.seed, "init"), config.dropout)
    sampler_rng = named_stream(config.seed, "sampler")
    dropout_rng = named_stream(config.seed, "dropout")
    # One fixed validation set for the whole run, drawn from its own stream.
    val_rng = named_stream(config.seed, "validation")
    val_episodes = [sample_episode(manifest, config, val_rng, Split.VAL)
                    for _ in range(config.val_episodes)]

    state = AdamState.for_params(params)
    schedule = CosineSchedule(config.lr_max, config.lr_min,
                              config.episodes * config.mini_epochs)
    history = TrainHistory()
    best_params = params.copy()
    stale = 0
    step = 0
    try:
        for ep_idx in range(config.episodes):
            episode = sample_episode(manifest, config, sampler_rng)
            for me in range(config.mini_epochs):
                loss, grads = episode_loss(episode, params, config.objective,
                                           dropout_rng, l2=config.l2)
                grads, pre_norm = clip_grad_norm(grads, config.clip_norm)
                lr = cosine_lr(schedule, step)
                adam_step(state, params, grads, lr)
                params.check_finite()
                history.steps.append(StepRecord(step, ep_idx, me, lr, loss,
                                                pre_norm, global_norm(grads)))
                step += 1
            val_loss = _mean_episode_loss(val_episodes, params, config.objective, config.l2)
            history.val_losses.append((ep_idx, val_loss))
            if val_loss < history.best_val_loss - config.min_delta:
                history.best_val_loss = val_loss
                history.best_episode = ep_idx
                best_params = params.copy()
                stale = 0
            else:
                stale += 1
                if stale > config.patience:
                    history.stop_reason = "early_stopped"
                    break
        else:
            history.stop_reason = "completed"
    except (CapacityError, NumericError) as exc:
        exc.history = history
        raise
    return best_params, history

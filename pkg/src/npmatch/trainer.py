"""Semi-supervised training of the neural-process classifier.

One step:

1. weak views of the unlabeled batch go through the live model in
   inference mode (memory-bank context, no graph) to get pseudo-labels;
2. items passing both the confidence and the uncertainty gate are kept;
3. context = the labeled batch, targets = labeled + kept unlabeled items
   (strong views, pseudo-labels);
4. both sets are encoded; q(z | context) and q(z | targets) are formed from
   the batch aggregates, then the per-point representations are pushed to
   the banks (latent bank: targets, deterministic bank: context);
5. z_1..z_T ~ q(z | targets) decode every target;
6. loss = CE(labeled) + lambda_u * CE(pseudo) + beta * D(q_ctx, q_tgt)
   with the skew weight set from context vs target predictive entropy;
7. SGD with momentum, EMA of the weights, cosine learning rate.

All randomness in a step comes from ``default_rng([seed, step])`` so a run
resumed from a checkpoint replays the uninterrupted run bit for bit.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from . import kernels, metrics
from .augment import augment_strong, augment_weak
from .divergence import alpha_from_uncertainty, divergence_loss
from .npmodel import (
    NPModel,
    PredictionBatch,
    aggregate,
    backbone_forward,
    decode_logits,
    encode_points,
    latent_distribution,
    one_hot,
    sample_latent,
)


WINDOW_FIELDS = ("l_cls", "l_u_cls", "div_term", "total", "pseudo_label_rate")


class TrainingError(RuntimeError):
    """A numeric fault inside a training step."""

    def __init__(self, step, message):
        super().__init__(f"step {step}: {message}")
        self.step = step


# ------------------------------------------------------------------ types


@dataclass
class PseudoLabelSet:
    indices: np.ndarray
    labels: np.ndarray

    @property
    def count(self):
        return len(self.indices)


@dataclass
class LossBreakdown:
    l_cls: float
    l_u_cls: float
    div_term: float
    total: float
    tensor: dc.Tensor = field(default=None, repr=False, compare=False)

    def as_dict(self):
        return {"l_cls": self.l_cls, "l_u_cls": self.l_u_cls,
                "div_term": self.div_term, "total": self.total}


@dataclass
class EMAState:
    shadow: dict  # name -> ndarray

    @classmethod
    def from_params(cls, params):
        return cls({k: np.array(t.data, copy=True) for k, t in params.items()})


@dataclass
class TrainState:
    model: NPModel
    velocity: dict
    ema: EMAState
    step: int = 0
    # per-step (l_cls, l_u_cls, div_term, total, pseudo_label_rate) since
    # the last log entry; checkpointed so a resumed log matches exactly
    window: list = field(default_factory=list)

    @classmethod
    def fresh(cls, model):
        velocity = {k: np.zeros_like(t.data) for k, t in model.params.items()}
        return cls(model, velocity, EMAState.from_params(model.params), 0)

    def ema_model(self):
        return self.model.with_params(self.ema.shadow)


# ------------------------------------------------------------ components


def generate_pseudo_labels(model, x_weak, T, seed):
    """Inference-mode predictions on weak views; never recorded on a graph."""
    if len(x_weak) == 0:
        return PredictionBatch(np.zeros((T, 0, model.cfg.n_classes)))
    with dc.no_grad():
        feats = model.features(x_weak).data
        return model.predict(feats, T=T, seed=seed)


def select_pseudo_labels(preds, tau_c, tau_u):
    """Items with max-prob >= tau_c and entropy <= tau_u; argmax ties go low."""
    if len(preds) == 0:
        return PseudoLabelSet(np.zeros(0, np.int64), np.zeros(0, np.int64))
    keep = (preds.confidence >= tau_c) & (preds.uncertainty <= tau_u)
    idx = np.flatnonzero(keep)
    return PseudoLabelSet(idx, preds.labels[idx].astype(np.int64))


def _cross_entropy(log_probs, labels, T):
    """Mean over T*N rows (t-major) of -log p[label]."""
    n = len(labels)
    picked = dc.pick(log_probs, np.arange(n * T), np.tile(labels, T))
    return picked.sum() * (-1.0 / (n * T))


def compute_losses(logp_labeled, labels, logp_unlabeled, pseudo_labels,
                   q_target, q_context, alpha_u, config):
    """Loss terms from log-probabilities laid out t-major, shape (T*N, C).

    The total is assembled as (l_cls + lambda_u * l_u) + beta * div, which
    is also how the float fields relate.
    """
    T = config.T
    l_cls = _cross_entropy(logp_labeled, labels, T)
    if len(pseudo_labels):
        l_u = _cross_entropy(logp_unlabeled, pseudo_labels, T)
    else:
        l_u = dc.Tensor(0.0)
    div = divergence_loss(q_context, q_target, alpha_u, config.divergence)
    total = (l_cls + l_u * config.lambda_u) + div * config.beta
    return LossBreakdown(float(l_cls.data), float(l_u.data), float(div.data),
                         float(total.data), total)


def sgd_step(params, grads, velocity, lr, momentum, weight_decay):
    """v <- m v + g;  theta <- theta - lr v - lr wd theta, in place.

    Weight decay acts on the parameters directly and never enters the
    velocity buffer.
    """
    for name, t in params.items():
        g = grads[name]
        if g.shape != t.data.shape:
            raise dc.ShapeError(f"{name}: gradient {g.shape} vs parameter {t.data.shape}")
        v = velocity[name]
        v *= momentum
        v += g
        t.data = t.data - lr * v - (lr * weight_decay) * t.data
    return params


def ema_update(ema, params, m):
    for name, t in params.items():
        ema.shadow[name] = m * ema.shadow[name] + (1.0 - m) * t.data
    return ema


def cosine_lr(step, total, lr0):
    if total <= 0:
        return lr0
    return lr0 * math.cos(7.0 * math.pi * step / (16.0 * total))


# ------------------------------------------------------------------ step


@dataclass
class Batches:
    x_labeled: np.ndarray
    y_labeled: np.ndarray
    x_unlabeled: np.ndarray


def draw_batches(dataset, config, rng):
    xl, yl = dataset.part("labeled")
    xu, _ = dataset.part("unlabeled")
    li = rng.integers(0, len(xl), size=config.B)
    n_u = config.ratio_mu * config.B if len(xu) else 0
    ui = rng.integers(0, len(xu), size=n_u) if n_u else np.zeros(0, np.int64)
    return Batches(xl[li], yl[li], xu[ui])


def step_rng(seed, step):
    return np.random.default_rng([seed, step])


def step_loss(params, model_cfg, x_in, y_labeled, pseudo_labels, config, z_seed, alpha=None):
    """Differentiable loss of one step for inputs already augmented.

    ``x_in`` stacks the B labeled views followed by the selected strong
    unlabeled views. ``alpha`` is derived from the batch uncertainties when
    None; it never carries gradient. Returns (LossBreakdown, alpha, target
    representations, context deterministic representations).
    """
    C, T, B = model_cfg.n_classes, config.T, len(y_labeled)
    y_targets = np.concatenate([y_labeled, pseudo_labels])
    feats = backbone_forward(x_in, params, model_cfg)
    f_ctx = dc.take_rows(feats, np.arange(B))
    y_ctx = one_hot(y_labeled, C)
    y_tgt = one_hot(y_targets, C)

    # batch order is already seeded, so the canonical sort is skipped
    r_ctx = encode_points(f_ctx, y_ctx, params, "latent", canonical=False)
    r_tgt = encode_points(feats, y_tgt, params, "latent", canonical=False)
    d_ctx = encode_points(f_ctx, y_ctx, params, "det", canonical=False)
    q_ctx = latent_distribution(aggregate(r_ctx, canonical=False), params)
    q_tgt = latent_distribution(aggregate(r_tgt, canonical=False), params)
    d = aggregate(d_ctx, canonical=False)

    z = sample_latent(q_tgt, T, z_seed)
    logp = dc.log_softmax_rows(decode_logits(feats, z, d, params))

    n = len(y_targets)
    rows = np.arange(T * n).reshape(T, n)
    logp_l = dc.take_rows(logp, rows[:, :B].ravel())
    logp_u = dc.take_rows(logp, rows[:, B:].ravel())

    if alpha is None:
        probs = np.exp(logp.data).reshape(T, n, C).mean(axis=0)
        u = kernels.row_entropy(probs)
        alpha = alpha_from_uncertainty(float(u[:B].mean()), float(u.mean()))

    losses = compute_losses(logp_l, y_labeled, logp_u, pseudo_labels, q_tgt, q_ctx,
                            alpha, config)
    return losses, alpha, r_tgt, d_ctx


def train_step(state, batches, config, kind="vector", fill=0.0, rng=None):
    """One optimisation step; returns (LossBreakdown, step metrics)."""
    model, cfg = state.model, state.model.cfg
    rng = rng if rng is not None else step_rng(config.seed, state.step)
    lr = cosine_lr(state.step, config.total_steps, config.lr0)
    try:
        xl_weak = augment_weak(batches.x_labeled, rng, kind)
        xu_weak = augment_weak(batches.x_unlabeled, rng, kind)
        xu_strong = augment_strong(batches.x_unlabeled, rng, kind, fill)
        plabel_seed = int(rng.integers(2**63))

        preds = generate_pseudo_labels(model, xu_weak, config.T, plabel_seed)
        chosen = select_pseudo_labels(preds, config.tau_c, config.tau_u)

        with dc.Graph() as graph:
            x_in = np.concatenate([xl_weak, xu_strong[chosen.indices]])
            losses, alpha, r_tgt, d_ctx = step_loss(model.params, cfg, x_in, batches.y_labeled,
                                                    chosen.labels, config, rng)
        if not np.isfinite(losses.total):
            raise TrainingError(state.step, f"non-finite loss {losses.total}")
        grads = graph.backward(losses.tensor, leaves=list(model.params.values()))
        graph.free()
    except (dc.DomainError, FloatingPointError) as exc:
        raise TrainingError(state.step, str(exc)) from exc

    named = {k: grads[t] for k, t in model.params.items()}
    sgd_step(model.params, named, state.velocity, lr, config.momentum, config.weight_decay)
    ema_update(state.ema, model.params, config.ema_momentum)
    model.latent_bank.push(r_tgt.data)
    model.det_bank.push(d_ctx.data)
    state.step += 1
    n_u = len(batches.x_unlabeled)
    step_metrics = {
        "lr": lr,
        "alpha": alpha,
        "B_c": chosen.count,
        "pseudo_label_rate": chosen.count / n_u if n_u else 0.0,
    }
    return losses, step_metrics


# ------------------------------------------------------------------ loop


def evaluate(model, dataset, T, seed, n_bins=15):
    x, y = dataset.part("test")
    preds = model.predict_inputs(x, T=T, seed=seed)
    return {
        "accuracy": 1.0 - metrics.error_rate(preds, y),
        "uce": metrics.expected_uce(preds, y, n_bins).uce,
        "mean_uncertainty": float(preds.uncertainty.mean()),
    }


@dataclass
class TrainResult:
    state: TrainState
    log: list

    @property
    def model(self):
        return self.state.model

    @property
    def ema_model(self):
        return self.state.ema_model()


def new_state(config, dataset):
    cfg = config.model_config(dataset.n_classes, dataset.kind, dataset.input_dim,
                              dataset.image_channels)
    return TrainState.fresh(NPModel(cfg, seed=config.seed))


def train(config, dataset, state=None, log_path=None, checkpoint_path=None, log=None,
          until=None):
    """Run ``config.total_steps`` steps (continuing from ``state`` if given).

    ``until`` stops the run early at that step count, leaving a state that
    a later call (or a checkpoint of it) continues with the same schedule.

    Every ``eval_interval`` steps the EMA weights are evaluated on the test
    split and one JSON object is appended to ``log`` (and ``log_path``).
    With ``checkpoint_path`` and a positive ``checkpoint_interval`` the
    state is saved periodically and at the end.
    """
    from .checkpoint import save_checkpoint

    state = state if state is not None else new_state(config, dataset)
    log = list(log or [])
    fill = dataset.fill_value()
    window = state.window
    fh = open(log_path, "a", encoding="utf-8") if log_path else None
    try:
        stop = config.total_steps if until is None else min(until, config.total_steps)
        while state.step < stop:
            rng = step_rng(config.seed, state.step)
            batches = draw_batches(dataset, config, rng)
            losses, sm = train_step(state, batches, config, dataset.kind, fill, rng)
            window.append([losses.l_cls, losses.l_u_cls, losses.div_term, losses.total,
                           sm["pseudo_label_rate"]])
            k = state.step
            if k % config.eval_interval == 0:
                means = np.mean(window, axis=0)
                entry = {"step": k, "lr": sm["lr"]}
                for j, key in enumerate(WINDOW_FIELDS[:4]):
                    entry[key] = float(means[j])
                entry.update(evaluate(state.ema_model(), dataset, config.eval_T,
                                      [config.seed, k, 1], config.n_bins))
                entry["pseudo_label_rate"] = float(means[4])
                window.clear()
                log.append(entry)
                if fh:
                    fh.write(json.dumps(entry) + "\n")
                    fh.flush()
            if (checkpoint_path and config.checkpoint_interval
                    and k % config.checkpoint_interval == 0):
                save_checkpoint(checkpoint_path, state, config, dataset.stats)
    finally:
        if fh:
            fh.close()
    if checkpoint_path:
        save_checkpoint(checkpoint_path, state, config, dataset.stats)
    return TrainResult(state, log)


def supervised_baseline_config(config):
    """Labeled-only counterpart: no unlabeled batch, no divergence term."""
    return config.replace(ratio_mu=0, beta=0.0)


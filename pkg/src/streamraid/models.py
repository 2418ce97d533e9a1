"""LSTM victim and next-step predictor models.

Models are dataclasses of numpy float64 arrays built on the gradkit kernels.
The victim maps an input step plus recurrent state to an output (class
logits or a scalar); by default the output head reads the post-update hidden
state, so a perturbation applied at step t already shows up in the step-t
output. The predictor is trained teacher-forced to emit the next input
vector and can be rolled out autoregressively to hallucinate futures.

Training uses Adam with fixed-order accumulation; a fixed seed reproduces
weights bit for bit. Serialization is a versioned JSON layout with floats at
17 significant digits and a weight checksum, so save -> load -> save is byte
identical.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .gradkit import (
    DimensionError,
    LstmParams,
    dropout_backward,
    dropout_forward,
    linear_backward,
    linear_forward,
    loss_backward,
    loss_forward,
    lstm_cell_backward,
    lstm_cell_forward,
    relu_backward,
    relu_forward,
)

MODEL_FORMAT_VERSION = 1

CLASSIFICATION = "classification"
REGRESSION = "regression"


class ModelFileError(DataError):
    """Model file is malformed or fails its checksum."""


class FormatVersionError(ModelFileError):
    """Model file was written by an unsupported format version."""


class ArchitectureMismatchError(ModelFileError):
    """Stored architecture disagrees with the stored weights or the caller."""


# ---------------------------------------------------------------------------
# parameter containers


@dataclass
class LinearParams:
    w: np.ndarray  # (k, n)
    b: np.ndarray  # (k,)

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.w.ndim != 2 or self.b.shape != (self.w.shape[0],):
            raise DimensionError(f"linear: w {self.w.shape} and b {self.b.shape} disagree")

    @classmethod
    def init(cls, n_in: int, n_out: int, rng) -> "LinearParams":
        k = 1.0 / np.sqrt(n_in)
        return cls(w=rng.uniform(-k, k, size=(n_out, n_in)), b=np.zeros(n_out))


@dataclass
class HiddenState:
    h: np.ndarray
    c: np.ndarray

    @classmethod
    def zeros(cls, m: int, batch: int | None = None) -> "HiddenState":
        shape = (m,) if batch is None else (batch, m)
        return cls(np.zeros(shape), np.zeros(shape))

    def copy(self) -> "HiddenState":
        return HiddenState(self.h.copy(), self.c.copy())


@dataclass
class VictimModel:
    lstm: LstmParams
    head1: LinearParams
    head2: LinearParams
    task: str  # CLASSIFICATION or REGRESSION
    # when True the output head reads the hidden state from before the
    # current input is folded in, so delta_t first matters at step t+1
    head_on_pre_state: bool = False

    @property
    def n(self) -> int:
        return self.lstm.n

    @property
    def m(self) -> int:
        return self.lstm.m

    @property
    def out_dim(self) -> int:
        return self.head2.w.shape[0]

    def params(self) -> dict[str, np.ndarray]:
        return {
            "lstm.w_x": self.lstm.w_x,
            "lstm.w_h": self.lstm.w_h,
            "lstm.b": self.lstm.b,
            "head1.w": self.head1.w,
            "head1.b": self.head1.b,
            "head2.w": self.head2.w,
            "head2.b": self.head2.b,
        }

    @property
    def loss_kind(self) -> str:
        return "cross_entropy" if self.task == CLASSIFICATION else "mse"


@dataclass
class PredictorModel:
    lstm: LstmParams
    head1: LinearParams
    head2: LinearParams
    dropout_rate: float = 0.3
    # keep dropout live at inference to sample diverse futures
    stochastic_at_inference: bool = False

    @property
    def n(self) -> int:
        return self.lstm.n

    @property
    def m(self) -> int:
        return self.lstm.m

    def params(self) -> dict[str, np.ndarray]:
        return {
            "lstm.w_x": self.lstm.w_x,
            "lstm.w_h": self.lstm.w_h,
            "lstm.b": self.lstm.b,
            "head1.w": self.head1.w,
            "head1.b": self.head1.b,
            "head2.w": self.head2.w,
            "head2.b": self.head2.b,
        }


@dataclass
class OraclePredictor:
    """Test stand-in with the predictor rollout interface.

    Returns the recorded true continuation instead of a learned guess,
    truncated at the recorded horizon. Useful for reduction checks: a
    predictive attack wired to this oracle must match the clairvoyant one.
    """

    recorded: np.ndarray  # (L, n) or (L, B, n), the full true sequence

    @property
    def n(self) -> int:
        return self.recorded.shape[-1]


def init_victim(n, hidden, head_width, out_dim, task, rng, head_on_pre_state=False) -> VictimModel:
    return VictimModel(
        lstm=LstmParams.init(n, hidden, rng),
        head1=LinearParams.init(hidden, head_width, rng),
        head2=LinearParams.init(head_width, out_dim, rng),
        task=task,
        head_on_pre_state=head_on_pre_state,
    )


def init_predictor(n, hidden, head_width, rng, dropout_rate=0.3, stochastic_at_inference=False) -> PredictorModel:
    return PredictorModel(
        lstm=LstmParams.init(n, hidden, rng),
        head1=LinearParams.init(hidden, head_width, rng),
        head2=LinearParams.init(head_width, n, rng),
        dropout_rate=dropout_rate,
        stochastic_at_inference=stochastic_at_inference,
    )


# ---------------------------------------------------------------------------
# victim forward / backward


def _head_forward(model, h):
    u, c1 = linear_forward(h, model.head1.w, model.head1.b)
    r, c2 = relu_forward(u)
    y, c3 = linear_forward(r, model.head2.w, model.head2.b)
    return y, (c1, c2, c3)


def _head_backward(model, caches, dy):
    c1, c2, c3 = caches
    dr, dw2, db2 = linear_backward(c3, dy)
    du = relu_backward(c2, dr)
    dh, dw1, db1 = linear_backward(c1, du)
    grads = {"head1.w": dw1, "head1.b": db1, "head2.w": dw2, "head2.b": db2}
    return dh, grads


def victim_step(model: VictimModel, x, state: HiddenState):
    """One step: fold x into the state, emit the output. Returns (y, new_state)."""
    h2, c2, _ = lstm_cell_forward(x, state.h, state.c, model.lstm)
    src = state.h if model.head_on_pre_state else h2
    y, _ = _head_forward(model, src)
    return y, HiddenState(h2, c2)


def victim_forward_cached(model: VictimModel, xs, state: HiddenState):
    """Unrolled forward over xs of shape (L, ...) keeping caches for BPTT.

    Returns (outputs (L, ..., out), final_state, caches).
    """
    if len(xs) == 0:
        raise DataError("victim forward: empty sequence")
    h, c = state.h, state.c
    outs, caches = [], []
    for t in range(len(xs)):
        h2, c2, lc = lstm_cell_forward(xs[t], h, c, model.lstm)
        src = h if model.head_on_pre_state else h2
        y, hc = _head_forward(model, src)
        outs.append(y)
        caches.append((lc, hc))
        h, c = h2, c2
    return np.stack(outs), HiddenState(h, c), caches


def victim_backward_cached(model: VictimModel, caches, d_outs, d_final: HiddenState | None = None):
    """BPTT over caches from victim_forward_cached.

    d_outs has the outputs' shape; returns (d_xs, param grads summed over
    batch and time, d_initial_state).
    """
    lc0 = caches[0][0]
    dh = np.zeros_like(lc0.h) if d_final is None else np.asarray(d_final.h, dtype=np.float64)
    dc = np.zeros_like(lc0.c) if d_final is None else np.asarray(d_final.c, dtype=np.float64)
    grads = {k: np.zeros_like(v) for k, v in model.params().items()}
    d_xs = [None] * len(caches)
    for t in reversed(range(len(caches))):
        lc, hc = caches[t]
        dh_head, hgrads = _head_backward(model, hc, d_outs[t])
        for k, v in hgrads.items():
            grads[k] += v
        if not model.head_on_pre_state:
            dh = dh + dh_head
        dx, dh, dc, lgrads = lstm_cell_backward(lc, dh, dc)
        if model.head_on_pre_state:
            dh = dh + dh_head
        grads["lstm.w_x"] += lgrads["w_x"]
        grads["lstm.w_h"] += lgrads["w_h"]
        grads["lstm.b"] += lgrads["b"]
        d_xs[t] = dx
    return np.stack(d_xs), grads, HiddenState(dh, dc)


def victim_rollout(model: VictimModel, xs, state: HiddenState | None = None):
    """Feed a whole sequence (L, n) or (L, B, n). Returns (outputs, final_state).

    Folding the sequence step by step through victim_step gives bitwise the
    same result; outputs for a prefix equal the prefix of the outputs.
    """
    xs = np.asarray(xs, dtype=np.float64)
    if state is None:
        batch = None if xs.ndim == 2 else xs.shape[1]
        state = HiddenState.zeros(model.m, batch)
    outs, final, _ = victim_forward_cached(model, xs, state)
    return outs, final


# ---------------------------------------------------------------------------
# predictor forward / backward / rollout


def _predictor_step_cached(q: PredictorModel, x, h, c, rng=None, dropout_on=False):
    h2, c2, lc = lstm_cell_forward(x, h, c, q.lstm)
    u, c1 = linear_forward(h2, q.head1.w, q.head1.b)
    d, cd = dropout_forward(u, q.dropout_rate if dropout_on else 0.0, rng if dropout_on else None)
    r, c2r = relu_forward(d)
    y, c3 = linear_forward(r, q.head2.w, q.head2.b)
    return y, h2, c2, (lc, c1, cd, c2r, c3)


def predictor_step(q: PredictorModel, x, state: HiddenState, rng=None, train=False):
    """One teacher-forced step. Dropout is live when training or when the
    model is flagged stochastic at inference (rng required then)."""
    dropout_on = q.dropout_rate > 0.0 and (train or q.stochastic_at_inference)
    if dropout_on and rng is None:
        raise DataError("predictor_step: dropout is active but no rng was given")
    y, h2, c2, _ = _predictor_step_cached(q, x, state.h, state.c, rng, dropout_on)
    return y, HiddenState(h2, c2)


def predictor_forward_cached(q: PredictorModel, xs, state: HiddenState, rng=None, train=False):
    dropout_on = q.dropout_rate > 0.0 and (train or q.stochastic_at_inference)
    if dropout_on and rng is None:
        raise DataError("predictor forward: dropout is active but no rng was given")
    h, c = state.h, state.c
    outs, caches = [], []
    for t in range(len(xs)):
        y, h, c, cache = _predictor_step_cached(q, xs[t], h, c, rng, dropout_on)
        outs.append(y)
        caches.append(cache)
    return np.stack(outs), HiddenState(h, c), caches


def predictor_backward_cached(q: PredictorModel, caches, d_outs):
    lc0 = caches[0][0]
    dh = np.zeros_like(lc0.h)
    dc = np.zeros_like(lc0.c)
    grads = {k: np.zeros_like(v) for k, v in q.params().items()}
    d_xs = [None] * len(caches)
    for t in reversed(range(len(caches))):
        lc, c1, cd, c2r, c3 = caches[t]
        dr, dw2, db2 = linear_backward(c3, d_outs[t])
        dd = relu_backward(c2r, dr)
        du = dropout_backward(cd, dd)
        dh_head, dw1, db1 = linear_backward(c1, du)
        grads["head1.w"] += dw1
        grads["head1.b"] += db1
        grads["head2.w"] += dw2
        grads["head2.b"] += db2
        dx, dh, dc, lgrads = lstm_cell_backward(lc, dh + dh_head, dc)
        grads["lstm.w_x"] += lgrads["w_x"]
        grads["lstm.w_h"] += lgrads["w_h"]
        grads["lstm.b"] += lgrads["b"]
        d_xs[t] = dx
    return np.stack(d_xs), grads


def predictor_rollout(q, prefix, k, samples=1, rng=None, input_range=(0.0, 1.0)):
    """Hallucinate k future steps after an observed prefix.

    prefix is (t, n) or (t, B, n) with t >= 1; the state is warmed on the
    whole prefix and the emission after its last element is the first
    prediction, then predictions are fed back autoregressively. Emissions
    are clamped to input_range before being returned or fed back. Returns
    (samples, k, n) respectively (samples, k, B, n).

    A deterministic predictor yields `samples` identical copies and consumes
    no randomness; a stochastic one resamples dropout per step and per
    sample (the warm pass included).
    """
    prefix = np.asarray(prefix, dtype=np.float64)
    if len(prefix) == 0:
        raise DataError("predictor_rollout: empty prefix")
    if k < 0:
        raise DataError(f"predictor_rollout: negative horizon {k}")
    single = prefix.ndim == 2
    lo, hi = input_range

    if isinstance(q, OraclePredictor):
        rec = np.asarray(q.recorded, dtype=np.float64)
        if single and rec.ndim != 2:
            raise DataError("oracle predictor: recorded shape does not match prefix")
        t = len(prefix)
        future = rec[t : t + k]
        out = np.broadcast_to(future, (samples,) + future.shape).copy()
        return out

    t = len(prefix)
    bsz = 1 if single else prefix.shape[1]
    xs = prefix[:, None, :] if single else prefix  # (t, B, n)
    stochastic = q.stochastic_at_inference and q.dropout_rate > 0.0
    if stochastic and rng is None:
        raise DataError("predictor_rollout: stochastic rollout needs an rng")

    def _roll(xs_warm, want_k):
        h = np.zeros((xs_warm.shape[1], q.m))
        c = np.zeros_like(h)
        y = None
        for j in range(len(xs_warm)):
            y, h, c, _ = _predictor_step_cached(q, xs_warm[j], h, c, rng, stochastic)
        steps = []
        for _ in range(want_k):
            y = np.clip(y, lo, hi)
            steps.append(y)
            if len(steps) == want_k:
                break
            y, h, c, _ = _predictor_step_cached(q, y, h, c, rng, stochastic)
        if want_k == 0:
            return np.zeros((0, xs_warm.shape[1], q.n))
        return np.stack(steps)

    if k == 0:
        out = np.zeros((samples, 0, bsz, q.n))
    elif stochastic:
        tiled = np.tile(xs, (1, samples, 1))  # (t, S*B, n)
        flat = _roll(tiled, k)  # (k, S*B, n)
        out = flat.reshape(k, samples, bsz, q.n).transpose(1, 0, 2, 3).copy()
    else:
        one = _roll(xs, k)  # (k, B, n)
        out = np.broadcast_to(one[None], (samples, k, bsz, q.n)).copy()
    if single:
        return out[:, :, 0, :]
    return out


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    """Adam with bias correction; updates run in sorted key order, in place."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict, lr: float) -> "AdamState":
        state = cls(lr=lr)
        for key, val in params.items():
            state.m[key] = np.zeros_like(val)
            state.v[key] = np.zeros_like(val)
        return state

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for key in sorted(params):
            g = grads[key]
            self.m[key] = self.beta1 * self.m[key] + (1.0 - self.beta1) * g
            self.v[key] = self.beta2 * self.v[key] + (1.0 - self.beta2) * g * g
            update = self.lr * (self.m[key] / bc1) / (np.sqrt(self.v[key] / bc2) + self.eps)
            params[key] -= update


# ---------------------------------------------------------------------------
# training


@dataclass
class VictimTrainConfig:
    hidden: int = 4
    head_width: int = 10
    epochs: int = 5
    batch_size: int = 1
    lr: float = 1e-4
    seed: int = 0
    head_on_pre_state: bool = False


@dataclass
class PredictorTrainConfig:
    hidden: int = 128
    head_width: int = 150
    dropout_rate: float = 0.3
    epochs: int = 10
    batch_size: int = 8
    lr: float = 1e-4
    seed: int = 0
    val_fraction: float = 0.1
    stochastic_at_inference: bool = False


@dataclass
class TrainResult:
    model: object
    loss_history: list
    initial_loss: float
    final_loss: float
    metrics: dict
    wall_time_s: float


def _batches(n_items, batch_size, rng):
    order = rng.permutation(n_items)
    for at in range(0, n_items, batch_size):
        yield order[at : at + batch_size]


def _victim_epoch_targets(model, labels, idx, length):
    if model.task == CLASSIFICATION:
        lab = labels[idx]  # (B,)
        return np.broadcast_to(lab, (length, len(idx)))
    lab = labels[idx]  # (B, L)
    return lab.T[..., None]  # (L, B, 1)


def _victim_mean_loss(model, sequences, labels):
    xs = sequences.transpose(1, 0, 2)
    outs, _, _ = victim_forward_cached(model, xs, HiddenState.zeros(model.m, xs.shape[1]))
    tgt = _victim_epoch_targets(model, labels, np.arange(len(sequences)), len(xs))
    total = 0.0
    for t in range(len(xs)):
        loss, _ = loss_forward(model.loss_kind, outs[t], tgt[t])
        total += float(loss.sum())
    return total / (len(xs) * sequences.shape[0])


def victim_clean_metrics(model, sequences, labels) -> dict:
    """Per-step and final-step accuracy (classification) or MSE (regression)."""
    xs = sequences.transpose(1, 0, 2)
    outs, _ = victim_rollout(model, xs)
    if model.task == CLASSIFICATION:
        pred = outs.argmax(axis=-1)  # (L, B)
        hits = pred == labels[None, :]
        return {
            "clean_acc": float(hits.mean()),
            "final_step_acc": float(hits[-1].mean()),
        }
    err = (outs[..., 0] - labels.T) ** 2
    return {"clean_mse": float(err.mean()), "final_step_mse": float(err[-1].mean())}


def train_victim(data, cfg: VictimTrainConfig) -> TrainResult:
    """Train a victim from scratch on a SequenceDataset-like object.

    Classification broadcasts the per-sequence label over every step;
    regression expects per-step targets of shape (N, L). The loss is the
    mean per-step loss over the epoch.
    """
    started = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    sequences = np.asarray(data.sequences, dtype=np.float64)
    task = data.meta.task
    if task == CLASSIFICATION:
        labels = np.asarray(data.labels)
        out_dim = int(data.meta.n_classes)
    else:
        labels = np.asarray(data.labels, dtype=np.float64)
        out_dim = 1
    n = sequences.shape[2]
    model = init_victim(n, cfg.hidden, cfg.head_width, out_dim, task, rng, cfg.head_on_pre_state)
    params = model.params()
    adam = AdamState.for_params(params, cfg.lr)

    initial_loss = _victim_mean_loss(model, sequences, labels)
    history = []
    for _ in range(cfg.epochs):
        epoch_loss = 0.0
        seen = 0
        for idx in _batches(len(sequences), cfg.batch_size, rng):
            xs = sequences[idx].transpose(1, 0, 2)  # (L, B, n)
            length, bsz = xs.shape[0], xs.shape[1]
            outs, _, caches = victim_forward_cached(model, xs, HiddenState.zeros(model.m, bsz))
            tgt = _victim_epoch_targets(model, labels, idx, length)
            d_outs = np.empty_like(outs)
            batch_loss = 0.0
            scale = 1.0 / (length * bsz)
            for t in range(length):
                loss, lcache = loss_forward(model.loss_kind, outs[t], tgt[t])
                batch_loss += float(loss.sum())
                d_outs[t] = loss_backward(lcache, np.full(bsz, scale))
            _, grads, _ = victim_backward_cached(model, caches, d_outs)
            adam.step(params, grads)
            epoch_loss += batch_loss
            seen += length * bsz
        history.append(epoch_loss / seen)

    final_loss = _victim_mean_loss(model, sequences, labels)
    metrics = victim_clean_metrics(model, sequences, labels)
    return TrainResult(model, history, initial_loss, final_loss, metrics,
                       time.perf_counter() - started)


def _predictor_pair(sequences):
    xs = sequences.transpose(1, 0, 2)  # (L, B, n)
    return xs[:-1], xs[1:]


def predictor_val_mse(q, sequences) -> float:
    if len(sequences) == 0:
        return float("nan")
    ins, tgt = _predictor_pair(np.asarray(sequences, dtype=np.float64))
    preds, _, _ = predictor_forward_cached(q, ins, HiddenState.zeros(q.m, ins.shape[1]))
    return float(((preds - tgt) ** 2).mean())


def open_loop_mse(q, sequences, warm_fraction=0.5) -> float:
    """Autoregressive rollout error: warm on a prefix, free-run the rest.

    Harsher than the teacher-forced loss because prediction errors compound
    through the feedback loop; this is the error the attack actually lives
    with when hallucinating futures.
    """
    sequences = np.asarray(sequences, dtype=np.float64)
    if sequences.ndim != 3 or len(sequences) == 0:
        raise DataError(f"open_loop_mse: sequences must be non-empty (N, L, n), "
                        f"got shape {sequences.shape}")
    length = sequences.shape[1]
    warm = min(max(int(round(warm_fraction * length)), 1), length - 1)
    xs = sequences.transpose(1, 0, 2)
    rolled = predictor_rollout(q, xs[:warm], length - warm)  # (1, L-warm, N, n)
    return float(((rolled[0] - xs[warm:]) ** 2).mean())


def train_predictor(data, cfg: PredictorTrainConfig) -> TrainResult:
    """Teacher-forced next-step regression with dropout; tracks held-out MSE."""
    started = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    sequences = np.asarray(data.sequences, dtype=np.float64)
    n_seq = len(sequences)
    if sequences.shape[1] < 2:
        raise DataError("train_predictor: sequences must have at least 2 steps")
    order = rng.permutation(n_seq)
    n_val = int(round(cfg.val_fraction * n_seq))
    n_val = min(max(n_val, 1 if n_seq > 1 and cfg.val_fraction > 0 else 0), n_seq - 1)
    val_idx, train_idx = order[:n_val], order[n_val:]
    train_seq, val_seq = sequences[train_idx], sequences[val_idx]

    n = sequences.shape[2]
    q = init_predictor(n, cfg.hidden, cfg.head_width, rng, cfg.dropout_rate,
                       cfg.stochastic_at_inference)
    params = q.params()
    adam = AdamState.for_params(params, cfg.lr)

    initial_loss = predictor_val_mse(q, train_seq)
    history = []
    for _ in range(cfg.epochs):
        epoch_loss = 0.0
        seen = 0
        for idx in _batches(len(train_seq), cfg.batch_size, rng):
            ins, tgt = _predictor_pair(train_seq[idx])
            bsz = ins.shape[1]
            preds, _, caches = predictor_forward_cached(
                q, ins, HiddenState.zeros(q.m, bsz), rng=rng, train=True)
            diff = preds - tgt
            epoch_loss += float((diff**2).sum()) / n
            seen += ins.shape[0] * bsz
            d_outs = (2.0 / (diff.size)) * diff
            _, grads = predictor_backward_cached(q, caches, d_outs)
            adam.step(params, grads)
        history.append(epoch_loss / seen)

    final_loss = predictor_val_mse(q, train_seq)
    val_mse = predictor_val_mse(q, val_seq) if len(val_seq) else float("nan")
    metrics = {"val_mse": val_mse, "train_mse": final_loss}
    return TrainResult(q, history, initial_loss, final_loss, metrics,
                       time.perf_counter() - started)


# ---------------------------------------------------------------------------
# serialization


def _f17(v: float) -> str:
    return format(float(v), ".17g")


def _weights_block(weights: dict[str, np.ndarray]) -> str:
    parts = []
    for name in sorted(weights):
        flat = ", ".join(_f17(v) for v in np.asarray(weights[name], dtype=np.float64).ravel())
        parts.append(f'"{name}": [{flat}]')
    return "{" + ", ".join(parts) + "}"


def _weight_map(model) -> dict[str, np.ndarray]:
    p = model.lstm
    return {
        "lstm.w_ii": p.w_ii, "lstm.w_if": p.w_if, "lstm.w_ig": p.w_ig, "lstm.w_io": p.w_io,
        "lstm.w_hi": p.w_hi, "lstm.w_hf": p.w_hf, "lstm.w_hg": p.w_hg, "lstm.w_ho": p.w_ho,
        "lstm.b_i": p.b_i, "lstm.b_f": p.b_f, "lstm.b_g": p.b_g, "lstm.b_o": p.b_o,
        "head1.w": model.head1.w, "head1.b": model.head1.b,
        "head2.w": model.head2.w, "head2.b": model.head2.b,
    }


def _architecture(model) -> dict:
    if isinstance(model, VictimModel):
        return {
            "kind": "victim",
            "task": model.task,
            "n": model.n,
            "hidden": model.m,
            "head_width": model.head1.w.shape[0],
            "out_dim": model.out_dim,
            "head_on_pre_state": model.head_on_pre_state,
        }
    return {
        "kind": "predictor",
        "n": model.n,
        "hidden": model.m,
        "head_width": model.head1.w.shape[0],
        "dropout_rate": model.dropout_rate,
        "stochastic_at_inference": model.stochastic_at_inference,
    }


def save_model(model, path) -> None:
    """Write the versioned JSON model file; see load_model for the inverse."""
    weights = _weight_map(model)
    block = _weights_block(weights)
    checksum = hashlib.sha256(block.encode("ascii")).hexdigest()
    arch = json.dumps(_architecture(model), sort_keys=True)
    text = (
        "{\n"
        f'  "format_version": {MODEL_FORMAT_VERSION},\n'
        f'  "architecture": {arch},\n'
        f'  "checksum": "sha256:{checksum}",\n'
        f'  "weights": {block}\n'
        "}\n"
    )
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(text)


def _expect_shape(name, arr, shape):
    if arr.shape != shape:
        raise ArchitectureMismatchError(f"weight {name}: stored shape {arr.shape}, architecture implies {shape}")


def _assemble_lstm(weights, n, m):
    def grab(name, shape):
        if name not in weights:
            raise ModelFileError(f"model file is missing weight {name!r}")
        arr = np.asarray(weights[name], dtype=np.float64)
        if arr.size != int(np.prod(shape)):
            raise ArchitectureMismatchError(
                f"weight {name}: {arr.size} values, architecture implies {shape}")
        return arr.reshape(shape)

    w_x = np.concatenate([grab(f"lstm.w_i{g}", (m, n)) for g in "ifgo"])
    w_h = np.concatenate([grab(f"lstm.w_h{g}", (m, m)) for g in "ifgo"])
    b = np.concatenate([grab(f"lstm.b_{g}", (m,)) for g in "ifgo"])
    return LstmParams(w_x, w_h, b)


def load_model(path):
    """Parse, checksum-verify, and rebuild a model written by save_model.

    Raises FormatVersionError for unsupported versions,
    ArchitectureMismatchError when dims and weights disagree, and
    ModelFileError for anything malformed.
    """
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ModelFileError(f"cannot read model file: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ModelFileError(f"model file is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ModelFileError("model file must contain a JSON object")
    for key in ("format_version", "architecture", "checksum", "weights"):
        if key not in doc:
            raise ModelFileError(f"model file is missing key {key!r}")
    if doc["format_version"] != MODEL_FORMAT_VERSION:
        raise FormatVersionError(
            f"unsupported model format_version {doc['format_version']!r}; "
            f"this build reads version {MODEL_FORMAT_VERSION}")
    arch = doc["architecture"]
    if not isinstance(arch, dict) or "kind" not in arch:
        raise ModelFileError("model architecture block is malformed")
    weights = doc["weights"]
    if not isinstance(weights, dict):
        raise ModelFileError("model weights block is malformed")

    arrays = {k: np.asarray(v, dtype=np.float64) for k, v in weights.items()}
    if not all(np.all(np.isfinite(a)) for a in arrays.values()):
        raise ModelFileError("model weights contain non-finite values")
    block = _weights_block(arrays)
    checksum = "sha256:" + hashlib.sha256(block.encode("ascii")).hexdigest()
    if doc["checksum"] != checksum:
        raise ModelFileError("model weight checksum does not match the stored value")

    try:
        n, m, head_width = int(arch["n"]), int(arch["hidden"]), int(arch["head_width"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFileError(f"model architecture block is malformed: {exc}") from exc
    lstm = _assemble_lstm(arrays, n, m)

    def grab2(name, shape):
        if name not in arrays:
            raise ModelFileError(f"model file is missing weight {name!r}")
        arr = arrays[name]
        if arr.size != int(np.prod(shape)):
            raise ArchitectureMismatchError(
                f"weight {name}: {arr.size} values, architecture implies {shape}")
        return arr.reshape(shape)

    if arch["kind"] == "victim":
        out_dim = int(arch["out_dim"])
        head1 = LinearParams(grab2("head1.w", (head_width, m)), grab2("head1.b", (head_width,)))
        head2 = LinearParams(grab2("head2.w", (out_dim, head_width)), grab2("head2.b", (out_dim,)))
        task = arch.get("task")
        if task not in (CLASSIFICATION, REGRESSION):
            raise ModelFileError(f"unknown victim task {task!r}")
        return VictimModel(lstm, head1, head2, task, bool(arch.get("head_on_pre_state", False)))
    if arch["kind"] == "predictor":
        head1 = LinearParams(grab2("head1.w", (head_width, m)), grab2("head1.b", (head_width,)))
        head2 = LinearParams(grab2("head2.w", (n, head_width)), grab2("head2.b", (n,)))
        return PredictorModel(lstm, head1, head2, float(arch.get("dropout_rate", 0.0)),
                              bool(arch.get("stochastic_at_inference", False)))
    raise ArchitectureMismatchError(f"unknown model kind {arch['kind']!r}")


def load_victim(path) -> VictimModel:
    model = load_model(path)
    if not isinstance(model, VictimModel):
        raise ArchitectureMismatchError(f"{path}: expected a victim model, found a predictor")
    return model


def load_predictor(path) -> PredictorModel:
    model = load_model(path)
    if not isinstance(model, PredictorModel):
        raise ArchitectureMismatchError(f"{path}: expected a predictor model, found a victim")
    return model

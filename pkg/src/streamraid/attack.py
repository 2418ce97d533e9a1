"""Online evasion attacks on streaming recurrent victims.

At every step t the attacker sees the clean prefix x_1..x_t, obtains a
window of future inputs from a FutureSource (nothing for greedy, the true
continuation for clairvoyant, autoregressive predictor samples, or IID pool
draws), and runs sign-gradient PGD over the whole window [t, t+K']: each of
max_count iterations recomputes the perturbed rollout from the committed
hidden state, aggregates per-step losses under the objective, updates every
window delta simultaneously, projects onto the lp ball, and clips into the
input range. Only delta_t is committed; the stream then advances one step.

Causality is structural: delta_t is produced before x_{t+1} is ever read,
so it is a deterministic function of (prefix, models, config, seed). The
hallucination randomness is drawn once per time step in stream order, which
makes traces on a common prefix bitwise identical.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .datasets import IidPool
from .errors import ConfigError, DataError, NumericError
from .gradkit import loss_backward, loss_forward, lstm_cell_backward, lstm_cell_forward
from .models import (
    HiddenState,
    OraclePredictor,
    VictimModel,
    _head_backward,
    _head_forward,
    predictor_rollout,
    victim_rollout,
    victim_step,
)

TRACE_FORMAT_VERSION = 1

BUDGET_SLACK = 1e-12


# ---------------------------------------------------------------------------
# configuration


@dataclass
class AttackConfig:
    """Knobs shared by every attack; alpha defaults to 1.5 * epsilon / max_count."""

    epsilon: float
    p: str = "inf"  # "inf" | "2"
    k: int = 0  # lookahead steps beyond the current one
    max_count: int = 100  # PGD iterations per stream step
    alpha: float | None = None
    mc_samples: int = 1
    eta: float = 0.0  # hallucination degradation toward uniform noise
    warm_start: bool = False
    input_range: tuple = (0.0, 1.0)
    seed: int = 0

    def __post_init__(self):
        if not self.epsilon > 0.0:
            raise ConfigError(f"epsilon must be > 0, got {self.epsilon}")
        if self.p not in ("inf", "2"):
            raise ConfigError(f"p must be 'inf' or '2', got {self.p!r}")
        if self.k < 0:
            raise ConfigError(f"k must be >= 0, got {self.k}")
        if self.max_count < 1:
            raise ConfigError(f"max_count must be >= 1, got {self.max_count}")
        if self.alpha is not None and not self.alpha > 0.0:
            raise ConfigError(f"alpha must be > 0 when given, got {self.alpha}")
        if self.mc_samples < 1:
            raise ConfigError(f"mc_samples must be >= 1, got {self.mc_samples}")
        if not 0.0 <= self.eta <= 1.0:
            raise ConfigError(f"eta must be in [0, 1], got {self.eta}")
        lo, hi = self.input_range
        if not lo < hi:
            raise ConfigError(f"input_range must satisfy lo < hi, got {self.input_range}")

    @property
    def step_size(self) -> float:
        return self.alpha if self.alpha is not None else 1.5 * self.epsilon / self.max_count

    def snapshot(self) -> dict:
        doc = asdict(self)
        doc["input_range"] = list(self.input_range)
        doc["step_size"] = self.step_size
        return doc


# ---------------------------------------------------------------------------
# objectives


@dataclass(frozen=True)
class SumObjective:
    """Unweighted sum of adversarial-target losses over the window."""


@dataclass(frozen=True)
class WeightedObjective:
    """Per-step weights gamma_i; adv_mask[i] picks the adversarial target
    (True) or the true one (False) at absolute step i+1. Both length L;
    hallucinated steps past the horizon get weight zero."""

    gammas: tuple
    adv_mask: tuple | None = None  # default: adversarial everywhere

    def __post_init__(self):
        object.__setattr__(self, "gammas", tuple(float(g) for g in self.gammas))
        if self.adv_mask is not None:
            if len(self.adv_mask) != len(self.gammas):
                raise ConfigError("adv_mask and gammas must have equal length")
            object.__setattr__(self, "adv_mask", tuple(bool(v) for v in self.adv_mask))


@dataclass(frozen=True)
class RealTimeObjective:
    """Only the final stream step carries weight; targets adversarial."""


@dataclass(frozen=True)
class TimeWindowObjective:
    """Adversarial targets inside [a, b]; outside, weight tau on staying
    close to the true targets (stealth)."""

    a: int
    b: int
    tau: float = 1.0

    def __post_init__(self):
        if not 1 <= self.a <= self.b:
            raise ConfigError(f"time window needs 1 <= a <= b, got a={self.a}, b={self.b}")
        if self.tau < 0.0:
            raise ConfigError(f"tau must be >= 0, got {self.tau}")


@dataclass(frozen=True)
class SurpriseObjective:
    """Minimize mean - max of the untargeted losses: keep the victim mostly
    right but catastrophically wrong somewhere."""


Objective = (SumObjective, WeightedObjective, RealTimeObjective, TimeWindowObjective,
             SurpriseObjective)


def objective_name(objective) -> str:
    return {
        SumObjective: "sum",
        WeightedObjective: "weighted",
        RealTimeObjective: "realtime",
        TimeWindowObjective: "timewindow",
        SurpriseObjective: "surprise",
    }[type(objective)]


def _window_plan(objective, abs_idx, horizon):
    """Per-window-step weights and target choice.

    Returns (kind, gamma, use_adv): kind "linear" combines gamma @ losses,
    "surprise" is handled nonlinearly; use_adv[j] says whether step j's loss
    is computed against the adversarial target.
    """
    w = len(abs_idx)
    in_seq = abs_idx <= horizon
    if isinstance(objective, SumObjective):
        return "linear", np.ones(w), np.ones(w, dtype=bool)
    if isinstance(objective, RealTimeObjective):
        return "linear", (abs_idx == horizon).astype(np.float64), np.ones(w, dtype=bool)
    if isinstance(objective, WeightedObjective):
        if len(objective.gammas) != horizon:
            raise ConfigError(
                f"weighted objective has {len(objective.gammas)} gammas for horizon {horizon}")
        gam = np.asarray(objective.gammas)
        idx = np.clip(abs_idx - 1, 0, horizon - 1)
        gamma = np.where(in_seq, gam[idx], 0.0)
        if objective.adv_mask is None:
            use_adv = np.ones(w, dtype=bool)
        else:
            use_adv = np.where(in_seq, np.asarray(objective.adv_mask)[idx], True)
        return "linear", gamma, use_adv
    if isinstance(objective, TimeWindowObjective):
        if objective.b > horizon:
            raise ConfigError(f"time window [{objective.a}, {objective.b}] exceeds horizon {horizon}")
        inside = (abs_idx >= objective.a) & (abs_idx <= objective.b)
        gamma = np.where(inside, 1.0, np.where(in_seq, objective.tau, 0.0))
        return "linear", gamma, inside
    if isinstance(objective, SurpriseObjective):
        return "surprise", None, np.zeros(w, dtype=bool)
    raise ConfigError(f"unknown objective {objective!r}")


def _aggregate_grad_batch(objective, lam, abs_idx, horizon):
    """lam is (B, W) per-step expected losses; returns (value (B,), coeffs (B, W))."""
    kind, gamma, _ = _window_plan(objective, abs_idx, horizon)
    bsz, w = lam.shape
    if kind == "linear":
        coeffs = np.broadcast_to(gamma, (bsz, w)).copy()
        return lam @ gamma, coeffs
    valid = abs_idx <= horizon
    coeffs = np.zeros((bsz, w))
    if not valid.any():
        return np.zeros(bsz), coeffs
    n_valid = int(valid.sum())
    masked = np.where(valid, lam, -np.inf)
    arg = masked.argmax(axis=1)  # first index wins ties
    value = np.where(valid, lam, 0.0).sum(axis=1) / n_valid - lam[np.arange(bsz), arg]
    coeffs[:, valid] = 1.0 / n_valid
    coeffs[np.arange(bsz), arg] -= 1.0
    return value, coeffs


def aggregate(objective, losses, start=1, horizon=None) -> float:
    """Combine per-step losses at absolute indices start, start+1, ...

    horizon is the stream length L (defaults to cover all given losses).
    """
    losses = np.asarray(losses, dtype=np.float64)
    if losses.ndim != 1:
        raise ConfigError(f"aggregate expects a loss vector, got shape {losses.shape}")
    if horizon is None:
        horizon = start + len(losses) - 1
    abs_idx = start + np.arange(len(losses))
    value, _ = _aggregate_grad_batch(objective, losses[None, :], abs_idx, horizon)
    return float(value[0])


def aggregate_grad(objective, losses, start=1, horizon=None):
    """aggregate plus d(value)/d(losses), the per-step coefficient vector."""
    losses = np.asarray(losses, dtype=np.float64)
    if horizon is None:
        horizon = start + len(losses) - 1
    abs_idx = start + np.arange(len(losses))
    value, coeffs = _aggregate_grad_batch(objective, losses[None, :], abs_idx, horizon)
    return float(value[0]), coeffs[0]


# ---------------------------------------------------------------------------
# future sources


@dataclass
class GreedySource:
    """No lookahead: the window is just the current step."""


@dataclass
class ClairvoyantSource:
    """True future, truncated at the horizon. true_future may be omitted
    inside run_online_attack, which substitutes the attacked sequence."""

    true_future: np.ndarray | None = None


@dataclass
class PredictiveSource:
    """Hallucinate with a next-step predictor (or an OraclePredictor stand-in).

    condition_on_perturbed switches the warm-up prefix from the clean stream
    to the stream the victim actually saw (committed deltas applied)."""

    predictor: object
    condition_on_perturbed: bool = False


@dataclass
class IidSource:
    """Future steps drawn uniformly (with replacement) from an input pool."""

    pool: IidPool


@dataclass
class OracleDoubleSource:
    """Test double: behaves like PredictiveSource whose predictor is exact."""

    recorded: np.ndarray


def source_name(source) -> str:
    return {
        GreedySource: "greedy",
        ClairvoyantSource: "clairvoyant",
        PredictiveSource: "predictive",
        IidSource: "iid",
        OracleDoubleSource: "oracle_double",
    }[type(source)]


# ---------------------------------------------------------------------------
# perturbation primitives


def project_lp(delta, epsilon, p):
    """Project onto the lp ball of radius epsilon (idempotent).

    p="inf" clamps coordinates; p="2" rescales whole step vectors (trailing
    axis) only when their norm exceeds epsilon by more than a relative
    guard, which keeps re-projection a bitwise no-op.
    """
    delta = np.asarray(delta, dtype=np.float64)
    if not epsilon > 0.0:
        raise ConfigError(f"epsilon must be > 0, got {epsilon}")
    if p == "inf":
        return np.clip(delta, -epsilon, epsilon)
    if p == "2":
        norms = np.sqrt((delta**2).sum(axis=-1, keepdims=True))
        scale = np.where(norms > epsilon * (1.0 + BUDGET_SLACK), epsilon / np.maximum(norms, 1e-300), 1.0)
        return delta * scale
    raise ConfigError(f"p must be 'inf' or '2', got {p!r}")


def clip_to_range(x, delta, input_range):
    """Shrink delta so x + delta stays inside the valid input range."""
    lo, hi = input_range
    return np.clip(np.asarray(x) + np.asarray(delta), lo, hi) - x


def degrade_future(futures, eta, rng, input_range=(0.0, 1.0)):
    """Blend hallucinations toward uniform noise: (1-eta)*x + eta*e.

    eta=0 returns the input untouched without consuming randomness; eta=1
    is pure noise. Models an attacker whose predictor is only partly right.
    """
    if not 0.0 <= eta <= 1.0:
        raise ConfigError(f"eta must be in [0, 1], got {eta}")
    futures = np.asarray(futures, dtype=np.float64)
    if eta == 0.0:
        return futures
    lo, hi = input_range
    noise = rng.uniform(lo, hi, size=futures.shape)
    return (1.0 - eta) * futures + eta * noise


def _hallucinate_batch(source, prefix, k, mc_samples, eta, rng, input_range,
                       true_lbn=None, horizon=None):
    """Window futures, engine layout (S, K', B, n). prefix is (t, B, n)."""
    t, bsz, n = prefix.shape
    if isinstance(source, GreedySource):
        return np.zeros((1, 0, bsz, n))
    if isinstance(source, (ClairvoyantSource, OracleDoubleSource)):
        rec = source.true_future if isinstance(source, ClairvoyantSource) else source.recorded
        rec = true_lbn if rec is None else rec
        if rec is None:
            raise ConfigError(f"{source_name(source)} source needs the true future")
        horizon = len(rec) if horizon is None else horizon
        fut = rec[t : t + min(k, horizon - t)]
        return fut[None].copy()
    if isinstance(source, PredictiveSource):
        fut = predictor_rollout(source.predictor, prefix, k, samples=mc_samples,
                                rng=rng, input_range=input_range)
        return degrade_future(fut, eta, rng, input_range)
    if isinstance(source, IidSource):
        if source.pool.n != n:
            raise ConfigError(f"IID pool has {source.pool.n} features, stream has {n}")
        fut = source.pool.sample((mc_samples, k, bsz), rng=rng)
        return degrade_future(fut, eta, rng, input_range)
    raise ConfigError(f"unknown future source {source!r}")


def hallucinate(source, prefix, k, mc_samples=1, eta=0.0, rng=None,
                input_range=(0.0, 1.0), horizon=None):
    """Sample future windows after a single observed prefix (t, n).

    Returns (samples, K', n): clairvoyant and oracle sources yield one
    sample truncated at the horizon; predictive and IID sources yield
    mc_samples windows of exactly k steps, degraded by eta. Randomness is
    taken from rng in a single pass, so equal prefixes give equal draws.
    """
    prefix = np.asarray(prefix, dtype=np.float64)
    if prefix.ndim != 2 or len(prefix) == 0:
        raise DataError(f"hallucinate: prefix must be non-empty (t, n), got {prefix.shape}")
    if k < 0:
        raise ConfigError(f"hallucinate: k must be >= 0, got {k}")
    rng = np.random.default_rng(0) if rng is None else rng
    src = source
    if isinstance(source, ClairvoyantSource) and source.true_future is not None:
        src = ClairvoyantSource(np.asarray(source.true_future, dtype=np.float64)[:, None, :])
    elif isinstance(source, OracleDoubleSource):
        src = OracleDoubleSource(np.asarray(source.recorded, dtype=np.float64)[:, None, :])
    elif isinstance(source, PredictiveSource) and isinstance(source.predictor, OraclePredictor):
        rec = np.asarray(source.predictor.recorded, dtype=np.float64)
        if rec.ndim == 2:
            src = PredictiveSource(OraclePredictor(rec[:, None, :]), source.condition_on_perturbed)
    out = _hallucinate_batch(src, prefix[:, None, :], k, mc_samples, eta, rng,
                             input_range, horizon=horizon)
    return out[:, :, 0, :]


# ---------------------------------------------------------------------------
# targets


@dataclass
class TargetSchedule:
    """Per-step targets over the stream. adv is the attacker's desired output
    schedule; true carries the clean per-step truth (class labels broadcast
    over steps, or per-step regression values). Arrays are (B, L); build one
    with make_schedule."""

    adv: np.ndarray | None
    true: np.ndarray | None
    task: str

    def length(self) -> int:
        ref = self.adv if self.adv is not None else self.true
        return ref.shape[1]

    def batch(self) -> int:
        ref = self.adv if self.adv is not None else self.true
        return ref.shape[0]


def make_schedule(adv=None, true=None, labels=None, length=None, task="classification"):
    """Normalize target inputs into a TargetSchedule.

    adv: (L,) shared schedule or (B, L). true: per-step (L,)/(B, L) values.
    labels: per-sequence class labels (B,), broadcast over length steps.
    """
    if labels is not None:
        if true is not None:
            raise ConfigError("pass either per-step true targets or per-sequence labels")
        if length is None:
            raise ConfigError("labels need an explicit length to broadcast over")
        lab = np.asarray(labels)
        true = np.broadcast_to(lab[:, None], (len(lab), length)).copy()

    def _norm(arr, dtype):
        if arr is None:
            return None
        a = np.asarray(arr, dtype=dtype)
        if a.ndim == 1:
            a = a[None, :]
        if a.ndim != 2:
            raise ConfigError(f"target arrays must be (L,) or (B, L), got shape {a.shape}")
        return a

    dtype = np.int64 if task == "classification" else np.float64
    adv = _norm(adv, dtype)
    true = _norm(true, dtype)
    if adv is None and true is None:
        raise ConfigError("a target schedule needs adv targets, true targets, or labels")
    if adv is not None and true is not None and adv.shape[1] != true.shape[1]:
        raise ConfigError(f"adv covers {adv.shape[1]} steps but true covers {true.shape[1]}")
    return TargetSchedule(adv, true, task)


def _schedule_for_batch(schedule, bsz):
    def fit(arr):
        if arr is None:
            return None
        if arr.shape[0] == bsz:
            return arr
        if arr.shape[0] == 1:
            return np.broadcast_to(arr, (bsz, arr.shape[1]))
        raise ConfigError(f"schedule covers {arr.shape[0]} sequences, batch has {bsz}")

    return fit(schedule.adv), fit(schedule.true)


def _window_targets(adv_bl, true_bl, t, w, length):
    """Targets for absolute steps t..t+w-1, shaped (w, B). Adversarial
    schedules extend periodically past the horizon; true targets repeat
    their final value there but only ever appear with weight zero."""
    abs_idx = t + np.arange(w)
    adv_w = None
    if adv_bl is not None:
        adv_w = adv_bl[:, (abs_idx - 1) % length].T.copy()
    true_w = None
    if true_bl is not None:
        true_w = true_bl[:, np.clip(abs_idx - 1, 0, length - 1)].T.copy()
    return adv_w, true_w


def _objective_requirements(objective):
    needs_adv = not isinstance(objective, SurpriseObjective)
    needs_true = isinstance(objective, (SurpriseObjective, TimeWindowObjective))
    if isinstance(objective, WeightedObjective) and objective.adv_mask is not None:
        needs_true = needs_true or not all(objective.adv_mask)
    return needs_adv, needs_true


# ---------------------------------------------------------------------------
# the PGD window step


@dataclass
class WindowTargets:
    """Targets for one optimization window starting at absolute step `start`."""

    start: int
    horizon: int
    adv: np.ndarray | None = None  # (W,) or (W, B)
    true: np.ndarray | None = None


def _attack_step_batch(model, x_t, h, c, futures, adv_w, true_w, cfg, objective,
                       t, horizon, delta_init):
    """Optimize the whole window's deltas; returns them as (W, B, n).

    futures is (S, K', B, n); adv_w/true_w are (W, B) target columns. Every
    PGD iteration re-rolls the perturbed window from the committed state
    (h, c), averages per-step losses over the S hallucination samples,
    aggregates them under the objective, and updates all deltas at once
    with a signed gradient step, projection, and range clip.
    """
    samples, kp, bsz, n = futures.shape
    w = kp + 1
    abs_idx = t + np.arange(w)
    kind, gamma, use_adv = _window_plan(objective, abs_idx, horizon)

    loss_kind = model.loss_kind
    regression = model.task != "classification"
    targets = []
    for j in range(w):
        src = adv_w if use_adv[j] else true_w
        if src is None:
            which = "adversarial" if use_adv[j] else "true"
            raise ConfigError(f"objective {objective_name(objective)} needs {which} targets "
                              f"at step {int(abs_idx[j])} but none were given")
        targets.append(src[j][:, None] if regression else src[j])

    fut_mean = futures.mean(axis=0)  # clip anchor for the window's future steps
    deltas = np.array(delta_init, dtype=np.float64, copy=True)
    alpha = cfg.step_size
    lo_hi = cfg.input_range
    pre = model.head_on_pre_state

    for it in range(cfg.max_count):
        # forward: step 0 on the true batch, steps >= 1 tiled per sample
        inp0 = x_t + deltas[0]
        h1, c1, lc0 = lstm_cell_forward(inp0, h, c, model.lstm)
        y0, hc0 = _head_forward(model, h if pre else h1)
        loss0, losc0 = loss_forward(loss_kind, y0, targets[0])
        lam = np.empty((bsz, w))
        lam[:, 0] = loss0
        caches = [(lc0, hc0, losc0)]
        hcur = np.tile(h1, (samples, 1))
        ccur = np.tile(c1, (samples, 1))
        hprev = None
        for j in range(1, w):
            inp = futures[:, j - 1].reshape(samples * bsz, n) + np.tile(deltas[j], (samples, 1))
            hprev = hcur
            h2, c2, lc = lstm_cell_forward(inp, hcur, ccur, model.lstm)
            y, hc = _head_forward(model, hprev if pre else h2)
            tgt = np.tile(targets[j], (samples, 1) if regression else samples)
            loss, losc = loss_forward(loss_kind, y, tgt)
            lam[:, j] = loss.reshape(samples, bsz).mean(axis=0)
            caches.append((lc, hc, losc))
            hcur, ccur = h2, c2

        total, coeffs = _aggregate_grad_batch(objective, lam, abs_idx, horizon)
        if not np.all(np.isfinite(total)):
            raise NumericError(f"attack window at step {t}: non-finite objective "
                               f"on PGD iteration {it + 1} of {cfg.max_count}")

        # backward through the window, collecting d/d(delta_j)
        d_deltas = np.empty_like(deltas)
        dh = np.zeros((samples * bsz, model.m))
        dc = np.zeros_like(dh)
        for j in range(w - 1, 0, -1):
            lc, hc, losc = caches[j]
            dy = loss_backward(losc, np.tile(coeffs[:, j], samples) / samples)
            dh_head, _ = _head_backward(model, hc, dy)
            if not pre:
                dh = dh + dh_head
            dx, dh, dc, _ = lstm_cell_backward(lc, dh, dc)
            if pre:
                dh = dh + dh_head
            d_deltas[j] = dx.reshape(samples, bsz, n).sum(axis=0)
        dh0 = dh.reshape(samples, bsz, model.m).sum(axis=0)
        dc0 = dc.reshape(samples, bsz, model.m).sum(axis=0)
        dy0 = loss_backward(losc0, coeffs[:, 0])
        dh_head, _ = _head_backward(model, hc0, dy0)
        if not pre:
            dh0 = dh0 + dh_head
        dx0, _, _, _ = lstm_cell_backward(lc0, dh0, dc0)
        # with a pre-state head, d(y_0)/d(delta_0) is zero; dx0 already holds
        # the pure recurrent path
        d_deltas[0] = dx0

        for j in range(w):
            stepped = deltas[j] - alpha * np.sign(d_deltas[j])
            projected = project_lp(stepped, cfg.epsilon, cfg.p)
            anchor = x_t if j == 0 else fut_mean[j - 1]
            deltas[j] = clip_to_range(anchor, projected, lo_hi)
    return deltas


def attack_step(model, x_t, state, window_targets: WindowTargets, futures, cfg,
                objective=SumObjective(), delta_init=None):
    """One stream step's window optimization for a single sequence.

    x_t is (n,), state the committed recurrent state, futures (S, K', n)
    from hallucinate. Returns (delta_t, carried) where carried holds the
    optimized future deltas (K', n), usable as the next step's warm start.
    """
    x_t = np.asarray(x_t, dtype=np.float64)
    futures = np.asarray(futures, dtype=np.float64)
    if futures.ndim != 3:
        raise DataError(f"futures must be (S, K', n), got shape {futures.shape}")
    w = futures.shape[1] + 1

    def col(arr):
        if arr is None:
            return None
        a = np.asarray(arr)
        if a.shape[0] != w:
            raise ConfigError(f"window targets cover {a.shape[0]} steps, window has {w}")
        return a.reshape(w, 1)

    if delta_init is None:
        delta_init = np.zeros((w, 1, len(x_t)))
    else:
        delta_init = np.asarray(delta_init, dtype=np.float64).reshape(w, 1, len(x_t))
    h = state.h.reshape(1, -1)
    c = state.c.reshape(1, -1)
    deltas = _attack_step_batch(model, x_t[None, :], h, c, futures[:, :, None, :],
                                col(window_targets.adv), col(window_targets.true),
                                cfg, objective, window_targets.start,
                                window_targets.horizon, delta_init)
    return deltas[0, 0], deltas[1:, 0]


# ---------------------------------------------------------------------------
# traces


@dataclass
class PerturbationTrace:
    """Everything one attacked sequence produced, step-aligned."""

    attack: str
    objective: str
    deltas: np.ndarray  # (L, n)
    clean_outputs: np.ndarray  # (L, out)
    adv_outputs: np.ndarray  # (L, out)
    per_step_loss: np.ndarray  # (L,) committed loss vs the step's objective target
    hallucination_mse: np.ndarray  # (L,), nan where no overlap with the true future
    targets_adv: np.ndarray | None
    targets_true: np.ndarray | None
    wall_time_s: np.ndarray  # (L,), shared across a batch
    config: dict = field(default_factory=dict)

    def payload_equal(self, other) -> bool:
        """Bitwise equality of the numeric payload; timings and config ignored."""

        def same(a, b):
            if a is None or b is None:
                return (a is None) == (b is None)
            return a.shape == b.shape and np.array_equal(a, b, equal_nan=True)

        return all(same(getattr(self, f), getattr(other, f))
                   for f in ("deltas", "clean_outputs", "adv_outputs", "per_step_loss",
                             "hallucination_mse", "targets_adv", "targets_true"))

    def to_json_dict(self) -> dict:
        def arr(a):
            return None if a is None else a.tolist()

        return {
            "format_version": TRACE_FORMAT_VERSION,
            "attack": self.attack,
            "objective": self.objective,
            "config": self.config,
            "deltas": arr(self.deltas),
            "clean_outputs": arr(self.clean_outputs),
            "adv_outputs": arr(self.adv_outputs),
            "per_step_loss": arr(self.per_step_loss),
            "hallucination_mse": arr(self.hallucination_mse),
            "targets_adv": arr(self.targets_adv),
            "targets_true": arr(self.targets_true),
            "wall_time_s": arr(self.wall_time_s),
        }

    @classmethod
    def from_json_dict(cls, doc) -> "PerturbationTrace":
        if doc.get("format_version") != TRACE_FORMAT_VERSION:
            raise DataError(f"unsupported trace format_version {doc.get('format_version')!r}")

        def arr(key):
            val = doc.get(key)
            if val is None:
                return None
            a = np.asarray(val)  # json ints stay integral, floats stay float
            return a.astype(np.int64 if np.issubdtype(a.dtype, np.integer) else np.float64)

        return cls(
            attack=doc["attack"], objective=doc["objective"], config=doc.get("config", {}),
            deltas=arr("deltas"), clean_outputs=arr("clean_outputs"),
            adv_outputs=arr("adv_outputs"), per_step_loss=arr("per_step_loss"),
            hallucination_mse=arr("hallucination_mse"),
            targets_adv=arr("targets_adv"), targets_true=arr("targets_true"),
            wall_time_s=arr("wall_time_s"))


def _check_budget(delta, x, cfg, t):
    lo, hi = cfg.input_range
    if cfg.p == "inf":
        worst = np.abs(delta).max() if delta.size else 0.0
    else:
        worst = np.sqrt((delta**2).sum(axis=-1)).max() if delta.size else 0.0
    if worst > cfg.epsilon + BUDGET_SLACK:
        raise NumericError(f"step {t}: committed delta norm {worst} exceeds budget {cfg.epsilon}")
    adv = x + delta
    if adv.min() < lo - BUDGET_SLACK or adv.max() > hi + BUDGET_SLACK:
        raise NumericError(f"step {t}: perturbed input leaves the valid range [{lo}, {hi}]")


def _prepare_source(source, xs):
    """Normalize any recorded future arrays to the engine's (L, B, n) layout."""
    length, bsz, n = xs.shape

    def to_lbn(arr, what):
        a = np.asarray(arr, dtype=np.float64)
        if a.ndim == 2:
            if bsz != 1 or a.shape != (length, n):
                raise DataError(f"{what}: shape {a.shape} does not fit stream "
                                f"({length}, {bsz}, {n})")
            return a[:, None, :]
        if a.ndim == 3 and a.shape == (bsz, length, n):
            return a.transpose(1, 0, 2)
        if a.ndim == 3 and a.shape == (length, bsz, n):
            return a
        raise DataError(f"{what}: shape {a.shape} does not fit stream ({length}, {bsz}, {n})")

    if isinstance(source, ClairvoyantSource) and source.true_future is not None:
        return ClairvoyantSource(to_lbn(source.true_future, "clairvoyant future"))
    if isinstance(source, OracleDoubleSource):
        return OracleDoubleSource(to_lbn(source.recorded, "oracle recording"))
    if isinstance(source, PredictiveSource):
        q = source.predictor
        if isinstance(q, OraclePredictor):
            return PredictiveSource(OraclePredictor(to_lbn(q.recorded, "oracle recording")),
                                    source.condition_on_perturbed)
        if getattr(q, "n", None) != n:
            raise ConfigError(f"predictor expects {getattr(q, 'n', '?')} features, stream has {n}")
    return source


def run_online_attack_batch(model: VictimModel, sequences, schedule: TargetSchedule,
                            source, cfg: AttackConfig, objective=SumObjective()):
    """Attack a batch of sequences in lockstep; returns one trace per sequence.

    sequences is (B, L, n). All sequences share the attack configuration and
    RNG stream; per-sequence targets come from the schedule. Equivalent to
    attacking each sequence alone up to float associativity in the shared
    batched kernels.
    """
    sequences = np.asarray(sequences, dtype=np.float64)
    if sequences.ndim != 3:
        raise DataError(f"sequences must be (B, L, n), got shape {sequences.shape}")
    bsz, length, n = sequences.shape
    if length < 1:
        raise DataError("cannot attack an empty stream")
    if model.n != n:
        raise ConfigError(f"victim expects {model.n} features, stream has {n}")
    needs_adv, needs_true = _objective_requirements(objective)
    adv_bl, true_bl = _schedule_for_batch(schedule, bsz)
    if needs_adv and adv_bl is None:
        raise ConfigError(f"objective {objective_name(objective)} needs adversarial targets")
    if needs_true and true_bl is None:
        raise ConfigError(f"objective {objective_name(objective)} needs true targets")
    if schedule.length() != length:
        raise ConfigError(f"schedule covers {schedule.length()} steps, stream has {length}")
    if schedule.task != model.task:
        raise ConfigError(f"schedule task {schedule.task!r} != victim task {model.task!r}")

    xs = sequences.transpose(1, 0, 2)  # (L, B, n)
    src = _prepare_source(source, xs)
    rng = np.random.default_rng(cfg.seed)
    greedy = isinstance(src, GreedySource)
    k_req = 0 if greedy else cfg.k

    clean_outs, _ = victim_rollout(model, xs)

    state = HiddenState.zeros(model.m, bsz)
    adv_inputs = []
    deltas_all = np.empty((length, bsz, n))
    adv_outs = np.empty_like(clean_outs)
    step_loss = np.empty((length, bsz))
    hall_mse = np.full((length, bsz), np.nan)
    wall = np.empty(length)

    conditioning = isinstance(src, PredictiveSource) and src.condition_on_perturbed
    carried = None
    for t in range(1, length + 1):
        t0 = time.perf_counter()
        if conditioning and adv_inputs:
            prefix = np.stack(adv_inputs + [xs[t - 1]])
        else:
            prefix = xs[:t]
        futures = _hallucinate_batch(src, prefix, k_req, cfg.mc_samples, cfg.eta,
                                     rng, cfg.input_range, true_lbn=xs, horizon=length)
        kp = futures.shape[1]
        w = kp + 1
        adv_w, true_w = _window_targets(adv_bl, true_bl, t, w, length)

        delta_init = np.zeros((w, bsz, n))
        if cfg.warm_start and t > 1 and carried is not None and len(carried) and w > 1:
            take = min(len(carried), w - 1)
            delta_init[1 : 1 + take] = carried[:take]

        window = _attack_step_batch(model, xs[t - 1], state.h, state.c, futures,
                                    adv_w, true_w, cfg, objective, t, length, delta_init)
        delta_t = window[0]
        carried = window[1:]
        _check_budget(delta_t, xs[t - 1], cfg, t)

        inp = xs[t - 1] + delta_t
        y, state = victim_step(model, inp, state)
        deltas_all[t - 1] = delta_t
        adv_outs[t - 1] = y
        adv_inputs.append(inp)

        # committed loss against the step's own objective target
        _, _, use_adv = _window_plan(objective, np.array([t]), length)
        tgt_col = adv_w[0] if use_adv[0] else true_w[0]
        tgt = tgt_col[:, None] if model.task != "classification" else tgt_col
        loss, _ = loss_forward(model.loss_kind, y, tgt)
        step_loss[t - 1] = loss

        overlap = min(kp, length - t)
        if overlap > 0:
            diff = futures[:, :overlap] - xs[t : t + overlap][None]
            hall_mse[t - 1] = (diff**2).mean(axis=(0, 1, 3))
        wall[t - 1] = time.perf_counter() - t0

    snapshot = cfg.snapshot()
    traces = []
    for b in range(bsz):
        traces.append(PerturbationTrace(
            attack=source_name(source),
            objective=objective_name(objective),
            deltas=deltas_all[:, b].copy(),
            clean_outputs=clean_outs[:, b].copy(),
            adv_outputs=adv_outs[:, b].copy(),
            per_step_loss=step_loss[:, b].copy(),
            hallucination_mse=hall_mse[:, b].copy(),
            targets_adv=None if adv_bl is None else np.array(adv_bl[b]),
            targets_true=None if true_bl is None else np.array(true_bl[b]),
            wall_time_s=wall.copy(),
            config=snapshot,
        ))
    return traces


def run_online_attack(model: VictimModel, sequence, schedule: TargetSchedule,
                      source, cfg: AttackConfig, objective=SumObjective()):
    """Attack one sequence (L, n) under causal online constraints."""
    sequence = np.asarray(sequence, dtype=np.float64)
    if sequence.ndim != 2:
        raise DataError(f"sequence must be (L, n), got shape {sequence.shape}")
    return run_online_attack_batch(model, sequence[None], schedule, source, cfg, objective)[0]


# ---------------------------------------------------------------------------
# transfer


@dataclass
class TransferOutcome:
    """Black-box replay: deltas crafted on the surrogate, scored on the victim."""

    traces: list
    victim_clean_outputs: np.ndarray  # (B, L, out)
    victim_adv_outputs: np.ndarray  # (B, L, out)


def transfer_attack(surrogate: VictimModel, victim: VictimModel, sequences,
                    schedule: TargetSchedule, source, cfg: AttackConfig,
                    objective=SumObjective()) -> TransferOutcome:
    """Craft perturbations against the surrogate only, then replay x + delta
    through the victim. The victim's gradients are never consulted; it only
    ever sees finished inputs."""
    sequences = np.asarray(sequences, dtype=np.float64)
    if sequences.ndim != 3:
        raise DataError(f"sequences must be (B, L, n), got shape {sequences.shape}")
    if surrogate.n != victim.n or surrogate.task != victim.task:
        raise ConfigError("surrogate and victim must share input width and task")
    traces = run_online_attack_batch(surrogate, sequences, schedule, source, cfg, objective)
    deltas = np.stack([tr.deltas for tr in traces])  # (B, L, n)
    xs = sequences.transpose(1, 0, 2)
    adv_xs = (sequences + deltas).transpose(1, 0, 2)
    clean_outs, _ = victim_rollout(victim, xs)
    adv_outs, _ = victim_rollout(victim, adv_xs)
    return TransferOutcome(traces, clean_outs.transpose(1, 0, 2), adv_outs.transpose(1, 0, 2))

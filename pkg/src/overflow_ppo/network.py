"""Dense tanh policy networks with feasibility-masked softmax heads.

Three structures share one implementation: every layer holds ``E`` weight blocks,
``E == 1`` for a layer shared by all epochs and ``E == m`` for an epoch-specific
layer, the block being picked by each sample's epoch.

* fully_connected: every layer shared, epoch one-hot appended to the input.
* fully_separate: every layer epoch-specific.
* partially_shared: hidden layers shared, output layer epoch-specific.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

STRUCTURES = ("fully_connected", "fully_separate", "partially_shared")
WEIGHTS_FORMAT = "overflow-ppo-weights"
WEIGHTS_VERSION = 1


@dataclass
class NetworkParams:
    structure: str
    J: int
    m: int
    hidden: tuple
    weights: list  # layer l: (E_l, fan_in, fan_out)
    biases: list  # layer l: (E_l, fan_out)

    @property
    def input_dim(self) -> int:
        return input_dim(self.structure, self.J, self.m)

    @property
    def n_params(self) -> int:
        return sum(w.size for w in self.weights) + sum(b.size for b in self.biases)

    def copy(self) -> "NetworkParams":
        return NetworkParams(
            self.structure, self.J, self.m, tuple(self.hidden),
            [w.copy() for w in self.weights], [b.copy() for b in self.biases],
        )

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.ravel() for pair in zip(self.weights, self.biases) for a in pair])

    def unflatten(self, vec: np.ndarray) -> "NetworkParams":
        out = self.copy()
        k = 0
        for l in range(len(out.weights)):
            for arr in (out.weights[l], out.biases[l]):
                n = arr.size
                arr[...] = vec[k:k + n].reshape(arr.shape)
                k += n
        if k != vec.size:
            raise ValueError(f"parameter vector has {vec.size} entries, expected {k}")
        return out

    def check(self, J: int, m: int) -> None:
        if (self.J, self.m) != (J, m):
            raise ValueError(f"network built for J={self.J}, m={self.m}; system has J={J}, m={m}")

    # -- weights file ---------------------------------------------------------

    def save(self, path) -> None:
        doc = {
            "format": WEIGHTS_FORMAT,
            "version": WEIGHTS_VERSION,
            "structure": self.structure,
            "J": self.J,
            "m": self.m,
            "hidden": list(self.hidden),
            "layers": [
                {"shape": list(w.shape), "weights": w.ravel().tolist(), "bias": b.ravel().tolist()}
                for w, b in zip(self.weights, self.biases)
            ],
        }
        Path(path).write_text(json.dumps(doc))

    @classmethod
    def load(cls, path, J: int | None = None, m: int | None = None) -> "NetworkParams":
        doc = json.loads(Path(path).read_text())
        if doc.get("format") != WEIGHTS_FORMAT or doc.get("version") != WEIGHTS_VERSION:
            raise ValueError(f"{path}: not a version-{WEIGHTS_VERSION} weights file")
        ref = init_params(doc["structure"], doc["J"], doc["m"], doc["hidden"])
        weights, biases = [], []
        for l, layer in enumerate(doc["layers"]):
            shape = tuple(layer["shape"])
            if shape != ref.weights[l].shape:
                raise ValueError(f"{path}: layer {l} has shape {shape}, expected {ref.weights[l].shape}")
            weights.append(np.array(layer["weights"], float).reshape(shape))
            biases.append(np.array(layer["bias"], float).reshape(ref.biases[l].shape))
        p = cls(doc["structure"], doc["J"], doc["m"], tuple(doc["hidden"]), weights, biases)
        if J is not None and m is not None:
            p.check(J, m)
        return p


def input_dim(structure: str, J: int, m: int) -> int:
    return 2 * J + m if structure == "fully_connected" else 2 * J


def init_params(structure: str, J: int, m: int, hidden=(34,), rng=None) -> NetworkParams:
    """Hidden weights uniform in +-1/sqrt(fan_in); output layer and biases zero.

    The zero output layer makes the initial policy uniform over feasible pools.
    """
    if structure not in STRUCTURES:
        raise ValueError(f"unknown structure {structure!r}")
    hidden = tuple(int(h) for h in hidden)
    if structure == "partially_shared" and not hidden:
        raise ValueError("partially_shared needs at least one hidden layer")
    rng = rng if rng is not None else np.random.default_rng(0)
    dims = [input_dim(structure, J, m), *hidden, J * J]
    weights, biases = [], []
    for l in range(len(dims) - 1):
        last = l == len(dims) - 2
        if structure == "fully_connected":
            E = 1
        elif structure == "fully_separate":
            E = m
        else:
            E = m if last else 1
        fan_in, fan_out = dims[l], dims[l + 1]
        if last:
            w = np.zeros((E, fan_in, fan_out))
        else:
            bound = 1.0 / np.sqrt(fan_in)
            w = rng.uniform(-bound, bound, size=(E, fan_in, fan_out))
        weights.append(w)
        biases.append(np.zeros((E, fan_out)))
    return NetworkParams(structure, J, m, hidden, weights, biases)


def encode(x, y, h, N, structure: str, m: int) -> np.ndarray:
    """Network input for a batch of states: ``x/N, y/N`` and, for fully_connected, one-hot epoch."""
    x = np.atleast_2d(np.asarray(x, float))
    y = np.atleast_2d(np.asarray(y, float))
    h = np.atleast_1d(np.asarray(h, np.int64))
    parts = [x / N, y / N]
    if structure == "fully_connected":
        onehot = np.zeros((x.shape[0], m))
        onehot[np.arange(x.shape[0]), h] = 1.0
        parts.append(onehot)
    return np.concatenate(parts, axis=1)


def input_encoding(s, structure: str, cfg) -> np.ndarray:
    return encode(s.x, s.y, s.h, cfg.N, structure, cfg.m)[0]


def _groups(h: np.ndarray, E: int):
    if E == 1:
        return [(0, slice(None))]
    return [(e, np.flatnonzero(h == e)) for e in range(E) if np.any(h == e)]


def forward_logits(params: NetworkParams, X: np.ndarray, h: np.ndarray, keep=False):
    """Raw output neurons, shape ``(n, J, J)``; with ``keep`` also the activations."""
    h = np.asarray(h)
    acts = [X]
    A = X
    L = len(params.weights)
    for l in range(L):
        W, b = params.weights[l], params.biases[l]
        E = W.shape[0]
        if E == 1:
            Z = A @ W[0] + b[0]
        else:
            Z = np.empty((A.shape[0], W.shape[2]))
            for e, idx in _groups(h, E):
                Z[idx] = A[idx] @ W[e] + b[e]
        A = np.tanh(Z) if l < L - 1 else Z
        acts.append(A)
    out = A.reshape(-1, params.J, params.J)
    return (out, acts) if keep else out


def backprop(params: NetworkParams, acts: list, h: np.ndarray, dout: np.ndarray) -> NetworkParams:
    """Gradient of a scalar w.r.t. all parameters given its gradient w.r.t. the output neurons."""
    grads = params.copy()
    dZ = dout.reshape(dout.shape[0], -1)
    L = len(params.weights)
    for l in range(L - 1, -1, -1):
        A = acts[l]
        W = params.weights[l]
        E = W.shape[0]
        gW = grads.weights[l]
        gb = grads.biases[l]
        gW[...] = 0.0
        gb[...] = 0.0
        if E == 1:
            gW[0] = A.T @ dZ
            gb[0] = dZ.sum(axis=0)
            dA = dZ @ W[0].T if l > 0 else None
        else:
            dA = np.zeros_like(A) if l > 0 else None
            for e, idx in _groups(h, E):
                gW[e] = A[idx].T @ dZ[idx]
                gb[e] = dZ[idx].sum(axis=0)
                if l > 0:
                    dA[idx] = dZ[idx] @ W[e].T
        if l > 0:
            dZ = dA * (1.0 - A * A)
    return grads


def masked_log_softmax(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Row-wise log-softmax restricted to ``mask``; excluded entries get ``-inf``."""
    z = np.where(mask, logits, -np.inf)
    zmax = z.max(axis=-1, keepdims=True)
    zmax = np.where(np.isfinite(zmax), zmax, 0.0)
    e = np.where(mask, np.exp(z - zmax), 0.0)
    with np.errstate(divide="ignore"):
        return z - zmax - np.log(e.sum(axis=-1, keepdims=True))


def masked_softmax(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    with np.errstate(under="ignore"):
        return np.exp(masked_log_softmax(logits, mask))


def forward(params: NetworkParams, s, cfg, mask=None) -> np.ndarray:
    """Atomic routing matrix ``kappa[i, j]`` for one state."""
    from .dynamics import feasibility_mask

    params.check(cfg.J, cfg.m)
    X = encode(s.x, s.y, s.h, cfg.N, params.structure, cfg.m)
    logits = forward_logits(params, X, np.array([s.h]))[0]
    if mask is None:
        mask = feasibility_mask(s.x, cfg)
    return masked_softmax(logits, mask)


# -- PPO surrogate -----------------------------------------------------------------


@dataclass
class SurrogateBatch:
    """Training samples in flat form.

    A *sample* is one decision epoch ``(s, f)`` with advantage ``adv``.  Each sample
    owns one or more atomic states (one in batched mode, one per customer in
    sequential mode).  A *record* is ``count`` atomic assignments of class ``cls``
    to pool ``pool`` decided at atomic state ``state``, with the generating policy's
    ``log kappa`` stored in ``logk_old``.
    """

    inputs: np.ndarray  # (S, d)
    epochs: np.ndarray  # (S,)
    masks: np.ndarray  # (S, J, J) bool
    state_sample: np.ndarray  # (S,)
    rec_state: np.ndarray  # (R,)
    rec_class: np.ndarray
    rec_pool: np.ndarray
    rec_count: np.ndarray
    rec_logk_old: np.ndarray
    adv: np.ndarray  # (n,)
    _rec_sample: np.ndarray = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return len(self.adv)

    @property
    def rec_sample(self) -> np.ndarray:
        if self._rec_sample is None:
            self._rec_sample = self.state_sample[self.rec_state]
        return self._rec_sample

    def subset(self, samples: np.ndarray) -> "SurrogateBatch":
        samples = np.asarray(samples)
        new_index = np.full(self.n, -1)
        new_index[samples] = np.arange(len(samples))
        keep_states = np.flatnonzero(new_index[self.state_sample] >= 0)
        state_index = np.full(len(self.epochs), -1)
        state_index[keep_states] = np.arange(len(keep_states))
        keep_recs = np.flatnonzero(state_index[self.rec_state] >= 0)
        return SurrogateBatch(
            inputs=self.inputs[keep_states],
            epochs=self.epochs[keep_states],
            masks=self.masks[keep_states],
            state_sample=new_index[self.state_sample[keep_states]],
            rec_state=state_index[self.rec_state[keep_recs]],
            rec_class=self.rec_class[keep_recs],
            rec_pool=self.rec_pool[keep_recs],
            rec_count=self.rec_count[keep_recs],
            rec_logk_old=self.rec_logk_old[keep_recs],
            adv=self.adv[samples],
        )


def log_ratios(params: NetworkParams, batch: SurrogateBatch, keep=False):
    logits, acts = forward_logits(params, batch.inputs, batch.epochs, keep=True)
    logk = masked_log_softmax(logits, batch.masks)
    lk = logk[batch.rec_state, batch.rec_class, batch.rec_pool]
    contrib = batch.rec_count * (lk - batch.rec_logk_old)
    logr = np.bincount(batch.rec_sample, weights=contrib, minlength=batch.n)
    if keep:
        return logr, logk, acts
    return logr


def _objective(r, adv, eps):
    clipped = np.clip(r, 1.0 - eps, 1.0 + eps)
    unclipped_obj = r * adv
    clipped_obj = clipped * adv
    return np.maximum(unclipped_obj, clipped_obj), unclipped_obj >= clipped_obj


def ppo_loss(params: NetworkParams, batch: SurrogateBatch, eps: float) -> float:
    """Mean over samples of ``max(r A, clip(r, 1-eps, 1+eps) A)``; minimized."""
    logr = log_ratios(params, batch)
    r = np.exp(logr)
    _check_finite(r)
    obj, _ = _objective(r, batch.adv, eps)
    return float(obj.mean())


def _check_finite(r):
    bad = np.flatnonzero(~np.isfinite(r))
    if bad.size:
        raise FloatingPointError(f"non-finite probability ratio at sample {bad[0]} ({bad.size} total)")


def ppo_loss_and_grad(params: NetworkParams, batch: SurrogateBatch, eps: float):
    """Surrogate loss and its exact gradient.

    Samples on the clip plateau (clipped branch selected with the clip saturated)
    contribute no gradient; ties go to the unclipped branch.
    """
    logr, logk, acts = log_ratios(params, batch, keep=True)
    r = np.exp(logr)
    _check_finite(r)
    obj, unclipped = _objective(r, batch.adv, eps)
    n = batch.n
    dlogr = np.where(unclipped, batch.adv, 0.0) * r / n
    coef = dlogr[batch.rec_sample] * batch.rec_count
    kappa = np.exp(logk)
    dlogits = np.zeros_like(logk)
    np.add.at(dlogits, (batch.rec_state, batch.rec_class, batch.rec_pool), coef)
    np.add.at(dlogits, (batch.rec_state, batch.rec_class), -coef[:, None] * kappa[batch.rec_state, batch.rec_class])
    grads = backprop(params, acts, batch.epochs, dlogits)
    return float(obj.mean()), grads


def backward(params: NetworkParams, batch: SurrogateBatch, eps: float) -> NetworkParams:
    return ppo_loss_and_grad(params, batch, eps)[1]


# -- optimizer ---------------------------------------------------------------------


@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None

    def copy(self) -> "OptimizerState":
        return OptimizerState(
            self.lr, self.beta1, self.beta2, self.eps, self.t,
            None if self.m is None else self.m.copy(), None if self.v is None else self.v.copy(),
        )


def adam_step(params: NetworkParams, grads: NetworkParams, opt: OptimizerState):
    """One bias-corrected Adam update; returns ``(new_params, new_opt)``."""
    theta = params.flatten()
    g = grads.flatten()
    if g.shape != theta.shape:
        raise ValueError(f"gradient has {g.size} entries, parameters {theta.size}")
    opt = opt.copy()
    if opt.m is None:
        opt.m = np.zeros_like(theta)
        opt.v = np.zeros_like(theta)
    if opt.m.shape != theta.shape:
        raise ValueError("optimizer state does not match the parameters")
    opt.t += 1
    opt.m = opt.beta1 * opt.m + (1 - opt.beta1) * g
    opt.v = opt.beta2 * opt.v + (1 - opt.beta2) * g * g
    mhat = opt.m / (1 - opt.beta1 ** opt.t)
    vhat = opt.v / (1 - opt.beta2 ** opt.t)
    theta = theta - opt.lr * mhat / (np.sqrt(vhat) + opt.eps)
    return params.unflatten(theta), opt


@dataclass(frozen=True)
class ClipSchedule:
    """Clip size by iteration: ``initial`` until the first breakpoint, then piecewise.

    ``steps`` is a tuple of ``(from_iteration, eps)`` pairs (0-based iterations).
    """

    initial: float = 0.5
    steps: tuple = ((6, 0.2),)

    def __post_init__(self):
        if self.initial <= 0 or any(e <= 0 for _, e in self.steps):
            raise ValueError("clip size must be positive")

    def __call__(self, iteration: int) -> float:
        eps = self.initial
        for start, e in sorted(self.steps):
            if iteration >= start:
                eps = e
        return eps

    @classmethod
    def constant(cls, eps: float) -> "ClipSchedule":
        return cls(eps, ())


def train_surrogate(params, batch, eps, opt, epochs, minibatch, rng, safeguard=True):
    """``epochs`` Adam passes over shuffled minibatches of ``batch``.

    After each pass the full-batch loss is checked; a pass that increased it is
    undone and the learning rate halved, so the returned loss never exceeds the
    starting loss.  Returns ``(params, opt, loss_before, loss_after)``.
    """
    loss0 = ppo_loss(params, batch, eps)
    current = loss0
    n = batch.n
    for _ in range(epochs):
        order = rng.permutation(n)
        trial, trial_opt = params, opt
        for start in range(0, n, minibatch):
            sub = batch.subset(np.sort(order[start:start + minibatch]))
            _, g = ppo_loss_and_grad(trial, sub, eps)
            trial, trial_opt = adam_step(trial, g, trial_opt)
        new = ppo_loss(trial, batch, eps)
        if safeguard and new > current:
            opt = opt.copy()
            opt.lr *= 0.5
            continue
        params, opt, current = trial, trial_opt, new
    return params, opt, loss0, current


# -- warm start ----------------------------------------------------------------------


def imitate(params, inputs, epochs_idx, masks, target, lr=1e-2, steps=500, rng=None, minibatch=4096):
    """Fit the network to target routing rows by cross-entropy (rows with one option skipped)."""
    rng = rng if rng is not None else np.random.default_rng(0)
    rows = masks.sum(axis=-1) > 1
    opt = OptimizerState(lr=lr)
    n = len(inputs)
    for _ in range(steps):
        idx = rng.choice(n, size=min(minibatch, n), replace=False) if n > minibatch else np.arange(n)
        logits, acts = forward_logits(params, inputs[idx], epochs_idx[idx], keep=True)
        kappa = masked_softmax(logits, masks[idx])
        w = rows[idx][..., None]
        dl = np.where(w, kappa - target[idx], 0.0) / max(1, rows[idx].sum())
        g = backprop(params, acts, epochs_idx[idx], dl)
        params, opt = adam_step(params, g, opt)
    return params


def cross_entropy(params, inputs, epochs_idx, masks, target) -> float:
    logk = masked_log_softmax(forward_logits(params, inputs, epochs_idx), masks)
    rows = masks.sum(axis=-1) > 1
    ce = -np.where(target > 0, target * np.where(masks, logk, 0.0), 0.0).sum(axis=-1)
    return float(ce[rows].mean()) if rows.any() else 0.0


# -- symmetric two-pool gradient oracle ----------------------------------------------------


def _check_symmetric_twopool(cfg):
    sym = (
        cfg.J == 2 and cfg.m == 1
        and cfg.N[0] == cfg.N[1]
        and np.isclose(cfg.arrivals[0, 0], cfg.arrivals[1, 0])
        and np.isclose(cfg.mu[0], cfg.mu[1])
        and np.isclose(cfg.holding_cost[0], cfg.holding_cost[1])
        and cfg.route_mask[0, 1] and cfg.route_mask[1, 0]
        and np.isclose(cfg.overflow_cost[0, 1], cfg.overflow_cost[1, 0])
    )
    if not sym:
        raise ValueError("gradient oracle needs a symmetric two-pool single-epoch system with routes both ways")


def _logistic_overflow(theta, x):
    z = theta[0] + theta[1] * x[0] + theta[2] * x[1]
    return 0.5 * (1.0 + np.tanh(0.5 * z))  # overflow probability 1 / (1 + exp(-z))


def twopool_gradient_oracle(theta, x, beta, cfg) -> np.ndarray:
    """Closed-form gradient of ``E_f[A(s, f)]`` w.r.t. ``theta = (theta0, theta1, theta2)``.

    Symmetric two-pool single-epoch system; class 0 overflows to pool 1 with
    probability ``k = 1 / (1 + exp(-(theta0 + theta1 x0 + theta2 x1)))`` per queued
    customer, independently (so ``f ~ Bin(q0, k)``, capacity ignored).  The advantage
    uses ``v(x) = b1 (x0 + x1) + b3 (x0^2 + x1^2)`` with ``beta = (b1, b3)`` and next
    counts ``x_j' = x_j+ + A_j - D_j``, ``D_j ~ Bin(x_j+, mu)`` (queued customers
    also depart).  Zero unless pool 0 has a queue and pool 1 idle servers.
    """
    _check_symmetric_twopool(cfg)
    x = np.asarray(x, float)
    N = float(cfg.N[0])
    q = max(x[0] - N, 0.0)
    if q == 0 or x[1] >= N:
        return np.zeros(3)
    k = _logistic_overflow(theta, x)
    mu = float(cfg.mu[0])
    B, C = float(cfg.overflow_cost[0, 1]), float(cfg.holding_cost[0])
    g0 = q * k * (1 - k) * (2 * beta[1] * (1 - mu) ** 2 * (2 * (q - 1) * k + x[1] - x[0] + 1) + B - C)
    return g0 * np.array([1.0, x[0], x[1]])


def twopool_advantage(x, f, beta, cfg, gamma: float = 0.0) -> float:
    """``g - gamma + E v(s') - v(s)`` for moving ``f`` class-0 customers to pool 1 (moment form)."""
    x = np.asarray(x, float)
    N = float(cfg.N[0])
    lam, mu = float(cfg.arrivals[0, 0]), float(cfg.mu[0])
    B, C = float(cfg.overflow_cost[0, 1]), float(cfg.holding_cost[0])
    q = max(x[0] - N, 0.0)
    post = np.array([x[0] - f, x[1] + f])
    mean = post * (1 - mu) + lam
    second = mean ** 2 + post * mu * (1 - mu) + lam
    ev = beta[0] * mean.sum() + beta[1] * second.sum()
    v = beta[0] * x.sum() + beta[1] * (x ** 2).sum()
    return C * (q - f) + B * f - gamma + ev - v


def twopool_gradient_sum(theta, x, beta, cfg) -> np.ndarray:
    """Same gradient by exhaustive summation ``sum_f pi(f) (f - q k) A(s, f) (1, x0, x1)``."""
    from scipy import stats

    _check_symmetric_twopool(cfg)
    x = np.asarray(x, float)
    q = int(max(x[0] - cfg.N[0], 0))
    if q == 0 or x[1] >= cfg.N[0]:
        return np.zeros(3)
    k = _logistic_overflow(theta, x)
    f = np.arange(q + 1)
    pmf = stats.binom.pmf(f, q, k)
    adv = np.array([twopool_advantage(x, n, beta, cfg) for n in f])
    g0 = float(np.sum(pmf * (f - q * k) * adv))
    return g0 * np.array([1.0, x[0], x[1]])

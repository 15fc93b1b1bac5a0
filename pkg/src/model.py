"""
Detection network in numpy with explicit backward passes.

Forward pass for a batch X of shape [B, E, T, C] (entities, timesteps, KPI channels):

    channel / spatial / temporal attention:
        m = mean of X over the two other axes, centred along the branch axis
        s = softmax(m @ A)                 scores over the branch axis
        X_b = (X * s) @ P                  [B, E, T, d]
    gated fusion:
        X_sum = X_temp @ W1 + X_spat @ W2 + X_chan @ W3
        g = sigmoid(X_sum @ Wg + bg)
        X_fused = g * X_sum
    sequence encoder: mean over E, LSTM over T (gates i, f, g, o) → h_T
    decoder: I = relu(h_T @ W + b); p_d = softmax(I @ Hd + hd); p_c = softmax(I @ Hc + hc)
    loss: kappa * CE(p_d, y_d) + (1 - kappa) * CE(p_c, y_c), probabilities clamped at 1e-12

Parameters are a dict of name → float64 array. Training uses Adam.
"""

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
import pandas as pd
from scipy.special import expit, softmax

from errors import DomainError, TrainingError

logger = logging.getLogger(__name__)

EPS = 1e-12

FORMAT_VERSION = 1

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

# Branch name → axis of X it attends over
ATTENTION_AXES = {"chan": 3, "spat": 1, "temp": 2}


@dataclass(frozen=True)
class ModelConfig:
    entities: int
    timesteps: int
    channels: int
    proj_dim: int = 8
    hidden: int = 8
    classes: int = 6
    kappa: float = 0.5
    learning_rate: float = 1e-3
    epochs: int = 40
    batch_size: int = 32
    seed: int = 7

    def __post_init__(self):
        dims = (self.entities, self.timesteps, self.channels, self.proj_dim, self.hidden, self.classes)
        if min(dims) < 1:
            raise DomainError(f"all model dimensions must be >= 1, got {dims}")
        if not 0.0 <= self.kappa <= 1.0:
            raise DomainError(f"kappa must lie in [0, 1], got {self.kappa}")


class DetectionOutput(NamedTuple):
    p_d: np.ndarray
    p_c: np.ndarray

    @property
    def anomaly_score(self):
        return self.p_d[..., 1]

    @property
    def is_anomalous(self):
        return self.p_d[..., 1] > self.p_d[..., 0]

    @property
    def predicted_class(self):
        return np.argmax(self.p_c, axis=-1)


class EpochRecord(NamedTuple):
    epoch: int
    loss: float
    loss_d: float
    loss_c: float


def param_shapes(config):
    C, E, T = config.channels, config.entities, config.timesteps
    d, h, F = config.proj_dim, config.hidden, config.classes
    return {
        "chan_A": (C, C),
        "chan_P": (C, d),
        "spat_A": (E, E),
        "spat_P": (C, d),
        "temp_A": (T, T),
        "temp_P": (C, d),
        "W1": (d, d),
        "W2": (d, d),
        "W3": (d, d),
        "Wg": (d, d),
        "bg": (d,),
        "lstm_Wx": (d, 4 * h),
        "lstm_Wh": (h, 4 * h),
        "lstm_b": (4 * h,),
        "dec_W": (h, h),
        "dec_b": (h,),
        "head_d_W": (h, 2),
        "head_d_b": (2,),
        "head_c_W": (h, F),
        "head_c_b": (F,),
    }


def init_params(config, rng=None):
    """Weights uniform in ±1/sqrt(fan_in), biases zero."""
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    params = {}
    for name, shape in param_shapes(config).items():
        if len(shape) == 1:
            params[name] = np.zeros(shape)
        else:
            bound = 1.0 / np.sqrt(shape[0])
            params[name] = rng.uniform(-bound, bound, size=shape)
    return params


def copy_params(params):
    return {name: value.copy() for name, value in params.items()}


def _as_batch(X):
    X = np.asarray(X, dtype=float)
    if X.ndim == 3:
        return X[None], True
    if X.ndim != 4:
        raise DomainError(f"expected a [E, T, C] or [B, E, T, C] tensor, got shape {X.shape}")
    return X, False


def _check_input(params, X):
    if not np.all(np.isfinite(X)):
        raise DomainError("input tensor contains non-finite values")
    expected = (params["spat_A"].shape[0], params["temp_A"].shape[0], params["chan_A"].shape[0])
    if X.shape[1:] != expected:
        raise DomainError(f"input shape {X.shape[1:]} does not match model (E, T, C) = {expected}")


# --- attention -----------------------------------------------------------------

def _attention_forward(X, A, P, axis):
    pool = tuple(a for a in (1, 2, 3) if a != axis)
    m = X.mean(axis=pool)
    mc = m - m.mean(axis=1, keepdims=True)
    s = softmax(mc @ A, axis=1)
    shape = [X.shape[0], 1, 1, 1]
    shape[axis] = X.shape[axis]
    Y = X * s.reshape(shape)
    return Y @ P, (mc, s, Y)


def _attention_backward(X, A, P, axis, cache, dout):
    mc, s, Y = cache
    pool = tuple(a for a in (1, 2, 3) if a != axis)
    dP = np.einsum("betc,betd->cd", Y, dout)
    dY = dout @ P.T
    ds = (dY * X).sum(axis=pool)
    dz = s * (ds - (ds * s).sum(axis=1, keepdims=True))
    dA = mc.T @ dz
    return dA, dP


def attention_scores(params, X, branch):
    """Softmax scores of one branch ("chan", "spat" or "temp"), shape [B, n]."""
    X, _ = _as_batch(X)
    _, (_, s, _) = _attention_forward(X, params[f"{branch}_A"], params[f"{branch}_P"], ATTENTION_AXES[branch])
    return s


def _branch(params, X, branch):
    X, single = _as_batch(X)
    _check_input(params, X)
    out, _ = _attention_forward(X, params[f"{branch}_A"], params[f"{branch}_P"], ATTENTION_AXES[branch])
    return out[0] if single else out


def channel_attention(params, X):
    """Weights KPI channels by a softmax over channel means; returns [.., E, T, d]."""
    return _branch(params, X, "chan")


def spatial_attention(params, X):
    return _branch(params, X, "spat")


def temporal_attention(params, X):
    return _branch(params, X, "temp")


# --- fusion ----------------------------------------------------------------

def _fuse_forward(params, X_temp, X_spat, X_chan):
    S = X_temp @ params["W1"] + X_spat @ params["W2"] + X_chan @ params["W3"]
    g = expit(S @ params["Wg"] + params["bg"])
    return g * S, (S, g)


def gated_fuse(params, X_temp, X_spat, X_chan):
    """X_sum = X_temp W1 + X_spat W2 + X_chan W3; gated by sigmoid(X_sum Wg + bg)."""
    shapes = {np.shape(X_temp), np.shape(X_spat), np.shape(X_chan)}
    if len(shapes) != 1:
        raise DomainError(f"fusion inputs differ in shape: {sorted(shapes)}")
    fused, _ = _fuse_forward(params, np.asarray(X_temp), np.asarray(X_spat), np.asarray(X_chan))
    return fused


def fusion_gate(params, X_temp, X_spat, X_chan):
    _, (_, g) = _fuse_forward(params, np.asarray(X_temp), np.asarray(X_spat), np.asarray(X_chan))
    return g


# --- LSTM ------------------------------------------------------------------

def _lstm_forward(params, Z):
    Wx, Wh, b = params["lstm_Wx"], params["lstm_Wh"], params["lstm_b"]
    B, T, _ = Z.shape
    H = Wh.shape[0]
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    steps = []
    for t in range(T):
        x = Z[:, t]
        a = x @ Wx + h @ Wh + b
        i = expit(a[:, :H])
        f = expit(a[:, H:2 * H])
        g = np.tanh(a[:, 2 * H:3 * H])
        o = expit(a[:, 3 * H:])
        c_new = f * c + i * g
        tc = np.tanh(c_new)
        steps.append((x, h, c, i, f, g, o, tc))
        h = o * tc
        c = c_new
    return h, steps


def _lstm_backward(params, steps, dh):
    Wx, Wh = params["lstm_Wx"], params["lstm_Wh"]
    dWx = np.zeros_like(Wx)
    dWh = np.zeros_like(Wh)
    db = np.zeros_like(params["lstm_b"])
    B = dh.shape[0]
    dZ = np.zeros((B, len(steps), Wx.shape[0]))
    dc = np.zeros_like(dh)
    for t in reversed(range(len(steps))):
        x, h_prev, c_prev, i, f, g, o, tc = steps[t]
        do = dh * tc
        dc = dc + dh * o * (1.0 - tc ** 2)
        da = np.concatenate([
            dc * g * i * (1.0 - i),
            dc * c_prev * f * (1.0 - f),
            dc * i * (1.0 - g ** 2),
            do * o * (1.0 - o),
        ], axis=1)
        dWx += x.T @ da
        dWh += h_prev.T @ da
        db += da.sum(axis=0)
        dZ[:, t] = da @ Wx.T
        dh = da @ Wh.T
        dc = dc * f
    return dZ, dWx, dWh, db


def encode_sequence(params, X_fused):
    """Mean over entities, then the LSTM over time; returns h_T."""
    X, single = _as_batch(X_fused)
    h, _ = _lstm_forward(params, X.mean(axis=1))
    return h[0] if single else h


# --- decoder and loss --------------------------------------------------------

def _decode_forward(params, attr):
    pre = attr @ params["dec_W"] + params["dec_b"]
    I = np.maximum(pre, 0.0)
    p_d = softmax(I @ params["head_d_W"] + params["head_d_b"], axis=-1)
    p_c = softmax(I @ params["head_c_W"] + params["head_c_b"], axis=-1)
    return DetectionOutput(p_d, p_c), (pre, I)


def decode(params, attr):
    attr = np.asarray(attr, dtype=float)
    if not np.all(np.isfinite(attr)):
        raise DomainError("attr contains non-finite values")
    out, _ = _decode_forward(params, attr)
    return out


def anomaly_representation(params, attr):
    """I_sa = relu(W attr + b)."""
    _, (_, I) = _decode_forward(params, np.asarray(attr, dtype=float))
    return I


def _true_probs(p, y):
    p = np.atleast_2d(p)
    y = np.atleast_1d(np.asarray(y, dtype=int))
    return p[np.arange(len(y)), y]


def loss_components(out, y_d, y_c):
    """Mean detection and classification cross-entropies."""
    L_d = -np.log(np.maximum(_true_probs(out.p_d, y_d), EPS))
    L_c = -np.log(np.maximum(_true_probs(out.p_c, y_c), EPS))
    return float(L_d.mean()), float(L_c.mean())


def loss(out, y_d, y_c, kappa):
    L_d, L_c = loss_components(out, y_d, y_c)
    if kappa == 1:
        return L_d
    if kappa == 0:
        return L_c
    return kappa * L_d + (1.0 - kappa) * L_c


# --- full pass -------------------------------------------------------------

def _forward(params, X):
    branches = {}
    for name, axis in ATTENTION_AXES.items():
        branches[name] = _attention_forward(X, params[f"{name}_A"], params[f"{name}_P"], axis)
    fused, fuse_cache = _fuse_forward(params, branches["temp"][0], branches["spat"][0], branches["chan"][0])
    h_T, steps = _lstm_forward(params, fused.mean(axis=1))
    out, dec_cache = _decode_forward(params, h_T)
    return out, (branches, fuse_cache, steps, h_T, dec_cache)


def forward(params, X):
    """Full forward pass; accepts [E, T, C] or [B, E, T, C]."""
    X, single = _as_batch(X)
    _check_input(params, X)
    out, _ = _forward(params, X)
    if single:
        return DetectionOutput(out.p_d[0], out.p_c[0])
    return out


def loss_and_grads(params, X, y_d, y_c, kappa):
    """
    Batch-mean loss and its gradient for every parameter.

    Returns:
        (loss, dict name → gradient array)
    """
    X, _ = _as_batch(X)
    _check_input(params, X)
    y_d = np.atleast_1d(np.asarray(y_d, dtype=int))
    y_c = np.atleast_1d(np.asarray(y_c, dtype=int))
    B, E = X.shape[0], X.shape[1]

    out, (branches, (S, g), steps, h_T, (pre, I)) = _forward(params, X)
    value = loss(out, y_d, y_c, kappa)
    grads = {}

    rows = np.arange(B)
    onehot_d = np.zeros_like(out.p_d)
    onehot_d[rows, y_d] = 1.0
    onehot_c = np.zeros_like(out.p_c)
    onehot_c[rows, y_c] = 1.0
    # Clamped probabilities contribute a constant, hence no gradient
    live_d = (out.p_d[rows, y_d] >= EPS)[:, None]
    live_c = (out.p_c[rows, y_c] >= EPS)[:, None]
    dld = kappa * (out.p_d - onehot_d) * live_d / B
    dlc = (1.0 - kappa) * (out.p_c - onehot_c) * live_c / B

    grads["head_d_W"] = I.T @ dld
    grads["head_d_b"] = dld.sum(axis=0)
    grads["head_c_W"] = I.T @ dlc
    grads["head_c_b"] = dlc.sum(axis=0)
    dI = dld @ params["head_d_W"].T + dlc @ params["head_c_W"].T
    dpre = dI * (pre > 0)
    grads["dec_W"] = h_T.T @ dpre
    grads["dec_b"] = dpre.sum(axis=0)
    dh = dpre @ params["dec_W"].T

    dZ, grads["lstm_Wx"], grads["lstm_Wh"], grads["lstm_b"] = _lstm_backward(params, steps, dh)
    dF = np.repeat(dZ[:, None] / E, E, axis=1)

    dS = dF * g
    dgate = dF * S * g * (1.0 - g)
    grads["Wg"] = np.einsum("betd,betk->dk", S, dgate)
    grads["bg"] = dgate.sum(axis=(0, 1, 2))
    dS = dS + dgate @ params["Wg"].T

    for weight, name in (("W1", "temp"), ("W2", "spat"), ("W3", "chan")):
        X_b = branches[name][0]
        grads[weight] = np.einsum("betd,betk->dk", X_b, dS)
        d_branch = dS @ params[weight].T
        axis = ATTENTION_AXES[name]
        grads[f"{name}_A"], grads[f"{name}_P"] = _attention_backward(
            X, params[f"{name}_A"], params[f"{name}_P"], axis, branches[name][1], d_branch
        )

    return value, {name: grads[name] for name in params}


# --- training --------------------------------------------------------------

class Adam:
    """Adam update rule over a parameter dict."""

    def __init__(self, params, learning_rate):
        self.learning_rate = learning_rate
        self.t = 0
        self.m = {name: np.zeros_like(p) for name, p in params.items()}
        self.v = {name: np.zeros_like(p) for name, p in params.items()}

    def step(self, params, grads):
        self.t += 1
        correction1 = 1.0 - ADAM_BETA1 ** self.t
        correction2 = 1.0 - ADAM_BETA2 ** self.t
        for name, grad in grads.items():
            self.m[name] = ADAM_BETA1 * self.m[name] + (1.0 - ADAM_BETA1) * grad
            self.v[name] = ADAM_BETA2 * self.v[name] + (1.0 - ADAM_BETA2) * grad ** 2
            m_hat = self.m[name] / correction1
            v_hat = self.v[name] / correction2
            params[name] -= self.learning_rate * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


def evaluate_loss(params, X, y_d, y_c, kappa, batch_size=256):
    """(L, L_d, L_c) over a whole dataset."""
    out = predict(params, X, batch_size)
    L_d, L_c = loss_components(out, y_d, y_c)
    return kappa * L_d + (1.0 - kappa) * L_c, L_d, L_c


def train(X, y_d, y_c, config, params=None):
    """
    Mini-batch Adam training.

    Args:
        X: recalibrated inputs [N, E, T, C]
        y_d: anomaly flags [N] (0 normal, 1 anomalous)
        y_c: class indices [N]
        config: ModelConfig
        params: optional starting parameters (copied)

    Returns:
        (params, list[EpochRecord]) with the loss on the full set after each epoch
    """
    X = np.asarray(X, dtype=float)
    y_d = np.asarray(y_d, dtype=int)
    y_c = np.asarray(y_c, dtype=int)
    if len(X) == 0:
        raise DomainError("cannot train on an empty dataset")
    if not (len(X) == len(y_d) == len(y_c)):
        raise DomainError(f"{len(X)} samples but {len(y_d)} detection and {len(y_c)} class labels")

    rng = np.random.default_rng(config.seed)
    params = init_params(config, rng) if params is None else copy_params(params)
    _check_input(params, X)
    optimizer = Adam(params, config.learning_rate)

    history = []
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(X))
        for batch, start in enumerate(range(0, len(X), config.batch_size)):
            idx = order[start:start + config.batch_size]
            value, grads = loss_and_grads(params, X[idx], y_d[idx], y_c[idx], config.kappa)
            if not np.isfinite(value):
                raise TrainingError(f"loss became {value} at epoch {epoch}, batch {batch}")
            optimizer.step(params, grads)

        record = EpochRecord(epoch, *evaluate_loss(params, X, y_d, y_c, config.kappa))
        if not np.isfinite(record.loss):
            raise TrainingError(f"loss became {record.loss} after epoch {epoch}")
        history.append(record)
        logger.info("epoch %d: L=%.6f L_d=%.6f L_c=%.6f", *record)

    return params, history


def predict(params, X, batch_size=256):
    """Batched inference; returns DetectionOutput with leading dimension N."""
    X, _ = _as_batch(X)
    _check_input(params, X)
    parts = [_forward(params, X[i:i + batch_size])[0] for i in range(0, len(X), batch_size)]
    return DetectionOutput(
        np.concatenate([p.p_d for p in parts]),
        np.concatenate([p.p_c for p in parts]),
    )


def grad_check(params, sample, epsilon=1e-5, kappa=0.5, loss_fn=None):
    """
    Compare analytic gradients with central finite differences.

    Args:
        params: dict of parameter arrays (perturbed in place, then restored)
        sample: (X, y_d, y_c); ignored when loss_fn is given
        loss_fn: optional callable params → (loss, grads)

    Returns:
        float: max over all parameters of |g_a - g_n| / max(|g_a|, |g_n|, 1e-8)
    """
    if loss_fn is None:
        X, y_d, y_c = sample

        def loss_fn(p):
            return loss_and_grads(p, X, y_d, y_c, kappa)

    _, analytic = loss_fn(params)
    worst = 0.0
    for name, value in params.items():
        flat = value.reshape(-1)
        grad = np.asarray(analytic[name]).reshape(-1)
        for j in range(flat.size):
            original = flat[j]
            flat[j] = original + epsilon
            plus = loss_fn(params)[0]
            flat[j] = original - epsilon
            minus = loss_fn(params)[0]
            flat[j] = original
            numeric = (plus - minus) / (2 * epsilon)
            error = abs(grad[j] - numeric) / max(abs(grad[j]), abs(numeric), 1e-8)
            worst = max(worst, error)
    return worst


# --- persistence -------------------------------------------------------------

def save_params(params, config, stem, extra=None):
    """
    Write `<stem>.bin` (little-endian float64, concatenated) and `<stem>.json`.

    The manifest lists name, shape and offset of every array plus the config.
    """
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    chunks = []
    for name, value in params.items():
        data = np.ascontiguousarray(value, dtype="<f8")
        entries.append({"name": name, "shape": list(value.shape), "offset": offset, "size": int(data.size)})
        offset += int(data.size)
        chunks.append(data.reshape(-1))

    with open(stem.with_suffix(".bin"), "wb") as f:
        f.write(np.concatenate(chunks).tobytes())

    manifest = {
        "version": FORMAT_VERSION,
        "dtype": "<f8",
        "config": asdict(config),
        "seed": config.seed,
        "params": entries,
        "extra": extra or {},
    }
    with open(stem.with_suffix(".json"), "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2)
        f.write("\n")


def load_params(stem):
    """Inverse of save_params; returns (params, ModelConfig, extra)."""
    stem = Path(stem)
    with open(stem.with_suffix(".json"), encoding="utf-8") as f:
        manifest = json.load(f)
    if manifest.get("version") != FORMAT_VERSION:
        raise DomainError(f"Unsupported model manifest version {manifest.get('version')!r}")

    flat = np.fromfile(stem.with_suffix(".bin"), dtype="<f8")
    params = {}
    for entry in manifest["params"]:
        start = entry["offset"]
        params[entry["name"]] = flat[start:start + entry["size"]].astype(float).reshape(entry["shape"])
    return params, ModelConfig(**manifest["config"]), manifest.get("extra", {})


def write_training_log(history, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    df = pd.DataFrame(history, columns=["epoch", "L", "L_d", "L_c"])
    df.to_csv(path, index=False)

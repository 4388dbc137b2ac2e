"""Deep Koopman model: learned observables with least-squares latent dynamics.

An encoder ``g`` maps (normalised) states to latent vectors. For every
training sequence the latent transition matrix ``A`` is not a parameter but
is re-derived by a ridge least-squares fit on the first ``fit_window``
latent pairs, optionally after removing the effect of a global, trainable
input matrix ``B``. The fitted dynamics are rolled out recursively from
``g(x_1)`` and decoded, and the network is trained so that both the
reconstruction ``X_hat`` and the rollout ``Y_hat`` match the data.

Internally latent matrices are kept in row form, shape ``(batch, time, m)``,
so the fit yields ``A^T``. The public column-form helpers (``X`` is
``m x T``) wrap the same code.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .envs import Dataset, SnapshotSequence
from .nets import AdamState, DenseNetSpec, NetParams, adam_step, forward, init_params, l2_penalty

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite; carries the last finite model and history."""

    def __init__(self, message, model=None, history=None):
        super().__init__(message)
        self.model = model
        self.history = history


@dataclass(frozen=True)
class TrainingConfig:
    T: int = 32
    fit_window: int = 16
    latent_dim: int = 32
    hidden: tuple[int, ...] = (64, 64)
    activation: str = "relu"
    lr: float = 1e-3
    lr_decay: float = 1.0
    l2_weight: float = 1e-7
    epochs: int = 100
    batch_size: int = 32
    tikhonov_eps: float = 1e-6
    seed: int = 0
    recursive: bool = True

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.T < 2:
            raise ValueError("T must be >= 2")
        if not 1 <= self.fit_window <= self.T:
            raise ValueError("fit_window must be in [1, T]")
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


@dataclass
class KoopmanModel:
    """Encoder/decoder networks, global input matrix ``B`` and normalisation.

    ``B`` has shape ``(m, p)``; ``p = 0`` for unforced models.
    """

    encoder_spec: DenseNetSpec
    encoder: NetParams
    decoder_spec: DenseNetSpec
    decoder: NetParams
    B: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    config: TrainingConfig = field(default_factory=TrainingConfig)

    @property
    def latent_dim(self) -> int:
        return self.encoder_spec.layer_sizes[-1]

    @property
    def n_state(self) -> int:
        return self.encoder_spec.layer_sizes[0]

    @property
    def n_input(self) -> int:
        return self.B.shape[1]

    def copy(self) -> "KoopmanModel":
        return replace(self, encoder=self.encoder.copy(), decoder=self.decoder.copy(),
                       B=self.B.copy(), mean=self.mean.copy(), std=self.std.copy())

    def encode(self, x) -> np.ndarray:
        """``g(x)`` on the last axis of raw (un-normalised) states."""
        x = (np.asarray(x, dtype=float) - self.mean) / self.std
        return forward(self.encoder, x, self.encoder_spec.activation)

    def decode(self, c) -> np.ndarray:
        return forward(self.decoder, c, self.decoder_spec.activation) * self.std + self.mean


def init_model(n_state: int, n_input: int, config: TrainingConfig, mean=None, std=None) -> KoopmanModel:
    """Fresh model with He-uniform networks and ``B = 0``."""
    rng = np.random.Generator(np.random.PCG64(config.seed))
    m = config.latent_dim
    enc_spec = DenseNetSpec((n_state, *config.hidden, m), config.seed, config.activation)
    dec_spec = DenseNetSpec((m, *reversed(config.hidden), n_state), config.seed, config.activation)
    return KoopmanModel(
        enc_spec, init_params(enc_spec, rng), dec_spec, init_params(dec_spec, rng),
        np.zeros((m, n_input)),
        np.zeros(n_state) if mean is None else np.asarray(mean, dtype=float),
        np.ones(n_state) if std is None else np.asarray(std, dtype=float),
        config,
    )


def normalization_stats(dataset: Dataset) -> tuple[np.ndarray, np.ndarray]:
    flat = dataset.states.reshape(-1, dataset.states.shape[-1])
    mean = flat.mean(axis=0)
    std = flat.std(axis=0)
    std[std == 0] = 1.0
    return mean, std


# -- column-form operations ---------------------------------------------------

def build_matrices(seq: SnapshotSequence):
    """``X = [x_1..x_T]``, ``Y = [x_2..x_{T+1}]`` and ``Gamma = [u_1..u_T]``."""
    if seq.T < 1:
        raise ValueError("sequence needs at least one transition")
    return seq.states[:-1].T.copy(), seq.states[1:].T.copy(), seq.inputs.T.copy()


def encode_matrices(model: KoopmanModel, X, Y):
    """Apply the encoder column by column."""
    X, Y = np.asarray(X, dtype=float), np.asarray(Y, dtype=float)
    if X.shape[0] != model.n_state or Y.shape[0] != model.n_state:
        raise ValueError(f"state dimension must be {model.n_state}")
    return model.encode(X.T).T, model.encode(Y.T).T


def _fit_At(Zx, Zy, eps: float, U=None, Bt=None):
    """Row-form ridge fit: returns ``A^T`` with ``Zy ~ Zx A^T + U B^T``.

    Works on arrays or tape variables with optional leading batch axes.
    """
    m = ad.value(Zx).shape[-1]
    target = Zy
    if U is not None and Bt is not None and ad.value(Bt).shape[0] > 0:
        target = ad.sub(Zy, ad.matmul(U, Bt))
    ZxT = ad.transpose(Zx)
    gram = ad.add(ad.matmul(ZxT, Zx), eps * np.eye(m))
    return ad.solve_spd(gram, ad.matmul(ZxT, target))


def _rollout_rows(At, c0, steps: int, U=None, Bt=None):
    """Latent rows ``c_{t+1} = c_t A^T + u_t B^T`` for ``steps`` steps after ``c0``.

    ``c0`` is ``(..., 1, m)``; returns ``(..., steps, m)``.
    """
    forced = U is not None and Bt is not None and ad.value(Bt).shape[0] > 0
    drive = ad.matmul(U, Bt) if forced else None
    c = c0
    out = []
    for t in range(steps):
        c = ad.matmul(c, At)
        if forced:
            c = ad.add(c, drive[..., t:t + 1, :])
        out.append(c)
    return ad.concat(out, axis=-2)


def fit_A_unforced(Xw, Yw, eps: float = 1e-6) -> np.ndarray:
    """``A ~ Yw Xw^+`` via the ridge normal equations."""
    Xw, Yw = np.asarray(Xw, dtype=float), np.asarray(Yw, dtype=float)
    if Xw.shape != Yw.shape:
        raise ValueError(f"shape mismatch {Xw.shape} vs {Yw.shape}")
    return _fit_At(Xw.T, Yw.T, eps).T


def fit_A_forced(Xw, Yw, Gw, B, eps: float = 1e-6) -> np.ndarray:
    """``A ~ (Yw - B Gw) Xw^+`` with ``B`` treated as known."""
    Xw, Yw = np.asarray(Xw, dtype=float), np.asarray(Yw, dtype=float)
    Gw, B = np.atleast_2d(np.asarray(Gw, dtype=float)), np.asarray(B, dtype=float)
    if B.ndim == 1:
        B = B[:, None]
    if B.shape[1] != Gw.shape[0] or B.shape[0] != Yw.shape[0] or Gw.shape[1] != Yw.shape[1]:
        raise ValueError(f"B {B.shape} and Gamma {Gw.shape} do not fit Y {Yw.shape}")
    return _fit_At(Xw.T, Yw.T, eps, Gw.T, B.T).T


def rollout_latent(A, B, g1, inputs, steps: int) -> np.ndarray:
    """Columns ``c_2 .. c_{steps+1}`` of ``c_{t+1} = A c_t + B u_t`` from ``c_1 = g1``."""
    A = np.asarray(A, dtype=float)
    B = np.zeros((A.shape[0], 0)) if B is None else np.asarray(B, dtype=float)
    if B.ndim == 1:
        B = B[:, None]
    g1 = np.asarray(g1, dtype=float).reshape(1, -1)
    U = None
    if B.shape[1] > 0:
        U = np.asarray(inputs, dtype=float).reshape(steps, B.shape[1])
    return _rollout_rows(A.T, g1, steps, U, B.T).T


# -- training -----------------------------------------------------------------

def _param_dict(model: KoopmanModel) -> dict:
    d = {}
    for k, (W, b) in enumerate(zip(model.encoder.weights, model.encoder.biases)):
        d[f"enc_W{k}"], d[f"enc_b{k}"] = W, b
    for k, (W, b) in enumerate(zip(model.decoder.weights, model.decoder.biases)):
        d[f"dec_W{k}"], d[f"dec_b{k}"] = W, b
    d["B"] = model.B
    return d


def _with_params(model: KoopmanModel, d: dict) -> KoopmanModel:
    ne, nd = model.encoder_spec.n_layers, model.decoder_spec.n_layers
    enc = NetParams([d[f"enc_W{k}"] for k in range(ne)], [d[f"enc_b{k}"] for k in range(ne)])
    dec = NetParams([d[f"dec_W{k}"] for k in range(nd)], [d[f"dec_b{k}"] for k in range(nd)])
    return replace(model, encoder=enc, decoder=dec, B=d["B"])


def loss_graph(params: dict, n_enc: int, n_dec: int, states, inputs, config: TrainingConfig):
    """Training loss on normalised ``states`` ``(b, T+1, n)`` and ``inputs`` ``(b, T, p)``.

    ``params`` maps the names of :func:`_param_dict` to arrays or tape
    variables. Returns ``(loss, parts)`` where ``parts`` holds the decoded
    ``X_hat``/``Y_hat`` and the fitted ``A^T``. The squared errors are summed
    over time and state dimensions and averaged over the batch.
    """
    enc = ([params[f"enc_W{k}"] for k in range(n_enc)], [params[f"enc_b{k}"] for k in range(n_enc)])
    dec = ([params[f"dec_W{k}"] for k in range(n_dec)], [params[f"dec_b{k}"] for k in range(n_dec)])
    Bt = ad.transpose(params["B"])
    states = np.asarray(states, dtype=float)
    inputs = np.asarray(inputs, dtype=float)
    batch, T = states.shape[0], states.shape[1] - 1
    w = config.fit_window if config.recursive else T

    Z = forward(enc, states, config.activation)
    Zx = Z[:, :T]
    At = _fit_At(Z[:, :w], Z[:, 1:w + 1], config.tikhonov_eps, inputs[:, :w], Bt)
    if config.recursive:
        Ypred = _rollout_rows(At, Z[:, 0:1], T, inputs, Bt)
    else:
        Ypred = ad.matmul(Zx, At)
        if ad.value(Bt).shape[0] > 0:
            Ypred = ad.add(Ypred, ad.matmul(inputs, Bt))
    Xhat = forward(dec, Zx, config.activation)
    Yhat = forward(dec, Ypred, config.activation)
    err = ad.add(ad.sumsq(ad.sub(Xhat, states[:, :T])), ad.sumsq(ad.sub(Yhat, states[:, 1:])))
    weights = enc[0] + dec[0]
    loss = ad.add(ad.mul(err, 1.0 / batch), l2_penalty(weights, config.l2_weight))
    return loss, {"Xhat": Xhat, "Yhat": Yhat, "At": At}


def training_loss(model: KoopmanModel, seq, config: TrainingConfig | None = None) -> float:
    """Loss value for one sequence (or a :class:`Dataset` batch) in raw units."""
    config = config or model.config
    if isinstance(seq, SnapshotSequence):
        states, inputs = seq.states[None], seq.inputs[None]
    else:
        states, inputs = seq.states, seq.inputs
    loss, _ = loss_graph(_param_dict(model), model.encoder_spec.n_layers, model.decoder_spec.n_layers,
                         (states - model.mean) / model.std, inputs, config)
    return float(loss)


def loss_and_grads(model: KoopmanModel, states, inputs, config: TrainingConfig):
    """Loss and gradients w.r.t. every parameter, for normalised data."""
    tape = ad.Tape()
    pvals = _param_dict(model)
    pvars = {k: tape.var(v, name=k) for k, v in pvals.items()}
    loss, _ = loss_graph(pvars, model.encoder_spec.n_layers, model.decoder_spec.n_layers,
                         states, inputs, config)
    tape.backward(loss)
    return float(loss.value), {k: v.grad for k, v in pvars.items()}


def train(model: KoopmanModel, dataset: Dataset, config: TrainingConfig | None = None,
          callback=None):
    """Minimise the loss with Adam; returns ``(model, loss_history)``.

    One history entry per epoch: the mean minibatch loss. Minibatch order
    comes from a PCG64 generator seeded with ``config.seed``. ``B`` is only
    updated when the model has inputs.

    Raises
    ------
    TrainingDivergedError
        On a non-finite loss; the exception carries the last finite model.
    """
    config = config or model.config
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if dataset.T != config.T:
        raise ValueError(f"dataset sequences have T={dataset.T}, config expects {config.T}")
    rng = np.random.Generator(np.random.PCG64(config.seed + 1))
    states = (dataset.states - model.mean) / model.std
    inputs = dataset.inputs
    opt = AdamState(lr=config.lr)
    params = _param_dict(model)
    trainable = [k for k in params if k != "B" or model.n_input > 0]
    history = []
    last_good = model.copy()
    for epoch in range(config.epochs):
        order = rng.permutation(len(dataset))
        losses = []
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            current = _with_params(model, params)
            loss, grads = loss_and_grads(current, states[idx], inputs[idx], config)
            if not np.isfinite(loss):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}", last_good, history)
            losses.append(loss)
            updated = adam_step(opt, {k: params[k] for k in trainable}, {k: grads[k] for k in trainable})
            params.update(updated)
        history.append(float(np.mean(losses)))
        last_good = _with_params(model, {k: v.copy() for k, v in params.items()})
        opt.lr *= config.lr_decay
        if callback is not None:
            callback(epoch, history[-1], last_good)
    model = _with_params(model, params)
    return replace(model, config=config), history


def fit_model(dataset: Dataset, config: TrainingConfig, callback=None):
    """Normalise, initialise and train a model on ``dataset``."""
    mean, std = normalization_stats(dataset)
    model = init_model(dataset.states.shape[-1], dataset.inputs.shape[-1], config, mean, std)
    return train(model, dataset, config, callback)


# -- prediction and metrics ---------------------------------------------------

def fit_latent_dynamics(model: KoopmanModel, states, inputs) -> np.ndarray:
    """Fitted ``A`` (column form) from consecutive raw states/inputs ``(w+1, n)``/``(w, p)``."""
    Z = model.encode(states)
    U = np.asarray(inputs, dtype=float).reshape(Z.shape[0] - 1, model.n_input)
    return _fit_At(Z[:-1], Z[1:], model.config.tikhonov_eps, U, model.B.T).T


def predict_batch(model: KoopmanModel, warm_states, warm_inputs, future_inputs, horizon: int) -> np.ndarray:
    """Batched :func:`predict`: ``(S, w+1, n)`` warmups to ``(S, horizon, n)`` forecasts."""
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    warm_states = np.asarray(warm_states, dtype=float)
    S = warm_states.shape[0]
    p = model.n_input
    warm_inputs = np.asarray(warm_inputs, dtype=float).reshape(S, warm_states.shape[1] - 1, p)
    if p:
        future_inputs = np.asarray(future_inputs, dtype=float).reshape(S, -1, p)[:, :horizon]
        if future_inputs.shape[1] < horizon:
            raise ValueError("need one future input per predicted step")
    Z = model.encode(warm_states)
    Bt = model.B.T
    At = _fit_At(Z[:, :-1], Z[:, 1:], model.config.tikhonov_eps, warm_inputs, Bt)
    C = _rollout_rows(At, Z[:, -1:], horizon, future_inputs if p else None, Bt)
    return model.decode(C)


def predict(model: KoopmanModel, warmup: SnapshotSequence, future_inputs=None, horizon: int = 1) -> np.ndarray:
    """Forecast ``horizon`` states after the last warmup state.

    ``A`` is fitted on the warmup's latent pairs (removing ``B u`` when the
    model is forced) and the rollout starts from the last warmup mapping.
    """
    p = model.n_input
    if future_inputs is None:
        future_inputs = np.zeros((horizon, p))
    future_inputs = np.asarray(future_inputs, dtype=float).reshape(-1, p) if p else np.zeros((horizon, 0))
    return predict_batch(model, warmup.states[None], warmup.inputs[None, :, :p],
                         future_inputs[None], horizon)[0]


def relative_l1_error(pred, truth) -> np.ndarray:
    """Per-step ``||pred_t - truth_t||_1 / ||truth_t||_1`` (time on axis -2)."""
    pred, truth = np.asarray(pred, dtype=float), np.asarray(truth, dtype=float)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {truth.shape}")
    denom = np.abs(truth).sum(axis=-1)
    if np.any(denom == 0):
        raise ZeroDivisionError("ground-truth state with zero L1 norm")
    return np.abs(pred - truth).sum(axis=-1) / denom


def aggregate_errors(errors) -> tuple[np.ndarray, np.ndarray]:
    """Mean and (population) standard deviation across sequences, per step."""
    errors = np.asarray(errors, dtype=float)
    return errors.mean(axis=0), errors.std(axis=0)


def evaluate(model: KoopmanModel, dataset: Dataset, warmup: int, horizon: int) -> np.ndarray:
    """Relative L1 errors ``(S, horizon)`` forecasting from the first ``warmup+1`` states."""
    if dataset.states.shape[1] < warmup + 1 + horizon:
        raise ValueError("test sequences too short for the requested horizon")
    warm = dataset.states[:, :warmup + 1]
    pred = predict_batch(model, warm, dataset.inputs[:, :warmup], dataset.inputs[:, warmup:], horizon)
    return relative_l1_error(pred, dataset.states[:, warmup + 1:warmup + 1 + horizon])

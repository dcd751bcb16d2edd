"""Identification data, Levenberg-Marquardt weight fitting and model validation."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field

import numpy as np

from . import plant
from .narx import NarxModel, RegressorSpec, fit_scaling, init_model, regression_matrix

logger = logging.getLogger(__name__)

MIN_RECORD = 50


class TrainingError(RuntimeError):
    """Raised when LM training cannot continue."""

    def __init__(self, message: str, iteration: int):
        super().__init__(f"iteration {iteration}: {message}")
        self.iteration = iteration


class DataError(ValueError):
    """Raised for invalid identification records or excitation settings."""


# ----------------------------------------------------------------------
# Excitation and data
# ----------------------------------------------------------------------


def generate_excitation(
    n: int,
    seed: int,
    bounds: tuple[float, float] = (0.0, 4.0),
    kind: str = "aprbs",
    hold: tuple[int, int] = (5, 20),
) -> np.ndarray:
    """Piecewise-constant pseudo-random input sequence.

    Hold times are drawn uniformly from ``hold`` (inclusive, in samples).
    ``"aprbs"`` draws each level uniformly from ``bounds``; ``"prbs"``
    alternates between the two bounds.
    """
    lo, hi = (float(b) for b in bounds)
    if not (np.isfinite(lo) and np.isfinite(hi)) or not lo < hi:
        raise DataError(f"invalid excitation bounds {bounds}")
    if lo < 0:
        raise DataError("excitation bounds must be admissible flows (>= 0)")
    if n < MIN_RECORD:
        raise DataError(f"excitation length must be >= {MIN_RECORD}, got {n}")
    h_lo, h_hi = int(hold[0]), int(hold[1])
    if not 1 <= h_lo <= h_hi:
        raise DataError(f"invalid hold range {hold}")
    if kind not in ("aprbs", "prbs"):
        raise DataError(f"unknown excitation kind {kind!r}")

    rng = np.random.default_rng(seed)
    u = np.empty(n)
    pos = 0
    level_hi = bool(rng.integers(2))
    while pos < n:
        length = int(rng.integers(h_lo, h_hi + 1))
        if kind == "aprbs":
            level = rng.uniform(lo, hi)
        else:
            level = hi if level_hi else lo
            level_hi = not level_hi
        u[pos : pos + length] = level
        pos += length
    return u


@dataclass(eq=False)
class Dataset:
    """Sampled input/output record.

    ``u[k]`` is held over ``[k*ts, (k+1)*ts)`` and ``y[k]`` is the
    concentration at the end of that interval.  Samples before ``split``
    form the training part.
    """

    ts: float
    u: np.ndarray
    y: np.ndarray
    split: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        if self.u.ndim != 1 or self.u.shape != self.y.shape:
            raise DataError("u and y must be 1-D arrays of equal length")
        if self.u.size < MIN_RECORD:
            raise DataError(f"record needs >= {MIN_RECORD} samples, got {self.u.size}")
        if not self.ts > 0:
            raise DataError("ts must be positive")
        if not (np.all(np.isfinite(self.u)) and np.all(np.isfinite(self.y))):
            raise DataError("record contains non-finite samples")
        if np.any(self.y <= 0):
            raise DataError("output samples must be positive")
        if not 0 < self.split < self.u.size:
            raise DataError(f"split {self.split} outside (0, {self.u.size})")

    def __len__(self) -> int:
        return self.u.size

    @property
    def t(self) -> np.ndarray:
        """Measurement time of each ``y`` sample."""
        return (np.arange(self.u.size) + 1) * self.ts

    def to_csv(self, config_hash: str | None = None) -> str:
        buf = io.StringIO()
        if config_hash:
            buf.write(f"# config_hash={config_hash}\n")
        buf.write(f"# ts={self.ts!r} split={self.split}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["k", "t", "u", "y"])
        for k, (t, u, y) in enumerate(zip(self.t, self.u, self.y)):
            writer.writerow([k, repr(float(t)), repr(float(u)), repr(float(y))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> Dataset:
        ts = split = None
        rows = []
        for line in text.splitlines():
            if line.startswith("#"):
                for item in line[1:].split():
                    key, _, value = item.partition("=")
                    if key == "ts":
                        ts = float(value)
                    elif key == "split":
                        split = int(value)
                continue
            if line.strip():
                rows.append(line)
        reader = csv.DictReader(rows)
        if reader.fieldnames != ["k", "t", "u", "y"]:
            raise DataError(f"dataset header must be k,t,u,y, got {reader.fieldnames}")
        records = list(reader)
        u = np.array([float(r["u"]) for r in records])
        y = np.array([float(r["y"]) for r in records])
        if ts is None:
            t = np.array([float(r["t"]) for r in records])
            ts = float(t[0]) if t.size else 0.0
        if split is None:
            split = int(round(0.7 * u.size))
        return cls(ts=ts, u=u, y=y, split=split)


def sample_plant(
    u,
    ts: float,
    params: plant.PlantParams = plant.DEFAULT_PARAMS,
    x0: plant.PlantState | None = None,
    substep: float = 0.01,
    train_fraction: float = 0.7,
    noise_std: float = 0.0,
    noise_seed: int = 0,
) -> Dataset:
    """Drive the reactor with ``u`` under zero-order hold and record ``cb``.

    Args:
        u: Input sequence, one value per sampling period.
        ts: Sampling period; must be a multiple of ``substep``.
        params: Reactor constants.
        x0: Initial state; defaults to the equilibrium for ``u[0]``.
        substep: RK4 step inside each sampling period.
        train_fraction: Leading fraction of samples used for training.
        noise_std: Standard deviation of additive Gaussian measurement noise.
        noise_seed: Seed for the measurement noise.
    """
    u = np.asarray(u, dtype=float)
    if not ts > 0:
        raise DataError("ts must be positive")
    plant.n_substeps(ts, substep)
    state = x0 if x0 is not None else plant.steady_state(float(u[0]), params)
    y = np.empty(u.size)
    for k, uk in enumerate(u):
        try:
            state = plant.advance(state, float(uk), ts, substep, params)
        except plant.PlantError as exc:
            raise plant.PlantError(f"sample {k}: {exc}") from exc
        y[k] = state.cb
    if noise_std > 0:
        y = y + np.random.default_rng(noise_seed).normal(0.0, noise_std, y.size)
    split = int(round(train_fraction * u.size))
    return Dataset(ts=ts, u=u, y=y, split=split)


# ----------------------------------------------------------------------
# Levenberg-Marquardt training
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    max_iterations: int = 500
    lambda0: float = 1e-3
    lambda_up: float = 10.0
    lambda_down: float = 10.0
    lambda_max: float = 1e10
    tol_gradient: float = 1e-9
    tol_loss: float = 1e-12
    seed: int = 0
    init_range: float = 0.5

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not self.lambda0 > 0:
            raise ValueError("lambda0 must be positive")
        if not (self.lambda_up > 1 and self.lambda_down > 1):
            raise ValueError("lambda adjustment factors must exceed 1")
        if not (self.tol_gradient > 0 and self.tol_loss > 0):
            raise ValueError("tolerances must be positive")


@dataclass
class LossCurve:
    iterations: list[int] = field(default_factory=list)
    loss: list[float] = field(default_factory=list)
    lam: list[float] = field(default_factory=list)
    stop_reason: str = ""

    def append(self, it: int, loss: float, lam: float) -> None:
        self.iterations.append(it)
        self.loss.append(loss)
        self.lam.append(lam)

    def __len__(self) -> int:
        return len(self.loss)

    def to_csv(self, config_hash: str | None = None) -> str:
        buf = io.StringIO()
        if config_hash:
            buf.write(f"# config_hash={config_hash}\n")
        buf.write("iter,loss,lambda\n")
        for it, loss, lam in zip(self.iterations, self.loss, self.lam):
            buf.write(f"{it},{loss!r},{lam!r}\n")
        return buf.getvalue()


def lm_direction(jac: np.ndarray, resid: np.ndarray, lam: float) -> np.ndarray:
    """Solve ``(J'J + lam I) d = J' e`` for the weight update ``d``."""
    a = jac.T @ jac
    a[np.diag_indices_from(a)] += lam
    return np.linalg.solve(a, jac.T @ resid)


def training_regressors(model_spec: RegressorSpec, data: Dataset, part: str = "train"):
    """Regressors and targets for the training or validation part of ``data``."""
    X, target, index = regression_matrix(data.y, data.u, model_spec)
    if part == "train":
        mask = index < data.split
    elif part == "test":
        mask = index >= data.split
    elif part == "all":
        mask = np.ones(index.size, dtype=bool)
    else:
        raise ValueError(f"unknown part {part!r}")
    return X[mask], target[mask], index[mask]


def initial_model(spec: RegressorSpec, hidden_width: int, data: Dataset, cfg: TrainConfig) -> NarxModel:
    """Seeded random network with scaling fitted to the training part of ``data``."""
    X, target, _ = training_regressors(spec, data, "train")
    in_scale, out_scale = fit_scaling(X, target)
    rng = np.random.default_rng(cfg.seed)
    return init_model(spec, hidden_width, rng, in_scale, out_scale, cfg.init_range)


def train_lm(model: NarxModel, data: Dataset, cfg: TrainConfig = TrainConfig()) -> tuple[NarxModel, LossCurve]:
    """Batch Levenberg-Marquardt on the summed squared one-step errors.

    Each iteration solves ``(Phi'Phi + lam I) delta = Phi'e``.  A trial that
    lowers the loss is accepted and ``lam`` is divided by ``lambda_down``;
    otherwise ``lam`` is multiplied by ``lambda_up`` and the step retried.
    Training stops on ``max_iterations`` accepted steps, a small gradient, a
    negligible relative loss decrease, or ``lam`` exceeding ``lambda_max``.

    Returns:
        The trained model and the loss after each accepted step (entry 0 is
        the starting loss).
    """
    X, target, _ = training_regressors(model.spec, data, "train")
    if target.size <= model.n_params:
        raise DataError(f"{target.size} training targets cannot fit {model.n_params} parameters")
    theta = model.get_params()
    lam = cfg.lambda0
    curve = LossCurve()

    def loss_of(m: NarxModel):
        e = target - m.predict_batch(X)
        return e, float(e @ e)

    resid, loss = loss_of(model)
    if not np.isfinite(loss):
        raise TrainingError("non-finite loss", 0)
    curve.append(0, loss, lam)
    it = 0
    while True:
        if loss == 0.0:
            curve.stop_reason = "zero loss"
            break
        if it >= cfg.max_iterations:
            curve.stop_reason = "max iterations"
            break
        jac = model.weight_jacobian(X)
        g = jac.T @ resid
        if np.max(np.abs(g)) <= cfg.tol_gradient:
            curve.stop_reason = "gradient tolerance"
            break
        accepted = False
        while lam <= cfg.lambda_max:
            try:
                delta = lm_direction(jac, resid, lam)
            except np.linalg.LinAlgError as exc:
                raise TrainingError(f"singular normal matrix at lambda={lam:g}", it + 1) from exc
            trial = model.with_params(theta + delta)
            t_resid, t_loss = loss_of(trial)
            if not np.isfinite(t_loss):
                raise TrainingError("non-finite loss", it + 1)
            if t_loss < loss:
                accepted = True
                break
            lam *= cfg.lambda_up
        if not accepted:
            curve.stop_reason = "lambda overflow"
            break
        it += 1
        lam = max(lam / cfg.lambda_down, 1e-300)
        decrease = (loss - t_loss) / loss
        model, theta, resid, loss = trial, theta + delta, t_resid, t_loss
        curve.append(it, loss, lam)
        if decrease < cfg.tol_loss:
            curve.stop_reason = "loss tolerance"
            break
    logger.info("LM training stopped after %d steps (%s), loss %.6g", it, curve.stop_reason, loss)
    return model, curve


# ----------------------------------------------------------------------
# Validation
# ----------------------------------------------------------------------

AUTOCORR_LAGS = 20
CROSSCORR_LAGS = 10


@dataclass
class ValidationReport:
    rmse_train: float
    rmse_test: float
    residual_autocorr: np.ndarray  # lags 1..20
    cross_corr_u_residual: np.ndarray  # lags -10..10
    confidence_band: float
    degenerate: bool = False
    n_residuals: int = 0
    output_range: float = 0.0

    @property
    def autocorr_lags(self) -> np.ndarray:
        return np.arange(1, self.residual_autocorr.size + 1)

    @property
    def crosscorr_lags(self) -> np.ndarray:
        half = (self.cross_corr_u_residual.size - 1) // 2
        return np.arange(-half, half + 1)

    @property
    def autocorr_inside_fraction(self) -> float:
        return float(np.mean(np.abs(self.residual_autocorr) <= self.confidence_band))

    @property
    def crosscorr_inside_fraction(self) -> float:
        return float(np.mean(np.abs(self.cross_corr_u_residual) <= self.confidence_band))

    @property
    def all_inside(self) -> bool:
        return self.autocorr_inside_fraction == 1.0 and self.crosscorr_inside_fraction == 1.0

    def to_csv(self, config_hash: str | None = None) -> str:
        buf = io.StringIO()
        if config_hash:
            buf.write(f"# config_hash={config_hash}\n")
        buf.write("kind,lag,value\n")
        scalars = [
            ("rmse_train", self.rmse_train),
            ("rmse_test", self.rmse_test),
            ("output_range", self.output_range),
            ("confidence_band", self.confidence_band),
            ("n_residuals", float(self.n_residuals)),
            ("degenerate", float(self.degenerate)),
        ]
        for name, value in scalars:
            buf.write(f"{name},,{float(value)!r}\n")
        for lag, value in zip(self.autocorr_lags, self.residual_autocorr):
            buf.write(f"residual_autocorr,{lag},{float(value)!r}\n")
        for lag, value in zip(self.crosscorr_lags, self.cross_corr_u_residual):
            buf.write(f"cross_corr_u_residual,{lag},{float(value)!r}\n")
        return buf.getvalue()


def autocorrelation(e, max_lag: int) -> np.ndarray | None:
    """Normalized autocorrelation at lags ``1..max_lag``; ``None`` if ``e`` is constant."""
    e = np.asarray(e, dtype=float) - np.mean(e)
    denom = float(e @ e)
    if denom == 0.0:
        return None
    return np.array([float(e[:-lag] @ e[lag:]) / denom for lag in range(1, max_lag + 1)])


def cross_correlation(u, e, max_lag: int) -> np.ndarray | None:
    """Normalized ``corr(u(t), e(t+lag))`` for ``lag`` in ``-max_lag..max_lag``."""
    u = np.asarray(u, dtype=float) - np.mean(u)
    e = np.asarray(e, dtype=float) - np.mean(e)
    denom = np.sqrt(float(u @ u) * float(e @ e))
    if denom == 0.0:
        return None
    out = []
    for lag in range(-max_lag, max_lag + 1):
        if lag >= 0:
            out.append(float(u[: u.size - lag] @ e[lag:]))
        else:
            out.append(float(u[-lag:] @ e[: e.size + lag]))
    return np.array(out) / denom


def _degenerate(e: np.ndarray, scale: float) -> bool:
    return float(np.std(e)) <= 1e-12 * max(1.0, scale)


def residual_correlations(u, e, scale: float = 1.0):
    """Autocorrelation and input cross-correlation of residuals ``e``.

    Returns ``(autocorr, crosscorr, degenerate)``; degenerate residuals give
    all-zero sequences.
    """
    e = np.asarray(e, dtype=float)
    auto = None if _degenerate(e, scale) else autocorrelation(e, AUTOCORR_LAGS)
    cross = None if auto is None else cross_correlation(u, e, CROSSCORR_LAGS)
    if auto is None or cross is None:
        return np.zeros(AUTOCORR_LAGS), np.zeros(2 * CROSSCORR_LAGS + 1), True
    return auto, cross, False


def validate(model: NarxModel, data: Dataset) -> ValidationReport:
    """One-step-ahead errors on both parts plus correlation tests on the held-out part."""
    X_tr, y_tr, _ = training_regressors(model.spec, data, "train")
    X_te, y_te, idx_te = training_regressors(model.spec, data, "test")
    if y_te.size < 2 * AUTOCORR_LAGS + 2:
        raise DataError("validation part too short for correlation tests")
    e_tr = y_tr - model.predict_batch(X_tr)
    e_te = y_te - model.predict_batch(X_te)
    scale = float(np.max(np.abs(data.y)))
    auto, cross, degenerate = residual_correlations(data.u[idx_te], e_te, scale)
    return ValidationReport(
        rmse_train=float(np.sqrt(np.mean(e_tr**2))),
        rmse_test=float(np.sqrt(np.mean(e_te**2))),
        residual_autocorr=auto,
        cross_corr_u_residual=cross,
        confidence_band=1.96 / np.sqrt(e_te.size),
        degenerate=degenerate,
        n_residuals=int(e_te.size),
        output_range=float(np.ptp(data.y)),
    )


def one_step_predictions_csv(model: NarxModel, data: Dataset, config_hash: str | None = None) -> str:
    """Per-sample one-step predictions over the whole record."""
    X, target, index = training_regressors(model.spec, data, "all")
    pred = model.predict_batch(X)
    buf = io.StringIO()
    if config_hash:
        buf.write(f"# config_hash={config_hash}\n")
    buf.write("k,part,y,y_hat,residual\n")
    for k, y, p in zip(index, target, pred):
        part = "train" if k < data.split else "test"
        buf.write(f"{k},{part},{float(y)!r},{float(p)!r},{float(y - p)!r}\n")
    return buf.getvalue()

"""NARX one-step-ahead predictors and their recursive multi-step rollout.

A regression vector stacks the ``ny`` most recent outputs, newest first,
followed by ``nu`` inputs starting ``delay - 1`` samples back from the
current one::

    [y(k), ..., y(k-ny+1), u(k-delay+1), ..., u(k-delay-nu+2)]

The predictor maps it to ``y(k+1)``.  Rolling the map forward with its own
predictions in the output slots gives the horizon predictions used by the
controller, and the chain rule through that recursion gives their
sensitivities to future inputs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any

import numpy as np

FORMAT_VERSION = 1


class ModelError(ValueError):
    """Raised on inconsistent model dimensions or insufficient history."""


@dataclass(frozen=True)
class RegressorSpec:
    ny: int = 2
    nu: int = 2
    delay: int = 1

    def __post_init__(self):
        for name in ("ny", "nu", "delay"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ModelError(f"{name} must be an integer >= 1, got {value!r}")

    @property
    def width(self) -> int:
        return self.ny + self.nu

    @property
    def u_history(self) -> int:
        """Inputs needed for one regressor, counting the current input."""
        return self.nu + self.delay - 1


def regressor(past_y, past_u, spec: RegressorSpec) -> np.ndarray:
    """Build the regression vector at the newest sample of the histories.

    Args:
        past_y: Outputs up to and including ``y(k)``.
        past_u: Inputs up to and including ``u(k)``.
        spec: Lag structure.

    Returns:
        Vector of length ``spec.width``.
    """
    past_y = np.asarray(past_y, dtype=float)
    past_u = np.asarray(past_u, dtype=float)
    if past_y.size < spec.ny:
        raise ModelError(f"need {spec.ny} outputs in history, got {past_y.size}")
    if past_u.size < spec.u_history:
        raise ModelError(f"need {spec.u_history} inputs in history, got {past_u.size}")
    ys = past_y[::-1][: spec.ny]
    us = past_u[::-1][spec.delay - 1 : spec.delay - 1 + spec.nu]
    return np.concatenate([ys, us])


def regression_matrix(y, u, spec: RegressorSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack one-step regressors over a record.

    The record convention is that ``y[k]`` is the output measured after
    ``u[k]`` has acted for one sample, so the target of row ``k`` is ``y[k]``
    and its regressor holds ``y[k-1], y[k-2], ...`` and ``u[k-delay+1], ...``.
    Rows lacking history are dropped.

    Returns:
        ``(X, targets, index)`` where ``index`` holds the record index of each
        target.
    """
    y = np.asarray(y, dtype=float)
    u = np.asarray(u, dtype=float)
    if y.shape != u.shape or y.ndim != 1:
        raise ModelError("y and u must be 1-D and of equal length")
    first = max(spec.ny, spec.delay + spec.nu - 2)
    index = np.arange(first, y.size)
    if index.size == 0:
        raise ModelError(f"record of length {y.size} too short for regressors")
    cols = [y[index - 1 - lag] for lag in range(spec.ny)]
    cols += [u[index - spec.delay + 1 - lag] for lag in range(spec.nu)]
    return np.column_stack(cols), y[index], index


def _sigmoid(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


@dataclass(frozen=True, eq=False)
class NarxModel:
    """Single-hidden-layer sigmoid network with a linear output unit.

    Inputs and output are passed through affine maps ``(x - offset) * gain``
    before and after the network; ``input_scale`` holds one
    ``(offset, gain)`` row per regressor entry.
    """

    spec: RegressorSpec
    weights_input_hidden: np.ndarray
    bias_hidden: np.ndarray
    weights_hidden_output: np.ndarray
    bias_output: float
    input_scale: np.ndarray
    output_scale: tuple[float, float] = (0.0, 1.0)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        w = np.array(self.weights_input_hidden, dtype=float)
        b = np.array(self.bias_hidden, dtype=float).reshape(-1)
        v = np.array(self.weights_hidden_output, dtype=float).reshape(-1)
        s = np.array(self.input_scale, dtype=float)
        out = tuple(float(x) for x in self.output_scale)
        if w.ndim != 2 or w.shape[1] != self.spec.width:
            raise ModelError(f"input-hidden weights must be (hidden, {self.spec.width}), got {w.shape}")
        hidden = w.shape[0]
        if b.shape != (hidden,) or v.shape != (hidden,):
            raise ModelError("hidden bias and output weights must match hidden width")
        if s.shape != (self.spec.width, 2):
            raise ModelError(f"input_scale must be ({self.spec.width}, 2), got {s.shape}")
        if len(out) != 2:
            raise ModelError("output_scale must be an (offset, gain) pair")
        arrays = (w, b, v, s, np.array(out), np.array([self.bias_output]))
        if not all(np.all(np.isfinite(a)) for a in arrays):
            raise ModelError("model parameters must be finite")
        if np.any(s[:, 1] == 0) or out[1] == 0:
            raise ModelError("scaling gains must be nonzero")
        for a in (w, b, v, s):
            a.setflags(write=False)
        object.__setattr__(self, "weights_input_hidden", w)
        object.__setattr__(self, "bias_hidden", b)
        object.__setattr__(self, "weights_hidden_output", v)
        object.__setattr__(self, "input_scale", s)
        object.__setattr__(self, "output_scale", out)
        object.__setattr__(self, "bias_output", float(self.bias_output))

    @property
    def hidden_width(self) -> int:
        return self.weights_input_hidden.shape[0]

    @property
    def n_params(self) -> int:
        return self.hidden_width * (self.spec.width + 2) + 1

    # -- parameter vector -------------------------------------------------

    def get_params(self) -> np.ndarray:
        """Flatten weights as ``[W_in (row-major), b_hidden, w_out, b_out]``."""
        return np.concatenate(
            [
                self.weights_input_hidden.ravel(),
                self.bias_hidden,
                self.weights_hidden_output,
                [self.bias_output],
            ]
        )

    def with_params(self, theta) -> NarxModel:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_params,):
            raise ModelError(f"expected {self.n_params} parameters, got {theta.shape}")
        hw, n = self.hidden_width, self.spec.width
        i = hw * n
        return NarxModel(
            spec=self.spec,
            weights_input_hidden=theta[:i].reshape(hw, n),
            bias_hidden=theta[i : i + hw],
            weights_hidden_output=theta[i + hw : i + 2 * hw],
            bias_output=float(theta[-1]),
            input_scale=self.input_scale,
            output_scale=self.output_scale,
            metadata=dict(self.metadata),
        )

    def with_metadata(self, **extra) -> NarxModel:
        return NarxModel(
            spec=self.spec,
            weights_input_hidden=self.weights_input_hidden,
            bias_hidden=self.bias_hidden,
            weights_hidden_output=self.weights_hidden_output,
            bias_output=self.bias_output,
            input_scale=self.input_scale,
            output_scale=self.output_scale,
            metadata={**self.metadata, **extra},
        )

    # -- evaluation -------------------------------------------------------

    def _check_reg(self, X: np.ndarray) -> None:
        if X.shape[-1] != self.spec.width:
            raise ModelError(f"regressor width {X.shape[-1]} != model input width {self.spec.width}")

    def _hidden(self, X: np.ndarray):
        xs = (X - self.input_scale[:, 0]) * self.input_scale[:, 1]
        return xs, _sigmoid(xs @ self.weights_input_hidden.T + self.bias_hidden)

    def predict_batch(self, X) -> np.ndarray:
        """One-step predictions for a stack of regressors ``(N, width)``."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        self._check_reg(X)
        _, s = self._hidden(X)
        ys = s @ self.weights_hidden_output + self.bias_output
        return ys / self.output_scale[1] + self.output_scale[0]

    def weight_jacobian(self, X) -> np.ndarray:
        """Rows of d(prediction)/d(params) for each regressor in ``X``."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        self._check_reg(X)
        xs, s = self._hidden(X)
        ds = s * (1.0 - s) * self.weights_hidden_output  # (N, hidden)
        n = X.shape[0]
        d_w = (ds[:, :, None] * xs[:, None, :]).reshape(n, -1)
        jac = np.hstack([d_w, ds, s, np.ones((n, 1))])
        return jac / self.output_scale[1]

    def value_and_input_grad(self, reg: np.ndarray) -> tuple[float, np.ndarray]:
        xs, s = self._hidden(reg)
        out_gain = self.output_scale[1]
        y = (s @ self.weights_hidden_output + self.bias_output) / out_gain + self.output_scale[0]
        ds = s * (1.0 - s) * self.weights_hidden_output
        grad = (ds @ self.weights_input_hidden) * self.input_scale[:, 1] / out_gain
        return float(y), grad

    def predict_horizon(self, past_y, past_u, future_u, n2: int) -> np.ndarray:
        return predict_horizon(self, past_y, past_u, future_u, n2)

    def jacobian_output_wrt_u(self, past_y, past_u, future_u, n2: int) -> np.ndarray:
        return jacobian_output_wrt_u(self, past_y, past_u, future_u, n2)

    # -- serialization ----------------------------------------------------

    def to_dict(self) -> dict[str, Any]:
        return {
            "format_version": FORMAT_VERSION,
            "kind": "narx_mlp",
            "spec": {"ny": int(self.spec.ny), "nu": int(self.spec.nu), "delay": int(self.spec.delay)},
            "hidden_width": self.hidden_width,
            "activation": "sigmoid",
            "weights_input_hidden": self.weights_input_hidden.tolist(),
            "bias_hidden": self.bias_hidden.tolist(),
            "weights_hidden_output": self.weights_hidden_output.tolist(),
            "bias_output": self.bias_output,
            "input_scale": {
                "offset": self.input_scale[:, 0].tolist(),
                "gain": self.input_scale[:, 1].tolist(),
            },
            "output_scale": {"offset": self.output_scale[0], "gain": self.output_scale[1]},
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> NarxModel:
        version = data.get("format_version")
        if version != FORMAT_VERSION:
            raise ModelError(f"unsupported model format_version {version!r}")
        try:
            spec = RegressorSpec(**data["spec"])
            model = cls(
                spec=spec,
                weights_input_hidden=np.array(data["weights_input_hidden"], dtype=float),
                bias_hidden=np.array(data["bias_hidden"], dtype=float),
                weights_hidden_output=np.array(data["weights_hidden_output"], dtype=float),
                bias_output=data["bias_output"],
                input_scale=np.column_stack(
                    [data["input_scale"]["offset"], data["input_scale"]["gain"]]
                ),
                output_scale=(data["output_scale"]["offset"], data["output_scale"]["gain"]),
                metadata=dict(data.get("metadata", {})),
            )
        except (KeyError, TypeError) as exc:
            raise ModelError(f"malformed model file: {exc}") from exc
        if model.hidden_width != data.get("hidden_width", model.hidden_width):
            raise ModelError("hidden_width disagrees with weight shapes")
        return model

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def loads(cls, text: str) -> NarxModel:
        return cls.from_dict(json.loads(text))


def forward(model: NarxModel, reg) -> float:
    """One-step prediction ``y(k+1)`` from a single regression vector."""
    reg = np.asarray(reg, dtype=float)
    if reg.ndim != 1:
        raise ModelError("forward expects a single regression vector")
    return float(model.predict_batch(reg[None, :])[0])


def gradient_wrt_weights(model: NarxModel, reg) -> np.ndarray:
    """Gradient of the (physical-unit) prediction with respect to the parameters.

    Ordered as ``NarxModel.get_params``.  Entries are divided by the output
    gain, so with an identity output map the output-bias entry is 1 and the
    output-weight entries equal the hidden activations.
    """
    reg = np.asarray(reg, dtype=float)
    if reg.ndim != 1:
        raise ModelError("gradient_wrt_weights expects a single regression vector")
    return model.weight_jacobian(reg[None, :])[0]


def init_model(
    spec: RegressorSpec,
    hidden_width: int,
    rng: np.random.Generator,
    input_scale=None,
    output_scale=(0.0, 1.0),
    init_range: float = 0.5,
) -> NarxModel:
    """Random network with weights uniform in ``[-init_range, init_range]``."""
    if hidden_width < 1:
        raise ModelError("hidden_width must be >= 1")
    n = spec.width
    if input_scale is None:
        input_scale = np.column_stack([np.zeros(n), np.ones(n)])
    return NarxModel(
        spec=spec,
        weights_input_hidden=rng.uniform(-init_range, init_range, (hidden_width, n)),
        bias_hidden=rng.uniform(-init_range, init_range, hidden_width),
        weights_hidden_output=rng.uniform(-init_range, init_range, hidden_width),
        bias_output=float(rng.uniform(-init_range, init_range)),
        input_scale=input_scale,
        output_scale=output_scale,
    )


def fit_scaling(X, y) -> tuple[np.ndarray, tuple[float, float]]:
    """Affine maps sending each column of ``X`` and ``y`` onto ``[-1, 1]``."""

    def pair(col):
        lo, hi = float(np.min(col)), float(np.max(col))
        if hi == lo:
            return lo, 1.0
        return 0.5 * (lo + hi), 2.0 / (hi - lo)

    X = np.asarray(X, dtype=float)
    return np.array([pair(X[:, j]) for j in range(X.shape[1])]), pair(np.asarray(y))


@dataclass(frozen=True, eq=False)
class LinearArxModel:
    """Affine ARX predictor with the same rollout interface as ``NarxModel``.

    ``y(k+1) = a . [y(k), ...] + b . [u(k-delay+1), ...] + c``.  Used where an
    exactly quadratic control problem is wanted.
    """

    spec: RegressorSpec
    a: np.ndarray
    b: np.ndarray
    c: float = 0.0

    def __post_init__(self):
        a = np.array(self.a, dtype=float).reshape(-1)
        b = np.array(self.b, dtype=float).reshape(-1)
        if a.shape != (self.spec.ny,) or b.shape != (self.spec.nu,):
            raise ModelError("ARX coefficient lengths must match the regressor spec")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    def value_and_input_grad(self, reg: np.ndarray) -> tuple[float, np.ndarray]:
        grad = np.concatenate([self.a, self.b])
        return float(grad @ reg + self.c), grad

    def predict_horizon(self, past_y, past_u, future_u, n2: int) -> np.ndarray:
        return predict_horizon(self, past_y, past_u, future_u, n2)

    def jacobian_output_wrt_u(self, past_y, past_u, future_u, n2: int) -> np.ndarray:
        return jacobian_output_wrt_u(self, past_y, past_u, future_u, n2)


def _rollout(model, past_y, past_u, future_u, n2: int, with_jac: bool):
    spec = model.spec
    past_y = np.asarray(past_y, dtype=float).reshape(-1)
    past_u = np.asarray(past_u, dtype=float).reshape(-1)
    future_u = np.asarray(future_u, dtype=float).reshape(-1)
    if n2 < 1:
        raise ModelError("horizon must be >= 1")
    if past_y.size < spec.ny:
        raise ModelError(f"need {spec.ny} past outputs, got {past_y.size}")
    need_u = spec.nu + spec.delay - 2
    if past_u.size < need_u:
        raise ModelError(f"need {need_u} past inputs, got {past_u.size}")
    need_future = n2 - spec.delay + 1
    if future_u.size < need_future:
        raise ModelError(f"need {need_future} future inputs for horizon {n2}, got {future_u.size}")

    u_all = np.concatenate([past_u, future_u])
    ku = past_u.size  # index of u(k) in u_all
    m = future_u.size
    preds = np.empty(n2)
    jac = np.zeros((n2, m)) if with_jac else None
    reg = np.empty(spec.width)
    for i in range(n2):
        # regressor at time k+i predicts y(k+i+1)
        for lag in range(spec.ny):
            j = i - lag  # y(k+j)
            reg[lag] = preds[j - 1] if j >= 1 else past_y[past_y.size - 1 + j]
        for lag in range(spec.nu):
            reg[spec.ny + lag] = u_all[ku + i - spec.delay + 1 - lag]
        value, grad = model.value_and_input_grad(reg)
        preds[i] = value
        if with_jac:
            row = jac[i]
            for lag in range(spec.ny):
                j = i - lag
                if j >= 1:
                    row += grad[lag] * jac[j - 1]
            for lag in range(spec.nu):
                col = i - spec.delay + 1 - lag
                if col >= 0:
                    row[col] += grad[spec.ny + lag]
    return preds, jac


def predict_horizon(model, past_y, past_u, future_u, n2: int) -> np.ndarray:
    """Recursive predictions ``y(k+1), ..., y(k+n2)``.

    Args:
        model: Any predictor exposing ``spec`` and ``value_and_input_grad``.
        past_y: Measured outputs up to ``y(k)``.
        past_u: Applied inputs up to ``u(k-1)``.
        future_u: Candidate inputs ``u(k), u(k+1), ...``.
        n2: Number of predicted samples.
    """
    return _rollout(model, past_y, past_u, future_u, n2, with_jac=False)[0]


def jacobian_output_wrt_u(model, past_y, past_u, future_u, n2: int) -> np.ndarray:
    """Sensitivities ``d y(k+i) / d u(k+j)`` as an ``(n2, len(future_u))`` matrix.

    Row ``i - 1`` belongs to ``y(k+i)``; column ``j`` to ``u(k+j)``.  Entries
    with ``j > i - delay`` are structurally zero.
    """
    return _rollout(model, past_y, past_u, future_u, n2, with_jac=True)[1]


def predict_with_jacobian(model, past_y, past_u, future_u, n2: int):
    """Predictions and their input Jacobian from a single rollout."""
    return _rollout(model, past_y, past_u, future_u, n2, with_jac=True)

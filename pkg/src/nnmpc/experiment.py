"""End-to-end identification and closed-loop control runs with file artifacts."""

from __future__ import annotations

import io
import json
import logging
import os
import tempfile
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import plant
from .config import ExperimentConfig, reference_at
from .mpc import Controller, MpcConfig
from .narx import NarxModel
from .training import (
    Dataset,
    LossCurve,
    ValidationReport,
    generate_excitation,
    initial_model,
    one_step_predictions_csv,
    sample_plant,
    train_lm,
    validate,
)

logger = logging.getLogger(__name__)

TRAJECTORY_HEADER = ("k", "t", "r", "y", "y_hat", "u", "j", "lm_iters")


class StageError(RuntimeError):
    """A pipeline stage failed; artifacts of earlier stages are on disk."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage} failed: {cause}")
        self.stage = stage
        self.cause = cause


def write_atomic(path, text: str) -> None:
    """Write ``text`` to a temporary sibling file and rename it over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass
class TrajectoryLog:
    k: list[int] = field(default_factory=list)
    t: list[float] = field(default_factory=list)
    r: list[float] = field(default_factory=list)
    y: list[float] = field(default_factory=list)
    y_hat: list[float] = field(default_factory=list)
    u: list[float] = field(default_factory=list)
    j: list[float] = field(default_factory=list)
    lm_iters: list[int] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)
    solver_trace: list[tuple[int, int, float, float, float]] = field(default_factory=list)
    error: str | None = None

    def append(self, k, t, r, y, y_hat, u, j, lm_iters) -> None:
        self.k.append(int(k))
        self.t.append(float(t))
        self.r.append(float(r))
        self.y.append(float(y))
        self.y_hat.append(float(y_hat))
        self.u.append(float(u))
        self.j.append(float(j))
        self.lm_iters.append(int(lm_iters))

    def __len__(self) -> int:
        return len(self.k)

    def array(self, name: str) -> np.ndarray:
        return np.asarray(getattr(self, name), dtype=float)

    def _comment(self) -> str:
        if not self.metadata:
            return ""
        items = " ".join(f"{k}={v}" for k, v in sorted(self.metadata.items()))
        return f"# {items}\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(self._comment())
        buf.write(",".join(TRAJECTORY_HEADER) + "\n")
        for row in zip(self.k, self.t, self.r, self.y, self.y_hat, self.u, self.j, self.lm_iters):
            k, t, r, y, y_hat, u, j, it = row
            buf.write(f"{k},{t!r},{r!r},{y!r},{y_hat!r},{u!r},{j!r},{it}\n")
        return buf.getvalue()

    def solver_trace_csv(self) -> str:
        buf = io.StringIO()
        buf.write(self._comment())
        buf.write("k,iter,j,lambda,grad_norm\n")
        for k, it, j, lam, g in self.solver_trace:
            buf.write(f"{k},{it},{j!r},{lam!r},{g!r}\n")
        return buf.getvalue()


def _horizon_reference(profile, k: int, cfg: MpcConfig, preview: bool):
    if not preview:
        return reference_at(profile, k)
    return [reference_at(profile, k + i) for i in range(cfg.n1, cfg.n2 + 1)]


def closed_loop(
    params: plant.PlantParams,
    model: NarxModel,
    mpc_cfg: MpcConfig,
    reference,
    duration: int,
    ts: float = 0.2,
    substep: float = 0.01,
    u0: float = 0.1,
    preview: bool = False,
    x0: plant.PlantState | None = None,
    keep_trace: bool = False,
) -> TrajectoryLog:
    """Control the simulated reactor with the predictive controller.

    Starts from the equilibrium of ``u0`` unless ``x0`` is given.  Each
    sample reads the concentration, runs one controller step and holds the
    returned flow over the next period.  Without ``preview`` the controller
    sees the current setpoint over its whole horizon.

    A solver or integrator failure ends the run; the partial log carries
    the message in ``error``.
    """
    x = x0 if x0 is not None else plant.steady_state(u0, params)
    ctl = Controller(model, mpc_cfg, x.cb, u0)
    log = TrajectoryLog()
    for k in range(duration):
        r_k = reference_at(reference, k)
        y_hat = ctl.next_prediction
        try:
            u = ctl.step(x.cb, _horizon_reference(reference, k, mpc_cfg, preview))
        except Exception as exc:  # noqa: BLE001 - any failure truncates the run
            log.error = f"controller failed at step {k}: {exc}"
            logger.error(log.error)
            break
        sol = ctl.solution
        log.append(k, k * ts, r_k, x.cb, y_hat, u, sol.j_value, sol.iterations)
        if keep_trace:
            log.solver_trace.extend((k, it, j, lam, g) for it, j, lam, g in sol.trace)
        try:
            x = plant.advance(x, u, ts, substep, params)
        except plant.PlantError as exc:
            log.error = f"plant integration failed at step {k}: {exc}"
            logger.error(log.error)
            break
    return log


def frozen_input_run(
    params: plant.PlantParams,
    model: NarxModel | None,
    reference,
    duration: int,
    ts: float = 0.2,
    substep: float = 0.01,
    u0: float = 0.1,
    x0: plant.PlantState | None = None,
) -> TrajectoryLog:
    """Baseline with the flow held at ``u0``; ``y_hat`` holds the model's one-step predictions."""
    x = x0 if x0 is not None else plant.steady_state(u0, params)
    log = TrajectoryLog()
    if model is not None:
        spec = model.spec
        past_y = deque([x.cb] * spec.ny, maxlen=spec.ny)
        n_u = max(1, spec.nu + spec.delay - 2)
        past_u = deque([u0] * n_u, maxlen=n_u)
    y_hat = x.cb
    for k in range(duration):
        if model is not None and k > 0:
            past_y.append(x.cb)
        log.append(k, k * ts, reference_at(reference, k), x.cb, y_hat, u0, 0.0, 0)
        if model is not None:
            y_hat = float(model.predict_horizon(np.array(past_y), np.array(past_u), [u0], 1)[0])
            past_u.append(u0)
        x = plant.advance(x, u0, ts, substep, params)
    return log


@dataclass
class SegmentResult:
    start: int
    stop: int
    level: float
    settle_index: int | None  # samples after the step until the band is entered for good
    max_error_after_settle: float

    def settled_within(self, samples: int) -> bool:
        return self.settle_index is not None and self.settle_index <= samples


def tracking_segments(log: TrajectoryLog, reference, rel_band: float = 0.02) -> list[SegmentResult]:
    """Per-setpoint settling analysis of a trajectory.

    A segment is settled at the first sample from which the output stays
    within ``rel_band * |level|`` of the level until the segment ends.
    """
    y = log.array("y")
    starts = [s for s, _ in reference] + [len(y)]
    out = []
    for (start, level), stop in zip(reference, starts[1:]):
        stop = min(stop, len(y))
        if start >= stop:
            continue
        seg = y[start:stop]
        inside = np.abs(seg - level) <= rel_band * abs(level)
        outside = np.flatnonzero(~inside)
        if outside.size == 0:
            settle = 0
        elif outside[-1] == seg.size - 1:
            settle = None
        else:
            settle = int(outside[-1] + 1)
        err = float(np.max(np.abs(seg[settle:] - level))) if settle is not None else float("inf")
        out.append(SegmentResult(start, stop, float(level), settle, err))
    return out


def tracks_reference(log: TrajectoryLog, reference, within: int = 40, rel_band: float = 0.02) -> bool:
    """True when every setpoint is settled on within ``within`` samples."""
    segs = tracking_segments(log, reference, rel_band)
    return bool(segs) and all(s.settled_within(within) for s in segs)


@dataclass
class PipelineResult:
    model: NarxModel
    report: ValidationReport
    log: TrajectoryLog
    dataset: Dataset
    loss_curve: LossCurve
    baseline: TrajectoryLog
    files: dict[str, Path]


GNUPLOT_SCRIPT = """\
# config_hash={hash}
set datafile separator ","
set datafile commentschars "#"
set key autotitle columnhead
set multiplot layout 2,1
set ylabel "concentration"
plot "trajectory.csv" using 2:3 with steps title "reference", \\
     "trajectory.csv" using 2:4 with lines title "controlled", \\
     "trajectory_frozen.csv" using 2:4 with lines title "frozen input"
set ylabel "w1"
set xlabel "time"
plot "trajectory.csv" using 2:6 with steps title "control signal"
unset multiplot
"""


def generate_dataset(cfg: ExperimentConfig) -> Dataset:
    ex = cfg.excitation
    u = generate_excitation(ex.n, cfg.seed, (ex.u_min, ex.u_max), ex.kind, (ex.hold_min, ex.hold_max))
    x0 = plant.steady_state(cfg.operating_flow, cfg.plant)
    return sample_plant(
        u,
        cfg.sampling.ts,
        cfg.plant,
        x0,
        cfg.sampling.substep,
        ex.train_fraction,
        ex.noise_std,
        cfg.seed + 1,
    )


def train_model(cfg: ExperimentConfig, data: Dataset) -> tuple[NarxModel, LossCurve]:
    tcfg = cfg.train_config
    model = initial_model(cfg.narx.spec, cfg.narx.hidden, data, tcfg)
    model, curve = train_lm(model, data, tcfg)
    return model.with_metadata(config_hash=cfg.hash()), curve


def run_control(cfg: ExperimentConfig, model: NarxModel, keep_trace: bool = False) -> tuple[TrajectoryLog, TrajectoryLog]:
    """Controlled run and frozen-input baseline for the configured reference."""
    common = dict(
        reference=cfg.reference,
        duration=cfg.duration,
        ts=cfg.sampling.ts,
        substep=cfg.sampling.substep,
        u0=cfg.operating_flow,
    )
    log = closed_loop(cfg.plant, model, cfg.mpc, preview=cfg.reference_preview, keep_trace=keep_trace, **common)
    baseline = frozen_input_run(cfg.plant, model, **common)
    return log, baseline


def _summary(report: ValidationReport, log: TrajectoryLog, baseline: TrajectoryLog, cfg: ExperimentConfig) -> str:
    def sse(lg):
        e = lg.array("y") - lg.array("r")
        return float(e @ e)

    data = {
        "config_hash": cfg.hash(),
        "rmse_train": report.rmse_train,
        "rmse_test": report.rmse_test,
        "rmse_test_relative": report.rmse_test / report.output_range if report.output_range else None,
        "autocorr_inside_fraction": report.autocorr_inside_fraction,
        "crosscorr_inside_fraction": report.crosscorr_inside_fraction,
        "tracking_ok": tracks_reference(log, cfg.reference),
        "baseline_tracking_ok": tracks_reference(baseline, cfg.reference),
        "sse_controlled": sse(log),
        "sse_frozen": sse(baseline),
        "control_error": log.error,
    }
    return json.dumps(data, indent=2, sort_keys=True) + "\n"


def run_pipeline(
    cfg: ExperimentConfig,
    out_dir,
    gnuplot_script: bool = False,
    solver_trace: bool = False,
) -> PipelineResult:
    """Data generation, training, validation and closed-loop control.

    Writes ``config.toml``, ``dataset.csv``, ``loss.csv``, ``model.json``,
    ``validation.csv``, ``predictions.csv``, ``trajectory.csv``,
    ``trajectory_frozen.csv`` and ``summary.json`` into ``out_dir``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    h = cfg.hash()
    files: dict[str, Path] = {}

    def emit(name: str, text: str) -> None:
        write_atomic(out / name, text)
        files[name] = out / name

    emit("config.toml", f"# config_hash={h}\n" + cfg.to_toml())

    stage = "gen-data"
    try:
        data = generate_dataset(cfg)
        emit("dataset.csv", data.to_csv(h))

        stage = "train"
        model, curve = train_model(cfg, data)
        emit("loss.csv", curve.to_csv(h))
        emit("model.json", model.dumps())

        stage = "validate"
        report = validate(model, data)
        emit("validation.csv", report.to_csv(h))
        emit("predictions.csv", one_step_predictions_csv(model, data, h))

        stage = "control"
        log, baseline = run_control(cfg, model, keep_trace=solver_trace)
        for lg in (log, baseline):
            lg.metadata = {"config_hash": h, "model": "model.json"}
        emit("trajectory.csv", log.to_csv())
        emit("trajectory_frozen.csv", baseline.to_csv())
        if solver_trace:
            emit("solver_trace.csv", log.solver_trace_csv())
        if gnuplot_script:
            emit("plot.gp", GNUPLOT_SCRIPT.format(hash=h))
        emit("summary.json", _summary(report, log, baseline, cfg))
        if log.error:
            raise RuntimeError(log.error)
    except Exception as exc:
        raise StageError(stage, exc) from exc
    return PipelineResult(model, report, log, data, curve, baseline, files)

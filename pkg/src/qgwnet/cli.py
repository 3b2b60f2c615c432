"""``qgw`` command line: synth, extract-graph, train, predict, calibrate, evaluate.

Every command reads an optional flat ``key = value`` config file, applies
flag overrides, and writes the fully resolved config into its output
directory. Failures print ``error: <exit code>: <message>`` on stderr.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import __version__
from .calibration import (DEFAULT_GRID, CalibrationMap, apply_calibration, fit_calibration,
                          load_calibration, save_calibration)
from .data import (ExtractionParams, SplitSpec, TrafficSeries, chronological_split,
                   extract_graph_from_grid, load_grid, load_series, make_windows, save_series,
                   zscore_normalize)
from .errors import EmptyResultError, FormatError, TrainingDiverged
from .evaluation import (MetricsReport, calibration_curve, crossing_rate, historical_average,
                         mae_mse_by_horizon, report_steps, sort_quantiles, static_prediction,
                         write_curve_csv, write_report_csv)
from .graph import build_transition_matrices, load_graph, save_graph
from .model import (ModelConfig, QuantileForecast, gaussian_quantile, init_params,
                    load_checkpoint, mc_dropout_forward, predict_quantiles, save_checkpoint)
from .synthetic import RingProcess, ring_graph
from .training import TrainConfig, train

EXIT_OK, EXIT_INPUT, EXIT_EMPTY, EXIT_DIVERGED = 0, 2, 3, 4
FORECAST_HEADER = "QGW-FORECAST v1"
CONFIG_HEADER = "# QGW-CONFIG v1"


class InputError(ValueError):
    pass


# ------------------------------------------------------------------ config


@dataclass
class RunConfig:
    dataset: str = "synthetic"
    series: str = ""
    graph: str = ""
    seed: int = 0
    # model
    input_len: int = 12
    horizon: int = 12
    dilations: str = "1,2,4,4"
    residual_channels: int = 16
    dilation_channels: int = 16
    skip_channels: int = 32
    end_channels: int = 32
    diffusion_steps: int = 2
    kernel_size: int = 2
    dropout: float = 0.0
    n_tau: int = 16
    kappa: float = 0.05
    # training
    epochs: int = 50
    batch_size: int = 8
    lr: float = 1e-3
    clip_norm: float = 5.0
    patience: int = 10
    train_frac: float = 0.7
    val_frac: float = 0.1
    test_frac: float = 0.2
    # calibration and baselines
    calibration_grid: str = ",".join(repr(float(t)) for t in DEFAULT_GRID)
    mc_passes: int = 50
    # extraction
    d_min: float = 1200.0
    density_outskirts: float = 1 / 16
    density_centre: float = 0.5
    edge_cutoff: float = 2500.0
    speed_channel: int = 1
    # synthetic generator
    synth_nodes: int = 20
    synth_steps: int = 6000

    def model_config(self, num_nodes: int, channels: int) -> ModelConfig:
        return ModelConfig(
            self.input_len, self.horizon, channels, num_nodes, parse_floats(self.dilations, int),
            self.residual_channels, self.dilation_channels, self.skip_channels, self.end_channels,
            self.diffusion_steps, self.kernel_size, self.dropout, self.n_tau, self.kappa,
        )

    def train_config(self, objective: str = "quantile") -> TrainConfig:
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
                           clip_norm=self.clip_norm, patience=self.patience, objective=objective,
                           kappa=self.kappa)

    def split(self) -> SplitSpec:
        return SplitSpec(self.train_frac, self.val_frac, self.test_frac)

    def extraction(self) -> ExtractionParams:
        return ExtractionParams(self.density_outskirts, self.density_centre, None, self.d_min,
                                self.edge_cutoff, self.speed_channel)

    def to_text(self) -> str:
        lines = [CONFIG_HEADER]
        lines += [f"{f.name} = {getattr(self, f.name)}" for f in fields(self)]
        return "\n".join(lines) + "\n"


def parse_floats(text: str, kind=float) -> tuple:
    try:
        return tuple(kind(v) for v in str(text).split(",") if v.strip())
    except ValueError:
        raise InputError(f"cannot parse list {text!r}") from None


def _coerce(name: str, raw: str, kind):
    try:
        return kind(raw)
    except ValueError:
        raise InputError(f"config key {name}: cannot parse {raw!r} as {kind.__name__}") from None


def _field_types() -> dict:
    hints = {"int": int, "float": float, "str": str}
    return {f.name: hints[f.type] for f in fields(RunConfig)}


def read_config_file(path) -> dict[str, str]:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"config file not found: {path}")
    out = {}
    types = _field_types()
    for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InputError(f"{path}:{n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise InputError(f"{path}:{n}: unknown key '{key}'")
        out[key] = value
    return out


def resolve_config(args: argparse.Namespace) -> RunConfig:
    types = _field_types()
    values: dict = {}
    if getattr(args, "config", None):
        values.update(read_config_file(args.config))
    for name in types:
        v = getattr(args, name, None)
        if v is not None:
            values[name] = v
    cfg = RunConfig(**{k: _coerce(k, str(v), types[k]) for k, v in values.items()})
    return cfg


def write_resolved(cfg: RunConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved.cfg").write_text(cfg.to_text(), encoding="utf-8")


# --------------------------------------------------------------- forecasts


def save_forecast(path, forecast: QuantileForecast, origins: np.ndarray) -> None:
    values = np.ascontiguousarray(forecast.values, dtype="<f8")
    header = [
        FORECAST_HEADER,
        "taus " + ",".join(repr(float(t)) for t in forecast.taus),
        "shape " + ",".join(str(s) for s in values.shape),
        "origins " + ",".join(str(int(o)) for o in origins),
        "end",
    ]
    Path(path).write_bytes(("\n".join(header) + "\n").encode("utf-8") + values.tobytes())


def load_forecast(path) -> tuple[QuantileForecast, np.ndarray]:
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"{path}: no such file")
    raw = path.read_bytes()
    lines, pos = [], 0
    for _ in range(5):
        end = raw.find(b"\n", pos)
        if end < 0:
            raise FormatError(f"{path}: truncated header at byte {pos}")
        lines.append(raw[pos:end].decode("utf-8", errors="replace"))
        pos = end + 1
    if lines[0] != FORECAST_HEADER:
        raise FormatError(f"{path}: expected '{FORECAST_HEADER}', found {lines[0]!r}")
    try:
        taus = [float(v) for v in lines[1].split(" ", 1)[1].split(",")]
        shape = tuple(int(v) for v in lines[2].split(" ", 1)[1].split(","))
        origins = np.array([int(v) for v in lines[3].split(" ", 1)[1].split(",") if v], dtype=np.int64)
    except (ValueError, IndexError):
        raise FormatError(f"{path}: malformed forecast header") from None
    if lines[4] != "end":
        raise FormatError(f"{path}: expected 'end' after header")
    need = int(np.prod(shape)) * 8
    if len(raw) - pos != need:
        raise FormatError(f"{path}: payload is {len(raw) - pos} bytes at offset {pos}, expected {need}")
    values = np.frombuffer(raw[pos:], dtype="<f8").reshape(shape).astype(np.float64)
    return QuantileForecast(np.array(taus), values), origins


# -------------------------------------------------------------- pipelines


@dataclass
class Prepared:
    cfg: RunConfig
    series: TrafficSeries
    tm: object
    model_cfg: ModelConfig
    ranges: tuple
    windows: dict


def prepare(cfg: RunConfig) -> Prepared:
    if not cfg.series or not cfg.graph:
        raise InputError("both 'series' and 'graph' must be given")
    series = load_series(cfg.series)
    graph = load_graph(cfg.graph)
    if graph.num_nodes != series.num_nodes:
        raise InputError(f"graph has {graph.num_nodes} nodes but series has {series.num_nodes}")
    mcfg = cfg.model_config(series.num_nodes, series.num_channels).validate()
    ranges = chronological_split(series.num_steps, cfg.split(), min_len=cfg.input_len + cfg.horizon)
    norm, stats = zscore_normalize(series, ranges[0])
    windows = {name: make_windows(norm, series, cfg.input_len, cfg.horizon, r, stats)
               for name, r in zip(("train", "val", "test"), ranges)}
    return Prepared(cfg, series, build_transition_matrices(graph), mcfg, ranges, windows)


def _checkpoint(args, cfg: RunConfig) -> dict:
    if not args.checkpoint:
        raise InputError("--checkpoint is required")
    return load_checkpoint(args.checkpoint)


def cmd_synth(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    write_resolved(cfg, out)
    proc = RingProcess(num_nodes=cfg.synth_nodes)
    save_series(out / "series.qgws", proc.simulate(cfg.synth_steps, seed=cfg.seed))
    save_graph(out / "graph.qgwg", ring_graph(cfg.synth_nodes))
    print(f"wrote {out / 'series.qgws'} and {out / 'graph.qgwg'}")
    return EXIT_OK


def cmd_extract(args, cfg: RunConfig) -> int:
    if not args.grid:
        raise InputError("--grid is required")
    out = Path(args.out)
    movie = load_grid(args.grid)
    graph, series = extract_graph_from_grid(movie, cfg.extraction())
    write_resolved(cfg, out)
    save_graph(out / "graph.qgwg", graph)
    save_series(out / "series.qgws", series)
    print(f"extracted {graph.num_nodes} sensors, {len(graph.edges())} edges")
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    prep = prepare(cfg)
    out = Path(args.out)
    write_resolved(cfg, out)
    objective = "mae" if args.baseline == "mc-dropout" else "quantile"
    params = init_params(prep.model_cfg, cfg.seed)
    try:
        best, log = train(params, prep.model_cfg, prep.tm, prep.windows["train"], prep.windows["val"],
                          cfg.train_config(objective), seed=cfg.seed)
    except TrainingDiverged as exc:
        save_checkpoint(out / "checkpoint.qgwc", exc.params)
        exc.log.save(out / "trainlog.csv")
        raise
    save_checkpoint(out / "checkpoint.qgwc", best)
    log.save(out / "trainlog.csv")
    print(f"trained {len(log.records)} epochs, best epoch {log.best_epoch}")
    return EXIT_OK


def _split_windows(prep: Prepared, split: str):
    if split not in prep.windows:
        raise InputError(f"unknown split {split!r}")
    return prep.windows[split]


def cmd_predict(args, cfg: RunConfig) -> int:
    prep = prepare(cfg)
    params = _checkpoint(args, cfg)
    taus = np.array(parse_floats(args.taus))
    if taus.size == 0 or np.any((taus <= 0) | (taus >= 1)):
        raise InputError(f"--taus must be levels inside (0, 1), got {args.taus}")
    levels = taus
    if args.calibration:
        levels = apply_calibration(load_calibration(args.calibration), taus)
    ds = _split_windows(prep, args.split)
    fc = predict_quantiles(params, prep.model_cfg, prep.tm, ds.inputs, levels, ds.stats)
    fc = QuantileForecast(taus, fc.values)
    if args.sort_quantiles:
        fc = sort_quantiles(fc)
    out = Path(args.out)
    write_resolved(cfg, out)
    save_forecast(out / "forecast.qgwf", fc, ds.origins)
    if len(taus) >= 2:
        print(f"crossing rate {crossing_rate(fc):.6f}")
    print(f"wrote {out / 'forecast.qgwf'}")
    return EXIT_OK


def cmd_calibrate(args, cfg: RunConfig) -> int:
    prep = prepare(cfg)
    params = _checkpoint(args, cfg)
    grid = np.array(parse_floats(cfg.calibration_grid))
    val = prep.windows["val"]

    def predict(t):
        return predict_quantiles(params, prep.model_cfg, prep.tm, val.inputs, [t], val.stats).values[0]

    before = calibration_curve(predict, val.raw_targets, val.target_mask, grid)
    cmap = fit_calibration(predict, val.raw_targets, val.target_mask, grid)
    out = Path(args.out)
    write_resolved(cfg, out)
    save_calibration(out / "calibration.csv", cmap)
    after = calibration_curve(lambda t: predict(float(cmap.remap(t))), val.raw_targets,
                              val.target_mask, grid)
    write_curve_csv(out / "curve.csv", {"before": before, "after-val": after})
    print(f"wrote {out / 'calibration.csv'}")
    return EXIT_OK


def cmd_evaluate(args, cfg: RunConfig) -> int:
    prep = prepare(cfg)
    ds = _split_windows(prep, args.split)
    steps = report_steps(cfg.horizon, prep.series.interval_minutes)
    grid = np.array(parse_floats(cfg.calibration_grid))
    curves, cross = {}, None
    targets, mask = ds.raw_targets, ds.target_mask
    if args.model == "hist-avg":
        split_range = dict(zip(("train", "val", "test"), prep.ranges))[args.split]
        ha = historical_average(prep.series, prep.ranges[0], split_range)
        m = prep.series.mask[split_range[0]:split_range[1]]
        vals = prep.series.values[split_range[0]:split_range[1]]
        # one prediction per target time, identical for every horizon
        pred = np.repeat(ha[:, None], cfg.horizon, axis=1)
        targets = np.repeat(vals[:, None], cfg.horizon, axis=1).astype(np.float64)
        mask = np.repeat(m[:, None], cfg.horizon, axis=1)
    elif args.model == "static":
        pred = static_prediction(prep.series, ds.origins, cfg.horizon)
    elif args.model == "mc-dropout":
        params = _checkpoint(args, cfg)
        mean, var = mc_dropout_forward(params, prep.model_cfg, prep.tm, ds.inputs, cfg.mc_passes,
                                       cfg.seed, ds.stats)
        pred = mean
        curves["test"] = calibration_curve(lambda t: gaussian_quantile(mean, var, t), targets, mask, grid)
    elif args.model == "qgwnet":
        if args.forecast:
            fc, origins = load_forecast(args.forecast)
            if not np.array_equal(origins, ds.origins):
                raise InputError("forecast origins do not match the evaluated split")
            pred = fc.at(0.5)
            if len(fc.taus) >= 2:
                cross = crossing_rate(fc)
        else:
            params = _checkpoint(args, cfg)
            levels = np.array([0.5])
            cmap = load_calibration(args.calibration) if args.calibration else CalibrationMap.identity()

            def predict(t):
                return predict_quantiles(params, prep.model_cfg, prep.tm, ds.inputs,
                                         [float(cmap.remap(t))], ds.stats).values[0]

            pred = predict(float(levels[0]))
            curves["test"] = calibration_curve(predict, targets, mask, grid)
    else:
        raise InputError(f"unknown model {args.model!r}")
    rows = mae_mse_by_horizon(pred, targets, mask, steps, prep.series.interval_minutes)
    report = MetricsReport(cfg.dataset, args.model, rows, curves, cross)
    out = Path(args.out)
    write_resolved(cfg, out)
    write_report_csv(out / "report.csv", [report])
    if curves:
        write_curve_csv(out / "curve.csv", curves)
    for r in rows:
        print(f"{args.model} {r.minutes} min: MAE {r.mae!r} MSE {r.mse!r}")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qgw", description="Quantile Graph WaveNet toolkit")
    parser.add_argument("--version", action="version", version=f"qgw {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--out", required=True, help="output directory")
        for f in fields(RunConfig):
            p.add_argument("--" + f.name.replace("_", "-"), dest=f.name, default=None,
                           help=argparse.SUPPRESS if f.name not in _SHOWN else f"override {f.name}")
        return p

    common(sub.add_parser("synth", help="write the ring-graph synthetic dataset"))
    p = common(sub.add_parser("extract-graph", help="sensor graph from a grid movie"))
    p.add_argument("--grid", help="QGW-GRID sidecar")
    p = common(sub.add_parser("train", help="train a model"))
    p.add_argument("--baseline", choices=("qgwnet", "mc-dropout"), default="qgwnet")
    p = common(sub.add_parser("predict", help="quantile forecasts"))
    p.add_argument("--checkpoint")
    p.add_argument("--taus", default="0.05,0.5,0.95")
    p.add_argument("--calibration")
    p.add_argument("--split", default="test")
    p.add_argument("--sort-quantiles", action="store_true")
    p = common(sub.add_parser("calibrate", help="fit a level remap on validation data"))
    p.add_argument("--checkpoint")
    p = common(sub.add_parser("evaluate", help="horizon metrics and calibration curves"))
    p.add_argument("--model", choices=("qgwnet", "mc-dropout", "hist-avg", "static"), default="qgwnet")
    p.add_argument("--checkpoint")
    p.add_argument("--forecast")
    p.add_argument("--calibration")
    p.add_argument("--split", default="test")
    return parser


_SHOWN = {"series", "graph", "seed", "epochs", "d_min", "density_outskirts", "density_centre"}

COMMANDS = {
    "synth": cmd_synth,
    "extract-graph": cmd_extract,
    "train": cmd_train,
    "predict": cmd_predict,
    "calibrate": cmd_calibrate,
    "evaluate": cmd_evaluate,
}


def _fail(code: int, message: str) -> int:
    print(f"error: {code}: {message}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg)
    except TrainingDiverged as exc:
        return _fail(EXIT_DIVERGED, f"training diverged: {exc}")
    except EmptyResultError as exc:
        return _fail(EXIT_EMPTY, str(exc))
    except FileNotFoundError as exc:
        return _fail(EXIT_INPUT, f"file not found: {exc.filename}")
    except (InputError, FormatError, ValueError, KeyError, TypeError) as exc:
        return _fail(EXIT_INPUT, str(exc).strip("'\""))


if __name__ == "__main__":
    raise SystemExit(main())

"""Command-line front end.

Subcommands::

    simulate   run a built-in or described model and write a trajectory CSV
    train      train the hybrid pendulum model from an INI config
    evaluate   roll out model, reference and trained hybrid on a scenario
    extract    sweep the learned friction or displacement correction
    describe   print a model description

Exit codes: 0 ok, 1 config or parse error, 2 numeric failure, 3 training
divergence.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import json
import logging
import os
import sys
import time

import numpy as np

from . import descio, plots
from .core import ModelKind
from .errors import NeuralFMUError, ParseError, SolverError, TrainingDivergence
from .hybrid import (
    Dataset,
    TrainConfig,
    evaluate_loss,
    extract_top_response,
    learned_friction,
    me_neuralfmu_solve,
    paper_topology,
    reference_dataset,
    sample_times,
    train,
)
from .models import (
    BUILTIN_MODELS,
    NATIVE_FACTORIES,
    ModelBundle,
    PendulumParams,
    friction_force,
    make_frictionless_pendulum,
    simulate_me,
    wrap_me_as_cs,
)
from .net import load_checkpoint, save_checkpoint
from .odesolve import SolverConfig, Trajectory

log = logging.getLogger("neuralfmu")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_DIVERGED = 0, 1, 2, 3


class ConfigError(NeuralFMUError, ValueError):
    pass


# -- config --------------------------------------------------------------------

_PARAM_KEYS = ("m", "c", "s_rel", "s0", "f_coulomb", "f_prop", "f_stribeck", "f_exp")


@dataclasses.dataclass(frozen=True)
class RunConfig:
    fmu: PendulumParams
    reference: PendulumParams
    train: TrainConfig
    init: str
    t_end: float
    n_samples: int
    train_x0: tuple
    test_x0: tuple
    out_dir: str
    checkpoint_epochs: tuple

    def echo(self) -> dict:
        d = dataclasses.asdict(self)
        d["train"]["optimizer"] = self.train.optimizer.value
        d["train"]["gradient_method"] = self.train.gradient_method.value
        return d


def _params_section(cp, name, base: PendulumParams) -> PendulumParams:
    if not cp.has_section(name):
        return base
    kw = {}
    for key, value in cp.items(name):
        if key not in _PARAM_KEYS:
            raise ConfigError(f"[{name}] unknown key {key!r}")
        kw[key] = _float(value, f"[{name}] {key}")
    try:
        return dataclasses.replace(base, **kw)
    except ValueError as exc:
        raise ConfigError(f"[{name}] {exc}") from None


def _float(text, where):
    try:
        return float(text)
    except ValueError:
        raise ConfigError(f"{where}: expected a number, got {text!r}") from None


def _int(text, where):
    try:
        return int(text)
    except ValueError:
        raise ConfigError(f"{where}: expected an integer, got {text!r}") from None


def load_run_config(path) -> RunConfig:
    """Read an INI experiment file; missing keys take the experiment defaults."""
    if not os.path.isfile(path):
        raise ConfigError(f"config file {path} does not exist")
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        cp.read(path, encoding="utf-8")
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    known = {"fmu", "reference", "data", "train", "output"}
    for sec in cp.sections():
        if sec not in known:
            raise ConfigError(f"unknown section [{sec}]")
    fmu = _params_section(cp, "fmu", PendulumParams.fmu())
    ref = _params_section(cp, "reference", PendulumParams.reference())
    data = cp["data"] if cp.has_section("data") else {}
    tr = cp["train"] if cp.has_section("train") else {}
    out = cp["output"] if cp.has_section("output") else {}
    try:
        tcfg = TrainConfig(
            epochs=_int(tr.get("epochs", "2500"), "[train] epochs"),
            learning_rate=_float(tr.get("learning_rate", "1e-3"), "[train] learning_rate"),
            optimizer=tr.get("optimizer", "Adam"),
            beta1=_float(tr.get("beta1", "0.9"), "[train] beta1"),
            beta2=_float(tr.get("beta2", "0.999"), "[train] beta2"),
            eps=_float(tr.get("eps", "1e-8"), "[train] eps"),
            gradient_method=tr.get("gradient_method", "DiscretizeBackprop"),
            fixed_h=_float(tr.get("fixed_h", "0.01"), "[train] fixed_h"),
            rng_seed=_int(tr.get("seed", "0"), "[train] seed"),
        )
    except ValueError as exc:
        raise ConfigError(f"[train] {exc}") from None
    init = tr.get("init", "NeutralResidual")
    if init not in ("NeutralResidual", "PaperInit"):
        raise ConfigError(f"[train] init must be NeutralResidual or PaperInit, got {init!r}")
    t_end = _float(data.get("t_end", "4.0"), "[data] t_end")
    n_samples = _int(data.get("n_samples", "400"), "[data] n_samples")
    if not t_end > 0.0 or n_samples < 1:
        raise ConfigError("[data] needs t_end > 0 and n_samples >= 1")
    dt = t_end / n_samples
    if abs(dt / tcfg.fixed_h - round(dt / tcfg.fixed_h)) > 1e-9:
        raise ConfigError("[data] sample spacing must be a multiple of [train] fixed_h")
    train_x0 = (_float(data.get("train_s", "0.5"), "[data] train_s"), _float(data.get("train_v", "0.0"), "[data] train_v"))
    test_x0 = (_float(data.get("test_s", "1.0"), "[data] test_s"), _float(data.get("test_v", "-1.5"), "[data] test_v"))
    ck = tuple(_int(v, "[output] checkpoint_epochs") for v in out.get("checkpoint_epochs", "").replace(",", " ").split())
    if any(k <= 0 or k > tcfg.epochs for k in ck):
        raise ConfigError("[output] checkpoint_epochs must lie in 1..epochs")
    out_dir = out.get("dir", "out")
    if not os.path.isabs(out_dir):
        out_dir = os.path.join(os.path.dirname(os.path.abspath(path)), out_dir)
    return RunConfig(fmu, ref, tcfg, init, t_end, n_samples, train_x0, test_x0, out_dir, ck)


# -- shared helpers ---------------------------------------------------------------


def _reference_dataset(params: PendulumParams, x0, t_end, n_samples) -> Dataset:
    return reference_dataset(x0, t_end, n_samples, params)


def _build_nfmu(fmu: PendulumParams, fixed_h: float, residual: bool):
    inst = make_frictionless_pendulum(fmu).instantiate()
    nfmu = paper_topology(inst, SolverConfig.rk4(fixed_h))
    nfmu.residual_mode = residual
    return nfmu


def _meta(cfg: RunConfig, epoch: int) -> dict:
    return {
        "fmu": dataclasses.asdict(cfg.fmu),
        "reference": dataclasses.asdict(cfg.reference),
        "fixed_h": cfg.train.fixed_h,
        "residual_mode": cfg.init == "NeutralResidual",
        "init": cfg.init,
        "t_end": cfg.t_end,
        "n_samples": cfg.n_samples,
        "train_x0": list(cfg.train_x0),
        "test_x0": list(cfg.test_x0),
        "epoch": epoch,
    }


def _load_trained(path):
    if not os.path.isfile(path):
        raise ConfigError(f"checkpoint {path} does not exist")
    try:
        params, layout, meta = load_checkpoint(path)
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"{path}: {exc}") from None
    try:
        nfmu = _build_nfmu(PendulumParams(**meta["fmu"]), float(meta["fixed_h"]), bool(meta["residual_mode"]))
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"{path}: checkpoint metadata incomplete ({exc})") from None
    if layout != nfmu.layout():
        raise ConfigError(f"{path}: checkpoint layout does not match the experiment network")
    nfmu.params = params
    return nfmu, meta


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


# -- simulate ------------------------------------------------------------------


def _resolve_model(args) -> ModelBundle:
    if args.description:
        md = descio.load_description(args.description)
        factory = NATIVE_FACTORIES.get(md.model_name)
        if factory is None:
            raise ConfigError(f"no native implementation for model {md.model_name!r} (binaries are never executed)")
        return ModelBundle(md, factory)
    return BUILTIN_MODELS[args.model](s_start=args.s_start, v_start=args.v_start)


def _record_vrs(md, names):
    vrs = []
    for name in names:
        try:
            vrs.append(md.vr(name))
        except LookupError:
            raise ConfigError(f"unknown variable {name!r} in --record") from None
    return vrs


def cmd_simulate(args) -> int:
    bundle = _resolve_model(args)
    md = bundle.description
    names = args.record or [md.variable(vr).name for vr in md.state_vrs]
    inst = bundle.instantiate(ModelKind.ME)
    vrs = _record_vrs(md, names)
    t0, t1 = args.t0, args.t1
    if not t1 > t0 or not args.dt > 0.0:
        raise ConfigError("need t1 > t0 and dt > 0")
    n = int(round((t1 - t0) / args.dt))
    times = t0 + args.dt * np.arange(n + 1)
    times[-1] = t1
    inst.initialize(t0)
    cfg = SolverConfig.adaptive(args.rtol, args.atol)
    wall = time.perf_counter()
    rows = [inst.get_real(vrs)]
    steps = events = 0
    if args.kind == "cs":
        cs = wrap_me_as_cs(bundle, cfg).instantiate()
        cs.initialize(t0)
        rows = [cs.get_real(vrs)]
        for k in range(n):
            cs.do_step(times[k], times[k + 1] - times[k])
            rows.append(cs.get_real(vrs))
            steps += cs.last_step_stats.get("accepted", 0)
            events += cs.last_step_stats.get("events", 0)
    else:
        for k in range(n):
            traj = simulate_me(inst, (times[k], times[k + 1]), cfg)
            rows.append(inst.get_real(vrs))
            steps += traj.stats["accepted"]
            events += traj.stats["events"]
    wall = time.perf_counter() - wall
    out = Trajectory(times, np.array(rows).reshape(len(times), len(vrs)))
    descio.write_trajectory_csv(out, names, args.out)
    if args.svg:
        plots.write_line_plot(
            args.svg, [(nm, times, out.states[:, i]) for i, nm in enumerate(names)], md.model_name, "t [s]", ", ".join(names)
        )
    print(f"{md.model_name}: t=[{t0:g}, {t1:g}] steps={steps} events={events} wall={wall:.3f}s -> {args.out}")
    return EXIT_OK


# -- train -----------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    os.makedirs(cfg.out_dir, exist_ok=True)
    if cfg.init == "NeutralResidual":
        print("note: NeutralResidual init (zero final layer, residual output) differs from the plain random init")
    data = _reference_dataset(cfg.reference, cfg.train_x0, cfg.t_end, cfg.n_samples)
    test = _reference_dataset(cfg.reference, cfg.test_x0, cfg.t_end, cfg.n_samples)
    nfmu = _build_nfmu(cfg.fmu, cfg.train.fixed_h, False)
    nfmu.init(cfg.init, cfg.train.rng_seed)
    layout = nfmu.layout()
    ck_epochs = set(cfg.checkpoint_epochs)

    def on_epoch(k, p, loss):
        if k in ck_epochs:
            save_checkpoint(os.path.join(cfg.out_dir, f"checkpoint_{k}.bin"), p, layout, _meta(cfg, k))

    wall = time.perf_counter()
    params, history = train(nfmu, data, cfg.train, on_epoch=on_epoch)
    wall = time.perf_counter() - wall
    final = evaluate_loss(nfmu, data, params)
    if not np.isfinite(final):
        raise TrainingDivergence(f"final loss is {final}")
    if cfg.train.epochs in ck_epochs:
        save_checkpoint(os.path.join(cfg.out_dir, f"checkpoint_{cfg.train.epochs}.bin"), params, layout, _meta(cfg, cfg.train.epochs))
    save_checkpoint(os.path.join(cfg.out_dir, "checkpoint.bin"), params, layout, _meta(cfg, cfg.train.epochs))
    epochs = np.arange(len(history) + 1)
    descio.write_table_csv(os.path.join(cfg.out_dir, "loss.csv"), ["epoch", "loss"], [epochs, np.append(history, final)])
    summary = {
        "config": cfg.echo(),
        "initial_loss": float(history[0]),
        "final_loss": final,
        "test_loss_model": _model_loss(cfg.fmu, test, cfg.train.fixed_h),
        "test_loss_trained": evaluate_loss(nfmu, test, params),
        "wall_time_s": wall,
    }
    _write_json(os.path.join(cfg.out_dir, "summary.json"), summary)
    print(f"loss {history[0]:.6g} -> {final:.6g} in {wall:.1f}s; artifacts in {cfg.out_dir}")
    return EXIT_OK


def _model_loss(fmu: PendulumParams, data: Dataset, fixed_h: float) -> float:
    raw = make_frictionless_pendulum(fmu, s_start=data.x0[0], v_start=data.x0[1]).instantiate()
    raw.initialize(0.0)
    traj = simulate_me(raw, (0.0, data.times[-1]), SolverConfig.rk4(fixed_h), save_at=data.times)
    return data.loss(traj.states)


# -- evaluate ----------------------------------------------------------------------


def cmd_evaluate(args) -> int:
    nfmu, meta = _load_trained(args.checkpoint)
    x0 = tuple(meta["train_x0"] if args.scenario == "train" else meta["test_x0"])
    t_end, n = float(meta["t_end"]), int(meta["n_samples"])
    ref = _reference_dataset(PendulumParams(**meta["reference"]), x0, t_end, n)
    times = np.concatenate(([0.0], ref.times))
    raw = make_frictionless_pendulum(PendulumParams(**meta["fmu"]), s_start=x0[0], v_start=x0[1]).instantiate()
    raw.initialize(0.0)
    raw_traj = simulate_me(raw, (0.0, t_end), nfmu.solver_cfg, save_at=times)
    nn_traj = me_neuralfmu_solve(nfmu, x0, (0.0, t_end), times)
    ref_states = np.vstack((np.asarray(x0), ref.targets))
    os.makedirs(args.out, exist_ok=True)
    cols = np.hstack((raw_traj.states, ref_states, nn_traj.states))
    names = ["fmu_s", "fmu_v", "reference_s", "reference_v", "neuralfmu_s", "neuralfmu_v"]
    descio.write_trajectory_csv(Trajectory(times, cols), names, os.path.join(args.out, f"{args.scenario}.csv"))
    for i, (ch, unit) in enumerate((("s", "m"), ("v", "m/s"))):
        plots.write_line_plot(
            os.path.join(args.out, f"{args.scenario}_{ch}.svg"),
            [("FMU", times, raw_traj.states[:, i]), ("reference", times, ref_states[:, i]), ("NeuralFMU", times, nn_traj.states[:, i])],
            f"{args.scenario} scenario x0=({x0[0]:g}, {x0[1]:g})",
            "t [s]",
            f"{ch} [{unit}]",
        )
    mse_raw = float(np.mean((raw_traj.states[1:] - ref.targets) ** 2))
    mse_nn = float(np.mean((nn_traj.states[1:] - ref.targets) ** 2))
    print(f"{args.scenario}: MSE model={mse_raw:.6g} neuralfmu={mse_nn:.6g}")
    return EXIT_OK


# -- extract ----------------------------------------------------------------------


def cmd_extract(args) -> int:
    nfmu, meta = _load_trained(args.checkpoint)
    ref_p = PendulumParams(**meta["reference"])
    fmu_p = PendulumParams(**meta["fmu"])
    os.makedirs(args.out, exist_ok=True)
    if args.which == "friction":
        v = np.linspace(args.vmin, args.vmax, args.points)
        f_nn = learned_friction(nfmu, v, s=ref_p.equilibrium)
        f_ref = friction_force(v, ref_p)
        descio.write_table_csv(os.path.join(args.out, "friction.csv"), ["v", "f_learned", "f_reference"], [v, f_nn, f_ref])
        plots.write_line_plot(
            os.path.join(args.out, "friction.svg"), [("learned", v, f_nn), ("reference", v, f_ref)], "friction force", "v [m/s]", "F [N]"
        )
        print(f"friction sweep over {v.size} points -> {args.out}")
        return EXIT_OK
    x0 = tuple(meta["test_x0"])
    times = sample_times(float(meta["t_end"]), int(meta["n_samples"]))
    traj = me_neuralfmu_solve(nfmu, x0, (0.0, float(meta["t_end"])), times)
    d = extract_top_response(nfmu, traj.states)
    learned = -d[:, 0]
    ref_shift = np.full(times.size, ref_p.s0 - fmu_p.s0)
    descio.write_table_csv(
        os.path.join(args.out, "displacement.csv"),
        ["t", "s", "top_ds", "top_dv", "learned_anchor_shift", "reference_anchor_shift"],
        [times, traj.states[:, 0], d[:, 0], d[:, 1], learned, ref_shift],
    )
    plots.write_line_plot(
        os.path.join(args.out, "displacement.svg"),
        [("learned", times, learned), ("reference", times, ref_shift)],
        "anchor displacement",
        "t [s]",
        "shift [m]",
    )
    print(f"mean learned anchor shift {learned.mean():.6g} m (reference {ref_shift[0]:g} m) -> {args.out}")
    return EXIT_OK


# -- describe ----------------------------------------------------------------------


def _describe_dict(md, manifest=None) -> dict:
    out = {
        "model_name": md.model_name,
        "guid": md.guid,
        "kind": md.kind.value,
        "n_states": md.n_states,
        "n_event_indicators": md.n_event_indicators,
        "provides_directional_derivative": md.provides_directional_derivative,
        "can_get_set_state": md.can_get_set_state,
        "variables": [
            {
                "name": v.name,
                "value_reference": v.vr,
                "causality": v.causality.value,
                "variability": v.variability.value,
                "start": v.start,
            }
            for v in md.variables
        ],
    }
    if manifest is not None:
        out["resources"] = manifest.resource_paths
        out["binaries"] = sorted(k for k, v in manifest.has_binary.items() if v)
    return out


def cmd_describe(args) -> int:
    manifest = None
    if args.model:
        md = BUILTIN_MODELS[args.model]().description
    else:
        if not os.path.exists(args.path):
            raise ConfigError(f"{args.path} does not exist")
        if descio.zipfile.is_zipfile(args.path):
            manifest = descio.open_archive(args.path)
            md = manifest.model_description
        else:
            md = descio.load_description(args.path)
    info = _describe_dict(md, manifest)
    if args.json:
        print(json.dumps(info, indent=2, sort_keys=True))
        return EXIT_OK
    print(f"model     {info['model_name']}")
    print(f"guid      {info['guid']}")
    print(f"kind      {info['kind']}")
    print(f"states    {info['n_states']}")
    print(f"events    {info['n_event_indicators']}")
    print(f"flags     directional_derivative={info['provides_directional_derivative']} get_set_state={info['can_get_set_state']}")
    print(f"{'vr':>4}  {'name':<22}{'causality':<11}{'variability':<12}start")
    for v in info["variables"]:
        start = "" if v["start"] is None else format(v["start"], "g")
        print(f"{v['value_reference']:>4}  {v['name']:<22}{v['causality']:<11}{v['variability']:<12}{start}")
    return EXIT_OK


# -- entry point ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="neuralfmu", description=__doc__.split("\n")[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("simulate", help="simulate a model and write a trajectory CSV")
    src = sp.add_mutually_exclusive_group()
    src.add_argument("--model", choices=sorted(BUILTIN_MODELS), default="frictionless")
    src.add_argument("--description", help="modelDescription.xml or .fmu archive of a natively implemented model")
    sp.add_argument("--kind", choices=("me", "cs"), default="me")
    sp.add_argument("--t0", type=float, default=0.0)
    sp.add_argument("--t1", type=float, default=10.0)
    sp.add_argument("--dt", type=float, default=0.01, help="output interval (CS macro step)")
    sp.add_argument("--s-start", type=float, default=0.5)
    sp.add_argument("--v-start", type=float, default=0.0)
    sp.add_argument("--rtol", type=float, default=1e-8)
    sp.add_argument("--atol", type=float, default=1e-10)
    sp.add_argument("--record", nargs="+", metavar="NAME", help="variables to record (default: states)")
    sp.add_argument("--out", default="trajectory.csv")
    sp.add_argument("--svg", help="optional line plot")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("train", help="train the hybrid model described by a config file")
    sp.add_argument("config")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("evaluate", help="compare model, reference and trained hybrid")
    sp.add_argument("checkpoint")
    sp.add_argument("--scenario", choices=("train", "test"), default="test")
    sp.add_argument("--out", default=".")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("extract", help="extract the learned friction or displacement")
    sp.add_argument("checkpoint")
    sp.add_argument("--which", choices=("friction", "displacement"), default="friction")
    sp.add_argument("--vmin", type=float, default=-2.0)
    sp.add_argument("--vmax", type=float, default=2.0)
    sp.add_argument("--points", type=int, default=201)
    sp.add_argument("--out", default=".")
    sp.set_defaults(func=cmd_extract)

    sp = sub.add_parser("describe", help="print a model description")
    src = sp.add_mutually_exclusive_group(required=True)
    src.add_argument("path", nargs="?", help="modelDescription.xml or .fmu archive")
    src.add_argument("--model", choices=sorted(BUILTIN_MODELS))
    sp.add_argument("--json", action="store_true", help="machine-readable output")
    sp.set_defaults(func=cmd_describe)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except TrainingDivergence as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (SolverError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ParseError, NeuralFMUError, ValueError, LookupError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

"""``swapsched`` command line.

Exit codes: 0 success, 1 validation failure / infeasible / oom,
2 I/O problem, 3 internal error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import __version__
from .lr_tuner import LrConfig, LrError, adapted_learning_rate, adjust_iterations, contraction_residual
from .model_ir import (
    FORMAT_VERSION,
    SpecError,
    build_gmap,
    parse_hardware_spec,
    parse_network_spec,
    unfold_network,
    gmap_from_dict,
    gmap_to_dict,
    validate_gmap,
)
from .perf_model import ModelError, PerfModel, TrainingConfig, fit_perf_model, whole_training_time
from .planner import (
    PlanError,
    SwapPlan,
    find_efficiency_optimal_minibatch,
    fixed_overhead,
    plan_fixed_minibatch,
)
from .profiles import ProfileError, load_profiles
from .simulator import (
    SimConfig,
    SimError,
    simulate_iteration,
    verify_plan,
    write_memory_csv,
    write_stall_csv,
    write_trace_csv,
)
from .synthetic import write_fixture

log = logging.getLogger("swapsched")

EXIT_OK, EXIT_FAIL, EXIT_IO, EXIT_INTERNAL = 0, 1, 2, 3
MODES = ("naive", "dynamic", "resident")
DOMAIN_ERRORS = (SpecError, ProfileError, ModelError, PlanError, LrError, SimError)


# ---------------------------------------------------------------------------
# manifest and output helpers


def _digest_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class Run:
    def __init__(self, args: argparse.Namespace, inputs: dict, params: dict):
        self.args = args
        self.inputs = {k: str(v) for k, v in inputs.items() if v}
        for name, path in self.inputs.items():
            if not Path(path).is_file():
                raise FileNotFoundError(f"{name}: no such file {path}")
        self.params = params
        body = {
            "subcommand": args.command,
            "inputs": {k: _digest_file(v) for k, v in sorted(self.inputs.items())},
            "params": params,
            "format_version": FORMAT_VERSION,
        }
        self.manifest = {**body, "digest": hashlib.sha256(_canon(body).encode()).hexdigest()}
        self.out = Path(args.out_dir)
        self._inputs_resolved = {Path(p).resolve() for p in self.inputs.values()}

    def path(self, name: str) -> Path:
        p = self.out / name
        if p.resolve() in self._inputs_resolved:
            raise FileExistsError(f"refusing to overwrite input file {p}")
        self.out.mkdir(parents=True, exist_ok=True)
        return p

    def write_doc(self, name: str, doc: dict) -> Path:
        p = self.path(name)
        doc = {"format_version": FORMAT_VERSION, **doc, "manifest": self.manifest}
        p.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return p

    def write_manifest(self) -> Path:
        return self.write_doc("manifest.json", {})


def _canon(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _load_gmap(path) -> tuple:
    spec = parse_network_spec(path)
    phases = unfold_network(spec)
    return spec, build_gmap(phases, spec)


def _training_cfg(args, hw) -> TrainingConfig:
    return TrainingConfig(epochs=args.epochs, dataset_size=args.dataset_size, delta_sync=hw.delta_sync)


# ---------------------------------------------------------------------------
# subcommands


def cmd_validate(args) -> int:
    """Check inputs; also writes the derived GMAP so it can be inspected."""
    run = Run(args, {"network": args.network, "hardware": args.hardware, "gmap": args.gmap,
                     **{f"profile{i}": p for i, p in enumerate(args.profiles or [])}}, {})
    diags: list[str] = []
    spec = gmap = None
    try:
        spec, gmap = _load_gmap(args.network)
    except SpecError as exc:
        diags.append(f"network: {exc}")
    if args.gmap:
        try:
            gmap = gmap_from_dict(json.loads(Path(args.gmap).read_text(encoding="utf-8")))
        except SpecError as exc:
            diags.append(str(exc))
            gmap = None
    elif gmap is not None:
        run.write_doc("gmap.json", gmap_to_dict(gmap))
    if gmap is not None:
        diags.extend(str(d) for d in validate_gmap(gmap))
    if args.hardware:
        try:
            parse_hardware_spec(args.hardware)
        except SpecError as exc:
            diags.append(f"hardware: {exc}")
    if args.profiles:
        try:
            prof = load_profiles(args.profiles)
            diags.extend(f"profile: {d}" for d in prof.diagnostics)
        except ProfileError as exc:
            diags.append(f"profile: {exc}")
    for d in diags:
        print(d)
    doc = {"clean": not diags, "diagnostics": diags}
    if spec is not None:
        doc.update(network=spec.name, num_layers=spec.num_layers, num_ops=len(gmap.ops))
    run.write_doc("validate.json", doc)
    return EXIT_OK if not diags else EXIT_FAIL


def cmd_fit(args) -> int:
    run = Run(args, {"network": args.network, "hardware": args.hardware,
                     **{f"profile{i}": p for i, p in enumerate(args.profiles)}}, {"eta": args.eta})
    spec = parse_network_spec(args.network)
    fallback = parse_hardware_spec(args.hardware).pcie_nominal if args.hardware else 12e9
    prof = load_profiles(args.profiles)
    model = fit_perf_model(prof, spec.k_base, fallback, args.eta)
    needed = {ph.layer_type for ph in unfold_network(spec)} - set(model.curves)
    if needed:
        raise ModelError(f"no profile samples for layer types {sorted(needed)}")
    for t, c in sorted(model.curves.items()):
        print(f"{t}: plateau {c.plateau:.4g} FLOP/s over {len(c.knots)} knots")
        for x, y in c.knots:
            print(f"    {x:>16.6g}  {y:.6g}")
    print(f"bandwidth: {model.bandwidth_avail:.6g} B/s")
    run.write_doc("model.json", model.to_dict())
    return EXIT_OK


def _plan(args, gmap, hw, model, cfg):
    if args.k:
        return plan_fixed_minibatch(gmap, hw, model, args.k, cfg, args.budget_bytes)
    return find_efficiency_optimal_minibatch(gmap, hw, model, cfg, args.budget_bytes, args.step)


def cmd_plan(args) -> int:
    run = Run(args, {"network": args.network, "hardware": args.hardware, "model": args.model},
              _plan_params(args))
    spec, gmap = _load_gmap(args.network)
    hw = parse_hardware_spec(args.hardware)
    model = PerfModel.load(args.model)
    plan = _plan(args, gmap, hw, model, _training_cfg(args, hw))
    run.write_doc("plan.json", plan.to_dict())
    if not plan.feasible:
        print(f"{plan.reason}: {plan.detail}")
        return EXIT_FAIL
    print(f"k* = {plan.k_star} (k_max {plan.k_max})")
    print(f"pinned {len(plan.pin_set)} objects, {plan.pinned_bytes} B "
          f"({100 * plan.pinned_fraction:.1f}% of featuremap bytes)")
    for oid in plan.pin_set:
        print(f"    {oid}: {plan.pinned_sizes[oid]} B")
    print(f"predicted iteration {plan.predicted_iter_time:.6f} s, training {plan.predicted_whole_time:.1f} s")
    return EXIT_OK


def _plan_params(args) -> dict:
    return {"budget_bytes": args.budget_bytes, "k": args.k, "step": args.step,
            "epochs": args.epochs, "dataset_size": args.dataset_size}


def _simulate(gmap, hw, model, mode, k, pins, budget):
    budget = hw.memory_budget if budget is None else budget
    cfg = SimConfig(budget, mode, fixed_bytes=fixed_overhead(gmap, hw))
    return simulate_iteration(gmap, k, pins, model, cfg)


def cmd_simulate(args) -> int:
    run = Run(args, {"network": args.network, "hardware": args.hardware, "model": args.model,
                     "plan": args.plan},
              {**_plan_params(args), "mode": args.mode, "tolerance": args.tolerance})
    spec, gmap = _load_gmap(args.network)
    hw = parse_hardware_spec(args.hardware)
    model = PerfModel.load(args.model)
    plan = None
    if args.plan:
        plan = SwapPlan.from_dict(json.loads(Path(args.plan).read_text(encoding="utf-8")))
    elif args.mode == "dynamic":
        plan = _plan(args, gmap, hw, model, _training_cfg(args, hw))
        if not plan.feasible:
            print(f"{plan.reason}: {plan.detail}")
            run.write_doc("summary.json", {"plan": plan.to_dict()})
            return EXIT_FAIL
    k = args.k or (plan.k_star if plan else None)
    if k is None:
        raise PlanError("--k or --plan is required outside dynamic mode")
    pins = plan.pin_set if (plan and args.mode == "dynamic") else ()
    budget = args.budget_bytes if args.budget_bytes is not None else (plan.budget if plan else None)
    events, summary = _simulate(gmap, hw, model, args.mode, k, pins, budget)
    write_trace_csv(run.path("trace.csv"), events)
    doc = {"summary": summary.to_dict()}
    if not summary.oom:
        write_memory_csv(run.path("memory.csv"), summary)
        write_stall_csv(run.path("stalls.csv"), summary)
        if plan is not None and args.mode == "dynamic" and summary.k == plan.k_star:
            v = verify_plan(plan, summary, args.tolerance)
            doc["verdict"] = {"passed": v.passed, "stall_ok": v.stall_ok, "memory_ok": v.memory_ok,
                              "max_ready_deviation_s": max((abs(d) for d in v.deviations), default=0.0)}
    run.write_doc("summary.json", doc)
    if summary.oom:
        print(f"out of memory: {json.dumps(summary.wait_graph, sort_keys=True)}")
        return EXIT_FAIL
    print(f"{args.mode} k={k}: iteration {summary.iter_time:.6f} s, stall {summary.total_stall:.6f} s, "
          f"peak {summary.peak_mem} B")
    if "verdict" in doc and not doc["verdict"]["passed"]:
        print("plan verification failed")
        return EXIT_FAIL
    return EXIT_OK


def cmd_tune_lr(args) -> int:
    params = {"alpha_base": args.alpha_base, "c": args.c, "q": args.q, "mu": args.mu,
              "iters_base": args.iters_base, "absorb_mu": args.absorb_mu, "k_star": args.k_star}
    inputs = {"network": args.network} if args.network else {}
    run = Run(args, inputs, params)
    q, k_base = args.q, None
    if args.k_star is not None:
        if not args.network:
            raise LrError("--k-star needs --network for k_base")
        k_base = parse_network_spec(args.network).k_base
        q = args.k_star / k_base
    if q is None:
        raise LrError("give --q or --k-star")
    cfg = LrConfig(args.alpha_base, args.c, q, args.mu, args.iters_base)
    alpha = adapted_learning_rate(cfg, absorb_mu=args.absorb_mu)
    doc = {"alpha_star": alpha, "q": q, "residual": contraction_residual(cfg, alpha)}
    if k_base is not None:
        doc["iterations"] = adjust_iterations(args.k_star, k_base, args.iters_base)
    run.write_doc("lr.json", doc)
    print(f"alpha* = {alpha:.8g} (q = {q:g})")
    return EXIT_OK


SWEEP_HEADER = ("k", "mode", "feasible", "iter_time_s", "whole_time_s", "peak_mem_bytes", "stall_s", "pinned")


def _sweep_cell(task):
    net_path, hw_path, model_path, k, mode, budget, epochs, dataset_size = task
    spec, gmap = _load_gmap(net_path)
    hw = parse_hardware_spec(hw_path)
    model = PerfModel.load(model_path)
    cfg = TrainingConfig(epochs, dataset_size, hw.delta_sync)
    pins = ()
    if mode == "dynamic":
        plan = plan_fixed_minibatch(gmap, hw, model, k, cfg, budget)
        if not plan.feasible:
            return (k, mode, "no", "", "", "", "", "")
        pins = plan.pin_set
    try:
        _, s = _simulate(gmap, hw, model, mode, k, pins, budget)
    except SimError:
        return (k, mode, "no", "", "", "", "", "")
    if s.oom:
        return (k, mode, "no", "", "", "", "", "")
    whole = whole_training_time(gmap.phases, k, model, cfg, t_iter=s.iter_time)
    return (k, mode, "yes", repr(s.iter_time), repr(whole), s.peak_mem, repr(s.total_stall), len(pins))


def cmd_sweep(args) -> int:
    ks = sorted({int(x) for part in (args.k_list or []) for x in part.split(",") if x.strip()})
    if not ks:
        raise PlanError("empty minibatch grid")
    if any(k < 1 for k in ks):
        raise PlanError("minibatch sizes must be positive")
    modes = args.modes.split(",")
    bad = set(modes) - set(MODES)
    if bad:
        raise PlanError(f"unknown modes {sorted(bad)}")
    run = Run(args, {"network": args.network, "hardware": args.hardware, "model": args.model},
              {"k": ks, "modes": modes, "budget_bytes": args.budget_bytes, "epochs": args.epochs,
               "dataset_size": args.dataset_size})
    tasks = [(args.network, args.hardware, args.model, k, m, args.budget_bytes, args.epochs, args.dataset_size)
             for k in ks for m in modes]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(_sweep_cell, tasks))
    else:
        rows = [_sweep_cell(t) for t in tasks]
    with open(run.path("sweep.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_HEADER)
        w.writerows(rows)
    run.write_manifest()
    for r in rows:
        print(",".join(str(c) for c in r))
    return EXIT_OK


def cmd_report(args) -> int:
    run = Run(args, {f"summary{i}": p for i, p in enumerate(args.summaries)}, {})
    rows = []
    for p in args.summaries:
        doc = json.loads(Path(p).read_text(encoding="utf-8"))
        s = doc.get("summary")
        if s is None:
            raise SimError(f"{p}: not a simulation summary")
        stalls = [float(x) for x in s["per_phase_stall_s"]]
        worst = max(range(len(stalls)), key=lambda i: (stalls[i], -i)) + 1 if stalls else 0
        rows.append((p, s["mode"], s["k"], s["oom"], s["iter_time_s"], s["total_stall_s"],
                     s["peak_mem_bytes"], worst if stalls and stalls[worst - 1] > 0 else ""))
    with open(run.path("report.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("source", "mode", "k", "oom", "iter_time_s", "total_stall_s", "peak_mem_bytes", "worst_phase"))
        w.writerows(rows)
    run.write_manifest()
    for r in rows:
        print(f"{r[1]:>8} k={r[2]:<5} iter {r[4]} s  stall {r[5]} s  peak {r[6]} B")
    return EXIT_OK


def cmd_pipeline(args) -> int:
    """validate -> fit -> plan -> simulate (dynamic) -> verify."""
    out = Path(args.out_dir)
    base = dict(vars(args))
    steps = [
        ("validate", {"out_dir": str(out / "validate"), "gmap": None}),
        ("fit", {"out_dir": str(out / "fit")}),
        ("plan", {"out_dir": str(out / "plan"), "model": str(out / "fit" / "model.json")}),
        ("simulate", {"out_dir": str(out / "simulate"), "model": str(out / "fit" / "model.json"),
                      "plan": str(out / "plan" / "plan.json"), "mode": "dynamic", "k": None}),
    ]
    for name, over in steps:
        ns = argparse.Namespace(**{**base, **over, "command": name})
        print(f"== {name}")
        code = COMMANDS[name](ns)
        if code != EXIT_OK:
            return code
    return EXIT_OK


def cmd_synth(args) -> int:
    kw = {"seed": args.seed, "num_layers": args.layers, "resnet": args.resnet, "bandwidth": args.bandwidth}
    if args.budget_bytes is not None:
        kw["budget"] = args.budget_bytes
    paths = write_fixture(args.out_dir, **kw)
    for name, p in paths.items():
        print(f"{name}: {p}")
    return EXIT_OK


COMMANDS = {
    "validate": cmd_validate,
    "fit": cmd_fit,
    "plan": cmd_plan,
    "simulate": cmd_simulate,
    "tune-lr": cmd_tune_lr,
    "sweep": cmd_sweep,
    "report": cmd_report,
    "pipeline": cmd_pipeline,
    "synth": cmd_synth,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="swapsched", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, network=True, hardware=False, model=False, out="out"):
        if network:
            sp.add_argument("--network", required=True)
        if hardware:
            sp.add_argument("--hardware", required=hardware == "required")
        if model:
            sp.add_argument("--model", required=True)
        sp.add_argument("--out-dir", default=out)

    def planning(sp):
        sp.add_argument("--budget-bytes", type=int)
        sp.add_argument("--k", type=int, help="fix the minibatch instead of searching")
        sp.add_argument("--step", type=int, default=1, help="coarse search stride")
        sp.add_argument("--epochs", type=int, default=90)
        sp.add_argument("--dataset-size", type=int, default=1_281_167)

    sp = sub.add_parser("validate", help="parse and check network, hardware and profiles")
    common(sp, hardware=True)
    sp.add_argument("--profiles", nargs="*")
    sp.add_argument("--gmap", help="check this op list instead of the one derived from --network")

    sp = sub.add_parser("fit", help="fit throughput curves and bandwidth from profiles")
    common(sp, hardware=True)
    sp.add_argument("--profiles", nargs="+", required=True)
    sp.add_argument("--eta", type=float, default=0.95)

    sp = sub.add_parser("plan", help="choose the minibatch and pinned featuremaps")
    common(sp, hardware="required", model=True)
    planning(sp)

    sp = sub.add_parser("simulate", help="replay one iteration in a given mode")
    common(sp, hardware="required", model=True)
    planning(sp)
    sp.add_argument("--plan")
    sp.add_argument("--mode", choices=MODES, default="dynamic")
    sp.add_argument("--tolerance", type=float, default=0.02)

    sp = sub.add_parser("tune-lr", help="learning rate for a larger minibatch")
    sp.add_argument("--network")
    sp.add_argument("--out-dir", default="out")
    sp.add_argument("--alpha-base", type=float, required=True)
    sp.add_argument("--c", type=float, required=True)
    sp.add_argument("--q", type=float)
    sp.add_argument("--k-star", type=int)
    sp.add_argument("--mu", type=float, default=1.0)
    sp.add_argument("--iters-base", type=int, default=1000)
    sp.add_argument("--absorb-mu", action="store_true")

    sp = sub.add_parser("sweep", help="simulate a minibatch grid in several modes")
    common(sp, hardware="required", model=True)
    sp.add_argument("--k", dest="k_list", action="append", required=True, help="comma-separated, repeatable")
    sp.add_argument("--modes", default="naive,dynamic,resident")
    sp.add_argument("--budget-bytes", type=int)
    sp.add_argument("--epochs", type=int, default=90)
    sp.add_argument("--dataset-size", type=int, default=1_281_167)
    sp.add_argument("--jobs", type=int, default=1)

    sp = sub.add_parser("report", help="tabulate simulation summaries")
    sp.add_argument("summaries", nargs="+")
    sp.add_argument("--out-dir", default="out")

    sp = sub.add_parser("pipeline", help="validate, fit, plan, simulate and verify")
    common(sp, hardware="required")
    sp.add_argument("--profiles", nargs="+", required=True)
    sp.add_argument("--eta", type=float, default=0.95)
    planning(sp)
    sp.add_argument("--tolerance", type=float, default=0.02)

    sp = sub.add_parser("synth", help="write a synthetic network, hardware file and profiles")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--layers", type=int)
    sp.add_argument("--resnet", action="store_true")
    sp.add_argument("--bandwidth", type=float, default=8e9)
    sp.add_argument("--budget-bytes", type=int)
    sp.add_argument("--out-dir", default="out")
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("SWAPSCHED_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except DOMAIN_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except (OSError, json.JSONDecodeError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())

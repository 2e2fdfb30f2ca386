"""Command-line front end.

The run subcommand is driven by a single JSON config (strictly validated,
unknown keys rejected) and writes the full artifact set: train_record.csv,
margin.csv, kappa.csv, bound.json, a network checkpoint, and manifest.json
with a config echo and sha256 per artifact. Artifacts are deterministic
byte for byte given the same config: no timestamps, floats via repr, CSVs
with a fixed header comment, JSON with sorted keys. Configuration
mistakes exit 1, computation failures exit 2, both with a one-line JSON
object on stderr.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import math
import os
import sys

import numpy as np

from . import analytic, margin, network, robust, training
from .data import SYNTHETIC_KINDS, corrupt_labels, gen_synthetic, load_idx, partition


class CliConfigError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliConfigError(message)


def _cfg(fn, *a, **kw):
    # setup-phase wrapper: validation failures are the user's configuration
    try:
        return fn(*a, **kw)
    except ValueError as e:
        raise CliConfigError(str(e))


def _cell(v):
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return v


def _write_csv(out_dir, name, kind, header, rows, written):
    path = os.path.join(out_dir, name)
    with open(path, "w", newline="") as fh:
        fh.write(f"# allmargin {kind} v1\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(v) for v in row])
    written.append(name)


def _write_json(out_dir, name, payload, written):
    path = os.path.join(out_dir, name)
    with open(path, "w") as fh:
        fh.write(json.dumps(payload, sort_keys=True, indent=2) + "\n")
    written.append(name)


def _finish(args, written, config_echo=None):
    out = args.out
    digests = {}
    for name in sorted(written):
        with open(os.path.join(out, name), "rb") as fh:
            digests[name] = hashlib.sha256(fh.read()).hexdigest()
    if config_echo is None:
        # out and threads place the run but never change results; keep them
        # out of the echo so identical experiments hash identically anywhere
        config_echo = {k: v for k, v in sorted(vars(args).items())
                       if k not in ("func", "out", "threads", "config")
                       and not k.startswith("_")}
    payload = {"kind": "allmargin/manifest/v1", "command": args.cmd,
               "config": config_echo, "artifacts": digests}
    if "seed" in config_echo:
        payload["seed"] = config_echo["seed"]
    _write_json(out, "manifest.json", payload, [])


def _read_rows(path):
    with open(path, newline="") as fh:
        first = fh.readline()
        if not first.startswith("# allmargin "):
            fh.seek(0)
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------- run config

_SECTION_KEYS = {
    "dataset": {"kind", "n", "noise", "seed", "corrupt", "val",
                "idx_images", "idx_labels"},
    "network": {"widths", "activation", "init_seed"},
    "train": {"epochs", "batch_size", "lr", "lr_decay_factor",
              "lr_decay_every", "weight_decay", "t", "eta_perturb", "lam",
              "placement", "scaling", "grad_variant", "dropout_p",
              "margin_log_subsample"},
    "attack": {"radius", "steps", "step_size", "restarts", "box_min",
               "box_max"},
    "margin_eval": {"estimator", "limit", "mode", "resolution", "grid_radius"},
    "bound": {"variant", "q", "delta_c", "p"},
}
_TOP_KEYS = {"seed", "method", "dataset", "network", "train", "attack",
             "margin_eval", "bound"}
_RUN_METHODS = training.METHODS + robust.ROBUST_METHODS


def _check_keys(doc, allowed, where):
    unknown = sorted(set(doc) - allowed)
    if unknown:
        raise CliConfigError(f"unknown {where} key(s): {', '.join(unknown)}")


def _load_run_config(path, seed_override):
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as e:
        raise CliConfigError(f"cannot read config: {e}")
    except json.JSONDecodeError as e:
        raise CliConfigError(f"config is not valid JSON: {e}")
    if not isinstance(doc, dict):
        raise CliConfigError("config must be a JSON object")
    _check_keys(doc, _TOP_KEYS, "top-level")
    for section, keys in _SECTION_KEYS.items():
        sub = doc.get(section)
        if sub is None:
            continue
        if not isinstance(sub, dict):
            raise CliConfigError(f"config section {section!r} must be an object")
        _check_keys(sub, keys, section)
    if seed_override is not None:
        doc["seed"] = seed_override
    doc.setdefault("seed", 0)
    doc.setdefault("method", "sgd")
    if doc["method"] not in _RUN_METHODS:
        raise CliConfigError(f"unknown method {doc['method']!r}")
    return doc


def _run_dataset(doc):
    ds_doc = dict(doc.get("dataset") or {})
    if ds_doc.get("idx_images"):
        if not ds_doc.get("idx_labels"):
            raise CliConfigError("dataset.idx_images needs dataset.idx_labels")
        ds = _cfg(load_idx, ds_doc["idx_images"], ds_doc["idx_labels"],
                  limit=ds_doc.get("n"))
        resolved = {"idx_images": ds_doc["idx_images"],
                    "idx_labels": ds_doc["idx_labels"],
                    "n": len(ds)}
    else:
        resolved = {"kind": ds_doc.get("kind", "two-gaussians"),
                    "n": ds_doc.get("n", 200),
                    "noise": ds_doc.get("noise", 0.08),
                    "seed": ds_doc.get("seed", 0)}
        ds = _cfg(gen_synthetic, resolved["kind"], resolved["n"],
                  noise=resolved["noise"], seed=resolved["seed"])
    resolved["corrupt"] = ds_doc.get("corrupt", 0.0)
    resolved["val"] = ds_doc.get("val", 0)
    if resolved["corrupt"] > 0:
        ds = _cfg(corrupt_labels, ds, resolved["corrupt"],
                  seed=ds_doc.get("seed", 0))
    if resolved["val"] > 0:
        train_ds, val_ds = _cfg(partition, ds, len(ds) - resolved["val"],
                                seed=ds_doc.get("seed", 0))
        return train_ds, val_ds, resolved
    return ds, None, resolved


def _estimator_call(net, x, y, spec):
    kind = spec.get("estimator", "auto")
    if kind == "analytic":
        return analytic.margin_lower_bound(net, x, y)
    if kind == "brute":
        grid = margin.GridSpec(resolution=spec.get("resolution", 0.1),
                               radius=spec.get("grid_radius", 1.5))
        return margin.brute_force_margin(net, x, y, grid=grid,
                                         mode=spec.get("mode", "pre-scale"))
    cfg = margin.SolverConfig(seed=spec.get("_seed", 0),
                              use_exact_linear=kind == "auto")
    return margin.estimate_margin(net, x, y, mode=spec.get("mode", "pre-scale"),
                                  cfg=cfg)


def _cmd_run(args):
    doc = _load_run_config(args.config, args.seed)
    seed = int(doc["seed"])
    train_ds, val_ds, ds_echo = _run_dataset(doc)
    net_doc = dict(doc.get("network") or {})
    net_echo = {"widths": list(net_doc.get("widths", [2, 16, 2])),
                "activation": net_doc.get("activation", "tanh"),
                "init_seed": net_doc.get("init_seed", seed)}
    net = _cfg(network.init_network, net_echo["widths"],
               net_echo["activation"], net_echo["init_seed"])
    tcfg = _cfg(training.TrainConfig, seed=seed, **(doc.get("train") or {}))
    method = doc["method"]
    # echo resolved values, defaults included, so the manifest records the
    # experiment actually executed rather than the keys the user typed
    echo = {"seed": seed, "method": method, "dataset": ds_echo,
            "network": net_echo, "train": dataclasses.asdict(tcfg)}
    if method in training.METHODS:
        result = training.train(net, train_ds, method, tcfg, val=val_ds)
    else:
        atk_doc = doc.get("attack")
        if not atk_doc:
            raise CliConfigError(f"method {method!r} needs an attack section")
        spec = _cfg(robust.AttackSpec, seed=seed, **atk_doc)
        echo["attack"] = dataclasses.asdict(spec)
        result = robust.train_robust(net, train_ds, method, spec, tcfg,
                                     val=val_ds)
    trained = result.network
    written = []
    _write_csv(args.out, "train_record.csv", "train-record",
               ["epoch", "split", "error", "loss", "mean_margin"],
               [(r.epoch, r.split, r.error, r.loss, r.mean_margin)
                for r in result.records], written)
    network.save_network(trained, os.path.join(args.out, "network.json"))
    written.append("network.json")

    user_meval = dict(doc.get("margin_eval") or {})
    meval = {"estimator": user_meval.get("estimator", "auto"),
             "limit": user_meval.get("limit"),
             "mode": user_meval.get("mode", "pre-scale"),
             "resolution": user_meval.get("resolution", 0.1),
             "grid_radius": user_meval.get("grid_radius", 1.5)}
    echo["margin_eval"] = dict(meval)
    meval["_seed"] = seed
    limit = meval.get("limit")
    count = len(train_ds) if limit is None else min(limit, len(train_ds))
    margin_rows, margins = [], []
    for i in range(count):
        x, y = train_ds.inputs[i], int(train_ds.labels[i])
        res = _estimator_call(trained, x, y, meval)
        gamma = network.forward_trace(trained, x, y).gamma
        margins.append(res.value)
        margin_rows.append((i, res.kind, res.value, gamma, res.iterations))
    _write_csv(args.out, "margin.csv", "margin",
               ["example_id", "kind", "value", "gamma", "iterations"],
               margin_rows, written)

    kappa_rows = []
    if trained.activation != "relu":
        for i in range(count):
            x, y = train_ds.inputs[i], int(train_ds.labels[i])
            if network.forward_trace(trained, x, y).gamma <= 0.0:
                continue
            row = analytic.kappa_nn(trained, x, y).kappa_nn
            kappa_rows.extend((i, j + 1, float(v)) for j, v in enumerate(row))
    _write_csv(args.out, "kappa.csv", "kappa",
               ["example_id", "layer", "value"], kappa_rows, written)

    user_bnd = dict(doc.get("bound") or {})
    bnd = {"variant": user_bnd.get("variant", "simple"),
           "q": user_bnd.get("q", 2), "delta_c": user_bnd.get("delta_c", 0.01),
           "p": user_bnd.get("p", 2.0)}
    echo["bound"] = dict(bnd)
    variant = bnd["variant"]
    comp = analytic.complexity_report(trained)
    if variant in ("simple", "compl"):
        report = analytic.bound_report(
            count, bnd["q"], bnd["delta_c"], variant=variant,
            margins=margins, complexities=comp.complexities, p=bnd["p"])
    else:
        kap = analytic.dataset_kappa_nn(trained, train_ds.inputs[:count],
                                        train_ds.labels[:count])
        report = analytic.bound_report(
            count, bnd["q"], bnd["delta_c"], variant=variant,
            kappa=kap, layer_a=comp.a)
    payload = {"kind": "allmargin/bound/v1"}
    payload.update(report.to_dict())
    _write_json(args.out, "bound.json", payload, written)
    _finish(args, written, config_echo=echo)


# ------------------------------------------------------- flag-driven commands

def _dataset_from_flags(args):
    if getattr(args, "idx_images", None):
        if not getattr(args, "idx_labels", None):
            raise CliConfigError("--idx-images needs --idx-labels")
        ds = _cfg(load_idx, args.idx_images, args.idx_labels, limit=args.n)
    else:
        ds = _cfg(gen_synthetic, args.data, args.n, noise=args.noise,
                  seed=args.data_seed)
    if args.corrupt > 0:
        ds = _cfg(corrupt_labels, ds, args.corrupt, seed=args.data_seed)
    return ds


def _estimate(args, net, x, y):
    spec = {"estimator": args.estimator, "mode": args.mode,
            "resolution": args.resolution, "grid_radius": args.grid_radius,
            "_seed": args.seed}
    return _estimator_call(net, x, y, spec)


def _cmd_margin(args):
    net = _cfg(network.load_network, args.network)
    ds = _dataset_from_flags(args)
    rows = []
    for i in range(len(ds)):
        x, y = ds.inputs[i], int(ds.labels[i])
        res = _estimate(args, net, x, y)
        gamma = network.forward_trace(net, x, y).gamma
        rows.append((i, res.kind, res.value, gamma, res.iterations))
    written = []
    _write_csv(args.out, "margin.csv", "margin",
               ["example_id", "kind", "value", "gamma", "iterations"],
               rows, written)
    _finish(args, written)


def _cmd_attack(args):
    net = _cfg(network.load_network, args.network)
    ds = _dataset_from_flags(args)
    radius = robust.pixel_radius(args.radius_px) if args.radius_px is not None \
        else args.radius
    if radius is None:
        raise CliConfigError("give --radius or --radius-px")
    spec = _cfg(robust.AttackSpec.evaluation, radius, steps=args.steps,
                restarts=args.restarts, box_min=args.box_min,
                box_max=args.box_max, seed=args.seed)
    clean, _ = training.evaluate(net, ds.inputs, ds.labels)
    rob = robust.robust_error(net, ds.inputs, ds.labels, spec)
    written = []
    _write_json(args.out, "attack.json", {
        "kind": "allmargin/attack/v1", "n": len(ds), "radius": radius,
        "steps": spec.steps, "restarts": spec.restarts,
        "clean_error": clean, "robust_error": rob,
    }, written)
    _finish(args, written)


def _cmd_bound(args):
    net = _cfg(network.load_network, args.network)
    ds = _dataset_from_flags(args)
    written = []
    n = len(ds)
    comp = analytic.complexity_report(net)
    if args.variant in ("simple", "compl"):
        rows, margins = [], []
        for i in range(n):
            x, y = ds.inputs[i], int(ds.labels[i])
            res = _estimate(args, net, x, y)
            gamma = network.forward_trace(net, x, y).gamma
            margins.append(res.value)
            rows.append((i, res.kind, res.value, gamma, res.iterations))
        _write_csv(args.out, "margin.csv", "margin",
                   ["example_id", "kind", "value", "gamma", "iterations"],
                   rows, written)
        report = analytic.bound_report(
            n, args.q, args.delta_c, variant=args.variant, margins=margins,
            complexities=comp.complexities, p=args.p)
    else:
        if args.variant == "adv-nn":
            if args.radius is None:
                raise CliConfigError("--radius is required for adv-nn")
            spec = _cfg(robust.AttackSpec, args.radius, steps=args.steps,
                        seed=args.seed)
            kap = np.stack([
                analytic.kappa_adv(net, ds.inputs[i], int(ds.labels[i]), spec)
                for i in range(n)])
        else:
            kap = analytic.dataset_kappa_nn(net, ds.inputs, ds.labels)
        _write_csv(args.out, "kappa.csv", "kappa",
                   ["example_id", "layer", "value"],
                   [(i, j + 1, float(kap[i, j]))
                    for i in range(n) for j in range(kap.shape[1])], written)
        report = analytic.bound_report(
            n, args.q, args.delta_c, variant=args.variant, kappa=kap,
            layer_a=comp.a)
    payload = {"kind": "allmargin/bound/v1"}
    payload.update(report.to_dict())
    if args.variant == "adv-nn":
        payload["kappa_adv_search"] = "pgd-under-estimate"
    _write_json(args.out, "bound.json", payload, written)
    _finish(args, written)


def _cmd_plot_data(args):
    rows = []
    if args.what == "margin-histogram":
        vals = [float(r["value"]) for path in args.inputs
                for r in _read_rows(path)]
        finite = [v for v in vals if math.isfinite(v)]
        if finite:
            edges = np.linspace(0.0, max(max(finite), 1e-12), args.bins + 1)
            counts, _ = np.histogram(finite, bins=edges)
            centers = (edges[:-1] + edges[1:]) / 2.0
            rows = [("margin", float(c), int(k))
                    for c, k in zip(centers, counts)]
    elif args.what == "error-curve":
        for path in args.inputs:
            stem = os.path.basename(os.path.dirname(os.path.abspath(path))) \
                or "run"
            for r in _read_rows(path):
                rows.append((f"{stem}:{r['split']}", int(r["epoch"]),
                             float(r["error"])))
    else:
        for path in args.inputs:
            with open(path) as fh:
                payload = json.load(fh)
            rows.append((payload["variant"], int(payload["n"]),
                         float(payload["total"])))
        rows.sort(key=lambda r: (r[0], r[1]))
    written = []
    _write_csv(args.out, f"plot_{args.what.replace('-', '_')}.csv",
               "plot-data", ["series", "x", "y"], rows, written)
    _finish(args, written)


def _cmd_gradcheck(args):
    from .autodiff import finite_diff_check
    acts = ("tanh", "softplus", "relu")
    trials = []
    passed = True
    for trial in range(args.trials):
        act = acts[trial % len(acts)]
        widths = [3, 5, 2] if trial % 2 == 0 else [4, 6, 1]
        net = network.init_network(widths, act, seed=args.seed + trial)
        rng = np.random.default_rng(np.random.SeedSequence([args.seed, trial]))
        x = rng.standard_normal(widths[0])
        y = 1 if widths[-1] == 1 else int(rng.integers(widths[-1]))
        graph, _ = network.build_network_graph(net, y, head="loss")
        report = finite_diff_check(graph, [x] + list(net.weights))
        ok = bool(report.max_rel_error < 1e-5 or report.flagged)
        passed = passed and ok
        trials.append({"activation": act, "widths": widths,
                       "max_rel_error": float(report.max_rel_error),
                       "nonsmooth_flagged": bool(report.flagged), "ok": ok})
    print(json.dumps({"passed": passed, "trials": trials}, sort_keys=True))
    return 0 if passed else 2


def _add_dataset_flags(p):
    p.add_argument("--data", choices=SYNTHETIC_KINDS, default="two-moons")
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--noise", type=float, default=0.08)
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--corrupt", type=float, default=0.0)
    p.add_argument("--idx-images")
    p.add_argument("--idx-labels")


def _add_out(p):
    p.add_argument("--out", required=True)
    p.add_argument("--threads", type=int, default=None)


def build_parser():
    top = _Parser(prog="allmargin",
                  description="margins, bounds, and training for small nets")
    sub = top.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("run", help="one experiment from a JSON config")
    p.add_argument("--config", required=True)
    _add_out(p)
    p.add_argument("--seed", type=int, default=None,
                   help="override the config seed")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("margin", help="per-example margins to margin.csv")
    _add_dataset_flags(p)
    _add_out(p)
    p.add_argument("--network", required=True)
    p.add_argument("--estimator", choices=("auto", "pga", "brute", "analytic"),
                   default="auto")
    p.add_argument("--mode", choices=network.MODES, default="pre-scale")
    p.add_argument("--resolution", type=float, default=0.1)
    p.add_argument("--grid-radius", type=float, default=1.5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_margin)

    p = sub.add_parser("attack", help="clean and robust error under PGD")
    _add_dataset_flags(p)
    _add_out(p)
    p.add_argument("--network", required=True)
    p.add_argument("--radius", type=float, default=None)
    p.add_argument("--radius-px", type=float, default=None)
    p.add_argument("--steps", type=int, default=20)
    p.add_argument("--restarts", type=int, default=3)
    p.add_argument("--box-min", type=float, default=-1.0)
    p.add_argument("--box-max", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_attack)

    p = sub.add_parser("bound", help="evaluate a generalization bound")
    _add_dataset_flags(p)
    _add_out(p)
    p.add_argument("--network", required=True)
    p.add_argument("--variant", choices=analytic.BOUND_VARIANTS,
                   default="simple")
    p.add_argument("--q", type=int, default=2)
    p.add_argument("--delta-c", type=float, default=0.01)
    p.add_argument("--p", type=float, default=2.0)
    p.add_argument("--estimator", choices=("auto", "pga", "brute", "analytic"),
                   default="auto")
    p.add_argument("--mode", choices=network.MODES, default="pre-scale")
    p.add_argument("--resolution", type=float, default=0.1)
    p.add_argument("--grid-radius", type=float, default=1.5)
    p.add_argument("--radius", type=float, default=None)
    p.add_argument("--steps", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_bound)

    p = sub.add_parser("plot-data", help="tidy series/x/y tables for figures")
    p.add_argument("--what",
                   choices=("margin-histogram", "error-curve", "bound-vs-n"),
                   required=True)
    p.add_argument("--inputs", nargs="+", required=True)
    p.add_argument("--bins", type=int, default=10)
    _add_out(p)
    p.set_defaults(func=_cmd_plot_data)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=6)
    p.set_defaults(func=_cmd_gradcheck)
    return top


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        if getattr(args, "threads", None) is not None:
            os.environ["ALLMARGIN_THREADS"] = str(args.threads)
        if getattr(args, "out", None):
            os.makedirs(args.out, exist_ok=True)
        code = args.func(args)
        return 0 if code is None else code
    except CliConfigError as e:
        sys.stderr.write(json.dumps(
            {"error": "config", "message": str(e)}) + "\n")
        return 1
    except Exception as e:
        sys.stderr.write(json.dumps(
            {"error": "runtime", "message": f"{type(e).__name__}: {e}"}) + "\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())

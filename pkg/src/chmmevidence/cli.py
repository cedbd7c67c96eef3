"""Command-line entry point.

Subcommands cover the full pipeline: ``simulate`` writes data files,
``oracle`` prints the exact log marginal likelihood, ``mcmc`` fits the
parameter proposal, ``evidence``/``rank`` estimate model evidence,
``compare`` runs the fixed-parameter method study, and ``smooth`` emits
per-bird infection probabilities.  A JSON config file can pre-set any
flag (command-line values win); every command takes a master seed and
reruns are byte-identical for a fixed seed regardless of --threads.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import io
from . import _kernels as _k
from ._rng import spawn_generators
from .core import ZeroSupportError, log_sum_exp
from .evidence import (EvidenceConfig, bayes_factor_table, compare_methods,
                       estimate_evidence, format_comparison)
from .exact import (DEFAULT_BUDGET, FilterBudgetError, exact_smoothing_marginals,
                    joint_forward_filter)
from .iffbs import generate_guiding_samples, initial_trajectory
from .mcmc import DefenseMixture, fit_defense_mixture, mcmc_joint
from .proposals import miffbs_propose
from .sir import ModelVariant, SirModel, SirParams, untransform
from .simulate import get_design, preset_designs, simulate_experiment, ExperimentDesign, PenSpec


def _add_common(p, seed_default=0):
    p.add_argument("--seed", type=int, default=seed_default,
                   help="master seed (default %d)" % seed_default)
    p.add_argument("--config", help="JSON config file; flags override it")


def _threads_default() -> int:
    env = os.environ.get("CHMM_THREADS")
    return int(env) if env else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="chmm-evidence",
                                description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("simulate", help="simulate a design to data files")
    sp.add_argument("--design", help="preset name (%s)" % ", ".join(sorted(preset_designs())))
    sp.add_argument("--design-json", help="custom design as JSON")
    sp.add_argument("--model", type=int, default=16)
    sp.add_argument("--params", help="parameter JSON (default: benchmark point)")
    sp.add_argument("--moribund-prob", type=float, default=None)
    sp.add_argument("--steps", type=int, default=None)
    sp.add_argument("--out-prefix", required=True)
    sp.add_argument("--json", action="store_true", help="also write JSON envelopes")
    sp.add_argument("--seed", type=int, required=True, help="master seed")
    sp.add_argument("--config", help="JSON config file; flags override it")

    sp = sub.add_parser("oracle", help="exact log marginal likelihood")
    _data_or_design(sp)
    sp.add_argument("--model", type=int, default=16)
    sp.add_argument("--params", help="parameter JSON")
    sp.add_argument("--budget", type=int, default=DEFAULT_BUDGET,
                    help="max joint states per pen (default %d)" % DEFAULT_BUDGET)
    sp.add_argument("--out")
    _add_common(sp)

    sp = sub.add_parser("mcmc", help="fit the parameter proposal by MCMC")
    sp.add_argument("--data", required=True)
    sp.add_argument("--model", type=int, required=True)
    sp.add_argument("--iters", type=int, default=10000)
    sp.add_argument("--mixture-weight", type=float, default=0.95)
    sp.add_argument("--mixture-df", type=float, default=None,
                    help="Student-t component with this df (default: Gaussian)")
    sp.add_argument("--out-prefix", required=True)
    _add_common(sp)

    sp = sub.add_parser("evidence", help="evidence estimate for one model")
    sp.add_argument("--data", required=True)
    sp.add_argument("--model", type=int, required=True)
    _evidence_opts(sp)
    sp.add_argument("--mixture", help="mixture JSON from `mcmc` (fit if absent)")
    sp.add_argument("--dump-guiding", metavar="CSV",
                    help="debug: write one guiding ensemble (drawn at the "
                         "mixture center) to this file")
    sp.add_argument("--out")
    _add_common(sp)

    sp = sub.add_parser("rank", help="evidence for all models plus rankings")
    sp.add_argument("--data", required=True)
    sp.add_argument("--models", default="1-16",
                    help="comma list / ranges, e.g. 1,3,5-8 (default 1-16)")
    _evidence_opts(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--diagnostics", help="write per-model diagnostics JSON here")
    _add_common(sp)

    sp = sub.add_parser("compare", help="fixed-parameter method comparison")
    _data_or_design(sp)
    sp.add_argument("--model", type=int, default=16)
    sp.add_argument("--params", help="parameter JSON (default: benchmark point)")
    sp.add_argument("--methods", default="ff,diffbs,miffbs,pf")
    sp.add_argument("--budget-estimates", type=int, default=100)
    sp.add_argument("--budget-seconds", type=float)
    sp.add_argument("--particles", type=int, default=5000)
    sp.add_argument("--guiding", type=int, default=100)
    sp.add_argument("--replicates", type=int, default=100,
                    help="inner replicates per direct-proposal estimate")
    sp.add_argument("--ff-budget", type=int, default=DEFAULT_BUDGET)
    sp.add_argument("--threads", type=int, default=_threads_default())
    sp.add_argument("--out")
    _add_common(sp)

    sp = sub.add_parser("smooth", help="per-bird infection probabilities")
    sp.add_argument("--data", required=True)
    sp.add_argument("--model", type=int, default=16)
    sp.add_argument("--params", help="parameter JSON", required=True)
    sp.add_argument("--method", choices=["exact", "miffbs"], default="exact")
    sp.add_argument("--draws", type=int, default=200)
    sp.add_argument("--guiding", type=int, default=200)
    sp.add_argument("--budget", type=int, default=DEFAULT_BUDGET)
    sp.add_argument("--out", required=True)
    _add_common(sp)
    return p


def _data_or_design(sp):
    sp.add_argument("--data", help="observation CSV")
    sp.add_argument("--design", help="preset design simulated on the fly")
    sp.add_argument("--moribund-prob", type=float, default=None)


def _evidence_opts(sp):
    sp.add_argument("--n-theta", type=int, default=500)
    sp.add_argument("--l-inner", type=int, default=None)
    sp.add_argument("--guiding", type=int, default=1000)
    sp.add_argument("--regen", type=float, default=None,
                    help="ESS regeneration threshold (default guiding/2)")
    sp.add_argument("--proposal", choices=["miffbs", "diffbs"], default="miffbs")
    sp.add_argument("--mcmc-iters", type=int, default=10000)
    sp.add_argument("--mixture-weight", type=float, default=0.95)
    sp.add_argument("--mixture-df", type=float, default=None,
                    help="Student-t component with this df (default: Gaussian)")
    sp.add_argument("--diffbs-fresh-ref", action="store_true",
                    help="new reference realization per inner replicate")
    sp.add_argument("--threads", type=int, default=_threads_default())


def _apply_config(parser, argv):
    """Config-file values become parser defaults; explicit flags still win."""
    if "--config" not in argv:
        return argv
    idx = argv.index("--config")
    cfg = io.read_json(argv[idx + 1])
    command = argv[0]
    merged = {}
    merged.update(cfg.get("global", {}))
    merged.update(cfg.get(command, {}))
    for action in parser._subparsers._group_actions:
        if command in action.choices:
            sub = action.choices[command]
            known = {a.dest for a in sub._actions}
            supplied = {k.replace("-", "_"): v for k, v in merged.items()
                        if k.replace("-", "_") in known}
            sub.set_defaults(**supplied)
            for a in sub._actions:
                if a.dest in supplied:
                    a.required = False
    return argv


def _load_model_and_data(args):
    variant = ModelVariant.from_model_number(args.model)
    params = io.load_params_arg(getattr(args, "params", None), variant)
    if getattr(args, "data", None):
        y, chickens = io.read_observations_csv(args.data)
        model = SirModel(chickens, y.n_steps, variant)
        return model, params, y
    if getattr(args, "design", None):
        design = get_design(args.design)
        if getattr(args, "moribund_prob", None) is not None:
            design = ExperimentDesign(design.pens, design.n_steps, args.moribund_prob)
        sim = simulate_experiment(design, params, variant,
                                  np.random.default_rng(
                                      np.random.SeedSequence([args.seed, 0xDA7A])))
        return sim.model(variant), params, sim.observations
    raise ValueError("need --data or --design")


def _parse_models(expr: str):
    out = []
    for part in expr.split(","):
        part = part.strip()
        if "-" in part:
            lo, hi = part.split("-")
            out.extend(range(int(lo), int(hi) + 1))
        elif part:
            out.append(int(part))
    if not out or any(m < 1 or m > 16 for m in out):
        raise ValueError("model numbers must lie in 1..16")
    return sorted(set(out))


def cmd_simulate(args) -> int:
    if args.design_json:
        d = io.read_json(args.design_json)
        design = ExperimentDesign(
            tuple(PenSpec(p["size"], p["n_challenge"], bool(p["challenge_transgenic"]),
                          bool(p["contact_transgenic"])) for p in d["pens"]),
            d.get("n_steps", 20), d.get("moribund_prob", 0.5))
    elif args.design:
        design = get_design(args.design)
    else:
        raise ValueError("need --design or --design-json")
    if args.moribund_prob is not None or args.steps is not None:
        design = ExperimentDesign(
            design.pens,
            args.steps if args.steps is not None else design.n_steps,
            args.moribund_prob if args.moribund_prob is not None else design.moribund_prob)
    variant = ModelVariant.from_model_number(args.model)
    params = io.load_params_arg(args.params, variant)
    sim = simulate_experiment(design, params, variant,
                              np.random.default_rng(np.random.SeedSequence(args.seed)))
    io.write_observations_csv(args.out_prefix + "_obs.csv", sim.observations, sim.chickens)
    io.write_truth_csv(args.out_prefix + "_truth.csv", sim.truth, sim.chickens)
    if args.json:
        io.write_json(args.out_prefix + "_obs.json",
                      io.grid_envelope(sim.observations, ["A", "D", "M"], "observations"))
        io.write_json(args.out_prefix + "_truth.json",
                      io.grid_envelope(sim.truth, ["S", "I", "R"], "hidden-states"))
    print(json.dumps({"written": args.out_prefix + "_{obs,truth}.csv",
                      "chickens": len(sim.chickens), "steps": design.n_steps}))
    return 0


def cmd_oracle(args) -> int:
    model, params, y = _load_model_and_data(args)
    total, pens = joint_forward_filter(model, params, y, budget=args.budget,
                                       per_pen=True)
    out = {"per_pen": pens, "total": total, "model": args.model}
    text = json.dumps(out, indent=2, sort_keys=True)
    print(text)
    if args.out:
        io.atomic_write_text(args.out, text + "\n")
    return 0


def cmd_mcmc(args) -> int:
    variant = ModelVariant.from_model_number(args.model)
    y, chickens = io.read_observations_csv(args.data)
    model = SirModel(chickens, y.n_steps, variant)
    gen = np.random.default_rng(np.random.SeedSequence(args.seed))
    run = mcmc_joint(model, y, args.iters, gen)
    mixture = fit_defense_mixture(run.z_samples, variant, lam=args.mixture_weight,
                                  df=args.mixture_df)
    io.write_json(args.out_prefix + ".json", {
        "mixture": mixture.to_dict(),
        "accept_rate": run.accept_rate,
        "iters": args.iters,
        "z_samples": run.z_samples.tolist(),
        "free_names": variant.free_param_names(),
    })
    io.write_theta_samples_csv(args.out_prefix + "_samples.csv", run.tied_samples())
    print(json.dumps({"accept_rate": run.accept_rate,
                      "written": args.out_prefix + ".json"}))
    return 0


def cmd_evidence(args) -> int:
    variant = ModelVariant.from_model_number(args.model)
    y, chickens = io.read_observations_csv(args.data)
    model = SirModel(chickens, y.n_steps, variant)
    mixture = None
    if args.mixture:
        mixture = DefenseMixture.from_dict(io.read_json(args.mixture)["mixture"])
    config = EvidenceConfig(n_theta=args.n_theta, l_inner=args.l_inner,
                            n_guiding=args.guiding, regen_threshold=args.regen,
                            proposal=args.proposal, mcmc_iters=args.mcmc_iters,
                            mixture_weight=args.mixture_weight,
                            mixture_df=args.mixture_df,
                            diffbs_fresh_reference=args.diffbs_fresh_ref,
                            threads=args.threads)
    gen = np.random.default_rng(np.random.SeedSequence(args.seed))
    if args.dump_guiding:
        mix = mixture
        if mix is None:
            run = mcmc_joint(model, y, config.mcmc_iters, gen)
            mix = fit_defense_mixture(run.z_samples, variant,
                                      lam=config.mixture_weight,
                                      df=config.mixture_df)
            mixture = mix
        center = SirParams.from_free(untransform(mix.mean, variant), variant)
        cm = model.compile(center, y)
        ens = generate_guiding_samples(initial_trajectory(cm), cm,
                                       config.n_guiding, config.burn_in_sweeps,
                                       gen)
        io.write_guiding_csv(args.dump_guiding, ens)
    est = estimate_evidence(model, y, config, gen, mixture=mixture)
    lo, hi = est.range3()
    out = {"model": est.model_number, "log_ml": est.log_ml, "se_log": est.se_log,
           "lo3": lo, "hi3": hi, "n_theta": est.n_theta, "l_inner": est.l_inner,
           "method": est.method, "diagnostics": est.diagnostics}
    text = json.dumps(out, indent=2, sort_keys=True)
    print(text)
    if args.out:
        io.atomic_write_text(args.out, text + "\n")
    return 0


def cmd_rank(args) -> int:
    y, chickens = io.read_observations_csv(args.data)
    models = _parse_models(args.models)
    estimates = []
    unavailable = []
    diagnostics = {}
    seeds = np.random.SeedSequence(args.seed).spawn(16)
    for m in models:
        variant = ModelVariant.from_model_number(m)
        model = SirModel(chickens, y.n_steps, variant)
        config = EvidenceConfig(n_theta=args.n_theta, l_inner=args.l_inner,
                                n_guiding=args.guiding, regen_threshold=args.regen,
                                proposal=args.proposal, mcmc_iters=args.mcmc_iters,
                                mixture_weight=args.mixture_weight,
                                mixture_df=args.mixture_df,
                                diffbs_fresh_reference=args.diffbs_fresh_ref,
                                threads=args.threads)
        try:
            est = estimate_evidence(model, y, config,
                                    np.random.default_rng(seeds[m - 1]))
        except (ZeroSupportError, RuntimeError) as e:
            # kept in the table as a marked empty row, never dropped silently
            unavailable.append(m)
            diagnostics["model_%d" % m] = {"error": type(e).__name__,
                                           "message": str(e)}
            continue
        estimates.append(est)
        diagnostics["model_%d" % m] = est.diagnostics | {
            "log_ml": est.log_ml, "se_log": est.se_log}
    table = bayes_factor_table(estimates, unavailable=unavailable)
    io.write_rank_csv(args.out, table)
    if args.diagnostics:
        io.write_json(args.diagnostics, diagnostics)
    best = table.best()
    print(json.dumps({"best_model": best.model_number,
                      "best_log_ml": best.log_ml, "written": args.out}))
    return 0


def cmd_compare(args) -> int:
    model, params, y = _load_model_and_data(args)
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    gen = np.random.default_rng(np.random.SeedSequence([args.seed, 0xC03B]))
    reports = compare_methods(model, params, y, gen, methods=methods,
                              budget_estimates=args.budget_estimates,
                              budget_seconds=args.budget_seconds,
                              n_particles=args.particles,
                              n_guiding=args.guiding,
                              diffbs_replicates=args.replicates,
                              ff_budget=args.ff_budget, threads=args.threads)
    print(format_comparison(reports))
    if args.out:
        io.write_compare_csv(args.out, reports)
    return 0


def cmd_smooth(args) -> int:
    variant = ModelVariant.from_model_number(args.model)
    params, _ = io.read_params_json(args.params)
    if not params.satisfies(variant):
        raise ValueError("parameters violate model %d ties" % args.model)
    y, chickens = io.read_observations_csv(args.data)
    model = SirModel(chickens, y.n_steps, variant)
    if args.method == "exact":
        marg = exact_smoothing_marginals(model, params, y, budget=args.budget)
    else:
        cm = model.compile(params, y)
        gens = spawn_generators(np.random.SeedSequence(args.seed), args.draws)
        acc = np.zeros((cm.n_chains, cm.n_steps, cm.n_states))
        logw = np.empty(args.draws)
        paths = []
        for i, g in enumerate(gens):
            ens = generate_guiding_samples(initial_trajectory(cm), cm,
                                           args.guiding, 10, g)
            try:
                draw = miffbs_propose(ens, cm, g, args.guiding / 2.0)
                lp = _k._complete_logdens(draw.trajectory.states, *cm.kernel_args())
                logw[i] = lp - draw.log_q
                paths.append(draw.trajectory.states)
            except ZeroSupportError:
                logw[i] = -np.inf
                paths.append(None)
        shift = log_sum_exp(logw)
        for i, path in enumerate(paths):
            if path is None or logw[i] == -np.inf:
                continue
            w = np.exp(logw[i] - shift)
            for k in range(cm.n_chains):
                for t in range(cm.n_steps):
                    acc[k, t, path[k, t]] += w
        marg = acc / np.maximum(acc.sum(axis=2, keepdims=True), 1e-300)
    io.write_smooth_csv(args.out, marg, chickens)
    print(json.dumps({"written": args.out, "method": args.method}))
    return 0


_COMMANDS = {
    "simulate": cmd_simulate,
    "oracle": cmd_oracle,
    "mcmc": cmd_mcmc,
    "evidence": cmd_evidence,
    "rank": cmd_rank,
    "compare": cmd_compare,
    "smooth": cmd_smooth,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    if argv and argv[0] in _COMMANDS:
        argv = _apply_config(parser, argv)
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ValueError, KeyError, OSError, RuntimeError, FilterBudgetError) as e:
        print(json.dumps({"error": type(e).__name__, "message": str(e)}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

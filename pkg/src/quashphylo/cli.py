"""Command-line front end: ``quashphylo {run,summarize,simulate,check}``."""

import argparse
import json
import os
import platform
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import scipy
from scipy import stats

from . import __version__, diagnostics, mcmc, models
from .likelihood import compress_patterns, read_alignment, write_fasta
from .tree import (
    majority_rule_consensus,
    parse_newick,
    root_split_frequencies,
    serialize_newick,
)

THREADS_ENV = "QUASHPHYLO_THREADS"
ROOT_SPLIT_THRESHOLD = 0.01

RUN_DEFAULTS = {
    "model": None,
    "alignment": None,
    "priors": None,
    "iters": 110_000,
    "burnin": 100_000,
    "thin": 100,
    "kc": 4,
    "kd": 4,
    "seed": 1,
    "seeds": None,
    "chains": 1,
    "out": "quashphylo_out",
    "prior_only": False,
}


class ConfigError(Exception):
    pass


def _versions():
    return {
        "quashphylo": __version__,
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "python": platform.python_version(),
    }


def _default_threads():
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer") from None


def _load_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None


def resolve_run_config(args):
    """Merge defaults, the optional ``--config`` file and explicit flags."""
    cfg = dict(RUN_DEFAULTS)
    if args.config:
        file_cfg = _load_json(args.config)
        unknown = set(file_cfg) - set(cfg)
        if unknown:
            raise ConfigError(f"unknown run settings: {sorted(unknown)}")
        cfg.update(file_cfg)
    for key in RUN_DEFAULTS:
        val = getattr(args, key, None)
        if val is not None and val is not False:
            cfg[key] = val
    return validate_run_config(cfg)


def _parse_seeds(seeds):
    if seeds is None:
        return None
    if isinstance(seeds, str):
        try:
            return [int(s) for s in seeds.split(",") if s.strip()]
        except ValueError:
            raise ConfigError(f"bad seed list {seeds!r}") from None
    return [int(s) for s in seeds]


def validate_run_config(cfg):
    if cfg["model"] is None:
        raise ConfigError("a model family is required (--model)")
    try:
        cfg["model"] = models.get_family(cfg["model"]).name
    except ValueError as e:
        raise ConfigError(str(e)) from None
    if not cfg["prior_only"]:
        if cfg["alignment"] is None:
            raise ConfigError("an alignment is required (--alignment)")
        if not Path(cfg["alignment"]).is_file():
            raise ConfigError(f"alignment not found: {cfg['alignment']}")
    if cfg["priors"] is not None and not Path(cfg["priors"]).is_file():
        raise ConfigError(f"prior config not found: {cfg['priors']}")
    for key in ("iters", "thin", "kc", "kd", "chains"):
        if int(cfg[key]) < 1:
            raise ConfigError(f"{key} must be a positive integer")
        cfg[key] = int(cfg[key])
    cfg["burnin"] = int(cfg["burnin"])
    if cfg["burnin"] < 0 or cfg["burnin"] >= cfg["iters"]:
        raise ConfigError("burn-in must be non-negative and shorter than the run")
    if cfg["thin"] > cfg["iters"] - cfg["burnin"]:
        raise ConfigError("thinning interval exceeds the post-burn-in length")
    seeds = _parse_seeds(cfg["seeds"])
    if seeds is None:
        seeds = [int(cfg["seed"]) + i for i in range(cfg["chains"])]
    elif len(seeds) != cfg["chains"]:
        if cfg["chains"] == RUN_DEFAULTS["chains"]:
            cfg["chains"] = len(seeds)
        else:
            raise ConfigError(f"{cfg['chains']} chains but {len(seeds)} seeds")
    cfg["seeds"] = seeds
    return cfg


def _load_inputs(cfg):
    priors = models.PriorConfig.from_json(cfg["priors"]) if cfg["priors"] else models.PriorConfig()
    patterns = names = None
    if not cfg["prior_only"]:
        aln = read_alignment(cfg["alignment"])
        patterns = compress_patterns(aln)
        names = list(aln.names)
    elif cfg["alignment"]:
        names = list(read_alignment(cfg["alignment"]).names)
    else:
        raise ConfigError("prior-only runs still need an alignment for the taxon names")
    return priors, patterns, names


def _run_one(job):
    cfg, priors, patterns, names, index, seed, out = job
    trace = mcmc.run_chain(
        cfg["model"],
        patterns,
        priors=priors,
        iterations=cfg["iters"],
        burn_in=cfg["burnin"],
        thin=cfg["thin"],
        seed=seed,
        kc=cfg["kc"],
        kd=cfg["kd"],
        names=names,
        prior_only=cfg["prior_only"],
        trace_path=out / f"chain{index}.tsv",
        tree_path=out / f"chain{index}.trees",
    )
    return {
        "chain": index,
        "seed": seed,
        "samples": len(trace),
        "acceptance": trace.acceptance_rates(),
        "proposal_scales": trace.sigmas,
    }


def cmd_run(args):
    cfg = resolve_run_config(args)
    try:
        priors, patterns, names = _load_inputs(cfg)
    except (OSError, ValueError) as e:
        raise ConfigError(str(e)) from None
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    threads = args.threads or _default_threads()
    manifest = {
        "command": "run",
        "config": {k: v for k, v in cfg.items()},
        "priors": priors.to_dict(),
        "versions": _versions(),
        "chains": [],
        "complete": False,
    }
    manifest_path = out / "manifest.json"
    _write_json(manifest_path, manifest)
    jobs = [(cfg, priors, patterns, names, i, s, out) for i, s in enumerate(cfg["seeds"])]
    failures = []
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(threads, len(jobs))) as pool:
            futures = [pool.submit(_run_one, j) for j in jobs]
            results = []
            for j, f in zip(jobs, futures):
                try:
                    results.append(f.result())
                except Exception as e:  # recorded in the manifest, reported below
                    failures.append({"chain": j[4], "seed": j[5], "error": str(e)})
    else:
        results = []
        for j in jobs:
            try:
                results.append(_run_one(j))
            except Exception as e:
                failures.append({"chain": j[4], "seed": j[5], "error": str(e)})
    manifest["chains"] = results
    manifest["failed"] = failures
    manifest["complete"] = not failures
    _write_json(manifest_path, manifest)
    for r in results:
        rates = ", ".join(f"{k} {v:.2f}" for k, v in sorted(r["acceptance"].items()))
        print(f"chain {r['chain']} (seed {r['seed']}): {r['samples']} samples; acceptance {rates}")
    for f in failures:
        print(f"chain {f['chain']} (seed {f['seed']}) failed: {f['error']}", file=sys.stderr)
    return 1 if failures else 0


def _write_json(path, data):
    with open(path, "w") as fh:
        json.dump(data, fh, indent=2, default=_json_default)
        fh.write("\n")


def _json_default(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, Path):
        return str(x)
    raise TypeError(f"cannot serialise {type(x).__name__}")


def _trace_files(paths):
    """Expand directories into their ``chain*.tsv`` files; pair each with ``.trees``."""
    files = []
    for p in map(Path, paths):
        if p.is_dir():
            files.extend(sorted(p.glob("chain*.tsv")))
        else:
            files.append(p)
    if not files:
        raise ConfigError("no trace files found")
    pairs = []
    for f in files:
        trees = f.with_suffix(".trees")
        if not f.is_file() or not trees.is_file():
            raise ConfigError(f"missing trace or tree file for {f}")
        pairs.append((f, trees))
    return pairs


def cmd_summarize(args):
    try:
        traces = [mcmc.read_trace(t, n) for t, n in _trace_files(args.traces)]
    except ValueError as e:
        raise ConfigError(str(e)) from None
    families = {t.family for t in traces}
    if len(families) != 1:
        raise ConfigError(f"traces come from different models: {sorted(families)}")
    if len({frozenset(t.names) for t in traces}) != 1:
        raise ConfigError("traces have different leaf sets")
    family = models.get_family(families.pop())
    rooted = not family.stationary
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    skip = args.discard
    chains = [[parse_newick(s, rooted=rooted) for s in t.trees[skip:]] for t in traces]
    if not all(chains):
        raise ConfigError("no samples left after discarding")
    pooled = [tr for c in chains for tr in c]

    cons = majority_rule_consensus(pooled, rooted=rooted)
    (out / "consensus.nwk").write_text(serialize_newick(cons) + "\n")
    series = diagnostics.cumulative_split_frequencies(
        chains, rooted=rooted, iterations=[t.columns["iteration"][skip:] for t in traces]
    )
    diagnostics.write_split_frequencies(series, out / "split_frequencies.csv")
    written = ["consensus.nwk", "split_frequencies.csv"]

    if rooted:
        rows = root_split_frequencies(pooled, threshold=ROOT_SPLIT_THRESHOLD)
        with open(out / "root_splits.csv", "w") as fh:
            fh.write("split,frequency\n")
            for split, freq in rows.items():
                fh.write(f"{'|'.join(sorted(split))},{freq:.4f}\n")
        written.append("root_splits.csv")

    priors = models.PriorConfig.from_json(args.priors) if args.priors else models.PriorConfig()
    prior_pdfs = {
        "alpha": priors.alpha,
        "beta_d": priors.beta_d,
        "rho1": priors.rho,
        "rho2": priors.rho,
    }
    for name, prior in prior_pdfs.items():
        vals = [x for t in traces for x in t.columns[name][skip:] if x is not None]
        if len(vals) < diagnostics.MIN_DENSITY_SAMPLES:
            continue
        pdf = stats.gamma(prior.shape, scale=1.0 / prior.rate).pdf
        table = diagnostics.density_summary(vals, pdf)
        diagnostics.write_density(table, out / f"density_{name}.csv")
        written.append(f"density_{name}.csv")

    if args.alignment:
        aln = read_alignment(args.alignment)
        pooled_trace = _pool_traces(traces, skip)
        pred = diagnostics.posterior_predictive_distribution(
            pooled_trace, aln.n_sites, args.draws, args.seed, args.kc, args.kd, observed=aln
        )
        diagnostics.write_predictive(pred, out / "predictive.csv")
        written.append("predictive.csv")
    for w in written:
        print(out / w)
    return 0


def _pool_traces(traces, skip):
    first = traces[0]
    cols = {k: [x for t in traces for x in t.columns[k][skip:]] for k in first.columns}
    trees = [s for t in traces for s in t.trees[skip:]]
    return mcmc.ChainTrace(first.family, first.names, None, 0, 0, 1, cols, trees)


def _simulation_state(args, tree):
    fam = models.get_family(args.model)
    params = _load_json(args.params) if args.params else {}
    unknown = set(params) - {"rho1", "rho2", "pi", "alpha", "beta_d"}
    if unknown:
        raise ConfigError(f"unknown parameters: {sorted(unknown)}")
    kw = {k: params[k] for k in ("rho1", "rho2", "alpha", "beta_d") if k in params}
    if fam.stationary:
        if "pi" in params:
            kw["pi"] = np.asarray(params["pi"], dtype=float)
    else:
        if all(v in tree.comments for v in range(tree.n_nodes)):
            comps = np.array([diagnostics._parse_pi_comment(tree.comments[v]) for v in range(tree.n_nodes)])
        else:
            pi = np.asarray(params.get("pi", [0.25] * 4), dtype=float)
            comps = np.tile(pi, (tree.n_nodes, 1))
        kw["comps"] = comps
    try:
        return models.ModelState(fam.name, tree, **kw)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid model parameters: {e}") from None


def cmd_simulate(args):
    if args.sites < 1:
        raise ConfigError("number of sites must be at least 1")
    fam = models.get_family(args.model)
    try:
        text = Path(args.tree).read_text()
    except OSError as e:
        raise ConfigError(str(e)) from None
    try:
        tree = parse_newick(text, rooted=not fam.stationary)
    except ValueError as e:
        raise ConfigError(f"invalid tree: {e}") from None
    state = _simulation_state(args, tree)
    try:
        aln = models.simulate(state, args.sites, args.seed, args.kc, args.kd)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    write_fasta(aln, args.out)
    manifest = {
        "command": "simulate",
        "model": fam.name,
        "tree": serialize_newick(tree),
        "sites": args.sites,
        "seed": args.seed,
        "kc": args.kc,
        "kd": args.kd,
        "parameters": {
            "rho1": state.rho1,
            "rho2": state.rho2,
            "alpha": state.alpha,
            "beta_d": state.beta_d,
            "pi": state.pi if fam.stationary else state.comps,
        },
        "versions": _versions(),
    }
    _write_json(Path(str(args.out) + ".json"), manifest)
    print(args.out)
    return 0


def cmd_check(args):
    cfg = resolve_run_config(args)
    try:
        priors, patterns, names = _load_inputs(cfg)
    except (OSError, ValueError) as e:
        raise ConfigError(str(e)) from None
    n_samples = (cfg["iters"] - cfg["burnin"]) // cfg["thin"]
    print(f"model {cfg['model']}; {len(names)} taxa", end="")
    if patterns is not None:
        print(f", {int(patterns.weights.sum())} sites, {patterns.n_patterns} patterns", end="")
    print(f"; {cfg['chains']} chain(s) x {n_samples} samples; seeds {cfg['seeds']}")
    return 0


def _add_run_options(p):
    p.add_argument("--config", help="JSON file of run settings (flags override it)")
    p.add_argument("--model", help="model family: S1, S2, S3, NS1, NS2 or NS3")
    p.add_argument("--alignment", help="FASTA or sequential PHYLIP alignment")
    p.add_argument("--priors", help="JSON prior settings")
    p.add_argument("--iters", type=int, help="total sweeps including burn-in")
    p.add_argument("--burnin", type=int, help="sweeps discarded before sampling")
    p.add_argument("--thin", type=int, help="keep every n-th post-burn-in sweep")
    p.add_argument("--kc", type=int, help="rate categories")
    p.add_argument("--kd", type=int, help="quadratic-coefficient categories")
    p.add_argument("--seed", type=int, help="base seed (chain i uses seed + i)")
    p.add_argument("--seeds", help="comma-separated seed per chain")
    p.add_argument("--chains", type=int, help="number of chains")
    p.add_argument("--out", help="output directory")
    p.add_argument("--prior-only", action="store_true", default=None,
                   help="ignore the data and sample from the prior")
    p.add_argument("--threads", type=int, default=None,
                   help=f"worker processes for chains (default ${THREADS_ENV} or 1)")


def build_parser():
    parser = argparse.ArgumentParser(prog="quashphylo", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run MCMC chains")
    _add_run_options(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("check", help="validate a run configuration and its data")
    _add_run_options(p)
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("summarize", help="consensus tree and tables from traces")
    p.add_argument("traces", nargs="+", help="trace TSV files or run directories")
    p.add_argument("--out", default="summary", help="output directory")
    p.add_argument("--discard", type=int, default=0, help="extra samples dropped per chain")
    p.add_argument("--priors", help="JSON prior settings for density overlays")
    p.add_argument("--alignment", help="observed alignment for posterior predictive checks")
    p.add_argument("--draws", type=int, default=200, help="posterior predictive draws")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--kc", type=int, default=4)
    p.add_argument("--kd", type=int, default=4)
    p.set_defaults(func=cmd_summarize)

    p = sub.add_parser("simulate", help="simulate an alignment on a fixed tree")
    p.add_argument("--model", required=True)
    p.add_argument("--tree", required=True, help="Newick file with branch lengths")
    p.add_argument("--params", help="JSON with rho1, rho2, pi, alpha, beta_d")
    p.add_argument("--sites", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--kc", type=int, default=4)
    p.add_argument("--kd", type=int, default=4)
    p.add_argument("--out", required=True, help="FASTA output path")
    p.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"quashphylo {args.command}: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

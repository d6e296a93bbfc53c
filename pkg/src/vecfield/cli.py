"""Command-line interface: ``vecfield <subcommand> ...``.

Every subcommand writes data to a file or standard output and diagnostics
to standard error. Given the same flags and seed, outputs are byte-identical.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from vecfield.chem import GEOM_ELEMENTS, QM9_ELEMENTS, Molecule, infer_bonds, read_xyz, check_stability
from vecfield.corpus import generate_corpus, read_corpus, corpus_names, write_corpus
from vecfield.diffusion import DiffusionSchedule, oracle_chain, schedule_csv
from vecfield.field import VARIANTS, FieldParams, field_batch, plane_points, slice_csv
from vecfield.metrics import evaluate_corpus, extract_geometry, wasserstein1
from vecfield.provider import (AnalyticProvider, GridProvider, NoiseSpec, SpuriousAttractorProvider,
                               build_grid, wrap_noise)
from vecfield.reconstruct import (GEOM_BUDGET, QM9_BUDGET, SAMPLERS, Box, CountMismatch, ReconstructionConfig,
                                  reconstruct_detailed, reconstruction_report, rmsd)


class CLIError(Exception):
    pass


def default_seed() -> int:
    raw = os.environ.get("VECFIELD_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise CLIError(f"VECFIELD_SEED must be an integer, got {raw!r}") from None


# ---------------------------------------------------------------------------
# Shared flag groups
# ---------------------------------------------------------------------------

def _vec3(text: str) -> np.ndarray:
    try:
        vals = [float(x) for x in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected x,y,z, got {text!r}") from None
    if len(vals) != 3:
        raise argparse.ArgumentTypeError(f"expected three comma-separated numbers, got {text!r}")
    return np.array(vals)


def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _add_field_flags(p: argparse.ArgumentParser):
    g = p.add_argument_group("field")
    g.add_argument("--variant", default="gaussian_clip",
                   help=f"magnitude profile, one of {', '.join(VARIANTS)} (published default gaussian_clip)")
    g.add_argument("--sigma-sf", type=float, default=0.1, help="softmax temperature in Å (published default 0.1)")
    g.add_argument("--sigma-mag", type=float, default=0.45, help="magnitude width in Å (published default 0.45)")
    g.add_argument("--d-clip", type=float, default=0.8, help="clip distance in Å (published default 0.8)")
    g.add_argument("--eps-num", type=float, default=1e-8, help="direction normaliser offset (default 1e-8)")
    g.add_argument("--no-exclusive", dest="exclusive", action="store_false",
                   help="disable repulsive fields for absent element types (published design keeps them on)")
    g.add_argument("--repulsion", choices=("radial", "negated"), default="radial",
                   help="form of the absent-type repulsion (default radial)")
    g.add_argument("--elements", choices=("qm9", "geom"), default="qm9",
                   help="element set: qm9 = C,H,O,N,F; geom adds S,Cl,Br (default qm9)")


def _field_params(args) -> FieldParams:
    if args.variant not in VARIANTS:
        raise CLIError(f"unknown variant {args.variant!r}; valid names: {', '.join(VARIANTS)}")
    return FieldParams(args.variant, args.sigma_sf, args.sigma_mag, args.d_clip, args.eps_num,
                       args.exclusive, args.repulsion)


def _elements(args):
    return QM9_ELEMENTS if args.elements == "qm9" else GEOM_ELEMENTS


def _add_recon_flags(p: argparse.ArgumentParser):
    g = p.add_argument_group("reconstruction")
    g.add_argument("--eta", type=float, default=0.1, help="Euler step size (published default 0.1)")
    g.add_argument("--tau", type=float, default=1e-7, help="convergence threshold on the field norm (default 1e-7)")
    g.add_argument("--t-max", type=int, default=500, help="maximum iterations (published default 500)")
    g.add_argument("--eps-db", type=float, default=0.1, help="DBSCAN radius in Å (published default 0.1)")
    g.add_argument("--n-min", type=int, default=3, help="DBSCAN minimum samples (published default 3)")
    g.add_argument("--budget", choices=("qm9", "geom"), default="qm9",
                   help="per-element particle counts (published defaults: qm9 C/H 200, O/N 30, F 15)")
    g.add_argument("--uniform", dest="adaptive", action="store_false",
                   help="start particles uniformly instead of adaptive pool selection")
    g.add_argument("--sampler", choices=SAMPLERS, default="halton",
                   help="unit-cube point generator for starts and pools (default halton)")
    g.add_argument("--pool-multiplier", type=int, default=4, help="adaptive candidate pool size factor (default 4)")
    g.add_argument("--knn-k", type=int, default=8, help="neighbours in the adaptive score (default 8)")
    g.add_argument("--rho", type=float, default=1.5, help="bond tolerance factor (published default 1.5)")
    g.add_argument("--padding", type=float, default=2.0, help="bounding box padding in Å (default 2.0)")


def _recon_config(args) -> ReconstructionConfig:
    return ReconstructionConfig(
        eta=args.eta, tau=args.tau, t_max=args.t_max, eps_db=args.eps_db, n_min=args.n_min,
        query_budget=dict(QM9_BUDGET if args.budget == "qm9" else GEOM_BUDGET),
        adaptive=args.adaptive, sampler=args.sampler, pool_multiplier=args.pool_multiplier,
        knn_k=args.knn_k, rho=args.rho, padding=args.padding,
    )


def _write(text: str, out: str | None):
    if out is None or out == "-":
        sys.stdout.write(text)
    else:
        Path(out).write_text(text)


def _load_corpus(directory) -> tuple[list[str], list[Molecule]]:
    path = Path(directory)
    if not path.is_dir():
        raise CLIError(f"corpus directory {directory} not found")
    names = corpus_names(path)
    if not names:
        raise CLIError(f"corpus directory {directory} contains no .xyz files")
    return names, read_corpus(path)


# ---------------------------------------------------------------------------
# Per-molecule work (top level so process pools can pickle it)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ProviderSpec:
    kind: str
    grid_size: int = 5
    spacing: float = 3.0
    sigma_noise: float = 0.0

    @classmethod
    def parse(cls, text: str) -> "ProviderSpec":
        parts = text.split(":")
        try:
            if parts[0] == "analytic" and len(parts) == 1:
                return cls("analytic")
            if parts[0] == "spurious" and len(parts) == 1:
                return cls("spurious")
            if parts[0] == "grid" and len(parts) == 3:
                return cls("grid", grid_size=int(parts[1]), spacing=float(parts[2]))
            if parts[0] == "noisy" and len(parts) == 2:
                return cls("noisy", sigma_noise=float(parts[1]))
        except ValueError:
            pass
        raise CLIError(f"bad provider {text!r}; use analytic, spurious, grid:L:spacing or noisy:sigma")

    def label(self) -> str:
        if self.kind == "grid":
            return f"grid:{self.grid_size}:{self.spacing!r}"
        if self.kind == "noisy":
            return f"noisy:{self.sigma_noise!r}"
        return self.kind

    def build(self, mol: Molecule, params: FieldParams, elements, seed: int):
        if self.kind == "analytic":
            return AnalyticProvider(mol, params, elements)
        if self.kind == "grid":
            return GridProvider(build_grid(mol, self.grid_size, self.spacing, params, elements))
        if self.kind == "noisy":
            return wrap_noise(AnalyticProvider(mol, params, elements), NoiseSpec(self.sigma_noise, seed))
        return SpuriousAttractorProvider(mol, params, elements, seed=seed)


@dataclass(frozen=True)
class Job:
    name: str
    mol: Molecule
    provider: ProviderSpec
    params: FieldParams
    elements: tuple
    cfg: ReconstructionConfig
    seed: int
    timing: bool


def _run_job(job: Job) -> tuple[dict, Molecule]:
    provider = job.provider.build(job.mol, job.params, job.elements, job.seed)
    result = reconstruct_detailed(provider, job.cfg, Box.around(job.mol, job.cfg.padding), job.seed)
    rep = {"name": job.name}
    rep.update(reconstruction_report(job.mol, result, job.cfg, include_timing=job.timing))
    rep["spurious_atoms"] = sum(1 for e in result.molecule.elements if e not in job.mol.elements)
    return rep, result.molecule


def _run_jobs(jobs: list[Job], workers: int) -> list[tuple[dict, Molecule]]:
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(workers) as pool:
            return list(pool.map(_run_job, jobs, chunksize=1))
    return [_run_job(j) for j in jobs]


def _summary(rows: list[dict]) -> dict:
    ok = [r["rmsd"] for r in rows if r["success"]]
    return {
        "n_molecules": len(rows),
        "success_rate": 100.0 * len(ok) / len(rows),
        "mean_rmsd": float(np.mean(ok)) if ok else None,
        "spurious_atoms": int(sum(r["spurious_atoms"] for r in rows)),
    }


def _roundtrip(names, mols, spec: ProviderSpec, params, elements, cfg, seed, workers, timing=False):
    jobs = [Job(n, m, spec, params, tuple(elements), cfg, seed + i, timing) for i, (n, m) in enumerate(zip(names, mols))]
    return _run_jobs(jobs, workers)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_gen_corpus(args) -> int:
    mols = generate_corpus(args.n, seed=args.seed, min_atoms=args.min_atoms, max_atoms=args.max_atoms,
                           elements=QM9_ELEMENTS if args.elements == "qm9" else GEOM_ELEMENTS,
                           min_dist=args.min_dist, max_radius=args.max_radius or None)
    write_corpus(mols, args.out)
    print(f"wrote {len(mols)} molecules to {args.out}", file=sys.stderr)
    return 0


def cmd_field_slice(args) -> int:
    try:
        mol = read_xyz(args.molecule)
    except OSError as exc:
        raise CLIError(f"cannot read {args.molecule}: {exc}") from None
    if args.resolution < 1 or args.half_extent < 0 or not np.linalg.norm(args.normal) > 0:
        raise CLIError("plane needs a non-zero normal, resolution >= 1 and half-extent >= 0")
    point = args.point if args.point is not None else mol.centroid()
    pts = plane_points(point, args.normal, args.half_extent, args.resolution)
    samples = field_batch(pts, mol, _field_params(args), _elements(args))
    _write(slice_csv(samples), args.out)
    return 0


def cmd_roundtrip(args) -> int:
    names, mols = _load_corpus(args.corpus)
    spec = ProviderSpec.parse(args.provider)
    params, cfg = _field_params(args), _recon_config(args)
    results = _roundtrip(names, mols, spec, params, _elements(args), cfg, args.seed, args.workers, args.timing)
    rows = [r for r, _ in results]
    report = {"provider": spec.label(), "variant": params.variant, "exclusive": params.exclusive,
              "summary": _summary(rows), "molecules": rows}
    _write(json.dumps(report, indent=2) + "\n", args.out)
    return 0


def cmd_field_compare(args) -> int:
    names, mols = _load_corpus(args.corpus)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    if not variants:
        raise CLIError("give at least one variant")
    bad = [v for v in variants if v not in VARIANTS]
    if bad:
        raise CLIError(f"unknown variant(s) {', '.join(bad)}; valid names: {', '.join(VARIANTS)}")
    specs = [ProviderSpec.parse(p.strip()) for p in args.providers.split(",") if p.strip()]
    exclusive_modes = {"on": [True], "off": [False], "both": [False, True]}[args.exclusive_mode]
    cfg = _recon_config(args)
    lines = ["variant,provider,exclusive,success_rate,mean_rmsd,spurious_atoms"]
    for v in variants:
        for spec in specs:
            for excl in exclusive_modes:
                args.variant, args.exclusive = v, excl
                params = _field_params(args)
                res = _roundtrip(names, mols, spec, params, _elements(args), cfg, args.seed, args.workers)
                s = _summary([r for r, _ in res])
                rm = "" if s["mean_rmsd"] is None else repr(s["mean_rmsd"])
                lines.append(f"{v},{spec.label()},{str(excl).lower()},{s['success_rate']!r},{rm},{s['spurious_atoms']}")
    _write("\n".join(lines) + "\n", args.out)
    return 0


SWEEP_PARAMS = ("eps_db", "t_max", "sigma_noise")


def _pooled(mols, attr):
    return [x for m in mols for x in getattr(extract_geometry(m), attr)]


def cmd_sweep(args) -> int:
    if args.param not in SWEEP_PARAMS:
        raise CLIError(f"unknown sweep parameter {args.param!r}; choose from {', '.join(SWEEP_PARAMS)}")
    if not args.values:
        raise CLIError("give at least one value")
    names, mols = _load_corpus(args.corpus)
    params, base = _field_params(args), _recon_config(args)
    reference = [infer_bonds(m, base.rho) for m in mols]
    ref_len, ref_ang = _pooled(reference, "bond_lengths"), _pooled(reference, "bond_angles")
    lines = [f"{args.param},success_rate,mean_rmsd,validity,bond_len_w1,bond_ang_w1"]
    for value in args.values:
        spec = ProviderSpec.parse(args.provider)
        cfg = base
        if args.param == "eps_db":
            cfg = base.with_(eps_db=value)
        elif args.param == "t_max":
            cfg = base.with_(t_max=int(value))
        else:
            spec = ProviderSpec("noisy", sigma_noise=value)
        res = _roundtrip(names, mols, spec, params, _elements(args), cfg, args.seed, args.workers)
        s = _summary([r for r, _ in res])
        recon = [m for _, m in res]
        validity = 100.0 * sum(len(m) > 0 and check_stability(m).valid for m in recon) / len(recon)
        gen_len, gen_ang = _pooled(recon, "bond_lengths"), _pooled(recon, "bond_angles")
        w_len = repr(wasserstein1(gen_len, ref_len)) if gen_len and ref_len else ""
        w_ang = repr(wasserstein1(gen_ang, ref_ang)) if gen_ang and ref_ang else ""
        rm = "" if s["mean_rmsd"] is None else repr(s["mean_rmsd"])
        shown = int(value) if args.param == "t_max" else value
        lines.append(f"{shown!r},{s['success_rate']!r},{rm},{validity!r},{w_len},{w_ang}")
    _write("\n".join(lines) + "\n", args.out)
    return 0


def cmd_diffusion_demo(args) -> int:
    if args.T < 2:
        raise CLIError("T must be at least 2")
    sched = DiffusionSchedule(args.T, args.s)
    rng = np.random.default_rng(args.seed)
    z0 = rng.standard_normal(tuple(args.dims))
    chain = oracle_chain(z0, sched, rng=rng)
    Path(args.out_dir).mkdir(parents=True, exist_ok=True)
    (Path(args.out_dir) / "schedule.csv").write_text(schedule_csv(sched))
    summary = {
        "T": args.T, "s": args.s, "dims": list(args.dims),
        "alpha_bar_0": float(sched.alpha_bar[0]),
        "alpha_bar_mid": float(sched.alpha_bar[args.T // 2]),
        "alpha_bar_T": float(sched.alpha_bar[args.T]),
        "oracle_chain_final_max_error": chain.final_error,
    }
    text = json.dumps(summary, indent=2) + "\n"
    (Path(args.out_dir) / "chain.json").write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_metrics(args) -> int:
    _, gen = _load_corpus(args.generated)
    _, ref = _load_corpus(args.reference)
    gen = [infer_bonds(m, args.rho) for m in gen]
    ref = [infer_bonds(m, args.rho) for m in ref]
    report = evaluate_corpus(gen, ref)
    _write(report.to_json() + "\n", args.out)
    if args.csv:
        Path(args.csv).write_text(report.to_csv())
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None,
                        help="base random seed (default: $VECFIELD_SEED or 0)")
    common.add_argument("--config", help="file of key=value defaults; command-line flags win")
    common.add_argument("--workers", type=int, default=1, help="processes for corpus-level commands (default 1)")

    parser = argparse.ArgumentParser(prog="vecfield", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", parents=[common], help="write a synthetic molecule corpus")
    p.add_argument("--n", type=int, default=100, help="number of molecules (default 100)")
    p.add_argument("--min-atoms", type=int, default=5, help="smallest molecule (default 5)")
    p.add_argument("--max-atoms", type=int, default=30, help="largest molecule (default 30)")
    p.add_argument("--min-dist", type=float, default=1.0, help="minimum interatomic distance in Å (default 1.0)")
    p.add_argument("--max-radius", type=float, default=6.0,
                   help="largest atom distance from the centroid in Å; 0 disables (default 6, fits a 5^3 grid at 3 Å)")
    p.add_argument("--elements", choices=("qm9", "geom"), default="qm9", help="element set (default qm9)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("field-slice", parents=[common], help="field vectors on a planar grid as CSV")
    p.add_argument("molecule", help="XYZ file")
    p.add_argument("--point", type=_vec3, default=None, help="plane point x,y,z in Å (default: centroid)")
    p.add_argument("--normal", type=_vec3, default=np.array([0.0, 0.0, 1.0]), help="plane normal (default 0,0,1)")
    p.add_argument("--half-extent", type=float, default=4.0, help="half side length in Å (default 4)")
    p.add_argument("--resolution", type=int, default=41, help="points per side (default 41)")
    p.add_argument("--out", default=None, help="CSV path (default stdout)")
    _add_field_flags(p)
    p.set_defaults(func=cmd_field_slice)

    p = sub.add_parser("roundtrip", parents=[common], help="reconstruct every corpus molecule from its field")
    p.add_argument("corpus", help="directory of XYZ files")
    p.add_argument("--provider", default="analytic", help="analytic, spurious, grid:L:spacing or noisy:sigma")
    p.add_argument("--timing", action="store_true", help="include wall_time_ms (makes output run-dependent)")
    p.add_argument("--out", default=None, help="JSON path (default stdout)")
    _add_field_flags(p)
    _add_recon_flags(p)
    p.set_defaults(func=cmd_roundtrip)

    p = sub.add_parser("field-compare", parents=[common], help="success rate per field variant and provider")
    p.add_argument("corpus", help="directory of XYZ files")
    p.add_argument("--variants", default=",".join(VARIANTS), help="comma-separated variants (default all)")
    p.add_argument("--providers", default="analytic", help="comma-separated provider specs (default analytic)")
    p.add_argument("--exclusive-mode", choices=("on", "off", "both"), default="on",
                   help="absent-type repulsion setting(s) to run (default on)")
    p.add_argument("--out", default=None, help="CSV path (default stdout)")
    _add_field_flags(p)
    _add_recon_flags(p)
    p.set_defaults(func=cmd_field_compare)

    p = sub.add_parser("sweep", parents=[common], help="vary one parameter over a corpus")
    p.add_argument("corpus", help="directory of XYZ files")
    p.add_argument("--param", required=True, help=f"one of {', '.join(SWEEP_PARAMS)}")
    p.add_argument("--values", type=_float_list, required=True, help="comma-separated values")
    p.add_argument("--provider", default="analytic", help="provider for eps_db/t_max sweeps (default analytic)")
    p.add_argument("--out", default=None, help="CSV path (default stdout)")
    _add_field_flags(p)
    _add_recon_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("diffusion-demo", parents=[common], help="dump the noise schedule and run the oracle chain")
    p.add_argument("--T", type=int, default=1000, help="number of timesteps (published default 1000)")
    p.add_argument("--s", type=float, default=0.008, help="cosine offset (published default 0.008)")
    p.add_argument("--dims", type=int, nargs="+", default=[125, 16], help="latent shape (default 125 16)")
    p.add_argument("--out-dir", default="diffusion_out", help="directory for schedule.csv and chain.json")
    p.set_defaults(func=cmd_diffusion_demo)

    p = sub.add_parser("metrics", parents=[common], help="quality metrics of a corpus against a reference")
    p.add_argument("generated", help="directory of generated XYZ files")
    p.add_argument("reference", help="directory of reference XYZ files")
    p.add_argument("--rho", type=float, default=1.5, help="bond tolerance factor (published default 1.5)")
    p.add_argument("--out", default=None, help="JSON path (default stdout)")
    p.add_argument("--csv", default=None, help="optional CSV path")
    p.set_defaults(func=cmd_metrics)
    return parser


def load_config(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise CLIError(f"cannot read config {path}: {exc}") from None
    for n, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CLIError(f"{path}:{n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key.replace("-", "_")] = value.strip("\"'")
    return values


def _apply_config(parser: argparse.ArgumentParser, argv, config: dict):
    # re-parse with config values installed as subparser defaults
    sub_action = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    command = next((a for a in argv if a in sub_action.choices), None)
    sp = sub_action.choices[command]
    by_dest = {a.dest: a for a in sp._actions}
    defaults = {}
    for key, raw in config.items():
        action = by_dest.get(key)
        if action is None:
            raise CLIError(f"unknown config key {key!r} for {command}")
        if isinstance(action, argparse._StoreFalseAction):
            defaults[key] = raw.lower() in ("1", "true", "yes", "on")
        elif isinstance(action, argparse._StoreTrueAction):
            defaults[key] = raw.lower() in ("1", "true", "yes", "on")
        elif action.type is not None:
            try:
                defaults[key] = action.type(raw)
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise CLIError(f"config key {key}: {exc}") from None
        else:
            defaults[key] = raw
        if action.choices is not None and defaults[key] not in action.choices:
            raise CLIError(f"config key {key}: {raw!r} not one of {', '.join(map(str, action.choices))}")
    sp.set_defaults(**defaults)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        try:
            args = parser.parse_args(argv)
        except SystemExit as exc:  # usage errors and --help
            return exc.code if isinstance(exc.code, int) else 2
        if args.config:
            args = _apply_config(parser, argv, load_config(args.config))
        if args.seed is None:
            args.seed = default_seed()
        if args.workers < 1:
            raise CLIError("--workers must be at least 1")
        return args.func(args)
    except CLIError as exc:
        print(f"vecfield: error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"vecfield: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

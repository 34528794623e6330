"""Command-line surface: benchmark synthesis, labeling runs, verification.

Subcommands
-----------
synth    generate a random Voronoi benchmark image with noise
run      label an image by one of the methods {af, sflow, pde}
verify   run the numerical property suite and report pass/fail

Configuration precedence is flags > key=value config file > defaults, and
the effective values of every run are echoed into a manifest in the output
directory.  Exit codes: 0 success, 1 validation error, 2 numerical failure,
3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import data, flows, geometry, graph, report, variational
from .errors import ConvergenceError, ImageFormatError

__all__ = ["RunConfig", "cmd_synth", "cmd_run", "cmd_verify", "main"]

_FIELD_TYPES = {
    "mode": str,
    "alpha": float,
    "rho": float,
    "tau": float,
    "step": float,
    "t_end": float,
    "seed": int,
    "noise": float,
    "size": str,
    "labels": int,
    "out": str,
    "threads": int,
    "tol_inner": float,
    "max_outer": int,
    "image": str,
    "protos": str,
    "truth": str,
}


@dataclass(frozen=True)
class RunConfig:
    """Effective parameters of one subcommand invocation."""

    mode: str = "af"
    alpha: float = 1.0
    rho: float | None = None  # None: mean positive distance of the instance
    tau: float = 10.0
    step: float = 0.1
    t_end: float = 100.0
    seed: int = 0
    noise: float = 0.2
    size: str = "64x64"
    labels: int = 5
    out: str = "out"
    threads: int = 1
    tol_inner: float = 1e-8
    max_outer: int = 200
    image: str | None = None
    protos: str | None = None
    truth: str | None = None

    def __post_init__(self):
        if self.mode not in ("af", "sflow", "pde"):
            raise ValueError(f"mode must be af, sflow or pde, got {self.mode!r}")
        for name in ("alpha", "tau", "step", "tol_inner"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.rho is not None and not self.rho > 0:
            raise ValueError("rho must be positive")
        if self.t_end < 0:
            raise ValueError("t_end must be nonnegative")
        if not 0.0 <= self.noise <= 1.0:
            raise ValueError("noise must be in [0, 1]")
        if self.labels < 2:
            raise ValueError("need at least 2 labels")
        if self.threads < 1:
            raise ValueError("threads must be at least 1")
        if self.max_outer < 1:
            raise ValueError("max_outer must be at least 1")

    @property
    def grid_shape(self) -> tuple:
        try:
            h, w = self.size.lower().split("x")
            height, width = int(h), int(w)
        except ValueError as exc:
            raise ValueError(f"size must look like 64x64, got {self.size!r}") from exc
        if height < 1 or width < 1:
            raise ValueError(f"size must be positive, got {self.size!r}")
        return height, width


def _parse_config_file(path: str) -> dict:
    values = {}
    text = Path(path).read_text()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, _, val = line.partition("=")
        key = key.strip().replace("-", "_")
        if key not in _FIELD_TYPES:
            raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
        values[key] = _FIELD_TYPES[key](val.strip())
    return values


def _merge_config(args: argparse.Namespace) -> RunConfig:
    merged = {}
    if getattr(args, "config", None):
        merged.update(_parse_config_file(args.config))
    for f in fields(RunConfig):
        flag_val = getattr(args, f.name, None)
        if flag_val is not None:
            merged[f.name] = flag_val
    return RunConfig(**merged)


def _write_manifest(outdir: Path, subcommand: str, config: RunConfig, extra: dict) -> None:
    payload = {"subcommand": subcommand}
    payload.update({f.name: getattr(config, f.name) for f in fields(RunConfig)})
    payload.update(extra)
    with open(outdir / "manifest.json", "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_synth(config: RunConfig) -> list:
    """Generate a benchmark instance; returns the list of files written."""
    height, width = config.grid_shape
    img, truth, protos = data.synth_partition(
        height, width, config.labels, config.seed, config.noise
    )
    outdir = Path(config.out)
    outdir.mkdir(parents=True, exist_ok=True)
    truth_img = data.render_labeling(truth, protos, height, width)

    data.write_image(outdir / "ground_truth.ppm", truth_img)
    data.write_image(outdir / "noisy.ppm", img)
    data.write_prototypes_csv(outdir / "prototypes.csv", protos)
    data.write_labeling_csv(outdir / "truth_labels.csv", truth)
    report.plot_labeling_panels(
        [("ground truth", truth_img), ("noisy input", img)],
        outdir / "panels.png",
    )
    _write_manifest(outdir, "synth", config, {"height": height, "width": width})
    return [
        "ground_truth.ppm",
        "noisy.ppm",
        "prototypes.csv",
        "truth_labels.csv",
        "panels.png",
        "manifest.json",
    ]


def _run_flow_mode(config, params, outdir):
    kind = "assignment" if config.mode == "af" else "s_flow"
    final, rows = flows.run_labeling_flow(
        params, kind, step=config.step, t_end=config.t_end
    )
    flows.write_trajectory_csv(outdir / "trace.csv", rows)
    report.plot_flow_trace(rows, outdir / "trace.png")
    summary = {
        "iterations": len(rows) - 1,
        "t_final": rows[-1].t,
        "final_energy": rows[-1].potential,
        "final_mean_entropy": rows[-1].mean_entropy,
    }
    return final, summary


def _run_pde_mode(config, distances, rho, shape, outdir):
    height, width = shape
    ops = variational.build_operators(height, width)
    problem = variational.make_grid_problem(
        height, width, config.alpha, distances, rho, tau=config.tau
    )
    f0 = variational.initial_interior_field(distances, rho, shape)
    result = variational.run_palm(
        ops,
        problem,
        f0,
        max_outer=config.max_outer,
        tol_inner=config.tol_inner,
    )
    variational.write_palm_trace_csv(outdir / "trace.csv", result.trace)
    report.plot_palm_trace(result.trace, outdir / "trace.png")
    summary = {
        "iterations": result.state.k,
        "final_energy": result.trace[-1].e_alpha,
        "vi_residual": variational.vi_residual(ops, problem, result.S),
        "median_pde_residual": float(
            np.median(
                variational.pde_residual(ops, config.alpha, result.S)[
                    problem.interior_mask
                ]
            )
        ),
    }
    return result.S, summary


def cmd_run(config: RunConfig, mode: str | None = None) -> dict:
    """Label an image with the configured method; returns the summary dict."""
    if mode is not None and mode != config.mode:
        config = RunConfig(
            **{**{f.name: getattr(config, f.name) for f in fields(RunConfig)}, "mode": mode}
        )
    if not config.image or not config.protos:
        raise ValueError("run needs --image and --protos paths")
    img = data.read_image(config.image)
    protos = data.read_prototypes_csv(config.protos)
    distances = data.distance_matrix(img, protos)
    rho = config.rho if config.rho is not None else flows.default_rho(distances)
    shape = (img.height, img.width)
    outdir = Path(config.out)
    outdir.mkdir(parents=True, exist_ok=True)

    if config.mode in ("af", "sflow"):
        omega = graph.uniform_weights(graph.grid_graph(*shape))
        params = flows.FlowParams(rho=rho, omega=omega, distances=distances)
        solution, summary = _run_flow_mode(config, params, outdir)
    else:
        solution, summary = _run_pde_mode(config, distances, rho, shape, outdir)

    labeling = data.round_to_labeling(solution)
    label_img = data.render_labeling(labeling, protos, *shape)
    flows.save_matrix(outdir / "solution.bin", solution)
    data.write_labeling_csv(outdir / "labeling.csv", labeling)
    data.write_image(outdir / "labeling.ppm", label_img)

    panels = [("input", img), (f"labeling ({config.mode})", label_img)]
    summary.update({"mode": config.mode, "rho": rho})
    if config.truth:
        truth = data.read_labeling_csv(config.truth)
        summary["labeling_error"] = data.labeling_error(labeling, truth)
        panels.insert(0, ("ground truth", data.render_labeling(truth, protos, *shape)))
    report.plot_labeling_panels(panels, outdir / "panels.png")

    with open(outdir / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_manifest(outdir, "run", config, {"rho_effective": rho})
    return summary


def _random_interior(rng, shape):
    return geometry.clamp_interior(rng.dirichlet(np.ones(shape[-1]), size=shape[0]))


def _check_geometry_identities(rng) -> tuple:
    p = _random_interior(rng, (200, 5))
    q = _random_interior(rng, (200, 5))
    v = geometry.project_t0(rng.normal(size=(200, 5)))
    u = geometry.project_t0(rng.normal(size=(200, 5)))
    worst = 0.0
    worst = max(worst, float(np.max(np.abs(
        geometry.exp_map(p, v + u) - geometry.exp_map(geometry.exp_map(p, u), v)))))
    worst = max(worst, float(np.max(np.abs(
        geometry.exp_map_inverse(q, p) + geometry.exp_map_inverse(p, q)))))
    a = geometry.exp_map(p, v)
    worst = max(worst, float(np.max(np.abs(
        geometry.exp_map_inverse(q, a)
        - (geometry.exp_map_inverse(p, a) - geometry.exp_map_inverse(p, q))))))
    worst = max(worst, float(np.max(np.abs(
        geometry.exp_map(p, geometry.exp_map_inverse(p, q)) - q))))
    worst = max(worst, float(np.max(np.abs(
        geometry.big_exp_map(p, geometry.big_exp_inverse(p, q)) - q))))
    worst = max(worst, float(np.max(np.abs(
        geometry.replicator_map(p, geometry.replicator_inverse_on_t0(p, u)) - u))))
    return worst <= 1e-10, f"max violation {worst:.2e} (tol 1e-10)"


def _small_params(rng, height=3, width=3, c=3, symmetric=False):
    omega = graph.uniform_weights(graph.grid_graph(height, width))
    if symmetric:
        omega = graph.symmetrize(omega)
    d = rng.random((height * width, c))
    return flows.FlowParams(rho=flows.default_rho(d), omega=omega, distances=d)


def _check_similarity_closed_form(rng) -> tuple:
    params = _small_params(rng)
    w = _random_interior(rng, params.shape)
    gap = float(np.max(np.abs(
        flows.similarity(params, w) - flows.similarity_closed_form(params, w))))
    return gap <= 1e-10, f"two formulations differ by {gap:.2e} (tol 1e-10)"


def _check_jacobian_fd(rng) -> tuple:
    params = _small_params(rng)
    w = _random_interior(rng, params.shape)
    h = 1e-6
    worst = 0.0
    for _ in range(5):
        x = geometry.project_t0(rng.normal(size=params.shape))
        x /= np.sqrt(np.sum(x * x))
        fd = (flows.similarity(params, w + h * x) - flows.similarity(params, w - h * x)) / (2 * h)
        closed = flows.similarity_jacobian_apply(params, w, x)
        rel = float(np.max(np.abs(fd - closed)) / np.max(np.abs(closed)))
        worst = max(worst, rel)
    return worst <= 1e-6, f"max relative FD error {worst:.2e} (tol 1e-6)"


def _check_adjoint_pairing(rng) -> tuple:
    params = _small_params(rng)
    w = _random_interior(rng, params.shape)
    worst = 0.0
    for _ in range(5):
        x = geometry.project_t0(rng.normal(size=params.shape))
        y = geometry.project_t0(rng.normal(size=params.shape))
        x /= np.sqrt(np.sum(x * x))
        y /= np.sqrt(np.sum(y * y))
        lhs = float(np.sum(flows.similarity_jacobian_apply(params, w, x) * y))
        rhs = float(np.sum(x * flows.similarity_jacobian_adjoint_apply(params, w, y)))
        worst = max(worst, abs(lhs - rhs))
    return worst <= 1e-12, f"max pairing gap {worst:.2e} (tol 1e-12)"


def _check_flow_equivalence(rng) -> tuple:
    params = _small_params(rng, height=4, width=4, c=3, symmetric=True)
    dev = flows.check_flow_equivalence(params, step=1e-3, t_end=5.0)
    return dev <= 1e-4, f"max trajectory deviation {dev:.2e} (tol 1e-4)"


def _check_potential_identities(rng) -> tuple:
    params = _small_params(rng, symmetric=True)
    s = _random_interior(rng, params.shape)
    gap1 = abs(
        flows.potential_value(params.omega, s)
        - flows.potential_dirichlet_form(params.omega, s)
    )
    h = 1e-6
    egrad = flows.euclidean_grad_potential(params.omega, s)
    fd = np.zeros_like(s)
    for i in range(s.shape[0]):
        for j in range(s.shape[1]):
            sp = s.copy(); sp[i, j] += h
            sm = s.copy(); sm[i, j] -= h
            fd[i, j] = (
                flows.potential_value(params.omega, sp)
                - flows.potential_value(params.omega, sm)
            ) / (2 * h)
    rel = float(np.max(np.abs(fd - egrad)) / np.max(np.abs(egrad)))
    gap2 = float(np.max(np.abs(
        flows.s_flow_rhs(params.omega, s) + flows.riemannian_grad_potential(params.omega, s))))
    ok = gap1 <= 1e-12 and rel <= 1e-6 and gap2 <= 1e-12
    return ok, (
        f"dirichlet gap {gap1:.2e} (tol 1e-12), grad FD rel {rel:.2e} (tol 1e-6), "
        f"rhs vs -Rgrad {gap2:.2e} (tol 1e-12)"
    )


def _check_sflow_descent(rng) -> tuple:
    params = _small_params(rng, height=4, width=4, c=3, symmetric=True)
    s0 = flows.similarity(params, flows.barycenter_matrix(*params.shape))
    traj = flows.integrate_geometric_euler(
        "s_flow", params, flows.FlowState(W=s0, t=0.0), step=0.1, t_end=5.0
    )
    values = [flows.potential_value(params.omega, st.W) for st in traj]
    worst = max(
        (values[i + 1] - values[i] for i in range(len(values) - 1)), default=0.0
    )
    return worst <= 1e-9, f"max potential increase per step {worst:.2e} (tol 1e-9)"


def _check_witness(rng) -> tuple:
    params = _small_params(rng)
    wit = flows.non_potential_witness(params)
    rel = abs(wit.asymmetry_norm - wit.closed_form_norm) / wit.closed_form_norm
    ok = wit.asymmetry_norm > 1e-8 and rel <= 1e-10
    return ok, (
        f"asymmetry norm {wit.asymmetry_norm:.6e} > 0 at node {wit.node}, "
        f"closed-form rel err {rel:.2e} (tol 1e-10)"
    )


_VERIFY_CHECKS = (
    ("geometry identities", _check_geometry_identities),
    ("similarity closed form", _check_similarity_closed_form),
    ("similarity differential vs finite differences", _check_jacobian_fd),
    ("adjoint pairing", _check_adjoint_pairing),
    ("flow equivalence", _check_flow_equivalence),
    ("potential identities", _check_potential_identities),
    ("potential descent along decoupled flow", _check_sflow_descent),
    ("non-potential witness", _check_witness),
)


def cmd_verify(config: RunConfig) -> list:
    """Run the numerical property suite; returns [(name, ok, detail), ...]."""
    results = []
    for name, fn in _VERIFY_CHECKS:
        rng = np.random.default_rng(config.seed)
        ok, detail = fn(rng)
        results.append((name, ok, detail))
    return results


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on usage errors; remap to the validation code
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)


def _build_parser() -> _Parser:
    parser = _Parser(prog="assignflow", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def add_common(p):
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--threads", type=int, help="worker cap (computation is single-threaded)")

    p_synth = sub.add_parser("synth", help="generate a noisy Voronoi benchmark")
    add_common(p_synth)
    p_synth.add_argument("--size", help="grid as HxW, e.g. 64x64")
    p_synth.add_argument("--labels", type=int, help="number of labels")
    p_synth.add_argument("--noise", type=float, help="label noise rate in [0,1]")

    p_run = sub.add_parser("run", help="label an image")
    add_common(p_run)
    p_run.add_argument("--mode", choices=["af", "sflow", "pde"])
    p_run.add_argument("--image", help="input image (PPM P6 or PNG)")
    p_run.add_argument("--protos", help="prototype CSV")
    p_run.add_argument("--truth", help="ground-truth labeling CSV for error reporting")
    p_run.add_argument("--alpha", type=float)
    p_run.add_argument("--rho", type=float)
    p_run.add_argument("--tau", type=float)
    p_run.add_argument("--step", type=float)
    p_run.add_argument("--t-end", dest="t_end", type=float)
    p_run.add_argument("--tol-inner", dest="tol_inner", type=float)
    p_run.add_argument("--max-outer", dest="max_outer", type=int)

    p_verify = sub.add_parser("verify", help="run the numerical property suite")
    add_common(p_verify)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        config = _merge_config(args)
        if args.subcommand == "synth":
            files = cmd_synth(config)
            print(f"wrote {', '.join(files)} to {config.out}")
        elif args.subcommand == "run":
            summary = cmd_run(config)
            print(json.dumps(summary, sort_keys=True))
        else:
            results = cmd_verify(config)
            for name, ok, detail in results:
                print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
            if not all(ok for _, ok, _ in results):
                return 2
    except ImageFormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (ConvergenceError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())

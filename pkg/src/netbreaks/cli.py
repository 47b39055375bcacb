"""Command-line interface: generate, correct, fit, compare, export, pipeline.

Every subcommand supports ``--json`` for machine-readable output on stdout.
Failures exit with a stage-tagged code: config=2, generate=3, correct=4,
fit=5, compare=6, export=7.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .diagnostics import build_report, compare_models, DiagnosticsReport
from .generate import EdgeProbabilities, Scenario, default_schedule, make_block_network_change
from .postprocess import export_latent, export_rules, kmeans_blocks, summarize_regimes
from .sampler import HmtmConfig, McmcTrace, Priors, fit_hmtm
from .tensor import (
    CorrectedTensor,
    NetworkTensor,
    NullKind,
    degree_correct,
    load_tensor,
    load_tensor_json,
    read_edge_list,
    save_tensor_json,
)

STAGE_EXIT = {"config": 2, "generate": 3, "correct": 4, "fit": 5, "compare": 6, "export": 7}
_STAGE_ORDER = ["generate", "correct", "fit", "compare", "export"]


class StageError(Exception):
    def __init__(self, stage: str, message: str):
        super().__init__(message)
        self.stage = stage


def _sha256(path: Path) -> str:
    digest = hashlib.sha256(path.read_bytes()).hexdigest()
    return f"sha256:{digest}"


def _emit(payload: dict, as_json: bool, text: str | None = None) -> None:
    if as_json:
        print(json.dumps(payload, sort_keys=True))
    elif text:
        print(text)


def _load_input_tensor(path: str, n_nodes: int | None, n_layers: int | None):
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"input file not found: {p}")
    if p.suffix.lower() == ".json":
        return load_tensor_json(p)
    edges = read_edge_list(p)
    if n_nodes is None:
        n_nodes = 1 + max(max(e[0], e[1]) for e in edges) if edges else 1
    if n_layers is None:
        n_layers = 1 + max(e[2] for e in edges) if edges else 1
    return load_tensor(edges, n_nodes, n_layers)


# ---------------------------------------------------------------------------
# run configuration for the pipeline

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}

# key -> (type tag, default); the flat key=value config file and the
# --set overrides both follow this schema
RUN_SCHEMA: dict[str, tuple[str, object]] = {
    "input": ("str", "synth"),
    "scenario": ("str", "split"),
    "n": ("int", 10),
    "T": ("int", 40),
    "p_in": ("float", 0.5),
    "p_out": ("float", 0.05),
    "correction": ("str", "eigen"),
    "breaks": ("str", "0,1,2,3"),
    "rank": ("int", 2),
    "burnin": ("int", 500),
    "mcmc": ("int", 500),
    "thin": ("int", 1),
    "seed": ("int", 42),
    "error": ("str", "normal"),
    "intercept": ("bool", False),
    "marglik": ("bool", True),
    "reduced_mcmc": ("int", 0),
    "kmeans_k": ("int", 0),
    "kmeans_restarts": ("int", 10),
    "outdir": ("str", "netbreaks_run"),
    "workers": ("int", 1),
    "stages": ("str", "all"),
    "u0": ("float", 10.0),
    "u1": ("float", 1.0),
    "v0": ("float", 10.0),
    "v1": ("float", 1.0),
    "c0": ("float", 1.0),
    "d0": ("float", 1.0),
    "a0": ("float", 1.0),
    "b0": ("float", 1.0),
    "nu0": ("float", 5.0),
    "nu1": ("float", 5.0),
    "beta_mean": ("float", 0.0),
    "beta_var": ("float", 10.0),
}


def _coerce(key: str, raw: object) -> object:
    kind = RUN_SCHEMA[key][0]
    if isinstance(raw, str):
        raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            if isinstance(raw, bool):
                return raw
            low = str(raw).lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        return str(raw)
    except (TypeError, ValueError) as exc:
        raise StageError("config", f"bad value for {key}: {raw!r} ({exc})") from exc


@dataclass
class RunConfig:
    """Resolved pipeline settings (see ``RUN_SCHEMA`` for the file keys)."""

    values: dict = field(default_factory=dict)

    @classmethod
    def from_sources(cls, config_path: str | None, overrides: list[str]) -> "RunConfig":
        values = {k: v for k, (_, v) in RUN_SCHEMA.items()}
        if config_path:
            p = Path(config_path)
            if not p.exists():
                raise StageError("config", f"config file not found: {p}")
            for lineno, line in enumerate(p.read_text().splitlines(), start=1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise StageError("config", f"{p}:{lineno}: expected key = value")
                key, _, raw = line.partition("=")
                key = key.strip()
                if key not in RUN_SCHEMA:
                    raise StageError("config", f"{p}:{lineno}: unknown key {key!r}")
                values[key] = _coerce(key, raw)
        for item in overrides:
            if "=" not in item:
                raise StageError("config", f"--set expects key=value, got {item!r}")
            key, _, raw = item.partition("=")
            key = key.strip()
            if key not in RUN_SCHEMA:
                raise StageError("config", f"unknown config key {key!r}")
            values[key] = _coerce(key, raw)
        cfg = cls(values)
        cfg.validate()
        return cfg

    def __getitem__(self, key: str):
        return self.values[key]

    @property
    def break_list(self) -> list[int]:
        raw = str(self.values["breaks"]).strip()
        if not raw:
            return []
        try:
            items = [int(tok) for tok in raw.split(",")]
        except ValueError as exc:
            raise StageError("config", f"breaks must be a comma list of integers: {raw!r}") from exc
        return items

    @property
    def stage_list(self) -> list[str]:
        raw = str(self.values["stages"]).strip().lower()
        if raw in ("all", ""):
            return list(_STAGE_ORDER)
        stages = [tok.strip() for tok in raw.split(",") if tok.strip()]
        for s in stages:
            if s not in _STAGE_ORDER:
                raise StageError("config", f"unknown stage {s!r}")
        ordered = [s for s in _STAGE_ORDER if s in stages]
        if ordered != _STAGE_ORDER[: len(ordered)]:
            raise StageError("config", f"stages must form a prefix of {_STAGE_ORDER}, got {stages}")
        return ordered

    def validate(self) -> None:
        breaks = self.break_list
        if len(set(breaks)) != len(breaks):
            raise StageError("config", f"candidate break counts must be distinct: {breaks}")
        if any(k < 0 for k in breaks):
            raise StageError("config", f"break counts must be non-negative: {breaks}")
        if self.values["correction"] not in ("eigen", "modularity", "none"):
            raise StageError("config", f"correction must be eigen|modularity|none")
        if self.values["error"] not in ("normal", "t"):
            raise StageError("config", "error must be normal|t")
        if self.values["workers"] < 1:
            raise StageError("config", "workers must be at least 1")
        if self.values["input"] == "synth":
            try:
                Scenario(self.values["scenario"])
            except ValueError as exc:
                raise StageError("config", str(exc)) from exc
        self.stage_list

    def priors(self) -> Priors:
        v = self.values
        return Priors(
            u0=v["u0"], u1=v["u1"], v0=v["v0"], v1=v["v1"], c0=v["c0"], d0=v["d0"],
            a0=v["a0"], b0=v["b0"], nu0=v["nu0"], nu1=v["nu1"],
            b_beta0=v["beta_mean"], B_beta0=v["beta_var"],
        )

    def sampler_config(self, n_breaks: int, seed: int) -> HmtmConfig:
        v = self.values
        return HmtmConfig(
            n_breaks=n_breaks, rank=v["rank"], burnin=v["burnin"], mcmc=v["mcmc"],
            thin=v["thin"], priors=self.priors(), error_kind=v["error"],
            with_intercept=v["intercept"], seed=seed,
        )


def _derived_seed(base: int, tag: int) -> int:
    return int(np.random.SeedSequence(entropy=(int(base), int(tag))).generate_state(1)[0])


def _fit_worker(args: tuple) -> tuple[int, McmcTrace, DiagnosticsReport | None]:
    values, labels, config, want_report, reduced_mcmc = args
    trace = fit_hmtm(values, config)
    trace.node_labels = labels
    report = None
    if want_report is not None:
        report = build_report(
            trace, B=values if want_report else None, marglik=want_report,
            reduced_mcmc=reduced_mcmc,
        )
    return config.n_breaks, trace, report


def run_pipeline(run: RunConfig) -> dict:
    """Generate/load data, fit every candidate break count, compare and export.

    Returns a result dict (also used for ``--json``); writes all artifacts and
    a ``manifest.json`` with content hashes under ``outdir``.
    """
    stages = run.stage_list
    outdir = Path(run["outdir"])
    outdir.mkdir(parents=True, exist_ok=True)
    artifacts: dict[str, Path] = {}
    result: dict = {"outdir": str(outdir), "stages": stages}

    # --- generate (or load) ------------------------------------------------
    try:
        if run["input"] == "synth":
            schedule = default_schedule(run["scenario"], run["n"], run["T"])
            probs = EdgeProbabilities(run["p_in"], run["p_out"], allow_dissortative=True)
            tensor = make_block_network_change(schedule, probs, seed=run["seed"])
        else:
            tensor = _load_input_tensor(run["input"], None, None)
    except (ValueError, OSError, RuntimeError) as exc:
        raise StageError("generate", str(exc)) from exc
    tensor_path = outdir / "tensor.json"
    save_tensor_json(tensor_path, tensor)
    artifacts["tensor.json"] = tensor_path
    corrected: CorrectedTensor | NetworkTensor = tensor
    result["n_nodes"] = tensor.n_nodes
    result["n_layers"] = tensor.n_layers

    if "correct" in stages:
        # --- correct -------------------------------------------------------
        try:
            if isinstance(tensor, CorrectedTensor) or run["correction"] == "none":
                corrected = tensor
            else:
                corrected = degree_correct(tensor, NullKind(run["correction"]))
                corrected_path = outdir / "corrected.json"
                save_tensor_json(corrected_path, corrected)
                artifacts["corrected.json"] = corrected_path
        except (ValueError, RuntimeError) as exc:
            raise StageError("correct", str(exc)) from exc

    reports: list[DiagnosticsReport] = []
    traces: dict[int, McmcTrace] = {}
    if "fit" in stages:
        # --- fit (one chain per worker) -------------------------------------
        breaks = run.break_list
        if not breaks:
            raise StageError("config", "no candidate break counts configured")
        want_report = run["marglik"] if "compare" in stages else None
        reduced = run["reduced_mcmc"] or None
        jobs = []
        for k in sorted(breaks):
            cfg = run.sampler_config(k, _derived_seed(run["seed"], k))
            jobs.append((corrected.values, corrected.node_labels, cfg, want_report, reduced))
        try:
            if run["workers"] > 1 and len(jobs) > 1:
                with ProcessPoolExecutor(max_workers=min(run["workers"], len(jobs))) as pool:
                    outcomes = list(pool.map(_fit_worker, jobs))
            else:
                outcomes = [_fit_worker(job) for job in jobs]
        except (ValueError, RuntimeError) as exc:
            raise StageError("fit", str(exc)) from exc
        input_info = {"path": str(tensor_path.name), "sha256": _sha256(tensor_path)}
        if "corrected.json" in artifacts:
            input_info = {
                "path": str(artifacts["corrected.json"].name),
                "sha256": _sha256(artifacts["corrected.json"]),
            }
        for k, trace, report in sorted(outcomes, key=lambda o: o[0]):
            trace.input_info = input_info
            path = outdir / f"trace_m{k}.json"
            trace.save(path)
            artifacts[path.name] = path
            traces[k] = trace
            if report is not None:
                reports.append(report)

    comparison = None
    if "compare" in stages:
        # --- compare ---------------------------------------------------------
        try:
            comparison = compare_models(reports)
        except ValueError as exc:
            raise StageError("compare", str(exc)) from exc
        report_path = outdir / "report.json"
        report_path.write_text(json.dumps(comparison.to_dict(), sort_keys=True) + "\n")
        text_path = outdir / "report.txt"
        text_path.write_text(comparison.to_text() + "\n")
        artifacts["report.json"] = report_path
        artifacts["report.txt"] = text_path
        result["verdict_n_breaks"] = comparison.verdict_n_breaks
        result["notes"] = comparison.notes

    if "export" in stages:
        # --- export the WAIC winner -------------------------------------------
        if comparison is None:
            raise StageError("export", "export requires the compare stage")
        winner = comparison.verdict_n_breaks
        trace = traces[winner]
        try:
            summaries = summarize_regimes(trace)
            if run["kmeans_k"] > 0:
                for summ in summaries:
                    summ.cluster_labels = kmeans_blocks(
                        summ.U_mean, run["kmeans_k"],
                        restarts=run["kmeans_restarts"],
                        seed=_derived_seed(run["seed"], 9000 + winner),
                    )
            export_dir = outdir / f"export_m{winner}"
            written = export_latent(summaries, export_dir, node_labels=trace.node_labels)
            written.append(export_rules(trace, export_dir))
        except (ValueError, OSError) as exc:
            raise StageError("export", str(exc)) from exc
        for path in written:
            artifacts[str(path.relative_to(outdir))] = path

    manifest = {
        "tool": "netbreaks",
        "version": __version__,
        "numpy": np.__version__,
        "scipy": __import__("scipy").__version__,
        "seed": run["seed"],
        "config": {k: run.values[k] for k in sorted(run.values)},
        "artifacts": {name: _sha256(path) for name, path in sorted(artifacts.items())},
        "verdict_n_breaks": result.get("verdict_n_breaks"),
    }
    manifest_path = outdir / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, sort_keys=True) + "\n")
    result["manifest"] = str(manifest_path)
    result["artifacts"] = sorted(manifest["artifacts"])
    return result


# ---------------------------------------------------------------------------
# subcommand handlers


def _cmd_generate(args) -> int:
    schedule = default_schedule(args.scenario, args.n, args.T)
    probs = EdgeProbabilities(args.p_in, args.p_out, allow_dissortative=True)
    tensor = make_block_network_change(schedule, probs, seed=args.seed)
    out = Path(args.out)
    save_tensor_json(out, tensor)
    payload = {
        "out": str(out),
        "n_nodes": tensor.n_nodes,
        "n_layers": tensor.n_layers,
        "break_times": list(map(int, schedule.break_times)),
        "sha256": _sha256(out),
    }
    _emit(payload, args.json, f"wrote {out} ({tensor.n_nodes} nodes, {tensor.n_layers} layers)")
    return 0


def _cmd_correct(args) -> int:
    tensor = _load_input_tensor(args.input, args.n_nodes, args.n_layers)
    if isinstance(tensor, CorrectedTensor):
        raise ValueError(f"{args.input} is already degree-corrected")
    corrected = degree_correct(tensor, NullKind(args.kind))
    out = Path(args.out)
    save_tensor_json(out, corrected)
    payload = {"out": str(out), "kind": args.kind, "sha256": _sha256(out)}
    _emit(payload, args.json, f"wrote {out} (null model: {args.kind})")
    return 0


def _cmd_fit(args) -> int:
    data = _load_input_tensor(args.input, args.n_nodes, args.n_layers)
    priors = Priors(
        u0=args.u0, u1=args.u1, v0=args.v0, v1=args.v1, c0=args.c0, d0=args.d0,
        a0=args.a0, b0=args.b0, nu0=args.nu0, nu1=args.nu1,
        b_beta0=args.beta_mean, B_beta0=args.beta_var,
    )
    config = HmtmConfig(
        n_breaks=args.breaks, rank=args.rank, burnin=args.burnin, mcmc=args.mcmc,
        thin=args.thin, priors=priors, error_kind=args.error,
        with_intercept=args.intercept, seed=args.seed,
    )
    trace = fit_hmtm(data, config, progress=args.progress)
    in_path = Path(args.input)
    trace.input_info = {"path": str(in_path), "sha256": _sha256(in_path)}
    out = Path(args.out)
    trace.save(out)
    from .diagnostics import waic as _waic

    payload = {
        "out": str(out),
        "n_breaks": args.breaks,
        "n_draws": trace.n_draws,
        "waic": _waic(trace),
        "sha256": _sha256(out),
    }
    _emit(payload, args.json, f"wrote {out} ({trace.n_draws} draws, WAIC {payload['waic']:.2f})")
    return 0


def _cmd_compare(args) -> int:
    reports = []
    for trace_path in args.traces:
        trace = McmcTrace.load(trace_path)
        data = None
        if not args.skip_marglik:
            info = trace.input_info or {}
            candidate = Path(info.get("path", ""))
            if not candidate.exists():
                candidate = Path(trace_path).parent / candidate.name
            if not candidate.exists():
                raise ValueError(
                    f"cannot locate input data for {trace_path} (looked for {info.get('path')}); "
                    "rerun with --skip-marglik or restore the data file"
                )
            data = load_tensor_json(candidate)
        reports.append(
            build_report(trace, B=data, marglik=not args.skip_marglik,
                         reduced_mcmc=args.reduced_mcmc)
        )
    comparison = compare_models(reports)
    if args.out:
        Path(args.out).write_text(json.dumps(comparison.to_dict(), sort_keys=True) + "\n")
    if args.json:
        print(json.dumps(comparison.to_dict(), sort_keys=True))
    else:
        print(comparison.to_text())
    return 0


def _cmd_export(args) -> int:
    trace = McmcTrace.load(args.trace)
    out_dir = Path(args.out)
    written: list[Path] = []
    if args.what == "latent":
        summaries = summarize_regimes(trace)
        if args.k:
            for summ in summaries:
                summ.cluster_labels = kmeans_blocks(
                    summ.U_mean, args.k, restarts=args.restarts, seed=args.kmeans_seed
                )
        written.extend(export_latent(summaries, out_dir, node_labels=trace.node_labels))
    else:
        written.append(export_rules(trace, out_dir))
    payload = {"out": [str(p) for p in written]}
    _emit(payload, args.json, "\n".join(f"wrote {p}" for p in written))
    return 0


def _cmd_pipeline(args) -> int:
    run = RunConfig.from_sources(args.config, args.set or [])
    result = run_pipeline(run)
    text = [f"pipeline finished in {result['outdir']}"]
    if "verdict_n_breaks" in result:
        text.append(f"verdict: {result['verdict_n_breaks']} break(s)")
        text.extend(f"note: {n}" for n in result.get("notes", []))
    _emit(result, args.json, "\n".join(text))
    return 0


# ---------------------------------------------------------------------------
# parser


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="netbreaks",
        description="Bayesian change-point detection in longitudinal networks",
    )
    parser.add_argument("--version", action="version", version=f"netbreaks {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="draw a planted-partition tensor with breaks")
    g.add_argument("--scenario", default="split",
                   choices=[s.value for s in Scenario])
    g.add_argument("--n", type=int, default=10, help="base block size")
    g.add_argument("--T", type=int, default=40, help="number of layers")
    g.add_argument("--p-in", dest="p_in", type=float, default=0.5)
    g.add_argument("--p-out", dest="p_out", type=float, default=0.05)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--json", action="store_true")
    g.set_defaults(handler=_cmd_generate, stage="generate")

    c = sub.add_parser("correct", help="subtract a per-layer null model")
    c.add_argument("--input", required=True, help="tensor.json or edges.csv")
    c.add_argument("--kind", default="eigen", choices=["eigen", "modularity"])
    c.add_argument("--n-nodes", type=int, default=None)
    c.add_argument("--n-layers", type=int, default=None)
    c.add_argument("--out", required=True)
    c.add_argument("--json", action="store_true")
    c.set_defaults(handler=_cmd_correct, stage="correct")

    f = sub.add_parser("fit", help="run the Gibbs sampler")
    f.add_argument("--input", required=True, help="tensor.json or edges.csv")
    f.add_argument("--breaks", type=int, required=True, help="number of change points (M-1)")
    f.add_argument("--rank", type=int, default=2)
    f.add_argument("--burnin", type=int, default=500)
    f.add_argument("--mcmc", type=int, default=500)
    f.add_argument("--thin", type=int, default=1)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--error", default="normal", choices=["normal", "t"])
    f.add_argument("--intercept", action="store_true")
    f.add_argument("--n-nodes", type=int, default=None)
    f.add_argument("--n-layers", type=int, default=None)
    f.add_argument("--progress", action="store_true")
    for name, default in (
        ("u0", 10.0), ("u1", 1.0), ("v0", 10.0), ("v1", 1.0), ("c0", 1.0), ("d0", 1.0),
        ("a0", 1.0), ("b0", 1.0), ("nu0", 5.0), ("nu1", 5.0),
        ("beta-mean", 0.0), ("beta-var", 10.0),
    ):
        f.add_argument(f"--{name}", dest=name.replace("-", "_"), type=float, default=default)
    f.add_argument("--out", required=True)
    f.add_argument("--json", action="store_true")
    f.set_defaults(handler=_cmd_fit, stage="fit")

    m = sub.add_parser("compare", help="rank fitted models by WAIC and marginal likelihood")
    m.add_argument("traces", nargs="+", help="trace files from `fit`")
    m.add_argument("--skip-marglik", action="store_true",
                   help="skip the reduced-run marginal likelihood")
    m.add_argument("--reduced-mcmc", type=int, default=None)
    m.add_argument("--out", default=None, help="write the JSON report here")
    m.add_argument("--json", action="store_true")
    m.set_defaults(handler=_cmd_compare, stage="compare")

    e = sub.add_parser("export", help="write latent-position / generation-rule CSVs")
    e.add_argument("--trace", required=True)
    e.add_argument("--what", required=True, choices=["latent", "rules"])
    e.add_argument("--k", type=int, default=0, help="k-means cluster count (latent only)")
    e.add_argument("--restarts", type=int, default=10)
    e.add_argument("--kmeans-seed", dest="kmeans_seed", type=int, default=0)
    e.add_argument("--out", required=True, help="output directory")
    e.add_argument("--json", action="store_true")
    e.set_defaults(handler=_cmd_export, stage="export")

    p = sub.add_parser("pipeline", help="generate -> correct -> fit -> compare -> export")
    p.add_argument("--config", default=None, help="flat key=value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    p.add_argument("--json", action="store_true")
    p.set_defaults(handler=_cmd_pipeline, stage="config")

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except StageError as exc:
        print(f"error [{exc.stage}]: {exc}", file=sys.stderr)
        return STAGE_EXIT[exc.stage]
    except (ValueError, OSError, RuntimeError, FileNotFoundError) as exc:
        print(f"error [{args.stage}]: {exc}", file=sys.stderr)
        return STAGE_EXIT.get(args.stage, 1)


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()

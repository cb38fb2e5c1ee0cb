"""Command-line front end: generate, run, meta, graph, summarize.

Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

from . import plotting
from .experiments import SuiteCase, association_suite, run_grid
from .report import DEFAULT_METRICS, N_BOOT, PairingError, report_json, summarize
from .semantics import (AssociationGraph, ClassVocabulary, GraphError, MetaCodecError, build_graph,
                        cooccurrence_counts, decode_stream, encode_stream, meta_from_dict, meta_overhead,
                        meta_to_dict, parse_similarity)
from .simulator import SessionMetrics, SimConfig, SimulationError, format_chunk_log
from .sphere import InvalidInput, TileGrid
from .traces import (ParseError, SyntheticSceneSpec, SyntheticSession, format_head_trace, format_network_trace,
                     format_saliency, generate_synthetic, parse_head_trace, parse_network_trace, parse_saliency,
                     synthetic_network, synthetic_saliency)

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
FIGURE_METRICS = ("storm_stall_s", "stall_s", "bandwidth_mbps", "coverage_rate")


class UsageError(Exception):
    pass


def _read_text(path) -> str:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"no such file: {p}")
    return p.read_text(encoding="utf-8")


def _read_bytes(path) -> bytes:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"no such file: {p}")
    return p.read_bytes()


def _write(path: Path, data) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, bytes):
        path.write_bytes(data)
    else:
        path.write_text(data, encoding="utf-8", newline="\n")
    return path


def _dumps(doc) -> str:
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _emit(text: str, out) -> None:
    if out:
        _write(Path(out), text)
    else:
        sys.stdout.write(text)


# -- generate ---------------------------------------------------------------

def cmd_generate(args) -> int:
    scene = SyntheticSceneSpec.from_json(_read_text(args.scene))
    if args.seed is not None:
        scene = replace(scene, seed=args.seed)
    if args.duration <= 0 or args.rate <= 0:
        raise UsageError("--duration and --rate must be positive")
    out = Path(args.out or ".")
    session = generate_synthetic(scene, args.duration, args.rate)
    net = synthetic_network(args.duration + args.net_pad, scene.seed, args.net_lo, args.net_hi)
    files = {
        "head": _write(out / "head.csv", format_head_trace(session.trace)),
        "meta": _write(out / "meta.bin", encode_stream(session.metas)),
        "network": _write(out / "network.csv", format_network_trace(net)),
        "saliency": _write(out / "saliency.csv", format_saliency(synthetic_saliency(session, scene.seed))),
        "graph": _write(out / "graph.json", scene.graph().to_json() + "\n"),
    }
    manifest = {
        "seed": scene.seed,
        "duration_s": args.duration,
        "rate_hz": args.rate,
        "n_chunks": len(session.metas),
        "n_saccades": len(session.saccades),
        "scene": scene.to_dict(),
        "files": {k: {"path": p.name, "sha256": _sha256(p)} for k, p in files.items()},
    }
    _write(out / "manifest.json", _dumps(manifest))
    print(f"wrote {len(files) + 1} files to {out} (seed {scene.seed})")
    return EXIT_OK


# -- run --------------------------------------------------------------------

@dataclass
class ExperimentSpec:
    arms: dict
    baseline: str
    out: Path
    seed: int = 0
    n_boot: int = N_BOOT
    config: dict = field(default_factory=dict)
    sessions: list = field(default_factory=list)
    suite: dict | None = None
    base_dir: Path = Path(".")

    @classmethod
    def from_json(cls, text: str, base_dir: Path) -> "ExperimentSpec":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise UsageError(f"experiment spec is not valid JSON: {exc}") from None
        unknown = set(doc) - {"arms", "baseline", "out", "seed", "n_boot", "config", "sessions", "suite"}
        if unknown:
            raise UsageError(f"unknown experiment spec keys: {sorted(unknown)}")
        if not doc.get("arms"):
            raise UsageError("experiment spec needs a nonempty 'arms' mapping")
        baseline = doc.get("baseline", next(iter(doc["arms"])))
        if baseline not in doc["arms"]:
            raise UsageError(f"baseline {baseline!r} is not one of the arms")
        if not doc.get("sessions") and not doc.get("suite"):
            raise UsageError("experiment spec needs 'sessions' or 'suite'")
        return cls(doc["arms"], baseline, Path(doc.get("out", "run")), int(doc.get("seed", 0)),
                   int(doc.get("n_boot", N_BOOT)), doc.get("config", {}), doc.get("sessions", []),
                   doc.get("suite"), base_dir)

    def resolve(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    def validate(self) -> None:
        for i, s in enumerate(self.sessions):
            for key in ("head", "meta", "network"):
                if key not in s:
                    raise UsageError(f"session {i} lacks '{key}'")
            for key in ("head", "meta", "network", "saliency", "graph"):
                if key in s and not self.resolve(s[key]).is_file():
                    raise UsageError(f"session {i}: no such file {self.resolve(s[key])}")

    def arm_configs(self, overrides: dict) -> dict[str, SimConfig]:
        out = {}
        for name, arm in self.arms.items():
            d = {"seed": self.seed, **self.config, **arm, **overrides}
            d.setdefault("policy", name)
            out[name] = SimConfig.from_dict(d)
        return out


def _load_session(spec: ExperimentSpec, entry: dict) -> SuiteCase:
    head_path = spec.resolve(entry["head"])
    sid = entry.get("id") or str(Path(entry["head"]).with_suffix(""))
    head = parse_head_trace(_read_text(head_path), sid)
    metas = decode_stream(_read_bytes(spec.resolve(entry["meta"])))
    net = parse_network_trace(_read_text(spec.resolve(entry["network"])))
    sal = parse_saliency(_read_text(spec.resolve(entry["saliency"]))) if "saliency" in entry else None
    graph = AssociationGraph.from_json(_read_text(spec.resolve(entry["graph"]))) if "graph" in entry else None
    session = SyntheticSession(head, metas, [], None)
    return SuiteCase(session, net, sal, graph)


def _parse_overrides(pairs) -> dict:
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        try:
            out[k] = json.loads(v)
        except json.JSONDecodeError:
            out[k] = v
    return out


def _write_arm_outputs(out: Path, arm: str, runs: list[SessionMetrics], figures: bool) -> None:
    arm_dir = out / arm
    summaries = []
    for i, m in enumerate(runs):
        stem = m.session_id.replace("/", "_")
        _write(arm_dir / f"{stem}.csv", format_chunk_log(m.rows))
        summaries.append(m.summary())
        if figures and i == 0:
            plotting.plot_chunk_log(m.rows, arm_dir / f"{stem}.png", f"{arm}: {m.session_id}")
    _write(arm_dir / "metrics.json", _dumps(summaries))


def _write_report(out: Path, report: dict, figures: bool) -> None:
    _write(out / "report.json", report_json(report))
    if figures:
        for metric in FIGURE_METRICS:
            if metric in report["arms"][report["baseline"]]["mean"]:
                plotting.plot_arm_comparison(report, metric, out / "figures" / f"{metric}.png")


def _fmt(x) -> str:
    return "n/a" if x is None else f"{x:.4f}"


def cmd_run(args) -> int:
    spec_path = Path(args.spec)
    spec = ExperimentSpec.from_json(_read_text(spec_path), spec_path.parent)
    if args.seed is not None:
        spec.seed = args.seed
    if args.baseline:
        if args.baseline not in spec.arms:
            raise UsageError(f"baseline {args.baseline!r} is not one of the arms")
        spec.baseline = args.baseline
    if args.n_boot is not None:
        spec.n_boot = args.n_boot
    spec.validate()
    out = Path(args.out) if args.out else spec.resolve(spec.out)
    arms = spec.arm_configs(_parse_overrides(args.set))

    cases = [_load_session(spec, s) for s in spec.sessions]
    if spec.suite:
        suite = dict(spec.suite)
        kind = suite.pop("kind", "association")
        if kind != "association":
            raise UsageError(f"unknown suite kind {kind!r}")
        seeds = suite.pop("seeds", [0, 1])
        want_sal = any(c.policy == "saliency_topk" for c in arms.values())
        cases += association_suite(seeds, with_saliency=want_sal, **suite)

    results = run_grid(arms, cases, jobs=max(1, args.jobs))
    for arm, runs in results.items():
        _write_arm_outputs(out, arm, runs, not args.no_figures)
    paired = {arm: [(m, arms[arm].seed) for m in runs] for arm, runs in results.items()}
    report = summarize(paired, spec.baseline, DEFAULT_METRICS, spec.n_boot, spec.seed)
    report["arm_configs"] = {a: c.to_dict() for a, c in arms.items()}
    _write_report(out, report, not args.no_figures)
    for arm in sorted(results):
        mean = report["arms"][arm]["mean"]
        shown = ("storm_stall_s", "bandwidth_mbps", "coverage_rate")
        print(f"{arm}: " + " ".join(f"{k}={_fmt(mean[k])}" for k in shown))
    print(f"report: {out / 'report.json'}")
    return EXIT_OK


# -- meta -------------------------------------------------------------------

def _stats_line(n_chunks: int, chunk_s: float, stream_mbps: float) -> str:
    o = meta_overhead(chunk_s=chunk_s, stream_mbps=stream_mbps)
    return (f"{o['bytes_per_chunk']} B/chunk, {o['kbps']:.3f} Kbps, "
            f"{100 * o['fraction_of_stream']:.3f}% of a {stream_mbps:g} Mbps stream ({n_chunks} chunks)")


def cmd_meta(args) -> int:
    if args.action == "encode":
        try:
            doc = json.loads(_read_text(args.input))
        except json.JSONDecodeError as exc:
            raise UsageError(f"metadata JSON is malformed: {exc}") from None
        if not isinstance(doc, dict) or "chunks" not in doc:
            raise UsageError("metadata JSON needs a 'chunks' list")
        grid = TileGrid(*doc.get("grid", (8, 8)))
        try:
            metas = [meta_from_dict(c, grid) for c in doc["chunks"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise UsageError(f"malformed chunk entry: {exc}") from None
        blob = encode_stream(metas)
        if args.out:
            _write(Path(args.out), blob)
        else:
            sys.stdout.buffer.write(blob)
    else:
        metas = decode_stream(_read_bytes(args.input))
        doc = {"grid": [8, 8], "chunks": [meta_to_dict(m) for m in metas]}
        _emit(_dumps(doc), args.out)
    if args.stats:
        print(_stats_line(len(metas), args.chunk_s, args.stream_mbps), file=sys.stderr if not args.out else sys.stdout)
    return EXIT_OK


# -- graph ------------------------------------------------------------------

def cmd_graph(args) -> int:
    head = parse_head_trace(_read_text(args.trace), Path(args.trace).stem)
    metas = decode_stream(_read_bytes(args.meta))
    if args.similarity:
        names, sim = parse_similarity(_read_text(args.similarity))
        n = len(names)
    else:
        n = args.classes
        names, sim = None, [[0.0] * n for _ in range(n)]
    cooc = cooccurrence_counts(head, metas, (args.fov, args.fov), n_classes=n)
    vocab = ClassVocabulary(tuple(names)) if names else None
    graph = build_graph(cooc, sim, args.lam, args.top_k, vocab)
    _emit(graph.to_json() + "\n", args.out)
    return EXIT_OK


# -- summarize --------------------------------------------------------------

def cmd_summarize(args) -> int:
    run_dir = Path(args.run_dir)
    if not run_dir.is_dir():
        raise UsageError(f"no such run directory: {run_dir}")
    runs = {}
    for mfile in sorted(run_dir.glob("*/metrics.json")):
        rows = json.loads(mfile.read_text(encoding="utf-8"))
        runs[mfile.parent.name] = [(SessionMetrics.from_summary(r), args.seed or 0) for r in rows]
    if not runs:
        raise UsageError(f"no */metrics.json under {run_dir}")
    report = summarize(runs, args.baseline, DEFAULT_METRICS, args.n_boot or N_BOOT, args.seed or 0)
    out = Path(args.out) if args.out else run_dir
    _write_report(out, report, not args.no_figures)
    print(f"report: {out / 'report.json'}")
    return EXIT_OK


# -- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="seed override (scene seed, report seed)")
    common.add_argument("--out", default=None, help="output directory (generate/run/summarize) or file (meta/graph)")
    common.add_argument("--jobs", type=int, default=1, help="parallel sessions for run")

    p = argparse.ArgumentParser(prog="semtile", description="Semantic tiled-streaming simulator and tools.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="synthesize head, network, saliency and sidecar files")
    g.add_argument("scene", help="scene spec JSON")
    g.add_argument("--duration", type=float, default=600.0, help="seconds")
    g.add_argument("--rate", type=float, default=100.0, help="head samples per second")
    g.add_argument("--net-lo", type=float, default=5.0)
    g.add_argument("--net-hi", type=float, default=20.0)
    g.add_argument("--net-pad", type=float, default=2.0, help="extra network seconds past the head trace")
    g.set_defaults(func=cmd_generate)

    r = sub.add_parser("run", parents=[common], help="run an experiment grid and write logs plus a report")
    r.add_argument("spec", help="experiment spec JSON")
    r.add_argument("--baseline", default=None)
    r.add_argument("--n-boot", type=int, default=None)
    r.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override applied to every arm")
    r.add_argument("--no-figures", action="store_true")
    r.set_defaults(func=cmd_run)

    m = sub.add_parser("meta", parents=[common], help="encode or decode 304-byte sidecar streams")
    m.add_argument("action", choices=("encode", "decode"))
    m.add_argument("input")
    m.add_argument("--stats", action="store_true", help="print bytes per chunk and bitrate")
    m.add_argument("--chunk-s", type=float, default=1.0)
    m.add_argument("--stream-mbps", type=float, default=15.0)
    m.set_defaults(func=cmd_meta)

    gr = sub.add_parser("graph", parents=[common], help="build an association graph from a trace and sidecars")
    gr.add_argument("--trace", required=True, help="head trace CSV")
    gr.add_argument("--meta", required=True, help="sidecar stream")
    gr.add_argument("--similarity", default=None, help="class similarity CSV (defines the class list)")
    gr.add_argument("--classes", type=int, default=32, help="class count when no similarity file is given")
    gr.add_argument("--lam", type=float, default=0.5)
    gr.add_argument("--top-k", type=int, default=3)
    gr.add_argument("--fov", type=float, default=90.0)
    gr.set_defaults(func=cmd_graph)

    s = sub.add_parser("summarize", parents=[common], help="rebuild a report from a run directory")
    s.add_argument("run_dir")
    s.add_argument("--baseline", required=True)
    s.add_argument("--n-boot", type=int, default=None)
    s.add_argument("--no-figures", action="store_true")
    s.set_defaults(func=cmd_summarize)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (UsageError, InvalidInput, ParseError, MetaCodecError, GraphError, PairingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SimulationError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``compbalance <command> [--config FILE] [overrides]``.

Exit codes: 0 success, 1 check or runtime failure, 2 usage or config error.
Every command writes into ``<out>/<run hash>/`` so distinct configurations
never overwrite each other.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
from pathlib import Path

import yaml

from . import io
from .conditions import save_layout
from .gradcheck import run_gradcheck
from .layoutgen import LayoutParseError, LayoutRequestError
from .pipeline import (
    RolloutError,
    RunConfig,
    ablate,
    build_scene,
    config_from_dict,
    config_hash,
    resolve_layout,
    run,
    sweep_beta,
    sweep_spearman,
)
from .testbed import save_mixture

log = logging.getLogger("compbalance")

COMMANDS = ("generate", "sweep-beta", "gradcheck", "ablate", "dump-attn", "make-testbed", "layout")
DEFAULT_BETAS = (0.0, 0.25, 0.5, 0.75, 1.0)


class UsageError(Exception):
    pass


def _parse_seeds(text: str) -> list[int]:
    """``N`` means seeds 0..N-1; ``a,b,c`` is an explicit list; ``a:b`` a half-open range."""
    try:
        if "," in text:
            return [int(s) for s in text.split(",") if s.strip()]
        if ":" in text:
            lo, hi = text.split(":")
            return list(range(int(lo), int(hi)))
        n = int(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}") from exc
    if n < 1:
        raise argparse.ArgumentTypeError("seed count must be >= 1")
    return list(range(n))


def _parse_betas(text: str) -> list[float]:
    try:
        betas = [float(b) for b in text.split(",") if b.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad beta list {text!r}") from exc
    if not betas or any(not 0.0 <= b <= 1.0 for b in betas):
        raise argparse.ArgumentTypeError("betas must be a non-empty list of values in [0, 1]")
    return betas


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML run config (every field has a default)")
    common.add_argument("--seed", type=int)
    common.add_argument("--t0", type=int, help="balancing threshold step (steps above use the spatial branch only)")
    common.add_argument("--rho", type=float, help="coefficient learning rate")
    common.add_argument("--gradient-mode", choices=("paper", "full"))
    common.add_argument("--jacobian-mode", choices=("paper", "consistent"))
    common.add_argument("--prompt")
    common.add_argument("--out", type=Path, default=Path("out"), help="output root (default: ./out)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(
        prog="compbalance", description="Balanced text and layout denoising on an analytic blobworld testbed."
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    p = sub.add_parser("generate", parents=[common], help="one rollout: sample, metrics, trajectory")
    p.add_argument("--save-grids", action="store_true", help="also dump per-step coefficient/gradient grids")
    p = sub.add_parser("sweep-beta", parents=[common], help="layout-gate sweep of pure spatial rollouts")
    p.add_argument("--beta-list", type=_parse_betas, default=list(DEFAULT_BETAS))
    p.add_argument("--seeds", type=_parse_seeds, default=list(range(50)))
    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    p.add_argument("--size", type=int, default=8)
    p.add_argument("--rtol", type=float, default=1e-3)
    p = sub.add_parser("ablate", parents=[common], help="dynamic balancer vs frozen equal influence")
    p.add_argument("--seeds", type=_parse_seeds, default=list(range(50)))
    sub.add_parser("dump-attn", parents=[common], help="run once and write per-token attention maps")
    sub.add_parser("make-testbed", parents=[common], help="write the text and layout mixtures as JSON")
    sub.add_parser("layout", parents=[common], help="prompt to layout JSON (LLM endpoint or offline stub)")
    return parser


def load_config(args) -> RunConfig:
    data = {}
    if args.config is not None:
        if not args.config.is_file():
            raise UsageError(f"config file not found: {args.config}")
        try:
            data = yaml.safe_load(args.config.read_text()) or {}
        except yaml.YAMLError as exc:
            raise UsageError(f"config is not valid YAML: {exc}") from exc
        if not isinstance(data, dict):
            raise UsageError("config must be a mapping at the top level")
    try:
        config = config_from_dict(data)
        top = {}
        if args.seed is not None:
            top["seed"] = args.seed
        if args.t0 is not None:
            top["t0"] = args.t0
        if args.prompt is not None:
            top["prompt"] = args.prompt
        bal = {}
        if args.rho is not None:
            bal["rho"] = args.rho
        if args.gradient_mode is not None:
            bal["gradient_mode"] = args.gradient_mode
        if args.jacobian_mode is not None:
            bal["jacobian_mode"] = args.jacobian_mode
        if bal:
            top["balancer"] = dataclasses.replace(config.balancer, **bal)
        return dataclasses.replace(config, **top) if top else config
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}") from exc


def run_dir(out: Path, config: RunConfig, command: str, extra=None) -> Path:
    key = config_hash(config)
    if command != "generate" or extra:
        blob = json.dumps([key, command, extra], sort_keys=True).encode()
        key = hashlib.sha256(blob).hexdigest()[:16]
    path = out / key
    path.mkdir(parents=True, exist_ok=True)
    (path / "resolved-config.yaml").write_text(yaml.safe_dump(config.to_dict(), sort_keys=True))
    return path


def _print_json(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def cmd_generate(args, config: RunConfig) -> int:
    path = run_dir(args.out, config, "generate")
    try:
        result = run(config, record_grids=args.save_grids)
    except RolloutError as exc:
        io.write_json({"error": str(exc), **exc.diagnostics}, path / "diagnostics.json")
        raise
    io.save_raw(result.sample, path / "sample.npy")
    io.save_sample_png(result.sample, path / "sample.png")
    io.write_json(result.metrics.to_json(), path / "metrics.json")
    io.write_jsonl([r.to_json() for r in result.trajectory], path / "trajectory.jsonl")
    if result.trajectory:
        io.plot_grad_norms([r.to_json() for r in result.trajectory], path / "grad_norms.png")
    for entry in result.grids:
        t = entry["t"]
        for name in ("coe_text", "coe_spatial", "grad_text", "grad_spatial"):
            io.write_grid_csv(entry[name], path / f"grid_{name}_t{t:03d}.csv")
            io.save_heatmap_png(entry[name], path / f"grid_{name}_t{t:03d}.png")
    summary = result.metrics.to_json()
    summary.update(run_dir=str(path), sample_sha256=io.array_hash(result.sample), balanced_steps=len(result.trajectory))
    _print_json(summary)
    return 0


def cmd_sweep_beta(args, config: RunConfig) -> int:
    path = run_dir(args.out, config, "sweep-beta", {"betas": args.beta_list, "seeds": args.seeds})
    rows = sweep_beta(config, args.beta_list, args.seeds)
    rho = sweep_spearman(rows) if len(rows) > 1 else float("nan")
    io.write_json({"rows": rows, "spearman": rho}, path / "sweep.json")
    with open(path / "sweep.csv", "w") as fh:
        fh.write("beta,in_box_mass,realism_proxy\n")
        for r in rows:
            fh.write(f"{r['beta']!r},{r['in_box_mass']!r},{r['realism_proxy']!r}\n")
    print(f"{'beta':>6} {'in_box_mass':>12} {'realism':>12}")
    for r in rows:
        print(f"{r['beta']:6.2f} {r['in_box_mass']:12.5f} {r['realism_proxy']:12.3f}")
    print(f"spearman(beta, in_box_mass) = {rho:.4f}")
    print(f"written to {path}")
    return 0


def cmd_gradcheck(args, config: RunConfig) -> int:
    gradient_mode = args.gradient_mode or "full"
    results = run_gradcheck(
        size=args.size,
        steps=(config.schedule.T // 2, max(1, config.schedule.T // 5)),
        seed=config.seed,
        eta=config.schedule.eta,
        gradient_mode=gradient_mode,
        jacobian_mode=config.balancer.jacobian_mode,
        rtol=args.rtol,
    )
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    if failed:
        cells = "; ".join(f"{r.name.strip()} at {r.worst_cell}" for r in failed)
        print(f"gradcheck FAILED ({len(failed)}/{len(results)}): {cells}", file=sys.stderr)
        return 1
    print(f"gradcheck passed ({len(results)} checks, rtol={args.rtol:g})")
    return 0


def cmd_ablate(args, config: RunConfig) -> int:
    path = run_dir(args.out, config, "ablate", {"seeds": args.seeds})
    out = ablate(config, args.seeds, keep_samples=True)
    for seed, dyn, frz in out.pop("samples"):
        io.save_raw(dyn, path / f"sample_dynamic_s{seed}.npy")
        io.save_raw(frz, path / f"sample_frozen_s{seed}.npy")
    io.write_json(out, path / "ablation.json")
    for key, v in out["summary"].items():
        print(f"{key:18s} dynamic={v['dynamic']:.8g} frozen={v['frozen']:.8g} delta={v['delta']:+.3e}")
    print(f"written to {path}")
    return 0


def cmd_dump_attn(args, config: RunConfig) -> int:
    path = run_dir(args.out, config, "dump-attn")
    scene = build_scene(config)
    result = run(config, scene)
    tokens = scene.tokens.tokens
    for label, maps in (("text", result.attn_text), ("spatial", result.attn_spatial)):
        io.save_raw(maps.maps, path / f"attn_{label}.npy")
        io.save_attention_pngs(maps.maps, tokens, path / label, prefix="attn")
    io.write_json({"tokens": list(tokens), "object_token_indices": list(scene.tokens.object_token_indices)},
                  path / "tokens.json")
    print(f"attention maps for {len(tokens)} tokens written to {path}")
    return 0


def cmd_make_testbed(args, config: RunConfig) -> int:
    path = run_dir(args.out, config, "make-testbed")
    scene = build_scene(config)
    save_mixture(scene.text_spec, path / "text_mixture.json")
    save_mixture(scene.layout_spec, path / "layout_mixture.json")
    save_layout(scene.layout, path / "layout.json")
    io.save_sample_png(scene.layout_spec.means[0], path / "layout_component0.png")
    print(f"{len(scene.text_spec)} text components, {len(scene.layout_spec)} layout components -> {path}")
    return 0


def cmd_layout(args, config: RunConfig) -> int:
    layout, _ = resolve_layout(config)
    _print_json(layout.to_json())
    return 0


HANDLERS = {
    "generate": cmd_generate,
    "sweep-beta": cmd_sweep_beta,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
    "dump-attn": cmd_dump_attn,
    "make-testbed": cmd_make_testbed,
    "layout": cmd_layout,
}


def _error_line(kind: str, exc: BaseException) -> None:
    print(json.dumps({"error": kind, "type": type(exc).__name__, "message": str(exc)}), file=sys.stderr)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        config = load_config(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        _error_line("usage", exc)
        return 2
    try:
        return HANDLERS[args.command](args, config)
    except (LayoutParseError, LayoutRequestError, RolloutError, FloatingPointError, OSError) as exc:
        _error_line("runtime", exc)
        return 1
    except ValueError as exc:
        _error_line("config", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())

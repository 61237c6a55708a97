"""Command-line entry point.

Subcommands: ``run`` (train a stream from a config file), ``verify-theorem``
(distortion-bound sweep), ``gradcheck`` (finite-difference audit of every
loss), ``synth`` (write a synthetic dataset directory), and
``export-prototypes`` (dump prototypes as TSV). ``GOTHAM_SEED`` provides the
seed when no flag is given. Exit codes: 0 success, 1 runtime failure,
2 invalid arguments or input validation failure.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig
from .graphstore import DatasetError, load_dataset, synth_generate, write_dataset

__all__ = ["main", "build_parser"]


def _seed_default() -> int:
    env = os.environ.get("GOTHAM_SEED")
    return int(env) if env else 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gotham",
                                description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train and evaluate a class stream")
    run.add_argument("--config", required=True, help="JSON run configuration")
    run.add_argument("--seed", type=int, default=None,
                     help="override the config seed (GOTHAM_SEED also honored)")
    run.add_argument("--out", default=None, help="output directory override")
    run.add_argument("--dataset", default=None, help="dataset directory override")
    run.add_argument("--mode", default=None, help="run mode override")

    vt = sub.add_parser("verify-theorem", help="distortion lower-bound sweep")
    vt.add_argument("--trials", type=int, default=1000)
    vt.add_argument("--repetitions", type=int, default=20)
    vt.add_argument("--seed", type=int, default=None)
    vt.add_argument("--widths", type=int, nargs="+", default=[1, 4, 16])
    vt.add_argument("--xis", type=float, nargs="+", default=[0.1, 0.5])
    vt.add_argument("--betas", type=float, nargs="+", default=[0.01, 0.2])
    vt.add_argument("--out", default=None, help="write the JSON report here")

    gc = sub.add_parser("gradcheck", help="finite-difference audit of losses")
    gc.add_argument("--seed", type=int, default=None)
    gc.add_argument("--h", type=float, default=1e-4)
    gc.add_argument("--tol", type=float, default=1e-4)
    gc.add_argument("--coords", type=int, default=60,
                    help="coordinates sampled per loss")
    gc.add_argument("--inject-bug", action="store_true",
                    help="corrupt one gradient to prove the check can fail")
    gc.add_argument("--out", default=None)

    sy = sub.add_parser("synth", help="generate a synthetic dataset directory")
    sy.add_argument("--out", required=True)
    sy.add_argument("--seed", type=int, default=None)
    sy.add_argument("--blocks", type=int, default=8)
    sy.add_argument("--nodes-per-block", type=int, default=30)
    sy.add_argument("--p-in", type=float, default=0.3)
    sy.add_argument("--p-out", type=float, default=0.02)
    sy.add_argument("--dim", type=int, default=16)
    sy.add_argument("--base-classes", type=int, default=None)
    sy.add_argument("--novel-per-session", type=int, default=1)
    sy.add_argument("--zero-shot", type=int, nargs="*", default=[])
    sy.add_argument("--k", type=int, default=5)
    sy.add_argument("--separation", type=float, default=4.0)

    ex = sub.add_parser("export-prototypes", help="write prototypes as TSV")
    ex.add_argument("--checkpoint", required=True)
    ex.add_argument("--dataset", required=True)
    ex.add_argument("--mode", default="gfscil_plain")
    ex.add_argument("--session", type=int, default=None,
                    help="defaults to the final session")
    ex.add_argument("--seed", type=int, default=None)
    ex.add_argument("--k", type=int, default=5)
    ex.add_argument("--out", required=True)
    return p


def cmd_run(args) -> int:
    from .trainer import run_stream
    cfg_path = Path(args.config)
    if not cfg_path.exists():
        print(f"error: config file not found: {cfg_path}", file=sys.stderr)
        return 2
    cfg = RunConfig.from_json(cfg_path)
    if args.dataset:
        cfg = cfg.replace(dataset=args.dataset)
    if args.mode:
        cfg = cfg.replace(mode=args.mode)
    if args.out:
        cfg = cfg.replace(out_dir=args.out)
    seed = args.seed if args.seed is not None else \
        (int(os.environ["GOTHAM_SEED"]) if os.environ.get("GOTHAM_SEED") else None)
    if seed is not None:
        cfg = cfg.replace(seed=seed)
    if not cfg.dataset or not Path(cfg.dataset).is_dir():
        print(f"error: dataset directory not found: {cfg.dataset}", file=sys.stderr)
        return 2
    bundle = load_dataset(cfg.dataset)
    reports = run_stream(bundle, cfg, out_dir=cfg.out_dir)
    for r in reports:
        tag = "base" if r.session == 0 else f"s{r.session}"
        unseen = "" if r.unseen_acc is None else f"  unseen={r.unseen_acc:.4f}"
        print(f"{tag}\tclasses={r.n_classes}\toverall={r.overall:.4f}"
              f"\tseen={r.seen_acc:.4f}{unseen}")
    print(f"artifacts written to {cfg.out_dir}")
    return 0


def cmd_verify_theorem(args) -> int:
    from .theorem import default_sweep
    seed = args.seed if args.seed is not None else _seed_default()
    result = default_sweep(trials=args.trials, repetitions=args.repetitions,
                           seed=seed, widths=tuple(args.widths),
                           xis=tuple(args.xis), betas=tuple(args.betas))
    for rep in result["reports"]:
        c = rep["config"]
        status = "pass" if rep["pass"] else "FAIL"
        print(f"N={c['n_units']:<3d} xi={c['xi']:<4g} beta={c['beta']:<5g} "
              f"delta={rep['delta_hat']:.6g} rhs={rep['rhs_appendix']:.6g} "
              f"violations={rep['violations']}/{rep['repetitions']} {status}")
    print(f"rank correlation (width vs distortion): "
          f"{result['rank_correlation_width_vs_distortion']:.3f}")
    print("ALL PASS" if result["all_pass"] else "BOUND VIOLATED")
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(json.dumps(result, indent=1, sort_keys=True) + "\n",
                                  encoding="utf-8")
    return 0 if result["all_pass"] else 1


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_gradcheck
    seed = args.seed if args.seed is not None else _seed_default()
    results = run_gradcheck(seed=seed, h=args.h, tol=args.tol,
                            n_coords=args.coords, inject_bug=args.inject_bug)
    ok = True
    for name, rep in results.items():
        status = "pass" if rep.passed else "FAIL"
        ok = ok and rep.passed
        print(f"{name:<24s} max_rel_err={rep.max_rel_err:.3e} "
              f"checked={rep.n_checked} kinks_skipped={rep.n_kink_skipped} {status}")
    if args.out:
        payload = {name: {"max_rel_err": r.max_rel_err, "n_checked": r.n_checked,
                          "n_kink_skipped": r.n_kink_skipped, "pass": r.passed}
                   for name, r in results.items()}
        Path(args.out).write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n",
                                  encoding="utf-8")
    print("ALL PASS" if ok else "GRADIENT MISMATCH")
    return 0 if ok else 1


def cmd_synth(args) -> int:
    seed = args.seed if args.seed is not None else _seed_default()
    bundle = synth_generate(seed, args.blocks, args.nodes_per_block,
                            args.p_in, args.p_out, args.dim,
                            mean_separation=args.separation,
                            n_base=args.base_classes,
                            novel_per_session=args.novel_per_session,
                            zero_shot_classes=args.zero_shot, k_shot=args.k)
    write_dataset(bundle, args.out)
    n = bundle.graph.num_nodes
    print(f"wrote {n} nodes, {bundle.schedule.num_sessions} sessions to {args.out}")
    return 0


def cmd_export_prototypes(args) -> int:
    from . import nn as network
    from .prototypes import build_prototype_set
    from .sampler import build_class_split, extend_support, Episode
    from .graphstore import graph_at

    model = network.load_model(args.checkpoint)
    bundle = load_dataset(args.dataset)
    t = args.session if args.session is not None else bundle.schedule.num_sessions
    seed = args.seed if args.seed is not None else _seed_default()
    split = build_class_split(bundle, args.k, anchor_seed=seed)
    graph = graph_at(bundle, t)
    rng = np.random.default_rng(seed)
    extended = {cls: extend_support(graph, split.anchors[cls], 3, 5, rng)
                for cls in bundle.schedule.seen_at(t)}
    episode = Episode(session=t, support={}, extended_support=extended, query=())
    protos = build_prototype_set(model, bundle, episode, args.mode)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as fh:
        fh.write("class_id\tkind\tvector\n")
        for cls in sorted(protos):
            p = protos[cls]
            vec = " ".join(repr(float(x)) for x in p.vector)
            fh.write(f"{cls}\t{p.kind}\t{vec}\n")
    print(f"wrote {len(protos)} prototypes to {out}")
    return 0


_HANDLERS = {
    "run": cmd_run,
    "verify-theorem": cmd_verify_theorem,
    "gradcheck": cmd_gradcheck,
    "synth": cmd_synth,
    "export-prototypes": cmd_export_prototypes,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _HANDLERS[args.command](args)
    except (DatasetError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"runtime error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``policyflow {train,sample,teacher-sample,eval,toyfit,plot}``.

Exit codes: 0 success, 1 configuration / validation error, 2 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import os
import sys


from . import distill, ode
from . import student as st
from .config import ConfigError, load_config, parse_config
from .metrics import evaluate
from .plot import write_scatter
from .policy import smooth_targets, toyfit
from .teacher import read_dataset_csv, write_samples_csv

EXIT_CONFIG = 1
EXIT_NUMERIC = 2


def _write_json(path: str, doc: dict) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _labels_or_none(teacher, n):
    return distill.eval_labels(teacher, n) if len(teacher.class_ids) > 1 else None


def cmd_train(args) -> int:
    rc = load_config(args.config)
    out = rc.io.out_dir
    os.makedirs(out, exist_ok=True)
    # the resolved config is written before any compute
    with open(os.path.join(out, "resolved_config.json"), "w") as fh:
        fh.write(rc.dumps())
    dataset = read_dataset_csv(rc.io.dataset_csv) if rc.io.dataset_csv else None
    trainer = distill.Distiller(rc.teacher, rc.student, rc.train, dataset)
    log_path = os.path.join(out, "train_log.jsonl")
    if args.resume:
        scfg, state, _ = st.load_checkpoint(args.resume)
        if scfg != rc.student:
            raise ConfigError("checkpoint student config does not match the run config")
    else:
        state = st.TrainState.fresh(st.init_params(rc.student, rc.seed), rc.seed)
        open(log_path, "w").close()
    reference = None
    if rc.train.eval_every:
        reference = distill.sample_teacher(rc.teacher, rc.train.eval_samples, rc.seed + 1,
                                           rc.eval.reference["teacher_substeps"], rc.train.shift)
    state = trainer.train(state, log_path=log_path, reference=reference, eval_seed=rc.seed + 2)
    st.save_checkpoint(os.path.join(out, "checkpoint.json"), rc.student, state, rc.to_dict())
    print(f"trained {state.iteration} iterations -> {os.path.join(out, 'checkpoint.json')}")
    return 0


def cmd_sample(args) -> int:
    scfg, state, run = st.load_checkpoint(args.ckpt)
    if run is None:
        raise ConfigError("checkpoint carries no run_config; cannot recover the teacher and schedule")
    rc = parse_config(run)
    rollout = rc.rollout
    if args.temperature is not None:
        rollout = ode.RolloutConfig(rollout.substep, rollout.window_dtau, args.temperature,
                                    rollout.final_temperature, rollout.record_trajectory)
    params = state.params if args.raw_params else state.ema_params
    nfe = args.nfe or rc.train.nfe
    record = args.trajectories is not None
    res = distill.sample_student(scfg, params, rc.teacher, args.n, args.seed, rc.train.shift, nfe,
                                 rc.train.final_step_scale, rollout, record=record)
    x = res[0] if record else res
    write_samples_csv(args.out, x, _labels_or_none(rc.teacher, args.n))
    if record:
        _write_trajectories(args.trajectories, res[1], min(args.n, args.max_trajectories))
    return 0


def _write_trajectories(out_dir: str, trajs, n: int) -> None:
    """One CSV per sample, segments concatenated (segment end points appear once)."""
    os.makedirs(out_dir, exist_ok=True)
    for b in range(n):
        rows = []
        for k, tr in enumerate(trajs):
            taus, ts, xs = tr.row(b)
            start = 1 if k else 0
            rows += [(taus[i], ts[i], xs[i]) for i in range(start, len(taus))]
        with open(os.path.join(out_dir, f"trajectory_{b:05d}.csv"), "w") as fh:
            fh.write("tau,t," + ",".join(f"dim{i}" for i in range(len(rows[0][2]))) + "\n")
            for tau, t, xv in rows:
                fh.write(",".join(repr(float(v)) for v in (tau, t, *xv)) + "\n")


def cmd_teacher_sample(args) -> int:
    rc = load_config(args.config)
    x = distill.sample_teacher(rc.teacher, args.n, args.seed, args.substeps, rc.train.shift)
    write_samples_csv(args.out, x, _labels_or_none(rc.teacher, args.n))
    return 0


def cmd_eval(args) -> int:
    a = read_dataset_csv(args.samples).samples
    b = read_dataset_csv(args.reference).samples
    if args.paired and a.shape != b.shape:
        raise ConfigError(f"--paired needs equal sample counts ({len(a)} vs {len(b)})")
    rep = evaluate(a, b, paired=args.paired, n_projections=args.projections, seed=args.projection_seed)
    _write_json(args.out, rep.to_dict())
    return 0


def cmd_toyfit(args) -> int:
    rc = load_config(args.config)
    tf = rc.toyfit
    if tf is None:
        raise ConfigError("config has no toyfit section")
    targets = smooth_targets(tf.n_targets, tf.L * tf.C, tf.seed)
    res = toyfit(targets, tf.K, tf.C, tf.L, tf.iters, tf.lr, tf.seed, tf.tol)
    if res.diverged:
        print(f"error: toyfit diverged at iteration {res.iterations}", file=sys.stderr)
        return EXIT_NUMERIC
    g = res.policy.gm
    _write_json(args.out, {
        "version": 1,
        "K": tf.K, "L": tf.L, "C": tf.C,
        "logits": g.logits.tolist(), "means_x0": g.means.tolist(), "log_s": float(g.log_s),
        "x_src": res.policy.x_src.tolist(), "t_src": float(res.policy.t_src),
        "residual": res.residual, "iterations": res.iterations,
        "targets": [{"t": t, "x": list(map(float, x)), "u": list(map(float, u))} for t, x, u in targets],
    })
    print(f"toyfit residual {res.residual:.3e} after {res.iterations} iterations")
    return 0


def cmd_plot(args) -> int:
    a = read_dataset_csv(args.samples).samples
    b = read_dataset_csv(args.overlay).samples if args.overlay else None
    write_scatter(args.out, a, b, title=args.title or "")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="policyflow", description="Policy-based few-step flow distillation lab.")
    sub = p.add_subparsers(dest="cmd", required=True)

    t = sub.add_parser("train", help="distill a student from a config")
    t.add_argument("--config", required=True)
    t.add_argument("--resume")
    t.set_defaults(fn=cmd_train)

    s = sub.add_parser("sample", help="few-step student samples from a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--nfe", type=int)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--trajectories")
    s.add_argument("--max-trajectories", type=int, default=32)
    s.add_argument("--temperature", type=float)
    s.add_argument("--raw-params", action="store_true", help="use the raw (non-EMA) parameters")
    s.set_defaults(fn=cmd_sample)

    ts = sub.add_parser("teacher-sample", help="reference samples from the analytic teacher")
    ts.add_argument("--config", required=True)
    ts.add_argument("--substeps", type=int, default=128)
    ts.add_argument("--n", type=int, required=True)
    ts.add_argument("--seed", type=int, required=True)
    ts.add_argument("--out", required=True)
    ts.set_defaults(fn=cmd_teacher_sample)

    e = sub.add_parser("eval", help="compare two sample files")
    e.add_argument("--samples", required=True)
    e.add_argument("--reference", required=True)
    e.add_argument("--paired", action="store_true")
    e.add_argument("--projections", type=int, default=256)
    e.add_argument("--projection-seed", type=int, default=0)
    e.add_argument("--out", required=True)
    e.set_defaults(fn=cmd_eval)

    f = sub.add_parser("toyfit", help="fit a free GM policy to smooth trajectory targets")
    f.add_argument("--config", required=True)
    f.add_argument("--out", required=True)
    f.set_defaults(fn=cmd_toyfit)

    pl = sub.add_parser("plot", help="SVG scatter of a sample file")
    pl.add_argument("--samples", required=True)
    pl.add_argument("--overlay")
    pl.add_argument("--title")
    pl.add_argument("--out", required=True)
    pl.set_defaults(fn=cmd_plot)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    for name in ("n", "nfe", "substeps"):
        v = getattr(args, name, None)
        if v is not None and v < 1:
            print(f"error: --{name} must be >= 1", file=sys.stderr)
            return EXIT_CONFIG
    try:
        return args.fn(args)
    except ode.NumericalError as err:
        print(f"error: numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except FloatingPointError as err:
        print(f"error: numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ValueError, KeyError, TypeError, OSError) as err:
        msg = str(err).splitlines()[0] if str(err) else type(err).__name__
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

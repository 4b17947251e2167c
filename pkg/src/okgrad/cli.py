"""Command-line entry point: ``okgrad train | noise | oracle | bench``.

CSV schemas
  train:  step,loss_bpc,tag,updates_done   (tag = curriculum length or "train")
          plus <out>.timing.csv with step,wallclock_s
  noise:  step,cosine,true_norm,approx_norm,filtered   (one file per repetition)
          plus <out>_aggregate.csv with step,mean_cosine,std_cosine,count
  bench:  algo,units,batch,state_bytes_per_lane,ms_per_step

Exit codes: 0 success, 1 runtime failure (missing data, divergence, oracle
FAIL, memory cap), 2 bad usage. ``OKGRAD_THREADS`` caps the BLAS thread pool.
"""

import argparse
import csv
import os
import sys
import time

import numpy as np
from threadpoolctl import threadpool_limits

from . import analysis, approximators, kronsum, lowrank, rnn, train

ORACLE_TOL = 1e-9


def _algo(text):
    try:
        approximators.parse_algo(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None
    return text


def _floats(text):
    try:
        return np.array([float(t) for t in text.split(",") if t.strip()])
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _dims(text):
    try:
        rows, cols = (int(t) for t in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected ROWSxCOLS, got {text!r}") from None
    if rows < 1 or cols < 1:
        raise argparse.ArgumentTypeError("dimensions must be positive")
    return rows, cols


def build_parser():
    p = argparse.ArgumentParser(prog="okgrad", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train an RHN on the Copy task or a character corpus")
    t.add_argument("task", choices=("copy", "lm"))
    t.add_argument("--algo", type=_algo, default="ok:4", help=approximators.ALGO_GRAMMAR)
    t.add_argument("--units", type=int, default=64)
    t.add_argument("--batch", type=int, default=16)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--steps", type=int, default=1000)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--data", help="UTF-8 text file for the lm task")
    t.add_argument("--eval-every", type=int, default=100)
    t.add_argument("--reset-prob", type=float, default=0.01)
    t.add_argument("--out", required=True, help="CSV path for run records")
    t.add_argument("--checkpoint", help="final checkpoint path (default <out>.ckpt)")

    n = sub.add_parser("noise", help="cosine between approximate and exact RTRL gradients on a frozen net")
    src = n.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--init-units", type=int, help="use a fresh untrained net with this many units")
    n.add_argument("--vocab", type=int, default=50, help="symbols for a fresh net")
    n.add_argument("--algo", type=_algo, required=True)
    n.add_argument("--steps", type=int, default=1000)
    n.add_argument("--repetitions", type=int, default=1)
    n.add_argument("--seed", type=int, default=0)
    n.add_argument("--filter", type=float, default=analysis.FILTER_THRESHOLD)
    n.add_argument("--oracle-cap-mb", type=float, default=analysis.ORACLE_BYTES_CAP / 2**20)
    n.add_argument("--out", required=True, help="output prefix")

    o = sub.add_parser("oracle", help="exhaustive sign enumeration of the unbiased estimators")
    o.add_argument("kind", choices=("opt-diag", "opt", "ok", "ok-case1", "sign-trick", "ktp"))
    o.add_argument("--d", type=_floats, help="diagonal for opt-diag")
    o.add_argument("--dims", type=_dims, default=(3, 3))
    o.add_argument("--rank", type=int, default=1)
    o.add_argument("--seed", type=int, default=0)

    b = sub.add_parser("bench", help="state size and step time per algorithm")
    b.add_argument("--algos", default="kf,ok:1,ok:2,ok:4,ktp:1,ktp:2,ktp:4")
    b.add_argument("--units", type=int, default=64)
    b.add_argument("--batch", type=int, default=16)
    b.add_argument("--steps", type=int, default=20)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out")
    return p


def cmd_train(args):
    cfg = train.TrainConfig(task=args.task, algo=args.algo, units=args.units, batch=args.batch, lr=args.lr,
                            steps=args.steps, seed=args.seed, data=args.data, eval_every=args.eval_every,
                            reset_prob=args.reset_prob)
    try:
        cfg.validate()
    except ValueError as exc:
        print(f"okgrad train: {exc}", file=sys.stderr)
        return 2
    try:
        trainer = train.Trainer(cfg)
    except (OSError, UnicodeDecodeError, ValueError) as exc:
        print(f"okgrad train: cannot load data: {exc}", file=sys.stderr)
        return 1
    with open(args.out, "w", newline="", encoding="utf-8") as fh, \
            open(args.out + ".timing.csv", "w", newline="", encoding="utf-8") as th:
        w = csv.writer(fh, lineterminator="\n")
        tw = csv.writer(th, lineterminator="\n")
        w.writerow(("step", "loss_bpc", "tag", "updates_done"))
        tw.writerow(("step", "wallclock_s"))
        for rec in trainer.records():
            w.writerow((rec.step, format(rec.loss_bpc, ".17g"), rec.tag, rec.updates_done))
            tw.writerow((rec.step, f"{rec.wallclock_s:.3f}"))
            fh.flush()
            th.flush()
    rnn.save_checkpoint(args.checkpoint or args.out + ".ckpt", trainer.params, seed=args.seed)
    if trainer.status == "diverged":
        print(f"okgrad train: diverged at step {trainer.steps_done}: {trainer.error}", file=sys.stderr)
        return 1
    if cfg.task == "lm":
        valid = train.evaluate_bpc(trainer.params, trainer.task.valid_ids, cfg.batch)
        print(f"valid_bpc={valid:.6f}")
        print(f"unigram_bpc={trainer.task.baseline_bpc():.6f}")
    elif trainer.curriculum is not None:
        print(f"t_max={trainer.curriculum.t_max}")
    return 0


def cmd_noise(args):
    if args.checkpoint:
        try:
            params, _ = rnn.load_checkpoint(args.checkpoint)
        except (OSError, ValueError) as exc:
            print(f"okgrad noise: {exc}", file=sys.stderr)
            return 1
    else:
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([args.seed, 4])))
        params = rnn.init_params(args.init_units, args.vocab, args.vocab, rng)
    need = analysis.oracle_bytes(params.n, params.n_in)
    cap = args.oracle_cap_mb * 2**20
    if need > cap:
        print(f"okgrad noise: exact oracle needs {need} bytes, cap is {int(cap)}", file=sys.stderr)
        return 1
    runs = []
    for rep in range(args.repetitions):
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([args.seed, 5, rep])))
        ids = rng.integers(0, params.n_in, size=args.steps + 1)
        records = analysis.noise_protocol(params, args.algo, ids[:-1], ids[1:], args.filter,
                                          seed=args.seed * 1000 + rep, memory_cap=cap)
        analysis.write_cosine_csv(f"{args.out}_rep{rep}.csv", records)
        runs.append(records)
        print(f"rep {rep}: mean cosine {analysis.mean_cosine(records):.6f}")
    analysis.write_aggregate_csv(f"{args.out}_aggregate.csv", analysis.aggregate(runs))
    return 0


def _report(target, moments, bound=None):
    print("target:")
    print(np.array2string(np.asarray(target), precision=6, suppress_small=True))
    print(f"mean_error={moments.mean_error:.3e}")
    print(f"variance={moments.variance:.12g}")
    ok = moments.mean_error < ORACLE_TOL
    if bound is not None:
        print(f"bound={bound:.12g}")
        if abs(moments.variance - bound) > ORACLE_TOL * max(1.0, abs(bound)):
            print(f"FAIL variance {moments.variance:.12g} != bound {bound:.12g}")
            return 1
    if not ok:
        print(f"FAIL mean_error {moments.mean_error:.3e}")
        return 1
    print("PASS")
    return 0


def _too_large(count):
    if 2**count > analysis.MAX_ENUMERATION:
        print(f"FAIL enumeration of 2^{count} outcomes exceeds 2^16")
        return True
    return False


def cmd_oracle(args):
    rng = np.random.default_rng(args.seed)
    rows, cols = args.dims
    if args.kind == "opt-diag":
        if args.d is None:
            print("okgrad oracle: opt-diag needs --d", file=sys.stderr)
            return 2
        try:
            d = np.sort(args.d)[::-1]
            split = lowrank.split_index(d, args.rank)
            probe = lowrank.sample_opt_diag(d, args.rank, rng=rng)
        except ValueError as exc:
            print(f"FAIL invalid input: {exc}")
            return 1
        count = probe.sign_draw.size
        if _too_large(count):
            return 1
        m = analysis.estimator_moments(np.diag(d), lambda s: lowrank.sample_opt_diag(d, args.rank, signs=s).product(), count)
        return _report(np.diag(d), m, split.variance_bound if count else 0.0)
    if args.kind == "opt":
        c = rng.normal(size=(rows, cols))
        count = lowrank.tail_signs_needed(c, args.rank)
        if _too_large(count):
            return 1
        d = lowrank.smalllin.svd(c).d
        bound = lowrank.split_index(d, args.rank).variance_bound if count else 0.0
        m = analysis.estimator_moments(c, lambda s: lowrank.opt(c, args.rank, signs=s).product(), count)
        return _report(c, m, bound)
    if args.kind in ("ok", "ok-case1"):
        if args.kind == "ok-case1":
            u = np.array([[1.0, 0.0, 0.0]])
            a = np.array([[1.0, 0.0], [0.0, 0.0]])
            dmat = np.array([[0.0, 0.0], [0.0, 1.0]])
            g = kronsum.KroneckerSum(kronsum.KronFormat(1, 3, 2, 2), [(u, a), (u, dmat)])
            r = 1
        else:
            r = args.rank
            g = kronsum.KroneckerSum(kronsum.KronFormat(1, rows, cols, cols),
                                     [(rng.normal(size=(1, rows)), rng.normal(size=(cols, cols))) for _ in range(r + 1)])
        count = kronsum.ok_sign_count(g, r)
        if _too_large(count):
            return 1
        target = g.dense()
        m = analysis.estimator_moments(target, lambda s: kronsum.ok_compress(g, r, signs=s).dense(), count)
        _, _, _, _, cmat = kronsum.ok_coefficients(g)
        bound = lowrank.split_index(lowrank.smalllin.svd(cmat).d, r).variance_bound if count else 0.0
        st = analysis.estimator_moments(target, lambda s: kronsum.pairwise_sign_mix(g, signs=s).dense(), len(g) - 1)
        print(f"sign_trick_variance={st.variance:.12g}")
        status = _report(target, m, bound)
        return status
    if args.kind == "sign-trick":
        t1 = (rng.normal(size=(1, rows)), rng.normal(size=(cols, cols)))
        t2 = (rng.normal(size=(1, rows)), rng.normal(size=(cols, cols)))
        target = np.kron(*t1) + np.kron(*t2)
        m = analysis.estimator_moments(target, lambda s: np.kron(*kronsum.sign_trick_mix(t1, t2, sign=s)), 1)
        return _report(target, m)
    t1 = tuple(rng.normal(size=k) for k in (rows, cols, rows))
    t2 = tuple(rng.normal(size=k) for k in (rows, cols, rows))
    target = kronsum.TripleSum([t1, t2]).dense()
    m = analysis.estimator_moments(target, lambda s: kronsum.TripleSum([kronsum.ktp_mix(t1, t2, signs=s)]).dense(), 2)
    return _report(target, m)


def bench_rows(algos, units, batch, steps, seed):
    """Measured state size and mean step time for each algorithm on a fixed random stream."""
    rng = np.random.default_rng(seed)
    v = 4
    params = rnn.init_params(units, v, v, rng)
    xs = rng.integers(0, v, size=(steps + 2, batch))
    rows = []
    for spec in algos:
        algo = approximators.make_algo(spec, units, v, batch, seed)
        h = np.zeros((batch, units))
        times = []
        for t in range(steps + 2):
            t0 = time.perf_counter()
            st = rnn.forward(params, h, xs[t])
            algo.advance(st, params)
            _, dl, _ = rnn.output_head(params, st.h_next, xs[t])
            algo.estimate(dl)
            if t >= 2:
                times.append(time.perf_counter() - t0)
            h = st.h_next
        rows.append((spec, units, batch, algo.state_bytes(), 1e3 * float(np.median(times))))
    return rows


def cmd_bench(args):
    algos = [a.strip() for a in args.algos.split(",") if a.strip()]
    for a in algos:
        try:
            approximators.parse_algo(a)
        except ValueError as exc:
            print(f"okgrad bench: {exc}", file=sys.stderr)
            return 2
    rows = bench_rows(algos, args.units, args.batch, args.steps, args.seed)
    header = ("algo", "units", "batch", "state_bytes_per_lane", "ms_per_step")
    out = open(args.out, "w", newline="", encoding="utf-8") if args.out else sys.stdout
    try:
        w = csv.writer(out, lineterminator="\n")
        w.writerow(header)
        for spec, u, bsz, nbytes, ms in rows:
            w.writerow((spec, u, bsz, nbytes, f"{ms:.4f}"))
    finally:
        if args.out:
            out.close()
    return 0


COMMANDS = {"train": cmd_train, "noise": cmd_noise, "oracle": cmd_oracle, "bench": cmd_bench}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    threads = os.environ.get("OKGRAD_THREADS")
    limit = int(threads) if threads and threads.isdigit() and int(threads) > 0 else None
    with threadpool_limits(limits=limit):
        return COMMANDS[args.command](args)


if __name__ == "__main__":
    sys.exit(main())

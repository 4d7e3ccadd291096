"""Command-line interface: dataset synthesis, training, evaluation, inference,
attention-kernel benchmarking, and ablation comparison.

Exit codes: 0 success, 2 validation error (bad flags, files, or config),
3 numerical abort (non-finite loss or activations).  Every command with a
fixed seed produces bit-identical output files across reruns on one machine;
no output file embeds timestamps or absolute paths.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import __version__, data
from .config import TrainConfig, config_digest, parse_train_config, serialize_model_config
from .engine import NumericalError, Tensor, no_grad
from .model import FsRwkvModel, build_model, forward, load_checkpoint, named_parameters, save_checkpoint
from .objectives import cap_psnr, psnr, rmse, ssim, total_loss
from .optim import AdamW, cosine_lr
from .wkv import bi_wkv_oracle_raw, bi_wkv_scan_raw

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3

IDENTITY_CHECKPOINT = "identity"
_TRAIN_STREAM = 0xF5  # keeps per-step rng keys disjoint from dataset keys


def apply_thread_cap() -> Optional[int]:
    """Honor FSRWKV_THREADS by capping the compiled-kernel thread pool."""
    raw = os.environ.get("FSRWKV_THREADS")
    if raw is None or raw == "":
        return None
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"FSRWKV_THREADS must be an integer, got {raw!r}")
    if n < 1:
        raise ValueError(f"FSRWKV_THREADS must be >= 1, got {n}")
    try:
        import numba

        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    except ImportError:
        pass
    return n


# -- metric reports ----------------------------------------------------------


@dataclass
class MetricsReport:
    rows: List[Tuple[str, float, float, float]]  # (sample_id, psnr_db, ssim, rmse)
    mean_psnr: float
    mean_ssim: float
    mean_rmse: float
    config_digest: str
    seed: int
    version: str


def _predict(model: Optional[FsRwkvModel], inp: np.ndarray) -> np.ndarray:
    """Model prediction for one [1,H,W] image; None means pass-through."""
    if model is None:
        return inp.copy()
    with no_grad():
        out = forward(model, Tensor(inp[None].astype(np.float32), requires_grad=False))
    return out.data[0].astype(np.float32)


def evaluate_pairs(model: Optional[FsRwkvModel], pairs: Sequence[data.PairedSample], cfg_digest: str, seed: int) -> Tuple[MetricsReport, List[np.ndarray]]:
    rows = []
    preds = []
    for idx, pair in enumerate(pairs):
        pred = _predict(model, pair.input)
        preds.append(pred)
        p64 = pred[None].astype(np.float64)
        g64 = pair.target[None].astype(np.float64)
        s = float(ssim(Tensor(p64, requires_grad=False), Tensor(g64, requires_grad=False)).data)
        rows.append((f"{idx:04d}", cap_psnr(psnr(pred, pair.target)), s, rmse(pred, pair.target)))
    n = len(rows)
    report = MetricsReport(
        rows=rows,
        mean_psnr=sum(r[1] for r in rows) / n,
        mean_ssim=sum(r[2] for r in rows) / n,
        mean_rmse=sum(r[3] for r in rows) / n,
        config_digest=cfg_digest,
        seed=seed,
        version=__version__,
    )
    return report, preds


def write_report_csv(report: MetricsReport, path):
    lines = [
        "# fsrwkv-eval v1",
        f"# config={report.config_digest}",
        f"# seed={report.seed}",
        f"# version={report.version}",
        "sample_id,psnr_db,ssim,rmse",
    ]
    for sid, p, s, r in report.rows:
        lines.append(f"{sid},{p!r},{s!r},{r!r}")
    lines.append(f"mean,{report.mean_psnr!r},{report.mean_ssim!r},{report.mean_rmse!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def format_report_table(report: MetricsReport) -> str:
    header = f"{'sample':>8} {'psnr_db':>10} {'ssim':>8} {'rmse':>10}"
    rule = "-" * len(header)
    body = [f"{sid:>8} {p:>10.4f} {s:>8.4f} {r:>10.6f}" for sid, p, s, r in report.rows]
    mean = f"{'mean':>8} {report.mean_psnr:>10.4f} {report.mean_ssim:>8.4f} {report.mean_rmse:>10.6f}"
    return "\n".join([header, rule, *body, rule, mean])


def write_previews(pairs: Sequence[data.PairedSample], preds: Sequence[np.ndarray], out_dir):
    """Side-by-side input | prediction | target grids, one PGM per sample."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for idx, (pair, pred) in enumerate(zip(pairs, preds)):
        sep = np.full((1, pair.input.shape[1], 2), 0.5, dtype=np.float32)
        grid = np.concatenate([pair.input, sep, pred, sep, pair.target], axis=2)
        data.save_pgm(out / f"{idx:04d}.pgm", grid)


# -- training loop ---------------------------------------------------------------


def _step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, _TRAIN_STREAM, step]))


def _make_batch(train_pairs, tcfg: TrainConfig, rng: np.random.Generator):
    xs, ys = [], []
    n = len(train_pairs)
    for _ in range(tcfg.batch_size):
        pair = train_pairs[int(rng.integers(0, n))]
        if tcfg.augment:
            other = train_pairs[int(rng.integers(0, n))]
            pair = data.augment(pair, rng, other=other)
        xs.append(pair.input)
        ys.append(pair.target)
    x = Tensor(np.stack(xs).astype(np.float32), requires_grad=False)
    y = Tensor(np.stack(ys).astype(np.float32), requires_grad=False)
    return x, y


def _save_checkpoint_with_optimizer(path, model: FsRwkvModel, opt: AdamW):
    save_checkpoint(path, model)
    np.savez(str(path) + ".opt.npz", **opt.state_dict())


def run_training(tcfg: TrainConfig, train_pairs, out_dir, resume: Optional[str] = None, echo=print) -> Tuple[FsRwkvModel, Path]:
    """Optimize the model for tcfg.steps; returns (model, final checkpoint path).

    Raises NumericalError on non-finite loss or activations; the most recent
    periodic checkpoint (if any) is left on disk as the last good state.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lambdas = (tcfg.model.lambda_ssim, tcfg.model.lambda_edge)

    if resume is not None:
        model = load_checkpoint(resume)
        if serialize_model_config(model.config) != serialize_model_config(tcfg.model):
            raise ValueError("resume checkpoint was trained with a different model config")
        opt = AdamW(
            named_parameters(model),
            lr=tcfg.lr,
            betas=(tcfg.beta1, tcfg.beta2),
            eps=tcfg.adam_eps,
            weight_decay=tcfg.weight_decay,
        )
        sidecar = str(resume) + ".opt.npz"
        if not Path(sidecar).exists():
            raise FileNotFoundError(f"missing optimizer state alongside checkpoint: {sidecar}")
        with np.load(sidecar) as st:
            opt.load_state_dict({k: st[k] for k in st.files})
        start_step = opt.step_count
        if start_step > tcfg.steps:
            raise ValueError(f"checkpoint is at step {start_step}, beyond configured {tcfg.steps} steps")
    else:
        model = build_model(tcfg.model)
        opt = AdamW(
            named_parameters(model),
            lr=tcfg.lr,
            betas=(tcfg.beta1, tcfg.beta2),
            eps=tcfg.adam_eps,
            weight_decay=tcfg.weight_decay,
        )
        start_step = 0

    log_path = out / "train_log.csv"
    log_fh = open(log_path, "a", encoding="ascii")
    if log_fh.tell() == 0:
        log_fh.write("step,total,l1,ssim,edge,lr\n")

    last_good: Optional[Path] = Path(resume) if resume is not None else None
    wall_start = time.perf_counter()
    try:
        for step in range(start_step, tcfg.steps):
            rng = _step_rng(tcfg.model.seed, step)
            x, y = _make_batch(train_pairs, tcfg, rng)
            lr = cosine_lr(step, tcfg.steps, tcfg.lr, tcfg.min_lr)

            pred = forward(model, x)
            loss = total_loss(pred, y, lambdas=lambdas)
            vals = {name: float(getattr(loss, name).data) for name in ("total", "l1", "ssim_loss", "edge")}
            if not all(np.isfinite(v) for v in vals.values()):
                raise NumericalError(f"non-finite loss at step {step + 1}: {vals}")

            opt.zero_grad()
            loss.total.backward()
            opt.step(lr)

            step_number = step + 1
            log_fh.write(f"{step_number},{vals['total']!r},{vals['l1']!r},{vals['ssim_loss']!r},{vals['edge']!r},{lr!r}\n")
            if step_number == 1 or step_number % tcfg.log_interval == 0 or step_number == tcfg.steps:
                log_fh.flush()
                rate = (step_number - start_step) / max(time.perf_counter() - wall_start, 1e-9)
                echo(
                    f"step {step_number}/{tcfg.steps}"
                    f" loss={vals['total']:.6f} l1={vals['l1']:.6f}"
                    f" ssim={vals['ssim_loss']:.6f} edge={vals['edge']:.6f}"
                    f" lr={lr:.3e} ({rate:.2f} steps/s)"
                )
            if step_number % tcfg.checkpoint_interval == 0 and step_number < tcfg.steps:
                ck = out / f"ckpt_{step_number:06d}.fsrw"
                _save_checkpoint_with_optimizer(ck, model, opt)
                last_good = ck
    except NumericalError:
        log_fh.close()
        if last_good is not None:
            echo(f"aborting; last good checkpoint retained at {last_good}")
        else:
            echo("aborting before any checkpoint was written")
        raise
    log_fh.close()

    final = out / "ckpt_final.fsrw"
    _save_checkpoint_with_optimizer(final, model, opt)
    return model, final


# -- subcommands -------------------------------------------------------------------


def cmd_synth_data(args) -> int:
    h, w = args.size
    for name, v in (("height", h), ("width", w)):
        if v < 16:
            raise ValueError(f"--size {name} must be at least 16, got {v}")
        if v % 2 != 0:
            raise ValueError(f"--size {name} must be even (frequency analysis halves each dimension), got {v}")
    data.write_dataset(args.out, n_train=args.train, n_test=args.test, h=h, w=w, base_seed=args.seed)
    total = 2 * (args.train + args.test)
    print(f"wrote {args.train} train + {args.test} test pairs ({total} tensor files) to {args.out}")
    return EXIT_OK


def _load_model_or_identity(ckpt: str) -> Tuple[Optional[FsRwkvModel], str, int]:
    """Returns (model or None for pass-through, config digest, model seed)."""
    if ckpt == IDENTITY_CHECKPOINT:
        return None, IDENTITY_CHECKPOINT, 0
    model = load_checkpoint(ckpt)
    digest = config_digest(serialize_model_config(model.config))
    return model, digest, model.config.seed


def cmd_train(args) -> int:
    tcfg = parse_train_config(Path(args.config).read_text(encoding="utf-8")).validate()
    train_pairs = data.load_split(args.data, data.TRAIN_SPLIT)
    test_pairs = data.load_split(args.data, data.TEST_SPLIT)
    print(f"training on {len(train_pairs)} pairs for {tcfg.steps} steps (batch {tcfg.batch_size})")

    model, final = run_training(tcfg, train_pairs, args.out, resume=args.resume)
    digest = config_digest(serialize_model_config(tcfg.model))
    report, _ = evaluate_pairs(model, test_pairs, digest, tcfg.model.seed)
    write_report_csv(report, Path(args.out) / "final_metrics.csv")
    print(f"final checkpoint: {final}")
    print(format_report_table(report))
    return EXIT_OK


def cmd_eval(args) -> int:
    pairs = data.load_split(args.data, data.TEST_SPLIT)
    model, digest, seed = _load_model_or_identity(args.ckpt)
    report, preds = evaluate_pairs(model, pairs, digest, seed)

    report_path = Path(args.report)
    report_path.parent.mkdir(parents=True, exist_ok=True)
    write_report_csv(report, report_path)
    table = format_report_table(report)
    report_path.with_suffix(".txt").write_text(table + "\n", encoding="ascii")
    write_previews(pairs, preds, report_path.parent / "previews")
    print(table)
    return EXIT_OK


def cmd_infer(args) -> int:
    model, _, _ = _load_model_or_identity(args.ckpt)
    arr = data.load_ten(args.input)
    squeeze_to = arr.ndim
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[0] != 1:
        raise ValueError(f"expected a [H,W] or [1,H,W] input tensor, got shape {arr.shape}")
    pred = _predict(model, arr)
    data.save_ten(args.output, pred if squeeze_to == 3 else pred[0])
    if args.pgm:
        data.save_pgm(args.pgm, pred)
    print(f"wrote {args.output}")
    return EXIT_OK


def _best_of(fn, reps: int = 3) -> float:
    best = float("inf")
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def cmd_bench_wkv(args) -> int:
    lengths = args.T
    channels = args.C
    if any(t < 1 for t in lengths) or channels < 1:
        raise ValueError("sequence lengths and channel count must be positive")
    rng = np.random.default_rng(0)

    # warm-up triggers kernel compilation outside the timed region
    kk = rng.standard_normal((1, 8, channels))
    bi_wkv_scan_raw(kk, kk, np.linspace(0.0, 3.0, channels), np.zeros(channels))

    rows = []
    for t_len in lengths:
        k = 0.5 * rng.standard_normal((1, t_len, channels))
        v = rng.standard_normal((1, t_len, channels))
        w = np.linspace(0.0, 3.0, channels)
        u = 0.5 * (1.0 - np.arange(channels) / channels)

        scan_out = bi_wkv_scan_raw(k, v, w, u)
        oracle_out = bi_wkv_oracle_raw(k, v, w, u)
        rel = float(np.max(np.abs(scan_out - oracle_out) / (1.0 + np.abs(oracle_out))))
        if rel > 1e-5:
            raise NumericalError(f"scan disagrees with oracle at T={t_len}: rel err {rel:.3e}")

        scan_s = _best_of(lambda: bi_wkv_scan_raw(k, v, w, u))
        oracle_s = _best_of(lambda: bi_wkv_oracle_raw(k, v, w, u))
        rows.append((t_len, channels, scan_s * 1e3, oracle_s * 1e3, rel, True))
        print(f"T={t_len:>6} scan {scan_s * 1e3:10.3f} ms  oracle {oracle_s * 1e3:10.3f} ms  rel_err {rel:.3e}")

    lines = ["T,C,scan_ms,oracle_ms,max_rel_err,correct"]
    for t_len, c, sm, om, rel, ok in rows:
        lines.append(f"{t_len},{c},{sm!r},{om!r},{rel!r},{str(ok).lower()}")
    Path(args.csv).write_text("\n".join(lines) + "\n", encoding="ascii")

    for (t0, _, s0, o0, _, _), (t1, _, s1, o1, _, _) in zip(rows, rows[1:]):
        if t1 == 2 * t0 and s0 > 0:
            print(f"T {t0}->{t1}: scan time ratio {s1 / s0:.2f}, oracle time ratio {o1 / o0:.2f}")
    return EXIT_OK


ABLATION_VARIANTS = (
    ("full", False, False),
    ("no_fso_shift", True, False),
    ("no_sfeb", False, True),
    ("neither", True, True),
)


def _dataset_digest(data_dir) -> str:
    import hashlib

    h = hashlib.sha256()
    root = Path(data_dir)
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()[:12]


def cmd_ablate(args) -> int:
    tcfg = parse_train_config(Path(args.config).read_text(encoding="utf-8")).validate()
    train_pairs = data.load_split(args.data, data.TRAIN_SPLIT)
    test_pairs = data.load_split(args.data, data.TEST_SPLIT)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ds_digest = _dataset_digest(args.data)

    results = []
    for name, no_fso, no_sfeb in ABLATION_VARIANTS:
        vcfg = replace(tcfg, model=replace(tcfg.model, disable_fso=no_fso, disable_sfeb=no_sfeb))
        print(f"=== variant {name}: fso={'off' if no_fso else 'on'} sfeb={'off' if no_sfeb else 'on'} ===")
        model, _ = run_training(vcfg, train_pairs, out / name)
        digest = config_digest(serialize_model_config(vcfg.model))
        report, _ = evaluate_pairs(model, test_pairs, digest, vcfg.model.seed)
        write_report_csv(report, out / name / "metrics.csv")
        results.append((name, not no_fso, not no_sfeb, report))

    col = "{:>14} {:>10} {:>6} {:>10} {:>8} {:>10}  {}"
    lines = [
        col.format("variant", "fso_shift", "sfeb", "psnr_db", "ssim", "rmse", ""),
        "-" * 70,
    ]
    csv_lines = ["variant,fso_shift,sfeb,psnr_db,ssim,rmse,seed,dataset"]
    for name, fso, sfeb, rep in results:
        mark = "<- full model" if (fso and sfeb) else ""
        lines.append(col.format(name, "yes" if fso else "no", "yes" if sfeb else "no", f"{rep.mean_psnr:.4f}", f"{rep.mean_ssim:.4f}", f"{rep.mean_rmse:.6f}", mark))
        csv_lines.append(f"{name},{str(fso).lower()},{str(sfeb).lower()},{rep.mean_psnr!r},{rep.mean_ssim!r},{rep.mean_rmse!r},{tcfg.model.seed},{ds_digest}")
    lines.append(f"all variants: seed={tcfg.model.seed}, steps={tcfg.steps}, dataset={ds_digest}")

    table = "\n".join(lines)
    (out / "ablation_table.txt").write_text(table + "\n", encoding="ascii")
    (out / "ablation.csv").write_text("\n".join(csv_lines) + "\n", encoding="ascii")
    print(table)
    return EXIT_OK


# -- argument parsing ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fsrwkv", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate a paired synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--train", type=int, required=True, help="number of training pairs")
    p.add_argument("--test", type=int, required=True, help="number of test pairs")
    p.add_argument("--size", type=int, nargs=2, required=True, metavar=("H", "W"))
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train", help="train a model on a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--config", required=True, help="train config file")
    p.add_argument("--out", required=True, help="output directory for checkpoints and logs")
    p.add_argument("--resume", default=None, help="checkpoint to resume from (with .opt.npz sidecar)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True, help=f"checkpoint path, or '{IDENTITY_CHECKPOINT}' for the pass-through baseline")
    p.add_argument("--report", required=True, help="CSV report path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="run one tensor through a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True, help="input .ten file")
    p.add_argument("--output", required=True, help="output .ten file")
    p.add_argument("--pgm", default=None, help="optional preview image path")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("bench-wkv", help="benchmark the linear attention scan against the quadratic oracle")
    p.add_argument("--T", type=int, nargs="+", required=True, help="sequence lengths")
    p.add_argument("--C", type=int, default=16, help="channel count")
    p.add_argument("--csv", required=True, help="output CSV path")
    p.set_defaults(func=cmd_bench_wkv)

    p = sub.add_parser("ablate", help="train and compare the four architecture variants")
    p.add_argument("--data", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        apply_thread_cap()
        return args.func(args)
    except NumericalError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())

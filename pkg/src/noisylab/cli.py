"""Command line entry point.

Subcommands wrap the library operations with file I/O:

    noisylab generate      write a synthetic dataset directory
    noisylab normalize     dynamically window one PGM image
    noisylab train         train one configuration on a dataset directory
    noisylab evaluate      score prediction files against a label CSV
    noisylab measure-noise sensitivity/specificity of labels vs re-read labels
    noisylab correlate     Pearson/covariance statistics of a label CSV
    noisylab report        rebuild the report for an experiment directory
    noisylab experiment    run a full multi-configuration experiment spec

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import experiment as exp
from .errors import DataError, DegenerateHistogram, NoisyLabError, NumericalError, UndefinedAuc
from .labels import (
    compute_correlation,
    load_label_csv,
    measure_noise_profile,
    save_correlation_stats,
    save_noise_profile,
)
from .losses import LossConfig
from .metrics import auc, bootstrap_ci, delong_test
from .normalization import GrayImage, SmoothingConfig, normalize
from .pgm import read_pgm, write_pgm
from .synth import read_dataset
from .trainer import (
    SpatialLabelMatrix,
    TrainConfig,
    TrainingData,
    build_features,
    forward,
    save_checkpoint,
    segmentation_targets,
    train,
)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _build_parser() -> _Parser:
    parser = _Parser(prog="noisylab", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--workdir", default=".", help="base directory for all paths")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic dataset directory")
    p.add_argument("out")
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--image-size", type=int, default=32)
    p.add_argument("--scale-range", default=None, metavar="LO,HI",
                   help="random per-image intensity scale, e.g. 0.6,1.6")
    p.add_argument("--offset-range", default=None, metavar="LO,HI",
                   help="random per-image intensity offset, e.g. 0,300")

    p = sub.add_parser("normalize", help="dynamically window a PGM image")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--tau", type=float, default=0.001)
    p.add_argument("--median-width", type=int, default=5)
    p.add_argument("--gauss-sigma", type=float, default=2.0)

    p = sub.add_parser("train", help="train one configuration on a dataset directory")
    p.add_argument("--data", required=True, help="dataset directory from generate")
    p.add_argument("--out", required=True, help="run output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", action="store_true", help="enable the noise-prior loss term")
    p.add_argument("--corr", action="store_true", help="enable the correlation-prior term")
    p.add_argument("--seg", action="store_true", help="enable the segmentation decoder term")
    p.add_argument("--loc", action="store_true", help="enable the spatial classification term")
    p.add_argument("--normalize", action="store_true", help="window images before training")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.add_argument("--calib-size", type=int, default=500)
    p.add_argument("--lambda-noise", type=float, default=0.1)
    p.add_argument("--alpha-seg", type=float, default=1.0)
    p.add_argument("--alpha-loc", type=float, default=1.0)

    p = sub.add_parser("evaluate", help="score prediction files against labels")
    p.add_argument("--labels", required=True, help="label CSV (truth)")
    p.add_argument("--pred", action="append", required=True,
                   help="prediction CSV; repeat for pairwise model comparison")
    p.add_argument("--out", required=True, help="output prefix for .csv/.txt reports")
    p.add_argument("--n-boot", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("measure-noise", help="sensitivity/specificity vs re-read labels")
    p.add_argument("--original", required=True)
    p.add_argument("--reread", required=True)
    p.add_argument("--out", default=None, help="write the noise profile file here")
    p.add_argument("--lambda-noise", type=float, default=0.1)

    p = sub.add_parser("correlate", help="label correlation statistics")
    p.add_argument("--labels", required=True)
    p.add_argument("--out", default=None, help="write the statistics file here")
    p.add_argument("--csv", default=None, help="write the Pearson matrix as CSV here")

    p = sub.add_parser("report", help="rebuild report files for an experiment directory")
    p.add_argument("--results", required=True)

    p = sub.add_parser("experiment", help="run a multi-configuration experiment spec")
    p.add_argument("--spec", required=True, help="JSON experiment spec file")

    return parser


def _parse_range(text: str, flag: str) -> tuple[float, float]:
    try:
        lo, hi = (float(v) for v in text.split(","))
    except ValueError:
        raise DataError(f"{flag} expects LO,HI") from None
    return lo, hi


def _cmd_generate(args) -> int:
    from .synth import GeneratorConfig, generate_dataset, write_dataset

    kwargs = {"n_samples": args.n, "seed": args.seed, "image_size": args.image_size}
    if args.scale_range:
        kwargs["intensity_scale"] = _parse_range(args.scale_range, "--scale-range")
    if args.offset_range:
        kwargs["intensity_offset"] = _parse_range(args.offset_range, "--offset-range")
    dataset = generate_dataset(GeneratorConfig(**kwargs))
    write_dataset(dataset, os.path.join(args.workdir, args.out))
    print(f"wrote {args.n} samples to {args.out}")
    return 0


def _cmd_normalize(args) -> int:
    config = SmoothingConfig(median_width=args.median_width,
                             gauss_sigma=args.gauss_sigma, tau=args.tau)
    image = GrayImage(read_pgm(os.path.join(args.workdir, args.input)))
    result = normalize(image, config)
    write_pgm(os.path.join(args.workdir, args.output),
              np.rint(result.pixels * 65535.0), maxval=65535)
    return 0


def _cmd_train(args) -> int:
    data_dir = os.path.join(args.workdir, args.data)
    out_dir = os.path.join(args.workdir, args.out)
    os.makedirs(out_dir, exist_ok=True)
    ds = read_dataset(data_dir)

    n = ds.n_samples
    n_val = max(1, int(round(args.val_fraction * n)))
    n_train = n - n_val
    if n_train < 1:
        raise DataError("validation fraction leaves no training samples")
    idx_train = np.arange(n_train)
    idx_val = np.arange(n_train, n)

    loss = LossConfig(use_noise=args.noise, use_corr=args.corr, use_seg=args.seg,
                      use_loc=args.loc, alpha_seg=args.alpha_seg, alpha_loc=args.alpha_loc)
    config = TrainConfig(seed=args.seed, loss=loss, max_epochs=args.epochs,
                         batch_size=min(args.batch_size, n_train),
                         learning_rate=args.lr, hidden=args.hidden)

    calib = idx_train[: min(args.calib_size, n_train)]
    profile = measure_noise_profile(ds.noisy_labels.select(calib),
                                    ds.true_labels.select(calib), args.lambda_noise)
    stats = compute_correlation(ds.true_labels.select(calib))

    x = build_features(ds.images, args.normalize, raw_scale=exp.RAW_FEATURE_SCALE)
    spatial_tr = SpatialLabelMatrix(ds.spatial.labels[idx_train],
                                    ds.spatial.available[idx_train])
    spatial_va = SpatialLabelMatrix(ds.spatial.labels[idx_val],
                                    ds.spatial.available[idx_val])
    seg_all = segmentation_targets(ds.organ_masks, config.seg_side) if args.seg else None
    data = TrainingData(
        x_train=x[idx_train],
        labels_train=ds.noisy_labels.select(idx_train),
        x_val=x[idx_val],
        labels_val=ds.noisy_labels.select(idx_val),
        clean_val=ds.true_labels.labels[idx_val],
        noise=profile if args.noise else None,
        correlation=stats if args.corr else None,
        spatial_train=spatial_tr if args.loc else None,
        spatial_val=spatial_va if args.loc else None,
        spatial_weights=exp.spatial_class_weights(spatial_tr) if args.loc else None,
        seg_train=None if seg_all is None else seg_all[idx_train],
        seg_val=None if seg_all is None else seg_all[idx_val],
    )
    state, log = train(data, config)
    log.write_csv(os.path.join(out_dir, "log.csv"))
    save_checkpoint(state, os.path.join(out_dir, "checkpoint.bin"))
    pred = forward(state, x[idx_val])
    exp.save_predictions_csv(
        os.path.join(out_dir, "predictions_val.csv"),
        [ds.true_labels.sample_ids[i] for i in idx_val],
        ds.true_labels.class_names,
        ds.true_labels.labels[idx_val],
        pred.abnormality,
    )
    print(f"trained {loss.describe()} for {len(log.epochs)} epochs; "
          f"best epoch {log.best_epoch}; artifacts in {args.out}")
    return 0


def _cmd_evaluate(args) -> int:
    labels = load_label_csv(os.path.join(args.workdir, args.labels))
    id_row = {sid: i for i, sid in enumerate(labels.sample_ids)}
    models = []
    for pred_path in args.pred:
        full = os.path.join(args.workdir, pred_path)
        ids, names, _, scores = exp.load_predictions_csv(full)
        if names != labels.class_names:
            raise DataError(f"{pred_path}: class columns do not match the label CSV")
        try:
            rows = [id_row[sid] for sid in ids]
        except KeyError as exc:
            raise DataError(f"{pred_path}: sample id {exc} missing from labels") from None
        aligned = np.empty_like(scores)
        aligned[:] = scores
        models.append((pred_path, np.array(rows), aligned))

    base = models[0][1]
    for pred_path, rows, _ in models[1:]:
        if not np.array_equal(rows, base):
            raise DataError(f"{pred_path}: sample order differs between prediction files")
    truth = labels.labels[base]

    out_csv = os.path.join(args.workdir, args.out + ".csv")
    out_txt = os.path.join(args.workdir, args.out + ".txt")
    with open(out_csv, "w") as fh:
        fh.write("model,class,auc,ci_low,ci_high\n")
        for pred_path, _, scores in models:
            for j, cls in enumerate(labels.class_names):
                r = auc(scores[:, j], truth[:, j])
                lo, hi = bootstrap_ci(scores[:, j], truth[:, j],
                                      n_boot=args.n_boot, seed=args.seed)
                fh.write(f"{pred_path},{cls},{r.auc!r},{lo!r},{hi!r}\n")
        if len(models) > 1:
            fh.write("model_a,model_b,class,auc_a,auc_b,delong_p\n")
            for a in range(len(models)):
                for b in range(a + 1, len(models)):
                    for j, cls in enumerate(labels.class_names):
                        cmp = delong_test(models[a][2][:, j], models[b][2][:, j],
                                          truth[:, j])
                        fh.write(f"{models[a][0]},{models[b][0]},{cls},"
                                 f"{cmp.auc_a!r},{cmp.auc_b!r},{cmp.p_value!r}\n")

    with open(out_txt, "w") as fh:
        fh.write("class".ljust(18) + "".join(
            os.path.basename(m[0]).ljust(26) for m in models) + "\n")
        for j, cls in enumerate(labels.class_names):
            line = cls.ljust(18)
            for _, _, scores in models:
                r = auc(scores[:, j], truth[:, j])
                lo, hi = bootstrap_ci(scores[:, j], truth[:, j],
                                      n_boot=args.n_boot, seed=args.seed)
                line += f"{r.auc:.3f} ({lo:.3f},{hi:.3f})".ljust(26)
            fh.write(line + "\n")
    print(f"wrote {out_csv} and {out_txt}")
    return 0


def _cmd_measure_noise(args) -> int:
    original = load_label_csv(os.path.join(args.workdir, args.original))
    reread = load_label_csv(os.path.join(args.workdir, args.reread))
    profile = measure_noise_profile(original, reread, args.lambda_noise)
    print("abnormality".ljust(18) + "sensitivity".ljust(14) + "specificity")
    for j, name in enumerate(original.class_names):
        flag = "" if profile.active[j] else "  (inactive)"
        print(name.ljust(18)
              + f"{profile.sensitivity[j]:.3f}".ljust(14)
              + f"{profile.specificity[j]:.3f}{flag}")
    live = profile.active
    if live.any():
        print("average".ljust(18)
              + f"{profile.sensitivity[live].mean():.3f}".ljust(14)
              + f"{profile.specificity[live].mean():.3f}")
    if args.out:
        save_noise_profile(profile, os.path.join(args.workdir, args.out),
                           original.class_names)
    return 0


def _cmd_correlate(args) -> int:
    labels = load_label_csv(os.path.join(args.workdir, args.labels))
    stats = compute_correlation(labels)
    print("Pearson correlation:")
    header = "".ljust(16) + "".join(n[:12].ljust(14) for n in labels.class_names)
    print(header)
    for j, name in enumerate(labels.class_names):
        print(name[:14].ljust(16)
              + "".join(f"{v:.3f}".ljust(14) for v in stats.pearson[j]))
    if args.out:
        save_correlation_stats(stats, os.path.join(args.workdir, args.out),
                               labels.class_names)
    if args.csv:
        with open(os.path.join(args.workdir, args.csv), "w") as fh:
            fh.write("," + ",".join(labels.class_names) + "\n")
            for j, name in enumerate(labels.class_names):
                fh.write(name + "," + ",".join(repr(v) for v in stats.pearson[j]) + "\n")
    return 0


def _cmd_report(args) -> int:
    paths = exp.build_report(os.path.join(args.workdir, args.results))
    print(f"wrote {paths['csv']} and {paths['txt']}")
    return 0


def _cmd_experiment(args) -> int:
    spec = exp.load_experiment_spec(os.path.join(args.workdir, args.spec))
    paths = exp.run_experiment(spec, args.workdir)
    print(f"wrote {paths['csv']} and {paths['txt']}")
    return 0


_COMMANDS = {
    "generate": _cmd_generate,
    "normalize": _cmd_normalize,
    "train": _cmd_train,
    "evaluate": _cmd_evaluate,
    "measure-noise": _cmd_measure_noise,
    "correlate": _cmd_correlate,
    "report": _cmd_report,
    "experiment": _cmd_experiment,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (DataError, UndefinedAuc, DegenerateHistogram) as exc:
        print(f"noisylab: data error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"noisylab: numerical failure: {exc}", file=sys.stderr)
        return 3
    except NoisyLabError as exc:
        print(f"noisylab: error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"noisylab: data error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

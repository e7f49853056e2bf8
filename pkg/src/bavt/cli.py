"""``bavt`` command line: gen, train, eval, ablate, inspect.

Exit status: 0 success, 1 usage or config error, 2 data error, 3 divergence.
The default output root is ``$BAVT_OUTPUT_ROOT`` (else ``./runs``).
"""
import argparse
import contextlib
import datetime
import logging
import os
import statistics
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, checkpoint, config, imgproc, metrics, phantom, sdt, train, vit
from ._accel import backend

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_DIVERGED = 3

log = logging.getLogger("bavt")


class CLIError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def output_root():
    return Path(os.environ.get("BAVT_OUTPUT_ROOT", "runs"))


def _out_dir(args, default_name):
    out = Path(args.out) if args.out else output_root() / default_name
    out.mkdir(parents=True, exist_ok=True)
    return out


@contextlib.contextmanager
def deterministic_mode(enabled):
    """Pin BLAS to one thread so reductions run in a fixed order."""
    if not enabled:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=1):
        yield


def load_experiment(args):
    exp = config.Experiment()
    if getattr(args, "config", None):
        exp = config.load(args.config, exp)
    return exp


def write_run_manifest(path, command, exp, artifacts, seeds, started):
    lines = [
        f"command={command}",
        f"version={__version__}",
        f"backend={backend()}",
        f"started={started}",
        f"finished={datetime.datetime.now(datetime.timezone.utc).isoformat()}",
        f"seeds={','.join(str(s) for s in seeds)}",
    ]
    lines += [f"artifact={a}" for a in artifacts]
    lines += ["config." + line for line in config.dump(exp).splitlines()]
    Path(path).write_text("\n".join(lines) + "\n")


def _now():
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


def _pairs(samples):
    return [(s.image, s.mask) for s in samples]


def _load_splits(data, splits):
    try:
        samples = phantom.load_dataset(data)
    except (FileNotFoundError, imgproc.ImageFormatError, OSError) as exc:
        raise CLIError(str(exc), EXIT_DATA) from None
    out = [phantom.subset(samples, name) for name in splits]
    for name, part in zip(splits, out):
        if not part:
            raise CLIError(f"{data}: split '{name}' is empty", EXIT_DATA)
    return out


# -------------------------------------------------------------------------- gen


def cmd_gen(args):
    exp = load_experiment(args)
    template = exp.phantom
    if args.size is not None:
        template = replace(template, size=args.size)
    try:
        samples = phantom.make_dataset(args.n, template, args.split_ratio, args.seed)
    except phantom.PhantomError as exc:
        raise CLIError(str(exc), EXIT_CONFIG) from None
    out = _out_dir(args, "data")
    try:
        phantom.write_dataset(out, samples, template, args.split_ratio, args.seed)
    except OSError as exc:
        raise CLIError(f"writing {exc.filename}: {exc.strerror}", EXIT_DATA) from None
    counts = {name: len(phantom.subset(samples, name)) for name in ("train", "val", "test")}
    print(f"wrote {len(samples)} pairs to {out} "
          f"(train={counts['train']}, val={counts['val']}, test={counts['test']})")
    return EXIT_OK


# ------------------------------------------------------------------------ train


def _apply_train_overrides(exp, args):
    if args.lam is not None:
        exp.loss.lam = args.lam
    if args.mode is not None:
        exp.loss.boundary_mode = args.mode
    if args.epochs is not None:
        exp.train.epochs = args.epochs
    if args.seed is not None:
        exp.train.seed = args.seed
    if args.batch_size is not None:
        exp.train.batch_size = args.batch_size
    if args.deterministic:
        exp.train.deterministic = True


def run_training(exp, train_set, val_set, out, resume=None):
    exp.train.checkpoint_dir = str(out)
    result = train.fit(_pairs(train_set), _pairs(val_set), exp.vit, exp.train, exp.loss, exp.aug,
                       resume=resume)
    meta = train.config_meta(exp.vit, exp.train, exp.loss, exp.aug)
    meta.update({"state.epoch": exp.train.epochs - 1, "state.best_val": float(result.best_val),
                 "state.best_epoch": result.best_epoch})
    checkpoint.save(out / "final.ckpt", result.params, meta, result.optimizer)
    return result


def cmd_train(args):
    started = _now()
    exp = load_experiment(args)
    _apply_train_overrides(exp, args)
    try:
        exp.validate()
    except ValueError as exc:
        raise CLIError(str(exc), EXIT_CONFIG) from None
    train_set, val_set = _load_splits(args.data, ("train", "val"))
    if train_set[0].image.shape[0] != exp.vit.image_size:
        raise CLIError(f"data images are {train_set[0].image.shape}, config expects "
                       f"{exp.vit.image_size}x{exp.vit.image_size}", EXIT_CONFIG)
    out = _out_dir(args, "train")
    with deterministic_mode(exp.train.deterministic):
        try:
            result = run_training(exp, train_set, val_set, out, resume=args.resume)
        except train.DivergenceError as exc:
            print(f"training diverged: {exc}; best checkpoint kept in {out}", file=sys.stderr)
            return EXIT_DIVERGED
    artifacts = ["best.ckpt", "last.ckpt", "final.ckpt", "history.csv"]
    write_run_manifest(out / "run_manifest.txt", "train", exp, artifacts, [exp.train.seed], started)
    print(f"trained {len(result.history)} epochs; best val loss {result.best_val:.6f} "
          f"at epoch {result.best_epoch}; outputs in {out}")
    return EXIT_OK


# ------------------------------------------------------------------------- eval


def load_model(path):
    try:
        params, meta, _ = checkpoint.load(path)
    except (OSError, checkpoint.CheckpointError) as exc:
        raise CLIError(str(exc), EXIT_DATA) from None
    try:
        exp = config.from_meta(meta)
        exp.vit.validate()
        vit.check_params(params, exp.vit)
    except ValueError as exc:
        raise CLIError(f"{path}: checkpoint/config mismatch: {exc}", EXIT_CONFIG) from None
    return params, exp


def evaluate_samples(samples, params, exp, threshold):
    preds = train.predict([s.image for s in samples], params, exp.vit, exp.aug)
    reports = [(f"{s.index:04d}", metrics.evaluate(p, s.mask, threshold)) for s, p in zip(samples, preds)]
    macro = metrics.macro_average([r for _, r in reports])
    micro = metrics.micro_average(preds, [s.mask for s in samples], threshold)
    return preds, reports, macro, micro


def cmd_eval(args):
    params, exp = load_model(args.checkpoint)
    (samples,) = _load_splits(args.data, (args.split,))
    if samples[0].image.shape[0] != exp.vit.image_size:
        raise CLIError(f"checkpoint expects {exp.vit.image_size}px images, data has "
                       f"{samples[0].image.shape[0]}px", EXIT_CONFIG)
    out = _out_dir(args, "eval")
    with deterministic_mode(args.deterministic):
        preds, reports, macro, micro = evaluate_samples(samples, params, exp, args.threshold)
    rows = reports + [("macro", macro), ("micro", micro)]
    metrics.write_report_csv(out / "metrics.csv", rows, args.threshold)
    if args.roc:
        curves = [(label, metrics.roc_curve(p, s.mask)) for (label, _), p, s in zip(reports, preds, samples)]
        metrics.write_roc_csv(out / "roc.csv", curves)
    if args.save_pred:
        (out / "pred").mkdir(exist_ok=True)
        for s, p in zip(samples, preds):
            imgproc.write_mask(out / "pred" / f"{s.index:04d}.png", p >= args.threshold)
    print(f"threshold={args.threshold}")
    print(metrics.format_table([("macro", macro), ("micro", micro)]))
    return EXIT_OK


# ----------------------------------------------------------------------- ablate


def first_step_gradients(exp, train_set, lam):
    """Gradients of the very first mini-batch fit() would see, at initialization."""
    pairs = _pairs(train_set)
    aug = replace(exp.aug)
    if aug.norm_mean is None or aug.norm_std is None:
        aug.norm_mean, aug.norm_std = imgproc.dataset_stats([im for im, _ in pairs], aug)
    order = np.random.default_rng([exp.train.seed, 0]).permutation(len(pairs))
    idx = order[:exp.train.batch_size]
    images, masks, sdms = [], [], []
    for i in idx:
        if exp.train.augment:
            im, m = imgproc.apply_augmentations(*pairs[i], aug, [exp.train.seed, 0, int(i)])
        else:
            im, m = imgproc.preprocess(pairs[i][0], aug), pairs[i][1]
        images.append(im)
        masks.append(m)
        sdms.append(sdt.signed_distance_map(m))
    params = vit.init_params(exp.vit, exp.train.seed)
    loss_cfg = replace(exp.loss, lam=lam)
    _, grads, _ = train.compute_gradients(np.stack(images), np.stack(masks), np.stack(sdms),
                                          params, exp.vit, loss_cfg)
    return grads


def gradient_difference(exp, train_set, lam):
    g0 = first_step_gradients(exp, train_set, 0.0)
    g1 = first_step_gradients(exp, train_set, lam)
    return max(float(np.abs(g0[k] - g1[k]).max()) for k in g0)


def cmd_ablate(args):
    started = _now()
    exp = load_experiment(args)
    _apply_train_overrides(exp, args)
    lam = exp.loss.lam if exp.loss.lam > 0 else 0.01
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [exp.train.seed]
    try:
        exp.validate()
    except ValueError as exc:
        raise CLIError(str(exc), EXIT_CONFIG) from None
    train_set, val_set, test_set = _load_splits(args.data, ("train", "val", "test"))
    out = _out_dir(args, "ablate")

    rows = []
    checks = []
    with deterministic_mode(exp.train.deterministic):
        for seed in seeds:
            for label, weight in (("baseline", 0.0), ("BAVT", lam)):
                run = config.parse(config.dump(exp))
                run.train.seed = seed
                run.loss.lam = weight
                run_dir = out / f"{label}_seed{seed}"
                run_dir.mkdir(parents=True, exist_ok=True)
                try:
                    result = run_training(run, train_set, val_set, run_dir)
                except train.DivergenceError as exc:
                    print(f"{label} seed {seed} diverged: {exc}", file=sys.stderr)
                    return EXIT_DIVERGED
                _, _, macro, _ = evaluate_samples(test_set, result.params, run, args.threshold)
                rows.append((label, seed, macro))
            seeded = config.parse(config.dump(exp))
            seeded.train.seed = seed
            diff = gradient_difference(seeded, train_set, lam)
            checks.append((seed, diff))

    with open(out / "ablation.csv", "w") as fh:
        fh.write("method,seed," + ",".join(metrics.TABLE_HEADERS) + "\n")
        for label, seed, rep in rows:
            fh.write(f"{label},{seed}," + ",".join(f"{v:.6f}" for v in rep.values()) + "\n")
        if len(seeds) > 1:
            for label in ("baseline", "BAVT"):
                vals = np.array([rep.values() for lab, _, rep in rows if lab == label])
                med = [statistics.median(col) for col in vals.T]
                fh.write(f"{label},median," + ",".join(f"{v:.6f}" for v in med) + "\n")
    with open(out / "gradient_check.csv", "w") as fh:
        fh.write("seed,lambda,max_abs_grad_diff,differs\n")
        for seed, diff in checks:
            fh.write(f"{seed},{lam!r},{diff!r},{int(diff > 0)}\n")

    write_run_manifest(out / "run_manifest.txt", "ablate", exp, ["ablation.csv", "gradient_check.csv"],
                       seeds, started)
    table = [(f"{label} (seed {seed})", rep) for label, seed, rep in rows]
    print(metrics.format_table(table))
    for seed, diff in checks:
        print(f"seed {seed}: first-step gradient difference lambda=0 vs lambda={lam}: {diff:.3e}")
    return EXIT_OK


# ---------------------------------------------------------------------- inspect

FIXTURES = {
    "line3": np.array([[0, 1, 0]], dtype=np.uint8),
    "dot3": np.array([[0, 0, 0], [0, 1, 0], [0, 0, 0]], dtype=np.uint8),
}


def cmd_inspect_sdt(args):
    if args.fixture:
        mask = FIXTURES[args.fixture]
    elif args.mask:
        try:
            mask = imgproc.read_mask(args.mask)
        except (OSError, imgproc.ImageFormatError) as exc:
            raise CLIError(str(exc), EXIT_DATA) from None
    else:
        raise CLIError("inspect sdt needs --mask or --fixture", EXIT_CONFIG)
    try:
        phi = sdt.signed_distance_map(mask)
    except sdt.DegenerateMaskError as exc:
        raise CLIError(str(exc), EXIT_DATA) from None
    out = _out_dir(args, "inspect")
    sdt.write_grid(out / "sdm.grid", phi)
    sdt.write_sdm_png(out / "sdm.png", phi)
    if phi.size <= 64:
        print(np.array2string(phi, precision=4))
    print(f"wrote {out / 'sdm.grid'} and {out / 'sdm.png'}")
    return EXIT_OK


def cmd_inspect_augment(args):
    exp = load_experiment(args)
    if args.image:
        try:
            image = imgproc.read_image(args.image)
            mask = imgproc.read_mask(args.mask) if args.mask else np.zeros(image.shape, np.uint8)
        except (OSError, imgproc.ImageFormatError) as exc:
            raise CLIError(str(exc), EXIT_DATA) from None
    else:
        image, mask = phantom.generate_phantom(replace(exp.phantom, seed=args.phantom_seed))
    aug = exp.aug
    if aug.norm_mean is None or aug.norm_std is None:
        aug.norm_mean, aug.norm_std = imgproc.dataset_stats([image], aug)
    aug_img, aug_mask = imgproc.apply_augmentations(image, mask, aug, args.seed)
    # display the normalized output back in [0, 1]
    shown = np.clip(aug_img * aug.norm_std + aug.norm_mean, 0.0, 1.0)
    panel = np.concatenate([np.concatenate([image, mask.astype(float)], axis=1),
                            np.concatenate([shown, aug_mask.astype(float)], axis=1)], axis=0)
    out = _out_dir(args, "inspect")
    path = out / f"augment_seed{args.seed}.png"
    imgproc.write_image(path, panel)
    print(f"wrote {path} (top: input image|mask, bottom: augmented image|mask)")
    return EXIT_OK


def model_report(cfg):
    n_all = vit.count_params(cfg)
    n_enc = vit.count_params(cfg, include_decoder=False)
    fl = vit.count_flops(cfg)
    lines = [
        f"config: image {cfg.image_size}, patch {cfg.patch_size}, tokens {cfg.num_patches}, "
        f"dim {cfg.embed_dim}, depth {cfg.depth}, heads {cfg.heads}, mlp x{cfg.mlp_ratio}, "
        f"decoder {','.join(map(str, cfg.decoder_channels))}",
        f"params: total {n_all} ({n_all / 1e6:.2f} M), encoder {n_enc} ({n_enc / 1e6:.2f} M), "
        f"decoder {n_all - n_enc}",
        f"flops: {fl['total'] / 1e9:.2f} GFLOPs per forward",
        f"convention: 1 multiply-accumulate = {fl['flops_per_mac']} FLOPs; softmax/norm/GELU/sigmoid "
        f"= {vit.ELEMENTWISE_FLOPS} FLOPs per element; bilinear upsample = 4 MACs per output element; "
        f"bias and residual adds not counted",
        f"macs: {fl['macs'] / 1e9:.2f} GMACs (matmul, conv, upsample)",
    ]
    for key, value in fl.items():
        if key not in ("total", "macs", "flops_per_mac"):
            lines.append(f"  {key}: {value / 1e9:.4f} GFLOPs")
    return "\n".join(lines)


def cmd_inspect_model(args):
    exp = load_experiment(args)
    try:
        exp.vit.validate()
    except ValueError as exc:
        raise CLIError(str(exc), EXIT_CONFIG) from None
    print(model_report(exp.vit))
    return EXIT_OK


# ----------------------------------------------------------------------- parser


def build_parser():
    p = argparse.ArgumentParser(prog="bavt", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"bavt {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a phantom dataset")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--size", type=int)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--split-ratio", type=float, default=phantom.DEFAULT_SPLIT)
    g.add_argument("--config")
    g.add_argument("--out")
    g.set_defaults(func=cmd_gen)

    def add_train_flags(sp):
        sp.add_argument("--data", required=True)
        sp.add_argument("--config")
        sp.add_argument("--out")
        sp.add_argument("--lambda", dest="lam", type=float)
        sp.add_argument("--mode", choices=sdt.BOUNDARY_MODES)
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--batch-size", type=int)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--deterministic", action="store_true")

    t = sub.add_parser("train", help="train a model on the train split, selecting on val loss")
    add_train_flags(t)
    t.add_argument("--resume", help="last.ckpt from an interrupted run")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test", choices=("train", "val", "test"))
    e.add_argument("--threshold", type=float, default=0.5)
    e.add_argument("--roc", action="store_true", help="also write roc.csv")
    e.add_argument("--save-pred", action="store_true", help="write binarized predictions as PNG")
    e.add_argument("--deterministic", action="store_true")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="baseline (lambda=0) vs boundary-aware training")
    add_train_flags(a)
    a.add_argument("--seeds", help="comma-separated seeds, e.g. 0,1,2")
    a.add_argument("--threshold", type=float, default=0.5)
    a.set_defaults(func=cmd_ablate)

    i = sub.add_parser("inspect", help="distance maps, augmentation previews, model cost")
    isub = i.add_subparsers(dest="what", required=True)
    s = isub.add_parser("sdt")
    s.add_argument("--mask")
    s.add_argument("--fixture", choices=sorted(FIXTURES))
    s.add_argument("--out")
    s.set_defaults(func=cmd_inspect_sdt)
    au = isub.add_parser("augment")
    au.add_argument("--image")
    au.add_argument("--mask")
    au.add_argument("--phantom-seed", type=int, default=0)
    au.add_argument("--seed", type=int, default=0)
    au.add_argument("--config")
    au.add_argument("--out")
    au.set_defaults(func=cmd_inspect_augment)
    m = isub.add_parser("model")
    m.add_argument("--config")
    m.set_defaults(func=cmd_inspect_model)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CLIError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except config.ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

"""``crm`` command-line tool.

Exit codes: 0 success, 1 verification or run failure, 2 usage or config error.
Heavy imports happen after argument parsing so that ``--threads`` can cap the
BLAS thread pools before numpy loads.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "BLIS_NUM_THREADS")


class UsageError(Exception):
    pass


def _set_threads(n: int) -> None:
    if n < 1:
        raise UsageError("--threads must be >= 1")
    for var in _THREAD_VARS:
        os.environ[var] = str(n)


def _out(msg: str = "") -> None:
    print(msg, flush=True)


def _err(msg: str) -> None:
    print(f"crm: {msg}", file=sys.stderr, flush=True)


# ----------------------------------------------------------------------------
# generate


def cmd_generate(args) -> int:
    import numpy as np

    from crm.config import load_run_config
    from crm.data import generate_synthetic, save_dataset, tag_splits

    run = load_run_config(args.config)
    data_cfg = run.data
    if args.seed is not None:
        data_cfg = type(data_cfg).from_dict({**data_cfg.to_dict(), "seed": args.seed})
    out = Path(args.out) if args.out else run.dataset
    if out is None:
        raise UsageError("no output path: pass --out or set paths.dataset")
    out.parent.mkdir(parents=True, exist_ok=True)
    ds = tag_splits(generate_synthetic(data_cfg), run.split, data_cfg.seed)
    save_dataset(ds, out)
    hist = np.bincount(ds.groups(), minlength=data_cfg.n_group)
    n_train = sum(t == "train" for t in ds.splits)
    _out(f"wrote {len(ds)} scenes to {out} ({n_train} train / {len(ds) - n_train} test)")
    _out("group class histogram:")
    for c, n in enumerate(hist):
        _out(f"  {c + 1}: {int(n)}")
    _out(f"checksum {ds.checksum()}")
    return EXIT_OK


# ----------------------------------------------------------------------------
# train


def _load_dataset(path: Path | None):
    from crm.data import DatasetFormatError, load_dataset

    if path is None:
        raise UsageError("no dataset: pass --dataset or set paths.dataset")
    if not path.exists():
        raise UsageError(f"dataset {path} does not exist")
    try:
        return load_dataset(path)
    except DatasetFormatError as e:
        raise UsageError(str(e)) from None


def _train_test(ds, run):
    from crm.data import select_split, split_dataset

    if any(t is not None for t in ds.splits):
        return select_split(ds, "train"), select_split(ds, "test")
    return split_dataset(ds, run.split, run.seed)


def _check_dataset_matches(ds, run) -> None:
    dc, rc = ds.config, run.data
    for key in ("n_individual", "n_group", "image_size"):
        if getattr(dc, key) != getattr(rc, key):
            raise UsageError(f"dataset {key} {getattr(dc, key)} differs from config {getattr(rc, key)}")
    if run.train.modality not in ds.frames:
        raise UsageError(f"dataset has no '{run.train.modality}' frames")


def cmd_train(args) -> int:
    from crm.checkpoint import CheckpointError, load_params, save_params
    from crm.config import load_run_config
    from crm.training import TrainingDiverged, format_log_line, train_two_step

    run = load_run_config(args.config, args.seed)
    dataset = Path(args.dataset).resolve() if args.dataset else run.dataset
    out_dir = Path(args.out).resolve() if args.out else run.out_dir
    if out_dir is None:
        raise UsageError("no output directory: pass --out or set paths.out_dir")
    ds = _load_dataset(dataset)
    _check_dataset_matches(ds, run)
    train, test = _train_test(ds, run)
    if len(train) == 0:
        raise UsageError("training split is empty")
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = out_dir / "checkpoint.ckpt"
    log_path = out_dir / "epochs.jsonl"

    params = adam = None
    start = 0
    if args.resume:
        try:
            params, meta, adam = load_params(args.resume)
        except (OSError, CheckpointError) as e:
            raise UsageError(f"cannot resume: {e}") from None
        if meta.get("run", {}).get("model") != json.loads(json.dumps(run.model.to_dict())):
            raise UsageError("resume checkpoint was trained with a different model config")
        start = int(meta["epoch"])
        _truncate_log(log_path, start)
    else:
        log_path.write_text("")
    (out_dir / "run.json").write_text(json.dumps(run.to_dict(), indent=1, sort_keys=True) + "\n")

    # paths stay out of the checkpoint so identical runs give identical bytes
    run_meta = {k: v for k, v in run.to_dict().items() if k != "paths"}
    meta_base = {"run": run_meta, "dataset_checksum": ds.checksum()}

    def on_epoch(rec):
        with open(log_path, "a") as fh:
            fh.write(format_log_line(rec) + "\n")
        parts = [f"epoch {rec['epoch']:3d}", f"phase {rec['phase']}", f"lr {rec['lr']:g}",
                 f"loss {rec['train_loss']:.5g}"]
        if rec["train_mca"] is not None:
            parts.append(f"train MCA {100 * rec['train_mca']:.1f}%")
        if "heldout_mca" in rec:
            parts.append(f"held-out MCA {100 * rec['heldout_mca']:.1f}%")
        _out("  ".join(parts))

    def checkpoint(epoch, p, a):
        save_params(ckpt, p, {**meta_base, "epoch": epoch}, a)

    try:
        train_two_step(
            train,
            run.model,
            run.train,
            held_out=test if len(test) else None,
            params=params,
            start_epoch=start,
            adam=adam,
            stop_after=args.epochs,
            on_epoch=on_epoch,
            checkpoint=checkpoint,
        )
    except TrainingDiverged as e:
        _err(f"training diverged: {e}")
        return EXIT_FAIL
    _out(f"checkpoint {ckpt}")
    _out(f"epoch log {log_path}")
    return EXIT_OK


def _truncate_log(path: Path, last_epoch: int) -> None:
    """Keep log lines up to ``last_epoch`` so a resumed run appends cleanly."""
    if not path.exists():
        return
    keep = [ln for ln in path.read_text().splitlines() if ln.strip() and json.loads(ln)["epoch"] <= last_epoch]
    path.write_text("".join(ln + "\n" for ln in keep))


# ----------------------------------------------------------------------------
# eval


def parse_merge(text: str | None) -> dict[int, int] | None:
    """``"4,5->4"`` (or with ``→``; groups separated by ``;``) to a 0-based mapping."""
    if not text:
        return None
    merge: dict[int, int] = {}
    for part in text.replace("→", "->").split(";"):
        if "->" not in part:
            raise UsageError(f"bad --merge group {part!r}; expected e.g. '4,5->4'")
        src, dst = part.split("->", 1)
        try:
            target = int(dst) - 1
            sources = [int(v) - 1 for v in src.split(",") if v.strip()]
        except ValueError:
            raise UsageError(f"bad --merge group {part!r}") from None
        if not sources or target < 0 or min(sources) < 0:
            raise UsageError(f"bad --merge group {part!r}; classes are 1-based")
        for c in sources:
            merge[c] = target
    return merge


def _load_model(path):
    from crm.checkpoint import CheckpointError, load_params
    from crm.config import run_config_from_dict

    try:
        params, meta, _ = load_params(path)
    except (OSError, CheckpointError) as e:
        raise UsageError(f"cannot load checkpoint: {e}") from None
    if "run" not in meta:
        raise UsageError(f"{path}: checkpoint carries no run config")
    run = run_config_from_dict(meta["run"])
    return params, run


def cmd_eval(args) -> int:
    import numpy as np

    from crm.training import evaluate_predictions, fuse_predictions, predict

    merge = parse_merge(args.merge)
    params, run = _load_model(args.checkpoint)
    ds = _load_dataset(Path(args.dataset))
    _check_dataset_matches(ds, run)
    if args.split != "all":
        ds = _train_test(ds, run)[0 if args.split == "train" else 1]
        if len(ds) == 0:
            raise UsageError(f"dataset has no '{args.split}' scenes")
    n_group = run.model.n_group
    if merge and max(max(merge), max(merge.values())) >= n_group:
        raise UsageError(f"--merge refers to a class above {n_group}")
    probs = predict(params, run.model, ds, run.train.batch_size, run.train.modality, run.pool_decode)
    if args.fuse:
        params2, run2 = _load_model(args.fuse)
        _check_dataset_matches(ds, run2)
        if run2.model.n_group != n_group:
            raise UsageError("--fuse model has a different number of group classes")
        probs2 = predict(params2, run2.model, ds, run2.train.batch_size, run2.train.modality, run2.pool_decode)
        probs = fuse_predictions(probs, probs2)
    y = ds.groups()
    report = evaluate_predictions(y, np.argmax(probs, axis=1), n_group)
    _out(f"{len(ds)} scenes ({args.split})")
    _out(report.format())
    doc = {"scenes": len(ds), "split": args.split, "report": report.to_dict()}
    if merge:
        merged = evaluate_predictions(y, np.argmax(probs, axis=1), n_group, merge)
        _out("merged classes:")
        _out(merged.format())
        doc["merged"] = merged.to_dict()
    if args.out:
        Path(args.out).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return EXIT_OK


# ----------------------------------------------------------------------------
# render


def cmd_render(args) -> int:
    import numpy as np

    from crm.activity_map import build_activity_map, composite, write_pgm, write_ppm

    if bool(args.checkpoint) == bool(args.ground_truth):
        raise UsageError("give exactly one of --checkpoint or --ground-truth")
    ds = _load_dataset(Path(args.dataset))
    matches = [i for i, s in enumerate(ds.scenes) if s.id == args.scene]
    if not matches:
        raise UsageError(f"scene {args.scene} not in dataset")
    i = matches[0]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.ground_truth:
        cfg = ds.config
        n_i = cfg.n_individual
        stacks = [("gt", build_activity_map(ds.scenes[i], cfg.grid, n_i, cfg.n_group))]
    else:
        from crm import tensor as tt
        from crm.model import crm_forward

        params, run = _load_model(args.checkpoint)
        _check_dataset_matches(ds, run)
        if not run.model.uses_maps:
            raise UsageError("the feature-only model produces no activity maps")
        n_i = run.model.n_individual
        with tt.no_grad():
            res = crm_forward(ds.clip([i], run.train.modality), params, run.model)
        stacks = [(f"stage{t + 1}", m.data[0]) for t, m in enumerate(res.stage_maps)]
    written = []
    for prefix, amap in stacks:
        amap = np.clip(amap, 0.0, 1.0)
        for n in range(amap.shape[2]):
            p = out / f"{prefix}_field{n + 1:02d}.pgm"
            write_pgm(p, amap[:, :, n])
            written.append(p)
        if n_i > 0:
            p = out / f"{prefix}_individual.ppm"
            write_ppm(p, composite(amap[:, :, :n_i]))
            written.append(p)
        p = out / f"{prefix}_group.ppm"
        write_ppm(p, composite(amap[:, :, n_i:]))
        written.append(p)
    for p in written:
        _out(str(p))
    return EXIT_OK


# ----------------------------------------------------------------------------
# gradcheck

GRADCHECK_TOLERANCE = 1e-4

TINY_GRADCHECK = {
    "data": {
        "image_size": [48, 64],
        "grid": [12, 16],
        "persons": [2, 3],
        "box_width": [8, 12],
        "box_height": [10, 16],
        "min_gap": 2,
        "scenes": 2,
    },
    "model": {
        "stages": 2,
        "feature_dim": 8,
        "backbone_widths": [8, 8, 8],
        "phi_widths": [8, 8, 8, 8],
        "psi_widths": [8, 8, 8, 8],
        "zeta_widths": [8, 8, 8],
    },
}


def gradcheck_run(run, corrupt: float = 1.0, coords_per_tensor: int = 8, seed: int = 0):
    """Grad-check the total loss of ``run``'s model on two generated scenes.

    Returns ``{group: (worst error, coordinates compared)}``.
    """
    import numpy as np

    from crm import tensor as tt
    from crm.data import SyntheticConfig, generate_synthetic
    from crm.model import crm_forward, init_params
    from crm.training import LossWeights, loss_total, onehot, truth_maps

    data_cfg = SyntheticConfig.from_dict({**run.data.to_dict(), "scenes": 2, "seed": seed})
    ds = generate_synthetic(data_cfg)
    params = init_params(run.model)
    truth = truth_maps(ds, run.model) if run.model.uses_maps else None
    idx = np.arange(len(ds))
    clip = ds.clip(idx, run.train.modality)
    target = onehot(ds.groups(), run.model.n_group)
    weights = LossWeights(1.0, 1.0) if run.model.uses_maps else LossWeights(0.0, 1.0)

    def forward():
        out = crm_forward(clip, params, run.model)
        return loss_total(out.stage_maps, truth, out.probs, target, weights)

    details = tt.grad_check_details(
        forward, params.values(), max_coords=coords_per_tensor, rng=np.random.default_rng(seed), corrupt=corrupt
    )
    groups: dict[str, tuple[float, int]] = {}
    for name, (worst, used) in details.items():
        g = name.split(".")[0]
        w0, u0 = groups.get(g, (0.0, 0))
        groups[g] = (max(w0, worst), u0 + used)
    return groups


def cmd_gradcheck(args) -> int:
    from crm.config import load_run_config, run_config_from_dict

    run = load_run_config(args.config, args.seed) if args.config else run_config_from_dict(TINY_GRADCHECK, None, args.seed)
    groups = gradcheck_run(run, corrupt=2.0 if args.corrupt else 1.0, coords_per_tensor=args.coords,
                           seed=run.seed)
    ok = True
    _out(f"{'group':<10}{'coords':>8}  max relative error")
    for g, (worst, used) in groups.items():
        flag = "ok" if worst < GRADCHECK_TOLERANCE else "FAIL"
        ok &= worst < GRADCHECK_TOLERANCE
        _out(f"{g:<10}{used:>8}  {worst:.3e}  {flag}")
    total = sum(u for _, u in groups.values())
    _out(f"{total} coordinates checked, tolerance {GRADCHECK_TOLERANCE:g}: {'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_FAIL


# ----------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="crm", description="Convolutional relational machine on synthetic scenes.")
    p.add_argument("--threads", type=int, default=1, help="BLAS threads (default 1)")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="generate a synthetic dataset")
    g.add_argument("config", nargs="?", help="run config JSON (defaults apply when omitted)")
    g.add_argument("--out", help="annotation file to write (overrides paths.dataset)")
    g.add_argument("--seed", type=int, help="data seed (overrides data.seed)")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="two-step training")
    t.add_argument("config", help="run config JSON")
    t.add_argument("--dataset", help="overrides paths.dataset")
    t.add_argument("--out", help="output directory (overrides paths.out_dir)")
    t.add_argument("--seed", type=int, help="model/training seed (overrides seed)")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--epochs", type=int, help="stop after this epoch number")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("dataset")
    e.add_argument("--split", choices=("test", "train", "all"), default="test")
    e.add_argument("--merge", help="class merge such as '4,5->4' (1-based; ';' separates groups)")
    e.add_argument("--fuse", metavar="CHECKPOINT", help="average probabilities with a second model")
    e.add_argument("--out", help="write the report as JSON")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("render", help="write activity maps as PGM/PPM images")
    r.add_argument("dataset")
    src = r.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--ground-truth", action="store_true")
    r.add_argument("--scene", type=int, required=True, help="scene id")
    r.add_argument("--out", required=True, help="output directory")
    r.set_defaults(func=cmd_render)

    c = sub.add_parser("gradcheck", help="finite-difference check of the full model")
    c.add_argument("config", nargs="?", help="run config JSON (a tiny model when omitted)")
    c.add_argument("--corrupt", action="store_true", help="double the analytic gradient; must be caught")
    c.add_argument("--coords", type=int, default=8, help="sampled coordinates per parameter tensor")
    c.add_argument("--seed", type=int)
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        _set_threads(args.threads)
        import logging

        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
        from crm.config import ConfigError

        try:
            return args.func(args)
        except ConfigError as e:
            raise UsageError(str(e)) from None
    except UsageError as e:
        _err(str(e))
        return EXIT_USAGE
    except SystemExit as e:  # --help
        return int(e.code or 0)
    except BrokenPipeError:
        # output piped into e.g. head; stop quietly
        os.dup2(os.open(os.devnull, os.O_WRONLY), sys.stdout.fileno())
        return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

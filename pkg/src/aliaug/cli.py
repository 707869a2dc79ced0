"""``aliaug`` command line: one entry point, one subcommand per pipeline stage."""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import __version__
from .data_model import (
    DatasetManifest,
    ManifestError,
    Pairing,
    SampleRecord,
    load_manifest,
    quantize,
    save_manifest,
    split_dataset,
)
from .synth_corpus import DEFECT_KINDS, CorpusConfig, CorpusError, build_corpus, write_corpus
from .training import (
    CheckpointError,
    ConfigError,
    TrainConfig,
    load_generator,
    load_train_config,
    read_flat_config,
    train_loop,
)

log = logging.getLogger("aliaug")

CORPUS_KEYS = ("size", "texture", "seed", "good", *DEFECT_KINDS)


class UsageError(Exception):
    """Bad command line; reported with usage text and exit code 2."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


# -- helpers ------------------------------------------------------------------------

def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _hash_tree(paths: Sequence[Path], root: Path) -> dict[str, str]:
    out = {}
    for p in paths:
        p = Path(p)
        files = sorted(q for q in p.rglob("*") if q.is_file()) if p.is_dir() else [p]
        for f in files:
            if f.name == "run.json":
                continue
            try:
                key = os.path.relpath(f, root)
            except ValueError:
                key = str(f)
            out[key] = _sha256(f)
    return dict(sorted(out.items()))


def write_run_metadata(out: Path, command: str, args: argparse.Namespace, config: dict,
                       inputs: Sequence[Path] = (), outputs: Sequence[Path] = ()) -> Path:
    """``run.json``: command, flags, config snapshot and content hashes of inputs and outputs."""
    flags = {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(args).items())
             if k not in ("func", "command")}
    meta = {
        "command": command,
        "version": __version__,
        "flags": flags,
        "config": config,
        "inputs": _hash_tree([Path(p) for p in inputs if p is not None and Path(p).exists()], out),
        "outputs": _hash_tree([Path(p) for p in outputs], out),
    }
    path = out / "run.json"
    path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def corpus_config_from(values: dict[str, str], seed: int | None) -> CorpusConfig:
    unknown = sorted(set(values) - set(CORPUS_KEYS))
    if unknown:
        raise ConfigError(f"unknown config key {unknown[0]!r}")
    kw: dict = {}
    counts = {}
    for key, raw in values.items():
        try:
            if key == "texture":
                kw["texture"] = raw
            elif key in ("size", "seed"):
                kw[key] = int(raw)
            else:
                counts[key] = int(raw)
        except ValueError:
            raise ConfigError(f"config key {key!r}: cannot parse {raw!r} as an integer") from None
    if counts:
        kw["counts"] = counts
    if seed is not None:
        kw["seed"] = seed
    try:
        return CorpusConfig(**kw)
    except CorpusError as exc:
        raise ConfigError(str(exc)) from None


def _train_config(args) -> TrainConfig:
    overrides = {"seed": args.seed} if args.seed is not None else {}
    return load_train_config(args.config, **overrides)


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _generated_record(rec: SampleRecord, img: np.ndarray, index: int) -> SampleRecord:
    return SampleRecord(
        id=f"gen_{rec.id}_{index}", mask=rec.mask, prompt=rec.prompt, label=rec.label,
        pairing=Pairing.MASK_ONLY, input_image=None, target_image=quantize(img),
        paths={"mask": rec.paths["mask"]} if "mask" in rec.paths else {}, provenance="synthetic",
    )


# -- subcommands -------------------------------------------------------------------------

def cmd_synth_corpus(args) -> int:
    values = read_flat_config(args.config) if args.config else {}
    cfg = corpus_config_from(values, args.seed)
    out = _out(args)
    written = write_corpus(out, build_corpus(cfg))
    write_run_metadata(out, "synth-corpus", args, dataclasses.asdict(cfg), [args.config],
                       list(written.values()) + [out / "images"])
    print(f"wrote {', '.join(str(p) for p in written.values())}")
    return 0


def cmd_train(args) -> int:
    cfg = _train_config(args)
    data = load_manifest(args.data)
    eval_set = load_manifest(args.manifest) if args.manifest else None
    out = _out(args)
    ckpt = train_loop(data, cfg, out, eval_set=eval_set, resume_from=args.checkpoint)
    write_run_metadata(out, "train", args, dataclasses.asdict(cfg), [args.config, args.data, args.manifest],
                       [ckpt])
    print(f"final checkpoint {ckpt}")
    return 0


def cmd_generate(args) -> int:
    from .evaluation import generate_batch

    gen = load_generator(args.checkpoint)
    records = list(load_manifest(args.manifest))
    if args.mask_only:
        records = [dataclasses.replace(r, input_image=None, pairing=Pairing.MASK_ONLY) for r in records]
    outs = generate_batch(gen, records, mask_only=args.mask_only)
    gen_records = [_generated_record(r, img, 0) for r, img in zip(records, outs)]
    out = _out(args)
    manifest = save_manifest(gen_records, out / "generated.manifest", out / "images")
    write_run_metadata(out, "generate", args, {"mask_only": args.mask_only},
                       [args.checkpoint, args.manifest], [out / "generated.manifest", out / "images"])
    print(f"generated {len(manifest)} images")
    return 0


def _build_synthetic(args, kind: str) -> int:
    from .evaluation import build_cas, build_nas

    if args.n_per_record < 1:
        raise ConfigError("n_per_record must be >= 1")
    gen = load_generator(args.checkpoint)
    real = load_manifest(args.manifest)
    out = _out(args)
    seed = args.seed or 0
    failures: list = []
    cas = build_cas(real, gen, args.n_per_record, seed, failures=failures)
    if kind == "cas":
        manifest = save_manifest(cas, out / "cas.manifest", out / "images")
    else:
        manifest = build_nas(real, gen, args.n_per_record, seed, cas=cas)
        manifest = save_manifest(manifest, out / "nas.manifest", out / "images")
    write_run_metadata(out, f"build-{kind}", args, {"n_per_record": args.n_per_record, "failures": len(failures)},
                       [args.checkpoint, args.manifest], [out / f"{kind}.manifest", out / "images"])
    print(f"{kind} manifest: {len(manifest)} records, {len(failures)} failed generations")
    return 0


def cmd_build_cas(args) -> int:
    return _build_synthetic(args, "cas")


def cmd_build_nas(args) -> int:
    return _build_synthetic(args, "nas")


def cmd_eval_fid(args) -> int:
    from .evaluation import compute_fid

    real = load_manifest(args.manifest)
    generated = load_manifest(args.data)
    res = compute_fid(real, generated)
    out = _out(args)
    (out / "fid.txt").write_text(f"fid = {res.value:.6f}\nn_real = {res.n_real}\nn_generated = {res.n_generated}\n",
                                 encoding="utf-8")
    write_run_metadata(out, "eval-fid", args, {}, [args.manifest, args.data], [out / "fid.txt"])
    print(f"fid = {res.value:.6f}")
    return 0


def cmd_eval_downstream(args) -> int:
    from .evaluation import eval_downstream, train_downstream

    train = load_manifest(args.data)
    test = load_manifest(args.manifest)
    seed = args.seed or 0
    model = train_downstream(train, seed=seed, steps=args.steps, augment=args.augment)
    metrics = eval_downstream(model, test)
    out = _out(args)
    lines = [f"{k} = {v:.6f}" for k, v in metrics.as_dict().items()] + [f"n = {metrics.n}"]
    (out / "downstream.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    write_run_metadata(out, "eval-downstream", args, {"steps": args.steps, "augment": args.augment},
                       [args.data, args.manifest], [out / "downstream.txt"])
    print("\n".join(lines))
    return 0


def cmd_report(args) -> int:
    from .evaluation import EvalReport, fid_for_records, median_metrics, run_strategies

    data = Path(args.data)
    records = []
    for name in ("paired.manifest", "good.manifest"):
        if (data / name).exists():
            records.extend(load_manifest(data / name))
    if not records:
        raise ManifestError(f"no paired.manifest or good.manifest under {data}")
    gen = load_generator(args.checkpoint)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [args.seed or 0]
    train, test = split_dataset(DatasetManifest(tuple(records)), 0.7, seed=seeds[0])
    per_seed = [run_strategies(train, test, gen, seed=s, n_per_record=args.n_per_record, steps=args.steps)
                for s in seeds]
    metrics = {k: median_metrics([run[k] for run in per_seed]) for k in per_seed[0]}
    defects = [r for r in test if r.is_defect]
    fid = fid_for_records(gen, defects) if len(defects) >= 2 else None
    report = EvalReport(fid, metrics, seeds, counts={"train": len(train), "test": len(test)})
    out = _out(args)
    report.write(out / "report.txt")
    (out / "report_table.txt").write_text(report.table() + "\n", encoding="utf-8")
    write_run_metadata(out, "report", args, {"steps": args.steps, "n_per_record": args.n_per_record},
                       [args.checkpoint, data], [out / "report.txt", out / "report_table.txt"])
    print(report.table())
    return 0


# -- parser --------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="aliaug", description="Mask- and prompt-conditioned defect augmentation.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, func, help_, *flags):
        p = sub.add_parser(name, help=help_)
        p.set_defaults(func=func)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", required=True, help="output directory")
        for flag in flags:
            flag(p)
        return p

    config = lambda p: p.add_argument("--config", help="flat key = value config file")  # noqa: E731
    ckpt = lambda p: p.add_argument("--checkpoint", required=True)  # noqa: E731
    manifest = lambda p: p.add_argument("--manifest", required=True)  # noqa: E731
    data = lambda p: p.add_argument("--data", required=True)  # noqa: E731
    npr = lambda p: p.add_argument("--n-per-record", type=int, default=4)  # noqa: E731
    steps = lambda p: p.add_argument("--steps", type=int, default=1500, help="downstream training steps")  # noqa: E731

    add("synth-corpus", cmd_synth_corpus, "write a procedural toy corpus", config)
    p = add("train", cmd_train, "train the generator", config, data)
    p.add_argument("--manifest", help="held-out manifest for periodic FID")
    p.add_argument("--checkpoint", help="resume from this checkpoint")
    p = add("generate", cmd_generate, "generate images for a manifest", ckpt, manifest)
    p.add_argument("--mask-only", action="store_true")
    add("build-cas", cmd_build_cas, "synthetic-only training manifest", ckpt, manifest, npr)
    add("build-nas", cmd_build_nas, "real plus synthetic training manifest", ckpt, manifest, npr)
    add("eval-fid", cmd_eval_fid, "FID between a real (--manifest) and generated (--data) manifest",
        manifest, data)
    p = add("eval-downstream", cmd_eval_downstream, "train on --data, evaluate on --manifest",
            manifest, data, steps)
    p.add_argument("--augment", action="store_true")
    p = add("report", cmd_report, "D_S / D_S_AUG / CAS / NAS comparison table", ckpt, data, npr, steps)
    p.add_argument("--seeds", help="comma-separated downstream seeds; medians are reported")
    return parser


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 2
    if args.command is None:
        print(parser.format_usage(), file=sys.stderr, end="")
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (ManifestError, CheckpointError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    torch.set_num_threads(int(os.environ.get("ALIAUG_THREADS", "1")))
    sys.exit(run())


if __name__ == "__main__":
    main()

"""Command-line interface.

Subcommands: gen-data, decompose, augment, train, eval, adist, sweep-r,
ablate, export-features.  Training-style subcommands read a plain-text
``key = value`` config file plus repeated ``--set key=value`` overrides.
Exit codes: 0 success, 1 usage error, 2 data error.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys

import numpy as np

from . import data as dat
from . import harness as H
from .data import DataError
from .fdag import NoiseConfig, perturb
from .model import FfdiModel
from .spectral import decompose


class _UsageExit(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise _UsageExit()


def _build_parser() -> _Parser:
    p = _Parser(prog="ffdi", description="Frequency-domain feature disentanglement, desk scale.")
    sub = p.add_subparsers(dest="command", metavar="command")

    g = sub.add_parser("gen-data", parser_class=_Parser, help="render the synthetic benchmark to disk")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--per-class", type=int, default=120)
    g.add_argument("--num-domains", type=int, default=4)
    g.add_argument("--classes", type=int, default=5)

    d = sub.add_parser("decompose", parser_class=_Parser, help="split an image into low/high-pass parts")
    d.add_argument("--in", dest="input", required=True)
    d.add_argument("--r", type=int, required=True)
    d.add_argument("--out", required=True)

    a = sub.add_parser("augment", parser_class=_Parser, help="frequency-domain augment an image directory")
    a.add_argument("--in", dest="input", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--target", default="both", choices=("amplitude", "phase", "both", "none"))
    a.add_argument("--mult-low", type=float, default=0.5)
    a.add_argument("--mult-high", type=float, default=1.5)
    a.add_argument("--mu", type=float, default=0.0)
    a.add_argument("--sigma", type=float, default=None)
    a.add_argument("--snr-db", type=float, default=30.0)
    a.add_argument("--p", type=float, default=1.0)

    def add_train_args(sp, with_out=True):
        sp.add_argument("--config", default=None, help="key = value config file")
        sp.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="override one config key")
        sp.add_argument("--data", default=None, help="dataset directory (default: render in memory)")
        if with_out:
            sp.add_argument("--out", default=None)

    t = sub.add_parser("train", parser_class=_Parser, help="train one leave-one-domain-out run")
    add_train_args(t)

    e = sub.add_parser("eval", parser_class=_Parser, help="evaluate a checkpoint on one domain")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", default=None)
    e.add_argument("--data-seed", type=int, default=0)
    e.add_argument("--domain", required=True)
    e.add_argument("--split", default="all", choices=("train", "test", "all"))

    ad = sub.add_parser("adist", parser_class=_Parser, help="A-distance between two feature CSVs")
    ad.add_argument("--features", nargs=2, required=True, metavar=("A", "B"))
    ad.add_argument("--seed", type=int, default=0)

    sw = sub.add_parser("sweep-r", parser_class=_Parser, help="accuracy across frequency thresholds")
    add_train_args(sw)
    sw.add_argument("--r-values", required=True, help="comma-separated r values")
    sw.add_argument("--domains", default=None, help="comma-separated held-out domains (default: all)")

    ab = sub.add_parser("ablate", parser_class=_Parser, help="six-configuration component ablation")
    add_train_args(ab)
    ab.add_argument("--domains", default=None)

    ex = sub.add_parser("export-features", parser_class=_Parser, help="pooled feature vectors to CSV")
    ex.add_argument("--checkpoint", required=True)
    ex.add_argument("--data", default=None)
    ex.add_argument("--data-seed", type=int, default=0)
    ex.add_argument("--tap", default="f_z", choices=("f_e", "f_h", "f_l", "f_z"))
    ex.add_argument("--domains", default=None)
    ex.add_argument("--out", required=True)
    return p


def _parse_overrides(pairs) -> dict:
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise H.ConfigError(f"--set expects KEY=VALUE, got {pair!r}")
        key, value = pair.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _load_config(args) -> H.TrainConfig:
    return H.load_train_config(args.config, _parse_overrides(args.overrides))


def _load_or_build_dataset(data_dir, cfg: H.TrainConfig | None = None, seed: int = 0):
    if data_dir is not None:
        return dat.load_dataset(data_dir)
    if cfg is not None:
        return dat.build_dataset(num_domains=cfg.num_domains, classes=cfg.classes,
                                 per_class_per_domain=cfg.per_class, seed=cfg.data_seed)
    return dat.build_dataset(seed=seed)


def _out_dir(args, cfg: H.TrainConfig) -> str:
    out = args.out or cfg.out_dir
    if not out:
        raise H.ConfigError("no output directory: pass --out or set out_dir in the config")
    os.makedirs(out, exist_ok=True)
    return out


def _read_feature_csv(path) -> np.ndarray:
    with open(path, newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty feature file") from None
        cols = [i for i, name in enumerate(header) if name.startswith("f")]
        if not cols:
            raise DataError(f"{path}: no feature columns (header names starting with 'f')")
        rows = []
        for ln, row in enumerate(reader, 2):
            try:
                rows.append([float(row[i]) for i in cols])
            except (ValueError, IndexError) as exc:
                raise DataError(f"{path}: bad feature row at line {ln}: {exc}") from exc
    if not rows:
        raise DataError(f"{path}: no feature rows")
    return np.asarray(rows)


# ---------------------------------------------------------------------------
# Subcommand bodies
# ---------------------------------------------------------------------------


def _cmd_gen_data(args) -> int:
    ds = dat.build_dataset(num_domains=args.num_domains, classes=args.classes,
                           per_class_per_domain=args.per_class, seed=args.seed)
    dat.save_dataset(ds, args.out)
    total = sum(len(d.images) for d in ds.domains.values())
    print(f"wrote {total} images across {len(ds.domains)} domains to {args.out}")
    return 0


def _cmd_decompose(args) -> int:
    image = dat.read_image(args.input)
    lfi, hfi = decompose(image, args.r)
    os.makedirs(args.out, exist_ok=True)
    stem = os.path.splitext(os.path.basename(args.input))[0]
    dat.write_ppm(os.path.join(args.out, f"{stem}.lfi.ppm"), np.clip(lfi, 0.0, 1.0))
    dat.write_ppm(os.path.join(args.out, f"{stem}.hfi.ppm"), np.clip(hfi + 0.5, 0.0, 1.0))
    residual = float(np.abs(lfi + hfi - image).max())
    H.atomic_write(os.path.join(args.out, f"{stem}.residual.txt"), f"{residual:.6g}\n")
    print(f"decomposed {args.input} at r={args.r}; residual {residual:.6g}")
    return 0


def _cmd_augment(args) -> int:
    cfg = NoiseConfig(target=args.target, mult_low=args.mult_low, mult_high=args.mult_high,
                      mu=args.mu, sigma=args.sigma,
                      snr_db=None if args.sigma is not None else args.snr_db,
                      apply_probability=args.p, seed=args.seed)
    names = sorted(n for n in os.listdir(args.input)
                   if n.lower().endswith((".ppm", ".png")))
    if not names:
        raise DataError(f"{args.input}: no .ppm or .png images found")
    os.makedirs(args.out, exist_ok=True)
    rows = []
    for i, name in enumerate(names):
        child_seed = args.seed ^ i
        rng = np.random.default_rng(child_seed)
        image = dat.read_image(os.path.join(args.input, name))
        dat.write_image(os.path.join(args.out, name), perturb(image, cfg, rng))
        rows.append((name, child_seed))
    H.write_csv(os.path.join(args.out, "manifest.csv"), ["file", "seed"], rows)
    print(f"augmented {len(rows)} images into {args.out}")
    return 0


def _cmd_train(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    dataset = _load_or_build_dataset(args.data, cfg)
    model, report = H.train_lodo(dataset, cfg.held_out, cfg)
    H.write_run_outputs(report, model, out)
    print(f"held_out={report.held_out} accuracy={report.held_out_accuracy:.4f} "
          f"wall_clock={report.wall_clock:.1f}s -> {out}")
    return 0


def _cmd_eval(args) -> int:
    model = FfdiModel.load(args.checkpoint)
    dataset = _load_or_build_dataset(args.data, seed=args.data_seed)
    if args.domain not in dataset.domains:
        raise DataError(f"unknown domain {args.domain!r}; dataset has {list(dataset.domains)}")
    dom = dataset.domains[args.domain]
    if args.split == "train":
        idx = dom.train_idx
    elif args.split == "test":
        idx = dom.test_idx
    else:
        idx = np.arange(len(dom.images))
    acc = H.evaluate(model, dom.images[idx], dom.labels[idx])
    print(f"{acc:.6g}")
    return 0


def _cmd_adist(args) -> int:
    fa = _read_feature_csv(args.features[0])
    fb = _read_feature_csv(args.features[1])
    print(f"{H.a_distance(fa, fb, seed=args.seed):.6g}")
    return 0


def _cmd_sweep_r(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    dataset = _load_or_build_dataset(args.data, cfg)
    try:
        r_values = [int(v) for v in args.r_values.replace(",", " ").split()]
    except ValueError as exc:
        raise H.ConfigError(f"bad --r-values: {exc}") from exc
    domains = args.domains.split(",") if args.domains else None
    rows = H.sweep_r(dataset, cfg, r_values, held_out_domains=domains)
    cols = [k for k in rows[0] if k != "r"]
    H.write_csv(os.path.join(out, "sweep.csv"), ["r", *cols],
                [[row["r"], *(row[c] for c in cols)] for row in rows])
    print(f"swept r over {r_values} -> {os.path.join(out, 'sweep.csv')}")
    return 0


def _cmd_ablate(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    dataset = _load_or_build_dataset(args.data, cfg)
    domains = args.domains.split(",") if args.domains else None
    rows = H.ablation_suite(dataset, cfg, held_out_domains=domains)
    cols = [k for k in rows[0] if k != "config"]
    H.write_csv(os.path.join(out, "ablation.csv"), ["config", *cols],
                [[row["config"], *(row[c] for c in cols)] for row in rows])
    print(f"ablation suite ({len(rows)} configs) -> {os.path.join(out, 'ablation.csv')}")
    return 0


def _cmd_export_features(args) -> int:
    model = FfdiModel.load(args.checkpoint)
    dataset = _load_or_build_dataset(args.data, seed=args.data_seed)
    wanted = args.domains.split(",") if args.domains else list(dataset.domains)
    images, labels, domains = [], [], []
    for dname in wanted:
        if dname not in dataset.domains:
            raise DataError(f"unknown domain {dname!r}; dataset has {list(dataset.domains)}")
        dom = dataset.domains[dname]
        images.append(dom.images)
        labels.append(dom.labels)
        domains.extend([dname] * len(dom.images))
    header, rows = H.export_features(model, np.concatenate(images), np.concatenate(labels),
                                     domains, tap=args.tap)
    H.write_csv(args.out, header, rows)
    print(f"exported {len(rows)} feature rows ({args.tap}) -> {args.out}")
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "decompose": _cmd_decompose,
    "augment": _cmd_augment,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "adist": _cmd_adist,
    "sweep-r": _cmd_sweep_r,
    "ablate": _cmd_ablate,
    "export-features": _cmd_export_features,
}


def cli(argv) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageExit:
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](args)
    except _UsageExit:
        return 1
    except (H.ConfigError, ValueError) as exc:
        print(f"ffdi {args.command}: {exc}", file=sys.stderr)
        return 1
    except (DataError, OSError) as exc:
        print(f"ffdi {args.command}: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(cli(sys.argv[1:]))


if __name__ == "__main__":
    main()

"""``tisc`` command line: synth, train, eval, saliency, count and bench.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
divergence.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import data, model, saliency, train
from .errors import ConfigError, DataError, DivergenceError, TiScError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


@dataclass
class RunConfig:
    network: model.NetworkConfig | None = None
    train: train.TrainConfig = field(default_factory=train.TrainConfig)
    synth: data.SynthSpec | None = None
    paths: dict = field(default_factory=dict)
    seed: int = 0

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from None
        return cls.from_dict(doc, base=path.parent)

    @classmethod
    def from_dict(cls, doc: dict, base=Path(".")) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(doc) - {"network", "train", "synth", "paths", "seed"}
        if unknown:
            raise ConfigError(f"unknown top-level config keys: {sorted(unknown)}")
        seed = int(doc.get("seed", 0))
        net = model.NetworkConfig.from_dict(doc["network"]) if "network" in doc else None
        tr = train.TrainConfig.from_dict({"seed": seed, **doc.get("train", {})})
        synth = None
        if "synth" in doc:
            try:
                synth = data.SynthSpec(**{"seed": seed, **doc["synth"]})
                synth.validate()
            except (TypeError, DataError) as exc:
                raise ConfigError(f"invalid synth section: {exc}") from None
        paths = {k: str(Path(base, v)) for k, v in doc.get("paths", {}).items()}
        return cls(net, tr, synth, paths, seed)

    def with_seed(self, seed: int | None) -> "RunConfig":
        if seed is None:
            return self
        self.seed = seed
        self.train.seed = seed
        if self.synth is not None:
            self.synth.seed = seed
        return self

    def require_network(self) -> model.NetworkConfig:
        if self.network is None:
            raise ConfigError("config has no 'network' section")
        return self.network


def _write_json(path: Path, obj):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _out_dir(args, cfg: RunConfig | None = None, key: str = "reports_out") -> Path:
    if args.out:
        out = Path(args.out)
    elif cfg is not None and key in cfg.paths:
        out = Path(cfg.paths[key])
    else:
        out = Path(".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _data_path(args, cfg: RunConfig | None) -> Path:
    if getattr(args, "data", None):
        return Path(args.data)
    if cfg is not None and "data" in cfg.paths:
        return Path(cfg.paths["data"])
    raise ConfigError("no data path: pass --data or set paths.data")


# -- subcommands -------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = RunConfig.load(args.config).with_seed(args.seed) if args.config else RunConfig()
    spec = cfg.synth or data.SynthSpec(seed=cfg.seed if args.seed is None else args.seed)
    if args.mode:
        spec.alignment = args.mode
    ds = data.synthesize(spec)
    if args.out:
        path = Path(args.out) / "data.tseg"
    elif "data" in cfg.paths:
        path = Path(cfg.paths["data"])
    else:
        path = Path("data.tseg")
    path.parent.mkdir(parents=True, exist_ok=True)
    data.write_tseg(ds, path)
    print(json.dumps({"path": str(path), "n_segments": ds.n_segments}))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = RunConfig.load(args.config).with_seed(args.seed)
    net_cfg = cfg.require_network()
    ds = data.read_tseg(_data_path(args, cfg))
    out = _out_dir(args, cfg)
    ds = train.balance(ds, cfg.seed)
    net = model.build(net_cfg, cfg.seed)
    nets, metrics, plan = train.fit(net, ds, cfg.train, threads=args.threads)
    for k, n in enumerate(nets):
        model.save(n, out / f"model_fold{k}.tscm")
    (out / "metrics.json").write_text(metrics.to_json() + "\n")
    (out / "metrics.csv").write_text(metrics.to_csv())
    split = plan.to_dict()
    split["source_index"] = ds.source_index.tolist()
    _write_json(out / "split.json", split)
    print(json.dumps(metrics.summary()))
    return EXIT_OK


def evaluate_model(net: model.Network, ds: data.SegmentDataset) -> dict:
    if ds.n_segments == 0:
        raise DataError("cannot evaluate an empty dataset")
    nc = net.config
    if (ds.n_channels, ds.seg_len) != (nc.num_data_channels, nc.segment_length):
        raise DataError(
            f"data segments ({ds.n_channels}, {ds.seg_len}) do not match model "
            f"({nc.num_data_channels}, {nc.segment_length})"
        )
    if ds.n_classes > nc.num_classes:
        raise DataError(f"data has {ds.n_classes} classes, model {nc.num_classes}")
    x = ds.segments(None, nc.normalize)
    _, acc, pred = train.evaluate(net, x, ds.labels)
    C = nc.num_classes
    confusion = np.zeros((C, C), dtype=int)
    np.add.at(confusion, (ds.labels, pred), 1)
    return {
        "accuracy": acc,
        "n_segments": int(ds.n_segments),
        "confusion": confusion.tolist(),
        "class_counts": np.bincount(ds.labels, minlength=C).tolist(),
    }


def _load_model(path) -> model.Network:
    path = Path(path)
    if not path.exists():
        raise DataError(f"model file not found: {path}")
    return model.load(path)


def _maybe_split(ds: data.SegmentDataset, split_path) -> data.SegmentDataset:
    if not split_path:
        return ds
    split = json.loads(Path(split_path).read_text())
    src = np.asarray(split.get("source_index", np.arange(ds.n_segments)))
    return ds.subset(src[np.asarray(split["test"], dtype=int)])


def cmd_eval(args) -> int:
    net = _load_model(args.model)
    ds = _maybe_split(data.read_tseg(args.data), args.split)
    report = evaluate_model(net, ds)
    if args.out:
        _write_json(Path(args.out) / "eval.json", report)
    print(json.dumps(report))
    return EXIT_OK


def cmd_saliency(args) -> int:
    net = _load_model(args.model)
    ds = data.read_tseg(args.data)
    if ds.n_segments == 0:
        raise DataError("saliency needs a non-empty dataset")
    out = _out_dir(args)
    if not 0 <= args.index < ds.n_segments:
        raise DataError(f"segment index {args.index} out of range [0, {ds.n_segments})")
    seg = ds.segments([args.index], net.config.normalize)[0]
    if args.class_mode == "true":
        target = int(ds.labels[args.index])
    else:
        target = int(np.argmax(model.forward(net, seg)))
    maps = saliency.gradcam(net, seg, target, mode=args.grad_mode)
    saliency.write_saliency_csv(maps, out / "saliency.csv")
    cum = saliency.cumulative(net, ds, args.class_mode, args.grad_mode)
    saliency.write_cumulative_csv(cum, out / "cumulative.csv")
    paths = saliency.export_waveforms(net, out)
    print(json.dumps({
        "target_class": target,
        "files": [str(out / "saliency.csv"), str(out / "cumulative.csv")] + [str(p) for p in paths],
    }))
    return EXIT_OK


def cmd_count(args) -> int:
    cfg = RunConfig.load(args.config)
    report = model.count_costs(cfg.require_network()).to_dict()
    if args.out:
        _write_json(Path(args.out) / "costs.json", report)
    print(json.dumps(report, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = RunConfig.load(args.config).with_seed(args.seed)
    net = model.build(cfg.require_network(), cfg.seed)
    if args.data or "data" in cfg.paths:
        ds = data.read_tseg(_data_path(args, cfg))
    else:
        nc = net.config
        spec = cfg.synth or data.SynthSpec(
            n_per_class=args.segments // 2, seg_len=nc.segment_length,
            n_channels=nc.num_data_channels, burst_scale=nc.input_scales.lambda_max,
            seed=cfg.seed,
        )
        ds = data.synthesize(spec)
    report = train.benchmark(net, ds, cfg.train, repeats=args.repeats,
                             epoch_repeats=args.epoch_repeats)
    if args.out:
        _write_json(Path(args.out) / "bench.json", report)
    print(json.dumps(report, indent=2, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tisc", description="Time-scale network toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True, seed=True):
        if config:
            sp.add_argument("--config", metavar="PATH")
        sp.add_argument("--out", metavar="DIR")
        if seed:
            sp.add_argument("--seed", type=int)
        sp.add_argument("--threads", type=int, default=os.cpu_count() or 1)

    sp = sub.add_parser("synth", help="generate a synthetic burst dataset")
    common(sp)
    sp.add_argument("--mode", choices=("grid-aligned", "random"))
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", help="balance, split and cross-validate")
    common(sp)
    sp.add_argument("--data", metavar="PATH")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="accuracy and confusion counts of a model")
    common(sp, config=False, seed=False)
    sp.add_argument("--model", required=True, metavar="PATH")
    sp.add_argument("--data", required=True, metavar="PATH")
    sp.add_argument("--split", metavar="PATH", help="split.json; evaluate its test indices only")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("saliency", help="per-segment and cumulative relevance maps")
    common(sp, config=False, seed=False)
    sp.add_argument("--model", required=True, metavar="PATH")
    sp.add_argument("--data", required=True, metavar="PATH")
    sp.add_argument("--class-mode", choices=("predicted", "true"), default="predicted")
    sp.add_argument("--grad-mode", choices=saliency.MODES, default="grad_x_act")
    sp.add_argument("--index", type=int, default=0, help="segment for the per-example map")
    sp.set_defaults(func=cmd_saliency)

    sp = sub.add_parser("count", help="parameter and MAC counts of a network config")
    common(sp, seed=False)
    sp.set_defaults(func=cmd_count)

    sp = sub.add_parser("bench", help="inference latency and epoch time")
    common(sp)
    sp.add_argument("--data", metavar="PATH")
    sp.add_argument("--repeats", type=int, default=100)
    sp.add_argument("--epoch-repeats", type=int, default=5)
    sp.add_argument("--segments", type=int, default=2000)
    sp.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None) is None and args.command in ("train", "count", "bench"):
        parser.error(f"{args.command} requires --config")
    try:
        with threadpool_limits(limits=max(1, args.threads)):
            return args.func(args)
    except ConfigError as exc:
        print(f"tisc {args.command}: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"tisc {args.command}: training diverged: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError) as exc:
        print(f"tisc {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TiScError as exc:
        print(f"tisc {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: extract | pretrain | update | detect | eval-rounds | synth."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from . import nn
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, PipelineConfig
from .detector import compute_metrics
from .engine import Engine, normalize_flows
from .incremental import Mode
from .ingest import ParseError, assemble_flows, derive_raw_sequence, parse_packet_log
from .rounds import RoundSpec, comparison_table, default_round_spec, run_rounds
from .synth import generate, load_family_specs, write_dataset

log = logging.getLogger("flowguard")


class CLIError(Exception):
    pass


def _resolve_config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if getattr(args, "config", None) else PipelineConfig()
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "mode", None) is not None:
        changes["mode"] = args.mode
    return cfg.replace(**changes) if changes else cfg


def _read_flows(path: str, fmt: str):
    parsed = parse_packet_log(path, fmt)
    if parsed.skipped or parsed.ignored:
        print(f"{path}: {len(parsed.packets)} packets, {len(parsed.skipped)} malformed skipped, "
              f"{parsed.ignored} non-TCP/UDP ignored", file=sys.stderr)
    return assemble_flows(parsed.packets)


def cmd_extract(args) -> None:
    cfg = _resolve_config(args)
    flows = _read_flows(args.input, args.format)
    with open(args.output, "w") as out:
        for f in flows:
            raw = derive_raw_sequence(f, cfg.n_head)
            norm = normalize_flows([f], cfg)[0]
            rec = {
                "key": f.key.as_dict(),
                "label": f.label,
                "family": f.family,
                "raw": {"l": list(raw.lengths), "d": raw.duration, "t_m": raw.mean_interval},
                "normalized": {"buckets": list(norm.buckets), "mask": list(norm.mask),
                               "d_norm": norm.d_norm, "t_m_norm": norm.t_m_norm},
            }
            out.write(json.dumps(rec, separators=(",", ":")) + "\n")
    print(f"wrote {len(flows)} flow record(s) to {args.output}")


def cmd_pretrain(args) -> None:
    cfg = _resolve_config(args)
    flows = _read_flows(args.flows, args.format)
    engine = Engine.create(cfg)
    rep = engine.pretrain(flows)
    _, _, pred = engine.detect(flows)
    m = compute_metrics(pred, [f.label for f in flows])
    save_checkpoint(engine, args.output)
    print(f"pretrained on {rep.n_flows} flows: reconstruction loss {rep.ae_curve[0]:.4f} -> {rep.ae_curve[-1]:.4f}"
          if rep.ae_curve else f"pretrained on {rep.n_flows} flows")
    print(f"train ACC {m.accuracy:.4f} F1 {m.f1:.4f}; buffer {rep.buffer_size}/{cfg.buffer_capacity}")
    print(f"checkpoint written to {args.output}")


def cmd_update(args) -> None:
    engine = load_checkpoint(args.checkpoint)
    if args.config:
        cfg = PipelineConfig.load(args.config)
        bad = cfg.structural_mismatch(engine.config)
        if bad:
            raise CheckpointError("config does not match checkpoint: " + "; ".join(bad))
        engine.config = cfg
    if args.mode is not None:
        engine.config = engine.config.replace(mode=args.mode)
    flows = [f for path in args.flows for f in _read_flows(path, args.format)]
    if not flows:
        raise CLIError("no flows in update data")
    round_log = engine.update(flows)
    save_checkpoint(engine, args.output)
    if args.loss_log:
        Path(args.loss_log).write_text(round_log.to_csv())
    last = round_log.steps[-1]
    print(f"{engine.config.mode} update on {len(flows)} flows, {len(round_log.steps)} steps; "
          f"final total loss {last.total:.4f}; buffer {len(engine.buffer)} (seen {engine.buffer.seen})")
    print(f"checkpoint written to {args.output}")


def cmd_detect(args) -> None:
    engine = load_checkpoint(args.checkpoint)
    flows = _read_flows(args.flows, args.format)
    _, probs, labels = engine.detect(flows)
    with open(args.output, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["src", "dst", "sport", "dport", "proto", "n_packets", "predicted", "p_malicious"])
        for f, lab, p in zip(flows, labels, probs):
            k = f.key
            w.writerow([k.src_ip, k.dst_ip, k.src_port, k.dst_port, k.protocol.value, len(f.packets), int(lab), repr(float(p[1]))])
    n_mal = int(labels.sum())
    print(f"{len(flows)} flows: {n_mal} malicious, {len(flows) - n_mal} benign")
    if flows and all(f.label is not None for f in flows):
        m = compute_metrics(labels, [f.label for f in flows])
        print(f"against embedded labels: ACC {m.accuracy:.4f} F1 {m.f1:.4f}")


def cmd_eval_rounds(args) -> None:
    cfg = _resolve_config(args)
    spec = default_round_spec() if args.spec == "default" else RoundSpec.load(args.spec)
    modes = [Mode(m) for m in args.modes.split(",")] if args.modes else [Mode(cfg.mode)]
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg.seed]
    results = [run_rounds(spec, cfg, modes, seed) for seed in seeds]
    families = [f.name for f in spec.families]
    with open(args.output, "w") as fh:
        for i, res in enumerate(results):
            text = res.to_csv(families)
            fh.write(text if i == 0 else text.split("\n", 1)[1])
    if args.loss_log_dir:
        d = Path(args.loss_log_dir)
        d.mkdir(parents=True, exist_ok=True)
        for res in results:
            for mode, logs in res.logs.items():
                for rnd, lg in enumerate(logs, start=1):
                    (d / f"seed{res.seed}_{mode}_round{rnd}.csv").write_text(lg.to_csv())
    print(comparison_table(results), end="")
    print(f"report written to {args.output}")


def cmd_synth(args) -> None:
    cfg = _resolve_config(args)
    families = load_family_specs(args.spec)
    flows = generate(families, nn.make_rng(cfg.seed))
    write_dataset(flows, args.output)
    print(f"wrote {len(flows)} flows ({sum(len(f.packets) for f in flows)} packets) to {args.output}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="flat key = value config file")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--mode", choices=[m.value for m in Mode], default=argparse.SUPPRESS)
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    p = argparse.ArgumentParser(prog="flowguard", parents=[common],
                                description="Encrypted-traffic flow detection with incremental updates.")
    sub = p.add_subparsers(dest="command", required=True)

    def fmt(sp):
        sp.add_argument("--format", choices=["jsonl", "pcap"], default="jsonl")

    sp = sub.add_parser("extract", parents=[common], help="packet log -> per-flow sequence records (JSONL)")
    sp.add_argument("input")
    sp.add_argument("-o", "--output", required=True)
    fmt(sp)
    sp.set_defaults(func=cmd_extract)

    sp = sub.add_parser("pretrain", parents=[common], help="train extractor + detector on labelled round-0 flows")
    sp.add_argument("flows")
    sp.add_argument("-o", "--output", required=True, help="checkpoint path")
    fmt(sp)
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("update", parents=[common], help="incremental round on new labelled flows")
    sp.add_argument("checkpoint")
    sp.add_argument("flows", nargs="+", help="one or more packet logs (full mode: all data seen so far)")
    sp.add_argument("-o", "--output", required=True, help="updated checkpoint path")
    sp.add_argument("--loss-log", help="write per-step loss rows as CSV")
    fmt(sp)
    sp.set_defaults(func=cmd_update)

    sp = sub.add_parser("detect", parents=[common], help="classify flows with a checkpoint")
    sp.add_argument("checkpoint")
    sp.add_argument("flows")
    sp.add_argument("-o", "--output", required=True, help="CSV report")
    fmt(sp)
    sp.set_defaults(func=cmd_detect)

    sp = sub.add_parser("eval-rounds", parents=[common], help="cumulative round protocol over a round spec")
    sp.add_argument("spec", help="round spec JSON, or 'default' for the built-in three-family spec")
    sp.add_argument("-o", "--output", required=True, help="CSV metrics report")
    sp.add_argument("--modes", help="comma list of etguard,etguard-v,full (default: --mode)")
    sp.add_argument("--seeds", help="comma list of seeds (default: --seed)")
    sp.add_argument("--loss-log-dir", help="directory for per-round loss logs")
    sp.set_defaults(func=cmd_eval_rounds)

    sp = sub.add_parser("synth", parents=[common], help="generate a labelled synthetic JSONL packet log")
    sp.add_argument("spec", help="family spec JSON")
    sp.add_argument("-o", "--output", required=True)
    sp.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for name in ("config", "seed", "mode", "verbose"):
        if not hasattr(args, name):
            setattr(args, name, None)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (CLIError, ConfigError, CheckpointError, ParseError, ValueError, OSError, FloatingPointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

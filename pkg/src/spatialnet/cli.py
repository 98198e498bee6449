"""Command-line entry point: ``spatialnet {synth,train,enhance,eval,baseline,flops,attn}``.

Every command writes its fully resolved settings to ``run_config.json`` next
to its outputs. Exit codes: 0 success, 2 usage/config error, 3 data error,
4 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import baselines, evaluation, objective, scene
from .model import ConfigError, ModelConfig, SpatialNet, count_flops, count_params
from .params import CheckpointError, load_checkpoint, save_checkpoint
from .stft import Waveform, default_window, istft, read_wav, stft, write_wav

log = logging.getLogger("spatialnet")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

PRESETS = {
    "small": dict(num_blocks=8, hidden=96, ffn_hidden=192, squeeze=8),
    "large": dict(num_blocks=12, hidden=192, ffn_hidden=384, squeeze=16),
    "tiny": dict(num_blocks=2, hidden=24, ffn_hidden=48, squeeze=4),
}


class UsageError(ValueError):
    pass


# --- configuration ------------------------------------------------------------

def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def resolve_config(path: str | None, overrides: list[str] | None) -> dict:
    """Load a JSON config tree and apply ``section.key=value`` overrides."""
    cfg: dict = {}
    if path:
        try:
            cfg = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise UsageError(f"{path}: invalid JSON ({e})") from None
        if not isinstance(cfg, dict):
            raise UsageError(f"{path}: top level must be an object")
    for item in overrides or []:
        if "=" not in item:
            raise UsageError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        node = cfg
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise UsageError(f"override {key!r} descends into a non-object")
        node[parts[-1]] = _parse_value(value)
    return cfg


def model_config_from(cfg: dict, num_freqs: int, num_mics: int, num_speakers: int) -> ModelConfig:
    preset = cfg.get("preset", "small")
    if preset not in PRESETS:
        raise UsageError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    d = dict(PRESETS[preset], num_freqs=num_freqs, num_mics=num_mics, num_speakers=num_speakers)
    d.update(cfg.get("model", {}))
    return ModelConfig.from_dict(d)


def _checked(fn, *a):
    """Run a config constructor, turning validation failures into usage errors."""
    try:
        return fn(*a)
    except (TypeError, ValueError) as e:
        raise UsageError(f"invalid configuration: {e}") from None


def write_run_config(out_dir: Path, command: str, resolved: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    resolved = {k: v for k, v in resolved.items() if not callable(v)}
    (out_dir / "run_config.json").write_text(json.dumps({"command": command, **resolved}, indent=2, default=str))


def load_model(checkpoint) -> SpatialNet:
    tensors, meta = load_checkpoint(checkpoint)
    if "model_config" not in meta:
        raise CheckpointError(f"{checkpoint}: no model_config in checkpoint metadata")
    model = SpatialNet(ModelConfig.from_dict(meta["model_config"]), seed=int(meta["seed"]))
    model.load_state_dict({k: v for k, v in tensors.items() if not k.startswith("adam.")})
    return model


# --- commands -----------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = resolve_config(args.config, args.set)
    dist = _checked(scene.SceneDistribution.from_dict, cfg.get("scene", {}))
    seed = int(cfg.get("seed", args.seed))
    count = int(cfg.get("count", args.count))
    if count < 0:
        raise UsageError("count must be >= 0")
    out = Path(args.out)
    pool = sorted(Path(args.pool).glob("*.wav")) if args.pool else None
    records = scene.make_corpus(out, dist, count, seed, pool=pool)
    write_run_config(out, "synth", {"seed": seed, "count": count, "scene": dist.__dict__,
                                    "pool": [str(p) for p in pool] if pool else None})
    print(f"wrote {len(records)} scenes to {out / 'manifest.jsonl'}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve_config(args.config, args.set)
    tcfg = _checked(objective.TrainConfig.from_dict, {"seed": args.seed, **cfg.get("train", {})})
    records = scene.read_manifest(args.corpus)
    if not records:
        raise scene.SceneError(f"{args.corpus}: empty manifest")
    first = read_wav(records[0]["mixture"])
    window = default_window(first.sample_rate)
    ntgt = read_wav(records[0]["targets"]).channels
    mcfg = _checked(model_config_from, cfg, window // 2 + 1, first.channels, ntgt)
    examples = objective.load_examples(records, tcfg.duration, window)
    model = SpatialNet(mcfg, seed=tcfg.seed)
    out = Path(args.out)
    write_run_config(out, "train", {"preset": cfg.get("preset", "small"), "model": mcfg.to_dict(),
                                    "train": tcfg.to_dict(), "corpus": str(args.corpus),
                                    "resume": args.resume})
    (out / "model_config.json").write_text(json.dumps(mcfg.to_dict(), indent=2))
    result = objective.train(model, examples, tcfg, out, resume=args.resume)
    if result.curve:
        print(f"trained {len(result.curve)} steps; final loss {result.curve[-1]['loss']:.3f}")
    if args.average and len(result.checkpoints) >= args.average:
        avg, meta = objective.average_checkpoints(result.checkpoints, args.average)
        save_checkpoint(out / "averaged.ckpt", avg, meta)
        print(f"averaged last {args.average} checkpoints -> {out / 'averaged.ckpt'}")
    return EXIT_OK


def cmd_enhance(args) -> int:
    model = load_model(args.checkpoint)
    mix = read_wav(args.input)
    est = evaluation.enhance(model, mix, stitch=args.stitch, chunk_s=args.chunk, hop_s=args.hop,
                             ref_channel=args.ref_channel)
    out = Path(args.out)
    write_run_config(out, "enhance", vars(args))
    for p in range(est.channels):
        write_wav(out / f"est_{p}.wav", Waveform(est.samples[p:p + 1], est.sample_rate))
    print(f"wrote {est.channels} streams to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = load_model(args.checkpoint)
    records = scene.read_manifest(args.corpus)
    ests, refs, unproc, ids = [], [], [], []
    for rec in records[:args.limit or None]:
        mix, tgt = read_wav(rec["mixture"]), read_wav(rec["targets"])
        est = evaluation.enhance(model, mix, stitch=args.stitch, ref_channel=args.ref_channel)
        n = min(est.length, tgt.length)
        ests.append(est.samples[:, :n])
        refs.append(tgt.samples[:, :n])
        unproc.append(mix.samples[args.ref_channel, :n])
        ids.append(str(rec.get("id", len(ids))))
    rows = evaluation.report(ests, refs, unproc, ids)
    out = Path(args.out)
    write_run_config(out.parent, "eval", vars(args))
    evaluation.write_report(rows, out)
    if rows:
        m = rows[-1]
        print(f"{len(rows) - 1} utterances: SI-SDR {m['si_sdr']:.2f} dB "
              f"(+{m['si_sdr_imp']:.2f}), SDR {m['sdr']:.2f} dB -> {out}")
    return EXIT_OK


def cmd_baseline(args) -> int:
    out = Path(args.out)
    write_run_config(out, f"baseline-{args.method}", vars(args))
    if args.method == "wpe":
        mix = read_wav(args.input)
        spec = stft(mix, default_window(mix.sample_rate))
        res = istft(baselines.wpe(spec, args.taps, args.delay, args.iters))
        write_wav(out / "wpe.wav", res)
        print(f"wrote {out / 'wpe.wav'}")
        return EXIT_OK
    # oracle MVDR on a synthesized corpus scene
    records = scene.read_manifest(args.corpus)
    if not 0 <= args.index < len(records):
        raise UsageError(f"index {args.index} outside corpus of {len(records)}")
    rec = records[args.index]
    rendered = scene.rerender_record(rec)
    spec_obj = scene.SceneSpec.from_json(rec)
    mix = rendered["mixture"]
    window = default_window(mix.sample_rate)
    rir = scene.simulate_rir(spec_obj)
    steering = baselines.oracle_rtf(scene.extract_direct_path(rir), window, spec_obj.ref_channel)
    mix_spec = stft(mix, window)
    for p, d in enumerate(steering):
        target = stft(Waveform(rendered["targets"].samples[p:p + 1], mix.sample_rate), window)
        cov = baselines.undesired_covariance(mix_spec, target, d)
        res = istft(baselines.mvdr(mix_spec, d, cov))
        write_wav(out / f"mvdr_{p}.wav", res)
    print(f"wrote {len(steering)} MVDR outputs to {out}")
    return EXIT_OK


def cmd_flops(args) -> int:
    cfg = resolve_config(args.config, args.set)
    if args.preset:
        cfg["preset"] = args.preset
    mcfg = _checked(model_config_from, cfg, args.freqs, args.mics, args.speakers)
    params = count_params(mcfg)
    flops = count_flops(mcfg, args.duration)
    if args.json:
        print(json.dumps({"params": params, "flops_gps": flops}, indent=2))
    else:
        print(f"{'component':<12}{'params':>12}{'G/s':>10}")
        for k in params:
            print(f"{k:<12}{params[k]:>12,}{flops[k]:>10.3f}")
    if args.describe:
        for name, shape, count in SpatialNet(mcfg).describe():
            print(f"{name:<40}{str(tuple(shape)):>20}{count:>10,}")
    return EXIT_OK


def cmd_attn(args) -> int:
    model = load_model(args.checkpoint)
    mix = read_wav(args.input)
    if mix.channels != model.config.num_mics:
        raise ValueError(f"input has {mix.channels} channels, model expects {model.config.num_mics}")
    maps = evaluation.attention_maps(model, mix, args.layer, args.head, args.ref_channel)
    out = Path(args.out)
    write_run_config(out, "attn", vars(args))
    files = evaluation.export_attention(maps, out, f"layer{args.layer}_head{args.head}")
    print("\n".join(map(str, files)))
    return EXIT_OK


# --- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="spatialnet", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config entry, e.g. model.hidden=48 or train.lr=0.002")
        return p

    p = with_config(sub.add_parser("synth", help="synthesize a multichannel corpus"))
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pool", help="directory of clean WAVs (default: generated speech-like sources)")
    p.set_defaults(func=cmd_synth)

    p = with_config(sub.add_parser("train", help="train a model on a corpus manifest"))
    p.add_argument("--corpus", required=True, help="manifest.jsonl")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--average", type=int, default=0, help="average the last K epoch checkpoints")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("enhance", help="separate/enhance a multichannel WAV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--stitch", action="store_true", help="chunked inference with stitching")
    p.add_argument("--chunk", type=float, default=4.0)
    p.add_argument("--hop", type=float, default=2.0)
    p.add_argument("--ref-channel", type=int, default=0)
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("eval", help="score a checkpoint on a corpus")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True, help="report .tsv")
    p.add_argument("--stitch", action="store_true")
    p.add_argument("--limit", type=int, default=0)
    p.add_argument("--ref-channel", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("baseline", help="classical baselines")
    p.add_argument("method", choices=["mvdr", "wpe"])
    p.add_argument("--out", required=True)
    p.add_argument("--input", help="multichannel WAV (wpe)")
    p.add_argument("--corpus", help="manifest.jsonl (mvdr, oracle statistics)")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--taps", type=int, default=5)
    p.add_argument("--delay", type=int, default=3)
    p.add_argument("--iters", type=int, default=3)
    p.set_defaults(func=cmd_baseline)

    p = with_config(sub.add_parser("flops", help="parameter and FLOPs accounting"))
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--freqs", type=int, default=129)
    p.add_argument("--mics", type=int, default=6)
    p.add_argument("--speakers", type=int, default=2)
    p.add_argument("--duration", type=float, default=4.0)
    p.add_argument("--json", action="store_true")
    p.add_argument("--describe", action="store_true", help="list every parameter tensor")
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("attn", help="export narrow-band attention maps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--layer", type=int, default=0)
    p.add_argument("--head", type=int, default=0)
    p.add_argument("--ref-channel", type=int, default=0)
    p.set_defaults(func=cmd_attn)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "baseline":
        need = "input" if args.method == "wpe" else "corpus"
        if getattr(args, need) is None:
            ap.error(f"baseline {args.method} requires --{need}")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except objective.NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError, KeyError, IndexError, CheckpointError, np.linalg.LinAlgError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

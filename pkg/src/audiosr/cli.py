"""Command-line entry point wiring the library together.

Subcommands: prepare, train, train-gan, eval, upsample, compare-losses, probe.
Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import configparser
import hashlib
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__, data, dsp, metrics, models, probe, train
from .diffgraph import Tensor, no_grad
from .dsp import Signal


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# config files: flat "key = value" with sections, unknown keys rejected
# ---------------------------------------------------------------------------

_RUN_KEYS = {"kind", "model"}
_DATA_KEYS = {
    "manifest", "split", "synth_count", "synth_length", "synth_rate", "synth_seed",
    "synth_freq_lo", "synth_freq_hi", "synth_kinds",
}
_SECTION_CLASSES = {
    "model": None,  # resolved by run.model
    "train": train.TrainConfig,
    "gan": train.GanConfig,
    "critic": models.CriticConfig,
}
_MODEL_CLASSES = {"edsr": models.EdsrConfig, "unet": models.UnetConfig}


def _coerce(type_str: str, raw: str):
    raw = raw.strip()
    if type_str.startswith("tuple[int"):
        return tuple(int(v) for v in raw.split(",") if v.strip())
    if type_str.startswith("tuple"):
        return tuple(v.strip() for v in raw.split(",") if v.strip())
    if type_str == "int":
        return int(raw)
    if type_str == "float":
        return float(raw)
    if type_str.startswith("str | None"):
        return None if raw in ("", "none") else raw
    return raw


def _section_to_kwargs(cls, section: dict, where: str) -> dict:
    valid = {f.name: f.type for f in fields(cls)}
    kwargs = {}
    for key, raw in section.items():
        if key not in valid:
            raise UsageError(f"unknown key {key!r} in [{where}]")
        try:
            kwargs[key] = _coerce(valid[key], raw)
        except (TypeError, ValueError) as exc:
            raise UsageError(f"bad value for {key!r} in [{where}]: {exc}") from exc
    return kwargs


def _read_config(path) -> dict[str, dict[str, str]]:
    parser = configparser.ConfigParser(interpolation=None)
    read = parser.read(path)
    if not read:
        raise UsageError(f"cannot read config file {path}")
    return {name: dict(parser[name]) for name in parser.sections()}


def _load_run_config(path, want_gan: bool):
    cfg = _read_config(path)
    allowed = {"run", "model", "train", "data"} | ({"gan", "critic"} if want_gan else set())
    for name in cfg:
        if name not in allowed:
            raise UsageError(f"unknown section [{name}] in {path}")
    run = cfg.get("run", {})
    for key in run:
        if key not in _RUN_KEYS:
            raise UsageError(f"unknown key {key!r} in [run]")
    model_kind = run.get("model", "unet" if want_gan else "edsr")
    if model_kind not in _MODEL_CLASSES:
        raise UsageError(f"run.model must be edsr or unet, got {model_kind!r}")
    model_cls = _MODEL_CLASSES[model_kind]
    try:
        model_cfg = model_cls(**_section_to_kwargs(model_cls, cfg.get("model", {}), "model"))
    except ValueError as exc:
        raise UsageError(f"bad [model] config: {exc}") from exc

    train_kwargs = _section_to_kwargs(train.TrainConfig, cfg.get("train", {}), "train")
    train_kwargs.setdefault("mode", "post" if model_kind == "edsr" else "pre")
    train_kwargs.setdefault("steps", 100)
    try:
        train_cfg = train.TrainConfig(**train_kwargs)
    except ValueError as exc:
        raise UsageError(f"bad [train] config: {exc}") from exc

    gan_cfg = critic_cfg = None
    if want_gan:
        try:
            critic_cfg = models.CriticConfig(
                **_section_to_kwargs(models.CriticConfig, cfg.get("critic", {}), "critic")
            )
            gan_kwargs = _section_to_kwargs(train.GanConfig, cfg.get("gan", {}), "gan")
            gan_kwargs.pop("base", None)
            gan_cfg = train.GanConfig(base=train_cfg, **gan_kwargs)
        except ValueError as exc:
            raise UsageError(f"bad GAN config: {exc}") from exc

    for key in cfg.get("data", {}):
        if key not in _DATA_KEYS:
            raise UsageError(f"unknown key {key!r} in [data]")
    return model_kind, model_cfg, train_cfg, gan_cfg, critic_cfg, cfg.get("data", {})


def _corpus_from_data_section(section: dict, default_count: int = 64):
    if "manifest" in section:
        index = data.CorpusIndex.read_manifest(section["manifest"])
        split = section.get("split", "train")
        entries = index.items(split)
        if not entries:
            raise data.CorpusError(f"manifest has no entries in split {split!r}")
        corpus = [data.wav_read(e.path) for e in entries]
        ids = [f"{e.speaker}/{e.utterance}" for e in entries]
        text = Path(section["manifest"]).read_text(encoding="utf-8") + f"|split={split}"
        return corpus, ids, _sha256(text.encode())
    spec = data.SynthSpec(
        count=int(section.get("synth_count", default_count)),
        length=int(section.get("synth_length", 8192)),
        sample_rate=int(section.get("synth_rate", 12000)),
        freq_range=(
            float(section.get("synth_freq_lo", 100.0)),
            float(section.get("synth_freq_hi", 2800.0)),
        ),
        kinds=tuple((section.get("synth_kinds", "sine,chirp")).split(",")),
    )
    seed = int(section.get("synth_seed", 1))
    corpus = data.synth_signals(spec, seed)
    ids = [str(i) for i in range(len(corpus))]
    return corpus, ids, _sha256(f"{spec}|seed={seed}".encode())


def _sha256(blob: bytes) -> str:
    return "sha256:" + hashlib.sha256(blob).hexdigest()


def _write_run_meta(out_dir: Path, command: str, items: dict) -> None:
    lines = [f"command = {command}", f"version = {__version__}"]
    for key in sorted(items):
        lines.append(f"{key} = {items[key]}")
    (out_dir / "run.meta").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _out_dir(path_str: str) -> Path:
    out = Path(path_str)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _cmd_prepare(args) -> int:
    out = _out_dir(args.out)
    target = args.target_rate
    src_index = data.scan_corpus(args.root, seed=args.seed)
    audio_dir = out / "audio"
    for entry in src_index.entries:
        sig = data.wav_read(entry.path, downmix=args.downmix)
        if sig.sample_rate != target:
            if sig.sample_rate % target != 0 or sig.sample_rate < target:
                raise data.CorpusError(
                    f"{entry.path}: rate {sig.sample_rate} cannot be decimated to {target}"
                )
            sig = dsp.downsample(sig, sig.sample_rate // target)
        dest = audio_dir / entry.speaker
        dest.mkdir(parents=True, exist_ok=True)
        clipped = Signal(np.clip(sig.samples, -1.0, 1.0), sig.sample_rate)
        data.wav_write(clipped, dest / f"{entry.utterance}.wav")
    ratios = tuple(float(v) for v in args.ratios.split(","))
    index = data.scan_corpus(audio_dir, split_ratios=ratios, seed=args.seed)
    index.write_manifest(out / "manifest.txt")
    manifest_text = (out / "manifest.txt").read_text(encoding="utf-8")
    _write_run_meta(out, "prepare", {
        "seed": args.seed,
        "target_rate": target,
        "ratios": args.ratios,
        "root": args.root,
        "corpus_hash": _sha256(manifest_text.encode()),
    })
    print(f"prepared {len(index.entries)} files from {len(set(index.split))} speakers -> {out}")
    return 0


def _build_model(kind: str, model_cfg, seed: int):
    if kind == "edsr":
        return models.build_edsr(model_cfg, seed=seed)
    return models.build_unet(model_cfg, seed=seed)


def _cmd_train(args) -> int:
    kind, model_cfg, train_cfg, _, _, data_section = _load_run_config(args.config, want_gan=False)
    out = _out_dir(args.out)
    corpus, _, corpus_hash = _corpus_from_data_section(data_section)
    model = _build_model(kind, model_cfg, train_cfg.seed)
    ckpt, log = train.train_supervised(
        model, corpus, train_cfg, out_dir=str(out), progress_every=args.progress_every
    )
    log.to_csv(out / "trainlog.csv")
    _write_run_meta(out, "train", {
        "model": kind,
        "config": _flatten_cfg(model_cfg, train_cfg),
        "seed": train_cfg.seed,
        "corpus_hash": corpus_hash,
    })
    print(f"trained {kind} for {train_cfg.steps} steps; final loss {log.records[-1].loss:.6f}")
    return 0


def _cmd_train_gan(args) -> int:
    kind, model_cfg, train_cfg, gan_cfg, critic_cfg, data_section = _load_run_config(
        args.config, want_gan=True
    )
    if kind != "unet":
        raise UsageError("train-gan needs run.model = unet (pre-upsampling generator)")
    out = _out_dir(args.out)
    corpus, _, corpus_hash = _corpus_from_data_section(data_section)
    generator = models.build_unet(model_cfg, seed=train_cfg.seed)
    critic = models.build_critic(critic_cfg, seed=train_cfg.seed + 1)
    _, _, log = train.train_wgan_gp(
        generator, critic, corpus, gan_cfg, out_dir=str(out), progress_every=args.progress_every
    )
    log.to_csv(out / "trainlog.csv")
    _write_run_meta(out, "train-gan", {
        "config": _flatten_cfg(model_cfg, train_cfg, critic_cfg, gan_cfg),
        "seed": train_cfg.seed,
        "corpus_hash": corpus_hash,
    })
    print(f"adversarial run finished after {train_cfg.steps} outer steps")
    return 0


def _flatten_cfg(*cfgs) -> str:
    parts = []
    for cfg in cfgs:
        if cfg is None:
            continue
        name = type(cfg).__name__
        for f in fields(cfg):
            val = getattr(cfg, f.name)
            if f.name == "base":
                continue
            parts.append(f"{name}.{f.name}={val}")
    return ";".join(parts)


def _cmd_eval(args) -> int:
    out = _out_dir(args.out)
    section = {}
    if args.manifest:
        section["manifest"] = args.manifest
        section["split"] = args.split
    else:
        section["synth_count"] = str(args.synth)
        section["synth_seed"] = str(args.synth_seed)
    corpus, ids, corpus_hash = _corpus_from_data_section(section)
    if args.spline:
        model = None
        mode = "pre"
        ckpt_id = "spline-baseline"
    else:
        if not args.checkpoint:
            raise UsageError("eval needs --checkpoint or --spline")
        model = models.load_checkpoint(args.checkpoint)
        mode = args.mode or ("post" if model.kind == "edsr" else "pre")
        ckpt_id = Path(args.checkpoint).name
    report = metrics.evaluate_model(
        model, corpus, args.scale, mode, item_ids=ids, checkpoint_id=ckpt_id
    )
    report.to_csv(out / "metrics.csv")
    _write_run_meta(out, "eval", {
        "scale": args.scale,
        "mode": report.mode,
        "checkpoint": ckpt_id,
        "seed": args.synth_seed,
        "corpus_hash": corpus_hash,
    })
    print(
        f"SNR {report.snr_mean:.2f} +/- {report.snr_std:.2f} dB | "
        f"LSD {report.lsd_mean:.3f} +/- {report.lsd_std:.3f} dB "
        f"({len(report.per_item)} items)"
    )
    return 0


def _cmd_upsample(args) -> int:
    sig = data.wav_read(args.input, downmix=args.downmix)
    if args.method == "spline":
        result = dsp.spline_upsample(sig, args.scale)
    else:
        if not args.checkpoint:
            raise UsageError("--method model needs --checkpoint")
        model = models.load_checkpoint(args.checkpoint)
        if model.kind == "edsr":
            if model.scale != args.scale:
                raise UsageError(
                    f"checkpoint upsamples by {model.scale}, but --scale {args.scale} was given"
                )
            feed = sig.samples
        else:
            base = dsp.spline_upsample(sig, args.scale)
            usable = (len(base) // model.length_divisor) * model.length_divisor
            feed = base.samples[:usable]
        with no_grad():
            out_t = model.forward(Tensor(feed[None, None, :]), training=False)
        result = Signal(out_t.data[0, 0], sig.sample_rate * args.scale)
    clipped = np.clip(result.samples, -1.0, 1.0)
    n_clipped = int(np.sum(clipped != result.samples))
    if n_clipped:
        print(f"note: clipped {n_clipped} out-of-range samples before writing", file=sys.stderr)
    data.wav_write(Signal(clipped, result.sample_rate), args.output)
    out = _out_dir(args.out) if args.out else Path(args.output).resolve().parent
    _write_run_meta(out, "upsample", {
        "scale": args.scale,
        "method": args.method,
        "checkpoint": args.checkpoint or "none",
        "seed": 0,
        "corpus_hash": _sha256(Path(args.input).read_bytes()),
    })
    print(f"wrote {args.output}: {len(result)} samples @ {result.sample_rate} Hz")
    return 0


def _cmd_compare_losses(args) -> int:
    out = _out_dir(args.out)
    train_spec = data.SynthSpec(count=args.synth, length=args.patch * 2, sample_rate=12000)
    eval_spec = data.SynthSpec(count=max(args.synth // 4, 8), length=8192, sample_rate=12000)
    train_corpus = data.synth_signals(train_spec, args.seed + 1)
    eval_corpus = data.synth_signals(eval_spec, args.seed + 2)
    if args.model == "edsr":
        stages = args.scale.bit_length() - 1
        model_cfg = models.EdsrConfig(
            filters=16, n_blocks=2, upsample_stages=stages
        )
        mode = "post"
    else:
        model_cfg = models.UnetConfig(
            depth=2, down_filters=(16, 32), down_kernels=(17, 9),
            bottleneck_filters=32, scale=args.scale,
        )
        mode = "pre"
    rows = []
    for loss in ("l1", "l2"):
        cfg = train.TrainConfig(
            steps=args.steps, mode=mode, scale=args.scale, batch_size=args.batch,
            loss=loss, seed=args.seed, patch_length=args.patch, lr=args.lr,
        )
        model = _build_model(args.model, model_cfg, cfg.seed)
        _, log = train.train_supervised(model, train_corpus, cfg)
        report = metrics.evaluate_model(model, eval_corpus, args.scale, mode)
        rows.append((loss, report))
        print(
            f"{loss}: final train loss {log.records[-1].loss:.6f} | "
            f"SNR {report.snr_mean:.2f}+/-{report.snr_std:.2f} | "
            f"LSD {report.lsd_mean:.3f}+/-{report.lsd_std:.3f}"
        )
    lines = [
        f"# model = {args.model}",
        f"# scale = {args.scale}",
        f"# steps = {args.steps}",
        f"# seed = {args.seed}",
        "loss,snr_mean,snr_std,lsd_mean,lsd_std",
    ]
    for loss, rep in rows:
        lines.append(f"{loss},{rep.snr_mean!r},{rep.snr_std!r},{rep.lsd_mean!r},{rep.lsd_std!r}")
    (out / "compare.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    _write_run_meta(out, "compare-losses", {
        "model": args.model,
        "scale": args.scale,
        "steps": args.steps,
        "seed": args.seed,
        "corpus_hash": _sha256(f"{train_spec}|{args.seed}".encode()),
    })
    return 0


def _cmd_probe(args) -> int:
    out = _out_dir(args.out)
    model = models.load_checkpoint(args.checkpoint)
    report = probe.zero_input_probe(
        model,
        length=args.length,
        sample_rate=args.rate,
        peak_threshold_db=args.threshold,
    )
    probe.write_report(report, out / "report.txt")
    probe.export_spectrogram(report.spectrogram, out / "spec.csv", fmt="csv")
    probe.export_spectrogram(report.spectrogram, out / "spec.pgm", fmt="pgm")
    _write_run_meta(out, "probe", {
        "checkpoint": Path(args.checkpoint).name,
        "length": args.length,
        "seed": 0,
        "corpus_hash": _sha256(Path(args.checkpoint).read_bytes()),
    })
    period = report.periodicity if report.periodicity is not None else "none"
    print(f"{len(report.peaks)} tonal peaks; periodicity: {period}")
    return 0


# ---------------------------------------------------------------------------

def _build_parser() -> _Parser:
    parser = _Parser(prog="audiosr", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="scan and decimate a corpus, write a manifest")
    p.add_argument("--root", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--target-rate", type=int, default=12000)
    p.add_argument("--ratios", default="0.8,0.1,0.1")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--downmix", action="store_true")
    p.set_defaults(func=_cmd_prepare)

    p = sub.add_parser("train", help="supervised training from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--progress-every", type=int, default=100)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("train-gan", help="adversarial training from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--progress-every", type=int, default=10)
    p.set_defaults(func=_cmd_train_gan)

    p = sub.add_parser("eval", help="SNR/LSD report for a checkpoint or the spline baseline")
    p.add_argument("--checkpoint")
    p.add_argument("--spline", action="store_true")
    p.add_argument("--scale", type=int, required=True)
    p.add_argument("--mode", choices=("pre", "post"))
    p.add_argument("--manifest")
    p.add_argument("--split", default="test")
    p.add_argument("--synth", type=int, default=16)
    p.add_argument("--synth-seed", type=int, default=99)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("upsample", help="upsample a WAV with the spline or a checkpoint")
    p.add_argument("--scale", type=int, required=True)
    p.add_argument("--method", choices=("spline", "model"), default="spline")
    p.add_argument("--checkpoint")
    p.add_argument("--downmix", action="store_true")
    p.add_argument("--out", help="directory for run metadata (default: output's directory)")
    p.add_argument("input")
    p.add_argument("output")
    p.set_defaults(func=_cmd_upsample)

    p = sub.add_parser("compare-losses", help="train the same model under l1 and l2, report both")
    p.add_argument("--model", choices=("edsr", "unet"), default="edsr")
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--scale", type=int, default=2)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--patch", type=int, default=1024)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--synth", type=int, default=64)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_compare_losses)

    p = sub.add_parser("probe", help="zero-input tonal-artifact probe")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--length", type=int, default=16384)
    p.add_argument("--rate", type=int, default=12000)
    p.add_argument("--threshold", type=float, default=20.0)
    p.set_defaults(func=_cmd_probe)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except train.NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except (
        data.WavError,
        data.CorpusError,
        models.CheckpointError,
        FileNotFoundError,
        IsADirectoryError,
        ValueError,
    ) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point.

Exit codes: 0 success, 1 usage, 2 data/validation error, 3 runtime failure.
"""

import argparse
import json
import os
import sys

import numpy as np

from . import checks, corpus, evaluation, textmap, training
from .dsp import (
    CORPUS_SAMPLE_RATE,
    MelConfig,
    StftConfig,
    load_wav,
    mel_spectrogram,
    read_mel_file,
    save_wav,
    write_mel_file,
)
from .errors import (
    ConfigInvalid,
    DataError,
    KwglowError,
    RuntimeFailure,
    ShapeMismatch,
    SplitLeak,
    UnsupportedFormat,
    UsageError,
)
from .flow import FlowConfig, FlowModel


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _load_config_file(path):
    """One textmap file may carry train.*, flow.*, stft.* and mel.* keys."""
    mapping = textmap.load_file(path)
    known = set()
    for prefix, cls in (("train", training.TrainConfig), ("flow", FlowConfig),
                        ("stft", StftConfig), ("mel", MelConfig)):
        known.update(training.config_to_map(prefix, cls()).keys())
    unknown = set(mapping) - known
    if unknown:
        raise ConfigInvalid(f"{path}: unknown config keys {sorted(unknown)}")
    return (training.config_from_map("train", training.TrainConfig, mapping),
            training.config_from_map("flow", FlowConfig, mapping),
            training.config_from_map("stft", StftConfig, mapping),
            training.config_from_map("mel", MelConfig, mapping))


def _echo_configs(train_cfg, flow_cfg, stft_cfg, mel_cfg) -> None:
    mapping = {}
    mapping.update(training.config_to_map("train", train_cfg))
    mapping.update(training.config_to_map("flow", flow_cfg))
    mapping.update(training.config_to_map("stft", stft_cfg))
    mapping.update(training.config_to_map("mel", mel_cfg))
    sys.stdout.write(textmap.dumps(mapping))


def cmd_preprocess(args) -> int:
    manifest = corpus.load_manifest(args.manifest)
    os.makedirs(args.out_dir, exist_ok=True)
    report = corpus.audit_audio(manifest)
    with open(os.path.join(args.out_dir, "audit.txt"), "w") as fh:
        fh.write(report.to_text())
    with open(os.path.join(args.out_dir, "audit.json"), "w") as fh:
        json.dump(report.to_mapping(), fh, indent=1, sort_keys=True)
        fh.write("\n")
    sys.stdout.write(report.to_text())
    if not report.ok:
        raise DataError(f"audit failed: {len(report.missing)} missing, "
                        f"{len(report.wrong_format)} unreadable")

    # re-check split hygiene on normalized text, then emit features
    normalized = [
        corpus.UtteranceRecord(r.id, r.split, r.category, r.audio_path,
                               corpus.normalize_text(r.text, args.normalizer))
        for r in manifest.records
    ]
    train_texts = {r.text: r.id for r in normalized if r.split == "train"}
    for rec in normalized:
        if rec.split == "test" and rec.text in train_texts:
            raise SplitLeak(f"after {args.normalizer}: test record {rec.id!r} "
                            f"matches train record {train_texts[rec.text]!r}")
    corpus.write_manifest(corpus.Manifest(normalized),
                          os.path.join(args.out_dir, "manifest.normalized.tsv"))

    stft_cfg = StftConfig()
    mel_cfg = MelConfig()
    mel_dir = os.path.join(args.out_dir, "mels")
    os.makedirs(mel_dir, exist_ok=True)
    n_written = 0
    for rec in manifest.records:
        if rec.split != "train":
            continue
        clip = load_wav(rec.audio_path)
        if clip.sample_rate != CORPUS_SAMPLE_RATE:
            raise UnsupportedFormat(f"{rec.audio_path}: expected "
                                    f"{CORPUS_SAMPLE_RATE} Hz, got {clip.sample_rate}")
        mel = mel_spectrogram(clip, stft_cfg, mel_cfg)
        write_mel_file(mel, os.path.join(mel_dir, f"{rec.id}.kmel"))
        n_written += 1
    print(f"wrote {n_written} feature files to {mel_dir}")
    return 0


def cmd_train(args) -> int:
    if args.config:
        train_cfg, flow_cfg, stft_cfg, mel_cfg = _load_config_file(args.config)
    else:
        train_cfg, flow_cfg, stft_cfg, mel_cfg = (
            training.TrainConfig(), FlowConfig(), StftConfig(), MelConfig())
    resume = None
    if args.resume:
        resume = training.load_checkpoint(args.resume)
        # the checkpoint owns the model/feature configs; --config may still
        # adjust train.* knobs
        flow_cfg, stft_cfg, mel_cfg = (resume.flow_config, resume.stft_config,
                                       resume.mel_config)
    _echo_configs(train_cfg, flow_cfg, stft_cfg, mel_cfg)
    manifest = corpus.load_manifest(args.manifest)
    final = training.train(manifest.records, train_cfg, flow_cfg, stft_cfg,
                           mel_cfg, args.out_dir, resume=resume,
                           max_iterations=args.iterations)
    print(f"finished at iteration {final.iteration}")
    return 0


def cmd_synthesize(args) -> int:
    if args.sigma <= 0:
        raise UsageError("--sigma must be positive")
    ck = training.load_checkpoint(args.checkpoint)
    model = training.build_model(ck)
    n_samples = None
    if args.wav:
        clip = load_wav(args.wav)
        if clip.sample_rate != ck.sample_rate:
            raise UnsupportedFormat(f"{args.wav}: expected {ck.sample_rate} Hz, "
                                    f"got {clip.sample_rate}")
        mel = mel_spectrogram(clip, ck.stft_config, ck.mel_config)
        n_samples = len(clip) // model.config.group_size * model.config.group_size
    else:
        mel = read_mel_file(args.mel)
        if mel.n_mels != model.config.n_mel_channels:
            raise ShapeMismatch(f"{args.mel}: {mel.n_mels} mel channels, model "
                                f"expects {model.config.n_mel_channels}")
        if mel.sample_rate != ck.sample_rate:
            raise ShapeMismatch(f"{args.mel}: sample rate {mel.sample_rate}, "
                                f"checkpoint says {ck.sample_rate}")
        if mel.hop_length != ck.stft_config.hop_length:
            raise ShapeMismatch(f"{args.mel}: hop {mel.hop_length}, checkpoint "
                                f"says {ck.stft_config.hop_length}")
    rng = np.random.default_rng(args.seed)
    out = model.infer(mel, args.sigma, rng, n_samples)
    save_wav(out, args.out)
    print(f"wrote {len(out)} samples to {args.out}")
    return 0


def cmd_check(args) -> int:
    seed = args.seed
    if args.checkpoint:
        ck = training.load_checkpoint(args.checkpoint)
        model32 = training.build_model(ck, np.float32)
        model64 = training.build_model(ck, np.float64)
    else:
        if args.config:
            _, flow_cfg, _, _ = _load_config_file(args.config)
        else:
            flow_cfg = FlowConfig()
        model32 = FlowModel(flow_cfg, np.random.default_rng(seed), np.float32)
        model64 = FlowModel(flow_cfg, np.random.default_rng(seed), np.float64)
        # fresh couplings are zero-initialized; move the differentiation
        # suites to a generic parameter point
        checks.perturb_model(model64, np.random.default_rng(seed + 1))

    modes = ["roundtrip", "jacobian", "grad"] if args.mode == "all" else [args.mode]
    group = model32.config.group_size
    n_samples = args.samples if args.samples else 64 * group
    results = checks.run_checks(model32, model64, n_samples, modes, seed)
    for res in results:
        status = "PASS" if res.passed else "FAIL"
        print(f"{res.mode}: max_error={res.max_error:.3e} "
              f"tolerance={res.tolerance:.0e} {status}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump([r.to_mapping() for r in results], fh, indent=1, sort_keys=True)
            fh.write("\n")
    if not all(r.passed for r in results):
        raise RuntimeFailure("verification failed")
    return 0


def cmd_mos(args) -> int:
    paths = [args.ratings] + list(args.compare or [])
    reports = []
    for path in paths:
        ratings = evaluation.ingest_ratings(path)
        for model_id in sorted({r.model_id for r in ratings}):
            reports.append(evaluation.category_report(ratings, model_id))
    if not reports:
        raise DataError(f"{args.ratings}: no ratings")
    for report in reports:
        sys.stdout.write(report.to_text())
        print()
    payload = {"reports": [r.to_mapping() for r in reports]}
    if len(reports) > 1:
        table = evaluation.compare_models(reports)
        sys.stdout.write(table.to_text())
        payload["comparison"] = table.to_mapping()
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(payload, fh, indent=1, sort_keys=True)
            fh.write("\n")
    return 0


def cmd_serve(args) -> int:
    samples = evaluation.load_sample_store(args.samples)
    service = evaluation.ListeningService(samples, args.out, seed=args.seed)
    try:
        server = evaluation.make_server(service, args.port, args.host,
                                        static_dir=args.static)
    except OSError as exc:
        raise RuntimeFailure(f"cannot bind {args.host}:{args.port}: {exc}") from exc
    print(f"listening on http://{args.host}:{server.server_address[1]}/ "
          f"({len(samples)} samples, ratings -> {args.out})", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
        service.close()
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="kwglow",
                     description="Flow-based neural vocoder toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", parents=[], help="audit a corpus and emit mel features")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--normalizer", default="identity",
                   choices=sorted(corpus.NORMALIZERS))
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="run the training loop")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--config", help="textmap file with train./flow./stft./mel. keys")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--iterations", type=int,
                   help="stop after this many total iterations (overrides epochs)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("synthesize", help="vocode a mel file or re-vocode a wav")
    p.add_argument("--checkpoint", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--mel", help="KMEL1 feature file")
    src.add_argument("--wav", help="reference wav; features are extracted first")
    p.add_argument("--out", required=True)
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("check", help="run model verification suites "
                       "(differentiation modes want small configs)")
    p.add_argument("--checkpoint")
    p.add_argument("--config", help="build a fresh model from this config instead")
    p.add_argument("--mode", default="all",
                   choices=["all", "roundtrip", "jacobian", "grad"])
    p.add_argument("--samples", type=int,
                   help="input length for the checks (multiple of group_size)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json", help="also write results to this JSON file")
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("mos", help="score reports from rating CSVs")
    p.add_argument("--ratings", required=True)
    p.add_argument("--compare", nargs="*", help="additional rating CSVs")
    p.add_argument("--json", help="also write reports to this JSON file")
    p.set_defaults(func=cmd_mos)

    p = sub.add_parser("serve", help="run the listening-test service")
    p.add_argument("--samples", required=True, help="directory with samples.tsv")
    p.add_argument("--out", required=True, help="ratings CSV (appended)")
    p.add_argument("--port", type=int, default=8765)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--static", help="directory of UI assets to serve at /")
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except SystemExit as exc:
        return int(exc.code or 0)
    except KwglowError as exc:
        print(f"kwglow: error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())

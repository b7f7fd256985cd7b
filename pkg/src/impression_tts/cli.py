"""Command-line entry point: ``impression-tts <command> [--config run.toml] [--seed N]``.

Exit codes: 0 success, 1 failed precondition (one ``error: <Kind>: <message>``
line on stderr), 2 usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Sequence


from . import __version__
from .config import RunConfig
from .control import ControlConfig
from .corpus import build_corpus, eval_sentences, load_corpus, read_manifest, write_manifest, write_mel
from .errors import ImpressionError
from .impression import DIM_IDS, ImpressionVector, correlation_matrix, correlation_table, modulate

log = logging.getLogger("impression_tts")

COMMANDS = ("gen-corpus", "train-backbone", "train-control", "train-estimator", "label", "synth", "sweep1d",
            "sweep2d", "simeval", "map-impression", "correlations")


def _file_sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _emit(obj: dict) -> None:
    print(json.dumps(obj, sort_keys=True))


def _parse_assignments(text: str | None) -> dict[str, float]:
    """'I=+2,K=-1' -> {'I': 2.0, 'K': -1.0}"""
    out: dict[str, float] = {}
    if not text:
        return out
    for part in text.split(","):
        key, sep, val = part.partition("=")
        key = key.strip().upper()
        if not sep or key not in DIM_IDS:
            raise ValueError(f"bad dimension assignment {part!r}; expected e.g. I=+2")
        out[key] = float(val)
    return out


def _corpus(cfg: RunConfig, args):
    return load_corpus(args.corpus or cfg.paths.corpus)


# --- commands -------------------------------------------------------------------------------------------


def cmd_gen_corpus(cfg: RunConfig, args) -> int:
    c = cfg.corpus
    out = Path(args.out or cfg.paths.corpus)
    corpus = build_corpus(out, c.n_speakers, c.utts_per_speaker, c.split_ratios, c.noise_sigma, seed=cfg.seed,
                          speaker_seed_offset=args.speaker_seed_offset)
    _emit({"corpus": str(out), "utterances": len(corpus.records),
           "manifest_sha256": _file_sha256(out / "manifest.jsonl")})
    return 0


def cmd_train_backbone(cfg: RunConfig, args) -> int:
    from .training import STEP_PRESETS, TrainingStagePlan, train_stage

    t = cfg.train
    preset = STEP_PRESETS[t.preset]
    steps = args.steps if args.steps is not None else (t.pretrain_steps if t.pretrain_steps is not None
                                                        else preset["pretrain"])
    gan = args.gan_steps if args.gan_steps is not None else (t.gan_steps if t.gan_steps is not None
                                                             else preset["gan_refine"])
    out = Path(args.out or cfg.paths.backbone)
    out.parent.mkdir(parents=True, exist_ok=True)
    corpus = _corpus(cfg, args)
    plan = TrainingStagePlan("pretrain", steps, optimizer="adam_noam", lr=t.pretrain_lr, warmup=t.warmup,
                             batch_size=t.batch_size, ref_crop=t.ref_crop, latent_noise=t.pretrain_latent_noise)
    metrics = train_stage(plan, corpus, None, out, cfg.model, seed=cfg.seed,
                          metrics_path=out.with_suffix(".pretrain.csv"), progress=args.verbose)
    if gan > 0:
        plan = TrainingStagePlan("gan_refine", gan, optimizer="adam_fixed", lr=t.gan_lr,
                                 batch_size=t.batch_size, ref_crop=t.ref_crop)
        metrics += train_stage(plan, corpus, out, out, seed=cfg.seed,
                               metrics_path=out.with_suffix(".gan_refine.csv"), progress=args.verbose)
    _emit({"checkpoint": str(out), "steps": len(metrics),
           "final_total": metrics[-1]["total"] if metrics else None})
    return 0


def cmd_train_control(cfg: RunConfig, args) -> int:
    from .training import STEP_PRESETS, TrainingStagePlan, train_stage

    t = cfg.train
    steps = args.steps if args.steps is not None else (
        t.control_steps if t.control_steps is not None else STEP_PRESETS[t.preset]["control"])
    backbone = Path(args.backbone or cfg.paths.backbone)
    out = Path(args.out or cfg.paths.control)
    corpus = _corpus(cfg, args)
    if args.manifest:
        corpus.records = read_manifest(args.manifest)
    control_cfg = ControlConfig.ablation() if args.ablation else cfg.control
    plan = TrainingStagePlan("control", steps, optimizer="adam_fixed", lr=t.control_lr,
                             batch_size=t.batch_size, ref_crop=t.ref_crop, latent_noise=t.control_latent_noise)
    metrics = train_stage(plan, corpus, backbone, out, control_cfg=control_cfg, seed=cfg.seed,
                          metrics_path=out.with_suffix(".control.csv"), progress=args.verbose)
    _emit({"checkpoint": str(out), "steps": len(metrics)})
    return 0


def cmd_train_estimator(cfg: RunConfig, args) -> int:
    from .estimator import save_estimator, train_estimator

    epochs = args.epochs if args.epochs is not None else cfg.estimator.epochs
    out = Path(args.out or cfg.paths.estimator)
    out.parent.mkdir(parents=True, exist_ok=True)
    model, report = train_estimator(_corpus(cfg, args), epochs=epochs, seed=cfg.seed, cfg=cfg.estimator_config(),
                                    progress=args.verbose)
    save_estimator(model, out, report)
    report.write_csv(out.with_suffix(".report.csv"))
    _emit({"checkpoint": str(out), "selected_epoch": report.selected_epoch, "test_rmse": report.test_rmse})
    return 0


def cmd_label(cfg: RunConfig, args) -> int:
    from .estimator import auto_label, load_estimator

    corpus = _corpus(cfg, args)
    model, _ = load_estimator(args.estimator or cfg.paths.estimator)
    records = corpus.records if args.split == "all" else corpus.split(args.split)
    labeled = auto_label(model, records, corpus.mel)
    out = Path(args.out or cfg.paths.root / "labels.jsonl")
    write_manifest(out, labeled)
    _emit({"labels": str(out), "utterances": len(labeled)})
    return 0


def _reference(corpus, utt_id: str | None) -> dict:
    from .evaluation import select_references

    if utt_id is None:
        return select_references(corpus, 1)[0]
    for r in corpus.records:
        if r["utt_id"] == utt_id:
            return r
    raise KeyError(f"unknown reference utterance {utt_id!r}")


def cmd_synth(cfg: RunConfig, args) -> int:
    from .estimator import estimate, load_estimator
    from .model import load_checkpoint

    corpus = _corpus(cfg, args)
    model, _ = load_checkpoint(args.checkpoint or cfg.paths.control)
    ref = _reference(corpus, args.reference)
    ref_mel = corpus.mel(ref)
    if args.vector:
        v = ImpressionVector.from_mapping(json.loads(Path(args.vector).read_text()))
    else:
        est, _ = load_estimator(args.estimator or cfg.paths.estimator)
        v = estimate(est, ref_mel, len(ref["tokens"]))
    v = modulate(v, _parse_assignments(args.set))
    tokens = [int(t) for t in args.tokens.split(",")] if args.tokens else eval_sentences(1, cfg.seed)[0]
    mel = model.synthesize(tokens, ref_mel, v)
    out = Path(args.out or cfg.paths.root / "synth.f32")
    out.parent.mkdir(parents=True, exist_ok=True)
    write_mel(out, mel)
    _emit({"mel": str(out), "frames": int(mel.shape[0]), "vector": v.as_dict()})
    return 0


def _eval_setup(cfg: RunConfig, args):
    from .estimator import estimate, load_estimator
    from .evaluation import select_references
    from .model import load_checkpoint

    corpus = _corpus(cfg, args)
    model, _ = load_checkpoint(args.checkpoint or cfg.paths.control)
    est, _ = load_estimator(args.estimator or cfg.paths.estimator)
    refs = select_references(corpus, cfg.eval.n_speakers)
    bases = [estimate(est, corpus.mel(r), len(r["tokens"])) for r in refs]
    return corpus, model, est, refs, bases


def cmd_sweep1d(cfg: RunConfig, args) -> int:
    from .evaluation import emit_report, sweep_single, sweep_trend

    dims = [d.strip().upper() for d in args.dim.split(",")] if args.dim else list(DIM_IDS)
    for d in dims:
        if d not in DIM_IDS:
            raise ValueError(f"unknown dimension {d!r}")
    corpus, model, est, refs, bases = _eval_setup(cfg, args)
    out_root = Path(args.out or cfg.paths.reports)
    summary = {}
    for ref, base in zip(refs, bases):
        for d in dims:
            res = sweep_single(model, est, corpus.mel(ref), base, d, cfg.eval.deltas, cfg.eval.n_utts, cfg.seed,
                               speaker_id=ref["speaker_id"])
            emit_report(res, out_root / ref["speaker_id"])
            summary[f"{ref['speaker_id']}/{d}"] = round(sweep_trend(res), 6)
    _emit({"reports": str(out_root), "spearman": summary})
    return 0


def cmd_sweep2d(cfg: RunConfig, args) -> int:
    from .evaluation import emit_report, pair_trends, sweep_pair

    dims = tuple(d.strip().upper() for d in (args.dims or ",".join(cfg.eval.pair)).split(","))
    if len(dims) != 2 or any(d not in DIM_IDS for d in dims):
        raise ValueError(f"--dims needs two dimensions such as E,H; got {args.dims!r}")
    corpus, model, est, refs, bases = _eval_setup(cfg, args)
    out_root = Path(args.out or cfg.paths.reports)
    summary = {}
    for ref, base in zip(refs, bases):
        res = sweep_pair(model, est, corpus.mel(ref), base, dims, cfg.eval.deltas, cfg.eval.n_utts, cfg.seed,
                         speaker_id=ref["speaker_id"])
        emit_report(res, out_root / ref["speaker_id"])
        r1, r2 = pair_trends(res)
        summary[ref["speaker_id"]] = {"min_rho_" + dims[0]: round(float(r1.min()), 6),
                                      "min_rho_" + dims[1]: round(float(r2.min()), 6)}
    _emit({"reports": str(out_root), "spearman": summary})
    return 0


def cmd_simeval(cfg: RunConfig, args) -> int:
    from .evaluation import emit_report, load_embedder, save_embedder, speaker_similarity, train_embedder

    corpus, model, est, refs, bases = _eval_setup(cfg, args)
    emb_path = Path(args.embedder or cfg.paths.embedder)
    if emb_path.exists():
        embedder = load_embedder(emb_path)
    else:
        e = cfg.eval
        # speakers disjoint from the TTS corpus: a separate seed offset
        emb_corpus = build_corpus(cfg.paths.root / "embedder_corpus", e.embedder_speakers, e.embedder_utts,
                                  (0.8, 0.1, 0.1), cfg.corpus.noise_sigma, seed=cfg.seed,
                                  speaker_seed_offset=EMBEDDER_SEED_OFFSET)
        embedder = train_embedder(emb_corpus, epochs=e.embedder_epochs, seed=cfg.seed)
        save_embedder(embedder, emb_path)
    out_root = Path(args.out or cfg.paths.reports)
    summary = {}
    for ref, base in zip(refs, bases):
        rep = speaker_similarity(model, embedder, ref, corpus, base, n_utts=cfg.eval.similarity_utts, seed=cfg.seed)
        emit_report(rep, out_root / ref["speaker_id"])
        summary[ref["speaker_id"]] = {"median_abs3": round(rep.median_at(3.0), 6),
                                      "different_p95": round(rep.different_percentile(95.0), 6)}
    _emit({"reports": str(out_root), "similarity": summary})
    return 0


EMBEDDER_SEED_OFFSET = 7_000_000


def cmd_map_impression(cfg: RunConfig, args) -> int:
    from .llm import HttpChatClient, KeywordStubClient, PromptTemplate, map_impression

    if args.base:
        base = ImpressionVector.from_mapping(json.loads(Path(args.base).read_text()))
    else:
        base = ImpressionVector.neutral()
    client = KeywordStubClient() if args.offline else HttpChatClient(cfg.llm)
    vec, trace = map_impression(client, PromptTemplate(), base, args.target, max_retries=cfg.llm.max_retries,
                                temperature=cfg.llm.temperature)
    if args.out:
        Path(args.out).write_text(json.dumps(vec.as_dict(), sort_keys=True) + "\n")
    _emit({"vector": vec.as_dict(), "attempts": trace.attempts, "clamped": list(trace.clamped)})
    return 0


def cmd_correlations(cfg: RunConfig, args) -> int:
    from .impression import PUBLISHED_CORRELATIONS

    records = read_manifest(args.manifest) if args.manifest else _corpus(cfg, args).records
    vectors = [ImpressionVector.from_mapping(r["label"]) for r in records]
    cm = correlation_matrix(vectors)
    out = Path(args.out or cfg.paths.reports / "correlations.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(correlation_table(cm))
    pairs = {f"{a}{b}": {"measured": round(cm.entry(a, b), 6), "published": p}
             for (a, b), p in PUBLISHED_CORRELATIONS.items()}
    _emit({"table": str(out), "n": cm.n_samples, "pairs": pairs})
    return 0


HANDLERS = {
    "gen-corpus": cmd_gen_corpus,
    "train-backbone": cmd_train_backbone,
    "train-control": cmd_train_control,
    "train-estimator": cmd_train_estimator,
    "label": cmd_label,
    "synth": cmd_synth,
    "sweep1d": cmd_sweep1d,
    "sweep2d": cmd_sweep2d,
    "simeval": cmd_simeval,
    "map-impression": cmd_map_impression,
    "correlations": cmd_correlations,
}


# --- parser --------------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run configuration")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--work-dir", help="override paths.work_dir")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    p = argparse.ArgumentParser(prog="impression-tts", description="Impression-controllable toy TTS pipeline.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    def add(name, help_):
        return sub.add_parser(name, parents=[common], help=help_, description=help_)

    s = add("gen-corpus", "generate the synthetic corpus")
    s.add_argument("--out", help="corpus directory")
    s.add_argument("--speaker-seed-offset", type=int, default=0)

    s = add("train-backbone", "pretrain the acoustic model and speaker encoder (optionally GAN refinement)")
    s.add_argument("--corpus")
    s.add_argument("--out")
    s.add_argument("--steps", type=int)
    s.add_argument("--gan-steps", type=int)

    s = add("train-control", "train the control module on a frozen backbone")
    s.add_argument("--corpus")
    s.add_argument("--backbone")
    s.add_argument("--out")
    s.add_argument("--steps", type=int)
    s.add_argument("--manifest", help="labels to train on (default: corpus labels)")
    s.add_argument("--ablation", action="store_true", help="no dropout, no adversary")

    s = add("train-estimator", "train the impression estimator")
    s.add_argument("--corpus")
    s.add_argument("--out")
    s.add_argument("--epochs", type=int)

    s = add("label", "attach estimated impression labels to a corpus")
    s.add_argument("--corpus")
    s.add_argument("--estimator")
    s.add_argument("--split", default="all", choices=("all", "train", "val", "test"))
    s.add_argument("--out")

    s = add("synth", "synthesize one sentence with a reference and an impression vector")
    s.add_argument("--corpus")
    s.add_argument("--checkpoint")
    s.add_argument("--estimator")
    s.add_argument("--reference", help="reference utterance id")
    s.add_argument("--vector", help="JSON file with an impression vector (default: estimated from the reference)")
    s.add_argument("--set", help="modulation, e.g. I=+2,K=-1")
    s.add_argument("--tokens", help="comma-separated token ids")
    s.add_argument("--out")

    for name, help_ in (("sweep1d", "single-dimension modulation sweeps"),
                        ("sweep2d", "two-dimension modulation grid"),
                        ("simeval", "speaker similarity of modulated speech")):
        s = add(name, help_)
        s.add_argument("--corpus")
        s.add_argument("--checkpoint")
        s.add_argument("--estimator")
        s.add_argument("--out")
        if name == "sweep1d":
            s.add_argument("--dim", help="dimension(s), e.g. I or A,B (default: all)")
        elif name == "sweep2d":
            s.add_argument("--dims", help="two dimensions, e.g. E,H")
        else:
            s.add_argument("--embedder")

    s = add("map-impression", "map a text description to an impression vector with an LLM")
    s.add_argument("--target", required=True)
    s.add_argument("--base", help="JSON file with the current impression vector (default: neutral)")
    s.add_argument("--offline", action="store_true", help="use the deterministic offline stub client")
    s.add_argument("--out")

    s = add("correlations", "inter-dimension correlations of corpus labels")
    s.add_argument("--corpus")
    s.add_argument("--manifest")
    s.add_argument("--out")
    return p


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = RunConfig.load(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.work_dir:
            cfg.paths.work_dir = args.work_dir
        return HANDLERS[args.command](cfg, args)
    except (ImpressionError, OSError, KeyError, ValueError) as exc:
        msg = str(exc).replace("\n", " ")
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()

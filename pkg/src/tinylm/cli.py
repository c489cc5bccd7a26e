"""Single entry point: one subcommand per pipeline stage, file-based config
with flag overrides. Data and reports go to configured paths or stdout; logs
go to stderr."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import data, evalbench, finetune, infer
from . import model as m
from . import train as tr
from .config import ConfigError, PipelineConfig, load_config, parse_bool, parse_pairs
from .seeding import derive_rng
from .tokenizer import load_tokenizer

log = logging.getLogger("tinylm")


def _shard_bytes(section: dict[str, str], default_mb: int = 200) -> int:
    return int(float(section.get("shard_mb", default_mb)) * 1024 * 1024)


def _parse_ranges(spec: str) -> dict[str, tuple[float, float]]:
    # "name:lo:hi, name:lo:hi"
    ranges = {}
    for part in spec.split(","):
        part = part.strip()
        if not part:
            continue
        pieces = part.split(":")
        if len(pieces) != 3:
            raise ConfigError(f"expected name:lo:hi, got {part!r}")
        ranges[pieces[0].strip()] = (float(pieces[1]), float(pieces[2]))
    return ranges


def cmd_prepare(cfg: PipelineConfig, args: argparse.Namespace) -> None:
    sec = cfg.section("prepare")
    table = data.SensorTable.from_csv(
        sec["sensor_csv"], timestamp_column=sec.get("timestamp_column")
    )
    columns = [c.strip() for c in sec["columns"].split(",")]
    tmpl = data.PromptTemplateConfig(context_text=sec.get("context", ""), column_order=columns)
    docs = data.transform_table(
        table,
        tmpl,
        _parse_ranges(sec["ranges"]),
        rows_per_group=int(sec["rows_per_doc"]) if "rows_per_doc" in sec else None,
    )
    out = Path(sec["out_docs"])
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("\n\n".join(docs) + "\n", encoding="utf-8")
    print(f"prepare: wrote {len(docs)} document(s) to {out}")


def cmd_tokenize(cfg: PipelineConfig, args: argparse.Namespace) -> None:
    sec = cfg.section("tokenize")
    tok = load_tokenizer()
    limit = _shard_bytes(sec)
    for src, out_dir in parse_pairs(sec["inputs"]):
        shards = data.tokenize_corpus(data.iter_text_documents(src), tok, limit, out_dir)
        total = sum(s.token_count for s in shards)
        print(f"tokenize: {src} -> {len(shards)} shard(s), {total} tokens in {out_dir}")


def cmd_mix(cfg: PipelineConfig, args: argparse.Namespace) -> None:
    sec = cfg.section("mix")
    tok = load_tokenizer()
    sources = [(d, float(r)) for d, r in parse_pairs(sec["sources"], separator="=")]
    spec = data.MixSpec(
        sources=sources,
        seed=cfg.seed,
        target_tokens=int(sec["target_tokens"]) if "target_tokens" in sec else None,
        shard_size_limit=_shard_bytes(sec),
    )
    result = data.mix_shards(spec, sec["out_dir"], tok.eot_id)
    shares = ", ".join(
        f"{name}: {share:.4f}" for name, share in result.realized_shares().items()
    )
    print(
        f"mix: {len(result.shards)} shard(s), {result.total_tokens} tokens -> "
        f"{sec['out_dir']} (realized shares: {shares})"
    )


def cmd_split(cfg: PipelineConfig, args: argparse.Namespace) -> None:
    sec = cfg.section("split")
    tok = load_tokenizer()
    train_shards, val_shards = data.split_dataset(
        sec["in_dir"],
        float(sec.get("train_ratio", "0.98")),
        cfg.seed,
        sec["train_dir"],
        sec["val_dir"],
        tok.eot_id,
        shard_size_limit=_shard_bytes(sec),
    )
    n_train = sum(s.token_count for s in train_shards)
    n_val = sum(s.token_count for s in val_shards)
    share = 100.0 * n_train / max(n_train + n_val, 1)
    print(
        f"split: train {n_train} tokens ({share:.2f}%), val {n_val} tokens "
        f"-> {sec['train_dir']} / {sec['val_dir']}"
    )


def _model_config(sec: dict[str, str]) -> m.ModelConfig:
    depth = int(sec["depth"])
    hidden = int(sec.get("hidden", 64 * depth))
    return m.ModelConfig(
        n_layers=depth,
        d_model=hidden,
        max_seq=int(sec.get("ctx", 1024)),
        n_heads=int(sec["heads"]) if "heads" in sec else None,
    )


def cmd_pretrain(cfg: PipelineConfig, args: argparse.Namespace) -> None:
    sec = cfg.section("pretrain")
    model_cfg = _model_config(sec)
    hyper = tr.TrainHyper(
        micro_batch=int(sec.get("micro_batch", 64)),
        seq_len=int(sec.get("seq_len", 1024)),
        total_steps=int(sec.get("total_steps", 20000)),
        warmup_steps=int(sec.get("warmup_steps", 700)),
        lr_max=float(sec.get("lr_max", 6e-4)),
        lr_min=float(sec["lr_min"]) if "lr_min" in sec else None,
        grad_clip_norm=float(sec.get("grad_clip_norm", 1.0)),
        weight_decay=float(sec.get("weight_decay", 0.1)),
        seed=cfg.seed,
        val_interval=int(sec.get("val_interval", 100)),
        val_batches=int(sec.get("val_batches", 8)),
        checkpoint_interval=int(sec.get("checkpoint_interval", 0)),
        log_interval=int(sec.get("log_interval", 1)),
        cycle_data=parse_bool(sec.get("cycle_data", "false")),
    )
    result = tr.train(model_cfg, sec["train_dir"], sec.get("val_dir"), hyper, sec["out_dir"])
    print(
        f"pretrain: {result.steps_run} step(s), loss "
        f"{result.initial_train_loss:.4f} -> {result.final_train_loss:.4f}, "
        f"checkpoint {result.checkpoint_path}"
    )


def cmd_finetune(cfg: PipelineConfig, args: argparse.Namespace) -> None:
    sec = cfg.section("finetune")
    tok = load_tokenizer()
    model_cfg, weights = infer.load_model(sec["base"])
    records = finetune.load_records(sec["records"])
    ratios = tuple(float(x) for x in sec.get("ratios", "0.8,0.1,0.1").split(","))
    train_recs, val_recs, test_recs = finetune.build_ft_dataset(records, ratios, cfg.seed)
    lora_cfg = finetune.LoraConfig(
        rank=int(sec.get("rank", 16)),
        alpha=float(sec.get("alpha", 32.0)),
        dropout=float(sec.get("dropout", 0.0)),
        targets=tuple(t.strip() for t in sec.get("targets", "qkv,attn_proj").split(",")),
        lr=float(sec.get("lr", 5e-4)),
        steps=int(sec.get("steps", 300)),
        grad_accum=int(sec.get("grad_accum", 1)),
        batch=int(sec.get("batch", 4)),
        seed=cfg.seed,
        eval_interval=int(sec.get("eval_interval", 10)),
    )
    adapter, metrics = finetune.finetune(model_cfg, weights, lora_cfg, train_recs, val_recs, tok)
    out_dir = Path(sec["out_dir"])
    adapter_path = finetune.save_adapter(out_dir / "adapter.bin", adapter)
    metrics.write_csv(out_dir / "metrics.csv")
    print(
        f"finetune: {len(train_recs)}/{len(val_recs)}/{len(test_recs)} records, "
        f"best eval loss {metrics.best_eval_loss:.4f} at step {metrics.best_step}, "
        f"adapter {adapter_path}"
    )


def cmd_merge(cfg: PipelineConfig, args: argparse.Namespace) -> None:
    sec = cfg.section("merge")
    model_cfg, weights = infer.load_model(sec["base"])
    adapter = finetune.load_adapter(sec["adapter"], model_cfg)
    merged = finetune.merge(weights, adapter)
    out = m.save_checkpoint(sec["out"], model_cfg, merged)
    print(f"merge: wrote {out}")


def cmd_quantize(cfg: PipelineConfig, args: argparse.Namespace) -> None:
    sec = cfg.section("quantize")
    model_cfg, weights = infer.load_model(sec["model"])
    scheme = infer.QuantScheme(
        bits=int(sec.get("bits", 4)), block_size=int(sec.get("block_size", 32))
    )
    result = infer.quantize_model(model_cfg, weights, scheme, sec["out"])
    ratio = result.file_bytes / max(result.f32_bytes, 1)
    print(
        f"quantize: {result.path} ({result.file_bytes} bytes, "
        f"{100 * ratio:.1f}% of f32 weights)"
    )


def _gen_params(sec: dict[str, str], args: argparse.Namespace) -> infer.GenerationParams:
    greedy = parse_bool(sec.get("greedy", "false")) or getattr(args, "greedy", False)
    temperature = float(sec.get("temperature", 0.7))
    if getattr(args, "temp", None) is not None:
        temperature = args.temp
    if greedy:
        temperature = 0.0
    params = infer.GenerationParams(
        temperature=temperature,
        repeat_penalty=float(sec.get("repeat_penalty", 1.1)),
        repeat_window=int(sec.get("repeat_window", 64)),
        max_new_tokens=int(sec.get("max_new_tokens", 300)),
        seed=0,
        threads=int(sec.get("threads", 0)),
    )
    if getattr(args, "repeat_penalty", None) is not None:
        params.repeat_penalty = args.repeat_penalty
    if getattr(args, "n", None) is not None:
        params.max_new_tokens = args.n
    if getattr(args, "threads", None) is not None:
        params.threads = args.threads
    return params


def cmd_generate(cfg: PipelineConfig, args: argparse.Namespace) -> None:
    sec = cfg.section("generate")
    tok = load_tokenizer()
    model_cfg, weights = infer.load_model(sec["model"])
    if "prompt" in sec:
        prompt = sec["prompt"]
    elif "prompt_file" in sec:
        prompt = Path(sec["prompt_file"]).read_text(encoding="utf-8")
    else:
        raise ConfigError("[generate] needs prompt or prompt_file")
    params = _gen_params(sec, args)
    params.seed = cfg.seed
    report = infer.generate(model_cfg, weights, tok, prompt, params)
    print(report.generated_text)
    print(
        f"-- {report.generated_tokens} token(s) | prompt {report.prompt_tokens} tok "
        f"@ {report.prompt_eval_rate:.2f} tok/s | eval @ {report.eval_rate:.2f} tok/s "
        f"| wall {report.wall_time:.3f}s | temp {params.temperature} "
        f"| repeat {params.repeat_penalty}"
    )


def cmd_eval(cfg: PipelineConfig, args: argparse.Namespace) -> None:
    sec = cfg.section("eval")
    tok = load_tokenizer()
    model_cfg, weights = infer.load_model(sec["model"])
    cases = evalbench.load_cases(sec["cases"])
    greedy = parse_bool(sec.get("greedy", "true"))
    params = infer.GenerationParams(
        temperature=0.0 if greedy else float(sec.get("temperature", 0.7)),
        repeat_penalty=1.0,
        seed=cfg.seed,
        threads=int(sec.get("threads", 0)),
    )
    summary = evalbench.evaluate(
        model_cfg, weights, tok, cases, params, k=int(sec.get("k", 4))
    )
    if "out_csv" in sec:
        evalbench.emit_eval_report(summary, sec["out_csv"])
    print(
        f"eval: {summary.correct}/{summary.total} correct, accuracy "
        f"{summary.accuracy:.2f}%, macro-F1 {summary.macro_f1:.4f}, "
        f"invalid {summary.invalid_count}"
    )


def cmd_bench(cfg: PipelineConfig, args: argparse.Namespace) -> None:
    sec = cfg.section("bench")
    tok = load_tokenizer()
    model_cfg, weights = infer.load_model(sec["model"])
    params = infer.GenerationParams(
        temperature=float(sec.get("temperature", 0.0)),
        repeat_penalty=1.0,
        max_new_tokens=int(sec.get("max_new_tokens", 16)),
        seed=cfg.seed,
        threads=int(sec.get("threads", 0)),
    )
    instance_counts = [int(x) for x in sec.get("instances", "1,2,4").split(",")]
    background_paths = [p for p in sec.get("background", "").split(",") if p.strip()]
    background = [infer.load_model(p.strip()) for p in background_paths]
    conditions = [(), tuple(background)] if background else [()]
    results = []
    for held in conditions:
        for count in instance_counts:
            result = evalbench.bench_generate(
                model_cfg, weights, tok, sec["prompt"], params, count, held
            )
            results.append(result)
            print(
                f"bench: instances={count} background={result.background} "
                f"mean={np.mean(result.rates):.2f} tok/s aggregate={result.aggregate_rate:.2f}"
            )
    if "out_csv" in sec:
        evalbench.emit_bench_report(results, sec["out_csv"])


COMMANDS = {
    "prepare": cmd_prepare,
    "tokenize": cmd_tokenize,
    "mix": cmd_mix,
    "split": cmd_split,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "merge": cmd_merge,
    "quantize": cmd_quantize,
    "generate": cmd_generate,
    "eval": cmd_eval,
    "bench": cmd_bench,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tinylm", description="Train, fine-tune, quantize and benchmark small language models."
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", "-c", required=True, help="pipeline config file")
        p.add_argument("--seed", type=int, default=None, help="override the global seed")
        if name == "generate":
            p.add_argument("--temp", type=float, default=None)
            p.add_argument("--repeat-penalty", dest="repeat_penalty", type=float, default=None)
            p.add_argument("--n", type=int, default=None, help="max new tokens")
            p.add_argument("-t", "--threads", type=int, default=None)
            p.add_argument("--greedy", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, seed_override=args.seed)
        COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # one-line diagnostic, nonzero exit
        print(f"error: {args.command}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

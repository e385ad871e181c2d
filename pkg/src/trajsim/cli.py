"""``trajsim`` command-line interface.

Every subcommand reads an optional YAML config (``--config``), applies
``--section.key=value`` overrides, writes its artifacts, and records a
``<output>.manifest.json`` with the effective config, the seed, and SHA-256
checksums of inputs and outputs. ``trajsim rerun MANIFEST`` replays a run
from its manifest (``--check`` verifies the outputs reproduce bit-for-bit).

Exit codes: 0 ok, 1 unexpected failure, 2 config/usage error, 3 missing
input file, 4 incompatible artifact (checkpoint/index/embedding version or
kind), 5 invalid data.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import __version__
from . import augment as aug
from . import checkpoint
from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig, from_dict, load_config
from .contrastive import TrainState, fit
from .encoder import Encoder, EncoderError, SpatialNorm
from .evaluate import EvalError, EvalReport, make_query_db, mean_rank, perturb_query_db
from .finetune import (FinetunedModel, FinetuneError, evaluate_finetuned, evaluate_pretrained,
                       finetune, make_pairs, split_dataset, training_mse)
from .geo import DatasetError, Trajectory, dataset_stats, load_dataset, preprocess_filter, save_dataset
from .grid import GridError, build_cell_embeddings, load_cell_table, save_cell_table
from .measures import pairwise_matrix
from .search import (FormatError, build_ivf, knn_flat, knn_ivf, load_ivf, load_store, save_ivf,
                     write_embeddings)
from .synth import generate

log = logging.getLogger("trajsim")

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_INCOMPATIBLE = 4
EXIT_DATA = 5


class UsageError(ConfigError):
    pass


# ------------------------------------------------------------------ helpers


def sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _need(path: str | Path) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"input not found: {p}")
    return p


def _load_trajs(path: str | Path, cfg: RunConfig) -> list[Trajectory]:
    res = load_dataset(_need(path), cfg.data.format)
    if res.errors:
        print(f"{path}: skipped {len(res.errors)} malformed record(s)", file=sys.stderr)
    if not res.trajectories:
        raise DatasetError(f"{path}: no valid trajectories")
    return res.trajectories


def load_any_encoder(path: str | Path) -> tuple[Encoder, FinetunedModel | None]:
    """Encoder from an encoder, training-state or fine-tuned checkpoint."""
    arrays, header = checkpoint.load(_need(path))
    kind = header.get("kind")
    if kind == "finetuned":
        model = FinetunedModel.load(path)
        return model.encoder, model
    if kind in ("encoder", "train_state"):
        return Encoder.from_arrays(arrays, header), None
    raise CheckpointError(f"{path}: unsupported checkpoint kind {kind!r}")


def _run_header(cfg: RunConfig) -> dict:
    return {"run": {"config": cfg.to_dict(), "seed": cfg.effective_seed, "version": __version__}}


def _print_table(rows: list[tuple[str, str]], title: str) -> None:
    width = max(len(r[0]) for r in rows)
    print(title)
    for k, v in rows:
        print(f"  {k.ljust(width)}  {v}")


# ---------------------------------------------------------------- commands
# each returns (inputs, outputs, extra manifest fields)


def cmd_synth(a: dict, cfg: RunConfig):
    trajs = generate(cfg.synth)
    save_dataset(trajs, a["out"], cfg.data.format)
    print(f"wrote {len(trajs)} trajectories to {a['out']}")
    return [], [a["out"]], {}


def cmd_preprocess(a: dict, cfg: RunConfig):
    res = load_dataset(_need(a["input"]), cfg.data.format)
    kept = preprocess_filter(res.trajectories, cfg.data.min_pts, cfg.data.max_pts)
    if not kept:
        raise DatasetError("no trajectory survives the length filter")
    save_dataset(kept, a["out"], cfg.data.format)
    st = dataset_stats(kept)
    _print_table([("read", str(len(res.trajectories))), ("malformed", str(len(res.errors))),
                  ("kept", str(st.count)), ("points min/mean/max",
                                             f"{st.min_points}/{st.mean_points:.1f}/{st.max_points}"),
                  ("length km min/mean/max",
                   f"{st.min_length_km:.2f}/{st.mean_length_km:.2f}/{st.max_length_km:.2f}")], "preprocess")
    errors = [{"line": e.line, "message": e.message} for e in res.errors]
    return [a["input"]], [a["out"]], {"record_errors": errors}


def cmd_build_grid(a: dict, cfg: RunConfig):
    trajs = _load_trajs(a["input"], cfg)
    table, losses = build_cell_embeddings(trajs, cfg.grid.cell_side, cfg.skipgram, seed=cfg.effective_seed)
    save_cell_table(table, a["out"], meta={"skipgram_losses": losses, **_run_header(cfg)})
    print(f"{len(table.cells)} cells, skip-gram loss {losses[0]:.4f} -> {losses[-1]:.4f}")
    sidecar = a["out"] + ".grid.json"
    return [a["input"]], [a["out"], sidecar], {"skipgram_losses": losses}


def cmd_pretrain(a: dict, cfg: RunConfig):
    trajs = _load_trajs(a["input"], cfg)
    val = _load_trajs(a["val"], cfg) if a.get("val") else None
    inputs = [a["input"], a["cells"]] + ([a["val"]] if a.get("val") else [])
    table = load_cell_table(_need(a["cells"]))
    if table.dim != cfg.encoder.d_t:
        raise ConfigError(f"cell table width {table.dim} != encoder.d_t {cfg.encoder.d_t}")
    out = Path(a["out_dir"])
    enc = None
    if a.get("resume"):
        inputs.append(a["resume"])
        _need(a["resume"])
    else:
        enc = Encoder.create(cfg.encoder, table, SpatialNorm.fit(trajs), seed=cfg.effective_seed)
    res = fit(trajs, enc, cfg.train, val=val, out_dir=out, resume=a.get("resume"), meta=_run_header(cfg))
    best, _ = TrainState.load(res.best_path or res.last_path)
    enc_path = out / "encoder.ckpt"
    best.encoder.save(enc_path, _run_header(cfg))
    print(f"trained {res.epochs_run} epoch(s){' (early stop)' if res.stopped_early else ''}; "
          f"best loss {best.best_loss:.4f}; encoder -> {enc_path}")
    outs = [str(p) for p in (enc_path, res.best_path, res.last_path) if p is not None]
    return inputs, outs, {"history": res.state.history, "stopped_early": res.stopped_early}


def cmd_embed(a: dict, cfg: RunConfig):
    enc, _ = load_any_encoder(a["model"])
    trajs = _load_trajs(a["input"], cfg)
    vecs = enc.embed(trajs)
    write_embeddings(a["out"], [t.id for t in trajs], vecs)
    print(f"embedded {len(trajs)} trajectories (dim {vecs.shape[1]}) -> {a['out']}")
    return [a["model"], a["input"]], [a["out"]], {}


def cmd_knn(a: dict, cfg: RunConfig):
    store = load_store(_need(a["store"]))
    enc, _ = load_any_encoder(a["model"])
    queries = _load_trajs(a["queries"], cfg)
    k = a.get("k") or cfg.search.k
    qv = enc.embed(queries)
    inputs, outputs = [a["store"], a["model"], a["queries"]], [a["out"]]
    index = None
    if cfg.search.index == "ivf":
        if a.get("ivf") and Path(a["ivf"]).exists():
            index = load_ivf(a["ivf"])
            inputs.append(a["ivf"])
        else:
            index = build_ivf(store, cfg.search.k_c, cfg.search.kmeans_iters,
                              np.random.default_rng(cfg.effective_seed), cfg.search.nprobe)
            if a.get("ivf"):
                save_ivf(index, a["ivf"])
                outputs.append(a["ivf"])
    results = []
    for t, v in zip(queries, qv):
        r = knn_ivf(index, store, v, k) if index is not None else knn_flat(store, v, k)
        results.append({"id": t.id, "clamped": r.clamped, "neighbors": [[i, d] for i, d in r]})
        flag = " (k-clamped)" if r.clamped else ""
        print(f"{t.id}: " + ", ".join(f"{i}:{d:.4f}" for i, d in r) + flag)
    doc = {"k": k, "index": cfg.search.index, "results": results}
    Path(a["out"]).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    return inputs, outputs, {}


def cmd_measure(a: dict, cfg: RunConfig):
    ta = _load_trajs(a["input"], cfg)
    tb = _load_trajs(a["against"], cfg) if a.get("against") else ta
    m = pairwise_matrix(ta, tb, cfg.measure)
    lines = [",".join(["id"] + [t.id for t in tb])]
    lines += [",".join([t.id] + [repr(float(x)) for x in row]) for t, row in zip(ta, m)]
    Path(a["out"]).write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"{cfg.measure.name}: {m.shape[0]}x{m.shape[1]} distances -> {a['out']}")
    inputs = [a["input"]] + ([a["against"]] if a.get("against") else [])
    return inputs, [a["out"]], {}


def cmd_finetune(a: dict, cfg: RunConfig):
    enc, _ = load_any_encoder(a["model"])
    trajs = _load_trajs(a["input"], cfg)
    fc = cfg.finetune
    rng = np.random.default_rng([fc.seed, 0xA11])
    tr, va, te = split_dataset(trajs, fc.split, rng)
    ptr = make_pairs(tr, fc, rng)
    pva = make_pairs(va, fc, rng) if len(va) >= 2 else None
    model = finetune(enc, ptr, fc, pva)
    metrics = {"train_mse": training_mse(model, ptr), "alpha": model.alpha,
               "label_normalization": "exp(-d/alpha)"}
    if len(te) >= 6:
        dte = pairwise_matrix(te, te, fc.measure)
        ks = tuple(k for k in (5, 20) if k < len(te))
        metrics["pretrained"] = evaluate_pretrained(enc, te, dte, ks)
        metrics["finetuned"] = evaluate_finetuned(model, te, dte, ks)
    model.save(a["out"])
    rows = [("train MSE", f"{metrics['train_mse']:.5f}"), ("alpha", f"{model.alpha:.2f}")]
    for stage in ("pretrained", "finetuned"):
        if stage in metrics:
            rows.append((stage, "  ".join(f"{k}={v:.3f}" for k, v in metrics[stage].items())))
    _print_table(rows, f"finetune ({fc.target}, scope={fc.scope})")
    return [a["model"], a["input"]], [a["out"]], {"metrics": metrics}


def cmd_eval(a: dict, cfg: RunConfig):
    enc, ft_model = load_any_encoder(a["model"])
    trajs = _load_trajs(a["input"], cfg)
    ec = cfg.eval
    seed = cfg.effective_seed
    qdb = make_query_db(trajs, ec.n_queries, ec.db_size, np.random.default_rng(seed))
    report = EvalReport(mean_rank=mean_rank(enc, qdb), config=cfg.to_dict(), seed=seed)
    rows = [(f"clean |D|={ec.db_size}", f"{report.mean_rank:.3f}")]
    for name, values in (("downsample", ec.rho_s), ("distort", ec.rho_d)):
        sweep = {}
        for i, rho in enumerate(values):
            p = perturb_query_db(qdb, name, rho, np.random.default_rng([seed, len(name), i]))
            sweep[str(rho)] = mean_rank(enc, p)
            rows.append((f"{name} rho={rho}", f"{sweep[str(rho)]:.3f}"))
        if sweep:
            report.sweeps[name] = sweep
    if ec.db_sizes:
        sweep = {}
        for size in ec.db_sizes:
            q = make_query_db(trajs, ec.n_queries, size, np.random.default_rng(seed))
            sweep[str(size)] = mean_rank(enc, q)
            rows.append((f"|D|={size}", f"{sweep[str(size)]:.3f}"))
        report.sweeps["db_size"] = sweep
    if ec.measure is not None:
        pool = trajs[: ec.hr_pool]
        kind = replace(cfg.measure, name=ec.measure)
        dist = pairwise_matrix(pool, pool, kind)
        ks = tuple(k for k in ec.ks if k < len(pool))
        scores = (evaluate_finetuned(ft_model, pool, dist, ks) if ft_model is not None
                  else evaluate_pretrained(enc, pool, dist, ks))
        report.hr_at_k = {int(k.split("@")[1]): v for k, v in scores.items() if k.startswith("hr@")}
        report.r5_at_20 = scores.get("r5@20")
        rows += [(k.upper(), f"{v:.3f}") for k, v in scores.items()]
    report.__post_init__()
    Path(a["out"]).write_text(report.to_json() + "\n", encoding="utf-8")
    _print_table(rows, "mean rank (lower is better)")
    return [a["model"], a["input"]], [a["out"]], {}


def cmd_augment(a: dict, cfg: RunConfig):
    trajs = _load_trajs(a["input"], cfg)
    rng = np.random.default_rng(cfg.augment.seed if cfg.augment.seed is not None else cfg.effective_seed)
    out = [aug.apply(t, cfg.augment, rng) for t in trajs]
    save_dataset(out, a["out"], cfg.data.format)
    print(f"{cfg.augment.method}: {sum(len(t) for t in trajs)} -> {sum(len(t) for t in out)} points")
    return [a["input"]], [a["out"]], {}


COMMANDS: dict[str, tuple[Callable, str]] = {
    "synth": (cmd_synth, "generate a synthetic random-walk dataset"),
    "preprocess": (cmd_preprocess, "validate, length-filter and re-serialize a dataset"),
    "build-grid": (cmd_build_grid, "grid + cell graph + skip-gram cell embeddings"),
    "pretrain": (cmd_pretrain, "contrastive pretraining of the encoder"),
    "embed": (cmd_embed, "embed a dataset into an embedding file"),
    "knn": (cmd_knn, "k nearest neighbors of query trajectories"),
    "measure": (cmd_measure, "pairwise heuristic distances"),
    "finetune": (cmd_finetune, "fine-tune an encoder to a heuristic measure"),
    "eval": (cmd_eval, "mean rank / HR / robustness sweeps"),
    "augment": (cmd_augment, "write augmented views of a dataset"),
}


# ------------------------------------------------------------------ parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="trajsim", description=__doc__.split("\n\n")[0],
                                epilog="Config overrides: --section.key=value (e.g. --encoder.d_t=64).")
    p.add_argument("--version", action="version", version=f"trajsim {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name: str, *specs: tuple[str, dict]) -> argparse.ArgumentParser:
        sp = sub.add_parser(name, help=COMMANDS[name][1])
        sp.add_argument("--config", help="YAML run config")
        sp.add_argument("--seed", type=int, help="top-level seed (overrides section seeds)")
        sp.add_argument("--log-level", default="WARNING")
        for flag, kw in specs:
            sp.add_argument(flag, **kw)
        return sp

    req = {"required": True}
    add("synth", ("--out", req), ("--n", {"type": int, "help": "number of trajectories"}))
    add("preprocess", ("--input", req), ("--out", req))
    add("build-grid", ("--input", req), ("--out", {"required": True, "help": "cell table (.emb)"}))
    add("pretrain", ("--input", req), ("--cells", req), ("--out-dir", req), ("--val", {}),
        ("--resume", {"help": "training checkpoint to continue from"}))
    add("embed", ("--model", req), ("--input", req), ("--out", req))
    add("knn", ("--store", req), ("--model", req), ("--queries", req), ("--out", req),
        ("--k", {"type": int}), ("--ivf", {"help": "IVF index file (loaded if present, else written)"}))
    add("measure", ("--input", req), ("--against", {}), ("--out", req))
    add("finetune", ("--model", req), ("--input", req), ("--out", req))
    add("eval", ("--model", req), ("--input", req), ("--out", req))
    add("augment", ("--input", req), ("--out", req))
    rp = sub.add_parser("rerun", help="replay a run from its manifest")
    rp.add_argument("manifest")
    rp.add_argument("--check", action="store_true", help="verify outputs match the manifest checksums")
    rp.add_argument("--log-level", default="WARNING")
    return p


_META = ("command", "config", "seed", "log_level")


def _split_overrides(argv: Sequence[str]) -> tuple[list[str], list[str]]:
    """Separate ``--a.b=v`` overrides from regular arguments."""
    plain, overrides = [], []
    for tok in argv:
        if tok.startswith("--") and "=" in tok and "." in tok.split("=", 1)[0]:
            overrides.append(tok)
        else:
            plain.append(tok)
    return plain, overrides


def _outputs_of(a: dict) -> list[Path]:
    outs = [Path(a["out"]).resolve()] if a.get("out") else []
    if a.get("out_dir"):
        d = Path(a["out_dir"]).resolve()
        outs += [d / n for n in ("encoder.ckpt", "best.ckpt", "last.ckpt")]
    return outs


def _guard_inputs(a: dict) -> None:
    outs = set(_outputs_of(a))
    for k in ("input", "cells", "val", "model", "store", "queries", "against", "resume"):
        if a.get(k) and Path(a[k]).resolve() in outs:
            raise UsageError(f"--{k.replace('_', '-')} and the output are the same file; inputs are never overwritten")


def execute(command: str, a: dict, cfg: RunConfig) -> dict:
    """Run one subcommand and write its manifest; returns the manifest."""
    _guard_inputs(a)
    fn = COMMANDS[command][0]
    if a.get("out_dir"):
        Path(a["out_dir"]).mkdir(parents=True, exist_ok=True)
    inputs, outputs, extra = fn(a, cfg)
    manifest = {
        "tool": "trajsim",
        "version": __version__,
        "command": command,
        "args": a,
        "config": cfg.to_dict(),
        "seed": cfg.effective_seed,
        "inputs": {str(p): sha256(p) for p in inputs},
        "outputs": {str(p): sha256(p) for p in outputs},
        **extra,
    }
    primary = Path(a["out_dir"]) / "pretrain" if a.get("out_dir") else Path(a["out"])
    mpath = primary.with_name(primary.name + ".manifest.json")
    mpath.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest


def _rerun(path: str, check: bool) -> int:
    m = json.loads(_need(path).read_text(encoding="utf-8"))
    try:
        command, a, cfg = m["command"], m["args"], from_dict(m["config"])
    except KeyError as e:
        raise CheckpointError(f"{path}: not a run manifest ({e})") from e
    if m.get("version") != __version__:
        raise CheckpointError(f"{path}: manifest from version {m.get('version')}, running {__version__}")
    for p, digest in m["inputs"].items():
        if sha256(_need(p)) != digest:
            raise DatasetError(f"input {p} changed since the recorded run")
    new = execute(command, a, cfg)
    if check:
        bad = [p for p, d in m["outputs"].items() if new["outputs"].get(p) != d]
        if bad:
            print("outputs differ: " + ", ".join(bad), file=sys.stderr)
            return EXIT_DATA
        print(f"reproduced {len(m['outputs'])} output(s) bit-for-bit")
    return EXIT_OK


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        plain, overrides = _split_overrides(argv)
        try:
            ns = parser.parse_args(plain)
        except SystemExit as e:
            return EXIT_OK if e.code == 0 else EXIT_CONFIG
        logging.basicConfig(level=getattr(logging, str(ns.log_level).upper(), logging.WARNING),
                            format="%(levelname)s %(name)s: %(message)s")
        if ns.command == "rerun":
            if overrides:
                raise UsageError("rerun takes no config overrides")
            return _rerun(ns.manifest, ns.check)
        a = {k: v for k, v in vars(ns).items() if k not in _META and v is not None}
        extra = []
        if ns.seed is not None:
            extra.append(f"--seed={ns.seed}")
        if ns.command == "synth" and a.pop("n", None) is not None:
            extra.append(f"--synth.n={ns.n}")
        if ns.config is not None:
            _need(ns.config)
        cfg = load_config(ns.config, list(overrides) + extra)
        execute(ns.command, a, cfg)
        return EXIT_OK
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as e:
        print(f"missing file: {e}", file=sys.stderr)
        return EXIT_MISSING
    except (CheckpointError, FormatError) as e:
        print(f"incompatible artifact: {e}", file=sys.stderr)
        return EXIT_INCOMPATIBLE
    except (DatasetError, EvalError, FinetuneError, GridError, EncoderError, aug.AugmentError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except Exception as e:  # noqa: BLE001 - last-resort categorization
        log.debug("unexpected failure", exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_UNEXPECTED


if __name__ == "__main__":
    sys.exit(main())

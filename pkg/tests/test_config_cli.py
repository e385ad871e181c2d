import json

import numpy as np
import pytest

from trajsim.cli import EXIT_CONFIG, EXIT_DATA, EXIT_INCOMPATIBLE, EXIT_MISSING, EXIT_OK, main
from trajsim.config import ConfigError, apply_overrides, dump_config, from_dict, load_config, parse_override
from trajsim.evaluate import EvalReport
from trajsim.geo import Trajectory, load_dataset, save_dataset
from trajsim.search import read_embeddings, write_embeddings

SMALL_YAML = """\
seed: 3
synth: {n: 60, min_pts: 20, max_pts: 40, width_m: 1500, height_m: 1500}
skipgram: {dim: 16, epochs: 1, walks_per_node: 2, walk_len: 20}
encoder: {d_t: 16, h: 2, h_s: 2, n_layers: 1, dropout: 0.0, l_max: 64}
train: {max_epochs: 1, batch_size: 8, queue_size: 16}
finetune: {epochs: 2, head_warmup: 5, pairs_per_anchor: 5}
eval: {n_queries: 5, db_size: 20, rho_s: [0.2], rho_d: [0.2], measure: hausdorff, hr_pool: 25}
"""


# ----------------------------------------------------------------- config


def test_defaults():
    cfg = load_config()
    assert cfg.encoder.d_t == 256 and cfg.train.temperature == 0.07 and cfg.effective_seed == 0


def test_file_and_overrides(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("encoder: {d_t: 64, h: 4}\ntrain: {max_epochs: 15}\n")
    cfg = load_config(p, ["--encoder.d_t=32", "--train.lr=0.01", "--seed=9"])
    assert cfg.encoder.d_t == 32 and cfg.encoder.h == 4
    assert cfg.train.lr == 0.01 and cfg.train.max_epochs == 15
    # the top-level seed propagates into seeded sections
    assert cfg.train.seed == 9 and cfg.synth.seed == 9


def test_unknown_keys_rejected(tmp_path):
    with pytest.raises(ConfigError, match="d_model"):
        from_dict({"encoder": {"d_model": 3}})
    with pytest.raises(ConfigError, match="optimizer"):
        from_dict({"optimizer": {}})
    with pytest.raises(ConfigError):
        load_config(None, ["--encoder.nope=1"])


def test_invalid_values_rejected():
    with pytest.raises(ConfigError):
        from_dict({"train": {"temperature": 0}})
    with pytest.raises(ConfigError):
        from_dict({"seed": -1})
    with pytest.raises(ConfigError):
        parse_override("--a.b.c=1")
    with pytest.raises(ConfigError):
        parse_override("encoder.d_t=1")


def test_override_parsing():
    assert parse_override("--eval.rho_s=[0.1, 0.2]") == (["eval", "rho_s"], [0.1, 0.2])
    d = apply_overrides({"train": {"lr": 1}}, ["--train.lr=2", "--seed=4"])
    assert d == {"train": {"lr": 2}, "seed": 4}
    assert from_dict(d).eval.rho_s == ()


def test_tuple_and_float_coercion():
    cfg = from_dict({"eval": {"rho_s": [0.1, 0.3]}, "train": {"lr": 1}})
    assert cfg.eval.rho_s == (0.1, 0.3) and isinstance(cfg.train.lr, float)


def test_dump_roundtrip():
    cfg = from_dict({"seed": 2, "encoder": {"d_t": 32}, "eval": {"rho_d": [0.1]}})
    import yaml

    assert from_dict(yaml.safe_load(dump_config(cfg))) == cfg


# ------------------------------------------------------------------- exit codes


def test_cli_usage_error():
    assert main([]) == EXIT_CONFIG
    assert main(["synth"]) == EXIT_CONFIG  # missing --out


def test_cli_config_error(tmp_path):
    assert main(["synth", "--out", str(tmp_path / "s.jsonl"), "--encoder.bogus=1"]) == EXIT_CONFIG


def test_cli_missing_file(tmp_path):
    assert main(["preprocess", "--input", str(tmp_path / "nope.jsonl"), "--out", str(tmp_path / "o")]) == EXIT_MISSING
    assert main(["synth", "--out", str(tmp_path / "s"), "--config", str(tmp_path / "none.yaml")]) == EXIT_MISSING


def test_cli_incompatible_checkpoint(tmp_path):
    save_dataset([Trajectory("a", [[0, 0], [1, 1]])], tmp_path / "d.jsonl")
    bad = tmp_path / "model.ckpt"
    bad.write_bytes(b"TSCKPT\0" + (99).to_bytes(2, "little") + bytes(8))
    rc = main(["embed", "--model", str(bad), "--input", str(tmp_path / "d.jsonl"), "--out", str(tmp_path / "e")])
    assert rc == EXIT_INCOMPATIBLE


def test_cli_exit_codes_distinct():
    assert len({EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_INCOMPATIBLE, EXIT_DATA}) == 5


def test_cli_refuses_to_overwrite_input(tmp_path):
    p = tmp_path / "d.jsonl"
    assert main(["synth", "--out", str(p), "--n", "5"]) == EXIT_OK
    before = p.read_bytes()
    assert main(["preprocess", "--input", str(p), "--out", str(p)]) == EXIT_CONFIG
    assert p.read_bytes() == before


def test_synth_twice_byte_identical(tmp_path):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    assert main(["synth", "--n", "50", "--seed", "1", "--out", str(a)]) == EXIT_OK
    assert main(["synth", "--n", "50", "--seed", "1", "--out", str(b)]) == EXIT_OK
    assert a.read_bytes() == b.read_bytes()
    m = json.loads((tmp_path / "a.jsonl.manifest.json").read_text())
    assert m["seed"] == 1 and m["config"]["synth"]["n"] == 50 and str(a) in m["outputs"]


# --------------------------------------------------------------- pipeline


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    d = tmp_path_factory.mktemp("pipe")
    cfgp = d / "run.yaml"
    cfgp.write_text(SMALL_YAML)
    c = ["--config", str(cfgp)]
    steps = [
        ["synth", "--out", str(d / "raw.jsonl")],
        ["preprocess", "--input", str(d / "raw.jsonl"), "--out", str(d / "clean.jsonl")],
        ["build-grid", "--input", str(d / "clean.jsonl"), "--out", str(d / "cells.emb")],
        ["pretrain", "--input", str(d / "clean.jsonl"), "--cells", str(d / "cells.emb"), "--out-dir", str(d / "run")],
        ["embed", "--model", str(d / "run" / "encoder.ckpt"), "--input", str(d / "clean.jsonl"),
         "--out", str(d / "store.emb")],
        ["eval", "--model", str(d / "run" / "encoder.ckpt"), "--input", str(d / "clean.jsonl"),
         "--out", str(d / "report.json")],
    ]
    for argv in steps:
        assert main(argv + c) == EXIT_OK, argv
    save_dataset(load_dataset(d / "clean.jsonl").trajectories[:3], d / "three.jsonl")
    return d, c


def test_pipeline_artifacts(pipeline):
    d, _ = pipeline
    ids, vecs = read_embeddings(d / "store.emb")
    assert len(ids) == 60 and vecs.shape == (60, 16)
    rep = EvalReport.from_json((d / "report.json").read_text())
    assert rep.mean_rank >= 1 and set(rep.sweeps) == {"downsample", "distort"}
    assert set(rep.hr_at_k) == {5, 20} and rep.r5_at_20 is not None
    assert rep.config["encoder"]["d_t"] == 16 and rep.seed == 3
    m = json.loads((d / "run" / "pretrain.manifest.json").read_text())
    assert str(d / "clean.jsonl") in m["inputs"] and len(m["outputs"]) == 3


def test_knn_clamped_on_three_item_store(pipeline, capsys):
    d, c = pipeline
    assert main(["embed", "--model", str(d / "run" / "encoder.ckpt"), "--input", str(d / "three.jsonl"),
                 "--out", str(d / "three.emb")] + c) == EXIT_OK
    assert main(["knn", "--store", str(d / "three.emb"), "--model", str(d / "run" / "encoder.ckpt"),
                 "--queries", str(d / "three.jsonl"), "--k", "3", "--out", str(d / "knn.json")] + c) == EXIT_OK
    assert "(k-clamped)" in capsys.readouterr().out
    doc = json.loads((d / "knn.json").read_text())
    for r in doc["results"]:
        assert r["clamped"] and len(r["neighbors"]) == 3
        assert r["neighbors"][0] == [r["id"], 0.0]


def test_knn_ivf_matches_flat(pipeline):
    d, c = pipeline
    common = ["--store", str(d / "store.emb"), "--model", str(d / "run" / "encoder.ckpt"),
              "--queries", str(d / "clean.jsonl"), "--k", "5"]
    assert main(["knn", *common, "--out", str(d / "flat.json")] + c) == EXIT_OK
    assert main(["knn", *common, "--out", str(d / "ivf.json"), "--ivf", str(d / "index.ivf"),
                 "--search.index=ivf", "--search.nprobe=8"] + c) == EXIT_OK
    flat = json.loads((d / "flat.json").read_text())["results"]
    ivf = json.loads((d / "ivf.json").read_text())["results"]
    assert flat == ivf and (d / "index.ivf").exists()


def test_measure_and_augment(pipeline):
    d, c = pipeline
    assert main(["measure", "--input", str(d / "three.jsonl"), "--out", str(d / "m.csv"),
                 "--measure.name=frechet_discrete"] + c) == EXIT_OK
    rows = (d / "m.csv").read_text().strip().splitlines()
    m = np.array([[float(x) for x in r.split(",")[1:]] for r in rows[1:]])
    assert m.shape == (3, 3) and np.allclose(np.diag(m), 0) and np.allclose(m, m.T)
    assert main(["augment", "--input", str(d / "three.jsonl"), "--out", str(d / "aug.jsonl"),
                 "--augment.method=mask", "--augment.rho_d=0.5"] + c) == EXIT_OK
    src = load_dataset(d / "three.jsonl").trajectories
    aug = load_dataset(d / "aug.jsonl").trajectories
    assert [len(t) for t in aug] == [len(t) // 2 for t in src]


def test_finetune_command(pipeline):
    d, c = pipeline
    assert main(["finetune", "--model", str(d / "run" / "encoder.ckpt"), "--input", str(d / "clean.jsonl"),
                 "--out", str(d / "ft.ckpt")] + c) == EXIT_OK
    m = json.loads((d / "ft.ckpt.manifest.json").read_text())
    assert {"pretrained", "finetuned", "train_mse"} <= set(m["metrics"])
    # the fine-tuned checkpoint is accepted wherever an encoder is
    assert main(["embed", "--model", str(d / "ft.ckpt"), "--input", str(d / "three.jsonl"),
                 "--out", str(d / "ft.emb")] + c) == EXIT_OK


def test_rerun_check_reproduces(pipeline):
    d, _ = pipeline
    for manifest in ("store.emb.manifest.json", "cells.emb.manifest.json", "run/pretrain.manifest.json",
                     "report.json.manifest.json"):
        assert main(["rerun", str(d / manifest), "--check"]) == EXIT_OK, manifest


def test_rerun_detects_changed_input(pipeline, tmp_path):
    d, c = pipeline
    src = tmp_path / "x.jsonl"
    assert main(["synth", "--n", "5", "--out", str(src)]) == EXIT_OK
    assert main(["preprocess", "--input", str(src), "--out", str(tmp_path / "y.jsonl")]) == EXIT_OK
    src.write_text(src.read_text().replace("syn000000", "changed"))
    assert main(["rerun", str(tmp_path / "y.jsonl.manifest.json")]) == EXIT_DATA


def test_embed_does_not_mutate_inputs(pipeline):
    d, c = pipeline
    before = {p: p.read_bytes() for p in (d / "run" / "encoder.ckpt", d / "clean.jsonl")}
    assert main(["embed", "--model", str(d / "run" / "encoder.ckpt"), "--input", str(d / "clean.jsonl"),
                 "--out", str(d / "again.emb")] + c) == EXIT_OK
    assert all(p.read_bytes() == b for p, b in before.items())
    assert (d / "again.emb").read_bytes() == (d / "store.emb").read_bytes()


def test_embedding_file_written_by_library_is_readable_by_cli(tmp_path):
    write_embeddings(tmp_path / "s.emb", ["a"], np.zeros((1, 2)))
    assert read_embeddings(tmp_path / "s.emb")[0] == ["a"]

import json

import pytest

from latentswitch.cli import load_config, read_records, sub_seed
from latentswitch.errors import ConfigError

from cliflow import CONFIG, build, full_pipeline, run, write_prompts, write_source


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    return build(tmp_path_factory.mktemp("ws"))


def _rows(path):
    return [ln.split("\t") for ln in path.read_text().splitlines()[2:]]


def test_sub_seed_is_stable_and_label_dependent():
    assert sub_seed(0, "a") == sub_seed(0, "a")
    assert len({sub_seed(0, "a"), sub_seed(0, "b"), sub_seed(1, "a")}) == 3
    assert 0 <= sub_seed(5, "x") < 2**64


def test_config_overrides_and_errors(tmp_path):
    ini = tmp_path / "c.ini"
    ini.write_text(CONFIG)
    cfg = load_config(str(ini), ["sampler.top_k=3", "run.log_hidden=yes"])
    assert cfg["sampler"]["top_k"] == 3 and cfg["run"]["log_hidden"] is True and cfg["run"]["seed"] == 11
    for bad in (["nope.x=1"], ["run.nope=1"], ["run.seed=abc"], ["runseed"]):
        with pytest.raises(ConfigError):
            load_config(None, bad)


def test_prep_outputs(tmp_path):
    src = write_source(tmp_path / "s.jsonl", 3)
    assert run("prep", src, "--out", tmp_path / "c.jsonl") == 0
    lines = (tmp_path / "c.jsonl").read_text().splitlines()
    assert len(lines) == 4 and "config" in json.loads(lines[0])
    stats = json.loads((tmp_path / "c.jsonl.stats.json").read_text())
    assert stats["count"] == 3 and stats["errors"] == 0 and "config" in stats


def test_prep_reports_bad_records(tmp_path, capsys):
    big = {"record_id": "huge", "problem": "1+1=", "intuition": "a" * 300, "short_cot": "2", "answer": "2"}
    src = write_source(tmp_path / "s.jsonl", 2, extra=[big])
    assert run("prep", src, "--out", tmp_path / "c.jsonl", "--set", "model.max_seq_len=64") == 3
    assert len(read_records(tmp_path / "c.jsonl")) == 2
    errs = read_records(tmp_path / "c.jsonl.errors.jsonl")
    assert [e["record_id"] for e in errs] == ["huge"]
    assert "huge" in capsys.readouterr().err


def test_prep_empty_source_fails(tmp_path):
    (tmp_path / "e.jsonl").write_text("")
    assert run("prep", tmp_path / "e.jsonl", "--out", tmp_path / "c.jsonl") != 0
    assert run("prep", tmp_path / "missing.jsonl", "--out", tmp_path / "c.jsonl") == 2


def test_train_log_and_checkpoints(ws):
    rows = _rows(ws["train"] / "loss_log.tsv")
    # 6 records, batch 2, 2 epochs
    assert [int(r[0]) for r in rows] == list(range(1, 7))
    assert (ws["train"] / "step000000.manifest").exists() and (ws["train"] / "step000006.manifest").exists()
    header = (ws["train"] / "loss_log.tsv").read_text().splitlines()[1].split("\t")
    for col in ("step", "lr", "ce_total", "kl", "halt_raw", "gate_alpha", "halt_effective", "total"):
        assert col in header


def test_zero_epochs_writes_initial_checkpoint(ws, tmp_path):
    out = tmp_path / "t0"
    assert run("train", ws["corpus"], "--config", ws["config"], "--init", ws["init"], "--out", out,
               "--set", "train.epochs=0") == 0
    assert (out / "step000000.manifest").exists()
    assert _rows(out / "loss_log.tsv") == []


def test_resume_matches_uninterrupted_run(tmp_path):
    src = write_source(tmp_path / "s.jsonl", 8, seed=3)
    ini = tmp_path / "r.ini"
    ini.write_text(CONFIG.replace("epochs = 2", "epochs = 15"))
    cfg = ("--config", ini)
    assert run("init", *cfg, "--out", tmp_path / "init") == 0
    assert run("prep", src, *cfg, "--out", tmp_path / "c.jsonl") == 0
    assert run("train", tmp_path / "c.jsonl", *cfg, "--init", tmp_path / "init", "--out", tmp_path / "full") == 0
    assert run("train", tmp_path / "c.jsonl", *cfg, "--init", tmp_path / "init", "--out", tmp_path / "cut",
               "--set", "train.stop_after_steps=50") == 0
    assert len(_rows(tmp_path / "cut" / "loss_log.tsv")) == 50
    assert run("train", tmp_path / "c.jsonl", *cfg, "--out", tmp_path / "cut", "--resume") == 0
    full, cut = _rows(tmp_path / "full" / "loss_log.tsv"), _rows(tmp_path / "cut" / "loss_log.tsv")
    assert len(full) == len(cut) == 60
    for a, b in zip(full[50:], cut[50:]):
        assert a[0] == b[0]
        for x, y in zip(a[1:], b[1:]):
            assert abs(float(x) - float(y)) <= 1e-6 * max(1.0, abs(float(x)))


def test_generate_order_and_pairing(ws, tmp_path):
    out = tmp_path / "g.jsonl"
    assert run("generate", "--config", ws["config"], "--model", ws["model"], "--prompts", ws["prompts"],
               "--out", out, "--mode", "paired", "--set", "switch.mode=fixed", "--set", "switch.fixed_steps=0") == 0
    recs = read_records(out)
    assert [r["index"] for r in recs] == list(range(10))
    ids = [json.loads(ln)["id"] for ln in ws["prompts"].read_text().splitlines()]
    assert [r["id"] for r in recs] == ids
    for r in recs:
        assert r["cot"]["trace"]["explicit_token_ids"] == r["latent"]["trace"]["explicit_token_ids"]
        assert r["latent"]["trace"]["switch_step"] == 0
        assert r["cot"]["duration_s"] is None
        assert isinstance(r["cot"]["correct"], bool)


def test_generate_capacity_error_recorded(ws, tmp_path):
    prompts = tmp_path / "p.jsonl"
    prompts.write_text(json.dumps({"prompt": "1" * 90}) + "\n" + json.dumps({"prompt": "1+1="}) + "\n")
    out = tmp_path / "g.jsonl"
    assert run("generate", "--config", ws["config"], "--model", ws["model"], "--prompts", prompts, "--out", out) == 0
    recs = read_records(out)
    assert recs[0]["error"]["type"] == "CapacityError" and "trace" in recs[1]


def test_analyze_requirements(ws, tmp_path):
    out = tmp_path / "g.jsonl"
    assert run("generate", "--config", ws["config"], "--model", ws["model"], "--prompts", ws["prompts"],
               "--out", out) == 0
    assert run("analyze", "fig3", out, "--out", tmp_path / "f3.tsv") == 2
    assert run("analyze", "fig4", out, "--out", tmp_path / "f4.tsv") == 2
    assert run("analyze", "fig7", out, "--out", tmp_path / "f7.tsv") == 0
    assert (tmp_path / "f7.tsv").read_text().startswith("# config = ")
    hid = tmp_path / "h.jsonl"
    assert run("generate", "--config", ws["config"], "--model", ws["model"], "--prompts", ws["prompts"],
               "--out", hid, "--log-hidden") == 0
    assert run("analyze", "fig4", hid, "--out", tmp_path / "f4.tsv", "-k", 3) == 0
    var = (tmp_path / "f4.tsv.variance.tsv").read_text().splitlines()
    assert len(var) == 2 + 3


def test_exit_codes(ws, tmp_path):
    assert run("generate", "--model", tmp_path / "none", "--prompts", ws["prompts"], "--out", tmp_path / "x") == 2
    assert run("generate", "--model", ws["model"], "--prompts", ws["prompts"], "--out", tmp_path / "x",
               "--set", "sampler.temperature=0") == 6
    assert run("generate", "--model", ws["model"], "--prompts", ws["prompts"], "--out", tmp_path / "x",
               "--set", "bogus.key=1") == 6
    bad = tmp_path / "bad.jsonl"
    bad.write_text("{not json\n")
    assert run("generate", "--model", ws["model"], "--prompts", bad, "--out", tmp_path / "x") == 3
    assert run("train", ws["corpus"], "--out", tmp_path / "t") == 2


def test_every_command_is_byte_identical_on_rerun(tmp_path):
    a = full_pipeline(tmp_path / "a")
    b = full_pipeline(tmp_path / "b")
    assert a.keys() == b.keys() and len(a) > 20
    # paths inside artifacts are not echoed, so bytes compare directly
    assert [k for k in a if a[k] != b[k]] == []


def test_prompt_seeds_are_per_index(ws, tmp_path):
    p = write_prompts(tmp_path / "p.jsonl", 3)
    out = tmp_path / "g.jsonl"
    assert run("generate", "--config", ws["config"], "--model", ws["model"], "--prompts", p, "--out", out,
               "--workers", 1) == 0
    recs = read_records(out)
    assert [r["seed"] for r in recs] == [sub_seed(11, f"sample/{i}") for i in range(3)]

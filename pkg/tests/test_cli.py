import json
import subprocess
import sys

from embrec import cli

SMALL = ["corpus.n_users=80", "corpus.n_items=300", "corpus.n_latent_interests=4",
         "D=8", "D_text=8", "D_category=4", "L=1", "H=16", "negatives_per_positive=10", "batch_size=16",
         "hyper.epochs=2", "K=10", "M=3", "candidate_min_clicks=1", "val_pool_size=100",
         "experiment.skip_minutes=0,10", "experiment.missing_windows=0,10"]


def _run(capsys, *argv, work=None, small=True):
    args = list(argv)
    if work is not None:
        args += ["--workdir", str(work)]
    if small:
        for kv in SMALL:
            args += ["--set", kv]
    code = cli.main(args)
    out, err = capsys.readouterr()
    return code, out, err


def _last_json(out):
    return json.loads(out.strip().splitlines()[-1])


def test_bad_config_exits_2(tmp_path, capsys):
    p = tmp_path / "bad.conf"
    p.write_text("hyper.nonsense = 1\n")
    code, _, err = _run(capsys, "synth", "--config", str(p), work=tmp_path, small=False)
    assert code == 2 and "nonsense" in err
    code, _, _ = _run(capsys, "synth", "--set", "tau=-1", work=tmp_path, small=False)
    assert code == 2
    code, _, _ = _run(capsys, "synth", "--config", str(tmp_path / "nope.conf"), work=tmp_path, small=False)
    assert code == 2


def test_missing_data_exits_3(tmp_path, capsys):
    for cmd in ("build-vocab", "train", "evaluate", "run-all"):
        code, _, err = _run(capsys, cmd, work=tmp_path / "empty")
        assert code == 3, (cmd, err)


def test_lookup_needs_user(tmp_path, capsys):
    code, _, _ = _run(capsys, "lookup", work=tmp_path)
    assert code == 2


def test_end_to_end_smoke(tmp_path, capsys):
    w = tmp_path / "w"
    code, out, _ = _run(capsys, "synth", "--seed", "3", work=w)
    assert code == 0 and _last_json(out)["items"] == 300
    synth_bytes = (w / "events.jsonl").read_bytes()
    assert _run(capsys, "synth", "--seed", "3", work=w)[0] == 0
    assert (w / "events.jsonl").read_bytes() == synth_bytes

    assert _run(capsys, "build-vocab", "--seed", "3", work=w)[0] == 0
    code, out, _ = _run(capsys, "train", "--seed", "3", work=w)
    assert code == 0 and (w / "model.ettw").exists() and (w / "training.png").exists()

    code, out, _ = _run(capsys, "evaluate", "--seed", "3", work=w)
    assert code == 0
    assert (w / "eval.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    rows = (w / "eval.tsv").read_text().splitlines()
    assert rows[0].split("\t") == ["k", "rvi", "model", "delta_pct"] and len(rows) > 1

    for cmd in ("embed-items", "embed-users", "build-index", "retrieve"):
        code, _, err = _run(capsys, cmd, "--seed", "3", work=w)
        assert code == 0, (cmd, err)
    staged = (w / "results.erst").read_bytes()

    code, out, _ = _run(capsys, "run-all", "--seed", "3", work=w)
    assert code == 0 and _last_json(out)["status"] == "ok"
    assert (w / "results.erst").read_bytes() == staged

    user = json.loads((w / "events.jsonl").read_text().splitlines()[0])["user_id"]
    code, out, _ = _run(capsys, "lookup", "--user", user, work=w)
    got = _last_json(out)
    assert code == 0 and got["status"] == "found" and 0 < len(got["items"]) <= 12

    code, out, _ = _run(capsys, "lookup", "--user", "no-such-user", work=w)
    assert code == 0 and _last_json(out)["status"] == "not_found"


def test_ablation_writes_table_and_figure(tmp_path, capsys):
    w = tmp_path / "w"
    assert _run(capsys, "synth", "--seed", "1", work=w)[0] == 0
    code, out, _ = _run(capsys, "ablation", "--seed", "1", work=w)
    assert code == 0
    assert (w / "ablation.png").stat().st_size > 0
    rows = (w / "ablation.tsv").read_text().splitlines()
    assert len(rows) == 1 + 2 * 2
    assert _last_json(out)["selected_skip_minutes"] in (0, 10)


def test_console_entry_point(tmp_path):
    # the installed module runs as a script too
    r = subprocess.run([sys.executable, "-m", "embrec.cli", "lookup", "--workdir", str(tmp_path)],
                       capture_output=True, text=True)
    assert r.returncode == 2

import subprocess
import sys

import pytest

from compact_nmt.adapt import OffsetSet, offset_param_count
from compact_nmt.cli import main
from compact_nmt.model import param_shapes
from compact_nmt.persistence import load_checkpoint, load_offsets, save_offsets


def kv_lines(text):
    rows = []
    for line in text.splitlines():
        parts = line.split()
        if parts and all("=" in p for p in parts):
            rows.append(dict(p.split("=", 1) for p in parts))
    return rows


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert main(["gen-data", "--out", str(data), "--vocab", "10", "--min-len", "2", "--max-len", "5",
                 "--n-baseline", "80", "--n-heldout", "8", "--n-adapt", "30", "--n-test", "12",
                 "--repeat", "0.3", "--seed", "1"]) == 0
    ckpt = root / "base.nmtb"
    assert main(["train-baseline", "--vocab-dir", str(data), "--corpus", str(data / "baseline"),
                 "--out", str(ckpt), "--d-model", "8", "--enc-layers", "2", "--dec-layers", "2",
                 "--enc-filter", "16", "--heads", "2", "--max-len", "16", "--epochs", "2",
                 "--batch-tokens", "200"]) == 0
    return root, data, ckpt


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr().out
    return code, out


def test_gen_data_files(workspace):
    _, data, _ = workspace
    for split in ("baseline", "heldout", "adapt", "test"):
        assert (data / f"{split}.src").exists() and (data / f"{split}.tgt").exists()
    assert len((data / "src.vocab").read_text().split()) == 10


def test_lasso_stores_less_than_full(workspace, capsys):
    root, data, ckpt = workspace
    common = ["adapt", "--checkpoint", ckpt, "--vocab-dir", data, "--adapt", data / "adapt",
              "--mode", "batch", "--epochs", "2", "--batch-tokens", "100"]
    code, out = run(capsys, *common, "--method", "full", "--out", root / "full.nmto")
    assert code == 0
    full = kv_lines(out)[-1]
    code, out = run(capsys, *common, "--method", "lasso", "--out", root / "lasso.nmto")
    assert code == 0
    lasso = kv_lines(out)[-1]
    assert int(lasso["stored_params"]) < int(full["stored_params"])

    code, out = run(capsys, "report-params", "--checkpoint", ckpt,
                    "--offsets", f"full={root / 'full.nmto'}", "--offsets", f"lasso={root / 'lasso.nmto'}",
                    "--vocab-dir", data, "--test", data / "test")
    assert code == 0
    rows = {r["label"]: r for r in kv_lines(out)}
    assert set(rows) == {"baseline", "full", "lasso"}
    for label in ("full", "lasso"):
        offsets = load_offsets(root / f"{label}.nmto")
        assert int(rows[label]["stored_params"]) == offset_param_count(offsets).total
        assert 0.0 <= float(rows[label]["bleu"]) <= 100.0
    assert "# param" in out


def test_incremental_is_deterministic(workspace, capsys):
    root, data, ckpt = workspace
    scores = []
    for k in range(2):
        hyp = root / f"incr{k}.txt"
        code, _ = run(capsys, "adapt", "--checkpoint", ckpt, "--vocab-dir", data, "--mode", "incremental",
                      "--test", data / "test", "--out", root / f"incr{k}.nmto", "--translations-out", hyp,
                      "--seed", "3")
        assert code == 0
        code, out = run(capsys, "evaluate", "--metric", "bleu", "--hyp", hyp, "--ref", data / "test.tgt")
        assert code == 0
        scores.append(kv_lines(out)[0]["score"])
    assert scores[0] == scores[1]
    assert (root / "incr0.txt").read_text() == (root / "incr1.txt").read_text()
    assert (root / "incr0.nmto").read_bytes() == (root / "incr1.nmto").read_bytes()


def test_combined_mode(workspace, capsys):
    root, data, ckpt = workspace
    code, out = run(capsys, "adapt", "--checkpoint", ckpt, "--vocab-dir", data, "--mode", "combined",
                    "--method", "sparse-output", "--adapt", data / "adapt", "--test", data / "test",
                    "--epochs", "1", "--out", root / "comb.nmto")
    assert code == 0
    assert load_offsets(root / "comb.nmto").nonzero() == ["Y_o"]


def test_fixed_method(workspace, capsys):
    root, data, ckpt = workspace
    dev = root / "dev.nmto"
    run(capsys, "adapt", "--checkpoint", ckpt, "--vocab-dir", data, "--adapt", data / "adapt",
        "--epochs", "1", "--out", dev)
    code, _ = run(capsys, "adapt", "--checkpoint", ckpt, "--vocab-dir", data, "--adapt", data / "adapt",
                  "--method", "fixed", "--fixed-from", dev, "--fixed-threshold", "0.0", "--epochs", "1",
                  "--out", root / "fixed.nmto")
    assert code == 0
    assert not {"X_e", "Y_e"} & set(load_offsets(root / "fixed.nmto").nonzero())


def test_zero_offsets_translate_like_baseline(workspace, capsys):
    root, data, ckpt = workspace
    ck = load_checkpoint(ckpt)
    zero = root / "zero.nmto"
    save_offsets(zero, OffsetSet.zeros(param_shapes(ck.config)), ck.checksum)
    a, b = root / "a.txt", root / "b.txt"
    assert run(capsys, "translate", "--checkpoint", ckpt, "--vocab-dir", data,
               "--input", data / "test.src", "--output", a)[0] == 0
    assert run(capsys, "translate", "--checkpoint", ckpt, "--vocab-dir", data, "--offsets", zero,
               "--input", data / "test.src", "--output", b)[0] == 0
    assert a.read_text() == b.read_text()


def test_evaluate_rr_and_ppl(workspace, capsys):
    _, data, ckpt = workspace
    code, out = run(capsys, "evaluate", "--metric", "rr", "--text", data / "test.src")
    assert code == 0 and 0 <= float(kv_lines(out)[0]["rate"]) <= 100
    code, out = run(capsys, "evaluate", "--metric", "ppl", "--checkpoint", ckpt, "--vocab-dir", data,
                    "--corpus", data / "heldout")
    assert code == 0 and float(kv_lines(out)[0]["perplexity"]) > 1.0


def test_mismatched_baseline_exit(workspace, capsys, tmp_path):
    root, data, ckpt = workspace
    ck = load_checkpoint(ckpt)
    alien = tmp_path / "alien.nmto"
    save_offsets(alien, OffsetSet.zeros(param_shapes(ck.config)), bytes(32))
    code = main(["translate", "--checkpoint", str(ckpt), "--vocab-dir", str(data), "--offsets", str(alien),
                 "--input", str(data / "test.src")])
    assert code == 1
    assert "different baseline" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [
    ["adapt", "--bogus"],
    ["nonsense"],
    ["evaluate", "--metric", "bleu"],
])
def test_usage_errors(argv):
    with pytest.raises(SystemExit) as exc:
        main(argv)
    assert exc.value.code == 2


def test_missing_file(capsys, tmp_path):
    assert main(["evaluate", "--metric", "rr", "--text", str(tmp_path / "missing.txt")]) == 2


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "compact_nmt", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    assert "report-params" in out.stdout

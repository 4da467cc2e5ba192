import subprocess
import sys

import numpy as np
import pytest

from docdiff import data
from docdiff.cli import main, read_config_file
from docdiff.data import load_image

TINY_CONFIG = """\
# small enough for unit tests
base_channels = 4
channel_multipliers = 1,2
time_embed_dim = 8
batch = 2
crop = 16
iters = 4
eval_every = 2
"""


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A tiny corpus and a 4-iteration checkpoint shared by the enhance tests."""
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.cfg").write_text(TINY_CONFIG)
    assert main(["synth", "--out", str(root / "corpus"), "--count", "6", "--size", "32", "--seed", "1"]) == 0
    assert main(["train", "--config", str(root / "tiny.cfg"), "--data", str(root / "corpus"),
                 "--out", str(root / "tiny.ddcp"), "--seed", "0"]) == 0
    return root


# synth -------------------------------------------------------------------

def test_synth_is_deterministic(tmp_path, capsys):
    for name in ("a", "b"):
        assert run(capsys, "synth", "--out", tmp_path / name, "--count", 4, "--seed", 7, "--size", 32)[0] == 0
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")
    assert len(tree_bytes(tmp_path / "a")) == 9


def test_synth_empty(tmp_path, capsys):
    assert run(capsys, "synth", "--out", tmp_path, "--count", 0)[0] == 0
    assert (tmp_path / "train" / "manifest.txt").read_text() == ""


def test_synth_watermark_opacity(tmp_path, capsys):
    assert run(capsys, "synth", "--out", tmp_path, "--count", 3, "--kind", "watermark",
               "--size", 48, "--seed", 2)[0] == 0
    split = tmp_path / "train"
    for line in (split / "manifest.txt").read_text().splitlines():
        index = int(line.split()[0])
        y = load_image(next(split.glob(f"{index:06d}.p?m")))
        gt = load_image(next(split.glob(f"{index:06d}_gt.p?m")))
        changed = np.any(np.abs(y - gt) > 1.5 / 255, axis=0)
        assert changed.any()
        # an opacity in [0.7, 0.95] keeps the page at least 70% visible
        ratio = np.abs(y - gt)[:, changed].max()
        assert ratio <= 0.3 + 1.5 / 255


def test_synth_rejects_bad_arguments(tmp_path, capsys):
    assert run(capsys, "synth", "--out", tmp_path, "--size", 16)[0] == 2
    assert run(capsys, "synth", "--out", tmp_path, "--kind", "smudge")[0] == 2
    blocker = tmp_path / "file"
    blocker.write_text("x")
    code, _, err = run(capsys, "synth", "--out", blocker / "sub", "--count", 1)
    assert code == 2 and "cannot write" in err


# schedule ----------------------------------------------------------------

def test_schedule_dump(capsys):
    code, out, _ = run(capsys, "schedule", "--T", 100, "--dump")
    rows = out.splitlines()
    assert code == 0 and rows[0] == "t,beta,alpha,alpha_bar"
    table = np.array([[float(v) for v in r.split(",")] for r in rows[1:]])
    assert table.shape == (101, 4)
    assert table[0, 3] == 1.0
    assert np.all(np.diff(table[:, 3]) < 0)
    assert table[-1, 3] == pytest.approx(0.364, abs=5e-4)
    assert "\r" not in out


def test_schedule_rejects_bad_ranges(capsys):
    assert run(capsys, "schedule", "--beta-start", 0.5, "--beta-end", 0.1)[0] == 2
    assert run(capsys, "schedule", "--T", 0)[0] == 2


# eval --------------------------------------------------------------------

@pytest.fixture()
def scored(tmp_path):
    for sub in ("pred", "gt"):
        (tmp_path / sub).mkdir()
    for i in range(3):
        gt = data.make_pair("blur", 0, i, 32)[1]
        data.save_image(gt, tmp_path / "gt" / f"{i}.pgm")
        data.save_image(gt, tmp_path / "pred" / f"{i}.pgm")
    return tmp_path


def test_eval_identical_dirs(scored, capsys):
    code, out, _ = run(capsys, "eval", "--pred", scored / "pred", "--gt", scored / "gt")
    rows = [r.split(",") for r in out.splitlines()]
    assert code == 0
    assert rows[0] == ["file", "psnr", "ssim", "fm", "pfm"]
    assert [r[0] for r in rows[1:]] == ["0.pgm", "1.pgm", "2.pgm", "mean"]
    for r in rows[1:]:
        assert float(r[1]) == 100.0 and float(r[3]) == 100.0 and float(r[4]) == 100.0


def test_eval_single_metric(scored, capsys):
    code, out, _ = run(capsys, "eval", "--pred", scored / "pred", "--gt", scored / "gt", "--metrics", "psnr")
    assert code == 0 and all(len(r.split(",")) == 2 for r in out.splitlines())


def test_eval_otsu_threshold(scored, capsys):
    code, out, _ = run(capsys, "eval", "--pred", scored / "pred", "--gt", scored / "gt",
                       "--metrics", "fm", "--threshold", "otsu")
    assert code == 0 and out.splitlines()[-1] == "mean,100.000000"


def test_eval_missing_counterpart(scored, capsys):
    (scored / "gt" / "1.pgm").unlink()
    code, _, err = run(capsys, "eval", "--pred", scored / "pred", "--gt", scored / "gt")
    assert code == 2 and "1.pgm" in err


def test_eval_empty_and_unknown(tmp_path, capsys):
    (tmp_path / "p").mkdir()
    (tmp_path / "g").mkdir()
    assert run(capsys, "eval", "--pred", tmp_path / "p", "--gt", tmp_path / "g")[0] == 2
    assert run(capsys, "eval", "--pred", tmp_path / "p", "--gt", tmp_path / "g", "--metrics", "lpips")[0] == 2


# train -------------------------------------------------------------------

def test_train_outputs(workspace):
    log = (workspace / "tiny.csv").read_text().splitlines()
    assert log[0] == "iter,L_pixel,L_low,L_DM,L_high,L_total"
    assert len(log) == 3
    assert (workspace / "tiny.ddcp").read_bytes()[:4] == b"DDCP"


def test_train_is_deterministic_and_resumable(workspace, tmp_path, capsys):
    cfg, corpus = workspace / "tiny.cfg", workspace / "corpus"
    assert run(capsys, "train", "--config", cfg, "--data", corpus, "--out", tmp_path / "again.ddcp")[0] == 0
    assert (tmp_path / "again.ddcp").read_bytes() == (workspace / "tiny.ddcp").read_bytes()
    assert (tmp_path / "again.csv").read_bytes() == (workspace / "tiny.csv").read_bytes()

    assert run(capsys, "train", "--config", cfg, "--data", corpus, "--out", tmp_path / "half.ddcp",
               "--iters", 2)[0] == 0
    assert run(capsys, "train", "--data", corpus, "--resume", tmp_path / "half.ddcp",
               "--out", tmp_path / "resumed.ddcp", "--iters", 4)[0] == 0
    assert (tmp_path / "resumed.ddcp").read_bytes() == (workspace / "tiny.ddcp").read_bytes()


def test_train_ablation_flags(workspace, tmp_path, capsys):
    for flag in ("--no-freqsep", "--predict-eps", "--detach-target"):
        out = tmp_path / f"{flag[2:]}.ddcp"
        assert run(capsys, "train", "--config", workspace / "tiny.cfg", "--data", workspace / "corpus",
                   "--out", out, flag)[0] == 0
    rows = (tmp_path / "no-freqsep.csv").read_text().splitlines()[1:]
    assert all(float(r.split(",")[2]) == 0.0 and float(r.split(",")[4]) == 0.0 for r in rows)


def test_train_logs_resolved_config(workspace, tmp_path, capsys):
    code, _, err = run(capsys, "-v", "train", "--config", workspace / "tiny.cfg", "--data",
                       workspace / "corpus", "--out", tmp_path / "x.ddcp", "--iters", 1)
    assert code == 0 and "config base_channels=4" in err and "config lr=" in err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")  # lr=1e30 overflows on purpose
def test_train_errors(workspace, tmp_path, capsys):
    assert run(capsys, "train", "--data", tmp_path / "nowhere", "--out", tmp_path / "x.ddcp")[0] == 2
    (tmp_path / "typo.cfg").write_text("learning_rate = 1\n")
    code, _, err = run(capsys, "train", "--config", tmp_path / "typo.cfg", "--data", workspace / "corpus",
                       "--out", tmp_path / "x.ddcp")
    assert code == 2 and "learning_rate" in err
    (tmp_path / "hot.cfg").write_text(TINY_CONFIG + "lr = 1e30\n")
    assert run(capsys, "train", "--config", tmp_path / "hot.cfg", "--data", workspace / "corpus",
               "--out", tmp_path / "x.ddcp")[0] == 3


def test_config_file_syntax(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("a = 1  # trailing\n\n# only a comment\nb=two words\n")
    assert read_config_file(path) == {"a": "1", "b": "two words"}
    path.write_text("no equals sign\n")
    with pytest.raises(Exception, match="c.cfg:1"):
        read_config_file(path)


# enhance -----------------------------------------------------------------

def page(path, h, w, seed=0):
    data.save_image(np.random.default_rng(seed).random((1, h, w)).astype(np.float32), path)
    return path


def test_enhance_same_seed_same_file(workspace, tmp_path, capsys):
    src = page(tmp_path / "in.pgm", 40, 36)
    for name in ("a", "b"):
        assert run(capsys, "enhance", "--ckpt", workspace / "tiny.ddcp", "--in", src,
                   "--out", tmp_path / f"{name}.pgm", "--seed", 3)[0] == 0
    assert (tmp_path / "a.pgm").read_bytes() == (tmp_path / "b.pgm").read_bytes()


def test_enhance_native_keeps_shape(workspace, tmp_path, capsys):
    src = page(tmp_path / "in.pgm", 517, 331)
    assert run(capsys, "enhance", "--ckpt", workspace / "tiny.ddcp", "--in", src, "--out",
               tmp_path / "out.pgm", "--mode", "native", "--steps", 1)[0] == 0
    assert load_image(tmp_path / "out.pgm").shape == (1, 517, 331)


@pytest.mark.parametrize("steps", [5, 100])
def test_enhance_step_grid_on_300_square(workspace, tmp_path, capsys, steps):
    src = page(tmp_path / "in.pgm", 300, 300)
    assert run(capsys, "enhance", "--ckpt", workspace / "tiny.ddcp", "--in", src, "--out",
               tmp_path / "out.pgm", "--steps", steps)[0] == 0
    assert load_image(tmp_path / "out.pgm").shape == (1, 300, 300)


def test_enhance_refine_only_and_no_ema(workspace, tmp_path, capsys):
    src = page(tmp_path / "in.pgm", 32, 32)
    for flags in (["--refine-only"], ["--no-ema"]):
        assert run(capsys, "enhance", "--ckpt", workspace / "tiny.ddcp", "--in", src,
                   "--out", tmp_path / "o.pgm", *flags)[0] == 0


def test_enhance_errors(workspace, tmp_path, capsys):
    src = page(tmp_path / "in.pgm", 32, 32)
    (tmp_path / "bad.ddcp").write_bytes(b"garbage!")
    code, _, err = run(capsys, "enhance", "--ckpt", tmp_path / "bad.ddcp", "--in", src, "--out", tmp_path / "o.pgm")
    assert code == 2 and "bad checkpoint" in err
    assert run(capsys, "enhance", "--ckpt", workspace / "tiny.ddcp", "--in", src, "--out",
               tmp_path / "o.pgm", "--steps", 0)[0] == 2
    assert run(capsys, "enhance", "--ckpt", workspace / "tiny.ddcp", "--in", tmp_path / "none.pgm",
               "--out", tmp_path / "o.pgm")[0] == 2


def test_seed_defaults_from_environment(workspace, tmp_path, capsys, monkeypatch):
    src = page(tmp_path / "in.pgm", 32, 32)
    monkeypatch.setenv("DOCDIFF_SEED", "11")
    assert run(capsys, "enhance", "--ckpt", workspace / "tiny.ddcp", "--in", src, "--out", tmp_path / "env.pgm")[0] == 0
    assert run(capsys, "enhance", "--ckpt", workspace / "tiny.ddcp", "--in", src, "--out", tmp_path / "flag.pgm",
               "--seed", 11)[0] == 0
    assert (tmp_path / "env.pgm").read_bytes() == (tmp_path / "flag.pgm").read_bytes()
    monkeypatch.setenv("DOCDIFF_SEED", "eleven")
    assert run(capsys, "enhance", "--ckpt", workspace / "tiny.ddcp", "--in", src, "--out", tmp_path / "x.pgm")[0] == 2


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "docdiff", "schedule"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.startswith("T=100 alpha_bar[T]=0.36356")
    proc = subprocess.run([sys.executable, "-m", "docdiff", "frobnicate"], capture_output=True, text=True)
    assert proc.returncode == 2

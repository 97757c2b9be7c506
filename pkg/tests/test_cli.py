"""End-to-end coverage of the command-line surface.

A module-scoped workspace chains the real subcommands the way a user would:
gen-data, pretrain, then the consumers.  Parse and error-path tests call
main() in process to keep the suite fast.
"""

import json
import os
import subprocess
import sys

import numpy as np
import pytest

from psmb.cli import SCHEMA, _cap_threads, main


def run_cli(args, cwd, env_extra=None):
    env = dict(os.environ)
    if env_extra:
        env.update(env_extra)
    return subprocess.run([sys.executable, "-m", "psmb.cli", *args],
                          cwd=cwd, env=env, capture_output=True, text=True,
                          timeout=300)


TINY_TOML = """\
[encoder]
depth = 2
d = 16
n = 4
patch_size = 4

[views]
n_global = 2
n_mid = 2
n_local = 2

[views.res]
G = 16
M = 12
L = 8

[distill]
n_prototypes = 32

[optim]
epochs = 1
batch_size = 10
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Real CLI chain: gen-data --quick, tiny-config pretrain."""
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.toml").write_text(TINY_TOML)
    gen = run_cli(["gen-data", "--out", "ws", "--quick", "--seed", "1"], root)
    assert gen.returncode == 0, gen.stderr
    pre = run_cli(["pretrain", "--config", "tiny.toml", "--seed", "3",
                   "--out", "ws"], root)
    assert pre.returncode == 0, pre.stderr
    return root


class TestArtifacts:
    def test_gen_data_writes_dataset_and_prints_path(self, workspace):
        path = workspace / "ws" / "dataset.npz"
        assert path.exists()
        with np.load(path) as blob:
            assert blob["images"].shape[0] == 60

    def test_pretrain_writes_metrics_checkpoint_config(self, workspace):
        ws = workspace / "ws"
        assert (ws / "final.psmb").exists()
        assert (ws / "config.toml").exists()
        lines = (ws / "metrics.jsonl").read_text().splitlines()
        assert lines
        rec = json.loads(lines[-1])
        # 60 images / batch 10 * 1 epoch = 6 steps, recorded 0-indexed
        assert rec["step"] == 5
        assert np.isfinite(rec["total_loss"])

    def test_probe_prints_accuracy(self, workspace):
        out = run_cli(["probe", "--checkpoint", "ws/final.psmb"], workspace)
        assert out.returncode == 0, out.stderr
        acc = float(out.stdout.strip())
        assert 0.0 <= acc <= 1.0

    def test_export_writes_one_row_per_image(self, workspace):
        out = run_cli(["export", "--checkpoint", "ws/final.psmb"], workspace)
        assert out.returncode == 0, out.stderr
        rows = (workspace / "ws" / "embeddings.csv").read_text().splitlines()
        assert len(rows) == 61
        assert rows[0].startswith("image_id,label,f0,")

    def test_pretrain_rerun_metrics_identical_but_walltime(self, workspace):
        for d in ("rep1", "rep2"):
            out = run_cli(["gen-data", "--out", d, "--quick", "--seed", "1"],
                          workspace)
            assert out.returncode == 0
            out = run_cli(["pretrain", "--config", "tiny.toml", "--seed", "3",
                           "--out", d], workspace)
            assert out.returncode == 0, out.stderr

        ma = (workspace / "rep1" / "metrics.jsonl").read_bytes()
        mb = (workspace / "rep2" / "metrics.jsonl").read_bytes()
        assert ma == mb
        a = (workspace / "rep1" / "final.psmb").read_bytes()
        b = (workspace / "rep2" / "final.psmb").read_bytes()
        assert a == b


class TestSweeps:
    def test_ablate_views_csv(self, workspace):
        out = run_cli(["ablate", "--config", "tiny.toml", "--out", "ws",
                       "--sweep", "views", "--seed", "0"], workspace)
        assert out.returncode == 0, out.stderr
        rows = (workspace / "ws" / "ablation_views.csv").read_text().splitlines()
        assert rows[0] == "config,probe_acc,seed"
        assert [r.split(",")[0] for r in rows[1:]] == \
            ["global_only", "global_local", "global_mid", "full"]

    def test_ablate_positional_csv(self, workspace):
        out = run_cli(["ablate", "--config", "tiny.toml", "--out", "ws",
                       "--sweep", "positional", "--seed", "0"], workspace)
        assert out.returncode == 0, out.stderr
        rows = (workspace / "ws" /
                "ablation_positional.csv").read_text().splitlines()
        assert [r.split(",")[0] for r in rows[1:]] == \
            ["shared", "per_scale", "mpa"]

    def test_ablate_rejects_unknown_sweep(self, capsys):
        assert main(["ablate", "--sweep", "bogus"]) == 1
        assert "invalid choice" in capsys.readouterr().err


class TestDiagnostics:
    def test_invariants_quick_all_pass(self, workspace):
        out = run_cli(["invariants", "--quick"], workspace)
        assert out.returncode == 0, out.stdout
        lines = out.stdout.strip().splitlines()
        assert lines and all(ln.startswith("PASS ") for ln in lines)

    def test_bench_emits_csv_rows(self, workspace):
        out = run_cli(["bench", "--lengths", "64,128"], workspace)
        assert out.returncode == 0, out.stderr
        lines = out.stdout.strip().splitlines()
        assert lines[0] == "N,ms"
        ns = [int(ln.split(",")[0]) for ln in lines[1:]]
        assert ns == [64, 128]
        assert all(float(ln.split(",")[1]) > 0 for ln in lines[1:])

    def test_dump_transport_columns_stochastic(self, workspace):
        out = run_cli(["dump-transport", "--seed", "5", "--out", "ws"],
                      workspace)
        assert out.returncode == 0, out.stderr
        lines = (workspace / "ws" / "transport.txt").read_text().splitlines()
        n_g, n_s = map(int, lines[0].split())
        sums = np.zeros(n_s)
        for ln in lines[1:]:
            i, j, w = ln.split()
            assert 0 <= int(i) < n_g
            sums[int(j)] += float(w)
        assert np.abs(sums - 1.0).max() < 1e-8


class TestParsingAndExits:
    def test_no_subcommand_exits_1(self, capsys):
        assert main([]) == 1

    def test_unknown_flag_usage_and_exit_1(self, capsys):
        assert main(["pretrain", "--bogus"]) == 1
        assert "usage" in capsys.readouterr().err

    def test_help_exits_0(self, capsys):
        assert main(["--help"]) == 0
        assert "COMMAND" in capsys.readouterr().out

    def test_missing_config_exit_1_names_path(self, tmp_path, monkeypatch,
                                              capsys):
        monkeypatch.chdir(tmp_path)
        assert main(["pretrain", "--config", "absent.toml"]) == 1
        assert "absent.toml" in capsys.readouterr().err

    def test_missing_dataset_exit_1_suggests_gen_data(self, tmp_path,
                                                      monkeypatch, capsys):
        monkeypatch.chdir(tmp_path)
        assert main(["pretrain"]) == 1
        err = capsys.readouterr().err
        assert "dataset.npz" in err and "gen-data" in err

    def test_probe_without_checkpoint_flag_exit_1(self, capsys):
        assert main(["probe"]) == 1

    def test_corrupt_checkpoint_exit_1(self, tmp_path, monkeypatch, capsys):
        from psmb.config import TrainConfig, save_config
        monkeypatch.chdir(tmp_path)
        save_config(tmp_path / "config.toml", TrainConfig())
        (tmp_path / "final.psmb").write_bytes(b"PSMB\x00garbage")
        assert main(["probe", "--checkpoint", "final.psmb"]) == 1
        assert "not a checkpoint" in capsys.readouterr().err

    def test_failing_invariant_exit_2(self, monkeypatch, capsys):
        import psmb.invariants as inv

        def boom(quick):
            raise AssertionError("forced")

        monkeypatch.setattr(inv, "CHECKS", [("forced-failure", boom)])
        assert main(["invariants", "--quick"]) == 2
        assert "FAIL forced-failure: forced" in capsys.readouterr().out

    def test_bad_lengths_exit_1(self, capsys):
        assert main(["bench", "--lengths", "12,abc"]) == 1

    def test_help_covers_every_flag(self):
        for command, flags in SCHEMA.items():
            out = run_cli([command, "--help"], os.getcwd())
            assert out.returncode == 0
            flat = " ".join(out.stdout.split())
            for flag, doc in flags.items():
                assert flag in flat, (command, flag)
                assert " ".join(doc.split()) in flat, (command, flag)

    def test_psmb_threads_caps_blas_pools(self, monkeypatch):
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS", "NUMBA_NUM_THREADS"):
            monkeypatch.delenv(var, raising=False)
        monkeypatch.setenv("PSMB_THREADS", "2")
        _cap_threads()
        assert os.environ["OMP_NUM_THREADS"] == "2"
        assert os.environ["NUMBA_NUM_THREADS"] == "2"

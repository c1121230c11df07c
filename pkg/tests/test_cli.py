import json
import subprocess
import sys

import numpy as np
import pytest
from PIL import Image

from supermix.bench import BenchInstance, run_bench
from supermix.cli import main, read_csv
from supermix.config import RunConfig, load_config, parse_value
from supermix.errors import InvalidInputError
from supermix.optimizer import SuperMixConfig
from supermix.serialization import load_checkpoint, load_dataset
from supermix.viz import read_png_config

SMALL = ["--height", "16", "--width", "16", "--n-train", "160", "--n-test", "80", "--synth-seed", "3"]
TEACHER = ["--teacher-arch", "mlp", "--teacher-hidden", "32", "--teacher-epochs", "15",
           "--teacher-milestones", "10"]


class TestConfig:
    def test_defaults(self):
        cfg = load_config()
        assert cfg == RunConfig()
        assert cfg.optimizer == "newton-sp" and cfg.kappa == 5

    def test_file_and_overrides(self, tmp_path):
        p = tmp_path / "run.cfg"
        p.write_text("# comment\nkappa = 2.5\nteacher_hidden = 64, 32\ndrop_unconverged = yes\nseed = 4\n")
        cfg = load_config(p, {"seed": "9"})
        assert cfg.kappa == 2.5 and cfg.teacher_hidden == (64, 32) and cfg.drop_unconverged
        assert cfg.seed == 9

    def test_unknown_key(self, tmp_path):
        p = tmp_path / "run.cfg"
        p.write_text("kapa = 2\n")
        with pytest.raises(InvalidInputError, match="kapa"):
            load_config(p)
        with pytest.raises(InvalidInputError):
            load_config(overrides={"nope": "1"})

    def test_bad_values(self):
        for key, text in (("kappa", "lots"), ("drop_unconverged", "maybe"), ("teacher_hidden", "a,b")):
            with pytest.raises(InvalidInputError):
                parse_value(key, text)
        for over in ({"kappa": "-1"}, {"mix_method": "mosaic"}, {"optimizer": "adam"}, {"repeats": "0"}):
            with pytest.raises(InvalidInputError):
                load_config(overrides=over)

    def test_text_round_trip(self, tmp_path):
        cfg = load_config(overrides={"teacher_filters": "4,6", "sigma": "0.5", "mixed": "x.smxd"})
        p = tmp_path / "echo.cfg"
        p.write_text(cfg.to_text())
        assert load_config(p) == cfg

    def test_optimizer_mapping(self):
        cfg = load_config(overrides={"optimizer": "sgd", "sgd_lr": "0.5", "k": "3"})
        smc = cfg.supermix_config()
        assert smc.method == "sgd" and smc.sgd_lr == 0.5 and smc.k == 3


class TestBench:
    def test_ratios_and_csv(self, small_data, small_teacher, rng):
        train, _ = small_data
        insts = [BenchInstance((i, i + 1), 100 + i) for i in range(0, 16, 2)]
        report = run_bench(train, small_teacher, SuperMixConfig(max_iters=30), rng, instances=insts)
        assert report.instances == 8 and [r.method for r in report.rows] == ["newton-sp", "newton", "sgd"]
        sp, sg = report.row("newton-sp"), report.row("sgd")
        assert sp.mean_iterations <= sg.mean_iterations
        text = report.to_csv('{"x": 1}')
        assert text.startswith('# config: {"x": 1}\n# environment: ')
        rows = {r["method"]: r for r in read_csv_text(text)}
        assert float(rows["newton-sp"]["speedup_vs_sgd"]) == sg.mean_seconds / sp.mean_seconds
        assert float(rows["sgd"]["iteration_ratio_vs_sgd"]) in (1.0,) or np.isnan(float(rows["sgd"]["iteration_ratio_vs_sgd"]))
        assert "instances" in report.table()

    def test_empty_method_list(self, small_data, small_teacher, rng):
        with pytest.raises(InvalidInputError):
            run_bench(small_data[0], small_teacher, SuperMixConfig(), rng, methods=[])

    def test_too_few_instances(self, small_data, small_teacher, rng):
        with pytest.raises(InvalidInputError):
            run_bench(small_data[0], small_teacher, SuperMixConfig(), rng, n_instances=10)


def read_csv_text(text):
    import csv
    return list(csv.DictReader([line for line in text.splitlines() if not line.startswith("#")]))


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out", str(d)] + SMALL) == 0
    data = ["--data", str(d / "train.smxd"), "--test-data", str(d / "test.smxd")]
    assert main(["train-teacher", "--out", str(d)] + data + TEACHER) == 0
    return d, data + ["--teacher", str(d / "teacher.ckpt")]


class TestCli:
    def test_synth_outputs(self, workdir):
        d, _ = workdir
        train = load_dataset(d / "train.smxd")
        assert len(train) == 160 and train.image_shape == (16, 16, 3)
        assert train.meta["config"]["n_train"] == 160

    def test_teacher_outputs(self, workdir):
        d, _ = workdir
        cfg, rows = read_csv(d / "teacher_metrics.csv")
        assert len(rows) == 15 and cfg["teacher_arch"] == "mlp"
        model, meta = load_checkpoint(d / "teacher.ckpt", with_meta=True)
        assert meta["metrics"]["test_acc"] >= 0.6

    def test_mix_stats(self, workdir, tmp_path):
        d, args = workdir
        out = tmp_path / "m"
        assert main(["mix", "--out", str(out), "--kappa", "0.625", "--panels", "2"] + args) == 0
        cfg, rows = read_csv(out / "mix_stats.csv")
        assert len(rows) == 100 and cfg["kappa"] == 0.625
        assert {"iterations", "converged", "elapsed_ms"} <= set(rows[0])
        ds = load_dataset(out / "mixed.smxd")
        assert len(ds) == 100 and ds.method == "supermix"
        assert np.array_equal([int(r["iterations"]) for r in rows], ds.iterations)
        png = out / "panels" / "mix_0000.png"
        assert Image.open(png).size[0] > 16
        assert json.loads(read_png_config(png))["kappa"] == 0.625

    def test_rerun_identical(self, workdir, tmp_path):
        _, args = workdir
        outs = []
        # same output directory, since the echoed config records it
        for _ in range(2):
            assert main(["mix", "--out", str(tmp_path), "--kappa", "0.2"] + args) == 0
            outs.append(((tmp_path / "mixed.smxd").read_bytes(), (tmp_path / "mix_stats.csv").read_text()))
        assert outs[0][0] == outs[1][0]
        strip = [[r.split(",")[:-1] for r in o[1].splitlines()[2:]] for o in outs]  # elapsed_ms varies
        assert strip[0] == strip[1]

    def test_mixup_differs_and_is_convex(self, workdir, tmp_path):
        d, args = workdir
        train = load_dataset(d / "train.smxd")
        res = {}
        for method in ("mixup", "supermix"):
            assert main(["mix", "--out", str(tmp_path / method), "--mix-method", method, "--kappa", "0.1"] + args) == 0
            _, rows = read_csv(tmp_path / method / "mix_stats.csv")
            ds = load_dataset(tmp_path / method / "mixed.smxd")
            for r, img in zip(rows, ds.images):
                src = train.images[[int(s) for s in r["sources"].split()]]
                assert np.all(img >= src.min(axis=0) - 1e-6) and np.all(img <= src.max(axis=0) + 1e-6)
            res[method] = ds.images
        assert not np.array_equal(res["mixup"], res["supermix"])

    def test_distill_repeats(self, workdir, tmp_path):
        d, args = workdir
        out = tmp_path / "s"
        assert main(["mix", "--out", str(out), "--mix-method", "cutmix", "--kappa", "1"] + args) == 0
        rc = main(["distill", "--out", str(out), "--mixed", str(out / "mixed.smxd"), "--repeats", "2",
                   "--student-epochs", "3", "--student-milestones", "2", "--student-hidden", "16"] + args)
        assert rc == 0
        _, trace = read_csv(out / "distill_trace_seed0.csv")
        assert len(trace) == 3
        _, summary = read_csv(out / "distill_summary.csv")
        assert [r["seed"] for r in summary] == ["0", "1", "mean", "std"]
        accs = [float(r["accuracy"]) for r in summary[:2]]
        assert float(summary[2]["accuracy"]) == float(np.mean(accs))
        assert (out / "student_seed1.ckpt").exists()

    def test_bench_command(self, workdir, tmp_path):
        _, args = workdir
        out = tmp_path / "b"
        assert main(["bench", "--out", str(out), "--bench-instances", "64", "--max-iters", "20",
                     "--bench-methods", "newton-sp,sgd"] + args) == 0
        cfg, rows = read_csv(out / "bench.csv")
        assert cfg["bench_instances"] == 64 and [r["method"] for r in rows] == ["newton-sp", "sgd"]
        assert "# environment:" in (out / "bench.csv").read_text()
        assert (out / "bench.txt").exists()

    def test_analyze_command(self, workdir, tmp_path):
        _, args = workdir
        out = tmp_path / "p"
        assert main(["analyze", "--out", str(out), "--analyze-samples", "40", "--panels", "1"] + args) == 0
        cfg, rows = read_csv(out / "profiles.csv")
        assert [r["dataset"] for r in rows] == ["original", "mixup", "cutmix", "supermix"]
        for r in rows:
            vals = [float(r[f"p{j}"]) for j in range(1, 5)]
            assert all(a >= b for a, b in zip(vals, vals[1:]))
            assert r["samples"] == "40"
        assert json.loads(read_png_config(out / "panels" / "supermix_0000.png"))["analyze_samples"] == 40
        assert Image.open(out / "profiles.png").info["Description"]

    def test_bad_flag_exit_1(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["mix", "--no-such-flag", "1"])
        assert exc.value.code == 1

    def test_bad_value_exit_1(self, workdir, tmp_path):
        _, args = workdir
        assert main(["mix", "--out", str(tmp_path), "--kappa", "x"] + args) == 1

    def test_missing_dataset_exit_1(self, tmp_path):
        rc = main(["train-teacher", "--out", str(tmp_path), "--data", str(tmp_path / "nope.smxd")])
        assert rc == 1 and not (tmp_path / "teacher.ckpt").exists()

    def test_missing_teacher_exit_1(self, workdir, tmp_path):
        d, _ = workdir
        assert main(["mix", "--out", str(tmp_path), "--data", str(d / "train.smxd")]) == 1

    def test_untrained_teacher_exit_1(self, workdir, tmp_path):
        d, args = workdir
        rc = main(["train-teacher", "--out", str(tmp_path), "--teacher-epochs", "0"] + args[:4] + TEACHER[:4])
        assert rc == 0
        rc = main(["mix", "--out", str(tmp_path / "m"), "--data", str(d / "train.smxd"),
                   "--teacher", str(tmp_path / "teacher.ckpt")])
        assert rc == 1 and not (tmp_path / "m" / "mixed.smxd").exists()

    def test_runtime_failure_exit_2(self, workdir, tmp_path):
        d, args = workdir
        # the output path is an existing file, so writing below it fails at run time
        blocker = tmp_path / "blocker"
        blocker.write_text("")
        assert main(["synth", "--out", str(blocker)] + SMALL) == 2

    def test_module_entry_point(self):
        r = subprocess.run([sys.executable, "-m", "supermix", "--help"], capture_output=True, text=True)
        assert r.returncode == 0 and "distill" in r.stdout

import csv
import io
import json
import os
import unittest
from contextlib import redirect_stderr, redirect_stdout
from tempfile import TemporaryDirectory

from hand_model import build_decomposition, build_default_template
from mlphand_cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, run_cli
from skeleton2mesh import init_s2m_model
from weight_container import load_weights, save_weights


def _run(argv):
    with redirect_stdout(io.StringIO()), redirect_stderr(io.StringIO()):
        return run_cli(argv)


def _read_csv(path):
    with open(path, newline="", encoding="utf-8") as handle:
        return list(csv.DictReader(handle))


class CliTestCase(unittest.TestCase):
    def setUp(self):
        self._tmp = TemporaryDirectory()
        self.tmp = self._tmp.name

    def tearDown(self):
        self._tmp.cleanup()

    def _small_weights(self):
        model = init_s2m_model(build_decomposition(build_default_template()), depth=2, hidden=16, seed=0)
        return save_weights(model, os.path.join(self.tmp, "s2m.s2mw"))


class UsageTest(CliTestCase):
    def test_unknown_subcommand(self):
        self.assertEqual(_run(["reticulate"]), EXIT_USAGE)

    def test_missing_required_flag(self):
        self.assertEqual(_run(["infer", "--output-dir", self.tmp]), EXIT_USAGE)

    def test_unknown_config_key(self):
        path = os.path.join(self.tmp, "run.json")
        with open(path, "w", encoding="utf-8") as handle:
            json.dump({"model": {"layers": 3}}, handle)
        self.assertEqual(_run(["ablate", "--config", path, "--output-dir", self.tmp]), EXIT_USAGE)

    def test_invalid_override(self):
        self.assertEqual(_run(["ablate", "--views", "1", "--output-dir", self.tmp]), EXIT_USAGE)

    def test_missing_weights_is_a_runtime_error_and_logged(self):
        code = _run(["eval", "--weights", os.path.join(self.tmp, "absent.s2mw"), "--output-dir", self.tmp])
        self.assertEqual(code, EXIT_RUNTIME)
        with open(os.path.join(self.tmp, ".logs", "errors.log"), encoding="utf-8") as handle:
            self.assertIn("eval failed", handle.read())


class AblateTest(CliTestCase):
    def test_parameter_table(self):
        self.assertEqual(_run(["ablate", "--output-dir", self.tmp]), EXIT_OK)
        rows = {row["name"]: row for row in _read_csv(os.path.join(self.tmp, "ablate.csv"))}
        self.assertEqual([rows[f"depth{d}"]["params_m"] for d in (2, 3, 4, 5)], ["0.30", "0.50", "0.70", "0.90"])
        self.assertEqual(rows["depth3"]["params"], "501904")
        self.assertEqual(rows["no_gsd"]["params"], "382764")
        self.assertEqual(rows["no_pe"]["params"], "414352")


class DataAndInferenceTest(CliTestCase):
    def test_gen_data_is_reproducible(self):
        first = os.path.join(self.tmp, "a")
        second = os.path.join(self.tmp, "b")
        for out in (first, second):
            argv = ["gen-data", "--count", "2", "--seed", "7", "--channels", "8", "--out", out, "--output-dir", self.tmp]
            self.assertEqual(_run(argv), EXIT_OK)
        for name in ("sample_000000.s2mw", "sample_000001.s2mw"):
            with open(os.path.join(first, name), "rb") as a, open(os.path.join(second, name), "rb") as b:
                self.assertEqual(a.read(), b.read())
        with open(os.path.join(first, "manifest.json"), encoding="utf-8") as handle:
            manifest = json.load(handle)
        self.assertEqual((manifest["seed"], manifest["count"], manifest["rendered"]), (7, 2, True))

    def test_infer_writes_obj_and_skeleton(self):
        weights = self._small_weights()
        prefix = os.path.join(self.tmp, "frame")
        argv = ["infer", "--weights", weights, "--index", "1", "--out", prefix, "--heatmap-png", "--output-dir", self.tmp]
        self.assertEqual(_run(argv), EXIT_OK)
        with open(f"{prefix}.obj", encoding="utf-8") as handle:
            lines = handle.read().splitlines()
        self.assertEqual(sum(line.startswith("v ") for line in lines), 685)
        self.assertEqual(sum(line.startswith("f ") for line in lines), 1320)
        with open(f"{prefix}_skeleton.json", encoding="utf-8") as handle:
            skeleton = json.load(handle)
        self.assertEqual(len(skeleton["joints"]), 21)
        self.assertEqual(len(skeleton["keypoints_2d"]), 4)
        self.assertTrue(os.path.exists(f"{prefix}_heatmaps.png"))

    def test_eval_and_sweep_write_tables(self):
        weights = self._small_weights()
        self.assertEqual(_run(["eval", "--weights", weights, "--count", "3", "--output-dir", self.tmp]), EXIT_OK)
        rows = _read_csv(os.path.join(self.tmp, "metrics.csv"))
        self.assertEqual(len(rows), 4)
        self.assertEqual(rows[-1]["sample"], "mean")
        per_bone = _read_csv(os.path.join(self.tmp, "per_bone.csv"))
        self.assertEqual(len(per_bone), 20)
        self.assertEqual((per_bone[0]["joints"], per_bone[0]["finger"]), ("0-1", "thumb"))

        argv = ["sweep", "--weights", weights, "--count", "3", "--sigma-sq", "0,5", "--output-dir", self.tmp]
        self.assertEqual(_run(argv), EXIT_OK)
        sweep = _read_csv(os.path.join(self.tmp, "sweep.csv"))
        self.assertEqual([row["sigma_sq"] for row in sweep], ["0.000000", "5.000000"])

    def test_train_s2m_writes_weights_and_curve(self):
        out = os.path.join(self.tmp, "trained.s2mw")
        argv = [
            "train-s2m", "--count", "6", "--epochs", "1", "--batch-size", "4", "--depth", "2",
            "--out", out, "--no-progress", "--output-dir", self.tmp,
        ]
        self.assertEqual(_run(argv), EXIT_OK)
        self.assertTrue(os.path.exists(out))
        self.assertEqual(len(_read_csv(os.path.join(self.tmp, "stage1_curve.csv"))), 1)

    def test_train_full_sizes_infuser_from_dataset(self):
        data = os.path.join(self.tmp, "data")
        argv = [
            "gen-data", "--count", "6", "--views", "3", "--channels", "8", "--seed", "3",
            "--out", data, "--output-dir", self.tmp,
        ]
        self.assertEqual(_run(argv), EXIT_OK)
        out = os.path.join(self.tmp, "mgfp.s2mw")
        argv = [
            "train-full", "--weights", self._small_weights(), "--dataset", data, "--epochs", "1",
            "--batch-size", "2", "--out", out, "--no-progress", "--output-dir", self.tmp,
        ]
        self.assertEqual(_run(argv), EXIT_OK)
        model = load_weights(out, kind="mgfp")
        self.assertEqual((model.n_views, model.channels), (3, 8))


if __name__ == "__main__":
    unittest.main()

import json
import os
import unittest
from tempfile import TemporaryDirectory
from unittest import mock

from run_config import (
    ConfigError,
    RunConfig,
    apply_overrides,
    config_from_dict,
    config_hash,
    load_config,
    save_config,
)
from runtime_paths import get_thread_count


class RunConfigTest(unittest.TestCase):
    def test_defaults(self):
        config = RunConfig()
        self.assertEqual(config.rig.n_views, 4)
        self.assertEqual(config.model.depth, 3)
        self.assertEqual(config.train.batch_size, 32)
        self.assertEqual(config.loss.heatmap, 10.0)
        self.assertEqual(config.synthesis.readout, "log")

    def test_unknown_key_is_rejected_with_its_path(self):
        with self.assertRaises(ConfigError) as ctx:
            config_from_dict({"model": {"widht": 3}})
        self.assertIn("model.widht", str(ctx.exception))

    def test_wrong_types_are_rejected(self):
        with self.assertRaises(ConfigError):
            config_from_dict({"rig": {"n_views": "four"}})
        with self.assertRaises(ConfigError):
            config_from_dict({"model": {"use_gsd": 1}})
        with self.assertRaises(ConfigError):
            config_from_dict({"model": {"depth": 2.5}})

    def test_validation(self):
        with self.assertRaises(ConfigError):
            config_from_dict({"rig": {"n_views": 1}})
        with self.assertRaises(ConfigError):
            config_from_dict({"model": {"depth": 6}})
        with self.assertRaises(ConfigError):
            config_from_dict({"model": {"per_bone_sharing": False}})
        with self.assertRaises(ConfigError):
            config_from_dict({"loss": {"vertex_2d": -1.0}})

    def test_overrides_skip_none_and_coerce(self):
        config = apply_overrides(RunConfig(), {"rig.n_views": 8, "model.depth": None, "synthesis.peak_jitter_px": 2})
        self.assertEqual(config.rig.n_views, 8)
        self.assertEqual(config.model.depth, 3)
        self.assertEqual(config.synthesis.peak_jitter_px, 2.0)
        self.assertIsInstance(config.synthesis.peak_jitter_px, float)

    def test_hash_tracks_content(self):
        base = config_hash(RunConfig())
        self.assertEqual(base, config_hash(RunConfig()))
        self.assertNotEqual(base, config_hash(apply_overrides(RunConfig(), {"seed": 1})))

    def test_save_then_load(self):
        with TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "run.json")
            config = apply_overrides(RunConfig(), {"rig.arc_deg": 90.0, "train.stage1_epochs": 5})
            save_config(config, path)
            self.assertEqual(load_config(path), config)

    def test_missing_default_file_gives_defaults(self):
        with TemporaryDirectory() as tmp, mock.patch("os.getcwd", return_value=tmp):
            self.assertEqual(load_config(), RunConfig())

    def test_explicit_missing_file_and_bad_json_fail(self):
        with TemporaryDirectory() as tmp:
            with self.assertRaises(ConfigError):
                load_config(os.path.join(tmp, "absent.json"))
            broken = os.path.join(tmp, "broken.json")
            with open(broken, "w", encoding="utf-8") as handle:
                handle.write("{not json")
            with self.assertRaises(ConfigError):
                load_config(broken)

    def test_partial_file_keeps_other_defaults(self):
        with TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "run.json")
            with open(path, "w", encoding="utf-8") as handle:
                json.dump({"seed": 9, "synthesis": {"heatmap_sigma_px": 3.0}}, handle)
            config = load_config(path)
            self.assertEqual(config.seed, 9)
            self.assertEqual(config.synthesis.heatmap_sigma_px, 3.0)
            self.assertEqual(config.synthesis.heatmap_size, 64)


class ThreadCountTest(unittest.TestCase):
    def test_env_override(self):
        with mock.patch.dict(os.environ, {"S2M_THREADS": "3"}):
            self.assertEqual(get_thread_count(), 3)

    def test_garbage_means_auto(self):
        with mock.patch.dict(os.environ, {"S2M_THREADS": "many"}), mock.patch("os.cpu_count", return_value=6):
            self.assertEqual(get_thread_count(), 6)


if __name__ == "__main__":
    unittest.main()

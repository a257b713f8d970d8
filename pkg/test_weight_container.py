import json
import os
import unittest
from tempfile import TemporaryDirectory

import numpy as np

from hand_model import build_decomposition, build_default_template
from hand_synthesis import generate_dataset, synthesize_sample
from mgfp_fusion import MGFPModel, init_mgfp
from run_config import RigConfig, SynthesisConfig
from skeleton2mesh import PEConfig, init_s2m_model
from weight_container import (
    DATASET_MANIFEST,
    WeightLoadError,
    load_dataset,
    load_sample,
    load_template,
    load_weights,
    read_container,
    read_dataset_manifest,
    save_sample,
    save_template,
    save_weights,
    write_container,
    write_dataset,
)


class WeightContainerTestCase(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.template = build_default_template()
        cls.spec = build_decomposition(cls.template)

    def setUp(self):
        self._tmp = TemporaryDirectory()
        self.tmp = self._tmp.name

    def tearDown(self):
        self._tmp.cleanup()


class ContainerFormatTest(WeightContainerTestCase):
    def test_round_trip_of_mixed_dtypes(self):
        path = os.path.join(self.tmp, "mixed.s2mw")
        write_container(
            path,
            "test",
            [("a", np.arange(6, dtype=np.float64).reshape(2, 3), "f64"), ("b", np.array([1, -2, 3]), "i32")],
            {"note": "x"},
        )
        kind, metadata, tensors = read_container(path)
        self.assertEqual((kind, metadata), ("test", {"note": "x"}))
        np.testing.assert_array_equal(tensors["a"], np.arange(6).reshape(2, 3))
        self.assertEqual(tensors["b"].dtype, np.int64)
        self.assertFalse(os.path.exists(f"{path}.tmp"))

    def test_bad_magic(self):
        path = os.path.join(self.tmp, "bad.s2mw")
        with open(path, "wb") as handle:
            handle.write(b"NOPE" + bytes(16))
        with self.assertRaises(WeightLoadError) as ctx:
            read_container(path)
        self.assertEqual(ctx.exception.field, "magic")

    def test_truncated_payload_names_the_tensor(self):
        path = os.path.join(self.tmp, "short.s2mw")
        write_container(path, "test", [("first", np.ones(4), "f32"), ("second", np.ones(8), "f32")])
        with open(path, "rb") as handle:
            blob = handle.read()
        with open(path, "wb") as handle:
            handle.write(blob[:-4])
        with self.assertRaises(WeightLoadError) as ctx:
            read_container(path)
        self.assertEqual(ctx.exception.field, "second")

    def test_unsupported_dtype_code(self):
        with self.assertRaises(ValueError):
            write_container(os.path.join(self.tmp, "x.s2mw"), "test", [("a", np.ones(2), "f16")])


class ModelWeightsTest(WeightContainerTestCase):
    def test_s2m_round_trip_is_bitwise_after_f32(self):
        model = init_s2m_model(self.spec, depth=2, hidden=16, pe=PEConfig(L_bone=4), seed=3)
        path = save_weights(model, os.path.join(self.tmp, "s2m.s2mw"))
        loaded = load_weights(path, kind="s2m", depth=2)
        self.assertEqual(loaded.metadata(), model.metadata())
        for name, array in model.parameters().items():
            np.testing.assert_array_equal(loaded.parameters()[name], array.astype(np.float32).astype(np.float64))
        np.testing.assert_array_equal(loaded.spec.row_vertices, self.spec.row_vertices)

    def test_mgfp_round_trip(self):
        locked = init_s2m_model(self.spec, depth=2, hidden=16, seed=1)
        model = init_mgfp(locked, n_views=3, channels=4)
        model.mfi.zero[0][0].weight[...] = 0.25
        path = save_weights(model, os.path.join(self.tmp, "mgfp.s2mw"))
        loaded = load_weights(path, kind="mgfp", n_views=3, channels=4)
        self.assertIsInstance(loaded, MGFPModel)
        np.testing.assert_array_equal(loaded.mfi.zero[0][0].weight, np.full_like(model.mfi.zero[0][0].weight, 0.25))
        with self.assertRaises(WeightLoadError) as ctx:
            load_weights(path, n_views=4)
        self.assertEqual(ctx.exception.field, "n_views")

    def test_architecture_mismatch_names_field(self):
        path = save_weights(init_s2m_model(self.spec, depth=2, hidden=16), os.path.join(self.tmp, "s2m.s2mw"))
        with self.assertRaises(WeightLoadError) as ctx:
            load_weights(path, depth=3)
        self.assertEqual(ctx.exception.field, "depth")
        with self.assertRaises(WeightLoadError) as ctx:
            load_weights(path, kind="mgfp")
        self.assertEqual(ctx.exception.field, "kind")

    def test_missing_tensor_is_named(self):
        model = init_s2m_model(self.spec, depth=2, hidden=16)
        path = os.path.join(self.tmp, "partial.s2mw")
        tensors = [(name, array, "f32") for name, array in model.parameters().items() if name != "axis_y.layer1.b"]
        tensors.append(("spec.row_vertices", self.spec.row_vertices, "i32"))
        write_container(path, "s2m", tensors, model.metadata())
        with self.assertRaises(WeightLoadError) as ctx:
            load_weights(path)
        self.assertEqual(ctx.exception.field, "axis_y.layer1.b")

    def test_template_file_is_not_weights(self):
        path = save_template(self.template, os.path.join(self.tmp, "hand.s2mw"))
        with self.assertRaises(WeightLoadError) as ctx:
            load_weights(path)
        self.assertEqual(ctx.exception.field, "kind")


class TemplateAndDatasetTest(WeightContainerTestCase):
    def test_template_round_trip(self):
        path = save_template(self.template, os.path.join(self.tmp, "hand.s2mw"))
        loaded = load_template(path)
        np.testing.assert_array_equal(loaded.vertices, self.template.vertices)
        np.testing.assert_array_equal(loaded.faces, self.template.faces)
        np.testing.assert_array_equal(loaded.skin_weights, self.template.skin_weights)

    def test_rendered_sample_round_trip(self):
        sample = synthesize_sample(self.template, RigConfig(), SynthesisConfig(feature_channels=8), seed=2, index=5)
        path = save_sample(sample, os.path.join(self.tmp, "sample.s2mw"))
        loaded = load_sample(path)
        self.assertEqual((loaded.index, loaded.seed), (5, 2))
        np.testing.assert_array_equal(loaded.mesh, sample.mesh)
        np.testing.assert_array_equal(loaded.rig.views[1].T, sample.rig.views[1].T)
        np.testing.assert_allclose(loaded.heatmaps, sample.heatmaps, atol=1e-7)
        np.testing.assert_array_equal(loaded.feature_maps, sample.feature_maps)

    def test_dataset_manifest_and_limit(self):
        samples = generate_dataset(self.template, RigConfig(), SynthesisConfig(), 4, 3, render=False, threads=1)
        write_dataset(self.tmp, samples, seed=4, config_hash="abc")
        manifest = read_dataset_manifest(self.tmp)
        self.assertEqual(manifest["count"], 3)
        self.assertFalse(manifest["rendered"])
        self.assertEqual(manifest["samples"][2], {"index": 2, "file": "sample_000002.s2mw"})
        loaded = load_dataset(self.tmp, limit=2)
        self.assertEqual([s.index for s in loaded], [0, 1])
        np.testing.assert_array_equal(loaded[1].skeleton, samples[1].skeleton)

    def test_foreign_manifest_is_rejected(self):
        with open(os.path.join(self.tmp, DATASET_MANIFEST), "w", encoding="utf-8") as handle:
            json.dump({"format": "other"}, handle)
        with self.assertRaises(WeightLoadError) as ctx:
            read_dataset_manifest(self.tmp)
        self.assertEqual(ctx.exception.field, "format")


if __name__ == "__main__":
    unittest.main()

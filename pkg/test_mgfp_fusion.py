import unittest
from copy import deepcopy

import numpy as np

from camera_geometry import project_points
from hand_model import build_decomposition, build_default_template, decompose_mesh
from hand_synthesis import make_rig, synthesize_sample
from mgfp_fusion import (
    Stage2Prediction,
    Stage2Target,
    count_macs_mgfp,
    count_params_mgfp,
    gather_bone_features,
    gather_keypoint_features,
    init_mgfp,
    mfi_backward,
    mfi_forward_batch,
    reconstruct,
    stage2_loss,
)
from numeric_core import finite_diff_check
from run_config import LossWeights, RigConfig, SynthesisConfig
from skeleton2mesh import init_s2m_model, s2m_forward, s2m_forward_batch


class MGFPTestCase(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.template = build_default_template()
        cls.spec = build_decomposition(cls.template)


class ZeroInitTest(MGFPTestCase):
    def test_zero_infuser_reproduces_locked_model_exactly(self):
        locked = init_s2m_model(self.spec, depth=3, hidden=32, seed=1)
        model = init_mgfp(locked, n_views=2, channels=4)
        rng = np.random.default_rng(0)
        X = self.template.rest_skeleton + rng.normal(0.0, 3.0, size=(100, 21, 3))
        G = rng.normal(size=(100, 20, model.feature_dim))
        infused, _ = mfi_forward_batch(model, X, G)
        frozen, _ = s2m_forward_batch(locked, X)
        np.testing.assert_array_equal(infused, frozen)

    def test_copies_start_equal_to_locked_stacks(self):
        locked = init_s2m_model(self.spec, depth=2, hidden=16, seed=3)
        model = init_mgfp(locked, n_views=2, channels=4)
        for locked_stack, copy in zip(locked.triaxis.stacks, model.mfi.copies):
            for a, b in zip(locked_stack.layers, copy.layers):
                np.testing.assert_array_equal(a.weight, b.weight)
                self.assertIsNot(a.weight, b.weight)
        for layers in model.mfi.zero:
            self.assertTrue(all(not layer.weight.any() and not layer.bias.any() for layer in layers))

    def test_optimizer_sees_only_infuser_tensors(self):
        locked = init_s2m_model(self.spec, depth=2, hidden=16)
        model = init_mgfp(locked, n_views=2, channels=4)
        self.assertTrue(all(name.startswith("mfi.") for name in model.parameters()))


def _randomize_zero_layers(model, rng, scale=0.1):
    for layers in model.mfi.zero:
        for layer in layers:
            layer.weight[...] = rng.normal(0.0, scale, size=layer.weight.shape)
            layer.bias[...] = rng.normal(0.0, scale, size=layer.bias.shape)


class InfuserStructureTest(MGFPTestCase):
    def setUp(self):
        locked = init_s2m_model(self.spec, depth=2, hidden=16, seed=4)
        self.model = init_mgfp(locked, n_views=2, channels=3)
        self.rng = np.random.default_rng(11)
        _randomize_zero_layers(self.model, self.rng)
        self.X = self.template.rest_skeleton + self.rng.normal(0.0, 2.0, size=(2, 21, 3))
        self.G = self.rng.normal(size=(2, 20, self.model.feature_dim))

    def test_nonzero_infuser_responds_to_features(self):
        base, _ = mfi_forward_batch(self.model, self.X, self.G)
        moved, _ = mfi_forward_batch(self.model, self.X, self.G + 1.0)
        self.assertGreater(np.abs(moved - base).max(), 1e-6)
        frozen, _ = s2m_forward_batch(self.model.locked, self.X)
        self.assertGreater(np.abs(base - frozen).max(), 1e-6)

    def test_each_axis_branch_drives_only_its_coordinate(self):
        base, _ = mfi_forward_batch(self.model, self.X, self.G)
        for axis in range(3):
            others = [a for a in range(3) if a != axis]
            for branch in ("copy", "zero"):
                saved = deepcopy(self.model.mfi)
                if branch == "copy":
                    layer = self.model.mfi.copies[axis].layers[0]
                else:
                    layer = self.model.mfi.zero[axis][1]
                layer.weight += self.rng.normal(0.0, 0.5, size=layer.weight.shape)
                after, _ = mfi_forward_batch(self.model, self.X, self.G)
                self.model.mfi = saved
                np.testing.assert_array_equal(after[..., others], base[..., others])
                self.assertGreater(np.abs(after[..., axis] - base[..., axis]).max(), 1e-6, (axis, branch))

    def test_bone_features_only_reach_their_own_patch(self):
        base, _ = mfi_forward_batch(self.model, self.X, self.G)
        changed = self.G.copy()
        changed[:, 9] += 2.0
        after, _ = mfi_forward_batch(self.model, self.X, changed)
        own = self.spec.bone_of_row == 9
        np.testing.assert_allclose(after[:, ~own], base[:, ~own], atol=1e-12)
        self.assertGreater(np.abs(after[:, own] - base[:, own]).max(), 1e-6)


class CountTest(MGFPTestCase):
    def test_default_counts(self):
        model = init_mgfp(init_s2m_model(self.spec), n_views=4, channels=128)
        self.assertEqual(count_params_mgfp(model), 2_124_520)
        self.assertEqual(count_macs_mgfp(model), 41_685_684)

    def test_fewer_views_only_shrink_first_zero_layer(self):
        locked = init_s2m_model(self.spec)
        four = count_params_mgfp(init_mgfp(locked, n_views=4, channels=128))
        one = count_params_mgfp(init_mgfp(locked, n_views=1, channels=128))
        self.assertEqual(four - one, 552_960)


class GradientTest(MGFPTestCase):
    def test_infuser_gradients_match_finite_differences(self):
        locked = init_s2m_model(self.spec, depth=2, hidden=8, seed=2)
        model = init_mgfp(locked, n_views=2, channels=2)
        rng = np.random.default_rng(7)
        for layers in model.mfi.zero:
            for layer in layers:
                layer.weight[...] = rng.normal(0.0, 0.1, size=layer.weight.shape)
                layer.bias[...] = rng.normal(0.0, 0.1, size=layer.bias.shape)
        X = self.template.rest_skeleton + rng.normal(0.0, 2.0, size=(2, 21, 3))
        G = rng.normal(size=(2, 20, model.feature_dim))
        R = rng.normal(size=(2, self.spec.patch_count, 3))

        _, cache = mfi_forward_batch(model, X, G)
        grads = mfi_backward(model, cache, R)
        self.assertEqual(set(grads), set(model.parameters()))

        for name, array in model.parameters().items():
            def loss_and_grad(values, name=name, array=array):
                saved = array.copy()
                array[...] = values
                patches, cache = mfi_forward_batch(model, X, G)
                named = mfi_backward(model, cache, R)
                array[...] = saved
                return float(np.sum(patches * R)), named[name]

            indices = rng.choice(array.size, size=min(array.size, 8), replace=False)
            error = finite_diff_check(loss_and_grad, array.copy(), indices=indices)
            self.assertLess(error, 1e-4, name)

    def test_stage2_loss_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(21)
        rig = make_rig(2, 600.0, self.template.rest_skeleton.mean(axis=0), 300.0, (256, 256), seed=1)
        skeleton = self.template.rest_skeleton
        keypoints = np.stack([project_points(view, skeleton) for view in rig.views])
        gt_patches = decompose_mesh(self.spec, self.template.vertices)
        target = Stage2Target(gt_patches, skeleton)
        # 1.5 mm residuals stay on one side of the L1 kink for a 1e-5 step.
        predicted = gt_patches + rng.normal(0.0, 1.5, size=gt_patches.shape)

        def loss_and_grad(values):
            prediction = Stage2Prediction(values, skeleton + 0.5, keypoints)
            breakdown, d_patches = stage2_loss(prediction, target, rig)
            return breakdown.total, d_patches

        _, analytic = loss_and_grad(predicted)
        self.assertGreater(np.abs(analytic).max(), 1e-4)
        indices = rng.choice(predicted.size, size=30, replace=False)
        error = finite_diff_check(loss_and_grad, predicted, indices=indices)
        self.assertLess(error, 1e-6)

    def test_stage2_loss_gradient_flows_through_infuser(self):
        locked = init_s2m_model(self.spec, depth=2, hidden=8, seed=2)
        model = init_mgfp(locked, n_views=2, channels=2)
        rng = np.random.default_rng(8)
        _randomize_zero_layers(model, rng)
        rig = make_rig(2, 600.0, self.template.rest_skeleton.mean(axis=0), 300.0, (256, 256), seed=1)
        X = self.template.rest_skeleton + rng.normal(0.0, 2.0, size=(21, 3))
        G = rng.normal(size=(20, model.feature_dim))
        keypoints = np.stack([project_points(view, X) for view in rig.views])
        start, _ = mfi_forward_batch(model, X, G)
        # Residuals of 5-10 mm cannot change sign under a finite-difference step.
        offsets = rng.uniform(5.0, 10.0, size=start[0].shape) * rng.choice([-1.0, 1.0], size=start[0].shape)
        target = Stage2Target(start[0] + offsets, self.template.rest_skeleton)
        weights = LossWeights(heatmap=0.0, skeleton_2d=1.0, vertex_2d=0.0, skeleton_3d=1.0, vertex_3d=1.0)

        def stage2_total():
            patches, cache = mfi_forward_batch(model, X, G)
            prediction = Stage2Prediction(patches[0], X, keypoints)
            breakdown, d_patches = stage2_loss(prediction, target, rig, weights)
            return breakdown.total, mfi_backward(model, cache, d_patches[np.newaxis])

        for name, array in model.parameters().items():
            def loss_and_grad(values, name=name, array=array):
                saved = array.copy()
                array[...] = values
                total, grads = stage2_total()
                array[...] = saved
                return total, grads[name]

            indices = rng.choice(array.size, size=min(array.size, 6), replace=False)
            error = finite_diff_check(loss_and_grad, array.copy(), indices=indices)
            self.assertLess(error, 1e-5, name)


class FeatureGatherTest(MGFPTestCase):
    def test_constant_maps_give_constant_features(self):
        rig = make_rig(3, 600.0, (0.0, 0.0, 0.0), 300.0, (256, 256), seed=0)
        maps = np.ones((3, 2, 64, 64)) * np.array([1.0, 5.0])[np.newaxis, :, np.newaxis, np.newaxis]
        X = np.random.default_rng(1).uniform(-40.0, 40.0, size=(21, 3))
        features = gather_keypoint_features(maps, X, rig)
        self.assertEqual(features.shape, (21, 6))
        np.testing.assert_allclose(features, np.tile([1.0, 5.0], (21, 3)))

    def test_bone_features_concatenate_parent_and_child(self):
        locked = init_s2m_model(self.spec, depth=2, hidden=8)
        rig = make_rig(2, 600.0, (0.0, 0.0, 0.0), 300.0, (256, 256), seed=0)
        maps = np.random.default_rng(2).uniform(size=(2, 3, 64, 64))
        X = self.template.rest_skeleton - self.template.rest_skeleton.mean(axis=0)
        G = gather_bone_features(maps, X, rig, locked.tree)
        self.assertEqual(G.bone.shape, (20, 12))
        parent, child = locked.tree.bone_order[5]
        np.testing.assert_array_equal(G.bone[5, :6], G.keypoint[parent])
        np.testing.assert_array_equal(G.bone[5, 6:], G.keypoint[child])

    def test_point_behind_camera_gathers_zeros(self):
        rig = make_rig(2, 600.0, (0.0, 0.0, 0.0), 300.0, (256, 256), seed=0, elevation_jitter_deg=0.0, arc_deg=10.0)
        behind = rig.views[0].center * 2.0
        X = np.zeros((21, 3))
        X[0] = behind
        features = gather_keypoint_features(np.ones((2, 1, 64, 64)), X, rig)
        self.assertEqual(features[0, 0], 0.0)
        self.assertEqual(features[1, 0], 1.0)


class Stage2LossTest(MGFPTestCase):
    def setUp(self):
        self.rig = make_rig(2, 600.0, self.template.rest_skeleton.mean(axis=0), 300.0, (256, 256), seed=1)
        self.gt_patches = decompose_mesh(self.spec, self.template.vertices)
        self.skeleton = self.template.rest_skeleton
        self.keypoints = np.stack([project_points(view, self.skeleton) for view in self.rig.views])

    def test_perfect_prediction_has_zero_loss(self):
        prediction = Stage2Prediction(self.gt_patches.copy(), self.skeleton.copy(), self.keypoints)
        breakdown, grad = stage2_loss(prediction, Stage2Target(self.gt_patches, self.skeleton), self.rig)
        self.assertEqual(breakdown.total, 0.0)
        self.assertEqual(grad.shape, self.gt_patches.shape)
        self.assertFalse(grad.any())

    def test_unit_shift_costs_one_millimeter_of_l1(self):
        shifted = self.gt_patches + np.array([1.0, 0.0, 0.0])
        prediction = Stage2Prediction(shifted, self.skeleton, self.keypoints)
        breakdown, _ = stage2_loss(
            prediction, Stage2Target(self.template.vertices, self.skeleton), self.rig, spec=self.spec
        )
        self.assertAlmostEqual(breakdown.terms["vertex_3d"], 1.0, places=12)
        self.assertGreater(breakdown.terms["vertex_2d"], 0.0)
        self.assertEqual(breakdown.terms["skeleton_3d"], 0.0)

    def test_weights_scale_terms(self):
        shifted = self.gt_patches + np.array([0.0, 2.0, 0.0])
        prediction = Stage2Prediction(shifted, self.skeleton + 1.0, self.keypoints)
        target = Stage2Target(self.gt_patches, self.skeleton)
        only_3d = LossWeights(heatmap=0.0, skeleton_2d=0.0, vertex_2d=0.0, skeleton_3d=0.0, vertex_3d=1.0)
        breakdown, grad = stage2_loss(prediction, target, self.rig, only_3d)
        self.assertAlmostEqual(breakdown.total, 2.0, places=12)
        np.testing.assert_allclose(grad[:, 1], 1.0 / self.spec.patch_count)

    def test_shape_mismatch_is_rejected(self):
        prediction = Stage2Prediction(self.gt_patches[:-1], self.skeleton, self.keypoints)
        with self.assertRaises(ValueError):
            stage2_loss(prediction, Stage2Target(self.gt_patches, self.skeleton), self.rig)


class ReconstructTest(MGFPTestCase):
    def test_zero_init_reconstruction_is_the_frozen_cascade(self):
        sample = synthesize_sample(self.template, RigConfig(), SynthesisConfig(feature_channels=8), seed=0, index=0)
        locked = init_s2m_model(self.spec, depth=2, hidden=16)
        model = init_mgfp(locked, n_views=4, channels=8)
        X_bar, mesh, keypoints = reconstruct(model, sample.rig, sample.heatmaps, sample.feature_maps)
        self.assertEqual(keypoints.shape, (4, 21, 2))
        self.assertLess(np.abs(X_bar - sample.skeleton).max(), 0.5)
        _, frozen_mesh = s2m_forward(locked, X_bar)
        np.testing.assert_allclose(mesh, frozen_mesh, atol=1e-12)

    def test_view_count_mismatch_is_rejected(self):
        sample = synthesize_sample(self.template, RigConfig(), SynthesisConfig(feature_channels=8), seed=0, index=0)
        model = init_mgfp(init_s2m_model(self.spec, depth=2, hidden=16), n_views=3, channels=8)
        with self.assertRaises(ValueError):
            reconstruct(model, sample.rig, sample.heatmaps, sample.feature_maps)


if __name__ == "__main__":
    unittest.main()

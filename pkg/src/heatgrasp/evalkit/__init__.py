"""Synthetic primitive scenes, analytic grasp labels and the force-closure AP metric."""

from .grasping import (ContactPair, GraspCheck, check_grasps, find_contacts, force_closure,
                       label_grasps)
from .metric import MU_GRID, TOP_K, ap, ap_mu, evaluate_scene, map_over_scenes
from .primitives import ScenePrimitive
from .scene import (TABLE_Z, SceneModel, gen_scene, raycast, render_depth, render_frame, render_rgb,
                    validate_scene)

import copy
import math

import numpy as np


TASKS = ("reach", "push", "lift")
TASK_ACTION_DIMS = {"reach": 3, "push": 2, "lift": 4}

EPISODE_LENGTH = 50

# Workspace box (meters); table top at z = 0
WORKSPACE_LOW = np.array([-0.3, -0.3, 0.02])
WORKSPACE_HIGH = np.array([0.3, 0.3, 0.3])

STEP_SIZE = 0.04            # end-effector displacement per unit action
REACH_EPS = 0.05
PUSH_EPS = 0.05
LIFT_HEIGHT = 0.1
GRASP_RADIUS = 0.04
CONTACT_RADIUS = 0.045
APERTURE_RATE = 0.25
APERTURE_CLOSED = 0.5
CUBE_HALF = 0.02
SUCCESS_BONUS = 10.0

FOV_DEG = 45.0
NEAR_PLANE = 0.05

STATIC_CAMERA_AZIMUTH = 45.0
STATIC_CAMERA_ELEVATION = 35.0
STATIC_CAMERA_RADIUS = 1.2
SCENE_CENTER = (0.0, 0.0, 0.05)

BACKGROUND = np.array([0.82, 0.86, 0.92])
GRIPPER_GRAY = np.array([0.55, 0.55, 0.58])
CUBE_GREEN = np.array([0.15, 0.75, 0.2])
GOAL_RED = np.array([0.9, 0.12, 0.1])
TABLE_LIGHT = np.array([0.78, 0.68, 0.52])
TABLE_DARK = np.array([0.66, 0.56, 0.42])

LIGHT_DIR = np.array([0.4, 0.3, 0.87]) / np.linalg.norm([0.4, 0.3, 0.87])

N_PREDEFINED = 10


class UnknownTaskError(ValueError):
    """Task id is not one of reach, push, lift"""


class EpisodeFinishedError(RuntimeError):
    """step() called on an episode that is already done"""


def check_task(task):
    if task not in TASKS:
        raise UnknownTaskError(f"unknown task {task!r}; expected one of {TASKS}")
    return task


# ---------------------------------------------------------------------------
# State and cameras
# ---------------------------------------------------------------------------

class WorldState:
    def __init__(self, task, ee_pos, gripper_aperture=1.0, object_pos=None, goal_pos=None,
                 grasped=False, step_count=0):
        self.task = check_task(task)
        self.ee_pos = np.asarray(ee_pos, dtype=np.float64).copy()
        self.gripper_aperture = float(gripper_aperture)
        self.object_pos = np.asarray(object_pos if object_pos is not None else [0.0, 0.0, CUBE_HALF],
                                     dtype=np.float64).copy()
        self.goal_pos = np.asarray(goal_pos if goal_pos is not None else [0.0, 0.0, CUBE_HALF],
                                   dtype=np.float64).copy()
        self.grasped = bool(grasped)
        self.step_count = int(step_count)

    def robot_state(self):
        """End-effector position followed by gripper aperture"""
        return np.concatenate([self.ee_pos, [self.gripper_aperture]]).astype(np.float32)

    def copy(self):
        return copy.deepcopy(self)


class CameraSpec:
    def __init__(self, azimuth, elevation, radius, look_at=SCENE_CENTER):
        if not radius > 0:
            raise ValueError(f"camera radius must be positive, got {radius}")
        self.azimuth = float(azimuth)
        self.elevation = float(elevation)
        self.radius = float(radius)
        self.look_at = np.asarray(look_at, dtype=np.float64)

    def position(self):
        az = math.radians(self.azimuth)
        el = math.radians(self.elevation)
        offset = np.array([math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)])
        return self.look_at + self.radius * offset

    def basis(self):
        """
        Camera axes in world coordinates

        Returns:
            (right, down, forward) unit vectors; image x follows right, image y follows down
        """
        forward = self.look_at - self.position()
        forward = forward / np.linalg.norm(forward)
        right = np.cross(forward, np.array([0.0, 0.0, 1.0]))
        right = right / np.linalg.norm(right)
        up = np.cross(right, forward)
        return right, -up, forward

    def __eq__(self, other):
        return (isinstance(other, CameraSpec) and self.azimuth == other.azimuth and
                self.elevation == other.elevation and self.radius == other.radius and
                np.array_equal(self.look_at, other.look_at))

    def __repr__(self):
        return f"CameraSpec(az={self.azimuth:.2f}, el={self.elevation:.2f}, r={self.radius:.2f})"


def static_camera():
    return CameraSpec(STATIC_CAMERA_AZIMUTH, STATIC_CAMERA_ELEVATION, STATIC_CAMERA_RADIUS)


def camera_at_angle(phi_d):
    """Dynamic camera orbited phi_d degrees away from the static camera"""
    base = static_camera()
    return CameraSpec(base.azimuth + phi_d, base.elevation, base.radius, base.look_at)


def dynamic_camera(rng, phi):
    """
    Draw a dynamic camera uniformly within phi degrees of the static camera

    Args:
        rng: numpy Generator
        phi: Maximum azimuth offset in degrees (>= 0)

    Returns:
        CameraSpec with the static camera's elevation and radius
    """
    if phi < 0:
        raise ValueError(f"phi must be >= 0, got {phi}")
    return camera_at_angle(float(rng.uniform(0.0, phi)))


class DualObservation:
    def __init__(self, static_view, dynamic_view, phi_d, robot_state):
        if static_view.shape != dynamic_view.shape:
            raise ValueError("static and dynamic views must share a resolution")
        self.static_view = static_view
        self.dynamic_view = dynamic_view
        self.phi_d = float(phi_d)
        self.robot_state = robot_state


# ---------------------------------------------------------------------------
# Software rasterizer
# ---------------------------------------------------------------------------

class Box:
    """Axis-aligned box with an optional yaw about z"""

    # Face corner indices into the 8 corners (x, y, z bits) with outward normals in the local frame
    FACES = (
        ((0, 2, 6, 4), (-1, 0, 0)), ((1, 5, 7, 3), (1, 0, 0)),
        ((0, 4, 5, 1), (0, -1, 0)), ((2, 3, 7, 6), (0, 1, 0)),
        ((0, 1, 3, 2), (0, 0, -1)), ((4, 6, 7, 5), (0, 0, 1)),
    )

    def __init__(self, center, half_extents, color, yaw=0.0):
        self.center = np.asarray(center, dtype=np.float64)
        self.half_extents = np.asarray(half_extents, dtype=np.float64)
        self.color = np.asarray(color, dtype=np.float64)
        self.yaw = float(yaw)

    def _rotation(self):
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])

    def triangles(self):
        """Yield (3x3 vertex array, world normal) for the 12 triangles"""
        rot = self._rotation()
        signs = np.array([[(i >> 0) & 1, (i >> 1) & 1, (i >> 2) & 1] for i in range(8)]) * 2.0 - 1.0
        corners = (signs * self.half_extents) @ rot.T + self.center
        for idx, normal in self.FACES:
            world_normal = rot @ np.asarray(normal, dtype=np.float64)
            quad = corners[list(idx)]
            yield quad[[0, 1, 2]], world_normal
            yield quad[[0, 2, 3]], world_normal


class Table:
    """Checkered table top at z = 0"""

    def __init__(self, half_extent=0.45, cell=0.1):
        self.half_extent = half_extent
        self.cell = cell


def _shade(color, normal):
    return color * (0.45 + 0.55 * max(0.0, float(np.dot(normal, LIGHT_DIR))))


def _focal_length(size):
    return 0.5 * size / math.tan(math.radians(FOV_DEG) / 2.0)


def _pixel_rays(cam, size):
    right, down, forward = cam.basis()
    focal = _focal_length(size)
    coords = (np.arange(size) + 0.5 - 0.5 * size) / focal
    px, py = np.meshgrid(coords, coords)
    rays = forward + px[..., None] * right + py[..., None] * down
    return rays, focal


def _draw_table(table, cam, size, image, depth):
    origin = cam.position()
    rays, _ = _pixel_rays(cam, size)
    dz = rays[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(dz < 0, -origin[2] / dz, np.inf)
    hit = origin + t[..., None] * rays
    inside = (np.isfinite(t) & (t > NEAR_PLANE) &
              (np.abs(hit[..., 0]) <= table.half_extent) & (np.abs(hit[..., 1]) <= table.half_extent))
    checker = (np.floor(hit[..., 0] / table.cell) + np.floor(hit[..., 1] / table.cell)) % 2 == 0
    colors = np.where(checker[..., None], _shade(TABLE_LIGHT, np.array([0.0, 0.0, 1.0])),
                      _shade(TABLE_DARK, np.array([0.0, 0.0, 1.0])))
    mask = inside & (t < depth)
    image[mask] = colors[mask]
    depth[mask] = t[mask]


def _draw_triangle(verts, color, cam, size, focal, image, depth):
    right, down, forward = cam.basis()
    rel = verts - cam.position()
    cam_z = rel @ forward
    if np.any(cam_z <= NEAR_PLANE):
        return
    sx = 0.5 * size + focal * (rel @ right) / cam_z
    sy = 0.5 * size + focal * (rel @ down) / cam_z

    area = (sx[1] - sx[0]) * (sy[2] - sy[0]) - (sx[2] - sx[0]) * (sy[1] - sy[0])
    if abs(area) < 1e-12:
        return

    x_min = max(int(math.floor(sx.min())), 0)
    x_max = min(int(math.ceil(sx.max())), size - 1)
    y_min = max(int(math.floor(sy.min())), 0)
    y_max = min(int(math.ceil(sy.max())), size - 1)
    if x_min > x_max or y_min > y_max:
        return

    px, py = np.meshgrid(np.arange(x_min, x_max + 1) + 0.5, np.arange(y_min, y_max + 1) + 0.5)
    w0 = ((sx[1] - px) * (sy[2] - py) - (sx[2] - px) * (sy[1] - py)) / area
    w1 = ((sx[2] - px) * (sy[0] - py) - (sx[0] - px) * (sy[2] - py)) / area
    w2 = 1.0 - w0 - w1
    inside = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
    if not inside.any():
        return

    # Perspective-correct depth: interpolate 1/z in screen space
    inv_z = w0 / cam_z[0] + w1 / cam_z[1] + w2 / cam_z[2]
    z = 1.0 / np.maximum(inv_z, 1e-12)
    region_depth = depth[y_min:y_max + 1, x_min:x_max + 1]
    region_image = image[y_min:y_max + 1, x_min:x_max + 1]
    mask = inside & (z < region_depth)
    region_depth[mask] = z[mask]
    region_image[mask] = color


def scene_from_state(state):
    """Primitive list for a WorldState: table, gripper, cube (push/lift), goal marker"""
    scene = [Table()]
    ee = state.ee_pos
    finger_offset = 0.012 + 0.02 * state.gripper_aperture
    scene.append(Box(ee + [0.0, 0.0, 0.035], [0.015, 0.035, 0.012], GRIPPER_GRAY))
    scene.append(Box(ee + [0.0, finger_offset, 0.008], [0.008, 0.006, 0.02], GRIPPER_GRAY))
    scene.append(Box(ee + [0.0, -finger_offset, 0.008], [0.008, 0.006, 0.02], GRIPPER_GRAY))
    if state.task in ("push", "lift"):
        scene.append(Box(state.object_pos, [CUBE_HALF] * 3, CUBE_GREEN))
    if state.task == "push":
        scene.append(Box([state.goal_pos[0], state.goal_pos[1], 0.002], [0.025, 0.025, 0.002], GOAL_RED))
    else:
        scene.append(Box(state.goal_pos, [0.012] * 3, GOAL_RED))
    return scene


def render(state, cam, size):
    """
    Rasterize a scene with perspective projection, a z-buffer and flat shading

    Args:
        state: WorldState, or a list of Box / Table primitives
        cam: CameraSpec
        size: Output resolution (square)

    Returns:
        size x size x 3 float image in [0, 1]
    """
    scene = scene_from_state(state) if isinstance(state, WorldState) else list(state)
    image = np.tile(BACKGROUND, (size, size, 1))
    depth = np.full((size, size), np.inf)
    focal = _focal_length(size)
    eye = cam.position()

    for primitive in scene:
        if isinstance(primitive, Table):
            _draw_table(primitive, cam, size, image, depth)
            continue
        for verts, normal in primitive.triangles():
            # Back-face cull; boxes are convex
            if np.dot(normal, verts.mean(axis=0) - eye) >= 0:
                continue
            _draw_triangle(verts, _shade(primitive.color, normal), cam, size, focal, image, depth)

    return np.clip(image, 0.0, 1.0)


# ---------------------------------------------------------------------------
# Task logic
# ---------------------------------------------------------------------------

def success(state, task=None):
    """Strict-inequality success predicate for the state's task"""
    task = check_task(task or state.task)
    if task == "reach":
        return bool(np.linalg.norm(state.ee_pos - state.goal_pos) < REACH_EPS)
    if task == "push":
        return bool(np.linalg.norm(state.object_pos[:2] - state.goal_pos[:2]) < PUSH_EPS)
    return bool(state.grasped and state.object_pos[2] > LIFT_HEIGHT)


def task_distance(state):
    """Distance the shaped reward penalizes"""
    if state.task == "reach":
        return float(np.linalg.norm(state.ee_pos - state.goal_pos))
    if state.task == "push":
        return float(np.linalg.norm(state.object_pos[:2] - state.goal_pos[:2]))
    approach = 0.0 if state.grasped else float(np.linalg.norm(state.ee_pos - state.object_pos))
    return approach + float(np.linalg.norm(state.object_pos - state.goal_pos))


def predefined_configs(task):
    """
    Fixed list of start configurations per task

    Returns:
        List of dicts with ee_pos, object_pos and goal_pos
    """
    check_task(task)
    rng = np.random.default_rng(1000 + TASKS.index(task))
    configs = []
    while len(configs) < N_PREDEFINED:
        if task == "reach":
            ee = np.array([0.0, 0.0, 0.15])
            goal = rng.uniform([-0.25, -0.25, 0.05], [0.25, 0.25, 0.25])
            if np.linalg.norm(goal - ee) < 3 * REACH_EPS:
                continue
            configs.append({"ee_pos": ee, "object_pos": np.array([0.0, 0.0, CUBE_HALF]), "goal_pos": goal})
        elif task == "push":
            obj = np.array([*rng.uniform(-0.12, 0.12, 2), CUBE_HALF])
            goal = np.array([*rng.uniform(-0.22, 0.22, 2), CUBE_HALF])
            if np.linalg.norm(goal[:2] - obj[:2]) < 2 * PUSH_EPS:
                continue
            ee = np.array([*(obj[:2] + rng.uniform(-0.15, 0.15, 2)), WORKSPACE_LOW[2]])
            if np.linalg.norm(ee[:2] - obj[:2]) < 2 * CONTACT_RADIUS:
                continue
            configs.append({"ee_pos": ee, "object_pos": obj, "goal_pos": goal})
        else:
            obj = np.array([*rng.uniform(-0.2, 0.2, 2), CUBE_HALF])
            if np.linalg.norm(obj[:2]) < 0.08:
                continue
            goal = np.array([obj[0], obj[1], LIFT_HEIGHT + 0.05])
            configs.append({"ee_pos": np.array([0.0, 0.0, 0.2]), "object_pos": obj, "goal_pos": goal})
    return configs


class ManipulationEnv:
    """
    Kinematic gripper world observed by a static policy camera and a
    dynamic camera orbiting within phi degrees of it.
    """

    def __init__(self, task="reach", phi=30.0, image_size=84, seed=0):
        self.task = check_task(task)
        if phi < 0:
            raise ValueError(f"phi must be >= 0, got {phi}")
        self.phi = float(phi)
        self.image_size = int(image_size)
        self.rng = np.random.default_rng(seed)
        self.state = None
        self.done = True
        self.phi_d = 0.0
        self.debug = False

    @property
    def action_dim(self):
        return TASK_ACTION_DIMS[self.task]

    @property
    def n_configs(self):
        return N_PREDEFINED

    def reset(self, seed=None, config_index=None, task=None):
        """
        Start an episode from one of the task's predefined configurations

        Args:
            seed: Optional reseed of the environment RNG
            config_index: Optional configuration index; drawn from the RNG otherwise
            task: Optional task switch

        Returns:
            DualObservation of the initial state
        """
        if task is not None:
            self.task = check_task(task)
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        configs = predefined_configs(self.task)
        if config_index is None:
            config_index = int(self.rng.integers(len(configs)))
        config = configs[config_index % len(configs)]

        self.state = WorldState(self.task, config["ee_pos"], 1.0, config["object_pos"], config["goal_pos"])
        self.done = False
        if self.debug:
            print(f"DEBUG [WorldSim] reset task={self.task} config={config_index}")
        return self._observe_random()

    def _observe_random(self):
        self.phi_d = float(self.rng.uniform(0.0, self.phi))
        return self.observe(self.phi_d)

    def observe(self, phi_d=None):
        """Render the current state with the dynamic camera at exactly phi_d degrees"""
        phi_d = self.phi_d if phi_d is None else float(phi_d)
        static_view = render(self.state, static_camera(), self.image_size)
        dynamic_view = render(self.state, camera_at_angle(phi_d), self.image_size)
        return DualObservation(static_view, dynamic_view, phi_d, self.state.robot_state())

    def step(self, action):
        """
        Advance one decision step

        Args:
            action: Array in [-1, 1]^|A| for the current task

        Returns:
            (DualObservation, reward, done, info)
        """
        if self.done or self.state is None:
            raise EpisodeFinishedError("episode is finished; call reset() first")
        action = np.asarray(action, dtype=np.float64).reshape(-1)
        if action.shape != (self.action_dim,):
            raise ValueError(f"{self.task} expects {self.action_dim} action dims, got {action.shape[0]}")
        action = np.clip(action, -1.0, 1.0)

        state = self.state
        old_ee = state.ee_pos.copy()
        move = np.zeros(3)
        move[:min(3, self.action_dim)] = action[:3]
        state.ee_pos = np.clip(state.ee_pos + STEP_SIZE * move, WORKSPACE_LOW, WORKSPACE_HIGH)

        if self.task == "push":
            delta = state.ee_pos - old_ee
            if np.linalg.norm(state.ee_pos[:2] - state.object_pos[:2]) < CONTACT_RADIUS:
                state.object_pos[:2] = np.clip(state.object_pos[:2] + delta[:2],
                                               WORKSPACE_LOW[:2], WORKSPACE_HIGH[:2])
        elif self.task == "lift":
            state.gripper_aperture = float(np.clip(state.gripper_aperture + APERTURE_RATE * action[3], 0.0, 1.0))
            closed = state.gripper_aperture < APERTURE_CLOSED
            if state.grasped and not closed:
                state.grasped = False
                state.object_pos[2] = CUBE_HALF
            elif (not state.grasped and closed and
                  np.linalg.norm(state.ee_pos - state.object_pos) < GRASP_RADIUS):
                state.grasped = True
            if state.grasped:
                state.object_pos = state.ee_pos.copy()

        state.step_count += 1
        is_success = success(state)
        reward = max(-1.0, -task_distance(state)) + (SUCCESS_BONUS if is_success else 0.0)
        self.done = is_success or state.step_count >= EPISODE_LENGTH

        obs = self._observe_random()
        info = {
            "success": is_success,
            "grasped": state.grasped,
            "terminal": is_success,
            "timeout": (not is_success) and self.done,
            "phi_d": obs.phi_d,
        }
        return obs, float(reward), self.done, info

    def get_state(self):
        return {
            "task": self.task,
            "state": None if self.state is None else self.state.copy(),
            "done": self.done,
            "phi_d": self.phi_d,
            "rng": copy.deepcopy(self.rng.bit_generator.state),
        }

    def set_state(self, snapshot):
        self.task = snapshot["task"]
        self.state = None if snapshot["state"] is None else snapshot["state"].copy()
        self.done = snapshot["done"]
        self.phi_d = snapshot["phi_d"]
        self.rng.bit_generator.state = copy.deepcopy(snapshot["rng"])

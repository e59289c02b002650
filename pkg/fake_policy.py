import numpy as np

import worldsim


class RandomPolicy:
    """Uniform random actions; the negative control for policy evaluation"""

    def __init__(self, action_dim, seed=0):
        self.action_dim = action_dim
        self.rng = np.random.default_rng(seed)

    def act(self, observation, env=None):
        return self.rng.uniform(-1.0, 1.0, size=self.action_dim)


class ScriptedPolicy:
    """
    Hand-coded controller that reads the simulator state directly. Stands in
    for a trained agent when checking the evaluation pipeline.
    """

    def __init__(self, task):
        self.task = worldsim.check_task(task)
        self.debug = False

    @staticmethod
    def _toward(current, target):
        return np.clip((np.asarray(target) - np.asarray(current)) / worldsim.STEP_SIZE, -1.0, 1.0)

    def act(self, observation, env):
        state = env.state
        if self.task == "reach":
            return self._toward(state.ee_pos, state.goal_pos)
        if self.task == "push":
            return self._push(state)
        return self._lift(state)

    def _push(self, state):
        ee = state.ee_pos[:2]
        obj = state.object_pos[:2]
        direction = state.goal_pos[:2] - obj
        distance = np.linalg.norm(direction)
        if distance < 1e-9:
            return np.zeros(2)
        u = direction / distance
        behind = obj - 0.06 * u
        rel = ee - obj

        if np.linalg.norm(behind - ee) < 0.015 or np.dot(rel, u) < -0.045:
            if abs(np.cross(np.append(u, 0.0), np.append(rel, 0.0))[2]) < 0.02:
                return self._toward(ee, ee + worldsim.STEP_SIZE * u)
            return self._toward(ee, behind)

        if np.linalg.norm(rel) < 0.1:
            # Circle around the cube instead of pushing it the wrong way
            perp = np.array([-u[1], u[0]])
            side = 1.0 if np.dot(rel, perp) >= 0 else -1.0
            waypoint = obj + 0.1 * side * perp - 0.03 * u
            if np.linalg.norm(waypoint - ee) > 0.015:
                return self._toward(ee, waypoint)
        return self._toward(ee, behind)

    def _lift(self, state):
        ee, obj = state.ee_pos, state.object_pos
        if state.grasped:
            return np.append(self._toward(ee, [ee[0], ee[1], worldsim.LIFT_HEIGHT + 0.08]), -1.0)
        if np.linalg.norm(ee[:2] - obj[:2]) > 0.01:
            hover = [obj[0], obj[1], max(ee[2], 0.08)]
            return np.append(self._toward(ee, hover), 1.0)
        if abs(ee[2] - obj[2]) > 0.01:
            return np.append(self._toward(ee, obj), 1.0)
        return np.append(np.zeros(3), -1.0)

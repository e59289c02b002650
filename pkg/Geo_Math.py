import math
import numpy as np
import torch


class ShapeMismatchError(ValueError):
    """Raised when an array does not have the shape an operation expects"""


class DegenerateConfigurationError(ValueError):
    """Raised when a point set cannot define a similarity alignment"""


def wrap_angle(angle):
    """Wrap a radian angle into [-pi, pi]"""
    wrapped = math.fmod(angle + math.pi, 2.0 * math.pi)
    if wrapped < 0:
        wrapped += 2.0 * math.pi
    return wrapped - math.pi


class EulerPose:
    """
    Relative rigid motion: intrinsic X-Y-Z Euler angles (radians) plus a
    translation in normalized volume coordinates (the volume spans [-1, 1]).
    """

    def __init__(self, alpha=0.0, beta=0.0, gamma=0.0, tx=0.0, ty=0.0, tz=0.0):
        values = [alpha, beta, gamma, tx, ty, tz]
        for name, value in zip(("alpha", "beta", "gamma", "tx", "ty", "tz"), values):
            if not math.isfinite(float(value)):
                raise ValueError(f"EulerPose.{name} must be finite, got {value}")

        self.alpha = wrap_angle(float(alpha))
        self.beta = wrap_angle(float(beta))
        self.gamma = wrap_angle(float(gamma))
        self.tx = float(tx)
        self.ty = float(ty)
        self.tz = float(tz)

    @classmethod
    def from_array(cls, values):
        values = np.asarray(values, dtype=np.float64).reshape(-1)
        if values.shape != (6,):
            raise ShapeMismatchError(f"EulerPose needs 6 values, got shape {values.shape}")
        return cls(*values.tolist())

    @property
    def angles(self):
        return np.array([self.alpha, self.beta, self.gamma], dtype=np.float64)

    @property
    def translation(self):
        return np.array([self.tx, self.ty, self.tz], dtype=np.float64)

    def as_array(self):
        return np.concatenate([self.angles, self.translation])

    def __repr__(self):
        return (f"EulerPose(alpha={self.alpha:.4f}, beta={self.beta:.4f}, gamma={self.gamma:.4f}, "
                f"t=({self.tx:.4f}, {self.ty:.4f}, {self.tz:.4f}))")


class RotationMatrix:
    """3x3 proper rotation; construction checks orthonormality and det +1"""

    def __init__(self, matrix, tol=1e-6):
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.shape != (3, 3):
            raise ShapeMismatchError(f"rotation must be 3x3, got {matrix.shape}")
        if np.abs(matrix.T @ matrix - np.eye(3)).max() > tol:
            raise ValueError("rotation matrix is not orthonormal")
        if abs(np.linalg.det(matrix) - 1.0) > tol:
            raise ValueError("rotation matrix must have determinant +1")
        self.matrix = matrix


class SimilarityTransform:
    """Scale, rotation and translation mapping src points onto tgt points"""

    def __init__(self, scale, rotation, translation):
        if not scale > 0:
            raise ValueError(f"similarity scale must be positive, got {scale}")
        if not isinstance(rotation, RotationMatrix):
            rotation = RotationMatrix(rotation)
        self.scale = float(scale)
        self.rotation = rotation
        self.translation = np.asarray(translation, dtype=np.float64).reshape(3)

    def apply(self, points):
        points = np.asarray(points, dtype=np.float64)
        return self.scale * points @ self.rotation.matrix.T + self.translation


# ---------------------------------------------------------------------------
# Rotations
# ---------------------------------------------------------------------------

def _axis_rotations(alpha, beta, gamma):
    ca, sa = np.cos(alpha), np.sin(alpha)
    cb, sb = np.cos(beta), np.sin(beta)
    cg, sg = np.cos(gamma), np.sin(gamma)
    rx = np.array([[1.0, 0.0, 0.0], [0.0, ca, -sa], [0.0, sa, ca]])
    ry = np.array([[cb, 0.0, sb], [0.0, 1.0, 0.0], [-sb, 0.0, cb]])
    rz = np.array([[cg, -sg, 0.0], [sg, cg, 0.0], [0.0, 0.0, 1.0]])
    return rx, ry, rz


def euler_to_rotation(pose):
    """
    Rotation for intrinsic rotations about X, then Y, then Z

    Args:
        pose: EulerPose (translation is ignored)

    Returns:
        RotationMatrix equal to Rx(alpha) @ Ry(beta) @ Rz(gamma)
    """
    rx, ry, rz = _axis_rotations(pose.alpha, pose.beta, pose.gamma)
    return RotationMatrix(rx @ ry @ rz)


def rotation_to_euler(rotation):
    """
    Inverse of euler_to_rotation

    Args:
        rotation: RotationMatrix or 3x3 array

    Returns:
        (alpha, beta, gamma) in radians
    """
    r = rotation.matrix if isinstance(rotation, RotationMatrix) else np.asarray(rotation, dtype=np.float64)
    sb = float(np.clip(r[0, 2], -1.0, 1.0))
    beta = math.asin(sb)
    if abs(sb) < 1.0 - 1e-9:
        alpha = math.atan2(-r[1, 2], r[2, 2])
        gamma = math.atan2(-r[0, 1], r[0, 0])
    else:
        # Gimbal lock: gamma folded into alpha
        alpha = math.atan2(r[2, 1], r[1, 1])
        gamma = 0.0
    return alpha, beta, gamma


def euler_angles_to_matrix(angles):
    """
    Batched torch version of euler_to_rotation

    Args:
        angles: (N, 3) tensor of (alpha, beta, gamma)

    Returns:
        (N, 3, 3) tensor of rotations, differentiable in the angles
    """
    alpha, beta, gamma = angles.unbind(-1)
    one = torch.ones_like(alpha)
    zero = torch.zeros_like(alpha)
    ca, sa = torch.cos(alpha), torch.sin(alpha)
    cb, sb = torch.cos(beta), torch.sin(beta)
    cg, sg = torch.cos(gamma), torch.sin(gamma)

    rx = torch.stack([one, zero, zero, zero, ca, -sa, zero, sa, ca], -1).view(-1, 3, 3)
    ry = torch.stack([cb, zero, sb, zero, one, zero, -sb, zero, cb], -1).view(-1, 3, 3)
    rz = torch.stack([cg, -sg, zero, sg, cg, zero, zero, zero, one], -1).view(-1, 3, 3)
    return rx @ ry @ rz


def transform_points(points, rotation, translation):
    """Apply p -> R p + t to an (N, 3) point array"""
    r = rotation.matrix if isinstance(rotation, RotationMatrix) else np.asarray(rotation, dtype=np.float64)
    return np.asarray(points, dtype=np.float64) @ r.T + np.asarray(translation, dtype=np.float64)


# ---------------------------------------------------------------------------
# Sample grids and trilinear resampling
# ---------------------------------------------------------------------------

def _axis_points(n, dtype, device):
    if n == 1:
        return torch.zeros(1, dtype=dtype, device=device)
    return torch.linspace(-1.0, 1.0, n, dtype=dtype, device=device)


def canonical_lattice(dims, dtype=torch.float32, device=None):
    """
    Voxel-center coordinates of a (D, H, W) volume over [-1, 1]^3

    Returns:
        (D, H, W, 3) tensor storing (x, y, z) with x along W, y along H, z along D
    """
    depth, height, width = dims
    if min(depth, height, width) < 1:
        raise ValueError(f"volume dims must be >= 1, got {dims}")
    zs = _axis_points(depth, dtype, device)
    ys = _axis_points(height, dtype, device)
    xs = _axis_points(width, dtype, device)
    grid_z, grid_y, grid_x = torch.meshgrid(zs, ys, xs, indexing="ij")
    return torch.stack([grid_x, grid_y, grid_z], dim=-1)


def affine_grid(rotation, translation, dims):
    """
    Source-coordinate sample grid for the warp c -> R c + t

    Args:
        rotation: (3, 3) or (N, 3, 3) tensor / RotationMatrix
        translation: (3,) or (N, 3)
        dims: (D, H, W) of the output volume

    Returns:
        (D, H, W, 3) grid, or (N, D, H, W, 3) for batched input
    """
    if isinstance(rotation, RotationMatrix):
        rotation = torch.as_tensor(rotation.matrix)
    rotation = torch.as_tensor(rotation)
    translation = torch.as_tensor(translation, dtype=rotation.dtype, device=rotation.device)

    batched = rotation.dim() == 3
    if not batched:
        rotation = rotation.unsqueeze(0)
        translation = translation.reshape(1, 3)
    if rotation.shape[1:] != (3, 3) or translation.shape != (rotation.shape[0], 3):
        raise ShapeMismatchError(
            f"rotation {tuple(rotation.shape)} and translation {tuple(translation.shape)} do not match")

    lattice = canonical_lattice(dims, dtype=rotation.dtype, device=rotation.device)
    flat = lattice.reshape(1, -1, 3)
    grid = flat @ rotation.transpose(1, 2) + translation.unsqueeze(1)
    grid = grid.reshape(rotation.shape[0], *lattice.shape)
    return grid if batched else grid[0]


def _index_scale(size):
    return 0.5 * (size - 1) if size > 1 else 1.0


def _to_index(coord, size):
    if size > 1:
        return (coord + 1.0) * (0.5 * (size - 1))
    return coord


def _corner_terms(volume, grid):
    """
    Yield the eight interpolation corners for every sample point

    Each item is (flat_index, valid, (wx, wy, wz), (sx, sy, sz)) where the
    weights are per-axis factors and s* are the +/-1 signs of their slopes.
    """
    n_batch, _, depth, height, width = volume.shape
    points = grid.reshape(n_batch, -1, 3)
    ix = _to_index(points[..., 0], width)
    iy = _to_index(points[..., 1], height)
    iz = _to_index(points[..., 2], depth)

    x0, y0, z0 = torch.floor(ix), torch.floor(iy), torch.floor(iz)
    fx, fy, fz = ix - x0, iy - y0, iz - z0

    for dz in (0, 1):
        cz = z0 + dz
        wz = fz if dz else 1.0 - fz
        for dy in (0, 1):
            cy = y0 + dy
            wy = fy if dy else 1.0 - fy
            for dx in (0, 1):
                cx = x0 + dx
                wx = fx if dx else 1.0 - fx
                valid = ((cx >= 0) & (cx <= width - 1) &
                         (cy >= 0) & (cy <= height - 1) &
                         (cz >= 0) & (cz <= depth - 1))
                flat = ((cz.clamp(0, depth - 1) * height + cy.clamp(0, height - 1)) * width
                        + cx.clamp(0, width - 1)).long()
                signs = (1.0 if dx else -1.0, 1.0 if dy else -1.0, 1.0 if dz else -1.0)
                yield flat, valid, (wx, wy, wz), signs


def _check_sample_shapes(volume, grid):
    if volume.dim() != 5 or grid.dim() != 5 or grid.shape[-1] != 3:
        raise ShapeMismatchError(
            f"expected volume (N,C,D,H,W) and grid (N,D,H,W,3), got {tuple(volume.shape)} and {tuple(grid.shape)}")
    if volume.shape[0] != grid.shape[0]:
        raise ShapeMismatchError(f"batch mismatch: {volume.shape[0]} volumes vs {grid.shape[0]} grids")


def _trilinear_forward(volume, grid):
    _check_sample_shapes(volume, grid)
    n_batch, channels = volume.shape[:2]
    out_dims = grid.shape[1:4]
    flat_volume = volume.reshape(n_batch, channels, -1)
    output = volume.new_zeros(n_batch, channels, grid[0, ..., 0].numel())

    for flat, valid, (wx, wy, wz), _ in _corner_terms(volume, grid):
        index = flat.unsqueeze(1).expand(-1, channels, -1)
        values = torch.gather(flat_volume, 2, index)
        weight = (wx * wy * wz * valid.to(volume.dtype)).unsqueeze(1)
        output = output + weight * values

    return output.reshape(n_batch, channels, *out_dims)


def trilinear_sample_backward(volume, grid, upstream_grad):
    """
    Analytic gradients of trilinear_sample

    Args:
        volume: (N, C, D, H, W) tensor
        grid: (N, D', H', W', 3) source coordinates
        upstream_grad: (N, C, D', H', W') gradient of the loss w.r.t. the output

    Returns:
        (grad_volume, grad_grid). The grid gradient uses the right-sided
        derivative at cell boundaries.
    """
    _check_sample_shapes(volume, grid)
    n_batch, channels, depth, height, width = volume.shape
    if upstream_grad.shape != (n_batch, channels) + tuple(grid.shape[1:4]):
        raise ShapeMismatchError(f"upstream gradient shape {tuple(upstream_grad.shape)} does not match output")

    flat_volume = volume.reshape(n_batch, channels, -1)
    flat_grad = upstream_grad.reshape(n_batch, channels, -1)
    grad_volume = torch.zeros_like(flat_volume)
    grad_x = volume.new_zeros(flat_grad.shape[0], flat_grad.shape[2])
    grad_y = torch.zeros_like(grad_x)
    grad_z = torch.zeros_like(grad_x)

    for flat, valid, (wx, wy, wz), (sx, sy, sz) in _corner_terms(volume, grid):
        mask = valid.to(volume.dtype)
        index = flat.unsqueeze(1).expand(-1, channels, -1)
        grad_volume.scatter_add_(2, index, flat_grad * (wx * wy * wz * mask).unsqueeze(1))

        values = torch.gather(flat_volume, 2, index)
        weighted = (flat_grad * values).sum(1) * mask
        grad_x = grad_x + weighted * sx * wy * wz
        grad_y = grad_y + weighted * wx * sy * wz
        grad_z = grad_z + weighted * wx * wy * sz

    grad_grid = torch.stack([grad_x * _index_scale(width),
                             grad_y * _index_scale(height),
                             grad_z * _index_scale(depth)], dim=-1)
    return grad_volume.reshape(volume.shape), grad_grid.reshape(grid.shape)


class TrilinearSampleFunction(torch.autograd.Function):
    """Trilinear resampling with zero padding and a hand-written backward"""

    @staticmethod
    def forward(ctx, volume, grid):
        ctx.save_for_backward(volume, grid)
        return _trilinear_forward(volume, grid)

    @staticmethod
    def backward(ctx, grad_output):
        volume, grid = ctx.saved_tensors
        grad_volume, grad_grid = trilinear_sample_backward(volume, grid, grad_output.contiguous())
        if not ctx.needs_input_grad[0]:
            grad_volume = None
        if not ctx.needs_input_grad[1]:
            grad_grid = None
        return grad_volume, grad_grid


def _is_canonical_grid(volume, grid):
    """True when grid is exactly the output lattice and carries no gradient"""
    dims = tuple(volume.shape[2:])
    if grid.requires_grad or tuple(grid.shape[1:4]) != dims:
        return False
    return torch.equal(grid, canonical_lattice(dims, dtype=grid.dtype, device=grid.device).expand_as(grid))


def trilinear_sample(volume, grid):
    """
    Resample a voxel grid at normalized source coordinates

    Args:
        volume: (C, D, H, W) or (N, C, D, H, W) tensor
        grid: (D', H', W', 3) or (N, D', H', W', 3); coordinates outside
            [-1, 1]^3 read zeros

    Returns:
        Resampled volume with the grid's spatial dims
    """
    volume = torch.as_tensor(volume)
    grid = torch.as_tensor(grid, dtype=volume.dtype, device=volume.device)
    if volume.dim() == 4:
        if grid.dim() != 4:
            raise ShapeMismatchError("unbatched volume needs an unbatched grid")
        return trilinear_sample(volume.unsqueeze(0), grid.unsqueeze(0))[0]
    _check_sample_shapes(volume, grid)
    if _is_canonical_grid(volume, grid):
        return volume.clone()
    return TrilinearSampleFunction.apply(volume, grid)


def warp_voxels(volume, pose):
    """
    Rigidly warp a voxel grid: rotation -> sample grid -> trilinear resample

    Args:
        volume: (C, D, H, W) or (N, C, D, H, W) tensor
        pose: EulerPose, or (6,) / (N, 6) tensor of angles then translation

    Returns:
        Warped volume with the same dims as the input
    """
    volume = torch.as_tensor(volume)
    if isinstance(pose, EulerPose):
        pose = torch.as_tensor(pose.as_array(), dtype=volume.dtype, device=volume.device)

    single = volume.dim() == 4
    if single:
        volume = volume.unsqueeze(0)
    pose = pose.reshape(-1, 6).to(volume.dtype)
    if pose.shape[0] != volume.shape[0]:
        raise ShapeMismatchError(f"{pose.shape[0]} poses for {volume.shape[0]} volumes")

    # constant zero pose: exact copy; poses that need gradients always go through the sampler
    if not pose.requires_grad and not torch.any(pose):
        return volume[0].clone() if single else volume.clone()

    rotation = euler_angles_to_matrix(pose[:, :3])
    grid = affine_grid(rotation, pose[:, 3:], tuple(volume.shape[2:]))
    warped = TrilinearSampleFunction.apply(volume, grid)
    return warped[0] if single else warped


# ---------------------------------------------------------------------------
# Trajectory alignment
# ---------------------------------------------------------------------------

def umeyama_align(src, tgt):
    """
    Closed-form least-squares similarity alignment of src onto tgt

    Args:
        src: (N, 3) points
        tgt: (N, 3) points

    Returns:
        SimilarityTransform minimizing sum ||tgt_i - (s R src_i + t)||^2
    """
    src = np.asarray(src, dtype=np.float64)
    tgt = np.asarray(tgt, dtype=np.float64)
    if src.shape != tgt.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ShapeMismatchError(f"expected matching (N, 3) arrays, got {src.shape} and {tgt.shape}")
    if src.shape[0] < 3:
        raise DegenerateConfigurationError(f"need at least 3 points, got {src.shape[0]}")

    n_points = src.shape[0]
    mu_src = src.mean(axis=0)
    mu_tgt = tgt.mean(axis=0)
    src_c = src - mu_src
    tgt_c = tgt - mu_tgt

    spread = np.linalg.svd(src_c, compute_uv=False)
    if spread[0] <= 1e-12 or spread[1] <= 1e-9 * spread[0]:
        raise DegenerateConfigurationError("source points are collinear or coincident")

    var_src = (src_c ** 2).sum() / n_points
    cov = tgt_c.T @ src_c / n_points
    u, d, vt = np.linalg.svd(cov)

    s = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        s[2, 2] = -1.0

    rotation = u @ s @ vt
    scale = np.trace(np.diag(d) @ s) / var_src
    translation = mu_tgt - scale * rotation @ mu_src
    return SimilarityTransform(scale, RotationMatrix(rotation), translation)


def aligned_pose_rmse(pred_traj, gt_traj):
    """
    RMSE of point distances after aligning pred_traj onto gt_traj

    Args:
        pred_traj: (N, 3) predicted positions
        gt_traj: (N, 3) ground-truth positions

    Returns:
        float RMSE
    """
    pred = np.asarray(pred_traj, dtype=np.float64)
    gt = np.asarray(gt_traj, dtype=np.float64)
    transform = umeyama_align(pred, gt)
    residual = transform.apply(pred) - gt
    return float(np.sqrt((residual ** 2).sum(axis=1).mean()))

"""Per-object input features: symbolic visual vectors and geometric vectors.

There is no pixel pipeline; the "visual" feature is a one-hot attribute
encoding pushed through a fixed seeded projection with orthonormal
columns, so distinct attribute bundles stay distinguishable and norms
are preserved exactly.
"""

from __future__ import annotations

import numpy as np

from .scenes import ATTRIBUTE_DIMS, AttributeSpace, Scene, SceneObject


def source_geometric(obj: SceneObject, image_size: tuple[int, int]) -> np.ndarray:
    """[x_c/W, y_c/H, w/W, h/H, area/(W*H)] from the pixel bbox."""
    w_img, h_img = image_size
    if w_img <= 0 or h_img <= 0:
        raise ValueError(f"image size must be positive, got {image_size}")
    x_c, y_c, w, h = obj.bbox
    return np.array(
        [x_c / w_img, y_c / h_img, w / w_img, h / h_img, (w * h) / (w_img * h_img)],
        dtype=np.float64,
    )


def relative_geometric(obj_i: SceneObject, obj_j: SceneObject) -> np.ndarray:
    """Neighbor j's center and extent measured in units of i's bbox size."""
    _, _, w_i, h_i = obj_i.bbox
    if w_i <= 0 or h_i <= 0:
        raise ValueError(f"source bbox must have positive extent, got {obj_i.bbox}")
    x_j, y_j, w_j, h_j = obj_j.bbox
    return np.array(
        [x_j / w_i, y_j / h_i, w_j / w_i, h_j / h_i, (w_j * h_j) / (w_i * h_i)],
        dtype=np.float64,
    )


def geometric_vector(
    i: int, phi: tuple[int, ...] | list[int], scene: Scene, phi_max: int
) -> np.ndarray:
    """o_sg(i) followed by o_rg(i, j) blocks for j in phi's order, j != i,
    zero-padded to 5 + 5*(phi_max - 1)."""
    if i not in phi:
        raise ValueError(f"object {i} not in the index set {list(phi)}")
    if len(phi) > phi_max:
        raise ValueError(f"index set of size {len(phi)} exceeds phi_max={phi_max}")
    obj_i = scene.objects[i]
    parts = [source_geometric(obj_i, scene.image_size)]
    for j in phi:
        if j == i:
            continue
        parts.append(relative_geometric(obj_i, scene.objects[j]))
    out = np.concatenate(parts)
    full = np.zeros(5 + 5 * (phi_max - 1), dtype=np.float64)
    full[: out.shape[0]] = out
    return full


class FeatureProjector:
    """Fixed seeded map from attribute one-hots to d_v-dim visual features.

    The projection matrix has orthonormal columns (requires d_v >= one-hot
    width), so ``|o_v| == |one-hot|`` exactly.  With ``identity=True`` and
    matching width the one-hots pass through unchanged.
    """

    def __init__(
        self,
        space: AttributeSpace,
        d_v: int = 16,
        seed: int = 0,
        identity: bool = False,
    ):
        self.space = space
        self.d_v = d_v
        self.seed = seed
        self.identity = identity
        width = space.onehot_width
        if identity:
            if d_v != width:
                raise ValueError(
                    f"identity projection needs d_v == one-hot width ({width}), got {d_v}"
                )
            self.matrix = np.eye(width)
        else:
            if d_v < width:
                raise ValueError(
                    f"d_v={d_v} smaller than one-hot width {width}; norms would collapse"
                )
            rng = np.random.default_rng(seed)
            a = rng.normal(size=(d_v, width))
            q, r = np.linalg.qr(a)
            # canonical sign so the matrix is unique given the seed
            self.matrix = q * np.sign(np.diag(r))[None, :]

    def onehot(self, obj: SceneObject) -> np.ndarray:
        parts = []
        for dim in ATTRIBUTE_DIMS:
            values = self.space.values(dim)
            vec = np.zeros(len(values), dtype=np.float64)
            val = obj.attribute(dim)
            try:
                vec[values.index(val)] = 1.0
            except ValueError:
                raise ValueError(f"unknown {dim} value {val!r} for this space") from None
            parts.append(vec)
        return np.concatenate(parts)

    def __call__(self, obj: SceneObject) -> np.ndarray:
        return self.matrix @ self.onehot(obj)

    def scene_features(self, scene: Scene, n_max: int) -> tuple[np.ndarray, np.ndarray]:
        """(o_v rows, o_g rows) padded to n_max; padded rows are zero."""
        n = len(scene)
        ids = tuple(range(n))
        o_v = np.zeros((n_max, self.d_v), dtype=np.float64)
        o_g = np.zeros((n_max, 5 + 5 * (n_max - 1)), dtype=np.float64)
        for obj in scene.objects:
            o_v[obj.id] = self(obj)
            o_g[obj.id] = geometric_vector(obj.id, ids, scene, n_max)
        return o_v, o_g

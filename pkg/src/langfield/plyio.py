"""Scene persistence as binary little-endian PLY.

One `vertex` element, float32 properties in this exact order:

    x y z rot_0 rot_1 rot_2 rot_3 scale_0 scale_1 scale_2 opacity
    red green blue flang_0 flang_1 flang_2 fins_0 fins_1 fins_2

scale_* hold log values and opacity holds the logit, matching the in-memory
parameterization. Loading validates the header, property list, and payload
finiteness, naming the offending element on failure.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import FormatError
from .scene import GaussianScene, as_f32_grid

SCENE_PROPERTIES = (
    "x",
    "y",
    "z",
    "rot_0",
    "rot_1",
    "rot_2",
    "rot_3",
    "scale_0",
    "scale_1",
    "scale_2",
    "opacity",
    "red",
    "green",
    "blue",
    "flang_0",
    "flang_1",
    "flang_2",
    "fins_0",
    "fins_1",
    "fins_2",
)


def _header(properties, count: int) -> bytes:
    lines = ["ply", "format binary_little_endian 1.0", f"element vertex {count}"]
    lines += [f"property float {name}" for name in properties]
    lines.append("end_header")
    return ("\n".join(lines) + "\n").encode("ascii")


def _pack_rows(columns: list[np.ndarray]) -> bytes:
    mat = np.stack([np.asarray(c, dtype=np.float64) for c in columns], axis=1)
    return np.ascontiguousarray(mat.astype("<f4")).tobytes()


def save_scene(path: str | Path, scene: GaussianScene) -> None:
    scene.validate()
    cols = [
        scene.position[:, 0],
        scene.position[:, 1],
        scene.position[:, 2],
        scene.rotation[:, 0],
        scene.rotation[:, 1],
        scene.rotation[:, 2],
        scene.rotation[:, 3],
        scene.log_scale[:, 0],
        scene.log_scale[:, 1],
        scene.log_scale[:, 2],
        scene.opacity_logit,
        scene.color[:, 0],
        scene.color[:, 1],
        scene.color[:, 2],
        scene.f_lang[:, 0],
        scene.f_lang[:, 1],
        scene.f_lang[:, 2],
        scene.f_ins[:, 0],
        scene.f_ins[:, 1],
        scene.f_ins[:, 2],
    ]
    Path(path).write_bytes(_header(SCENE_PROPERTIES, scene.count) + _pack_rows(cols))


def _parse_header(raw: bytes, path) -> tuple[int, list[str], int]:
    end = raw.find(b"end_header\n")
    if not raw.startswith(b"ply\n") or end < 0:
        raise FormatError(f"{path}: not a PLY file")
    body_start = end + len(b"end_header\n")
    lines = raw[:end].decode("ascii", errors="replace").splitlines()
    count = None
    props: list[str] = []
    in_vertex = False
    for line in lines[1:]:
        parts = line.split()
        if not parts or parts[0] == "comment":
            continue
        if parts[0] == "format":
            if parts[1:] != ["binary_little_endian", "1.0"]:
                raise FormatError(f"{path}: format must be binary_little_endian 1.0")
        elif parts[0] == "element":
            if parts[1] == "vertex":
                in_vertex = True
                count = int(parts[2])
            else:
                in_vertex = False
        elif parts[0] == "property":
            if not in_vertex:
                raise FormatError(f"{path}: unexpected element {parts!r}")
            if parts[1] != "float":
                raise FormatError(f"{path}: property {parts[-1]!r} must be float")
            props.append(parts[2])
    if count is None:
        raise FormatError(f"{path}: missing vertex element")
    return count, props, body_start


def _load_rows(path: str | Path, expected_props) -> np.ndarray:
    raw = Path(path).read_bytes()
    count, props, body_start = _parse_header(raw, path)
    missing = [p for p in expected_props if p not in props]
    if missing:
        raise FormatError(f"{path}: missing properties {missing}")
    if list(props) != list(expected_props):
        raise FormatError(
            f"{path}: property list {props} does not match expected order {list(expected_props)}"
        )
    payload = raw[body_start:]
    want = count * len(props) * 4
    if len(payload) != want:
        raise FormatError(f"{path}: payload is {len(payload)} bytes, expected {want}")
    mat = np.frombuffer(payload, dtype="<f4").reshape(count, len(props)).astype(np.float64)
    for j, name in enumerate(props):
        if not np.all(np.isfinite(mat[:, j])):
            raise FormatError(f"{path}: non-finite value in property {name!r}")
    return mat


def load_scene(path: str | Path) -> GaussianScene:
    mat = _load_rows(path, SCENE_PROPERTIES)
    scene = GaussianScene(
        position=mat[:, 0:3].copy(),
        rotation=mat[:, 3:7].copy(),
        log_scale=mat[:, 7:10].copy(),
        opacity_logit=mat[:, 10].copy(),
        color=mat[:, 11:14].copy(),
        f_lang=mat[:, 14:17].copy(),
        f_ins=mat[:, 17:20].copy(),
    )
    scene.validate()
    return scene


QUERY_CLOUD_PROPERTIES = ("x", "y", "z", "score")


def save_query_cloud(path: str | Path, positions: np.ndarray, scores: np.ndarray) -> None:
    """Selected Gaussian centers with their relevancy scores."""
    positions = as_f32_grid(positions).reshape(-1, 3)
    scores = as_f32_grid(scores).reshape(-1)
    cols = [positions[:, 0], positions[:, 1], positions[:, 2], scores]
    Path(path).write_bytes(_header(QUERY_CLOUD_PROPERTIES, len(scores)) + _pack_rows(cols))


def load_query_cloud(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    mat = _load_rows(path, QUERY_CLOUD_PROPERTIES)
    return mat[:, 0:3].copy(), mat[:, 3].copy()

"""Three-stage optimization loop.

Stage 1 fits geometry and appearance (rgb + flatness). Stage 2 adds the
language field losses on top and keeps the optimizer moments. Stage 3
freezes everything except f_ins, which starts as a bit-exact copy of
f_lang and is pushed apart per instance by the contrastive hinge.

Determinism: the per-iteration RNG is derived from (seed, stage,
iteration-within-stage), so a checkpoint resume replays the identical
trajectory. Parameters and moments are kept on the float32 grid after
every step so checkpoints round-trip bit-identically through float32
files.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidParameterError, NonFiniteGradientError
from .hcam import MaskSet
from .losses import (
    instance_mean,
    instance_mean_backward,
    knn_indices,
    loss_flat,
    loss_geo,
    loss_icd,
    loss_rgb,
    loss_s3d,
    loss_sem_l2,
    loss_sg,
)
from .plyio import load_scene, save_scene
from .raster import SceneGrads, render, render_backward
from .scene import Camera, GaussianScene, PARAM_NAMES, as_f32_grid, quat_normalize
from .tensorio import load_tensor, save_tensor

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-15
PRUNE_INTERVAL = 500
KNN_REFRESH_INTERVAL = 100

STAGE1_GROUPS = ("position", "rotation", "log_scale", "opacity_logit", "color")
STAGE2_GROUPS = STAGE1_GROUPS + ("f_lang",)
STAGE3_GROUPS = ("f_ins",)


@dataclass
class TrainConfig:
    stage1_iters: int = 7000
    stage2_iters: int = 23000
    stage3_iters: int = 10000
    lr_position: float = 1.6e-4
    lr_rotation: float = 1e-3
    lr_log_scale: float = 5e-3
    lr_opacity: float = 5e-2
    lr_color: float = 2.5e-3
    lr_f_lang: float = 2.5e-3
    lr_f_ins: float = 2.5e-3
    w_rgb: float = 1.0
    w_flat: float = 100.0
    w_geo: float = 0.05
    w_sem: float = 1.0
    w_sg: float = 0.1
    w_s3d: float = 0.01
    w_icd: float = 1.0
    hierarchy: str = "l"
    knn_k: int = 8
    d_min: float = 0.5
    pair_cap: int = 1024
    prune_opacity: float = 0.005
    seed: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.hierarchy not in ("s", "m", "l"):
            raise InvalidParameterError(f"hierarchy must be s, m, or l, got {self.hierarchy!r}")

    def lr_for(self, group: str) -> float:
        key = "lr_opacity" if group == "opacity_logit" else f"lr_{group}"
        return float(getattr(self, key))


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(TrainConfig)}


def parse_config_text(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """key = value lines; # starts a comment; unknown keys are rejected."""
    values = dataclasses.asdict(base) if base else dataclasses.asdict(TrainConfig())
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"line {lineno}: expected key = value, got {line!r}")
        key, _, raw = line.partition("=")
        key = key.strip()
        raw = raw.strip()
        values[key] = _convert_config_value(key, raw, lineno)
    return TrainConfig(**values)


def _convert_config_value(key: str, raw: str, lineno: int | None = None):
    where = f"line {lineno}: " if lineno is not None else ""
    if key not in _FIELD_TYPES:
        raise InvalidParameterError(f"{where}unknown config key {key!r}")
    ftype = _FIELD_TYPES[key]
    try:
        if ftype in ("int", int):
            return int(raw)
        if ftype in ("float", float):
            return float(raw)
        return raw
    except ValueError:
        raise FormatError(f"{where}bad value for {key}: {raw!r}") from None


def apply_overrides(config: TrainConfig, overrides: list[str]) -> TrainConfig:
    """Apply key=value strings from the command line."""
    values = dataclasses.asdict(config)
    for item in overrides:
        if "=" not in item:
            raise InvalidParameterError(f"override must be key=value, got {item!r}")
        key, _, raw = item.partition("=")
        values[key.strip()] = _convert_config_value(key.strip(), raw.strip())
    return TrainConfig(**values)


def format_config(config: TrainConfig) -> str:
    lines = [f"{f.name} = {getattr(config, f.name)}" for f in dataclasses.fields(TrainConfig)]
    return "\n".join(lines)


@dataclass
class ViewData:
    camera: Camera
    rgb: np.ndarray  # (H, W, 3)
    masks: MaskSet | None = None
    latent: dict | None = None  # hierarchy -> (H, W, 3) target map


@dataclass
class TrainState:
    scene: GaussianScene
    m: dict
    v: dict
    adam_t: int = 0
    stage: int = 1
    stage_iter: int = 0
    global_iter: int = 0
    loss_rows: list = field(default_factory=list)
    neighbors: np.ndarray | None = None


def init_state(scene: GaussianScene, config: TrainConfig) -> TrainState:
    scene = scene.copy()
    for name in PARAM_NAMES:
        setattr(scene, name, as_f32_grid(getattr(scene, name)))
    m = {name: np.zeros_like(getattr(scene, name)) for name in PARAM_NAMES}
    v = {name: np.zeros_like(getattr(scene, name)) for name in PARAM_NAMES}
    return TrainState(scene=scene, m=m, v=v)


def optimizer_step(state: TrainState, grads: SceneGrads, config: TrainConfig, groups) -> None:
    """One Adam step over the listed parameter groups only.

    Untouched groups keep their bits. Updated rotations are renormalized and
    colors clipped to [0, 1]; everything updated lands back on the float32
    grid so persisted state is exact.
    """
    state.adam_t += 1
    t = state.adam_t
    bias1 = 1.0 - ADAM_BETA1**t
    bias2 = 1.0 - ADAM_BETA2**t
    for name in groups:
        if name not in PARAM_NAMES:
            raise InvalidParameterError(f"unknown parameter group {name!r}")
        g = getattr(grads, name)
        m = state.m[name]
        v = state.v[name]
        m *= ADAM_BETA1
        m += (1 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1 - ADAM_BETA2) * g * g
        mhat = m / bias1
        vhat = v / bias2
        p = getattr(state.scene, name)
        p -= config.lr_for(name) * mhat / (np.sqrt(vhat) + ADAM_EPS)
        if name == "rotation":
            p[...] = quat_normalize(p)
        elif name == "color":
            np.clip(p, 0.0, 1.0, out=p)
        p[...] = as_f32_grid(p)
        m[...] = as_f32_grid(m)
        v[...] = as_f32_grid(v)


def _prune(state: TrainState, config: TrainConfig) -> None:
    alpha0 = 1.0 / (1.0 + np.exp(-state.scene.opacity_logit))
    keep = alpha0 >= config.prune_opacity
    if keep.all() or not keep.any():
        return
    state.scene = state.scene.select(keep)
    for name in PARAM_NAMES:
        state.m[name] = state.m[name][keep].copy()
        state.v[name] = state.v[name][keep].copy()
    state.neighbors = None


def _check_finite(report, iteration: int) -> None:
    for arr in report.grads.values():
        if not np.all(np.isfinite(arr)):
            raise NonFiniteGradientError(report.name, iteration)


def _log(state: TrainState, reports, weights) -> None:
    total = 0.0
    for rep in reports:
        state.loss_rows.append((state.global_iter, state.stage, rep.name, rep.value))
        total += weights[rep.name] * rep.value
    if not np.isfinite(total):
        raise NonFiniteGradientError("total", state.global_iter)
    state.loss_rows.append((state.global_iter, state.stage, "total", total))


def _iter_rng(config: TrainConfig, stage: int, stage_iter: int) -> np.random.Generator:
    return np.random.default_rng((config.seed, stage, stage_iter))


def _require_views(views) -> None:
    if not views:
        raise InvalidParameterError("need at least one training view")


def train_stage1(state: TrainState, views: list, config: TrainConfig, callback=None) -> TrainState:
    _require_views(views)
    weights = {"rgb": config.w_rgb, "flat": config.w_flat}
    while state.stage_iter < config.stage1_iters:
        rng = _iter_rng(config, 1, state.stage_iter)
        view = views[int(rng.integers(len(views)))]
        out = render(state.scene, view.camera, channels="color")
        rep_rgb = loss_rgb(out.color, view.rgb)
        rep_flat = loss_flat(state.scene.log_scale)
        _check_finite(rep_rgb, state.global_iter)
        _check_finite(rep_flat, state.global_iter)
        grads = render_backward(out, {"color": config.w_rgb * rep_rgb.grads["rendered"]})
        grads.log_scale += config.w_flat * rep_flat.grads["log_scale"]
        optimizer_step(state, grads, config, STAGE1_GROUPS)
        _log(state, [rep_rgb, rep_flat], weights)
        state.stage_iter += 1
        state.global_iter += 1
        if state.stage_iter % PRUNE_INTERVAL == 0:
            _prune(state, config)
        if callback:
            callback(state)
    state.stage = 2
    state.stage_iter = 0
    state.neighbors = None
    return state


def train_stage2(state: TrainState, views: list, config: TrainConfig, callback=None) -> TrainState:
    _require_views(views)
    weights = {
        "rgb": config.w_rgb,
        "flat": config.w_flat,
        "geo": config.w_geo,
        "sem_l2": config.w_sem,
        "sg": config.w_sg,
        "s3d": config.w_s3d,
    }
    h = config.hierarchy
    for view in views:
        if view.latent is None or h not in view.latent or view.masks is None:
            raise InvalidParameterError("stage 2 views need latent targets and masks")
    while state.stage_iter < config.stage2_iters:
        if state.stage_iter % KNN_REFRESH_INTERVAL == 0 or state.neighbors is None:
            state.neighbors = knn_indices(state.scene.position, config.knn_k)
        rng = _iter_rng(config, 2, state.stage_iter)
        view = views[int(rng.integers(len(views)))]
        sg_seed = int(rng.integers(0, 2**31 - 1))
        out = render(state.scene, view.camera, channels="lang")
        mask = view.masks.level(h)
        rep_rgb = loss_rgb(out.color, view.rgb)
        rep_flat = loss_flat(state.scene.log_scale)
        rep_geo = loss_geo(out.normal, out.depth, out.alpha, view.camera)
        rep_sem = loss_sem_l2(out.feature, view.latent[h])
        rep_sg = loss_sg(out.feature, mask, pair_cap=config.pair_cap, seed=sg_seed)
        rep_s3d = loss_s3d(
            state.scene.f_lang, state.scene.position, k=config.knn_k, neighbors=state.neighbors
        )
        reports = [rep_rgb, rep_flat, rep_geo, rep_sem, rep_sg, rep_s3d]
        for rep in reports:
            _check_finite(rep, state.global_iter)
        grads = render_backward(
            out,
            {
                "color": config.w_rgb * rep_rgb.grads["rendered"],
                "normal": config.w_geo * rep_geo.grads["normal"],
                "feature": config.w_sem * rep_sem.grads["rendered"]
                + config.w_sg * rep_sg.grads["rendered"],
            },
        )
        grads.log_scale += config.w_flat * rep_flat.grads["log_scale"]
        grads.f_lang += config.w_s3d * rep_s3d.grads["f_lang"]
        optimizer_step(state, grads, config, STAGE2_GROUPS)
        _log(state, reports, weights)
        state.stage_iter += 1
        state.global_iter += 1
        if callback:
            callback(state)
    state.stage = 3
    state.stage_iter = 0
    return state


def train_stage3(state: TrainState, views: list, config: TrainConfig, callback=None) -> TrainState:
    _require_views(views)
    weights = {"icd": config.w_icd}
    h = config.hierarchy
    for view in views:
        if view.masks is None:
            raise InvalidParameterError("stage 3 views need masks")
    if state.stage_iter == 0:
        # instance features start as an exact copy of the language features
        state.scene.f_ins = state.scene.f_lang.copy()
        state.m["f_ins"] = np.zeros_like(state.scene.f_ins)
        state.v["f_ins"] = np.zeros_like(state.scene.f_ins)
    while state.stage_iter < config.stage3_iters:
        rng = _iter_rng(config, 3, state.stage_iter)
        view = views[int(rng.integers(len(views)))]
        out = render(state.scene, view.camera, channels="ins")
        mask = view.masks.level(h)
        ids, means = instance_mean(out.feature_ins, mask)
        rep = loss_icd(means, d_min=config.d_min)
        _check_finite(rep, state.global_iter)
        gmap = instance_mean_backward(mask, ids, config.w_icd * rep.grads["means"])
        grads = render_backward(out, {"feature_ins": gmap})
        optimizer_step(state, grads, config, STAGE3_GROUPS)
        _log(state, [rep], weights)
        state.stage_iter += 1
        state.global_iter += 1
        if callback:
            callback(state)
    return state


def run_training(
    scene: GaussianScene,
    views: list,
    config: TrainConfig,
    state: TrainState | None = None,
    checkpoint_dir: str | Path | None = None,
) -> TrainState:
    """Run the full schedule (or the remainder of one from a checkpoint)."""
    if state is None:
        state = init_state(scene, config)
    callback = None
    if checkpoint_dir is not None and config.checkpoint_every > 0:
        checkpoint_dir = Path(checkpoint_dir)

        def callback(st: TrainState) -> None:
            if st.global_iter % config.checkpoint_every == 0:
                save_checkpoint(checkpoint_dir / f"iter_{st.global_iter:07d}", st, config)

    if state.stage == 1:
        state = train_stage1(state, views, config, callback)
    if state.stage == 2:
        state = train_stage2(state, views, config, callback)
    if state.stage == 3:
        state = train_stage3(state, views, config, callback)
    return state


# ---------------------------------------------------------------------------
# checkpoints and logs

def save_checkpoint(directory: str | Path, state: TrainState, config: TrainConfig) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_scene(directory / "scene.ply", state.scene)
    for name in PARAM_NAMES:
        save_tensor(directory / f"m_{name}.lstf", state.m[name].astype(np.float32))
        save_tensor(directory / f"v_{name}.lstf", state.v[name].astype(np.float32))
    meta = {
        "adam_t": state.adam_t,
        "stage": state.stage,
        "stage_iter": state.stage_iter,
        "global_iter": state.global_iter,
    }
    (directory / "meta.json").write_text(json.dumps(meta, indent=1), encoding="utf-8")
    if state.neighbors is not None:
        # resume must reuse the graph from the last refresh, not rebuild it
        # from drifted positions, or trajectories would diverge
        save_tensor(directory / "neighbors.lstf", state.neighbors.astype(np.int32))
    (directory / "config.txt").write_text(format_config(config) + "\n", encoding="utf-8")


def load_checkpoint(directory: str | Path) -> tuple[TrainState, TrainConfig]:
    directory = Path(directory)
    scene = load_scene(directory / "scene.ply")
    try:
        meta = json.loads((directory / "meta.json").read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"{directory}: bad checkpoint metadata ({exc})") from None
    m = {}
    v = {}
    for name in PARAM_NAMES:
        m[name] = load_tensor(directory / f"m_{name}.lstf").astype(np.float64)
        v[name] = load_tensor(directory / f"v_{name}.lstf").astype(np.float64)
        if m[name].shape != getattr(scene, name).shape:
            raise FormatError(f"{directory}: moment shape mismatch for {name}")
    config = parse_config_text((directory / "config.txt").read_text(encoding="utf-8"))
    neighbors = None
    if (directory / "neighbors.lstf").exists():
        neighbors = load_tensor(directory / "neighbors.lstf").astype(np.int64)
    state = TrainState(
        scene=scene,
        m=m,
        v=v,
        adam_t=int(meta["adam_t"]),
        stage=int(meta["stage"]),
        stage_iter=int(meta["stage_iter"]),
        global_iter=int(meta["global_iter"]),
        neighbors=neighbors,
    )
    return state, config


def write_loss_log(path: str | Path, rows) -> None:
    lines = ["iteration,stage,loss_name,value"]
    for iteration, stage, name, value in rows:
        lines.append(f"{iteration},{stage},{name},{value!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

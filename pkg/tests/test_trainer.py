import dataclasses

import numpy as np
import pytest

import langfield.trainer as trainer
from langfield.errors import (
    FormatError,
    InvalidParameterError,
    NonFiniteGradientError,
)
from langfield.hcam import MaskSet
from langfield.raster import SceneGrads
from langfield.scene import Camera, Primitive, as_f32_grid, make_synthetic_scene
from langfield.trainer import (
    STAGE1_GROUPS,
    TrainConfig,
    ViewData,
    apply_overrides,
    format_config,
    init_state,
    load_checkpoint,
    optimizer_step,
    parse_config_text,
    run_training,
    save_checkpoint,
    train_stage1,
    train_stage2,
    train_stage3,
    write_loss_log,
)


def tiny_scene(n=6, seed=5):
    prims = [
        Primitive(
            kind="sphere",
            label=1,
            color=(0.9, 0.2, 0.1),
            center=(0.0, 0.0, 0.0),
            size=(0.35,),
            n_gaussians=n,
            n_points=16,
        )
    ]
    scene, _, _, _ = make_synthetic_scene(prims, seed=seed)
    # nonzero language features, as a scene coming out of stage 2 would have;
    # all-equal features leave the instance hinge at its flat point
    rng = np.random.default_rng(seed + 1)
    scene.f_lang = as_f32_grid(0.3 * rng.normal(size=(scene.count, 3)))
    return scene


def tiny_views(n_views=2, size=12):
    views = []
    half = np.zeros((size, size), dtype=np.int32)
    half[:, size // 2 :] = 1
    half[: size // 2, : size // 2] = 2
    masks = MaskSet(s=half, m=half, l=half)
    for i in range(n_views):
        cam = Camera.look_at(
            eye=(0.15 * i, 0.0, -2.5),
            target=(0.0, 0.0, 0.0),
            width=size,
            height=size,
            fx=10.0,
        )
        rgb = np.full((size, size, 3), 0.5)
        latent = {h: np.full((size, size, 3), 0.2) for h in ("s", "m", "l")}
        views.append(ViewData(camera=cam, rgb=rgb, masks=masks, latent=latent))
    return views


def short_config(**kw):
    base = dict(
        stage1_iters=3,
        stage2_iters=3,
        stage3_iters=3,
        knn_k=3,
        seed=11,
    )
    base.update(kw)
    return TrainConfig(**base)


# ---------------------------------------------------------------------------
# config handling

def test_config_text_roundtrip():
    cfg = TrainConfig(stage1_iters=42, lr_position=3e-4, hierarchy="m", seed=9)
    parsed = parse_config_text(format_config(cfg))
    assert parsed == cfg


def test_config_comments_and_blanks():
    text = """
    # schedule
    stage1_iters = 5   # keep it short

    seed = 3
    """
    cfg = parse_config_text(text)
    assert cfg.stage1_iters == 5
    assert cfg.seed == 3
    assert cfg.stage2_iters == TrainConfig().stage2_iters


def test_config_unknown_key_rejected():
    with pytest.raises(InvalidParameterError, match="unknown config key"):
        parse_config_text("warmup_iters = 10")


def test_config_bad_value_rejected():
    with pytest.raises(FormatError, match="bad value"):
        parse_config_text("stage1_iters = soon")


def test_config_bad_hierarchy_rejected():
    with pytest.raises(InvalidParameterError):
        parse_config_text("hierarchy = q")


def test_overrides():
    cfg = apply_overrides(TrainConfig(), ["seed=4", "lr_color = 0.01"])
    assert cfg.seed == 4
    assert cfg.lr_color == 0.01
    with pytest.raises(InvalidParameterError):
        apply_overrides(cfg, ["seed"])


def test_lr_for_maps_opacity():
    cfg = TrainConfig(lr_opacity=0.125)
    assert cfg.lr_for("opacity_logit") == 0.125
    assert cfg.lr_for("position") == cfg.lr_position


# ---------------------------------------------------------------------------
# optimizer

def test_adam_first_step_is_signed_lr():
    # bias correction makes the first step lr * g / (|g| + eps) ~ lr * sign(g)
    scene = tiny_scene()
    cfg = TrainConfig(lr_position=1e-3)
    state = init_state(scene, cfg)
    before = state.scene.position.copy()
    grads = SceneGrads.zeros(scene.count)
    rng = np.random.default_rng(0)
    g = rng.normal(size=before.shape)
    grads.position += g
    optimizer_step(state, grads, cfg, groups=("position",))
    delta = state.scene.position - before
    # float32 snapping of the parameter contributes ~ulp(0.35) of slack
    assert np.allclose(delta, -1e-3 * np.sign(g), rtol=2e-4, atol=1e-7)


def test_zero_grad_fresh_state_is_noop():
    scene = tiny_scene()
    state = init_state(scene, TrainConfig())
    before = state.scene.position.copy()
    optimizer_step(state, SceneGrads.zeros(scene.count), TrainConfig(), groups=("position",))
    assert state.scene.position.tobytes() == before.tobytes()


def test_moments_move_params_without_fresh_grad():
    # this is why frozen stages must exclude groups instead of zeroing grads
    scene = tiny_scene()
    cfg = TrainConfig()
    state = init_state(scene, cfg)
    grads = SceneGrads.zeros(scene.count)
    grads.position += 1.0
    optimizer_step(state, grads, cfg, groups=("position",))
    after_first = state.scene.position.copy()
    optimizer_step(state, SceneGrads.zeros(scene.count), cfg, groups=("position",))
    assert not np.array_equal(state.scene.position, after_first)


def test_excluded_groups_keep_bits():
    scene = tiny_scene()
    cfg = TrainConfig()
    state = init_state(scene, cfg)
    before = state.scene.color.copy()
    grads = SceneGrads.zeros(scene.count)
    grads.position += 1.0
    grads.color += 1.0  # present but color is not in the group list
    optimizer_step(state, grads, cfg, groups=("position",))
    assert state.scene.color.tobytes() == before.tobytes()


def test_updated_rotation_stays_unit():
    scene = tiny_scene()
    cfg = TrainConfig(lr_rotation=0.05)
    state = init_state(scene, cfg)
    grads = SceneGrads.zeros(scene.count)
    grads.rotation += np.random.default_rng(1).normal(size=(scene.count, 4))
    optimizer_step(state, grads, cfg, groups=("rotation",))
    norms = np.linalg.norm(state.scene.rotation, axis=1)
    assert np.all(np.abs(norms - 1.0) < 1e-6)


def test_unknown_group_rejected():
    scene = tiny_scene()
    state = init_state(scene, TrainConfig())
    with pytest.raises(InvalidParameterError):
        optimizer_step(state, SceneGrads.zeros(scene.count), TrainConfig(), groups=("albedo",))


# ---------------------------------------------------------------------------
# stage loops

def test_stage1_runs_and_logs():
    state = init_state(tiny_scene(), short_config())
    train_stage1(state, tiny_views(), short_config())
    names = {row[2] for row in state.loss_rows}
    assert names == {"rgb", "flat", "total"}
    assert state.stage == 2 and state.stage_iter == 0
    assert state.global_iter == 3
    iters = [row[0] for row in state.loss_rows]
    assert iters == sorted(iters)


def test_stage1_prunes_faint_gaussians(monkeypatch):
    monkeypatch.setattr(trainer, "PRUNE_INTERVAL", 2)
    scene = tiny_scene(n=8)
    scene.opacity_logit[:3] = -9.0  # alpha ~ 1e-4, far below the cutoff
    cfg = short_config(stage1_iters=2, lr_opacity=1e-4)
    state = init_state(scene, cfg)
    train_stage1(state, tiny_views(), cfg)
    assert state.scene.count == 5
    assert state.m["position"].shape == (5, 3)
    assert state.v["opacity_logit"].shape == (5,)


def test_stage2_runs_and_logs_all_losses():
    cfg = short_config()
    state = init_state(tiny_scene(n=8), cfg)
    state.stage = 2
    train_stage2(state, tiny_views(), cfg)
    names = {row[2] for row in state.loss_rows if row[1] == 2}
    assert names == {"rgb", "flat", "geo", "sem_l2", "sg", "s3d", "total"}
    assert state.neighbors is not None and state.neighbors.shape == (8, 3)


def test_stage2_requires_targets():
    cfg = short_config()
    state = init_state(tiny_scene(n=8), cfg)
    state.stage = 2
    views = tiny_views()
    views[0].latent = None
    with pytest.raises(InvalidParameterError, match="latent"):
        train_stage2(state, views, cfg)


def test_stage3_copies_f_lang_and_freezes_rest():
    cfg = short_config(stage3_iters=0)
    state = init_state(tiny_scene(n=8), cfg)
    state.scene.f_ins[...] = 7.0  # junk that the entry copy must replace
    state.stage = 3
    train_stage3(state, tiny_views(), cfg)
    assert state.scene.f_ins.tobytes() == state.scene.f_lang.tobytes()

    cfg = short_config(stage3_iters=4)
    state = init_state(tiny_scene(n=8), cfg)
    state.stage = 3
    frozen = {
        name: getattr(state.scene, name).copy()
        for name in ("position", "rotation", "log_scale", "opacity_logit", "color", "f_lang")
    }
    train_stage3(state, tiny_views(), cfg)
    for name, before in frozen.items():
        assert getattr(state.scene, name).tobytes() == before.tobytes(), name
    assert not np.array_equal(state.scene.f_ins, state.scene.f_lang)
    names = {row[2] for row in state.loss_rows}
    assert names == {"icd", "total"}


def test_full_schedule_is_deterministic():
    cfg = short_config()
    views = tiny_views()
    s1 = run_training(tiny_scene(n=8), views, cfg)
    s2 = run_training(tiny_scene(n=8), views, cfg)
    for name in ("position", "rotation", "log_scale", "opacity_logit", "color", "f_lang", "f_ins"):
        assert getattr(s1.scene, name).tobytes() == getattr(s2.scene, name).tobytes(), name
    assert s1.loss_rows == s2.loss_rows


def test_nonfinite_target_aborts_naming_loss():
    cfg = short_config()
    views = tiny_views()
    views[0].rgb = views[0].rgb.copy()
    views[0].rgb[3, 3, 0] = np.nan
    views[1].rgb = views[0].rgb
    state = init_state(tiny_scene(), cfg)
    with pytest.raises(NonFiniteGradientError) as exc:
        train_stage1(state, views, cfg)
    assert exc.value.loss_name == "rgb"


def test_empty_view_list_rejected():
    state = init_state(tiny_scene(), short_config())
    with pytest.raises(InvalidParameterError):
        train_stage1(state, [], short_config())


# ---------------------------------------------------------------------------
# checkpointing

def test_checkpoint_roundtrip_bits(tmp_path):
    cfg = short_config(stage1_iters=5)
    state = init_state(tiny_scene(n=8), cfg)
    train_stage1(state, tiny_views(), cfg)
    save_checkpoint(tmp_path / "ck", state, cfg)
    loaded, loaded_cfg = load_checkpoint(tmp_path / "ck")
    assert loaded_cfg == cfg
    assert loaded.adam_t == state.adam_t
    assert loaded.stage == state.stage and loaded.stage_iter == state.stage_iter
    for name in ("position", "rotation", "color"):
        assert getattr(loaded.scene, name).tobytes() == getattr(state.scene, name).tobytes()
        assert loaded.m[name].tobytes() == state.m[name].tobytes()
        assert loaded.v[name].tobytes() == state.v[name].tobytes()


def test_resume_matches_uninterrupted_run(tmp_path):
    # a run paused at a checkpoint must land on the exact same bits
    cfg = short_config(stage1_iters=4, stage2_iters=7, stage3_iters=3, checkpoint_every=5)
    views = tiny_views()
    full = run_training(tiny_scene(n=8), views, cfg, checkpoint_dir=tmp_path)
    loaded, loaded_cfg = load_checkpoint(tmp_path / "iter_0000010")
    assert loaded.stage == 2
    resumed = run_training(None, views, loaded_cfg, state=loaded)
    for name in ("position", "rotation", "log_scale", "opacity_logit", "color", "f_lang", "f_ins"):
        assert getattr(resumed.scene, name).tobytes() == getattr(full.scene, name).tobytes(), name
    assert resumed.adam_t == full.adam_t
    for name in ("position", "f_ins"):
        assert resumed.m[name].tobytes() == full.m[name].tobytes()
        assert resumed.v[name].tobytes() == full.v[name].tobytes()


def test_checkpoint_stores_neighbor_graph(tmp_path):
    cfg = short_config(stage1_iters=0, stage2_iters=2)
    state = init_state(tiny_scene(n=8), cfg)
    state.stage = 2
    train_stage2(state, tiny_views(), cfg)
    save_checkpoint(tmp_path / "ck", state, cfg)
    loaded, _ = load_checkpoint(tmp_path / "ck")
    assert loaded.neighbors is not None
    assert np.array_equal(loaded.neighbors, state.neighbors)


def test_checkpoint_missing_meta(tmp_path):
    cfg = short_config()
    state = init_state(tiny_scene(), cfg)
    save_checkpoint(tmp_path / "ck", state, cfg)
    (tmp_path / "ck" / "meta.json").write_text("{", encoding="utf-8")
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "ck")


def test_loss_log_format(tmp_path):
    rows = [(0, 1, "rgb", 0.5), (0, 1, "total", 0.5), (1, 1, "rgb", 0.25)]
    path = tmp_path / "loss.csv"
    write_loss_log(path, rows)
    lines = path.read_text(encoding="utf-8").strip().splitlines()
    assert lines[0] == "iteration,stage,loss_name,value"
    assert lines[1] == "0,1,rgb,0.5"
    assert len(lines) == 4


def test_stage1_groups_constant():
    assert "f_lang" not in STAGE1_GROUPS
    assert "f_ins" not in STAGE1_GROUPS
    fields = {f.name for f in dataclasses.fields(TrainConfig)}
    assert {"stage1_iters", "stage2_iters", "stage3_iters"} <= fields

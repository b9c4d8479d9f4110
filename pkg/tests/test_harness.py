import os
import struct
import tempfile

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from ctbench.grids import ImageGrid, ProjectionGeometry, Sinogram
from ctbench.harness import (
    CSV_COLUMNS,
    ConfigError,
    ExperimentPlan,
    MethodSpec,
    PHANTOM_KINDS,
    RawFormatError,
    TuningResult,
    apply_overrides,
    default_detector_count,
    expand_grid,
    generate_phantom,
    grid_search,
    holdout_phantoms,
    load_raw,
    parse_config,
    parse_config_text,
    phantom_ellipses,
    plan_from_sections,
    rasterize_ellipses,
    resolve_config,
    resolve_method,
    run_benchmark,
    run_cell,
    save_raw,
)
from ctbench.harness.cli import main
from ctbench.simulate import SimulationConfig, builtin_config


# ------------------------------------------------------------------------ rawio


def test_image_roundtrip(tmp_path, rng):
    values = rng.standard_normal((5, 7)).astype(np.float32).astype(np.float64)
    path = str(tmp_path / "img.raw")
    save_raw(path, ImageGrid(values, 1.0))
    back = load_raw(path)
    assert isinstance(back, ImageGrid)
    np.testing.assert_array_equal(back.values, values)
    assert not any(name.endswith(".tmp") for name in os.listdir(tmp_path))


def test_sinogram_roundtrip_reattaches_geometry(tmp_path, rng):
    geom = ProjectionGeometry(np.pi * np.arange(9) / 9, 13, 0.75, 0.125)
    values = rng.standard_normal((9, 13)).astype(np.float32).astype(np.float64)
    path = str(tmp_path / "sino.raw")
    save_raw(path, Sinogram(values, geom))
    assert os.path.exists(path + ".geom")
    back = load_raw(path)
    assert isinstance(back, Sinogram)
    np.testing.assert_array_equal(back.values, values)
    np.testing.assert_array_equal(back.geometry.angles, geom.angles)
    assert back.geometry.detector_count == 13
    assert back.geometry.detector_pitch == 0.75
    assert back.geometry.detector_offset == 0.125


def test_file_size_arithmetic(tmp_path):
    # 8 magic + 4 version + 4 ndim + 2*8 dims + 1 kind + 4 * 64 * 64 payload
    path = str(tmp_path / "img.raw")
    save_raw(path, ImageGrid(np.zeros((64, 64)), 1.0))
    assert os.path.getsize(path) == 33 + 4 * 64 * 64 == 16417


@settings(max_examples=25, deadline=None)
@given(
    arr=hnp.arrays(
        dtype=np.float32,
        shape=hnp.array_shapes(min_dims=2, max_dims=2, min_side=1, max_side=12),
        elements=st.floats(-1e6, 1e6, width=32),
    )
)
def test_roundtrip_is_exact_for_float32_payloads(arr):
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "h.raw")
        save_raw(path, ImageGrid(arr.astype(np.float64), 1.0))
        np.testing.assert_array_equal(load_raw(path).values, arr.astype(np.float64))


def _corrupt(path: str, tmp_path, mutate) -> str:
    with open(path, "rb") as fh:
        blob = bytearray(fh.read())
    blob = mutate(blob)
    out = str(tmp_path / "bad.raw")
    with open(out, "wb") as fh:
        fh.write(bytes(blob))
    return out


def test_load_rejects_malformed_files(tmp_path):
    path = str(tmp_path / "ok.raw")
    save_raw(path, ImageGrid(np.ones((4, 4)), 1.0))

    def swap_magic(b):
        b[:8] = b"NOTRAW!!"
        return b

    def bump_version(b):
        b[8:12] = struct.pack("<I", 9)
        return b

    def silly_ndim(b):
        b[12:16] = struct.pack("<I", 9)
        return b

    def zero_dim(b):
        b[16:24] = struct.pack("<Q", 0)
        return b

    def wrong_kind(b):
        b[32] = 7
        return b

    def truncate(b):
        return b[:-5]

    for mutate, message in [
        (swap_magic, "magic"),
        (bump_version, "version"),
        (silly_ndim, "ndim"),
        (zero_dim, "overflow"),
        (wrong_kind, "kind"),
        (truncate, "truncated"),
    ]:
        with pytest.raises(RawFormatError, match=message):
            load_raw(_corrupt(path, tmp_path, mutate))

    tiny = str(tmp_path / "tiny.raw")
    with open(tiny, "wb") as fh:
        fh.write(b"DM4CT")
    with pytest.raises(RawFormatError, match="short"):
        load_raw(tiny)


def test_sinogram_sidecar_errors(tmp_path):
    geom = ProjectionGeometry(np.array([0.0, 1.0]), 4, 1.0)
    path = str(tmp_path / "s.raw")
    save_raw(path, Sinogram(np.zeros((2, 4)), geom))

    os.remove(path + ".geom")
    with pytest.raises(RawFormatError, match="sidecar missing"):
        load_raw(path)

    with open(path + ".geom", "w") as fh:
        fh.write("detector_count 4\n")
    with pytest.raises(RawFormatError, match="malformed sidecar"):
        load_raw(path)

    with open(path + ".geom", "w") as fh:
        fh.write("detector_count = 4\n")
    with pytest.raises(RawFormatError, match="missing key"):
        load_raw(path)


def test_save_rejects_other_types(tmp_path):
    with pytest.raises(TypeError):
        save_raw(str(tmp_path / "x.raw"), np.zeros((3, 3)))


# --------------------------------------------------------------------- phantoms


def test_phantom_kinds_and_validation():
    assert set(PHANTOM_KINDS) == {"shepplogan", "disks", "text"}
    with pytest.raises(ValueError, match="unknown phantom kind"):
        generate_phantom("cube", 32)
    with pytest.raises(ValueError, match="spec_text"):
        generate_phantom("text", 32)
    with pytest.raises(ValueError, match=">= 16"):
        generate_phantom("disks", 8)
    with pytest.raises(ValueError):
        rasterize_ellipses([], 16, supersample=0)


def test_shepplogan_structure():
    img = generate_phantom("shepplogan", 64)
    assert img.values.min() >= 0.0
    # additive densities bound the peak by the sum of positive entries
    assert img.values.max() <= 2.0 + 6 * 0.01 + 1e-9
    assert img.values[32, 32] > 0.9  # soft tissue region
    assert img.values[1, 1] == 0.0  # outside the skull


def test_jitter_determinism():
    a = generate_phantom("shepplogan", 32, seed=5)
    b = generate_phantom("shepplogan", 32, seed=5)
    c = generate_phantom("shepplogan", 32, seed=6)
    base = generate_phantom("shepplogan", 32)
    np.testing.assert_array_equal(a.values, b.values)
    assert not np.array_equal(a.values, c.values)
    assert not np.array_equal(a.values, base.values)


def test_jittered_phantoms_stay_nonnegative():
    for seed in range(12):
        assert generate_phantom("shepplogan", 32, seed=seed).values.min() >= 0.0


def test_text_spec_parsing(tmp_path):
    spec = """
    # a single centered disk
    1.0, 0.5, 0.5, 0.0, 0.0, 0.0
    """
    img = generate_phantom("text", 32, spec_text=spec)
    assert img.values[16, 16] == pytest.approx(1.0)
    assert img.values[1, 1] == 0.0

    with pytest.raises(ValueError, match="line 2"):
        generate_phantom("text", 32, spec_text="# fine\n1.0 0.5 0.5 0.0\n")
    with pytest.raises(ValueError, match="empty"):
        generate_phantom("text", 32, spec_text="# only comments\n")


def test_rasterizer_antialiases_edges():
    ellipses = phantom_ellipses("disks", 32)
    crisp = rasterize_ellipses(ellipses, 32, supersample=1)
    smooth = rasterize_ellipses(ellipses, 32, supersample=4)
    pure_levels = {0.0, 0.4, 0.7, 1.0, 1.1, 1.4, 1.7, 2.1}
    fractional = ~np.isin(np.round(smooth.values, 10), sorted(pure_levels))
    assert fractional.any()
    assert not np.array_equal(crisp.values, smooth.values)


def test_phantom_ellipse_scaling():
    e = phantom_ellipses("disks", 64)[0]
    assert e.a == pytest.approx(0.28 * 32)
    assert e.value == pytest.approx(1.0)


def test_negative_raw_field_exists_but_clamps_away():
    # at least one jitter seed pushes a subtractive ellipse past its parent
    hit = False
    for seed in range(40):
        ellipses = phantom_ellipses("shepplogan", 32, seed=seed)
        raw = rasterize_ellipses(ellipses, 32).values
        if raw.min() < 0:
            hit = True
            assert generate_phantom("shepplogan", 32, seed=seed).values.min() == 0.0
            break
    assert hit, "expected some jitter seed to produce a negative raw field"


# -------------------------------------------------------------------- configfmt


def test_config_text_grammar():
    text = """
    # implicit plan section
    size = 64
    flag = TRUE

    [method deep]
    strategy = dds   # trailing comment
    eta = 1e-3
    steps = none
    name = ramlak
    grid = 1, 2.5, hann, false
    """
    sections = parse_config_text(text)
    assert sections["plan"] == {"size": 64, "flag": True}
    m = sections["method deep"]
    assert m["strategy"] == "dds"
    assert m["eta"] == pytest.approx(1e-3) and isinstance(m["eta"], float)
    assert m["steps"] is None
    assert m["name"] == "ramlak"
    assert m["grid"] == [1, 2.5, "hann", False]


def test_config_last_assignment_wins():
    sections = parse_config_text("a = 1\na = 2\n")
    assert sections["plan"]["a"] == 2


def test_config_errors_carry_line_numbers():
    with pytest.raises(ConfigError, match="line 1"):
        parse_config_text("[plan\n")
    with pytest.raises(ConfigError, match="line 2"):
        parse_config_text("a = 1\n[ ]\n")
    with pytest.raises(ConfigError, match="line 3"):
        parse_config_text("a = 1\n\njust words\n")
    with pytest.raises(ConfigError, match="empty key"):
        parse_config_text("= 5\n")


def test_overrides(tmp_path):
    sections = parse_config_text("size = 16\n[method m]\neta = 1.0\n")
    apply_overrides(sections, ["size=32", "method m.eta=0.5", "tune.count=3"])
    assert sections["plan"]["size"] == 32
    assert sections["method m"]["eta"] == 0.5
    assert sections["tune"]["count"] == 3
    with pytest.raises(ConfigError):
        apply_overrides(sections, ["no_equals_sign"])
    with pytest.raises(ConfigError):
        apply_overrides(sections, ["method m.=7"])


def test_parse_config_reads_files(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("x = 1.5\n")
    assert parse_config(str(path))["plan"]["x"] == 1.5


# ------------------------------------------------------------------- resolution


def test_resolve_config_paths():
    name, cfg = resolve_config("ii")
    assert name == "ii" and cfg.n_angles == 20

    inline = SimulationConfig(n_angles=12)
    assert resolve_config(inline) == ("inline", inline)

    sections = {"config thin": {"n_angles": 8, "photon_count": 500}}
    name, cfg = resolve_config("thin", sections)
    assert name == "thin" and cfg.n_angles == 8 and cfg.photon_count == 500

    with pytest.raises(ConfigError, match="unknown config"):
        resolve_config("nope")
    with pytest.raises(ConfigError, match="unknown keys"):
        resolve_config("bad", {"config bad": {"view_fraction": 2}})


def test_resolve_method_paths():
    fbp = resolve_method("fbp")
    assert fbp.kind == "classical" and fbp.options["algo"] == "fbp"

    sections = {
        "method deep": {"strategy": "dds", "dds_gamma": 2.0},
        "method tv": {"solver": "admm", "weight": 0.1},
        "method plain": {"algo": "sirt"},
    }
    assert resolve_method("deep", sections).kind == "guidance"
    assert resolve_method("tv", sections).kind == "mbir"
    assert resolve_method("plain", sections).kind == "classical"
    with pytest.raises(ConfigError, match="unknown method"):
        resolve_method("mystery")
    with pytest.raises(ValueError, match="unknown method kind"):
        MethodSpec("x", "quantum")


def test_plan_from_sections_and_validation():
    sections = parse_config_text(
        """
        methods = fbp, sirt
        configs = i, ii
        size = 16
        dense_views = 48
        metrics = psnr, ssim
        """
    )
    plan = plan_from_sections(sections)
    assert [m.name for m in plan.methods] == ["fbp", "sirt"]
    assert plan.config_names == ["i", "ii"]
    assert plan.metrics == ("psnr", "ssim")
    assert plan.resolve_detector_count() == default_detector_count(16)

    with pytest.raises(ConfigError, match="unknown plan keys"):
        plan_from_sections(parse_config_text("methods = fbp\nconfigs = i\nbogus = 1\n"))
    with pytest.raises(ValueError, match="at least one method"):
        ExperimentPlan(methods=[], configs=[builtin_config("i")])
    with pytest.raises(ValueError, match="repeats"):
        ExperimentPlan(methods=["fbp"], configs=["i"], repeats=0)


def test_default_detector_count_covers_diagonal():
    assert default_detector_count(64) == 92
    assert default_detector_count(4) == 16
    # covers the inscribed-circle diagonal with margin at unit pitch
    for size in (16, 64, 128, 256):
        assert default_detector_count(size) >= size * np.sqrt(2)


# ---------------------------------------------------------------------- tuning


def test_expand_grid_orders_numeric_axes():
    grid = expand_grid({"eta": [0.1, 0.001, 0.01], "window": ["hann", "ramlak"]})
    assert [g["eta"] for g in grid] == [0.001, 0.001, 0.01, 0.01, 0.1, 0.1]
    assert [g["window"] for g in grid[:2]] == ["hann", "ramlak"]
    with pytest.raises(ValueError):
        expand_grid({})
    with pytest.raises(ValueError):
        expand_grid({"eta": []})


def _tiny_plan(**overrides):
    fields = dict(
        methods=["fbp"],
        configs=["i"],
        size=16,
        dense_views=48,
        seed=3,
    )
    fields.update(overrides)
    return ExperimentPlan(**fields)


def test_holdout_phantoms_are_seeded_variants():
    plan = _tiny_plan()
    a = holdout_phantoms(plan, 3)
    b = holdout_phantoms(plan, 3)
    assert len(a) == 3
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.values, y.values)
    assert not np.array_equal(a[0].values, a[1].values)
    other = holdout_phantoms(_tiny_plan(seed=4), 3)
    assert not np.array_equal(a[0].values, other[0].values)


def test_grid_search_picks_the_working_point():
    plan = _tiny_plan()
    results = grid_search(plan, {"window": ["nosuchwindow", "ramlak"]}, count=2)
    assert len(results) == 1
    res = results[0]
    assert isinstance(res, TuningResult)
    assert res.best == {"window": "ramlak"}
    assert np.isfinite(res.best_score)
    bad = res.grid.index({"window": "nosuchwindow"})
    assert np.isinf(res.scores[bad])
    assert res.per_phantom.shape == (2, 2)
    assert res.method.options["window"] == "ramlak"


def test_grid_search_needs_single_config():
    plan = _tiny_plan(configs=["i", "ii"])
    with pytest.raises(ValueError, match="exactly one config"):
        grid_search(plan, {"window": ["ramlak"]}, count=1)


def test_grid_search_is_deterministic():
    plan = _tiny_plan()
    r1 = grid_search(plan, {"iterations": [5, 20]}, count=2)[0]
    r2 = grid_search(plan, {"iterations": [20, 5]}, count=2)[0]
    np.testing.assert_array_equal(r1.scores, r2.scores)
    assert r1.best == r2.best


# ------------------------------------------------------------------- benchmark


def test_run_cell_returns_physical_units(small_projector):
    phantom = generate_phantom("shepplogan", 32)
    geom = ProjectionGeometry(np.pi * np.arange(60) / 60, 46, 1.0)
    from ctbench.operators import Projector

    proj = Projector(geom, (32, 32), 1.0)
    clean = Sinogram(proj.apply(phantom.values), geom)
    method = resolve_method("fbp")
    recon, report, measured, trajectory = run_cell(
        method, builtin_config("ii"), clean, phantom, seed=1
    )
    assert trajectory is None
    # config ii rescales to a 0.5 absorption target; outputs must be physical
    assert abs(recon.values.max() - phantom.values.max()) < 0.5 * phantom.values.max()
    assert report.data_fit is not None and report.psnr > 10.0


def test_benchmark_rows_and_determinism(tmp_path):
    sections = parse_config_text(
        f"""
        methods = fbp
        configs = i, ii
        size = 16
        dense_views = 48
        repeats = 2
        output_dir = {tmp_path / "out"}
        """
    )
    rows = run_benchmark(plan_from_sections(sections))
    assert len(rows) == 4  # 1 method x 2 configs x 2 repeats
    assert all(set(row) == set(CSV_COLUMNS) for row in rows)
    assert all(row["status"] == "ok" for row in rows)

    csv_path = tmp_path / "out" / "results.csv"
    first = csv_path.read_text()
    run_benchmark(plan_from_sections(sections))
    second = csv_path.read_text()

    def strip_timing(text):
        out = []
        for line in text.splitlines():
            cells = line.split(",")
            del cells[CSV_COLUMNS.index("wall_time_ms")]
            out.append(",".join(cells))
        return "\n".join(out)

    assert strip_timing(first) == strip_timing(second)

    by_config = {(r["config"], r["seed"]): float(r["psnr"]) for r in rows}
    # denser, noise-free acquisition must beat the photon-starved one
    assert by_config[("i", "0")] > by_config[("ii", "0")]


def test_benchmark_records_failures_in_row(tmp_path):
    plan = ExperimentPlan(
        methods=[MethodSpec("broken", "classical", {"algo": "warp"}), "fbp"],
        configs=["i"],
        size=16,
        dense_views=48,
        output_dir=str(tmp_path / "out"),
    )
    rows = run_benchmark(plan)
    assert len(rows) == 2
    assert rows[0]["status"].startswith("error: ValueError")
    assert rows[0]["psnr"] == ""
    assert rows[1]["status"] == "ok"


def test_benchmark_saves_artifacts(tmp_path):
    out = tmp_path / "out"
    plan = ExperimentPlan(
        methods=["fbp"],
        configs=["i"],
        size=16,
        dense_views=48,
        output_dir=str(out),
        save_recons=True,
        save_null_split=True,
        null_split_eps=1e-3,
    )
    rows = run_benchmark(plan)
    assert rows[0]["status"] == "ok"
    recon = load_raw(str(out / "recon_fbp_i_0.raw"))
    x_range = load_raw(str(out / "range_fbp_i_0.raw"))
    x_null = load_raw(str(out / "null_fbp_i_0.raw"))
    # the split parts were quantized to f32 separately; they still sum back
    np.testing.assert_allclose(
        x_range.values + x_null.values, recon.values, atol=1e-5
    )


# ------------------------------------------------------------------------- cli


def run_cli(*argv):
    return main(list(argv))


def test_cli_simulate_reconstruct_metrics_chain(tmp_path, capsys):
    measured = tmp_path / "m.raw"
    phantom = tmp_path / "p.raw"
    recon = tmp_path / "r.raw"
    assert run_cli(
        "simulate",
        "--set", f"output={measured}",
        "--set", f"save_phantom={phantom}",
        "--set", "size=32", "--set", "dense_views=48", "--set", "config=i",
    ) == 0
    out = capsys.readouterr().out
    assert "views: 40" in out and "gamma: 1.0" in out

    assert run_cli(
        "reconstruct",
        "--set", f"input={measured}", "--set", f"output={recon}",
        "--set", "size=32", "--set", "method=fbp",
    ) == 0
    assert "data_fit:" in capsys.readouterr().out

    assert run_cli(
        "metrics",
        "--set", f"recon={recon}", "--set", f"reference={phantom}",
        "--set", f"sinogram={measured}",
    ) == 0
    out = capsys.readouterr().out
    assert "psnr:" in out and "ssim:" in out and "data_fit:" in out


def test_cli_decompose(tmp_path, capsys):
    phantom = tmp_path / "p.raw"
    save_raw(str(phantom), generate_phantom("disks", 16))
    assert run_cli(
        "decompose",
        "--set", f"input={phantom}",
        "--set", "views=2", "--set", "detector_count=16",
        "--set", "eps_rel=1e-5", "--set", "max_iter=20000",
    ) == 0
    out = capsys.readouterr().out
    assert "null_energy_fraction:" in out
    assert (tmp_path / "p_range.raw").exists()
    assert (tmp_path / "p_null.raw").exists()


def test_cli_tune(tmp_path, capsys):
    cfg = tmp_path / "tune.cfg"
    cfg.write_text(
        """
        methods = fbp
        configs = i
        size = 16
        dense_views = 48

        [grid]
        window = ramlak, hann

        [tune]
        holdout_count = 2
        """
    )
    assert run_cli("tune", "--config", str(cfg)) == 0
    out = capsys.readouterr().out
    assert "method: fbp" in out and "window:" in out and "mse:" in out


def test_cli_benchmark(tmp_path, capsys):
    cfg = tmp_path / "bench.cfg"
    cfg.write_text(
        f"""
        methods = fbp
        configs = i
        size = 16
        dense_views = 48
        output_dir = {tmp_path / "out"}
        """
    )
    assert run_cli("benchmark", "--config", str(cfg)) == 0
    out = capsys.readouterr().out
    assert "rows: 1" in out and "failures: 0" in out
    assert (tmp_path / "out" / "results.csv").exists()


def test_cli_error_paths(tmp_path, capsys):
    assert run_cli("reconstruct", "--set", "size=32") == 1
    assert "missing required key" in capsys.readouterr().err

    assert run_cli(
        "metrics", "--set", f"recon={tmp_path / 'ghost.raw'}",
        "--set", f"reference={tmp_path / 'ghost.raw'}",
    ) == 1
    capsys.readouterr()

    assert run_cli("benchmark", "--set", "methods=mystery", "--set", "configs=i") == 1
    assert "unknown method" in capsys.readouterr().err

import json

import numpy as np
import pytest

from mvattrib.cli import (
    STAGES,
    StageOrderError,
    build_config,
    cmd_multiverse,
    load_config,
    main,
    parse_config_text,
    pca_2d,
    project_space,
    run_pipeline,
)
from mvattrib.core import InteractionKind, derive_seed, file_digest

TINY = [
    "world.n_categories=4", "world.products_per_category=20", "world.top_n=10", "query.N=10",
    "world_sessions=3000", "synth_base_sessions=3000", "synth.k=40",
    "embed.dim=12", "embed.epochs=3", "browse.hidden=16", "browse.epochs=1",
    "decoder.T=10", "classifier.epochs=20",
]


def test_config_text_parsing():
    pairs = parse_config_text("# comment\nseed = 4\n\nembed.dim = 16  # trailing\n")
    assert pairs == {"seed": "4", "embed.dim": "16"}
    with pytest.raises(ValueError):
        parse_config_text("just words\n")


def test_unknown_keys_are_fatal():
    for key in ("colour", "embed.colour", "nosuch.dim", "embed.seed", "world"):
        with pytest.raises(ValueError):
            build_config({key: "1"})


def test_values_are_typed_and_stage_seeds_derived():
    cfg = build_config({"seed": "9", "embed.dim": "16", "decoder.method": "topp", "deterministic": "no"})
    assert cfg.embed.dim == 16 and cfg.decoder.method.value == "topp"
    assert cfg.world.seed == derive_seed(9, "world")
    assert cfg.decoder.seed == derive_seed(9, "multiverse")
    assert cfg.embed.seed != cfg.browse.seed
    assert not cfg.deterministic


def test_config_file_and_overrides(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("seed = 3\nsynth.k = 50\n")
    cfg = load_config(path, ["synth.k=60"])
    assert (cfg.seed, cfg.synth.k) == (3, 60)


def test_stage_order_error_names_stage(tmp_path):
    cfg = load_config(None, [f"out={tmp_path}"])
    with pytest.raises(StageOrderError, match="browse"):
        cmd_multiverse(cfg)


def test_main_reports_order_error(tmp_path, capsys):
    assert main(["multiverse", "--out", str(tmp_path)]) == 2
    assert "browse" in capsys.readouterr().err


# -- projection --------------------------------------------------------------


def test_pca_of_isotropic_plane_keeps_norms():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(300, 2))
    X -= X.mean(axis=0)
    Y = pca_2d(X)
    np.testing.assert_allclose(np.linalg.norm(Y, axis=1), np.linalg.norm(X, axis=1), atol=1e-6)


def test_pca_needs_two_dims():
    with pytest.raises(ValueError):
        pca_2d(np.ones((5, 1)))


def test_projection_rows_and_category_purity(small_world):
    from sklearn.cluster import KMeans

    rows = project_space(small_world.space, small_world.catalog)
    details = small_world.space.tokens_of_kind(InteractionKind.DETAIL)
    assert len(rows) == len(details)
    xy = np.array([[r[1], r[2]] for r in rows])
    cats = [r[3] for r in rows]
    k = len(small_world.catalog.categories)
    labels = KMeans(n_clusters=k, n_init=10, random_state=0).fit_predict(xy)
    majority = sum(max(np.bincount([small_world.catalog.categories.index(c)
                                    for c, l in zip(cats, labels) if l == j], minlength=k))
                   for j in set(labels))
    assert majority / len(rows) >= 0.6


# -- pipeline ----------------------------------------------------------------


@pytest.fixture(scope="module")
def tiny_runs(tmp_path_factory):
    outs = []
    for name in ("a", "b"):
        out = tmp_path_factory.mktemp(name)
        run_pipeline(load_config(None, TINY + [f"out={out}"]))
        outs.append(out)
    return outs


def test_pipeline_writes_every_artifact(tiny_runs):
    out = tiny_runs[0]
    for stage in STAGES:
        manifest = json.loads((out / f"manifest-{stage}.json").read_text())
        assert manifest["stage"] == stage
        for name, digest in manifest["outputs"].items():
            assert file_digest(out / name) == digest


def test_manifest_chain(tiny_runs):
    out = tiny_runs[0]
    embed = json.loads((out / "manifest-embed.json").read_text())
    world = json.loads((out / "manifest-world.json").read_text())
    assert embed["inputs"]["sessions.log"] == world["outputs"]["sessions.log"]


def test_identical_runs_are_byte_identical(tiny_runs):
    a, b = tiny_runs
    names = sorted(p.name for p in a.iterdir())
    assert names == sorted(p.name for p in b.iterdir())
    for name in names:
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_projection_output(tiny_runs):
    lines = (tiny_runs[0] / "projection.tsv").read_text().splitlines()
    assert lines[0] == "#mvattrib-proj v1"
    assert all(len(line.split("\t")) == 4 for line in lines[1:])
    paths = (tiny_runs[0] / "paths.tsv").read_text().splitlines()
    assert paths[0] == "#mvattrib-paths v1" and len(paths) > 1

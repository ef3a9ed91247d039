"""Seeded pipeline stages: world, embed, browse, synth, multiverse, evaluate, project.

Each stage reads the artifacts of earlier stages from the output directory,
writes its own versioned files plus ``manifest-<stage>.json``, and derives its
seed from the global seed and the stage name.
"""

import argparse
import dataclasses
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import attribution as attr
from .browse import BrowseTrainConfig, DecoderConfig, load_model, save_model, train_browsing_model
from .core import (
    FormatError,
    InteractionKind,
    derive_seed,
    file_digest,
    parse_session_log,
    tokenize_session,
    write_session_log,
)
from .embed import (
    EmbedTrainConfig,
    QueryEmbedConfig,
    attach_queries,
    read_embeddings,
    train_prod2vec,
    write_embeddings,
)
from .multiverse import read_results, run_multiverse_batch, write_results
from .shopworld import (
    MockSearchEngine,
    WorldConfig,
    build_catalog,
    generate_base_sessions,
    read_catalog,
    write_catalog,
)
from .synth import SEARCH_LABELS, SynthConfig, compose_dataset, read_labels, write_labels

log = logging.getLogger("mvattrib")

PROJ_MAGIC = "#mvattrib-proj v1"
PATHS_MAGIC = "#mvattrib-paths v1"

STAGES = ("world", "embed", "browse", "synth", "multiverse", "evaluate", "project")

# artifact file -> stage that writes it
ARTIFACTS = {
    "catalog.tsv": "world",
    "sessions.log": "world",
    "embeddings.txt": "embed",
    "model.bin": "browse",
    "sd.log": "synth",
    "sd-labels.tsv": "synth",
    "mv.tsv": "multiverse",
    "table1.tsv": "evaluate",
    "table2.tsv": "evaluate",
    "metrics.tsv": "evaluate",
    "projection.tsv": "project",
    "paths.tsv": "project",
}


class StageOrderError(RuntimeError):
    pass


@dataclass(frozen=True)
class ClassifierConfig:
    width: int = 16
    epochs: int = 200
    learning_rate: float = 0.01
    split: float = 0.8


@dataclass
class PipelineConfig:
    seed: int = 0
    out: str = "run"
    threads: int = 1
    deterministic: bool = True
    world_sessions: int = 50000
    synth_base_sessions: int = 40000
    project_paths: int = 50
    world: WorldConfig = field(default_factory=WorldConfig)
    embed: EmbedTrainConfig = field(default_factory=EmbedTrainConfig)
    query: QueryEmbedConfig = field(default_factory=QueryEmbedConfig)
    browse: BrowseTrainConfig = field(default_factory=BrowseTrainConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)

    def stage_seed(self, stage):
        return derive_seed(self.seed, stage)

    def as_flat(self):
        flat = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if dataclasses.is_dataclass(v):
                for g in dataclasses.fields(v):
                    if g.name != "seed":
                        flat[f"{f.name}.{g.name}"] = _plain(getattr(v, g.name))
            else:
                flat[f.name] = _plain(v)
        return flat


SECTIONS = ("world", "embed", "query", "browse", "synth", "decoder", "classifier")


def _plain(v):
    return v.value if hasattr(v, "value") else v


def _coerce(text, like, key):
    if isinstance(like, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {text!r}")
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    return text


def parse_config_text(text):
    pairs = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        pairs[key] = value
    return pairs


def build_config(pairs):
    """Apply flat ``key = value`` pairs to the defaults; unknown keys are fatal."""
    cfg = PipelineConfig()
    top = {f.name: f for f in dataclasses.fields(cfg)}
    section_values = {s: {} for s in SECTIONS}
    for key, text in pairs.items():
        if "." in key:
            section, name = key.split(".", 1)
            if section not in SECTIONS:
                raise ValueError(f"unknown config key {key!r}")
            sub = getattr(cfg, section)
            names = {f.name for f in dataclasses.fields(sub)} - {"seed"}
            if name not in names:
                raise ValueError(f"unknown config key {key!r}")
            section_values[section][name] = _coerce(text, _plain(getattr(sub, name)), key)
        elif key in top and key not in SECTIONS:
            setattr(cfg, key, _coerce(text, getattr(cfg, key), key))
        else:
            raise ValueError(f"unknown config key {key!r}")
    stage_of = {"world": "world", "embed": "embed", "browse": "browse",
                "synth": "synth", "decoder": "multiverse"}
    for section in SECTIONS:
        sub = getattr(cfg, section)
        values = dict(section_values[section])
        if section in stage_of:
            values["seed"] = cfg.stage_seed(stage_of[section])
        if section == "embed" and cfg.deterministic:
            values["workers"] = 1
        setattr(cfg, section, dataclasses.replace(sub, **values))
    return cfg


def load_config(path=None, overrides=()):
    pairs = parse_config_text(Path(path).read_text(encoding="utf-8")) if path else {}
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        pairs[k.strip()] = v.strip()
    return build_config(pairs)


# ---------------------------------------------------------------------------
# stage plumbing


def _need(out, *names):
    for name in names:
        if not (out / name).exists():
            stage = ARTIFACTS[name]
            raise StageOrderError(f"{name} not found in {out}; run the '{stage}' stage first")
    return [out / n for n in names]


def _manifest(cfg, out, stage, inputs, outputs):
    data = {
        "stage": stage,
        "seed": cfg.seed,
        "stage_seed": cfg.stage_seed(stage),
        "config": cfg.as_flat(),
        "inputs": {p.name: file_digest(p) for p in inputs},
        "outputs": {p.name: file_digest(p) for p in outputs},
    }
    data["config"].pop("out", None)
    path = out / f"manifest-{stage}.json"
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _threads(cfg):
    return 1 if cfg.deterministic else max(1, cfg.threads)


def cmd_world(cfg):
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    catalog = build_catalog(cfg.world)
    sessions = generate_base_sessions(catalog, cfg.world, cfg.world_sessions, workers=_threads(cfg))
    write_catalog(catalog, out / "catalog.tsv")
    write_session_log(sessions, out / "sessions.log")
    _manifest(cfg, out, "world", [], [out / "catalog.tsv", out / "sessions.log"])


def cmd_embed(cfg):
    out = Path(cfg.out)
    cat_path, log_path = _need(out, "catalog.tsv", "sessions.log")
    catalog = read_catalog(cat_path)
    seqs = [tokenize_session(s) for s in parse_session_log(log_path)]
    space = train_prod2vec(seqs, cfg.embed)
    attach_queries(space, MockSearchEngine(catalog), cfg.query)
    write_embeddings(space, out / "embeddings.txt")
    _manifest(cfg, out, "embed", [cat_path, log_path], [out / "embeddings.txt"])


def cmd_browse(cfg):
    out = Path(cfg.out)
    log_path, emb_path = _need(out, "sessions.log", "embeddings.txt")
    seqs = [tokenize_session(s) for s in parse_session_log(log_path)]
    model = train_browsing_model(seqs, read_embeddings(emb_path), cfg.browse)
    save_model(model, out / "model.bin")
    _manifest(cfg, out, "browse", [log_path, emb_path], [out / "model.bin"])


def cmd_synth(cfg):
    out = Path(cfg.out)
    cat_path, emb_path = _need(out, "catalog.tsv", "embeddings.txt")
    catalog = read_catalog(cat_path)
    # a fresh corpus from the same shop, never seen by the models
    world = dataclasses.replace(cfg.world, seed=cfg.stage_seed("synth-base"))
    base = generate_base_sessions(catalog, world, cfg.synth_base_sessions, prefix="b",
                                  workers=_threads(cfg))
    labeled = compose_dataset(base, read_embeddings(emb_path), cfg.synth)
    write_session_log([ls.session for ls in labeled], out / "sd.log")
    write_labels(labeled, out / "sd-labels.tsv")
    _manifest(cfg, out, "synth", [cat_path, emb_path], [out / "sd.log", out / "sd-labels.tsv"])


def _search_sessions(out):
    sd_path, lab_path = _need(out, "sd.log", "sd-labels.tsv")
    labels = read_labels(lab_path)
    sessions = [s for s in parse_session_log(sd_path) if labels[s.session_id] in SEARCH_LABELS]
    return sessions, labels, [sd_path, lab_path]


def cmd_multiverse(cfg):
    out = Path(cfg.out)
    model_path, emb_path = _need(out, "model.bin", "embeddings.txt")
    sessions, _, inputs = _search_sessions(out)
    results = run_multiverse_batch(sessions, load_model(model_path), read_embeddings(emb_path),
                                   cfg.decoder, threads=_threads(cfg))
    write_results(results, out / "mv.tsv")
    _manifest(cfg, out, "multiverse", inputs + [model_path, emb_path], [out / "mv.tsv"])


def evaluate_run(cfg, out):
    """Train the MV and SS classifiers and compute the comparison tables in memory."""
    (mv_path, emb_path) = _need(out, "mv.tsv", "embeddings.txt")
    sessions, labels, inputs = _search_sessions(out)
    rows = {r[0]: r for r in read_results(mv_path)}
    missing = [s.session_id for s in sessions if s.session_id not in rows]
    if missing:
        raise FormatError(f"mv.tsv lacks {len(missing)} search sessions; rerun 'multiverse'")
    space = read_embeddings(emb_path)
    pattern = [labels[s.session_id] for s in sessions]
    relevant = np.array([attr.is_relevant(p) for p in pattern])
    mv_x = np.array([rows[s.session_id][1:4] for s in sessions])
    ss_x = np.array([[attr.ss_feature(s, space)] for s in sessions])
    seed = cfg.stage_seed("evaluate")
    kw = dict(width=cfg.classifier.width, epochs=cfg.classifier.epochs,
              learning_rate=cfg.classifier.learning_rate)
    mv_clf = attr.train_classifier(mv_x, relevant, cfg.classifier.split, seed, **kw)
    ss_clf = attr.train_classifier(ss_x, relevant, cfg.classifier.split, seed, **kw)
    test = mv_clf.test_index
    held = [sessions[i] for i in test]
    rates = {
        attr.Method.GA: attr.attribution_rate("GA", held),
        attr.Method.CB: attr.attribution_rate("CB", held),
        attr.Method.SS: attr.attribution_rate("SS", held, ss_clf, ss_x[test]),
        attr.Method.MV: attr.attribution_rate("MV", held, mv_clf, mv_x[test]),
    }
    table1 = attr.pattern_distance_table([rows[s.session_id][4] for s in sessions], pattern)
    return {
        "sessions": sessions, "pattern": pattern, "relevant": relevant,
        "mv_features": mv_x, "ss_features": ss_x, "mv": mv_clf, "ss": ss_clf,
        "rates": rates, "table1": table1, "inputs": inputs + [mv_path, emb_path],
    }


def cmd_evaluate(cfg):
    out = Path(cfg.out)
    res = evaluate_run(cfg, out)
    attr.write_table1(res["table1"], out / "table1.tsv")
    attr.write_table2(res["rates"], out / "table2.tsv")
    attr.write_metrics({"MV": res["mv"].metrics, "SS": res["ss"].metrics}, out / "metrics.tsv")
    outputs = [out / "table1.tsv", out / "table2.tsv", out / "metrics.tsv"]
    _manifest(cfg, out, "evaluate", res["inputs"], outputs)
    return res


# ---------------------------------------------------------------------------
# projection


def pca_2d(X):
    """Coordinates on the first two principal axes, sign fixed by the largest loading."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] < 2:
        raise ValueError("need vectors of dimension >= 2")
    Xc = X - X.mean(axis=0)
    _, _, vt = np.linalg.svd(Xc, full_matrices=False)
    axes = vt[:2]
    signs = np.sign(axes[np.arange(2), np.abs(axes).argmax(axis=1)])
    return Xc @ (axes * signs[:, None]).T


def project_space(space, catalog=None):
    """Rows of (token, x, y, category) for every Detail token."""
    tokens = space.tokens_of_kind(InteractionKind.DETAIL)
    xy = pca_2d(np.array([space.vector(t) for t in tokens]))
    rows = []
    for t, (x, y) in zip(tokens, xy):
        category = catalog.category_of(t.product) if catalog and t.product in catalog.products else ""
        rows.append((str(t), float(x), float(y), category))
    return rows


def write_projection(rows, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(PROJ_MAGIC + "\n")
        for tok, x, y, category in rows:
            fh.write(f"{tok}\t{x!r}\t{y!r}\t{category}\n")


def write_paths(sessions, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(PATHS_MAGIC + "\n")
        for s in sessions:
            fh.write(f"{s.session_id}\t{','.join(str(t) for t in tokenize_session(s))}\n")


def cmd_project(cfg):
    out = Path(cfg.out)
    emb_path, cat_path = _need(out, "embeddings.txt", "catalog.tsv")
    space = read_embeddings(emb_path)
    if space.dim < 2:
        raise ValueError("projection needs at least 2 embedding dimensions")
    write_projection(project_space(space, read_catalog(cat_path)), out / "projection.tsv")
    inputs = [emb_path, cat_path]
    if (out / "sd.log").exists():
        sessions, _, extra = _search_sessions(out)
        inputs += extra
    else:
        sessions = parse_session_log(_need(out, "sessions.log")[0])
        inputs.append(out / "sessions.log")
    write_paths(sessions[: cfg.project_paths], out / "paths.tsv")
    _manifest(cfg, out, "project", inputs, [out / "projection.tsv", out / "paths.tsv"])


COMMANDS = {
    "world": cmd_world,
    "embed": cmd_embed,
    "browse": cmd_browse,
    "synth": cmd_synth,
    "multiverse": cmd_multiverse,
    "evaluate": cmd_evaluate,
    "project": cmd_project,
}


def run_pipeline(cfg, stages=STAGES):
    for stage in stages:
        t0 = time.perf_counter()
        COMMANDS[stage](cfg)
        log.info("stage %s done in %.1fs", stage, time.perf_counter() - t0)


def main(argv=None):
    parser = argparse.ArgumentParser(prog="mvattrib", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=STAGES + ("all",))
    parser.add_argument("--config", help="flat 'key = value' file")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--out")
    parser.add_argument("--threads", type=int)
    parser.add_argument("--deterministic", action="store_true", default=None)
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = list(args.set)
    for key in ("seed", "out", "threads"):
        if getattr(args, key) is not None:
            overrides.append(f"{key}={getattr(args, key)}")
    if args.deterministic:
        overrides.append("deterministic=true")
    elif args.threads is not None and args.threads > 1:
        overrides.append("deterministic=false")
    try:
        cfg = load_config(args.config, overrides)
        if args.command == "all":
            run_pipeline(cfg)
        else:
            COMMANDS[args.command](cfg)
    except (StageOrderError, FormatError, ValueError, KeyError) as exc:
        print(f"mvattrib {args.command}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())

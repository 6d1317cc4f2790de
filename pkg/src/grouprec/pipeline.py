"""Run configuration, stage functions and artifact manifests.

Stages run in order synth -> profile -> group -> priors -> train -> eval, each
reading its predecessors' files from the run directory and writing its own
artifacts plus ``manifest.json``. The root seed is handed unchanged to every
stage; each stage mixes in its own fixed tag (world 0x5EED, RQ stage m uses
seed * 1000 + m, model init 0xC401, batch order 0x7EA1), so one integer
reproduces the whole run.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import yaml

from . import autograd as ag
from .evalkit import K_GRID, LAMBDA_GRID, MetricReport, build_report, run_ablation_suite, run_sweep
from .features import build_group_table, build_user_table, impressions_to_batch
from .grouper import load_assignments, rq_kmeans_fit, save_assignments, save_codebooks
from .model import MODES, DualChannelModel, ModelConfig, train_model
from .priors import build_priors, load_priors, save_priors
from .profiler import (EmbeddingClient, EmbeddingClientConfig, OfflineEncoder, ProfileText, WindowBounds,
                       build_profile_text, encode_profiles, load_embeddings, save_embeddings)
from .synthworld import WorldConfig, generate_world, label_low_activity, load_world, save_world, split_world

log = logging.getLogger("grouprec")

STAGES = ("synth", "profile", "group", "priors", "train", "eval")


class ConfigError(ValueError):
    pass


class MissingArtifactError(FileNotFoundError):
    def __init__(self, path, stage: str):
        super().__init__(f"missing artifact {path}; run the '{stage}' stage first")
        self.path, self.stage = str(path), stage


class ConfigMismatchError(RuntimeError):
    pass


# ---------------------------------------------------------------- run config

# key -> (default, description). Keys are flat; the prefix names the owning stage.
_OWN = {
    "seed": (0, "root seed shared by every stage"),
    "out_dir": ("runs/default", "directory holding all stage artifacts"),
    "offline": (True, "use the built-in stub encoder instead of the embedding service"),
    "profile_now": (13.0, "time at which profiles are written (end of the training period)"),
    "profile_recent_window": (1.0, "length of the recent behaviour window"),
    "profile_medium_window": (4.0, "length of the medium behaviour window"),
    "profile_embedding_dim": (512, "Matryoshka truncation dimension"),
    "profile_encoder_dim": (4096, "stub encoder output dimension"),
    "profile_text_weight": (0.35, "stub encoder weight of hashed text tokens vs category counts"),
    "profile_endpoint": ("http://127.0.0.1:8808/v1/embeddings", "embedding service URL (online mode)"),
    "profile_model": ("profile-embedding", "model name sent to the embedding service"),
    "profile_timeout": (30.0, "per-request timeout in seconds"),
    "profile_max_in_flight": (4, "concurrent embedding requests"),
    "profile_batch_size": (32, "texts per embedding request"),
    "profile_retry_budget": (3, "retries per request before giving up"),
    "profile_cache_path": (None, "optional embedding cache file"),
    "group_M": (3, "RQ-KMeans stages (code length)"),
    "group_K": (16, "centroids per stage"),
    "group_max_iters": (100, "Lloyd iterations per stage"),
    "priors_k_cat": (10, "top categories kept per group sequence"),
    "priors_max_len": (50, "maximum group sequence length"),
    "priors_min_members": (5, "smallest group size before falling back to a shorter prefix"),
    "eval_levels": (5, "activity levels used for stratified GAUC"),
    "eval_low_quantile": (0.55, "share of users counted as low-activity"),
}
_WORLD = {f"world_{f.name}": (f.default, f"world generator: {f.name}") for f in fields(WorldConfig)}
_MODEL = {f"model_{f.name}": (f.default, f"model: {f.name}") for f in fields(ModelConfig) if f.name != "seed"}
DEFAULTS = {**_OWN, **_WORLD, **_MODEL}

# config keys each stage depends on (its own plus all upstream keys)
_STAGE_PREFIXES = {
    "synth": ("world_",),
    "profile": ("world_", "profile_"),
    "group": ("world_", "profile_", "group_"),
    "priors": ("world_", "profile_", "group_", "priors_"),
    "train": ("world_", "profile_", "group_", "priors_", "model_"),
    "eval": ("world_", "profile_", "group_", "priors_", "model_", "eval_"),
}
_STAGE_PREFIXES["ablate"] = _STAGE_PREFIXES["sweep"] = _STAGE_PREFIXES["eval"]
_NOT_HASHED = {"profile_endpoint", "profile_timeout", "profile_max_in_flight", "profile_batch_size",
               "profile_retry_budget", "profile_cache_path", "model_mode"}


@dataclass
class RunConfig:
    values: dict

    @classmethod
    def load(cls, path: str | Path | None = None, overrides: dict | None = None) -> "RunConfig":
        raw = {}
        if path is not None:
            text = Path(path).read_text(encoding="utf-8")
            raw = yaml.safe_load(text) or {}
            if not isinstance(raw, dict):
                raise ConfigError(f"{path}: top level must be a mapping of flat keys")
        raw.update(overrides or {})
        unknown = sorted(set(raw) - set(DEFAULTS))
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        vals = {k: v[0] for k, v in DEFAULTS.items()}
        vals.update(raw)
        if isinstance(vals["model_hidden"], list):
            vals["model_hidden"] = tuple(vals["model_hidden"])
        cfg = cls(vals)
        cfg.world()
        cfg.model()
        return cfg

    def __getitem__(self, key):
        return self.values[key]

    @property
    def out(self) -> Path:
        return Path(self.values["out_dir"])

    def world(self) -> WorldConfig:
        return WorldConfig(**{k[6:]: v for k, v in self.values.items() if k.startswith("world_")}).validate()

    def model(self, mode: str | None = None, **changes) -> ModelConfig:
        d = {k[6:]: v for k, v in self.values.items() if k.startswith("model_")}
        d.update(seed=self.values["seed"], **changes)
        if mode is not None:
            d["mode"] = mode
        return ModelConfig.from_dict(d).validate()

    def windows(self) -> WindowBounds:
        return WindowBounds(now=self["profile_now"], recent=self["profile_recent_window"],
                            medium=self["profile_medium_window"])

    def stage_hash(self, stage: str) -> str:
        keys = sorted(k for k in self.values if k.startswith(_STAGE_PREFIXES[stage]) and k not in _NOT_HASHED)
        keys.append("seed")
        blob = json.dumps({k: self.values[k] for k in keys}, sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def parse_override(text: str) -> tuple[str, object]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like key=value")
    k, v = text.split("=", 1)
    return k.strip(), yaml.safe_load(v)


def describe_defaults() -> str:
    return "\n".join(f"{k}: {v[0]!r}  # {v[1]}" for k, v in DEFAULTS.items())


# ---------------------------------------------------------------- manifests


def file_hash(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(directory: Path, stage: str, cfg: RunConfig, inputs: dict[str, Path], extra=None):
    outputs = {p.name: file_hash(p) for p in sorted(directory.iterdir())
               if p.is_file() and p.name != "manifest.json"}
    m = {"stage": stage, "config_hash": cfg.stage_hash(stage), "seed": cfg["seed"],
         "inputs": {k: file_hash(Path(v)) for k, v in sorted(inputs.items())}, "outputs": outputs}
    if extra:
        m.update(extra)
    (directory / "manifest.json").write_text(json.dumps(m, indent=1, sort_keys=True) + "\n")


def check_upstream(directory: Path, stage: str, cfg: RunConfig, allow_mismatch: bool = False):
    """Verify an upstream stage directory exists and was built from the same config."""
    mpath = directory / "manifest.json"
    if not mpath.exists():
        raise MissingArtifactError(mpath, stage)
    recorded = json.loads(mpath.read_text())["config_hash"]
    if recorded != cfg.stage_hash(stage):
        msg = f"config hash of '{stage}' artifacts ({recorded}) differs from the current config"
        if not allow_mismatch:
            raise ConfigMismatchError(msg + "; rerun that stage or pass --allow-mismatch")
        log.warning(msg)


def _need(path: Path, stage: str) -> Path:
    if not path.exists():
        raise MissingArtifactError(path, stage)
    return path


# ---------------------------------------------------------------- in-memory context


@dataclass
class Context:
    """Everything downstream of the world that the model stages need."""

    world: object
    train_batch: object
    test_batch: object
    users: object
    groups: object
    low_users: list
    activity: dict
    item_log_pop: np.ndarray
    priors: object
    M: int
    K: int


def make_context(world, priors, cfg: RunConfig) -> Context:
    train, test = split_world(world)
    users = build_user_table(world.users, cfg["model_max_user_seq"])
    groups = build_group_table(world.users, priors, cfg["model_max_group_seq"]) if priors is not None else None
    flags = label_low_activity(world.users, cfg["eval_low_quantile"])
    lp = np.log(world.item_popularity)
    lp -= lp.mean()
    return Context(world, impressions_to_batch(train), impressions_to_batch(test), users, groups,
                   [u for u, f in flags.items() if f], {u.user_id: u.activity_count for u in world.users},
                   lp, priors, priors.M if priors else cfg["group_M"], priors.K if priors else cfg["group_K"])


def profile_texts(world, cfg: RunConfig) -> list[ProfileText]:
    bounds = cfg.windows()
    return [build_profile_text(u, bounds) for u in world.users]


def embed_texts(texts, cfg: RunConfig, offline: bool | None = None):
    offline = cfg["offline"] if offline is None else offline
    if offline:
        enc = OfflineEncoder(dim=cfg["profile_encoder_dim"], n_categories=cfg["world_n_categories"],
                             text_weight=cfg["profile_text_weight"])
        return encode_profiles(texts, cfg["profile_embedding_dim"], encoder=enc)
    client = EmbeddingClient(EmbeddingClientConfig(
        endpoint=cfg["profile_endpoint"], model=cfg["profile_model"], timeout=cfg["profile_timeout"],
        max_in_flight=cfg["profile_max_in_flight"], retry_budget=cfg["profile_retry_budget"],
        batch_size=cfg["profile_batch_size"], cache_path=cfg["profile_cache_path"]))
    return encode_profiles(texts, cfg["profile_embedding_dim"], client=client)


def group_embeddings(user_ids, X, cfg: RunConfig, K: int | None = None):
    K = cfg["group_K"] if K is None else K
    rq = rq_kmeans_fit(X, cfg["group_M"], K, cfg["seed"], cfg["group_max_iters"])
    codes = {int(u): tuple(int(c) for c in rq.codes[i]) for i, u in enumerate(user_ids)}
    return rq, codes


def priors_from_codes(world, codes, cfg: RunConfig, K: int):
    return build_priors(world.users, codes, K, cfg["priors_k_cat"], cfg["priors_max_len"],
                        cfg["priors_min_members"])


def build_model(ctx: Context, mcfg: ModelConfig) -> DualChannelModel:
    w = ctx.world
    return DualChannelModel(mcfg, len(w.users), len(w.items), w.config.n_categories, w.item_categories,
                            ctx.item_log_pop, ctx.M, ctx.K)


def evaluate(model: DualChannelModel, ctx: Context, seed: int, tag: str = "") -> MetricReport:
    pred = model.predict(ctx.test_batch, ctx.users, ctx.groups if model.uses_group else None)
    return build_report(model.cfg.mode, seed, ctx.test_batch.users, pred["z_fused"], ctx.test_batch.labels,
                        ctx.activity, ctx.low_users, pred.get("alpha_fusion"), tag)


def id_embedding_codes(ind_model: DualChannelModel, world, cfg: RunConfig, K: int | None = None):
    """Group users on the L2-normalised user-ID embeddings of a trained individual-only model."""
    E = ind_model.params["ind.user"].value
    ids = np.array([u.user_id for u in world.users])
    X = E[ids]
    norms = np.linalg.norm(X, axis=1, keepdims=True)
    X = np.where(norms > 0, X / np.where(norms > 0, norms, 1.0), 0.0)
    return group_embeddings(ids, X, cfg, K)


class Experiment:
    """In-memory pipeline for one seed: world, semantic groups, and cached trained models."""

    def __init__(self, cfg: RunConfig, world=None, embeddings=None):
        self.cfg = cfg
        self.world = generate_world(cfg.world(), cfg["seed"]) if world is None else world
        if embeddings is None:
            embeddings = embed_texts(profile_texts(self.world, cfg), cfg)
        self.user_ids = np.array([e.user_id for e in embeddings])
        self.embeddings = np.stack([e.vector for e in embeddings])
        self._contexts: dict = {}
        self._models: dict = {}

    @classmethod
    def from_artifacts(cls, cfg: RunConfig, allow_mismatch: bool = False) -> "Experiment":
        world = _load_world(cfg, allow_mismatch)
        src = stage_dir(cfg, "profile")
        check_upstream(src, "profile", cfg, allow_mismatch)
        return cls(cfg, world, load_embeddings(_need(src / "embeddings.jsonl", "profile")))

    def context(self, K: int | None = None, grouping: str = "semantic") -> Context:
        K = self.cfg["group_K"] if K is None else K
        key = (grouping, K)
        if key not in self._contexts:
            if grouping == "semantic":
                _, codes = group_embeddings(self.user_ids, self.embeddings, self.cfg, K)
            else:
                _, codes = id_embedding_codes(self.trained("individual_only")[0], self.world, self.cfg, K)
            pri = priors_from_codes(self.world, codes, self.cfg, K)
            self._contexts[key] = make_context(self.world, pri, self.cfg)
        return self._contexts[key]

    def trained(self, mode: str, K: int | None = None, **changes):
        # normalise so that sweep points equal to the defaults reuse the base run
        if K == self.cfg["group_K"]:
            K = None
        changes = {k: v for k, v in changes.items() if self.cfg[f"model_{k}"] != v}
        key = (mode, K, tuple(sorted(changes.items())))
        if key not in self._models:
            grouping = "id" if mode == "no_llm_emb" else "semantic"
            ctx = self.context(K, grouping)
            model = build_model(ctx, self.cfg.model(mode, **changes))
            train_model(model, ctx.train_batch, ctx.users, ctx.groups if model.uses_group else None)
            self._models[key] = (model, evaluate(model, ctx, self.cfg["seed"], _tag(K, changes)))
        return self._models[key]

    def report(self, mode: str, K: int | None = None, **changes) -> MetricReport:
        return self.trained(mode, K, **changes)[1]

    def ablations(self, rows=None):
        return run_ablation_suite(lambda m: self.report(m), rows, self.cfg["seed"])

    def k_sweep(self, ks=K_GRID):
        return run_sweep("k", ks, lambda k: self.report("full", K=k), self.cfg["seed"])

    def lambda_sweep(self, lambdas=LAMBDA_GRID):
        return run_sweep("lambda", lambdas, lambda l: self.report("full", kd_weight=l), self.cfg["seed"])


def _tag(K, changes) -> str:
    parts = [] if K is None else [f"k={K}"]
    parts += [f"{k}={v}" for k, v in sorted(changes.items())]
    return " ".join(parts)


# ---------------------------------------------------------------- file-backed stages


def stage_dir(cfg: RunConfig, stage: str, mode: str | None = None) -> Path:
    d = cfg.out / stage
    return d / mode if mode else d


def run_synth(cfg: RunConfig) -> Path:
    d = stage_dir(cfg, "synth")
    d.mkdir(parents=True, exist_ok=True)
    world = generate_world(cfg.world(), cfg["seed"])
    save_world(world, d)
    write_manifest(d, "synth", cfg, {})
    return d


def _load_world(cfg: RunConfig, allow_mismatch: bool):
    d = stage_dir(cfg, "synth")
    check_upstream(d, "synth", cfg, allow_mismatch)
    return load_world(d)


def run_profile(cfg: RunConfig, allow_mismatch: bool = False) -> Path:
    world = _load_world(cfg, allow_mismatch)
    d = stage_dir(cfg, "profile")
    d.mkdir(parents=True, exist_ok=True)
    texts = profile_texts(world, cfg)
    with (d / "profiles.jsonl").open("w", encoding="utf-8") as f:
        for t in texts:
            f.write(json.dumps({"user_id": t.user_id, "hash": t.content_hash(), "text": t.render()}) + "\n")
    save_embeddings(embed_texts(texts, cfg), d / "embeddings.jsonl")
    write_manifest(d, "profile", cfg, {"users.jsonl": stage_dir(cfg, "synth") / "users.jsonl"})
    return d


def run_group(cfg: RunConfig, allow_mismatch: bool = False) -> Path:
    src = stage_dir(cfg, "profile")
    check_upstream(src, "profile", cfg, allow_mismatch)
    embs = load_embeddings(_need(src / "embeddings.jsonl", "profile"))
    ids = np.array([e.user_id for e in embs])
    rq, _ = group_embeddings(ids, np.stack([e.vector for e in embs]), cfg)
    d = stage_dir(cfg, "group")
    d.mkdir(parents=True, exist_ok=True)
    save_codebooks(rq.codebooks, d / "codebooks.jsonl")
    save_assignments(ids, rq.codes, d / "assignments.jsonl")
    write_manifest(d, "group", cfg, {"embeddings.jsonl": src / "embeddings.jsonl"},
                   {"mean_residual_norms": [float(x) for x in rq.residual_norms.mean(axis=0)]})
    return d


def run_priors(cfg: RunConfig, allow_mismatch: bool = False) -> Path:
    world = _load_world(cfg, allow_mismatch)
    src = stage_dir(cfg, "group")
    check_upstream(src, "group", cfg, allow_mismatch)
    codes = load_assignments(_need(src / "assignments.jsonl", "group"))
    d = stage_dir(cfg, "priors")
    d.mkdir(parents=True, exist_ok=True)
    save_priors(priors_from_codes(world, codes, cfg, cfg["group_K"]), d / "priors.jsonl")
    write_manifest(d, "priors", cfg, {"assignments.jsonl": src / "assignments.jsonl"})
    return d


def _file_context(cfg: RunConfig, mode: str, allow_mismatch: bool) -> tuple[Context, dict]:
    """Context for ``mode``; no_llm_emb swaps in groups built from a trained individual-only model."""
    world = _load_world(cfg, allow_mismatch)
    inputs = {}
    if mode == "no_llm_emb":
        pri_path = stage_dir(cfg, "train", mode) / "priors.jsonl"
        _need(pri_path, "train")
    else:
        src = stage_dir(cfg, "priors")
        check_upstream(src, "priors", cfg, allow_mismatch)
        pri_path = _need(src / "priors.jsonl", "priors")
    inputs["priors.jsonl"] = pri_path
    return make_context(world, load_priors(pri_path), cfg), inputs


def _load_model(cfg: RunConfig, mode: str, ctx: Context, allow_mismatch: bool = False) -> DualChannelModel:
    d = stage_dir(cfg, "train", mode)
    check_upstream(d, "train", cfg, allow_mismatch)
    model = build_model(ctx, cfg.model(mode))
    saved = ag.load_params(_need(d / "params.jsonl", "train"))
    if set(saved) != set(model.params):
        raise ValueError(f"{d / 'params.jsonl'}: parameter names do not match mode {mode!r}")
    for k, v in saved.items():
        model.params[k].value = v
    return model


def run_train(cfg: RunConfig, mode: str, allow_mismatch: bool = False) -> Path:
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}")
    d = stage_dir(cfg, "train", mode)
    d.mkdir(parents=True, exist_ok=True)
    if mode == "no_llm_emb":
        world = _load_world(cfg, allow_mismatch)
        base_ctx, _ = _file_context(cfg, "individual_only", allow_mismatch)
        ind = _load_model(cfg, "individual_only", base_ctx, allow_mismatch)
        rq, codes = id_embedding_codes(ind, world, cfg)
        save_codebooks(rq.codebooks, d / "codebooks.jsonl")
        save_assignments(np.array(sorted(codes)), np.array([codes[u] for u in sorted(codes)]),
                         d / "assignments.jsonl")
        save_priors(priors_from_codes(world, codes, cfg, cfg["group_K"]), d / "priors.jsonl")
    ctx, inputs = _file_context(cfg, mode, allow_mismatch)
    model = build_model(ctx, cfg.model(mode))
    info = train_model(model, ctx.train_batch, ctx.users, ctx.groups if model.uses_group else None,
                       log_every=20, logger=log)
    ag.save_params(model.params, d / "params.jsonl")
    last = info["history"][-min(20, len(info["history"])):]
    summary = {"mode": mode, "theta_act": info["theta_act"], "steps": info["steps"],
               "final_bce": float(np.mean([h["bce"] for h in last])) if last else None,
               "model_config": json.loads(model.cfg.to_json())}
    (d / "train.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    write_manifest(d, "train", cfg, inputs)
    return d


def run_eval(cfg: RunConfig, mode: str, allow_mismatch: bool = False) -> MetricReport:
    ctx, inputs = _file_context(cfg, mode, allow_mismatch)
    model = _load_model(cfg, mode, ctx, allow_mismatch)
    rep = evaluate(model, ctx, cfg["seed"])
    d = stage_dir(cfg, "eval", mode)
    d.mkdir(parents=True, exist_ok=True)
    (d / "report.json").write_text(rep.to_json() + "\n")
    (d / "report.txt").write_text(rep.render() + "\n")
    inputs["params.jsonl"] = stage_dir(cfg, "train", mode) / "params.jsonl"
    write_manifest(d, "eval", cfg, inputs)
    return rep


def load_report(cfg: RunConfig, mode: str) -> MetricReport:
    p = _need(stage_dir(cfg, "eval", mode) / "report.json", "eval")
    return MetricReport.from_dict(json.loads(p.read_text()))


def report_payload(obj) -> dict:
    return asdict(obj)

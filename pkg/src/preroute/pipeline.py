"""End-to-end experiment stages over a run directory.

Every stage consumes the artifacts of earlier stages and appends
one line to ``manifest.jsonl`` recording input and output hashes, the seed,
the wall time and a few stats.  Stages are deterministic given the resolved
config, so re-running one reproduces identical artifact bytes.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import cache as rcache
from . import checkpoint, comm, diagnostics, ep, folding
from .autodiff import Tensor, no_grad
from .corpus import Corpus, CorpusSpec, make_corpus, skewed_weights, token_frequencies
from .grouter import (
    DistillConfig,
    Grouter,
    GrouterConfig,
    LiveGrouterRouter,
    TuneConfig,
    distill,
    expert_tune,
    freeze,
    mean_distill_loss,
    routing_maxvio,
    shared_route,
)
from .moe import MoeConfig, MoeModel, hash_layer_table
from .training import Checkpoint, TrainConfig, evaluate, read_metrics_csv, train_lm

SEED_ENV = "PREROUTE_SEED"
ARMS = ("grouter", "grouter-raw", "aux", "zloss", "hash")
FOLD_METHODS = ("affinity", "random", "load-balance")


class StageError(RuntimeError):
    pass


class MissingArtifactError(StageError):
    def __init__(self, path: Path, stage: str) -> None:
        self.path = path
        self.stage = stage
        super().__init__(f"missing artifact {path}; run `preroute {stage}` first")


class ConfigMismatchError(StageError):
    pass


# -- config ------------------------------------------------------------------------
@dataclass
class ExperimentConfig:
    """Nano-scale defaults: the whole pipeline runs in minutes on one CPU core."""

    seed: int = 0
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    source_sequences: int = 8192
    target_sequences: int = 8192
    valid_sequences: int = 256
    heavy_domain: int = 0
    skew_factor: float = 8.0
    source: MoeConfig = field(default_factory=lambda: MoeConfig(num_experts=16, top_k=2))
    grouter: GrouterConfig = field(default_factory=lambda: GrouterConfig(num_experts=16))
    target: MoeConfig = field(default_factory=lambda: MoeConfig(num_experts=8, top_k=2))
    source_tokens: int = 384_000
    distill_tokens: int = 512_000
    tune_tokens: int = 1_024_000
    target_tokens: int = 307_200
    batch_size: int = 8
    lr: float = 3e-3
    warmup: int = 50
    source_aux_coeff: float = 0.001
    fold_method: str = "affinity"
    fold_sample_sequences: int = 2048
    partitions: int = 4
    granularity: str = "gpu"
    gpus_per_node: int = 1
    target_seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    arms: list[str] = field(default_factory=lambda: ["grouter", "aux"])
    checkpoint_every: int = 200
    payload_bytes: int | None = None

    def validate(self) -> None:
        for name in ("source_tokens", "distill_tokens", "tune_tokens", "target_tokens"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.grouter.num_experts != self.source.num_experts:
            raise ValueError("grouter must output one score per source expert")
        if self.target.num_experts > self.source.num_experts:
            raise ValueError("folding needs E_T <= E_S")
        vocab = self.corpus.vocab_size
        for name, v in (("source", self.source.vocab_size), ("target", self.target.vocab_size), ("grouter", self.grouter.vocab_size)):
            if v != vocab:
                raise ValueError(f"{name} vocab {v} != corpus vocab {vocab}")
        L = self.corpus.seq_len
        if L > min(self.source.seq_len, self.target.seq_len, self.grouter.max_len):
            raise ValueError("corpus sequences longer than a model's context")
        if self.fold_method not in FOLD_METHODS:
            raise ValueError(f"fold_method must be one of {FOLD_METHODS}")
        for arm in self.arms:
            if arm not in ARMS:
                raise ValueError(f"unknown arm {arm!r}")
        ep.partition_capacities(self.target.num_experts, self.partitions)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentConfig:
        nested = {"corpus": CorpusSpec, "source": MoeConfig, "grouter": GrouterConfig, "target": MoeConfig}
        kw = {}
        for f in fields(cls):
            if f.name not in d:
                continue
            v = d[f.name]
            if f.name in nested:
                sub = nested[f.name]
                v = sub(**{k: v[k] for k in sub.__dataclass_fields__ if k in v})
            kw[f.name] = v
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**kw)

    def steps(self, tokens: int, batch: int) -> int:
        return max(1, tokens // (batch * self.corpus.seq_len))


def load_config(path: str | Path | None) -> ExperimentConfig:
    cfg = ExperimentConfig() if path is None else ExperimentConfig.from_dict(json.loads(Path(path).read_text()))
    if SEED_ENV in os.environ:
        cfg = replace(cfg, seed=int(os.environ[SEED_ENV]))
    cfg.validate()
    return cfg


def config_json(cfg: ExperimentConfig) -> str:
    return json.dumps(cfg.to_dict(), sort_keys=True, indent=1) + "\n"


# -- run directory ---------------------------------------------------------------------
def _finite(x: float) -> float | None:
    """JSON has no NaN; undefined statistics are written as null."""
    return float(x) if np.isfinite(x) else None


def sha256_file(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class Run:
    """A run directory: the resolved config plus every artifact and its manifest."""

    def __init__(self, root: str | Path, config: ExperimentConfig) -> None:
        self.root = Path(root)
        self.config = config
        self.root.mkdir(parents=True, exist_ok=True)
        text = config_json(config)
        cfg_path = self.root / "config.json"
        if cfg_path.exists() and cfg_path.read_text() != text:
            # a changed config starts a new provenance; keep the old manifest readable
            cfg_path.rename(self.root / f"config.{int(time.time())}.json")
        cfg_path.write_text(text)
        self.config_hash = hashlib.sha256(text.encode()).hexdigest()

    @classmethod
    def open(cls, root: str | Path, config_path: str | Path | None = None) -> Run:
        root = Path(root)
        existing = root / "config.json"
        if config_path is None and existing.exists():
            config_path = existing
        return cls(root, load_config(config_path))

    def path(self, *parts: str) -> Path:
        return self.root.joinpath(*parts)

    def require(self, rel: str | Path, stage: str) -> Path:
        p = rel if isinstance(rel, Path) and rel.is_absolute() else self.root / rel
        if not p.exists():
            raise MissingArtifactError(p, stage)
        return p

    def record(self, stage: str, inputs: list[Path], outputs: list[Path], started: float, stats: dict | None = None, seed: int | None = None) -> dict:
        entry = {
            "stage": stage,
            "config_sha256": self.config_hash,
            "seed": self.config.seed if seed is None else seed,
            "inputs": {self._rel(p): sha256_file(p) for p in inputs},
            "outputs": {self._rel(p): sha256_file(p) for p in outputs},
            "duration_s": round(time.time() - started, 3),
            "stats": stats or {},
        }
        with open(self.path("manifest.jsonl"), "a") as fh:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
        return entry

    def manifest(self) -> list[dict]:
        p = self.path("manifest.jsonl")
        if not p.exists():
            return []
        return [json.loads(line) for line in p.read_text().splitlines() if line.strip()]

    def _rel(self, p: Path) -> str:
        try:
            return str(Path(p).resolve().relative_to(self.root.resolve()))
        except ValueError:
            return str(p)


def _seed(cfg: ExperimentConfig, salt: int) -> int:
    return int(np.random.SeedSequence([cfg.seed, salt]).generate_state(1)[0])


def _write_rows(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


# -- stages ------------------------------------------------------------------------------
CORPUS_FILES = ("source_train", "source_valid", "target_train", "target_valid")


def stage_corpus(run: Run) -> dict:
    t0 = time.time()
    cfg = run.config
    out = run.path("corpus")
    out.mkdir(exist_ok=True)
    spec = cfg.corpus
    skew = skewed_weights(spec.num_domains, cfg.heavy_domain, cfg.skew_factor)
    parts = {
        "source_train": make_corpus(spec, cfg.source_sequences, None, _seed(cfg, 1)),
        "source_valid": make_corpus(spec, cfg.valid_sequences, None, _seed(cfg, 2)),
        "target_train": make_corpus(spec, cfg.target_sequences, skew, _seed(cfg, 3)),
        "target_valid": make_corpus(spec, cfg.valid_sequences, skew, _seed(cfg, 4)),
    }
    paths = []
    for name, c in parts.items():
        p = out / f"{name}.npz"
        c.save(p)
        paths.append(p)
    stats = {name: np.bincount(c.domains, minlength=spec.num_domains).tolist() for name, c in parts.items()}
    return run.record("corpus", [], paths, t0, {"domain_counts": stats})


def _corpus(run: Run, name: str) -> Corpus:
    return Corpus.load(run.require(Path("corpus") / f"{name}.npz", "corpus"))


def stage_pretrain_source(run: Run) -> dict:
    t0 = time.time()
    cfg = run.config
    train = _corpus(run, "source_train")
    valid = _corpus(run, "source_valid")
    steps = cfg.steps(cfg.source_tokens, cfg.batch_size)
    tc = TrainConfig(batch_size=cfg.batch_size, lr=cfg.lr, warmup=cfg.warmup, aux_coeff=cfg.source_aux_coeff, checkpoint_every=0)
    res = train_lm(cfg.source, train, "learned", steps, _seed(cfg, 10), tc)
    out = run.path("source")
    out.mkdir(exist_ok=True)
    ckpt = out / "model.moec"
    checkpoint.save_model(ckpt, res.model)
    res.write_metrics_csv(out / "metrics.csv")
    vl = evaluate(res.model, valid)
    inputs = [run.path("corpus", "source_train.npz"), run.path("corpus", "source_valid.npz")]
    return run.record("pretrain-source", inputs, [ckpt, out / "metrics.csv"], t0, {"steps": steps, "final_loss": res.log[-1].loss, "valid_loss": vl, "maxvio": res.log[-1].maxvio})


def stage_distill(run: Run) -> dict:
    t0 = time.time()
    cfg = run.config
    src_path = run.require(Path("source") / "model.moec", "pretrain-source")
    source, _ = checkpoint.load_model(src_path)
    train = _corpus(run, "source_train")
    valid = _corpus(run, "source_valid")
    if source.config.num_experts != cfg.grouter.num_experts:
        raise ConfigMismatchError(f"source has {source.config.num_experts} experts, grouter config {cfg.grouter.num_experts}")
    dc = DistillConfig(seed=_seed(cfg, 20))
    steps = cfg.steps(cfg.distill_tokens, dc.batch_size)
    g = Grouter(cfg.grouter, seed=_seed(cfg, 21))
    res = distill(source, g, train, steps, dc)
    freeze(g)
    out = run.path("grouter")
    out.mkdir(exist_ok=True)
    ckpt = out / "distilled.grtc"
    g.save(ckpt)
    _write_rows(out / "distill_loss.csv", ["step", "kl"], [(i + 1, repr(v)) for i, v in enumerate(res.losses)])
    kl = mean_distill_loss(source, g, valid)
    inputs = [src_path, run.path("corpus", "source_train.npz")]
    return run.record("distill", inputs, [ckpt, out / "distill_loss.csv"], t0, {"steps": steps, "final_kl": res.losses[-1], "valid_kl": kl})


def fold_groups(cfg: ExperimentConfig, g: Grouter, corpus: Corpus) -> list[list[int]]:
    e_s, e_t, k = cfg.source.num_experts, cfg.target.num_experts, cfg.source.top_k
    sizes = folding.group_sizes(e_s, e_t)
    sample = corpus.inputs[: cfg.fold_sample_sequences]
    idx = shared_route(g, sample, k).indices
    if cfg.fold_method == "affinity":
        return folding.greedy_merge(folding.coactivation_matrix(idx, e_s), sizes)
    if cfg.fold_method == "random":
        return folding.random_groups(e_s, sizes, _seed(cfg, 30))
    return folding.load_balance_groups(np.bincount(idx.ravel(), minlength=e_s), sizes)


def stage_fold(run: Run) -> dict:
    t0 = time.time()
    cfg = run.config
    g_path = run.require(Path("grouter") / "distilled.grtc", "distill")
    g = Grouter.load(g_path)
    if g.config.num_experts != cfg.source.num_experts:
        raise ConfigMismatchError(f"grouter outputs {g.config.num_experts} experts, source config has {cfg.source.num_experts}")
    train = _corpus(run, "source_train")
    groups = fold_groups(cfg, g, train)
    mapping = folding.mapping_matrix(groups, cfg.source.num_experts)
    folded = folding.fold_grouter(g, mapping)
    out = run.path("fold")
    out.mkdir(exist_ok=True)
    folding.save_mapping(out / "mapping.txt", mapping)
    folded.save(out / "folded.grtc")
    return run.record("fold", [g_path, run.path("corpus", "source_train.npz")], [out / "mapping.txt", out / "folded.grtc"], t0, {"method": cfg.fold_method, "groups": groups})


def stage_tune(run: Run) -> dict:
    t0 = time.time()
    cfg = run.config
    f_path = run.require(Path("fold") / "folded.grtc", "fold")
    folded = Grouter.load(f_path)
    if folded.config.num_experts != cfg.target.num_experts:
        raise ConfigMismatchError(f"folded grouter has {folded.config.num_experts} experts, target has {cfg.target.num_experts}")
    train = _corpus(run, "target_train")
    held = _corpus(run, "target_valid")
    k = cfg.target.top_k
    tc = TuneConfig(k=k, seed=_seed(cfg, 40))
    steps = cfg.steps(cfg.tune_tokens, tc.batch_size)
    before = routing_maxvio(folded, held, k)
    res = expert_tune(folded, train, steps, tc)
    after = routing_maxvio(res.grouter, held, k)
    out = run.path("tune")
    out.mkdir(exist_ok=True)
    res.grouter.save(out / "tuned.grtc")
    _write_rows(out / "tune_loss.csv", ["step", "aux_loss"], [(i + 1, repr(v)) for i, v in enumerate(res.losses)])
    stats = {
        "steps": steps,
        "maxvio_before": before,
        "maxvio_after": after,
        "encoder_checksum_before": folded.encoder_checksum(),
        "encoder_checksum_after": res.grouter.encoder_checksum(),
    }
    return run.record("tune", [f_path, run.path("corpus", "target_train.npz")], [out / "tuned.grtc", out / "tune_loss.csv"], t0, stats)


def stage_cache(run: Run, grouter: str | Path | None = None, corpus: str | Path | None = None, out: str | Path | None = None) -> dict:
    """Route corpora with the frozen grouter; defaults cache both target splits."""
    t0 = time.time()
    cfg = run.config
    g_path = Path(grouter) if grouter else run.require(Path("tune") / "tuned.grtc", "tune")
    if not g_path.exists():
        raise MissingArtifactError(g_path, "tune")
    g = Grouter.load(g_path)
    if g.config.num_experts != cfg.target.num_experts:
        raise ConfigMismatchError(f"grouter has {g.config.num_experts} experts, target has {cfg.target.num_experts}")
    if corpus:
        jobs = [(Path(corpus), Path(out) if out else run.path("cache", Path(corpus).stem + ".grtc"))]
    else:
        jobs = [(run.require(Path("corpus") / f"{n}.npz", "corpus"), run.path("cache", f"{n}.grtc")) for n in ("target_train", "target_valid")]
    outputs, sizes = [], {}
    for src, dst in jobs:
        if not src.exists():
            raise MissingArtifactError(src, "corpus")
        dst.parent.mkdir(parents=True, exist_ok=True)
        c = rcache.build_cache(g, Corpus.load(src).inputs, cfg.target.top_k)
        c.save(dst)
        outputs.append(dst)
        sizes[dst.name] = {"tokens": c.token_count, "bytes": dst.stat().st_size, "bytes_per_token": c.header.bytes_per_token}
    return run.record("cache", [g_path] + [j[0] for j in jobs], outputs, t0, sizes)


def stage_plan(run: Run, cache_path: str | Path | None = None, partitions: int | None = None, granularity: str | None = None, out: str | Path | None = None) -> dict:
    t0 = time.time()
    cfg = run.config
    c_path = Path(cache_path) if cache_path else run.require(Path("cache") / "target_train.grtc", "cache")
    if not c_path.exists():
        raise MissingArtifactError(c_path, "cache")
    c = rcache.load(c_path)
    n_p = partitions or cfg.partitions
    gran = granularity or cfg.granularity
    plan = ep.build_plan(
        c.per_sequence_indices(), c.header.num_experts, n_p, seed=_seed(cfg, 50),
        granularity=gran, gpus_per_node=cfg.gpus_per_node,
    )
    dst = Path(out) if out else run.path("plan", "plan.json")
    dst.parent.mkdir(parents=True, exist_ok=True)
    plan.save(dst)
    stats = {
        "partitions": n_p,
        "granularity": gran,
        "retained": len(plan.retained),
        "discarded": len(plan.discarded),
        "filter_bypassed": plan.filter_bypassed,
        "population": plan.population(),
    }
    return run.record("plan", [c_path], [dst], t0, stats)


def stage_simulate(run: Run, cache_path: str | Path | None = None, plan_path: str | Path | None = None, payload_bytes: int | None = None) -> dict:
    t0 = time.time()
    cfg = run.config
    c_path = Path(cache_path) if cache_path else run.require(Path("cache") / "target_train.grtc", "cache")
    p_path = Path(plan_path) if plan_path else run.require(Path("plan") / "plan.json", "plan")
    for p, stage in ((c_path, "cache"), (p_path, "plan")):
        if not p.exists():
            raise MissingArtifactError(p, stage)
    c = rcache.load(c_path)
    plan = ep.PlacementPlan.load(p_path)
    payload = payload_bytes or cfg.payload_bytes or comm.default_payload_bytes(cfg.target.d_model)
    report = comm.simulate(c.per_sequence_indices(), plan, payload, seed=_seed(cfg, 60))
    out = run.path("simulate")
    out.mkdir(exist_ok=True)
    (out / "comm.json").write_text(report.to_json())
    (out / "comm.csv").write_text(",".join(comm.CommReport.CSV_COLUMNS) + "\n" + report.csv_row())
    return run.record("simulate", [c_path, p_path], [out / "comm.json", out / "comm.csv"], t0, {"savings_vs_random": report.savings_vs_random, "total": report.total})


def run_name(arm: str, seed: int) -> str:
    return f"{arm}-s{seed}"


def stage_train_target(run: Run, arm: str, seed: int, steps: int | None = None) -> dict:
    """Train one target arm; the grouter arm replays the routing cache."""
    t0 = time.time()
    cfg = run.config
    if arm not in ARMS:
        raise ValueError(f"router must be one of {ARMS}")
    tcfg = cfg.target
    inputs = [run.require(Path("corpus") / "target_train.npz", "corpus"), run.require(Path("corpus") / "target_valid.npz", "corpus")]
    router = valid_router = None
    hash_table = None
    mode = "learned"
    aux, z = 0.01, 0.0
    if arm == "grouter":
        g_path = run.require(Path("tune") / "tuned.grtc", "tune")
        g = Grouter.load(g_path)
        if g.config.num_experts != tcfg.num_experts:
            raise ConfigMismatchError(f"grouter has {g.config.num_experts} experts, target has {tcfg.num_experts}")
        caches = [run.require(Path("cache") / f"{n}.grtc", "cache") for n in ("target_train", "target_valid")]
        train_cache, valid_cache = (rcache.load(p) for p in caches)
        for c in (train_cache, valid_cache):
            if c.header.num_experts != tcfg.num_experts or c.header.k != tcfg.top_k:
                raise ConfigMismatchError(f"cache routes E={c.header.num_experts}, k={c.header.k}; target wants E={tcfg.num_experts}, k={tcfg.top_k}")
        router = rcache.CacheRouter(train_cache, tcfg.router_normalizer)
        valid_router = rcache.CacheRouter(valid_cache, tcfg.router_normalizer)
        mode = "frozen-grouter"
        inputs += [g_path, *caches]
    elif arm == "grouter-raw":
        g_path = run.require(Path("fold") / "folded.grtc", "fold")
        g = Grouter.load(g_path)
        if g.config.num_experts != tcfg.num_experts:
            raise ConfigMismatchError(f"grouter has {g.config.num_experts} experts, target has {tcfg.num_experts}")
        router = LiveGrouterRouter(g, tcfg.top_k, tcfg.router_normalizer)
        mode = "frozen-grouter"
        inputs.append(g_path)
    elif arm == "zloss":
        z = 0.001
    elif arm == "hash":
        mode = "hash"
        aux = 0.0
    train = Corpus.load(inputs[0])
    valid = Corpus.load(inputs[1])
    if mode == "hash":
        hash_table = hash_layer_table(token_frequencies(train, tcfg.vocab_size), tcfg.num_experts, tcfg.top_k)
    steps = steps or cfg.steps(cfg.target_tokens, cfg.batch_size)
    tc = TrainConfig(
        batch_size=cfg.batch_size, lr=cfg.lr, warmup=cfg.warmup, aux_coeff=aux, z_coeff=z,
        checkpoint_every=cfg.checkpoint_every, eval_every=max(1, steps // 8),
    )
    res = train_lm(tcfg, train, mode, steps, seed, tc, router=router, hash_table=hash_table, valid=valid, valid_router=valid_router)
    out = run.path("target", run_name(arm, seed))
    out.mkdir(parents=True, exist_ok=True)
    res.write_metrics_csv(out / "metrics.csv")
    _write_rows(out / "valid.csv", ["step", "tokens", "valid_loss"], [(s, t, repr(v)) for s, t, v in res.valid_log])
    outputs = [out / "metrics.csv", out / "valid.csv"]
    for ck in res.checkpoints:
        p = out / f"ckpt-{ck.step:06d}.moec"
        checkpoint.save(p, checkpoint.MOE_MAGIC, {"model": tcfg.to_dict(), "step": ck.step, "tokens": ck.tokens}, ck.arrays)
        outputs.append(p)
    rg = [r.router_grad_norm for r in res.log]
    stats = {
        "arm": arm,
        "router_mode": mode,
        "steps": steps,
        "final_valid_loss": res.valid_log[-1][2] if res.valid_log else None,
        "final_maxvio": res.log[-1].maxvio if res.log else None,
        "max_router_grad_norm": max(rg) if rg else 0.0,
        "max_cv_100": _finite(diagnostics.max_cv(res.grad_norms(), 100)),
    }
    return run.record("train-target", inputs, outputs, t0, stats, seed=seed)


def target_runs(run: Run) -> list[str]:
    root = run.path("target")
    if not root.exists():
        return []
    return sorted(p.name for p in root.iterdir() if (p / "metrics.csv").exists())


def _load_ckpts(folder: Path) -> list[Checkpoint]:
    out = []
    for p in sorted(folder.glob("ckpt-*.moec")):
        cfgd, arrays = checkpoint.load(p, checkpoint.MOE_MAGIC)
        out.append(Checkpoint(cfgd["step"], cfgd["tokens"], arrays))
    return out


def stage_diagnose(run: Run, probe_sequences: int = 8) -> dict:
    """Routing-stability and gradient statistics for every trained target run."""
    t0 = time.time()
    cfg = run.config
    names = target_runs(run)
    if not names:
        raise MissingArtifactError(run.path("target"), "train-target")
    valid = _corpus(run, "target_valid")
    probe_ids = np.arange(min(probe_sequences, valid.num_sequences))
    probe = valid.tokens[probe_ids]
    out_root = run.path("diagnose")
    outputs, inputs, summary = [], [], {}
    for name in names:
        folder = run.path("target", name)
        arm = name.rsplit("-s", 1)[0]
        ckpts = _load_ckpts(folder)
        inputs += sorted(folder.glob("ckpt-*.moec")) + [folder / "metrics.csv"]
        base = MoeModel(cfg.target)
        router = None
        mode = "learned"
        hash_table = None
        grouter = None
        if arm in ("grouter", "grouter-raw"):
            mode = "frozen-grouter"
            if arm == "grouter":
                grouter = Grouter.load(run.require(Path("tune") / "tuned.grtc", "tune"))
                router = rcache.CacheRouter(rcache.load(run.require(Path("cache") / "target_valid.grtc", "cache")))
            else:
                grouter = Grouter.load(run.require(Path("fold") / "folded.grtc", "fold"))
                router = LiveGrouterRouter(grouter, cfg.target.top_k)
        elif arm == "hash":
            mode = "hash"
            hash_table = hash_layer_table(token_frequencies(_corpus(run, "target_train"), cfg.target.vocab_size), cfg.target.num_experts, cfg.target.top_k)
        snaps = []
        for ck in ckpts:
            if mode == "frozen-grouter":
                # routing comes from the frozen grouter, whatever the checkpoint
                snaps.append(diagnostics.grouter_snapshot(grouter, probe[:, :-1], ck.step, cfg.target.top_k))
            else:
                m = base.with_params({k: Tensor(v) for k, v in ck.arrays.items()})
                snaps.append(diagnostics.model_snapshot(m, probe[:, :-1], ck.step) if mode == "learned" else _hash_snapshot(m, probe[:, :-1], ck.step, hash_table))
        em = diagnostics.pairwise(snaps, diagnostics.exact_match_rate)
        labels = [s.checkpoint for s in snaps]
        dest = out_root / name
        dest.mkdir(parents=True, exist_ok=True)
        diagnostics.write_matrix_csv(dest / "exact_match.csv", labels, em)
        cos = diagnostics.pairwise(snaps, diagnostics.score_cosine)
        diagnostics.write_matrix_csv(dest / "score_cosine.csv", labels, cos)
        norms = np.array([r["grad_norm"] for r in read_metrics_csv(folder / "metrics.csv")])
        steps = np.arange(1, len(norms) + 1)
        diagnostics.write_series_csv(
            dest / "grad_cv.csv",
            {"step": steps, "grad_norm": norms, **{f"cv_{w}": diagnostics.grad_norm_cv(norms, w) for w in (50, 100, 500)}},
        )
        eo = diagnostics.e_opt_series(base, ckpts, probe, mode, router, hash_table=hash_table)
        diagnostics.write_series_csv(dest / "e_opt.csv", {"checkpoint": np.array(labels), "distance": eo})
        outputs += [dest / f for f in ("exact_match.csv", "score_cosine.csv", "grad_cv.csv", "e_opt.csv")]
        summary[name] = {
            "min_exact_match": float(em.min()) if em.size else None,
            "min_score_cosine": float(cos.min()) if cos.size else None,
            "e_opt": float(eo.sum()),
            "max_cv_100": _finite(diagnostics.max_cv(norms, 100)),
        }
    (out_root / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=1) + "\n")
    outputs.append(out_root / "summary.json")
    return run.record("diagnose", inputs, outputs, t0, summary)


def _hash_snapshot(model: MoeModel, tokens: np.ndarray, step: int, table: np.ndarray) -> diagnostics.RoutingSnapshot:
    with no_grad():
        out = model.forward(tokens, hash_table=table)
    return diagnostics.RoutingSnapshot(step, out.indices[0], out.router_logits[0].data)


# -- report --------------------------------------------------------------------------------
def quadrant(loss: float, maxvio: float, loss_median: float, maxvio_median: float) -> str:
    a = "low-loss" if loss <= loss_median else "high-loss"
    b = "balanced" if maxvio <= maxvio_median else "imbalanced"
    return f"{a}/{b}"


def stage_report(run: Run) -> dict:
    """Consolidate every run artifact into one JSON report plus a CSV per table."""
    t0 = time.time()
    out = run.path("report")
    out.mkdir(exist_ok=True)
    manifest = run.manifest()
    used = [e for e in manifest if e["stage"] in ("train-target", "simulate", "diagnose")]
    provenance = {e["config_sha256"] for e in used}
    if len(provenance) > 1:
        raise StageError(f"refusing to report over mixed provenance: {len(provenance)} distinct configs in the manifest")
    corpus_hashes = {e["inputs"].get("corpus/target_train.npz") for e in used if e["stage"] == "train-target"}
    if len(corpus_hashes - {None}) > 1:
        raise StageError("refusing to report: target runs used different training corpora")

    names = target_runs(run)
    curves, scatter, cv_rows, inputs = [], [], [], []
    finals = {}
    for name in names:
        folder = run.path("target", name)
        inputs += [folder / "metrics.csv", folder / "valid.csv"]
        metrics = read_metrics_csv(folder / "metrics.csv")
        with open(folder / "valid.csv", newline="") as fh:
            vrows = list(csv.DictReader(fh))
        for r in vrows:
            curves.append({"run": name, "step": int(r["step"]), "tokens": int(r["tokens"]), "valid_loss": float(r["valid_loss"])})
        norms = np.array([m["grad_norm"] for m in metrics])
        cv = diagnostics.grad_norm_cv(norms, 100)
        for m, c in zip(metrics, cv):
            if np.isfinite(c):
                cv_rows.append({"run": name, "step": m["step"], "cv_100": float(c)})
        if vrows and metrics:
            finals[name] = (float(vrows[-1]["valid_loss"]), metrics[-1]["maxvio"])
    if finals:
        lm = float(np.median([v[0] for v in finals.values()]))
        mm = float(np.median([v[1] for v in finals.values()]))
        for name, (loss, mv) in finals.items():
            scatter.append({"run": name, "valid_loss": loss, "maxvio": mv, "quadrant": quadrant(loss, mv, lm, mm)})
    comm_rows = []
    comm_json = run.path("simulate", "comm.json")
    if comm_json.exists():
        inputs.append(comm_json)
        comm_rows.append(json.loads(comm_json.read_text()))
    # storage paid by the cache against the grouter compute it saves per token
    storage_rows = []
    flops = run.config.grouter.flops_per_token(run.config.corpus.seq_len)
    for p in sorted(run.path("cache").glob("*.grtc")) if run.path("cache").exists() else []:
        with open(p, "rb") as fh:
            h = rcache.read_header(fh.read(rcache.HEADER.size))
        inputs.append(p)
        storage_rows.append({
            "file": p.name, "tokens": h.token_count, "k": h.k, "index_width": h.index_width,
            "bytes": h.file_size, "bytes_per_token": h.bytes_per_token, "grouter_flops_per_token": flops,
        })

    tables = {"loss_curves": curves, "maxvio_vs_loss": scatter, "grad_cv": cv_rows, "comm_savings": comm_rows, "cache_storage": storage_rows}
    columns = {
        "loss_curves": ["run", "step", "tokens", "valid_loss"],
        "maxvio_vs_loss": ["run", "valid_loss", "maxvio", "quadrant"],
        "grad_cv": ["run", "step", "cv_100"],
        "comm_savings": list(comm.CommReport.CSV_COLUMNS),
        "cache_storage": ["file", "tokens", "k", "index_width", "bytes", "bytes_per_token", "grouter_flops_per_token"],
    }
    outputs = []
    for name, rows in tables.items():
        p = out / f"{name}.csv"
        _write_rows(p, columns[name], [[r.get(c) for c in columns[name]] for r in rows])
        outputs.append(p)
    body = {"format": "preroute-report", "version": 1, "config_sha256": run.config_hash, "runs": names, **tables}
    (out / "report.json").write_text(json.dumps(body, sort_keys=True, indent=1) + "\n")
    outputs.append(out / "report.json")
    return run.record("report", inputs, outputs, t0, {"runs": len(names)})

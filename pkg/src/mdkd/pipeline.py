"""File-based experiment stages: preprocess, select, generic, teachers, stores, student, evaluate.

Every stage reads its inputs from and writes its outputs to one run directory::

    out/
      manifest.json              artifact paths + sha256, config snapshot, vocabulary fingerprint
      data/                      bpe.codes, vocab.txt, <tag>.<split>.{src,tgt}[.bpe]
      selection/<tag>/           ranking.txt, epoch_<i>.txt
      generic/                   model.ckpt, ckpt/
      teachers/<tag>/            model.ckpt, ckpt/
      stores/<tag>.kdst
      student/, baseline/        model.ckpt, ckpt/
      reports/bleu.json

Checkpoint directories carry a ``stage.json`` with a hash of everything the
stage depends on. A rerun with the same hash resumes from the newest
checkpoint; a different hash wipes the stale checkpoints first.
"""

from __future__ import annotations

import hashlib
import json
import logging
import shutil
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import ExperimentConfig
from .corpus import (
    ParallelCorpus,
    SentencePair,
    Vocabulary,
    build_vocab,
    encode_corpus,
    filter_corpus,
    learn_bpe,
    load_bpe,
    load_parallel,
    save_bpe,
    tokenize_corpus,
    write_parallel,
)
from .errors import ConfigError
from .evaluation import compute_delta, evaluate_model, write_report
from .model import (
    ModelConfig,
    ModelParams,
    average_checkpoints,
    init_model,
    load_checkpoint,
    save_checkpoint,
)
from .selection import SelectionSchedule, build_ranker, dynamic_finetune, rank_by_ced, selection_size
from .store import SoftTargetStore, build_soft_target_store, read_store, write_store
from .training import DataSource, TrainConfig, dev_loss, train_epochs, train_steps

__all__ = [
    "Run", "preprocess", "select", "train_generic", "finetune_teachers", "distill_targets",
    "distill_student", "run_baseline_finetune", "run_baseline_ensemble", "evaluate",
    "run_all", "compute_delta", "derive_seed",
]

logger = logging.getLogger(__name__)

SPLITS = ("train", "dev", "test")
GENERIC = "generic"


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def derive_seed(seed: int, name: str) -> int:
    """Per-stage seed that depends only on the run seed and the stage name."""
    return int.from_bytes(hashlib.sha256(f"{seed}:{name}".encode()).digest()[:4], "little")


def _hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


# ----------------------------------------------------------------------- manifest


@dataclass
class Run:
    """A run directory plus its manifest; artifacts are stored relative to ``out``."""

    cfg: ExperimentConfig
    out: Path
    manifest: dict = field(default_factory=dict)

    @classmethod
    def open(cls, cfg: ExperimentConfig, out: str | Path) -> "Run":
        out = Path(out)
        path = out / "manifest.json"
        manifest = {}
        if path.exists():
            with open(path, encoding="utf-8") as f:
                manifest = json.load(f)
        return cls(cfg, out, manifest)

    def save(self) -> None:
        self.out.mkdir(parents=True, exist_ok=True)
        tmp = self.out / "manifest.json.tmp"
        with open(tmp, "w", encoding="utf-8") as f:
            json.dump(self.manifest, f, indent=2, sort_keys=True)
            f.write("\n")
        tmp.replace(self.out / "manifest.json")

    def record(self, name: str, path: Path) -> None:
        self.manifest.setdefault("artifacts", {})[name] = {
            "path": str(path.relative_to(self.out)),
            "sha256": sha256_file(path),
        }

    def artifact(self, name: str) -> Path:
        entry = self.manifest.get("artifacts", {}).get(name)
        if entry is None:
            raise ConfigError(f"missing artifact {name!r}; run the stage that produces it first")
        path = self.out / entry["path"]
        if not path.exists():
            raise FileNotFoundError(f"artifact {name!r} listed in the manifest is missing: {path}")
        return path

    def checksum(self, name: str) -> str:
        self.artifact(name)
        return self.manifest["artifacts"][name]["sha256"]

    def stage_log(self, stage: str, info: dict) -> None:
        self.manifest.setdefault("stages", {})[stage] = info

    # -- shared inputs

    def vocab(self) -> Vocabulary:
        v = Vocabulary.load(self.artifact("vocab"))
        if v.fingerprint.hex() != self.manifest.get("vocab_fingerprint"):
            raise ConfigError("vocabulary file does not match the manifest fingerprint")
        return v

    def corpus(self, tag: str, split: str, vocab: Vocabulary | None = None) -> ParallelCorpus:
        """Preprocessed split as ids (source reversed if configured), raw text kept for BLEU."""
        vocab = vocab or self.vocab()
        raw = load_parallel(self.artifact(f"{tag}.{split}.src"), self.artifact(f"{tag}.{split}.tgt"), tag)
        bpe = load_parallel(self.artifact(f"{tag}.{split}.src.bpe"), self.artifact(f"{tag}.{split}.tgt.bpe"), tag)
        pairs = [SentencePair(b.source, b.target, r.raw_source, r.raw_target)
                 for r, b in zip(raw.pairs, bpe.pairs)]
        reverse = bool(self.cfg["preprocess"]["reverse_source"])
        return encode_corpus(ParallelCorpus(pairs, tag), vocab, reverse)

    def model(self, name: str) -> ModelParams:
        return load_checkpoint(self.artifact(name))

    def model_config(self, vocab_size: int, student: bool = False) -> ModelConfig:
        m = dict(self.cfg["model"])
        if student:
            for k, v in self.cfg["student_model"].items():
                if v is not None:
                    m[k] = v
        return ModelConfig(vocab_size, int(m["embed_dim"]), int(m["hidden_dim"]),
                           int(m["max_decode_len"]), derive_seed(self.cfg.seed, "student" if student else "generic"))

    def train_config(self, label_smoothing: float | None = None, finetune: bool = False) -> TrainConfig:
        t = self.cfg["train"]
        eps = self.cfg["loss"]["label_smoothing"] if label_smoothing is None else label_smoothing
        offset = 0
        if finetune:
            offset = int(self.manifest.get("stages", {}).get("generic", {}).get("steps", 0))
        return TrainConfig(int(t["batch_size"]), int(t["warmup"]), float(t["lr_scale"]), float(eps),
                           float(t["dropout"]), offset)


def _stage_dir(path: Path, key: str) -> Path:
    """Checkpoint directory guarded by ``key``: stale contents are wiped."""
    stamp = path / "stage.json"
    if path.exists():
        old = json.loads(stamp.read_text()) if stamp.exists() else {}
        if old.get("key") != key:
            logger.info("configuration changed; clearing %s", path)
            shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    stamp.write_text(json.dumps({"key": key}) + "\n")
    return path


# --------------------------------------------------------------------- preprocess


def preprocess(cfg: ExperimentConfig, out: str | Path) -> Run:
    """Filter training splits, learn joint BPE and the shared vocabulary, write every split."""
    cfg.validate()
    run = Run.open(cfg, out)
    pp = cfg["preprocess"]
    data_dir = run.out / "data"
    data_dir.mkdir(parents=True, exist_ok=True)
    tags = [GENERIC, *cfg.domain_tags]

    corpora: dict[tuple[str, str], ParallelCorpus] = {}
    for tag in tags:
        for split in SPLITS:
            c = load_parallel(*cfg.corpus_paths(tag, split), tag)
            if split == "train":
                kept = filter_corpus(c, int(pp["max_len"]), float(pp["max_ratio"]))
                logger.info("%s.train: kept %d of %d pairs", tag, len(kept), len(c))
                c = kept
            corpora[tag, split] = c

    train = [corpora[t, "train"] for t in tags]
    bpe = learn_bpe(train, int(pp["bpe_merges"]))
    save_bpe(bpe, data_dir / "bpe.codes")
    tokenized = {k: tokenize_corpus(c, bpe) for k, c in corpora.items()}
    vocab = build_vocab(tokenized[t, "train"] for t in tags)
    vocab.save(data_dir / "vocab.txt")

    run.manifest = {"config": cfg.raw, "vocab_fingerprint": vocab.fingerprint.hex(), "artifacts": {}}
    run.record("bpe", data_dir / "bpe.codes")
    run.record("vocab", data_dir / "vocab.txt")
    for (tag, split), c in tokenized.items():
        stem = data_dir / f"{tag}.{split}"
        with open(f"{stem}.src", "w", encoding="utf-8", newline="\n") as fs, \
                open(f"{stem}.tgt", "w", encoding="utf-8", newline="\n") as ft:
            for p in c.pairs:
                fs.write(p.raw_source + "\n")
                ft.write(p.raw_target + "\n")
        write_parallel(c, f"{stem}.src.bpe", f"{stem}.tgt.bpe")
        for ext in ("src", "tgt", "src.bpe", "tgt.bpe"):
            run.record(f"{tag}.{split}.{ext}", Path(f"{stem}.{ext}"))
    run.stage_log("preprocess", {"vocab_size": len(vocab), "bpe_merges": bpe.num_merges,
                                 "train_sizes": {t: len(corpora[t, "train"]) for t in tags}})
    run.save()
    return run


def _check_bpe(run: Run) -> None:
    # fails loudly if the BPE file was hand-edited after preprocessing
    load_bpe(run.artifact("bpe"))


# ---------------------------------------------------------------------- selection


def schedule(cfg: ExperimentConfig, generic_size: int) -> SelectionSchedule:
    s = cfg["selection"]
    return SelectionSchedule(float(s["alpha"]), float(s["beta"]), int(s["nu"]), generic_size,
                             bool(s["integer_exponent"]))


def select(run: Run) -> dict[str, list[int]]:
    """Rank the generic corpus for every domain; write the ranking and per-epoch subsets."""
    cfg = run.cfg
    vocab = run.vocab()
    generic = run.corpus(GENERIC, "train", vocab)
    sched = schedule(cfg, len(generic))
    rankings = {}
    for tag in cfg.domain_tags:
        in_domain = run.corpus(tag, "train", vocab)
        ranker = build_ranker(in_domain, generic, int(cfg["selection"]["lm_order"]),
                              bool(cfg["selection"]["normalized"]), len(vocab), vocab.fingerprint)
        ranking = rank_by_ced(ranker, generic, vocab.fingerprint)
        d = run.out / "selection" / tag
        d.mkdir(parents=True, exist_ok=True)
        _write_indices(d / "ranking.txt", ranking)
        run.record(f"ranking.{tag}", d / "ranking.txt")
        for i in range(1, int(cfg["train"]["teacher_epochs"]) + 1):
            _write_indices(d / f"epoch_{i}.txt", ranking[:selection_size(sched, i)])
        rankings[tag] = ranking
    run.stage_log("select", {"generic_size": len(generic),
                             "sizes": [selection_size(sched, i)
                                       for i in range(1, int(cfg["train"]["teacher_epochs"]) + 1)]})
    run.save()
    return rankings


def _write_indices(path: Path, indices: Sequence[int]) -> None:
    path.write_text("".join(f"{i}\n" for i in indices), encoding="utf-8")


def _read_indices(path: Path) -> list[int]:
    return [int(x) for x in path.read_text(encoding="utf-8").split()]


# ------------------------------------------------------------------------ generic


def train_generic(run: Run) -> ModelParams:
    """Step-budget training from random init; the result averages the last checkpoints."""
    cfg = run.cfg
    t = cfg["train"]
    vocab = run.vocab()
    generic = run.corpus(GENERIC, "train", vocab)
    dev = run.corpus(GENERIC, "dev", vocab)
    mcfg = run.model_config(len(vocab))
    tcfg = run.train_config()
    key = _hash({"model": cfg["model"], "train": t, "loss": cfg["loss"]["label_smoothing"],
                 "seed": cfg.seed, "data": run.checksum("generic.train.src.bpe"),
                 "tgt": run.checksum("generic.train.tgt.bpe"), "vocab": run.checksum("vocab"),
                 "pre": cfg["preprocess"]})
    ckpt_dir = _stage_dir(run.out / "generic" / "ckpt", key)
    res = train_steps(init_model(mcfg), [DataSource(generic, name=GENERIC)], tcfg,
                      int(t["generic_steps"]), derive_seed(cfg.seed, "generic"),
                      checkpoint_every=int(t["checkpoint_every"]), ckpt_dir=ckpt_dir,
                      criterion=lambda p: dev_loss(p, dev), patience=int(t["generic_patience"]))
    if res.checkpoints:
        final = average_checkpoints([p for _, p in res.checkpoints[-int(t["average_last"]):]])
    else:
        final = init_model(mcfg)
    path = run.out / "generic" / "model.ckpt"
    save_checkpoint(final, path)
    run.record("model.generic", path)
    run.stage_log("generic", {"steps": res.steps, "batch_log": res.batch_log,
                              "dev_loss": res.criteria, "final_dev_loss": dev_loss(final, dev),
                              "checkpoint_steps": [s for s, _ in res.checkpoints]})
    run.save()
    return final


# ----------------------------------------------------------------------- teachers


def _finetune_one(run: Run, tag: str, gen: ModelParams, vocab: Vocabulary, generic: ParallelCorpus):
    cfg = run.cfg
    t = cfg["train"]
    in_domain = run.corpus(tag, "train", vocab)
    dev = run.corpus(tag, "dev", vocab)
    ranking = _read_indices(run.artifact(f"ranking.{tag}"))
    tcfg = run.train_config(float(t["teacher_label_smoothing"]), finetune=True)
    key = _hash({"train": t, "tcfg": str(tcfg), "selection": cfg["selection"], "seed": cfg.seed,
                 "gen": run.checksum("model.generic"), "rank": run.checksum(f"ranking.{tag}"),
                 "data": run.checksum(f"{tag}.train.tgt.bpe")})
    ckpt_dir = _stage_dir(run.out / "teachers" / tag / "ckpt", key)
    res = dynamic_finetune(gen, in_domain, generic, schedule(cfg, len(generic)),
                           int(t["teacher_epochs"]), tcfg, seed=derive_seed(cfg.seed, f"teacher:{tag}"),
                           ranking=ranking, criterion=lambda p: dev_loss(p, dev),
                           patience=int(t["teacher_patience"]), ckpt_dir=ckpt_dir)
    path = run.out / "teachers" / tag / "model.ckpt"
    save_checkpoint(res.params, path)
    info = {"dev_loss": res.run.criteria, "best_epoch": res.run.best + 1,
            "generic_dev_loss": dev_loss(gen, dev), "subset_sizes": [len(s) for s in res.subsets],
            "batch_log": res.run.batch_log}
    return tag, path, info


def finetune_teachers(run: Run, threads: int = 1) -> dict[str, ModelParams]:
    """One teacher per domain, each finetuned independently from the generic model."""
    vocab = run.vocab()
    gen = run.model("model.generic")
    generic = run.corpus(GENERIC, "train", vocab)
    tags = run.cfg.domain_tags
    if threads > 1 and len(tags) > 1:
        with ThreadPoolExecutor(min(threads, len(tags))) as pool:
            results = list(pool.map(lambda tag: _finetune_one(run, tag, gen, vocab, generic), tags))
    else:
        results = [_finetune_one(run, tag, gen, vocab, generic) for tag in tags]
    teachers = {}
    for tag, path, info in results:
        run.record(f"model.teacher.{tag}", path)
        run.stage_log(f"teacher.{tag}", info)
        teachers[tag] = load_checkpoint(path)
    run.save()
    return teachers


# ------------------------------------------------------------------------- stores


def distill_targets(run: Run) -> dict[str, SoftTargetStore]:
    """Top-K teacher distributions over each domain's training set."""
    vocab = run.vocab()
    k = int(run.cfg["loss"]["top_k"])
    stores = {}
    d = run.out / "stores"
    d.mkdir(parents=True, exist_ok=True)
    for tag in run.cfg.domain_tags:
        teacher = run.model(f"model.teacher.{tag}")
        if teacher.cfg.vocab_size != len(vocab):
            raise ConfigError(f"teacher {tag!r} has |V|={teacher.cfg.vocab_size}, vocabulary has {len(vocab)}")
        store = build_soft_target_store(teacher, run.corpus(tag, "train", vocab), k, vocab.fingerprint, tag)
        path = d / f"{tag}.kdst"
        write_store(store, path)
        run.record(f"store.{tag}", path)
        stores[tag] = store
    run.stage_log("distill_targets", {"top_k": k, "sentences": {t: len(s) for t, s in stores.items()}})
    run.save()
    return stores


# ------------------------------------------------------------------------ student


def generic_subset(run: Run, generic: ParallelCorpus) -> list[int]:
    """Seeded random sample of the generic training set mixed into student training."""
    n = max(1, int(round(float(run.cfg["train"]["generic_subset_fraction"]) * len(generic))))
    rng = np.random.default_rng(derive_seed(run.cfg.seed, "generic_subset"))
    return sorted(int(i) for i in rng.choice(len(generic), size=min(n, len(generic)), replace=False))


def _load_store(run: Run, tag: str, vocab: Vocabulary) -> SoftTargetStore:
    entry = run.manifest.get("artifacts", {}).get(f"store.{tag}")
    if entry is None or not (run.out / entry["path"]).exists():
        raise ConfigError(f"missing soft-target store for domain {tag!r} "
                          f"(expected {run.out / 'stores' / (tag + '.kdst')}); run distill-targets first")
    store = read_store(run.out / entry["path"], vocab.fingerprint, tag)
    store.check_vocab(vocab.fingerprint, len(vocab))
    return store


def distill_student(run: Run, lam: float | None = None, name: str = "student") -> ModelParams:
    """Train the multi-domain student on all domains plus a generic subset.

    Domain batches mix the ground truth with the domain's teacher store at
    weight ``lam``; generic-subset batches use the ground truth only. With
    ``lam == 0`` no store is read and this is plain mixed finetuning.
    Checkpoints are ranked by mean BLEU on the domain dev sets.
    """
    cfg = run.cfg
    t = cfg["train"]
    lam = float(cfg["loss"]["lambda"]) if lam is None else float(lam)
    vocab = run.vocab()
    gen = run.model("model.generic")
    generic = run.corpus(GENERIC, "train", vocab)
    tags = cfg.domain_tags

    sources = []
    store_sums = {}
    for tag in tags:
        store = _load_store(run, tag, vocab) if lam > 0 else None
        if store is not None:
            store_sums[tag] = run.checksum(f"store.{tag}")
        sources.append(DataSource(run.corpus(tag, "train", vocab), store, lam, tag))
    subset = generic_subset(run, generic)
    sources.append(DataSource(generic.subset(subset), name=GENERIC))

    scfg = run.model_config(len(vocab), student=True)
    warm = (scfg.embed_dim, scfg.hidden_dim) == (gen.cfg.embed_dim, gen.cfg.hidden_dim)
    init = ModelParams(scfg, gen.flat.copy()) if warm else init_model(scfg)
    tcfg = run.train_config(finetune=warm)
    devs = [run.corpus(tag, "dev", vocab) for tag in tags]

    def criterion(p: ModelParams) -> float:
        return -float(np.mean([evaluate_model(p, d, vocab).score for d in devs]))

    key = _hash({"train": t, "tcfg": str(tcfg), "loss": cfg["loss"], "lam": lam, "student": cfg["student_model"],
                 "model": cfg["model"], "seed": cfg.seed, "gen": run.checksum("model.generic"),
                 "stores": store_sums})
    ckpt_dir = _stage_dir(run.out / name / "ckpt", key)
    res = train_epochs(init, lambda i: sources, tcfg, int(t["student_epochs"]),
                       derive_seed(cfg.seed, "student"), criterion=criterion,
                       patience=int(t["student_patience"]), ckpt_dir=ckpt_dir)
    path = run.out / name / "model.ckpt"
    save_checkpoint(res.params, path)
    run.record(f"model.{name}", path)
    run.stage_log(name, {"lambda": lam, "dev_bleu": [-c for c in res.criteria], "best_epoch": res.best + 1,
                         "steps": res.steps, "batch_log": res.batch_log, "generic_subset": len(subset)})
    run.save()
    return res.params


def run_baseline_finetune(run: Run) -> ModelParams:
    """Mixed finetuning baseline: the student recipe with ``lam = 0``."""
    return distill_student(run, lam=0.0, name="baseline")


def run_baseline_ensemble(run: Run, split: str = "test") -> dict[str, float]:
    """BLEU per domain of greedy decoding from the averaged teacher distributions."""
    vocab = run.vocab()
    teachers = [run.model(f"model.teacher.{t}") for t in run.cfg.domain_tags]
    return {tag: evaluate_model(teachers, run.corpus(tag, split, vocab), vocab).score
            for tag in run.cfg.domain_tags}


# ----------------------------------------------------------------------- evaluate


def evaluate(run: Run, split: str = "test") -> dict:
    """BLEU of every available model on every test set, plus the student-vs-baseline gain."""
    vocab = run.vocab()
    tags = run.cfg.domain_tags
    sets = {tag: run.corpus(tag, split, vocab) for tag in [GENERIC, *tags]}
    arts = run.manifest.get("artifacts", {})

    models: dict[str, ModelParams | list[ModelParams]] = {}
    for name in ("generic", "student", "baseline"):
        if f"model.{name}" in arts:
            models[name] = run.model(f"model.{name}")
    teacher_names = [t for t in tags if f"model.teacher.{t}" in arts]
    for tag in teacher_names:
        models[f"teacher.{tag}"] = run.model(f"model.teacher.{tag}")
    if len(teacher_names) == len(tags):
        models["ensemble"] = [models[f"teacher.{t}"] for t in tags]

    bleu: dict[str, dict] = {}
    for name, m in models.items():
        bleu[name] = {tag: evaluate_model(m, c, vocab).to_dict() for tag, c in sets.items()}
    report: dict = {"split": split, "bleu": bleu}
    if "student" in bleu and "baseline" in bleu:
        kd = {t: bleu["student"][t]["score"] for t in tags}
        ft = {t: bleu["baseline"][t]["score"] for t in tags}
        report["delta"] = {"per_domain": {t: kd[t] - ft[t] for t in tags}, "mean": compute_delta(kd, ft)}
    d = run.out / "reports"
    d.mkdir(parents=True, exist_ok=True)
    write_report(d / "bleu.json", report)
    run.record("report.bleu", d / "bleu.json")
    run.save()
    return report


def format_table(report: dict) -> str:
    """Plain-text BLEU table (models x test sets) followed by the gain line."""
    bleu = report["bleu"]
    sets = list(next(iter(bleu.values())))
    width = max(len(n) for n in bleu) + 2
    lines = ["model".ljust(width) + "".join(s.rjust(10) for s in sets)]
    for name, per in bleu.items():
        lines.append(name.ljust(width) + "".join(f"{per[s]['score']:10.2f}" for s in sets))
    if "delta" in report:
        per = ", ".join(f"{t}: {v:+.2f}" for t, v in report["delta"]["per_domain"].items())
        lines.append(f"delta (student - baseline): {report['delta']['mean']:+.2f}  ({per})")
    return "\n".join(lines)


def run_all(cfg: ExperimentConfig, out: str | Path, threads: int = 1) -> dict:
    """Every stage in order; returns the evaluation report."""
    run = preprocess(cfg, out)
    select(run)
    train_generic(run)
    finetune_teachers(run, threads)
    distill_targets(run)
    distill_student(run)
    run_baseline_finetune(run)
    return evaluate(run)

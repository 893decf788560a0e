"""Seeded generators for corpora, dictionaries and sign-controlled models.

Every sentence is a run of pseudo-words. Marker words are planted in an
exact number of sentences per file; the generated models score positive
iff their marker is present, so pass rates are set by construction rather
than by training. Extra support vectors come in canceling ``+a``/``-a``
pairs on the same vector: they cost scoring time but leave the sign of
every decision unchanged.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import GenerationError
from .model import FeatureVector, ModelBundle, SvmModel, load_model, save_model
from .textproc import StemDictionary, load_dictionary, save_dictionary, stem

CLAIM_MARKER = "therefore"
EVID_MARKER = "because"
LINK_MARKER = "hence"
MARKERS = (CLAIM_MARKER, EVID_MARKER, LINK_MARKER)

# Table 1 rows: sentences, claims, evidence
DATASETS = {
    "DS1": (9_783, 1_244, 2_739),
    "DS2": (67_917, 8_050, 16_267),
    "DS3": (233_254, 13_597, 76_173),
    "DS4": (466_483, 27_193, 152_345),
}
MEAN_FILE_SENTENCES = 466_483 / 50

# Table 2 support-vector counts
MODEL_SIZES = {"M1": 7_085, "M2": 18_604, "M3": 30_363}

_ONSETS = ("b", "c", "d", "f", "g", "l", "m", "n", "p", "r", "t", "v", "z", "br", "cl", "dr", "gr", "pl", "tr")
_VOWELS = ("a", "e", "i", "o", "u", "ai", "ou")
_CODAS = ("", "", "n", "r", "l", "m", "k", "x")


@dataclass(frozen=True)
class CorpusSpec:
    num_files: int = 4
    sentences_per_file: int = 100
    vocab_size: int = 500
    claim_rate: float = 1_244 / 9_783
    evid_rate: float = 2_739 / 9_783
    seed: int = 0
    link_rate: float = 0.5
    words_per_sentence: int = 28
    total_sentences: int | None = None

    def __post_init__(self):
        for r in (self.claim_rate, self.evid_rate, self.link_rate):
            if not 0.0 <= r <= 1.0:
                raise ValueError("rates must lie in [0, 1]")
        if min(self.num_files, self.sentences_per_file, self.vocab_size, self.words_per_sentence) < 1:
            raise ValueError("counts must be positive")
        if self.vocab_size <= len(MARKERS):
            raise ValueError(f"vocab_size must exceed {len(MARKERS)} marker words")
        if self.total_sentences is not None and self.total_sentences < self.num_files:
            raise ValueError("total_sentences must give every file at least one sentence")

    def file_sizes(self) -> list[int]:
        if self.total_sentences is None:
            return [self.sentences_per_file] * self.num_files
        q, r = divmod(self.total_sentences, self.num_files)
        return [q + (1 if i < r else 0) for i in range(self.num_files)]

    @classmethod
    def dataset(cls, name: str, scale: float = 0.1, seed: int = 0, **kw) -> "CorpusSpec":
        """Shape of a Table 1 dataset, sentence count multiplied by ``scale``."""
        sentences, claims, evid = DATASETS[name]
        total = max(1, round(sentences * scale))
        files = max(1, round(sentences / MEAN_FILE_SENTENCES))
        kw.setdefault("vocab_size", 2000)
        return cls(num_files=files, sentences_per_file=max(1, total // files), claim_rate=claims / sentences,
                   evid_rate=evid / sentences, seed=seed, total_sentences=total, **kw)


@dataclass(frozen=True)
class ModelSpec:
    num_support_vectors: int
    nnz_per_vector: int = 12
    seed: int = 0

    def __post_init__(self):
        if self.num_support_vectors < 1 or self.nnz_per_vector < 1:
            raise ValueError("num_support_vectors and nnz_per_vector must be positive")


@dataclass
class Corpus:
    spec: CorpusSpec
    files: dict[str, str]
    dictionary: StemDictionary
    planted: dict[str, dict[str, int]]

    @property
    def num_sentences(self) -> int:
        return sum(self.spec.file_sizes())


def _vocabulary(n: int, rng: np.random.Generator) -> list[str]:
    words: list[str] = []
    seen = set(MARKERS)
    while len(words) < n:
        syl = int(rng.integers(2, 4))
        w = "".join(_ONSETS[rng.integers(len(_ONSETS))] + _VOWELS[rng.integers(len(_VOWELS))]
                    + _CODAS[rng.integers(len(_CODAS))] for _ in range(syl))
        if w in seen or stem(w) != w:
            continue
        seen.add(w)
        words.append(w)
    return words


def generate_corpus(spec: CorpusSpec) -> Corpus:
    rng = np.random.default_rng(spec.seed)
    words = _vocabulary(spec.vocab_size - len(MARKERS), rng)
    dictionary = StemDictionary(words + list(MARKERS))
    files, planted = {}, {}
    width = len(str(spec.num_files))
    for fi, n in enumerate(spec.file_sizes()):
        name = f"doc{fi:0{width}d}"
        marks = {}
        counts = {}
        for marker, rate in ((CLAIM_MARKER, spec.claim_rate), (EVID_MARKER, spec.evid_rate),
                             (LINK_MARKER, spec.link_rate)):
            k = int(round(rate * n))
            marks[marker] = set(rng.choice(n, size=k, replace=False).tolist()) if k else set()
            counts[marker] = k
        sentences = []
        for si in range(n):
            length = max(1, int(rng.integers(spec.words_per_sentence - 4, spec.words_per_sentence + 5)))
            toks = [words[j] for j in rng.integers(len(words), size=length)]
            for marker in MARKERS:
                if si in marks[marker]:
                    toks.insert(int(rng.integers(len(toks) + 1)), marker)
            toks[0] = toks[0].capitalize()
            sentences.append(" ".join(toks) + ".")
        files[name] = " ".join(sentences) + "\n"
        planted[name] = counts
    return Corpus(spec, files, dictionary, planted)


def generate_model(spec: ModelSpec, dictionary: StemDictionary, marker_stems, *, pair: bool = False,
                   require: int | None = None, jitter: float = 0.004, name: str = "model") -> SvmModel:
    """Model whose decision is positive iff enough marker stems are present.

    One decisive vector holds the markers with weight 1 and the bias is
    ``0.5 - require``. For a pair model each marker counts once on the claim
    side and once on the (shifted) evidence side, and ``require`` defaults to
    both. An optional jitter vector adds a small per-word term bounded well
    below 0.5 for realistic inputs, so scores are spread out without
    flipping signs. The rest are canceling padding pairs.
    """
    vocab = dictionary.size
    dim = 2 * vocab if pair else vocab
    try:
        idx = sorted(dictionary[s] for s in marker_stems)
    except KeyError as exc:
        raise GenerationError(f"marker stem {exc.args[0]!r} not in dictionary") from None
    if not idx:
        raise GenerationError("need at least one marker stem")
    if pair:
        idx = idx + [i + vocab for i in idx]
        require = 2 if require is None else require
    else:
        require = 1 if require is None else require
    decisive = FeatureVector(idx, np.ones(len(idx)), dim)
    rng = np.random.default_rng(spec.seed)

    n = spec.num_support_vectors
    use_jitter = jitter > 0 and n >= 2
    rest = n - 1 - int(use_jitter)
    svs = []
    if rest % 2:
        svs += [(0.5, decisive), (0.5, decisive)]
        rest -= 1
    else:
        svs.append((1.0, decisive))
    if use_jitter:
        markers = set(idx)
        jidx = np.array([i for i in range(dim) if i not in markers], dtype=np.int64)
        jval = rng.uniform(-jitter, jitter, size=jidx.size)
        svs.append((1.0, FeatureVector(jidx, jval, dim)))
    nnz = min(spec.nnz_per_vector, dim)
    if rest and nnz < 1:
        raise GenerationError("cannot build padding vectors")
    for _ in range(rest // 2):
        pidx = np.sort(rng.choice(dim, size=nnz, replace=False))
        pval = rng.uniform(0.5, 1.5, size=nnz)
        v = FeatureVector(pidx, pval, dim)
        a = float(rng.uniform(0.1, 1.0))
        svs += [(a, v), (-a, v)]
    if len(svs) != n:
        raise GenerationError(f"built {len(svs)} support vectors, wanted {n}")
    return SvmModel.build(name, svs, 0.5 - require, dim)


def generate_bundle(dictionary: StemDictionary, claim_svs: int = 1, evid_svs: int = 1, link_svs: int = 1,
                    nnz_per_vector: int = 12, seed: int = 0, jitter: float = 0.004) -> ModelBundle:
    claim = generate_model(ModelSpec(claim_svs, nnz_per_vector, seed), dictionary, [CLAIM_MARKER],
                           jitter=jitter, name="claim")
    evid = generate_model(ModelSpec(evid_svs, nnz_per_vector, seed + 1), dictionary, [EVID_MARKER],
                          jitter=jitter, name="evidence")
    link = generate_model(ModelSpec(link_svs, nnz_per_vector, seed + 2), dictionary, [LINK_MARKER],
                          pair=True, jitter=jitter / 2, name="link")
    return ModelBundle(claim, evid, link, dictionary)


# ---------------------------------------------------------------- files


def write_corpus(corpus: Corpus, out_dir) -> Path:
    out = Path(out_dir)
    (out / "docs").mkdir(parents=True, exist_ok=True)
    for name, text in corpus.files.items():
        (out / "docs" / f"{name}.txt").write_text(text, encoding="utf-8")
    save_dictionary(corpus.dictionary, out / "dict.txt")
    manifest = {"spec": asdict(corpus.spec), "sentences": corpus.num_sentences,
                "files": len(corpus.files), "planted": corpus.planted,
                "markers": {"claim": CLAIM_MARKER, "evidence": EVID_MARKER, "link": LINK_MARKER}}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return out


def write_bundle(bundle: ModelBundle, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_model(bundle.claim, out / "claim.svm")
    save_model(bundle.evidence, out / "evidence.svm")
    save_model(bundle.link, out / "link.svm")
    if not (out / "dict.txt").exists():
        save_dictionary(bundle.dictionary, out / "dict.txt")
    return out


def read_docs(path) -> dict[str, str]:
    """All ``*.txt`` files under ``path`` (or ``path/docs``), keyed by file stem."""
    p = Path(path)
    if (p / "docs").is_dir():
        p = p / "docs"
    return {f.stem: f.read_text(encoding="utf-8") for f in sorted(p.glob("*.txt")) if f.name != "dict.txt"}


def read_bundle(models_dir, dict_path=None) -> ModelBundle:
    d = Path(models_dir)
    dictionary = load_dictionary(dict_path or d / "dict.txt")
    return ModelBundle(load_model(d / "claim.svm"), load_model(d / "evidence.svm"), load_model(d / "link.svm"),
                       dictionary)


def realized_rates(corpus: Corpus, bundle: ModelBundle) -> tuple[float, float]:
    """Claim and evidence pass fractions of the corpus under ``bundle`` (threshold 0)."""
    from .pipeline import PipelineConfig, run_batch
    from .engine import EngineConfig

    run = run_batch(corpus.files, bundle, PipelineConfig(), EngineConfig(1, 1))
    return run.claims / run.sentences, run.evidence / run.sentences

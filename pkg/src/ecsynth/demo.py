"""Bundled demo data: a small deterministic stand-in for the production inputs.

Three files ship with the package (regenerable with `python -m ecsynth.demo`):

  demo_corpus.jsonl    2000 clean conversation-style sentences (the corpus
                       the synthesis pipeline subsamples and corrupts)
  demo_domain.jsonl    800 chat-style utterances (trains the in-domain
                       scorer; deliberately different register)
  demo_original.jsonl  200 pre-existing EC pairs (the small "original"
                       dataset that mixing oversamples)

`materialize` copies them into a working directory together with a
ready-to-run pipeline config.
"""

from __future__ import annotations

import json
import shutil
from pathlib import Path

import numpy as np

from .grammar import MockInjector, SkipExample, roundtrip_filter
from .records import Document, ECExample, write_corpus, write_ec_dataset
from .typo import TypoConfig, corrupt_dataset
from .util import derive_seed

DATA_DIR = Path(__file__).parent / "data"
DEMO_SEED = 20240801

_SINGULAR_SUBJECTS = (
    "The teacher", "My brother", "The manager", "Our neighbor", "The student",
    "Her friend", "The engineer", "His sister", "The doctor", "The waiter",
    "The pilot", "My cousin", "The gardener", "The driver", "Their daughter",
)
_PLURAL_SUBJECTS = (
    "The dogs", "The students", "My parents", "The children", "Our friends",
    "The engineers", "The neighbors", "The musicians", "The tourists", "The cats",
)
_OBJECTS = (
    "a red book", "a small car", "the old map", "a quiet room", "the wooden table",
    "a new phone", "the broken clock", "a warm coat", "the silver key", "a long ladder",
    "the heavy box", "a clean towel", "the green folder", "a sharp pencil", "the spare ticket",
)
_PLACES = (
    "in the garden", "near the station", "at the office", "on the balcony",
    "at the market", "in the kitchen", "near the harbor", "at the library",
    "in the hallway", "by the window",
)
_ADJECTIVES = (
    "ready", "late", "busy", "tired", "happy", "careful", "patient",
    "curious", "quiet", "cheerful",
)
_PLURAL_OBJECTS = (
    "the tickets", "some apples", "the letters", "two umbrellas", "the plates",
    "some flowers", "the keys", "three chairs", "the photos", "some boxes",
)

_CHAT_OPENERS = (
    "hey", "hi", "ok", "yo", "hmm", "oh", "yeah", "btw", "so", "well",
)
_CHAT_BODIES = (
    "are you coming tonight", "can you send me the address", "see you at the cafe",
    "i am running late again", "did you get my message", "lets meet after work",
    "that movie was so good", "i will call you in a bit", "where are you right now",
    "thanks for the ride yesterday", "can we move it to friday", "my phone is about to die",
    "the train is packed today", "what time does it start", "im almost at the station",
    "do you want anything from the store", "send me the pic when you can",
    "that was such a long day", "i forgot my charger at home", "lets grab lunch tomorrow",
)


def _formal_sentence(rng: np.random.Generator) -> str:
    kind = rng.integers(4)
    if kind == 0:
        subj = _SINGULAR_SUBJECTS[rng.integers(len(_SINGULAR_SUBJECTS))]
        obj = _OBJECTS[rng.integers(len(_OBJECTS))]
        return f"{subj} has {obj}."
    if kind == 1:
        subj = _PLURAL_SUBJECTS[rng.integers(len(_PLURAL_SUBJECTS))]
        place = _PLACES[rng.integers(len(_PLACES))]
        return f"{subj} are {place}."
    if kind == 2:
        subj = _SINGULAR_SUBJECTS[rng.integers(len(_SINGULAR_SUBJECTS))]
        adj = _ADJECTIVES[rng.integers(len(_ADJECTIVES))]
        place = _PLACES[rng.integers(len(_PLACES))]
        return f"{subj} is {adj} {place}."
    subj = _PLURAL_SUBJECTS[rng.integers(len(_PLURAL_SUBJECTS))]
    obj = _PLURAL_OBJECTS[rng.integers(len(_PLURAL_OBJECTS))]
    place = _PLACES[rng.integers(len(_PLACES))]
    return f"{subj} have {obj} {place}."


def make_demo_corpus(n: int = 2000, seed: int = DEMO_SEED) -> list[Document]:
    rng = np.random.default_rng(derive_seed(seed, "corpus"))
    return [
        Document(id=f"doc-{i:05d}", text=_formal_sentence(rng), source_tag="demo")
        for i in range(n)
    ]


def make_domain_corpus(n: int = 800, seed: int = DEMO_SEED) -> list[Document]:
    rng = np.random.default_rng(derive_seed(seed, "domain"))
    docs = []
    for i in range(n):
        opener = _CHAT_OPENERS[rng.integers(len(_CHAT_OPENERS))]
        body = _CHAT_BODIES[rng.integers(len(_CHAT_BODIES))]
        docs.append(Document(id=f"chat-{i:05d}", text=f"{opener} {body}", source_tag="demo-chat"))
    return docs


def make_original_dataset(n: int = 200, seed: int = DEMO_SEED) -> list[ECExample]:
    """Small pre-existing EC dataset: rule-corrupted sentences plus typos."""
    rng = np.random.default_rng(derive_seed(seed, "original"))
    injector = MockInjector(failure_rate=0.0, seed=derive_seed(seed, "original-grammar"))
    pairs = []
    i = 0
    while len(pairs) < n:
        text = _formal_sentence(rng)
        try:
            resp = injector.inject(text, seed=derive_seed(seed, "original-inject", i))
        except SkipExample:
            i += 1
            continue
        pairs.append((Document(id=f"orig-{len(pairs):04d}", text=text, source_tag="demo"), resp))
        i += 1
    kept = roundtrip_filter(pairs).kept
    examples = [
        ECExample(
            id=ex.id, source=ex.source, target=ex.target,
            provenance="original", error_annotations=ex.error_annotations,
        )
        for ex in kept
    ]
    cfg = TypoConfig(seed=derive_seed(seed, "original-typos"))
    return corrupt_dataset(examples, cfg)


DEMO_CONFIG = {
    "seed": 1234,
    "paths": {
        "corpus": "demo_corpus.jsonl",
        "domain_corpus": "demo_domain.jsonl",
        "original_dataset": "demo_original.jsonl",
        "workdir": "artifacts",
    },
    "cluster": {"k": 50, "embed_dim": 64, "max_iters": 50, "tol": 1e-8},
    "sample": {"per_cluster": 10},
    "grammar": {"client": "mock", "failure_rate": 0.4, "concurrency": 1},
    "typo": {"p_transpose": 0.01, "p_omit": 0.015, "p_repeat": 0.01, "p_spatial": 0.02, "max_errors": 3},
    "scoring": {"order": 3, "delta": 0.1},
    "simbench": {"n_models": 8, "n_metrics": 2, "noise_sigma": 0.001, "top3_rescue": 0.15},
    "reweight": {"c_min": 0.01, "c_max": 2.0, "lambda": 0.01, "restarts": 8, "max_iters": 500, "grad_tol": 1e-8},
    "mix": {"ratio": [1, 4], "filter_threshold": 1.0},
    "eval": {"judge": "normalized"},
    "plan": {"strategy": "ContMixFil"},
}


def regenerate(data_dir: Path = DATA_DIR) -> None:
    """Rebuild the bundled data files (bit-identical for a fixed seed)."""
    data_dir.mkdir(parents=True, exist_ok=True)
    write_corpus(make_demo_corpus(), data_dir / "demo_corpus.jsonl")
    write_corpus(make_domain_corpus(), data_dir / "demo_domain.jsonl")
    write_ec_dataset(make_original_dataset(), data_dir / "demo_original.jsonl")


def materialize(outdir: str | Path) -> Path:
    """Copy the bundled demo data and a runnable config into outdir.

    Returns the path of the written config file.
    """
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    for name in ("demo_corpus.jsonl", "demo_domain.jsonl", "demo_original.jsonl"):
        src = DATA_DIR / name
        if not src.exists():
            raise FileNotFoundError(f"bundled data file missing: {src}; run python -m ecsynth.demo")
        shutil.copy(src, out / name)
    config = json.loads(json.dumps(DEMO_CONFIG))
    config_path = out / "config.json"
    with open(config_path, "w", encoding="utf-8") as f:
        json.dump(config, f, indent=2)
        f.write("\n")
    return config_path


if __name__ == "__main__":
    regenerate()
    print(f"demo data written to {DATA_DIR}")

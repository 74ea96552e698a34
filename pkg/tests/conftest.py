import numpy as np
import pytest

from protgo.ingest import ASPECTS, ProteinRecord

RESIDUES = "ACDEFGHIKLMNPQRSTVWY"


def random_corpus(n, seed=0, min_len=8, max_len=40, go_pool=12, alphabet=RESIDUES):
    """Synthetic ProteinRecords with random annotations over a small GO pool."""
    rng = np.random.default_rng(seed)
    pool = [(f"GO:{1000000 + i:07d}", ASPECTS[i % 3]) for i in range(go_pool)]
    records = []
    for i in range(n):
        length = int(rng.integers(min_len, max_len + 1))
        seq = "".join(rng.choice(list(alphabet), size=length))
        n_ann = int(rng.integers(1, 5))
        anns = frozenset(pool[j] for j in rng.choice(len(pool), size=n_ann, replace=False))
        records.append(ProteinRecord(f"P{i:04d}", seq, anns))
    return records


def write_corpus_tsv(records, path):
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            anns = ";".join(f"{go}|{a.value}" for go, a in sorted(r.annotations, key=lambda x: x[0]))
            fh.write(f"{r.accession}\t{r.sequence}\t{anns}\n")


@pytest.fixture
def tiny_records():
    return random_corpus(30, seed=7)

"""Three-aspect fusion: run the BP/MF/CC models on one sequence and union
their thresholded predictions into the final annotation set."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import sigmoid
from .ingest import ASPECTS, GoAspect, IngestError, LabelVocabulary, tokenize
from .model import ProteinEncoder, pad_batch


class FusionError(ValueError):
    pass


@dataclass
class Prediction:
    accession: str
    scores: dict  # GoAspect -> np.ndarray of probabilities, vocab order
    predicted_terms: list  # (go_id, GoAspect, score), score >= threshold


class FusionModel:
    def __init__(self, models: dict, vocabs: dict, threshold: float = 0.5):
        for aspect in ASPECTS:
            if aspect not in models:
                raise FusionError(f"missing model for aspect {aspect.value}")
            if aspect not in vocabs:
                raise FusionError(f"missing vocabulary for aspect {aspect.value}")
            model = models[aspect]
            vocab = vocabs[aspect]
            if model.config.num_labels != len(vocab):
                raise FusionError(
                    f"aspect {aspect.value}: model has {model.config.num_labels} labels "
                    f"but vocabulary has {len(vocab)} terms"
                )
        self.models = dict(models)
        self.vocabs = dict(vocabs)
        self.set_threshold(threshold)
        self._max_len = min(m.config.max_len for m in self.models.values())

    def set_threshold(self, t: float) -> None:
        if not 0.0 <= t <= 1.0:
            raise FusionError(f"threshold out of [0,1]: {t}")
        self.threshold = float(t)

    def predict(self, sequence: str, accession: str = "-") -> Prediction:
        tokens = tokenize(sequence, self._max_len)
        ids, mask = pad_batch([tokens])
        scores = {}
        terms = []
        for aspect in ASPECTS:
            logits = self.models[aspect].forward_classify(ids, mask).data[0]
            probs = sigmoid(logits)
            scores[aspect] = probs
            vocab = self.vocabs[aspect]
            for i, go_id in enumerate(vocab.terms):
                if probs[i] >= self.threshold:
                    terms.append((go_id, aspect, float(probs[i])))
        return Prediction(accession=accession, scores=scores, predicted_terms=terms)


def format_prediction(pred: Prediction) -> str:
    if not pred.predicted_terms:
        return f"{pred.accession}\t-\t-\t-\n"
    lines = []
    for go_id, aspect, score in pred.predicted_terms:
        lines.append(f"{pred.accession}\t{go_id}\t{aspect.value}\t{score:.6f}\n")
    return "".join(lines)


def predict_batch(input_path, fusion: FusionModel, output_path, diagnostics=None) -> int:
    """Stream a TSV input through the fusion model; per-record parse errors
    are reported (via the diagnostics callback) and skipped."""
    processed = 0
    with open(input_path, "r", encoding="utf-8") as infh, \
            open(output_path, "w", encoding="utf-8") as outfh:
        for line_no, line in enumerate(infh, start=1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            try:
                accession, sequence = _parse_prediction_line(line, line_no)
                pred = fusion.predict(sequence, accession)
            except (IngestError, FusionError) as exc:
                if diagnostics is not None:
                    diagnostics(f"line {line_no}: {exc}")
                continue
            outfh.write(format_prediction(pred))
            processed += 1
    return processed


def _parse_prediction_line(line: str, line_no: int):
    cols = line.split("\t")
    if len(cols) not in (2, 3):
        raise IngestError(f"expected 2 or 3 tab-separated columns, got {len(cols)}")
    accession, sequence = cols[0], cols[1].upper()
    if not accession:
        raise IngestError("empty accession")
    from .ingest import RESIDUE_ALPHABET

    if not sequence:
        raise IngestError("empty sequence")
    for ch in sequence:
        if ch not in RESIDUE_ALPHABET:
            raise IngestError(f"unknown residue '{ch}'")
    return accession, sequence

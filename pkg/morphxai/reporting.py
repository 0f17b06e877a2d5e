"""
MorphXAI reports.
Turns final-layer detections into a fixed-template sentence per parasite and
a JSON document per image (normalized boxes, image size, explanation values
with confidences). Optional plain-text sidecar next to each JSON file.
"""

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

from .errors import ContractError, ReportIOError
from .model import AttributeCall, Detection
from .schema import SPECIES, AttributeVocabulary, build_vocabulary

REPORT_VERSION = 1

SPECIES_DISPLAY = {
    "Leishmania": "Leishmania",
    "T_cruzi": "T. cruzi",
    "T_brucei": "T. brucei",
}

TEMPLATE = (
    "{species} (conf {confidence:.2f}): {shape_type} body, {curvature} curvature, "
    "{dot_count} visible dot(s), flagellum {flagellum}, {development_stage} stage."
)


@dataclass(frozen=True)
class ParasiteReport:
    detection: Detection
    text: str
    confidences: Dict[str, float]


def display_species(species: str) -> str:
    return SPECIES_DISPLAY.get(species, species)


def render_report(detection: Detection, vocab: Optional[AttributeVocabulary] = None) -> ParasiteReport:
    vocab = vocab or build_vocabulary()
    values = {}
    confidences = {}
    for name in vocab.names:
        call = detection.explanation.get(name)
        if call is None:
            raise ContractError(f"explanation lacks attribute '{name}'")
        vocab.encode(name, call.value)
        values[name] = call.value
        confidences[name] = float(call.confidence)
    text = TEMPLATE.format(
        species=display_species(detection.species),
        confidence=detection.confidence,
        shape_type=values["shape_type"],
        curvature=values["curvature"],
        dot_count=values["dot_count"],
        flagellum="present" if values["flagellum_present"] else "absent",
        development_stage=values["development_stage"],
    )
    return ParasiteReport(detection=detection, text=text, confidences=confidences)


def render_image_report(
    detections: Sequence[Detection],
    image_id: Union[int, str],
    image_size: Optional[Tuple[int, int]] = None,
    vocab: Optional[AttributeVocabulary] = None,
) -> dict:
    """JSON document for one image; detections by confidence, highest first."""
    ordered = sorted(detections, key=lambda d: -d.confidence)
    entries = []
    for det in ordered:
        report = render_report(det, vocab)
        entries.append({
            "box": [float(v) for v in det.box],
            "species": det.species,
            "confidence": float(det.confidence),
            "explanation": {
                name: {"value": call.value, "confidence": float(call.confidence)}
                for name, call in det.explanation.items()
            },
            "query": det.query,
            "text": report.text,
        })
    return {
        "version": REPORT_VERSION,
        "image_id": image_id,
        "image_size": list(image_size) if image_size is not None else None,
        "detections": entries,
    }


def detection_from_entry(entry: dict, vocab: Optional[AttributeVocabulary] = None) -> Detection:
    """Inverse of one report entry, validated against the vocabulary."""
    vocab = vocab or build_vocabulary()
    try:
        if entry["species"] not in SPECIES:
            raise ContractError(f"unknown species {entry['species']!r} in report entry")
        explanation = {}
        for name in vocab.names:
            item = entry["explanation"][name]
            vocab.encode(name, item["value"])
            explanation[name] = AttributeCall(item["value"], float(item["confidence"]))
        return Detection(
            box=tuple(float(v) for v in entry["box"]),
            species=entry["species"],
            confidence=float(entry["confidence"]),
            explanation=explanation,
            query=int(entry.get("query", -1)),
        )
    except (KeyError, TypeError) as exc:
        raise ContractError(f"malformed report entry: {exc}") from exc


def report_text(document: dict) -> str:
    return "".join(entry["text"] + "\n" for entry in document["detections"])


def write_image_report(document: dict, out_dir: Union[str, Path], text_sidecar: bool = True) -> Path:
    """Write <image_id>.json (and <image_id>.txt); returns the JSON path."""
    out = Path(out_dir)
    target = out / f"{document['image_id']}.json"
    try:
        out.mkdir(parents=True, exist_ok=True)
        target.write_text(json.dumps(document, indent=2) + "\n")
        if text_sidecar:
            target.with_suffix(".txt").write_text(report_text(document))
    except OSError as exc:
        raise ReportIOError(f"cannot write report to {target}: {exc}") from exc
    return target


def read_image_report(path: Union[str, Path]) -> dict:
    source = Path(path)
    try:
        return json.loads(source.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ReportIOError(f"cannot read report {source}: {exc}") from exc


def rerender(document: dict, vocab: Optional[AttributeVocabulary] = None) -> List[str]:
    return [render_report(detection_from_entry(entry, vocab), vocab).text for entry in document["detections"]]

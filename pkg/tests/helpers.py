"""Small builders shared by the test modules."""

from morphxai.model import AttributeCall, Detection
from morphxai.schema import AnnotatedInstance, MorphologyRecord


def make_record(**overrides) -> MorphologyRecord:
    values = {
        "shape_type": "elongated",
        "curvature": "C-shaped",
        "dot_count": 2,
        "flagellum_present": True,
        "development_stage": "mature",
    }
    values.update(overrides)
    return MorphologyRecord(**values)


def make_instance(box=(10.0, 10.0, 20.0, 20.0), species="T_brucei", **morph) -> AnnotatedInstance:
    return AnnotatedInstance(box=tuple(box), species=species, morphology=make_record(**morph))


def make_detection(box=(0.1, 0.1, 0.3, 0.3), species="T_brucei", confidence=0.9, attr_confidence=0.8, **morph) -> Detection:
    record = make_record(**morph)
    return Detection(
        box=tuple(box),
        species=species,
        confidence=confidence,
        explanation={name: AttributeCall(value, attr_confidence) for name, value in record.to_dict().items()},
    )

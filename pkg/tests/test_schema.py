"""Tests for the attribute vocabulary, record validation, and target construction."""

import json
import random

import pytest
import torch

from morphxai.errors import DatasetIOError, SchemaError, ValidationError
from morphxai.schema import (
    ATTRIBUTE_VALUES,
    AnnotatedInstance,
    AnnotationSet,
    ImageRecord,
    MorphologyRecord,
    build_vocabulary,
    decode_attribute,
    encode_attribute,
    gt_to_morphology_targets,
    read_annotation_file,
    saturate_dot_count,
    write_annotation_file,
)
from tests.helpers import make_instance, make_record


class TestVocabulary:
    def test_attribute_order_and_cardinalities(self, vocab):
        assert vocab.names == (
            "shape_type", "curvature", "dot_count", "flagellum_present", "development_stage"
        )
        assert vocab.cardinalities == {
            "shape_type": 6, "curvature": 4, "dot_count": 4, "flagellum_present": 2, "development_stage": 2,
        }

    def test_total_index_space(self, vocab):
        assert vocab.total_classes == 18

    def test_shape_values_ordered(self, vocab):
        assert vocab.spec("shape_type").values == (
            "oval", "elongated", "amoeboid", "fusiform", "crescent", "other"
        )

    def test_deterministic(self):
        assert build_vocabulary() == build_vocabulary()
        assert build_vocabulary().fingerprint() == build_vocabulary().fingerprint()


class TestEncodeDecode:
    @pytest.mark.parametrize("attribute,value,index", [
        ("shape_type", "elongated", 1),
        ("flagellum_present", False, 0),
        ("flagellum_present", True, 1),
        ("dot_count", "3+", 3),
        ("dot_count", 0, 0),
        ("curvature", "round", 3),
        ("development_stage", "immature", 0),
    ])
    def test_known_indices(self, vocab, attribute, value, index):
        assert encode_attribute(vocab, attribute, value) == index
        assert decode_attribute(vocab, attribute, index) == value

    def test_all_eighteen_pairs_round_trip(self, vocab):
        pairs = 0
        for name, values in ATTRIBUTE_VALUES:
            for k, value in enumerate(values):
                assert encode_attribute(vocab, name, value) == k
                decoded = decode_attribute(vocab, name, k)
                assert decoded == value and type(decoded) is type(value)
                pairs += 1
        assert pairs == 18

    def test_unknown_attribute_is_schema_error(self, vocab):
        with pytest.raises(SchemaError, match="colour"):
            encode_attribute(vocab, "colour", "red")

    def test_illegal_value_names_attribute_and_value(self, vocab):
        with pytest.raises(ValidationError) as exc:
            encode_attribute(vocab, "curvature", "zigzag")
        assert exc.value.attribute == "curvature"
        assert exc.value.value == "zigzag"
        assert "zigzag" in str(exc.value)

    def test_bool_is_not_a_dot_count(self, vocab):
        with pytest.raises(ValidationError):
            encode_attribute(vocab, "dot_count", True)

    def test_int_is_not_a_flagellum_flag(self, vocab):
        with pytest.raises(ValidationError):
            encode_attribute(vocab, "flagellum_present", 1)

    def test_near_miss_strings_rejected(self, vocab):
        with pytest.raises(ValidationError):
            encode_attribute(vocab, "shape_type", "Elongated")
        with pytest.raises(ValidationError):
            encode_attribute(vocab, "dot_count", "3")

    @pytest.mark.parametrize("index", [-1, 4, 2.0, True])
    def test_decode_rejects_bad_index(self, vocab, index):
        with pytest.raises(ValidationError):
            decode_attribute(vocab, "curvature", index)


class TestSaturation:
    @pytest.mark.parametrize("raw,value", [(0, 0), (1, 1), (2, 2), (3, "3+"), (5, "3+")])
    def test_saturate(self, raw, value):
        assert saturate_dot_count(raw) == value

    def test_negative_rejected(self):
        with pytest.raises(ValidationError):
            saturate_dot_count(-1)


class TestRecords:
    def test_from_dict_rejects_missing_field(self, vocab):
        data = make_record().to_dict()
        del data["curvature"]
        with pytest.raises(ValidationError, match="curvature"):
            MorphologyRecord.from_dict(data, vocab)

    def test_from_dict_validates_values(self, vocab):
        data = {**make_record().to_dict(), "development_stage": "adult"}
        with pytest.raises(ValidationError):
            MorphologyRecord.from_dict(data, vocab)

    def test_degenerate_box_rejected(self):
        with pytest.raises(ValidationError):
            make_instance(box=(5, 5, 5, 9)).validate()

    def test_box_outside_image_rejected(self):
        with pytest.raises(ValidationError):
            make_instance(box=(0, 0, 40, 10)).validate(32, 32)

    def test_unknown_species_rejected(self):
        with pytest.raises(ValidationError):
            make_instance(species="Plasmodium").validate(64, 64)


class TestTargets:
    def test_lengths_follow_instance_counts(self, vocab):
        batch = [[make_instance(), make_instance()], [make_instance()]]
        targets = gt_to_morphology_targets(vocab, batch)
        assert len(targets) == 3
        assert all(t.shape == (3,) for t in targets.indices.values())
        assert targets.offsets == ((0, 0), (0, 1), (1, 0))

    def test_empty_image(self, vocab):
        targets = gt_to_morphology_targets(vocab, [[]])
        assert all(t.numel() == 0 for t in targets.indices.values())
        assert len(targets.indices) == 5

    def test_reference_record_rows(self, vocab):
        targets = gt_to_morphology_targets(vocab, [[make_instance()]])
        rows = tuple(int(targets.indices[name][0]) for name in vocab.names)
        assert rows == (1, 1, 2, 1, 1)

    def test_invalid_record_reports_location(self, vocab):
        bad = AnnotatedInstance((0, 0, 5, 5), "T_cruzi", MorphologyRecord("oval", "round", 7, False, "mature"))
        with pytest.raises(ValidationError) as exc:
            gt_to_morphology_targets(vocab, [[make_instance()], [make_instance(), bad]])
        assert (exc.value.image_index, exc.value.instance_index, exc.value.attribute) == (1, 1, "dot_count")

    def test_length_and_range_laws_random_batches(self, vocab):
        rng = random.Random(3)
        for _ in range(200):
            batch = []
            for _ in range(rng.randint(0, 4)):
                image = []
                for _ in range(rng.randint(0, 5)):
                    values = {name: rng.choice(values) for name, values in ATTRIBUTE_VALUES}
                    image.append(AnnotatedInstance((0, 0, 1, 1), "Leishmania", MorphologyRecord(**values)))
                batch.append(image)
            targets = gt_to_morphology_targets(vocab, batch)
            total = sum(len(image) for image in batch)
            for name, tensor in targets.indices.items():
                assert tensor.shape == (total,)
                assert tensor.dtype == torch.long
                if total:
                    assert 0 <= int(tensor.min()) and int(tensor.max()) < vocab.cardinality(name)

    def test_image_permutation_permutes_blocks(self, vocab):
        a = [make_instance(shape_type="oval"), make_instance(shape_type="crescent")]
        b = [make_instance(shape_type="fusiform")]
        forward = gt_to_morphology_targets(vocab, [a, b]).indices["shape_type"].tolist()
        swapped = gt_to_morphology_targets(vocab, [b, a]).indices["shape_type"].tolist()
        assert swapped == forward[2:] + forward[:2]

    def test_for_image(self, vocab):
        targets = gt_to_morphology_targets(vocab, [[make_instance()], [make_instance(dot_count="3+")] * 2])
        assert targets.for_image(1)["dot_count"].tolist() == [3, 3]


class TestAnnotationFile:
    def _annotations(self):
        images = [ImageRecord(0, "images/a.png", 64, 48), ImageRecord(1, "images/b.png", 64, 48)]
        instances = {0: [make_instance(box=(4, 5, 20, 30), dot_count="3+", flagellum_present=False)], 1: []}
        return AnnotationSet(images, instances)

    def test_field_names_and_bbox_format(self, tmp_path, vocab):
        path = write_annotation_file(tmp_path / "annotations.json", self._annotations(), vocab)
        data = json.loads(path.read_text())
        assert {"images", "annotations"} <= set(data)
        ann = data["annotations"][0]
        assert ann["bbox"] == [4.0, 5.0, 16.0, 25.0]
        assert ann["morphology"]["flagellum_present"] is False
        assert ann["morphology"]["dot_count"] == "3+"
        assert data["images"][0] == {"id": 0, "file_name": "images/a.png", "width": 64, "height": 48}

    def test_read_back(self, tmp_path, vocab):
        path = write_annotation_file(tmp_path / "annotations.json", self._annotations(), vocab)
        loaded = read_annotation_file(path, vocab)
        assert loaded.instances_for(0)[0].box == (4.0, 5.0, 20.0, 30.0)
        assert loaded.instances_for(1) == []

    def test_incomplete_record_in_file_rejected(self, tmp_path, vocab):
        path = write_annotation_file(tmp_path / "annotations.json", self._annotations(), vocab)
        data = json.loads(path.read_text())
        del data["annotations"][0]["morphology"]["development_stage"]
        path.write_text(json.dumps(data))
        with pytest.raises(ValidationError) as exc:
            read_annotation_file(path, vocab)
        assert exc.value.image_index == 0

    def test_missing_file_is_io_error(self, tmp_path, vocab):
        with pytest.raises(DatasetIOError, match="missing.json"):
            read_annotation_file(tmp_path / "missing.json", vocab)

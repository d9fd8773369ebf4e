import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from synth import make_dataset
from wholebody.anno import (BODY, FACE, FOOT, LAYOUT, LEFT_HAND, RIGHT_HAND, Box, Dataset, ImageInfo,
                            ParseError, SchemaError, ValidationError, make_instance, minimal_rect,
                            parse_dataset, validate_dataset, write_dataset)


def flat(n, value=0.0, v=0):
    return [value, value, v] * n


def minimal_ann(**over):
    ann = {"id": 1, "image_id": 7, "bbox": [10, 20, 100, 200], "area": 20000.0,
           "keypoints": [15, 25, 2] * 17, "foot_kpts": [30, 200, 2] * 6,
           "face_kpts": [40, 30, 2] * 68, "face_box": [40, 30, 0, 0], "face_valid": True,
           "lefthand_kpts": [12, 80, 1] * 21, "lefthand_box": [12, 80, 0, 0], "lefthand_valid": True,
           "righthand_kpts": [90, 80, 2] * 21, "righthand_box": [90, 80, 0, 0], "righthand_valid": True,
           "foot_valid": True, "iscrowd": 0, "category_id": 1}
    ann.update(over)
    return ann


def doc(*anns, images=None):
    images = images if images is not None else [{"id": 7, "width": 640, "height": 480, "file_name": "a.jpg"}]
    return json.dumps({"images": images, "annotations": list(anns), "categories": [{"id": 1}]}).encode()


def test_layout_slices_cover_range():
    starts = [s for _, s, _ in LAYOUT.slices]
    stops = [e for _, _, e in LAYOUT.slices]
    assert starts[0] == 0 and stops[-1] == 133 and starts[1:] == stops[:-1]
    assert [e - s for _, s, e in LAYOUT.slices] == [17, 6, 68, 21, 21]
    assert LAYOUT.part_of(90) == "face" and LAYOUT.part_of(91) == "left_hand"


def test_parse_single_person():
    d = parse_dataset(doc(minimal_ann()))
    assert len(d.instances) == 1
    inst = d.instances[0]
    assert inst.keypoints.shape == (133, 3)
    assert np.all(inst.keypoints[:, 2] > 0)
    assert inst.lhand_box.valid and inst.face_box.valid


def test_invalid_face_zeroes_its_keypoints():
    inst = parse_dataset(doc(minimal_ann(face_valid=False))).instances[0]
    assert np.all(inst.keypoints[FACE] == 0)
    assert np.all(inst.keypoints[LEFT_HAND, 2] > 0)


def test_valid_part_without_labels_becomes_invalid():
    inst = parse_dataset(doc(minimal_ann(righthand_kpts=flat(21)))).instances[0]
    assert not inst.rhand_box.valid


def test_fused_and_separate_foot_forms_agree():
    sep = parse_dataset(doc(minimal_ann()))
    fused_ann = minimal_ann(keypoints=[15, 25, 2] * 17 + [30, 200, 2] * 6)
    del fused_ann["foot_kpts"]
    fused = parse_dataset(doc(fused_ann))
    assert sep.instances[0] == fused.instances[0]


def test_malformed_json_reports_byte_offset():
    data = b'{"annotations": [1, ]}'
    with pytest.raises(ParseError) as info:
        parse_dataset(data)
    assert info.value.offset == data.index(b"]")
    assert "byte offset" in str(info.value)


def test_offset_counts_bytes_not_characters():
    data = '{"file": "éé", "x": }'.encode()
    with pytest.raises(ParseError) as info:
        parse_dataset(data)
    assert info.value.offset == data.index(b"}")


def test_wrong_keypoint_length_names_instance():
    with pytest.raises(SchemaError) as info:
        parse_dataset(doc(minimal_ann(id=42, face_kpts=[1, 2, 2] * 10)))
    assert info.value.instance_id == 42
    assert "42" in str(info.value)


@pytest.mark.parametrize("bad", [
    b"", b"[", b"null", b"3", b'{"annotations": {}}', b'{"annotations": [{"id": 1}]}',
    b'{"annotations": [{"id": 1, "image_id": 1, "bbox": [0, 0]}]}',
    b'{"annotations": [{"id": 1, "image_id": 1, "bbox": [0, 0, 1, 1], "keypoints": ["a"]}]}',
    b'{"images": [{"width": 3}]}', b"\xff\xfe",
])
def test_malformed_inputs_raise_typed_errors(bad):
    with pytest.raises((ParseError, SchemaError)):
        parse_dataset(bad)


def test_unknown_keys_are_preserved():
    d = parse_dataset(doc(minimal_ann(custom_tag="keep-me")))
    assert d.instances[0].extra == {"custom_tag": "keep-me"}
    again = parse_dataset(write_dataset(d))
    assert again.instances[0].extra == {"custom_tag": "keep-me"}


def test_duplicate_ids_rejected():
    with pytest.raises(SchemaError):
        parse_dataset(doc(minimal_ann(), minimal_ann()))


def test_instances_ordered_by_image_then_id():
    images = [{"id": 1, "width": 640, "height": 480}, {"id": 2, "width": 640, "height": 480}]
    d = parse_dataset(doc(minimal_ann(id=5, image_id=2), minimal_ann(id=9, image_id=1),
                          minimal_ann(id=3, image_id=2), images=images))
    assert [(i.image_id, i.id) for i in d.instances] == [(1, 9), (2, 3), (2, 5)]


def test_writer_matches_reference_serializer():
    images = [{"id": 1, "width": 640, "height": 480, "file_name": "x.jpg"},
              {"id": 2, "width": 640, "height": 480, "file_name": "y.jpg"}]
    anns = [minimal_ann(id=3, image_id=2), minimal_ann(id=1, image_id=1), minimal_ann(id=2, image_id=2)]
    out = json.loads(write_dataset(parse_dataset(doc(*anns, images=images))))
    assert [a["id"] for a in out["annotations"]] == [1, 2, 3]
    a = out["annotations"][0]
    # reference: separate foot key, two-decimal numbers, boxes from the input
    assert len(a["keypoints"]) == 51 and len(a["foot_kpts"]) == 18
    assert a["face_box"] == [40, 30, 0, 0] and a["face_valid"] is True and a["bbox"] == [10, 20, 100, 200]


def test_empty_dataset_round_trip():
    out = write_dataset(Dataset())
    assert json.loads(out)["annotations"] == []
    assert parse_dataset(out) == Dataset()


def test_fixture_round_trip_is_fixed_point():
    d = make_dataset(n_images=4, seed=11)
    once = write_dataset(d)
    d2 = parse_dataset(once)
    assert len(d2.instances) == len(d.instances)
    assert all(np.array_equal(a.keypoints, b.keypoints) for a, b in zip(d.instances, d2.instances))
    assert write_dataset(d2) == once
    assert parse_dataset(write_dataset(d2)).instances == d2.instances


def test_write_rejects_invariant_violation():
    inst = make_instance(1, 7, np.zeros((133, 3)) + [5, 5, 2], person_box=Box(0, 0, 10, 10))
    bad = Dataset(images=(ImageInfo(7, 4, 4),), instances=(inst,))
    with pytest.raises(ValidationError) as info:
        write_dataset(bad)
    assert info.value.problems[0][0] == 1
    zero_area = Dataset(images=(ImageInfo(7, 40, 40),),
                        instances=(make_instance(2, 7, np.zeros((133, 3)) + [5, 5, 2],
                                                 person_box=Box(0, 0, 10, 10), area=0.0),))
    assert validate_dataset(zero_area)
    with pytest.raises(ValidationError):
        write_dataset(zero_area, ground_truth=True)


def test_coordinates_written_with_two_decimals():
    kps = np.zeros((133, 3))
    kps[0] = [1.23456, 2.98765, 2]
    inst = make_instance(1, 7, kps, person_box=Box(0.123, 0.456, 10.789, 10.0))
    out = json.loads(write_dataset(Dataset(images=(ImageInfo(7, 40, 40),), instances=(inst,))))
    a = out["annotations"][0]
    assert a["keypoints"][:3] == [1.23, 2.99, 2]
    assert a["bbox"] == [0.12, 0.46, 10.79, 10]


def test_minimal_rect_examples():
    kps = np.zeros((21, 3))
    kps[0] = [1, 1, 2]
    kps[1] = [3, 5, 1]
    assert minimal_rect(kps) == Box(1, 1, 2, 4)
    one = np.zeros((21, 3))
    one[4] = [4, 4, 2]
    assert minimal_rect(one) == Box(4, 4, 0, 0)
    assert not minimal_rect(np.zeros((21, 3))).valid


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3), st.sampled_from([0, 1, 2])),
                min_size=21, max_size=21))
def test_minimal_rect_matches_min_max_scan(rows):
    kps = np.array(rows, dtype=float)
    box = minimal_rect(kps)
    labeled = [(x, y) for x, y, v in rows if v > 0]
    if not labeled:
        assert not box.valid
        return
    xs, ys = zip(*labeled)
    assert box.valid
    assert (box.x, box.y) == (min(xs), min(ys))
    assert box.x + box.w == pytest.approx(max(xs)) and box.y + box.h == pytest.approx(max(ys))


def test_fixture_boxes_match_minimal_rect_and_validity():
    d = make_dataset(n_images=5, seed=2, invalid_parts=0.3)
    for inst in d.instances:
        for attr, sl in (("face_box", FACE), ("lhand_box", LEFT_HAND), ("rhand_box", RIGHT_HAND)):
            box = getattr(inst, attr)
            assert box.valid == bool(np.any(inst.keypoints[sl, 2] > 0))
            if box.valid:
                ref = minimal_rect(inst.keypoints[sl])
                assert np.allclose(box.xyxy, ref.xyxy, atol=1.0)


coord = st.floats(0, 600, allow_nan=False).map(lambda v: round(v, 2))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(coord, coord, st.sampled_from([0, 1, 2])), min_size=133, max_size=133),
       st.booleans(), st.booleans())
def test_write_parse_fixed_point_property(rows, face_ok, foot_ok):
    kps = np.array(rows, dtype=float)
    kps[0] = [10, 10, 2]
    if not face_ok:
        kps[FACE] = 0
    if not foot_ok:
        kps[FOOT] = 0
    inst = make_instance(1, 7, kps, person_box=Box(1, 2, 300, 400))
    d = Dataset(images=(ImageInfo(7, 640, 640),), instances=(inst,))
    for form in ("separate", "fused"):
        data = write_dataset(d, foot_form=form)
        back = parse_dataset(data)
        got = back.instances[0]
        assert np.array_equal(got.keypoints, inst.keypoints)
        for attr in ("person_box", "face_box", "lhand_box", "rhand_box"):
            a, b = getattr(got, attr), getattr(inst, attr)
            assert a.valid == b.valid
            assert np.allclose(a.xyxy, b.xyxy, atol=0.005 + 1e-9)
        # derived boxes are rounded on the first write; afterwards bytes are stable
        assert write_dataset(back, foot_form=form) == data


def test_box_iou():
    a = Box(0, 0, 1, 1)
    assert a.iou(a) == 1.0
    assert a.iou(Box(0.5, 0, 1, 1)) == pytest.approx(1 / 3)
    assert a.iou(Box(2, 2, 1, 1)) == 0.0


def test_instances_are_immutable():
    inst = make_dataset(n_images=1, seed=0).instances[0]
    with pytest.raises(ValueError):
        inst.keypoints[0, 0] = 1.0

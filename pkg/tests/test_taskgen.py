import numpy as np
import pytest

from helpers import small_task
from sparsemerge.errors import FormatError, InputError
from sparsemerge.taskgen import (
    MARKER_BASE,
    TaskSpec,
    build_suite,
    generate_task,
    label_logits,
    load_dataset,
    pretraining_suite,
    save_dataset,
)


def rows(split):
    return {r.tobytes() for r in split.x}


@pytest.mark.parametrize("family", ["teacher", "majority"])
def test_generation_contract(family):
    ds = small_task(0, family, n_train=200, n_val=40, n_test=60)
    assert (len(ds.train), len(ds.val), len(ds.test)) == (200, 40, 60)
    assert not rows(ds.train) & rows(ds.val)
    assert not rows(ds.train) & rows(ds.test)
    assert not rows(ds.val) & rows(ds.test)
    assert np.all(ds.train.x[:, 0] == ds.spec.marker)
    counts = np.bincount(np.concatenate([ds.train.y, ds.val.y, ds.test.y]), minlength=4)
    assert counts.max() - counts.min() <= 1


def test_majority_labels_follow_rule():
    ds = small_task(0, "majority")
    np.testing.assert_array_equal(label_logits(ds.spec, ds.train.x[:, 1:]).argmax(axis=1), ds.train.y)


def test_generation_is_deterministic():
    a, b = small_task(2), small_task(2)
    assert np.array_equal(a.train.x, b.train.x) and np.array_equal(a.test.y, b.test.y)
    c = small_task(2, seed=77)
    assert not np.array_equal(a.train.x, c.train.x)


def test_spec_validation():
    for bad in (dict(family="parity"), dict(n_train=0), dict(num_classes=1), dict(margin_quantile=1.0)):
        with pytest.raises(InputError):
            generate_task(TaskSpec("x", **bad))


def test_suite_markers_and_gate():
    calls = []

    def gate(ds):
        calls.append(ds.task_id)
        return ds.spec.seed % 2 == 0

    held_in, held_out = build_suite(3, 2, seed=5, gate=gate, max_attempts=4, n_train=32, n_val=8, n_test=8)
    markers = [t.spec.marker for t in held_in + held_out]
    assert markers == [MARKER_BASE + i for i in range(5)]
    assert [t.task_id for t in held_in] == ["in00", "in01", "in02"]
    assert all(1 <= t.meta["attempts"] <= 4 for t in held_in)
    assert len(calls) == sum(t.meta["attempts"] for t in held_in)
    pre = pretraining_suite(held_in, 3, len(held_out), seed=5, n_train=32, n_val=8, n_test=8)
    assert [t.spec.marker for t in pre] == [MARKER_BASE + 5 + i for i in range(3)]
    with pytest.raises(InputError):
        pretraining_suite(held_in, 30, 2)
    with pytest.raises(InputError):
        build_suite(30, 3)


def test_save_load_roundtrip(tmp_path):
    ds = small_task(1, "majority")
    path = tmp_path / "t.txt"
    save_dataset(ds, path)
    back = load_dataset(path)
    assert back.task_id == ds.task_id and back.spec.marker == ds.spec.marker
    for a, b in ((ds.train, back.train), (ds.val, back.val), (ds.test, back.test)):
        assert np.array_equal(a.x, b.x) and np.array_equal(a.y, b.y)


def test_load_rejects_bad_files(tmp_path):
    p = tmp_path / "bad.txt"
    p.write_text("1 2 3\n")
    with pytest.raises(FormatError):
        load_dataset(p)
    p.write_text("# task=x family=teacher train=2 val=1 test=1 seed=0 classes=4 marker=32\n1 2 0\n")
    with pytest.raises(FormatError):
        load_dataset(p)


def test_unreachable_teacher_class_is_redrawn():
    # the first head drawn for this spec never predicts class 1
    spec = TaskSpec(
        "pre08", marker=52, seed=135717969, family_seed=498309525, margin_quantile=0.5, n_train=1024, n_val=128, n_test=256
    )
    ds = generate_task(spec)
    counts = np.bincount(ds.train.y, minlength=4)
    assert counts.min() > 200

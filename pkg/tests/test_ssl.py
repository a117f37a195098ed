import numpy as np
import pytest

from dpke.errors import InvalidArgumentError
from dpke.eval import Detection
from dpke.geometry import Aabb, AugRecord
from dpke.ssl import (IGNORED, NEGATIVE, Assignment, LossWeights, assign_targets,
                      feature_matching_loss, filter_pseudo_labels, huber, huber_grad,
                      supervised_loss, total_loss)
from tests.helpers import make_proposals

GT = np.array([[1.0, 1.0, 0.5, 1.0, 1.0, 1.0], [4.0, 4.0, 0.5, 1.0, 1.0, 1.0]])


def test_assignment_bands():
    centers = np.array([[1.0, 1.0, 0.5], [2.0, 1.0, 0.5], [1.45, 1.0, 0.5], [4.1, 4.0, 0.5]])
    a = assign_targets(centers, GT, np.array([2, 0]))
    assert a.gt_index.tolist() == [0, NEGATIVE, IGNORED, 1]
    assert a.gt_class.tolist() == [2, -1, -1, 0]
    empty = assign_targets(centers, np.zeros((0, 6)), np.zeros(0, dtype=int))
    assert np.all(empty.negative)


def test_assignment_tie_goes_to_lowest_gt_index():
    gts = np.array([[0.0, 0, 0, 1, 1, 1], [0.4, 0, 0, 1, 1, 1]])
    a = assign_targets([[0.2, 0.0, 0.0]], gts, np.array([0, 1]))
    assert a.gt_index.tolist() == [0]


def test_objectness_half_gives_log_two():
    props = make_proposals([[1.0, 1.0, 0.5], [7.0, 7.0, 0.5]], np.ones((2, 3)))
    a = assign_targets(props.center, GT, np.array([0, 1]))
    terms, _ = supervised_loss(props, a, GT)
    assert terms["objectness"] == pytest.approx(np.log(2.0))
    assert terms["center"] == 0.0 and terms["size"] == 0.0


def test_center_huber_hand_value():
    props = make_proposals([[3.0, 1.0, 0.5]], np.ones((1, 3)))
    a = Assignment(np.array([0]), np.array([0]))
    terms, grads = supervised_loss(props, a, GT[:1])
    assert terms["center"] == pytest.approx(0.5)
    assert grads.center[0].tolist() == pytest.approx([1 / 3, 0.0, 0.0])
    assert terms["vote"] == 0.0


def test_empty_sets_give_zero_terms():
    props = make_proposals([[1.5, 1.0, 0.5]], np.ones((1, 3)))
    a = assign_targets(props.center, GT, np.array([0, 1]))
    assert a.ignored.all()
    terms, grads = supervised_loss(props, a, GT)
    assert all(terms[name] == 0.0 for name in ("objectness", "cls", "center", "size", "iou_head"))
    assert not np.any(grads.obj_logit)


def test_iou_head_can_be_left_out():
    props = make_proposals([[1.0, 1.0, 0.5]], [[0.5, 1.0, 1.0]], iou_est=[0.9])
    a = Assignment(np.array([0]), np.array([0]))
    with_iou, grads = supervised_loss(props, a, GT[:1])
    assert with_iou["iou_head"] == pytest.approx(0.5 * 0.4 ** 2)
    assert grads.iou_logit[0] != 0
    without, grads = supervised_loss(props, a, GT[:1], include_iou=False)
    assert without["iou_head"] == 0.0 and grads.iou_logit[0] == 0


def _det(score, class_prob, iou_est):
    return Detection(0, Aabb([1, 1, 1], [1, 1, 1]), score, 0, class_prob, iou_est)


def test_strict_pseudo_label_filter():
    kept = filter_pseudo_labels([_det(0.95, 0.95, 0.5), _det(0.85, 0.99, 0.99),
                                 _det(0.95, 0.5, 0.99), _det(0.99, 0.99, 0.1)])
    assert len(kept) == 1 and kept[0].objectness == 0.95
    assert filter_pseudo_labels([]) == []


def _pair(dim=4, diff=2.0, teacher_obj=0.9, student_obj=0.1):
    centers = [[2.0, 2.0, 0.5]]
    teacher = make_proposals(centers, np.ones((1, 3)), objectness=[teacher_obj],
                             feature_z=np.zeros((1, dim)))
    student = make_proposals(centers, np.ones((1, 3)), objectness=[student_obj],
                             feature_z=np.full((1, dim), diff))
    return student, teacher


def _cloud():
    grid = np.stack(np.meshgrid(*[np.linspace(1.6, 2.4, 5)] * 2, [0.2, 0.5, 0.8]), -1)
    return grid.reshape(-1, 3)


def test_feature_matching_hand_value():
    student, teacher = _pair()
    result = feature_matching_loss(student, teacher, _cloud(), AugRecord(), tau_obj=0.6)
    assert result.n_gated == 1
    assert result.weights[0] == 1.0
    assert result.loss == pytest.approx(1.5)
    assert np.allclose(result.grad_z, 1.0 / 4)


def test_feature_matching_zero_cases():
    student, teacher = _pair(diff=0.0)
    assert feature_matching_loss(student, teacher, _cloud(), AugRecord()).loss == 0.0
    student, teacher = _pair(teacher_obj=0.3)
    result = feature_matching_loss(student, teacher, _cloud(), AugRecord(), tau_obj=0.6)
    assert result.loss == 0.0 and result.n_gated == 0 and not np.any(result.grad_z)


def test_gate_source_switch():
    student, teacher = _pair(teacher_obj=0.3, student_obj=0.9)
    assert feature_matching_loss(student, teacher, _cloud(), AugRecord()).n_gated == 0
    assert feature_matching_loss(student, teacher, _cloud(), AugRecord(),
                                 gate_source="student").n_gated == 1


def test_geometry_modes():
    student, teacher = _pair()
    cloud = _cloud()
    assert feature_matching_loss(student, teacher, cloud, AugRecord(),
                                 geometry_mode="HCD").loss == 0.0
    # far-apart boxes: LCD weight shrinks, the constant weight does not
    student.center[0] = [2.3, 2.0, 0.5]
    lcd = feature_matching_loss(student, teacher, cloud, AugRecord())
    const = feature_matching_loss(student, teacher, cloud, AugRecord(), geometry_mode="constant")
    hcd = feature_matching_loss(student, teacher, cloud, AugRecord(), geometry_mode="HCD")
    assert const.loss == pytest.approx(1.5)
    assert 0 < lcd.weights[0] < 1
    assert hcd.weights[0] == pytest.approx(1 - lcd.weights[0])
    with pytest.raises(InvalidArgumentError):
        feature_matching_loss(student, teacher, cloud, AugRecord(), geometry_mode="XCD")


def test_student_box_is_mapped_back_through_augmentation():
    student, teacher = _pair()
    aug = AugRecord(flip_x=True, scale=1.1)
    student.center[0] = [-2.2, 2.2, 0.55]
    student.size[0] = [1.1, 1.1, 1.1]
    result = feature_matching_loss(student, teacher, _cloud(), aug)
    assert result.weights[0] == 1.0


def test_low_objectness_slots_do_not_matter():
    rng = np.random.default_rng(0)
    centers = rng.uniform(1.6, 2.4, size=(3, 3))
    teacher = make_proposals(centers, np.ones((3, 3)), objectness=[0.9, 0.2, 0.8],
                             feature_z=rng.normal(size=(3, 4)))
    student = make_proposals(centers, np.ones((3, 3)), feature_z=rng.normal(size=(3, 4)))
    base = feature_matching_loss(student, teacher, _cloud(), AugRecord()).loss
    teacher.feature_z[1] += 100.0
    teacher.center[1] += 1.0
    assert feature_matching_loss(student, teacher, _cloud(), AugRecord()).loss == base


def test_feature_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    centers = rng.uniform(1.8, 2.2, size=(3, 3))
    teacher = make_proposals(centers, np.ones((3, 3)), objectness=[0.9, 0.7, 0.1],
                             feature_z=rng.normal(size=(3, 5)))
    student = make_proposals(centers + 0.05, np.ones((3, 3)),
                             feature_z=rng.normal(scale=2.0, size=(3, 5)))
    result = feature_matching_loss(student, teacher, _cloud(), AugRecord())
    eps = 1e-6
    for i in range(3):
        for j in range(5):
            z = student.feature_z[i, j]
            student.feature_z[i, j] = z + eps
            up = feature_matching_loss(student, teacher, _cloud(), AugRecord()).loss
            student.feature_z[i, j] = z - eps
            down = feature_matching_loss(student, teacher, _cloud(), AugRecord()).loss
            student.feature_z[i, j] = z
            assert result.grad_z[i, j] == pytest.approx((up - down) / (2 * eps), abs=1e-6)


def test_misaligned_proposals_are_rejected():
    student, teacher = _pair()
    two = make_proposals(np.zeros((2, 3)), np.ones((2, 3)))
    with pytest.raises(InvalidArgumentError):
        feature_matching_loss(two, teacher, _cloud(), AugRecord())


def test_huber_is_smooth_at_delta():
    for delta in (0.5, 1.0):
        lo, hi = np.array([delta - 1e-9]), np.array([delta + 1e-9])
        assert huber(lo, delta)[0] == pytest.approx(huber(hi, delta)[0], abs=1e-8)
        assert huber_grad(lo, delta)[0] == pytest.approx(huber_grad(hi, delta)[0], abs=1e-8)


def test_total_loss_combination():
    terms = {"objectness": 0.5, "cls": 1.0, "center": 0.0, "size": 0.0, "vote": 0.25,
             "iou_head": 0.25}
    out = total_loss(terms, pseudo=2.0, feature=3.0, lambda_u=0.5, lambda_f=2.0)
    assert out.total == pytest.approx(2.0 + 1.0 + 6.0)
    assert total_loss(terms, 2.0, 3.0, lambda_f=0.0).total == pytest.approx(2.0 + 2.0)
    assert total_loss({}, 0.0, 0.0).total == 0.0
    weighted = total_loss(terms, 0.0, 0.0, weights=LossWeights(cls=2.0))
    assert weighted.total == pytest.approx(3.0)

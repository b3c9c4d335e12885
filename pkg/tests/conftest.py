import numpy as np
import pytest

from lingtrack.evaluation import PredictionRecord
from lingtrack.geometry import BoundingBox


def make_records(scores, labels, sequence_id="seq", sentence="", model_id="m"):
    return [
        PredictionRecord(sequence_id, i + 1, float(s), int(l), sentence, model_id)
        for i, (s, l) in enumerate(zip(scores, labels))
    ]


def random_box(rng, max_coord=40, max_side=20) -> BoundingBox:
    return BoundingBox(
        left=int(rng.integers(0, max_coord)),
        top=int(rng.integers(0, max_coord)),
        width=int(rng.integers(1, max_side)),
        height=int(rng.integers(1, max_side)),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def finite_difference_grad_error(model, loss_fn, eps=1e-3):
    """Max relative error between autograd and central differences.

    ``loss_fn`` must be a zero-argument closure over the model's current
    parameters.  The model is evaluated in double precision.
    """
    import torch

    model.zero_grad()
    loss_fn().backward()
    worst = 0.0
    for param in model.parameters():
        if not param.requires_grad:
            continue
        analytic = param.grad.detach().reshape(-1)
        flat = param.data.reshape(-1)
        for idx in range(flat.numel()):
            orig = flat[idx].item()
            flat[idx] = orig + eps
            with torch.no_grad():
                plus = loss_fn().item()
            flat[idx] = orig - eps
            with torch.no_grad():
                minus = loss_fn().item()
            flat[idx] = orig
            numeric = (plus - minus) / (2 * eps)
            a = analytic[idx].item()
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-3)
            worst = max(worst, rel)
    return worst

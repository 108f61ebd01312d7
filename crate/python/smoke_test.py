"""Smoke test for the expertadapt_py extension.

Build and install first:

    pip install --no-build-isolation -e crates/python

then run `python python/smoke_test.py`.
"""

import json
import math
import tempfile
from pathlib import Path

import expertadapt_py as ea


def check_sampling():
    assert ea.starting_indices(34, 10) == [1, 4, 7, 10, 13, 16, 19, 22, 25, 28]
    assert ea.sample_indices(28, 10, 34) == [28, 29, 30, 31, 32, 33, 34, 1, 2, 3]
    assert len(ea.expert_combinations([1, 2, 3, 4, 5], 3)) == 10
    try:
        ea.sample_indices(0, 3, 34)
    except ValueError:
        pass
    else:
        raise AssertionError("start index 0 accepted")


def check_metrics():
    a = [[False] * 8 for _ in range(8)]
    b = [[False] * 8 for _ in range(8)]
    for r in range(2, 6):
        for c in range(2, 6):
            a[r][c] = True
            b[r][c + 1] = True
    assert math.isclose(ea.dice_score(a, b), 2 * 12 / 32)
    assert ea.assd(a, a) == 0.0
    assert ea.hd95(a, b) > 0.0
    loss, grad = ea.dice_loss([0.0] * 4, [1, 0, 1, 0])
    assert 0.0 < loss < 1.0 and len(grad) == 4


def check_schedule_and_stats():
    assert ea.lr_schedule(0, 100) == 0.001
    assert ea.lr_schedule(100, 100) == 0.0
    r = ea.t_test([1.0, 2.0, 3.0, 4.0], [1.5, 2.5, 3.0, 5.0], kind="paired")
    assert 0.0 < r["p"] <= 1.0 and not r["significant"]


def check_model(tmp: Path):
    ds = ea.Dataset.synthetic(n_cases=6, height=64, width=64, seed=7)
    assert len(ds) == 6 and ds.roster() == [1, 2, 3, 4, 5, 6, 7]
    train, test = ds.split(4)
    model = ea.Model(n_experts=2, seed=1)
    assert model.experts() == [1, 2]
    losses = model.train(train, [1, 2], steps=5, batch_size=2, augment=False)
    assert len(losses) == 5 and all(math.isfinite(v) for v in losses)
    ft = model.finetune(train, 6, [1, 2], steps=3, batch_size=2, augment=False)
    assert len(ft) == 3 and 6 in model.experts()
    summary = model.evaluate(test, 6)
    assert summary["n_cases"] == 2 and 0.0 <= summary["dice"] <= 1.0
    pred = model.predict(ds.image(1), 6)
    assert len(pred) == 64 and len(pred[0]) == 64

    path = tmp / "model.ckpt"
    model.save(str(path))
    again = ea.Model.load(str(path))
    assert again.logits(ds.image(2), 6) == model.logits(ds.image(2), 6)
    try:
        model.predict(ds.image(1), 9)
    except ea.ExpertAdaptError:
        pass
    else:
        raise AssertionError("unknown expert accepted")


def check_experiment(tmp: Path):
    config = {
        "data": {"synth": {"n_cases": 8, "height": 64, "width": 64}, "n_train": 5},
        "new_experts": [6],
        "pretrain_experts": [1, 2],
        "expert_counts": [0, 1],
        "finetune_samples": 2,
        "n_ways": 2,
        "train": {"train_steps": 2, "finetune_steps": 2, "batch_size": 1, "augment": None},
    }
    text = ea.run_experiment("expert-count", json.dumps(config), out=str(tmp))
    assert "Adapt to Exp_6" in text
    assert ea.report("expert-count", str(tmp)) == text


def main():
    check_sampling()
    check_metrics()
    check_schedule_and_stats()
    with tempfile.TemporaryDirectory() as d:
        check_model(Path(d))
        check_experiment(Path(d))
    print("python smoke test passed")


if __name__ == "__main__":
    main()

"""Smoke test for the modal_emu extension module.

Build and install first:
    pip install --no-build-isolation -e crates/python
"""
import json
import math
import tempfile

import modal_emu as me

TINY = {
    "lr": 1e-3,
    "batch_size": 2,
    "epochs": 2,
    "seed": 3,
    "backbone_channels": [4, 4, 8],
    "convs_per_block": 1,
    "embed_dims": [16, 16, 16],
    "feature_channels": 8,
    "heads": 2,
    "prompt_len": 2,
}


def main():
    t = me.Tensor([2, 2], [1.0, 2.0, 3.0, 4.0])
    assert t.shape == [2, 2] and t.sum() == 10.0

    samples = [me.generate_sample(seed) for seed in range(4)]
    s = samples[0]
    assert s.rgb.shape == [3, 64, 64] and s.aux.shape == [1, 64, 64]
    assert s.count() == len(s.points)

    d = me.Tensor([1, 1, 1], [0.25])
    assert abs(me.bayesian_loss(d, [(3.0, 3.0)]) - 0.75) < 1e-12
    assert me.game([d], [[(1.0, 1.0)]], 0) == 0.75

    model = me.Model(json.dumps(TINY))
    density = model.predict(s)
    assert density.shape == [1, 8, 8]
    assert model.num_prompt_params() > 0

    trainer = me.Trainer(json.dumps(TINY))
    step = trainer.train_step(samples[:2])
    assert math.isfinite(step["l_bl"]) and step["l_cl"] >= 0.0
    logs = trainer.fit(samples, samples[:2])
    assert [l["epoch"] for l in logs] == [1, 2]

    table = me.evaluate(trainer.model(), samples)
    assert len(table["game"]) == 4 and table["game"][0] <= table["game"][3] * (1 + 1e-12)
    probe = me.alignment_probe(trainer.model(), samples)
    assert abs(sum(probe["rgb"]["percent"]) - 100.0) < 1e-9

    with tempfile.TemporaryDirectory() as tmp:
        path = f"{tmp}/model.ckpt"
        trainer.save_checkpoint(path)
        lean = me.Model.load(path)
        full = me.Model.load(path, inference_only=False)
        assert lean.num_prompt_params() == 0
        assert me.evaluate(lean, samples) == me.evaluate(full, samples)
        resumed = me.Trainer.resume(path)
        assert resumed.epoch == 2

        sample_dir = s.save(tmp)
        assert me.load_sample(str(sample_dir)).points == s.points

    try:
        me.Trainer(json.dumps({"learning_rate": 1.0}))
    except ValueError as e:
        assert "learning_rate" in str(e)
    else:
        raise AssertionError("unknown config key accepted")

    print("smoke test passed")


if __name__ == "__main__":
    main()

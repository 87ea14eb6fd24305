"""Exercises the extension module end to end on a tiny configuration.

Build and run:

    cd crates/python && maturin develop --release
    python python/smoke_test.py
"""

import math
import tempfile

import mimu

TINY = """
seed = 3

[data]
train_size = 48
dev_size = 24
ood_size = 24

[model]
num_layers = 2
num_heads = 2
hidden_dim = 16
ffn_dim = 24

[train]
epochs = 2
batch_size = 16
"""


def close(a, b, tol=1e-6):
    return abs(a - b) < tol


def main():
    # losses and metrics against hand-computed values
    assert close(mimu.calibration_loss([0.7, 0.2, 0.1], 0, 1.0), -math.log(0.7) + 0.14)
    assert close(mimu.kd_loss([0.5, 0.5], [0.5, 0.5], 2.0), 0.0)
    assert close(mimu.attention_alignment_loss([0.1, 0.2, 0.3, 0.4], [0.1, 0.2, 0.3, 0.4], [0], 2), 0.0)
    probs = [[0.9, 0.1], [0.2, 0.8], [0.6, 0.4]]
    assert close(mimu.accuracy(probs, [0, 1, 1]), 2 / 3)
    assert 0.0 <= mimu.ece(probs, [0, 1, 1], 10) <= 1.0

    cfg = mimu.Config(TINY)
    assert cfg.seed == 3
    assert mimu.Config(cfg.to_toml()).hash() == cfg.hash()
    try:
        mimu.Config("[train]\nepochz = 1\n")
        raise AssertionError("unknown key accepted")
    except ValueError:
        pass

    bundle = mimu.Bundle.generate(cfg)
    assert bundle.splits() == ["train", "dev", "rand_b", "rand_bw", "rand_w"]
    assert len(bundle) == 48
    audit = bundle.audit()
    assert audit[("background_color", "train")] > 0.8
    assert bundle.hash() == mimu.Bundle.generate(cfg).hash()

    erm, erm_report = mimu.train_erm(bundle, cfg)
    run = mimu.train_mimu(bundle, cfg)
    target, platt = run["target"], run["platt"]
    for split in ["dev", "rand_b", "rand_w", "rand_bw"]:
        raw = target.evaluate(bundle, split)
        assert 0.0 <= raw["accuracy"] <= 1.0 and 0.0 <= raw["ece"] <= 1.0
        cal = target.evaluate(bundle, split, platt)
        assert close(cal["accuracy"], run["target_report"]["calibrated_metrics"][split]["accuracy"])
    assert len(erm_report["epochs"]) == 2

    for scores in target.logits(bundle, "dev")[:5]:
        p = platt.apply(scores)
        assert close(sum(p), 1.0, 1e-9)
    refit = mimu.Platt.fit(target.logits(bundle, "dev"), bundle.labels("dev"))
    assert refit.a == platt.a and refit.b == platt.b

    last, mean = target.attention(bundle, "dev", 0)
    assert close(sum(last), 1.0, 1e-4) and close(sum(mean), 1.0, 1e-4)

    with tempfile.TemporaryDirectory() as d:
        target.save(d, "target")
        back = mimu.Model.load(d, "target")
        assert back.predict_proba(bundle, "dev") == target.predict_proba(bundle, "dev")
        h = bundle.save(d + "/bundle")
        assert mimu.Bundle.load(d + "/bundle").hash() == h

    again, _, report = mimu.train_target(bundle, cfg, run["source"])
    assert again.predict_proba(bundle, "dev") == target.predict_proba(bundle, "dev")
    assert report["settings"]["lambda_1"] == run["target_report"]["settings"]["lambda_1"]

    print("python smoke test passed")


if __name__ == "__main__":
    main()

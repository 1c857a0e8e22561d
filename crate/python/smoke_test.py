"""Smoke test for the mfennet Python module.

Build and run from the repository root:

    cargo build -p mfennet-python --release
    cp target/release/libmfennet_py.so python/mfennet.so
    python3 python/smoke_test.py
"""

import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import mfennet  # noqa: E402

TINY = "model.stage_widths = 4,8,8,16,16\nmodel.blocks_per_stage = 1,1,0,1,0\nmodel.spp_bins = 1,2\n"


def main():
    full = mfennet.count()
    assert full["params"] == 11_144_257, full
    assert abs(full["params_delta"]) < 0.10 and abs(full["flops_delta"]) < 0.15, full
    unet = mfennet.count(arch="unet", input=128)
    assert "params_delta" not in unet

    images, masks, shape = mfennet.synth(n=4, size=32, seed=3)
    n, c, h, w = shape
    assert len(images) == n * c * h * w and len(masks) == n * h * w

    mask_shape = (n, 1, h, w)
    perfect = [20.0 if m > 0.5 else -20.0 for m in masks]
    assert mfennet.iou(perfect, masks, mask_shape) == 1.0
    assert mfennet.dice(perfect, masks, mask_shape) == 1.0

    model = mfennet.Model(seed=1, config=TINY)
    logits, out_shape = model.predict(images, shape)
    assert out_shape == mask_shape and len(logits) == len(masks)

    history = model.train(size=32, synth_n=4, epochs=2, batch_size=2, lr=1e-3)
    assert [r["epoch"] for r in history] == [1, 2]
    iou, dice = model.evaluate(size=32, synth_n=4)
    assert 0.0 <= iou <= 1.0 and 0.0 <= dice <= 1.0

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "m.ckpt")
        model.save(path)
        back = mfennet.Model.load(path)
        assert back.predict(images, shape) == model.predict(images, shape)
        assert back.param_count == model.param_count

    results = mfennet.gradcheck(size=4)
    assert all(ok for _, _, ok in results), results
    assert any(name == "model" for name, _, _ in results)

    try:
        mfennet.Model(config="model.stage_widths = 1,2\n")
    except ValueError:
        pass
    else:
        raise AssertionError("invalid config accepted")

    print(f"ok: {model.param_count} params, train iou {iou:.3f}, {len(results)} gradient suites")


if __name__ == "__main__":
    main()

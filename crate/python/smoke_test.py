"""Smoke test for the stimpute_py extension module.

Build the module first, either with maturin (`pip install ./crates/python`)
or with cargo, copying the shared library next to this script:

    cargo build --release -p stimpute-py --features extension-module
    cp target/release/libstimpute_py.so python/stimpute_py.so
"""

import json
import math
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import stimpute_py as st  # noqa: E402


def main():
    f, n = st.lemma1_check([0.3, -1.2, 2.0, 0.7])
    assert math.isclose(f, n, rel_tol=1e-10), (f, n)

    x = st.synth(nodes=6, steps=240, rank=3, seed=1)
    mask = st.simulate_missing(x, pattern="point", rate=0.25, seed=2)
    held_out = [[1.0 - v for v in row] for row in mask]

    config = {
        "seed": 0,
        "model": {
            "window": 12,
            "node_embed_total": 24,
            "projected_dim": 3,
            "model_dim": 8,
            "node_embed_key_dim": 2,
            "ffn_hidden": 16,
            "input_hidden": 4,
            "n_layers": 1,
        },
        "train": {"max_epochs": 3, "batch": 4},
    }
    model = st.Model.train(x, mask, json.dumps(config))
    y = model.impute(x, mask)
    for i, row in enumerate(mask):
        for t, observed in enumerate(row):
            if observed:
                assert y[i][t] == x[i][t]

    scores = {"model": st.evaluate(y, x, held_out)["mae"]}
    for kind in ("mean", "linear", "als"):
        scores[kind] = st.evaluate(st.impute_baseline(x, mask, kind=kind, rank=3), x, held_out)["mae"]

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "model.ckpt")
        model.save(path)
        assert st.Model.load(path).impute(x, mask) == y

    sv = st.singular_values(x)
    energy = sum(v * v for v in sv[:3]) / sum(v * v for v in sv)
    print(model)
    print("test MAE:", ", ".join(f"{k} {v:.4f}" for k, v in scores.items()))
    print(f"top-3 singular energy: {energy:.3f}")
    print("ok")


if __name__ == "__main__":
    main()

"""Smoke test for the adaptkit_py extension.

Build the module first:

    cargo build -p adaptkit-py --release
    cp target/release/libadaptkit_py.so python/adaptkit_py.so
    python3 python/smoke_test.py
"""

import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import adaptkit_py as ak


def main():
    base = ak.ModelConfig.base()
    assert ak.count_adapter_params(base, "pfeiffer", 64) == 230_544
    assert ak.count_adapter_params(base, "houlsby", 64) > 2 * 230_000

    desk = ak.ModelConfig.desk()
    model = ak.Model(desk, seed=0)
    ids = [0, 5, 9, 17, 4]
    plain = model.encode(ids)
    model.add_adapter("maj", "houlsby")
    assert model.encode(ids, ["maj"]) == plain, "a fresh adapter must be the identity"

    model.add_head("cls")
    model.train_adapter(["maj"])
    base_digest = model.base_digest()
    acc = model.train("cls", "majority-token", seed=1, steps=300, learning_rate=5e-3)
    assert model.base_digest() == base_digest
    print(f"majority-token dev accuracy after 300 adapter steps: {acc:.3f}")

    with tempfile.TemporaryDirectory() as tmp:
        pkg = os.path.join(tmp, "maj.pkg")
        model.save_adapter("maj", pkg, head="cls")
        fresh = ak.Model(desk, seed=0)
        assert fresh.load_adapter(pkg, load_head=True) == "maj"
        assert fresh.encode(ids, ["maj"]) == model.encode(ids, ["maj"])
        _, dev = ak.generate_toy_task("majority-token", 1)
        fresh.set_active(["maj"])
        correct = sum(fresh.predict("cls", t) == y for t, y in dev)
        assert correct / len(dev) == acc

        report = ak.pack_zip(pkg, os.path.join(tmp, "maj.zip"))
        assert report["name"] == "maj" and report["blob_bytes"] == 4 * report["params"]

        other = ak.ModelConfig.from_descriptor(desk.descriptor().replace("num_layers=2", "num_layers=3"))
        try:
            ak.Model(other).load_adapter(pkg)
        except ValueError as e:
            assert desk.hash in str(e) and other.hash in str(e)
        else:
            raise AssertionError("loading into a mismatched model must fail")

    print("smoke test passed")


if __name__ == "__main__":
    main()

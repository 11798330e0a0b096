"""Smoke test for the Python bindings.

Build and install first:
    pip install maturin
    maturin build --release -m crates/py/Cargo.toml
    pip install target/wheels/nuczip_py-*.whl
"""

import random

import nuczip_py as nz

SMALL = dict(t=8, bs=16, scale_factor=16)


def main():
    rng = random.Random(1)
    seq = "".join(rng.choice("ACGT") for _ in range(20_000)).encode()
    data = b">record one\n" + seq[:10_000] + b"\nNNNN\n" + seq[10_000:] + b"\n"

    packed = nz.compress(data, workers=2, **SMALL)
    assert nz.decompress(packed, threads=3) == data
    info = nz.inspect(packed)
    assert info["original_len"] == len(data) and info["chunks"] == 2
    cr = nz.compression_ratio(len(packed), len(data))
    print(f"dynamic-only: {len(data)} -> {len(packed)} bytes, CR {cr:.3f} bits/base")

    assert nz.tokenize(b"CGG", s=1, k=3) == [26]
    assert nz.select_models(100, 100) == (True, False, True)
    assert nz.select_models(101, 100) == (False, True, True)

    corpus = nz.synthetic_corpus(7, 2, 4000)
    model = nz.pretrain_spum(corpus, epochs=1, max_batches=3, **SMALL)
    assert nz.StaticModel.from_bytes(model.to_bytes()).hash == model.hash
    packed = nz.compress(data, spum=model, **SMALL)
    assert nz.decompress(packed, spum=model) == data
    try:
        nz.decompress(packed)
    except nz.SpumMissingError:
        pass
    else:
        raise AssertionError("decoding without the public model should fail")
    print(f"public model {model!r}: round trip ok")

    try:
        nz.compress(data, s=4, k=3)
    except ValueError:
        pass
    else:
        raise AssertionError("s > k should be rejected")

    rob = nz.robustness([1.812, 1.943, 1.900, 1.850, 1.851, 1.651, 1.892, 1.866, 1.844])
    assert abs(rob - 4.455) < 0.01
    print("smoke test passed")


if __name__ == "__main__":
    main()

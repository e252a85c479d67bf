"""Smoke test for the Python bindings.

Build first:  cargo build -p dejavu-py
Then run:     python3 python/smoke_test.py [path/to/libdejavu_py.so]
"""

import importlib.util
import math
import pathlib
import random
import shutil
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parent.parent


def find_library():
    if len(sys.argv) > 1:
        return pathlib.Path(sys.argv[1])
    for profile in ("debug", "release"):
        for name in ("libdejavu_py.so", "libdejavu_py.dylib"):
            p = ROOT / "target" / profile / name
            if p.exists():
                return p
    sys.exit("libdejavu_py not found; run `cargo build -p dejavu-py` first")


def load(lib, tmp):
    target = pathlib.Path(tmp) / "dejavu_py.so"
    shutil.copy(lib, target)
    spec = importlib.util.spec_from_file_location("dejavu_py", target)
    module = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(module)
    return module


def naive_dct(x, h, w):
    def a(k, n):
        return math.sqrt((1 if k == 0 else 2) / n)

    out = []
    for u in range(h):
        for v in range(w):
            s = 0.0
            for i in range(h):
                for j in range(w):
                    s += (
                        x[i * w + j]
                        * math.cos(math.pi * (2 * i + 1) * u / (2 * h))
                        * math.cos(math.pi * (2 * j + 1) * v / (2 * w))
                    )
            out.append(a(u, h) * a(v, w) * s)
    return out


def main():
    rng = random.Random(0)
    with tempfile.TemporaryDirectory() as tmp:
        dv = load(find_library(), tmp)
        print("dejavu_py", dv.__version__)

        h = w = 6
        img = [rng.random() for _ in range(h * w)]
        coef = dv.dct2(img, (1, h, w))
        ref = naive_dct(img, h, w)
        err = max(abs(a - b) for a, b in zip(coef, ref))
        assert err < 1e-10, err
        back = dv.idct2(coef, (1, h, w))
        assert max(abs(a - b) for a, b in zip(back, img)) < 1e-10

        red = dv.redact(img * 3, (3, h, w), "checkerboard", b=3)
        zeros = sum(1 for v in red if v == 0.0)
        assert zeros == 3 * h * w // 2, zeros

        once = dv.redact(img, (1, h, w), "bandstop", band=(0.3, 0.6))
        twice = dv.redact(once, (1, h, w), "bandstop", band=(0.3, 0.6))
        assert max(abs(a - b) for a, b in zip(once, twice)) < 1e-9

        try:
            dv.redact(img, (1, h, w), "random")
        except ValueError as e:
            print("missing t rejected:", e)
        else:
            raise AssertionError("expected ValueError")

        text = dv.canonical_config("task = seg\nseed = 3\n")
        assert dv.canonical_config(text) == text
        assert "seed = 3" in text

        out_dir = pathlib.Path(tmp) / "run"
        cfg = "\n".join(
            [
                "task = seg",
                f"out_dir = {out_dir}",
                "data.height = 16",
                "data.width = 16",
                "data.train = 8",
                "data.val = 4",
                "base.width = 4",
                "base.levels = 2",
                "redaction.domain = spatial",
                "redaction.variant = random_blocks",
                "redaction.b = 4",
                "crm.enabled = true",
                "crm.width = 4",
                "crm.depth = 1",
                "train.epochs = 1",
                "train.batch_size = 4",
            ]
        )
        metrics = dv.train(cfg)
        assert metrics["epochs"] == 1
        assert 0.0 <= metrics["segmentation/miou"] <= 1.0
        assert (out_dir / "metrics.csv").exists()
        print("train:", metrics)
    print("smoke test passed")


if __name__ == "__main__":
    main()

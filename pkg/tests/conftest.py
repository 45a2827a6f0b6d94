import numpy as np
import pytest

from advart import tensorgrad as tg


def numeric_grad(f, x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central differences of scalar f at x (float64)."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f(x)
        x[i] = old - h
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def autodiff_grad(build, x: np.ndarray) -> np.ndarray:
    leaf = tg.Tensor(x, requires_grad=True)
    tg.backward(build(leaf))
    return leaf.grad


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12))


def check_grad(build, x, h=1e-4):
    """Relative error between autodiff and central differences for scalar ``build``."""
    ana = autodiff_grad(build, x)
    num = numeric_grad(lambda v: build(tg.Tensor(v)).item(), x, h)
    return rel_err(ana, num)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# --- trained toy detector, shared by the slow tests -------------------------

import hashlib  # noqa: E402
import json  # noqa: E402
from dataclasses import dataclass  # noqa: E402
from pathlib import Path  # noqa: E402

import advart  # noqa: E402
from advart.detector import load_detector, save_detector, split, synth_dataset, train_toy_detector  # noqa: E402

DATA_SEED = 0
DATA_COUNT = 200


@dataclass
class Trained:
    model: object
    curve: list
    scenes: list
    path: Path

    @property
    def train(self):
        return split(self.scenes, "train")

    @property
    def val(self):
        return split(self.scenes, "val")


def _source_key() -> str:
    """Checkpoints are reused only while the code that produced them is unchanged."""
    root = Path(advart.__file__).parent
    h = hashlib.sha256()
    for name in ("tensorgrad.py", "detector.py", "adam.py", "metrics.py", "patchops.py", "imaging.py"):
        h.update((root / name).read_bytes())
    return h.hexdigest()[:16]


@pytest.fixture(scope="session")
def trained(request) -> Trained:
    scenes = synth_dataset(DATA_SEED, DATA_COUNT)
    cache = Path(request.config.cache.mkdir("advart-detector"))
    key = _source_key()
    ckpt, curve_path = cache / f"det-{key}.bin", cache / f"det-{key}.json"
    if ckpt.is_file() and curve_path.is_file():
        return Trained(load_detector(ckpt), json.loads(curve_path.read_text()), scenes, ckpt)
    model, curve = train_toy_detector(scenes, seed=0)
    save_detector(model, ckpt)
    curve_path.write_text(json.dumps(curve))
    return Trained(model, curve, scenes, ckpt)


# --- acceptance report ---------------------------------------------------------

ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def acceptance():
    """``acceptance(n, ok, detail)`` records one criterion line for the end-of-run report."""

    def record(n: int, ok: bool, detail: str) -> None:
        ACCEPTANCE_LINES[n] = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])

"""Worker acceptance: the selftest contract and the full remote protection run.

Run with ``pytest worker/tests/test_acceptance.py -v -s`` to see the
verdict lines. The end-to-end criterion drives a real 512x512, 100-step
protection through the socket service and takes a couple of minutes on a
laptop-class CPU.
"""

import numpy as np

from impasto.image import ImageTensor
from impasto.oracle import RemoteOracle
from impasto.protect import ProtectionConfig, protect_run

from impasto_worker.selftest import run_selftest


def _report(name: str, ok: bool, detail: str = "") -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] {name}"
    if detail:
        line += f"  ({detail})"
    print(line)
    assert ok, line


def make_test_image(seed: int = 0, size: int = 512) -> ImageTensor:
    """Mid-gray field with low-frequency waves and fine texture."""
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.linspace(0, 1, size), np.linspace(0, 1, size), indexing="ij")
    arr = np.full((size, size, 3), 0.5)
    for ch in range(3):
        for _ in range(3):
            fy, fx = rng.uniform(0.5, 4.0, size=2)
            phase = rng.uniform(0, 2 * np.pi)
            arr[:, :, ch] += 0.04 * np.sin(2 * np.pi * (fy * yy + fx * xx) + phase)
    arr += rng.normal(0.0, 0.05, size=arr.shape)
    return ImageTensor(np.clip(arr, 0.0, 1.0))


def test_criterion_worker_selftest(capsys):
    failures = run_selftest(seed=0)
    captured = capsys.readouterr().out
    print(captured, end="")
    _report("worker selftest (minimizer, self-distance, reproducibility)",
            failures == 0, f"{failures} failures")


def test_criterion_end_to_end_remote_run(server):
    x = make_test_image(seed=7)
    config = ProtectionConfig(steps=100, seed=13, preset="photoguard")
    with RemoteOracle(server.bound_endpoint) as oracle:
        result = protect_run(x, None, config, oracle)

    initial = result.trace[0].loss_e
    final = result.trace[-1].loss_e
    drop = 1.0 - final / initial
    budget_ok = all(rec.linf <= config.eta + 1e-6 for rec in result.trace)
    range_ok = all(
        rec.pixel_min >= 0.0 and rec.pixel_max <= 1.0 for rec in result.trace
    )
    final_ok = (
        np.abs(result.delta).max() <= config.eta + 1e-6
        and result.protected.data.min() >= 0.0
        and result.protected.data.max() <= 1.0
    )
    _report(
        "remote 512x512 photoguard run: encoder distance halves, invariants hold",
        drop >= 0.5 and budget_ok and range_ok and final_ok,
        f"L_E {initial:.2f} -> {final:.2f} ({drop * 100:.0f}% drop), "
        f"budget {budget_ok}, range {range_ok}",
    )

"""Command-line frontend: protect images, dump diagnostic maps, render diffs.

Configuration precedence is defaults < ``--config`` JSON file < flags. The
config file is a flat JSON object; any :class:`~impasto.protect.ProtectionConfig`
field is accepted, plus the manifest keys ``inputs``, ``target``,
``oracle``, ``endpoint``, ``out``, ``jobs``, ``bit_depth`` and
``omega_log``. Exit codes: 0 success, 1 at least one image failed,
2 bad arguments.
"""

from __future__ import annotations

import dataclasses
import json
import os
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import click
import numpy as np

from . import jnd
from .errors import ImpastoError
from .image import (
    ImageTensor,
    read_png,
    to_luminance,
    write_delta_png,
    write_gray_png,
    write_png,
)
from .oracle import RemoteOracle, SurrogateOracle, resolve_endpoint
from .protect import PRESETS, ProtectionConfig, default_grid_target, protect_run

_CONFIG_FIELDS = {f.name for f in dataclasses.fields(ProtectionConfig)}
_MANIFEST_KEYS = {
    "inputs",
    "target",
    "oracle",
    "endpoint",
    "out",
    "jobs",
    "bit_depth",
    "omega_log",
}


@dataclasses.dataclass
class RunManifest:
    inputs: list[str]
    target: str = "grid"
    oracle: str = "surrogate"
    endpoint: str | None = None
    out: str = "impasto-output"
    jobs: int | None = None
    bit_depth: int = 16
    omega_log: bool = False
    config: ProtectionConfig = dataclasses.field(default_factory=ProtectionConfig)

    def validate(self) -> None:
        if not self.inputs:
            raise click.UsageError("no input images given")
        for path in self.inputs:
            if not Path(path).is_file():
                raise click.UsageError(f"input not found: {path}")
        if self.target != "grid" and not Path(self.target).is_file():
            raise click.UsageError(f"target not found: {self.target}")
        if self.oracle not in ("surrogate", "remote"):
            raise click.UsageError(f"unknown oracle mode: {self.oracle}")
        if self.oracle == "remote":
            try:
                self.endpoint = resolve_endpoint(self.endpoint)
            except ImpastoError as exc:
                raise click.UsageError(str(exc)) from exc
        if self.bit_depth not in (8, 16):
            raise click.UsageError("bit_depth must be 8 or 16")
        out = Path(self.out)
        out.mkdir(parents=True, exist_ok=True)
        if not os.access(out, os.W_OK):
            raise click.UsageError(f"output directory not writable: {out}")


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise click.UsageError(f"cannot read config file {path}: {exc}") from exc
    unknown = set(data) - _CONFIG_FIELDS - _MANIFEST_KEYS
    if unknown:
        raise click.UsageError(f"unknown config keys: {sorted(unknown)}")
    return data


def _build_manifest(file_values: dict, flag_values: dict) -> RunManifest:
    merged = dict(file_values)
    merged.update({k: v for k, v in flag_values.items() if v is not None})
    cfg_kwargs = {k: v for k, v in merged.items() if k in _CONFIG_FIELDS}
    try:
        config = ProtectionConfig.from_dict(cfg_kwargs)
    except ImpastoError as exc:
        raise click.UsageError(str(exc)) from exc
    manifest_kwargs = {k: v for k, v in merged.items() if k in _MANIFEST_KEYS}
    manifest_kwargs["inputs"] = list(manifest_kwargs.get("inputs", ()))
    return RunManifest(config=config, **manifest_kwargs)


def _make_oracle(manifest: RunManifest):
    if manifest.oracle == "remote":
        return RemoteOracle(manifest.endpoint)
    return SurrogateOracle()


def _protect_one(input_path: str, manifest: RunManifest) -> dict:
    """Protect a single image; returns the summary dict.

    Runs inside a worker process during batch runs, so it opens its own
    oracle session.
    """
    x = read_png(input_path)
    target = (
        default_grid_target(x.shape)
        if manifest.target == "grid"
        else read_png(manifest.target)
    )
    out_dir = Path(manifest.out) / Path(input_path).stem
    out_dir.mkdir(parents=True, exist_ok=True)

    with _make_oracle(manifest) as oracle:
        result = protect_run(x, target, manifest.config, oracle)

    artifacts = {
        "protected": str(out_dir / "protected.png"),
        "delta": str(out_dir / "delta.png"),
        "map_fused": str(out_dir / "map_fused.png"),
        "map_difficulty": str(out_dir / "map_difficulty.png"),
        "map_sensitivity": str(out_dir / "map_sensitivity.png"),
        "trace": str(out_dir / "trace.jsonl"),
        "summary": str(out_dir / "summary.json"),
    }
    write_png(artifacts["protected"], result.protected, manifest.bit_depth)
    write_delta_png(artifacts["delta"], result.delta)
    write_gray_png(artifacts["map_fused"], np.clip(result.fused_map, 0, 1))
    write_gray_png(artifacts["map_difficulty"], np.clip(result.difficulty_map, 0, 1))
    write_gray_png(artifacts["map_sensitivity"], result.sensitivity_map)
    with open(artifacts["trace"], "w") as fh:
        for record in result.trace:
            fh.write(json.dumps(record.to_dict()) + "\n")
    if manifest.omega_log:
        artifacts["omega_log"] = str(out_dir / "omega_log.txt")
        with open(artifacts["omega_log"], "w") as fh:
            for event, omega in enumerate(result.omega_history):
                fh.write(" ".join(f"{v:.12g}" for v in omega) + f"  # event {event}\n")

    final = result.trace[-1]
    summary = {
        "input": input_path,
        "target": manifest.target,
        "preset": manifest.config.preset,
        "oracle": manifest.oracle,
        "endpoint": manifest.endpoint,
        "bit_depth": manifest.bit_depth,
        "config": manifest.config.to_dict(),
        "artifacts": artifacts,
        "final": final.to_dict(),
        "omega": [float(v) for v in result.omega],
        "wall_time": result.wall_time,
    }
    with open(artifacts["summary"], "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    return summary


@click.group()
def main():
    """Perception-aware protection against diffusion-model style imitation."""


@main.command("protect")
@click.option("--input", "inputs", multiple=True, type=click.Path(), help="Input PNG (repeatable).")
@click.option("--target", default=None, help='Target image path, or "grid" (default).')
@click.option("--preset", default=None, type=click.Choice(sorted(PRESETS)))
@click.option("--eta", default=None, type=float, help="L-infinity budget in [0,1] units.")
@click.option("--alpha", default=None, type=float, help="Step length.")
@click.option("--steps", default=None, type=int, help="Number of PGD steps.")
@click.option("--interval", default=None, type=int, help="Refinement interval.")
@click.option("--oracle", default=None, type=click.Choice(["surrogate", "remote"]))
@click.option("--endpoint", default=None, help="Worker endpoint (host:port or socket path).")
@click.option("--seed", default=None, type=int)
@click.option("--out", default=None, type=click.Path(), help="Output directory.")
@click.option("--config", "config_path", default=None, type=click.Path(), help="JSON config file.")
def cmd_protect(inputs, target, preset, eta, alpha, steps, interval, oracle, endpoint, seed, out, config_path):
    """Protect one or more images and write all artifacts."""
    flag_values = {
        "inputs": list(inputs) or None,
        "target": target,
        "preset": preset,
        "eta": eta,
        "alpha": alpha,
        "steps": steps,
        "interval": interval,
        "oracle": oracle,
        "endpoint": endpoint,
        "seed": seed,
        "out": out,
    }
    manifest = _build_manifest(_load_config_file(config_path), flag_values)
    manifest.validate()

    jobs = manifest.jobs or os.cpu_count() or 1
    failures = 0
    if jobs == 1 or len(manifest.inputs) == 1:
        for path in manifest.inputs:
            failures += _run_reporting(path, manifest)
    else:
        with ProcessPoolExecutor(max_workers=min(jobs, len(manifest.inputs))) as pool:
            futures = {
                pool.submit(_protect_one, path, manifest): path
                for path in manifest.inputs
            }
            for future, path in futures.items():
                try:
                    summary = future.result()
                    click.echo(f"protected {path} -> {summary['artifacts']['protected']}")
                except Exception as exc:
                    click.echo(f"FAILED {path}: {exc}", err=True)
                    failures += 1
    sys.exit(1 if failures else 0)


def _run_reporting(path: str, manifest: RunManifest) -> int:
    try:
        summary = _protect_one(path, manifest)
    except Exception as exc:
        click.echo(f"FAILED {path}: {exc}", err=True)
        traceback.print_exc()
        return 1
    click.echo(f"protected {path} -> {summary['artifacts']['protected']}")
    return 0


@main.command("maps")
@click.option("--input", "input_path", required=True, type=click.Path(exists=True))
@click.option("--ppd", default=jnd.DEFAULT_PPD, type=float, show_default=True,
              help="Display pixels per degree for the frequency estimator.")
@click.option("--out", default="impasto-maps", type=click.Path(), show_default=True)
def cmd_maps(input_path, ppd, out):
    """Write the per-estimator sensitivity maps plus average and quantized maps."""
    img = read_png(input_path)
    lum = to_luminance(img)
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = Path(input_path).stem

    sens_maps = {}
    for raw in jnd.estimate_all(lum, ppd):
        sens, _ = jnd.postprocess_map(raw)
        sens_maps[raw.kind.value] = sens
        write_gray_png(str(out_dir / f"{stem}_{raw.kind.value}.png"), sens.values)

    average = np.mean([s.values for s in sens_maps.values()], axis=0)
    write_gray_png(str(out_dir / f"{stem}_average.png"), average)
    quantized = jnd.quantize_strength(jnd.SensitivityMap(average))
    write_gray_png(str(out_dir / f"{stem}_quantized.png"), quantized.values)
    click.echo(f"wrote {len(sens_maps) + 2} maps to {out_dir}")


@main.command("diff")
@click.argument("image_a", type=click.Path(exists=True))
@click.argument("image_b", type=click.Path(exists=True))
@click.option("--gain", default=1.0, type=float, show_default=True)
@click.option("--out", default="diff.png", type=click.Path(), show_default=True)
def cmd_diff(image_a, image_b, gain, out):
    """Write |A - B| * gain, clamped to [0, 1], as a PNG."""
    if not out.lower().endswith(".png"):
        raise click.UsageError("--out must be a .png path")
    a = read_png(image_a)
    b = read_png(image_b)
    if a.shape != b.shape:
        raise click.UsageError(
            f"extent mismatch: {a.shape} vs {b.shape}"
        )
    diff = np.clip(np.abs(a.data - b.data) * gain, 0.0, 1.0)
    write_png(out, ImageTensor(diff), bit_depth=8)
    click.echo(f"wrote {out}")


if __name__ == "__main__":
    main()

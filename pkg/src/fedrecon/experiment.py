"""Experiment harness: configuration, data generation, full runs with
artifacts on disk, and run comparison.

A run directory contains::

    manifest.json        config + environment fingerprint
    data/clientK.phantoms(.json)   per-client ground-truth images
    metrics.csv          one row per (round, client)
    final_metrics.csv    per-client quality vs the zero-filled baseline
    gen_report.json      train/test error and parameter count per client
    checkpoints/         server and per-client model archives
    figures/             rendered summary plots
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from .federation import (
    FedRunConfig,
    FederationResult,
    evaluate_model,
    run_federation,
    split_dataset,
    write_reports_csv,
    zero_filled_metrics,
    STRATEGIES,
    LOSS_MODES,
)
from .metrics import gen_report
from .mri import PhantomSpec, Sample, forward_op, add_noise, make_mask, make_phantom_image, save_dataset
from .network import PARTITION_SCHEMES, save_checkpoint


class ConfigError(ValueError):
    pass


class CompareError(RuntimeError):
    pass


# per-client heterogeneity: histogram warp, brightness, structure count
_CONTRASTS = [
    {"gamma": 0.7, "brightness": 1.0, "ellipses": 5},
    {"gamma": 1.0, "brightness": 0.9, "ellipses": 7},
    {"gamma": 1.4, "brightness": 1.0, "ellipses": 9},
]

# scenario 1: same pattern family everywhere; scenario 2: one family per client
_SCENARIO_PATTERNS = {
    1: ["1D_RANDOM"],
    2: ["1D_UNIFORM", "1D_RANDOM", "2D_RANDOM"],
}


@dataclass
class ExperimentConfig:
    """Complete description of one run; every field has a desk default."""

    strategy: str = "MODFED"
    scenario: int = 2
    clients: int = 3
    image_size: int = 32
    images_per_client: int = 20
    test_images_per_client: int = 8
    phantom_kind: str = "ellipse-phantom"
    split_ratio: float = 0.8
    acceleration: int = 4
    center_fraction: float = 0.08
    noise_variance: float = 0.03
    hidden: int = 12
    unroll_steps: int = 2
    cg_iters: int = 10
    cg_tol: float = 1e-6
    lam_init: float = 0.05
    rounds: int = 30
    local_epochs: int = 2
    batch_size: int = 4
    learning_rate: float = 1e-3
    gamma: float = 0.1
    fedprox_mu: float = 0.01
    partition_scheme: str = "SLAM_LOCAL"
    loss_mode: str = "LITERAL"
    val_interval: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}")
        if self.scenario not in _SCENARIO_PATTERNS:
            raise ConfigError(f"unknown scenario {self.scenario}")
        if self.partition_scheme not in PARTITION_SCHEMES:
            raise ConfigError(f"unknown partition scheme {self.partition_scheme!r}")
        if self.loss_mode not in LOSS_MODES:
            raise ConfigError(f"unknown loss mode {self.loss_mode!r}")
        if self.clients < 1:
            raise ConfigError("clients must be >= 1")
        if self.images_per_client < 2:
            raise ConfigError("images_per_client must be >= 2 (s1/s2 split)")
        if not 0.0 < self.split_ratio < 1.0:
            raise ConfigError("split_ratio must lie in (0, 1)")
        if self.rounds < 1 or self.local_epochs < 1 or self.batch_size < 1:
            raise ConfigError("rounds, local_epochs and batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")

    @classmethod
    def from_dict(cls, values: dict) -> "ExperimentConfig":
        """Strict construction: unknown keys are an error, not a warning."""
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**values)

    @classmethod
    def from_yaml(cls, path) -> "ExperimentConfig":
        raw = yaml.safe_load(Path(path).read_text())
        if raw is None:
            raw = {}
        if not isinstance(raw, dict):
            raise ConfigError(f"{path} must contain a mapping at the top level")
        profile = raw.pop("profile", "desk")
        base = profile_defaults(profile)
        base.update(raw)
        return cls.from_dict(base)

    def to_dict(self) -> dict:
        return asdict(self)


def profile_defaults(profile: str) -> dict:
    """Named hyperparameter bundles.

    ``desk`` finishes in minutes of CPU on one core; ``paper`` mirrors a
    full-scale configuration and is not meant for interactive use.
    """
    if profile == "desk":
        return {}
    if profile == "paper":
        return {
            "image_size": 256,
            "images_per_client": 300,
            "test_images_per_client": 50,
            "hidden": 64,
            "unroll_steps": 5,
            "rounds": 220,
            "batch_size": 24,
            "learning_rate": 1e-4,
            "noise_variance": 0.03,
        }
    raise ConfigError(f"unknown profile {profile!r} (expected 'desk' or 'paper')")


# ---------------------------------------------------------------------------
# data generation


@dataclass
class ClientData:
    client_id: int
    spec: PhantomSpec
    mask: object
    train: list[Sample]
    s1: list[Sample]
    s2: list[Sample]
    test: list[Sample]


def _client_mask(config: ExperimentConfig, k: int):
    patterns = _SCENARIO_PATTERNS[config.scenario]
    pattern = patterns[k % len(patterns)]
    mask_seed = int(np.random.default_rng((config.seed, k, 0x3A5C)).integers(2**31))
    return make_mask(
        config.image_size,
        config.image_size,
        pattern,
        config.acceleration,
        config.center_fraction,
        seed=mask_seed,
    )


def _make_samples(spec, count, mask, noise_variance):
    rng = np.random.default_rng(spec.seed)
    out = []
    for _ in range(count):
        img = make_phantom_image(spec, rng)
        b = forward_op(img, mask)
        if noise_variance > 0:
            b = add_noise(b, mask, noise_variance, seed=int(rng.integers(2**31)))
        out.append(Sample(img, b, mask))
    return out


def build_client_data(config: ExperimentConfig) -> list[ClientData]:
    """Deterministic per-client datasets with heterogeneous contrast and
    (scenario 2) heterogeneous sampling patterns."""
    out = []
    for k in range(config.clients):
        contrast = _CONTRASTS[k % len(_CONTRASTS)]
        mask = _client_mask(config, k)
        train_spec = PhantomSpec(
            kind=config.phantom_kind,
            size=config.image_size,
            contrast=contrast,
            seed=int(np.random.default_rng((config.seed, k, 0xDA7A)).integers(2**31)),
        )
        test_spec = PhantomSpec(
            kind=config.phantom_kind,
            size=config.image_size,
            contrast=contrast,
            seed=int(np.random.default_rng((config.seed, k, 0x7E57)).integers(2**31)),
        )
        train = _make_samples(train_spec, config.images_per_client, mask, config.noise_variance)
        test = _make_samples(test_spec, config.test_images_per_client, mask, config.noise_variance)
        s1, s2 = split_dataset(train, config.split_ratio, seed=(config.seed, k, 0x5711))
        out.append(ClientData(k, train_spec, mask, train, s1, s2, test))
    return out


# ---------------------------------------------------------------------------
# run + artifacts


FINAL_COLUMNS = [
    "client",
    "psnr",
    "ssim",
    "zf_psnr",
    "zf_ssim",
    "train_error",
    "test_error",
    "parameter_count",
]

# manifest fields that must agree for two runs to be comparable
_COMPAT_KEYS = (
    "seed",
    "scenario",
    "clients",
    "image_size",
    "images_per_client",
    "test_images_per_client",
    "phantom_kind",
    "acceleration",
    "center_fraction",
    "noise_variance",
    "split_ratio",
)


@dataclass
class ExperimentResult:
    out_dir: Path
    config: ExperimentConfig
    federation: FederationResult
    final_rows: list[dict]
    cpu_seconds: float
    wall_seconds: float


def run_experiment(
    config: ExperimentConfig, out_dir, render_figures: bool = True
) -> ExperimentResult:
    """Execute one full run and write every artifact under ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "data").mkdir(exist_ok=True)
    (out_dir / "checkpoints").mkdir(exist_ok=True)

    t_wall, t_cpu = time.perf_counter(), time.process_time()
    data = build_client_data(config)
    for cd in data:
        save_dataset(
            out_dir / "data" / f"client{cd.client_id}.phantoms",
            [s.image for s in cd.train],
            {
                "client": cd.client_id,
                "kind": cd.spec.kind,
                "contrast": cd.spec.contrast,
                "spec_seed": cd.spec.seed,
                "mask_pattern": cd.mask.pattern,
                "mask_seed": cd.mask.seed,
            },
        )

    fed_config = FedRunConfig(
        strategy=config.strategy,
        partition_scheme=config.partition_scheme,
        loss_mode=config.loss_mode,
        rounds=config.rounds,
        local_epochs=config.local_epochs,
        learning_rate=config.learning_rate,
        batch_size=config.batch_size,
        gamma=config.gamma,
        fedprox_mu=config.fedprox_mu,
        hidden=config.hidden,
        unroll_steps=config.unroll_steps,
        cg_iters=config.cg_iters,
        cg_tol=config.cg_tol,
        lam_init=config.lam_init,
        seed=config.seed,
        val_interval=config.val_interval,
    )
    federation = run_federation(
        fed_config,
        [(cd.s1, cd.s2) for cd in data],
        val_sets=[cd.test for cd in data],
    )
    cpu_seconds = time.process_time() - t_cpu
    wall_seconds = time.perf_counter() - t_wall

    write_reports_csv(federation.reports, out_dir / "metrics.csv")

    final_rows = []
    reports = {}
    for cd, client in zip(data, federation.clients):
        p, s = evaluate_model(client.model, cd.test)
        zp, zs = zero_filled_metrics(cd.test)
        rep = gen_report(client.model, cd.s1, cd.test)
        reports[str(cd.client_id)] = {
            "train_error": rep.train_error,
            "test_error": rep.test_error,
            "parameter_count": rep.parameter_count,
            "train_samples": rep.train_samples,
        }
        final_rows.append(
            {
                "client": cd.client_id,
                "psnr": p,
                "ssim": s,
                "zf_psnr": zp,
                "zf_ssim": zs,
                "train_error": rep.train_error,
                "test_error": rep.test_error,
                "parameter_count": rep.parameter_count,
            }
        )
    with open(out_dir / "final_metrics.csv", "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=FINAL_COLUMNS)
        writer.writeheader()
        for row in final_rows:
            writer.writerow(
                {
                    k: (format(v, ".17g") if isinstance(v, float) else v)
                    for k, v in row.items()
                }
            )
    (out_dir / "gen_report.json").write_text(
        json.dumps(reports, indent=2, sort_keys=True)
    )

    save_checkpoint(out_dir / "checkpoints" / "server.ckpt", federation.server.model)
    for client in federation.clients:
        save_checkpoint(
            out_dir / "checkpoints" / f"client{client.client_id}.ckpt", client.model
        )

    manifest = {
        "format": 1,
        "config": config.to_dict(),
        "cpu_seconds": cpu_seconds,
        "wall_seconds": wall_seconds,
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))

    if render_figures:
        from . import plots

        plots.render_run_figures(out_dir, config, data, federation, final_rows)

    return ExperimentResult(
        out_dir, config, federation, final_rows, cpu_seconds, wall_seconds
    )


# ---------------------------------------------------------------------------
# comparison


def _load_run(run_dir):
    run_dir = Path(run_dir)
    manifest_path = run_dir / "manifest.json"
    if not manifest_path.exists():
        raise CompareError(f"{run_dir} has no manifest.json")
    manifest = json.loads(manifest_path.read_text())
    with open(run_dir / "final_metrics.csv", newline="") as f:
        rows = list(csv.DictReader(f))
    return manifest, rows


def compare_runs(run_dirs: list, out_path=None) -> list[dict]:
    """Cross-run summary table; refuses runs over different data.

    Two runs are comparable only when every data-defining manifest field
    matches (seed, scenario, phantom recipe, mask parameters).
    """
    if len(run_dirs) < 2:
        raise CompareError("need at least two run directories to compare")
    loaded = [_load_run(d) for d in run_dirs]
    ref = loaded[0][0]["config"]
    for (manifest, _), d in zip(loaded[1:], run_dirs[1:]):
        for key in _COMPAT_KEYS:
            if manifest["config"].get(key) != ref.get(key):
                raise CompareError(
                    f"run {d} is not comparable: {key}="
                    f"{manifest['config'].get(key)!r} vs {ref.get(key)!r}"
                )

    summary = []
    for (manifest, rows), d in zip(loaded, run_dirs):
        psnrs = [float(r["psnr"]) for r in rows]
        ssims = [float(r["ssim"]) for r in rows]
        train = [float(r["train_error"]) for r in rows]
        test = [float(r["test_error"]) for r in rows if r["test_error"]]
        summary.append(
            {
                "run": str(d),
                "strategy": manifest["config"]["strategy"],
                "mean_psnr": float(np.mean(psnrs)),
                "mean_ssim": float(np.mean(ssims)),
                "mean_train_error": float(np.mean(train)),
                "mean_test_error": float(np.mean(test)) if test else float("nan"),
                "parameter_count": int(rows[0]["parameter_count"]),
            }
        )
    if out_path is not None:
        with open(out_path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=list(summary[0]))
            writer.writeheader()
            for row in summary:
                writer.writerow(
                    {
                        k: (format(v, ".6g") if isinstance(v, float) else v)
                        for k, v in row.items()
                    }
                )
    return summary


def format_comparison(summary: list[dict]) -> str:
    """Aligned plain-text table for terminal output."""
    headers = ["strategy", "mean_psnr", "mean_ssim", "mean_train_error", "run"]
    rows = [
        [
            s["strategy"],
            f"{s['mean_psnr']:.2f}",
            f"{s['mean_ssim']:.4f}",
            f"{s['mean_train_error']:.4f}",
            s["run"],
        ]
        for s in summary
    ]
    widths = [max(len(h), *(len(r[i]) for r in rows)) for i, h in enumerate(headers)]
    lines = [
        "  ".join(h.ljust(w) for h, w in zip(headers, widths)),
        "  ".join("-" * w for w in widths),
    ]
    lines += ["  ".join(c.ljust(w) for c, w in zip(row, widths)) for row in rows]
    return "\n".join(lines)

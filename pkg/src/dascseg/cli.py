"""Config-driven command-line entry point tying the pipeline stages together.

Commands communicate through the output directory only: `synth` (or
`preprocess`) writes slice caches, `train-cam` / `train-da` / `self-correct`
write checkpoints, `eval` reads checkpoints and emits reports and plots. Every
command freezes its resolved configuration next to its artifacts.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time
from pathlib import Path

import numpy as np
import yaml
from PIL import Image

from . import adaptation, datapipe, evalmetrics, networks, selfcorrect, synthbench
from .adaptation import TrainingConfig, config_hash
from .datapipe import BinaryMask, Domain
from .determinism import enable_determinism
from .errors import ConfigError, DataError, DascsegError, NumericalAbortError
from .losses import LossWeights
from .selfcorrect import SelfCorrectionConfig

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

TOP_LEVEL_KEYS = {"seed", "out_dir", "data", "synth", "networks", "adaptation",
                  "selfcorrect", "eval"}
DATA_KEYS = {"volumes", "allow_lung_fallback", "margin", "preserve_aspect",
             "window", "cache_dir"}
VOLUME_KEYS = {"image", "lung_mask", "infection_mask", "domain", "scan_id"}
SYNTH_KEYS = {"benchmark", "n_samples", "image_size", "seed", "custom"}
NETWORK_KEYS = {"arch_preset", "resolution", "encoder_init"}
EVAL_KEYS = {"checkpoints", "overlays", "cycles_dir", "dataset_dir", "truth_dir"}


def _reject_unknown(section: str, given: dict, allowed: set[str]) -> None:
    unknown = set(given) - allowed
    if unknown:
        raise ConfigError(
            f"unknown keys in [{section}]: {sorted(unknown)}; allowed: {sorted(allowed)}")


def _dataclass_kwargs(section: str, given: dict, cls) -> dict:
    allowed = {f.name for f in dataclasses.fields(cls)}
    _reject_unknown(section, given, allowed)
    return dict(given)


class RunConfig:
    """Parsed and validated configuration tree for one run."""

    def __init__(self, raw: dict, config_path: str = "<inline>"):
        if not isinstance(raw, dict):
            raise ConfigError(f"config root must be a mapping, got {type(raw).__name__}")
        _reject_unknown("<root>", raw, TOP_LEVEL_KEYS)
        self.raw = raw
        self.path = config_path
        self.seed = int(raw.get("seed", 0))
        self.out_dir = Path(os.environ.get("DASCSEG_OUT", raw.get("out_dir", "runs/run")))
        self.data = dict(raw.get("data", {}))
        _reject_unknown("data", self.data, DATA_KEYS)
        for vol in self.data.get("volumes", []):
            _reject_unknown("data.volumes[]", vol, VOLUME_KEYS)
        self.synth = dict(raw.get("synth", {}))
        _reject_unknown("synth", self.synth, SYNTH_KEYS)
        self.networks = dict(raw.get("networks", {}))
        _reject_unknown("networks", self.networks, NETWORK_KEYS)
        self.adaptation = dict(raw.get("adaptation", {}))
        self.selfcorrect = dict(raw.get("selfcorrect", {}))
        self.eval = dict(raw.get("eval", {}))
        _reject_unknown("eval", self.eval, EVAL_KEYS)

    def training_config(self) -> TrainingConfig:
        kwargs = dict(self.adaptation)
        weights = kwargs.pop("weights", None)
        try:
            kwargs = _dataclass_kwargs("adaptation", kwargs, TrainingConfig)
            if weights is not None:
                kwargs["weights"] = LossWeights(
                    **_dataclass_kwargs("adaptation.weights", weights, LossWeights))
            kwargs.setdefault("seed", self.seed)
            if "arch_preset" in self.networks:
                kwargs["arch_preset"] = self.networks["arch_preset"]
            if "resolution" in self.networks:
                kwargs["resolution"] = tuple(self.networks["resolution"])
            if "encoder_init" in self.networks:
                kwargs["encoder_init"] = str(self.networks["encoder_init"])
            kwargs["device"] = os.environ.get("DASCSEG_DEVICE", kwargs.get("device", "cpu"))
            if "adam_betas" in kwargs:
                kwargs["adam_betas"] = tuple(kwargs["adam_betas"])
            return TrainingConfig(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad [adaptation]/[networks] section: {exc}") from exc

    def selfcorrect_config(self) -> SelfCorrectionConfig:
        kwargs = _dataclass_kwargs("selfcorrect", dict(self.selfcorrect), SelfCorrectionConfig)
        kwargs.setdefault("seed", self.seed)
        if "tta_flips" in kwargs:
            kwargs["tta_flips"] = tuple(kwargs["tta_flips"])
        try:
            return SelfCorrectionConfig(**kwargs)
        except TypeError as exc:
            raise ConfigError(f"bad [selfcorrect] section: {exc}") from exc

    def synth_spec(self) -> synthbench.SynthSpec:
        name = self.synth.get("benchmark", "shift-strong")
        n = int(self.synth.get("n_samples", 200))
        size = tuple(self.synth.get("image_size", (64, 64)))
        if name == "shift-mild":
            spec = synthbench.shift_mild(n, size)
        elif name == "shift-strong":
            spec = synthbench.shift_strong(n, size)
        elif name == "custom":
            if "custom" not in self.synth:
                raise ConfigError("benchmark 'custom' needs a [synth.custom] spec")
            spec = synthbench.SynthSpec.from_dict(self.synth["custom"])
        else:
            raise ConfigError(f"unknown benchmark {name!r}")
        if "seed" in self.synth:
            spec = dataclasses.replace(spec, seed=int(self.synth["seed"]))
        return spec


def load_config(path: str | None, overrides: argparse.Namespace) -> RunConfig:
    raw = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            raw = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse config {p}: {exc}") from exc
    cfg = RunConfig(raw, str(path) if path else "<defaults>")
    if overrides.seed is not None:
        cfg.seed = overrides.seed
        cfg.raw["seed"] = overrides.seed
    if overrides.out is not None:
        cfg.out_dir = Path(overrides.out)
        cfg.raw["out_dir"] = overrides.out
    if getattr(overrides, "preset", None):
        cfg.networks["arch_preset"] = overrides.preset
        cfg.raw.setdefault("networks", {})["arch_preset"] = overrides.preset
    return cfg


def _freeze_run(cfg: RunConfig, command: str, stage_dir: Path, started: float,
                extra: dict | None = None) -> None:
    stage_dir.mkdir(parents=True, exist_ok=True)
    resolved = dict(cfg.raw)
    resolved["seed"] = cfg.seed
    resolved["out_dir"] = str(cfg.out_dir)
    (stage_dir / "resolved_config.yaml").write_text(yaml.safe_dump(resolved, sort_keys=True))
    manifest = {
        "command": command,
        "config_hash": config_hash(resolved),
        "seed": cfg.seed,
        "wall_time_s": round(time.time() - started, 3),
        "lambda_defaults": dataclasses.asdict(cfg.training_config().weights),
    }
    if extra:
        manifest.update(extra)
    (stage_dir / "run_manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


# ---------------------------------------------------------------------------
# Commands


def cmd_preprocess(cfg: RunConfig) -> int:
    started = time.time()
    enable_determinism(cfg.seed)
    volumes = cfg.data.get("volumes", [])
    if not volumes:
        raise ConfigError("no [data].volumes configured for preprocess")
    data_root = Path(os.environ.get("DASCSEG_DATA_ROOT", "."))
    cache_dir = cfg.out_dir / cfg.data.get("cache_dir", "cache")
    window = tuple(cfg.data.get("window", datapipe.HU_WINDOW))
    tcfg = cfg.training_config()
    written_total = 0
    for vol in volumes:
        scan_id = vol.get("scan_id") or Path(vol["image"]).stem.split(".")[0]
        volume = datapipe.read_nifti(data_root / vol["image"])
        lung = vol.get("lung_mask")
        lung_volume = datapipe.read_nifti(data_root / lung) if lung else None
        infection = vol.get("infection_mask")
        infection_volume = (datapipe.read_nifti(data_root / infection)
                            if infection else None)
        samples = datapipe.volume_to_samples(
            volume,
            domain=Domain(vol.get("domain", "source")),
            scan_id=scan_id,
            infection_volume=infection_volume,
            lung_volume=lung_volume,
            allow_lung_fallback=bool(cfg.data.get("allow_lung_fallback", False)),
            resolution=tcfg.resolution,
            window=window,
            margin=int(cfg.data.get("margin", 0)),
            preserve_aspect=bool(cfg.data.get("preserve_aspect", False)),
        )
        written = datapipe.save_slice_cache(
            samples, cache_dir / Domain(vol.get("domain", "source")).value,
            extra_meta={"hu_window": list(window)})
        written_total += written
        print(f"{scan_id}: {len(samples)} slices, {written} new cache files")
    _freeze_run(cfg, "preprocess", cfg.out_dir / "preprocess", started,
                {"new_files": written_total})
    print(f"preprocess done: {written_total} new files under {cache_dir}")
    return EXIT_OK


def save_benchmark(bench: synthbench.Benchmark, out_dir: Path) -> None:
    datapipe.save_slice_cache(bench.source, out_dir / "source")
    datapipe.save_slice_cache(bench.target, out_dir / "target")
    truth_dir = out_dir / "target_truth"
    truth_dir.mkdir(parents=True, exist_ok=True)
    for sid, mask in bench.target_truth.items():
        Image.fromarray(mask.pixels * 255).save(truth_dir / f"{sid}.png")


def load_truth_dir(truth_dir: Path) -> dict[str, BinaryMask]:
    truths = {}
    for p in sorted(Path(truth_dir).glob("*.png")):
        arr = np.asarray(Image.open(p))
        truths[p.stem] = BinaryMask((arr > 127).astype(np.uint8))
    if not truths:
        raise DataError(f"no truth masks under {truth_dir}")
    return truths


def cmd_synth(cfg: RunConfig) -> int:
    started = time.time()
    enable_determinism(cfg.seed)
    spec = cfg.synth_spec()
    bench = synthbench.generate(spec)
    synth_dir = cfg.out_dir / "synth"
    save_benchmark(bench, synth_dir)
    hist, edges = synthbench.foreground_fraction_histogram(
        bench.source + bench.target, bench.target_truth)
    stats = {
        "spec": spec.to_dict(),
        "n_source": len(bench.source),
        "n_target": len(bench.target),
        "histogram_distance": synthbench.histogram_distance(bench.source, bench.target),
        "foreground_fraction_histogram": {
            "counts": hist.tolist(),
            "bin_edges": edges.tolist(),
        },
    }
    (synth_dir / "stats.json").write_text(json.dumps(stats, indent=1, sort_keys=True))
    _freeze_run(cfg, "synth", synth_dir, started)
    print(f"benchmark written to {synth_dir}")
    print(f"inter-domain histogram distance: {stats['histogram_distance']:.4f}")
    print("foreground-fraction histogram:", hist.tolist())
    return EXIT_OK


def _load_stage_datasets(cfg: RunConfig):
    for base in (cfg.out_dir / "synth",
                 cfg.out_dir / cfg.data.get("cache_dir", "cache")):
        if (base / "source").exists() and (base / "target").exists():
            return (datapipe.load_slice_cache(base / "source"),
                    datapipe.load_slice_cache(base / "target"))
    raise DataError(
        f"no dataset under {cfg.out_dir}; run `dascseg synth` or `dascseg preprocess` first")


def cmd_train_cam(cfg: RunConfig) -> int:
    started = time.time()
    enable_determinism(cfg.seed)
    source, _ = _load_stage_datasets(cfg)
    tcfg = cfg.training_config()
    stage = cfg.out_dir / "train_cam"
    _, vector = adaptation.train_cam_extractor(source, tcfg, out_dir=stage)
    _freeze_run(cfg, "train-cam", stage, started)
    print(f"classifier checkpoint written to {stage}")
    return EXIT_OK


def cmd_train_da(cfg: RunConfig) -> int:
    started = time.time()
    enable_determinism(cfg.seed)
    source, target = _load_stage_datasets(cfg)
    tcfg = cfg.training_config()
    cam_vec = None
    if tcfg.cam_enabled:
        cam_dir = cfg.out_dir / "train_cam"
        if not (cam_dir / "manifest.json").exists():
            raise DataError(
                f"no classifier checkpoint under {cam_dir}; run `dascseg train-cam` first")
        vectors, _ = networks.load_checkpoint(cam_dir)
        cam_vec = vectors["cam_extractor"]
    stage = cfg.out_dir / "train_da"
    vectors, history = adaptation.train_afd_da(source, target, cam_vec, tcfg,
                                               out_dir=stage)
    _freeze_run(cfg, "train-da", stage, started, {"iterations": len(history)})
    print(f"adaptation checkpoint written to {stage / 'afd_da'} "
          f"({len(history)} iterations)")
    return EXIT_OK


def cmd_self_correct(cfg: RunConfig) -> int:
    started = time.time()
    enable_determinism(cfg.seed)
    source, target = _load_stage_datasets(cfg)
    da_dir = cfg.out_dir / "train_da" / "afd_da"
    if not (da_dir / "manifest.json").exists():
        raise DataError(f"no adaptation checkpoint under {da_dir}; run `dascseg train-da` first")
    vectors, _ = networks.load_checkpoint(da_dir)
    tcfg = cfg.training_config()
    sccfg = cfg.selfcorrect_config()
    stage = cfg.out_dir / "self_correct"
    final_vectors, labels, history = selfcorrect.run_self_correction(
        vectors, source, target, sccfg, tcfg, out_dir=stage)
    networks.save_checkpoint(stage / "final", final_vectors,
                             adaptation.manifest_for(tcfg, kind="self_correct_final",
                                                     cycles=sccfg.cycles))
    _freeze_run(cfg, "self-correct", stage, started, {"cycles": sccfg.cycles})
    print(f"self-correction finished: {sccfg.cycles} cycles, artifacts under {stage}")
    return EXIT_OK


def _plot_dice_per_cycle(cycle_rows: list[dict], out_base: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    cycles = [r["cycle"] for r in cycle_rows]
    dices = [r["dice"] * 100 for r in cycle_rows]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(cycles, dices, marker="o")
    ax.set_xlabel("cycle")
    ax.set_ylabel("target Dice (%)")
    ax.set_title("Dice per self-correction cycle")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_base.with_suffix(".svg"))
    fig.savefig(out_base.with_suffix(".png"), dpi=150)
    plt.close(fig)


def cmd_eval(cfg: RunConfig) -> int:
    started = time.time()
    enable_determinism(cfg.seed)
    tcfg = cfg.training_config()
    stage = cfg.out_dir / "eval"
    stage.mkdir(parents=True, exist_ok=True)

    dataset_dir = Path(cfg.eval.get("dataset_dir", cfg.out_dir / "synth" / "target"))
    truth_dir = Path(cfg.eval.get("truth_dir", cfg.out_dir / "synth" / "target_truth"))
    samples = datapipe.load_slice_cache(dataset_dir)
    truths = load_truth_dir(truth_dir)

    checkpoints = dict(cfg.eval.get("checkpoints", {}))
    if not checkpoints:
        default = cfg.out_dir / "train_da" / "afd_da"
        if (default / "manifest.json").exists():
            checkpoints["afd_da"] = str(default)
        final = cfg.out_dir / "self_correct" / "final"
        if (final / "manifest.json").exists():
            checkpoints["self_correct"] = str(final)
    if not checkpoints:
        raise DataError("nothing to evaluate: configure [eval].checkpoints or train first")

    comparison = []
    for name, path in sorted(checkpoints.items()):
        ckpt = Path(path)
        if not (ckpt / "manifest.json").exists():
            raise DataError(f"checkpoint {name} not found at {ckpt}; run its stage first")
        vectors, manifest = networks.load_checkpoint(ckpt)
        # score each model under the config it was trained with when recorded
        model_cfg = tcfg
        if isinstance(manifest.get("config"), dict):
            try:
                model_cfg = TrainingConfig.from_dict(manifest["config"])
            except (TypeError, ConfigError):
                model_cfg = tcfg
        overlays = stage / f"{name}_overlays" if cfg.eval.get("overlays") else None
        report = evalmetrics.evaluate(
            vectors, samples, truths, model_cfg, model_id=name,
            config_hash=manifest.get("config_hash", ""), overlays_dir=overlays)
        evalmetrics.write_report(report, stage / f"{name}_report.json",
                                 stage / f"{name}_per_sample.csv")
        row = {"model": name, **{k: round(v, 6) for k, v in report.aggregate().items()}}
        comparison.append(row)
        agg = report.aggregate()
        print(f"{name}: dice {agg['dice'] * 100:.2f}%  sen {agg['sen'] * 100:.2f}%  "
              f"spc {agg['spc'] * 100:.2f}%  hd {agg['hd']:.2f}  ja {agg['ja'] * 100:.2f}%")

    (stage / "comparison.json").write_text(json.dumps(comparison, indent=1, sort_keys=True))
    import csv as csvmod

    with open(stage / "comparison.csv", "w", newline="") as f:
        writer = csvmod.DictWriter(f, fieldnames=list(comparison[0].keys()))
        writer.writeheader()
        writer.writerows(comparison)

    cycles_dir = Path(cfg.eval.get("cycles_dir", cfg.out_dir / "self_correct"))
    cycle_dirs = sorted(cycles_dir.glob("cycle_*")) if cycles_dir.exists() else []
    cycle_dirs = [d for d in cycle_dirs if (d / "manifest.json").exists()]
    if cycle_dirs:
        rows = []
        for d in cycle_dirs:
            vectors, manifest = networks.load_checkpoint(d)
            cycle_cfg = tcfg
            if isinstance(manifest.get("config"), dict):
                try:
                    cycle_cfg = TrainingConfig.from_dict(manifest["config"])
                except (TypeError, ConfigError):
                    cycle_cfg = tcfg
            report = evalmetrics.evaluate(vectors, samples, truths, cycle_cfg,
                                          model_id=d.name)
            rows.append({"cycle": int(d.name.split("_")[1]),
                         "dice": report.aggregate()["dice"]})
        with open(stage / "dice_per_cycle.csv", "w", newline="") as f:
            writer = csvmod.DictWriter(f, fieldnames=["cycle", "dice"])
            writer.writeheader()
            writer.writerows(rows)
        _plot_dice_per_cycle(rows, stage / "dice_per_cycle")
        print(f"dice-per-cycle plot written for {len(rows)} cycles")

    _freeze_run(cfg, "eval", stage, started, {"models": sorted(checkpoints)})
    return EXIT_OK


COMMANDS = {
    "preprocess": cmd_preprocess,
    "synth": cmd_synth,
    "train-cam": cmd_train_cam,
    "train-da": cmd_train_da,
    "self-correct": cmd_self_correct,
    "eval": cmd_eval,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dascseg",
        description="Two-stage domain-adaptation segmentation pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="YAML config file")
        p.add_argument("--out", default=None, help="output directory (overrides config)")
        p.add_argument("--seed", type=int, default=None, help="global seed override")
        p.add_argument("--preset", choices=["small", "paper"], default=None,
                       help="architecture preset override")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args)
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalAbortError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

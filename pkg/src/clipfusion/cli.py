"""Command-line entry points: bank building, detection, evaluation, and
synthetic-data generation.

Config precedence: CLI flags > --config JSON file > built-in defaults.
All randomness flows from the explicit --seed list. Exit codes: 0 success,
2 usage error, 3 data error, 4 backend error.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import __version__
from .backends import BackendBundle, MOCK_MODEL_ID, create_backends
from .backends.clip_encoder import DEFAULT_CLIP_MODEL_ID
from .backends.sd_inpaint import DEFAULT_DIFFUSION_MODEL_ID
from .core import (
    FusionWeights,
    ScoreMap,
    bilinear_resize,
    load_score_map,
    save_heatmap_png,
    save_score_map,
)
from .data import DatasetIndex, discover, load_image, load_mask, sample_k_shot
from .errors import (
    BackendUnavailableError,
    IngestionError,
    InvalidArgumentError,
    MetricError,
    PromptFormatError,
    TokenAlignmentError,
    UsageError,
)
from .memory import ReferenceBank, build_bank, load_bank, save_bank
from .metrics import DEFAULT_FPR_LIMIT, EvalRecord, evaluate_records
from .prompts import render_clip_prompts, render_diffusion_prompts, spec_for_category
from .scoring import (
    ScoringConfig,
    extract_image_features,
    score_image_features,
)
from .synthetic import make_synthetic_dataset

BACKEND_SCOPES = ("fusion", "clip_only", "diffusion_only", "mock")


@dataclass
class RunConfig:
    dataset_root: Path
    out_dir: Path
    layout: str = "mvtec"
    category: str = "all"
    shots: int = 0
    seeds: Tuple[int, ...] = (0,)
    backend: str = "mock"
    clip_model_id: str = DEFAULT_CLIP_MODEL_ID
    diffusion_model_id: str = DEFAULT_DIFFUSION_MODEL_ID
    device: str = "cpu"
    alpha_seg: float = 0.25
    alpha_cls: float = 0.75
    states: Optional[Tuple[str, ...]] = None
    diff_pairs: Optional[Tuple[Tuple[int, int], ...]] = None
    clip_blocks: Optional[Tuple[int, ...]] = None
    ca_timestep: Optional[int] = None
    temperature: Optional[float] = None
    layer_selection: Optional[str] = None
    smoothing_sigma: float = 0.0
    fpr_limit: float = DEFAULT_FPR_LIMIT
    banks_dir: Optional[Path] = None
    workers: int = 1
    save_component_maps: bool = False
    prompt_overrides: Dict[str, dict] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.shots < 0:
            raise UsageError("--shots must be non-negative")
        if not self.seeds:
            raise UsageError("--seeds must name at least one seed")
        if self.backend not in BACKEND_SCOPES:
            raise UsageError(f"--backend must be one of {BACKEND_SCOPES}")

    def scoring_config(self) -> ScoringConfig:
        kwargs = {"fusion": FusionWeights(self.alpha_seg, self.alpha_cls)}
        if self.clip_blocks is not None:
            kwargs["clip_blocks"] = self.clip_blocks
        if self.diff_pairs is not None:
            kwargs["diff_pairs"] = self.diff_pairs
        if self.states is not None:
            kwargs["states"] = self.states
        if self.ca_timestep is not None:
            kwargs["cross_attention_timestep"] = self.ca_timestep
        if self.temperature is not None:
            kwargs["temperature"] = self.temperature
        if self.layer_selection is not None:
            kwargs["layer_selection"] = self.layer_selection
        kwargs["smoothing_sigma"] = self.smoothing_sigma
        return ScoringConfig(**kwargs)

    def model_ids(self) -> Tuple[Optional[str], Optional[str]]:
        """(clip id, diffusion id) after applying the backend scope."""
        clip_id = MOCK_MODEL_ID if self.backend == "mock" else self.clip_model_id
        diff_id = MOCK_MODEL_ID if self.backend == "mock" else self.diffusion_model_id
        if self.backend == "clip_only":
            diff_id = None
        if self.backend == "diffusion_only":
            clip_id = None
        return clip_id, diff_id

    def make_backends(self) -> BackendBundle:
        clip_id, diff_id = self.model_ids()
        return create_backends(clip_id, diff_id, device=self.device)


def _bank_path(out_dir: Path, category: str, seed: int, shots: int) -> Path:
    return Path(out_dir) / "banks" / f"{category}_seed{seed}_k{shots}.bank"


def _results_dir(out_dir: Path, category: str, seed: int) -> Path:
    return Path(out_dir) / "results" / category / f"seed_{seed}"


def _categories(index: DatasetIndex, selector: str) -> List[str]:
    if selector == "all":
        return sorted(index.categories)
    index.category(selector)  # raises a descriptive error when absent
    return [selector]


# ---------------------------------------------------------------------------
# build-bank
# ---------------------------------------------------------------------------


def _build_banks_for_category(run: RunConfig, category: str) -> List[dict]:
    index = discover(run.dataset_root, run.layout)
    cfg = run.scoring_config()
    backends = run.make_backends()
    records = []
    for seed in run.seeds:
        paths = sample_k_shot(index, category, run.shots, seed)
        images = [load_image(p) for p in paths]
        bank = build_bank(
            images,
            cfg.clip_blocks if backends.vl is not None else (),
            cfg.diff_pairs if backends.diffusion is not None else (),
            backends,
            category=category,
            seed=seed,
        )
        path = _bank_path(run.out_dir, category, seed, run.shots)
        save_bank(bank, path)
        records.append(
            {
                "category": category,
                "seed": seed,
                "shots": run.shots,
                "path": str(path.relative_to(run.out_dir)),
                "references": [p.name for p in paths],
            }
        )
        print(f"[build-bank] {category} seed={seed}: {len(paths)} references -> {path}")
    return records


def cmd_build_bank(run: RunConfig) -> int:
    if run.shots < 1:
        raise UsageError("--shots must be >= 1 for bank building; zero-shot needs no banks")
    index = discover(run.dataset_root, run.layout)
    categories = _categories(index, run.category)
    if run.workers > 1:
        with ProcessPoolExecutor(max_workers=run.workers) as pool:
            chunks = list(pool.map(_build_banks_for_category, [run] * len(categories), categories))
    else:
        chunks = [_build_banks_for_category(run, c) for c in categories]
    manifest = {"shots": run.shots, "seeds": list(run.seeds), "banks": [r for c in chunks for r in c]}
    manifest_path = Path(run.out_dir) / "banks" / "manifest.json"
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    print(f"[build-bank] wrote {len(manifest['banks'])} banks, manifest at {manifest_path}")
    return 0


# ---------------------------------------------------------------------------
# detect
# ---------------------------------------------------------------------------


def _detect_category(run: RunConfig, category: str) -> int:
    index = discover(run.dataset_root, run.layout)
    cfg = run.scoring_config()
    backends = run.make_backends()
    cat = index.category(category)

    prompt_spec = spec_for_category(category, states=run.states, overrides=run.prompt_overrides)
    queries, _ = render_diffusion_prompts(prompt_spec)
    text_normal = text_abnormal = None
    temperature = cfg.temperature
    if backends.vl is not None:
        normal_prompt, abnormal_prompt = render_clip_prompts(prompt_spec)
        text_normal = backends.vl.text_embedding(normal_prompt)
        text_abnormal = backends.vl.text_embedding(abnormal_prompt)
        if temperature is None:
            temperature = backends.vl.temperature

    banks: Dict[int, Optional[ReferenceBank]] = {}
    for seed in run.seeds:
        if run.shots > 0:
            path = _bank_path(run.banks_dir or run.out_dir, category, seed, run.shots)
            if not path.exists():
                raise IngestionError(
                    f"missing bank for {category} seed={seed}: expected {path}; "
                    f"run build-bank first"
                )
            banks[seed] = load_bank(path)
        else:
            banks[seed] = None

    writers = {}
    for seed in run.seeds:
        rdir = _results_dir(run.out_dir, category, seed)
        (rdir / "maps").mkdir(parents=True, exist_ok=True)
        writers[seed] = (rdir / "results.jsonl").open("w")

    n = 0
    try:
        for sample in cat.test:
            image = load_image(sample.image_path)
            image_id = f"{sample.defect_type}_{sample.image_path.stem}"
            feats = extract_image_features(image, queries, cfg, backends, need_vision=run.shots > 0)
            for seed in run.seeds:
                result = score_image_features(
                    feats, cfg, text_normal, text_abnormal, banks[seed],
                    image_id=image_id, temperature=temperature,
                )
                rdir = _results_dir(run.out_dir, category, seed)
                stem = rdir / "maps" / image_id
                save_score_map(result.fused_map, stem)
                save_heatmap_png(result.fused_map, stem.with_suffix(".png"))
                if run.save_component_maps:
                    for name, comp in result.component_maps.items():
                        save_score_map(comp, rdir / "maps" / f"{image_id}__{name}")
                record = {
                    "image_id": image_id,
                    "category": category,
                    "seed": seed,
                    "shots": run.shots,
                    "label": sample.label,
                    "defect_type": sample.defect_type,
                    "image_path": str(sample.image_path.relative_to(run.dataset_root)),
                    "mask_path": (
                        str(sample.mask_path.relative_to(run.dataset_root))
                        if sample.mask_path is not None
                        else None
                    ),
                    "fused_score": result.fused_score,
                    "component_scores": result.component_scores,
                    "map": f"maps/{image_id}",
                }
                writers[seed].write(json.dumps(record, sort_keys=True) + "\n")
            n += 1
    finally:
        for fh in writers.values():
            fh.close()
    print(f"[detect] {category}: {n} images x {len(run.seeds)} seeds")
    return n


def cmd_detect(run: RunConfig) -> int:
    index = discover(run.dataset_root, run.layout)
    categories = _categories(index, run.category)
    if run.workers > 1:
        with ProcessPoolExecutor(max_workers=run.workers) as pool:
            list(pool.map(_detect_category, [run] * len(categories), categories))
    else:
        for category in categories:
            _detect_category(run, category)
    return 0


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------


def _evaluate_category_seed(run: RunConfig, category: str, seed: int) -> dict:
    rdir = _results_dir(run.out_dir, category, seed)
    results_file = rdir / "results.jsonl"
    if not results_file.exists():
        raise UsageError(f"no detection results at {results_file}; run detect first")
    rows = [json.loads(line) for line in results_file.read_text().splitlines() if line]
    if not rows:
        raise UsageError(f"empty detection results at {results_file}")

    records: List[EvalRecord] = []
    for row in rows:
        score_map = load_score_map(rdir / row["map"])
        if row["mask_path"] is not None:
            mask = load_mask(Path(run.dataset_root) / row["mask_path"])
        else:
            image = load_image(Path(run.dataset_root) / row["image_path"])
            mask = np.zeros(image.shape[:2], dtype=bool)
        if score_map.values.shape != mask.shape:
            # maps are scored at the mask's native resolution
            score_map = ScoreMap(
                bilinear_resize(score_map.values, mask.shape[0], mask.shape[1]),
                normalized=score_map.normalized,
            )
        records.append(
            EvalRecord(row["image_id"], row["label"], row["fused_score"],
                       map=score_map, mask=mask)
        )

    entry = {"category": category, "seed": seed, "shots": rows[0]["shots"]}
    entry.update(evaluate_records(records, fpr_limit=run.fpr_limit))
    return entry


def cmd_evaluate(run: RunConfig) -> int:
    results_root = Path(run.out_dir) / "results"
    if run.category == "all":
        if not results_root.is_dir():
            raise UsageError(f"no detection results under {results_root}")
        categories = sorted(p.name for p in results_root.iterdir() if p.is_dir())
        if not categories:
            raise UsageError(f"no detection results under {results_root}")
    else:
        categories = [run.category]

    metrics_dir = Path(run.out_dir) / "metrics"
    metrics_dir.mkdir(parents=True, exist_ok=True)
    all_metrics = ("auroc_image", "aupr", "auroc_pixel", "aupro")

    per_category: Dict[str, List[dict]] = {}
    for category in categories:
        entries = [_evaluate_category_seed(run, category, seed) for seed in run.seeds]
        per_category[category] = entries
        report = {
            "category": category,
            "shots": entries[0]["shots"],
            "seeds": list(run.seeds),
            "per_seed": entries,
        }
        for metric in all_metrics:
            values = [e[metric] for e in entries if metric in e]
            if values:
                report[f"{metric}_mean"] = float(np.mean(values))
                report[f"{metric}_std"] = float(np.std(values))
        (metrics_dir / f"{category}.json").write_text(json.dumps(report, indent=2, sort_keys=True))
        shown = ", ".join(
            f"{m}={report[f'{m}_mean']:.4f}±{report[f'{m}_std']:.4f}"
            for m in all_metrics
            if f"{m}_mean" in report
        )
        print(f"[evaluate] {category} (k={report['shots']}): {shown}")

    # Protocol aggregate: average categories within each seed, then mean/std
    # across seeds.
    summary: Dict[str, object] = {
        "categories": categories,
        "seeds": list(run.seeds),
        "shots": next(iter(per_category.values()))[0]["shots"],
        "fpr_limit": run.fpr_limit,
    }
    for metric in all_metrics:
        per_seed_means = []
        for i, seed in enumerate(run.seeds):
            values = [per_category[c][i][metric] for c in categories if metric in per_category[c][i]]
            if values:
                per_seed_means.append(float(np.mean(values)))
        if per_seed_means:
            summary[f"{metric}_mean"] = float(np.mean(per_seed_means))
            summary[f"{metric}_std"] = float(np.std(per_seed_means))
            summary[f"{metric}_per_seed"] = per_seed_means
    (metrics_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    shown = ", ".join(
        f"{m}={summary[f'{m}_mean']:.4f}±{summary[f'{m}_std']:.4f}"
        for m in all_metrics
        if f"{m}_mean" in summary
    )
    print(f"[evaluate] aggregate over {len(categories)} categories: {shown}")
    return 0


# ---------------------------------------------------------------------------
# make-synthetic
# ---------------------------------------------------------------------------


def cmd_make_synthetic(out_root: Path, n_categories: int, n_images: int, seed: int,
                       image_size: int) -> int:
    summary = make_synthetic_dataset(
        out_root, n_categories=n_categories, n_images=n_images, seed=seed,
        image_size=image_size,
    )
    for category, info in summary.items():
        fractions = info["defect_fractions"]
        print(
            f"[make-synthetic] {category}: train={info['train']} "
            f"test={info['test_good']}+{info['test_defect']} "
            f"defect fraction [{min(fractions):.4f}, {max(fractions):.4f}]"
        )
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _parse_seeds(text: str) -> Tuple[int, ...]:
    try:
        return tuple(int(s) for s in text.split(",") if s != "")
    except ValueError:
        raise UsageError(f"bad --seeds value: {text!r}") from None


def _parse_pairs(text: str) -> Tuple[Tuple[int, int], ...]:
    try:
        pairs = []
        for chunk in text.split(","):
            t, b = chunk.split(":")
            pairs.append((int(t), int(b)))
        return tuple(pairs)
    except ValueError:
        raise UsageError(f"bad --diff-pairs value (want 't:b,t:b'): {text!r}") from None


def _parse_ints(text: str) -> Tuple[int, ...]:
    try:
        return tuple(int(s) for s in text.split(",") if s != "")
    except ValueError:
        raise UsageError(f"bad integer list: {text!r}") from None


def _add_run_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--dataset-root", type=Path, required=True)
    p.add_argument("--layout", choices=("mvtec", "visa"), default=None)
    p.add_argument("--category", default=None, help="category name or 'all'")
    p.add_argument("--shots", type=int, default=None)
    p.add_argument("--seeds", default=None, help="comma-separated seed list, e.g. 0,1,2,3,4")
    p.add_argument("--backend", choices=BACKEND_SCOPES, default=None)
    p.add_argument("--clip-model-id", default=None)
    p.add_argument("--diffusion-model-id", default=None)
    p.add_argument("--device", default=None)
    p.add_argument("--alpha-seg", type=float, default=None)
    p.add_argument("--alpha-cls", type=float, default=None)
    p.add_argument("--states", default=None, help="comma-separated state words")
    p.add_argument("--diff-pairs", default=None, help="timestep:block pairs, e.g. 201:3,401:2,801:1")
    p.add_argument("--clip-blocks", default=None, help="comma-separated encoder block indices")
    p.add_argument("--ca-timestep", type=int, default=None)
    p.add_argument("--temperature", type=float, default=None)
    p.add_argument("--smoothing-sigma", type=float, default=None)
    p.add_argument("--fpr-limit", type=float, default=None)
    p.add_argument("--banks-dir", type=Path, default=None)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--save-component-maps", action="store_true", default=None)
    p.add_argument("--config", type=Path, default=None, help="JSON config file")
    p.add_argument("--out", type=Path, required=True)


_CONFIG_KEYS = {
    "layout": "mvtec",
    "category": "all",
    "shots": 0,
    "seeds": (0,),
    "backend": "mock",
    "clip_model_id": DEFAULT_CLIP_MODEL_ID,
    "diffusion_model_id": DEFAULT_DIFFUSION_MODEL_ID,
    "device": "cpu",
    "alpha_seg": 0.25,
    "alpha_cls": 0.75,
    "states": None,
    "diff_pairs": None,
    "clip_blocks": None,
    "ca_timestep": None,
    "temperature": None,
    "layer_selection": None,
    "smoothing_sigma": 0.0,
    "fpr_limit": DEFAULT_FPR_LIMIT,
    "banks_dir": None,
    "workers": 1,
    "save_component_maps": False,
}


def _run_config(args: argparse.Namespace) -> RunConfig:
    file_cfg: Dict[str, object] = {}
    if args.config is not None:
        try:
            file_cfg = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config file {args.config}: {exc}") from exc

    def pick(key: str):
        cli = getattr(args, key, None)
        if cli is not None:
            return cli
        if key in file_cfg:
            return file_cfg[key]
        return _CONFIG_KEYS[key]

    seeds = pick("seeds")
    if isinstance(seeds, str):
        seeds = _parse_seeds(seeds)
    else:
        seeds = tuple(int(s) for s in seeds)
    states = pick("states")
    if isinstance(states, str):
        states = tuple(s for s in states.split(",") if s)
    elif states is not None:
        states = tuple(states)
    diff_pairs = pick("diff_pairs")
    if isinstance(diff_pairs, str):
        diff_pairs = _parse_pairs(diff_pairs)
    elif diff_pairs is not None:
        diff_pairs = tuple((int(t), int(b)) for t, b in diff_pairs)
    clip_blocks = pick("clip_blocks")
    if isinstance(clip_blocks, str):
        clip_blocks = _parse_ints(clip_blocks)
    elif clip_blocks is not None:
        clip_blocks = tuple(int(b) for b in clip_blocks)
    layout = pick("layout")
    if layout == "visa":
        layout = "visa_organized"
    prompt_overrides = file_cfg.get("prompts", {})

    return RunConfig(
        dataset_root=Path(args.dataset_root),
        out_dir=Path(args.out),
        layout=layout,
        category=pick("category"),
        shots=int(pick("shots")),
        seeds=seeds,
        backend=pick("backend"),
        clip_model_id=pick("clip_model_id"),
        diffusion_model_id=pick("diffusion_model_id"),
        device=pick("device"),
        alpha_seg=float(pick("alpha_seg")),
        alpha_cls=float(pick("alpha_cls")),
        states=states,
        diff_pairs=diff_pairs,
        clip_blocks=clip_blocks,
        ca_timestep=pick("ca_timestep"),
        temperature=pick("temperature"),
        layer_selection=pick("layer_selection"),
        smoothing_sigma=float(pick("smoothing_sigma")),
        fpr_limit=float(pick("fpr_limit")),
        banks_dir=pick("banks_dir"),
        workers=int(pick("workers")),
        save_component_maps=bool(pick("save_component_maps")),
        prompt_overrides=prompt_overrides,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="clipfusion",
        description="Training-free anomaly classification and segmentation",
    )
    parser.add_argument("--version", action="version", version=f"clipfusion {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-bank", help="extract and persist reference feature banks")
    _add_run_options(p)
    p.set_defaults(func=lambda a: cmd_build_bank(_run_config(a)))

    p = sub.add_parser("detect", help="score test images and write maps + results")
    _add_run_options(p)
    p.set_defaults(func=lambda a: cmd_detect(_run_config(a)))

    p = sub.add_parser("evaluate", help="compute metrics from detection results")
    _add_run_options(p)
    p.set_defaults(func=lambda a: cmd_evaluate(_run_config(a)))

    p = sub.add_parser("make-synthetic", help="generate a desk-scale synthetic dataset")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--categories", type=int, default=3)
    p.add_argument("--images", type=int, default=40, help="test images per category")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=256, help="image side in pixels")
    p.set_defaults(
        func=lambda a: cmd_make_synthetic(a.out, a.categories, a.images, a.seed, a.size)
    )

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, InvalidArgumentError, PromptFormatError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (IngestionError, MetricError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except (BackendUnavailableError, TokenAlignmentError) as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    raise SystemExit(main())

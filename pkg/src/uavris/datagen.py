"""Automatic referring-segmentation dataset construction.

Three steps over pre-labelled semantic imagery: tile sources into fixed
patches and filter by class distribution, caption each (patch, present
category) pair through a pluggable provider under a 10-word constraint,
then clean the text and export RefCOCO-aligned annotations with
per-category statistics.

Tiling is a non-overlapping grid from the origin; right/bottom remainders
smaller than the patch are dropped.  A patch is discarded when any class
exceeds the dominance fraction (strictly greater than 0.70 by default) or
when fewer than ``min_classes`` classes each exceed ``min_fraction``.
Split assignment hashes the source id, so all patches of one source land
in the same split.
"""

import hashlib
import logging
import re
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigurationError, ContractError, IngestionError
from .refcoco import ReferringAnnotation, bbox_from_mask, export_annotations, rle_encode

log = logging.getLogger(__name__)

DEFAULT_BLACKLIST = ("no visible", "not visible", "cannot see", "unclear")


@dataclass
class DatagenConfig:
    patch_size: int = 1024
    dominant_fraction: float = 0.70
    min_classes: int = 2
    min_fraction: float = 0.05
    max_words: int = 10
    max_retries: int = 3
    blacklist: tuple = DEFAULT_BLACKLIST
    split_ratios: dict = field(default_factory=lambda: {
        "train": 0.70, "val": 0.15, "test": 0.15})
    conflict_terms: dict = field(default_factory=dict)
    caption_workers: int = 4
    seed: int = 0
    top_words: int = 50


@dataclass
class SemanticMaskImage:
    """A pre-labelled source: RGB pixels, per-pixel class ids, class table."""

    image: np.ndarray
    mask: np.ndarray
    classes: dict
    source_id: str

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.uint8)
        self.mask = np.asarray(self.mask)
        if self.image.shape[:2] != self.mask.shape:
            raise IngestionError(
                f"{self.source_id}: image {self.image.shape[:2]} and "
                f"mask {self.mask.shape} shapes disagree")
        present = set(np.unique(self.mask).tolist())
        unknown = present - set(self.classes)
        if unknown:
            raise IngestionError(
                f"{self.source_id}: mask values {sorted(unknown)} missing "
                f"from the class table")


@dataclass
class PatchRecord:
    source_id: str
    x: int
    y: int
    image: np.ndarray
    mask: np.ndarray
    class_distribution: dict
    verdict: str = "pending"
    reason: str = None

    @property
    def key(self):
        return f"{self.source_id}_{self.y:05d}_{self.x:05d}"


def crop_patches(src, patch_size=1024):
    """Non-overlapping grid tiling with per-patch class distributions."""
    h, w = src.mask.shape
    if h < patch_size or w < patch_size:
        raise IngestionError(
            f"{src.source_id}: source {h}x{w} smaller than patch size {patch_size}")
    records = []
    for y in range(0, h - patch_size + 1, patch_size):
        for x in range(0, w - patch_size + 1, patch_size):
            pm = src.mask[y:y + patch_size, x:x + patch_size]
            pi = src.image[y:y + patch_size, x:x + patch_size]
            total = pm.size
            dist = {}
            for cid, count in zip(*np.unique(pm, return_counts=True)):
                dist[src.classes[int(cid)]] = int(count) / total
            records.append(PatchRecord(src.source_id, x, y, pi, pm, dist))
    return records


def verdict_for(distribution, cfg):
    """Pure filtering rule on a class-fraction distribution."""
    if any(frac > cfg.dominant_fraction for frac in distribution.values()):
        return "discarded", "dominant_class"
    meaningful = sum(1 for frac in distribution.values() if frac > cfg.min_fraction)
    if meaningful < cfg.min_classes:
        return "discarded", "insufficient_classes"
    return "kept", None


def filter_patch(rec, cfg):
    rec.verdict, rec.reason = verdict_for(rec.class_distribution, cfg)
    return rec.verdict, rec.reason


PROMPT_TEMPLATE = (
    "In at most {max_words} words, describe the {category} visible in this "
    "aerial image patch. The description must mention the word '{category}'."
)


def build_prompt(category, classes, cfg):
    """Render the per-category captioning prompt."""
    names = set(classes.values()) if isinstance(classes, dict) else set(classes)
    if category not in names:
        raise ConfigurationError(f"unknown category {category!r}")
    prompt = PROMPT_TEMPLATE.format(max_words=cfg.max_words, category=category)
    terms = cfg.conflict_terms.get(category)
    if terms:
        prompt += " Do not mention: " + ", ".join(terms) + "."
    return prompt


def caption_is_valid(caption, category, cfg):
    if len(caption.split()) > cfg.max_words:
        return False
    return category.lower() in caption.lower()


def generate_caption(rec, category, provider, classes, cfg):
    """Caption one (kept patch, category) pair; returns None when the
    provider cannot satisfy the constraints within the retry budget."""
    if rec.verdict != "kept":
        raise ContractError(f"patch {rec.key} was not kept ({rec.reason})")
    if rec.class_distribution.get(category, 0.0) <= cfg.min_fraction:
        raise ContractError(
            f"category {category!r} not meaningfully present in patch {rec.key}")
    prompt = build_prompt(category, classes, cfg)
    for attempt in range(cfg.max_retries + 1):
        caption = provider.caption(rec.image, prompt, attempt=attempt)
        if caption_is_valid(caption, category, cfg):
            return caption
        log.info("rejected caption attempt %d for %s/%s: %r",
                 attempt, rec.key, category, caption)
    log.info("sample rejected after %d attempts: %s/%s",
             cfg.max_retries + 1, rec.key, category)
    return None


_CLAUSE_SEP = re.compile(r"[.,;]")


def refine_description(text, category, cfg):
    """Drop clauses containing blacklist phrases; reject if nothing usable
    remains or the category term was lost.  Whitespace is normalized."""
    clauses = _CLAUSE_SEP.split(text)
    kept = []
    for clause in clauses:
        lowered = clause.lower()
        if any(phrase in lowered for phrase in cfg.blacklist):
            continue
        clause = " ".join(clause.split())
        if clause:
            kept.append(clause)
    refined = ", ".join(kept)
    if not refined or category.lower() not in refined.lower():
        return None
    return refined


def assign_split(source_id, ratios):
    """Stable split from a hash of the source id, so one source's patches
    never straddle splits."""
    digest = hashlib.md5(source_id.encode("utf-8")).hexdigest()
    frac = int(digest[:8], 16) / 0xFFFFFFFF
    acc = 0.0
    names = list(ratios)
    for name in names:
        acc += ratios[name]
        if frac <= acc:
            return name
    return names[-1]


def compute_stats(annotations, top_words=50):
    """Per-category counts and top-k word frequencies of the final corpus."""
    categories = Counter(a.category for a in annotations)
    words = Counter()
    for a in annotations:
        words.update(a.tokens)
    top = sorted(words.items(), key=lambda kv: (-kv[1], kv[0]))[:top_words]
    return {
        "annotation_count": len(annotations),
        "per_category_counts": dict(sorted(categories.items())),
        "top_words": [[w, c] for w, c in top],
    }


@dataclass
class PipelineResult:
    patches: list
    annotations: list
    kept: int
    discarded: dict
    rejected_captions: int
    annotation_path: str = ""
    stats: dict = field(default_factory=dict)


def run_pipeline(sources, provider, cfg, out_dir):
    """crop -> filter -> caption -> refine -> export.

    Writes kept patch images, the annotation document, and the statistics
    record under ``out_dir``; returns a summary.  Output ordering is fixed
    (sort by source id then origin) so runs are reproducible bit for bit.
    """
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)

    classes = {}
    for src in sources:
        for cid, name in src.classes.items():
            if classes.get(cid, name) != name:
                raise IngestionError(
                    f"class id {cid} maps to both {classes[cid]!r} and {name!r}")
            classes[cid] = name
    name_to_id = {name: cid for cid, name in classes.items()}

    patches = []
    for src in sources:
        for rec in crop_patches(src, cfg.patch_size):
            filter_patch(rec, cfg)
            patches.append(rec)
    patches.sort(key=lambda r: (r.source_id, r.y, r.x))
    kept = [r for r in patches if r.verdict == "kept"]
    discarded = Counter(r.reason for r in patches if r.verdict == "discarded")

    # caption every (kept patch, meaningful category) pair; thread pool is
    # safe because results are keyed, not ordered by completion
    tasks = []
    for rec in kept:
        cats = sorted(c for c, f in rec.class_distribution.items()
                      if f > cfg.min_fraction)
        for category in cats:
            tasks.append((rec, category))
    with ThreadPoolExecutor(max_workers=max(1, cfg.caption_workers)) as pool:
        captions = list(pool.map(
            lambda t: generate_caption(t[0], t[1], provider, classes, cfg), tasks))

    annotations = []
    images_meta = []
    image_ids = {}
    rejected = 0
    ref_id = ann_id = sent_id = 0
    for (rec, category), caption in zip(tasks, captions):
        if caption is None:
            rejected += 1
            continue
        refined = refine_description(caption, category, cfg)
        if refined is None:
            rejected += 1
            continue
        if rec.key not in image_ids:
            image_ids[rec.key] = len(image_ids) + 1
            images_meta.append({
                "id": image_ids[rec.key],
                "file_name": f"{rec.key}.png",
                "height": cfg.patch_size,
                "width": cfg.patch_size,
                "source_id": rec.source_id,
            })
        cid = name_to_id[category]
        cat_mask = (rec.mask == cid).astype(np.uint8)
        ref_id += 1
        ann_id += 1
        sent_id += 1
        annotations.append(ReferringAnnotation(
            ref_id=ref_id, ann_id=ann_id, image_id=image_ids[rec.key],
            file_name=f"{rec.key}.png", split=assign_split(rec.source_id,
                                                           cfg.split_ratios),
            category_id=cid, category=category,
            sent_id=sent_id, raw=refined, tokens=refined.lower().split(),
            segmentation=rle_encode(cat_mask), area=int(cat_mask.sum()),
            bbox=bbox_from_mask(cat_mask)))

    for rec in kept:
        if rec.key in image_ids:
            Image.fromarray(rec.image).save(out_dir / "images" / f"{rec.key}.png")

    ann_path = out_dir / "annotations.json"
    export_annotations(ann_path, annotations, images_meta,
                       {cid: classes[cid] for cid in sorted(classes)},
                       max_words=cfg.max_words, blacklist=cfg.blacklist)
    stats = compute_stats(annotations, top_words=cfg.top_words)
    stats["kept_patches"] = len(kept)
    stats["discarded_patches"] = dict(sorted(discarded.items()))
    stats["rejected_captions"] = rejected
    import json
    (out_dir / "stats.json").write_text(
        json.dumps(stats, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    return PipelineResult(
        patches=patches, annotations=annotations, kept=len(kept),
        discarded=dict(discarded), rejected_captions=rejected,
        annotation_path=str(ann_path), stats=stats)


# ---------------------------------------------------------------------------
# Directory ingestion
# ---------------------------------------------------------------------------

def load_class_table(path):
    """YAML/JSON class table: {classes: {id: name}, conflict_terms: {...}}."""
    import yaml
    with open(path, encoding="utf-8") as fh:
        doc = yaml.safe_load(fh)
    classes = {int(k): str(v) for k, v in doc["classes"].items()}
    conflicts = {str(k): tuple(v) for k, v in (doc.get("conflict_terms") or {}).items()}
    return classes, conflicts


def load_sources(image_dir, mask_dir, classes):
    """Pair image and mask files by stem; masks are 8-bit class-id images."""
    image_dir, mask_dir = Path(image_dir), Path(mask_dir)
    for d in (image_dir, mask_dir):
        if not d.is_dir():
            raise IngestionError(f"input directory does not exist: {d}")
    sources = []
    for img_path in sorted(image_dir.iterdir()):
        if img_path.suffix.lower() not in (".png", ".jpg", ".jpeg", ".tif", ".tiff"):
            continue
        mask_path = None
        for ext in (".png", ".tif", ".tiff"):
            cand = mask_dir / (img_path.stem + ext)
            if cand.exists():
                mask_path = cand
                break
        if mask_path is None:
            raise IngestionError(f"no mask found for {img_path.name} in {mask_dir}")
        image = np.asarray(Image.open(img_path).convert("RGB"))
        mask = np.asarray(Image.open(mask_path))
        if mask.ndim == 3:
            mask = mask[..., 0]
        sources.append(SemanticMaskImage(image, mask.astype(np.int64),
                                         classes, img_path.stem))
    if not sources:
        raise IngestionError(f"no image files found in {image_dir}")
    return sources
